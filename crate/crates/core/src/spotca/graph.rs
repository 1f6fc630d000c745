//! The attention block recorded on a [`Tape`].
//!
//! Selection runs on score values and is not differentiated; gradients flow
//! through the scores and values of the selected support only.

use super::params::LINEAR_NAMES;
use super::select::{prototype_count, TopK};
use super::{Backend, Result, SpotCaConfig, SpotCaError};
use crate::rng::DropoutKey;
use crate::tensor::{ParamStore, Tape, Var};

/// Tape handles of one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct SpotCaVars {
    pub proj_q: (Var, Var),
    pub proj_k: (Var, Var),
    pub proj_v: (Var, Var),
    pub ffn1: [(Var, Var); 2],
    pub ffn2: [(Var, Var); 2],
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub gate: Var,
}

pub(crate) fn bound_var(store: &ParamStore, bound: &[Var], name: &str) -> Result<Var> {
    store
        .find(name)
        .map(|id| bound[id.0])
        .ok_or_else(|| SpotCaError::InvalidConfig(format!("missing parameter `{name}`")))
}

impl SpotCaVars {
    /// Looks up the handles of a block registered under `prefix`; `bound` is
    /// the result of [`ParamStore::bind`].
    pub fn bind(store: &ParamStore, bound: &[Var], prefix: &str) -> Result<Self> {
        let v = |s: &str| bound_var(store, bound, &format!("{prefix}.{s}"));
        let mut lin = Vec::with_capacity(7);
        for name in LINEAR_NAMES {
            lin.push((v(&format!("{name}.w"))?, v(&format!("{name}.b"))?));
        }
        Ok(Self {
            proj_q: lin[0],
            proj_k: lin[1],
            proj_v: lin[2],
            ffn1: [lin[3], lin[4]],
            ffn2: [lin[5], lin[6]],
            norm_gain: v("norm.gain")?,
            norm_bias: v("norm.bias")?,
            gate: v("gate")?,
        })
    }
}

fn ffn(tape: &mut Tape, layers: &[(Var, Var); 2], x: Var) -> Result<Var> {
    let h = tape.linear(x, layers[0].0, layers[0].1)?;
    let h = tape.relu(h)?;
    Ok(tape.linear(h, layers[1].0, layers[1].1)?)
}

/// Dropout applied to the residual branch of the refinement.
#[derive(Clone, Copy, Debug)]
pub struct DropoutSpec {
    pub p: f64,
    pub key: DropoutKey,
    pub train: bool,
}

impl DropoutSpec {
    pub fn off() -> Self {
        Self {
            p: 0.0,
            key: DropoutKey::new(0, 0, 0),
            train: false,
        }
    }
}

/// `q + Dropout(FFN₂(gate·LN(FFN₁(qp ⊙ v_agg)) + v_agg))` where `qp` is the
/// projected query.
pub fn refine_query(
    tape: &mut Tape,
    vars: &SpotCaVars,
    q: Var,
    qp: Var,
    v_agg: Var,
    dropout: DropoutSpec,
) -> Result<Var> {
    let gated = tape.mul(qp, v_agg)?;
    let inner = ffn(tape, &vars.ffn1, gated)?;
    let normed = tape.layer_norm(inner, vars.norm_gain, vars.norm_bias)?;
    let scaled = tape.scale_by(normed, vars.gate)?;
    let mixed = tape.add(scaled, v_agg)?;
    let o = ffn(tape, &vars.ffn2, mixed)?;
    let o = tape.dropout(o, dropout.p, dropout.key, dropout.train)?;
    Ok(tape.add(q, o)?)
}

/// Per head, per query: the ascending key indices that were attended to.
pub type Supports = Vec<Vec<Vec<usize>>>;

/// Records cross-attention of `queries` (`Nq × C`) against `keys`
/// (`Nv × C`). Guidance semantics match [`super::attend`]; the masked
/// backend attends over exactly the allowed keys, which equals a `-inf`
/// masked full softmax.
#[allow(clippy::too_many_arguments)]
pub fn spot_cross_attention(
    tape: &mut Tape,
    vars: &SpotCaVars,
    cfg: &SpotCaConfig,
    backend: Backend,
    queries: Var,
    keys: Var,
    guidance: Option<&[Vec<bool>]>,
    dropout: DropoutSpec,
) -> Result<(Var, Supports)> {
    let (nq, c) = (tape.value(queries).rows(), tape.value(queries).cols());
    let nv = tape.value(keys).rows();
    cfg.validate(c)?;
    if nv == 0 {
        return Err(SpotCaError::EmptyKeys);
    }
    if tape.value(keys).cols() != c {
        return Err(SpotCaError::DimensionMismatch(format!(
            "queries have {c} channels, keys {}",
            tape.value(keys).cols()
        )));
    }
    if let Some(g) = guidance {
        if g.len() != nq || g.iter().any(|m| m.len() != nv) {
            return Err(SpotCaError::DimensionMismatch(format!(
                "guidance must hold {nq} masks over {nv} keys"
            )));
        }
    }
    let d = c / cfg.heads;
    let qp = tape.linear(queries, vars.proj_q.0, vars.proj_q.1)?;
    let kp = tape.linear(keys, vars.proj_k.0, vars.proj_k.1)?;
    let values = if cfg.value_proj {
        tape.linear(keys, vars.proj_v.0, vars.proj_v.1)?
    } else {
        keys
    };
    let allowed: Vec<Option<&[bool]>> = (0..nq)
        .map(|q| guidance.map(|g| g[q].as_slice()).filter(|m| m.iter().any(|&b| b)))
        .collect();
    let inv_t = cfg.inv_temperature(c);

    let mut topk = TopK::<f64>::new();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut supports = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(qp, h * d, (h + 1) * d)?;
        let kh = tape.slice_cols(kp, h * d, (h + 1) * d)?;
        let qn = tape.l2_normalize_lastdim(qh)?;
        let kn = tape.l2_normalize_lastdim(kh)?;
        let knt = tape.transpose(kn)?;
        let scores = tape.matmul(qn, knt)?;
        let mut sup = Vec::with_capacity(nq);
        for (q, allow) in allowed.iter().enumerate() {
            let row = tape.value(scores).row(q);
            let n_cand = allow.map_or(nv, |m| m.iter().filter(|&&b| b).count());
            let mut s = Vec::new();
            match backend {
                Backend::Prototype => {
                    let k = prototype_count(cfg.rho, n_cand);
                    topk.select(row, *allow, n_cand, k, &mut s);
                }
                Backend::Masked => match allow {
                    Some(m) => s.extend((0..nv).filter(|&j| m[j])),
                    None => s.extend(0..nv),
                },
                Backend::Dense => s.extend(0..nv),
            }
            sup.push(s);
        }
        let vh = tape.slice_cols(values, h * d, (h + 1) * d)?;
        heads.push(tape.sparse_attention(scores, vh, sup.clone(), inv_t)?);
        supports.push(sup);
    }
    let v_agg = tape.concat_cols(&heads)?;
    let out = refine_query(tape, vars, queries, qp, v_agg, dropout)?;
    Ok((out, supports))
}
