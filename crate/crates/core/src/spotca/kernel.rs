//! Forward-only attention kernels.

use std::time::{Duration, Instant};

use super::params::Linear;
use super::select::{prototype_count, HeadSelection, PrototypeSelection, TopK};
use super::{Backend, Result, SpotCaConfig, SpotCaError, SpotCaParams};
use crate::matrix::{Matrix, Real};
use crate::tensor::LAYER_NORM_EPS;
use crate::voxel::SparseVoxelGrid;

#[derive(Clone, Debug)]
pub struct AttentionOptions {
    pub backend: Backend,
    /// Keep per (query, head) indices, scores and weights.
    pub record_selection: bool,
    /// Measure wall time of the scoring and post-scoring phases.
    pub time_phases: bool,
    /// Worker threads for the per-query phase; 1 runs inline.
    pub threads: usize,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self {
            backend: Backend::Prototype,
            record_selection: false,
            time_phases: false,
            threads: 1,
        }
    }
}

/// Exact operation counts of one call. Projections and the refinement
/// block are excluded; they are identical across backends.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// Query-key products: `Nq·Nv·C`.
    pub score_macs: u64,
    pub softmax_exps: u64,
    /// Weighted value sums: `Σ_{q,h} |support|·C/H`.
    pub agg_macs: u64,
}

impl std::ops::AddAssign for OpCounters {
    fn add_assign(&mut self, o: Self) {
        self.score_macs += o.score_macs;
        self.softmax_exps += o.softmax_exps;
        self.agg_macs += o.agg_macs;
    }
}

/// `scoring`: projections, normalization and the score matrix.
/// `post_scoring`: selection, softmax, aggregation and refinement.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub scoring: Duration,
    pub post_scoring: Duration,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput<T> {
    pub queries: Matrix<T>,
    /// Head-concatenated aggregates, `Nq × C`.
    pub v_agg: Matrix<T>,
    pub selection: Option<PrototypeSelection>,
    pub counters: OpCounters,
    pub phases: PhaseTimes,
}

fn check_shapes<T: Real>(
    queries: &Matrix<T>,
    keys: &Matrix<T>,
    params: &SpotCaParams<T>,
    cfg: &SpotCaConfig,
    guidance: Option<&[Vec<bool>]>,
) -> Result<()> {
    let c = params.channels();
    cfg.validate(c)?;
    params.check()?;
    if keys.rows() == 0 {
        return Err(SpotCaError::EmptyKeys);
    }
    if queries.cols() != c || keys.cols() != c {
        return Err(SpotCaError::DimensionMismatch(format!(
            "queries have {} channels, keys {}, parameters {c}",
            queries.cols(),
            keys.cols()
        )));
    }
    if let Some(g) = guidance {
        if g.len() != queries.rows() || g.iter().any(|m| m.len() != keys.rows()) {
            return Err(SpotCaError::DimensionMismatch(format!(
                "guidance must hold {} masks over {} keys",
                queries.rows(),
                keys.rows()
            )));
        }
    }
    Ok(())
}

/// Copies columns `[h·d, (h+1)·d)` and scales each row to unit norm; zero
/// rows stay zero.
fn normalized_head<T: Real>(m: &Matrix<T>, h: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m.rows() * d);
    for i in 0..m.rows() {
        let r = &m.row(i)[h * d..(h + 1) * d];
        let mut ss = T::ZERO;
        for &x in r {
            ss += x * x;
        }
        let n = ss.sqrt();
        if n > T::ZERO {
            out.extend(r.iter().map(|&x| x / n));
        } else {
            out.extend(std::iter::repeat_n(T::ZERO, d));
        }
    }
    out
}

/// Softmax of `row[j]·inv_t` over `support` (ascending), written to `w`.
fn support_weights<T: Real>(row: &[T], support: &[usize], inv_t: T, w: &mut Vec<T>) {
    w.clear();
    let mut m = T::NEG_INFINITY;
    for &j in support {
        m = m.max_of(row[j] * inv_t);
    }
    let mut s = T::ZERO;
    for &j in support {
        let e = (row[j] * inv_t - m).exp();
        s += e;
        w.push(e);
    }
    for x in w.iter_mut() {
        *x = *x / s;
    }
}

/// Full-row softmax with excluded keys at `-inf`.
fn masked_weights<T: Real>(row: &[T], allowed: Option<&[bool]>, inv_t: T, w: &mut Vec<T>) {
    w.clear();
    w.extend(row.iter().enumerate().map(|(j, &s)| match allowed {
        Some(m) if !m[j] => T::NEG_INFINITY,
        _ => s * inv_t,
    }));
    let mut m = T::NEG_INFINITY;
    for &z in w.iter() {
        m = m.max_of(z);
    }
    let mut s = T::ZERO;
    for z in w.iter_mut() {
        *z = (*z - m).exp();
        s += *z;
    }
    for x in w.iter_mut() {
        *x = *x / s;
    }
}

#[inline]
fn axpy<T: Real>(acc: &mut [T], a: T, x: &[T]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

struct HeadCtx<'a, T> {
    backend: Backend,
    values: &'a Matrix<T>,
    allowed: &'a [Option<&'a [bool]>],
    n_cand: &'a [usize],
    rho: f64,
    inv_t: T,
    h: usize,
    d: usize,
    c: usize,
    nv: usize,
    record: bool,
}

/// Selection, softmax and aggregation for the query rows `q0..q0+n` of one
/// head. `scores` holds those rows, `v_agg` the matching output rows.
fn head_rows<T: Real>(
    ctx: &HeadCtx<'_, T>,
    q0: usize,
    scores: &[T],
    v_agg: &mut [T],
    records: &mut Vec<HeadSelection>,
) -> OpCounters {
    let (nv, d, h, c) = (ctx.nv, ctx.d, ctx.h, ctx.c);
    let mut topk = TopK::new();
    let mut support = Vec::new();
    let mut w = Vec::new();
    let mut counters = OpCounters::default();
    for (i, row) in scores.chunks_exact(nv).enumerate() {
        let q = q0 + i;
        let acc = &mut v_agg[i * c + h * d..i * c + (h + 1) * d];
        match ctx.backend {
            Backend::Prototype => {
                let k = prototype_count(ctx.rho, ctx.n_cand[q]);
                topk.select(row, ctx.allowed[q], ctx.n_cand[q], k, &mut support);
                support_weights(row, &support, ctx.inv_t, &mut w);
                for (&j, &wj) in support.iter().zip(&w) {
                    axpy(acc, wj, &ctx.values.row(j)[h * d..(h + 1) * d]);
                }
                counters.softmax_exps += support.len() as u64;
                counters.agg_macs += (support.len() * d) as u64;
            }
            Backend::Dense | Backend::Masked => {
                let allowed = if ctx.backend == Backend::Masked {
                    ctx.allowed[q]
                } else {
                    None
                };
                masked_weights(row, allowed, ctx.inv_t, &mut w);
                for (j, &wj) in w.iter().enumerate() {
                    axpy(acc, wj, &ctx.values.row(j)[h * d..(h + 1) * d]);
                }
                if ctx.record {
                    support.clear();
                    support.extend((0..nv).filter(|&j| allowed.is_none_or(|m| m[j])));
                    let kept: Vec<T> = support.iter().map(|&j| w[j]).collect();
                    w = kept;
                }
                counters.softmax_exps += nv as u64;
                counters.agg_macs += (nv * d) as u64;
            }
        }
        if ctx.record {
            let row64: Vec<f64> = row.iter().map(|x| x.to_f64()).collect();
            let w64: Vec<f64> = w.iter().map(|x| x.to_f64()).collect();
            records.push(HeadSelection::from_support(&support, &row64, &w64));
        }
    }
    counters
}

fn layer_norm<T: Real>(x: &mut Matrix<T>, gain: &[T], bias: &[T]) {
    let cols = x.cols();
    let n = T::from_f64(cols as f64);
    let eps = T::from_f64(LAYER_NORM_EPS);
    for i in 0..x.rows() {
        let r = x.row_mut(i);
        let mut sum = T::ZERO;
        for &v in r.iter() {
            sum += v;
        }
        let mean = sum / n;
        let mut var = T::ZERO;
        for &v in r.iter() {
            var += (v - mean) * (v - mean);
        }
        let is = T::ONE / (var / n + eps).sqrt();
        for (j, v) in r.iter_mut().enumerate() {
            *v = (*v - mean) * is * gain[j] + bias[j];
        }
    }
}

fn ffn<T: Real>(layers: &[Linear<T>; 2], x: &Matrix<T>) -> Matrix<T> {
    let mut hidden = layers[0].apply(x);
    for v in hidden.data_mut() {
        *v = v.max_of(T::ZERO);
    }
    layers[1].apply(&hidden)
}

fn refine_with<T: Real>(params: &SpotCaParams<T>, q: &Matrix<T>, qp: &Matrix<T>, v_agg: &Matrix<T>) -> Matrix<T> {
    let mut gated = qp.clone();
    for (g, &v) in gated.data_mut().iter_mut().zip(v_agg.data()) {
        *g = *g * v;
    }
    let mut inner = ffn(&params.ffn1, &gated);
    layer_norm(&mut inner, &params.norm_gain, &params.norm_bias);
    for (x, &v) in inner.data_mut().iter_mut().zip(v_agg.data()) {
        *x = params.gate * *x + v;
    }
    let o = ffn(&params.ffn2, &inner);
    let mut out = q.clone();
    for (x, &v) in out.data_mut().iter_mut().zip(o.data()) {
        *x += v;
    }
    out
}

/// Gated refinement of queries `q` (`Nq × C`) from head-concatenated
/// aggregates, inference mode (dropout is the identity).
pub fn refine_query<T: Real>(params: &SpotCaParams<T>, q: &Matrix<T>, v_agg: &Matrix<T>) -> Result<Matrix<T>> {
    params.check()?;
    let c = params.channels();
    if q.cols() != c || v_agg.cols() != c || q.rows() != v_agg.rows() {
        return Err(SpotCaError::DimensionMismatch(format!(
            "queries {}×{}, aggregates {}×{}, channels {c}",
            q.rows(),
            q.cols(),
            v_agg.rows(),
            v_agg.cols()
        )));
    }
    let qp = params.proj_q.apply(q);
    Ok(refine_with(params, q, &qp, v_agg))
}

/// `Σ_j softmax(scores · inv_temp)_j · values_j` over a selected set.
pub fn aggregate(values: &Matrix<f64>, scores: &[f64], inv_temp: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(SpotCaError::EmptySelection);
    }
    if values.rows() != scores.len() {
        return Err(SpotCaError::DimensionMismatch(format!(
            "{} value rows for {} scores",
            values.rows(),
            scores.len()
        )));
    }
    let support: Vec<usize> = (0..scores.len()).collect();
    let mut w = Vec::new();
    support_weights(scores, &support, inv_temp, &mut w);
    let mut acc = vec![0.0; values.cols()];
    for (j, &wj) in w.iter().enumerate() {
        axpy(&mut acc, wj, values.row(j));
    }
    Ok(acc)
}

/// Runs one cross-attention call. `keys` holds the voxel features; values
/// are projected from the same rows. A guidance mask restricts a query's
/// candidates unless it is all-false, in which case every key is eligible.
/// The dense backend ignores guidance.
pub fn attend<T: Real>(
    queries: &Matrix<T>,
    keys: &Matrix<T>,
    params: &SpotCaParams<T>,
    cfg: &SpotCaConfig,
    guidance: Option<&[Vec<bool>]>,
    opts: &AttentionOptions,
) -> Result<AttentionOutput<T>> {
    check_shapes(queries, keys, params, cfg, guidance)?;
    let (nq, nv, c) = (queries.rows(), keys.rows(), params.channels());
    let heads = cfg.heads;
    let d = c / heads;
    let start = opts.time_phases.then(Instant::now);
    let mut phases = PhaseTimes::default();

    let qp = params.proj_q.apply(queries);
    let kp = params.proj_k.apply(keys);
    let values = if cfg.value_proj {
        params.proj_v.apply(keys)
    } else {
        keys.clone()
    };
    let allowed: Vec<Option<&[bool]>> = (0..nq)
        .map(|q| guidance.map(|g| g[q].as_slice()).filter(|m| m.iter().any(|&b| b)))
        .collect();
    let n_cand: Vec<usize> = allowed
        .iter()
        .map(|a| a.map_or(nv, |m| m.iter().filter(|&&b| b).count()))
        .collect();
    if let Some(t) = start {
        phases.scoring += t.elapsed();
    }

    let inv_t = T::from_f64(cfg.inv_temperature(c));
    let mut v_agg = Matrix::<T>::zeros(nq, c);
    let mut counters = OpCounters::default();
    let mut per_head: Vec<Vec<HeadSelection>> = Vec::new();
    let mut scores = vec![T::ZERO; nq * nv];
    let threads = opts.threads.clamp(1, nq.max(1));
    for h in 0..heads {
        let t_score = opts.time_phases.then(Instant::now);
        let qn = normalized_head(&qp, h, d);
        let kn = normalized_head(&kp, h, d);
        T::gemm(nq, d, nv, &qn, d, 1, &kn, 1, d, &mut scores, nv, 1);
        counters.score_macs += (nq * nv * d) as u64;
        if let Some(t) = t_score {
            phases.scoring += t.elapsed();
        }

        let t_post = opts.time_phases.then(Instant::now);
        let ctx = HeadCtx {
            backend: opts.backend,
            values: &values,
            allowed: &allowed,
            n_cand: &n_cand,
            rho: cfg.rho,
            inv_t,
            h,
            d,
            c,
            nv,
            record: opts.record_selection,
        };
        let mut records = Vec::new();
        if threads == 1 {
            counters += head_rows(&ctx, 0, &scores, v_agg.data_mut(), &mut records);
        } else {
            let chunk = nq.div_ceil(threads);
            let results: Vec<(OpCounters, Vec<HeadSelection>)> = std::thread::scope(|s| {
                let handles: Vec<_> = scores
                    .chunks(chunk * nv)
                    .zip(v_agg.data_mut().chunks_mut(chunk * c))
                    .enumerate()
                    .map(|(i, (srows, vrows))| {
                        let ctx = &ctx;
                        s.spawn(move || {
                            let mut rec = Vec::new();
                            let cnt = head_rows(ctx, i * chunk, srows, vrows, &mut rec);
                            (cnt, rec)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker panicked"))
                    .collect()
            });
            for (cnt, rec) in results {
                counters += cnt;
                records.extend(rec);
            }
        }
        per_head.push(records);
        if let Some(t) = t_post {
            phases.post_scoring += t.elapsed();
        }
    }

    let t_refine = opts.time_phases.then(Instant::now);
    let out = refine_with(params, queries, &qp, &v_agg);
    if let Some(t) = t_refine {
        phases.post_scoring += t.elapsed();
    }
    if !out.all_finite() {
        return Err(SpotCaError::NonFinite("attention output"));
    }

    let selection = opts.record_selection.then(|| {
        let mut cols: Vec<std::vec::IntoIter<HeadSelection>> = per_head.into_iter().map(|v| v.into_iter()).collect();
        let mut entries = Vec::with_capacity(nq * heads);
        for _ in 0..nq {
            for col in cols.iter_mut() {
                entries.push(col.next().expect("one record per query"));
            }
        }
        PrototypeSelection { heads, entries }
    });
    Ok(AttentionOutput {
        queries: out,
        v_agg,
        selection,
        counters,
        phases,
    })
}

/// Prototype-backend attention of `queries` against the grid's features,
/// returning refined queries and the selection record.
pub fn spot_cross_attention(
    queries: &Matrix<f64>,
    grid: &SparseVoxelGrid,
    params: &SpotCaParams<f64>,
    cfg: &SpotCaConfig,
    guidance: Option<&[Vec<bool>]>,
) -> Result<(Matrix<f64>, PrototypeSelection)> {
    let opts = AttentionOptions {
        backend: Backend::Prototype,
        record_selection: true,
        ..Default::default()
    };
    let out = attend(queries, grid.features(), params, cfg, guidance, &opts)?;
    Ok((out.queries, out.selection.expect("recorded")))
}

/// Full attention over every key, or over the keys allowed by `mask` when
/// given (excluded scores become `-inf` before the softmax).
pub fn dense_reference(
    queries: &Matrix<f64>,
    grid: &SparseVoxelGrid,
    params: &SpotCaParams<f64>,
    cfg: &SpotCaConfig,
    mask: Option<&[Vec<bool>]>,
) -> Result<Matrix<f64>> {
    let opts = AttentionOptions {
        backend: if mask.is_some() {
            Backend::Masked
        } else {
            Backend::Dense
        },
        ..Default::default()
    };
    Ok(attend(queries, grid.features(), params, cfg, mask, &opts)?.queries)
}
