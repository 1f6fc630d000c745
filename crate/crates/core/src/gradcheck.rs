//! Central finite-difference checks of tape gradients.

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Outcome for each input: `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)`, zero
/// when both vanish, plus the two norms.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub rel_errors: Vec<f64>,
    pub analytic_norms: Vec<f64>,
    pub numeric_norms: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `h`. `f` receives one leaf per input, in order.
///
/// `stride` checks every `stride`-th element of each input (1 = all).
pub fn check<E, F>(inputs: &[Tensor], f: F, h: f64, stride: usize) -> Result<GradReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut analytic_norms = Vec::with_capacity(inputs.len());
    let mut numeric_norms = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for e in (0..inputs[i].len()).step_by(stride.max(1)) {
            let x0 = inputs[i].data()[e];
            work[i].data_mut()[e] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[e] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[e] = x0;
            let num = (fp - fm) / (2.0 * h);
            let a = analytic[i][e];
            diff += (a - num) * (a - num);
            na += a * a;
            nn += num * num;
        }
        let scale = na.sqrt().max(nn.sqrt());
        rel_errors.push(if scale == 0.0 { 0.0 } else { diff.sqrt() / scale });
        analytic_norms.push(na.sqrt());
        numeric_norms.push(nn.sqrt());
    }
    Ok(GradReport {
        rel_errors,
        analytic_norms,
        numeric_norms,
    })
}
