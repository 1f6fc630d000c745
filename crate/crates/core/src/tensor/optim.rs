use super::{ParamStore, Result};

/// Plain gradient descent: `p ← p − lr·g`.
pub fn sgd_step(params: &mut ParamStore, lr: f64) -> Result<()> {
    params.require_grads()?;
    for id in params.ids().collect::<Vec<_>>() {
        let t = params.get_mut(id);
        let g = t.grad.clone().expect("checked");
        for (p, g) in t.data_mut().iter_mut().zip(g) {
            *p -= lr * g;
        }
    }
    Ok(())
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        params.require_grads()?;
        if self.m.is_empty() {
            self.m = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let t = params.get_mut(id);
            let g = t.grad.clone().expect("checked");
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                *p -= self.lr * self.weight_decay * *p;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor, TensorError};
    use super::*;

    fn quadratic_grad(store: &mut ParamStore) {
        // f(x) = x², evaluated through the tape.
        store.zero_grads();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let sq = tape.mul(bound[0], bound[0]).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        store.accumulate_grads(&tape, &bound);
    }

    #[test]
    fn sgd_single_step_on_square() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(1.0));
        quadratic_grad(&mut s);
        sgd_step(&mut s, 0.1).unwrap();
        let x = s.get(s.find("x").unwrap()).item();
        assert!((x - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adamw_without_decay_descends_monotonically() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(1.0));
        let mut opt = AdamW::new(0.01, (0.9, 0.999), 0.0);
        let mut prev = 1.0;
        for _ in 0..50 {
            quadratic_grad(&mut s);
            opt.step(&mut s).unwrap();
            let x = s.get(id).item();
            assert!(x < prev && x > 0.0, "x = {x}, prev = {prev}");
            prev = x;
        }
    }

    #[test]
    fn adamw_decay_with_zero_gradient() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(2.0));
        let mut opt = AdamW::new(0.1, (0.9, 0.999), 0.5);
        for step in 1..=3 {
            s.get_mut(id).grad = Some(vec![0.0]);
            opt.step(&mut s).unwrap();
            let want = 2.0 * (1.0 - 0.1 * 0.5f64).powi(step);
            assert!((s.get(id).item() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn steps_require_gradients() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(2.0));
        assert_eq!(sgd_step(&mut s, 0.1), Err(TensorError::MissingGrad("w".into())));
        assert!(AdamW::new(0.1, (0.9, 0.999), 0.0).step(&mut s).is_err());
    }
}
