use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Result, SpotCaError};
use crate::matrix::{Matrix, Real};
use crate::tensor::{ParamStore, Tensor};

/// Affine map `x · w + b`, `w` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(din: usize, dout: usize) -> Self {
        Self {
            w: Matrix::zeros(din, dout),
            b: vec![T::ZERO; dout],
        }
    }

    pub fn din(&self) -> usize {
        self.w.rows()
    }

    pub fn dout(&self) -> usize {
        self.w.cols()
    }

    pub fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut y = x.matmul(&self.w);
        let n = self.dout();
        for row in y.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(&self.b) {
                *o += b;
            }
        }
        y
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            w: self.w.cast(),
            b: self.b.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

impl Linear<f64> {
    /// Weights `N(0, 1/din)`, zero bias.
    pub fn init<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (din as f64).sqrt()).expect("positive std");
        let data = (0..din * dout).map(|_| normal.sample(rng)).collect();
        Self {
            w: Matrix::from_vec(din, dout, data),
            b: vec![0.0; dout],
        }
    }

    pub fn register(&self, store: &mut ParamStore, name: &str) {
        store.add(format!("{name}.w"), Tensor::from_matrix(&self.w));
        store.add(
            format!("{name}.b"),
            Tensor::new(vec![self.dout()], self.b.clone()).expect("length matches"),
        );
    }

    fn load(store: &ParamStore, name: &str) -> Result<Self> {
        let w = fetch(store, &format!("{name}.w"))?;
        let b = fetch(store, &format!("{name}.b"))?;
        if w.shape().len() != 2 || b.len() != w.cols() {
            return Err(SpotCaError::DimensionMismatch(format!("parameter {name}")));
        }
        Ok(Self {
            w: w.to_matrix(),
            b: b.data().to_vec(),
        })
    }
}

pub(crate) fn fetch<'a>(store: &'a ParamStore, name: &str) -> Result<&'a Tensor> {
    store
        .find(name)
        .map(|id| store.get(id))
        .ok_or_else(|| SpotCaError::InvalidConfig(format!("missing parameter `{name}`")))
}

/// Learnable state of one attention block.
///
/// `ffn1` and `ffn2` are `C → 2C → C` with relu in between; `gate` scales the
/// normalized FFN₁ output before it is added to the aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct SpotCaParams<T> {
    pub proj_q: Linear<T>,
    pub proj_k: Linear<T>,
    pub proj_v: Linear<T>,
    pub ffn1: [Linear<T>; 2],
    pub ffn2: [Linear<T>; 2],
    pub norm_gain: Vec<T>,
    pub norm_bias: Vec<T>,
    pub gate: T,
}

pub(crate) const LINEAR_NAMES: [&str; 7] = ["proj_q", "proj_k", "proj_v", "ffn1.0", "ffn1.1", "ffn2.0", "ffn2.1"];

impl<T: Real> SpotCaParams<T> {
    pub fn channels(&self) -> usize {
        self.proj_q.din()
    }

    fn linears(&self) -> [&Linear<T>; 7] {
        [
            &self.proj_q,
            &self.proj_k,
            &self.proj_v,
            &self.ffn1[0],
            &self.ffn1[1],
            &self.ffn2[0],
            &self.ffn2[1],
        ]
    }

    pub fn cast<U: Real>(&self) -> SpotCaParams<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::from_f64(x.to_f64())).collect();
        SpotCaParams {
            proj_q: self.proj_q.cast(),
            proj_k: self.proj_k.cast(),
            proj_v: self.proj_v.cast(),
            ffn1: [self.ffn1[0].cast(), self.ffn1[1].cast()],
            ffn2: [self.ffn2[0].cast(), self.ffn2[1].cast()],
            norm_gain: c(&self.norm_gain),
            norm_bias: c(&self.norm_bias),
            gate: U::from_f64(self.gate.to_f64()),
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        let c = self.channels();
        let shapes = [(c, c), (c, c), (c, c), (c, 2 * c), (2 * c, c), (c, 2 * c), (2 * c, c)];
        for ((l, &(i, o)), name) in self.linears().iter().zip(&shapes).zip(LINEAR_NAMES) {
            if l.din() != i || l.dout() != o || l.b.len() != o {
                return Err(SpotCaError::DimensionMismatch(format!(
                    "{name} is {}×{}, expected {i}×{o}",
                    l.din(),
                    l.dout()
                )));
            }
        }
        if self.norm_gain.len() != c || self.norm_bias.len() != c {
            return Err(SpotCaError::DimensionMismatch("norm parameters".into()));
        }
        Ok(())
    }
}

impl SpotCaParams<f64> {
    pub fn init<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        Self {
            proj_q: Linear::init(c, c, rng),
            proj_k: Linear::init(c, c, rng),
            proj_v: Linear::init(c, c, rng),
            ffn1: [Linear::init(c, 2 * c, rng), Linear::init(2 * c, c, rng)],
            ffn2: [Linear::init(c, 2 * c, rng), Linear::init(2 * c, c, rng)],
            norm_gain: vec![1.0; c],
            norm_bias: vec![0.0; c],
            gate: 1.0,
        }
    }

    /// Adds every tensor to `store` under `prefix.*`.
    pub fn register(&self, store: &mut ParamStore, prefix: &str) {
        for (l, name) in self.linears().into_iter().zip(LINEAR_NAMES) {
            l.register(store, &format!("{prefix}.{name}"));
        }
        let c = self.channels();
        store.add(
            format!("{prefix}.norm.gain"),
            Tensor::new(vec![c], self.norm_gain.clone()).expect("length matches"),
        );
        store.add(
            format!("{prefix}.norm.bias"),
            Tensor::new(vec![c], self.norm_bias.clone()).expect("length matches"),
        );
        store.add(format!("{prefix}.gate"), Tensor::scalar(self.gate));
    }

    /// Reads a block previously added with [`register`](Self::register).
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let l = |name: &str| Linear::load(store, &format!("{prefix}.{name}"));
        let p = Self {
            proj_q: l("proj_q")?,
            proj_k: l("proj_k")?,
            proj_v: l("proj_v")?,
            ffn1: [l("ffn1.0")?, l("ffn1.1")?],
            ffn2: [l("ffn2.0")?, l("ffn2.1")?],
            norm_gain: fetch(store, &format!("{prefix}.norm.gain"))?.data().to_vec(),
            norm_bias: fetch(store, &format!("{prefix}.norm.bias"))?.data().to_vec(),
            gate: fetch(store, &format!("{prefix}.gate"))?.data()[0],
        };
        p.check()?;
        Ok(p)
    }
}
