//! Layer helpers shared by the edge GNN and the policy.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const INIT_STD: f32 = 0.02;

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn truncated_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * std {
            break x;
        }
    })
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        Self::with_std(store, name, inputs, outputs, INIT_STD, rng)
    }

    pub fn with_std<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let w = if std > 0.0 {
            truncated_normal(rng, &[inputs, outputs], std)
        } else {
            Tensor::zeros(&[inputs, outputs])
        };
        let w = store.insert(format!("{name}.weight"), w)?;
        let b = store.insert(format!("{name}.bias"), Tensor::zeros(&[outputs]))?;
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        std: f32,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::with_std(store, &format!("{name}.0"), inputs, hidden, std, rng)?,
            second: Linear::with_std(store, &format!("{name}.1"), hidden, outputs, std, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.second.forward(tape, store, h)
    }
}
