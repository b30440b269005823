use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ops::Activation;
use crate::params::{NormIds, ParamGroup, ParamId, ParamSet};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// `σ(LN(x)·W₁ + b₁)·W₂ + b₂` with its own input layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub norm: NormIds,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn init<T: Real>(
        params: &mut ParamSet<T>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        group: ParamGroup,
        rng: &mut SeededRng,
    ) -> Self {
        let norm = params.add_norm(&format!("{prefix}.norm"), dim, group);
        let w1 = params.add(
            format!("{prefix}.w1"),
            rng.normal_tensor(&[dim, hidden], 1.0 / (dim as f64).sqrt()),
            group,
        );
        let b1 = params.add(format!("{prefix}.b1"), crate::Tensor::zeros(&[hidden]), group);
        let w2 = params.add(
            format!("{prefix}.w2"),
            rng.normal_tensor(&[hidden, dim], 1.0 / (hidden as f64).sqrt()),
            group,
        );
        let b2 = params.add(format!("{prefix}.b2"), crate::Tensor::zeros(&[dim]), group);
        Mlp { norm, w1, b1, w2, b2 }
    }

    pub fn hidden<T: Real>(&self, params: &ParamSet<T>) -> usize {
        params.get(self.b1).numel()
    }

    pub fn ids(&self) -> [ParamId; 6] {
        [self.norm.gain, self.norm.bias, self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, act: Activation) -> Result<Var> {
        let n = tape.layer_norm(x, vars[self.norm.gain.0], vars[self.norm.bias.0], T::c(T::EPS))?;
        self.forward_normed(tape, vars, n, act)
    }

    /// The MLP body on an already-normalized input.
    pub fn forward_normed<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], n: Var, act: Activation) -> Result<Var> {
        let h = tape.matmul(n, vars[self.w1.0])?;
        let h = tape.add_row(h, vars[self.b1.0])?;
        let h = tape.activation(h, act);
        let o = tape.matmul(h, vars[self.w2.0])?;
        tape.add_row(o, vars[self.b2.0])
    }
}
