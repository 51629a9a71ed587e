//! Shared parameterized layers (linear, layer norm).

use rand::Rng;

use crate::params::{init_linear_weight, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        LinearParams {
            w: store.add(&format!("{prefix}.w"), init_linear_weight(rng, fan_in, fan_out)),
            b: store.add(&format!("{prefix}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn apply<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }
}

pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, dim: usize) -> Self {
        NormParams {
            gamma: store.add(&format!("{prefix}.g"), Tensor::full(&[dim], F::one())),
            beta: store.add(&format!("{prefix}.b"), Tensor::zeros(&[dim])),
        }
    }

    pub fn apply<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, F::from_f64(LN_EPS))
    }
}
