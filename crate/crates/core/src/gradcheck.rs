//! Central finite-difference gradient checking (f64 only).

use crate::params::{GradAccum, ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckGroup {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GradCheckGroup>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    pub fn worst_group(&self) -> Option<&GradCheckGroup> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compare backpropagated gradients against central finite differences
/// (step `h`, typically 1e−5) for every element of every parameter. The
/// forward closure must be deterministic: any sampling (Gumbel noise,
/// negative draws) has to be frozen outside and captured by the closure.
pub fn grad_check<Fwd>(store: &mut ParamStore<f64>, forward: Fwd, h: f64) -> GradCheckReport
where
    Fwd: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check_params(store, forward, &ids, h)
}

/// As [`grad_check`] but restricted to a subset of parameters.
pub fn grad_check_params<Fwd>(
    store: &mut ParamStore<f64>,
    forward: Fwd,
    ids: &[ParamId],
    h: f64,
) -> GradCheckReport
where
    Fwd: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    // Analytic gradients.
    let mut tape = Tape::new();
    let root = forward(&mut tape, store);
    let mut accum = GradAccum::new(store);
    tape.backward(root, 1.0, &mut accum);

    let eval = |store: &ParamStore<f64>| -> f64 {
        let mut tape = Tape::new();
        let root = forward(&mut tape, store);
        tape.value(root).item()
    };

    let mut groups = Vec::new();
    let mut global_max = 0.0f64;
    for &id in ids {
        let numel = store.value(id).numel();
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for e in 0..numel {
            let orig = store.value(id).data()[e];

            let mut bumped = store.value(id).clone();
            bumped.data_mut()[e] = orig + h;
            store.set_value(id, bumped);
            let f_plus = eval(store);

            let mut bumped = store.value(id).clone();
            bumped.data_mut()[e] = orig - h;
            store.set_value(id, bumped);
            let f_minus = eval(store);

            let mut restored = store.value(id).clone();
            restored.data_mut()[e] = orig;
            store.set_value(id, restored);

            let fd = (f_plus - f_minus) / (2.0 * h);
            let an = accum.get(id).map_or(0.0, |g| g.data()[e]);
            let abs = (fd - an).abs();
            let rel = abs / (fd.abs() + an.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        global_max = global_max.max(max_rel);
        groups.push(GradCheckGroup {
            name: store.name(id).to_string(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    GradCheckReport { groups, max_rel_error: global_max }
}
