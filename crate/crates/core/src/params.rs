//! Trainable parameters, the Adam optimizer, and checkpoint I/O.
//!
//! Checkpoints are a flat binary container: magic `DVC3CKPT`, version u16,
//! then per parameter (name-length u16, utf-8 name, rank u8, dims as u32s,
//! 32-bit little-endian floats). Round trips are bit-exact for f32 stores.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"DVC3CKPT";
pub const CKPT_VERSION: u16 = 1;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub value: Rc<Tensor<F>>,
    /// First and second Adam moment accumulators.
    pub m: Tensor<F>,
    pub v: Tensor<F>,
}

/// Owns every trainable tensor of one model plus optimizer state.
pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
    by_name: HashMap<String, usize>,
    /// Adam timestep (number of optimizer steps applied).
    pub step: u64,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new(), step: 0 }
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry { name: name.to_string(), value: Rc::new(value), m, v });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn shared(&self, id: ParamId) -> Rc<Tensor<F>> {
        Rc::clone(&self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Overwrite a parameter value (used by gradient checking).
    pub fn set_value(&mut self, id: ParamId, value: Tensor<F>) {
        assert_eq!(value.shape(), self.entries[id.0].value.shape());
        self.entries[id.0].value = Rc::new(value);
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Parameter count in millions, the unit latency reports use.
    pub fn params_m(&self) -> f64 {
        self.num_scalars() as f64 / 1e6
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            let shape = e.value.shape();
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in e.value.data() {
                out.extend_from_slice(&(x.to_f64_() as f32).to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Load values into an already-built store. Every store parameter must
    /// be present with a matching shape. Entries prefixed `trainer.` carry
    /// training bookkeeping and are returned to the caller instead of
    /// matched (unless the store registers them itself); anything else
    /// unknown is an error. Optimizer moments reset.
    pub fn load(&mut self, path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
        let raw = read_checkpoint(path)?;
        let mut extra = Vec::new();
        let mut seen = vec![false; self.entries.len()];
        for (name, tensor) in raw {
            let Some(&idx) = self.by_name.get(&name) else {
                if name.starts_with("trainer.") {
                    extra.push((name, tensor));
                    continue;
                }
                return Err(Error::Format(format!(
                    "checkpoint parameter {name} unknown to this model"
                )));
            };
            if tensor.shape() != self.entries[idx].value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    self.entries[idx].value.shape()
                )));
            }
            self.entries[idx].value = Rc::new(tensor.cast::<F>());
            self.entries[idx].m = Tensor::zeros(self.entries[idx].value.shape());
            self.entries[idx].v = Tensor::zeros(self.entries[idx].value.shape());
            seen[idx] = true;
        }
        if let Some(idx) = seen.iter().position(|&s| !s) {
            return Err(Error::Format(format!(
                "checkpoint is missing parameter {}",
                self.entries[idx].name
            )));
        }
        Ok(extra)
    }
}

/// Parse a checkpoint file into (name, tensor) pairs.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 8)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while pos < bytes.len() {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)));
    }
    Ok(out)
}

/// Scalar count of a checkpoint file. Entries whose name starts with
/// `trainer.` hold training bookkeeping, not model weights, and are skipped.
pub fn checkpoint_num_scalars(path: &Path) -> Result<usize> {
    Ok(read_checkpoint(path)?
        .iter()
        .filter(|(name, _)| !name.starts_with("trainer."))
        .map(|(_, t)| t.numel())
        .sum())
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter gradient accumulator for one optimizer step.
pub struct GradAccum<F: Scalar> {
    slots: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> GradAccum<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        GradAccum { slots: (0..store.len()).map(|_| None).collect() }
    }

    pub fn add(&mut self, id: ParamId, grad: &Tensor<F>) {
        match &mut self.slots[id.0] {
            Some(acc) => {
                for (a, &g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += g;
                }
            }
            slot => *slot = Some(grad.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.slots[id.0].as_ref()
    }

    pub fn max_abs(&self) -> F {
        self.slots
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .fold(F::zero(), |m, &g| m.max(g.abs()))
    }
}

/// One Adam update with bias correction, applied in place. Parameters
/// without an accumulated gradient are left untouched; the accumulator is
/// consumed, which zeroes all gradients for the next step.
pub fn adam_step<F: Scalar>(store: &mut ParamStore<F>, grads: GradAccum<F>, cfg: &AdamConfig) {
    store.step += 1;
    let t = store.step as i32;
    let b1 = F::from_f64(cfg.beta1);
    let b2 = F::from_f64(cfg.beta2);
    let corr1 = F::from_f64(1.0 - cfg.beta1.powi(t));
    let corr2 = F::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = F::from_f64(cfg.lr);
    let eps = F::from_f64(cfg.eps);
    for (idx, slot) in grads.slots.into_iter().enumerate() {
        let Some(grad) = slot else { continue };
        let entry = &mut store.entries[idx];
        let theta = Rc::make_mut(&mut entry.value);
        let one = F::one();
        for (((th, g), m), v) in theta
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(entry.m.data_mut())
            .zip(entry.v.data_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *th = *th - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Draws from N(0, std²). Sampling happens in f64 so f32 and f64 stores see
/// identical values under the same seed.
pub fn randn_tensor<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Linear-layer weight init: N(0, 1/fan_in).
pub fn init_linear_weight<F: Scalar, R: Rng>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<F> {
    randn_tensor(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(values: &[(&str, Tensor<f32>)]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for (name, t) in values {
            s.add(name, t.clone());
        }
        s
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut s = store_with(&[("w", Tensor::vector(vec![1.5f32, -2.0]))]);
        let id = s.id_of("w").unwrap();
        let mut g = GradAccum::new(&s);
        g.add(id, &Tensor::vector(vec![0.0, 0.0]));
        adam_step(&mut s, g, &AdamConfig::default());
        assert_eq!(s.value(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // g=1, lr=0.1: bias-corrected m̂/√v̂ = 1, so θ drops by lr (up to eps).
        let mut s = store_with(&[("w", Tensor::scalar(3.0f32))]);
        let id = s.id_of("w").unwrap();
        let mut g = GradAccum::new(&s);
        g.add(id, &Tensor::scalar(1.0));
        adam_step(&mut s, g, &AdamConfig { lr: 0.1, ..Default::default() });
        let got = s.value(id).item();
        assert!((got - 2.9).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        // Scalar Adam reference, written out longhand.
        let (lr, b1, b2, eps) = (1e-3f64, 0.9, 0.999, 1e-8);
        let g = 0.5f64;
        let mut theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }

        let mut s: ParamStore<f64> = ParamStore::new();
        let id = s.add("w", Tensor::scalar(1.0));
        for _ in 0..2 {
            let mut ga = GradAccum::new(&s);
            ga.add(id, &Tensor::scalar(g));
            adam_step(&mut s, ga, &AdamConfig::default());
        }
        assert!((s.value(id).item() - theta).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s: ParamStore<f32> = ParamStore::new();
        s.add("enc.w", randn_tensor(&mut rng, &[3, 4], 1.0));
        s.add("enc.b", randn_tensor(&mut rng, &[4], 0.5));
        s.add("scalar", Tensor::scalar(0.25f32));
        let dir = std::env::temp_dir().join("dualvc3_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");
        s.save(&path).unwrap();

        let mut s2: ParamStore<f32> = ParamStore::new();
        s2.add("enc.w", Tensor::zeros(&[3, 4]));
        s2.add("enc.b", Tensor::zeros(&[4]));
        s2.add("scalar", Tensor::scalar(0.0f32));
        s2.load(&path).unwrap();
        for id in s.ids() {
            assert_eq!(s.value(id).data(), s2.value(id).data());
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = std::env::temp_dir().join("dualvc3_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC\x01\x00").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
    }
}
