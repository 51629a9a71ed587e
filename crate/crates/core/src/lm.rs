//! Decoder-only autoregressive language model over discrete codes.
//!
//! Next-token prediction over the bottleneck vocabulary (plus a BOS token at
//! id 0) with learned absolute position embeddings, quiet-softmax attention
//! inside the blocks and a standard-softmax output head. Generates pseudo
//! future context during full-mode streaming inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conformer::Attention;
use crate::error::{Error, Result};
use crate::layers::{LinearParams, NormParams};
use crate::params::{adam_step, AdamConfig, GradAccum, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{softmax_slice, Tape, Var};
use crate::tensor::{argmax, Tensor};

pub const BOS: u16 = 0;

#[derive(Debug, Clone)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
    /// Token vocabulary including BOS (= code vocab N + 1).
    pub vocab: usize,
    pub max_context: usize,
}

impl LmConfig {
    /// Desk-scale default for a code vocabulary of `n`.
    pub fn toy(n: usize) -> Self {
        LmConfig { layers: 2, heads: 4, hidden: 64, intermediate: 128, vocab: n + 1, max_context: 256 }
    }

    /// Full-scale preset: 4 layers, 8 heads, 512/1024.
    pub fn paper(n: usize) -> Self {
        LmConfig { layers: 4, heads: 8, hidden: 512, intermediate: 1024, vocab: n + 1, max_context: 256 }
    }

    /// Minimal config for gradient checks.
    pub fn tiny(n: usize) -> Self {
        LmConfig { layers: 2, heads: 2, hidden: 8, intermediate: 16, vocab: n + 1, max_context: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidArg(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab < 3 {
            return Err(Error::InvalidArg("vocab must hold BOS plus at least two codes".into()));
        }
        Ok(())
    }
}

/// Per-layer K/V history. `len` equals the cached token count.
#[derive(Debug, Clone)]
pub struct LmState<F: Scalar> {
    keys: Vec<Tensor<F>>,
    values: Vec<Tensor<F>>,
    len: usize,
}

impl<F: Scalar> LmState<F> {
    pub fn fresh(cfg: &LmConfig) -> Self {
        LmState {
            keys: (0..cfg.layers).map(|_| Tensor::zeros(&[0, cfg.hidden])).collect(),
            values: (0..cfg.layers).map(|_| Tensor::zeros(&[0, cfg.hidden])).collect(),
            len: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.len
    }

    /// Drop cached rows past `len` (rolls back speculative generation).
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        for t in self.keys.iter_mut().chain(self.values.iter_mut()) {
            *t = t.slice_rows(0, len);
        }
        self.len = len;
    }

    /// Keep only the most recent `keep` tokens (rolling window).
    fn slide_to(&mut self, keep: usize) {
        let drop = self.len.saturating_sub(keep);
        if drop == 0 {
            return;
        }
        for t in self.keys.iter_mut().chain(self.values.iter_mut()) {
            *t = t.slice_rows(drop, t.rows());
        }
        self.len -= drop;
    }
}

struct LmLayer {
    attn: Attention,
    ffn_norm: NormParams,
    gate: LinearParams,
    up: LinearParams,
    down: LinearParams,
}

pub struct ContextLm {
    pub cfg: LmConfig,
    emb: ParamId,
    pos: ParamId,
    layers: Vec<LmLayer>,
    final_norm: NormParams,
    head: LinearParams,
}

impl ContextLm {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, cfg: &LmConfig, seed: u64) -> Self {
        cfg.validate().expect("invalid lm config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let h = cfg.hidden;
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("lm.layer{i}");
                LmLayer {
                    attn: Attention::init(store, rng, &format!("{p}.attn"), h, cfg.heads),
                    ffn_norm: NormParams::init(store, &format!("{p}.ffn.ln"), h),
                    gate: LinearParams::init(store, rng, &format!("{p}.ffn.gate"), h, cfg.intermediate),
                    up: LinearParams::init(store, rng, &format!("{p}.ffn.up"), h, cfg.intermediate),
                    down: LinearParams::init(store, rng, &format!("{p}.ffn.down"), cfg.intermediate, h),
                }
            })
            .collect();
        let head_w = store.add("lm.head.w", Tensor::zeros(&[h, cfg.vocab]));
        let head_b = store.add("lm.head.b", Tensor::zeros(&[cfg.vocab]));
        ContextLm {
            emb: store.add(
                "lm.emb",
                crate::params::randn_tensor(rng, &[cfg.vocab, h], 1.0 / (h as f64).sqrt()),
            ),
            pos: store.add(
                "lm.pos",
                crate::params::randn_tensor(rng, &[cfg.max_context, h], 0.02),
            ),
            layers,
            final_norm: NormParams::init(store, "lm.ln_f", h),
            head: LinearParams { w: head_w, b: head_b },
            cfg: cfg.clone(),
        }
    }

    fn check_ids(&self, ids: &[u16]) -> Result<()> {
        for &t in ids {
            if t as usize >= self.cfg.vocab {
                return Err(Error::TokenOutOfRange { token: t as i64, vocab: self.cfg.vocab - 1 });
            }
        }
        Ok(())
    }

    /// Push `ids` through the model on an existing tape, extending `state`.
    /// Returns the logits rows for the new positions. Strictly causal:
    /// row i attends to the cached history plus new rows ≤ i.
    pub fn forward_tape<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        ids: &[u16],
        state: &mut LmState<F>,
    ) -> Result<Var> {
        self.check_ids(ids)?;
        if ids.is_empty() {
            return Err(Error::InvalidArg("empty id block".into()));
        }
        // rolling window: keep room for the incoming block
        let keep = self.cfg.max_context.saturating_sub(ids.len());
        state.slide_to(keep);
        let hist = state.len;

        let emb_table = tape.param(store, self.emb);
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let tok = tape.gather_rows(emb_table, &idx);
        let pos_table = tape.param(store, self.pos);
        let pos_idx: Vec<usize> =
            (0..ids.len()).map(|i| (hist + i).min(self.cfg.max_context - 1)).collect();
        let pos = tape.gather_rows(pos_table, &pos_idx);
        let mut x = tape.add(tok, pos);

        let limits: Vec<usize> = (0..ids.len()).map(|i| hist + i + 1).collect();
        for (l, layer) in self.layers.iter().enumerate() {
            let kv = if hist > 0 {
                Some((
                    tape.input(state.keys[l].clone()),
                    tape.input(state.values[l].clone()),
                ))
            } else {
                None
            };
            let att = layer.attn.apply(tape, store, x, kv, &limits);
            state.keys[l] = state.keys[l].vcat(tape.value(att.new_keys));
            state.values[l] = state.values[l].vcat(tape.value(att.new_values));
            let h = layer.ffn_norm.apply(tape, store, att.out);
            let g = layer.gate.apply(tape, store, h);
            let g = tape.silu(g);
            let u = layer.up.apply(tape, store, h);
            let gu = tape.mul(g, u);
            let d = layer.down.apply(tape, store, gu);
            x = tape.add(att.out, d);
        }
        state.len = hist + ids.len();
        let x = self.final_norm.apply(tape, store, x);
        Ok(self.head.apply(tape, store, x))
    }

    /// Forward-only logits for a block of ids.
    pub fn logits<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        ids: &[u16],
        state: &mut LmState<F>,
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let v = self.forward_tape(&mut tape, store, ids, state)?;
        Ok(tape.value(v).clone())
    }

    /// Mean per-token negative log likelihood of a code sequence (1-based
    /// codes), conditioned BOS-first.
    pub fn nll<F: Scalar>(&self, store: &ParamStore<F>, codes: &[u16]) -> Result<f64> {
        if codes.is_empty() {
            return Err(Error::InvalidArg("nll needs at least one code".into()));
        }
        let mut ids = Vec::with_capacity(codes.len() + 1);
        ids.push(BOS);
        ids.extend_from_slice(codes);
        self.check_ids(&ids)?;
        let mut state = LmState::fresh(&self.cfg);
        let logits = self.logits(store, &ids[..ids.len() - 1], &mut state)?;
        let mut total = 0.0f64;
        for (i, &target) in codes.iter().enumerate() {
            let row = logits.row(i);
            let probs = softmax_slice(row);
            total -= probs[target as usize].to_f64_().max(1e-300).ln();
        }
        Ok(total / codes.len() as f64)
    }

    /// Stepwise log-probability of `continuation` given `history` (both
    /// 1-based codes); used to verify the autoregressive factorization.
    pub fn continuation_log_prob<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        history: &[u16],
        continuation: &[u16],
    ) -> Result<f64> {
        let mut ids = vec![BOS];
        ids.extend_from_slice(history);
        ids.extend_from_slice(continuation);
        let mut state = LmState::fresh(&self.cfg);
        let logits = self.logits(store, &ids[..ids.len() - 1], &mut state)?;
        let offset = history.len(); // logits row predicting continuation[0]
        let mut total = 0.0f64;
        for (i, &c) in continuation.iter().enumerate() {
            let probs = softmax_slice(logits.row(offset + i));
            total += probs[c as usize].to_f64_().max(1e-300).ln();
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Greedy,
    TopK,
}

#[derive(Debug, Clone)]
pub struct SamplingConfig {
    pub mode: SamplingMode,
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { mode: SamplingMode::TopK, k: 10, temperature: 1.0, seed: 0 }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        SamplingConfig { mode: SamplingMode::Greedy, k: 1, temperature: 1.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidArg("sampling k must be ≥ 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidArg("sampling temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Pick the next code (1-based) from a logits row; BOS is never emitted.
fn select_code<F: Scalar, R: Rng>(row: &[F], cfg: &SamplingConfig, rng: &mut R) -> u16 {
    let codes = &row[1..]; // skip BOS at id 0
    match cfg.mode {
        SamplingMode::Greedy => (argmax(codes) + 1) as u16,
        SamplingMode::TopK => {
            let mut order: Vec<usize> = (0..codes.len()).collect();
            order.sort_by(|&a, &b| codes[b].partial_cmp(&codes[a]).unwrap().then(a.cmp(&b)));
            order.truncate(cfg.k.min(codes.len()));
            let scaled: Vec<f64> =
                order.iter().map(|&i| codes[i].to_f64_() / cfg.temperature).collect();
            let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scaled.iter().map(|&s| (s - m).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut target = rng.random::<f64>() * total;
            for (&i, &w) in order.iter().zip(&weights) {
                target -= w;
                if target <= 0.0 {
                    return (i + 1) as u16;
                }
            }
            (order[order.len() - 1] + 1) as u16
        }
    }
}

impl ContextLm {
    /// Autoregressively sample `n` pseudo-context codes conditioned on the
    /// cached history in `state`; the state is restored afterwards, so the
    /// pseudo codes never linger once real codes arrive.
    pub fn generate_pseudo_context<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        state: &mut LmState<F>,
        last_logits: &Tensor<F>,
        n: usize,
        cfg: &SamplingConfig,
        rng: &mut impl Rng,
    ) -> Result<Vec<u16>> {
        cfg.validate()?;
        if n == 0 {
            return Ok(Vec::new());
        }
        let checkpoint = state.len;
        let mut out = Vec::with_capacity(n);
        let mut row = last_logits.row(last_logits.rows() - 1).to_vec();
        loop {
            let code = select_code(&row, cfg, rng);
            out.push(code);
            if out.len() == n {
                break;
            }
            let logits = self.logits(store, &[code], state)?;
            row = logits.row(0).to_vec();
        }
        state.truncate(checkpoint);
        Ok(out)
    }

    /// Convenience wrapper: condition on an explicit history (fresh state).
    pub fn generate_from_history<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        history: &[u16],
        n: usize,
        cfg: &SamplingConfig,
    ) -> Result<Vec<u16>> {
        let mut ids = vec![BOS];
        ids.extend_from_slice(history);
        let mut state = LmState::fresh(&self.cfg);
        let logits = self.logits(store, &ids, &mut state)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        self.generate_pseudo_context(store, &mut state, &logits, n, cfg, &mut rng)
    }
}

/// One LM optimizer step over a batch of code sequences: mean per-token
/// cross-entropy of next-token prediction, BOS-anchored.
pub fn lm_train_step<F: Scalar>(
    lm: &ContextLm,
    store: &mut ParamStore<F>,
    batch: &[&[u16]],
    adam: &AdamConfig,
) -> Result<f64> {
    assert!(!batch.is_empty());
    let inv_b = F::one() / F::from_usize(batch.len());
    let mut accum = GradAccum::new(store);
    let mut loss_sum = 0.0f64;
    for &codes in batch {
        if codes.is_empty() {
            return Err(Error::InvalidArg("empty code sequence in LM batch".into()));
        }
        let mut ids = vec![BOS];
        ids.extend_from_slice(codes);
        let mut tape = Tape::new();
        let mut state = LmState::fresh(&lm.cfg);
        let logits = lm.forward_tape(&mut tape, store, &ids[..ids.len() - 1], &mut state)?;
        let targets: Vec<usize> = codes.iter().map(|&c| c as usize).collect();
        let loss = tape.cross_entropy(logits, &targets);
        let v = tape.value(loss).item().to_f64_();
        if !v.is_finite() {
            return Err(Error::NonFinite("lm training loss".into()));
        }
        loss_sum += v;
        tape.backward(loss, inv_b, &mut accum);
    }
    adam_step(store, accum, adam);
    Ok(loss_sum / batch.len() as f64)
}

/// Empirical unigram baseline: mean NLL of held-out codes under the train
/// distribution (Laplace-smoothed). The trained LM has to beat this.
pub fn unigram_baseline_nll(train: &[Vec<u16>], heldout: &[Vec<u16>], vocab: usize) -> f64 {
    let mut counts = vec![1.0f64; vocab + 1]; // Laplace smoothing, 1-based codes
    let mut total = vocab as f64 + 1.0;
    for seq in train {
        for &c in seq {
            counts[c as usize] += 1.0;
            total += 1.0;
        }
    }
    let mut nll = 0.0f64;
    let mut n = 0usize;
    for seq in heldout {
        for &c in seq {
            nll -= (counts[c as usize] / total).ln();
            n += 1;
        }
    }
    nll / n.max(1) as f64
}
