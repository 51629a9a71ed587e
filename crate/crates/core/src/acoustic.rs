//! Acoustic model: content encoder → discrete semantic bottleneck → decoder,
//! trained with reconstruction + hybrid-predictive-coding + semantic
//! cross-entropy terms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conformer::{ConformerConfig, ConformerStack, LayerCache};
use crate::error::{Error, Result};
use crate::layers::LinearParams;
use crate::masks::{make_chunk_mask, sample_training_chunk, ChunkMask};
use crate::params::{adam_step, AdamConfig, GradAccum, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{gumbel_softmax_st, sample_gumbel_noise, Tape, Var};
use crate::tensor::{argmax, Tensor};
use crate::corpus::Utterance;

#[derive(Debug, Clone)]
pub struct AcousticConfig {
    pub mel_bins: usize,
    pub dim: usize,
    /// Semantic-token vocabulary N (K-means cluster count).
    pub vocab: usize,
    /// Mel frames per semantic token (mel 100 Hz → tokens 50 Hz).
    pub downsample: usize,
    pub speaker_dim: usize,
    pub num_speakers: usize,
    pub encoder: ConformerConfig,
    pub decoder: ConformerConfig,
    /// HPC future-prediction step.
    pub hpc_step: usize,
    pub hpc_negatives: usize,
}

impl AcousticConfig {
    /// Desk-scale default: 4+4 blocks, D = 64.
    pub fn toy(num_speakers: usize) -> Self {
        let block = ConformerConfig {
            num_blocks: 4,
            dim: 64,
            heads: 4,
            conv_kernel: 7,
            ffn_expansion: 4,
        };
        AcousticConfig {
            mel_bins: 80,
            dim: 64,
            vocab: 150,
            downsample: 2,
            speaker_dim: 64,
            num_speakers,
            encoder: block.clone(),
            decoder: block,
            hpc_step: 6,
            hpc_negatives: 10,
        }
    }

    /// Full-scale preset: 6+6 blocks, D = 256, 4 heads.
    pub fn paper(num_speakers: usize) -> Self {
        let block = ConformerConfig {
            num_blocks: 6,
            dim: 256,
            heads: 4,
            conv_kernel: 7,
            ffn_expansion: 2,
        };
        AcousticConfig {
            mel_bins: 80,
            dim: 256,
            vocab: 150,
            downsample: 2,
            speaker_dim: 64,
            num_speakers,
            encoder: block.clone(),
            decoder: block,
            hpc_step: 6,
            hpc_negatives: 10,
        }
    }

    /// Minimal config for finite-difference gradient checks.
    pub fn tiny() -> Self {
        let block = ConformerConfig {
            num_blocks: 2,
            dim: 8,
            heads: 2,
            conv_kernel: 3,
            ffn_expansion: 2,
        };
        AcousticConfig {
            mel_bins: 8,
            dim: 8,
            vocab: 6,
            downsample: 2,
            speaker_dim: 4,
            num_speakers: 3,
            encoder: block.clone(),
            decoder: block,
            hpc_step: 6,
            hpc_negatives: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.downsample == 0 {
            return Err(Error::InvalidArg("downsample factor must be ≥ 1".into()));
        }
        if self.vocab < 2 {
            return Err(Error::InvalidArg("vocab must be ≥ 2".into()));
        }
        Ok(())
    }
}

/// Weights of the three-term objective; total = α·rec + β·hpc + γ·ce.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 45.0, beta: 1.0, gamma: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::InvalidArg("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// The exact fold the tape uses, so reported totals can be re-derived
    /// bit-for-bit from the terms.
    pub fn combine<F: Scalar>(&self, rec: F, hpc: F, ce: F) -> F {
        let mut acc = F::zero();
        acc = acc + F::from_f64(self.alpha) * rec;
        acc = acc + F::from_f64(self.beta) * hpc;
        acc = acc + F::from_f64(self.gamma) * ce;
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<F: Scalar> {
    pub rec: F,
    pub hpc: F,
    pub ce: F,
    pub total: F,
}

pub struct AcousticModel {
    pub cfg: AcousticConfig,
    enc_in: LinearParams,
    pub encoder: ConformerStack,
    proj: LinearParams,
    code_emb: ParamId,
    spk_table: ParamId,
    dec_in: LinearParams,
    pub decoder: ConformerStack,
    dec_out: LinearParams,
    apc_head: LinearParams,
    cpc_proj: LinearParams,
    cpc_tgt: LinearParams,
}

pub struct EncodeOut {
    /// Encoder output Z, T_m × D.
    pub z: Var,
    /// Mid-stack tap for the HPC loss.
    pub mid: Var,
}

impl AcousticModel {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, cfg: &AcousticConfig, seed: u64) -> Self {
        cfg.validate().expect("invalid acoustic config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let d = cfg.dim;
        AcousticModel {
            cfg: cfg.clone(),
            enc_in: LinearParams::init(store, rng, "am.enc_in", cfg.mel_bins, d),
            encoder: ConformerStack::init(store, rng, "am.enc", &cfg.encoder),
            proj: LinearParams::init(store, rng, "am.proj", d, cfg.vocab),
            code_emb: store.add(
                "am.code_emb",
                crate::params::randn_tensor(rng, &[cfg.vocab, d], 1.0 / (d as f64).sqrt()),
            ),
            spk_table: store.add(
                "am.spk_table",
                crate::params::randn_tensor(rng, &[cfg.num_speakers, cfg.speaker_dim], 1.0),
            ),
            dec_in: LinearParams::init(store, rng, "am.dec_in", d + cfg.speaker_dim, d),
            decoder: ConformerStack::init(store, rng, "am.dec", &cfg.decoder),
            dec_out: LinearParams::init(store, rng, "am.dec_out", d, cfg.mel_bins),
            apc_head: LinearParams::init(store, rng, "am.hpc.apc", d, cfg.mel_bins),
            cpc_proj: LinearParams::init(store, rng, "am.hpc.cpc_proj", d, d),
            cpc_tgt: LinearParams::init(store, rng, "am.hpc.cpc_tgt", d, d),
        }
    }

    /// Content-encode a mel matrix under a chunk mask.
    pub fn encode<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        mel: Var,
        mask: &ChunkMask,
    ) -> EncodeOut {
        assert_eq!(
            tape.value(mel).cols(),
            self.cfg.mel_bins,
            "mel bins do not match the configured frontend"
        );
        let x = self.enc_in.apply(tape, store, mel);
        let (z, mid) = self.encoder.forward(tape, store, x, mask);
        EncodeOut { z, mid }
    }

    /// Average-pool Z to the token rate and project to vocab logits Z′.
    pub fn downsample_project<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        z: Var,
    ) -> Var {
        let pooled = tape.avg_pool_rows(z, self.cfg.downsample);
        self.proj.apply(tape, store, pooled)
    }

    /// Argmax codes (1-based) from a Z′ logits matrix.
    pub fn codes_from_logits<F: Scalar>(zprime: &Tensor<F>) -> Vec<u16> {
        (0..zprime.rows()).map(|r| (argmax(zprime.row(r)) + 1) as u16).collect()
    }

    /// Discretize Z′ to codes: Gumbel sampling in training, deterministic
    /// per-row argmax at inference. The training return also carries the
    /// forward tensor (one-hot rows under `cfg.hard`).
    pub fn discretize<F: Scalar>(
        zprime: &Tensor<F>,
        cfg: &crate::tape::GumbelConfig,
        training: bool,
    ) -> Result<(Vec<u16>, Option<Tensor<F>>)> {
        if training {
            let (soft, idx) = crate::tape::gumbel_softmax(zprime, cfg)?;
            Ok((idx.iter().map(|&i| (i + 1) as u16).collect(), Some(soft)))
        } else {
            Ok((Self::codes_from_logits(zprime), None))
        }
    }

    /// Normalized speaker embedding row, broadcast to `rows` frames.
    fn speaker_rows<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        speaker: usize,
        rows: usize,
    ) -> Var {
        assert!(speaker < self.cfg.num_speakers, "unknown speaker id {speaker}");
        let table = tape.param(store, self.spk_table);
        let row = tape.gather_rows(table, &[speaker]);
        let row = tape.l2_normalize_rows(row);
        tape.broadcast_row(row, rows)
    }

    fn decode_embedded<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        embedded: Var,
        t_m: usize,
        speaker: usize,
        mask: &ChunkMask,
    ) -> Var {
        let up = tape.repeat_rows(embedded, self.cfg.downsample, t_m);
        let spk = self.speaker_rows(tape, store, speaker, t_m);
        let x = tape.concat_cols(&[up, spk]);
        let x = self.dec_in.apply(tape, store, x);
        let (y, _) = self.decoder.forward(tape, store, x, mask);
        self.dec_out.apply(tape, store, y)
    }

    /// Training-path decode from the straight-through one-hot (so gradients
    /// flow back through the bottleneck).
    pub fn decode_soft<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        st_onehot: Var,
        t_m: usize,
        speaker: usize,
        mask: &ChunkMask,
    ) -> Var {
        let table = tape.param(store, self.code_emb);
        let embedded = tape.matmul(st_onehot, table);
        self.decode_embedded(tape, store, embedded, t_m, speaker, mask)
    }

    /// Inference-path decode from hard codes (1-based).
    pub fn decode_codes<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        codes: &[u16],
        t_m: usize,
        speaker: usize,
        mask: &ChunkMask,
    ) -> Var {
        let table = tape.param(store, self.code_emb);
        let idx: Vec<usize> = codes.iter().map(|&c| c as usize - 1).collect();
        let embedded = tape.gather_rows(table, &idx);
        self.decode_embedded(tape, store, embedded, t_m, speaker, mask)
    }

    /// HPC auxiliary loss on the encoder's mid-stack output: APC (L1 against
    /// mel k steps ahead) + CPC (InfoNCE against `negatives`). Sequences of
    /// length ≤ k contribute zero.
    pub fn hpc_loss<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        mid: Var,
        mel: Var,
        negatives: &[Vec<usize>],
    ) -> Var {
        let t_m = tape.value(mid).rows();
        let k = self.cfg.hpc_step;
        if t_m <= k {
            return tape.input(Tensor::scalar(F::zero()));
        }
        let valid = t_m - k;

        // APC: predict mel[t+k] from mid[t]
        let mid_valid = tape.slice_rows(mid, 0, valid);
        let pred = self.apc_head.apply(tape, store, mid_valid);
        let future = tape.slice_rows(mel, k, t_m);
        let apc = tape.l1(pred, future);

        // CPC: InfoNCE with one positive and the sampled negatives
        let proj = self.cpc_proj.apply(tape, store, mid_valid);
        let tgt_all = self.cpc_tgt.apply(tape, store, mid);
        let pos_idx: Vec<usize> = (0..valid).map(|t| t + k).collect();
        let pos_rows = tape.gather_rows(tgt_all, &pos_idx);
        let mut score_cols = Vec::with_capacity(1 + negatives.len());
        score_cols.push(tape.rowwise_dot(proj, pos_rows));
        for neg in negatives {
            assert_eq!(neg.len(), valid, "negative index set length mismatch");
            let rows = tape.gather_rows(tgt_all, neg);
            score_cols.push(tape.rowwise_dot(proj, rows));
        }
        let scores = tape.concat_cols(&score_cols);
        let cpc = tape.cross_entropy(scores, &vec![0usize; valid]);

        tape.add(apc, cpc)
    }

    /// Full training forward: encode → distill → discretize → decode → losses.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        mel: &Tensor<F>,
        tokens: &[u16],
        speaker: usize,
        mask: &ChunkMask,
        gumbel_noise: &Tensor<F>,
        temperature: F,
        hard: bool,
        negatives: &[Vec<usize>],
        weights: &LossWeights,
    ) -> Result<LossVars> {
        let t_m = mel.rows();
        let expected_t = t_m.div_ceil(self.cfg.downsample);
        if tokens.len() != expected_t {
            return Err(Error::Shape(format!(
                "token/latent length mismatch: {} tokens vs {} pooled frames",
                tokens.len(),
                expected_t
            )));
        }
        let targets0 = validate_tokens(tokens, self.cfg.vocab)?;

        let mel_var = tape.input(mel.clone());
        let enc = self.encode(tape, store, mel_var, mask);
        let zprime = self.downsample_project(tape, store, enc.z);
        let ce = tape.cross_entropy(zprime, &targets0);
        let (bottleneck, sampled) =
            gumbel_softmax_st(tape, zprime, gumbel_noise, temperature, hard);
        let mel_hat = self.decode_soft(tape, store, bottleneck, t_m, speaker, mask);
        let rec = tape.mse(mel_hat, mel_var);
        let hpc = self.hpc_loss(tape, store, enc.mid, mel_var, negatives);
        let total = tape.lincomb(&[
            (F::from_f64(weights.alpha), rec),
            (F::from_f64(weights.beta), hpc),
            (F::from_f64(weights.gamma), ce),
        ]);
        Ok(LossVars {
            total,
            rec,
            hpc,
            ce,
            zprime,
            mel_hat,
            codes: sampled.iter().map(|&i| (i + 1) as u16).collect(),
        })
    }

    /// Offline conversion: encode under `enc_chunk`, argmax codes, decode
    /// under `dec_chunk`. Deterministic.
    pub fn convert_offline<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        mel: &Tensor<F>,
        target_speaker: usize,
        enc_chunk: usize,
        dec_chunk: usize,
    ) -> (Tensor<F>, Vec<u16>) {
        let t_m = mel.rows();
        let mut tape = Tape::new();
        let mel_var = tape.input(mel.clone());
        let enc_mask = make_chunk_mask(t_m, enc_chunk);
        let enc = self.encode(&mut tape, store, mel_var, &enc_mask);
        let zprime = self.downsample_project(&mut tape, store, enc.z);
        let codes = Self::codes_from_logits(tape.value(zprime));
        let dec_mask = make_chunk_mask(t_m, dec_chunk);
        let out = self.decode_codes(&mut tape, store, &codes, t_m, target_speaker, &dec_mask);
        (tape.value(out).clone(), codes)
    }

    /// Extract argmax codes for one utterance (for LM training).
    pub fn extract_codes<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        mel: &Tensor<F>,
        enc_chunk: usize,
    ) -> Vec<u16> {
        let mut tape = Tape::new();
        let mel_var = tape.input(mel.clone());
        let mask = make_chunk_mask(mel.rows(), enc_chunk);
        let enc = self.encode(&mut tape, store, mel_var, &mask);
        let zprime = self.downsample_project(&mut tape, store, enc.z);
        Self::codes_from_logits(tape.value(zprime))
    }

    // ---- streaming entry points (used by the chunked engine) --------------

    pub fn fresh_encoder_caches<F: Scalar>(&self, max_history: usize) -> Vec<LayerCache<F>> {
        self.encoder.fresh_caches(max_history)
    }

    pub fn fresh_decoder_caches<F: Scalar>(&self, max_history: usize) -> Vec<LayerCache<F>> {
        self.decoder.fresh_caches(max_history)
    }

    /// Encode a chunk of mel rows, committing all of them to the caches.
    pub fn encode_stream_chunk<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        mel_rows: &Tensor<F>,
        caches: &mut [LayerCache<F>],
    ) -> Tensor<F> {
        let mut tape = Tape::new();
        let x = tape.input(mel_rows.clone());
        let x = self.enc_in.apply(&mut tape, store, x);
        let commit = mel_rows.rows();
        let z = self.encoder.forward_streaming(&mut tape, store, x, caches, commit);
        tape.value(z).clone()
    }

    /// Pool already-encoded Z rows (one or more whole windows, plus possibly
    /// a short final window at flush) and project to Z′ logits.
    pub fn project_pooled<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        z_rows: &Tensor<F>,
    ) -> Tensor<F> {
        let mut tape = Tape::new();
        let z = tape.input(z_rows.clone());
        let pooled = tape.avg_pool_rows(z, self.cfg.downsample);
        let zprime = self.proj.apply(&mut tape, store, pooled);
        tape.value(zprime).clone()
    }

    /// Decode a chunk of codes (real + optional pseudo suffix). `total_rows`
    /// is the upsampled mel length of the whole chunk, `commit_rows` how many
    /// leading rows advance the caches (the real region).
    pub fn decode_stream_chunk<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        codes: &[u16],
        speaker: usize,
        total_rows: usize,
        commit_rows: usize,
        caches: &mut [LayerCache<F>],
    ) -> Tensor<F> {
        let mut tape = Tape::new();
        let table = tape.param(store, self.code_emb);
        let idx: Vec<usize> = codes.iter().map(|&c| c as usize - 1).collect();
        let embedded = tape.gather_rows(table, &idx);
        let up = tape.repeat_rows(embedded, self.cfg.downsample, total_rows);
        let spk = self.speaker_rows(&mut tape, store, speaker, total_rows);
        let x = tape.concat_cols(&[up, spk]);
        let x = self.dec_in.apply(&mut tape, store, x);
        let y = self
            .decoder
            .forward_streaming(&mut tape, store, x, caches, commit_rows);
        let out = self.dec_out.apply(&mut tape, store, y);
        tape.value(out).clone()
    }
}

/// Tape handles plus values produced by one training forward.
pub struct LossVars {
    pub total: Var,
    pub rec: Var,
    pub hpc: Var,
    pub ce: Var,
    pub zprime: Var,
    pub mel_hat: Var,
    /// Sampled bottleneck codes, 1-based.
    pub codes: Vec<u16>,
}

/// 1-based tokens → validated 0-based targets.
pub fn validate_tokens(tokens: &[u16], vocab: usize) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|&t| {
            if t == 0 || t as usize > vocab {
                Err(Error::TokenOutOfRange { token: t as i64, vocab })
            } else {
                Ok(t as usize - 1)
            }
        })
        .collect()
}

/// Uniform negative indices for the CPC term: for each valid position t we
/// draw target rows from other time steps (never the positive t + k).
pub fn sample_cpc_negatives<R: Rng>(
    rng: &mut R,
    t_m: usize,
    k: usize,
    count: usize,
) -> Vec<Vec<usize>> {
    if t_m <= k {
        return Vec::new();
    }
    let valid = t_m - k;
    (0..count)
        .map(|_| {
            (0..valid)
                .map(|t| {
                    let pos = t + k;
                    if t_m == 1 {
                        return pos;
                    }
                    loop {
                        let cand = rng.random_range(0..t_m);
                        if cand != pos {
                            return cand;
                        }
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub adam: AdamConfig,
    pub weights: LossWeights,
    /// Gumbel temperature anneals linearly from `gumbel_start` to
    /// `gumbel_end` over `anneal_steps`.
    pub gumbel_start: f64,
    pub gumbel_end: f64,
    pub anneal_steps: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            gumbel_start: 2.0,
            gumbel_end: 0.5,
            anneal_steps: 1000,
        }
    }
}

impl TrainerConfig {
    pub fn temperature_at(&self, step: u64) -> f64 {
        if self.anneal_steps == 0 {
            return self.gumbel_end;
        }
        let t = (step as f64 / self.anneal_steps as f64).min(1.0);
        self.gumbel_start + (self.gumbel_end - self.gumbel_start) * t
    }
}

#[derive(Debug, Clone)]
pub struct StepReport<F: Scalar> {
    pub breakdown: LossBreakdown<F>,
    pub chunk_size: usize,
}

/// One training step over a batch: sample a chunk size, forward every
/// utterance under that mask, average the objective, backpropagate, apply
/// Adam. Aborts with a diagnostic if the loss goes non-finite.
pub fn train_step<F: Scalar, R: Rng>(
    model: &AcousticModel,
    store: &mut ParamStore<F>,
    batch: &[&Utterance],
    tcfg: &TrainerConfig,
    rng: &mut R,
) -> Result<StepReport<F>> {
    assert!(!batch.is_empty());
    let chunk = sample_training_chunk(rng);
    let temperature = F::from_f64(tcfg.temperature_at(store.step));
    let inv_b = F::one() / F::from_usize(batch.len());
    let mut accum = GradAccum::new(store);
    let (mut rec_sum, mut hpc_sum, mut ce_sum) = (F::zero(), F::zero(), F::zero());
    for utt in batch {
        let mel: Tensor<F> = utt.mel.cast();
        let t_m = mel.rows();
        let t = t_m.div_ceil(model.cfg.downsample);
        let noise: Tensor<F> = sample_gumbel_noise(rng, &[t, model.cfg.vocab]);
        let negatives =
            sample_cpc_negatives(rng, t_m, model.cfg.hpc_step, model.cfg.hpc_negatives);
        let mask = make_chunk_mask(t_m, chunk);
        let mut tape = Tape::new();
        let vars = model.loss_forward(
            &mut tape,
            store,
            &mel,
            &utt.tokens,
            utt.speaker_id as usize,
            &mask,
            &noise,
            temperature,
            true,
            &negatives,
            &tcfg.weights,
        )?;
        let total = tape.value(vars.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {} (speaker {}, chunk {})",
                store.step, utt.speaker_id, chunk
            )));
        }
        rec_sum += tape.value(vars.rec).item();
        hpc_sum += tape.value(vars.hpc).item();
        ce_sum += tape.value(vars.ce).item();
        tape.backward(vars.total, inv_b, &mut accum);
    }
    adam_step(store, accum, &tcfg.adam);
    let rec = rec_sum * inv_b;
    let hpc = hpc_sum * inv_b;
    let ce = ce_sum * inv_b;
    let total = tcfg.weights.combine(rec, hpc, ce);
    Ok(StepReport {
        breakdown: LossBreakdown { rec, hpc, ce, total },
        chunk_size: chunk,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::GumbelConfig;

    fn tiny_model<F: Scalar>(seed: u64) -> (ParamStore<F>, AcousticModel) {
        let mut store = ParamStore::new();
        let model = AcousticModel::init(&mut store, &AcousticConfig::tiny(), seed);
        (store, model)
    }

    fn tiny_mel<F: Scalar>(t_m: usize, seed: u64) -> Tensor<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::params::randn_tensor(&mut rng, &[t_m, 8], 1.0)
    }

    #[test]
    fn pooling_follows_the_ragged_tail_rule() {
        // r = 2: T 4 → 2 windows of hand-computed means; T 5 → 3 windows,
        // the last pooling a single frame; r = 1 is the identity.
        let x = Tensor::matrix(4, 2, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let mut tape = Tape::new();
        let v = tape.input(x.clone());
        let p = tape.avg_pool_rows(v, 2);
        assert_eq!(tape.value(p).data(), &[2.0, 3.0, 6.0, 7.0]);

        let x5 = Tensor::matrix(5, 1, vec![1.0f64, 3.0, 5.0, 7.0, 11.0]);
        let mut tape = Tape::new();
        let v = tape.input(x5);
        let p = tape.avg_pool_rows(v, 2);
        assert_eq!(tape.value(p).shape(), &[3, 1]);
        assert_eq!(tape.value(p).data(), &[2.0, 6.0, 11.0]);

        let mut tape = Tape::new();
        let v = tape.input(x.clone());
        let p = tape.avg_pool_rows(v, 1);
        assert_eq!(tape.value(p).data(), x.data());
    }

    #[test]
    fn encode_preserves_frame_count_and_is_deterministic() {
        let (store, model) = tiny_model::<f64>(1);
        for t_m in [1usize, 5] {
            let mel = tiny_mel::<f64>(t_m, 2);
            let mask = make_chunk_mask(t_m, 2);
            let run = || {
                let mut tape = Tape::new();
                let m = tape.input(mel.clone());
                let out = model.encode(&mut tape, &store, m, &mask);
                tape.value(out.z).clone()
            };
            let a = run();
            let b = run();
            assert_eq!(a.shape(), &[t_m, 8]);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn discretize_peaked_rows_agree_across_modes() {
        let mut z = Tensor::zeros(&[3, 6]);
        z.set(0, 2, 20.0f64);
        z.set(1, 0, 20.0);
        z.set(2, 5, 20.0);
        let cfg = GumbelConfig { temperature: 1.0, hard: true, rng_seed: 7 };
        let (train_codes, soft) = AcousticModel::discretize(&z, &cfg, true).unwrap();
        let (infer_codes, none) = AcousticModel::discretize(&z, &cfg, false).unwrap();
        assert_eq!(train_codes, vec![3, 1, 6]);
        assert_eq!(infer_codes, vec![3, 1, 6]);
        assert!(soft.is_some() && none.is_none());
    }

    #[test]
    fn inference_discretize_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Tensor<f64> = crate::params::randn_tensor(&mut rng, &[10, 6], 1.0);
        let cfg = GumbelConfig { temperature: 1.0, hard: false, rng_seed: 0 };
        let (a, _) = AcousticModel::discretize(&z, &cfg, false).unwrap();
        let (b, _) = AcousticModel::discretize(&z, &cfg, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_discretize_tracks_softmax_probabilities() {
        // Gumbel-max: P(argmax(logits+g) = i) = softmax(logits)ᵢ.
        let logits = Tensor::matrix(1, 3, vec![0.0f64, 0.7, -0.3]);
        let probs = crate::tape::softmax_slice(logits.row(0));
        let n = 4000;
        let mut counts = [0usize; 3];
        for seed in 0..n {
            let cfg = GumbelConfig { temperature: 1.0, hard: false, rng_seed: seed as u64 };
            let (codes, _) = AcousticModel::discretize(&logits, &cfg, true).unwrap();
            counts[codes[0] as usize - 1] += 1;
        }
        for (c, &p) in counts.iter().zip(&probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                ((*c as f64) - n as f64 * p).abs() < 4.0 * sigma,
                "counts {counts:?} probs {probs:?}"
            );
        }
    }

    #[test]
    fn decode_has_the_mel_shape_contract() {
        let (store, model) = tiny_model::<f64>(4);
        let mask = make_chunk_mask(7, 0);
        let mut tape = Tape::new();
        let out = model.decode_codes(&mut tape, &store, &[1, 5, 3, 2], 7, 1, &mask);
        assert_eq!(tape.value(out).shape(), &[7, 8]);
    }

    #[test]
    fn speakers_change_the_decode_output() {
        let (store, model) = tiny_model::<f64>(5);
        let mask = make_chunk_mask(6, 0);
        let run = |spk: usize| {
            let mut tape = Tape::new();
            let out = model.decode_codes(&mut tape, &store, &[2, 4, 6], 6, spk, &mask);
            tape.value(out).clone()
        };
        let a = run(0);
        let b = run(2);
        assert!(a.max_abs_diff(&b) > 0.0, "speaker embedding has no effect");
    }

    #[test]
    fn hpc_short_sequences_contribute_zero() {
        let (store, model) = tiny_model::<f64>(6);
        let mel = tiny_mel::<f64>(6, 7); // T_m = 6 = k
        let mask = make_chunk_mask(6, 0);
        let mut tape = Tape::new();
        let m = tape.input(mel);
        let enc = model.encode(&mut tape, &store, m, &mask);
        let hpc = model.hpc_loss(&mut tape, &store, enc.mid, m, &[]);
        assert_eq!(tape.value(hpc).item(), 0.0);
    }

    #[test]
    fn hpc_closed_forms() {
        // Zero CPC heads → all 11 scores equal → per-step CE = ln 11.
        // Zero APC head on a constant mel c → APC = |c|.
        let (mut store, model) = tiny_model::<f64>(8);
        for name in ["am.hpc.apc.w", "am.hpc.cpc_proj.w", "am.hpc.cpc_tgt.w"] {
            let id = store.id_of(name).unwrap();
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape));
        }
        let c = -0.75f64;
        let mel = Tensor::full(&[16, 8], c);
        let mask = make_chunk_mask(16, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let negatives = sample_cpc_negatives(&mut rng, 16, 6, 10);
        let mut tape = Tape::new();
        let m = tape.input(mel);
        let enc = model.encode(&mut tape, &store, m, &mask);
        let hpc = model.hpc_loss(&mut tape, &store, enc.mid, m, &negatives);
        let expect = c.abs() + (11.0f64).ln();
        assert!(
            (tape.value(hpc).item() - expect).abs() < 1e-9,
            "hpc {} vs {}",
            tape.value(hpc).item(),
            expect
        );
    }

    #[test]
    fn loss_weights_combine_matches_the_paper_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(w.alpha, 45.0);
        assert_eq!(w.beta, 1.0);
        assert_eq!(w.gamma, 10.0);
        let total = w.combine(0.1f64, 2.0, 1.0);
        assert!((total - 16.5).abs() < 1e-12);
    }

    #[test]
    fn loss_forward_validates_lengths_and_tokens() {
        let (store, model) = tiny_model::<f64>(10);
        let mel = tiny_mel::<f64>(12, 11);
        let mask = make_chunk_mask(12, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise: Tensor<f64> = sample_gumbel_noise(&mut rng, &[6, 6]);
        let negatives = sample_cpc_negatives(&mut rng, 12, 6, 10);
        let weights = LossWeights::default();
        // wrong token count
        let mut tape = Tape::new();
        let err = model.loss_forward(
            &mut tape, &store, &mel, &[1, 2, 3], 0, &mask, &noise, 1.0, true, &negatives, &weights,
        );
        assert!(matches!(err, Err(Error::Shape(_))));
        // token out of range (vocab 6)
        let mut tape = Tape::new();
        let err = model.loss_forward(
            &mut tape, &store, &mel, &[1, 2, 3, 4, 5, 7], 0, &mask, &noise, 1.0, true, &negatives,
            &weights,
        );
        assert!(matches!(err, Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn perfect_reconstruction_leaves_only_the_hpc_term() {
        // total = α·0 + β·hpc + γ·~0 when mel_hat == mel and Z′ is sharply
        // peaked on the targets: check via the combine identity on a real
        // forward, substituting rec = 0 and ce < 1e−8.
        let (store, model) = tiny_model::<f64>(13);
        let mel = tiny_mel::<f64>(12, 14);
        let mask = make_chunk_mask(12, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let noise: Tensor<f64> = sample_gumbel_noise(&mut rng, &[6, 6]);
        let negatives = sample_cpc_negatives(&mut rng, 12, 6, 10);
        let weights = LossWeights::default();
        let mut tape = Tape::new();
        let vars = model
            .loss_forward(
                &mut tape, &store, &mel, &[1, 2, 3, 4, 5, 6], 0, &mask, &noise, 1.0, true,
                &negatives, &weights,
            )
            .unwrap();
        let (rec, hpc, ce, total) = (
            tape.value(vars.rec).item(),
            tape.value(vars.hpc).item(),
            tape.value(vars.ce).item(),
            tape.value(vars.total).item(),
        );
        // exact weighted-sum identity, no hidden terms
        assert_eq!(total, weights.combine(rec, hpc, ce));
        // and if rec and ce vanish the total is β·hpc alone
        assert_eq!(weights.combine(0.0, hpc, 0.0), 1.0 * hpc);
    }

    #[test]
    fn train_step_is_bitwise_deterministic() {
        let spec = crate::corpus::CorpusSpec {
            num_speakers: 3,
            utterances_per_speaker: 2,
            token_vocab: 6,
            tokens_per_utterance: 8,
            mel_bins: 8,
            seed: 77,
            ..Default::default()
        };
        let utts = crate::corpus::generate_corpus(&spec).unwrap();
        let run = || {
            let mut store: ParamStore<f32> = ParamStore::new();
            let mut cfg = AcousticConfig::tiny();
            cfg.num_speakers = 3;
            let model = AcousticModel::init(&mut store, &cfg, 21);
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let batch: Vec<&Utterance> = utts.iter().take(4).collect();
            let report =
                train_step(&model, &mut store, &batch, &TrainerConfig::default(), &mut rng)
                    .unwrap();
            report.breakdown
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.total, LossWeights::default().combine(a.rec, a.hpc, a.ce));
    }

    #[test]
    fn convert_offline_is_deterministic() {
        let (store, model) = tiny_model::<f32>(40);
        let mel = tiny_mel::<f32>(12, 41);
        let (a, codes_a) = model.convert_offline(&store, &mel, 1, 2, 2);
        let (b, codes_b) = model.convert_offline(&store, &mel, 1, 2, 2);
        assert_eq!(a.data(), b.data());
        assert_eq!(codes_a, codes_b);
        assert_eq!(a.shape(), &[12, 8]);
        assert_eq!(codes_a.len(), 6);
    }

    #[test]
    fn spot_gradient_check_through_the_full_objective() {
        // A cheap wiring check on a few representative parameters; the
        // acceptance suite runs the exhaustive version.
        let (mut store, model) = tiny_model::<f64>(50);
        let mel = tiny_mel::<f64>(12, 51);
        let mask = make_chunk_mask(12, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let noise: Tensor<f64> = sample_gumbel_noise(&mut rng, &[6, 6]);
        let negatives = sample_cpc_negatives(&mut rng, 12, 6, 10);
        let weights = LossWeights::default();
        let tokens = [1u16, 2, 3, 4, 5, 6];
        let ids: Vec<ParamId> = [
            "am.enc_in.w",
            "am.code_emb",
            "am.spk_table",
            "am.enc.block0.attn.q.w",
            "am.dec.block1.conv.dw.w",
            "am.hpc.apc.w",
            "am.hpc.cpc_proj.w",
            "am.proj.b",
            "am.dec_out.w",
        ]
        .iter()
        .map(|n| store.id_of(n).unwrap())
        .collect();
        let report = crate::gradcheck::grad_check_params(
            &mut store,
            |tape, st| {
                model
                    .loss_forward(
                        tape, st, &mel, &tokens, 0, &mask, &noise, 1.0, false, &negatives,
                        &weights,
                    )
                    .unwrap()
                    .total
            },
            &ids,
            1e-5,
        );
        assert!(
            report.max_rel_error < 1e-3,
            "worst {:?}",
            report.worst_group()
        );
    }
}
