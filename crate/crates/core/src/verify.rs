//! Self-contained invariant suite behind the `verify` command: gradient
//! checks, mask oracles, streaming equivalence, codec and checkpoint round
//! trips. Every check is weight-independent (random or tiny models), so a
//! fresh checkout passes without any training.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::acoustic::{sample_cpc_negatives, AcousticConfig, AcousticModel, LossWeights};
use crate::conformer::ConformerConfig;
use crate::corpus::{generate_corpus, CorpusSpec};
use crate::frontend::{FrontendConfig, MelAnalyzer, MelFrontend};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::lm::{ContextLm, LmConfig, LmState, BOS};
use crate::masks::{make_chunk_mask, sample_training_chunk};
use crate::params::{randn_tensor, read_checkpoint, ParamStore};
use crate::session::{
    convert_offline_wav, convert_streaming, pad_tail, SessionConfig, StreamSession,
};
use crate::tape::{quiet_softmax, sample_gumbel_noise};
use crate::tensor::Tensor;
use crate::vocoder::Vocoder;
use crate::wire::{wire_decode, wire_encode};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<String, String>) -> CheckResult {
    match run() {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

/// Gradient check of the full tiny acoustic objective (soft bottleneck so
/// finite differences see the same function the backward pass does).
pub fn acoustic_gradient_report() -> GradCheckReport {
    let cfg = AcousticConfig::tiny();
    let mut store: ParamStore<f64> = ParamStore::new();
    let model = AcousticModel::init(&mut store, &cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mel: Tensor<f64> = randn_tensor(&mut rng, &[12, cfg.mel_bins], 1.0);
    let noise: Tensor<f64> = sample_gumbel_noise(&mut rng, &[6, cfg.vocab]);
    let negatives = sample_cpc_negatives(&mut rng, 12, cfg.hpc_step, cfg.hpc_negatives);
    let tokens: Vec<u16> = (0..6).map(|i| (i % cfg.vocab + 1) as u16).collect();
    let weights = LossWeights::default();
    let mask = make_chunk_mask(12, 2);
    grad_check(
        &mut store,
        move |tape, st| {
            model
                .loss_forward(
                    tape, st, &mel, &tokens, 1, &mask, &noise, 1.0, false, &negatives, &weights,
                )
                .unwrap()
                .total
        },
        1e-5,
    )
}

/// Gradient check of the LM next-token objective on a tiny config.
pub fn lm_gradient_report() -> GradCheckReport {
    let cfg = LmConfig::tiny(6);
    let mut store: ParamStore<f64> = ParamStore::new();
    let lm = ContextLm::init(&mut store, &cfg, 9);
    // non-zero head so its gradients are informative
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let id = store.id_of("lm.head.w").unwrap();
    store.set_value(id, randn_tensor(&mut rng, &[cfg.hidden, cfg.vocab], 0.3));
    let codes: Vec<u16> = vec![1, 4, 2, 6, 3, 5, 1, 2];
    grad_check(
        &mut store,
        move |tape, st| {
            let mut ids = vec![BOS];
            ids.extend_from_slice(&codes);
            let mut state = LmState::fresh(&cfg);
            let logits = lm.forward_tape(tape, st, &ids[..ids.len() - 1], &mut state).unwrap();
            let targets: Vec<usize> = codes.iter().map(|&c| c as usize).collect();
            tape.cross_entropy(logits, &targets)
        },
        1e-5,
    )
}

fn small_engine_config() -> AcousticConfig {
    let block = ConformerConfig { num_blocks: 2, dim: 16, heads: 2, conv_kernel: 7, ffn_expansion: 2 };
    AcousticConfig {
        mel_bins: 80,
        dim: 16,
        vocab: 12,
        downsample: 2,
        speaker_dim: 8,
        num_speakers: 2,
        encoder: block.clone(),
        decoder: block,
        hpc_step: 6,
        hpc_negatives: 10,
    }
}

/// Run the whole verification suite. Checkpoint paths, when given, are
/// additionally validated for format integrity.
pub fn run_all(am_ckpt: Option<&Path>, lm_ckpt: Option<&Path>) -> Vec<CheckResult> {
    let mut results = Vec::new();

    results.push(check("quiet-softmax-definition", || {
        let y = quiet_softmax(&[0.0f64, 0.0], None).map_err(|e| e.to_string())?;
        if (y[0] - 1.0 / 3.0).abs() > 1e-12 {
            return Err(format!("symmetric pair gave {y:?}"));
        }
        let z = quiet_softmax(&[3.0f64, -1.0], Some(&[false, false])).map_err(|e| e.to_string())?;
        if z.iter().any(|&v| v != 0.0) {
            return Err("fully masked row not zero".into());
        }
        let s: f64 = quiet_softmax(&[1.0f64, 2.0, 3.0], None).unwrap().iter().sum();
        if !(0.0..=1.0).contains(&s) {
            return Err(format!("sum {s} outside [0,1]"));
        }
        Ok("definition cases hold".into())
    }));

    results.push(check("gradcheck-linear-mse", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.add("w", randn_tensor(&mut rng, &[6, 4], 0.5));
        let b = store.add("b", randn_tensor(&mut rng, &[4], 0.5));
        let x: Tensor<f64> = randn_tensor(&mut rng, &[5, 6], 1.0);
        let t: Tensor<f64> = randn_tensor(&mut rng, &[5, 4], 1.0);
        let report = grad_check(
            &mut store,
            move |tape, st| {
                let xv = tape.input(x.clone());
                let wv = tape.param(st, w);
                let bv = tape.param(st, b);
                let y = tape.linear(xv, wv, bv);
                let tv = tape.input(t.clone());
                tape.mse(y, tv)
            },
            1e-5,
        );
        if report.passes(1e-6) {
            Ok(format!("max rel error {:.2e}", report.max_rel_error))
        } else {
            Err(format!("max rel error {:.2e}", report.max_rel_error))
        }
    }));

    results.push(check("gradcheck-acoustic-objective", || {
        let report = acoustic_gradient_report();
        if report.passes(1e-3) {
            Ok(format!("max rel error {:.2e}", report.max_rel_error))
        } else {
            Err(format!(
                "max rel error {:.2e} in {}",
                report.max_rel_error,
                report.worst_group().map(|g| g.name.as_str()).unwrap_or("?")
            ))
        }
    }));

    results.push(check("gradcheck-lm-objective", || {
        let report = lm_gradient_report();
        if report.passes(1e-3) {
            Ok(format!("max rel error {:.2e}", report.max_rel_error))
        } else {
            Err(format!("max rel error {:.2e}", report.max_rel_error))
        }
    }));

    results.push(check("chunk-mask-bruteforce", || {
        for t in 1..=16usize {
            for c in 0..=8usize {
                let m = make_chunk_mask(t, c);
                for i in 0..t {
                    for j in 0..t {
                        let expect = if c == 0 { true } else { j <= (i / c + 1) * c - 1 };
                        if m.allowed(i, j) != expect {
                            return Err(format!("mismatch at T={t} c={c} ({i},{j})"));
                        }
                    }
                }
            }
        }
        Ok("exhaustive for T ≤ 16, c ≤ 8".into())
    }));

    results.push(check("chunk-sampler-distribution", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let mut zero = 0usize;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            match sample_training_chunk(&mut rng) {
                0 => zero += 1,
                c => counts[c - 1] += 1,
            }
        }
        let p0 = zero as f64 / n as f64;
        if (p0 - 0.5).abs() > 0.02 {
            return Err(format!("P(full sequence) = {p0}"));
        }
        let expect = (n - zero) as f64 / 8.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expect;
                d * d / expect
            })
            .sum();
        if chi2 >= 18.475 {
            return Err(format!("chi² = {chi2:.2} over the 1..8 bins"));
        }
        Ok(format!("P(full) = {p0:.3}, chi² = {chi2:.2}"))
    }));

    results.push(check("streaming-equivalence", || {
        let mut store: ParamStore<f32> = ParamStore::new();
        let model = AcousticModel::init(&mut store, &small_engine_config(), 21);
        let analyzer =
            Arc::new(MelAnalyzer::new(FrontendConfig::default()).map_err(|e| e.to_string())?);
        let vocoder = Vocoder::new(analyzer.clone());
        let spec = CorpusSpec {
            num_speakers: 2,
            utterances_per_speaker: 1,
            token_vocab: 12,
            tokens_per_utterance: 16,
            seed: 31,
            ..Default::default()
        };
        let mel: Tensor<f64> = generate_corpus(&spec).unwrap()[0].mel.cast();
        let audio = vocoder.synthesize(&mel);
        let mut worst = 0.0f32;
        for &chunk in &[1usize, 2, 4] {
            let offline = convert_offline_wav(
                &model,
                &store,
                &vocoder,
                &pad_tail(&audio, &analyzer.cfg),
                0,
                chunk,
            )
            .map_err(|e| e.to_string())?;
            let mut session = StreamSession::new(
                SessionConfig { chunk_frames: chunk, ..SessionConfig::standalone(0) },
                &model,
                &store,
                &vocoder,
                analyzer.clone(),
                None,
            )
            .map_err(|e| e.to_string())?;
            convert_streaming(&mut session, &audio, 160 * chunk).map_err(|e| e.to_string())?;
            let diff = session.emitted_mel().max_abs_diff(&offline.mel_out);
            worst = worst.max(diff);
            if diff > 1e-4 {
                return Err(format!("chunk {chunk}: mel diff {diff}"));
            }
        }
        Ok(format!("chunks 1/2/4, worst mel diff {worst:.2e}"))
    }));

    results.push(check("lm-incremental-equivalence", || {
        let mut store: ParamStore<f32> = ParamStore::new();
        let lm = ContextLm::init(&mut store, &LmConfig::tiny(9), 5);
        let ids: Vec<u16> = vec![BOS, 3, 1, 7, 9, 2, 8, 5, 4, 6];
        let mut fresh = LmState::fresh(&lm.cfg);
        let full = lm.logits(&store, &ids, &mut fresh).map_err(|e| e.to_string())?;
        let mut state = LmState::fresh(&lm.cfg);
        let mut rows: Vec<f32> = Vec::new();
        for piece in [&ids[..2], &ids[2..5], &ids[5..]] {
            let l = lm.logits(&store, piece, &mut state).map_err(|e| e.to_string())?;
            rows.extend_from_slice(l.data());
        }
        let inc = Tensor::matrix(ids.len(), lm.cfg.vocab, rows);
        let diff = full.max_abs_diff(&inc);
        if diff > 1e-5 {
            return Err(format!("kv-cache divergence {diff}"));
        }
        Ok(format!("max divergence {diff:.2e}"))
    }));

    results.push(check("wire-codec-round-trip", || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let len = rng.random_range(0..200usize);
            let codes: Vec<u16> = (0..len).map(|_| rng.random_range(1..=150)).collect();
            let bytes = wire_encode(&codes, 150, 50).map_err(|e| e.to_string())?;
            let (_, back) = wire_decode(&bytes).map_err(|e| e.to_string())?;
            if back != codes {
                return Err("round trip mismatch".into());
            }
        }
        Ok("1000 random sequences exact".into())
    }));

    results.push(check("checkpoint-round-trip", || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add("a", randn_tensor(&mut rng, &[3, 5], 1.0));
        store.add("b", randn_tensor(&mut rng, &[7], 1.0));
        let dir = std::env::temp_dir().join("dualvc3_verify");
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let path = dir.join("rt.ckpt");
        store.save(&path).map_err(|e| e.to_string())?;
        let raw = read_checkpoint(&path).map_err(|e| e.to_string())?;
        for (name, tensor) in &raw {
            let id = store.id_of(name).ok_or("name mismatch")?;
            if store.value(id).data() != tensor.data() {
                return Err(format!("parameter {name} not bit-exact"));
            }
        }
        Ok("bit-exact".into())
    }));

    results.push(check("frontend-incremental-equality", || {
        let analyzer =
            Arc::new(MelAnalyzer::new(FrontendConfig::default()).map_err(|e| e.to_string())?);
        let samples: Vec<f64> = (0..4000).map(|i| ((i as f64) * 0.21).sin() * 0.4).collect();
        let offline = analyzer.mel_spectrogram::<f32>(&samples);
        let mut fe: MelFrontend<f32> = MelFrontend::new(analyzer);
        let mut rows = Vec::new();
        for chunk in samples.chunks(173) {
            for f in fe.push(chunk) {
                rows.extend(f);
            }
        }
        let streamed = Tensor::matrix(offline.rows(), 80, rows[..offline.numel()].to_vec());
        if offline.data() != streamed.data() {
            return Err("incremental framing diverged from offline".into());
        }
        Ok("bit-exact".into())
    }));

    if let Some(path) = am_ckpt {
        results.push(check("am-checkpoint-loadable", || {
            let raw = read_checkpoint(path).map_err(|e| e.to_string())?;
            Ok(format!("{} parameters", raw.len()))
        }));
    }
    if let Some(path) = lm_ckpt {
        results.push(check("lm-checkpoint-loadable", || {
            let raw = read_checkpoint(path).map_err(|e| e.to_string())?;
            Ok(format!("{} parameters", raw.len()))
        }));
    }

    results
}
