//! `dualvc3` command line: corpus generation, acoustic/LM training, offline
//! and streaming conversion, latency benchmarking, and the verification
//! suite.
//!
//! Exit codes: 0 success, 2 usage, 3 missing input, 4 missing model,
//! 5 verification failure.

mod config;
mod wav;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dualvc3::acoustic::{train_step, AcousticConfig, AcousticModel};
use dualvc3::corpus::{generate_corpus, load_corpus, save_corpus, CorpusSpec, Utterance};
use dualvc3::frontend::{FrontendConfig, MelAnalyzer};
use dualvc3::latency::measure_latency;
use dualvc3::lm::{lm_train_step, unigram_baseline_nll, ContextLm, LmConfig, SamplingConfig};
use dualvc3::masks::make_chunk_mask;
use dualvc3::params::{checkpoint_num_scalars, read_checkpoint, ParamStore};
use dualvc3::session::{
    convert_offline_wav, convert_streaming, SessionConfig, SessionMode, StreamSession,
};
use dualvc3::tape::Tape;
use dualvc3::tensor::Tensor;
use dualvc3::vocoder::Vocoder;

use config::RunConfig;

const EXIT_USAGE: i32 = 2;
const EXIT_MISSING_INPUT: i32 = 3;
const EXIT_MISSING_MODEL: i32 = 4;
const EXIT_VERIFY_FAILED: i32 = 5;

struct Failure {
    code: i32,
    msg: String,
}

fn fail(code: i32, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "dualvc3", version, about = "Streaming voice conversion with a discrete semantic bottleneck")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus with ground-truth semantic tokens.
    GenData {
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        speakers: usize,
        /// Utterances per speaker.
        #[arg(long, default_value_t = 50)]
        utts: usize,
        #[arg(long, default_value_t = 150)]
        vocab: usize,
        /// Tokens per utterance (2 mel frames each).
        #[arg(long, default_value_t = 30)]
        tokens: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train the acoustic model on a corpus directory.
    TrainAm {
        #[arg(long)]
        corpus: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// key=value config file (defaults documented in the README).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from an existing checkpoint (step numbering continues).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Tab-separated loss log: step, rec, hpc, ce, total.
        #[arg(long)]
        loss_log: Option<PathBuf>,
        /// Write Z' logits rows with speaker ids after training (TSV).
        #[arg(long)]
        dump_latents: Option<PathBuf>,
    },
    /// Train the pseudo-context language model on codes from a frozen
    /// acoustic model.
    TrainLm {
        #[arg(long)]
        corpus: PathBuf,
        /// Frozen acoustic-model checkpoint.
        #[arg(long)]
        am: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 600)]
        steps: usize,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Encoder chunk used for code extraction (mel frames).
        #[arg(long, default_value_t = 2)]
        chunk_frames: usize,
        /// Fraction of utterances held out for NLL reporting.
        #[arg(long, default_value_t = 0.1)]
        holdout: f64,
        /// Tab-separated loss log: step, train loss (held-out NLL per epoch
        /// on #heldout lines).
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Convert a wav to a target speaker.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        am: PathBuf,
        /// Language-model checkpoint (required for --mode full).
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        target_speaker: usize,
        /// standalone | full
        #[arg(long, default_value = "standalone")]
        mode: String,
        /// Streaming chunk size in milliseconds (multiple of 10).
        #[arg(long, default_value_t = 20)]
        chunk_ms: usize,
        /// Convert the whole utterance under the full-sequence mask instead
        /// of streaming.
        #[arg(long)]
        offline: bool,
        /// greedy | topk (pseudo-context sampling, full mode).
        #[arg(long, default_value = "greedy")]
        sampling: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Measure RTF and the latency decomposition for both modes.
    Bench {
        #[arg(long)]
        am: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
        #[arg(long, default_value_t = 20)]
        chunk_ms: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report to a file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite (gradient checks, mask oracles, streaming
    /// equivalence, codec round trips).
    Verify {
        /// Optionally validate an acoustic checkpoint.
        #[arg(long)]
        am: Option<PathBuf>,
        /// Optionally validate an LM checkpoint.
        #[arg(long)]
        lm: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData { out, speakers, utts, vocab, tokens, seed } => {
            cmd_gen_data(&out, speakers, utts, vocab, tokens, seed)
        }
        Cmd::TrainAm { corpus, out, config, steps, batch, seed, resume, loss_log, dump_latents } => {
            cmd_train_am(
                &corpus,
                &out,
                config.as_deref(),
                steps,
                batch,
                seed,
                resume.as_deref(),
                loss_log.as_deref(),
                dump_latents.as_deref(),
            )
        }
        Cmd::TrainLm {
            corpus,
            am,
            out,
            config,
            steps,
            batch,
            seed,
            chunk_frames,
            holdout,
            loss_log,
        } => cmd_train_lm(
            &corpus,
            &am,
            &out,
            config.as_deref(),
            steps,
            batch,
            seed,
            chunk_frames,
            holdout,
            loss_log.as_deref(),
        ),
        Cmd::Convert {
            input,
            output,
            am,
            lm,
            target_speaker,
            mode,
            chunk_ms,
            offline,
            sampling,
            seed,
            config,
        } => cmd_convert(
            &input,
            &output,
            &am,
            lm.as_deref(),
            target_speaker,
            &mode,
            chunk_ms,
            offline,
            &sampling,
            seed,
            config.as_deref(),
        ),
        Cmd::Bench { am, lm, seconds, chunk_ms, seed, config, out } => {
            cmd_bench(&am, &lm, seconds, chunk_ms, seed, config.as_deref(), out.as_deref())
        }
        Cmd::Verify { am, lm } => cmd_verify(am.as_deref(), lm.as_deref()),
    };
    if let Err(f) = result {
        eprintln!("error: {}", f.msg);
        std::process::exit(f.code);
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| fail(EXIT_USAGE, e)),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_gen_data(
    out: &Path,
    speakers: usize,
    utts: usize,
    vocab: usize,
    tokens: usize,
    seed: u64,
) -> CmdResult {
    let spec = CorpusSpec {
        num_speakers: speakers,
        utterances_per_speaker: utts,
        token_vocab: vocab,
        tokens_per_utterance: tokens,
        seed,
        ..Default::default()
    };
    let utterances =
        generate_corpus(&spec).map_err(|e| fail(EXIT_USAGE, format!("invalid corpus spec: {e}")))?;
    save_corpus(out, &spec, &utterances)
        .map_err(|e| fail(EXIT_MISSING_INPUT, format!("cannot write corpus: {e}")))?;
    println!(
        "wrote {} utterances ({} speakers x {}) to {}",
        utterances.len(),
        speakers,
        utts,
        out.display()
    );
    Ok(())
}

/// Corpus geometry overrides whatever the run config says: the model has to
/// match the data it trains on.
fn acoustic_config_for_corpus(run: &RunConfig, spec: &CorpusSpec) -> Result<AcousticConfig, Failure> {
    let mut cfg = run.acoustic();
    cfg.num_speakers = spec.num_speakers;
    cfg.mel_bins = spec.mel_bins;
    cfg.downsample = spec.downsample_factor();
    if spec.token_vocab > cfg.vocab {
        return Err(fail(
            EXIT_USAGE,
            format!(
                "corpus token vocab {} exceeds the model vocab {}; raise `vocab`",
                spec.token_vocab, cfg.vocab
            ),
        ));
    }
    Ok(cfg)
}

fn load_corpus_or_fail(dir: &Path) -> Result<(CorpusSpec, Vec<Utterance>), Failure> {
    load_corpus(dir).map_err(|e| fail(EXIT_MISSING_INPUT, format!("cannot load corpus: {e}")))
}

const STEP_KEY: &str = "trainer.step";

fn store_step(store: &ParamStore<f32>) -> u64 {
    store.step
}

fn set_step_param(store: &mut ParamStore<f32>, step: u64) {
    let id = store.id_of(STEP_KEY).expect("step entry registered");
    store.set_value(id, Tensor::scalar(step as f32));
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_am(
    corpus: &Path,
    out: &Path,
    config: Option<&Path>,
    steps: usize,
    batch: Option<usize>,
    seed: Option<u64>,
    resume: Option<&Path>,
    loss_log: Option<&Path>,
    dump_latents: Option<&Path>,
) -> CmdResult {
    let run = load_run_config(config)?;
    let batch = batch.unwrap_or(run.batch).max(1);
    let seed = seed.unwrap_or(run.seed);
    let (spec, utterances) = load_corpus_or_fail(corpus)?;
    let cfg = acoustic_config_for_corpus(&run, &spec)?;

    let mut store: ParamStore<f32> = ParamStore::new();
    let model = AcousticModel::init(&mut store, &cfg, seed);
    store.add(STEP_KEY, Tensor::scalar(0.0f32));
    if let Some(path) = resume {
        store
            .load(path)
            .map_err(|e| fail(EXIT_MISSING_MODEL, format!("cannot resume from checkpoint: {e}")))?;
        let id = store.id_of(STEP_KEY).unwrap();
        store.step = store.value(id).item() as u64;
        println!("resumed at step {}", store.step);
    }

    let tcfg = run.trainer();
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut shuffle_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ store.step.wrapping_mul(0x9e3779b9));

    let mut log = String::new();
    let start = store.step;
    let t0 = std::time::Instant::now();
    for i in 0..steps {
        let step_no = start + i as u64;
        let picks: Vec<&Utterance> = (0..batch)
            .map(|j| &utterances[order[(step_no as usize * batch + j) % order.len()]])
            .collect();
        let report = train_step(&model, &mut store, &picks, &tcfg, &mut rng)
            .map_err(|e| fail(EXIT_USAGE, format!("training aborted: {e}")))?;
        let b = report.breakdown;
        log.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", step_no + 1, b.rec, b.hpc, b.ce, b.total));
        if (i + 1) % 50 == 0 || i + 1 == steps {
            println!(
                "step {:>6}  rec {:.4}  hpc {:.4}  ce {:.4}  total {:.4}  ({:.2} s/step)",
                step_no + 1,
                b.rec,
                b.hpc,
                b.ce,
                b.total,
                t0.elapsed().as_secs_f64() / (i + 1) as f64
            );
        }
    }

    let step = store_step(&store);
    set_step_param(&mut store, step);
    store
        .save(out)
        .map_err(|e| fail(EXIT_MISSING_INPUT, format!("cannot write checkpoint: {e}")))?;
    if let Some(path) = loss_log {
        use std::io::Write;
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| fail(EXIT_MISSING_INPUT, format!("cannot open loss log: {e}")))?;
        file.write_all(log.as_bytes())
            .map_err(|e| fail(EXIT_MISSING_INPUT, format!("cannot write loss log: {e}")))?;
    }
    if let Some(path) = dump_latents {
        dump_latent_rows(&model, &store, &utterances, path)?;
    }
    println!("saved acoustic checkpoint to {}", out.display());
    Ok(())
}

/// Z' logits rows with speaker ids, for external visualization.
fn dump_latent_rows(
    model: &AcousticModel,
    store: &ParamStore<f32>,
    utterances: &[Utterance],
    path: &Path,
) -> CmdResult {
    let mut text = String::new();
    for u in utterances {
        let mel: Tensor<f32> = u.mel.cast();
        let mask = make_chunk_mask(mel.rows(), 0);
        let mut tape = Tape::new();
        let mel_var = tape.input(mel);
        let enc = model.encode(&mut tape, store, mel_var, &mask);
        let zp = model.downsample_project(&mut tape, store, enc.z);
        let zp = tape.value(zp);
        for r in 0..zp.rows() {
            text.push_str(&format!("{}", u.speaker_id));
            for &v in zp.row(r) {
                text.push_str(&format!("\t{v}"));
            }
            text.push('\n');
        }
    }
    std::fs::write(path, text)
        .map_err(|e| fail(EXIT_MISSING_INPUT, format!("cannot write latents: {e}")))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_lm(
    corpus: &Path,
    am: &Path,
    out: &Path,
    config: Option<&Path>,
    steps: usize,
    batch: Option<usize>,
    seed: Option<u64>,
    chunk_frames: usize,
    holdout: f64,
    loss_log: Option<&Path>,
) -> CmdResult {
    let run = load_run_config(config)?;
    let batch = batch.unwrap_or(run.batch).max(1);
    let seed = seed.unwrap_or(run.seed);
    let (spec, utterances) = load_corpus_or_fail(corpus)?;
    if utterances.is_empty() {
        return Err(fail(EXIT_MISSING_INPUT, "corpus is empty"));
    }
    let cfg = acoustic_config_for_corpus(&run, &spec)?;
    let mut am_store: ParamStore<f32> = ParamStore::new();
    let model = AcousticModel::init(&mut am_store, &cfg, seed);
    am_store
        .load(am)
        .map_err(|e| fail(EXIT_MISSING_MODEL, format!("cannot load acoustic checkpoint: {e}")))?;

    println!("extracting codes with encoder chunk {chunk_frames}...");
    let codes: Vec<Vec<u16>> = utterances
        .iter()
        .map(|u| model.extract_codes(&am_store, &u.mel.cast::<f32>(), chunk_frames))
        .collect();
    let holdout_n = ((codes.len() as f64 * holdout).round() as usize).clamp(1, codes.len() - 1);
    let split = codes.len() - holdout_n;
    let (train, held) = codes.split_at(split);

    let lm_cfg = run.lm();
    let mut store: ParamStore<f32> = ParamStore::new();
    let lm = ContextLm::init(&mut store, &lm_cfg, seed);
    store.add(STEP_KEY, Tensor::scalar(0.0f32));
    let adam = dualvc3::params::AdamConfig { lr: run.lr, ..Default::default() };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut shuffle_rng);

    let steps_per_epoch = train.len().div_ceil(batch);
    let mut log = String::new();
    for step in 0..steps {
        let picks: Vec<&[u16]> = (0..batch)
            .map(|j| train[order[(step * batch + j) % order.len()]].as_slice())
            .collect();
        let loss = lm_train_step(&lm, &mut store, &picks, &adam)
            .map_err(|e| fail(EXIT_USAGE, format!("lm training aborted: {e}")))?;
        log.push_str(&format!("{}\t{loss}\n", step + 1));
        if (step + 1) % steps_per_epoch == 0 || step + 1 == steps {
            let nll: f64 =
                held.iter().map(|s| lm.nll(&store, s).unwrap()).sum::<f64>() / held.len() as f64;
            log.push_str(&format!("#heldout\t{}\t{nll}\n", step + 1));
            println!("step {:>6}  train {loss:.4}  heldout nll {nll:.4}", step + 1);
        }
    }
    let baseline = unigram_baseline_nll(
        &train.to_vec(),
        &held.to_vec(),
        cfg.vocab,
    );
    println!("unigram baseline nll {baseline:.4}");

    let step = store.step;
    set_step_param(&mut store, step);
    store
        .save(out)
        .map_err(|e| fail(EXIT_MISSING_INPUT, format!("cannot write checkpoint: {e}")))?;
    if let Some(path) = loss_log {
        std::fs::write(path, log)
            .map_err(|e| fail(EXIT_MISSING_INPUT, format!("cannot write loss log: {e}")))?;
    }
    println!("saved lm checkpoint to {}", out.display());
    Ok(())
}

/// Fill in everything a checkpoint's shapes reveal (dims, vocab, block
/// counts, kernel, expansion); heads come from the preset.
fn infer_acoustic_config(
    mut cfg: AcousticConfig,
    ckpt: &[(String, Tensor<f32>)],
) -> AcousticConfig {
    let mut enc_blocks = 0usize;
    let mut dec_blocks = 0usize;
    for (name, t) in ckpt {
        let s = t.shape();
        match name.as_str() {
            "am.enc_in.w" => {
                cfg.mel_bins = s[0];
                cfg.dim = s[1];
                cfg.encoder.dim = s[1];
                cfg.decoder.dim = s[1];
            }
            "am.proj.w" => cfg.vocab = s[1],
            "am.spk_table" => {
                cfg.num_speakers = s[0];
                cfg.speaker_dim = s[1];
            }
            "am.enc.block0.ffn1.in.w" => cfg.encoder.ffn_expansion = s[1] / s[0].max(1),
            "am.dec.block0.ffn1.in.w" => cfg.decoder.ffn_expansion = s[1] / s[0].max(1),
            "am.enc.block0.conv.dw.w" => cfg.encoder.conv_kernel = s[0],
            "am.dec.block0.conv.dw.w" => cfg.decoder.conv_kernel = s[0],
            _ => {
                if let Some(rest) = name.strip_prefix("am.enc.block") {
                    if let Some(i) = rest.split('.').next().and_then(|x| x.parse::<usize>().ok()) {
                        enc_blocks = enc_blocks.max(i + 1);
                    }
                }
                if let Some(rest) = name.strip_prefix("am.dec.block") {
                    if let Some(i) = rest.split('.').next().and_then(|x| x.parse::<usize>().ok()) {
                        dec_blocks = dec_blocks.max(i + 1);
                    }
                }
            }
        }
    }
    if enc_blocks > 0 {
        cfg.encoder.num_blocks = enc_blocks;
    }
    if dec_blocks > 0 {
        cfg.decoder.num_blocks = dec_blocks;
    }
    cfg
}

fn infer_lm_config(mut cfg: LmConfig, ckpt: &[(String, Tensor<f32>)]) -> LmConfig {
    let mut layers = 0usize;
    for (name, t) in ckpt {
        let s = t.shape();
        match name.as_str() {
            "lm.emb" => {
                cfg.vocab = s[0];
                cfg.hidden = s[1];
            }
            "lm.pos" => cfg.max_context = s[0],
            "lm.layer0.ffn.gate.w" => cfg.intermediate = s[1],
            _ => {
                if let Some(rest) = name.strip_prefix("lm.layer") {
                    if let Some(i) = rest.split('.').next().and_then(|x| x.parse::<usize>().ok()) {
                        layers = layers.max(i + 1);
                    }
                }
            }
        }
    }
    if layers > 0 {
        cfg.layers = layers;
    }
    cfg
}

fn load_am(
    run: &RunConfig,
    path: &Path,
) -> Result<(ParamStore<f32>, AcousticModel), Failure> {
    let raw = read_checkpoint(path)
        .map_err(|e| fail(EXIT_MISSING_MODEL, format!("cannot read acoustic checkpoint: {e}")))?;
    let cfg = infer_acoustic_config(run.acoustic(), &raw);
    let mut store: ParamStore<f32> = ParamStore::new();
    let model = AcousticModel::init(&mut store, &cfg, 0);
    store
        .load(path)
        .map_err(|e| fail(EXIT_MISSING_MODEL, format!("incompatible acoustic checkpoint: {e}")))?;
    Ok((store, model))
}

fn load_lm(run: &RunConfig, path: &Path) -> Result<(ParamStore<f32>, ContextLm), Failure> {
    let raw = read_checkpoint(path)
        .map_err(|e| fail(EXIT_MISSING_MODEL, format!("cannot read lm checkpoint: {e}")))?;
    let cfg = infer_lm_config(run.lm(), &raw);
    let mut store: ParamStore<f32> = ParamStore::new();
    let lm = ContextLm::init(&mut store, &cfg, 0);
    store
        .load(path)
        .map_err(|e| fail(EXIT_MISSING_MODEL, format!("incompatible lm checkpoint: {e}")))?;
    Ok((store, lm))
}

#[allow(clippy::too_many_arguments)]
fn cmd_convert(
    input: &Path,
    output: &Path,
    am: &Path,
    lm: Option<&Path>,
    target_speaker: usize,
    mode: &str,
    chunk_ms: usize,
    offline: bool,
    sampling: &str,
    seed: u64,
    config: Option<&Path>,
) -> CmdResult {
    let run = load_run_config(config)?;
    let mode = match mode {
        "standalone" => SessionMode::StandAlone,
        "full" => SessionMode::Full,
        other => return Err(fail(EXIT_USAGE, format!("unknown mode `{other}`"))),
    };
    if chunk_ms == 0 || chunk_ms % 10 != 0 {
        return Err(fail(EXIT_USAGE, "chunk-ms must be a positive multiple of 10"));
    }
    let sampling = match sampling {
        "greedy" => SamplingConfig { seed, ..SamplingConfig::greedy() },
        "topk" => SamplingConfig { seed, ..SamplingConfig::default() },
        other => return Err(fail(EXIT_USAGE, format!("unknown sampling `{other}`"))),
    };
    let samples = wav::read_wav(input).map_err(|e| fail(EXIT_MISSING_INPUT, e))?;
    let (store, model) = load_am(&run, am)?;
    let lm_parts = match (mode, lm) {
        (SessionMode::Full, Some(path)) => Some(load_lm(&run, path)?),
        (SessionMode::Full, None) => {
            return Err(fail(EXIT_MISSING_MODEL, "full mode requires --lm <checkpoint>"))
        }
        _ => None,
    };

    let analyzer = Arc::new(
        MelAnalyzer::new(FrontendConfig { mel_bins: model.cfg.mel_bins, ..Default::default() })
            .map_err(|e| fail(EXIT_USAGE, e.to_string()))?,
    );
    let vocoder = Vocoder::new(analyzer.clone());

    let pcm = if offline {
        let conv = convert_offline_wav(&model, &store, &vocoder, &samples, target_speaker, 0)
            .map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
        conv.pcm
    } else {
        let chunk_frames = chunk_ms / 10;
        let cfg = SessionConfig {
            mode,
            chunk_frames,
            pseudo_frames: if mode == SessionMode::Full { run.pseudo_frames } else { 0 },
            target_speaker,
            max_history: run.max_history,
            sampling,
        };
        let mut session = StreamSession::new(
            cfg,
            &model,
            &store,
            &vocoder,
            analyzer.clone(),
            lm_parts.as_ref().map(|(s, l)| (l, s)),
        )
        .map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
        convert_streaming(&mut session, &samples, chunk_frames * 160)
            .map_err(|e| fail(EXIT_USAGE, e.to_string()))?
    };
    wav::write_wav(output, &pcm).map_err(|e| fail(EXIT_MISSING_INPUT, e))?;
    println!(
        "converted {:.2} s -> {:.2} s ({})",
        samples.len() as f64 / 16_000.0,
        pcm.len() as f64 / 16_000.0,
        output.display()
    );
    Ok(())
}

fn cmd_bench(
    am: &Path,
    lm: &Path,
    seconds: f64,
    chunk_ms: usize,
    seed: u64,
    config: Option<&Path>,
    out: Option<&Path>,
) -> CmdResult {
    let run = load_run_config(config)?;
    if chunk_ms == 0 || chunk_ms % 10 != 0 {
        return Err(fail(EXIT_USAGE, "chunk-ms must be a positive multiple of 10"));
    }
    let (store, model) = load_am(&run, am)?;
    let (lm_store, lm_model) = load_lm(&run, lm)?;
    let am_params = checkpoint_num_scalars(am)
        .map_err(|e| fail(EXIT_MISSING_MODEL, e.to_string()))? as f64
        / 1e6;
    let lm_params = checkpoint_num_scalars(lm)
        .map_err(|e| fail(EXIT_MISSING_MODEL, e.to_string()))? as f64
        / 1e6;

    let analyzer = Arc::new(
        MelAnalyzer::new(FrontendConfig { mel_bins: model.cfg.mel_bins, ..Default::default() })
            .map_err(|e| fail(EXIT_USAGE, e.to_string()))?,
    );
    let vocoder = Vocoder::new(analyzer.clone());
    // deterministic synthetic test audio
    let spec = CorpusSpec {
        num_speakers: 1,
        utterances_per_speaker: 1,
        token_vocab: model.cfg.vocab.min(150),
        tokens_per_utterance: ((seconds * 50.0).ceil() as usize).max(10),
        mel_bins: model.cfg.mel_bins,
        seed,
        ..Default::default()
    };
    let mel: Tensor<f64> = generate_corpus(&spec)
        .map_err(|e| fail(EXIT_USAGE, e.to_string()))?[0]
        .mel
        .cast();
    let audio = vocoder.synthesize(&mel);
    let chunk_frames = chunk_ms / 10;

    let mut sa = StreamSession::new(
        SessionConfig {
            chunk_frames,
            ..SessionConfig::standalone(0)
        },
        &model,
        &store,
        &vocoder,
        analyzer.clone(),
        None,
    )
    .map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    let sa_report =
        measure_latency(&mut sa, &audio, am_params).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;

    let mut full = StreamSession::new(
        SessionConfig {
            chunk_frames,
            pseudo_frames: run.pseudo_frames,
            ..SessionConfig::full(0)
        },
        &model,
        &store,
        &vocoder,
        analyzer.clone(),
        Some((&lm_model, &lm_store)),
    )
    .map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    let full_report = measure_latency(&mut full, &audio, am_params + lm_params)
        .map_err(|e| fail(EXIT_USAGE, e.to_string()))?;

    let mut text = String::new();
    for report in [&sa_report, &full_report] {
        text.push_str(&report.to_key_values());
        text.push_str(&format!(
            "identity {}: total = inference + {} + {}: {}\n\n",
            report.mode_name(),
            report.chunk_wait_ms,
            report.lookahead_ms,
            if report.identity_holds() { "ok" } else { "VIOLATED" }
        ));
    }
    text.push_str(&format!(
        "ordering: rtf stand-alone ({:.4}) < rtf full ({:.4}): {}\n",
        sa_report.rtf,
        full_report.rtf,
        if sa_report.rtf < full_report.rtf { "ok" } else { "VIOLATED" }
    ));
    text.push_str(&format!(
        "ordering: params stand-alone ({:.2} M) < params full ({:.2} M): {}\n",
        sa_report.params_m,
        full_report.params_m,
        if sa_report.params_m < full_report.params_m { "ok" } else { "VIOLATED" }
    ));
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text)
            .map_err(|e| fail(EXIT_MISSING_INPUT, format!("cannot write report: {e}")))?;
    }
    Ok(())
}

fn cmd_verify(am: Option<&Path>, lm: Option<&Path>) -> CmdResult {
    let results = dualvc3::verify::run_all(am, lm);
    let mut ok = true;
    for r in &results {
        println!("{} {:<32} {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
        ok &= r.passed;
    }
    if ok {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(fail(EXIT_VERIFY_FAILED, "verification failed"))
    }
}
