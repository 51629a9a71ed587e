//! Chunked conversion sessions: frontend → encoder → codes → (pseudo-context
//! LM) → decoder → vocoder, with overlap-add smoothing and full accounting
//! of every emitted sample.
//!
//! Full mode appends LM-predicted pseudo codes to each decoded chunk; the
//! decoder sees them as in-chunk future context, the vocoder renders them
//! into a tail used only to cross-fade the next chunk's first 20 ms, and
//! both the decoder caches and the LM history drop them as soon as real
//! codes arrive.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acoustic::AcousticModel;
use crate::conformer::LayerCache;
use crate::error::{Error, Result};
use crate::frontend::{MelAnalyzer, MelFrontend};
use crate::lm::{ContextLm, LmState, SamplingConfig, BOS};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocoder::Vocoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionMode {
    Full,
    StandAlone,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub mode: SessionMode,
    /// Mel frames per processing chunk (2 = 20 ms at a 10 ms shift).
    pub chunk_frames: usize,
    /// Pseudo-context codes per chunk in full mode.
    pub pseudo_frames: usize,
    pub target_speaker: usize,
    /// Attention left-context bound for streaming caches.
    pub max_history: usize,
    pub sampling: SamplingConfig,
}

impl SessionConfig {
    pub fn standalone(target_speaker: usize) -> Self {
        SessionConfig {
            mode: SessionMode::StandAlone,
            chunk_frames: 2,
            pseudo_frames: 0,
            target_speaker,
            max_history: 64,
            sampling: SamplingConfig::greedy(),
        }
    }

    pub fn full(target_speaker: usize) -> Self {
        SessionConfig {
            mode: SessionMode::Full,
            chunk_frames: 2,
            pseudo_frames: 2,
            target_speaker,
            max_history: 64,
            sampling: SamplingConfig::greedy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_frames == 0 {
            return Err(Error::InvalidArg("chunk_frames must be ≥ 1".into()));
        }
        if self.mode == SessionMode::Full && self.pseudo_frames == 0 {
            return Err(Error::InvalidArg("full mode needs pseudo_frames ≥ 1".into()));
        }
        self.sampling.validate()
    }
}

/// Overlap-add cross-fade length: 20 ms at 16 kHz.
pub const OLA_BLEND_SAMPLES: usize = 320;

struct LmSide<'a, F: Scalar> {
    lm: &'a ContextLm,
    store: &'a ParamStore<F>,
    state: LmState<F>,
    /// Logits row after the most recent real code.
    last_logits: Option<Tensor<F>>,
    rng: ChaCha8Rng,
}

pub struct StreamSession<'a, F: Scalar> {
    cfg: SessionConfig,
    model: &'a AcousticModel,
    store: &'a ParamStore<F>,
    vocoder: &'a Vocoder,
    frontend: MelFrontend<F>,
    lm: Option<LmSide<'a, F>>,
    enc_caches: Vec<LayerCache<F>>,
    dec_caches: Vec<LayerCache<F>>,
    /// Mel frames waiting for a full chunk.
    pending_mel: Vec<Vec<F>>,
    /// Encoder output rows waiting for a full pooling window.
    pending_z: Vec<Vec<F>>,
    /// Previous chunk's pseudo waveform for the 20 ms cross-fade.
    ola_tail: Option<Vec<f64>>,
    emitted_codes: Vec<u16>,
    /// Real-region decoder output rows, in emission order (tests compare
    /// these against the offline masked decode).
    emitted_mel: Vec<Vec<F>>,
    pub ingested_samples: usize,
    pub emitted_samples: usize,
    /// Sample ranges of emitted audio that blended pseudo waveform.
    pub blend_regions: Vec<(usize, usize)>,
    /// Wall-clock duration of each processing step.
    pub step_durations: Vec<Duration>,
    closed: bool,
}

impl<'a, F: Scalar> StreamSession<'a, F> {
    pub fn new(
        cfg: SessionConfig,
        model: &'a AcousticModel,
        store: &'a ParamStore<F>,
        vocoder: &'a Vocoder,
        analyzer: Arc<MelAnalyzer>,
        lm: Option<(&'a ContextLm, &'a ParamStore<F>)>,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode == SessionMode::Full && lm.is_none() {
            return Err(Error::InvalidArg("full mode requires a language model".into()));
        }
        if cfg.target_speaker >= model.cfg.num_speakers {
            return Err(Error::InvalidArg(format!(
                "target speaker {} out of range ({} speakers)",
                cfg.target_speaker, model.cfg.num_speakers
            )));
        }
        let r = model.cfg.downsample;
        if cfg.chunk_frames % r != 0 && r % cfg.chunk_frames != 0 {
            return Err(Error::InvalidArg(format!(
                "chunk_frames {} must align with the downsample factor {} so \
                 decoder chunks match an offline chunk mask",
                cfg.chunk_frames, r
            )));
        }
        let lm = match (cfg.mode, lm) {
            (SessionMode::Full, Some((lm, lm_store))) => {
                let mut state = LmState::fresh(&lm.cfg);
                // utterance-initial anchor
                let last_logits = lm.logits(lm_store, &[BOS], &mut state)?;
                Some(LmSide {
                    lm,
                    store: lm_store,
                    state,
                    last_logits: Some(last_logits),
                    rng: ChaCha8Rng::seed_from_u64(cfg.sampling.seed),
                })
            }
            _ => None,
        };
        Ok(StreamSession {
            enc_caches: model.fresh_encoder_caches(cfg.max_history),
            dec_caches: model.fresh_decoder_caches(cfg.max_history),
            cfg,
            model,
            store,
            vocoder,
            frontend: MelFrontend::new(analyzer),
            lm,
            pending_mel: Vec::new(),
            pending_z: Vec::new(),
            ola_tail: None,
            emitted_codes: Vec::new(),
            emitted_mel: Vec::new(),
            ingested_samples: 0,
            emitted_samples: 0,
            blend_regions: Vec::new(),
            step_durations: Vec::new(),
            closed: false,
        })
    }

    pub fn mode(&self) -> SessionMode {
        self.cfg.mode
    }

    pub fn chunk_frames(&self) -> usize {
        self.cfg.chunk_frames
    }

    pub fn frontend_config(&self) -> crate::frontend::FrontendConfig {
        self.vocoder.analyzer().cfg.clone()
    }

    pub fn codes(&self) -> &[u16] {
        &self.emitted_codes
    }

    /// Decoder mel rows emitted so far (real regions only), as one matrix.
    pub fn emitted_mel(&self) -> Tensor<F> {
        let f = self.model.cfg.mel_bins;
        let flat: Vec<F> = self.emitted_mel.iter().flatten().copied().collect();
        Tensor::matrix(self.emitted_mel.len(), f, flat)
    }

    /// Push PCM samples (±1 full scale); returns any newly converted samples.
    pub fn push(&mut self, pcm: &[f64]) -> Result<Vec<f64>> {
        if self.closed {
            return Err(Error::InvalidArg("session is closed".into()));
        }
        self.ingested_samples += pcm.len();
        let frames = self.frontend.push(pcm);
        self.pending_mel.extend(frames);
        let mut out = Vec::new();
        while self.pending_mel.len() >= self.cfg.chunk_frames {
            let rows: Vec<Vec<F>> =
                self.pending_mel.drain(..self.cfg.chunk_frames).collect();
            out.extend(self.process_chunk(rows, false)?);
        }
        debug_assert!(self.emitted_samples <= self.ingested_samples);
        Ok(out)
    }

    /// Complete all pending windows (padding the analysis tail with
    /// silence) and close the session.
    pub fn flush(&mut self) -> Result<Vec<f64>> {
        if self.closed {
            return Err(Error::InvalidArg("session is closed".into()));
        }
        let cfg = &self.frontend_config();
        let pad = cfg.frame_length - cfg.frame_shift;
        let frames = self.frontend.push(&vec![0.0; pad]);
        self.pending_mel.extend(frames);
        let mut out = Vec::new();
        while self.pending_mel.len() >= self.cfg.chunk_frames {
            let rows: Vec<Vec<F>> =
                self.pending_mel.drain(..self.cfg.chunk_frames).collect();
            out.extend(self.process_chunk(rows, false)?);
        }
        let rows: Vec<Vec<F>> = self.pending_mel.drain(..).collect();
        if !rows.is_empty() || !self.pending_z.is_empty() {
            out.extend(self.process_chunk(rows, true)?);
        }
        self.closed = true;
        Ok(out)
    }

    /// Encode one chunk, pool completed code windows, decode (with pseudo
    /// context in full mode), vocode and emit the real region.
    fn process_chunk(&mut self, mel_rows: Vec<Vec<F>>, flush: bool) -> Result<Vec<f64>> {
        let t0 = Instant::now();
        let f_bins = self.model.cfg.mel_bins;
        let r = self.model.cfg.downsample;

        if !mel_rows.is_empty() {
            let flat: Vec<F> = mel_rows.iter().flatten().copied().collect();
            let chunk = Tensor::matrix(mel_rows.len(), f_bins, flat);
            let z = self
                .model
                .encode_stream_chunk(self.store, &chunk, &mut self.enc_caches);
            for i in 0..z.rows() {
                self.pending_z.push(z.row(i).to_vec());
            }
        }

        // pool complete windows (all remaining rows at flush)
        let complete = if flush {
            self.pending_z.len()
        } else {
            (self.pending_z.len() / r) * r
        };
        if complete == 0 {
            self.step_durations.push(t0.elapsed());
            return Ok(Vec::new());
        }
        let rows_real = complete;
        let flat: Vec<F> = self.pending_z.drain(..complete).flatten().collect();
        let z = Tensor::matrix(rows_real, self.model.cfg.dim, flat);
        let zprime = self.model.project_pooled(self.store, &z);
        let codes = AcousticModel::codes_from_logits(&zprime);
        self.emitted_codes.extend_from_slice(&codes);

        // pseudo context from the LM (full mode)
        let mut all_codes = codes.clone();
        let mut rows_pseudo = 0usize;
        if let Some(side) = self.lm.as_mut() {
            let logits = side.lm.logits(side.store, &codes, &mut side.state)?;
            side.last_logits = Some(logits);
            let pseudo = side.lm.generate_pseudo_context(
                side.store,
                &mut side.state,
                side.last_logits.as_ref().unwrap(),
                self.cfg.pseudo_frames,
                &self.cfg.sampling,
                &mut side.rng,
            )?;
            rows_pseudo = pseudo.len() * r;
            all_codes.extend(pseudo);
        }

        let mel_hat = self.model.decode_stream_chunk(
            self.store,
            &all_codes,
            self.cfg.target_speaker,
            rows_real + rows_pseudo,
            rows_real,
            &mut self.dec_caches,
        );

        for i in 0..rows_real {
            self.emitted_mel.push(mel_hat.row(i).to_vec());
        }

        // vocode the whole (real ‖ pseudo) segment, emit only the real region
        let seg = self.vocoder.synthesize(&mel_hat);
        let emit_len = rows_real * self.frontend_config().frame_shift;
        let mut emit = seg[..emit_len.min(seg.len())].to_vec();
        if let Some(tail) = self.ola_tail.take() {
            let blend = OLA_BLEND_SAMPLES.min(emit.len()).min(tail.len());
            for i in 0..blend {
                let w = i as f64 / blend as f64;
                emit[i] = w * emit[i] + (1.0 - w) * tail[i];
            }
            if blend > 0 {
                self.blend_regions.push((self.emitted_samples, blend));
            }
        }
        if rows_pseudo > 0 && !flush {
            let lo = emit_len;
            let hi = (lo + OLA_BLEND_SAMPLES).min(seg.len());
            if hi > lo {
                self.ola_tail = Some(seg[lo..hi].to_vec());
            }
        }
        self.emitted_samples += emit.len();
        self.step_durations.push(t0.elapsed());
        Ok(emit)
    }
}

/// Offline reference path for a whole utterance: frontend → masked encoder →
/// codes → masked decoder → vocoder. `enc_chunk` 0 means full sequence; the
/// decoder mask is the mel-rate equivalent of the encoder chunk.
pub fn dec_chunk_for(enc_chunk: usize, r: usize) -> usize {
    if enc_chunk == 0 {
        0
    } else {
        enc_chunk.div_ceil(r) * r
    }
}

/// Zero-pad a signal's analysis tail the same way `flush` does, so offline
/// and streaming paths frame identical windows.
pub fn pad_tail(samples: &[f64], cfg: &crate::frontend::FrontendConfig) -> Vec<f64> {
    let mut out = samples.to_vec();
    out.extend(std::iter::repeat_n(0.0, cfg.frame_length - cfg.frame_shift));
    out
}

pub struct OfflineConversion<F: Scalar> {
    pub mel_in: Tensor<F>,
    pub mel_out: Tensor<F>,
    pub codes: Vec<u16>,
    pub pcm: Vec<f64>,
}

pub fn convert_offline_wav<F: Scalar>(
    model: &AcousticModel,
    store: &ParamStore<F>,
    vocoder: &Vocoder,
    samples: &[f64],
    target_speaker: usize,
    enc_chunk: usize,
) -> Result<OfflineConversion<F>> {
    let analyzer = vocoder.analyzer();
    let mel_in: Tensor<F> = analyzer.mel_spectrogram(samples);
    if mel_in.rows() == 0 {
        return Err(Error::InvalidArg("input shorter than one analysis window".into()));
    }
    let dec_chunk = dec_chunk_for(enc_chunk, model.cfg.downsample);
    let (mel_out, codes) =
        model.convert_offline(store, &mel_in, target_speaker, enc_chunk, dec_chunk);
    let pcm = vocoder.synthesize(&mel_out);
    Ok(OfflineConversion { mel_in, mel_out, codes, pcm })
}

/// Push a whole signal through a streaming session in fixed-size pieces and
/// flush; returns the emitted pcm.
pub fn convert_streaming<F: Scalar>(
    session: &mut StreamSession<'_, F>,
    samples: &[f64],
    push_chunk: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut i = 0usize;
    while i < samples.len() {
        let hi = (i + push_chunk).min(samples.len());
        out.extend(session.push(&samples[i..hi])?);
        i = hi;
    }
    out.extend(session.flush()?);
    Ok(out)
}
