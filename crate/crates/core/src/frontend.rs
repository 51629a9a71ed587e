//! Incremental log-mel frontend: Hann-windowed magnitude STFT → HTK-style
//! triangular mel filterbank (0–8 kHz) → log with a 1e−10 floor.
//!
//! A frame is emitted as soon as its full analysis window is available, and
//! the incremental path produces bit-identical frames to offline framing.

use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    /// Analysis window in samples (40 ms at 16 kHz).
    pub frame_length: usize,
    /// Hop in samples (10 ms at 16 kHz).
    pub frame_shift: usize,
    pub fft_size: usize,
    pub mel_bins: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16_000,
            frame_length: 640,
            frame_shift: 160,
            fft_size: 1024,
            mel_bins: 80,
            fmin_hz: 0.0,
            fmax_hz: 8_000.0,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.frame_length <= self.frame_shift {
            return Err(crate::Error::InvalidArg(
                "frame length must exceed frame shift".into(),
            ));
        }
        if self.fft_size < self.frame_length {
            return Err(crate::Error::InvalidArg(
                "fft size must cover the frame length".into(),
            ));
        }
        Ok(())
    }

    pub fn frame_shift_ms(&self) -> f64 {
        self.frame_shift as f64 * 1000.0 / self.sample_rate as f64
    }

    pub fn frame_length_ms(&self) -> f64 {
        self.frame_length as f64 * 1000.0 / self.sample_rate as f64
    }

    /// Offline frame count for a signal of `samples` samples.
    pub fn num_frames(&self, samples: usize) -> usize {
        if samples < self.frame_length {
            0
        } else {
            (samples - self.frame_length) / self.frame_shift + 1
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK-style triangular filterbank, `mel_bins` × (fft_size/2 + 1).
pub fn mel_filterbank(cfg: &FrontendConfig) -> Tensor<f64> {
    let bins = cfg.fft_size / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin_hz);
    let mel_hi = hz_to_mel(cfg.fmax_hz);
    let centers: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect();
    let hz_per_bin = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut fb = Tensor::zeros(&[cfg.mel_bins, bins]);
    for m in 0..cfg.mel_bins {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for b in 0..bins {
            let f = b as f64 * hz_per_bin;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb.set(m, b, w);
        }
    }
    fb
}

/// Frequency (Hz) of each mel filter's peak, for test oracles.
pub fn mel_filter_centers_hz(cfg: &FrontendConfig) -> Vec<f64> {
    let mel_lo = hz_to_mel(cfg.fmin_hz);
    let mel_hi = hz_to_mel(cfg.fmax_hz);
    (1..=cfg.mel_bins)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect()
}

/// Shared STFT machinery: window, filterbank and FFT plans.
pub struct MelAnalyzer {
    pub cfg: FrontendConfig,
    window: Vec<f64>,
    filterbank: Tensor<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelAnalyzer {
    pub fn new(cfg: FrontendConfig) -> crate::Result<Self> {
        cfg.validate()?;
        let n = cfg.frame_length;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let filterbank = mel_filterbank(&cfg);
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(MelAnalyzer { cfg, window, filterbank, fft })
    }

    pub fn filterbank(&self) -> &Tensor<f64> {
        &self.filterbank
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Magnitude spectrum of one windowed frame.
    pub fn magnitude(&self, frame: &[f64]) -> Vec<f64> {
        assert_eq!(frame.len(), self.cfg.frame_length);
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(&x, &w)| Complex::new(x * w, 0.0))
            .chain(std::iter::repeat_n(
                Complex::new(0.0, 0.0),
                self.cfg.fft_size - self.cfg.frame_length,
            ))
            .collect();
        self.fft.process(&mut buf);
        buf[..self.cfg.fft_size / 2 + 1].iter().map(|c| c.norm()).collect()
    }

    /// One log-mel frame from raw samples.
    pub fn mel_frame<F: Scalar>(&self, frame: &[f64]) -> Vec<F> {
        let mag = self.magnitude(frame);
        (0..self.cfg.mel_bins)
            .map(|m| {
                let mut acc = 0.0f64;
                for (w, &x) in self.filterbank.row(m).iter().zip(&mag) {
                    acc += w * x;
                }
                F::from_f64(acc.max(LOG_FLOOR).ln())
            })
            .collect()
    }

    /// Offline mel spectrogram of a full signal.
    pub fn mel_spectrogram<F: Scalar>(&self, samples: &[f64]) -> Tensor<F> {
        let t = self.cfg.num_frames(samples.len());
        let mut data = Vec::with_capacity(t * self.cfg.mel_bins);
        for frame in 0..t {
            let lo = frame * self.cfg.frame_shift;
            data.extend(self.mel_frame::<F>(&samples[lo..lo + self.cfg.frame_length]));
        }
        Tensor::matrix(t, self.cfg.mel_bins, data)
    }
}

/// Streaming wrapper: push samples, pop completed frames.
pub struct MelFrontend<F: Scalar> {
    analyzer: Arc<MelAnalyzer>,
    buffer: Vec<f64>,
    /// Absolute sample index of buffer[0].
    consumed: usize,
    /// Total samples ingested.
    pub ingested: usize,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> MelFrontend<F> {
    pub fn new(analyzer: Arc<MelAnalyzer>) -> Self {
        MelFrontend {
            analyzer,
            buffer: Vec::new(),
            consumed: 0,
            ingested: 0,
            _marker: std::marker::PhantomData,
        }
    }

    /// Ingest PCM samples (±1 full scale) and return every frame whose
    /// window just completed.
    pub fn push(&mut self, samples: &[f64]) -> Vec<Vec<F>> {
        self.buffer.extend_from_slice(samples);
        self.ingested += samples.len();
        let (len, shift) = (self.analyzer.cfg.frame_length, self.analyzer.cfg.frame_shift);
        let mut frames = Vec::new();
        while self.buffer.len() >= len {
            frames.push(self.analyzer.mel_frame::<F>(&self.buffer[..len]));
            self.buffer.drain(..shift);
            self.consumed += shift;
        }
        frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn analyzer() -> Arc<MelAnalyzer> {
        Arc::new(MelAnalyzer::new(FrontendConfig::default()).unwrap())
    }

    #[test]
    fn framing_arithmetic() {
        let a = analyzer();
        let mut fe: MelFrontend<f32> = MelFrontend::new(a.clone());
        let got = fe.push(&vec![0.01; 640]);
        assert_eq!(got.len(), 1);
        let mut fe: MelFrontend<f32> = MelFrontend::new(a);
        let got = fe.push(&vec![0.01; 800]);
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let a = analyzer();
        let mel = a.mel_spectrogram::<f64>(&vec![0.0; 1600]);
        let floor = LOG_FLOOR.ln();
        assert!(mel.data().iter().all(|&v| (v - floor).abs() < 1e-12));
    }

    #[test]
    fn sine_energy_lands_on_the_right_mel_filter() {
        let a = analyzer();
        let freq = 1000.0;
        let samples: Vec<f64> = (0..4800)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin() * 0.5)
            .collect();
        let mel = a.mel_spectrogram::<f64>(&samples);
        // filterbank-table oracle: the filter whose center is nearest 1 kHz
        let centers = mel_filter_centers_hz(&a.cfg);
        let expect = centers
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (*a - freq).abs().total_cmp(&(*b - freq).abs()))
            .map(|(i, _)| i)
            .unwrap();
        for r in 0..mel.rows() {
            let got = crate::tensor::argmax(mel.row(r));
            assert!(
                (got as isize - expect as isize).abs() <= 1,
                "frame {r}: argmax bin {got}, expected near {expect}"
            );
        }
    }

    #[test]
    fn incremental_equals_offline_bit_exactly() {
        let a = analyzer();
        let samples: Vec<f64> = (0..5000).map(|i| ((i as f64) * 0.37).sin() * 0.3).collect();
        let offline = a.mel_spectrogram::<f32>(&samples);
        let mut fe: MelFrontend<f32> = MelFrontend::new(a);
        let mut rows = Vec::new();
        // uneven push sizes
        let mut i = 0usize;
        for size in [320usize, 7, 501, 160, 993, 320].iter().cycle() {
            if i >= samples.len() {
                break;
            }
            let hi = (i + size).min(samples.len());
            for f in fe.push(&samples[i..hi]) {
                rows.extend(f);
            }
            i = hi;
        }
        let streamed = Tensor::matrix(offline.rows(), 80, rows[..offline.numel()].to_vec());
        assert_eq!(offline.data(), streamed.data());
    }
}
