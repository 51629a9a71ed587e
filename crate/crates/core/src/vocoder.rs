//! Deterministic mel-inversion vocoder.
//!
//! exp → mel-to-linear via a regularized pseudo-inverse of the filterbank
//! (clamped at zero) → 8 iterations of phase reconstruction from zero
//! initial phase → inverse STFT with a Hann synthesis window and
//! shift-normalized overlap-add. A stand-in for a neural vocoder: fully
//! deterministic so streaming/offline equivalence is testable; fidelity, not
//! audio quality, is the goal.

use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};

use crate::frontend::MelAnalyzer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const GRIFFIN_LIM_ITERS: usize = 8;

pub struct Vocoder {
    analyzer: Arc<MelAnalyzer>,
    /// (fft/2+1) × mel_bins pseudo-inverse of the filterbank.
    pinv: Tensor<f64>,
    ifft: Arc<dyn Fft<f64>>,
}

/// Cholesky solve of the SPD system A·X = B (A: n×n, B: n×m), in place.
fn cholesky_solve(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let n = a.rows();
    let m = b.cols();
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.at(i, j);
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                l[i * n + i] = sum.max(1e-300).sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // forward then backward substitution per column of B
    let mut x = Tensor::zeros(&[n, m]);
    for c in 0..m {
        let mut y = vec![0.0f64; n];
        for i in 0..n {
            let mut sum = b.at(i, c);
            for k in 0..i {
                sum -= l[i * n + k] * y[k];
            }
            y[i] = sum / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= l[k * n + i] * x.at(k, c);
            }
            x.set(i, c, sum / l[i * n + i]);
        }
    }
    x
}

impl Vocoder {
    pub fn new(analyzer: Arc<MelAnalyzer>) -> Self {
        let fb = analyzer.filterbank(); // F × B
        let f = fb.rows();
        let bins = fb.cols();
        // G = fb·fbᵀ + λ·I, λ scaled to the trace
        let mut g = Tensor::zeros(&[f, f]);
        let mut trace = 0.0;
        for i in 0..f {
            for j in 0..f {
                let mut acc = 0.0;
                for b in 0..bins {
                    acc += fb.at(i, b) * fb.at(j, b);
                }
                g.set(i, j, acc);
                if i == j {
                    trace += acc;
                }
            }
        }
        let lambda = 1e-8 * trace / f as f64;
        for i in 0..f {
            g.set(i, i, g.at(i, i) + lambda);
        }
        // pinv = fbᵀ · G⁻¹  (B × F): solve G·X = fb, pinv = Xᵀ
        let x = cholesky_solve(&g, fb); // F × B
        let mut pinv = Tensor::zeros(&[bins, f]);
        for i in 0..f {
            for b in 0..bins {
                pinv.set(b, i, x.at(i, b));
            }
        }
        let ifft = FftPlanner::new().plan_fft_inverse(analyzer.cfg.fft_size);
        Vocoder { analyzer, pinv, ifft }
    }

    pub fn analyzer(&self) -> &Arc<MelAnalyzer> {
        &self.analyzer
    }

    /// Output length for a T-frame mel: (T−1)·shift + frame_length.
    pub fn output_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.analyzer.cfg.frame_shift + self.analyzer.cfg.frame_length
        }
    }

    /// Log-mel → per-frame linear magnitude spectra, clamped at zero.
    fn magnitudes<F: Scalar>(&self, mel: &Tensor<F>) -> Vec<Vec<f64>> {
        let bins = self.pinv.rows();
        (0..mel.rows())
            .map(|t| {
                let energies: Vec<f64> =
                    mel.row(t).iter().map(|&v| v.to_f64_().exp()).collect();
                (0..bins)
                    .map(|b| {
                        let mut acc = 0.0;
                        for (w, &e) in self.pinv.row(b).iter().zip(&energies) {
                            acc += w * e;
                        }
                        acc.max(0.0)
                    })
                    .collect()
            })
            .collect()
    }

    fn istft(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let cfg = &self.analyzer.cfg;
        let (len, shift, fft_size) = (cfg.frame_length, cfg.frame_shift, cfg.fft_size);
        let window = self.analyzer.window();
        let total = self.output_len(spectra.len());
        let mut acc = vec![0.0f64; total];
        let mut wsum = vec![0.0f64; total];
        let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
        for (t, half) in spectra.iter().enumerate() {
            // rebuild the Hermitian-symmetric full spectrum
            for (k, &c) in half.iter().enumerate() {
                buf[k] = c;
            }
            for k in half.len()..fft_size {
                buf[k] = buf[fft_size - k].conj();
            }
            self.ifft.process(&mut buf);
            let scale = 1.0 / fft_size as f64;
            let off = t * shift;
            for i in 0..len {
                let s = buf[i].re * scale;
                acc[off + i] += s * window[i];
                wsum[off + i] += window[i] * window[i];
            }
        }
        for (a, &w) in acc.iter_mut().zip(&wsum) {
            *a /= w.max(1e-8);
        }
        acc
    }

    fn stft(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let cfg = &self.analyzer.cfg;
        let t = cfg.num_frames(samples.len());
        (0..t)
            .map(|i| {
                let lo = i * cfg.frame_shift;
                let frame = &samples[lo..lo + cfg.frame_length];
                let mut buf: Vec<Complex<f64>> = frame
                    .iter()
                    .zip(self.analyzer.window())
                    .map(|(&x, &w)| Complex::new(x * w, 0.0))
                    .chain(std::iter::repeat_n(
                        Complex::new(0.0, 0.0),
                        cfg.fft_size - cfg.frame_length,
                    ))
                    .collect();
                // forward plan lives in the analyzer; reuse via magnitude path
                self.forward_fft(&mut buf);
                buf.truncate(cfg.fft_size / 2 + 1);
                buf
            })
            .collect()
    }

    fn forward_fft(&self, buf: &mut [Complex<f64>]) {
        use std::cell::RefCell;
        thread_local! {
            static PLAN: RefCell<Option<(usize, Arc<dyn Fft<f64>>)>> = const { RefCell::new(None) };
        }
        PLAN.with(|p| {
            let mut p = p.borrow_mut();
            let need = buf.len();
            if p.as_ref().map(|(n, _)| *n) != Some(need) {
                *p = Some((need, FftPlanner::new().plan_fft_forward(need)));
            }
            p.as_ref().unwrap().1.process(buf);
        });
    }

    #[doc(hidden)]
    pub fn debug_magnitudes<F: Scalar>(&self, mel: &Tensor<F>) -> Vec<Vec<f64>> {
        self.magnitudes(mel)
    }

    /// Full deterministic synthesis: returns PCM samples (full scale ±1-ish,
    /// unclamped). The mel is padded internally with edge replicas so every
    /// output sample has full window coverage, then trimmed back to the
    /// (T−1)·shift + frame_length contract.
    pub fn synthesize<F: Scalar>(&self, mel: &Tensor<F>) -> Vec<f64> {
        if mel.rows() == 0 {
            return Vec::new();
        }
        const PAD: usize = 2;
        let first = mel.slice_rows(0, 1);
        let last = mel.slice_rows(mel.rows() - 1, mel.rows());
        let mut padded = first.clone();
        for _ in 1..PAD {
            padded = padded.vcat(&first);
        }
        padded = padded.vcat(mel);
        for _ in 0..PAD {
            padded = padded.vcat(&last);
        }
        let x = self.synthesize_raw(&padded);
        let trim = PAD * self.analyzer.cfg.frame_shift;
        x[trim..x.len() - trim].to_vec()
    }

    fn synthesize_raw<F: Scalar>(&self, mel: &Tensor<F>) -> Vec<f64> {
        let mags = self.magnitudes(mel);
        // zero initial phase
        let mut spectra: Vec<Vec<Complex<f64>>> = mags
            .iter()
            .map(|m| m.iter().map(|&v| Complex::new(v, 0.0)).collect())
            .collect();
        let mut x = self.istft(&spectra);
        for _ in 0..GRIFFIN_LIM_ITERS {
            let est = self.stft(&x);
            for (frame, (mag_row, est_row)) in mags.iter().zip(&est).enumerate() {
                for (k, (m, e)) in mag_row.iter().zip(est_row).enumerate() {
                    let unit = if e.norm() > 0.0 { e / e.norm() } else { Complex::new(1.0, 0.0) };
                    spectra[frame][k] = unit * *m;
                }
            }
            x = self.istft(&spectra);
        }
        x
    }
}
