//! Synthetic speech-like corpus with ground-truth semantic tokens.
//!
//! Token sequences follow a first-order Markov chain (self-transition 0.6,
//! rest uniform). Each token owns a fixed random spectral template; each
//! speaker applies a deterministic spectral tilt plus a gain offset; frames
//! carry Gaussian noise. Tokens are therefore linearly recoverable from mel
//! frames while speaker identity lives in a separate low-rank subspace —
//! which is exactly what the decoupling probes need.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const UTT_MAGIC: &[u8; 7] = b"DVC3UTT";
pub const MEL_NOISE_STD: f64 = 0.05;
pub const MARKOV_SELF_TRANSITION: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub token_vocab: usize,
    pub tokens_per_utterance: usize,
    /// Semantic-token rate (Hz).
    pub token_rate_hz: u32,
    /// Mel frame rate (Hz); must be a multiple of the token rate.
    pub mel_rate_hz: u32,
    pub mel_bins: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_speakers: 8,
            utterances_per_speaker: 50,
            token_vocab: 150,
            tokens_per_utterance: 30,
            token_rate_hz: 50,
            mel_rate_hz: 100,
            mel_bins: 80,
            seed: 1,
        }
    }
}

impl CorpusSpec {
    /// Mel frames per token.
    pub fn downsample_factor(&self) -> usize {
        (self.mel_rate_hz / self.token_rate_hz) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_speakers == 0
            || self.utterances_per_speaker == 0
            || self.token_vocab == 0
            || self.tokens_per_utterance == 0
        {
            return Err(Error::InvalidArg("corpus spec has a zero-sized field".into()));
        }
        if self.token_rate_hz == 0 || self.mel_rate_hz % self.token_rate_hz != 0 {
            return Err(Error::InvalidArg(format!(
                "mel rate {} must be a multiple of token rate {}",
                self.mel_rate_hz, self.token_rate_hz
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    /// Log-mel frames, T_m × F.
    pub mel: Tensor<f32>,
    /// Ground-truth semantic tokens, 1-based in {1..N}; T = T_m / r.
    pub tokens: Vec<u16>,
    pub speaker_id: u32,
}

/// Deterministic per-speaker spectral transform: a tilt slope and a gain
/// offset laid out on a circle so all speakers stay mutually distinct.
pub fn speaker_transform(speaker: usize, num_speakers: usize) -> (f64, f64) {
    let angle = 2.0 * std::f64::consts::PI * speaker as f64 / num_speakers as f64;
    (2.0 * angle.cos(), 0.7 * angle.sin())
}

/// Add the speaker transform for `speaker` onto a template value at bin `f`.
fn speaker_offset(slope: f64, gain: f64, f: usize, bins: usize) -> f64 {
    let x = if bins > 1 { f as f64 / (bins - 1) as f64 - 0.5 } else { 0.0 };
    slope * x + gain
}

/// Generate the corpus; bitwise reproducible from the spec.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let v = spec.token_vocab;
    let f_bins = spec.mel_bins;
    let r = spec.downsample_factor();

    // One spectral template per token, drawn once. Templates are smoothed
    // across bins (speech spectra are not white) and re-standardized so
    // tokens stay well separated; smooth spectra also keep the mel
    // pseudo-inverse well conditioned.
    let mut templates = vec![vec![0.0f64; f_bins]; v];
    let kernel: Vec<f64> = (-8i32..=8)
        .map(|d| (-(d as f64 * d as f64) / (2.0 * 2.0 * 2.0)).exp())
        .collect();
    for row in templates.iter_mut() {
        let white: Vec<f64> = (0..f_bins).map(|_| StandardNormal.sample(&mut rng)).collect();
        for (f, x) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (j, &w) in kernel.iter().enumerate() {
                let src = f as i64 + j as i64 - 8;
                if (0..f_bins as i64).contains(&src) {
                    acc += w * white[src as usize];
                    wsum += w;
                }
            }
            *x = acc / wsum;
        }
        let mean = row.iter().sum::<f64>() / f_bins as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / f_bins as f64;
        let std = var.sqrt().max(1e-6);
        for x in row.iter_mut() {
            *x = (*x - mean) / std;
        }
    }

    let mut utterances = Vec::with_capacity(spec.num_speakers * spec.utterances_per_speaker);
    for speaker in 0..spec.num_speakers {
        let (slope, gain) = speaker_transform(speaker, spec.num_speakers);
        for _ in 0..spec.utterances_per_speaker {
            let t = spec.tokens_per_utterance;
            let mut tokens = Vec::with_capacity(t);
            let mut current = rng.random_range(1..=v);
            tokens.push(current as u16);
            for _ in 1..t {
                if rng.random::<f64>() >= MARKOV_SELF_TRANSITION && v > 1 {
                    // uniform over the other v−1 tokens
                    let mut next = rng.random_range(1..=v - 1);
                    if next >= current {
                        next += 1;
                    }
                    current = next;
                }
                tokens.push(current as u16);
            }
            // Upsample templates ×r with a light cross-fade toward the
            // neighboring token (coarticulation): frames keep a 0.75 share
            // of their own template, so tokens stay linearly recoverable,
            // while boundary frames genuinely depend on the next token.
            let t_m = t * r;
            let mut mel = vec![0.0f32; t_m * f_bins];
            for frame in 0..t_m {
                let own = frame / r;
                let pos_in_token = frame % r;
                let neighbor = if r > 1 && pos_in_token < r / 2 {
                    own.saturating_sub(1)
                } else if r > 1 {
                    (own + 1).min(t - 1)
                } else {
                    own
                };
                let a = &templates[tokens[own] as usize - 1];
                let b = &templates[tokens[neighbor] as usize - 1];
                for f in 0..f_bins {
                    let tv = 0.75 * a[f] + 0.25 * b[f];
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let val =
                        tv + speaker_offset(slope, gain, f, f_bins) + MEL_NOISE_STD * noise;
                    mel[frame * f_bins + f] = val as f32;
                }
            }
            utterances.push(Utterance {
                mel: Tensor::matrix(t_m, f_bins, mel),
                tokens,
                speaker_id: speaker as u32,
            });
        }
    }
    Ok(utterances)
}

/// Serialize one utterance: magic `DVC3UTT`, speaker_id u32, T u32, T_m u32,
/// F u16, tokens as u16s, mel as 32-bit little-endian floats, row-major.
pub fn utterance_to_bytes(u: &Utterance) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(UTT_MAGIC);
    out.extend_from_slice(&u.speaker_id.to_le_bytes());
    out.extend_from_slice(&(u.tokens.len() as u32).to_le_bytes());
    out.extend_from_slice(&(u.mel.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(u.mel.cols() as u16).to_le_bytes());
    for &t in &u.tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for &x in u.mel.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn utterance_from_bytes(bytes: &[u8]) -> Result<Utterance> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format("utterance file truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 7)? != UTT_MAGIC {
        return Err(Error::Format("bad utterance magic".into()));
    }
    let speaker_id = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let t = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let t_m = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let f = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
    let mut tokens = Vec::with_capacity(t);
    for _ in 0..t {
        tokens.push(u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()));
    }
    let raw = take(&mut pos, t_m * f * 4)?;
    let mel = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Utterance { mel: Tensor::matrix(t_m, f, mel), tokens, speaker_id })
}

/// Write `meta.txt` plus one binary file per utterance.
pub fn save_corpus(dir: &Path, spec: &CorpusSpec, utterances: &[Utterance]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = format!(
        "num_speakers={}\nutterances_per_speaker={}\ntoken_vocab={}\ntokens_per_utterance={}\ntoken_rate_hz={}\nmel_rate_hz={}\nmel_bins={}\nseed={}\n",
        spec.num_speakers,
        spec.utterances_per_speaker,
        spec.token_vocab,
        spec.tokens_per_utterance,
        spec.token_rate_hz,
        spec.mel_rate_hz,
        spec.mel_bins,
        spec.seed
    );
    std::fs::write(dir.join("meta.txt"), meta)?;
    for (i, u) in utterances.iter().enumerate() {
        std::fs::write(dir.join(format!("utt_{i:05}.bin")), utterance_to_bytes(u))?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusSpec, Vec<Utterance>)> {
    let meta = std::fs::read_to_string(dir.join("meta.txt"))
        .map_err(|_| Error::Format(format!("{} is not a corpus directory (no meta.txt)", dir.display())))?;
    let mut spec = CorpusSpec::default();
    for line in meta.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad meta line: {line}")))?;
        let parse =
            |v: &str| -> Result<u64> { v.parse().map_err(|_| Error::Format(format!("bad meta value: {line}"))) };
        match key {
            "num_speakers" => spec.num_speakers = parse(value)? as usize,
            "utterances_per_speaker" => spec.utterances_per_speaker = parse(value)? as usize,
            "token_vocab" => spec.token_vocab = parse(value)? as usize,
            "tokens_per_utterance" => spec.tokens_per_utterance = parse(value)? as usize,
            "token_rate_hz" => spec.token_rate_hz = parse(value)? as u32,
            "mel_rate_hz" => spec.mel_rate_hz = parse(value)? as u32,
            "mel_bins" => spec.mel_bins = parse(value)? as usize,
            "seed" => spec.seed = parse(value)?,
            other => return Err(Error::Format(format!("unknown meta key: {other}"))),
        }
    }
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("utt_") && n.ends_with(".bin"))
        .collect();
    names.sort();
    let mut utterances = Vec::with_capacity(names.len());
    for name in names {
        let mut bytes = Vec::new();
        std::fs::File::open(dir.join(&name))?.read_to_end(&mut bytes)?;
        utterances.push(utterance_from_bytes(&bytes)?);
    }
    Ok((spec, utterances))
}

/// Mean-pool mel rows to the token rate (windows of `r`), in f64.
pub fn pool_to_token_rate(mel: &Tensor<f32>, r: usize) -> Tensor<f64> {
    let t = mel.rows().div_ceil(r);
    let f = mel.cols();
    let mut out = Tensor::zeros(&[t, f]);
    for p in 0..t {
        let lo = p * r;
        let hi = ((p + 1) * r).min(mel.rows());
        for frame in lo..hi {
            for (j, &v) in mel.row(frame).iter().enumerate() {
                out.set(p, j, out.at(p, j) + v as f64);
            }
        }
        for j in 0..f {
            out.set(p, j, out.at(p, j) / (hi - lo) as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::{linear_probe_holdout_accuracy, ProbeConfig};

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            num_speakers: 4,
            utterances_per_speaker: 6,
            token_vocab: 16,
            tokens_per_utterance: 25,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let a = generate_corpus(&small_spec()).unwrap();
        let b = generate_corpus(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lengths_satisfy_the_downsample_contract() {
        let spec = small_spec();
        let utts = generate_corpus(&spec).unwrap();
        assert_eq!(utts.len(), 24);
        for u in &utts {
            assert_eq!(u.mel.rows(), u.tokens.len() * spec.downsample_factor());
            assert!(u.tokens.iter().all(|&t| (1..=16).contains(&t)));
            assert!(u.mel.all_finite());
        }
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let utts = generate_corpus(&small_spec()).unwrap();
        for u in utts.iter().take(3) {
            let bytes = utterance_to_bytes(u);
            let back = utterance_from_bytes(&bytes).unwrap();
            assert_eq!(*u, back);
        }
    }

    #[test]
    fn corpus_directory_round_trip() {
        let spec = small_spec();
        let utts = generate_corpus(&spec).unwrap();
        let dir = std::env::temp_dir().join("dualvc3_corpus_test");
        let _ = std::fs::remove_dir_all(&dir);
        save_corpus(&dir, &spec, &utts).unwrap();
        let (spec2, utts2) = load_corpus(&dir).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(utts, utts2);
    }

    #[test]
    fn tokens_are_linearly_recoverable_from_mel() {
        // ≥ 95% held-out accuracy for a linear probe on ~1k frames.
        let spec = small_spec();
        let utts = generate_corpus(&spec).unwrap();
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for u in &utts {
            for frame in 0..u.mel.rows() {
                feats.push(u.mel.row(frame).iter().map(|&x| x as f64).collect::<Vec<_>>());
                labels.push(u.tokens[frame / 2] as usize - 1);
            }
        }
        let acc = linear_probe_holdout_accuracy(
            &feats,
            &labels,
            spec.token_vocab,
            &ProbeConfig::default(),
        );
        assert!(acc >= 0.95, "token probe accuracy {acc}");
    }

    #[test]
    fn speakers_are_recoverable_from_mel() {
        // ≥ 90%: speaker info is present in mel, so removing it is nontrivial.
        let spec = small_spec();
        let utts = generate_corpus(&spec).unwrap();
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for u in &utts {
            for frame in 0..u.mel.rows() {
                feats.push(u.mel.row(frame).iter().map(|&x| x as f64).collect::<Vec<_>>());
                labels.push(u.speaker_id as usize);
            }
        }
        let acc = linear_probe_holdout_accuracy(
            &feats,
            &labels,
            spec.num_speakers,
            &ProbeConfig::default(),
        );
        assert!(acc >= 0.90, "speaker probe accuracy {acc}");
    }
}
