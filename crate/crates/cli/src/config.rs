//! Plain-text key=value run configuration.
//!
//! Every key has a documented default; unknown keys are rejected so typos
//! fail loudly instead of silently training the wrong model.

use dualvc3::acoustic::{AcousticConfig, LossWeights, TrainerConfig};
use dualvc3::lm::LmConfig;
use dualvc3::params::AdamConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Model preset: `toy` (4+4 blocks, D 64) or `paper` (6+6 blocks, D 256).
    pub preset: String,
    pub vocab: usize,
    pub mel_bins: usize,
    pub downsample: usize,
    pub speakers: usize,
    pub speaker_dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    pub chunk_frames: usize,
    pub pseudo_frames: usize,
    pub max_history: usize,
    pub gumbel_start: f64,
    pub gumbel_end: f64,
    pub anneal_steps: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "toy".into(),
            vocab: 150,
            mel_bins: 80,
            downsample: 2,
            speakers: 8,
            speaker_dim: 64,
            alpha: 45.0,
            beta: 1.0,
            gamma: 10.0,
            lr: 1e-3,
            batch: 8,
            chunk_frames: 2,
            pseudo_frames: 2,
            max_history: 64,
            gumbel_start: 2.0,
            gumbel_end: 0.5,
            anneal_steps: 1000,
            seed: 1,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| format!("line {}: bad {what} value `{value}`", lineno + 1);
            match key {
                "preset" => {
                    if value != "toy" && value != "paper" {
                        return Err(bad("preset (toy|paper)"));
                    }
                    cfg.preset = value.to_string();
                }
                "vocab" => cfg.vocab = value.parse().map_err(|_| bad(key))?,
                "mel_bins" => cfg.mel_bins = value.parse().map_err(|_| bad(key))?,
                "downsample" => cfg.downsample = value.parse().map_err(|_| bad(key))?,
                "speakers" => cfg.speakers = value.parse().map_err(|_| bad(key))?,
                "speaker_dim" => cfg.speaker_dim = value.parse().map_err(|_| bad(key))?,
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad(key))?,
                "beta" => cfg.beta = value.parse().map_err(|_| bad(key))?,
                "gamma" => cfg.gamma = value.parse().map_err(|_| bad(key))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad(key))?,
                "batch" => cfg.batch = value.parse().map_err(|_| bad(key))?,
                "chunk_frames" => cfg.chunk_frames = value.parse().map_err(|_| bad(key))?,
                "pseudo_frames" => cfg.pseudo_frames = value.parse().map_err(|_| bad(key))?,
                "max_history" => cfg.max_history = value.parse().map_err(|_| bad(key))?,
                "gumbel_start" => cfg.gumbel_start = value.parse().map_err(|_| bad(key))?,
                "gumbel_end" => cfg.gumbel_end = value.parse().map_err(|_| bad(key))?,
                "anneal_steps" => cfg.anneal_steps = value.parse().map_err(|_| bad(key))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key))?,
                other => return Err(format!("line {}: unknown key `{other}`", lineno + 1)),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::parse(&text)
    }

    pub fn acoustic(&self) -> AcousticConfig {
        let mut cfg = if self.preset == "paper" {
            AcousticConfig::paper(self.speakers)
        } else {
            AcousticConfig::toy(self.speakers)
        };
        cfg.vocab = self.vocab;
        cfg.mel_bins = self.mel_bins;
        cfg.downsample = self.downsample;
        cfg.speaker_dim = self.speaker_dim;
        cfg
    }

    pub fn lm(&self) -> LmConfig {
        if self.preset == "paper" {
            LmConfig::paper(self.vocab)
        } else {
            LmConfig::toy(self.vocab)
        }
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            adam: AdamConfig { lr: self.lr, ..Default::default() },
            weights: LossWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma },
            gumbel_start: self.gumbel_start,
            gumbel_end: self.gumbel_end,
            anneal_steps: self.anneal_steps,
        }
    }

    /// The documented defaults, in config-file form.
    pub fn defaults_text() -> String {
        let d = RunConfig::default();
        format!(
            "# model preset: toy | paper\npreset={}\nvocab={}\nmel_bins={}\ndownsample={}\nspeakers={}\nspeaker_dim={}\n# loss weights (total = alpha*rec + beta*hpc + gamma*ce)\nalpha={}\nbeta={}\ngamma={}\nlr={}\nbatch={}\n# streaming defaults\nchunk_frames={}\npseudo_frames={}\nmax_history={}\n# gumbel temperature anneal\ngumbel_start={}\ngumbel_end={}\nanneal_steps={}\nseed={}\n",
            d.preset,
            d.vocab,
            d.mel_bins,
            d.downsample,
            d.speakers,
            d.speaker_dim,
            d.alpha,
            d.beta,
            d.gamma,
            d.lr,
            d.batch,
            d.chunk_frames,
            d.pseudo_frames,
            d.max_history,
            d.gumbel_start,
            d.gumbel_end,
            d.anneal_steps,
            d.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let cfg = RunConfig::parse(&RunConfig::defaults_text()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(RunConfig::parse("bogus_key=1\n").is_err());
        assert!(RunConfig::parse("lr=fast\n").is_err());
        assert!(RunConfig::parse("preset=huge\n").is_err());
        let cfg = RunConfig::parse("# comment\n\npreset=paper\nlr=0.002\n").unwrap();
        assert_eq!(cfg.preset, "paper");
        assert_eq!(cfg.lr, 0.002);
    }
}
