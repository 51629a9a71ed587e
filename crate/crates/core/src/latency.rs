//! Latency decomposition and real-time-factor accounting.
//!
//! total = inference + chunk-wait + lookahead, exactly. Chunk-wait is the
//! chunk duration (20 ms at the default 2-frame chunk); lookahead is the
//! frontend window overhang (40 − 10 − 10 = 20 ms), a budget the
//! overlap-add tail shares. Wall-clock numbers are hardware-dependent; the
//! decomposition identity and mode ordering are the contract.

use crate::error::Result;
use crate::frontend::FrontendConfig;
use crate::scalar::Scalar;
use crate::session::{convert_streaming, SessionMode, StreamSession};

#[derive(Debug, Clone)]
pub struct LatencyReport {
    pub mode: SessionMode,
    pub inference_ms: f64,
    pub chunk_wait_ms: f64,
    pub lookahead_ms: f64,
    pub total_ms: f64,
    pub rtf: f64,
    pub params_m: f64,
}

impl LatencyReport {
    /// total = inference + chunk_wait + lookahead, exact arithmetic.
    pub fn identity_holds(&self) -> bool {
        self.total_ms == self.inference_ms + self.chunk_wait_ms + self.lookahead_ms
    }

    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            SessionMode::Full => "full",
            SessionMode::StandAlone => "stand-alone",
        }
    }

    /// Line-oriented key=value rendering.
    pub fn to_key_values(&self) -> String {
        format!(
            "mode={}\ninference_ms={:.4}\nchunk_wait_ms={:.4}\nlookahead_ms={:.4}\ntotal_ms={:.4}\nrtf={:.4}\nparams_m={:.4}\n",
            self.mode_name(),
            self.inference_ms,
            self.chunk_wait_ms,
            self.lookahead_ms,
            self.total_ms,
            self.rtf,
            self.params_m
        )
    }
}

/// Lookahead attributed to the frontend analysis window: window length minus
/// two shifts (the overlap-add tail shares the same 20 ms budget).
pub fn lookahead_ms(cfg: &FrontendConfig) -> f64 {
    cfg.frame_length_ms() - 2.0 * cfg.frame_shift_ms()
}

/// Run `audio` through a warm session and report the decomposition. The
/// first processing step is excluded from timing (cache warm-up).
pub fn measure_latency<F: Scalar>(
    session: &mut StreamSession<'_, F>,
    audio: &[f64],
    params_m: f64,
) -> Result<LatencyReport> {
    let fcfg = session.frontend_config();
    let chunk_samples = session.chunk_frames() * fcfg.frame_shift;
    let mode = session.mode();
    let _ = convert_streaming(session, audio, chunk_samples)?;
    let times = &session.step_durations;
    let timed: Vec<f64> = times.iter().skip(1).map(|d| d.as_secs_f64() * 1e3).collect();
    let inference_ms = if timed.is_empty() {
        0.0
    } else {
        timed.iter().sum::<f64>() / timed.len() as f64
    };
    let chunk_wait_ms = session.chunk_frames() as f64 * fcfg.frame_shift_ms();
    let lookahead = lookahead_ms(&fcfg);
    let total_ms = inference_ms + chunk_wait_ms + lookahead;
    Ok(LatencyReport {
        mode,
        inference_ms,
        chunk_wait_ms,
        lookahead_ms: lookahead,
        total_ms,
        rtf: inference_ms / chunk_wait_ms,
        params_m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_exact_arithmetic() {
        let r = LatencyReport {
            mode: SessionMode::StandAlone,
            inference_ms: 3.583,
            chunk_wait_ms: 20.0,
            lookahead_ms: 20.0,
            total_ms: 3.583 + 20.0 + 20.0,
            rtf: 3.583 / 20.0,
            params_m: 12.1,
        };
        assert!(r.identity_holds());
        let text = r.to_key_values();
        assert!(text.contains("chunk_wait_ms=20.0000"));
        assert!(text.contains("lookahead_ms=20.0000"));
    }

    #[test]
    fn default_frontend_lookahead_is_20ms() {
        assert_eq!(lookahead_ms(&FrontendConfig::default()), 20.0);
    }
}
