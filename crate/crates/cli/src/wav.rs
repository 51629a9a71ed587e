//! WAV I/O: PCM 16-bit mono at 16 kHz, the engine's only audio format.

use std::path::Path;

pub const SAMPLE_RATE: u32 = 16_000;

pub fn read_wav(path: &Path) -> Result<Vec<f64>, String> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| format!("cannot open {}: {e}", path.display()))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(format!(
            "{}: expected PCM 16-bit mono {} Hz, got {} ch / {} Hz / {} bit",
            path.display(),
            SAMPLE_RATE,
            spec.channels,
            spec.sample_rate,
            spec.bits_per_sample
        ));
    }
    reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0).map_err(|e| e.to_string()))
        .collect()
}

pub fn write_wav(path: &Path, samples: &[f64]) -> Result<(), String> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| format!("cannot create {}: {e}", path.display()))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| e.to_string())?;
    }
    writer.finalize().map_err(|e| e.to_string())
}
