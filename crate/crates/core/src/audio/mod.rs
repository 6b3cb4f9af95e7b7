//! Waveform buffers, WAV I/O, amplitude lifting and loudness normalization.

mod loudness;
mod wav;

pub use loudness::{integrated_loudness, normalize_loudness, Loudness};
pub use wav::{
    decode_wav, encode_wav, encode_wav_f32, quantize_pcm16, read_wav, write_wav, write_wav_f32,
};

use crate::error::{Error, Result};

/// Mono signal `x ∈ R^T` with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl WaveformBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::pre("waveform must be non-empty"));
        }
        if sample_rate == 0 {
            return Err(Error::pre("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            samples: self.samples.iter().map(|&x| f(x)).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Samples `[start, end)` as a new buffer.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.samples.len() {
            return Err(Error::Range(format!(
                "slice {start}..{end} of {}",
                self.samples.len()
            )));
        }
        Self::new(self.samples[start..end].to_vec(), self.sample_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftConfig {
    pub r_star: f64,
    pub s_a: f64,
    /// RMS below which the normalization ratio is treated as 1.
    pub rms_floor: f64,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            r_star: 0.33,
            s_a: 3.0,
            rms_floor: 1e-6,
        }
    }
}

impl LiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_star > 0.0 && self.s_a > 0.0 && self.rms_floor >= 0.0) {
            return Err(Error::Config(format!("invalid lift config {self:?}")));
        }
        Ok(())
    }
}

pub fn rms(buf: &WaveformBuffer) -> f64 {
    let s = buf.samples();
    (s.iter().map(|x| x * x).sum::<f64>() / s.len() as f64).sqrt()
}

/// `s_a · clamp((r* / rms(x)) · x, -1, 1)`.
pub fn amplitude_lift(buf: &WaveformBuffer, cfg: &LiftConfig) -> WaveformBuffer {
    let r = rms(buf);
    let ratio = if r < cfg.rms_floor { 1.0 } else { cfg.r_star / r };
    buf.map(|x| cfg.s_a * (ratio * x).clamp(-1.0, 1.0))
}

/// Lifting without the RMS normalization: `s_a · clamp(x, -1, 1)`.
pub fn clamp_and_scale(buf: &WaveformBuffer, s_a: f64) -> WaveformBuffer {
    buf.map(|x| s_a * x.clamp(-1.0, 1.0))
}

pub fn amplitude_unlift(buf: &WaveformBuffer, s_a: f64) -> Result<WaveformBuffer> {
    if s_a <= 0.0 {
        return Err(Error::pre("s_a must be positive"));
    }
    Ok(buf.map(|x| x / s_a))
}
