//! Guided sampling from a trained model back to waveforms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{amplitude_unlift, WaveformBuffer};
use crate::conditioning::ConditionBundle;
use crate::error::{Error, Result};
use crate::flow::{euler_sample, SamplerConfig};
use crate::model::{Checkpoint, Mmdit};
use crate::numerics::Tensor;
use crate::patch::{unpatchify, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerateMode {
    /// Video and text conditions.
    Vt2a,
    /// Text only; the visual pathway is nulled.
    T2a,
}

impl std::str::FromStr for GenerateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vt2a" => Ok(Self::Vt2a),
            "t2a" => Ok(Self::T2a),
            other => Err(Error::Config(format!("unknown mode `{other}` (vt2a or t2a)"))),
        }
    }
}

/// Clip geometry recorded in a training checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipMeta {
    pub sample_rate: u32,
    pub clip_samples: usize,
    pub clip_len: f64,
    pub s_a: f64,
}

impl ClipMeta {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let int = |k: &str| {
            ck.meta
                .get(k)
                .and_then(|v| v.as_integer())
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Version(format!("checkpoint metadata lacks `{k}`")))
        };
        let float = |k: &str| {
            ck.meta
                .get(k)
                .and_then(|v| v.as_float())
                .filter(|v| *v > 0.0)
                .ok_or_else(|| Error::Version(format!("checkpoint metadata lacks `{k}`")))
        };
        Ok(Self {
            sample_rate: int("sample_rate")? as u32,
            clip_samples: int("clip_samples")? as usize,
            clip_len: float("clip_len")?,
            s_a: float("s_a")?,
        })
    }

    pub fn tokens(&self, patch: usize) -> usize {
        self.clip_samples.div_ceil(patch)
    }
}

/// Conditional and unconditional bundles for a mode. The unconditional branch
/// always nulls every stream.
pub fn guidance_pair(bundle: &ConditionBundle, mode: GenerateMode) -> (ConditionBundle, ConditionBundle) {
    let cond = match mode {
        GenerateMode::Vt2a => bundle.clone(),
        GenerateMode::T2a => bundle.text_only(),
    };
    (cond, bundle.nulled())
}

/// Samples a `tokens × D` grid in the lifted domain.
pub fn sample_grid<R: Rng + ?Sized>(
    model: &Mmdit,
    bundle: &ConditionBundle,
    mode: GenerateMode,
    sampler: &SamplerConfig,
    tokens: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let (cond, uncond) = guidance_pair(bundle, mode);
    euler_sample(model, &cond, &uncond, sampler, &[tokens, model.config().patch], rng)
}

/// Flattens a sampled grid to `samples` samples and divides out the lift scale.
pub fn grid_to_waveform(grid: Tensor, samples: usize, sample_rate: u32, s_a: f64) -> Result<WaveformBuffer> {
    let (c, d) = grid.dims2();
    if samples == 0 || samples > c * d || c * d - samples >= d {
        return Err(Error::shape(format!("{samples} samples from a {c}×{d} grid")));
    }
    let wave = unpatchify(&TokenGrid::new(grid, c * d - samples, sample_rate)?)?;
    amplitude_unlift(&wave, s_a)
}
