use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{amplitude_lift, LiftConfig, WaveformBuffer};
use crate::conditioning::{ConditionBundle, ConditioningConfig, EventSpec};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::patch::patchify;

/// Tone-per-class clips with short clicks at the event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub frequencies: Vec<f64>,
    pub tone_amplitude: f64,
    pub click_amplitude: f64,
    /// Click length in samples.
    pub click_len: usize,
    pub max_events: usize,
    /// Seconds.
    pub clip_len: f64,
    pub sample_rate: u32,
    pub size: usize,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        // 256 samples at 16 kHz; every tone sits on an exact FFT bin (62.5 Hz spacing).
        Self {
            frequencies: vec![187.5, 375.0, 562.5, 750.0],
            tone_amplitude: 0.5,
            click_amplitude: 0.5,
            click_len: 3,
            max_events: 2,
            clip_len: 0.016,
            sample_rate: 16000,
            size: 256,
        }
    }
}

impl ToyDatasetSpec {
    pub fn classes(&self) -> usize {
        self.frequencies.len()
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_len * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.frequencies.is_empty() || self.size == 0 || self.clip_samples() == 0 {
            return Err(Error::Config(
                "toy dataset needs classes, items and a non-empty clip".into(),
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if let Some(f) = self.frequencies.iter().find(|&&f| !(f > 0.0 && f < nyquist)) {
            return Err(Error::Range(format!(
                "tone {f} Hz outside (0, {nyquist}) Hz"
            )));
        }
        Ok(())
    }
}

/// Item `i` has class `i mod K`, a random phase and up to `max_events` clicks.
pub fn make_toy_dataset(spec: &ToyDatasetSpec, seed: u64) -> Result<Vec<(WaveformBuffer, EventSpec)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.clip_samples();
    let sr = spec.sample_rate as f64;
    (0..spec.size)
        .map(|i| {
            let class = i % spec.classes();
            let freq = spec.frequencies[class];
            let phase = rng.random_range(0.0..2.0 * PI);
            let mut x: Vec<f64> = (0..n)
                .map(|j| spec.tone_amplitude * (2.0 * PI * freq * j as f64 / sr + phase).sin())
                .collect();
            let events = rng.random_range(0..=spec.max_events);
            let mut times: Vec<f64> = (0..events)
                .map(|_| rng.random_range(0..n) as f64 / sr)
                .collect();
            times.sort_by(f64::total_cmp);
            for &t in &times {
                let start = (t * sr).round() as usize;
                for k in 0..spec.click_len {
                    if let Some(s) = x.get_mut(start + k) {
                        *s += spec.click_amplitude * (1.0 - k as f64 / spec.click_len as f64);
                    }
                }
            }
            let event = EventSpec::new(class, times, spec.clip_len)?;
            Ok((WaveformBuffer::new(x, spec.sample_rate)?, event))
        })
        .collect()
}

/// One training example: lifted, patchified audio and its conditions.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x1: Tensor,
    pub bundle: ConditionBundle,
    pub spec: EventSpec,
}

pub fn prepare_items(
    data: &[(WaveformBuffer, EventSpec)],
    lift: &LiftConfig,
    patch: usize,
    cond: &ConditioningConfig,
) -> Result<Vec<TrainItem>> {
    data.iter()
        .map(|(wave, spec)| {
            let grid = patchify(&amplitude_lift(wave, lift), patch)?;
            if grid.pad_len() != 0 {
                return Err(Error::pre(format!(
                    "clip of {} samples is not a whole number of {patch}-sample tokens",
                    wave.len()
                )));
            }
            Ok(TrainItem {
                x1: grid.into_tensor(),
                bundle: ConditionBundle::synthesize(spec, cond)?,
                spec: spec.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{dominant_bin, frequency_bin};

    #[test]
    fn balanced_and_deterministic() {
        let spec = ToyDatasetSpec { size: 64, ..Default::default() };
        let data = make_toy_dataset(&spec, 3).unwrap();
        assert_eq!(data.len(), 64);
        for k in 0..4 {
            assert_eq!(data.iter().filter(|(_, e)| e.class_id == k).count(), 16);
        }
        let again = make_toy_dataset(&spec, 3).unwrap();
        assert!(data.iter().zip(&again).all(|(a, b)| a == b));
        assert!(data.iter().all(|(w, _)| w.len() == 256));
    }

    #[test]
    fn items_carry_their_tone() {
        let spec = ToyDatasetSpec::default();
        for (wave, event) in make_toy_dataset(&spec, 1).unwrap() {
            let want = frequency_bin(spec.frequencies[event.class_id], wave.len(), spec.sample_rate);
            let got = dominant_bin(wave.samples()).unwrap();
            assert!(got.abs_diff(want) <= 1, "class {} bin {got}", event.class_id);
        }
    }

    #[test]
    fn nyquist_rejected() {
        let spec = ToyDatasetSpec { frequencies: vec![8000.0], ..Default::default() };
        assert!(matches!(make_toy_dataset(&spec, 0), Err(Error::Range(_))));
    }

    #[test]
    fn prepared_grid_shape() {
        let spec = ToyDatasetSpec { size: 4, ..Default::default() };
        let data = make_toy_dataset(&spec, 0).unwrap();
        let items = prepare_items(&data, &LiftConfig::default(), 8, &ConditioningConfig::default()).unwrap();
        assert_eq!(items[0].x1.shape(), &[32, 8]);
        assert!(prepare_items(&data, &LiftConfig::default(), 7, &ConditioningConfig::default()).is_err());
    }
}
