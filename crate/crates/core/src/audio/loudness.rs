//! Gated integrated loudness (ITU-R BS.1770-4) for mono buffers.

use std::f64::consts::PI;

use super::WaveformBuffer;
use crate::error::{Error, Result};

/// Loudness in LUFS; [`f64::NEG_INFINITY`] when every block falls below the absolute gate.
pub type Loudness = f64;

const ABSOLUTE_GATE: f64 = -70.0;
const RELATIVE_GATE: f64 = -10.0;

/// Direct form I biquad with `a0 = 1`.
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
}

impl Biquad {
    fn new(b: [f64; 3], a: [f64; 2]) -> Self {
        Self {
            b,
            a,
            x: [0.0; 2],
            y: [0.0; 2],
        }
    }

    /// Stage 1 of the K-weighting pre-filter: high shelf modelling the head.
    fn high_shelf(sample_rate: f64) -> Self {
        let gain_db = 3.999_843_853_973_347;
        let q = 0.707_175_236_955_419_3;
        let fc = 1_681.974_450_955_531_9;
        let k = (PI * fc / sample_rate).tan();
        let vh = 10f64.powf(gain_db / 20.0);
        let vb = vh.powf(0.499_666_774_154_541_6);
        let a0 = 1.0 + k / q + k * k;
        Self::new(
            [
                (vh + vb * k / q + k * k) / a0,
                2.0 * (k * k - vh) / a0,
                (vh - vb * k / q + k * k) / a0,
            ],
            [2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0],
        )
    }

    /// Stage 2: the RLB high-pass.
    fn high_pass(sample_rate: f64) -> Self {
        let q = 0.500_327_037_323_877_3;
        let fc = 38.135_470_876_139_82;
        let k = (PI * fc / sample_rate).tan();
        let a0 = 1.0 + k / q + k * k;
        Self::new(
            [1.0, -2.0, 1.0],
            [2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0],
        )
    }

    fn apply(&mut self, x0: f64) -> f64 {
        let y0 = self.b[0] * x0 + self.b[1] * self.x[0] + self.b[2] * self.x[1]
            - self.a[0] * self.y[0]
            - self.a[1] * self.y[1];
        self.x = [x0, self.x[0]];
        self.y = [y0, self.y[0]];
        y0
    }
}

fn block_loudness(mean_square: f64) -> f64 {
    -0.691 + 10.0 * mean_square.log10()
}

pub fn integrated_loudness(buf: &WaveformBuffer) -> Result<Loudness> {
    let sr = buf.sample_rate() as f64;
    let block = (0.4 * sr).round() as usize;
    let step = (0.1 * sr).round() as usize;
    if buf.len() < block {
        return Err(Error::pre(format!(
            "loudness needs at least 400 ms, got {:.1} ms",
            1000.0 * buf.duration_secs()
        )));
    }

    let mut s1 = Biquad::high_shelf(sr);
    let mut s2 = Biquad::high_pass(sr);
    let squared: Vec<f64> = buf
        .samples()
        .iter()
        .map(|&x| {
            let y = s2.apply(s1.apply(x));
            y * y
        })
        .collect();

    // Prefix sums keep every overlapping block O(1).
    let mut prefix = Vec::with_capacity(squared.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in &squared {
        acc += v;
        prefix.push(acc);
    }
    let n_blocks = (buf.len() - block) / step + 1;
    let powers: Vec<f64> = (0..n_blocks)
        .map(|j| (prefix[j * step + block] - prefix[j * step]) / block as f64)
        .collect();

    let above_abs: Vec<f64> = powers
        .iter()
        .copied()
        .filter(|&z| block_loudness(z) > ABSOLUTE_GATE)
        .collect();
    if above_abs.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    let mean_abs = above_abs.iter().sum::<f64>() / above_abs.len() as f64;
    let gamma_r = block_loudness(mean_abs) + RELATIVE_GATE;
    let gated: Vec<f64> = above_abs
        .into_iter()
        .filter(|&z| block_loudness(z) > gamma_r)
        .collect();
    let mean = gated.iter().sum::<f64>() / gated.len() as f64;
    Ok(block_loudness(mean))
}

/// Applies one gain so the result measures `target_lufs`. Silence passes through.
pub fn normalize_loudness(buf: &WaveformBuffer, target_lufs: f64) -> Result<WaveformBuffer> {
    let measured = integrated_loudness(buf)?;
    if !measured.is_finite() {
        return Ok(buf.clone());
    }
    let gain = 10f64.powf((target_lufs - measured) / 20.0);
    Ok(buf.map(|x| x * gain))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, sr: u32, secs: f64, amp: f64) -> WaveformBuffer {
        let n = (secs * sr as f64) as usize;
        let s = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / sr as f64).sin())
            .collect();
        WaveformBuffer::new(s, sr).unwrap()
    }

    #[test]
    fn silence_is_sentinel() {
        let z = WaveformBuffer::new(vec![0.0; 48000], 48000).unwrap();
        assert_eq!(integrated_loudness(&z).unwrap(), f64::NEG_INFINITY);
        assert_eq!(normalize_loudness(&z, -23.0).unwrap(), z);
    }

    #[test]
    fn too_short() {
        let s = sine(997.0, 48000, 0.3, 1.0);
        assert!(matches!(
            integrated_loudness(&s),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn full_scale_997hz() {
        let l = integrated_loudness(&sine(997.0, 48000, 5.0, 1.0)).unwrap();
        assert!((l + 3.01).abs() < 0.1, "{l}");
    }

    #[test]
    fn half_amplitude_drops_6db() {
        let a = integrated_loudness(&sine(440.0, 16000, 3.0, 0.8)).unwrap();
        let b = integrated_loudness(&sine(440.0, 16000, 3.0, 0.4)).unwrap();
        assert!((a - b - 20.0 * 2f64.log10()).abs() < 0.05);
    }

    #[test]
    fn gain_from_minus_20() {
        let s = sine(1000.0, 16000, 2.0, 0.5);
        let at20 = normalize_loudness(&s, -20.0).unwrap();
        assert!((integrated_loudness(&at20).unwrap() + 20.0).abs() < 0.2);
        let at23 = normalize_loudness(&at20, -23.0).unwrap();
        let gain = at23.samples()[100] / at20.samples()[100];
        assert!((gain - 10f64.powf(-3.0 / 20.0)).abs() < 1e-3, "{gain}");
    }

    #[test]
    fn fixed_point() {
        let s = normalize_loudness(&sine(300.0, 44100, 2.0, 0.3), -23.0).unwrap();
        let again = normalize_loudness(&s, -23.0).unwrap();
        assert!((integrated_loudness(&again).unwrap() + 23.0).abs() < 0.2);
        assert!(s.samples().iter().zip(again.samples()).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}
