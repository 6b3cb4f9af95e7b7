//! Spectral helpers: magnitude spectra, dominant frequency, log-mel frames.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// `|X[k]|` for `k = 0..=n/2` of a real signal.
pub fn magnitude_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
}

/// Strongest non-DC bin.
pub fn dominant_bin(x: &[f64]) -> Result<usize> {
    if x.len() < 2 {
        return Err(Error::pre("need at least two samples for a spectrum"));
    }
    let mag = magnitude_spectrum(x);
    Ok(mag
        .iter()
        .enumerate()
        .skip(1)
        .fold((1, f64::NEG_INFINITY), |best, (k, &m)| if m > best.1 { (k, m) } else { best })
        .0)
}

pub fn bin_frequency(bin: usize, n: usize, sample_rate: u32) -> f64 {
    bin as f64 * sample_rate as f64 / n as f64
}

/// Nearest bin index of `freq` for an `n`-point transform.
pub fn frequency_bin(freq: f64, n: usize, sample_rate: u32) -> usize {
    (freq * n as f64 / sample_rate as f64).round() as usize
}

pub fn dominant_frequency(x: &[f64], sample_rate: u32) -> Result<f64> {
    Ok(bin_frequency(dominant_bin(x)?, x.len(), sample_rate))
}

pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectra of Hann-windowed frames. Frames start every `hop` samples
/// and the final partial frame is zero-padded; a signal shorter than one frame
/// still yields a single frame.
pub fn stft_power(x: &[f64], n_fft: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if n_fft == 0 || hop == 0 {
        return Err(Error::pre("n_fft and hop must be positive"));
    }
    let window = hann(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let frames = if x.len() <= n_fft { 1 } else { 1 + (x.len() - n_fft).div_ceil(hop) };
    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..frames {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = x.get(start + i).copied().unwrap_or(0.0);
            *slot = Complex::new(v * window[i], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect());
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters, `n_mels × (n_fft/2 + 1)`, peak height 1.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = bin_frequency(k, n_fft, sample_rate);
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}
