use std::path::Path;

use image::{GrayImage, Luma};
use rawflow::audio::WaveformBuffer;
use rawflow::dsp::stft_power;

/// Log-power spectrogram as a grayscale PNG: time left to right, low
/// frequencies at the bottom, 80 dB of range.
pub fn write_png(buf: &WaveformBuffer, path: &Path) -> Result<(), String> {
    let n_fft = if buf.len() >= 8192 { 512 } else { 64 };
    let frames = stft_power(buf.samples(), n_fft, n_fft / 4).map_err(|e| e.to_string())?;
    let bins = n_fft / 2 + 1;
    let db: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| f.iter().map(|p| 10.0 * (p + 1e-12).log10()).collect())
        .collect();
    let top = db.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    // Small images are hard to look at; repeat pixels up to about 256 wide.
    let zoom = (256 / frames.len().max(1)).clamp(1, 8) as u32;
    let (w, h) = (frames.len() as u32 * zoom, bins as u32 * zoom);
    let img = GrayImage::from_fn(w, h, |x, y| {
        let f = (x / zoom) as usize;
        let b = bins - 1 - (y / zoom) as usize;
        let level = ((db[f][b] - top + 80.0) / 80.0).clamp(0.0, 1.0);
        Luma([(level * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| format!("{}: {e}", path.display()))
}
