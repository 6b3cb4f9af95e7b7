//! RIFF/WAVE reading (PCM16, float32; mono or stereo) and writing.

use std::fs;
use std::path::Path;

use super::WaveformBuffer;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Format {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes an in-memory WAV file, downmixing stereo to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<WaveformBuffer> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Parse("not a RIFF/WAVE file".into()));
    }
    let riff_len = u32_at(bytes, 4) as usize;
    if riff_len + 8 > bytes.len() {
        return Err(Error::Parse(format!(
            "RIFF chunk declares {} bytes, file has {}",
            riff_len + 8,
            bytes.len()
        )));
    }
    let end = riff_len + 8;

    let mut fmt: Option<Format> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= end {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + len > end {
            return Err(Error::Parse(format!(
                "chunk {:?} truncated",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(Error::Parse("fmt chunk too short".into()));
                }
                let mut tag = u16_at(bytes, body);
                if tag == FORMAT_EXTENSIBLE && len >= 26 {
                    // First two bytes of the subformat GUID carry the real tag.
                    tag = u16_at(bytes, body + 24);
                }
                fmt = Some(Format {
                    tag,
                    channels: u16_at(bytes, body + 2),
                    sample_rate: u32_at(bytes, body + 4),
                    bits: u16_at(bytes, body + 14),
                });
            }
            b"data" => data = Some(&bytes[body..body + len]),
            _ => {}
        }
        // Chunks are word aligned.
        pos = body + len + (len & 1);
    }

    let fmt = fmt.ok_or_else(|| Error::Parse("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Parse("missing data chunk".into()))?;
    if fmt.channels == 0 || fmt.channels > 2 {
        return Err(Error::Unsupported(format!("{} channels", fmt.channels)));
    }
    let frames: Vec<f64> = match (fmt.tag, fmt.bits) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (FORMAT_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        (tag, bits) => {
            return Err(Error::Unsupported(format!(
                "format tag {tag} with {bits} bits per sample"
            )))
        }
    };
    let samples = if fmt.channels == 2 {
        frames.chunks_exact(2).map(|lr| (lr[0] + lr[1]) / 2.0).collect()
    } else {
        frames
    };
    WaveformBuffer::new(samples, fmt.sample_rate)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<WaveformBuffer> {
    decode_wav(&fs::read(path)?)
}

fn header(tag: u16, bits: u16, sample_rate: u32, data_len: usize) -> Vec<u8> {
    let block_align = bits / 8;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    out
}

/// Quantizes one sample to PCM16 after clamping to [-1, 1].
pub fn quantize_pcm16(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Encodes a mono 16-bit PCM WAV file. Samples are clamped to [-1, 1].
pub fn encode_wav(buf: &WaveformBuffer) -> Vec<u8> {
    let mut out = header(FORMAT_PCM, 16, buf.sample_rate(), buf.len() * 2);
    for &x in buf.samples() {
        out.extend_from_slice(&quantize_pcm16(x).to_le_bytes());
    }
    out
}

/// Encodes a mono IEEE float32 WAV file without clamping.
pub fn encode_wav_f32(buf: &WaveformBuffer) -> Vec<u8> {
    let mut out = header(FORMAT_FLOAT, 32, buf.sample_rate(), buf.len() * 4);
    for &x in buf.samples() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn write_wav(buf: &WaveformBuffer, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_wav(buf))?;
    Ok(())
}

pub fn write_wav_f32(buf: &WaveformBuffer, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_wav_f32(buf))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pcm16_stereo(frames: &[(i16, i16)]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((36 + frames.len() * 4) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes());
        out.extend_from_slice(&16000u32.to_le_bytes());
        out.extend_from_slice(&64000u32.to_le_bytes());
        out.extend_from_slice(&4u16.to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&((frames.len() * 4) as u32).to_le_bytes());
        for (l, r) in frames {
            out.extend_from_slice(&l.to_le_bytes());
            out.extend_from_slice(&r.to_le_bytes());
        }
        out
    }

    #[test]
    fn most_negative_pcm_maps_to_minus_one() {
        let bytes = pcm16_stereo(&[(-32768, -32768)]);
        let buf = decode_wav(&bytes).unwrap();
        assert_eq!(buf.samples(), &[-1.0]);
    }

    #[test]
    fn stereo_downmix_averages() {
        let bytes = pcm16_stereo(&[(16384, -16384), (8192, 8192)]);
        let buf = decode_wav(&bytes).unwrap();
        assert_eq!(buf.samples(), &[0.0, 0.25]);
    }

    #[test]
    fn truncated_riff_is_parse_error() {
        let mut bytes = pcm16_stereo(&[(1, 2), (3, 4)]);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_wav(&bytes), Err(Error::Parse(_))));
    }

    #[test]
    fn unsupported_codec() {
        let mut bytes = pcm16_stereo(&[(1, 2)]);
        bytes[20] = 2; // ADPCM
        assert!(matches!(decode_wav(&bytes), Err(Error::Unsupported(_))));
    }

    #[test]
    fn clamps_on_write() {
        let buf = WaveformBuffer::new(vec![2.0, -3.0], 16000).unwrap();
        let back = decode_wav(&encode_wav(&buf)).unwrap();
        assert!((back.samples()[0] - 32767.0 / 32768.0).abs() < 1e-12);
        assert_eq!(back.samples()[1], -1.0);
    }

    #[test]
    fn float_roundtrip_is_exact_in_f32() {
        let buf = WaveformBuffer::new(vec![2.5, -0.125, 1e-3], 44100).unwrap();
        let back = decode_wav(&encode_wav_f32(&buf)).unwrap();
        assert_eq!(back.sample_rate(), 44100);
        for (a, b) in buf.samples().iter().zip(back.samples()) {
            assert_eq!(*a as f32 as f64, *b);
        }
    }

    proptest! {
        #[test]
        fn pcm16_roundtrip_within_one_step(xs in prop::collection::vec(-1.0f64..1.0, 1..400)) {
            let buf = WaveformBuffer::new(xs, 16000).unwrap();
            let back = decode_wav(&encode_wav(&buf)).unwrap();
            prop_assert_eq!(back.len(), buf.len());
            for (a, b) in buf.samples().iter().zip(back.samples()) {
                prop_assert!((a - b).abs() <= 1.0 / 32768.0);
            }
        }
    }
}
