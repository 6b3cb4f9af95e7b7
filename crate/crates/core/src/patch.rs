//! Lossless reshaping between waveforms and `C×D` token grids.

use crate::audio::WaveformBuffer;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `C` tokens of `D` samples each. Row `c` holds samples `[c·D, (c+1)·D)`;
/// the last `pad_len` entries are zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    data: Tensor,
    pad_len: usize,
    sample_rate: u32,
}

impl TokenGrid {
    pub fn new(data: Tensor, pad_len: usize, sample_rate: u32) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::shape(format!(
                "token grid must be C×D, got {:?}",
                data.shape()
            )));
        }
        if pad_len >= data.shape()[1] {
            return Err(Error::Invariant(format!(
                "pad_len {pad_len} must be below D = {}",
                data.shape()[1]
            )));
        }
        if pad_len >= data.len() {
            return Err(Error::Invariant("grid holds no samples".into()));
        }
        Ok(Self {
            data,
            pad_len,
            sample_rate,
        })
    }

    pub fn tokens(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn patch(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn pad_len(&self) -> usize {
        self.pad_len
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Same layout, new contents.
    pub fn with_tensor(&self, data: Tensor) -> Result<Self> {
        if data.shape() != self.data.shape() {
            return Err(Error::shape(format!(
                "grid {:?} replaced by {:?}",
                self.data.shape(),
                data.shape()
            )));
        }
        Self::new(data, self.pad_len, self.sample_rate)
    }

    /// Waveform length this grid represents.
    pub fn num_samples(&self) -> usize {
        self.data.len() - self.pad_len
    }
}

pub fn patchify(buf: &WaveformBuffer, patch: usize) -> Result<TokenGrid> {
    if patch == 0 {
        return Err(Error::pre("patch size D must be at least 1"));
    }
    let t = buf.len();
    let tokens = t.div_ceil(patch);
    let pad_len = tokens * patch - t;
    let mut data = Vec::with_capacity(tokens * patch);
    data.extend_from_slice(buf.samples());
    data.resize(tokens * patch, 0.0);
    TokenGrid::new(Tensor::new(&[tokens, patch], data)?, pad_len, buf.sample_rate())
}

pub fn unpatchify(grid: &TokenGrid) -> Result<WaveformBuffer> {
    if grid.pad_len >= grid.patch() {
        return Err(Error::Invariant("pad_len must be below D".into()));
    }
    let n = grid.num_samples();
    WaveformBuffer::new(grid.data.data()[..n].to_vec(), grid.sample_rate)
}

/// Duration of one token in milliseconds.
pub fn token_duration_ms(patch: usize, sample_rate: u32) -> f64 {
    1000.0 * patch as f64 / sample_rate as f64
}
