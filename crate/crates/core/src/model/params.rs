use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Ordered, named parameter tensors. Layers refer to entries by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        debug_assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.iter().find(|(_, t)| !t.is_finite()) {
            Some((name, _)) => Err(Error::Numeric(format!("parameter `{name}` is not finite"))),
            None => Ok(()),
        }
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Zeros,
    Normal(f64),
    /// `d × (k·d)` modulation projection whose gate column blocks are zero.
    AdaLn { d: usize, gates: &'static [usize] },
}

impl Init {
    pub(crate) fn fill<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::AdaLn { d, gates } => {
                let mut t = Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng);
                let cols = shape[1];
                for row in t.data_mut().chunks_mut(cols) {
                    for &g in gates {
                        row[g * d..(g + 1) * d].iter_mut().for_each(|x| *x = 0.0);
                    }
                }
                t
            }
        }
    }
}
