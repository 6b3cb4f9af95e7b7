use crate::error::{Error, Result};
use crate::numerics::{rope_tables, rotate_rows, Tensor};

/// Rotates each `(2i, 2i+1)` pair of a `heads × len × head_dim` tensor by
/// `positions[l] · base^(-2i/head_dim)`.
pub fn rope_rotate(x: &Tensor, positions: &[f64], base: f64) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("rope expects heads×len×head_dim, got {shape:?}")));
    }
    let (len, hd) = (shape[1], shape[2]);
    if hd % 2 != 0 {
        return Err(Error::shape(format!("rope head_dim {hd} is odd")));
    }
    if positions.len() != len {
        return Err(Error::shape(format!(
            "{} positions for sequence length {len}",
            positions.len()
        )));
    }
    let (cos, sin) = rope_tables(positions, hd, base);
    let mut out = x.clone();
    for head in out.data_mut().chunks_mut(len * hd) {
        rotate_rows(head, hd, hd, &cos, &sin, false);
    }
    Ok(out)
}

/// Audio-rate position of visual token `j`: `j · C / N_clip`.
pub fn visual_rope_positions(visual_index: usize, tokens: usize, n_clip: usize) -> f64 {
    visual_index as f64 * rope_rate_ratio(tokens, n_clip)
}

/// Audio-to-visual token-rate ratio `C / N_clip`.
pub fn rope_rate_ratio(tokens: usize, n_clip: usize) -> f64 {
    tokens as f64 / n_clip as f64
}

pub(crate) fn audio_positions(tokens: usize) -> Vec<f64> {
    (0..tokens).map(|j| j as f64).collect()
}

pub(crate) fn visual_positions(tokens: usize, n_clip: usize) -> Vec<f64> {
    (0..n_clip)
        .map(|j| visual_rope_positions(j, tokens, n_clip))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn position_zero_is_identity() {
        let x = rand(&[2, 3, 8], 1);
        let y = rope_rotate(&x, &[0.0; 3], 10000.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn odd_head_dim_rejected() {
        assert!(rope_rotate(&rand(&[1, 2, 5], 0), &[0.0, 1.0], 10000.0).is_err());
    }

    #[test]
    fn rate_ratio() {
        assert_eq!(rope_rate_ratio(640, 64), 10.0);
        assert_eq!(visual_rope_positions(1, 640, 64), 10.0);
        assert_eq!(visual_positions(8, 8), audio_positions(8));

        // Visual token 1 and audio token 10 carry the same rotary phase.
        let v = rand(&[1, 1, 16], 2);
        let a = rope_rotate(&v, &[visual_rope_positions(1, 640, 64)], 10000.0).unwrap();
        let b = rope_rotate(&v, &[10.0], 10000.0).unwrap();
        assert_eq!(a, b);
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    proptest! {
        #[test]
        fn preserves_pair_norms(p in -500.0f64..500.0, seed in 0u64..1000) {
            let x = rand(&[2, 1, 8], seed);
            let y = rope_rotate(&x, &[p], 10000.0).unwrap();
            for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
                prop_assert!((dot(a, a).sqrt() - dot(b, b).sqrt()).abs() < 1e-6);
            }
        }

        #[test]
        fn dot_depends_on_offset_only(p in 0.0f64..200.0, q in 0.0f64..200.0, shift in -100.0f64..100.0, seed in 0u64..1000) {
            let qv = rand(&[1, 1, 8], seed);
            let kv = rand(&[1, 1, 8], seed + 1);
            let score = |a: f64, b: f64| {
                let qa = rope_rotate(&qv, &[a], 10000.0).unwrap();
                let kb = rope_rotate(&kv, &[b], 10000.0).unwrap();
                dot(qa.data(), kb.data())
            };
            prop_assert!((score(p, q) - score(p + shift, q + shift)).abs() < 1e-9);
        }
    }
}
