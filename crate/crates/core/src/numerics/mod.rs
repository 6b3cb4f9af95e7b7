//! Dense arrays and a small reverse-mode tape.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{rope_tables, rotate_rows};

use crate::error::Result;

/// Gradients of a scalar function by building it on a fresh tape.
pub fn grad<F>(f: F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).item();
    let grads = tape.backward(out)?;
    let gs = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();
    Ok((value, gs))
}

/// Central finite differences of a scalar function, entry by entry.
pub fn finite_difference<F>(f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let mut g = Tensor::zeros(params[i].shape());
        for j in 0..params[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = f(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = f(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn check<F>(f: F, params: &[Tensor])
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var> + Copy,
    {
        let (_, analytic) = grad(f, params).unwrap();
        let numeric = finite_difference(
            |ps| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
                let out = f(&mut tape, &vars)?;
                Ok(tape.value(out).item())
            },
            params,
            H,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            for (&x, &y) in a.data().iter().zip(n.data()) {
                let e = relative_error(x, y, 1e-6);
                assert!(e < TOL, "analytic {x} vs numeric {y} (rel {e})");
            }
        }
    }

    fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, rng)
    }

    // Weighted sum so that every output element carries a distinct upstream gradient.
    fn reduce(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand(tape.value(x).shape(), &mut rng);
        let w = tape.leaf(w);
        let p = tape.mul(x, w)?;
        Ok(tape.sum(p))
    }

    #[test]
    fn sum_gives_ones() {
        let p = Tensor::new(&[2, 3], vec![0.3; 6]).unwrap();
        let (_, g) = grad(|t, v| Ok(t.sum(v[0])), &[p]).unwrap();
        assert!(g[0].data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn sum_of_squares() {
        let p = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let (_, g) = grad(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[p],
        )
        .unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand(&[3, 4], &mut rng);
        let b = rand(&[4, 5], &mut rng);
        let c = rand(&[3, 4], &mut rng);
        let bias = rand(&[4], &mut rng);
        let w = rand(&[3, 4, 2], &mut rng);

        check(|t, v| { let y = t.matmul(v[0], v[1])?; reduce(t, y, 1) }, &[a.clone(), b.clone()]);
        check(|t, v| { let y = t.add(v[0], v[1])?; reduce(t, y, 2) }, &[a.clone(), c.clone()]);
        check(|t, v| { let y = t.sub(v[0], v[1])?; reduce(t, y, 3) }, &[a.clone(), c.clone()]);
        check(|t, v| { let y = t.mul(v[0], v[1])?; reduce(t, y, 4) }, &[a.clone(), c.clone()]);
        check(|t, v| { let y = t.scale(v[0], -1.7); reduce(t, y, 5) }, &[a.clone()]);
        check(|t, v| { let y = t.add_scalar(v[0], 0.4); reduce(t, y, 6) }, &[a.clone()]);
        check(|t, v| { let y = t.add_bias(v[0], v[1])?; reduce(t, y, 7) }, &[a.clone(), bias.clone()]);
        check(|t, v| { let y = t.softmax(v[0])?; reduce(t, y, 8) }, &[a.clone()]);
        check(|t, v| { let y = t.layernorm(v[0], 1e-6); reduce(t, y, 9) }, &[a.clone()]);
        check(|t, v| { let y = t.gelu(v[0]); reduce(t, y, 10) }, &[a.clone()]);
        check(|t, v| { let y = t.silu(v[0]); reduce(t, y, 11) }, &[a.clone()]);
        check(|t, v| { let y = t.conv1d(v[0], v[1])?; reduce(t, y, 12) }, &[a.clone(), w.clone()]);
        check(|t, v| { let y = t.gather_rows(v[0], &[2, 0, 0, 1, 2])?; reduce(t, y, 13) }, &[a.clone()]);
        check(|t, v| { let y = t.reshape(v[0], &[6, 2])?; reduce(t, y, 14) }, &[a.clone()]);
        check(|t, v| { let y = t.transpose(v[0])?; reduce(t, y, 15) }, &[a.clone()]);
        check(|t, v| { let y = t.concat_rows(&[v[0], v[1]])?; reduce(t, y, 16) }, &[a.clone(), c.clone()]);
        check(|t, v| { let y = t.concat_cols(&[v[0], v[1]])?; reduce(t, y, 17) }, &[a.clone(), c.clone()]);
        check(|t, v| { let y = t.slice_rows(v[0], 1..3)?; reduce(t, y, 18) }, &[a.clone()]);
        check(|t, v| { let y = t.slice_cols(v[0], 1..3)?; reduce(t, y, 19) }, &[a.clone()]);
        check(|t, v| { let y = t.rope(v[0], &[0.0, 1.5, 7.0], 2, 10.0)?; reduce(t, y, 20) }, &[a.clone()]);
        let q = rand(&[5, 4], &mut rng);
        let kk = rand(&[3, 4], &mut rng);
        let vv = rand(&[3, 4], &mut rng);
        check(|t, v| { let y = t.attention(v[0], v[1], v[2], 2)?; reduce(t, y, 22) }, &[q, kk, vv]);
        check(|t, v| { let y = t.mean_rows(v[0]); reduce(t, y, 21) }, &[a.clone()]);
        check(|t, v| Ok(t.mean(v[0])), &[a.clone()]);
    }

    #[test]
    fn three_layer_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![
            rand(&[4, 6], &mut rng),
            rand(&[6, 8], &mut rng),
            rand(&[8], &mut rng),
            rand(&[8, 8], &mut rng),
            rand(&[8], &mut rng),
            rand(&[8, 3], &mut rng),
            rand(&[3], &mut rng),
        ];
        check(
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_bias(h, v[2])?;
                let h = t.gelu(h);
                let h = t.matmul(h, v[3])?;
                let h = t.add_bias(h, v[4])?;
                let h = t.silu(h);
                let h = t.matmul(h, v[5])?;
                let h = t.add_bias(h, v[6])?;
                let sq = t.mul(h, h)?;
                Ok(t.mean(sq))
            },
            &params,
        );
    }

    #[test]
    fn attention_matches_per_head_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand(&[4, 6], &mut rng);
        let k = rand(&[5, 6], &mut rng);
        let v = rand(&[5, 6], &mut rng);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.leaf(q), tape.leaf(k), tape.leaf(v));
        let fused = tape.attention(qv, kv, vv, 3).unwrap();
        let mut heads = Vec::new();
        for h in 0..3 {
            let qh = tape.slice_cols(qv, 2 * h..2 * h + 2).unwrap();
            let kh = tape.slice_cols(kv, 2 * h..2 * h + 2).unwrap();
            let vh = tape.slice_cols(vv, 2 * h..2 * h + 2).unwrap();
            let kt = tape.transpose(kh).unwrap();
            let s = tape.matmul(qh, kt).unwrap();
            let s = tape.scale(s, 1.0 / 2f64.sqrt());
            let p = tape.softmax(s).unwrap();
            heads.push(tape.matmul(p, vh).unwrap());
        }
        let composed = tape.concat_cols(&heads).unwrap();
        assert!(tape.value(fused).max_abs_diff(tape.value(composed)) < 1e-12);
        assert!(tape.attention(qv, kv, vv, 4).is_err());
    }

    #[test]
    fn opaque_blocks_reverse_pass() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        let clamped = tape.value(x).map(|v| v.clamp(0.0, 1.0));
        let y = tape.opaque("clamp", &[x], clamped);
        let s = tape.sum(y);
        assert!(matches!(tape.backward(s), Err(Error::Unsupported(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }
}
