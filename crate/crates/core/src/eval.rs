//! Distribution metrics over embeddings and classifier posteriors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::audio::WaveformBuffer;
use crate::dsp::{mel_filterbank, stft_power};
use crate::error::{Error, Result};

/// Floor inside every logarithm of a probability.
pub const PROB_FLOOR: f64 = 1e-10;

/// Gaussian summary of a set of embeddings, biased covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl EmbeddingStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn gaussian_stats(embeddings: &[Vec<f64>]) -> Result<EmbeddingStats> {
    let n = embeddings.len();
    if n == 0 {
        return Err(Error::pre("no embeddings"));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::shape("embeddings differ in dimension"));
    }
    let mut mean = DVector::zeros(d);
    for e in embeddings {
        mean += DVector::from_column_slice(e);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for e in embeddings {
        let c = DVector::from_column_slice(e) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n as f64;
    // Exact symmetry regardless of accumulation order.
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(EmbeddingStats { mean, cov, count: n })
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    // Rounding noise on a rank-deficient matrix leaves tiny eigenvalues of
    // either sign; the square root would magnify them.
    let top = eig.eigenvalues.amax();
    let tol = top * m.nrows() as f64 * f64::EPSILON;
    let vals = eig.eigenvalues.map(|v| if v > tol { v.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|μa − μb|² + Tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)`
pub fn frechet_distance(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("FD between {}-d and {}-d stats", a.dim(), b.dim())));
    }
    let dmu = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let cross = psd_sqrt(&inner).trace();
    Ok(dmu + a.cov.trace() + b.cov.trace() - 2.0 * cross)
}

/// Per-sample class probabilities, one row per clip.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSet {
    rows: Vec<Vec<f64>>,
}

impl PosteriorSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || k == 0 {
            return Err(Error::pre("posterior set needs at least one non-empty row"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::shape(format!("row {i} has {} classes, expected {k}", r.len())));
            }
            let s: f64 = r.iter().sum();
            if r.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::Invariant(format!("row {i} is not a distribution (sum {s})")));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.rows[0].len()
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (k, &p)| if p > b.1 { (k, p) } else { b })
                    .0
            })
            .collect()
    }
}

fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = a.max(PROB_FLOOR);
            a * (a / b.max(PROB_FLOOR)).ln()
        })
        .sum()
}

/// Mean over pairs of `KL(p_i ‖ q_i)`, with `p` the generated side.
pub fn paired_kl(p: &PosteriorSet, q: &PosteriorSet) -> Result<f64> {
    if p.len() != q.len() || p.classes() != q.classes() {
        return Err(Error::shape(format!(
            "paired KL of {}×{} and {}×{} posteriors",
            p.len(),
            p.classes(),
            q.len(),
            q.classes()
        )));
    }
    let total: f64 = p.rows.iter().zip(&q.rows).map(|(a, b)| kl_row(a, b)).sum();
    Ok(total / p.len() as f64)
}

/// `exp(mean_i KL(p_i ‖ p̄))`
pub fn inception_score(p: &PosteriorSet) -> f64 {
    let k = p.classes();
    let n = p.len() as f64;
    let mut marginal = vec![0.0; k];
    for r in &p.rows {
        for (m, &x) in marginal.iter_mut().zip(r) {
            *m += x / n;
        }
    }
    let mean_kl: f64 = p.rows.iter().map(|r| kl_row(r, &marginal)).sum::<f64>() / n;
    mean_kl.exp()
}

/// Log-mel band statistics: per-band mean and standard deviation over frames.
#[derive(Debug, Clone)]
pub struct MelEmbedder {
    pub sample_rate: u32,
    pub clip_samples: usize,
    pub n_fft: usize,
    pub hop: usize,
    filters: Vec<Vec<f64>>,
}

impl MelEmbedder {
    pub const N_MELS: usize = 64;
    pub const NAME: &'static str = "mel-stats";

    pub fn new(sample_rate: u32, clip_samples: usize) -> Result<Self> {
        if clip_samples == 0 {
            return Err(Error::pre("clip length must be positive"));
        }
        let n_fft = 1024;
        Ok(Self {
            sample_rate,
            clip_samples,
            n_fft,
            hop: 256,
            filters: mel_filterbank(Self::N_MELS, n_fft, sample_rate, 0.0, sample_rate as f64 / 2.0),
        })
    }

    pub fn dim(&self) -> usize {
        2 * Self::N_MELS
    }

    /// Per-frame log-mel energies, `frames × 64`.
    pub fn log_mel(&self, buf: &WaveformBuffer) -> Result<Vec<Vec<f64>>> {
        if buf.len() != self.clip_samples || buf.sample_rate() != self.sample_rate {
            return Err(Error::shape(format!(
                "embedder expects {} samples at {} Hz, got {} at {} Hz",
                self.clip_samples,
                self.sample_rate,
                buf.len(),
                buf.sample_rate()
            )));
        }
        let frames = stft_power(buf.samples(), self.n_fft, self.hop)?;
        Ok(frames
            .iter()
            .map(|spec| {
                self.filters
                    .iter()
                    .map(|f| (f.iter().zip(spec).map(|(a, b)| a * b).sum::<f64>() + PROB_FLOOR).ln())
                    .collect()
            })
            .collect())
    }

    pub fn embed(&self, buf: &WaveformBuffer) -> Result<Vec<f64>> {
        let lm = self.log_mel(buf)?;
        let n = lm.len() as f64;
        let mut out = vec![0.0; self.dim()];
        for b in 0..Self::N_MELS {
            let mean = lm.iter().map(|r| r[b]).sum::<f64>() / n;
            let var = lm.iter().map(|r| (r[b] - mean).powi(2)).sum::<f64>() / n;
            out[b] = mean;
            out[Self::N_MELS + b] = var.sqrt();
        }
        Ok(out)
    }
}

/// Softmax over negative squared distances to per-class centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidClassifier {
    pub centroids: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl CentroidClassifier {
    pub fn fit(embeddings: &[Vec<f64>], labels: &[usize], classes: usize, temperature: f64) -> Result<Self> {
        if embeddings.len() != labels.len() || embeddings.is_empty() {
            return Err(Error::shape("need one label per embedding"));
        }
        if !(temperature > 0.0) {
            return Err(Error::pre("temperature must be positive"));
        }
        let d = embeddings[0].len();
        let mut sums = vec![vec![0.0; d]; classes];
        let mut counts = vec![0usize; classes];
        for (e, &l) in embeddings.iter().zip(labels) {
            if l >= classes {
                return Err(Error::Range(format!("label {l} of {classes}")));
            }
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(e) {
                *s += x;
            }
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::pre(format!("class {k} has no examples")));
        }
        let centroids = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| s.into_iter().map(|x| x / c as f64).collect())
            .collect();
        Ok(Self { centroids, temperature })
    }

    pub fn posterior(&self, e: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .centroids
            .iter()
            .map(|c| -c.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / self.temperature)
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = ex.iter().sum();
        ex.into_iter().map(|x| x / z).collect()
    }

    pub fn posteriors(&self, embeddings: &[Vec<f64>]) -> Result<PosteriorSet> {
        PosteriorSet::new(embeddings.iter().map(|e| self.posterior(e)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub embedder: String,
    pub n_generated: usize,
    pub n_reference: usize,
    pub fd: f64,
    pub kl: f64,
    pub is: f64,
}

/// FD over mel statistics, plus paired KL and IS from a centroid classifier
/// fitted on the reference set. Without labels every reference clip is its
/// own class. Clips pair up by position.
pub fn evaluate_sets(
    generated: &[WaveformBuffer],
    reference: &[WaveformBuffer],
    reference_labels: Option<(&[usize], usize)>,
) -> Result<MetricReport> {
    let first = reference.first().ok_or_else(|| Error::pre("empty reference set"))?;
    if generated.is_empty() {
        return Err(Error::pre("empty generated set"));
    }
    if generated.len() != reference.len() {
        return Err(Error::shape(format!(
            "paired KL needs equal counts, got {} generated and {} reference clips",
            generated.len(),
            reference.len()
        )));
    }
    let emb = MelEmbedder::new(first.sample_rate(), first.len())?;
    let eg = generated.iter().map(|b| emb.embed(b)).collect::<Result<Vec<_>>>()?;
    let er = reference.iter().map(|b| emb.embed(b)).collect::<Result<Vec<_>>>()?;
    let fd = frechet_distance(&gaussian_stats(&eg)?, &gaussian_stats(&er)?)?;
    let own: Vec<usize> = (0..er.len()).collect();
    let (labels, classes) = reference_labels.unwrap_or((&own, er.len()));
    let clf = CentroidClassifier::fit(&er, labels, classes, emb.dim() as f64)?;
    let pg = clf.posteriors(&eg)?;
    let kl = paired_kl(&pg, &clf.posteriors(&er)?)?;
    Ok(MetricReport {
        embedder: MelEmbedder::NAME.into(),
        n_generated: eg.len(),
        n_reference: er.len(),
        fd,
        kl,
        is: inception_score(&pg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    fn stats_1d(mean: f64, var: f64) -> EmbeddingStats {
        EmbeddingStats {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
            count: 1,
        }
    }

    #[test]
    fn stats_by_hand() {
        let s = gaussian_stats(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let one = gaussian_stats(&[vec![3.0, -1.0]]).unwrap();
        assert!(one.cov.iter().all(|&x| x == 0.0));
        assert!(gaussian_stats(&[]).is_err());
    }

    #[test]
    fn fd_closed_forms() {
        assert!((frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(1.0, 4.0)).unwrap() - 2.0).abs() < 1e-9);
        // Commuting diagonal covariances: Σ(√a − √b)² plus the mean term.
        let a = EmbeddingStats {
            mean: DVector::from_vec(vec![0.0, 1.0, 2.0]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 9.0, 0.25])),
            count: 1,
        };
        let b = EmbeddingStats {
            mean: DVector::from_vec(vec![1.0, 1.0, 0.0]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 1.0])),
            count: 1,
        };
        let want = 5.0 + (1.0f64 - 2.0).powi(2) + (3.0f64 - 1.0).powi(2) + (0.5f64 - 1.0).powi(2);
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-9);
        assert!(frechet_distance(&a, &stats_1d(0.0, 1.0)).is_err());
    }

    #[test]
    fn kl_and_is_closed_forms() {
        let onehot = PosteriorSet::new(vec![vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let uniform = PosteriorSet::new(vec![vec![0.25; 4]]).unwrap();
        assert!((paired_kl(&onehot, &uniform).unwrap() - 4f64.ln()).abs() < 1e-8);
        assert_eq!(paired_kl(&uniform, &uniform).unwrap(), 0.0);
        let eye = PosteriorSet::new((0..4).map(|k| (0..4).map(|j| (j == k) as u8 as f64).collect()).collect()).unwrap();
        assert!((inception_score(&eye) - 4.0).abs() < 1e-6);
        assert!((inception_score(&PosteriorSet::new(vec![vec![0.3, 0.7]; 5]).unwrap()) - 1.0).abs() < 1e-12);
        assert!(PosteriorSet::new(vec![vec![0.5, 0.6]]).is_err());
        assert!(paired_kl(&eye, &uniform).is_err());
    }

    fn gaussian_set(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| { let z: f64 = StandardNormal.sample(rng); z + shift }).collect::<Vec<f64>>())
            .collect()
    }

    #[test]
    fn fd_separates_shifted_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let a = gaussian_stats(&gaussian_set(&mut rng, 500, 8, 0.0)).unwrap();
            let b = gaussian_stats(&gaussian_set(&mut rng, 500, 8, 0.0)).unwrap();
            let c = gaussian_stats(&gaussian_set(&mut rng, 500, 8, 1.0)).unwrap();
            assert!(frechet_distance(&a, &b).unwrap() < frechet_distance(&a, &c).unwrap());
        }
    }

    fn tone(freq: f64, n: usize) -> WaveformBuffer {
        WaveformBuffer::new((0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16000.0).sin()).collect(), 16000)
            .unwrap()
    }

    #[test]
    fn mel_embedder_behaviour() {
        let e = MelEmbedder::new(16000, 4096).unwrap();
        let a = e.embed(&tone(440.0, 4096)).unwrap();
        let b = e.embed(&tone(880.0, 4096)).unwrap();
        assert_eq!(a.len(), 128);
        assert_eq!(a, e.embed(&tone(440.0, 4096)).unwrap());
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 0.1);
        let silent = e.embed(&WaveformBuffer::new(vec![0.0; 4096], 16000).unwrap()).unwrap();
        assert!(silent[..64].iter().all(|&x| (x - PROB_FLOOR.ln()).abs() < 1e-9));
        assert!(silent[64..].iter().all(|&x| x.abs() < 1e-9));
        assert!(e.embed(&tone(440.0, 100)).is_err());
    }

    #[test]
    fn centroid_classifier_recovers_tones() {
        let e = MelEmbedder::new(16000, 2048).unwrap();
        let freqs = [300.0, 1200.0, 3000.0];
        let refs: Vec<Vec<f64>> = freqs.iter().map(|&f| e.embed(&tone(f, 2048)).unwrap()).collect();
        let clf = CentroidClassifier::fit(&refs, &[0, 1, 2], 3, e.dim() as f64).unwrap();
        let probe: Vec<Vec<f64>> = freqs.iter().map(|&f| e.embed(&tone(f * 1.01, 2048)).unwrap()).collect();
        assert_eq!(clf.posteriors(&probe).unwrap().argmax(), vec![0, 1, 2]);
        assert!(CentroidClassifier::fit(&refs, &[0, 0, 0], 3, 1.0).is_err());
    }

    #[test]
    fn identical_sets_report() {
        let set: Vec<WaveformBuffer> = [220.0, 440.0, 990.0].iter().map(|&f| tone(f, 2048)).collect();
        let r = evaluate_sets(&set, &set, None).unwrap();
        assert!(r.fd.abs() < 1e-6, "{}", r.fd);
        assert!(r.kl.abs() < 1e-9);
        assert!(r.is >= 1.0);
        assert_eq!((r.n_generated, r.n_reference, r.embedder.as_str()), (3, 3, "mel-stats"));
        assert!(evaluate_sets(&set[..2], &set, None).is_err());
        let labelled = evaluate_sets(&set, &set, Some((&[0, 1, 1], 2))).unwrap();
        assert!(labelled.kl.abs() < 1e-9);
    }

    fn dist(k: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.001f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn kl_nonnegative_is_bounded(rows in prop::collection::vec((dist(4), dist(4)), 1..12)) {
            let (p, q): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
            let p = PosteriorSet::new(p).unwrap();
            let q = PosteriorSet::new(q).unwrap();
            prop_assert!(paired_kl(&p, &q).unwrap() >= -1e-12);
            let is = inception_score(&p);
            prop_assert!(is >= 1.0 - 1e-9 && is <= 4.0 + 1e-9);
        }

        #[test]
        fn fd_symmetric_and_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian_stats(&gaussian_set(&mut rng, 20, 4, 0.0)).unwrap();
            let b = gaussian_stats(&gaussian_set(&mut rng, 7, 4, 0.5)).unwrap();
            let ab = frechet_distance(&a, &b).unwrap();
            prop_assert!(ab >= -1e-6);
            prop_assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-6);
            prop_assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
        }

        #[test]
        fn stats_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut set = gaussian_set(&mut rng, 9, 3, 0.0);
            let a = gaussian_stats(&set).unwrap();
            set.reverse();
            let b = gaussian_stats(&set).unwrap();
            prop_assert!((a.mean - b.mean).amax() < 1e-12);
            prop_assert!((a.cov - b.cov).amax() < 1e-12);
        }
    }
}
