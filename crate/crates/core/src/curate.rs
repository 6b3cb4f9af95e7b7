//! Clip curation: fixed-length segmentation, silence filtering, overlap
//! augmentation and category balancing.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::WaveformBuffer;
use crate::error::{Error, Result};

pub const CLIP_SECS: f64 = 8.0;
/// Start of the second chunk produced by overlap augmentation.
pub const AUGMENT_OFFSET_SECS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub enum RejectReason {
    Silence { fraction: f64 },
    Score { scorer: String, score: f64 },
    Percentile { scorer: String },
    /// Left out by category balancing.
    Unbalanced,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Silence { .. } => "silence",
            Self::Score { .. } => "low_score",
            Self::Percentile { .. } => "percentile",
            Self::Unbalanced => "balance",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Silence { fraction } => write!(f, "silence:{fraction:.4}"),
            Self::Score { scorer, score } => write!(f, "low_score:{scorer}:{score:.4}"),
            Self::Percentile { scorer } => write!(f, "percentile:{scorer}"),
            Self::Unbalanced => write!(f, "balance"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub source_id: String,
    pub offset_secs: f64,
    pub label: String,
    pub audio: WaveformBuffer,
    pub rejection: Option<RejectReason>,
}

impl ClipRecord {
    pub fn duration_secs(&self) -> f64 {
        self.audio.duration_secs()
    }

    pub fn accepted(&self) -> bool {
        self.rejection.is_none()
    }

    /// `source  offset  duration  label  status  reason`, tab separated.
    pub fn manifest_line(&self) -> String {
        let (status, reason) = match &self.rejection {
            None => ("accept", "-".to_string()),
            Some(r) => ("reject", r.to_string()),
        };
        format!(
            "{}\t{:.3}\t{:.3}\t{}\t{status}\t{reason}",
            self.source_id,
            self.offset_secs,
            self.duration_secs(),
            self.label
        )
    }
}

fn clip_samples(sample_rate: u32, secs: f64) -> usize {
    (secs * sample_rate as f64).round() as usize
}

/// Consecutive non-overlapping windows from offset 0; the remainder is dropped.
pub fn segment_stream(source_id: &str, label: &str, buf: &WaveformBuffer, clip_secs: f64) -> Result<Vec<ClipRecord>> {
    let n = clip_samples(buf.sample_rate(), clip_secs);
    if n == 0 {
        return Err(Error::pre("clip length must cover at least one sample"));
    }
    (0..buf.len() / n)
        .map(|i| {
            Ok(ClipRecord {
                source_id: source_id.to_string(),
                offset_secs: (i * n) as f64 / buf.sample_rate() as f64,
                label: label.to_string(),
                audio: buf.slice(i * n, (i + 1) * n)?,
                rejection: None,
            })
        })
        .collect()
}

/// Fraction of samples with `|x| < amp_threshold`.
pub fn silence_fraction(buf: &WaveformBuffer, amp_threshold: f64) -> Result<f64> {
    if buf.is_empty() {
        return Err(Error::pre("silence fraction of an empty buffer"));
    }
    let quiet = buf.samples().iter().filter(|x| x.abs() < amp_threshold).count();
    Ok(quiet as f64 / buf.len() as f64)
}

pub type Scorer = Arc<dyn Fn(&WaveformBuffer) -> f64 + Send + Sync>;

/// Optional quality filter: clips scoring below `min_score` are rejected.
#[derive(Clone)]
pub struct ScorerHook {
    pub name: String,
    pub scorer: Scorer,
    pub min_score: f64,
}

impl fmt::Debug for ScorerHook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScorerHook({}, min {})", self.name, self.min_score)
    }
}

#[derive(Debug, Clone)]
pub struct FilterRules {
    pub max_silence_fraction: f64,
    /// About −60 dBFS.
    pub silence_amp_threshold: f64,
    pub scorers: Vec<ScorerHook>,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            max_silence_fraction: 0.8,
            silence_amp_threshold: 1e-3,
            scorers: Vec::new(),
        }
    }
}

impl FilterRules {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_silence_fraction) || !(self.silence_amp_threshold >= 0.0) {
            return Err(Error::Config(format!(
                "max_silence_fraction {} must lie in [0, 1] and the threshold must be nonnegative",
                self.max_silence_fraction
            )));
        }
        Ok(())
    }

    /// First failing rule, if any.
    pub fn check(&self, buf: &WaveformBuffer) -> Result<Option<RejectReason>> {
        let fraction = silence_fraction(buf, self.silence_amp_threshold)?;
        if fraction > self.max_silence_fraction {
            return Ok(Some(RejectReason::Silence { fraction }));
        }
        for hook in &self.scorers {
            let score = (hook.scorer)(buf);
            if !(score >= hook.min_score) {
                return Ok(Some(RejectReason::Score { scorer: hook.name.clone(), score }));
            }
        }
        Ok(None)
    }

    pub fn apply(&self, clips: &mut [ClipRecord]) -> Result<()> {
        self.validate()?;
        for c in clips.iter_mut() {
            c.rejection = self.check(&c.audio)?;
        }
        Ok(())
    }
}

/// Two clips at 0 s and 1 s from a source of at least 9 s.
pub fn augment_overlap(source_id: &str, label: &str, buf: &WaveformBuffer) -> Result<[ClipRecord; 2]> {
    let sr = buf.sample_rate();
    let n = clip_samples(sr, CLIP_SECS);
    let off = clip_samples(sr, AUGMENT_OFFSET_SECS);
    if buf.len() < n + off {
        return Err(Error::pre(format!(
            "overlap augmentation needs {:.1} s, source has {:.3} s",
            CLIP_SECS + AUGMENT_OFFSET_SECS,
            buf.duration_secs()
        )));
    }
    let chunk = |start: usize| -> Result<ClipRecord> {
        Ok(ClipRecord {
            source_id: source_id.to_string(),
            offset_secs: start as f64 / sr as f64,
            label: label.to_string(),
            audio: buf.slice(start, start + n)?,
            rejection: None,
        })
    };
    Ok([chunk(0)?, chunk(off)?])
}

/// Integer quotas proportional to `weights` summing to `total`, by largest remainder.
pub fn proportional_quotas(weights: &[f64], total: usize) -> Result<Vec<usize>> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(w >= 0.0)) || !(sum > 0.0) {
        return Err(Error::pre("reference histogram needs nonnegative weights with a positive sum"));
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut q: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Stable sort keeps ties in label order.
    order.sort_by(|&a, &b| (exact[b] - q[b] as f64).total_cmp(&(exact[a] - q[a] as f64)));
    let missing = total - q.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        q[i] += 1;
    }
    Ok(q)
}

#[derive(Debug, Clone)]
pub struct BalanceOutcome {
    pub selected: Vec<ClipRecord>,
    /// Pool positions of `selected`.
    pub indices: Vec<usize>,
    pub quotas: BTreeMap<String, usize>,
    /// Items short of `target_total` because a category ran out.
    pub shortfall: usize,
}

/// Samples without replacement so that category counts follow `reference`,
/// each capped by what the pool holds. Output keeps pool order.
pub fn balance_categories(
    pool: &[ClipRecord],
    reference: &BTreeMap<String, f64>,
    target_total: usize,
    seed: u64,
) -> Result<BalanceOutcome> {
    if pool.is_empty() {
        return Err(Error::pre("empty pool"));
    }
    if let Some(c) = pool.iter().find(|c| !reference.contains_key(&c.label)) {
        return Err(Error::pre(format!("label `{}` missing from the reference histogram", c.label)));
    }
    let labels: Vec<&String> = reference.keys().collect();
    let weights: Vec<f64> = reference.values().copied().collect();
    let quotas = proportional_quotas(&weights, target_total)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; pool.len()];
    let mut shortfall = 0;
    let mut quota_map = BTreeMap::new();
    for (label, &quota) in labels.iter().zip(&quotas) {
        let mut idx: Vec<usize> = (0..pool.len()).filter(|&i| &&pool[i].label == label).collect();
        idx.shuffle(&mut rng);
        let take = quota.min(idx.len());
        shortfall += quota - take;
        for &i in &idx[..take] {
            keep[i] = true;
        }
        quota_map.insert((*label).clone(), take);
    }
    let indices: Vec<usize> = (0..pool.len()).filter(|&i| keep[i]).collect();
    Ok(BalanceOutcome {
        selected: indices.iter().map(|&i| pool[i].clone()).collect(),
        indices,
        quotas: quota_map,
        shortfall,
    })
}

/// Rejects the lowest-scoring `fraction` of accepted clips under `scorer`.
/// Ties at the cut are broken by pool order.
pub fn percentile_cut(clips: &mut [ClipRecord], name: &str, scorer: &Scorer, fraction: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Range(format!("cut fraction {fraction} outside [0, 1]")));
    }
    let mut scored: Vec<(usize, f64)> = clips
        .iter()
        .enumerate()
        .filter(|(_, c)| c.accepted())
        .map(|(i, c)| (i, scorer(&c.audio)))
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    let cut = (fraction * scored.len() as f64).floor() as usize;
    for &(i, _) in &scored[..cut] {
        clips[i].rejection = Some(RejectReason::Percentile { scorer: name.to_string() });
    }
    Ok(cut)
}

/// `path<TAB>label` lines; blank lines and `#` comments are skipped.
pub fn parse_source_manifest(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            let (path, label) = l
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("line {}: expected path<TAB>label", i + 1)))?;
            if path.trim().is_empty() || label.trim().is_empty() {
                return Err(Error::Parse(format!("line {}: empty path or label", i + 1)));
            }
            Ok((path.trim().to_string(), label.trim().to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SR: u32 = 100;

    fn ramp(secs: f64) -> WaveformBuffer {
        let n = clip_samples(SR, secs);
        WaveformBuffer::new((0..n).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.01).collect(), SR).unwrap()
    }

    fn with_silence(frac: f64, n: usize) -> WaveformBuffer {
        let quiet = (frac * n as f64).round() as usize;
        WaveformBuffer::new((0..n).map(|i| if i < quiet { 0.0 } else { 0.5 }).collect(), SR).unwrap()
    }

    fn rec(label: &str, i: usize) -> ClipRecord {
        ClipRecord {
            source_id: format!("s{i}"),
            offset_secs: 0.0,
            label: label.into(),
            audio: ramp(0.1),
            rejection: None,
        }
    }

    #[test]
    fn segmentation() {
        let s = segment_stream("a", "dog", &ramp(20.0), CLIP_SECS).unwrap();
        assert_eq!(s.iter().map(|c| c.offset_secs).collect::<Vec<_>>(), vec![0.0, 8.0]);
        assert!(s.iter().all(|c| c.duration_secs() == 8.0 && c.label == "dog"));
        assert_eq!(segment_stream("a", "x", &ramp(8.0), CLIP_SECS).unwrap().len(), 1);
        assert!(segment_stream("a", "x", &ramp(7.0), CLIP_SECS).unwrap().is_empty());
    }

    #[test]
    fn silence_rule() {
        assert_eq!(silence_fraction(&with_silence(1.0, 10), 1e-3).unwrap(), 1.0);
        assert_eq!(silence_fraction(&with_silence(0.5, 10), 1e-3).unwrap(), 0.5);
        let rules = FilterRules::default();
        assert_eq!(rules.check(&with_silence(0.85, 800)).unwrap().unwrap().code(), "silence");
        assert!(rules.check(&with_silence(0.75, 800)).unwrap().is_none());
        assert!(rules.check(&with_silence(0.8, 800)).unwrap().is_none());
    }

    #[test]
    fn scorer_hooks() {
        let rules = FilterRules {
            scorers: vec![ScorerHook { name: "peak".into(), scorer: Arc::new(|b| *b.samples().last().unwrap()), min_score: 0.1 }],
            ..Default::default()
        };
        let mut clips = vec![rec("a", 0), rec("a", 1)];
        clips[1].audio = with_silence(0.5, 100);
        rules.apply(&mut clips).unwrap();
        assert!(clips[1].accepted());
        assert_eq!(clips[0].rejection.as_ref().unwrap().code(), "low_score");
        assert!(clips[0].manifest_line().ends_with("\treject\tlow_score:peak:-0.0836"));
    }

    #[test]
    fn overlap_augmentation() {
        let src = ramp(9.0);
        let [a, b] = augment_overlap("v", "cat", &src).unwrap();
        assert_eq!((a.offset_secs, b.offset_secs), (0.0, 1.0));
        assert_eq!((a.duration_secs(), b.duration_secs()), (8.0, 8.0));
        let s = SR as usize;
        assert_eq!(&a.audio.samples()[s..], &b.audio.samples()[..7 * s]);
        assert_eq!(b.label, "cat");
        assert!(matches!(augment_overlap("v", "cat", &ramp(8.5)), Err(Error::Precondition(_))));
    }

    #[test]
    fn balancing_examples() {
        let mut pool: Vec<ClipRecord> = (0..10).map(|i| rec("A", i)).collect();
        pool.extend((10..12).map(|i| rec("B", i)));
        let uniform: BTreeMap<String, f64> = [("A".to_string(), 1.0), ("B".to_string(), 1.0)].into();
        let out = balance_categories(&pool, &uniform, 4, 0).unwrap();
        assert_eq!(out.quotas, [("A".to_string(), 2), ("B".to_string(), 2)].into());
        assert_eq!(out.selected.len(), 4);
        let again = balance_categories(&pool, &uniform, 4, 0).unwrap();
        assert_eq!(out.selected, again.selected);

        let only_a: BTreeMap<String, f64> = [("A".to_string(), 1.0), ("B".to_string(), 0.0)].into();
        assert!(balance_categories(&pool, &only_a, 5, 1).unwrap().selected.iter().all(|c| c.label == "A"));

        let all = balance_categories(&pool, &uniform, 40, 2).unwrap();
        assert_eq!(all.selected.len(), 12);
        assert_eq!(all.shortfall, 28);
        assert!(balance_categories(&[], &uniform, 4, 0).is_err());
    }

    #[test]
    fn quotas_largest_remainder() {
        assert_eq!(proportional_quotas(&[1.0, 1.0, 1.0], 10).unwrap(), vec![4, 3, 3]);
        assert_eq!(proportional_quotas(&[0.5, 0.3, 0.2], 7).unwrap(), vec![4, 2, 1]);
        assert!(proportional_quotas(&[0.0, 0.0], 3).is_err());
    }

    #[test]
    fn percentile_cut_rejects_bottom() {
        let mut clips: Vec<ClipRecord> = (0..10).map(|i| rec("A", i)).collect();
        for (i, c) in clips.iter_mut().enumerate() {
            c.audio = WaveformBuffer::new(vec![i as f64], SR).unwrap();
        }
        let s: Scorer = Arc::new(|b| b.samples()[0]);
        assert_eq!(percentile_cut(&mut clips, "conf", &s, 0.1).unwrap(), 1);
        assert!(!clips[0].accepted() && clips[1..].iter().all(ClipRecord::accepted));
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_source_manifest("# sources\na.wav\tdog\n\nb c.wav\tcat\n").unwrap();
        assert_eq!(m, vec![("a.wav".into(), "dog".into()), ("b c.wav".into(), "cat".into())]);
        assert!(parse_source_manifest("a.wav dog").is_err());
    }

    proptest! {
        #[test]
        fn rejection_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let rules = FilterRules::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let rl = rules.check(&with_silence(lo, 200)).unwrap().is_some();
            let rh = rules.check(&with_silence(hi, 200)).unwrap().is_some();
            prop_assert!(!rl || rh);
        }

        #[test]
        fn balance_within_one_over_target(
            avail in prop::collection::vec(5usize..40, 2..6),
            weights in prop::collection::vec(0.1f64..1.0, 6),
            target in 1usize..25,
            seed in 0u64..100,
        ) {
            let k = avail.len();
            let pool: Vec<ClipRecord> = avail
                .iter()
                .enumerate()
                .flat_map(|(c, &n)| (0..n).map(move |i| rec(&format!("L{c}"), i)))
                .collect();
            let reference: BTreeMap<String, f64> = (0..k).map(|c| (format!("L{c}"), weights[c])).collect();
            // Availability always suffices when every class holds at least the target.
            prop_assume!(avail.iter().all(|&n| n >= target));
            let out = balance_categories(&pool, &reference, target, seed).unwrap();
            prop_assert_eq!(out.selected.len(), target);
            let wsum: f64 = weights[..k].iter().sum();
            for c in 0..k {
                let got = out.selected.iter().filter(|r| r.label == format!("L{c}")).count() as f64 / target as f64;
                prop_assert!((got - weights[c] / wsum).abs() <= 1.0 / target as f64 + 1e-12);
            }
        }
    }
}
