//! Synthetic stand-ins for the frozen visual, sync and text encoders, plus
//! assembly of the global (`c_g`) and frame-aligned (`c_e`) conditions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Class label and event onsets for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSpec {
    pub class_id: usize,
    /// Seconds from clip start.
    pub event_times: Vec<f64>,
    /// Clip length in seconds.
    pub clip_len: f64,
}

impl EventSpec {
    pub fn new(class_id: usize, event_times: Vec<f64>, clip_len: f64) -> Result<Self> {
        if !(clip_len > 0.0) {
            return Err(Error::pre("clip length must be positive"));
        }
        if let Some(t) = event_times.iter().find(|&&t| !(0.0..clip_len).contains(&t)) {
            return Err(Error::Range(format!(
                "event at {t} s outside [0, {clip_len})"
            )));
        }
        Ok(Self {
            class_id,
            event_times,
            clip_len,
        })
    }

    /// Row hit by each event when the clip is split into `frames` equal frames.
    pub fn event_frames(&self, frames: usize) -> Vec<usize> {
        self.event_times
            .iter()
            .map(|&t| ((t / self.clip_len * frames as f64).floor() as usize).min(frames - 1))
            .collect()
    }

    /// `class_id time,time,...`
    pub fn to_manifest_line(&self) -> String {
        let times: Vec<String> = self.event_times.iter().map(|t| format!("{t}")).collect();
        if times.is_empty() {
            self.class_id.to_string()
        } else {
            format!("{} {}", self.class_id, times.join(","))
        }
    }
}

/// Parses a manifest with one `class_id [t1,t2,...]` per line; `#` starts a comment.
pub fn parse_event_manifest(text: &str, clip_len: f64) -> Result<Vec<EventSpec>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let class_id = fields
            .next()
            .unwrap()
            .parse::<usize>()
            .map_err(|e| Error::Parse(format!("line {}: class id: {e}", n + 1)))?;
        let times = match fields.next() {
            None | Some("-") => Vec::new(),
            Some(list) => list
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("line {}: event time: {e}", n + 1)))
                })
                .collect::<Result<_>>()?,
        };
        if fields.next().is_some() {
            return Err(Error::Parse(format!("line {}: trailing fields", n + 1)));
        }
        out.push(EventSpec::new(class_id, times, clip_len)?);
    }
    Ok(out)
}

/// Sizes of the conditioning streams and the shared feature seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningConfig {
    pub classes: usize,
    pub n_clip: usize,
    pub n_sync: usize,
    pub d_visual: usize,
    pub d_sync: usize,
    pub d_text: usize,
    pub feature_seed: u64,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            n_clip: 8,
            n_sync: 8,
            d_visual: 16,
            d_sync: 16,
            d_text: 16,
            feature_seed: 0,
        }
    }
}

impl ConditioningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0
            || self.n_clip == 0
            || self.n_sync == 0
            || self.d_visual == 0
            || self.d_sync == 0
            || self.d_text == 0
        {
            return Err(Error::Config(format!(
                "conditioning sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

// Stream tags keep the derived seeds of different encoders apart.
const TAG_VISUAL_BASE: u64 = 0x5649_5355_414c_0000;
const TAG_VISUAL_BUMP: u64 = 0x4255_4d50_0000_0001;
const TAG_SYNC: u64 = 0x5359_4e43_0000_0002;
const TAG_TEXT: u64 = 0x5445_5854_0000_0003;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derived_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ tag).wrapping_add(index)))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    Tensor::randn(&[n], 1.0, rng).into_data()
}

/// `n_clip × d_v` rows: the class base vector everywhere, plus a shared bump on event frames.
pub fn synth_visual_features(spec: &EventSpec, n_clip: usize, d_v: usize, seed: u64) -> Result<Tensor> {
    if n_clip == 0 {
        return Err(Error::pre("N_clip must be at least 1"));
    }
    let base = gaussian_vec(&mut derived_rng(seed, TAG_VISUAL_BASE, spec.class_id as u64), d_v);
    let bump = gaussian_vec(&mut derived_rng(seed, TAG_VISUAL_BUMP, 0), d_v);
    let mut rows = vec![base; n_clip];
    for f in spec.event_frames(n_clip) {
        for (x, b) in rows[f].iter_mut().zip(&bump) {
            *x += b;
        }
    }
    Tensor::from_rows(&rows)
}

/// `n_sync × d_s` rows: zero except a one-hot bump on each event segment.
pub fn synth_sync_features(spec: &EventSpec, n_sync: usize, d_s: usize, seed: u64) -> Result<Tensor> {
    if n_sync == 0 {
        return Err(Error::pre("N_sync must be at least 1"));
    }
    let hot = derived_rng(seed, TAG_SYNC, 0).random_range(0..d_s);
    let mut t = Tensor::zeros(&[n_sync, d_s]);
    for f in spec.event_frames(n_sync) {
        t.data_mut()[f * d_s + hot] += 1.0;
    }
    Ok(t)
}

/// Fixed random embedding table standing in for a text encoder over class labels.
#[derive(Debug, Clone)]
pub struct TextLabelEncoder {
    table: Vec<Vec<f64>>,
}

impl TextLabelEncoder {
    pub fn new(classes: usize, d_t: usize, seed: u64) -> Self {
        let table = (0..classes)
            .map(|k| gaussian_vec(&mut derived_rng(seed, TAG_TEXT, k as u64), d_t))
            .collect();
        Self { table }
    }

    /// `1 × d_t` embedding of `class_id`.
    pub fn encode(&self, class_id: usize) -> Result<Tensor> {
        let row = self.table.get(class_id).ok_or_else(|| {
            Error::Range(format!("class {class_id} of {}", self.table.len()))
        })?;
        Tensor::new(&[1, row.len()], row.clone())
    }
}

pub fn encode_text_label(class_id: usize, classes: usize, d_t: usize, seed: u64) -> Result<Tensor> {
    TextLabelEncoder::new(classes, d_t, seed).encode(class_id)
}

/// Raw condition streams for one clip. Null flags tell the model to swap in its
/// learned null embeddings; the raw features are kept but never read.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub visual: Tensor,
    pub sync: Tensor,
    pub text: Tensor,
    pub visual_null: bool,
    pub text_null: bool,
}

impl ConditionBundle {
    pub fn synthesize(spec: &EventSpec, cfg: &ConditioningConfig) -> Result<Self> {
        if spec.class_id >= cfg.classes {
            return Err(Error::Range(format!(
                "class {} of {}",
                spec.class_id, cfg.classes
            )));
        }
        Ok(Self {
            visual: synth_visual_features(spec, cfg.n_clip, cfg.d_visual, cfg.feature_seed)?,
            sync: synth_sync_features(spec, cfg.n_sync, cfg.d_sync, cfg.feature_seed)?,
            text: encode_text_label(spec.class_id, cfg.classes, cfg.d_text, cfg.feature_seed)?,
            visual_null: false,
            text_null: false,
        })
    }

    /// Both streams replaced by nulls.
    pub fn nulled(&self) -> Self {
        Self {
            visual_null: true,
            text_null: true,
            ..self.clone()
        }
    }

    /// Text-only conditioning: the visual pathway (visual and sync) is nulled.
    pub fn text_only(&self) -> Self {
        Self {
            visual_null: true,
            ..self.clone()
        }
    }
}

/// Independently nulls the visual pathway with `p_visual` and text with `p_text`.
pub fn drop_conditions<R: Rng + ?Sized>(
    bundle: &ConditionBundle,
    rng: &mut R,
    p_visual: f64,
    p_text: f64,
) -> Result<ConditionBundle> {
    if !(0.0..=1.0).contains(&p_visual) || !(0.0..=1.0).contains(&p_text) {
        return Err(Error::Range("drop probabilities must lie in [0, 1]".into()));
    }
    let drop_v = rng.random::<f64>() < p_visual;
    let drop_t = rng.random::<f64>() < p_text;
    Ok(ConditionBundle {
        visual_null: bundle.visual_null || drop_v,
        text_null: bundle.text_null || drop_t,
        ..bundle.clone()
    })
}

/// Nearest-neighbour source row for each of `n_dst` target rows: `floor(j·n_src/n_dst)`.
pub fn nearest_indices(n_src: usize, n_dst: usize) -> Vec<usize> {
    (0..n_dst).map(|j| j * n_src / n_dst).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct AssembledConditions {
    /// `1 × d`
    pub c_g: Var,
    /// `C × d`
    pub c_e: Var,
}

/// `c_g = mean(visual) + text + t_emb`; `c_e[j] = c_g + sync[floor(j·N_sync/C)]`.
pub fn assemble_conditions(
    tape: &mut Tape,
    visual: Var,
    text: Var,
    sync: Var,
    t_emb: Var,
    tokens: usize,
) -> Result<AssembledConditions> {
    let d = tape.value(t_emb).cols();
    for (name, v) in [("visual", visual), ("text", text), ("sync", sync)] {
        if tape.value(v).cols() != d {
            return Err(Error::shape(format!(
                "{name} projection has width {}, model width is {d}",
                tape.value(v).cols()
            )));
        }
    }
    let pooled = tape.mean_rows(visual);
    let c_g = tape.add(pooled, text)?;
    let c_g = tape.add(c_g, t_emb)?;
    let n_sync = tape.value(sync).rows();
    let spread = tape.gather_rows(c_g, &vec![0; tokens])?;
    let up = tape.gather_rows(sync, &nearest_indices(n_sync, tokens))?;
    let c_e = tape.add(spread, up)?;
    Ok(AssembledConditions { c_g, c_e })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(class: usize, times: &[f64]) -> EventSpec {
        EventSpec::new(class, times.to_vec(), 8.0).unwrap()
    }

    #[test]
    fn visual_features_are_deterministic_and_class_dependent() {
        let a = synth_visual_features(&spec(1, &[2.0]), 8, 16, 3).unwrap();
        assert_eq!(a, synth_visual_features(&spec(1, &[2.0]), 8, 16, 3).unwrap());
        let b = synth_visual_features(&spec(2, &[2.0]), 8, 16, 3).unwrap();
        assert_ne!(a, b);
        let flat = synth_visual_features(&spec(1, &[]), 8, 16, 3).unwrap();
        for r in 1..8 {
            assert_eq!(flat.row(r), flat.row(0));
        }
        assert_ne!(a.row(2), flat.row(2));
        assert_eq!(a.row(3), flat.row(3));
    }

    #[test]
    fn sync_bump_lands_on_event_segment() {
        let s = synth_sync_features(&spec(0, &[4.0]), 8, 16, 5).unwrap();
        for r in 0..8 {
            let energy: f64 = s.row(r).iter().map(|x| x * x).sum();
            assert_eq!(energy > 0.0, r == 4, "row {r}");
        }
        let flat = synth_sync_features(&spec(0, &[]), 8, 16, 5).unwrap();
        assert!(flat.data().iter().all(|&x| x == 0.0));
        assert_eq!(s, synth_sync_features(&spec(0, &[4.0]), 8, 16, 5).unwrap());
    }

    #[test]
    fn text_table() {
        let enc = TextLabelEncoder::new(4, 16, 0);
        assert_eq!(enc.encode(2).unwrap(), enc.encode(2).unwrap());
        assert_ne!(enc.encode(1).unwrap(), enc.encode(2).unwrap());
        assert!(matches!(enc.encode(4), Err(Error::Range(_))));
    }

    #[test]
    fn event_times_validated() {
        assert!(EventSpec::new(0, vec![8.0], 8.0).is_err());
        assert!(EventSpec::new(0, vec![-0.1], 8.0).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let text = "# comment\n2 0.5,1.25\n0\n3 -\n";
        let specs = parse_event_manifest(text, 8.0).unwrap();
        assert_eq!(specs.len(), 3);
        assert_eq!(specs[0].event_times, vec![0.5, 1.25]);
        assert!(specs[1].event_times.is_empty());
        let lines: Vec<String> = specs.iter().map(EventSpec::to_manifest_line).collect();
        assert_eq!(lines, vec!["2 0.5,1.25", "0", "3"]);
        assert!(parse_event_manifest("x 1.0", 8.0).is_err());
        assert!(parse_event_manifest("1 9.0", 8.0).is_err());
    }

    #[test]
    fn nearest_upsampling() {
        assert_eq!(nearest_indices(4, 8), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(nearest_indices(8, 8), (0..8).collect::<Vec<_>>());
        for (src, dst) in [(3, 7), (8, 32), (192, 640), (5, 5)] {
            let idx = nearest_indices(src, dst);
            assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            let mut seen = vec![false; src];
            idx.iter().for_each(|&i| seen[i] = true);
            assert!(seen.iter().all(|&s| s), "{src}->{dst}");
        }
    }

    fn assembled(sync: Tensor, tokens: usize) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let visual = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let text = tape.leaf(Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap());
        let t_emb = tape.leaf(Tensor::new(&[1, 2], vec![-1.0, 1.0]).unwrap());
        let sync = tape.leaf(sync);
        let a = assemble_conditions(&mut tape, visual, text, sync, t_emb, tokens).unwrap();
        (tape.value(a.c_g).clone(), tape.value(a.c_e).clone())
    }

    #[test]
    fn assembly() {
        let (c_g, c_e) = assembled(Tensor::zeros(&[4, 2]), 8);
        assert_eq!(c_g.data(), &[1.5, 4.5]);
        for r in 0..8 {
            assert_eq!(c_e.row(r), c_g.data());
        }
        let sync = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let (c_g, c_e) = assembled(sync.clone(), 3);
        for r in 0..3 {
            let want: Vec<f64> = c_g.data().iter().zip(sync.row(r)).map(|(a, b)| a + b).collect();
            assert_eq!(c_e.row(r), want.as_slice());
        }
    }

    #[test]
    fn dropout_rates() {
        let b = ConditionBundle::synthesize(&spec(1, &[1.0]), &ConditioningConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = drop_conditions(&b, &mut rng, 1.0, 1.0).unwrap();
        assert!(all.visual_null && all.text_null);
        assert_eq!(drop_conditions(&b, &mut rng, 0.0, 0.0).unwrap(), b);

        let trials = 100_000;
        let (mut v, mut t) = (0, 0);
        for _ in 0..trials {
            let d = drop_conditions(&b, &mut rng, 0.1, 0.1).unwrap();
            v += d.visual_null as usize;
            t += d.text_null as usize;
        }
        assert!((v as f64 / trials as f64 - 0.1).abs() < 0.005);
        assert!((t as f64 / trials as f64 - 0.1).abs() < 0.005);
        assert!(b.text_only().visual_null && !b.text_only().text_null);
    }
}
