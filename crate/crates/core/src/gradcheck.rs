//! Finite-difference verification of the full model's loss gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionBundle, EventSpec};
use crate::error::Result;
use crate::flow::LossMode;
use crate::model::{Mmdit, ModelConfig};
use crate::numerics::{relative_error, Tape, Tensor};
use crate::train::{flow_loss_on, item_gradients};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub tokens: usize,
    pub h: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d: 16,
                heads: 2,
                l_joint: 1,
                l_fused: 1,
                patch: 4,
                ..ModelConfig::default()
            },
            tokens: 8,
            // The summed loss is O(10-100), so at 1e-5 cancellation error in
            // (up - down) reaches 1e-3 relative on the smallest gradients.
            h: 1e-4,
            floor: 1e-6,
            tolerance: 1e-3,
            seed: 0,
            loss_mode: LossMode::VLoss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_entry: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

struct Probe {
    x0: Tensor,
    x1: Tensor,
    t: f64,
    bundle: ConditionBundle,
}

/// A model with every parameter randomized (gates and nulls included) and two
/// items, the second with all conditions nulled.
fn setup(cfg: &GradcheckConfig) -> Result<(Mmdit, Vec<Probe>)> {
    let mut model = Mmdit::init(cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6164);
    for t in model.params_mut().tensors_mut() {
        let fan = t.shape()[0].max(1) as f64;
        *t = Tensor::randn(t.shape(), 0.5 / fan.sqrt(), &mut rng);
    }
    let shape = [cfg.tokens, cfg.model.patch];
    let mut probes = Vec::new();
    for (i, t) in [0.3, 0.7].into_iter().enumerate() {
        let spec = EventSpec::new(i % cfg.model.cond.classes, vec![0.25 + 0.5 * i as f64], 1.0)?;
        let bundle = ConditionBundle::synthesize(&spec, &cfg.model.cond)?;
        probes.push(Probe {
            x0: Tensor::randn(&shape, 1.0, &mut rng),
            x1: Tensor::randn(&shape, 1.0, &mut rng),
            t,
            bundle: if i == 1 { bundle.nulled() } else { bundle },
        });
    }
    Ok((model, probes))
}

fn total_loss(model: &Mmdit, probes: &[Probe], mode: LossMode) -> Result<f64> {
    let mut sum = 0.0;
    for p in probes {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let l = flow_loss_on(&mut tape, model, &vars, &p.x0, &p.x1, p.t, &p.bundle, mode)?;
        sum += tape.value(l).item();
    }
    Ok(sum)
}

/// Compares analytic and central-difference gradients for every parameter.
pub fn gradcheck_model(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    gradcheck_with(cfg, |_, _| {})
}

/// As [`gradcheck_model`], with `tamper(name, grad)` applied to each analytic
/// gradient before comparison. A corrupted gradient must make the check fail.
pub fn gradcheck_with(cfg: &GradcheckConfig, mut tamper: impl FnMut(&str, &mut Tensor)) -> Result<GradcheckReport> {
    let (mut model, probes) = setup(cfg)?;
    let mut analytic: Vec<Tensor> = model.params().tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for p in &probes {
        let (_, g) = item_gradients(&model, &p.x0, &p.x1, p.t, &p.bundle, cfg.loss_mode)?;
        for (a, gi) in analytic.iter_mut().zip(&g) {
            *a = a.add(gi)?;
        }
    }
    let names: Vec<String> = model.params().names().to_vec();
    for (name, g) in names.iter().zip(analytic.iter_mut()) {
        tamper(name, g);
    }

    let mut groups: Vec<GroupReport> = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let group = name
            .strip_suffix(".w")
            .or_else(|| name.strip_suffix(".b"))
            .unwrap_or(name)
            .to_string();
        let n = model.params().tensors()[i].len();
        let mut worst = (0.0f64, 0usize);
        for j in 0..n {
            let orig = model.params().tensors()[i].data()[j];
            model.params_mut().tensors_mut()[i].data_mut()[j] = orig + cfg.h;
            let up = total_loss(&model, &probes, cfg.loss_mode)?;
            model.params_mut().tensors_mut()[i].data_mut()[j] = orig - cfg.h;
            let down = total_loss(&model, &probes, cfg.loss_mode)?;
            model.params_mut().tensors_mut()[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * cfg.h);
            let err = relative_error(analytic[i].data()[j], fd, cfg.floor);
            if err > worst.0 || err.is_nan() {
                worst = (err, j);
            }
        }
        let entry = format!("{name}[{}]", worst.1);
        match groups.last_mut() {
            Some(g) if g.group == group => {
                g.entries += n;
                if worst.0 > g.max_rel_err || worst.0.is_nan() {
                    g.max_rel_err = worst.0;
                    g.worst_entry = entry;
                }
            }
            _ => groups.push(GroupReport { group, entries: n, max_rel_err: worst.0, worst_entry: entry }),
        }
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
    Ok(GradcheckReport {
        passed: max_rel_err < cfg.tolerance,
        groups,
        max_rel_err,
        tolerance: cfg.tolerance,
    })
}
