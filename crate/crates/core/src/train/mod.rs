//! Deterministic toy-scale training: AdamW with warmup, clipping, EMA and
//! condition dropout over the flow-matching loss.

mod optim;
mod toy;

pub use optim::{adamw_step, clip_grad_norm, ema_update, global_norm, lr_at, AdamState, AdamW};
pub use toy::{make_toy_dataset, prepare_items, ToyDatasetSpec, TrainItem};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::LiftConfig;
use crate::conditioning::{drop_conditions, ConditionBundle, ConditioningConfig};
use crate::error::{Error, Result};
use crate::flow::{interpolate, loss_weight, sample_timestep, LossMode, TimestepConfig};
use crate::model::{Checkpoint, Mmdit, ModelConfig, ParamStore, PredMode};
use crate::numerics::{Tape, Tensor, Var};

/// Everything a training run needs, as one flat key-value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // Model.
    pub d: usize,
    pub heads: usize,
    pub l_joint: usize,
    pub l_fused: usize,
    pub patch: usize,
    pub pred_mode: PredMode,
    pub rope_base: f64,
    pub mlp_ratio: usize,
    pub fused_rope: bool,
    // Conditioning.
    pub n_clip: usize,
    pub n_sync: usize,
    pub d_visual: usize,
    pub d_sync: usize,
    pub d_text: usize,
    pub feature_seed: u64,
    // Optimization.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub p_visual_drop: f64,
    pub p_text_drop: f64,
    pub t_location: f64,
    pub t_scale: f64,
    pub t_shift: f64,
    // Data.
    pub frequencies: Vec<f64>,
    pub tone_amplitude: f64,
    pub click_amplitude: f64,
    pub click_len: usize,
    pub max_events: usize,
    pub clip_len: f64,
    pub sample_rate: u32,
    pub dataset_size: usize,
    pub data_seed: u64,
    pub r_star: f64,
    pub s_a: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let data = ToyDatasetSpec::default();
        let lift = LiftConfig::default();
        let opt = AdamW::default();
        let ts = TimestepConfig::default();
        Self {
            d: m.d,
            heads: m.heads,
            l_joint: m.l_joint,
            l_fused: m.l_fused,
            patch: m.patch,
            pred_mode: m.pred_mode,
            rope_base: m.rope_base,
            mlp_ratio: m.mlp_ratio,
            fused_rope: m.fused_rope,
            n_clip: m.cond.n_clip,
            n_sync: m.cond.n_sync,
            d_visual: m.cond.d_visual,
            d_sync: m.cond.d_sync,
            d_text: m.cond.d_text,
            feature_seed: m.cond.feature_seed,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            adam_eps: opt.eps,
            weight_decay: opt.weight_decay,
            warmup_steps: 100,
            clip_norm: 1.0,
            ema_decay: 0.9999,
            batch_size: 16,
            steps: 2000,
            seed: 0,
            loss_mode: LossMode::VLoss,
            p_visual_drop: 0.1,
            p_text_drop: 0.1,
            t_location: ts.location,
            t_scale: ts.scale,
            t_shift: ts.shift,
            frequencies: data.frequencies,
            tone_amplitude: data.tone_amplitude,
            click_amplitude: data.click_amplitude,
            click_len: data.click_len,
            max_events: data.max_events,
            clip_len: data.clip_len,
            sample_rate: data.sample_rate,
            dataset_size: data.size,
            data_seed: 1,
            r_star: lift.r_star,
            s_a: lift.s_a,
        }
    }
}

impl TrainConfig {
    /// Settings used for the desk-scale tone run. Learning rate and EMA decay
    /// are raised from the large-scale values so that 2000 steps suffice.
    pub fn toy() -> Self {
        Self {
            lr: 2e-3,
            ema_decay: 0.995,
            warmup_steps: 100,
            ..Self::default()
        }
    }

    /// Parses a flat TOML table and applies `key=value` overrides on top.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            table.insert(key.trim().to_string(), parse_override_value(value.trim()));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.dataset().validate()?;
        self.lift().validate()?;
        self.timesteps().validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("need lr > 0 and betas in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_visual_drop) || !(0.0..=1.0).contains(&self.p_text_drop) {
            return bad("drop probabilities must lie in [0, 1]");
        }
        if self.dataset().clip_samples() % self.patch != 0 {
            return bad("clip length must be a whole number of tokens");
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.heads,
            l_joint: self.l_joint,
            l_fused: self.l_fused,
            patch: self.patch,
            pred_mode: self.pred_mode,
            rope_base: self.rope_base,
            mlp_ratio: self.mlp_ratio,
            fused_rope: self.fused_rope,
            cond: ConditioningConfig {
                classes: self.frequencies.len(),
                n_clip: self.n_clip,
                n_sync: self.n_sync,
                d_visual: self.d_visual,
                d_sync: self.d_sync,
                d_text: self.d_text,
                feature_seed: self.feature_seed,
            },
        }
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn timesteps(&self) -> TimestepConfig {
        TimestepConfig {
            location: self.t_location,
            scale: self.t_scale,
            shift: self.t_shift,
        }
    }

    pub fn dataset(&self) -> ToyDatasetSpec {
        ToyDatasetSpec {
            frequencies: self.frequencies.clone(),
            tone_amplitude: self.tone_amplitude,
            click_amplitude: self.click_amplitude,
            click_len: self.click_len,
            max_events: self.max_events,
            clip_len: self.clip_len,
            sample_rate: self.sample_rate,
            size: self.dataset_size,
        }
    }

    pub fn lift(&self) -> LiftConfig {
        LiftConfig {
            r_star: self.r_star,
            s_a: self.s_a,
            ..LiftConfig::default()
        }
    }

    /// Builds the toy dataset and converts it to training items.
    pub fn items(&self) -> Result<Vec<TrainItem>> {
        let data = make_toy_dataset(&self.dataset(), self.data_seed)?;
        prepare_items(&data, &self.lift(), self.patch, &self.model().cond)
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Per-item training loss built on `tape`. With x-prediction the loss compares
/// `x̂1` against `x1` and applies the v-loss weight; with v-prediction it
/// compares against `x1 − x0` directly.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss_on(
    tape: &mut Tape,
    model: &Mmdit,
    vars: &[Var],
    x0: &Tensor,
    x1: &Tensor,
    t: f64,
    bundle: &ConditionBundle,
    mode: LossMode,
) -> Result<Var> {
    let xt = tape.leaf(interpolate(x0, x1, t)?);
    let out = model.forward_on(tape, vars, xt, bundle, t)?.output;
    let (target, weight) = match model.config().pred_mode {
        PredMode::XPred => (x1.clone(), loss_weight(t, mode)),
        PredMode::VPred => {
            let w = match mode {
                LossMode::VLoss => 1.0,
                LossMode::XLoss => (1.0 - t) * (1.0 - t),
            };
            (x1.sub(x0)?, w)
        }
    };
    let target = tape.leaf(target);
    let diff = tape.sub(out, target)?;
    let sq = tape.mul(diff, diff)?;
    let m = tape.mean(sq);
    Ok(tape.scale(m, weight))
}

/// Loss and parameter gradients for one item.
pub fn item_gradients(
    model: &Mmdit,
    x0: &Tensor,
    x1: &Tensor,
    t: f64,
    bundle: &ConditionBundle,
    mode: LossMode,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let loss = flow_loss_on(&mut tape, model, &vars, x0, x1, t, bundle, mode)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let gs = vars
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, gs))
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Mmdit,
    pub ema: ParamStore,
    pub adam: AdamState,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Mmdit) -> Self {
        Self {
            ema: model.params().clone(),
            adam: AdamState::zeros_like(model.params().tensors()),
            model,
            step: 0,
        }
    }

    pub fn ema_model(&self) -> Result<Mmdit> {
        Mmdit::from_params(*self.model.config(), self.ema.clone())
    }

    /// EMA weights for inference plus the live weights.
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.ema_model()?);
        ck.live = Some(self.model.params().clone());
        let m = &mut ck.meta;
        m.insert("step".into(), toml::Value::Integer(self.step as i64));
        m.insert("seed".into(), toml::Value::Integer(cfg.seed as i64));
        m.insert("sample_rate".into(), toml::Value::Integer(cfg.sample_rate as i64));
        m.insert("clip_samples".into(), toml::Value::Integer(cfg.dataset().clip_samples() as i64));
        m.insert("clip_len".into(), toml::Value::Float(cfg.clip_len));
        m.insert("s_a".into(), toml::Value::Float(cfg.s_a));
        m.insert("r_star".into(), toml::Value::Float(cfg.r_star));
        Ok(ck)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

struct Job {
    x0: Tensor,
    t: f64,
    bundle: ConditionBundle,
}

/// One optimizer step over `batch`. All randomness is drawn sequentially from
/// `rng` before gradients are computed, and per-item gradients are summed in
/// batch order, so the result does not depend on the thread count.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &[&TrainItem],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::pre("empty batch"));
    }
    let ts = cfg.timesteps();
    let jobs = batch
        .iter()
        .map(|item| {
            let x0 = Tensor::randn(item.x1.shape(), 1.0, rng);
            let t = sample_timestep(rng, &ts);
            let bundle = drop_conditions(&item.bundle, rng, cfg.p_visual_drop, cfg.p_text_drop)?;
            Ok(Job { x0, t, bundle })
        })
        .collect::<Result<Vec<_>>>()?;

    let model = &state.model;
    let results: Vec<Result<(f64, Vec<Tensor>)>> = jobs
        .par_iter()
        .zip(batch.par_iter())
        .map(|(job, item)| item_gradients(model, &job.x0, &item.x1, job.t, &job.bundle, cfg.loss_mode))
        .collect();

    let step = state.step + 1;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Tensor> = model.params().tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for r in results {
        let (l, g) = r?;
        loss += l * scale;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b * scale;
            }
        }
    }
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss or gradient at step {step}")));
    }

    let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm)?;
    let lr = lr_at(step, cfg.lr, cfg.warmup_steps);
    adamw_step(
        state.model.params_mut().tensors_mut(),
        &grads,
        &mut state.adam,
        &cfg.adamw(),
        lr,
        step,
    )?;
    ema_update(state.ema.tensors_mut(), state.model.params().tensors(), cfg.ema_decay)?;
    state.step = step;
    Ok(StepStats { step, lr, loss, grad_norm })
}

/// Full training run from a fresh initialization.
pub fn train(
    cfg: &TrainConfig,
    items: &[TrainItem],
    mut on_step: impl FnMut(&StepStats),
) -> Result<TrainState> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::pre("no training items"));
    }
    let mut state = TrainState::new(Mmdit::init(cfg.model(), cfg.seed)?);
    // Separate stream from the initializer so the two never share draws.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7472_6169_6e00));
    for _ in 0..cfg.steps {
        let batch: Vec<&TrainItem> = (0..cfg.batch_size)
            .map(|_| &items[rng.random_range(0..items.len())])
            .collect();
        let stats = train_step(&mut state, &batch, cfg, &mut rng)?;
        on_step(&stats);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encode_checkpoint;

    fn tiny() -> TrainConfig {
        TrainConfig {
            d: 16,
            heads: 2,
            l_fused: 1,
            dataset_size: 8,
            batch_size: 4,
            steps: 3,
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn config_roundtrip_and_overrides() {
        let cfg = TrainConfig::toy();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text, &[]).unwrap(), cfg);
        let o = TrainConfig::from_toml("", &["lr=0.5".into(), "loss_mode=x_loss".into(), "steps = 7".into()]).unwrap();
        assert_eq!((o.lr, o.loss_mode, o.steps), (0.5, LossMode::XLoss, 7));
        assert!(matches!(TrainConfig::from_toml("loss_mode = \"l1\"", &[]), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml("bogus = 1", &[]), Err(Error::Config(_))));
        assert!(TrainConfig::from_toml("ema_decay = 1.0", &[]).is_err());
        assert!(TrainConfig::from_toml("", &["novalue".into()]).is_err());
    }

    #[test]
    fn loss_is_finite_and_positive_at_init() {
        let cfg = tiny();
        let items = cfg.items().unwrap();
        let model = Mmdit::init(cfg.model(), 0).unwrap();
        let x0 = Tensor::randn(items[0].x1.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let (loss, grads) = item_gradients(&model, &x0, &items[0].x1, 0.4, &items[0].bundle, LossMode::VLoss).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(grads.len(), model.params().len());
    }

    #[test]
    fn full_dropout_trains_only_nulls() {
        let mut cfg = tiny();
        cfg.p_visual_drop = 1.0;
        cfg.p_text_drop = 1.0;
        let items = cfg.items().unwrap();
        let model = Mmdit::init(cfg.model(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::randn(items[0].x1.shape(), 1.0, &mut rng);
        let dropped = drop_conditions(&items[0].bundle, &mut rng, 1.0, 1.0).unwrap();
        let (_, grads) = item_gradients(&model, &x0, &items[0].x1, 0.5, &dropped, LossMode::VLoss).unwrap();
        let g = |name: &str| &grads[model.params().names().iter().position(|n| n == name).unwrap()];
        // Projections of the raw streams only see the (zero) nulls, never the features.
        assert!(g("null.text").sq_norm() > 0.0);
        assert!(g("text_proj.w").data().iter().all(|&x| x == 0.0));
        assert!(g("sync_proj.w").data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny();
        let items = cfg.items().unwrap();
        let mut a = Vec::new();
        let sa = train(&cfg, &items, |s| a.push(s.loss)).unwrap();
        let mut b = Vec::new();
        let sb = train(&cfg, &items, |s| b.push(s.loss)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let ca = encode_checkpoint(&sa.checkpoint(&cfg).unwrap()).unwrap();
        let cb = encode_checkpoint(&sb.checkpoint(&cfg).unwrap()).unwrap();
        assert_eq!(ca, cb);
        assert_ne!(sa.model.params(), &Mmdit::init(cfg.model(), cfg.seed).unwrap().params().clone());
        sa.ema.check_finite().unwrap();
    }
}
