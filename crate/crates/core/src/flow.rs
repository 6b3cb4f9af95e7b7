//! Flow-matching math: the linear path, prediction conversions, losses,
//! timestep sampling and the guided Euler sampler.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Floor on `1 - t` wherever it divides.
pub const ONE_MINUS_T_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    VLoss,
    XLoss,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v_loss" => Ok(Self::VLoss),
            "x_loss" => Ok(Self::XLoss),
            other => Err(Error::Config(format!("unknown loss mode `{other}`"))),
        }
    }
}

/// One training draw along the path.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub x_t: Tensor,
}

impl FlowSample {
    pub fn new(x0: Tensor, x1: Tensor, t: f64) -> Result<Self> {
        let x_t = interpolate(&x0, &x1, t)?;
        Ok(Self { x0, x1, t, x_t })
    }
}

/// `(1 - t)·x0 + t·x1`
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("t = {t} outside [0, 1]")));
    }
    x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)
}

/// `x1 - x0`
pub fn target_velocity(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    x1.sub(x0)
}

/// `(x̂1 - x_t) / max(1 - t, eps)`
pub fn recover_velocity(x_hat1: &Tensor, x_t: &Tensor, t: f64, eps: f64) -> Result<Tensor> {
    let denom = (1.0 - t).max(eps);
    x_hat1.zip_map(x_t, |a, b| (a - b) / denom)
}

/// Per-sample weight applied to `mean((x̂1 - x1)²)`.
pub fn loss_weight(t: f64, mode: LossMode) -> f64 {
    match mode {
        LossMode::XLoss => 1.0,
        LossMode::VLoss => {
            let d = (1.0 - t).max(ONE_MINUS_T_FLOOR);
            1.0 / (d * d)
        }
    }
}

/// v-loss is `mean((x̂1 - x1)²) / (1 - t)²`; x-loss drops the weight.
pub fn loss(x_hat1: &Tensor, x1: &Tensor, t: f64, mode: LossMode) -> Result<f64> {
    let sq = x_hat1.zip_map(x1, |a, b| (a - b) * (a - b))?;
    Ok(sq.mean() * loss_weight(t, mode))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepConfig {
    /// Logit-normal location.
    pub location: f64,
    /// Logit-normal scale.
    pub scale: f64,
    /// Noise shift `s`; 1 disables it.
    pub shift: f64,
}

impl Default for TimestepConfig {
    fn default() -> Self {
        Self {
            location: 0.0,
            scale: 1.0,
            shift: 1.0,
        }
    }
}

impl TimestepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !(self.shift >= 1.0) {
            return Err(Error::Config(format!(
                "timestep scale must be > 0 and shift >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `t / (t + s·(1 - t))`
pub fn shift_timestep(t: f64, shift: f64) -> f64 {
    if shift == 1.0 {
        return t;
    }
    t / (t + shift * (1.0 - t))
}

pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, cfg: &TimestepConfig) -> f64 {
    let z = Normal::new(cfg.location, cfg.scale)
        .expect("validated scale")
        .sample(rng);
    let t = 1.0 / (1.0 + (-z).exp());
    shift_timestep(t, cfg.shift).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// `(1 + w)·v_cond - w·v_uncond`
pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if w < 0.0 {
        return Err(Error::Range(format!("guidance scale {w} < 0")));
    }
    v_cond.zip_map(v_uncond, |c, u| (1.0 + w) * c - w * u)
}

/// What a network emits for a noisy input.
#[derive(Debug, Clone)]
pub enum Prediction {
    /// Clean-signal estimate `x̂1`.
    Clean(Tensor),
    Velocity(Tensor),
}

impl Prediction {
    pub fn velocity(self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        match self {
            Prediction::Clean(x) => recover_velocity(&x, x_t, t, ONE_MINUS_T_FLOOR),
            Prediction::Velocity(v) => Ok(v),
        }
    }

    pub fn clean(self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        match self {
            Prediction::Clean(x) => Ok(x),
            Prediction::Velocity(v) => x_t.zip_map(&v, |x, v| x + (1.0 - t) * v),
        }
    }
}

/// Anything the sampler can integrate.
pub trait FlowModel {
    type Cond;

    fn predict(&self, x_t: &Tensor, t: f64, cond: &Self::Cond) -> Result<Prediction>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub one_minus_t_floor: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 4.5,
            one_minus_t_floor: ONE_MINUS_T_FLOOR,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config(format!("cfg scale {} < 0", self.cfg_scale)));
        }
        Ok(())
    }
}

/// Integrates from Gaussian noise of `shape` to data with guided Euler steps on `t_i = i/N`.
pub fn euler_sample<M, R>(
    model: &M,
    cond: &M::Cond,
    null_cond: &M::Cond,
    cfg: &SamplerConfig,
    shape: &[usize],
    rng: &mut R,
) -> Result<Tensor>
where
    M: FlowModel,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let n = shape.iter().product();
    let init = Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())?;
    euler_integrate(model, cond, null_cond, cfg, init)
}

/// Euler integration from a given starting point.
pub fn euler_integrate<M: FlowModel>(
    model: &M,
    cond: &M::Cond,
    null_cond: &M::Cond,
    cfg: &SamplerConfig,
    init: Tensor,
) -> Result<Tensor> {
    cfg.validate()?;
    let dt = 1.0 / cfg.steps as f64;
    let mut x = init;
    for i in 0..cfg.steps {
        let t = i as f64 / cfg.steps as f64;
        let p_cond = model.predict(&x, t, cond)?;
        let p_uncond = model.predict(&x, t, null_cond)?;
        if 1.0 - t < cfg.one_minus_t_floor {
            // Too close to the data end to divide by 1 - t; jump to the guided clean estimate.
            let c = p_cond.clean(&x, t)?;
            let u = p_uncond.clean(&x, t)?;
            x = cfg_velocity(&c, &u, cfg.cfg_scale)?;
            break;
        }
        let v = cfg_velocity(
            &p_cond.velocity(&x, t)?,
            &p_uncond.velocity(&x, t)?,
            cfg.cfg_scale,
        )?;
        x = x.zip_map(&v, |a, b| a + dt * b)?;
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite state at step {i}")));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = rand(&[4, 3], 1);
        let x1 = rand(&[4, 3], 2);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
        let z = Tensor::zeros(&[2]);
        let two = Tensor::full(&[2], 2.0);
        assert_eq!(interpolate(&z, &two, 0.5).unwrap().data(), &[1.0, 1.0]);
        let xt = interpolate(&x0, &x1, 0.3).unwrap();
        for ((a, b), c) in x0.data().iter().zip(x1.data()).zip(xt.data()) {
            assert!((0.7 * a + 0.3 * b - c).abs() < 1e-7);
        }
        assert!(interpolate(&x0, &Tensor::zeros(&[3, 4]), 0.5).is_err());
    }

    #[test]
    fn target_velocity_cases() {
        let x = rand(&[3], 4);
        assert!(target_velocity(&x, &x).unwrap().data().iter().all(|&v| v == 0.0));
        let v = target_velocity(&Tensor::zeros(&[1]), &Tensor::full(&[1], 2.0)).unwrap();
        assert_eq!(v.data(), &[2.0]);
    }

    #[test]
    fn exact_prediction_recovers_target() {
        let x0 = rand(&[8, 4], 5);
        let x1 = rand(&[8, 4], 6);
        let v = target_velocity(&x0, &x1).unwrap();
        for t in [0.0, 0.25, 0.5, 0.9, 0.99] {
            let xt = interpolate(&x0, &x1, t).unwrap();
            let r = recover_velocity(&x1, &xt, t, ONE_MINUS_T_FLOOR).unwrap();
            assert!(r.max_abs_diff(&v) < 1e-5, "t = {t}");
        }
        let xt = interpolate(&x0, &x1, 0.4).unwrap();
        let r = recover_velocity(&xt, &xt, 0.4, ONE_MINUS_T_FLOOR).unwrap();
        assert!(r.data().iter().all(|&x| x == 0.0));
        let r = recover_velocity(&x1, &x0, 1.0, ONE_MINUS_T_FLOOR).unwrap();
        assert!(r.is_finite());
        assert!((r.data()[0] - (x1.data()[0] - x0.data()[0]) / 1e-5).abs() < 1e-3);
    }

    #[test]
    fn loss_values() {
        let x1 = rand(&[4, 4], 7);
        assert_eq!(loss(&x1, &x1, 0.3, LossMode::VLoss).unwrap(), 0.0);
        assert_eq!(loss(&x1, &x1, 0.3, LossMode::XLoss).unwrap(), 0.0);
        let off = x1.map(|v| v + 1.0);
        assert!((loss(&off, &x1, 0.5, LossMode::XLoss).unwrap() - 1.0).abs() < 1e-12);
        assert!((loss(&off, &x1, 0.5, LossMode::VLoss).unwrap() - 4.0).abs() < 1e-12);
        let pred = rand(&[4, 4], 8);
        for t in [0.1, 0.5, 0.77] {
            let v = loss(&pred, &x1, t, LossMode::VLoss).unwrap();
            let x = loss(&pred, &x1, t, LossMode::XLoss).unwrap();
            assert!((v / x - 1.0 / ((1.0 - t) * (1.0 - t))).abs() < 1e-6);
        }
    }

    #[test]
    fn v_loss_matches_velocity_mse() {
        let x0 = rand(&[6, 2], 9);
        let x1 = rand(&[6, 2], 10);
        let pred = rand(&[6, 2], 11);
        let t = 0.35;
        let xt = interpolate(&x0, &x1, t).unwrap();
        let v_hat = recover_velocity(&pred, &xt, t, ONE_MINUS_T_FLOOR).unwrap();
        let v_star = recover_velocity(&x1, &xt, t, ONE_MINUS_T_FLOOR).unwrap();
        let mse = v_hat
            .zip_map(&v_star, |a, b| (a - b) * (a - b))
            .unwrap()
            .mean();
        assert!((mse - loss(&pred, &x1, t, LossMode::VLoss).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn noise_shift() {
        assert_eq!(shift_timestep(0.37, 1.0), 0.37);
        assert_eq!(shift_timestep(0.5, 3.0), 0.25);
        for t in [0.1, 0.5, 0.9] {
            let mut prev = t;
            for s in [1.0, 1.5, 2.0, 3.0, 5.0, 10.0] {
                let ts = shift_timestep(t, s);
                assert!(ts <= prev);
                prev = ts;
            }
        }
    }

    #[test]
    fn timestep_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = TimestepConfig::default();
        let mut ts: Vec<f64> = (0..100_000).map(|_| sample_timestep(&mut rng, &cfg)).collect();
        assert!(ts.iter().all(|&t| t > 0.0 && t < 1.0));
        ts.sort_by(f64::total_cmp);
        assert!((ts[50_000] - 0.5).abs() < 0.01);
    }

    #[test]
    fn cfg_combination() {
        let c = Tensor::full(&[2], 2.0);
        let u = Tensor::full(&[2], 1.0);
        assert_eq!(cfg_velocity(&c, &u, 0.0).unwrap(), c);
        assert_eq!(cfg_velocity(&c, &u, 0.5).unwrap().data(), &[2.5, 2.5]);
        for w in [0.0, 1.0, 4.5, 7.0] {
            assert_eq!(cfg_velocity(&c, &c, w).unwrap(), c);
        }
        assert!(cfg_velocity(&c, &Tensor::zeros(&[3]), 1.0).is_err());
    }

    /// Velocity field given in closed form, ignoring conditioning.
    struct Field<F: Fn(&Tensor, f64) -> Tensor>(F);

    impl<F: Fn(&Tensor, f64) -> Tensor> FlowModel for Field<F> {
        type Cond = ();
        fn predict(&self, x: &Tensor, t: f64, _: &()) -> Result<Prediction> {
            Ok(Prediction::Velocity((self.0)(x, t)))
        }
    }

    #[test]
    fn constant_field_is_exact() {
        let a = Tensor::new(&[3], vec![0.5, -1.25, 2.0]).unwrap();
        let field = Field(|x: &Tensor, _| a.clone().reshape(x.shape()).unwrap());
        let init = Tensor::new(&[3], vec![1.0, 0.0, -0.5]).unwrap();
        for steps in [1, 2, 4, 8, 64] {
            let cfg = SamplerConfig { steps, cfg_scale: 4.5, ..Default::default() };
            let out = euler_integrate(&field, &(), &(), &cfg, init.clone()).unwrap();
            assert_eq!(out, init.add(&a).unwrap());
        }
        for steps in [3, 7, 50] {
            let cfg = SamplerConfig { steps, ..Default::default() };
            let out = euler_integrate(&field, &(), &(), &cfg, init.clone()).unwrap();
            assert!(out.max_abs_diff(&init.add(&a).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn decay_field_follows_euler_recurrence() {
        let field = Field(|x: &Tensor, _| x.scale(-1.0));
        let init = rand(&[5], 12);
        for steps in [10, 100] {
            let cfg = SamplerConfig { steps, cfg_scale: 0.0, ..Default::default() };
            let out = euler_integrate(&field, &(), &(), &cfg, init.clone()).unwrap();
            let want = init.scale((1.0 - 1.0 / steps as f64).powi(steps as i32));
            assert!(out.max_abs_diff(&want) < 1e-9);
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let field = Field(|x: &Tensor, t| x.scale(-t));
        let cfg = SamplerConfig::default();
        let a = euler_sample(&field, &(), &(), &cfg, &[4, 2], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = euler_sample(&field, &(), &(), &cfg, &[4, 2], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn final_step_jumps_to_clean_estimate() {
        struct Const(Tensor);
        impl FlowModel for Const {
            type Cond = ();
            fn predict(&self, _: &Tensor, _: f64, _: &()) -> Result<Prediction> {
                Ok(Prediction::Clean(self.0.clone()))
            }
        }
        let target = Tensor::new(&[2], vec![0.25, -0.75]).unwrap();
        let cfg = SamplerConfig { steps: 1, cfg_scale: 2.0, one_minus_t_floor: 2.0 };
        let out = euler_integrate(&Const(target.clone()), &(), &(), &cfg, Tensor::zeros(&[2])).unwrap();
        assert_eq!(out, target);
    }
}
