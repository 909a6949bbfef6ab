//! Noise schedules and x0-parameterized samplers.
//!
//! Time steps are 1-based: `t ∈ {1..T}`, with `ᾱ₀ = 1` implied.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::Tensor;

pub const DEFAULT_T: usize = 1000;
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;
pub const LINEAR_BETA: (f64, f64) = (1e-4, 2e-2);
/// Lower bound on `√(1−ᾱ)` when converting x̂₀ to ε̂.
pub const EPS_DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            _ => Err(Error::InvalidArgument(format!("unknown schedule {s:?}"))),
        }
    }
}

/// β, α and ᾱ tables for `T` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(t_max: usize, kind: ScheduleKind) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::InvalidArgument("T must be at least 1".into()));
        }
        let beta = match kind {
            ScheduleKind::Linear => {
                let (lo, hi) = LINEAR_BETA;
                (0..t_max)
                    .map(|i| {
                        if t_max == 1 {
                            lo
                        } else {
                            lo + (hi - lo) * i as f64 / (t_max - 1) as f64
                        }
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = COSINE_OFFSET;
                let f = |t: f64| ((t / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (1..=t_max)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(f64::MIN_POSITIVE, MAX_BETA))
                    .collect()
            }
        };
        Self::from_betas(beta)
    }

    /// Builds a schedule from an explicit β table.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidConfig("every β must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱₜ`, with `ᾱ₀ = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::InvalidArgument(format!("t = {t} outside 1..={}", self.t_max())));
        }
        Ok(())
    }
}

pub fn make_schedule(t_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::new(t_max, kind)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `√ᾱₜ·x₀ + √(1−ᾱₜ)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    same_shape("q_sample", x0, noise)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(noise, |x, e| a * x + b * e))
}

/// The noise implied by a clean estimate: `(x_t − √ᾱₜ·x̂₀) / √(1−ᾱₜ)`.
pub fn x0_to_eps(x_t: &Tensor, x0_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    same_shape("x0_to_eps", x_t, x0_hat)?;
    let ab = sched.alpha_bar(t);
    let (a, d) = (ab.sqrt(), (1.0 - ab).sqrt().max(EPS_DENOM_FLOOR));
    Ok(x_t.zip_map(x0_hat, |x, x0| (x - a * x0) / d))
}

/// Noise scale of an ancestral step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DdpmVariance {
    /// `σₜ² = βₜ`.
    #[default]
    Beta,
    /// `σₜ² = β̃ₜ = βₜ(1−ᾱₜ₋₁)/(1−ᾱₜ)`, the true posterior variance.
    Posterior,
}

/// One ancestral step from `x_t` to `x_{t−1}` given a clean estimate.
///
/// No noise is added at `t = 1` or when `noise` is `None`.
pub fn ddpm_step(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
    variance: DdpmVariance,
) -> Result<Tensor> {
    let eps = x0_to_eps(x_t, x0_hat, t, sched)?;
    let (a, b, ab) = (sched.alpha(t), sched.beta(t), sched.alpha_bar(t));
    let c = b / (1.0 - ab).sqrt().max(EPS_DENOM_FLOOR);
    let inv = 1.0 / a.sqrt();
    let mean = x_t.zip_map(&eps, |x, e| inv * (x - c * e));
    match noise {
        Some(z) if t > 1 => {
            same_shape("ddpm_step", x_t, z)?;
            let var = match variance {
                DdpmVariance::Beta => b,
                DdpmVariance::Posterior => b * (1.0 - sched.alpha_bar(t - 1)) / (1.0 - ab),
            };
            let s = var.sqrt();
            Ok(mean.zip_map(z, |m, z| m + s * z))
        }
        _ => Ok(mean),
    }
}

/// Decreasing subsequence of time steps plus the DDIM stochasticity η.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdimPlan {
    pub sub_steps: Vec<usize>,
    pub eta: f64,
}

impl DdimPlan {
    pub fn new(sub_steps: Vec<usize>, eta: f64, t_max: usize) -> Result<Self> {
        if sub_steps.is_empty() {
            return Err(Error::InvalidConfig("DDIM plan needs at least one step".into()));
        }
        if sub_steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidConfig(format!("DDIM steps must strictly decrease: {sub_steps:?}")));
        }
        if sub_steps[0] > t_max || *sub_steps.last().unwrap() == 0 {
            return Err(Error::InvalidConfig(format!("DDIM steps must lie in 1..={t_max}")));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidConfig(format!("eta {eta} outside [0, 1]")));
        }
        Ok(DdimPlan { sub_steps, eta })
    }

    /// `k` steps evenly spaced from `T` down, e.g. T=1000, k=4 gives
    /// 1000, 750, 500, 250.
    pub fn uniform(t_max: usize, k: usize, eta: f64) -> Result<Self> {
        if k == 0 || k > t_max {
            return Err(Error::InvalidConfig(format!("cannot take {k} steps from T = {t_max}")));
        }
        let steps = (0..k).map(|i| ((k - i) * t_max).div_ceil(k)).collect();
        Self::new(steps, eta, t_max)
    }

    pub fn len(&self) -> usize {
        self.sub_steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sub_steps.is_empty()
    }
}

/// Anything that maps `(x_t, t, cond)` to a clean-signal estimate.
pub trait Denoiser {
    fn predict_x0(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, usize, &Tensor) -> Result<Tensor>,
{
    fn predict_x0(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        self(x_t, t, cond)
    }
}

/// Deterministic (η = 0) or stochastic DDIM sampling; returns x̂₀ from the
/// last step of the plan.
pub fn ddim_sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    cond: &Tensor,
    plan: &DdimPlan,
    sched: &NoiseSchedule,
    init_noise: Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let mut x = init_noise;
    for (i, &t) in plan.sub_steps.iter().enumerate() {
        sched.check_t(t)?;
        let x0 = denoiser.predict_x0(&x, t, cond)?;
        same_shape("ddim_sample", &x, &x0)?;
        if !x0.is_finite() {
            return Err(Error::NonFiniteValue("ddim_sample"));
        }
        let Some(&tn) = plan.sub_steps.get(i + 1) else {
            return Ok(x0);
        };
        let eps = x0_to_eps(&x, &x0, t, sched)?;
        let (ab, abn) = (sched.alpha_bar(t), sched.alpha_bar(tn));
        let sigma = plan.eta * ((1.0 - abn) / (1.0 - ab) * (1.0 - ab / abn)).max(0.0).sqrt();
        let (a, c) = (abn.sqrt(), (1.0 - abn - sigma * sigma).max(0.0).sqrt());
        let mut next = x0.zip_map(&eps, |x0, e| a * x0 + c * e);
        if sigma > 0.0 {
            let z = Tensor::randn(x.shape(), rng);
            next = next.zip_map(&z, |v, z| v + sigma * z);
        }
        x = next;
    }
    unreachable!("plan is non-empty")
}
