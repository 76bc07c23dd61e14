//! Noise schedules, the closed-form forward process, deterministic DDIM
//! sampling/inversion and classifier-free guidance.
//!
//! Latents are flat `f64` buffers (frame-major `F×C×H×W`). Timesteps are
//! 1-based; `alpha_bar(0) = 1` by convention so a plan can end at the clean
//! latent.

use crate::error::{invalid, Error, Result};

pub const DEFAULT_T_MAX: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;
pub const DEFAULT_INFERENCE_STEPS: usize = 50;
/// Guidance used for editing; 10.0 and 25.0 are exposed as presets.
pub const DEFAULT_GUIDANCE: f64 = 7.5;
pub const GUIDANCE_PRESETS: [f64; 3] = [7.5, 10.0, 25.0];

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_cum: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("schedule needs at least one step"));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(invalid("every beta must lie in (0, 1)"));
        }
        let mut alpha_cum = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_cum.push(acc);
        }
        Ok(Self { betas, alpha_cum })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// β_t for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t = Π_{i≤t}(1 − β_i), with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_cum[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_cum(&self) -> &[f64] {
        &self.alpha_cum
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(invalid(format!("timestep {t} outside 0..={}", self.t_max())));
        }
        Ok(())
    }
}

/// Betas interpolated linearly from `beta_start` to `beta_end`, endpoints included.
pub fn linear_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(invalid("t_max must be positive"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas = if t_max == 1 {
        vec![beta_start]
    } else {
        (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// Strictly increasing inference timesteps τ_1 < … < τ_S; τ_0 = 0 is implicit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<usize>,
}

impl TimestepPlan {
    pub fn new(steps: Vec<usize>, t_max: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(invalid("plan needs at least one step"));
        }
        if steps[0] == 0 || steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("plan steps must be strictly increasing and >= 1"));
        }
        if *steps.last().unwrap() > t_max {
            return Err(invalid(format!("plan exceeds t_max = {t_max}")));
        }
        Ok(Self { steps })
    }

    /// `count` uniformly spaced steps ending exactly at `t_max`.
    pub fn uniform(t_max: usize, count: usize) -> Result<Self> {
        if count == 0 || count > t_max {
            return Err(invalid(format!("need 1 <= steps <= t_max, got {count}")));
        }
        let steps = (1..=count)
            .map(|k| ((k * t_max) as f64 / count as f64).round() as usize)
            .collect();
        Self::new(steps, t_max)
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(t_prev, t)` pairs from the clean end upward: `(τ_0, τ_1), …, (τ_{S-1}, τ_S)`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut prev = 0;
        self.steps
            .iter()
            .map(|&t| {
                let p = (prev, t);
                prev = t;
                p
            })
            .collect()
    }
}

fn check_len(a: &[f64], b: &[f64], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            left: (a.len(), 1),
            right: (b.len(), 1),
        });
    }
    Ok(())
}

/// `sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·eps`.
pub fn forward_diffuse(z0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len(z0, eps, "forward_diffuse")?;
    if t == 0 {
        return Err(invalid("forward_diffuse needs t >= 1"));
    }
    sched.check_t(t)?;
    let a = sched.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| sa * z + sn * e).collect())
}

/// One stochastic transition `z_t = sqrt(1 − β_t)·z_{t−1} + sqrt(β_t)·eps`.
pub fn forward_step(z_prev: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len(z_prev, eps, "forward_step")?;
    if t == 0 {
        return Err(invalid("forward_step needs t >= 1"));
    }
    sched.check_t(t)?;
    let b = sched.beta(t);
    let (sa, sn) = ((1.0 - b).sqrt(), b.sqrt());
    Ok(z_prev.iter().zip(eps).map(|(z, e)| sa * z + sn * e).collect())
}

fn check_pair(t_prev: usize, t: usize, sched: &NoiseSchedule) -> Result<()> {
    if t_prev >= t {
        return Err(invalid(format!("need t_prev < t, got {t_prev} >= {t}")));
    }
    sched.check_t(t)
}

/// Deterministic DDIM update from `t` down to `t_prev`.
pub fn ddim_sample_step(
    z_t: &[f64],
    eps_pred: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_len(z_t, eps_pred, "ddim_sample_step")?;
    check_pair(t_prev, t, sched)?;
    let (a_t, a_p) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let (sa_t, sn_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (sa_p, sn_p) = (a_p.sqrt(), (1.0 - a_p).sqrt());
    Ok(z_t
        .iter()
        .zip(eps_pred)
        .map(|(z, e)| sa_p * ((z - sn_t * e) / sa_t) + sn_p * e)
        .collect())
}

/// Exact algebraic inverse of [`ddim_sample_step`] for a shared `eps_pred`.
pub fn ddim_invert_step(
    z_prev: &[f64],
    eps_pred: &[f64],
    t_prev: usize,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_len(z_prev, eps_pred, "ddim_invert_step")?;
    check_pair(t_prev, t, sched)?;
    let (a_t, a_p) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let (sa_t, sn_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (sa_p, sn_p) = (a_p.sqrt(), (1.0 - a_p).sqrt());
    Ok(z_prev
        .iter()
        .zip(eps_pred)
        .map(|(z, e)| sa_t * ((z - sn_p * e) / sa_p) + sn_t * e)
        .collect())
}

/// `eps_uncond + s_cfg·(eps_cond − eps_uncond)`.
pub fn cfg_mix(eps_uncond: &[f64], eps_cond: &[f64], s_cfg: f64) -> Result<Vec<f64>> {
    check_len(eps_uncond, eps_cond, "cfg_mix")?;
    if s_cfg == 1.0 {
        return Ok(eps_cond.to_vec());
    }
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(u, c)| u + s_cfg * (c - u))
        .collect())
}

/// An ε-prediction network.
pub trait NoisePredictor {
    type Cond;

    fn predict_noise(&self, z_t: &[f64], t: usize, cond: &Self::Cond) -> Result<Vec<f64>>;
}

fn predict<M: NoisePredictor>(model: &M, z: &[f64], t: usize, cond: &M::Cond) -> Result<Vec<f64>> {
    let eps = model
        .predict_noise(z, t, cond)
        .map_err(|e| Error::Model { t, source: Box::new(e) })?;
    check_len(z, &eps, "predict_noise")?;
    Ok(eps)
}

/// Runs the plan from τ_S down to τ_0 with guidance `s_cfg`.
///
/// At `s_cfg = 1` the unconditional branch is never evaluated.
pub fn ddim_sample<M: NoisePredictor>(
    model: &M,
    z_t_max: &[f64],
    cond: &M::Cond,
    uncond: &M::Cond,
    plan: &TimestepPlan,
    s_cfg: f64,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let mut z = z_t_max.to_vec();
    for &(t_prev, t) in plan.pairs().iter().rev() {
        let eps_c = predict(model, &z, t, cond)?;
        let eps = if s_cfg == 1.0 {
            eps_c
        } else {
            let eps_u = predict(model, &z, t, uncond)?;
            cfg_mix(&eps_u, &eps_c, s_cfg)?
        };
        z = ddim_sample_step(&z, &eps, t, t_prev, sched)?;
    }
    Ok(z)
}

/// Maps a clean latent to τ_S with conditional predictions only.
///
/// Each step from `t_prev` to `t` evaluates the model at the current latent
/// and the target timestep `t`, the same timestep the matching sampling step
/// uses, so the two loops are exact inverses for a state-independent model.
pub fn ddim_invert<M: NoisePredictor>(
    model: &M,
    z0: &[f64],
    cond: &M::Cond,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let mut z = z0.to_vec();
    for (t_prev, t) in plan.pairs() {
        let eps = predict(model, &z, t, cond)?;
        z = ddim_invert_step(&z, &eps, t_prev, t, sched)?;
    }
    Ok(z)
}
