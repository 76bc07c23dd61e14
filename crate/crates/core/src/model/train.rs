use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::denoiser::{clip_to_tokens, Role, ToyDenoiser, Tuning};
use crate::attention::QueryProjection;
use crate::datagen::{PromptTokens, VideoClip};
use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::spectral::DEFAULT_LAMBDA;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay to spectral shifts as well.
    pub decay_delta: bool,
    /// One optimizer step per epoch.
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_reg: f64,
    pub lora_rank: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-3,
            decay_delta: true,
            epochs: 200,
            batch_size: 1,
            lambda_reg: DEFAULT_LAMBDA,
            lora_rank: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Probability of replacing a prompt with the null prompt.
    pub prompt_dropout: f64,
    pub seed: u64,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 4,
            lr: 3e-3,
            weight_decay: 5e-3,
            prompt_dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
    pub mse: f64,
    pub reg: f64,
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("iteration,loss,mse_term,reg_term\n");
    for p in curve {
        out.push_str(&format!("{},{:e},{:e},{:e}\n", p.iteration, p.loss, p.mse, p.reg));
    }
    out
}

/// Loss terms and gradients of every tunable tensor, by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub mse: f64,
    pub reg: f64,
    pub grads: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    fn accumulate(&mut self, other: Gradients) {
        self.loss += other.loss;
        self.mse += other.mse;
        self.reg += other.reg;
        for (name, g) in other.grads {
            match self.grads.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.grads.insert(name, g);
                }
            }
        }
    }

    fn scale(&mut self, s: f64) {
        self.loss *= s;
        self.mse *= s;
        self.reg *= s;
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// `mean((ε̂ − ε)²) + λ·Σ σ_k δ_k²` and its exact gradient with respect to the
/// tensors `mode` trains.
#[allow(clippy::too_many_arguments)]
pub fn training_gradients(
    model: &ToyDenoiser,
    z0: &[f64],
    prompt: &PromptTokens,
    t: usize,
    eps: &[f64],
    lambda_reg: f64,
    mode: Tuning,
    sched: &NoiseSchedule,
) -> Result<Gradients> {
    let z_t = forward_diffuse(z0, t, eps, sched)?;
    let fwd = model.forward(&z_t, t, prompt, Some(mode))?;
    let pred = fwd.tape.value(fwd.output);
    let target = clip_to_tokens(eps, &model.config)?;
    let n = pred.data().len() as f64;
    let diff = pred.sub(&target)?;
    let mse = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    if !mse.is_finite() {
        return Err(Error::NonFinite("denoiser output".into()));
    }
    let mut tape_grads = fwd.tape.backward(fwd.output, diff.scale(2.0 / n))?;

    let queries: HashMap<String, &QueryProjection> = model.queries().into_iter().collect();
    let mut grads = BTreeMap::new();
    for (name, var) in &fwd.leaves {
        let Some(g) = tape_grads.take(*var) else { continue };
        match queries.get(name) {
            Some(QueryProjection::Dense(_)) | None => {
                grads.insert(name.clone(), g.into_vec());
            }
            Some(QueryProjection::Spectral(s)) => {
                grads.insert(format!("{name}.delta"), s.delta_gradient(&g)?);
            }
            Some(QueryProjection::Lora(l)) => {
                let (ga, gb) = l.gradients(&g)?;
                grads.insert(format!("{name}.A"), ga.into_vec());
                grads.insert(format!("{name}.B"), gb.into_vec());
            }
        }
    }

    let mut reg = 0.0;
    for (name, q) in &queries {
        if let QueryProjection::Spectral(s) = q {
            reg += s.regularizer();
            if lambda_reg != 0.0 && mode.trains(Role::Delta) {
                let g = grads
                    .entry(format!("{name}.delta"))
                    .or_insert_with(|| vec![0.0; s.rank()]);
                for (gi, r) in g.iter_mut().zip(s.regularizer_gradient()) {
                    *gi += lambda_reg * r;
                }
            }
        }
    }

    for (name, g) in &grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok(Gradients {
        loss: mse + lambda_reg * reg,
        mse,
        reg,
        grads,
    })
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_delta: bool,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64, decay_delta: bool) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            decay_delta,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_hyper(h: &TrainHyper) -> Self {
        Self::new(h.lr, h.beta1, h.beta2, h.eps, h.weight_decay, h.decay_delta)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every tensor `mode` trains; tensors absent from `grads` see a
    /// zero gradient.
    pub fn step(&mut self, model: &mut ToyDenoiser, grads: &BTreeMap<String, Vec<f64>>, mode: Tuning) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for t in model.tensors_mut() {
            if !mode.trains(t.role) {
                continue;
            }
            let g = grads.get(&t.name);
            if let Some(g) = g {
                if g.len() != t.data.len() {
                    return Err(invalid(format!(
                        "gradient for {} has {} entries, tensor has {}",
                        t.name,
                        g.len(),
                        t.data.len()
                    )));
                }
            }
            let (m, v) = self
                .moments
                .entry(t.name.clone())
                .or_insert_with(|| (vec![0.0; t.data.len()], vec![0.0; t.data.len()]));
            let decay = if t.role != Role::Delta || self.decay_delta {
                self.lr * self.weight_decay
            } else {
                0.0
            };
            for i in 0..t.data.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                t.data[i] -= decay * t.data[i] + self.lr * update;
            }
        }
        Ok(())
    }
}

fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn check_clip(model: &ToyDenoiser, clip: &VideoClip) -> Result<()> {
    let c = &model.config;
    if (clip.c, clip.h, clip.w) != (c.c, c.h, c.w) {
        return Err(invalid(format!(
            "clip frames are {}x{}x{}, model expects {}x{}x{}",
            clip.c, clip.h, clip.w, c.c, c.h, c.w
        )));
    }
    Ok(())
}

/// Fine-tunes a copy of `model` on one text-video pair.
///
/// Query projections are re-parameterized for `mode` first. The spectral
/// penalty only enters in [`Tuning::Save`].
pub fn finetune(
    model: &ToyDenoiser,
    clip: &VideoClip,
    prompt: &PromptTokens,
    mode: Tuning,
    hyper: &TrainHyper,
    sched: &NoiseSchedule,
) -> Result<(ToyDenoiser, Vec<LossPoint>)> {
    check_clip(model, clip)?;
    if hyper.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut model = model.clone();
    model.adapt_queries(mode, hyper.lora_rank, hyper.seed)?;
    let lambda = if mode == Tuning::Save { hyper.lambda_reg } else { 0.0 };
    let mut adam = Adam::from_hyper(hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut curve = Vec::with_capacity(hyper.epochs);
    let t_max = model.config.t_max.min(sched.t_max());
    for iteration in 0..hyper.epochs {
        let mut total: Option<Gradients> = None;
        for _ in 0..hyper.batch_size {
            let t = rng.random_range(1..=t_max);
            let eps = gaussian_vec(clip.data.len(), &mut rng);
            let g = training_gradients(&model, &clip.data, prompt, t, &eps, lambda, mode, sched)?;
            match &mut total {
                Some(acc) => acc.accumulate(g),
                None => total = Some(g),
            }
        }
        let mut g = total.expect("batch size is positive");
        g.scale(1.0 / hyper.batch_size as f64);
        adam.step(&mut model, &g.grads, mode)?;
        curve.push(LossPoint {
            iteration,
            loss: g.loss,
            mse: g.mse,
            reg: g.reg,
        });
    }
    Ok((model, curve))
}

pub fn finetune_save(
    model: &ToyDenoiser,
    clip: &VideoClip,
    prompt: &PromptTokens,
    lambda_reg: f64,
    hyper: &TrainHyper,
    sched: &NoiseSchedule,
) -> Result<(ToyDenoiser, Vec<LossPoint>)> {
    let h = TrainHyper { lambda_reg, ..*hyper };
    finetune(model, clip, prompt, Tuning::Save, &h, sched)
}

pub fn finetune_lora(
    model: &ToyDenoiser,
    clip: &VideoClip,
    prompt: &PromptTokens,
    rank: usize,
    hyper: &TrainHyper,
    sched: &NoiseSchedule,
) -> Result<(ToyDenoiser, Vec<LossPoint>)> {
    let h = TrainHyper { lora_rank: rank, ..*hyper };
    finetune(model, clip, prompt, Tuning::Lora, &h, sched)
}

pub fn finetune_full(
    model: &ToyDenoiser,
    clip: &VideoClip,
    prompt: &PromptTokens,
    hyper: &TrainHyper,
    sched: &NoiseSchedule,
) -> Result<(ToyDenoiser, Vec<LossPoint>)> {
    finetune(model, clip, prompt, Tuning::Full, hyper, sched)
}

/// Full-parameter training of the ε objective on single frames.
pub fn pretrain(
    model: &ToyDenoiser,
    corpus: &[(VideoClip, PromptTokens)],
    hyper: &PretrainHyper,
    sched: &NoiseSchedule,
) -> Result<(ToyDenoiser, Vec<LossPoint>)> {
    if corpus.is_empty() {
        return Err(invalid("pretraining corpus is empty"));
    }
    if hyper.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    for (clip, _) in corpus {
        check_clip(model, clip)?;
    }
    let mut model = model.clone();
    model.adapt_queries(Tuning::Full, 1, hyper.seed)?;
    let mut adam = Adam::new(hyper.lr, 0.9, 0.999, 1e-8, hyper.weight_decay, true);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let t_max = model.config.t_max.min(sched.t_max());
    let null = PromptTokens::null(model.config.prompt_len);
    let mut curve = Vec::with_capacity(hyper.steps);
    for iteration in 0..hyper.steps {
        let mut total: Option<Gradients> = None;
        for _ in 0..hyper.batch_size {
            let (clip, prompt) = &corpus[rng.random_range(0..corpus.len())];
            let prompt = if rng.random::<f64>() < hyper.prompt_dropout { &null } else { prompt };
            let t = rng.random_range(1..=t_max);
            let eps = gaussian_vec(clip.data.len(), &mut rng);
            let g = training_gradients(&model, &clip.data, prompt, t, &eps, 0.0, Tuning::Full, sched)?;
            match &mut total {
                Some(acc) => acc.accumulate(g),
                None => total = Some(g),
            }
        }
        let mut g = total.expect("batch size is positive");
        g.scale(1.0 / hyper.batch_size as f64);
        adam.step(&mut model, &g.grads, Tuning::Full)?;
        curve.push(LossPoint {
            iteration,
            loss: g.loss,
            mse: g.mse,
            reg: 0.0,
        });
    }
    Ok((model, curve))
}

/// Mean ε-prediction error over `count` fixed `(sample, t, ε)` draws.
pub fn evaluation_loss(
    model: &ToyDenoiser,
    samples: &[(VideoClip, PromptTokens)],
    count: usize,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if samples.is_empty() || count == 0 {
        return Err(invalid("evaluation needs samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_max = model.config.t_max.min(sched.t_max());
    let mut total = 0.0;
    for i in 0..count {
        let (clip, prompt) = &samples[i % samples.len()];
        let t = rng.random_range(1..=t_max);
        let eps = gaussian_vec(clip.data.len(), &mut rng);
        let z_t = forward_diffuse(&clip.data, t, &eps, sched)?;
        let pred = model.predict(&z_t, t, prompt)?;
        total += pred.iter().zip(&eps).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / eps.len() as f64;
    }
    Ok(total / count as f64)
}
