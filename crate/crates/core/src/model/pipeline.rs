use super::denoiser::ToyDenoiser;
use crate::datagen::{PromptTokens, VideoClip};
use crate::diffusion::{ddim_invert, ddim_sample, NoiseSchedule, TimestepPlan};
use crate::error::{invalid, Result};

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

/// DDIM-invert `clip` under `source` (guidance 1), then sample under
/// `target` with guidance `s_cfg` and clamp to `[0, 1]`.
pub fn edit(
    model: &ToyDenoiser,
    clip: &VideoClip,
    source: &PromptTokens,
    target: &PromptTokens,
    s_cfg: f64,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
) -> Result<VideoClip> {
    check_clip(model, clip)?;
    let z_t = ddim_invert(model, &clip.data, source, plan, sched)?;
    let null = PromptTokens::null(model.config.prompt_len);
    let z0 = ddim_sample(model, &z_t, target, &null, plan, s_cfg, sched)?;
    VideoClip::from_latent(clip.f, clip.c, clip.h, clip.w, &z0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundTrip {
    /// Raw `z_0` after invert-then-sample.
    pub latent: Vec<f64>,
    pub latent_mse: f64,
    pub latent_mae: f64,
    /// `latent` clamped to `[0, 1]`, as [`edit`] returns it.
    pub output: VideoClip,
    pub output_mse: f64,
}

/// Invert then sample with the source prompt at guidance 1.
pub fn roundtrip(
    model: &ToyDenoiser,
    clip: &VideoClip,
    prompt: &PromptTokens,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
) -> Result<RoundTrip> {
    check_clip(model, clip)?;
    let z_t = ddim_invert(model, &clip.data, prompt, plan, sched)?;
    let latent = ddim_sample(model, &z_t, prompt, prompt, plan, 1.0, sched)?;
    let n = latent.len() as f64;
    let latent_mse = latent.iter().zip(&clip.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let latent_mae = latent.iter().zip(&clip.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let output = VideoClip::from_latent(clip.f, clip.c, clip.h, clip.w, &latent)?;
    let output_mse = output.mse(clip);
    Ok(RoundTrip {
        latent,
        latent_mse,
        latent_mae,
        output,
        output_mse,
    })
}

/// Per-pixel MSE of the raw invert-then-sample latent against `clip`.
pub fn reconstruction_mse(
    model: &ToyDenoiser,
    clip: &VideoClip,
    prompt: &PromptTokens,
    plan: &TimestepPlan,
    sched: &NoiseSchedule,
) -> Result<f64> {
    Ok(roundtrip(model, clip, prompt, plan, sched)?.latent_mse)
}
