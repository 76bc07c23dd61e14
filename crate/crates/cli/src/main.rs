//! `save`: command-line driver for the spectral-shift editing testbed.
//!
//! Settings come from an optional `--config` file of `section.key = value`
//! lines, overridden by `--section.key value` flags. Exit status is 0 on
//! success, 1 for usage or config errors and 2 for runtime failures.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};

use config::{split_overrides, ConfigError, RunConfig};
use save_core::attention::{flops_estimate, FlopsVariant};
use save_core::datagen::{
    attribute_probe, export_ppm, Color, Motion, Shape, format_manifest, image_corpus, parse_manifest, read_clip, render_video, write_clip,
    ManifestEntry, ProbeOutcome, PromptTokens, SceneSpec, VideoClip,
};
use save_core::diffusion::{linear_schedule, NoiseSchedule, TimestepPlan, DEFAULT_BETA_END, DEFAULT_BETA_START};
use save_core::lsg::{default_family, verify_bound};
use save_core::model::{
    edit, finetune, inflate, init_image_model, load_model, loss_curve_csv, pretrain, roundtrip, save_model, ToyDenoiser,
};
use save_core::spectral::count_params;

#[derive(Parser, Debug)]
#[command(name = "save", version, about = "Spectral-shift fine-tuning and editing on synthetic clips")]
struct Cli {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print the resolved configuration before running.
    #[arg(long, global = true)]
    show_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the image pretraining corpus and one demo video clip.
    RenderData {
        /// Random placements per (colour, shape) pair.
        #[arg(long, default_value_t = 8)]
        per_pair: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Scene of the demo clip, e.g. "red square right".
        #[arg(long, default_value = "red square right")]
        scene: String,
        /// Object edge in pixels (default: half the frame).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 1)]
        x: i64,
        /// Top edge (default: vertically centred).
        #[arg(long)]
        y: Option<i64>,
        #[arg(long, default_value_t = 1)]
        speed: i64,
    },
    /// Pretrain an image model on the corpus manifest.
    Pretrain,
    /// Turn an image checkpoint into a video checkpoint with inert temporal layers.
    Inflate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune on the input clip and append a row to the comparison table.
    Finetune {
        #[arg(long, default_value = "red square right")]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "comparison.tsv")]
        table: PathBuf,
    },
    /// Invert the input clip under `source` and resample it under `target`.
    Edit {
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        /// Also write the frames as PPM images into this directory.
        #[arg(long)]
        ppm: Option<PathBuf>,
    },
    /// Invert then resample under the same prompt at guidance 1.
    Roundtrip {
        #[arg(long, default_value = "red square right")]
        prompt: String,
    },
    /// Monte-Carlo check of the singular-value deviation bound.
    LsgVerify {
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Attention cost model for the three attention layouts.
    Flops {
        #[arg(long, default_value_t = 2)]
        b_prime: u64,
        #[arg(long, default_value_t = 8)]
        frames: u64,
        #[arg(long, default_value_t = 16)]
        height: u64,
        #[arg(long, default_value_t = 16)]
        width: u64,
    },
    /// Tunable-parameter counts: full, spectral shift and LoRA.
    Params {
        /// Layer shape `MxN`; repeatable. Defaults to the model's query layers.
        #[arg(long = "layer")]
        layers: Vec<String>,
    },
    /// Write a clip's frames as binary PPM images.
    ExportPpm {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "frame")]
        stem: String,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", msg.trim_end().replace('\n', " "));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(args: Vec<String>) -> Result<(), Failure> {
    let (args, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Failure::Usage(e.render().to_string().lines().next().unwrap_or("").to_owned())),
    };
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    for (k, v) in &overrides {
        cfg.set(k, v).map_err(|e| Failure::Usage(format!("--{k}: {e}")))?;
    }
    cfg.validate()?;
    if cli.show_config {
        print!("{}", cfg.to_text());
    }
    match cli.command {
        Command::RenderData {
            per_pair,
            frames,
            scene,
            size,
            x,
            y,
            speed,
        } => render_data(&cfg, per_pair, frames, &scene, size, x, y, speed),
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::Inflate { out } => cmd_inflate(&cfg, &out),
        Command::Finetune { prompt, out, table } => cmd_finetune(&cfg, &prompt, &out, &table),
        Command::Edit { source, target, ppm } => cmd_edit(&cfg, &source, &target, ppm.as_deref()),
        Command::Roundtrip { prompt } => cmd_roundtrip(&cfg, &prompt),
        Command::LsgVerify { trials, csv } => cmd_lsg(&cfg, trials, csv.as_deref()),
        Command::Flops {
            b_prime,
            frames,
            height,
            width,
        } => cmd_flops(b_prime, frames, height, width),
        Command::Params { layers } => cmd_params(&cfg, &layers),
        Command::ExportPpm { clip, out, stem } => {
            let clip = load_clip(&clip)?;
            let files = export_ppm(&clip, &out, &stem).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} frames to {}", files.len(), out.display());
            Ok(())
        }
    }
}

fn parse_scene(text: &str) -> Result<(Color, Shape, Motion), Failure> {
    let usage = |e: save_core::Error| Failure::Usage(format!("scene {text:?}: {e}"));
    let words: Vec<&str> = text.split_whitespace().collect();
    match words.as_slice() {
        [c, s] => Ok((c.parse().map_err(usage)?, s.parse().map_err(usage)?, Motion::Static)),
        [c, s, m] => Ok((c.parse().map_err(usage)?, s.parse().map_err(usage)?, m.parse().map_err(usage)?)),
        _ => Err(Failure::Usage(format!("scene {text:?}: expected `colour shape [motion]`"))),
    }
}

fn prompt(text: &str) -> Result<PromptTokens, Failure> {
    PromptTokens::parse(text).map_err(|e| Failure::Usage(format!("prompt {text:?}: {e}")))
}

fn schedule(t_max: usize) -> anyhow::Result<NoiseSchedule> {
    Ok(linear_schedule(t_max, DEFAULT_BETA_START, DEFAULT_BETA_END)?)
}

fn plan(cfg: &RunConfig, t_max: usize) -> Result<TimestepPlan, Failure> {
    TimestepPlan::uniform(t_max, cfg.sample.steps).map_err(|e| Failure::Usage(format!("sample.steps: {e}")))
}

fn load(path: &Path) -> anyhow::Result<ToyDenoiser> {
    load_model(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save(model: &ToyDenoiser, path: &Path) -> anyhow::Result<()> {
    create_parent(path)?;
    save_model(model, path).with_context(|| format!("writing checkpoint {}", path.display()))
}

fn load_clip(path: &Path) -> anyhow::Result<VideoClip> {
    read_clip(path).with_context(|| format!("reading clip {}", path.display()))
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    create_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn describe(outcome: &ProbeOutcome) -> String {
    match outcome.detected() {
        None => "probe: empty".to_owned(),
        Some(p) => {
            let frames: Vec<&str> = p
                .frame_colors
                .iter()
                .map(|c| c.map_or("-", |c| c.name()))
                .collect();
            format!(
                "probe: color={} shape={} motion={} displacement=({:.2},{:.2}) frames=[{}]",
                p.color.name(),
                p.shape.name(),
                p.motion.name(),
                p.displacement.0,
                p.displacement.1,
                frames.join(" ")
            )
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn render_data(
    cfg: &RunConfig,
    per_pair: usize,
    frames: usize,
    scene: &str,
    size: Option<usize>,
    x: i64,
    y: Option<i64>,
    speed: i64,
) -> Result<(), Failure> {
    let (h, w) = (cfg.model.h, cfg.model.w);
    let size = size.unwrap_or(h.min(w) / 2);
    let (color, shape, motion) = parse_scene(scene)?;
    let spec = SceneSpec {
        color,
        shape,
        motion,
        x,
        y: y.unwrap_or((h as i64 - size as i64) / 2),
        size,
        speed,
    };
    spec.validate(frames, h, w).map_err(|e| Failure::Usage(e.to_string()))?;

    let corpus = image_corpus(per_pair, h, w, size, cfg.train.seed).map_err(|e| Failure::Usage(e.to_string()))?;
    let manifest_path = &cfg.paths.corpus;
    let dir = manifest_path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut entries = Vec::with_capacity(corpus.len());
    for (i, (clip, p)) in corpus.iter().enumerate() {
        let name = format!("img_{i:04}.clip");
        let path = dir.join(&name);
        create_parent(&path)?;
        write_clip(clip, &path).with_context(|| format!("writing {}", path.display()))?;
        entries.push(ManifestEntry {
            path: name,
            prompt: p.clone(),
        });
    }
    write_text(manifest_path, &format_manifest(&entries))?;

    let video = render_video(&spec, frames, h, w).map_err(|e| Failure::Usage(e.to_string()))?;
    create_parent(&cfg.paths.video_in)?;
    write_clip(&video, &cfg.paths.video_in).with_context(|| format!("writing {}", cfg.paths.video_in.display()))?;
    println!("corpus: {} clips, manifest {}", entries.len(), manifest_path.display());
    println!("video: {} ({frames} frames, {})", cfg.paths.video_in.display(), describe(&attribute_probe(&video)));
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<(), Failure> {
    let manifest = &cfg.paths.corpus;
    let text = fs::read_to_string(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    let entries = parse_manifest(&text).with_context(|| format!("parsing {}", manifest.display()))?;
    let dir = manifest.parent().unwrap_or(Path::new(""));
    let mut corpus = Vec::with_capacity(entries.len());
    for e in entries {
        corpus.push((load_clip(&dir.join(&e.path))?, e.prompt));
    }
    let sched = schedule(cfg.model.t_max)?;
    let model = init_image_model(cfg.model, cfg.train.seed).context("building image model")?;
    let start = Instant::now();
    let (trained, curve) = pretrain(&model, &corpus, &cfg.pretrain, &sched).context("pretraining")?;
    save(&trained, &cfg.paths.checkpoint)?;
    write_text(&sidecar(&cfg.paths.checkpoint, ".loss.csv"), &loss_curve_csv(&curve))?;
    let tail = &curve[curve.len().saturating_sub(20)..];
    let tail_loss = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().map(|p| p.loss).sum::<f64>() / tail.len() as f64
    };
    println!(
        "pretrained {} steps on {} clips in {:.1}s; mean loss of last {} steps {tail_loss:.5}; wrote {}",
        cfg.pretrain.steps,
        corpus.len(),
        start.elapsed().as_secs_f64(),
        tail.len(),
        cfg.paths.checkpoint.display()
    );
    Ok(())
}

fn cmd_inflate(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let image = load(&cfg.paths.checkpoint)?;
    let video = inflate(&image, cfg.train.seed).context("inflating")?;
    save(&video, out)?;
    println!("inflated {} -> {}", cfg.paths.checkpoint.display(), out.display());
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, text: &str, out: &Path, table: &Path) -> Result<(), Failure> {
    let tokens = prompt(text)?;
    let mut model = load(&cfg.paths.checkpoint)?;
    if !model.is_video() {
        model = inflate(&model, cfg.train.seed).context("inflating")?;
    }
    let clip = load_clip(&cfg.paths.video_in)?;
    let t_max = model.config.t_max;
    let sched = schedule(t_max)?;
    let plan = plan(cfg, t_max)?;
    let start = Instant::now();
    let (tuned, curve) = finetune(&model, &clip, &tokens, cfg.tuning, &cfg.train, &sched).context("fine-tuning")?;
    let wall = start.elapsed().as_secs_f64();
    let rt = roundtrip(&tuned, &clip, &tokens, &plan, &sched).context("reconstruction")?;
    save(&tuned, out)?;
    write_text(&sidecar(out, ".loss.csv"), &loss_curve_csv(&curve))?;

    let tunable = tuned.tunable_count(cfg.tuning);
    let final_loss = curve.last().map_or(f64::NAN, |p| p.loss);
    let fresh = !table.exists();
    create_parent(table)?;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(table)
        .with_context(|| format!("opening {}", table.display()))?;
    if fresh {
        writeln!(f, "mode\ttunable\tfinal_loss\trecon_mse\twall_s").context("writing table")?;
    }
    writeln!(
        f,
        "{}\t{tunable}\t{final_loss:.6e}\t{:.6e}\t{wall:.2}",
        cfg.tuning, rt.latent_mse
    )
    .with_context(|| format!("writing {}", table.display()))?;
    println!(
        "mode={} tunable={tunable} final_loss={final_loss:.6e} recon_mse={:.6e} wall_s={wall:.2}",
        cfg.tuning, rt.latent_mse
    );
    Ok(())
}

fn cmd_edit(cfg: &RunConfig, source: &str, target: &str, ppm: Option<&Path>) -> Result<(), Failure> {
    let (src, tgt) = (prompt(source)?, prompt(target)?);
    let model = load(&cfg.paths.checkpoint)?;
    let clip = load_clip(&cfg.paths.video_in)?;
    let t_max = model.config.t_max;
    let sched = schedule(t_max)?;
    let plan = plan(cfg, t_max)?;
    let out = edit(&model, &clip, &src, &tgt, cfg.sample.s_cfg, &plan, &sched).context("editing")?;
    create_parent(&cfg.paths.video_out)?;
    write_clip(&out, &cfg.paths.video_out).with_context(|| format!("writing {}", cfg.paths.video_out.display()))?;
    if let Some(dir) = ppm {
        export_ppm(&out, dir, "edit").with_context(|| format!("writing {}", dir.display()))?;
    }
    println!("mse_vs_input={:.6e}", out.mse(&clip));
    println!("{}", describe(&attribute_probe(&out)));
    Ok(())
}

fn cmd_roundtrip(cfg: &RunConfig, text: &str) -> Result<(), Failure> {
    let tokens = prompt(text)?;
    let model = load(&cfg.paths.checkpoint)?;
    let clip = load_clip(&cfg.paths.video_in)?;
    let t_max = model.config.t_max;
    let sched = schedule(t_max)?;
    let plan = plan(cfg, t_max)?;
    let rt = roundtrip(&model, &clip, &tokens, &plan, &sched).context("round trip")?;
    create_parent(&cfg.paths.video_out)?;
    write_clip(&rt.output, &cfg.paths.video_out).with_context(|| format!("writing {}", cfg.paths.video_out.display()))?;
    println!(
        "latent_mse={:.6e} latent_mae={:.6e} clamped_mse={:.6e}",
        rt.latent_mse, rt.latent_mae, rt.output_mse
    );
    Ok(())
}

fn cmd_lsg(cfg: &RunConfig, trials: usize, csv: Option<&Path>) -> Result<(), Failure> {
    let report = verify_bound(&default_family(), trials, cfg.train.seed).map_err(|e| Failure::Usage(e.to_string()))?;
    print!("{}", report.to_text());
    if let Some(path) = csv {
        write_text(path, &report.to_csv())?;
    }
    Ok(())
}

fn cmd_flops(b_prime: u64, frames: u64, height: u64, width: u64) -> Result<(), Failure> {
    for variant in FlopsVariant::ALL {
        let est = flops_estimate(variant, b_prime, frames, height, width).map_err(|e| Failure::Usage(e.to_string()))?;
        println!("{variant} attention_c={} total={}", est.attention_c, est.total);
    }
    Ok(())
}

fn parse_layer(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("--layer expects MxN, got {s:?}"));
    let (m, n) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((m.trim().parse().map_err(|_| bad())?, n.trim().parse().map_err(|_| bad())?))
}

fn cmd_params(cfg: &RunConfig, layers: &[String]) -> Result<(), Failure> {
    let dims: Vec<(usize, usize)> = if layers.is_empty() {
        let image = init_image_model(cfg.model, cfg.train.seed).context("building model")?;
        inflate(&image, cfg.train.seed).context("inflating")?.query_dims()
    } else {
        layers.iter().map(|s| parse_layer(s)).collect::<Result<_, _>>()?
    };
    if dims.is_empty() {
        return Err(Failure::Runtime(anyhow::anyhow!("no layers to count")));
    }
    let rank = cfg.train.lora_rank;
    let budget = count_params(&dims, rank).map_err(|e| Failure::Usage(e.to_string()))?;
    for l in &budget.layers {
        println!("layer {}x{}: full={} save={} lora_r{rank}={}", l.rows, l.cols, l.full, l.save, l.lora);
    }
    let ratio = if budget.full.is_multiple_of(budget.save) {
        (budget.full / budget.save).to_string()
    } else {
        format!("{:.3}", budget.reduction_ratio())
    };
    println!(
        "full={} save={} lora_r{rank}={} ratio={ratio}",
        budget.full, budget.save, budget.lora
    );
    Ok(())
}
