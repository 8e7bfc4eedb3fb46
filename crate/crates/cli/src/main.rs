//! Command-line frontend: synthetic data generation, training, evaluation,
//! and prediction export.
//!
//! Exit codes are a stable contract: 0 success, 2 usage/validation errors,
//! 3 I/O or file-format errors, 4 numerical failure (non-finite values).

mod config;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use diffuma_core::data::{
    generate_synthetic, read_archive, read_header, write_archive, write_pgm, Motif, SynthSpec,
};
use diffuma_core::diffusion::{build_noise_schedule, default_beta_range, NoiseSchedule};
use diffuma_core::metrics::{compare_sequences, ssim_frame};
use diffuma_core::train::{
    gather_batch, load_checkpoint, predict, save_checkpoint, Adam, ForwardFlags, Prediction,
    TrainOptions,
};
use diffuma_core::{Error, FrameSequence, Model, ModelConfig, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "diffuma",
    version,
    about = "Dual-path video prediction: generate data, train, evaluate, export",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic frame archive with coherent motion
    GenData {
        /// Output archive path
        #[arg(long)]
        out: PathBuf,
        /// Motion pattern: drifting-stripes, bouncing-blob, or advected-noise
        #[arg(long, default_value = "bouncing-blob", value_parser = parse_motif)]
        motif: Motif,
        /// Number of samples
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Frames per sample
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// Frame height in pixels
        #[arg(long, default_value_t = 32)]
        height: usize,
        /// Frame width in pixels
        #[arg(long, default_value_t = 32)]
        width: usize,
        /// Conditioning frames per sample (the rest become targets)
        #[arg(long = "t-in", default_value_t = 5)]
        t_in: usize,
        /// Generation seed
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a model as described by a run configuration file
    Train {
        /// TOML run configuration ([model], [data], [train] sections)
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoint in the configured directory
        #[arg(long)]
        resume: bool,
        /// Ablation: train the sequence path only (no denoiser)
        #[arg(long)]
        disable_diffusion: bool,
        /// Ablation: zero the sequence-derived conditioning vector
        #[arg(long)]
        zero_context: bool,
    },
    /// Score a checkpoint against a frame archive
    Eval {
        /// Checkpoint file to evaluate
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frame archive with conditioning + target frames
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated prediction horizons, e.g. "3,6" (default: full)
        #[arg(long)]
        horizon: Option<String>,
        /// Also write the CSV report to this path
        #[arg(long)]
        report: Option<PathBuf>,
        /// Optional run configuration to cross-check against the checkpoint
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ablation: score the sequence path only (no detail residual)
        #[arg(long)]
        disable_diffusion: bool,
        /// Ablation: zero the sequence-derived conditioning vector
        #[arg(long)]
        zero_context: bool,
    },
    /// Export predicted frames for every sample in an archive
    Predict {
        /// Checkpoint file to predict with
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frame archive with conditioning frames
        #[arg(long)]
        data: PathBuf,
        /// Directory for the exported frames
        #[arg(long)]
        out_dir: PathBuf,
        /// Output format
        #[arg(long, value_enum, default_value_t = ExportFormat::Pgm)]
        format: ExportFormat,
        /// Ablation: export the sequence-path prediction only
        #[arg(long)]
        disable_diffusion: bool,
        /// Ablation: zero the sequence-derived conditioning vector
        #[arg(long)]
        zero_context: bool,
    },
    /// Train short runs at several loss-balance weights and tabulate them
    SweepLambda {
        /// TOML run configuration providing the model/data/train sections
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated balance weights to try, e.g. "0,0.5,1,2"
        #[arg(long, default_value = "0,0.5,1,2")]
        lambdas: String,
        /// Steps per run (default: the config's step count)
        #[arg(long)]
        steps: Option<usize>,
        /// Also write the sweep table to this CSV path
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    /// One 8-bit PGM image per predicted frame (`s{sample}_f{frame}.pgm`)
    Pgm,
    /// A single binary frame archive (`predictions.btchw`)
    Btchw,
}

fn parse_motif(s: &str) -> std::result::Result<Motif, String> {
    s.parse::<Motif>().map_err(|e| e.to_string())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::NonFinite { .. } => 4,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(exit_code(&e));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, motif, samples, frames, height, width, t_in, seed } => {
            cmd_gen_data(&out, motif, samples, frames, height, width, t_in, seed)
        }
        Command::Train { config, resume, disable_diffusion, zero_context } => {
            cmd_train(&config, resume, ForwardFlags { disable_diffusion, zero_context })
        }
        Command::Eval {
            checkpoint,
            data,
            horizon,
            report,
            config,
            disable_diffusion,
            zero_context,
        } => cmd_eval(
            &checkpoint,
            &data,
            horizon.as_deref(),
            report.as_deref(),
            config.as_deref(),
            ForwardFlags { disable_diffusion, zero_context },
        ),
        Command::Predict { checkpoint, data, out_dir, format, disable_diffusion, zero_context } => {
            cmd_predict(
                &checkpoint,
                &data,
                &out_dir,
                format,
                ForwardFlags { disable_diffusion, zero_context },
            )
        }
        Command::SweepLambda { config, lambdas, steps, report } => {
            cmd_sweep_lambda(&config, &lambdas, steps, report.as_deref())
        }
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    out: &Path,
    motif: Motif,
    samples: usize,
    frames: usize,
    height: usize,
    width: usize,
    t_in: usize,
    seed: u64,
) -> Result<()> {
    let spec = SynthSpec { n_samples: samples, frames, height, width, t_in, seed };
    let seq = generate_synthetic(motif, &spec)?;
    write_archive(&seq, out)?;
    let (b, t, c, h, w) = seq.dims();
    println!(
        "wrote {}: {b} samples x {t} frames of {c}x{h}x{w} ({} conditioning + {} target), motif {motif}, seed {seed}",
        out.display(),
        seq.t_in(),
        seq.t_out(),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Exclusive-creation lock file marking a checkpoint directory as owned by
/// one training process; removed when the guard drops.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::config(format!(
                    "checkpoint directory '{}' is already locked by another training run \
                     (remove '{}' if that run is no longer alive)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn default_schedule(t_diff: usize) -> Result<NoiseSchedule> {
    let (beta_start, beta_end) = default_beta_range(t_diff);
    build_noise_schedule(t_diff, beta_start, beta_end)
}

/// Loads the archive and re-splits its time axis to the configured
/// `t_in`/`t_out` (the archive's own split is advisory).
fn load_frames(path: &Path, t_in: usize, t_out: usize) -> Result<FrameSequence> {
    let raw = read_archive(path)?;
    let frames = raw.tensor().shape()[1];
    if t_in + t_out != frames {
        return Err(Error::config(format!(
            "configured split {t_in}+{t_out} does not cover the {frames} frames per sample in '{}'",
            path.display()
        )));
    }
    if raw.t_in() == t_in {
        Ok(raw)
    } else {
        FrameSequence::new(raw.tensor().clone(), t_in, t_out)
    }
}

fn cmd_train(config_path: &Path, resume: bool, flags: ForwardFlags) -> Result<()> {
    let rc = RunConfig::load(config_path)?;
    let header = read_header(&rc.data.train)?;
    let model_cfg =
        rc.model_config(header.c as usize, header.h as usize, header.w as usize);

    std::fs::create_dir_all(&rc.train.checkpoint_dir)
        .map_err(|e| Error::io(&rc.train.checkpoint_dir, e))?;
    let _lock = DirLock::acquire(&rc.train.checkpoint_dir)?;
    let ckpt_path = rc.train.checkpoint_dir.join("model.dfma");

    let (mut model, mut opt) = if resume {
        let ckpt = load_checkpoint(&ckpt_path)?;
        if ckpt.model.config != model_cfg {
            return Err(Error::config(format!(
                "configuration does not match the checkpoint being resumed \
                 (checkpoint: {:?}, configured: {:?})",
                ckpt.model.config, model_cfg
            )));
        }
        if ckpt.optimizer.lr() != rc.train.lr {
            eprintln!(
                "note: resuming with the checkpoint's learning rate {} (config says {})",
                ckpt.optimizer.lr(),
                rc.train.lr
            );
        }
        println!(
            "resuming from {} at step {}",
            ckpt_path.display(),
            ckpt.optimizer.step_count()
        );
        (ckpt.model, ckpt.optimizer)
    } else {
        if ckpt_path.exists() {
            return Err(Error::config(format!(
                "'{}' already exists; pass --resume to continue it or choose a fresh directory",
                ckpt_path.display()
            )));
        }
        let model = Model::new(model_cfg, rc.train.seed)?;
        let opt = Adam::new(&model.store, rc.train.lr);
        (model, opt)
    };

    let schedule = default_schedule(model.config.t_diff)?;
    let data = load_frames(&rc.data.train, rc.data.t_in, rc.data.t_out)?;
    let n_samples = data.dims().0;
    println!(
        "training on {} samples for {} steps (batch {}, lr {}, seed {})",
        n_samples, rc.train.steps, rc.train.batch, opt.lr(), rc.train.seed
    );

    let csv_path = rc.train.checkpoint_dir.join("metrics.csv");
    let mut csv = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;
    if csv.metadata().map_err(|e| Error::io(&csv_path, e))?.len() == 0 {
        writeln!(csv, "step,l_diff,l_recon,l_total,lr,wallclock_ms")
            .map_err(|e| Error::io(&csv_path, e))?;
    }

    let opts = TrainOptions {
        steps: rc.train.steps,
        batch_size: rc.train.batch,
        seed: rc.train.seed,
        flags,
        checkpoint_path: Some(ckpt_path.clone()),
        checkpoint_every: rc.train.checkpoint_every,
        config_text: rc.text.clone(),
    };
    let outcome = diffuma_core::train::train_loop(
        &mut model,
        &mut opt,
        &schedule,
        &data,
        &opts,
        |rec| {
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                rec.step,
                rec.report.l_diff,
                rec.report.l_recon,
                rec.report.l_total,
                rec.lr,
                rec.wallclock_ms
            )
            .map_err(|e| Error::io(&csv_path, e))?;
            println!(
                "step {:>6}  l_diff {:<12}  l_recon {:<12}  l_total {:<12}  {} ms",
                rec.step, rec.report.l_diff, rec.report.l_recon, rec.report.l_total,
                rec.wallclock_ms
            );
            Ok(())
        },
    );
    if let Err(e) = outcome {
        if matches!(e, Error::NonFinite { .. }) {
            let diag = rc.train.checkpoint_dir.join("diagnostic.txt");
            let _ = std::fs::write(
                &diag,
                format!("training aborted after step {}: {e}\n", opt.step_count()),
            );
            eprintln!("wrote {}", diag.display());
        }
        return Err(e);
    }
    // A run asked for zero (or already-completed) steps still leaves a
    // usable checkpoint behind.
    if !ckpt_path.exists() {
        save_checkpoint(&ckpt_path, &model, &opt, &rc.text)?;
    }
    println!(
        "done: {} optimizer steps; checkpoint {}; metrics {}",
        opt.step_count(),
        ckpt_path.display(),
        csv_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Per-frame quality scores averaged over samples.
struct FrameScore {
    mse: f64,
    mae: f64,
    ssim: f64,
    residual: f64,
}

fn frame_scores(
    pred: &Prediction,
    targets: &diffuma_core::Tensor<f32>,
    cfg: &ModelConfig,
) -> Vec<FrameScore> {
    let n = targets.shape()[0];
    let (t_out, c, h, w) = (cfg.t_out, cfg.channels, cfg.height, cfg.width);
    let plane = h * w;
    let frame = c * plane;
    let mut scores = Vec::with_capacity(t_out);
    for f in 0..t_out {
        let (mut mse, mut mae, mut ssim, mut residual) = (0.0, 0.0, 0.0, 0.0);
        for s in 0..n {
            let off = (s * t_out + f) * frame;
            let p = &pred.fused.data()[off..off + frame];
            let q = &pred.sequence_only.data()[off..off + frame];
            let y = &targets.data()[off..off + frame];
            for i in 0..frame {
                let d = f64::from(p[i]) - f64::from(y[i]);
                mse += d * d;
                mae += d.abs();
                residual += (f64::from(p[i]) - f64::from(q[i])).abs();
            }
            for ch in 0..c {
                ssim += ssim_frame(&p[ch * plane..(ch + 1) * plane], &y[ch * plane..(ch + 1) * plane], h, w)
                    .expect("prediction and target frames share their extent");
            }
        }
        let count = (n * frame) as f64;
        scores.push(FrameScore {
            mse: mse / count,
            mae: mae / count,
            ssim: ssim / (n * c) as f64,
            residual: residual / count,
        });
    }
    scores
}

fn parse_horizons(spec: Option<&str>, t_out: usize) -> Result<Vec<usize>> {
    let Some(spec) = spec else { return Ok(vec![t_out]) };
    let mut horizons = Vec::new();
    for part in spec.split(',') {
        let h: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("horizon '{part}' is not a number")))?;
        if h == 0 {
            return Err(Error::config("horizons must be at least 1"));
        }
        if h > t_out {
            return Err(Error::config(format!(
                "horizon {h} exceeds the model's prediction extent {t_out}"
            )));
        }
        horizons.push(h);
    }
    Ok(horizons)
}

fn cmd_eval(
    checkpoint: &Path,
    data_path: &Path,
    horizon: Option<&str>,
    report: Option<&Path>,
    config: Option<&Path>,
    flags: ForwardFlags,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model;
    let cfg = model.config.clone();
    if let Some(config_path) = config {
        let rc = RunConfig::load(config_path)?;
        let expected = rc.model_config(cfg.channels, cfg.height, cfg.width);
        if expected != cfg {
            return Err(Error::config(format!(
                "'{}' does not describe this checkpoint (checkpoint: {:?}, config: {:?})",
                config_path.display(),
                cfg,
                expected
            )));
        }
    }
    let horizons = parse_horizons(horizon, cfg.t_out)?;
    let data = load_frames(data_path, cfg.t_in, cfg.t_out)?;
    let n = data.dims().0;
    let all: Vec<usize> = (0..n).collect();
    let (x, y) = gather_batch(&data, &all);
    let pred = predict(&model, &x, flags)?;
    let scores = frame_scores(&pred, &y, &cfg);

    let mut out = String::new();
    out.push_str("# prediction quality report\n");
    out.push_str(&format!(
        "# checkpoint: {} (after {} optimizer steps)\n",
        checkpoint.display(),
        ckpt.optimizer.step_count()
    ));
    out.push_str(&format!("# data: {} ({n} samples)\n", data_path.display()));
    out.push_str(&format!(
        "# horizons: {} of {} predicted frames\n",
        horizons.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
        cfg.t_out
    ));
    out.push_str(
        "# protocol note: epoch-based schedules map to optimizer-step counts here; \
         scores describe this checkpoint's step count only\n",
    );
    if flags.disable_diffusion || flags.zero_context {
        out.push_str(&format!(
            "# ablations: disable_diffusion={} zero_context={}\n",
            flags.disable_diffusion, flags.zero_context
        ));
    }
    out.push_str("horizon,frame,mse,mae,ssim,residual_mean_abs\n");
    for &hh in &horizons {
        let window = &scores[..hh];
        for (f, sc) in window.iter().enumerate() {
            out.push_str(&format!(
                "{hh},{f},{},{},{},{}\n",
                sc.mse, sc.mae, sc.ssim, sc.residual
            ));
        }
        let k = hh as f64;
        out.push_str(&format!(
            "{hh},mean,{},{},{},{}\n",
            window.iter().map(|s| s.mse).sum::<f64>() / k,
            window.iter().map(|s| s.mae).sum::<f64>() / k,
            window.iter().map(|s| s.ssim).sum::<f64>() / k,
            window.iter().map(|s| s.residual).sum::<f64>() / k,
        ));
    }
    print!("{out}");
    if let Some(path) = report {
        std::fs::write(path, &out).map_err(|e| Error::io(path, e))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

fn cmd_predict(
    checkpoint: &Path,
    data_path: &Path,
    out_dir: &Path,
    format: ExportFormat,
    flags: ForwardFlags,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model;
    let cfg = model.config.clone();
    let data = load_frames(data_path, cfg.t_in, cfg.t_out)?;
    let n = data.dims().0;
    let all: Vec<usize> = (0..n).collect();
    let (x, _) = gather_batch(&data, &all);
    let pred = predict(&model, &x, flags)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    match format {
        ExportFormat::Pgm => {
            if cfg.channels != 1 {
                return Err(Error::input(format!(
                    "PGM export requires single-channel frames (model has {})",
                    cfg.channels
                )));
            }
            let plane = cfg.height * cfg.width;
            for s in 0..n {
                for f in 0..cfg.t_out {
                    let off = (s * cfg.t_out + f) * plane;
                    let path = out_dir.join(format!("s{s}_f{f}.pgm"));
                    write_pgm(
                        &path,
                        &pred.fused.data()[off..off + plane],
                        cfg.height,
                        cfg.width,
                    )?;
                }
            }
            println!(
                "wrote {} frames ({n} samples x {} horizon) to {}",
                n * cfg.t_out,
                cfg.t_out,
                out_dir.display()
            );
        }
        ExportFormat::Btchw => {
            let seq = FrameSequence::new(pred.fused.clone(), 0, cfg.t_out)?;
            let path = out_dir.join("predictions.btchw");
            write_archive(&seq, &path)?;
            println!("wrote {} ({n} samples x {} predicted frames)", path.display(), cfg.t_out);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep-lambda
// ---------------------------------------------------------------------------

/// Trains one short run per balance weight (fresh model and optimizer each
/// time, identical seeds and step budget) and tabulates the final losses
/// plus training-target quality, so the weight between the noise-matching
/// and reconstruction terms can be chosen empirically.
fn cmd_sweep_lambda(
    config_path: &Path,
    lambdas: &str,
    steps: Option<usize>,
    report: Option<&Path>,
) -> Result<()> {
    let mut weights = Vec::new();
    for part in lambdas.split(',') {
        let v: f64 = part
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("balance weight '{part}' is not a number")))?;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::config(format!(
                "balance weight must be finite and >= 0, got {v}"
            )));
        }
        weights.push(v);
    }
    if weights.is_empty() {
        return Err(Error::config("at least one balance weight is required"));
    }

    let rc = RunConfig::load(config_path)?;
    let header = read_header(&rc.data.train)?;
    let steps = steps.unwrap_or(rc.train.steps);
    let data = load_frames(&rc.data.train, rc.data.t_in, rc.data.t_out)?;
    let n = data.dims().0;
    let all: Vec<usize> = (0..n).collect();
    let (x, y) = gather_batch(&data, &all);
    println!(
        "sweeping {} weights x {steps} steps on {n} samples (batch {}, lr {}, seed {})",
        weights.len(),
        rc.train.batch,
        rc.train.lr,
        rc.train.seed
    );

    let mut rows = Vec::new();
    for &lambda in &weights {
        let mut cfg =
            rc.model_config(header.c as usize, header.h as usize, header.w as usize);
        cfg.lambda = lambda;
        let mut model = Model::new(cfg, rc.train.seed)?;
        let schedule = default_schedule(model.config.t_diff)?;
        let mut opt = Adam::new(&model.store, rc.train.lr);
        let opts = TrainOptions {
            steps,
            batch_size: rc.train.batch,
            seed: rc.train.seed,
            flags: ForwardFlags::default(),
            checkpoint_path: None,
            checkpoint_every: 0,
            config_text: String::new(),
        };
        let mut last = None;
        diffuma_core::train::train_loop(&mut model, &mut opt, &schedule, &data, &opts, |rec| {
            last = Some(rec.report);
            Ok(())
        })?;
        let report = last.expect("a sweep run performs at least one step");
        let pred = predict(&model, &x, ForwardFlags::default())?;
        let quality = compare_sequences(&pred.fused, &y)?;
        println!(
            "lambda {lambda:<6} l_diff {:<12.6} l_recon {:<12.6} l_total {:<12.6} \
             ssim {:.4} mse {:.6} mae {:.6}",
            report.l_diff, report.l_recon, report.l_total, quality.ssim, quality.mse,
            quality.mae
        );
        rows.push((lambda, report, quality));
    }

    if let Some(path) = report {
        let mut out = String::from("lambda,l_diff,l_recon,l_total,ssim,mse,mae\n");
        for (lambda, rep, q) in &rows {
            out.push_str(&format!(
                "{lambda},{},{},{},{},{},{}\n",
                rep.l_diff, rep.l_recon, rep.l_total, q.ssim, q.mse, q.mae
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
