use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use pforecast_core::geometry::{build_reprojected_maps, FrameObservation};
use pforecast_core::harness::persist::{load_panoptic, load_scene, save_scene, write_panoptic_pgm};
use pforecast_core::harness::render::{depth_levels, render_forecast, write_pgm, MAX_RENDER_DEPTH};
use pforecast_core::harness::train::{copy_last_loc_loss, validation_loc_loss};
use pforecast_core::harness::{generate_scene, gradcheck, train, Model, RunConfig, SceneSequence};
use pforecast_core::metrics::evaluate;

/// Panoptic segmentation forecasting on synthetic scenes.
#[derive(Debug, Parser)]
#[command(name = "pforecast", version)]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    agents: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true, value_name = "MOTION")]
    motion: Option<String>,
    #[arg(long, global = true, value_name = "VARIANT")]
    attention: Option<String>,
    /// Directory for every file a command writes.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare analytic gradients with finite differences.
    Gradcheck,
    /// Generate synthetic scenes and their target panoptic maps.
    Gen {
        /// Number of scenes; scene i uses seed `seed + i`.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Two-stage training; writes a checkpoint and loss log.
    ///
    /// Without scene files, `scenes` training and `val_scenes` validation
    /// scenes are generated from seeds `1000·seed + i` and `1000·seed + 500 + i`.
    Train {
        scenes: Vec<PathBuf>,
        /// Scenes for a free-running validation report.
        #[arg(long = "val")]
        val: Vec<PathBuf>,
    },
    /// Forecast one scene and render the outputs.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
    },
    /// PQ/SQ/RQ and their id-aware variants between two panoptic graymaps.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Number of background classes; they come first.
        #[arg(long, default_value_t = 3)]
        c_bg: usize,
        /// Total classes; defaults to one past the largest class seen.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Reproject a scene's input background into its last frame.
    Reproject {
        #[arg(long)]
        scene: PathBuf,
    },
}

/// Invocation errors; they exit with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    let flags = [
        ("seed", cli.seed.map(|v| v.to_string())),
        ("agents", cli.agents.map(|v| v.to_string())),
        ("steps", cli.steps.map(|v| v.to_string())),
        ("motion", cli.motion.clone()),
        ("attention", cli.attention.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v).map_err(|e| usage(format!("--{k}: {e}")))?;
        }
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(format!("--set {kv}: {e}")))?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let dir = cli.out.as_deref().ok_or_else(|| usage("this command writes files; pass --out <DIR>"))?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_scenes(paths: &[PathBuf]) -> Result<Vec<SceneSequence>> {
    paths
        .iter()
        .map(|p| load_scene(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn gradcheck_cmd(cfg: &RunConfig) -> Result<bool> {
    let checks = gradcheck::run_suite(cfg.seed);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for c in &checks {
        println!("{:<40} {:.3e}  (tol {:.0e})  {}", c.name, c.error, c.tolerance, if c.passed() { "ok" } else { "FAIL" });
        worst = worst.max(c.error);
        ok &= c.passed();
    }
    println!("worst relative error: {worst:.3e}");
    Ok(ok)
}

fn gen_cmd(cfg: &RunConfig, count: usize, out: &Path) -> Result<()> {
    let opts = cfg.scene_options();
    for i in 0..count {
        let scene = generate_scene(cfg.seed + i as u64, &opts)?;
        let base = out.join(format!("scene-{i:03}"));
        let path = base.with_extension("scene");
        save_scene(&scene, &path)?;
        let target = out.join(format!("scene-{i:03}.target_panoptic.pgm"));
        let mut buf = Vec::new();
        write_panoptic_pgm(&scene.panoptic, &mut buf)?;
        std::fs::write(&target, buf)?;
        println!("{}", path.display());
        println!("{}", target.display());
    }
    Ok(())
}

fn generated(cfg: &RunConfig, first: u64, n: usize) -> Result<Vec<SceneSequence>> {
    let opts = cfg.scene_options();
    Ok((first..first + n as u64).map(|s| generate_scene(s, &opts)).collect::<pforecast_core::Result<_>>()?)
}

fn train_cmd(cfg: &RunConfig, scenes: &[PathBuf], val: &[PathBuf], out: &Path) -> Result<()> {
    let (scenes, val) = if scenes.is_empty() {
        let val = if val.is_empty() { generated(cfg, cfg.seed * 1000 + 500, cfg.val_scenes)? } else { load_scenes(val)? };
        (generated(cfg, cfg.seed * 1000, cfg.scenes)?, val)
    } else {
        (load_scenes(scenes)?, load_scenes(val)?)
    };
    let (model, log) = train(cfg, &scenes)?;
    let ckpt = out.join("checkpoint.pfc");
    model.save(&ckpt)?;
    let log_path = out.join("loss_log.csv");
    log.write_csv(std::fs::File::create(&log_path)?)?;
    if let Some(last) = log.stage(1).last() {
        println!("stage 1 step {}: loc {:.6} total {:.6}", last.step, last.loss.loc, last.loss.total_fg);
    }
    if let Some(last) = log.stage(2).last() {
        println!("stage 2 step {}: select {:.6} bias {:.6}", last.step, last.loss.refine_select, last.loss.refine_bias);
    }
    if !val.is_empty() {
        println!("validation loc loss {:.6}", validation_loc_loss(&model, &val)?);
        println!("copy-last loc loss  {:.6}", copy_last_loc_loss(&model, &val)?);
    }
    println!("{}", ckpt.display());
    println!("{}", log_path.display());
    Ok(())
}

fn forecast_cmd(checkpoint: &Path, scene: &Path, out: &Path) -> Result<()> {
    let model = Model::load(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let scene = load_scene(scene).with_context(|| format!("reading {}", scene.display()))?;
    let r = render_forecast(&model, &scene, out)?;
    for f in &r.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, pred: &Path, target: &Path, c_bg: usize, classes: Option<usize>, out: Option<&Path>) -> Result<()> {
    let p = load_panoptic(pred).with_context(|| format!("reading {}", pred.display()))?;
    let t = load_panoptic(target).with_context(|| format!("reading {}", target.display()))?;
    let seen = p.class_id.iter().chain(&t.class_id).max().map_or(0, |m| m + 1);
    let n = classes.unwrap_or(seen.max(c_bg));
    let report = evaluate(&p, &t, n, c_bg, cfg.pq_threshold, cfg.pq_mode)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    print!("{}", String::from_utf8(buf.clone())?);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("eval.csv"), buf)?;
    }
    Ok(())
}

fn reproject_cmd(scene: &Path, out: &Path) -> Result<()> {
    let s = load_scene(scene).with_context(|| format!("reading {}", scene.display()))?;
    let frames: Vec<FrameObservation> = (0..s.t_in)
        .map(|t| FrameObservation {
            depth: &s.depth[t],
            semantics: &s.semantics[t],
            pose: s.poses[t],
        })
        .collect();
    let target = s.total_frames() - 1;
    let maps = build_reprojected_maps(&frames, &s.intrinsics, &s.poses[target])?;
    let (sem, dm) = &maps.merged;
    let (h, w) = (s.height, s.width);
    let valid = dm.valid.data();
    // 0 marks holes, otherwise label + 1.
    let labels: Vec<usize> = (0..h * w).map(|p| if valid[p] != 0.0 { sem.labels[p] + 1 } else { 0 }).collect();
    let q: Vec<usize> = maps.q.data().iter().map(|&v| v as usize).collect();
    let depth = depth_levels(dm.depth.data(), MAX_RENDER_DEPTH);
    let files = [
        ("reprojected_semantics.pgm", labels, s.c_bg),
        ("reprojected_depth.pgm", depth, 255),
        ("reprojected_q.pgm", q, 1),
    ];
    for (name, values, max) in files {
        let path = out.join(name);
        let mut buf = Vec::new();
        write_pgm(&values, h, w, max, &mut buf)?;
        std::fs::write(&path, buf)?;
        println!("{}", path.display());
    }
    let covered = valid.iter().filter(|&&v| v != 0.0).count();
    println!(
        "coverage {covered}/{} behind_camera {} off_frame {}",
        h * w,
        maps.stats.behind_camera,
        maps.stats.off_frame
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = run_config(cli)?;
    match &cli.command {
        Command::Gradcheck => return gradcheck_cmd(&cfg),
        Command::Gen { count } => gen_cmd(&cfg, *count, out_dir(cli)?)?,
        Command::Train { scenes, val } => train_cmd(&cfg, scenes, val, out_dir(cli)?)?,
        Command::Forecast { checkpoint, scene } => forecast_cmd(checkpoint, scene, out_dir(cli)?)?,
        Command::Eval {
            pred,
            target,
            c_bg,
            classes,
        } => eval_cmd(&cfg, pred, target, *c_bg, *classes, cli.out.as_deref())?,
        Command::Reproject { scene } => reproject_cmd(scene, out_dir(cli)?)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<Usage>() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
