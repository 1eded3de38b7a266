use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;

use geoid_core::consensus::build_view_targets;
use geoid_core::eval::{evaluate_predictions, run_experiment, EvalReport, RunRecord};
use geoid_core::guidance::{consensus_stage, run_pipeline, PipelineWarning};
use geoid_core::scene::{load_bundle, save_bundle, write_array, SceneBundle};
use geoid_core::synth::{generate_corrupted, generate_scene, SceneConfig};
use geoid_core::{Optimizer, PipelineConfig};

#[derive(Parser)]
#[command(name = "geoid", version, about = "Multi-view consensus guidance for per-view intrinsic predictions")]
struct Cli {
    /// Log per-stage diagnostics (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene and corrupt its predictions.
    Gen(GenArgs),
    /// Build the voxel consensus and dump the per-view targets.
    Consense(ConsenseArgs),
    /// Run the full guided pipeline and save the guided bundle.
    Guide(GuideArgs),
    /// Score predictions, or run the view-count experiment.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Scene description (JSON); the built-in scene when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    views: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep predictions equal to ground truth.
    #[arg(long)]
    clean: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Plain,
    Adam,
}

/// Pipeline settings. Unset flags fall back to `--config`, then to the
/// built-in defaults.
#[derive(Args, Default)]
struct PipelineArgs {
    /// JSON file with pipeline settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau_c: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_min: Option<usize>,
    #[arg(long)]
    eps_vis: Option<f64>,
    /// Huber threshold.
    #[arg(long)]
    huber: Option<f64>,
    #[arg(long)]
    guide_fraction: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    k_out: Option<f64>,
    /// Fraction of consensus voxels held out from guidance.
    #[arg(long)]
    holdout: Option<f64>,
    /// Denoising steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Succeed even when no voxel survives the view-count filter.
    #[arg(long)]
    allow_degenerate: bool,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(tau_c => tau_c, alpha => alpha, n_min => n_min, eps_vis => eps_vis, huber => delta_huber,
             guide_fraction => guide_fraction, eta => eta, k_out => k_out, holdout => holdout_fraction,
             steps => num_steps, seed => seed);
        if let Some(o) = self.optimizer {
            c.optimizer = match o {
                OptimizerArg::Plain => Optimizer::Plain,
                OptimizerArg::Adam => Optimizer::Adam,
            };
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct ConsenseArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GuideArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Also save the unguided predictions here.
    #[arg(long)]
    unguided_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Bundle with guided predictions to score. Without it, the seeded
    /// view-count experiment runs instead.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Baseline predictions; defaults to the predictions in --bundle.
    #[arg(long, requires = "pred")]
    pred_unguided: Option<PathBuf>,
    /// Random view subsets per view count.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    views: Vec<usize>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    report: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn load(path: &Path) -> Result<SceneBundle> {
    load_bundle(path).with_context(|| format!("loading bundle {}", path.display()))
}

fn check_degenerate(degenerate: bool, allow: bool) -> Result<()> {
    if degenerate && !allow {
        bail!("consensus is empty: no voxel is seen by enough views (pass --allow-degenerate to accept)");
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen(args: GenArgs) -> Result<()> {
    let scene = match &args.scene {
        Some(p) => SceneConfig::load(p)?,
        None => SceneConfig::default(),
    };
    let (h, w) = args.size;
    let bundle = if args.clean {
        generate_scene(&scene, args.views, h, w, args.seed)?
    } else {
        generate_corrupted(&scene, args.views, h, w, args.seed)?
    };
    save_bundle(&bundle, &args.out)?;
    info!("wrote {} views to {}", bundle.views.len(), args.out.display());
    Ok(())
}

fn consense(args: ConsenseArgs) -> Result<()> {
    let cfg = args.pipeline.resolve()?;
    let bundle = load(&args.bundle)?;
    let (set, warnings) = consensus_stage(&bundle, &cfg)?;
    check_degenerate(warnings.contains(&PipelineWarning::EmptyConsensus), args.pipeline.allow_degenerate)?;
    let targets = build_view_targets(&set.voxels, &set.holdout, &bundle, cfg.eps_vis)?;
    fs::create_dir_all(&args.out)?;
    let mut files = Vec::new();
    for t in &targets {
        let cam = &bundle.views[t.view].camera;
        let name = format!("targets_{:03}_{}.gidb", t.view, t.modality);
        write_array(&args.out.join(&name), &t.to_raster(cam.height, cam.width))?;
        files.push(json!({
            "view": t.view,
            "modality": t.modality,
            "file": name,
            "entries": t.entries.len(),
            "guide_entries": t.guide_count(),
        }));
    }
    write_json(
        &args.out.join("consensus.json"),
        &json!({
            "voxels": set.voxels.len(),
            "holdout_voxels": set.holdout_indices().count(),
            "spacing": set.spacing,
            "voxel_size": set.delta,
            "warnings": warnings.iter().map(|w| format!("{w:?}")).collect::<Vec<_>>(),
            "config": cfg,
            "targets": files,
        }),
    )?;
    println!("{} voxels, {} held out", set.voxels.len(), set.holdout_indices().count());
    Ok(())
}

fn guide(args: GuideArgs) -> Result<()> {
    let cfg = args.pipeline.resolve()?;
    let bundle = load(&args.bundle)?;
    let out = run_pipeline(&bundle, &cfg)?;
    for w in &out.warnings {
        warn!("{w:?}");
    }
    check_degenerate(out.is_degenerate(), args.pipeline.allow_degenerate)?;
    save_bundle(&out.guided_bundle(&bundle), &args.out)?;
    if let Some(dir) = &args.unguided_out {
        save_bundle(&out.unguided_bundle(&bundle), dir)?;
    }
    let loss_dir = args.out.join("loss");
    fs::create_dir_all(&loss_dir)?;
    let mut summary = Vec::new();
    for s in &out.states {
        s.write_loss_trace(&loss_dir.join(format!("loss_{:03}_{}.csv", s.view, s.modality)))?;
        summary.push(json!({
            "view": s.view,
            "modality": s.modality,
            "guided_steps": s.guided_steps.len(),
            "final_loss": s.final_loss,
        }));
    }
    write_json(
        &args.out.join("guidance.json"),
        &json!({
            "voxels": out.consensus.voxels.len(),
            "holdout_voxels": out.consensus.holdout_indices().count(),
            "config": cfg,
            "trajectories": summary,
        }),
    )?;
    println!("guided {} trajectories into {}", out.states.len(), args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = args.pipeline.resolve()?;
    let bundle = load(&args.bundle)?;
    let reports = match &args.pred {
        Some(pred) => vec![score_saved(&bundle, pred, args.pred_unguided.as_deref(), &cfg, args.pipeline.allow_degenerate)?],
        None => {
            let reports = run_experiment(&bundle, &args.views, args.seeds, &cfg)?;
            let degenerate = reports.iter().flat_map(|r| &r.runs).any(|r| r.degenerate);
            check_degenerate(degenerate, args.pipeline.allow_degenerate)?;
            reports
        }
    };
    write_json(&args.report, &serde_json::to_value(&reports)?)?;
    for r in &reports {
        for m in &r.modalities {
            println!(
                "V={:<3} {:<12} MAD guided {:.5} ± {:.5}  unguided {:.5} ± {:.5}",
                r.view_count, m.modality, m.mad_guided.mean, m.mad_guided.std, m.mad_unguided.mean, m.mad_unguided.std
            );
        }
    }
    Ok(())
}

/// Scores saved predictions on the held-out voxels that `guide` would use
/// for the same bundle and settings.
fn score_saved(
    bundle: &SceneBundle,
    pred: &Path,
    unguided: Option<&Path>,
    cfg: &PipelineConfig,
    allow_degenerate: bool,
) -> Result<EvalReport> {
    let guided = load(pred)?;
    let baseline = match unguided {
        Some(p) => load(p)?,
        None => bundle.clone(),
    };
    for (name, b) in [("--pred", &guided), ("--pred-unguided", &baseline)] {
        ensure!(
            b.views.len() == bundle.views.len(),
            "{name} has {} views, the bundle has {}",
            b.views.len(),
            bundle.views.len()
        );
    }
    let (set, warnings) = consensus_stage(bundle, cfg)?;
    let degenerate = warnings.contains(&PipelineWarning::EmptyConsensus);
    check_degenerate(degenerate, allow_degenerate)?;
    ensure!(set.holdout_indices().next().is_some(), "no held-out voxels to score");
    let preds = |b: &SceneBundle| b.views.iter().map(|v| v.predictions.clone()).collect::<Vec<_>>();
    let n = bundle.views.len();
    let record = RunRecord {
        view_count: n,
        seed: cfg.seed,
        views: (0..n).collect(),
        holdout_voxels: set.holdout_indices().count(),
        degenerate,
        modalities: evaluate_predictions(bundle, &set.voxels, &set.holdout, &preds(&guided), &preds(&baseline))?,
    };
    Ok(EvalReport::from_runs(n, cfg, vec![record])?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Consense(a) => consense(a),
        Command::Guide(a) => guide(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
