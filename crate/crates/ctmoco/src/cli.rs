//! Command-line front end. Every subcommand reads and writes files only, and
//! leaves a `manifest.json` in its output directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctmoco_core::ctrecon::shepp_logan;
use ctmoco_core::motion::MotionSpline;
use ctmoco_core::optimizer::{MseObjective, RunStatus};
use ctmoco_core::pfode::TraceMode;
use ctmoco_core::scorenet::ScoreNet;
use ctmoco_core::Image;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::formats::{read_motion, write_motion, write_trace};
use crate::io::{self, read_image, read_sinogram, write_image, write_png, write_sinogram};
use crate::manifest::{OutputDiff, RunManifest, FILE_NAME};
use crate::pipeline::{self, CaseObjective, CaseOutcome, ObjectiveKind};
use crate::report::{write_reports, EvalRecord};
use crate::weights::{load_weights, save_weights, Normalization};

#[derive(Debug, Clone, Parser)]
#[command(name = "ctmoco", version, about = "Score-likelihood motion compensation for simulated fan-beam CT")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the command's own random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads for batch commands.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, global = true, value_enum)]
    pub objective: Option<ObjectiveKind>,
    /// Overrides `trace.mode` of the config.
    #[arg(long, global = true, value_enum)]
    pub trace_mode: Option<TraceModeArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceModeArg {
    Hutchinson,
    Exact,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Sample a random phantom (or the Shepp-Logan phantom).
    Phantom {
        #[arg(long)]
        shepp_logan: bool,
    },
    /// Forward-project an image, optionally under motion.
    Project {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        motion: Option<PathBuf>,
    },
    /// Draw a random rigid motion trajectory.
    Perturb,
    /// Filtered backprojection, optionally with a motion trajectory.
    Fbp {
        #[arg(long)]
        sinogram: PathBuf,
        #[arg(long)]
        motion: Option<PathBuf>,
    },
    /// Train the score network with denoising score matching.
    TrainScore,
    /// Log-likelihood of an image under a trained score network.
    Likelihood {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Also write the image gradient.
        #[arg(long)]
        gradient: bool,
    },
    /// Estimate the motion trajectory of a sinogram.
    Compensate {
        #[arg(long)]
        sinogram: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Reference image for the MSE oracle objective.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Compare a reconstruction and trajectory against the ground truth.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        gt_motion: PathBuf,
        #[arg(long)]
        est_motion: PathBuf,
        #[arg(long, default_value = "final")]
        label: String,
    },
    /// Aggregate evaluation records into JSON/CSV summaries and PNG panels.
    Report {
        /// Evaluation record files written by `eval`.
        #[arg(long = "eval", required = true)]
        evals: Vec<PathBuf>,
        /// One panel row: comma-separated image files.
        #[arg(long = "panel-row", value_delimiter = ',', num_args = 1, action = clap::ArgAction::Append)]
        panel_rows: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        row_len: usize,
    },
    /// Simulate and compensate a batch of seeded cases end to end.
    Experiment {
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long, default_value_t = 0)]
        first_case: usize,
        /// Trained weights; without them the likelihood objective trains a
        /// network first.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Re-execute a run from its manifest and compare every output digest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// Parses `args` (without the program name) and runs the command.
pub fn run_args<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(std::iter::once("ctmoco".to_string()).chain(args.iter().cloned()))
        .map_err(|e| Error::Config(e.to_string()))?;
    run(&cli, args, None)
}

/// Runs a parsed command line. `config` replaces the `--config` file when given.
pub fn run(cli: &Cli, args: Vec<String>, config: Option<ExperimentConfig>) -> Result<()> {
    let c = &cli.common;
    let mut cfg = match (config, &c.config) {
        (Some(cfg), _) => cfg,
        (None, Some(p)) => ExperimentConfig::load(p)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(m) = c.trace_mode {
        cfg.trace.mode = match m {
            TraceModeArg::Hutchinson => TraceMode::Hutchinson,
            TraceModeArg::Exact => TraceMode::Exact,
        };
    }
    cfg.validate()?;
    let out = c.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let name = command_name(&cli.command);
    let mut m = RunManifest::new(name, args, &cfg);
    match &cli.command {
        Command::Phantom { shepp_logan: sl } => cmd_phantom(&cfg, c, *sl, &mut m)?,
        Command::Project { image, motion } => cmd_project(&cfg, out, image, motion.as_deref(), &mut m)?,
        Command::Perturb => cmd_perturb(&cfg, c, &mut m)?,
        Command::Fbp { sinogram, motion } => cmd_fbp(&cfg, out, sinogram, motion.as_deref(), &mut m)?,
        Command::TrainScore => cmd_train(&cfg, c, &mut m)?,
        Command::Likelihood {
            image,
            weights,
            gradient,
        } => cmd_likelihood(&cfg, c, image, weights.as_deref(), *gradient, &mut m)?,
        Command::Compensate {
            sinogram,
            weights,
            reference,
        } => cmd_compensate(&cfg, c, sinogram, weights.as_deref(), reference.as_deref(), &mut m)?,
        Command::Eval {
            truth,
            recon,
            gt_motion,
            est_motion,
            label,
        } => cmd_eval(&cfg, out, [truth, recon, gt_motion, est_motion], label, &mut m)?,
        Command::Report {
            evals,
            panel_rows,
            row_len,
        } => cmd_report(&cfg, out, evals, panel_rows, *row_len, &mut m)?,
        Command::Experiment {
            cases,
            first_case,
            weights,
        } => cmd_experiment(&mut cfg, c, *cases, *first_case, weights.as_deref(), &mut m)?,
        Command::Rerun { manifest } => return cmd_rerun(manifest, out),
    }
    m.collect_outputs(out)?;
    m.write(out)
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Phantom { .. } => "phantom",
        Command::Project { .. } => "project",
        Command::Perturb => "perturb",
        Command::Fbp { .. } => "fbp",
        Command::TrainScore => "train-score",
        Command::Likelihood { .. } => "likelihood",
        Command::Compensate { .. } => "compensate",
        Command::Eval { .. } => "eval",
        Command::Report { .. } => "report",
        Command::Experiment { .. } => "experiment",
        Command::Rerun { .. } => "rerun",
    }
}

fn window(cfg: &ExperimentConfig) -> (f64, f64) {
    (cfg.metrics.window[0], cfg.metrics.window[1])
}

fn write_image_with_png(cfg: &ExperimentConfig, image: &Image, dir: &Path, stem: &str) -> Result<()> {
    write_image(image, &dir.join(format!("{stem}.f32raw")))?;
    let (lo, hi) = window(cfg);
    write_png(image, lo, hi, &dir.join(format!("{stem}.png")))
}

fn cmd_phantom(cfg: &ExperimentConfig, c: &Common, sl: bool, m: &mut RunManifest) -> Result<()> {
    let p = &cfg.phantom;
    let image = if sl {
        shepp_logan(p.shape(), p.spacing_mm, p.supersample)?
    } else {
        let seed = c.seed.unwrap_or(cfg.seeds.phantom);
        m.seed("phantom", seed);
        pipeline::phantom(cfg, seed)?
    };
    m.parameter("shepp_logan", sl);
    write_image_with_png(cfg, &image, &c.out_dir, "phantom")
}

fn load_motion(path: Option<&Path>, m: &mut RunManifest) -> Result<Option<MotionSpline>> {
    path.map(|p| {
        m.input("motion", p)?;
        read_motion(p)
    })
    .transpose()
}

fn cmd_project(cfg: &ExperimentConfig, out: &Path, image: &Path, motion: Option<&Path>, m: &mut RunManifest) -> Result<()> {
    m.input("image", image)?;
    let x = read_image(image)?;
    let motion = load_motion(motion, m)?;
    let sino = pipeline::project(cfg, &x, motion.as_ref())?;
    write_sinogram(&sino, &out.join("sinogram.f32raw"))?;
    let max = sino.data().iter().fold(0.0f64, |a, v| a.max(*v));
    let preview = Image::new(cfg.geometry.n_views, cfg.geometry.detector_bins, 1.0, sino.into_data())?;
    write_png(&preview, 0.0, max.max(f64::MIN_POSITIVE), &out.join("sinogram.png"))
}

fn cmd_perturb(cfg: &ExperimentConfig, c: &Common, m: &mut RunManifest) -> Result<()> {
    let seed = c.seed.unwrap_or(cfg.seeds.perturbation);
    m.seed("perturbation", seed);
    write_motion(&pipeline::perturbation(cfg, seed)?, &c.out_dir.join("motion.json"))
}

fn cmd_fbp(cfg: &ExperimentConfig, out: &Path, sinogram: &Path, motion: Option<&Path>, m: &mut RunManifest) -> Result<()> {
    m.input("sinogram", sinogram)?;
    let sino = read_sinogram(sinogram)?;
    let motion = load_motion(motion, m)?;
    let recon = pipeline::fbp(&sino, motion.as_ref(), cfg.phantom.shape(), cfg.phantom.spacing_mm)?;
    write_image_with_png(cfg, &recon, out, "recon")
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    initial_smoothed: Option<f64>,
    final_smoothed: Option<f64>,
    losses: &'a [f64],
    smoothed: &'a [f64],
}

fn train_and_save(cfg: &ExperimentConfig, dir: &Path, m: &mut RunManifest) -> Result<ScoreNet> {
    m.seed("train", cfg.seeds.train);
    m.seed("training_data", cfg.seeds.training_data);
    let data = pipeline::training_set(cfg)?;
    let (net, report) = pipeline::train_score(cfg, &data, |_, _| {})?;
    save_weights(&net, cfg.scorenet.normalization, &dir.join("weights.f32raw"))?;
    io::write_json(
        &dir.join("train_report.json"),
        &TrainSummary {
            initial_smoothed: report.initial_smoothed(),
            final_smoothed: report.final_smoothed(),
            losses: &report.losses,
            smoothed: &report.smoothed,
        },
    )?;
    Ok(net)
}

fn cmd_train(cfg: &ExperimentConfig, c: &Common, m: &mut RunManifest) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = c.seed {
        cfg.seeds.train = s;
    }
    train_and_save(&cfg, &c.out_dir, m).map(|_| ())
}

fn load_net(cfg: &ExperimentConfig, weights: Option<&Path>, m: &mut RunManifest) -> Result<(ScoreNet, Normalization)> {
    let path = weights
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.weights.clone())
        .ok_or_else(|| Error::Config("the likelihood objective needs --weights or paths.weights".into()))?;
    m.input("weights", &path)?;
    m.input("weights_manifest", &io::sidecar_path(&path))?;
    let (net, manifest) = load_weights(&path)?;
    let schedule = cfg.schedule()?;
    if *net.schedule() != schedule {
        return Err(Error::Core(ctmoco_core::Error::IncompatibleWeights(format!(
            "weights were trained for sigma in [{}, {}], config uses [{}, {}]",
            manifest.sigma_min,
            manifest.sigma_max,
            schedule.sigma_min(),
            schedule.sigma_max()
        ))));
    }
    Ok((net, manifest.normalization))
}

#[derive(Serialize)]
struct LikelihoodOutput {
    logp: f64,
    trace_mode: TraceMode,
    probes: usize,
    seed: u64,
}

fn cmd_likelihood(
    cfg: &ExperimentConfig,
    c: &Common,
    image: &Path,
    weights: Option<&Path>,
    gradient: bool,
    m: &mut RunManifest,
) -> Result<()> {
    m.input("image", image)?;
    let x = read_image(image)?;
    let (net, norm) = load_net(cfg, weights, m)?;
    let seed = c.seed.unwrap_or(cfg.seeds.optimizer);
    m.seed("probes", seed);
    let (logp, grad) = pipeline::likelihood(cfg, &net, norm, &x, seed)?;
    io::write_json(
        &c.out_dir.join("likelihood.json"),
        &LikelihoodOutput {
            logp,
            trace_mode: cfg.trace.mode,
            probes: cfg.trace.probes,
            seed,
        },
    )?;
    if gradient {
        write_image(&x.with_data(grad)?, &c.out_dir.join("gradient.f32raw"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CompensationSummary<'a> {
    status: &'a RunStatus,
    r0: f64,
    initial_value: f64,
    final_value: f64,
    iterations: usize,
}

fn write_compensation(cfg: &ExperimentConfig, dir: &Path, result: &ctmoco_core::optimizer::Compensation, spline: &MotionSpline) -> Result<()> {
    write_motion(spline, &dir.join("est_motion.json"))?;
    write_image_with_png(cfg, &result.image, dir, "compensated")?;
    write_trace(&result.trace, &dir.join("trace.jsonl"))?;
    let first = result.trace.first().map_or(f64::NAN, |r| r.value);
    let last = result.trace.last().map_or(f64::NAN, |r| r.value);
    io::write_json(
        &dir.join("result.json"),
        &CompensationSummary {
            status: &result.status,
            r0: result.r0,
            initial_value: first,
            final_value: last,
            iterations: result.trace.len().saturating_sub(1),
        },
    )
}

fn cmd_compensate(
    cfg: &ExperimentConfig,
    c: &Common,
    sinogram: &Path,
    weights: Option<&Path>,
    reference: Option<&Path>,
    m: &mut RunManifest,
) -> Result<()> {
    m.input("sinogram", sinogram)?;
    let sino = read_sinogram(sinogram)?;
    let kind = c.objective.unwrap_or(ObjectiveKind::Likelihood);
    let seed = c.seed.unwrap_or(cfg.seeds.optimizer);
    m.seed("optimizer", seed);
    m.parameter("objective", kind);
    m.parameter("optimizer", cfg.optimizer.with_seed(seed));
    let (result, spline) = match kind {
        ObjectiveKind::MseOracle => {
            let path = reference.ok_or_else(|| Error::Config("the mse-oracle objective needs --reference".into()))?;
            m.input("reference", path)?;
            let obj = MseObjective::new(read_image(path)?);
            pipeline::compensate_sinogram(cfg, &sino, &obj, seed)?
        }
        ObjectiveKind::Likelihood => {
            let (net, norm) = load_net(cfg, weights, m)?;
            let obj = pipeline::likelihood_objective(cfg, net, norm)?;
            pipeline::compensate_sinogram(cfg, &sino, &obj, seed)?
        }
    };
    m.parameter("calibrated_r0", result.r0);
    write_compensation(cfg, &c.out_dir, &result, &spline)
}

fn cmd_eval(cfg: &ExperimentConfig, out: &Path, paths: [&PathBuf; 4], label: &str, m: &mut RunManifest) -> Result<()> {
    let [truth, recon, gt, est] = paths;
    for (name, p) in [("truth", truth), ("recon", recon), ("gt_motion", gt), ("est_motion", est)] {
        m.input(name, p)?;
    }
    let metrics = pipeline::evaluate(cfg, &read_image(truth)?, &read_image(recon)?, &read_motion(gt)?, &read_motion(est)?)?;
    let record = EvalRecord {
        label: label.into(),
        case: None,
        metrics,
    };
    io::write_json(&out.join(format!("eval_{label}.json")), &record)
}

fn cmd_report(
    cfg: &ExperimentConfig,
    out: &Path,
    evals: &[PathBuf],
    panel: &[PathBuf],
    row_len: usize,
    m: &mut RunManifest,
) -> Result<()> {
    let mut records = Vec::with_capacity(evals.len());
    for (i, p) in evals.iter().enumerate() {
        m.input(&format!("eval_{i}"), p)?;
        records.push(io::read_json::<EvalRecord>(p)?);
    }
    write_reports(&records, out)?;
    if !panel.is_empty() {
        let images = panel
            .iter()
            .enumerate()
            .map(|(i, p)| {
                m.input(&format!("panel_{i}"), p)?;
                read_image(p)
            })
            .collect::<Result<Vec<_>>>()?;
        let row_len = if row_len == 0 { images.len() } else { row_len };
        let rows: Vec<Vec<&Image>> = images.chunks(row_len).map(|r| r.iter().collect()).collect();
        let (lo, hi) = window(cfg);
        io::write_panel(&rows, lo, hi, &out.join("panel.png"))?;
    }
    Ok(())
}

fn write_case(cfg: &ExperimentConfig, dir: &Path, o: &CaseOutcome) -> Result<Vec<EvalRecord>> {
    let d = dir.join(format!("case_{:03}", o.index));
    write_image_with_png(cfg, &o.truth, &d, "truth")?;
    write_image_with_png(cfg, &o.init, &d, "init")?;
    write_motion(&o.gt_motion, &d.join("gt_motion.json"))?;
    write_compensation(cfg, &d, &o.result, &o.est_motion)?;
    let records: Vec<EvalRecord> = [("init", o.init_metrics), ("final", o.final_metrics)]
        .into_iter()
        .map(|(label, metrics)| EvalRecord {
            label: label.into(),
            case: Some(o.index),
            metrics,
        })
        .collect();
    for r in &records {
        io::write_json(&d.join(format!("eval_{}.json", r.label)), r)?;
    }
    Ok(records)
}

fn cmd_experiment(
    cfg: &mut ExperimentConfig,
    c: &Common,
    cases: Option<usize>,
    first_case: usize,
    weights: Option<&Path>,
    m: &mut RunManifest,
) -> Result<()> {
    if let Some(s) = c.seed {
        cfg.seeds.phantom = s;
        m.config = cfg.clone();
        m.config_sha256 = cfg.hash();
    }
    let n = cases.unwrap_or(cfg.experiment.cases);
    if n == 0 {
        return Err(Error::Config("--cases must be positive".into()));
    }
    let kind = c.objective.unwrap_or(ObjectiveKind::Likelihood);
    m.parameter("objective", kind);
    m.parameter("cases", [first_case, first_case + n]);
    for (k, v) in [
        ("phantom", cfg.seeds.phantom),
        ("perturbation", cfg.seeds.perturbation),
        ("optimizer", cfg.seeds.optimizer),
    ] {
        m.seed(k, v);
    }
    let out = c.out_dir.as_path();
    let likelihood = match kind {
        ObjectiveKind::MseOracle => None,
        ObjectiveKind::Likelihood => {
            let (net, norm) = match weights {
                Some(_) => load_net(cfg, weights, m)?,
                None => (train_and_save(cfg, out, m)?, cfg.scorenet.normalization),
            };
            Some(pipeline::likelihood_objective(cfg, net, norm)?)
        }
    };
    let objective = match &likelihood {
        Some(obj) => CaseObjective::Likelihood(obj),
        None => CaseObjective::MseOracle,
    };
    let outcomes = pipeline::run_cases(cfg, first_case..first_case + n, &objective, c.jobs, |_| {})?;
    let mut records = Vec::new();
    for o in &outcomes {
        records.extend(write_case(cfg, out, o)?);
    }
    write_reports(&records, out)?;
    let show = outcomes.len().min(4);
    let rows: Vec<Vec<&Image>> = outcomes[..show]
        .iter()
        .map(|o| vec![&o.truth, &o.init, &o.compensated])
        .collect();
    let (lo, hi) = window(cfg);
    io::write_panel(&rows, lo, hi, &out.join("panel.png"))
}

fn cmd_rerun(manifest_path: &Path, out: &Path) -> Result<()> {
    let recorded = RunManifest::read(manifest_path)?;
    if recorded.command == "rerun" {
        return Err(Error::Config("cannot rerun a rerun".into()));
    }
    recorded.verify_inputs()?;
    let mut cli = Cli::try_parse_from(std::iter::once("ctmoco".to_string()).chain(recorded.args.iter().cloned()))
        .map_err(|e| Error::Config(e.to_string()))?;
    cli.common.out_dir = out.to_path_buf();
    // The recorded config already carries any --trace-mode override.
    cli.common.trace_mode = None;
    run(&cli, recorded.args.clone(), Some(recorded.config.clone()))?;
    let fresh = RunManifest::read(&out.join(FILE_NAME))?;
    let diff = OutputDiff::between(&recorded.outputs, &fresh.outputs);
    io::write_json(&out.join("rerun.json"), &diff)?;
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::Mismatch(format!(
            "{} changed, {} missing, {} extra",
            diff.changed.len(),
            diff.missing.len(),
            diff.extra.len()
        )))
    }
}
