//! Pipeline stages on in-memory values. The CLI and the batch runner are thin
//! layers over these functions.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ctmoco_core::ctrecon::{backproject, filter_sinogram, forward_project, Sinogram};
use ctmoco_core::metrics::CaseMetrics;
use ctmoco_core::motion::{random_perturbation, MotionSpline};
use ctmoco_core::optimizer::{compensate, Compensation, CompensationProblem, LikelihoodObjective, MseObjective, Objective};
use ctmoco_core::scorenet::{train, DatasetSource, ScoreNet, TrainReport};
use ctmoco_core::{Image, SeededRng, Shape};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TrainingImages};
use crate::error::{Result, StageExt};
use crate::weights::Normalization;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Likelihood,
    MseOracle,
}

pub fn phantom(cfg: &ExperimentConfig, seed: u64) -> Result<Image> {
    cfg.phantom.sample(seed).stage("phantom")
}

pub fn perturbation(cfg: &ExperimentConfig, seed: u64) -> Result<MotionSpline> {
    random_perturbation(&cfg.perturbation.with_seed(seed), cfg.geometry.n_views).stage("perturb")
}

/// Simulated measurement of `image` under `motion`, rounded to storage precision.
pub fn project(cfg: &ExperimentConfig, image: &Image, motion: Option<&MotionSpline>) -> Result<Sinogram> {
    let per_view = motion.map(MotionSpline::per_view);
    let sino = forward_project(image, &cfg.geometry, per_view.as_deref()).stage("project")?;
    Ok(sino.quantized_f32())
}

pub fn fbp(sinogram: &Sinogram, motion: Option<&MotionSpline>, shape: Shape, spacing: f64) -> Result<Image> {
    let per_view = motion.map(MotionSpline::per_view);
    let filtered = filter_sinogram(sinogram).stage("fbp")?;
    backproject(&filtered, per_view.as_deref(), shape, spacing).stage("fbp")
}

/// The images the score network is fitted to.
pub fn training_set(cfg: &ExperimentConfig) -> Result<DatasetSource> {
    let shape = cfg.phantom.shape();
    let images = (0..cfg.scorenet.dataset_size as u64)
        .map(|i| {
            let x = phantom(cfg, cfg.seeds.training_data + i)?;
            let x = match cfg.scorenet.training_images {
                TrainingImages::Phantom => x,
                TrainingImages::Reconstruction => {
                    let sino = project(cfg, &x, None)?;
                    fbp(&sino, None, shape, cfg.phantom.spacing_mm)?
                }
            };
            let n = cfg.scorenet.normalization;
            Ok(x.data().iter().map(|v| (v - n.offset) * n.scale).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    DatasetSource::new(shape, images).stage("train-score")
}

pub fn train_score(
    cfg: &ExperimentConfig,
    data: &DatasetSource,
    on_step: impl FnMut(usize, f64),
) -> Result<(ScoreNet, TrainReport)> {
    let schedule = cfg.schedule()?;
    let mut net = ScoreNet::new(cfg.scorenet.architecture, schedule, cfg.seeds.train).stage("train-score")?;
    let report = train(&mut net, data, &cfg.scorenet.train_config(cfg.seeds.train), on_step).stage("train-score")?;
    Ok((net, report))
}

pub fn likelihood_objective(
    cfg: &ExperimentConfig,
    net: ScoreNet,
    normalization: Normalization,
) -> Result<LikelihoodObjective<ScoreNet>> {
    let mut obj = LikelihoodObjective::new(net, cfg.schedule()?, cfg.ode, cfg.trace.mode, cfg.trace.probes);
    obj.offset = normalization.offset;
    obj.scale = normalization.scale;
    Ok(obj)
}

/// Log-likelihood of `image` and its gradient, drawing probes from `(seed, 0)`.
pub fn likelihood(
    cfg: &ExperimentConfig,
    net: &ScoreNet,
    normalization: Normalization,
    image: &Image,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let obj = likelihood_objective(cfg, net.clone(), normalization)?;
    obj.evaluate(image, SeededRng::new(seed, 0)).stage("likelihood")
}

pub fn compensate_sinogram(
    cfg: &ExperimentConfig,
    sinogram: &Sinogram,
    objective: &impl Objective,
    seed: u64,
) -> Result<(Compensation, MotionSpline)> {
    let problem = CompensationProblem {
        filtered: filter_sinogram(sinogram).stage("compensate")?,
        shape: cfg.phantom.shape(),
        spacing: cfg.phantom.spacing_mm,
        nodes: cfg.spline.nodes,
    };
    let start = Instant::now();
    let clock = move || start.elapsed().as_secs_f64();
    let result = compensate(&problem, objective, &cfg.optimizer.with_seed(seed), Some(&clock)).stage("compensate")?;
    let spline = MotionSpline::unpack(cfg.spline.nodes, cfg.geometry.n_views, &result.gamma).stage("compensate")?;
    Ok((result, spline))
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    truth: &Image,
    recon: &Image,
    gt_motion: &MotionSpline,
    est_motion: &MotionSpline,
) -> Result<CaseMetrics> {
    CaseMetrics::evaluate(
        truth,
        recon,
        cfg.metrics.data_range,
        &gt_motion.per_view(),
        &est_motion.per_view(),
        &cfg.geometry,
    )
    .stage("eval")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSeeds {
    pub phantom: u64,
    pub perturbation: u64,
    pub optimizer: u64,
}

impl CaseSeeds {
    pub fn for_case(cfg: &ExperimentConfig, index: usize) -> Self {
        let k = index as u64;
        Self {
            phantom: cfg.seeds.phantom + k,
            perturbation: cfg.seeds.perturbation + k,
            optimizer: cfg.seeds.optimizer + k,
        }
    }
}

/// Everything one simulated compensation case produces.
#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub index: usize,
    pub seeds: CaseSeeds,
    /// Motion-free reconstruction: the measured data reconstructed with the
    /// true trajectory.
    pub truth: Image,
    /// Reconstruction assuming no motion.
    pub init: Image,
    pub compensated: Image,
    pub gt_motion: MotionSpline,
    pub est_motion: MotionSpline,
    pub init_metrics: CaseMetrics,
    pub final_metrics: CaseMetrics,
    pub result: Compensation,
}

pub enum CaseObjective<'a> {
    MseOracle,
    Likelihood(&'a LikelihoodObjective<ScoreNet>),
}

/// Phantom → perturbed measurement → compensation → metrics.
pub fn run_case(cfg: &ExperimentConfig, index: usize, objective: &CaseObjective<'_>) -> Result<CaseOutcome> {
    let seeds = CaseSeeds::for_case(cfg, index);
    let x = phantom(cfg, seeds.phantom)?;
    let gt_motion = perturbation(cfg, seeds.perturbation)?;
    let sino = project(cfg, &x, Some(&gt_motion))?;
    let (shape, spacing) = (x.shape(), x.spacing());
    let truth = fbp(&sino, Some(&gt_motion), shape, spacing)?;
    let (result, est_motion) = match objective {
        CaseObjective::MseOracle => compensate_sinogram(cfg, &sino, &MseObjective::new(truth.clone()), seeds.optimizer)?,
        CaseObjective::Likelihood(obj) => compensate_sinogram(cfg, &sino, *obj, seeds.optimizer)?,
    };
    let zero = MotionSpline::zeros(cfg.spline.nodes, cfg.geometry.n_views).stage("compensate")?;
    let init = fbp(&sino, None, shape, spacing)?;
    let init_metrics = evaluate(cfg, &truth, &init, &gt_motion, &zero)?;
    let final_metrics = evaluate(cfg, &truth, &result.image, &gt_motion, &est_motion)?;
    Ok(CaseOutcome {
        index,
        seeds,
        truth,
        init,
        compensated: result.image.clone(),
        gt_motion,
        est_motion,
        init_metrics,
        final_metrics,
        result,
    })
}

/// Runs `cases` cases on up to `jobs` threads. Results are in case order and
/// do not depend on `jobs`.
pub fn run_cases(
    cfg: &ExperimentConfig,
    cases: std::ops::Range<usize>,
    objective: &CaseObjective<'_>,
    jobs: usize,
    on_done: impl Fn(&CaseOutcome) + Sync,
) -> Result<Vec<CaseOutcome>> {
    let indices: Vec<usize> = cases.collect();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CaseOutcome>>>> = Mutex::new(indices.iter().map(|_| None).collect());
    let worker = || loop {
        let k = next.fetch_add(1, Ordering::Relaxed);
        let Some(&index) = indices.get(k) else { break };
        let outcome = run_case(cfg, index, objective);
        if let Ok(o) = &outcome {
            on_done(o);
        }
        slots.lock().expect("no worker panicked")[k] = Some(outcome);
    };
    let jobs = jobs.clamp(1, indices.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(&worker);
            }
        });
    }
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|slot| slot.expect("every case ran"))
        .collect()
}
