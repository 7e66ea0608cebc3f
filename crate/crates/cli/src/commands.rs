use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _, Result};
use clap::Args;
use rand::Rng;
use molfield::cinr::{self, FieldParameters};
use molfield::encoder::CanonicalFrame;
use molfield::eval::{self, EvalOptions, GridBox, MetricReport, MetricRow};
use molfield::fshn;
use molfield::geom;
use molfield::model::{Model, ModelConfig, Preset, Task};
use molfield::train::{self, mix_seed, Sample, TaskData, TrainConfig};

use crate::config::Settings;
use crate::data::{self, geometry_targets, synth_molecules, write_text};
use crate::Global;

pub(crate) struct Context {
    seed: u64,
    preset: Option<Preset>,
    settings: Settings,
}

impl Context {
    pub(crate) fn new(global: &Global, settings: Settings) -> Result<Self> {
        let seed = settings.pick(global.seed, "seed", 0u64)?;
        let preset = settings.pick_opt(global.preset.clone(), "preset")?;
        let preset = preset.map(|p: String| Preset::parse(&p)).transpose()?;
        Ok(Self { seed, preset, settings })
    }

    fn preset_or(&self, default: Preset) -> Preset {
        self.preset.unwrap_or(default)
    }

    fn path(&self, flag: Option<PathBuf>, key: &str, default: &str) -> Result<PathBuf> {
        Ok(self.settings.pick_opt(flag, key)?.unwrap_or_else(|| PathBuf::from(default)))
    }

    fn required_path(&self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf> {
        self.settings.pick_opt(flag, key)?.ok_or_else(|| anyhow!("--{} is required", key.replace('_', "-")))
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6e}")
}

/// Training hyper-parameters shared by every command that trains.
#[derive(Args, Debug, Clone, Default)]
pub struct HyperArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_latent: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Weight of the eikonal term
    #[arg(long)]
    lambda: Option<f64>,
    /// Query points per sample and step
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    surface_points: Option<usize>,
    #[arg(long)]
    decay_interval: Option<usize>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    freeze_encoder: bool,
}

impl HyperArgs {
    fn apply(&self, ctx: &Context, model: ModelConfig, default_epochs: usize) -> Result<TrainConfig> {
        let s = &ctx.settings;
        let mut cfg = TrainConfig::new(model);
        cfg.epochs = s.pick(self.epochs, "epochs", default_epochs)?;
        cfg.lr = s.pick(self.lr, "lr", cfg.lr)?;
        cfg.lr_latent = s.pick(self.lr_latent, "lr_latent", cfg.lr_latent)?;
        cfg.batch_size = s.pick(self.batch_size, "batch_size", cfg.batch_size)?;
        cfg.lambda = s.pick(self.lambda, "lambda", cfg.lambda)?;
        cfg.queries.n = s.pick(self.queries, "queries", cfg.queries.n)?;
        cfg.surface_points = s.pick(self.surface_points, "surface_points", cfg.surface_points)?;
        cfg.decay_interval = s.pick(self.decay_interval, "decay_interval", cfg.decay_interval)?;
        cfg.decay_factor = s.pick(self.decay_factor, "decay_factor", cfg.decay_factor)?;
        cfg.freeze_encoder = s.pick_switch(self.freeze_encoder, "freeze_encoder")?;
        cfg.seed = ctx.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    atoms: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Write this many independent molecules with property targets instead
    /// of a trajectory
    #[arg(long)]
    molecules: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub(crate) fn synth(ctx: &Context, a: SynthArgs) -> Result<String> {
    let s = &ctx.settings;
    let atoms = s.pick(a.atoms, "atoms", 4usize)?;
    let out = ctx.path(a.out, "out", "synth.xyz")?;
    if let Some(n) = s.pick_opt(a.molecules, "molecules")? {
        let mols = synth_molecules(ctx.seed, n, atoms)?;
        let data: Vec<_> = mols.into_iter().map(|c| (c.clone(), geometry_targets(&c))).collect();
        write_text(&out, &data::property_dataset_xyz(&data))?;
        return Ok(format!("synth: {n} molecules of {atoms} atoms -> {}", out.display()));
    }
    let frames = s.pick(a.frames, "frames", 8usize)?;
    let traj = geom::synth_trajectory(ctx.seed, atoms, frames)?;
    write_text(&out, &geom::write_trajectory_xyz(&traj))?;
    Ok(format!("synth: {frames} frames of {atoms} atoms -> {}", out.display()))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// dynamics, property or generation
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Checkpoint whose matching tensors initialize the model
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Per-epoch loss log (CSV)
    #[arg(long)]
    log: Option<PathBuf>,
}

fn load_task_data(task: Task, path: &Path) -> Result<TaskData> {
    Ok(match task {
        Task::Dynamics => TaskData::Dynamics(vec![data::load_trajectory(path)?]),
        Task::Property => TaskData::Property(data::load_property_dataset(path)?),
        Task::Generation => TaskData::Generation(data::load_configs(path)?),
    })
}

fn model_config(ctx: &Context, task: Task, data: &TaskData, default: Preset) -> ModelConfig {
    let mut m = ModelConfig::preset(ctx.preset_or(default), task);
    if let TaskData::Property(v) = data {
        m.n_props = v[0].1.len();
    }
    m
}

pub(crate) fn train(ctx: &Context, a: TrainArgs) -> Result<String> {
    let s = &ctx.settings;
    let task = Task::parse(&s.pick_opt(a.task, "task")?.ok_or_else(|| anyhow!("--task is required"))?)?;
    let data_path = ctx.required_path(a.data, "data")?;
    let data = load_task_data(task, &data_path)?;
    let cfg = a.hyper.apply(ctx, model_config(ctx, task, &data, Preset::Desk), 100)?;
    let init = match s.pick_opt(a.init, "init")? {
        Some(p) => Some(molfield::params::ParamStore::load(&p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let out = train::train_task(&cfg, &data, init.as_ref())?;
    let ckpt = ctx.path(a.checkpoint, "checkpoint", "model.ckpt")?;
    let log = ctx.path(a.log, "log", "train_log.csv")?;
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    out.model.save(&ckpt)?;
    write_text(&log, &train::log_csv(&out.log))?;
    let last = out.log.last().map_or(f64::NAN, |e| e.loss);
    Ok(format!("train: task={} epochs={} final_loss={} -> {}", task.name(), cfg.epochs, fmt(last), ckpt.display()))
}

#[derive(Args, Debug, Default)]
pub struct EvalGridArgs {
    /// Lattice points per axis
    #[arg(long)]
    resolution: Option<usize>,
    /// Surface samples per field for CD and NC
    #[arg(long)]
    samples: Option<usize>,
}

impl EvalGridArgs {
    fn options(&self, ctx: &Context) -> Result<EvalOptions> {
        let d = EvalOptions::default();
        Ok(EvalOptions {
            resolution: ctx.settings.pick(self.resolution, "resolution", d.resolution)?,
            surface_points: ctx.settings.pick(self.samples, "samples", d.surface_points)?,
            seed: ctx.seed,
            ..d
        })
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated subset of iou,cd,nc,mae,loss
    #[arg(long)]
    metrics: Option<String>,
    #[command(flatten)]
    grid: EvalGridArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn load_model(ctx: &Context, flag: Option<PathBuf>) -> Result<Model> {
    let path = ctx.required_path(flag, "checkpoint")?;
    Model::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub(crate) fn eval(ctx: &Context, a: EvalArgs) -> Result<String> {
    let model = load_model(ctx, a.checkpoint)?;
    let task = model.config.task;
    let data = load_task_data(task, &ctx.required_path(a.data, "data")?)?;
    let default = match task {
        Task::Dynamics => "iou,cd,nc",
        Task::Property => "mae",
        Task::Generation => "loss",
    };
    let metrics: Vec<String> = ctx.settings.pick_list(a.metrics, "metrics", default)?;
    let allowed: &[&str] = match task {
        Task::Dynamics => &["iou", "cd", "nc"],
        Task::Property => &["mae"],
        Task::Generation => &["loss"],
    };
    if let Some(m) = metrics.iter().find(|m| !allowed.contains(&m.as_str())) {
        bail!("metric `{m}` does not apply to a {} checkpoint (use {})", task.name(), allowed.join(","));
    }
    let mut report = MetricReport::default();
    match &data {
        TaskData::Dynamics(trajs) => {
            let traj = &trajs[0];
            let opts = a.grid.options(ctx)?;
            for (k, (frame, &t)) in traj.frames().iter().zip(traj.times()).enumerate() {
                let m = eval::frame_metrics(&model, &traj.frames()[0], frame, t, &opts)?;
                for (name, v) in [("iou", m.iou), ("cd", m.chamfer), ("nc", m.normal_consistency)] {
                    if metrics.iter().any(|x| x == name) {
                        report.push(MetricRow { frame: Some(k), horizon: Some(t), ..MetricRow::new(name, v) });
                    }
                }
            }
        }
        TaskData::Property(set) => {
            let preds = set.iter().map(|(c, _)| model.predict_property(c)).collect::<molfield::Result<Vec<_>>>()?;
            let targets: Vec<Vec<f64>> = set.iter().map(|(_, y)| y.clone()).collect();
            for (j, v) in eval::mae(&preds, &targets)?.into_iter().enumerate() {
                let name = if targets[0].len() == 1 { "mae".to_string() } else { format!("mae_{j}") };
                report.push(MetricRow::new(&name, v));
            }
        }
        TaskData::Generation(set) => {
            let cfg = TrainConfig { seed: ctx.seed, ..TrainConfig::new(model.config.clone()) };
            for i in 0..set.len() {
                let v = train::evaluate_sample(&model, &cfg, &data, Sample::Generation(i), mix_seed(ctx.seed, i as u64, 0))?;
                report.push(MetricRow { frame: Some(i), ..MetricRow::new("loss", v) });
            }
        }
    }
    let out = ctx.path(a.report, "report", "eval.csv")?;
    write_text(&out, &report.to_csv())?;
    print!("{}", report.summary());
    let means: Vec<String> = metrics
        .iter()
        .map(|m| {
            let v: Vec<f64> = report.rows.iter().filter(|r| r.metric.starts_with(m.as_str())).map(|r| r.value).collect();
            format!("{m}={}", fmt(eval::mean_and_se(&v).0))
        })
        .collect();
    Ok(format!("eval: {} rows, mean {} -> {}", report.rows.len(), means.join(" "), out.display()))
}

#[derive(Args, Debug)]
pub struct HorizonArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// End of the training window
    #[arg(long)]
    t0: Option<f64>,
    /// Comma-separated frame times; defaults to every frame after t0
    #[arg(long)]
    horizons: Option<String>,
    #[command(flatten)]
    grid: EvalGridArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

pub(crate) fn horizon(ctx: &Context, a: HorizonArgs) -> Result<String> {
    let model = load_model(ctx, a.checkpoint)?;
    let traj = data::load_trajectory(&ctx.required_path(a.data, "data")?)?;
    let t0 = ctx.settings.pick(a.t0, "t0", 0.5)?;
    let after: Vec<String> = traj.times().iter().filter(|&&t| t > t0).map(|t| t.to_string()).collect();
    let horizons: Vec<f64> = ctx.settings.pick_list(a.horizons, "horizons", &after.join(","))?;
    if horizons.is_empty() {
        bail!("no horizons after t0 = {t0}");
    }
    let report = eval::horizon_eval(&model, &traj, t0, &horizons, &a.grid.options(ctx)?)?;
    let out = ctx.path(a.report, "report", "horizon.csv")?;
    write_text(&out, &report.to_csv())?;
    print!("{}", report.summary());
    let flag = report.values("iou_nonincreasing").first().copied().unwrap_or(0.0);
    Ok(format!("horizon: {} horizons, iou_nonincreasing={flag} -> {}", horizons.len(), out.display()))
}

#[derive(Args, Debug)]
pub struct CorruptArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fractions: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    report: Option<PathBuf>,
}

pub(crate) fn corrupt_eval(ctx: &Context, a: CorruptArgs) -> Result<String> {
    let model = load_model(ctx, a.checkpoint)?;
    let set = data::load_property_dataset(&ctx.required_path(a.data, "data")?)?;
    let fractions: Vec<f64> = ctx.settings.pick_list(a.fractions, "fractions", "0,0.25,0.5,0.75")?;
    let seeds: Vec<u64> = ctx.settings.pick_list(a.seeds, "seeds", "0,1,2,3,4")?;
    let report = eval::corruption_eval(&model, &set, &fractions, &seeds)?;
    let out = ctx.path(a.report, "report", "corruption.csv")?;
    write_text(&out, &report.to_csv())?;
    let mut parts = Vec::new();
    for &f in &fractions {
        let v: Vec<f64> = report.rows.iter().filter(|r| r.corruption == Some(f)).map(|r| r.value).collect();
        let (m, se) = eval::mean_and_se(&v);
        parts.push(format!("{f}:{}±{}", fmt(m), fmt(se)));
    }
    Ok(format!("corrupt-eval: mae {} -> {}", parts.join(" "), out.display()))
}

#[derive(Args, Debug)]
pub struct DataRatioArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fractions of the training split to train on
    #[arg(long)]
    ratios: Option<String>,
    /// Fraction of molecules held out for testing
    #[arg(long)]
    holdout: Option<f64>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

pub(crate) fn data_ratio(ctx: &Context, a: DataRatioArgs) -> Result<String> {
    let set = data::load_property_dataset(&ctx.required_path(a.data, "data")?)?;
    let ratios: Vec<f64> = ctx.settings.pick_list(a.ratios, "ratios", "0.1,0.25,0.5,1.0")?;
    let holdout = ctx.settings.pick(a.holdout, "holdout", 0.2)?;
    let n_test = ((holdout * set.len() as f64).ceil() as usize).max(1);
    if n_test >= set.len() {
        bail!("holdout {holdout} leaves no training molecules out of {}", set.len());
    }
    let (train_set, test_set) = set.split_at(set.len() - n_test);
    let mut csv = String::from("ratio,train_size,mae\n");
    let mut parts = Vec::new();
    for &r in &ratios {
        if !(r > 0.0 && r <= 1.0) {
            bail!("ratio {r} outside (0, 1]");
        }
        let n = ((r * train_set.len() as f64).ceil() as usize).clamp(1, train_set.len());
        let data = TaskData::Property(train_set[..n].to_vec());
        let cfg = a.hyper.apply(ctx, model_config(ctx, Task::Property, &data, Preset::Desk), 50)?;
        let model = train::train_task(&cfg, &data, None)?.model;
        let preds = test_set.iter().map(|(c, _)| model.predict_property(c)).collect::<molfield::Result<Vec<_>>>()?;
        let targets: Vec<Vec<f64>> = test_set.iter().map(|(_, y)| y.clone()).collect();
        let per = eval::mae(&preds, &targets)?;
        let m = per.iter().sum::<f64>() / per.len() as f64;
        let _ = writeln!(csv, "{r},{n},{m:.10e}");
        parts.push(format!("{r}:{}", fmt(m)));
    }
    let out = ctx.path(a.report, "report", "data_ratio.csv")?;
    write_text(&out, &csv)?;
    Ok(format!("data-ratio: test mae {} -> {}", parts.join(" "), out.display()))
}

#[derive(Args, Debug)]
pub struct CorrelateArgs {
    #[arg(long)]
    molecules: Option<usize>,
    #[arg(long)]
    atoms: Option<usize>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Per-molecule reconstruction loss of a generation model against the
/// property error of a model fine-tuned from it.
pub(crate) fn correlate(ctx: &Context, a: CorrelateArgs) -> Result<String> {
    let n = ctx.settings.pick(a.molecules, "molecules", 30usize)?;
    let atoms = ctx.settings.pick(a.atoms, "atoms", 5usize)?;
    let mols = synth_molecules(ctx.seed, n, atoms)?;
    let gen_data = TaskData::Generation(mols.clone());
    let gen_cfg = a.hyper.apply(ctx, model_config(ctx, Task::Generation, &gen_data, Preset::Desk), 20)?;
    let gen_model = train::train_task(&gen_cfg, &gen_data, None)?.model;
    let recon = (0..n)
        .map(|i| train::evaluate_sample(&gen_model, &gen_cfg, &gen_data, Sample::Generation(i), mix_seed(ctx.seed, i as u64, 7)))
        .collect::<molfield::Result<Vec<_>>>()?;
    let prop_data = TaskData::Property(mols.iter().map(|c| (c.clone(), geometry_targets(c))).collect());
    let prop_cfg = a.hyper.apply(ctx, model_config(ctx, Task::Property, &prop_data, Preset::Desk), 20)?;
    let prop_model = train::train_task(&prop_cfg, &prop_data, Some(&gen_model.params))?.model;
    let mut errors = Vec::with_capacity(n);
    for c in &mols {
        let y = geometry_targets(c);
        let p = prop_model.predict_property(c)?;
        errors.push(y.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64);
    }
    let corr = eval::correlation_report(&recon, &errors)?;
    let mut csv = String::from("molecule,recon_loss,abs_error\n");
    for i in 0..n {
        let _ = writeln!(csv, "{i},{:.10e},{:.10e}", recon[i], errors[i]);
    }
    let out = ctx.path(a.report, "report", "correlation.csv")?;
    write_text(&out, &csv)?;
    Ok(format!(
        "correlate: n={n} pearson={} spearman={} -> {}",
        fmt(corr.pearson),
        fmt(corr.spearman),
        out.display()
    ))
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// dynamics, property, generation or all
    #[arg(long)]
    task: Option<String>,
    /// Central-difference step
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Largest relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Largest relative error between backpropagated and central-difference
/// gradients of one task loss, through encoder, decoder and field.
pub fn gradient_error(task: Task, preset: Preset, seed: u64, step: f64) -> Result<f64> {
    let traj = geom::synth_trajectory(seed, 4, 3)?;
    let (data, sample) = match task {
        Task::Dynamics => (TaskData::Dynamics(vec![traj.clone()]), Sample::Frame { traj: 0, frame: 1 }),
        Task::Property => (
            TaskData::Property(traj.frames().iter().map(|c| (c.clone(), geometry_targets(c))).collect()),
            Sample::Property(1),
        ),
        Task::Generation => (TaskData::Generation(traj.frames().to_vec()), Sample::Generation(0)),
    };
    let mut cfg = TrainConfig::new(ModelConfig::preset(preset, task));
    cfg.queries.n = 8;
    cfg.surface_points = 4;
    cfg.seed = seed;
    let mut model = Model::init(cfg.model.clone(), seed, traj.len())?;
    model.jitter_projections(0.1, mix_seed(seed, 0, 1));
    Ok(train::check_sample_gradients(&model, &cfg, &data, sample, mix_seed(seed, 0, 2), step)?)
}

pub(crate) fn gradcheck(ctx: &Context, a: GradcheckArgs) -> Result<String> {
    let which = ctx.settings.pick(a.task, "task", "all".to_string())?;
    let tasks: Vec<Task> = if which == "all" {
        vec![Task::Dynamics, Task::Property, Task::Generation]
    } else {
        vec![Task::parse(&which)?]
    };
    let step = ctx.settings.pick(a.step, "step", 1e-6)?;
    let mut csv = String::from("task,max_rel_err\n");
    let mut worst: f64 = 0.0;
    for task in tasks {
        let err = gradient_error(task, ctx.preset_or(Preset::Tiny), ctx.seed, step)?;
        let _ = writeln!(csv, "{},{err:.10e}", task.name());
        worst = worst.max(err);
    }
    let out = ctx.path(a.report, "report", "gradcheck.csv")?;
    write_text(&out, &csv)?;
    if !(worst <= GRADCHECK_TOLERANCE) {
        bail!("max relative gradient error {} exceeds {GRADCHECK_TOLERANCE:e}", fmt(worst));
    }
    Ok(format!("gradcheck: max_rel_err={} (tolerance {GRADCHECK_TOLERANCE:e}) -> {}", fmt(worst), out.display()))
}

#[derive(Args, Debug)]
pub struct InvarianceArgs {
    /// Random configurations, and rotations per configuration
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    atoms_min: Option<usize>,
    #[arg(long)]
    atoms_max: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Worst-case errors of the geometric guarantees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvarianceSummary {
    pub frame_equivariance: f64,
    pub field_invariance: f64,
    pub det_deviation: f64,
    pub chiral_gap: f64,
}

pub const FRAME_TOLERANCE: f64 = 1e-6;
pub const FIELD_TOLERANCE: f64 = 1e-6;
pub const DET_TOLERANCE: f64 = 1e-8;
pub const CHIRAL_MIN_GAP: f64 = 1e-3;

fn random_config(seed: u64, t: usize, atoms: (usize, usize)) -> Result<geom::MolecularConfiguration> {
    let mut rng = molfield::rng(mix_seed(seed, t as u64, 4));
    let n = rng.gen_range(atoms.0..=atoms.1);
    Ok(geom::synth_trajectory(mix_seed(seed, t as u64, 5), n, 2)?.frames()[0].clone())
}

/// Largest ‖Q(RX) − R·Q(X)‖_F over `configs` random configurations times
/// `rotations` random rotations each, with the largest |det Q − 1| seen.
pub fn frame_equivariance(model: &Model, seed: u64, configs: usize, rotations: usize, atoms: (usize, usize)) -> Result<(f64, f64)> {
    let (mut worst, mut det) = (0.0f64, 0.0f64);
    for t in 0..configs {
        let x = random_config(seed, t, atoms)?;
        let (_, f) = model.encode(&x)?;
        det = det.max((geom::det(&f.q) - 1.0).abs());
        for r in 0..rotations {
            let g = geom::random_rotation(mix_seed(seed, t as u64, 1000 + r as u64));
            let (_, fr) = model.encode(&geom::transform_config(&x, &g))?;
            det = det.max((geom::det(&fr.q) - 1.0).abs());
            worst = worst.max(geom::frobenius_diff(&fr.q, &geom::mat_mul(&g.rotation, &f.q)));
        }
    }
    Ok((worst, det))
}

/// Largest |f(g·x; g·X) − f(x; X)| of an untrained random field over
/// `trials` random rigid motions, 16 query points each.
pub fn field_invariance(model: &Model, seed: u64, trials: usize, atoms: (usize, usize)) -> Result<f64> {
    let arch = &model.config.field;
    let theta: FieldParameters = cinr::init_field_params(arch, mix_seed(seed, 0, 3));
    let mut worst = 0.0f64;
    for t in 0..trials {
        let x = random_config(seed, t, atoms)?;
        let (_, f) = model.encode(&x)?;
        let g = geom::random_rigid(mix_seed(seed, t as u64, 6));
        let (_, fg) = model.encode(&geom::transform_config(&x, &g))?;
        let pts: Vec<geom::Vec3> =
            geom::sample_queries(&x, &Default::default(), mix_seed(seed, t as u64, 7)).into_iter().take(16).collect();
        let a = theta.eval_batch(arch, &pts.iter().map(|&p| f.canonical_coords(p)).collect::<Vec<_>>());
        let b = theta.eval_batch(arch, &pts.iter().map(|&p| fg.canonical_coords(g.apply(p))).collect::<Vec<_>>());
        for (u, v) in a.iter().zip(&b) {
            worst = worst.max((u[0] - v[0]).abs());
        }
    }
    Ok(worst)
}

/// Largest distance between matched canonical coordinates of the chiral
/// test molecule and its mirror image, with the largest |det Q − 1|.
pub fn chiral_gap(model: &Model) -> Result<(f64, f64)> {
    let chiral = geom::chiral_config();
    let mirrored = geom::mirror(&chiral);
    let (_, fa) = model.encode(&chiral)?;
    let (_, fb) = model.encode(&mirrored)?;
    let det = (geom::det(&fa.q) - 1.0).abs().max((geom::det(&fb.q) - 1.0).abs());
    let gap = chiral
        .coords()
        .iter()
        .zip(mirrored.coords())
        .map(|(&a, &b)| geom::dist(fa.canonical_coords(a), fb.canonical_coords(b)))
        .fold(0.0, f64::max);
    Ok((gap, det))
}

/// Runs the frame, field and chirality checks with the encoder of a fresh
/// `preset` model.
pub fn invariance_suite(preset: Preset, seed: u64, trials: usize, atoms: (usize, usize)) -> Result<InvarianceSummary> {
    let model = Model::init(ModelConfig::preset(preset, Task::Dynamics), seed, 0)?;
    let (frame_equivariance, det_a) = frame_equivariance(&model, seed, trials, trials, atoms)?;
    let field_invariance = field_invariance(&model, seed, trials, atoms)?;
    let (chiral_gap, det_b) = chiral_gap(&model)?;
    Ok(InvarianceSummary { frame_equivariance, field_invariance, det_deviation: det_a.max(det_b), chiral_gap })
}

pub(crate) fn invariance(ctx: &Context, a: InvarianceArgs) -> Result<String> {
    let trials = ctx.settings.pick(a.trials, "trials", 100usize)?;
    let lo = ctx.settings.pick(a.atoms_min, "atoms_min", 3usize)?;
    let hi = ctx.settings.pick(a.atoms_max, "atoms_max", 12usize)?;
    if lo < 2 || hi < lo {
        bail!("atom range {lo}..{hi} is invalid");
    }
    let s = invariance_suite(ctx.preset_or(Preset::Desk), ctx.seed, trials, (lo, hi))?;
    let csv = format!(
        "check,value\nframe_equivariance,{:.10e}\nfield_invariance,{:.10e}\ndet_deviation,{:.10e}\nchiral_gap,{:.10e}\n",
        s.frame_equivariance, s.field_invariance, s.det_deviation, s.chiral_gap
    );
    let out = ctx.path(a.report, "report", "invariance.csv")?;
    write_text(&out, &csv)?;
    let checks = [
        ("max_frame_equivariance_err", s.frame_equivariance, FRAME_TOLERANCE),
        ("max_field_invariance_err", s.field_invariance, FIELD_TOLERANCE),
        ("max_det_deviation", s.det_deviation, DET_TOLERANCE),
    ];
    let mut lines = Vec::new();
    for (name, v, tol) in checks {
        if !(v < tol) {
            bail!("{name} = {} is not below {tol:e}", fmt(v));
        }
        lines.push(format!("{name} < {tol:e}"));
    }
    if !(s.chiral_gap > CHIRAL_MIN_GAP) {
        bail!("mirror image canonical coordinates differ by only {}", fmt(s.chiral_gap));
    }
    lines.push(format!("chiral_gap > {CHIRAL_MIN_GAP:e}"));
    Ok(lines.join("\n"))
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    /// Density a peak must exceed to become an atom
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Half-width (Å) of the cube searched for atoms
    #[arg(long)]
    extent: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

pub(crate) fn generate(ctx: &Context, a: GenerateArgs) -> Result<String> {
    let model = load_model(ctx, a.checkpoint)?;
    if model.config.task != Task::Generation {
        bail!("generate needs a generation checkpoint, got {}", model.config.task.name());
    }
    let s = &ctx.settings;
    let samples = s.pick(a.samples, "samples", 1usize)?;
    let threshold = s.pick(a.threshold, "threshold", 0.5)?;
    let resolution = s.pick(a.resolution, "resolution", eval::DEFAULT_RESOLUTION)?;
    let extent = s.pick(a.extent, "extent", 4.0)?;
    let bbox = GridBox::new([-extent; 3], [extent; 3])?;
    let mut xyz = String::new();
    let mut csv = String::from("sample,element,x,y,z\n");
    let mut total = 0;
    for i in 0..samples {
        let z = fshn::gaussian(mix_seed(ctx.seed, i as u64, 0), model.config.latent_dim);
        let (theta, _) = model.generate(&z, Some(mix_seed(ctx.seed, i as u64, 1)))?;
        let atoms = eval::extract_atoms(
            &theta,
            &model.config.field,
            &CanonicalFrame::identity(),
            &model.config.vocab,
            &bbox,
            resolution,
            threshold,
        )?;
        for at in &atoms {
            let sym = geom::elements::symbol(at.number).unwrap_or("X");
            let p = at.position;
            let _ = writeln!(csv, "{i},{sym},{:.10e},{:.10e},{:.10e}", p[0], p[1], p[2]);
        }
        total += atoms.len();
        if let Some(c) = eval::atoms_to_configuration(&atoms) {
            xyz.push_str(&geom::write_xyz_with_comment(&c, &format!("sample={i}")));
        }
    }
    let out = ctx.path(a.out, "out", "generated.xyz")?;
    let report = ctx.path(a.report, "report", "generated.csv")?;
    write_text(&out, &xyz)?;
    write_text(&report, &csv)?;
    Ok(format!("generate: {samples} samples, {total} atoms -> {}", out.display()))
}
