//! Generate-then-query training for the dynamics, property and generation
//! tasks.

mod adam;
pub mod losses;

use std::fmt::Write as _;

use rand::seq::SliceRandom;

pub use adam::{adam_step, adam_step_with, AdamState};
pub use losses::{
    combine_md, density_targets, loss_density, loss_eikonal, loss_md, loss_property, loss_sdf, MdLoss,
};

use crate::cinr::{self, canonical_points};
use crate::encoder::{self, EncodedNodes};
use crate::error::{Error, Result};
use crate::fshn;
use crate::geom::{self, MolecularConfiguration, QuerySpec, Trajectory, Vec3};
use crate::model::{latent_name, property_head, Model, ModelConfig, Task};
use crate::params::{Binding, Bound, ParamStore};
use crate::tensor::{grad_check_values, Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_latent: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub lambda: f64,
    pub queries: QuerySpec,
    /// On-surface samples for the zero-level term of the SDF loss.
    pub surface_points: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
    /// Stop after the first epoch whose mean loss falls below this.
    pub stop_below: Option<f64>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            epochs: 100,
            batch_size: 1,
            lr: 1e-4,
            lr_latent: 1e-3,
            decay_factor: 0.5,
            decay_interval: 200,
            lambda: 0.1,
            queries: QuerySpec::default(),
            surface_points: 64,
            seed: 0,
            freeze_encoder: false,
            stop_below: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let ok = self.lr >= 0.0
            && self.lr_latent >= 0.0
            && self.lambda >= 0.0
            && self.decay_factor > 0.0
            && self.decay_interval > 0
            && self.batch_size > 0
            && self.queries.n > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("training rates, λ, batch size and query count must be valid".into()))
        }
    }

    /// Learning-rate multiplier in effect during `epoch` (0-based).
    pub fn decay(&self, epoch: usize) -> f64 {
        self.decay_factor.powi((epoch / self.decay_interval) as i32)
    }
}

#[derive(Clone, Debug)]
pub enum TaskData {
    Dynamics(Vec<Trajectory>),
    Property(Vec<(MolecularConfiguration, Vec<f64>)>),
    Generation(Vec<MolecularConfiguration>),
}

impl TaskData {
    pub fn task(&self) -> Task {
        match self {
            TaskData::Dynamics(_) => Task::Dynamics,
            TaskData::Property(_) => Task::Property,
            TaskData::Generation(_) => Task::Generation,
        }
    }

    pub fn samples(&self) -> Vec<Sample> {
        match self {
            TaskData::Dynamics(ts) => ts
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |k| Sample::Frame { traj: i, frame: k }))
                .collect(),
            TaskData::Property(v) => (0..v.len()).map(Sample::Property).collect(),
            TaskData::Generation(v) => (0..v.len()).map(Sample::Generation).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sample {
    Frame { traj: usize, frame: usize },
    Property(usize),
    Generation(usize),
}

/// World-space points at which one step queries its field.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedQueries {
    pub points: Vec<Vec3>,
    pub surface: Vec<Vec3>,
}

pub enum QuerySource<'a> {
    /// Sample around the molecule as seen in its current canonical frame.
    Sample { seed: u64 },
    Fixed(&'a PreparedQueries),
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub sdf: Option<NodeId>,
    pub eikonal: Option<NodeId>,
}

/// Queries drawn in canonical coordinates and mapped back to world space,
/// so the same seed yields rigidly moved points for a rigidly moved input.
pub fn sample_in_frame(
    config: &MolecularConfiguration,
    frame: &encoder::CanonicalFrame,
    spec: &QuerySpec,
    surface: usize,
    seed: u64,
) -> Result<PreparedQueries> {
    let local = config.with_coords(config.coords().iter().map(|&x| frame.canonical_coords(x)).collect())?;
    let points = geom::sample_queries(&local, spec, seed).into_iter().map(|c| frame.to_world(c)).collect();
    let surface = if surface > 0 {
        geom::sample_surface(&local, surface, seed ^ 0x9e37_79b9_7f4a_7c15)
            .into_iter()
            .map(|c| frame.to_world(c))
            .collect()
    } else {
        Vec::new()
    };
    Ok(PreparedQueries { points, surface })
}

fn field_loss_nodes(
    g: &mut Graph,
    cfg: &TrainConfig,
    gen: &fshn::Generated,
    enc: &EncodedNodes,
    target: &MolecularConfiguration,
    source: QuerySource,
) -> Result<(LossNodes, PreparedQueries)> {
    let arch = &cfg.model.field;
    let prepared = match source {
        QuerySource::Fixed(q) => q.clone(),
        QuerySource::Sample { seed } => {
            let surface = if cfg.model.task == Task::Dynamics { cfg.surface_points } else { 0 };
            sample_in_frame(target, &enc.frame(g), &cfg.queries, surface, seed)?
        }
    };
    let x = canonical_points(g, enc.qt, enc.centroid, &prepared.points)?;
    let nodes = if cfg.model.task == Task::Dynamics {
        let (f, grad) = cinr::field_forward_with_grad(g, arch, &gen.field, x)?;
        let target_sdf: Vec<f64> = prepared.points.iter().map(|&p| geom::oracle_sdf(target, p)).collect();
        let fs = if prepared.surface.is_empty() {
            None
        } else {
            let xs = canonical_points(g, enc.qt, enc.centroid, &prepared.surface)?;
            Some(cinr::field_forward(g, arch, &gen.field, xs)?)
        };
        let sdf = losses::sdf_graph(g, f, &target_sdf, fs)?;
        let eik = losses::eikonal_graph(g, grad)?;
        let weighted = g.scale(eik, cfg.lambda)?;
        let total = g.add(sdf, weighted)?;
        LossNodes { total, sdf: Some(sdf), eikonal: Some(eik) }
    } else {
        let f = cinr::field_forward(g, arch, &gen.field, x)?;
        let t = losses::density_targets(target, &cfg.model.vocab, &prepared.points)?;
        LossNodes { total: losses::density_graph(g, f, &t)?, sdf: None, eikonal: None }
    };
    Ok((nodes, prepared))
}

/// Builds the full loss graph for one sample.
pub fn sample_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &TrainConfig,
    data: &TaskData,
    sample: Sample,
    source: QuerySource,
) -> Result<(LossNodes, Option<PreparedQueries>)> {
    let m = &cfg.model;
    match (data, sample) {
        (TaskData::Dynamics(ts), Sample::Frame { traj, frame }) => {
            let tr = ts.get(traj).ok_or_else(|| Error::InvalidArgument(format!("no trajectory {traj}")))?;
            let first = encoder::encode_molecule_graph(g, p, &m.encoder, &tr.frames()[0])?;
            let target = &tr.frames()[frame];
            let enc = if frame == 0 { first } else { encoder::encode_molecule_graph(g, p, &m.encoder, target)? };
            let fourier = g.constant(Tensor::row(&fshn::time_features(tr.times()[frame], m.k_f)));
            let z = g.concat(&[first.embedding, fourier], 1)?;
            let gen = fshn::generate_graph(g, p, &m.fshn, &m.field, z, None)?;
            let (nodes, q) = field_loss_nodes(g, cfg, &gen, &enc, target, source)?;
            Ok((nodes, Some(q)))
        }
        (TaskData::Property(v), Sample::Property(i)) => {
            let (config, y) = v.get(i).ok_or_else(|| Error::InvalidArgument(format!("no molecule {i}")))?;
            let enc = encoder::encode_molecule_graph(g, p, &m.encoder, config)?;
            let gen = fshn::generate_graph(g, p, &m.fshn, &m.field, enc.embedding, None)?;
            let pooled = fshn::aggregate_tokens_graph(g, &gen.hiddens)?;
            let yhat = property_head(g, p, pooled)?;
            let total = losses::property_graph(g, yhat, y)?;
            Ok((LossNodes { total, sdf: None, eikonal: None }, None))
        }
        (TaskData::Generation(v), Sample::Generation(i)) => {
            let config = v.get(i).ok_or_else(|| Error::InvalidArgument(format!("no molecule {i}")))?;
            let enc = encoder::encode_molecule_graph(g, p, &m.encoder, config)?;
            let z = p.get(&latent_name(i))?;
            let gen = fshn::generate_graph(g, p, &m.fshn, &m.field, z, None)?;
            let (nodes, q) = field_loss_nodes(g, cfg, &gen, &enc, config, source)?;
            Ok((nodes, Some(q)))
        }
        _ => Err(Error::InvalidArgument(format!("sample {sample:?} does not belong to {} data", data.task().name()))),
    }
}

/// Which parameters a sample's graph differentiates.
fn binding_for(cfg: &TrainConfig, sample: Sample) -> impl Fn(&str) -> Binding + '_ {
    let own = match sample {
        Sample::Generation(i) => Some(latent_name(i)),
        _ => None,
    };
    move |name: &str| {
        if name.starts_with("latent/") {
            if own.as_deref() == Some(name) {
                Binding::Leaf
            } else {
                Binding::Skip
            }
        } else if cfg.freeze_encoder && name.starts_with("encoder/") {
            Binding::Constant
        } else {
            Binding::Leaf
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub task: Task,
    pub loss: f64,
    pub sdf: Option<f64>,
    pub eikonal: Option<f64>,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,task,loss,component_sdf,component_eikonal\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.10e}")).unwrap_or_default();
    for e in log {
        writeln!(out, "{},{},{:.10e},{},{}", e.epoch, e.task.name(), e.loss, opt(e.sdf), opt(e.eikonal)).unwrap();
    }
    out
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// The decoder's per-token base payloads step this many times faster than
/// the rest of the network, so at the default rate they match the codes.
pub const BASE_RATE_SCALE: f64 = 10.0;

/// Learning rate of the named parameter before decay.
pub fn learning_rate(cfg: &TrainConfig, name: &str) -> f64 {
    if name.starts_with("latent/") {
        cfg.lr_latent
    } else if name == "fshn/base" {
        cfg.lr * BASE_RATE_SCALE
    } else {
        cfg.lr
    }
}

/// Mixes a base seed with step coordinates into an independent stream seed.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn sample_count(data: &TaskData) -> usize {
    match data {
        TaskData::Generation(v) => v.len(),
        _ => 0,
    }
}

fn check_data(cfg: &TrainConfig, data: &TaskData) -> Result<()> {
    if data.task() != cfg.model.task {
        return Err(Error::InvalidArgument(format!(
            "{} data for a {} model",
            data.task().name(),
            cfg.model.task.name()
        )));
    }
    if data.samples().is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if let TaskData::Property(v) = data {
        if v.iter().any(|(_, y)| y.len() != cfg.model.n_props) {
            return Err(Error::InvalidArgument(format!("property targets must have {} entries", cfg.model.n_props)));
        }
    }
    Ok(())
}

/// Trains from scratch (or from `init`, taking every tensor whose name and
/// shape match) and returns the model with its per-epoch loss log.
pub fn train_task(cfg: &TrainConfig, data: &TaskData, init: Option<&ParamStore>) -> Result<TrainOutcome> {
    train_task_with(cfg, data, init, |_| {})
}

/// As [`train_task`], calling `on_epoch` after each epoch's log entry.
pub fn train_task_with(
    cfg: &TrainConfig,
    data: &TaskData,
    init: Option<&ParamStore>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let mut model = Model::init(cfg.model.clone(), cfg.seed, sample_count(data))?;
    if let Some(p) = init {
        model.load_matching(p);
    }
    let samples = data.samples();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut adam = AdamState::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let decay = cfg.decay(epoch);
        let mut shuffle_rng = crate::rng(mix_seed(cfg.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut shuffle_rng);
        let (mut total, mut sdf, mut eik) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<ParamStore> = None;
            for &si in batch {
                let sample = samples[si];
                let mut g = Graph::new();
                let p = model.params.bind_with(&mut g, binding_for(cfg, sample));
                let source = QuerySource::Sample { seed: mix_seed(cfg.seed, epoch as u64, si as u64) };
                let (nodes, _) = sample_loss(&mut g, &p, cfg, data, sample, source).map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { epoch, sample: si, loss: f64::NAN },
                    other => other,
                })?;
                let loss = g.value(nodes.total).item();
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, sample: si, loss });
                }
                total += loss;
                sdf += nodes.sdf.map_or(0.0, |n| g.value(n).item());
                eik += nodes.eikonal.map_or(0.0, |n| g.value(n).item());
                let grads = p.gradients(&g.backward(nodes.total)?);
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for (k, v) in grads.iter() {
                            let sum: Vec<f64> = match a.get(k) {
                                Ok(prev) => prev.data().iter().zip(v.data()).map(|(x, y)| x + y).collect(),
                                Err(_) => v.data().to_vec(),
                            };
                            a.insert(k.clone(), Tensor::new(v.shape().to_vec(), sum)?);
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("non-empty batch");
            if batch.len() > 1 {
                let names: Vec<String> = grads.iter().map(|(k, _)| k.clone()).collect();
                for k in names {
                    let t = grads.get(&k)?.map(|v| v / batch.len() as f64);
                    grads.insert(k, t);
                }
            }
            adam_step_with(&mut model.params, &grads, &mut adam, |name| {
                decay * learning_rate(cfg, name)
            })?;
        }
        let n = samples.len() as f64;
        let field = cfg.model.task == Task::Dynamics;
        let entry = EpochLog {
            epoch,
            task: cfg.model.task,
            loss: total / n,
            sdf: field.then_some(sdf / n),
            eikonal: field.then_some(eik / n),
        };
        on_epoch(&entry);
        let done = cfg.stop_below.is_some_and(|limit| entry.loss < limit);
        log.push(entry);
        if done {
            break;
        }
    }
    Ok(TrainOutcome { model, log })
}

/// Evaluates one sample's loss without updating anything.
pub fn evaluate_sample(model: &Model, cfg: &TrainConfig, data: &TaskData, sample: Sample, seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.params.bind_const(&mut g);
    let (nodes, _) = sample_loss(&mut g, &p, cfg, data, sample, QuerySource::Sample { seed })?;
    Ok(g.value(nodes.total).item())
}

/// Central-difference check of a sample's full loss with respect to every
/// trainable parameter, with the query points frozen at those drawn from
/// the unperturbed model. Returns the worst relative error.
pub fn check_sample_gradients(model: &Model, cfg: &TrainConfig, data: &TaskData, sample: Sample, seed: u64, step: f64) -> Result<f64> {
    let prepared = {
        let mut g = Graph::new();
        let p = model.params.bind_const(&mut g);
        sample_loss(&mut g, &p, cfg, data, sample, QuerySource::Sample { seed })?.1
    };
    let bind = binding_for(cfg, sample);
    let names: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .filter(|(k, _)| bind(k) == Binding::Leaf)
        .map(|(k, v)| (k.clone(), v.shape().to_vec()))
        .collect();
    let flat: Vec<f64> = names.iter().flat_map(|(k, _)| model.params.get(k).unwrap().data().to_vec()).collect();
    let point = Tensor::new(vec![flat.len()], flat)?;
    let build = |x: &Tensor, g: &mut Graph| -> Result<(Bound, LossNodes)> {
        let mut store = model.params.clone();
        let mut off = 0;
        for (k, shape) in &names {
            let n: usize = shape.iter().product();
            store.insert(k.clone(), Tensor::new(shape.clone(), x.data()[off..off + n].to_vec())?);
            off += n;
        }
        let p = store.bind_with(g, &bind);
        let source = match &prepared {
            Some(q) => QuerySource::Fixed(q),
            None => QuerySource::Sample { seed },
        };
        let (nodes, _) = sample_loss(g, &p, cfg, data, sample, source)?;
        Ok((p, nodes))
    };
    let mut g = Graph::new();
    let (p, nodes) = build(&point, &mut g)?;
    let grads = p.gradients(&g.backward(nodes.total)?);
    let mut analytic = Vec::with_capacity(point.len());
    for (k, shape) in &names {
        match grads.get(k) {
            Ok(t) => analytic.extend_from_slice(t.data()),
            Err(_) => analytic.extend(std::iter::repeat(0.0).take(shape.iter().product())),
        }
    }
    let analytic = Tensor::new(vec![analytic.len()], analytic)?;
    let value = |x: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let (_, nodes) = build(x, &mut g)?;
        Ok(g.value(nodes.total).item())
    };
    grad_check_values(value, &analytic, &point, step)
}
