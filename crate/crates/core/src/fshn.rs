//! Conditional causal transformer that emits field weights token by token.
//!
//! Position 0 holds the projected condition, position 1 a learned start
//! token, and position t + 1 the structural embedding of emitted token t.
//! The hidden state at position t + 1 decodes into token t's payload
//! through a projection shared by all chunks of the same (layer, role).

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cinr::{FieldArchitecture, FieldNodes, FieldParameters};
use crate::error::{Error, Result};
use crate::params::{normal, xavier, Bound, ParamStore};
use crate::swt::{self, Role, Slot, StructuralEmbeddings};
use crate::tensor::{Graph, NodeId, Tensor};

const LN_EPS: f64 = 1e-5;
/// Hidden states at different positions are strongly correlated, so an
/// optimizer step on a projection shifts every chunk of a layer the same
/// way. Damping the decoded residual keeps those shifts small next to the
/// base.
const RESIDUAL_GAIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct FshnConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub d_ff: usize,
    pub d_chunk: usize,
}

impl FshnConfig {
    pub fn desk() -> Self {
        Self { d_model: 128, heads: 4, blocks: 2, d_ff: 256, d_chunk: 64 }
    }

    pub fn paper() -> Self {
        Self { d_model: 512, heads: 8, blocks: 6, d_ff: 2048, d_chunk: 64 }
    }

    pub fn tiny() -> Self {
        Self { d_model: 8, heads: 2, blocks: 1, d_ff: 16, d_chunk: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_chunk == 0 || self.blocks == 0 || self.d_ff == 0 {
            return Err(Error::InvalidArgument("decoder sizes must be positive".into()));
        }
        Ok(())
    }
}

/// [sin(2πt·2ʲ), cos(2πt·2ʲ)] for j = 0..K_f−1, sines first.
pub fn time_fourier(t: f64, k_f: usize) -> Vec<f64> {
    let freqs: Vec<f64> = (0..k_f).map(|j| 2.0 * PI * t * 2f64.powi(j as i32)).collect();
    freqs.iter().map(|a| a.sin()).chain(freqs.iter().map(|a| a.cos())).collect()
}

/// Time features used to condition dynamics: `time_fourier(t / 2)`.
/// Every band of `time_fourier` has period 1, so t = 0 and t = 1 would get
/// identical features; halving t keeps the lowest band one-to-one on [0, 1].
pub fn time_features(t: f64, k_f: usize) -> Vec<f64> {
    time_fourier(0.5 * t, k_f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionMode {
    Dynamics,
    Property,
    Generation,
}

impl ConditionMode {
    pub fn name(self) -> &'static str {
        match self {
            ConditionMode::Dynamics => "dynamics",
            ConditionMode::Property => "property",
            ConditionMode::Generation => "generation",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub z: Vec<f64>,
    pub mode: ConditionMode,
}

/// What a condition is built from; only the fields relevant to the mode
/// need to be set.
#[derive(Clone, Debug, Default)]
pub struct ConditionInputs<'a> {
    pub embedding: Option<&'a [f64]>,
    pub time: Option<f64>,
    pub k_f: usize,
    pub seed: Option<u64>,
    pub dim: usize,
}

pub fn build_condition(mode: ConditionMode, inputs: &ConditionInputs) -> Result<Condition> {
    let missing = |what: &str| Error::InvalidArgument(format!("{} condition needs {what}", mode.name()));
    let z = match mode {
        ConditionMode::Dynamics => {
            let e = inputs.embedding.ok_or_else(|| missing("an embedding"))?;
            let t = inputs.time.ok_or_else(|| missing("a time"))?;
            if inputs.k_f == 0 {
                return Err(missing("K_f ≥ 1"));
            }
            e.iter().copied().chain(time_features(t, inputs.k_f)).collect()
        }
        ConditionMode::Property => inputs.embedding.ok_or_else(|| missing("an embedding"))?.to_vec(),
        ConditionMode::Generation => {
            let seed = inputs.seed.ok_or_else(|| missing("a seed"))?;
            if inputs.dim == 0 {
                return Err(missing("a positive dimension"));
            }
            gaussian(seed, inputs.dim)
        }
    };
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("condition vector".into()));
    }
    Ok(Condition { z, mode })
}

pub fn gaussian(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = crate::rng(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn proj_name(layer: usize, role: Role) -> String {
    format!("fshn/proj/layer{layer}/{}", role.name())
}

/// Initializes the decoder, its output projections and the structural
/// embeddings it reads back, all into `store`.
///
/// Each payload is a learned per-token base plus a projection of the
/// hidden state. The base starts as a Xavier-initialized field (see
/// [`set_base`] to replace it) and the projections start at zero, so a
/// fresh decoder emits exactly the base field.
pub fn init_hypernetwork(
    cfg: &FshnConfig,
    arch: &FieldArchitecture,
    d_z: usize,
    seed: u64,
    store: &mut ParamStore,
) -> Result<()> {
    cfg.validate()?;
    arch.validate()?;
    let d = cfg.d_model;
    let t = swt::token_count(arch, cfg.d_chunk)?;
    let mut rng = crate::rng(seed);
    let ones = Tensor::full(&[1, d], 1.0);
    let zeros = |n: usize| Tensor::zeros(&[1, n]);
    store.insert("fshn/cond_w", xavier(&mut rng, d_z, d));
    store.insert("fshn/cond_b", zeros(d));
    store.insert("fshn/start", normal(&mut rng, &[1, d], 1.0));
    store.insert("fshn/pos", normal(&mut rng, &[t + 1, d], 1.0));
    for b in 0..cfg.blocks {
        let p = format!("fshn/block{b}");
        store.insert(format!("{p}/ln1_g"), ones.clone());
        store.insert(format!("{p}/ln1_b"), zeros(d));
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{p}/{w}"), xavier(&mut rng, d, d));
        }
        store.insert(format!("{p}/ln2_g"), ones.clone());
        store.insert(format!("{p}/ln2_b"), zeros(d));
        store.insert(format!("{p}/ff1_w"), xavier(&mut rng, d, cfg.d_ff));
        store.insert(format!("{p}/ff1_b"), zeros(cfg.d_ff));
        store.insert(format!("{p}/ff2_w"), xavier(&mut rng, cfg.d_ff, d));
        store.insert(format!("{p}/ff2_b"), zeros(d));
    }
    store.insert("fshn/lnf_g", ones);
    store.insert("fshn/lnf_b", zeros(d));
    for l in 0..arch.num_layers() {
        for role in [Role::Weight, Role::Bias] {
            let name = proj_name(l, role);
            store.insert(format!("{name}/w"), Tensor::zeros(&[d, cfg.d_chunk]));
            store.insert(format!("{name}/b"), Tensor::zeros(&[1, cfg.d_chunk]));
        }
    }
    store.insert("fshn/logvar_w", Tensor::zeros(&[d, cfg.d_chunk]));
    store.insert("fshn/logvar_b", Tensor::full(&[1, cfg.d_chunk], -6.0));
    StructuralEmbeddings::init(arch.num_layers(), cfg.d_chunk, d, seed ^ 0x5717).store_into(store);
    set_base(store, cfg, arch, &crate::cinr::init_field_params(arch, seed ^ 0xba5e))
}

/// Adds N(0, std²) noise to every output projection.
pub fn jitter_projections(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = crate::rng(seed);
    let names: Vec<String> = store.iter().filter(|(k, _)| k.starts_with("fshn/proj/")).map(|(k, _)| k.clone()).collect();
    for name in names {
        let t = store.get(&name).expect("listed");
        let noise = normal(&mut rng, t.shape(), std);
        let sum = Tensor::new(t.shape().to_vec(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())
            .expect("same shape");
        store.insert(name, sum);
    }
}

/// Replaces the per-token base payloads with the tokens of `theta`.
pub fn set_base(store: &mut ParamStore, cfg: &FshnConfig, arch: &FieldArchitecture, theta: &FieldParameters) -> Result<()> {
    let seq = swt::tokenize(theta, arch, cfg.d_chunk)?;
    let data: Vec<f64> = seq.tokens.iter().flat_map(|t| t.payload.iter().copied()).collect();
    store.insert("fshn/base", Tensor::new(vec![seq.tokens.len(), cfg.d_chunk], data)?);
    Ok(())
}

struct Decoder<'a> {
    p: &'a Bound,
    cfg: &'a FshnConfig,
    keys: Vec<Vec<NodeId>>,
    values: Vec<Vec<NodeId>>,
    position: usize,
}

impl<'a> Decoder<'a> {
    fn new(p: &'a Bound, cfg: &'a FshnConfig) -> Self {
        Self { p, cfg, keys: vec![Vec::new(); cfg.blocks], values: vec![Vec::new(); cfg.blocks], position: 0 }
    }

    fn norm(&self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        let n = g.layer_norm(x, LN_EPS)?;
        let s = g.mul(n, self.p.get(&format!("{prefix}_g"))?)?;
        g.add(s, self.p.get(&format!("{prefix}_b"))?)
    }

    /// Consumes one input row and returns the final hidden state there.
    fn step(&mut self, g: &mut Graph, input: NodeId) -> Result<NodeId> {
        let pos_table = self.p.get("fshn/pos")?;
        let rows = g.shape(pos_table)[0];
        if self.position >= rows {
            return Err(Error::InvalidArgument(format!("decoder position {} beyond table of {rows}", self.position)));
        }
        let pos = g.gather_rows(pos_table, vec![self.position])?;
        let mut x = g.add(input, pos)?;
        for b in 0..self.cfg.blocks {
            let pre = format!("fshn/block{b}");
            let w = |name: &str| self.p.get(&format!("{pre}/{name}"));
            let a = self.norm(g, x, &format!("{pre}/ln1"))?;
            let q = g.matmul(a, w("wq")?)?;
            let k = g.matmul(a, w("wk")?)?;
            let v = g.matmul(a, w("wv")?)?;
            self.keys[b].push(k);
            self.values[b].push(v);
            let att = g.attend(q, &self.keys[b], &self.values[b], self.cfg.heads)?;
            let o = g.matmul(att, w("wo")?)?;
            x = g.add(x, o)?;
            let a = self.norm(g, x, &format!("{pre}/ln2"))?;
            let f = g.affine(a, w("ff1_w")?, w("ff1_b")?)?;
            let f = g.softplus(f)?;
            let f = g.affine(f, w("ff2_w")?, w("ff2_b")?)?;
            x = g.add(x, f)?;
        }
        self.position += 1;
        self.norm(g, x, "fshn/lnf")
    }

    /// Feeds the condition and start token; returns the first hidden state.
    fn prime(&mut self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let c = g.affine(z, self.p.get("fshn/cond_w")?, self.p.get("fshn/cond_b")?)?;
        self.step(g, c)?;
        let start = self.p.get("fshn/start")?;
        self.step(g, start)
    }
}

fn padding_mask(slot: &Slot, d_chunk: usize) -> Option<Tensor> {
    (slot.filled < d_chunk).then(|| {
        let mut m = vec![0.0; d_chunk];
        m[..slot.filled].iter_mut().for_each(|v| *v = 1.0);
        Tensor::row(&m)
    })
}

/// Graph handles for one generated field.
#[derive(Clone, Debug)]
pub struct Generated {
    pub field: FieldNodes,
    /// One 1×d_model hidden state per token.
    pub hiddens: Vec<NodeId>,
    /// One 1×d_chunk payload per token, padding zeroed.
    pub payloads: Vec<NodeId>,
}

/// Free-running decoding of all tokens for `arch`, conditioned on the 1×D_z
/// node `z`. With `noise`, each payload is perturbed by the Gaussian head.
pub fn generate_graph(
    g: &mut Graph,
    p: &Bound,
    cfg: &FshnConfig,
    arch: &FieldArchitecture,
    z: NodeId,
    mut noise: Option<&mut dyn rand::RngCore>,
) -> Result<Generated> {
    cfg.validate()?;
    let slots = swt::layout(arch, cfg.d_chunk)?;
    let mut dec = Decoder::new(p, cfg);
    let mut h = dec.prime(g, z)?;
    let base_table = p.get("fshn/base")?;
    let mut masks: HashMap<usize, NodeId> = HashMap::new();
    let mut hiddens = Vec::with_capacity(slots.len());
    let mut payloads = Vec::with_capacity(slots.len());
    for (t, slot) in slots.iter().enumerate() {
        let name = proj_name(slot.layer, slot.role);
        let delta = g.affine(h, p.get(&format!("{name}/w"))?, p.get(&format!("{name}/b"))?)?;
        let delta = g.scale(delta, RESIDUAL_GAIN)?;
        let base = g.gather_rows(base_table, vec![t])?;
        let mut payload = g.add(base, delta)?;
        if let Some(rng) = noise.as_deref_mut() {
            let lv = g.affine(h, p.get("fshn/logvar_w")?, p.get("fshn/logvar_b")?)?;
            let half = g.scale(lv, 0.5)?;
            let sd = g.exp(half)?;
            let eps: Vec<f64> = (0..cfg.d_chunk).map(|_| StandardNormal.sample(rng)).collect();
            let eps = g.constant(Tensor::row(&eps));
            let jitter = g.mul(sd, eps)?;
            payload = g.add(payload, jitter)?;
        }
        if let Some(mask) = padding_mask(slot, cfg.d_chunk) {
            let m = *masks.entry(slot.filled).or_insert_with(|| g.constant(mask));
            payload = g.mul(payload, m)?;
        }
        hiddens.push(h);
        payloads.push(payload);
        if t + 1 < slots.len() {
            let e = swt::embed_token_graph(g, p, payload, slot.layer, slot.role)?;
            h = dec.step(g, e)?;
        }
    }
    let field = assemble_graph(g, arch, cfg.d_chunk, &slots, &payloads)?;
    Ok(Generated { field, hiddens, payloads })
}

/// Concatenates the payloads of each (layer, role) and reshapes them into
/// weight and bias nodes.
fn assemble_graph(
    g: &mut Graph,
    arch: &FieldArchitecture,
    d_chunk: usize,
    slots: &[Slot],
    payloads: &[NodeId],
) -> Result<FieldNodes> {
    let mut layers = Vec::with_capacity(arch.num_layers());
    for l in 0..arch.num_layers() {
        let (fi, fo) = arch.layer_shape(l);
        let mut pair = [None, None];
        for role in [Role::Weight, Role::Bias] {
            let parts: Vec<NodeId> = slots
                .iter()
                .zip(payloads)
                .filter(|(s, _)| s.layer == l && s.role == role)
                .map(|(_, &p)| p)
                .collect();
            let row = g.concat(&parts, 1)?;
            let len = if role == Role::Weight { fi * fo } else { fo };
            let used = if parts.len() * d_chunk == len { row } else { g.slice(row, 1, 0, len)? };
            let shape = if role == Role::Weight { [fi, fo] } else { [1, fo] };
            pair[role.index()] = Some(g.reshape(used, &shape)?);
        }
        layers.push((pair[0].unwrap(), pair[1].unwrap()));
    }
    Ok(FieldNodes { layers })
}

/// Mean of the token hidden states (1×d_model).
pub fn aggregate_tokens_graph(g: &mut Graph, hiddens: &[NodeId]) -> Result<NodeId> {
    if hiddens.is_empty() {
        return Err(Error::InvalidArgument("no hidden states to aggregate".into()));
    }
    let stacked = g.concat(hiddens, 0)?;
    let avg = g.constant(Tensor::full(&[1, hiddens.len()], 1.0 / hiddens.len() as f64));
    g.matmul(avg, stacked)
}

pub fn aggregate_tokens(hiddens: &Tensor) -> Result<Vec<f64>> {
    let (t, d) = hiddens.dims2();
    if t == 0 {
        return Err(Error::InvalidArgument("no hidden states to aggregate".into()));
    }
    Ok((0..d).map(|c| (0..t).map(|r| hiddens.get2(r, c)).sum::<f64>() / t as f64).collect())
}

/// Generated field parameters with their hidden states (T×d_model).
pub fn generate_params(
    store: &ParamStore,
    cfg: &FshnConfig,
    arch: &FieldArchitecture,
    z: &[f64],
    sample_seed: Option<u64>,
) -> Result<(FieldParameters, Tensor)> {
    let mut g = Graph::new();
    let p = store.bind_const(&mut g);
    let zn = g.constant(Tensor::row(z));
    let mut rng = sample_seed.map(crate::rng);
    let noise = rng.as_mut().map(|r| r as &mut dyn rand::RngCore);
    let gen = generate_graph(&mut g, &p, cfg, arch, zn, noise)?;
    let theta = gen.field.values(&g);
    theta.check(arch)?;
    let h = g.concat(&gen.hiddens, 0)?;
    Ok((theta, g.value(h).clone()))
}

/// Hidden states when the decoder is fed the given payloads instead of its
/// own outputs. Row t is the state that emits token t, so it depends only
/// on tokens before t.
pub fn decode_with_payloads(
    store: &ParamStore,
    cfg: &FshnConfig,
    arch: &FieldArchitecture,
    z: &[f64],
    payloads: &[Vec<f64>],
) -> Result<Tensor> {
    let slots = swt::layout(arch, cfg.d_chunk)?;
    if payloads.len() != slots.len() {
        return Err(Error::Token(format!("expected {} payloads, got {}", slots.len(), payloads.len())));
    }
    let mut g = Graph::new();
    let p = store.bind_const(&mut g);
    let zn = g.constant(Tensor::row(z));
    let mut dec = Decoder::new(&p, cfg);
    let mut h = dec.prime(&mut g, zn)?;
    let mut rows = vec![h];
    for (slot, payload) in slots.iter().zip(payloads).take(slots.len() - 1) {
        let pn = g.constant(Tensor::row(payload));
        let e = swt::embed_token_graph(&mut g, &p, pn, slot.layer, slot.role)?;
        h = dec.step(&mut g, e)?;
        rows.push(h);
    }
    let out = g.concat(&rows, 0)?;
    Ok(g.value(out).clone())
}

/// Draws a latent code from the standard normal prior.
pub fn sample_latent(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}
