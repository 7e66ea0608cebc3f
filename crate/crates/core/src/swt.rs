//! Weight tokenization: field parameters ⇄ fixed-width tagged tokens.

use crate::cinr::{FieldArchitecture, FieldParameters, LayerParams};
use crate::error::{Error, Result};
use crate::params::{normal, xavier, Bound, ParamStore};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Weight = 0,
    Bias = 1,
}

impl Role {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Weight => "w",
            Role::Bias => "b",
        }
    }
}

/// Position of one token in the canonical ordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub layer: usize,
    pub role: Role,
    pub chunk: usize,
    /// Real (unpadded) values in this chunk.
    pub filled: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub payload: Vec<f64>,
    pub layer: usize,
    pub role: Role,
    pub chunk: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub arch: FieldArchitecture,
    pub d_chunk: usize,
}

fn role_len(arch: &FieldArchitecture, layer: usize, role: Role) -> usize {
    let (i, o) = arch.layer_shape(layer);
    match role {
        Role::Weight => i * o,
        Role::Bias => o,
    }
}

/// Token slots in order (layer, weight before bias, chunk). The count
/// depends only on the architecture and chunk width.
pub fn layout(arch: &FieldArchitecture, d_chunk: usize) -> Result<Vec<Slot>> {
    if d_chunk == 0 {
        return Err(Error::InvalidArgument("d_chunk must be at least 1".into()));
    }
    let mut slots = Vec::new();
    for layer in 0..arch.num_layers() {
        for role in [Role::Weight, Role::Bias] {
            let len = role_len(arch, layer, role);
            for chunk in 0..len.div_ceil(d_chunk) {
                let filled = (len - chunk * d_chunk).min(d_chunk);
                slots.push(Slot { layer, role, chunk, filled });
            }
        }
    }
    Ok(slots)
}

pub fn token_count(arch: &FieldArchitecture, d_chunk: usize) -> Result<usize> {
    Ok(layout(arch, d_chunk)?.len())
}

pub fn tokenize(theta: &FieldParameters, arch: &FieldArchitecture, d_chunk: usize) -> Result<TokenSequence> {
    theta.check(arch)?;
    let slots = layout(arch, d_chunk)?;
    let tokens = slots
        .iter()
        .map(|s| {
            let p = &theta.layers[s.layer];
            let src = match s.role {
                Role::Weight => p.weight.data(),
                Role::Bias => p.bias.data(),
            };
            let start = s.chunk * d_chunk;
            let mut payload = vec![0.0; d_chunk];
            payload[..s.filled].copy_from_slice(&src[start..start + s.filled]);
            Token { payload, layer: s.layer, role: s.role, chunk: s.chunk }
        })
        .collect();
    Ok(TokenSequence { tokens, arch: arch.clone(), d_chunk })
}

pub fn detokenize(seq: &TokenSequence) -> Result<FieldParameters> {
    let slots = layout(&seq.arch, seq.d_chunk)?;
    if slots.len() != seq.tokens.len() {
        return Err(Error::Token(format!("expected {} tokens, got {}", slots.len(), seq.tokens.len())));
    }
    let payloads: Vec<&[f64]> = seq.tokens.iter().map(|t| t.payload.as_slice()).collect();
    for (t, (tok, slot)) in seq.tokens.iter().zip(&slots).enumerate() {
        if (tok.layer, tok.role, tok.chunk) != (slot.layer, slot.role, slot.chunk) {
            return Err(Error::Token(format!(
                "token {t} tagged ({}, {}, {}) where ({}, {}, {}) belongs",
                tok.layer,
                tok.role.name(),
                tok.chunk,
                slot.layer,
                slot.role.name(),
                slot.chunk
            )));
        }
    }
    assemble(&seq.arch, seq.d_chunk, &slots, &payloads)
}

/// Builds parameters from payload rows laid out as `slots`, checking width
/// and that every padding entry is exactly zero.
pub fn assemble(arch: &FieldArchitecture, d_chunk: usize, slots: &[Slot], payloads: &[&[f64]]) -> Result<FieldParameters> {
    let mut flat: Vec<[Vec<f64>; 2]> = (0..arch.num_layers()).map(|_| [Vec::new(), Vec::new()]).collect();
    for (t, (slot, payload)) in slots.iter().zip(payloads).enumerate() {
        if payload.len() != d_chunk {
            return Err(Error::Token(format!("token {t} has width {} instead of {d_chunk}", payload.len())));
        }
        if payload[slot.filled..].iter().any(|&v| v != 0.0) {
            return Err(Error::Token(format!("token {t} has nonzero padding")));
        }
        flat[slot.layer][slot.role.index()].extend_from_slice(&payload[..slot.filled]);
    }
    let layers = flat
        .into_iter()
        .enumerate()
        .map(|(l, [w, b])| {
            let (i, o) = arch.layer_shape(l);
            Ok(LayerParams { weight: Tensor::new(vec![i, o], w)?, bias: Tensor::new(vec![1, o], b)? })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Token(format!("inconsistent token payloads: {e}")))?;
    let theta = FieldParameters { layers };
    theta.check(arch)?;
    Ok(theta)
}

/// Learnable layer and role tables plus the payload projection.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralEmbeddings {
    pub e_layer: Tensor,
    pub e_role: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

impl StructuralEmbeddings {
    pub fn init(num_layers: usize, d_chunk: usize, d_model: usize, seed: u64) -> Self {
        let mut rng = crate::rng(seed);
        Self {
            e_layer: normal(&mut rng, &[num_layers, d_model], 0.1),
            e_role: normal(&mut rng, &[2, d_model], 0.1),
            proj_w: xavier(&mut rng, d_chunk, d_model),
            proj_b: Tensor::zeros(&[1, d_model]),
        }
    }

    pub fn zeros(num_layers: usize, d_chunk: usize, d_model: usize) -> Self {
        Self {
            e_layer: Tensor::zeros(&[num_layers, d_model]),
            e_role: Tensor::zeros(&[2, d_model]),
            proj_w: Tensor::zeros(&[d_chunk, d_model]),
            proj_b: Tensor::zeros(&[1, d_model]),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.e_layer.shape()[0]
    }

    pub fn store_into(&self, store: &mut ParamStore) {
        store.insert("swt/e_layer", self.e_layer.clone());
        store.insert("swt/e_role", self.e_role.clone());
        store.insert("swt/proj_w", self.proj_w.clone());
        store.insert("swt/proj_b", self.proj_b.clone());
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            e_layer: store.get("swt/e_layer")?.clone(),
            e_role: store.get("swt/e_role")?.clone(),
            proj_w: store.get("swt/proj_w")?.clone(),
            proj_b: store.get("swt/proj_b")?.clone(),
        })
    }
}

/// Row t = payload_t·P + b + e_layer(l_t) + e_role(r_t).
pub fn embed_tokens(seq: &TokenSequence, emb: &StructuralEmbeddings) -> Result<Tensor> {
    let mut store = ParamStore::new();
    emb.store_into(&mut store);
    let mut g = Graph::new();
    let p = store.bind_const(&mut g);
    let rows = seq
        .tokens
        .iter()
        .map(|tok| {
            let payload = g.constant(Tensor::row(&tok.payload));
            embed_token_graph(&mut g, &p, payload, tok.layer, tok.role)
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::Token("empty token sequence".into()));
    }
    let out = g.concat(&rows, 0)?;
    Ok(g.value(out).clone())
}

/// Structural embedding of one 1×d_chunk payload node.
pub fn embed_token_graph(g: &mut Graph, p: &Bound, payload: NodeId, layer: usize, role: Role) -> Result<NodeId> {
    let table = p.get("swt/e_layer")?;
    let layers = g.shape(table)[0];
    if layer >= layers {
        return Err(Error::Token(format!("layer {layer} outside the {layers}-row embedding table")));
    }
    let proj = g.affine(payload, p.get("swt/proj_w")?, p.get("swt/proj_b")?)?;
    let el = g.gather_rows(table, vec![layer])?;
    let er = g.gather_rows(p.get("swt/e_role")?, vec![role.index()])?;
    let s = g.add(proj, el)?;
    g.add(s, er)
}
