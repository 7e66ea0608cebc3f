//! The full model: encoder, hyper-network, structural embeddings, task head
//! and per-molecule latent codes, in one named parameter store.

use std::path::Path;

use crate::cinr::{self, Activation, FieldArchitecture, FieldParameters};
use crate::encoder::{self, CanonicalFrame, EncoderConfig};
use crate::error::{Error, Result};
use crate::fshn::{self, FshnConfig};
use crate::geom::MolecularConfiguration;
use crate::params::{normal, xavier, ParamStore};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Dynamics,
    Property,
    Generation,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Dynamics => "dynamics",
            Task::Property => "property",
            Task::Generation => "generation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dynamics" => Ok(Task::Dynamics),
            "property" => Ok(Task::Property),
            "generation" => Ok(Task::Generation),
            other => Err(Error::InvalidArgument(format!("unknown task `{other}`"))),
        }
    }

    fn code(self) -> f64 {
        self as u8 as f64
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Task::Dynamics),
            1 => Ok(Task::Property),
            2 => Ok(Task::Generation),
            _ => Err(Error::Checkpoint(format!("bad task code {c}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::InvalidArgument(format!("unknown preset `{other}`"))),
        }
    }
}

/// Density channels: one per element in this list.
pub const DEFAULT_VOCAB: [u32; 4] = [1, 6, 7, 8];

/// Radius (Å) of the sphere a fresh dynamics model starts from.
pub const SPHERE_RADIUS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    pub encoder: EncoderConfig,
    pub field: FieldArchitecture,
    pub fshn: FshnConfig,
    pub k_f: usize,
    pub latent_dim: usize,
    pub vocab: Vec<u32>,
    pub n_props: usize,
}

impl ModelConfig {
    pub fn preset(preset: Preset, task: Task) -> Self {
        let vocab = DEFAULT_VOCAB.to_vec();
        let out = if task == Task::Generation { vocab.len() } else { 1 };
        let (encoder, field, fshn, k_f, latent_dim) = match preset {
            Preset::Tiny => (EncoderConfig::tiny(), FieldArchitecture::tiny(out), FshnConfig::tiny(), 2, 4),
            Preset::Desk => (EncoderConfig::desk(), FieldArchitecture::desk(out), FshnConfig::desk(), 4, 32),
            Preset::Paper => (EncoderConfig::paper(), FieldArchitecture::paper(out), FshnConfig::paper(), 32, 512),
        };
        Self { task, encoder, field, fshn, k_f, latent_dim, vocab, n_props: 1 }
    }

    /// Width of the condition vector for this task.
    pub fn d_z(&self) -> usize {
        match self.task {
            Task::Dynamics => self.encoder.embed_dim + 2 * self.k_f,
            Task::Property => self.encoder.embed_dim,
            Task::Generation => self.latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.fshn.validate()?;
        let want = if self.task == Task::Generation { self.vocab.len() } else { 1 };
        if self.field.out_dim != want {
            return Err(Error::InvalidArgument(format!(
                "{} fields need {want} output channels, not {}",
                self.task.name(),
                self.field.out_dim
            )));
        }
        if self.task == Task::Dynamics && self.k_f == 0 {
            return Err(Error::InvalidArgument("dynamics needs K_f ≥ 1".into()));
        }
        Ok(())
    }

    fn to_numbers(&self) -> Vec<f64> {
        let e = &self.encoder;
        let f = &self.field;
        let h = &self.fshn;
        let mut v = vec![
            1.0,
            self.task.code(),
            e.channels as f64,
            e.layers as f64,
            e.rbf_centers as f64,
            e.rbf_cutoff,
            e.embed_dim as f64,
            e.full_graph_max as f64,
            e.knn as f64,
            e.frame_eps,
            f.skip.map_or(-1.0, |s| s as f64),
            f.out_dim as f64,
            match f.activation {
                Activation::Softplus => 0.0,
                Activation::Identity => 1.0,
            },
            h.d_model as f64,
            h.heads as f64,
            h.blocks as f64,
            h.d_ff as f64,
            h.d_chunk as f64,
            self.k_f as f64,
            self.latent_dim as f64,
            self.n_props as f64,
            f.hidden.len() as f64,
        ];
        v.extend(f.hidden.iter().map(|&w| w as f64));
        v.push(self.vocab.len() as f64);
        v.extend(self.vocab.iter().map(|&z| z as f64));
        v
    }

    fn from_numbers(v: &[f64]) -> Result<Self> {
        let bad = || Error::Checkpoint("malformed model configuration record".into());
        if v.len() < 22 || v[0] != 1.0 {
            return Err(bad());
        }
        let u = |i: usize| v[i] as usize;
        let depth = u(21);
        let hidden: Vec<usize> = v.get(22..22 + depth).ok_or_else(bad)?.iter().map(|&w| w as usize).collect();
        let nv = *v.get(22 + depth).ok_or_else(bad)? as usize;
        let vocab: Vec<u32> = v.get(23 + depth..23 + depth + nv).ok_or_else(bad)?.iter().map(|&z| z as u32).collect();
        let activation = if v[12] == 0.0 { Activation::Softplus } else { Activation::Identity };
        let skip = if v[10] < 0.0 { None } else { Some(u(10)) };
        let cfg = Self {
            task: Task::from_code(v[1])?,
            encoder: EncoderConfig {
                channels: u(2),
                layers: u(3),
                rbf_centers: u(4),
                rbf_cutoff: v[5],
                embed_dim: u(6),
                full_graph_max: u(7),
                knn: u(8),
                frame_eps: v[9],
            },
            field: FieldArchitecture::new(hidden, u(11), skip, activation)?,
            fshn: FshnConfig { d_model: u(13), heads: u(14), blocks: u(15), d_ff: u(16), d_chunk: u(17) },
            k_f: u(18),
            latent_dim: u(19),
            n_props: u(20),
            vocab,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

pub fn latent_name(i: usize) -> String {
    format!("latent/{i}")
}

impl Model {
    /// Fresh parameters. `n_latents` codes are created for the generation
    /// task and ignored otherwise.
    pub fn init(config: ModelConfig, seed: u64, n_latents: usize) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        encoder::init_encoder_params(&config.encoder, seed, &mut params);
        fshn::init_hypernetwork(&config.fshn, &config.field, config.d_z(), seed.wrapping_add(1), &mut params)?;
        let mut rng = crate::rng(seed.wrapping_add(2));
        match config.task {
            Task::Property => {
                params.insert("head/w", xavier(&mut rng, config.fshn.d_model, config.n_props));
                params.insert("head/b", Tensor::zeros(&[1, config.n_props]));
            }
            Task::Generation => {
                for i in 0..n_latents {
                    params.insert(latent_name(i), normal(&mut rng, &[1, config.latent_dim], 1.0));
                }
            }
            Task::Dynamics => {
                let base = cinr::geometric_init(&config.field, SPHERE_RADIUS, seed.wrapping_add(3));
                fshn::set_base(&mut params, &config.fshn, &config.field, &base)?;
            }
        }
        Ok(Self { config, params })
    }

    /// Copies every tensor from `other` whose name and shape match a tensor
    /// here; returns how many were taken.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut taken = 0;
        let names: Vec<String> = self.params.iter().map(|(k, _)| k.clone()).collect();
        for name in names {
            if let Ok(t) = other.get(&name) {
                if t.shape() == self.params.get(&name).map(|x| x.shape().to_vec()).unwrap_or_default() {
                    self.params.insert(name, t.clone());
                    taken += 1;
                }
            }
        }
        taken
    }

    pub fn encode(&self, config: &MolecularConfiguration) -> Result<(Vec<f64>, CanonicalFrame)> {
        encoder::encode_molecule(&self.params, &self.config.encoder, config)
    }

    /// Field parameters for a condition vector, mean decoding unless a
    /// sampling seed is given.
    pub fn generate(&self, z: &[f64], sample_seed: Option<u64>) -> Result<(FieldParameters, Tensor)> {
        if z.len() != self.config.d_z() {
            return Err(Error::InvalidArgument(format!(
                "condition has {} entries, model expects {}",
                z.len(),
                self.config.d_z()
            )));
        }
        fshn::generate_params(&self.params, &self.config.fshn, &self.config.field, z, sample_seed)
    }

    /// Field for time `t` of a trajectory whose first frame is `first`,
    /// queried in the frame of `target`.
    pub fn dynamics_field(
        &self,
        first: &MolecularConfiguration,
        target: &MolecularConfiguration,
        t: f64,
    ) -> Result<(FieldParameters, CanonicalFrame)> {
        let (emb, _) = self.encode(first)?;
        let (_, frame) = self.encode(target)?;
        let mut z = emb;
        z.extend(fshn::time_features(t, self.config.k_f));
        Ok((self.generate(&z, None)?.0, frame))
    }

    pub fn predict_property(&self, config: &MolecularConfiguration) -> Result<Vec<f64>> {
        let (emb, _) = self.encode(config)?;
        let (_, hiddens) = self.generate(&emb, None)?;
        let pooled = fshn::aggregate_tokens(&hiddens)?;
        let w = self.params.get("head/w")?;
        let b = self.params.get("head/b")?;
        let (d, p) = w.dims2();
        Ok((0..p).map(|j| b.data()[j] + (0..d).map(|i| pooled[i] * w.get2(i, j)).sum::<f64>()).collect())
    }

    /// Adds N(0, std²) noise to the decoder output projections. They start
    /// at zero, where every gradient reaching the decoder vanishes; checks
    /// meant to exercise those paths perturb them first.
    pub fn jitter_projections(&mut self, std: f64, seed: u64) {
        fshn::jitter_projections(&mut self.params, std, seed);
    }

    pub fn latent(&self, i: usize) -> Result<Vec<f64>> {
        Ok(self.params.get(&latent_name(i))?.data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = self.params.clone();
        store.insert("meta/config", Tensor::row(&self.config.to_numbers()));
        store.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(ParamStore::load(path)?)
    }

    pub fn from_store(mut store: ParamStore) -> Result<Self> {
        let meta = store
            .remove("meta/config")
            .ok_or_else(|| Error::Checkpoint("checkpoint has no model configuration".into()))?;
        let config = ModelConfig::from_numbers(meta.data())?;
        Ok(Self { config, params: store })
    }
}

/// Property head applied to a pooled 1×d_model node.
pub fn property_head(g: &mut Graph, p: &crate::params::Bound, pooled: NodeId) -> Result<NodeId> {
    g.affine(pooled, p.get("head/w")?, p.get("head/b")?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_record_round_trips() {
        for preset in [Preset::Tiny, Preset::Desk, Preset::Paper] {
            for task in [Task::Dynamics, Task::Property, Task::Generation] {
                let c = ModelConfig::preset(preset, task);
                assert_eq!(ModelConfig::from_numbers(&c.to_numbers()).unwrap(), c);
            }
        }
        assert!(ModelConfig::from_numbers(&[2.0; 30]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::init(ModelConfig::preset(Preset::Tiny, Task::Generation), 3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        assert_eq!(Model::load(&path).unwrap(), m);
        assert_eq!(m.latent(1).unwrap().len(), 4);
    }

    #[test]
    fn condition_width_is_checked() {
        let m = Model::init(ModelConfig::preset(Preset::Tiny, Task::Dynamics), 1, 0).unwrap();
        assert_eq!(m.config.d_z(), 8 + 4);
        assert!(m.generate(&[0.0; 3], None).is_err());
        let c = MolecularConfiguration::new(vec![[0.0; 3], [1.2, 0.0, 0.0], [0.0, 1.1, 0.3]], vec![6, 8, 1]).unwrap();
        let (theta, _) = m.dynamics_field(&c, &c, 0.5).unwrap();
        assert!(theta.check(&m.config.field).is_ok());
    }

    #[test]
    fn finetune_loads_matching_tensors() {
        let pre = Model::init(ModelConfig::preset(Preset::Tiny, Task::Generation), 1, 1).unwrap();
        let mut cfg = ModelConfig::preset(Preset::Tiny, Task::Property);
        cfg.latent_dim = cfg.encoder.embed_dim;
        let mut m = Model::init(cfg, 2, 0).unwrap();
        let taken = m.load_matching(&pre.params);
        assert!(taken > 0);
        assert_eq!(m.params.get("encoder/embed").unwrap(), pre.params.get("encoder/embed").unwrap());
        assert!(m.params.contains("head/w"));
    }
}
