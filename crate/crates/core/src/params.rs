//! Model configuration, parameter storage and the checkpoint format.
//!
//! Parameters are addressed by canonical dotted names (`fenc.blocks.0.attn.q.w`).
//! [`Layout`] lists every name with its shape and initializer for a given
//! configuration and training phase; it is the single source both for
//! initialization and for validating checkpoints on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::backbone::BackboneConfig;
use crate::ensemble::PatchConfig;
use crate::error::{Error, Result};
use crate::tokenizer::{Specials, DEFAULT_MAX_WORDS, DEFAULT_VOCAB_SIZE};

const CKPT_MAGIC: &[u8; 8] = b"BLNSCKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedDims {
    pub d_a: usize,
    pub d_b: usize,
    pub d_p: usize,
}

impl Default for EmbedDims {
    fn default() -> Self {
        EmbedDims {
            d_a: 768,
            d_b: 512,
            d_p: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub patch: PatchConfig,
    pub embed: EmbedDims,
    /// Self-attention blocks over the patches before pooling.
    pub func_layers: usize,
    /// Depth of the unimodal text encoder; the multimodal decoder matches it.
    pub text_layers: usize,
    pub lord_layers: usize,
    /// Function tokens produced by attention pooling; token 0 is contrastive.
    pub k2: usize,
    /// Maximum words per name (`n`).
    pub max_words: usize,
    /// Size of the id space, specials included.
    pub vocab_size: usize,
    pub init_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            patch: PatchConfig::default(),
            embed: EmbedDims::default(),
            func_layers: 4,
            text_layers: 4,
            lord_layers: 4,
            k2: 64,
            max_words: DEFAULT_MAX_WORDS,
            vocab_size: DEFAULT_VOCAB_SIZE + Specials::COUNT as usize,
            init_temperature: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.patch.validate()?;
        if self.embed.d_a == 0 || self.embed.d_b == 0 || self.embed.d_p == 0 {
            return Err(Error::config("embedding dims must be positive"));
        }
        if self.k2 < 2 {
            return Err(Error::config("k2 must be at least 2 (one contrastive token)"));
        }
        if self.max_words == 0 {
            return Err(Error::config("max_words must be positive"));
        }
        if self.vocab_size <= Specials::COUNT as usize {
            return Err(Error::config("vocabulary has no words"));
        }
        if !(self.init_temperature > 0.0 && self.init_temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }

    /// Small configuration for CPU runs on synthetic corpora, matching the
    /// provider dims `64/32/16`.
    pub fn desk(vocab_size: usize, max_words: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                d: 32,
                heads: 4,
                head_dim: 8,
                ffn_width: 64,
                dropout: 0.1,
            },
            patch: PatchConfig {
                slices_a: 4,
                slices_b: 4,
                max_blocks: 4,
                proj_depth: 1,
            },
            embed: EmbedDims {
                d_a: 64,
                d_b: 32,
                d_p: 16,
            },
            func_layers: 2,
            text_layers: 2,
            lord_layers: 2,
            k2: 8,
            max_words,
            vocab_size,
            init_temperature: 0.07,
        }
    }

    pub fn d(&self) -> usize {
        self.backbone.d
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Ensemble encoder, function encoder, text encoder, multimodal decoder.
    Pretrain,
    /// Ensemble encoder, function encoder and the masked-LM name decoder.
    Finetune,
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal) * std)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
}

#[derive(Clone, Debug, Default)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, shape: (usize, usize), init: Init) {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape,
            init,
        });
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let std = gain / (fan_in as f64).sqrt();
        self.push(format!("{prefix}.w"), (fan_in, fan_out), Init::Normal(std));
        self.push(format!("{prefix}.b"), (1, fan_out), Init::Zeros);
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.g"), (1, d), Init::Ones);
        self.push(format!("{prefix}.b"), (1, d), Init::Zeros);
    }

    pub fn attention(&mut self, prefix: &str, cfg: &BackboneConfig) {
        for p in ["q", "k", "v"] {
            self.linear(&format!("{prefix}.{p}"), cfg.d, cfg.d, 1.0);
        }
        self.linear(&format!("{prefix}.o"), cfg.d, cfg.d, 0.5);
    }

    pub fn block(&mut self, prefix: &str, cfg: &BackboneConfig) {
        self.layer_norm(&format!("{prefix}.ln1"), cfg.d);
        self.attention(&format!("{prefix}.attn"), cfg);
        self.layer_norm(&format!("{prefix}.ln2"), cfg.d);
        self.linear(&format!("{prefix}.ffn1"), cfg.d, cfg.ffn_width, 1.0);
        self.linear(&format!("{prefix}.ffn2"), cfg.ffn_width, cfg.d, 0.5);
    }

    pub fn pool(&mut self, prefix: &str, queries: usize, cfg: &BackboneConfig) {
        self.push(format!("{prefix}.queries"), (queries, cfg.d), Init::Normal(0.1));
        self.block(&format!("{prefix}.block"), cfg);
        self.layer_norm(&format!("{prefix}.ln"), cfg.d);
    }

    /// Parameters of `cfg` for `phase`.
    pub fn for_model(cfg: &ModelConfig, phase: Phase) -> Self {
        let mut l = Layout::default();
        crate::ensemble::layout(&mut l, cfg);
        let bb = &cfg.backbone;
        for i in 0..cfg.func_layers {
            l.block(&format!("fenc.blocks.{i}"), bb);
        }
        l.layer_norm("fenc.ln", cfg.d());
        l.pool("fenc.pool", cfg.k2, bb);
        match phase {
            Phase::Pretrain => crate::combo::layout(&mut l, cfg),
            Phase::Finetune => crate::lord::layout(&mut l, cfg),
        }
        l
    }

    pub fn shapes(&self) -> IndexMap<String, (usize, usize)> {
        self.specs.iter().map(|s| (s.name.clone(), s.shape)).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.specs.iter().map(|s| s.shape.0 * s.shape.1).sum()
    }

    pub fn materialize(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for s in &self.specs {
            let (r, c) = s.shape;
            let value = match s.init {
                Init::Normal(std) => normal(&mut rng, r, c, std),
                Init::Zeros => Mat::zeros((r, c)),
                Init::Ones => Mat::ones((r, c)),
                Init::Const(v) => Mat::from_elem((r, c), v),
            };
            store.insert(s.name.clone(), value);
        }
        store
    }
}

/// Named parameter tensors. Values are shared (`Arc`) with forward tapes;
/// mutation copies on write if a tape still holds a reference.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: IndexMap<String, Arc<Mat>>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    pub fn insert_arc(&mut self, name: impl Into<String>, value: Arc<Mat>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name).map(|a| &**a)
    }

    pub fn get_arc(&self, name: &str) -> Option<Arc<Mat>> {
        self.tensors.get(name).cloned()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Removes every tensor whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Errors unless names and shapes match `layout` exactly.
    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        let expected = layout.shapes();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(t) if t.dim() != *shape => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.dim()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Metadata stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub config_hash: String,
    pub vocab_hash: String,
    /// Hash of the run configuration that produced the checkpoint.
    #[serde(default)]
    pub run_hash: String,
    #[serde(default)]
    pub epoch: usize,
    /// Decoding threshold calibrated on validation data, if any.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub validation_f1: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    meta: CheckpointMeta,
}

/// Weights plus the architecture they belong to.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub meta: CheckpointMeta,
}

impl ModelParams {
    pub fn init(config: ModelConfig, phase: Phase, vocab_hash: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = Layout::for_model(&config, phase).materialize(seed);
        let meta = CheckpointMeta {
            phase,
            config_hash: config.hash(),
            vocab_hash: vocab_hash.to_string(),
            run_hash: String::new(),
            epoch: 0,
            threshold: None,
            validation_f1: None,
        };
        Ok(ModelParams {
            config,
            store,
            meta,
        })
    }

    /// Writes weights as little-endian `f32` with a JSON header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            meta: self.meta.clone(),
        })?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.store.len() as u64).to_le_bytes())?;
        for (name, t) in self.store.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let (r, c) = t.dim();
            w.write_all(&(r as u32).to_le_bytes())?;
            w.write_all(&(c as u32).to_le_bytes())?;
            for v in t.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint and validates every tensor shape against the
    /// layout implied by its stored configuration and phase.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let hlen = read_u64(&mut r)? as usize;
        let mut header = vec![0u8; hlen];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        header.config.validate()?;
        if header.config.hash() != header.meta.config_hash {
            return Err(Error::Checkpoint("config hash does not match stored config".into()));
        }
        let count = read_u64(&mut r)? as usize;
        let mut store = ParamStore::default();
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; rows * cols * 4];
            r.read_exact(&mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let m = Mat::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            store.insert(name, m);
        }
        store.check_layout(&Layout::for_model(&header.config, header.meta.phase))?;
        if !store.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter value".into()));
        }
        Ok(ModelParams {
            config: header.config,
            store,
            meta: header.meta,
        })
    }

    /// Rounds every weight through `f32`, matching what a save/load cycle
    /// produces.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.store.iter_mut() {
            t.mapv_inplace(|v| f64::from(v as f32));
        }
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::tiny_model;

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.patch.k1(), 82);
        assert_eq!(cfg.k2, 64);
    }

    #[test]
    fn checkpoint_round_trip_validates_shapes() {
        let cfg = tiny_model();
        let model = ModelParams::init(cfg.clone(), Phase::Pretrain, "vh", 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = ModelParams::load(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.meta, model.meta);
        let mut rounded = model.clone();
        rounded.round_to_f32();
        for (name, t) in rounded.store.iter() {
            assert_eq!(back.store.get(name).unwrap(), t, "{name}");
        }
    }

    #[test]
    fn checkpoint_rejects_wrong_shapes() {
        let cfg = tiny_model();
        let mut model = ModelParams::init(cfg, Phase::Finetune, "vh", 5).unwrap();
        model.store.insert("lord.pos", Mat::zeros((1, 1)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        model.save(&path).unwrap();
        assert!(matches!(ModelParams::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn layout_matches_materialized_store() {
        let cfg = tiny_model();
        for phase in [Phase::Pretrain, Phase::Finetune] {
            let layout = Layout::for_model(&cfg, phase);
            let store = layout.materialize(1);
            assert!(store.check_layout(&layout).is_ok());
            assert_eq!(store.num_scalars(), layout.num_scalars());
        }
    }
}
