//! Ensemble encoder: turns an [`EmbeddingBundle`] into `k1` patches of
//! width `d`.
//!
//! Both function-level vectors are cut into equal slices (zero-padded to a
//! multiple of the slice count), every slice and every basic-block row is
//! projected to `d` by a source-specific projection, and a learnable
//! positional encoding indexed by slice or block position is added. Block
//! sequences are truncated to `max_blocks` or padded with a learned null
//! patch that is masked out of attention. Patch order is
//! `(func_a slices, func_b slices, blocks)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Var};
use crate::backbone::{linear, Graph};
use crate::embedding::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::params::{Init, Layout, ModelConfig, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub slices_a: usize,
    pub slices_b: usize,
    pub max_blocks: usize,
    /// Affine layers per projection (GELU between layers).
    #[serde(default = "one")]
    pub proj_depth: usize,
}

fn one() -> usize {
    1
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            slices_a: 16,
            slices_b: 16,
            max_blocks: 50,
            proj_depth: 1,
        }
    }
}

impl PatchConfig {
    pub fn k1(&self) -> usize {
        self.slices_a + self.slices_b + self.max_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices_a == 0 || self.slices_b == 0 || self.max_blocks == 0 {
            return Err(Error::config("slice counts and max_blocks must be positive"));
        }
        if self.proj_depth == 0 {
            return Err(Error::config("proj_depth must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchSource {
    FuncA { slice: usize },
    FuncB { slice: usize },
    Block { index: usize },
    Padding,
}

/// Patch values with their source.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patches: Mat,
    pub pos_ids: Vec<usize>,
    pub sources: Vec<PatchSource>,
}

impl PatchSet {
    /// `false` for padding patches.
    pub fn valid(&self) -> Vec<bool> {
        self.sources.iter().map(|s| *s != PatchSource::Padding).collect()
    }
}

/// Patches recorded on a graph.
pub struct EncodedPatches {
    pub patches: Var,
    pub pos_ids: Vec<usize>,
    pub sources: Vec<PatchSource>,
}

impl EncodedPatches {
    pub fn valid(&self) -> Vec<bool> {
        self.sources.iter().map(|s| *s != PatchSource::Padding).collect()
    }
}

pub fn slice_len(dim: usize, n_slices: usize) -> usize {
    dim.div_ceil(n_slices)
}

/// Zero-pads `vec` to a multiple of `n_slices` and cuts it into that many
/// contiguous equal chunks.
pub fn slice_embedding(vec: &[f64], n_slices: usize) -> Result<Vec<Vec<f64>>> {
    if n_slices == 0 {
        return Err(Error::config("slice count must be positive"));
    }
    let len = slice_len(vec.len(), n_slices);
    let mut padded = vec.to_vec();
    padded.resize(len * n_slices, 0.0);
    Ok(padded.chunks(len.max(1)).take(n_slices).map(<[f64]>::to_vec).collect())
}

pub(crate) fn layout(l: &mut Layout, cfg: &ModelConfig) {
    let d = cfg.d();
    let p = &cfg.patch;
    let projection = |l: &mut Layout, prefix: &str, fan_in: usize| {
        for i in 0..p.proj_depth {
            let input = if i == 0 { fan_in } else { d };
            l.linear(&format!("{prefix}.{i}"), input, d, 1.0);
        }
    };
    projection(l, "ens.proj_a", slice_len(cfg.embed.d_a, p.slices_a));
    l.push("ens.pos_a", (p.slices_a, d), Init::Normal(0.1));
    projection(l, "ens.proj_b", slice_len(cfg.embed.d_b, p.slices_b));
    l.push("ens.pos_b", (p.slices_b, d), Init::Normal(0.1));
    projection(l, "ens.proj_p", cfg.embed.d_p);
    l.push("ens.pos_p", (p.max_blocks, d), Init::Normal(0.1));
    l.push("ens.null", (1, d), Init::Normal(0.1));
}

fn project(g: &mut Graph, x: Var, prefix: &str, depth: usize) -> Result<Var> {
    let mut h = linear(g, x, &format!("{prefix}.0"))?;
    for i in 1..depth {
        h = g.tape.gelu(h);
        h = linear(g, h, &format!("{prefix}.{i}"))?;
    }
    Ok(h)
}

fn rows_to_mat(rows: &[Vec<f64>]) -> Mat {
    let cols = rows.first().map_or(0, Vec::len);
    Mat::from_shape_fn((rows.len(), cols), |(r, c)| rows[r][c])
}

pub fn check_bundle(bundle: &EmbeddingBundle, cfg: &ModelConfig) -> Result<()> {
    let e = &cfg.embed;
    if bundle.func_a.len() != e.d_a || bundle.func_b.len() != e.d_b {
        return Err(Error::shape(format!(
            "bundle dims ({}, {}) do not match configured ({}, {})",
            bundle.func_a.len(),
            bundle.func_b.len(),
            e.d_a,
            e.d_b
        )));
    }
    if bundle.blocks.is_empty() {
        return Err(Error::Malformed("bundle has no basic blocks".into()));
    }
    if bundle.blocks.iter().any(|b| b.len() != e.d_p) {
        return Err(Error::shape(format!("block rows must have {} entries", e.d_p)));
    }
    Ok(())
}

/// Records the ensemble encoding of `bundle` on `g`.
pub fn encode_function(g: &mut Graph, bundle: &EmbeddingBundle, cfg: &ModelConfig) -> Result<EncodedPatches> {
    check_bundle(bundle, cfg)?;
    let p = &cfg.patch;
    let to_f64 = |v: &[f32]| v.iter().map(|x| f64::from(*x)).collect::<Vec<f64>>();

    let mut parts = Vec::with_capacity(4);
    let mut pos_ids = Vec::with_capacity(p.k1());
    let mut sources = Vec::with_capacity(p.k1());

    for (src, vec, n, tag) in [
        ("a", &bundle.func_a, p.slices_a, 0u8),
        ("b", &bundle.func_b, p.slices_b, 1u8),
    ] {
        let slices = slice_embedding(&to_f64(vec), n)?;
        let x = g.constant(rows_to_mat(&slices));
        let h = project(g, x, &format!("ens.proj_{src}"), p.proj_depth)?;
        let pos = g.param(&format!("ens.pos_{src}"))?;
        parts.push(g.tape.add(h, pos)?);
        for i in 0..n {
            pos_ids.push(i);
            sources.push(if tag == 0 {
                PatchSource::FuncA { slice: i }
            } else {
                PatchSource::FuncB { slice: i }
            });
        }
    }

    let kept = bundle.blocks.len().min(p.max_blocks);
    let rows: Vec<Vec<f64>> = bundle.blocks[..kept].iter().map(|b| to_f64(b)).collect();
    let x = g.constant(rows_to_mat(&rows));
    let h = project(g, x, "ens.proj_p", p.proj_depth)?;
    let pos_table = g.param("ens.pos_p")?;
    let idx: Vec<usize> = (0..kept).collect();
    let pos = g.tape.gather_rows(pos_table, &idx)?;
    parts.push(g.tape.add(h, pos)?);
    for i in 0..kept {
        pos_ids.push(i);
        sources.push(PatchSource::Block { index: i });
    }
    if kept < p.max_blocks {
        let null = g.param("ens.null")?;
        let pad = g.tape.gather_rows(null, &vec![0; p.max_blocks - kept])?;
        parts.push(pad);
        for i in kept..p.max_blocks {
            pos_ids.push(i);
            sources.push(PatchSource::Padding);
        }
    }
    let patches = g.tape.concat_rows(&parts)?;
    Ok(EncodedPatches {
        patches,
        pos_ids,
        sources,
    })
}

/// Evaluates [`encode_function`] outside of training.
pub fn encode_function_values(params: &ParamStore, bundle: &EmbeddingBundle, cfg: &ModelConfig) -> Result<PatchSet> {
    let mut g = Graph::new(params);
    let enc = encode_function(&mut g, bundle, cfg)?;
    Ok(PatchSet {
        patches: g.value(enc.patches).clone(),
        pos_ids: enc.pos_ids,
        sources: enc.sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{synth_bundle, ProviderSpec};
    use crate::params::{ModelConfig, Phase};
    use crate::testutil::tiny_model;
    use crate::tokenizer::NameSequence;

    fn tiny_store(cfg: &ModelConfig) -> ParamStore {
        let mut l = Layout::default();
        layout(&mut l, cfg);
        l.materialize(3)
    }

    fn bundle_for(cfg: &ModelConfig, words: &[u32], id: &str) -> EmbeddingBundle {
        let spec = ProviderSpec {
            d_a: cfg.embed.d_a,
            d_b: cfg.embed.d_b,
            d_p: cfg.embed.d_p,
            ..ProviderSpec::default()
        };
        synth_bundle(id, &NameSequence::from_words(words, 1), &spec)
    }

    #[test]
    fn slicing_rules() {
        let v: Vec<f64> = (0..768).map(f64::from).collect();
        let s = slice_embedding(&v, 16).unwrap();
        assert_eq!(s.len(), 16);
        assert!(s.iter().all(|c| c.len() == 48));
        assert_eq!(s[1][0], 48.0);
        assert_eq!(slice_embedding(&v, 1).unwrap(), vec![v.clone()]);
        let s = slice_embedding(&v[..10], 4).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|c| c.len() == 3));
        assert_eq!(s[3], vec![9.0, 0.0, 0.0]);
        assert!(slice_embedding(&v, 0).is_err());
    }

    #[test]
    fn default_shape_is_82_by_768() {
        let cfg = ModelConfig::default();
        let store = tiny_store(&cfg);
        let bundle = bundle_for(&cfg, &[4, 5, 6], "f");
        let ps = encode_function_values(&store, &bundle, &cfg).unwrap();
        assert_eq!(ps.patches.dim(), (82, 768));
        assert_eq!(ps.sources.iter().filter(|s| **s == PatchSource::Padding).count(), 47);
        assert!(ps.patches.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_bundle_with_zero_weights_gives_positional_encodings() {
        let cfg = tiny_model();
        let mut store = tiny_store(&cfg);
        let names: Vec<String> = store.names().filter(|n| n.contains("proj")).map(String::from).collect();
        for n in names {
            store.get_mut(&n).unwrap().fill(0.0);
        }
        let bundle = EmbeddingBundle {
            func_a: vec![0.0; cfg.embed.d_a],
            func_b: vec![0.0; cfg.embed.d_b],
            blocks: vec![vec![0.0; cfg.embed.d_p]; 2],
        };
        let ps = encode_function_values(&store, &bundle, &cfg).unwrap();
        let p = &cfg.patch;
        let pos_a = store.get("ens.pos_a").unwrap();
        let pos_b = store.get("ens.pos_b").unwrap();
        let pos_p = store.get("ens.pos_p").unwrap();
        for i in 0..p.slices_a {
            assert_eq!(ps.patches.row(i), pos_a.row(i));
        }
        for i in 0..p.slices_b {
            assert_eq!(ps.patches.row(p.slices_a + i), pos_b.row(i));
        }
        for i in 0..2 {
            assert_eq!(ps.patches.row(p.slices_a + p.slices_b + i), pos_p.row(i));
        }
    }

    #[test]
    fn padding_and_truncation() {
        let cfg = tiny_model();
        let store = tiny_store(&cfg);
        let mut bundle = bundle_for(&cfg, &[4, 5, 6], "f");
        let ps = encode_function_values(&store, &bundle, &cfg).unwrap();
        let k1 = cfg.patch.k1();
        assert_eq!(ps.patches.nrows(), k1);
        let pads = cfg.patch.max_blocks - 3;
        assert_eq!(ps.valid().iter().filter(|v| !**v).count(), pads);
        let null = store.get("ens.null").unwrap();
        assert_eq!(ps.patches.row(k1 - 1), null.row(0));

        let extra = bundle.blocks[0].clone();
        bundle.blocks = vec![extra; cfg.patch.max_blocks + 5];
        let ps = encode_function_values(&store, &bundle, &cfg).unwrap();
        assert_eq!(ps.patches.nrows(), k1);
        assert!(ps.valid().iter().all(|v| *v));
        let blocks: Vec<usize> = ps
            .sources
            .iter()
            .filter_map(|s| match s {
                PatchSource::Block { index } => Some(*index),
                _ => None,
            })
            .collect();
        assert_eq!(blocks, (0..cfg.patch.max_blocks).collect::<Vec<_>>());
    }

    #[test]
    fn block_order_changes_output() {
        let cfg = tiny_model();
        let store = tiny_store(&cfg);
        let bundle = bundle_for(&cfg, &[4, 5, 6], "f");
        let mut swapped = bundle.clone();
        swapped.blocks.swap(0, 2);
        let a = encode_function_values(&store, &bundle, &cfg).unwrap();
        let b = encode_function_values(&store, &swapped, &cfg).unwrap();
        let start = cfg.patch.slices_a + cfg.patch.slices_b;
        let diff: f64 = (0..3)
            .map(|i| (&a.patches.row(start + i) - &b.patches.row(start + i)).mapv(f64::abs).sum())
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cfg = tiny_model();
        let store = tiny_store(&cfg);
        let mut bundle = bundle_for(&cfg, &[4], "f");
        bundle.func_b.push(0.0);
        assert!(encode_function_values(&store, &bundle, &cfg).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut cfg = tiny_model();
        cfg.patch.proj_depth = 2;
        let store = crate::params::Layout::for_model(&cfg, Phase::Pretrain).materialize(8);
        let bundle = bundle_for(&cfg, &[4, 7, 5], "g");
        let probe = crate::params::normal(
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2),
            cfg.patch.k1(),
            cfg.d(),
            1.0,
        );
        let worst = fd_param_check_only(&store, &["ens."], |g| {
            let enc = encode_function(g, &bundle, &cfg)?;
            let p = g.constant(probe.clone());
            let m = g.tape.mul(enc.patches, p)?;
            let m = g.tape.gelu(m);
            Ok(g.tape.sum(m))
        });
        assert!(worst < 1e-4, "{worst}");
    }

    fn fd_param_check_only(
        store: &ParamStore,
        only: &[&str],
        f: impl Fn(&mut Graph) -> Result<Var>,
    ) -> f64 {
        crate::gradcheck::worst(&crate::gradcheck::check_params(store, only, 1e-5, f).unwrap())
    }
}
