//! Transformer building blocks shared by every encoder and decoder:
//! multi-head attention, pre-norm residual blocks and attention pooling with
//! learnable queries.

use std::collections::HashMap;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_width: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d: 768,
            heads: 32,
            head_dim: 24,
            ffn_width: 4 * 768,
            dropout: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::config("heads and head_dim must be positive"));
        }
        if self.heads * self.head_dim != self.d {
            return Err(Error::config(format!(
                "heads ({}) x head_dim ({}) must equal d ({})",
                self.heads, self.head_dim, self.d
            )));
        }
        if self.ffn_width == 0 {
            return Err(Error::config("ffn_width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// A forward pass over a [`ParamStore`]: parameters are bound to tape leaves
/// on first use so that gradients can be mapped back to their names.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: HashMap<String, Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
            dropout: None,
        }
    }

    /// A graph that applies dropout at `rate` with masks drawn from `seed`.
    pub fn training(params: &'p ParamStore, rate: f64, seed: u64) -> Self {
        let mut g = Self::new(params);
        if rate > 0.0 {
            g.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        g
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self
            .params
            .get_arc(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let v = self.tape.leaf(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.tape.value(v)
    }

    pub fn mark(&self) -> usize {
        self.tape.len()
    }

    /// Discards nodes recorded after `mark`, unbinding parameters first
    /// bound after it.
    pub fn reset(&mut self, mark: usize) {
        self.tape.truncate(mark);
        self.bound.retain(|_, v| v.0 < mark);
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let dim = self.tape.value(x).raw_dim();
        let mask = Mat::from_shape_simple_fn(dim, || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.tape.dropout(x, mask)
    }

    /// Gradients of `loss` for every bound parameter.
    pub fn backward(&self, loss: Var) -> IndexMap<String, Mat> {
        let mut grads = self.tape.backward(loss);
        let mut out: Vec<(String, Mat)> = self
            .bound
            .iter()
            .filter_map(|(name, v)| grads.take(*v).map(|g| (name.clone(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out.into_iter().collect()
    }
}

pub fn linear(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.tape.matmul(x, w)?;
    g.tape.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.g"))?;
    let bias = g.param(&format!("{prefix}.b"))?;
    g.tape.layer_norm(x, gain, bias)
}

/// Scaled dot-product attention over already-projected `q`, `k`, `v`, split
/// into `heads` equal column groups and concatenated back.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Array2<bool>>,
    heads: usize,
) -> Result<Var> {
    let (nq, dq) = g.value(q).dim();
    let (nk, dk) = g.value(k).dim();
    let (nv, dv) = g.value(v).dim();
    if dq != dk || nk != nv || dv != dq {
        return Err(Error::shape(format!(
            "attention q {nq}x{dq}, k {nk}x{dk}, v {nv}x{dv}"
        )));
    }
    if heads == 0 || dq % heads != 0 {
        return Err(Error::shape(format!("width {dq} not divisible into {heads} heads")));
    }
    if let Some(m) = mask {
        if m.dim() != (nq, nk) {
            return Err(Error::shape(format!(
                "mask {:?} for {nq} queries x {nk} keys",
                m.dim()
            )));
        }
    }
    let hd = dq / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.tape.slice_cols(q, h * hd, hd)?;
        let kh = g.tape.slice_cols(k, h * hd, hd)?;
        let vh = g.tape.slice_cols(v, h * hd, hd)?;
        let scores = g.tape.matmul_nt(qh, kh)?;
        let scores = g.tape.scale(scores, scale);
        let weights = g.tape.softmax(scores, mask)?;
        outs.push(g.tape.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.tape.concat_cols(&outs)
    }
}

/// Projected multi-head attention: queries from `q_in`, keys and values from
/// `kv_in`, followed by the output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    mask: Option<&Array2<bool>>,
    cfg: &BackboneConfig,
) -> Result<Var> {
    let q = linear(g, q_in, &format!("{prefix}.q"))?;
    let k = linear(g, kv_in, &format!("{prefix}.k"))?;
    let v = linear(g, kv_in, &format!("{prefix}.v"))?;
    let attn = scaled_dot_attention(g, q, k, v, mask, cfg.heads)?;
    linear(g, attn, &format!("{prefix}.o"))
}

/// Pre-norm block: `x + Attn(LN(x), ctx or LN(x))` then `+ FFN(LN(.))`.
/// With `ctx` the attention is cross-attention over `ctx`.
pub fn transformer_block(
    g: &mut Graph,
    prefix: &str,
    x: Var,
    ctx: Option<Var>,
    mask: Option<&Array2<bool>>,
    cfg: &BackboneConfig,
) -> Result<Var> {
    let width = g.value(x).ncols();
    if width != cfg.d {
        return Err(Error::shape(format!("block input width {width}, expected {}", cfg.d)));
    }
    let h = layer_norm(g, x, &format!("{prefix}.ln1"))?;
    let kv = ctx.unwrap_or(h);
    let a = multi_head_attention(g, &format!("{prefix}.attn"), h, kv, mask, cfg)?;
    let a = g.dropout(a)?;
    let x = g.tape.add(x, a)?;
    let h = layer_norm(g, x, &format!("{prefix}.ln2"))?;
    let f = linear(g, h, &format!("{prefix}.ffn1"))?;
    let f = g.tape.gelu(f);
    let f = linear(g, f, &format!("{prefix}.ffn2"))?;
    let f = g.dropout(f)?;
    g.tape.add(x, f)
}

/// Mask letting every query see exactly the keys flagged in `keys`.
pub fn key_mask(queries: usize, keys: &[bool]) -> Array2<bool> {
    Array2::from_shape_fn((queries, keys.len()), |(_, k)| keys[k])
}

/// Lower-triangular mask: position `t` sees positions `<= t`.
pub fn causal_mask(len: usize) -> Array2<bool> {
    Array2::from_shape_fn((len, len), |(q, k)| k <= q)
}

/// Cross-attention of the learnable queries `{prefix}.queries` over `ctx`,
/// skipping keys flagged `false` in `ctx_valid`. Returns one token per query.
pub fn attention_pool(
    g: &mut Graph,
    prefix: &str,
    ctx: Var,
    ctx_valid: &[bool],
    cfg: &BackboneConfig,
) -> Result<Var> {
    let rows = g.value(ctx).nrows();
    if rows == 0 || rows != ctx_valid.len() {
        return Err(Error::shape(format!(
            "attention pool over {rows} patches with {} flags",
            ctx_valid.len()
        )));
    }
    if !ctx_valid.iter().any(|v| *v) {
        return Err(Error::Malformed("every patch is masked".into()));
    }
    let queries = g.param(&format!("{prefix}.queries"))?;
    let nq = g.value(queries).nrows();
    let mask = key_mask(nq, ctx_valid);
    let out = transformer_block(g, &format!("{prefix}.block"), queries, Some(ctx), Some(&mask), cfg)?;
    layer_norm(g, out, &format!("{prefix}.ln"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{normal, Layout};
    use crate::testutil::{fd_param_check, tiny_backbone};
    use ndarray::array;

    fn block_store(cfg: &BackboneConfig, seed: u64) -> ParamStore {
        let mut layout = Layout::default();
        layout.block("b0", cfg);
        layout.block("b1", cfg);
        layout.pool("pool", 3, cfg);
        let mut store = layout.materialize(seed);
        // non-trivial norms so their gradients are exercised
        for (name, v) in store.iter_mut() {
            if name.ends_with(".g") || name.ends_with("ln1.b") || name.ends_with("ln2.b") {
                v.mapv_inplace(|x| x + 0.1 * (name.len() as f64).sin());
            }
        }
        store
    }

    #[test]
    fn config_enforces_head_product() {
        assert!(BackboneConfig::default().validate().is_ok());
        let bad = BackboneConfig { heads: 5, ..BackboneConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_values_give_zero_output() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let q = g.constant(array![[0.3, -0.2], [1.0, 0.5]]);
        let k = g.constant(array![[0.1, 0.4], [0.2, -0.7], [0.0, 1.0]]);
        let v = g.constant(Mat::zeros((3, 2)));
        let out = scaled_dot_attention(&mut g, q, k, v, None, 2).unwrap();
        assert!(g.value(out).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn single_key_returns_value_row() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let q = g.constant(array![[3.0, -1.0, 0.2], [-5.0, 2.0, 9.0]]);
        let k = g.constant(array![[0.5, 0.5, 0.5]]);
        let v = g.constant(array![[1.0, 2.0, 3.0]]);
        let out = scaled_dot_attention(&mut g, q, k, v, None, 1).unwrap();
        assert_eq!(g.value(out), &array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
    }

    #[test]
    fn fully_masked_row_outputs_zero() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let q = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let k = g.constant(array![[1.0, 1.0], [2.0, 0.0]]);
        let v = g.constant(array![[4.0, 5.0], [6.0, 7.0]]);
        let mask = array![[true, false], [false, false]];
        let out = scaled_dot_attention(&mut g, q, k, v, Some(&mask), 2).unwrap();
        let out = g.value(out);
        assert_eq!(out.row(0).to_vec(), vec![4.0, 5.0]);
        assert_eq!(out.row(1).to_vec(), vec![0.0, 0.0]);
        assert!(out.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn attention_shape_errors() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let q = g.constant(Mat::zeros((2, 4)));
        let k = g.constant(Mat::zeros((3, 4)));
        let v = g.constant(Mat::zeros((2, 4)));
        assert!(scaled_dot_attention(&mut g, q, k, v, None, 2).is_err());
        let v = g.constant(Mat::zeros((3, 4)));
        assert!(scaled_dot_attention(&mut g, q, k, v, None, 3).is_err());
        let mask = Array2::from_elem((3, 3), true);
        assert!(scaled_dot_attention(&mut g, q, k, v, Some(&mask), 2).is_err());
    }

    #[test]
    fn zeroed_output_projections_make_block_identity() {
        let cfg = tiny_backbone();
        let mut store = block_store(&cfg, 1);
        for name in ["b0.attn.o.w", "b0.attn.o.b", "b0.ffn2.w", "b0.ffn2.b"] {
            store.get_mut(name).unwrap().fill(0.0);
        }
        let x0 = normal(&mut ChaCha8Rng::seed_from_u64(9), 5, cfg.d, 1.0);
        let mut g = Graph::new(&store);
        let x = g.constant(x0.clone());
        let y = transformer_block(&mut g, "b0", x, None, Some(&causal_mask(5)), &cfg).unwrap();
        assert_eq!(g.value(y), &x0);
    }

    #[test]
    fn block_rejects_wrong_width() {
        let cfg = tiny_backbone();
        let store = block_store(&cfg, 1);
        let mut g = Graph::new(&store);
        let x = g.constant(Mat::zeros((3, cfg.d + 1)));
        assert!(transformer_block(&mut g, "b0", x, None, None, &cfg).is_err());
    }

    #[test]
    fn pool_shapes_and_symmetry() {
        let cfg = tiny_backbone();
        let store = block_store(&cfg, 2);
        let mut g = Graph::new(&store);
        let row = normal(&mut ChaCha8Rng::seed_from_u64(4), 1, cfg.d, 1.0);
        let same = Mat::from_shape_fn((6, cfg.d), |(_, c)| row[[0, c]]);
        let ctx = g.constant(same);
        let out = attention_pool(&mut g, "pool", ctx, &[true; 6], &cfg).unwrap();
        assert_eq!(g.value(out).dim(), (3, cfg.d));

        // identical patches: attention output is the same for every query,
        // so each token differs from its query only through the query path
        let mut g2 = Graph::new(&store);
        let single = g2.constant(row.clone());
        let out2 = attention_pool(&mut g2, "pool", single, &[true], &cfg).unwrap();
        let diff = (g.value(out) - g2.value(out2)).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn pool_is_permutation_invariant_over_patches() {
        let cfg = tiny_backbone();
        let store = block_store(&cfg, 3);
        let patches = normal(&mut ChaCha8Rng::seed_from_u64(5), 6, cfg.d, 1.0);
        let valid = [true, true, false, true, true, true];
        let perm = [4, 2, 0, 5, 1, 3];
        let permuted = patches.select(ndarray::Axis(0), &perm);
        let pvalid: Vec<bool> = perm.iter().map(|&i| valid[i]).collect();
        let run = |p: Mat, v: &[bool]| {
            let mut g = Graph::new(&store);
            let c = g.constant(p);
            let out = attention_pool(&mut g, "pool", c, v, &cfg).unwrap();
            g.value(out).clone()
        };
        let a = run(patches, &valid);
        let b = run(permuted, &pvalid);
        assert!((&a - &b).mapv(f64::abs).sum() < 1e-10);
    }

    #[test]
    fn pool_rejects_all_masked() {
        let cfg = tiny_backbone();
        let store = block_store(&cfg, 3);
        let mut g = Graph::new(&store);
        let c = g.constant(Mat::zeros((2, cfg.d)));
        assert!(attention_pool(&mut g, "pool", c, &[false, false], &cfg).is_err());
    }

    #[test]
    fn two_layer_stack_gradients_match_finite_differences() {
        let cfg = tiny_backbone();
        let store = block_store(&cfg, 11);
        let x0 = normal(&mut ChaCha8Rng::seed_from_u64(12), 4, cfg.d, 1.0);
        let ctx0 = normal(&mut ChaCha8Rng::seed_from_u64(13), 5, cfg.d, 1.0);
        let probe = normal(&mut ChaCha8Rng::seed_from_u64(14), 4, cfg.d, 1.0);
        let worst = fd_param_check(&store, |g| {
            let x = g.constant(x0.clone());
            let ctx = g.constant(ctx0.clone());
            let h = transformer_block(g, "b0", x, None, Some(&causal_mask(4)), &cfg)?;
            let h = transformer_block(g, "b1", h, Some(ctx), None, &cfg)?;
            let p = g.constant(probe.clone());
            let m = g.tape.mul(h, p)?;
            let pooled = attention_pool(g, "pool", h, &[true, true, false, true], &cfg)?;
            let s1 = g.tape.sum(m);
            let s2 = g.tape.sum(pooled);
            let s2 = g.tape.mul(s2, s2)?;
            g.tape.add(s1, s2)
        });
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
