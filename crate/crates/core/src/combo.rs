//! Contrastive captioning pre-training.
//!
//! The function encoder (self-attention over ensemble patches followed by
//! attention pooling with `k2` learnable queries) produces function tokens;
//! token 0 is the contrastive token and the rest feed captioning. A causal
//! unimodal text encoder embeds the name with a trailing `[CLS]` token. A
//! multimodal decoder runs on the unimodal outputs with cross-attention to
//! the captioning tokens. The objective is the unweighted sum of a symmetric
//! contrastive loss over `[CLS]`/contrastive token pairs and a teacher-forced
//! captioning cross-entropy.
//!
//! Text slot layout for `n = max_words`: the encoder sees
//! `[start, t_0, .., t_{n-2}, CLS]` (`n + 1` positions) where `t` is the name
//! padded to `n` ids; the decoder output at slot `i` predicts `t_i`.

use crate::autograd::{Mat, Var};
use crate::backbone::{attention_pool, causal_mask, key_mask, layer_norm, linear, transformer_block, Graph};
use crate::embedding::EmbeddingBundle;
use crate::ensemble::encode_function;
use crate::error::{Error, Result};
use crate::params::{Init, Layout, ModelConfig};
use crate::tokenizer::{NameSequence, Specials};

pub(crate) fn layout(l: &mut Layout, cfg: &ModelConfig) {
    let d = cfg.d();
    let n = cfg.max_words;
    let bb = &cfg.backbone;
    l.push("text.word_emb", (cfg.vocab_size, d), Init::Normal(0.1));
    l.push("text.pos", (n + 1, d), Init::Normal(0.1));
    l.push("text.start", (1, d), Init::Normal(0.1));
    l.push("text.cls", (1, d), Init::Normal(0.1));
    for i in 0..cfg.text_layers {
        l.block(&format!("text.blocks.{i}"), bb);
    }
    l.layer_norm("text.ln", d);
    for i in 0..cfg.text_layers {
        l.block(&format!("mm.blocks.{i}.self"), bb);
        l.block(&format!("mm.blocks.{i}.cross"), bb);
    }
    l.layer_norm("mm.ln", d);
    l.linear("mm.head", d, cfg.vocab_size, 1.0);
    l.push("temp.log_sigma", (1, 1), Init::Const(cfg.init_temperature.ln()));
}

/// Function encoder: `k2 × d` function tokens for one bundle.
pub fn function_tokens(g: &mut Graph, bundle: &EmbeddingBundle, cfg: &ModelConfig) -> Result<Var> {
    let enc = encode_function(g, bundle, cfg)?;
    let valid = enc.valid();
    let mask = key_mask(valid.len(), &valid);
    let mut x = enc.patches;
    for i in 0..cfg.func_layers {
        x = transformer_block(g, &format!("fenc.blocks.{i}"), x, None, Some(&mask), &cfg.backbone)?;
    }
    let x = layer_norm(g, x, "fenc.ln")?;
    attention_pool(g, "fenc.pool", x, &valid, &cfg.backbone)
}

fn check_name(name: &NameSequence, cfg: &ModelConfig) -> Result<()> {
    let words = name.num_words(Specials::default());
    if words > cfg.max_words || name.ids.len() > cfg.max_words + 1 {
        return Err(Error::Malformed(format!(
            "name has {words} words, more than the maximum {}",
            cfg.max_words
        )));
    }
    if name.ids.iter().any(|&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Malformed("name id outside the model vocabulary".into()));
    }
    Ok(())
}

/// Name ids padded (or cut) to `n` slots: the captioning targets.
pub fn caption_slots(name: &NameSequence, cfg: &ModelConfig) -> Vec<u32> {
    name.padded(cfg.max_words, Specials::default().pad)
}

/// Causal unimodal text encoder; returns `(n + 1) × d` tokens, the last
/// being the `[CLS]` token.
pub fn unimodal_text_encode(g: &mut Graph, name: &NameSequence, cfg: &ModelConfig) -> Result<Var> {
    check_name(name, cfg)?;
    let n = cfg.max_words;
    let slots = caption_slots(name, cfg);
    let start = g.param("text.start")?;
    let cls = g.param("text.cls")?;
    let mut parts = vec![start];
    if n > 1 {
        let table = g.param("text.word_emb")?;
        let ids: Vec<usize> = slots[..n - 1].iter().map(|&i| i as usize).collect();
        parts.push(g.tape.gather_rows(table, &ids)?);
    }
    parts.push(cls);
    let x = g.tape.concat_rows(&parts)?;
    let pos = g.param("text.pos")?;
    let mut x = g.tape.add(x, pos)?;
    let mask = causal_mask(n + 1);
    for i in 0..cfg.text_layers {
        x = transformer_block(g, &format!("text.blocks.{i}"), x, None, Some(&mask), &cfg.backbone)?;
    }
    layer_norm(g, x, "text.ln")
}

/// Multimodal decoder over the first `n` unimodal tokens with
/// cross-attention to `caption_tokens`. Returns `(tokens, logits)`.
pub fn multimodal_decode(g: &mut Graph, unimodal: Var, caption_tokens: Var, cfg: &ModelConfig) -> Result<(Var, Var)> {
    let n = cfg.max_words;
    let idx: Vec<usize> = (0..n).collect();
    let mut x = g.tape.gather_rows(unimodal, &idx)?;
    let mask = causal_mask(n);
    for i in 0..cfg.text_layers {
        x = transformer_block(g, &format!("mm.blocks.{i}.self"), x, None, Some(&mask), &cfg.backbone)?;
        x = transformer_block(g, &format!("mm.blocks.{i}.cross"), x, Some(caption_tokens), None, &cfg.backbone)?;
    }
    let tokens = layer_norm(g, x, "mm.ln")?;
    let logits = linear(g, tokens, "mm.head")?;
    Ok((tokens, logits))
}

/// `CE(x, y) + CE(y, x)` with logits `x_i · y_j / σ`, where `σ = exp(log_sigma)`.
pub fn contrastive_loss(g: &mut Graph, x: Var, y: Var, log_sigma: Var) -> Result<Var> {
    let (bx, dx) = g.value(x).dim();
    let (by, dy) = g.value(y).dim();
    if bx != by || dx != dy || bx == 0 {
        return Err(Error::shape(format!("contrastive pairs {bx}x{dx} vs {by}x{dy}")));
    }
    let neg = g.tape.scale(log_sigma, -1.0);
    let inv_sigma = g.tape.exp(neg);
    let targets: Vec<Option<usize>> = (0..bx).map(Some).collect();
    let xy = g.tape.matmul_nt(x, y)?;
    let xy = g.tape.scale_by(xy, inv_sigma)?;
    let ce_xy = g.tape.cross_entropy(xy, &targets)?;
    let yx = g.tape.matmul_nt(y, x)?;
    let yx = g.tape.scale_by(yx, inv_sigma)?;
    let ce_yx = g.tape.cross_entropy(yx, &targets)?;
    g.tape.add(ce_xy, ce_yx)
}

/// [`contrastive_loss`] on plain matrices (rows expected normalized).
/// Every reduction runs over sorted values, so permuting the batch leaves
/// the result bit-for-bit unchanged.
pub fn contrastive_loss_value(x: &Mat, y: &Mat, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {sigma}")));
    }
    let (b, d) = x.dim();
    if y.dim() != (b, d) || b == 0 {
        return Err(Error::shape(format!("contrastive pairs {:?} vs {:?}", x.dim(), y.dim())));
    }
    let logits = Mat::from_shape_fn((b, b), |(i, j)| x.row(i).dot(&y.row(j)) / sigma);
    let ce = |rows: &Mat| -> f64 {
        let mut losses: Vec<f64> = (0..b)
            .map(|i| {
                let mut v = rows.row(i).to_vec();
                v.sort_by(f64::total_cmp);
                let max = v[b - 1];
                let lse = max + sorted_sum(v.iter().map(|z| (z - max).exp())).ln();
                lse - rows[[i, i]]
            })
            .collect();
        losses.sort_by(f64::total_cmp);
        sorted_sum(losses.into_iter()) / b as f64
    };
    Ok(ce(&logits) + ce(&logits.t().to_owned()))
}

fn sorted_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Teacher-forced captioning targets for one name: every slot except `[PAD]`.
pub fn caption_targets(name: &NameSequence, cfg: &ModelConfig) -> Vec<Option<usize>> {
    let pad = Specials::default().pad;
    caption_slots(name, cfg)
        .into_iter()
        .map(|id| (id != pad).then_some(id as usize))
        .collect()
}

/// Token-level cross-entropy, mean over non-`[PAD]` targets.
pub fn caption_loss(g: &mut Graph, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    g.tape.cross_entropy(logits, targets)
}

pub struct ComboOutput {
    /// Normalized `[CLS]` text tokens, `B × d`.
    pub cls: Var,
    /// Normalized contrastive function tokens, `B × d`.
    pub co: Var,
    /// Multimodal text tokens per example, `n × d`.
    pub mmt_tokens: Vec<Var>,
    /// Caption logits per example, `n × vocab`.
    pub caption_logits: Vec<Var>,
    pub l_contrastive: Var,
    pub l_caption: Var,
    pub l_full: Var,
}

/// Full pre-training forward pass over a batch of `(bundle, name)` pairs.
pub fn combo_step(g: &mut Graph, batch: &[(&EmbeddingBundle, &NameSequence)], cfg: &ModelConfig) -> Result<ComboOutput> {
    if batch.is_empty() {
        return Err(Error::Malformed("empty batch".into()));
    }
    let n = cfg.max_words;
    let mut cls_rows = Vec::with_capacity(batch.len());
    let mut co_rows = Vec::with_capacity(batch.len());
    let mut mmt_tokens = Vec::with_capacity(batch.len());
    let mut caption_logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * n);
    let caption_idx: Vec<usize> = (1..cfg.k2).collect();
    for (bundle, name) in batch {
        let tokens = function_tokens(g, bundle, cfg)?;
        let text = unimodal_text_encode(g, name, cfg)?;
        cls_rows.push(g.tape.gather_rows(text, &[n])?);
        co_rows.push(g.tape.gather_rows(tokens, &[0])?);
        let cap = g.tape.gather_rows(tokens, &caption_idx)?;
        let (mmt, logits) = multimodal_decode(g, text, cap, cfg)?;
        mmt_tokens.push(mmt);
        caption_logits.push(logits);
        targets.extend(caption_targets(name, cfg));
    }
    let cls = g.tape.concat_rows(&cls_rows)?;
    let cls = g.tape.l2_normalize_rows(cls);
    let co = g.tape.concat_rows(&co_rows)?;
    let co = g.tape.l2_normalize_rows(co);
    let log_sigma = g.param("temp.log_sigma")?;
    let l_contrastive = contrastive_loss(g, cls, co, log_sigma)?;
    let all_logits = g.tape.concat_rows(&caption_logits)?;
    let l_caption = caption_loss(g, all_logits, &targets)?;
    let l_full = g.tape.add(l_contrastive, l_caption)?;
    Ok(ComboOutput {
        cls,
        co,
        mmt_tokens,
        caption_logits,
        l_contrastive,
        l_caption,
        l_full,
    })
}
