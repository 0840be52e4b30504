//! Masked-LM name decoder and flexible thresholded decoding.
//!
//! Training masks `M` of the `n_eff` name words, with `M` drawn from
//! `Softmax(C)`, `C_i = 1 + i / n_eff`, and the masked subset drawn
//! uniformly. `[EOS]` and `[PAD]` slots are always hidden from the context
//! but remain prediction targets, so the decoder learns the name length.
//!
//! Decoding starts from an all-masked name and, at each step, commits the
//! single `(position, word)` pair with the highest probability among the
//! still-masked positions, stopping once that probability falls below the
//! threshold `T` or every position is filled. Because the committed sequence
//! does not depend on `T` until the stop, the trace under a larger `T` is a
//! prefix of the trace under a smaller one; [`Prediction::from_trace`]
//! exploits this to evaluate many thresholds from one full decode.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{masked_softmax, Mat, Var};
use crate::backbone::{layer_norm, linear, transformer_block, Graph};
use crate::combo::function_tokens;
use crate::embedding::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::metrics::{micro_prf, word_set_counts, CountTriple};
use crate::params::{Init, Layout, ModelConfig, ModelParams, ParamStore, Phase};
use crate::tokenizer::{NameSequence, Specials};

/// Default decoding thresholds for each evaluation setting.
pub const CROSS_PROJECT_THRESHOLD: f64 = 0.194;
pub const CROSS_BINARY_THRESHOLD: f64 = 0.398;

pub(crate) fn layout(l: &mut Layout, cfg: &ModelConfig) {
    let d = cfg.d();
    l.push("lord.word_emb", (cfg.vocab_size, d), Init::Normal(0.1));
    l.push("lord.pos", (cfg.max_words, d), Init::Normal(0.1));
    for i in 0..cfg.lord_layers {
        l.block(&format!("lord.blocks.{i}.self"), &cfg.backbone);
        l.block(&format!("lord.blocks.{i}.cross"), &cfg.backbone);
    }
    l.layer_norm("lord.ln", d);
    l.linear("lord.head", d, cfg.vocab_size, 1.0);
}

/// Fine-tuning parameters: the pre-trained ensemble and function encoders,
/// and a fresh decoder whose word embeddings start from the pre-trained
/// text encoder's table.
pub fn init_from_pretrained(pre: &ModelParams, seed: u64) -> Result<ModelParams> {
    if pre.meta.phase != Phase::Pretrain {
        return Err(Error::Checkpoint("expected a pre-training checkpoint".into()));
    }
    let mut out = ModelParams::init(pre.config.clone(), Phase::Finetune, &pre.meta.vocab_hash, seed)?;
    let names: Vec<String> = out.store.names().map(str::to_string).collect();
    for name in names {
        if name.starts_with("ens.") || name.starts_with("fenc.") {
            let v = pre
                .store
                .get_arc(&name)
                .ok_or_else(|| Error::Checkpoint(format!("pre-trained model lacks {name}")))?;
            out.store.insert_arc(name, v);
        }
    }
    let emb = pre
        .store
        .get_arc("text.word_emb")
        .ok_or_else(|| Error::Checkpoint("pre-trained model lacks text.word_emb".into()))?;
    out.store.insert_arc("lord.word_emb", emb);
    out.meta.run_hash = pre.meta.run_hash.clone();
    Ok(out)
}

/// Probability of masking `i` of `n_eff` words, `i = 0..=n_eff`.
pub fn mask_count_distribution(n_eff: usize) -> Vec<f64> {
    if n_eff == 0 {
        return vec![1.0];
    }
    let c: Vec<f64> = (0..=n_eff).map(|i| 1.0 + i as f64 / n_eff as f64).collect();
    let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = c.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n_eff: usize,
    /// Ascending word positions hidden from the context.
    pub masked_positions: Vec<usize>,
}

impl MaskPlan {
    pub fn m(&self) -> usize {
        self.masked_positions.len()
    }

    /// Decoder input for `name` over `n` slots.
    pub fn context(&self, name: &NameSequence, n: usize) -> Vec<Slot> {
        let ids = name.padded(n, Specials::default().pad);
        (0..n)
            .map(|p| {
                if p < self.n_eff && self.masked_positions.binary_search(&p).is_err() {
                    Slot::Word(ids[p])
                } else {
                    Slot::Masked
                }
            })
            .collect()
    }

    /// Prediction targets: masked words plus every `[EOS]`/`[PAD]` slot.
    pub fn targets(&self, name: &NameSequence, n: usize) -> Vec<Option<usize>> {
        let ids = name.padded(n, Specials::default().pad);
        (0..n)
            .map(|p| {
                let hidden = p >= self.n_eff || self.masked_positions.binary_search(&p).is_ok();
                hidden.then_some(ids[p] as usize)
            })
            .collect()
    }
}

/// Draws `M ~ mask_count_distribution(n_eff)` and a uniform size-`M` subset.
pub fn sample_mask_plan(name: &NameSequence, rng: &mut impl Rng) -> MaskPlan {
    let n_eff = name.num_words(Specials::default());
    let dist = mask_count_distribution(n_eff);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut m = n_eff;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            m = i;
            break;
        }
    }
    let mut masked_positions = index::sample(rng, n_eff, m).into_vec();
    masked_positions.sort_unstable();
    MaskPlan {
        n_eff,
        masked_positions,
    }
}

/// One decoder input slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Word(u32),
    Masked,
}

/// Decoder logits (`n × vocab`) for `slots` given the function tokens.
pub fn lord_logits(g: &mut Graph, tokens: Var, slots: &[Slot], cfg: &ModelConfig) -> Result<Var> {
    if slots.len() != cfg.max_words {
        return Err(Error::shape(format!(
            "decoder expects {} slots, got {}",
            cfg.max_words,
            slots.len()
        )));
    }
    let mask_id = Specials::default().mask;
    let ids: Vec<usize> = slots
        .iter()
        .map(|s| match s {
            Slot::Word(w) => *w as usize,
            Slot::Masked => mask_id as usize,
        })
        .collect();
    let table = g.param("lord.word_emb")?;
    let x = g.tape.gather_rows(table, &ids)?;
    let pos = g.param("lord.pos")?;
    let mut x = g.tape.add(x, pos)?;
    for i in 0..cfg.lord_layers {
        x = transformer_block(g, &format!("lord.blocks.{i}.self"), x, None, None, &cfg.backbone)?;
        x = transformer_block(g, &format!("lord.blocks.{i}.cross"), x, Some(tokens), None, &cfg.backbone)?;
    }
    let x = layer_norm(g, x, "lord.ln")?;
    linear(g, x, "lord.head")
}

/// Masked-LM loss given precomputed function tokens per example; mean over
/// every target slot in the batch. Zero (and gradient-free) when the batch
/// has no targets.
pub fn mlm_loss(g: &mut Graph, batch: &[(Var, &NameSequence, &MaskPlan)], cfg: &ModelConfig) -> Result<Var> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for (tokens, name, plan) in batch {
        let t = plan.targets(name, cfg.max_words);
        if t.iter().all(Option::is_none) {
            continue;
        }
        let slots = plan.context(name, cfg.max_words);
        logits.push(lord_logits(g, *tokens, &slots, cfg)?);
        targets.extend(t);
    }
    if logits.is_empty() {
        return Ok(g.constant(Mat::zeros((1, 1))));
    }
    let all = g.tape.concat_rows(&logits)?;
    g.tape.cross_entropy(all, &targets)
}

/// Fine-tuning forward pass over `(bundle, name, plan)` triples.
pub fn mlm_step(g: &mut Graph, batch: &[(&EmbeddingBundle, &NameSequence, &MaskPlan)], cfg: &ModelConfig) -> Result<Var> {
    let mut items = Vec::with_capacity(batch.len());
    for (bundle, name, plan) in batch {
        let tokens = function_tokens(g, bundle, cfg)?;
        items.push((tokens, *name, *plan));
    }
    mlm_loss(g, &items, cfg)
}

/// Per-slot word probabilities for a partially decoded name.
pub trait StepScorer {
    /// Number of name slots.
    fn slots(&self) -> usize;
    /// `slots × vocab` probabilities given the current context.
    fn probabilities(&mut self, context: &[Slot]) -> Result<Mat>;
}

/// [`StepScorer`] backed by a fine-tuned model; the function tokens are
/// computed once and reused for every step.
pub struct ModelScorer<'p> {
    graph: Graph<'p>,
    tokens: Var,
    mark: usize,
    cfg: &'p ModelConfig,
}

impl<'p> ModelScorer<'p> {
    pub fn new(params: &'p ParamStore, bundle: &EmbeddingBundle, cfg: &'p ModelConfig) -> Result<Self> {
        let mut graph = Graph::new(params);
        let tokens = function_tokens(&mut graph, bundle, cfg)?;
        // bind decoder parameters before the mark so resets keep them
        for name in params.names().filter(|n| n.starts_with("lord.")) {
            graph.param(name)?;
        }
        let mark = graph.mark();
        Ok(ModelScorer {
            graph,
            tokens,
            mark,
            cfg,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn slots(&self) -> usize {
        self.cfg.max_words
    }

    fn probabilities(&mut self, context: &[Slot]) -> Result<Mat> {
        self.graph.reset(self.mark);
        let logits = lord_logits(&mut self.graph, self.tokens, context, self.cfg)?;
        Ok(masked_softmax(self.graph.value(logits).view(), None))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeStep {
    pub step: usize,
    pub position: usize,
    pub word: u32,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BelowThreshold,
    AllFilled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Emitted word ids in position order.
    pub words: Vec<u32>,
    /// Committed steps, in commit order.
    pub trace: Vec<DecodeStep>,
    pub stop_reason: StopReason,
    pub threshold: f64,
}

impl Prediction {
    /// The prediction under threshold `t` from a full (`T = 0`) trace.
    pub fn from_trace(full: &[DecodeStep], slots: usize, t: f64) -> Prediction {
        let cut = full.iter().position(|s| s.confidence < t);
        let trace = full[..cut.unwrap_or(full.len())].to_vec();
        let stop_reason = if cut.is_some() || trace.len() < slots {
            StopReason::BelowThreshold
        } else {
            StopReason::AllFilled
        };
        Prediction {
            words: emitted_words(&trace, slots),
            trace,
            stop_reason,
            threshold: t,
        }
    }
}

/// Committed words in position order, cut at the first committed `[EOS]`.
pub fn emitted_words(trace: &[DecodeStep], slots: usize) -> Vec<u32> {
    let eos = Specials::default().eos;
    let mut filled: Vec<Option<u32>> = vec![None; slots];
    for s in trace {
        filled[s.position] = Some(s.word);
    }
    filled
        .into_iter()
        .flatten()
        .take_while(|&w| w != eos)
        .collect()
}

fn is_candidate(id: usize) -> bool {
    let s = Specials::default();
    let id = id as u32;
    id != s.pad && id != s.cls && id != s.mask
}

/// Highest-confidence-first decoding with threshold `t`. Ties go to the
/// lowest position, then the lowest word id.
pub fn flexible_decode(scorer: &mut impl StepScorer, t: f64) -> Result<Prediction> {
    if !(t >= 0.0) {
        return Err(Error::config(format!("threshold must be non-negative, got {t}")));
    }
    let n = scorer.slots();
    let eos = Specials::default().eos;
    let mut filled: Vec<Option<u32>> = vec![None; n];
    let mut trace = Vec::with_capacity(n);
    let mut stop_reason = StopReason::AllFilled;
    for step in 0..n {
        let context: Vec<Slot> = filled
            .iter()
            .map(|f| match f {
                Some(w) if *w != eos => Slot::Word(*w),
                _ => Slot::Masked,
            })
            .collect();
        let probs = scorer.probabilities(&context)?;
        if probs.nrows() != n {
            return Err(Error::shape(format!("scorer returned {} rows for {n} slots", probs.nrows())));
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for (pos, slot) in filled.iter().enumerate() {
            if slot.is_some() {
                continue;
            }
            for (word, &p) in probs.row(pos).iter().enumerate() {
                if is_candidate(word) && best.is_none_or(|(_, _, bp)| p > bp) {
                    best = Some((pos, word, p));
                }
            }
        }
        let Some((position, word, confidence)) = best else {
            return Err(Error::shape("scorer has no candidate words"));
        };
        if confidence < t {
            stop_reason = StopReason::BelowThreshold;
            break;
        }
        filled[position] = Some(word as u32);
        trace.push(DecodeStep {
            step,
            position,
            word: word as u32,
            confidence,
        });
    }
    Ok(Prediction {
        words: emitted_words(&trace, n),
        trace,
        stop_reason,
        threshold: t,
    })
}

/// Full decode trace (`T = 0`) for every bundle, in parallel.
pub fn decode_traces(params: &ModelParams, bundles: &[&EmbeddingBundle]) -> Result<Vec<Vec<DecodeStep>>> {
    if params.meta.phase != Phase::Finetune {
        return Err(Error::Checkpoint("decoding needs a fine-tuned model".into()));
    }
    bundles
        .par_iter()
        .map(|b| {
            let mut scorer = ModelScorer::new(&params.store, b, &params.config)?;
            Ok(flexible_decode(&mut scorer, 0.0)?.trace)
        })
        .collect()
}

/// Evenly spaced thresholds over `[0, 1]`.
pub fn threshold_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..points).map(|i| i as f64 / (points - 1) as f64).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub f1: f64,
    pub curve: Vec<CalibrationPoint>,
}

/// Picks the grid threshold with the best micro F1 (ties favor the larger
/// threshold) from full decode traces and ground-truth word ids.
pub fn calibrate_threshold(
    traces: &[Vec<DecodeStep>],
    truths: &[Vec<u32>],
    slots: usize,
    grid: &[f64],
) -> Result<Calibration> {
    if traces.is_empty() {
        return Err(Error::EmptyCorpus("validation set is empty"));
    }
    if traces.len() != truths.len() {
        return Err(Error::shape("one truth per trace required"));
    }
    if grid.is_empty() {
        return Err(Error::config("threshold grid is empty"));
    }
    let mut curve = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &t in grid {
        let triples: Vec<CountTriple> = traces
            .iter()
            .zip(truths)
            .map(|(tr, truth)| word_set_counts(&Prediction::from_trace(tr, slots, t).words, truth))
            .collect();
        let (p, r, f1) = micro_prf(&triples);
        curve.push(CalibrationPoint {
            threshold: t,
            precision: p,
            recall: r,
            f1,
        });
        if best.is_none_or(|(bt, bf)| f1 > bf || (f1 == bf && t > bt)) {
            best = Some((t, f1));
        }
    }
    let (threshold, f1) = best.expect("grid is non-empty");
    Ok(Calibration { threshold, f1, curve })
}
