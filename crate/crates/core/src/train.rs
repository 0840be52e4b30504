//! Optimizer, schedules and the pre-training / fine-tuning loops.
//!
//! Batches are processed one forward graph per example, in parallel, and
//! the per-example gradients are summed in input order. Pre-training
//! couples the examples only through the contrastive loss, which is
//! evaluated on detached `[CLS]`/contrastive rows; its row gradients are
//! then pushed back through each example graph with a linear surrogate
//! `Σ row ⊙ ∂L/∂row`. The result is exactly the gradient of the batched loss.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Var};
use crate::backbone::Graph;
use crate::combo::{caption_loss, caption_targets, contrastive_loss, function_tokens, multimodal_decode, unimodal_text_encode};
use crate::embedding::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::lord::{calibrate_threshold, decode_traces, mlm_step, sample_mask_plan, threshold_grid, Calibration, MaskPlan};
use crate::params::{ModelParams, ParamStore, Phase};
use crate::tokenizer::{NameSequence, Specials};

/// Lower bound on the learned contrastive temperature.
pub const MIN_LOG_SIGMA: f64 = -4.605_170_185_988_091; // ln 0.01

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_frac: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Fine-tuning calibrates and checkpoints every this many epochs.
    pub calibrate_every: usize,
    pub grid_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_frac: 0.05,
            min_lr_frac: 0.05,
            grad_clip: 1.0,
            seed: 0,
            calibrate_every: 10,
            grid_points: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("invalid optimizer settings"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.min_lr_frac) {
            return Err(Error::config("warmup_frac and min_lr_frac must lie in [0, 1]"));
        }
        if self.calibrate_every == 0 || self.grid_points == 0 {
            return Err(Error::config("calibrate_every and grid_points must be positive"));
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to `min_lr_frac · lr`.
pub fn lr_at(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let warmup = (cfg.warmup_frac * total_steps as f64).round() as usize;
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let floor = cfg.min_lr_frac * cfg.lr;
    floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut IndexMap<String, Mat>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// Adam with decoupled weight decay, applied to weight matrices and
/// embedding tables only.
pub struct AdamW {
    m: IndexMap<String, Mat>,
    v: IndexMap<String, Mat>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

fn decays(name: &str) -> bool {
    name.ends_with(".w") || name.ends_with("word_emb")
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Mat>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("gradient for unknown parameter {name}")))?;
            if p.dim() != g.dim() {
                return Err(Error::shape(format!("gradient shape mismatch for {name}")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(g.raw_dim()));
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut *p)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                    *p -= lr * (update + wd * *p);
                });
        }
        Ok(())
    }
}

/// A training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub bundle: EmbeddingBundle,
    pub name: NameSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_contrastive: Option<f64>,
    pub l_caption: Option<f64>,
    pub grad_norm: f64,
    pub val_f1: Option<f64>,
    pub threshold: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,loss,l_contrastive,l_caption,grad_norm,val_f1,threshold";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss,
            opt(self.l_contrastive),
            opt(self.l_caption),
            self.grad_norm,
            opt(self.val_f1),
            opt(self.threshold)
        )
    }
}

fn sum_grads(parts: Vec<IndexMap<String, Mat>>) -> IndexMap<String, Mat> {
    let mut out: IndexMap<String, Mat> = IndexMap::new();
    for part in parts {
        for (name, g) in part {
            match out.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    out.insert(name, g);
                }
            }
        }
    }
    out.sort_keys();
    out
}

fn example_seed(seed: u64, step: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((step as u64) << 24)
        .wrapping_add(index as u64)
}

/// Batched loss values and summed parameter gradients.
pub struct BatchGrads {
    pub loss: f64,
    pub l_contrastive: f64,
    pub l_caption: f64,
    pub grads: IndexMap<String, Mat>,
}

struct ComboPart<'p> {
    g: Graph<'p>,
    cls: Var,
    co: Var,
    caption: Var,
    caption_count: usize,
}

/// Gradients of the pre-training loss (contrastive + caption) for `batch`.
pub fn pretrain_grads(store: &ParamStore, batch: &[&Example], cfg: &crate::params::ModelConfig, dropout: f64, seed: u64) -> Result<BatchGrads> {
    if batch.is_empty() {
        return Err(Error::Malformed("empty batch".into()));
    }
    let n = cfg.max_words;
    let caption_idx: Vec<usize> = (1..cfg.k2).collect();
    let mut parts: Vec<ComboPart> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut g = Graph::training(store, dropout, example_seed(seed, 0, i));
            let tokens = function_tokens(&mut g, &ex.bundle, cfg)?;
            let text = unimodal_text_encode(&mut g, &ex.name, cfg)?;
            let cls = g.tape.gather_rows(text, &[n])?;
            let cls = g.tape.l2_normalize_rows(cls);
            let co = g.tape.gather_rows(tokens, &[0])?;
            let co = g.tape.l2_normalize_rows(co);
            let cap = g.tape.gather_rows(tokens, &caption_idx)?;
            let (_, logits) = multimodal_decode(&mut g, text, cap, cfg)?;
            let targets = caption_targets(&ex.name, cfg);
            let caption_count = targets.iter().flatten().count();
            let caption = caption_loss(&mut g, logits, &targets)?;
            Ok(ComboPart {
                g,
                cls,
                co,
                caption,
                caption_count,
            })
        })
        .collect::<Result<_>>()?;

    // contrastive loss on detached rows
    let rows = |f: &dyn Fn(&ComboPart) -> Var| -> Result<Mat> {
        let views: Vec<_> = parts.iter().map(|p| p.g.value(f(p)).view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
    };
    let x = rows(&|p| p.cls)?;
    let y = rows(&|p| p.co)?;
    let mut cg = Graph::new(store);
    let xv = cg.tape.leaf(Arc::new(x));
    let yv = cg.tape.leaf(Arc::new(y));
    let ls = cg.param("temp.log_sigma")?;
    let lc = contrastive_loss(&mut cg, xv, yv, ls)?;
    let l_contrastive = cg.tape.scalar(lc);
    let mut cgrads = cg.tape.backward(lc);
    let gx = cgrads.take(xv).expect("leaf gradient");
    let gy = cgrads.take(yv).expect("leaf gradient");
    let g_sigma = cgrads.take(ls).expect("leaf gradient");

    let total_targets: usize = parts.iter().map(|p| p.caption_count).sum();
    let l_caption = if total_targets == 0 {
        0.0
    } else {
        parts
            .iter()
            .map(|p| p.g.tape.scalar(p.caption) * p.caption_count as f64)
            .sum::<f64>()
            / total_targets as f64
    };
    let per: Vec<IndexMap<String, Mat>> = parts
        .par_iter_mut()
        .enumerate()
        .map(|(i, p)| {
            let g = &mut p.g;
            let sx = g.constant(gx.row(i).insert_axis(ndarray::Axis(0)).to_owned());
            let sy = g.constant(gy.row(i).insert_axis(ndarray::Axis(0)).to_owned());
            let a = g.tape.mul(p.cls, sx)?;
            let a = g.tape.sum(a);
            let b = g.tape.mul(p.co, sy)?;
            let b = g.tape.sum(b);
            let w = if total_targets == 0 {
                0.0
            } else {
                p.caption_count as f64 / total_targets as f64
            };
            let c = g.tape.scale(p.caption, w);
            let s = g.tape.add(a, b)?;
            let s = g.tape.add(s, c)?;
            Ok(g.backward(s))
        })
        .collect::<Result<_>>()?;
    let mut grads = sum_grads(per);
    grads.insert("temp.log_sigma".into(), g_sigma);
    grads.sort_keys();
    Ok(BatchGrads {
        loss: l_contrastive + l_caption,
        l_contrastive,
        l_caption,
        grads,
    })
}

/// Gradients of the masked-LM loss (mean over every target slot in the
/// batch). Examples without targets contribute nothing.
pub fn finetune_grads(
    store: &ParamStore,
    batch: &[(&Example, &MaskPlan)],
    cfg: &crate::params::ModelConfig,
    dropout: f64,
    seed: u64,
) -> Result<BatchGrads> {
    let counts: Vec<usize> = batch
        .iter()
        .map(|(ex, plan)| plan.targets(&ex.name, cfg.max_words).iter().flatten().count())
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Ok(BatchGrads {
            loss: 0.0,
            l_contrastive: 0.0,
            l_caption: 0.0,
            grads: IndexMap::new(),
        });
    }
    let per: Vec<(f64, IndexMap<String, Mat>)> = batch
        .par_iter()
        .enumerate()
        .filter(|(i, _)| counts[*i] > 0)
        .map(|(i, (ex, plan))| {
            let mut g = Graph::training(store, dropout, example_seed(seed, 0, i));
            let l = mlm_step(&mut g, &[(&ex.bundle, &ex.name, plan)], cfg)?;
            let l = g.tape.scale(l, counts[i] as f64 / total as f64);
            Ok((g.tape.scalar(l), g.backward(l)))
        })
        .collect::<Result<_>>()?;
    let loss = per.iter().map(|p| p.0).sum();
    Ok(BatchGrads {
        loss,
        l_contrastive: 0.0,
        l_caption: 0.0,
        grads: sum_grads(per.into_iter().map(|p| p.1).collect()),
    })
}

fn batches(len: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn check_data(model: &ModelParams, phase: Phase, data: &[Example]) -> Result<()> {
    if model.meta.phase != phase {
        return Err(Error::Checkpoint(format!("expected a {phase:?} model")));
    }
    if data.is_empty() {
        return Err(Error::EmptyCorpus("no training examples"));
    }
    Ok(())
}

/// Contrastive-captioning pre-training. Calls `on_epoch` after each epoch.
pub fn pretrain(
    model: &mut ModelParams,
    data: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    check_data(model, Phase::Pretrain, data)?;
    let mcfg = model.config.clone();
    let dropout = mcfg.backbone.dropout;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut sum, mut sum_c, mut sum_cap, mut gnorm) = (0.0, 0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for idx in batches(data.len(), cfg.batch_size, &mut rng) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            let mut out = pretrain_grads(&model.store, &batch, &mcfg, dropout, example_seed(cfg.seed, step, 0))?;
            gnorm = clip_global_norm(&mut out.grads, cfg.grad_clip);
            lr = lr_at(cfg, step, total);
            opt.step(&mut model.store, &out.grads, lr)?;
            if let Some(ls) = model.store.get_mut("temp.log_sigma") {
                ls.mapv_inplace(|v| v.max(MIN_LOG_SIGMA));
            }
            sum += out.loss;
            sum_c += out.l_contrastive;
            sum_cap += out.l_caption;
            step += 1;
        }
        let k = steps_per_epoch as f64;
        let log = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: sum / k,
            l_contrastive: Some(sum_c / k),
            l_caption: Some(sum_cap / k),
            grad_norm: gnorm,
            val_f1: None,
            threshold: None,
        };
        on_epoch(&log);
        logs.push(log);
        model.meta.epoch = epoch + 1;
    }
    if !model.store.all_finite() {
        return Err(Error::Checkpoint("training diverged (non-finite weights)".into()));
    }
    Ok(logs)
}

/// Word ids of each example's name.
pub fn truth_ids(data: &[Example]) -> Vec<Vec<u32>> {
    data.iter()
        .map(|e| e.name.word_ids(Specials::default()).to_vec())
        .collect()
}

/// Decodes `val` once and scores every threshold of `grid`.
pub fn calibrate(model: &ModelParams, val: &[Example], grid: &[f64]) -> Result<Calibration> {
    if val.is_empty() {
        return Err(Error::EmptyCorpus("validation set is empty"));
    }
    let bundles: Vec<&EmbeddingBundle> = val.iter().map(|e| &e.bundle).collect();
    let traces = decode_traces(model, &bundles)?;
    calibrate_threshold(&traces, &truth_ids(val), model.config.max_words, grid)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub logs: Vec<EpochLog>,
    /// Epoch of the selected model.
    pub best_epoch: usize,
    pub threshold: Option<f64>,
    pub val_f1: Option<f64>,
}

/// Masked-LM fine-tuning with periodic threshold calibration on `val`.
/// The model left in `model` is the one with the best validation F1 (the
/// final one when `val` is empty), with its threshold recorded in the
/// checkpoint metadata.
pub fn finetune(
    model: &mut ModelParams,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FinetuneSummary> {
    cfg.validate()?;
    check_data(model, Phase::Finetune, train)?;
    let mcfg = model.config.clone();
    let dropout = mcfg.backbone.dropout;
    let grid = threshold_grid(cfg.grid_points);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, f64, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        let (mut sum, mut gnorm, mut lr) = (0.0, 0.0, 0.0);
        for idx in batches(train.len(), cfg.batch_size, &mut rng) {
            let plans: Vec<MaskPlan> = idx.iter().map(|&i| sample_mask_plan(&train[i].name, &mut rng)).collect();
            let batch: Vec<(&Example, &MaskPlan)> = idx.iter().map(|&i| &train[i]).zip(&plans).collect();
            let mut out = finetune_grads(&model.store, &batch, &mcfg, dropout, example_seed(cfg.seed, step, 0))?;
            gnorm = clip_global_norm(&mut out.grads, cfg.grad_clip);
            lr = lr_at(cfg, step, total);
            opt.step(&mut model.store, &out.grads, lr)?;
            sum += out.loss;
            step += 1;
        }
        model.meta.epoch = epoch + 1;
        let mut log = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: sum / steps_per_epoch as f64,
            l_contrastive: None,
            l_caption: None,
            grad_norm: gnorm,
            val_f1: None,
            threshold: None,
        };
        let due = (epoch + 1) % cfg.calibrate_every == 0 || epoch + 1 == cfg.epochs;
        if due && !val.is_empty() {
            let cal = calibrate(model, val, &grid)?;
            log.val_f1 = Some(cal.f1);
            log.threshold = Some(cal.threshold);
            if best.as_ref().is_none_or(|b| cal.f1 >= b.0) {
                best = Some((cal.f1, epoch + 1, cal.threshold, model.store.clone()));
            }
        }
        on_epoch(&log);
        logs.push(log);
    }
    let (threshold, val_f1, best_epoch) = match best {
        Some((f1, epoch, t, store)) => {
            model.store = store;
            (Some(t), Some(f1), epoch)
        }
        None => (None, None, cfg.epochs),
    };
    model.meta.epoch = best_epoch;
    model.meta.threshold = threshold;
    model.meta.validation_f1 = val_f1;
    if !model.store.all_finite() {
        return Err(Error::Checkpoint("training diverged (non-finite weights)".into()));
    }
    Ok(FinetuneSummary {
        logs,
        best_epoch,
        threshold,
        val_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combo::combo_step;
    use crate::embedding::{synth_bundle, ProviderSpec};
    use crate::lord::{init_from_pretrained, mlm_step};
    use crate::params::Layout;
    use crate::testutil::tiny_model;

    fn examples(cfg: &crate::params::ModelConfig, names: &[&[u32]]) -> Vec<Example> {
        let spec = ProviderSpec {
            d_a: cfg.embed.d_a,
            d_b: cfg.embed.d_b,
            d_p: cfg.embed.d_p,
            seed: 9,
            ..ProviderSpec::default()
        };
        names
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let name = NameSequence::from_words(w, Specials::default().eos);
                Example {
                    bundle: synth_bundle(&format!("f{i}"), &name, &spec),
                    name,
                }
            })
            .collect()
    }

    fn max_diff(a: &IndexMap<String, Mat>, b: &IndexMap<String, Mat>) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter()
            .map(|(k, v)| (v - &b[k]).iter().fold(0.0f64, |m, x| m.max(x.abs())))
            .fold(0.0, f64::max)
    }

    #[test]
    fn decomposed_pretrain_gradient_is_exact() {
        let cfg = tiny_model();
        let store = Layout::for_model(&cfg, Phase::Pretrain).materialize(3);
        let data = examples(&cfg, &[&[4, 5], &[6, 7, 8], &[9], &[4, 4, 4, 4, 4, 4]]);
        let batch: Vec<&Example> = data.iter().collect();
        let fast = pretrain_grads(&store, &batch, &cfg, 0.0, 0).unwrap();

        let mut g = Graph::new(&store);
        let pairs: Vec<_> = data.iter().map(|e| (&e.bundle, &e.name)).collect();
        let out = combo_step(&mut g, &pairs, &cfg).unwrap();
        let reference = g.backward(out.l_full);
        assert!((fast.loss - g.tape.scalar(out.l_full)).abs() < 1e-12);
        assert!(max_diff(&fast.grads, &reference) < 1e-10);
    }

    #[test]
    fn decomposed_finetune_gradient_is_exact() {
        let cfg = tiny_model();
        let pre = ModelParams::init(cfg.clone(), Phase::Pretrain, "v", 1).unwrap();
        let model = init_from_pretrained(&pre, 2).unwrap();
        let data = examples(&cfg, &[&[4, 5], &[6, 7, 8], &[9]]);
        let plans = [
            MaskPlan { n_eff: 2, masked_positions: vec![1] },
            MaskPlan { n_eff: 3, masked_positions: vec![0, 2] },
            MaskPlan { n_eff: 1, masked_positions: vec![] },
        ];
        let batch: Vec<(&Example, &MaskPlan)> = data.iter().zip(&plans).collect();
        let fast = finetune_grads(&model.store, &batch, &cfg, 0.0, 0).unwrap();
        let mut g = Graph::new(&model.store);
        let triples: Vec<_> = data.iter().zip(&plans).map(|(e, p)| (&e.bundle, &e.name, p)).collect();
        let l = mlm_step(&mut g, &triples, &cfg).unwrap();
        let reference = g.backward(l);
        assert!((fast.loss - g.tape.scalar(l)).abs() < 1e-12);
        assert!(max_diff(&fast.grads, &reference) < 1e-10);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_frac: 0.1,
            min_lr_frac: 0.0,
            ..TrainConfig::default()
        };
        assert!((lr_at(&cfg, 0, 100) - 0.1).abs() < 1e-12);
        assert!((lr_at(&cfg, 9, 100) - 1.0).abs() < 1e-12);
        assert!((lr_at(&cfg, 10, 100) - 1.0).abs() < 1e-12);
        assert!(lr_at(&cfg, 55, 100) < 0.51 && lr_at(&cfg, 55, 100) > 0.49);
        assert!(lr_at(&cfg, 100, 100).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g: IndexMap<String, Mat> = IndexMap::new();
        g.insert("a".into(), Mat::from_elem((1, 2), 3.0));
        g.insert("b".into(), Mat::from_elem((1, 1), 4.0 * 2f64.sqrt()));
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 50f64.sqrt()).abs() < 1e-12);
        let after = g.values().flat_map(|m| m.iter()).map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_runs_reduce_loss_and_are_deterministic() {
        let cfg = tiny_model();
        let data = examples(&cfg, &[&[4, 5], &[6, 7], &[8, 9], &[10, 11]]);
        let tcfg = TrainConfig {
            epochs: 15,
            batch_size: 4,
            lr: 1e-2,
            seed: 5,
            calibrate_every: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = ModelParams::init(cfg.clone(), Phase::Pretrain, "v", 1).unwrap();
            let logs = pretrain(&mut m, &data, &tcfg, |_| {}).unwrap();
            (m, logs)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(l1, l2);
        assert!(l1.last().unwrap().loss < l1[0].loss);

        let mut ft = init_from_pretrained(&m1, 3).unwrap();
        let summary = finetune(&mut ft, &data, &data[..2], &tcfg, |_| {}).unwrap();
        assert!(summary.logs.last().unwrap().loss < summary.logs[0].loss);
        assert!(summary.threshold.is_some());
        assert_eq!(ft.meta.threshold, summary.threshold);
        let _ = m2;
    }
}
