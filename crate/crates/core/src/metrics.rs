//! Scoring of predicted names against ground truth.
//!
//! Names are compared as word lists. Precision, recall and F1 treat each
//! name as a set of words and are micro-averaged over the corpus; ROUGE-L
//! and smoothed BLEU-4 are order-aware sentence scores averaged over
//! functions.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::normalize;

/// Names recoverable by static analysis, credited or discarded at scoring.
pub const FREE_FUNCTIONS: [&str; 20] = [
    "init",
    "fini",
    "csu_init",
    "csu_fini",
    "start",
    "libc_csu_init",
    "libc_csu_fini",
    "libc_start",
    "deregister_tm_clones",
    "register_tm_clones",
    "rtld_init",
    "main",
    "do_global_dtors_aux",
    "frame_dummy",
    "frame_dummy_init_array_entry",
    "do_global_dtors_aux_fini_array_entry",
    "init_array_end",
    "init_array_start",
    "start_main",
    "libc_start_main",
];

pub const DEFAULT_ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTriple {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::AddAssign for CountTriple {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Set-semantics counts for one function.
pub fn word_set_counts<W: Eq + Hash>(pred: &[W], truth: &[W]) -> CountTriple {
    let p: HashSet<&W> = pred.iter().collect();
    let t: HashSet<&W> = truth.iter().collect();
    let tp = p.intersection(&t).count();
    CountTriple {
        tp,
        fp: p.len() - tp,
        fn_: t.len() - tp,
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Micro-averaged `(P, R, F1)`.
pub fn micro_prf(triples: &[CountTriple]) -> (f64, f64, f64) {
    let mut total = CountTriple::default();
    for t in triples {
        total += *t;
    }
    let p = ratio(total.tp, total.tp + total.fp);
    let r = ratio(total.tp, total.tp + total.fn_);
    (p, r, f1_score(p, r))
}

fn lcs_len<W: PartialEq>(a: &[W], b: &[W]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with recall weight `beta`.
pub fn rouge_l<W: PartialEq>(pred: &[W], truth: &[W], beta: f64) -> f64 {
    match (pred.is_empty(), truth.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(pred, truth);
    if lcs == 0 {
        return 0.0;
    }
    // (1 + β²)·P·R / (R + β²·P) with P = lcs/|pred|, R = lcs/|truth|
    let b2 = beta * beta;
    (1.0 + b2) * lcs as f64 / (pred.len() as f64 + b2 * truth.len() as f64)
}

fn ngram_counts<W: Eq + Hash>(words: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4 with add-one smoothing for n ≥ 2 and the brevity penalty.
pub fn bleu4_smoothed<W: Eq + Hash>(pred: &[W], truth: &[W]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let hyp = ngram_counts(pred, n);
        let refs = ngram_counts(truth, n);
        let total: usize = hyp.values().sum();
        let matched: usize = hyp
            .iter()
            .map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        let s = usize::from(n >= 2);
        if matched + s == 0 {
            return 0.0;
        }
        log_sum += ((matched + s) as f64 / (total + s) as f64).ln();
    }
    let bp = (1.0 - truth.len() as f64 / pred.len() as f64).min(0.0).exp();
    bp * (log_sum / 4.0).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreeFunctionMode {
    /// Replace each free function's prediction by its truth.
    Credit,
    /// Remove free functions from the corpus.
    Discard,
    /// Score free functions like any other.
    Keep,
}

impl FromStr for FreeFunctionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "credit" => Ok(Self::Credit),
            "discard" => Ok(Self::Discard),
            "keep" => Ok(Self::Keep),
            other => Err(Error::Config(format!("unknown free-function mode {other:?}"))),
        }
    }
}

/// Canonical form used to match raw names against a free list.
pub fn canonical_name(raw: &str) -> String {
    normalize(raw).join("_")
}

#[derive(Clone, Debug)]
pub struct FreeList {
    names: HashSet<String>,
}

impl Default for FreeList {
    fn default() -> Self {
        FreeList::new(FREE_FUNCTIONS)
    }
}

impl FreeList {
    pub fn new<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Self {
        FreeList {
            names: names.into_iter().map(|n| canonical_name(n.as_ref())).collect(),
        }
    }

    pub fn contains(&self, raw_name: &str) -> bool {
        self.names.contains(&canonical_name(raw_name))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One function to score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredName {
    pub raw_name: String,
    pub pred: Vec<String>,
    pub truth: Vec<String>,
}

/// Applies `mode`; returns the adjusted corpus and the number of free
/// functions affected.
pub fn apply_free_functions(items: &[ScoredName], free: &FreeList, mode: FreeFunctionMode) -> (Vec<ScoredName>, usize) {
    let mut hits = 0;
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        if mode == FreeFunctionMode::Keep || !free.contains(&item.raw_name) {
            out.push(item.clone());
            continue;
        }
        hits += 1;
        if mode == FreeFunctionMode::Credit {
            out.push(ScoredName {
                pred: item.truth.clone(),
                ..item.clone()
            });
        }
    }
    (out, hits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordRow {
    pub word: String,
    /// Times the word was predicted.
    pub occurrences: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-word counts aggregated over functions, sorted by occurrences
/// (descending) then word.
pub fn per_word_table(items: &[ScoredName]) -> Vec<WordRow> {
    let mut counts: HashMap<&str, CountTriple> = HashMap::new();
    for item in items {
        let p: HashSet<&str> = item.pred.iter().map(String::as_str).collect();
        let t: HashSet<&str> = item.truth.iter().map(String::as_str).collect();
        for w in &p {
            let c = counts.entry(w).or_default();
            if t.contains(w) {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        for w in t.difference(&p) {
            counts.entry(w).or_default().fn_ += 1;
        }
    }
    let mut rows: Vec<WordRow> = counts
        .into_iter()
        .map(|(w, c)| {
            let precision = ratio(c.tp, c.tp + c.fp);
            let recall = ratio(c.tp, c.tp + c.fn_);
            WordRow {
                word: w.to_string(),
                occurrences: c.tp + c.fp,
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                precision,
                recall,
                f1: f1_score(precision, recall),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.occurrences.cmp(&a.occurrences).then_with(|| a.word.cmp(&b.word)));
    rows
}

/// Pluggable name-similarity score in `[0, 1]`.
pub trait NameSimilarity: Sync {
    fn name(&self) -> &str;
    fn score(&self, pred: &str, truth: &str) -> Result<f64>;
}

/// Cosine similarity of word-count vectors over normalized names.
#[derive(Clone, Copy, Debug, Default)]
pub struct BagOfWordsCosine;

impl NameSimilarity for BagOfWordsCosine {
    fn name(&self) -> &str {
        "bag-of-words-cosine"
    }

    fn score(&self, pred: &str, truth: &str) -> Result<f64> {
        let count = |s: &str| {
            let mut m: HashMap<String, f64> = HashMap::new();
            for w in normalize(s) {
                *m.entry(w).or_default() += 1.0;
            }
            m
        };
        let (a, b) = (count(pred), count(truth));
        if a.is_empty() || b.is_empty() {
            return Ok(if a.is_empty() && b.is_empty() { 1.0 } else { 0.0 });
        }
        let dot: f64 = a.iter().map(|(w, x)| x * b.get(w).copied().unwrap_or(0.0)).sum();
        let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
        Ok((dot / (na * nb)).min(1.0))
    }
}

/// Runs `plugin`, rejecting failures and out-of-range scores.
pub fn similarity_hook(pred: &str, truth: &str, plugin: &dyn NameSimilarity) -> Result<f64> {
    let s = plugin.score(pred, truth).map_err(|e| Error::Plugin {
        plugin: plugin.name().to_string(),
        msg: e.to_string(),
    })?;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Plugin {
            plugin: plugin.name().to_string(),
            msg: format!("score {s} outside [0, 1]"),
        });
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub functions: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub rouge_l: f64,
    pub bleu: f64,
    pub similarity: Option<f64>,
    pub similarity_plugin: Option<String>,
    pub free_mode: FreeFunctionMode,
    /// Free functions credited or discarded.
    pub free_functions: usize,
    pub per_word: Vec<WordRow>,
}

pub struct EvalOptions<'a> {
    pub beta: f64,
    pub free_mode: FreeFunctionMode,
    pub free_list: FreeList,
    pub similarity: Option<&'a dyn NameSimilarity>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        EvalOptions {
            beta: DEFAULT_ROUGE_BETA,
            free_mode: FreeFunctionMode::Credit,
            free_list: FreeList::default(),
            similarity: None,
        }
    }
}

/// Scores a corpus. Per-function scores run in parallel; reductions are
/// sequential in input order, so reports are reproducible bit for bit.
pub fn evaluate(items: &[ScoredName], opts: &EvalOptions) -> Result<EvalReport> {
    let (items, free_functions) = apply_free_functions(items, &opts.free_list, opts.free_mode);
    if items.is_empty() {
        return Err(Error::EmptyCorpus("nothing to evaluate"));
    }
    let per: Vec<(CountTriple, f64, f64, Option<f64>)> = items
        .par_iter()
        .map(|it| {
            let sim = opts
                .similarity
                .map(|p| similarity_hook(&it.pred.join("_"), &it.truth.join("_"), p))
                .transpose()?;
            Ok((
                word_set_counts(&it.pred, &it.truth),
                rouge_l(&it.pred, &it.truth, opts.beta),
                bleu4_smoothed(&it.pred, &it.truth),
                sim,
            ))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let triples: Vec<CountTriple> = per.iter().map(|p| p.0).collect();
    let (precision, recall, f1) = micro_prf(&triples);
    let rouge = per.iter().map(|p| p.1).sum::<f64>() / n;
    let bleu = per.iter().map(|p| p.2).sum::<f64>() / n;
    let similarity = opts
        .similarity
        .map(|_| per.iter().map(|p| p.3.unwrap_or(0.0)).sum::<f64>() / n);
    Ok(EvalReport {
        functions: items.len(),
        precision,
        recall,
        f1,
        rouge_l: rouge,
        bleu,
        similarity,
        similarity_plugin: opts.similarity.map(|p| p.name().to_string()),
        free_mode: opts.free_mode,
        free_functions,
        per_word: per_word_table(&items),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        if s.is_empty() {
            Vec::new()
        } else {
            s.split('_').map(str::to_string).collect()
        }
    }

    fn item(raw: &str, pred: &str, truth: &str) -> ScoredName {
        ScoredName {
            raw_name: raw.into(),
            pred: w(pred),
            truth: w(truth),
        }
    }

    #[test]
    fn set_counts() {
        let c = word_set_counts(&w("get_name"), &w("get_set"));
        assert_eq!(c, CountTriple { tp: 1, fp: 1, fn_: 1 });
        assert_eq!(word_set_counts(&w("a_a_b"), &w("a_b")), CountTriple { tp: 2, fp: 0, fn_: 0 });
        assert_eq!(word_set_counts(&w(""), &w("a_b")), CountTriple { tp: 0, fp: 0, fn_: 2 });
    }

    #[test]
    fn micro_average_fixture() {
        let t = [CountTriple { tp: 1, fp: 1, fn_: 1 }, CountTriple { tp: 1, fp: 0, fn_: 0 }];
        let (p, r, f) = micro_prf(&t);
        assert_eq!((p, r, f), (2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0));
        assert_eq!(micro_prf(&[]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn rouge_conventions() {
        assert_eq!(rouge_l(&w("a_b_c"), &w("a_c"), 1.0), 0.8);
        assert_eq!(rouge_l(&w("a_b"), &w("a_b"), 1.2), 1.0);
        assert_eq!(rouge_l::<String>(&[], &[], 1.2), 1.0);
        assert_eq!(rouge_l(&w(""), &w("a"), 1.2), 0.0);
        assert_eq!(rouge_l(&w("x"), &w("a"), 1.2), 0.0);
    }

    #[test]
    fn bleu_conventions() {
        assert!((bleu4_smoothed(&w("a_b_c_d"), &w("a_b_c_d")) - 1.0).abs() < 1e-12);
        assert_eq!(bleu4_smoothed(&w(""), &w("a")), 0.0);
        assert_eq!(bleu4_smoothed(&w("x_y"), &w("a_b")), 0.0);
        // one-word exact match: p1 = 1, p2..4 = (0+1)/(0+1)
        assert!((bleu4_smoothed(&w("a"), &w("a")) - 1.0).abs() < 1e-12);
        // brevity: pred 1 word, truth 2 words
        let v = bleu4_smoothed(&w("a"), &w("a_b"));
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn free_list_matching_and_modes() {
        let free = FreeList::default();
        assert_eq!(free.len(), 20);
        assert!(free.contains("main"));
        assert!(free.contains("__libc_csu_init"));
        assert!(free.contains("_start"));
        assert!(!free.contains("parse_args"));
        let items = vec![item("main", "", "main"), item("f", "get_x", "get_y")];
        let (credited, n) = apply_free_functions(&items, &free, FreeFunctionMode::Credit);
        assert_eq!(n, 1);
        assert_eq!(credited[0].pred, w("main"));
        let (discarded, n) = apply_free_functions(&items, &free, FreeFunctionMode::Discard);
        assert_eq!(n, 1);
        assert_eq!(discarded.len(), 1);
        assert!("bogus".parse::<FreeFunctionMode>().is_err());
    }

    #[test]
    fn per_word_fixture() {
        let items = vec![
            item("a", "get_name", "get_name"),
            item("b", "get_value", "set_value"),
            item("c", "get", "free"),
        ];
        let rows = per_word_table(&items);
        let get = rows.iter().find(|r| r.word == "get").unwrap();
        assert_eq!((get.occurrences, get.tp, get.fp, get.fn_), (3, 1, 2, 0));
        assert!((get.precision - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(get.recall, 1.0);
        let free = rows.iter().find(|r| r.word == "free").unwrap();
        assert_eq!((free.occurrences, free.precision, free.recall, free.f1), (0, 0.0, 0.0, 0.0));
        assert_eq!(rows[0].word, "get");
    }

    #[test]
    fn similarity_default_plugin() {
        let p = BagOfWordsCosine;
        assert!((similarity_hook("get_name", "get_name", &p).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(similarity_hook("get_name", "set_path", &p).unwrap(), 0.0);
        assert!((similarity_hook("get_name", "get_path", &p).unwrap() - 0.5).abs() < 1e-12);
    }

    struct Broken;
    impl NameSimilarity for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn score(&self, _: &str, _: &str) -> Result<f64> {
            Err(Error::Malformed("model unavailable".into()))
        }
    }

    #[test]
    fn plugin_failure_surfaces() {
        let err = similarity_hook("a", "b", &Broken).unwrap_err();
        assert!(matches!(err, Error::Plugin { .. }));
        let opts = EvalOptions {
            similarity: Some(&Broken),
            ..Default::default()
        };
        assert!(evaluate(&[item("f", "a", "a")], &opts).is_err());
    }

    #[test]
    fn report_fields() {
        let items = vec![item("f", "get_name", "get_name"), item("main", "x", "main")];
        let r = evaluate(&items, &EvalOptions::default()).unwrap();
        assert_eq!(r.functions, 2);
        assert_eq!(r.free_functions, 1);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        assert!(evaluate(&[], &EvalOptions::default()).is_err());
    }
}
