//! Function corpora, group-atomic splits and the strict-setting filter.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::metrics::{word_set_counts, FreeList};

/// One function of the corpus. `name` is the raw symbol name; `hash` is the
/// hex SHA-256 of the function's code bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub id: String,
    pub project: String,
    pub binary: String,
    pub name: String,
    pub hash: String,
    pub bundle_ref: String,
}

impl FunctionRecord {
    /// Unique key `project/binary/id`.
    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.project, self.binary, self.id)
    }

    fn check(&self) -> std::result::Result<(), String> {
        for (field, v) in [
            ("id", &self.id),
            ("project", &self.project),
            ("binary", &self.binary),
            ("bundle_ref", &self.bundle_ref),
        ] {
            if v.is_empty() {
                return Err(format!("field `{field}` is empty"));
            }
        }
        if self.hash.len() != 64 || !self.hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err("field `hash` is not a 64-digit hex SHA-256".into());
        }
        Ok(())
    }
}

/// Stable SHA-256 of a function's raw bytes.
pub fn hash_function(code: &[u8]) -> Result<String> {
    if code.is_empty() {
        return Err(Error::Malformed("cannot hash an empty function".into()));
    }
    Ok(hex::encode(Sha256::digest(code)))
}

/// Hash of a bundle's `f32` values, for corpora without code bytes.
pub fn hash_embedding(bundle: &EmbeddingBundle) -> String {
    let mut h = Sha256::new();
    let rows = [&bundle.func_a, &bundle.func_b].into_iter().chain(bundle.blocks.iter());
    for row in rows {
        h.update((row.len() as u32).to_le_bytes());
        for v in row {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Reads a JSONL corpus; blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<FunctionRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: FunctionRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        rec.check().map_err(err)?;
        if !seen.insert(rec.key()) {
            return Err(err(format!("duplicate record {}", rec.key())));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, records: &[FunctionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// Cross-binary: a binary's functions stay together.
    Binary,
    /// Cross-project: a project's functions stay together.
    Project,
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Self::Binary),
            "project" => Ok(Self::Project),
            other => Err(Error::Config(format!("unknown grouping {other:?}"))),
        }
    }
}

impl Grouping {
    pub fn key(self, r: &FunctionRecord) -> String {
        match self {
            Grouping::Binary => format!("{}/{}", r.project, r.binary),
            Grouping::Project => r.project.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSet {
    Train,
    Val,
    Test,
}

impl SplitSet {
    pub const ALL: [SplitSet; 3] = [SplitSet::Train, SplitSet::Val, SplitSet::Test];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub grouping: Grouping,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(grouping: Grouping, seed: u64) -> Self {
        SplitSpec {
            ratios: [0.8, 0.1, 0.1],
            grouping,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::config("split ratios must be positive"));
        }
        if (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split ratios must sum to 1"));
        }
        Ok(())
    }
}

/// Group → set assignment, persisted so a split can be replayed exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub assignments: IndexMap<String, SplitSet>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Partitions `records` by the stored assignment, preserving input order.
    pub fn apply(&self, records: &[FunctionRecord]) -> Result<Split> {
        let mut sets: [Vec<FunctionRecord>; 3] = Default::default();
        for r in records {
            let key = self.spec.grouping.key(r);
            let set = self
                .assignments
                .get(&key)
                .ok_or_else(|| Error::Malformed(format!("group {key} is not in the split manifest")))?;
            sets[set.index()].push(r.clone());
        }
        let [train, val, test] = sets;
        Ok(Split {
            train,
            val,
            test,
            manifest: self.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<FunctionRecord>,
    pub val: Vec<FunctionRecord>,
    pub test: Vec<FunctionRecord>,
    pub manifest: SplitManifest,
}

impl Split {
    pub fn get(&self, set: SplitSet) -> &[FunctionRecord] {
        match set {
            SplitSet::Train => &self.train,
            SplitSet::Val => &self.val,
            SplitSet::Test => &self.test,
        }
    }
}

/// Group-atomic split. Groups are shuffled by the seed, stably sorted by
/// size (largest first), and each is assigned to the set furthest below
/// its target function count. Any set left empty then takes the smallest
/// group of the largest set.
pub fn split(records: &[FunctionRecord], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut sizes: IndexMap<String, usize> = IndexMap::new();
    for r in records {
        *sizes.entry(spec.grouping.key(r)).or_insert(0) += 1;
    }
    if sizes.len() < 3 {
        return Err(Error::Malformed(format!(
            "need at least 3 groups to split, found {}",
            sizes.len()
        )));
    }
    let mut groups: Vec<(String, usize)> = sizes.into_iter().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    groups.sort_by(|a, b| b.1.cmp(&a.1));

    let total = records.len() as f64;
    let mut counts = [0usize; 3];
    let mut members: [Vec<usize>; 3] = Default::default();
    for (gi, (_, size)) in groups.iter().enumerate() {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for s in 0..3 {
            let deficit = spec.ratios[s] * total - counts[s] as f64;
            if deficit > best_deficit {
                best = s;
                best_deficit = deficit;
            }
        }
        counts[best] += size;
        members[best].push(gi);
    }
    while let Some(empty) = (0..3).find(|&s| members[s].is_empty()) {
        let donor = (0..3).max_by_key(|&s| (members[s].len() > 1, counts[s])).expect("three sets");
        let pos = (0..members[donor].len())
            .min_by_key(|&i| groups[members[donor][i]].1)
            .expect("donor has groups");
        let gi = members[donor].remove(pos);
        counts[donor] -= groups[gi].1;
        counts[empty] += groups[gi].1;
        members[empty].push(gi);
    }

    let mut assignment = vec![SplitSet::Train; groups.len()];
    for (s, set) in SplitSet::ALL.iter().enumerate() {
        for &gi in &members[s] {
            assignment[gi] = *set;
        }
    }
    let mut assignments: IndexMap<String, SplitSet> = groups
        .iter()
        .zip(assignment)
        .map(|((k, _), s)| (k.clone(), s))
        .collect();
    assignments.sort_keys();
    SplitManifest {
        spec: spec.clone(),
        assignments,
    }
    .apply(records)
}

#[derive(Clone, Debug)]
pub struct StrictFilterConfig {
    pub excluded_words: Vec<String>,
    pub free_list: FreeList,
    /// Raw names of the training split.
    pub training_names: HashSet<String>,
    /// Content hashes of the training split.
    pub training_hashes: HashSet<String>,
}

impl StrictFilterConfig {
    pub fn from_training(train: &[FunctionRecord], excluded_words: Vec<String>, free_list: FreeList) -> Self {
        StrictFilterConfig {
            excluded_words,
            free_list,
            training_names: train.iter().map(|r| r.name.clone()).collect(),
            training_hashes: train.iter().map(|r| r.hash.clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    HashDuplicate,
    FreeFunction,
    /// Name seen in training, contains an excluded word, and F1 > 0.
    SharedName,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StrictReport {
    pub hash_duplicates: usize,
    pub free_functions: usize,
    pub shared_names: usize,
    /// `(record key, reason)` in input order.
    pub removed: Vec<(String, RemovalReason)>,
}

impl StrictReport {
    pub fn total(&self) -> usize {
        self.removed.len()
    }
}

#[derive(Clone, Debug)]
pub struct StrictOutcome {
    pub records: Vec<FunctionRecord>,
    /// Truth words of the kept records with excluded words deleted.
    pub truths: Vec<Vec<String>>,
    pub report: StrictReport,
}

/// The strict-setting filter. `truths[i]` are the words of `test[i]`;
/// `preds` maps record keys to predicted words.
pub fn strict_filter(
    test: &[FunctionRecord],
    truths: &[Vec<String>],
    preds: &HashMap<String, Vec<String>>,
    cfg: &StrictFilterConfig,
) -> Result<StrictOutcome> {
    if test.len() != truths.len() {
        return Err(Error::shape(format!("{} records but {} truths", test.len(), truths.len())));
    }
    let missing: Vec<String> = test
        .iter()
        .map(FunctionRecord::key)
        .filter(|k| !preds.contains_key(k))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let excluded: HashSet<&str> = cfg.excluded_words.iter().map(String::as_str).collect();
    let mut report = StrictReport::default();
    let mut records = Vec::new();
    let mut kept_truths = Vec::new();
    for (rec, truth) in test.iter().zip(truths) {
        let key = rec.key();
        let reason = if cfg.training_hashes.contains(&rec.hash) {
            Some(RemovalReason::HashDuplicate)
        } else if cfg.free_list.contains(&rec.name) {
            Some(RemovalReason::FreeFunction)
        } else if cfg.training_names.contains(&rec.name)
            && truth.iter().any(|w| excluded.contains(w.as_str()))
            && word_set_counts(&preds[&key], truth).tp > 0
        {
            Some(RemovalReason::SharedName)
        } else {
            None
        };
        match reason {
            Some(r) => {
                match r {
                    RemovalReason::HashDuplicate => report.hash_duplicates += 1,
                    RemovalReason::FreeFunction => report.free_functions += 1,
                    RemovalReason::SharedName => report.shared_names += 1,
                }
                report.removed.push((key, r));
            }
            None => {
                records.push(rec.clone());
                kept_truths.push(
                    truth
                        .iter()
                        .filter(|w| !excluded.contains(w.as_str()))
                        .cloned()
                        .collect(),
                );
            }
        }
    }
    Ok(StrictOutcome {
        records,
        truths: kept_truths,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, project: &str, binary: &str, name: &str) -> FunctionRecord {
        FunctionRecord {
            id: id.to_string(),
            project: project.into(),
            binary: binary.into(),
            name: name.into(),
            hash: hash_function(format!("{project}{binary}{id}").as_bytes()).unwrap(),
            bundle_ref: format!("f{id}"),
        }
    }

    #[test]
    fn golden_hash() {
        assert_eq!(
            hash_function(b"abc").unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(hash_function(b"").is_err());
        assert_ne!(hash_function(&[0]).unwrap(), hash_function(&[1]).unwrap());
    }

    #[test]
    fn corpus_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let recs: Vec<_> = (0..10).map(|i| rec(i, "p", "b", "get_x")).collect();
        save_corpus(&path, &recs).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), recs);

        let mut dup = recs.clone();
        dup.push(recs[3].clone());
        save_corpus(&path, &dup).unwrap();
        match load_corpus(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 11),
            other => panic!("{other:?}"),
        }

        std::fs::write(&path, "{\"id\": \"1\"}\n").unwrap();
        assert!(matches!(load_corpus(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn split_needs_three_groups() {
        let recs: Vec<_> = (0..10).map(|i| rec(i, &format!("p{}", i % 2), "b", "f")).collect();
        assert!(split(&recs, &SplitSpec::new(Grouping::Project, 0)).is_err());
        let three: Vec<_> = (0..9).map(|i| rec(i, &format!("p{}", i % 3), "b", "f")).collect();
        let s = split(&three, &SplitSpec::new(Grouping::Project, 0)).unwrap();
        assert!(SplitSet::ALL.iter().all(|&set| !s.get(set).is_empty()));
    }

    #[test]
    fn manifest_replays_split() {
        let recs: Vec<_> = (0..60).map(|i| rec(i, &format!("p{}", i % 7), &format!("b{}", i % 11), "f")).collect();
        let s = split(&recs, &SplitSpec::new(Grouping::Binary, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        s.manifest.save(&path).unwrap();
        let again = SplitManifest::load(&path).unwrap().apply(&recs).unwrap();
        assert_eq!(again.train, s.train);
        assert_eq!(again.test, s.test);
    }

    #[test]
    fn strict_filter_orders_categories() {
        let train = vec![rec(0, "t", "b", "get_value"), rec(1, "t", "b", "xmalloc")];
        let mut dup = rec(10, "s", "b", "anything");
        dup.hash = train[0].hash.clone();
        let test = vec![
            dup,
            rec(11, "s", "b", "main"),
            rec(12, "s", "b", "xmalloc"),
            rec(13, "s", "b", "get_value"),
        ];
        let truths = vec![
            vec!["anything".to_string()],
            vec!["main".to_string()],
            vec!["xmalloc".to_string()],
            vec!["get".to_string(), "value".to_string()],
        ];
        let mut preds = HashMap::new();
        preds.insert(test[0].key(), vec![]);
        preds.insert(test[1].key(), vec![]);
        preds.insert(test[2].key(), vec!["xmalloc".to_string()]);
        preds.insert(test[3].key(), vec!["set".to_string()]);
        let cfg = StrictFilterConfig::from_training(&train, vec!["xmalloc".into(), "value".into()], FreeList::default());
        let out = strict_filter(&test, &truths, &preds, &cfg).unwrap();
        assert_eq!(
            (out.report.hash_duplicates, out.report.free_functions, out.report.shared_names),
            (1, 1, 1)
        );
        // get_value shares a name and an excluded word but scored F1 = 0
        assert_eq!(out.records, vec![test[3].clone()]);
        assert_eq!(out.truths, vec![vec!["get".to_string()]]);

        preds.remove(&test[2].key());
        assert!(matches!(
            strict_filter(&test, &truths, &preds, &cfg),
            Err(Error::MissingPredictions(_))
        ));
    }
}
