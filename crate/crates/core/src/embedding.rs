//! Per-function embedding bundles and their providers.
//!
//! A bundle holds two function-level vectors and one row per basic block.
//! Real bundles are produced by external toolchains and loaded from disk;
//! [`synth_bundle`] generates a deterministic stand-in for tests and demos.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::{NameSequence, Specials};

const PACKED_MAGIC: &[u8; 8] = b"BLNSEMB1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBundle {
    pub func_a: Vec<f32>,
    pub func_b: Vec<f32>,
    pub blocks: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub provider: String,
    pub d_a: usize,
    pub d_b: usize,
    pub d_p: usize,
    pub seed: u64,
    /// Standard deviation of the synthetic noise, relative to unit-norm
    /// word directions.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.3
}

impl Default for ProviderSpec {
    fn default() -> Self {
        ProviderSpec {
            provider: "synthetic".into(),
            d_a: 768,
            d_b: 512,
            d_p: 128,
            seed: 0,
            noise: default_noise(),
        }
    }
}

impl ProviderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_a == 0 || self.d_b == 0 || self.d_p == 0 {
            return Err(Error::config("embedding dims must be positive"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config("noise must be finite and non-negative"));
        }
        Ok(())
    }
}

impl EmbeddingBundle {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Checks dims against `spec`, finiteness and `m >= 1`.
    pub fn validate(&self, spec: &ProviderSpec) -> Result<()> {
        if self.func_a.len() != spec.d_a {
            return Err(Error::Malformed(format!(
                "func_a has {} entries, expected {}",
                self.func_a.len(),
                spec.d_a
            )));
        }
        if self.func_b.len() != spec.d_b {
            return Err(Error::Malformed(format!(
                "func_b has {} entries, expected {}",
                self.func_b.len(),
                spec.d_b
            )));
        }
        if self.blocks.is_empty() {
            return Err(Error::Malformed("function has no basic blocks".into()));
        }
        if let Some(i) = self.blocks.iter().position(|b| b.len() != spec.d_p) {
            return Err(Error::Malformed(format!(
                "block {i} has {} entries, expected {}",
                self.blocks[i].len(),
                spec.d_p
            )));
        }
        let all = self
            .func_a
            .iter()
            .chain(&self.func_b)
            .chain(self.blocks.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed("non-finite embedding value".into()));
        }
        Ok(())
    }
}

/// Averages the instruction embeddings of each basic block.
pub fn pool_basic_blocks(instr_embeddings: &[Vec<Vec<f32>>]) -> Result<Vec<Vec<f32>>> {
    instr_embeddings
        .iter()
        .enumerate()
        .map(|(b, block)| {
            let first = block
                .first()
                .ok_or_else(|| Error::Malformed(format!("basic block {b} has no instructions")))?;
            let dim = first.len();
            let mut acc = vec![0.0f64; dim];
            for instr in block {
                if instr.len() != dim {
                    return Err(Error::Malformed(format!(
                        "basic block {b} mixes instruction dims {dim} and {}",
                        instr.len()
                    )));
                }
                for (a, v) in acc.iter_mut().zip(instr) {
                    *a += f64::from(*v);
                }
            }
            let n = block.len() as f64;
            Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
        })
        .collect()
}

fn rng_for(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Deterministic direction for `word` in a space of `dim`, shared by every
/// record generated under the same seed. Entries ~ N(0, 1/dim).
fn word_direction(seed: u64, role: &str, word: u32, dim: usize) -> Vec<f64> {
    let mut rng = rng_for(&[&seed.to_le_bytes(), role.as_bytes(), &word.to_le_bytes()]);
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

/// Synthetic bundle: noisy linear images of the name's bag of words.
///
/// `func_a`/`func_b` sum a fixed random direction per word; each word also
/// contributes one basic block, in name order. Names without words get a
/// single noise block. Deterministic in `(record_id, spec.seed)`.
pub fn synth_bundle(record_id: &str, name: &NameSequence, spec: &ProviderSpec) -> EmbeddingBundle {
    let words = name.word_ids(Specials::default());
    let mut noise_rng = rng_for(&[&spec.seed.to_le_bytes(), b"noise", record_id.as_bytes()]);
    let mut noisy = |mut v: Vec<f64>| -> Vec<f32> {
        let scale = spec.noise / (v.len() as f64).sqrt();
        for x in v.iter_mut() {
            *x += noise_rng.sample::<f64, _>(StandardNormal) * scale;
        }
        v.into_iter().map(|x| x as f32).collect()
    };
    let bag = |role: &str, dim: usize| {
        let mut acc = vec![0.0; dim];
        for &w in words {
            for (a, d) in acc.iter_mut().zip(word_direction(spec.seed, role, w, dim)) {
                *a += d;
            }
        }
        acc
    };
    let func_a = noisy(bag("a", spec.d_a));
    let func_b = noisy(bag("b", spec.d_b));
    let mut blocks: Vec<Vec<f32>> = words
        .iter()
        .map(|&w| noisy(word_direction(spec.seed, "p", w, spec.d_p)))
        .collect();
    if blocks.is_empty() {
        blocks.push(noisy(vec![0.0; spec.d_p]));
    }
    EmbeddingBundle {
        func_a,
        func_b,
        blocks,
    }
}

#[derive(Serialize, Deserialize)]
struct BundleLine {
    id: String,
    func_a: Vec<f32>,
    func_b: Vec<f32>,
    blocks: Vec<Vec<f32>>,
}

/// Bundles keyed by record id, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BundleStore {
    pub bundles: IndexMap<String, EmbeddingBundle>,
}

impl BundleStore {
    pub fn get(&self, id: &str) -> Option<&EmbeddingBundle> {
        self.bundles.get(id)
    }

    pub fn insert(&mut self, id: String, bundle: EmbeddingBundle) {
        self.bundles.insert(id, bundle);
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    /// Errors listing every id in `ids` that has no bundle.
    pub fn require<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let missing: Vec<String> = ids
            .into_iter()
            .filter(|id| !self.bundles.contains_key(*id))
            .map(str::to_string)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingBundles(missing))
        }
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (id, b) in &self.bundles {
            let line = BundleLine {
                id: id.clone(),
                func_a: b.func_a.clone(),
                func_b: b.func_b.clone(),
                blocks: b.blocks.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_packed(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(PACKED_MAGIC)?;
        write_u32(&mut w, self.bundles.len())?;
        for (id, b) in &self.bundles {
            write_u32(&mut w, id.len())?;
            w.write_all(id.as_bytes())?;
            write_f32s(&mut w, &b.func_a)?;
            write_f32s(&mut w, &b.func_b)?;
            write_u32(&mut w, b.blocks.len())?;
            for block in &b.blocks {
                write_f32s(&mut w, block)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a JSONL or packed bundle file (detected by its leading bytes)
    /// and validates every bundle against `spec`.
    pub fn load(path: &Path, spec: &ProviderSpec) -> Result<Self> {
        let mut file = File::open(path)?;
        let mut magic = [0u8; 8];
        let n = read_prefix(&mut file, &mut magic)?;
        drop(file);
        let store = if n == 8 && &magic == PACKED_MAGIC {
            Self::load_packed(path)?
        } else {
            Self::load_jsonl(path)?
        };
        for (id, b) in &store.bundles {
            b.validate(spec)
                .map_err(|e| Error::Malformed(format!("{}: bundle {id}: {e}", path.display())))?;
        }
        Ok(store)
    }

    fn load_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut store = BundleStore::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: BundleLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            if store.bundles.contains_key(&parsed.id) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("duplicate bundle id {}", parsed.id),
                });
            }
            store.insert(
                parsed.id,
                EmbeddingBundle {
                    func_a: parsed.func_a,
                    func_b: parsed.func_b,
                    blocks: parsed.blocks,
                },
            );
        }
        Ok(store)
    }

    fn load_packed(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        let count = read_u32(&mut r)?;
        let mut store = BundleStore::default();
        for _ in 0..count {
            let len = read_u32(&mut r)?;
            let mut id = vec![0u8; len];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id)
                .map_err(|_| Error::Malformed("bundle id is not UTF-8".into()))?;
            let func_a = read_f32s(&mut r)?;
            let func_b = read_f32s(&mut r)?;
            let nblocks = read_u32(&mut r)?;
            let blocks = (0..nblocks)
                .map(|_| read_f32s(&mut r))
                .collect::<Result<Vec<_>>>()?;
            store.insert(
                id,
                EmbeddingBundle {
                    func_a,
                    func_b,
                    blocks,
                },
            );
        }
        Ok(store)
    }
}

fn read_prefix(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Malformed("length exceeds u32".into()))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, vals: &[f32]) -> Result<()> {
    write_u32(w, vals.len())?;
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_f32s(r: &mut impl Read) -> Result<Vec<f32>> {
    let n = read_u32(r)?;
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ProviderSpec {
        ProviderSpec {
            provider: "synthetic".into(),
            d_a: 24,
            d_b: 16,
            d_p: 8,
            seed: 7,
            noise: 0.3,
        }
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
        let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn pooling_means() {
        let v = vec![0.5f32, -1.0];
        let pooled = pool_basic_blocks(&[
            vec![v.clone(), v.clone(), v.clone()],
            vec![vec![0.0, 2.0], vec![2.0, 0.0]],
            vec![vec![3.0, 3.0]],
        ])
        .unwrap();
        assert_eq!(pooled, vec![v, vec![1.0, 1.0], vec![3.0, 3.0]]);
    }

    #[test]
    fn pooling_rejects_empty_block() {
        assert!(matches!(
            pool_basic_blocks(&[vec![vec![1.0]], vec![]]),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn synth_is_deterministic_and_shaped() {
        let spec = ProviderSpec::default();
        let name = NameSequence::from_words(&[4, 9, 5], 1);
        let a = synth_bundle("f1", &name, &spec);
        assert_eq!(a, synth_bundle("f1", &name, &spec));
        assert_eq!(a.func_a.len(), 768);
        assert_eq!(a.func_b.len(), 512);
        assert_eq!(a.blocks.len(), 3);
        assert!(a.validate(&spec).is_ok());
        assert_ne!(a, synth_bundle("f2", &name, &spec));
    }

    #[test]
    fn synth_same_names_are_closer() {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut same = 0.0;
        let mut random = 0.0;
        let draw = |rng: &mut ChaCha8Rng| {
            let len = rng.random_range(1..=4);
            let words: Vec<u32> = (0..len).map(|_| rng.random_range(4..20)).collect();
            NameSequence::from_words(&words, 1)
        };
        for i in 0..1000 {
            let n1 = draw(&mut rng);
            let n2 = draw(&mut rng);
            let a = synth_bundle(&format!("x{i}"), &n1, &spec);
            let b = synth_bundle(&format!("y{i}"), &n1, &spec);
            let c = synth_bundle(&format!("z{i}"), &n2, &spec);
            same += cosine(&a.func_a, &b.func_a);
            random += cosine(&a.func_a, &c.func_a);
        }
        assert!(same / 1000.0 > random / 1000.0 + 0.2, "{same} vs {random}");
    }

    #[test]
    fn validate_rejects_nan_and_dims() {
        let spec = small_spec();
        let mut b = synth_bundle("f", &NameSequence::from_words(&[5], 1), &spec);
        b.blocks[0][2] = f32::NAN;
        assert!(b.validate(&spec).is_err());
        let mut b = synth_bundle("f", &NameSequence::from_words(&[5], 1), &spec);
        b.func_a.pop();
        assert!(b.validate(&spec).is_err());
    }

    #[test]
    fn require_lists_missing() {
        let mut store = BundleStore::default();
        store.insert("a".into(), synth_bundle("a", &NameSequence::from_words(&[4], 1), &small_spec()));
        match store.require(["a", "b", "c"]) {
            Err(Error::MissingBundles(ids)) => assert_eq!(ids, ["b", "c"]),
            other => panic!("{other:?}"),
        }
    }
}
