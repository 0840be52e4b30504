//! Synthetic corpora: grammar-generated names over a 16-word vocabulary,
//! grouped into projects and binaries, with provider embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{hash_function, FunctionRecord};
use crate::embedding::{synth_bundle, BundleStore, ProviderSpec};
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

pub const VERBS: [&str; 6] = ["get", "set", "read", "write", "init", "free"];
pub const OBJECTS: [&str; 6] = ["buffer", "list", "node", "file", "table", "string"];
pub const MODIFIERS: [&str; 4] = ["hash", "size", "next", "name"];

/// Every word the generator can emit.
pub fn synth_words() -> Vec<String> {
    VERBS
        .iter()
        .chain(&OBJECTS)
        .chain(&MODIFIERS)
        .map(|w| w.to_string())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub projects: usize,
    pub binaries_per_project: usize,
    pub functions_per_binary: usize,
    pub seed: u64,
    /// Probability of writing a name in camelCase instead of snake_case.
    pub camel_case: f64,
    pub provider: ProviderSpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            projects: 10,
            binaries_per_project: 2,
            functions_per_binary: 4,
            seed: 0,
            camel_case: 0.25,
            provider: ProviderSpec::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub records: Vec<FunctionRecord>,
    pub bundles: BundleStore,
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

/// `verb_object`, `verb_modifier_object` or `verb_object_modifier`.
pub fn synth_name_words(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let verb = pick(rng, &VERBS);
    let object = pick(rng, &OBJECTS);
    match rng.random_range(0..3) {
        0 => vec![verb, object],
        1 => vec![verb, pick(rng, &MODIFIERS), object],
        _ => vec![verb, object, pick(rng, &MODIFIERS)],
    }
}

fn render(words: &[&str], camel: bool) -> String {
    if !camel {
        return words.join("_");
    }
    let mut out = words[0].to_string();
    for w in &words[1..] {
        let mut c = w.chars();
        if let Some(first) = c.next() {
            out.extend(first.to_uppercase());
            out.push_str(c.as_str());
        }
    }
    out
}

/// Deterministic corpus for `spec`. Embeddings are computed from the name
/// words through a fixed internal vocabulary, so they do not depend on any
/// vocabulary built later from the corpus.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.provider.validate()?;
    if spec.projects == 0 || spec.binaries_per_project == 0 || spec.functions_per_binary == 0 {
        return Err(Error::config("synthetic corpus dimensions must be positive"));
    }
    let vocab = Vocabulary::from_words(synth_words())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    let mut bundles = BundleStore::default();
    for p in 0..spec.projects {
        for b in 0..spec.binaries_per_project {
            for f in 0..spec.functions_per_binary {
                let words = synth_name_words(&mut rng);
                let camel = rng.random::<f64>() < spec.camel_case;
                let name = render(&words, camel);
                let project = format!("proj{p:03}");
                let binary = format!("bin{b:02}");
                let id = format!("fn{f:04}");
                let bundle_ref = format!("{project}.{binary}.{id}");
                let seq = vocab.tokenize(&name, words.len());
                bundles.insert(bundle_ref.clone(), synth_bundle(&bundle_ref, &seq, &spec.provider));
                records.push(FunctionRecord {
                    hash: hash_function(format!("{bundle_ref}:{name}").as_bytes())?,
                    id,
                    project,
                    binary,
                    name,
                    bundle_ref,
                });
            }
        }
    }
    Ok(SynthCorpus { records, bundles })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::normalize;

    #[test]
    fn vocabulary_has_sixteen_words() {
        assert_eq!(synth_words().len(), 16);
    }

    #[test]
    fn generation_is_deterministic_and_normalizes_back() {
        let spec = SynthSpec {
            provider: ProviderSpec {
                d_a: 8,
                d_b: 8,
                d_p: 4,
                ..ProviderSpec::default()
            },
            ..SynthSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.bundles, b.bundles);
        assert_eq!(a.records.len(), 80);
        let words = synth_words();
        for r in &a.records {
            let n = normalize(&r.name);
            assert!((2..=3).contains(&n.len()));
            assert!(n.iter().all(|w| words.contains(w)));
            let bundle = a.bundles.get(&r.bundle_ref).unwrap();
            assert_eq!(bundle.blocks.len(), n.len());
        }
    }
}
