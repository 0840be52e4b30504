use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use blens::autograd::{masked_softmax, Mat};
use blens::lord::{flexible_decode, Prediction, Slot, StepScorer};
use blens::metrics::{bleu4_smoothed, micro_prf, rouge_l, word_set_counts, CountTriple};
use blens::tokenizer::{NameSequence, Vocabulary};

const WORDS: [&str; 8] = ["get", "set", "buffer", "hash", "node", "to", "int", "convert"];

fn vocab() -> Vocabulary {
    Vocabulary::from_words(WORDS.iter().map(|w| w.to_string()).collect()).unwrap()
}

fn camel(words: &[&str]) -> String {
    let mut out = words[0].to_string();
    for w in &words[1..] {
        out.push_str(&w[..1].to_uppercase());
        out.push_str(&w[1..]);
    }
    out
}

fn word_list(max: usize) -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..=max)
}

struct Seeded {
    slots: usize,
    seed: u64,
}

impl StepScorer for Seeded {
    fn slots(&self) -> usize {
        self.slots
    }

    fn probabilities(&mut self, context: &[Slot]) -> blens::Result<Mat> {
        let mut seed = self.seed;
        for s in context {
            let v = match s {
                Slot::Word(w) => *w as u64 + 1,
                Slot::Masked => 0,
            };
            seed = seed.wrapping_mul(31).wrapping_add(v);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Mat::from_shape_fn((self.slots, 9), |_| 4.0 * rng.random::<f64>());
        Ok(masked_softmax(logits.view(), None))
    }
}

proptest! {
    #[test]
    fn snake_and_camel_names_round_trip(words in word_list(6)) {
        let v = vocab();
        let snake = words.join("_");
        let seq = v.tokenize(&snake, 20);
        prop_assert_eq!(v.detokenize(&seq).unwrap(), snake.clone());
        prop_assert_eq!(v.tokenize(&camel(&words), 20), seq);
    }

    #[test]
    fn truncation_keeps_a_prefix(words in word_list(8), n in 0usize..8) {
        let v = vocab();
        let full = v.tokenize(&words.join("_"), 20);
        let cut = v.tokenize(&words.join("_"), n);
        let s = v.specials();
        prop_assert!(full.word_ids(s).starts_with(cut.word_ids(s)));
        prop_assert_eq!(cut.num_words(s), n.min(words.len()));
        prop_assert_eq!(cut.ids.last(), Some(&s.eos));
    }

    #[test]
    fn scores_stay_in_range(pred in word_list(6), truth in word_list(6)) {
        let c = word_set_counts(&pred, &truth);
        let (p, r, f1) = micro_prf(&[c]);
        for x in [p, r, f1] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert!(f1 <= p.max(r) + 1e-15 && f1 >= p.min(r) - 1e-15);
        let rl = rouge_l(&pred, &truth, 1.2);
        prop_assert!((0.0..=1.0 + 1e-15).contains(&rl));
        prop_assert!((rouge_l(&pred, &truth, 1.0) - rouge_l(&truth, &pred, 1.0)).abs() < 1e-15);
        let b = bleu4_smoothed(&pred, &truth);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
    }

    #[test]
    fn identical_names_score_one(words in word_list(6)) {
        let (p, r, f1) = micro_prf(&[word_set_counts(&words, &words)]);
        prop_assert_eq!((p, r, f1), (1.0, 1.0, 1.0));
        prop_assert_eq!(rouge_l(&words, &words, 1.2), 1.0);
        prop_assert!((bleu4_smoothed(&words, &words) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn micro_counts_are_additive(pairs in prop::collection::vec((word_list(4), word_list(4)), 1..10)) {
        let triples: Vec<CountTriple> = pairs.iter().map(|(p, t)| word_set_counts(p, t)).collect();
        let mut total = CountTriple::default();
        for t in &triples {
            total += *t;
        }
        prop_assert_eq!(micro_prf(&triples), micro_prf(&[total]));
    }

    #[test]
    fn decoding_is_a_prefix_of_the_full_trace(seed in any::<u64>(), slots in 1usize..7, t in 0.0f64..1.0) {
        let mut s = Seeded { slots, seed };
        let full = flexible_decode(&mut s, 0.0).unwrap();
        let p = flexible_decode(&mut s, t).unwrap();
        prop_assert!(full.trace.starts_with(&p.trace));
        prop_assert!(p.trace.iter().all(|step| step.confidence >= t));
        prop_assert_eq!(p, Prediction::from_trace(&full.trace, slots, t));
    }

    #[test]
    fn decoded_words_never_include_specials(seed in any::<u64>(), slots in 1usize..7) {
        let v = vocab();
        let mut s = Seeded { slots, seed };
        let p = flexible_decode(&mut s, 0.0).unwrap();
        let seq = NameSequence::from_words(&p.words, v.specials().eos);
        prop_assert!(seq.validate(&v).is_ok());
    }
}
