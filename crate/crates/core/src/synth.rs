//! Synthetic twin-pair generator for desk-scale experiments.
//!
//! Each template mentions two nouns and ends in a trigger word. One trigger
//! of the template's pair always selects the first-mentioned noun, the other
//! the second, so the correct candidate flips between the twin sentences.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};

use crate::corpus::{Corpus, SchemaSentence, TwinPair};

struct Template {
    /// `{a}` and `{b}` are the noun slots, `{t}` the trigger, `_` the pronoun.
    pattern: &'static str,
    /// `triggers[0]` selects `{a}`, `triggers[1]` selects `{b}`.
    triggers: [&'static str; 2],
    first: &'static [&'static str],
    second: &'static [&'static str],
}

const TEMPLATES: &[Template] = &[
    Template {
        pattern: "the {a} does not fit in the {b} because _ is too {t} .",
        triggers: ["big", "small"],
        first: &["trophy", "ball", "book", "lamp", "guitar", "cake"],
        second: &["suitcase", "box", "bag", "drawer", "case", "basket"],
    },
    Template {
        pattern: "the {a} could not lift the {b} because _ was too {t} .",
        triggers: ["weak", "heavy"],
        first: &["man", "boy", "girl", "woman", "child"],
        second: &["rock", "table", "piano", "crate", "log"],
    },
    Template {
        pattern: "the {a} chased the {b} because _ was {t} .",
        triggers: ["hungry", "scared"],
        first: &["cat", "dog", "fox", "wolf"],
        second: &["mouse", "rabbit", "bird", "squirrel"],
    },
    Template {
        pattern: "the {a} paid the {b} because _ {t} the money .",
        triggers: ["owed", "earned"],
        first: &["customer", "tenant", "client", "buyer"],
        second: &["waiter", "landlord", "lawyer", "seller"],
    },
    Template {
        pattern: "the {a} thanked the {b} because _ {t} help .",
        triggers: ["received", "gave"],
        first: &["student", "patient", "guest", "traveler"],
        second: &["teacher", "doctor", "host", "guide"],
    },
    Template {
        pattern: "the {a} fell on the {b} and broke it because _ was {t} .",
        triggers: ["heavy", "fragile"],
        first: &["rock", "brick", "hammer", "anvil"],
        second: &["vase", "glass", "plate", "window"],
    },
    Template {
        pattern: "the {a} was hidden under the {b} because _ was so {t} .",
        triggers: ["small", "large"],
        first: &["key", "coin", "ring", "pen"],
        second: &["rug", "pillow", "blanket", "sofa"],
    },
    Template {
        pattern: "the {a} could not see over the {b} because _ was too {t} .",
        triggers: ["short", "tall"],
        first: &["boy", "girl", "child", "kid"],
        second: &["fence", "wall", "hedge", "counter"],
    },
];

/// Number of built-in templates; larger `n_templates` requests are capped here.
pub fn template_count() -> usize {
    TEMPLATES.len()
}

fn render(pattern: &str, a: &str, b: &str, trigger: &str) -> String {
    pattern
        .replace("{a}", a)
        .replace("{b}", b)
        .replace("{t}", trigger)
}

/// Generates a labeled corpus of `n_pairs` twin pairs from the first
/// `n_templates` templates. Identical arguments give identical corpora.
///
/// Sentence 0's correct candidate index is exactly balanced (to within one
/// pair) between 0 and 1.
pub fn synth_generate(seed: u64, n_pairs: usize, n_templates: usize) -> Corpus {
    let n_templates = n_templates.clamp(1, TEMPLATES.len());
    let mut rng = StdRng::seed_from_u64(seed);

    let mut first_label: Vec<u8> = (0..n_pairs).map(|k| (k % 2) as u8).collect();
    first_label.shuffle(&mut rng);

    let pairs = first_label
        .into_iter()
        .enumerate()
        .map(|(k, label0)| {
            let t = &TEMPLATES[rng.random_range(0..n_templates)];
            let a = t.first[rng.random_range(0..t.first.len())];
            let b = t.second[rng.random_range(0..t.second.len())];
            // candidate order is independent of mention order
            let swap = rng.random_bool(0.5);
            let candidates = if swap {
                [format!("the {b}"), format!("the {a}")]
            } else {
                [format!("the {a}"), format!("the {b}")]
            };
            // referent of sentence 0 as a mention index (0 = {a})
            let mention0 = label0 ^ swap as u8;
            let sentence = |mention: u8| {
                let label = mention ^ swap as u8;
                SchemaSentence::new(
                    render(t.pattern, a, b, t.triggers[mention as usize]),
                    Some(label),
                )
            };
            TwinPair {
                id: format!("synth-{seed}-{k:05}"),
                sentences: [sentence(mention0), sentence(1 - mention0)],
                candidates,
            }
        })
        .collect();

    Corpus::new(format!("synth-{seed}"), pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate;
    use proptest::prelude::*;

    #[test]
    fn deterministic() {
        let a = synth_generate(7, 10, 8).to_jsonl();
        let b = synth_generate(7, 10, 8).to_jsonl();
        assert_eq!(a, b);
        assert_ne!(a, synth_generate(8, 10, 8).to_jsonl());
    }

    #[test]
    fn labels_flip_within_pairs() {
        for p in synth_generate(7, 50, 8).pairs {
            assert_ne!(p.sentences[0].label, p.sentences[1].label);
        }
    }

    #[test]
    fn two_hundred_pairs_validate_clean() {
        let c = synth_generate(7, 200, 8);
        assert_eq!(c.len(), 200);
        let r = validate(&c);
        assert!(r.is_clean(), "{:?}", r.violations);
        assert_eq!(r.labeled_fraction, 1.0);
    }

    #[test]
    fn trigger_selects_referent() {
        // brute force over every rendering: the labeled candidate's noun must
        // be the one the sentence's trigger points at
        for p in synth_generate(3, 100, 8).pairs {
            for s in &p.sentences {
                let mut referents = Vec::new();
                for t in TEMPLATES {
                    for a in t.first {
                        for b in t.second {
                            for (k, trig) in t.triggers.iter().enumerate() {
                                if render(t.pattern, a, b, trig) == s.text {
                                    referents.push(if k == 0 { *a } else { *b });
                                }
                            }
                        }
                    }
                }
                assert_eq!(referents.len(), 1, "{}", s.text);
                let gold = &p.candidates[s.label.unwrap() as usize];
                assert_eq!(gold, &format!("the {}", referents[0]), "{}", s.text);
            }
        }
    }

    #[test]
    fn template_count_is_capped() {
        let c = synth_generate(1, 20, 1000);
        assert_eq!(c.len(), 20);
        let one = synth_generate(1, 20, 1);
        assert!(one
            .pairs
            .iter()
            .all(|p| p.sentences[0].text.contains("does not fit")));
    }

    proptest! {
        #[test]
        fn generated_pairs_are_valid(seed in 0u64..10_000, n in 1usize..40, t in 1usize..10) {
            let c = synth_generate(seed, n, t);
            prop_assert_eq!(c.len(), n);
            prop_assert!(validate(&c).is_clean());
            prop_assert!(c.is_labeled());
        }

        #[test]
        fn first_sentence_labels_balanced(seed in 0u64..10_000, n in 100usize..300) {
            let c = synth_generate(seed, n, 8);
            let zeros = c.pairs.iter().filter(|p| p.sentences[0].label == Some(0)).count();
            let frac = zeros as f64 / n as f64;
            prop_assert!((0.4..=0.6).contains(&frac), "fraction {}", frac);
        }
    }
}
