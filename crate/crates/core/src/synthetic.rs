//! Seeded synthetic grounding corpora with planted gold links.
//!
//! A fixed inventory of concepts is drawn from a pseudo-word vocabulary;
//! each concept owns a set of trigger words (its first surface token plus
//! unrelated synonyms). Questions mix triggers of a few concepts with
//! filler and distractor words, so the true grounding is known exactly.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    Concept, ConceptKind, ConceptSet, GoldLink, GroundingInstance, LinkTuples, LinkingGold, SchemaTuple,
};
use crate::error::{EtaError, Result};

/// Fixed non-content words used to pad questions.
pub const FILLERS: [&str; 10] = ["what", "is", "the", "of", "show", "me", "all", "for", "with", "and"];
const SUFFIXES: [&str; 5] = ["id", "name", "count", "date", "type"];
const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Size of the pseudo-word pool concept names, synonyms and distractors come from.
    pub vocab_size: usize,
    pub concepts: usize,
    pub synonyms_per_concept: usize,
    pub questions: usize,
    /// Inclusive question length range.
    pub question_len: (usize, usize),
    /// Inclusive range of mentioned concepts per question.
    pub mentions_per_question: (usize, usize),
    /// Probability that a non-trigger slot holds a distractor instead of a filler.
    pub distractor_rate: f64,
    /// Probability that a mentioned concept is mentioned by two distinct synonyms.
    pub redundant_mention_rate: f64,
    /// Probability that a concept's surface form has a second token.
    pub multi_token_rate: f64,
    pub seed: u64,
    /// Question stream; different splits share the concept inventory.
    pub split: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            concepts: 8,
            synonyms_per_concept: 2,
            questions: 200,
            question_len: (6, 12),
            mentions_per_question: (1, 3),
            distractor_rate: 0.3,
            redundant_mention_rate: 0.35,
            multi_token_rate: 0.5,
            seed: 7,
            split: 0,
        }
    }
}

impl SyntheticSpec {
    /// Same inventory, a different question stream.
    pub fn with_split(&self, split: u64, questions: usize) -> Self {
        Self {
            split,
            questions,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EtaError::Validation(format!("synthetic spec: {m}")));
        if self.concepts == 0 {
            return bad("concepts must be >= 1");
        }
        if self.vocab_size == 0 {
            return bad("vocabulary is empty");
        }
        if self.synonyms_per_concept == 0 {
            return bad("synonyms_per_concept must be >= 1");
        }
        if self.vocab_size < self.concepts * self.synonyms_per_concept {
            return bad("vocab_size smaller than concepts * synonyms_per_concept");
        }
        let (lo, hi) = self.mentions_per_question;
        if lo == 0 || lo > hi || lo > self.concepts {
            return bad("mentions_per_question must satisfy 1 <= lo <= hi and lo <= concepts");
        }
        let (qlo, qhi) = self.question_len;
        if qlo == 0 || qlo > qhi {
            return bad("question_len must satisfy 1 <= lo <= hi");
        }
        for (name, p) in [
            ("distractor_rate", self.distractor_rate),
            ("redundant_mention_rate", self.redundant_mention_rate),
            ("multi_token_rate", self.multi_token_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub instances: Vec<GroundingInstance>,
    pub gold: Vec<LinkingGold>,
    /// Trigger words per concept, in inventory order.
    pub triggers: Vec<Vec<String>>,
}

fn pseudo_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let reserved: HashSet<&str> = FILLERS.iter().chain(SUFFIXES.iter()).copied().collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if !reserved.contains(w.as_str()) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut inv = ChaCha8Rng::seed_from_u64(spec.seed);
    let words = pseudo_words(&mut inv, spec.vocab_size);
    let k = spec.concepts;
    let syn = spec.synonyms_per_concept;

    let triggers: Vec<Vec<String>> = (0..k).map(|c| words[c * syn..(c + 1) * syn].to_vec()).collect();
    let distractors = &words[k * syn..];
    let n_tables = k.div_ceil(4);
    let inventory: Vec<Concept> = triggers
        .iter()
        .enumerate()
        .map(|(c, t)| {
            let mut tokens = vec![t[0].clone()];
            if inv.gen_bool(spec.multi_token_rate) {
                tokens.push(SUFFIXES.choose(&mut inv).unwrap().to_string());
            }
            let kind = if c < n_tables {
                ConceptKind::Table
            } else {
                ConceptKind::Column
            };
            Concept {
                id: tokens.join("_"),
                tokens,
                kind,
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(spec.split.wrapping_add(1)),
    );
    let mut instances = Vec::with_capacity(spec.questions);
    let mut gold = Vec::with_capacity(spec.questions);
    for qi in 0..spec.questions {
        let (mlo, mhi) = spec.mentions_per_question;
        let m = rng.gen_range(mlo..=mhi.min(k));
        let mut chosen: Vec<usize> = (0..k)
            .collect::<Vec<_>>()
            .choose_multiple(&mut rng, m)
            .copied()
            .collect();
        chosen.sort_unstable();

        // (concept, trigger word) in planting order
        let mut planted: Vec<(usize, String)> = Vec::new();
        for &c in &chosen {
            let mut picks: Vec<&String> = triggers[c].iter().collect();
            picks.shuffle(&mut rng);
            planted.push((c, picks[0].clone()));
            if syn >= 2 && rng.gen_bool(spec.redundant_mention_rate) {
                planted.push((c, picks[1].clone()));
            }
        }
        let len = rng
            .gen_range(spec.question_len.0..=spec.question_len.1)
            .max(planted.len());
        let mut slots: Vec<Option<usize>> = vec![None; len];
        let positions: Vec<usize> = (0..len)
            .collect::<Vec<_>>()
            .choose_multiple(&mut rng, planted.len())
            .copied()
            .collect();
        for (p, pos) in positions.iter().enumerate() {
            slots[*pos] = Some(p);
        }
        let mut tokens = Vec::with_capacity(len);
        let mut links = Vec::new();
        for (pos, slot) in slots.iter().enumerate() {
            match slot {
                Some(p) => {
                    tokens.push(planted[*p].1.clone());
                    links.push((pos, planted[*p].0));
                }
                None => {
                    if !distractors.is_empty() && rng.gen_bool(spec.distractor_rate) {
                        tokens.push(distractors.choose(&mut rng).unwrap().clone());
                    } else {
                        tokens.push(FILLERS.choose(&mut rng).unwrap().to_string());
                    }
                }
            }
        }

        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let concepts = ConceptSet::new(order.iter().map(|&c| inventory[c].clone()).collect())?;
        let labels: Vec<bool> = order.iter().map(|c| chosen.contains(c)).collect();
        let gold_links: Vec<GoldLink> = links
            .iter()
            .map(|&(token, c)| GoldLink {
                token,
                concept: inventory[c].id.clone(),
            })
            .collect();
        let sql = format!(
            "SELECT {} FROM corpus_{}",
            chosen
                .iter()
                .map(|&c| inventory[c].id.as_str())
                .collect::<Vec<_>>()
                .join(", "),
            spec.seed
        );
        let id = format!("syn{}-{}-{:04}", spec.seed, spec.split, qi);
        let tuples = gold_links
            .iter()
            .map(|g| SchemaTuple {
                concept: g.concept.clone(),
                token: g.token,
                kind: inventory.iter().find(|c| c.id == g.concept).unwrap().kind,
            })
            .collect();
        gold.push(LinkingGold {
            instance_id: id.clone(),
            tuples: LinkTuples::Schema(tuples),
        });
        instances.push(GroundingInstance::new(id, tokens, concepts, labels, Some(gold_links))?.with_sql(sql));
    }
    Ok(SyntheticCorpus {
        instances,
        gold,
        triggers,
    })
}
