#![allow(dead_code)]

use eta_grounding::corpus::{Concept, ConceptKind, ConceptSet, GoldLink, GroundingInstance};
use eta_grounding::tape::Mat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn words(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

pub fn concept_set(ids: &[&str]) -> ConceptSet {
    ConceptSet::new(ids.iter().map(|i| Concept::word(i, ConceptKind::Column)).collect()).unwrap()
}

/// Concepts `c0..c{k-1}` with the given token widths.
pub fn widths_set(widths: &[usize]) -> ConceptSet {
    ConceptSet::new(
        widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let toks = (0..w).map(|j| format!("c{i}t{j}")).collect();
                Concept::new(format!("c{i}"), toks, ConceptKind::Column).unwrap()
            })
            .collect(),
    )
    .unwrap()
}

pub fn instance(id: &str, question: &[&str], concepts: &[&str], labels: &[bool]) -> GroundingInstance {
    GroundingInstance::new(id, words(question), concept_set(concepts), labels.to_vec(), None).unwrap()
}

pub fn with_gold(
    id: &str,
    question: &[&str],
    concepts: &[&str],
    labels: &[bool],
    gold: &[(usize, &str)],
) -> GroundingInstance {
    let links = gold
        .iter()
        .map(|&(token, c)| GoldLink {
            token,
            concept: c.to_string(),
        })
        .collect();
    GroundingInstance::new(id, words(question), concept_set(concepts), labels.to_vec(), Some(links)).unwrap()
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

pub fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}
