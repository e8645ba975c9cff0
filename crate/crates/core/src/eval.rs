//! Micro-averaged grounding metrics.
//!
//! Schema linking pools exact `(concept, token)` tuples over the split.
//! Entity linking uses weak matching: a gold entity counts as found when a
//! prediction names it with a span that overlaps the gold span. The true
//! positive set holds entities, so two predicted mentions of one gold
//! entity count once in `tp` but twice in the prediction count.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityTuple, LinkTuples, LinkingGold, SchemaTuple};
use crate::error::{EtaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub pred_count: usize,
    pub gold_count: usize,
}

impl PrfReport {
    /// Ratios with the `0/0 = 0` convention.
    pub fn from_counts(tp: usize, pred_count: usize, gold_count: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, pred_count);
        let recall = ratio(tp, gold_count);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            pred_count,
            gold_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Schema,
    Entity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regime: Regime,
    pub overall: PrfReport,
    /// Per concept kind (`table`, `column`, ...) for schema linking.
    pub per_kind: BTreeMap<String, PrfReport>,
}

impl EvalReport {
    /// Fixed-width plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7}",
            "kind", "precision", "recall", "f1", "tp", "pred", "gold"
        );
        let mut row = |name: &str, r: &PrfReport| {
            let _ = writeln!(
                out,
                "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7} {:>7}",
                name, r.precision, r.recall, r.f1, r.tp, r.pred_count, r.gold_count
            );
        };
        for (k, r) in &self.per_kind {
            row(k, r);
        }
        row("overall", &self.overall);
        out
    }
}

fn index_ids<'a>(gold: &'a [LinkingGold], pred: &'a [LinkingGold]) -> Result<HashSet<&'a str>> {
    let ids: HashSet<&str> = gold.iter().map(|g| g.instance_id.as_str()).collect();
    for p in pred {
        if !ids.contains(p.instance_id.as_str()) {
            return Err(EtaError::Validation(format!(
                "prediction for unknown instance `{}`",
                p.instance_id
            )));
        }
    }
    Ok(ids)
}

fn schema_tuples(sets: &[LinkingGold]) -> Result<BTreeSet<(&str, &SchemaTuple)>> {
    let mut out = BTreeSet::new();
    for s in sets {
        match &s.tuples {
            LinkTuples::Schema(ts) => out.extend(ts.iter().map(|t| (s.instance_id.as_str(), t))),
            LinkTuples::Entity(_) => {
                return Err(EtaError::Validation(format!(
                    "`{}` holds entity tuples in a schema evaluation",
                    s.instance_id
                )))
            }
        }
    }
    Ok(out)
}

/// Micro-averaged schema-linking P/R/F, overall and per concept kind.
pub fn schema_linking_metrics(gold: &[LinkingGold], pred: &[LinkingGold]) -> Result<EvalReport> {
    index_ids(gold, pred)?;
    let g = schema_tuples(gold)?;
    let p = schema_tuples(pred)?;
    let tp = g.intersection(&p).count();
    let overall = PrfReport::from_counts(tp, p.len(), g.len());

    let kinds: BTreeSet<_> = g.iter().chain(p.iter()).map(|(_, t)| t.kind).collect();
    let per_kind = kinds
        .into_iter()
        .map(|kind| {
            let gk: BTreeSet<_> = g.iter().filter(|(_, t)| t.kind == kind).collect();
            let pk: BTreeSet<_> = p.iter().filter(|(_, t)| t.kind == kind).collect();
            let tp = gk.intersection(&pk).count();
            (kind.to_string(), PrfReport::from_counts(tp, pk.len(), gk.len()))
        })
        .collect();
    Ok(EvalReport {
        regime: Regime::Schema,
        overall,
        per_kind,
    })
}

fn entity_tuples(sets: &[LinkingGold]) -> Result<BTreeMap<&str, &BTreeSet<EntityTuple>>> {
    let mut out = BTreeMap::new();
    for s in sets {
        match &s.tuples {
            LinkTuples::Entity(ts) => {
                for t in ts {
                    if t.span.start >= t.span.end {
                        return Err(EtaError::Validation(format!(
                            "`{}`: invalid span [{}, {})",
                            s.instance_id, t.span.start, t.span.end
                        )));
                    }
                }
                out.insert(s.instance_id.as_str(), ts);
            }
            LinkTuples::Schema(_) => {
                return Err(EtaError::Validation(format!(
                    "`{}` holds schema tuples in an entity evaluation",
                    s.instance_id
                )))
            }
        }
    }
    Ok(out)
}

/// Weak-matching entity-linking P/R/F.
pub fn weak_match_entity_metrics(gold: &[LinkingGold], pred: &[LinkingGold]) -> Result<EvalReport> {
    index_ids(gold, pred)?;
    let g = entity_tuples(gold)?;
    let p = entity_tuples(pred)?;
    let gold_count: usize = g.values().map(|s| s.len()).sum();
    let pred_count: usize = p.values().map(|s| s.len()).sum();
    let mut matched: BTreeSet<(&str, &str)> = BTreeSet::new();
    for (id, preds) in &p {
        let Some(golds) = g.get(id) else { continue };
        for pt in preds.iter() {
            if golds
                .iter()
                .any(|gt| gt.entity == pt.entity && gt.span.overlaps(&pt.span))
            {
                matched.insert((id, pt.entity.as_str()));
            }
        }
    }
    let overall = PrfReport::from_counts(matched.len(), pred_count, gold_count);
    Ok(EvalReport {
        regime: Regime::Entity,
        overall,
        per_kind: BTreeMap::from([("entity".to_string(), overall)]),
    })
}

pub fn evaluate(regime: Regime, gold: &[LinkingGold], pred: &[LinkingGold]) -> Result<EvalReport> {
    match regime {
        Regime::Schema => schema_linking_metrics(gold, pred),
        Regime::Entity => weak_match_entity_metrics(gold, pred),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ConceptKind, Span};

    fn schema(id: &str, tuples: &[(&str, usize)]) -> LinkingGold {
        LinkingGold {
            instance_id: id.into(),
            tuples: LinkTuples::Schema(
                tuples
                    .iter()
                    .map(|(c, t)| SchemaTuple {
                        concept: c.to_string(),
                        token: *t,
                        kind: ConceptKind::Column,
                    })
                    .collect(),
            ),
        }
    }

    fn entity(id: &str, tuples: &[(&str, usize, usize)]) -> LinkingGold {
        LinkingGold {
            instance_id: id.into(),
            tuples: LinkTuples::Entity(
                tuples
                    .iter()
                    .map(|(e, s, t)| EntityTuple {
                        entity: e.to_string(),
                        span: Span { start: *s, end: *t },
                    })
                    .collect(),
            ),
        }
    }

    #[test]
    fn schema_half_right() {
        let r = schema_linking_metrics(
            &[schema("q", &[("c", 1), ("c", 2)])],
            &[schema("q", &[("c", 1), ("c", 9)])],
        )
        .unwrap();
        assert_eq!((r.overall.precision, r.overall.recall, r.overall.f1), (0.5, 0.5, 0.5));
        assert_eq!(r.overall.tp, 1);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let r = schema_linking_metrics(&[schema("q", &[("c", 1)])], &[schema("q", &[])]).unwrap();
        assert_eq!((r.overall.precision, r.overall.recall, r.overall.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn identity_scores_one() {
        let g = [schema("q", &[("a", 0), ("b", 3)]), schema("r", &[("a", 1)])];
        let r = schema_linking_metrics(&g, &g).unwrap();
        assert_eq!(r.overall.f1, 1.0);
        assert_eq!(r.per_kind["column"].f1, 1.0);
    }

    #[test]
    fn pooled_across_instances() {
        // same tuple in different instances is not a match
        let r = schema_linking_metrics(
            &[schema("q", &[("a", 0)]), schema("r", &[])],
            &[schema("r", &[("a", 0)])],
        )
        .unwrap();
        assert_eq!(r.overall.tp, 0);
    }

    #[test]
    fn unknown_prediction_id_is_rejected() {
        assert!(schema_linking_metrics(&[schema("q", &[])], &[schema("zz", &[])]).is_err());
    }

    #[test]
    fn weak_match_overlap_rules() {
        let g = [entity("q", &[("e", 2, 5)])];
        let hit = weak_match_entity_metrics(&g, &[entity("q", &[("e", 4, 6)])]).unwrap();
        assert_eq!(hit.overall.tp, 1);
        let miss = weak_match_entity_metrics(&g, &[entity("q", &[("e", 5, 7)])]).unwrap();
        assert_eq!(miss.overall.tp, 0);
    }

    #[test]
    fn weak_match_manual_case() {
        let r = weak_match_entity_metrics(
            &[entity("q", &[("e1", 0, 2), ("e2", 3, 4)])],
            &[entity("q", &[("e1", 1, 3), ("e3", 3, 4)])],
        )
        .unwrap();
        assert_eq!((r.overall.precision, r.overall.recall), (0.5, 0.5));
    }

    #[test]
    fn duplicate_mentions_count_once() {
        let r = weak_match_entity_metrics(
            &[entity("q", &[("e", 0, 4)])],
            &[entity("q", &[("e", 0, 1), ("e", 2, 3)])],
        )
        .unwrap();
        assert_eq!((r.overall.tp, r.overall.pred_count), (1, 2));
        assert_eq!(r.overall.precision, 0.5);
    }

    #[test]
    fn table_renders_every_row() {
        let g = [schema("q", &[("a", 0)])];
        let t = schema_linking_metrics(&g, &g).unwrap().to_table();
        assert!(t.contains("column") && t.contains("overall") && t.contains("1.0000"));
    }
}
