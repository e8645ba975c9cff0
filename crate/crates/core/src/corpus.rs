//! Grounding instances, concept sets, dataset ingestion and weak-label
//! derivation.
//!
//! Gold links ride along on [`GroundingInstance`] for evaluation, but the
//! training code only ever sees a [`WeakView`], which has no path to them.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EtaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptKind {
    Table,
    Column,
    Value,
    Entity,
    Other,
}

impl fmt::Display for ConceptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConceptKind::Table => "table",
            ConceptKind::Column => "column",
            ConceptKind::Value => "value",
            ConceptKind::Entity => "entity",
            ConceptKind::Other => "other",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub tokens: Vec<String>,
    pub kind: ConceptKind,
}

impl Concept {
    pub fn new(id: impl Into<String>, tokens: Vec<String>, kind: ConceptKind) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(EtaError::Validation(format!("concept `{id}` has no tokens")));
        }
        Ok(Self { id, tokens, kind })
    }

    /// Single-token convenience constructor.
    pub fn word(id: &str, kind: ConceptKind) -> Self {
        Self {
            id: id.to_string(),
            tokens: vec![id.to_string()],
            kind,
        }
    }

    /// `|c_k|`
    pub fn width(&self) -> usize {
        self.tokens.len()
    }
}

/// An ordered set of concepts with unique ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ConceptSet(Vec<Concept>);

impl ConceptSet {
    pub fn new(concepts: Vec<Concept>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &concepts {
            if c.tokens.is_empty() {
                return Err(EtaError::Validation(format!("concept `{}` has no tokens", c.id)));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(EtaError::Validation(format!("duplicate concept id `{}`", c.id)));
            }
        }
        Ok(Self(concepts))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Concept> {
        self.0.iter()
    }

    pub fn get(&self, k: usize) -> Option<&Concept> {
        self.0.get(k)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.0.iter().position(|c| c.id == id)
    }

    pub fn as_slice(&self) -> &[Concept] {
        &self.0
    }
}

impl std::ops::Index<usize> for ConceptSet {
    type Output = Concept;
    fn index(&self, k: usize) -> &Concept {
        &self.0[k]
    }
}

impl<'a> IntoIterator for &'a ConceptSet {
    type Item = &'a Concept;
    type IntoIter = std::slice::Iter<'a, Concept>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GoldLink {
    pub token: usize,
    pub concept: String,
}

/// Anything that can be fed to an encoder: a question and its concepts.
pub trait Question: Sync {
    fn id(&self) -> &str;
    fn question_tokens(&self) -> &[String];
    fn concepts(&self) -> &ConceptSet;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingInstance {
    id: String,
    question_tokens: Vec<String>,
    concepts: ConceptSet,
    weak_labels: Vec<bool>,
    sql: Option<String>,
    labels_from_sql: bool,
    gold_links: Option<Vec<GoldLink>>,
}

impl GroundingInstance {
    pub fn new(
        id: impl Into<String>,
        question_tokens: Vec<String>,
        concepts: ConceptSet,
        weak_labels: Vec<bool>,
        gold_links: Option<Vec<GoldLink>>,
    ) -> Result<Self> {
        let inst = Self {
            id: id.into(),
            question_tokens,
            concepts,
            weak_labels,
            sql: None,
            labels_from_sql: false,
            gold_links,
        };
        inst.validate()
            .map_err(|(field, msg)| EtaError::Validation(format!("instance `{}`: {field}: {msg}", inst.id)))?;
        Ok(inst)
    }

    /// Attaches the logical form the labels came from.
    pub fn with_sql(mut self, sql: impl Into<String>) -> Self {
        self.sql = Some(sql.into());
        self
    }

    fn validate(&self) -> std::result::Result<(), (String, String)> {
        if self.question_tokens.is_empty() {
            return Err(("question_tokens".into(), "must be non-empty".into()));
        }
        if self.concepts.is_empty() {
            return Err(("concepts".into(), "must be non-empty".into()));
        }
        if self.weak_labels.len() != self.concepts.len() {
            return Err((
                "weak_labels".into(),
                format!(
                    "has {} entries for {} concepts",
                    self.weak_labels.len(),
                    self.concepts.len()
                ),
            ));
        }
        for (i, g) in self.gold_links.iter().flatten().enumerate() {
            if g.token >= self.question_tokens.len() {
                return Err((
                    format!("gold_links[{i}].token"),
                    format!("{} out of range for {} tokens", g.token, self.question_tokens.len()),
                ));
            }
            if self.concepts.index_of(&g.concept).is_none() {
                return Err((
                    format!("gold_links[{i}].concept"),
                    format!("unknown concept `{}`", g.concept),
                ));
            }
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn question_tokens(&self) -> &[String] {
        &self.question_tokens
    }

    pub fn concepts(&self) -> &ConceptSet {
        &self.concepts
    }

    pub fn weak_labels(&self) -> &[bool] {
        &self.weak_labels
    }

    pub fn sql(&self) -> Option<&str> {
        self.sql.as_deref()
    }

    /// Evaluation-only gold links.
    pub fn gold_links(&self) -> Option<&[GoldLink]> {
        self.gold_links.as_deref()
    }

    /// The training-visible part of this instance.
    pub fn weak_view(&self) -> WeakView<'_> {
        WeakView {
            id: &self.id,
            question_tokens: &self.question_tokens,
            concepts: &self.concepts,
            weak_labels: &self.weak_labels,
        }
    }

    pub fn to_json_line(&self) -> String {
        let raw = RawInstance {
            id: self.id.clone(),
            question_tokens: self.question_tokens.clone(),
            concepts: self.concepts.as_slice().to_vec(),
            weak_labels: (!self.labels_from_sql).then(|| self.weak_labels.clone()),
            sql: self.sql.clone(),
            gold_links: self.gold_links.clone(),
        };
        serde_json::to_string(&raw).expect("instance serializes")
    }
}

impl Question for GroundingInstance {
    fn id(&self) -> &str {
        &self.id
    }
    fn question_tokens(&self) -> &[String] {
        &self.question_tokens
    }
    fn concepts(&self) -> &ConceptSet {
        &self.concepts
    }
}

/// Borrowed view of an instance without gold links.
#[derive(Debug, Clone, Copy)]
pub struct WeakView<'a> {
    pub id: &'a str,
    pub question_tokens: &'a [String],
    pub concepts: &'a ConceptSet,
    pub weak_labels: &'a [bool],
}

impl Question for WeakView<'_> {
    fn id(&self) -> &str {
        self.id
    }
    fn question_tokens(&self) -> &[String] {
        self.question_tokens
    }
    fn concepts(&self) -> &ConceptSet {
        self.concepts
    }
}

pub fn weak_views(instances: &[GroundingInstance]) -> Vec<WeakView<'_>> {
    instances.iter().map(GroundingInstance::weak_view).collect()
}

/// Half-open token span `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(EtaError::Validation(format!("invalid span [{start}, {end})")));
        }
        Ok(Self { start, end })
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SchemaTuple {
    pub concept: String,
    pub token: usize,
    pub kind: ConceptKind,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityTuple {
    pub entity: String,
    pub span: Span,
}

/// Link tuples of one instance, gold or predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkTuples {
    Schema(BTreeSet<SchemaTuple>),
    Entity(BTreeSet<EntityTuple>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkingGold {
    #[serde(rename = "id")]
    pub instance_id: String,
    pub tuples: LinkTuples,
}

impl LinkingGold {
    /// Validates entity spans against a question length.
    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        match &self.tuples {
            LinkTuples::Schema(ts) => {
                for t in ts {
                    if t.token >= n_tokens {
                        return Err(EtaError::Validation(format!(
                            "{}: token {} out of range",
                            self.instance_id, t.token
                        )));
                    }
                }
            }
            LinkTuples::Entity(ts) => {
                for t in ts {
                    if t.span.start >= t.span.end || t.span.end > n_tokens {
                        return Err(EtaError::Validation(format!(
                            "{}: span [{}, {}) invalid for {} tokens",
                            self.instance_id, t.span.start, t.span.end, n_tokens
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawInstance {
    id: String,
    question_tokens: Vec<String>,
    concepts: Vec<Concept>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weak_labels: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_links: Option<Vec<GoldLink>>,
}

fn parse_line(label: &str, line_no: usize, line: &str) -> Result<GroundingInstance> {
    let parse_err = |field: String, message: String| EtaError::Parse {
        path: label.to_string(),
        line: line_no,
        field,
        message,
    };
    let de = &mut serde_json::Deserializer::from_str(line);
    let raw: RawInstance = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner().to_string();
        let mut field = e.path().to_string();
        if let Some(rest) = inner.strip_prefix("missing field `") {
            let name = rest.split('`').next().unwrap_or_default();
            field = if field == "." {
                name.to_string()
            } else {
                format!("{field}.{name}")
            };
        }
        parse_err(field, inner)
    })?;

    let (weak_labels, labels_from_sql) = match (raw.weak_labels, &raw.sql) {
        (Some(l), _) => (l, false),
        (None, Some(sql)) => {
            let set = ConceptSet(raw.concepts.clone());
            (derive_weak_labels(sql, &set), true)
        }
        (None, None) => {
            return Err(parse_err(
                "weak_labels".into(),
                "either `weak_labels` or `sql` is required".into(),
            ))
        }
    };
    let mut seen = HashSet::new();
    for (i, c) in raw.concepts.iter().enumerate() {
        if c.tokens.is_empty() {
            return Err(parse_err(format!("concepts[{i}].tokens"), "must be non-empty".into()));
        }
        if !seen.insert(c.id.as_str()) {
            return Err(parse_err(
                format!("concepts[{i}].id"),
                format!("duplicate concept id `{}`", c.id),
            ));
        }
    }
    let inst = GroundingInstance {
        id: raw.id,
        question_tokens: raw.question_tokens,
        concepts: ConceptSet(raw.concepts),
        weak_labels,
        sql: raw.sql,
        labels_from_sql,
        gold_links: raw.gold_links,
    };
    inst.validate().map_err(|(f, m)| parse_err(f, m))?;
    Ok(inst)
}

/// Parses JSON-lines from any reader; `label` names the source in errors.
pub fn parse_dataset(reader: impl BufRead, label: &str) -> Result<Vec<GroundingInstance>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| EtaError::io(label, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = parse_line(label, i + 1, &line)?;
        if !ids.insert(inst.id.clone()) {
            return Err(EtaError::Validation(format!(
                "{label}:{}: duplicate instance id `{}`",
                i + 1,
                inst.id
            )));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<GroundingInstance>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| EtaError::io(path, e))?;
    parse_dataset(BufReader::new(file), &path.display().to_string())
}

pub fn write_dataset(path: impl AsRef<Path>, instances: &[GroundingInstance]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| EtaError::io(path, e))?);
    for inst in instances {
        writeln!(f, "{}", inst.to_json_line()).map_err(|e| EtaError::io(path, e))?;
    }
    f.flush().map_err(|e| EtaError::io(path, e))
}

/// Reads a JSON-lines file of [`LinkingGold`] records.
pub fn read_linking_gold(path: impl AsRef<Path>) -> Result<Vec<LinkingGold>> {
    let path = path.as_ref();
    let label = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| EtaError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| EtaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let g: LinkingGold = serde_path_to_error::deserialize(de).map_err(|e| EtaError::Parse {
            path: label.clone(),
            line: i + 1,
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        out.push(g);
    }
    Ok(out)
}

pub fn write_linking_gold(path: impl AsRef<Path>, gold: &[LinkingGold]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| EtaError::io(path, e))?);
    for g in gold {
        writeln!(f, "{}", serde_json::to_string(g)?).map_err(|e| EtaError::io(path, e))?;
    }
    f.flush().map_err(|e| EtaError::io(path, e))
}

/// Lowercased identifier tokens: split on anything but alphanumerics and `_`.
pub fn identifier_tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Marks concept `k` as mentioned when its normalized id occurs as a run of
/// delimited identifier tokens in the logical form. Never fails.
pub fn derive_weak_labels(sql: &str, concepts: &ConceptSet) -> Vec<bool> {
    let sql_tokens = identifier_tokens(sql);
    concepts
        .iter()
        .map(|c| {
            let id = identifier_tokens(&c.id);
            !id.is_empty() && sql_tokens.windows(id.len()).any(|w| w == id.as_slice())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str]) -> ConceptSet {
        ConceptSet::new(ids.iter().map(|i| Concept::word(i, ConceptKind::Column)).collect()).unwrap()
    }

    #[test]
    fn weak_labels_from_identifiers() {
        assert_eq!(
            derive_weak_labels("SELECT name FROM singer", &set(&["name", "singer", "age"])),
            vec![true, true, false]
        );
        let sql = "SELECT semester_name FROM semesters JOIN student_enrolment ON \
                   semesters.semester_id = student_enrolment.semester_id";
        assert_eq!(
            derive_weak_labels(sql, &set(&["semester_name", "semesters", "student_enrolment", "age"])),
            vec![true, true, true, false]
        );
        assert_eq!(derive_weak_labels("SELECT AGE FROM t", &set(&["age"])), vec![true]);
        // a prefix of an identifier is not a mention
        assert_eq!(
            derive_weak_labels("SELECT semester_id FROM x", &set(&["semester"])),
            vec![false]
        );
        // dotted ids match as adjacent identifier tokens
        assert_eq!(
            derive_weak_labels("SELECT singer.name FROM singer", &set(&["singer.name", "song.name"])),
            vec![true, false]
        );
    }

    #[test]
    fn weak_labels_never_fail_on_garbage() {
        assert_eq!(derive_weak_labels("((( ;;; '", &set(&["a"])), vec![false]);
    }

    #[test]
    fn loads_single_line() {
        let line = r#"{"id":"q1","question_tokens":["how","old"],"concepts":[{"id":"age","tokens":["age"],"kind":"column"}],"weak_labels":[true]}"#;
        let v = parse_dataset(line.as_bytes(), "mem").unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].weak_labels(), &[true]);
    }

    #[test]
    fn missing_concepts_names_field() {
        let line = r#"{"id":"q1","question_tokens":["a"],"weak_labels":[]}"#;
        let err = parse_dataset(line.as_bytes(), "mem").unwrap_err();
        match err {
            EtaError::Parse { field, line, .. } => {
                assert_eq!(field, "concepts");
                assert_eq!(line, 1);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn nested_type_error_names_path() {
        let line = r#"{"id":"q","question_tokens":["a"],"concepts":[{"id":"x","tokens":["x"],"kind":"planet"}],"weak_labels":[true]}"#;
        let err = parse_dataset(format!("\n{line}").as_bytes(), "mem").unwrap_err();
        match err {
            EtaError::Parse { field, line, .. } => {
                assert_eq!(field, "concepts[0].kind");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn sql_derives_labels_and_explicit_labels_win() {
        let base = r#""id":"q","question_tokens":["a"],"concepts":[{"id":"x","tokens":["x"],"kind":"column"},{"id":"y","tokens":["y"],"kind":"table"}],"sql":"SELECT x FROM t""#;
        let derived = parse_dataset(format!("{{{base}}}").as_bytes(), "m").unwrap();
        assert_eq!(derived[0].weak_labels(), &[true, false]);
        let explicit = parse_dataset(format!("{{{base},\"weak_labels\":[false,true]}}").as_bytes(), "m").unwrap();
        assert_eq!(explicit[0].weak_labels(), &[false, true]);
    }

    #[test]
    fn rejects_bad_instances() {
        let dup = "{\"id\":\"q\",\"question_tokens\":[\"a\"],\"concepts\":[{\"id\":\"x\",\"tokens\":[\"x\"],\"kind\":\"column\"}],\"weak_labels\":[true]}";
        let two = format!("{dup}\n{dup}");
        assert!(matches!(
            parse_dataset(two.as_bytes(), "m"),
            Err(EtaError::Validation(_))
        ));
        let bad_gold = r#"{"id":"q","question_tokens":["a"],"concepts":[{"id":"x","tokens":["x"],"kind":"column"}],"weak_labels":[true],"gold_links":[{"token":3,"concept":"x"}]}"#;
        match parse_dataset(bad_gold.as_bytes(), "m").unwrap_err() {
            EtaError::Parse { field, .. } => assert_eq!(field, "gold_links[0].token"),
            e => panic!("{e}"),
        }
        let wrong_len = r#"{"id":"q","question_tokens":["a"],"concepts":[{"id":"x","tokens":["x"],"kind":"column"}],"weak_labels":[true,false]}"#;
        match parse_dataset(wrong_len.as_bytes(), "m").unwrap_err() {
            EtaError::Parse { field, .. } => assert_eq!(field, "weak_labels"),
            e => panic!("{e}"),
        }
        let empty_tokens = r#"{"id":"q","question_tokens":["a"],"concepts":[{"id":"x","tokens":[],"kind":"column"}],"weak_labels":[true]}"#;
        assert!(parse_dataset(empty_tokens.as_bytes(), "m").is_err());
    }

    #[test]
    fn spans_overlap_half_open() {
        let a = Span::new(2, 5).unwrap();
        assert!(a.overlaps(&Span::new(4, 6).unwrap()));
        assert!(!a.overlaps(&Span::new(5, 7).unwrap()));
        assert!(Span::new(3, 3).is_err());
    }
}
