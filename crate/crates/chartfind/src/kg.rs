//! Biomedical knowledge graph: concepts with surface terms and typed directed
//! relations between them.
//!
//! Only concepts of the six admissible semantic types participate in term
//! lookup (mention seeds); traversal follows stored edges head-to-tail only.
//! Because `is_a` edges are stored in the hypernym direction and never walked
//! in reverse, hyponym terms can never surface from an expansion — the paper's
//! "no hyponyms" rule is structural here, not a filter.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic types whose concepts are eligible as mention seeds.
pub const ADMISSIBLE_SEMANTIC_TYPES: [&str; 6] = [
    "Laboratory Procedure",
    "Sign, Symptom, or Finding",
    "Diagnostic Procedure",
    "Therapeutic or Preventive Procedure",
    "Disease, Syndrome or Pathologic Function",
    "Chemical or Drug",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub concept_id: String,
    pub semantic_type: String,
    /// All lowercase surface terms; the first one is the preferred term.
    pub terms: Vec<String>,
}

impl Concept {
    pub fn preferred_term(&self) -> &str {
        &self.terms[0]
    }
}

/// Directed relation kinds. Inverse pairs (`may_treat` / `may_be_treated_by`,
/// ...) are stored as separate edges; nothing infers one from the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    IsA,
    MayTreat,
    MayBeTreatedBy,
    MayDiagnose,
    MayBeDiagnosedBy,
    MayCause,
    MayBeCausedBy,
}

impl RelationKind {
    pub const ALL: [RelationKind; 7] = [
        RelationKind::IsA,
        RelationKind::MayTreat,
        RelationKind::MayBeTreatedBy,
        RelationKind::MayDiagnose,
        RelationKind::MayBeDiagnosedBy,
        RelationKind::MayCause,
        RelationKind::MayBeCausedBy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::IsA => "is_a",
            RelationKind::MayTreat => "may_treat",
            RelationKind::MayBeTreatedBy => "may_be_treated_by",
            RelationKind::MayDiagnose => "may_diagnose",
            RelationKind::MayBeDiagnosedBy => "may_be_diagnosed_by",
            RelationKind::MayCause => "may_cause",
            RelationKind::MayBeCausedBy => "may_be_caused_by",
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RelationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownRelationKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Relation {
    pub head: String,
    pub kind: RelationKind,
    pub tail: String,
}

/// Neighbor classes used by Stage-I expansion. `Synonym` stays within the
/// seed concept; `Hypernym` follows `is_a`; `Related` follows every non-`is_a`
/// kind. There is deliberately no hyponym class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborClass {
    Synonym,
    Hypernym,
    Related,
}

#[derive(Debug, Clone, Default)]
pub struct SemanticTypeFilter {
    admissible: BTreeSet<String>,
}

impl SemanticTypeFilter {
    /// The paper's six admissible types.
    pub fn standard() -> Self {
        SemanticTypeFilter {
            admissible: ADMISSIBLE_SEMANTIC_TYPES
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    pub fn custom(types: impl IntoIterator<Item = String>) -> Self {
        SemanticTypeFilter {
            admissible: types.into_iter().collect(),
        }
    }

    pub fn admits(&self, semantic_type: &str) -> bool {
        self.admissible.contains(semantic_type)
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    concepts: BTreeMap<String, Concept>,
    // term -> ids of *admissible* concepts carrying it
    term_index: BTreeMap<String, BTreeSet<String>>,
    edges: BTreeMap<String, Vec<(RelationKind, String)>>,
    relations: Vec<Relation>,
    filter: SemanticTypeFilter,
}

impl KnowledgeGraph {
    /// Builds and validates a graph. Terms are lowercased and deduplicated
    /// (keeping first occurrence, so the preferred term stays first).
    pub fn from_parts(
        concepts: Vec<Concept>,
        relations: Vec<Relation>,
        filter: SemanticTypeFilter,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for mut c in concepts {
            if c.terms.is_empty() {
                return Err(Error::Config(format!(
                    "concept {} has no terms",
                    c.concept_id
                )));
            }
            let mut seen = BTreeSet::new();
            c.terms = c
                .terms
                .iter()
                .map(|t| t.to_lowercase())
                .filter(|t| !t.is_empty() && seen.insert(t.clone()))
                .collect();
            if c.terms.is_empty() {
                return Err(Error::Config(format!(
                    "concept {} has only empty terms",
                    c.concept_id
                )));
            }
            if map.insert(c.concept_id.clone(), c.clone()).is_some() {
                return Err(Error::DuplicateConcept(c.concept_id));
            }
        }

        let mut edges: BTreeMap<String, Vec<(RelationKind, String)>> = BTreeMap::new();
        let mut sorted_relations = relations;
        sorted_relations.sort();
        sorted_relations.dedup();
        for r in &sorted_relations {
            if !map.contains_key(&r.head) {
                return Err(Error::UnknownConcept(r.head.clone()));
            }
            if !map.contains_key(&r.tail) {
                return Err(Error::UnknownConcept(r.tail.clone()));
            }
            if r.head == r.tail {
                return Err(Error::Config(format!(
                    "self-relation {} {} {}",
                    r.head, r.kind, r.tail
                )));
            }
            edges
                .entry(r.head.clone())
                .or_default()
                .push((r.kind, r.tail.clone()));
        }

        let mut term_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for c in map.values() {
            if filter.admits(&c.semantic_type) {
                for t in &c.terms {
                    term_index
                        .entry(t.clone())
                        .or_default()
                        .insert(c.concept_id.clone());
                }
            }
        }

        Ok(KnowledgeGraph {
            concepts: map,
            term_index,
            edges,
            relations: sorted_relations,
            filter,
        })
    }

    pub fn concept(&self, id: &str) -> Option<&Concept> {
        self.concepts.get(id)
    }

    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.values()
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn is_admissible(&self, id: &str) -> bool {
        self.concepts
            .get(id)
            .is_some_and(|c| self.filter.admits(&c.semantic_type))
    }

    /// Ids of admissible concepts carrying `term` (exact, lowercase match).
    pub fn lookup_term(&self, term: &str) -> BTreeSet<String> {
        self.term_index.get(term).cloned().unwrap_or_default()
    }

    /// Every (term, concept_id) pair of the admissible vocabulary.
    pub fn admissible_terms(&self) -> impl Iterator<Item = (&str, &BTreeSet<String>)> {
        self.term_index.iter().map(|(t, ids)| (t.as_str(), ids))
    }

    /// Neighbor terms of one class, keyed by term with the concepts that
    /// contributed it (for `Synonym` the contributing concept is the seed).
    ///
    /// For `Synonym`, `seed_surface` (the surface the caller already holds) is
    /// excluded — synonyny is relative to a surface, not just a concept. For
    /// the other classes it is ignored.
    pub fn neighbors(
        &self,
        concept_id: &str,
        class: NeighborClass,
        seed_surface: Option<&str>,
    ) -> Result<BTreeMap<String, BTreeSet<String>>> {
        let concept = self
            .concepts
            .get(concept_id)
            .ok_or_else(|| Error::UnknownConcept(concept_id.to_string()))?;
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        match class {
            NeighborClass::Synonym => {
                for t in &concept.terms {
                    if Some(t.as_str()) != seed_surface {
                        out.entry(t.clone())
                            .or_default()
                            .insert(concept_id.to_string());
                    }
                }
            }
            NeighborClass::Hypernym | NeighborClass::Related => {
                let want_is_a = class == NeighborClass::Hypernym;
                for (kind, tail) in self.edges.get(concept_id).into_iter().flatten() {
                    if (*kind == RelationKind::IsA) != want_is_a {
                        continue;
                    }
                    let tail_concept = &self.concepts[tail];
                    for t in &tail_concept.terms {
                        out.entry(t.clone()).or_default().insert(tail.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Uniform draw from the concept's terms minus `exclude`; `None` when the
    /// concept has no other term. Deterministic for a given rng state.
    pub fn random_synonym(
        &self,
        concept_id: &str,
        exclude: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<String>> {
        let concept = self
            .concepts
            .get(concept_id)
            .ok_or_else(|| Error::UnknownConcept(concept_id.to_string()))?;
        let candidates: Vec<&String> = concept.terms.iter().filter(|t| *t != exclude).collect();
        if candidates.is_empty() {
            return Ok(None);
        }
        let pick = rng.random_range(0..candidates.len());
        Ok(Some(candidates[pick].clone()))
    }

    /// Writes `concepts.jsonl` + `relations.tsv`; `load_kg` on the outputs
    /// reconstructs an equal graph.
    pub fn dump(&self, concepts_path: &Path, relations_path: &Path) -> Result<()> {
        let rows: Vec<&Concept> = self.concepts.values().collect();
        let file = File::create(concepts_path).map_err(|e| Error::io(concepts_path, e))?;
        let mut w = BufWriter::new(file);
        for c in rows {
            let line = serde_json::to_string(c)
                .map_err(|e| Error::Config(format!("serialize concept: {e}")))?;
            w.write_all(line.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .map_err(|e| Error::io(concepts_path, e))?;
        }
        w.flush().map_err(|e| Error::io(concepts_path, e))?;

        let file = File::create(relations_path).map_err(|e| Error::io(relations_path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.relations {
            writeln!(w, "{}\t{}\t{}", r.head, r.kind, r.tail)
                .map_err(|e| Error::io(relations_path, e))?;
        }
        w.flush().map_err(|e| Error::io(relations_path, e))
    }
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.concepts == other.concepts
            && self.relations == other.relations
            && self.filter.admissible == other.filter.admissible
    }
}

/// Loads a graph from `concepts.jsonl` + `relations.tsv` with the standard
/// admissibility filter.
pub fn load_kg(concepts_path: &Path, relations_path: &Path) -> Result<KnowledgeGraph> {
    load_kg_with_filter(concepts_path, relations_path, SemanticTypeFilter::standard())
}

pub fn load_kg_with_filter(
    concepts_path: &Path,
    relations_path: &Path,
    filter: SemanticTypeFilter,
) -> Result<KnowledgeGraph> {
    let file = File::open(concepts_path).map_err(|e| Error::io(concepts_path, e))?;
    let mut concepts = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(concepts_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Concept = serde_json::from_str(&line)
            .map_err(|e| Error::parse(concepts_path, idx + 1, format!("bad concept: {e}")))?;
        concepts.push(c);
    }

    let file = File::open(relations_path).map_err(|e| Error::io(relations_path, e))?;
    let mut relations = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(relations_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::parse(
                relations_path,
                idx + 1,
                format!("expected 3 tab-separated columns, got {}", cols.len()),
            ));
        }
        relations.push(Relation {
            head: cols[0].to_string(),
            kind: cols[1].parse()?,
            tail: cols[2].to_string(),
        });
    }

    KnowledgeGraph::from_parts(concepts, relations, filter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn concept(id: &str, ty: &str, terms: &[&str]) -> Concept {
        Concept {
            concept_id: id.to_string(),
            semantic_type: ty.to_string(),
            terms: terms.iter().map(|t| t.to_string()).collect(),
        }
    }

    fn rel(head: &str, kind: RelationKind, tail: &str) -> Relation {
        Relation {
            head: head.to_string(),
            kind,
            tail: tail.to_string(),
        }
    }

    /// heart failure is_a heart disease; treated by furosemide; causes edema.
    /// "cold" is carried by two concepts; one concept is inadmissible.
    fn sample_kg() -> KnowledgeGraph {
        let concepts = vec![
            concept(
                "C01",
                "Disease, Syndrome or Pathologic Function",
                &["heart failure", "hf", "cardiac failure"],
            ),
            concept("C02", "Disease, Syndrome or Pathologic Function", &["heart disease"]),
            concept("C03", "Chemical or Drug", &["furosemide", "lasix"]),
            concept("C04", "Sign, Symptom, or Finding", &["edema", "cold"]),
            concept("C05", "Disease, Syndrome or Pathologic Function", &["common cold", "cold"]),
            concept("C06", "Organization", &["cardiology clinic"]),
            concept("C07", "Laboratory Procedure", &["bnp test"]),
        ];
        let relations = vec![
            rel("C01", RelationKind::IsA, "C02"),
            rel("C01", RelationKind::MayBeTreatedBy, "C03"),
            rel("C03", RelationKind::MayTreat, "C01"),
            rel("C01", RelationKind::MayCause, "C04"),
            rel("C04", RelationKind::MayBeCausedBy, "C01"),
            rel("C01", RelationKind::MayBeDiagnosedBy, "C07"),
            rel("C07", RelationKind::MayDiagnose, "C01"),
        ];
        KnowledgeGraph::from_parts(concepts, relations, SemanticTypeFilter::standard()).unwrap()
    }

    #[test]
    fn lookup_respects_admissibility_and_sharing() {
        let kg = sample_kg();
        let ids = kg.lookup_term("cold");
        assert_eq!(
            ids.into_iter().collect::<Vec<_>>(),
            vec!["C04".to_string(), "C05".to_string()]
        );
        assert!(kg.lookup_term("cardiology clinic").is_empty());
        assert!(kg.lookup_term("spurious").is_empty());
        assert!(!kg.is_admissible("C06"));
        assert!(kg.is_admissible("C01"));
    }

    #[test]
    fn synonym_neighbors_exclude_the_seed_surface() {
        let kg = sample_kg();
        let syns = kg
            .neighbors("C01", NeighborClass::Synonym, Some("hf"))
            .unwrap();
        let terms: Vec<&String> = syns.keys().collect();
        assert_eq!(terms, ["cardiac failure", "heart failure"]);
    }

    #[test]
    fn hypernyms_follow_is_a_and_never_reverse() {
        let kg = sample_kg();
        let hyper = kg.neighbors("C01", NeighborClass::Hypernym, None).unwrap();
        assert_eq!(hyper.keys().collect::<Vec<_>>(), ["heart disease"]);
        // C02 has no outgoing is_a: expanding the hypernym never yields the
        // hyponym C01's terms.
        let from_parent = kg.neighbors("C02", NeighborClass::Hypernym, None).unwrap();
        assert!(from_parent.is_empty());
        let related_of_parent = kg.neighbors("C02", NeighborClass::Related, None).unwrap();
        assert!(related_of_parent.is_empty());
    }

    #[test]
    fn related_covers_every_non_is_a_kind() {
        let kg = sample_kg();
        let related = kg.neighbors("C01", NeighborClass::Related, None).unwrap();
        let terms: Vec<&String> = related.keys().collect();
        assert_eq!(terms, ["bnp test", "cold", "edema", "furosemide", "lasix"]);
        assert_eq!(
            related["furosemide"].iter().collect::<Vec<_>>(),
            vec!["C03"]
        );
    }

    #[test]
    fn neighbors_of_unknown_concept_error() {
        let kg = sample_kg();
        assert!(matches!(
            kg.neighbors("CXX", NeighborClass::Synonym, None),
            Err(Error::UnknownConcept(id)) if id == "CXX"
        ));
    }

    #[test]
    fn random_synonym_is_uniform_and_seed_stable() {
        let kg = sample_kg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for _ in 0..2000 {
            let t = kg
                .random_synonym("C01", "heart failure", &mut rng)
                .unwrap()
                .unwrap();
            *counts.entry(t).or_default() += 1;
        }
        assert_eq!(counts.len(), 2);
        for (_, n) in &counts {
            // 2000 draws over 2 options: 3 sigma ~ 67
            assert!((*n as i64 - 1000).abs() < 100, "counts {counts:?}");
        }
        // single-term concept: no synonym to draw
        assert_eq!(
            kg.random_synonym("C02", "heart disease", &mut rng).unwrap(),
            None
        );
        // same seed, same draws
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..16 {
            assert_eq!(
                kg.random_synonym("C01", "hf", &mut a).unwrap(),
                kg.random_synonym("C01", "hf", &mut b).unwrap()
            );
        }
    }

    #[test]
    fn validation_rejects_bad_graphs() {
        let c = vec![concept("A", "Chemical or Drug", &["x"])];
        let err = KnowledgeGraph::from_parts(
            c.clone(),
            vec![rel("A", RelationKind::MayTreat, "B")],
            SemanticTypeFilter::standard(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownConcept(id) if id == "B"));

        let err = KnowledgeGraph::from_parts(
            c.clone(),
            vec![rel("A", RelationKind::IsA, "A")],
            SemanticTypeFilter::standard(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        let dup = vec![c[0].clone(), c[0].clone()];
        let err = KnowledgeGraph::from_parts(dup, vec![], SemanticTypeFilter::standard()).unwrap_err();
        assert!(matches!(err, Error::DuplicateConcept(id) if id == "A"));

        let empty = vec![concept("A", "Chemical or Drug", &[])];
        assert!(KnowledgeGraph::from_parts(empty, vec![], SemanticTypeFilter::standard()).is_err());
    }

    #[test]
    fn relation_kind_round_trips_all_seven() {
        for kind in RelationKind::ALL {
            assert_eq!(kind.as_str().parse::<RelationKind>().unwrap(), kind);
        }
        assert!(matches!(
            "part_of".parse::<RelationKind>(),
            Err(Error::UnknownRelationKind(s)) if s == "part_of"
        ));
    }

    #[test]
    fn dump_load_round_trip() {
        let kg = sample_kg();
        let dir = tempfile::tempdir().unwrap();
        let cp = dir.path().join("concepts.jsonl");
        let rp = dir.path().join("relations.tsv");
        kg.dump(&cp, &rp).unwrap();
        let back = load_kg(&cp, &rp).unwrap();
        assert_eq!(kg, back);
    }

    #[test]
    fn terms_are_lowercased_and_deduped_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let cp = dir.path().join("concepts.jsonl");
        let rp = dir.path().join("relations.tsv");
        std::fs::write(
            &cp,
            "{\"concept_id\":\"Z\",\"semantic_type\":\"Chemical or Drug\",\"terms\":[\"Aspirin\",\"aspirin\",\"ASA\"]}\n",
        )
        .unwrap();
        std::fs::write(&rp, "").unwrap();
        let kg = load_kg(&cp, &rp).unwrap();
        let z = kg.concept("Z").unwrap();
        assert_eq!(z.terms, ["aspirin", "asa"]);
        assert_eq!(z.preferred_term(), "aspirin");
    }

    #[test]
    fn bad_relation_rows_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let cp = dir.path().join("concepts.jsonl");
        let rp = dir.path().join("relations.tsv");
        std::fs::write(
            &cp,
            "{\"concept_id\":\"A\",\"semantic_type\":\"Chemical or Drug\",\"terms\":[\"x\"]}\n",
        )
        .unwrap();
        std::fs::write(&rp, "A\tmay_treat\n").unwrap();
        match load_kg(&cp, &rp) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
