//! Bundled synthetic benchmark: a pseudoword corpus, KG, abbreviation table,
//! and judged queries with planted retrieval structure.
//!
//! Every note is a sequence of fixed-length planned segments decorated with
//! the noise the cleaner must undo (case, duplicated punctuation, `___`
//! masks). With the default window/overlap, segment k of a note becomes
//! chunk k, so ground truth is known by construction — and is still *derived*
//! by running the real cleaning, chunking, and matching code, with the
//! derivation asserted equal to the plan. Query concepts are planted only in
//! their designated notes; vocabulary words are globally unique so no term
//! can match by accident.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{self, Chunk, Note};
use crate::error::{Error, Result};
use crate::evalkit::{Judgments, MatchType, QueryRecord, QueryType};
use crate::hashing::derive_seed;
use crate::kg::{
    Concept, KnowledgeGraph, Relation, RelationKind, SemanticTypeFilter,
};
use crate::matcher::{self, contains_word_boundary};

#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub background_notes: usize,
    pub window: usize,
    pub overlap: usize,
    pub mask_pattern: String,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            seed: 0xCA11,
            background_notes: 164,
            window: corpus::DEFAULT_WINDOW,
            overlap: corpus::DEFAULT_OVERLAP,
            mask_pattern: corpus::DEFAULT_MASK_PATTERN.to_string(),
        }
    }
}

pub struct Benchmark {
    pub kg: KnowledgeGraph,
    /// Raw (decorated) notes — the pipeline cleans them itself.
    pub notes: Vec<Note>,
    /// Chunks of the cleaned corpus, as the pipeline will derive them.
    pub chunks: Vec<Chunk>,
    /// abbreviation token -> full name (a KG term); feeds the mock client.
    pub abbreviations: BTreeMap<String, String>,
    pub single: Judgments,
    pub multi: Judgments,
}

impl Benchmark {
    /// Writes `notes.jsonl`, `concepts.jsonl`, `relations.tsv`,
    /// `abbreviations.json`, and the two query/qrels file pairs.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        corpus::write_notes(&dir.join("notes.jsonl"), &self.notes)?;
        self.kg
            .dump(&dir.join("concepts.jsonl"), &dir.join("relations.tsv"))?;
        let table = serde_json::to_string_pretty(&self.abbreviations)
            .map_err(|e| Error::Config(format!("serialize abbreviation table: {e}")))?;
        let path = dir.join("abbreviations.json");
        std::fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
        self.single.dump(
            &dir.join("queries_single.tsv"),
            &dir.join("qrels_single.tsv"),
        )?;
        self.multi
            .dump(&dir.join("queries_multi.tsv"), &dir.join("qrels_multi.tsv"))
    }
}

const FILLERS: &[&str] = &[
    "patient", "remains", "stable", "continue", "current", "plan", "monitor", "daily",
    "overnight", "morning", "evening", "review", "followup", "noted", "reports", "denies",
    "improved", "unchanged", "tolerating", "well", "diet", "advanced", "rest", "activity",
    "tolerated", "will", "team", "discussed", "family", "updated", "goals", "care", "today",
    "status", "exam", "unremarkable", "labs", "pending", "repeat", "check", "again", "later",
    "this", "week", "home", "discharge", "planning", "services", "arranged", "list",
    "reviewed", "no", "acute", "events", "vitals", "within", "normal", "limits", "afebrile",
    "comfortable", "resting", "ambulating", "assistance", "encouraged", "fluids", "intake",
    "adequate", "output", "recorded", "shift", "nursing", "notes", "signed", "seen", "by",
];

const SYLLABLES: &[&str] = &[
    "zor", "vek", "bli", "dra", "mun", "kel", "pra", "sho", "gat", "lim", "tur", "nox",
    "fep", "quil", "san", "bro", "vit", "hul", "mer", "pok", "jen", "wix", "dal", "cru",
];

const ABBREV_TOKENS: &[&str] = &[
    "qx", "zv", "kp", "vb", "jq", "wz", "xk", "qd", "zb", "kv", "pq", "xv", "jz", "qv",
    "zk", "wq", "bx", "vz", "kq", "xj", "qz", "vw", "zx", "jv",
];

const PUNCT: &[char] = &['.', ',', ';', ':'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Family {
    Category,
    Disease,
    Symptom,
    Therapy,
    Diagnostic,
    Lab,
    Drug,
    Inadmissible,
}

impl Family {
    fn prefix(self) -> &'static str {
        match self {
            Family::Category => "K",
            Family::Disease => "D",
            Family::Symptom => "S",
            Family::Therapy => "T",
            Family::Diagnostic => "P",
            Family::Lab => "L",
            Family::Drug => "R",
            Family::Inadmissible => "X",
        }
    }

    fn semantic_type(self) -> &'static str {
        match self {
            Family::Category | Family::Disease => "Disease, Syndrome or Pathologic Function",
            Family::Symptom => "Sign, Symptom, or Finding",
            Family::Therapy => "Therapeutic or Preventive Procedure",
            Family::Diagnostic => "Diagnostic Procedure",
            Family::Lab => "Laboratory Procedure",
            Family::Drug => "Chemical or Drug",
            Family::Inadmissible => "Organization",
        }
    }

    fn query_type(self) -> QueryType {
        match self {
            Family::Category | Family::Disease | Family::Symptom => QueryType::Disease,
            Family::Therapy | Family::Diagnostic | Family::Lab => QueryType::Procedure,
            Family::Drug => QueryType::Drug,
            Family::Inadmissible => unreachable!("inadmissible concepts are never queried"),
        }
    }
}

/// Deterministic concept construction with globally unique vocabulary words.
struct Factory {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
    counters: BTreeMap<&'static str, usize>,
    concepts: Vec<Concept>,
}

impl Factory {
    fn new(seed: u64) -> Self {
        let mut used: BTreeSet<String> = FILLERS.iter().map(|s| s.to_string()).collect();
        used.extend(ABBREV_TOKENS.iter().map(|s| s.to_string()));
        Factory {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used,
            counters: BTreeMap::new(),
            concepts: Vec::new(),
        }
    }

    fn word(&mut self) -> String {
        loop {
            let n = self.rng.random_range(2..=3usize);
            let mut w = String::new();
            for _ in 0..n {
                w.push_str(SYLLABLES[self.rng.random_range(0..SYLLABLES.len())]);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn phrase(&mut self, words: usize) -> String {
        let parts: Vec<String> = (0..words).map(|_| self.word()).collect();
        parts.join(" ")
    }

    /// New concept with one term per entry of `term_words` (words per term).
    fn concept(&mut self, family: Family, term_words: &[usize]) -> String {
        let counter = self.counters.entry(family.prefix()).or_insert(0);
        let id = format!("{}{:04}", family.prefix(), *counter);
        *counter += 1;
        let terms: Vec<String> = term_words.iter().map(|&w| self.phrase(w)).collect();
        self.concepts.push(Concept {
            concept_id: id.clone(),
            semantic_type: family.semantic_type().to_string(),
            terms,
        });
        id
    }

    fn concept_auto(&mut self, family: Family) -> String {
        let n_terms = self.rng.random_range(1..=3usize);
        let spec: Vec<usize> = (0..n_terms)
            .map(|_| self.rng.random_range(1..=3usize))
            .collect();
        self.concept(family, &spec)
    }

    fn preferred(&self, id: &str) -> String {
        self.concepts
            .iter()
            .find(|c| c.concept_id == id)
            .expect("factory-made concept")
            .terms[0]
            .clone()
    }

    fn term(&self, id: &str, idx: usize) -> String {
        self.concepts
            .iter()
            .find(|c| c.concept_id == id)
            .expect("factory-made concept")
            .terms[idx]
            .clone()
    }
}

#[derive(Debug, Clone)]
struct Plant {
    note: usize,
    segment: usize,
    phrase: String,
    /// Concept the matcher must report for this plant; `None` for
    /// abbreviation tokens and inadmissible terms.
    mention: Option<String>,
}

#[derive(Debug, Clone)]
struct PlannedQuery {
    id: String,
    concept: String,
    text: String,
    query_type: QueryType,
    match_type: MatchType,
    /// Note index for single-patient queries, `None` for multi-patient.
    scope: Option<usize>,
    plants: Vec<Plant>,
}

const SINGLE_NOTES: usize = 24;
const MULTI_NOTES: usize = 12;
const SINGLE_SEGMENTS: usize = 6;
const MULTI_SEGMENTS: usize = 5;

pub fn generate(spec: &BenchmarkSpec) -> Result<Benchmark> {
    let stride = spec
        .window
        .checked_sub(spec.overlap)
        .filter(|s| *s > 0)
        .ok_or_else(|| Error::Config("overlap must be smaller than window".into()))?;
    if spec.overlap * 2 >= spec.window || stride < 60 {
        return Err(Error::Config(
            "benchmark layout needs overlap < window/2 and a stride of at least 60 words".into(),
        ));
    }

    let mut f = Factory::new(derive_seed(spec.seed, "concepts"));
    let mut relations = Vec::new();
    let mut abbreviations = BTreeMap::new();
    let mut abbrev_cursor = 0usize;
    let next_token = |cursor: &mut usize| -> String {
        let t = ABBREV_TOKENS[*cursor].to_string();
        *cursor += 1;
        t
    };

    // -- query concepts --------------------------------------------------
    let mut queries: Vec<PlannedQuery> = Vec::new();
    let mut qid = 0usize;
    let next_qid = |qid: &mut usize, multi: bool| {
        *qid += 1;
        if multi {
            format!("mq{qid:02}")
        } else {
            format!("sq{qid:02}")
        }
    };

    // single-patient: 12 string, 12 synonym, 8 abbreviation, 8 implication,
    // 8 hyponym — two queries per reserved note.
    let string_families = [
        Family::Disease, Family::Disease, Family::Disease, Family::Disease, Family::Disease,
        Family::Disease, Family::Therapy, Family::Therapy, Family::Therapy, Family::Drug,
        Family::Drug, Family::Drug,
    ];
    for &fam in &string_families {
        let c = f.concept(fam, &[2, 2]);
        queries.push(PlannedQuery {
            id: next_qid(&mut qid, false),
            text: f.preferred(&c),
            query_type: fam.query_type(),
            match_type: MatchType::String,
            scope: None,
            plants: Vec::new(),
            concept: c,
        });
    }
    let synonym_families = string_families;
    for &fam in &synonym_families {
        let c = f.concept(fam, &[2, 2, 2]);
        queries.push(PlannedQuery {
            id: next_qid(&mut qid, false),
            text: f.term(&c, 1), // held out: never planted anywhere
            query_type: fam.query_type(),
            match_type: MatchType::Synonym,
            scope: None,
            plants: Vec::new(),
            concept: c,
        });
    }
    let abbrev_families = [
        Family::Disease, Family::Disease, Family::Disease, Family::Disease,
        Family::Therapy, Family::Therapy, Family::Drug, Family::Drug,
    ];
    let mut abbrev_query_tokens = Vec::new();
    for &fam in &abbrev_families {
        let c = f.concept(fam, &[2, 2]);
        let token = next_token(&mut abbrev_cursor);
        abbreviations.insert(token.clone(), f.preferred(&c));
        abbrev_query_tokens.push(token);
        queries.push(PlannedQuery {
            id: next_qid(&mut qid, false),
            text: f.preferred(&c),
            query_type: fam.query_type(),
            match_type: MatchType::Abbreviation,
            scope: None,
            plants: Vec::new(),
            concept: c,
        });
    }
    // implication: 6 disease queries (drug planted), 2 drug queries
    // (disease planted); both edge directions stored explicitly.
    let mut implication_partner = Vec::new();
    for i in 0..8usize {
        let (query_fam, partner_fam) = if i < 6 {
            (Family::Disease, Family::Drug)
        } else {
            (Family::Drug, Family::Disease)
        };
        let q = f.concept(query_fam, &[2, 2]);
        let p = f.concept(partner_fam, &[2, 2]);
        let (drug, disease) = if query_fam == Family::Drug { (&q, &p) } else { (&p, &q) };
        relations.push(Relation {
            head: drug.clone(),
            kind: RelationKind::MayTreat,
            tail: disease.clone(),
        });
        relations.push(Relation {
            head: disease.clone(),
            kind: RelationKind::MayBeTreatedBy,
            tail: drug.clone(),
        });
        implication_partner.push(p.clone());
        queries.push(PlannedQuery {
            id: next_qid(&mut qid, false),
            text: f.preferred(&q),
            query_type: query_fam.query_type(),
            match_type: MatchType::Implication,
            scope: None,
            plants: Vec::new(),
            concept: q,
        });
    }
    // hyponym: category queried, two dedicated children planted.
    let mut hyponym_children = Vec::new();
    for _ in 0..8usize {
        let k = f.concept(Family::Category, &[2, 2]);
        let a1 = f.concept(Family::Disease, &[2]);
        let a2 = f.concept(Family::Disease, &[2]);
        for child in [&a1, &a2] {
            relations.push(Relation {
                head: child.clone(),
                kind: RelationKind::IsA,
                tail: k.clone(),
            });
        }
        hyponym_children.push((a1, a2));
        queries.push(PlannedQuery {
            id: next_qid(&mut qid, false),
            text: f.preferred(&k),
            query_type: QueryType::Disease,
            match_type: MatchType::Hyponym,
            scope: None,
            plants: Vec::new(),
            concept: k,
        });
    }
    let n_single_queries = queries.len();
    assert_eq!(n_single_queries, SINGLE_NOTES * 2);

    // multi-patient: 6 string, 3 synonym, 3 abbreviation.
    let multi_plan: [(Family, MatchType); 12] = [
        (Family::Disease, MatchType::String),
        (Family::Disease, MatchType::String),
        (Family::Disease, MatchType::String),
        (Family::Drug, MatchType::String),
        (Family::Drug, MatchType::String),
        (Family::Therapy, MatchType::String),
        (Family::Disease, MatchType::Synonym),
        (Family::Disease, MatchType::Synonym),
        (Family::Disease, MatchType::Synonym),
        (Family::Disease, MatchType::Abbreviation),
        (Family::Disease, MatchType::Abbreviation),
        (Family::Drug, MatchType::Abbreviation),
    ];
    let mut multi_tokens: BTreeMap<usize, String> = BTreeMap::new();
    let mut mqid = 0usize;
    for (i, &(fam, mt)) in multi_plan.iter().enumerate() {
        let c = match mt {
            MatchType::Synonym => f.concept(fam, &[2, 2, 2]),
            _ => f.concept(fam, &[2, 2]),
        };
        let text = match mt {
            MatchType::Synonym => f.term(&c, 1),
            _ => f.preferred(&c),
        };
        if mt == MatchType::Abbreviation {
            let token = next_token(&mut abbrev_cursor);
            abbreviations.insert(token.clone(), f.preferred(&c));
            multi_tokens.insert(i, token);
        }
        queries.push(PlannedQuery {
            id: next_qid(&mut mqid, true),
            text,
            query_type: fam.query_type(),
            match_type: mt,
            scope: None,
            plants: Vec::new(),
            concept: c,
        });
    }

    // -- background concepts ----------------------------------------------
    // fill each family to its target size; everything created from here on
    // carries no relation to any query concept.
    let targets = [
        (Family::Category, 30usize),
        (Family::Disease, 150),
        (Family::Symptom, 60),
        (Family::Therapy, 60),
        (Family::Diagnostic, 40),
        (Family::Lab, 30),
        (Family::Drug, 115),
        (Family::Inadmissible, 15),
    ];
    let mut background: BTreeMap<Family, Vec<String>> = BTreeMap::new();
    for &(fam, target) in &targets {
        let have = *f.counters.get(fam.prefix()).unwrap_or(&0);
        let ids: Vec<String> = (have..target).map(|_| f.concept_auto(fam)).collect();
        background.entry(fam).or_default().extend(ids);
    }
    // background abbreviations over background concepts
    let mut background_tokens = Vec::new();
    for i in 0..6usize {
        let pool = &background[&Family::Disease];
        let c = pool[i * 7 % pool.len()].clone();
        let token = next_token(&mut abbrev_cursor);
        abbreviations.insert(token.clone(), f.preferred(&c));
        background_tokens.push((token, c));
    }
    // background relations stay within background pools
    {
        let rng = &mut f.rng;
        let pick = |rng: &mut ChaCha8Rng, pool: &[String]| -> String {
            pool[rng.random_range(0..pool.len())].clone()
        };
        let diseases = background[&Family::Disease].clone();
        let categories = background[&Family::Category].clone();
        let symptoms = background[&Family::Symptom].clone();
        let diagnostics = background[&Family::Diagnostic].clone();
        for d in &diseases {
            if rng.random::<f64>() < 0.7 {
                relations.push(Relation {
                    head: d.clone(),
                    kind: RelationKind::IsA,
                    tail: pick(rng, &categories),
                });
            }
        }
        for g in &background[&Family::Drug] {
            if rng.random::<f64>() < 0.6 {
                let d = pick(rng, &diseases);
                relations.push(Relation { head: g.clone(), kind: RelationKind::MayTreat, tail: d.clone() });
                relations.push(Relation { head: d, kind: RelationKind::MayBeTreatedBy, tail: g.clone() });
            }
        }
        for d in diseases.iter().take(40) {
            let s = pick(rng, &symptoms);
            if s != *d {
                relations.push(Relation { head: d.clone(), kind: RelationKind::MayCause, tail: s.clone() });
                relations.push(Relation { head: s, kind: RelationKind::MayBeCausedBy, tail: d.clone() });
            }
        }
        for p in diagnostics.iter().take(30) {
            let d = pick(rng, &diseases);
            relations.push(Relation { head: p.clone(), kind: RelationKind::MayDiagnose, tail: d.clone() });
            relations.push(Relation { head: d, kind: RelationKind::MayBeDiagnosedBy, tail: p.clone() });
        }
    }

    let kg = KnowledgeGraph::from_parts(f.concepts.clone(), relations, SemanticTypeFilter::standard())?;

    // -- plants -----------------------------------------------------------
    let total_notes = SINGLE_NOTES + MULTI_NOTES + spec.background_notes;
    let mut note_segments: Vec<usize> = Vec::with_capacity(total_notes);
    let mut plant_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "plants"));
    for i in 0..total_notes {
        note_segments.push(if i < SINGLE_NOTES {
            SINGLE_SEGMENTS
        } else if i < SINGLE_NOTES + MULTI_NOTES {
            MULTI_SEGMENTS
        } else {
            plant_rng.random_range(3..=6usize)
        });
    }

    // single queries: two per reserved note, with plants whose form depends
    // on the match type under test.
    let mut impl_cursor = 0usize;
    let mut hypo_cursor = 0usize;
    let mut abbrev_token_cursor = 0usize;
    for i in 0..n_single_queries {
        let note = i / 2;
        let segments: Vec<usize> = if i % 2 == 0 { vec![0, 2] } else { vec![3, 5] };
        let n_plants = if plant_rng.random::<f64>() < 0.5 { 1 } else { 2 };
        let q = queries[i].clone();
        queries[i].scope = Some(note);
        let plants: Vec<Plant> = match q.match_type {
            MatchType::String => segments[..n_plants]
                .iter()
                .map(|&s| Plant {
                    note,
                    segment: s,
                    phrase: q.text.clone(),
                    mention: Some(q.concept.clone()),
                })
                .collect(),
            MatchType::Synonym => {
                let preferred = f.preferred(&q.concept);
                segments[..n_plants]
                    .iter()
                    .map(|&s| Plant {
                        note,
                        segment: s,
                        phrase: preferred.clone(),
                        mention: Some(q.concept.clone()),
                    })
                    .collect()
            }
            MatchType::Abbreviation => {
                let token = abbrev_query_tokens[abbrev_token_cursor].clone();
                abbrev_token_cursor += 1;
                segments[..n_plants]
                    .iter()
                    .map(|&s| Plant {
                        note,
                        segment: s,
                        phrase: token.clone(),
                        mention: None,
                    })
                    .collect()
            }
            MatchType::Implication => {
                let partner = implication_partner[impl_cursor].clone();
                impl_cursor += 1;
                let phrase = f.preferred(&partner);
                segments[..n_plants]
                    .iter()
                    .map(|&s| Plant {
                        note,
                        segment: s,
                        phrase: phrase.clone(),
                        mention: Some(partner.clone()),
                    })
                    .collect()
            }
            MatchType::Hyponym => {
                let (a1, a2) = hyponym_children[hypo_cursor].clone();
                hypo_cursor += 1;
                vec![
                    Plant {
                        note,
                        segment: segments[0],
                        phrase: f.preferred(&a1),
                        mention: Some(a1.clone()),
                    },
                    Plant {
                        note,
                        segment: segments[1],
                        phrase: f.preferred(&a2),
                        mention: Some(a2.clone()),
                    },
                ]
            }
        };
        queries[i].plants = plants;
    }

    // multi queries: query m planted in multi notes m, m+1, m+2 (mod 12) at
    // segments 1, 2, 3 respectively.
    for m in 0..multi_plan.len() {
        let qi = n_single_queries + m;
        let q = queries[qi].clone();
        let phrase = match q.match_type {
            MatchType::String => q.text.clone(),
            MatchType::Synonym => f.preferred(&q.concept),
            MatchType::Abbreviation => multi_tokens[&m].clone(),
            _ => unreachable!(),
        };
        let mention = match q.match_type {
            MatchType::Abbreviation => None,
            _ => Some(q.concept.clone()),
        };
        let plants = (0..3usize)
            .map(|j| Plant {
                note: SINGLE_NOTES + (m + j) % MULTI_NOTES,
                segment: 1 + j,
                phrase: phrase.clone(),
                mention: mention.clone(),
            })
            .collect();
        queries[qi].plants = plants;
    }

    // index all plants per (note, segment); at most one query plant each.
    let mut planted: BTreeMap<(usize, usize), Vec<Plant>> = BTreeMap::new();
    for q in &queries {
        for p in &q.plants {
            planted.entry((p.note, p.segment)).or_default().push(p.clone());
        }
    }
    for plants in planted.values() {
        assert!(plants.len() == 1, "query plants must not collide");
    }

    // background plants for every remaining segment
    let admissible_bg: Vec<(String, Vec<String>)> = background
        .iter()
        .filter(|(fam, _)| **fam != Family::Inadmissible)
        .flat_map(|(_, ids)| ids.iter())
        .map(|id| {
            let c = kg.concept(id).expect("background concept");
            (id.clone(), c.terms.clone())
        })
        .collect();
    let inadmissible_bg: Vec<String> = background[&Family::Inadmissible]
        .iter()
        .map(|id| f.preferred(id))
        .collect();
    for (note, &segs) in note_segments.iter().enumerate() {
        for segment in 0..segs {
            let slot = planted.entry((note, segment)).or_default();
            if !slot.is_empty() {
                continue;
            }
            let n_plants = if plant_rng.random::<f64>() < 0.3 { 2 } else { 1 };
            for _ in 0..n_plants {
                let roll = plant_rng.random::<f64>();
                let plant = if roll < 0.85 {
                    let (id, terms) = &admissible_bg[plant_rng.random_range(0..admissible_bg.len())];
                    let term = terms[plant_rng.random_range(0..terms.len())].clone();
                    Plant { note, segment, phrase: term, mention: Some(id.clone()) }
                } else if roll < 0.95 {
                    let (token, _) = &background_tokens
                        [plant_rng.random_range(0..background_tokens.len())];
                    Plant { note, segment, phrase: token.clone(), mention: None }
                } else {
                    let term = inadmissible_bg[plant_rng.random_range(0..inadmissible_bg.len())].clone();
                    Plant { note, segment, phrase: term, mention: None }
                };
                slot.push(plant);
            }
        }
    }

    // -- note text --------------------------------------------------------
    let masks = corpus::compile_masks(&[spec.mask_pattern.clone()])?;
    let mut text_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "text"));
    let mut notes = Vec::with_capacity(total_notes);
    for (note, &segs) in note_segments.iter().enumerate() {
        let mut planned_words: Vec<String> = Vec::with_capacity(segs * stride);
        for segment in 0..segs {
            let plants = &planted[&(note, segment)];
            planned_words.extend(build_segment(stride, spec.overlap, plants, &mut text_rng));
        }
        let planned = planned_words.join(" ");
        let raw = decorate(&planned_words, &mut text_rng);
        let cleaned = corpus::clean_note(&raw, &masks);
        assert_eq!(cleaned, planned, "decoration must clean back to the plan (note {note})");
        notes.push(Note {
            note_id: format!("note{note:04}"),
            text: raw,
        });
    }

    // -- derive ground truth with the real pipeline code -------------------
    let chunks = corpus::chunk_corpus(notes.clone(), &masks, spec.window, spec.overlap);
    let automaton = matcher::build_automaton(&kg)?;
    let mut chunk_mentions: Vec<BTreeSet<(String, String)>> = Vec::with_capacity(chunks.len());
    let mut chunk_index: BTreeMap<(String, usize), usize> = BTreeMap::new();
    for (ci, chunk) in chunks.iter().enumerate() {
        let mentions = matcher::find_mentions(&automaton, &chunk.text);
        chunk_mentions.push(matcher::chunk_concepts(&mentions));
        chunk_index.insert((chunk.note_id.clone(), chunk.ordinal), ci);
    }
    // chunk k of a note is its segment k; every mention must be planted.
    for (note, &segs) in note_segments.iter().enumerate() {
        let note_id = format!("note{note:04}");
        for segment in 0..segs {
            let ci = chunk_index[&(note_id.clone(), segment)];
            let expected: BTreeSet<(String, String)> = planted[&(note, segment)]
                .iter()
                .filter_map(|p| p.mention.clone().map(|m| (m, p.phrase.clone())))
                .collect();
            assert_eq!(
                chunk_mentions[ci], expected,
                "matcher output must equal the plan for {note_id}#{segment}"
            );
        }
        assert_eq!(
            chunk_index.keys().filter(|(n, _)| *n == note_id).count(),
            segs,
            "one chunk per segment"
        );
    }

    // neighborhoods needed by the relevance rules
    let mut children_of: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut linked: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in kg.relations() {
        match r.kind {
            RelationKind::IsA => {
                children_of.entry(&r.tail).or_default().insert(&r.head);
            }
            RelationKind::MayTreat
            | RelationKind::MayBeTreatedBy
            | RelationKind::MayCause
            | RelationKind::MayBeCausedBy => {
                linked.entry(&r.head).or_default().insert(&r.tail);
                linked.entry(&r.tail).or_default().insert(&r.head);
            }
            _ => {}
        }
    }
    let empty: BTreeSet<&str> = BTreeSet::new();

    let mut single_queries = Vec::new();
    let mut single_rels = Vec::new();
    let mut multi_queries = Vec::new();
    let mut multi_rels = Vec::new();
    for q in &queries {
        let concept_terms: BTreeSet<&str> = kg
            .concept(&q.concept)
            .expect("query concept")
            .terms
            .iter()
            .map(String::as_str)
            .collect();
        let q_abbrevs: Vec<&str> = abbreviations
            .iter()
            .filter(|(_, full)| concept_terms.contains(full.as_str()))
            .map(|(a, _)| a.as_str())
            .collect();
        let children = children_of.get(q.concept.as_str()).unwrap_or(&empty);
        let links = linked.get(q.concept.as_str()).unwrap_or(&empty);

        let scope_chunks: Vec<usize> = match q.scope {
            Some(note) => {
                let note_id = format!("note{note:04}");
                (0..note_segments[note])
                    .map(|s| chunk_index[&(note_id.clone(), s)])
                    .collect()
            }
            None => (0..chunks.len()).collect(),
        };
        let mut derived: Vec<(String, MatchType)> = Vec::new();
        for &ci in &scope_chunks {
            let chunk = &chunks[ci];
            let mentioned: BTreeSet<&str> = chunk_mentions[ci]
                .iter()
                .map(|(c, _)| c.as_str())
                .collect();
            let mt = if contains_word_boundary(&chunk.text, &q.text) {
                Some(MatchType::String)
            } else if mentioned.contains(q.concept.as_str()) {
                Some(MatchType::Synonym)
            } else if q_abbrevs.iter().any(|a| contains_word_boundary(&chunk.text, a)) {
                Some(MatchType::Abbreviation)
            } else if children.iter().any(|c| mentioned.contains(c)) {
                Some(MatchType::Hyponym)
            } else if links.iter().any(|c| mentioned.contains(c)) {
                Some(MatchType::Implication)
            } else {
                None
            };
            if let Some(mt) = mt {
                derived.push((chunk.id(), mt));
            }
        }
        let planned_chunks: BTreeSet<String> = q
            .plants
            .iter()
            .map(|p| format!("note{:04}#{}", p.note, p.segment))
            .collect();
        let derived_chunks: BTreeSet<String> = derived.iter().map(|(c, _)| c.clone()).collect();
        assert_eq!(
            derived_chunks, planned_chunks,
            "derived relevance must equal the plan for query {}",
            q.id
        );
        assert!(
            derived.iter().all(|(_, mt)| *mt == q.match_type),
            "query {} must be a pure {} query",
            q.id,
            q.match_type
        );

        let record = QueryRecord {
            query_id: q.id.clone(),
            note_id: q.scope.map(|n| format!("note{n:04}")),
            text: q.text.clone(),
            query_type: q.query_type,
        };
        if q.scope.is_some() {
            single_queries.push(record);
            single_rels.extend(derived.into_iter().map(|(c, mt)| (q.id.clone(), c, mt)));
        } else {
            multi_queries.push(record);
            multi_rels.extend(derived.into_iter().map(|(c, mt)| (q.id.clone(), c, mt)));
        }
    }

    Ok(Benchmark {
        kg,
        notes,
        chunks,
        abbreviations,
        single: Judgments::new(single_queries, single_rels)?,
        multi: Judgments::new(multi_queries, multi_rels)?,
    })
}

/// One planned segment of `stride` lowercase words, fillers plus the given
/// plants. Plants sit well inside the segment so they never bleed into the
/// preceding chunk's overlap spill.
fn build_segment(stride: usize, overlap: usize, plants: &[Plant], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut words: Vec<String> = (0..stride)
        .map(|_| {
            let w = FILLERS[rng.random_range(0..FILLERS.len())];
            if rng.random::<f64>() < 0.14 {
                format!("{w}{}", PUNCT[rng.random_range(0..PUNCT.len())])
            } else {
                w.to_string()
            }
        })
        .collect();
    let lo = overlap + 10;
    assert!(plants.len() <= 2);
    for (i, plant) in plants.iter().enumerate() {
        let base = if i == 0 {
            rng.random_range(lo..=lo + 20)
        } else {
            rng.random_range(lo + 35..=lo + 50)
        };
        for (j, w) in plant.phrase.split_whitespace().enumerate() {
            words[base + j] = w.to_string();
        }
    }
    words
}

/// Raw note text from planned words: case noise, doubled punctuation, `___`
/// masks, uneven whitespace — everything `clean_note` undoes.
fn decorate(words: &[String], rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    for (i, word) in words.iter().enumerate() {
        if i > 0 {
            match rng.random_range(0..20u8) {
                0 => out.push_str("  "),
                1 => out.push('\n'),
                _ => out.push(' '),
            }
        }
        if rng.random::<f64>() < 0.07 {
            let _ = write!(out, "{} ", "_".repeat(rng.random_range(3..=6)));
        }
        let mut w = word.clone();
        if let Some(last) = w.chars().next_back() {
            if last.is_ascii_punctuation() && rng.random::<f64>() < 0.3 {
                w.push(last);
            }
        }
        let roll = rng.random::<f64>();
        if roll < 0.12 {
            w = w.to_uppercase();
        } else if roll < 0.2 {
            let mut chars = w.chars();
            if let Some(first) = chars.next() {
                w = format!("{}{}", first.to_uppercase(), chars.as_str());
            }
        }
        out.push_str(&w);
    }
    out
}
