//! Positive-pair construction for both training stages.
//!
//! Stage I pairs a chunk with its string-matched terms, abbreviation
//! expansions, and capped KG neighborhood (synonyms, hypernyms, related
//! entities — never hyponyms). Stage II pairs it with generator-synthesized
//! entities of three families. Everything is deterministic given a seed and
//! a deterministic client.

mod client;

pub use client::{
    extract_content, fill_template, EntityType, GeneratorClient, HttpGeneratorClient,
    MockGeneratorClient, ABBREVIATION_TEMPLATE, GENERATION_TEMPLATE,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Chunk;
use crate::encoder;
use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::kg::{KnowledgeGraph, NeighborClass};
use crate::matcher::{self, TermAutomaton};
use crate::trainer::sample_k_indices;

/// Per class (synonym / hypernym / related) at most this many sampled terms.
pub const MAX_PER_CLASS: usize = 2;
/// Per seed at most this many KG-sourced additions in total.
pub const MAX_KG_PER_SEED: usize = 10;

/// Where a positive sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    String,
    Abbreviation,
    KgSynonym,
    KgHypernym,
    KgRelated,
    SynDisease,
    SynProcedure,
    SynDrug,
}

impl Source {
    pub const ALL: [Source; 8] = [
        Source::String,
        Source::Abbreviation,
        Source::KgSynonym,
        Source::KgHypernym,
        Source::KgRelated,
        Source::SynDisease,
        Source::SynProcedure,
        Source::SynDrug,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::String => "string",
            Source::Abbreviation => "abbreviation",
            Source::KgSynonym => "kg_synonym",
            Source::KgHypernym => "kg_hypernym",
            Source::KgRelated => "kg_related",
            Source::SynDisease => "syn_disease",
            Source::SynProcedure => "syn_procedure",
            Source::SynDrug => "syn_drug",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Source::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pair source {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveSample {
    pub term: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_concept: Option<String>,
}

/// All positives of one chunk. `samples` may be empty — chunks without any
/// matched or generated entity are kept so statistics see the zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveSet {
    pub chunk_id: String,
    pub samples: Vec<PositiveSample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbbreviationPair {
    pub abbreviation: String,
    pub full_name: String,
}

/// Cleaned abbreviation pairs of one chunk plus the count of response lines
/// the parser had to skip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkAbbreviations {
    pub chunk_id: String,
    pub pairs: Vec<AbbreviationPair>,
    pub skipped: usize,
}

/// A (concept, surface) pair that anchors one KG expansion. The surface is
/// the matched string for string seeds and the full name for abbreviation
/// seeds; `origin` must be one of those two sources.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Seed {
    pub concept_id: String,
    pub surface: String,
    pub origin: Source,
}

/// One seed's expansion with per-class audit counters (counting emitted
/// samples), so invariant checks can run against exactly what was generated.
#[derive(Debug, Clone)]
pub struct SeedExpansion {
    pub seed: Seed,
    pub samples: Vec<PositiveSample>,
    pub surface_emitted: bool,
    pub synonyms: usize,
    pub hypernyms: usize,
    pub related: usize,
    pub companions: usize,
}

impl SeedExpansion {
    pub fn kg_additions(&self) -> usize {
        self.samples.len() - usize::from(self.surface_emitted)
    }
}

/// Entity-length budget as a word-count proxy, plus at least one token the
/// encoder can use.
fn usable_term(term: &str) -> bool {
    let tokens = term.split_whitespace().count();
    tokens >= 1
        && tokens <= encoder::ENTITY_TOKEN_BUDGET
        && term
            .split_whitespace()
            .any(|t| encoder::normalize_token(t).is_some())
}

// ---- abbreviation reduction ----

fn strip_marker(line: &str) -> &str {
    let s = line.trim();
    if let Some(rest) = s.strip_prefix(['-', '*', '•']) {
        return rest.trim();
    }
    let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        if let Some(rest) = s[digits..].strip_prefix(['.', ')']) {
            return rest.trim();
        }
    }
    s
}

fn normalize_space(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `ABBR = full name` lines (bullets and numbering tolerated, case
/// folded); returns the pairs and the number of lines skipped as unparseable.
pub fn parse_abbreviation_response(raw: &str) -> (Vec<AbbreviationPair>, usize) {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for line in raw.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match strip_marker(line).split_once('=') {
            Some((abbr, full)) => {
                let abbreviation = normalize_space(&abbr.to_lowercase());
                let full_name = normalize_space(&full.to_lowercase());
                if abbreviation.is_empty() || full_name.is_empty() {
                    skipped += 1;
                } else {
                    pairs.push(AbbreviationPair {
                        abbreviation,
                        full_name,
                    });
                }
            }
            None => skipped += 1,
        }
    }
    (pairs, skipped)
}

/// Newline-separated entities, bullets/numbering stripped, lowercased,
/// whitespace-normalized; empty lines dropped.
pub fn parse_entity_response(raw: &str) -> Vec<String> {
    raw.lines()
        .map(|line| normalize_space(&strip_marker(line).to_lowercase()))
        .filter(|s| !s.is_empty())
        .collect()
}

/// The four cleaning predicates; a pair survives only if all hold.
pub fn abbreviation_predicates_hold(
    pair: &AbbreviationPair,
    chunk_text: &str,
    kg: &KnowledgeGraph,
) -> bool {
    matcher::contains_word_boundary(chunk_text, &pair.abbreviation)
        && pair.full_name != pair.abbreviation
        && !kg.lookup_term(&pair.full_name).is_empty()
        && pair.abbreviation.chars().count() >= 2
}

/// Cleaning pass: keeps pairs whose abbreviation occurs word-bounded in the
/// chunk, whose expansion differs from the abbreviation and resolves to an
/// admissible KG term, and whose abbreviation is at least two characters.
/// Exact duplicates collapse to the first occurrence.
pub fn clean_abbreviations(
    raw: Vec<AbbreviationPair>,
    chunk_text: &str,
    kg: &KnowledgeGraph,
) -> Vec<AbbreviationPair> {
    let mut seen = BTreeSet::new();
    raw.into_iter()
        .filter(|p| abbreviation_predicates_hold(p, chunk_text, kg))
        .filter(|p| seen.insert((p.abbreviation.clone(), p.full_name.clone())))
        .collect()
}

/// One client call plus parsing; cleaning is separate so the raw parse stays
/// inspectable.
pub fn reduce_abbreviations(
    client: &dyn GeneratorClient,
    chunk_text: &str,
) -> Result<(Vec<AbbreviationPair>, usize)> {
    let raw = client.abbreviation_response(chunk_text)?;
    Ok(parse_abbreviation_response(&raw))
}

/// Abbreviation reduction + cleaning over a whole corpus, chunk-parallel with
/// deterministic output order.
pub fn reduce_corpus(
    client: &dyn GeneratorClient,
    chunks: &[Chunk],
    kg: &KnowledgeGraph,
) -> Result<Vec<ChunkAbbreviations>> {
    chunks
        .par_iter()
        .map(|chunk| {
            let (raw, skipped) =
                reduce_abbreviations(client, &chunk.text).map_err(|e| Error::Generator {
                    chunk_id: chunk.id(),
                    message: e.to_string(),
                })?;
            Ok(ChunkAbbreviations {
                chunk_id: chunk.id(),
                pairs: clean_abbreviations(raw, &chunk.text, kg),
                skipped,
            })
        })
        .collect()
}

pub fn abbreviation_map(records: &[ChunkAbbreviations]) -> BTreeMap<String, Vec<AbbreviationPair>> {
    records
        .iter()
        .map(|r| (r.chunk_id.clone(), r.pairs.clone()))
        .collect()
}

// ---- Stage I expansion ----

/// Expands one seed: its surface, up to 2 sampled synonyms, up to 2
/// hypernyms and 2 related terms each with one random synonym of the
/// contributing concept(s) when available. Terms over the entity budget (or
/// with no usable token) are not emitted. Panics if the per-class or
/// per-seed caps are ever exceeded — that would be a logic error.
pub fn expand_seed(kg: &KnowledgeGraph, seed: &Seed, rng: &mut ChaCha8Rng) -> Result<SeedExpansion> {
    if !matches!(seed.origin, Source::String | Source::Abbreviation) {
        return Err(Error::Config(format!(
            "seed origin must be string or abbreviation, got {}",
            seed.origin
        )));
    }
    let mut samples = Vec::new();
    let surface_emitted = usable_term(&seed.surface);
    if surface_emitted {
        samples.push(PositiveSample {
            term: seed.surface.clone(),
            source: seed.origin,
            seed_concept: Some(seed.concept_id.clone()),
        });
    }
    let emit = |samples: &mut Vec<PositiveSample>, term: &str, source: Source| -> bool {
        if !usable_term(term) {
            return false;
        }
        samples.push(PositiveSample {
            term: term.to_string(),
            source,
            seed_concept: Some(seed.concept_id.clone()),
        });
        true
    };

    let mut synonyms = 0;
    let candidates = kg.neighbors(&seed.concept_id, NeighborClass::Synonym, Some(&seed.surface))?;
    let terms: Vec<&String> = candidates.keys().collect();
    for idx in sample_k_indices(terms.len(), MAX_PER_CLASS.min(terms.len()), rng) {
        if emit(&mut samples, terms[idx], Source::KgSynonym) {
            synonyms += 1;
        }
    }

    let per_edge_class = |class: NeighborClass,
                              source: Source,
                              samples: &mut Vec<PositiveSample>,
                              rng: &mut ChaCha8Rng|
     -> Result<(usize, usize)> {
        let candidates = kg.neighbors(&seed.concept_id, class, None)?;
        let entries: Vec<(&String, &BTreeSet<String>)> = candidates.iter().collect();
        let mut emitted = 0;
        let mut companions = 0;
        for idx in sample_k_indices(entries.len(), MAX_PER_CLASS.min(entries.len()), rng) {
            let (term, contributors) = entries[idx];
            if emit(samples, term, source) {
                emitted += 1;
            }
            // "a random synonym of it, if any": drawn from the terms of the
            // concept(s) that contributed this neighbor, minus the term.
            let pool: BTreeSet<&String> = contributors
                .iter()
                .filter_map(|cid| kg.concept(cid))
                .flat_map(|c| c.terms.iter())
                .filter(|t| *t != term)
                .collect();
            if !pool.is_empty() {
                let pool: Vec<&&String> = pool.iter().collect();
                let pick = rng.random_range(0..pool.len());
                if emit(samples, pool[pick], source) {
                    companions += 1;
                }
            }
        }
        Ok((emitted, companions))
    };

    let (hypernyms, hyper_companions) =
        per_edge_class(NeighborClass::Hypernym, Source::KgHypernym, &mut samples, rng)?;
    let (related, related_companions) =
        per_edge_class(NeighborClass::Related, Source::KgRelated, &mut samples, rng)?;
    let companions = hyper_companions + related_companions;

    let expansion = SeedExpansion {
        seed: seed.clone(),
        samples,
        surface_emitted,
        synonyms,
        hypernyms,
        related,
        companions,
    };
    assert!(expansion.synonyms <= MAX_PER_CLASS, "synonym cap violated");
    assert!(expansion.hypernyms <= MAX_PER_CLASS, "hypernym cap violated");
    assert!(expansion.related <= MAX_PER_CLASS, "related cap violated");
    assert!(
        expansion.kg_additions() <= MAX_KG_PER_SEED,
        "per-seed KG cap violated: {} additions",
        expansion.kg_additions()
    );
    Ok(expansion)
}

fn merge_expansions(expansions: Vec<SeedExpansion>) -> Vec<PositiveSample> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for e in expansions {
        for s in e.samples {
            if seen.insert((s.term.clone(), s.source)) {
                out.push(s);
            }
        }
    }
    out
}

/// Expands a set of seeds into a deduplicated sample list ((term, source)
/// pairs unique, first occurrence wins).
pub fn expand_stage1(
    kg: &KnowledgeGraph,
    seeds: &[Seed],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PositiveSample>> {
    let expansions: Result<Vec<SeedExpansion>> =
        seeds.iter().map(|s| expand_seed(kg, s, rng)).collect();
    Ok(merge_expansions(expansions?))
}

/// The seeds of one chunk: every matched (concept, surface) pair, then every
/// cleaned abbreviation expansion resolved to its admissible concepts. A
/// (concept, surface) already seeded by a string match is not re-seeded.
pub fn stage1_seeds(
    kg: &KnowledgeGraph,
    automaton: &TermAutomaton,
    chunk: &Chunk,
    abbrevs: &[AbbreviationPair],
) -> Vec<Seed> {
    let mentions = matcher::find_mentions(automaton, &chunk.text);
    let mut seeds: Vec<Seed> = matcher::chunk_concepts(&mentions)
        .into_iter()
        .map(|(concept_id, surface)| Seed {
            concept_id,
            surface,
            origin: Source::String,
        })
        .collect();
    let mut seen: BTreeSet<(String, String)> = seeds
        .iter()
        .map(|s| (s.concept_id.clone(), s.surface.clone()))
        .collect();
    for pair in abbrevs {
        for concept_id in kg.lookup_term(&pair.full_name) {
            if seen.insert((concept_id.clone(), pair.full_name.clone())) {
                seeds.push(Seed {
                    concept_id,
                    surface: pair.full_name.clone(),
                    origin: Source::Abbreviation,
                });
            }
        }
    }
    seeds
}

/// Per-seed expansions for one chunk — the auditable form of `stage1_set`.
pub fn stage1_expansions(
    kg: &KnowledgeGraph,
    automaton: &TermAutomaton,
    chunk: &Chunk,
    abbrevs: &[AbbreviationPair],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SeedExpansion>> {
    stage1_seeds(kg, automaton, chunk, abbrevs)
        .iter()
        .map(|s| expand_seed(kg, s, rng))
        .collect()
}

pub fn stage1_set(
    kg: &KnowledgeGraph,
    automaton: &TermAutomaton,
    chunk: &Chunk,
    abbrevs: &[AbbreviationPair],
    rng: &mut ChaCha8Rng,
) -> Result<PositiveSet> {
    let expansions = stage1_expansions(kg, automaton, chunk, abbrevs, rng)?;
    Ok(PositiveSet {
        chunk_id: chunk.id(),
        samples: merge_expansions(expansions),
    })
}

/// Builds the Stage-I dataset. Each chunk gets an rng derived from the
/// dataset seed and its id, so output is independent of thread scheduling.
pub fn build_stage1_dataset(
    kg: &KnowledgeGraph,
    automaton: &TermAutomaton,
    chunks: &[Chunk],
    abbrevs: &BTreeMap<String, Vec<AbbreviationPair>>,
    seed: u64,
) -> Result<Vec<PositiveSet>> {
    let empty = Vec::new();
    chunks
        .par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &chunk.id()));
            let pairs = abbrevs.get(&chunk.id()).unwrap_or(&empty);
            stage1_set(kg, automaton, chunk, pairs, &mut rng)
        })
        .collect()
}

// ---- Stage II generation ----

/// Three generator calls (diseases, clinical procedures, drugs); entities are
/// lowercased, budget-filtered, and deduplicated across the three responses
/// by exact string — the first generating family claims a repeated entity.
pub fn generate_stage2(
    client: &dyn GeneratorClient,
    chunk_text: &str,
) -> Result<Vec<PositiveSample>> {
    let mut seen = BTreeSet::new();
    let mut samples = Vec::new();
    for entity_type in EntityType::ALL {
        let raw = client.entity_response(chunk_text, entity_type)?;
        for term in parse_entity_response(&raw) {
            if usable_term(&term) && seen.insert(term.clone()) {
                samples.push(PositiveSample {
                    term,
                    source: entity_type.source(),
                    seed_concept: None,
                });
            }
        }
    }
    Ok(samples)
}

pub fn build_stage2_dataset(
    client: &dyn GeneratorClient,
    chunks: &[Chunk],
) -> Result<Vec<PositiveSet>> {
    chunks
        .par_iter()
        .map(|chunk| {
            let samples = generate_stage2(client, &chunk.text).map_err(|e| Error::Generator {
                chunk_id: chunk.id(),
                message: e.to_string(),
            })?;
            Ok(PositiveSet {
                chunk_id: chunk.id(),
                samples,
            })
        })
        .collect()
}

/// Drops every sample whose source is in `disabled` (ablation switch).
pub fn filter_sources(sets: &[PositiveSet], disabled: &BTreeSet<Source>) -> Vec<PositiveSet> {
    sets.iter()
        .map(|s| PositiveSet {
            chunk_id: s.chunk_id.clone(),
            samples: s
                .samples
                .iter()
                .filter(|x| !disabled.contains(&x.source))
                .cloned()
                .collect(),
        })
        .collect()
}

// ---- statistics ----

/// One statistics row: distribution of per-chunk sample counts for a source
/// (zeros included), plus the total.
#[derive(Debug, Clone, Serialize)]
pub struct SourceStats {
    pub label: String,
    pub avg: f64,
    pub q1: f64,
    pub q3: f64,
    pub max: u64,
    pub sum: u64,
}

/// Quartile by linear interpolation between closest ranks.
pub(crate) fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty() && (0.0..=1.0).contains(&q));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

fn stats_row(label: &str, counts: &[u64]) -> SourceStats {
    let mut sorted: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    SourceStats {
        label: label.to_string(),
        avg: counts.iter().sum::<u64>() as f64 / counts.len() as f64,
        q1: quantile_linear(&sorted, 0.25),
        q3: quantile_linear(&sorted, 0.75),
        max: *counts.iter().max().unwrap(),
        sum: counts.iter().sum(),
    }
}

/// Per-source rows (sources that occur, in canonical order) plus an overall
/// row. An empty dataset yields a single all-zero overall row.
pub fn dataset_stats(sets: &[PositiveSet]) -> Vec<SourceStats> {
    if sets.is_empty() {
        return vec![SourceStats {
            label: "overall".into(),
            avg: 0.0,
            q1: 0.0,
            q3: 0.0,
            max: 0,
            sum: 0,
        }];
    }
    let present: BTreeSet<Source> = sets
        .iter()
        .flat_map(|s| s.samples.iter().map(|x| x.source))
        .collect();
    let mut rows = Vec::new();
    for source in Source::ALL {
        if !present.contains(&source) {
            continue;
        }
        let counts: Vec<u64> = sets
            .iter()
            .map(|s| s.samples.iter().filter(|x| x.source == source).count() as u64)
            .collect();
        rows.push(stats_row(source.as_str(), &counts));
    }
    let totals: Vec<u64> = sets.iter().map(|s| s.samples.len() as u64).collect();
    rows.push(stats_row("overall", &totals));
    rows
}

pub fn render_stats(rows: &[SourceStats]) -> String {
    let headers: Vec<String> = ["source", "avg", "q1", "q3", "max", "sum"]
        .into_iter()
        .map(String::from)
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                format!("{:.2}", r.avg),
                format!("{:.2}", r.q1),
                format!("{:.2}", r.q3),
                r.max.to_string(),
                r.sum.to_string(),
            ]
        })
        .collect();
    crate::textutil::render_aligned(&headers, &body)
}

// ---- files ----

pub fn write_pairs(path: &Path, sets: &[PositiveSet]) -> Result<()> {
    crate::corpus::write_jsonl(path, sets)
}

pub fn load_pairs(path: &Path) -> Result<Vec<PositiveSet>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?,
        );
    }
    Ok(out)
}

pub fn write_abbreviations(path: &Path, records: &[ChunkAbbreviations]) -> Result<()> {
    crate::corpus::write_jsonl(path, records)
}

pub fn load_abbreviations(path: &Path) -> Result<Vec<ChunkAbbreviations>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?,
        );
    }
    Ok(out)
}
