//! Dictionary mention matching over chunk text.
//!
//! An Aho-Corasick automaton is built once over the admissible KG vocabulary
//! and run in overlapping mode; hits are then filtered to word boundaries and
//! resolved per concept (a concept keeps only its longest non-overlapping
//! matches, while *different* concepts may keep overlapping spans).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use aho_corasick::AhoCorasick;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;

/// One surviving dictionary hit. `concept_ids` carries every concept whose
/// resolution kept this span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub surface: String,
    pub start_char: usize,
    pub end_char: usize,
    pub concept_ids: BTreeSet<String>,
}

/// Mention row as serialized to `mentions.jsonl` (one row per mention).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub chunk_id: String,
    #[serde(flatten)]
    pub mention: Mention,
}

pub struct TermAutomaton {
    ac: AhoCorasick,
    terms: Vec<String>,
    payloads: Vec<BTreeSet<String>>,
}

impl TermAutomaton {
    pub fn term_count(&self) -> usize {
        self.terms.len()
    }
}

/// Compiles the automaton over every admissible (term, concepts) pair.
pub fn build_automaton(kg: &KnowledgeGraph) -> Result<TermAutomaton> {
    let mut terms = Vec::new();
    let mut payloads = Vec::new();
    for (term, ids) in kg.admissible_terms() {
        terms.push(term.to_string());
        payloads.push(ids.clone());
    }
    if terms.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let ac = AhoCorasick::new(&terms)
        .map_err(|e| Error::Config(format!("automaton build failed: {e}")))?;
    Ok(TermAutomaton { ac, terms, payloads })
}

pub(crate) fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

fn boundary_ok(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    before.is_none_or(|c| !is_word_char(c)) && after.is_none_or(|c| !is_word_char(c))
}

/// True when `needle` occurs in `text` flanked by word boundaries. Used for
/// abbreviation admission and ground-truth derivation; the automaton path is
/// for bulk matching.
pub fn contains_word_boundary(text: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let mut from = 0;
    while let Some(pos) = text[from..].find(needle) {
        let s = from + pos;
        let e = s + needle.len();
        if boundary_ok(text, s, e) {
            return true;
        }
        // step one char past this hit
        from = s + text[s..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

fn spans_overlap(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

/// Finds all admissible-term mentions in `text`.
///
/// Candidate hits are overlapping automaton matches that sit on word
/// boundaries. Per concept, candidates are kept greedily by (length desc,
/// start asc) with later overlapping candidates of the *same* concept
/// discarded; surviving spans from different concepts may overlap freely.
/// Output is sorted by (start_char asc, length desc).
pub fn find_mentions(automaton: &TermAutomaton, text: &str) -> Vec<Mention> {
    // concept -> candidate spans
    let mut per_concept: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for m in automaton.ac.find_overlapping_iter(text) {
        let (s, e) = (m.start(), m.end());
        if !boundary_ok(text, s, e) {
            continue;
        }
        for id in &automaton.payloads[m.pattern()] {
            per_concept.entry(id).or_default().push((s, e));
        }
    }

    let mut kept: BTreeMap<(usize, usize), BTreeSet<String>> = BTreeMap::new();
    for (concept, mut spans) in per_concept {
        spans.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
        let mut taken: Vec<(usize, usize)> = Vec::new();
        for span in spans {
            if taken.iter().all(|t| !spans_overlap(*t, span)) {
                taken.push(span);
                kept.entry(span).or_default().insert(concept.to_string());
            }
        }
    }

    let mut mentions: Vec<Mention> = kept
        .into_iter()
        .map(|((s, e), ids)| Mention {
            surface: text[s..e].to_string(),
            start_char: s,
            end_char: e,
            concept_ids: ids,
        })
        .collect();
    mentions.sort_by(|a, b| {
        a.start_char
            .cmp(&b.start_char)
            .then((b.end_char - b.start_char).cmp(&(a.end_char - a.start_char)))
            .then(a.end_char.cmp(&b.end_char))
    });
    mentions
}

/// Distinct (concept_id, surface) pairs of a chunk's mentions — the Stage-I
/// seed set.
pub fn chunk_concepts(mentions: &[Mention]) -> BTreeSet<(String, String)> {
    let mut out = BTreeSet::new();
    for m in mentions {
        for id in &m.concept_ids {
            out.insert((id.clone(), m.surface.clone()));
        }
    }
    out
}

pub fn write_mentions(path: &Path, records: &[MentionRecord]) -> Result<()> {
    crate::corpus::write_jsonl(path, records)
}

pub fn load_mentions(path: &Path) -> Result<Vec<MentionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MentionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, idx + 1, format!("bad mention record: {e}")))?;
        records.push(rec);
    }
    Ok(records)
}
