//! Note loading, cleaning, and sliding-window chunking.
//!
//! Cleaning lowercases, strips mask placeholders (runs of underscores by
//! default), collapses repeated identical punctuation, and normalizes
//! whitespace; it is idempotent. Chunking slides a fixed window over the
//! whitespace-token stream of the *cleaned* text with a fixed overlap, so a
//! chunk id plus the cleaning config pins down an exact text span.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Window width in words.
pub const DEFAULT_WINDOW: usize = 100;
/// Overlap between consecutive windows, in words.
pub const DEFAULT_OVERLAP: usize = 10;
/// Mask placeholder pattern removed during cleaning.
pub const DEFAULT_MASK_PATTERN: &str = "___+";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub note_id: String,
    pub text: String,
}

/// A contiguous word span of one note. `text` is the span joined with single
/// spaces; `start_word..end_word` indexes into the cleaned note's word stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub note_id: String,
    pub ordinal: usize,
    pub start_word: usize,
    pub end_word: usize,
    pub text: String,
}

impl Chunk {
    /// Canonical chunk id: `<note_id>#<ordinal>`.
    pub fn id(&self) -> String {
        format!("{}#{}", self.note_id, self.ordinal)
    }
}

/// Compiles mask patterns, rejecting invalid regexes up front.
pub fn compile_masks(patterns: &[String]) -> Result<Vec<Regex>> {
    patterns
        .iter()
        .map(|p| Regex::new(p).map_err(|e| Error::Config(format!("mask pattern {p:?}: {e}"))))
        .collect()
}

/// Cleans one note body: lowercase, remove mask placeholders until none match,
/// collapse runs of an identical ASCII punctuation character to one, collapse
/// whitespace to single spaces, trim. Idempotent: `clean(clean(x)) == clean(x)`.
pub fn clean_note(raw: &str, masks: &[Regex]) -> String {
    let mut text = raw.to_lowercase();
    // Fixpoint removal: masks may abut so that deleting one occurrence forms
    // another (e.g. "_" patterns). Each pass strictly shrinks the text, so
    // this terminates.
    loop {
        let mut changed = false;
        for re in masks {
            match re.replace_all(&text, "") {
                std::borrow::Cow::Owned(next) => {
                    changed = true;
                    text = next;
                }
                std::borrow::Cow::Borrowed(_) => {}
            }
        }
        if !changed {
            break;
        }
    }
    let mut collapsed = String::with_capacity(text.len());
    let mut prev = None;
    for c in text.chars() {
        if prev == Some(c) && c.is_ascii_punctuation() {
            continue;
        }
        collapsed.push(c);
        prev = Some(c);
    }
    let words: Vec<&str> = collapsed.split_whitespace().collect();
    words.join(" ")
}

/// Cleans every note and drops the ones that come out empty.
pub fn clean_notes(notes: Vec<Note>, masks: &[Regex]) -> Vec<Note> {
    notes
        .into_iter()
        .filter_map(|n| {
            let text = clean_note(&n.text, masks);
            (!text.is_empty()).then_some(Note {
                note_id: n.note_id,
                text,
            })
        })
        .collect()
}

/// Splits a (cleaned) note into overlapping word windows.
///
/// Windows start at multiples of `window - overlap`. Emission stops at the
/// first window whose end reaches or passes the last word; that window is
/// clipped to the note length. An empty note yields no chunks.
pub fn chunk_note(note: &Note, window: usize, overlap: usize) -> Vec<Chunk> {
    assert!(
        overlap < window,
        "overlap ({overlap}) must be smaller than window ({window})"
    );
    let words: Vec<&str> = note.text.split_whitespace().collect();
    let mut chunks = Vec::new();
    if words.is_empty() {
        return chunks;
    }
    let stride = window - overlap;
    let mut start = 0;
    loop {
        let end = start + window;
        let clipped = end.min(words.len());
        chunks.push(Chunk {
            note_id: note.note_id.clone(),
            ordinal: chunks.len(),
            start_word: start,
            end_word: clipped,
            text: words[start..clipped].join(" "),
        });
        if end >= words.len() {
            break;
        }
        start += stride;
    }
    chunks
}

/// Cleans and chunks a whole corpus in one pass.
pub fn chunk_corpus(notes: Vec<Note>, masks: &[Regex], window: usize, overlap: usize) -> Vec<Chunk> {
    clean_notes(notes, masks)
        .iter()
        .flat_map(|n| chunk_note(n, window, overlap))
        .collect()
}

/// Reads a notes JSONL file. Errors name the offending line; duplicate
/// `note_id`s are rejected.
pub fn load_notes(path: &Path) -> Result<Vec<Note>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut notes: Vec<Note> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let note: Note = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, idx + 1, format!("bad note record: {e}")))?;
        if !seen.insert(note.note_id.clone()) {
            return Err(Error::DuplicateNote(note.note_id));
        }
        notes.push(note);
    }
    Ok(notes)
}

pub fn write_notes(path: &Path, notes: &[Note]) -> Result<()> {
    write_jsonl(path, notes)
}

pub fn write_chunks(path: &Path, chunks: &[Chunk]) -> Result<()> {
    write_jsonl(path, chunks)
}

pub fn load_chunks(path: &Path) -> Result<Vec<Chunk>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut chunks = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let chunk: Chunk = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, idx + 1, format!("bad chunk record: {e}")))?;
        chunks.push(chunk);
    }
    Ok(chunks)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row)
            .map_err(|e| Error::Config(format!("serialize row for {}: {e}", path.display())))?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_masks() -> Vec<Regex> {
        compile_masks(&[DEFAULT_MASK_PATTERN.to_string()]).unwrap()
    }

    fn note(id: &str, words: usize) -> Note {
        let text = (0..words).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        Note {
            note_id: id.into(),
            text,
        }
    }

    #[test]
    fn clean_lowercases_strips_masks_and_collapses_punct() {
        let masks = default_masks();
        assert_eq!(
            clean_note("Pt c/o CP!!!  ___ HTN noted.", &masks),
            "pt c/o cp! htn noted."
        );
    }

    #[test]
    fn clean_handles_adjacent_masks_to_fixpoint() {
        let masks = default_masks();
        // One long run is a single match, but the fixpoint loop also covers
        // patterns that only re-form after a removal.
        assert_eq!(clean_note("a ______ b", &masks), "a b");
        assert_eq!(clean_note("______", &masks), "");
    }

    #[test]
    fn clean_collapses_only_identical_adjacent_punctuation() {
        let masks = default_masks();
        assert_eq!(clean_note("wait... what?!?!", &masks), "wait. what?!?!");
        assert_eq!(clean_note("a--b  ,,  ::x", &masks), "a-b , :x");
    }

    #[test]
    fn clean_is_idempotent_on_examples() {
        let masks = default_masks();
        for raw in ["Pt c/o CP!!!  ___ HTN noted.", "A__B", "x ____y___ z!!"] {
            let once = clean_note(raw, &masks);
            assert_eq!(clean_note(&once, &masks), once, "raw = {raw:?}");
        }
    }

    #[test]
    fn chunk_windows_match_worked_examples() {
        let spans = |n: usize| -> Vec<(usize, usize)> {
            chunk_note(&note("n", n), 100, 10)
                .iter()
                .map(|c| (c.start_word, c.end_word))
                .collect()
        };
        assert_eq!(spans(250), vec![(0, 100), (90, 190), (180, 250)]);
        assert_eq!(spans(101), vec![(0, 100), (90, 101)]);
        assert_eq!(spans(100), vec![(0, 100)]);
        assert_eq!(spans(40), vec![(0, 40)]);
        assert_eq!(spans(0), Vec::<(usize, usize)>::new());
    }

    #[test]
    fn chunk_ids_and_ordinals_are_dense() {
        let chunks = chunk_note(&note("mrn9#x", 250), 100, 10);
        let ids: Vec<String> = chunks.iter().map(Chunk::id).collect();
        assert_eq!(ids, ["mrn9#x#0", "mrn9#x#1", "mrn9#x#2"]);
    }

    #[test]
    fn load_notes_reports_line_numbers_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notes.jsonl");
        std::fs::write(&path, "{\"note_id\":\"a\",\"text\":\"x\"}\nnot json\n").unwrap();
        match load_notes(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(
            &path,
            "{\"note_id\":\"a\",\"text\":\"x\"}\n{\"note_id\":\"a\",\"text\":\"y\"}\n",
        )
        .unwrap();
        assert!(matches!(load_notes(&path), Err(Error::DuplicateNote(id)) if id == "a"));
    }

    #[test]
    fn chunk_roundtrip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chunks.jsonl");
        let chunks = chunk_note(&note("n1", 130), 100, 10);
        write_chunks(&path, &chunks).unwrap();
        assert_eq!(load_chunks(&path).unwrap(), chunks);
    }

    proptest! {
        #[test]
        fn chunk_invariants_hold(words in 0usize..600, window in 2usize..140, overlap_frac in 0usize..100) {
            let overlap = overlap_frac * (window - 1) / 100; // 0 <= overlap < window
            let n = note("p", words);
            let chunks = chunk_note(&n, window, overlap);
            let stride = window - overlap;

            if words == 0 {
                prop_assert!(chunks.is_empty());
                return Ok(());
            }
            // Dense ordinals, exact starts, full coverage, faithful text.
            let all: Vec<&str> = n.text.split_whitespace().collect();
            let mut covered = vec![false; words];
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.ordinal, i);
                prop_assert_eq!(c.start_word, i * stride);
                prop_assert!(c.end_word <= words);
                prop_assert!(c.start_word < c.end_word);
                let expect = all[c.start_word..c.end_word].join(" ");
                prop_assert_eq!(c.text.as_str(), expect.as_str());
                covered[c.start_word..c.end_word].iter_mut().for_each(|b| *b = true);
            }
            prop_assert!(covered.into_iter().all(|b| b));
            // All but the final window span exactly `window` words, so each
            // interior consecutive pair overlaps exactly `overlap`.
            for c in &chunks[..chunks.len() - 1] {
                prop_assert_eq!(c.end_word - c.start_word, window);
            }
            let last = chunks.last().unwrap();
            prop_assert!(last.end_word == words);
        }

        #[test]
        fn clean_is_idempotent(raw in "[ -~]{0,80}") {
            let masks = default_masks();
            let once = clean_note(&raw, &masks);
            prop_assert_eq!(clean_note(&once, &masks), once);
        }

        #[test]
        fn clean_output_is_normalized(raw in "\\PC{0,60}") {
            let masks = default_masks();
            let out = clean_note(&raw, &masks);
            prop_assert!(!out.contains("  "));
            prop_assert_eq!(out.trim(), out.as_str());
            prop_assert_eq!(out.to_lowercase(), out);
        }
    }
}
