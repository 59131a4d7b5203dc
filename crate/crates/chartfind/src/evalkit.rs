//! IR metrics and the two retrieval settings.
//!
//! Single-Patient ranks one note's chunks per query and reports MRR / NDCG /
//! MAP; Multi-Patient ranks the whole collection and reports MRR / NDCG@10 /
//! Recall@100. Relevance is binary. All reported numbers are macro averages
//! over queries, and score ties break lexicographically by chunk id so runs
//! are deterministic.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Chunk;
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchType {
    String,
    Synonym,
    Abbreviation,
    Hyponym,
    Implication,
}

impl MatchType {
    pub const ALL: [MatchType; 5] = [
        MatchType::String,
        MatchType::Synonym,
        MatchType::Abbreviation,
        MatchType::Hyponym,
        MatchType::Implication,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatchType::String => "string",
            MatchType::Synonym => "synonym",
            MatchType::Abbreviation => "abbreviation",
            MatchType::Hyponym => "hyponym",
            MatchType::Implication => "implication",
        }
    }
}

impl fmt::Display for MatchType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MatchType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Eval(format!("unknown match type {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryType {
    Disease,
    Procedure,
    Drug,
}

impl QueryType {
    pub const ALL: [QueryType; 3] = [QueryType::Disease, QueryType::Procedure, QueryType::Drug];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryType::Disease => "disease",
            QueryType::Procedure => "procedure",
            QueryType::Drug => "drug",
        }
    }
}

impl fmt::Display for QueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Eval(format!("unknown query type {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryRecord {
    pub query_id: String,
    /// Home note for Single-Patient scoping; `None` (serialized "*") for
    /// queries only usable in the Multi-Patient setting.
    pub note_id: Option<String>,
    pub text: String,
    pub query_type: QueryType,
}

/// Queries plus binary relevance judgments with per-pair match types.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Judgments {
    queries: BTreeMap<String, QueryRecord>,
    rels: BTreeMap<String, BTreeMap<String, MatchType>>,
}

impl Judgments {
    pub fn new(queries: Vec<QueryRecord>, rels: Vec<(String, String, MatchType)>) -> Result<Self> {
        let mut qmap = BTreeMap::new();
        for q in queries {
            if qmap.insert(q.query_id.clone(), q).is_some() {
                return Err(Error::Eval("duplicate query id".into()));
            }
        }
        let mut rmap: BTreeMap<String, BTreeMap<String, MatchType>> = BTreeMap::new();
        for (qid, chunk, mt) in rels {
            if !qmap.contains_key(&qid) {
                return Err(Error::Eval(format!("qrels references unknown query {qid:?}")));
            }
            if rmap.entry(qid.clone()).or_default().insert(chunk.clone(), mt).is_some() {
                return Err(Error::Eval(format!(
                    "duplicate judgment for query {qid:?} chunk {chunk:?}"
                )));
            }
        }
        Ok(Judgments { queries: qmap, rels: rmap })
    }

    pub fn load(queries_path: &Path, qrels_path: &Path) -> Result<Self> {
        let queries = load_queries(queries_path)?;
        let rows = load_qrels(qrels_path)?;
        let me = Judgments::new(
            queries,
            rows.iter().map(|r| (r.query_id.clone(), r.chunk_id.clone(), r.match_type)).collect(),
        )?;
        // query_type column must agree with the queries file
        for r in &rows {
            let declared = me.queries[&r.query_id].query_type;
            if declared != r.query_type {
                return Err(Error::Eval(format!(
                    "query {} typed {} in queries file but {} in qrels",
                    r.query_id, declared, r.query_type
                )));
            }
        }
        Ok(me)
    }

    pub fn dump(&self, queries_path: &Path, qrels_path: &Path) -> Result<()> {
        let file = File::create(queries_path).map_err(|e| Error::io(queries_path, e))?;
        let mut w = BufWriter::new(file);
        for q in self.queries.values() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                q.query_id,
                q.note_id.as_deref().unwrap_or("*"),
                q.text,
                q.query_type
            )
            .map_err(|e| Error::io(queries_path, e))?;
        }
        w.flush().map_err(|e| Error::io(queries_path, e))?;

        let file = File::create(qrels_path).map_err(|e| Error::io(qrels_path, e))?;
        let mut w = BufWriter::new(file);
        for (qid, chunks) in &self.rels {
            let qt = self.queries[qid].query_type;
            for (chunk, mt) in chunks {
                writeln!(w, "{qid}\t{chunk}\t1\t{mt}\t{qt}").map_err(|e| Error::io(qrels_path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(qrels_path, e))
    }

    pub fn queries(&self) -> impl Iterator<Item = &QueryRecord> {
        self.queries.values()
    }

    pub fn query(&self, qid: &str) -> Option<&QueryRecord> {
        self.queries.get(qid)
    }

    pub fn query_count(&self) -> usize {
        self.queries.len()
    }

    /// chunk -> match type judged relevant for this query.
    pub fn relevant(&self, qid: &str) -> Option<&BTreeMap<String, MatchType>> {
        self.rels.get(qid)
    }
}

#[derive(Debug, Clone)]
pub struct QrelRow {
    pub query_id: String,
    pub chunk_id: String,
    pub match_type: MatchType,
    pub query_type: QueryType,
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::parse(path, idx + 1, format!("expected 4 columns, got {}", cols.len())));
        }
        out.push(QueryRecord {
            query_id: cols[0].to_string(),
            note_id: (cols[1] != "*").then(|| cols[1].to_string()),
            text: cols[2].to_string(),
            query_type: cols[3]
                .parse()
                .map_err(|e: Error| Error::parse(path, idx + 1, e.to_string()))?,
        });
    }
    Ok(out)
}

pub fn load_qrels(path: &Path) -> Result<Vec<QrelRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::parse(path, idx + 1, format!("expected 5 columns, got {}", cols.len())));
        }
        if cols[2] != "1" {
            return Err(Error::parse(path, idx + 1, "relevance must be binary (column 3 = 1)"));
        }
        out.push(QrelRow {
            query_id: cols[0].to_string(),
            chunk_id: cols[1].to_string(),
            match_type: cols[3]
                .parse()
                .map_err(|e: Error| Error::parse(path, idx + 1, e.to_string()))?,
            query_type: cols[4]
                .parse()
                .map_err(|e: Error| Error::parse(path, idx + 1, e.to_string()))?,
        });
    }
    Ok(out)
}

// ---- metrics ----

/// 1/rank of the first relevant document; 0 when none is retrieved.
pub fn reciprocal_rank(ranking: &[(String, f64)], relevant: &BTreeSet<String>) -> f64 {
    for (i, (id, _)) in ranking.iter().enumerate() {
        if relevant.contains(id) {
            return 1.0 / (i + 1) as f64;
        }
    }
    0.0
}

/// Mean over all relevant documents of precision at their rank; relevant
/// documents missing from the ranking contribute 0.
pub fn average_precision(ranking: &[(String, f64)], relevant: &BTreeSet<String>) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, (id, _)) in ranking.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / relevant.len() as f64
}

/// Binary-gain NDCG; `cutoff = None` scores the whole ranking. The ideal DCG
/// uses the same cutoff.
pub fn ndcg(ranking: &[(String, f64)], relevant: &BTreeSet<String>, cutoff: Option<usize>) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let limit = cutoff.unwrap_or(ranking.len());
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(limit)
        .enumerate()
        .filter(|(_, (id, _))| relevant.contains(id))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal_hits = relevant.len().min(limit);
    let idcg: f64 = (1..=ideal_hits).map(discount).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// |relevant in top-k| / |relevant|.
pub fn recall_at(ranking: &[(String, f64)], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let found = ranking
        .iter()
        .take(k)
        .filter(|(id, _)| relevant.contains(id))
        .count();
    found as f64 / relevant.len() as f64
}

/// Sorts scored chunks into a ranking: descending score, ties broken by
/// chunk id ascending. Rejects non-finite scores and duplicate ids.
pub fn rank_chunks(mut scored: Vec<(String, f64)>) -> Result<Vec<(String, f64)>> {
    if scored.iter().any(|(_, s)| !s.is_finite()) {
        return Err(Error::Eval("non-finite score".into()));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    let mut seen = BTreeSet::new();
    for (id, _) in &scored {
        if !seen.insert(id.clone()) {
            return Err(Error::Eval(format!("duplicate chunk {id:?} in ranking")));
        }
    }
    Ok(scored)
}

// ---- settings & runners ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Single,
    Multi,
}

impl Setting {
    pub fn metric_names(self) -> [&'static str; 3] {
        match self {
            Setting::Single => ["MRR", "NDCG", "MAP"],
            Setting::Multi => ["MRR", "NDCG@10", "R@100"],
        }
    }

    fn compute(self, ranking: &[(String, f64)], relevant: &BTreeSet<String>) -> [f64; 3] {
        match self {
            Setting::Single => [
                reciprocal_rank(ranking, relevant),
                ndcg(ranking, relevant, None),
                average_precision(ranking, relevant),
            ],
            Setting::Multi => [
                reciprocal_rank(ranking, relevant),
                ndcg(ranking, relevant, Some(10)),
                recall_at(ranking, relevant, 100),
            ],
        }
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Setting::Single),
            "multi" => Ok(Setting::Multi),
            other => Err(Error::Eval(format!("unknown setting {other:?}"))),
        }
    }
}

/// Scores one query against a candidate pool. Implementations must be pure
/// functions of (query, pool) so evaluations are deterministic.
pub trait Scorer: Sync {
    fn score(&self, query_text: &str, pool: &[&Chunk]) -> Result<Vec<f64>>;
}

/// Cosine scorer over a trained encoder, with all chunk embeddings computed
/// once up front. Chunks with no encodable token score -2 (below any cosine).
pub struct EncoderScorer<'a> {
    params: &'a EncoderParams,
    cache: HashMap<String, Option<Vec<f64>>>,
}

impl<'a> EncoderScorer<'a> {
    pub fn new(params: &'a EncoderParams, chunks: &[Chunk]) -> Self {
        let cache: HashMap<String, Option<Vec<f64>>> = chunks
            .par_iter()
            .map(|c| {
                let emb = encoder::encode_text(params, &c.text, encoder::CHUNK_TOKEN_BUDGET)
                    .ok()
                    .map(|(unit, _)| unit);
                (c.id(), emb)
            })
            .collect();
        EncoderScorer { params, cache }
    }
}

impl Scorer for EncoderScorer<'_> {
    fn score(&self, query_text: &str, pool: &[&Chunk]) -> Result<Vec<f64>> {
        let (q, _) = encoder::encode_text(self.params, query_text, encoder::ENTITY_TOKEN_BUDGET)
            .map_err(|e| Error::Eval(format!("cannot encode query {query_text:?}: {e}")))?;
        pool.iter()
            .map(|c| {
                let cached = self
                    .cache
                    .get(&c.id())
                    .ok_or_else(|| Error::Eval(format!("chunk {} not in scorer cache", c.id())))?;
                Ok(match cached {
                    Some(emb) => encoder::similarity(&q, emb),
                    None => -2.0,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryResult {
    pub query_id: String,
    pub ranking: Vec<(String, f64)>,
    pub values: [f64; 3],
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub setting: Setting,
    pub per_query: Vec<QueryResult>,
    pub macro_avg: [f64; 3],
}

fn finish_outcome(setting: Setting, per_query: Vec<QueryResult>) -> Result<EvalOutcome> {
    if per_query.is_empty() {
        return Err(Error::Eval("no queries to evaluate".into()));
    }
    let mut macro_avg = [0.0f64; 3];
    for r in &per_query {
        for (acc, v) in macro_avg.iter_mut().zip(r.values) {
            *acc += v;
        }
    }
    for v in macro_avg.iter_mut() {
        *v /= per_query.len() as f64;
    }
    Ok(EvalOutcome {
        setting,
        per_query,
        macro_avg,
    })
}

fn relevant_set(judgments: &Judgments, qid: &str) -> Result<BTreeSet<String>> {
    let rels = judgments
        .relevant(qid)
        .filter(|m| !m.is_empty())
        .ok_or_else(|| Error::Eval(format!("query {qid:?} has no relevance judgments")))?;
    Ok(rels.keys().cloned().collect())
}

/// Single-Patient retrieval: the candidate pool of a query is its own note's
/// chunks; metrics are MRR, NDCG, MAP.
pub fn run_single_patient(
    scorer: &dyn Scorer,
    judgments: &Judgments,
    chunks: &[Chunk],
) -> Result<EvalOutcome> {
    let mut by_note: BTreeMap<&str, Vec<&Chunk>> = BTreeMap::new();
    for c in chunks {
        by_note.entry(c.note_id.as_str()).or_default().push(c);
    }
    let mut per_query = Vec::with_capacity(judgments.query_count());
    for q in judgments.queries() {
        let note = q.note_id.as_deref().ok_or_else(|| {
            Error::Eval(format!(
                "query {} has no note scope; cannot evaluate single-patient",
                q.query_id
            ))
        })?;
        let pool = by_note
            .get(note)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Eval(format!("note {note:?} of query {} has no chunks", q.query_id)))?;
        let scores = scorer.score(&q.text, pool)?;
        let ranking = rank_chunks(
            pool.iter()
                .zip(&scores)
                .map(|(c, s)| (c.id(), *s))
                .collect(),
        )?;
        let relevant = relevant_set(judgments, &q.query_id)?;
        let values = Setting::Single.compute(&ranking, &relevant);
        per_query.push(QueryResult {
            query_id: q.query_id.clone(),
            ranking,
            values,
        });
    }
    finish_outcome(Setting::Single, per_query)
}

/// Multi-Patient retrieval: every query ranks the entire chunk collection;
/// metrics are MRR, NDCG@10, Recall@100.
pub fn run_multi_patient(
    scorer: &dyn Scorer,
    judgments: &Judgments,
    chunks: &[Chunk],
) -> Result<EvalOutcome> {
    if chunks.is_empty() {
        return Err(Error::Eval("empty chunk collection".into()));
    }
    let pool: Vec<&Chunk> = chunks.iter().collect();
    let per_query: Result<Vec<QueryResult>> = judgments
        .queries()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|q| {
            let scores = scorer.score(&q.text, &pool)?;
            let ranking = rank_chunks(
                pool.iter()
                    .zip(&scores)
                    .map(|(c, s)| (c.id(), *s))
                    .collect(),
            )?;
            let relevant = relevant_set(judgments, &q.query_id)?;
            let values = Setting::Multi.compute(&ranking, &relevant);
            Ok(QueryResult {
                query_id: q.query_id.clone(),
                ranking,
                values,
            })
        })
        .collect();
    finish_outcome(Setting::Multi, per_query?)
}

// ---- dissection ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Match,
    Query,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "match" => Ok(Axis::Match),
            "query" => Ok(Axis::Query),
            other => Err(Error::Eval(format!("unknown dissection axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DissectionRow {
    pub category: String,
    pub queries: usize,
    pub values: [f64; 3],
    /// Mean of the three setting metrics — the Tables 4/5 headline number.
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DissectionTable {
    pub axis: Axis,
    pub setting: Setting,
    pub metric_names: [&'static str; 3],
    pub rows: Vec<DissectionRow>,
}

impl DissectionTable {
    pub fn render(&self) -> String {
        let headers: Vec<String> = ["category", "queries"]
            .into_iter()
            .map(String::from)
            .chain(self.metric_names.iter().map(|m| m.to_string()))
            .chain(["mean".to_string()])
            .collect();
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.category.clone(), r.queries.to_string()];
                row.extend(r.values.iter().map(|v| format!("{v:.4}")));
                row.push(format!("{:.4}", r.mean));
                row
            })
            .collect();
        crate::textutil::render_aligned(&headers, &rows)
    }
}

fn mean3(values: [f64; 3]) -> f64 {
    (values[0] + values[1] + values[2]) / 3.0
}

/// Dissects an evaluation by match type or query type.
///
/// Match axis (Single-Patient only): per query and per match type `t`, every
/// chunk relevant to the query with a *different* type is removed from the
/// ranking, the remainder is re-ranked, and the setting metrics are computed
/// against the type-`t` relevant set alone. Query axis: queries are
/// partitioned by their type and the already-computed metrics averaged.
pub fn dissect(outcome: &EvalOutcome, judgments: &Judgments, axis: Axis) -> Result<DissectionTable> {
    match axis {
        Axis::Match => {
            if outcome.setting != Setting::Single {
                return Err(Error::Eval(
                    "match-type dissection is defined for the single-patient setting only".into(),
                ));
            }
            let mut sums: BTreeMap<MatchType, ([f64; 3], usize)> = BTreeMap::new();
            for qr in &outcome.per_query {
                let rels = judgments
                    .relevant(&qr.query_id)
                    .ok_or_else(|| Error::Eval(format!("no judgments for {}", qr.query_id)))?;
                let present: BTreeSet<MatchType> = rels.values().copied().collect();
                for &t in &present {
                    let filtered: Vec<(String, f64)> = qr
                        .ranking
                        .iter()
                        .filter(|(id, _)| rels.get(id).map(|mt| *mt == t).unwrap_or(true))
                        .cloned()
                        .collect();
                    let relevant_t: BTreeSet<String> = rels
                        .iter()
                        .filter(|(_, mt)| **mt == t)
                        .map(|(id, _)| id.clone())
                        .collect();
                    let values = outcome.setting.compute(&filtered, &relevant_t);
                    let entry = sums.entry(t).or_insert(([0.0; 3], 0));
                    for (acc, v) in entry.0.iter_mut().zip(values) {
                        *acc += v;
                    }
                    entry.1 += 1;
                }
            }
            let rows = MatchType::ALL
                .into_iter()
                .filter_map(|t| {
                    let (sum, n) = sums.get(&t)?;
                    let values = [sum[0] / *n as f64, sum[1] / *n as f64, sum[2] / *n as f64];
                    Some(DissectionRow {
                        category: t.to_string(),
                        queries: *n,
                        values,
                        mean: mean3(values),
                    })
                })
                .collect();
            Ok(DissectionTable {
                axis,
                setting: outcome.setting,
                metric_names: outcome.setting.metric_names(),
                rows,
            })
        }
        Axis::Query => {
            let mut sums: BTreeMap<QueryType, ([f64; 3], usize)> = BTreeMap::new();
            for qr in &outcome.per_query {
                let q = judgments
                    .query(&qr.query_id)
                    .ok_or_else(|| Error::Eval(format!("unknown query {}", qr.query_id)))?;
                let entry = sums.entry(q.query_type).or_insert(([0.0; 3], 0));
                for (acc, v) in entry.0.iter_mut().zip(qr.values) {
                    *acc += v;
                }
                entry.1 += 1;
            }
            let rows = QueryType::ALL
                .into_iter()
                .filter_map(|t| {
                    let (sum, n) = sums.get(&t)?;
                    let values = [sum[0] / *n as f64, sum[1] / *n as f64, sum[2] / *n as f64];
                    Some(DissectionRow {
                        category: t.to_string(),
                        queries: *n,
                        values,
                        mean: mean3(values),
                    })
                })
                .collect();
            Ok(DissectionTable {
                axis,
                setting: outcome.setting,
                metric_names: outcome.setting.metric_names(),
                rows,
            })
        }
    }
}

// ---- run files ----

/// TREC-style run rows: query_id, chunk_id, 1-based rank, score.
pub fn write_run(path: &Path, outcome: &EvalOutcome) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for qr in &outcome.per_query {
        for (rank, (chunk, score)) in qr.ranking.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}", qr.query_id, chunk, rank + 1, score)
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_run(path: &Path) -> Result<BTreeMap<String, Vec<(String, f64)>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::parse(path, idx + 1, format!("expected 4 columns, got {}", cols.len())));
        }
        let rank: usize = cols[2]
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, "bad rank"))?;
        let score: f64 = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, "bad score"))?;
        rows.entry(cols[0].to_string())
            .or_default()
            .push((rank, cols[1].to_string(), score));
    }
    let mut out = BTreeMap::new();
    for (qid, mut entries) in rows {
        entries.sort_by_key(|(rank, _, _)| *rank);
        for (i, (rank, _, _)) in entries.iter().enumerate() {
            if *rank != i + 1 {
                return Err(Error::Eval(format!("run for query {qid:?} has non-dense ranks")));
            }
        }
        out.insert(qid, entries.into_iter().map(|(_, c, s)| (c, s)).collect());
    }
    Ok(out)
}

/// Rebuilds an `EvalOutcome` from stored rankings (e.g. a run file), so
/// dissection can work offline from artifacts.
pub fn outcome_from_rankings(
    rankings: &BTreeMap<String, Vec<(String, f64)>>,
    judgments: &Judgments,
    setting: Setting,
) -> Result<EvalOutcome> {
    let mut per_query = Vec::with_capacity(rankings.len());
    for (qid, ranking) in rankings {
        if judgments.query(qid).is_none() {
            return Err(Error::Eval(format!("run references unknown query {qid:?}")));
        }
        let relevant = relevant_set(judgments, qid)?;
        let values = setting.compute(ranking, &relevant);
        per_query.push(QueryResult {
            query_id: qid.clone(),
            ranking: ranking.clone(),
            values,
        });
    }
    finish_outcome(setting, per_query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ranking(ids: &[&str]) -> Vec<(String, f64)> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| (id.to_string(), 1.0 - i as f64 * 0.01))
            .collect()
    }

    fn relset(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn metric_hand_examples() {
        let r = ranking(&["a", "x", "b"]);
        let rel = relset(&["a", "b"]);
        assert_relative_eq!(average_precision(&r, &rel), (1.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
        assert!((average_precision(&r, &rel) - 0.8333).abs() < 5e-5);

        // 2 relevant at ranks 1 and 3
        let r = ranking(&["a", "x", "b", "y"]);
        let n = ndcg(&r, &rel, None);
        let expect = (1.0 + 1.0 / 2.0) / (1.0 + 1.0 / 3f64.log2());
        assert_relative_eq!(n, expect, epsilon = 1e-12);
        assert!((n - 0.9197).abs() < 5e-5);

        assert_eq!(reciprocal_rank(&ranking(&["x", "y", "z", "a"]), &relset(&["a"])), 0.25);
        assert_eq!(reciprocal_rank(&ranking(&["a", "y"]), &relset(&["a"])), 1.0);
        assert_eq!(reciprocal_rank(&ranking(&["x", "y"]), &relset(&["a"])), 0.0);

        // recall
        let rel3 = relset(&["a", "b", "c"]);
        let mut pool: Vec<&str> = vec!["a", "b"];
        let fillers: Vec<String> = (0..120).map(|i| format!("f{i:03}")).collect();
        pool.extend(fillers.iter().map(|s| s.as_str()));
        pool.push("c"); // rank 123 > 100
        let r = ranking(&pool);
        assert_relative_eq!(recall_at(&r, &rel3, 100), 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(recall_at(&ranking(&["a", "b", "c"]), &rel3, 5), 1.0);
        assert_eq!(recall_at(&ranking(&["x", "a"]), &relset(&["a"]), 1), 0.0);

        // perfect prefixes
        assert_eq!(average_precision(&ranking(&["a", "b", "x"]), &rel), 1.0);
        assert_eq!(ndcg(&ranking(&["a", "b", "x"]), &rel, None), 1.0);
        assert_eq!(ndcg(&ranking(&["x", "y"]), &rel, Some(1)), 0.0);
    }

    #[test]
    fn rank_chunks_orders_and_validates() {
        let ranked = rank_chunks(vec![
            ("b".into(), 0.5),
            ("a".into(), 0.5),
            ("c".into(), 0.9),
        ])
        .unwrap();
        let ids: Vec<&str> = ranked.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"], "ties break by id");

        assert!(rank_chunks(vec![("a".into(), f64::NAN)]).is_err());
        assert!(rank_chunks(vec![("a".into(), 0.1), ("a".into(), 0.2)]).is_err());
    }

    // Independent references, written against the textbook definitions.
    fn oracle_rr(ids: &[String], rel: &BTreeSet<String>) -> f64 {
        ids.iter()
            .position(|id| rel.contains(id))
            .map_or(0.0, |p| 1.0 / (p as f64 + 1.0))
    }

    fn oracle_ap(ids: &[String], rel: &BTreeSet<String>) -> f64 {
        if rel.is_empty() {
            return 0.0;
        }
        let mut seen = 0.0;
        let mut total = 0.0;
        for (i, id) in ids.iter().enumerate() {
            if rel.contains(id) {
                seen += 1.0;
                total += seen / (i as f64 + 1.0);
            }
        }
        total / rel.len() as f64
    }

    fn oracle_ndcg(ids: &[String], rel: &BTreeSet<String>, cutoff: Option<usize>) -> f64 {
        if rel.is_empty() {
            return 0.0;
        }
        let k = cutoff.unwrap_or(ids.len());
        let gains: Vec<f64> = ids
            .iter()
            .take(k)
            .map(|id| if rel.contains(id) { 1.0 } else { 0.0 })
            .collect();
        let mut dcg = 0.0;
        for (i, g) in gains.iter().enumerate() {
            dcg += g / ((i as f64 + 2.0).ln() / 2f64.ln());
        }
        let mut ideal: Vec<f64> = vec![1.0; rel.len().min(k)];
        ideal.resize(k.min(ids.len()).max(ideal.len()), 0.0);
        let mut idcg = 0.0;
        for (i, g) in ideal.iter().enumerate() {
            idcg += g / ((i as f64 + 2.0).ln() / 2f64.ln());
        }
        if idcg == 0.0 {
            0.0
        } else {
            dcg / idcg
        }
    }

    fn oracle_recall(ids: &[String], rel: &BTreeSet<String>, k: usize) -> f64 {
        if rel.is_empty() {
            return 0.0;
        }
        ids.iter().take(k).filter(|id| rel.contains(*id)).count() as f64 / rel.len() as f64
    }

    #[test]
    fn metrics_match_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let t0 = std::time::Instant::now();
        for _ in 0..1000 {
            let n = rng.random_range(1..40usize);
            let ranking: Vec<(String, f64)> = (0..n).map(|i| (format!("d{i:02}"), -(i as f64))).collect();
            let ids: Vec<String> = ranking.iter().map(|(id, _)| id.clone()).collect();
            // relevant may include documents outside the ranking
            let rel: BTreeSet<String> = (0..rng.random_range(1..8usize))
                .map(|_| format!("d{:02}", rng.random_range(0..50)))
                .collect();
            let cutoff = match rng.random_range(0..3u8) {
                0 => None,
                1 => Some(10),
                _ => Some(rng.random_range(1..15usize)),
            };
            let checks = [
                (reciprocal_rank(&ranking, &rel), oracle_rr(&ids, &rel)),
                (average_precision(&ranking, &rel), oracle_ap(&ids, &rel)),
                (ndcg(&ranking, &rel, cutoff), oracle_ndcg(&ids, &rel, cutoff)),
                (recall_at(&ranking, &rel, 100), oracle_recall(&ids, &rel, 100)),
            ];
            for (got, want) in checks {
                assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
                assert!((0.0..=1.0 + 1e-12).contains(&got));
            }
        }
        assert!(t0.elapsed().as_secs() < 10);
    }

    #[test]
    fn metrics_depend_only_on_ranking_order() {
        let rel = relset(&["a", "c"]);
        let base = vec![
            ("a".to_string(), 9.0),
            ("b".to_string(), 5.0),
            ("c".to_string(), 3.0),
            ("d".to_string(), 2.0),
            ("e".to_string(), 1.0),
        ];
        let scaled: Vec<(String, f64)> = base.iter().map(|(id, s)| (id.clone(), s * 42.0)).collect();
        for (r1, r2) in [(&base, &scaled)] {
            assert_eq!(reciprocal_rank(r1, &rel), reciprocal_rank(r2, &rel));
            assert_eq!(average_precision(r1, &rel), average_precision(r2, &rel));
            assert_eq!(ndcg(r1, &rel, None), ndcg(r2, &rel, None));
            assert_eq!(recall_at(r1, &rel, 3), recall_at(r2, &rel, 3));
        }
        // permuting irrelevant docs below the last relevant one
        let permuted = vec![
            base[0].clone(),
            base[1].clone(),
            base[2].clone(),
            ("e".to_string(), 2.0),
            ("d".to_string(), 1.0),
        ];
        assert_eq!(reciprocal_rank(&base, &rel), reciprocal_rank(&permuted, &rel));
        assert_eq!(average_precision(&base, &rel), average_precision(&permuted, &rel));
        assert_eq!(ndcg(&base, &rel, None), ndcg(&permuted, &rel, None));
        // recall monotone in k
        let mut prev = 0.0;
        for k in 1..=5 {
            let r = recall_at(&base, &rel, k);
            assert!(r >= prev);
            prev = r;
        }
    }

    fn chunk(note: &str, ordinal: usize, text: &str) -> Chunk {
        Chunk {
            note_id: note.to_string(),
            ordinal,
            start_word: 0,
            end_word: text.split_whitespace().count(),
            text: text.to_string(),
        }
    }

    fn toy_judgments() -> Judgments {
        Judgments::new(
            vec![QueryRecord {
                query_id: "q1".into(),
                note_id: Some("n1".into()),
                text: "target term".into(),
                query_type: QueryType::Disease,
            }],
            vec![("q1".into(), "n1#0".into(), MatchType::String)],
        )
        .unwrap()
    }

    /// Ranks judged-relevant chunks first — the oracle ceiling.
    struct OracleScorer<'a> {
        judgments: &'a Judgments,
        query_ids: BTreeMap<String, String>, // query text -> query id
    }

    impl Scorer for OracleScorer<'_> {
        fn score(&self, query_text: &str, pool: &[&Chunk]) -> Result<Vec<f64>> {
            let qid = &self.query_ids[query_text];
            let rel = self.judgments.relevant(qid).unwrap();
            Ok(pool
                .iter()
                .map(|c| if rel.contains_key(&c.id()) { 1.0 } else { 0.0 })
                .collect())
        }
    }

    #[test]
    fn oracle_scorer_reaches_the_ceiling_in_both_settings() {
        let judgments = toy_judgments();
        let chunks = vec![
            chunk("n1", 0, "alpha"),
            chunk("n1", 1, "beta"),
            chunk("n1", 2, "gamma"),
            chunk("n2", 0, "delta"),
        ];
        let scorer = OracleScorer {
            judgments: &judgments,
            query_ids: [("target term".to_string(), "q1".to_string())].into_iter().collect(),
        };
        let single = run_single_patient(&scorer, &judgments, &chunks).unwrap();
        assert_eq!(single.macro_avg, [1.0, 1.0, 1.0]);
        assert_eq!(single.per_query[0].ranking.len(), 3, "pool is the query's note only");
        let multi = run_multi_patient(&scorer, &judgments, &chunks).unwrap();
        assert_eq!(multi.macro_avg, [1.0, 1.0, 1.0]);
        assert_eq!(multi.per_query[0].ranking.len(), 4, "pool is the whole collection");
    }

    struct RandomScorer {
        seed: u64,
    }

    impl Scorer for RandomScorer {
        fn score(&self, _query_text: &str, pool: &[&Chunk]) -> Result<Vec<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            Ok(pool.iter().map(|_| rng.random::<f64>()).collect())
        }
    }

    fn binom(n: usize, k: usize) -> f64 {
        if k > n {
            return 0.0;
        }
        let mut out = 1.0;
        for i in 0..k {
            out *= (n - i) as f64 / (k - i) as f64;
        }
        out
    }

    #[test]
    fn random_scorer_matches_the_closed_form_mrr() {
        // n chunks, R relevant, uniform random ranking:
        // P(first relevant at rank k) = C(n-k, R-1) / C(n, R).
        let n = 8;
        let relevant = ["n1#2", "n1#5"];
        let r = relevant.len();
        let mut e_rr = 0.0;
        let mut e_rr2 = 0.0;
        for k in 1..=(n - r + 1) {
            let p = binom(n - k, r - 1) / binom(n, r);
            e_rr += p / k as f64;
            e_rr2 += p / (k * k) as f64;
        }
        let var = e_rr2 - e_rr * e_rr;

        let chunks: Vec<Chunk> = (0..n).map(|i| chunk("n1", i, &format!("w{i}"))).collect();
        let judgments = Judgments::new(
            vec![QueryRecord {
                query_id: "q1".into(),
                note_id: Some("n1".into()),
                text: "anything".into(),
                query_type: QueryType::Drug,
            }],
            relevant
                .iter()
                .map(|c| ("q1".to_string(), c.to_string(), MatchType::String))
                .collect(),
        )
        .unwrap();

        let trials = 100;
        let mut mean = 0.0;
        for seed in 0..trials {
            let scorer = RandomScorer { seed };
            let out = run_single_patient(&scorer, &judgments, &chunks).unwrap();
            mean += out.per_query[0].values[0];
        }
        mean /= trials as f64;
        let sigma_mean = (var / trials as f64).sqrt();
        assert!(
            (mean - e_rr).abs() < 2.0 * sigma_mean,
            "mean {mean} expectation {e_rr} sigma {sigma_mean}"
        );
    }

    #[test]
    fn single_patient_requires_note_scope_and_chunks() {
        let chunks = vec![chunk("n1", 0, "alpha")];
        let scorer = RandomScorer { seed: 0 };
        // unknown note
        let mut judgments = Judgments::new(
            vec![QueryRecord {
                query_id: "q1".into(),
                note_id: Some("missing".into()),
                text: "t".into(),
                query_type: QueryType::Drug,
            }],
            vec![("q1".into(), "n1#0".into(), MatchType::String)],
        )
        .unwrap();
        assert!(run_single_patient(&scorer, &judgments, &chunks).is_err());
        // no note scope
        judgments = Judgments::new(
            vec![QueryRecord {
                query_id: "q1".into(),
                note_id: None,
                text: "t".into(),
                query_type: QueryType::Drug,
            }],
            vec![("q1".into(), "n1#0".into(), MatchType::String)],
        )
        .unwrap();
        assert!(run_single_patient(&scorer, &judgments, &chunks).is_err());
    }

    #[test]
    fn dissection_applies_the_removal_rule() {
        // ranking: [string-chunk, synonym-chunk, x]
        let judgments = Judgments::new(
            vec![QueryRecord {
                query_id: "q1".into(),
                note_id: Some("n1".into()),
                text: "t".into(),
                query_type: QueryType::Disease,
            }],
            vec![
                ("q1".into(), "n1#0".into(), MatchType::String),
                ("q1".into(), "n1#1".into(), MatchType::Synonym),
            ],
        )
        .unwrap();
        let ranking = vec![
            ("n1#0".to_string(), 0.9),
            ("n1#1".to_string(), 0.8),
            ("n1#2".to_string(), 0.7),
        ];
        let rel = relset(&["n1#0", "n1#1"]);
        let outcome = EvalOutcome {
            setting: Setting::Single,
            per_query: vec![QueryResult {
                query_id: "q1".into(),
                values: Setting::Single.compute(&ranking, &rel),
                ranking,
            }],
            macro_avg: [0.0; 3],
        };
        let table = dissect(&outcome, &judgments, Axis::Match).unwrap();
        assert_eq!(table.rows.len(), 2);
        let syn = table.rows.iter().find(|r| r.category == "synonym").unwrap();
        // string chunk removed -> synonym chunk promoted to rank 1
        assert_eq!(syn.values[0], 1.0);
        assert_eq!(syn.values, [1.0, 1.0, 1.0]);
        let s = table.rows.iter().find(|r| r.category == "string").unwrap();
        assert_eq!(s.values[0], 1.0);
    }

    #[test]
    fn single_type_dissection_is_a_no_op_and_query_axis_partitions() {
        let judgments = toy_judgments();
        let ranking = vec![
            ("n1#1".to_string(), 0.9),
            ("n1#0".to_string(), 0.8),
            ("n1#2".to_string(), 0.7),
        ];
        let rel = relset(&["n1#0"]);
        let values = Setting::Single.compute(&ranking, &rel);
        let outcome = EvalOutcome {
            setting: Setting::Single,
            per_query: vec![QueryResult {
                query_id: "q1".into(),
                values,
                ranking,
            }],
            macro_avg: values,
        };
        let table = dissect(&outcome, &judgments, Axis::Match).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].values, values, "single type: removal is a no-op");

        let qt = dissect(&outcome, &judgments, Axis::Query).unwrap();
        assert_eq!(qt.rows.len(), 1);
        assert_eq!(qt.rows[0].category, "disease");
        assert_eq!(qt.rows[0].values, outcome.macro_avg, "one type: equals overall");

        // match axis on a multi outcome is rejected
        let multi = EvalOutcome {
            setting: Setting::Multi,
            per_query: outcome.per_query.clone(),
            macro_avg: outcome.macro_avg,
        };
        assert!(dissect(&multi, &judgments, Axis::Match).is_err());
    }

    #[test]
    fn judgments_files_round_trip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let qp = dir.path().join("queries.tsv");
        let rp = dir.path().join("qrels.tsv");
        let judgments = Judgments::new(
            vec![
                QueryRecord {
                    query_id: "q1".into(),
                    note_id: Some("n1".into()),
                    text: "heart failure".into(),
                    query_type: QueryType::Disease,
                },
                QueryRecord {
                    query_id: "q2".into(),
                    note_id: None,
                    text: "furosemide".into(),
                    query_type: QueryType::Drug,
                },
            ],
            vec![
                ("q1".into(), "n1#0".into(), MatchType::String),
                ("q1".into(), "n1#2".into(), MatchType::Synonym),
                ("q2".into(), "n2#1".into(), MatchType::Implication),
            ],
        )
        .unwrap();
        judgments.dump(&qp, &rp).unwrap();
        let back = Judgments::load(&qp, &rp).unwrap();
        assert_eq!(judgments, back);
        assert_eq!(back.query("q2").unwrap().note_id, None);

        // non-binary relevance rejected
        std::fs::write(dir.path().join("bad.tsv"), "q1\tn1#0\t2\tstring\tdisease\n").unwrap();
        assert!(load_qrels(&dir.path().join("bad.tsv")).is_err());
        // duplicate pair rejected
        std::fs::write(
            &rp,
            "q1\tn1#0\t1\tstring\tdisease\nq1\tn1#0\t1\tsynonym\tdisease\n",
        )
        .unwrap();
        assert!(Judgments::load(&qp, &rp).is_err());
        // type disagreement rejected
        std::fs::write(&rp, "q1\tn1#0\t1\tstring\tdrug\n").unwrap();
        assert!(Judgments::load(&qp, &rp).is_err());
    }

    #[test]
    fn run_files_round_trip_and_rebuild_outcomes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.tsv");
        let judgments = toy_judgments();
        let ranking = vec![("n1#0".to_string(), 0.75), ("n1#1".to_string(), 0.25)];
        let outcome = EvalOutcome {
            setting: Setting::Single,
            per_query: vec![QueryResult {
                query_id: "q1".into(),
                values: Setting::Single.compute(&ranking, &relset(&["n1#0"])),
                ranking,
            }],
            macro_avg: [1.0, 1.0, 1.0],
        };
        write_run(&path, &outcome).unwrap();
        let rankings = load_run(&path).unwrap();
        assert_eq!(rankings["q1"].len(), 2);
        assert_eq!(rankings["q1"][0], ("n1#0".to_string(), 0.75));
        let rebuilt = outcome_from_rankings(&rankings, &judgments, Setting::Single).unwrap();
        assert_eq!(rebuilt.macro_avg, [1.0, 1.0, 1.0]);

        std::fs::write(&path, "q1\tn1#0\t2\t0.5\n").unwrap();
        assert!(load_run(&path).is_err(), "non-dense ranks rejected");
    }
}
