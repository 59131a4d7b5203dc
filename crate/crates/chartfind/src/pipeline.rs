//! Run-directory orchestration: a layered TOML config, one function per
//! pipeline stage, resumable end-to-end runs, ablation switches, and the
//! summary report.
//!
//! Every stage reads its inputs from the config paths or the run directory
//! and writes its artifacts back there, so each one doubles as a standalone
//! CLI subcommand and a crashed run can resume from the last completed stage.
//! The top-level seed derives every component seed (pair sampling, encoder
//! init, epoch shuffling); per-stage `TrainConfig.seed` values in the file
//! are overwritten so one number governs the whole run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Chunk};
use crate::encoder::{EncoderParams, Vocabulary, DEFAULT_DIM, DEFAULT_OOV_BUCKETS};
use crate::error::{Error, Result};
use crate::evalkit::{
    dissect, run_multi_patient, run_single_patient, Axis, DissectionTable, EncoderScorer,
    EvalOutcome, Judgments, QueryType, Setting,
};
use crate::hashing::{derive_seed, fnv1a_64};
use crate::kg::{self, KnowledgeGraph};
use crate::matcher::{self, MentionRecord};
use crate::pairgen::{
    self, ChunkAbbreviations, GeneratorClient, HttpGeneratorClient, MockGeneratorClient,
    PositiveSet, Source,
};
use crate::trainer::{self, LossRecord, MslConfig, TrainConfig, TrainExample};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub notes: PathBuf,
    pub concepts: PathBuf,
    pub relations: PathBuf,
    /// Run directory; every artifact lands here.
    pub output: PathBuf,
    #[serde(default)]
    pub queries_single: Option<PathBuf>,
    #[serde(default)]
    pub qrels_single: Option<PathBuf>,
    #[serde(default)]
    pub queries_multi: Option<PathBuf>,
    #[serde(default)]
    pub qrels_multi: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_overlap")]
    pub overlap: usize,
    #[serde(default = "default_masks")]
    pub masks: Vec<String>,
}

fn default_window() -> usize {
    corpus::DEFAULT_WINDOW
}
fn default_overlap() -> usize {
    corpus::DEFAULT_OVERLAP
}
fn default_masks() -> Vec<String> {
    vec![corpus::DEFAULT_MASK_PATTERN.to_string()]
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            window: default_window(),
            overlap: default_overlap(),
            masks: default_masks(),
        }
    }
}

/// Generator backend. `mock` answers deterministically from the KG plus an
/// abbreviation table; `http` reads its endpoint from the GEN_* env vars.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClientConfig {
    Mock {
        abbreviations: PathBuf,
        #[serde(default)]
        noise_seed: u64,
    },
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_oov")]
    pub oov_buckets: u32,
}

fn default_dim() -> usize {
    DEFAULT_DIM
}
fn default_oov() -> u32 {
    DEFAULT_OOV_BUCKETS
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: default_dim(),
            oov_buckets: default_oov(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    pub client: ClientConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "TrainConfig::stage1_defaults")]
    pub stage1: TrainConfig,
    #[serde(default = "TrainConfig::stage2_defaults")]
    pub stage2: TrainConfig,
    #[serde(default)]
    pub msl: MslConfig,
}

impl PipelineConfig {
    /// Loads a TOML config. Relative paths inside the file are resolved
    /// against the file's own directory, so a config can travel with its data.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        anchor(&mut self.paths.notes);
        anchor(&mut self.paths.concepts);
        anchor(&mut self.paths.relations);
        anchor(&mut self.paths.output);
        for opt in [
            &mut self.paths.queries_single,
            &mut self.paths.qrels_single,
            &mut self.paths.queries_multi,
            &mut self.paths.qrels_multi,
        ] {
            if let Some(p) = opt {
                anchor(p);
            }
        }
        if let ClientConfig::Mock { abbreviations, .. } = &mut self.client {
            anchor(abbreviations);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks referenced inputs exist and sub-configs validate.
    pub fn validate(&self) -> Result<()> {
        let mut required: Vec<(&str, &Path)> = vec![
            ("notes", &self.paths.notes),
            ("concepts", &self.paths.concepts),
            ("relations", &self.paths.relations),
        ];
        if let ClientConfig::Mock { abbreviations, .. } = &self.client {
            required.push(("abbreviations", abbreviations));
        }
        for pair in [
            ("queries_single", &self.paths.queries_single, "qrels_single", &self.paths.qrels_single),
            ("queries_multi", &self.paths.queries_multi, "qrels_multi", &self.paths.qrels_multi),
        ] {
            match (pair.1, pair.3) {
                (Some(q), Some(r)) => {
                    required.push((pair.0, q));
                    required.push((pair.2, r));
                }
                (None, None) => {}
                _ => {
                    return Err(Error::Config(format!(
                        "{} and {} must be configured together",
                        pair.0, pair.2
                    )))
                }
            }
        }
        for (name, path) in required {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "{name} path does not exist: {}",
                    path.display()
                )));
            }
        }
        if self.corpus.overlap >= self.corpus.window {
            return Err(Error::Config("corpus overlap must be smaller than window".into()));
        }
        corpus::compile_masks(&self.corpus.masks)?;
        if self.encoder.dim == 0 || self.encoder.oov_buckets == 0 {
            return Err(Error::Config("encoder dim and oov_buckets must be positive".into()));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.msl.validate()
    }

    /// FNV-64 over the canonical JSON of config + switches; two runs with the
    /// same hash and seed are byte-identical.
    pub fn config_hash(&self, switches: &AblationSwitches) -> String {
        let cfg = serde_json::to_string(self).expect("config serializes");
        let sw = serde_json::to_string(switches).expect("switches serialize");
        format!("{:016x}", fnv1a_64([cfg, sw].concat().as_bytes()))
    }

    pub fn run_paths(&self) -> RunPaths {
        RunPaths::new(&self.paths.output)
    }

    fn masks(&self) -> Result<Vec<regex::Regex>> {
        corpus::compile_masks(&self.corpus.masks)
    }

    fn kg(&self) -> Result<KnowledgeGraph> {
        kg::load_kg(&self.paths.concepts, &self.paths.relations)
    }

    fn with_client<T>(
        &self,
        kg: &KnowledgeGraph,
        f: impl FnOnce(&dyn GeneratorClient) -> Result<T>,
    ) -> Result<T> {
        match &self.client {
            ClientConfig::Mock {
                abbreviations,
                noise_seed,
            } => {
                let text = fs::read_to_string(abbreviations)
                    .map_err(|e| Error::io(abbreviations, e))?;
                let table: BTreeMap<String, String> = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", abbreviations.display())))?;
                let client = MockGeneratorClient::new(kg, table, *noise_seed)?;
                f(&client)
            }
            ClientConfig::Http => {
                let client = HttpGeneratorClient::from_env()?;
                f(&client)
            }
        }
    }
}

/// Artifact locations inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths { dir: dir.to_path_buf() }
    }

    pub fn chunks(&self) -> PathBuf {
        self.dir.join("chunks.jsonl")
    }
    pub fn mentions(&self) -> PathBuf {
        self.dir.join("mentions.jsonl")
    }
    pub fn abbreviations(&self) -> PathBuf {
        self.dir.join("abbreviations.jsonl")
    }
    pub fn pairs(&self, stage: u8) -> PathBuf {
        self.dir.join(format!("pairs_stage{stage}.jsonl"))
    }
    pub fn loss(&self, stage: u8) -> PathBuf {
        self.dir.join(format!("loss_stage{stage}.csv"))
    }
    pub fn encoder(&self, stage: u8) -> PathBuf {
        self.dir.join(format!("encoder_stage{stage}.bin"))
    }
    pub fn run_file(&self, setting: Setting) -> PathBuf {
        match setting {
            Setting::Single => self.dir.join("run_single.tsv"),
            Setting::Multi => self.dir.join("run_multi.tsv"),
        }
    }
    pub fn report_json(&self) -> PathBuf {
        self.dir.join("report.json")
    }
    pub fn report_text(&self) -> PathBuf {
        self.dir.join("report.txt")
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    /// The encoder the evaluation stage should score with: the furthest
    /// trained checkpoint present.
    pub fn final_encoder(&self) -> Result<PathBuf> {
        for stage in [2u8, 1] {
            let p = self.encoder(stage);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::Config(format!(
            "no trained encoder found under {}",
            self.dir.display()
        )))
    }
}

/// Table 3/4/5-style experiment switches.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSwitches {
    /// Skip Stage-I pair generation and training (Table 3, "w/o stage I").
    #[serde(default)]
    pub without_stage1: bool,
    /// Drop these pair sources from the Stage-I training data (Table 4 rows).
    #[serde(default)]
    pub disabled_sources: BTreeSet<Source>,
    /// Restrict Stage-II training pairs to one query type (Table 5 rows).
    #[serde(default)]
    pub stage2_only: Option<QueryType>,
}

impl AblationSwitches {
    pub fn is_noop(&self) -> bool {
        *self == AblationSwitches::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Chunk,
    Match,
    Abbrev,
    Pairs1,
    Train1,
    Pairs2,
    Train2,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Chunk,
        Stage::Match,
        Stage::Abbrev,
        Stage::Pairs1,
        Stage::Train1,
        Stage::Pairs2,
        Stage::Train2,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Chunk => "chunk",
            Stage::Match => "match",
            Stage::Abbrev => "abbrev",
            Stage::Pairs1 => "stage1-pairs",
            Stage::Train1 => "stage1-train",
            Stage::Pairs2 => "stage2-pairs",
            Stage::Train2 => "stage2-train",
            Stage::Evaluate => "evaluate",
        }
    }

    fn outputs(self, paths: &RunPaths) -> Vec<PathBuf> {
        match self {
            Stage::Chunk => vec![paths.chunks()],
            Stage::Match => vec![paths.mentions()],
            Stage::Abbrev => vec![paths.abbreviations()],
            Stage::Pairs1 => vec![paths.pairs(1)],
            Stage::Train1 => vec![paths.encoder(1), paths.loss(1)],
            Stage::Pairs2 => vec![paths.pairs(2)],
            Stage::Train2 => vec![paths.encoder(2), paths.loss(2)],
            Stage::Evaluate => vec![paths.report_json(), paths.report_text()],
        }
    }
}

/// The stages an end-to-end run executes under the given switches.
pub fn plan(switches: &AblationSwitches) -> Vec<Stage> {
    Stage::ALL
        .into_iter()
        .filter(|s| {
            !(switches.without_stage1 && matches!(s, Stage::Pairs1 | Stage::Train1))
        })
        .collect()
}

// ---- stage functions ----

pub fn stage_chunk(cfg: &PipelineConfig) -> Result<Vec<Chunk>> {
    let notes = corpus::load_notes(&cfg.paths.notes)?;
    let masks = cfg.masks()?;
    let chunks = corpus::chunk_corpus(notes, &masks, cfg.corpus.window, cfg.corpus.overlap);
    if chunks.is_empty() {
        return Err(Error::Config("corpus produced no chunks".into()));
    }
    corpus::write_chunks(&cfg.run_paths().chunks(), &chunks)?;
    Ok(chunks)
}

pub fn stage_match(cfg: &PipelineConfig) -> Result<Vec<MentionRecord>> {
    let paths = cfg.run_paths();
    let chunks = corpus::load_chunks(&paths.chunks())?;
    let kg = cfg.kg()?;
    let automaton = matcher::build_automaton(&kg)?;
    let records: Vec<MentionRecord> = chunks
        .par_iter()
        .flat_map_iter(|chunk| {
            matcher::find_mentions(&automaton, &chunk.text)
                .into_iter()
                .map(|mention| MentionRecord {
                    chunk_id: chunk.id(),
                    mention,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    matcher::write_mentions(&paths.mentions(), &records)?;
    Ok(records)
}

pub fn stage_abbrev(cfg: &PipelineConfig) -> Result<Vec<ChunkAbbreviations>> {
    let paths = cfg.run_paths();
    let chunks = corpus::load_chunks(&paths.chunks())?;
    let kg = cfg.kg()?;
    let records = cfg.with_client(&kg, |client| pairgen::reduce_corpus(client, &chunks, &kg))?;
    pairgen::write_abbreviations(&paths.abbreviations(), &records)?;
    Ok(records)
}

pub fn stage_pairs1(cfg: &PipelineConfig) -> Result<Vec<PositiveSet>> {
    let paths = cfg.run_paths();
    let chunks = corpus::load_chunks(&paths.chunks())?;
    let kg = cfg.kg()?;
    let automaton = matcher::build_automaton(&kg)?;
    let abbrevs = pairgen::abbreviation_map(&pairgen::load_abbreviations(&paths.abbreviations())?);
    let sets = pairgen::build_stage1_dataset(
        &kg,
        &automaton,
        &chunks,
        &abbrevs,
        derive_seed(cfg.seed, "stage1-pairs"),
    )?;
    pairgen::write_pairs(&paths.pairs(1), &sets)?;
    Ok(sets)
}

pub fn stage_pairs2(cfg: &PipelineConfig) -> Result<Vec<PositiveSet>> {
    let paths = cfg.run_paths();
    let chunks = corpus::load_chunks(&paths.chunks())?;
    let kg = cfg.kg()?;
    let sets = cfg.with_client(&kg, |client| pairgen::build_stage2_dataset(client, &chunks))?;
    pairgen::write_pairs(&paths.pairs(2), &sets)?;
    Ok(sets)
}

/// Pair sets -> training examples. Terms are kept as-is (one entry per
/// surviving sample), so a term contributed by several sources is sampled
/// proportionally more often.
pub fn to_examples(chunks: &[Chunk], sets: &[PositiveSet]) -> Result<Vec<TrainExample>> {
    let text: BTreeMap<String, &str> = chunks.iter().map(|c| (c.id(), c.text.as_str())).collect();
    sets.iter()
        .map(|s| {
            let t = text.get(&s.chunk_id).ok_or_else(|| {
                Error::Config(format!("pairs reference unknown chunk {:?}", s.chunk_id))
            })?;
            Ok(TrainExample {
                chunk_id: s.chunk_id.clone(),
                text: (*t).to_string(),
                positives: s.samples.iter().map(|x| x.term.clone()).collect(),
            })
        })
        .collect()
}

fn build_vocab(chunks: &[Chunk], sets: &[PositiveSet], oov_buckets: u32) -> Result<Vocabulary> {
    let texts = chunks
        .iter()
        .map(|c| c.text.as_str())
        .chain(sets.iter().flat_map(|s| s.samples.iter().map(|x| x.term.as_str())));
    Vocabulary::build(texts, oov_buckets)
}

pub fn stage_train1(cfg: &PipelineConfig, switches: &AblationSwitches) -> Result<EncoderParams> {
    let paths = cfg.run_paths();
    let chunks = corpus::load_chunks(&paths.chunks())?;
    let sets = pairgen::load_pairs(&paths.pairs(1))?;
    let sets = pairgen::filter_sources(&sets, &switches.disabled_sources);
    let dataset = to_examples(&chunks, &sets)?;
    let vocab = build_vocab(&chunks, &sets, cfg.encoder.oov_buckets)?;
    let params = EncoderParams::init(vocab, cfg.encoder.dim, derive_seed(cfg.seed, "encoder-init"));
    let mut tc = cfg.stage1.clone();
    tc.seed = derive_seed(cfg.seed, "stage1-train");
    let outcome = trainer::train(&dataset, params, &tc, &cfg.msl)?;
    outcome.params.save(&paths.encoder(1))?;
    trainer::write_loss_history(&paths.loss(1), &outcome.history)?;
    Ok(outcome.params)
}

pub fn stage_train2(cfg: &PipelineConfig, switches: &AblationSwitches) -> Result<EncoderParams> {
    let paths = cfg.run_paths();
    let chunks = corpus::load_chunks(&paths.chunks())?;
    let sets = pairgen::load_pairs(&paths.pairs(2))?;
    let sets = match switches.stage2_only {
        Some(qt) => {
            let keep = match qt {
                QueryType::Disease => Source::SynDisease,
                QueryType::Procedure => Source::SynProcedure,
                QueryType::Drug => Source::SynDrug,
            };
            let drop: BTreeSet<Source> = Source::ALL.into_iter().filter(|s| *s != keep).collect();
            pairgen::filter_sources(&sets, &drop)
        }
        None => sets,
    };
    let dataset = to_examples(&chunks, &sets)?;
    let params = if switches.without_stage1 {
        let vocab = build_vocab(&chunks, &sets, cfg.encoder.oov_buckets)?;
        EncoderParams::init(vocab, cfg.encoder.dim, derive_seed(cfg.seed, "encoder-init"))
    } else {
        EncoderParams::load(&paths.encoder(1))?
    };
    let mut tc = cfg.stage2.clone();
    tc.seed = derive_seed(cfg.seed, "stage2-train");
    let outcome = trainer::train(&dataset, params, &tc, &cfg.msl)?;
    outcome.params.save(&paths.encoder(2))?;
    trainer::write_loss_history(&paths.loss(2), &outcome.history)?;
    Ok(outcome.params)
}

// ---- report ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub category: String,
    pub queries: usize,
    pub values: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportTable {
    pub axis: String,
    pub metrics: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    fn from_dissection(t: &DissectionTable) -> Self {
        ReportTable {
            axis: match t.axis {
                Axis::Match => "match".into(),
                Axis::Query => "query".into(),
            },
            metrics: t.metric_names.iter().map(|m| m.to_string()).collect(),
            rows: t
                .rows
                .iter()
                .map(|r| ReportRow {
                    category: r.category.clone(),
                    queries: r.queries,
                    values: r.values.to_vec(),
                    mean: r.mean,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuerySummary {
    pub query_id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingReport {
    pub setting: String,
    pub metrics: Vec<String>,
    pub queries: usize,
    pub macro_avg: Vec<f64>,
    pub per_query: Vec<QuerySummary>,
    pub dissections: Vec<ReportTable>,
}

impl SettingReport {
    fn build(outcome: &EvalOutcome, judgments: &Judgments) -> Result<Self> {
        let axes: &[Axis] = match outcome.setting {
            Setting::Single => &[Axis::Match, Axis::Query],
            Setting::Multi => &[Axis::Query],
        };
        let dissections = axes
            .iter()
            .map(|&axis| dissect(outcome, judgments, axis).map(|t| ReportTable::from_dissection(&t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(SettingReport {
            setting: match outcome.setting {
                Setting::Single => "single-patient".into(),
                Setting::Multi => "multi-patient".into(),
            },
            metrics: outcome
                .setting
                .metric_names()
                .iter()
                .map(|m| m.to_string())
                .collect(),
            queries: outcome.per_query.len(),
            macro_avg: outcome.macro_avg.to_vec(),
            per_query: outcome
                .per_query
                .iter()
                .map(|q| QuerySummary {
                    query_id: q.query_id.clone(),
                    values: q.values.to_vec(),
                })
                .collect(),
            dissections,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

impl TrainSummary {
    fn from_history(history: &[LossRecord]) -> Option<Self> {
        let (first, last) = (history.first()?, history.last()?);
        Some(TrainSummary {
            steps: history.len(),
            first_loss: first.loss,
            final_loss: last.loss,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub chunks: usize,
    pub stage1: Option<TrainSummary>,
    pub stage2: Option<TrainSummary>,
    pub single: Option<SettingReport>,
    pub multi: Option<SettingReport>,
}

impl Report {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run report");
        let _ = writeln!(out, "config {}  seed {}  chunks {}", self.config_hash, self.seed, self.chunks);
        for (label, summary) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if let Some(s) = summary {
                let _ = writeln!(
                    out,
                    "{label}: {} steps, loss {:.4} -> {:.4}",
                    s.steps, s.first_loss, s.final_loss
                );
            }
        }
        for setting in [&self.single, &self.multi].into_iter().flatten() {
            let _ = writeln!(out);
            let metrics: Vec<String> = setting
                .metrics
                .iter()
                .zip(&setting.macro_avg)
                .map(|(m, v)| format!("{m} {v:.4}"))
                .collect();
            let _ = writeln!(
                out,
                "{} ({} queries): {}",
                setting.setting,
                setting.queries,
                metrics.join("  ")
            );
            for table in &setting.dissections {
                let _ = writeln!(out, "\n{} axis", table.axis);
                let headers: Vec<String> = ["category", "queries"]
                    .into_iter()
                    .map(String::from)
                    .chain(table.metrics.iter().cloned())
                    .chain(["mean".to_string()])
                    .collect();
                let rows: Vec<Vec<String>> = table
                    .rows
                    .iter()
                    .map(|r| {
                        let mut row = vec![r.category.clone(), r.queries.to_string()];
                        row.extend(r.values.iter().map(|v| format!("{v:.4}")));
                        row.push(format!("{:.4}", r.mean));
                        row
                    })
                    .collect();
                out.push_str(&crate::textutil::render_aligned(&headers, &rows));
            }
        }
        out
    }
}

pub fn stage_evaluate(cfg: &PipelineConfig, switches: &AblationSwitches) -> Result<Report> {
    let paths = cfg.run_paths();
    let chunks = corpus::load_chunks(&paths.chunks())?;
    let params = EncoderParams::load(&paths.final_encoder()?)?;
    let scorer = EncoderScorer::new(&params, &chunks);

    let mut single = None;
    if let (Some(q), Some(r)) = (&cfg.paths.queries_single, &cfg.paths.qrels_single) {
        let judgments = Judgments::load(q, r)?;
        let outcome = run_single_patient(&scorer, &judgments, &chunks)?;
        crate::evalkit::write_run(&paths.run_file(Setting::Single), &outcome)?;
        single = Some(SettingReport::build(&outcome, &judgments)?);
    }
    let mut multi = None;
    if let (Some(q), Some(r)) = (&cfg.paths.queries_multi, &cfg.paths.qrels_multi) {
        let judgments = Judgments::load(q, r)?;
        let outcome = run_multi_patient(&scorer, &judgments, &chunks)?;
        crate::evalkit::write_run(&paths.run_file(Setting::Multi), &outcome)?;
        multi = Some(SettingReport::build(&outcome, &judgments)?);
    }
    if single.is_none() && multi.is_none() {
        return Err(Error::Config("no evaluation queries configured".into()));
    }

    let load_summary = |stage: u8| -> Result<Option<TrainSummary>> {
        let p = paths.loss(stage);
        if !p.exists() {
            return Ok(None);
        }
        Ok(TrainSummary::from_history(&trainer::load_loss_history(&p)?))
    };
    let report = Report {
        config_hash: cfg.config_hash(switches),
        seed: cfg.seed,
        chunks: chunks.len(),
        stage1: load_summary(1)?,
        stage2: load_summary(2)?,
        single,
        multi,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("serialize report: {e}")))?;
    fs::write(paths.report_json(), json).map_err(|e| Error::io(paths.report_json(), e))?;
    fs::write(paths.report_text(), report.render_text())
        .map_err(|e| Error::io(paths.report_text(), e))?;
    Ok(report)
}

// ---- manifest & end-to-end run ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub completed: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize manifest: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn run_stage(cfg: &PipelineConfig, switches: &AblationSwitches, stage: Stage) -> Result<Option<Report>> {
    let wrap = |e: Error| e.in_stage(stage.name());
    match stage {
        Stage::Chunk => stage_chunk(cfg).map_err(wrap).map(|_| None),
        Stage::Match => stage_match(cfg).map_err(wrap).map(|_| None),
        Stage::Abbrev => stage_abbrev(cfg).map_err(wrap).map(|_| None),
        Stage::Pairs1 => stage_pairs1(cfg).map_err(wrap).map(|_| None),
        Stage::Train1 => stage_train1(cfg, switches).map_err(wrap).map(|_| None),
        Stage::Pairs2 => stage_pairs2(cfg).map_err(wrap).map(|_| None),
        Stage::Train2 => stage_train2(cfg, switches).map_err(wrap).map(|_| None),
        Stage::Evaluate => stage_evaluate(cfg, switches).map_err(wrap).map(Some),
    }
}

/// Runs chunk → match → abbrev → stage1-pairs → stage1-train → stage2-pairs
/// → stage2-train → evaluate (minus stages the switches disable).
///
/// With `resume`, stages recorded complete in the manifest — for the same
/// config hash and seed — are skipped when their outputs still exist; a
/// failed run keeps its partial artifacts and the error names the stage.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    switches: &AblationSwitches,
    resume: bool,
) -> Result<Report> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.paths.output).map_err(|e| Error::io(&cfg.paths.output, e))?;
    let paths = cfg.run_paths();
    let hash = cfg.config_hash(switches);

    let mut manifest = if resume && paths.manifest().exists() {
        let m = Manifest::load(&paths.manifest())?;
        if m.config_hash != hash || m.seed != cfg.seed {
            return Err(Error::Config(format!(
                "run directory {} belongs to a different config/seed; rerun without resume",
                paths.dir.display()
            )));
        }
        m
    } else {
        Manifest {
            config_hash: hash,
            seed: cfg.seed,
            completed: Vec::new(),
        }
    };
    if !resume {
        manifest.completed.clear();
    }

    let mut report = None;
    for stage in plan(switches) {
        let done = manifest.completed.iter().any(|s| s == stage.name())
            && stage.outputs(&paths).iter().all(|p| p.exists());
        if done && stage != Stage::Evaluate {
            continue;
        }
        if done && stage == Stage::Evaluate {
            report = Some(Report::load(&paths.report_json())?);
            continue;
        }
        report = run_stage(cfg, switches, stage)?;
        if !manifest.completed.iter().any(|s| s == stage.name()) {
            manifest.completed.push(stage.name().to_string());
        }
        manifest.save(&paths.manifest())?;
    }
    report.ok_or_else(|| Error::Config("pipeline finished without an evaluation report".into()))
}

/// Runs one configuration per switch set, each in its own subdirectory of the
/// configured output, and returns the labeled reports in input order.
pub fn run_ablations(
    cfg: &PipelineConfig,
    runs: &[(String, AblationSwitches)],
) -> Result<Vec<(String, Report)>> {
    let mut out = Vec::with_capacity(runs.len());
    for (label, switches) in runs {
        if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::Config(format!("ablation label {label:?} must be a filename-safe slug")));
        }
        let mut sub = cfg.clone();
        sub.paths.output = cfg.paths.output.join(label);
        let report = run_pipeline(&sub, switches, false)?;
        out.push((label.clone(), report));
    }
    Ok(out)
}

/// Table 3/4/5-shaped comparison: one row per ablation, mean-metric columns
/// per setting.
pub fn render_comparison(reports: &[(String, Report)]) -> String {
    let mut headers = vec!["run".to_string()];
    if reports.iter().any(|(_, r)| r.single.is_some()) {
        headers.extend(["MRR", "NDCG", "MAP"].map(|m| format!("single {m}")));
    }
    if reports.iter().any(|(_, r)| r.multi.is_some()) {
        headers.extend(["MRR", "NDCG@10", "R@100"].map(|m| format!("multi {m}")));
    }
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|(label, r)| {
            let mut row = vec![label.clone()];
            if reports.iter().any(|(_, x)| x.single.is_some()) {
                match &r.single {
                    Some(s) => row.extend(s.macro_avg.iter().map(|v| format!("{v:.4}"))),
                    None => row.extend(std::iter::repeat_n("-".to_string(), 3)),
                }
            }
            if reports.iter().any(|(_, x)| x.multi.is_some()) {
                match &r.multi {
                    Some(s) => row.extend(s.macro_avg.iter().map(|v| format!("{v:.4}"))),
                    None => row.extend(std::iter::repeat_n("-".to_string(), 3)),
                }
            }
            row
        })
        .collect();
    crate::textutil::render_aligned(&headers, &rows)
}
