//! Generator clients: the wire-protocol HTTP client and a deterministic,
//! KG-driven mock that lets the whole pipeline run offline.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::kg::{KnowledgeGraph, RelationKind};
use crate::matcher::{self, TermAutomaton};
use crate::pairgen::Source;

/// Built-in prompt bodies; deployments can swap in edited files.
pub const ABBREVIATION_TEMPLATE: &str = include_str!("../../prompts/abbreviation.txt");
pub const GENERATION_TEMPLATE: &str = include_str!("../../prompts/generation.txt");

/// The three entity families requested from the generator, one call each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EntityType {
    Diseases,
    ClinicalProcedures,
    Drugs,
}

impl EntityType {
    pub const ALL: [EntityType; 3] = [
        EntityType::Diseases,
        EntityType::ClinicalProcedures,
        EntityType::Drugs,
    ];

    /// The phrase substituted for `{entity_type}` in the prompt template.
    pub fn prompt_name(self) -> &'static str {
        match self {
            EntityType::Diseases => "diseases",
            EntityType::ClinicalProcedures => "clinical procedures",
            EntityType::Drugs => "drugs",
        }
    }

    /// Source tag applied to samples produced by this entity family.
    pub fn source(self) -> Source {
        match self {
            EntityType::Diseases => Source::SynDisease,
            EntityType::ClinicalProcedures => Source::SynProcedure,
            EntityType::Drugs => Source::SynDrug,
        }
    }

    /// The family a KG semantic type falls into, if any.
    pub fn of_semantic_type(semantic_type: &str) -> Option<EntityType> {
        match semantic_type {
            "Disease, Syndrome or Pathologic Function" | "Sign, Symptom, or Finding" => {
                Some(EntityType::Diseases)
            }
            "Laboratory Procedure" | "Diagnostic Procedure"
            | "Therapeutic or Preventive Procedure" => Some(EntityType::ClinicalProcedures),
            "Chemical or Drug" => Some(EntityType::Drugs),
            _ => None,
        }
    }
}

/// Raw-text interface to the generating model. Implementations must be pure
/// functions of their inputs (plus fixed internal state) so dataset builds
/// stay deterministic and parallelizable.
pub trait GeneratorClient: Sync {
    /// Raw response for the abbreviation-reduction prompt over one chunk.
    fn abbreviation_response(&self, chunk_text: &str) -> Result<String>;

    /// Raw response for the entity-generation prompt over one chunk.
    fn entity_response(&self, chunk_text: &str, entity_type: EntityType) -> Result<String>;
}

/// Substitutes `{note}` and (when given) `{entity_type}` into a template.
pub fn fill_template(template: &str, note: &str, entity_type: Option<EntityType>) -> String {
    let mut out = template.replace("{note}", note);
    if let Some(et) = entity_type {
        out = out.replace("{entity_type}", et.prompt_name());
    }
    out
}

/// Pulls `choices[0].message.content` out of a chat-completions response body.
pub fn extract_content(body: &str) -> Result<String> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| Error::Client(format!("response is not JSON: {e}")))?;
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Client("response lacks choices[0].message.content".into()))
}

/// Chat-completions client: POST `{base}/chat/completions` with temperature 0.
///
/// Configured from `GEN_BASE_URL`, `GEN_MODEL`, `GEN_API_KEY` (optional),
/// `GEN_TIMEOUT_S` and `GEN_MAX_RETRIES`. Transient failures (transport
/// errors, non-2xx) are retried with exponential backoff.
pub struct HttpGeneratorClient {
    base_url: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Duration,
    abbreviation_template: String,
    generation_template: String,
    http: reqwest::blocking::Client,
}

impl HttpGeneratorClient {
    pub fn new(
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        timeout_s: u64,
        max_retries: u32,
    ) -> Result<Self> {
        if base_url.is_empty() {
            return Err(Error::Config("generator base URL is empty".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_s))
            .build()
            .map_err(|e| Error::Client(format!("cannot build HTTP client: {e}")))?;
        Ok(HttpGeneratorClient {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            max_retries,
            backoff: Duration::from_millis(500),
            abbreviation_template: ABBREVIATION_TEMPLATE.to_string(),
            generation_template: GENERATION_TEMPLATE.to_string(),
            http,
        })
    }

    pub fn from_env() -> Result<Self> {
        let base_url = std::env::var("GEN_BASE_URL")
            .map_err(|_| Error::Config("GEN_BASE_URL is not set".into()))?;
        let model = std::env::var("GEN_MODEL")
            .map_err(|_| Error::Config("GEN_MODEL is not set".into()))?;
        let api_key = std::env::var("GEN_API_KEY").ok();
        let timeout_s = match std::env::var("GEN_TIMEOUT_S") {
            Ok(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad GEN_TIMEOUT_S {v:?}")))?,
            Err(_) => 30,
        };
        let max_retries = match std::env::var("GEN_MAX_RETRIES") {
            Ok(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad GEN_MAX_RETRIES {v:?}")))?,
            Err(_) => 3,
        };
        HttpGeneratorClient::new(&base_url, &model, api_key, timeout_s, max_retries)
    }

    /// Replaces the built-in prompt templates (e.g. with edited files).
    pub fn with_templates(mut self, abbreviation: String, generation: String) -> Self {
        self.abbreviation_template = abbreviation;
        self.generation_template = generation;
        self
    }

    /// Shrinks the retry backoff; intended for tests.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let url = format!("{}/chat/completions", self.base_url);
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut last_error = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            let mut request = self.http.post(&url).json(&body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        let text = response
                            .text()
                            .map_err(|e| Error::Client(format!("cannot read response: {e}")))?;
                        return extract_content(&text);
                    }
                    last_error = format!("server returned {status}");
                }
                Err(e) => last_error = format!("transport error: {e}"),
            }
        }
        Err(Error::Client(format!(
            "{last_error} (after {} attempts)",
            self.max_retries + 1
        )))
    }
}

impl GeneratorClient for HttpGeneratorClient {
    fn abbreviation_response(&self, chunk_text: &str) -> Result<String> {
        self.complete(&fill_template(&self.abbreviation_template, chunk_text, None))
    }

    fn entity_response(&self, chunk_text: &str, entity_type: EntityType) -> Result<String> {
        self.complete(&fill_template(
            &self.generation_template,
            chunk_text,
            Some(entity_type),
        ))
    }
}

/// Deterministic stand-in for the generating model, driven by the KG.
///
/// Abbreviations come from a fixed table, filtered to those occurring in the
/// chunk. Entities are the chunk's string-matched admissible terms plus
/// one-hop treat/cause neighbors (standing in for entities a model would
/// infer rather than copy), with hash-seeded formatting variation and an
/// occasional fabricated line so the parsers and cleaning predicates see
/// realistic noise.
pub struct MockGeneratorClient<'a> {
    kg: &'a KnowledgeGraph,
    automaton: TermAutomaton,
    abbreviations: BTreeMap<String, String>,
    noise_seed: u64,
}

impl<'a> MockGeneratorClient<'a> {
    pub fn new(
        kg: &'a KnowledgeGraph,
        abbreviations: BTreeMap<String, String>,
        noise_seed: u64,
    ) -> Result<Self> {
        Ok(MockGeneratorClient {
            kg,
            automaton: matcher::build_automaton(kg)?,
            abbreviations,
            noise_seed,
        })
    }
}

const TREAT_CAUSE: [RelationKind; 4] = [
    RelationKind::MayTreat,
    RelationKind::MayBeTreatedBy,
    RelationKind::MayCause,
    RelationKind::MayBeCausedBy,
];

impl GeneratorClient for MockGeneratorClient<'_> {
    fn abbreviation_response(&self, chunk_text: &str) -> Result<String> {
        let mut lines = Vec::new();
        let mut ordinal = 0;
        for (abbr, full) in &self.abbreviations {
            if !matcher::contains_word_boundary(chunk_text, abbr) {
                continue;
            }
            ordinal += 1;
            let h = derive_seed(self.noise_seed, &format!("abbr/{abbr}/{chunk_text}"));
            lines.push(match h % 5 {
                0 => format!("- {} = {full}", abbr.to_uppercase()),
                1 => format!("* {abbr} = {full}"),
                2 => format!("{ordinal}. {abbr} = {full}"),
                3 => format!("{abbr} = {full}"),
                _ => format!("- {abbr} = {full}"),
            });
        }
        // Occasional junk that the parser or the cleaning predicates must
        // reject: prose, a self-mapping, a one-character abbreviation, an
        // expansion that is not a KG term.
        match derive_seed(self.noise_seed, &format!("abbr-noise/{chunk_text}")) % 6 {
            0 => lines.push("no other abbreviations are present".to_string()),
            1 => lines.push("- bp = bp".to_string()),
            2 => lines.push("- q = every".to_string()),
            3 => lines.push("- wbc = white cell tally".to_string()),
            _ => {}
        }
        Ok(lines.join("\n"))
    }

    fn entity_response(&self, chunk_text: &str, entity_type: EntityType) -> Result<String> {
        let mentions = matcher::find_mentions(&self.automaton, chunk_text);
        let mut seen = BTreeSet::new();
        let mut items = Vec::new();
        for m in &mentions {
            let is_requested = m.concept_ids.iter().any(|cid| {
                self.kg
                    .concept(cid)
                    .and_then(|c| EntityType::of_semantic_type(&c.semantic_type))
                    == Some(entity_type)
            });
            if is_requested && seen.insert(m.surface.clone()) {
                items.push(m.surface.clone());
            }
        }
        let matched: BTreeSet<&str> = mentions
            .iter()
            .flat_map(|m| m.concept_ids.iter().map(String::as_str))
            .collect();
        let mut inferred = BTreeSet::new();
        for r in self.kg.relations() {
            if !TREAT_CAUSE.contains(&r.kind) {
                continue;
            }
            let other = if matched.contains(r.head.as_str()) {
                &r.tail
            } else if matched.contains(r.tail.as_str()) {
                &r.head
            } else {
                continue;
            };
            let Some(concept) = self.kg.concept(other) else {
                continue;
            };
            if EntityType::of_semantic_type(&concept.semantic_type) == Some(entity_type) {
                inferred.insert(concept.preferred_term().to_string());
            }
        }
        for term in inferred {
            if seen.insert(term.clone()) {
                items.push(term);
            }
        }
        let noise = derive_seed(
            self.noise_seed,
            &format!("ent-noise/{}/{chunk_text}", entity_type.prompt_name()),
        );
        if noise % 7 == 0 {
            items.push(
                match entity_type {
                    EntityType::Diseases => "nonspecific systemic process",
                    EntityType::ClinicalProcedures => "routine followup assessment",
                    EntityType::Drugs => "combination herbal supplement",
                }
                .to_string(),
            );
        }
        let lines: Vec<String> = items
            .into_iter()
            .enumerate()
            .map(|(i, term)| {
                let h = derive_seed(
                    self.noise_seed,
                    &format!("ent-line/{}/{term}", entity_type.prompt_name()),
                );
                match h % 4 {
                    0 => format!("- {term}"),
                    1 => format!("{}. {term}", i + 1),
                    2 => {
                        let mut chars = term.chars();
                        match chars.next() {
                            Some(first) => format!("{}{}", first.to_uppercase(), chars.as_str()),
                            None => term,
                        }
                    }
                    _ => term,
                }
            })
            .collect();
        Ok(lines.join("\n"))
    }
}
