//! Command-line front end for the chartfind pipeline.
//!
//! `pipeline` drives a configured run end to end; the per-stage subcommands
//! (`chunk`, `match`, `abbrev`, `pairs`, `train`, `eval`, `dissect`) run the
//! same steps one at a time for inspection. `synth` writes a self-contained
//! demo bundle — corpus, knowledge graph, queries, and a ready config — so
//! `chartfind synth --out demo && chartfind pipeline --config demo/config.toml`
//! works from a clean checkout.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use chartfind::benchmark::{self, BenchmarkSpec};
use chartfind::corpus;
use chartfind::encoder::EncoderParams;
use chartfind::evalkit::{self, Axis, Judgments, QueryType, Setting};
use chartfind::pairgen::{self, Source};
use chartfind::pipeline::{
    self, AblationSwitches, ClientConfig, CorpusConfig, EncoderConfig, PathsConfig, PipelineConfig,
};
use chartfind::trainer::{self, TrainConfig};
use chartfind::{Error, Result};

#[derive(Parser)]
#[command(name = "chartfind", version, about = "Dense retrieval over clinical notes")]
struct Cli {
    /// Cap the worker thread pool (default: one thread per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand that operates on a pipeline config.
/// CLI flags win over values from the file.
#[derive(Args)]
struct ConfigArgs {
    /// Pipeline config (TOML); relative paths resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output (run) directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(output) = &self.output {
            cfg.paths.output = output.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic demo corpus, queries, and a ready config.
    Synth {
        /// Directory for the bundle (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Override the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Clean the notes and split them into overlapping chunks.
    Chunk {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the concept matcher over the chunks.
    Match {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Extract abbreviation candidates from the chunks.
    Abbrev {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build the positive-pair dataset for one training stage.
    Pairs {
        /// Training stage (1 = knowledge injection, 2 = generated queries).
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the encoder for one stage (stage 2 continues from stage 1).
    Train {
        /// Training stage (1 = knowledge injection, 2 = generated queries).
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score one retrieval setting with the latest trained encoder.
    Eval {
        /// Retrieval setting.
        #[arg(long, value_parser = parse_setting)]
        setting: Setting,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Break a stored run down by match type or query type.
    Dissect {
        /// Dissection axis (`match` is single-patient only).
        #[arg(long, value_parser = parse_axis)]
        axis: Axis,
        /// Retrieval setting whose run file to read.
        #[arg(long, default_value = "single", value_parser = parse_setting)]
        setting: Setting,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run every stage end to end and print the report.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Reuse finished stages from a previous identical run.
        #[arg(long)]
        resume: bool,
    },
    /// Train and evaluate ablated configurations next to the full pipeline.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Canned sweep covering a whole comparison table.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Skip Stage-I training entirely.
        #[arg(long)]
        without_stage1: bool,
        /// Drop a Stage-I pair source (repeatable).
        #[arg(long = "disable", value_parser = parse_source)]
        disable: Vec<Source>,
        /// Keep only one query type in the Stage-II data.
        #[arg(long, value_parser = parse_query_type)]
        stage2_only: Option<QueryType>,
    },
    /// Summarize a positive-pair file per source.
    Stats {
        /// Pairs file (JSONL), e.g. `run/pairs_stage1.jsonl`.
        #[arg(long)]
        pairs: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full pipeline vs. Stage II alone.
    Stages,
    /// Drop one Stage-I pair source at a time.
    Stage1Sources,
    /// Restrict Stage-II generation to one query type at a time.
    Stage2Types,
}

fn parse_setting(s: &str) -> std::result::Result<Setting, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_axis(s: &str) -> std::result::Result<Axis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_source(s: &str) -> std::result::Result<Source, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_query_type(s: &str) -> std::result::Result<QueryType, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth { out, seed } => cmd_synth(&out, seed),
        Command::Chunk { cfg } => {
            let cfg = cfg.load()?;
            ensure_run_dir(&cfg)?;
            let chunks = pipeline::stage_chunk(&cfg)?;
            println!("wrote {} chunks to {}", chunks.len(), cfg.run_paths().chunks().display());
            Ok(())
        }
        Command::Match { cfg } => {
            let cfg = cfg.load()?;
            ensure_run_dir(&cfg)?;
            let mentions = pipeline::stage_match(&cfg)?;
            println!(
                "wrote {} mentions to {}",
                mentions.len(),
                cfg.run_paths().mentions().display()
            );
            Ok(())
        }
        Command::Abbrev { cfg } => {
            let cfg = cfg.load()?;
            ensure_run_dir(&cfg)?;
            let records = pipeline::stage_abbrev(&cfg)?;
            let pairs: usize = records.iter().map(|r| r.pairs.len()).sum();
            println!(
                "wrote {pairs} abbreviation pairs across {} chunks to {}",
                records.len(),
                cfg.run_paths().abbreviations().display()
            );
            Ok(())
        }
        Command::Pairs { stage, cfg } => {
            let cfg = cfg.load()?;
            ensure_run_dir(&cfg)?;
            let sets = match stage {
                1 => pipeline::stage_pairs1(&cfg)?,
                _ => pipeline::stage_pairs2(&cfg)?,
            };
            print!("{}", pairgen::render_stats(&pairgen::dataset_stats(&sets)));
            println!("wrote {}", cfg.run_paths().pairs(stage).display());
            Ok(())
        }
        Command::Train { stage, cfg } => {
            let cfg = cfg.load()?;
            ensure_run_dir(&cfg)?;
            let switches = AblationSwitches::default();
            match stage {
                1 => pipeline::stage_train1(&cfg, &switches)?,
                _ => pipeline::stage_train2(&cfg, &switches)?,
            };
            let paths = cfg.run_paths();
            let history = trainer::load_loss_history(&paths.loss(stage))?;
            match (history.first(), history.last()) {
                (Some(first), Some(last)) => println!(
                    "{} steps, loss {:.4} -> {:.4}",
                    history.len(),
                    first.loss,
                    last.loss
                ),
                _ => println!("no optimizer steps ran"),
            }
            println!("encoder saved to {}", paths.encoder(stage).display());
            Ok(())
        }
        Command::Eval { setting, cfg } => {
            let cfg = cfg.load()?;
            cmd_eval(&cfg, setting)
        }
        Command::Dissect { axis, setting, cfg } => {
            let cfg = cfg.load()?;
            cmd_dissect(&cfg, axis, setting)
        }
        Command::Pipeline { cfg, resume } => {
            let cfg = cfg.load()?;
            let report = pipeline::run_pipeline(&cfg, &AblationSwitches::default(), resume)?;
            print!("{}", report.render_text());
            println!("\nartifacts in {}", cfg.paths.output.display());
            Ok(())
        }
        Command::Ablate { cfg, preset, without_stage1, disable, stage2_only } => {
            let cfg = cfg.load()?;
            let runs = ablation_runs(preset, without_stage1, &disable, stage2_only)?;
            let reports = pipeline::run_ablations(&cfg, &runs)?;
            print!("{}", pipeline::render_comparison(&reports));
            Ok(())
        }
        Command::Stats { pairs } => {
            let sets = pairgen::load_pairs(&pairs)?;
            print!("{}", pairgen::render_stats(&pairgen::dataset_stats(&sets)));
            Ok(())
        }
    }
}

fn ensure_run_dir(cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(&cfg.paths.output).map_err(|e| Error::io(&cfg.paths.output, e))
}

fn setting_label(setting: Setting) -> &'static str {
    match setting {
        Setting::Single => "single-patient",
        Setting::Multi => "multi-patient",
    }
}

fn queries_for(cfg: &PipelineConfig, setting: Setting) -> Result<(&PathBuf, &PathBuf)> {
    let pair = match setting {
        Setting::Single => (&cfg.paths.queries_single, &cfg.paths.qrels_single),
        Setting::Multi => (&cfg.paths.queries_multi, &cfg.paths.qrels_multi),
    };
    match pair {
        (Some(q), Some(r)) => Ok((q, r)),
        _ => Err(Error::Config(format!(
            "no {} queries configured",
            setting_label(setting)
        ))),
    }
}

fn cmd_eval(cfg: &PipelineConfig, setting: Setting) -> Result<()> {
    let paths = cfg.run_paths();
    let chunks = corpus::load_chunks(&paths.chunks())?;
    let params = EncoderParams::load(&paths.final_encoder()?)?;
    let scorer = evalkit::EncoderScorer::new(&params, &chunks);
    let (queries, qrels) = queries_for(cfg, setting)?;
    let judgments = Judgments::load(queries, qrels)?;
    let outcome = match setting {
        Setting::Single => evalkit::run_single_patient(&scorer, &judgments, &chunks)?,
        Setting::Multi => evalkit::run_multi_patient(&scorer, &judgments, &chunks)?,
    };
    evalkit::write_run(&paths.run_file(setting), &outcome)?;
    let metrics: Vec<String> = setting
        .metric_names()
        .iter()
        .zip(outcome.macro_avg)
        .map(|(name, value)| format!("{name} {value:.4}"))
        .collect();
    println!(
        "{} ({} queries): {}",
        setting_label(setting),
        outcome.per_query.len(),
        metrics.join("  ")
    );
    println!("run written to {}", paths.run_file(setting).display());
    Ok(())
}

fn cmd_dissect(cfg: &PipelineConfig, axis: Axis, setting: Setting) -> Result<()> {
    let paths = cfg.run_paths();
    let run_file = paths.run_file(setting);
    if !run_file.exists() {
        return Err(Error::Config(format!(
            "{} not found; run `chartfind eval --setting {}` first",
            run_file.display(),
            match setting {
                Setting::Single => "single",
                Setting::Multi => "multi",
            }
        )));
    }
    let (queries, qrels) = queries_for(cfg, setting)?;
    let judgments = Judgments::load(queries, qrels)?;
    let rankings = evalkit::load_run(&run_file)?;
    let outcome = evalkit::outcome_from_rankings(&rankings, &judgments, setting)?;
    let table = evalkit::dissect(&outcome, &judgments, axis)?;
    print!("{}", table.render());
    Ok(())
}

fn ablation_runs(
    preset: Option<Preset>,
    without_stage1: bool,
    disable: &[Source],
    stage2_only: Option<QueryType>,
) -> Result<Vec<(String, AblationSwitches)>> {
    let manual = without_stage1 || !disable.is_empty() || stage2_only.is_some();
    if preset.is_some() && manual {
        return Err(Error::Config(
            "use either --preset or explicit switch flags, not both".into(),
        ));
    }
    let mut runs = vec![("full".to_string(), AblationSwitches::default())];
    match preset {
        Some(Preset::Stages) => {
            runs.push((
                "wo-stage1".into(),
                AblationSwitches { without_stage1: true, ..Default::default() },
            ));
        }
        Some(Preset::Stage1Sources) => {
            for source in [
                Source::String,
                Source::Abbreviation,
                Source::KgSynonym,
                Source::KgHypernym,
                Source::KgRelated,
            ] {
                runs.push((
                    format!("wo-{}", source.as_str()),
                    AblationSwitches {
                        disabled_sources: BTreeSet::from([source]),
                        ..Default::default()
                    },
                ));
            }
        }
        Some(Preset::Stage2Types) => {
            for query_type in QueryType::ALL {
                runs.push((
                    format!("only-{}", query_type.as_str()),
                    AblationSwitches { stage2_only: Some(query_type), ..Default::default() },
                ));
            }
        }
        None => {}
    }
    if manual {
        let mut switches = AblationSwitches::default();
        let mut parts = Vec::new();
        if without_stage1 {
            switches.without_stage1 = true;
            parts.push("wo-stage1".to_string());
        }
        for &source in disable {
            switches.disabled_sources.insert(source);
            parts.push(format!("wo-{}", source.as_str()));
        }
        if let Some(query_type) = stage2_only {
            switches.stage2_only = Some(query_type);
            parts.push(format!("only-{}", query_type.as_str()));
        }
        runs.push((parts.join("-"), switches));
    }
    Ok(runs)
}

fn cmd_synth(out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = BenchmarkSpec::default();
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let bench = benchmark::generate(&spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    bench.write_to(out)?;
    let config_path = out.join("config.toml");
    demo_config().save(&config_path)?;
    println!(
        "benchmark: {} notes, {} concepts, {} single + {} multi queries",
        bench.notes.len(),
        bench.kg.concepts().count(),
        bench.single.query_count(),
        bench.multi.query_count()
    );
    println!("config: {}", config_path.display());
    Ok(())
}

/// Config written next to the synthetic bundle. Hyperparameters are sized for
/// the demo corpus; the seed fans out to every randomized stage.
fn demo_config() -> PipelineConfig {
    PipelineConfig {
        seed: 7,
        paths: PathsConfig {
            notes: "notes.jsonl".into(),
            concepts: "concepts.jsonl".into(),
            relations: "relations.tsv".into(),
            output: "run".into(),
            queries_single: Some("queries_single.tsv".into()),
            qrels_single: Some("qrels_single.tsv".into()),
            queries_multi: Some("queries_multi.tsv".into()),
            qrels_multi: Some("qrels_multi.tsv".into()),
        },
        corpus: CorpusConfig::default(),
        client: ClientConfig::Mock { abbreviations: "abbreviations.json".into(), noise_seed: 11 },
        encoder: EncoderConfig::default(),
        stage1: TrainConfig {
            positives_per_chunk: 16,
            batch_size: 16,
            epochs: 6,
            lr: 2e-3,
            ..TrainConfig::stage1_defaults()
        },
        stage2: TrainConfig {
            positives_per_chunk: 8,
            batch_size: 16,
            epochs: 2,
            lr: 1e-3,
            ..TrainConfig::stage2_defaults()
        },
        msl: Default::default(),
    }
}
