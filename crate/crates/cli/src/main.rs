mod config;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use frida_core::analysis::{stats_report, Scope};
use frida_core::dataset::{self, read_jsonl, read_jsonl_dir, write_jsonl, FULL};
use frida_core::evalharness::{compare_models, evaluate, EvalOptions, EvalReport};
use frida_core::genloop::{run_generation, write_run, RunStatus};
use frida_core::ontology::load_ontology;
use frida_core::providers::{ProviderConfig, ProviderKind, ResponseCache};
use frida_core::templating::{build_template_records, load_templates, SEEDS_PER_TEMPLATE};
use frida_core::{Category, InstructionRecord};
use serde::Serialize;

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "frida", version, about = "Template-driven instruction data pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    ontology: Option<PathBuf>,
    #[arg(long, global = true)]
    templates: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render seed and evaluation records from the templates.
    Seeds,
    /// Generate synthetic records from the seeds.
    Generate {
        /// Only this template.
        #[arg(long)]
        template: Option<String>,
        /// Continue an earlier run, replaying cached responses.
        #[arg(long)]
        resume: bool,
    },
    /// Length and ROUGE-L statistics of the synthetic records.
    Analyze {
        /// Print ASCII histograms.
        #[arg(long)]
        histograms: bool,
        /// Measure ROUGE-L across all records instead of within templates.
        #[arg(long)]
        global: bool,
    },
    /// Split the synthetic records into train and dev sets.
    Split {
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Carve one category's split out of the full split.
    Ablate {
        #[arg(long)]
        category: String,
    },
    /// Write the fine-tuning config for the full split or an ablation.
    EmitConfig {
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Score a subject model on the evaluation set.
    Eval(EvalArgs),
    /// Per-category table across several evaluation reports.
    Report {
        /// Report JSON files written by `eval`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// CSV output (default <out>/reports/comparison.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluation set (default <out>/eval/eval_set.jsonl).
    #[arg(long)]
    eval_set: Option<PathBuf>,
    /// Report path stem; writes .json, .txt and .csv (default <out>/reports/eval-<model>).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Name shown in reports (default: the subject model).
    #[arg(long)]
    model_name: Option<String>,
    /// Also report the share of items scoring at least this similarity.
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    subject: SubjectFlags,
    #[command(flatten)]
    embedder: EmbedderFlags,
}

#[derive(Args)]
struct SubjectFlags {
    #[arg(long)]
    subject_kind: Option<ProviderKind>,
    #[arg(long)]
    subject_base_url: Option<String>,
    #[arg(long)]
    subject_model: Option<String>,
    /// Name of the environment variable holding the subject API key.
    #[arg(long)]
    subject_api_key_env: Option<String>,
    #[arg(long)]
    subject_script: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedderFlags {
    #[arg(long)]
    embedder_kind: Option<ProviderKind>,
    #[arg(long)]
    embedder_base_url: Option<String>,
    #[arg(long)]
    embedder_model: Option<String>,
    /// Name of the environment variable holding the embedder API key.
    #[arg(long)]
    embedder_api_key_env: Option<String>,
}

fn override_provider(
    p: &mut ProviderConfig,
    kind: Option<ProviderKind>,
    base_url: &Option<String>,
    model: &Option<String>,
    key_env: &Option<String>,
) {
    if let Some(k) = kind {
        p.kind = k;
    }
    if base_url.is_some() {
        p.base_url = base_url.clone();
    }
    if model.is_some() {
        p.model = model.clone();
    }
    if key_env.is_some() {
        p.api_key_env = key_env.clone();
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    config.apply_env()?;
    if let Some(p) = &common.ontology {
        config.ontology = p.clone();
    }
    if let Some(p) = &common.templates {
        config.templates = p.clone();
    }
    if let Some(p) = &common.out {
        config.out = p.clone();
    }
    if let Some(s) = common.seed {
        config.seed = s;
    }
    Ok(config)
}

/// `key=value` pairs on one line.
fn summary(command: &str, pairs: &[(&str, String)]) {
    let mut line = format!("command={command}");
    for (k, v) in pairs {
        line.push_str(&format!(" {k}={v}"));
    }
    println!("{line}");
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct SeedManifest {
    seed: u64,
    ontology_version: String,
    seeds_per_template: usize,
    seed_counts: BTreeMap<String, usize>,
    eval_counts: BTreeMap<String, usize>,
}

fn cmd_seeds(config: &PipelineConfig) -> Result<()> {
    config.require_inputs()?;
    let ontology = load_ontology(&config.ontology)?;
    let templates = load_templates(&config.templates)?;
    let mut eval = Vec::new();
    let mut manifest = SeedManifest {
        seed: config.seed,
        ontology_version: ontology.version().to_string(),
        seeds_per_template: SEEDS_PER_TEMPLATE,
        seed_counts: BTreeMap::new(),
        eval_counts: BTreeMap::new(),
    };
    let mut seed_total = 0;
    for t in templates.templates() {
        let built = build_template_records(t, &ontology, config.seed, SEEDS_PER_TEMPLATE)?;
        write_jsonl(&config.out.join("seeds").join(format!("{}.jsonl", t.id)), &built.seeds)?;
        seed_total += built.seeds.len();
        manifest.seed_counts.insert(t.id.clone(), built.seeds.len());
        manifest.eval_counts.insert(t.id.clone(), built.eval.len());
        eval.extend(built.eval);
    }
    write_jsonl(&config.out.join("eval").join("eval_set.jsonl"), &eval)?;
    write_json(&config.out.join("seeds").join("manifest.json"), &manifest)?;
    summary(
        "seeds",
        &[
            ("templates", templates.len().to_string()),
            ("seeds", seed_total.to_string()),
            ("eval", eval.len().to_string()),
            ("seed", config.seed.to_string()),
        ],
    );
    Ok(())
}

fn cmd_generate(config: &PipelineConfig, only: Option<&str>, resume: bool) -> Result<bool> {
    config.require_inputs()?;
    config.generation.validate()?;
    let templates = load_templates(&config.templates)?;
    let selected: Vec<_> = match only {
        Some(id) => vec![templates.get(id).with_context(|| format!("no template {id:?}"))?],
        None => templates.templates().iter().collect(),
    };
    if !resume {
        for t in &selected {
            let existing = config.out.join("synthetic").join(format!("{}.jsonl", t.id));
            if existing.exists() {
                bail!("{} exists; pass --resume to continue that run", existing.display());
            }
        }
    }
    let mut provider = config.generator.clone();
    let cache_dir = provider.cache_dir.take().unwrap_or_else(|| config.out.join("cache"));
    let client = provider.build_chat()?.with_cache(ResponseCache::on_disk(&cache_dir)?);
    let mut all_ok = true;
    let (mut accepted, mut calls) = (0, 0);
    for t in selected {
        let seed_path = config.out.join("seeds").join(format!("{}.jsonl", t.id));
        let seeds = read_jsonl(&seed_path).with_context(|| "run `frida seeds` first".to_string())?;
        let run = run_generation(t, &seeds, &config.generation, &client)?;
        write_run(&run, &config.out)?;
        let status = match run.status {
            RunStatus::Complete => "complete",
            RunStatus::BudgetExhausted => "budget_exhausted",
            RunStatus::ProviderError => "provider_error",
        };
        if run.status == RunStatus::ProviderError {
            all_ok = false;
            log::error!("{}: {}", t.id, run.error.as_deref().unwrap_or("provider error"));
        }
        accepted += run.accepted_count;
        calls += run.calls_made;
        summary(
            "generate",
            &[
                ("template", t.id.clone()),
                ("status", status.to_string()),
                ("accepted", run.accepted_count.to_string()),
                ("rejected_dup", run.rejected_dup.to_string()),
                ("rejected_invalid", run.rejected_invalid.to_string()),
                ("calls", run.calls_made.to_string()),
            ],
        );
    }
    summary(
        "generate",
        &[
            ("template", "all".into()),
            ("accepted", accepted.to_string()),
            ("calls", calls.to_string()),
            ("upstream_calls", client.upstream_calls().to_string()),
        ],
    );
    Ok(all_ok)
}

fn synthetic(config: &PipelineConfig) -> Result<Vec<InstructionRecord>> {
    let dir = config.out.join("synthetic");
    if !dir.is_dir() {
        bail!("{} does not exist; run `frida generate` first", dir.display());
    }
    Ok(read_jsonl_dir(&dir)?)
}

fn cmd_analyze(config: &PipelineConfig, histograms: bool, global: bool) -> Result<()> {
    let records = synthetic(config)?;
    let (train, dev) = match dataset::read_manifest(&config.out, FULL) {
        Ok(m) => (read_jsonl(&m.train_path)?, read_jsonl(&m.dev_path)?),
        Err(dataset::DatasetError::MissingSplit(_)) => dataset::split(&records, config.ratio, config.seed)?,
        Err(e) => return Err(e.into()),
    };
    let scope = if global { Scope::Global } else { Scope::PerTemplate };
    let report = stats_report(&records, &train, &dev, scope)?;
    let path = config.out.join("reports").join("stats.csv");
    report.write_csv(&path)?;
    if histograms {
        print!("{}", report.to_text(50));
    } else {
        print!("{}", report.table.to_text());
    }
    summary(
        "analyze",
        &[
            ("records", records.len().to_string()),
            ("mean_length", format!("{:.3}", report.length.mean)),
            ("mean_max_rouge", format!("{:.4}", report.rouge.histogram.mean)),
            ("csv", path.display().to_string()),
        ],
    );
    Ok(())
}

fn eval_ids(config: &PipelineConfig) -> Result<HashSet<String>> {
    let path = config.out.join("eval").join("eval_set.jsonl");
    if !path.exists() {
        return Ok(HashSet::new());
    }
    Ok(read_jsonl(&path)?.iter().map(InstructionRecord::id).collect())
}

fn cmd_split(config: &PipelineConfig, ratio: Option<f64>) -> Result<()> {
    let ratio = ratio.unwrap_or(config.ratio);
    let records = synthetic(config)?;
    let held_out = eval_ids(config)?;
    if let Some(r) = records.iter().find(|r| held_out.contains(&r.id())) {
        bail!("synthetic record {} duplicates an evaluation item", r.id());
    }
    let (train, dev) = dataset::split(&records, ratio, config.seed)?;
    let m = dataset::write_split(&config.out, FULL, &train, &dev, config.seed, ratio)?;
    summary(
        "split",
        &[
            ("train", m.total.train.to_string()),
            ("dev", m.total.dev.to_string()),
            ("ratio", ratio.to_string()),
            ("seed", config.seed.to_string()),
        ],
    );
    Ok(())
}

fn cmd_ablate(config: &PipelineConfig, category: &str) -> Result<()> {
    let category: Category = category.parse()?;
    let m = dataset::ablate(&config.out, category)?;
    summary(
        "ablate",
        &[
            ("category", category.slug().to_string()),
            ("train", m.total.train.to_string()),
            ("dev", m.total.dev.to_string()),
            ("dir", dataset::split_dir(&config.out, &m.name).display().to_string()),
        ],
    );
    Ok(())
}

fn cmd_emit_config(config: &PipelineConfig, ablation: Option<&str>) -> Result<()> {
    let (tc, path) = dataset::emit_training_config(&config.out, ablation)?;
    summary(
        "emit-config",
        &[
            ("name", tc.name),
            ("train", tc.train_records.to_string()),
            ("dev", tc.dev_records.to_string()),
            ("path", path.display().to_string()),
        ],
    );
    Ok(())
}

fn cmd_eval(config: &PipelineConfig, args: &EvalArgs) -> Result<()> {
    let mut subject = config.subject.clone();
    let s = &args.subject;
    override_provider(
        &mut subject,
        s.subject_kind,
        &s.subject_base_url,
        &s.subject_model,
        &s.subject_api_key_env,
    );
    if s.subject_script.is_some() {
        subject.script_path = s.subject_script.clone();
    }
    let mut embedder = config.embedder.clone();
    let e = &args.embedder;
    override_provider(
        &mut embedder,
        e.embedder_kind,
        &e.embedder_base_url,
        &e.embedder_model,
        &e.embedder_api_key_env,
    );
    let eval_path = args
        .eval_set
        .clone()
        .unwrap_or_else(|| config.out.join("eval").join("eval_set.jsonl"));
    let eval_set = read_jsonl(&eval_path)?;
    // held-out items must not leak into any persisted split
    let ids: HashSet<String> = eval_set.iter().map(InstructionRecord::id).collect();
    if let Ok(m) = dataset::read_manifest(&config.out, FULL) {
        for p in [&m.train_path, &m.dev_path] {
            if let Some(r) = read_jsonl(p)?.iter().find(|r| ids.contains(&r.id())) {
                bail!("evaluation item {} appears in {}", r.id(), p.display());
            }
        }
    }
    let client = subject.build_chat()?;
    let model = args
        .model_name
        .clone()
        .or_else(|| subject.model.clone())
        .unwrap_or_else(|| client.provider_id());
    let embed_client = embedder.build_embedder()?;
    let options = EvalOptions {
        threshold: args.threshold,
        ..EvalOptions::default()
    };
    let report = evaluate(&client, &model, &eval_set, &embed_client, &options)?;
    let stem = args.report.clone().unwrap_or_else(|| {
        let safe: String = model
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect();
        config.out.join("reports").join(format!("eval-{safe}"))
    });
    let json_path = stem.with_extension("json");
    write_json(&json_path, &report)?;
    fs::write(stem.with_extension("txt"), report.to_text())?;
    fs::write(stem.with_extension("csv"), report.items_csv())?;
    print!("{}", report.to_text());
    summary(
        "eval",
        &[
            ("model", model),
            ("overall", format!("{:.4}", report.overall)),
            ("scored", report.scored.to_string()),
            ("shortfall", report.shortfall.to_string()),
            ("exact_match", format!("{:.2}", report.exact_match_rate)),
            ("report", json_path.display().to_string()),
        ],
    );
    Ok(())
}

fn cmd_report(config: &PipelineConfig, paths: &[PathBuf], output: Option<&Path>) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| -> Result<EvalReport> {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let matrix = compare_models(&reports)?;
    let path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.out.join("reports").join("comparison.csv"));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let csv = matrix.to_csv();
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    print!("{csv}");
    let (rows, cols) = matrix.shape();
    summary(
        "report",
        &[
            ("rows", rows.to_string()),
            ("models", cols.to_string()),
            ("csv", path.display().to_string()),
        ],
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let config = load_config(&cli.common)?;
    match cli.command {
        Command::Seeds => cmd_seeds(&config)?,
        Command::Generate { template, resume } => return cmd_generate(&config, template.as_deref(), resume),
        Command::Analyze { histograms, global } => cmd_analyze(&config, histograms, global)?,
        Command::Split { ratio } => cmd_split(&config, ratio)?,
        Command::Ablate { category } => cmd_ablate(&config, &category)?,
        Command::EmitConfig { ablation } => cmd_emit_config(&config, ablation.as_deref())?,
        Command::Eval(args) => cmd_eval(&config, &args)?,
        Command::Report { reports, output } => cmd_report(&config, &reports, output.as_deref())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
