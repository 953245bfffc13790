//! Synthetic generation: few-shot prompts built from a template's seeds,
//! batched responses parsed into records, and a ROUGE-L gate that admits a
//! candidate only if it is not too close to anything already in the
//! template's pool.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{write_atomic, ChatClient, ChatRequest};
use crate::record::{GenMeta, InstructionRecord, Provenance, Violation, WireRecord};
use crate::templating::{TemplateSpec, MAX_ROUGE_THRESHOLD, MIN_ROUGE_THRESHOLD};
use crate::textsim::{tokenize, DedupPool};

/// System prompt sent with every generation call.
pub const SYSTEM_PROMPT: &str = "You will be creating multiple choice questions on a variety of topics related to common sense and/or earthquake knowledge. Be creative in choosing the vocabulary and phrasing of these questions. All responses must be given as json objects with the following format:\n\n{\"instruction\":\"example instruction\", \"input\":\"A) this B) is C) an D) example E) question\",\"output\":\"E) Question\"}";

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("template {template}: {needed} seeds needed, {available} available")]
    InsufficientSeeds {
        template: String,
        needed: usize,
        available: usize,
    },
    #[error("seed belongs to template {found}, expected {expected}")]
    ForeignSeed { expected: String, found: String },
    #[error("threshold {0} outside [{MIN_ROUGE_THRESHOLD}, {MAX_ROUGE_THRESHOLD}]")]
    Threshold(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GenError + '_ {
    move |source| GenError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub target_per_template: usize,
    pub batch_size: usize,
    pub shots: usize,
    pub max_calls_per_template: usize,
    pub temperature_bump: f64,
    /// Bump the temperature after a call whose rejection rate exceeds this.
    pub bump_after_reject_rate: f64,
    pub max_temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            target_per_template: 980,
            batch_size: 40,
            shots: 5,
            max_calls_per_template: 100,
            temperature_bump: 0.1,
            bump_after_reject_rate: 0.5,
            max_temperature: 2.0,
            max_tokens: 8192,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.shots < 1 {
            return bad("shots must be at least 1");
        }
        if !(self.bump_after_reject_rate > 0.0 && self.bump_after_reject_rate <= 1.0) {
            return bad("bump_after_reject_rate must lie in (0, 1]");
        }
        if self.temperature_bump < 0.0 {
            return bad("temperature_bump must not be negative");
        }
        Ok(())
    }
}

/// Few-shot request: the template's category prompt, then the first
/// `shots` seeds as one compact JSON object per line.
pub fn build_generation_prompt(
    template: &TemplateSpec,
    seeds: &[InstructionRecord],
    config: &GenerationConfig,
) -> Result<ChatRequest, GenError> {
    config.validate()?;
    if let Some(s) = seeds.iter().find(|s| s.template_id != template.id) {
        return Err(GenError::ForeignSeed {
            expected: template.id.clone(),
            found: s.template_id.clone(),
        });
    }
    if seeds.len() < config.shots {
        return Err(GenError::InsufficientSeeds {
            template: template.id.clone(),
            needed: config.shots,
            available: seeds.len(),
        });
    }
    let mut user = template.generation_prompt_for(config.batch_size);
    user.push_str("\n\n");
    for s in &seeds[..config.shots] {
        user.push_str(&serde_json::to_string(&s.wire()).expect("wire record serializes"));
        user.push('\n');
    }
    Ok(ChatRequest::new(SYSTEM_PROMPT, user, template.temperature, config.max_tokens))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseFailure {
    /// A `{...}` fragment that is not a usable JSON object.
    Unparseable { fragment: String, reason: String },
    /// A well-formed object that fails record validation.
    Invalid { record: WireRecord, violations: Vec<String> },
}

/// Spans of balanced top-level `{...}` in `raw`, string-literal aware. An
/// unterminated trailing object is returned with `complete = false`.
fn object_spans(raw: &str) -> Vec<(usize, usize, bool)> {
    let bytes = raw.as_bytes();
    let mut spans = Vec::new();
    let mut depth = 0usize;
    let mut start = 0;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' if depth > 0 => in_string = true,
            b'{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            b'}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    spans.push((start, i + 1, true));
                }
            }
            _ => {}
        }
    }
    if depth > 0 {
        spans.push((start, raw.len(), false));
    }
    spans
}

fn clip(s: &str) -> String {
    const MAX: usize = 200;
    if s.chars().count() <= MAX {
        s.to_string()
    } else {
        let mut out: String = s.chars().take(MAX).collect();
        out.push('…');
        out
    }
}

fn wire_from_value(v: &serde_json::Value) -> Result<WireRecord, String> {
    let field = |name: &str, required: bool| match v.get(name) {
        Some(serde_json::Value::String(s)) => Ok(s.trim().to_string()),
        None | Some(serde_json::Value::Null) if !required => Ok(String::new()),
        None => Err(format!("missing field {name:?}")),
        Some(_) => Err(format!("field {name:?} is not a string")),
    };
    Ok(WireRecord {
        instruction: field("instruction", true)?,
        input: field("input", false)?,
        output: field("output", true)?,
    })
}

/// Extracts every object from a model response (one per line, inside an
/// array, or wrapped in an object holding such an array) and validates each
/// against the template. Every object found lands in exactly one of the two
/// outputs.
pub fn parse_batch(raw: &str, template: &TemplateSpec) -> (Vec<InstructionRecord>, Vec<ParseFailure>) {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut candidates: Vec<Result<serde_json::Value, (String, String)>> = Vec::new();
    for (start, end, complete) in object_spans(raw) {
        let fragment = &raw[start..end];
        if !complete {
            candidates.push(Err((fragment.to_string(), "truncated object".to_string())));
            continue;
        }
        match serde_json::from_str::<serde_json::Value>(fragment) {
            Ok(v) if v.get("instruction").is_none() => {
                // wrapper such as {"questions": [...]}: unpack its objects
                let inner: Vec<serde_json::Value> = v
                    .as_object()
                    .into_iter()
                    .flat_map(|m| m.values())
                    .filter_map(|x| x.as_array())
                    .flatten()
                    .filter(|x| x.is_object())
                    .cloned()
                    .collect();
                if inner.is_empty() {
                    candidates.push(Ok(v));
                } else {
                    candidates.extend(inner.into_iter().map(Ok));
                }
            }
            Ok(v) => candidates.push(Ok(v)),
            Err(e) => candidates.push(Err((fragment.to_string(), e.to_string()))),
        }
    }
    for c in candidates {
        let value = match c {
            Ok(v) => v,
            Err((fragment, reason)) => {
                failures.push(ParseFailure::Unparseable {
                    fragment: clip(&fragment),
                    reason,
                });
                continue;
            }
        };
        let wire = match wire_from_value(&value) {
            Ok(w) => w,
            Err(reason) => {
                failures.push(ParseFailure::Unparseable {
                    fragment: clip(&value.to_string()),
                    reason,
                });
                continue;
            }
        };
        let record = InstructionRecord {
            instruction: wire.instruction.clone(),
            input: wire.input.clone(),
            output: wire.output.clone(),
            template_id: template.id.clone(),
            category: template.category,
            provenance: Provenance::Synthetic,
            gen_meta: None,
        };
        let violations = template.check_format(&record);
        if violations.is_empty() {
            records.push(record);
        } else {
            failures.push(ParseFailure::Invalid {
                record: wire,
                violations: violations.iter().map(Violation::to_string).collect(),
            });
        }
    }
    (records, failures)
}

/// Outcome of gating one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub accepted: bool,
    /// Highest ROUGE-L against the pool (0.0 for an empty pool).
    pub score: f64,
    /// Pool index of the closest member.
    pub nearest: Option<usize>,
}

/// A template's dedup pool and threshold.
pub struct DedupGate {
    pool: DedupPool,
    texts: Vec<String>,
    threshold: f64,
}

impl DedupGate {
    pub fn new(threshold: f64) -> Result<Self, GenError> {
        if !(MIN_ROUGE_THRESHOLD..=MAX_ROUGE_THRESHOLD).contains(&threshold) {
            return Err(GenError::Threshold(threshold));
        }
        Ok(DedupGate {
            pool: DedupPool::new(),
            texts: Vec::new(),
            threshold,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Adds a record unconditionally (seeds, or records restored on resume).
    pub fn admit(&mut self, record: &InstructionRecord) {
        let text = record.similarity_text();
        self.pool.insert(&tokenize(&text));
        self.texts.push(text);
    }

    /// Text of pool member `i`.
    pub fn member(&self, i: usize) -> Option<&str> {
        self.texts.get(i).map(String::as_str)
    }

    /// Accepts iff the candidate's max ROUGE-L against the pool is below the
    /// threshold; accepted candidates join the pool.
    pub fn check(&mut self, candidate: &InstructionRecord) -> Decision {
        let text = candidate.similarity_text();
        let seq = tokenize(&text);
        let (score, nearest) = self.pool.max_similarity(&seq);
        let accepted = score < self.threshold;
        if accepted {
            self.pool.insert(&seq);
            self.texts.push(text);
        }
        Decision {
            accepted,
            score,
            nearest,
        }
    }
}

/// Gates `candidate`; on acceptance records the score in its metadata.
pub fn accept_or_reject(candidate: &mut InstructionRecord, gate: &mut DedupGate, batch_index: u32, temperature: f64) -> Decision {
    let d = gate.check(candidate);
    if d.accepted {
        candidate.gen_meta = Some(GenMeta {
            batch_index,
            temperature,
            max_rouge: d.score,
        });
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    BudgetExhausted,
    ProviderError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    Duplicate {
        batch_index: u32,
        instruction: String,
        score: f64,
        nearest: String,
    },
    Invalid {
        batch_index: u32,
        failure: ParseFailure,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRun {
    pub template_id: String,
    pub target: usize,
    pub threshold: f64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub calls_made: usize,
    /// Well-formed objects that reached the gate or failed validation.
    pub objects_found: usize,
    pub accepted_count: usize,
    pub rejected_dup: usize,
    pub rejected_invalid: usize,
    pub parse_failures: usize,
    /// Valid objects left ungated because the target was reached mid-batch.
    pub surplus: usize,
    pub temperatures_used: Vec<f64>,
    pub rejections: Vec<Rejection>,
    #[serde(skip)]
    pub accepted: Vec<InstructionRecord>,
}

impl GenerationRun {
    /// `objects_found = accepted + rejected_dup + rejected_invalid`.
    pub fn accounting_holds(&self) -> bool {
        self.accepted_count == self.accepted.len()
            && self.objects_found == self.accepted_count + self.rejected_dup + self.rejected_invalid
    }
}

/// Runs build → call → parse → gate until `target_per_template` records are
/// accepted or the call budget runs out. Call `k` uses `sample_index = k`, so
/// with a disk-cached client an interrupted run replays its earlier calls
/// from cache and continues where it stopped.
pub fn run_generation(
    template: &TemplateSpec,
    seeds: &[InstructionRecord],
    config: &GenerationConfig,
    client: &ChatClient,
) -> Result<GenerationRun, GenError> {
    let base = build_generation_prompt(template, seeds, config)?;
    let mut gate = DedupGate::new(template.rouge_threshold)?;
    for s in seeds {
        gate.admit(s);
    }
    let target = config.target_per_template;
    let mut run = GenerationRun {
        template_id: template.id.clone(),
        target,
        threshold: template.rouge_threshold,
        status: RunStatus::Complete,
        error: None,
        calls_made: 0,
        objects_found: 0,
        accepted_count: 0,
        rejected_dup: 0,
        rejected_invalid: 0,
        parse_failures: 0,
        surplus: 0,
        temperatures_used: Vec::new(),
        rejections: Vec::new(),
        accepted: Vec::new(),
    };
    let mut temperature = template.temperature;
    while run.accepted.len() < target {
        if run.calls_made >= config.max_calls_per_template {
            run.status = RunStatus::BudgetExhausted;
            break;
        }
        let batch_index = run.calls_made as u32;
        let mut request = base.clone();
        request.temperature = temperature;
        request.sample_index = batch_index;
        run.calls_made += 1;
        run.temperatures_used.push(temperature);
        let raw = match client.complete_chat(&request) {
            Ok(r) => r,
            Err(e) => {
                log::error!("{}: call {batch_index} failed: {e}", template.id);
                run.status = RunStatus::ProviderError;
                run.error = Some(e.to_string());
                break;
            }
        };
        let (records, failures) = parse_batch(&raw, template);
        let mut rejected_this_call = 0;
        let seen_this_call = records.len() + failures.len();
        for f in failures {
            match f {
                ParseFailure::Unparseable { .. } => run.parse_failures += 1,
                ParseFailure::Invalid { .. } => {
                    run.rejected_invalid += 1;
                    run.objects_found += 1;
                }
            }
            rejected_this_call += 1;
            run.rejections.push(Rejection::Invalid { batch_index, failure: f });
        }
        for mut rec in records {
            if run.accepted.len() >= target {
                run.surplus += 1;
                continue;
            }
            run.objects_found += 1;
            let d = accept_or_reject(&mut rec, &mut gate, batch_index, temperature);
            if d.accepted {
                run.accepted.push(rec);
            } else {
                run.rejected_dup += 1;
                rejected_this_call += 1;
                let nearest = d.nearest.and_then(|i| gate.member(i)).unwrap_or("").to_string();
                log::debug!("{}: duplicate ({:.3}) {:?}", template.id, d.score, rec.instruction);
                run.rejections.push(Rejection::Duplicate {
                    batch_index,
                    instruction: rec.similarity_text(),
                    score: d.score,
                    nearest,
                });
            }
        }
        let rate = if seen_this_call == 0 {
            1.0
        } else {
            rejected_this_call as f64 / seen_this_call as f64
        };
        if rate > config.bump_after_reject_rate {
            temperature = (temperature + config.temperature_bump).min(config.max_temperature.max(template.temperature));
        }
    }
    run.accepted_count = run.accepted.len();
    Ok(run)
}

/// Writes `synthetic/<id>.jsonl` and `runs/<id>.json` under `root`.
pub fn write_run(run: &GenerationRun, root: &Path) -> Result<(), GenError> {
    let synthetic = root.join("synthetic").join(format!("{}.jsonl", run.template_id));
    crate::dataset::write_jsonl(&synthetic, &run.accepted).map_err(|e| GenError::Io {
        path: synthetic.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let ledger = root.join("runs").join(format!("{}.json", run.template_id));
    let mut bytes = serde_json::to_vec_pretty(run).expect("run serializes");
    bytes.push(b'\n');
    write_atomic(&ledger, &bytes).map_err(io_err(&ledger))
}

/// Reads a run ledger back (accepted records are loaded separately).
pub fn read_run_ledger(path: &Path) -> Result<GenerationRun, GenError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| GenError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{ProviderError, ScriptedChat};
    use crate::record::Category;
    use crate::templating::{AnswerFormat, AnswerRule, PatternSource};
    use std::sync::Arc;

    fn template(threshold: f64) -> TemplateSpec {
        TemplateSpec {
            id: "t1".into(),
            name: "t1".into(),
            category: Category::RelativeSizes,
            source: PatternSource::Reconstructed,
            pattern: "Which is heaviest?".into(),
            slot_constraints: Default::default(),
            rule: AnswerRule::Fit,
            answer_format: AnswerFormat::Mc2,
            rouge_threshold: threshold,
            temperature: 1.0,
            eval_count: 4,
            generation_prompt: "Create {{COUNT}} unique multiple choice questions about fitting things.".into(),
            prompt_source: PatternSource::Reconstructed,
        }
    }

    fn rec(instruction: &str) -> InstructionRecord {
        InstructionRecord {
            instruction: instruction.into(),
            input: "A) it can B) it cannot".into(),
            output: "A) it can".into(),
            template_id: "t1".into(),
            category: Category::RelativeSizes,
            provenance: Provenance::Seed,
            gen_meta: None,
        }
    }

    fn seeds() -> Vec<InstructionRecord> {
        [
            "Can a drawbridge fit in a cup?",
            "Can chalk fit in a bucket?",
            "Can a ladder fit in a bag?",
            "Can a coin fit in a jar?",
            "Can a sofa fit in a box?",
        ]
        .iter()
        .map(|s| rec(s))
        .collect()
    }

    fn line(instruction: &str) -> String {
        serde_json::to_string(&rec(instruction).wire()).unwrap()
    }

    #[test]
    fn prompt_has_system_text_count_and_shots() {
        let cfg = GenerationConfig::default();
        let r = build_generation_prompt(&template(0.9), &seeds(), &cfg).unwrap();
        assert_eq!(r.system_prompt, SYSTEM_PROMPT);
        let user = r.last_user();
        assert!(user.starts_with("Create 40 unique multiple choice questions"));
        assert_eq!(user.lines().filter(|l| l.starts_with('{')).count(), 5);
        assert_eq!(r, build_generation_prompt(&template(0.9), &seeds(), &cfg).unwrap());
    }

    #[test]
    fn prompt_preconditions() {
        let cfg = GenerationConfig {
            shots: 0,
            ..Default::default()
        };
        assert!(matches!(
            build_generation_prompt(&template(0.9), &seeds(), &cfg),
            Err(GenError::Config(_))
        ));
        let cfg = GenerationConfig::default();
        assert!(matches!(
            build_generation_prompt(&template(0.9), &seeds()[..3], &cfg),
            Err(GenError::InsufficientSeeds { .. })
        ));
        let mut foreign = seeds();
        foreign[0].template_id = "other".into();
        assert!(matches!(
            build_generation_prompt(&template(0.9), &foreign, &cfg),
            Err(GenError::ForeignSeed { .. })
        ));
    }

    #[test]
    fn parses_lines_arrays_and_wrappers() {
        let t = template(0.9);
        let raw = (0..40).map(|i| line(&format!("Can thing {i} fit?"))).collect::<Vec<_>>().join("\n");
        let (r, f) = parse_batch(&raw, &t);
        assert_eq!((r.len(), f.len()), (40, 0));
        let arr = format!("```json\n[{}, {}]\n```", line("a?"), line("b?"));
        assert_eq!(parse_batch(&arr, &t).0.len(), 2);
        let wrapped = format!("{{\"questions\": [{}, {}]}}", line("a?"), line("b?"));
        assert_eq!(parse_batch(&wrapped, &t).0.len(), 2);
    }

    #[test]
    fn truncated_object_is_a_parse_failure() {
        let t = template(0.9);
        let mut raw = (0..39).map(|i| line(&format!("Can thing {i} fit?"))).collect::<Vec<_>>().join("\n");
        raw.push_str("\n{\"instruction\": \"Can a boat fit in a ");
        let (r, f) = parse_batch(&raw, &t);
        assert_eq!(r.len(), 39);
        assert_eq!(f.len(), 1);
        assert!(matches!(&f[0], ParseFailure::Unparseable { reason, .. } if reason == "truncated object"));
    }

    #[test]
    fn braces_inside_strings_do_not_split_objects() {
        let t = template(0.9);
        let raw = r#"{"instruction": "Is {x} or }y{ bigger?", "input": "A) it can B) it cannot", "output": "B) it cannot"}"#;
        let (r, f) = parse_batch(raw, &t);
        assert_eq!((r.len(), f.len()), (1, 0));
        assert_eq!(r[0].instruction, "Is {x} or }y{ bigger?");
    }

    #[test]
    fn gold_outside_choices_is_a_validation_failure() {
        let t = template(0.9);
        let raw = r#"{"instruction": "Can a cup fit in a car?", "input": "A) it can B) it cannot", "output": "C) maybe"}"#;
        let (r, f) = parse_batch(raw, &t);
        assert!(r.is_empty());
        assert!(matches!(&f[0], ParseFailure::Invalid { .. }));
    }

    #[test]
    fn gate_examples() {
        let mut gate = DedupGate::new(0.8).unwrap();
        let mut c = rec("anything at all");
        let d = accept_or_reject(&mut c, &mut gate, 0, 1.0);
        assert!(d.accepted);
        assert_eq!(d.score, 0.0);
        assert_eq!(c.gen_meta.as_ref().unwrap().max_rouge, 0.0);
        let mut again = rec("anything at all");
        let d = accept_or_reject(&mut again, &mut gate, 0, 1.0);
        assert!(!d.accepted);
        assert_eq!(d.score, 1.0);
        assert!(again.gen_meta.is_none());
        assert!(DedupGate::new(0.5).is_err());
    }

    #[test]
    fn target_zero_makes_no_calls() {
        let provider = Arc::new(ScriptedChat::replies(Vec::<String>::new()));
        let client = ChatClient::new(provider.clone());
        let cfg = GenerationConfig {
            target_per_template: 0,
            ..Default::default()
        };
        let run = run_generation(&template(0.9), &seeds(), &cfg, &client).unwrap();
        assert_eq!(run.calls_made, 0);
        assert_eq!(run.status, RunStatus::Complete);
        assert_eq!(provider.calls(), 0);
    }

    fn unique_batch(call: usize, n: usize) -> String {
        (0..n)
            .map(|i| line(&format!("Would object number {call} {i} ever fit inside container variant {}?", call * 100 + i)))
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn budget_of_one_call() {
        let provider = Arc::new(ScriptedChat::from_fn(|_, n| Ok(unique_batch(n, 40))));
        let client = ChatClient::new(provider);
        let cfg = GenerationConfig {
            max_calls_per_template: 1,
            ..Default::default()
        };
        let run = run_generation(&template(0.97), &seeds(), &cfg, &client).unwrap();
        assert_eq!(run.accepted.len(), 40);
        assert_eq!(run.status, RunStatus::BudgetExhausted);
        assert!(run.accounting_holds());
    }

    #[test]
    fn provider_failure_returns_partial_run() {
        let provider = Arc::new(ScriptedChat::queue([
            Ok(unique_batch(0, 10)),
            Err(ProviderError::Auth("revoked".into())),
        ]));
        let client = ChatClient::new(provider);
        let run = run_generation(&template(0.97), &seeds(), &GenerationConfig::default(), &client).unwrap();
        assert_eq!(run.status, RunStatus::ProviderError);
        assert_eq!(run.accepted.len(), 10);
        assert!(run.error.as_deref().unwrap().contains("revoked"));
    }

    #[test]
    fn high_rejection_bumps_temperature() {
        // every call repeats the seeds, so everything is rejected
        let seeds = seeds();
        let dupes = seeds.iter().map(|s| serde_json::to_string(&s.wire()).unwrap()).collect::<Vec<_>>().join("\n");
        let provider = Arc::new(ScriptedChat::from_fn(move |_, _| Ok(dupes.clone())));
        let client = ChatClient::new(provider);
        let cfg = GenerationConfig {
            max_calls_per_template: 4,
            temperature_bump: 0.25,
            max_temperature: 1.6,
            ..Default::default()
        };
        let run = run_generation(&template(0.9), &seeds, &cfg, &client).unwrap();
        assert_eq!(run.temperatures_used, vec![1.0, 1.25, 1.5, 1.6]);
        assert_eq!(run.rejected_dup, 20);
        assert!(run.accounting_holds());
    }

    #[test]
    fn surplus_is_not_gated() {
        let provider = Arc::new(ScriptedChat::from_fn(|_, n| Ok(unique_batch(n, 40))));
        let client = ChatClient::new(provider);
        let cfg = GenerationConfig {
            target_per_template: 50,
            ..Default::default()
        };
        let run = run_generation(&template(0.97), &seeds(), &cfg, &client).unwrap();
        assert_eq!(run.accepted.len(), 50);
        assert_eq!(run.calls_made, 2);
        assert_eq!(run.surplus, 30);
        assert!(run.accounting_holds());
    }
}
