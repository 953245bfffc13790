//! Evaluation harness. Each evaluation item is sent to a subject model, and
//! the response is graded by the cosine similarity of its embedding to the
//! gold answer's embedding (SemScore). An exact-letter match is recorded
//! alongside as an auxiliary metric.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::providers::{cosine_values, ChatClient, ChatRequest, EmbeddingProvider, ProviderError};
use crate::record::{parse_choices, Category, InstructionRecord, Provenance};

pub const DEFAULT_SYSTEM_PROMPT: &str =
    "Answer the question. For multiple choice questions, reply with the letter and text of the correct option.";

/// Texts per embedding request.
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("semscore needs nonempty response and gold")]
    EmptyText,
    #[error("record {id} is not an evaluation record")]
    NotEval { id: String },
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("embedding failed: {0}")]
    Embedding(#[from] ProviderError),
    #[error("reports were produced on different evaluation sets ({0} vs {1})")]
    MismatchedSets(String, String),
    #[error("no reports to compare")]
    NoReports,
}

/// Cosine similarity of the embeddings of `response` and `gold`.
pub fn semscore(response: &str, gold: &str, embedder: &dyn EmbeddingProvider) -> Result<f64, EvalError> {
    if response.trim().is_empty() || gold.trim().is_empty() {
        return Err(EvalError::EmptyText);
    }
    let v = embedder.embed(&[response.to_string(), gold.to_string()])?;
    Ok(cosine_values(&v[0], &v[1])?)
}

/// Choice letter a response opens with: "B", "B)", "(B)", "B." or
/// "Answer: B) ...".
pub fn response_letter(response: &str) -> Option<char> {
    let t = response.trim();
    let t = t
        .strip_prefix("Answer:")
        .or_else(|| t.strip_prefix("answer:"))
        .unwrap_or(t)
        .trim_start();
    let t = t.strip_prefix('(').unwrap_or(t);
    let mut chars = t.chars();
    let c = chars.next()?.to_ascii_uppercase();
    if !('A'..='E').contains(&c) {
        return None;
    }
    match chars.next() {
        None | Some(')') | Some('.') | Some(':') => Some(c),
        Some(ch) if ch.is_whitespace() => Some(c),
        _ => None,
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Multiple choice: same letter as the gold. Free text: equal after
/// whitespace and case normalisation.
pub fn exact_match(record: &InstructionRecord, response: &str) -> bool {
    match parse_choices(&record.input) {
        Some(Ok(_)) => match (response_letter(response), record.output.chars().next()) {
            (Some(a), Some(g)) => a == g,
            _ => false,
        },
        _ => normalize(response) == normalize(&record.output),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub record_id: String,
    pub template_id: String,
    pub category: Category,
    pub response: Option<String>,
    /// Cosine in [-1, 1]; `None` when the subject call failed.
    pub similarity: Option<f64>,
    pub exact_match: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAccuracy {
    pub threshold: f64,
    pub overall: f64,
    pub per_category: BTreeMap<Category, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    /// Digest of the evaluation set's record ids.
    pub eval_set: String,
    pub per_item: Vec<ItemResult>,
    /// Mean similarity ×100 per category, over scored items.
    pub per_category: BTreeMap<Category, f64>,
    /// Mean similarity ×100 over all scored items.
    pub overall: f64,
    pub scored: usize,
    /// Items whose subject call failed.
    pub shortfall: usize,
    pub exact_match_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_accuracy: Option<ThresholdAccuracy>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub system_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Also report the share of items scoring at least this similarity.
    pub threshold: Option<f64>,
    pub parallel: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            system_prompt: DEFAULT_SYSTEM_PROMPT.to_string(),
            temperature: 0.01,
            max_tokens: 256,
            threshold: None,
            parallel: true,
        }
    }
}

/// Order-independent digest of a set of records.
pub fn eval_set_digest(records: &[InstructionRecord]) -> String {
    let mut ids: Vec<String> = records.iter().map(InstructionRecord::id).collect();
    ids.sort();
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Asks the subject every item, grades each response, and aggregates.
pub fn evaluate(
    subject: &ChatClient,
    model_id: &str,
    eval_set: &[InstructionRecord],
    embedder: &dyn EmbeddingProvider,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if eval_set.is_empty() {
        return Err(EvalError::EmptySet);
    }
    if let Some(r) = eval_set.iter().find(|r| r.provenance != Provenance::Eval) {
        return Err(EvalError::NotEval { id: r.id() });
    }
    let ask = |r: &InstructionRecord| {
        let req = ChatRequest::new(
            options.system_prompt.clone(),
            r.prompt_text(),
            options.temperature,
            options.max_tokens,
        );
        subject.complete_chat(&req).and_then(|text| {
            if text.trim().is_empty() {
                Err(ProviderError::Malformed("empty response".into()))
            } else {
                Ok(text)
            }
        })
    };
    let responses: Vec<Result<String, ProviderError>> = if options.parallel {
        eval_set.par_iter().map(ask).collect()
    } else {
        eval_set.iter().map(ask).collect()
    };

    // embed (response, gold) for answered items
    let answered: Vec<usize> = (0..eval_set.len()).filter(|&i| responses[i].is_ok()).collect();
    let mut texts = Vec::with_capacity(answered.len() * 2);
    for &i in &answered {
        texts.push(responses[i].as_ref().expect("answered").clone());
        texts.push(eval_set[i].output.clone());
    }
    let mut vectors = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(EMBED_CHUNK) {
        let got = embedder.embed(chunk)?;
        if got.len() != chunk.len() {
            return Err(ProviderError::Malformed(format!("{} vectors for {} texts", got.len(), chunk.len())).into());
        }
        vectors.extend(got);
    }
    let mut similarity: Vec<Option<f64>> = vec![None; eval_set.len()];
    for (k, &i) in answered.iter().enumerate() {
        similarity[i] = Some(cosine_values(&vectors[2 * k], &vectors[2 * k + 1])?);
    }

    let per_item: Vec<ItemResult> = eval_set
        .iter()
        .zip(responses)
        .zip(similarity)
        .map(|((r, resp), sim)| {
            let (response, error) = match resp {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            ItemResult {
                record_id: r.id(),
                template_id: r.template_id.clone(),
                category: r.category,
                exact_match: response.as_deref().is_some_and(|t| exact_match(r, t)),
                response,
                similarity: sim,
                error,
            }
        })
        .collect();
    Ok(aggregate(model_id, eval_set_digest(eval_set), per_item, options.threshold))
}

/// Builds a report from graded items.
pub fn aggregate(model_id: &str, eval_set: String, per_item: Vec<ItemResult>, threshold: Option<f64>) -> EvalReport {
    let scored: Vec<&ItemResult> = per_item.iter().filter(|i| i.similarity.is_some()).collect();
    let mut by_cat: BTreeMap<Category, Vec<f64>> = BTreeMap::new();
    for item in &scored {
        by_cat.entry(item.category).or_default().push(item.similarity.expect("scored"));
    }
    let per_category = by_cat.iter().map(|(c, v)| (*c, mean(v) * 100.0)).collect();
    let all: Vec<f64> = scored.iter().map(|i| i.similarity.expect("scored")).collect();
    let threshold_accuracy = threshold.map(|t| {
        let hit = |v: &[f64]| mean(&v.iter().map(|s| if *s >= t { 1.0 } else { 0.0 }).collect::<Vec<_>>()) * 100.0;
        ThresholdAccuracy {
            threshold: t,
            overall: hit(&all),
            per_category: by_cat.iter().map(|(c, v)| (*c, hit(v))).collect(),
        }
    });
    let exact = per_item.iter().filter(|i| i.exact_match).count();
    EvalReport {
        model_id: model_id.to_string(),
        eval_set,
        overall: mean(&all) * 100.0,
        per_category,
        scored: scored.len(),
        shortfall: per_item.len() - scored.len(),
        exact_match_rate: if per_item.is_empty() {
            0.0
        } else {
            exact as f64 / per_item.len() as f64 * 100.0
        },
        threshold_accuracy,
        per_item,
    }
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("model: {}\n", self.model_id);
        for c in Category::ALL {
            match self.per_category.get(&c) {
                Some(v) => {
                    let _ = writeln!(out, "  {:<36} {:>6.2}", c.table_label(), v);
                }
                None => {
                    let _ = writeln!(out, "  {:<36} {:>6}", c.table_label(), "-");
                }
            }
        }
        let _ = writeln!(out, "  {:<36} {:>6.2}", "Overall SemScore", self.overall);
        let _ = writeln!(out, "  {:<36} {:>6.2}", "Exact choice match (%)", self.exact_match_rate);
        if let Some(t) = &self.threshold_accuracy {
            let _ = writeln!(out, "  {:<36} {:>6.2}", format!("Accuracy at >= {}", t.threshold), t.overall);
        }
        if self.shortfall > 0 {
            let _ = writeln!(out, "  {} of {} items unscored", self.shortfall, self.per_item.len());
        }
        out
    }

    /// One row per item.
    pub fn items_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["record_id", "template_id", "category", "similarity", "exact_match", "response", "error"])
            .expect("in-memory csv");
        for i in &self.per_item {
            w.write_record([
                i.record_id.as_str(),
                &i.template_id,
                i.category.slug(),
                &i.similarity.map(|s| format!("{s:.6}")).unwrap_or_default(),
                if i.exact_match { "true" } else { "false" },
                i.response.as_deref().unwrap_or(""),
                i.error.as_deref().unwrap_or(""),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

/// Categories × models table of per-category SemScores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonMatrix {
    pub models: Vec<String>,
    pub rows: Vec<(Category, Vec<Option<f64>>)>,
}

impl ComparisonMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.models.len())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["category".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header).expect("in-memory csv");
        for (c, vals) in &self.rows {
            let mut row = vec![c.slug().to_string()];
            row.extend(vals.iter().map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_default()));
            w.write_record(&row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

/// Lines up per-category scores of reports taken on the same evaluation set.
pub fn compare_models(reports: &[EvalReport]) -> Result<ComparisonMatrix, EvalError> {
    let first = reports.first().ok_or(EvalError::NoReports)?;
    if let Some(r) = reports.iter().find(|r| r.eval_set != first.eval_set) {
        return Err(EvalError::MismatchedSets(first.eval_set.clone(), r.eval_set.clone()));
    }
    Ok(ComparisonMatrix {
        models: reports.iter().map(|r| r.model_id.clone()).collect(),
        rows: Category::ALL
            .iter()
            .map(|c| (*c, reports.iter().map(|r| r.per_category.get(c).copied()).collect()))
            .collect(),
    })
}
