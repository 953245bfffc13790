//! Template specs and the renderer that turns ontology bindings into seed and
//! evaluation records.
//!
//! A pattern is prose with `{{SLOT}}` or `{{SLOT|filter}}` placeholders.
//! Filters: `a` (indefinite article), `the`, `does` ("does a crane" /
//! "do hydraulic lifts") and `cap` (capitalise).

mod bindings;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{indefinite_article, Constraint, Ontology, OntologyEntry};
use crate::record::{format_choices, Category, InstructionRecord, Provenance, Violation};
use crate::rng::derive_rng;

pub use bindings::enumerate_bindings;

pub const SEEDS_PER_TEMPLATE: usize = 5;
pub const MIN_EVAL_PER_TEMPLATE: usize = 4;
pub const MIN_ROUGE_THRESHOLD: f64 = 0.8;
pub const MAX_ROUGE_THRESHOLD: f64 = 0.97;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    Mc5,
    Mc2,
    FreeText,
    Ordering2,
}

impl AnswerFormat {
    /// Number of lettered choices, or `None` for free text.
    pub fn choice_count(self) -> Option<usize> {
        match self {
            AnswerFormat::Mc5 => Some(5),
            AnswerFormat::Mc2 | AnswerFormat::Ordering2 => Some(2),
            AnswerFormat::FreeText => None,
        }
    }
}

/// Whether a pattern is quoted from the source material or reconstructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PatternSource {
    Verbatim,
    #[default]
    Reconstructed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordinal {
    Size,
    Weight,
}

impl Ordinal {
    pub fn of(self, e: &OntologyEntry) -> u8 {
        match self {
            Ordinal::Size => e.size_class,
            Ordinal::Weight => e.weight_class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Max,
    Min,
}

/// List-valued entry field a select rule keys on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Affordance,
    Hypernym,
    SecondaryUse,
    Location,
    DisasterTag,
    Shape,
    Property,
}

impl Field {
    pub fn values(self, e: &OntologyEntry) -> Vec<&str> {
        match self {
            Field::Affordance => e.affordances.iter().map(|a| a.verb.as_str()).collect(),
            Field::Hypernym => e.hypernyms.iter().map(String::as_str).collect(),
            Field::SecondaryUse => e.secondary_uses.iter().map(String::as_str).collect(),
            Field::Location => e.locations.iter().map(String::as_str).collect(),
            Field::DisasterTag => e.disaster_tags.iter().map(String::as_str).collect(),
            Field::Shape => e.shapes.iter().map(String::as_str).collect(),
            Field::Property => e.properties.iter().map(String::as_str).collect(),
        }
    }

    /// An entry named after a hypernym counts as one ("truck" is a truck).
    pub fn has(self, e: &OntologyEntry, value: &str) -> bool {
        (self == Field::Hypernym && e.name == value) || self.values(e).contains(&value)
    }
}

/// Extra condition the gold entry of a select rule must also meet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Restriction {
    /// Gold is strictly bigger than a reference entry bound to `slot`.
    BiggerThan { slot: String },
    /// Gold also carries a value of `field`, bound to `slot`.
    AlsoHas { field: Field, slot: String },
}

/// How a template turns ontology entries into a question, its choices and
/// its gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnswerRule {
    /// Five entries from five distinct classes; gold is the extreme one.
    Extreme { property: Ordinal, direction: Direction },
    /// Gold has `field` = value (bound to `value_slot`), distractors lack it.
    /// `invert` swaps the roles; `values` optionally whitelists the values.
    Select {
        field: Field,
        value_slot: String,
        #[serde(default)]
        invert: bool,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        values: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        restrict: Option<Restriction>,
    },
    /// "it can" / "it cannot": does OBJECT fit inside CONTAINER.
    Fit,
    /// "it can" / "it cannot": can OBJECT stand in for OTHER.
    UseAs,
    /// Which of two states suits a purpose.
    StateChoice,
    /// Object is in the wrong state for a purpose; what to do first.
    StateFollowUp,
    /// Two entries sharing an affordance; which ranks higher on `property`.
    PairCompare { property: Ordinal },
    /// Free-text contrast between two entries sharing an affordance.
    Difference,
    /// Free-text role an object plays in a relief task.
    Role,
    /// Which of two usage steps comes first.
    StepOrder,
    /// Where an object is typically found.
    LocationOf,
    /// Pick the instruction of a given class ("use the ladder to climb").
    InstructionClass { classes: BTreeMap<String, Vec<String>> },
}

impl AnswerRule {
    fn expected_format(&self) -> AnswerFormat {
        match self {
            AnswerRule::Extreme { .. }
            | AnswerRule::Select { .. }
            | AnswerRule::LocationOf
            | AnswerRule::InstructionClass { .. } => AnswerFormat::Mc5,
            AnswerRule::Fit
            | AnswerRule::UseAs
            | AnswerRule::StateChoice
            | AnswerRule::StateFollowUp
            | AnswerRule::PairCompare { .. } => AnswerFormat::Mc2,
            AnswerRule::Difference | AnswerRule::Role => AnswerFormat::FreeText,
            AnswerRule::StepOrder => AnswerFormat::Ordering2,
        }
    }
}

fn default_eval_count() -> usize {
    MIN_EVAL_PER_TEMPLATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub id: String,
    pub name: String,
    pub category: Category,
    #[serde(default)]
    pub source: PatternSource,
    pub pattern: String,
    pub slot_constraints: BTreeMap<String, Constraint>,
    pub rule: AnswerRule,
    pub answer_format: AnswerFormat,
    pub rouge_threshold: f64,
    pub temperature: f64,
    #[serde(default = "default_eval_count")]
    pub eval_count: usize,
    /// Category prompt sent ahead of the few-shot examples. `{{COUNT}}` is
    /// replaced with the batch size.
    pub generation_prompt: String,
    #[serde(default)]
    pub prompt_source: PatternSource,
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read templates {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed template file at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("template {id}: {problem}")]
    Invalid { id: String, problem: String },
    #[error("template {template}: no ontology entry satisfies slot {slot}")]
    UnsatisfiableSlot { template: String, slot: String },
    #[error("template {template}: binding lacks slot {slot}")]
    MissingSlot { template: String, slot: String },
    #[error("template {template}: needs {needed} distinct bindings, ontology yields {available}")]
    InsufficientBindings {
        template: String,
        needed: usize,
        available: usize,
    },
}

/// One placeholder occurrence in a pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Placeholder {
    slot: String,
    filter: Option<String>,
}

enum Piece<'a> {
    Text(&'a str),
    Slot(Placeholder),
}

fn parse_pattern(pattern: &str) -> Result<Vec<Piece<'_>>, String> {
    let mut pieces = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find("{{") {
        if open > 0 {
            pieces.push(Piece::Text(&rest[..open]));
        }
        let after = &rest[open + 2..];
        let close = after.find("}}").ok_or_else(|| "unclosed '{{'".to_string())?;
        let inner = after[..close].trim();
        let (slot, filter) = match inner.split_once('|') {
            Some((s, f)) => (s.trim(), Some(f.trim().to_string())),
            None => (inner, None),
        };
        if slot.is_empty() {
            return Err("empty slot name".to_string());
        }
        if let Some(f) = &filter {
            if !["a", "the", "does", "cap"].contains(&f.as_str()) {
                return Err(format!("unknown filter {f:?}"));
            }
        }
        pieces.push(Piece::Slot(Placeholder {
            slot: slot.to_string(),
            filter,
        }));
        rest = &after[close + 2..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest));
    }
    Ok(pieces)
}

impl TemplateSpec {
    /// Slot names used in the pattern, in order of first appearance.
    pub fn pattern_slots(&self) -> Vec<String> {
        let mut seen = Vec::new();
        if let Ok(pieces) = parse_pattern(&self.pattern) {
            for p in pieces {
                if let Piece::Slot(ph) = p {
                    if !seen.contains(&ph.slot) {
                        seen.push(ph.slot);
                    }
                }
            }
        }
        seen
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        let invalid = |problem: String| TemplateError::Invalid {
            id: self.id.clone(),
            problem,
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id".into()));
        }
        parse_pattern(&self.pattern).map_err(invalid)?;
        for slot in self.pattern_slots() {
            if !self.slot_constraints.contains_key(&slot) {
                return Err(invalid(format!("slot {slot} has no constraint")));
            }
        }
        if !(MIN_ROUGE_THRESHOLD..=MAX_ROUGE_THRESHOLD).contains(&self.rouge_threshold) {
            return Err(invalid(format!(
                "rouge_threshold {} outside [{MIN_ROUGE_THRESHOLD}, {MAX_ROUGE_THRESHOLD}]",
                self.rouge_threshold
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid(format!("temperature {} must be positive", self.temperature)));
        }
        if self.eval_count < MIN_EVAL_PER_TEMPLATE {
            return Err(invalid(format!("eval_count below {MIN_EVAL_PER_TEMPLATE}")));
        }
        let expected = self.rule.expected_format();
        if expected != self.answer_format {
            return Err(invalid(format!(
                "answer_format {:?} does not match rule (expects {expected:?})",
                self.answer_format
            )));
        }
        Ok(())
    }

    pub fn generation_prompt_for(&self, count: usize) -> String {
        self.generation_prompt.replace("{{COUNT}}", &count.to_string())
    }

    /// Checks a record against this template's answer format on top of the
    /// structural checks of [`crate::record::validate_record`].
    pub fn check_format(&self, record: &InstructionRecord) -> Vec<Violation> {
        let mut out = crate::record::validate_record(record);
        match (self.answer_format.choice_count(), record.choices()) {
            (None, Some(_)) => out.push(Violation::UnexpectedChoices),
            (Some(_), None) => out.push(Violation::MissingChoices),
            (Some(expected), Some(Ok(cs))) if cs.len() != expected => {
                out.push(Violation::WrongChoiceCount {
                    expected,
                    found: cs.len(),
                })
            }
            _ => {}
        }
        out
    }
}

/// A validated template file.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: Vec<TemplateSpec>,
}

impl TemplateSet {
    pub fn new(templates: Vec<TemplateSpec>) -> Result<Self, TemplateError> {
        let mut ids = HashSet::new();
        for t in &templates {
            t.validate()?;
            if !ids.insert(t.id.clone()) {
                return Err(TemplateError::Invalid {
                    id: t.id.clone(),
                    problem: "duplicate template id".into(),
                });
            }
        }
        Ok(TemplateSet { templates })
    }

    pub fn from_json(text: &str) -> Result<Self, TemplateError> {
        let templates: Vec<TemplateSpec> = serde_json::from_str(text).map_err(|e| TemplateError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::new(templates)
    }

    pub fn templates(&self) -> &[TemplateSpec] {
        &self.templates
    }

    pub fn get(&self, id: &str) -> Option<&TemplateSpec> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<TemplateSet, TemplateError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TemplateError::Io {
        path: path.display().to_string(),
        source,
    })?;
    TemplateSet::from_json(&text)
}

/// Text a slot renders to, plus what the article filters need.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotValue {
    pub text: String,
    /// Name of the ontology entry this value came from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indefinite: Option<String>,
    #[serde(default)]
    pub plural: bool,
}

impl SlotValue {
    pub fn plain(text: impl Into<String>) -> Self {
        let text = text.into();
        let indefinite = format!("{} {text}", indefinite_article(&text));
        SlotValue {
            text,
            entry: None,
            indefinite: Some(indefinite),
            plural: false,
        }
    }

    pub fn from_entry(e: &OntologyEntry) -> Self {
        SlotValue {
            text: e.name.clone(),
            entry: Some(e.name.clone()),
            indefinite: Some(e.with_article()),
            plural: e.plural,
        }
    }

    fn render(&self, filter: Option<&str>) -> String {
        match filter {
            None => self.text.clone(),
            Some("a") => self.indefinite.clone().unwrap_or_else(|| self.text.clone()),
            Some("the") => format!("the {}", self.text),
            Some("does") => {
                let noun = self.indefinite.clone().unwrap_or_else(|| self.text.clone());
                format!("{} {noun}", if self.plural { "do" } else { "does" })
            }
            Some("cap") => capitalize(&self.text),
            Some(other) => unreachable!("filter {other} rejected at validation"),
        }
    }
}

pub(crate) fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Assignment of pattern slots plus the gold answer and distractor texts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Binding {
    pub slots: BTreeMap<String, SlotValue>,
    pub answer: String,
    #[serde(default)]
    pub distractors: Vec<String>,
}

/// Renders one binding into a record with the given provenance. Choice order
/// is shuffled by an RNG derived from `rng_seed`, the template id, the
/// question text and the options; the gold label is assigned after the
/// shuffle.
pub fn render(
    template: &TemplateSpec,
    binding: &Binding,
    rng_seed: u64,
    provenance: Provenance,
) -> Result<InstructionRecord, TemplateError> {
    let pieces = parse_pattern(&template.pattern).map_err(|problem| TemplateError::Invalid {
        id: template.id.clone(),
        problem,
    })?;
    let mut instruction = String::new();
    for piece in pieces {
        match piece {
            Piece::Text(t) => instruction.push_str(t),
            Piece::Slot(ph) => {
                let value = binding.slots.get(&ph.slot).ok_or_else(|| TemplateError::MissingSlot {
                    template: template.id.clone(),
                    slot: ph.slot.clone(),
                })?;
                instruction.push_str(&value.render(ph.filter.as_deref()));
            }
        }
    }
    let (input, output) = match template.answer_format.choice_count() {
        None => (String::new(), binding.answer.clone()),
        Some(_) => {
            let mut options: Vec<&str> = std::iter::once(binding.answer.as_str())
                .chain(binding.distractors.iter().map(String::as_str))
                .collect();
            let key = options.join("\n");
            let mut rng = derive_rng(rng_seed, &["shuffle", &template.id, &instruction, &key]);
            options.shuffle(&mut rng);
            let gold_pos = options.iter().position(|o| *o == binding.answer).unwrap_or(0);
            let input = format_choices(&options);
            let label = crate::record::CHOICE_LABELS[gold_pos];
            (input, format!("{label}) {}", binding.answer))
        }
    };
    Ok(InstructionRecord {
        instruction,
        input,
        output,
        template_id: template.id.clone(),
        category: template.category,
        provenance,
        gen_meta: None,
    })
}

pub fn render_seed(template: &TemplateSpec, binding: &Binding, rng_seed: u64) -> Result<InstructionRecord, TemplateError> {
    render(template, binding, rng_seed, Provenance::Seed)
}

pub fn render_eval(template: &TemplateSpec, binding: &Binding, rng_seed: u64) -> Result<InstructionRecord, TemplateError> {
    render(template, binding, rng_seed, Provenance::Eval)
}

/// Seed and evaluation records of one template, with the bindings used.
#[derive(Debug, Clone)]
pub struct TemplateRecords {
    pub template_id: String,
    pub seeds: Vec<InstructionRecord>,
    pub eval: Vec<InstructionRecord>,
    pub seed_bindings: Vec<Binding>,
    pub eval_bindings: Vec<Binding>,
}

/// Partitions a template's binding list into `seeds_per_template` seed
/// bindings followed by `eval_count` evaluation bindings, so the two sets
/// never share a binding, and renders both.
pub fn build_template_records(
    template: &TemplateSpec,
    ontology: &Ontology,
    rng_seed: u64,
    seeds_per_template: usize,
) -> Result<TemplateRecords, TemplateError> {
    let bindings = enumerate_bindings(template, ontology, rng_seed)?;
    let needed = seeds_per_template + template.eval_count;
    if bindings.len() < needed {
        return Err(TemplateError::InsufficientBindings {
            template: template.id.clone(),
            needed,
            available: bindings.len(),
        });
    }
    let seed_bindings = bindings[..seeds_per_template].to_vec();
    let eval_bindings = bindings[seeds_per_template..needed].to_vec();
    let seeds = seed_bindings
        .iter()
        .map(|b| render_seed(template, b, rng_seed))
        .collect::<Result<Vec<_>, _>>()?;
    let eval = eval_bindings
        .iter()
        .map(|b| render_eval(template, b, rng_seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TemplateRecords {
        template_id: template.id.clone(),
        seeds,
        eval,
        seed_bindings,
        eval_bindings,
    })
}
