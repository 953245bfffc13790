//! Instruction records, knowledge categories and record validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The eight knowledge categories templates are grouped into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    RelativeSizes,
    ObjectFunctions,
    ObjectDifferences,
    RiskySituations,
    RequiredEquipment,
    ObjectFacts,
    DisasterKnowledge,
    InstructionFollowing,
}

#[derive(Debug, Error)]
#[error("unknown category {0:?}")]
pub struct UnknownCategory(pub String);

impl Category {
    pub const ALL: [Category; 8] = [
        Category::RelativeSizes,
        Category::ObjectFunctions,
        Category::ObjectDifferences,
        Category::RiskySituations,
        Category::RequiredEquipment,
        Category::ObjectFacts,
        Category::DisasterKnowledge,
        Category::InstructionFollowing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::RelativeSizes => "Relative sizes and shapes",
            Category::ObjectFunctions => "Object Functions",
            Category::ObjectDifferences => "Object Differences and Hypernyms",
            Category::RiskySituations => "Objects in Risky Situations",
            Category::RequiredEquipment => "Required Equipment",
            Category::ObjectFacts => "Primary and Secondary Object Facts",
            Category::DisasterKnowledge => "Disaster Specific Knowledge",
            Category::InstructionFollowing => "Instruction Following",
        }
    }

    /// Short label used in dataset tables.
    pub fn table_label(self) -> &'static str {
        match self {
            Category::RelativeSizes => "Relative Size",
            Category::ObjectFunctions => "Object Functions",
            Category::ObjectDifferences => "Differences",
            Category::RiskySituations => "Objects Causing Harm",
            Category::RequiredEquipment => "Specialized Equipment",
            Category::ObjectFacts => "Non-functional Object Facts",
            Category::DisasterKnowledge => "Earthquakes",
            Category::InstructionFollowing => "Instruction Understanding",
        }
    }

    /// File-system friendly name, used for ablation split directories.
    pub fn slug(self) -> &'static str {
        match self {
            Category::RelativeSizes => "relative-sizes",
            Category::ObjectFunctions => "object-functions",
            Category::ObjectDifferences => "object-differences",
            Category::RiskySituations => "risky-situations",
            Category::RequiredEquipment => "required-equipment",
            Category::ObjectFacts => "object-facts",
            Category::DisasterKnowledge => "earthquakes",
            Category::InstructionFollowing => "instruction-following",
        }
    }

    fn aliases(self) -> &'static [&'static str] {
        match self {
            Category::RelativeSizes => &["relative size", "relative sizes", "relative sizes and shapes", "relative size and shape"],
            Category::ObjectFunctions => &["object functions", "object function"],
            Category::ObjectDifferences => &["differences", "object differences", "object differences and hypernyms"],
            Category::RiskySituations => &["objects causing harm", "objects in risky situations", "risky situations"],
            Category::RequiredEquipment => &["specialized equipment", "required equipment"],
            Category::ObjectFacts => &["non-functional object facts", "non-functional obj facts", "primary and secondary object facts", "object facts"],
            Category::DisasterKnowledge => &["earthquakes", "earthquake", "earthquake knowledge", "disaster specific knowledge"],
            Category::InstructionFollowing => &["instruction following", "instruction understanding"],
        }
    }
}

impl FromStr for Category {
    type Err = UnknownCategory;

    /// Accepts the canonical name, the table label, the slug and a few
    /// spellings used in result tables; case and `-`/`_` are ignored.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = normalize_name(s);
        Category::ALL
            .into_iter()
            .find(|c| {
                normalize_name(c.name()) == norm
                    || normalize_name(c.slug()) == norm
                    || c.aliases().iter().any(|a| normalize_name(a) == norm)
            })
            .ok_or_else(|| UnknownCategory(s.to_string()))
    }
}

fn normalize_name(s: &str) -> String {
    s.to_lowercase()
        .replace(['_'], " ")
        .split(|c: char| c.is_whitespace() || c == '-')
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Category {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Seed,
    Eval,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Seed => "seed",
            Provenance::Eval => "eval",
            Provenance::Synthetic => "synthetic",
        })
    }
}

/// Bookkeeping attached to synthetic records when the gate accepts them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenMeta {
    pub batch_index: u32,
    pub temperature: f64,
    pub max_rouge: f64,
}

/// One instruction/input/output triple. The three wire fields are what the
/// generator model sees; `_`-prefixed fields are pipeline metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
    #[serde(rename = "_template_id")]
    pub template_id: String,
    #[serde(rename = "_category")]
    pub category: Category,
    #[serde(rename = "_provenance")]
    pub provenance: Provenance,
    #[serde(rename = "_gen_meta", default, skip_serializing_if = "Option::is_none")]
    pub gen_meta: Option<GenMeta>,
}

/// The bare triple exchanged with the generator model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WireRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl InstructionRecord {
    pub fn wire(&self) -> WireRecord {
        WireRecord {
            instruction: self.instruction.clone(),
            input: self.input.clone(),
            output: self.output.clone(),
        }
    }

    /// Text compared by the dedup gate and the diagnostics: the instruction
    /// followed by its choice block.
    pub fn similarity_text(&self) -> String {
        if self.input.is_empty() {
            self.instruction.clone()
        } else {
            format!("{} {}", self.instruction, self.input)
        }
    }

    /// The message shown to a model being evaluated.
    pub fn prompt_text(&self) -> String {
        if self.input.is_empty() {
            self.instruction.clone()
        } else {
            format!("{}\n{}", self.instruction, self.input)
        }
    }

    /// Content-derived identifier (independent of metadata).
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.instruction, &self.input, &self.output] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn choices(&self) -> Option<Result<Vec<Choice>, Violation>> {
        parse_choices(&self.input)
    }
}

/// One lettered option of a multiple-choice block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Choice {
    pub label: char,
    pub text: String,
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}) {}", self.label, self.text)
    }
}

pub const CHOICE_LABELS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];

/// Formats choices as a single-line block: `A) x B) y ...`.
pub fn format_choices<S: AsRef<str>>(texts: &[S]) -> String {
    texts
        .iter()
        .zip(CHOICE_LABELS)
        .map(|(t, label)| format!("{label}) {}", t.as_ref()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits a choice block into lettered options. Labels must run `A)`, `B)`,
/// ... in order, each at the start or after whitespace. Returns `None` for an
/// empty block.
pub fn parse_choices(input: &str) -> Option<Result<Vec<Choice>, Violation>> {
    let input = input.trim();
    if input.is_empty() {
        return None;
    }
    if !input.starts_with("A)") {
        return Some(Err(Violation::MalformedChoices));
    }
    let mut starts = vec![0usize];
    for label in &CHOICE_LABELS[1..] {
        let marker = format!("{label})");
        let from = *starts.last().unwrap() + 2;
        let found = input[from..].match_indices(&marker).map(|(i, _)| i + from).find(|&i| {
            input[..i].ends_with(char::is_whitespace)
        });
        match found {
            Some(i) => starts.push(i),
            None => break,
        }
    }
    let mut out = Vec::with_capacity(starts.len());
    for (k, &s) in starts.iter().enumerate() {
        let end = starts.get(k + 1).copied().unwrap_or(input.len());
        let text = input[s + 2..end].trim();
        if text.is_empty() {
            return Some(Err(Violation::MalformedChoices));
        }
        out.push(Choice {
            label: CHOICE_LABELS[k],
            text: text.to_string(),
        });
    }
    Some(Ok(out))
}

/// A problem found by [`validate_record`]. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyInstruction,
    EmptyOutput,
    MalformedChoices,
    GoldNotInChoices,
    DuplicateChoice(String),
    WrongChoiceCount { expected: usize, found: usize },
    UnexpectedChoices,
    MissingChoices,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyInstruction => f.write_str("empty instruction"),
            Violation::EmptyOutput => f.write_str("empty output"),
            Violation::MalformedChoices => f.write_str("malformed choice block"),
            Violation::GoldNotInChoices => f.write_str("gold answer not among choices"),
            Violation::DuplicateChoice(c) => write!(f, "duplicate choice {c:?}"),
            Violation::WrongChoiceCount { expected, found } => {
                write!(f, "expected {expected} choices, found {found}")
            }
            Violation::UnexpectedChoices => f.write_str("free-text record carries a choice block"),
            Violation::MissingChoices => f.write_str("choice block missing"),
        }
    }
}

/// Structural checks on a record: non-empty fields and, when the input holds
/// a choice block, distinct choices with the gold answer among them.
/// An empty result means the record is well-formed.
pub fn validate_record(record: &InstructionRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.instruction.trim().is_empty() {
        out.push(Violation::EmptyInstruction);
    }
    if record.output.trim().is_empty() {
        out.push(Violation::EmptyOutput);
    }
    match record.choices() {
        None => {}
        Some(Err(v)) => out.push(v),
        Some(Ok(choices)) => {
            let mut seen = std::collections::HashSet::new();
            for c in &choices {
                if !seen.insert(c.text.to_lowercase()) {
                    out.push(Violation::DuplicateChoice(c.text.clone()));
                }
            }
            let gold = record.output.trim();
            if !choices.iter().any(|c| c.to_string() == gold) {
                out.push(Violation::GoldNotInChoices);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mc(input: &str, output: &str) -> InstructionRecord {
        InstructionRecord {
            instruction: "Which of these objects is the heaviest?".into(),
            input: input.into(),
            output: output.into(),
            template_id: "t".into(),
            category: Category::RelativeSizes,
            provenance: Provenance::Seed,
            gen_meta: None,
        }
    }

    #[test]
    fn category_aliases_resolve() {
        assert_eq!("Earthquakes".parse::<Category>().unwrap(), Category::DisasterKnowledge);
        assert_eq!("relative sizes and shapes".parse::<Category>().unwrap(), Category::RelativeSizes);
        assert_eq!("Relative Size".parse::<Category>().unwrap(), Category::RelativeSizes);
        assert_eq!("object-facts".parse::<Category>().unwrap(), Category::ObjectFacts);
        assert_eq!("Objects Causing Harm".parse::<Category>().unwrap(), Category::RiskySituations);
        assert!("weather".parse::<Category>().is_err());
        for c in Category::ALL {
            assert_eq!(c.name().parse::<Category>().unwrap(), c);
            assert_eq!(c.slug().parse::<Category>().unwrap(), c);
            assert_eq!(c.table_label().parse::<Category>().unwrap(), c);
        }
    }

    #[test]
    fn parses_choice_blocks() {
        let cs = parse_choices("A) this B) is C) an D) example E) question").unwrap().unwrap();
        assert_eq!(cs.len(), 5);
        assert_eq!(cs[4].to_string(), "E) question");
        let cs = parse_choices("A) it can\nB) it cannot").unwrap().unwrap();
        assert_eq!(cs[1].text, "it cannot");
        assert!(parse_choices("").is_none());
        assert_eq!(parse_choices("B) x").unwrap(), Err(Violation::MalformedChoices));
        assert_eq!(parse_choices("A) B) x").unwrap(), Err(Violation::MalformedChoices));
        // a letter followed by ')' inside a word is not a label
        let cs = parse_choices("A) plan(B) ok B) x").unwrap().unwrap();
        assert_eq!(cs[0].text, "plan(B) ok");
        assert_eq!(cs[1].text, "x");
    }

    #[test]
    fn validate_record_examples() {
        let ok = mc("A) bicycle B) chalk C) poster D) jar E) taillight", "A) bicycle");
        assert!(validate_record(&ok).is_empty());

        let bad_gold = mc("A) it can B) it cannot", "C) it might");
        assert_eq!(validate_record(&bad_gold), vec![Violation::GoldNotInChoices]);

        let dup = mc("A) jar B) jar", "A) jar");
        assert_eq!(validate_record(&dup), vec![Violation::DuplicateChoice("jar".into())]);

        let mut empty = mc("", "");
        empty.instruction = " ".into();
        assert_eq!(
            validate_record(&empty),
            vec![Violation::EmptyInstruction, Violation::EmptyOutput]
        );
    }

    #[test]
    fn record_json_uses_underscore_metadata() {
        let r = mc("A) a B) b", "A) a");
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains("\"_template_id\":\"t\""));
        assert!(line.contains("\"_category\":\"Relative sizes and shapes\""));
        assert!(line.contains("\"_provenance\":\"seed\""));
        assert!(!line.contains("_gen_meta"));
        assert_eq!(serde_json::from_str::<InstructionRecord>(&line).unwrap(), r);
    }

    #[test]
    fn id_ignores_metadata() {
        let a = mc("A) a B) b", "A) a");
        let mut b = a.clone();
        b.provenance = Provenance::Eval;
        b.template_id = "other".into();
        assert_eq!(a.id(), b.id());
        b.output = "B) b".into();
        assert_ne!(a.id(), b.id());
    }
}
