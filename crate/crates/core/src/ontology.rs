//! Affordance ontology of disaster-relevant objects.
//!
//! Entries are loaded from a JSON document with a top-level `entries` array
//! and are immutable afterwards. Queries are pure filters that keep file order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("cannot read ontology {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed ontology at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid entry {name:?} (line {line}): {problem}")]
    Invalid {
        name: String,
        line: usize,
        problem: String,
    },
}

/// A (verb, role) annotation: what the object can be used to do and the
/// semantic role it plays. `task` names a disaster-relief activity the
/// affordance serves, when there is one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affordance {
    pub verb: String,
    pub role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

/// Two mutually exclusive states plus, per state, the purpose it is suited
/// for (e.g. a lowered drawbridge lets cars cross).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePair {
    pub labels: [String; 2],
    #[serde(default)]
    pub usable_for: BTreeMap<String, String>,
}

impl StatePair {
    pub fn other(&self, label: &str) -> &str {
        if self.labels[0] == label {
            &self.labels[1]
        } else {
            &self.labels[0]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyEntry {
    pub name: String,
    /// Overrides the automatic "a"/"an"; use "" for mass and plural nouns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub article: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub plural: bool,
    #[serde(default)]
    pub affordances: Vec<Affordance>,
    #[serde(default)]
    pub states: Vec<StatePair>,
    pub size_class: u8,
    pub weight_class: u8,
    #[serde(default)]
    pub locations: Vec<String>,
    #[serde(default)]
    pub hypernyms: Vec<String>,
    #[serde(default)]
    pub secondary_uses: Vec<String>,
    #[serde(default)]
    pub disaster_tags: Vec<String>,
    #[serde(default)]
    pub shapes: Vec<String>,
    #[serde(default)]
    pub properties: Vec<String>,
    /// Ordered steps for operating the object.
    #[serde(default)]
    pub usage_steps: Vec<String>,
}

impl OntologyEntry {
    /// A bare entry with the given classes; handy for fixtures.
    pub fn new(name: &str, size_class: u8, weight_class: u8) -> Self {
        OntologyEntry {
            name: name.to_string(),
            article: None,
            plural: false,
            affordances: Vec::new(),
            states: Vec::new(),
            size_class,
            weight_class,
            locations: Vec::new(),
            hypernyms: Vec::new(),
            secondary_uses: Vec::new(),
            disaster_tags: Vec::new(),
            shapes: Vec::new(),
            properties: Vec::new(),
            usage_steps: Vec::new(),
        }
    }

    pub fn has_affordance(&self, verb: &str) -> bool {
        self.affordances.iter().any(|a| a.verb == verb)
    }

    /// Name with its indefinite article: "a drawbridge", "an axe", "chalk".
    pub fn with_article(&self) -> String {
        let article = match &self.article {
            Some(a) => a.clone(),
            None if self.plural => String::new(),
            None => indefinite_article(&self.name).to_string(),
        };
        if article.is_empty() {
            self.name.clone()
        } else {
            format!("{article} {}", self.name)
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.name.trim().is_empty() {
            out.push("empty name".to_string());
        }
        if !(1..=5).contains(&self.size_class) {
            out.push(format!("size_class {} outside 1..5", self.size_class));
        }
        if !(1..=5).contains(&self.weight_class) {
            out.push(format!("weight_class {} outside 1..5", self.weight_class));
        }
        for pair in &self.states {
            let [a, b] = &pair.labels;
            if a.trim().is_empty() || b.trim().is_empty() || a == b {
                out.push(format!("state pair {a:?}/{b:?} needs two distinct labels"));
            }
            for key in pair.usable_for.keys() {
                if key != a && key != b {
                    out.push(format!("usability note for unknown state {key:?}"));
                }
            }
        }
        out
    }
}

/// Comparison operator for ordinal class constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
}

impl ClassOp {
    pub fn holds(self, value: u8, k: u8) -> bool {
        match self {
            ClassOp::Lt => value < k,
            ClassOp::Le => value <= k,
            ClassOp::Eq => value == k,
            ClassOp::Ge => value >= k,
            ClassOp::Gt => value > k,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            ClassOp::Lt => "<",
            ClassOp::Le => "<=",
            ClassOp::Eq => "=",
            ClassOp::Ge => ">=",
            ClassOp::Gt => ">",
        }
    }
}

/// Filter over ontology entries. Value-carrying kinds match any value when
/// the value is omitted (e.g. `has-affordance` alone means "has at least one
/// affordance").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Constraint {
    Any,
    HasMultipleStates,
    HasAffordance {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        verb: Option<String>,
    },
    HasTask,
    SizeClassRelation { op: ClassOp, k: u8 },
    WeightClassRelation { op: ClassOp, k: u8 },
    HasDisasterTag {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tag: Option<String>,
    },
    HasHypernym {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    HasSecondaryUse {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        verb: Option<String>,
    },
    HasLocation {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        location: Option<String>,
    },
    HasShape {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shape: Option<String>,
    },
    HasProperty {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        property: Option<String>,
    },
    HasUsageSteps,
    Not { constraint: Box<Constraint> },
    All { of: Vec<Constraint> },
}

fn contains_or_nonempty(values: &[String], wanted: &Option<String>) -> bool {
    match wanted {
        Some(w) => values.iter().any(|v| v == w),
        None => !values.is_empty(),
    }
}

impl Constraint {
    pub fn matches(&self, e: &OntologyEntry) -> bool {
        match self {
            Constraint::Any => true,
            Constraint::HasMultipleStates => !e.states.is_empty(),
            Constraint::HasAffordance { verb } => match verb {
                Some(v) => e.has_affordance(v),
                None => !e.affordances.is_empty(),
            },
            Constraint::HasTask => e.affordances.iter().any(|a| a.task.is_some()),
            Constraint::SizeClassRelation { op, k } => op.holds(e.size_class, *k),
            Constraint::WeightClassRelation { op, k } => op.holds(e.weight_class, *k),
            Constraint::HasDisasterTag { tag } => contains_or_nonempty(&e.disaster_tags, tag),
            Constraint::HasHypernym { name } => contains_or_nonempty(&e.hypernyms, name),
            Constraint::HasSecondaryUse { verb } => contains_or_nonempty(&e.secondary_uses, verb),
            Constraint::HasLocation { location } => contains_or_nonempty(&e.locations, location),
            Constraint::HasShape { shape } => contains_or_nonempty(&e.shapes, shape),
            Constraint::HasProperty { property } => contains_or_nonempty(&e.properties, property),
            Constraint::HasUsageSteps => e.usage_steps.len() >= 2,
            Constraint::Not { constraint } => !constraint.matches(e),
            Constraint::All { of } => of.iter().all(|c| c.matches(e)),
        }
    }

    pub fn negate(self) -> Constraint {
        Constraint::Not {
            constraint: Box::new(self),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConstraintParseError {
    #[error("unknown constraint kind {0:?}")]
    UnknownKind(String),
    #[error("bad argument for {kind}: {arg:?}")]
    BadArgument { kind: String, arg: String },
}

impl FromStr for Constraint {
    type Err = ConstraintParseError;

    /// Compact text form: `has-multiple-states`, `has-affordance(cut)`,
    /// `size-class-relation(>=, 4)`, `not(has-disaster-tag(earthquake rescue))`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (kind, arg) = match s.find('(') {
            Some(open) if s.ends_with(')') => (s[..open].trim(), Some(s[open + 1..s.len() - 1].trim())),
            _ => (s, None),
        };
        let value = arg.filter(|a| !a.is_empty()).map(str::to_string);
        let bad = |a: &str| ConstraintParseError::BadArgument {
            kind: kind.to_string(),
            arg: a.to_string(),
        };
        let class = |a: Option<&str>| -> Result<(ClassOp, u8), ConstraintParseError> {
            let a = a.ok_or_else(|| bad(""))?;
            let (op, k) = a.split_once(',').ok_or_else(|| bad(a))?;
            let op = match op.trim() {
                "<" => ClassOp::Lt,
                "<=" => ClassOp::Le,
                "=" | "==" => ClassOp::Eq,
                ">=" => ClassOp::Ge,
                ">" => ClassOp::Gt,
                _ => return Err(bad(a)),
            };
            let k = k.trim().parse().map_err(|_| bad(a))?;
            Ok((op, k))
        };
        Ok(match kind {
            "any" => Constraint::Any,
            "has-multiple-states" => Constraint::HasMultipleStates,
            "has-affordance" => Constraint::HasAffordance { verb: value },
            "has-task" => Constraint::HasTask,
            "size-class-relation" => {
                let (op, k) = class(arg)?;
                Constraint::SizeClassRelation { op, k }
            }
            "weight-class-relation" => {
                let (op, k) = class(arg)?;
                Constraint::WeightClassRelation { op, k }
            }
            "has-disaster-tag" => Constraint::HasDisasterTag { tag: value },
            "has-hypernym" => Constraint::HasHypernym { name: value },
            "has-secondary-use" => Constraint::HasSecondaryUse { verb: value },
            "has-location" => Constraint::HasLocation { location: value },
            "has-shape" => Constraint::HasShape { shape: value },
            "has-property" => Constraint::HasProperty { property: value },
            "has-usage-steps" => Constraint::HasUsageSteps,
            "not" => {
                let inner = arg.ok_or_else(|| bad(""))?;
                inner.parse::<Constraint>()?.negate()
            }
            other => return Err(ConstraintParseError::UnknownKind(other.to_string())),
        })
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |f: &mut fmt::Formatter<'_>, kind: &str, v: &Option<String>| match v {
            Some(v) => write!(f, "{kind}({v})"),
            None => f.write_str(kind),
        };
        match self {
            Constraint::Any => f.write_str("any"),
            Constraint::HasMultipleStates => f.write_str("has-multiple-states"),
            Constraint::HasAffordance { verb } => opt(f, "has-affordance", verb),
            Constraint::HasTask => f.write_str("has-task"),
            Constraint::SizeClassRelation { op, k } => {
                write!(f, "size-class-relation({}, {k})", op.symbol())
            }
            Constraint::WeightClassRelation { op, k } => {
                write!(f, "weight-class-relation({}, {k})", op.symbol())
            }
            Constraint::HasDisasterTag { tag } => opt(f, "has-disaster-tag", tag),
            Constraint::HasHypernym { name } => opt(f, "has-hypernym", name),
            Constraint::HasSecondaryUse { verb } => opt(f, "has-secondary-use", verb),
            Constraint::HasLocation { location } => opt(f, "has-location", location),
            Constraint::HasShape { shape } => opt(f, "has-shape", shape),
            Constraint::HasProperty { property } => opt(f, "has-property", property),
            Constraint::HasUsageSteps => f.write_str("has-usage-steps"),
            Constraint::Not { constraint } => write!(f, "not({constraint})"),
            Constraint::All { of } => {
                f.write_str("all(")?;
                for (i, c) in of.iter().enumerate() {
                    if i > 0 {
                        f.write_str("; ")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Deserialize)]
struct OntologyFile {
    #[serde(default)]
    version: String,
    entries: Vec<OntologyEntry>,
}

/// Validated, name-indexed collection of entries in file order.
#[derive(Debug, Clone, Default)]
pub struct Ontology {
    version: String,
    entries: Vec<OntologyEntry>,
    index: HashMap<String, usize>,
}

impl Ontology {
    pub fn from_entries(version: &str, entries: Vec<OntologyEntry>) -> Result<Self, OntologyError> {
        Self::build(version.to_string(), entries, None)
    }

    pub fn from_json(text: &str) -> Result<Self, OntologyError> {
        let file: OntologyFile = serde_json::from_str(text).map_err(|e| OntologyError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::build(file.version, file.entries, Some(text))
    }

    fn build(version: String, entries: Vec<OntologyEntry>, text: Option<&str>) -> Result<Self, OntologyError> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut seen_names: HashMap<&str, usize> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            let occurrence = seen_names.entry(e.name.as_str()).or_insert(0);
            *occurrence += 1;
            let line = text.map(|t| line_of_name(t, &e.name, *occurrence)).unwrap_or(0);
            if let Some(problem) = e.problems().into_iter().next() {
                return Err(OntologyError::Invalid {
                    name: e.name.clone(),
                    line,
                    problem,
                });
            }
            if index.insert(e.name.clone(), i).is_some() {
                return Err(OntologyError::Invalid {
                    name: e.name.clone(),
                    line,
                    problem: "duplicate name".to_string(),
                });
            }
        }
        Ok(Ontology {
            version,
            entries,
            index,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn entries(&self) -> &[OntologyEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&OntologyEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    /// All entries satisfying the constraint, in ontology order.
    pub fn query(&self, constraint: &Constraint) -> Vec<&OntologyEntry> {
        self.entries.iter().filter(|e| constraint.matches(e)).collect()
    }

    /// Hypernyms that do not name an entry. The ontology is partial, so these
    /// are allowed; they are reported rather than rejected.
    pub fn external_hypernyms(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .flat_map(|e| e.hypernyms.iter())
            .filter(|h| !self.index.contains_key(h.as_str()))
            .filter(|h| seen.insert(h.as_str()))
            .map(String::as_str)
            .collect()
    }
}

/// 1-based line of the `occurrence`-th `"name": "<name>"` pair, or 0.
fn line_of_name(text: &str, name: &str, occurrence: usize) -> usize {
    let quoted = serde_json::to_string(name).unwrap_or_default();
    let mut count = 0;
    for (i, line) in text.lines().enumerate() {
        if let Some(pos) = line.find("\"name\"") {
            let rest = line[pos + 6..].trim_start().trim_start_matches(':').trim_start();
            if rest.starts_with(&quoted) {
                count += 1;
                if count == occurrence {
                    return i + 1;
                }
            }
        }
    }
    0
}

/// "a" or "an" by the first letter of `word`.
pub fn indefinite_article(word: &str) -> &'static str {
    let first = word.chars().next().unwrap_or('x').to_ascii_lowercase();
    if "aeiou".contains(first) {
        "an"
    } else {
        "a"
    }
}

pub fn load_ontology(path: impl AsRef<Path>) -> Result<Ontology, OntologyError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| OntologyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ontology::from_json(&text)
}

/// Free-function form of [`Ontology::query`].
pub fn query_entries<'a>(ontology: &'a Ontology, constraint: &Constraint) -> Vec<&'a OntologyEntry> {
    ontology.query(constraint)
}
