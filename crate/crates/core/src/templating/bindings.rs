use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{
    capitalize, AnswerRule, Binding, Direction, Field, Ordinal, Restriction, SlotValue, TemplateError,
    TemplateSpec,
};
use crate::ontology::{Ontology, OntologyEntry};
use crate::rng::derive_rng;

/// Distractor draws per anchor for rules that sample distractors.
const DRAWS_PER_ANCHOR: usize = 2;

struct Ctx<'a> {
    template: &'a TemplateSpec,
    ontology: &'a Ontology,
    rng: ChaCha8Rng,
}

impl<'a> Ctx<'a> {
    /// Entries allowed to fill (or supply the value of) `slot`.
    fn allowed(&self, slot: &str) -> Vec<&'a OntologyEntry> {
        let ontology: &'a Ontology = self.ontology;
        match self.template.slot_constraints.get(slot) {
            Some(c) => ontology.query(c),
            None => ontology.entries().iter().collect(),
        }
    }

    fn unsatisfiable(&self, slot: &str) -> TemplateError {
        TemplateError::UnsatisfiableSlot {
            template: self.template.id.clone(),
            slot: slot.to_string(),
        }
    }

    fn sample<T: Clone>(&mut self, pool: &[T], k: usize) -> Option<Vec<T>> {
        if pool.len() < k {
            return None;
        }
        Some(pool.choose_multiple(&mut self.rng, k).cloned().collect())
    }
}

fn names(entries: &[&OntologyEntry]) -> Vec<String> {
    entries.iter().map(|e| e.name.clone()).collect()
}

fn slots<const N: usize>(pairs: [(&str, SlotValue); N]) -> std::collections::BTreeMap<String, SlotValue> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// All distinct bindings the ontology supports for the template, in an order
/// fixed by `rng_seed`. Slot constraints restrict which entries may fill (or
/// supply values for) each slot.
pub fn enumerate_bindings(
    template: &TemplateSpec,
    ontology: &Ontology,
    rng_seed: u64,
) -> Result<Vec<Binding>, TemplateError> {
    let mut ctx = Ctx {
        template,
        ontology,
        rng: derive_rng(rng_seed, &["bindings", &template.id]),
    };
    let raw = match &template.rule {
        AnswerRule::Extreme { property, direction } => extreme(&mut ctx, *property, *direction)?,
        AnswerRule::Select {
            field,
            value_slot,
            invert,
            values,
            restrict,
        } => select(&mut ctx, *field, value_slot, *invert, values, restrict.as_ref())?,
        AnswerRule::Fit => fit(&mut ctx)?,
        AnswerRule::UseAs => use_as(&mut ctx)?,
        AnswerRule::StateChoice => states(&mut ctx, false)?,
        AnswerRule::StateFollowUp => states(&mut ctx, true)?,
        AnswerRule::PairCompare { property } => pair_compare(&mut ctx, *property)?,
        AnswerRule::Difference => difference(&mut ctx)?,
        AnswerRule::Role => role(&mut ctx)?,
        AnswerRule::StepOrder => step_order(&mut ctx)?,
        AnswerRule::LocationOf => location_of(&mut ctx)?,
        AnswerRule::InstructionClass { classes } => instruction_class(&mut ctx, classes)?,
    };
    let mut seen = HashSet::new();
    let mut out: Vec<Binding> = raw.into_iter().filter(|b| seen.insert(b.clone())).collect();
    if out.is_empty() {
        return Err(ctx.unsatisfiable(first_slot(template)));
    }
    out.shuffle(&mut ctx.rng);
    Ok(out)
}

fn first_slot(t: &TemplateSpec) -> &str {
    t.slot_constraints.keys().next().map(String::as_str).unwrap_or("OBJECT")
}

fn extreme(ctx: &mut Ctx<'_>, property: Ordinal, direction: Direction) -> Result<Vec<Binding>, TemplateError> {
    let order: [u8; 5] = match direction {
        Direction::Max => [5, 4, 3, 2, 1],
        Direction::Min => [1, 2, 3, 4, 5],
    };
    let golds: Vec<_> = ctx
        .allowed("OBJECT")
        .into_iter()
        .filter(|e| property.of(e) == order[0])
        .collect();
    if golds.is_empty() {
        return Err(ctx.unsatisfiable("OBJECT"));
    }
    let distractor_pool = ctx.allowed("DISTRACTOR");
    let mut by_class = Vec::new();
    for (i, class) in order[1..].iter().enumerate() {
        let pool: Vec<_> = distractor_pool.iter().filter(|e| property.of(e) == *class).copied().collect();
        if pool.is_empty() {
            return Err(ctx.unsatisfiable(&format!("D{}", i + 1)));
        }
        by_class.push(pool);
    }
    let mut out = Vec::new();
    for gold in golds {
        for _ in 0..DRAWS_PER_ANCHOR {
            let distractors = by_class
                .iter()
                .map(|pool| pool.choose(&mut ctx.rng).map(|e| e.name.clone()).unwrap_or_default())
                .collect();
            out.push(Binding {
                slots: slots([("OBJECT", SlotValue::from_entry(gold))]),
                answer: gold.name.clone(),
                distractors,
            });
        }
    }
    Ok(out)
}

fn select(
    ctx: &mut Ctx<'_>,
    field: Field,
    value_slot: &str,
    invert: bool,
    whitelist: &[String],
    restrict: Option<&Restriction>,
) -> Result<Vec<Binding>, TemplateError> {
    let mut values: Vec<String> = Vec::new();
    for e in ctx.allowed(value_slot) {
        for v in field.values(e) {
            if !values.iter().any(|x| x == v) && (whitelist.is_empty() || whitelist.iter().any(|w| w == v)) {
                values.push(v.to_string());
            }
        }
    }
    if values.is_empty() {
        return Err(ctx.unsatisfiable(value_slot));
    }
    let object_ok = ctx.allowed("OBJECT");
    let distractor_ok = ctx.allowed("DISTRACTOR");
    let everything: Vec<&OntologyEntry> = ctx.ontology.entries().iter().collect();
    let in_set = |set: &[&OntologyEntry], e: &OntologyEntry| set.iter().any(|x| x.name == e.name);

    let mut out = Vec::new();
    for value in &values {
        let holders: Vec<&OntologyEntry> = everything.iter().filter(|e| field.has(e, value)).copied().collect();
        let lackers: Vec<&OntologyEntry> = everything.iter().filter(|e| !field.has(e, value)).copied().collect();
        let (gold_pool, distractor_base) = if invert { (lackers, holders) } else { (holders, lackers) };
        for gold in gold_pool.iter().filter(|e| in_set(&object_ok, e)) {
            // restriction: gold must also pass it; distractors may be holders
            // of the value that fail it
            let variants: Vec<(Vec<(&str, SlotValue)>, Box<dyn Fn(&OntologyEntry) -> bool>)> = match restrict {
                None => vec![(Vec::new(), Box::new(|_: &OntologyEntry| false))],
                Some(Restriction::BiggerThan { slot }) => {
                    let refs: Vec<&OntologyEntry> = ctx
                        .allowed(slot)
                        .into_iter()
                        .filter(|r| r.size_class < gold.size_class && r.name != gold.name)
                        .collect();
                    let Some(reference) = refs.choose(&mut ctx.rng).copied() else { continue };
                    let limit = reference.size_class;
                    vec![(
                        vec![(slot.as_str(), SlotValue::from_entry(reference))],
                        Box::new(move |e: &OntologyEntry| e.size_class > limit),
                    )]
                }
                Some(Restriction::AlsoHas { field: extra, slot }) => field_values(*extra, gold)
                    .into_iter()
                    .take(1)
                    .map(|v| {
                        let extra = *extra;
                        let owned = v.clone();
                        (
                            vec![(slot.as_str(), SlotValue::plain(v))],
                            Box::new(move |e: &OntologyEntry| extra.has(e, &owned)) as Box<dyn Fn(&OntologyEntry) -> bool>,
                        )
                    })
                    .collect(),
            };
            for (extra_slots, passes_restriction) in variants {
                let mut pool: Vec<&OntologyEntry> = distractor_base
                    .iter()
                    .filter(|e| in_set(&distractor_ok, e) && e.name != gold.name)
                    .copied()
                    .collect();
                if restrict.is_some() && !invert {
                    // holders that fail the restriction are valid distractors too
                    pool.extend(
                        gold_pool
                            .iter()
                            .filter(|e| e.name != gold.name && in_set(&distractor_ok, e) && !passes_restriction(e))
                            .copied(),
                    );
                }
                let pool = names(&pool);
                for _ in 0..DRAWS_PER_ANCHOR {
                    let Some(distractors) = ctx.sample(&pool, 4) else { break };
                    let mut s = slots([(value_slot, SlotValue::plain(value.clone()))]);
                    s.insert("OBJECT".into(), SlotValue::from_entry(gold));
                    for (k, v) in &extra_slots {
                        s.insert(k.to_string(), v.clone());
                    }
                    out.push(Binding {
                        slots: s,
                        answer: gold.name.clone(),
                        distractors,
                    });
                }
            }
        }
    }
    Ok(out)
}

fn field_values(field: Field, e: &OntologyEntry) -> Vec<String> {
    field.values(e).into_iter().map(str::to_string).collect()
}

const CAN: &str = "it can";
const CANNOT: &str = "it cannot";

fn can_binding(a_slot: &str, a: &OntologyEntry, b_slot: &str, b: &OntologyEntry, can: bool) -> Binding {
    let (answer, other) = if can { (CAN, CANNOT) } else { (CANNOT, CAN) };
    Binding {
        slots: slots([(a_slot, SlotValue::from_entry(a)), (b_slot, SlotValue::from_entry(b))]),
        answer: answer.to_string(),
        distractors: vec![other.to_string()],
    }
}

fn fit(ctx: &mut Ctx<'_>) -> Result<Vec<Binding>, TemplateError> {
    let objects = ctx.allowed("OBJECT");
    let containers = ctx.allowed("CONTAINER");
    if containers.is_empty() {
        return Err(ctx.unsatisfiable("CONTAINER"));
    }
    let mut out = Vec::new();
    for c in &containers {
        for o in &objects {
            if o.name != c.name && o.size_class != c.size_class {
                out.push(can_binding("OBJECT", o, "CONTAINER", c, o.size_class < c.size_class));
            }
        }
    }
    Ok(out)
}

fn use_as(ctx: &mut Ctx<'_>) -> Result<Vec<Binding>, TemplateError> {
    let objects = ctx.allowed("OBJECT");
    let others = ctx.allowed("OTHER");
    let mut out = Vec::new();
    for t in &others {
        let Some(primary) = t.affordances.first() else { continue };
        let t_verbs: BTreeSet<&str> = t.affordances.iter().map(|a| a.verb.as_str()).collect();
        for o in &objects {
            if o.name == t.name {
                continue;
            }
            let can = o.has_affordance(&primary.verb) || o.secondary_uses.contains(&primary.verb);
            let shares = o
                .affordances
                .iter()
                .map(|a| a.verb.as_str())
                .chain(o.secondary_uses.iter().map(String::as_str))
                .any(|v| t_verbs.contains(v));
            if can || !shares {
                out.push(can_binding("OBJECT", o, "OTHER", t, can));
            }
        }
    }
    Ok(out)
}

fn states(ctx: &mut Ctx<'_>, follow_up: bool) -> Result<Vec<Binding>, TemplateError> {
    let mut out = Vec::new();
    for e in ctx.allowed("OBJECT") {
        for pair in &e.states {
            for (state, purpose) in &pair.usable_for {
                let other = pair.other(state);
                let (answer, distractor) = if follow_up {
                    (format!("change it to {state}"), format!("leave it {other}"))
                } else {
                    (capitalize(state), capitalize(other))
                };
                out.push(Binding {
                    slots: slots([
                        ("OBJECT", SlotValue::from_entry(e)),
                        ("PURPOSE", SlotValue::plain(purpose.clone())),
                        ("X", SlotValue::plain(state.clone())),
                        ("Y", SlotValue::plain(other.to_string())),
                    ]),
                    answer,
                    distractors: vec![distractor],
                });
            }
        }
    }
    Ok(out)
}

/// Pairs (a, b), a before b in ontology order, that share an affordance and
/// differ on `property`. Yields the first shared verb.
fn sharing_pairs<'a>(
    ctx: &Ctx<'a>,
    property: Ordinal,
) -> Vec<(&'a OntologyEntry, &'a OntologyEntry, String)> {
    let a_ok = ctx.allowed("A");
    let b_ok = ctx.allowed("B");
    let mut out = Vec::new();
    for (i, a) in ctx.ontology.entries().iter().enumerate() {
        if !a_ok.iter().any(|x| x.name == a.name) {
            continue;
        }
        for b in &ctx.ontology.entries()[i + 1..] {
            if !b_ok.iter().any(|x| x.name == b.name) || property.of(a) == property.of(b) {
                continue;
            }
            if let Some(shared) = a.affordances.iter().find(|af| b.has_affordance(&af.verb)) {
                out.push((a, b, shared.verb.clone()));
            }
        }
    }
    out
}

fn pair_compare(ctx: &mut Ctx<'_>, property: Ordinal) -> Result<Vec<Binding>, TemplateError> {
    let pairs = sharing_pairs(ctx, property);
    Ok(pairs
        .into_iter()
        .map(|(a, b, verb)| {
            let (hi, lo) = if property.of(a) > property.of(b) { (a, b) } else { (b, a) };
            Binding {
                slots: slots([
                    ("A", SlotValue::from_entry(a)),
                    ("B", SlotValue::from_entry(b)),
                    ("VERB", SlotValue::plain(verb)),
                ]),
                answer: hi.name.clone(),
                distractors: vec![lo.name.clone()],
            }
        })
        .collect())
}

fn difference(ctx: &mut Ctx<'_>) -> Result<Vec<Binding>, TemplateError> {
    let pairs = sharing_pairs(ctx, Ordinal::Size);
    Ok(pairs
        .into_iter()
        .map(|(a, b, verb)| {
            let (big, small) = if a.size_class > b.size_class { (a, b) } else { (b, a) };
            let answer = format!(
                "Both can be used to {verb}, but {} is bigger than {}.",
                big.with_article(),
                small.with_article()
            );
            Binding {
                slots: slots([
                    ("A", SlotValue::from_entry(a)),
                    ("B", SlotValue::from_entry(b)),
                    ("VERB", SlotValue::plain(verb)),
                ]),
                answer,
                distractors: Vec::new(),
            }
        })
        .collect())
}

fn role(ctx: &mut Ctx<'_>) -> Result<Vec<Binding>, TemplateError> {
    let mut out = Vec::new();
    for e in ctx.allowed("OBJECT") {
        for a in &e.affordances {
            if let Some(task) = &a.task {
                out.push(Binding {
                    slots: slots([
                        ("OBJECT", SlotValue::from_entry(e)),
                        ("TASK", SlotValue::plain(task.clone())),
                    ]),
                    answer: a.role.clone(),
                    distractors: Vec::new(),
                });
            }
        }
    }
    Ok(out)
}

fn step_order(ctx: &mut Ctx<'_>) -> Result<Vec<Binding>, TemplateError> {
    let mut out = Vec::new();
    for e in ctx.allowed("OBJECT") {
        let steps = &e.usage_steps;
        for i in 0..steps.len() {
            for j in i + 1..steps.len() {
                out.push(Binding {
                    slots: slots([("OBJECT", SlotValue::from_entry(e))]),
                    answer: steps[i].clone(),
                    distractors: vec![steps[j].clone()],
                });
            }
        }
    }
    Ok(out)
}

fn location_of(ctx: &mut Ctx<'_>) -> Result<Vec<Binding>, TemplateError> {
    let mut all_locations: Vec<String> = Vec::new();
    for e in ctx.ontology.entries() {
        for l in &e.locations {
            if !all_locations.contains(l) {
                all_locations.push(l.clone());
            }
        }
    }
    let mut out = Vec::new();
    for e in ctx.allowed("OBJECT") {
        let pool: Vec<String> = all_locations.iter().filter(|l| !e.locations.contains(l)).cloned().collect();
        for loc in &e.locations {
            let Some(distractors) = ctx.sample(&pool, 4) else { break };
            out.push(Binding {
                slots: slots([("OBJECT", SlotValue::from_entry(e))]),
                answer: loc.clone(),
                distractors,
            });
        }
    }
    Ok(out)
}

fn instruction_class(
    ctx: &mut Ctx<'_>,
    classes: &std::collections::BTreeMap<String, Vec<String>>,
) -> Result<Vec<Binding>, TemplateError> {
    let sources = ctx.allowed("OBJECT");
    let instructions = |verbs: &[String]| -> Vec<String> {
        let mut v = Vec::new();
        for e in &sources {
            for a in &e.affordances {
                if verbs.contains(&a.verb) {
                    v.push(format!("use the {} to {}", e.name, a.verb));
                }
            }
        }
        v
    };
    let mut out = Vec::new();
    for (class, verbs) in classes {
        let golds = instructions(verbs);
        let others: Vec<String> = classes
            .iter()
            .filter(|(c, _)| *c != class)
            .flat_map(|(_, vs)| instructions(vs))
            .filter(|i| !golds.contains(i))
            .collect();
        for gold in &golds {
            let Some(distractors) = ctx.sample(&others, 4) else { break };
            out.push(Binding {
                slots: slots([("CLASS", SlotValue::plain(class.clone()))]),
                answer: gold.clone(),
                distractors,
            });
        }
    }
    Ok(out)
}
