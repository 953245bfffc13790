//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails other than those listed in
//! `KNOWN_UNATTAINABLE`, which still print FAIL with their reason.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use frida_core::dataset::{split, subset_by_category};
use frida_core::evalharness::{compare_models, evaluate, EvalOptions, EvalReport};
use frida_core::genloop::{run_generation, write_run, DedupGate, GenerationConfig, GenerationRun, ParseFailure, Rejection};
use frida_core::ontology::load_ontology;
use frida_core::providers::{ChatClient, HashEmbedder, ProviderError, ScaledEmbedder, ScriptedChat, TableEmbedder};
use frida_core::record::validate_record;
use frida_core::rng::derive_rng;
use frida_core::templating::{
    build_template_records, load_templates, AnswerFormat, AnswerRule, PatternSource, TemplateSpec, SEEDS_PER_TEMPLATE,
};
use frida_core::textsim::{pairwise_max, pairwise_max_bucketed, rouge_l, tokenize, TokenSeq};
use frida_core::{Category, InstructionRecord, Provenance};
use rand::seq::SliceRandom;
use rand::Rng;

/// Criteria that cannot pass as written; see the reason printed with each.
const KNOWN_UNATTAINABLE: &[&str] = &["split-ablation"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(problems: Vec<String>, ok_detail: String) -> Outcome {
    if problems.is_empty() {
        Outcome {
            pass: true,
            detail: ok_detail,
        }
    } else {
        Outcome {
            pass: false,
            detail: problems.join("; "),
        }
    }
}

fn data(file: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(file)
}

// ROUGE-L

/// Textbook O(n·m) LCS table.
fn lcs_table(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

fn oracle_rouge(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    2.0 * lcs_table(a, b) as f64 / (a.len() + b.len()) as f64
}

fn random_text(rng: &mut impl Rng, max_len: usize, vocab: usize) -> String {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| format!("t{}", rng.gen_range(0..vocab))).collect::<Vec<_>>().join(" ")
}

fn rouge_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = derive_rng(1, &["acceptance", "rouge"]);
    let mut problems = Vec::new();
    for k in 0..1000 {
        // small vocabularies give long common subsequences
        let vocab = [3, 6, 12, 40][k % 4];
        let (ta, tb) = (random_text(&mut rng, 30, vocab), random_text(&mut rng, 30, vocab));
        let (a, b) = (tokenize(&ta), tokenize(&tb));
        let got = rouge_l(&a, &b);
        let want = oracle_rouge(a.tokens(), b.tokens());
        if (got - want).abs() > 1e-9 {
            problems.push(format!("pair {k}: {got} vs oracle {want}"));
        }
        if (got - rouge_l(&b, &a)).abs() > 1e-12 {
            problems.push(format!("pair {k}: not symmetric"));
        }
        if !a.is_empty() && rouge_l(&a, &a) != 1.0 {
            problems.push(format!("pair {k}: identity gives {}", rouge_l(&a, &a)));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 10.0 {
        problems.push(format!("took {secs:.2} s"));
    }
    problems.truncate(5);
    outcome(problems, format!("1000 pairs agree with DP oracle to 1e-9, {secs:.3} s"))
}

// generation

fn free_text_template(threshold: f64) -> TemplateSpec {
    TemplateSpec {
        id: format!("accept-{threshold}"),
        name: "difference".into(),
        category: Category::ObjectDifferences,
        source: PatternSource::Reconstructed,
        pattern: "What is the difference between {A} and {B}?".into(),
        slot_constraints: Default::default(),
        rule: AnswerRule::Difference,
        answer_format: AnswerFormat::FreeText,
        rouge_threshold: threshold,
        temperature: 1.0,
        eval_count: 4,
        generation_prompt: "Create {{COUNT}} unique questions about how two objects differ.".into(),
        prompt_source: PatternSource::Reconstructed,
    }
}

fn record(template: &TemplateSpec, instruction: String, provenance: Provenance) -> InstructionRecord {
    InstructionRecord {
        instruction,
        input: String::new(),
        output: "One is bigger than the other.".into(),
        template_id: template.id.clone(),
        category: template.category,
        provenance,
        gen_meta: None,
    }
}

fn fresh_instruction(batch: usize, j: usize) -> String {
    let mut rng = derive_rng(7, &["fresh", &batch.to_string(), &j.to_string()]);
    let n = rng.gen_range(12..=20);
    let words: Vec<String> = (0..n).map(|_| format!("w{}", rng.gen_range(0..3000))).collect();
    format!("What separates {}?", words.join(" "))
}

/// Near duplicate of an earlier fresh instruction: a copy, a one-word swap,
/// or a one-word extension.
fn near_duplicate(batch: usize, j: usize, fresh_per_batch: usize) -> String {
    let mut rng = derive_rng(7, &["dup", &batch.to_string(), &j.to_string()]);
    let b = rng.gen_range(0..=batch);
    let src = rng.gen_range(0..fresh_per_batch);
    let mut words: Vec<String> = fresh_instruction(b, src).split(' ').map(str::to_string).collect();
    match rng.gen_range(0..3) {
        0 => {}
        1 => {
            let i = rng.gen_range(2..words.len() - 1);
            words[i] = "changed".into();
        }
        _ => words.insert(2, "also".into()),
    }
    words.join(" ")
}

/// Scripted generator: each batch of 40 holds 28 fresh objects and 12 near
/// duplicates (30%). With `messy`, batches also carry invalid records,
/// unparseable fragments and a wrapper object.
fn scripted_generator(messy: bool) -> ChatClient {
    const BATCH: usize = 40;
    const FRESH: usize = 28;
    ChatClient::new(Arc::new(ScriptedChat::from_fn(move |_, n| {
        let mut objects: Vec<String> = Vec::new();
        for j in 0..BATCH {
            let instruction = if j < FRESH {
                fresh_instruction(n, j)
            } else {
                near_duplicate(n, j, FRESH)
            };
            objects.push(serde_json::json!({"instruction": instruction, "input": "", "output": "One is bigger than the other."}).to_string());
        }
        let mut rng = derive_rng(7, &["order", &n.to_string()]);
        objects.shuffle(&mut rng);
        if messy {
            if n == 4 {
                return Err(ProviderError::Refused("scripted refusal".into()));
            }
            objects.push(r#"{"instruction": "Pick one", "input": "A) x B) y", "output": "A) x"}"#.into());
            objects.push(r#"{"instruction": "", "input": "", "output": "empty"}"#.into());
            objects.push(r#"{"instruction": "broken" "output": }"#.into());
            let body = objects.join(",\n");
            return Ok(if n % 2 == 0 {
                format!("Here you go:\n[{body}]")
            } else {
                format!("{{\"questions\": [{body}]}}\n{{\"instruction\": \"cut off")
            });
        }
        Ok(format!("[{}]", objects.join(",\n")))
    })))
}

fn seeds_for(template: &TemplateSpec) -> Vec<InstructionRecord> {
    (0..5)
        .map(|i| record(template, format!("What is the difference between seed{i}a and seed{i}b?"), Provenance::Seed))
        .collect()
}

fn run_scripted(threshold: f64, target: usize, messy: bool) -> (TemplateSpec, Vec<InstructionRecord>, GenerationRun) {
    let template = free_text_template(threshold);
    let seeds = seeds_for(&template);
    let config = GenerationConfig {
        target_per_template: target,
        batch_size: 40,
        max_calls_per_template: 30,
        ..GenerationConfig::default()
    };
    let run = run_generation(&template, &seeds, &config, &scripted_generator(messy)).expect("run starts");
    (template, seeds, run)
}

fn dedup_gate_soundness() -> Outcome {
    let mut problems = Vec::new();
    let mut details = Vec::new();
    for threshold in [0.8, 0.97] {
        let (template, seeds, run) = run_scripted(threshold, 200, false);
        if run.accepted_count != 200 {
            problems.push(format!("{threshold}: accepted {} of 200", run.accepted_count));
        }
        if run.rejected_dup == 0 {
            problems.push(format!("{threshold}: no near duplicate was rejected"));
        }
        let seqs: Vec<TokenSeq> = run.accepted.iter().map(|r| tokenize(&r.similarity_text())).collect();
        let worst = pairwise_max(&seqs).into_iter().fold(0.0, f64::max);
        if worst >= threshold {
            problems.push(format!("{threshold}: accepted pair at {worst}"));
        }
        let mut gate = DedupGate::new(template.rouge_threshold).expect("threshold in range");
        for r in seeds.iter().chain(&run.accepted) {
            gate.admit(r);
        }
        for r in &run.accepted {
            let d = gate.check(r);
            if d.accepted || d.score != 1.0 {
                problems.push(format!("{threshold}: resubmission scored {} accepted={}", d.score, d.accepted));
                break;
            }
        }
        details.push(format!(
            "{threshold}: max pairwise {worst:.4}, {} dup rejected",
            run.rejected_dup
        ));
    }
    outcome(problems, details.join(", "))
}

/// Recounts a ledger from its rejection list.
fn recount(run: &GenerationRun) -> Vec<String> {
    let mut problems = Vec::new();
    let dup = run.rejections.iter().filter(|r| matches!(r, Rejection::Duplicate { .. })).count();
    let invalid = run
        .rejections
        .iter()
        .filter(|r| matches!(r, Rejection::Invalid { failure: ParseFailure::Invalid { .. }, .. }))
        .count();
    let unparseable = run.rejections.len() - dup - invalid;
    if run.objects_found != run.accepted.len() + run.rejected_dup + run.rejected_invalid {
        problems.push(format!(
            "{}: found {} != {} + {} + {}",
            run.template_id,
            run.objects_found,
            run.accepted.len(),
            run.rejected_dup,
            run.rejected_invalid
        ));
    }
    if (dup, invalid, unparseable) != (run.rejected_dup, run.rejected_invalid, run.parse_failures) {
        problems.push(format!(
            "{}: rejection list {dup}/{invalid}/{unparseable} vs counters {}/{}/{}",
            run.template_id, run.rejected_dup, run.rejected_invalid, run.parse_failures
        ));
    }
    if run.accepted_count != run.accepted.len() || !run.accounting_holds() {
        problems.push(format!("{}: accounting_holds is false", run.template_id));
    }
    problems
}

fn ledger_bytes(run: &GenerationRun) -> (Vec<u8>, Vec<u8>) {
    let dir = tempfile::tempdir().expect("tempdir");
    write_run(run, dir.path()).expect("ledger written");
    let ledger = std::fs::read(dir.path().join("runs").join(format!("{}.json", run.template_id))).expect("ledger");
    let records = std::fs::read(dir.path().join("synthetic").join(format!("{}.jsonl", run.template_id))).expect("records");
    (ledger, records)
}

fn accounting_identity() -> Outcome {
    let mut problems = Vec::new();
    let scenarios = [(0.8, 200, false), (0.97, 200, false), (0.9, 300, true), (0.8, 60, true)];
    let mut checked = 0;
    for (threshold, target, messy) in scenarios {
        let (_, _, a) = run_scripted(threshold, target, messy);
        let (_, _, b) = run_scripted(threshold, target, messy);
        problems.extend(recount(&a));
        if messy && (a.parse_failures == 0 || a.rejected_invalid == 0) {
            problems.push(format!("messy run at {threshold} exercised no failures"));
        }
        if ledger_bytes(&a) != ledger_bytes(&b) {
            problems.push(format!("{threshold}/{target}: repeated run differs"));
        }
        checked += 1;
    }
    outcome(problems, format!("{checked} scripted runs balance; repeats byte-identical"))
}

// dataset

/// Table of category sizes and their train/dev rows.
const SPLIT_TABLE: [(Category, usize, usize); 8] = [
    (Category::RelativeSizes, 3620, 403),
    (Category::ObjectFunctions, 4460, 496),
    (Category::RiskySituations, 2675, 298),
    (Category::DisasterKnowledge, 882, 99),
    (Category::RequiredEquipment, 2679, 298),
    (Category::InstructionFollowing, 1792, 200),
    (Category::ObjectDifferences, 4458, 496),
    (Category::ObjectFacts, 2662, 296),
];
const SPLIT_TOTALS: (usize, usize) = (23232, 2582);

fn split_ablation() -> Outcome {
    let records: Vec<InstructionRecord> = SPLIT_TABLE
        .iter()
        .flat_map(|&(c, train, dev)| {
            (0..train + dev).map(move |i| InstructionRecord {
                instruction: format!("{} fixture question {i}", c.slug()),
                input: String::new(),
                output: "answer".into(),
                template_id: c.slug().into(),
                category: c,
                provenance: Provenance::Synthetic,
                gen_meta: None,
            })
        })
        .collect();
    let mut problems = Vec::new();
    if records.len() != 25_814 {
        problems.push(format!("fixture has {} records", records.len()));
    }
    let (train, dev) = split(&records, 0.9, 2024).expect("split");
    for &(c, want_train, want_dev) in &SPLIT_TABLE {
        let got = (subset_by_category(&train, c).len(), subset_by_category(&dev, c).len());
        if got != (want_train, want_dev) {
            problems.push(format!("{c}: {}/{} vs {want_train}/{want_dev}", got.0, got.1));
        }
    }
    let train_ids: HashSet<String> = train.iter().map(InstructionRecord::id).collect();
    let dev_ids: HashSet<String> = dev.iter().map(InstructionRecord::id).collect();
    if !train_ids.is_disjoint(&dev_ids) {
        problems.push("train and dev overlap".into());
    }
    let all_ids: HashSet<String> = records.iter().map(InstructionRecord::id).collect();
    if train_ids.union(&dev_ids).cloned().collect::<HashSet<_>>() != all_ids {
        problems.push("train ∪ dev is not the dataset".into());
    }
    let mut covered = HashSet::new();
    for c in Category::ALL {
        for r in subset_by_category(&records, c) {
            if !covered.insert(r.id()) {
                problems.push(format!("{} in two category subsets", r.id()));
            }
        }
    }
    if covered != all_ids {
        problems.push("category subsets do not cover the dataset".into());
    }
    let got_totals = (train.len(), dev.len());
    if got_totals != SPLIT_TOTALS {
        let row_sum: (usize, usize) = SPLIT_TABLE.iter().fold((0, 0), |s, r| (s.0 + r.1, s.1 + r.2));
        problems.push(format!(
            "totals {}/{} vs {}/{}; the per-category rows themselves sum to {}/{}, so no per-category split can match both",
            got_totals.0, got_totals.1, SPLIT_TOTALS.0, SPLIT_TOTALS.1, row_sum.0, row_sum.1
        ));
    }
    outcome(problems, "all 8 categories exact; disjoint; subsets partition the dataset".into())
}

fn seed_eval_volume() -> Outcome {
    let ontology = load_ontology(data("ontology.json")).expect("shipped ontology");
    let templates = load_templates(data("templates.json")).expect("shipped templates");
    let mut problems = Vec::new();
    let (mut seeds, mut evals) = (Vec::new(), Vec::new());
    for t in templates.templates() {
        let built = match build_template_records(t, &ontology, 0, SEEDS_PER_TEMPLATE) {
            Ok(b) => b,
            Err(e) => {
                problems.push(format!("{}: {e}", t.id));
                continue;
            }
        };
        let seed_bindings: HashSet<_> = built.seed_bindings.iter().collect();
        if built.eval_bindings.iter().any(|b| seed_bindings.contains(b)) {
            problems.push(format!("{}: seed and eval share a binding", t.id));
        }
        seeds.extend(built.seeds);
        evals.extend(built.eval);
    }
    if templates.len() != 26 {
        problems.push(format!("{} templates", templates.len()));
    }
    if seeds.len() != 130 {
        problems.push(format!("{} seed records", seeds.len()));
    }
    if evals.len() < 119 {
        problems.push(format!("{} eval records", evals.len()));
    }
    for r in seeds.iter().chain(&evals) {
        let v = validate_record(r);
        if !v.is_empty() {
            problems.push(format!("{}: {v:?}", r.id()));
        }
    }
    let seed_ids: HashSet<String> = seeds.iter().map(InstructionRecord::id).collect();
    if evals.iter().any(|r| seed_ids.contains(&r.id())) {
        problems.push("an eval record equals a seed record".into());
    }
    problems.truncate(5);
    outcome(problems, format!("{} seed, {} eval, all valid, disjoint", seeds.len(), evals.len()))
}

// evaluation

fn eval_items(n: usize) -> Vec<InstructionRecord> {
    (0..n)
        .map(|i| InstructionRecord {
            instruction: format!("Evaluation question {i}?"),
            input: "A) yes B) no".into(),
            output: "A) yes".into(),
            template_id: format!("t{}", i % 8),
            category: Category::ALL[i % 8],
            provenance: Provenance::Eval,
            gen_meta: None,
        })
        .collect()
}

fn subject(reply: impl Fn(usize) -> String + Send + Sync + 'static) -> ChatClient {
    ChatClient::new(Arc::new(ScriptedChat::from_fn(move |req, _| {
        let i: usize = req
            .last_user()
            .trim_start_matches("Evaluation question ")
            .split('?')
            .next()
            .and_then(|s| s.parse().ok())
            .expect("item number");
        Ok(reply(i))
    })))
}

/// Equal up to float rounding (1e-12).
fn same_values(a: &EvalReport, b: &EvalReport) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-12;
    let sims_close = a.per_item.iter().zip(&b.per_item).all(|(x, y)| match (x.similarity, y.similarity) {
        (Some(x), Some(y)) => close(x, y),
        (x, y) => x == y,
    });
    close(a.overall, b.overall)
        && a.per_category.len() == b.per_category.len()
        && a.per_category.iter().zip(&b.per_category).all(|(x, y)| x.0 == y.0 && close(*x.1, *y.1))
        && sims_close
}

fn semscore_harness() -> Outcome {
    let set = eval_items(40);
    let opts = EvalOptions::default();
    let mut problems = Vec::new();

    let echo = evaluate(&subject(|_| "A) yes".into()), "echo", &set, &HashEmbedder::new(64), &opts).expect("echo run");
    if (echo.overall - 100.0).abs() > 1e-9 {
        problems.push(format!("echo-gold overall {}", echo.overall));
    }

    let table: HashMap<String, Vec<f64>> = HashMap::from([
        ("A) yes".to_string(), vec![0.6, 0.8, 0.0]),
        ("orthogonal".to_string(), vec![0.0, 0.0, 2.5]),
    ]);
    let half = subject(|i| if i % 2 == 0 { "A) yes".into() } else { "orthogonal".into() });
    let plain = evaluate(&half, "half", &set, &TableEmbedder::new("table", table.clone()), &opts).expect("half run");
    if (plain.overall - 50.0).abs() > 1e-6 {
        problems.push(format!("50/50 overall {}", plain.overall));
    }
    let scaled = ScaledEmbedder {
        inner: TableEmbedder::new("table", table),
        factor: 7.0,
    };
    let big = evaluate(&half, "half", &set, &scaled, &opts).expect("scaled run");
    let hashed = evaluate(&half, "half", &set, &HashEmbedder::new(64), &opts).expect("hash run");
    let hashed_big = evaluate(
        &half,
        "half",
        &set,
        &ScaledEmbedder {
            inner: HashEmbedder::new(64),
            factor: 7.0,
        },
        &opts,
    )
    .expect("scaled hash run");
    if !same_values(&plain, &big) || !same_values(&hashed, &hashed_big) {
        problems.push("scaling embeddings by 7 changed a report value".into());
    }

    let reports: Vec<EvalReport> = (0..9)
        .map(|m| {
            let mut r = if m % 2 == 0 { echo.clone() } else { plain.clone() };
            r.model_id = format!("model-{m}");
            r
        })
        .collect();
    match compare_models(&reports) {
        Ok(matrix) => {
            if matrix.shape() != (8, 9) {
                problems.push(format!("matrix shape {:?}", matrix.shape()));
            }
            let csv_rows = matrix.to_csv().lines().count();
            if csv_rows != 9 {
                problems.push(format!("csv has {csv_rows} lines"));
            }
        }
        Err(e) => problems.push(format!("compare_models: {e}")),
    }
    outcome(
        problems,
        format!("echo {:.1}, 50/50 {:.6}, scale-invariant, matrix 8x9", echo.overall, plain.overall),
    )
}

// throughput

fn bucketed_throughput() -> Outcome {
    let templates = 26;
    let mut rng = derive_rng(3, &["acceptance", "throughput"]);
    let openers = ["Which of the following", "What should I use to", "Can you use a", "Choose the object that"];
    let mut texts = Vec::with_capacity(25_000);
    let mut keys = Vec::with_capacity(25_000);
    for i in 0..25_000 {
        let t = i % templates;
        let n = rng.gen_range(8..=35);
        let body: Vec<String> = (0..n).map(|_| format!("w{}", rng.gen_range(0..800))).collect();
        texts.push(format!("{} {}", openers[t % openers.len()], body.join(" ")));
        keys.push(t);
    }
    let seqs: Vec<TokenSeq> = texts.iter().map(|s| tokenize(s)).collect();
    let start = Instant::now();
    let maxes = pairwise_max_bucketed(&seqs, &keys);
    let secs = start.elapsed().as_secs_f64();
    let mut problems = Vec::new();
    if maxes.len() != seqs.len() {
        problems.push(format!("{} results for {} records", maxes.len(), seqs.len()));
    }
    // spot-check against the brute-force oracle
    let mut by_key: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        by_key.entry(*k).or_default().push(i);
    }
    for &i in &[0usize, 777, 12_345, 24_999] {
        let want = by_key[&keys[i]]
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| oracle_rouge(seqs[i].tokens(), seqs[j].tokens()))
            .fold(0.0, f64::max);
        if (maxes[i] - want).abs() > 1e-9 {
            problems.push(format!("record {i}: {} vs oracle {want}", maxes[i]));
        }
    }
    if secs >= 60.0 {
        problems.push(format!("took {secs:.1} s"));
    }
    outcome(problems, format!("25000 records in {templates} buckets, {secs:.2} s"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("rouge-oracle", rouge_oracle_equivalence),
        ("dedup-gate", dedup_gate_soundness),
        ("accounting", accounting_identity),
        ("split-ablation", split_ablation),
        ("seed-eval-volume", seed_eval_volume),
        ("semscore-harness", semscore_harness),
        ("throughput", bucketed_throughput),
    ];
    let mut unexpected = Vec::new();
    for (name, check) in criteria {
        let o = check();
        let known = KNOWN_UNATTAINABLE.contains(&name);
        let tag = match (o.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("{tag:<12} {name:<18} {}", o.detail);
        if !o.pass && !known {
            unexpected.push(name);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("failed: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
