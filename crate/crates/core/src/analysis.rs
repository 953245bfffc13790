//! Dataset diagnostics: instruction-length and max-pairwise-ROUGE-L
//! histograms, and per-category train/dev counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::{count_by_category, SplitCounts};
use crate::record::{Category, InstructionRecord};
use crate::textsim::{pairwise_max, pairwise_max_bucketed, tokenize, TokenSeq};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no records to analyse")]
    Empty,
    #[error("bin edges must be ascending with at least two entries")]
    BadEdges,
    #[error("writing {path}: {message}")]
    Write { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub n: usize,
}

impl Histogram {
    /// Bins are half-open `[lo, hi)` except the last, which is closed.
    /// Values outside the edges are clamped into the end bins.
    pub fn from_values(values: &[f64], bin_edges: Vec<f64>) -> Result<Self, AnalysisError> {
        if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AnalysisError::BadEdges);
        }
        let bins = bin_edges.len() - 1;
        let mut counts = vec![0; bins];
        for &v in values {
            // index of the last edge <= v, clamped to a valid bin
            let idx = bin_edges.partition_point(|e| *e <= v).saturating_sub(1).min(bins - 1);
            counts[idx] += 1;
        }
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        Ok(Histogram {
            bin_edges,
            counts,
            mean,
            n: values.len(),
        })
    }

    /// One bar per bin, scaled so the largest bin is `width` characters.
    pub fn ascii(&self, width: usize) -> String {
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1);
        let mut out = String::new();
        for (i, c) in self.counts.iter().enumerate() {
            let bar = "#".repeat((c * width).div_ceil(max));
            let _ = writeln!(
                out,
                "[{:>6.2}, {:>6.2}{} {:>7} {bar}",
                self.bin_edges[i],
                self.bin_edges[i + 1],
                if i + 1 == self.counts.len() { "]" } else { ")" },
                c
            );
        }
        let _ = writeln!(out, "n = {}, mean = {:.4}", self.n, self.mean);
        out
    }
}

/// Token count of instruction plus choice block.
pub fn record_length(r: &InstructionRecord) -> usize {
    tokenize(&r.similarity_text()).len()
}

const LENGTH_BIN: usize = 5;

/// Length histogram with fixed 5-token bins starting at 0.
pub fn length_stats(records: &[InstructionRecord]) -> Result<Histogram, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let lengths: Vec<f64> = records.iter().map(|r| record_length(r) as f64).collect();
    let max = lengths.iter().cloned().fold(0.0, f64::max) as usize;
    let bins = max / LENGTH_BIN + 1;
    let edges = (0..=bins).map(|i| (i * LENGTH_BIN) as f64).collect();
    Histogram::from_values(&lengths, edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    PerTemplate,
    Global,
}

pub const ROUGE_BINS: usize = 20;

pub fn rouge_edges() -> Vec<f64> {
    (0..=ROUGE_BINS).map(|i| i as f64 / ROUGE_BINS as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RougeReport {
    pub histogram: Histogram,
    /// Highest max-ROUGE per group (template id, or "all").
    pub group_max: BTreeMap<String, f64>,
    /// Groups with fewer than two records, left out of the histogram.
    pub degenerate: Vec<String>,
}

/// For each record, the highest ROUGE-L against any other record in its
/// scope group, binned over [0, 1].
pub fn rouge_distribution(records: &[InstructionRecord], scope: Scope) -> Result<RougeReport, AnalysisError> {
    let seqs: Vec<TokenSeq> = records.iter().map(|r| tokenize(&r.similarity_text())).collect();
    let keys: Vec<&str> = match scope {
        Scope::PerTemplate => records.iter().map(|r| r.template_id.as_str()).collect(),
        Scope::Global => vec!["all"; records.len()],
    };
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for k in &keys {
        *sizes.entry(k).or_default() += 1;
    }
    let maxima = match scope {
        Scope::PerTemplate => pairwise_max_bucketed(&seqs, &keys),
        Scope::Global => pairwise_max(&seqs),
    };
    let mut values = Vec::new();
    let mut group_max: BTreeMap<String, f64> = BTreeMap::new();
    for (k, m) in keys.iter().zip(&maxima) {
        if sizes[k] < 2 {
            continue;
        }
        values.push(*m);
        let e = group_max.entry(k.to_string()).or_insert(0.0);
        *e = e.max(*m);
    }
    let degenerate = sizes
        .iter()
        .filter(|(_, n)| **n < 2)
        .map(|(k, _)| k.to_string())
        .collect::<Vec<_>>();
    if scope == Scope::Global && records.len() < 2 {
        return Ok(RougeReport {
            histogram: Histogram::from_values(&[], rouge_edges())?,
            group_max,
            degenerate: vec!["all".into()],
        });
    }
    Ok(RougeReport {
        histogram: Histogram::from_values(&values, rouge_edges())?,
        group_max,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryTable {
    pub rows: Vec<(Category, SplitCounts)>,
    pub total: SplitCounts,
}

/// Per-category (train, dev) counts in the fixed category order, with totals.
pub fn category_table(train: &[InstructionRecord], dev: &[InstructionRecord]) -> CategoryTable {
    table_from_counts(&count_by_category(train, dev))
}

pub fn table_from_counts(counts: &BTreeMap<Category, SplitCounts>) -> CategoryTable {
    let rows: Vec<(Category, SplitCounts)> = Category::ALL
        .iter()
        .map(|c| (*c, counts.get(c).copied().unwrap_or_default()))
        .collect();
    let total = rows.iter().fold(SplitCounts::default(), |acc, (_, s)| SplitCounts {
        train: acc.train + s.train,
        dev: acc.dev + s.dev,
    });
    CategoryTable { rows, total }
}

impl CategoryTable {
    pub fn to_text(&self) -> String {
        let w = Category::ALL.iter().map(|c| c.table_label().len()).max().unwrap_or(10).max(18);
        let mut out = format!("{:<w$}  {:>7}  {:>7}\n", "Category", "Train", "Dev");
        for (c, s) in &self.rows {
            let _ = writeln!(out, "{:<w$}  {:>7}  {:>7}", c.table_label(), s.train, s.dev);
        }
        let _ = writeln!(out, "{:<w$}  {:>7}  {:>7}", "Total Instructions", self.total.train, self.total.dev);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["category", "train", "dev"]).expect("in-memory csv");
        for (c, s) in &self.rows {
            w.write_record([c.slug(), &s.train.to_string(), &s.dev.to_string()])
                .expect("in-memory csv");
        }
        w.write_record(["total", &self.total.train.to_string(), &self.total.dev.to_string()])
            .expect("in-memory csv");
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

/// Length and ROUGE histograms plus the category table for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub length: Histogram,
    pub rouge: RougeReport,
    pub table: CategoryTable,
}

pub fn stats_report(
    records: &[InstructionRecord],
    train: &[InstructionRecord],
    dev: &[InstructionRecord],
    scope: Scope,
) -> Result<StatsReport, AnalysisError> {
    Ok(StatsReport {
        length: length_stats(records)?,
        rouge: rouge_distribution(records, scope)?,
        table: category_table(train, dev),
    })
}

impl StatsReport {
    /// Long-format CSV: `section,key,value` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut row = |a: &str, b: &str, c: String| w.write_record([a, b, &c]).expect("in-memory csv");
        row("section", "key", "value".into());
        let hist = |row: &mut dyn FnMut(&str, &str, String), name: &str, h: &Histogram| {
            row(name, "n", h.n.to_string());
            row(name, "mean", format!("{:.6}", h.mean));
            for (i, c) in h.counts.iter().enumerate() {
                row(name, &format!("[{},{})", h.bin_edges[i], h.bin_edges[i + 1]), c.to_string());
            }
        };
        hist(&mut row, "length", &self.length);
        hist(&mut row, "max_rouge", &self.rouge.histogram);
        for (g, m) in &self.rouge.group_max {
            row("group_max_rouge", g, format!("{m:.6}"));
        }
        for g in &self.rouge.degenerate {
            row("degenerate_group", g, "1".into());
        }
        for (c, s) in &self.table.rows {
            row("train", c.slug(), s.train.to_string());
            row("dev", c.slug(), s.dev.to_string());
        }
        row("train", "total", self.table.total.train.to_string());
        row("dev", "total", self.table.total.dev.to_string());
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn to_text(&self, bar_width: usize) -> String {
        let mut out = String::from("Instruction length (tokens)\n");
        out.push_str(&self.length.ascii(bar_width));
        out.push_str("\nMax pairwise ROUGE-L\n");
        out.push_str(&self.rouge.histogram.ascii(bar_width));
        if !self.rouge.degenerate.is_empty() {
            let _ = writeln!(out, "groups with fewer than 2 records: {}", self.rouge.degenerate.join(", "));
        }
        out.push('\n');
        out.push_str(&self.table.to_text());
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), AnalysisError> {
        crate::providers::write_atomic(path, self.to_csv().as_bytes()).map_err(|e| AnalysisError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Provenance;

    fn rec(template: &str, text: &str) -> InstructionRecord {
        InstructionRecord {
            instruction: text.into(),
            input: String::new(),
            output: "x".into(),
            template_id: template.into(),
            category: Category::ObjectFacts,
            provenance: Provenance::Synthetic,
            gen_meta: None,
        }
    }

    /// Textbook O(nm) LCS, independent of the bit-parallel code.
    fn lcs(a: &[String], b: &[String]) -> usize {
        let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                dp[i][j] = if a[i - 1] == b[j - 1] {
                    dp[i - 1][j - 1] + 1
                } else {
                    dp[i - 1][j].max(dp[i][j - 1])
                };
            }
        }
        dp[a.len()][b.len()]
    }

    fn oracle_rouge(a: &str, b: &str) -> f64 {
        let (ta, tb) = (tokenize(a), tokenize(b));
        if ta.is_empty() && tb.is_empty() {
            return 0.0;
        }
        2.0 * lcs(ta.tokens(), tb.tokens()) as f64 / (ta.len() + tb.len()) as f64
    }

    #[test]
    fn length_examples() {
        let recs = [rec("t", "a b c"), rec("t", "d e f"), rec("t", "one two three four five six seven eight nine")];
        let h = length_stats(&recs).unwrap();
        assert_eq!(h.mean, 5.0);
        assert_eq!(h.counts.iter().sum::<usize>(), 3);
        assert_eq!(h.counts.len(), h.bin_edges.len() - 1);
        assert_eq!(length_stats(&recs[..1]).unwrap().n, 1);
        assert!(length_stats(&[]).is_err());
    }

    #[test]
    fn identical_pair_puts_all_mass_at_one() {
        let recs = [rec("t", "the same words"), rec("t", "the same words")];
        let r = rouge_distribution(&recs, Scope::Global).unwrap();
        assert_eq!(*r.histogram.counts.last().unwrap(), 2);
        assert_eq!(r.histogram.counts.iter().sum::<usize>(), 2);
    }

    #[test]
    fn distribution_matches_brute_force() {
        let words = ["red", "blue", "cup", "fit", "the", "a", "in", "ladder", "big", "can"];
        let mut recs = Vec::new();
        let mut state = 12345u64;
        for i in 0..20 {
            let mut text = Vec::new();
            for _ in 0..(3 + i % 7) {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                text.push(words[(state >> 33) as usize % words.len()]);
            }
            recs.push(rec(if i % 2 == 0 { "even" } else { "odd" }, &text.join(" ")));
        }
        for scope in [Scope::Global, Scope::PerTemplate] {
            let got = rouge_distribution(&recs, scope).unwrap();
            let mut expected = Vec::new();
            for (i, a) in recs.iter().enumerate() {
                let mut best: f64 = 0.0;
                for (j, b) in recs.iter().enumerate() {
                    if i != j && (scope == Scope::Global || a.template_id == b.template_id) {
                        best = best.max(oracle_rouge(&a.instruction, &b.instruction));
                    }
                }
                expected.push(best);
            }
            let want = Histogram::from_values(&expected, rouge_edges()).unwrap();
            assert_eq!(got.histogram.counts, want.counts);
            assert!((got.histogram.mean - want.mean).abs() < 1e-9);
        }
    }

    #[test]
    fn singleton_groups_are_reported() {
        let recs = [rec("a", "x y"), rec("a", "x z"), rec("b", "lonely")];
        let r = rouge_distribution(&recs, Scope::PerTemplate).unwrap();
        assert_eq!(r.degenerate, vec!["b".to_string()]);
        assert_eq!(r.histogram.n, 2);
        let g = rouge_distribution(&recs[2..], Scope::Global).unwrap();
        assert_eq!(g.degenerate, vec!["all".to_string()]);
        assert_eq!(g.histogram.n, 0);
    }

    #[test]
    fn histogram_conserves_mass() {
        let h = Histogram::from_values(&[-1.0, 0.0, 0.5, 1.0, 7.0], vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(h.counts, vec![2, 3]);
        assert!(Histogram::from_values(&[], vec![1.0, 1.0]).is_err());
        assert!(h.ascii(10).contains("n = 5"));
    }

    #[test]
    fn table_totals_and_empty() {
        let t = category_table(&[], &[]);
        assert_eq!(t.total, SplitCounts::default());
        assert_eq!(t.rows.len(), 8);
        let train = vec![rec("t", "a"), rec("t", "b")];
        let t = category_table(&train, &train[..1]);
        assert_eq!(t.total, SplitCounts { train: 2, dev: 1 });
        let sum: usize = t.rows.iter().map(|(_, s)| s.total()).sum();
        assert_eq!(sum, t.total.total());
        assert!(t.to_csv().ends_with("total,2,1\n"));
        assert!(t.to_text().contains("Total Instructions"));
    }
}
