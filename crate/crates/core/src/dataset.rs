//! JSONL persistence, per-category train/dev splitting, ablation subsets and
//! training-config emission.
//!
//! Layout under a dataset root:
//!
//! ```text
//! seeds/<template>.jsonl      eval/eval_set.jsonl     synthetic/<template>.jsonl
//! splits/<name>/{train,dev}.jsonl + manifest.json     configs/<name>.json
//! runs/<template>.json
//! ```
//!
//! `<name>` is `full` or a category slug.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::write_atomic;
use crate::record::{Category, InstructionRecord, Provenance, UnknownCategory};
use crate::rng::derive_rng;

pub const FULL: &str = "full";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no records to split")]
    Empty,
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    BadRatio(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("evaluation record {id} may not enter a training split")]
    EvalLeak { id: String },
    #[error(transparent)]
    UnknownCategory(#[from] UnknownCategory),
    #[error("split {0:?} has not been created; run the split first")]
    MissingSplit(String),
    #[error("manifest {path} disagrees with its files: {problem}")]
    ManifestMismatch { path: String, problem: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes one JSON object per line; returns the number written.
pub fn write_jsonl(path: &Path, records: &[InstructionRecord]) -> Result<usize, DatasetError> {
    let mut buf = BufWriter::new(Vec::new());
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.write_all(b"\n").expect("in-memory write");
    }
    let bytes = buf.into_inner().expect("in-memory flush");
    write_atomic(path, &bytes).map_err(io_err(path))?;
    Ok(records.len())
}

/// Reads records written by [`write_jsonl`]. Blank lines are skipped;
/// malformed lines fail with their 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<InstructionRecord>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads every `*.jsonl` file in `dir`, in file-name order.
pub fn read_jsonl_dir(dir: &Path) -> Result<Vec<InstructionRecord>, DatasetError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_jsonl(&f)?);
    }
    Ok(out)
}

/// Dev-set size for `n` records at train `ratio`: the dev share rounded up,
/// so train = floor(ratio·n). (4023 at 0.9 gives 403 dev.)
pub fn dev_count(n: usize, ratio: f64) -> usize {
    let share = (1.0 - ratio) * n as f64;
    // strip float noise such as 9.999999999999998 before rounding up
    let share = (share * 1e9).round() / 1e9;
    (share.ceil() as usize).min(n)
}

/// Splits each category separately: a seeded shuffle picks the dev members,
/// and both sides keep input order.
pub fn split(
    records: &[InstructionRecord],
    ratio: f64,
    rng_seed: u64,
) -> Result<(Vec<InstructionRecord>, Vec<InstructionRecord>), DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::BadRatio(ratio));
    }
    if records.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut is_dev = vec![false; records.len()];
    for c in Category::ALL {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].category == c).collect();
        if idx.is_empty() {
            continue;
        }
        let k = dev_count(idx.len(), ratio);
        idx.shuffle(&mut derive_rng(rng_seed, &["split", c.slug()]));
        for &i in &idx[..k] {
            is_dev[i] = true;
        }
    }
    let mut train = Vec::with_capacity(records.len());
    let mut dev = Vec::new();
    for (r, d) in records.iter().zip(is_dev) {
        if d {
            dev.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, dev))
}

/// All records of `category` in input order.
pub fn subset_by_category(records: &[InstructionRecord], category: Category) -> Vec<InstructionRecord> {
    records.iter().filter(|r| r.category == category).cloned().collect()
}

/// Parses a category name, slug or alias, then subsets.
pub fn subset_by_category_name(records: &[InstructionRecord], category: &str) -> Result<Vec<InstructionRecord>, DatasetError> {
    Ok(subset_by_category(records, category.parse()?))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.dev
    }
}

/// Per-category (train, dev) counts in category order, all eight present.
pub fn count_by_category(train: &[InstructionRecord], dev: &[InstructionRecord]) -> BTreeMap<Category, SplitCounts> {
    let mut out: BTreeMap<Category, SplitCounts> = Category::ALL.iter().map(|c| (*c, SplitCounts::default())).collect();
    for r in train {
        out.get_mut(&r.category).expect("all categories present").train += 1;
    }
    for r in dev {
        out.get_mut(&r.category).expect("all categories present").dev += 1;
    }
    out
}

/// Description of one persisted split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split_seed: u64,
    pub ratio: f64,
    pub category_counts: BTreeMap<Category, SplitCounts>,
    pub total: SplitCounts,
    pub train_path: PathBuf,
    pub dev_path: PathBuf,
}

pub fn split_dir(root: &Path, name: &str) -> PathBuf {
    root.join("splits").join(name)
}

fn manifest_path(root: &Path, name: &str) -> PathBuf {
    split_dir(root, name).join("manifest.json")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(io_err(path))
}

/// Writes `splits/<name>/{train,dev}.jsonl` and the manifest. Refuses any
/// record with eval provenance.
pub fn write_split(
    root: &Path,
    name: &str,
    train: &[InstructionRecord],
    dev: &[InstructionRecord],
    split_seed: u64,
    ratio: f64,
) -> Result<DatasetManifest, DatasetError> {
    if let Some(r) = train.iter().chain(dev).find(|r| r.provenance == Provenance::Eval) {
        return Err(DatasetError::EvalLeak { id: r.id() });
    }
    let dir = split_dir(root, name);
    let train_path = dir.join("train.jsonl");
    let dev_path = dir.join("dev.jsonl");
    write_jsonl(&train_path, train)?;
    write_jsonl(&dev_path, dev)?;
    let category_counts = count_by_category(train, dev);
    let manifest = DatasetManifest {
        name: name.to_string(),
        split_seed,
        ratio,
        category_counts,
        total: SplitCounts {
            train: train.len(),
            dev: dev.len(),
        },
        train_path,
        dev_path,
    };
    write_json(&manifest_path(root, name), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path, name: &str) -> Result<DatasetManifest, DatasetError> {
    let path = manifest_path(root, name);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(DatasetError::MissingSplit(name.to_string())),
        Err(e) => return Err(io_err(&path)(e)),
    };
    serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

impl DatasetManifest {
    /// Re-reads the split files and checks the stored counts against them.
    pub fn verify(&self) -> Result<(), DatasetError> {
        let train = read_jsonl(&self.train_path)?;
        let dev = read_jsonl(&self.dev_path)?;
        let counts = count_by_category(&train, &dev);
        let mismatch = |problem: String| DatasetError::ManifestMismatch {
            path: self.train_path.display().to_string(),
            problem,
        };
        if counts != self.category_counts {
            return Err(mismatch("per-category counts differ".into()));
        }
        if train.len() != self.total.train || dev.len() != self.total.dev {
            return Err(mismatch(format!(
                "totals {}/{} vs files {}/{}",
                self.total.train,
                self.total.dev,
                train.len(),
                dev.len()
            )));
        }
        Ok(())
    }
}

/// Builds the ablation split for `category` from the full split, so its
/// train and dev sets are exactly that category's share of the full ones.
pub fn ablate(root: &Path, category: Category) -> Result<DatasetManifest, DatasetError> {
    let full = read_manifest(root, FULL)?;
    let train = subset_by_category(&read_jsonl(&full.train_path)?, category);
    let dev = subset_by_category(&read_jsonl(&full.dev_path)?, category);
    write_split(root, category.slug(), &train, &dev, full.split_seed, full.ratio)
}

/// Fine-tuning hyper-parameters plus the split files they apply to. The
/// fine-tuning side reads this file as flat JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub name: String,
    pub learning_rate: f64,
    pub epochs: u32,
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub packing: bool,
    pub train_path: PathBuf,
    pub dev_path: PathBuf,
    pub train_records: usize,
    pub dev_records: usize,
}

impl TrainingConfig {
    pub fn for_manifest(manifest: &DatasetManifest) -> Self {
        TrainingConfig {
            name: manifest.name.clone(),
            learning_rate: 2.0e-4,
            epochs: 3,
            lora_rank: 32,
            lora_alpha: 16,
            packing: false,
            train_path: manifest.train_path.clone(),
            dev_path: manifest.dev_path.clone(),
            train_records: manifest.total.train,
            dev_records: manifest.total.dev,
        }
    }
}

/// Writes `configs/<name>.json` for the full split (`ablation = None`) or a
/// category's ablation split, which must already exist.
pub fn emit_training_config(root: &Path, ablation: Option<&str>) -> Result<(TrainingConfig, PathBuf), DatasetError> {
    let name = match ablation {
        None => FULL.to_string(),
        Some(c) => c.parse::<Category>()?.slug().to_string(),
    };
    let manifest = read_manifest(root, &name)?;
    let config = TrainingConfig::for_manifest(&manifest);
    let path = root.join("configs").join(format!("{name}.json"));
    write_json(&path, &config)?;
    Ok((config, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    pub(crate) fn fake(n: usize, category: Category) -> Vec<InstructionRecord> {
        (0..n)
            .map(|i| InstructionRecord {
                instruction: format!("{} question {i}", category.slug()),
                input: String::new(),
                output: format!("answer {i}"),
                template_id: "t".into(),
                category,
                provenance: Provenance::Synthetic,
                gen_meta: None,
            })
            .collect()
    }

    #[test]
    fn dev_count_matches_published_rows() {
        let rows = [
            (4023, 403),
            (4956, 496),
            (2973, 298),
            (981, 99),
            (2977, 298),
            (1992, 200),
            (4954, 496),
            (2958, 296),
            (100, 10),
        ];
        for (n, dev) in rows {
            assert_eq!(dev_count(n, 0.9), dev, "n={n}");
        }
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let recs = fake(100, Category::ObjectFacts);
        let (train, dev) = split(&recs, 0.9, 3).unwrap();
        assert_eq!((train.len(), dev.len()), (90, 10));
        let t: HashSet<_> = train.iter().map(|r| r.id()).collect();
        let d: HashSet<_> = dev.iter().map(|r| r.id()).collect();
        assert!(t.is_disjoint(&d));
        assert_eq!(t.len() + d.len(), 100);
        assert_eq!(split(&recs, 0.9, 3).unwrap(), (train.clone(), dev.clone()));
        assert_ne!(split(&recs, 0.9, 4).unwrap().1, dev);
    }

    #[test]
    fn split_preconditions() {
        assert!(matches!(split(&[], 0.9, 0), Err(DatasetError::Empty)));
        let recs = fake(3, Category::ObjectFacts);
        assert!(matches!(split(&recs, 1.0, 0), Err(DatasetError::BadRatio(_))));
        assert!(matches!(split(&recs, 0.0, 0), Err(DatasetError::BadRatio(_))));
    }

    #[test]
    fn subsets_partition_the_data() {
        let mut recs = fake(5, Category::DisasterKnowledge);
        recs.extend(fake(3, Category::RelativeSizes));
        let mut total = 0;
        for c in Category::ALL {
            total += subset_by_category(&recs, c).len();
        }
        assert_eq!(total, recs.len());
        assert_eq!(subset_by_category_name(&recs, "Earthquakes").unwrap().len(), 5);
        assert!(subset_by_category(&recs, Category::ObjectFacts).is_empty());
        assert!(subset_by_category_name(&recs, "Astronomy").is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        let recs = fake(3, Category::ObjectFunctions);
        assert_eq!(write_jsonl(&p, &recs).unwrap(), 3);
        assert_eq!(read_jsonl(&p).unwrap(), recs);
        write_jsonl(&p, &[]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "");
        assert!(read_jsonl(&p).unwrap().is_empty());
        let good = serde_json::to_string(&recs[0]).unwrap();
        let bad = good.replace("\"output\":\"answer 0\",", "");
        fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
        match read_jsonl(&p) {
            Err(DatasetError::Malformed { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("output"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn eval_records_cannot_enter_splits() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = fake(2, Category::ObjectFacts);
        recs[1].provenance = Provenance::Eval;
        assert!(matches!(
            write_split(dir.path(), FULL, &recs, &[], 0, 0.9),
            Err(DatasetError::EvalLeak { .. })
        ));
    }

    #[test]
    fn config_requires_split_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_training_config(dir.path(), None), Err(DatasetError::MissingSplit(_))));
        let mut recs = fake(40, Category::RelativeSizes);
        recs.extend(fake(20, Category::DisasterKnowledge));
        let (train, dev) = split(&recs, 0.9, 1).unwrap();
        let m = write_split(dir.path(), FULL, &train, &dev, 1, 0.9).unwrap();
        m.verify().unwrap();
        let (cfg, path) = emit_training_config(dir.path(), None).unwrap();
        assert_eq!((cfg.learning_rate, cfg.epochs, cfg.lora_rank, cfg.lora_alpha), (2.0e-4, 3, 32, 16));
        assert!(!cfg.packing);
        assert_eq!(cfg.train_records, 54);
        let first = fs::read(&path).unwrap();
        emit_training_config(dir.path(), None).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);

        assert!(matches!(
            emit_training_config(dir.path(), Some("earthquakes")),
            Err(DatasetError::MissingSplit(_))
        ));
        let ab = ablate(dir.path(), Category::DisasterKnowledge).unwrap();
        assert_eq!(ab.total, SplitCounts { train: 18, dev: 2 });
        let (cfg, _) = emit_training_config(dir.path(), Some("Earthquakes")).unwrap();
        assert_eq!(cfg.train_records, 18);
        assert!(emit_training_config(dir.path(), Some("Astronomy")).is_err());
    }
}
