use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{csv_format, derive_seed};
use crate::error::{PbnError, Result};

/// Smallest class size a holdout split accepts.
pub const MIN_PER_CLASS: usize = 4;

/// One dataset row: event id, class label and optional feature file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub label: usize,
    #[serde(default)]
    pub path: Option<String>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<DatasetEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    reader
        .deserialize()
        .map(|r| r.map_err(csv_format))
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<DatasetEntry>> {
    let text = fs::read_to_string(path).map_err(|e| PbnError::io(path, e))?;
    parse_manifest(&text)
}

/// One random holdout. `train[c]` and `test[c]` hold dataset indices of
/// class `c`; they are disjoint and cover the class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    pub name: String,
    pub seed: u64,
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl FoldSpec {
    pub fn num_classes(&self) -> usize {
        self.train.len()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.train.iter().flatten().copied().collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.test.iter().flatten().copied().collect()
    }

    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        let mut seen = vec![false; labels.len()];
        for (c, (tr, te)) in self.train.iter().zip(&self.test).enumerate() {
            for &i in tr.iter().chain(te) {
                if i >= labels.len() || labels[i] != c {
                    return Err(PbnError::Config(format!(
                        "fold {}: index {i} is not in class {c}",
                        self.name
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(PbnError::Config(format!(
                        "fold {}: sample {i} listed twice",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

fn fold_name(i: usize) -> String {
    if i < 26 {
        char::from(b'A' + i as u8).to_string()
    } else {
        format!("F{i}")
    }
}

/// Per-class sample counts; labels must cover `0..K` without gaps.
pub fn class_members(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    members
}

/// `k` independent random holdouts. Each class keeps
/// `round(n * test_fraction)` samples (at least 1, at most n - 1) for
/// testing; fold `i` shuffles with a seed derived from `(seed, i)`.
pub fn make_folds(
    labels: &[usize],
    k: usize,
    seed: u64,
    test_fraction: f64,
) -> Result<Vec<FoldSpec>> {
    if k == 0 {
        return Err(PbnError::Config("at least one fold is required".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(PbnError::Config(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let members = class_members(labels);
    if members.is_empty() {
        return Err(PbnError::EmptyBatch);
    }
    for (class, m) in members.iter().enumerate() {
        if m.len() < MIN_PER_CLASS {
            return Err(PbnError::TooFewSamples {
                class,
                count: m.len(),
                needed: MIN_PER_CLASS,
            });
        }
    }
    Ok((0..k)
        .map(|f| {
            let fold_seed = derive_seed(seed, &[f as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);
            let mut train = Vec::with_capacity(members.len());
            let mut test = Vec::with_capacity(members.len());
            for m in &members {
                let n_test =
                    ((m.len() as f64 * test_fraction).round() as usize).clamp(1, m.len() - 1);
                let mut idx = m.clone();
                idx.shuffle(&mut rng);
                let mut te = idx[..n_test].to_vec();
                let mut tr = idx[n_test..].to_vec();
                te.sort_unstable();
                tr.sort_unstable();
                train.push(tr);
                test.push(te);
            }
            FoldSpec {
                name: fold_name(f),
                seed: fold_seed,
                train,
                test,
            }
        })
        .collect())
}

/// Fold table with header `fold,id,label,role` (role `train` or `test`).
pub fn folds_to_csv(
    folds: &[FoldSpec],
    entries: &[DatasetEntry],
    config_hash: Option<&str>,
) -> String {
    let mut s = super::scores::hash_line(config_hash);
    s.push_str("fold,id,label,role\n");
    for f in folds {
        for (role, sets) in [("train", &f.train), ("test", &f.test)] {
            for &i in sets.iter().flatten() {
                let _ = writeln!(
                    s,
                    "{},{},{},{role}",
                    f.name, entries[i].id, entries[i].label
                );
            }
        }
    }
    s
}

#[derive(Deserialize)]
struct FoldRow {
    fold: String,
    id: String,
    label: usize,
    role: String,
}

/// Import a fold table (for example a published split) against a dataset
/// manifest. Folds keep their order of first appearance.
pub fn folds_from_csv(text: &str, entries: &[DatasetEntry]) -> Result<Vec<FoldSpec>> {
    let index: HashMap<&str, usize> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect();
    let labels: Vec<usize> = entries.iter().map(|e| e.label).collect();
    let k = class_members(&labels).len();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut folds: Vec<FoldSpec> = Vec::new();
    for row in reader.deserialize::<FoldRow>() {
        let row = row.map_err(csv_format)?;
        let &i = index.get(row.id.as_str()).ok_or_else(|| {
            PbnError::Config(format!("fold table names unknown event '{}'", row.id))
        })?;
        if entries[i].label != row.label {
            return Err(PbnError::Config(format!(
                "event '{}' has label {} in the manifest",
                row.id, entries[i].label
            )));
        }
        let pos = match folds.iter().position(|f| f.name == row.fold) {
            Some(p) => p,
            None => {
                folds.push(FoldSpec {
                    name: row.fold.clone(),
                    seed: 0,
                    train: vec![Vec::new(); k],
                    test: vec![Vec::new(); k],
                });
                folds.len() - 1
            }
        };
        match row.role.as_str() {
            "train" => folds[pos].train[row.label].push(i),
            "test" => folds[pos].test[row.label].push(i),
            other => return Err(PbnError::Config(format!("unknown fold role '{other}'"))),
        }
    }
    for f in &mut folds {
        f.train
            .iter_mut()
            .chain(f.test.iter_mut())
            .for_each(|v| v.sort_unstable());
        f.validate(&labels)?;
    }
    Ok(folds)
}
