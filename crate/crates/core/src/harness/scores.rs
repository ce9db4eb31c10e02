use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use super::csv_format;
use crate::error::{PbnError, Result};
use crate::network::argmax_first;

/// Events x classes classifier scores with the true labels. `-inf` marks a
/// class that could not score the event.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub event_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub scores: DMatrix<f64>,
    pub source: String,
}

/// Error count and confusion matrix of one score table. `confusion[l][p]`
/// counts events of label `l` predicted as `p`; the extra last column counts
/// events no class could score (always errors).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Evaluation {
    pub errors: usize,
    pub total: usize,
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn to_csv(&self, config_hash: Option<&str>) -> String {
        let k = self.confusion.len();
        let mut s = hash_line(config_hash);
        s.push_str("label");
        for p in 0..k {
            let _ = write!(s, ",pred_{p}");
        }
        s.push_str(",unscored\n");
        for (l, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "{l},{}", cells.join(","));
        }
        s
    }
}

pub(crate) fn hash_line(config_hash: Option<&str>) -> String {
    config_hash.map_or_else(String::new, |h| format!("# config_hash={h}\n"))
}

impl ScoreTable {
    pub fn new(
        event_ids: Vec<String>,
        labels: Vec<usize>,
        scores: DMatrix<f64>,
        source: &str,
    ) -> Result<Self> {
        let t = ScoreTable {
            event_ids,
            labels,
            scores,
            source: source.to_string(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.scores.nrows();
        if self.event_ids.len() != n || self.labels.len() != n {
            return Err(PbnError::Dimension(format!(
                "{} ids and {} labels for {n} score rows",
                self.event_ids.len(),
                self.labels.len()
            )));
        }
        let k = self.scores.ncols();
        if let Some(l) = self.labels.iter().find(|l| **l >= k) {
            return Err(PbnError::Config(format!(
                "label {l} outside [0, {k}) in table '{}'",
                self.source
            )));
        }
        if let Some(&v) = self
            .scores
            .iter()
            .find(|v| v.is_nan() || **v == f64::INFINITY)
        {
            return Err(PbnError::Domain {
                value: v,
                domain: "score (finite or -inf)",
            });
        }
        Ok(())
    }

    pub fn num_events(&self) -> usize {
        self.scores.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.scores.ncols()
    }

    /// Highest-scoring class per event, ties to the lowest index; `None`
    /// when every class is `-inf`.
    pub fn predictions(&self) -> Vec<Option<usize>> {
        (0..self.num_events())
            .map(|i| {
                let row: Vec<f64> = self.scores.row(i).iter().copied().collect();
                argmax_first(&row)
            })
            .collect()
    }

    pub fn evaluate(&self) -> Evaluation {
        let k = self.num_classes();
        let mut confusion = vec![vec![0; k + 1]; k];
        let mut errors = 0;
        for (pred, &label) in self.predictions().into_iter().zip(&self.labels) {
            let col = pred.unwrap_or(k);
            confusion[label][col] += 1;
            if pred != Some(label) {
                errors += 1;
            }
        }
        Evaluation {
            errors,
            total: self.num_events(),
            confusion,
        }
    }

    /// The rows of `ids`, in that order; every id must be present.
    pub fn aligned_to(&self, ids: &[String]) -> Result<ScoreTable> {
        let index: HashMap<&str, usize> = self
            .event_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        if index.len() != self.num_events() {
            return Err(PbnError::Alignment(format!(
                "duplicate event ids in table '{}'",
                self.source
            )));
        }
        let rows = ids
            .iter()
            .map(|id| {
                index.get(id.as_str()).copied().ok_or_else(|| {
                    PbnError::Alignment(format!(
                        "event '{id}' missing from table '{}'",
                        self.source
                    ))
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok(ScoreTable {
            event_ids: ids.to_vec(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            scores: self.scores.select_rows(&rows),
            source: self.source.clone(),
        })
    }

    /// Tables over disjoint event sets stacked into one.
    pub fn concat(tables: &[ScoreTable], source: &str) -> Result<ScoreTable> {
        let k = tables.first().map_or(0, |t| t.num_classes());
        if tables.iter().any(|t| t.num_classes() != k) {
            return Err(PbnError::Dimension(
                "score tables disagree on the class count".into(),
            ));
        }
        let n: usize = tables.iter().map(|t| t.num_events()).sum();
        let mut scores = DMatrix::zeros(n, k);
        let mut row = 0;
        for t in tables {
            scores.rows_mut(row, t.num_events()).copy_from(&t.scores);
            row += t.num_events();
        }
        ScoreTable::new(
            tables
                .iter()
                .flat_map(|t| t.event_ids.iter().cloned())
                .collect(),
            tables
                .iter()
                .flat_map(|t| t.labels.iter().copied())
                .collect(),
            scores,
            source,
        )
    }

    /// CSV with header `event_id,label,score_0..`, preceded by a
    /// `# config_hash=` comment line when a hash is given.
    pub fn to_csv(&self, config_hash: Option<&str>) -> String {
        let mut s = hash_line(config_hash);
        s.push_str("event_id,label");
        for c in 0..self.num_classes() {
            let _ = write!(s, ",score_{c}");
        }
        s.push('\n');
        for i in 0..self.num_events() {
            let _ = write!(s, "{},{}", self.event_ids[i], self.labels[i]);
            for v in self.scores.row(i).iter() {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        fs::write(path, self.to_csv(config_hash)).map_err(|e| PbnError::io(path, e))
    }

    pub fn from_csv(text: &str, source: &str) -> Result<ScoreTable> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(csv_format)?.clone();
        if header.len() < 3 || &header[0] != "event_id" || &header[1] != "label" {
            return Err(PbnError::format(
                0,
                "score table header must be event_id,label,score_0,..",
            ));
        }
        let k = header.len() - 2;
        let (mut ids, mut labels, mut values) = (Vec::new(), Vec::new(), Vec::new());
        for rec in reader.records() {
            let rec = rec.map_err(csv_format)?;
            let offset = rec.position().map_or(0, |p| p.byte());
            ids.push(rec[0].to_string());
            labels.push(
                rec[1]
                    .parse::<usize>()
                    .map_err(|e| PbnError::format(offset, format!("label '{}': {e}", &rec[1])))?,
            );
            for v in rec.iter().skip(2) {
                values.push(
                    v.parse::<f64>()
                        .map_err(|e| PbnError::format(offset, format!("score '{v}': {e}")))?,
                );
            }
        }
        let n = ids.len();
        ScoreTable::new(ids, labels, DMatrix::from_row_slice(n, k, &values), source)
    }

    pub fn read_csv(path: &Path, source: &str) -> Result<ScoreTable> {
        let text = fs::read_to_string(path).map_err(|e| PbnError::io(path, e))?;
        ScoreTable::from_csv(&text, source)
    }
}

/// Config hash recorded in an artifact's leading comment line, if any.
pub fn read_config_hash(text: &str) -> Option<&str> {
    text.lines().next()?.strip_prefix("# config_hash=")
}
