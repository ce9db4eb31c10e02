use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::scores::{hash_line, ScoreTable};
use crate::error::{PbnError, Result};
use crate::network::{NetworkModel, OutputDensitySpec, OutputKind};

/// Likelihood terms of one (event, class) pair that do not depend on the
/// output density: the accumulated log J and activation terms and the
/// final output `y`.
#[derive(Clone, Debug, PartialEq)]
pub enum CachedTerms {
    Terms {
        projection: f64,
        y: DVector<f64>,
    },
    /// The saddle-point solve failed; the class scores `-inf`.
    Failed,
}

/// Cached per-class likelihood components of a set of test events, so the
/// indicator confidence can be swept without touching the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodCache {
    pub event_ids: Vec<String>,
    pub labels: Vec<usize>,
    /// Output density of each class model; its confidence is replaced
    /// during a sweep.
    pub outputs: Vec<OutputDensitySpec>,
    /// `entries[event][class]`; `None` is a component that was never
    /// computed.
    pub entries: Vec<Vec<Option<CachedTerms>>>,
}

/// One test event: id, true label and flattened input.
#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub id: String,
    pub label: usize,
    pub x: DVector<f64>,
}

impl LikelihoodCache {
    pub fn build(
        models: &[NetworkModel],
        events: &[Event],
        parallel: bool,
    ) -> Result<LikelihoodCache> {
        for m in models {
            if m.output.kind != OutputKind::TedIndicator {
                return Err(PbnError::Config(
                    "self-combination needs models with a class-indicator output".into(),
                ));
            }
        }
        let row = |e: &Event| -> Result<Vec<Option<CachedTerms>>> {
            models
                .iter()
                .map(|m| match m.likelihood_to_depth(&e.x, m.layers.len()) {
                    Ok((projection, y)) => Ok(Some(CachedTerms::Terms { projection, y })),
                    Err(err) if err.is_sampling_failure() => Ok(Some(CachedTerms::Failed)),
                    Err(err) => Err(err),
                })
                .collect()
        };
        let entries = if parallel {
            events.par_iter().map(row).collect::<Result<Vec<_>>>()?
        } else {
            events.iter().map(row).collect::<Result<Vec<_>>>()?
        };
        Ok(LikelihoodCache {
            event_ids: events.iter().map(|e| e.id.clone()).collect(),
            labels: events.iter().map(|e| e.label).collect(),
            outputs: models.iter().map(|m| m.output).collect(),
            entries,
        })
    }

    /// Self-combination scores `projection + log g_m(y; C)` at confidence `c`.
    pub fn scores_at(&self, c: f64) -> Result<ScoreTable> {
        let (n, k) = (self.entries.len(), self.outputs.len());
        let mut scores = DMatrix::zeros(n, k);
        for (i, row) in self.entries.iter().enumerate() {
            if row.len() != k {
                return Err(PbnError::CacheMiss(format!(
                    "'{}' ({} of {k} classes)",
                    self.event_ids[i],
                    row.len()
                )));
            }
            for (j, entry) in row.iter().enumerate() {
                scores[(i, j)] = match entry {
                    None => {
                        return Err(PbnError::CacheMiss(format!(
                            "'{}', class {j}",
                            self.event_ids[i]
                        )))
                    }
                    Some(CachedTerms::Failed) => f64::NEG_INFINITY,
                    Some(CachedTerms::Terms { projection, y }) => {
                        projection + self.outputs[j].with_confidence(c).log_density(y)?
                    }
                };
            }
        }
        ScoreTable::new(
            self.event_ids.clone(),
            self.labels.clone(),
            scores,
            "pbn-da",
        )
    }
}

/// Error count at one sweep parameter value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub errors: usize,
}

/// Re-score the cached components at every confidence in `grid`.
pub fn self_combination_sweep(cache: &LikelihoodCache, grid: &[f64]) -> Result<Vec<SweepPoint>> {
    grid.iter()
        .map(|&c| {
            Ok(SweepPoint {
                value: c,
                errors: cache.scores_at(c)?.evaluate().errors,
            })
        })
        .collect()
}

/// `a + f b` after aligning `b` to the events of `a`; `f = 0` returns `a`
/// unchanged so `-inf` entries of `b` cannot leak in.
pub fn combine(a: &ScoreTable, b: &ScoreTable, f: f64) -> Result<ScoreTable> {
    if a.num_classes() != b.num_classes() {
        return Err(PbnError::Alignment(format!(
            "tables '{}' and '{}' have {} and {} classes",
            a.source,
            b.source,
            a.num_classes(),
            b.num_classes()
        )));
    }
    let b = b.aligned_to(&a.event_ids)?;
    if b.labels != a.labels {
        return Err(PbnError::Alignment(format!(
            "tables '{}' and '{}' disagree on labels",
            a.source, b.source
        )));
    }
    let scores = if f == 0.0 {
        a.scores.clone()
    } else {
        a.scores.zip_map(&b.scores, |x, y| x + f * y)
    };
    ScoreTable::new(a.event_ids.clone(), a.labels.clone(), scores, "ensemble")
}

pub fn ensemble_sweep(a: &ScoreTable, b: &ScoreTable, grid: &[f64]) -> Result<Vec<SweepPoint>> {
    grid.iter()
        .map(|&f| {
            Ok(SweepPoint {
                value: f,
                errors: combine(a, b, f)?.evaluate().errors,
            })
        })
        .collect()
}

/// Error-versus-parameter CSV with header `<column>,errors`.
pub fn sweep_to_csv(points: &[SweepPoint], column: &str, config_hash: Option<&str>) -> String {
    let mut s = hash_line(config_hash);
    let _ = writeln!(s, "{column},errors");
    for p in points {
        let _ = writeln!(s, "{},{}", p.value, p.errors);
    }
    s
}

/// First point with the fewest errors.
pub fn best_point(points: &[SweepPoint]) -> Option<SweepPoint> {
    points
        .iter()
        .copied()
        .reduce(|b, p| if p.errors < b.errors { p } else { b })
}

/// Index of the minimum when it lies strictly inside the grid and is
/// strictly below both end points.
pub fn strict_interior_minimum(points: &[SweepPoint]) -> Option<usize> {
    let n = points.len();
    if n < 3 {
        return None;
    }
    let (i, best) = points
        .iter()
        .enumerate()
        .min_by_key(|(_, p)| p.errors)
        .map(|(i, p)| (i, p.errors))?;
    (i > 0 && i < n - 1 && best < points[0].errors && best < points[n - 1].errors).then_some(i)
}

/// `{0} ∪ {center · 10^(k / per_decade)}` for `|k| <= decades · per_decade`.
pub fn factor_grid(center: f64, decades: usize, per_decade: usize) -> Vec<f64> {
    let half = (decades * per_decade) as i64;
    std::iter::once(0.0)
        .chain((-half..=half).map(|k| center * 10f64.powf(k as f64 / per_decade as f64)))
        .collect()
}
