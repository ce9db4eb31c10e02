//! Synthetic datasets for the demo, the miniature experiment and the sweep
//! checks.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scores::ScoreTable;
use crate::error::{PbnError, Result};
use crate::train::Sample;

/// Two axis-aligned Gaussian clouds in the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloudPair {
    pub center0: [f64; 2],
    pub center1: [f64; 2],
    /// Standard deviation along each axis, shared by both clouds.
    pub spread: [f64; 2],
}

impl Default for CloudPair {
    fn default() -> Self {
        CloudPair {
            center0: [1.0, 0.6],
            center1: [-1.0, -0.4],
            spread: [0.3, 0.3],
        }
    }
}

impl CloudPair {
    /// `n` samples per class, classes interleaved.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Sample> {
        (0..2 * n)
            .map(|i| {
                let label = i % 2;
                let c = if label == 0 {
                    self.center0
                } else {
                    self.center1
                };
                Sample {
                    x: DVector::from_fn(2, |j, _| {
                        c[j] + self.spread[j] * rng.sample::<f64, _>(StandardNormal)
                    }),
                    label,
                }
            })
            .collect()
    }
}

/// Band-pattern sequences: each class is an ordered list of patterns, each
/// pattern lights up a block of bands for `segment` frames, and the whole
/// event starts at a random frame over a noise floor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequenceConfig {
    pub frames: usize,
    pub bands: usize,
    pub segment: usize,
    /// Pattern order per class; pattern `p` covers bands
    /// `[p * w, (p + 1) * w)` with `w = bands / patterns`.
    pub classes: Vec<Vec<usize>>,
    pub amplitude: f64,
    pub noise: f64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            frames: 16,
            bands: 6,
            segment: 4,
            classes: vec![vec![0, 1], vec![1, 0], vec![0, 1, 0]],
            amplitude: 2.0,
            noise: 0.6,
        }
    }
}

impl SequenceConfig {
    fn patterns(&self) -> usize {
        self.classes.iter().flatten().max().map_or(0, |p| p + 1)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patterns();
        if self.classes.is_empty() || self.classes.iter().any(|c| c.is_empty()) {
            return Err(PbnError::Config(
                "every class needs at least one pattern".into(),
            ));
        }
        if p == 0 || self.bands < p {
            return Err(PbnError::Config(format!(
                "{} bands cannot hold {p} patterns",
                self.bands
            )));
        }
        let longest = self.classes.iter().map(|c| c.len()).max().unwrap_or(0) * self.segment;
        if self.segment == 0 || longest > self.frames {
            return Err(PbnError::Config(format!(
                "events of {longest} frames do not fit in {} frames",
                self.frames
            )));
        }
        if !(self.noise > 0.0) {
            return Err(PbnError::Config("noise level must be > 0".into()));
        }
        Ok(())
    }

    /// One `frames x bands` map of class `label`.
    pub fn sample_map<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> DMatrix<f64> {
        let width = self.bands / self.patterns();
        let order = &self.classes[label];
        let onset = rng.gen_range(0..=self.frames - order.len() * self.segment);
        let mut m = DMatrix::from_fn(self.frames, self.bands, |_, _| {
            self.noise * rng.sample::<f64, _>(StandardNormal)
        });
        for (k, &p) in order.iter().enumerate() {
            for t in 0..self.segment {
                for b in p * width..(p + 1) * width {
                    m[(onset + k * self.segment + t, b)] += self.amplitude;
                }
            }
        }
        m
    }

    /// `n` time-major flattened maps per class, classes interleaved.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Sample>> {
        self.validate()?;
        let k = self.num_classes();
        Ok((0..n * k)
            .map(|i| {
                let label = i % k;
                let m = self.sample_map(label, rng);
                Sample {
                    x: DVector::from_iterator(m.len(), m.transpose().iter().copied()),
                    label,
                }
            })
            .collect())
    }
}

fn event_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("ev{i:04}")).collect()
}

/// Two tables that err on disjoint events. Table `a` is right by a margin
/// of 10 except on its planted errors (wrong by 1); table `b` is right by
/// `sqrt(10) / center` except on its own planted errors (wrong by the same
/// amount). Every factor in `(center / sqrt(10), center * sqrt(10))` fixes
/// all planted errors, while `f = 0` and `f -> inf` keep those of `a` and
/// `b` respectively.
pub fn complementary_tables<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    errors_a: usize,
    errors_b: usize,
    center: f64,
    rng: &mut R,
) -> Result<(ScoreTable, ScoreTable)> {
    if k < 2 || errors_a + errors_b > n {
        return Err(PbnError::Config(
            "need k >= 2 and errors_a + errors_b <= n".into(),
        ));
    }
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut role = vec![0u8; n];
    order[..errors_a].iter().for_each(|&i| role[i] = 1);
    order[errors_a..errors_a + errors_b]
        .iter()
        .for_each(|&i| role[i] = 2);
    let beta = 10f64.sqrt() / center;
    let mut a = DMatrix::zeros(n, k);
    let mut b = DMatrix::zeros(n, k);
    for i in 0..n {
        let wrong = (labels[i] + rng.gen_range(1..k)) % k;
        // off-target classes sit a little below zero so only `wrong` competes
        for c in 0..k {
            a[(i, c)] = -20.0 - rng.gen::<f64>();
            b[(i, c)] = -2.0 * beta - beta * rng.gen::<f64>();
        }
        a[(i, labels[i])] = 0.0;
        b[(i, labels[i])] = 0.0;
        a[(i, wrong)] = if role[i] == 1 { 1.0 } else { -10.0 };
        b[(i, wrong)] = if role[i] == 2 { beta } else { -beta };
    }
    let ids = event_ids(n);
    Ok((
        ScoreTable::new(ids.clone(), labels.clone(), a, "table-a")?,
        ScoreTable::new(ids, labels, b, "table-b")?,
    ))
}

/// An independent, weakly informative score table: unit Gaussian noise per
/// class with `strength` added to the true class.
pub fn weak_table<R: Rng + ?Sized>(
    ids: &[String],
    labels: &[usize],
    k: usize,
    strength: f64,
    rng: &mut R,
) -> Result<ScoreTable> {
    let n = labels.len();
    let scores = DMatrix::from_fn(n, k, |i, c| {
        rng.sample::<f64, _>(StandardNormal) + if labels[i] == c { strength } else { 0.0 }
    });
    ScoreTable::new(ids.to_vec(), labels.to_vec(), scores, "external")
}
