//! Hidden Markov models with diagonal-covariance GMM emissions: forward
//! likelihood, Baum-Welch training and the PBN-DA-HMM class score.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{PbnError, Result};
use crate::linalg::log_sum_exp;
use crate::network::{argmax_first, NetworkModel};

const ROW_TOL: f64 = 1e-12;

/// A `T x D` sequence of feature vectors, one row per time step.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    values: DMatrix<f64>,
}

impl FeatureSequence {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(PbnError::Dimension(
                "a feature sequence needs T >= 1 and D >= 1".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PbnError::Config(
                "feature sequence has non-finite entries".into(),
            ));
        }
        Ok(FeatureSequence { values })
    }

    /// Reshape a time-major flattened vector into `len / dim` rows.
    pub fn from_time_major(flat: &DVector<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || !flat.len().is_multiple_of(dim) || flat.is_empty() {
            return Err(PbnError::Dimension(format!(
                "a vector of length {} does not split into frames of {dim}",
                flat.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(
            flat.len() / dim,
            dim,
            flat.as_slice(),
        ))
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    fn frame(&self, t: usize) -> Vec<f64> {
        self.values.row(t).iter().copied().collect()
    }
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub vars: Vec<DVector<f64>>,
}

impl Gmm {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    fn component_log_pdf(&self, c: usize, x: &[f64]) -> f64 {
        let (m, v) = (&self.means[c], &self.vars[c]);
        let mut s = 0.0;
        for d in 0..x.len() {
            let r = x[d] - m[d];
            s += r * r / v[d] + v[d].ln();
        }
        -0.5 * (s + x.len() as f64 * (2.0 * PI).ln())
    }

    /// Per-component `log w_c + log N(x; mu_c, var_c)`.
    fn joint_log(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for c in 0..self.components() {
            out.push(self.weights[c].ln() + self.component_log_pdf(c, x));
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(self.components());
        self.joint_log(x, &mut buf);
        log_sum_exp(&buf)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    #[default]
    Ergodic,
    LeftToRight,
}

/// How the variance floor is applied after each M-step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FloorMode {
    /// `var = max(var, floor)`: the constrained maximizer, keeps EM monotone.
    #[default]
    Constrained,
    /// `var = var + floor`.
    Additive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmmModel {
    pub initial: DVector<f64>,
    /// Row-stochastic, `trans[(i, j)] = P(j | i)`.
    pub trans: DMatrix<f64>,
    pub states: Vec<Gmm>,
    pub floor: f64,
}

impl HmmModel {
    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn dim(&self) -> usize {
        self.states
            .first()
            .map_or(0, |g| g.means.first().map_or(0, |m| m.len()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.states.len();
        if s == 0 || self.initial.len() != s || self.trans.shape() != (s, s) {
            return Err(PbnError::Dimension(format!(
                "inconsistent HMM with {s} states"
            )));
        }
        let stochastic = |row: &[f64]| {
            row.iter().all(|p| (0.0..=1.0).contains(p))
                && (row.iter().sum::<f64>() - 1.0).abs() <= ROW_TOL
        };
        if !stochastic(self.initial.as_slice()) {
            return Err(PbnError::Config(
                "initial probabilities must sum to 1".into(),
            ));
        }
        for i in 0..s {
            let row: Vec<f64> = self.trans.row(i).iter().copied().collect();
            if !stochastic(&row) {
                return Err(PbnError::Config(format!(
                    "transition row {i} must sum to 1"
                )));
            }
        }
        let d = self.dim();
        if d == 0 {
            return Err(PbnError::Dimension("HMM emissions need D >= 1".into()));
        }
        for (i, g) in self.states.iter().enumerate() {
            let c = g.weights.len();
            if c == 0 || g.means.len() != c || g.vars.len() != c {
                return Err(PbnError::Dimension(format!(
                    "state {i} has an inconsistent mixture"
                )));
            }
            if !stochastic(&g.weights) {
                return Err(PbnError::Config(format!(
                    "state {i} mixture weights must sum to 1"
                )));
            }
            for (m, v) in g.means.iter().zip(&g.vars) {
                if m.len() != d || v.len() != d {
                    return Err(PbnError::Dimension(format!(
                        "state {i} component has the wrong dimension"
                    )));
                }
                if m.iter().any(|x| !x.is_finite())
                    || v.iter()
                        .any(|x| !(x.is_finite() && *x > 0.0 && *x >= self.floor))
                {
                    return Err(PbnError::Config(format!(
                        "state {i} has an invalid mean or variance"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_dim(&self, seq: &FeatureSequence) -> Result<()> {
        if seq.dim() != self.dim() {
            return Err(PbnError::Dimension(format!(
                "sequence frames have {} features, HMM expects {}",
                seq.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `log b_s(x_t)` for every state and step, `T x S`.
    fn emission_logs(&self, seq: &FeatureSequence) -> DMatrix<f64> {
        let mut buf = Vec::new();
        DMatrix::from_fn(seq.len(), self.num_states(), |t, s| {
            let x = seq.frame(t);
            self.states[s].joint_log(&x, &mut buf);
            log_sum_exp(&buf)
        })
    }

    /// Draw a state path and a sequence of `len` frames.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        len: usize,
        rng: &mut R,
    ) -> (Vec<usize>, FeatureSequence) {
        let pick = |p: &[f64], rng: &mut R| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, w) in p.iter().enumerate() {
                acc += w;
                if u < acc {
                    return i;
                }
            }
            p.len() - 1
        };
        let d = self.dim();
        let mut path = Vec::with_capacity(len);
        let mut values = DMatrix::zeros(len.max(1), d);
        let mut s = pick(self.initial.as_slice(), rng);
        for t in 0..len.max(1) {
            if t > 0 {
                let row: Vec<f64> = self.trans.row(s).iter().copied().collect();
                s = pick(&row, rng);
            }
            path.push(s);
            let g = &self.states[s];
            let c = pick(&g.weights, rng);
            for k in 0..d {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                values[(t, k)] = g.means[c][k] + g.vars[c][k].sqrt() * z;
            }
        }
        (path, FeatureSequence { values })
    }

    /// Human-readable listing of all parameters.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let comps = self.states.first().map_or(0, |g| g.components());
        let _ = writeln!(
            s,
            "hmm states={} components={} dim={} floor={}",
            self.num_states(),
            comps,
            self.dim(),
            self.floor
        );
        let join = |v: &mut dyn Iterator<Item = &f64>| {
            v.map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")
        };
        let _ = writeln!(s, "initial: {}", join(&mut self.initial.iter()));
        let _ = writeln!(s, "trans:");
        for row in self.trans.row_iter() {
            let _ = writeln!(s, "  {}", join(&mut row.iter()));
        }
        for (i, g) in self.states.iter().enumerate() {
            let _ = writeln!(s, "state {i}");
            for c in 0..g.components() {
                let _ = writeln!(s, "  component {c} weight={:.6}", g.weights[c]);
                let _ = writeln!(s, "    mean: {}", join(&mut g.means[c].iter()));
                let _ = writeln!(s, "    var:  {}", join(&mut g.vars[c].iter()));
            }
        }
        s
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        let comps = self.states.first().map_or(0, |g| g.components());
        w.len_usize(self.num_states());
        w.len_usize(comps);
        w.len_usize(self.dim());
        w.f64(self.floor);
        w.f64s(self.initial.iter().copied());
        w.f64s(self.trans.transpose().iter().copied());
        for g in &self.states {
            for c in 0..comps {
                w.f64(g.weights[c]);
                w.f64s(g.means[c].iter().copied());
                w.f64s(g.vars[c].iter().copied());
            }
        }
    }

    pub(crate) fn decode(r: &mut Reader) -> Result<HmmModel> {
        let at = r.offset();
        let s = r.count(8)?;
        let c = r.count(8)?;
        let d = r.count(8)?;
        if s == 0 || c == 0 || d == 0 {
            return Err(PbnError::format(at, "HMM sizes must be positive"));
        }
        let floor = r.f64()?;
        let initial = DVector::from_vec(r.f64s(s)?);
        let trans = DMatrix::from_row_slice(s, s, &r.f64s(s * s)?);
        let mut states = Vec::with_capacity(s);
        for _ in 0..s {
            let mut g = Gmm {
                weights: Vec::with_capacity(c),
                means: Vec::with_capacity(c),
                vars: Vec::with_capacity(c),
            };
            for _ in 0..c {
                g.weights.push(r.f64()?);
                g.means.push(DVector::from_vec(r.f64s(d)?));
                g.vars.push(DVector::from_vec(r.f64s(d)?));
            }
            states.push(g);
        }
        let hmm = HmmModel {
            initial,
            trans,
            states,
            floor,
        };
        hmm.validate()
            .map_err(|e| PbnError::format(at, format!("invalid HMM: {e}")))?;
        Ok(hmm)
    }
}

/// `log p(seq | hmm)` by the log-space forward recursion.
pub fn forward_log_likelihood(hmm: &HmmModel, seq: &FeatureSequence) -> Result<f64> {
    hmm.check_dim(seq)?;
    let b = hmm.emission_logs(seq);
    let s = hmm.num_states();
    let log_a = hmm.trans.map(f64::ln);
    let mut alpha: Vec<f64> = (0..s).map(|j| hmm.initial[j].ln() + b[(0, j)]).collect();
    let mut next = vec![0.0; s];
    let mut buf = vec![0.0; s];
    for t in 1..seq.len() {
        for j in 0..s {
            for i in 0..s {
                buf[i] = alpha[i] + log_a[(i, j)];
            }
            next[j] = log_sum_exp(&buf) + b[(t, j)];
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    Ok(log_sum_exp(&alpha))
}

/// The same likelihood by the scaled-probability recursion.
pub fn forward_log_likelihood_scaled(hmm: &HmmModel, seq: &FeatureSequence) -> Result<f64> {
    hmm.check_dim(seq)?;
    let b = hmm.emission_logs(seq);
    let s = hmm.num_states();
    let mut total = 0.0;
    let mut alpha = vec![0.0; s];
    for t in 0..seq.len() {
        // factor out the largest emission so the step never underflows
        let shift = (0..s).map(|j| b[(t, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut next = vec![0.0; s];
        for j in 0..s {
            let prior = if t == 0 {
                hmm.initial[j]
            } else {
                (0..s).map(|i| alpha[i] * hmm.trans[(i, j)]).sum()
            };
            next[j] = prior * (b[(t, j)] - shift).exp();
        }
        let c: f64 = next.iter().sum();
        if c <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        total += c.ln() + shift;
        alpha = next.into_iter().map(|a| a / c).collect();
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmmConfig {
    pub states: usize,
    pub components: usize,
    pub floor: f64,
    pub floor_mode: FloorMode,
    pub topology: Topology,
    /// Baum-Welch iterations after the warm-up.
    pub iters: usize,
    /// GMM-only EM iterations on the seeded partition.
    pub warmup_iters: usize,
    pub parallel: bool,
}

impl Default for HmmConfig {
    fn default() -> Self {
        HmmConfig {
            states: 4,
            components: 3,
            floor: 0.12,
            floor_mode: FloorMode::Constrained,
            topology: Topology::Ergodic,
            iters: 20,
            warmup_iters: 5,
            parallel: false,
        }
    }
}

impl HmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.states == 0 || self.components == 0 {
            return Err(PbnError::Config(
                "HMM needs at least one state and one component".into(),
            ));
        }
        if !(self.floor > 0.0) || !self.floor.is_finite() {
            return Err(PbnError::Config(format!(
                "variance floor must be > 0 (got {})",
                self.floor
            )));
        }
        Ok(())
    }
}

/// Statistics gathered by Baum-Welch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaumWelchReport {
    /// Total log-likelihood before each M-step, then after the last one.
    pub log_likelihood: Vec<f64>,
    /// Components re-seeded after their weight underflowed.
    pub reseeded: usize,
}

struct Stats {
    ll: f64,
    gamma0: Vec<f64>,
    xi: DMatrix<f64>,
    /// Per state and component: occupancy, sum x, sum x^2.
    occ: Vec<Vec<f64>>,
    sx: Vec<Vec<DVector<f64>>>,
    sxx: Vec<Vec<DVector<f64>>>,
}

impl Stats {
    fn zeros(s: usize, c: usize, d: usize) -> Self {
        Stats {
            ll: 0.0,
            gamma0: vec![0.0; s],
            xi: DMatrix::zeros(s, s),
            occ: vec![vec![0.0; c]; s],
            sx: vec![vec![DVector::zeros(d); c]; s],
            sxx: vec![vec![DVector::zeros(d); c]; s],
        }
    }

    fn add(&mut self, o: Stats) {
        self.ll += o.ll;
        for (a, b) in self.gamma0.iter_mut().zip(o.gamma0) {
            *a += b;
        }
        self.xi += o.xi;
        for s in 0..self.occ.len() {
            for c in 0..self.occ[s].len() {
                self.occ[s][c] += o.occ[s][c];
                self.sx[s][c] += &o.sx[s][c];
                self.sxx[s][c] += &o.sxx[s][c];
            }
        }
    }
}

fn e_step(hmm: &HmmModel, seq: &FeatureSequence) -> Stats {
    let (s, c, d, t_len) = (
        hmm.num_states(),
        hmm.states[0].components(),
        hmm.dim(),
        seq.len(),
    );
    let mut joint = vec![vec![Vec::new(); s]; t_len];
    let mut b = DMatrix::zeros(t_len, s);
    for t in 0..t_len {
        let x = seq.frame(t);
        for j in 0..s {
            hmm.states[j].joint_log(&x, &mut joint[t][j]);
            b[(t, j)] = log_sum_exp(&joint[t][j]);
        }
    }
    let log_a = hmm.trans.map(f64::ln);
    let mut alpha = DMatrix::from_element(t_len, s, f64::NEG_INFINITY);
    let mut beta = DMatrix::zeros(t_len, s);
    let mut buf = vec![0.0; s];
    for j in 0..s {
        alpha[(0, j)] = hmm.initial[j].ln() + b[(0, j)];
    }
    for t in 1..t_len {
        for j in 0..s {
            for i in 0..s {
                buf[i] = alpha[(t - 1, i)] + log_a[(i, j)];
            }
            alpha[(t, j)] = log_sum_exp(&buf) + b[(t, j)];
        }
    }
    for t in (0..t_len - 1).rev() {
        for i in 0..s {
            for j in 0..s {
                buf[j] = log_a[(i, j)] + b[(t + 1, j)] + beta[(t + 1, j)];
            }
            beta[(t, i)] = log_sum_exp(&buf);
        }
    }
    let last: Vec<f64> = alpha.row(t_len - 1).iter().copied().collect();
    let ll = log_sum_exp(&last);
    let mut st = Stats::zeros(s, c, d);
    st.ll = ll;
    for t in 0..t_len {
        let x = DVector::from_vec(seq.frame(t));
        let x2 = x.component_mul(&x);
        for j in 0..s {
            let gamma = (alpha[(t, j)] + beta[(t, j)] - ll).exp();
            if t == 0 {
                st.gamma0[j] = gamma;
            }
            if gamma == 0.0 {
                continue;
            }
            for k in 0..c {
                let r = gamma * (joint[t][j][k] - b[(t, j)]).exp();
                st.occ[j][k] += r;
                st.sx[j][k].axpy(r, &x, 1.0);
                st.sxx[j][k].axpy(r, &x2, 1.0);
            }
        }
        if t + 1 < t_len {
            for i in 0..s {
                for j in 0..s {
                    st.xi[(i, j)] +=
                        (alpha[(t, i)] + log_a[(i, j)] + b[(t + 1, j)] + beta[(t + 1, j)] - ll)
                            .exp();
                }
            }
        }
    }
    st
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn apply_floor(v: f64, floor: f64, mode: FloorMode) -> f64 {
    match mode {
        FloorMode::Constrained => v.max(floor),
        FloorMode::Additive => v.max(0.0) + floor,
    }
}

const UNDERFLOW: f64 = 1e-10;

/// Mixture M-step from accumulated statistics. Components whose occupancy
/// underflows are re-seeded on a random frame.
#[allow(clippy::too_many_arguments)]
fn update_gmm<R: Rng + ?Sized>(
    g: &mut Gmm,
    occ: &[f64],
    sx: &[DVector<f64>],
    sxx: &[DVector<f64>],
    floor: f64,
    mode: FloorMode,
    frames: &[DVector<f64>],
    rng: &mut R,
) -> usize {
    let total: f64 = occ.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut reseeded = 0;
    for c in 0..g.components() {
        if occ[c] <= UNDERFLOW * total && !frames.is_empty() {
            let x = &frames[rng.gen_range(0..frames.len())];
            g.means[c] = x.clone();
            g.vars[c] = DVector::from_element(x.len(), apply_floor(1.0, floor, mode));
            g.weights[c] = 1e-3;
            reseeded += 1;
            continue;
        }
        let mean = &sx[c] / occ[c];
        let var = (&sxx[c] / occ[c]) - mean.component_mul(&mean);
        g.vars[c] = var.map(|v| apply_floor(v, floor, mode));
        g.means[c] = mean;
        g.weights[c] = occ[c] / total;
    }
    normalize(&mut g.weights);
    reseeded
}

/// EM re-estimation of every parameter for `iters` iterations.
pub fn baum_welch<R: Rng + ?Sized>(
    hmm: &HmmModel,
    data: &[FeatureSequence],
    iters: usize,
    cfg: &HmmConfig,
    rng: &mut R,
) -> Result<(HmmModel, BaumWelchReport)> {
    cfg.validate()?;
    hmm.validate()?;
    if data.is_empty() {
        return Err(PbnError::EmptyBatch);
    }
    for seq in data {
        hmm.check_dim(seq)?;
    }
    let frames: Vec<DVector<f64>> = data
        .iter()
        .flat_map(|q| (0..q.len()).map(move |t| DVector::from_vec(q.frame(t))))
        .collect();
    let mut model = hmm.clone();
    model.floor = cfg.floor;
    let mut report = BaumWelchReport::default();
    let (s, c, d) = (
        model.num_states(),
        model.states[0].components(),
        model.dim(),
    );
    for it in 0..=iters {
        let per_seq: Vec<Stats> = if cfg.parallel {
            data.par_iter().map(|q| e_step(&model, q)).collect()
        } else {
            data.iter().map(|q| e_step(&model, q)).collect()
        };
        let mut st = Stats::zeros(s, c, d);
        for p in per_seq {
            st.add(p);
        }
        if !st.ll.is_finite() {
            return Err(PbnError::Config(format!(
                "Baum-Welch log-likelihood became {} at iteration {it}",
                st.ll
            )));
        }
        report.log_likelihood.push(st.ll);
        if it == iters {
            break;
        }
        let mut initial = st.gamma0.clone();
        normalize(&mut initial);
        model.initial = DVector::from_vec(initial);
        for i in 0..s {
            let mut row: Vec<f64> = st.xi.row(i).iter().copied().collect();
            if row.iter().sum::<f64>() > 0.0 {
                normalize(&mut row);
                for j in 0..s {
                    model.trans[(i, j)] = row[j];
                }
            }
        }
        for j in 0..s {
            report.reseeded += update_gmm(
                &mut model.states[j],
                &st.occ[j],
                &st.sx[j],
                &st.sxx[j],
                cfg.floor,
                cfg.floor_mode,
                &frames,
                rng,
            );
        }
    }
    Ok((model, report))
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

/// Lloyd's k-means with k-means++ seeding; returns centers and assignments.
pub fn kmeans<R: Rng + ?Sized>(
    points: &[DVector<f64>],
    k: usize,
    iters: usize,
    rng: &mut R,
) -> (Vec<DVector<f64>>, Vec<usize>) {
    let n = points.len();
    let mut centers = vec![points[rng.gen_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centers.push(points[next].clone());
    }
    let mut assign = vec![0; n];
    for _ in 0..iters {
        for (i, p) in points.iter().enumerate() {
            assign[i] = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap();
        }
        let mut sums = vec![DVector::zeros(points[0].len()); k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            sums[a] += p;
            counts[a] += 1;
        }
        for j in 0..k {
            centers[j] = if counts[j] > 0 {
                &sums[j] / counts[j] as f64
            } else {
                points[rng.gen_range(0..n)].clone()
            };
        }
    }
    (centers, assign)
}

fn gmm_from_frames<R: Rng + ?Sized>(frames: &[DVector<f64>], cfg: &HmmConfig, rng: &mut R) -> Gmm {
    let d = frames[0].len();
    let (centers, assign) = kmeans(frames, cfg.components, 10, rng);
    let mut g = Gmm {
        weights: vec![1.0 / cfg.components as f64; cfg.components],
        means: centers,
        vars: vec![DVector::zeros(d); cfg.components],
    };
    for c in 0..cfg.components {
        let members: Vec<&DVector<f64>> = frames
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == c)
            .map(|(f, _)| f)
            .collect();
        let var = if members.len() > 1 {
            let mut v = DVector::zeros(d);
            for m in &members {
                let r = *m - &g.means[c];
                v += r.component_mul(&r);
            }
            v / members.len() as f64
        } else {
            DVector::from_element(d, 1.0)
        };
        g.vars[c] = var.map(|v| apply_floor(v, cfg.floor, cfg.floor_mode));
    }
    for _ in 0..cfg.warmup_iters {
        let mut occ = vec![0.0; cfg.components];
        let mut sx = vec![DVector::zeros(d); cfg.components];
        let mut sxx = vec![DVector::zeros(d); cfg.components];
        let mut buf = Vec::new();
        for f in frames {
            g.joint_log(f.as_slice(), &mut buf);
            let total = log_sum_exp(&buf);
            let x2 = f.component_mul(f);
            for c in 0..cfg.components {
                let r = (buf[c] - total).exp();
                occ[c] += r;
                sx[c].axpy(r, f, 1.0);
                sxx[c].axpy(r, &x2, 1.0);
            }
        }
        update_gmm(
            &mut g,
            &occ,
            &sx,
            &sxx,
            cfg.floor,
            cfg.floor_mode,
            frames,
            rng,
        );
    }
    g
}

/// Seed an HMM from data: frames are split among states (k-means for an
/// ergodic chain, uniform time segments for left-to-right), each state's
/// GMM is seeded by k-means and warmed up by GMM-only EM.
pub fn init_hmm<R: Rng + ?Sized>(
    data: &[FeatureSequence],
    cfg: &HmmConfig,
    rng: &mut R,
) -> Result<HmmModel> {
    cfg.validate()?;
    let first = data.first().ok_or(PbnError::EmptyBatch)?;
    let d = first.dim();
    if data.iter().any(|q| q.dim() != d) {
        return Err(PbnError::Dimension(
            "sequences disagree on the feature dimension".into(),
        ));
    }
    let s = cfg.states;
    let mut by_state: Vec<Vec<DVector<f64>>> = vec![Vec::new(); s];
    match cfg.topology {
        Topology::Ergodic => {
            let frames: Vec<DVector<f64>> = data
                .iter()
                .flat_map(|q| (0..q.len()).map(move |t| DVector::from_vec(q.frame(t))))
                .collect();
            let (_, assign) = kmeans(&frames, s, 10, rng);
            for (f, a) in frames.into_iter().zip(assign) {
                by_state[a].push(f);
            }
        }
        Topology::LeftToRight => {
            for q in data {
                for t in 0..q.len() {
                    by_state[t * s / q.len()].push(DVector::from_vec(q.frame(t)));
                }
            }
        }
    }
    let all: Vec<DVector<f64>> = by_state.iter().flatten().cloned().collect();
    let states = by_state
        .iter()
        .map(|frames| gmm_from_frames(if frames.is_empty() { &all } else { frames }, cfg, rng))
        .collect();
    let (initial, trans) = match cfg.topology {
        Topology::Ergodic => (
            DVector::from_element(s, 1.0 / s as f64),
            DMatrix::from_element(s, s, 1.0 / s as f64),
        ),
        Topology::LeftToRight => {
            let mut a = DMatrix::zeros(s, s);
            for i in 0..s {
                if i + 1 < s {
                    a[(i, i)] = 0.5;
                    a[(i, i + 1)] = 0.5;
                } else {
                    a[(i, i)] = 1.0;
                }
            }
            let mut p = DVector::zeros(s);
            p[0] = 1.0;
            (p, a)
        }
    };
    let hmm = HmmModel {
        initial,
        trans,
        states,
        floor: cfg.floor,
    };
    hmm.validate()?;
    Ok(hmm)
}

/// Seed, warm up and run Baum-Welch.
pub fn train_hmm<R: Rng + ?Sized>(
    data: &[FeatureSequence],
    cfg: &HmmConfig,
    rng: &mut R,
) -> Result<(HmmModel, BaumWelchReport)> {
    let init = init_hmm(data, cfg, rng)?;
    baum_welch(&init, data, cfg.iters, cfg, rng)
}

/// `sum_{layers < tap} log J + log p_hmm(tapped sequence)` per class. A
/// class whose saddle-point solve fails scores `-inf`.
pub fn pbn_da_hmm_score(models: &[(NetworkModel, HmmModel)], x: &DVector<f64>) -> Result<Vec<f64>> {
    models
        .iter()
        .map(|(net, hmm)| {
            let tap = net
                .tap
                .ok_or_else(|| PbnError::Config("PBN-DA-HMM scoring needs a tap depth".into()))?;
            let (proj, h) = match net.likelihood_to_depth(x, tap) {
                Ok(v) => v,
                Err(e) if e.is_sampling_failure() => return Ok(f64::NEG_INFINITY),
                Err(e) => return Err(e),
            };
            let seq = FeatureSequence::from_time_major(&h, hmm.dim())?;
            Ok(proj + forward_log_likelihood(hmm, &seq)?)
        })
        .collect()
}

/// Highest PBN-DA-HMM score, ties to the lowest class.
pub fn classify_hmm(
    models: &[(NetworkModel, HmmModel)],
    x: &DVector<f64>,
) -> Result<(usize, Vec<f64>)> {
    let scores = pbn_da_hmm_score(models, x)?;
    let best = argmax_first(&scores).ok_or(PbnError::Classification)?;
    Ok((best, scores))
}
