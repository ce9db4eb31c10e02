//! A single projection layer: forward map, saddle-point solve of
//! `W' lambda(W h) = z`, conditional mean, saddle-point density of the
//! feature under the MaxEnt prior, the log J-function and manifold sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::conv::Conv2d;
use crate::error::{PbnError, Result};
use crate::expfam::{DomainKind, ExpFamilySpec, Family};
use crate::linalg::{column_basis, weighted_gram, SpdFactor};

const MAX_NEWTON_ITERATIONS: usize = 200;
const MAX_HALVINGS: usize = 60;
/// Natural parameters of an exponential prior are kept below `0.5 - margin`.
const EXPONENTIAL_MARGIN: f64 = 1e-6;
/// Inputs on the domain boundary are pulled inside by this much before the
/// J-function is evaluated.
pub const BOUNDARY_EPS: f64 = 1e-9;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Elementwise map applied after the bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Linear,
    Family(Family),
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Family(f) => f.name(),
        }
    }

    pub fn from_name(name: &str) -> Option<Activation> {
        if name == "linear" {
            Some(Activation::Linear)
        } else {
            Family::from_name(name).map(Activation::Family)
        }
    }

    /// The input family a downstream layer must use to match this
    /// activation's image.
    pub fn downstream_family(self) -> Family {
        match self {
            Activation::Linear => Family::Gaussian,
            Activation::Family(f) => f,
        }
    }

    pub fn apply(self, u: f64) -> Result<f64> {
        match self {
            Activation::Linear => Ok(u),
            Activation::Family(f) => f.spec().activation(u),
        }
    }

    /// Inverse of [`Activation::apply`].
    pub fn invert(self, y: f64) -> Result<f64> {
        match self {
            Activation::Linear => Ok(y),
            Activation::Family(f) => f.spec().activation_inverse(y),
        }
    }

    /// `(y, log dy/du, d/du log dy/du)` at `u`.
    pub(crate) fn eval_with_log_slope(self, u: f64) -> Result<(f64, f64, f64)> {
        match self {
            Activation::Linear => Ok((u, 0.0, 0.0)),
            Activation::Family(f) => {
                let c = f.spec().cumulants(u)?;
                Ok((c.mean, c.var.ln(), c.third / c.var))
            }
        }
    }
}

/// How a layer draws an input given its feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Independent draws from the surrogate density at `W h_z`.
    Surrogate,
    /// Exact draw from the Gaussian prior restricted to the level set.
    ExactGaussian,
}

/// Order of the saddle-point approximation of the feature density.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpaOrder {
    /// Leading term only.
    #[default]
    First,
    /// Leading term times the second-order correction factor.
    Corrected,
}

/// A dimension-reducing layer `y = act(b + W' x)`, with `W` of shape N x M.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub input_family: ExpFamilySpec,
    pub activation: Activation,
    /// Weight sharing, when `w` is a materialized convolution.
    pub conv: Option<Conv2d>,
}

/// Result of the saddle-point solve for one feature vector.
#[derive(Clone, Debug)]
pub struct SaddleSolution {
    pub h: DVector<f64>,
    /// `lambda(W h)`: the conditional mean.
    pub xbar: DVector<f64>,
    /// `log det(W' diag(lambda'(W h)) W)`.
    pub sigma_logdet: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Final `|W' lambda(W h) - z|_inf`.
    pub residual: f64,
}

/// Solver state kept for density and gradient evaluation.
pub(crate) struct Saddle {
    pub h: DVector<f64>,
    /// `W h`.
    pub a: DVector<f64>,
    pub mean: DVector<f64>,
    pub var: Vec<f64>,
    pub factor: SpdFactor,
    pub iterations: usize,
    pub residual: f64,
}

/// Value and gradients of the log J-function.
#[derive(Clone, Debug)]
pub struct LogJGrad {
    pub value: f64,
    pub d_w: DMatrix<f64>,
    pub d_x: DVector<f64>,
}

impl LayerSpec {
    /// Build a layer; `w` is N x M with N >= M >= 1 and `b` has length M.
    pub fn new(
        w: DMatrix<f64>,
        b: DVector<f64>,
        input_family: Family,
        activation: Activation,
    ) -> Result<LayerSpec> {
        let (n, m) = w.shape();
        if m == 0 || n < m {
            return Err(PbnError::Dimension(format!(
                "layer weight is {n}x{m}; need N >= M >= 1"
            )));
        }
        if b.len() != m {
            return Err(PbnError::Dimension(format!(
                "bias has length {}, expected {m}",
                b.len()
            )));
        }
        if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(PbnError::Config("non-finite layer parameter".into()));
        }
        Ok(LayerSpec {
            w,
            b,
            input_family: input_family.spec(),
            activation,
            conv: None,
        })
    }

    /// A convolutional layer with a per-channel bias.
    pub fn convolutional(
        geometry: Conv2d,
        kernel: &[f64],
        channel_bias: &[f64],
        input_family: Family,
        activation: Activation,
    ) -> Result<LayerSpec> {
        geometry.validate()?;
        if channel_bias.len() != geometry.out_ch {
            return Err(PbnError::Dimension(format!(
                "channel bias has length {}, expected {}",
                channel_bias.len(),
                geometry.out_ch
            )));
        }
        let w = geometry.materialize(kernel)?;
        let b = geometry.expand_bias(channel_bias);
        let mut layer = LayerSpec::new(w, b, input_family, activation)?;
        layer.conv = Some(geometry);
        Ok(layer)
    }

    pub fn n_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.w.ncols()
    }

    /// Smallest singular value above `1e-10` times the largest.
    pub fn is_full_rank(&self) -> bool {
        let sv = self.w.clone().svd(false, false).singular_values;
        let max = sv.max();
        sv.min() > 1e-10 * max
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n_in() {
            return Err(PbnError::Dimension(format!(
                "input has length {}, layer expects {}",
                x.len(),
                self.n_in()
            )));
        }
        let domain = self.input_family.domain;
        match x.iter().find(|v| !domain.contains(**v)) {
            Some(&value) => Err(PbnError::Domain {
                value,
                domain: domain.name(),
            }),
            None => Ok(()),
        }
    }

    fn check_feature(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.n_out() {
            return Err(PbnError::Dimension(format!(
                "feature has length {}, layer produces {}",
                z.len(),
                self.n_out()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(PbnError::Config("non-finite feature".into()));
        }
        Ok(())
    }

    /// `z = W' x` and `y = act(b + z)`.
    pub fn forward(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_input(x)?;
        let z = self.w.tr_mul(x);
        let mut y = &self.b + &z;
        for v in y.iter_mut() {
            *v = self.activation.apply(*v)?;
        }
        Ok((z, y))
    }

    fn moments(&self, a: &DVector<f64>) -> (DVector<f64>, Vec<f64>) {
        let mut mean = DVector::zeros(a.len());
        let mut var = Vec::with_capacity(a.len());
        for (i, &ai) in a.iter().enumerate() {
            let (m, v) = self.input_family.mean_var_unchecked(ai);
            mean[i] = m;
            var.push(v);
        }
        (mean, var)
    }

    /// Newton solve of `W' lambda(W h) = z` from `h = 0`. Accepted residual
    /// norms are appended to `trace` when given.
    pub(crate) fn saddle(
        &self,
        z: &DVector<f64>,
        mut trace: Option<&mut Vec<f64>>,
    ) -> Result<Saddle> {
        self.check_feature(z)?;
        let m = self.n_out();
        let scale = 1.0 + z.amax();
        let polish = 1e-13 * scale;
        let accept = 1e-9 * scale;
        let exponential = self.input_family.family == Family::Exponential;
        let cap = 0.5 - EXPONENTIAL_MARGIN;

        let mut h = DVector::zeros(m);
        let mut a = DVector::zeros(self.n_in());
        let (mut mean, mut var) = self.moments(&a);
        let mut f = self.w.tr_mul(&mean) - z;
        let mut fnorm = f.norm();
        if let Some(t) = trace.as_deref_mut() {
            t.push(fnorm);
        }
        let mut iterations = 0;
        let mut factor = None;
        while iterations < MAX_NEWTON_ITERATIONS && f.amax() > polish {
            let Some(fac) = SpdFactor::new(weighted_gram(&self.w, &var)) else {
                break;
            };
            let d = fac.solve(&(-&f));
            factor = Some(fac);
            let wd = &self.w * &d;
            let mut t: f64 = 1.0;
            if exponential {
                for (ai, di) in a.iter().zip(wd.iter()) {
                    if *di > 0.0 {
                        t = t.min(((cap - ai) / di).max(0.0));
                    }
                }
            }
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                if t <= 0.0 {
                    break;
                }
                let h_new = &h + t * &d;
                let a_new = &self.w * &h_new;
                let (mean_new, var_new) = self.moments(&a_new);
                let f_new = self.w.tr_mul(&mean_new) - z;
                let n_new = f_new.norm();
                if n_new.is_finite() && n_new < fnorm && var_new.iter().all(|v| *v > 0.0) {
                    accepted = Some((h_new, a_new, mean_new, var_new, f_new, n_new));
                    break;
                }
                t *= 0.5;
            }
            let Some((h_new, a_new, mean_new, var_new, f_new, n_new)) = accepted else {
                break;
            };
            h = h_new;
            a = a_new;
            mean = mean_new;
            var = var_new;
            f = f_new;
            fnorm = n_new;
            iterations += 1;
            factor = None;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(fnorm);
            }
        }
        let residual = f.amax();
        let failure = || PbnError::SamplingFailure {
            layer: None,
            residual,
            iterations,
        };
        if !(residual <= accept) {
            return Err(failure());
        }
        let factor = match factor {
            Some(fac) => fac,
            None => SpdFactor::new(weighted_gram(&self.w, &var)).ok_or_else(failure)?,
        };
        Ok(Saddle {
            h,
            a,
            mean,
            var,
            factor,
            iterations,
            residual,
        })
    }

    /// Solve `W' lambda(W h) = z` for the saddle point `h_z`.
    pub fn solve_saddle(&self, z: &DVector<f64>) -> Result<SaddleSolution> {
        self.solve_saddle_traced(z).0
    }

    /// As [`LayerSpec::solve_saddle`], also returning the residual 2-norm
    /// after every accepted Newton step (starting with the initial one).
    pub fn solve_saddle_traced(&self, z: &DVector<f64>) -> (Result<SaddleSolution>, Vec<f64>) {
        let mut trace = Vec::new();
        let res = self.saddle(z, Some(&mut trace)).map(|s| SaddleSolution {
            sigma_logdet: s.factor.log_det(),
            h: s.h,
            xbar: s.mean,
            converged: true,
            iterations: s.iterations,
            residual: s.residual,
        });
        (res, trace)
    }

    /// The MaxEnt right inverse `lambda(W h_z)`.
    pub fn conditional_mean(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.saddle(z, None)?.mean)
    }

    /// First-order saddle-point approximation of `log p0(z)`.
    pub fn log_p0z_spa(&self, z: &DVector<f64>) -> Result<f64> {
        self.log_p0z(z, SpaOrder::First)
    }

    pub fn log_p0z(&self, z: &DVector<f64>, order: SpaOrder) -> Result<f64> {
        let s = self.saddle(z, None)?;
        Ok(self.spa_value(&s, z, order))
    }

    fn spa_value(&self, s: &Saddle, z: &DVector<f64>, order: SpaOrder) -> f64 {
        let m = self.n_out() as f64;
        let k: f64 =
            s.a.iter()
                .map(|&ai| self.input_family.cumulants_unchecked(ai).cgf)
                .sum();
        let first = k - s.h.dot(z) - 0.5 * s.factor.log_det() - m * HALF_LN_2PI;
        match order {
            SpaOrder::First => first,
            SpaOrder::Corrected => {
                let c = 1.0 + self.spa_correction(s);
                if c > 0.0 {
                    first + c.ln()
                } else {
                    first
                }
            }
        }
    }

    /// `rho4 / 8 - rho13 / 8 - rho23 / 12` with `V = W Sigma^-1 W'`.
    fn spa_correction(&self, s: &Saddle) -> f64 {
        let n = self.n_in();
        let sinv_wt = s.factor.solve_mat(&self.w.transpose());
        let v = &self.w * &sinv_wt;
        let cum: Vec<_> =
            s.a.iter()
                .map(|&ai| self.input_family.cumulants_unchecked(ai))
                .collect();
        let mut rho4 = 0.0;
        let mut u = DVector::zeros(n);
        for p in 0..n {
            rho4 += cum[p].fourth * v[(p, p)] * v[(p, p)];
            u[p] = cum[p].third * v[(p, p)];
        }
        let rho13 = u.dot(&(&v * &u));
        let mut rho23 = 0.0;
        for p in 0..n {
            for q in 0..n {
                rho23 += cum[p].third * cum[q].third * v[(p, q)].powi(3);
            }
        }
        rho4 / 8.0 - rho13 / 8.0 - rho23 / 12.0
    }

    fn prior_log_density(&self, x: &DVector<f64>) -> f64 {
        x.iter()
            .map(|&xi| self.input_family.prior_log_density_and_grad(xi).0)
            .sum()
    }

    fn interior(&self, x: &DVector<f64>) -> DVector<f64> {
        let domain = self.input_family.domain;
        if domain == DomainKind::Reals {
            return x.clone();
        }
        x.map(|v| domain.clamp_interior(v, BOUNDARY_EPS))
    }

    /// `log p0(x) - log p0(W' x)` with the first-order saddle-point density.
    pub fn log_j(&self, x: &DVector<f64>) -> Result<f64> {
        self.log_j_with(x, SpaOrder::First)
    }

    pub fn log_j_with(&self, x: &DVector<f64>, order: SpaOrder) -> Result<f64> {
        self.check_input(x)?;
        let x = self.interior(x);
        let z = self.w.tr_mul(&x);
        Ok(self.prior_log_density(&x) - self.log_p0z(&z, order)?)
    }

    /// Log J-function with its gradients in `W` and `x` (first-order SPA).
    pub fn log_j_grad(&self, x: &DVector<f64>) -> Result<LogJGrad> {
        self.check_input(x)?;
        let x = self.interior(x);
        let z = self.w.tr_mul(&x);
        let s = self.saddle(&z, None)?;
        let spa = self.spa_value(&s, &z, SpaOrder::First);

        let n = self.n_in();
        let mut lp = 0.0;
        let mut dlp = DVector::zeros(n);
        for i in 0..n {
            let (v, g) = self.input_family.prior_log_density_and_grad(x[i]);
            lp += v;
            dlp[i] = g;
        }

        // Sigma^-1 W' (M x N) and the diagonal of W Sigma^-1 W'.
        let sinv_wt = s.factor.solve_mat(&self.w.transpose());
        let mut r = DVector::zeros(n);
        for p in 0..n {
            let q = self.w.row(p).dot(&sinv_wt.column(p).transpose());
            let third = self.input_family.cumulants_unchecked(s.a[p]).third;
            r[p] = 0.5 * third * q;
        }
        let v = &sinv_wt * &r;
        let ds_dz = -(&s.h + &v);
        let wv = &self.w * &v;
        let mut ds_dw = &s.mean * s.h.transpose() - &r * s.h.transpose() + &s.mean * v.transpose();
        let mut dw_h = DVector::zeros(n);
        for p in 0..n {
            dw_h[p] = s.var[p] * wv[p];
        }
        ds_dw += &dw_h * s.h.transpose();
        let mut d_sinv = sinv_wt.transpose();
        for (p, mut row) in d_sinv.row_iter_mut().enumerate() {
            row *= s.var[p];
        }
        ds_dw -= d_sinv;

        let d_w = -(ds_dw + &x * ds_dz.transpose());
        let d_x = dlp - &self.w * &ds_dz;
        Ok(LogJGrad {
            value: lp - spa,
            d_w,
            d_x,
        })
    }

    /// `sum log act'(u)` and its gradient in `u`; zero for a linear layer.
    pub fn activation_log_jacobian(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let mut total = 0.0;
        let mut grad = DVector::zeros(u.len());
        for (i, &ui) in u.iter().enumerate() {
            let (_, ls, dls) = self.activation.eval_with_log_slope(ui)?;
            total += ls;
            grad[i] = dls;
        }
        Ok((total, grad))
    }

    /// Draw an input on (or, for the surrogate, around) the level set of `z`.
    pub fn sample_given_z<R: Rng + ?Sized>(
        &self,
        z: &DVector<f64>,
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        if mode == SampleMode::ExactGaussian && self.input_family.family != Family::Gaussian {
            return Err(PbnError::Mode);
        }
        let s = self.saddle(z, None)?;
        match mode {
            SampleMode::Surrogate => {
                let mut x = DVector::zeros(self.n_in());
                for (i, &ai) in s.a.iter().enumerate() {
                    x[i] = self.input_family.sample(ai, rng)?;
                }
                Ok(x)
            }
            SampleMode::ExactGaussian => {
                let q = column_basis(&self.w);
                let e = DVector::from_fn(self.n_in(), |_, _| rng.sample::<f64, _>(StandardNormal));
                let null = &e - &q * q.tr_mul(&e);
                Ok(s.mean + null)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Closed-form log density of `N(0, W'W)` at `z`, used by the Gaussian group.
    fn gaussian_feature_log_density(w: &DMatrix<f64>, z: &DVector<f64>) -> Option<f64> {
        let gram = w.tr_mul(w);
        let f = SpdFactor::new(gram)?;
        let m = z.len() as f64;
        Some(-0.5 * z.dot(&f.solve(z)) - 0.5 * f.log_det() - m * 0.5 * (2.0 * PI).ln())
    }

    fn ted_pair() -> LayerSpec {
        LayerSpec::new(
            DMatrix::from_element(2, 1, 1.0),
            DVector::zeros(1),
            Family::TruncExponential,
            Activation::Linear,
        )
        .unwrap()
    }

    fn random_layer(family: Family, n: usize, m: usize, seed: u64) -> LayerSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DMatrix::from_fn(n, m, |_, _| {
            rng.sample::<f64, _>(StandardNormal) / (n as f64).sqrt()
        });
        LayerSpec::new(w, DVector::zeros(m), family, Activation::Linear).unwrap()
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        let w = DMatrix::zeros(2, 3);
        assert!(
            LayerSpec::new(w, DVector::zeros(3), Family::Gaussian, Activation::Linear).is_err()
        );
        let w = DMatrix::zeros(3, 2);
        assert!(
            LayerSpec::new(w, DVector::zeros(1), Family::Gaussian, Activation::Linear).is_err()
        );
    }

    #[test]
    fn forward_padded_identity() {
        let w = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let l = LayerSpec::new(w, DVector::zeros(2), Family::Gaussian, Activation::Linear).unwrap();
        let (z, y) = l.forward(&DVector::from_vec(vec![1.0, 2.0, 5.0])).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 2.0]);
        assert_eq!(y.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_ted_activation() {
        let l = LayerSpec::new(
            DMatrix::from_element(2, 1, 1.0),
            DVector::zeros(1),
            Family::TruncExponential,
            Activation::Family(Family::TruncExponential),
        )
        .unwrap();
        let (z, y) = l.forward(&DVector::from_vec(vec![0.5, 0.5])).unwrap();
        assert_eq!(z[0], 1.0);
        assert!((y[0] - 0.58198).abs() < 1e-5);
    }

    #[test]
    fn forward_rejects_out_of_domain() {
        let l = ted_pair();
        let err = l.forward(&DVector::from_vec(vec![1.5, 0.0])).unwrap_err();
        assert!(matches!(err, PbnError::Domain { .. }));
    }

    #[test]
    fn gaussian_identity_solve() {
        let l = LayerSpec::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            Family::Gaussian,
            Activation::Linear,
        )
        .unwrap();
        let s = l.solve_saddle(&DVector::from_vec(vec![0.3, -1.0])).unwrap();
        assert!((s.h[0] - 0.3).abs() < 1e-15 && (s.h[1] + 1.0).abs() < 1e-15);
        assert!(s.iterations <= 1);
    }

    #[test]
    fn ted_pair_saddle_and_mean() {
        let l = ted_pair();
        let s = l.solve_saddle(&DVector::from_vec(vec![0.5])).unwrap();
        // 1-D root of lambda_TED(h) = 0.25
        assert!((s.h[0] + 3.593_511_969_447_426).abs() < 1e-9, "{}", s.h[0]);
        assert!((s.xbar[0] - 0.25).abs() < 1e-12 && (s.xbar[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn infeasible_feature_fails() {
        let err = ted_pair()
            .solve_saddle(&DVector::from_vec(vec![3.0]))
            .unwrap_err();
        assert!(err.is_sampling_failure());
        let err = ted_pair()
            .solve_saddle(&DVector::from_vec(vec![-0.1]))
            .unwrap_err();
        assert!(err.is_sampling_failure());
    }

    #[test]
    fn residual_trace_non_increasing() {
        for family in Family::ALL {
            let l = random_layer(family, 12, 4, 7);
            let x = DVector::from_element(12, 0.4);
            let z = l.w.tr_mul(&x);
            let (res, trace) = l.solve_saddle_traced(&z);
            res.unwrap();
            assert!(
                trace.windows(2).all(|w| w[1] <= w[0]),
                "{family:?} {trace:?}"
            );
        }
    }

    #[test]
    fn gaussian_spa_is_exact() {
        let l = random_layer(Family::Gaussian, 6, 3, 11);
        let z = DVector::from_vec(vec![0.2, -0.7, 1.1]);
        let exact = gaussian_feature_log_density(&l.w, &z).unwrap();
        assert!((l.log_p0z_spa(&z).unwrap() - exact).abs() < 1e-9);
        assert!((l.log_p0z(&z, SpaOrder::Corrected).unwrap() - exact).abs() < 1e-9);
    }

    #[test]
    fn square_gaussian_log_j_is_log_abs_det() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, 3.0]);
        let det: f64 = w.determinant();
        let l = LayerSpec::new(w, DVector::zeros(2), Family::Gaussian, Activation::Linear).unwrap();
        for x in [[0.0, 0.0], [1.0, -2.0], [3.5, 0.25]] {
            let v = l.log_j(&DVector::from_row_slice(&x)).unwrap();
            assert!((v - det.abs().ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn orthonormal_gaussian_log_j() {
        let q = column_basis(&random_layer(Family::Gaussian, 5, 2, 3).w);
        let l = LayerSpec::new(
            q.clone(),
            DVector::zeros(2),
            Family::Gaussian,
            Activation::Linear,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.3, -1.2, 0.7, 2.0, -0.4]);
        let resid = &x - &q * q.tr_mul(&x);
        let expect = -0.5 * resid.norm_squared() - 1.5 * (2.0 * PI).ln();
        assert!((l.log_j(&x).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn boundary_input_is_clamped() {
        let v = ted_pair()
            .log_j(&DVector::from_vec(vec![0.0, 1.0]))
            .unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn exact_gaussian_sample_lies_on_level_set() {
        let l = random_layer(Family::Gaussian, 7, 3, 5);
        let z = DVector::from_vec(vec![0.5, -0.1, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = l
                .sample_given_z(&z, SampleMode::ExactGaussian, &mut rng)
                .unwrap();
            assert!((l.w.tr_mul(&x) - &z).amax() < 1e-12);
        }
    }

    #[test]
    fn exact_gaussian_requires_gaussian_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = ted_pair()
            .sample_given_z(
                &DVector::from_vec(vec![0.5]),
                SampleMode::ExactGaussian,
                &mut rng,
            )
            .unwrap_err();
        assert!(matches!(err, PbnError::Mode));
    }

    #[test]
    fn log_j_gradient_matches_finite_differences() {
        for family in Family::ALL {
            let l = random_layer(family, 6, 2, 21);
            let x = DVector::from_vec(vec![0.3, 0.8, 0.45, 0.1, 0.6, 0.9]);
            let g = l.log_j_grad(&x).unwrap();
            assert!((g.value - l.log_j(&x).unwrap()).abs() < 1e-12);
            let eps = 1e-6;
            for p in 0..6 {
                for i in 0..2 {
                    let mut lp = l.clone();
                    lp.w[(p, i)] += eps;
                    let mut lm = l.clone();
                    lm.w[(p, i)] -= eps;
                    let fd = (lp.log_j(&x).unwrap() - lm.log_j(&x).unwrap()) / (2.0 * eps);
                    let a = g.d_w[(p, i)];
                    assert!(
                        (fd - a).abs() <= 1e-6 * (1.0 + a.abs()),
                        "{family:?} W[{p},{i}] {a} vs {fd}"
                    );
                }
                let mut xp = x.clone();
                xp[p] += eps;
                let mut xm = x.clone();
                xm[p] -= eps;
                let fd = (l.log_j(&xp).unwrap() - l.log_j(&xm).unwrap()) / (2.0 * eps);
                let a = g.d_x[p];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + a.abs()),
                    "{family:?} x[{p}] {a} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn activation_log_jacobian_gradient() {
        let l = LayerSpec::new(
            DMatrix::from_element(3, 2, 0.5),
            DVector::zeros(2),
            Family::Gaussian,
            Activation::Family(Family::TruncGaussian),
        )
        .unwrap();
        let u = DVector::from_vec(vec![-0.7, 1.3]);
        let (_, g) = l.activation_log_jacobian(&u).unwrap();
        for i in 0..2 {
            let mut up = u.clone();
            up[i] += 1e-6;
            let mut um = u.clone();
            um[i] -= 1e-6;
            let fd = (l.activation_log_jacobian(&up).unwrap().0
                - l.activation_log_jacobian(&um).unwrap().0)
                / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }
}
