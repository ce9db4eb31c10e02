//! The four maximum-entropy exponential-class densities used as layer priors
//! and activation functions.
//!
//! Every family is written in the common form
//!
//! ```text
//! log p(x; a) = (a0 + a) x + b x^2 + log Z(a)
//! ```
//!
//! with a fixed offset `a0` and quadratic coefficient `b`. The activation
//! `lambda(a)` is the mean of `p(.; a)`, its derivative is the variance, and
//! `cgf(a) = log Z(0) - log Z(a)` is the cumulant generating function of the
//! prior (`a = 0`) density.

use std::f64::consts::{LN_2, PI, SQRT_2};

use libm::erfc;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{PbnError, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this natural parameter the truncated Gaussian switches to a
/// continued-fraction evaluation of the Mills ratio.
const TG_TAIL_ALPHA: f64 = -6.0;
const TG_CF_TERMS: usize = 90;

/// Within this radius the truncated exponential uses its Bernoulli series.
const TED_SERIES_RADIUS: f64 = 2.0;

/// Largest admissible natural parameter of the exponential family.
pub const EXPONENTIAL_ALPHA_MAX: f64 = 0.5 - 1e-9;

/// `B_{2n} / (2n)!` for n = 1..=17.
const TED_SERIES: [f64; 17] = [
    8.333_333_333_333_333e-2,
    -1.388_888_888_888_889e-3,
    3.306_878_306_878_307e-5,
    -8.267_195_767_195_768e-7,
    2.087_675_698_786_81e-8,
    -5.284_190_138_687_493e-10,
    1.338_253_653_068_467_9e-11,
    -3.389_680_296_322_583e-13,
    8.586_062_056_277_845e-15,
    -2.174_868_698_558_062e-16,
    5.509_002_828_360_23e-18,
    -1.395_446_468_581_252_3e-19,
    3.534_707_039_629_467e-21,
    -8.953_517_427_037_547e-23,
    2.267_952_452_337_683e-24,
    -5.744_790_668_872_202e-26,
    1.455_172_475_614_865e-27,
];

/// Support of a density.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DomainKind {
    /// The real line.
    Reals,
    /// `[0, inf)`.
    Positive,
    /// `[0, 1]`.
    Unit,
}

impl DomainKind {
    pub fn name(self) -> &'static str {
        match self {
            DomainKind::Reals => "real",
            DomainKind::Positive => "positive",
            DomainKind::Unit => "unit-interval",
        }
    }

    pub fn contains(self, x: f64) -> bool {
        match self {
            DomainKind::Reals => x.is_finite(),
            DomainKind::Positive => x.is_finite() && x >= 0.0,
            DomainKind::Unit => (0.0..=1.0).contains(&x),
        }
    }

    /// Pull a value into the open domain by at least `eps`.
    pub fn clamp_interior(self, x: f64, eps: f64) -> f64 {
        match self {
            DomainKind::Reals => x,
            DomainKind::Positive => x.max(eps),
            DomainKind::Unit => x.clamp(eps, 1.0 - eps),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Gaussian,
    TruncGaussian,
    Exponential,
    TruncExponential,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Gaussian,
        Family::TruncGaussian,
        Family::Exponential,
        Family::TruncExponential,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::TruncGaussian => "trunc-gaussian",
            Family::Exponential => "exponential",
            Family::TruncExponential => "trunc-exponential",
        }
    }

    pub fn from_name(name: &str) -> Option<Family> {
        match name {
            "gaussian" | "linear" => Some(Family::Gaussian),
            "trunc-gaussian" | "tg" => Some(Family::TruncGaussian),
            "exponential" | "exp" => Some(Family::Exponential),
            "trunc-exponential" | "ted" => Some(Family::TruncExponential),
            _ => None,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Family::Gaussian => 0,
            Family::TruncGaussian => 1,
            Family::Exponential => 2,
            Family::TruncExponential => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Family> {
        Family::ALL.get(tag as usize).copied()
    }

    pub fn spec(self) -> ExpFamilySpec {
        ExpFamilySpec::new(self)
    }
}

/// One row of the MaxEnt prior table: family, offset, quadratic coefficient
/// and domain. Construct through [`ExpFamilySpec::new`]; the fields are
/// fixed per family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpFamilySpec {
    pub family: Family,
    pub alpha0: f64,
    pub beta: f64,
    pub domain: DomainKind,
}

/// Cumulant generating function and its first four derivatives at one
/// natural parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cumulants {
    pub cgf: f64,
    pub mean: f64,
    pub var: f64,
    pub third: f64,
    pub fourth: f64,
}

impl ExpFamilySpec {
    pub const fn new(family: Family) -> Self {
        match family {
            Family::Gaussian => ExpFamilySpec {
                family,
                alpha0: 0.0,
                beta: -0.5,
                domain: DomainKind::Reals,
            },
            Family::TruncGaussian => ExpFamilySpec {
                family,
                alpha0: 0.0,
                beta: -0.5,
                domain: DomainKind::Positive,
            },
            Family::Exponential => ExpFamilySpec {
                family,
                alpha0: -0.5,
                beta: 0.0,
                domain: DomainKind::Positive,
            },
            Family::TruncExponential => ExpFamilySpec {
                family,
                alpha0: 0.0,
                beta: 0.0,
                domain: DomainKind::Unit,
            },
        }
    }

    pub fn name(&self) -> &'static str {
        self.family.name()
    }

    pub fn check_alpha(&self, alpha: f64) -> Result<()> {
        let ok = alpha.is_finite()
            && (self.family != Family::Exponential || alpha < EXPONENTIAL_ALPHA_MAX);
        if ok {
            Ok(())
        } else {
            Err(PbnError::Parameter {
                alpha,
                family: self.name(),
            })
        }
    }

    fn check_x(&self, x: f64) -> Result<()> {
        if self.domain.contains(x) {
            Ok(())
        } else {
            Err(PbnError::Domain {
                value: x,
                domain: self.domain.name(),
            })
        }
    }

    /// `log Z(0)`: the normalizer of the prior.
    fn log_normalizer_at_zero(&self) -> f64 {
        match self.family {
            Family::Gaussian => -HALF_LN_2PI,
            Family::TruncGaussian => LN_2 - HALF_LN_2PI,
            Family::Exponential => -LN_2,
            Family::TruncExponential => 0.0,
        }
    }

    /// All cumulants at `alpha`.
    pub fn cumulants(&self, alpha: f64) -> Result<Cumulants> {
        self.check_alpha(alpha)?;
        Ok(self.cumulants_unchecked(alpha))
    }

    pub(crate) fn cumulants_unchecked(&self, alpha: f64) -> Cumulants {
        match self.family {
            Family::Gaussian => Cumulants {
                cgf: 0.5 * alpha * alpha,
                mean: alpha,
                var: 1.0,
                third: 0.0,
                fourth: 0.0,
            },
            Family::TruncGaussian => trunc_gaussian(alpha),
            Family::Exponential => {
                let theta = 0.5 - alpha;
                let inv = 1.0 / theta;
                Cumulants {
                    cgf: -(2.0 * theta).ln(),
                    mean: inv,
                    var: inv * inv,
                    third: 2.0 * inv * inv * inv,
                    fourth: 6.0 * inv * inv * inv * inv,
                }
            }
            Family::TruncExponential => trunc_exponential(alpha),
        }
    }

    /// Mean and variance only; this is the inner loop of the saddle-point solver.
    pub(crate) fn mean_var_unchecked(&self, alpha: f64) -> (f64, f64) {
        match self.family {
            Family::Gaussian => (alpha, 1.0),
            Family::Exponential => {
                let inv = 1.0 / (0.5 - alpha);
                (inv, inv * inv)
            }
            _ => {
                let c = self.cumulants_unchecked(alpha);
                (c.mean, c.var)
            }
        }
    }

    /// `log Z(alpha)`.
    pub fn log_normalizer(&self, alpha: f64) -> Result<f64> {
        Ok(self.log_normalizer_at_zero() - self.cgf(alpha)?)
    }

    /// Log density of `p(x; alpha)`.
    pub fn log_density(&self, alpha: f64, x: f64) -> Result<f64> {
        self.check_x(x)?;
        let log_z = self.log_normalizer(alpha)?;
        Ok((self.alpha0 + alpha) * x + self.beta * x * x + log_z)
    }

    /// Prior log density (`alpha = 0`) and its derivative in `x`.
    pub(crate) fn prior_log_density_and_grad(&self, x: f64) -> (f64, f64) {
        let lp = self.alpha0 * x + self.beta * x * x + self.log_normalizer_at_zero();
        (lp, self.alpha0 + 2.0 * self.beta * x)
    }

    /// The activation function: the mean of `p(.; alpha)`.
    pub fn activation(&self, alpha: f64) -> Result<f64> {
        Ok(self.cumulants(alpha)?.mean)
    }

    /// Derivative of the activation, equal to the variance of `p(.; alpha)`.
    pub fn activation_deriv(&self, alpha: f64) -> Result<f64> {
        Ok(self.cumulants(alpha)?.var)
    }

    pub fn cgf(&self, alpha: f64) -> Result<f64> {
        Ok(self.cumulants(alpha)?.cgf)
    }

    /// Solve `activation(alpha) = y` for `alpha`.
    pub fn activation_inverse(&self, y: f64) -> Result<f64> {
        let out_of_range = || PbnError::Range {
            value: y,
            family: self.name(),
        };
        if !y.is_finite() {
            return Err(out_of_range());
        }
        match self.family {
            Family::Gaussian => Ok(y),
            Family::Exponential => {
                if y <= 0.0 {
                    return Err(out_of_range());
                }
                let alpha = 0.5 - 1.0 / y;
                if alpha >= EXPONENTIAL_ALPHA_MAX {
                    return Err(out_of_range());
                }
                Ok(alpha)
            }
            Family::TruncGaussian => {
                if y <= 0.0 {
                    return Err(out_of_range());
                }
                // lambda(a) > a everywhere and lambda(-t) < 1/t for t > 0.
                Ok(self.invert_monotone(y, -1.0 / y, y))
            }
            Family::TruncExponential => {
                if y <= 0.0 || y >= 1.0 {
                    return Err(out_of_range());
                }
                if (y - 0.5).abs() < 1e-300 {
                    return Ok(0.0);
                }
                // lambda(-t) < 1/t and lambda(t) > 1 - 1/t for t > 0.
                Ok(self.invert_monotone(y, -1.0 / y, 1.0 / (1.0 - y)))
            }
        }
    }

    /// Safeguarded Newton on a bracket `lo < root < hi`.
    fn invert_monotone(&self, y: f64, mut lo: f64, mut hi: f64) -> f64 {
        let tol = 1e-13 * y.abs().max(1.0);
        let mut a = 0.5 * (lo + hi);
        if y > 0.0 && self.family == Family::TruncExponential {
            a = a.clamp(lo, hi);
        }
        for _ in 0..200 {
            let (m, v) = self.mean_var_unchecked(a);
            let f = m - y;
            if f.abs() <= tol {
                return a;
            }
            if f > 0.0 {
                hi = a;
            } else {
                lo = a;
            }
            let newton = a - f / v;
            a = if newton > lo && newton < hi && v > 0.0 {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 4.0 * f64::EPSILON * a.abs().max(1.0) {
                return a;
            }
        }
        a
    }

    /// Draw one value from `p(.; alpha)`.
    pub fn sample<R: Rng + ?Sized>(&self, alpha: f64, rng: &mut R) -> Result<f64> {
        self.check_alpha(alpha)?;
        Ok(match self.family {
            Family::Gaussian => alpha + rng.sample::<f64, _>(StandardNormal),
            Family::TruncGaussian => alpha + sample_normal_tail(-alpha, rng),
            Family::Exponential => rng.sample::<f64, _>(Exp1) / (0.5 - alpha),
            Family::TruncExponential => sample_trunc_exponential(alpha, rng),
        })
    }
}

fn trunc_gaussian(alpha: f64) -> Cumulants {
    if alpha < TG_TAIL_ALPHA {
        return trunc_gaussian_tail(-alpha);
    }
    let phi = (-0.5 * alpha * alpha).exp() / (2.0 * PI).sqrt();
    let (cdf, log_cdf) = if alpha < 0.0 {
        let c = 0.5 * erfc(-alpha / SQRT_2);
        (c, c.ln())
    } else {
        let q = 0.5 * erfc(alpha / SQRT_2);
        (1.0 - q, (-q).ln_1p())
    };
    let r = phi / cdf;
    let mean = alpha + r;
    let var = 1.0 - r * mean;
    let m = mean * mean - var;
    let third = r * m;
    let fourth = -r * mean * m + r * (2.0 * mean * var - third);
    Cumulants {
        cgf: 0.5 * alpha * alpha + LN_2 + log_cdf,
        mean,
        var,
        third,
        fourth,
    }
}

/// Truncated Gaussian for `alpha = -t`, `t > 6`, through the Laplace
/// continued fraction `phi(a)/Phi(a) = t + 1/(t + 2/(t + 3/(t + ...)))`.
/// Every cumulant is assembled from the partial denominators so that no
/// difference of nearly equal quantities is formed.
fn trunc_gaussian_tail(t: f64) -> Cumulants {
    let mut d = t;
    let mut den = [0.0f64; 6];
    for k in (2..=TG_CF_TERMS).rev() {
        d = t + k as f64 / d;
        if k <= 5 {
            den[k] = d;
        }
    }
    let (d2, d3, d4, d5) = (den[2], den[3], den[4], den[5]);
    let r = t + 1.0 / d2;
    let mean = 1.0 / d2;
    let var = (t + 4.0 / d3 - 3.0 / d4) / (d3 * d2 * d2);
    let m = 2.0 * (t + 9.0 / d4 - 8.0 / d5) / (d4 * d3 * d3 * d2 * d2);
    let third = r * m;
    let fourth = -r * mean * m + r * (2.0 * mean * var - third);
    Cumulants {
        cgf: LN_2 - HALF_LN_2PI - r.ln(),
        mean,
        var,
        third,
        fourth,
    }
}

fn trunc_exponential(alpha: f64) -> Cumulants {
    if alpha.abs() < TED_SERIES_RADIUS {
        let mut pw = [1.0f64; 2 * TED_SERIES.len() + 1];
        for k in 1..pw.len() {
            pw[k] = pw[k - 1] * alpha;
        }
        let mut c = Cumulants {
            cgf: 0.5 * alpha,
            mean: 0.5,
            var: 0.0,
            third: 0.0,
            fourth: 0.0,
        };
        for (i, &b) in TED_SERIES.iter().enumerate() {
            let k = 2 * (i + 1);
            let kf = k as f64;
            c.cgf += b * pw[k] / kf;
            c.mean += b * pw[k - 1];
            c.var += b * (kf - 1.0) * pw[k - 2];
            if k >= 4 {
                c.third += b * (kf - 1.0) * (kf - 2.0) * pw[k - 3];
                c.fourth += b * (kf - 1.0) * (kf - 2.0) * (kf - 3.0) * pw[k - 4];
            }
        }
        return c;
    }
    let mu = 1.0 / -(-alpha).exp_m1();
    let cgf = if alpha > 0.0 {
        alpha + (-(-alpha).exp_m1()).ln() - alpha.ln()
    } else {
        (-alpha.exp_m1()).ln() - (-alpha).ln()
    };
    let inv = 1.0 / alpha;
    let s = mu * (1.0 - mu);
    let u = 1.0 - 2.0 * mu;
    Cumulants {
        cgf,
        mean: mu - inv,
        var: s + inv * inv,
        third: s * u - 2.0 * inv * inv * inv,
        fourth: s * u * u - 2.0 * s * s + 6.0 * inv * inv * inv * inv,
    }
}

/// Standard normal conditioned on `w >= a`.
fn sample_normal_tail<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a <= 0.0 {
        loop {
            let w: f64 = rng.sample(StandardNormal);
            if w >= a {
                return w;
            }
        }
    }
    // Exponential proposal with the optimal rate (Robert, 1995).
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let w = a + rng.sample::<f64, _>(Exp1) / rate;
        let u: f64 = rng.gen();
        if u <= (-0.5 * (w - rate) * (w - rate)).exp() {
            return w;
        }
    }
}

fn sample_trunc_exponential<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    let x = if alpha.abs() < 1e-12 {
        u
    } else if alpha > 0.0 {
        1.0 + (u + (1.0 - u) * (-alpha).exp()).ln() / alpha
    } else {
        (u * alpha.exp_m1()).ln_1p() / alpha
    };
    x.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn table_rows() {
        let g = Family::Gaussian.spec();
        assert_eq!((g.alpha0, g.beta, g.domain), (0.0, -0.5, DomainKind::Reals));
        let tg = Family::TruncGaussian.spec();
        assert_eq!(
            (tg.alpha0, tg.beta, tg.domain),
            (0.0, -0.5, DomainKind::Positive)
        );
        let e = Family::Exponential.spec();
        assert_eq!(
            (e.alpha0, e.beta, e.domain),
            (-0.5, 0.0, DomainKind::Positive)
        );
        let ted = Family::TruncExponential.spec();
        assert_eq!(
            (ted.alpha0, ted.beta, ted.domain),
            (0.0, 0.0, DomainKind::Unit)
        );
    }

    #[test]
    fn log_density_examples() {
        let lp = Family::Gaussian.spec().log_density(0.0, 0.0).unwrap();
        assert!(close(lp, -0.918_938_533_204_672_8, 1e-14));
        let lp = Family::Exponential.spec().log_density(0.0, 2.0).unwrap();
        assert!(close(lp, 0.5f64.ln() - 1.0, 1e-14));
        let lp = Family::TruncExponential
            .spec()
            .log_density(1.0, 1.0)
            .unwrap();
        assert!(close(lp, 0.458_675_145_387_081_9, 1e-13));
    }

    #[test]
    fn log_density_errors() {
        let e = Family::Exponential.spec();
        assert!(matches!(
            e.log_density(0.0, -1.0),
            Err(PbnError::Domain { .. })
        ));
        assert!(matches!(
            e.log_density(0.6, 1.0),
            Err(PbnError::Parameter { .. })
        ));
        assert!(matches!(
            e.activation(0.5 - 1e-10),
            Err(PbnError::Parameter { .. })
        ));
        let ted = Family::TruncExponential.spec();
        assert!(matches!(
            ted.log_density(0.0, 1.5),
            Err(PbnError::Domain { .. })
        ));
    }

    #[test]
    fn activation_examples() {
        assert_eq!(Family::Gaussian.spec().activation(1.7).unwrap(), 1.7);
        let ted = Family::TruncExponential.spec();
        assert!(close(ted.activation(0.0).unwrap(), 0.5, 1e-15));
        assert!(close(ted.activation(1e-7).unwrap(), 0.5, 1e-7));
        let tg = Family::TruncGaussian.spec();
        assert!(close(tg.activation(0.0).unwrap(), (2.0 / PI).sqrt(), 1e-14));
        assert!(close(
            ted.activation(1.0).unwrap(),
            0.581_976_706_869_326_4,
            1e-13
        ));
    }

    #[test]
    fn deriv_and_cgf_examples() {
        assert_eq!(Family::Gaussian.spec().activation_deriv(-3.0).unwrap(), 1.0);
        let ted = Family::TruncExponential.spec();
        assert!(close(ted.activation_deriv(0.0).unwrap(), 1.0 / 12.0, 1e-15));
        assert!(close(
            Family::Exponential.spec().activation_deriv(0.0).unwrap(),
            4.0,
            1e-15
        ));
        assert!(close(
            Family::Gaussian.spec().cgf(1.3).unwrap(),
            0.845,
            1e-15
        ));
        assert!(close(ted.cgf(1.0).unwrap(), 0.541_324_854_612_918_1, 1e-13));
        for f in Family::ALL {
            assert_eq!(f.spec().cgf(0.0).unwrap(), 0.0, "{f:?}");
        }
    }

    // Reference values from 50-digit arithmetic: [alpha, cgf, mean, var, third, fourth].
    const TG_REF: [[f64; 6]; 6] = [
        [
            -40.0,
            -3.915_294_833_193_843,
            0.024_968_847_207_263_723,
            6.226_683_785_913_888e-4,
            3.101_744_039_648_625e-5,
            2.314_770_043_891_807e-6,
        ],
        [
            -10.0,
            -2.538_137_969_952_525_3,
            0.098_093_233_962_511_96,
            9.445_377_825_656_261e-3,
            1.786_400_392_116_507e-3,
            4.978_538_223_794_402e-4,
        ],
        [
            -6.5,
            -2.120_002_314_601_893_2,
            0.147_301_361_190_490_7,
            0.020_843_461_253_239_11,
            5.678_322_615_389_735e-3,
            2.236_076_451_363_069e-3,
        ],
        [
            -6.0,
            -2.043_621_769_414_760_3,
            0.158_482_604_544_598_9,
            0.023_987_636_789_166_77,
            6.953_537_499_164_312e-3,
            2.899_205_678_557_503e-3,
        ],
        [
            -1.0,
            -0.647_874_464_449_318_2,
            0.525_135_276_160_981_2,
            0.199_097_665_570_348_8,
            0.116_931_195_406_048_8,
            0.079_174_983_680_745_63,
        ],
        [
            2.5,
            3.811_918_155_074_085,
            2.517_637_825_486_917,
            0.955_594_343_394_801_2,
            0.094_942_754_469_749_08,
            -0.155_838_465_110_222_06,
        ],
    ];

    const TED_REF: [[f64; 6]; 6] = [
        [-50.0, -3.912_023_005_428_146, 0.02, 4.0e-4, 1.6e-5, 9.6e-7],
        [
            -3.0,
            -1.149_681_469_610_811_3,
            0.280_937_636_842_077_4,
            0.055_970_105_609_051_35,
            0.013_154_765_794_997_115,
            6.898_856_453_452_003e-4,
        ],
        [
            -0.5,
            -0.239_604_949_007_243_26,
            0.458_505_917_463_201_7,
            0.082_301_910_967_236_24,
            4.085_068_147_780_116e-3,
            -7.847_989_898_577_758e-3,
        ],
        [
            1e-3,
            5.000_416_666_663_195e-4,
            0.500_083_333_331_944_4,
            0.083_333_329_166_666_83,
            -8.333_332_671_957_707e-6,
            -8.333_331_349_206_523e-3,
        ],
        [
            1.0,
            0.541_324_854_612_918_1,
            0.581_976_706_869_326_4,
            0.079_326_405_792_207_68,
            -7.705_232_875_012_607e-3,
            -6.512_796_636_760_148e-3,
        ],
        [
            20.0,
            17.004_267_724_384_855,
            0.950_000_002_061_153_6,
            2.499_997_938_846_369e-3,
            -2.499_979_388_463_606e-4,
            3.749_793_884_634_357e-5,
        ],
    ];

    fn check_table(family: Family, table: &[[f64; 6]]) {
        let spec = family.spec();
        for row in table {
            let c = spec.cumulants(row[0]).unwrap();
            let got = [c.cgf, c.mean, c.var, c.third, c.fourth];
            for (k, (&g, &want)) in got.iter().zip(&row[1..]).enumerate() {
                // higher cumulants near the TG branch edge carry some cancellation
                let tol = [1e-11, 1e-11, 1e-11, 1e-9, 1e-6][k];
                assert!(
                    (g - want).abs() <= tol * want.abs().max(1e-300),
                    "{family:?} alpha={} k={k}: {g} vs {want}",
                    row[0]
                );
            }
        }
    }

    #[test]
    fn trunc_gaussian_matches_reference() {
        check_table(Family::TruncGaussian, &TG_REF);
    }

    #[test]
    fn trunc_exponential_matches_reference() {
        check_table(Family::TruncExponential, &TED_REF);
    }

    #[test]
    fn tail_branches_are_continuous() {
        let tg = Family::TruncGaussian.spec();
        let lo = tg.cumulants(-6.0 - 1e-12).unwrap();
        let hi = tg.cumulants(-6.0).unwrap();
        assert!(close(lo.mean, hi.mean, 1e-12));
        assert!(close(lo.var, hi.var, 1e-10));
        let ted = Family::TruncExponential.spec();
        for edge in [-2.0, 2.0] {
            let a = ted.cumulants(edge * (1.0 - 1e-14)).unwrap();
            let b = ted.cumulants(edge * (1.0 + 1e-14)).unwrap();
            assert!(close(a.mean, b.mean, 1e-13));
            assert!(close(a.var, b.var, 1e-12));
        }
    }

    #[test]
    fn extreme_parameters_stay_finite() {
        for f in [Family::TruncGaussian, Family::TruncExponential] {
            for a in [-1e6, -800.0, -50.0, 50.0, 800.0, 1e6] {
                let c = f.spec().cumulants(a).unwrap();
                assert!(
                    c.mean.is_finite() && c.var > 0.0 && c.cgf.is_finite(),
                    "{f:?} {a}"
                );
            }
        }
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(
            Family::Gaussian.spec().activation_inverse(-2.3).unwrap(),
            -2.3
        );
        let ted = Family::TruncExponential.spec();
        assert!(ted.activation_inverse(0.5).unwrap().abs() < 1e-10);
        assert!(
            Family::Exponential
                .spec()
                .activation_inverse(2.0)
                .unwrap()
                .abs()
                < 1e-15
        );
        assert!(matches!(
            Family::TruncGaussian.spec().activation_inverse(0.0),
            Err(PbnError::Range { .. })
        ));
        assert!(matches!(
            ted.activation_inverse(1.0),
            Err(PbnError::Range { .. })
        ));
        let h = ted.activation_inverse(0.25).unwrap();
        assert!((h + 3.593_511_969_447_426).abs() < 1e-9, "{h}");
    }

    #[test]
    fn inverse_round_trip_extremes() {
        let tg = Family::TruncGaussian.spec();
        for y in [1e-6, 1e-3, 0.2, 0.797, 3.0, 1e4] {
            let a = tg.activation_inverse(y).unwrap();
            assert!(
                (tg.activation(a).unwrap() - y).abs() <= 1e-10 * y.max(1.0),
                "{y}"
            );
        }
        let ted = Family::TruncExponential.spec();
        for y in [1e-7, 0.01, 0.3, 0.5 + 1e-9, 0.9, 1.0 - 1e-7] {
            let a = ted.activation_inverse(y).unwrap();
            assert!((ted.activation(a).unwrap() - y).abs() <= 1e-10, "{y}");
        }
    }

    #[test]
    fn ted_samples_in_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ted = Family::TruncExponential.spec();
        for a in [-800.0, -5.0, 0.0, 1e-13, 3.0, 800.0] {
            for _ in 0..2000 {
                let x = ted.sample(a, &mut rng).unwrap();
                assert!((0.0..=1.0).contains(&x));
            }
        }
    }

    #[test]
    fn tg_samples_in_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tg = Family::TruncGaussian.spec();
        for a in [-30.0, -2.0, 0.0, 4.0] {
            for _ in 0..2000 {
                assert!(tg.sample(a, &mut rng).unwrap() >= 0.0);
            }
        }
    }
}
