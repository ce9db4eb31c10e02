//! Independent oracles shared by the integration tests. Nothing here calls
//! into the saddle-point machinery it is used to check.
#![allow(dead_code, clippy::needless_range_loop)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use pbn::expfam::{DomainKind, ExpFamilySpec, Family};
use pbn::hmm::{FeatureSequence, Gmm, HmmModel};
use pbn::layer::{Activation, LayerSpec};
use pbn::network::{NetworkModel, OutputDensitySpec};
use pbn::train::init_layer;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

/// Gauss–Kronrod 7/15 nodes and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Globally adaptive Gauss–Kronrod quadrature of `f` on `[a, b]`: the
/// interval with the largest error estimate is bisected until the summed
/// estimate drops below `tol` or the subdivision budget runs out.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let mut parts = vec![(a, b, gk15(&f, a, b))];
    for _ in 0..2000 {
        let total_err: f64 = parts.iter().map(|p| p.2 .1).sum();
        let total: f64 = parts.iter().map(|p| p.2 .0).sum();
        if total_err <= tol.max(1e-15 * total.abs()) {
            break;
        }
        let (idx, _) = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.partial_cmp(&y.1 .2 .1).unwrap())
            .unwrap();
        let (lo, hi, _) = parts.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        parts.push((lo, mid, gk15(&f, lo, mid)));
        parts.push((mid, hi, gk15(&f, mid, hi)));
    }
    parts.iter().map(|p| p.2 .0).sum()
}

/// Integrate over consecutive breakpoints.
pub fn integrate_pieces<F: Fn(f64) -> f64>(f: F, points: &[f64], tol: f64) -> f64 {
    points
        .windows(2)
        .map(|w| integrate(&f, w[0], w[1], tol))
        .sum()
}

/// Tensor-product Gauss–Legendre rule of `n` points per axis on a rectangle.
pub fn integrate_2d<F: Fn(f64, f64) -> f64>(f: F, ax: (f64, f64), ay: (f64, f64), n: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let (hx, cx) = (0.5 * (ax.1 - ax.0), 0.5 * (ax.1 + ax.0));
    let (hy, cy) = (0.5 * (ay.1 - ay.0), 0.5 * (ay.1 + ay.0));
    let mut acc = 0.0;
    for (i, &u) in nodes.iter().enumerate() {
        for (j, &v) in nodes.iter().enumerate() {
            acc += weights[i] * weights[j] * f(cx + hx * u, cy + hy * v);
        }
    }
    acc * hx * hy
}

/// Gauss–Legendre nodes and weights by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Density of the sum of `n` independent U(0,1) variables (Irwin–Hall),
/// evaluated on the lower half and reflected for numerical stability.
pub fn irwin_hall_density(z: f64, n: usize) -> f64 {
    let nf = n as f64;
    if z <= 0.0 || z >= nf {
        return 0.0;
    }
    let z = if z > 0.5 * nf { nf - z } else { z };
    let mut acc = 0.0;
    let mut binom = 1.0;
    let mut fact = 1.0;
    for k in 1..n {
        fact *= k as f64;
    }
    for k in 0..=(z.floor() as usize) {
        if k > 0 {
            binom *= (n - k + 1) as f64 / k as f64;
        }
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        acc += sign * binom * (z - k as f64).powi(n as i32 - 1);
    }
    acc / fact
}

/// Density of a sum of `n` U(0,1) variables by brute-force discrete
/// convolution of `steps`-cell midpoint masses, linearly interpolated at `z`.
pub fn uniform_sum_density_by_convolution(z: f64, n: usize, steps: usize) -> f64 {
    let dx = 1.0 / steps as f64;
    let base = vec![dx; steps];
    let mut mass = base.clone();
    for _ in 1..n {
        let mut out = vec![0.0; mass.len() + steps - 1];
        for (i, &a) in mass.iter().enumerate() {
            for (j, &b) in base.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        mass = out;
    }
    // mass k sits at (k + n/2) dx
    let pos = z / dx - 0.5 * n as f64;
    let k = pos.floor();
    let t = pos - k;
    let at = |i: f64| -> f64 {
        if i < 0.0 || i as usize >= mass.len() {
            0.0
        } else {
            mass[i as usize] / dx
        }
    };
    (1.0 - t) * at(k) + t * at(k + 1.0)
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Fourth-order central difference.
pub fn central4(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

/// The alpha grid used for each family's quadrature checks.
pub fn alpha_grid(family: Family) -> Vec<f64> {
    match family {
        Family::Gaussian => linspace(-5.0, 5.0, 21),
        Family::TruncGaussian => linspace(-12.0, 4.0, 21),
        Family::Exponential => linspace(-6.0, 0.45, 21),
        Family::TruncExponential => linspace(-15.0, 15.0, 21),
    }
}

/// Integration breakpoints covering the bulk of p(.; alpha).
pub fn support(spec: &ExpFamilySpec, alpha: f64) -> Vec<f64> {
    match spec.domain {
        DomainKind::Reals => linspace(alpha - 40.0, alpha + 40.0, 17),
        DomainKind::Positive => {
            let scale = match spec.family {
                Family::Exponential => 1.0 / (0.5 - alpha),
                _ => 1.0 / alpha.min(-1.0).abs(),
            };
            let hi = alpha.max(0.0) + 60.0 * scale.max(1.0);
            let mut p = vec![0.0, scale * 0.1, scale, 4.0 * scale];
            p.extend(linspace(8.0 * scale, hi, 12));
            p.retain(|&x| x <= hi);
            p.sort_by(|a, b| a.partial_cmp(b).unwrap());
            p.dedup();
            p
        }
        DomainKind::Unit => vec![0.0, 0.01, 0.1, 0.5, 0.9, 0.99, 1.0],
    }
}

pub struct Moments {
    pub mass: f64,
    pub mean: f64,
    pub var: f64,
}

pub fn quadrature_moments(spec: &ExpFamilySpec, alpha: f64) -> Moments {
    let pts = support(spec, alpha);
    let p = |x: f64| spec.log_density(alpha, x).unwrap().exp();
    let mass = integrate_pieces(p, &pts, 1e-14);
    let mean = integrate_pieces(|x| x * p(x), &pts, 1e-14);
    let var = integrate_pieces(|x| (x - mean) * (x - mean) * p(x), &pts, 1e-14);
    Moments { mass, mean, var }
}

pub fn draw_input<R: Rng>(family: Family, n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| match family {
        Family::Gaussian => rng.sample::<f64, _>(StandardNormal),
        Family::TruncGaussian => rng.sample::<f64, _>(StandardNormal).abs(),
        Family::Exponential => 2.0 * rng.sample::<f64, _>(Exp1),
        Family::TruncExponential => rng.gen::<f64>(),
    })
}

pub fn random_layer<R: Rng>(family: Family, n: usize, m: usize, rng: &mut R) -> LayerSpec {
    let w = DMatrix::from_fn(n, m, |_, _| {
        rng.sample::<f64, _>(StandardNormal) / (n as f64).sqrt()
    });
    LayerSpec::new(w, DVector::zeros(m), family, Activation::Linear).unwrap()
}

pub fn ones_layer(family: Family, n: usize) -> LayerSpec {
    LayerSpec::new(
        DMatrix::from_element(n, 1, 1.0),
        DVector::zeros(1),
        family,
        Activation::Linear,
    )
    .unwrap()
}

pub fn random_stochastic(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

pub fn random_hmm(s: usize, c: usize, d: usize, rng: &mut ChaCha8Rng) -> HmmModel {
    let mut trans = DMatrix::zeros(s, s);
    for i in 0..s {
        for (j, p) in random_stochastic(s, rng).into_iter().enumerate() {
            trans[(i, j)] = p;
        }
    }
    let states = (0..s)
        .map(|_| Gmm {
            weights: random_stochastic(c, rng),
            means: (0..c)
                .map(|_| DVector::from_fn(d, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal)))
                .collect(),
            vars: (0..c)
                .map(|_| DVector::from_fn(d, |_, _| rng.gen_range(0.3..2.0)))
                .collect(),
        })
        .collect();
    HmmModel {
        initial: DVector::from_vec(random_stochastic(s, rng)),
        trans,
        states,
        floor: 0.1,
    }
}

/// Mixture density by the textbook formula.
pub fn emission(g: &Gmm, x: &[f64]) -> f64 {
    let mut total = 0.0;
    for c in 0..g.weights.len() {
        let mut p = g.weights[c];
        for d in 0..x.len() {
            let v = g.vars[c][d];
            p *= (-(x[d] - g.means[c][d]).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
        }
        total += p;
    }
    total
}

pub fn brute_force(h: &HmmModel, seq: &DMatrix<f64>) -> f64 {
    let (s, t) = (h.initial.len(), seq.nrows());
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|i| seq.row(i).iter().copied().collect())
        .collect();
    let mut total = 0.0;
    for code in 0..s.pow(t as u32) {
        let path: Vec<usize> = (0..t).map(|i| code / s.pow(i as u32) % s).collect();
        let mut p = h.initial[path[0]] * emission(&h.states[path[0]], &rows[0]);
        for i in 1..t {
            p *= h.trans[(path[i - 1], path[i])] * emission(&h.states[path[i]], &rows[i]);
        }
        total += p;
    }
    total.ln()
}

pub fn dataset(h: &HmmModel, n: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<FeatureSequence> {
    (0..n).map(|_| h.sample(len, rng).1).collect()
}

pub fn input_in(family: Family, rng: &mut ChaCha8Rng) -> f64 {
    match family {
        Family::Gaussian => rng.sample(StandardNormal),
        Family::TruncGaussian => rng.sample::<f64, _>(StandardNormal).abs() + 0.05,
        Family::Exponential => rng.sample::<f64, _>(Exp1) + 0.05,
        Family::TruncExponential => rng.gen_range(0.05..0.95),
    }
}

/// A random net over `dims` whose layer k takes family `fams[k]` and whose
/// final layer feeds a TED indicator when it ends in a TED activation.
pub fn random_net(
    dims: &[usize],
    fams: &[Family],
    last: Family,
    rng: &mut ChaCha8Rng,
) -> NetworkModel {
    let mut layers = Vec::new();
    for k in 0..dims.len() - 1 {
        let act_family = if k + 2 == dims.len() {
            last
        } else {
            fams[k + 1]
        };
        let mut l = init_layer(
            dims[k],
            dims[k + 1],
            fams[k],
            Activation::Family(act_family),
            rng,
        )
        .unwrap();
        let shift = if act_family == Family::Exponential {
            -3.0
        } else {
            0.0
        };
        l.b = DVector::from_fn(dims[k + 1], |_, _| {
            shift + 0.2 * rng.sample::<f64, _>(StandardNormal)
        });
        layers.push(l);
    }
    let k = *dims.last().unwrap();
    let out = if last == Family::TruncExponential {
        OutputDensitySpec::ted_indicator(0, k, 1.5)
    } else {
        OutputDensitySpec::none(k)
    };
    NetworkModel::new(layers, out).unwrap()
}
