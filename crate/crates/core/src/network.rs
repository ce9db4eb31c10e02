//! Layer cascades: chain-rule log-likelihood, the collapsed Gaussian group,
//! deterministic reconstruction, stochastic generation, output feature
//! densities, mixtures and class-conditional classification.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{PbnError, Result};
use crate::expfam::Family;
use crate::layer::{Activation, LayerSpec, SampleMode, SpaOrder};
use crate::linalg::log_sum_exp;

/// Retry cap for generation after a sampling failure.
pub const DEFAULT_RETRY_CAP: usize = 100;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    /// Product of truncated exponentials with natural parameters `+C` on the
    /// class unit and `-C` elsewhere.
    TedIndicator,
    StandardNormal,
    /// No output term (the feature density is supplied elsewhere).
    None,
}

impl OutputKind {
    pub fn name(self) -> &'static str {
        match self {
            OutputKind::TedIndicator => "ted_indicator",
            OutputKind::StandardNormal => "standard_normal",
            OutputKind::None => "none",
        }
    }

    pub fn from_name(name: &str) -> Option<OutputKind> {
        [
            OutputKind::TedIndicator,
            OutputKind::StandardNormal,
            OutputKind::None,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

/// Density of the final network output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutputDensitySpec {
    pub kind: OutputKind,
    pub class_index: usize,
    /// Output dimension K.
    pub num_classes: usize,
    pub confidence: f64,
}

impl OutputDensitySpec {
    pub fn ted_indicator(class_index: usize, num_classes: usize, confidence: f64) -> Self {
        OutputDensitySpec {
            kind: OutputKind::TedIndicator,
            class_index,
            num_classes,
            confidence,
        }
    }

    pub fn standard_normal(dim: usize) -> Self {
        OutputDensitySpec {
            kind: OutputKind::StandardNormal,
            class_index: 0,
            num_classes: dim,
            confidence: 1.0,
        }
    }

    pub fn none(dim: usize) -> Self {
        OutputDensitySpec {
            kind: OutputKind::None,
            class_index: 0,
            num_classes: dim,
            confidence: 1.0,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    /// Natural parameters of the indicator density.
    pub fn alphas(&self) -> Vec<f64> {
        (0..self.num_classes)
            .map(|i| {
                if i == self.class_index {
                    self.confidence
                } else {
                    -self.confidence
                }
            })
            .collect()
    }

    fn check_dim(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.num_classes {
            return Err(PbnError::Dimension(format!(
                "output has length {}, density expects {}",
                y.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// `log g(y)`.
    pub fn log_density(&self, y: &DVector<f64>) -> Result<f64> {
        Ok(self.log_density_grad(y)?.0)
    }

    /// `log g(y)` and its gradient in `y`.
    pub fn log_density_grad(&self, y: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.check_dim(y)?;
        match self.kind {
            OutputKind::None => Ok((0.0, DVector::zeros(y.len()))),
            OutputKind::StandardNormal => {
                let v = -0.5 * y.norm_squared() - y.len() as f64 * HALF_LN_2PI;
                Ok((v, -y))
            }
            OutputKind::TedIndicator => {
                let ted = Family::TruncExponential.spec();
                let alphas = self.alphas();
                let mut total = 0.0;
                for (yi, a) in y.iter().zip(&alphas) {
                    total += ted.log_density(*a, *yi)?;
                }
                Ok((total, DVector::from_vec(alphas)))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        match self.kind {
            OutputKind::None => Err(PbnError::Config(
                "generation needs a standard-normal or indicator output density".into(),
            )),
            OutputKind::StandardNormal => Ok(DVector::from_fn(self.num_classes, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            })),
            OutputKind::TedIndicator => {
                let ted = Family::TruncExponential.spec();
                let alphas = self.alphas();
                let mut y = DVector::zeros(self.num_classes);
                for (i, a) in alphas.iter().enumerate() {
                    y[i] = ted.sample(*a, rng)?;
                }
                Ok(y)
            }
        }
    }
}

/// `log g(y)` for an output density specification.
pub fn output_log_density(spec: &OutputDensitySpec, y: &DVector<f64>) -> Result<f64> {
    spec.log_density(y)
}

/// Ordered stack of projection layers with an output feature density.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    pub layers: Vec<LayerSpec>,
    /// Number of leading linear Gaussian layers whose J-functions are
    /// evaluated as one composite linear map (used when at least 2).
    pub gaussian_group_len: usize,
    /// Depth at which the feature sequence for the HMM tail is tapped
    /// (0 = raw input).
    pub tap: Option<usize>,
    pub output: OutputDensitySpec,
    pub spa_order: SpaOrder,
}

/// Per-term breakdown of one log-likelihood evaluation.
#[derive(Clone, Debug)]
pub struct LikelihoodParts {
    /// Log J-function per layer. With a collapsed Gaussian group the
    /// composite value sits at index 0 and the other group entries are 0.
    pub log_j: Vec<f64>,
    /// `sum log act'(u)` per layer.
    pub activation: Vec<f64>,
    /// `log g(y)` on the final output.
    pub output: f64,
    /// Final output `y`.
    pub y: DVector<f64>,
}

impl LikelihoodParts {
    /// Every term except the output density.
    pub fn projection_total(&self) -> f64 {
        self.log_j.iter().sum::<f64>() + self.activation.iter().sum::<f64>()
    }

    pub fn total(&self) -> f64 {
        self.projection_total() + self.output
    }
}

/// Activations recorded by one forward pass.
#[derive(Clone, Debug)]
pub(crate) struct ForwardTrace {
    /// `xs[k]` is the input of layer k; `xs[L]` is the final output.
    pub xs: Vec<DVector<f64>>,
    /// Pre-activations `b + z` per layer.
    pub us: Vec<DVector<f64>>,
}

/// Composite map of a collapsed Gaussian group.
pub(crate) struct Group {
    pub len: usize,
    /// `W_0 W_1 ... W_{len-1}`.
    pub composite: LayerSpec,
    /// Feature of the group's last layer at a zero input.
    pub offset: DVector<f64>,
}

/// Gradient of an objective in one layer's weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl NetworkModel {
    /// Assemble and validate a network.
    pub fn new(layers: Vec<LayerSpec>, output: OutputDensitySpec) -> Result<NetworkModel> {
        let net = NetworkModel {
            layers,
            gaussian_group_len: 0,
            tap: None,
            output,
            spa_order: SpaOrder::First,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn with_gaussian_group(mut self, len: usize) -> Result<NetworkModel> {
        self.gaussian_group_len = len;
        self.validate()?;
        Ok(self)
    }

    pub fn with_tap(mut self, tap: usize) -> Result<NetworkModel> {
        self.tap = Some(tap);
        self.validate()?;
        Ok(self)
    }

    pub fn with_spa_order(mut self, order: SpaOrder) -> NetworkModel {
        self.spa_order = order;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .first()
            .map_or(self.output.num_classes, |l| l.n_in())
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .last()
            .map_or(self.output.num_classes, |l| l.n_out())
    }

    pub fn validate(&self) -> Result<()> {
        for (k, pair) in self.layers.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if a.n_out() != b.n_in() {
                return Err(PbnError::Dimension(format!(
                    "layer {k} produces {} values but layer {} takes {}",
                    a.n_out(),
                    k + 1,
                    b.n_in()
                )));
            }
            if a.activation.downstream_family() != b.input_family.family {
                return Err(PbnError::Config(format!(
                    "layer {} prior {} does not match the {} activation of layer {k}",
                    k + 1,
                    b.input_family.name(),
                    a.activation.name()
                )));
            }
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.n_out() >= l.n_in() {
                return Err(PbnError::Dimension(format!(
                    "layer {k} is not dimension-reducing ({} -> {})",
                    l.n_in(),
                    l.n_out()
                )));
            }
        }
        if self.gaussian_group_len > self.layers.len() {
            return Err(PbnError::Config(
                "Gaussian group longer than the network".into(),
            ));
        }
        for (k, l) in self.layers.iter().take(self.gaussian_group_len).enumerate() {
            if l.activation != Activation::Linear
                || (k > 0 && l.input_family.family != Family::Gaussian)
            {
                return Err(PbnError::Config(format!(
                    "layer {k} in the Gaussian group must be linear with a Gaussian prior"
                )));
            }
        }
        if let Some(t) = self.tap {
            if t > self.layers.len() {
                return Err(PbnError::Config(format!(
                    "tap depth {t} exceeds {} layers",
                    self.layers.len()
                )));
            }
        }
        if self.output.kind != OutputKind::None && self.output.num_classes != self.output_dim() {
            return Err(PbnError::Dimension(format!(
                "output density has dimension {}, network produces {}",
                self.output.num_classes,
                self.output_dim()
            )));
        }
        if self.output.kind == OutputKind::TedIndicator {
            let ok = self
                .layers
                .last()
                .is_some_and(|l| l.activation == Activation::Family(Family::TruncExponential));
            if !ok
                || self.output.class_index >= self.output.num_classes
                || !(self.output.confidence > 0.0)
            {
                return Err(PbnError::Config(
                    "indicator output needs a final TED activation, a valid class and C > 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// Forward pass through the first `depth` layers.
    pub(crate) fn forward_trace(&self, x: &DVector<f64>, depth: usize) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(PbnError::Dimension(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut xs = Vec::with_capacity(depth + 1);
        let mut us = Vec::with_capacity(depth);
        xs.push(x.clone());
        for (k, layer) in self.layers.iter().take(depth).enumerate() {
            let (z, y) = layer.forward(&xs[k]).map_err(|e| e.in_layer(k))?;
            us.push(&layer.b + z);
            xs.push(y);
        }
        Ok(ForwardTrace { xs, us })
    }

    /// Final output `y` and pre-activations (logits) of the last layer.
    pub fn forward(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let t = self.forward_trace(x, self.layers.len())?;
        let logits = t.us.last().cloned().unwrap_or_else(|| x.clone());
        Ok((t.xs.last().unwrap().clone(), logits))
    }

    /// The collapsed group for evaluations truncated at `depth`.
    pub(crate) fn group(&self, depth: usize) -> Result<Option<Group>> {
        let len = self.gaussian_group_len.min(depth);
        if len < 2 {
            return Ok(None);
        }
        let mut a = self.layers[0].w.clone();
        for l in &self.layers[1..len] {
            a = &a * &l.w;
        }
        let composite = LayerSpec::new(
            a.clone(),
            DVector::zeros(a.ncols()),
            self.layers[0].input_family.family,
            Activation::Linear,
        )?;
        // propagate a zero input through the intermediate biases
        let mut c = DVector::zeros(self.layers[0].n_out());
        for k in 1..len {
            c = self.layers[k].w.tr_mul(&(&self.layers[k - 1].b + &c));
        }
        Ok(Some(Group {
            len,
            composite,
            offset: c,
        }))
    }

    /// Log-likelihood terms of the first `depth` layers and the features at
    /// that depth.
    pub fn likelihood_to_depth(
        &self,
        x: &DVector<f64>,
        depth: usize,
    ) -> Result<(f64, DVector<f64>)> {
        let depth = depth.min(self.layers.len());
        let parts = self.parts_to_depth(x, depth)?;
        Ok((parts.projection_total(), parts.y))
    }

    fn parts_to_depth(&self, x: &DVector<f64>, depth: usize) -> Result<LikelihoodParts> {
        let trace = self.forward_trace(x, depth)?;
        let group = self.group(depth)?;
        let start = group.as_ref().map_or(0, |g| g.len);
        let mut log_j = vec![0.0; depth];
        let mut activation = vec![0.0; depth];
        if let Some(g) = &group {
            log_j[0] = g
                .composite
                .log_j_with(&trace.xs[0], self.spa_order)
                .map_err(|e| e.in_layer(0))?;
        }
        for k in start..depth {
            log_j[k] = self.layers[k]
                .log_j_with(&trace.xs[k], self.spa_order)
                .map_err(|e| e.in_layer(k))?;
        }
        for k in 0..depth {
            activation[k] = self.layers[k]
                .activation_log_jacobian(&trace.us[k])
                .map_err(|e| e.in_layer(k))?
                .0;
        }
        Ok(LikelihoodParts {
            log_j,
            activation,
            output: 0.0,
            y: trace.xs[depth].clone(),
        })
    }

    /// Full breakdown of `log G(x)`.
    pub fn likelihood_parts(&self, x: &DVector<f64>) -> Result<LikelihoodParts> {
        let mut parts = self.parts_to_depth(x, self.layers.len())?;
        parts.output = self.output.log_density(&parts.y)?;
        Ok(parts)
    }

    /// `log G(x)`: accumulated log J-functions and activation Jacobians plus
    /// the output feature density.
    pub fn log_likelihood(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.likelihood_parts(x)?.total())
    }

    /// Gradient of `ll_weight * log G(x) + dlogits . u_last` in every layer.
    /// The log-likelihood value is returned when `ll_weight != 0`.
    pub(crate) fn objective_grad(
        &self,
        x: &DVector<f64>,
        group: Option<&Group>,
        ll_weight: f64,
        dlogits: Option<&DVector<f64>>,
    ) -> Result<(Option<f64>, Vec<LayerGrad>)> {
        let depth = self.layers.len();
        let trace = self.forward_trace(x, depth)?;
        let with_ll = ll_weight != 0.0;
        let mut grads: Vec<LayerGrad> = self
            .layers
            .iter()
            .map(|l| LayerGrad {
                w: DMatrix::zeros(l.n_in(), l.n_out()),
                b: DVector::zeros(l.n_out()),
            })
            .collect();
        let mut value = 0.0;
        let mut gy = DVector::zeros(trace.xs[depth].len());
        if with_ll {
            let (v, g) = self.output.log_density_grad(&trace.xs[depth])?;
            value += v;
            gy = ll_weight * g;
        }
        let group_len = group.map_or(0, |g| g.len);
        for k in (0..depth).rev() {
            let layer = &self.layers[k];
            let u = &trace.us[k];
            let mut gu = DVector::zeros(u.len());
            let mut act_grad = DVector::zeros(u.len());
            let mut act_value = 0.0;
            for i in 0..u.len() {
                let (_, log_slope, dlog) = layer
                    .activation
                    .eval_with_log_slope(u[i])
                    .map_err(|e| e.in_layer(k))?;
                gu[i] = gy[i] * log_slope.exp();
                act_value += log_slope;
                act_grad[i] = dlog;
            }
            if with_ll {
                value += act_value;
                gu += ll_weight * act_grad;
            }
            if k + 1 == depth {
                if let Some(d) = dlogits {
                    gu += d;
                }
            }
            let xk = &trace.xs[k];
            grads[k].b = gu.clone();
            grads[k].w = xk * gu.transpose();
            let mut gx = &layer.w * &gu;
            if with_ll && k >= group_len {
                let j = layer.log_j_grad(xk).map_err(|e| e.in_layer(k))?;
                value += j.value;
                grads[k].w += ll_weight * j.d_w;
                gx += ll_weight * j.d_x;
            }
            gy = gx;
        }
        if with_ll {
            if let Some(g) = group {
                let j = g
                    .composite
                    .log_j_grad(&trace.xs[0])
                    .map_err(|e| e.in_layer(0))?;
                value += j.value;
                // A = P_j W_j Q_j, so dA maps to P_j' dA Q_j'.
                let mut prefix = DMatrix::identity(self.layers[0].n_in(), self.layers[0].n_in());
                for jdx in 0..g.len {
                    let mut suffix =
                        DMatrix::identity(self.layers[jdx].n_out(), self.layers[jdx].n_out());
                    for l in &self.layers[jdx + 1..g.len] {
                        suffix = &suffix * &l.w;
                    }
                    grads[jdx].w += ll_weight * (prefix.transpose() * &j.d_w * suffix.transpose());
                    prefix = &prefix * &self.layers[jdx].w;
                }
            }
        }
        Ok((with_ll.then_some(value), grads))
    }

    /// D-PBN reconstruction: forward to the final feature, then conditional
    /// means back down with activation bypass between layers.
    pub fn reconstruct(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let depth = self.layers.len();
        let trace = self.forward_trace(x, depth)?;
        if depth == 0 {
            return Ok(x.clone());
        }
        let group = self.group(depth)?;
        let mut z = &trace.us[depth - 1] - &self.layers[depth - 1].b;
        for k in (0..depth).rev() {
            if let Some(g) = group.as_ref().filter(|g| k + 1 == g.len) {
                return g
                    .composite
                    .conditional_mean(&(z - &g.offset))
                    .map_err(|e| e.in_layer(k));
            }
            let layer = &self.layers[k];
            let s = layer.saddle(&z, None).map_err(|e| e.in_layer(k))?;
            if k == 0 {
                return Ok(s.mean);
            }
            z = &s.a - &self.layers[k - 1].b;
        }
        unreachable!("loop returns at layer 0")
    }

    /// Draw an input by sampling the output density and walking back down
    /// the layers, retrying after a sampling failure up to `retry_cap` times.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R, retry_cap: usize) -> Result<DVector<f64>> {
        let mut last = None;
        for _ in 0..=retry_cap {
            match self.generate_once(rng) {
                Ok(x) => return Ok(x),
                Err(
                    e @ (PbnError::SamplingFailure { .. }
                    | PbnError::Range { .. }
                    | PbnError::Parameter { .. }),
                ) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn generate_once<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let y = self.output.sample(rng)?;
        let depth = self.layers.len();
        if depth == 0 {
            return Ok(y);
        }
        let group = self.group(depth)?;
        let invert = |layer: &LayerSpec, v: &DVector<f64>| -> Result<DVector<f64>> {
            let mut z = DVector::zeros(v.len());
            for i in 0..v.len() {
                z[i] = layer.activation.invert(v[i])? - layer.b[i];
            }
            Ok(z)
        };
        let mut z = invert(&self.layers[depth - 1], &y)?;
        for k in (0..depth).rev() {
            if let Some(g) = group.as_ref().filter(|g| k + 1 == g.len) {
                return g
                    .composite
                    .sample_given_z(&(z - &g.offset), sample_mode(&g.composite), rng)
                    .map_err(|e| e.in_layer(k));
            }
            let layer = &self.layers[k];
            let x = layer
                .sample_given_z(&z, sample_mode(layer), rng)
                .map_err(|e| e.in_layer(k))?;
            if k == 0 {
                return Ok(x);
            }
            z = invert(&self.layers[k - 1], &x)?;
        }
        unreachable!("loop returns at layer 0")
    }
}

fn sample_mode(layer: &LayerSpec) -> SampleMode {
    if layer.input_family.family == Family::Gaussian {
        SampleMode::ExactGaussian
    } else {
        SampleMode::Surrogate
    }
}

/// `log sum_i w_i G_i(x)`; failed components contribute nothing.
pub fn mixture_log_likelihood(
    nets: &[NetworkModel],
    weights: &[f64],
    x: &DVector<f64>,
) -> Result<f64> {
    if nets.len() != weights.len() || nets.is_empty() {
        return Err(PbnError::Dimension(
            "one weight per mixture component is required".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(PbnError::Config(
            "mixture weights must be nonnegative and sum to 1".into(),
        ));
    }
    let mut terms = Vec::with_capacity(nets.len());
    for (net, w) in nets.iter().zip(weights) {
        match net.log_likelihood(x) {
            Ok(v) => terms.push(v + w.ln()),
            Err(e) if e.is_sampling_failure() => terms.push(f64::NEG_INFINITY),
            Err(e) => return Err(e),
        }
    }
    let v = log_sum_exp(&terms);
    if v == f64::NEG_INFINITY {
        return Err(PbnError::AllFailed);
    }
    Ok(v)
}

/// Index of the first maximal finite entry.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() || s == f64::NEG_INFINITY {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Pick the class with the largest `log G_i(x) + log P(i)`; a class whose
/// saddle-point solve fails scores `-inf`.
pub fn classify(
    models: &[NetworkModel],
    x: &DVector<f64>,
    log_priors: Option<&[f64]>,
) -> Result<(usize, Vec<f64>)> {
    if let Some(p) = log_priors {
        if p.len() != models.len() {
            return Err(PbnError::Dimension(
                "one prior per class is required".into(),
            ));
        }
    }
    let mut scores = Vec::with_capacity(models.len());
    for (i, model) in models.iter().enumerate() {
        let prior = log_priors.map_or(0.0, |p| p[i]);
        match model.log_likelihood(x) {
            Ok(v) => scores.push(v + prior),
            Err(e) if e.is_sampling_failure() => scores.push(f64::NEG_INFINITY),
            Err(e) => return Err(e),
        }
    }
    let best = argmax_first(&scores).ok_or(PbnError::Classification)?;
    Ok((best, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gauss_layer(n: usize, m: usize, seed: u64, act: Activation) -> LayerSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DMatrix::from_fn(n, m, |_, _| {
            rng.sample::<f64, _>(StandardNormal) / (n as f64).sqrt()
        });
        let b = DVector::from_fn(m, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        LayerSpec::new(w, b, Family::Gaussian, act).unwrap()
    }

    #[test]
    fn indicator_examples() {
        let spec = OutputDensitySpec::ted_indicator(0, 2, 1.0);
        let v = spec
            .log_density(&DVector::from_vec(vec![1.0, 0.0]))
            .unwrap();
        assert!((v - 0.9174).abs() < 1e-4);
        let tiny = OutputDensitySpec::ted_indicator(0, 2, 1e-12);
        assert!(
            tiny.log_density(&DVector::from_vec(vec![0.3, 0.9]))
                .unwrap()
                .abs()
                < 1e-11
        );
        assert!(spec
            .log_density(&DVector::from_vec(vec![1.2, 0.0]))
            .is_err());
    }

    #[test]
    fn zero_layer_standard_normal() {
        let net = NetworkModel::new(vec![], OutputDensitySpec::standard_normal(3)).unwrap();
        let x = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let expect = -0.5 * x.norm_squared() - 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((net.log_likelihood(&x).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn validation_rejects_mismatches() {
        let a = gauss_layer(5, 3, 1, Activation::Family(Family::TruncGaussian));
        let b = gauss_layer(3, 2, 2, Activation::Linear);
        // layer 1 prior must be truncated Gaussian
        assert!(NetworkModel::new(vec![a, b], OutputDensitySpec::standard_normal(2)).is_err());
        let c = gauss_layer(3, 3, 3, Activation::Linear);
        assert!(NetworkModel::new(vec![c], OutputDensitySpec::standard_normal(3)).is_err());
    }

    #[test]
    fn chain_rule_sum() {
        let l0 = gauss_layer(5, 4, 1, Activation::Family(Family::TruncGaussian));
        let mut l1 = gauss_layer(4, 3, 2, Activation::Linear);
        l1.input_family = Family::TruncGaussian.spec();
        let net = NetworkModel::new(
            vec![l0.clone(), l1.clone()],
            OutputDensitySpec::standard_normal(3),
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.2, -0.3, 0.8, 1.0, -0.5]);
        let (z0, y0) = l0.forward(&x).unwrap();
        let (_, y1) = l1.forward(&y0).unwrap();
        let act = l0.activation_log_jacobian(&(&l0.b + z0)).unwrap().0;
        let expect = l0.log_j(&x).unwrap()
            + l1.log_j(&y0).unwrap()
            + act
            + net.output.log_density(&y1).unwrap();
        assert!((net.log_likelihood(&x).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn reconstruct_recovers_final_feature() {
        let l0 = gauss_layer(6, 4, 5, Activation::Family(Family::TruncExponential));
        let mut l1 = gauss_layer(4, 2, 6, Activation::Linear);
        l1.input_family = Family::TruncExponential.spec();
        let net = NetworkModel::new(vec![l0, l1], OutputDensitySpec::standard_normal(2)).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1, 0.0, -0.4]);
        let r = net.reconstruct(&x).unwrap();
        let (y, _) = net.forward(&x).unwrap();
        let (y2, _) = net.forward(&r).unwrap();
        assert!((y - y2).amax() < 1e-6);
        let rr = net.reconstruct(&r).unwrap();
        assert!((rr - r).amax() < 1e-8);
    }

    #[test]
    fn argmax_tie_break_and_failures() {
        assert_eq!(argmax_first(&[-5.0, -3.0, -9.0]), Some(1));
        assert_eq!(argmax_first(&[1.0, 1.0]), Some(0));
        assert_eq!(argmax_first(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), None);
    }

    #[test]
    fn identical_models_tie_to_class_zero() {
        let net = NetworkModel::new(
            vec![gauss_layer(3, 2, 1, Activation::Linear)],
            OutputDensitySpec::standard_normal(2),
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let (c, s) = classify(&[net.clone(), net], &x, None).unwrap();
        assert_eq!(c, 0);
        assert_eq!(s[0], s[1]);
    }

    #[test]
    fn generated_ted_inputs_stay_in_unit_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = DMatrix::from_row_slice(4, 2, &[8.0, 0.0, -8.0, 0.0, 0.0, 8.0, 0.0, -8.0]);
        let l = LayerSpec::new(
            w,
            DVector::zeros(2),
            Family::TruncExponential,
            Activation::Family(Family::TruncExponential),
        )
        .unwrap();
        let net = NetworkModel::new(vec![l], OutputDensitySpec::ted_indicator(1, 2, 2.0)).unwrap();
        for _ in 0..200 {
            let x = net.generate(&mut rng, DEFAULT_RETRY_CAP).unwrap();
            assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
