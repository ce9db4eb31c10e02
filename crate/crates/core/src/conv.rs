//! 2-D convolution over a time x frequency x channel map, materialized as
//! the dense weight matrix used by the J-function math. Zero padding only
//! removes taps, so the padded map is never materialized.
//!
//! Maps are flattened time-major: element `(t, f, c)` of a `T x F x C` map
//! sits at `(t * F + f) * C + c`. Kernels are stored as
//! `[kernel_t][kernel_f][in_ch][out_ch]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{PbnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub in_time: usize,
    pub in_freq: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel_t: usize,
    pub kernel_f: usize,
    pub stride_t: usize,
    pub stride_f: usize,
    /// Zero padding on each side of the time and frequency axes.
    pub pad_t: usize,
    pub pad_f: usize,
}

impl Conv2d {
    /// Unpadded geometry.
    #[allow(clippy::too_many_arguments)]
    pub fn valid(
        in_time: usize,
        in_freq: usize,
        in_ch: usize,
        out_ch: usize,
        kernel_t: usize,
        kernel_f: usize,
        stride_t: usize,
        stride_f: usize,
    ) -> Conv2d {
        Conv2d {
            in_time,
            in_freq,
            in_ch,
            out_ch,
            kernel_t,
            kernel_f,
            stride_t,
            stride_f,
            pad_t: 0,
            pad_f: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_time,
            self.in_freq,
            self.in_ch,
            self.out_ch,
            self.kernel_t,
            self.kernel_f,
            self.stride_t,
            self.stride_f,
        ];
        if positive.contains(&0) {
            return Err(PbnError::Config(
                "convolution sizes must be positive".into(),
            ));
        }
        if self.pad_t >= self.kernel_t || self.pad_f >= self.kernel_f {
            return Err(PbnError::Config(
                "convolution padding must be smaller than the kernel".into(),
            ));
        }
        if self.kernel_t > self.in_time + 2 * self.pad_t
            || self.kernel_f > self.in_freq + 2 * self.pad_f
        {
            return Err(PbnError::Config(
                "convolution kernel larger than its input".into(),
            ));
        }
        Ok(())
    }

    pub fn out_time(&self) -> usize {
        (self.in_time + 2 * self.pad_t - self.kernel_t) / self.stride_t + 1
    }

    pub fn out_freq(&self) -> usize {
        (self.in_freq + 2 * self.pad_f - self.kernel_f) / self.stride_f + 1
    }

    pub fn n_in(&self) -> usize {
        self.in_time * self.in_freq * self.in_ch
    }

    pub fn n_out(&self) -> usize {
        self.out_time() * self.out_freq() * self.out_ch
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_t * self.kernel_f * self.in_ch * self.out_ch
    }

    fn in_index(&self, t: usize, f: usize, c: usize) -> usize {
        (t * self.in_freq + f) * self.in_ch + c
    }

    fn out_index(&self, t: usize, f: usize, c: usize) -> usize {
        (t * self.out_freq() + f) * self.out_ch + c
    }

    fn kernel_index(&self, dt: usize, df: usize, ci: usize, co: usize) -> usize {
        ((dt * self.kernel_f + df) * self.in_ch + ci) * self.out_ch + co
    }

    /// Visit every (input index, output index, kernel index) triple.
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, usize)) {
        for t in 0..self.out_time() {
            for f in 0..self.out_freq() {
                for co in 0..self.out_ch {
                    let o = self.out_index(t, f, co);
                    for dt in 0..self.kernel_t {
                        let Some(ti) = (t * self.stride_t + dt)
                            .checked_sub(self.pad_t)
                            .filter(|&v| v < self.in_time)
                        else {
                            continue;
                        };
                        for df in 0..self.kernel_f {
                            let Some(fi) = (f * self.stride_f + df)
                                .checked_sub(self.pad_f)
                                .filter(|&v| v < self.in_freq)
                            else {
                                continue;
                            };
                            for ci in 0..self.in_ch {
                                visit(
                                    self.in_index(ti, fi, ci),
                                    o,
                                    self.kernel_index(dt, df, ci, co),
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    fn check_kernel(&self, kernel: &[f64]) -> Result<()> {
        if kernel.len() != self.kernel_len() {
            return Err(PbnError::Dimension(format!(
                "kernel has {} values, geometry needs {}",
                kernel.len(),
                self.kernel_len()
            )));
        }
        Ok(())
    }

    /// Dense N x M weight matrix with `z = W' x` equal to the convolution.
    pub fn materialize(&self, kernel: &[f64]) -> Result<DMatrix<f64>> {
        self.check_kernel(kernel)?;
        let mut w = DMatrix::zeros(self.n_in(), self.n_out());
        self.for_each_tap(|i, o, k| w[(i, o)] = kernel[k]);
        Ok(w)
    }

    /// Direct convolution, without bias.
    pub fn apply(&self, kernel: &[f64], x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_kernel(kernel)?;
        if x.len() != self.n_in() {
            return Err(PbnError::Dimension(format!(
                "map has {} values, geometry needs {}",
                x.len(),
                self.n_in()
            )));
        }
        let mut z = DVector::zeros(self.n_out());
        self.for_each_tap(|i, o, k| z[o] += kernel[k] * x[i]);
        Ok(z)
    }

    /// Read the kernel back out of a materialized matrix.
    pub fn extract_kernel(&self, w: &DMatrix<f64>) -> Vec<f64> {
        let mut kernel = vec![0.0; self.kernel_len()];
        self.for_each_tap(|i, o, k| kernel[k] = w[(i, o)]);
        kernel
    }

    /// Sum a dense gradient onto the shared kernel entries.
    pub fn fold_gradient(&self, g: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.kernel_len()];
        self.for_each_tap(|i, o, k| out[k] += g[(i, o)]);
        out
    }

    /// Per-channel bias broadcast over every output position.
    pub fn expand_bias(&self, channel_bias: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.n_out(), |o, _| channel_bias[o % self.out_ch])
    }

    pub fn extract_bias(&self, b: &DVector<f64>) -> Vec<f64> {
        b.iter().take(self.out_ch).copied().collect()
    }

    pub fn fold_bias_gradient(&self, g: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.out_ch];
        for (o, v) in g.iter().enumerate() {
            out[o % self.out_ch] += v;
        }
        out
    }
}
