//! Score network: a shared trunk, a demonstration head producing the
//! preconditioned denoiser output, and a small condition head producing the
//! condition score. All three live in one [`ParamBundle`].
//!
//! Layer order in the bundle: `trunk_depth` trunk layers, one demonstration
//! head layer, two condition head layers.

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{check_rows, Denoiser, DenoiserOutput, NoiseSchedule, Preconditioning};
use crate::error::{invalid, shape, Result};
use crate::nn::{Activation, ParamBundle, Stack};
use crate::rdc::{condition_input_scale, demo_sigma, estimate_pseudo, rdc_sigma, Quadrature};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    pub x_dim: usize,
    pub cond_dim: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub head_width: usize,
    pub activation: Activation,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            x_dim: 2,
            cond_dim: 4,
            trunk_width: 128,
            trunk_depth: 3,
            head_width: 64,
            activation: Activation::Silu,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.x_dim == 0 || self.cond_dim == 0 || self.trunk_width == 0 || self.head_width == 0 {
            return Err(invalid("network dimensions must be positive"));
        }
        if self.trunk_depth == 0 {
            return Err(invalid("trunk needs at least one layer"));
        }
        Ok(())
    }

    /// Trunk input: scaled point, noise embedding, condition.
    pub fn trunk_in(&self) -> usize {
        self.x_dim + 1 + self.cond_dim
    }

    /// Condition head input: trunk features, condition state, time embedding.
    pub fn head_in(&self) -> usize {
        self.trunk_width + self.cond_dim + 1
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.trunk_in(), self.trunk_width)];
        for _ in 1..self.trunk_depth {
            shapes.push((self.trunk_width, self.trunk_width));
        }
        shapes.push((self.trunk_width, self.x_dim));
        shapes.push((self.head_in(), self.head_width));
        shapes.push((self.head_width, self.cond_dim));
        shapes
    }
}

/// Single-point condition argument; `Uncond` is the all-zero vector.
#[derive(Debug, Clone, Copy)]
pub enum Cond<'a> {
    Vector(&'a [f64]),
    Uncond,
}

/// Time embedding fed to the condition head.
pub fn time_embedding(t: f64) -> f64 {
    t.ln() / 4.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    spec: NetworkSpec,
    precond: Preconditioning,
    params: ParamBundle,
}

impl ScoreNetwork {
    pub fn new(spec: NetworkSpec, precond: Preconditioning, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamBundle::glorot(spec.layer_shapes(), &mut rng)?;
        Ok(Self { spec, precond, params })
    }

    pub fn from_params(spec: NetworkSpec, precond: Preconditioning, params: ParamBundle) -> Result<Self> {
        spec.validate()?;
        if params.layer_shapes() != spec.layer_shapes().as_slice() {
            return Err(shape("parameter layers do not match the network spec"));
        }
        Ok(Self { spec, precond, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn precond(&self) -> &Preconditioning {
        &self.precond
    }

    pub fn params(&self) -> &ParamBundle {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamBundle {
        &mut self.params
    }

    pub fn into_params(self) -> ParamBundle {
        self.params
    }

    pub fn trunk(&self) -> Stack {
        Stack::new(0, self.spec.trunk_depth, self.spec.activation, true)
    }

    pub fn demo_head(&self) -> Stack {
        Stack::new(self.spec.trunk_depth, 1, self.spec.activation, false)
    }

    pub fn cond_head(&self) -> Stack {
        Stack::new(self.spec.trunk_depth + 1, 2, self.spec.activation, false)
    }

    /// Flat parameter range of the condition head.
    pub fn cond_head_range(&self) -> std::ops::Range<usize> {
        self.params.layer_range(self.spec.trunk_depth + 1, 2)
    }

    /// Flat parameter range of the shared trunk.
    pub fn trunk_range(&self) -> std::ops::Range<usize> {
        self.params.layer_range(0, self.spec.trunk_depth)
    }

    /// Zeroes the condition head so it outputs the zero vector everywhere.
    pub fn zero_condition_head(&mut self) {
        let range = self.cond_head_range();
        self.params.values_mut()[range].fill(0.0);
    }

    /// Rows of `[c_in(σ)·x, c_noise(σ), cond]`.
    pub fn trunk_input(&self, x: ArrayView2<'_, f64>, sigmas: &[f64], cond: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = x.nrows();
        let (xd, cd) = (self.spec.x_dim, self.spec.cond_dim);
        let mut input = Array2::zeros((n, xd + 1 + cd));
        for (r, &s) in sigmas.iter().enumerate() {
            let c_in = self.precond.c_in(s);
            for j in 0..xd {
                input[[r, j]] = c_in * x[[r, j]];
            }
            input[[r, xd]] = self.precond.c_noise(s);
        }
        input.slice_mut(s![.., xd + 1..]).assign(&cond);
        input
    }

    /// Rows of `[features, y, time_embedding(t)]`.
    pub fn head_input(&self, features: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, t: &[f64]) -> Array2<f64> {
        let (hd, yd) = (features.ncols(), y.ncols());
        let mut input = Array2::zeros((t.len(), hd + yd + 1));
        input.slice_mut(s![.., ..hd]).assign(&features);
        input.slice_mut(s![.., hd..hd + yd]).assign(&y);
        for (r, &tr) in t.iter().enumerate() {
            input[[r, hd + yd]] = time_embedding(tr);
        }
        input
    }

    fn check_cond(&self, cond: &ArrayView2<'_, f64>) -> Result<()> {
        if cond.ncols() != self.spec.cond_dim {
            return Err(shape(format!(
                "condition width {} differs from {}",
                cond.ncols(),
                self.spec.cond_dim
            )));
        }
        Ok(())
    }

    fn check_x(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.spec.x_dim {
            return Err(shape(format!("point width {} differs from {}", x.ncols(), self.spec.x_dim)));
        }
        Ok(())
    }

    /// Zeroes the last condition-head layer, so the head starts at the zero map
    /// while its hidden layer keeps its random features.
    pub fn zero_condition_output(&mut self) {
        let range = self.params.layer_range(self.spec.trunk_depth + 2, 1);
        self.params.values_mut()[range].fill(0.0);
    }

    /// Shared trunk features for each row.
    pub fn features(&self, x: ArrayView2<'_, f64>, sigmas: &[f64], cond: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_rows(&x, sigmas, &cond)?;
        self.check_x(&x)?;
        self.check_cond(&cond)?;
        self.trunk().eval(&self.params, self.trunk_input(x, sigmas, cond).view())
    }

    /// Condition score rows from trunk features, condition states and times.
    pub fn condition_score(&self, features: ArrayView2<'_, f64>, t: &[f64], y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.spec.trunk_width || y.nrows() != features.nrows() || t.len() != y.nrows() {
            return Err(shape("feature, condition and time rows must line up"));
        }
        self.check_cond(&y)?;
        if t.iter().any(|&v| !(v > 0.0)) {
            return Err(invalid("condition head times must be positive"));
        }
        self.cond_head().eval(&self.params, self.head_input(features, y, t).view())
    }

    /// Denoised estimate and score for one point.
    pub fn denoise(&self, x_t: &[f64], sigma: f64, cond: Cond<'_>) -> Result<DenoiserOutput> {
        let zeros;
        let c = match cond {
            Cond::Vector(c) => c,
            Cond::Uncond => {
                zeros = vec![0.0; self.spec.cond_dim];
                &zeros
            }
        };
        let x = ArrayView2::from_shape((1, x_t.len()), x_t).map_err(|e| shape(e.to_string()))?;
        let cv = ArrayView2::from_shape((1, c.len()), c).map_err(|e| shape(e.to_string()))?;
        let d = self.denoise_rows(x, &[sigma], cv)?;
        Ok(DenoiserOutput::from_denoised(x_t, d.row(0).to_vec(), sigma))
    }

    /// Condition score `s_φ(x_t, t, ŷ_t)` at a time index of `schedule`.
    ///
    /// The trunk sees the point at the demonstration level of that index and
    /// `ŷ_t` rescaled by [`condition_input_scale`]; the head sees the trunk
    /// features, `ŷ_t` and `t`. The `t = 0` end is clamped to `σ_min`.
    pub fn condition_score_head(&self, x_t: &[f64], t_index: usize, y_t: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        let t = demo_sigma(t_index, schedule)?.max(schedule.sigma_min);
        let scale = condition_input_scale(rdc_sigma(t_index, schedule)?);
        let x = ArrayView2::from_shape((1, x_t.len()), x_t).map_err(|e| shape(e.to_string()))?;
        let y = ArrayView2::from_shape((1, y_t.len()), y_t).map_err(|e| shape(e.to_string()))?;
        let h = self.features(x, &[t], (&y * scale).view())?;
        Ok(self.condition_score(h.view(), &[t], y)?.row(0).to_vec())
    }

    /// Pseudo-condition estimate for one sample from its trunk features.
    pub fn estimate_pseudo(&self, features: &[f64], y_start: &[f64], quad: &Quadrature) -> Result<Vec<f64>> {
        let h = ArrayView2::from_shape((1, features.len()), features).map_err(|e| shape(e.to_string()))?;
        estimate_pseudo(
            |_, t, y| {
                let yv = ArrayView2::from_shape((1, y.len()), y).map_err(|e| shape(e.to_string()))?;
                Ok(self.condition_score(h, &[t], yv)?.row(0).to_vec())
            },
            y_start,
            quad,
        )
    }
}

impl Denoiser for ScoreNetwork {
    fn x_dim(&self) -> usize {
        self.spec.x_dim
    }

    /// `D = c_skip·x + c_out·F(c_in·x, c_noise, cond)`.
    fn denoise_rows(&self, x: ArrayView2<'_, f64>, sigmas: &[f64], cond: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let h = self.features(x, sigmas, cond)?;
        let f = self.demo_head().eval(&self.params, h.view())?;
        let mut out = f;
        for ((mut row, xr), &s) in out.rows_mut().into_iter().zip(x.rows()).zip(sigmas) {
            let (c_skip, c_out) = (self.precond.c_skip(s), self.precond.c_out(s));
            for (o, &xv) in row.iter_mut().zip(xr.iter()) {
                *o = c_skip * xv + c_out * *o;
            }
        }
        Ok(out)
    }
}
