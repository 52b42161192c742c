//! Demonstration-side diffusion: the Karras σ grid, the forward perturbation
//! kernel, denoiser preconditioning, the weighted denoising loss, guidance and
//! the deterministic Heun sampler.

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape, Result};

/// Karras et al. noise levels: `σ_i = (σ_max^{1/ρ} + i/(N−1)·(σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub num_steps: usize,
}

impl Default for NoiseSchedule {
    /// 18 steps, i.e. 35 denoiser evaluations with the Heun sampler.
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            num_steps: 18,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, rho: f64, num_steps: usize) -> Result<Self> {
        let s = Self {
            sigma_min,
            sigma_max,
            rho,
            num_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(invalid("noise schedule needs 0 < sigma_min < sigma_max"));
        }
        if !(self.rho >= 1.0 && self.rho.is_finite()) {
            return Err(invalid("noise schedule needs rho >= 1"));
        }
        if self.num_steps < 2 {
            return Err(invalid("noise schedule needs at least 2 steps"));
        }
        Ok(())
    }

    /// Schedule whose Heun sampler uses `nfe` evaluations (`nfe = 2N − 1`).
    pub fn with_nfe(self, nfe: usize) -> Result<Self> {
        if nfe < 3 || nfe % 2 == 0 {
            return Err(invalid("NFE must be odd and at least 3"));
        }
        let s = Self {
            num_steps: (nfe + 1) / 2,
            ..self
        };
        s.validate()?;
        Ok(s)
    }

    pub fn nfe(&self) -> usize {
        2 * self.num_steps - 1
    }

    /// Descending σ values, `num_steps` of them, followed by a trailing 0.
    pub fn sigma_grid(&self) -> Vec<f64> {
        let n = self.num_steps;
        let inv = 1.0 / self.rho;
        let hi = self.sigma_max.powf(inv);
        let lo = self.sigma_min.powf(inv);
        let mut grid: Vec<f64> = (0..n)
            .map(|i| {
                if i == 0 {
                    self.sigma_max
                } else if i == n - 1 {
                    self.sigma_min
                } else {
                    (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(self.rho)
                }
            })
            .collect();
        grid.push(0.0);
        grid
    }
}

/// `x_t = x0 + σ·ε`.
pub fn perturb(x0: &[f64], sigma: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(invalid("noise level must be non-negative"));
    }
    if x0.len() != eps.len() {
        return Err(shape("noise and sample dimensions differ"));
    }
    Ok(x0.iter().zip(eps).map(|(x, e)| x + sigma * e).collect())
}

/// Denoiser preconditioning and loss weighting parameterized by the data std.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioning {
    pub sigma_data: f64,
}

impl Default for Preconditioning {
    fn default() -> Self {
        Self { sigma_data: 0.5 }
    }
}

impl Preconditioning {
    pub fn c_skip(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sigma * sigma + sd2)
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        sigma * self.sigma_data / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_noise(&self, sigma: f64) -> f64 {
        sigma.ln() / 4.0
    }

    /// λ(σ) = (σ² + σ_d²) / (σ·σ_d)².
    pub fn loss_weight(&self, sigma: f64) -> f64 {
        let sd = self.sigma_data;
        (sigma * sigma + sd * sd) / (sigma * sd).powi(2)
    }
}

/// Training noise levels with `ln σ ~ N(p_mean, p_std²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalSigma {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for LogNormalSigma {
    fn default() -> Self {
        Self {
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl LogNormalSigma {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.p_mean + self.p_std * z).exp()
    }
}

/// A denoised estimate and the score it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub denoised: Vec<f64>,
    pub score: Vec<f64>,
}

impl DenoiserOutput {
    /// `score = (denoised − x_t) / σ²`.
    pub fn from_denoised(x_t: &[f64], denoised: Vec<f64>, sigma: f64) -> Self {
        let s2 = sigma * sigma;
        let score = denoised.iter().zip(x_t).map(|(d, x)| (d - x) / s2).collect();
        Self { denoised, score }
    }
}

/// Anything that maps noisy rows to denoised rows.
///
/// `sigmas` holds one noise level per row and `cond` one condition row per
/// sample (all zeros for the unconditional token). Implementations that
/// ignore conditioning accept a zero-width `cond`.
pub trait Denoiser {
    fn x_dim(&self) -> usize;

    fn denoise_rows(&self, x: ArrayView2<'_, f64>, sigmas: &[f64], cond: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn x_dim(&self) -> usize {
        (**self).x_dim()
    }

    fn denoise_rows(&self, x: ArrayView2<'_, f64>, sigmas: &[f64], cond: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        (**self).denoise_rows(x, sigmas, cond)
    }
}

/// Optimal denoiser for `x0 ~ N(0, I)`: `D(x, σ) = x / (1 + σ²)`.
#[derive(Debug, Clone, Copy)]
pub struct StandardGaussianDenoiser {
    pub dim: usize,
}

impl Denoiser for StandardGaussianDenoiser {
    fn x_dim(&self) -> usize {
        self.dim
    }

    fn denoise_rows(&self, x: ArrayView2<'_, f64>, sigmas: &[f64], _cond: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = x.to_owned();
        for (mut row, s) in out.rows_mut().into_iter().zip(sigmas) {
            let k = 1.0 / (1.0 + s * s);
            row.mapv_inplace(|v| v * k);
        }
        Ok(out)
    }
}

pub(crate) fn check_rows(x: &ArrayView2<'_, f64>, sigmas: &[f64], cond: &ArrayView2<'_, f64>) -> Result<()> {
    if sigmas.len() != x.nrows() || cond.nrows() != x.nrows() {
        return Err(shape("rows, noise levels and conditions must have equal counts"));
    }
    if sigmas.iter().any(|&s| !(s > 0.0)) {
        return Err(invalid("denoising requires sigma > 0"));
    }
    Ok(())
}

/// `D_u + w·(D_c − D_u)`; exactly `D_c` when `w == 1`.
pub fn guided_denoise<D: Denoiser + ?Sized>(
    model: &D,
    x: ArrayView2<'_, f64>,
    sigmas: &[f64],
    cond: ArrayView2<'_, f64>,
    w: f64,
) -> Result<Array2<f64>> {
    if !(w >= 1.0) {
        return Err(invalid("guidance scale must be >= 1"));
    }
    let conditional = model.denoise_rows(x, sigmas, cond)?;
    if w == 1.0 {
        return Ok(conditional);
    }
    let uncond_rows = Array2::zeros(cond.raw_dim());
    let unconditional = model.denoise_rows(x, sigmas, uncond_rows.view())?;
    let mut out = unconditional.clone();
    Zip::from(&mut out)
        .and(&conditional)
        .and(&unconditional)
        .for_each(|o, &c, &u| *o = u + w * (c - u));
    Ok(out)
}

/// Guided score `s_u + w·(s_c − s_u)` for a single point; bitwise equal to the
/// conditional score when `w == 1`.
pub fn cfg_score<D: Denoiser + ?Sized>(model: &D, x_t: &[f64], sigma: f64, cond: &[f64], w: f64) -> Result<Vec<f64>> {
    if !(w >= 1.0) {
        return Err(invalid("guidance scale must be >= 1"));
    }
    let x = ArrayView2::from_shape((1, x_t.len()), x_t).map_err(|e| shape(e.to_string()))?;
    let c = ArrayView2::from_shape((1, cond.len()), cond).map_err(|e| shape(e.to_string()))?;
    let s_cond = score_row(model, x, sigma, c)?;
    if w == 1.0 {
        return Ok(s_cond);
    }
    let zeros = vec![0.0; cond.len()];
    let u = ArrayView2::from_shape((1, cond.len()), zeros.as_slice()).expect("row");
    let s_uncond = score_row(model, x, sigma, u)?;
    Ok(s_uncond
        .iter()
        .zip(&s_cond)
        .map(|(u, c)| u + w * (c - u))
        .collect())
}

fn score_row<D: Denoiser + ?Sized>(model: &D, x: ArrayView2<'_, f64>, sigma: f64, cond: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let d = model.denoise_rows(x, &[sigma], cond)?;
    let row: Vec<f64> = x.row(0).to_vec();
    Ok(DenoiserOutput::from_denoised(&row, d.row(0).to_vec(), sigma).score)
}

/// Weighted denoising loss: mean over rows of `λ(σ)·‖D(x0 + σε, σ, c) − x0‖²`.
pub fn dsm_loss<D: Denoiser + ?Sized>(
    model: &D,
    precond: &Preconditioning,
    x0: ArrayView2<'_, f64>,
    cond: ArrayView2<'_, f64>,
    sigmas: &[f64],
    eps: ArrayView2<'_, f64>,
) -> Result<f64> {
    if x0.nrows() == 0 {
        return Err(invalid("empty batch"));
    }
    if eps.dim() != x0.dim() {
        return Err(shape("noise and batch shapes differ"));
    }
    check_rows(&x0, sigmas, &cond)?;
    let mut x_t = x0.to_owned();
    for ((mut row, e), &s) in x_t.rows_mut().into_iter().zip(eps.rows()).zip(sigmas) {
        row.scaled_add(s, &e);
    }
    let denoised = model.denoise_rows(x_t.view(), sigmas, cond)?;
    let total: f64 = denoised
        .rows()
        .into_iter()
        .zip(x0.rows())
        .zip(sigmas)
        .map(|((d, x), &s)| {
            let se: f64 = d.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            precond.loss_weight(s) * se
        })
        .sum();
    Ok(total / x0.nrows() as f64)
}

/// Deterministic second-order sampler.
///
/// Draws `cond.nrows()` chains from `N(0, σ_max² I)` using `seed`, then walks
/// the σ grid: Euler predictor, Heun corrector, except the last step to σ = 0
/// which is Euler only. Rows of the result are ordered by chain index.
pub fn heun_sample<D: Denoiser + ?Sized>(
    model: &D,
    cond: ArrayView2<'_, f64>,
    w: f64,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Array2<f64>> {
    schedule.validate()?;
    let count = cond.nrows();
    if count == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    let dim = model.x_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::from_shape_simple_fn((count, dim), || {
        let z: f64 = rng.sample(StandardNormal);
        z * schedule.sigma_max
    });
    let grid = schedule.sigma_grid();
    for pair in grid.windows(2) {
        let (s_cur, s_next) = (pair[0], pair[1]);
        let sig = vec![s_cur; count];
        let d_cur = guided_denoise(model, x.view(), &sig, cond, w)?;
        // Euler step written as a convex combination so that s_next = 0 lands
        // exactly on the denoised estimate.
        let ratio = s_next / s_cur;
        let mut x_next = &x * ratio + &d_cur * (1.0 - ratio);
        if s_next > 0.0 {
            let sig_next = vec![s_next; count];
            let d_next = guided_denoise(model, x_next.view(), &sig_next, cond, w)?;
            let h = s_next - s_cur;
            let mut corrected = Array2::zeros(x.raw_dim());
            Zip::from(&mut corrected)
                .and(&x)
                .and(&d_cur)
                .and(&x_next)
                .and(&d_next)
                .for_each(|out, &xc, &dc, &xn, &dn| {
                    let slope_cur = (xc - dc) / s_cur;
                    let slope_next = (xn - dn) / s_next;
                    *out = xc + h * 0.5 * (slope_cur + slope_next);
                });
            x_next = corrected;
        }
        x = x_next;
    }
    Ok(x)
}
