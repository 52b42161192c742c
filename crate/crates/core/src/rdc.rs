//! Reverse-time diffusion of the pseudo condition.
//!
//! Time indices `k ∈ [0, N]` run from the `t = 0` end to the `t = T` end of a
//! schedule with `N = num_steps`. The demonstration is clean at `k = 0` and
//! fully noised at `k = N`; the condition runs the same grid the other way, so
//! it is fully noised (σ_max) at `k = 0` and equals the pseudo condition
//! exactly at `k = N`.
//!
//! The pseudo-condition estimate integrates the probability-flow ODE
//! `dŷ/dt = −s(ŷ, t) / (2t)` from a random start with explicit Euler steps on
//! an ascending Karras grid that begins at `t_min > 0`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, shape, Error, Result};

/// Demonstration noise level at time index `k`: `grid[N − k]`.
pub fn demo_sigma(t_index: usize, schedule: &NoiseSchedule) -> Result<f64> {
    let n = schedule.num_steps;
    if t_index > n {
        return Err(invalid(format!("time index {t_index} outside [0, {n}]")));
    }
    Ok(schedule.sigma_grid()[n - t_index])
}

/// Condition noise level at time index `k`, the demonstration level at the
/// mirrored index: `demo_sigma(N − k) = grid[k]`.
pub fn rdc_sigma(t_index: usize, schedule: &NoiseSchedule) -> Result<f64> {
    let n = schedule.num_steps;
    if t_index > n {
        return Err(invalid(format!("time index {t_index} outside [0, {n}]")));
    }
    demo_sigma(n - t_index, schedule)
}

/// Boundary description of the condition process.
#[derive(Debug, Clone, PartialEq)]
pub struct RdcState {
    pub schedule: NoiseSchedule,
    /// Mean of the random start `ŷ_0`.
    pub mu: Vec<f64>,
    /// Standard deviation of the random start `ŷ_0`.
    pub sigma0: f64,
    pub cond_dim: usize,
}

impl RdcState {
    /// Zero mean, unit standard deviation start.
    pub fn new(schedule: NoiseSchedule, cond_dim: usize) -> Result<Self> {
        let s = Self {
            schedule,
            mu: vec![0.0; cond_dim],
            sigma0: 1.0,
            cond_dim,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.cond_dim == 0 || self.mu.len() != self.cond_dim {
            return Err(shape("boundary mean must have cond_dim entries"));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(invalid("boundary standard deviation must be positive"));
        }
        Ok(())
    }

    pub fn draw_start<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                m + self.sigma0 * z
            })
            .collect()
    }
}

/// `ŷ_t = ŷ + rdc_sigma(k)·ε`.
pub fn perturb_condition(y: &[f64], t_index: usize, eps: &[f64], state: &RdcState) -> Result<Vec<f64>> {
    if y.len() != state.cond_dim || eps.len() != state.cond_dim {
        return Err(shape(format!(
            "condition and noise must have {} entries",
            state.cond_dim
        )));
    }
    let s = rdc_sigma(t_index, &state.schedule)?;
    if s == 0.0 {
        return Ok(y.to_vec());
    }
    Ok(y.iter().zip(eps).map(|(a, e)| a + s * e).collect())
}

/// Factor applied to a perturbed condition before it enters the trunk:
/// `1/√(1 + s²)` at condition noise level `s`, exactly 1 for a clean condition.
pub fn condition_input_scale(s: f64) -> f64 {
    if s == 0.0 {
        1.0
    } else {
        1.0 / (1.0 + s * s).sqrt()
    }
}

/// Left-endpoint Euler rule on an ascending grid `t_0 < … < t_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    nodes: Vec<f64>,
    steps: Vec<f64>,
}

impl Quadrature {
    /// `k` nodes on the Karras grid between `t_min` and `t_max`, traversed
    /// upward.
    pub fn karras(t_min: f64, t_max: f64, rho: f64, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(invalid("quadrature needs at least one node"));
        }
        let grid = NoiseSchedule::new(t_min, t_max, rho, k + 1)?.sigma_grid();
        let mut ascending: Vec<f64> = grid[..k + 1].to_vec();
        ascending.reverse();
        let nodes = ascending[..k].to_vec();
        let steps = ascending.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self { nodes, steps })
    }

    /// `k` nodes sharing the schedule's σ_max and ρ, floored at `t_min`.
    pub fn for_schedule(schedule: &NoiseSchedule, t_min: f64, k: usize) -> Result<Self> {
        Self::karras(t_min, schedule.sigma_max, schedule.rho, k)
    }

    /// One node per interval of the schedule's own grid (without the σ = 0 tail).
    pub fn full_grid(schedule: &NoiseSchedule) -> Result<Self> {
        Self::karras(schedule.sigma_min, schedule.sigma_max, schedule.rho, schedule.num_steps - 1)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Per-node factors `Δt_k / (2 t_k)`.
    pub fn weights(&self) -> Vec<f64> {
        self.nodes.iter().zip(&self.steps).map(|(t, d)| d / (2.0 * t)).collect()
    }
}

/// Euler integration of `dŷ/dt = −s(ŷ, t)/(2t)` starting from `y_start`.
///
/// `head(node, t, y)` returns the condition score at a node.
pub fn estimate_pseudo<F>(mut head: F, y_start: &[f64], quad: &Quadrature) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64, &[f64]) -> Result<Vec<f64>>,
{
    let mut y = y_start.to_vec();
    for (node, (&t, w)) in quad.nodes().iter().zip(quad.weights()).enumerate() {
        let s = head(node, t, &y)?;
        if s.len() != y.len() {
            return Err(shape("condition score width differs from the condition"));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteNode { node });
        }
        for (yi, si) in y.iter_mut().zip(&s) {
            *yi -= w * si;
        }
    }
    Ok(y)
}

/// `‖a − b‖²`.
pub fn cond_loss(estimate: &[f64], target: &[f64]) -> Result<f64> {
    if estimate.len() != target.len() {
        return Err(shape("condition vectors differ in length"));
    }
    Ok(estimate.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum())
}
