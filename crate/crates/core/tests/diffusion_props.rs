mod common;

use common::normal_matrix;
use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use robust_diffusion::diffusion::{
    cfg_score, heun_sample, perturb, Denoiser, NoiseSchedule, Preconditioning,
};
use robust_diffusion::network::{Cond, NetworkSpec, ScoreNetwork};

/// `D(x, σ) = x / (1 + σ²)`, written out independently of the library's copy.
struct UnitGaussian;

impl Denoiser for UnitGaussian {
    fn x_dim(&self) -> usize {
        2
    }
    fn denoise_rows(
        &self,
        x: ArrayView2<'_, f64>,
        sigmas: &[f64],
        _: ArrayView2<'_, f64>,
    ) -> robust_diffusion::Result<Array2<f64>> {
        let mut out = x.to_owned();
        for (mut row, s) in out.rows_mut().into_iter().zip(sigmas) {
            row /= 1.0 + s * s;
        }
        Ok(out)
    }
}

fn tiny_net(seed: u64) -> ScoreNetwork {
    let spec = NetworkSpec {
        trunk_width: 16,
        trunk_depth: 2,
        head_width: 8,
        ..NetworkSpec::default()
    };
    ScoreNetwork::new(spec, Preconditioning::default(), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sigma_grid_descends_within_range(
        sigma_min in 1e-4f64..1.0,
        ratio in 1.001f64..1e5,
        rho in 1.0f64..10.0,
        n in 2usize..60,
    ) {
        let s = NoiseSchedule::new(sigma_min, sigma_min * ratio, rho, n).unwrap();
        let g = s.sigma_grid();
        prop_assert_eq!(g.len(), n + 1);
        prop_assert_eq!(g[0], s.sigma_max);
        prop_assert_eq!(g[n - 1], s.sigma_min);
        prop_assert_eq!(g[n], 0.0);
        for w in g.windows(2) {
            prop_assert!(w[0] > w[1], "{} !> {}", w[0], w[1]);
        }
        prop_assert!(g.iter().all(|&v| (0.0..=s.sigma_max).contains(&v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_and_denoised_are_related_exactly(
        seed in 0u64..1000,
        x in prop::array::uniform2(-5.0f64..5.0),
        log_sigma in -6.0f64..4.4,
        c in prop::array::uniform4(-1.0f64..1.0),
    ) {
        let net = tiny_net(seed);
        let sigma = log_sigma.exp();
        for cond in [Cond::Vector(&c), Cond::Uncond] {
            let out = net.denoise(&x, sigma, cond).unwrap();
            for j in 0..2 {
                let want = (out.denoised[j] - x[j]) / (sigma * sigma);
                prop_assert_eq!(out.score[j].to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn unit_guidance_is_bitwise_conditional(
        seed in 0u64..1000,
        x in prop::array::uniform2(-5.0f64..5.0),
        log_sigma in -6.0f64..4.4,
        c in prop::array::uniform4(-1.0f64..1.0),
    ) {
        let net = tiny_net(seed);
        let sigma = log_sigma.exp();
        let guided = cfg_score(&net, &x, sigma, &c, 1.0).unwrap();
        let cond = net.denoise(&x, sigma, Cond::Vector(&c)).unwrap().score;
        prop_assert_eq!(
            guided.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            cond.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn perturbation_variance_matches_sigma_squared() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = [0.3, -1.7];
    for sigma in [0.01, 0.5, 3.0, 80.0] {
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let x = perturb(&x0, sigma, &eps).unwrap();
            for j in 0..2 {
                let d = x[j] - x0[j];
                sum[j] += d;
                sq[j] += d * d;
            }
        }
        for j in 0..2 {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            let rel = (var / (sigma * sigma) - 1.0).abs();
            assert!(rel < 0.03, "sigma {sigma} coord {j}: variance ratio off by {rel}");
        }
    }
}

#[test]
fn heun_recovers_standard_normal_moments() {
    let schedule = NoiseSchedule::default().with_nfe(35).unwrap();
    let cond = Array2::zeros((10_000, 0));
    let x = heun_sample(&UnitGaussian, cond.view(), 1.0, &schedule, 0).unwrap();
    for j in 0..2 {
        let col = x.column(j);
        let mean = col.mean().unwrap();
        let var = col.var(0.0);
        assert!(mean.abs() < 0.05, "coord {j}: mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "coord {j}: variance {var}");
    }
}

/// Scalar replay of the Heun walk for a linear denoiser `D(x, σ) = x·g(σ)`.
fn heun_gain(g: impl Fn(f64) -> f64, grid: &[f64]) -> f64 {
    let mut x = 1.0;
    for w in grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        let slope = (x - x * g(a)) / a;
        let pred = x + (b - a) * slope;
        x = if b == 0.0 {
            pred
        } else {
            x + (b - a) * 0.5 * (slope + (pred - pred * g(b)) / b)
        };
    }
    x
}

#[test]
fn heun_matches_scalar_replay_for_scaled_gaussians() {
    struct Scaled(f64);
    impl Denoiser for Scaled {
        fn x_dim(&self) -> usize {
            2
        }
        fn denoise_rows(
            &self,
            x: ArrayView2<'_, f64>,
            sigmas: &[f64],
            _: ArrayView2<'_, f64>,
        ) -> robust_diffusion::Result<Array2<f64>> {
            let s2 = self.0 * self.0;
            let mut out = x.to_owned();
            for (mut row, s) in out.rows_mut().into_iter().zip(sigmas) {
                row *= s2 / (s2 + s * s);
            }
            Ok(out)
        }
    }
    let schedule = NoiseSchedule::default();
    let grid = schedule.sigma_grid();
    let cond = Array2::zeros((4, 0));
    for scale in [0.15, 0.5, 2.0] {
        let s2 = scale * scale;
        let gain = heun_gain(|s| s2 / (s2 + s * s), &grid);
        // The exact flow contracts by s/√(s² + σ_max²); 18 steps stay within 10%.
        let exact = scale / (s2 + schedule.sigma_max * schedule.sigma_max).sqrt();
        assert!((gain / exact - 1.0).abs() < 0.1, "scale {scale}: {gain} vs {exact}");
        let x = heun_sample(&Scaled(scale), cond.view(), 1.0, &schedule, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let start = normal_matrix(&mut rng, 4, 2, schedule.sigma_max);
        for (got, s) in x.iter().zip(start.iter()) {
            let want = s * gain;
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-3), "scale {scale}: {got} vs {want}");
        }
    }
}
