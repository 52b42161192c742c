mod common;

use common::{central_diff, normal_matrix, rel_err, small_spec};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use robust_diffusion::diffusion::{NoiseSchedule, Preconditioning};
use robust_diffusion::network::ScoreNetwork;
use robust_diffusion::nn::{grad, Objective, ParamBundle};
use robust_diffusion::pseudo::{EarlyStopPolicy, PseudoTable};
use robust_diffusion::rdc::{cond_loss, demo_sigma, estimate_pseudo, perturb_condition, rdc_sigma, Quadrature, RdcState};

fn schedule_strategy() -> impl Strategy<Value = NoiseSchedule> {
    (1e-4f64..0.5, 2.0f64..500.0, 1.0f64..10.0, 2usize..40)
        .prop_map(|(lo, ratio, rho, n)| NoiseSchedule::new(lo, lo * ratio, rho, n).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn condition_grid_mirrors_demonstration_grid(schedule in schedule_strategy()) {
        let n = schedule.num_steps;
        let grid = schedule.sigma_grid();
        for k in 0..=n {
            prop_assert_eq!(rdc_sigma(k, &schedule).unwrap(), grid[k]);
            prop_assert_eq!(demo_sigma(k, &schedule).unwrap(), grid[n - k]);
            prop_assert_eq!(rdc_sigma(k, &schedule).unwrap(), demo_sigma(n - k, &schedule).unwrap());
        }
        prop_assert_eq!(rdc_sigma(0, &schedule).unwrap(), schedule.sigma_max);
        prop_assert_eq!(rdc_sigma(n, &schedule).unwrap(), 0.0);
        prop_assert!(rdc_sigma(n + 1, &schedule).is_err());
    }

    #[test]
    fn clean_end_is_the_identity(
        schedule in schedule_strategy(),
        y in prop::collection::vec(-1e3f64..1e3, 4),
        eps in prop::collection::vec(-1e3f64..1e3, 4),
    ) {
        let state = RdcState::new(schedule, 4).unwrap();
        let out = perturb_condition(&y, schedule.num_steps, &eps, &state).unwrap();
        prop_assert_eq!(out, y);
    }

    #[test]
    fn integral_term_scales_with_the_head(
        seed in any::<u64>(),
        k in 1usize..12,
        power in -4i32..5,
        negate in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let quad = Quadrature::karras(rng.gen_range(1e-3..0.1), rng.gen_range(1.0..80.0), 7.0, k).unwrap();
        let table: Vec<[f64; 3]> = (0..k).map(|_| [rng.gen(), rng.gen(), rng.gen()]).map(|v: [f64; 3]| v.map(|x| 2.0 * x - 1.0)).collect();
        let head = |node: usize, t: f64| -> Vec<f64> { table[node].iter().map(|c| c * t.sin()).collect() };
        let lambda = if negate { -1.0 } else { 1.0 } * 2f64.powi(power);
        let zero = [0.0; 3];
        let base = estimate_pseudo(|n, t, _| Ok(head(n, t)), &zero, &quad).unwrap();
        let scaled = estimate_pseudo(|n, t, _| Ok(head(n, t).iter().map(|v| lambda * v).collect()), &zero, &quad).unwrap();
        for (b, s) in base.iter().zip(&scaled) {
            prop_assert_eq!((lambda * b).to_bits(), s.to_bits());
        }
        // Any other factor scales the integral term up to rounding.
        let start = [0.7, -0.2, 1.5];
        let mu = rng.gen_range(-3.0..3.0);
        let plain = estimate_pseudo(|n, t, _| Ok(head(n, t)), &start, &quad).unwrap();
        let mult = estimate_pseudo(|n, t, _| Ok(head(n, t).iter().map(|v| mu * v).collect()), &start, &quad).unwrap();
        for i in 0..3 {
            let want = mu * (plain[i] - start[i]);
            prop_assert!((mult[i] - start[i] - want).abs() <= 1e-9 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn cond_loss_matches_brute_force(
        a in prop::collection::vec(-10.0f64..10.0, 1..8),
        shift in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += (a[i] - b[i]).powi(2);
        }
        prop_assert!(rel_err(cond_loss(&a, &b).unwrap(), acc, 1e-12) < 1e-12);
        prop_assert_eq!(cond_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn repeated_constant_target_contracts_by_alpha(
        alpha in 0.0f64..1.0,
        c in -5.0f64..5.0,
        steps in 1usize..40,
    ) {
        let mut t = PseudoTable::new(1, 1).unwrap();
        for k in 1..=steps {
            t.ensemble_update(0, &[c], alpha).unwrap();
            let gap = (t.get(0).unwrap()[0] - c).abs();
            let want = alpha.powi(k as i32) * c.abs();
            prop_assert!((gap - want).abs() <= 1e-12 * (1.0 + c.abs()), "k={}: {} vs {}", k, gap, want);
        }
    }

    #[test]
    fn table_stays_finite(
        updates in prop::collection::vec((0usize..5, prop::array::uniform2(-1e6f64..1e6), 0.0f64..=1.0), 0..200),
    ) {
        let mut t = PseudoTable::new(5, 2).unwrap();
        for (idx, est, alpha) in &updates {
            t.ensemble_update(*idx, est, *alpha).unwrap();
        }
        for i in 0..5 {
            prop_assert!(t.get(i).unwrap().iter().all(|v| v.is_finite()));
        }
        let total: u64 = (0..5).map(|i| t.update_count(i)).sum();
        prop_assert_eq!(total as usize, updates.len());
    }

    #[test]
    fn stopping_is_monotone(budget in 1usize..10_000, a in 0usize..20_000, b in 0usize..20_000) {
        let p = EarlyStopPolicy::new(budget, 10_000).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(!p.should_stop(lo) || p.should_stop(hi));
        prop_assert_eq!(p.should_stop(a), a >= budget);
    }
}

fn variance_per_coord(samples: &[Vec<f64>], center: &[f64]) -> Vec<f64> {
    let n = samples.len() as f64;
    (0..center.len())
        .map(|j| {
            let mean = samples.iter().map(|s| s[j]).sum::<f64>() / n;
            samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / n
        })
        .collect()
}

#[test]
fn condition_marginal_variance_follows_the_schedule() {
    let schedule = NoiseSchedule::default();
    let state = RdcState::new(schedule, 4).unwrap();
    let y = [0.0, 1.0, 0.0, 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for k in [0, 5, 9, 14] {
        let s = rdc_sigma(k, &schedule).unwrap();
        let draws: Vec<Vec<f64>> = (0..100_000)
            .map(|_| {
                let eps: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
                perturb_condition(&y, k, &eps, &state).unwrap()
            })
            .collect();
        for (j, v) in variance_per_coord(&draws, &y).iter().enumerate() {
            assert!((v / (s * s) - 1.0).abs() < 0.03, "k {k} coord {j}: {v} vs {}", s * s);
        }
    }
}

#[test]
fn boundary_start_has_configured_moments() {
    let schedule = NoiseSchedule::default();
    let mut state = RdcState::new(schedule, 3).unwrap();
    state.mu = vec![0.5, -1.0, 0.0];
    state.sigma0 = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws: Vec<Vec<f64>> = (0..100_000).map(|_| state.draw_start(&mut rng)).collect();
    for (j, v) in variance_per_coord(&draws, &state.mu).iter().enumerate() {
        let mean = draws.iter().map(|d| d[j]).sum::<f64>() / draws.len() as f64;
        assert!((mean - state.mu[j]).abs() < 0.02);
        assert!((v / 4.0 - 1.0).abs() < 0.03);
    }
}

#[test]
fn refining_the_quadrature_converges() {
    // Linear synthetic head s(y, t) = a·y·t/(1 + t) + b·t/(1 + t²): smooth in t
    // and coupled to the state, so the rule's truncation error is visible.
    let head = |_: usize, t: f64, y: &[f64]| -> robust_diffusion::Result<Vec<f64>> {
        Ok(y.iter().map(|v| 0.3 * v * t / (1.0 + t) + 0.5 * t / (1.0 + t * t)).collect())
    };
    let start = [1.0, -0.5];
    let run = |k| estimate_pseudo(head, &start, &Quadrature::karras(0.01, 5.0, 7.0, k).unwrap()).unwrap();
    let mut prev_gap = f64::INFINITY;
    for k in [4, 8, 16, 32, 64] {
        let (coarse, fine, finer) = (run(k), run(2 * k), run(4 * k));
        let gap = (fine[0] - coarse[0]).abs().max((fine[1] - coarse[1]).abs());
        let next = (finer[0] - fine[0]).abs().max((finer[1] - fine[1]).abs());
        // First-order rule: halving the step should roughly halve the change.
        assert!(next < gap, "K={k}: {next} !< {gap}");
        assert!(next < 0.75 * gap, "K={k}: convergence too slow ({next} vs {gap})");
        // Richardson extrapolation bounds the remaining error of the fine result.
        let extrapolated: Vec<f64> = fine.iter().zip(&coarse).map(|(f, c)| 2.0 * f - c).collect();
        let err = (finer[0] - extrapolated[0]).abs().max((finer[1] - extrapolated[1]).abs());
        assert!(err < gap, "K={k}: {err} vs {gap}");
        assert!(gap < prev_gap);
        prev_gap = gap;
    }
}

/// `L_cond` through the quadrature, differentiated with respect to the
/// condition head only.
struct HeadOnly<'a> {
    net: &'a ScoreNetwork,
    features: Array2<f64>,
    start: Array2<f64>,
    target: Array2<f64>,
    quad: Quadrature,
}

impl Objective for HeadOnly<'_> {
    fn value_and_grad(&self, params: &ParamBundle) -> robust_diffusion::Result<(f64, Vec<f64>)> {
        let net = ScoreNetwork::from_params(*self.net.spec(), *self.net.precond(), params.clone())?;
        let mut loss = 0.0;
        for r in 0..self.features.nrows() {
            let est = net.estimate_pseudo(&self.features.row(r).to_vec(), &self.start.row(r).to_vec(), &self.quad)?;
            loss += cond_loss(&est, &self.target.row(r).to_vec())?;
        }
        // Gradient comes from the training step; here only the value is needed.
        Ok((loss / self.features.nrows() as f64, vec![0.0; params.len()]))
    }
}

#[test]
fn head_gradient_through_quadrature_matches_finite_differences() {
    use robust_diffusion::trainer::{loss_step, CondTerm, StepInputs};
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let spec = small_spec(&mut rng);
        let net = ScoreNetwork::new(spec, Preconditioning::default(), seed).unwrap();
        let b = rng.gen_range(1..=3);
        let quad = Quadrature::karras(rng.gen_range(0.05..0.5), rng.gen_range(1.0..5.0), 7.0, rng.gen_range(1..=5)).unwrap();
        let inputs = StepInputs {
            x0: normal_matrix(&mut rng, b, 2, 1.0),
            sigmas: (0..b).map(|_| rng.gen_range(0.1..3.0)).collect(),
            eps: normal_matrix(&mut rng, b, 2, 1.0),
            cond: normal_matrix(&mut rng, b, spec.cond_dim, 0.5),
            targets: normal_matrix(&mut rng, b, spec.cond_dim, 1.0),
            head_y: normal_matrix(&mut rng, b, spec.cond_dim, 1.0),
            cond_term: CondTerm::Integral(quad.clone()),
        };
        let analytic = grad(net.params(), &robust_diffusion::trainer::StepObjective { net: &net, inputs: &inputs }).unwrap();
        let out = loss_step(&net, &inputs).unwrap();
        let mut x_t = inputs.x0.clone();
        for r in 0..b {
            for j in 0..2 {
                x_t[[r, j]] += inputs.sigmas[r] * inputs.eps[[r, j]];
            }
        }
        let features = net.features(x_t.view(), &inputs.sigmas, inputs.cond.view()).unwrap();
        let obj = HeadOnly { net: &net, features, start: inputs.head_y.clone(), target: inputs.targets.clone(), quad };
        assert!(rel_err(obj.value(net.params()).unwrap(), out.cond_loss, 1e-12) < 1e-10);
        let numeric = central_diff(&obj, net.params(), 1e-5);
        for i in net.cond_head_range() {
            let e = rel_err(analytic[i], numeric[i], 1e-6);
            assert!(e < 1e-4, "seed {seed} param {i}: {} vs {} ({e})", analytic[i], numeric[i]);
        }
    }
}
