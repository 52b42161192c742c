#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use robust_diffusion::diffusion::Preconditioning;
use robust_diffusion::network::{NetworkSpec, ScoreNetwork};
use robust_diffusion::nn::{Objective, ParamBundle};
use robust_diffusion::rdc::Quadrature;
use robust_diffusion::trainer::{CondTerm, StepInputs};

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn central_diff(obj: &impl Objective, params: &ParamBundle, h: f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.len())
        .map(|i| {
            let orig = p.values()[i];
            p.values_mut()[i] = orig + h;
            let up = obj.value(&p).unwrap();
            p.values_mut()[i] = orig - h;
            let down = obj.value(&p).unwrap();
            p.values_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn small_spec(rng: &mut ChaCha8Rng) -> NetworkSpec {
    NetworkSpec {
        x_dim: 2,
        cond_dim: rng.gen_range(2..=4),
        trunk_width: rng.gen_range(3..=6),
        trunk_depth: rng.gen_range(1..=2),
        head_width: rng.gen_range(2..=5),
        ..NetworkSpec::default()
    }
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        scale * z
    })
}

/// Random network and batch exercising the requested condition term.
pub fn random_problem(seed: u64, term: u8) -> (ScoreNetwork, StepInputs) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = small_spec(&mut rng);
    let net = ScoreNetwork::new(spec, Preconditioning::default(), seed).unwrap();
    let b = rng.gen_range(1..=4);
    let cd = spec.cond_dim;
    let sigmas = (0..b).map(|_| (rng.gen_range(-2.0..1.5f64)).exp()).collect();
    let mut targets = Array2::zeros((b, cd));
    for r in 0..b {
        targets[[r, rng.gen_range(0..cd)]] = 1.0;
    }
    let cond_term = match term {
        0 => CondTerm::Off,
        1 => CondTerm::Direct,
        _ => {
            let t_min = rng.gen_range(0.05..0.5);
            let t_max = rng.gen_range(1.0..5.0);
            CondTerm::Integral(Quadrature::karras(t_min, t_max, 7.0, rng.gen_range(1..=4)).unwrap())
        }
    };
    let inputs = StepInputs {
        x0: normal_matrix(&mut rng, b, 2, 1.0),
        sigmas,
        eps: normal_matrix(&mut rng, b, 2, 1.0),
        cond: normal_matrix(&mut rng, b, cd, 0.5),
        targets,
        head_y: normal_matrix(&mut rng, b, cd, 1.0),
        cond_term,
    };
    (net, inputs)
}
