//! The two-phase training loop.
//!
//! While the pseudo conditions are being refined, every iteration draws a
//! batch, estimates a pseudo condition for each sample, folds the estimates
//! into the table, and takes one optimizer step on the denoising loss plus
//! the condition loss. Once the refinement budget is spent the table is
//! frozen and only the denoising loss on the frozen conditions is trained.

mod checkpoint;
mod config;
mod step;

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::LabeledSample;
use crate::error::{invalid, Error, Result};
use crate::network::ScoreNetwork;
use crate::nn::adam_step;
use crate::pseudo::PseudoTable;
use crate::rdc::{condition_input_scale, demo_sigma, rdc_sigma};

pub use checkpoint::{Checkpoint, CONFIG_FILE, META_FILE, OPT_FILE, PARAMS_FILE, PSEUDO_FILE};
pub use config::{TrainConfig, Variant};
pub use step::{loss_step, CondTerm, StepInputs, StepObjective, StepOutput};

const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// One training-log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iter: usize,
    pub demo_loss: f64,
    pub cond_loss: f64,
    pub wall_secs: f64,
}

impl LogRecord {
    pub const HEADER: &'static str = "iter,demo_loss,cond_loss,wall_secs";

    pub fn to_line(&self) -> String {
        format!("{},{:?},{:?},{:.3}", self.iter, self.demo_loss, self.cond_loss, self.wall_secs)
    }
}

/// What happened in one iteration, handed to the observer after the
/// optimizer step.
#[derive(Debug)]
pub struct IterRecord<'a> {
    pub iter: usize,
    /// Pseudo conditions were still being refined.
    pub refining: bool,
    pub demo_loss: f64,
    pub cond_loss: f64,
    /// The condition loss contributed to the gradient.
    pub cond_grad: bool,
    /// Number of pseudo-table updates applied.
    pub table_updates: usize,
    pub net: &'a ScoreNetwork,
    pub pseudo: Option<&'a PseudoTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

pub fn train(config: &TrainConfig, dataset: &[LabeledSample]) -> Result<Trained> {
    train_with_observer(config, dataset, |_| {})
}

pub fn train_with_observer<F>(config: &TrainConfig, dataset: &[LabeledSample], observer: F) -> Result<Trained>
where
    F: FnMut(&IterRecord<'_>),
{
    let start = Checkpoint::init(config, dataset.len())?;
    resume(start, dataset, observer)
}

/// Continues training from `checkpoint` up to its config's `total_iters`.
/// Batches and noise depend only on the seed and the iteration number, so a
/// resumed run matches an uninterrupted one.
pub fn resume<F>(checkpoint: Checkpoint, dataset: &[LabeledSample], mut observer: F) -> Result<Trained>
where
    F: FnMut(&IterRecord<'_>),
{
    checkpoint.check()?;
    let cfg = checkpoint.config.clone();
    cfg.validate()?;
    let cd = cfg.network.cond_dim;
    if dataset.is_empty() {
        return Err(invalid("training needs a non-empty dataset"));
    }
    if let Some(s) = dataset.iter().find(|s| s.noisy_class >= cd || s.clean_class >= cd) {
        return Err(invalid(format!("sample {} has a class outside [0, {cd})", s.index)));
    }
    if let Some(t) = &checkpoint.pseudo {
        if t.len() != dataset.len() {
            return Err(invalid("pseudo table size differs from the dataset"));
        }
    }

    let quad = cfg.quadrature()?;
    let rdc = cfg.rdc_state()?;
    let mut net = checkpoint.network()?;
    let mut opt = checkpoint.opt;
    let mut pseudo = checkpoint.pseudo;
    let mut batcher = Batcher::new(dataset.len(), cfg.batch_size, cfg.seed);
    let mut log = Vec::new();
    let clock = Instant::now();

    for iter in checkpoint.iter..cfg.total_iters {
        let refining = cfg.variant.uses_pseudo() && !cfg.early_stop.should_stop(iter);
        let batch = batcher.batch(iter);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(iter as u64 + 1);
        let inputs = draw_inputs(&cfg, &rdc, &quad, dataset, &batch, pseudo.as_ref(), refining, &mut rng)?;

        let diverged = |net: &ScoreNetwork, opt, pseudo| Error::Diverged {
            iter,
            checkpoint: Box::new(Checkpoint {
                config: cfg.clone(),
                params: net.params().clone(),
                pseudo,
                opt,
                iter,
                config_digest: cfg.digest(),
            }),
        };
        let out = match loss_step(&net, &inputs) {
            Ok(out) if out.grads.iter().all(|g| g.is_finite()) => out,
            Ok(_)
            | Err(Error::NonFiniteLoss | Error::NonFinite { .. } | Error::NonFiniteNode { .. }) => {
                return Err(diverged(&net, opt, pseudo));
            }
            Err(e) => return Err(e),
        };

        let mut table_updates = 0;
        if refining {
            let table = pseudo.as_mut().expect("pseudo variants carry a table");
            let est = out.estimates.as_ref().expect("refinement produces estimates");
            for (r, &idx) in batch.iter().enumerate() {
                let row = est.row(r);
                table.ensemble_update(idx, row.as_slice().expect("contiguous row"), cfg.alpha)?;
                table_updates += 1;
            }
        }
        adam_step(net.params_mut(), &out.grads, &mut opt, &cfg.adam)?;

        observer(&IterRecord {
            iter,
            refining,
            demo_loss: out.demo_loss,
            cond_loss: out.cond_loss,
            cond_grad: out.estimates.is_some(),
            table_updates,
            net: &net,
            pseudo: pseudo.as_ref(),
        });
        if iter % cfg.log_every == 0 || iter + 1 == cfg.total_iters {
            log.push(LogRecord {
                iter,
                demo_loss: out.demo_loss,
                cond_loss: out.cond_loss,
                wall_secs: clock.elapsed().as_secs_f64(),
            });
        }
    }

    Ok(Trained {
        checkpoint: Checkpoint {
            config_digest: cfg.digest(),
            iter: cfg.total_iters.max(checkpoint.iter),
            params: net.into_params(),
            pseudo,
            opt,
            config: cfg,
        },
        log,
    })
}

/// Epoch-shuffled batches addressed by iteration number.
struct Batcher {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: Option<usize>,
    order: Vec<usize>,
}

impl Batcher {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            n,
            batch_size,
            seed,
            epoch: None,
            order: Vec::new(),
        }
    }

    fn batch(&mut self, iter: usize) -> Vec<usize> {
        let start = iter * self.batch_size;
        (start..start + self.batch_size)
            .map(|pos| {
                let epoch = pos / self.n;
                if self.epoch != Some(epoch) {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ SHUFFLE_SALT);
                    rng.set_stream(epoch as u64);
                    self.order = (0..self.n).collect();
                    self.order.shuffle(&mut rng);
                    self.epoch = Some(epoch);
                }
                self.order[pos % self.n]
            })
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn draw_inputs(
    cfg: &TrainConfig,
    rdc: &crate::rdc::RdcState,
    quad: &crate::rdc::Quadrature,
    dataset: &[LabeledSample],
    batch: &[usize],
    pseudo: Option<&PseudoTable>,
    refining: bool,
    rng: &mut ChaCha8Rng,
) -> Result<StepInputs> {
    let b = batch.len();
    let xd = cfg.network.x_dim;
    let cd = cfg.network.cond_dim;
    let sched = &cfg.schedule;
    let mut x0 = Array2::zeros((b, xd));
    let mut sigmas = vec![0.0; b];
    let mut eps = Array2::zeros((b, xd));
    let mut cond = Array2::zeros((b, cd));
    let mut targets = Array2::zeros((b, cd));
    let mut head_y = Array2::zeros((b, cd));
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    for (r, &idx) in batch.iter().enumerate() {
        let sample = &dataset[idx];
        let log_normal_sigma = cfg.train_sigma.sample(rng);
        let k = rng.gen_range(0..=sched.num_steps);
        for j in 0..xd {
            eps[[r, j]] = normal(rng);
        }
        let eps_y: Vec<f64> = (0..cd).map(|_| normal(rng)).collect();
        let start: Vec<f64> = (0..cd).map(|j| rdc.mu[j] + rdc.sigma0 * normal(rng)).collect();
        let dropped = rng.gen::<f64>() < cfg.cfg_drop_prob;

        for j in 0..xd {
            x0[[r, j]] = sample.point[j];
        }
        targets[[r, sample.noisy_class]] = 1.0;
        sigmas[r] = log_normal_sigma;
        match (cfg.variant, refining) {
            (Variant::Vanilla, _) => cond[[r, sample.noisy_class]] = 1.0,
            (Variant::PcRdc, true) => {
                let y = pseudo.expect("table").get(idx)?;
                let s = rdc_sigma(k, sched)?;
                let scale = condition_input_scale(s);
                sigmas[r] = demo_sigma(k, sched)?.max(sched.sigma_min);
                for j in 0..cd {
                    cond[[r, j]] = (y[j] + s * eps_y[j]) * scale;
                    head_y[[r, j]] = start[j];
                }
            }
            (Variant::PcOnly, true) => {
                let y = pseudo.expect("table").get(idx)?;
                for j in 0..cd {
                    cond[[r, j]] = y[j];
                    head_y[[r, j]] = y[j];
                }
            }
            (_, false) => {
                let y = pseudo.expect("table").get(idx)?;
                for j in 0..cd {
                    cond[[r, j]] = y[j];
                }
            }
        }
        if dropped {
            cond.row_mut(r).fill(0.0);
        }
    }

    let cond_term = match (cfg.variant, refining) {
        (Variant::PcRdc, true) => CondTerm::Integral(quad.clone()),
        (Variant::PcOnly, true) => CondTerm::Direct,
        _ => CondTerm::Off,
    };
    Ok(StepInputs {
        x0,
        sigmas,
        eps,
        cond,
        targets,
        head_y,
        cond_term,
    })
}
