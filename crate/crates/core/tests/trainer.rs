use robust_diffusion::data::{inject_symmetric_noise, make_toy_dataset, LabeledSample};
use robust_diffusion::network::NetworkSpec;
use robust_diffusion::pseudo::{EarlyStopPolicy, PseudoTable};
use robust_diffusion::trainer::{resume, train, train_with_observer, Checkpoint, TrainConfig, Variant};
use robust_diffusion::Error;

fn dataset(eta: f64) -> Vec<LabeledSample> {
    let clean = make_toy_dataset(100, 3).unwrap();
    inject_symmetric_noise(&clean, eta, 4, 4).unwrap()
}

fn small(variant: Variant, total: usize, budget: usize) -> TrainConfig {
    TrainConfig {
        variant,
        batch_size: 64,
        total_iters: total,
        early_stop: EarlyStopPolicy { budget_iters: budget },
        network: NetworkSpec {
            trunk_width: 24,
            trunk_depth: 2,
            head_width: 12,
            ..NetworkSpec::default()
        },
        log_every: 1,
        seed: 17,
        ..TrainConfig::default()
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn zero_iterations_returns_the_initial_state() {
    let data = dataset(0.4);
    for variant in Variant::ALL {
        let cfg = small(variant, 0, 1);
        let out = train(&cfg, &data).unwrap();
        let init = Checkpoint::init(&cfg, data.len()).unwrap();
        assert_eq!(out.checkpoint, init);
        assert!(out.log.is_empty());
        assert_eq!(out.checkpoint.iter, 0);
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = dataset(0.4);
    for variant in Variant::ALL {
        let cfg = small(variant, 25, 10);
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(bits(a.checkpoint.params.values()), bits(b.checkpoint.params.values()));
        assert_eq!(a.checkpoint.pseudo, b.checkpoint.pseudo);
        let losses = |t: &robust_diffusion::trainer::Trained| -> Vec<(u64, u64)> {
            t.log.iter().map(|r| (r.demo_loss.to_bits(), r.cond_loss.to_bits())).collect()
        };
        assert_eq!(losses(&a), losses(&b));
    }
}

#[test]
fn seeds_change_the_run() {
    let data = dataset(0.4);
    let a = train(&small(Variant::PcRdc, 5, 5), &data).unwrap();
    let b = train(&TrainConfig { seed: 18, ..small(Variant::PcRdc, 5, 5) }, &data).unwrap();
    assert_ne!(a.checkpoint.params, b.checkpoint.params);
}

#[test]
fn clean_vanilla_loss_decreases() {
    let clean = make_toy_dataset(2000, 0).unwrap();
    let cfg = TrainConfig {
        variant: Variant::Vanilla,
        total_iters: 500,
        log_every: 1,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &clean).unwrap();
    assert_eq!(out.log.len(), 500);
    let mean = |r: &[robust_diffusion::trainer::LogRecord]| r.iter().map(|l| l.demo_loss).sum::<f64>() / r.len() as f64;
    let (lead, trail) = (mean(&out.log[..100]), mean(&out.log[400..]));
    assert!(trail < lead, "leading {lead}, trailing {trail}");
    assert!(out.log.iter().all(|l| l.demo_loss.is_finite() && l.cond_loss == 0.0));
}

#[test]
fn refinement_stops_at_the_budget() {
    let data = dataset(0.6);
    for variant in [Variant::PcOnly, Variant::PcRdc] {
        let (total, budget) = (30, 12);
        let cfg = small(variant, total, budget);
        let range = robust_diffusion::network::ScoreNetwork::new(cfg.network, cfg.precond, 0)
            .unwrap()
            .cond_head_range();
        let mut frozen: Option<(PseudoTable, Vec<f64>)> = None;
        let mut refine_updates = 0;
        let out = train_with_observer(&cfg, &data, |rec| {
            assert_eq!(rec.refining, rec.iter < budget, "iter {}", rec.iter);
            assert_eq!(rec.cond_grad, rec.refining);
            if rec.refining {
                assert_eq!(rec.table_updates, cfg.batch_size);
                assert!(rec.cond_loss > 0.0);
                refine_updates += rec.table_updates;
            } else {
                assert_eq!(rec.table_updates, 0);
                assert_eq!(rec.cond_loss, 0.0);
            }
            let head = rec.net.params().values()[range.clone()].to_vec();
            let table = rec.pseudo.expect("pseudo variants keep a table");
            match &frozen {
                None if rec.iter + 1 == budget => frozen = Some((table.clone(), head)),
                Some((t, h)) => {
                    assert_eq!(t, table, "table moved at iter {}", rec.iter);
                    assert_eq!(bits(h), bits(&head), "condition head moved at iter {}", rec.iter);
                }
                None => {}
            }
        })
        .unwrap();
        assert!(frozen.is_some());
        let table = out.checkpoint.pseudo.unwrap();
        let counted: u64 = (0..table.len()).map(|i| table.update_count(i)).sum();
        assert_eq!(counted as usize, refine_updates);
        assert_eq!(refine_updates, budget * cfg.batch_size);
    }
}

#[test]
fn vanilla_never_touches_a_table() {
    let data = dataset(0.4);
    let out = train_with_observer(&small(Variant::Vanilla, 15, 5), &data, |rec| {
        assert!(rec.pseudo.is_none());
        assert!(!rec.refining && !rec.cond_grad);
        assert_eq!(rec.table_updates, 0);
    })
    .unwrap();
    assert!(out.checkpoint.pseudo.is_none());
}

#[test]
fn pseudo_reads_come_from_the_batch() {
    let data = dataset(0.4);
    let cfg = small(Variant::PcOnly, 10, 4);
    let out = train(&cfg, &data).unwrap();
    // One table read per batch row per iteration, in both phases.
    assert_eq!(out.checkpoint.pseudo.unwrap().reads() as usize, 10 * cfg.batch_size);
    let mut reads = Vec::new();
    train_with_observer(&cfg, &data, |rec| reads.push(rec.pseudo.unwrap().reads())).unwrap();
    for (i, r) in reads.iter().enumerate() {
        assert_eq!(*r as usize, (i + 1) * cfg.batch_size);
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let data = dataset(0.4);
    let dir = tempfile::tempdir().unwrap();
    for variant in Variant::ALL {
        let full_cfg = small(variant, 40, 15);
        let full = train(&full_cfg, &data).unwrap();

        // Stop inside the refinement phase, persist, reload and continue.
        let half = train(&small(variant, 10, 10), &data).unwrap().checkpoint;
        let mut ckpt = Checkpoint { config: full_cfg.clone(), config_digest: full_cfg.digest(), ..half };
        let path = dir.path().join(variant.name());
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        ckpt = loaded;
        let rest = resume(ckpt, &data, |_| {}).unwrap();
        assert_eq!(rest.checkpoint, full.checkpoint, "{variant}");
        assert_eq!(rest.log.first().map(|l| l.iter), Some(10));
    }
}

#[test]
fn checkpoint_rejects_a_foreign_config() {
    let data = dataset(0.4);
    let mut ckpt = train(&small(Variant::PcRdc, 3, 2), &data).unwrap().checkpoint;
    ckpt.config.alpha = 0.5;
    assert!(ckpt.check().is_err());
    assert!(resume(ckpt, &data, |_| {}).is_err());
}

#[test]
fn exploding_updates_report_divergence_with_state() {
    let data = dataset(0.4);
    for variant in Variant::ALL {
        let mut cfg = small(variant, 50, 5);
        cfg.adam.lr = 1e200;
        match train(&cfg, &data) {
            Err(Error::Diverged { iter, checkpoint }) => {
                assert!(iter >= 1 && iter < 50);
                assert_eq!(checkpoint.iter, iter);
                checkpoint.check().unwrap();
            }
            other => panic!("{variant}: expected divergence, got {:?}", other.map(|t| t.checkpoint.iter)),
        }
    }
}

#[test]
fn logged_losses_are_finite() {
    let data = dataset(0.8);
    for variant in Variant::ALL {
        let out = train(&small(variant, 30, 10), &data).unwrap();
        assert_eq!(out.log.len(), 30);
        for r in &out.log {
            assert!(r.demo_loss.is_finite() && r.cond_loss.is_finite() && r.wall_secs >= 0.0);
        }
    }
}

#[test]
fn rejects_out_of_range_labels_and_empty_data() {
    let mut data = dataset(0.0);
    assert!(train(&small(Variant::Vanilla, 2, 1), &[]).is_err());
    data[0].noisy_class = 9;
    assert!(train(&small(Variant::Vanilla, 2, 1), &data).is_err());
}

#[test]
fn sampling_queries_follow_the_training_conditions() {
    let data = dataset(0.4);
    let vanilla = train(&small(Variant::Vanilla, 5, 5), &data).unwrap().checkpoint;
    assert_eq!(vanilla.class_queries(), robust_diffusion::eval::one_hot_queries(4));

    let pc = train(&small(Variant::PcOnly, 8, 8), &data).unwrap().checkpoint;
    let table = pc.pseudo.as_ref().unwrap();
    let queries = pc.class_queries();
    assert_eq!(queries, table.class_prototypes());
    // Each prototype leans toward its own class.
    for (c, q) in queries.iter().enumerate() {
        let top = (0..4).max_by(|&a, &b| q[a].partial_cmp(&q[b]).unwrap()).unwrap();
        assert_eq!(top, c, "{q:?}");
    }
}
