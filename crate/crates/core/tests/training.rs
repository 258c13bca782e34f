use htlane::checkpoint::Checkpoint;
use htlane::eval::Tally;
use htlane::model::init_params;
use htlane::synth::generate;
use htlane::trainer::{train_with, Split, TrainOutcome};
use htlane::{evaluate, lr_at, train, Dataset, Error, LossConfig, Mode, RunConfig, SceneConfig, TrainConfig};

fn dataset(n: usize, seed: u64, labeled: usize) -> Dataset {
    let mut samples = generate(n, seed, &SceneConfig::default()).unwrap();
    for s in samples.iter_mut().skip(labeled) {
        s.labeled = false;
    }
    Dataset::new(samples)
}

fn short(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs_phase1: 1,
        epochs_phase2: 1,
        batch_size: 4,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn checkpoint(cfg: &TrainConfig, out: &TrainOutcome) -> Checkpoint {
    Checkpoint {
        config: RunConfig {
            train: *cfg,
            ..RunConfig::default()
        },
        params: out.params.clone(),
        epoch: out.epochs as u32,
        rng_state: out.rng_state,
    }
}

/// Pinned from a recorded run; GEMM kernels are picked per CPU, so a machine
/// with different SIMD support may need to re-record it.
#[test]
fn supervised_golden_digest() {
    let data = dataset(16, 3, 16);
    let cfg = TrainConfig {
        epochs_phase1: 1,
        seed: 0,
        ..TrainConfig::default()
    };
    let out = train(&data, &cfg).unwrap();
    assert_eq!(out.epochs, 1);
    assert_eq!(out.history.len(), 1);
    let digest = checkpoint(&cfg, &out).digest();
    assert_eq!(digest, "ad3985fe8b0be37510e26b817be4a41a5dd13305982dd3402a5e056a3ff22253");
}

#[test]
fn identical_inputs_give_identical_checkpoints() {
    let data = dataset(24, 5, 8);
    let cfg = short(Mode::PseudoHt);
    let a = checkpoint(&cfg, &train(&data, &cfg).unwrap()).to_bytes();
    let b = checkpoint(&cfg, &train(&data, &cfg).unwrap()).to_bytes();
    assert_eq!(a, b);

    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let c = pool.install(|| checkpoint(&cfg, &train(&data, &cfg).unwrap()).to_bytes());
    assert_eq!(a, c, "thread count must not change the result");
}

#[test]
fn silent_unlabeled_batches_match_across_modes() {
    let data = dataset(20, 7, 8);
    let with = |mode: Mode, loss: LossConfig| {
        let cfg = TrainConfig { loss, ..short(mode) };
        train(&data, &cfg).unwrap()
    };
    let base = LossConfig::default();
    let no_beta = with(Mode::Ht, LossConfig { beta: 0.0, ..base });
    let closed_gate = with(Mode::Ht, LossConfig { tau: 0.999_999, ..base });
    let no_pseudo = with(Mode::Pseudo, LossConfig { pseudo_threshold: 0.999_999, ..base });

    assert_eq!(no_beta.params, closed_gate.params);
    assert_eq!(no_beta.params, no_pseudo.params);
    for r in closed_gate.history.iter().filter(|r| r.split == Split::Unlabeled) {
        assert_eq!(r.losses.l_ht, 0.0);
        assert_eq!(r.losses.l_total, 0.0);
    }
}

#[test]
fn recorded_rates_follow_the_schedule() {
    let data = dataset(12, 9, 6);
    let cfg = TrainConfig {
        epochs_phase1: 2,
        epochs_phase2: 2,
        ..short(Mode::Ht)
    };
    let out = train(&data, &cfg).unwrap();
    assert_eq!(out.history.len(), 2 + 2 * 2);
    for r in &out.history {
        assert_eq!(r.lr, lr_at(r.epoch, 4, &cfg).unwrap());
    }
}

#[test]
fn clipping_bounds_a_single_step() {
    let data = dataset(4, 17, 4);
    let base = TrainConfig {
        epochs_phase1: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let run = |clip_norm: f64| train(&data, &TrainConfig { clip_norm, ..base }).unwrap().params;
    let start = init_params::<f32>(base.seed);
    assert_eq!(run(0.0), run(1e12));

    let mut moved = run(1e-3);
    moved.scale(-1.0);
    moved.add_assign(&start).unwrap();
    let step = moved.l2_norm();
    assert!(step > 0.0 && step <= base.lr0 * 1e-3 * (1.0 + 1e-4), "{step}");
}

#[test]
fn phase_one_loss_decreases() {
    let data = dataset(64, 13, 64);
    let cfg = TrainConfig {
        epochs_phase1: 6,
        batch_size: 8,
        seed: 2,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    let out = train_with(&data, &cfg, init_params(cfg.seed), |r| seen.push(r.losses.l_total)).unwrap();
    assert_eq!(seen.len(), 6);
    assert!(seen.iter().all(|l| l.is_finite()));
    assert!(seen[5] < seen[0], "{seen:?}");
    assert_eq!(out.history.len(), 6);
}

#[test]
fn contract_errors() {
    let cfg = short(Mode::Ht);
    let all_labeled = dataset(6, 1, 6);
    let err = train(&all_labeled, &cfg).unwrap_err();
    assert!(err.to_string().contains("ht mode requires unlabeled data"), "{err}");

    let none_labeled = dataset(6, 1, 0);
    assert!(matches!(train(&none_labeled, &short(Mode::Supervised)), Err(Error::Data(_))));

    let wild = TrainConfig {
        lr0: 1e30,
        ..short(Mode::Supervised)
    };
    let run = || train(&all_labeled, &wild);
    if cfg!(debug_assertions) {
        // the per-op finiteness assertion fires before the trainer's own check
        assert!(std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)).is_err());
    } else {
        assert!(matches!(run(), Err(Error::NonFinite { .. })));
    }
}

#[test]
fn evaluation_is_pure_and_scores_a_perfect_oracle() {
    let data = dataset(10, 21, 10);
    let params = init_params(4);
    let a = evaluate(&params, Default::default(), &data).unwrap();
    let b = evaluate(&params, Default::default(), &data).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples, 10);

    let mut oracle = Tally::default();
    for s in &data.samples {
        oracle.add(&Tally::from_hard(&s.mask, &s.exist, &s.mask, &s.exist).unwrap());
    }
    let m = oracle.metrics();
    assert_eq!((m.lane_f1, m.pixel_f1, m.exist_acc), (1.0, 1.0, 1.0));

    assert!(evaluate(&params, Default::default(), &Dataset::default()).is_err());
}
