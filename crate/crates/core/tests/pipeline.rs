mod common;

use ndarray::Array2;
use prodding::datasets::{make_synthetic_shift, AugmentParams, Dataset, SyntheticSpec};
use prodding::distill::{
    ict_loss, ict_objective, ict_targets, mix_inputs, prod_step, run_distillation, sample_mix,
    DistillFlags, MixSample,
};
use prodding::finetune::{
    ding_objective, ding_step, run_finetune, ConsistencyBatch, FinetuneFlags, PriorEstimate,
};
use prodding::losses::{mutual_information, soft_cross_entropy, softmax};
use prodding::networks::{
    EncoderSpec, LrPair, Mode, Network, OptimConfig, Sgd, TargetArch, TargetModel,
};
use prodding::oracle::{query_dataset, BlackBoxOracle, QueryMode, QueryResults};
use prodding::pseudo::{init_teacher, Hyperparams, ProbMatrix, PROB_TOLERANCE};
use prodding::rng;

use common::*;

fn setup(mode: QueryMode) -> (Dataset, QueryResults, TargetModel) {
    let spec = SyntheticSpec {
        samples_per_class: 30,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let (source, target) = make_synthetic_shift(&spec).unwrap();
    let cfg = prodding::networks::SourceTrainConfig {
        epochs: 5,
        hidden: vec![16],
        seed: 1234,
        epsilon: 0.1,
        optim: OptimConfig::default(),
    };
    let trained = prodding::networks::train_source(&source, None, &cfg).unwrap();
    let oracle = BlackBoxOracle::new(trained.model);
    let answers = query_dataset(&oracle, &target, mode, None).unwrap();
    let model = TargetModel::new(
        TargetArch {
            encoder: EncoderSpec {
                input_dim: 2,
                hidden: vec![16],
            },
            bottleneck: 16,
            num_classes: 4,
        },
        3,
    )
    .unwrap();
    (target, answers, model)
}

fn hp(epochs: usize) -> Hyperparams {
    Hyperparams {
        epochs,
        ..Hyperparams::default()
    }
}

#[test]
fn zero_epochs_change_nothing() {
    let (target, answers, model) = setup(QueryMode::SoftTopR { r: 1 });
    let opt = OptimConfig::default();
    let (out, hist) = run_distillation(
        model.clone(),
        &target,
        &answers,
        &hp(0),
        &opt,
        DistillFlags::default(),
        1,
    )
    .unwrap();
    assert_eq!(out.checksum(), model.checksum());
    assert_eq!(hist.banks.len(), 1);
    assert_eq!(hist.banks[0].epoch(), 0);

    let (out, hist) = run_finetune(
        model.clone(),
        &target,
        &hp(0),
        &opt,
        FinetuneFlags::default(),
        &AugmentParams::default(),
        1,
    )
    .unwrap();
    assert_eq!(out.checksum(), model.checksum());
    assert!(hist.epochs.is_empty());
}

#[test]
fn bank_rows_stay_distributions_and_runs_repeat_exactly() {
    for mode in [QueryMode::SoftTopR { r: 1 }, QueryMode::Hard] {
        let (target, answers, model) = setup(mode);
        let run = || {
            run_distillation(
                model.clone(),
                &target,
                &answers,
                &hp(3),
                &OptimConfig::default(),
                DistillFlags::default(),
                9,
            )
            .unwrap()
        };
        let (a, hist) = run();
        assert_eq!(hist.banks.len(), 4);
        for bank in &hist.banks {
            for row in bank.rows().view().rows() {
                assert!((row.sum() - 1.0).abs() <= PROB_TOLERANCE);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        for s in &hist.steps {
            assert!((s.total - (s.skd + s.mix - s.mi)).abs() <= 1e-6);
        }
        let (b, _) = run();
        assert_eq!(a.checksum(), b.checksum());
    }
}

#[test]
fn distillation_loss_falls_over_the_first_epoch() {
    let (target, answers, model) = setup(QueryMode::SoftTopR { r: 1 });
    let (_, hist) = run_distillation(
        model,
        &target,
        &answers,
        &hp(1),
        &OptimConfig::default(),
        DistillFlags::default(),
        2,
    )
    .unwrap();
    let steps: Vec<f64> = hist.steps.iter().map(|s| s.total).collect();
    let half = steps.len() / 2;
    let first = steps[..half].iter().sum::<f64>() / half as f64;
    let second = steps[half..].iter().sum::<f64>() / (steps.len() - half) as f64;
    assert!(second <= first, "{first} -> {second}");
}

#[test]
fn finetune_records_pass_rate_and_prior() {
    let (target, _, model) = setup(QueryMode::Hard);
    let (out, hist) = run_finetune(
        model.clone(),
        &target,
        &Hyperparams {
            eta: 1.5,
            epochs: 2,
            ..Hyperparams::default()
        },
        &OptimConfig::default(),
        FinetuneFlags::default(),
        &AugmentParams::default(),
        4,
    )
    .unwrap();
    assert_eq!(hist.epochs.len(), 2);
    for e in &hist.epochs {
        assert_eq!(e.pass_rate, 0.0);
        assert_eq!(e.afm, 0.0);
        assert!((e.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(e.pi.iter().all(|&p| p >= 1e-4));
        assert!((e.total + e.mi).abs() < 1e-12);
    }
    assert_ne!(out.checksum(), model.checksum());
}

#[test]
fn gated_out_batch_reduces_to_negative_mi() {
    let model = toy_target(1);
    let x = gaussian(8, DIM, 1, "w");
    let mut batch = ConsistencyBatch::new(x.clone(), gaussian(8, DIM, 1, "s")).unwrap();
    let hp = Hyperparams {
        eta: 1.01,
        ..Hyperparams::default()
    };
    let pi = PriorEstimate::uniform(K);
    let (b, _) = ding_objective(&model, &mut batch, &pi, &hp, FinetuneFlags::default()).unwrap();
    let weak_logits = model.forward(x.view(), Mode::Train).unwrap();
    let mi = mutual_information(weak_logits.view()).unwrap().value;
    assert_eq!(b.consistency, 0.0);
    assert_eq!(b.total, -mi);
    assert!(batch.mask.iter().all(|m| !m));
}

#[test]
fn weak_branch_carries_no_gradient() {
    // perturbing the weak view without changing its pseudo-labels or mask
    // leaves the consistency gradient untouched
    let model = toy_target(2);
    let weak = gaussian(8, DIM, 2, "w");
    let strong = gaussian(8, DIM, 2, "s");
    let hp = Hyperparams {
        eta: 0.3,
        ..Hyperparams::default()
    };
    let flags = FinetuneFlags {
        mi: false,
        ..FinetuneFlags::default()
    };
    let pi = PriorEstimate::uniform(K);
    let mut a = ConsistencyBatch::new(weak.clone(), strong.clone()).unwrap();
    let (_, ga) = ding_objective(&model, &mut a, &pi, &hp, flags).unwrap();
    let mut b = ConsistencyBatch::new(&weak + 1e-4, strong).unwrap();
    let (_, gb) = ding_objective(&model, &mut b, &pi, &hp, flags).unwrap();
    assert_eq!(a.pseudo_labels, b.pseudo_labels);
    assert_eq!(a.mask, b.mask);
    assert_eq!(ga, gb);
}

#[test]
fn mix_targets_carry_no_gradient() {
    // the analytic gradient equals finite differences of the loss with the
    // targets frozen, and differs from that of the loss with live targets
    let model = toy_target(4);
    let x = gaussian(6, DIM, 4, "x");
    let mix = MixSample::new(0.3, &[1, 0, 3, 2, 5, 4]).unwrap();
    let targets = ict_targets(&model, x.view(), &mix).unwrap();
    let (_, g) = ict_objective(&model, x.view(), &mix, targets.view()).unwrap();
    let frozen = finite_difference(&model, |m| {
        ict_objective(m, x.view(), &mix, targets.view()).unwrap().0
    });
    let live = finite_difference(&model, |m| {
        prodding::distill::ict_loss_with(m, x.view(), &mix).unwrap()
    });
    let a = analytic(&model, &g);
    assert!(relative_error(&a, &frozen) <= 1e-4);
    assert!(relative_error(&a, &live) > 1e-3);
}

#[test]
fn ict_hand_rolled_checkpoint() {
    let model = toy_target(5);
    let x = gaussian(2, DIM, 5, "x");
    let mix = MixSample::new(0.3, &[1, 0]).unwrap();
    let p = softmax(model.forward(x.view(), Mode::Train).unwrap().view());
    let mut t = Array2::zeros((2, K));
    let mut mixed = Array2::zeros((2, DIM));
    for (i, j) in [(0, 1), (1, 0)] {
        for c in 0..K {
            t[[i, c]] = 0.3 * p[[i, c]] + 0.7 * p[[j, c]];
        }
        for d in 0..DIM {
            mixed[[i, d]] = 0.3 * x[[i, d]] + 0.7 * x[[j, d]];
        }
    }
    let q = softmax(model.forward(mixed.view(), Mode::Train).unwrap().view());
    let mut want = 0.0;
    for i in 0..2 {
        for c in 0..K {
            want -= t[[i, c]] * q[[i, c]].ln();
        }
    }
    want /= 2.0;
    let got = prodding::distill::ict_loss_with(&model, x.view(), &mix).unwrap();
    assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
    assert_eq!(mix_inputs(x.view(), &mix).unwrap(), mixed);
    let sc = soft_cross_entropy(
        t.view(),
        model.forward(mixed.view(), Mode::Train).unwrap().view(),
    );
    assert!((sc.unwrap().value - want).abs() <= 1e-12);
}

#[test]
fn ict_seed_controls_the_draw() {
    let model = toy_target(6);
    let x = gaussian(8, DIM, 6, "x");
    let a = ict_loss(&model, x.view(), 0.3, 10).unwrap();
    assert_eq!(a, ict_loss(&model, x.view(), 0.3, 10).unwrap());
    assert!(ict_loss(&model, x.view(), 0.3, 11).unwrap() != a);
    assert!(ict_loss(&model, x.slice(ndarray::s![..1, ..]), 0.3, 10).is_err());
}

#[test]
fn zero_learning_rate_steps_are_null() {
    let mut model = toy_target(7);
    let before = model.store().clone();
    let x = gaussian(8, DIM, 7, "x");
    let mut r = rng::stream(7, "t");
    let teacher = prob_rows(8, K, &mut r);
    let mix = sample_mix(8, 0.3, &mut r).unwrap();
    let mut sgd = Sgd::new(&OptimConfig::default(), model.store());
    let zero = LrPair {
        backbone: 0.0,
        new_layers: 0.0,
    };
    prod_step(
        &mut model,
        &mut sgd,
        x.view(),
        teacher.view(),
        &mix,
        DistillFlags::default(),
        zero,
    )
    .unwrap();
    assert_eq!(model.store().flat_trainable(), before.flat_trainable());

    let mut batch = ConsistencyBatch::new(x.clone(), &x * 1.1).unwrap();
    let pi = PriorEstimate::uniform(K);
    ding_step(
        &mut model,
        &mut sgd,
        &mut batch,
        &pi,
        &Hyperparams::default(),
        FinetuneFlags::default(),
        zero,
    )
    .unwrap();
    assert_eq!(model.store().flat_trainable(), before.flat_trainable());
}

#[test]
fn beta_one_teacher_is_the_smoothed_oracle() {
    let (target, answers, _) = setup(QueryMode::SoftTopR { r: 1 });
    let p_src = prodding::distill::smoothed_source_predictions(&target, &answers, 0.1).unwrap();
    let n = p_src.nrows();
    let proto = ProbMatrix::new(Array2::from_elem((n, 4), 0.25)).unwrap();
    let ids: Vec<String> = target.ids().map(str::to_string).collect();
    let bank = init_teacher(ids, &p_src, &proto, 1.0).unwrap();
    assert_eq!(bank.rows(), &p_src);
}
