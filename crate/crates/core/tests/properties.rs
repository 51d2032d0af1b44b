//! Property tests for the library's invariants.

use plugnet::experiment::{gen_data, ExperimentConfig};
use plugnet::nn::{arch, checkpoint, BaseNetwork};
use plugnet::plugin::{fuse_conv, fuse_linear, FusionOperator, JointModel, PluginNetwork};
use plugnet::synth::metrics::average_precision;
use plugnet::synth::{Dataset, GeneratorConfig, HierConfig, MultiConfig, SegConfig, TaskKind};
use plugnet::tensor::{Tape, Tensor};
use plugnet::train::trainer::example_gradients;
use plugnet::train::{lr_schedule, train_plugins, TrainConfig};
use proptest::prelude::*;
use serde_json::json;

fn vec_f32(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-4.0f32..4.0, len)
}

fn op() -> impl Strategy<Value = FusionOperator> {
    prop::sample::select(FusionOperator::ALL.to_vec())
}

fn frozen_cls(seed: u64) -> BaseNetwork {
    let mut base = BaseNetwork::build(arch::toy_cls(&[1, 6, 6], 6).unwrap(), &[1, 6, 6], seed).unwrap();
    base.freeze();
    base
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_sum_to_one(values in vec_f32(12), rows in prop::sample::select(vec![1usize, 2, 3, 4])) {
        let t = Tensor::new(&[rows, 12 / rows], values).unwrap();
        let tape = Tape::new();
        let p = tape.constant(&t).softmax().value();
        for row in p.values().chunks(12 / rows) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn affine_with_unit_scale_is_additive(z in vec_f32(24), r in vec_f32(6)) {
        let zl = Tensor::vector(z.clone()).unwrap();
        let rl = Tensor::vector(z[..24].iter().map(|v| v * 0.5).collect()).unwrap();
        let mut ones = vec![1.0f32; 24];
        ones.extend_from_slice(rl.values());
        let a = fuse_linear(&zl, &rl, FusionOperator::Additive).unwrap();
        let b = fuse_linear(&zl, &Tensor::vector(ones).unwrap(), FusionOperator::Affine).unwrap();
        prop_assert!(a.bit_eq(&b));

        let zc = Tensor::new(&[6, 2, 2], z).unwrap();
        let rc = Tensor::vector(r.clone()).unwrap();
        let mut ones = vec![1.0f32; 6];
        ones.extend_from_slice(&r);
        let a = fuse_conv(&zc, &rc, FusionOperator::Additive).unwrap();
        let b = fuse_conv(&zc, &Tensor::vector(ones).unwrap(), FusionOperator::Affine).unwrap();
        prop_assert!(a.bit_eq(&b));
    }

    #[test]
    fn conv_fusion_is_channel_local(
        z in vec_f32(36),
        r in vec_f32(8),
        op in op(),
        channel in 0usize..4,
        delta in 0.5f32..2.0,
    ) {
        let zc = Tensor::new(&[4, 3, 3], z).unwrap();
        let width = 4 * op.multiplier();
        let r0 = Tensor::vector(r[..width].to_vec()).unwrap();
        let mut bumped = r[..width].to_vec();
        bumped[channel] += delta;
        let r1 = Tensor::vector(bumped).unwrap();
        let (a, b) = (fuse_conv(&zc, &r0, op).unwrap(), fuse_conv(&zc, &r1, op).unwrap());
        for c in 0..4 {
            if c != channel {
                prop_assert_eq!(&a.values()[c * 9..(c + 1) * 9], &b.values()[c * 9..(c + 1) * 9]);
            }
        }
    }

    #[test]
    fn average_precision_ignores_monotone_transforms(
        scores in prop::collection::vec(-10.0f64..10.0, 2..40),
        seed in any::<u64>(),
        scale in 0.1f64..5.0,
        shift in -3.0f64..3.0,
    ) {
        let positives: Vec<bool> = scores.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
        let base = average_precision(&scores, &positives).unwrap();
        let moved: Vec<f64> = scores.iter().map(|s| (scale * s + shift).exp()).collect();
        prop_assert_eq!(base, average_precision(&moved, &positives).unwrap());
    }

    #[test]
    fn schedule_never_increases(epochs in 1usize..40, decay in prop::collection::btree_set(0usize..40, 0..4), factor in 0.01f64..1.0) {
        let cfg = TrainConfig {
            epochs,
            lr_decay_epochs: decay.into_iter().filter(|e| *e < epochs).collect(),
            lr_decay_factor: factor,
            ..TrainConfig::default()
        };
        for e in 1..epochs {
            prop_assert!(lr_schedule(e, &cfg) <= lr_schedule(e - 1, &cfg));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn identity_plugins_are_neutral(x in vec_f32(36), pe in vec_f32(3), op in op(), seed in 0u64..1000) {
        let base = frozen_cls(seed);
        let mut plugins = Vec::new();
        for (k, id) in ["conv1", "fc2"].iter().enumerate() {
            let mut p = PluginNetwork::new(3, &[5], base.attachment_point(id).unwrap(), op, seed + k as u64).unwrap();
            p.make_identity().unwrap();
            plugins.push(p);
        }
        let joint = JointModel::new(base.clone(), plugins).unwrap();
        let x = Tensor::new(&[1, 6, 6], x).unwrap();
        let want = base.forward(&x).unwrap();
        prop_assert!(joint.forward(&x, &Tensor::vector(pe).unwrap()).unwrap().bit_eq(&want));
    }

    #[test]
    fn plugin_order_does_not_matter(x in vec_f32(36), pe in vec_f32(3), op in op(), seed in 0u64..1000) {
        let base = frozen_cls(seed);
        let make = |id: &str, s: u64| PluginNetwork::new(3, &[4], base.attachment_point(id).unwrap(), op, s).unwrap();
        let forward = JointModel::new(base.clone(), vec![make("conv2", seed), make("fc1", seed + 1)]).unwrap();
        let reverse = JointModel::new(base.clone(), vec![make("fc1", seed + 1), make("conv2", seed)]).unwrap();
        let x = Tensor::new(&[1, 6, 6], x).unwrap();
        let pe = Tensor::vector(pe).unwrap();
        prop_assert!(forward.forward(&x, &pe).unwrap().bit_eq(&reverse.forward(&x, &pe).unwrap()));
    }

    #[test]
    fn masked_targets_do_not_move_gradients(x in vec_f32(36), pe in vec_f32(3), noise in vec_f32(6), seed in 0u64..1000) {
        let base = frozen_cls(seed);
        let plugin = PluginNetwork::new(3, &[4], base.attachment_point("fc3").unwrap(), FusionOperator::Additive, seed).unwrap();
        let joint = JointModel::new(base, vec![plugin]).unwrap();
        let unknown = vec![true, false, true, false, false, true];
        let cfg = TrainConfig {
            loss_kind: plugnet::tensor::LossKind::BinaryCrossEntropy,
            unknown_mask: unknown.clone(),
            ..TrainConfig::default()
        };
        let mask = Tensor::vector(unknown.iter().map(|u| if *u { 1.0 } else { 0.0 }).collect()).unwrap();
        let target = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let changed: Vec<f32> = target.iter().zip(&unknown).zip(&noise).map(|((t, u), n)| if *u { *t } else { *n }).collect();
        let ex = |t: Vec<f32>| plugnet::synth::Example {
            input: Tensor::new(&[1, 6, 6], x.clone()).unwrap(),
            pe: Tensor::vector(pe.clone()).unwrap(),
            target: Tensor::vector(t).unwrap(),
        };
        let (la, ga) = example_gradients(&joint, &ex(target), &mask, &cfg).unwrap();
        let (lb, gb) = example_gradients(&joint, &ex(changed), &mask, &cfg).unwrap();
        prop_assert_eq!(la.to_bits(), lb.to_bits());
        prop_assert_eq!(ga, gb);
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000) {
        let base = frozen_cls(seed);
        let bytes = checkpoint::to_bytes(&base).unwrap();
        let back = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert!(back.is_frozen());
        prop_assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generators_are_deterministic(seed in any::<u64>(), task in prop::sample::select(vec![0usize, 1, 2])) {
        let cfg = match task {
            0 => GeneratorConfig::Hierarchical(HierConfig { n_train: 40, n_val: 8, n_test: 8, ..HierConfig::default() }),
            1 => GeneratorConfig::Multilabel(MultiConfig { n_train: 40, n_val: 8, n_test: 8, ..MultiConfig::default() }),
            _ => GeneratorConfig::Segmentation(SegConfig { n_train: 10, n_val: 4, n_test: 4, ..SegConfig::default() }),
        };
        let a = cfg.generate(seed).unwrap().to_bytes().unwrap();
        prop_assert_eq!(&a, &cfg.generate(seed).unwrap().to_bytes().unwrap());
        prop_assert_eq!(Dataset::from_bytes(&a).unwrap().to_bytes().unwrap(), a);
    }

    #[test]
    fn plugin_training_leaves_base_bytes_alone(seed in 0u64..1000, op in op()) {
        let cfg = ExperimentConfig::from_json(json!({
            "task_kind": "hierarchical",
            "seed": seed,
            "generator": {"n_train": 64, "n_val": 16, "n_test": 16},
            "plugins": {"attachments": ["conv1", "fc2"], "op": op},
            "plugin_train": {"epochs": 2, "lr_decay_epochs": [1]},
        }))
        .unwrap();
        let data = gen_data(&cfg).unwrap();
        let mut base = BaseNetwork::build(
            arch::toy_cls(&data.info.input_shape, data.info.classes()).unwrap(),
            &data.info.input_shape,
            seed,
        )
        .unwrap();
        base.freeze();
        let before = checkpoint::to_bytes(&base).unwrap();
        let mut joint = plugnet::experiment::build_joint(&cfg, base, &data.info).unwrap();
        let start = joint.plugins()[0].to_bytes().unwrap();
        train_plugins(&mut joint, &data.info, &data.train, &data.val, &cfg.plugin_train).unwrap();
        prop_assert_eq!(checkpoint::to_bytes(joint.base()).unwrap(), before);
        prop_assert_ne!(joint.plugins()[0].to_bytes().unwrap(), start);
    }
}

#[test]
fn zero_epochs_leave_plugins_unchanged() {
    let cfg = ExperimentConfig::from_json(json!({
        "task_kind": "multilabel",
        "generator": {"n_train": 16, "n_val": 4, "n_test": 4},
        "plugin_train": {"epochs": 0, "lr_decay_epochs": []},
    }))
    .unwrap();
    assert_eq!(cfg.task_kind, TaskKind::Multilabel);
    let data = gen_data(&cfg).unwrap();
    let mut base = BaseNetwork::build(arch::toy_cls(&[1, 8, 8], 20).unwrap(), &[1, 8, 8], 0).unwrap();
    base.freeze();
    let mut joint = plugnet::experiment::build_joint(&cfg, base, &data.info).unwrap();
    let start = joint.plugins()[0].to_bytes().unwrap();
    let history = train_plugins(&mut joint, &data.info, &data.train, &data.val, &cfg.plugin_train).unwrap();
    assert!(history.records.is_empty());
    assert_eq!(joint.plugins()[0].to_bytes().unwrap(), start);
}
