//! End-to-end behaviour of training, evaluation and feedback-prop.

use plugnet::bench::{fbprop_config, time_medians, BenchConfig};
use plugnet::experiment::{base_stage, gen_data, plugin_stage, ExperimentConfig};
use plugnet::fbprop::feedback_prop_infer;
use plugnet::nn::checkpoint;
use plugnet::plugin::JointModel;
use plugnet::synth::{Example, HierConfig, TaskKind};
use plugnet::tensor::Tensor;
use plugnet::train::{evaluate, Metric, Predictor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn small(task: &str, seed: u64) -> ExperimentConfig {
    ExperimentConfig::from_json(json!({
        "task_kind": task,
        "seed": seed,
        "generator": {"n_train": 600, "n_val": 100, "n_test": 200},
        "base_train": {"epochs": 4, "lr_decay_epochs": [3]},
        "plugin_train": {"epochs": 4, "lr_decay_epochs": [3]},
    }))
    .unwrap()
}

#[test]
fn feedback_prop_lowers_known_label_loss() {
    for seed in 0..3 {
        let cfg = small("multilabel", seed);
        let data = gen_data(&cfg).unwrap();
        let base = base_stage(&cfg, &data).unwrap().model;
        let before = checkpoint::to_bytes(&base).unwrap();
        let fb = fbprop_config(&base, &data.info, &BenchConfig::default()).unwrap();
        for ex in &data.test[..20] {
            let out = feedback_prop_infer(&base, &ex.input, &ex.target, &fb).unwrap();
            assert!(out.final_loss <= out.initial_loss, "seed {seed}: {out:?}");
        }
        assert_eq!(checkpoint::to_bytes(&base).unwrap(), before);
    }
}

#[test]
fn feedback_prop_cost_grows_with_iterations() {
    let cfg = small("multilabel", 0);
    let data = gen_data(&cfg).unwrap();
    let base = base_stage(&cfg, &data).unwrap().model;
    let batch = &data.test[..16];
    let config = |t| fbprop_config(&base, &data.info, &BenchConfig { fbprop_iterations: t, ..BenchConfig::default() }).unwrap();
    let (one, ten) = (config(1), config(10));
    let mut runs: [Box<dyn FnMut() -> plugnet::Result<()>>; 2] = [
        Box::new(|| {
            for ex in batch {
                feedback_prop_infer(&base, &ex.input, &ex.target, &one)?;
            }
            Ok(())
        }),
        Box::new(|| {
            for ex in batch {
                feedback_prop_infer(&base, &ex.input, &ex.target, &ten)?;
            }
            Ok(())
        }),
    ];
    let t = time_medians(5, 30, &mut runs).unwrap();
    assert!(t[1] >= 5.0 * t[0], "T=1 {:.6}s, T=10 {:.6}s", t[0], t[1]);
}

#[test]
fn plugin_training_loss_falls_over_first_epochs() {
    for seed in 0..3 {
        let cfg = small("hierarchical", seed);
        let data = gen_data(&cfg).unwrap();
        let base = base_stage(&cfg, &data).unwrap().model;
        let stage = plugin_stage(&cfg, base, &data).unwrap();
        let losses: Vec<f64> = stage.history.records.iter().map(|r| r.train_loss).collect();
        assert!(losses[1] < losses[0] && losses[2] < losses[1], "seed {seed}: {losses:?}");
    }
}

#[test]
fn same_seed_same_metrics() {
    let run = || {
        let cfg = small("hierarchical", 5);
        let data = gen_data(&cfg).unwrap();
        let b = base_stage(&cfg, &data).unwrap();
        let j = plugin_stage(&cfg, b.model.clone(), &data).unwrap();
        (
            serde_json::to_string(&b.test).unwrap(),
            b.history.to_jsonl().unwrap(),
            serde_json::to_string(&j.test).unwrap(),
            j.history.to_jsonl().unwrap(),
            checkpoint::to_bytes(&b.model).unwrap(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn identity_plugins_score_like_the_base() {
    let cfg = small("multilabel", 1);
    let data = gen_data(&cfg).unwrap();
    let base = base_stage(&cfg, &data).unwrap().model;
    let mut joint = plugnet::experiment::build_joint(&cfg, base.clone(), &data.info).unwrap();
    for p in joint.plugins_mut() {
        p.make_identity().unwrap();
    }
    let joint: JointModel = joint;
    let a = evaluate(&base, &data.info, &data.test, &[Metric::Map]).unwrap();
    let b = evaluate(&joint, &data.info, &data.test, &[Metric::Map]).unwrap();
    assert_eq!(a, b);
}

/// Reads the answer straight out of the input.
struct Oracle;

impl Predictor for Oracle {
    fn predict(&self, x: &Tensor, _pe: &Tensor) -> plugnet::Result<Tensor> {
        Ok(x.clone())
    }
}

/// Logits drawn from a generator seeded by the input.
struct Noise;

impl Predictor for Noise {
    fn predict(&self, x: &Tensor, _pe: &Tensor) -> plugnet::Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from(x.values()[0].to_bits()));
        Tensor::vector((0..16).map(|_| rng.random::<f32>()).collect())
    }
}

#[test]
fn evaluation_of_reference_predictors() {
    let info = HierConfig::default().info();
    assert_eq!(info.task, TaskKind::Hierarchical);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<Example> = (0..2000)
        .map(|i| {
            let mut t = vec![0.0; 16];
            t[i % 16] = 1.0;
            let target = Tensor::vector(t).unwrap();
            let mut input = target.values().to_vec();
            input[0] += rng.random::<f32>() * 1e-3;
            Example {
                input: Tensor::vector(input).unwrap(),
                pe: Tensor::vector(vec![0.0; 4]).unwrap(),
                target,
            }
        })
        .collect();
    let perfect = evaluate(&Oracle, &info, &data, &[Metric::McAcc, Metric::Map, Metric::IouAcc]).unwrap();
    assert_eq!(perfect.get(Metric::McAcc), Some(100.0));
    assert_eq!(perfect.get(Metric::Map), Some(100.0));
    assert_eq!(perfect.get(Metric::IouAcc), Some(100.0));
    let random = evaluate(&Noise, &info, &data, &[Metric::McAcc]).unwrap();
    let acc = random.get(Metric::McAcc).unwrap();
    assert!((acc - 6.25).abs() <= 2.0, "{acc}");
    assert!(evaluate(&Oracle, &info, &data, &[Metric::MeanIou]).unwrap_err().is_config());
}
