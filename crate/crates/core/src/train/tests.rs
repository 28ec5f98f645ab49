use super::*;
use crate::model::{MlpConfig, ModelConfig};
use crate::numerics::Tensor;
use crate::tasks::GaussianTaskConfig;

fn tiny() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        num_classes: 4,
        input_dim: 2,
    }
}

fn toy_family() -> TaskFamily {
    TaskFamily::Gaussian(GaussianTaskConfig::default())
}

fn toy_config(objective: Objective) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        tasks_per_epoch: 64,
        realizations_per_task: 4,
        batch_size: 16,
        lr_init: 3e-3,
        lr_min: 3e-4,
        cosine_period: 30,
        seed: 11,
        objective,
        validation_tasks: 64,
        ..TrainConfig::default()
    }
}

#[test]
fn cosine_schedule_closed_form() {
    let c = TrainConfig::default();
    assert!((cosine_lr(0, &c) - 2e-4).abs() < 1e-18);
    assert!((cosine_lr(25, &c) - 1.1e-4).abs() < 1e-18);
    assert!((cosine_lr(25, &c) - (c.lr_init + c.lr_min) / 2.0).abs() < 1e-18);
    assert!((cosine_lr(50, &c) - 2e-5).abs() < 1e-18);
    assert_eq!(cosine_lr(80, &c), cosine_lr(50, &c));
    for s in 0..50 {
        assert!(cosine_lr(s + 1, &c) < cosine_lr(s, &c));
    }
}

#[test]
fn config_invariants() {
    TrainConfig::default().validate().unwrap();
    let bad_split = TrainConfig { l: 9, ..TrainConfig::default() };
    assert!(bad_split.validate().is_err());
    let bad_lr = TrainConfig {
        lr_min: 2e-4,
        ..TrainConfig::default()
    };
    assert!(bad_lr.validate().is_err());
    let text = serde_json::to_string(&TrainConfig::default()).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), TrainConfig::default());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
}

fn one_param(values: Vec<f64>) -> Vec<NamedTensor> {
    let n = values.len();
    vec![NamedTensor {
        name: "w".into(),
        tensor: Tensor::new(vec![n], values).unwrap(),
    }]
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = one_param(vec![1.0, -2.0, 3.0]);
    let before = p.clone();
    let mut st = AdamState::new(&p);
    for _ in 0..10 {
        adam_step(&mut p, &[vec![0.0; 3]], &mut st, 1e-2).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(st.steps(), 10);
}

#[test]
fn adam_constant_gradient_steps_by_lr() {
    let lr = 1e-3;
    let mut p = one_param(vec![0.0, 0.0]);
    let mut st = AdamState::new(&p);
    let mut prev = p[0].tensor.data().to_vec();
    for step in 0..2000 {
        adam_step(&mut p, &[vec![0.5, -3.0]], &mut st, lr).unwrap();
        let cur = p[0].tensor.data().to_vec();
        let d = [cur[0] - prev[0], cur[1] - prev[1]];
        // bias correction makes every step ≈ −lr·sign(g)
        assert!((d[0] + lr).abs() < 1e-7 * (step + 1) as f64 + 1e-9, "{d:?}");
        assert!((d[1] - lr).abs() < 1e-7 * (step + 1) as f64 + 1e-9, "{d:?}");
        prev = cur;
    }
}

#[test]
fn adam_rejects_mismatched_gradients() {
    let mut p = one_param(vec![0.0; 2]);
    let mut st = AdamState::new(&p);
    assert!(adam_step(&mut p, &[vec![0.0; 3]], &mut st, 1e-3).is_err());
}

#[test]
fn zero_epochs_returns_initial_weights() {
    let init = init_icl(&tiny(), 3).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let out = train(init.clone(), &cfg, &TaskFamily::Qpsk).unwrap();
    assert_eq!(out.checkpoint.model, init);
    assert!(out.log.is_empty());
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn rejects_incompatible_setups() {
    let mlp = init_mlp(&MlpConfig::default(), 0).unwrap();
    let cfg = toy_config(Objective::CpAwareFcp);
    assert!(train(mlp, &cfg, &TaskFamily::Qpsk).is_err());
    let wide = ModelConfig {
        input_dim: 3,
        ..tiny()
    };
    let icl = init_icl(&wide, 0).unwrap();
    assert!(train(icl, &toy_config(Objective::LogLoss), &TaskFamily::Qpsk).is_err());
}

#[test]
fn toy_log_loss_training_learns_in_context() {
    // many distinct tasks, one realization each: fewer tasks get memorized
    let cfg = TrainConfig {
        tasks_per_epoch: 2048,
        realizations_per_task: 1,
        batch_size: 32,
        validation_tasks: 256,
        ..toy_config(Objective::LogLoss)
    };
    let family = toy_family();
    let out = train(init_icl(&tiny(), 1).unwrap(), &cfg, &family).unwrap();
    assert_eq!(out.log.len(), 30);
    let first = out.log[0].loss;
    let last = out.log[29].loss;
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    let val = validation_episodes(&cfg, &family).unwrap();
    let acc = query_accuracy(&out.checkpoint.model, &val).unwrap();
    assert!(acc > 0.95, "validation accuracy {acc}");
    assert_eq!(out.checkpoint.objective, Objective::LogLoss);
    let best = out.log.iter().map(|r| r.val_metric).fold(f64::INFINITY, f64::min);
    assert_eq!(out.log[out.best_epoch - 1].val_metric, best);
}

#[test]
fn toy_cp_aware_training_reduces_loss() {
    let cfg = toy_config(Objective::CpAwareFcp);
    let out = train(init_icl(&tiny(), 1).unwrap(), &cfg, &toy_family()).unwrap();
    let first = out.log[0].loss;
    let last = out.log.last().unwrap().loss;
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    assert!(out.log.iter().all(|r| r.ineff.is_some() && r.class.is_some()));
}

#[test]
fn toy_scp_training_reduces_loss() {
    let cfg = TrainConfig {
        epochs: 10,
        ..toy_config(Objective::CpAwareScp)
    };
    let out = train(init_icl(&tiny(), 1).unwrap(), &cfg, &toy_family()).unwrap();
    assert!(out.log.last().unwrap().loss < out.log[0].loss);
}

#[test]
fn training_is_deterministic_and_thread_independent() {
    let cfg = TrainConfig {
        epochs: 2,
        tasks_per_epoch: 8,
        realizations_per_task: 2,
        batch_size: 4,
        validation_tasks: 4,
        ..toy_config(Objective::CpAwareFcp)
    };
    let a = train(init_icl(&tiny(), 5).unwrap(), &cfg, &toy_family()).unwrap();
    let seq = TrainConfig {
        deterministic: true,
        ..cfg.clone()
    };
    let b = train(init_icl(&tiny(), 5).unwrap(), &seq, &toy_family()).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.log, b.log);
}

#[test]
fn trained_checkpoint_round_trips_bit_exactly() {
    let cfg = TrainConfig {
        epochs: 2,
        tasks_per_epoch: 8,
        realizations_per_task: 2,
        batch_size: 4,
        validation_tasks: 4,
        ..toy_config(Objective::LogLoss)
    };
    let family = toy_family();
    let out = train(init_icl(&tiny(), 2).unwrap(), &cfg, &family).unwrap();
    let mut buf = Vec::new();
    out.checkpoint.write_to(&mut buf).unwrap();
    let back = Checkpoint::read_from(buf.as_slice()).unwrap();
    assert_eq!(back, out.checkpoint);
    for e in validation_episodes(&cfg, &family).unwrap() {
        let p = predict_query(&out.checkpoint.model, &e.context, &e.query.x).unwrap();
        let q = predict_query(&back.model, &e.context, &e.query.x).unwrap();
        assert_eq!(
            p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            q.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    let mut log = Vec::new();
    write_log(&mut log, &out.log).unwrap();
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 2);
}

#[test]
fn joint_learning_mlp_fits_pooled_data() {
    let cfg = TrainConfig {
        epochs: 5,
        tasks_per_epoch: 16,
        realizations_per_task: 4,
        batch_size: 8,
        lr_init: 3e-3,
        lr_min: 3e-4,
        validation_tasks: 16,
        ..TrainConfig::default()
    };
    let mlp = init_mlp(&MlpConfig::default(), 4).unwrap();
    let out = train(mlp, &cfg, &TaskFamily::Qpsk).unwrap();
    assert!(out.log.last().unwrap().loss < out.log[0].loss);
    assert!(matches!(out.checkpoint.model, TrainedModel::Mlp(_)));
}

#[test]
fn divergence_is_reported() {
    let mut w = ModelWeights::init(&tiny(), 0).unwrap();
    w.param_mut("head.weight").unwrap().data_mut()[0] = f64::NAN;
    let cfg = TrainConfig {
        epochs: 1,
        tasks_per_epoch: 2,
        realizations_per_task: 1,
        validation_tasks: 2,
        ..toy_config(Objective::LogLoss)
    };
    let err = train(TrainedModel::Icl(w), &cfg, &toy_family()).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
}
