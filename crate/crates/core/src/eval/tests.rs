use super::*;
use crate::model::{MlpConfig, MlpWeights, ModelConfig, ModelWeights};

fn small() -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        num_classes: 4,
        input_dim: 2,
    }
}

fn icl(objective: Objective) -> Checkpoint {
    Checkpoint::new(objective, TrainedModel::Icl(ModelWeights::init(&small(), 7).unwrap()))
}

fn jl() -> Checkpoint {
    let cfg = MlpConfig {
        hidden_dim: 8,
        ..MlpConfig::default()
    };
    Checkpoint::new(Objective::LogLoss, TrainedModel::Mlp(MlpWeights::init(&cfg, 7).unwrap()))
}

fn ckpt_for(s: SchemeId) -> Checkpoint {
    if s == SchemeId::JlScp {
        jl()
    } else {
        icl(s.required_objective())
    }
}

fn short() -> EvalConfig {
    EvalConfig {
        tasks: 6,
        realizations: 2,
        test_inputs: 3,
        ..EvalConfig::default()
    }
}

#[test]
fn scheme_names_round_trip() {
    for s in SchemeId::ALL {
        assert_eq!(s.name().parse::<SchemeId>().unwrap(), s);
        assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
    }
    assert_eq!("e-icl-fcp".parse::<SchemeId>().unwrap(), SchemeId::EIclFcp);
    assert!("ICL".parse::<SchemeId>().is_err());
    assert_eq!(SchemeId::EIclScp.required_objective(), Objective::CpAwareScp);
}

#[test]
fn scheme_checkpoint_mismatch_is_rejected() {
    let fam = TaskFamily::Qpsk;
    let cases = [
        (SchemeId::EIclFcp, icl(Objective::LogLoss)),
        (SchemeId::IclFcp, icl(Objective::CpAwareFcp)),
        (SchemeId::IclScp, jl()),
        (SchemeId::JlScp, icl(Objective::LogLoss)),
    ];
    for (s, c) in cases {
        let err = run_eval(s, &c, &fam, &short(), 0).unwrap_err();
        assert!(matches!(err, Error::SchemeMismatch { .. }), "{s}: {err}");
    }
    let bad = EvalConfig { l: 3, ..short() };
    assert!(run_eval(SchemeId::IclScp, &icl(Objective::LogLoss), &fam, &bad, 0).is_err());
    let empty = EvalConfig { tasks: 0, ..short() };
    assert!(run_eval(SchemeId::IclScp, &icl(Objective::LogLoss), &fam, &empty, 0).is_err());
}

#[test]
fn tiny_alpha_forces_full_sets() {
    let cfg = EvalConfig {
        alpha: 0.01,
        ..short()
    };
    for s in SchemeId::ALL {
        let r = run_eval(s, &ckpt_for(s), &TaskFamily::Qpsk, &cfg, 3).unwrap();
        assert_eq!(r.summary.coverage, 1.0, "{s}");
        assert_eq!(r.summary.mean_size, 4.0, "{s}");
    }
}

#[test]
fn counters_follow_the_declared_formulas() {
    let cfg = short();
    for s in SchemeId::ALL {
        let r = run_eval(s, &ckpt_for(s), &TaskFamily::Qpsk, &cfg, 1).unwrap();
        let per_real = if s.is_fcp() { 4 * 3 * 20 } else { 19 + 3 };
        assert_eq!(r.summary.prediction_evals, (6 * 2 * per_real) as u64, "{s}");
        assert_eq!(r.summary.prediction_evals, r.summary.expected_prediction_evals);
        assert!(r.per_task.iter().all(|t| t.prediction_evals == (2 * per_real) as u64));
        assert_eq!(r.summary.points, 36);
        assert_eq!(r.per_task.len(), 6);
    }
}

#[test]
fn untrained_models_still_cover() {
    let cfg = EvalConfig::default();
    for s in [SchemeId::IclScp, SchemeId::IclFcp, SchemeId::JlScp] {
        let r = run_eval(s, &ckpt_for(s), &TaskFamily::Qpsk, &cfg, 21).unwrap();
        let c = r.summary.coverage;
        assert!((0.88..=0.92).contains(&c), "{s}: coverage {c}");
        assert!(c >= r.summary.coverage_floor);
        assert!(r.per_task.iter().all(|t| (0.0..=1.0).contains(&t.coverage) && t.mean_size <= 4.0));
    }
}

#[test]
fn reports_are_reproducible_and_thread_independent() {
    let c = icl(Objective::LogLoss);
    let a = run_eval(SchemeId::IclFcp, &c, &TaskFamily::Qpsk, &short(), 5).unwrap();
    let b = run_eval(SchemeId::IclFcp, &c, &TaskFamily::Qpsk, &short(), 5).unwrap();
    let seq = EvalConfig {
        deterministic: true,
        ..short()
    };
    let d = run_eval(SchemeId::IclFcp, &c, &TaskFamily::Qpsk, &seq, 5).unwrap();
    let bytes = |r: &EvalReport| {
        let mut v = Vec::new();
        r.write_summary(&mut v).unwrap();
        r.write_per_task(&mut v).unwrap();
        v
    };
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(bytes(&a), bytes(&d));
    assert_eq!(a.summary.config_hash, d.summary.config_hash);
    let other = run_eval(SchemeId::IclFcp, &c, &TaskFamily::Qpsk, &short(), 6).unwrap();
    assert_ne!(other.summary.config_hash, a.summary.config_hash);
}

#[test]
fn comparison_table() {
    let r = run_eval(SchemeId::IclFcp, &icl(Objective::LogLoss), &TaskFamily::Qpsk, &short(), 2).unwrap();
    let rows = compare(&[r.summary.clone(), r.summary.clone(), r.summary.clone()]);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|row| row.reduction_vs_icl_fcp_pct == Some(0.0)));

    let mut smaller = r.summary.clone();
    smaller.scheme = SchemeId::EIclFcp;
    smaller.mean_size = r.summary.mean_size * 0.9;
    smaller.coverage = 0.5;
    let rows = compare(&[r.summary.clone(), smaller]);
    assert!((rows[1].reduction_vs_icl_fcp_pct.unwrap() - 10.0).abs() < 1e-9);
    assert!(rows[1].below_floor);

    let scp = run_eval(SchemeId::IclScp, &icl(Objective::LogLoss), &TaskFamily::Qpsk, &short(), 2).unwrap();
    assert_eq!(compare(std::slice::from_ref(&scp.summary))[0].reduction_vs_icl_fcp_pct, None);

    let mut csv = Vec::new();
    write_table_csv(&mut csv, &rows).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("scheme,coverage,mean_size,reduction_vs_icl_fcp_pct"));
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("E_ICL_FCP"));

    assert_eq!(paired_size_test(&r, &scp).unwrap().pairs, 6);
    let shifted = run_eval(SchemeId::IclScp, &icl(Objective::LogLoss), &TaskFamily::Qpsk, &short(), 3).unwrap();
    assert!(paired_size_test(&r, &shifted).is_err());
}

#[test]
fn fnv_reference_vectors() {
    assert_eq!(fnv1a_hex(b""), "cbf29ce484222325");
    assert_eq!(fnv1a_hex(b"a"), "af63dc4c8601ec8c");
}
