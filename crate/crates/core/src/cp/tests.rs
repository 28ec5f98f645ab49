use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::model::{ModelConfig, ModelWeights};

const INF: f64 = f64::INFINITY;

#[test]
fn logloss_examples() {
    assert_eq!(ncs_logloss(&[0.0, 1.0], 1).unwrap(), 0.0);
    let e = (-1.0f64).exp();
    assert!((ncs_logloss(&[e, 1.0 - e], 0).unwrap() - 1.0).abs() < 1e-15);
    // −ln(1e-12) = 12·ln 10
    let floored = ncs_logloss(&[0.0, 1.0], 0).unwrap();
    assert!((floored - 12.0 * 10f64.ln()).abs() < 1e-12);
    assert!((floored - 27.631).abs() < 1e-3);
    assert!(matches!(ncs_logloss(&[0.5, 0.5], 2), Err(Error::LabelOutOfRange { .. })));
}

#[test]
fn quantile_examples() {
    assert_eq!(conformal_quantile(&[5.0], 0.1).unwrap(), 5.0);
    let ten: Vec<f64> = (1..=10).rev().map(f64::from).collect();
    assert_eq!(conformal_quantile(&ten, 0.1).unwrap(), 9.0);
    assert_eq!(conformal_quantile(&[0.2, INF, 0.4], 0.1).unwrap(), INF);
    // duplicates count separately: rank ⌈0.5·4⌉ = 2
    assert_eq!(conformal_quantile(&[3.0, 1.0, 1.0, 2.0], 0.5).unwrap(), 1.0);
    assert!(conformal_quantile(&[1.0], 0.0).is_err());
    assert!(conformal_quantile(&[1.0], 1.0).is_err());
    assert!(conformal_quantile(&[], 0.1).is_err());
}

#[test]
fn rank_avoids_float_round_up() {
    assert_eq!(conformal_rank(20, 0.1), 18);
    assert_eq!(conformal_rank(10, 0.1), 9);
    assert_eq!(conformal_rank(3, 0.1), 3);
    assert_eq!(conformal_rank(1, 0.9), 1);
}

#[test]
fn scp_calibration_examples() {
    let cal = [0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4, 0.5];
    // m = 9 plus +inf: rank ⌈0.9·10⌉ = 9, the largest calibration score
    assert_eq!(scp_calibrate(&cal, 0.1).unwrap(), 0.9);
    assert_eq!(scp_calibrate(&[2.5; 9], 0.1).unwrap(), 2.5);
    assert_eq!(scp_calibrate(&[0.3], 0.1).unwrap(), INF);
    assert!(matches!(scp_calibrate(&[], 0.1), Err(Error::Empty(_))));
}

#[test]
fn scp_predict_examples() {
    let scores = [0.1, 0.5, 0.9, 1.3];
    assert_eq!(scp_predict(INF, &scores).members(), &[0, 1, 2, 3]);
    assert!(scp_predict(0.05, &scores).is_empty());
    let set = scp_predict(0.9, &scores);
    assert_eq!(set.members(), &[0, 1, 2]);
    assert!((0..4).all(|y| set.threshold(y) == 0.9));
}

#[test]
fn fcp_forced_inclusion_for_small_alpha() {
    let s = ScoreMatrix::new(vec![vec![0.1, 0.2, 9.0], vec![5.0, 6.0, 7.0]]).unwrap();
    // ⌈(1 − 0.2)·3⌉ = 3: the quantile is the row maximum
    let set = fcp_predict(&s, 0.2).unwrap();
    assert_eq!(set.members(), &[0, 1]);
}

#[test]
fn fcp_equal_row_is_included() {
    let s = ScoreMatrix::new(vec![vec![1.0; 5], vec![0.0, 0.0, 0.0, 0.0, 3.0]]).unwrap();
    // rank ⌈0.7·5⌉ = 4 → row 1 threshold 0 < 3
    let set = fcp_predict(&s, 0.3).unwrap();
    assert!(set.contains(0));
    assert!(!set.contains(1));
}

/// Definition by exhaustion: `y` is admitted iff some row element `v`
/// with `#{≤ v} ≥ rank` is at least the test score.
fn brute_force_members(s: &ScoreMatrix, alpha: f64) -> Vec<usize> {
    let n1 = s.width();
    let rank = (1..=n1).find(|&r| r as f64 >= (1.0 - alpha) * n1 as f64 - 1e-9).unwrap();
    (0..s.num_labels())
        .filter(|&y| {
            let row = s.row(y);
            row.iter()
                .any(|&v| row.iter().filter(|&&w| w <= v).count() >= rank && s.test_score(y) <= v
                    && row.iter().filter(|&&w| w < v).count() < rank)
        })
        .collect()
}

#[test]
fn fcp_hand_built_matches_brute_force() {
    // K = 2, n = 3
    let s = ScoreMatrix::new(vec![vec![0.4, 1.2, 0.3, 0.9], vec![0.2, 0.1, 0.5, 1.7]]).unwrap();
    for alpha in [0.05, 0.2, 0.3, 0.5, 0.8] {
        let set = fcp_predict(&s, alpha).unwrap();
        assert_eq!(set.members(), brute_force_members(&s, alpha).as_slice(), "alpha {alpha}");
    }
    // α = 0.5: rank 2; row 0 sorted [0.3, 0.4, 0.9, 1.2] → q = 0.4 < 0.9
    assert!(fcp_predict(&s, 0.5).unwrap().is_empty());
}

#[test]
fn score_matrix_rejects_ragged_or_nan() {
    assert!(ScoreMatrix::new(vec![vec![0.1, 0.2], vec![0.1]]).is_err());
    assert!(ScoreMatrix::new(vec![vec![f64::NAN]]).is_err());
    assert!(ScoreMatrix::new(vec![]).is_err());
}

fn tiny_model() -> ModelWeights {
    let cfg = ModelConfig {
        num_layers: 1,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        num_classes: 4,
        input_dim: 2,
    };
    ModelWeights::init(&cfg, 3).unwrap()
}

fn gaussian_data(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Sample> {
    let noise = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let y = rng.gen_range(0..k);
            let x = vec![y as f64 + noise.sample(rng), noise.sample(rng)];
            Sample::new(x, y)
        })
        .collect()
}

#[test]
fn icl_scores_shape_counter_and_order_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = tiny_model();
    let d = gaussian_data(&mut rng, 19, 4);
    let counter = EvalCounter::new();
    let s = fcp_scores_from_icl(&w, &d, &[0.3, -0.1], &counter).unwrap();
    assert_eq!((s.num_labels(), s.width()), (4, 20));
    assert_eq!(counter.get(), 80);

    let mut perm: Vec<usize> = (0..19).collect();
    perm.shuffle(&mut rng);
    let shuffled: Vec<Sample> = perm.iter().map(|&i| d[i].clone()).collect();
    let s2 = fcp_scores_from_icl(&w, &shuffled, &[0.3, -0.1], &counter).unwrap();
    for y in 0..4 {
        assert!((s.test_score(y) - s2.test_score(y)).abs() < 1e-10);
        let mut a = s.row(y)[..19].to_vec();
        let mut b: Vec<f64> = s2.row(y)[..19].to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
    }
    assert_eq!(counter.get(), 160);
}

#[test]
fn frequency_oracle_favours_only_class() {
    let d: Vec<Sample> = (0..6).map(|i| Sample::new(vec![i as f64], 2)).collect();
    let p = FrequencyPredictor { num_classes: 3 };
    let s = retrain_scores(&p, &d, &[0.0]).unwrap();
    let set = fcp_retrain_oracle(&p, &d, &[0.0], 0.2).unwrap();
    assert!(set.contains(2));
    assert!(s.test_score(2) < s.test_score(0));
    assert!(s.test_score(2) < s.test_score(1));
}

#[test]
fn oracle_matches_fcp_predict_on_small_instance() {
    let d = vec![
        Sample::new(vec![0.0], 0),
        Sample::new(vec![0.2], 0),
        Sample::new(vec![1.9], 1),
        Sample::new(vec![2.1], 1),
    ];
    let p = CentroidPredictor {
        num_classes: 2,
        temperature: 1.0,
    };
    for x in [-0.5, 0.1, 1.0, 2.0, 3.5] {
        for alpha in [0.1, 0.2, 0.4] {
            let oracle = fcp_retrain_oracle(&p, &d, &[x], alpha).unwrap();
            let fast = fcp_predict(&retrain_scores(&p, &d, &[x]).unwrap(), alpha).unwrap();
            assert_eq!(oracle.members(), fast.members());
            for y in 0..2 {
                assert_eq!(oracle.threshold(y), fast.threshold(y));
            }
        }
    }
}

#[test]
fn oracle_equivalence_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let k = rng.gen_range(2..=4);
        let n = rng.gen_range(1..=8);
        let alpha = rng.gen_range(0.05..0.6);
        let d = gaussian_data(&mut rng, n, k);
        let x = [rng.gen_range(-1.0..4.0), rng.gen_range(-1.0..1.0)];
        let p = CentroidPredictor {
            num_classes: k,
            temperature: 0.7,
        };
        let oracle = fcp_retrain_oracle(&p, &d, &x, alpha).unwrap();
        let fast = fcp_predict(&retrain_scores(&p, &d, &x).unwrap(), alpha).unwrap();
        for y in 0..k {
            if fast.margin(y) > 1e-9 {
                assert_eq!(oracle.contains(y), fast.contains(y));
            }
        }
    }
}

#[test]
fn retrain_fcp_coverage_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let alpha = 0.1;
    let p = CentroidPredictor {
        num_classes: 3,
        temperature: 1.0,
    };
    let draws = 2000;
    let mut covered = 0;
    for _ in 0..draws {
        let mut d = gaussian_data(&mut rng, 9, 3);
        let test = d.pop().unwrap();
        let set = fcp_retrain_oracle(&p, &d, &test.x, alpha).unwrap();
        covered += usize::from(set.contains(test.y));
    }
    let coverage = covered as f64 / draws as f64;
    assert!(coverage >= 1.0 - alpha - 0.02, "coverage {coverage}");
}

#[test]
fn pipeline_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = CentroidPredictor {
        num_classes: 3,
        temperature: 0.5,
    };
    for _ in 0..100 {
        let mut d = gaussian_data(&mut rng, 7, 3);
        let x = [rng.gen_range(-1.0..3.0), 0.0];
        let a = fcp_predict(&retrain_scores(&p, &d, &x).unwrap(), 0.2).unwrap();
        d.shuffle(&mut rng);
        let b = fcp_predict(&retrain_scores(&p, &d, &x).unwrap(), 0.2).unwrap();
        for y in 0..3 {
            if a.margin(y) > 1e-9 {
                assert_eq!(a.contains(y), b.contains(y));
            }
        }
    }
}

proptest! {
    #[test]
    fn sets_shrink_as_alpha_grows(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 6), 1..5),
        a1 in 0.01f64..0.98,
        gap in 0.0f64..0.5,
    ) {
        let a2 = (a1 + gap).min(0.99);
        let s = ScoreMatrix::new(rows).unwrap();
        let big = fcp_predict(&s, a1).unwrap();
        let small = fcp_predict(&s, a2).unwrap();
        for &y in small.members() {
            prop_assert!(big.contains(y));
        }
        let cal: Vec<f64> = s.row(0).to_vec();
        let tests: Vec<f64> = s.rows().iter().map(|r| r[0]).collect();
        let scp_big = scp_predict(scp_calibrate(&cal, a1).unwrap(), &tests);
        let scp_small = scp_predict(scp_calibrate(&cal, a2).unwrap(), &tests);
        for &y in scp_small.members() {
            prop_assert!(scp_big.contains(y));
        }
    }

    #[test]
    fn set_membership_matches_thresholds(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 4), 1..5),
        alpha in 0.01f64..0.99,
    ) {
        let s = ScoreMatrix::new(rows).unwrap();
        let set = fcp_predict(&s, alpha).unwrap();
        for y in 0..s.num_labels() {
            prop_assert_eq!(set.contains(y), set.test_score(y) <= set.threshold(y));
        }
    }
}
