use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Sample;
use crate::error::Error;
use crate::numerics::MASK_BLOCKED;
use crate::train::Objective;

const B: f64 = MASK_BLOCKED;

fn small() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        num_classes: 4,
        input_dim: 2,
    }
}

fn random_samples(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample::new(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)], rng.gen_range(0..k)))
        .collect()
}

#[test]
fn mask_examples() {
    assert_eq!(build_mask(1, 1).unwrap().data(), &[0.0, B, 0.0, 0.0]);
    assert_eq!(build_mask(2, 0).unwrap().data(), &[0.0; 4]);
    let m = build_mask(2, 2).unwrap();
    assert_eq!(m.row(0), &[0.0, 0.0, B, B]);
    assert_eq!(m.row(1), &[0.0, 0.0, B, B]);
    assert_eq!(m.row(2), &[0.0, 0.0, 0.0, B]);
    assert_eq!(m.row(3), &[0.0, 0.0, B, 0.0]);
    assert!(matches!(build_mask(0, 3), Err(Error::InvalidArgument(_))));
}

proptest! {
    #[test]
    fn mask_block_structure(nc in 1usize..8, nq in 0usize..8) {
        let m = build_mask(nc, nq).unwrap();
        let l = nc + nq;
        for i in 0..l {
            for j in 0..l {
                let visible = if j < nc { true } else { i >= nc && i == j };
                prop_assert_eq!(m.get(i, j) == 0.0, visible);
            }
        }
    }
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = ModelConfig { model_dim: 15, ..ModelConfig::default() };
    assert!(bad.validate().is_err());
    let zero = ModelConfig { num_layers: 0, ..ModelConfig::default() };
    assert!(zero.validate().is_err());
}

#[test]
fn embeddings_with_zero_weights_are_zero() {
    let w = ModelWeights::zeros(&small()).unwrap();
    assert_eq!(embed_context(&w, &[0.0, 0.0], 0).unwrap(), vec![0.0; 8]);
    assert_eq!(embed_query(&w, &[0.0, 0.0]).unwrap(), vec![0.0; 8]);
}

#[test]
fn context_embedding_separates_labels() {
    let w = ModelWeights::init(&small(), 5).unwrap();
    let x = [0.3, -0.7];
    let tokens: Vec<Vec<f64>> = (0..4).map(|y| embed_context(&w, &x, y).unwrap()).collect();
    for t in &tokens {
        assert_eq!(t.len(), 8);
    }
    for a in 0..4 {
        for b in a + 1..4 {
            assert_ne!(tokens[a], tokens[b]);
        }
    }
    assert!(matches!(embed_context(&w, &x, 4), Err(Error::LabelOutOfRange { .. })));
}

#[test]
fn query_embedding_is_affine() {
    let mut w = ModelWeights::init(&small(), 6).unwrap();
    w.param_mut("embed_query.bias").unwrap().data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 0.0, 0.5, 1.0, -1.0, 2.0]);
    let bias = w.param("embed_query.bias").unwrap().data().to_vec();
    let x = [0.8, -1.1];
    let alpha = -2.5;
    let e1 = embed_query(&w, &x).unwrap();
    let e2 = embed_query(&w, &[alpha * x[0], alpha * x[1]]).unwrap();
    for j in 0..8 {
        assert!(((e2[j] - bias[j]) - alpha * (e1[j] - bias[j])).abs() < 1e-12);
    }
}

#[test]
fn augmented_outputs_on_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = ModelWeights::init(&small(), 2).unwrap();
    let d = random_samples(&mut rng, 6, 4);
    let p = forward_augmented(&w, &d).unwrap();
    assert_eq!(p.len(), 6);
    for row in &p {
        assert_eq!(row.len(), 4);
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!(matches!(forward_augmented(&w, &[]), Err(Error::Empty(_))));
}

#[test]
fn augmented_forward_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let w = ModelWeights::init(&small(), trial).unwrap();
        let d = random_samples(&mut rng, 7, 4);
        let mut perm: Vec<usize> = (0..d.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Sample> = perm.iter().map(|&i| d[i].clone()).collect();
        let p = forward_augmented(&w, &d).unwrap();
        let ps = forward_augmented(&w, &shuffled).unwrap();
        for (pos, &orig) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((ps[pos][c] - p[orig][c]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn query_perturbation_only_moves_its_own_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = ModelWeights::init(&small(), 8).unwrap();
    let ctx = random_samples(&mut rng, 5, 4);
    let mut qs: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let before = forward_context_query(&w, &ctx, &qs).unwrap();
    qs[2][0] += 0.75;
    let after = forward_context_query(&w, &ctx, &qs).unwrap();
    for i in 0..4 {
        if i == 2 {
            assert_ne!(before[i], after[i]);
        } else {
            assert_eq!(before[i], after[i]);
        }
    }
}

#[test]
fn batched_queries_match_single_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w = ModelWeights::init(&small(), 3).unwrap();
    let ctx = random_samples(&mut rng, 4, 4);
    let (a, b) = (vec![0.2, 0.9], vec![-1.3, 0.4]);
    let both = forward_context_query(&w, &ctx, &[a.clone(), b.clone()]).unwrap();
    let pa = forward_context_query(&w, &ctx, &[a]).unwrap();
    let pb = forward_context_query(&w, &ctx, &[b]).unwrap();
    assert_eq!(pa.len(), 1);
    assert_eq!(pa[0].len(), 4);
    for c in 0..4 {
        assert!((both[0][c] - pa[0][c]).abs() < 1e-12);
        assert!((both[1][c] - pb[0][c]).abs() < 1e-12);
    }
    assert!(matches!(forward_context_query(&w, &[], &[vec![0.0, 0.0]]), Err(Error::Empty(_))));
}

#[test]
fn context_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = ModelWeights::init(&small(), 12).unwrap();
    let mut ctx = random_samples(&mut rng, 9, 4);
    let qs = vec![vec![0.1, 0.1], vec![1.0, -2.0]];
    let p = forward_context_query(&w, &ctx, &qs).unwrap();
    ctx.reverse();
    ctx.swap(0, 4);
    let p2 = forward_context_query(&w, &ctx, &qs).unwrap();
    for (r1, r2) in p.iter().zip(&p2) {
        for (a, b) in r1.iter().zip(r2) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn init_is_seeded() {
    let a = ModelWeights::init(&small(), 7).unwrap();
    let b = ModelWeights::init(&small(), 7).unwrap();
    let c = ModelWeights::init(&small(), 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let w = a.param("embed_query.weight").unwrap();
    let bound = 1.0 / 2f64.sqrt();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
    assert!(a.param("layers.0.norm1.gain").unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = ModelWeights::init(&small(), 77).unwrap();
    let ck = Checkpoint::new(Objective::CpAwareFcp, TrainedModel::Icl(w.clone()));
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    let back = Checkpoint::read_from(buf.as_slice()).unwrap();
    assert_eq!(back, ck);
    let TrainedModel::Icl(w2) = &back.model else { panic!("wrong kind") };
    assert_eq!(w2.seed(), 77);
    for (p, q) in w.params().iter().zip(w2.params()) {
        for (a, b) in p.tensor.data().iter().zip(q.tensor.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
    let d = random_samples(&mut rng, 5, 4);
    assert_eq!(forward_augmented(&w, &d).unwrap(), forward_augmented(w2, &d).unwrap());

    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn mlp_checkpoint_round_trip() {
    let w = MlpWeights::init(&MlpConfig::default(), 3).unwrap();
    let ck = Checkpoint::new(Objective::LogLoss, TrainedModel::Mlp(w));
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    assert_eq!(Checkpoint::read_from(buf.as_slice()).unwrap(), ck);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let w = ModelWeights::init(&small(), 1).unwrap();
    let mut buf = Vec::new();
    Checkpoint::new(Objective::LogLoss, TrainedModel::Icl(w)).write_to(&mut buf).unwrap();
    let mut bad_magic = buf.clone();
    bad_magic[0] = b'X';
    assert!(Checkpoint::read_from(bad_magic.as_slice()).is_err());
    let truncated = &buf[..buf.len() - 8];
    assert!(Checkpoint::read_from(truncated).is_err());
    let mut trailing = buf.clone();
    trailing.push(0);
    assert!(Checkpoint::read_from(trailing.as_slice()).is_err());
}

#[test]
fn mlp_outputs_are_distributions() {
    let w = MlpWeights::init(&MlpConfig::default(), 4).unwrap();
    let p = w.predict(&[vec![0.5, -0.5], vec![3.0, 1.0]]).unwrap();
    for row in p {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
