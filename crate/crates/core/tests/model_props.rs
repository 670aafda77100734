mod common;

use common::props::{padding_invariance, random_curve};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spiro_core::model::{
    apply_gradient, batch_gradient, example_gradient, example_loss, forward, new_optimizer, predict, predict_batch, train, Examples,
    ModelConfig, ModelParams,
};
use spiro_core::preproc::{patchify, PatchSequence};

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        patch_len: 10,
        d_embed: 8,
        layers: 1,
        heads: 2,
        head_hidden: 6,
        dropout: 0.0,
        seed,
        ..ModelConfig::default()
    }
}

fn sequences(n: usize, seed: u64) -> Vec<PatchSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| patchify(&random_curve(&mut rng, 5 + (i * 7) % 36, 40), 10).unwrap())
        .collect()
}

#[test]
fn padding_and_masking_invariants() {
    let rep = padding_invariance(50, 3);
    assert!(rep.logit_diff < 1e-9, "{rep:?}");
    assert_eq!(rep.pad_attention, 0.0, "{rep:?}");
    assert!(rep.importance_sum_err < 1e-9, "{rep:?}");
}

#[test]
fn forward_is_bitwise_repeatable() {
    let params = ModelParams::init(&tiny(5), 4).unwrap();
    let seq = &sequences(1, 5)[0];
    assert_eq!(forward(&params, seq).unwrap(), forward(&params, seq).unwrap());
}

#[test]
fn batch_and_single_predictions_agree() {
    let params = ModelParams::init(&tiny(6), 4).unwrap();
    let seqs = sequences(9, 6);
    let refs: Vec<&PatchSequence> = seqs.iter().collect();
    let batch = predict_batch(&params, &refs).unwrap();
    for (s, b) in seqs.iter().zip(&batch) {
        assert_eq!(&predict(&params, s).unwrap(), b);
    }
}

#[test]
fn near_zero_model_is_near_chance() {
    for seed in 0..5 {
        let mut params = ModelParams::init(&tiny(seed), 4).unwrap();
        for t in params.weights.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 1e-2);
        }
        let seqs = sequences(100, seed);
        let mut mean = 0.0;
        for s in &seqs {
            let p = predict(&params, s).unwrap();
            assert!(p.probability > 0.0 && p.probability < 1.0);
            assert_eq!(p.cls_embedding.len(), 8);
            mean += p.probability / seqs.len() as f64;
        }
        assert!((mean - 0.5).abs() < 0.1, "seed {seed}: mean probability {mean}");
    }
}

#[test]
fn single_example_overfits() {
    let mut params = ModelParams::init(&tiny(8), 4).unwrap();
    let seq = &sequences(1, 8)[0];
    let initial = example_loss(&params, seq, 1).unwrap();
    let mut adam = new_optimizer(&params);
    for _ in 0..50 {
        let (_, g) = example_gradient(&params, seq, 1, 0.0, 0).unwrap();
        apply_gradient(&mut params, &mut adam, &g, 1e-2).unwrap();
    }
    let last = example_loss(&params, seq, 1).unwrap();
    assert!(last < 0.1 * initial, "{initial} -> {last}");
}

fn fit(cfg: &ModelConfig) -> (ModelParams, spiro_core::model::History) {
    let seqs = sequences(24, 9);
    let refs: Vec<&PatchSequence> = seqs.iter().collect();
    let labels: Vec<u8> = (0..24).map(|i| (i % 2) as u8).collect();
    train(
        cfg,
        Examples {
            inputs: &refs[..16],
            labels: &labels[..16],
        },
        Examples {
            inputs: &refs[16..],
            labels: &labels[16..],
        },
    )
    .unwrap()
}

#[test]
fn zero_learning_rate_leaves_params_and_loss_flat() {
    let cfg = ModelConfig {
        lr: 0.0,
        epochs: 3,
        batch_size: 4,
        ..tiny(10)
    };
    let (params, history) = fit(&cfg);
    assert_eq!(params, ModelParams::init(&cfg, 4).unwrap());
    assert!(history.train_loss.windows(2).all(|w| w[0] == w[1]));
    assert!(history.val_loss.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn training_is_deterministic() {
    let cfg = ModelConfig {
        lr: 1e-2,
        epochs: 3,
        batch_size: 4,
        dropout: 0.1,
        ..tiny(11)
    };
    let (a, ha) = fit(&cfg);
    let (b, hb) = fit(&cfg);
    assert_eq!(ha, hb);
    assert_eq!(a, b);
}

#[test]
fn frozen_batch_loss_falls_for_five_steps() {
    let mut params = ModelParams::init(&tiny(12), 4).unwrap();
    let seqs = sequences(16, 12);
    let refs: Vec<&PatchSequence> = seqs.iter().collect();
    let labels: Vec<u8> = (0..16).map(|i| u8::from(seqs[i].valid_patches() > 2)).collect();
    let mut adam = new_optimizer(&params);
    let mut last = f64::INFINITY;
    for _ in 0..5 {
        let (loss, g) = batch_gradient(&params, &refs, &labels, 0.0, 0).unwrap();
        assert!(loss < last, "{loss} after {last}");
        last = loss;
        apply_gradient(&mut params, &mut adam, &g, 1e-3).unwrap();
    }
}
