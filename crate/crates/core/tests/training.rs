mod common;

use vqvae::io::checkpoint::{Checkpoint, Model};
use vqvae::io::config::RunConfig;
use vqvae::io::{byte_to_unit, synth};
use vqvae::nets::{ModelSpec, EMBEDDINGS};
use vqvae::prior::PriorSpec;
use vqvae::tensor::Tensor;
use vqvae::trainer::{
    encode_dataset, evaluate, PriorTrainer, StepMetrics, TrainConfig, TrainError, VqVaeTrainer,
};

fn corpus(n: usize, seed: u64) -> Tensor {
    let (px, _) = synth::digits(n, seed);
    Tensor::new([n, 1, 28, 28], px.iter().map(|&b| byte_to_unit(b)).collect()).unwrap()
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64
}

fn small_spec() -> ModelSpec {
    ModelSpec {
        hidden: 16,
        residual_hidden: 8,
        residual_blocks: 1,
        embedding_dim: 4,
        codebook_size: 8,
        ..ModelSpec::default()
    }
}

fn config(steps: u64, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size,
        steps,
        eval_interval: 0,
        checkpoint_interval: 0,
        seed,
        lr: 2e-4,
    }
}

#[test]
fn single_image_is_memorised() {
    let x = corpus(1, 3);
    let spec = ModelSpec {
        hidden: 64,
        residual_hidden: 32,
        embedding_dim: 16,
        codebook_size: 4,
        ..ModelSpec::default()
    };
    let mut t = VqVaeTrainer::new(spec, config(2000, 1, 0), 1).unwrap();
    for _ in 0..2000 {
        t.step(&x).unwrap();
    }
    let err = mse(&t.model.reconstruct(&x).unwrap().mean, &x);
    assert!(err < 1e-3, "mse {err}");
}

#[test]
fn identical_runs_agree_bitwise_at_every_step() {
    let x = corpus(20, 1);
    let mut a = VqVaeTrainer::new(small_spec(), config(15, 8, 4), 20).unwrap();
    let mut b = VqVaeTrainer::new(small_spec(), config(15, 8, 4), 20).unwrap();
    for _ in 0..15 {
        let (ma, mb) = (a.step(&x).unwrap(), b.step(&x).unwrap());
        assert_eq!(strip(ma), strip(mb));
        assert_eq!(a.model, b.model);
        assert_eq!(a.adam, b.adam);
    }
}

#[test]
fn seed_changes_the_run() {
    let x = corpus(20, 1);
    let mut a = VqVaeTrainer::new(small_spec(), config(2, 8, 4), 20).unwrap();
    let mut b = VqVaeTrainer::new(small_spec(), config(2, 8, 5), 20).unwrap();
    a.step(&x).unwrap();
    b.step(&x).unwrap();
    assert_ne!(a.model, b.model);
}

#[test]
fn ema_mode_keeps_embeddings_out_of_adam() {
    let x = corpus(16, 2);
    let spec = ModelSpec {
        ema: true,
        ..small_spec()
    };
    let mut t = VqVaeTrainer::new(spec, config(3, 8, 0), 16).unwrap();
    for _ in 0..3 {
        let before = t.model.codebook.clone();
        // The update the trainer will apply, computed independently.
        let mut expected = before.clone();
        let idx = {
            let mut order = vqvae::trainer::DataOrder::new(16, 0);
            order.batch(t.step, 8)
        };
        let xb = x.select_batch(&idx);
        let z_e = t.model.encode_tensor(&xb).unwrap();
        let grid = expected.assign(&z_e).unwrap();
        expected.ema_update(&z_e, &grid).unwrap();
        t.step(&x).unwrap();
        assert!(!t.adam.moments.contains_key(EMBEDDINGS));
        assert_eq!(t.model.codebook, expected);
    }
}

#[test]
fn loss_mode_moves_embeddings_with_adam() {
    let x = corpus(16, 2);
    let mut t = VqVaeTrainer::new(small_spec(), config(1, 8, 0), 16).unwrap();
    let before = t.model.codebook.embeddings.clone();
    t.step(&x).unwrap();
    assert!(t.adam.moments.contains_key(EMBEDDINGS));
    assert_ne!(t.model.codebook.embeddings, before);
    assert!(t.model.codebook.ema.is_none());
}

/// Paired runs with identical seed and corpus; the two codebook update rules
/// should land at comparable reconstruction quality.
#[test]
fn ema_and_loss_modes_reach_similar_reconstruction() {
    let x = corpus(256, 7);
    let steps = 1500;
    let mut finals = Vec::new();
    for ema in [false, true] {
        let spec = ModelSpec {
            hidden: 32,
            residual_hidden: 16,
            embedding_dim: 8,
            codebook_size: 16,
            ema,
            ..ModelSpec::default()
        };
        let mut t = VqVaeTrainer::new(spec, config(steps, 32, 11), 256).unwrap();
        for _ in 0..steps {
            t.step(&x).unwrap();
        }
        let r = evaluate(&x, &t.model, None, 64).unwrap();
        finals.push(r.bound.recon_nll);
    }
    let rel = (finals[0] - finals[1]).abs() / finals[0].min(finals[1]);
    assert!(rel < 0.10, "recon nll loss {} ema {} rel {rel}", finals[0], finals[1]);
}

#[test]
fn divergence_is_reported_with_its_step() {
    let x = corpus(8, 0);
    let mut cfg = config(50, 8, 0);
    cfg.lr = 1e30;
    let mut t = VqVaeTrainer::new(small_spec(), cfg, 8).unwrap();
    let err = (0..50).find_map(|_| t.step(&x).err()).expect("training diverges");
    match err {
        TrainError::Diverged { step, .. } => assert_eq!(step, t.step + 1),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn evaluation_is_reproducible() {
    let x = corpus(40, 5);
    let mut t = VqVaeTrainer::new(small_spec(), config(5, 8, 0), 40).unwrap();
    for _ in 0..5 {
        t.step(&x).unwrap();
    }
    let a = evaluate(&x, &t.model, None, 16).unwrap();
    let b = evaluate(&x, &t.model, None, 7).unwrap();
    assert_eq!(a, evaluate(&x, &t.model, None, 16).unwrap());
    assert_eq!(a.stats, b.stats);
    assert!((a.recon_mse - b.recon_mse).abs() < 1e-12);
    // Uniform prior term: 7×7 positions × ln 8 nats.
    let want = 49.0 * 8f64.ln();
    assert!((a.bound.prior_nll - want).abs() < 1e-9);
}

#[test]
fn trained_prior_never_loses_to_uniform_on_its_data() {
    let x = corpus(64, 6);
    let mut t = VqVaeTrainer::new(small_spec(), config(100, 16, 0), 64).unwrap();
    for _ in 0..100 {
        t.step(&x).unwrap();
    }
    let grids = encode_dataset(&t.model, &x, 32).unwrap();
    let spec = PriorSpec {
        height: 7,
        width: 7,
        k: 8,
        layers: 2,
        hidden: 16,
        embedding_dim: 8,
        kernel_size: 5,
    };
    let mut cfg = config(200, 16, 0);
    cfg.lr = 1e-3;
    let mut p = PriorTrainer::new(spec, cfg).unwrap();
    for _ in 0..200 {
        p.step(&grids).unwrap();
    }
    let with = evaluate(&x, &t.model, Some(&p.prior), 32).unwrap();
    let without = evaluate(&x, &t.model, None, 32).unwrap();
    assert!(with.bits_per_dim <= without.bits_per_dim);
    assert_eq!(with.recon_mse, without.recon_mse);
}

/// Metrics with the wall-clock field removed.
fn strip(m: StepMetrics) -> (u64, u64, u64, u64, u64) {
    (
        m.step,
        m.recon_nll.to_bits(),
        m.codebook_loss.to_bits(),
        m.commit_loss.to_bits(),
        m.perplexity.to_bits(),
    )
}

#[test]
fn resuming_from_a_checkpoint_replays_the_metrics() {
    // 20 images with batch 8 crosses epoch boundaries mid-run.
    let x = corpus(20, 8);
    for ema in [false, true] {
        let spec = ModelSpec { ema, ..small_spec() };
        let cfg = config(12, 8, 9);
        let mut whole = VqVaeTrainer::new(spec.clone(), cfg.clone(), 20).unwrap();
        let reference: Vec<_> = (0..12).map(|_| strip(whole.step(&x).unwrap())).collect();

        let mut first = VqVaeTrainer::new(spec.clone(), cfg.clone(), 20).unwrap();
        let mut replay: Vec<_> = (0..5).map(|_| strip(first.step(&x).unwrap())).collect();
        let ck = Checkpoint {
            config: RunConfig {
                model: spec,
                train: cfg.clone(),
                ..RunConfig::default()
            },
            step: first.step,
            rng: first.rng_state(),
            adam: Some(first.adam.clone()),
            model: Model::VqVae(first.model.clone()),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes(), std::path::Path::new("mem")).unwrap();
        assert_eq!(back.rng, first.rng_state());
        let Model::VqVae(model) = back.model else { panic!("kind") };
        let mut resumed =
            VqVaeTrainer::resume(model, back.adam.unwrap(), cfg, back.step, 20).unwrap();
        replay.extend((5..12).map(|_| strip(resumed.step(&x).unwrap())));

        assert_eq!(replay, reference);
        assert_eq!(resumed.model, whole.model);
    }
}
