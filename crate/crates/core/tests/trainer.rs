mod common;

use coalrec::data::{HierVocab, PaddedSequence};
use coalrec::model::encoder::EncoderInput;
use coalrec::model::heads::{collect_terms, sample_negatives};
use coalrec::synth::{generate, SynthDomain, SynthProfile};
use coalrec::train::*;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        max_len: 6,
        dim: 8,
        layers: 1,
        heads: 2,
        batch_size: 16,
        epochs: 1,
        variant,
        ..Default::default()
    }
}

fn tiny_batch(vocab: &HierVocab, seed: u64) -> Vec<PaddedSequence> {
    random_batch(vocab, 6, 16, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn uniform_gamma_scales_the_plain_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for d in 1..6 {
        let losses: Vec<f64> = (0..40).map(|_| rng.random::<f64>() * 3.0).collect();
        let domains: Vec<usize> = (0..40).map(|_| rng.random_range(0..d)).collect();
        let uniform = vec![1.0 / d as f64; d];
        let r = rebalanced_loss(&losses, &domains, &uniform).unwrap();
        let direct: f64 = losses.iter().map(|l| l / d as f64).sum();
        assert_eq!(r, direct);
        assert!((r - hcross_loss(&losses) / d as f64).abs() < 1e-12);
    }
}

#[test]
fn one_hot_gamma_keeps_one_domain() {
    let losses = [1.0, 2.0, 4.0, 8.0];
    let domains = [0, 1, 1, 2];
    assert_eq!(rebalanced_loss(&losses, &domains, &[0.0, 1.0, 0.0]).unwrap(), 6.0);
}

#[test]
fn random_gamma_matches_term_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, vocab) = grouped_vocab(3, 2, 4);
    let model = random_model(model_for(&vocab, 6, 8, 1, 2), 3, 0.4);
    let batch = tiny_batch(&vocab, 4);
    let negs = sample_negatives(&batch, &vocab, &[0, 1], &mut rng);
    let terms = collect_terms(&batch, &negs, &[0, 1]);
    let mut gamma: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
    let z: f64 = gamma.iter().sum();
    gamma.iter_mut().for_each(|g| *g /= z);
    let input = EncoderInput::from_batch(&batch, 2, false);
    let losses = model.term_losses(&input, &terms).unwrap();
    let domains: Vec<usize> = terms.iter().map(|t| t.domain).collect();
    let got = rebalanced_loss(&losses, &domains, &gamma).unwrap();
    let weights: Vec<f64> = terms.iter().map(|t| gamma[t.domain]).collect();
    let oracle = ref_objective(&model, &batch, false, &terms, &weights) * batch.len() as f64;
    assert!((got - oracle).abs() < 1e-9 * oracle.abs().max(1.0));
}

#[test]
fn variant_wiring() {
    let (_, vocab) = grouped_vocab(3, 2, 4);
    let batch = tiny_batch(&vocab, 5);
    let targets: usize = batch.iter().map(|s| s.target_count()).sum();

    let mut bsa = Trainer::new(tiny_config(Variant::Bsa), &vocab).unwrap();
    let log = bsa.train_step(&batch, &vocab).unwrap();
    assert_eq!(log.terms, targets);
    assert_eq!(log.gamma, vec![1.0; 3]);
    assert!(log.phi.is_none());

    let mut hcl = Trainer::new(tiny_config(Variant::Hcl), &vocab).unwrap();
    let log = hcl.train_step(&batch, &vocab).unwrap();
    assert_eq!(log.terms, 2 * targets);
    assert_eq!(log.gamma, vec![1.0 / 3.0; 3]);
    assert!(log.phi.is_none());

    let mut lrl = Trainer::new(tiny_config(Variant::Lrl), &vocab).unwrap();
    let log = lrl.train_step(&batch, &vocab).unwrap();
    assert_eq!(log.terms, targets);
    assert!(log.phi.is_some());
    assert!((log.gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let mut full = Trainer::new(tiny_config(Variant::Full), &vocab).unwrap();
    let log = full.train_step(&batch, &vocab).unwrap();
    assert_eq!(log.terms, 2 * targets);
    assert_eq!(log.gamma, full.gamma.normalized());
}

#[test]
fn same_seed_gives_identical_parameters() {
    let (_, vocab) = grouped_vocab(3, 2, 4);
    let run = || {
        let mut t = Trainer::new(tiny_config(Variant::Full), &vocab).unwrap();
        for s in 0..5 {
            t.train_step(&tiny_batch(&vocab, s), &vocab).unwrap();
        }
        (t.model, t.gamma)
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn single_domain_full_equals_hcl() {
    let (_, vocab) = grouped_vocab(1, 3, 4);
    let mut full = Trainer::new(tiny_config(Variant::Full), &vocab).unwrap();
    let mut hcl = Trainer::new(tiny_config(Variant::Hcl), &vocab).unwrap();
    for s in 0..4 {
        let batch = tiny_batch(&vocab, s);
        let a = full.train_step(&batch, &vocab).unwrap();
        let b = hcl.train_step(&batch, &vocab).unwrap();
        assert_eq!(a.gamma, vec![1.0]);
        assert_eq!(a.loss, b.loss);
    }
    assert_eq!(full.model, hcl.model);
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let (_, vocab) = grouped_vocab(2, 2, 3);
    let mut t = Trainer::new(tiny_config(Variant::Hcl), &vocab).unwrap();
    let before = t.model.params.clone();
    let batch = tiny_batch(&vocab, 7);
    let negs = sample_negatives(&batch, &vocab, &[0, 1], &mut ChaCha8Rng::seed_from_u64(0));
    let terms = collect_terms(&batch, &negs, &[0, 1]);
    let input = EncoderInput::from_batch(&batch, 2, false);
    let grads = t.model.objective(&input, &terms, &vec![0.5; terms.len()], None).unwrap().grads;
    let mut adam = Adam::new(&t.model.config, 1e-3);
    adam.step(&mut t.model.params, &grads);
    for (((_, p0), (_, p1)), (_, g)) in before.tensors().iter().zip(t.model.params.tensors()).zip(grads.tensors()) {
        for i in 0..p0.len() {
            // m̂ = g, v̂ = g², step = lr g / (|g| + eps)
            let expect = p0[i] - 1e-3 * g[i] / (g[i].abs() + 1e-8);
            assert!((p1[i] - expect).abs() < 1e-15);
        }
    }
    assert!(t.model.params.embeddings.iter().all(|e| e.row(0).iter().all(|&v| v == 0.0)));
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let (_, vocab) = grouped_vocab(2, 2, 3);
    let mut t = Trainer::new(tiny_config(Variant::Full), &vocab).unwrap();
    t.model.params.heads[1].b4.fill(f64::NAN);
    match t.train_step(&tiny_batch(&vocab, 1), &vocab) {
        Err(TrainError::NonFinite { step, per_domain, .. }) => {
            assert_eq!(step, 1);
            assert_eq!(per_domain.len(), 2);
        }
        Err(TrainError::Game(_)) => {}
        other => panic!("expected an abort, got {other:?}"),
    }
    let mut t = Trainer::new(tiny_config(Variant::Hcl), &vocab).unwrap();
    t.model.params.heads[1].b4.fill(f64::NAN);
    assert!(matches!(
        t.train_step(&tiny_batch(&vocab, 1), &vocab),
        Err(TrainError::NonFinite { .. })
    ));
}

fn small_profile(seed: u64) -> SynthProfile {
    SynthProfile {
        users: 400,
        min_len: 8,
        max_len: 16,
        seed,
        ..Default::default()
    }
}

#[test]
fn one_batch_epoch_refreshes_once() {
    let ds = generate(&SynthProfile { users: 20, ..small_profile(1) }).unwrap();
    let cfg = TrainConfig { batch_size: 64, epochs: 1, dim: 8, heads: 1, layers: 1, ..Default::default() };
    let r = fit(&ds, &cfg).unwrap();
    assert_eq!(r.refreshes, 1);
    assert_eq!(r.trajectory.rows.len(), 2);
    let r = fit(&ds, &TrainConfig { variant: Variant::Hcl, ..cfg }).unwrap();
    assert_eq!(r.refreshes, 0);
}

#[test]
fn refreshes_equal_minibatches() {
    let ds = generate(&small_profile(2)).unwrap();
    let cfg = TrainConfig { batch_size: 64, epochs: 2, dim: 8, heads: 1, layers: 1, variant: Variant::Lrl, ..Default::default() };
    let r = fit(&ds, &cfg).unwrap();
    let batches: usize = r.epochs.iter().map(|e| e.steps).sum();
    assert_eq!(batches, 2 * 400usize.div_ceil(64));
    assert_eq!(r.refreshes, batches);
}

#[test]
fn empty_dataset_is_an_error() {
    let mut ds = generate(&SynthProfile { users: 5, ..small_profile(1) }).unwrap();
    ds.sequences.iter_mut().for_each(|s| s.items.truncate(2));
    assert!(matches!(fit(&ds, &TrainConfig::default()), Err(TrainError::EmptyDataset)));
}

#[test]
fn training_loss_decreases_early() {
    let mut ok = 0;
    for seed in 0..5 {
        let ds = generate(&small_profile(100 + seed)).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 32, dim: 16, heads: 2, layers: 1, seed, ..Default::default() };
        let r = fit(&ds, &cfg).unwrap();
        let l: Vec<f64> = r.epochs.iter().map(|e| e.train_loss).collect();
        if l[1] < l[0] && l[2] < l[1] {
            ok += 1;
        }
    }
    assert!(ok >= 4, "loss decreased in only {ok}/5 seeds");
}

#[test]
fn checkpoint_round_trip_reproduces_validation() {
    let ds = generate(&small_profile(3)).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 64, dim: 8, heads: 1, layers: 1, ..Default::default() };
    let r = fit(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    r.best.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, r.best);
    back.check_vocab(&ds.vocab).unwrap();
    let rep = coalrec::eval::evaluate(&back.model, &ds.vocab, &r.splits, coalrec::eval::Target::Valid, &eval_setup(&cfg)).unwrap();
    assert!((rep.overall.ndcg5 - r.best_valid.overall.ndcg5).abs() < 1e-9);
    assert_eq!(rep.overall.ndcg5, back.valid_ndcg5);

    let other = generate(&SynthProfile {
        domains: vec![SynthDomain { name: "z".into(), depth: 2, fanout: vec![2], items_per_leaf: 3, rate: 1.0 }],
        cross_corr: vec![vec![1.0]],
        noise_domains: vec![],
        ..small_profile(3)
    })
    .unwrap();
    assert!(back.check_vocab(&other.vocab).is_err());
}
