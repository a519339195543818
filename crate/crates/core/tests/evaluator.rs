mod common;

use std::collections::HashSet;

use coalrec::data::{pad_truncate, split_all};
use coalrec::eval::*;
use coalrec::synth::{generate, SynthDomain, SynthProfile};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64, chunk: usize) -> EvalSetup {
    EvalSetup { negatives: 99, item_only: false, seed, chunk }
}

fn case(domain: usize, rank: usize) -> RankedCase {
    RankedCase { user_id: String::new(), domain, rank, candidates: 100, deficit: 0 }
}

#[test]
fn aggregate_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cases: Vec<RankedCase> = (0..1000).map(|_| case(rng.random_range(0..3), rng.random_range(1..=100))).collect();
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let rep = aggregate(&cases, &names, Target::Test, 0).unwrap();
    for d in 0..3 {
        let (mut n, mut h5, mut h10, mut n5, mut n10, mut mrr) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for c in cases.iter().filter(|c| c.domain == d) {
            n += 1.0;
            let r = c.rank as f64;
            if c.rank <= 5 {
                h5 += 1.0;
                n5 += std::f64::consts::LN_2 / (r + 1.0).ln();
            }
            if c.rank <= 10 {
                h10 += 1.0;
                n10 += std::f64::consts::LN_2 / (r + 1.0).ln();
            }
            mrr += 1.0 / r;
        }
        let m = &rep.domains[d].metrics;
        assert_eq!(m.cases as f64, n);
        for (got, want) in [(m.hr5, h5), (m.hr10, h10), (m.ndcg5, n5), (m.ndcg10, n10), (m.mrr, mrr)] {
            assert!((got - want / n).abs() < 1e-12);
        }
    }
    assert_eq!(rep.domains.iter().map(|d| d.metrics.cases).sum::<usize>(), 1000);
    assert_eq!(rep.overall.cases, 1000);
}

#[test]
fn all_first_ranks_give_perfect_metrics() {
    let m = Metrics::from_ranks(vec![1; 17]);
    assert_eq!([m.hr5, m.hr10, m.ndcg5, m.ndcg10, m.mrr], [1.0; 5]);
    assert!(matches!(aggregate(&[], &[], Target::Valid, 0), Err(EvalError::Empty)));
}

#[test]
fn random_scores_give_harmonic_mrr() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20_000;
    let ranks: Vec<usize> = (0..n)
        .map(|_| {
            let negs: Vec<f64> = (0..99).map(|_| rng.random()).collect();
            rank_from_scores(rng.random(), &negs)
        })
        .collect();
    let expect: f64 = (1..=100).map(|k| 1.0 / k as f64).sum::<f64>() / 100.0;
    let var: f64 = (1..=100).map(|k| (1.0 / k as f64 - expect).powi(2)).sum::<f64>() / 100.0;
    let mrr = Metrics::from_ranks(ranks).mrr;
    assert!((expect - 0.0519).abs() < 1e-4);
    assert!((mrr - expect).abs() < 3.0 * (var / n as f64).sqrt(), "{mrr} vs {expect}");
}

fn metrics_vec(m: &Metrics) -> [f64; 5] {
    [m.hr5, m.hr10, m.ndcg5, m.ndcg10, m.mrr]
}

proptest! {
    #[test]
    fn metric_invariants(ranks in prop::collection::vec(1usize..=100, 1..200)) {
        let m = Metrics::from_ranks(ranks.clone());
        prop_assert!(m.hr5 <= m.hr10);
        prop_assert!(m.ndcg5 <= m.hr5 + 1e-15);
        prop_assert!(m.ndcg10 <= m.hr10 + 1e-15);
        prop_assert!(m.mrr >= 0.01 - 1e-15);
        prop_assert!(metrics_vec(&m).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn improving_a_rank_never_hurts(
        ranks in prop::collection::vec(1usize..=100, 1..100),
        pick in any::<prop::sample::Index>(),
        gain in 1usize..100,
    ) {
        let before = Metrics::from_ranks(ranks.clone());
        let mut better = ranks;
        let i = pick.index(better.len());
        better[i] = better[i].saturating_sub(gain).max(1);
        let after = Metrics::from_ranks(better);
        for (a, b) in metrics_vec(&after).iter().zip(metrics_vec(&before)) {
            prop_assert!(*a >= b);
        }
    }
}

fn tiny_profile(users: usize) -> SynthProfile {
    SynthProfile { users, min_len: 6, max_len: 14, ..Default::default() }
}

#[test]
fn candidates_avoid_history_and_are_distinct() {
    let ds = generate(&tiny_profile(300)).unwrap();
    let (splits, _) = split_all(&ds.sequences);
    for (i, s) in splits.iter().enumerate() {
        let history: HashSet<u32> = s.history_items().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let negs = sample_candidates(&ds.vocab, s.test_target.domain, &history, 99, &mut rng);
        assert_eq!(negs.len(), 99);
        let range = ds.vocab.range(s.test_target.domain, 1);
        assert!(negs.iter().all(|n| range.contains(*n) && !history.contains(n)));
        assert!(!negs.contains(&s.test_target.item_id()));
        assert!(!negs.contains(&s.valid_target.item_id()));
        assert_eq!(negs.iter().collect::<HashSet<_>>().len(), 99);
    }
}

#[test]
fn small_domain_records_deficit() {
    let dom = |name: &str, leaf| SynthDomain { name: name.into(), depth: 2, fanout: vec![4], items_per_leaf: leaf, rate: 1.0 };
    let profile = SynthProfile {
        domains: vec![dom("big", 40), dom("small", 5)],
        cross_corr: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        noise_domains: vec![],
        ..tiny_profile(100)
    };
    let ds = generate(&profile).unwrap();
    let (splits, _) = split_all(&ds.sequences);
    let model = random_model(model_for(&ds.vocab, 8, 8, 1, 1), 1, 0.1);
    let cases = rank_cases(&model, &ds.vocab, &splits, Target::Test, &setup(0, 64)).unwrap();
    for (c, s) in cases.iter().zip(&splits) {
        let history: HashSet<u32> = s.history_items().collect();
        let range = ds.vocab.range(c.domain, 1);
        let eligible = range.ids().filter(|i| !history.contains(i)).count();
        assert_eq!(c.candidates, eligible.min(99) + 1);
        assert_eq!(c.deficit, 99 - eligible.min(99));
        assert!(c.rank >= 1 && c.rank <= c.candidates);
    }
    assert!(cases.iter().any(|c| c.domain == 1 && c.deficit > 0));
    let rep = aggregate(&cases, ds.vocab.domain_names(), Target::Test, 0).unwrap();
    assert_eq!(rep.short_cases, cases.iter().filter(|c| c.deficit > 0).count());
}

#[test]
fn ranks_match_reference_scoring_and_ignore_chunking() {
    let ds = generate(&tiny_profile(60)).unwrap();
    let (splits, _) = split_all(&ds.sequences);
    let m = 8;
    let model = random_model(model_for(&ds.vocab, m, 8, 1, 2), 4, 0.5);
    let a = rank_cases(&model, &ds.vocab, &splits, Target::Valid, &setup(5, 256)).unwrap();
    let b = rank_cases(&model, &ds.vocab, &splits, Target::Valid, &setup(5, 7)).unwrap();
    assert_eq!(a, b);
    let top = ds.vocab.depth() - 1;
    for (i, (c, s)) in a.iter().zip(&splits).enumerate() {
        let window = pad_truncate(s.valid_context(), m);
        let z = reference_encode(&model, &window, false);
        let ctx = ref_context(&model, &z[m - 1], top);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(i as u64);
        let history: HashSet<u32> = s.history_items().collect();
        let negs = sample_candidates(&ds.vocab, s.valid_target.domain, &history, 99, &mut rng);
        let pos = ref_score(&model, &ctx, top, s.valid_target.item_id());
        let worse_or_tied = negs.iter().filter(|&&n| ref_score(&model, &ctx, top, n) >= pos - 1e-9).count();
        let strictly_above = negs.iter().filter(|&&n| ref_score(&model, &ctx, top, n) > pos + 1e-9).count();
        assert!(c.rank >= 1 + strictly_above && c.rank <= 1 + worse_or_tied, "case {i}");
        assert_eq!(c.domain, s.valid_target.domain);
    }
}

#[test]
fn report_counts_sum_to_cases() {
    let ds = generate(&tiny_profile(200)).unwrap();
    let (splits, _) = split_all(&ds.sequences);
    let model = random_model(model_for(&ds.vocab, 8, 8, 1, 1), 2, 0.1);
    let rep = evaluate(&model, &ds.vocab, &splits, Target::Test, &setup(1, 64)).unwrap();
    assert_eq!(rep.domains.iter().map(|d| d.metrics.cases).sum::<usize>(), splits.len());
    let csv = rep.to_csv();
    assert!(csv.starts_with("domain,cases,hr@5,hr@10,ndcg@5,ndcg@10,mrr\n"));
    assert_eq!(csv.lines().count(), 2 + ds.vocab.domain_count());
}
