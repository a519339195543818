//! Leave-one-out ranking against sampled negatives: HR, NDCG and MRR.

use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{pad_truncate, HierVocab, Interaction, LeaveOneOutSplit};
use crate::model::encoder::EncoderInput;
use crate::model::heads::{level_context, score};
use crate::model::{Model, ModelError};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which held-out interaction is ranked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// Second-to-last interaction, context = training prefix.
    Valid,
    /// Last interaction, context = training prefix plus validation item.
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSetup {
    pub negatives: usize,
    /// Embed only the item level (for item-level-only models).
    pub item_only: bool,
    pub seed: u64,
    /// Sequences encoded per forward pass.
    pub chunk: usize,
}

impl Default for EvalSetup {
    fn default() -> Self {
        Self {
            negatives: 99,
            item_only: false,
            seed: 0,
            chunk: 256,
        }
    }
}

/// Outcome for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCase {
    pub user_id: String,
    pub domain: usize,
    /// 1 is best.
    pub rank: usize,
    pub candidates: usize,
    /// Negatives missing because the domain ran out of unseen items.
    pub deficit: usize,
}

/// `1 + #{negatives scoring >= positive}`: ties count against the positive.
pub fn rank_from_scores(positive: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= positive).count()
}

pub fn hit(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Up to `count` distinct ids of `domain`'s item range not in `exclude`.
pub fn sample_candidates(
    vocab: &HierVocab,
    domain: usize,
    exclude: &HashSet<u32>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let range = vocab.range(domain, vocab.depth() - 1);
    let blocked = range.ids().filter(|id| exclude.contains(id)).count();
    let eligible = range.len as usize - blocked;
    if eligible <= count {
        return range.ids().filter(|id| !exclude.contains(id)).collect();
    }
    if eligible >= 4 * count {
        let mut seen = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let id = range.start + rng.random_range(0..range.len);
            if !exclude.contains(&id) && seen.insert(id) {
                out.push(id);
            }
        }
        return out;
    }
    let pool: Vec<u32> = range.ids().filter(|id| !exclude.contains(id)).collect();
    index::sample(rng, pool.len(), count).into_iter().map(|i| pool[i]).collect()
}

fn case_rng(seed: u64, case: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case as u64);
    rng
}

/// Rank every split's held-out `target`. Negatives for case `i` come from
/// stream `i` of `setup.seed`, so results do not depend on chunking.
pub fn rank_cases(
    model: &Model,
    vocab: &HierVocab,
    splits: &[LeaveOneOutSplit],
    target: Target,
    setup: &EvalSetup,
) -> Result<Vec<RankedCase>, EvalError> {
    let m = model.config.max_len;
    let top = vocab.depth() - 1;
    let mut out = Vec::with_capacity(splits.len());
    for (chunk_idx, chunk) in splits.chunks(setup.chunk.max(1)).enumerate() {
        let windows: Vec<_> = chunk
            .iter()
            .map(|s| match target {
                Target::Valid => pad_truncate(s.valid_context(), m),
                Target::Test => pad_truncate(&s.test_context(), m),
            })
            .collect();
        let input = EncoderInput::from_batch(&windows, vocab.depth(), setup.item_only);
        let z = model.forward(&input, None)?.output;
        for (b, split) in chunk.iter().enumerate() {
            let case = chunk_idx * setup.chunk.max(1) + b;
            let held: &Interaction = match target {
                Target::Valid => &split.valid_target,
                Target::Test => &split.test_target,
            };
            let positive = held.item_id();
            let history: HashSet<u32> = split.history_items().collect();
            let mut rng = case_rng(setup.seed, case);
            let negs = sample_candidates(vocab, held.domain, &history, setup.negatives, &mut rng);
            let ctx = level_context(&model.params, &z.row(b * m + m - 1), top);
            let pos_score = score(&model.params, &ctx.view(), positive, top)?;
            let neg_scores = negs
                .iter()
                .map(|&n| score(&model.params, &ctx.view(), n, top))
                .collect::<Result<Vec<_>, _>>()?;
            out.push(RankedCase {
                user_id: split.user_id.clone(),
                domain: held.domain,
                rank: rank_from_scores(pos_score, &neg_scores),
                candidates: negs.len() + 1,
                deficit: setup.negatives - negs.len(),
            });
        }
    }
    Ok(out)
}

/// Mean metrics over a group of cases.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub cases: usize,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub mrr: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Metrics::default();
        for r in ranks {
            m.cases += 1;
            m.hr5 += hit(r, 5);
            m.hr10 += hit(r, 10);
            m.ndcg5 += ndcg(r, 5);
            m.ndcg10 += ndcg(r, 10);
            m.mrr += 1.0 / r as f64;
        }
        if m.cases > 0 {
            let n = m.cases as f64;
            for v in [&mut m.hr5, &mut m.hr10, &mut m.ndcg5, &mut m.ndcg10, &mut m.mrr] {
                *v /= n;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: Target,
    pub seed: u64,
    pub domains: Vec<DomainMetrics>,
    pub overall: Metrics,
    /// Cases that had fewer negatives than requested.
    pub short_cases: usize,
}

impl EvalReport {
    /// Unweighted mean of per-domain NDCG@5 over domains with cases.
    pub fn macro_ndcg5(&self) -> f64 {
        let with: Vec<f64> = self
            .domains
            .iter()
            .filter(|d| d.metrics.cases > 0)
            .map(|d| d.metrics.ndcg5)
            .collect();
        with.iter().sum::<f64>() / with.len().max(1) as f64
    }

    pub fn ndcg5(&self, domain: usize) -> f64 {
        self.domains[domain].metrics.ndcg5
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,cases,hr@5,hr@10,ndcg@5,ndcg@10,mrr\n");
        let rows = self
            .domains
            .iter()
            .map(|d| (d.domain.as_str(), &d.metrics))
            .chain(std::iter::once(("all", &self.overall)));
        for (name, m) in rows {
            out.push_str(&format!(
                "{name},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                m.cases, m.hr5, m.hr10, m.ndcg5, m.ndcg10, m.mrr
            ));
        }
        out
    }
}

/// Per-domain and overall means.
pub fn aggregate(cases: &[RankedCase], domain_names: &[String], target: Target, seed: u64) -> Result<EvalReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::Empty);
    }
    let domains = domain_names
        .iter()
        .enumerate()
        .map(|(d, name)| DomainMetrics {
            domain: name.clone(),
            metrics: Metrics::from_ranks(cases.iter().filter(|c| c.domain == d).map(|c| c.rank)),
        })
        .collect();
    Ok(EvalReport {
        target,
        seed,
        domains,
        overall: Metrics::from_ranks(cases.iter().map(|c| c.rank)),
        short_cases: cases.iter().filter(|c| c.deficit > 0).count(),
    })
}

/// Rank and aggregate in one call.
pub fn evaluate(
    model: &Model,
    vocab: &HierVocab,
    splits: &[LeaveOneOutSplit],
    target: Target,
    setup: &EvalSetup,
) -> Result<EvalReport, EvalError> {
    let cases = rank_cases(model, vocab, splits, target, setup)?;
    aggregate(&cases, vocab.domain_names(), target, setup.seed)
}
