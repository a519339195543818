//! Coarse-to-fine prediction heads and the pairwise rank loss.
//!
//! Level `h` reads `U^h = FFN^h(Z_t)`; its scoring context is `U^1` at the
//! coarsest level and `U^h + U^{h-1}` above it. A candidate's score is the
//! dot product of its level embedding with that context. Each loss term is
//! `-ln σ(score(pos) - score(neg))`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{affine, gelu, gelu_grad, log_sigmoid, sigmoid};
use super::{EncoderInput, Head, Model, ModelError, ModelParams};
use crate::data::{HierVocab, IdRange, PaddedSequence};

/// One sampled negative per (sequence, position, level); 0 means none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSet {
    max_len: usize,
    depth: usize,
    ids: Vec<u32>,
    /// Terms dropped because the target's range had a single id.
    pub skipped: usize,
}

impl NegativeSet {
    pub fn get(&self, seq: usize, pos: usize, level: usize) -> Option<u32> {
        match self.ids[(seq * self.max_len + pos) * self.depth + level] {
            0 => None,
            id => Some(id),
        }
    }
}

/// Uniform draw from `range` minus `positive`; `None` if nothing remains.
pub fn draw_negative(range: IdRange, positive: u32, rng: &mut ChaCha8Rng) -> Option<u32> {
    if range.len < 2 {
        return None;
    }
    let k = range.start + rng.random_range(0..range.len - 1);
    Some(if k >= positive { k + 1 } else { k })
}

/// Sample a negative for every target position and each of `levels`, from
/// the target's own domain at the same level.
pub fn sample_negatives(
    batch: &[PaddedSequence],
    vocab: &HierVocab,
    levels: &[usize],
    rng: &mut ChaCha8Rng,
) -> NegativeSet {
    let m = batch.first().map_or(0, PaddedSequence::len);
    let depth = vocab.depth();
    let mut ids = vec![0u32; batch.len() * m * depth];
    let mut skipped = 0;
    for (b, seq) in batch.iter().enumerate() {
        for t in 0..m {
            if !seq.target_mask[t] {
                continue;
            }
            let target = seq.tokens[t + 1].as_ref().expect("mask implies a target");
            for &level in levels {
                let positive = target.categories[level];
                match draw_negative(vocab.range(target.domain, level), positive, rng) {
                    Some(neg) => ids[(b * m + t) * depth + level] = neg,
                    None => skipped += 1,
                }
            }
        }
    }
    NegativeSet {
        max_len: m,
        depth,
        ids,
        skipped,
    }
}

/// One pairwise comparison, tagged with its target's domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossTerm {
    pub seq: usize,
    pub pos: usize,
    pub level: usize,
    pub domain: usize,
    pub positive: u32,
    pub negative: u32,
}

/// Terms for every masked position of `batch` at each of `levels`, using
/// the pre-drawn negatives.
pub fn collect_terms(batch: &[PaddedSequence], negatives: &NegativeSet, levels: &[usize]) -> Vec<LossTerm> {
    let mut terms = Vec::new();
    for (b, seq) in batch.iter().enumerate() {
        for (t, &has_target) in seq.target_mask.iter().enumerate() {
            if !has_target {
                continue;
            }
            let target = seq.tokens[t + 1].as_ref().expect("mask implies a target");
            for &level in levels {
                if let Some(negative) = negatives.get(b, t, level) {
                    terms.push(LossTerm {
                        seq: b,
                        pos: t,
                        level,
                        domain: target.domain,
                        positive: target.categories[level],
                        negative,
                    });
                }
            }
        }
    }
    terms
}

fn head_ffn(head: &Head, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let pre = affine(&x.view(), &head.w3, &head.b3);
    let u = affine(&pre.mapv(gelu).view(), &head.w4, &head.b4);
    (pre, u)
}

/// Scoring context for level `level` (0-based) from one encoder row.
pub fn level_context(params: &ModelParams, z: &ArrayView1<f64>, level: usize) -> Array1<f64> {
    let x = z.to_owned().insert_axis(Axis(0));
    let mut ctx = head_ffn(&params.heads[level], &x).1;
    if level > 0 {
        ctx += &head_ffn(&params.heads[level - 1], &x).1;
    }
    ctx.row(0).to_owned()
}

/// Preference score of `candidate` at `level` given a scoring context.
pub fn score(params: &ModelParams, context: &ArrayView1<f64>, candidate: u32, level: usize) -> Result<f64, ModelError> {
    let table = &params.embeddings[level];
    if candidate == 0 {
        return Err(ModelError::PadCandidate);
    }
    if candidate as usize >= table.nrows() {
        return Err(ModelError::IdOutOfRange {
            level,
            id: candidate,
            rows: table.nrows(),
        });
    }
    Ok(table.row(candidate as usize).dot(context))
}

/// Head activations for a set of encoder rows.
pub struct HeadForward {
    rows: Vec<usize>,
    term_row: Vec<usize>,
    gathered: Array2<f64>,
    pre: Vec<Option<Array2<f64>>>,
    contexts: Vec<Option<Array2<f64>>>,
    pub margins: Vec<f64>,
}

/// Compute `score(pos) - score(neg)` for every term from encoder output `z`.
pub fn head_forward(params: &ModelParams, z: &Array2<f64>, max_len: usize, terms: &[LossTerm]) -> HeadForward {
    let depth = params.heads.len();
    let r = z.ncols();
    let mut slot = vec![usize::MAX; z.nrows()];
    let mut rows = Vec::new();
    let mut term_row = Vec::with_capacity(terms.len());
    let mut used = vec![false; depth];
    for term in terms {
        let row = term.seq * max_len + term.pos;
        if slot[row] == usize::MAX {
            slot[row] = rows.len();
            rows.push(row);
        }
        term_row.push(slot[row]);
        used[term.level] = true;
    }
    let mut gathered = Array2::zeros((rows.len(), r));
    for (i, &row) in rows.iter().enumerate() {
        gathered.row_mut(i).assign(&z.row(row));
    }
    let mut needed = used.clone();
    for level in 1..depth {
        if used[level] {
            needed[level - 1] = true;
        }
    }
    let mut pre = vec![None; depth];
    let mut outs: Vec<Option<Array2<f64>>> = vec![None; depth];
    for level in 0..depth {
        if needed[level] {
            let (p, u) = head_ffn(&params.heads[level], &gathered);
            pre[level] = Some(p);
            outs[level] = Some(u);
        }
    }
    let contexts: Vec<Option<Array2<f64>>> = (0..depth)
        .map(|level| {
            if !used[level] {
                return None;
            }
            let mut c = outs[level].clone().unwrap();
            if level > 0 {
                c += outs[level - 1].as_ref().unwrap();
            }
            Some(c)
        })
        .collect();
    let margins = terms
        .iter()
        .zip(&term_row)
        .map(|(t, &i)| {
            let ctx = contexts[t.level].as_ref().unwrap().row(i);
            let e = &params.embeddings[t.level];
            e.row(t.positive as usize).dot(&ctx) - e.row(t.negative as usize).dot(&ctx)
        })
        .collect();
    HeadForward {
        rows,
        term_row,
        gathered,
        pre,
        contexts,
        margins,
    }
}

/// Back-propagate `d_margins` through the heads; accumulates parameter
/// gradients into `grads` and returns the gradient w.r.t. `z`.
pub fn head_backward(
    params: &ModelParams,
    hf: &HeadForward,
    terms: &[LossTerm],
    d_margins: &[f64],
    z_shape: (usize, usize),
    grads: &mut ModelParams,
) -> Array2<f64> {
    let depth = params.heads.len();
    let n = hf.rows.len();
    let r = z_shape.1;
    let mut d_ctx: Vec<Option<Array2<f64>>> = hf
        .contexts
        .iter()
        .map(|c| c.as_ref().map(|_| Array2::zeros((n, r))))
        .collect();
    for ((t, &i), &dm) in terms.iter().zip(&hf.term_row).zip(d_margins) {
        if dm == 0.0 {
            continue;
        }
        let e = &params.embeddings[t.level];
        let ctx = hf.contexts[t.level].as_ref().unwrap().row(i);
        let diff = &e.row(t.positive as usize) - &e.row(t.negative as usize);
        let mut dc = d_ctx[t.level].as_mut().unwrap().row_mut(i);
        dc.scaled_add(dm, &diff);
        let ge = &mut grads.embeddings[t.level];
        ge.row_mut(t.positive as usize).scaled_add(dm, &ctx);
        ge.row_mut(t.negative as usize).scaled_add(-dm, &ctx);
    }
    // dU^h collects its own context and, for h < H, the next level's.
    let mut d_u: Vec<Option<Array2<f64>>> = vec![None; depth];
    for level in 0..depth {
        if let Some(dc) = &d_ctx[level] {
            add_into(&mut d_u[level], dc);
            if level > 0 {
                add_into(&mut d_u[level - 1], dc);
            }
        }
    }
    let mut d_gathered = Array2::<f64>::zeros((n, r));
    for level in 0..depth {
        let (Some(du), Some(pre)) = (&d_u[level], &hf.pre[level]) else {
            continue;
        };
        let head = &params.heads[level];
        let gh = &mut grads.heads[level];
        let act = pre.mapv(gelu);
        gh.w4 += &act.t().dot(du);
        gh.b4 += &du.sum_axis(Axis(0));
        let mut dpre = du.dot(&head.w4.t());
        dpre.zip_mut_with(pre, |d, &p| *d *= gelu_grad(p));
        gh.w3 += &hf.gathered.t().dot(&dpre);
        gh.b3 += &dpre.sum_axis(Axis(0));
        d_gathered += &dpre.dot(&head.w3.t());
    }
    let mut dz = Array2::zeros(z_shape);
    for (i, &row) in hf.rows.iter().enumerate() {
        dz.row_mut(row).assign(&d_gathered.row(i));
    }
    dz
}

fn add_into(slot: &mut Option<Array2<f64>>, x: &Array2<f64>) {
    match slot {
        Some(s) => *s += x,
        None => *slot = Some(x.clone()),
    }
}

/// `-ln σ(margin)`.
pub fn term_loss(margin: f64) -> f64 {
    -log_sigmoid(margin)
}

/// Loss and gradient of a weighted pairwise objective.
pub struct Objective {
    /// `Σ_i w_i ℓ_i / batch`.
    pub loss: f64,
    /// Unweighted `ℓ_i` per term.
    pub term_losses: Vec<f64>,
    pub grads: ModelParams,
}

impl Model {
    /// Unweighted per-term losses in inference mode.
    pub fn term_losses(&self, input: &EncoderInput, terms: &[LossTerm]) -> Result<Vec<f64>, ModelError> {
        let fwd = self.forward(input, None)?;
        let hf = head_forward(&self.params, &fwd.output, input.max_len, terms);
        Ok(hf.margins.iter().map(|&m| term_loss(m)).collect())
    }

    /// `Σ_i w_i ℓ_i / batch` and its gradient. `weights[i]` scales term `i`
    /// and is treated as a constant.
    pub fn objective(
        &self,
        input: &EncoderInput,
        terms: &[LossTerm],
        weights: &[f64],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Objective, ModelError> {
        if terms.is_empty() {
            return Err(ModelError::NoTargets);
        }
        assert_eq!(terms.len(), weights.len());
        let fwd = self.forward(input, dropout_rng)?;
        let hf = head_forward(&self.params, &fwd.output, input.max_len, terms);
        let scale = 1.0 / input.batch as f64;
        let term_losses: Vec<f64> = hf.margins.iter().map(|&m| term_loss(m)).collect();
        let loss = term_losses.iter().zip(weights).map(|(l, w)| w * l).sum::<f64>() * scale;
        // d(-ln σ(m))/dm = -σ(-m)
        let d_margins: Vec<f64> = hf
            .margins
            .iter()
            .zip(weights)
            .map(|(&m, &w)| -w * sigmoid(-m) * scale)
            .collect();
        let mut grads = ModelParams::zeros(&self.config);
        let dz = head_backward(&self.params, &hf, terms, &d_margins, fwd.output.dim(), &mut grads);
        self.backward(input, &fwd, &dz, &mut grads);
        Ok(Objective {
            loss,
            term_losses,
            grads,
        })
    }
}
