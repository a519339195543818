#![allow(dead_code)]

use coalrec::data::{
    build_vocab, CategoryNode, DomainSpec, HierVocab, HierarchyManifest, Interaction, PaddedSequence,
};
use coalrec::model::{Model, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `domains` two-level domains with `groups` coarse categories of `per` items.
pub fn grouped_vocab(domains: usize, groups: usize, per: usize) -> (HierarchyManifest, HierVocab) {
    let manifest = HierarchyManifest {
        depth: 2,
        domains: (0..domains)
            .map(|d| DomainSpec {
                name: format!("dom{d}"),
                depth: 2,
                tree: (0..groups)
                    .map(|g| {
                        CategoryNode::branch(
                            format!("g{g}"),
                            (0..per).map(|i| CategoryNode::leaf(format!("x{d}_{g}_{i}"))).collect(),
                        )
                    })
                    .collect(),
            })
            .collect(),
    };
    let vocab = build_vocab(&[], &manifest).unwrap();
    (manifest, vocab)
}

pub fn random_interaction(vocab: &HierVocab, rng: &mut ChaCha8Rng, domains: &[usize]) -> Interaction {
    let d = domains[rng.random_range(0..domains.len())];
    let r = vocab.range(d, vocab.depth() - 1);
    let item = rng.random_range(r.ids());
    Interaction {
        domain: d,
        categories: vocab.item_tuple(item).to_vec(),
        timestamp: 0,
    }
}

/// Random window: `len` real interactions, left padded to `m`.
pub fn random_window(vocab: &HierVocab, m: usize, len: usize, rng: &mut ChaCha8Rng) -> PaddedSequence {
    let domains: Vec<usize> = (0..vocab.domain_count()).collect();
    let items: Vec<Interaction> = (0..len).map(|_| random_interaction(vocab, rng, &domains)).collect();
    coalrec::data::pad_truncate(&items, m)
}

pub fn random_batch(vocab: &HierVocab, m: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<PaddedSequence> {
    (0..size)
        .map(|_| {
            let len = rng.random_range(2..=m + 2);
            random_window(vocab, m, len, rng)
        })
        .collect()
}

pub fn model_for(vocab: &HierVocab, m: usize, dim: usize, layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        max_len: m,
        dim,
        layers,
        heads,
        dropout: 0.0,
        table_rows: (0..vocab.depth()).map(|l| vocab.table_rows(l)).collect(),
    }
}

/// Model with O(std) random weights everywhere (PAD rows stay zero).
pub fn random_model(cfg: ModelConfig, seed: u64, std: f64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(&cfg);
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = std * (rng.random::<f64>() * 2.0 - 1.0) * 1.7;
        }
    }
    for b in &mut params.blocks {
        b.ln1_g.mapv_inplace(|g| 1.0 + 0.3 * g);
        b.ln2_g.mapv_inplace(|g| 1.0 + 0.3 * g);
    }
    params.final_g.mapv_inplace(|g| 1.0 + 0.3 * g);
    params.pin_pad_rows();
    Model { config: cfg, params }
}

// ---------------------------------------------------------------------------
// Plain-loop reference forward pass, written independently of the ndarray
// implementation.

pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &[Vec<f64>]) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn to_mat(a: &ndarray::Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

pub fn ref_gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn ref_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = (var + 1e-8).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| g * (v - mean) / sd + b)
        .collect()
}

/// Reference `Z^L` for a single window.
pub fn reference_encode(model: &Model, seq: &PaddedSequence, item_only: bool) -> Mat {
    let p = &model.params;
    let cfg = &model.config;
    let (m, r) = (cfg.max_len, cfg.dim);
    let depth = cfg.depth();
    let valid: Vec<bool> = seq.tokens.iter().map(Option::is_some).collect();
    let mut x: Mat = (0..m)
        .map(|t| match &seq.tokens[t] {
            None => vec![0.0; r],
            Some(tok) => (0..r)
                .map(|c| {
                    let mut v = p.position[[t, c]];
                    for level in 0..depth {
                        if item_only && level + 1 != depth {
                            continue;
                        }
                        v += p.embeddings[level][[tok.categories[level] as usize, c]];
                    }
                    v
                })
                .collect(),
        })
        .collect();
    let dk = r / cfg.heads;
    for blk in &p.blocks {
        let a: Mat = x
            .iter()
            .map(|row| ref_layer_norm(row, blk.ln1_g.as_slice().unwrap(), blk.ln1_b.as_slice().unwrap()))
            .collect();
        let q = matmul(&a, &to_mat(&blk.wq));
        let k = matmul(&a, &to_mat(&blk.wk));
        let v = matmul(&a, &to_mat(&blk.wv));
        let mut concat = vec![vec![0.0; r]; m];
        for h in 0..cfg.heads {
            for i in 0..m {
                let allowed: Vec<usize> = (0..=i).filter(|&j| valid[j]).collect();
                if allowed.is_empty() {
                    continue;
                }
                let logits: Vec<f64> = allowed
                    .iter()
                    .map(|&j| (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = w.iter().sum();
                for c in 0..dk {
                    concat[i][h * dk + c] = allowed.iter().zip(&w).map(|(&j, wj)| wj / z * v[j][h * dk + c]).sum();
                }
            }
        }
        let att = matmul(&concat, &to_mat(&blk.wf));
        for i in 0..m {
            for c in 0..r {
                x[i][c] += att[i][c];
            }
        }
        let cn: Mat = x
            .iter()
            .map(|row| ref_layer_norm(row, blk.ln2_g.as_slice().unwrap(), blk.ln2_b.as_slice().unwrap()))
            .collect();
        let mut h1 = matmul(&cn, &to_mat(&blk.w1));
        for row in &mut h1 {
            for (c, v) in row.iter_mut().enumerate() {
                *v = ref_gelu(*v + blk.b1[c]);
            }
        }
        let f = matmul(&h1, &to_mat(&blk.w2));
        for i in 0..m {
            for c in 0..r {
                x[i][c] += f[i][c] + blk.b2[c];
            }
        }
    }
    if !p.blocks.is_empty() {
        x = x
            .iter()
            .map(|row| ref_layer_norm(row, p.final_g.as_slice().unwrap(), p.final_b.as_slice().unwrap()))
            .collect();
    }
    for (row, ok) in x.iter_mut().zip(&valid) {
        if !ok {
            row.fill(0.0);
        }
    }
    x
}

pub fn max_abs_diff(a: &Mat, b: &ndarray::Array2<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v - b[[i, j]]).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Reference heads and loss.

pub fn ref_head(model: &Model, z: &[f64], level: usize) -> Vec<f64> {
    let h = &model.params.heads[level];
    let r = z.len();
    let pre: Vec<f64> = (0..r)
        .map(|j| ref_gelu((0..r).map(|i| z[i] * h.w3[[i, j]]).sum::<f64>() + h.b3[j]))
        .collect();
    (0..r).map(|j| (0..r).map(|i| pre[i] * h.w4[[i, j]]).sum::<f64>() + h.b4[j]).collect()
}

pub fn ref_context(model: &Model, z: &[f64], level: usize) -> Vec<f64> {
    let mut c = ref_head(model, z, level);
    if level > 0 {
        for (a, b) in c.iter_mut().zip(ref_head(model, z, level - 1)) {
            *a += b;
        }
    }
    c
}

pub fn ref_score(model: &Model, ctx: &[f64], level: usize, id: u32) -> f64 {
    ctx.iter().enumerate().map(|(c, v)| v * model.params.embeddings[level][[id as usize, c]]).sum()
}

/// `Σ w_i · -ln σ(pos_i - neg_i) / B` computed term by term.
pub fn ref_objective(
    model: &Model,
    batch: &[PaddedSequence],
    item_only: bool,
    terms: &[coalrec::model::LossTerm],
    weights: &[f64],
) -> f64 {
    let encoded: Vec<Mat> = batch.iter().map(|s| reference_encode(model, s, item_only)).collect();
    let mut total = 0.0;
    for (t, w) in terms.iter().zip(weights) {
        let z = &encoded[t.seq][t.pos];
        let ctx = ref_context(model, z, t.level);
        let margin = ref_score(model, &ctx, t.level, t.positive) - ref_score(model, &ctx, t.level, t.negative);
        total += w * (1.0 + (-margin).exp()).ln();
    }
    total / batch.len() as f64
}

#[derive(Debug)]
pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compare analytic gradients with central differences (h = 1e-5) for every
/// scalar parameter. Relative error is `|a-n| / max(|a|, |n|, 1e-6)`.
pub fn finite_difference_check(
    model: &Model,
    input: &coalrec::model::EncoderInput,
    terms: &[coalrec::model::LossTerm],
    weights: &[f64],
) -> GradCheck {
    let analytic = model.objective(input, terms, weights, None).unwrap().grads;
    let names: Vec<String> = analytic.tensors().iter().map(|(n, _)| n.clone()).collect();
    let flat: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, s)| s.to_vec()).collect();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut out = GradCheck { max_rel: 0.0, worst: String::new(), checked: 0 };
    for (ti, grad) in flat.iter().enumerate() {
        for (k, &a) in grad.iter().enumerate() {
            let base = probe.params.tensors_mut()[ti][k];
            probe.params.tensors_mut()[ti][k] = base + h;
            let up = probe.objective(input, terms, weights, None).unwrap().loss;
            probe.params.tensors_mut()[ti][k] = base - h;
            let down = probe.objective(input, terms, weights, None).unwrap().loss;
            probe.params.tensors_mut()[ti][k] = base;
            let n = (up - down) / (2.0 * h);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            out.checked += 1;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{}[{k}] analytic {a:e} numeric {n:e}", names[ti]);
            }
        }
    }
    out
}
