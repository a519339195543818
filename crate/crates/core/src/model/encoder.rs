//! Batched causal self-attention encoder.
//!
//! A batch of `B` windows of length `m` is flattened into `B*m` rows. Each
//! block is pre-norm: `x + Drop(MHA(LN(x)))` then `x + Drop(FFN(LN(x)))`,
//! followed by a final layer norm. PAD slots embed to zero, are never
//! attended to, and their output rows are zeroed.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{
    affine, gelu, gelu_grad, layer_norm, layer_norm_backward, masked_attention,
    masked_attention_backward, LayerNormCache,
};
use super::{Block, Model, ModelConfig, ModelError, ModelParams};
use crate::data::PaddedSequence;

/// Flattened ids of a batch. `ids[level][row]` is 0 for PAD and for levels
/// not fed to the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub batch: usize,
    pub max_len: usize,
    pub ids: Vec<Vec<u32>>,
    pub valid: Vec<bool>,
}

impl EncoderInput {
    /// With `item_only`, only the last (item) level is embedded.
    pub fn from_batch(batch: &[PaddedSequence], depth: usize, item_only: bool) -> Self {
        let m = batch.first().map_or(0, PaddedSequence::len);
        let n = batch.len() * m;
        let mut ids = vec![vec![0u32; n]; depth];
        let mut valid = vec![false; n];
        for (b, seq) in batch.iter().enumerate() {
            assert_eq!(seq.len(), m, "all windows in a batch share one length");
            for (t, tok) in seq.tokens.iter().enumerate() {
                let Some(tok) = tok else { continue };
                let row = b * m + t;
                valid[row] = true;
                for (level, level_ids) in ids.iter_mut().enumerate() {
                    if !item_only || level + 1 == depth {
                        level_ids[row] = tok.categories[level];
                    }
                }
            }
        }
        Self {
            batch: batch.len(),
            max_len: m,
            ids,
            valid,
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.max_len
    }

    fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        if self.max_len != cfg.max_len || self.ids.len() != cfg.depth() {
            return Err(ModelError::Config(format!(
                "input shape (m={}, H={}) does not match model (m={}, H={})",
                self.max_len,
                self.ids.len(),
                cfg.max_len,
                cfg.depth()
            )));
        }
        for (level, ids) in self.ids.iter().enumerate() {
            let rows = cfg.table_rows[level];
            if let Some(&id) = ids.iter().find(|&&id| id as usize >= rows) {
                return Err(ModelError::IdOutOfRange { level, id, rows });
            }
        }
        Ok(())
    }
}

struct BlockCache {
    a: Array2<f64>,
    ln1: LayerNormCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    att_mask: Option<Array2<f64>>,
    ln2: LayerNormCache,
    c: Array2<f64>,
    h1: Array2<f64>,
    g: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
}

/// Encoder output `Z^L` plus what the backward pass needs.
pub struct Forward {
    pub output: Array2<f64>,
    emb_mask: Option<Array2<f64>>,
    blocks: Vec<BlockCache>,
    final_ln: Option<LayerNormCache>,
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - p;
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

fn zero_invalid_rows(x: &mut Array2<f64>, valid: &[bool]) {
    for (mut row, &ok) in x.rows_mut().into_iter().zip(valid) {
        if !ok {
            row.fill(0.0);
        }
    }
}

/// `E`: summed level embeddings plus position embedding, zero at PAD slots.
pub fn embed(params: &ModelParams, input: &EncoderInput) -> Array2<f64> {
    let r = params.position.ncols();
    let m = input.max_len;
    let mut x = Array2::zeros((input.rows(), r));
    for (row, mut out) in x.rows_mut().into_iter().enumerate() {
        if !input.valid[row] {
            continue;
        }
        out += &params.position.row(row % m);
        for (level, ids) in input.ids.iter().enumerate() {
            let id = ids[row] as usize;
            if id != 0 {
                out += &params.embeddings[level].row(id);
            }
        }
    }
    x
}

/// Multi-head attention over flattened rows; returns concatenated heads
/// (before `W^F`) and the per-(sequence, head) probabilities.
fn multi_head(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    valid: &[bool],
    batch: usize,
    m: usize,
    heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let dk = q.ncols() / heads;
    let mut o = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let rows = b * m..(b + 1) * m;
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let sl = s![rows.clone(), cols.clone()];
            let (out, p) = masked_attention(
                &q.slice(sl),
                &k.slice(sl),
                &v.slice(sl),
                &valid[rows.clone()],
            );
            o.slice_mut(sl).assign(&out);
            probs.push(p);
        }
    }
    (o, probs)
}

impl Model {
    /// Run the encoder. Dropout is active iff `dropout_rng` is given.
    pub fn forward(
        &self,
        input: &EncoderInput,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward, ModelError> {
        input.check(&self.config)?;
        let cfg = &self.config;
        let p = &self.params;
        let (n, r) = (input.rows(), cfg.dim);
        let mask = |rng: &mut Option<&mut ChaCha8Rng>| -> Option<Array2<f64>> {
            match rng {
                Some(rng) if cfg.dropout > 0.0 => Some(dropout_mask(n, r, cfg.dropout, rng)),
                _ => None,
            }
        };

        let mut x = embed(p, input);
        let emb_mask = mask(&mut dropout_rng);
        if let Some(mk) = &emb_mask {
            x *= mk;
        }

        let mut blocks = Vec::with_capacity(cfg.layers);
        for blk in &p.blocks {
            let (a, ln1) = layer_norm(&x, &blk.ln1_g, &blk.ln1_b);
            let q = a.dot(&blk.wq);
            let k = a.dot(&blk.wk);
            let v = a.dot(&blk.wv);
            let (o, probs) = multi_head(&q, &k, &v, &input.valid, input.batch, cfg.max_len, cfg.heads);
            let mut att = o.dot(&blk.wf);
            let att_mask = mask(&mut dropout_rng);
            if let Some(mk) = &att_mask {
                att *= mk;
            }
            x += &att;

            let (c, ln2) = layer_norm(&x, &blk.ln2_g, &blk.ln2_b);
            let h1 = affine(&c.view(), &blk.w1, &blk.b1);
            let g = h1.mapv(gelu);
            let mut f = affine(&g.view(), &blk.w2, &blk.b2);
            let ffn_mask = mask(&mut dropout_rng);
            if let Some(mk) = &ffn_mask {
                f *= mk;
            }
            x += &f;
            blocks.push(BlockCache {
                a,
                ln1,
                q,
                k,
                v,
                probs,
                o,
                att_mask,
                ln2,
                c,
                h1,
                g,
                ffn_mask,
            });
        }
        // with no blocks the encoder passes `E` through untouched
        let (mut output, final_ln) = if blocks.is_empty() {
            (x, None)
        } else {
            let (y, c) = layer_norm(&x, &p.final_g, &p.final_b);
            (y, Some(c))
        };
        zero_invalid_rows(&mut output, &input.valid);
        Ok(Forward {
            output,
            emb_mask,
            blocks,
            final_ln,
        })
    }

    /// Back-propagate `d_output` (gradient w.r.t. `Z^L`) into `grads`.
    pub fn backward(
        &self,
        input: &EncoderInput,
        fwd: &Forward,
        d_output: &Array2<f64>,
        grads: &mut ModelParams,
    ) {
        let cfg = &self.config;
        let p = &self.params;
        let m = cfg.max_len;
        let dk = cfg.head_dim();

        let mut dy = d_output.clone();
        zero_invalid_rows(&mut dy, &input.valid);
        let mut dx = match &fwd.final_ln {
            Some(c) => layer_norm_backward(&dy, c, &p.final_g, &mut grads.final_g, &mut grads.final_b),
            None => dy,
        };

        for (l, (blk, cache)) in p.blocks.iter().zip(&fwd.blocks).enumerate().rev() {
            let gb = &mut grads.blocks[l];
            // FFN sublayer
            let mut df = dx.clone();
            if let Some(mk) = &cache.ffn_mask {
                df *= mk;
            }
            gb.w2 += &cache.g.t().dot(&df);
            gb.b2 += &df.sum_axis(Axis(0));
            let mut dh = df.dot(&blk.w2.t());
            dh.zip_mut_with(&cache.h1, |d, &h| *d *= gelu_grad(h));
            gb.w1 += &cache.c.t().dot(&dh);
            gb.b1 += &dh.sum_axis(Axis(0));
            let dc = dh.dot(&blk.w1.t());
            dx += &layer_norm_backward(&dc, &cache.ln2, &blk.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);

            // attention sublayer
            let mut datt = dx.clone();
            if let Some(mk) = &cache.att_mask {
                datt *= mk;
            }
            gb.wf += &cache.o.t().dot(&datt);
            let d_o = datt.dot(&blk.wf.t());
            let mut dq = Array2::zeros(cache.q.raw_dim());
            let mut dkk = Array2::zeros(cache.k.raw_dim());
            let mut dv = Array2::zeros(cache.v.raw_dim());
            for b in 0..input.batch {
                let rows = b * m..(b + 1) * m;
                for h in 0..cfg.heads {
                    let sl = s![rows.clone(), h * dk..(h + 1) * dk];
                    let (gq, gk, gv) = masked_attention_backward(
                        &d_o.slice(sl),
                        &cache.q.slice(sl),
                        &cache.k.slice(sl),
                        &cache.v.slice(sl),
                        &cache.probs[b * cfg.heads + h],
                    );
                    dq.slice_mut(sl).assign(&gq);
                    dkk.slice_mut(sl).assign(&gk);
                    dv.slice_mut(sl).assign(&gv);
                }
            }
            gb.wq += &cache.a.t().dot(&dq);
            gb.wk += &cache.a.t().dot(&dkk);
            gb.wv += &cache.a.t().dot(&dv);
            let da = dq.dot(&blk.wq.t()) + dkk.dot(&blk.wk.t()) + dv.dot(&blk.wv.t());
            dx += &layer_norm_backward(&da, &cache.ln1, &blk.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);
        }

        if let Some(mk) = &fwd.emb_mask {
            dx *= mk;
        }
        for (row, d) in dx.rows().into_iter().enumerate() {
            if !input.valid[row] {
                continue;
            }
            let mut pos = grads.position.row_mut(row % m);
            pos += &d;
            for (level, ids) in input.ids.iter().enumerate() {
                let id = ids[row] as usize;
                if id != 0 {
                    let mut e = grads.embeddings[level].row_mut(id);
                    e += &d;
                }
            }
        }
    }
}

// Single-sequence entry points, inference mode.

fn single_input(model: &Model, seq: &PaddedSequence, item_only: bool) -> EncoderInput {
    EncoderInput::from_batch(std::slice::from_ref(seq), model.config.depth(), item_only)
}

/// `E` for one window (`m × r`).
pub fn embed_sequence(model: &Model, seq: &PaddedSequence) -> Result<Array2<f64>, ModelError> {
    let input = single_input(model, seq, false);
    input.check(&model.config)?;
    Ok(embed(&model.params, &input))
}

/// `softmax(QKᵀ/√d_k)V` under the causal mask, for one head.
pub fn attention(q: &ArrayView2<f64>, k: &ArrayView2<f64>, v: &ArrayView2<f64>) -> Array2<f64> {
    let valid = vec![true; q.nrows()];
    masked_attention(q, k, v, &valid).0
}

/// Attention sublayer of one block with its residual: `z + MHA(LN(z))`.
pub fn mha_sublayer(z: &Array2<f64>, block: &Block, heads: usize, valid: &[bool]) -> Array2<f64> {
    let (a, _) = layer_norm(z, &block.ln1_g, &block.ln1_b);
    let q = a.dot(&block.wq);
    let k = a.dot(&block.wk);
    let v = a.dot(&block.wv);
    let (o, _) = multi_head(&q, &k, &v, valid, 1, z.nrows(), heads);
    z + &o.dot(&block.wf)
}

/// Position-wise feed-forward: `GELU(z W1 + b1) W2 + b2`.
pub fn ffn(z: &Array1<f64>, w1: &Array2<f64>, b1: &Array1<f64>, w2: &Array2<f64>, b2: &Array1<f64>) -> Array1<f64> {
    let h = (z.dot(w1) + b1).mapv(gelu);
    h.dot(w2) + b2
}

/// `Z^L` for one window, inference mode.
pub fn encode(model: &Model, seq: &PaddedSequence, item_only: bool) -> Result<Array2<f64>, ModelError> {
    let input = single_input(model, seq, item_only);
    Ok(model.forward(&input, None)?.output)
}
