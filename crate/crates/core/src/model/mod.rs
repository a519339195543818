//! Self-attention encoder and hierarchical prediction heads.

pub mod encoder;
pub mod heads;
pub mod ops;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use encoder::{EncoderInput, Forward};
pub use heads::{LossTerm, NegativeSet};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("embedding dim {dim} is not divisible by head count {heads}")]
    HeadSplit { dim: usize, heads: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("category id {id} out of range at level {level} (table has {rows} rows)")]
    IdOutOfRange { level: usize, id: u32, rows: usize },
    #[error("PAD is not a valid candidate")]
    PadCandidate,
    #[error("batch has no positions with a training target")]
    NoTargets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Window length `m`.
    pub max_len: usize,
    /// Embedding width `r`.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Embedding table rows per level, PAD row included.
    pub table_rows: Vec<usize>,
}

impl ModelConfig {
    pub fn depth(&self) -> usize {
        self.table_rows.len()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::HeadSplit {
                dim: self.dim,
                heads: self.heads,
            });
        }
        if self.max_len < 2 {
            return Err(ModelError::Config("window length must be >= 2".into()));
        }
        if self.table_rows.is_empty() || self.table_rows.iter().any(|&r| r < 2) {
            return Err(ModelError::Config("every level needs at least one real id".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    /// Query/key/value projections; head `i` owns columns `i*r/p..(i+1)*r/p`.
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wf: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Per-level prediction FFN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub w4: Array2<f64>,
    pub b4: Array1<f64>,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Per-level category tables, row 0 is PAD and stays zero.
    pub embeddings: Vec<Array2<f64>>,
    pub position: Array2<f64>,
    pub blocks: Vec<Block>,
    pub final_g: Array1<f64>,
    pub final_b: Array1<f64>,
    pub heads: Vec<Head>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            break x;
        }
    })
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let r = cfg.dim;
        let mat = || Array2::zeros((r, r));
        let vec = || Array1::zeros(r);
        Self {
            embeddings: cfg.table_rows.iter().map(|&n| Array2::zeros((n, r))).collect(),
            position: Array2::zeros((cfg.max_len, r)),
            blocks: (0..cfg.layers)
                .map(|_| Block {
                    ln1_g: vec(),
                    ln1_b: vec(),
                    wq: mat(),
                    wk: mat(),
                    wv: mat(),
                    wf: mat(),
                    ln2_g: vec(),
                    ln2_b: vec(),
                    w1: mat(),
                    b1: vec(),
                    w2: mat(),
                    b2: vec(),
                })
                .collect(),
            final_g: vec(),
            final_b: vec(),
            heads: (0..cfg.depth())
                .map(|_| Head {
                    w3: mat(),
                    b3: vec(),
                    w4: mat(),
                    b4: vec(),
                })
                .collect(),
        }
    }

    /// Truncated-normal (std 0.02) weights, unit layer-norm gains, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let r = cfg.dim;
        let mut p = Self::zeros(cfg);
        for e in &mut p.embeddings {
            *e = trunc_normal(&mut rng, e.nrows(), r, std);
        }
        p.position = trunc_normal(&mut rng, cfg.max_len, r, std);
        for b in &mut p.blocks {
            b.ln1_g.fill(1.0);
            b.ln2_g.fill(1.0);
            for w in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wf, &mut b.w1, &mut b.w2] {
                *w = trunc_normal(&mut rng, r, r, std);
            }
        }
        p.final_g.fill(1.0);
        for h in &mut p.heads {
            h.w3 = trunc_normal(&mut rng, r, r, std);
            h.w4 = trunc_normal(&mut rng, r, r, std);
        }
        p.pin_pad_rows();
        p
    }

    pub fn pin_pad_rows(&mut self) {
        for e in &mut self.embeddings {
            e.row_mut(0).fill(0.0);
        }
    }

    /// Named flat views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (h, e) in self.embeddings.iter().enumerate() {
            out.push((format!("emb{h}"), e.as_slice().expect("standard layout")));
        }
        out.push(("pos".into(), self.position.as_slice().unwrap()));
        for (l, b) in self.blocks.iter().enumerate() {
            let named: [(&str, &[f64]); 12] = [
                ("ln1_g", b.ln1_g.as_slice().unwrap()),
                ("ln1_b", b.ln1_b.as_slice().unwrap()),
                ("wq", b.wq.as_slice().unwrap()),
                ("wk", b.wk.as_slice().unwrap()),
                ("wv", b.wv.as_slice().unwrap()),
                ("wf", b.wf.as_slice().unwrap()),
                ("ln2_g", b.ln2_g.as_slice().unwrap()),
                ("ln2_b", b.ln2_b.as_slice().unwrap()),
                ("w1", b.w1.as_slice().unwrap()),
                ("b1", b.b1.as_slice().unwrap()),
                ("w2", b.w2.as_slice().unwrap()),
                ("b2", b.b2.as_slice().unwrap()),
            ];
            out.extend(named.into_iter().map(|(n, s)| (format!("block{l}.{n}"), s)));
        }
        out.push(("final_g".into(), self.final_g.as_slice().unwrap()));
        out.push(("final_b".into(), self.final_b.as_slice().unwrap()));
        for (h, hd) in self.heads.iter().enumerate() {
            let named: [(&str, &[f64]); 4] = [
                ("w3", hd.w3.as_slice().unwrap()),
                ("b3", hd.b3.as_slice().unwrap()),
                ("w4", hd.w4.as_slice().unwrap()),
                ("b4", hd.b4.as_slice().unwrap()),
            ];
            out.extend(named.into_iter().map(|(n, s)| (format!("head{h}.{n}"), s)));
        }
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for e in &mut self.embeddings {
            out.push(e.as_slice_mut().expect("standard layout"));
        }
        out.push(self.position.as_slice_mut().unwrap());
        for b in &mut self.blocks {
            let Block {
                ln1_g,
                ln1_b,
                wq,
                wk,
                wv,
                wf,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            } = b;
            out.push(ln1_g.as_slice_mut().unwrap());
            out.push(ln1_b.as_slice_mut().unwrap());
            for w in [wq, wk, wv, wf] {
                out.push(w.as_slice_mut().unwrap());
            }
            out.push(ln2_g.as_slice_mut().unwrap());
            out.push(ln2_b.as_slice_mut().unwrap());
            out.push(w1.as_slice_mut().unwrap());
            out.push(b1.as_slice_mut().unwrap());
            out.push(w2.as_slice_mut().unwrap());
            out.push(b2.as_slice_mut().unwrap());
        }
        out.push(self.final_g.as_slice_mut().unwrap());
        out.push(self.final_b.as_slice_mut().unwrap());
        for hd in &mut self.heads {
            let Head { w3, b3, w4, b4 } = hd;
            out.push(w3.as_slice_mut().unwrap());
            out.push(b3.as_slice_mut().unwrap());
            out.push(w4.as_slice_mut().unwrap());
            out.push(b4.as_slice_mut().unwrap());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            max_len: 5,
            dim: 8,
            layers: 2,
            heads: 2,
            dropout: 0.2,
            table_rows: vec![4, 9],
        }
    }

    #[test]
    fn init_pins_pad_rows_and_is_seeded() {
        let m = Model::new(cfg(), 3).unwrap();
        for e in &m.params.embeddings {
            assert!(e.row(0).iter().all(|&v| v == 0.0));
            assert!(e.iter().all(|v| v.abs() <= 0.04));
        }
        assert_eq!(m, Model::new(cfg(), 3).unwrap());
        assert_ne!(m, Model::new(cfg(), 4).unwrap());
    }

    #[test]
    fn tensor_views_line_up() {
        let mut p = ModelParams::init(&cfg(), 1);
        let lens: Vec<usize> = p.tensors().iter().map(|(_, s)| s.len()).collect();
        let lens_mut: Vec<usize> = p.tensors_mut().iter().map(|s| s.len()).collect();
        assert_eq!(lens, lens_mut);
        assert_eq!(lens.len(), 2 + 1 + 2 * 12 + 2 + 2 * 4);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = cfg();
        c.heads = 3;
        assert_eq!(
            Model::new(c, 0).unwrap_err(),
            ModelError::HeadSplit { dim: 8, heads: 3 }
        );
    }
}
