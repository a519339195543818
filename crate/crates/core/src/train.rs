//! Mini-batch training with the four ablation variants, Adam, and
//! validation-based checkpoint selection.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{pad_truncate, split_all, Dataset, HierVocab, LeaveOneOutSplit, PaddedSequence};
use crate::eval::{evaluate, EvalError, EvalReport, EvalSetup, Target};
use crate::game::{char_table, shapley_exact, update_gamma, GameError, GameSetup, GammaState, GammaTrajectory};
use crate::model::encoder::EncoderInput;
use crate::model::heads::{collect_terms, sample_negatives, LossTerm};
use crate::model::{Model, ModelConfig, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has no user with at least three interactions")]
    EmptyDataset,
    #[error("loss term tagged with domain {domain}, but only {domains} domains exist")]
    DomainTag { domain: usize, domains: usize },
    #[error("non-finite loss at step {step}: gamma {gamma:?}, per-domain loss {per_domain:?}")]
    NonFinite {
        step: usize,
        gamma: Vec<f64>,
        per_domain: Vec<f64>,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Item level only, unweighted.
    Bsa,
    /// All levels, uniform weights.
    Hcl,
    /// Item level only, Shapley-weighted.
    Lrl,
    /// All levels, Shapley-weighted.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Bsa, Variant::Hcl, Variant::Lrl, Variant::Full];

    pub fn item_only(self) -> bool {
        matches!(self, Variant::Bsa | Variant::Lrl)
    }

    pub fn uses_gamma(self) -> bool {
        matches!(self, Variant::Lrl | Variant::Full)
    }

    /// Loss levels for a hierarchy of `depth` levels.
    pub fn levels(self, depth: usize) -> Vec<usize> {
        if self.item_only() {
            vec![depth - 1]
        } else {
            (0..depth).collect()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Bsa => "bsa",
            Variant::Hcl => "hcl",
            Variant::Lrl => "lrl",
            Variant::Full => "full",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bsa" => Ok(Variant::Bsa),
            "hcl" => Ok(Variant::Hcl),
            "lrl" => Ok(Variant::Lrl),
            "full" => Ok(Variant::Full),
            other => Err(format!("unknown variant `{other}` (expected bsa, hcl, lrl or full)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub variant: Variant,
    pub alpha: f64,
    pub beta: f64,
    /// Softmax temperature for `γ`.
    pub lambda: f64,
    /// Divide coalition values by their term count.
    pub normalize_value: bool,
    pub eval_negatives: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_len: 20,
            dim: 32,
            layers: 2,
            heads: 2,
            dropout: 0.2,
            batch_size: 128,
            epochs: 10,
            lr: 1e-3,
            variant: Variant::Full,
            alpha: 0.7,
            beta: 0.3,
            lambda: 1.0,
            normalize_value: true,
            eval_negatives: 99,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, vocab: &HierVocab) -> ModelConfig {
        ModelConfig {
            max_len: self.max_len,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            table_rows: (0..vocab.depth()).map(|l| vocab.table_rows(l)).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return bad("alpha and beta must be finite");
        }
        Ok(())
    }

    /// SHA-256 of the JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    fn game_setup(&self, depth: usize) -> GameSetup {
        GameSetup {
            levels: self.variant.levels(depth),
            item_only: self.variant.item_only(),
            normalize: self.normalize_value,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// RNG streams derived from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub root: u64,
    pub init: u64,
    pub shuffle: u64,
    pub negatives: u64,
    pub dropout: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn from_root(root: u64) -> Self {
        let derive = |k: u64| root.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k.wrapping_mul(0xBF58_476D_1CE4_E5B9)) ^ k;
        Self {
            root,
            init: derive(1),
            shuffle: derive(2),
            negatives: derive(3),
            dropout: derive(4),
            eval: derive(5),
        }
    }
}

/// `Σ_i γ_{d_i} ℓ_i`.
pub fn rebalanced_loss(term_losses: &[f64], domains: &[usize], gamma: &[f64]) -> Result<f64, TrainError> {
    term_weights(domains, gamma).map(|w| w.iter().zip(term_losses).map(|(w, l)| w * l).sum())
}

/// `Σ_i ℓ_i`.
pub fn hcross_loss(term_losses: &[f64]) -> f64 {
    term_losses.iter().sum()
}

/// `γ` of each term's domain.
pub fn term_weights(domains: &[usize], gamma: &[f64]) -> Result<Vec<f64>, TrainError> {
    domains
        .iter()
        .map(|&d| {
            gamma.get(d).copied().ok_or(TrainError::DomainTag {
                domain: d,
                domains: gamma.len(),
            })
        })
        .collect()
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(cfg: &ModelConfig, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let g = grads.tensors();
        for (((p, (_, g)), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(g)
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        params.pin_pad_rows();
    }
}

/// Diagnostics of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub terms: usize,
    /// Mean unweighted term loss per domain (NaN where a domain had none).
    pub per_domain: Vec<f64>,
    /// Shapley values, when the variant refreshes `γ`.
    pub phi: Option<Vec<f64>>,
    /// Weights applied to this step's terms.
    pub gamma: Vec<f64>,
}

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub gamma: GammaState,
    pub step: usize,
    domains: usize,
    negative_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: &HierVocab) -> Result<Self, TrainError> {
        config.validate()?;
        let seeds = Seeds::from_root(config.seed);
        let model = Model::new(config.model_config(vocab), seeds.init)?;
        let domains = vocab.domain_count();
        Ok(Self {
            adam: Adam::new(&model.config, config.lr),
            gamma: GammaState::uniform(domains, config.alpha, config.beta, config.lambda),
            model,
            step: 0,
            domains,
            negative_rng: ChaCha8Rng::seed_from_u64(seeds.negatives),
            dropout_rng: ChaCha8Rng::seed_from_u64(seeds.dropout),
            config,
        })
    }

    /// Weights in force for the next step (before any refresh).
    pub fn current_gamma(&self) -> Vec<f64> {
        match self.config.variant {
            Variant::Bsa => vec![1.0; self.domains],
            Variant::Hcl => vec![1.0 / self.domains as f64; self.domains],
            Variant::Lrl | Variant::Full => self.gamma.normalized(),
        }
    }

    /// Negatives, optional `γ` refresh, weighted loss, one Adam step.
    pub fn train_step(&mut self, batch: &[PaddedSequence], vocab: &HierVocab) -> Result<StepLog, TrainError> {
        let variant = self.config.variant;
        let depth = vocab.depth();
        let levels = variant.levels(depth);
        let negatives = sample_negatives(batch, vocab, &levels, &mut self.negative_rng);

        let mut phi = None;
        if variant.uses_gamma() {
            let setup = self.config.game_setup(depth);
            let table = char_table(&self.model, batch, &negatives, self.domains, &setup)?;
            let p = shapley_exact(&table)?;
            update_gamma(&mut self.gamma, &p)?;
            phi = Some(p);
        }
        let gamma = self.current_gamma();

        let terms: Vec<LossTerm> = collect_terms(batch, &negatives, &levels);
        let domains: Vec<usize> = terms.iter().map(|t| t.domain).collect();
        let weights = term_weights(&domains, &gamma)?;
        let input = EncoderInput::from_batch(batch, depth, variant.item_only());
        let objective = self
            .model
            .objective(&input, &terms, &weights, Some(&mut self.dropout_rng))?;

        let mut sums = vec![0.0; self.domains];
        let mut counts = vec![0usize; self.domains];
        for (l, &d) in objective.term_losses.iter().zip(&domains) {
            sums[d] += l;
            counts[d] += 1;
        }
        let per_domain: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect();

        self.step += 1;
        if !objective.loss.is_finite() || !objective.grads.all_finite() {
            return Err(TrainError::NonFinite {
                step: self.step,
                gamma,
                per_domain,
            });
        }
        self.adam.step(&mut self.model.params, &objective.grads);
        Ok(StepLog {
            step: self.step,
            loss: objective.loss,
            terms: terms.len(),
            per_domain,
            phi,
            gamma,
        })
    }
}

/// Most recent `max_len` training interactions of each user.
pub fn training_windows(splits: &[LeaveOneOutSplit], max_len: usize) -> Vec<PaddedSequence> {
    splits
        .iter()
        .map(|s| pad_truncate(&s.train, max_len))
        .filter(|w| w.target_count() > 0)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub valid_ndcg5: f64,
    pub seconds: f64,
}

/// Everything produced by [`fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters from the epoch with the best validation NDCG@5.
    pub best: Checkpoint,
    pub best_valid: EvalReport,
    pub epochs: Vec<EpochLog>,
    /// Initial `γ` then one row per refresh (empty for bsa/hcl).
    pub trajectory: GammaTrajectory,
    pub refreshes: usize,
    /// Normalized `γ` after the last step.
    pub final_gamma: Vec<f64>,
    pub seeds: Seeds,
    pub splits: Vec<LeaveOneOutSplit>,
    pub excluded_users: usize,
}

pub fn eval_setup(config: &TrainConfig) -> EvalSetup {
    EvalSetup {
        negatives: config.eval_negatives,
        item_only: config.variant.item_only(),
        seed: Seeds::from_root(config.seed).eval,
        chunk: 256,
    }
}

/// Train for `config.epochs`, keeping the best validation checkpoint.
pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<FitResult, TrainError> {
    fit_with(dataset, config, |_| {})
}

/// [`fit`] with a callback after each epoch.
pub fn fit_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitResult, TrainError> {
    let (splits, excluded_users) = split_all(&dataset.sequences);
    let windows = training_windows(&splits, config.max_len);
    if splits.is_empty() || windows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let vocab = &dataset.vocab;
    let seeds = Seeds::from_root(config.seed);
    let mut trainer = Trainer::new(config.clone(), vocab)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds.shuffle);
    let setup = eval_setup(config);

    let mut trajectory = GammaTrajectory::default();
    if config.variant.uses_gamma() {
        trajectory.push(0, trainer.gamma.normalized());
    }
    let mut refreshes = 0;
    let mut epochs = Vec::new();
    let mut best: Option<(Checkpoint, EvalReport)> = None;
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 1..=config.epochs.max(1) {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<PaddedSequence> = idx.iter().map(|&i| windows[i].clone()).collect();
            let log = trainer.train_step(&batch, vocab)?;
            if log.phi.is_some() {
                refreshes += 1;
                trajectory.push(log.step, log.gamma.clone());
            }
            loss_sum += log.loss;
            steps += 1;
        }
        let report = evaluate(&trainer.model, vocab, &splits, Target::Valid, &setup)?;
        let log = EpochLog {
            epoch,
            steps,
            train_loss: loss_sum / steps as f64,
            valid_ndcg5: report.overall.ndcg5,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        if best.as_ref().is_none_or(|(_, b)| report.overall.ndcg5 > b.overall.ndcg5) {
            let ckpt = Checkpoint::capture(&trainer, vocab, epoch, report.overall.ndcg5);
            best = Some((ckpt, report));
        }
        epochs.push(log);
    }
    let (best, best_valid) = best.expect("at least one epoch");
    Ok(FitResult {
        best,
        best_valid,
        epochs,
        trajectory,
        refreshes,
        final_gamma: trainer.current_gamma(),
        seeds,
        splits,
        excluded_users,
    })
}

/// Serialized model plus what is needed to check it against a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    pub vocab_fingerprint: String,
    pub epoch: usize,
    pub valid_ndcg5: f64,
    pub gamma: GammaState,
    pub model: Model,
}

impl Checkpoint {
    pub const FORMAT: u32 = 1;

    pub fn capture(trainer: &Trainer, vocab: &HierVocab, epoch: usize, valid_ndcg5: f64) -> Self {
        Self {
            format: Self::FORMAT,
            config_hash: trainer.config.hash(),
            config: trainer.config.clone(),
            vocab_fingerprint: vocab.fingerprint(),
            epoch,
            valid_ndcg5,
            gamma: trainer.gamma.clone(),
            model: trainer.model.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, serde_json::to_vec(self).map_err(|e| TrainError::Checkpoint(e.to_string()))?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path)?;
        let ck: Checkpoint =
            serde_json::from_slice(&bytes).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != Self::FORMAT {
            return Err(TrainError::Checkpoint(format!("unsupported format {}", ck.format)));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(TrainError::Checkpoint("config hash mismatch".into()));
        }
        Ok(ck)
    }

    /// Refuse to pair the checkpoint with a different vocabulary.
    pub fn check_vocab(&self, vocab: &HierVocab) -> Result<(), TrainError> {
        if vocab.fingerprint() != self.vocab_fingerprint {
            return Err(TrainError::Checkpoint(
                "vocabulary fingerprint differs from the dataset".into(),
            ));
        }
        Ok(())
    }
}
