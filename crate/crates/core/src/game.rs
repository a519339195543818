//! Coalition game over domains: masking, characteristic values, exact
//! Shapley attribution and the softmax-tempered domain weights `γ`.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PaddedSequence;
use crate::model::encoder::EncoderInput;
use crate::model::heads::{collect_terms, NegativeSet};
use crate::model::{Model, ModelError};

/// Largest player count handled by exact enumeration.
pub const MAX_PLAYERS: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum GameError {
    #[error("exact Shapley supports at most {MAX_PLAYERS} domains, got {0}")]
    TooManyPlayers(usize),
    #[error("characteristic table has no entry for coalition {0}")]
    MissingEntry(Coalition),
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
    #[error("non-finite attribution for domain {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Set of domains (0-based) as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coalition(pub u32);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn full(domains: usize) -> Self {
        Coalition(((1u64 << domains) - 1) as u32)
    }

    pub fn from_members(members: &[usize]) -> Self {
        Coalition(members.iter().fold(0, |m, &d| m | (1 << d)))
    }

    pub fn contains(self, domain: usize) -> bool {
        domain < 32 && self.0 & (1 << domain) != 0
    }

    pub fn with(self, domain: usize) -> Self {
        Coalition(self.0 | (1 << domain))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&d| self.contains(d))
    }

    /// Every coalition over `domains` players, in mask order.
    pub fn all(domains: usize) -> impl Iterator<Item = Coalition> {
        (0..1u32 << domains).map(Coalition)
    }
}

impl fmt::Display for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.members().map(|d| (d + 1).to_string()).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// Replace slots of domains outside `pi` by PAD, keeping positions.
pub fn mask_coalition(seq: &PaddedSequence, pi: Coalition) -> PaddedSequence {
    let tokens = seq
        .tokens
        .iter()
        .map(|t| t.as_ref().filter(|it| pi.contains(it.domain)).cloned())
        .collect();
    PaddedSequence::from_tokens(tokens)
}

/// `v(S)` for every coalition plus the number of loss terms behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct CharTable {
    domains: usize,
    values: Vec<Option<f64>>,
    terms: Vec<usize>,
}

impl CharTable {
    pub fn new(domains: usize) -> Result<Self, GameError> {
        if domains > MAX_PLAYERS {
            return Err(GameError::TooManyPlayers(domains));
        }
        let n = 1usize << domains;
        let mut values = vec![None; n];
        values[0] = Some(0.0);
        Ok(Self {
            domains,
            values,
            terms: vec![0; n],
        })
    }

    /// Table from values listed in mask order; `values[0]` is ignored.
    pub fn from_values(domains: usize, values: &[f64]) -> Result<Self, GameError> {
        let mut t = Self::new(domains)?;
        if values.len() != 1 << domains {
            return Err(GameError::Length {
                expected: 1 << domains,
                got: values.len(),
            });
        }
        for (s, &v) in Coalition::all(domains).zip(values).skip(1) {
            t.set(s, v, 0);
        }
        Ok(t)
    }

    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn set(&mut self, s: Coalition, value: f64, terms: usize) {
        if s.is_empty() {
            return;
        }
        self.values[s.0 as usize] = Some(value);
        self.terms[s.0 as usize] = terms;
    }

    pub fn get(&self, s: Coalition) -> Option<f64> {
        self.values.get(s.0 as usize).copied().flatten()
    }

    pub fn terms(&self, s: Coalition) -> usize {
        self.terms[s.0 as usize]
    }

    /// Non-empty coalitions whose batch had no surviving target.
    pub fn empty_coalitions(&self) -> Vec<Coalition> {
        Coalition::all(self.domains)
            .skip(1)
            .filter(|s| self.terms[s.0 as usize] == 0 && self.values[s.0 as usize].is_some())
            .collect()
    }

    fn value(&self, s: Coalition) -> Result<f64, GameError> {
        self.get(s).ok_or(GameError::MissingEntry(s))
    }
}

/// How a coalition's loss terms are built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GameSetup {
    /// Levels contributing terms.
    pub levels: Vec<usize>,
    /// Embed only the item level.
    pub item_only: bool,
    /// Divide `v` by the number of contributing terms.
    pub normalize: bool,
}

/// `v(S)` and its term count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharValue {
    pub value: f64,
    pub terms: usize,
}

/// `Σ log σ(margin)` over the surviving terms of the `pi`-masked batch,
/// reusing `negatives`; forward only, no dropout.
pub fn char_value(
    model: &Model,
    batch: &[PaddedSequence],
    negatives: &NegativeSet,
    pi: Coalition,
    setup: &GameSetup,
) -> Result<CharValue, ModelError> {
    if pi.is_empty() {
        return Ok(CharValue { value: 0.0, terms: 0 });
    }
    let masked: Vec<PaddedSequence> = batch.iter().map(|s| mask_coalition(s, pi)).collect();
    let terms = collect_terms(&masked, negatives, &setup.levels);
    if terms.is_empty() {
        return Ok(CharValue { value: 0.0, terms: 0 });
    }
    let input = EncoderInput::from_batch(&masked, model.config.depth(), setup.item_only);
    let losses = model.term_losses(&input, &terms)?;
    let total: f64 = -losses.iter().sum::<f64>();
    let value = if setup.normalize { total / terms.len() as f64 } else { total };
    Ok(CharValue {
        value,
        terms: terms.len(),
    })
}

/// Evaluate all `2^D` coalitions on one batch.
pub fn char_table(
    model: &Model,
    batch: &[PaddedSequence],
    negatives: &NegativeSet,
    domains: usize,
    setup: &GameSetup,
) -> Result<CharTable, GameError> {
    let mut table = CharTable::new(domains)?;
    for s in Coalition::all(domains).skip(1) {
        let cv = char_value(model, batch, negatives, s, setup)?;
        table.set(s, cv.value, cv.terms);
    }
    Ok(table)
}

/// Exact Shapley values in subset-weighted form.
pub fn shapley_exact(table: &CharTable) -> Result<Vec<f64>, GameError> {
    let n = table.domains;
    if n > MAX_PLAYERS {
        return Err(GameError::TooManyPlayers(n));
    }
    if let Some(s) = Coalition::all(n).find(|s| table.get(*s).is_none()) {
        return Err(GameError::MissingEntry(s));
    }
    // w[k] = k!(n-k-1)!/n!, built without factorials
    let mut w = vec![0.0; n.max(1)];
    for (k, wk) in w.iter_mut().enumerate().take(n) {
        let mut x = 1.0 / n as f64;
        for j in 1..=k {
            x *= j as f64 / (n - j) as f64;
        }
        *wk = x;
    }
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        let mut acc = 0.0;
        for s in Coalition::all(n).filter(|s| s.0 & bit == 0) {
            acc += w[s.len()] * (table.value(s.with(i))? - table.value(s)?);
        }
        *p = acc;
    }
    Ok(phi)
}

/// `softmax(x / λ)`.
pub fn softmax_tempered(x: &[f64], lambda: f64) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - mx) / lambda).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Raw domain weights with their mixing and temperature settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaState {
    /// Pre-softmax values carried between updates.
    pub raw: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl GammaState {
    /// Uniform start, `raw_d = 1/D`.
    pub fn uniform(domains: usize, alpha: f64, beta: f64, lambda: f64) -> Self {
        assert!(lambda > 0.0, "temperature must be positive");
        Self {
            raw: vec![1.0 / domains as f64; domains],
            alpha,
            beta,
            lambda,
        }
    }

    pub fn domains(&self) -> usize {
        self.raw.len()
    }

    pub fn normalized(&self) -> Vec<f64> {
        softmax_tempered(&self.raw, self.lambda)
    }
}

/// `raw ← α·raw + β·φ`, returning the normalized weights.
pub fn update_gamma(state: &mut GammaState, phi: &[f64]) -> Result<Vec<f64>, GameError> {
    if phi.len() != state.domains() {
        return Err(GameError::Length {
            expected: state.domains(),
            got: phi.len(),
        });
    }
    if let Some(d) = phi.iter().position(|v| !v.is_finite()) {
        return Err(GameError::NonFinite(d));
    }
    for (g, p) in state.raw.iter_mut().zip(phi) {
        *g = state.alpha * *g + state.beta * p;
    }
    Ok(state.normalized())
}

/// Normalized `γ` after each refresh, starting with the initial value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GammaTrajectory {
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl GammaTrajectory {
    pub fn push(&mut self, step: usize, gamma: Vec<f64>) {
        self.rows.push((step, gamma));
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.rows.last().map(|(_, g)| g.as_slice())
    }

    /// Per-domain mean over all rows.
    pub fn mean(&self) -> Vec<f64> {
        let Some((_, first)) = self.rows.first() else {
            return Vec::new();
        };
        let mut acc = vec![0.0; first.len()];
        for (_, g) in &self.rows {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        acc.iter().map(|a| a / self.rows.len() as f64).collect()
    }

    /// `step,gamma_1,...,gamma_D` with a header row.
    pub fn to_csv(&self, domains: &[String]) -> String {
        let mut out = String::from("step");
        for d in domains {
            let _ = write!(out, ",gamma_{d}");
        }
        out.push('\n');
        for (step, g) in &self.rows {
            let _ = write!(out, "{step}");
            for v in g {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}
