//! Event ingestion, vocabularies, padding and leave-one-out splits.

mod events;
mod manifest;
mod sequence;
mod vocab;

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use thiserror::Error;

pub use events::{ingest_events, write_events, Diagnostic, Ingested, RawInteraction, RawSequence};
pub use manifest::{CategoryNode, DomainSpec, HierarchyManifest};
pub use sequence::{
    pad_truncate, split_all, split_leave_one_out, DomainHybridSequence, Interaction,
    LeaveOneOutSplit, PaddedSequence,
};
pub use vocab::{build_vocab, HierVocab, IdRange};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("malformed event on line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("{} categories not in manifest: {}", .0.len(), .0.join(", "))]
    UnknownCategories(Vec<String>),
    #[error("sequence of length {0} is too short for a leave-one-out split (need >= 3)")]
    TooShort(usize),
}

/// A fully resolved dataset: manifest, vocabulary and per-user sequences.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: HierarchyManifest,
    pub vocab: HierVocab,
    pub sequences: Vec<DomainHybridSequence>,
    pub rejected: Vec<Diagnostic>,
}

impl Dataset {
    pub fn load(events: &Path, manifest: &Path) -> Result<Self, DataError> {
        let manifest = HierarchyManifest::load(manifest)?;
        let file = File::open(events).map_err(|e| DataError::Io {
            path: events.display().to_string(),
            source: e,
        })?;
        let ingested = ingest_events(BufReader::new(file), &manifest)?;
        Self::from_ingested(manifest, ingested)
    }

    pub fn from_ingested(manifest: HierarchyManifest, ingested: Ingested) -> Result<Self, DataError> {
        let vocab = build_vocab(&ingested.sequences, &manifest)?;
        let sequences = ingested
            .sequences
            .iter()
            .map(|s| vocab.resolve(s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            manifest,
            vocab,
            sequences,
            rejected: ingested.rejected,
        })
    }

    pub fn domain_count(&self) -> usize {
        self.manifest.domain_count()
    }
}
