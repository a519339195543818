//! Line-delimited event log: `user <TAB> domain <TAB> c1/…/cH <TAB> unix_ts`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::{DataError, DomainHybridSequence, HierVocab, HierarchyManifest};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInteraction {
    pub domain: usize,
    pub path: Vec<String>,
    pub timestamp: i64,
}

/// One user's interactions with unresolved category paths, sorted by time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSequence {
    pub user_id: String,
    pub items: Vec<RawInteraction>,
}

/// A record skipped during ingestion.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub sequences: Vec<RawSequence>,
    pub rejected: Vec<Diagnostic>,
}

/// Parse an event log into per-user sequences ordered by user id. Records are
/// stably sorted by timestamp, so ties keep their input order. Records naming
/// an undeclared domain are rejected with a diagnostic; malformed lines abort.
pub fn ingest_events<R: BufRead>(
    reader: R,
    manifest: &HierarchyManifest,
) -> Result<Ingested, DataError> {
    let mut users: BTreeMap<String, Vec<RawInteraction>> = BTreeMap::new();
    let mut rejected = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| DataError::Malformed {
            line: lineno,
            reason: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(DataError::Malformed {
                line: lineno,
                reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let (user, domain, path, ts) = (fields[0], fields[1], fields[2], fields[3]);
        if user.is_empty() {
            return Err(DataError::Malformed {
                line: lineno,
                reason: "empty user id".into(),
            });
        }
        let timestamp: i64 = ts.trim().parse().map_err(|_| DataError::Malformed {
            line: lineno,
            reason: format!("timestamp {ts:?} is not an integer"),
        })?;
        let path: Vec<String> = path.split('/').map(str::to_owned).collect();
        if path.iter().any(String::is_empty) {
            return Err(DataError::Malformed {
                line: lineno,
                reason: "empty category in path".into(),
            });
        }
        let Some(domain) = manifest.domain_index(domain) else {
            rejected.push(Diagnostic {
                line: lineno,
                message: format!("unknown domain '{domain}'"),
            });
            continue;
        };
        users.entry(user.to_owned()).or_default().push(RawInteraction {
            domain,
            path,
            timestamp,
        });
    }
    let sequences = users
        .into_iter()
        .map(|(user_id, mut items)| {
            items.sort_by_key(|i| i.timestamp);
            RawSequence { user_id, items }
        })
        .collect();
    Ok(Ingested {
        sequences,
        rejected,
    })
}

/// Serialize resolved sequences back into the event-log format.
pub fn write_events<W: Write>(
    out: &mut W,
    sequences: &[DomainHybridSequence],
    vocab: &HierVocab,
) -> std::io::Result<()> {
    for seq in sequences {
        for it in &seq.items {
            let path = vocab.native_path(it.domain, it.item_id());
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                seq.user_id,
                vocab.domain_name(it.domain),
                path,
                it.timestamp
            )?;
        }
    }
    Ok(())
}
