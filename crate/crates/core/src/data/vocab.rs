//! Per-(domain, level) id ranges over the concatenated level vocabularies.

use std::collections::{BTreeSet, HashMap};

use sha2::{Digest, Sha256};

use super::{DataError, DomainHybridSequence, HierarchyManifest, Interaction, RawSequence};

/// Contiguous id range `start..start + len` (ids are global at one level).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdRange {
    pub start: u32,
    pub len: u32,
}

impl IdRange {
    pub fn end(&self) -> u32 {
        self.start + self.len
    }

    pub fn contains(&self, id: u32) -> bool {
        id >= self.start && id < self.end()
    }

    pub fn ids(&self) -> std::ops::Range<u32> {
        self.start..self.end()
    }
}

/// Category vocabularies. Id 0 is PAD at every level; domain ranges at a
/// level are laid out back to back in manifest domain order.
#[derive(Debug, Clone)]
pub struct HierVocab {
    depth: usize,
    domain_names: Vec<String>,
    ranges: Vec<Vec<IdRange>>,
    lookup: Vec<HashMap<(usize, String), u32>>,
    native_paths: Vec<String>,
    item_tuples: Vec<Vec<u32>>,
}

/// Build the vocabulary from the manifest, failing if any observed category
/// path is not declared there.
pub fn build_vocab(
    sequences: &[RawSequence],
    manifest: &HierarchyManifest,
) -> Result<HierVocab, DataError> {
    let vocab = HierVocab::from_manifest(manifest)?;
    let mut offenders = BTreeSet::new();
    for seq in sequences {
        for it in &seq.items {
            if vocab.resolve_path(it.domain, &it.path).is_none() {
                offenders.insert(format!(
                    "{}:{}",
                    vocab.domain_name(it.domain),
                    it.path.join("/")
                ));
            }
        }
    }
    if !offenders.is_empty() {
        return Err(DataError::UnknownCategories(offenders.into_iter().collect()));
    }
    Ok(vocab)
}

impl HierVocab {
    pub fn from_manifest(manifest: &HierarchyManifest) -> Result<Self, DataError> {
        manifest.validate()?;
        let depth = manifest.depth;
        let mut ranges = vec![Vec::new(); depth];
        let mut lookup = vec![HashMap::new(); depth];
        for level in 0..depth {
            let mut next = 1u32;
            for (d, dom) in manifest.domains.iter().enumerate() {
                let prefixes = dom.prefixes((level + 1).min(dom.depth));
                let start = next;
                for p in prefixes {
                    lookup[level].insert((d, p.join("/")), next);
                    next += 1;
                }
                ranges[level].push(IdRange {
                    start,
                    len: next - start,
                });
            }
        }
        let mut native_paths = Vec::new();
        let mut item_tuples = Vec::new();
        for (d, dom) in manifest.domains.iter().enumerate() {
            for path in dom.item_paths() {
                let tuple = (0..depth)
                    .map(|level| {
                        let key = path[..(level + 1).min(dom.depth)].join("/");
                        lookup[level][&(d, key)]
                    })
                    .collect();
                native_paths.push(path.join("/"));
                item_tuples.push(tuple);
            }
        }
        Ok(Self {
            depth,
            domain_names: manifest.domains.iter().map(|d| d.name.clone()).collect(),
            ranges,
            lookup,
            native_paths,
            item_tuples,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn domain_count(&self) -> usize {
        self.domain_names.len()
    }

    pub fn domain_name(&self, domain: usize) -> &str {
        &self.domain_names[domain]
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    /// Id range of `domain` at 0-based `level`.
    pub fn range(&self, domain: usize, level: usize) -> IdRange {
        self.ranges[level][domain]
    }

    /// Number of real (non-PAD) ids at 0-based `level`, summed over domains.
    pub fn level_size(&self, level: usize) -> usize {
        self.ranges[level].iter().map(|r| r.len as usize).sum()
    }

    /// Embedding table rows at `level`, PAD row included.
    pub fn table_rows(&self, level: usize) -> usize {
        self.level_size(level) + 1
    }

    /// Domain owning `id` at `level`.
    pub fn domain_of(&self, level: usize, id: u32) -> Option<usize> {
        self.ranges[level].iter().position(|r| r.contains(id))
    }

    /// Aligned category tuple for a native path, `None` if undeclared.
    pub fn resolve_path(&self, domain: usize, path: &[String]) -> Option<Vec<u32>> {
        if domain >= self.domain_count() {
            return None;
        }
        let key = path.join("/");
        let item = *self.lookup[self.depth - 1].get(&(domain, key))?;
        Some(self.item_tuple(item).to_vec())
    }

    /// Full aligned tuple of an item id (level-`depth` id).
    pub fn item_tuple(&self, item: u32) -> &[u32] {
        &self.item_tuples[item as usize - 1]
    }

    pub fn native_path(&self, _domain: usize, item: u32) -> &str {
        &self.native_paths[item as usize - 1]
    }

    pub fn resolve(&self, raw: &RawSequence) -> Result<DomainHybridSequence, DataError> {
        let mut items = Vec::with_capacity(raw.items.len());
        let mut missing = BTreeSet::new();
        for it in &raw.items {
            match self.resolve_path(it.domain, &it.path) {
                Some(categories) => items.push(Interaction {
                    domain: it.domain,
                    categories,
                    timestamp: it.timestamp,
                }),
                None => {
                    missing.insert(format!("{}:{}", self.domain_name(it.domain), it.path.join("/")));
                }
            }
        }
        if !missing.is_empty() {
            return Err(DataError::UnknownCategories(missing.into_iter().collect()));
        }
        Ok(DomainHybridSequence {
            user_id: raw.user_id.clone(),
            items,
        })
    }

    /// True when every category of `it` lies in its domain's range.
    pub fn validates(&self, it: &Interaction) -> bool {
        it.domain < self.domain_count()
            && it.categories.len() == self.depth
            && it
                .categories
                .iter()
                .enumerate()
                .all(|(level, &id)| self.range(it.domain, level).contains(id))
    }

    /// Stable hash of the id assignment, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.depth.to_le_bytes());
        for name in &self.domain_names {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        for (path, tuple) in self.native_paths.iter().zip(&self.item_tuples) {
            h.update(path.as_bytes());
            for id in tuple {
                h.update(id.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
