//! Hierarchy manifest: the declared domains and their category trees.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

/// One node of a domain's category tree. Leaves are items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryNode {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<CategoryNode>,
}

impl CategoryNode {
    pub fn leaf(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            children: Vec::new(),
        }
    }

    pub fn branch(name: impl Into<String>, children: Vec<CategoryNode>) -> Self {
        Self {
            name: name.into(),
            children,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Native hierarchy depth of this domain, item level included.
    pub depth: usize,
    pub tree: Vec<CategoryNode>,
}

impl DomainSpec {
    /// Native category paths of every item, in manifest (depth-first) order.
    pub fn item_paths(&self) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for node in &self.tree {
            collect_leaves(node, &mut stack, &mut out);
        }
        out
    }

    /// Distinct path prefixes of length `len`, in manifest order.
    pub fn prefixes(&self, len: usize) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for node in &self.tree {
            collect_at_depth(node, len, &mut stack, &mut out);
        }
        out
    }

    pub fn item_count(&self) -> usize {
        self.item_paths().len()
    }
}

fn collect_leaves(node: &CategoryNode, stack: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    stack.push(node.name.clone());
    if node.children.is_empty() {
        out.push(stack.clone());
    } else {
        for c in &node.children {
            collect_leaves(c, stack, out);
        }
    }
    stack.pop();
}

fn collect_at_depth(
    node: &CategoryNode,
    len: usize,
    stack: &mut Vec<String>,
    out: &mut Vec<Vec<String>>,
) {
    stack.push(node.name.clone());
    if stack.len() == len {
        out.push(stack.clone());
    } else {
        for c in &node.children {
            collect_at_depth(c, len, stack, out);
        }
    }
    stack.pop();
}

/// Declared domains with per-domain depth and category trees. `depth` is the
/// global hierarchy depth every interaction tuple is aligned to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyManifest {
    pub depth: usize,
    pub domains: Vec<DomainSpec>,
}

impl HierarchyManifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Manifest(msg));
        if self.depth == 0 {
            return bad("hierarchy depth must be at least 1".into());
        }
        if self.domains.is_empty() {
            return bad("manifest declares no domains".into());
        }
        let mut names = HashSet::new();
        for d in &self.domains {
            check_name(&d.name)?;
            if !names.insert(d.name.as_str()) {
                return bad(format!("duplicate domain '{}'", d.name));
            }
            if d.depth == 0 || d.depth > self.depth {
                return bad(format!(
                    "domain '{}' depth {} outside 1..={}",
                    d.name, d.depth, self.depth
                ));
            }
            if d.tree.is_empty() {
                return bad(format!("domain '{}' has no items", d.name));
            }
            check_siblings(&d.tree, &d.name)?;
            for path in d.item_paths() {
                if path.len() != d.depth {
                    return bad(format!(
                        "domain '{}': leaf '{}' sits at level {} but domain depth is {}",
                        d.name,
                        path.join("/"),
                        path.len(),
                        d.depth
                    ));
                }
            }
        }
        Ok(())
    }
}

fn check_name(name: &str) -> Result<(), DataError> {
    if name.is_empty() || name.contains(['/', '\t', '\n', '\r']) {
        return Err(DataError::Manifest(format!(
            "invalid name {name:?}: must be non-empty without '/', tab or newline"
        )));
    }
    Ok(())
}

fn check_siblings(nodes: &[CategoryNode], domain: &str) -> Result<(), DataError> {
    let mut seen = HashSet::new();
    for n in nodes {
        check_name(&n.name)?;
        if !seen.insert(n.name.as_str()) {
            return Err(DataError::Manifest(format!(
                "domain '{domain}': duplicate sibling '{}'",
                n.name
            )));
        }
        check_siblings(&n.children, domain)?;
    }
    Ok(())
}
