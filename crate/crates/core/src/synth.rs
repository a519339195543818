//! Synthetic multi-domain interaction sequences with tunable cross-domain
//! coupling.
//!
//! Every user carries one latent taste vector per domain. Across domains the
//! vectors are jointly Gaussian with correlation `cross_corr` (applied per
//! latent dimension), so strongly correlated domains share preferences. Item
//! embeddings are sums of per-category centers along the item's category path
//! plus a small item offset, which makes coarse-category preferences smoother
//! than item preferences. Noise domains ignore the user and draw items
//! uniformly. Domain order inside a sequence comes from superposed per-domain
//! Poisson arrivals.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    CategoryNode, Dataset, DomainHybridSequence, DomainSpec, HierVocab, HierarchyManifest,
    Interaction,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cross_corr is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("invalid synthetic profile: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDomain {
    pub name: String,
    /// Native depth, item level included.
    pub depth: usize,
    /// Children per category node at each non-item level (`depth - 1` entries).
    pub fanout: Vec<usize>,
    pub items_per_leaf: usize,
    /// Relative Poisson arrival rate.
    #[serde(default = "one")]
    pub rate: f64,
}

fn one() -> f64 {
    1.0
}

impl SynthDomain {
    pub fn item_count(&self) -> usize {
        self.fanout.iter().product::<usize>() * self.items_per_leaf
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthProfile {
    pub domains: Vec<SynthDomain>,
    pub latent_dim: usize,
    pub users: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub cross_corr: Vec<Vec<f64>>,
    /// 1-based ids of domains whose items ignore the user.
    #[serde(default)]
    pub noise_domains: Vec<usize>,
    /// Inverse temperature of item choice.
    #[serde(default = "default_sharpness")]
    pub sharpness: f64,
    /// Spread of item offsets around their leaf category center.
    #[serde(default = "default_item_spread")]
    pub item_spread: f64,
    pub seed: u64,
}

fn default_sharpness() -> f64 {
    3.0
}

fn default_item_spread() -> f64 {
    0.35
}

impl Default for SynthProfile {
    /// Three two-level domains; 1 and 2 correlated at 0.8, 3 pure noise.
    fn default() -> Self {
        let dom = |name: &str| SynthDomain {
            name: name.into(),
            depth: 2,
            fanout: vec![10],
            items_per_leaf: 15,
            rate: 1.0,
        };
        Self {
            domains: vec![dom("d1"), dom("d2"), dom("d3")],
            latent_dim: 8,
            users: 5000,
            min_len: 12,
            max_len: 30,
            cross_corr: vec![
                vec![1.0, 0.8, 0.0],
                vec![0.8, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            noise_domains: vec![3],
            sharpness: default_sharpness(),
            item_spread: default_item_spread(),
            seed: 7,
        }
    }
}

impl SynthProfile {
    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    /// Check the profile and return the factor `F` with `F Fᵀ = cross_corr`.
    fn correlation_factor(&self) -> Result<DMatrix<f64>, SynthError> {
        let d = self.domains.len();
        let bad = |m: String| Err(SynthError::Invalid(m));
        if d == 0 {
            return bad("no domains".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        for dom in &self.domains {
            if dom.depth == 0 || dom.fanout.len() != dom.depth - 1 || dom.items_per_leaf == 0 {
                return bad(format!("domain '{}': fanout must have depth-1 entries", dom.name));
            }
            if dom.fanout.contains(&0) {
                return bad(format!("domain '{}': zero fanout", dom.name));
            }
            if !(dom.rate > 0.0 && dom.rate.is_finite()) {
                return bad(format!("domain '{}': rate must be positive", dom.name));
            }
        }
        if let Some(&n) = self.noise_domains.iter().find(|&&n| n == 0 || n > d) {
            return bad(format!("noise domain {n} outside 1..={d}"));
        }
        if self.cross_corr.len() != d || self.cross_corr.iter().any(|r| r.len() != d) {
            return bad(format!("cross_corr must be {d}x{d}"));
        }
        let c = DMatrix::from_fn(d, d, |i, j| self.cross_corr[i][j]);
        for i in 0..d {
            if (c[(i, i)] - 1.0).abs() > 1e-12 {
                return bad("cross_corr diagonal must be 1".into());
            }
            for j in 0..d {
                if (c[(i, j)] - c[(j, i)]).abs() > 1e-12 || c[(i, j)].abs() > 1.0 {
                    return bad("cross_corr must be symmetric with entries in [-1, 1]".into());
                }
            }
        }
        let eig = SymmetricEigen::new(c);
        let min = eig.eigenvalues.min();
        if min < -1e-10 {
            return Err(SynthError::NotPsd(min));
        }
        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
    }

    pub fn manifest(&self) -> HierarchyManifest {
        let depth = self.domains.iter().map(|d| d.depth).max().unwrap_or(1);
        let domains = self
            .domains
            .iter()
            .map(|dom| {
                let mut counter = 0usize;
                DomainSpec {
                    name: dom.name.clone(),
                    depth: dom.depth,
                    tree: build_tree(dom, 0, "c", &mut counter),
                }
            })
            .collect();
        HierarchyManifest { depth, domains }
    }
}

fn build_tree(dom: &SynthDomain, level: usize, prefix: &str, counter: &mut usize) -> Vec<CategoryNode> {
    if level == dom.fanout.len() {
        return (0..dom.items_per_leaf)
            .map(|_| {
                *counter += 1;
                CategoryNode::leaf(format!("{}_i{:04}", dom.name, *counter))
            })
            .collect();
    }
    (0..dom.fanout[level])
        .map(|k| {
            let name = format!("{prefix}{k}");
            let children = build_tree(dom, level + 1, &format!("{name}."), counter);
            CategoryNode::branch(name, children)
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Item embeddings per domain, in manifest item order.
fn item_embeddings(profile: &SynthProfile, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
    let k = profile.latent_dim;
    profile
        .domains
        .iter()
        .map(|dom| {
            // Depth-first over the category tree; the center at category
            // level l has scale 2^-(l-1).
            let mut out = Vec::with_capacity(dom.item_count());
            let mut stack = vec![vec![0.0; k]];
            fn walk(
                dom: &SynthDomain,
                level: usize,
                k: usize,
                spread: f64,
                rng: &mut ChaCha8Rng,
                stack: &mut Vec<Vec<f64>>,
                out: &mut Vec<Vec<f64>>,
            ) {
                let base = stack.last().unwrap().clone();
                if level == dom.fanout.len() {
                    for _ in 0..dom.items_per_leaf {
                        let noise = gaussian(rng, k, spread);
                        out.push(base.iter().zip(noise).map(|(a, b)| a + b).collect());
                    }
                    return;
                }
                let scale = 0.5f64.powi(level as i32);
                for _ in 0..dom.fanout[level] {
                    let c = gaussian(rng, k, scale);
                    stack.push(base.iter().zip(c).map(|(a, b)| a + b).collect());
                    walk(dom, level + 1, k, spread, rng, stack, out);
                    stack.pop();
                }
            }
            walk(dom, 0, k, profile.item_spread, rng, &mut stack, &mut out);
            out
        })
        .collect()
}

fn sample_cdf(cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Generate a dataset. Output is a pure function of the profile.
pub fn generate(profile: &SynthProfile) -> Result<Dataset, SynthError> {
    let factor = profile.correlation_factor()?;
    let manifest = profile.manifest();
    let vocab = HierVocab::from_manifest(&manifest)
        .map_err(|e| SynthError::Invalid(e.to_string()))?;
    let d = profile.domain_count();
    let k = profile.latent_dim;
    let depth = manifest.depth;

    let mut item_rng = ChaCha8Rng::seed_from_u64(profile.seed);
    item_rng.set_stream(0);
    let embeddings = item_embeddings(profile, &mut item_rng);
    let noise: Vec<bool> = (1..=d).map(|i| profile.noise_domains.contains(&i)).collect();

    let total_rate: f64 = profile.domains.iter().map(|x| x.rate).sum();
    let mut domain_cdf = Vec::with_capacity(d);
    let mut acc = 0.0;
    for dom in &profile.domains {
        acc += dom.rate;
        domain_cdf.push(acc);
    }
    let arrival = Exp::new(total_rate).expect("positive rate");
    let norm = profile.sharpness / (k as f64).sqrt();

    let mut sequences = Vec::with_capacity(profile.users);
    for u in 0..profile.users {
        let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
        rng.set_stream(u as u64 + 1);

        // latent[d][j] = sum_e factor[d][e] * n[e], independently per dim j
        let mut latent = vec![vec![0.0; k]; d];
        for j in 0..k {
            let n: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            for (dd, row) in latent.iter_mut().enumerate() {
                row[j] = (0..d).map(|e| factor[(dd, e)] * n[e]).sum();
            }
        }
        let cdfs: Vec<Vec<f64>> = (0..d)
            .map(|dd| {
                let mut acc = 0.0;
                embeddings[dd]
                    .iter()
                    .map(|e| {
                        acc += if noise[dd] {
                            1.0
                        } else {
                            let s: f64 = e.iter().zip(&latent[dd]).map(|(a, b)| a * b).sum();
                            (norm * s).exp()
                        };
                        acc
                    })
                    .collect()
            })
            .collect();

        let len = rng.random_range(profile.min_len..=profile.max_len);
        let mut clock = 0.0f64;
        let base: i64 = 1_600_000_000;
        let mut items = Vec::with_capacity(len);
        for _ in 0..len {
            clock += arrival.sample(&mut rng);
            let dd = sample_cdf(&domain_cdf, &mut rng);
            let local = sample_cdf(&cdfs[dd], &mut rng);
            let item = vocab.range(dd, depth - 1).start + local as u32;
            items.push(Interaction {
                domain: dd,
                categories: vocab.item_tuple(item).to_vec(),
                timestamp: base + (clock * 3600.0) as i64,
            });
        }
        sequences.push(DomainHybridSequence {
            user_id: format!("u{u:06}"),
            items,
        });
    }
    Ok(Dataset {
        manifest,
        vocab,
        sequences,
        rejected: Vec::new(),
    })
}
