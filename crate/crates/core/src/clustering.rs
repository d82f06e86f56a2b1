//! Second coreference stage: turn pairwise coreference probabilities into
//! entity clusters.
//!
//! Every method returns clusters as sorted mention-index lists, ordered by
//! their smallest member.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relation::PairScore;

/// Symmetric `n x n` similarity with unit diagonal and entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn identity(n: usize) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Self { n, values }
    }

    /// Builds from a full row-major matrix, symmetrising by averaging and
    /// forcing the diagonal to 1.
    pub fn from_dense(n: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != n * n {
            return Err(Error::Contract(format!(
                "similarity matrix of size {n} needs {} entries, got {}",
                n * n,
                dense.len()
            )));
        }
        let mut m = Self::identity(n);
        for i in 0..n {
            for j in i + 1..n {
                let v = (0.5 * (dense[i * n + j] + dense[j * n + i])).clamp(0.0, 1.0);
                m.set(i, j, v);
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
        self.values[j * self.n + i] = v;
    }
}

/// Coreference probabilities of scored pairs; unscored (pruned) pairs stay 0.
pub fn build_similarity(pairs: &[PairScore], n: usize) -> SimilarityMatrix {
    let mut s = SimilarityMatrix::identity(n);
    for p in pairs {
        if p.i != p.j && p.i < n && p.j < n {
            s.set(p.i, p.j, p.coref.clamp(0.0, 1.0));
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringMethod {
    Greedy,
    GreedyMulti,
    AverageLinkage,
    CompleteLinkage,
    EntityLink,
}

impl fmt::Display for ClusteringMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusteringMethod::Greedy => "greedy",
            ClusteringMethod::GreedyMulti => "greedy_multi",
            ClusteringMethod::AverageLinkage => "average_linkage",
            ClusteringMethod::CompleteLinkage => "complete_linkage",
            ClusteringMethod::EntityLink => "entity_link",
        })
    }
}

impl FromStr for ClusteringMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "greedy" => ClusteringMethod::Greedy,
            "greedy_multi" => ClusteringMethod::GreedyMulti,
            "average_linkage" | "average" => ClusteringMethod::AverageLinkage,
            "complete_linkage" | "complete" => ClusteringMethod::CompleteLinkage,
            "entity_link" | "el" => ClusteringMethod::EntityLink,
            other => return Err(Error::Config(format!("unknown clustering method {other}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    pub method: ClusteringMethod,
    pub threshold: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            method: ClusteringMethod::AverageLinkage,
            threshold: 0.5,
        }
    }
}

impl ClusteringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "coreference threshold {} not in [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linkage {
    Average,
    Complete,
}

fn normalise(mut clusters: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for c in &mut clusters {
        c.sort_unstable();
        c.dedup();
    }
    clusters.retain(|c| !c.is_empty());
    clusters.sort();
    clusters.dedup();
    clusters
}

/// Mention `i` in turn claims every still-unassigned `j` with `S[i][j] > t`.
/// Mentions never claimed (only possible when `t >= 1`) end up as singletons.
pub fn cluster_greedy(s: &SimilarityMatrix, t: f64) -> Vec<Vec<usize>> {
    let n = s.n();
    let mut assigned = vec![false; n];
    let mut clusters = Vec::new();
    for i in 0..n {
        let members: Vec<usize> = (0..n).filter(|&j| !assigned[j] && s.get(i, j) > t).collect();
        for &j in &members {
            assigned[j] = true;
        }
        clusters.push(members);
    }
    clusters.extend((0..n).filter(|&j| !assigned[j]).map(|j| vec![j]));
    normalise(clusters)
}

/// `C_i = { j : S[i][j] > t }` for every `i`; a mention may sit in several
/// clusters. Identical clusters collapse; uncovered mentions become singletons.
pub fn cluster_greedy_multi(s: &SimilarityMatrix, t: f64) -> Vec<Vec<usize>> {
    let n = s.n();
    let mut covered = vec![false; n];
    let mut clusters: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let c: Vec<usize> = (0..n).filter(|&j| s.get(i, j) > t).collect();
            for &j in &c {
                covered[j] = true;
            }
            c
        })
        .collect();
    clusters.extend((0..n).filter(|&j| !covered[j]).map(|j| vec![j]));
    normalise(clusters)
}

/// Agglomerative clustering on distance `1 - S`. The closest pair of clusters
/// merges while its linkage distance is at most `1 - t`; ties go to the pair
/// whose smallest members are lexicographically first.
pub fn cluster_linkage(s: &SimilarityMatrix, t: f64, linkage: Linkage) -> Vec<Vec<usize>> {
    let n = s.n();
    let limit = 1.0 - t;
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut active: Vec<bool> = vec![true; n];
    // Complete linkage keeps the largest pairwise distance; average linkage
    // keeps the distance sum and divides by the member-count product.
    let mut link = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            link[i * n + j] = 1.0 - s.get(i, j);
        }
    }
    let dist = |link: &[f64], members: &[Vec<usize>], a: usize, b: usize| match linkage {
        Linkage::Complete => link[a * n + b],
        Linkage::Average => link[a * n + b] / (members[a].len() * members[b].len()) as f64,
    };

    loop {
        // slot index == smallest member, since merges keep the lower slot
        let mut best: Option<(f64, usize, usize)> = None;
        for a in (0..n).filter(|&a| active[a]) {
            for b in (a + 1..n).filter(|&b| active[b]) {
                let d = dist(&link, &members, a, b);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let Some((d, a, b)) = best else { break };
        if d > limit {
            break;
        }
        for k in (0..n).filter(|&k| active[k] && k != a && k != b) {
            let merged = match linkage {
                Linkage::Complete => link[a * n + k].max(link[b * n + k]),
                Linkage::Average => link[a * n + k] + link[b * n + k],
            };
            link[a * n + k] = merged;
            link[k * n + a] = merged;
        }
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        active[b] = false;
    }
    normalise(members)
}

/// Groups mentions sharing a predicted identifier; unlinked mentions stay alone.
pub fn cluster_by_entity_id<S: AsRef<str>>(ids: &[Option<S>]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut clusters = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        match id {
            Some(id) => groups.entry(id.as_ref()).or_default().push(i),
            None => clusters.push(vec![i]),
        }
    }
    clusters.extend(groups.into_values());
    normalise(clusters)
}

/// Dispatches on `config.method`. `entity_ids` is required for
/// [`ClusteringMethod::EntityLink`].
pub fn cluster(
    s: &SimilarityMatrix,
    config: &ClusteringConfig,
    entity_ids: Option<&[Option<String>]>,
) -> Result<Vec<Vec<usize>>> {
    let t = config.threshold;
    Ok(match config.method {
        ClusteringMethod::Greedy => cluster_greedy(s, t),
        ClusteringMethod::GreedyMulti => cluster_greedy_multi(s, t),
        ClusteringMethod::AverageLinkage => cluster_linkage(s, t, Linkage::Average),
        ClusteringMethod::CompleteLinkage => cluster_linkage(s, t, Linkage::Complete),
        ClusteringMethod::EntityLink => {
            let ids = entity_ids.ok_or_else(|| {
                Error::Config("entity_link clustering needs entity disambiguation output".into())
            })?;
            if ids.len() != s.n() {
                return Err(Error::Contract(format!(
                    "{} entity ids for {} mentions",
                    ids.len(),
                    s.n()
                )));
            }
            cluster_by_entity_id(ids)
        }
    })
}
