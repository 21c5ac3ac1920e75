//! Hierarchical agglomerative clustering of KC descriptions.
//!
//! Average linkage over cosine distance (1 − cosine similarity), merging
//! until the requested cluster count remains. Ties are broken by the
//! lowest original member index, so the merge sequence is deterministic.
//! Exact duplicate descriptions are collapsed before clustering; each
//! final cluster carries every KC whose description belongs to it.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine_similarity, Embedder, EmbeddingVector};
use crate::llm::parse::normalize_kc_name;
use crate::{Error, Result};

use super::KnowledgeComponent;

/// How a cluster got its label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelOrigin {
    Representative,
    Summary,
}

/// A group of initial KCs at one abstraction level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KCCluster {
    pub cluster_id: String,
    pub member_kc_ids: BTreeSet<String>,
    /// Empty until labeling has run.
    pub label: String,
    pub label_origin: Option<LabelOrigin>,
}

/// One agglomeration step, recorded as the smallest original item index
/// of each merged cluster, smaller first.
pub type Merge = (usize, usize);

pub struct HacOutcome {
    pub merges: Vec<Merge>,
    /// Item index → final cluster index; clusters are numbered by their
    /// smallest member, ascending.
    pub assignment: Vec<usize>,
}

struct ActiveCluster {
    members: Vec<usize>,
    rep: usize,
    size: f64,
}

/// Run average-linkage HAC over cosine distances until `n_clusters`
/// clusters remain, returning the merge sequence and final assignment.
pub fn hac_average_cosine(items: &[EmbeddingVector], n_clusters: usize) -> Result<HacOutcome> {
    let n = items.len();
    if n_clusters < 1 || n_clusters > n {
        return Err(Error::domain(format!(
            "n_clusters must be in [1, {n}], got {n_clusters}"
        )));
    }

    let mut clusters: Vec<ActiveCluster> = (0..n)
        .map(|i| ActiveCluster {
            members: vec![i],
            rep: i,
            size: 1.0,
        })
        .collect();
    // linkage[a][b] = current average-linkage distance; upper triangle of
    // a growing table indexed like `clusters`.
    let mut linkage: Vec<Vec<f64>> = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = 1.0 - cosine_similarity(&items[i], &items[j])?;
            linkage[i][j] = d;
            linkage[j][i] = d;
        }
    }
    let mut alive: Vec<bool> = vec![true; n];
    let mut merges = Vec::with_capacity(n - n_clusters);

    for _ in 0..(n - n_clusters) {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            if !alive[a] {
                continue;
            }
            for b in (a + 1)..clusters.len() {
                if !alive[b] {
                    continue;
                }
                let d = linkage[a][b];
                let (lo, hi) = {
                    let (ra, rb) = (clusters[a].rep, clusters[b].rep);
                    (ra.min(rb), ra.max(rb))
                };
                let better = match &best {
                    None => true,
                    Some((bd, ba, bb)) => {
                        let (blo, bhi) = {
                            let (ra, rb) = (clusters[*ba].rep, clusters[*bb].rep);
                            (ra.min(rb), ra.max(rb))
                        };
                        d < *bd || (d == *bd && (lo, hi) < (blo, bhi))
                    }
                };
                if better {
                    best = Some((d, a, b));
                }
            }
        }
        let (_, a, b) = best.expect("at least two clusters remain");
        let (keep, drop) = if clusters[a].rep < clusters[b].rep {
            (a, b)
        } else {
            (b, a)
        };
        merges.push((clusters[keep].rep, clusters[drop].rep));

        // Lance–Williams update for average linkage.
        let (sa, sb) = (clusters[keep].size, clusters[drop].size);
        for c in 0..clusters.len() {
            if !alive[c] || c == keep || c == drop {
                continue;
            }
            let d = (sa * linkage[keep][c] + sb * linkage[drop][c]) / (sa + sb);
            linkage[keep][c] = d;
            linkage[c][keep] = d;
        }
        let moved = std::mem::take(&mut clusters[drop].members);
        clusters[keep].members.extend(moved);
        clusters[keep].members.sort_unstable();
        clusters[keep].size = sa + sb;
        alive[drop] = false;
    }

    let mut finals: Vec<&ActiveCluster> = clusters
        .iter()
        .enumerate()
        .filter(|(i, _)| alive[*i])
        .map(|(_, c)| c)
        .collect();
    finals.sort_by_key(|c| c.rep);
    let mut assignment = vec![0usize; n];
    for (idx, cluster) in finals.iter().enumerate() {
        for &m in &cluster.members {
            assignment[m] = idx;
        }
    }
    Ok(HacOutcome { merges, assignment })
}

/// Cluster initial KCs into `n_clusters` groups on the semantic
/// similarity of their descriptions.
pub fn cluster_kcs(
    kcs: &[KnowledgeComponent],
    n_clusters: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<KCCluster>> {
    // Collapse duplicate descriptions first; zero-distance pairs would
    // otherwise force arbitrary tie-breaks.
    let mut distinct: Vec<(String, String, Vec<usize>)> = Vec::new();
    for (i, kc) in kcs.iter().enumerate() {
        let norm = normalize_kc_name(&kc.name);
        match distinct.iter_mut().find(|(n, _, _)| *n == norm) {
            Some((_, _, indices)) => indices.push(i),
            None => distinct.push((norm, kc.name.clone(), vec![i])),
        }
    }
    if distinct.is_empty() {
        return Err(Error::domain("no KCs to cluster"));
    }
    if n_clusters < 1 || n_clusters > distinct.len() {
        return Err(Error::domain(format!(
            "n_clusters must be in [1, {}], got {n_clusters}",
            distinct.len()
        )));
    }

    let vectors: Vec<EmbeddingVector> = distinct
        .iter()
        .map(|(_, display, _)| embedder.embed(display))
        .collect::<Result<_>>()?;
    let outcome = hac_average_cosine(&vectors, n_clusters)?;

    let mut clusters: Vec<KCCluster> = (0..n_clusters)
        .map(|idx| KCCluster {
            cluster_id: format!("L{n_clusters}-c{idx:03}"),
            member_kc_ids: BTreeSet::new(),
            label: String::new(),
            label_origin: None,
        })
        .collect();
    for (item, (_, _, kc_indices)) in distinct.iter().enumerate() {
        let cluster = &mut clusters[outcome.assignment[item]];
        for &kc_idx in kc_indices {
            cluster.member_kc_ids.insert(kcs[kc_idx].kc_id.clone());
        }
    }
    Ok(clusters)
}

/// Distinct member descriptions of a cluster, in first-appearance order
/// over the KC list.
pub fn cluster_member_names(cluster: &KCCluster, kcs: &[KnowledgeComponent]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for kc in kcs {
        if cluster.member_kc_ids.contains(&kc.kc_id)
            && seen.insert(normalize_kc_name(&kc.name))
        {
            names.push(kc.name.clone());
        }
    }
    names
}
