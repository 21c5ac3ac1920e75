//! Q-matrix construction and the KC abstraction ontology.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embed::{cosine_similarity, Embedder};
use crate::llm::parse::normalize_kc_name;
use crate::{Error, Result};

use super::cluster::KCCluster;

/// Binary problem × KC incidence matrix. Columns are cluster labels;
/// duplicate labels share a column, and no row or column is all zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QMatrix {
    pub problems: Vec<String>,
    pub kcs: Vec<String>,
    pub incidence: Vec<Vec<u8>>,
}

impl QMatrix {
    pub fn problem_index(&self, problem_id: &str) -> Option<usize> {
        self.problems.iter().position(|p| p == problem_id)
    }

    /// Column indices of the KCs a problem exercises, in column order.
    pub fn kc_indices_for_problem(&self, problem_id: &str) -> Result<Vec<usize>> {
        let row = self.problem_index(problem_id).ok_or_else(|| {
            Error::integrity(format!("problem {problem_id} is not in the Q-matrix"))
        })?;
        Ok(self.incidence[row]
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| i)
            .collect())
    }

    /// KC labels a problem exercises, in column order.
    pub fn kc_labels_for_problem(&self, problem_id: &str) -> Result<Vec<String>> {
        Ok(self
            .kc_indices_for_problem(problem_id)?
            .iter()
            .map(|&i| self.kcs[i].clone())
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.incidence.len() != self.problems.len() {
            return Err(Error::integrity("incidence row count != problem count"));
        }
        let mut seen_problems = BTreeSet::new();
        for p in &self.problems {
            if !seen_problems.insert(p.clone()) {
                return Err(Error::integrity(format!("duplicate problem id {p}")));
            }
        }
        let mut seen_labels = BTreeSet::new();
        for label in &self.kcs {
            if !seen_labels.insert(normalize_kc_name(label)) {
                return Err(Error::integrity(format!("duplicate KC label {label}")));
            }
        }
        for (row, problem) in self.incidence.iter().zip(&self.problems) {
            if row.len() != self.kcs.len() {
                return Err(Error::integrity("incidence column count != KC count"));
            }
            if row.iter().any(|&v| v > 1) {
                return Err(Error::integrity("incidence entries must be 0 or 1"));
            }
            if row.iter().all(|&v| v == 0) {
                return Err(Error::integrity(format!(
                    "problem {problem} has no associated KCs"
                )));
            }
        }
        for (col, label) in self.kcs.iter().enumerate() {
            if self.incidence.iter().all(|row| row[col] == 0) {
                return Err(Error::integrity(format!(
                    "KC {label} is associated with no problem"
                )));
            }
        }
        Ok(())
    }
}

/// Q-matrix taken directly from human KC tags, bypassing generation and
/// clustering: columns are the distinct tags in first-appearance order.
pub fn q_matrix_from_tags(dataset: &crate::data::Dataset) -> Result<QMatrix> {
    let mut kcs: Vec<String> = Vec::new();
    for problem in &dataset.problems {
        if problem.human_kc_tags.is_empty() {
            return Err(Error::integrity(format!(
                "problem {} has no human KC tags",
                problem.problem_id
            )));
        }
        for tag in &problem.human_kc_tags {
            if !kcs.iter().any(|k| normalize_kc_name(k) == normalize_kc_name(tag)) {
                kcs.push(tag.clone());
            }
        }
    }
    let incidence = dataset
        .problems
        .iter()
        .map(|problem| {
            kcs.iter()
                .map(|kc| {
                    let hit = problem
                        .human_kc_tags
                        .iter()
                        .any(|t| normalize_kc_name(t) == normalize_kc_name(kc));
                    hit as u8
                })
                .collect()
        })
        .collect();
    let q = QMatrix {
        problems: dataset.problems.iter().map(|p| p.problem_id.clone()).collect(),
        kcs,
        incidence,
    };
    q.validate()?;
    Ok(q)
}

/// Build the Q-matrix from each problem's initial KC ids and the labeled
/// clusters. Clusters whose labels normalize identically share a column;
/// columns that end up all zero are dropped with a warning.
pub fn build_q_matrix(
    problem_kcs: &BTreeMap<String, Vec<String>>,
    clusters: &[KCCluster],
) -> Result<QMatrix> {
    if problem_kcs.is_empty() {
        return Err(Error::domain("no problems to build a Q-matrix from"));
    }
    let mut kc_to_cluster: BTreeMap<&str, usize> = BTreeMap::new();
    for (idx, cluster) in clusters.iter().enumerate() {
        if cluster.label.trim().is_empty() {
            return Err(Error::domain(format!(
                "cluster {} has no label; label clusters before building the Q-matrix",
                cluster.cluster_id
            )));
        }
        for kc_id in &cluster.member_kc_ids {
            if kc_to_cluster.insert(kc_id, idx).is_some() {
                return Err(Error::integrity(format!(
                    "KC {kc_id} belongs to more than one cluster"
                )));
            }
        }
    }

    // Duplicate labels (after normalization) collapse to one column at the
    // position of their first cluster.
    let mut labels: Vec<String> = Vec::new();
    let mut label_col: BTreeMap<String, usize> = BTreeMap::new();
    let mut cluster_col: Vec<usize> = Vec::with_capacity(clusters.len());
    for cluster in clusters {
        let norm = normalize_kc_name(&cluster.label);
        let col = *label_col.entry(norm).or_insert_with(|| {
            labels.push(cluster.label.clone());
            labels.len() - 1
        });
        cluster_col.push(col);
    }

    let problems: Vec<String> = problem_kcs.keys().cloned().collect();
    let mut incidence = vec![vec![0u8; labels.len()]; problems.len()];
    for (row, problem) in problems.iter().enumerate() {
        let kc_ids = &problem_kcs[problem];
        if kc_ids.is_empty() {
            return Err(Error::integrity(format!(
                "problem {problem} has no initial KCs"
            )));
        }
        for kc_id in kc_ids {
            let cluster_idx = *kc_to_cluster.get(kc_id.as_str()).ok_or_else(|| {
                Error::integrity(format!("KC {kc_id} is not in any cluster"))
            })?;
            incidence[row][cluster_col[cluster_idx]] = 1;
        }
    }

    let kept: Vec<usize> = (0..labels.len())
        .filter(|&col| incidence.iter().any(|row| row[col] == 1))
        .collect();
    if kept.len() < labels.len() {
        for col in 0..labels.len() {
            if !kept.contains(&col) {
                log::warn!(
                    "dropping KC column {:?}: no problem exercises it",
                    labels[col]
                );
            }
        }
        incidence = incidence
            .into_iter()
            .map(|row| kept.iter().map(|&c| row[c]).collect())
            .collect();
        labels = kept.into_iter().map(|c| labels[c].clone()).collect();
    }

    let q = QMatrix {
        problems,
        kcs: labels,
        incidence,
    };
    q.validate()?;
    Ok(q)
}

/// One node of the abstraction ontology. Children come from the
/// next-finer level; leaves are the finest-level clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyNode {
    pub label: String,
    pub abstraction_level: usize,
    pub children: Vec<OntologyNode>,
}

impl OntologyNode {
    pub fn count_nodes(&self) -> usize {
        1 + self.children.iter().map(|c| c.count_nodes()).sum::<usize>()
    }
}

/// Build the ontology forest from labeled clusterings of the same KC set,
/// ordered coarsest to finest. The parent of a finer cluster is the
/// coarser cluster holding the plurality of its members; ties fall back
/// to label similarity, then the lowest cluster index.
pub fn build_ontology(
    levels: &[Vec<KCCluster>],
    embedder: &dyn Embedder,
) -> Result<Vec<OntologyNode>> {
    if levels.is_empty() {
        return Err(Error::domain("ontology needs at least one level"));
    }
    for pair in levels.windows(2) {
        if pair[0].len() > pair[1].len() {
            return Err(Error::domain(format!(
                "levels must run coarsest to finest; {} clusters precede {}",
                pair[0].len(),
                pair[1].len()
            )));
        }
    }
    let universe: BTreeSet<&String> = levels[0]
        .iter()
        .flat_map(|c| c.member_kc_ids.iter())
        .collect();
    for level in &levels[1..] {
        let set: BTreeSet<&String> = level.iter().flat_map(|c| c.member_kc_ids.iter()).collect();
        if set != universe {
            return Err(Error::integrity(
                "levels cluster different KC sets; the ontology needs one KC set throughout",
            ));
        }
    }
    for cluster in levels.iter().flatten() {
        if cluster.label.trim().is_empty() {
            return Err(Error::domain(format!(
                "cluster {} has no label",
                cluster.cluster_id
            )));
        }
    }

    let finest = levels.last().expect("levels non-empty");
    let mut nodes: Vec<OntologyNode> = finest
        .iter()
        .map(|c| OntologyNode {
            label: c.label.clone(),
            abstraction_level: finest.len(),
            children: Vec::new(),
        })
        .collect();

    for window in (0..levels.len() - 1).rev() {
        let coarse = &levels[window];
        let fine = &levels[window + 1];
        let mut grouped: Vec<Vec<OntologyNode>> = (0..coarse.len()).map(|_| Vec::new()).collect();
        for (fine_cluster, node) in fine.iter().zip(nodes) {
            let parent = parent_index(fine_cluster, coarse, embedder)?;
            grouped[parent].push(node);
        }
        nodes = coarse
            .iter()
            .zip(grouped)
            .map(|(c, children)| OntologyNode {
                label: c.label.clone(),
                abstraction_level: coarse.len(),
                children,
            })
            .collect();
    }
    Ok(nodes)
}

fn parent_index(
    fine: &KCCluster,
    coarse: &[KCCluster],
    embedder: &dyn Embedder,
) -> Result<usize> {
    let overlaps: Vec<usize> = coarse
        .iter()
        .map(|c| fine.member_kc_ids.intersection(&c.member_kc_ids).count())
        .collect();
    let max = *overlaps.iter().max().expect("coarse level non-empty");
    if max == 0 {
        return Err(Error::integrity(format!(
            "cluster {} shares no members with the coarser level",
            fine.cluster_id
        )));
    }
    let tied: Vec<usize> = (0..coarse.len()).filter(|&i| overlaps[i] == max).collect();
    if tied.len() == 1 {
        return Ok(tied[0]);
    }
    let fine_vec = embedder.embed(&fine.label)?;
    let mut best = tied[0];
    let mut best_sim = cosine_similarity(&fine_vec, &embedder.embed(&coarse[best].label)?)?;
    for &idx in &tied[1..] {
        let sim = cosine_similarity(&fine_vec, &embedder.embed(&coarse[idx].label)?)?;
        if sim > best_sim {
            best = idx;
            best_sim = sim;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::OfflineTextEmbedder;
    use crate::pipeline::cluster::LabelOrigin;

    fn cluster(id: &str, label: &str, members: &[&str]) -> KCCluster {
        KCCluster {
            cluster_id: id.to_string(),
            member_kc_ids: members.iter().map(|m| m.to_string()).collect(),
            label: label.to_string(),
            label_origin: Some(LabelOrigin::Representative),
        }
    }

    #[test]
    fn three_kcs_in_two_clusters_give_a_row_with_two_ones() {
        let clusters = vec![
            cluster("c0", "Loops", &["p1/kc1", "p1/kc2"]),
            cluster("c1", "Strings", &["p1/kc3"]),
        ];
        let mut problem_kcs = BTreeMap::new();
        problem_kcs.insert(
            "p1".to_string(),
            vec!["p1/kc1".to_string(), "p1/kc2".to_string(), "p1/kc3".to_string()],
        );
        let q = build_q_matrix(&problem_kcs, &clusters).unwrap();
        assert_eq!(q.incidence, vec![vec![1, 1]]);
        assert_eq!(q.kcs, vec!["Loops".to_string(), "Strings".to_string()]);
    }

    #[test]
    fn shared_cluster_column_has_two_ones() {
        let clusters = vec![
            cluster("c0", "Loops", &["p1/kc1", "p2/kc1"]),
            cluster("c1", "Strings", &["p2/kc2"]),
        ];
        let mut problem_kcs = BTreeMap::new();
        problem_kcs.insert("p1".to_string(), vec!["p1/kc1".to_string()]);
        problem_kcs.insert(
            "p2".to_string(),
            vec!["p2/kc1".to_string(), "p2/kc2".to_string()],
        );
        let q = build_q_matrix(&problem_kcs, &clusters).unwrap();
        let loops_col = q.kcs.iter().position(|k| k == "Loops").unwrap();
        let ones: u8 = q.incidence.iter().map(|row| row[loops_col]).sum();
        assert_eq!(ones, 2);
    }

    #[test]
    fn tag_q_matrix_uses_distinct_tags_in_first_appearance_order() {
        use crate::data::{Dataset, Problem};
        let dataset = Dataset {
            problems: vec![
                Problem {
                    problem_id: "p1".to_string(),
                    statement: "s1".to_string(),
                    human_kc_tags: vec!["For loop".to_string(), "Math".to_string()],
                },
                Problem {
                    problem_id: "p2".to_string(),
                    statement: "s2".to_string(),
                    human_kc_tags: vec!["math".to_string(), "String".to_string()],
                },
            ],
            sequences: vec![],
        };
        let q = q_matrix_from_tags(&dataset).unwrap();
        assert_eq!(q.kcs, vec!["For loop", "Math", "String"]);
        assert_eq!(q.incidence, vec![vec![1, 1, 0], vec![0, 1, 1]]);
        q.validate().unwrap();
    }

    #[test]
    fn tag_q_matrix_rejects_untagged_problems() {
        use crate::data::{Dataset, Problem};
        let dataset = Dataset {
            problems: vec![Problem {
                problem_id: "p1".to_string(),
                statement: "s1".to_string(),
                human_kc_tags: vec![],
            }],
            sequences: vec![],
        };
        assert!(q_matrix_from_tags(&dataset).is_err());
    }

    #[test]
    fn unclustered_kc_is_an_integrity_error() {
        let clusters = vec![cluster("c0", "Loops", &["p1/kc1"])];
        let mut problem_kcs = BTreeMap::new();
        problem_kcs.insert(
            "p1".to_string(),
            vec!["p1/kc1".to_string(), "p1/kc2".to_string()],
        );
        let err = build_q_matrix(&problem_kcs, &clusters).unwrap_err();
        assert!(err.to_string().contains("p1/kc2"), "got {err}");
    }

    #[test]
    fn problem_without_kcs_is_an_integrity_error() {
        let clusters = vec![cluster("c0", "Loops", &["p1/kc1"])];
        let mut problem_kcs = BTreeMap::new();
        problem_kcs.insert("p1".to_string(), vec!["p1/kc1".to_string()]);
        problem_kcs.insert("p2".to_string(), Vec::new());
        let err = build_q_matrix(&problem_kcs, &clusters).unwrap_err();
        assert!(err.to_string().contains("p2"), "got {err}");
    }

    #[test]
    fn duplicate_labels_share_a_column() {
        let clusters = vec![
            cluster("c0", "Loop iteration", &["p1/kc1"]),
            cluster("c1", "loop  ITERATION", &["p2/kc1"]),
        ];
        let mut problem_kcs = BTreeMap::new();
        problem_kcs.insert("p1".to_string(), vec!["p1/kc1".to_string()]);
        problem_kcs.insert("p2".to_string(), vec!["p2/kc1".to_string()]);
        let q = build_q_matrix(&problem_kcs, &clusters).unwrap();
        assert_eq!(q.kcs, vec!["Loop iteration".to_string()]);
        assert_eq!(q.incidence, vec![vec![1], vec![1]]);
    }

    #[test]
    fn zero_columns_are_dropped() {
        let clusters = vec![
            cluster("c0", "Loops", &["p1/kc1"]),
            cluster("c1", "Orphan", &["p9/kc1"]),
        ];
        let mut problem_kcs = BTreeMap::new();
        problem_kcs.insert("p1".to_string(), vec!["p1/kc1".to_string()]);
        let q = build_q_matrix(&problem_kcs, &clusters).unwrap();
        assert_eq!(q.kcs, vec!["Loops".to_string()]);
        q.validate().unwrap();
    }

    #[test]
    fn kc_lookups_follow_column_order() {
        let clusters = vec![
            cluster("c0", "Loops", &["p1/kc1"]),
            cluster("c1", "Strings", &["p1/kc2"]),
            cluster("c2", "Logic", &["p1/kc3", "p2/kc1"]),
        ];
        let mut problem_kcs = BTreeMap::new();
        problem_kcs.insert(
            "p1".to_string(),
            vec!["p1/kc3".to_string(), "p1/kc1".to_string(), "p1/kc2".to_string()],
        );
        problem_kcs.insert("p2".to_string(), vec!["p2/kc1".to_string()]);
        let q = build_q_matrix(&problem_kcs, &clusters).unwrap();
        assert_eq!(q.kc_indices_for_problem("p1").unwrap(), vec![0, 1, 2]);
        assert_eq!(
            q.kc_labels_for_problem("p2").unwrap(),
            vec!["Logic".to_string()]
        );
        assert!(q.kc_indices_for_problem("p3").is_err());
    }

    #[test]
    fn identical_levels_build_identity_chains() {
        let level = vec![
            cluster("c0", "Loops", &["a", "b"]),
            cluster("c1", "Strings", &["c"]),
        ];
        let forest =
            build_ontology(&[level.clone(), level.clone()], &OfflineTextEmbedder).unwrap();
        assert_eq!(forest.len(), 2);
        for node in &forest {
            assert_eq!(node.children.len(), 1, "identity chain for {}", node.label);
            assert_eq!(node.children[0].label, node.label);
            assert!(node.children[0].children.is_empty());
        }
    }

    #[test]
    fn nested_partitions_get_exact_containment_parents() {
        let coarse = vec![
            cluster("c0", "Control flow", &["a", "b", "c", "d"]),
            cluster("c1", "Strings", &["e", "f", "g", "h"]),
        ];
        let fine = vec![
            cluster("f0", "If statements", &["a", "b"]),
            cluster("f1", "Loops", &["c", "d"]),
            cluster("f2", "String indexing", &["e", "f"]),
            cluster("f3", "String length", &["g", "h"]),
        ];
        let forest = build_ontology(&[coarse, fine], &OfflineTextEmbedder).unwrap();
        let control = &forest[0];
        let strings = &forest[1];
        let labels = |n: &OntologyNode| {
            n.children
                .iter()
                .map(|c| c.label.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(labels(control), vec!["If statements", "Loops"]);
        assert_eq!(labels(strings), vec!["String indexing", "String length"]);
    }

    #[test]
    fn plurality_ties_fall_back_to_label_similarity() {
        let coarse = vec![
            cluster("c0", "Loop iteration", &["a", "b"]),
            cluster("c1", "String operations", &["c", "d"]),
        ];
        // One member in each coarse cluster: a genuine plurality tie.
        let fine = vec![
            cluster("f0", "While loop iteration", &["a", "c"]),
            cluster("f1", "String operations on text", &["b", "d"]),
        ];
        let forest = build_ontology(&[coarse, fine], &OfflineTextEmbedder).unwrap();
        assert_eq!(forest[0].children.len(), 1);
        assert_eq!(forest[0].children[0].label, "While loop iteration");
        assert_eq!(forest[1].children[0].label, "String operations on text");
    }

    #[test]
    fn every_fine_cluster_has_exactly_one_parent() {
        let coarse = vec![
            cluster("c0", "Control flow", &["a", "b", "c"]),
            cluster("c1", "Strings", &["d", "e"]),
        ];
        let fine = vec![
            cluster("f0", "If statements", &["a"]),
            cluster("f1", "Loops", &["b", "c"]),
            cluster("f2", "String indexing", &["d", "e"]),
        ];
        let forest = build_ontology(&[coarse, fine.clone()], &OfflineTextEmbedder).unwrap();
        let child_count: usize = forest.iter().map(|n| n.children.len()).sum();
        assert_eq!(child_count, fine.len());
    }

    #[test]
    fn mismatched_kc_sets_are_an_integrity_error() {
        let coarse = vec![cluster("c0", "Everything", &["a", "b"])];
        let fine = vec![
            cluster("f0", "One", &["a"]),
            cluster("f1", "Two", &["b", "c"]),
        ];
        let err = build_ontology(&[coarse, fine], &OfflineTextEmbedder).unwrap_err();
        assert!(err.to_string().contains("KC set"), "got {err}");
    }

    #[test]
    fn coarser_before_finer_is_required() {
        let coarse = vec![cluster("c0", "Everything", &["a", "b"])];
        let fine = vec![
            cluster("f0", "One", &["a"]),
            cluster("f1", "Two", &["b"]),
        ];
        assert!(build_ontology(&[fine, coarse], &OfflineTextEmbedder).is_err());
    }
}
