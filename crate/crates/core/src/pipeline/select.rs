//! Representative solution selection.
//!
//! Correct submissions are embedded, duplicate vectors are collapsed, and
//! the remainder is partitioned with seeded k-means; the submission
//! nearest each centroid represents its cluster. The spread of centroids
//! controls the diversity of the examples shown to the generation prompt.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Submission;
use crate::embed::{Embedder, EmbeddingVector};
use crate::hash::{fnv1a, mix_seed};
use crate::{Error, Result};

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Returns the index of the
/// point nearest each centroid, one per cluster, in ascending order.
fn kmeans_exemplars(points: &[EmbeddingVector], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    debug_assert!(k >= 1 && k <= n);

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].values.clone());
    while centroids.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| squared_distance(&p.values, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a centroid; any choice is
            // equivalent, pick deterministically.
            rng.gen_range(0..n)
        } else {
            let mut draw = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if draw < *w {
                    chosen = i;
                    break;
                }
                draw -= w;
            }
            chosen
        };
        centroids.push(points[next].values.clone());
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    squared_distance(&p.values, &centroids[a])
                        .total_cmp(&squared_distance(&p.values, &centroids[b]))
                })
                .unwrap();
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        let dim = points[0].values.len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, v) in sums[assignment[i]].iter_mut().zip(&p.values) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed an emptied cluster at the point farthest from its
                // centroid assignment, a standard repair.
                let farthest = (0..n)
                    .max_by(|&a, &b| {
                        squared_distance(&points[a].values, &centroids[assignment[a]])
                            .total_cmp(&squared_distance(
                                &points[b].values,
                                &centroids[assignment[b]],
                            ))
                    })
                    .unwrap();
                centroids[c] = points[farthest].values.clone();
                changed = true;
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centroids[c][j] = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut exemplars: Vec<usize> = (0..k)
        .map(|c| {
            (0..n)
                .filter(|&i| assignment[i] == c)
                .min_by(|&a, &b| {
                    squared_distance(&points[a].values, &centroids[c])
                        .total_cmp(&squared_distance(&points[b].values, &centroids[c]))
                        .then(a.cmp(&b))
                })
                .unwrap_or(0)
        })
        .collect();
    exemplars.sort_unstable();
    exemplars.dedup();
    exemplars
}

/// Pick up to `n` diverse correct submissions for one problem.
///
/// Identical embedding vectors collapse to their earliest submission, so
/// duplicated solutions can never occupy more than one slot. Deterministic
/// for a fixed seed; the problem id is folded into the stream so each
/// problem draws independently.
pub fn select_representative_solutions(
    problem_id: &str,
    correct_submissions: &[Submission],
    n: usize,
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<Vec<Submission>> {
    if n == 0 {
        return Err(Error::domain("must request at least one representative"));
    }
    if correct_submissions.is_empty() {
        return Err(Error::domain(format!(
            "problem {problem_id} has no correct submissions"
        )));
    }

    let mut distinct: Vec<(EmbeddingVector, usize)> = Vec::new();
    for (i, submission) in correct_submissions.iter().enumerate() {
        let vector = embedder.embed(&submission.code)?;
        if !distinct.iter().any(|(v, _)| *v == vector) {
            distinct.push((vector, i));
        }
    }

    let k = n.min(distinct.len());
    let points: Vec<EmbeddingVector> = distinct.iter().map(|(v, _)| v.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, fnv1a(problem_id.as_bytes())));
    let exemplars = kmeans_exemplars(&points, k, &mut rng);
    Ok(exemplars
        .into_iter()
        .map(|i| correct_submissions[distinct[i].1].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::OfflineCodeEmbedder;
    use std::collections::HashMap;

    fn submission(code: &str, i: usize) -> Submission {
        Submission {
            student_id: format!("s{i}"),
            problem_id: "p1".to_string(),
            order_index: i as u64,
            code: code.to_string(),
            correct: true,
            timestamp: None,
        }
    }

    /// Maps each known code string to a fixed vector, for planted-cluster
    /// tests that should not depend on hashing behavior.
    struct PlantedEmbedder {
        vectors: HashMap<String, Vec<f64>>,
    }

    impl Embedder for PlantedEmbedder {
        fn provider_tag(&self) -> &str {
            "planted"
        }
        fn dimension(&self) -> usize {
            5
        }
        fn embed(&self, content: &str) -> Result<EmbeddingVector> {
            Ok(EmbeddingVector {
                values: self.vectors[content].clone(),
                provider_tag: "planted".to_string(),
            })
        }
    }

    #[test]
    fn single_representative_is_nearest_to_global_centroid() {
        // Three collinear points; the middle one is nearest their mean.
        let mut vectors = HashMap::new();
        vectors.insert("a".to_string(), vec![0.0, 0.0, 0.0, 0.0, 0.0]);
        vectors.insert("b".to_string(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        vectors.insert("c".to_string(), vec![2.9, 0.0, 0.0, 0.0, 0.0]);
        let embedder = PlantedEmbedder { vectors };
        let subs = vec![submission("a", 0), submission("b", 1), submission("c", 2)];
        let picked =
            select_representative_solutions("p1", &subs, 1, &embedder, 42).unwrap();
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].code, "b");
    }

    #[test]
    fn identical_submissions_collapse() {
        let embedder = OfflineCodeEmbedder;
        let subs: Vec<Submission> = (0..5)
            .map(|i| submission("return a + b;", i))
            .collect();
        let picked =
            select_representative_solutions("p1", &subs, 5, &embedder, 0).unwrap();
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].order_index, 0, "earliest duplicate wins");
    }

    #[test]
    fn planted_partition_yields_one_per_cluster() {
        let mut vectors = HashMap::new();
        let mut group_of = HashMap::new();
        // 5 well-separated centers, 4 nearby members each.
        for g in 0..5usize {
            for v in 0..4usize {
                let code = format!("g{g}v{v}");
                let mut vec = vec![0.0; 5];
                vec[g] = 10.0;
                vec[(g + 1) % 5] = 0.1 * v as f64;
                vectors.insert(code.clone(), vec);
                group_of.insert(code, g);
            }
        }
        let embedder = PlantedEmbedder { vectors };
        let subs: Vec<Submission> = (0..5)
            .flat_map(|g| (0..4).map(move |v| (g, v)))
            .enumerate()
            .map(|(i, (g, v))| submission(&format!("g{g}v{v}"), i))
            .collect();
        for seed in [0, 7, 123] {
            let picked =
                select_representative_solutions("p1", &subs, 5, &embedder, seed).unwrap();
            assert_eq!(picked.len(), 5);
            let mut groups: Vec<usize> =
                picked.iter().map(|s| group_of[s.code.as_str()]).collect();
            groups.sort_unstable();
            assert_eq!(groups, vec![0, 1, 2, 3, 4], "seed {seed}");
        }
    }

    #[test]
    fn selection_is_deterministic() {
        let embedder = OfflineCodeEmbedder;
        let subs: Vec<Submission> = (0..12)
            .map(|i| submission(&format!("int x{i} = {i} + {};", i * 3 % 7), i))
            .collect();
        let a = select_representative_solutions("p1", &subs, 4, &embedder, 9).unwrap();
        let b = select_representative_solutions("p1", &subs, 4, &embedder, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn no_correct_submissions_is_an_error() {
        let embedder = OfflineCodeEmbedder;
        let err =
            select_representative_solutions("p1", &[], 3, &embedder, 0).unwrap_err();
        assert!(err.to_string().contains("p1"));
    }
}
