//! Trivial correctness-prediction baselines: random guessing and the
//! per-problem majority label.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Random,
    Majority,
}

/// Probabilities for a batch of problem queries.
///
/// Random predicts 0.5 everywhere, or a seeded uniform draw per query
/// when a seed is given. Majority predicts the per-problem majority
/// correctness label over the training students' submissions as a hard
/// {0, 1} probability, breaking ties toward incorrect; problems unseen
/// in training fall back to the global majority.
pub fn baseline_predict(
    kind: BaselineKind,
    dataset: &Dataset,
    train_students: &BTreeSet<String>,
    queries: &[&str],
    seed: Option<u64>,
) -> Result<Vec<f64>> {
    match kind {
        BaselineKind::Random => match seed {
            None => Ok(vec![0.5; queries.len()]),
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok((0..queries.len()).map(|_| rng.gen_range(0.0..1.0)).collect())
            }
        },
        BaselineKind::Majority => {
            let mut per_problem: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            let mut global = (0usize, 0usize);
            for sequence in &dataset.sequences {
                if !train_students.contains(&sequence.student_id) {
                    continue;
                }
                for submission in &sequence.submissions {
                    let entry = per_problem.entry(&submission.problem_id).or_insert((0, 0));
                    if submission.correct {
                        entry.0 += 1;
                        global.0 += 1;
                    } else {
                        entry.1 += 1;
                        global.1 += 1;
                    }
                }
            }
            if global == (0, 0) {
                return Err(Error::domain(
                    "majority baseline has no training submissions".to_string(),
                ));
            }
            let label = |(correct, incorrect): (usize, usize)| -> f64 {
                if correct > incorrect {
                    1.0
                } else {
                    0.0
                }
            };
            Ok(queries
                .iter()
                .map(|problem| {
                    per_problem
                        .get(problem)
                        .map(|&counts| label(counts))
                        .unwrap_or_else(|| label(global))
                })
                .collect())
        }
    }
}
