//! Domain types for learning-interaction logs, plus first-submission
//! filtering and repeated random subsampling splits.

pub mod io;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hash::mix_seed;
use crate::{Error, Result};

/// A programming problem with its statement and any human-written KC tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub problem_id: String,
    pub statement: String,
    /// Stored verbatim; conversion to natural language happens downstream.
    pub human_kc_tags: Vec<String>,
}

/// One code submission by one student to one problem.
///
/// Correctness is an ingested label (whether the submission passed the
/// problem's tests); it is never computed here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub student_id: String,
    pub problem_id: String,
    /// Position in the student's chronological sequence.
    pub order_index: u64,
    pub code: String,
    pub correct: bool,
    /// Optional wall-clock metadata; the model consumes order only.
    pub timestamp: Option<String>,
}

/// A student's submissions in chronological order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentSequence {
    pub student_id: String,
    pub submissions: Vec<Submission>,
}

/// An interaction log: problems plus per-student submission sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub problems: Vec<Problem>,
    pub sequences: Vec<StudentSequence>,
}

impl Dataset {
    /// Look up a problem by id.
    pub fn problem(&self, problem_id: &str) -> Option<&Problem> {
        self.problems.iter().find(|p| p.problem_id == problem_id)
    }

    /// Map from problem id to its index in `problems`.
    pub fn problem_index(&self) -> BTreeMap<&str, usize> {
        self.problems
            .iter()
            .enumerate()
            .map(|(i, p)| (p.problem_id.as_str(), i))
            .collect()
    }

    /// Total number of submissions across all students.
    pub fn submission_count(&self) -> usize {
        self.sequences.iter().map(|s| s.submissions.len()).sum()
    }

    /// Check the structural invariants: unique non-empty problem ids,
    /// non-empty statements, no dangling problem references, and strictly
    /// increasing order indices within each student.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for p in &self.problems {
            if p.problem_id.is_empty() {
                return Err(Error::integrity("problem with empty problem_id"));
            }
            if p.statement.trim().is_empty() {
                return Err(Error::integrity(format!(
                    "problem {} has an empty statement",
                    p.problem_id
                )));
            }
            if !ids.insert(p.problem_id.as_str()) {
                return Err(Error::integrity(format!(
                    "duplicate problem_id {}",
                    p.problem_id
                )));
            }
        }
        let mut students = HashSet::new();
        for seq in &self.sequences {
            if !students.insert(seq.student_id.as_str()) {
                return Err(Error::integrity(format!(
                    "duplicate student sequence for {}",
                    seq.student_id
                )));
            }
            let mut last: Option<u64> = None;
            for sub in &seq.submissions {
                if sub.student_id != seq.student_id {
                    return Err(Error::integrity(format!(
                        "submission under student {} carries student_id {}",
                        seq.student_id, sub.student_id
                    )));
                }
                if !ids.contains(sub.problem_id.as_str()) {
                    return Err(Error::integrity(format!(
                        "submission by {} references unknown problem {}",
                        sub.student_id, sub.problem_id
                    )));
                }
                if let Some(prev) = last {
                    if sub.order_index <= prev {
                        return Err(Error::integrity(format!(
                            "order_index not strictly increasing for student {}",
                            seq.student_id
                        )));
                    }
                }
                last = Some(sub.order_index);
            }
        }
        Ok(())
    }
}

/// Train/validation/test partition of the student population.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub split_index: usize,
    /// The master seed the split family was derived from.
    pub seed: u64,
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl DatasetSplit {
    /// All students in the split, across the three partitions.
    pub fn all_students(&self) -> BTreeSet<String> {
        let mut out = self.train.clone();
        out.extend(self.validation.iter().cloned());
        out.extend(self.test.iter().cloned());
        out
    }
}

/// Fractions for the three partitions; must be positive and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    fn check(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| *r <= 0.0) {
            return Err(Error::domain("split ratios must all be positive"));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!(
                "split ratios sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Keep only the earliest submission per (student, problem) pair.
///
/// Relative order is preserved and the operation is idempotent. Students
/// whose sequences end up empty are dropped with a warning.
pub fn filter_first_submissions(sequences: &[StudentSequence]) -> Vec<StudentSequence> {
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let mut seen = HashSet::new();
        let submissions: Vec<Submission> = seq
            .submissions
            .iter()
            .filter(|s| seen.insert(s.problem_id.as_str()))
            .cloned()
            .collect();
        if submissions.is_empty() {
            log::warn!(
                "student {} has no submissions after filtering; dropping",
                seq.student_id
            );
            continue;
        }
        out.push(StudentSequence {
            student_id: seq.student_id.clone(),
            submissions,
        });
    }
    out
}

/// Partition sizes by the largest-remainder method, then guarantee every
/// partition gets at least one member by borrowing from the largest.
fn partition_sizes(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let quotas = [
        ratios.train * n as f64,
        ratios.validation * n as f64,
        ratios.test * n as f64,
    ];
    let mut sizes = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    for i in 0..3 {
        sizes[i] = quotas[i].floor() as usize;
        remainders[i] = quotas[i] - quotas[i].floor();
    }
    let mut leftover = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        remainders[b]
            .partial_cmp(&remainders[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }
    while sizes.iter().any(|&s| s == 0) {
        let empty = sizes.iter().position(|&s| s == 0).unwrap();
        let largest = (0..3).max_by_key(|&i| sizes[i]).unwrap();
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }
    sizes
}

/// Produce `n_splits` independent train/validation/test partitions of the
/// student population by repeated random subsampling.
///
/// Each split shuffles the sorted student ids with its own generator seeded
/// from `(seed, split_index)`, so the whole family is reproducible and any
/// single split can be regenerated in isolation.
pub fn make_splits(
    sequences: &[StudentSequence],
    n_splits: usize,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Vec<DatasetSplit>> {
    ratios.check()?;
    if n_splits < 1 {
        return Err(Error::domain("n_splits must be at least 1"));
    }
    let mut students: Vec<&str> = sequences.iter().map(|s| s.student_id.as_str()).collect();
    students.sort_unstable();
    students.dedup();
    if students.len() < 3 {
        return Err(Error::domain(format!(
            "need at least 3 students to populate all partitions, got {}",
            students.len()
        )));
    }
    let sizes = partition_sizes(students.len(), &ratios);
    let mut splits = Vec::with_capacity(n_splits);
    for split_index in 0..n_splits {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, split_index as u64));
        let mut shuffled = students.clone();
        shuffled.shuffle(&mut rng);
        let train: BTreeSet<String> = shuffled[..sizes[0]].iter().map(|s| s.to_string()).collect();
        let validation: BTreeSet<String> = shuffled[sizes[0]..sizes[0] + sizes[1]]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let test: BTreeSet<String> = shuffled[sizes[0] + sizes[1]..]
            .iter()
            .map(|s| s.to_string())
            .collect();
        splits.push(DatasetSplit {
            split_index,
            seed,
            train,
            validation,
            test,
        });
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sub(student: &str, problem: &str, order: u64) -> Submission {
        Submission {
            student_id: student.to_string(),
            problem_id: problem.to_string(),
            order_index: order,
            code: "x".to_string(),
            correct: true,
            timestamp: None,
        }
    }

    fn seq(student: &str, subs: Vec<Submission>) -> StudentSequence {
        StudentSequence {
            student_id: student.to_string(),
            submissions: subs,
        }
    }

    #[test]
    fn filter_keeps_earliest_per_problem() {
        let input = vec![seq(
            "s1",
            vec![sub("s1", "P1", 0), sub("s1", "P1", 1), sub("s1", "P2", 2)],
        )];
        let out = filter_first_submissions(&input);
        assert_eq!(out.len(), 1);
        let kept: Vec<(&str, u64)> = out[0]
            .submissions
            .iter()
            .map(|s| (s.problem_id.as_str(), s.order_index))
            .collect();
        assert_eq!(kept, vec![("P1", 0), ("P2", 2)]);
    }

    #[test]
    fn filter_is_idempotent() {
        let input = vec![seq(
            "s1",
            vec![sub("s1", "P1", 0), sub("s1", "P1", 3), sub("s1", "P2", 5)],
        )];
        let once = filter_first_submissions(&input);
        let twice = filter_first_submissions(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn filter_matches_distinct_pair_count() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut sequences = Vec::new();
        for s in 0..20 {
            let student = format!("s{s}");
            let mut subs = Vec::new();
            for order in 0..rng.gen_range(1..40u64) {
                let problem = format!("P{}", rng.gen_range(0..10));
                subs.push(sub(&student, &problem, order));
            }
            sequences.push(seq(&student, subs));
        }
        let filtered = filter_first_submissions(&sequences);
        let kept: usize = filtered.iter().map(|s| s.submissions.len()).sum();
        let distinct: HashSet<(String, String)> = sequences
            .iter()
            .flat_map(|s| {
                s.submissions
                    .iter()
                    .map(|x| (x.student_id.clone(), x.problem_id.clone()))
            })
            .collect();
        assert_eq!(kept, distinct.len());
    }

    #[test]
    fn splits_match_rounded_ratios() {
        let sequences: Vec<StudentSequence> = (0..10)
            .map(|i| seq(&format!("s{i}"), vec![sub(&format!("s{i}"), "P1", 0)]))
            .collect();
        let splits = make_splits(&sequences, 1, SplitRatios::default(), 42).unwrap();
        assert_eq!(splits[0].train.len(), 8);
        assert_eq!(splits[0].validation.len(), 1);
        assert_eq!(splits[0].test.len(), 1);
    }

    #[test]
    fn identical_seed_reproduces_splits() {
        let sequences: Vec<StudentSequence> = (0..25)
            .map(|i| seq(&format!("s{i:02}"), vec![sub(&format!("s{i:02}"), "P1", 0)]))
            .collect();
        let a = make_splits(&sequences, 3, SplitRatios::default(), 99).unwrap();
        let b = make_splits(&sequences, 3, SplitRatios::default(), 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn each_split_partitions_the_population() {
        let sequences: Vec<StudentSequence> = (0..100)
            .map(|i| seq(&format!("s{i:03}"), vec![sub(&format!("s{i:03}"), "P1", 0)]))
            .collect();
        let all: BTreeSet<String> = sequences.iter().map(|s| s.student_id.clone()).collect();
        let splits = make_splits(&sequences, 5, SplitRatios::default(), 1).unwrap();
        assert_eq!(splits.len(), 5);
        let mut distinct = HashSet::new();
        for split in &splits {
            assert!(split.train.is_disjoint(&split.validation));
            assert!(split.train.is_disjoint(&split.test));
            assert!(split.validation.is_disjoint(&split.test));
            assert_eq!(split.all_students(), all);
            distinct.insert(format!("{:?}", split.train));
        }
        assert_eq!(distinct.len(), 5, "expected 5 distinct partitions");
    }

    #[test]
    fn too_few_students_is_an_error() {
        let sequences = vec![
            seq("s1", vec![sub("s1", "P1", 0)]),
            seq("s2", vec![sub("s2", "P1", 0)]),
        ];
        let err = make_splits(&sequences, 1, SplitRatios::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Domain(_)), "got {err:?}");
    }

    #[test]
    fn bad_ratios_are_rejected() {
        let sequences: Vec<StudentSequence> = (0..5)
            .map(|i| seq(&format!("s{i}"), vec![sub(&format!("s{i}"), "P1", 0)]))
            .collect();
        let ratios = SplitRatios {
            train: 0.5,
            validation: 0.2,
            test: 0.2,
        };
        assert!(make_splits(&sequences, 1, ratios, 0).is_err());
    }

    #[test]
    fn every_partition_gets_a_student() {
        let sequences: Vec<StudentSequence> = (0..3)
            .map(|i| seq(&format!("s{i}"), vec![sub(&format!("s{i}"), "P1", 0)]))
            .collect();
        let ratios = SplitRatios {
            train: 0.98,
            validation: 0.01,
            test: 0.01,
        };
        let splits = make_splits(&sequences, 1, ratios, 5).unwrap();
        assert_eq!(splits[0].train.len(), 1);
        assert_eq!(splits[0].validation.len(), 1);
        assert_eq!(splits[0].test.len(), 1);
    }

    #[test]
    fn validate_rejects_dangling_reference() {
        let dataset = Dataset {
            problems: vec![Problem {
                problem_id: "P1".to_string(),
                statement: "do a thing".to_string(),
                human_kc_tags: vec![],
            }],
            sequences: vec![seq("s1", vec![sub("s1", "P9", 0)])],
        };
        let err = dataset.validate().unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "got {err:?}");
    }

    #[test]
    fn validate_rejects_nonincreasing_order() {
        let dataset = Dataset {
            problems: vec![
                Problem {
                    problem_id: "P1".to_string(),
                    statement: "a".to_string(),
                    human_kc_tags: vec![],
                },
                Problem {
                    problem_id: "P2".to_string(),
                    statement: "b".to_string(),
                    human_kc_tags: vec![],
                },
            ],
            sequences: vec![seq("s1", vec![sub("s1", "P1", 1), sub("s1", "P2", 1)])],
        };
        assert!(dataset.validate().is_err());
    }
}
