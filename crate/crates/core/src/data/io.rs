//! CSV ingestion and serialization for interaction logs.
//!
//! A dataset on disk is a directory holding two files:
//!
//! * `problems.csv` with columns `problem_id, statement, human_kc_tags`,
//!   where tags are semicolon-separated within the one field;
//! * `interactions.csv` with columns `student_id, problem_id, order_index,
//!   correct, code` and an optional trailing `timestamp` column. `correct`
//!   is `0` or `1`; multi-line code is quoted per standard CSV rules.
//!
//! Records may arrive in any order; ingestion groups them by student and
//! sorts each sequence by `order_index`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::{Error, Result};

use super::{Dataset, Problem, StudentSequence, Submission};

/// Supported on-disk dataset formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    InteractionLog,
}

const PROBLEMS_FILE: &str = "problems.csv";
const INTERACTIONS_FILE: &str = "interactions.csv";

fn parse_error(file: &str, record: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        location: format!("{file}, record {record}"),
        message: message.into(),
    }
}

/// Load a dataset from `dir`, validating referential integrity and
/// sequence ordering.
pub fn load_dataset(dir: &Path, format: DatasetFormat) -> Result<Dataset> {
    let DatasetFormat::InteractionLog = format;
    let problems = load_problems(&dir.join(PROBLEMS_FILE))?;
    let sequences = load_interactions(&dir.join(INTERACTIONS_FILE))?;
    let dataset = Dataset {
        problems,
        sequences,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn load_problems(path: &Path) -> Result<Vec<Problem>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| parse_error(PROBLEMS_FILE, 0, e.to_string()))?
        .clone();
    let expected = ["problem_id", "statement", "human_kc_tags"];
    if headers.iter().take(3).ne(expected) {
        return Err(parse_error(
            PROBLEMS_FILE,
            0,
            format!("expected header {expected:?}, got {headers:?}"),
        ));
    }
    let mut problems = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record_no = i as u64 + 1;
        let record = record.map_err(|e| parse_error(PROBLEMS_FILE, record_no, e.to_string()))?;
        if record.len() < 3 {
            return Err(parse_error(
                PROBLEMS_FILE,
                record_no,
                format!("expected 3 fields, got {}", record.len()),
            ));
        }
        let human_kc_tags = record[2]
            .split(';')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        problems.push(Problem {
            problem_id: record[0].to_string(),
            statement: record[1].to_string(),
            human_kc_tags,
        });
    }
    Ok(problems)
}

fn load_interactions(path: &Path) -> Result<Vec<StudentSequence>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| parse_error(INTERACTIONS_FILE, 0, e.to_string()))?
        .clone();
    let expected = ["student_id", "problem_id", "order_index", "correct", "code"];
    if headers.iter().take(5).ne(expected) {
        return Err(parse_error(
            INTERACTIONS_FILE,
            0,
            format!("expected header starting {expected:?}, got {headers:?}"),
        ));
    }
    let has_timestamp = headers.len() > 5 && &headers[5] == "timestamp";

    let mut by_student: BTreeMap<String, Vec<Submission>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record_no = i as u64 + 1;
        let record =
            record.map_err(|e| parse_error(INTERACTIONS_FILE, record_no, e.to_string()))?;
        if record.len() < 5 {
            return Err(parse_error(
                INTERACTIONS_FILE,
                record_no,
                format!("expected at least 5 fields, got {}", record.len()),
            ));
        }
        let order_index: u64 = record[2].parse().map_err(|_| {
            parse_error(
                INTERACTIONS_FILE,
                record_no,
                format!("order_index {:?} is not a non-negative integer", &record[2]),
            )
        })?;
        let correct = match &record[3] {
            "0" => false,
            "1" => true,
            other => {
                return Err(parse_error(
                    INTERACTIONS_FILE,
                    record_no,
                    format!("correct must be 0 or 1, got {other:?}"),
                ))
            }
        };
        let timestamp = if has_timestamp {
            record
                .get(5)
                .filter(|t| !t.is_empty())
                .map(str::to_string)
        } else {
            None
        };
        let submission = Submission {
            student_id: record[0].to_string(),
            problem_id: record[1].to_string(),
            order_index,
            code: record[4].to_string(),
            correct,
            timestamp,
        };
        by_student
            .entry(submission.student_id.clone())
            .or_default()
            .push(submission);
    }

    let mut sequences = Vec::with_capacity(by_student.len());
    for (student_id, mut submissions) in by_student {
        submissions.sort_by_key(|s| s.order_index);
        sequences.push(StudentSequence {
            student_id,
            submissions,
        });
    }
    Ok(sequences)
}

/// Write a dataset into `dir` in the interaction-log format.
///
/// The timestamp column is always emitted (empty when absent) so that a
/// save→load round trip reproduces the dataset exactly.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut problems = csv::Writer::from_path(dir.join(PROBLEMS_FILE))
        .map_err(|e| Error::Transport(e.to_string()))?;
    problems
        .write_record(["problem_id", "statement", "human_kc_tags"])
        .map_err(|e| Error::Transport(e.to_string()))?;
    for p in &dataset.problems {
        problems
            .write_record([
                p.problem_id.as_str(),
                p.statement.as_str(),
                &p.human_kc_tags.join(";"),
            ])
            .map_err(|e| Error::Transport(e.to_string()))?;
    }
    problems.flush()?;

    let mut interactions = csv::Writer::from_path(dir.join(INTERACTIONS_FILE))
        .map_err(|e| Error::Transport(e.to_string()))?;
    interactions
        .write_record([
            "student_id",
            "problem_id",
            "order_index",
            "correct",
            "code",
            "timestamp",
        ])
        .map_err(|e| Error::Transport(e.to_string()))?;
    for seq in &dataset.sequences {
        for s in &seq.submissions {
            interactions
                .write_record([
                    s.student_id.as_str(),
                    s.problem_id.as_str(),
                    &s.order_index.to_string(),
                    if s.correct { "1" } else { "0" },
                    s.code.as_str(),
                    s.timestamp.as_deref().unwrap_or(""),
                ])
                .map_err(|e| Error::Transport(e.to_string()))?;
        }
    }
    interactions.flush()?;
    Ok(())
}
