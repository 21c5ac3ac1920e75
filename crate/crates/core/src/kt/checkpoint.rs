//! Checkpoint persistence plus the interpretability and evaluation
//! exports: mastery reports per student per timestep and prediction
//! dumps (â, generated code, ground-truth code).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::embed::Embedder;
use crate::pipeline::QMatrix;
use crate::{Error, Result};

use super::autodiff::Tape;
use super::backbone::Backbone;
use super::model::KcgenKt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub training_config_digest: String,
    pub q_matrix_digest: String,
}

/// Write bytes to `path` atomically: write a sibling temp file, then
/// rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::domain(format!("cannot write to {}", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Checkpoint layout: `model.json` (all trainable parameters and model
/// shape), `meta.json` (epoch and config/Q-matrix digests), and
/// `tokenizer.json` (vocabulary assets).
pub fn save_checkpoint<B: Backbone + Serialize>(
    dir: &Path,
    model: &KcgenKt<B>,
    meta: &CheckpointMeta,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("model.json"), &serde_json::to_vec(model)?)?;
    write_atomic(&dir.join("meta.json"), &serde_json::to_vec_pretty(meta)?)?;
    write_atomic(
        &dir.join("tokenizer.json"),
        &serde_json::to_vec(model.backbone.tokenizer())?,
    )?;
    Ok(())
}

pub fn load_checkpoint<B: Backbone + DeserializeOwned>(
    dir: &Path,
) -> Result<(KcgenKt<B>, CheckpointMeta)> {
    let model_bytes = fs::read(dir.join("model.json"))?;
    let mut model: KcgenKt<B> = serde_json::from_slice(&model_bytes)?;
    model.backbone.after_deserialize();
    let meta_bytes = fs::read(dir.join("meta.json"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;
    Ok((model, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasteryRecord {
    pub student_id: String,
    pub timestep: usize,
    pub kc: String,
    pub mastery: f64,
}

const MASTERY_CLAMP: f64 = 1e-12;

/// Per-student, per-timestep mastery of every KC, teacher-forced over the
/// student's history. The value at timestep t is the mastery used to
/// predict submission t. Values are clamped into the open unit interval.
pub fn mastery_report<B: Backbone>(
    model: &KcgenKt<B>,
    dataset: &Dataset,
    students: &[&str],
    q: &QMatrix,
    embedder: &dyn Embedder,
) -> Result<Vec<MasteryRecord>> {
    let mut records = Vec::new();
    for &student in students {
        let sequence = dataset
            .sequences
            .iter()
            .find(|s| s.student_id == student)
            .ok_or_else(|| Error::integrity(format!("unknown student {student}")))?;
        let mut tape = Tape::new();
        let graphs =
            model.forward_student(&mut tape, dataset, &sequence.submissions, q, embedder)?;
        for (timestep, graph) in graphs.iter().enumerate() {
            let mastery = tape.value(graph.mastery);
            for (kc_index, kc) in q.kcs.iter().enumerate() {
                records.push(MasteryRecord {
                    student_id: student.to_string(),
                    timestep,
                    kc: kc.clone(),
                    mastery: mastery.at(0, kc_index).clamp(MASTERY_CLAMP, 1.0 - MASTERY_CLAMP),
                });
            }
        }
    }
    Ok(records)
}

pub fn write_mastery_csv(path: &Path, records: &[MasteryRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for record in records {
        writer.serialize(record)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::domain(format!("csv buffer: {e}")))?;
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub student_id: String,
    pub problem_id: String,
    pub correct: bool,
    pub a_hat: f64,
    pub generated_code: String,
    pub ground_truth_code: String,
}

/// Predict every submission of every listed student from its preceding
/// history: â, greedy code, and the ground truth the eval module scores
/// against.
pub fn prediction_dump<B: Backbone>(
    model: &KcgenKt<B>,
    dataset: &Dataset,
    students: &[&str],
    q: &QMatrix,
    embedder: &dyn Embedder,
    max_code_tokens: usize,
) -> Result<Vec<PredictionRecord>> {
    let mut records = Vec::new();
    for &student in students {
        let sequence = dataset
            .sequences
            .iter()
            .find(|s| s.student_id == student)
            .ok_or_else(|| Error::integrity(format!("unknown student {student}")))?;
        for t in 0..sequence.submissions.len() {
            let target = &sequence.submissions[t];
            let problem = dataset.problem(&target.problem_id).ok_or_else(|| {
                Error::integrity(format!("unknown problem {}", target.problem_id))
            })?;
            let prediction = model.predict_student(
                dataset,
                &sequence.submissions[..t],
                problem,
                q,
                embedder,
                max_code_tokens,
            )?;
            records.push(PredictionRecord {
                student_id: student.to_string(),
                problem_id: target.problem_id.clone(),
                correct: target.correct,
                a_hat: prediction.correctness_probability,
                generated_code: prediction.generated_code,
                ground_truth_code: target.code.clone(),
            });
        }
    }
    Ok(records)
}

pub fn write_prediction_csv(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for record in records {
        writer.serialize(record)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::domain(format!("csv buffer: {e}")))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Problem, StudentSequence, Submission};
    use crate::embed::OfflineCodeEmbedder;
    use crate::kt::backbone::{BackboneConfig, TinyTransformer};
    use crate::kt::tokenizer::Tokenizer;
    use crate::pipeline::q_matrix_from_tags;

    fn fixture() -> (Dataset, QMatrix, KcgenKt<TinyTransformer>) {
        let dataset = Dataset {
            problems: vec![
                Problem {
                    problem_id: "p1".to_string(),
                    statement: "add numbers".to_string(),
                    human_kc_tags: vec!["Addition".to_string()],
                },
                Problem {
                    problem_id: "p2".to_string(),
                    statement: "compare numbers".to_string(),
                    human_kc_tags: vec!["Comparison".to_string()],
                },
            ],
            sequences: vec![StudentSequence {
                student_id: "s1".to_string(),
                submissions: vec![
                    Submission {
                        student_id: "s1".to_string(),
                        problem_id: "p1".to_string(),
                        order_index: 0,
                        code: "return a + b ;".to_string(),
                        correct: true,
                        timestamp: None,
                    },
                    Submission {
                        student_id: "s1".to_string(),
                        problem_id: "p2".to_string(),
                        order_index: 1,
                        code: "return a > b ;".to_string(),
                        correct: false,
                        timestamp: None,
                    },
                ],
            }],
        };
        let q = q_matrix_from_tags(&dataset).unwrap();
        let mut corpus: Vec<String> = dataset.problems.iter().map(|p| p.statement.clone()).collect();
        corpus.push("return a + b ; > question: . KC 1: 2 The student's mastery level on is:".to_string());
        corpus.push("Addition Comparison".to_string());
        let tokenizer = Tokenizer::from_corpus(corpus.iter().map(String::as_str));
        let backbone = TinyTransformer::new(
            BackboneConfig {
                layers: 1,
                dim: 8,
                heads: 2,
                d_ff: 16,
                max_seq_len: 128,
            },
            tokenizer,
            3,
        )
        .unwrap();
        let model = KcgenKt::new(backbone, 8, 2, crate::embed::OFFLINE_DIMENSION, 4).unwrap();
        (dataset, q, model)
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let (dataset, q, model) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta {
            epoch: 3,
            training_config_digest: "cfg".to_string(),
            q_matrix_digest: "qm".to_string(),
        };
        save_checkpoint(dir.path(), &model, &meta).unwrap();
        let (restored, restored_meta) =
            load_checkpoint::<TinyTransformer>(dir.path()).unwrap();
        assert_eq!(restored_meta, meta);
        let before = model
            .predict_student(&dataset, &dataset.sequences[0].submissions[..1],
                dataset.problem("p2").unwrap(), &q, &OfflineCodeEmbedder, 8)
            .unwrap();
        let after = restored
            .predict_student(&dataset, &dataset.sequences[0].submissions[..1],
                dataset.problem("p2").unwrap(), &q, &OfflineCodeEmbedder, 8)
            .unwrap();
        assert_eq!(before, after, "restored model must predict identically");
        for name in ["model.json", "meta.json", "tokenizer.json"] {
            assert!(dir.path().join(name).exists(), "{name} missing from checkpoint");
        }
    }

    #[test]
    fn mastery_report_covers_every_timestep_and_kc_in_range() {
        let (dataset, q, model) = fixture();
        let records = mastery_report(&model, &dataset, &["s1"], &q, &OfflineCodeEmbedder).unwrap();
        assert_eq!(records.len(), 2 * 2, "2 timesteps × 2 KCs");
        for record in &records {
            assert!(
                record.mastery > 0.0 && record.mastery < 1.0,
                "mastery strictly inside the unit interval, got {}",
                record.mastery
            );
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mastery.csv");
        write_mastery_csv(&path, &records).unwrap();
        let mut reader = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<MasteryRecord> = reader.deserialize().map(|r| r.unwrap()).collect();
        assert_eq!(rows, records);
    }

    #[test]
    fn prediction_dump_pairs_generated_with_ground_truth() {
        let (dataset, q, model) = fixture();
        let records =
            prediction_dump(&model, &dataset, &["s1"], &q, &OfflineCodeEmbedder, 8).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].ground_truth_code, "return a + b ;");
        assert!(records.iter().all(|r| r.a_hat > 0.0 && r.a_hat < 1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.csv");
        write_prediction_csv(&path, &records).unwrap();
        let mut reader = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<PredictionRecord> = reader.deserialize().map(|r| r.unwrap()).collect();
        assert_eq!(rows, records);
    }
}
