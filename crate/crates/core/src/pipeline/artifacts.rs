//! Readers and writers for pipeline artifacts: the KC set, clusters,
//! Q-matrix, and ontology. CSV for the tabular files, pretty JSON for the
//! nested ones; all outputs are deterministic so reruns are byte-stable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

use super::cluster::KCCluster;
use super::qmatrix::{OntologyNode, QMatrix};
use super::KnowledgeComponent;

fn parse_err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Parse {
        location: path.display().to_string(),
        message: message.to_string(),
    }
}

pub fn save_kc_set(path: &Path, kcs: &[KnowledgeComponent]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["kc_id", "name", "reasoning", "source_problem_id", "level"])?;
    for kc in kcs {
        writer.write_record([
            kc.kc_id.as_str(),
            kc.name.as_str(),
            kc.reasoning.as_str(),
            kc.source_problem_id.as_deref().unwrap_or(""),
            &kc.abstraction_level.map(|l| l.to_string()).unwrap_or_default(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_kc_set(path: &Path) -> Result<Vec<KnowledgeComponent>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["kc_id", "name", "reasoning", "source_problem_id", "level"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(parse_err(
            path,
            format!("unexpected header {headers:?}, wanted {expected:?}"),
        ));
    }
    let mut kcs = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let field = |idx: usize| record.get(idx).unwrap_or("").to_string();
        let level = field(4);
        kcs.push(KnowledgeComponent {
            kc_id: field(0),
            name: field(1),
            reasoning: field(2),
            source_problem_id: (!field(3).is_empty()).then(|| field(3)),
            abstraction_level: if level.is_empty() {
                None
            } else {
                Some(level.parse().map_err(|e| {
                    parse_err(path, format!("record {}: bad level: {e}", i + 1))
                })?)
            },
        });
    }
    Ok(kcs)
}

pub fn save_q_matrix(path: &Path, q: &QMatrix) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["problem_id".to_string()];
    header.extend(q.kcs.iter().cloned());
    writer.write_record(&header)?;
    for (problem, row) in q.problems.iter().zip(&q.incidence) {
        let mut record = vec![problem.clone()];
        record.extend(row.iter().map(|v| v.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_q_matrix(path: &Path) -> Result<QMatrix> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut columns = headers.iter();
    if columns.next() != Some("problem_id") {
        return Err(parse_err(path, "first column must be problem_id"));
    }
    let kcs: Vec<String> = columns.map(str::to_string).collect();
    let mut problems = Vec::new();
    let mut incidence = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let mut fields = record.iter();
        let problem = fields.next().unwrap_or("").to_string();
        let row: Vec<u8> = fields
            .map(|f| match f {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(parse_err(
                    path,
                    format!("record {}: entry {other:?} is not 0 or 1", i + 1),
                )),
            })
            .collect::<Result<_>>()?;
        if row.len() != kcs.len() {
            return Err(parse_err(
                path,
                format!("record {}: {} entries for {} KCs", i + 1, row.len(), kcs.len()),
            ));
        }
        problems.push(problem);
        incidence.push(row);
    }
    let q = QMatrix {
        problems,
        kcs,
        incidence,
    };
    q.validate()?;
    Ok(q)
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut writer, value)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let reader = BufReader::new(File::open(path)?);
    serde_json::from_reader(reader).map_err(|e| parse_err(path, e))
}

pub fn save_clusters(path: &Path, clusters: &[KCCluster]) -> Result<()> {
    save_json(path, &clusters)
}

pub fn load_clusters(path: &Path) -> Result<Vec<KCCluster>> {
    load_json(path)
}

pub fn save_ontology(path: &Path, forest: &[OntologyNode]) -> Result<()> {
    save_json(path, &forest)
}

pub fn load_ontology(path: &Path) -> Result<Vec<OntologyNode>> {
    load_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::cluster::LabelOrigin;

    fn sample_kcs() -> Vec<KnowledgeComponent> {
        vec![
            KnowledgeComponent {
                kc_id: "p1/kc1".to_string(),
                name: "For loop iteration".to_string(),
                reasoning: "The solutions repeat a step, once per element.".to_string(),
                source_problem_id: Some("p1".to_string()),
                abstraction_level: None,
            },
            KnowledgeComponent {
                kc_id: "p1/kc2".to_string(),
                name: "Commas, quotes \"inside\"".to_string(),
                reasoning: "Punctuation must survive the trip.".to_string(),
                source_problem_id: None,
                abstraction_level: Some(50),
            },
        ]
    }

    #[test]
    fn kc_set_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kcs.csv");
        let kcs = sample_kcs();
        save_kc_set(&path, &kcs).unwrap();
        assert_eq!(load_kc_set(&path).unwrap(), kcs);
    }

    #[test]
    fn q_matrix_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.csv");
        let q = QMatrix {
            problems: vec!["p1".to_string(), "p2".to_string()],
            kcs: vec!["Loops, nested".to_string(), "Strings".to_string()],
            incidence: vec![vec![1, 0], vec![1, 1]],
        };
        save_q_matrix(&path, &q).unwrap();
        assert_eq!(load_q_matrix(&path).unwrap(), q);
    }

    #[test]
    fn q_matrix_with_bad_entry_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.csv");
        std::fs::write(&path, "problem_id,KC A\np1,2\n").unwrap();
        let err = load_q_matrix(&path).unwrap_err();
        assert!(err.to_string().contains("not 0 or 1"), "got {err}");
    }

    #[test]
    fn clusters_round_trip_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clusters.json");
        let clusters = vec![KCCluster {
            cluster_id: "L2-c000".to_string(),
            member_kc_ids: ["p1/kc1".to_string(), "p1/kc2".to_string()]
                .into_iter()
                .collect(),
            label: "Loop iteration".to_string(),
            label_origin: Some(LabelOrigin::Summary),
        }];
        save_clusters(&path, &clusters).unwrap();
        assert_eq!(load_clusters(&path).unwrap(), clusters);
    }

    #[test]
    fn ontology_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ontology.json");
        let forest = vec![OntologyNode {
            label: "Control flow".to_string(),
            abstraction_level: 2,
            children: vec![OntologyNode {
                label: "Loops".to_string(),
                abstraction_level: 4,
                children: Vec::new(),
            }],
        }];
        save_ontology(&path, &forest).unwrap();
        assert_eq!(load_ontology(&path).unwrap(), forest);
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let kcs = sample_kcs();
        save_kc_set(&a, &kcs).unwrap();
        save_kc_set(&b, &kcs).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
