//! Plot-data emission: tabular files ready for any plotting tool.
//!
//! Each kind reads finished run artifacts and writes CSV under
//! `<run dir>/plots`, recorded in the manifest like any stage output.
//! Columns:
//!
//! * learning-curves: `attempt, empirical, predicted, n` (one file per
//!   KC; `predicted` is empty where the model curve has no point);
//! * loss-curves: `epoch, l_codegen, l_corrpred, l_kc, lambda, total`,
//!   where total = lambda*(l_codegen+l_corrpred) + (1-lambda)*l_kc;
//! * mastery-heatmap: `timestep` plus one column per KC, Q-matrix column
//!   order, entries in (0, 1) (one file per student).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use kcgen_core::kt::{write_atomic, EpochLog, MasteryRecord};
use kcgen_core::pipeline::artifacts::load_q_matrix;
use kcgen_core::{Error, Result};
use serde::Deserialize;

use crate::config::RunConfig;
use crate::manifest::{file_digest, RunManifest, StageLock};
use crate::stages::{
    read_json, slug, CurvesSummary, CURVES_SUMMARY, MASTERY, QMATRIX, TRAINING_LOG,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    LearningCurves,
    LossCurves,
    MasteryHeatmap,
}

impl PlotKind {
    fn name(&self) -> &'static str {
        match self {
            PlotKind::LearningCurves => "learning-curves",
            PlotKind::LossCurves => "loss-curves",
            PlotKind::MasteryHeatmap => "mastery-heatmap",
        }
    }

    fn required_stage(&self) -> &'static str {
        match self {
            PlotKind::LearningCurves => "curves",
            PlotKind::LossCurves => "train",
            PlotKind::MasteryHeatmap => "evaluate",
        }
    }
}

pub fn emit_plot_data(
    config: &RunConfig,
    kind: PlotKind,
    kcs: Option<&[String]>,
    student: Option<&str>,
) -> Result<()> {
    let run_dir = config.run.dir.clone();
    let _lock = StageLock::acquire(&run_dir)?;
    let stage_name = format!("plot-{}", kind.name());
    let mut manifest = RunManifest::load_required(&run_dir, &stage_name)?;
    if manifest.config_digest != config.digest()? {
        return Err(Error::domain(
            "the config differs from the one this run directory was ingested with; \
             re-run `ingest` here or use a fresh run directory",
        ));
    }
    manifest.require_stage(&run_dir, &stage_name, kind.required_stage())?;

    let started = Instant::now();
    let (inputs, outputs) = match kind {
        PlotKind::LearningCurves => learning_curves(&run_dir, kcs)?,
        PlotKind::LossCurves => loss_curves(config, &run_dir)?,
        PlotKind::MasteryHeatmap => mastery_heatmap(&run_dir, student)?,
    };
    for rel in outputs.keys() {
        log::info!("wrote {rel}");
    }
    manifest.record_stage(
        &stage_name,
        started.elapsed().as_millis() as u64,
        inputs,
        outputs,
    );
    manifest.save(&run_dir)
}

type PlotIo = (BTreeMap<String, String>, BTreeMap<String, String>);

#[derive(Debug, Deserialize)]
struct CurveFileRow {
    attempt_index: usize,
    empirical_error_rate: f64,
    n_students: usize,
    predicted_error_rate: Option<f64>,
}

fn learning_curves(run_dir: &Path, kcs: Option<&[String]>) -> Result<PlotIo> {
    let summary: CurvesSummary = read_json(&run_dir.join(CURVES_SUMMARY))?;
    let with_curves: Vec<_> = summary.kcs.iter().filter(|k| k.n_points > 0).collect();
    let chosen: Vec<&crate::stages::KcCurveSummary> = match kcs {
        Some(requested) => requested
            .iter()
            .map(|label| {
                with_curves
                    .iter()
                    .copied()
                    .find(|entry| entry.kc == *label)
                    .ok_or_else(|| {
                        Error::domain(format!(
                            "no curve for KC {label:?}; available: {}",
                            with_curves
                                .iter()
                                .map(|e| format!("{:?}", e.kc))
                                .collect::<Vec<_>>()
                                .join(", ")
                        ))
                    })
            })
            .collect::<Result<_>>()?,
        None => with_curves.iter().copied().take(3).collect(),
    };
    if chosen.is_empty() {
        return Err(Error::domain(
            "the curves stage produced no plottable curves",
        ));
    }

    let mut inputs = BTreeMap::new();
    inputs.insert(
        CURVES_SUMMARY.to_string(),
        file_digest(&run_dir.join(CURVES_SUMMARY))?,
    );
    let mut outputs = BTreeMap::new();
    fs::create_dir_all(run_dir.join("plots"))?;
    for entry in chosen {
        let source = run_dir.join(&entry.file);
        inputs.insert(entry.file.clone(), file_digest(&source)?);
        let mut reader = csv::Reader::from_path(&source)?;
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(["attempt", "empirical", "predicted", "n"])?;
        for row in reader.deserialize() {
            let row: CurveFileRow = row?;
            writer.write_record([
                row.attempt_index.to_string(),
                row.empirical_error_rate.to_string(),
                row.predicted_error_rate
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
                row.n_students.to_string(),
            ])?;
        }
        let rel = format!("plots/learning-curve-{}.csv", slug(&entry.kc));
        write_csv(run_dir, &rel, writer)?;
        outputs.insert(rel.clone(), file_digest(&run_dir.join(&rel))?);
    }
    Ok((inputs, outputs))
}

fn loss_curves(config: &RunConfig, run_dir: &Path) -> Result<PlotIo> {
    let logs: Vec<EpochLog> = read_json(&run_dir.join(TRAINING_LOG))?;
    if logs.is_empty() {
        return Err(Error::domain("the training log holds no epochs"));
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["epoch", "l_codegen", "l_corrpred", "l_kc", "lambda", "total"])?;
    for log in &logs {
        writer.write_record([
            log.epoch.to_string(),
            log.losses.l_codegen.to_string(),
            log.losses.l_corrpred.to_string(),
            log.losses.l_kc.to_string(),
            config.train.lambda.to_string(),
            log.losses.total.to_string(),
        ])?;
    }
    let rel = "plots/loss-curves.csv".to_string();
    write_csv(run_dir, &rel, writer)?;
    let inputs = BTreeMap::from([(
        TRAINING_LOG.to_string(),
        file_digest(&run_dir.join(TRAINING_LOG))?,
    )]);
    let outputs = BTreeMap::from([(rel.clone(), file_digest(&run_dir.join(&rel))?)]);
    Ok((inputs, outputs))
}

fn mastery_heatmap(run_dir: &Path, student: Option<&str>) -> Result<PlotIo> {
    let q = load_q_matrix(&run_dir.join(QMATRIX))?;
    let mut reader = csv::Reader::from_path(run_dir.join(MASTERY))?;
    let records: Vec<MasteryRecord> = reader
        .deserialize()
        .collect::<std::result::Result<_, csv::Error>>()?;
    if records.is_empty() {
        return Err(Error::domain("mastery.csv holds no records"));
    }
    let student = match student {
        Some(id) => id.to_string(),
        None => records[0].student_id.clone(),
    };
    let mut grid: BTreeMap<usize, BTreeMap<&str, f64>> = BTreeMap::new();
    for record in records.iter().filter(|r| r.student_id == student) {
        grid.entry(record.timestep)
            .or_default()
            .insert(record.kc.as_str(), record.mastery);
    }
    if grid.is_empty() {
        return Err(Error::domain(format!(
            "student {student:?} has no mastery records"
        )));
    }

    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["timestep".to_string()];
    header.extend(q.kcs.iter().cloned());
    writer.write_record(&header)?;
    for (timestep, row) in &grid {
        let mut record = vec![timestep.to_string()];
        for kc in &q.kcs {
            let value = row.get(kc.as_str()).ok_or_else(|| {
                Error::integrity(format!(
                    "mastery.csv is missing KC {kc:?} at timestep {timestep} for {student:?}"
                ))
            })?;
            record.push(value.to_string());
        }
        writer.write_record(&record)?;
    }
    let rel = format!("plots/mastery-heatmap-{}.csv", slug(&student));
    write_csv(run_dir, &rel, writer)?;

    let inputs = BTreeMap::from([
        (QMATRIX.to_string(), file_digest(&run_dir.join(QMATRIX))?),
        (MASTERY.to_string(), file_digest(&run_dir.join(MASTERY))?),
    ]);
    let outputs = BTreeMap::from([(rel.clone(), file_digest(&run_dir.join(&rel))?)]);
    Ok((inputs, outputs))
}

fn write_csv(run_dir: &Path, rel: &str, writer: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::domain(format!("csv buffer: {e}")))?;
    let path = run_dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_atomic(&path, &bytes)
}
