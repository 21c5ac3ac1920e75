//! The pipeline stages behind the subcommands.
//!
//! Every stage follows the same shape: acquire the run-directory lock,
//! check prerequisites against the manifest, read its input artifacts,
//! write its output artifacts atomically, and record both sides with
//! digests. Artifacts never contain wall-clock values, so a stage re-run
//! with identical inputs is byte-identical under the mock provider.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kcgen_core::curves::{
    build_observations, collect_error_labels, empirical_curve, fit_pfa, mann_kendall_trend,
    predicted_curve, weighted_r2, write_curve_csv, write_pfa_summary_csv, LearningCurve, PfaFit,
    Trend,
};
use kcgen_core::data::io::{load_dataset, save_dataset, DatasetFormat};
use kcgen_core::data::{filter_first_submissions, make_splits, Dataset, DatasetSplit};
use kcgen_core::embed::{OfflineCodeEmbedder, OfflineTextEmbedder, OFFLINE_DIMENSION};
use kcgen_core::eval::{auc, codebleu, f1_and_accuracy};
use kcgen_core::hash::mix_seed;
use kcgen_core::kt::{
    load_checkpoint, mastery_report, prediction_dump, save_checkpoint, train, write_atomic,
    write_mastery_csv, write_prediction_csv, BackboneConfig, baseline_predict, BaselineKind,
    CheckpointMeta, EpochLog, KcgenKt, PredictionRecord, TinyTransformer, Tokenizer,
};
use kcgen_core::llm::{ChatClient, ChatProvider, DiskCache, HttpProvider, MockProvider};
use kcgen_core::pipeline::artifacts::{
    load_clusters, load_kc_set, load_q_matrix, save_clusters, save_kc_set, save_ontology,
    save_q_matrix,
};
use kcgen_core::pipeline::{
    build_ontology, build_q_matrix, cluster_and_label, cluster_kcs, cluster_member_names,
    collect_few_shot_examples, correct_submissions_for, generate_initial_kcs, label_cluster,
    select_representative_solutions, KCCluster, KnowledgeComponent, QMatrix,
};
use kcgen_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{CurveStudents, ProviderKind, RunConfig};
use crate::manifest::{dir_digests, file_digest, RunManifest, StageLock};

pub const DATASET_DIR: &str = "artifacts/dataset";
pub const SPLITS: &str = "artifacts/splits.json";
pub const KCS: &str = "artifacts/kcs.csv";
pub const GEN_KCS_REPORT: &str = "artifacts/gen-kcs-report.json";
pub const CLUSTERS: &str = "artifacts/clusters.json";
pub const CLUSTERS_LABELED: &str = "artifacts/clusters-labeled.json";
pub const QMATRIX: &str = "artifacts/qmatrix.csv";
pub const ONTOLOGY: &str = "artifacts/ontology.json";
pub const ONTOLOGY_LEVELS: &str = "artifacts/ontology-levels.json";
pub const MODEL_DIR: &str = "artifacts/model";
pub const TRAINING_LOG: &str = "artifacts/training-log.json";
pub const METRICS: &str = "artifacts/metrics.json";
pub const PREDICTIONS: &str = "artifacts/predictions.csv";
pub const MASTERY: &str = "artifacts/mastery.csv";
pub const CURVES_DIR: &str = "artifacts/curves";
pub const PFA_SUMMARY: &str = "artifacts/pfa-summary.csv";
pub const CURVES_SUMMARY: &str = "artifacts/curves-summary.json";
pub const REPORT: &str = "artifacts/report.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    GenKcs,
    Cluster,
    Label,
    Qmatrix,
    Ontology,
    Train,
    Evaluate,
    Curves,
    Report,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::GenKcs => "gen-kcs",
            Stage::Cluster => "cluster",
            Stage::Label => "label",
            Stage::Qmatrix => "qmatrix",
            Stage::Ontology => "ontology",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Curves => "curves",
            Stage::Report => "report",
        }
    }

    fn prerequisites(&self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[],
            Stage::GenKcs => &["ingest"],
            Stage::Cluster => &["gen-kcs"],
            Stage::Label => &["cluster"],
            Stage::Qmatrix => &["gen-kcs", "label"],
            Stage::Ontology => &["gen-kcs"],
            Stage::Train => &["ingest", "qmatrix"],
            Stage::Evaluate => &["ingest", "qmatrix", "train"],
            Stage::Curves => &["ingest", "qmatrix", "train"],
            Stage::Report => &["gen-kcs", "train", "evaluate", "curves"],
        }
    }
}

type StageIo = (BTreeMap<String, String>, BTreeMap<String, String>);

pub fn run_stage(config: &RunConfig, stage: Stage) -> Result<()> {
    let run_dir = config.run.dir.clone();
    let _lock = StageLock::acquire(&run_dir)?;
    let config_digest = config.digest()?;
    let mut manifest = if stage == Stage::Ingest {
        match RunManifest::load(&run_dir)? {
            Some(existing) if existing.config_digest == config_digest => existing,
            Some(_) => {
                log::warn!("config changed since the last ingest; starting the manifest over");
                RunManifest::new(&config.run.run_id, &config_digest, config.seeds())
            }
            None => RunManifest::new(&config.run.run_id, &config_digest, config.seeds()),
        }
    } else {
        let manifest = RunManifest::load_required(&run_dir, stage.name())?;
        if manifest.config_digest != config_digest {
            return Err(Error::domain(
                "the config differs from the one this run directory was ingested with; \
                 re-run `ingest` here or use a fresh run directory",
            ));
        }
        manifest
    };
    for required in stage.prerequisites() {
        manifest.require_stage(&run_dir, stage.name(), required)?;
    }

    let started = Instant::now();
    let (inputs, outputs) = match stage {
        Stage::Ingest => stage_ingest(config, &run_dir)?,
        Stage::GenKcs => stage_gen_kcs(config, &run_dir, &mut manifest)?,
        Stage::Cluster => stage_cluster(config, &run_dir)?,
        Stage::Label => stage_label(config, &run_dir, &mut manifest)?,
        Stage::Qmatrix => stage_qmatrix(config, &run_dir)?,
        Stage::Ontology => stage_ontology(config, &run_dir, &mut manifest)?,
        Stage::Train => stage_train(config, &run_dir)?,
        Stage::Evaluate => stage_evaluate(config, &run_dir)?,
        Stage::Curves => stage_curves(config, &run_dir, &mut manifest)?,
        Stage::Report => stage_report(config, &run_dir, &manifest)?,
    };
    let n_outputs = outputs.len();
    manifest.record_stage(
        stage.name(),
        started.elapsed().as_millis() as u64,
        inputs,
        outputs,
    );
    manifest.save(&run_dir)?;
    log::info!(
        "stage {} complete: {} artifact file(s) in {} ms; the manifest lists {}",
        stage.name(),
        n_outputs,
        started.elapsed().as_millis(),
        manifest.artifact_count()
    );
    Ok(())
}

fn stage_ingest(config: &RunConfig, run_dir: &Path) -> Result<StageIo> {
    let source = &config.data.dataset_dir;
    let mut dataset = load_dataset(source, DatasetFormat::InteractionLog)?;
    if config.data.first_submissions_only {
        dataset.sequences = filter_first_submissions(&dataset.sequences);
        dataset.validate()?;
    }
    let splits = make_splits(
        &dataset.sequences,
        config.split.n_splits,
        config.split.ratios(),
        config.split_seed(),
    )?;
    if config.split.index >= splits.len() {
        return Err(Error::domain(format!(
            "split.index {} is out of range for {} split(s)",
            config.split.index,
            splits.len()
        )));
    }

    let dataset_dir = run_dir.join(DATASET_DIR);
    replace_dir(&dataset_dir, |tmp| save_dataset(&dataset, tmp))?;
    write_json(&run_dir.join(SPLITS), &splits)?;

    let mut inputs = BTreeMap::new();
    for name in ["problems.csv", "interactions.csv"] {
        let path = source.join(name);
        inputs.insert(path.display().to_string(), file_digest(&path)?);
    }
    let mut outputs = dir_digests(run_dir, &dataset_dir)?;
    outputs.insert(SPLITS.to_string(), file_digest(&run_dir.join(SPLITS))?);
    log::info!(
        "ingested {} problems, {} students, {} submissions",
        dataset.problems.len(),
        dataset.sequences.len(),
        dataset.submission_count()
    );
    Ok((inputs, outputs))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenKcsReport {
    pub n_kcs: usize,
    pub skipped_problems: Vec<String>,
    pub flagged_problems: Vec<String>,
}

fn stage_gen_kcs(config: &RunConfig, run_dir: &Path, manifest: &mut RunManifest) -> Result<StageIo> {
    let dataset = load_run_dataset(run_dir)?;
    let client = build_client(config, run_dir)?;
    record_provider(manifest, config, &client);
    let pcfg = config.pipeline_config();
    let code_embedder = OfflineCodeEmbedder;

    let few_shot = collect_few_shot_examples(&dataset, &client, &pcfg)?;
    let mut kcs: Vec<KnowledgeComponent> = Vec::new();
    let mut skipped_problems = Vec::new();
    let mut flagged_problems = Vec::new();
    for problem in &dataset.problems {
        let correct = correct_submissions_for(&dataset, &problem.problem_id);
        if correct.is_empty() {
            log::warn!(
                "skipping problem {}: no correct submissions",
                problem.problem_id
            );
            skipped_problems.push(problem.problem_id.clone());
            continue;
        }
        let representatives = select_representative_solutions(
            &problem.problem_id,
            &correct,
            pcfg.representatives_per_problem,
            &code_embedder,
            pcfg.seed,
        )?;
        match generate_initial_kcs(
            &client,
            &problem.problem_id,
            &problem.statement,
            &representatives,
            &few_shot,
            &pcfg,
        ) {
            Ok(generated) => kcs.extend(generated),
            Err(Error::StructuredOutput { message, .. }) => {
                log::warn!(
                    "flagging problem {}: KC generation failed ({message})",
                    problem.problem_id
                );
                flagged_problems.push(problem.problem_id.clone());
            }
            Err(other) => return Err(other),
        }
    }
    if kcs.is_empty() {
        return Err(Error::domain(
            "KC generation produced no knowledge components for any problem",
        ));
    }

    atomic_core_save(&run_dir.join(KCS), |tmp| save_kc_set(tmp, &kcs))?;
    let report = GenKcsReport {
        n_kcs: kcs.len(),
        skipped_problems,
        flagged_problems,
    };
    write_json(&run_dir.join(GEN_KCS_REPORT), &report)?;

    let inputs = digest_rel(run_dir, &[SPLITS])?
        .into_iter()
        .chain(dir_digests(run_dir, &run_dir.join(DATASET_DIR))?)
        .collect();
    let outputs = digest_rel(run_dir, &[KCS, GEN_KCS_REPORT])?;
    log::info!("generated {} initial KCs", report.n_kcs);
    Ok((inputs, outputs))
}

fn stage_cluster(config: &RunConfig, run_dir: &Path) -> Result<StageIo> {
    let kcs = load_kc_set(&run_dir.join(KCS))?;
    let clusters = cluster_kcs(&kcs, config.pipeline.n_clusters, &OfflineTextEmbedder)?;
    atomic_core_save(&run_dir.join(CLUSTERS), |tmp| save_clusters(tmp, &clusters))?;
    log::info!(
        "clustered {} KCs into {} clusters",
        kcs.len(),
        clusters.len()
    );
    Ok((
        digest_rel(run_dir, &[KCS])?,
        digest_rel(run_dir, &[CLUSTERS])?,
    ))
}

fn stage_label(config: &RunConfig, run_dir: &Path, manifest: &mut RunManifest) -> Result<StageIo> {
    let kcs = load_kc_set(&run_dir.join(KCS))?;
    let mut clusters = load_clusters(&run_dir.join(CLUSTERS))?;
    let client = build_client(config, run_dir)?;
    record_provider(manifest, config, &client);
    let pcfg = config.pipeline_config();
    for cluster in &mut clusters {
        let names = cluster_member_names(cluster, &kcs);
        label_cluster(&client, cluster, &names, &pcfg)?;
    }
    atomic_core_save(&run_dir.join(CLUSTERS_LABELED), |tmp| {
        save_clusters(tmp, &clusters)
    })?;
    log::info!("labeled {} clusters", clusters.len());
    Ok((
        digest_rel(run_dir, &[KCS, CLUSTERS])?,
        digest_rel(run_dir, &[CLUSTERS_LABELED])?,
    ))
}

fn stage_qmatrix(_config: &RunConfig, run_dir: &Path) -> Result<StageIo> {
    let kcs = load_kc_set(&run_dir.join(KCS))?;
    let clusters = load_clusters(&run_dir.join(CLUSTERS_LABELED))?;
    let mut problem_kcs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for kc in &kcs {
        if let Some(problem_id) = &kc.source_problem_id {
            problem_kcs
                .entry(problem_id.clone())
                .or_default()
                .push(kc.kc_id.clone());
        }
    }
    let q = build_q_matrix(&problem_kcs, &clusters)?;
    atomic_core_save(&run_dir.join(QMATRIX), |tmp| save_q_matrix(tmp, &q))?;
    log::info!(
        "built a {} problem x {} KC Q-matrix",
        q.problems.len(),
        q.kcs.len()
    );
    Ok((
        digest_rel(run_dir, &[KCS, CLUSTERS_LABELED])?,
        digest_rel(run_dir, &[QMATRIX])?,
    ))
}

fn stage_ontology(
    config: &RunConfig,
    run_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<StageIo> {
    let mut levels = config.pipeline.ontology_levels.clone();
    levels.sort_unstable();
    levels.dedup();
    if levels.is_empty() {
        return Err(Error::domain(
            "pipeline.ontology_levels is empty; list the cluster counts to build the ontology over",
        ));
    }
    let kcs = load_kc_set(&run_dir.join(KCS))?;
    let client = build_client(config, run_dir)?;
    record_provider(manifest, config, &client);
    let pcfg = config.pipeline_config();
    let embedder = OfflineTextEmbedder;
    let mut labeled_levels: Vec<Vec<KCCluster>> = Vec::with_capacity(levels.len());
    for &level in &levels {
        labeled_levels.push(cluster_and_label(&kcs, level, &embedder, &client, &pcfg)?);
    }
    let forest = build_ontology(&labeled_levels, &embedder)?;
    atomic_core_save(&run_dir.join(ONTOLOGY), |tmp| save_ontology(tmp, &forest))?;
    write_json(&run_dir.join(ONTOLOGY_LEVELS), &labeled_levels)?;
    log::info!(
        "built an ontology over levels {:?} with {} roots",
        levels,
        forest.len()
    );
    Ok((
        digest_rel(run_dir, &[KCS])?,
        digest_rel(run_dir, &[ONTOLOGY, ONTOLOGY_LEVELS])?,
    ))
}

fn stage_train(config: &RunConfig, run_dir: &Path) -> Result<StageIo> {
    let dataset = load_run_dataset(run_dir)?;
    let split = load_split(config, run_dir)?;
    let q = load_q_matrix(&run_dir.join(QMATRIX))?;

    let tokenizer = tokenizer_for(&dataset, &q);
    let backbone = TinyTransformer::new(
        backbone_config(config),
        tokenizer,
        mix_seed(config.kt_seed(), 1),
    )?;
    let mut model = KcgenKt::new(
        backbone,
        config.kt.knowledge_dim,
        q.kcs.len(),
        OFFLINE_DIMENSION,
        config.kt_seed(),
    )?;

    let checkpoint_dir = config
        .train
        .epoch_checkpoints
        .then(|| run_dir.join("artifacts/checkpoints"));
    let tcfg = config.training_config(checkpoint_dir.clone());
    let logs = train(&mut model, &dataset, &split, &q, &OfflineCodeEmbedder, &tcfg)?;

    let meta = CheckpointMeta {
        epoch: logs.len(),
        training_config_digest: kcgen_core::hash::digest_of(&config.train)?,
        q_matrix_digest: kcgen_core::hash::digest_of(&q)?,
    };
    let model_dir = run_dir.join(MODEL_DIR);
    save_checkpoint(&model_dir, &model, &meta)?;
    write_json(&run_dir.join(TRAINING_LOG), &logs)?;

    let mut inputs = digest_rel(run_dir, &[SPLITS, QMATRIX])?;
    inputs.extend(dir_digests(run_dir, &run_dir.join(DATASET_DIR))?);
    let mut outputs = dir_digests(run_dir, &model_dir)?;
    outputs.insert(
        TRAINING_LOG.to_string(),
        file_digest(&run_dir.join(TRAINING_LOG))?,
    );
    if let Some(dir) = checkpoint_dir {
        outputs.extend(dir_digests(run_dir, &dir)?);
    }
    if let Some(last) = logs.last() {
        log::info!(
            "trained {} epoch(s); final total loss {:.6}",
            logs.len(),
            last.losses.total
        );
    }
    Ok((inputs, outputs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricBlock {
    pub auc: Option<f64>,
    pub f1: f64,
    pub accuracy: f64,
    pub codebleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsArtifact {
    pub split_index: usize,
    pub n_test_students: usize,
    pub n_predictions: usize,
    pub model: MetricBlock,
    pub baselines: BTreeMap<String, MetricBlock>,
}

fn stage_evaluate(config: &RunConfig, run_dir: &Path) -> Result<StageIo> {
    let dataset = load_run_dataset(run_dir)?;
    let split = load_split(config, run_dir)?;
    let q = load_q_matrix(&run_dir.join(QMATRIX))?;
    let (model, _meta) = load_checkpoint::<TinyTransformer>(&run_dir.join(MODEL_DIR))?;
    let embedder = OfflineCodeEmbedder;

    let test_students: Vec<&str> = split.test.iter().map(String::as_str).collect();
    if test_students.is_empty() {
        return Err(Error::domain("the test partition is empty"));
    }
    let predictions = prediction_dump(
        &model,
        &dataset,
        &test_students,
        &q,
        &embedder,
        config.eval.max_code_tokens,
    )?;
    write_prediction_csv(&run_dir.join(PREDICTIONS), &predictions)?;

    let scores: Vec<f64> = predictions.iter().map(|p| p.a_hat).collect();
    let labels: Vec<u8> = predictions.iter().map(|p| p.correct as u8).collect();
    let mut model_block = metric_block(&scores, &labels)?;
    model_block.codebleu = Some(mean_codebleu(config, &predictions)?);

    let queries: Vec<&str> = predictions.iter().map(|p| p.problem_id.as_str()).collect();
    let mut baselines = BTreeMap::new();
    for (name, kind, seed) in [
        ("random", BaselineKind::Random, Some(config.eval_seed())),
        ("majority", BaselineKind::Majority, None),
    ] {
        let base_scores = baseline_predict(kind, &dataset, &split.train, &queries, seed)?;
        baselines.insert(name.to_string(), metric_block(&base_scores, &labels)?);
    }

    let metrics = MetricsArtifact {
        split_index: split.split_index,
        n_test_students: test_students.len(),
        n_predictions: predictions.len(),
        model: model_block,
        baselines,
    };
    write_json(&run_dir.join(METRICS), &metrics)?;

    let all_students = split.all_students();
    let all_refs: Vec<&str> = all_students.iter().map(String::as_str).collect();
    let mastery = mastery_report(&model, &dataset, &all_refs, &q, &embedder)?;
    write_mastery_csv(&run_dir.join(MASTERY), &mastery)?;

    let mut inputs = digest_rel(run_dir, &[SPLITS, QMATRIX])?;
    inputs.extend(dir_digests(run_dir, &run_dir.join(DATASET_DIR))?);
    inputs.extend(dir_digests(run_dir, &run_dir.join(MODEL_DIR))?);
    let outputs = digest_rel(run_dir, &[METRICS, PREDICTIONS, MASTERY])?;
    log::info!(
        "evaluated {} predictions from {} test students (AUC {})",
        metrics.n_predictions,
        metrics.n_test_students,
        metrics
            .model
            .auc
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "undefined".to_string())
    );
    Ok((inputs, outputs))
}

fn metric_block(scores: &[f64], labels: &[u8]) -> Result<MetricBlock> {
    let auc_value = match auc(scores, labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(reason)) => {
            log::warn!("AUC undefined: {reason}");
            None
        }
        Err(other) => return Err(other),
    };
    let (f1, accuracy) = f1_and_accuracy(scores, labels, 0.5)?;
    Ok(MetricBlock {
        auc: auc_value,
        f1,
        accuracy,
        codebleu: None,
    })
}

fn mean_codebleu(config: &RunConfig, predictions: &[PredictionRecord]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::domain("no predictions to score"));
    }
    let mut sum = 0.0;
    for p in predictions {
        sum += codebleu(
            &p.generated_code,
            &p.ground_truth_code,
            config.data.language,
            config.eval.codebleu_weights,
        )?
        .score;
    }
    Ok(sum / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KcCurveSummary {
    pub kc: String,
    pub file: String,
    pub n_observations: usize,
    pub n_points: usize,
    pub trend: Option<Trend>,
    pub pfa: Option<PfaFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvesSummary {
    pub n_observations: usize,
    pub weighted_r2: Option<f64>,
    pub kcs: Vec<KcCurveSummary>,
}

fn stage_curves(config: &RunConfig, run_dir: &Path, manifest: &mut RunManifest) -> Result<StageIo> {
    let dataset = load_run_dataset(run_dir)?;
    let split = load_split(config, run_dir)?;
    let q = load_q_matrix(&run_dir.join(QMATRIX))?;
    let (model, _meta) = load_checkpoint::<TinyTransformer>(&run_dir.join(MODEL_DIR))?;
    let client = build_client(config, run_dir)?;
    record_provider(manifest, config, &client);
    let embedder = OfflineCodeEmbedder;

    let student_set = match config.curves.students {
        CurveStudents::Train => split.train.clone(),
        CurveStudents::All => split.all_students(),
    };
    let students: Vec<&str> = student_set.iter().map(String::as_str).collect();
    let labels = collect_error_labels(
        &client,
        &dataset,
        &q,
        &students,
        &config.llm.model_id,
        config.curves_seed(),
    )?;
    let observations = build_observations(&dataset, &q, &students, &labels)?;

    let curves_dir = run_dir.join(CURVES_DIR);
    fs::create_dir_all(&curves_dir)?;
    let ccfg = config.curves.to_core();
    let mut summaries = Vec::with_capacity(q.kcs.len());
    let mut fits: Vec<PfaFit> = Vec::new();
    for (index, kc) in q.kcs.iter().enumerate() {
        let n_observations = observations.iter().filter(|o| o.kc == *kc).count();
        let points = match empirical_curve(&observations, kc, ccfg.min_students_per_attempt) {
            Ok(points) => points,
            Err(Error::Domain(reason)) => {
                log::warn!("skipping curve for KC {kc:?}: {reason}");
                summaries.push(KcCurveSummary {
                    kc: kc.clone(),
                    file: String::new(),
                    n_observations,
                    n_points: 0,
                    trend: None,
                    pfa: None,
                });
                continue;
            }
            Err(other) => return Err(other),
        };
        let predicted = predicted_curve(
            &model,
            &dataset,
            &students,
            &q,
            kc,
            &embedder,
            ccfg.min_students_per_attempt,
        )?;
        let file = format!("{CURVES_DIR}/kc-{index:02}-{}.csv", slug(kc));
        let curve = LearningCurve {
            kc: kc.clone(),
            points: points.clone(),
            predicted: Some(predicted),
        };
        write_curve_csv(&run_dir.join(&file), &curve)?;

        let rates: Vec<f64> = points.iter().map(|p| p.error_rate).collect();
        let trend = if rates.len() >= 3 {
            Some(mann_kendall_trend(&rates, config.curves.trend_alpha)?)
        } else {
            None
        };
        let pfa = match fit_pfa(&observations, kc, &ccfg) {
            Ok(fit) => {
                fits.push(fit.clone());
                Some(fit)
            }
            Err(Error::Domain(reason)) => {
                log::warn!("PFA fit skipped for KC {kc:?}: {reason}");
                None
            }
            Err(other) => return Err(other),
        };
        summaries.push(KcCurveSummary {
            kc: kc.clone(),
            file,
            n_observations,
            n_points: points.len(),
            trend,
            pfa,
        });
    }

    write_pfa_summary_csv(&run_dir.join(PFA_SUMMARY), &fits)?;
    let weighted = match weighted_r2(&fits) {
        Ok(v) => Some(v),
        Err(Error::Domain(reason)) => {
            log::warn!("weighted R^2 unavailable: {reason}");
            None
        }
        Err(other) => return Err(other),
    };
    let summary = CurvesSummary {
        n_observations: observations.len(),
        weighted_r2: weighted,
        kcs: summaries,
    };
    write_json(&run_dir.join(CURVES_SUMMARY), &summary)?;

    let mut inputs = digest_rel(run_dir, &[SPLITS, QMATRIX])?;
    inputs.extend(dir_digests(run_dir, &run_dir.join(DATASET_DIR))?);
    inputs.extend(dir_digests(run_dir, &run_dir.join(MODEL_DIR))?);
    let mut outputs = dir_digests(run_dir, &curves_dir)?;
    outputs.extend(digest_rel(run_dir, &[PFA_SUMMARY, CURVES_SUMMARY])?);
    log::info!(
        "fitted {} of {} KCs (weighted R^2 {})",
        fits.len(),
        q.kcs.len(),
        summary
            .weighted_r2
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".to_string())
    );
    Ok((inputs, outputs))
}

fn stage_report(config: &RunConfig, run_dir: &Path, manifest: &RunManifest) -> Result<StageIo> {
    let dataset = load_run_dataset(run_dir)?;
    let q = load_q_matrix(&run_dir.join(QMATRIX))?;
    let gen_report: GenKcsReport = read_json(&run_dir.join(GEN_KCS_REPORT))?;
    let logs: Vec<EpochLog> = read_json(&run_dir.join(TRAINING_LOG))?;
    let metrics: MetricsArtifact = read_json(&run_dir.join(METRICS))?;
    let curves: CurvesSummary = read_json(&run_dir.join(CURVES_SUMMARY))?;

    let text = render_report(
        config,
        manifest,
        &dataset,
        &q,
        &gen_report,
        &logs,
        &metrics,
        &curves,
    );
    write_atomic(&run_dir.join(REPORT), text.as_bytes())?;

    let inputs = digest_rel(
        run_dir,
        &[QMATRIX, GEN_KCS_REPORT, TRAINING_LOG, METRICS, CURVES_SUMMARY],
    )?;
    let outputs = digest_rel(run_dir, &[REPORT])?;
    log::info!("wrote {}", REPORT);
    Ok((inputs, outputs))
}

#[allow(clippy::too_many_arguments)]
fn render_report(
    config: &RunConfig,
    manifest: &RunManifest,
    dataset: &Dataset,
    q: &QMatrix,
    gen_report: &GenKcsReport,
    logs: &[EpochLog],
    metrics: &MetricsArtifact,
    curves: &CurvesSummary,
) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "# Run report: {}\n", manifest.run_id);
    let _ = writeln!(out, "- config digest: `{}`", manifest.config_digest);
    let _ = writeln!(
        out,
        "- provider: {} (model `{}`)",
        manifest.provider_id.as_deref().unwrap_or("unknown"),
        manifest.model_id.as_deref().unwrap_or("unknown"),
    );
    let seeds = manifest
        .seeds
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ");
    let _ = writeln!(out, "- seeds: {seeds}\n");

    let _ = writeln!(out, "## Dataset\n");
    let _ = writeln!(
        out,
        "{} problems, {} students, {} submissions.\n",
        dataset.problems.len(),
        dataset.sequences.len(),
        dataset.submission_count()
    );

    let _ = writeln!(out, "## Knowledge components\n");
    let _ = writeln!(
        out,
        "{} initial KCs over {} problems ({} skipped, {} flagged).",
        gen_report.n_kcs,
        dataset.problems.len() - gen_report.skipped_problems.len() - gen_report.flagged_problems.len(),
        gen_report.skipped_problems.len(),
        gen_report.flagged_problems.len()
    );
    let ones: usize = q
        .incidence
        .iter()
        .map(|row| row.iter().filter(|&&v| v == 1).count())
        .sum();
    let density = ones as f64 / (q.problems.len() * q.kcs.len()) as f64;
    let _ = writeln!(
        out,
        "Q-matrix: {} problems x {} KCs, density {:.3}.\n",
        q.problems.len(),
        q.kcs.len(),
        density
    );

    let _ = writeln!(out, "## Training\n");
    if let Some(last) = logs.last() {
        let _ = writeln!(
            out,
            "{} epoch(s) at lambda = {}; final losses: total {:.6} \
             (codegen {:.6}, correctness {:.6}, kc {:.6}).\n",
            logs.len(),
            config.train.lambda,
            last.losses.total,
            last.losses.l_codegen,
            last.losses.l_corrpred,
            last.losses.l_kc
        );
    }

    let _ = writeln!(out, "## Evaluation (test partition of split {})\n", metrics.split_index);
    let _ = writeln!(
        out,
        "{} predictions from {} students.\n",
        metrics.n_predictions, metrics.n_test_students
    );
    let _ = writeln!(out, "| metric | model | random | majority |");
    let _ = writeln!(out, "|---|---|---|---|");
    let fmt_opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".to_string());
    let empty = MetricBlock::default();
    let random = metrics.baselines.get("random").unwrap_or(&empty);
    let majority = metrics.baselines.get("majority").unwrap_or(&empty);
    let _ = writeln!(
        out,
        "| AUC | {} | {} | {} |",
        fmt_opt(metrics.model.auc),
        fmt_opt(random.auc),
        fmt_opt(majority.auc)
    );
    let _ = writeln!(
        out,
        "| F1 | {:.4} | {:.4} | {:.4} |",
        metrics.model.f1, random.f1, majority.f1
    );
    let _ = writeln!(
        out,
        "| accuracy | {:.4} | {:.4} | {:.4} |",
        metrics.model.accuracy, random.accuracy, majority.accuracy
    );
    let _ = writeln!(out, "| CodeBLEU | {} | n/a | n/a |\n", fmt_opt(metrics.model.codebleu));

    let _ = writeln!(out, "## Learning curves\n");
    let fitted = curves.kcs.iter().filter(|k| k.pfa.is_some()).count();
    let _ = writeln!(
        out,
        "{} observations; {} of {} KCs fitted; weighted R^2 {}.\n",
        curves.n_observations,
        fitted,
        curves.kcs.len(),
        fmt_opt(curves.weighted_r2)
    );
    let _ = writeln!(out, "| KC | observations | points | PFA R^2 | trend |");
    let _ = writeln!(out, "|---|---|---|---|---|");
    for kc in &curves.kcs {
        let r2 = kc
            .pfa
            .as_ref()
            .map(|f| format!("{:.4}", f.r_squared))
            .unwrap_or_else(|| "n/a".to_string());
        let trend = match kc.trend {
            Some(Trend::Decreasing) => "decreasing",
            Some(Trend::Increasing) => "increasing",
            Some(Trend::NoTrend) => "none",
            None => "n/a",
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            kc.kc, kc.n_observations, kc.n_points, r2, trend
        );
    }
    out
}

pub fn build_client(config: &RunConfig, run_dir: &Path) -> Result<ChatClient> {
    let provider: Box<dyn ChatProvider> = match config.llm.provider {
        ProviderKind::Mock => Box::new(MockProvider::new(config.llm_seed())),
        ProviderKind::Http => Box::new(HttpProvider::new(config.http_config())?),
    };
    let mut client = ChatClient::new(provider);
    if config.llm.cache {
        client = client.with_cache(DiskCache::new(run_dir.join("cache"))?);
    }
    Ok(client)
}

fn record_provider(manifest: &mut RunManifest, config: &RunConfig, client: &ChatClient) {
    manifest.provider_id = Some(client.provider_id().to_string());
    manifest.model_id = Some(config.llm.model_id.clone());
}

pub fn load_run_dataset(run_dir: &Path) -> Result<Dataset> {
    load_dataset(&run_dir.join(DATASET_DIR), DatasetFormat::InteractionLog)
}

pub fn load_split(config: &RunConfig, run_dir: &Path) -> Result<DatasetSplit> {
    let splits: Vec<DatasetSplit> = read_json(&run_dir.join(SPLITS))?;
    splits
        .into_iter()
        .nth(config.split.index)
        .ok_or_else(|| {
            Error::domain(format!(
                "split.index {} is out of range; re-run ingest with a larger split.n_splits",
                config.split.index
            ))
        })
}

fn backbone_config(config: &RunConfig) -> BackboneConfig {
    config.kt.backbone.to_core()
}

/// Vocabulary over everything the model will ever tokenize: statements,
/// code, the prompt scaffold, KC labels, and the KC ordinals.
fn tokenizer_for(dataset: &Dataset, q: &QMatrix) -> Tokenizer {
    let mut corpus: Vec<String> = Vec::new();
    for p in &dataset.problems {
        corpus.push(p.statement.clone());
    }
    for s in &dataset.sequences {
        for sub in &s.submissions {
            corpus.push(sub.code.clone());
        }
    }
    corpus.push("question: . KC : . The student's mastery level on is: .".to_string());
    for kc in &q.kcs {
        corpus.push(kc.clone());
    }
    let max_kcs = q
        .incidence
        .iter()
        .map(|row| row.iter().filter(|&&v| v == 1).count())
        .max()
        .unwrap_or(1);
    corpus.push(
        (1..=max_kcs)
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    );
    Tokenizer::from_corpus(corpus.iter().map(String::as_str))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Run a saver against a sibling temp path, then rename over the target.
fn atomic_core_save(path: &Path, save: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = temp_sibling(path)?;
    save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Populate a directory artifact under a temp name, then swap it in.
fn replace_dir(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(parent) = dir.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = temp_sibling(dir)?;
    fill(&tmp)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

fn temp_sibling(path: &Path) -> Result<PathBuf> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::domain(format!("path {} has no file name", path.display())))?;
    let mut tmp = path.to_path_buf();
    tmp.set_file_name(format!("{}.tmp", name.to_string_lossy()));
    if tmp.exists() {
        if tmp.is_dir() {
            fs::remove_dir_all(&tmp)?;
        } else {
            fs::remove_file(&tmp)?;
        }
    }
    Ok(tmp)
}

fn digest_rel(run_dir: &Path, rels: &[&str]) -> Result<BTreeMap<String, String>> {
    rels.iter()
        .map(|rel| Ok((rel.to_string(), file_digest(&run_dir.join(rel))?)))
        .collect()
}

/// Filesystem-safe slug of a KC label.
pub fn slug(label: &str) -> String {
    let mut out = String::with_capacity(label.len());
    let mut last_dash = true;
    for c in label.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
            last_dash = false;
        } else if !last_dash {
            out.push('-');
            last_dash = true;
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    if out.is_empty() {
        out.push_str("kc");
    }
    out
}
