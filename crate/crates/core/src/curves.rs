//! Learning-curve analysis: LLM-based per-KC error labeling of incorrect
//! submissions, empirical and model-predicted error curves by attempt
//! index, per-KC PFA fits, weighted R², and a Mann–Kendall trend test.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Problem, Submission};
use crate::embed::Embedder;
use crate::kt::checkpoint::write_atomic;
use crate::kt::{Backbone, KcgenKt, Tape};
use crate::llm::parse::parse_kc_error_json;
use crate::llm::{render_prompt, ChatClient, TemplateId};
use crate::pipeline::QMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KCObservation {
    pub student_id: String,
    pub kc: String,
    /// 1-based count of this student's attempts at this KC.
    pub attempt_index: usize,
    /// 1 when the submission contains an error on this KC.
    pub error: u8,
    pub prior_successes: usize,
    pub prior_failures: usize,
}

impl KCObservation {
    pub fn validate(&self) -> Result<()> {
        if self.error > 1 {
            return Err(Error::domain(format!(
                "error label must be 0 or 1, got {}",
                self.error
            )));
        }
        if self.attempt_index != self.prior_successes + self.prior_failures + 1 {
            return Err(Error::domain(format!(
                "attempt_index {} != prior_successes {} + prior_failures {} + 1",
                self.attempt_index, self.prior_successes, self.prior_failures
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub attempt_index: usize,
    pub error_rate: f64,
    pub n_students: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedPoint {
    pub attempt_index: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub kc: String,
    pub points: Vec<CurvePoint>,
    pub predicted: Option<Vec<PredictedPoint>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfaFit {
    pub kc: String,
    pub intercept: f64,
    pub success_weight: f64,
    pub failure_weight: f64,
    pub r_squared: f64,
    pub n_observations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    /// Minimum observations a KC needs before PFA fitting.
    pub min_observations: usize,
    /// Attempt indices with fewer students are excluded from curve plots
    /// and R².
    pub min_students_per_attempt: usize,
    /// L2 penalty keeping separable data fittable.
    pub ridge: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig {
            min_observations: 10,
            min_students_per_attempt: 5,
            ridge: 1e-4,
            max_iterations: 100,
            tolerance: 1e-10,
        }
    }
}

/// Error labels per submission, keyed by (student_id, order_index), each
/// mapping the problem's associated KCs to {0, 1}.
pub type ErrorLabels = BTreeMap<(String, u64), BTreeMap<String, u8>>;

/// Label one submission's errors on its associated KCs. Correct
/// submissions are labeled all-zero without an LLM call; incorrect ones
/// go through the error-labeling prompt.
pub fn label_kc_errors(
    client: &ChatClient,
    problem: &Problem,
    associated_kcs: &[String],
    submission: &Submission,
    provider_model_id: &str,
    seed: u64,
) -> Result<BTreeMap<String, u8>> {
    if associated_kcs.is_empty() {
        return Err(Error::domain(format!(
            "problem {} has no associated KCs to label",
            problem.problem_id
        )));
    }
    if submission.correct {
        return Ok(associated_kcs
            .iter()
            .map(|kc| (kc.clone(), 0))
            .collect());
    }
    let slots = BTreeMap::from([
        ("problem".to_string(), problem.statement.clone()),
        ("submission".to_string(), submission.code.clone()),
        (
            "kc_list".to_string(),
            associated_kcs
                .iter()
                .map(|kc| format!("{kc:?}"))
                .collect::<Vec<_>>()
                .join(", "),
        ),
    ]);
    let mut request = render_prompt(TemplateId::KcErrorLabel, &slots)?;
    request.provider_model_id = provider_model_id.to_string();
    request.seed = Some(seed);
    client.complete_structured(&request, |response| {
        parse_kc_error_json(response, associated_kcs)
    })
}

/// Label every submission of the given students. A structured-output
/// failure that survives the automatic retry drops that submission's
/// labels with a warning, so its observations are omitted downstream.
pub fn collect_error_labels(
    client: &ChatClient,
    dataset: &Dataset,
    q: &QMatrix,
    students: &[&str],
    provider_model_id: &str,
    seed: u64,
) -> Result<ErrorLabels> {
    let mut labels = ErrorLabels::new();
    for sequence in &dataset.sequences {
        if !students.contains(&sequence.student_id.as_str()) {
            continue;
        }
        for submission in &sequence.submissions {
            let problem = dataset.problem(&submission.problem_id).ok_or_else(|| {
                Error::integrity(format!("unknown problem {}", submission.problem_id))
            })?;
            let kcs = q.kc_labels_for_problem(&submission.problem_id)?;
            match label_kc_errors(client, problem, &kcs, submission, provider_model_id, seed) {
                Ok(map) => {
                    labels.insert((sequence.student_id.clone(), submission.order_index), map);
                }
                Err(Error::StructuredOutput { message, .. }) => {
                    log::warn!(
                        "dropping observations for student {} submission {} on problem {}: {message}",
                        sequence.student_id,
                        submission.order_index,
                        submission.problem_id
                    );
                }
                Err(other) => return Err(other),
            }
        }
    }
    Ok(labels)
}

/// Replay each student's sequence chronologically, emitting one
/// observation per associated KC per labeled submission. Attempt indices
/// and prior success/failure counters are per student per KC and count
/// labeled attempts only, so the counter invariant always holds.
pub fn build_observations(
    dataset: &Dataset,
    q: &QMatrix,
    students: &[&str],
    labels: &ErrorLabels,
) -> Result<Vec<KCObservation>> {
    let mut observations = Vec::new();
    for sequence in &dataset.sequences {
        if !students.contains(&sequence.student_id.as_str()) {
            continue;
        }
        let mut ordered: Vec<&Submission> = sequence.submissions.iter().collect();
        ordered.sort_by_key(|s| s.order_index);
        let mut counters: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for submission in ordered {
            let Some(label_map) = labels.get(&(sequence.student_id.clone(), submission.order_index))
            else {
                continue;
            };
            let kcs = q.kc_labels_for_problem(&submission.problem_id)?;
            for kc in &kcs {
                let error = *label_map.get(kc).ok_or_else(|| {
                    Error::integrity(format!(
                        "labels for student {} submission {} are missing KC {kc:?}",
                        sequence.student_id, submission.order_index
                    ))
                })?;
                let (s, f) = counters.get(kc).copied().unwrap_or((0, 0));
                let observation = KCObservation {
                    student_id: sequence.student_id.clone(),
                    kc: kc.clone(),
                    attempt_index: s + f + 1,
                    error,
                    prior_successes: s,
                    prior_failures: f,
                };
                observation.validate()?;
                observations.push(observation);
                if error == 1 {
                    counters.insert(kc.clone(), (s, f + 1));
                } else {
                    counters.insert(kc.clone(), (s + 1, f));
                }
            }
        }
    }
    Ok(observations)
}

/// Mean error by attempt index over the students who reached that
/// attempt; indices with fewer than `min_students` students are excluded.
pub fn empirical_curve(
    observations: &[KCObservation],
    kc: &str,
    min_students: usize,
) -> Result<Vec<CurvePoint>> {
    let mut by_attempt: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for obs in observations.iter().filter(|o| o.kc == kc) {
        let entry = by_attempt.entry(obs.attempt_index).or_insert((0.0, 0));
        entry.0 += obs.error as f64;
        entry.1 += 1;
    }
    if by_attempt.is_empty() {
        return Err(Error::domain(format!("no observations for KC {kc:?}")));
    }
    Ok(by_attempt
        .into_iter()
        .filter(|(_, (_, n))| *n >= min_students)
        .map(|(attempt_index, (errors, n))| CurvePoint {
            attempt_index,
            error_rate: errors / n as f64,
            n_students: n,
        })
        .collect())
}

/// Model-predicted error by attempt index: the exact complement of the
/// mean mastery (1 − m) over students at their t-th attempt at the KC,
/// with no smoothing. Attempt t for a student is their t-th submission
/// on a problem associated with the KC, and m is the mastery entering
/// that submission.
pub fn predicted_curve<B: Backbone>(
    model: &KcgenKt<B>,
    dataset: &Dataset,
    students: &[&str],
    q: &QMatrix,
    kc: &str,
    embedder: &dyn Embedder,
    min_students: usize,
) -> Result<Vec<PredictedPoint>> {
    let kc_index = q
        .kcs
        .iter()
        .position(|label| label == kc)
        .ok_or_else(|| Error::domain(format!("KC {kc:?} is not in the Q-matrix")))?;
    let mut by_attempt: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for sequence in &dataset.sequences {
        if !students.contains(&sequence.student_id.as_str()) {
            continue;
        }
        let mut tape = Tape::new();
        let graphs =
            model.forward_student(&mut tape, dataset, &sequence.submissions, q, embedder)?;
        let mut attempt = 0usize;
        for (submission, graph) in sequence.submissions.iter().zip(&graphs) {
            let indices = q.kc_indices_for_problem(&submission.problem_id)?;
            if !indices.contains(&kc_index) {
                continue;
            }
            attempt += 1;
            let mastery = tape.value(graph.mastery).at(0, kc_index);
            let entry = by_attempt.entry(attempt).or_insert((0.0, 0));
            entry.0 += 1.0 - mastery;
            entry.1 += 1;
        }
    }
    if by_attempt.is_empty() {
        return Err(Error::domain(format!("no attempts at KC {kc:?}")));
    }
    Ok(by_attempt
        .into_iter()
        .filter(|(_, (_, n))| *n >= min_students)
        .map(|(attempt_index, (sum, n))| PredictedPoint {
            attempt_index,
            error_rate: sum / n as f64,
        })
        .collect())
}

/// Fit P(correct) = σ(β + γ·prior_successes + ρ·prior_failures) by
/// penalized maximum likelihood (Newton iterations, L2 ridge). R² is the
/// squared weighted correlation between per-attempt empirical and
/// model-implied error rates, weighted by per-attempt student counts.
pub fn fit_pfa(observations: &[KCObservation], kc: &str, config: &CurveConfig) -> Result<PfaFit> {
    let scoped: Vec<&KCObservation> = observations.iter().filter(|o| o.kc == kc).collect();
    if scoped.len() < config.min_observations {
        return Err(Error::domain(format!(
            "KC {kc:?} has {} observations, fewer than the minimum {}",
            scoped.len(),
            config.min_observations
        )));
    }
    for obs in &scoped {
        obs.validate()?;
    }

    let mut theta = [0.0f64; 3];
    let mut converged = false;
    for _ in 0..config.max_iterations {
        let mut gradient = [0.0f64; 3];
        let mut hessian = [[0.0f64; 3]; 3];
        for obs in &scoped {
            let x = [1.0, obs.prior_successes as f64, obs.prior_failures as f64];
            let z = theta[0] * x[0] + theta[1] * x[1] + theta[2] * x[2];
            let p = sigmoid(z);
            let y = 1.0 - obs.error as f64;
            let w = p * (1.0 - p);
            for i in 0..3 {
                gradient[i] += (y - p) * x[i];
                for j in 0..3 {
                    hessian[i][j] += w * x[i] * x[j];
                }
            }
        }
        for i in 0..3 {
            gradient[i] -= config.ridge * theta[i];
            hessian[i][i] += config.ridge;
        }
        let step = solve3(hessian, gradient)?;
        for i in 0..3 {
            theta[i] += step[i];
        }
        if !theta.iter().all(|t| t.is_finite()) {
            return Err(Error::Numerical(format!(
                "PFA fit for KC {kc:?} diverged to non-finite parameters"
            )));
        }
        if step.iter().all(|s| s.abs() < config.tolerance) {
            converged = true;
            break;
        }
    }

    let r_squared = pfa_r_squared(&scoped, theta, config.min_students_per_attempt);
    Ok(PfaFit {
        kc: kc.to_string(),
        intercept: theta[0],
        success_weight: theta[1],
        failure_weight: theta[2],
        r_squared,
        n_observations: scoped.len(),
        converged,
    })
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Solve a 3×3 linear system by Gaussian elimination with partial
/// pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Result<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Numerical(
                "singular system in PFA Newton step".to_string(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let factor = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut sum = b[row];
        for k in row + 1..3 {
            sum -= a[row][k] * x[k];
        }
        x[row] = sum / a[row][row];
    }
    Ok(x)
}

fn pfa_r_squared(scoped: &[&KCObservation], theta: [f64; 3], min_students: usize) -> f64 {
    let mut by_attempt: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for obs in scoped {
        let z = theta[0]
            + theta[1] * obs.prior_successes as f64
            + theta[2] * obs.prior_failures as f64;
        let model_error = 1.0 - sigmoid(z);
        let entry = by_attempt.entry(obs.attempt_index).or_insert((0.0, 0.0, 0));
        entry.0 += obs.error as f64;
        entry.1 += model_error;
        entry.2 += 1;
    }
    let points: Vec<(f64, f64, f64)> = by_attempt
        .values()
        .filter(|(_, _, n)| *n >= min_students)
        .map(|&(errors, model, n)| (errors / n as f64, model / n as f64, n as f64))
        .collect();
    if points.len() < 2 {
        return 0.0;
    }
    let total_weight: f64 = points.iter().map(|(_, _, w)| w).sum();
    let mean_empirical: f64 =
        points.iter().map(|(e, _, w)| e * w).sum::<f64>() / total_weight;
    let mean_model: f64 = points.iter().map(|(_, m, w)| m * w).sum::<f64>() / total_weight;
    let mut covariance = 0.0;
    let mut var_empirical = 0.0;
    let mut var_model = 0.0;
    for (e, m, w) in &points {
        covariance += w * (e - mean_empirical) * (m - mean_model);
        var_empirical += w * (e - mean_empirical).powi(2);
        var_model += w * (m - mean_model).powi(2);
    }
    if var_empirical == 0.0 || var_model == 0.0 {
        return 0.0;
    }
    (covariance * covariance) / (var_empirical * var_model)
}

/// Observation-count-weighted mean of per-KC R² over converged fits.
pub fn weighted_r2(fits: &[PfaFit]) -> Result<f64> {
    let converged: Vec<&PfaFit> = fits.iter().filter(|f| f.converged).collect();
    if converged.is_empty() {
        return Err(Error::domain(
            "weighted R² requires at least one converged fit".to_string(),
        ));
    }
    let total: usize = converged.iter().map(|f| f.n_observations).sum();
    Ok(converged
        .iter()
        .map(|f| f.r_squared * f.n_observations as f64)
        .sum::<f64>()
        / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Decreasing,
    Increasing,
    NoTrend,
}

/// Mann–Kendall trend test with tie correction, two-sided at the given
/// significance level.
pub fn mann_kendall_trend(values: &[f64], alpha: f64) -> Result<Trend> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::domain(format!("alpha must be in (0,1), got {alpha}")));
    }
    let n = values.len();
    if n < 3 {
        return Ok(Trend::NoTrend);
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += match values[j].partial_cmp(&values[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    let mut tie_counts: BTreeMap<u64, usize> = BTreeMap::new();
    for v in values {
        *tie_counts.entry(v.to_bits()).or_insert(0) += 1;
    }
    let tie_term: f64 = tie_counts
        .values()
        .filter(|&&t| t > 1)
        .map(|&t| {
            let t = t as f64;
            t * (t - 1.0) * (2.0 * t + 5.0)
        })
        .sum();
    let nf = n as f64;
    let variance = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - tie_term) / 18.0;
    if variance <= 0.0 {
        return Ok(Trend::NoTrend);
    }
    let z = if s > 0 {
        (s as f64 - 1.0) / variance.sqrt()
    } else if s < 0 {
        (s as f64 + 1.0) / variance.sqrt()
    } else {
        0.0
    };
    use statrs::distribution::{ContinuousCDF, Normal};
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Numerical(e.to_string()))?;
    let critical = normal.inverse_cdf(1.0 - alpha / 2.0);
    Ok(if z.abs() > critical {
        if s > 0 {
            Trend::Increasing
        } else {
            Trend::Decreasing
        }
    } else {
        Trend::NoTrend
    })
}

/// Synthetic observation cohorts with known ground truth, for parameter
/// recovery and trend-power checks.
pub mod synthetic {
    use super::KCObservation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Students attempting one KC with P(correct) = σ(β + γ·s + ρ·f).
    pub fn pfa_cohort(
        kc: &str,
        n_students: usize,
        attempts_per_student: usize,
        beta: f64,
        gamma: f64,
        rho: f64,
        seed: u64,
    ) -> Vec<KCObservation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut observations = Vec::with_capacity(n_students * attempts_per_student);
        for student in 0..n_students {
            let mut successes = 0usize;
            let mut failures = 0usize;
            for _ in 0..attempts_per_student {
                let z = beta + gamma * successes as f64 + rho * failures as f64;
                let p_correct = 1.0 / (1.0 + (-z).exp());
                let error = u8::from(rng.gen_range(0.0..1.0) >= p_correct);
                observations.push(KCObservation {
                    student_id: format!("s{student}"),
                    kc: kc.to_string(),
                    attempt_index: successes + failures + 1,
                    error,
                    prior_successes: successes,
                    prior_failures: failures,
                });
                if error == 1 {
                    failures += 1;
                } else {
                    successes += 1;
                }
            }
        }
        observations
    }

    /// Students whose true error probability at attempt t is
    /// scale·t^exponent (clamped to [0, 1]).
    pub fn power_law_cohort(
        kc: &str,
        n_students: usize,
        attempts_per_student: usize,
        scale: f64,
        exponent: f64,
        seed: u64,
    ) -> Vec<KCObservation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut observations = Vec::with_capacity(n_students * attempts_per_student);
        for student in 0..n_students {
            let mut successes = 0usize;
            let mut failures = 0usize;
            for attempt in 1..=attempts_per_student {
                let p_error = (scale * (attempt as f64).powf(exponent)).clamp(0.0, 1.0);
                let error = u8::from(rng.gen_range(0.0..1.0) < p_error);
                observations.push(KCObservation {
                    student_id: format!("s{student}"),
                    kc: kc.to_string(),
                    attempt_index: attempt,
                    error,
                    prior_successes: successes,
                    prior_failures: failures,
                });
                if error == 1 {
                    failures += 1;
                } else {
                    successes += 1;
                }
            }
        }
        observations
    }

    /// The generator's true error rate at an attempt index.
    pub fn power_law_rate(scale: f64, exponent: f64, attempt: usize) -> f64 {
        (scale * (attempt as f64).powf(exponent)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    attempt_index: usize,
    empirical_error_rate: f64,
    n_students: usize,
    predicted_error_rate: Option<f64>,
}

/// One curve file per KC: attempt, empirical rate, student count, and the
/// predicted rate when present.
pub fn write_curve_csv(path: &Path, curve: &LearningCurve) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let predicted: BTreeMap<usize, f64> = curve
        .predicted
        .iter()
        .flatten()
        .map(|p| (p.attempt_index, p.error_rate))
        .collect();
    for point in &curve.points {
        writer.serialize(CurveRow {
            attempt_index: point.attempt_index,
            empirical_error_rate: point.error_rate,
            n_students: point.n_students,
            predicted_error_rate: predicted.get(&point.attempt_index).copied(),
        })?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::domain(format!("csv buffer: {e}")))?;
    write_atomic(path, &bytes)
}

/// PFA summary file: KC, β, γ, ρ, R², n, converged.
pub fn write_pfa_summary_csv(path: &Path, fits: &[PfaFit]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for fit in fits {
        writer.serialize(fit)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::domain(format!("csv buffer: {e}")))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StudentSequence;
    use crate::llm::{ChatProvider, MockProvider};
    use std::collections::BTreeSet;

    fn client_with_mock() -> ChatClient {
        ChatClient::new(Box::new(MockProvider::new(0)))
    }

    fn problem(id: &str, tags: &[&str]) -> Problem {
        Problem {
            problem_id: id.to_string(),
            statement: format!("statement for {id}"),
            human_kc_tags: tags.iter().map(|t| t.to_string()).collect(),
        }
    }

    fn submission(student: &str, problem: &str, index: u64, code: &str, correct: bool) -> Submission {
        Submission {
            student_id: student.to_string(),
            problem_id: problem.to_string(),
            order_index: index,
            code: code.to_string(),
            correct,
            timestamp: None,
        }
    }

    #[test]
    fn correct_submission_short_circuits_with_zero_llm_calls() {
        struct Exploding;
        impl ChatProvider for Exploding {
            fn provider_id(&self) -> &str {
                "exploding"
            }
            fn complete(&self, _: &crate::llm::ChatRequest) -> Result<String> {
                panic!("correct submissions must not reach the provider");
            }
        }
        let client = ChatClient::new(Box::new(Exploding));
        let p = problem("p1", &["A"]);
        let sub = submission("s1", "p1", 0, "return 1;", true);
        let kcs = vec!["For loop iteration".to_string(), "Boolean logic".to_string()];
        let labels = label_kc_errors(&client, &p, &kcs, &sub, "m", 0).unwrap();
        assert_eq!(labels.len(), 2);
        assert!(labels.values().all(|&v| v == 0), "all-zero labels expected");
    }

    #[test]
    fn sorta_sum_fixture_flags_comparisons_and_logic() {
        let client = client_with_mock();
        let p = Problem {
            problem_id: "sortaSum".to_string(),
            statement: "Given 2 ints, a and b, return their sum. However, sums in the range 10..19 inclusive are forbidden, so in that case just return 20.".to_string(),
            human_kc_tags: vec![],
        };
        let sub = submission(
            "s1",
            "sortaSum",
            0,
            "public int sortaSum(int a, int b){\n    if (a + b <= 10 && a + b >= 20)\n        return 20;\n    else\n        return a + b;\n}",
            false,
        );
        let kcs = vec![
            "Basic arithmetic operations".to_string(),
            "Numerical comparisons".to_string(),
            "Logical operators".to_string(),
            "If and else statement".to_string(),
        ];
        let labels = label_kc_errors(&client, &p, &kcs, &sub, "m", 0).unwrap();
        assert_eq!(labels["Numerical comparisons"], 1);
        assert_eq!(labels["Logical operators"], 1);
        assert_eq!(labels["Basic arithmetic operations"], 0);
        assert_eq!(labels["If and else statement"], 0);
    }

    #[test]
    fn mismatched_kc_set_drops_the_observation() {
        let bad = r#"{"error reasoning": ["x"], "KC error": {"Wrong KC": 1}}"#;
        let client = ChatClient::new(Box::new(crate::llm::testing::ScriptedProvider::new(vec![
            bad, bad,
        ])));
        let dataset = Dataset {
            problems: vec![problem("p1", &["A"])],
            sequences: vec![StudentSequence {
                student_id: "s1".to_string(),
                submissions: vec![submission("s1", "p1", 0, "bad code", false)],
            }],
        };
        let q = crate::pipeline::q_matrix_from_tags(&dataset).unwrap();
        let labels = collect_error_labels(&client, &dataset, &q, &["s1"], "m", 0).unwrap();
        assert!(labels.is_empty(), "failed labeling must drop the submission");
        let observations = build_observations(&dataset, &q, &["s1"], &labels).unwrap();
        assert!(observations.is_empty());
    }

    #[test]
    fn attempt_indices_count_per_kc_in_order() {
        let dataset = Dataset {
            problems: vec![
                problem("p1", &["A"]),
                problem("p2", &["A"]),
                problem("p3", &["A"]),
            ],
            sequences: vec![StudentSequence {
                student_id: "s1".to_string(),
                submissions: vec![
                    submission("s1", "p1", 0, "c", true),
                    submission("s1", "p2", 1, "c", false),
                    submission("s1", "p3", 2, "c", true),
                ],
            }],
        };
        let q = crate::pipeline::q_matrix_from_tags(&dataset).unwrap();
        let client = client_with_mock();
        let labels = collect_error_labels(&client, &dataset, &q, &["s1"], "m", 0).unwrap();
        let observations = build_observations(&dataset, &q, &["s1"], &labels).unwrap();
        let indices: Vec<usize> = observations.iter().map(|o| o.attempt_index).collect();
        assert_eq!(indices, vec![1, 2, 3]);
        for obs in &observations {
            assert_eq!(
                obs.attempt_index,
                obs.prior_successes + obs.prior_failures + 1,
                "counter invariant"
            );
        }
    }

    #[test]
    fn multi_kc_problem_contributes_one_observation_per_kc() {
        let dataset = Dataset {
            problems: vec![problem("p1", &["A", "B"])],
            sequences: vec![StudentSequence {
                student_id: "s1".to_string(),
                submissions: vec![submission("s1", "p1", 0, "c", true)],
            }],
        };
        let q = crate::pipeline::q_matrix_from_tags(&dataset).unwrap();
        let client = client_with_mock();
        let labels = collect_error_labels(&client, &dataset, &q, &["s1"], "m", 0).unwrap();
        let observations = build_observations(&dataset, &q, &["s1"], &labels).unwrap();
        assert_eq!(observations.len(), 2);
        let kcs: BTreeSet<&str> = observations.iter().map(|o| o.kc.as_str()).collect();
        assert_eq!(kcs.len(), 2);
    }

    #[test]
    fn counters_match_brute_force_replay_on_synthetic_log() {
        let config = crate::data::synth::SynthConfig::codeworkout_shaped(23);
        let dataset = crate::data::synth::generate(&config).unwrap();
        let q = crate::pipeline::q_matrix_from_tags(&dataset).unwrap();
        let students: Vec<&str> = dataset
            .sequences
            .iter()
            .take(8)
            .map(|s| s.student_id.as_str())
            .collect();
        let client = client_with_mock();
        let labels = collect_error_labels(&client, &dataset, &q, &students, "m", 0).unwrap();
        let observations = build_observations(&dataset, &q, &students, &labels).unwrap();

        let mut replay: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
        let mut checked = 0usize;
        for sequence in &dataset.sequences {
            if !students.contains(&sequence.student_id.as_str()) {
                continue;
            }
            for submission in &sequence.submissions {
                let label_map = labels
                    .get(&(sequence.student_id.clone(), submission.order_index))
                    .expect("mock labels every submission");
                for kc in q.kc_labels_for_problem(&submission.problem_id).unwrap() {
                    let key = (sequence.student_id.clone(), kc.clone());
                    let (s, f) = replay.get(&key).copied().unwrap_or((0, 0));
                    let obs = observations
                        .iter()
                        .find(|o| {
                            o.student_id == sequence.student_id
                                && o.kc == kc
                                && o.attempt_index == s + f + 1
                        })
                        .expect("observation for every (student, kc, attempt)");
                    assert_eq!((obs.prior_successes, obs.prior_failures), (s, f));
                    checked += 1;
                    if label_map[&kc] == 1 {
                        replay.insert(key, (s, f + 1));
                    } else {
                        replay.insert(key, (s + 1, f));
                    }
                }
            }
        }
        assert_eq!(checked, observations.len());
    }

    fn quick_obs(kc: &str, student: &str, errors: &[u8]) -> Vec<KCObservation> {
        let mut out = Vec::new();
        let (mut s, mut f) = (0usize, 0usize);
        for &error in errors {
            out.push(KCObservation {
                student_id: student.to_string(),
                kc: kc.to_string(),
                attempt_index: s + f + 1,
                error,
                prior_successes: s,
                prior_failures: f,
            });
            if error == 1 {
                f += 1;
            } else {
                s += 1;
            }
        }
        out
    }

    #[test]
    fn empirical_curve_single_student_reproduces_error_sequence() {
        let observations = quick_obs("A", "s1", &[1, 0, 0]);
        let points = empirical_curve(&observations, "A", 1).unwrap();
        let rates: Vec<f64> = points.iter().map(|p| p.error_rate).collect();
        assert_eq!(rates, vec![1.0, 0.0, 0.0]);
        assert!(points.iter().all(|p| p.n_students == 1));
    }

    #[test]
    fn empirical_curve_averages_across_students() {
        let mut observations = quick_obs("A", "s1", &[1]);
        observations.extend(quick_obs("A", "s2", &[0]));
        let points = empirical_curve(&observations, "A", 1).unwrap();
        assert_eq!(points.len(), 1);
        assert_eq!(points[0].error_rate, 0.5);
        assert_eq!(points[0].n_students, 2);
    }

    #[test]
    fn sparse_attempt_indices_are_excluded() {
        let mut observations = Vec::new();
        for i in 0..6 {
            observations.extend(quick_obs("A", &format!("s{i}"), &[1, 0]));
        }
        observations.extend(quick_obs("A", "s9", &[1, 0, 0]));
        let points = empirical_curve(&observations, "A", 5).unwrap();
        assert_eq!(points.len(), 2, "attempt 3 has one student and is dropped");
    }

    #[test]
    fn pfa_recovers_known_parameters() {
        let observations = synthetic::pfa_cohort("A", 100, 20, 0.0, 0.3, -0.1, 42);
        assert_eq!(observations.len(), 2000);
        let fit = fit_pfa(&observations, "A", &CurveConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(
            (fit.intercept - 0.0).abs() < 0.1,
            "β recovered, got {}",
            fit.intercept
        );
        assert!(
            (fit.success_weight - 0.3).abs() < 0.1,
            "γ recovered, got {}",
            fit.success_weight
        );
        assert!(
            (fit.failure_weight - (-0.1)).abs() < 0.1,
            "ρ recovered, got {}",
            fit.failure_weight
        );
    }

    #[test]
    fn all_correct_observations_drive_intercept_large_positive() {
        let mut observations = Vec::new();
        for i in 0..10 {
            observations.extend(quick_obs("A", &format!("s{i}"), &[0, 0, 0]));
        }
        let fit = fit_pfa(&observations, "A", &CurveConfig::default()).unwrap();
        assert!(fit.converged, "ridge keeps the separable case fittable");
        assert!(fit.intercept > 3.0, "β large positive, got {}", fit.intercept);
        let predicted_error = 1.0 - sigmoid(fit.intercept);
        assert!(predicted_error < 0.05, "got {predicted_error}");
    }

    #[test]
    fn pfa_fit_is_deterministic() {
        let observations = synthetic::pfa_cohort("A", 30, 10, 0.5, 0.2, -0.2, 7);
        let a = fit_pfa(&observations, "A", &CurveConfig::default()).unwrap();
        let b = fit_pfa(&observations.clone(), "A", &CurveConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_observations_are_rejected() {
        let observations = quick_obs("A", "s1", &[1, 0]);
        let err = fit_pfa(&observations, "A", &CurveConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Domain(_)), "got {err:?}");
    }

    #[test]
    fn weighted_r2_matches_arithmetic() {
        let fit = |kc: &str, r2: f64, n: usize, converged: bool| PfaFit {
            kc: kc.to_string(),
            intercept: 0.0,
            success_weight: 0.0,
            failure_weight: 0.0,
            r_squared: r2,
            n_observations: n,
            converged,
        };
        let single = vec![fit("A", 0.37, 50, true)];
        assert_eq!(weighted_r2(&single).unwrap(), 0.37);
        let pair = vec![fit("A", 0.2, 100, true), fit("B", 0.4, 300, true)];
        assert!((weighted_r2(&pair).unwrap() - 0.35).abs() < 1e-12);
        let with_failed = vec![
            fit("A", 0.2, 100, true),
            fit("B", 0.9, 10_000, false),
        ];
        assert_eq!(
            weighted_r2(&with_failed).unwrap(),
            0.2,
            "non-converged fits are excluded"
        );
        assert!(weighted_r2(&[fit("A", 0.5, 10, false)]).is_err());

        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        use rand::Rng;
        for _ in 0..20 {
            let fits: Vec<PfaFit> = (0..5)
                .map(|i| fit(&format!("k{i}"), rng.gen_range(0.0..1.0), rng.gen_range(1..500), true))
                .collect();
            let expected = fits.iter().map(|f| f.r_squared * f.n_observations as f64).sum::<f64>()
                / fits.iter().map(|f| f.n_observations as f64).sum::<f64>();
            assert!((weighted_r2(&fits).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn power_law_cohort_matches_generator_rates() {
        let observations = synthetic::power_law_cohort("A", 500, 8, 0.8, -0.5, 11);
        let points = empirical_curve(&observations, "A", 5).unwrap();
        for point in &points {
            let truth = synthetic::power_law_rate(0.8, -0.5, point.attempt_index);
            let se = (truth * (1.0 - truth) / point.n_students as f64).sqrt();
            assert!(
                (point.error_rate - truth).abs() < 4.0 * se + 1e-9,
                "attempt {}: rate {} vs truth {truth}",
                point.attempt_index,
                point.error_rate
            );
        }
    }

    #[test]
    fn mann_kendall_detects_decreasing_cohorts_with_high_power() {
        let mut detected = 0usize;
        let runs = 25;
        for seed in 0..runs {
            let observations = synthetic::power_law_cohort("A", 200, 10, 0.8, -0.5, seed);
            let points = empirical_curve(&observations, "A", 5).unwrap();
            let rates: Vec<f64> = points.iter().map(|p| p.error_rate).collect();
            if mann_kendall_trend(&rates, 0.05).unwrap() == Trend::Decreasing {
                detected += 1;
            }
        }
        assert!(
            detected as f64 >= 0.9 * runs as f64,
            "power {detected}/{runs} below 90%"
        );
    }

    #[test]
    fn mann_kendall_on_constant_series_finds_no_trend() {
        assert_eq!(
            mann_kendall_trend(&[0.5, 0.5, 0.5, 0.5, 0.5], 0.05).unwrap(),
            Trend::NoTrend
        );
        assert_eq!(
            mann_kendall_trend(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 0.05).unwrap(),
            Trend::Increasing
        );
    }

    #[test]
    fn pfa_slope_implies_decreasing_error_on_decreasing_cohort() {
        let observations = synthetic::power_law_cohort("A", 200, 10, 0.8, -0.5, 3);
        let fit = fit_pfa(&observations, "A", &CurveConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(
            fit.success_weight > 0.0,
            "success slope positive so predicted error falls with practice, got {}",
            fit.success_weight
        );
    }

    #[test]
    fn predicted_curve_of_constant_mastery_model_is_flat_complement() {
        let dataset = Dataset {
            problems: vec![problem("p1", &["A"]), problem("p2", &["A"])],
            sequences: vec![StudentSequence {
                student_id: "s1".to_string(),
                submissions: vec![
                    submission("s1", "p1", 0, "return a + b ;", true),
                    submission("s1", "p2", 1, "return a - b ;", false),
                ],
            }],
        };
        let q = crate::pipeline::q_matrix_from_tags(&dataset).unwrap();
        let tokenizer = crate::kt::Tokenizer::from_corpus(
            [
                "statement for p1 p2 return a + b ; -",
                "question: . KC 1: The student's mastery level on is: A",
            ]
            .into_iter(),
        );
        let backbone = crate::kt::TinyTransformer::new(
            crate::kt::BackboneConfig {
                layers: 1,
                dim: 8,
                heads: 2,
                d_ff: 16,
                max_seq_len: 128,
            },
            tokenizer,
            5,
        )
        .unwrap();
        let mut model =
            KcgenKt::new(backbone, 8, 1, crate::embed::OFFLINE_DIMENSION, 6).unwrap();
        let w = model.head_params_mut().get_mut("mastery.w");
        for v in &mut w.data {
            *v = 0.0;
        }
        let target = 0.7f64;
        let logit = (target / (1.0 - target)).ln();
        model.head_params_mut().get_mut("mastery.b").data[0] = logit;

        let points = predicted_curve(
            &model,
            &dataset,
            &["s1"],
            &q,
            "A",
            &crate::embed::OfflineCodeEmbedder,
            1,
        )
        .unwrap();
        assert_eq!(points.len(), 2);
        for point in &points {
            assert!(
                (point.error_rate - 0.3).abs() < 1e-9,
                "flat 0.3 expected, got {}",
                point.error_rate
            );
            assert!(point.error_rate > 0.0 && point.error_rate < 1.0);
        }
    }

    #[test]
    fn curve_and_pfa_files_round_trip() {
        let curve = LearningCurve {
            kc: "A".to_string(),
            points: vec![
                CurvePoint {
                    attempt_index: 1,
                    error_rate: 0.75,
                    n_students: 8,
                },
                CurvePoint {
                    attempt_index: 2,
                    error_rate: 0.5,
                    n_students: 6,
                },
            ],
            predicted: Some(vec![PredictedPoint {
                attempt_index: 1,
                error_rate: 0.7,
            }]),
        };
        let dir = tempfile::tempdir().unwrap();
        let curve_path = dir.path().join("curve-A.csv");
        write_curve_csv(&curve_path, &curve).unwrap();
        let text = std::fs::read_to_string(&curve_path).unwrap();
        assert!(text.starts_with("attempt_index,empirical_error_rate,n_students,predicted_error_rate"));
        assert!(text.contains("1,0.75,8,0.7"));
        assert!(text.contains("2,0.5,6,"), "missing prediction leaves the cell empty");

        let fits = vec![PfaFit {
            kc: "A".to_string(),
            intercept: 0.1,
            success_weight: 0.2,
            failure_weight: -0.3,
            r_squared: 0.4,
            n_observations: 14,
            converged: true,
        }];
        let pfa_path = dir.path().join("pfa.csv");
        write_pfa_summary_csv(&pfa_path, &fits).unwrap();
        let mut reader = csv::Reader::from_path(&pfa_path).unwrap();
        let rows: Vec<PfaFit> = reader.deserialize().map(|r| r.unwrap()).collect();
        assert_eq!(rows, fits);
    }
}
