//! The KC generation and tagging pipeline: representative solution
//! selection, few-shot KC generation, HAC clustering with controllable
//! abstraction, cluster labeling, and Q-matrix / ontology construction.

pub mod artifacts;
pub mod cluster;
pub mod qmatrix;
pub mod select;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Submission};
use crate::embed::Embedder;
use crate::llm::parse::{
    normalize_kc_name, parse_cluster_label_json, parse_kc_json, parse_tag_conversion_json,
};
use crate::llm::template::{format_few_shot_examples, format_solutions_block, render_prompt};
use crate::llm::{ChatClient, ChatRequest, TemplateId};
use crate::{Error, Result};

pub use cluster::{cluster_kcs, cluster_member_names, hac_average_cosine, KCCluster, LabelOrigin};
pub use qmatrix::{build_ontology, build_q_matrix, q_matrix_from_tags, OntologyNode, QMatrix};
pub use select::select_representative_solutions;

/// A single skill or concept needed to solve a problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeComponent {
    pub kc_id: String,
    pub name: String,
    pub reasoning: String,
    /// Set for initially generated KCs; None for labels detached from a
    /// specific problem.
    pub source_problem_id: Option<String>,
    /// Cluster count of the level this KC was produced at, if any.
    pub abstraction_level: Option<usize>,
}

/// A few-shot demonstration: a problem statement and the KC names a good
/// answer lists for it.
pub type FewShotExample = (String, Vec<String>);

/// Fallback demonstration used when the dataset carries no human tags to
/// convert: replacing characters with pluses while preserving a word.
pub fn default_few_shot() -> FewShotExample {
    (
        "Write a function in Java that implements the following logic: Given a string str \
         and a non-empty word, return a version of the original string where all chars have \
         been replaced by pluses (+), except for appearances of the word which are preserved \
         unchanged."
            .to_string(),
        vec![
            "If and else statement".to_string(),
            "While loop".to_string(),
            "Numerical comparisons".to_string(),
            "String formatting".to_string(),
            "String concatenation".to_string(),
            "String indexing".to_string(),
            "String length".to_string(),
            "String equality comparison".to_string(),
        ],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub representatives_per_problem: usize,
    pub n_clusters: usize,
    pub few_shot_count: usize,
    pub seed: u64,
    pub provider_model_id: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            representatives_per_problem: 5,
            n_clusters: 50,
            few_shot_count: 1,
            seed: 0,
            provider_model_id: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub kcs: Vec<KnowledgeComponent>,
    pub clusters: Vec<KCCluster>,
    pub q_matrix: QMatrix,
    /// Problems with no correct submissions, skipped with a warning.
    pub skipped_problems: Vec<String>,
    /// Problems whose KC generation failed structured-output parsing even
    /// after the automatic retry.
    pub flagged_problems: Vec<String>,
}

fn request_for(
    config: &PipelineConfig,
    template: TemplateId,
    slots: &BTreeMap<String, String>,
) -> Result<ChatRequest> {
    let mut request = render_prompt(template, slots)?;
    request.provider_model_id = config.provider_model_id.clone();
    request.seed = Some(config.seed);
    Ok(request)
}

fn slot(key: &str, value: impl Into<String>) -> (String, String) {
    (key.to_string(), value.into())
}

/// Convert human-written topic tags into natural-language KC names for use
/// as few-shot demonstrations.
pub fn convert_human_tags(
    client: &ChatClient,
    tags: &[String],
    config: &PipelineConfig,
) -> Result<BTreeMap<String, String>> {
    if tags.is_empty() {
        return Err(Error::domain("tag list must be non-empty"));
    }
    let slots = BTreeMap::from([slot("tags", tags.join(", "))]);
    let request = request_for(config, TemplateId::TagConversion, &slots)?;
    client.complete_structured(&request, |response| {
        parse_tag_conversion_json(response, tags)
    })
}

/// Generate the initial KCs for one problem from its representative
/// solutions, guided by few-shot demonstrations.
pub fn generate_initial_kcs(
    client: &ChatClient,
    problem_id: &str,
    statement: &str,
    representative_solutions: &[Submission],
    few_shot: &[FewShotExample],
    config: &PipelineConfig,
) -> Result<Vec<KnowledgeComponent>> {
    if representative_solutions.is_empty() {
        return Err(Error::domain(format!(
            "problem {problem_id} has no representative solutions"
        )));
    }
    let codes: Vec<String> = representative_solutions
        .iter()
        .map(|s| s.code.clone())
        .collect();
    let slots = BTreeMap::from([
        slot("examples", format_few_shot_examples(few_shot)),
        slot("problem", statement),
        slot("solutions", format_solutions_block(&codes)),
    ]);
    let request = request_for(config, TemplateId::KcGeneration, &slots)?;
    let entries = client.complete_structured(&request, |r| parse_kc_json(r))?;
    Ok(entries
        .into_iter()
        .enumerate()
        .map(|(i, entry)| KnowledgeComponent {
            kc_id: format!("{problem_id}/kc{}", i + 1),
            name: entry.name,
            reasoning: entry.reasoning,
            source_problem_id: Some(problem_id.to_string()),
            abstraction_level: None,
        })
        .collect())
}

/// Label one cluster in place. Singleton clusters take their only member
/// name without an LLM call; larger clusters ask for a representative or
/// a summary name.
pub fn label_cluster(
    client: &ChatClient,
    cluster: &mut KCCluster,
    member_names: &[String],
    config: &PipelineConfig,
) -> Result<()> {
    if member_names.is_empty() {
        return Err(Error::domain(format!(
            "cluster {} has no member names",
            cluster.cluster_id
        )));
    }
    if member_names.len() == 1 {
        cluster.label = member_names[0].clone();
        cluster.label_origin = Some(LabelOrigin::Representative);
        return Ok(());
    }
    let slots = BTreeMap::from([slot(
        "kc_list",
        member_names
            .iter()
            .map(|n| format!("{n:?}"))
            .collect::<Vec<_>>()
            .join(", "),
    )]);
    let request = request_for(config, TemplateId::ClusterLabel, &slots)?;
    let (label, origin) = client.complete_structured(&request, |response| {
        let parsed = parse_cluster_label_json(response)?;
        if let Some(rep) = parsed.representative_kc {
            let wanted = normalize_kc_name(&rep);
            let member = member_names
                .iter()
                .find(|m| normalize_kc_name(m) == wanted)
                .ok_or_else(|| {
                    Error::structured(
                        format!("representative {rep:?} is not one of the cluster members"),
                        response,
                    )
                })?;
            Ok((member.clone(), LabelOrigin::Representative))
        } else {
            let summary = parsed.summary_name.expect("parser enforces the alternative");
            Ok((summary, LabelOrigin::Summary))
        }
    })?;
    cluster.label = label;
    cluster.label_origin = Some(origin);
    Ok(())
}

/// All correct submissions for one problem, in dataset order.
pub fn correct_submissions_for(dataset: &Dataset, problem_id: &str) -> Vec<Submission> {
    dataset
        .sequences
        .iter()
        .flat_map(|seq| seq.submissions.iter())
        .filter(|s| s.problem_id == problem_id && s.correct)
        .cloned()
        .collect()
}

/// Build the few-shot demonstrations: converted human tags from the first
/// tagged problems, or the built-in fallback when no problem has tags.
pub fn collect_few_shot_examples(
    dataset: &Dataset,
    client: &ChatClient,
    config: &PipelineConfig,
) -> Result<Vec<FewShotExample>> {
    if config.few_shot_count == 0 {
        return Ok(Vec::new());
    }
    let tagged: Vec<_> = dataset
        .problems
        .iter()
        .filter(|p| !p.human_kc_tags.is_empty())
        .take(config.few_shot_count)
        .collect();
    if tagged.is_empty() {
        return Ok(vec![default_few_shot()]);
    }
    let mut all_tags: Vec<String> = Vec::new();
    for problem in &tagged {
        for tag in &problem.human_kc_tags {
            if !all_tags.contains(tag) {
                all_tags.push(tag.clone());
            }
        }
    }
    let conversions = convert_human_tags(client, &all_tags, config)?;
    Ok(tagged
        .into_iter()
        .map(|p| {
            let mut names: Vec<String> = Vec::new();
            for tag in &p.human_kc_tags {
                let name = conversions[tag].clone();
                if !names.contains(&name) {
                    names.push(name);
                }
            }
            (p.statement.clone(), names)
        })
        .collect())
}

/// Cluster the KC set at one abstraction level and label every cluster.
pub fn cluster_and_label(
    kcs: &[KnowledgeComponent],
    n_clusters: usize,
    text_embedder: &dyn Embedder,
    client: &ChatClient,
    config: &PipelineConfig,
) -> Result<Vec<KCCluster>> {
    let mut clusters = cluster_kcs(kcs, n_clusters, text_embedder)?;
    for cluster in &mut clusters {
        let names = cluster_member_names(cluster, kcs);
        label_cluster(client, cluster, &names, config)?;
    }
    Ok(clusters)
}

/// Run the full pipeline at one abstraction level: select representative
/// solutions, generate KCs, cluster and label them, and build the
/// Q-matrix.
pub fn run_pipeline(
    dataset: &Dataset,
    client: &ChatClient,
    code_embedder: &dyn Embedder,
    text_embedder: &dyn Embedder,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    dataset.validate()?;
    let few_shot = collect_few_shot_examples(dataset, client, config)?;

    let mut kcs: Vec<KnowledgeComponent> = Vec::new();
    let mut problem_kcs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut skipped_problems = Vec::new();
    let mut flagged_problems = Vec::new();
    for problem in &dataset.problems {
        let correct = correct_submissions_for(dataset, &problem.problem_id);
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
            config.representatives_per_problem,
            code_embedder,
            config.seed,
        )?;
        match generate_initial_kcs(
            client,
            &problem.problem_id,
            &problem.statement,
            &representatives,
            &few_shot,
            config,
        ) {
            Ok(generated) => {
                problem_kcs.insert(
                    problem.problem_id.clone(),
                    generated.iter().map(|kc| kc.kc_id.clone()).collect(),
                );
                kcs.extend(generated);
            }
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
            "no problem produced KCs; nothing to cluster",
        ));
    }

    let clusters = cluster_and_label(&kcs, config.n_clusters, text_embedder, client, config)?;
    let q_matrix = build_q_matrix(&problem_kcs, &clusters)?;
    Ok(PipelineOutput {
        kcs,
        clusters,
        q_matrix,
        skipped_problems,
        flagged_problems,
    })
}
