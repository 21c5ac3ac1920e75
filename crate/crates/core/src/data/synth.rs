//! Deterministic synthetic interaction logs.
//!
//! Problems are composed from the concept-family table, so a downstream
//! keyword scan of any generated statement recovers the families it was
//! built from. Students carry per-family skills; a submission is correct
//! when the student's mean skill over the problem's families clears the
//! problem's difficulty (optionally through a noisy sigmoid). Correct
//! submissions carry the problem's canonical solution, incorrect ones a
//! mutated variant, which gives the code-generation objective a learnable
//! target.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptFamily, FAMILIES};
use crate::lang::Language;
use crate::{Error, Result};

use super::{Dataset, Problem, StudentSequence, Submission};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_students: usize,
    pub n_problems: usize,
    pub seed: u64,
    pub language: Language,
    /// Probability a student attempts any given problem.
    pub attempt_rate: f64,
    /// Probability an attempted problem receives a second submission.
    pub duplicate_rate: f64,
    /// Width of the sigmoid on (skill − difficulty); 0 means a hard
    /// threshold, which makes correctness a deterministic function of the
    /// student and problem.
    pub noise: f64,
    /// Upper bound on concept families combined into one problem.
    pub max_families_per_problem: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_students: 20,
            n_problems: 10,
            seed: 0,
            language: Language::Java,
            attempt_rate: 1.0,
            duplicate_rate: 0.0,
            noise: 0.0,
            max_families_per_problem: 3,
        }
    }
}

impl SynthConfig {
    /// A log shaped like a semester of an introductory Java course:
    /// 246 students over 50 problems, with noisy correctness.
    pub fn codeworkout_shaped(seed: u64) -> Self {
        SynthConfig {
            n_students: 246,
            n_problems: 50,
            seed,
            language: Language::Java,
            attempt_rate: 1.0,
            duplicate_rate: 0.0,
            noise: 0.15,
            max_families_per_problem: 3,
        }
    }

    /// A deliberately small, noise-free log a model should be able to fit
    /// almost perfectly.
    pub fn tiny_overfit(seed: u64) -> Self {
        SynthConfig {
            n_students: 20,
            n_problems: 10,
            seed,
            language: Language::Java,
            attempt_rate: 1.0,
            duplicate_rate: 0.0,
            noise: 0.0,
            max_families_per_problem: 2,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_students == 0 || self.n_problems == 0 {
            return Err(Error::domain("need at least one student and one problem"));
        }
        for (name, rate) in [
            ("attempt_rate", self.attempt_rate),
            ("duplicate_rate", self.duplicate_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::domain(format!("{name} must be in [0, 1], got {rate}")));
            }
        }
        if self.noise < 0.0 {
            return Err(Error::domain("noise must be non-negative"));
        }
        if self.max_families_per_problem == 0 {
            return Err(Error::domain("max_families_per_problem must be at least 1"));
        }
        Ok(())
    }
}

struct SynthProblem {
    problem: Problem,
    family_indices: Vec<usize>,
    difficulty: f64,
    canonical: String,
    buggy: Vec<String>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const STATEMENT_OPENERS: &[&str] = &[
    "Write a method `{name}` that",
    "Implement a method `{name}` that",
    "Complete the method `{name}` so that it",
];

fn compose_statement(name: &str, families: &[&ConceptFamily], rng: &mut ChaCha8Rng) -> String {
    let opener = STATEMENT_OPENERS[rng.gen_range(0..STATEMENT_OPENERS.len())]
        .replace("{name}", name);
    let phrases: Vec<&str> = families
        .iter()
        .map(|f| f.statement_phrases[rng.gen_range(0..f.statement_phrases.len())])
        .collect();
    let joined = match phrases.len() {
        1 => phrases[0].to_string(),
        2 => format!("{} and {}", phrases[0], phrases[1]),
        _ => format!(
            "{}, {}, and {}",
            phrases[0],
            phrases[1],
            phrases[2..].join(", and ")
        ),
    };
    format!("{opener} {joined}.")
}

fn canonical_code(name: &str, families: &[&ConceptFamily], language: Language) -> String {
    let fragments: Vec<&str> = families
        .iter()
        .map(|f| match language {
            Language::Java => f.code_fragments.0,
            Language::Python => f.code_fragments.1,
        })
        .collect();
    match language {
        Language::Java => format!(
            "public int {name}(int a, int b) {{\n    int result = 0;\n    {}\n    return result;\n}}",
            fragments.join("\n    ")
        ),
        Language::Python => format!(
            "def {name}(a, b):\n    result = 0\n    {}\n    return result",
            fragments.join("\n    ")
        ),
    }
}

/// Substitutions tried when deriving a buggy variant; the final pair is
/// guaranteed to apply to every canonical solution.
const MUTATIONS: &[(&str, &str)] = &[
    ("a + b", "a - b"),
    ("+ i", "- i"),
    (" > ", " < "),
    ("&&", "||"),
    (" and ", " or "),
    ("% 2", "% 3"),
    ("result = 0", "result = 1"),
];

fn buggy_variants(canonical: &str, count: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let start = rng.gen_range(0..MUTATIONS.len());
    let mut out = Vec::new();
    for step in 0..MUTATIONS.len() {
        let (from, to) = MUTATIONS[(start + step) % MUTATIONS.len()];
        if canonical.contains(from) {
            let mutated = canonical.replacen(from, to, 1);
            if mutated != *canonical && !out.contains(&mutated) {
                out.push(mutated);
            }
        }
        if out.len() == count {
            break;
        }
    }
    while out.len() < count {
        let filler = format!("{canonical}\n{}", "// incomplete");
        if out.contains(&filler) {
            break;
        }
        out.push(filler);
    }
    out
}

fn build_problems(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<SynthProblem> {
    let mut problems = Vec::with_capacity(config.n_problems);
    for p in 0..config.n_problems {
        let n_fam = rng.gen_range(1..=config.max_families_per_problem.min(FAMILIES.len()));
        let mut family_indices: Vec<usize> = (0..FAMILIES.len()).collect();
        family_indices.shuffle(rng);
        family_indices.truncate(n_fam);
        family_indices.sort_unstable();
        let families: Vec<&ConceptFamily> =
            family_indices.iter().map(|&i| &FAMILIES[i]).collect();

        let name = format!("task{p}");
        let statement = compose_statement(&name, &families, rng);
        let mut tags: Vec<String> = Vec::new();
        for f in &families {
            if !tags.iter().any(|t| t == f.human_tag) {
                tags.push(f.human_tag.to_string());
            }
        }
        let canonical = canonical_code(&name, &families, config.language);
        let buggy = buggy_variants(&canonical, 2, rng);
        let difficulty = rng.gen_range(0.25..0.75);
        problems.push(SynthProblem {
            problem: Problem {
                problem_id: format!("p{p:03}"),
                statement,
                human_kc_tags: tags,
            },
            family_indices,
            difficulty,
            canonical,
            buggy,
        });
    }
    problems
}

/// Generate a synthetic dataset. The same configuration always produces
/// the same dataset.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let problems = build_problems(config, &mut rng);

    let mut sequences = Vec::with_capacity(config.n_students);
    for s in 0..config.n_students {
        let student_id = format!("s{s:03}");
        let skills: Vec<f64> = (0..FAMILIES.len())
            .map(|_| rng.gen_range(0.05..0.95))
            .collect();

        let mut order: Vec<usize> = (0..config.n_problems).collect();
        order.shuffle(&mut rng);
        let mut attempted: Vec<usize> = order
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(config.attempt_rate))
            .collect();
        if attempted.is_empty() {
            attempted.push(s % config.n_problems);
        }

        let mut submissions = Vec::new();
        let mut next_order = 0u64;
        let emit = |p: usize, rng: &mut ChaCha8Rng, next_order: &mut u64,
                        submissions: &mut Vec<Submission>| {
            let sp = &problems[p];
            let skill = sp
                .family_indices
                .iter()
                .map(|&f| skills[f])
                .sum::<f64>()
                / sp.family_indices.len() as f64;
            let correct = if config.noise == 0.0 {
                skill >= sp.difficulty
            } else {
                rng.gen_bool(sigmoid((skill - sp.difficulty) / config.noise))
            };
            let code = if correct {
                sp.canonical.clone()
            } else {
                sp.buggy[rng.gen_range(0..sp.buggy.len())].clone()
            };
            submissions.push(Submission {
                student_id: student_id.clone(),
                problem_id: sp.problem.problem_id.clone(),
                order_index: *next_order,
                code,
                correct,
                timestamp: None,
            });
            *next_order += 1;
        };

        let mut repeats = Vec::new();
        for &p in &attempted {
            emit(p, &mut rng, &mut next_order, &mut submissions);
            if rng.gen_bool(config.duplicate_rate) {
                repeats.push(p);
            }
        }
        for p in repeats {
            emit(p, &mut rng, &mut next_order, &mut submissions);
        }
        sequences.push(StudentSequence {
            student_id,
            submissions,
        });
    }

    let dataset = Dataset {
        problems: problems.into_iter().map(|p| p.problem).collect(),
        sequences,
    };
    dataset.validate()?;
    Ok(dataset)
}
