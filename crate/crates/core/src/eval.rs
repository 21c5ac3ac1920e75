//! Metrics: AUC, F1, accuracy for correctness prediction; CodeBLEU for
//! code prediction; split aggregation and a paired t test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embed::code_tokens;
use crate::lang::Language;
use crate::{Error, Result};

/// Rank-based (Mann–Whitney) AUC; tied scores contribute 0.5 per pair.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::domain(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::domain("labels must be 0 or 1".to_string()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::domain("scores must be finite".to_string()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both classes present".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid_rank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Confusion-matrix F1 and accuracy at a threshold; positive class is
/// label 1, and zero predicted and actual positives give F1 = 0.
pub fn f1_and_accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::domain(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::domain("cannot score an empty prediction set".to_string()));
    }
    let (mut tp, mut tn, mut fp, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (&score, &label) in scores.iter().zip(labels) {
        let predicted = score >= threshold;
        match (predicted, label == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => tn += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / scores.len() as f64;
    let denom = 2 * tp + fp + fne;
    let f1 = if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    };
    Ok((f1, accuracy))
}

const NGRAM_ORDER: usize = 4;
const NGRAM_EPSILON: f64 = 0.1;
const KEYWORD_WEIGHT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeBleuBreakdown {
    pub ngram: f64,
    pub weighted_ngram: f64,
    pub syntax: f64,
    pub dataflow: f64,
    pub score: f64,
    pub candidate_parse_failed: bool,
}

/// CodeBLEU: weighted sum of smoothed n-gram BLEU, keyword-weighted
/// n-gram match, syntax-subtree match, and dataflow (def-use) match.
pub fn codebleu(
    candidate: &str,
    reference: &str,
    language: Language,
    weights: [f64; 4],
) -> Result<CodeBleuBreakdown> {
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::domain("CodeBLEU weights must be non-negative".to_string()));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::domain("CodeBLEU weights must sum to 1".to_string()));
    }
    let reference_tokens = code_tokens(reference);
    if reference_tokens.is_empty() {
        return Err(Error::domain("cannot score against an empty reference".to_string()));
    }
    let candidate_tokens = code_tokens(candidate);

    let ngram = bleu(&candidate_tokens, &reference_tokens, |_| 1.0);
    let keyword_weight = |gram: &[String]| {
        if gram.iter().any(|t| language.keywords().contains(&t.as_str())) {
            KEYWORD_WEIGHT
        } else {
            1.0
        }
    };
    let weighted_ngram = bleu(&candidate_tokens, &reference_tokens, keyword_weight);

    let reference_tree = parse_syntax(reference, language);
    let candidate_tree = parse_syntax(candidate, language);
    let candidate_parse_failed = candidate_tree.is_none();
    let syntax = match (&candidate_tree, &reference_tree) {
        (Some(cand), Some(reference)) => subtree_match(cand, reference, language),
        _ => 0.0,
    };
    let dataflow = if candidate_parse_failed {
        0.0
    } else {
        dataflow_match(candidate, reference, language)
    };

    let score =
        weights[0] * ngram + weights[1] * weighted_ngram + weights[2] * syntax + weights[3] * dataflow;
    Ok(CodeBleuBreakdown {
        ngram,
        weighted_ngram,
        syntax,
        dataflow,
        score,
        candidate_parse_failed,
    })
}

/// Smoothed modified-precision BLEU up to 4-grams with brevity penalty.
/// `weight` scales how much each n-gram counts (keyword weighting).
fn bleu(candidate: &[String], reference: &[String], weight: impl Fn(&[String]) -> f64) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=NGRAM_ORDER {
        let mut reference_counts: BTreeMap<&[String], f64> = BTreeMap::new();
        if reference.len() >= n {
            for gram in reference.windows(n) {
                *reference_counts.entry(gram).or_insert(0.0) += weight(gram);
            }
        }
        let mut matched = 0.0;
        let mut total = 0.0;
        if candidate.len() >= n {
            let mut candidate_counts: BTreeMap<&[String], f64> = BTreeMap::new();
            for gram in candidate.windows(n) {
                let w = weight(gram);
                total += w;
                *candidate_counts.entry(gram).or_insert(0.0) += w;
            }
            for (gram, count) in candidate_counts {
                let clip = reference_counts.get(gram).copied().unwrap_or(0.0);
                matched += count.min(clip);
            }
        }
        let precision = (matched + NGRAM_EPSILON) / (total + NGRAM_EPSILON);
        log_sum += precision.ln() / NGRAM_ORDER as f64;
    }
    let brevity = if candidate.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    };
    brevity * log_sum.exp()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum TreeItem {
    Leaf(String),
    Node(SyntaxNode),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct SyntaxNode {
    kind: char,
    items: Vec<TreeItem>,
}

fn token_class(token: &str, language: Language) -> String {
    let first = token.chars().next().unwrap_or(' ');
    if language.keywords().contains(&token) {
        token.to_string()
    } else if first.is_ascii_digit() {
        "num".to_string()
    } else if first.is_alphabetic() || first == '_' {
        "id".to_string()
    } else {
        token.to_string()
    }
}

/// Lightweight grammar: bracket nesting for both languages, plus
/// indentation blocks for Python. Returns None on mismatched nesting.
fn parse_syntax(code: &str, language: Language) -> Option<SyntaxNode> {
    let mut root = SyntaxNode {
        kind: 'R',
        items: Vec::new(),
    };
    let mut stack: Vec<SyntaxNode> = vec![];
    let mut indents: Vec<usize> = vec![0];

    fn close_top(root: &mut SyntaxNode, stack: &mut Vec<SyntaxNode>, expected: char) -> Option<()> {
        let node = stack.pop()?;
        if node.kind != expected {
            return None;
        }
        match stack.last_mut() {
            Some(parent) => parent.items.push(TreeItem::Node(node)),
            None => root.items.push(TreeItem::Node(node)),
        }
        Some(())
    }

    for line in code.lines() {
        // Indentation only matters outside brackets, where the stack
        // holds nothing but indent blocks.
        let brackets_open = stack.iter().any(|n| n.kind != 'B');
        if language == Language::Python && !line.trim().is_empty() && !brackets_open {
            let indent = line.len() - line.trim_start().len();
            let current = *indents.last().unwrap();
            if indent > current {
                indents.push(indent);
                stack.push(SyntaxNode {
                    kind: 'B',
                    items: Vec::new(),
                });
            } else if indent < current {
                while *indents.last().unwrap() > indent {
                    indents.pop();
                    close_top(&mut root, &mut stack, 'B')?;
                }
                if *indents.last().unwrap() != indent {
                    return None;
                }
            }
        }
        for token in code_tokens(line) {
            match token.as_str() {
                "(" | "[" | "{" => stack.push(SyntaxNode {
                    kind: token.chars().next().unwrap(),
                    items: Vec::new(),
                }),
                ")" | "]" | "}" => {
                    let expected = match token.as_str() {
                        ")" => '(',
                        "]" => '[',
                        _ => '{',
                    };
                    close_top(&mut root, &mut stack, expected)?;
                }
                _ => {
                    let leaf = TreeItem::Leaf(token_class(&token, language));
                    match stack.last_mut() {
                        Some(open) => open.items.push(leaf),
                        None => root.items.push(leaf),
                    }
                }
            }
        }
    }
    while indents.len() > 1 {
        indents.pop();
        close_top(&mut root, &mut stack, 'B')?;
    }
    if !stack.is_empty() {
        return None;
    }
    Some(root)
}

fn collect_signatures(node: &SyntaxNode, out: &mut BTreeMap<String, usize>) -> String {
    let mut parts = Vec::with_capacity(node.items.len());
    for item in &node.items {
        match item {
            TreeItem::Leaf(class) => parts.push(class.clone()),
            TreeItem::Node(child) => parts.push(collect_signatures(child, out)),
        }
    }
    let signature = format!("{}({})", node.kind, parts.join(","));
    *out.entry(signature.clone()).or_insert(0) += 1;
    signature
}

/// Fraction of reference subtrees present in the candidate (multiset).
fn subtree_match(candidate: &SyntaxNode, reference: &SyntaxNode, _language: Language) -> f64 {
    let mut candidate_sigs = BTreeMap::new();
    collect_signatures(candidate, &mut candidate_sigs);
    let mut reference_sigs = BTreeMap::new();
    collect_signatures(reference, &mut reference_sigs);
    let total: usize = reference_sigs.values().sum();
    let matched: usize = reference_sigs
        .iter()
        .map(|(sig, &count)| count.min(candidate_sigs.get(sig).copied().unwrap_or(0)))
        .sum();
    matched as f64 / total as f64
}

const ASSIGN_BLOCKERS: [&str; 10] = ["=", "<", ">", "!", "+", "-", "*", "/", "%", ":"];
const COMPOUND_OPS: [&str; 7] = ["+", "-", "*", "/", "%", "&", "|"];

fn is_identifier(token: &str, language: Language) -> bool {
    let first = token.chars().next().unwrap_or(' ');
    (first.is_alphabetic() || first == '_')
        && !language.keywords().contains(&token)
}

/// Def-use edges (lhs, rhs-use) with identifiers normalized by first
/// appearance, so renaming variables leaves the edges unchanged.
fn dataflow_edges(code: &str, language: Language) -> BTreeMap<(usize, usize), usize> {
    // Pre-number identifiers in appearance order over the whole stream.
    let mut first_seen: BTreeMap<String, usize> = BTreeMap::new();
    for token in code_tokens(code) {
        if is_identifier(&token, language) {
            let next = first_seen.len();
            first_seen.entry(token).or_insert(next);
        }
    }
    let mut edges: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for line in code.lines() {
        for statement in line.split(';') {
            let tokens = code_tokens(statement);
            for i in 0..tokens.len() {
                if tokens[i] != "=" {
                    continue;
                }
                if i + 1 < tokens.len() && tokens[i + 1] == "=" {
                    continue;
                }
                if i == 0 {
                    continue;
                }
                let prev = tokens[i - 1].as_str();
                let (lhs_index, compound) = if ASSIGN_BLOCKERS.contains(&prev) {
                    if COMPOUND_OPS.contains(&prev) && i >= 2 {
                        (i - 2, true)
                    } else {
                        continue;
                    }
                } else {
                    (i - 1, false)
                };
                if !is_identifier(&tokens[lhs_index], language) {
                    continue;
                }
                let lhs = first_seen[&tokens[lhs_index]];
                if compound {
                    *edges.entry((lhs, lhs)).or_insert(0) += 1;
                }
                for use_token in &tokens[i + 1..] {
                    if is_identifier(use_token, language) {
                        let rhs = first_seen[use_token.as_str()];
                        *edges.entry((lhs, rhs)).or_insert(0) += 1;
                    }
                }
            }
        }
    }
    edges
}

/// Fraction of reference def-use edges matched in the candidate; 1.0 when
/// the reference has none.
fn dataflow_match(candidate: &str, reference: &str, language: Language) -> f64 {
    let reference_edges = dataflow_edges(reference, language);
    let total: usize = reference_edges.values().sum();
    if total == 0 {
        return 1.0;
    }
    let candidate_edges = dataflow_edges(candidate, language);
    let matched: usize = reference_edges
        .iter()
        .map(|(edge, &count)| count.min(candidate_edges.get(edge).copied().unwrap_or(0)))
        .sum();
    matched as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split_index: Option<usize>,
    pub n_examples: usize,
    pub auc: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub codebleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub n_splits: usize,
    pub n_examples: usize,
    pub mean_auc: f64,
    pub std_auc: Option<f64>,
    pub mean_f1: f64,
    pub std_f1: Option<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: Option<f64>,
    pub mean_codebleu: Option<f64>,
    pub std_codebleu: Option<f64>,
}

fn mean_and_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Mean ± sample std across splits; std only when there are ≥ 2 splits.
pub fn aggregate(reports: &[MetricReport]) -> Result<AggregateMetrics> {
    if reports.is_empty() {
        return Err(Error::domain("no split reports to aggregate".to_string()));
    }
    let aucs: Vec<f64> = reports.iter().map(|r| r.auc).collect();
    let f1s: Vec<f64> = reports.iter().map(|r| r.f1).collect();
    let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let bleus: Vec<f64> = reports.iter().filter_map(|r| r.codebleu).collect();
    let (mean_auc, std_auc) = mean_and_std(&aucs);
    let (mean_f1, std_f1) = mean_and_std(&f1s);
    let (mean_accuracy, std_accuracy) = mean_and_std(&accs);
    let (mean_codebleu, std_codebleu) = if bleus.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_and_std(&bleus);
        (Some(m), s)
    };
    Ok(AggregateMetrics {
        n_splits: reports.len(),
        n_examples: reports.iter().map(|r| r.n_examples).sum(),
        mean_auc,
        std_auc,
        mean_f1,
        std_f1,
        mean_accuracy,
        std_accuracy,
        mean_codebleu,
        std_codebleu,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub t_statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub significant_at_05: bool,
}

/// Two-sided paired t test on per-split metric pairs.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::domain("paired test needs equal-length series".to_string()));
    }
    if a.len() < 2 {
        return Err(Error::domain("paired test needs at least two pairs".to_string()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = diffs.len() - 1;
    if var == 0.0 {
        let p_value = if mean == 0.0 { 1.0 } else { 0.0 };
        return Ok(PairedTTest {
            t_statistic: if mean == 0.0 { 0.0 } else { f64::INFINITY * mean.signum() },
            degrees_of_freedom: df,
            p_value,
            significant_at_05: p_value < 0.05,
        });
    }
    let t = mean / (var / n).sqrt();
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::Numerical(format!("t distribution: {e}")))?;
    let p_value = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(PairedTTest {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value,
        significant_at_05: p_value < 0.05,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, (&sp, &lp)) in scores.iter().zip(labels).enumerate() {
            if lp != 1 {
                continue;
            }
            for (j, (&sn, &ln)) in scores.iter().zip(labels).enumerate() {
                if ln != 0 || i == j {
                    continue;
                }
                pairs += 1.0;
                if sp > sn {
                    wins += 1.0;
                } else if sp == sn {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_basic_values() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert!(matches!(
            auc(&[0.5, 0.6], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auc_matches_pairwise_oracle_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = 50;
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let fast = auc(&scores, &labels).unwrap();
            let slow = brute_force_auc(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transform_and_permutation() {
        let scores = vec![0.1, 0.4, 0.35, 0.8, 0.65];
        let labels = vec![0u8, 0, 1, 1, 1];
        let base = auc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp()).collect();
        assert_eq!(auc(&transformed, &labels).unwrap(), base);
        let perm = [4usize, 2, 0, 3, 1];
        let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let pl: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        assert_eq!(auc(&ps, &pl).unwrap(), base);
    }

    #[test]
    fn f1_accuracy_examples_and_oracle() {
        let (f1, acc) = f1_and_accuracy(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0], 0.5).unwrap();
        assert_eq!((f1, acc), (1.0, 1.0));
        let (f1, acc) = f1_and_accuracy(&[0.1, 0.2], &[1, 1], 0.5).unwrap();
        assert_eq!(f1, 0.0, "no predicted positives gives F1 = 0");
        assert_eq!(acc, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = 30;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
            let (f1, acc) = f1_and_accuracy(&scores, &labels, 0.5).unwrap();
            let (mut tp, mut tn, mut fp, mut fne) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                match (scores[i] >= 0.5, labels[i] == 1) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fne += 1.0,
                    (false, false) => tn += 1.0,
                }
            }
            let expected_acc = (tp + tn) / n as f64;
            let expected_f1 = if 2.0 * tp + fp + fne == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fne)
            };
            assert_eq!((f1, acc), (expected_f1, expected_acc));
        }
    }

    const JAVA_SNIPPET: &str = "public int sum(int a, int b) {\n    int result = a + b;\n    return result;\n}";

    #[test]
    fn codebleu_identity_is_exactly_one() {
        let b = codebleu(JAVA_SNIPPET, JAVA_SNIPPET, Language::Java, [0.25; 4]).unwrap();
        assert_eq!(b.score, 1.0);
        assert!(!b.candidate_parse_failed);
    }

    #[test]
    fn codebleu_disjoint_unparseable_scores_below_floor() {
        let candidate = ") garbage ] tokens ( that share nothing";
        let b = codebleu(candidate, JAVA_SNIPPET, Language::Java, [0.25; 4]).unwrap();
        assert!(b.candidate_parse_failed, "mismatched brackets must flag");
        assert_eq!(b.syntax, 0.0);
        assert_eq!(b.dataflow, 0.0);
        assert!(b.score < 0.1, "got {}", b.score);
    }

    #[test]
    fn renamed_variables_outscore_shuffled_tokens() {
        let renamed = "public int sum(int x, int y) {\n    int output = x + y;\n    return output;\n}";
        let shuffled = "int return public { b int a ; result int } ) = b + sum ( a result int ,";
        let r = codebleu(renamed, JAVA_SNIPPET, Language::Java, [0.25; 4]).unwrap();
        let s = codebleu(shuffled, JAVA_SNIPPET, Language::Java, [0.25; 4]).unwrap();
        assert!(
            r.score > s.score,
            "renamed {} must beat shuffled {}",
            r.score,
            s.score
        );
        assert_eq!(r.syntax, 1.0, "identifier classes make renaming invisible to syntax");
        assert_eq!(r.dataflow, 1.0, "positional normalization makes renaming invisible");
    }

    #[test]
    fn codebleu_rejects_bad_weights() {
        assert!(codebleu("a", "a", Language::Java, [0.5, 0.5, 0.5, 0.5]).is_err());
        assert!(codebleu("a", "a", Language::Java, [-0.5, 0.5, 0.5, 0.5]).is_err());
        assert!(codebleu("a", "", Language::Java, [0.25; 4]).is_err());
    }

    #[test]
    fn codebleu_components_stay_in_range() {
        let cases = [
            ("int a = b + c;", "int a = b - c;"),
            ("while (n > 0) { n = n - 1; }", "for (int i = 0; i < n; i++) { s = s + i; }"),
            ("x", JAVA_SNIPPET),
        ];
        for (cand, reference) in cases {
            let b = codebleu(cand, reference, Language::Java, [0.25; 4]).unwrap();
            for v in [b.ngram, b.weighted_ngram, b.syntax, b.dataflow, b.score] {
                assert!((0.0..=1.0).contains(&v), "{cand}: {v}");
            }
        }
    }

    #[test]
    fn python_indent_mismatch_fails_parse() {
        let bad = "def f():\n    x = 1\n  y = 2";
        let b = codebleu(bad, "def f():\n    x = 1", Language::Python, [0.25; 4]).unwrap();
        assert!(b.candidate_parse_failed);
    }

    #[test]
    fn python_identity_is_one() {
        let code = "def f(a, b):\n    total = a + b\n    return total";
        let b = codebleu(code, code, Language::Python, [0.25; 4]).unwrap();
        assert_eq!(b.score, 1.0);
    }

    #[test]
    fn aggregate_reports_mean_and_std() {
        let reports = vec![
            MetricReport {
                split_index: Some(0),
                n_examples: 10,
                auc: 0.8,
                f1: 0.7,
                accuracy: 0.75,
                codebleu: Some(0.5),
            },
            MetricReport {
                split_index: Some(1),
                n_examples: 12,
                auc: 0.6,
                f1: 0.5,
                accuracy: 0.65,
                codebleu: Some(0.3),
            },
        ];
        let agg = aggregate(&reports).unwrap();
        assert!((agg.mean_auc - 0.7).abs() < 1e-12);
        let expected_std = ((0.1f64.powi(2) * 2.0) / 1.0).sqrt();
        assert!((agg.std_auc.unwrap() - expected_std).abs() < 1e-12);
        assert_eq!(agg.n_examples, 22);

        let single = aggregate(&reports[..1]).unwrap();
        assert!(single.std_auc.is_none(), "std only for multi-split aggregates");
    }

    #[test]
    fn paired_t_test_matches_known_value() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.0, 0.0, 0.0];
        let t = paired_t_test(&a, &b).unwrap();
        assert!((t.t_statistic - 3.4641016151377544).abs() < 1e-9);
        assert_eq!(t.degrees_of_freedom, 2);
        assert!((t.p_value - 0.0742).abs() < 1e-3, "got {}", t.p_value);
        assert!(!t.significant_at_05);

        let same = paired_t_test(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(same.p_value, 1.0);
    }
}
