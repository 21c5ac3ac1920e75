//! The KCGen-KT model: recurrent knowledge state, mastery head, soft
//! mastery tokens, knowledge-guided prompts, and the three losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autodiff::{Matrix, ParamSet, Tape, Var, BCE_EPSILON};
use super::backbone::Backbone;
use super::tokenizer::EOS;
use super::tracker::{LstmTracker, TrackerState};
use crate::data::{Dataset, Problem, Submission};
use crate::embed::{Embedder, EmbeddingVector};
use crate::hash::mix_seed;
use crate::pipeline::QMatrix;
use crate::{Error, Result};

/// Paper-default dimension of the knowledge state vector.
pub const DEFAULT_KNOWLEDGE_DIM: usize = 512;

/// Binary cross-entropy with the prediction clamped to [ε, 1−ε].
pub fn bce_loss(label: f64, prediction: f64) -> Result<f64> {
    if label != 0.0 && label != 1.0 {
        return Err(Error::domain(format!(
            "correctness label must be 0 or 1, got {label}"
        )));
    }
    let p = prediction.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    Ok(-(label * p.ln() + (1.0 - label) * (1.0 - p).ln()))
}

/// ŷ = masked mean of mastery over the KCs the problem exercises.
pub fn aggregate_kc_mastery(mastery: &[f64], q_row: &[u8]) -> Result<f64> {
    if mastery.len() != q_row.len() {
        return Err(Error::domain(format!(
            "mastery length {} != q row length {}",
            mastery.len(),
            q_row.len()
        )));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (m, &q) in mastery.iter().zip(q_row) {
        if q == 1 {
            sum += m;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::domain(
            "problem is associated with no KCs (all-zero q row)".to_string(),
        ));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_codegen: f64,
    pub l_corrpred: f64,
    pub l_kc: f64,
    pub total: f64,
}

/// total = λ(L_CodeGen + L_CorrPred) + (1−λ)L_KC.
pub fn total_loss(l_codegen: f64, l_corrpred: f64, l_kc: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::domain(format!("lambda must be in [0, 1], got {lambda}")));
    }
    Ok(LossBreakdown {
        l_codegen,
        l_corrpred,
        l_kc,
        total: lambda * (l_codegen + l_corrpred) + (1.0 - lambda) * l_kc,
    })
}

/// s = m·emb_true + (1−m)·emb_false, differentiable in all three inputs.
pub fn soften_mastery(tape: &mut Tape, mastery: Var, emb_true: Var, emb_false: Var) -> Result<Var> {
    if tape.shape(mastery) != (1, 1) {
        return Err(Error::domain("mastery entry must be a 1x1 scalar".to_string()));
    }
    let on = tape.scalar_mul(mastery, emb_true)?;
    let complement = tape.affine(mastery, -1.0, 1.0);
    let off = tape.scalar_mul(complement, emb_false)?;
    tape.add(on, off)
}

/// Per-submission training graph: predictions and loss terms, plus the
/// mastery vector that went into the prompt.
pub struct SubmissionGraph {
    pub problem_id: String,
    pub correct: bool,
    pub a_hat: Var,
    pub y_hat: Var,
    pub l_code: Var,
    pub l_corr: Var,
    pub l_kc: Var,
    pub mastery: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentPrediction {
    pub correctness_probability: f64,
    pub generated_code: String,
    pub mastery: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KcgenKt<B> {
    pub backbone: B,
    tracker_params: ParamSet,
    head_params: ParamSet,
    knowledge_dim: usize,
    code_embed_dim: usize,
    k: usize,
    emb_true_id: usize,
    emb_false_id: usize,
}

impl<B: Backbone> KcgenKt<B> {
    /// Build a model over a backbone: LSTM tracker of hidden size
    /// `knowledge_dim`, mastery head for `k` KCs, correctness head, and
    /// the "true"/"false" embedding ids resolved once.
    pub fn new(
        backbone: B,
        knowledge_dim: usize,
        k: usize,
        code_embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if knowledge_dim == 0 || k == 0 || code_embed_dim == 0 {
            return Err(Error::domain(
                "knowledge_dim, k, and code_embed_dim must be positive".to_string(),
            ));
        }
        let emb_true_id = first_token_id(&backbone, "true")?;
        let emb_false_id = first_token_id(&backbone, "false")?;
        let tracker = LstmTracker::new(backbone.dim() + code_embed_dim, knowledge_dim);
        let tracker_params = tracker.init_params(mix_seed(seed, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
        let mut head_params = ParamSet::new();
        head_params.insert(
            "mastery.w",
            Matrix::randn(knowledge_dim, k, 1.0 / (knowledge_dim as f64).sqrt(), &mut rng),
        );
        head_params.insert("mastery.b", Matrix::zeros(1, k));
        head_params.insert(
            "corr.w",
            Matrix::randn(backbone.dim(), 1, 1.0 / (backbone.dim() as f64).sqrt(), &mut rng),
        );
        Ok(KcgenKt {
            backbone,
            tracker_params,
            head_params,
            knowledge_dim,
            code_embed_dim,
            k,
            emb_true_id,
            emb_false_id,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn knowledge_dim(&self) -> usize {
        self.knowledge_dim
    }

    pub fn code_embed_dim(&self) -> usize {
        self.code_embed_dim
    }

    pub fn tracker(&self) -> LstmTracker {
        LstmTracker::new(self.backbone.dim() + self.code_embed_dim, self.knowledge_dim)
    }

    pub fn tracker_params(&self) -> &ParamSet {
        &self.tracker_params
    }

    pub fn tracker_params_mut(&mut self) -> &mut ParamSet {
        &mut self.tracker_params
    }

    pub fn head_params(&self) -> &ParamSet {
        &self.head_params
    }

    pub fn head_params_mut(&mut self) -> &mut ParamSet {
        &mut self.head_params
    }

    /// m = σ(W_m h + b_m) for a 1×D knowledge state.
    pub fn compute_mastery(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        if tape.shape(h) != (1, self.knowledge_dim) {
            return Err(Error::domain(format!(
                "knowledge state must be 1×{}, got {:?}",
                self.knowledge_dim,
                tape.shape(h)
            )));
        }
        let w = tape.param(&self.head_params, "mastery.w");
        let b = tape.param(&self.head_params, "mastery.b");
        let pre = tape.matmul(h, w)?;
        let pre = tape.add(pre, b)?;
        Ok(tape.sigmoid(pre))
    }

    /// Soft token for one mastery entry, through the backbone's "true"
    /// and "false" embeddings.
    pub fn soft_token(&self, tape: &mut Tape, mastery_entry: Var) -> Result<Var> {
        let emb_true = self.backbone.embed_tokens(tape, &[self.emb_true_id])?;
        let emb_false = self.backbone.embed_tokens(tape, &[self.emb_false_id])?;
        soften_mastery(tape, mastery_entry, emb_true, emb_false)
    }

    /// Differentiable masked mean of mastery over the given KC columns.
    pub fn aggregate_mastery(
        &self,
        tape: &mut Tape,
        mastery: Var,
        kc_indices: &[usize],
    ) -> Result<Var> {
        if kc_indices.is_empty() {
            return Err(Error::domain(
                "problem is associated with no KCs (all-zero q row)".to_string(),
            ));
        }
        if let Some(&bad) = kc_indices.iter().find(|&&i| i >= self.k) {
            return Err(Error::domain(format!("KC index {bad} out of {}", self.k)));
        }
        let mut mask = Matrix::zeros(self.k, 1);
        let share = 1.0 / kc_indices.len() as f64;
        for &i in kc_indices {
            mask.data[i] = share;
        }
        let mask = tape.leaf(mask);
        tape.matmul(mastery, mask)
    }

    /// Knowledge-guided prompt: the template text embedded token by
    /// token, with each mastery slot occupied by its soft token. Returns
    /// a P×dim embedding sequence.
    pub fn assemble_prompt(
        &self,
        tape: &mut Tape,
        problem_statement: &str,
        kc_names: &[String],
        soft_tokens: &[Var],
    ) -> Result<Var> {
        if kc_names.len() != soft_tokens.len() {
            return Err(Error::domain(format!(
                "{} KC names but {} soft tokens",
                kc_names.len(),
                soft_tokens.len()
            )));
        }
        if kc_names.is_empty() {
            return Err(Error::integrity(
                "prompt needs at least one KC; the Q-matrix forbids problems without KCs",
            ));
        }
        let tokenizer = self.backbone.tokenizer();
        let mut parts: Vec<Var> = Vec::with_capacity(2 * kc_names.len() + 1);
        let mut text = format!("question: {problem_statement}.");
        for (j, (name, &soft)) in kc_names.iter().zip(soft_tokens).enumerate() {
            text.push_str(&format!(
                " KC {}: {name}. The student's mastery level on {name} is:",
                j + 1
            ));
            let ids = tokenizer.encode(&text);
            parts.push(self.backbone.embed_tokens(tape, &ids)?);
            if tape.shape(soft) != (1, self.backbone.dim()) {
                return Err(Error::domain("soft token must be a 1×dim row".to_string()));
            }
            parts.push(soft);
            text = ".".to_string();
        }
        let ids = tokenizer.encode(&text);
        parts.push(self.backbone.embed_tokens(tape, &ids)?);
        tape.concat_rows(&parts)
    }

    /// â = σ(W_p · r) with r the mean of last-layer hidden states over
    /// the first `prompt_len` positions.
    pub fn predict_correctness(&self, tape: &mut Tape, hidden: Var, prompt_len: usize) -> Result<Var> {
        let prompt_hidden = tape.row_slice(hidden, 0, prompt_len)?;
        let r = tape.mean_rows(prompt_hidden);
        let wp = tape.param(&self.head_params, "corr.w");
        let logit = tape.matmul(r, wp)?;
        Ok(tape.sigmoid(logit))
    }

    /// Teacher-forced code loss: summed NLL of `code_stream` starting at
    /// the final prompt position. `logits` covers the whole sequence of
    /// length prompt_len + code_stream.len() − 1.
    pub fn code_generation_loss(
        &self,
        tape: &mut Tape,
        logits: Var,
        prompt_len: usize,
        code_stream: &[usize],
    ) -> Result<Var> {
        if code_stream.is_empty() {
            return Err(Error::domain("cannot score empty code".to_string()));
        }
        if prompt_len == 0 {
            return Err(Error::domain("prompt must be non-empty".to_string()));
        }
        let (rows, _) = tape.shape(logits);
        let expected = prompt_len + code_stream.len() - 1;
        if rows != expected {
            return Err(Error::domain(format!(
                "logit rows {rows} != prompt {prompt_len} + code {} − 1",
                code_stream.len()
            )));
        }
        let mut targets: Vec<Option<usize>> = vec![None; prompt_len - 1];
        targets.extend(code_stream.iter().map(|&t| Some(t)));
        tape.nll_rows(logits, &targets)
    }

    /// Mean-pooled backbone token embeddings of the statement, detached:
    /// the tracker sees current embedding values but no gradient flows
    /// back into the table through this path.
    pub fn frozen_statement_embedding(&self, statement: &str) -> Result<Matrix> {
        let ids = self.backbone.tokenizer().encode(statement);
        if ids.is_empty() {
            return Err(Error::domain("cannot embed an empty statement".to_string()));
        }
        let table = self.backbone.params().get("emb.tok");
        let dim = self.backbone.dim();
        let mut pooled = Matrix::zeros(1, dim);
        for &id in &ids {
            for j in 0..dim {
                pooled.data[j] += table.at(id, j);
            }
        }
        for v in &mut pooled.data {
            *v /= ids.len() as f64;
        }
        Ok(pooled)
    }

    /// Full graph for one submission given the tracker state BEFORE it:
    /// mastery → prompt → backbone → losses, then the tracker update
    /// from the actual submission.
    #[allow(clippy::too_many_arguments)]
    pub fn step_submission(
        &self,
        tape: &mut Tape,
        state: TrackerState,
        problem: &Problem,
        q: &QMatrix,
        submission: &Submission,
        code_embedding: &EmbeddingVector,
    ) -> Result<(SubmissionGraph, TrackerState)> {
        if q.kcs.len() != self.k {
            return Err(Error::domain(format!(
                "Q-matrix has {} KCs but the mastery head has {}",
                q.kcs.len(),
                self.k
            )));
        }
        if code_embedding.dimension() != self.code_embed_dim {
            return Err(Error::domain(format!(
                "code embedding dimension {} != {}",
                code_embedding.dimension(),
                self.code_embed_dim
            )));
        }
        let kc_indices = q.kc_indices_for_problem(&problem.problem_id)?;
        let kc_labels = q.kc_labels_for_problem(&problem.problem_id)?;

        let mastery = self.compute_mastery(tape, state.h)?;
        let y_hat = self.aggregate_mastery(tape, mastery, &kc_indices)?;
        let mut soft_tokens = Vec::with_capacity(kc_indices.len());
        for &idx in &kc_indices {
            let entry = tape.col_slice(mastery, idx, 1)?;
            soft_tokens.push(self.soft_token(tape, entry)?);
        }
        let prompt = self.assemble_prompt(tape, &problem.statement, &kc_labels, &soft_tokens)?;
        let (prompt_len, _) = tape.shape(prompt);

        let code_ids = self.backbone.tokenizer().encode(&submission.code);
        if code_ids.is_empty() {
            return Err(Error::domain(format!(
                "submission to {} contains no code tokens",
                problem.problem_id
            )));
        }
        let mut code_stream: Vec<usize> = code_ids;
        code_stream.push(EOS);
        let window = self.backbone.max_seq_len();
        if prompt_len >= window {
            return Err(Error::domain(format!(
                "prompt of {prompt_len} tokens fills the {window}-token context window"
            )));
        }
        let max_inputs = window - prompt_len;
        if code_stream.len() - 1 > max_inputs {
            log::warn!(
                "truncating code for {} from {} to {} tokens to fit the context window",
                problem.problem_id,
                code_stream.len() - 1,
                max_inputs
            );
            code_stream.truncate(max_inputs);
            code_stream.push(EOS);
        }

        let input = if code_stream.len() > 1 {
            let code_emb = self
                .backbone
                .embed_tokens(tape, &code_stream[..code_stream.len() - 1])?;
            tape.concat_rows(&[prompt, code_emb])?
        } else {
            prompt
        };
        let hidden = self.backbone.forward(tape, input)?;
        let logits = self.backbone.logits(tape, hidden)?;
        let l_code = self.code_generation_loss(tape, logits, prompt_len, &code_stream)?;
        let a_hat = self.predict_correctness(tape, hidden, prompt_len)?;
        let label = submission.correct as u8 as f64;
        let l_corr = tape.bce(a_hat, label)?;
        let l_kc = tape.bce(y_hat, label)?;

        let p_t = tape.leaf(self.frozen_statement_embedding(&problem.statement)?);
        let c_t = tape.leaf(Matrix::row_vector(code_embedding.values.clone()));
        let next = self
            .tracker()
            .step(tape, &self.tracker_params, state, p_t, c_t)?;

        Ok((
            SubmissionGraph {
                problem_id: problem.problem_id.clone(),
                correct: submission.correct,
                a_hat,
                y_hat,
                l_code,
                l_corr,
                l_kc,
                mastery,
            },
            next,
        ))
    }

    /// Graphs for every submission in one student's sequence, threading
    /// the tracker state through in order.
    pub fn forward_student(
        &self,
        tape: &mut Tape,
        dataset: &Dataset,
        sequence: &[Submission],
        q: &QMatrix,
        embedder: &dyn Embedder,
    ) -> Result<Vec<SubmissionGraph>> {
        let mut state = self.tracker().initial_state(tape);
        let mut graphs = Vec::with_capacity(sequence.len());
        for submission in sequence {
            let problem = dataset.problem(&submission.problem_id).ok_or_else(|| {
                Error::integrity(format!(
                    "submission references unknown problem {}",
                    submission.problem_id
                ))
            })?;
            let code_embedding = embedder.embed(&submission.code)?;
            let (graph, next) =
                self.step_submission(tape, state, problem, q, submission, &code_embedding)?;
            graphs.push(graph);
            state = next;
        }
        Ok(graphs)
    }

    /// Track the history, then predict correctness, mastery, and a
    /// greedily decoded code string for the next problem.
    pub fn predict_student(
        &self,
        dataset: &Dataset,
        history: &[Submission],
        next_problem: &Problem,
        q: &QMatrix,
        embedder: &dyn Embedder,
        max_code_tokens: usize,
    ) -> Result<StudentPrediction> {
        if q.kcs.len() != self.k {
            return Err(Error::domain(format!(
                "Q-matrix has {} KCs but the mastery head has {}",
                q.kcs.len(),
                self.k
            )));
        }
        let kc_indices = q.kc_indices_for_problem(&next_problem.problem_id)?;
        let kc_labels = q.kc_labels_for_problem(&next_problem.problem_id)?;

        let mut tape = Tape::new();
        let tracker = self.tracker();
        let mut state = tracker.initial_state(&mut tape);
        for submission in history {
            let problem = dataset.problem(&submission.problem_id).ok_or_else(|| {
                Error::integrity(format!(
                    "history references unknown problem {}",
                    submission.problem_id
                ))
            })?;
            let p_t = tape.leaf(self.frozen_statement_embedding(&problem.statement)?);
            let code_embedding = embedder.embed(&submission.code)?;
            let c_t = tape.leaf(Matrix::row_vector(code_embedding.values));
            state = tracker.step(&mut tape, &self.tracker_params, state, p_t, c_t)?;
        }
        let mastery_var = self.compute_mastery(&mut tape, state.h)?;
        let mastery = tape.value(mastery_var).data.clone();

        let mut soft_tokens = Vec::with_capacity(kc_indices.len());
        for &idx in &kc_indices {
            let entry = tape.col_slice(mastery_var, idx, 1)?;
            soft_tokens.push(self.soft_token(&mut tape, entry)?);
        }
        let prompt =
            self.assemble_prompt(&mut tape, &next_problem.statement, &kc_labels, &soft_tokens)?;
        let prompt_matrix = tape.value(prompt).clone();
        let (prompt_len, _) = tape.shape(prompt);
        if prompt_len >= self.backbone.max_seq_len() {
            return Err(Error::domain(format!(
                "prompt of {prompt_len} tokens fills the {}-token context window",
                self.backbone.max_seq_len()
            )));
        }
        let hidden = self.backbone.forward(&mut tape, prompt)?;
        let a_hat_var = self.predict_correctness(&mut tape, hidden, prompt_len)?;
        let correctness_probability = tape.value(a_hat_var).scalar();

        let budget = max_code_tokens.min(self.backbone.max_seq_len() - prompt_len);
        let mut generated: Vec<usize> = Vec::new();
        loop {
            let mut step_tape = Tape::new();
            let prompt_leaf = step_tape.leaf(prompt_matrix.clone());
            let input = if generated.is_empty() {
                prompt_leaf
            } else {
                let gen_emb = self.backbone.embed_tokens(&mut step_tape, &generated)?;
                step_tape.concat_rows(&[prompt_leaf, gen_emb])?
            };
            let hidden = self.backbone.forward(&mut step_tape, input)?;
            let logits = self.backbone.logits(&mut step_tape, hidden)?;
            let values = step_tape.value(logits);
            let last = values.rows - 1;
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for j in 0..values.cols {
                let score = values.at(last, j);
                if score > best_score {
                    best_score = score;
                    best = j;
                }
            }
            if best == EOS || generated.len() == budget {
                break;
            }
            generated.push(best);
            if generated.len() == budget {
                break;
            }
        }
        let generated_code = self.backbone.tokenizer().decode(&generated)?;

        Ok(StudentPrediction {
            correctness_probability,
            generated_code,
            mastery,
        })
    }
}

fn first_token_id<B: Backbone>(backbone: &B, word: &str) -> Result<usize> {
    backbone
        .tokenizer()
        .encode(word)
        .first()
        .copied()
        .ok_or_else(|| Error::integrity(format!("\"{word}\" does not tokenize to any token")))
}
