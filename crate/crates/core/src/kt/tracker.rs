//! Recurrent knowledge tracker: an LSTM over (problem, code) embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::autodiff::{Matrix, ParamSet, Tape, Var};
use crate::{Error, Result};

/// LSTM cell state threaded through a student's submission sequence.
#[derive(Debug, Clone, Copy)]
pub struct TrackerState {
    pub h: Var,
    pub c: Var,
}

/// h_t = LSTM(h_{t−1}, p_t, c_t): input is the concatenation of the
/// problem embedding and the code embedding, hidden size D.
#[derive(Debug, Clone)]
pub struct LstmTracker {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmTracker {
    pub fn new(input_dim: usize, hidden_dim: usize) -> Self {
        LstmTracker {
            input_dim,
            hidden_dim,
        }
    }

    /// Fresh parameters: "lstm.w" (input×4D), "lstm.u" (D×4D), "lstm.b"
    /// (1×4D), gate order i, f, g, o.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.hidden_dim;
        let scale = 1.0 / (self.input_dim.max(d) as f64).sqrt();
        let mut params = ParamSet::new();
        params.insert(
            "lstm.w",
            Matrix::randn(self.input_dim, 4 * d, scale, &mut rng),
        );
        params.insert("lstm.u", Matrix::randn(d, 4 * d, scale, &mut rng));
        params.insert("lstm.b", Matrix::zeros(1, 4 * d));
        params
    }

    /// Zero h_0 and c_0 leaves on the tape.
    pub fn initial_state(&self, tape: &mut Tape) -> TrackerState {
        TrackerState {
            h: tape.leaf(Matrix::zeros(1, self.hidden_dim)),
            c: tape.leaf(Matrix::zeros(1, self.hidden_dim)),
        }
    }

    /// One recurrence step. `problem` and `code` are 1×d row vectors whose
    /// widths must sum to the tracker input dimension.
    pub fn step(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        state: TrackerState,
        problem: Var,
        code: Var,
    ) -> Result<TrackerState> {
        let (pr, pc) = tape.shape(problem);
        let (cr, cc) = tape.shape(code);
        if pr != 1 || cr != 1 || pc + cc != self.input_dim {
            return Err(Error::domain(format!(
                "tracker input must be 1×{} split as problem+code, got 1×{pc} and 1×{cc}",
                self.input_dim
            )));
        }
        let d = self.hidden_dim;
        let x = tape.concat_cols(&[problem, code])?;
        let w = tape.param(params, "lstm.w");
        let u = tape.param(params, "lstm.u");
        let b = tape.param(params, "lstm.b");
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(state.h, u)?;
        let pre = tape.add(xw, hu)?;
        let pre = tape.add(pre, b)?;
        let i_raw = tape.col_slice(pre, 0, d)?;
        let f_raw = tape.col_slice(pre, d, d)?;
        let g_raw = tape.col_slice(pre, 2 * d, d)?;
        let o_raw = tape.col_slice(pre, 3 * d, d)?;
        let i = tape.sigmoid(i_raw);
        let f = tape.sigmoid(f_raw);
        let g = tape.tanh(g_raw);
        let o = tape.sigmoid(o_raw);
        let fc = tape.hadamard(f, state.c)?;
        let ig = tape.hadamard(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        let h = tape.hadamard(o, tc)?;
        Ok(TrackerState { h, c })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn row(seed: u64, cols: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::randn(1, cols, 1.0, &mut rng)
    }

    #[test]
    fn zero_everything_gives_zero_state_deterministically() {
        let tracker = LstmTracker::new(6, 4);
        let mut params = tracker.init_params(0);
        for (_, m) in params.iter_mut() {
            for v in &mut m.data {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let state = tracker.initial_state(&mut tape);
        let p = tape.leaf(Matrix::zeros(1, 4));
        let c = tape.leaf(Matrix::zeros(1, 2));
        let next = tracker.step(&mut tape, &params, state, p, c).unwrap();
        assert!(tape.value(next.h).data.iter().all(|&v| v == 0.0));
        assert!(tape.value(next.c).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_inputs_give_identical_states() {
        let tracker = LstmTracker::new(5, 3);
        let params = tracker.init_params(1);
        let run = || {
            let mut tape = Tape::new();
            let state = tracker.initial_state(&mut tape);
            let p = tape.leaf(row(10, 3));
            let c = tape.leaf(row(11, 2));
            let next = tracker.step(&mut tape, &params, state, p, c).unwrap();
            tape.value(next.h).data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn state_values_are_finite_and_bounded() {
        let tracker = LstmTracker::new(4, 8);
        let params = tracker.init_params(2);
        let mut tape = Tape::new();
        let mut state = tracker.initial_state(&mut tape);
        for step in 0..20 {
            let p = tape.leaf(row(100 + step, 2));
            let c = tape.leaf(row(200 + step, 2));
            state = tracker.step(&mut tape, &params, state, p, c).unwrap();
        }
        for &v in &tape.value(state.h).data {
            assert!(v.is_finite() && v.abs() <= 1.0, "h entries stay in tanh range");
        }
    }

    #[test]
    fn mismatched_input_widths_are_rejected() {
        let tracker = LstmTracker::new(6, 4);
        let params = tracker.init_params(3);
        let mut tape = Tape::new();
        let state = tracker.initial_state(&mut tape);
        let p = tape.leaf(Matrix::zeros(1, 3));
        let c = tape.leaf(Matrix::zeros(1, 2));
        assert!(tracker.step(&mut tape, &params, state, p, c).is_err());
    }

    #[test]
    fn multi_step_gradient_matches_finite_differences() {
        let tracker = LstmTracker::new(4, 3);
        let base = tracker.init_params(4);
        let eval = |params: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let mut state = tracker.initial_state(&mut tape);
            for step in 0..3u64 {
                let p = tape.leaf(row(300 + step, 2));
                let c = tape.leaf(row(400 + step, 2));
                state = tracker.step(&mut tape, params, state, p, c).unwrap();
            }
            let sq = tape.hadamard(state.h, state.h).unwrap();
            let loss = tape.sum_all(sq);
            tape.value(loss).scalar()
        };
        let mut tape = Tape::new();
        let mut state = tracker.initial_state(&mut tape);
        for step in 0..3u64 {
            let p = tape.leaf(row(300 + step, 2));
            let c = tape.leaf(row(400 + step, 2));
            state = tracker.step(&mut tape, &base, state, p, c).unwrap();
        }
        let sq = tape.hadamard(state.h, state.h).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for name in base.names() {
            let matrix = base.get(name);
            for entry in 0..matrix.data.len() {
                let mut plus = base.clone();
                plus.get_mut(name).data[entry] += h;
                let mut minus = base.clone();
                minus.get_mut(name).data[entry] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = grads.get(name).map(|m| m.data[entry]).unwrap_or(0.0);
                let scale = numeric.abs().max(analytic.abs()).max(1.0);
                assert!(
                    (numeric - analytic).abs() / scale < 1e-4,
                    "{name}[{entry}]: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }
}
