use crate::error::{bail, Result};

/// Plateau-based stopping rule over dev-BLEU evaluations.
///
/// After evaluation `n > window`, training stops when the best score of the
/// last `window` evaluations exceeds the best earlier score by less than
/// `min_delta`. Independently, training stops once `max_batches` batches
/// have been run.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceMonitor {
    pub eval_interval: u64,
    pub window: usize,
    pub min_delta: f64,
    pub max_batches: u64,
    history: Vec<f64>,
}

impl ConvergenceMonitor {
    pub fn new(eval_interval: u64, window: usize, min_delta: f64, max_batches: u64) -> Result<Self> {
        if eval_interval == 0 || window == 0 || max_batches == 0 {
            bail!(Config, "eval interval, window and batch cap must be positive");
        }
        if !(min_delta >= 0.0) {
            bail!(Config, "minimum improvement must be non-negative");
        }
        Ok(Self {
            eval_interval,
            window,
            min_delta,
            max_batches,
            history: Vec::new(),
        })
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    /// Whether a dev evaluation is due after `batches` batches.
    pub fn eval_due(&self, batches: u64) -> bool {
        batches > 0 && (batches % self.eval_interval == 0 || batches >= self.max_batches)
    }

    pub fn at_cap(&self, batches: u64) -> bool {
        batches >= self.max_batches
    }

    /// Records a dev score and reports whether the plateau rule fires.
    pub fn observe(&mut self, bleu: f64) -> bool {
        self.history.push(bleu);
        plateaued(&self.history, self.window, self.min_delta)
    }
}

/// The stopping rule as a pure function of a score trace.
pub fn plateaued(history: &[f64], window: usize, min_delta: f64) -> bool {
    let n = history.len();
    if n <= window {
        return false;
    }
    let recent = history[n - window..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let before = history[..n - window].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    recent - before < min_delta
}

/// Number of evaluations after which a trace stops, if it does.
pub fn stopping_eval(history: &[f64], window: usize, min_delta: f64) -> Option<usize> {
    (1..=history.len()).find(|&n| plateaued(&history[..n], window, min_delta))
}
