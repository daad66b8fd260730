//! Loss, optimiser, learning-rate schedules and the training loops for plain
//! networks and for the search supernet.

mod config;
mod optim;
mod trainer;

pub use config::{LrSchedule, SearchConfig, TrainConfig};
pub use optim::{cosine_lr, sgd_step, step_lr, Sgd};
pub use trainer::{search, search_with, train, train_with, EpochMetrics, SearchEpoch, TrainSet};

use crate::error::Result;
use crate::tape::{Tape, Var};

/// Mean over the batch of `−Σ q log softmax(logits)` with
/// `q = (1 − ε)·onehot + ε/K`.
pub fn label_smoothed_ce(tape: &mut Tape, logits: Var, labels: &[usize], epsilon: f64) -> Result<Var> {
    tape.label_smoothed_ce(logits, labels, epsilon)
}
