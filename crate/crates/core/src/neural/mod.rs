//! Minimal differentiable-computation engine: tensors, a reverse-mode tape,
//! dense / graph-convolution / recurrent layers, losses, metrics and Adam.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, gradient_check, GradCheckOptions, GradCheckReport};
pub use layers::{Activation, Mode};
pub use loss::{bce_loss, f1_score, mape, mse_loss, F1Report, Mape, MapeAccumulator};
pub use params::{AdamConfig, Checkpoint, Gradients, ModelParams};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Early stopping on a validation loss with a fixed patience.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    bad_evals: usize,
    best_params: Option<ModelParams>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            bad_evals: 0,
            best_params: None,
        }
    }

    /// Records one evaluation; returns `true` when training should stop.
    pub fn observe(&mut self, val_loss: f64, params: &ModelParams) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_evals = 0;
            self.best_params = Some(params.clone());
        } else {
            self.bad_evals += 1;
        }
        self.bad_evals >= self.patience
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn into_best(self) -> Option<ModelParams> {
        self.best_params
    }
}
