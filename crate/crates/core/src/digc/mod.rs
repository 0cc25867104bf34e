//! Incident-aware speed predictor.
//!
//! Three branches feed a fused dense layer: a spatio-temporal branch (graph
//! convolution per history slot, weather, LSTM, one affine head per
//! predicted step), an incident branch (RNN over the latent features of
//! recent incidents) and a periodic branch (dense layer over the same slots
//! on previous days). The fused layer predicts the change from the last
//! observed snapshot. Ablation variants zero the disabled branches.

mod data;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::layers::{dense_named, dropout, gcn, init_dense, init_lstm, init_rnn, lstm_over_rows, rnn_masked};
use crate::neural::gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
use crate::neural::{Activation, AdamConfig, Checkpoint, Mode, ModelParams, Tape, Tensor, Var};
use crate::seed::{derive_seed, rng_for};

pub use data::{assemble_training_windows, DigcDataset, DigcScales, PredictionWindow, WEATHER_DIM};
pub(crate) use data::Batch;
pub use train::{
    evaluate, predict_dataset, run_baseline, save_predictions, score_predictions, train_digc, Baseline, BaselineReport, DigcMetrics,
    PredictionRow,
};

/// Which branches are active. Each variant includes the ones before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SpatioTemporal,
    SpatioTemporalPeriodic,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SpatioTemporal, Variant::SpatioTemporalPeriodic, Variant::Full];

    pub fn periodic(self) -> bool {
        self != Variant::SpatioTemporal
    }

    pub fn incidents(self) -> bool {
        self == Variant::Full
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SpatioTemporal => "spatio_temporal",
            Variant::SpatioTemporalPeriodic => "spatio_temporal_periodic",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DigcConfig {
    /// Predicted steps `k`.
    pub horizon: usize,
    /// History length `T` in slots.
    pub history: usize,
    /// Incidents started in `[t − lookback, t − 1]` feed the incident branch.
    pub incident_lookback: usize,
    pub periodic_days: usize,
    pub latent_width: usize,
    pub gcn_hidden: usize,
    pub snapshot_width: usize,
    pub lstm_hidden: usize,
    pub rnn_hidden: usize,
    pub periodic_width: usize,
    pub fusion_width: usize,
    pub keep_prob: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for DigcConfig {
    fn default() -> Self {
        DigcConfig {
            horizon: 1,
            history: 48,
            incident_lookback: 25,
            periodic_days: 5,
            latent_width: 16,
            gcn_hidden: 64,
            snapshot_width: 64,
            lstm_hidden: 64,
            rnn_hidden: 128,
            periodic_width: 64,
            fusion_width: 256,
            keep_prob: 0.5,
            adam: AdamConfig::default(),
            batch_size: 16,
            max_epochs: 20,
            patience: 6,
            val_fraction: 0.1,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl DigcConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.horizon,
            self.history,
            self.periodic_days,
            self.latent_width,
            self.gcn_hidden,
            self.snapshot_width,
            self.lstm_hidden,
            self.rnn_hidden,
            self.periodic_width,
            self.fusion_width,
            self.batch_size,
        ];
        if widths.contains(&0) {
            return Err(Error::InvalidInput("prediction config sizes must be positive".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::InvalidInput(format!("keep_prob {} outside (0, 1]", self.keep_prob)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidInput(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

/// Trained or freshly initialized predictor bound to a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct DigcNet {
    pub config: DigcConfig,
    pub params: ModelParams,
    pub scales: DigcScales,
    propagation: Tensor,
}

impl DigcNet {
    pub fn new(propagation: Tensor, scales: DigcScales, config: DigcConfig) -> Result<Self> {
        config.validate()?;
        let n = propagation.rows();
        if n == 0 || propagation.cols() != n {
            return Err(Error::shape("DigcNet::new", "propagation must be square and non-empty"));
        }
        let c = &config;
        let seed = derive_seed(c.seed, "digc/init");
        let out = c.horizon * n;
        let mut params = ModelParams::new();
        params.insert_glorot("gc1.theta", 1, c.gcn_hidden, seed);
        params.insert_glorot("gc2.theta", c.gcn_hidden, c.gcn_hidden, seed);
        init_dense(&mut params, "snapshot_fc", n * c.gcn_hidden, c.snapshot_width, seed);
        init_lstm(&mut params, "lstm", c.snapshot_width + WEATHER_DIM, c.lstm_hidden, seed);
        init_dense(&mut params, "st_out", c.lstm_hidden, out, seed);
        init_rnn(&mut params, "incident_rnn", c.latent_width + 1, c.rnn_hidden, seed);
        init_dense(&mut params, "periodic_fc", c.periodic_days * out, c.periodic_width, seed);
        init_dense(&mut params, "fusion_fc", out + c.rnn_hidden + c.periodic_width, c.fusion_width, seed);
        // A zero output layer starts every variant at persistence.
        params.insert_zeros("out.w", c.fusion_width, out);
        params.insert_zeros("out.b", 1, out);
        Ok(DigcNet {
            config,
            params,
            scales,
            propagation,
        })
    }

    pub fn n_flows(&self) -> usize {
        self.propagation.rows()
    }

    pub(crate) fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.config;
        let n = self.n_flows();
        let out = c.horizon * n;
        let ok = batch.speeds.cols() == n
            && batch.steps.len() == c.history
            && batch.periodic.cols() == c.periodic_days * out
            && batch.target.cols() == out
            && batch.incidents.iter().flatten().all(|v| v.len() == c.latent_width + 1);
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "digc_forward",
                format!(
                    "batch of {} flows, {} steps, periodic width {}, target width {} does not fit \
                     N = {n}, T = {}, k = {}",
                    batch.speeds.cols(),
                    batch.steps.len(),
                    batch.periodic.cols(),
                    batch.target.cols(),
                    c.history,
                    c.horizon
                ),
            ))
        }
    }

    /// Records the forward pass; returns `B × (k·N)` normalized speeds,
    /// step-major.
    pub(crate) fn forward(&self, tape: &mut Tape, params: &ModelParams, batch: &Batch, mode: Mode, dropout_seed: u64) -> Var {
        let c = &self.config;
        let n = self.n_flows();
        let b = batch.len();
        let s = batch.speeds.rows();
        let out = c.horizon * n;
        let mut rng = rng_for(dropout_seed, "digc/dropout");

        let p = tape.constant(self.propagation.clone());
        let x = tape.constant(self.scales.standardize(&batch.speeds).reshaped(s * n, 1));
        let th1 = tape.param(params, "gc1.theta");
        let h = gcn(tape, p, x, th1, Activation::Relu);
        let h = dropout(tape, h, c.keep_prob, mode, &mut rng);
        let th2 = tape.param(params, "gc2.theta");
        let h = gcn(tape, p, h, th2, Activation::Relu);
        let h = dropout(tape, h, c.keep_prob, mode, &mut rng);
        let flat = tape.reshape(h, s, n * c.gcn_hidden);
        let y = dense_named(tape, params, "snapshot_fc", flat, Activation::Relu);
        let w = tape.constant(batch.weather.clone());
        let y = tape.concat_cols(&[y, w]);
        let h_last = lstm_over_rows(tape, params, "lstm", y, &batch.steps);
        let y_s = dense_named(tape, params, "st_out", h_last, Activation::Identity);

        let y_inci = if c.variant.incidents() {
            self.incident_branch(tape, params, batch)
        } else {
            tape.constant(Tensor::zeros(b, c.rnn_hidden))
        };
        let y_p = if c.variant.periodic() {
            let per = tape.constant(self.scales.standardize(&batch.periodic));
            dense_named(tape, params, "periodic_fc", per, Activation::Relu)
        } else {
            tape.constant(Tensor::zeros(b, c.periodic_width))
        };
        let joined = tape.concat_cols(&[y_s, y_inci, y_p]);
        let fused = dense_named(tape, params, "fusion_fc", joined, Activation::Relu);
        let delta = dense_named(tape, params, "out", fused, Activation::Identity);
        let last = tape.constant(last_observed(batch, c.horizon));
        let y = tape.add(last, delta);
        debug_assert_eq!(tape.shape(y), (b, out));
        y
    }

    fn incident_branch(&self, tape: &mut Tape, params: &ModelParams, batch: &Batch) -> Var {
        let c = &self.config;
        let b = batch.len();
        let longest = batch.incidents.iter().map(Vec::len).max().unwrap_or(0);
        // Right-aligned: sequence `i` starts at step `longest − len_i`.
        let mut inputs = Vec::with_capacity(longest);
        let mut active = Vec::with_capacity(longest);
        for step in 0..longest {
            let mut x = Tensor::zeros(b, c.latent_width + 1);
            let mut act = vec![false; b];
            for (i, seq) in batch.incidents.iter().enumerate() {
                let offset = longest - seq.len();
                if step >= offset {
                    x.row_mut(i).copy_from_slice(&seq[step - offset]);
                    act[i] = true;
                }
            }
            inputs.push(tape.constant(x));
            active.push(act);
        }
        rnn_masked(tape, params, "incident_rnn", &inputs, &active, b)
    }

    /// Finite-difference check of the training loss (MSE with dropout
    /// masks fixed by `dropout_seed`) on the windows ending at `targets`.
    pub fn gradient_check(
        &self,
        ds: &DigcDataset,
        targets: &[usize],
        dropout_seed: u64,
        opts: &GradCheckOptions,
    ) -> Result<GradCheckReport> {
        let last = ds.table().n_slots().saturating_sub(ds.horizon());
        if let Some(t) = targets.iter().find(|&&t| t < ds.first_target() || t > last) {
            return Err(Error::WindowOutOfRange(format!(
                "target slot {t} outside {}..={last}",
                ds.first_target()
            )));
        }
        let batch = Batch::from_dataset(ds, targets);
        self.check_batch(&batch)?;
        Ok(gradient_check(
            &self.params,
            |tape, p| {
                let y = self.forward(tape, p, &batch, Mode::Train, dropout_seed);
                tape.mse(y, batch.target.clone())
            },
            opts,
        ))
    }

    /// Eval-mode predictions in raw units (`B × (k·N)`), not clamped.
    pub(crate) fn predict_batch(&self, batch: &Batch) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, &self.params, batch, Mode::Eval, 0);
        Ok(tape.value(y).map(|v| v * self.scales.speed_scale))
    }

    /// Eval-mode forward of one window, `k × N` raw speeds, not clamped.
    pub fn forward_window(&self, window: &PredictionWindow) -> Result<Tensor> {
        let n = self.n_flows();
        if window.history.shape() != (self.config.history, n) {
            return Err(Error::shape(
                "digc_forward",
                format!("history is {:?}, model expects ({}, {n})", window.history.shape(), self.config.history),
            ));
        }
        let batch = Batch::from_windows(&[window], &self.scales, self.config.incident_lookback);
        Ok(self.predict_batch(&batch)?.reshaped(self.config.horizon, n))
    }

    /// `k` future snapshots, clamped at zero.
    pub fn predict_multistep(&self, window: &PredictionWindow) -> Result<Tensor> {
        Ok(self.forward_window(window)?.map(|v| v.max(0.0)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = DigcCheckpoint {
            format: "digc-net".into(),
            config: self.config.clone(),
            scales: self.scales.clone(),
            n_flows: self.n_flows(),
            params: self.params.to_checkpoint(),
        };
        std::fs::write(path, serde_json::to_string(&ck)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, propagation: Tensor) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: DigcCheckpoint = serde_json::from_str(&text)?;
        if ck.format != "digc-net" {
            return Err(Error::Checkpoint(format!("{} is not a predictor checkpoint", path.display())));
        }
        if ck.n_flows != propagation.rows() {
            return Err(Error::Checkpoint(format!(
                "predictor was trained on {} flows, graph has {}",
                ck.n_flows,
                propagation.rows()
            )));
        }
        let mut model = DigcNet::new(propagation, ck.scales, ck.config)?;
        let params = ModelParams::from_checkpoint(&ck.params)?;
        let expected: Vec<(String, usize, usize)> = model
            .params
            .names()
            .map(|name| {
                let (r, c) = model.params.value(name).expect("present").shape();
                (name.clone(), r, c)
            })
            .collect();
        params.expect_shapes(&expected)?;
        model.params = params;
        Ok(model)
    }
}

/// `B × (k·N)`: each window's last history snapshot repeated for every step.
fn last_observed(batch: &Batch, horizon: usize) -> Tensor {
    let n = batch.speeds.cols();
    let last = batch.steps.last().expect("history is non-empty");
    let mut out = Tensor::zeros(last.len(), horizon * n);
    for (b, &row) in last.iter().enumerate() {
        out.row_mut(b).copy_from_slice(&batch.speeds.row(row).repeat(horizon));
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DigcCheckpoint {
    format: String,
    config: DigcConfig,
    scales: DigcScales,
    n_flows: usize,
    params: Checkpoint,
}
