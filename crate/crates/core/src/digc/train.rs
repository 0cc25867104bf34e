use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::Batch;
use super::{DigcConfig, DigcDataset, DigcNet, Variant};
use crate::error::{Error, Result};
use crate::neural::layers::{dense_named, init_dense, init_lstm, lstm_over_rows};
use crate::neural::{Activation, EarlyStopping, MapeAccumulator, Mode, ModelParams, Tape, Tensor, Var};
use crate::seed::{derive_seed, rng_for};
use crate::traffic_data::SLOTS_PER_DAY;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DigcMetrics {
    pub variant: Variant,
    pub horizon: usize,
    pub mape_overall: f64,
    pub mape_per_step: Vec<f64>,
    /// Test targets scored and those excluded for being below 1 km/h.
    pub used: usize,
    pub excluded: usize,
    pub seed: u64,
    pub epochs: usize,
    /// Mean train-mode minibatch loss of each epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
}

struct Fit {
    params: ModelParams,
    epochs: usize,
    train_loss: Vec<f64>,
    val_loss: Vec<f64>,
}

/// Minibatch Adam on MSE over contiguous blocks of training targets, with
/// early stopping on the validation targets.
fn fit(
    mut params: ModelParams,
    ds: &DigcDataset,
    cfg: &DigcConfig,
    label: &str,
    build: impl Fn(&mut Tape, &ModelParams, &Batch, Mode, u64) -> Var,
) -> Result<Fit> {
    let blocks: Vec<&[usize]> = ds.train.chunks(cfg.batch_size).collect();
    let val_batches: Vec<Batch> = ds.val.chunks(cfg.batch_size).map(|c| Batch::from_dataset(ds, c)).collect();
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    let mut rng = rng_for(cfg.seed, &format!("{label}/batches"));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let (mut train_loss, mut val_loss) = (Vec::new(), Vec::new());
    let mut epochs = 0;
    for epoch in 0..cfg.max_epochs {
        epochs = epoch + 1;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, &k) in order.iter().enumerate() {
            let batch = Batch::from_dataset(ds, blocks[k]);
            let mut tape = Tape::new();
            let seed = derive_seed(cfg.seed, &format!("{label}/epoch{epoch}/batch{bi}"));
            let y = build(&mut tape, &params, &batch, Mode::Train, seed);
            let loss = tape.mse(y, batch.target.clone());
            let l = tape.value(loss).get(0, 0);
            if !l.is_finite() {
                return Err(Error::Numeric(format!(
                    "{label}: loss became {l} in epoch {epoch}, batch {bi} (targets {}..={})",
                    blocks[k][0],
                    blocks[k][blocks[k].len() - 1]
                )));
            }
            total += l * batch.len() as f64;
            params.adam_step(&tape.backward(loss), &cfg.adam)?;
        }
        train_loss.push(total / ds.train.len() as f64);
        let monitor = if val_batches.is_empty() {
            *train_loss.last().expect("pushed")
        } else {
            let mut sum = 0.0;
            for b in &val_batches {
                let mut tape = Tape::new();
                let y = build(&mut tape, &params, b, Mode::Eval, 0);
                let loss = tape.mse(y, b.target.clone());
                sum += tape.value(loss).get(0, 0) * b.len() as f64;
            }
            sum / ds.val.len() as f64
        };
        val_loss.push(monitor);
        if stopper.observe(monitor, &params) {
            break;
        }
    }
    Ok(Fit {
        params: stopper.into_best().unwrap_or(params),
        epochs,
        train_loss,
        val_loss,
    })
}

/// Trains a predictor on the dataset's training targets and scores it on
/// its test targets.
pub fn train_digc(ds: &DigcDataset, propagation: Tensor, cfg: &DigcConfig) -> Result<(DigcNet, DigcMetrics)> {
    if cfg.horizon != ds.horizon || cfg.history != ds.history || cfg.periodic_days != ds.periodic_days {
        return Err(Error::InvalidInput(
            "dataset was assembled with a different horizon, history or periodic length".into(),
        ));
    }
    if propagation.rows() != ds.n_flows() {
        return Err(Error::shape(
            "train_digc",
            format!("graph has {} flows, speeds {}", propagation.rows(), ds.n_flows()),
        ));
    }
    let mut model = DigcNet::new(propagation, ds.scales().clone(), cfg.clone())?;
    model.check_batch(&Batch::from_dataset(ds, &ds.train[..1]))?;
    let fit = fit(model.params.clone(), ds, cfg, "digc", |tape, p, b, mode, seed| {
        model.forward(tape, p, b, mode, seed)
    })?;
    model.params = fit.params;
    let mut metrics = evaluate(&model, ds)?;
    metrics.epochs = fit.epochs;
    metrics.train_loss = fit.train_loss;
    metrics.val_loss = fit.val_loss;
    Ok((model, metrics))
}

/// Clamped `k × N` predictions for each target slot, in input order.
pub fn predict_dataset(model: &DigcNet, ds: &DigcDataset, targets: &[usize]) -> Result<Vec<(usize, Tensor)>> {
    let (k, n) = (model.config.horizon, model.n_flows());
    let mut out = Vec::with_capacity(targets.len());
    for chunk in targets.chunks(model.config.batch_size.max(1)) {
        if let Some(&t) = chunk.iter().find(|&&t| t < ds.first_target() || t + k > ds.table.n_slots()) {
            return Err(Error::WindowOutOfRange(format!("target slot {t} has no full window")));
        }
        let batch = Batch::from_dataset(ds, chunk);
        let y = model.predict_batch(&batch)?;
        for (b, &t) in chunk.iter().enumerate() {
            let rows = Tensor::from_vec(k, n, y.row(b).iter().map(|v| v.max(0.0)).collect()).expect("sized");
            out.push((t, rows));
        }
    }
    Ok(out)
}

pub(super) fn score(ds: &DigcDataset, preds: &[(usize, Tensor)]) -> Result<(f64, Vec<f64>, usize, usize)> {
    let mut sorted: Vec<&(usize, Tensor)> = preds.iter().collect();
    sorted.sort_by_key(|p| p.0);
    let k = ds.horizon;
    let mut overall = MapeAccumulator::default();
    let mut per_step = vec![MapeAccumulator::default(); k];
    for (t, y) in sorted {
        for (j, acc) in per_step.iter_mut().enumerate() {
            for (p, v) in y.row(j).iter().zip(ds.table.snapshot(t + j)) {
                overall.push(*p, *v);
                acc.push(*p, *v);
            }
        }
    }
    let o = overall.finish()?;
    let steps = per_step.iter().map(|a| a.finish().map(|m| m.percent)).collect::<Result<Vec<_>>>()?;
    Ok((o.percent, steps, o.used, o.excluded))
}

/// Test-set MAPE of a model; the result does not depend on target order.
pub fn evaluate(model: &DigcNet, ds: &DigcDataset) -> Result<DigcMetrics> {
    let preds = predict_dataset(model, ds, &ds.test)?;
    score_predictions(model, ds, &preds)
}

/// Metrics of predictions already made by `model`.
pub fn score_predictions(model: &DigcNet, ds: &DigcDataset, preds: &[(usize, Tensor)]) -> Result<DigcMetrics> {
    let (mape_overall, mape_per_step, used, excluded) = score(ds, preds)?;
    Ok(DigcMetrics {
        variant: model.config.variant,
        horizon: model.config.horizon,
        mape_overall,
        mape_per_step,
        used,
        excluded,
        seed: model.config.seed,
        epochs: 0,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        train_windows: ds.train.len(),
        val_windows: ds.val.len(),
        test_windows: ds.test.len(),
    })
}

/// One predicted value; `slot` is the slot being predicted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub slot: usize,
    pub flow_id: usize,
    /// 1-based step within the horizon.
    pub step: usize,
    pub predicted_speed: f64,
}

/// `slot,flow_id,step,predicted_speed`
pub fn save_predictions(preds: &[(usize, Tensor)], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let body = |w: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        writeln!(w, "slot,flow_id,step,predicted_speed")?;
        for (t, y) in preds {
            for j in 0..y.rows() {
                for (flow, v) in y.row(j).iter().enumerate() {
                    writeln!(w, "{},{flow},{},{v}", t + j, j + 1)?;
                }
            }
        }
        w.flush()
    };
    body(&mut w).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Repeats the last observed speed.
    Persistence,
    /// Mean of the same slot of day over the training period.
    HistoricalAverage,
    /// LSTM over raw speed snapshots, no graph, weather or incidents.
    PlainLstm,
}

impl Baseline {
    pub const ALL: [Baseline; 3] = [Baseline::Persistence, Baseline::HistoricalAverage, Baseline::PlainLstm];

    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Persistence => "persistence",
            Baseline::HistoricalAverage => "historical_average",
            Baseline::PlainLstm => "plain_lstm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Baseline::ALL.into_iter().find(|b| b.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub name: Baseline,
    pub mape_overall: f64,
    pub mape_per_step: Vec<f64>,
    pub used: usize,
    pub excluded: usize,
}

/// Scores a baseline on the dataset's test targets. `cfg` supplies the
/// training settings of the plain LSTM.
pub fn run_baseline(name: Baseline, ds: &DigcDataset, cfg: &DigcConfig) -> Result<BaselineReport> {
    let (k, n) = (ds.horizon, ds.n_flows());
    let preds: Vec<(usize, Tensor)> = match name {
        Baseline::Persistence => ds
            .test
            .iter()
            .map(|&t| {
                let last = ds.table.snapshot(t - 1);
                (t, Tensor::from_vec(k, n, last.repeat(k)).expect("sized"))
            })
            .collect(),
        Baseline::HistoricalAverage => {
            let train_end = ds.test[0];
            let mut sum = vec![0.0; SLOTS_PER_DAY * n];
            let mut count = vec![0usize; SLOTS_PER_DAY];
            for s in 0..train_end {
                let d = ds.table.slot_of_day(s);
                count[d] += 1;
                for (acc, v) in sum[d * n..(d + 1) * n].iter_mut().zip(ds.table.snapshot(s)) {
                    *acc += v;
                }
            }
            ds.test
                .iter()
                .map(|&t| {
                    let mut y = Tensor::zeros(k, n);
                    for j in 0..k {
                        let d = ds.table.slot_of_day(t + j);
                        let c = count[d].max(1) as f64;
                        for (o, s) in y.row_mut(j).iter_mut().zip(&sum[d * n..(d + 1) * n]) {
                            *o = s / c;
                        }
                    }
                    (t, y)
                })
                .collect()
        }
        Baseline::PlainLstm => plain_lstm_predictions(ds, cfg)?,
    };
    let (mape_overall, mape_per_step, used, excluded) = score(ds, &preds)?;
    Ok(BaselineReport {
        name,
        mape_overall,
        mape_per_step,
        used,
        excluded,
    })
}

fn plain_lstm_forward(tape: &mut Tape, params: &ModelParams, batch: &Batch) -> Var {
    let x = tape.constant(batch.speeds.clone());
    let h = lstm_over_rows(tape, params, "lstm", x, &batch.steps);
    dense_named(tape, params, "out", h, Activation::Identity)
}

fn plain_lstm_predictions(ds: &DigcDataset, cfg: &DigcConfig) -> Result<Vec<(usize, Tensor)>> {
    let (k, n) = (ds.horizon, ds.n_flows());
    let seed = derive_seed(cfg.seed, "plain_lstm/init");
    let mut params = ModelParams::new();
    init_lstm(&mut params, "lstm", n, cfg.lstm_hidden, seed);
    init_dense(&mut params, "out", cfg.lstm_hidden, k * n, seed);
    let fit = fit(params, ds, cfg, "plain_lstm", |tape, p, b, _, _| plain_lstm_forward(tape, p, b))?;
    let mut out = Vec::with_capacity(ds.test.len());
    for chunk in ds.test.chunks(cfg.batch_size.max(1)) {
        let batch = Batch::from_dataset(ds, chunk);
        let mut tape = Tape::new();
        let y = plain_lstm_forward(&mut tape, &fit.params, &batch);
        let y = tape.value(y);
        for (b, &t) in chunk.iter().enumerate() {
            let row = y.row(b).iter().map(|v| (v * ds.scales.speed_scale).max(0.0)).collect();
            out.push((t, Tensor::from_vec(k, n, row).expect("sized")));
        }
    }
    Ok(out)
}
