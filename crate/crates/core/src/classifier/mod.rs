//! Critical-incident classifier.
//!
//! Every speed snapshot of the influence window goes through two graph
//! convolutions and a dense layer; an LSTM runs over the resulting sequence.
//! The incident context gets its own dense layer, and the concatenation
//! feeds a 16-wide dense layer (the latent impact features) and a sigmoid
//! output.

mod features;

use std::path::Path;

use chrono::Timelike;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::layers::{dense_named, dropout, gcn, init_dense, init_lstm, lstm_over_rows};
use crate::neural::loss::BCE_EPS;
use crate::neural::{
    bce_loss, f1_score, Activation, AdamConfig, Checkpoint, EarlyStopping, Mode, ModelParams, Tape, Tensor, Var,
};
use crate::road_graph::flow_distance;
use crate::seed::{derive_seed, rng_for};
use crate::traffic_data::{DayCategory, IncidentRecord, IncidentType, RoadGeometry, SpeedTable};

pub use features::{load_features, save_features, LatentImpactFeatures};

/// Width of the encoded incident context: type, road status, start hour,
/// end hour, day category and normalized duration.
pub const CONTEXT_DIM: usize = IncidentType::CATEGORIES + 2 + 24 + 24 + 3 + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Snapshots per incident.
    pub window: usize,
    pub gcn_hidden: usize,
    pub snapshot_width: usize,
    pub lstm_hidden: usize,
    pub context_width: usize,
    pub latent_width: usize,
    /// Dropout keep probability after each graph convolution.
    pub keep_prob: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub train_fraction: f64,
    /// Share of the training split held out for early stopping.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            window: 12,
            gcn_hidden: 64,
            snapshot_width: 64,
            lstm_hidden: 64,
            context_width: 32,
            latent_width: 16,
            keep_prob: 0.8,
            adam: AdamConfig::default(),
            batch_size: 16,
            max_epochs: 60,
            patience: 10,
            train_fraction: 0.7,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Dataset-level normalizers shared by every input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScales {
    /// Speeds are divided by this (km/h).
    pub speed_scale: f64,
    /// Durations are divided by this (minutes) and clipped to 1.
    pub max_duration_min: f64,
}

impl InputScales {
    pub fn from_data(table: &SpeedTable, incidents: &[IncidentRecord]) -> Self {
        InputScales {
            speed_scale: table.max_speed().max(1e-9),
            max_duration_min: incidents
                .iter()
                .map(|i| i.duration_minutes() as f64)
                .fold(0.0, f64::max)
                .max(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierInput {
    pub incident_id: u64,
    /// First slot of the window.
    pub first_slot: usize,
    /// `window × N` normalized speeds.
    pub speeds: Tensor,
    /// Per-flow distance to the incident, min-max scaled to [0, 1].
    pub distance: Vec<f64>,
    pub context: Vec<f64>,
}

/// `[t_s − ⌊T/2⌋, t_s − ⌊T/2⌋ + T − 1]`: T snapshots around the start.
pub fn classifier_window(t_s: i64, window: usize) -> (i64, i64) {
    let first = t_s - (window / 2) as i64;
    (first, first + window as i64 - 1)
}

pub fn encode_context(incident: &IncidentRecord, scales: &InputScales) -> Vec<f64> {
    let mut v = vec![0.0; CONTEXT_DIM];
    v[incident.incident_type.category_index()] = 1.0;
    let mut off = IncidentType::CATEGORIES;
    v[off + usize::from(incident.road_closed)] = 1.0;
    off += 2;
    v[off + incident.start_time.hour() as usize] = 1.0;
    off += 24;
    v[off + incident.end_time.hour() as usize] = 1.0;
    off += 24;
    v[off + incident.day_category.index()] = 1.0;
    off += DayCategory::ALL.len();
    v[off] = (incident.duration_minutes() as f64 / scales.max_duration_min).clamp(0.0, 1.0);
    v
}

pub fn build_classifier_input(
    incident: &IncidentRecord,
    table: &SpeedTable,
    geometry: &RoadGeometry,
    scales: &InputScales,
    cfg: &ClassifierConfig,
) -> Result<ClassifierInput> {
    if geometry.len() != table.n_flows() {
        return Err(Error::shape(
            "build_classifier_input",
            format!("geometry has {} flows, speeds {}", geometry.len(), table.n_flows()),
        ));
    }
    let (first, last) = classifier_window(table.slot_of(incident.start_time), cfg.window);
    if first < 0 || last >= table.n_slots() as i64 {
        return Err(Error::WindowOutOfRange(format!(
            "incident {} needs slots {first}..={last}, table has 0..{}",
            incident.id,
            table.n_slots()
        )));
    }
    let first = first as usize;
    let n = table.n_flows();
    let mut speeds = Tensor::zeros(cfg.window, n);
    for s in 0..cfg.window {
        for (o, v) in speeds.row_mut(s).iter_mut().zip(table.snapshot(first + s)) {
            *o = v / scales.speed_scale;
        }
    }
    let raw: Vec<f64> = geometry
        .flows
        .iter()
        .map(|f| flow_distance(f.centroid(), incident.center()))
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let distance = raw
        .iter()
        .map(|d| if hi > lo { (d - lo) / (hi - lo) } else { 0.0 })
        .collect();
    Ok(ClassifierInput {
        incident_id: incident.id,
        first_slot: first,
        speeds,
        distance,
        context: encode_context(incident, scales),
    })
}

/// Classifier parameters with the graph they were trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpactClassifier {
    pub config: ClassifierConfig,
    pub params: ModelParams,
    pub scales: InputScales,
    propagation: Tensor,
}

/// Output of one forward pass over a batch.
pub struct ClassifierOutput {
    /// `B × 1` probabilities.
    pub probability: Var,
    /// `B × latent_width` penultimate activations.
    pub latent: Var,
}

impl ImpactClassifier {
    pub fn new(propagation: Tensor, scales: InputScales, config: ClassifierConfig) -> Result<Self> {
        let n = propagation.rows();
        if n == 0 || propagation.cols() != n {
            return Err(Error::shape("ImpactClassifier::new", "propagation must be square and non-empty"));
        }
        let c = &config;
        let seed = derive_seed(c.seed, "classifier/init");
        let mut params = ModelParams::new();
        params.insert_glorot("gc1.theta", 2, c.gcn_hidden, seed);
        params.insert_glorot("gc2.theta", c.gcn_hidden, c.gcn_hidden, seed);
        init_dense(&mut params, "snapshot_fc", n * c.gcn_hidden, c.snapshot_width, seed);
        init_lstm(&mut params, "lstm", c.snapshot_width, c.lstm_hidden, seed);
        init_dense(&mut params, "context_fc", CONTEXT_DIM, c.context_width, seed);
        init_dense(&mut params, "latent_fc", c.context_width + c.lstm_hidden, c.latent_width, seed);
        init_dense(&mut params, "out", c.latent_width, 1, seed);
        Ok(ImpactClassifier {
            config,
            params,
            scales,
            propagation,
        })
    }

    pub fn n_flows(&self) -> usize {
        self.propagation.rows()
    }

    fn check_inputs(&self, inputs: &[&ClassifierInput]) -> Result<()> {
        let n = self.n_flows();
        for x in inputs {
            if x.speeds.shape() != (self.config.window, n) || x.distance.len() != n || x.context.len() != CONTEXT_DIM {
                return Err(Error::shape(
                    "classifier_forward",
                    format!(
                        "incident {} input is {:?} with {} distances, model expects ({}, {n})",
                        x.incident_id,
                        x.speeds.shape(),
                        x.distance.len(),
                        self.config.window
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Records the forward pass of a batch on `tape`. `dropout_seed` fixes
    /// the dropout masks in train mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        inputs: &[&ClassifierInput],
        mode: Mode,
        dropout_seed: u64,
    ) -> ClassifierOutput {
        let c = &self.config;
        let (b, w, n) = (inputs.len(), c.window, self.n_flows());
        let mut x = Vec::with_capacity(b * w * n * 2);
        for inp in inputs {
            for s in 0..w {
                for (v, d) in inp.speeds.row(s).iter().zip(&inp.distance) {
                    x.push(*v);
                    x.push(*d);
                }
            }
        }
        let x = tape.constant(Tensor::from_vec(b * w * n, 2, x).expect("sized"));
        let p = tape.constant(self.propagation.clone());
        let mut rng = rng_for(dropout_seed, "classifier/dropout");
        let th1 = tape.param(params, "gc1.theta");
        let h = gcn(tape, p, x, th1, Activation::Relu);
        let h = dropout(tape, h, c.keep_prob, mode, &mut rng);
        let th2 = tape.param(params, "gc2.theta");
        let h = gcn(tape, p, h, th2, Activation::Relu);
        let h = dropout(tape, h, c.keep_prob, mode, &mut rng);
        let flat = tape.reshape(h, b * w, n * c.gcn_hidden);
        let y = dense_named(tape, params, "snapshot_fc", flat, Activation::Relu);
        let steps: Vec<Vec<usize>> = (0..w).map(|s| (0..b).map(|i| i * w + s).collect()).collect();
        let y_g = lstm_over_rows(tape, params, "lstm", y, &steps);
        let ctx: Vec<f64> = inputs.iter().flat_map(|i| i.context.iter().copied()).collect();
        let ctx = tape.constant(Tensor::from_vec(b, CONTEXT_DIM, ctx).expect("sized"));
        let y_c = dense_named(tape, params, "context_fc", ctx, Activation::Relu);
        let joined = tape.concat_cols(&[y_c, y_g]);
        let latent = dense_named(tape, params, "latent_fc", joined, Activation::Relu);
        let probability = dense_named(tape, params, "out", latent, Activation::Sigmoid);
        ClassifierOutput { probability, latent }
    }

    /// Eval-mode probabilities and latent features, in input order.
    pub fn predict(&self, inputs: &[ClassifierInput]) -> Result<Vec<(f64, Vec<f64>)>> {
        let refs: Vec<&ClassifierInput> = inputs.iter().collect();
        self.check_inputs(&refs)?;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in refs.chunks(64) {
            let mut tape = Tape::new();
            let o = self.forward(&mut tape, &self.params, chunk, Mode::Eval, 0);
            let p = tape.value(o.probability);
            let l = tape.value(o.latent);
            for i in 0..chunk.len() {
                out.push((p.get(i, 0), l.row(i).to_vec()));
            }
        }
        Ok(out)
    }

    fn batch_loss(&self, params: &ModelParams, inputs: &[&ClassifierInput], labels: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let o = self.forward(&mut tape, params, inputs, Mode::Eval, 0);
        let target = Tensor::from_vec(labels.len(), 1, labels.to_vec()).expect("sized");
        let loss = tape.bce(o.probability, target, BCE_EPS);
        tape.value(loss).get(0, 0)
    }

    fn mean_loss(&self, params: &ModelParams, inputs: &[&ClassifierInput], labels: &[f64]) -> f64 {
        let mut total = 0.0;
        for (xs, ys) in inputs.chunks(64).zip(labels.chunks(64)) {
            total += self.batch_loss(params, xs, ys) * xs.len() as f64;
        }
        total / inputs.len().max(1) as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = ClassifierCheckpoint {
            format: "digc-classifier".into(),
            config: self.config.clone(),
            scales: self.scales,
            n_flows: self.n_flows(),
            params: self.params.to_checkpoint(),
        };
        std::fs::write(path, serde_json::to_string(&ck)?).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and binds it to `propagation`, which must match the
    /// flow count it was trained on.
    pub fn load(path: &Path, propagation: Tensor) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: ClassifierCheckpoint = serde_json::from_str(&text)?;
        if ck.format != "digc-classifier" {
            return Err(Error::Checkpoint(format!("{} is not a classifier checkpoint", path.display())));
        }
        if ck.n_flows != propagation.rows() {
            return Err(Error::Checkpoint(format!(
                "classifier was trained on {} flows, graph has {}",
                ck.n_flows,
                propagation.rows()
            )));
        }
        let mut model = ImpactClassifier::new(propagation, ck.scales, ck.config)?;
        let params = ModelParams::from_checkpoint(&ck.params)?;
        let expected: Vec<(String, usize, usize)> = model
            .params
            .names()
            .map(|n| {
                let (r, c) = model.params.value(n).expect("present").shape();
                (n.clone(), r, c)
            })
            .collect();
        params.expect_shapes(&expected)?;
        model.params = params;
        Ok(model)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassifierCheckpoint {
    format: String,
    config: ClassifierConfig,
    scales: InputScales,
    n_flows: usize,
    params: Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub bce: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Eval-mode loss on the training split after each epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

/// Seeded shuffle into train / validation / test index sets.
pub fn split_indices(n: usize, train_fraction: f64, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, "classifier/split"));
    let n_train_all = ((n as f64) * train_fraction).round() as usize;
    let n_val = ((n_train_all as f64) * val_fraction).round() as usize;
    let test = idx.split_off(n_train_all.min(n));
    let train = idx.split_off(n_val.min(idx.len()));
    (train, idx, test)
}

/// Trains on a seeded 70/30 split, holding 10% of the training share out for
/// early stopping. Reports BCE and F1 (threshold 0.5) on the test share.
pub fn train_classifier(
    inputs: &[ClassifierInput],
    labels: &[bool],
    propagation: Tensor,
    scales: InputScales,
    cfg: &ClassifierConfig,
) -> Result<(ImpactClassifier, ClassifierMetrics)> {
    if inputs.len() != labels.len() {
        return Err(Error::shape("train_classifier", format!("{} inputs, {} labels", inputs.len(), labels.len())));
    }
    let model = ImpactClassifier::new(propagation, scales, cfg.clone())?;
    model.check_inputs(&inputs.iter().collect::<Vec<_>>())?;
    let (train, val, test) = split_indices(inputs.len(), cfg.train_fraction, cfg.val_fraction, cfg.seed);
    let positives = train.iter().filter(|&&i| labels[i]).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::InvalidInput("training split holds a single class".into()));
    }
    if test.is_empty() {
        return Err(Error::InvalidInput("test split is empty".into()));
    }
    let y = |i: usize| if labels[i] { 1.0 } else { 0.0 };
    let gather = |ids: &[usize]| -> (Vec<&ClassifierInput>, Vec<f64>) {
        (ids.iter().map(|&i| &inputs[i]).collect(), ids.iter().map(|&i| y(i)).collect())
    };
    let (train_x, train_y) = gather(&train);
    let (val_x, val_y) = gather(&val);

    let mut model = model;
    let mut params = model.params.clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut order = train.clone();
    let mut shuffle_rng = rng_for(cfg.seed, "classifier/batches");
    let (mut train_loss, mut val_loss) = (Vec::new(), Vec::new());
    let mut epochs = 0;
    for epoch in 0..cfg.max_epochs {
        epochs = epoch + 1;
        order.shuffle(&mut shuffle_rng);
        for (bi, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let xs: Vec<&ClassifierInput> = batch.iter().map(|&i| &inputs[i]).collect();
            let ys: Vec<f64> = batch.iter().map(|&i| y(i)).collect();
            let mut tape = Tape::new();
            let seed = derive_seed(cfg.seed, &format!("classifier/epoch{epoch}/batch{bi}"));
            let o = model.forward(&mut tape, &params, &xs, Mode::Train, seed);
            let target = Tensor::from_vec(ys.len(), 1, ys).expect("sized");
            let loss = tape.bce(o.probability, target, BCE_EPS);
            if !tape.value(loss).is_finite() {
                return Err(Error::Numeric(format!("classifier loss diverged in epoch {epoch}")));
            }
            let grads = tape.backward(loss);
            params.adam_step(&grads, &cfg.adam)?;
        }
        train_loss.push(model.mean_loss(&params, &train_x, &train_y));
        let monitor = if val_x.is_empty() {
            *train_loss.last().expect("pushed")
        } else {
            model.mean_loss(&params, &val_x, &val_y)
        };
        val_loss.push(monitor);
        if stopper.observe(monitor, &params) {
            break;
        }
    }
    model.params = stopper.into_best().unwrap_or(params);

    let test_inputs: Vec<ClassifierInput> = test.iter().map(|&i| inputs[i].clone()).collect();
    let preds = model.predict(&test_inputs)?;
    let probs: Vec<f64> = preds.iter().map(|p| p.0).collect();
    let truth: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
    let targets: Vec<f64> = truth.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let f1 = f1_score(&probs.iter().map(|&p| p >= 0.5).collect::<Vec<_>>(), &truth)?;
    let metrics = ClassifierMetrics {
        bce: bce_loss(&probs, &targets)?,
        f1: f1.f1,
        precision: f1.precision,
        recall: f1.recall,
        threshold: 0.5,
        train_size: train.len(),
        val_size: val.len(),
        test_size: test.len(),
        epochs,
        seed: cfg.seed,
        train_loss,
        val_loss,
    };
    Ok((model, metrics))
}

/// Eval-mode latent features of each input.
pub fn extract_latent_features(model: &ImpactClassifier, inputs: &[ClassifierInput]) -> Result<Vec<LatentImpactFeatures>> {
    Ok(model
        .predict(inputs)?
        .into_iter()
        .zip(inputs)
        .map(|((_, values), inp)| LatentImpactFeatures {
            incident_id: inp.incident_id,
            values,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradcheck::{gradient_check, GradCheckOptions};
    use crate::road_graph::FlowGraph;
    use chrono::NaiveDate;

    fn incident(closed: bool, minutes: i64) -> IncidentRecord {
        let t = NaiveDate::from_ymd_opt(2019, 4, 1).unwrap().and_hms_opt(8, 20, 0).unwrap();
        IncidentRecord {
            id: 3,
            incident_type: IncidentType::Collision,
            lat: 37.75,
            lng: -122.45,
            start_time: t,
            end_time: t + chrono::Duration::minutes(minutes),
            road_closed: closed,
            day_category: DayCategory::Weekday,
        }
    }

    fn tiny_config() -> ClassifierConfig {
        ClassifierConfig {
            gcn_hidden: 4,
            snapshot_width: 5,
            lstm_hidden: 3,
            context_width: 4,
            latent_width: 3,
            ..ClassifierConfig::default()
        }
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(classifier_window(100, 12), (94, 105));
    }

    #[test]
    fn context_encoding() {
        let scales = InputScales {
            speed_scale: 60.0,
            max_duration_min: 90.0,
        };
        let v = encode_context(&incident(false, 90), &scales);
        assert_eq!(v.len(), 59);
        assert_eq!(v[1], 1.0);
        assert_eq!((v[5], v[6]), (1.0, 0.0));
        assert_eq!(v[7 + 8], 1.0);
        assert_eq!(v[31 + 9], 1.0);
        assert_eq!(v[55], 1.0);
        assert_eq!(v[58], 1.0);
        assert_eq!(v.iter().sum::<f64>(), 6.0);
        let closed = encode_context(&incident(true, 45), &scales);
        assert_eq!((closed[5], closed[6]), (0.0, 1.0));
        assert_eq!(closed[58], 0.5);
    }

    fn micro_inputs(n: usize, w: usize) -> Vec<ClassifierInput> {
        let mut rng = rng_for(5, "micro");
        use rand::Rng;
        (0..3)
            .map(|k| ClassifierInput {
                incident_id: k,
                first_slot: 0,
                speeds: Tensor::from_vec(w, n, (0..w * n).map(|_| rng.random_range(0.2..1.0)).collect()).unwrap(),
                distance: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
                context: (0..CONTEXT_DIM).map(|_| rng.random_range(0.0..1.0)).collect(),
            })
            .collect()
    }

    fn path_propagation(n: usize) -> Tensor {
        FlowGraph::from_edges(n, (0..n - 1).map(|i| (i, i + 1))).unwrap().propagation_matrix()
    }

    #[test]
    fn end_to_end_gradient_check() {
        let model = ImpactClassifier::new(
            path_propagation(6),
            InputScales {
                speed_scale: 1.0,
                max_duration_min: 1.0,
            },
            tiny_config(),
        )
        .unwrap();
        let inputs = micro_inputs(6, 12);
        let refs: Vec<&ClassifierInput> = inputs.iter().collect();
        let report = gradient_check(
            &model.params,
            |tape, p| {
                let o = model.forward(tape, p, &refs, Mode::Train, 9);
                tape.bce(o.probability, Tensor::from_vec(3, 1, vec![1.0, 0.0, 1.0]).unwrap(), BCE_EPS)
            },
            &GradCheckOptions::default(),
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn probabilities_in_open_interval_and_deterministic() {
        let inputs = micro_inputs(6, 12);
        for seed in 0..20 {
            let cfg = ClassifierConfig { seed, ..tiny_config() };
            let scales = InputScales {
                speed_scale: 1.0,
                max_duration_min: 1.0,
            };
            let model = ImpactClassifier::new(path_propagation(6), scales, cfg).unwrap();
            let a = model.predict(&inputs).unwrap();
            let b = model.predict(&inputs).unwrap();
            assert_eq!(a, b);
            for (p, latent) in &a {
                assert!(*p > 0.0 && *p < 1.0);
                assert_eq!(latent.len(), 3);
            }
        }
    }

    #[test]
    fn latent_width_is_sixteen_by_default() {
        let scales = InputScales {
            speed_scale: 1.0,
            max_duration_min: 1.0,
        };
        let model = ImpactClassifier::new(path_propagation(6), scales, ClassifierConfig::default()).unwrap();
        let feats = extract_latent_features(&model, &micro_inputs(6, 12)).unwrap();
        assert!(feats.iter().all(|f| f.values.len() == 16));
    }

    #[test]
    fn split_sizes() {
        let (tr, va, te) = split_indices(100, 0.7, 0.1, 1);
        assert_eq!((tr.len(), va.len(), te.len()), (63, 7, 30));
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
