use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::DigcConfig;
use crate::classifier::LatentImpactFeatures;
use crate::error::{Error, Result};
use crate::neural::Tensor;
use crate::traffic_data::{IncidentRecord, SpeedTable, WeatherRecord, WeatherType, SLOTS_PER_DAY};

/// One-hot weather type, temperature and sunrise offset.
pub const WEATHER_DIM: usize = WeatherType::ALL.len() + 2;

/// Normalizers fitted on the data a model was trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DigcScales {
    pub speed_scale: f64,
    /// Mean and standard deviation of `speed / speed_scale`; network inputs
    /// are standardized with these, the residual target is not.
    pub input_mean: f64,
    pub input_std: f64,
    pub temperature: (f64, f64),
    pub sunrise: (f64, f64),
    /// Per-dimension divisor of the latent incident features.
    pub latent: Vec<f64>,
}

impl DigcScales {
    pub fn from_data(table: &SpeedTable, weather: &[WeatherRecord], features: &[LatentImpactFeatures], width: usize) -> Self {
        let range = |f: fn(&WeatherRecord) -> f64| {
            weather
                .iter()
                .map(f)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let speed_scale = table.max_speed().max(1e-9);
        let n = table.raw().len().max(1) as f64;
        let input_mean = table.raw().iter().sum::<f64>() / n / speed_scale;
        let var = table.raw().iter().map(|v| (v / speed_scale - input_mean).powi(2)).sum::<f64>() / n;
        DigcScales {
            speed_scale,
            input_mean,
            input_std: if var > 1e-12 { var.sqrt() } else { 1.0 },
            temperature: range(|w| w.temperature_c),
            sunrise: range(|w| w.sunrise_offset_min),
            latent: (0..width)
                .map(|k| {
                    let m = features.iter().filter_map(|f| f.values.get(k)).fold(0.0, |a: f64, v| a.max(v.abs()));
                    if m > 0.0 {
                        m
                    } else {
                        1.0
                    }
                })
                .collect(),
        }
    }

    pub(crate) fn standardize(&self, t: &Tensor) -> Tensor {
        t.map(|v| (v - self.input_mean) / self.input_std)
    }

    /// Scaled latent features followed by the incident's age as a fraction
    /// of the lookback.
    pub(crate) fn incident_input(&self, latent: &[f64], age: usize, lookback: usize) -> Vec<f64> {
        let mut v: Vec<f64> = latent.iter().zip(&self.latent).map(|(x, s)| x / s).collect();
        v.push(age as f64 / lookback.max(1) as f64);
        v
    }

    pub fn encode_weather(&self, w: &WeatherRecord) -> [f64; WEATHER_DIM] {
        let norm = |v: f64, (lo, hi): (f64, f64)| if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
        let mut out = [0.0; WEATHER_DIM];
        out[w.weather_type.index()] = 1.0;
        out[WEATHER_DIM - 2] = norm(w.temperature_c, self.temperature);
        out[WEATHER_DIM - 1] = norm(w.sunrise_offset_min, self.sunrise);
        out
    }
}

/// Everything the predictor sees for one target slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionWindow {
    pub target_slot: usize,
    /// `T × N` speeds of slots `t − T .. t − 1`.
    pub history: Tensor,
    /// `T × WEATHER_DIM` encoded weather of the same slots.
    pub weather: Tensor,
    /// Latent features of incidents started in the lookback, ordered by
    /// start slot then id.
    pub incidents: Vec<Vec<f64>>,
    /// Slots between each incident's start and the target slot, in `1..=lookback`.
    pub incident_ages: Vec<usize>,
    /// `days × (k·N)`: target-slot speeds on each of the previous days,
    /// most recent day first.
    pub periodic: Tensor,
    /// `k × N` speeds of slots `t .. t + k − 1`.
    pub target: Tensor,
}

#[derive(Clone, Debug)]
pub(crate) struct TimedIncident {
    pub slot: i64,
    pub id: u64,
    pub latent: Vec<f64>,
}

/// Eligible target slots of a table plus the shared inputs they draw from.
#[derive(Clone, Debug)]
pub struct DigcDataset {
    pub(crate) table: SpeedTable,
    pub(crate) weather: Tensor,
    pub(crate) incidents: Vec<TimedIncident>,
    pub(crate) scales: DigcScales,
    pub(crate) history: usize,
    pub(crate) horizon: usize,
    pub(crate) periodic_days: usize,
    pub(crate) lookback: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Target slots without enough history or lookahead.
    pub skipped_slots: usize,
    /// Incidents without latent features; they never enter a window.
    pub incidents_without_features: usize,
}

impl DigcDataset {
    pub fn table(&self) -> &SpeedTable {
        &self.table
    }

    pub fn scales(&self) -> &DigcScales {
        &self.scales
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_flows(&self) -> usize {
        self.table.n_flows()
    }

    /// Earliest slot with a full history and periodic lookback.
    pub fn first_target(&self) -> usize {
        self.history.max(self.periodic_days * SLOTS_PER_DAY)
    }

    /// Indices into the incident list started in `[t − lookback, t − 1]`.
    pub(crate) fn incidents_for(&self, t: usize) -> &[TimedIncident] {
        let lo = t as i64 - self.lookback as i64;
        let a = self.incidents.partition_point(|i| i.slot < lo);
        let b = self.incidents.partition_point(|i| i.slot < t as i64);
        &self.incidents[a..b]
    }

    /// Incident ids the window at `t` sees, in feed order.
    pub fn incident_ids(&self, t: usize) -> Vec<u64> {
        self.incidents_for(t).iter().map(|i| i.id).collect()
    }

    pub(crate) fn periodic_row(&self, t: usize, out: &mut [f64]) {
        let n = self.n_flows();
        let mut k = 0;
        for d in 1..=self.periodic_days {
            for j in 0..self.horizon {
                for &v in self.table.snapshot(t + j - d * SLOTS_PER_DAY) {
                    out[k] = v / self.scales.speed_scale;
                    k += 1;
                }
            }
        }
        debug_assert_eq!(k, self.periodic_days * self.horizon * n);
    }

    /// Materializes the window of target slot `t` in raw units.
    pub fn window(&self, t: usize) -> Result<PredictionWindow> {
        let n = self.n_flows();
        if t < self.first_target() || t + self.horizon > self.table.n_slots() {
            return Err(Error::WindowOutOfRange(format!("target slot {t} has no full window")));
        }
        let mut history = Tensor::zeros(self.history, n);
        let mut weather = Tensor::zeros(self.history, WEATHER_DIM);
        for s in 0..self.history {
            history.row_mut(s).copy_from_slice(self.table.snapshot(t - self.history + s));
            weather.row_mut(s).copy_from_slice(self.weather.row(t - self.history + s));
        }
        let mut periodic = Tensor::zeros(self.periodic_days, self.horizon * n);
        for d in 1..=self.periodic_days {
            for j in 0..self.horizon {
                periodic.row_mut(d - 1)[j * n..(j + 1) * n]
                    .copy_from_slice(self.table.snapshot(t + j - d * SLOTS_PER_DAY));
            }
        }
        let mut target = Tensor::zeros(self.horizon, n);
        for j in 0..self.horizon {
            target.row_mut(j).copy_from_slice(self.table.snapshot(t + j));
        }
        Ok(PredictionWindow {
            target_slot: t,
            history,
            weather,
            incidents: self.incidents_for(t).iter().map(|i| i.latent.clone()).collect(),
            incident_ages: self.incidents_for(t).iter().map(|i| (t as i64 - i.slot) as usize).collect(),
            periodic,
            target,
        })
    }
}

/// Builds the dataset and its chronological split.
///
/// Targets in the last quarter of the table form the test set (the final
/// week of a four-week table); the rest are training targets whose horizon
/// ends before the test period, the latest `val_fraction` of them held out
/// for early stopping.
pub fn assemble_training_windows(
    table: &SpeedTable,
    incidents: &[IncidentRecord],
    weather: &[WeatherRecord],
    features: &[LatentImpactFeatures],
    cfg: &DigcConfig,
) -> Result<DigcDataset> {
    cfg.validate()?;
    if weather.len() != table.n_slots() {
        return Err(Error::InvalidInput(format!(
            "weather covers {} slots, speeds {}",
            weather.len(),
            table.n_slots()
        )));
    }
    let scales = DigcScales::from_data(table, weather, features, cfg.latent_width);
    let mut w = Tensor::zeros(table.n_slots(), WEATHER_DIM);
    for (s, rec) in weather.iter().enumerate() {
        w.row_mut(s).copy_from_slice(&scales.encode_weather(rec));
    }
    let by_id: HashMap<u64, &LatentImpactFeatures> = features.iter().map(|f| (f.incident_id, f)).collect();
    let mut timed = Vec::new();
    let mut missing = 0;
    for inc in incidents {
        match by_id.get(&inc.id) {
            Some(f) if f.values.len() == cfg.latent_width => timed.push(TimedIncident {
                slot: table.slot_of(inc.start_time),
                id: inc.id,
                latent: f.values.clone(),
            }),
            Some(f) => {
                return Err(Error::shape(
                    "assemble_training_windows",
                    format!("incident {} has {} latent values, expected {}", inc.id, f.values.len(), cfg.latent_width),
                ))
            }
            None => missing += 1,
        }
    }
    timed.sort_by_key(|i| (i.slot, i.id));

    let mut ds = DigcDataset {
        table: table.clone(),
        weather: w,
        incidents: timed,
        scales,
        history: cfg.history,
        horizon: cfg.horizon,
        periodic_days: cfg.periodic_days,
        lookback: cfg.incident_lookback,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        skipped_slots: 0,
        incidents_without_features: missing,
    };
    let n_slots = table.n_slots();
    let first = ds.first_target();
    let split = n_slots * 3 / 4;
    let mut train = Vec::new();
    for t in 0..n_slots {
        if t < first || t + cfg.horizon > n_slots {
            ds.skipped_slots += 1;
        } else if t >= split {
            ds.test.push(t);
        } else if t + cfg.horizon <= split {
            train.push(t);
        }
    }
    let n_val = ((train.len() as f64) * cfg.val_fraction).round() as usize;
    ds.val = train.split_off(train.len() - n_val.min(train.len()));
    ds.train = train;
    if ds.train.is_empty() || ds.test.is_empty() {
        return Err(Error::InvalidInput(format!(
            "table of {n_slots} slots leaves {} training and {} test targets",
            ds.train.len(),
            ds.test.len()
        )));
    }
    Ok(ds)
}

/// Model-ready inputs of several windows, sharing history rows where the
/// windows overlap.
pub(crate) struct Batch {
    /// `S × N` normalized speeds of every distinct history slot.
    pub speeds: Tensor,
    /// `S × WEATHER_DIM`.
    pub weather: Tensor,
    /// `steps[s][b]`: row fed to window `b` at step `s`.
    pub steps: Vec<Vec<usize>>,
    pub incidents: Vec<Vec<Vec<f64>>>,
    /// `B × (days·k·N)` normalized.
    pub periodic: Tensor,
    /// `B × (k·N)` normalized, step-major.
    pub target: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.incidents.len()
    }

    /// Batch over target slots of `ds`.
    pub fn from_dataset(ds: &DigcDataset, targets: &[usize]) -> Batch {
        let n = ds.n_flows();
        let scale = ds.scales.speed_scale;
        let slots: BTreeSet<usize> = targets.iter().flat_map(|&t| t - ds.history..t).collect();
        let row_of: HashMap<usize, usize> = slots.iter().enumerate().map(|(r, &s)| (s, r)).collect();
        let mut speeds = Tensor::zeros(slots.len(), n);
        let mut weather = Tensor::zeros(slots.len(), WEATHER_DIM);
        for (r, &s) in slots.iter().enumerate() {
            for (o, v) in speeds.row_mut(r).iter_mut().zip(ds.table.snapshot(s)) {
                *o = v / scale;
            }
            weather.row_mut(r).copy_from_slice(ds.weather.row(s));
        }
        let steps = (0..ds.history)
            .map(|s| targets.iter().map(|&t| row_of[&(t - ds.history + s)]).collect())
            .collect();
        let width = ds.periodic_days * ds.horizon * n;
        let mut periodic = Tensor::zeros(targets.len(), width);
        let mut target = Tensor::zeros(targets.len(), ds.horizon * n);
        for (b, &t) in targets.iter().enumerate() {
            ds.periodic_row(t, periodic.row_mut(b));
            let row = target.row_mut(b);
            for j in 0..ds.horizon {
                for (f, v) in ds.table.snapshot(t + j).iter().enumerate() {
                    row[j * n + f] = v / scale;
                }
            }
        }
        Batch {
            speeds,
            weather,
            steps,
            incidents: targets
                .iter()
                .map(|&t| {
                    ds.incidents_for(t)
                        .iter()
                        .map(|i| ds.scales.incident_input(&i.latent, (t as i64 - i.slot) as usize, ds.lookback))
                        .collect()
                })
                .collect(),
            periodic,
            target,
        }
    }

    /// Batch over materialized windows; no rows are shared.
    pub fn from_windows(windows: &[&PredictionWindow], scales: &DigcScales, lookback: usize) -> Batch {
        let (t, n) = windows[0].history.shape();
        let s = scales.speed_scale;
        let mut speeds = Tensor::zeros(windows.len() * t, n);
        let mut weather = Tensor::zeros(windows.len() * t, WEATHER_DIM);
        let pw = windows[0].periodic.len();
        let mut periodic = Tensor::zeros(windows.len(), pw);
        let mut target = Tensor::zeros(windows.len(), windows[0].target.len());
        for (b, w) in windows.iter().enumerate() {
            for r in 0..t {
                for (o, v) in speeds.row_mut(b * t + r).iter_mut().zip(w.history.row(r)) {
                    *o = v / s;
                }
                weather.row_mut(b * t + r).copy_from_slice(w.weather.row(r));
            }
            for (o, v) in periodic.row_mut(b).iter_mut().zip(w.periodic.data()) {
                *o = v / s;
            }
            for (o, v) in target.row_mut(b).iter_mut().zip(w.target.data()) {
                *o = v / s;
            }
        }
        Batch {
            speeds,
            weather,
            steps: (0..t).map(|r| (0..windows.len()).map(|b| b * t + r).collect()).collect(),
            incidents: windows
                .iter()
                .map(|w| {
                    w.incidents
                        .iter()
                        .zip(&w.incident_ages)
                        .map(|(v, &age)| scales.incident_input(v, age, lookback))
                        .collect()
                })
                .collect(),
            periodic,
            target,
        }
    }
}
