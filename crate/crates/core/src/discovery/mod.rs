//! Incident discovery: anomalous degree from drops in pairwise speed
//! similarity, relative speed variation, and the incident effect score that
//! combines them into a critical / non-critical label per incident.

mod output;
mod rsv;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::Tensor;
use crate::road_graph::{flow_distance, ClusterAssignment};
use crate::traffic_data::{IncidentRecord, LatLng, RoadGeometry, SpeedTable};

pub use output::{
    save_discovery, save_scores, save_sweep, save_temporal, temporal_distribution, TemporalRow,
};
pub use rsv::{relative_speed_variation, rsv_variant, rsv_variant_validation, RsvValidation, RsvVariant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    /// Similarity threshold for the historically similar set.
    pub delta: f64,
    /// Weight of the anomalous degree in the effect score.
    pub rho: f64,
    /// Effect score at which a flow counts as highly affected.
    pub theta: f64,
    /// Candidate radius around the incident center, meters.
    pub radius_m: f64,
    /// Slots in the Pearson similarity window.
    pub similarity_window: usize,
    /// Slots averaged by the relative speed variation.
    pub rsv_window: usize,
    /// Half-width of the RSV normalization window, slots.
    pub norm_half_window: usize,
    /// Length of the start-to-influence window, slots.
    pub influence_window: usize,
    /// Cluster count for the local anomalous degree; 1 means global.
    pub clusters: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            delta: 0.5,
            rho: 0.6,
            theta: 0.15,
            radius_m: 500.0,
            similarity_window: 24,
            rsv_window: 10,
            norm_half_window: 144,
            influence_window: 12,
            clusters: 1,
        }
    }
}

impl DiscoveryConfig {
    /// The New York setting: ρ = 0.5, θ = 0.10.
    pub fn nyc() -> Self {
        DiscoveryConfig {
            rho: 0.5,
            theta: 0.10,
            ..Self::default()
        }
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("discovery config: {m}")));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if !(self.theta >= 0.0) {
            return bad("theta must be non-negative");
        }
        if !(self.radius_m >= 0.0) {
            return bad("radius must be non-negative");
        }
        if self.similarity_window < 2 {
            return bad("similarity window needs at least 2 slots");
        }
        if self.rsv_window == 0 || self.influence_window == 0 || self.clusters == 0 {
            return bad("window lengths and cluster count must be at least 1");
        }
        Ok(())
    }

    /// Inclusive start-to-influence window `[t_s − ⌊T/2⌋, t_s + ⌊T/2⌋]`.
    pub fn influence_bounds(&self, t_s: i64) -> (i64, i64) {
        let half = (self.influence_window / 2) as i64;
        (t_s - half, t_s + half)
    }
}

/// Pearson correlation; 0 when either input has zero variance.
pub fn pearson_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson_similarity", format!("{} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("pearson_similarity needs at least 2 points".into()));
    }
    Ok(pearson_raw(x, y))
}

pub(crate) fn pearson_raw(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Pairwise similarity over slots `[t − T + 1, t]`.
///
/// With `clusters`, pairs in different clusters get similarity 0.
pub fn similarity_matrix(
    table: &SpeedTable,
    t: usize,
    cfg: &DiscoveryConfig,
    clusters: Option<&ClusterAssignment>,
) -> Result<Tensor> {
    let w = cfg.similarity_window;
    if t + 1 < w || t >= table.n_slots() {
        return Err(Error::WindowOutOfRange(format!(
            "similarity window of {w} slots ending at slot {t} leaves the table (0..{})",
            table.n_slots()
        )));
    }
    let n = table.n_flows();
    if let Some(c) = clusters {
        if c.labels.len() != n {
            return Err(Error::shape("similarity_matrix", format!("{} labels for {n} flows", c.labels.len())));
        }
    }
    let first = t + 1 - w;
    // Centered series and their norms, then one dot product per pair.
    let mut centered = vec![0.0; n * w];
    let mut norms = vec![0.0; n];
    for f in 0..n {
        let series = &mut centered[f * w..(f + 1) * w];
        for (k, v) in series.iter_mut().enumerate() {
            *v = table.speed(first + k, f);
        }
        let mean = series.iter().sum::<f64>() / w as f64;
        series.iter_mut().for_each(|v| *v -= mean);
        norms[f] = series.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let mut s = Tensor::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            if clusters.is_some_and(|c| c.labels[i] != c.labels[j]) {
                continue;
            }
            let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = centered[i * w..(i + 1) * w]
                    .iter()
                    .zip(&centered[j * w..(j + 1) * w])
                    .map(|(a, b)| a * b)
                    .sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    Ok(s)
}

/// `SD = max(0, S_prev − S_curr)` elementwise.
pub fn similarity_decrease(prev: &Tensor, curr: &Tensor) -> Result<Tensor> {
    if prev.shape() != curr.shape() {
        return Err(Error::shape(
            "similarity_decrease",
            format!("{:?} vs {:?}", prev.shape(), curr.shape()),
        ));
    }
    Ok(prev.zip_map(curr, |p, c| (p - c).max(0.0)))
}

/// Anomalous degree of flow `i`: the `S_prev`-weighted mean similarity drop
/// over its historically similar set `{j ≠ i : S_curr[i][j] ≥ δ}`, limited
/// to `i`'s cluster when labels are given. 0 when the set is empty or the
/// weights do not sum to a positive value.
pub fn anomalous_degree(
    i: usize,
    prev: &Tensor,
    curr: &Tensor,
    sd: &Tensor,
    delta: f64,
    labels: Option<&[usize]>,
) -> f64 {
    let n = curr.cols();
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..n {
        if j == i || curr.get(i, j) < delta || labels.is_some_and(|l| l[i] != l[j]) {
            continue;
        }
        let w = prev.get(i, j);
        num += w * sd.get(i, j);
        den += w;
    }
    if den > 0.0 {
        (num / den).max(0.0)
    } else {
        0.0
    }
}

pub fn incident_effect_score(ad: f64, rsv: f64, rho: f64) -> f64 {
    rho * ad + (1.0 - rho) * rsv
}

/// Per-flow AD, RSV and IES over a contiguous range of slots, slot-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowScoreSeries {
    pub first_slot: usize,
    pub n_slots: usize,
    pub n_flows: usize,
    pub rho: f64,
    pub ad: Vec<f64>,
    pub rsv: Vec<f64>,
    pub ies: Vec<f64>,
}

impl FlowScoreSeries {
    fn index(&self, slot: usize, flow: usize) -> usize {
        (slot - self.first_slot) * self.n_flows + flow
    }

    pub fn ad(&self, slot: usize, flow: usize) -> f64 {
        self.ad[self.index(slot, flow)]
    }

    pub fn rsv(&self, slot: usize, flow: usize) -> f64 {
        self.rsv[self.index(slot, flow)]
    }

    pub fn ies(&self, slot: usize, flow: usize) -> f64 {
        self.ies[self.index(slot, flow)]
    }

    pub fn covers(&self, first: usize, last: usize) -> bool {
        first >= self.first_slot && last < self.first_slot + self.n_slots
    }
}

/// Scores every flow at slots `first..=last`.
pub fn score_flows(
    table: &SpeedTable,
    cfg: &DiscoveryConfig,
    clusters: Option<&ClusterAssignment>,
    first: usize,
    last: usize,
) -> Result<FlowScoreSeries> {
    cfg.validate()?;
    if last < first {
        return Err(Error::InvalidInput(format!("empty slot range {first}..={last}")));
    }
    if first == 0 {
        return Err(Error::WindowOutOfRange("slot 0 has no previous similarity".into()));
    }
    let n = table.n_flows();
    let labels = clusters.map(|c| c.labels.as_slice());
    let mut prev = similarity_matrix(table, first - 1, cfg, clusters)?;
    let len = last - first + 1;
    let mut out = FlowScoreSeries {
        first_slot: first,
        n_slots: len,
        n_flows: n,
        rho: cfg.rho,
        ad: Vec::with_capacity(len * n),
        rsv: Vec::with_capacity(len * n),
        ies: Vec::with_capacity(len * n),
    };
    for t in first..=last {
        let curr = similarity_matrix(table, t, cfg, clusters)?;
        let sd = similarity_decrease(&prev, &curr)?;
        for i in 0..n {
            let ad = anomalous_degree(i, &prev, &curr, &sd, cfg.delta, labels);
            let rsv = relative_speed_variation(table, i, t, cfg);
            out.ad.push(ad);
            out.rsv.push(rsv);
            out.ies.push(incident_effect_score(ad, rsv, cfg.rho));
        }
        prev = curr;
    }
    Ok(out)
}

/// Flows whose centroid lies within `radius_m` of `center`.
pub fn candidate_flows(center: LatLng, geometry: &RoadGeometry, radius_m: f64) -> Vec<usize> {
    geometry
        .flows
        .iter()
        .enumerate()
        .filter(|(_, f)| flow_distance(f.centroid(), center) <= radius_m)
        .map(|(i, _)| i)
        .collect()
}

/// Start-to-influence window of an incident as table slots (inclusive).
pub fn influence_window(incident: &IncidentRecord, table: &SpeedTable, cfg: &DiscoveryConfig) -> Result<(usize, usize)> {
    let t_s = table.slot_of(incident.start_time);
    let (a, b) = cfg.influence_bounds(t_s);
    // Slot a − 1 needs a full similarity window too.
    let earliest = cfg.similarity_window as i64;
    if a < earliest || b >= table.n_slots() as i64 {
        return Err(Error::WindowOutOfRange(format!(
            "incident {} influence window {a}..={b} needs slots {earliest}..{}",
            incident.id,
            table.n_slots()
        )));
    }
    Ok((a as usize, b as usize))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffectedFlow {
    pub flow: usize,
    pub max_ies: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalityLabel {
    pub incident_id: u64,
    pub is_critical: bool,
    /// Highest effect score over all candidates and the window (0 if none).
    pub max_ies: f64,
    pub n_candidates: usize,
    /// Candidates whose in-window maximum reached θ.
    pub affected: Vec<AffectedFlow>,
}

/// Labels one incident from precomputed scores covering its window.
pub fn label_critical(
    incident: &IncidentRecord,
    candidates: &[usize],
    scores: &FlowScoreSeries,
    table: &SpeedTable,
    cfg: &DiscoveryConfig,
) -> Result<CriticalityLabel> {
    let (a, b) = influence_window(incident, table, cfg)?;
    if !scores.covers(a, b) {
        return Err(Error::WindowOutOfRange(format!(
            "scores cover {}..{} but incident {} needs {a}..={b}",
            scores.first_slot,
            scores.first_slot + scores.n_slots,
            incident.id
        )));
    }
    let maxima: Vec<f64> = candidates
        .iter()
        .map(|&f| (a..=b).map(|t| scores.ies(t, f)).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(label_from_maxima(incident.id, candidates, &maxima, cfg.theta))
}

fn label_from_maxima(incident_id: u64, candidates: &[usize], maxima: &[f64], theta: f64) -> CriticalityLabel {
    let affected: Vec<AffectedFlow> = candidates
        .iter()
        .zip(maxima)
        .filter(|(_, &m)| m >= theta)
        .map(|(&flow, &max_ies)| AffectedFlow { flow, max_ies })
        .collect();
    CriticalityLabel {
        incident_id,
        is_critical: !affected.is_empty(),
        max_ies: maxima.iter().copied().fold(0.0, f64::max),
        n_candidates: candidates.len(),
        affected,
    }
}

/// AD and RSV of each candidate flow across one incident's window; enough
/// to relabel under any (ρ, θ) without rescoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncidentScores {
    pub incident_id: u64,
    pub window: (usize, usize),
    pub candidates: Vec<usize>,
    /// `ad[c][k]` is candidate `c` at slot `window.0 + k`.
    pub ad: Vec<Vec<f64>>,
    pub rsv: Vec<Vec<f64>>,
}

impl IncidentScores {
    pub fn label(&self, rho: f64, theta: f64) -> CriticalityLabel {
        let maxima: Vec<f64> = self
            .ad
            .iter()
            .zip(&self.rsv)
            .map(|(ad, rsv)| {
                ad.iter()
                    .zip(rsv)
                    .map(|(&a, &r)| incident_effect_score(a, r, rho))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        label_from_maxima(self.incident_id, &self.candidates, &maxima, theta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub scores: Vec<IncidentScores>,
    pub labels: Vec<CriticalityLabel>,
    /// Incidents whose window leaves the table.
    pub skipped: Vec<u64>,
}

/// Scores and labels every incident. Incidents too close to the table
/// edges are skipped and listed.
pub fn discover(
    table: &SpeedTable,
    geometry: &RoadGeometry,
    incidents: &[IncidentRecord],
    cfg: &DiscoveryConfig,
    clusters: Option<&ClusterAssignment>,
) -> Result<DiscoveryReport> {
    cfg.validate()?;
    if geometry.len() != table.n_flows() {
        return Err(Error::shape(
            "discover",
            format!("geometry has {} flows, speeds {}", geometry.len(), table.n_flows()),
        ));
    }
    let mut report = DiscoveryReport {
        scores: Vec::new(),
        labels: Vec::new(),
        skipped: Vec::new(),
    };
    for inc in incidents {
        let Ok((a, b)) = influence_window(inc, table, cfg) else {
            report.skipped.push(inc.id);
            continue;
        };
        let candidates = candidate_flows(inc.center(), geometry, cfg.radius_m);
        let series = score_flows(table, cfg, clusters, a, b)?;
        let pick = |v: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
            candidates.iter().map(|&f| (a..=b).map(|t| v(t, f)).collect()).collect()
        };
        let scores = IncidentScores {
            incident_id: inc.id,
            window: (a, b),
            candidates: candidates.clone(),
            ad: pick(&|t, f| series.ad(t, f)),
            rsv: pick(&|t, f| series.rsv(t, f)),
        };
        report.labels.push(label_critical(inc, &candidates, &series, table, cfg)?);
        report.scores.push(scores);
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub theta: f64,
    pub critical_count: usize,
}

/// Critical-incident counts over a ρ × θ grid.
pub fn sweep(scores: &[IncidentScores], rhos: &[f64], thetas: &[f64]) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(rhos.len() * thetas.len());
    for &rho in rhos {
        for &theta in thetas {
            let critical_count = scores.iter().filter(|s| s.label(rho, theta).is_critical).count();
            rows.push(SweepRow { rho, theta, critical_count });
        }
    }
    rows
}
