//! Synthetic grid cities with injected incidents of known impact.
//!
//! Each district is an `R × C` grid of intersections joined by road segments
//! (flows), so a district holds `2RC − R − C` flows. Speeds are a per-flow
//! base speed shaped by a daily profile, perturbed by district-level and
//! flow-level AR(1) noise, and multiplied by incident, dip and weather
//! factors. Every random stream is derived from the scenario seed by label,
//! so changing the incident plan never changes the background noise.

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    DayCategory, FlowSegment, IncidentRecord, IncidentType, LatLng, RoadGeometry, SpeedTable, WeatherRecord,
    WeatherType, SLOTS_PER_DAY, SLOTS_PER_HOUR, SLOT_MINUTES,
};
use crate::error::{Error, Result};
use crate::road_graph::flow_distance;
use crate::seed::rng_for;

const METERS_PER_DEG_LAT: f64 = 111_194.93;

/// Background noise, as fractions of the flow's profile speed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub district_sd: f64,
    pub district_phi: f64,
    pub flow_sd: f64,
    pub flow_phi: f64,
    pub obs_sd: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            district_sd: 0.04,
            district_phi: 0.95,
            flow_sd: 0.02,
            flow_phi: 0.7,
            obs_sd: 0.015,
        }
    }
}

/// One incident placed at a flow's centroid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectedIncident {
    pub id: u64,
    pub incident_type: IncidentType,
    pub anchor_flow: usize,
    pub start_slot: usize,
    pub duration_slots: usize,
    /// Speed multiplier at full effect; 1.0 leaves speeds untouched.
    pub factor: f64,
    /// Flows whose centroid lies within this distance are depressed.
    pub radius_m: f64,
    pub road_closed: bool,
    /// Slots over which the depression deepens linearly to `factor`, and
    /// over which it clears again before the end.
    #[serde(default = "one")]
    pub ramp_slots: usize,
}

fn one() -> usize {
    1
}

/// Randomly placed incidents: a share with high impact, the rest with none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IncidentPlan {
    pub count: usize,
    pub high_impact_fraction: f64,
    pub factor_range: (f64, f64),
    pub radius_m: f64,
    pub duration_slots: (usize, usize),
    pub ramp_slots: usize,
    /// Minimum slot gap between incidents whose centers are closer than
    /// `separation_m`. Zero disables isolation.
    pub gap_slots: usize,
    pub separation_m: f64,
    pub margin_start: usize,
    pub margin_end: usize,
}

impl Default for IncidentPlan {
    fn default() -> Self {
        IncidentPlan {
            count: 20,
            high_impact_fraction: 0.5,
            factor_range: (0.3, 0.5),
            radius_m: 260.0,
            duration_slots: (12, 24),
            ramp_slots: 1,
            gap_slots: 36,
            separation_m: 1500.0,
            margin_start: 48,
            margin_end: 12,
        }
    }
}

/// Short slowdowns with no incident record, indistinguishable from an
/// incident onset in the speeds alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DipPlan {
    pub per_day: f64,
    pub factor_range: (f64, f64),
    pub duration_slots: (usize, usize),
    pub radius_m: f64,
    /// Build-up and clearing length, as for incidents.
    pub ramp_slots: usize,
}

impl Default for DipPlan {
    fn default() -> Self {
        DipPlan {
            per_day: 6.0,
            factor_range: (0.4, 0.6),
            duration_slots: (2, 5),
            radius_m: 260.0,
            ramp_slots: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticScenario {
    pub seed: u64,
    pub n_flows: usize,
    pub days: usize,
    pub start_time: NaiveDateTime,
    /// Number of disconnected districts the flows are split into.
    pub districts: usize,
    /// Explicit `(rows, cols)` intersection grids, one per district.
    pub district_grids: Option<Vec<(usize, usize)>>,
    pub origin: LatLng,
    pub block_m: f64,
    pub district_gap_m: f64,
    pub base_speed_kmh: (f64, f64),
    /// Depth of the weekday rush-hour slowdowns (fraction of base speed).
    pub rush_depth: f64,
    /// Multiplies the width of the rush-hour bumps; small values give sharp
    /// recurring slowdowns.
    pub rush_width: f64,
    pub noise: NoiseModel,
    pub rain_factor: f64,
    pub incidents: Vec<InjectedIncident>,
    pub random_incidents: Option<IncidentPlan>,
    pub dips: Option<DipPlan>,
}

impl Default for SyntheticScenario {
    fn default() -> Self {
        SyntheticScenario {
            seed: 7,
            n_flows: 24,
            days: 2,
            start_time: NaiveDate::from_ymd_opt(2019, 4, 1)
                .expect("valid date")
                .and_hms_opt(0, 0, 0)
                .expect("valid time"),
            districts: 1,
            district_grids: None,
            origin: LatLng::new(37.75, -122.45),
            block_m: 200.0,
            district_gap_m: 2000.0,
            base_speed_kmh: (35.0, 65.0),
            rush_depth: 0.12,
            rush_width: 1.0,
            noise: NoiseModel::default(),
            rain_factor: 0.92,
            incidents: Vec::new(),
            random_incidents: None,
            dips: None,
        }
    }
}

impl SyntheticScenario {
    /// Four weeks of 24 flows with frequent incidents that build up and
    /// clear over half an hour and cover a large part of the city.
    pub fn incident_month(seed: u64) -> Self {
        SyntheticScenario {
            seed,
            n_flows: 24,
            days: 28,
            noise: NoiseModel {
                obs_sd: 0.01,
                ..Default::default()
            },
            random_incidents: Some(IncidentPlan {
                count: 150,
                high_impact_fraction: 0.6,
                radius_m: 400.0,
                duration_slots: (20, 36),
                ramp_slots: 6,
                gap_slots: 12,
                separation_m: 300.0,
                ..Default::default()
            }),
            ..Default::default()
        }
    }
}

/// Ground truth for one injected incident.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncidentTruth {
    pub incident_id: u64,
    pub factor: f64,
    pub radius_m: f64,
    pub start_slot: usize,
    /// Exclusive.
    pub end_slot: usize,
    pub affected_flows: Vec<usize>,
    pub high_impact: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCity {
    pub geometry: RoadGeometry,
    pub speeds: SpeedTable,
    pub incidents: Vec<IncidentRecord>,
    pub weather: Vec<WeatherRecord>,
    pub truth: Vec<IncidentTruth>,
    /// District index of every flow.
    pub district_of: Vec<usize>,
}

/// Incidents counted as high impact: depression to at most half speed on
/// at least three flows.
pub fn is_high_impact(factor: f64, affected: usize) -> bool {
    factor <= 0.5 && affected >= 3
}

/// Flow count of an `rows × cols` intersection grid.
pub fn grid_flow_count(rows: usize, cols: usize) -> usize {
    2 * rows * cols - rows - cols
}

/// Most square grid (rows ≤ cols, both ≥ 2) holding exactly `n` flows.
pub fn grid_for(n: usize) -> Option<(usize, usize)> {
    let mut best = None;
    for rows in 2.. {
        if grid_flow_count(rows, rows) > n {
            break;
        }
        // n = 2rc − r − c  ⇒  c = (n + r) / (2r − 1)
        if (n + rows).is_multiple_of(2 * rows - 1) {
            let cols = (n + rows) / (2 * rows - 1);
            if cols >= rows {
                best = Some((rows, cols));
            }
        }
    }
    best
}

fn district_layout(s: &SyntheticScenario) -> Result<Vec<(usize, usize)>> {
    if let Some(grids) = &s.district_grids {
        if grids.iter().any(|&(r, c)| r < 2 || c < 2) {
            return Err(Error::InfeasibleGeometry("district grids need at least 2×2 intersections".into()));
        }
        let total: usize = grids.iter().map(|&(r, c)| grid_flow_count(r, c)).sum();
        if total != s.n_flows {
            return Err(Error::InfeasibleGeometry(format!(
                "district grids hold {total} flows, scenario asks for {}",
                s.n_flows
            )));
        }
        return Ok(grids.clone());
    }
    if s.districts == 0 {
        return Err(Error::InfeasibleGeometry("at least one district is required".into()));
    }
    let base = s.n_flows / s.districts;
    let extra = s.n_flows % s.districts;
    (0..s.districts)
        .map(|d| {
            let n = base + usize::from(d < extra);
            grid_for(n).ok_or_else(|| {
                Error::InfeasibleGeometry(format!("{n} flows cannot form a grid of at least 2×2 intersections"))
            })
        })
        .collect()
}

fn build_geometry(s: &SyntheticScenario, grids: &[(usize, usize)]) -> (RoadGeometry, Vec<usize>) {
    let dlat = s.block_m / METERS_PER_DEG_LAT;
    let dlng = s.block_m / (METERS_PER_DEG_LAT * s.origin.lat.to_radians().cos());
    let gap_lng = s.district_gap_m / (METERS_PER_DEG_LAT * s.origin.lat.to_radians().cos());
    let mut flows = Vec::new();
    let mut district_of = Vec::new();
    let mut lng0 = s.origin.lng;
    for (d, &(rows, cols)) in grids.iter().enumerate() {
        let node = |r: usize, c: usize| LatLng::new(s.origin.lat + r as f64 * dlat, lng0 + c as f64 * dlng);
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    flows.push(FlowSegment { a: node(r, c), b: node(r, c + 1) });
                    district_of.push(d);
                }
                if r + 1 < rows {
                    flows.push(FlowSegment { a: node(r, c), b: node(r + 1, c) });
                    district_of.push(d);
                }
            }
        }
        lng0 += (cols - 1) as f64 * dlng + gap_lng;
    }
    (RoadGeometry { flows }, district_of)
}

/// Weekday rush hours at 08:00 and 17:30; weekends get a shallower midday dip.
fn daily_profile(hour: f64, day: DayCategory, depth: f64, width: f64) -> f64 {
    let bump = |center: f64, w: f64| (-0.5 * ((hour - center) / (w * width)).powi(2)).exp();
    match day {
        DayCategory::Weekday => 1.0 - depth * (bump(8.0, 1.3) + bump(17.5, 1.5)),
        _ => 1.0 - 0.5 * depth * bump(13.0, 2.5),
    }
}

fn ar_series(rng: &mut impl Rng, n: usize, phi: f64, sd: f64) -> Vec<f64> {
    if sd == 0.0 {
        return vec![0.0; n];
    }
    // Innovation scaled so the stationary standard deviation is `sd`.
    let innov = Normal::new(0.0, sd * (1.0 - phi * phi).max(1e-12).sqrt()).expect("finite sd");
    let mut x = Normal::new(0.0, sd).expect("finite sd").sample(rng);
    (0..n)
        .map(|_| {
            let out = x;
            x = phi * x + innov.sample(rng);
            out
        })
        .collect()
}

fn generate_weather(s: &SyntheticScenario, n_slots: usize) -> Vec<WeatherRecord> {
    let mut rng = rng_for(s.seed, "synthetic/weather");
    let weights = [0.5, 0.3, 0.12, 0.05, 0.03];
    let mut current = WeatherType::Clear;
    let mut day_temp = 0.0;
    let mut out = Vec::with_capacity(n_slots);
    for slot in 0..n_slots {
        if slot % SLOTS_PER_DAY == 0 {
            day_temp = rng.random_range(-3.0..3.0);
        }
        if slot % SLOTS_PER_HOUR == 0 && slot > 0 && rng.random_bool(0.1) {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (w, ty) in weights.iter().zip(WeatherType::ALL) {
                acc += w;
                if u < acc {
                    current = ty;
                    break;
                }
            }
        }
        let hour = (slot % SLOTS_PER_DAY) as f64 / SLOTS_PER_HOUR as f64;
        let day = (slot / SLOTS_PER_DAY) as f64;
        out.push(WeatherRecord {
            slot,
            weather_type: current,
            temperature_c: 15.0 + day_temp + 5.0 * (2.0 * std::f64::consts::PI * (hour - 9.0) / 24.0).sin(),
            sunrise_offset_min: 390.0 - day,
        });
    }
    out
}

fn flows_within(centroids: &[LatLng], center: LatLng, radius_m: f64) -> Vec<usize> {
    centroids
        .iter()
        .enumerate()
        .filter(|(_, c)| flow_distance(**c, center) <= radius_m)
        .map(|(i, _)| i)
        .collect()
}

fn plan_incidents(
    s: &SyntheticScenario,
    plan: &IncidentPlan,
    centroids: &[LatLng],
    n_slots: usize,
    first_id: u64,
) -> Result<Vec<InjectedIncident>> {
    let mut rng = rng_for(s.seed, "synthetic/incidents");
    let (dmin, dmax) = plan.duration_slots;
    if dmin == 0 || dmax < dmin {
        return Err(Error::InvalidInput("incident duration range must be 1 ≤ min ≤ max".into()));
    }
    if plan.margin_start + dmax + plan.margin_end >= n_slots {
        return Err(Error::InvalidInput("scenario too short for the incident margins".into()));
    }
    let n_high = (plan.count as f64 * plan.high_impact_fraction).round() as usize;
    let kinds = [
        IncidentType::Congestion,
        IncidentType::Collision,
        IncidentType::Construction,
        IncidentType::Event,
    ];
    let mut placed: Vec<InjectedIncident> = Vec::with_capacity(plan.count);
    let mut order: Vec<bool> = (0..plan.count).map(|i| i < n_high).collect();
    // Interleave high- and zero-impact incidents in time.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    for (k, high) in order.into_iter().enumerate() {
        let mut accepted = None;
        for _ in 0..10_000 {
            let anchor = rng.random_range(0..centroids.len());
            let duration = rng.random_range(dmin..=dmax);
            let start = rng.random_range(plan.margin_start..n_slots - plan.margin_end - duration);
            let clash = placed.iter().any(|p| {
                let near = flow_distance(centroids[p.anchor_flow], centroids[anchor]) < plan.separation_m;
                let overlap = start < p.start_slot + p.duration_slots + plan.gap_slots
                    && p.start_slot < start + duration + plan.gap_slots;
                near && overlap
            });
            if clash {
                continue;
            }
            if high && flows_within(centroids, centroids[anchor], plan.radius_m).len() < 3 {
                continue;
            }
            accepted = Some((anchor, start, duration));
            break;
        }
        let (anchor, start, duration) = accepted.ok_or_else(|| {
            Error::InvalidInput(format!(
                "could not place incident {} of {} under the isolation constraints",
                k + 1,
                plan.count
            ))
        })?;
        let factor = if high {
            rng.random_range(plan.factor_range.0..=plan.factor_range.1)
        } else {
            1.0
        };
        let incident_type = kinds.choose(&mut rng).expect("non-empty").clone();
        let road_closed = rng.random_bool(if high { 0.7 } else { 0.2 });
        placed.push(InjectedIncident {
            id: first_id + k as u64,
            incident_type,
            anchor_flow: anchor,
            start_slot: start,
            duration_slots: duration,
            factor,
            radius_m: plan.radius_m,
            road_closed,
            ramp_slots: plan.ramp_slots,
        });
    }
    Ok(placed)
}

/// Multiplier of one incident or dip at `slot`; 1 outside `[start, end)`.
fn depression(slot: usize, start: usize, end: usize, factor: f64, ramp: usize) -> f64 {
    if slot < start || slot >= end {
        return 1.0;
    }
    // Builds up over `ramp` slots and clears over the last `ramp` slots.
    let ramp = ramp.max(1) as f64;
    let progress = ((slot - start + 1) as f64 / ramp).min((end - slot) as f64 / ramp).min(1.0);
    1.0 - (1.0 - factor) * progress
}

pub fn generate_synthetic_city(s: &SyntheticScenario) -> Result<SyntheticCity> {
    if s.n_flows < 2 {
        return Err(Error::InvalidInput("a synthetic city needs at least 2 flows".into()));
    }
    if s.days < 2 {
        return Err(Error::InvalidInput("a synthetic city needs at least 2 days".into()));
    }
    let grids = district_layout(s)?;
    let (geometry, district_of) = build_geometry(s, &grids);
    let n = geometry.len();
    let n_slots = s.days * SLOTS_PER_DAY;
    let centroids = geometry.centroids();

    let mut incidents = s.incidents.clone();
    if let Some(plan) = &s.random_incidents {
        let first_id = incidents.iter().map(|i| i.id + 1).max().unwrap_or(1);
        incidents.extend(plan_incidents(s, plan, &centroids, n_slots, first_id)?);
    }
    for inc in &incidents {
        if inc.anchor_flow >= n || inc.start_slot + inc.duration_slots > n_slots || inc.duration_slots == 0 {
            return Err(Error::InvalidInput(format!("incident {} lies outside the city", inc.id)));
        }
        if !(inc.factor > 0.0 && inc.factor <= 1.0) {
            return Err(Error::InvalidInput(format!("incident {} factor must be in (0, 1]", inc.id)));
        }
    }

    // Background speeds.
    let mut rng = rng_for(s.seed, "synthetic/speeds");
    let base: Vec<f64> = (0..n)
        .map(|_| rng.random_range(s.base_speed_kmh.0..=s.base_speed_kmh.1))
        .collect();
    let district_noise: Vec<Vec<f64>> = (0..grids.len())
        .map(|_| ar_series(&mut rng, n_slots, s.noise.district_phi, s.noise.district_sd))
        .collect();
    let flow_noise: Vec<Vec<f64>> = (0..n)
        .map(|_| ar_series(&mut rng, n_slots, s.noise.flow_phi, s.noise.flow_sd))
        .collect();
    let obs = Normal::new(0.0, s.noise.obs_sd.max(0.0)).expect("finite sd");
    let weather = generate_weather(s, n_slots);
    let mut speeds = vec![0.0; n_slots * n];
    for slot in 0..n_slots {
        let time = s.start_time + Duration::minutes(SLOT_MINUTES * slot as i64);
        let hour = time.hour() as f64 + time.minute() as f64 / 60.0;
        let profile = daily_profile(hour, DayCategory::of(time), s.rush_depth, s.rush_width);
        let rain = match weather[slot].weather_type {
            WeatherType::Rain | WeatherType::Snow => s.rain_factor,
            _ => 1.0,
        };
        for f in 0..n {
            let eps = if s.noise.obs_sd > 0.0 { obs.sample(&mut rng) } else { 0.0 };
            let mult = (1.0 + district_noise[district_of[f]][slot] + flow_noise[f][slot] + eps).max(0.05);
            speeds[slot * n + f] = base[f] * profile * mult * rain;
        }
    }

    if let Some(dips) = &s.dips {
        let mut rng = rng_for(s.seed, "synthetic/dips");
        let count = (dips.per_day * s.days as f64).round() as usize;
        for _ in 0..count {
            let anchor = rng.random_range(0..n);
            let duration = rng.random_range(dips.duration_slots.0..=dips.duration_slots.1.max(dips.duration_slots.0));
            let start = rng.random_range(0..n_slots.saturating_sub(duration).max(1));
            let factor = rng.random_range(dips.factor_range.0..=dips.factor_range.1);
            for f in flows_within(&centroids, centroids[anchor], dips.radius_m) {
                let end = (start + duration).min(n_slots);
                for slot in start..end {
                    speeds[slot * n + f] *= depression(slot, start, end, factor, dips.ramp_slots);
                }
            }
        }
    }

    let mut truth = Vec::with_capacity(incidents.len());
    let mut records = Vec::with_capacity(incidents.len());
    for inc in &incidents {
        let center = centroids[inc.anchor_flow];
        let affected = flows_within(&centroids, center, inc.radius_m);
        let end = inc.start_slot + inc.duration_slots;
        if inc.factor < 1.0 {
            for &f in &affected {
                for slot in inc.start_slot..end {
                    speeds[slot * n + f] *= depression(slot, inc.start_slot, end, inc.factor, inc.ramp_slots);
                }
            }
        }
        let start_time = s.start_time + Duration::minutes(SLOT_MINUTES * inc.start_slot as i64);
        records.push(IncidentRecord {
            id: inc.id,
            incident_type: inc.incident_type.clone(),
            lat: center.lat,
            lng: center.lng,
            start_time,
            end_time: start_time + Duration::minutes(SLOT_MINUTES * inc.duration_slots as i64),
            road_closed: inc.road_closed,
            day_category: DayCategory::of(start_time),
        });
        truth.push(IncidentTruth {
            incident_id: inc.id,
            factor: inc.factor,
            radius_m: inc.radius_m,
            start_slot: inc.start_slot,
            end_slot: end,
            high_impact: is_high_impact(inc.factor, affected.len()),
            affected_flows: affected,
        });
    }
    records.sort_by(|a, b| a.start_time.cmp(&b.start_time).then(a.id.cmp(&b.id)));
    truth.sort_by_key(|t| (t.start_slot, t.incident_id));

    Ok(SyntheticCity {
        speeds: SpeedTable::new(s.start_time, n, speeds)?,
        geometry,
        incidents: records,
        weather,
        truth,
        district_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticScenario {
        SyntheticScenario {
            n_flows: 12,
            ..SyntheticScenario::default()
        }
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(grid_for(24), Some((4, 4)));
        assert_eq!(grid_for(12), Some((3, 3)));
        assert_eq!(grid_for(7), Some((2, 3)));
        assert_eq!(grid_for(4), Some((2, 2)));
        assert_eq!(grid_for(5), None);
        assert_eq!(grid_for(2), None);
    }

    #[test]
    fn infeasible_flow_count_is_an_error() {
        let s = SyntheticScenario {
            n_flows: 11,
            ..small()
        };
        assert!(matches!(generate_synthetic_city(&s), Err(Error::InfeasibleGeometry(_))));
    }

    #[test]
    fn seed_seven_is_reproducible() {
        let a = generate_synthetic_city(&small()).unwrap();
        let b = generate_synthetic_city(&small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn neutral_incident_leaves_speeds_unchanged() {
        let plain = generate_synthetic_city(&small()).unwrap();
        let s = SyntheticScenario {
            incidents: vec![InjectedIncident {
                id: 1,
                incident_type: IncidentType::Event,
                anchor_flow: 0,
                start_slot: 100,
                duration_slots: 20,
                factor: 1.0,
                radius_m: 500.0,
                road_closed: false,
                ramp_slots: 1,
            }],
            ..small()
        };
        let with = generate_synthetic_city(&s).unwrap();
        assert_eq!(plain.speeds, with.speeds);
        assert_eq!(with.incidents.len(), 1);
        assert!(!with.truth[0].high_impact);
    }

    #[test]
    fn grid_flows_meet_at_shared_endpoints() {
        let city = generate_synthetic_city(&small()).unwrap();
        // 3×3 grid: the centre intersection joins four flows.
        let centre = city.geometry.flows[7].a;
        let touching = city
            .geometry
            .flows
            .iter()
            .filter(|f| f.a == centre || f.b == centre)
            .count();
        assert_eq!(touching, 4);
    }

    #[test]
    fn random_plan_respects_isolation() {
        let plan = IncidentPlan {
            count: 10,
            ..IncidentPlan::default()
        };
        let s = SyntheticScenario {
            n_flows: 24,
            days: 3,
            random_incidents: Some(plan.clone()),
            ..SyntheticScenario::default()
        };
        let city = generate_synthetic_city(&s).unwrap();
        assert_eq!(city.truth.len(), 10);
        assert_eq!(city.truth.iter().filter(|t| t.factor < 1.0).count(), 5);
        for (i, a) in city.truth.iter().enumerate() {
            for b in &city.truth[i + 1..] {
                assert!(b.start_slot >= a.end_slot + plan.gap_slots || a.start_slot >= b.end_slot + plan.gap_slots);
            }
        }
    }
}
