use serde::{Deserialize, Serialize};

use super::{
    candidate_flows, influence_window, pearson_raw, similarity_decrease, similarity_matrix, anomalous_degree,
    DiscoveryConfig,
};
use crate::error::{Error, Result};
use crate::road_graph::ClusterAssignment;
use crate::traffic_data::{IncidentRecord, RoadGeometry, SpeedTable};

/// Weights of the historical and recent terms in the composite variants.
const P: f64 = 0.5;
const Q: f64 = 0.5;

/// Maximum speed over `[t − h, t + h]`, clamped to the table.
fn window_max(table: &SpeedTable, flow: usize, t: usize, half: usize) -> f64 {
    let lo = t.saturating_sub(half);
    let hi = (t + half).min(table.n_slots() - 1);
    (lo..=hi).map(|s| table.speed(s, flow)).fold(0.0, f64::max)
}

/// Mean of the last `T` speeds including slot `t` (fewer near the start).
fn recent_mean(table: &SpeedTable, flow: usize, t: usize, len: usize) -> f64 {
    let lo = (t + 1).saturating_sub(len);
    (lo..=t).map(|s| table.speed(s, flow)).sum::<f64>() / (t + 1 - lo) as f64
}

/// `|mean(v[t−T+1..=t]) − v[t]| / max(v[t−h..=t+h])`, 0 when the max is 0.
pub fn relative_speed_variation(table: &SpeedTable, flow: usize, t: usize, cfg: &DiscoveryConfig) -> f64 {
    let max = window_max(table, flow, t, cfg.norm_half_window);
    if max <= 0.0 {
        return 0.0;
    }
    (recent_mean(table, flow, t, cfg.rsv_window) - table.speed(t, flow)).abs() / max
}

/// Candidate ways to measure relative speed variation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RsvVariant {
    /// Historical, recent and slope terms.
    SlopeRecentHistorical,
    /// Historical and recent terms.
    RecentHistorical,
    /// Historical term only; the one the pipeline uses.
    Historical,
}

impl RsvVariant {
    pub const ALL: [RsvVariant; 3] = [
        RsvVariant::SlopeRecentHistorical,
        RsvVariant::RecentHistorical,
        RsvVariant::Historical,
    ];
}

/// One candidate RSV, each term divided by the normalization maximum.
///
/// Slopes are absolute per-slot speed changes: the recent slope is
/// `|v[t] − v[t−1]|`, the historical one the mean of those over the RSV
/// window.
pub fn rsv_variant(table: &SpeedTable, flow: usize, t: usize, cfg: &DiscoveryConfig, variant: RsvVariant) -> f64 {
    let max = window_max(table, flow, t, cfg.norm_half_window);
    if max <= 0.0 {
        return 0.0;
    }
    let v = table.speed(t, flow);
    let hist = (recent_mean(table, flow, t, cfg.rsv_window) - v).abs() / max;
    if variant == RsvVariant::Historical {
        return hist;
    }
    let prev = if t > 0 { table.speed(t - 1, flow) } else { v };
    let recent = (prev - v).abs() / max;
    if variant == RsvVariant::RecentHistorical {
        return hist * P + recent * Q;
    }
    let lo = (t + 1).saturating_sub(cfg.rsv_window).max(1);
    let mean_slope = if t >= lo {
        (lo..=t)
            .map(|s| (table.speed(s, flow) - table.speed(s - 1, flow)).abs())
            .sum::<f64>()
            / (t + 1 - lo) as f64
            / max
    } else {
        0.0
    };
    hist * mean_slope * P + recent * recent * Q
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsvValidation {
    /// Pearson correlation of AD with each variant, in [`RsvVariant::ALL`] order.
    pub correlations: [f64; 3],
    /// The most negatively correlated variant.
    pub selected: RsvVariant,
    /// (incident, candidate, slot) samples the correlations are computed over.
    pub samples: usize,
}

/// Correlates AD with each variant and picks the most negative.
pub(crate) fn select_variant(ad: &[f64], variants: [&[f64]; 3]) -> RsvValidation {
    let correlations = variants.map(|v| if ad.len() < 2 { 0.0 } else { pearson_raw(ad, v) });
    let mut best = 0;
    for i in 1..3 {
        if correlations[i] < correlations[best] {
            best = i;
        }
    }
    RsvValidation {
        correlations,
        selected: RsvVariant::ALL[best],
        samples: ad.len(),
    }
}

/// Scores AD and the three variants on every candidate flow over the hour
/// before and after each incident start, then correlates them.
pub fn rsv_variant_validation(
    table: &SpeedTable,
    geometry: &RoadGeometry,
    incidents: &[IncidentRecord],
    cfg: &DiscoveryConfig,
    clusters: Option<&ClusterAssignment>,
) -> Result<RsvValidation> {
    let hour = cfg.influence_window;
    let labels = clusters.map(|c| c.labels.as_slice());
    let mut ad = Vec::new();
    let mut vars: [Vec<f64>; 3] = Default::default();
    let mut used = 0;
    for inc in incidents {
        if influence_window(inc, table, cfg).is_err() {
            continue;
        }
        let t_s = table.slot_of(inc.start_time) as usize;
        if t_s < hour + cfg.similarity_window || t_s + hour >= table.n_slots() {
            continue;
        }
        let cands = candidate_flows(inc.center(), geometry, cfg.radius_m);
        if cands.is_empty() {
            continue;
        }
        used += 1;
        let mut prev = similarity_matrix(table, t_s - hour - 1, cfg, clusters)?;
        for t in t_s - hour..=t_s + hour {
            let curr = similarity_matrix(table, t, cfg, clusters)?;
            let sd = similarity_decrease(&prev, &curr)?;
            for &f in &cands {
                ad.push(anomalous_degree(f, &prev, &curr, &sd, cfg.delta, labels));
                for (k, variant) in RsvVariant::ALL.into_iter().enumerate() {
                    vars[k].push(rsv_variant(table, f, t, cfg, variant));
                }
            }
            prev = curr;
        }
    }
    if used < 2 {
        return Err(Error::InvalidInput(format!(
            "RSV validation needs at least 2 incidents with a full two-hour score series, found {used}"
        )));
    }
    Ok(select_variant(&ad, [&vars[0], &vars[1], &vars[2]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn table(series: &[f64]) -> SpeedTable {
        let t0 = NaiveDate::from_ymd_opt(2019, 4, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        SpeedTable::new(t0, 1, series.to_vec()).unwrap()
    }

    #[test]
    fn constant_series_has_zero_rsv() {
        let t = table(&[30.0; 40]);
        let cfg = DiscoveryConfig::default();
        assert_eq!(relative_speed_variation(&t, 0, 20, &cfg), 0.0);
    }

    #[test]
    fn hand_evaluated_rsv() {
        // Ten-slot mean 40, current 30, window max 50 → |40 − 30| / 50 = 0.2.
        let mut s = vec![20.0; 30];
        s[5] = 50.0;
        let last = [40.0, 40.0, 40.0, 40.0, 40.0, 40.0, 50.0, 40.0, 40.0, 30.0];
        s[20..30].copy_from_slice(&last);
        let t = table(&s);
        let rsv = relative_speed_variation(&t, 0, 29, &DiscoveryConfig::default());
        assert!((rsv - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_speeds_give_zero() {
        let t = table(&[0.0; 12]);
        assert_eq!(relative_speed_variation(&t, 0, 11, &DiscoveryConfig::default()), 0.0);
    }

    #[test]
    fn variant_three_is_the_plain_rsv() {
        let s: Vec<f64> = (0..40).map(|i| 30.0 + (i as f64).cos() * 4.0).collect();
        let t = table(&s);
        let cfg = DiscoveryConfig::default();
        for slot in [0, 5, 20, 39] {
            assert_eq!(
                rsv_variant(&t, 0, slot, &cfg, RsvVariant::Historical),
                relative_speed_variation(&t, 0, slot, &cfg)
            );
        }
    }

    #[test]
    fn selection_picks_most_negative() {
        let ad = [0.0, 0.1, 0.3, 0.2, 0.5];
        let pos: Vec<f64> = ad.iter().map(|a| a * 2.0).collect();
        let weak: Vec<f64> = vec![0.1, 0.0, 0.1, 0.0, 0.1];
        let neg: Vec<f64> = ad.iter().map(|a| 1.0 - a).collect();
        let r = select_variant(&ad, [&pos, &weak, &neg]);
        assert_eq!(r.selected, RsvVariant::Historical);
        assert!((r.correlations[2] + 1.0).abs() < 1e-12);
        let flat = [0.2; 5];
        let r = select_variant(&flat, [&pos, &weak, &neg]);
        assert_eq!(r.correlations, [0.0; 3]);
    }
}
