use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use chrono::Timelike;
use serde::{Deserialize, Serialize};

use super::{incident_effect_score, CriticalityLabel, IncidentScores, SweepRow};
use crate::error::{Error, Result};
use crate::traffic_data::{DayCategory, IncidentRecord};

fn write_csv(path: &Path, header: &str, rows: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "{header}")
        .and_then(|_| rows(&mut w))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// `incident_id,is_critical,max_ies,n_affected_flows`
pub fn save_discovery(labels: &[CriticalityLabel], path: &Path) -> Result<()> {
    write_csv(path, "incident_id,is_critical,max_ies,n_affected_flows", |w| {
        for l in labels {
            writeln!(w, "{},{},{},{}", l.incident_id, l.is_critical, l.max_ies, l.affected.len())?;
        }
        Ok(())
    })
}

/// `flow_id,slot,ad,rsv,ies` for every scored (flow, slot), sorted.
pub fn save_scores(scores: &[IncidentScores], rho: f64, path: &Path) -> Result<()> {
    let mut rows: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for s in scores {
        for (c, &flow) in s.candidates.iter().enumerate() {
            for (k, (&ad, &rsv)) in s.ad[c].iter().zip(&s.rsv[c]).enumerate() {
                rows.insert((flow, s.window.0 + k), (ad, rsv));
            }
        }
    }
    write_csv(path, "flow_id,slot,ad,rsv,ies", |w| {
        for ((flow, slot), (ad, rsv)) in rows {
            writeln!(w, "{flow},{slot},{ad},{rsv},{}", incident_effect_score(ad, rsv, rho))?;
        }
        Ok(())
    })
}

/// `rho,theta,critical_count`
pub fn save_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    write_csv(path, "rho,theta,critical_count", |w| {
        for r in rows {
            writeln!(w, "{},{},{}", r.rho, r.theta, r.critical_count)?;
        }
        Ok(())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalRow {
    pub hour: u32,
    pub day_category: DayCategory,
    pub critical_count: usize,
    pub noncritical_count: usize,
}

/// Critical and non-critical counts by start hour and day category; all
/// 72 cells are present.
pub fn temporal_distribution(incidents: &[IncidentRecord], labels: &[CriticalityLabel]) -> Vec<TemporalRow> {
    let by_id: HashMap<u64, &IncidentRecord> = incidents.iter().map(|i| (i.id, i)).collect();
    let mut rows: Vec<TemporalRow> = DayCategory::ALL
        .iter()
        .flat_map(|&day_category| {
            (0..24).map(move |hour| TemporalRow {
                hour,
                day_category,
                critical_count: 0,
                noncritical_count: 0,
            })
        })
        .collect();
    for l in labels {
        let Some(inc) = by_id.get(&l.incident_id) else {
            continue;
        };
        let row = &mut rows[inc.day_category.index() * 24 + inc.start_time.hour() as usize];
        if l.is_critical {
            row.critical_count += 1;
        } else {
            row.noncritical_count += 1;
        }
    }
    rows
}

/// `hour,day_category,critical_count,noncritical_count`
pub fn save_temporal(rows: &[TemporalRow], path: &Path) -> Result<()> {
    write_csv(path, "hour,day_category,critical_count,noncritical_count", |w| {
        for r in rows {
            writeln!(
                w,
                "{},{},{},{}",
                r.hour,
                r.day_category.as_str(),
                r.critical_count,
                r.noncritical_count
            )?;
        }
        Ok(())
    })
}
