use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDateTime;

use super::{FlowSegment, IncidentRecord, LatLng, RoadGeometry, SpeedTable, WeatherRecord, WeatherType};
use crate::error::{Error, Result};

fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn reader(path: &Path, header: &[&str]) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f);
    let got = rdr
        .headers()
        .map_err(|e| Error::Parse {
            file: file_name(path),
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    if got.iter().collect::<Vec<_>>() != header {
        return Err(Error::Parse {
            file: file_name(path),
            row: 1,
            message: format!("expected header `{}`", header.join(",")),
        });
    }
    Ok(rdr)
}

/// Iterates data records with their 1-based line number (header is line 1).
fn records(path: &Path, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut rdr = reader(path, header)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            file: file_name(path),
            row,
            message: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                file: file_name(path),
                row,
                message: format!("expected {} fields, got {}", header.len(), rec.len()),
            });
        }
        out.push((row, rec));
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(path: &Path, row: usize, rec: &csv::StringRecord, idx: usize, name: &str) -> Result<T> {
    rec[idx].parse::<T>().map_err(|_| Error::Parse {
        file: file_name(path),
        row,
        message: format!("non-numeric {name} `{}`", &rec[idx]),
    })
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

const SPEED_HEADER: [&str; 3] = ["slot", "flow_id", "speed_kmh"];

/// Reads `slot,flow_id,speed_kmh`. Rows may come in any order; every
/// `(slot, flow)` in the dense grid must appear exactly once.
pub fn load_speed_table(path: &Path, start_time: NaiveDateTime) -> Result<SpeedTable> {
    let rows = records(path, &SPEED_HEADER)?;
    let mut parsed = Vec::with_capacity(rows.len());
    let (mut max_slot, mut max_flow) = (0usize, 0usize);
    for (row, rec) in &rows {
        let slot: usize = field(path, *row, rec, 0, "slot")?;
        let flow: usize = field(path, *row, rec, 1, "flow_id")?;
        let speed: f64 = field(path, *row, rec, 2, "speed_kmh")?;
        if !speed.is_finite() || speed < 0.0 {
            return Err(Error::Parse {
                file: file_name(path),
                row: *row,
                message: format!("speed {speed} must be finite and non-negative"),
            });
        }
        max_slot = max_slot.max(slot);
        max_flow = max_flow.max(flow);
        parsed.push((*row, slot, flow, speed));
    }
    if parsed.is_empty() {
        return Err(Error::Parse {
            file: file_name(path),
            row: 1,
            message: "no speed rows".into(),
        });
    }
    let (n_slots, n_flows) = (max_slot + 1, max_flow + 1);
    let mut speeds = vec![f64::NAN; n_slots * n_flows];
    let mut seen_row = vec![0usize; n_slots * n_flows];
    for (row, slot, flow, speed) in parsed {
        let i = slot * n_flows + flow;
        if seen_row[i] != 0 {
            return Err(Error::Parse {
                file: file_name(path),
                row,
                message: format!("duplicate (slot {slot}, flow {flow}), first seen at row {}", seen_row[i]),
            });
        }
        seen_row[i] = row;
        speeds[i] = speed;
    }
    if let Some(i) = seen_row.iter().position(|&r| r == 0) {
        return Err(Error::Parse {
            file: file_name(path),
            row: 0,
            message: format!("missing slot {} for flow {}", i / n_flows, i % n_flows),
        });
    }
    SpeedTable::new(start_time, n_flows, speeds)
}

pub fn save_speed_table(table: &SpeedTable, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", SPEED_HEADER.join(",")).map_err(io)?;
    for s in 0..table.n_slots() {
        for (f, v) in table.snapshot(s).iter().enumerate() {
            writeln!(w, "{s},{f},{v}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads the incident JSON array, sorted by start time then id.
pub fn load_incidents(path: &Path) -> Result<Vec<IncidentRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut incidents: Vec<IncidentRecord> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: file_name(path),
        row: e.line(),
        message: e.to_string(),
    })?;
    for (i, inc) in incidents.iter().enumerate() {
        if inc.end_time < inc.start_time {
            return Err(Error::Parse {
                file: file_name(path),
                row: i,
                message: format!("incident {} ends before it starts", inc.id),
            });
        }
        if !(inc.lat.abs() <= 90.0 && inc.lng.abs() <= 180.0) {
            return Err(Error::Parse {
                file: file_name(path),
                row: i,
                message: format!("incident {} has invalid coordinates", inc.id),
            });
        }
    }
    incidents.sort_by(|a, b| a.start_time.cmp(&b.start_time).then(a.id.cmp(&b.id)));
    Ok(incidents)
}

pub fn save_incidents(incidents: &[IncidentRecord], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(incidents)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

const WEATHER_HEADER: [&str; 4] = ["slot", "weather_type", "temperature_c", "sunrise_offset_min"];

/// Reads weather observations and forward-fills them onto `n_slots` slots.
/// The first observation must be at slot 0.
pub fn load_weather(path: &Path, n_slots: usize) -> Result<Vec<WeatherRecord>> {
    let rows = records(path, &WEATHER_HEADER)?;
    let mut obs: Vec<(usize, WeatherRecord)> = Vec::with_capacity(rows.len());
    for (row, rec) in &rows {
        let slot: usize = field(path, *row, rec, 0, "slot")?;
        let weather_type = WeatherType::parse(&rec[1]).ok_or_else(|| Error::Parse {
            file: file_name(path),
            row: *row,
            message: format!("unknown weather type `{}`", &rec[1]),
        })?;
        let temperature_c: f64 = field(path, *row, rec, 2, "temperature_c")?;
        let sunrise_offset_min: f64 = field(path, *row, rec, 3, "sunrise_offset_min")?;
        obs.push((
            *row,
            WeatherRecord {
                slot,
                weather_type,
                temperature_c,
                sunrise_offset_min,
            },
        ));
    }
    obs.sort_by_key(|(_, r)| r.slot);
    for pair in obs.windows(2) {
        if pair[0].1.slot == pair[1].1.slot {
            return Err(Error::Parse {
                file: file_name(path),
                row: pair[1].0,
                message: format!("duplicate weather slot {}", pair[1].1.slot),
            });
        }
    }
    match obs.first() {
        Some((_, r)) if r.slot == 0 => {}
        _ => {
            return Err(Error::Parse {
                file: file_name(path),
                row: 2,
                message: "weather must have an observation at slot 0".into(),
            })
        }
    }
    let mut out = Vec::with_capacity(n_slots);
    let mut next = 0;
    let mut current = obs[0].1;
    for slot in 0..n_slots {
        while next < obs.len() && obs[next].1.slot <= slot {
            current = obs[next].1;
            next += 1;
        }
        out.push(WeatherRecord { slot, ..current });
    }
    Ok(out)
}

pub fn save_weather(weather: &[WeatherRecord], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", WEATHER_HEADER.join(",")).map_err(io)?;
    for r in weather {
        writeln!(
            w,
            "{},{},{},{}",
            r.slot,
            r.weather_type.as_str(),
            r.temperature_c,
            r.sunrise_offset_min
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

const GEOMETRY_HEADER: [&str; 5] = ["flow_id", "lat1", "lng1", "lat2", "lng2"];

pub fn load_geometry(path: &Path) -> Result<RoadGeometry> {
    let rows = records(path, &GEOMETRY_HEADER)?;
    let mut flows: Vec<Option<FlowSegment>> = Vec::new();
    for (row, rec) in &rows {
        let id: usize = field(path, *row, rec, 0, "flow_id")?;
        let vals: Vec<f64> = (1..5)
            .map(|i| field(path, *row, rec, i, GEOMETRY_HEADER[i]))
            .collect::<Result<_>>()?;
        if flows.len() <= id {
            flows.resize(id + 1, None);
        }
        if flows[id].is_some() {
            return Err(Error::Parse {
                file: file_name(path),
                row: *row,
                message: format!("duplicate flow_id {id}"),
            });
        }
        flows[id] = Some(FlowSegment {
            a: LatLng::new(vals[0], vals[1]),
            b: LatLng::new(vals[2], vals[3]),
        });
    }
    let flows = flows
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            f.ok_or_else(|| Error::Parse {
                file: file_name(path),
                row: 0,
                message: format!("missing flow_id {i}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoadGeometry { flows })
}

pub fn save_geometry(geometry: &RoadGeometry, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", GEOMETRY_HEADER.join(",")).map_err(io)?;
    for (i, f) in geometry.flows.iter().enumerate() {
        writeln!(w, "{i},{},{},{},{}", f.a.lat, f.a.lng, f.b.lat, f.b.lng).map_err(io)?;
    }
    w.flush().map_err(io)
}
