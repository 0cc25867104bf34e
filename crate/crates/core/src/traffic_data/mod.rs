//! Speed tables, incidents, weather and road geometry.

mod io;
pub mod synthetic;

use std::fmt;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_geometry, load_incidents, load_speed_table, load_weather, save_geometry, save_incidents,
    save_speed_table, save_weather,
};
pub use synthetic::{generate_synthetic_city, InjectedIncident, SyntheticCity, SyntheticScenario};

/// Minutes per time slot.
pub const SLOT_MINUTES: i64 = 5;
pub const SLOTS_PER_DAY: usize = 288;
pub const SLOTS_PER_HOUR: usize = 12;

/// Dense flow index, `0..N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowId(pub usize);

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-flow speeds (km/h) on a strict 5-minute grid, stored slot-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedTable {
    start_time: NaiveDateTime,
    n_flows: usize,
    n_slots: usize,
    speeds: Vec<f64>,
}

impl SpeedTable {
    /// `speeds` is slot-major: entry `slot * n_flows + flow`.
    pub fn new(start_time: NaiveDateTime, n_flows: usize, speeds: Vec<f64>) -> Result<Self> {
        if n_flows == 0 {
            return Err(Error::InvalidInput("speed table needs at least one flow".into()));
        }
        if !speeds.len().is_multiple_of(n_flows) {
            return Err(Error::InvalidInput(format!(
                "{} speeds is not a multiple of {n_flows} flows",
                speeds.len()
            )));
        }
        if let Some(i) = speeds.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "speed at slot {} flow {} is {}",
                i / n_flows,
                i % n_flows,
                speeds[i]
            )));
        }
        Ok(SpeedTable {
            start_time,
            n_flows,
            n_slots: speeds.len() / n_flows,
            speeds,
        })
    }

    pub fn start_time(&self) -> NaiveDateTime {
        self.start_time
    }

    pub fn n_flows(&self) -> usize {
        self.n_flows
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    #[inline]
    pub fn speed(&self, slot: usize, flow: usize) -> f64 {
        self.speeds[slot * self.n_flows + flow]
    }

    /// All flow speeds at one slot.
    pub fn snapshot(&self, slot: usize) -> &[f64] {
        &self.speeds[slot * self.n_flows..(slot + 1) * self.n_flows]
    }

    pub fn series(&self, flow: usize) -> Vec<f64> {
        (0..self.n_slots).map(|s| self.speed(s, flow)).collect()
    }

    /// Speeds of one flow over `first..first + len`.
    pub fn series_window(&self, flow: usize, first: usize, len: usize) -> Vec<f64> {
        (first..first + len).map(|s| self.speed(s, flow)).collect()
    }

    pub fn raw(&self) -> &[f64] {
        &self.speeds
    }

    pub fn max_speed(&self) -> f64 {
        self.speeds.iter().fold(0.0, |m, &v| m.max(v))
    }

    pub fn time_of(&self, slot: usize) -> NaiveDateTime {
        self.start_time + Duration::minutes(SLOT_MINUTES * slot as i64)
    }

    /// Slot containing `time` (floor), possibly negative or past the end.
    pub fn slot_of(&self, time: NaiveDateTime) -> i64 {
        (time - self.start_time).num_minutes().div_euclid(SLOT_MINUTES)
    }

    pub fn slot_of_day(&self, slot: usize) -> usize {
        let t = self.time_of(slot);
        (t.hour() as usize * 60 + t.minute() as usize) / SLOT_MINUTES as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLng {
    pub lat: f64,
    pub lng: f64,
}

impl LatLng {
    pub fn new(lat: f64, lng: f64) -> Self {
        LatLng { lat, lng }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: LatLng,
    pub max: LatLng,
}

impl BoundingBox {
    pub fn contains(&self, p: LatLng) -> bool {
        p.lat >= self.min.lat && p.lat <= self.max.lat && p.lng >= self.min.lng && p.lng <= self.max.lng
    }

    pub fn center(&self) -> LatLng {
        LatLng::new((self.min.lat + self.max.lat) / 2.0, (self.min.lng + self.max.lng) / 2.0)
    }
}

/// One flow as a straight segment between two endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSegment {
    pub a: LatLng,
    pub b: LatLng,
}

impl FlowSegment {
    /// Midpoint of the two endpoints.
    pub fn centroid(&self) -> LatLng {
        LatLng::new((self.a.lat + self.b.lat) / 2.0, (self.a.lng + self.b.lng) / 2.0)
    }
}

/// Flow endpoints indexed by [`FlowId`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadGeometry {
    pub flows: Vec<FlowSegment>,
}

impl RoadGeometry {
    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn centroids(&self) -> Vec<LatLng> {
        self.flows.iter().map(FlowSegment::centroid).collect()
    }

    /// Tight box around all endpoints, padded by `pad_deg` degrees.
    pub fn bounding_box(&self, pad_deg: f64) -> Option<BoundingBox> {
        let mut it = self.flows.iter().flat_map(|f| [f.a, f.b]);
        let first = it.next()?;
        let (mut min, mut max) = (first, first);
        for p in it {
            min.lat = min.lat.min(p.lat);
            min.lng = min.lng.min(p.lng);
            max.lat = max.lat.max(p.lat);
            max.lng = max.lng.max(p.lng);
        }
        Some(BoundingBox {
            min: LatLng::new(min.lat - pad_deg, min.lng - pad_deg),
            max: LatLng::new(max.lat + pad_deg, max.lng + pad_deg),
        })
    }
}

/// Incident categories. Unknown strings are kept verbatim.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IncidentType {
    Congestion,
    Collision,
    Construction,
    Event,
    Other(String),
}

impl IncidentType {
    /// Number of one-hot slots: the four named kinds plus "other".
    pub const CATEGORIES: usize = 5;

    pub fn category_index(&self) -> usize {
        match self {
            IncidentType::Congestion => 0,
            IncidentType::Collision => 1,
            IncidentType::Construction => 2,
            IncidentType::Event => 3,
            IncidentType::Other(_) => 4,
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            IncidentType::Congestion => "congestion",
            IncidentType::Collision => "collision",
            IncidentType::Construction => "construction",
            IncidentType::Event => "event",
            IncidentType::Other(s) => s,
        }
    }

    pub fn parse(s: &str) -> Self {
        match s.to_ascii_lowercase().as_str() {
            "congestion" => IncidentType::Congestion,
            "collision" | "accident" => IncidentType::Collision,
            "construction" | "roadworks" => IncidentType::Construction,
            "event" => IncidentType::Event,
            _ => IncidentType::Other(s.to_string()),
        }
    }
}

impl Serialize for IncidentType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for IncidentType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(IncidentType::parse(&s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayCategory {
    Weekday,
    Saturday,
    Sunday,
}

impl DayCategory {
    pub const ALL: [DayCategory; 3] = [DayCategory::Weekday, DayCategory::Saturday, DayCategory::Sunday];

    pub fn of(t: NaiveDateTime) -> Self {
        match t.weekday() {
            Weekday::Sat => DayCategory::Saturday,
            Weekday::Sun => DayCategory::Sunday,
            _ => DayCategory::Weekday,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DayCategory::Weekday => "weekday",
            DayCategory::Saturday => "saturday",
            DayCategory::Sunday => "sunday",
        }
    }
}

/// One urban incident.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub id: u64,
    #[serde(rename = "type")]
    pub incident_type: IncidentType,
    pub lat: f64,
    pub lng: f64,
    pub start_time: NaiveDateTime,
    /// Anticipated end time.
    pub end_time: NaiveDateTime,
    pub road_closed: bool,
    pub day_category: DayCategory,
}

impl IncidentRecord {
    pub fn center(&self) -> LatLng {
        LatLng::new(self.lat, self.lng)
    }

    pub fn duration_minutes(&self) -> i64 {
        (self.end_time - self.start_time).num_minutes()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeatherType {
    Clear,
    Cloudy,
    Rain,
    Fog,
    Snow,
}

impl WeatherType {
    pub const ALL: [WeatherType; 5] = [
        WeatherType::Clear,
        WeatherType::Cloudy,
        WeatherType::Rain,
        WeatherType::Fog,
        WeatherType::Snow,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WeatherType::Clear => "clear",
            WeatherType::Cloudy => "cloudy",
            WeatherType::Rain => "rain",
            WeatherType::Fog => "fog",
            WeatherType::Snow => "snow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        WeatherType::ALL.into_iter().find(|w| w.as_str().eq_ignore_ascii_case(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecord {
    pub slot: usize,
    pub weather_type: WeatherType,
    pub temperature_c: f64,
    pub sunrise_offset_min: f64,
}
