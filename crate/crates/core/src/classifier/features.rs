use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Penultimate-layer activations of the classifier for one incident.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentImpactFeatures {
    pub incident_id: u64,
    pub values: Vec<f64>,
}

/// `incident_id,f0,..,f{k-1}`
pub fn save_features(features: &[LatentImpactFeatures], path: &Path) -> Result<()> {
    let width = features.first().map_or(0, |f| f.values.len());
    if let Some(bad) = features.iter().find(|f| f.values.len() != width) {
        return Err(Error::shape(
            "save_features",
            format!("incident {} has {} values, expected {width}", bad.incident_id, bad.values.len()),
        ));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["incident_id".to_string()];
    header.extend((0..width).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for f in features {
        let mut row = vec![f.incident_id.to_string()];
        row.extend(f.values.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Vec<LatentImpactFeatures>> {
    let file = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.get(0) != Some("incident_id") || headers.iter().skip(1).enumerate().any(|(k, h)| h != format!("f{k}")) {
        return Err(Error::Parse {
            file,
            row: 1,
            message: "header must be incident_id,f0,f1,...".into(),
        });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let parse_err = |message: String| Error::Parse {
            file: file.clone(),
            row,
            message,
        };
        let id: u64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad incident id `{}`", &rec[0])))?;
        if !seen.insert(id) {
            return Err(parse_err(format!("duplicate incident {id}")));
        }
        let values = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|_| parse_err(format!("bad value `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(LatentImpactFeatures { incident_id: id, values });
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            file: path.display().to_string(),
            row,
            message: format!("{kind:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let feats = vec![
            LatentImpactFeatures {
                incident_id: 4,
                values: vec![0.0, 1.25, 0.1 + 0.2],
            },
            LatentImpactFeatures {
                incident_id: 9,
                values: vec![3.0, 0.0, 1e-300],
            },
        ];
        save_features(&feats, &p).unwrap();
        let head = std::fs::read_to_string(&p).unwrap();
        assert!(head.starts_with("incident_id,f0,f1,f2\n"));
        assert_eq!(load_features(&p).unwrap(), feats);
    }

    #[test]
    fn ragged_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let feats = vec![
            LatentImpactFeatures {
                incident_id: 1,
                values: vec![0.0],
            },
            LatentImpactFeatures {
                incident_id: 2,
                values: vec![0.0, 1.0],
            },
        ];
        assert!(save_features(&feats, &dir.path().join("f.csv")).is_err());
    }
}
