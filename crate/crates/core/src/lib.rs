//! Incident-aware traffic speed prediction.
//!
//! The crate is organised along the pipeline:
//!
//! * [`traffic_data`]: speed tables, incidents, weather and road geometry,
//!   plus a synthetic city generator that records true incident impact.
//! * [`road_graph`]: the flow graph, its normalized matrices, spectral
//!   embedding and k-means partitioning.
//! * [`discovery`]: anomaly scores and
//!   critical-incident labelling.
//! * [`neural`]: a small reverse-mode engine with the layers the models use.
//! * [`classifier`]: the critical-incident classifier and its latent
//!   impact features.
//! * [`digc`]: the incident-aware graph-convolutional speed predictor,
//!   its ablations and the naive baselines.

pub mod classifier;
pub mod digc;
pub mod discovery;
pub mod error;
pub mod neural;
pub mod road_graph;
pub mod seed;
pub mod traffic_data;

pub use error::{Error, Result};
