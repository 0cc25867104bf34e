use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use digc_core::classifier::ClassifierConfig;
use digc_core::digc::{Baseline, DigcConfig};
use digc_core::discovery::DiscoveryConfig;
use digc_core::seed::derive_seed;
use digc_core::traffic_data::synthetic::SyntheticScenario;

/// Everything a pipeline run reads. Values come from the built-in defaults,
/// then the config file, then `--set` overrides, in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every stage derives its own seed from it.
    pub seed: u64,
    pub data: DataConfig,
    pub scenario: SyntheticScenario,
    pub discovery: DiscoveryConfig,
    pub sweep: SweepConfig,
    pub classifier: ClassifierConfig,
    pub digc: DigcConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            data: DataConfig::default(),
            scenario: SyntheticScenario::incident_month(0),
            discovery: DiscoveryConfig::default(),
            sweep: SweepConfig::default(),
            classifier: ClassifierConfig::default(),
            digc: DigcConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

/// External input files. When `speeds` is unset the stages read the output
/// of `generate` instead.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub speeds: Option<PathBuf>,
    pub incidents: Option<PathBuf>,
    pub weather: Option<PathBuf>,
    pub geometry: Option<PathBuf>,
    /// Time of slot 0 of the speed table, e.g. `2019-04-01T00:00:00`.
    pub start_time: Option<NaiveDateTime>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub rhos: Vec<f64>,
    pub thetas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            rhos: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            thetas: vec![0.0, 0.05, 0.1, 0.15, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub baselines: Vec<Baseline>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            baselines: vec![Baseline::Persistence, Baseline::HistoricalAverage, Baseline::PlainLstm],
        }
    }
}

/// Keys that would be silently replaced by derived seeds.
const DERIVED_SEEDS: [&str; 3] = ["scenario.seed", "classifier.seed", "digc.seed"];

impl PipelineConfig {
    pub fn load(file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("{} is not valid TOML", path.display()))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("override `{item}` is not of the form key=value"))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        for key in DERIVED_SEEDS {
            if lookup(&table, key).is_some() {
                bail!("`{key}` cannot be set; stage seeds are derived from the root `seed`");
            }
        }
        let mut cfg = PipelineConfig::default();
        merge(&mut cfg, table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn scenario(&self) -> SyntheticScenario {
        SyntheticScenario {
            seed: self.stage_seed("generate"),
            ..self.scenario.clone()
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            seed: self.stage_seed("train-classifier"),
            ..self.classifier.clone()
        }
    }

    pub fn digc(&self) -> DigcConfig {
        DigcConfig {
            seed: self.stage_seed("train"),
            ..self.digc.clone()
        }
    }

    fn validate(&self) -> anyhow::Result<()> {
        self.discovery.validate().map_err(|e| anyhow!("[discovery] {e}"))?;
        self.digc().validate().map_err(|e| anyhow!("[digc] {e}"))?;
        let d = &self.data;
        let given = [&d.speeds, &d.incidents, &d.weather, &d.geometry];
        if given.iter().any(|p| p.is_some()) {
            if given.iter().any(|p| p.is_none()) || d.start_time.is_none() {
                bail!("[data] needs all of speeds, incidents, weather, geometry and start_time");
            }
            for p in given.into_iter().flatten() {
                if !p.is_file() {
                    bail!("[data] file {} does not exist", p.display());
                }
            }
        }
        if self.sweep.rhos.is_empty() || self.sweep.thetas.is_empty() {
            bail!("[sweep] grid is empty");
        }
        Ok(())
    }
}

/// Applies the file/override table on top of the defaults and rejects keys
/// that do not correspond to any setting.
fn merge(cfg: &mut PipelineConfig, table: toml::Table) -> anyhow::Result<()> {
    let mut base = toml::Table::try_from(&*cfg).context("defaults do not serialize")?;
    let user = table.clone();
    deep_merge(&mut base, table);
    *cfg = base.try_into().map_err(|e: toml::de::Error| anyhow!("invalid config: {}", e.message()))?;
    let known = toml::Table::try_from(&*cfg).context("config does not serialize")?;
    if let Some(key) = unknown_key(&user, &known, "") {
        bail!("unknown config key `{key}`");
    }
    Ok(())
}

fn deep_merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => deep_merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn unknown_key(user: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (known.get(k), v) {
            (None, _) => return Some(path),
            (Some(toml::Value::Table(kt)), toml::Value::Table(ut)) => {
                if let Some(bad) = unknown_key(ut, kt, &path) {
                    return Some(bad);
                }
            }
            _ => {}
        }
    }
    None
}

fn lookup<'a>(table: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("bad override key `{key}`");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{p}` is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
