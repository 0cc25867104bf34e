use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context as _;
use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use digc_core::classifier::{
    build_classifier_input, extract_latent_features, load_features, save_features, train_classifier,
    ClassifierConfig, ClassifierInput, ImpactClassifier, InputScales,
};
use digc_core::digc::{
    assemble_training_windows, evaluate, predict_dataset, run_baseline, save_predictions, score_predictions,
    train_digc, DigcConfig, DigcDataset, DigcNet,
};
use digc_core::discovery::{
    discover, save_discovery, save_scores, save_sweep, save_temporal, sweep, temporal_distribution,
    CriticalityLabel, IncidentScores,
};
use digc_core::neural::Tensor;
use digc_core::road_graph::{build_flow_graph, save_clusters, save_edges, spectral_clusters, ClusterAssignment};
use digc_core::traffic_data::{
    load_geometry, load_incidents, load_speed_table, load_weather, save_geometry, save_incidents, save_speed_table,
    save_weather,
};
use digc_core::traffic_data::synthetic::generate_synthetic_city;
use digc_core::traffic_data::{IncidentRecord, RoadGeometry, SpeedTable, WeatherRecord};

use crate::config::PipelineConfig;
use crate::manifest::{digests, write_json, Manifest};
use crate::{core_error, missing, ExitError};

pub struct Context {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub hash: String,
}

/// Files a stage read and wrote, for its manifest.
#[derive(Default)]
struct Io {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Context {
    fn dir(&self, stage: &str) -> anyhow::Result<PathBuf> {
        let d = self.out.join(stage);
        std::fs::create_dir_all(&d).with_context(|| format!("cannot create {}", d.display()))?;
        Ok(d)
    }

    /// An output of an earlier stage; exit code 3 when it is absent.
    fn upstream(&self, stage: &str, file: &str) -> anyhow::Result<PathBuf> {
        let p = self.out.join(stage).join(file);
        if p.is_file() {
            Ok(p)
        } else {
            Err(missing(&p, stage))
        }
    }

    fn finish(&self, stage: &str, seed: u64, io: Io, started: Instant) -> anyhow::Result<()> {
        let manifest = Manifest {
            stage: stage.into(),
            config_hash: self.hash.clone(),
            seed,
            inputs: digests(&io.inputs, &self.out)?,
            outputs: digests(&io.outputs, &self.out)?,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        write_json(&self.dir(stage)?.join("manifest.json"), &manifest)
    }
}

#[derive(Serialize, Deserialize)]
struct GeneratedMeta {
    start_time: NaiveDateTime,
    n_flows: usize,
    n_slots: usize,
}

struct Data {
    table: SpeedTable,
    incidents: Vec<IncidentRecord>,
    weather: Vec<WeatherRecord>,
    geometry: RoadGeometry,
}

fn load_data(ctx: &Context, io: &mut Io) -> anyhow::Result<Data> {
    let d = &ctx.cfg.data;
    let (speeds, incidents, weather, geometry, start) = match (&d.speeds, &d.incidents, &d.weather, &d.geometry) {
        (Some(s), Some(i), Some(w), Some(g)) => (s.clone(), i.clone(), w.clone(), g.clone(), d.start_time.expect("validated")),
        _ => {
            let meta_path = ctx.upstream("generate", "meta.json")?;
            let meta: GeneratedMeta = read_json(&meta_path)?;
            io.inputs.push(meta_path);
            (
                ctx.upstream("generate", "speeds.csv")?,
                ctx.upstream("generate", "incidents.csv")?,
                ctx.upstream("generate", "weather.csv")?,
                ctx.upstream("generate", "geometry.csv")?,
                meta.start_time,
            )
        }
    };
    let table = load_speed_table(&speeds, start).map_err(core_error)?;
    let data = Data {
        incidents: load_incidents(&incidents).map_err(core_error)?,
        weather: load_weather(&weather, table.n_slots()).map_err(core_error)?,
        geometry: load_geometry(&geometry).map_err(core_error)?,
        table,
    };
    if data.geometry.len() != data.table.n_flows() {
        return Err(ExitError::config(format!(
            "geometry has {} flows but the speed table has {}",
            data.geometry.len(),
            data.table.n_flows()
        )));
    }
    io.inputs.extend([speeds, incidents, weather, geometry]);
    Ok(data)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| ExitError::config(format!("{} is malformed: {e}", path.display())))
}

fn propagation(geometry: &RoadGeometry) -> anyhow::Result<Tensor> {
    Ok(build_flow_graph(geometry).map_err(core_error)?.propagation_matrix())
}

pub fn generate(ctx: &Context) -> anyhow::Result<()> {
    let started = Instant::now();
    let scenario = ctx.cfg.scenario();
    let city = generate_synthetic_city(&scenario).map_err(core_error)?;
    let dir = ctx.dir("generate")?;
    let mut io = Io::default();
    let speeds = dir.join("speeds.csv");
    save_speed_table(&city.speeds, &speeds).map_err(core_error)?;
    let incidents = dir.join("incidents.csv");
    save_incidents(&city.incidents, &incidents).map_err(core_error)?;
    let weather = dir.join("weather.csv");
    save_weather(&city.weather, &weather).map_err(core_error)?;
    let geometry = dir.join("geometry.csv");
    save_geometry(&city.geometry, &geometry).map_err(core_error)?;
    let truth = dir.join("truth.json");
    write_json(&truth, &city.truth)?;
    let meta = dir.join("meta.json");
    write_json(
        &meta,
        &GeneratedMeta {
            start_time: city.speeds.start_time(),
            n_flows: city.speeds.n_flows(),
            n_slots: city.speeds.n_slots(),
        },
    )?;
    io.outputs = vec![speeds, incidents, weather, geometry, truth, meta];
    ctx.finish("generate", scenario.seed, io, started)
}

pub fn build_graph(ctx: &Context) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut io = Io::default();
    let data = load_data(ctx, &mut io)?;
    let graph = build_flow_graph(&data.geometry).map_err(core_error)?;
    let k = ctx.cfg.discovery.clusters;
    let seed = ctx.cfg.stage_seed("build-graph");
    let clusters = if k > 1 {
        spectral_clusters(&graph, k, seed).map_err(core_error)?
    } else {
        ClusterAssignment::single(graph.n())
    };
    let dir = ctx.dir("build-graph")?;
    let edges = dir.join("edges.csv");
    save_edges(&graph, &edges).map_err(core_error)?;
    let labels = dir.join("clusters.csv");
    save_clusters(&clusters, &labels).map_err(core_error)?;
    let full = dir.join("clusters.json");
    write_json(&full, &clusters)?;
    io.outputs = vec![edges, labels, full];
    ctx.finish("build-graph", seed, io, started)
}

pub fn discover_stage(ctx: &Context) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut io = Io::default();
    let data = load_data(ctx, &mut io)?;
    let clusters_path = ctx.upstream("build-graph", "clusters.json")?;
    let clusters: ClusterAssignment = read_json(&clusters_path)?;
    io.inputs.push(clusters_path);
    let cfg = &ctx.cfg.discovery;
    if clusters.k != cfg.clusters {
        return Err(ExitError::config(format!(
            "build-graph produced {} clusters but discovery.clusters is {}; rerun build-graph",
            clusters.k, cfg.clusters
        )));
    }
    let report = discover(
        &data.table,
        &data.geometry,
        &data.incidents,
        cfg,
        (cfg.clusters > 1).then_some(&clusters),
    )
    .map_err(core_error)?;
    let dir = ctx.dir("discover")?;
    let labels_csv = dir.join("discovery.csv");
    save_discovery(&report.labels, &labels_csv).map_err(core_error)?;
    let scores_csv = dir.join("scores.csv");
    save_scores(&report.scores, cfg.rho, &scores_csv).map_err(core_error)?;
    let temporal = dir.join("temporal.csv");
    save_temporal(&temporal_distribution(&data.incidents, &report.labels), &temporal).map_err(core_error)?;
    let labels_json = dir.join("labels.json");
    write_json(&labels_json, &report.labels)?;
    let scores_json = dir.join("scores.json");
    write_json(&scores_json, &report.scores)?;
    let critical = report.labels.iter().filter(|l| l.is_critical).count();
    let summary = dir.join("summary.json");
    write_json(
        &summary,
        &json!({
            "config_hash": ctx.hash,
            "seed": ctx.cfg.seed,
            "rho": cfg.rho,
            "theta": cfg.theta,
            "incidents": data.incidents.len(),
            "critical": critical,
            "non_critical": report.labels.len() - critical,
            "skipped": report.skipped,
        }),
    )?;
    io.outputs = vec![labels_csv, scores_csv, temporal, labels_json, scores_json, summary];
    ctx.finish("discover", ctx.cfg.seed, io, started)
}

pub fn sweep_stage(ctx: &Context) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut io = Io::default();
    let scores_path = ctx.upstream("discover", "scores.json")?;
    let scores: Vec<IncidentScores> = read_json(&scores_path)?;
    io.inputs.push(scores_path);
    let rows = sweep(&scores, &ctx.cfg.sweep.rhos, &ctx.cfg.sweep.thetas);
    let path = ctx.dir("sweep")?.join("sweep.csv");
    save_sweep(&rows, &path).map_err(core_error)?;
    io.outputs.push(path);
    ctx.finish("sweep", ctx.cfg.seed, io, started)
}

/// Inputs for every incident whose window fits the table, in file order.
fn classifier_inputs(
    data: &Data,
    scales: &InputScales,
    cfg: &ClassifierConfig,
) -> anyhow::Result<(Vec<ClassifierInput>, usize)> {
    let mut inputs = Vec::with_capacity(data.incidents.len());
    let mut skipped = 0;
    for inc in &data.incidents {
        match build_classifier_input(inc, &data.table, &data.geometry, scales, cfg) {
            Ok(x) => inputs.push(x),
            Err(digc_core::Error::WindowOutOfRange(_)) => skipped += 1,
            Err(e) => return Err(core_error(e)),
        }
    }
    Ok((inputs, skipped))
}

pub fn train_classifier_stage(ctx: &Context) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut io = Io::default();
    let data = load_data(ctx, &mut io)?;
    let labels_path = ctx.upstream("discover", "labels.json")?;
    let labels: Vec<CriticalityLabel> = read_json(&labels_path)?;
    io.inputs.push(labels_path);
    let by_id: HashMap<u64, bool> = labels.iter().map(|l| (l.incident_id, l.is_critical)).collect();
    let cfg = ctx.cfg.classifier();
    let scales = InputScales::from_data(&data.table, &data.incidents);
    let (all, skipped) = classifier_inputs(&data, &scales, &cfg)?;
    let (inputs, targets): (Vec<ClassifierInput>, Vec<bool>) = all
        .into_iter()
        .filter_map(|x| by_id.get(&x.incident_id).map(|&l| (x, l)))
        .unzip();
    let (model, metrics) =
        train_classifier(&inputs, &targets, propagation(&data.geometry)?, scales, &cfg).map_err(core_error)?;
    let dir = ctx.dir("train-classifier")?;
    let checkpoint = dir.join("classifier.json");
    model.save(&checkpoint).map_err(core_error)?;
    let metrics_path = dir.join("metrics.json");
    let mut value = serde_json::to_value(&metrics)?;
    value["config_hash"] = json!(ctx.hash);
    value["labelled_incidents"] = json!(inputs.len());
    value["skipped_incidents"] = json!(skipped);
    write_json(&metrics_path, &value)?;
    io.outputs = vec![checkpoint, metrics_path];
    ctx.finish("train-classifier", cfg.seed, io, started)
}

pub fn extract_features(ctx: &Context) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut io = Io::default();
    let data = load_data(ctx, &mut io)?;
    let checkpoint = ctx.upstream("train-classifier", "classifier.json")?;
    let model = ImpactClassifier::load(&checkpoint, propagation(&data.geometry)?).map_err(core_error)?;
    io.inputs.push(checkpoint);
    let (inputs, _) = classifier_inputs(&data, &model.scales, &model.config)?;
    let features = extract_latent_features(&model, &inputs).map_err(core_error)?;
    let path = ctx.dir("extract-features")?.join("features.csv");
    save_features(&features, &path).map_err(core_error)?;
    io.outputs.push(path);
    ctx.finish("extract-features", model.config.seed, io, started)
}

/// Dataset for `cfg`; latent features are only required by the full variant.
fn dataset(ctx: &Context, data: &Data, cfg: &DigcConfig, io: &mut Io) -> anyhow::Result<DigcDataset> {
    let features = if cfg.variant.incidents() {
        let path = ctx.upstream("extract-features", "features.csv")?;
        let f = load_features(&path).map_err(core_error)?;
        io.inputs.push(path);
        f
    } else {
        Vec::new()
    };
    assemble_training_windows(&data.table, &data.incidents, &data.weather, &features, cfg).map_err(core_error)
}

pub fn train(ctx: &Context) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut io = Io::default();
    let data = load_data(ctx, &mut io)?;
    let cfg = ctx.cfg.digc();
    let ds = dataset(ctx, &data, &cfg, &mut io)?;
    let (model, metrics) = train_digc(&ds, propagation(&data.geometry)?, &cfg).map_err(core_error)?;
    let dir = ctx.dir("train")?;
    let checkpoint = dir.join("model.json");
    model.save(&checkpoint).map_err(core_error)?;
    let metrics_path = dir.join("metrics.json");
    let mut value = serde_json::to_value(&metrics)?;
    value["config_hash"] = json!(ctx.hash);
    write_json(&metrics_path, &value)?;
    io.outputs = vec![checkpoint, metrics_path];
    ctx.finish("train", cfg.seed, io, started)
}

fn load_model(ctx: &Context, data: &Data, io: &mut Io) -> anyhow::Result<DigcNet> {
    let checkpoint = ctx.upstream("train", "model.json")?;
    let model = DigcNet::load(&checkpoint, propagation(&data.geometry)?).map_err(core_error)?;
    io.inputs.push(checkpoint);
    Ok(model)
}

pub fn predict(ctx: &Context) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut io = Io::default();
    let data = load_data(ctx, &mut io)?;
    let model = load_model(ctx, &data, &mut io)?;
    let ds = dataset(ctx, &data, &model.config, &mut io)?;
    let preds = predict_dataset(&model, &ds, &ds.test).map_err(core_error)?;
    let metrics = score_predictions(&model, &ds, &preds).map_err(core_error)?;
    let dir = ctx.dir("predict")?;
    let csv = dir.join("predictions.csv");
    save_predictions(&preds, &csv).map_err(core_error)?;
    let metrics_path = dir.join("metrics.json");
    write_json(
        &metrics_path,
        &json!({
            "mape_overall": metrics.mape_overall,
            "mape_per_step": metrics.mape_per_step,
            "variant": metrics.variant,
            "seed": metrics.seed,
            "config_hash": ctx.hash,
            "used": metrics.used,
            "excluded": metrics.excluded,
        }),
    )?;
    io.outputs = vec![csv, metrics_path];
    ctx.finish("predict", model.config.seed, io, started)
}

pub fn evaluate_stage(ctx: &Context) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut io = Io::default();
    let data = load_data(ctx, &mut io)?;
    let model = load_model(ctx, &data, &mut io)?;
    let ds = dataset(ctx, &data, &model.config, &mut io)?;
    let metrics = evaluate(&model, &ds).map_err(core_error)?;
    let baselines = ctx
        .cfg
        .evaluate
        .baselines
        .iter()
        .map(|&b| run_baseline(b, &ds, &model.config))
        .collect::<Result<Vec<_>, _>>()
        .map_err(core_error)?;
    let path = ctx.dir("evaluate")?.join("evaluation.json");
    write_json(
        &path,
        &json!({
            "config_hash": ctx.hash,
            "seed": model.config.seed,
            "model": metrics,
            "baselines": baselines,
        }),
    )?;
    io.outputs.push(path);
    ctx.finish("evaluate", model.config.seed, io, started)
}

/// Collects the metrics files of earlier stages into one document.
pub fn report(ctx: &Context) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut io = Io::default();
    let sources = [
        ("discover", "summary.json"),
        ("train-classifier", "metrics.json"),
        ("train", "metrics.json"),
        ("predict", "metrics.json"),
        ("evaluate", "evaluation.json"),
    ];
    let mut collected = serde_json::Map::new();
    for (stage, file) in sources {
        let p = ctx.out.join(stage).join(file);
        if p.is_file() {
            collected.insert(stage.to_string(), read_json::<Value>(&p)?);
            io.inputs.push(p);
        }
    }
    if collected.is_empty() {
        return Err(missing(&ctx.out.join("discover").join("summary.json"), "discover"));
    }
    let dir = ctx.dir("report")?;
    let json_path = dir.join("report.json");
    write_json(&json_path, &collected)?;
    let md_path = dir.join("report.md");
    std::fs::write(&md_path, render_markdown(&ctx.hash, &collected))
        .with_context(|| format!("cannot write {}", md_path.display()))?;
    io.outputs = vec![json_path, md_path];
    ctx.finish("report", ctx.cfg.seed, io, started)
}

fn fmt_num(v: &Value) -> String {
    match v.as_f64() {
        Some(x) if v.is_f64() => format!("{x:.4}"),
        _ => v.to_string(),
    }
}

fn render_markdown(hash: &str, c: &serde_json::Map<String, Value>) -> String {
    let mut s = format!("# Pipeline report\n\nconfig hash `{hash}`\n");
    if let Some(d) = c.get("discover") {
        s += "\n## Incident discovery\n\n| incidents | critical | non-critical | skipped | rho | theta |\n|---|---|---|---|---|---|\n";
        s += &format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            d["incidents"],
            d["critical"],
            d["non_critical"],
            d["skipped"].as_array().map_or(0, Vec::len),
            fmt_num(&d["rho"]),
            fmt_num(&d["theta"])
        );
    }
    if let Some(m) = c.get("train-classifier") {
        s += "\n## Impact classifier (test split)\n\n| F1 | precision | recall | BCE | epochs |\n|---|---|---|---|---|\n";
        s += &format!(
            "| {} | {} | {} | {} | {} |\n",
            fmt_num(&m["f1"]),
            fmt_num(&m["precision"]),
            fmt_num(&m["recall"]),
            fmt_num(&m["bce"]),
            m["epochs"]
        );
    }
    let mut rows = Vec::new();
    if let Some(m) = c.get("train") {
        rows.push((format!("trained ({})", m["variant"].as_str().unwrap_or("?")), m));
    }
    if let Some(m) = c.get("predict") {
        rows.push((format!("predict ({})", m["variant"].as_str().unwrap_or("?")), m));
    }
    let evaluation = c.get("evaluate");
    if let Some(e) = evaluation {
        rows.push((format!("evaluate ({})", e["model"]["variant"].as_str().unwrap_or("?")), &e["model"]));
    }
    if !rows.is_empty() || evaluation.is_some() {
        s += "\n## Speed prediction (test MAPE, %)\n\n| model | overall | per step |\n|---|---|---|\n";
        for (name, m) in &rows {
            s += &format!("| {name} | {} | {} |\n", fmt_num(&m["mape_overall"]), steps(&m["mape_per_step"]));
        }
        if let Some(bs) = evaluation.and_then(|e| e["baselines"].as_array()) {
            for b in bs {
                s += &format!(
                    "| {} | {} | {} |\n",
                    b["name"].as_str().unwrap_or("?"),
                    fmt_num(&b["mape_overall"]),
                    steps(&b["mape_per_step"])
                );
            }
        }
    }
    s
}

fn steps(v: &Value) -> String {
    v.as_array()
        .map(|a| a.iter().map(fmt_num).collect::<Vec<_>>().join(" / "))
        .unwrap_or_default()
}
