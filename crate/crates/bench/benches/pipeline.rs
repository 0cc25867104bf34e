use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use digc_bench::bench_city;
use digc_core::classifier::{build_classifier_input, ClassifierConfig, ImpactClassifier, InputScales};
use digc_core::digc::{assemble_training_windows, DigcConfig, DigcNet};
use digc_core::discovery::{discover, score_flows, similarity_matrix, DiscoveryConfig};
use digc_core::neural::layers::{gcn, init_lstm, lstm_over_rows};
use digc_core::neural::{Activation, ModelParams, Tape, Tensor};
use digc_core::road_graph::{build_flow_graph, spectral_clusters};

fn discovery(c: &mut Criterion) {
    let city = bench_city();
    let cfg = DiscoveryConfig::default();
    let mut g = c.benchmark_group("discovery");
    g.bench_function("similarity_matrix_48", |b| {
        b.iter(|| similarity_matrix(&city.speeds, black_box(400), &cfg, None).unwrap())
    });
    g.bench_function("score_flows_hour_48", |b| b.iter(|| score_flows(&city.speeds, &cfg, None, 400, 411).unwrap()));
    g.sample_size(10);
    g.bench_function("discover_20_incidents", |b| {
        b.iter(|| discover(&city.speeds, &city.geometry, &city.incidents, &cfg, None).unwrap())
    });
    g.finish();
}

fn graph(c: &mut Criterion) {
    let city = bench_city();
    let graph = build_flow_graph(&city.geometry).unwrap();
    c.bench_function("build_flow_graph_48", |b| b.iter(|| build_flow_graph(black_box(&city.geometry)).unwrap()));
    c.bench_function("spectral_clusters_48_k2", |b| b.iter(|| spectral_clusters(&graph, 2, 1).unwrap()));
}

fn neural(c: &mut Criterion) {
    let city = bench_city();
    let prop = build_flow_graph(&city.geometry).unwrap().propagation_matrix();
    let n = prop.rows();
    let mut params = ModelParams::new();
    params.insert_glorot("theta", 1, 64, 1);
    init_lstm(&mut params, "lstm", 64, 64, 1);
    let x = Tensor::filled(12 * n, 1, 0.5);
    c.bench_function("gcn_forward_backward_12x48", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = tape.constant(prop.clone());
            let xv = tape.constant(x.clone());
            let th = tape.param(&params, "theta");
            let h = gcn(&mut tape, p, xv, th, Activation::Relu);
            let loss = tape.mse(h, Tensor::zeros(12 * n, 64));
            tape.backward(loss)
        })
    });
    let seq = Tensor::filled(16 * 12, 64, 0.1);
    let steps: Vec<Vec<usize>> = (0..12).map(|s| (0..16).map(|i| i * 12 + s).collect()).collect();
    c.bench_function("lstm_forward_backward_b16_t12", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(seq.clone());
            let h = lstm_over_rows(&mut tape, &params, "lstm", xv, &steps);
            let loss = tape.mse(h, Tensor::zeros(16, 64));
            tape.backward(loss)
        })
    });
}

fn models(c: &mut Criterion) {
    let city = bench_city();
    let prop = build_flow_graph(&city.geometry).unwrap().propagation_matrix();
    let cfg = ClassifierConfig::default();
    let scales = InputScales::from_data(&city.speeds, &city.incidents);
    let inputs: Vec<_> = city
        .incidents
        .iter()
        .filter_map(|i| build_classifier_input(i, &city.speeds, &city.geometry, &scales, &cfg).ok())
        .collect();
    let clf = ImpactClassifier::new(prop.clone(), scales, cfg).unwrap();
    c.bench_function("classifier_predict_20", |b| b.iter(|| clf.predict(&inputs).unwrap()));

    let dcfg = DigcConfig {
        variant: digc_core::digc::Variant::SpatioTemporalPeriodic,
        periodic_days: 2,
        ..DigcConfig::default()
    };
    let ds = assemble_training_windows(&city.speeds, &city.incidents, &city.weather, &[], &dcfg).unwrap();
    let model = DigcNet::new(prop, ds.scales().clone(), dcfg).unwrap();
    let window = ds.window(ds.test[0]).unwrap();
    c.bench_function("digc_forward_window_48", |b| b.iter(|| model.forward_window(&window).unwrap()));
}

criterion_group!(benches, discovery, graph, neural, models);
criterion_main!(benches);
