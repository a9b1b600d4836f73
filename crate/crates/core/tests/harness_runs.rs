use std::collections::HashSet;
use std::sync::Arc;

use clipstream::harness::{
    emit_report, parse_report_csv, run_seed, run_session, ExperimentConfig, ReportFormat, RunOptions, TraceSource,
};
use clipstream::media::{generate_trace, FrameType, GeneratorParams, VideoTrace};
use clipstream::netem::LinkConfig;
use clipstream::session::DEFAULT_SHARD_SIZE;
use clipstream::{run_matrix, run_once, ProtocolMode};

fn clip_params(seconds: f64) -> GeneratorParams {
    GeneratorParams {
        duration_s: seconds,
        total_bytes: (176e6 * seconds / 296.21) as u64,
        frame_count: None,
        ..GeneratorParams::default()
    }
}

fn clip(seconds: f64) -> Arc<VideoTrace> {
    Arc::new(generate_trace(&clip_params(seconds)).unwrap())
}

fn link(loss: f64) -> LinkConfig {
    LinkConfig {
        loss_rate: loss,
        ..LinkConfig::default()
    }
}

#[test]
fn lossless_runs_play_cleanly() {
    let trace = clip(10.0);
    for mode in ProtocolMode::ALL {
        let row = run_once(mode, &link(0.0), trace.clone(), 3, &RunOptions::default()).unwrap();
        assert!(row.completed, "{mode:?}");
        assert!(row.buf_ratio < 0.0025, "{mode:?} {}", row.buf_ratio);
        assert_eq!(row.frames_intact as usize, trace.len(), "{mode:?}");
        assert_eq!(row.assim, 1.0);
    }
}

#[test]
fn clipstream_finishes_under_heavy_loss() {
    let trace = clip(10.0);
    for mode in [ProtocolMode::Clipstream, ProtocolMode::ClipstreamFec] {
        let row = run_once(mode, &link(0.0512), trace.clone(), 11, &RunOptions::default()).unwrap();
        assert!(row.completed, "{mode:?}");
        let total = row.frames_intact + row.frames_recovered + row.frames_corrupted + row.frames_missing;
        assert_eq!(total as usize, trace.len());
    }
}

#[test]
fn same_seed_same_row() {
    let trace = clip(6.0);
    for mode in ProtocolMode::ALL {
        let a = run_once(mode, &link(0.02), trace.clone(), 99, &RunOptions::default()).unwrap();
        let b = run_once(mode, &link(0.02), trace.clone(), 99, &RunOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.assim.to_bits(), b.assim.to_bits());
    }
}

#[test]
fn static_fec_overhead_matches_frame_sizes() {
    let trace = clip(8.0);
    let out = run_session(
        ProtocolMode::ClipstreamFec,
        &link(0.0),
        trace.clone(),
        5,
        &RunOptions::default(),
    )
    .unwrap();
    let mut expected = 0u64;
    let mut parity = 0u64;
    for f in trace.frames.iter().filter(|f| f.frame_type != FrameType::I) {
        let size = f.size as u64;
        let k = size.div_ceil(DEFAULT_SHARD_SIZE as u64).max(1);
        if k >= 255 {
            continue;
        }
        let m = (15 * k).div_ceil(100).max(1).min(255 - k);
        expected += (k + m) * DEFAULT_SHARD_SIZE as u64 - size;
        parity += m;
    }
    assert_eq!(out.server.fec_overhead_bytes, expected);
    assert_eq!(out.server.parity_shards, parity);
    let ratio = expected as f64 / trace.total_bytes() as f64;
    assert!((out.row.fec_overhead_ratio - ratio).abs() < 1e-12);

    let plain = run_session(ProtocolMode::Clipstream, &link(0.0), trace, 5, &RunOptions::default()).unwrap();
    assert_eq!(plain.server.fec_overhead_bytes, 0);
    assert_eq!(plain.row.fec_overhead_ratio, 0.0);
}

fn small_matrix() -> ExperimentConfig {
    ExperimentConfig {
        modes: vec![ProtocolMode::QuicLike, ProtocolMode::Clipstream],
        loss_rates: vec![0.0, 0.01],
        repetitions: 3,
        trace: TraceSource::Synthetic(clip_params(4.0)),
        base_seed: 42,
        jobs: 2,
        ..ExperimentConfig::default()
    }
}

#[test]
fn matrix_shape_seeds_and_reports() {
    let cfg = small_matrix();
    let report = run_matrix(&cfg).unwrap();
    assert_eq!(report.runs.len(), 12);
    assert_eq!(report.aggregates.len(), 4);
    for a in &report.aggregates {
        assert_eq!(a.runs, 3);
    }

    let seeds: HashSet<u64> = report.runs.iter().map(|r| r.seed).collect();
    assert_eq!(seeds.len(), 12);
    for r in &report.runs {
        assert_eq!(r.seed, run_seed(42, r.mode, r.loss, r.rep));
    }

    let csv = emit_report(&report, ReportFormat::Csv).unwrap();
    assert_eq!(parse_report_csv(&csv).unwrap(), report);

    let json = emit_report(&report, ReportFormat::Json).unwrap();
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(value["runs"].as_array().unwrap().len(), 12);

    let plot = emit_report(&report, ReportFormat::Gnuplot).unwrap();
    assert_eq!(plot.matches("(median)").count(), 3);

    let again = run_matrix(&ExperimentConfig { jobs: 1, ..cfg }).unwrap();
    assert_eq!(emit_report(&again, ReportFormat::Csv).unwrap(), csv);
}

#[test]
fn single_repetition_has_zero_spread() {
    let cfg = ExperimentConfig {
        modes: vec![ProtocolMode::TcpLike],
        loss_rates: vec![0.005],
        repetitions: 1,
        ..small_matrix()
    };
    let report = run_matrix(&cfg).unwrap();
    let agg = &report.aggregates[0];
    assert_eq!(agg.assim.stddev, 0.0);
    assert_eq!(agg.assim.median, report.runs[0].assim);
}

#[test]
fn bad_configs_are_rejected() {
    let cfg = ExperimentConfig {
        repetitions: 0,
        ..small_matrix()
    };
    assert!(run_matrix(&cfg).is_err());
    let cfg = ExperimentConfig {
        loss_rates: vec![1.5],
        ..small_matrix()
    };
    assert!(run_matrix(&cfg).is_err());
    let cfg = ExperimentConfig {
        trace: TraceSource::Csv("/nonexistent/trace.csv".into()),
        ..small_matrix()
    };
    assert!(run_matrix(&cfg).is_err());
}
