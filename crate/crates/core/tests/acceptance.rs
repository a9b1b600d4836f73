//! Acceptance gate. Prints one PASS or FAIL line per criterion and exits
//! non-zero if any criterion fails. Arguments not starting with `--` filter
//! criteria by name.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use clipstream::harness::{emit_report, run_session, Aggregate, ReportFormat, RunOptions, TraceSource};
use clipstream::media::FrameType;
use clipstream::netem::LinkConfig;
use clipstream::{run_matrix, ExperimentConfig, ProtocolMode, RunReport};
use common::checks::*;
use proptest::test_runner::{Config, TestRunner};

struct Matrix {
    report: RunReport,
    csv: String,
    elapsed: Duration,
}

fn default_matrix() -> &'static Matrix {
    static M: OnceLock<Matrix> = OnceLock::new();
    M.get_or_init(|| {
        let t = Instant::now();
        let report = run_matrix(&ExperimentConfig::default()).expect("default matrix");
        let elapsed = t.elapsed();
        let csv = emit_report(&report, ReportFormat::Csv).unwrap();
        Matrix { report, csv, elapsed }
    })
}

fn verdict(n: u32, title: &str, failures: &[String]) -> bool {
    if failures.is_empty() {
        println!("PASS criterion {n}: {title}");
    } else {
        println!("FAIL criterion {n}: {title}");
        for f in failures {
            println!("    {f}");
        }
    }
    failures.is_empty()
}

fn cell(mode: ProtocolMode, loss: f64) -> &'static Aggregate {
    default_matrix().report.aggregate(mode, loss).expect("cell present")
}

fn losses() -> Vec<f64> {
    ExperimentConfig::default().loss_rates
}

fn criterion_01_zero_loss_baseline() -> bool {
    let mut bad = Vec::new();
    for r in default_matrix().report.runs.iter().filter(|r| r.loss == 0.0) {
        if !(r.buf_ratio < 0.0025 && r.rate_buf < 0.0025) {
            bad.push(format!(
                "{} rep {}: bufRatio {:.5} rateBuf {:.6}",
                r.mode, r.rep, r.buf_ratio, r.rate_buf
            ));
        }
        if r.sim_time_s >= 600.0 {
            bad.push(format!("{} rep {}: {:.1} s simulated", r.mode, r.rep, r.sim_time_s));
        }
    }
    verdict(1, "zero-loss bufRatio and rateBuf below 0.25%", &bad)
}

fn criterion_02_clipstream_stall_immunity() -> bool {
    let mut bad = Vec::new();
    for mode in [ProtocolMode::Clipstream, ProtocolMode::ClipstreamFec] {
        for p in losses() {
            let a = cell(mode, p);
            if a.rate_buf.median > 0.0002 || a.buf_ratio.median > 0.01 {
                bad.push(format!(
                    "{mode} at {:.2}%: median rateBuf {:.5}% bufRatio {:.3}%",
                    p * 100.0,
                    a.rate_buf.median * 100.0,
                    a.buf_ratio.median * 100.0
                ));
            }
        }
    }
    verdict(2, "clipstream modes stay free of stalls across the sweep", &bad)
}

fn criterion_03_protocol_ordering() -> bool {
    use ProtocolMode::*;
    let mut bad = Vec::new();
    for p in losses().into_iter().filter(|&p| p >= 0.0032) {
        let q = |m| cell(m, p).assim.median;
        let b = |m| cell(m, p).buf_ratio.median;
        let assim_ok = q(ClipstreamFec) >= q(Clipstream) && q(Clipstream) > q(QuicLike) && q(QuicLike) >= q(TcpLike);
        let buf_ok = b(TcpLike) >= b(QuicLike) && b(QuicLike) > b(Clipstream) && b(Clipstream) >= b(ClipstreamFec);
        if !(assim_ok && buf_ok) {
            bad.push(format!(
                "{:.2}%: aSSIM tcp {:.3} quic {:.3} cs {:.3} csfec {:.3}; bufRatio tcp {:.3} quic {:.3} cs {:.3} csfec {:.3}",
                p * 100.0,
                q(TcpLike),
                q(QuicLike),
                q(Clipstream),
                q(ClipstreamFec),
                b(TcpLike),
                b(QuicLike),
                b(Clipstream),
                b(ClipstreamFec)
            ));
        }
    }
    verdict(3, "median aSSIM and bufRatio ordering at loss >= 0.32%", &bad)
}

fn criterion_04_monotone_degradation() -> bool {
    let mut bad = Vec::new();
    let ps = losses();
    for mode in ProtocolMode::ALL {
        for w in ps.windows(2) {
            let (a, b) = (cell(mode, w[0]).assim.median, cell(mode, w[1]).assim.median);
            if b > a {
                bad.push(format!(
                    "{mode}: aSSIM {a:.4} at {:.2}% rises to {b:.4} at {:.2}%",
                    w[0] * 100.0,
                    w[1] * 100.0
                ));
            }
        }
    }
    verdict(4, "median aSSIM non-increasing in loss", &bad)
}

fn criterion_05_reliability_split() -> bool {
    let trace = Arc::new(TraceSource::default().load().unwrap());
    let mut bad = Vec::new();
    if trace.len() != 7106 {
        bad.push(format!("trace has {} frames", trace.len()));
    }
    let i_frames = trace.frames.iter().filter(|f| f.frame_type == FrameType::I).count();
    for mode in [ProtocolMode::Clipstream, ProtocolMode::ClipstreamFec] {
        let out = run_session(mode, &LinkConfig::default(), trace.clone(), 1, &RunOptions::default()).unwrap();
        let s = &out.server;
        let share = s.reliable_payload_bytes as f64 / (s.reliable_payload_bytes + s.unreliable_payload_bytes) as f64;
        if (share - 0.12).abs() > 0.01 || s.reliable_frames != 75 || i_frames != 75 {
            bad.push(format!(
                "{mode}: reliable share {:.2}%, {} reliable frames of {}",
                share * 100.0,
                s.reliable_frames,
                s.frames_written
            ));
        }
    }
    verdict(5, "reliable stream carries 12% of bytes and 75 of 7106 frames", &bad)
}

fn criterion_06_fec_mds_exhaustive() -> bool {
    let bad = match mds_exhaustive() {
        Ok(_) => vec![],
        Err(e) => vec![e],
    };
    verdict(6, "every erasure pattern for k <= 8, m <= 4", &bad)
}

fn criterion_07_transport_properties() -> bool {
    let runner = || {
        TestRunner::new(Config {
            cases: 1000,
            failure_persistence: None,
            ..Config::default()
        })
    };
    let mut bad = Vec::new();
    let mut record = |name: &str, r: Result<(), String>| {
        if let Err(e) = r {
            bad.push(format!("{name}: {e}"));
        }
    };
    let err = |e: proptest::test_runner::TestError<_>| e.to_string();
    record(
        "reliable byte-exactness",
        runner()
            .run(&transfer_case(30_000), reliable_is_byte_exact)
            .map_err(err),
    );
    record(
        "unreliable sent once",
        runner().run(&transfer_case(40_000), unreliable_sent_once).map_err(err),
    );
    record(
        "zero-fill matches losses",
        runner()
            .run(&transfer_case(40_000), zero_fill_matches_losses)
            .map_err(err),
    );
    record(
        "window conservation",
        runner()
            .run(&(transfer_case(60_000), proptest::bool::ANY), |(c, r)| {
                window_respected(c, r)
            })
            .map_err(|e| e.to_string()),
    );
    record(
        "ack range roundtrip",
        runner().run(&ack_set(), ack_roundtrip).map_err(|e| e.to_string()),
    );
    verdict(7, "transport properties hold over 1000 cases each", &bad)
}

fn criterion_08_determinism() -> bool {
    let first = default_matrix();
    let second = emit_report(&run_matrix(&ExperimentConfig::default()).unwrap(), ReportFormat::Csv).unwrap();
    let bad = if first.csv == second {
        vec![]
    } else {
        let line = first.csv.lines().zip(second.lines()).position(|(a, b)| a != b);
        vec![format!("reports differ at line {line:?}")]
    };
    verdict(8, "identical seeds give byte-identical CSV", &bad)
}

fn criterion_09_emulator_calibration() -> bool {
    let mut bad = Vec::new();
    let n = 1_000_000;
    let (lost, delivered) = drop_count(0.0128, 0, n);
    if lost + delivered != n || !within_3_sigma(0.0128, lost, n) {
        bad.push(format!("{lost} of {n} dropped at 1.28%"));
    }
    let ser = LinkConfig::default().serialization_time(1500);
    if ser != Duration::from_micros(600) {
        bad.push(format!("1500 B serializes in {ser:?}"));
    }
    verdict(9, "drop rate within 3 sigma and 600 us serialization", &bad)
}

fn criterion_10_desk_scale_runtime() -> bool {
    let m = default_matrix();
    let mut bad = Vec::new();
    if m.report.runs.len() != 320 {
        bad.push(format!("{} runs", m.report.runs.len()));
    }
    if m.elapsed >= Duration::from_secs(600) {
        bad.push(format!("matrix took {:.0} s", m.elapsed.as_secs_f64()));
    }
    println!("default matrix: {:.1} s wall clock", m.elapsed.as_secs_f64());
    verdict(10, "full matrix in under 10 minutes", &bad)
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> bool); 10] = [
        ("criterion_01_zero_loss_baseline", criterion_01_zero_loss_baseline),
        (
            "criterion_02_clipstream_stall_immunity",
            criterion_02_clipstream_stall_immunity,
        ),
        ("criterion_03_protocol_ordering", criterion_03_protocol_ordering),
        ("criterion_04_monotone_degradation", criterion_04_monotone_degradation),
        ("criterion_05_reliability_split", criterion_05_reliability_split),
        ("criterion_06_fec_mds_exhaustive", criterion_06_fec_mds_exhaustive),
        ("criterion_07_transport_properties", criterion_07_transport_properties),
        ("criterion_08_determinism", criterion_08_determinism),
        ("criterion_09_emulator_calibration", criterion_09_emulator_calibration),
        ("criterion_10_desk_scale_runtime", criterion_10_desk_scale_runtime),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with("--")).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let ok = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
            println!("FAIL criterion {}: panicked", i + 1);
            false
        });
        failed += usize::from(!ok);
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
