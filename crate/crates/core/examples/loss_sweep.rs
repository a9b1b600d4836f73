//! A reduced experiment matrix: every mode over the default loss rates,
//! two repetitions each on a one-minute clip, printed as gnuplot blocks.

use clipstream::harness::{emit_report, run_matrix, ExperimentConfig, ReportFormat, TraceSource};
use clipstream::media::GeneratorParams;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig {
        repetitions: 2,
        trace: TraceSource::Synthetic(GeneratorParams {
            duration_s: 60.0,
            total_bytes: 35_640_000,
            frame_count: None,
            ..GeneratorParams::default()
        }),
        base_seed: 3,
        ..ExperimentConfig::default()
    };
    let started = std::time::Instant::now();
    let report = run_matrix(&cfg)?;
    eprintln!("{} runs in {:.1} s", report.runs.len(), started.elapsed().as_secs_f64());
    print!("{}", emit_report(&report, ReportFormat::Gnuplot)?);
    Ok(())
}
