//! Generate the default synthetic trace and summarise it per frame type.

use clipstream::media::{generate_trace, parse_trace_csv, write_trace_csv, FrameType, GeneratorParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let trace = generate_trace(&GeneratorParams::default())?;
    println!(
        "{} frames, {:.2} s at {} fps, {} bytes",
        trace.len(),
        trace.duration_s,
        trace.fps,
        trace.total_bytes()
    );
    for ty in [FrameType::I, FrameType::P, FrameType::B] {
        let frames: Vec<_> = trace.frames.iter().filter(|f| f.frame_type == ty).collect();
        let bytes: u64 = frames.iter().map(|f| f.size as u64).sum();
        println!(
            "{ty:?}: {:5} frames ({:5.2}%), {:10} bytes ({:5.2}%)",
            frames.len(),
            100.0 * frames.len() as f64 / trace.len() as f64,
            bytes,
            100.0 * bytes as f64 / trace.total_bytes() as f64
        );
    }

    let csv = write_trace_csv(&trace);
    print!("{}", csv.lines().take(6).map(|l| format!("{l}\n")).collect::<String>());
    assert_eq!(parse_trace_csv(&csv)?.frames, trace.frames);
    Ok(())
}
