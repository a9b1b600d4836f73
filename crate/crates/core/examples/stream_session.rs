//! Stream a short clip in every protocol mode over the same lossy path and
//! compare what the viewer gets.

use std::sync::Arc;

use clipstream::harness::{run_session, RunOptions};
use clipstream::media::{generate_trace, GeneratorParams};
use clipstream::netem::LinkConfig;
use clipstream::session::FrameOutcome;
use clipstream::ProtocolMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let loss: f64 = std::env::args().nth(1).map_or(Ok(0.0032), |s| s.parse())?;
    let params = GeneratorParams {
        duration_s: 40.0,
        total_bytes: 23_760_000,
        frame_count: None,
        ..GeneratorParams::default()
    };
    let trace = Arc::new(generate_trace(&params)?);
    let link = LinkConfig {
        loss_rate: loss,
        ..LinkConfig::default()
    };
    println!("{} frames, loss {:.2}%", trace.len(), loss * 100.0);
    println!(
        "{:15} {:>8} {:>8} {:>7} {:>6} {:>6} {:>6} {:>6} {:>9}",
        "mode", "bufRatio", "rateBuf", "aSSIM", "intact", "recov", "corr", "miss", "startup"
    );
    for mode in ProtocolMode::ALL {
        let out = run_session(mode, &link, trace.clone(), 1, &RunOptions::default())?;
        let count = |o: FrameOutcome| out.events.rendered.iter().filter(|&&r| r == o).count();
        let r = &out.row;
        println!(
            "{:15} {:8.4} {:8.5} {:7.4} {:6} {:6} {:6} {:6} {:8.3}s",
            mode.to_string(),
            r.buf_ratio,
            r.rate_buf,
            r.assim,
            count(FrameOutcome::Intact),
            count(FrameOutcome::Recovered),
            count(FrameOutcome::Corrupted),
            count(FrameOutcome::Missing),
            r.startup_delay_s
        );
    }
    Ok(())
}
