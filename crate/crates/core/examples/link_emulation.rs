//! Drive a single emulated link with back-to-back packets and look at its
//! timing and loss.

use clipstream::netem::{Link, LinkConfig};
use clipstream::SimTime;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = LinkConfig {
        loss_rate: 0.0128,
        seed: 42,
        ..LinkConfig::default()
    };
    println!(
        "1500 B at {} bit/s serializes in {:?}",
        cfg.rate_bps,
        cfg.serialization_time(1500)
    );

    let mut link = Link::new(cfg)?;
    let first = SimTime::ZERO;
    link.push(vec![0; 1500], first);
    let arrivals = link.poll(SimTime::from_millis(100));
    println!("first packet arrives at {} us", arrivals[0].1.as_micros());

    // One packet every 600 us keeps the queue empty; losses are random only.
    let mut now = SimTime::from_millis(200);
    for _ in 0..200_000 {
        link.push(vec![0; 1500], now);
        now = SimTime(now.0 + 600);
        link.poll(now);
    }
    let s = link.stats();
    println!(
        "pushed 200000: random losses {} ({:.3}%), tail drops {}",
        s.random_losses,
        100.0 * s.random_losses as f64 / 200_000.0,
        s.tail_drops
    );

    // A burst twice the buffer size overflows the drop-tail queue.
    let mut burst = Link::new(LinkConfig::default())?;
    for _ in 0..2000 {
        burst.push(vec![0; 1400], now);
    }
    println!(
        "burst of 2000: accepted {} tail drops {}",
        burst.stats().accepted,
        burst.stats().tail_drops
    );
    Ok(())
}
