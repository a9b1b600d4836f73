mod common;

use std::time::Duration;

use clipstream::netem::{DuplexLink, Link, LinkConfig};
use clipstream::SimTime;
use common::checks::{drop_count, within_3_sigma};

fn check(loss: f64, seed: u64, n: u64) {
    let (lost, delivered) = drop_count(loss, seed, n);
    assert_eq!(lost + delivered, n);
    println!("loss {loss}: {lost} of {n} dropped");
    assert!(within_3_sigma(loss, lost, n));
}

#[test]
fn drop_rate_at_1_28_percent() {
    check(0.0128, 0, 1_000_000);
}

#[test]
fn drop_rate_across_the_sweep() {
    for (i, p) in [0.0008, 0.0016, 0.0032, 0.0064, 0.0256, 0.0512].into_iter().enumerate() {
        check(p, 100 + i as u64, 200_000);
    }
}

#[test]
fn serialization_of_1500_bytes() {
    let cfg = LinkConfig::default();
    assert_eq!(cfg.serialization_time(1500), Duration::from_micros(600));
    assert_eq!(cfg.serialization_nanos(1500), 600_000);

    let mut link = Link::new(cfg).unwrap();
    link.push(vec![0; 1500], SimTime::ZERO);
    link.push(vec![0; 1500], SimTime::ZERO);
    let out = link.poll(SimTime::from_millis(50));
    let times: Vec<u64> = out.iter().map(|(_, t)| t.as_micros()).collect();
    assert_eq!(times, vec![15_600, 16_200]);
}

#[test]
fn drop_tail_counts_exactly() {
    let mut link = Link::new(LinkConfig::default()).unwrap();
    let accepted = (0..1500).filter(|_| link.push(vec![0; 1000], SimTime::ZERO)).count();
    assert_eq!(accepted, 1000);
    assert_eq!(link.stats().tail_drops, 500);
    // one packet departs every 400 us
    assert_eq!(link.queue_len(SimTime(400)), 999);
    assert!(link.push(vec![0; 1000], SimTime(400)));
}

#[test]
fn directions_have_independent_losses() {
    let mut d = DuplexLink::new(LinkConfig {
        loss_rate: 0.5,
        seed: 11,
        ..LinkConfig::default()
    })
    .unwrap();
    let mut fwd = Vec::new();
    let mut rev = Vec::new();
    for i in 0..256u32 {
        let t = SimTime(i as u64 * 1000);
        let before = (d.forward.stats().random_losses, d.reverse.stats().random_losses);
        d.forward.push(vec![0; 10], t);
        d.reverse.push(vec![0; 10], t);
        fwd.push(d.forward.stats().random_losses > before.0);
        rev.push(d.reverse.stats().random_losses > before.1);
    }
    assert_ne!(fwd, rev);
}

#[test]
fn same_seed_same_pattern() {
    let pattern = |seed| {
        let mut l = Link::new(LinkConfig {
            loss_rate: 0.1,
            seed,
            ..LinkConfig::default()
        })
        .unwrap();
        (0..2000)
            .map(|i| {
                let before = l.stats().random_losses;
                l.push(vec![0; 10], SimTime(i * 100));
                l.stats().random_losses > before
            })
            .collect::<Vec<bool>>()
    };
    assert_eq!(pattern(3), pattern(3));
    assert_ne!(pattern(3), pattern(4));
}
