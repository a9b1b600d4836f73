mod common;

use std::collections::{BTreeMap, BTreeSet};

use clipstream::transport::{StreamClass, TransportConfig};
use clipstream::wire::{decode_packet, Frame};
use clipstream::SimTime;
use common::checks::*;
use common::{pattern, split_early, stream_frames, Pipe};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn reliable_stream_is_byte_exact(case in transfer_case(30_000)) {
        reliable_is_byte_exact(case)?;
    }

    #[test]
    fn unreliable_data_is_sent_once(case in transfer_case(40_000)) {
        unreliable_sent_once(case)?;
    }

    #[test]
    fn zero_fill_matches_injected_losses(case in transfer_case(40_000)) {
        zero_fill_matches_losses(case)?;
    }

    #[test]
    fn window_never_exceeded(case in transfer_case(60_000), reliable in any::<bool>()) {
        window_respected(case, reliable)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_received_packet_is_acked(loss in 0.0f64..0.2, seed in any::<u64>(), len in 1usize..20_000) {
        let data = pattern(len, seed);
        let mut p = Pipe::new(loss, seed, TransportConfig::default());
        let (done, _) = transfer(&mut p, StreamClass::Reliable, &data);
        prop_assert!(done);
        // let trailing ACKs go out
        p.run(SimTime(p.now.0 + 1_000_000), |_, _, _| false);
        let received: BTreeSet<u64> = split_early(&p.delivered_fwd)
            .0
            .iter()
            .map(|d| decode_packet(d).unwrap())
            .filter(|(_, f)| f.iter().any(Frame::is_ack_eliciting))
            .map(|(h, _)| h.packet_number)
            .collect();
        let mut acked = BTreeSet::new();
        for d in &p.sent_rev {
            for f in decode_packet(d).unwrap().1 {
                if let Frame::Ack(a) = f {
                    for r in a.acked_ranges().unwrap() {
                        acked.extend(r);
                    }
                }
            }
        }
        prop_assert!(received.is_subset(&acked), "unacked {:?}", received.difference(&acked).collect::<Vec<_>>());
    }

    #[test]
    fn flow_control_respected(loss in 0.0f64..0.1, seed in any::<u64>(), len in 10_000usize..60_000) {
        let mut cfg = TransportConfig::default();
        cfg.params.initial_max_stream_data = 8 * 1024;
        cfg.params.initial_max_data = 12 * 1024;
        let data = pattern(len, seed);
        let mut p = Pipe::new(loss, seed, cfg.clone());
        let (done, t) = transfer(&mut p, StreamClass::Reliable, &data);
        prop_assert!(done);
        prop_assert_eq!(&t.got, &data);
        let id = t.id.unwrap();
        let mut limit = cfg.params.initial_max_stream_data;
        let mut sent_max: BTreeMap<u64, u64> = BTreeMap::new();
        for d in &p.sent_rev {
            for f in decode_packet(d).unwrap().1 {
                if let Frame::MaxStreamData { stream_id, limit: l } = f {
                    if stream_id == id.0 {
                        limit = limit.max(l);
                    }
                }
            }
        }
        for (pn, s) in stream_frames(&p.delivered_fwd) {
            if s.stream_id == id.0 {
                sent_max.insert(pn, s.end());
            }
        }
        prop_assert!(sent_max.values().all(|&e| e <= limit));
    }
}

#[test]
fn transfers_are_deterministic() {
    let run = || {
        let data = pattern(50_000, 9);
        let mut p = Pipe::new(0.05, 9, TransportConfig::default());
        transfer(&mut p, StreamClass::Unreliable, &data);
        (p.delivered_fwd, p.sent_rev, p.now)
    };
    assert_eq!(run(), run());
}
