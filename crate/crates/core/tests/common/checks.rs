//! Checks shared by the component suites and the acceptance gate.

use std::collections::BTreeSet;

use clipstream::fec::{fec_decode, fec_encode, FecError, FecParams};
use clipstream::netem::{Link, LinkConfig};
use clipstream::ranges::RangeSet;
use clipstream::transport::{StreamClass, StreamId, TransportConfig};
use clipstream::wire::{decode_ack_ranges, encode_ack_ranges, StreamFrame};
use clipstream::SimTime;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{pattern, split_early, stream_frames, Pipe};

pub const DEADLINE: SimTime = SimTime(3_000_000_000);

/// (loss, seed, length) for one lossy transfer.
pub fn transfer_case(max_len: usize) -> impl Strategy<Value = (f64, u64, usize)> {
    (0.0f64..0.2, any::<u64>(), 1usize..max_len)
}

pub fn ack_set() -> impl Strategy<Value = BTreeSet<u64>> {
    prop::collection::btree_set(any::<u64>().prop_map(|v| v >> 1), 1..33)
}

pub struct Transfer {
    pub id: Option<StreamId>,
    pub written: usize,
    pub got: Vec<u8>,
    pub zeros: RangeSet,
    pub fin: bool,
}

/// Sends `data` on one stream of the given class and reads it back.
pub fn transfer(p: &mut Pipe, class: StreamClass, data: &[u8]) -> (bool, Transfer) {
    let mut t = Transfer {
        id: None,
        written: 0,
        got: Vec::new(),
        zeros: RangeSet::new(),
        fin: false,
    };
    let done = p.run(DEADLINE, |server, client, now| {
        if server.is_established() && t.id.is_none() {
            t.id = Some(server.open_stream(class).unwrap());
        }
        if let Some(id) = t.id {
            if t.written < data.len() || t.written == 0 {
                t.written += server.stream_write(id, &data[t.written..], true).unwrap();
            }
            if client.stream_read_offset(id).is_some() {
                let r = client.stream_read(id, usize::MAX, now).unwrap();
                let base = t.got.len() as u64;
                for z in &r.zero_filled {
                    assert!(z.start >= base);
                    t.zeros.insert(z.clone());
                }
                t.got.extend_from_slice(&r.data);
                t.fin |= r.fin;
            }
        }
        t.fin
    });
    (done, t)
}

pub fn unreliable_ranges(frames: &[(u64, StreamFrame)], id: StreamId) -> Vec<(u64, u64)> {
    frames
        .iter()
        .filter(|(_, s)| s.stream_id == id.0 && !s.data.is_empty())
        .map(|(_, s)| (s.offset, s.end()))
        .collect()
}

pub fn reliable_is_byte_exact((loss, seed, len): (f64, u64, usize)) -> Result<(), TestCaseError> {
    let data = pattern(len, seed);
    let mut p = Pipe::new(loss, seed, TransportConfig::default());
    let (done, t) = transfer(&mut p, StreamClass::Reliable, &data);
    prop_assert!(done, "no fin by the deadline");
    prop_assert!(t.zeros.is_empty());
    prop_assert_eq!(t.got, data);
    prop_assert!(p.cwnd_violations.is_empty(), "{:?}", p.cwnd_violations);
    Ok(())
}

pub fn unreliable_sent_once((loss, seed, len): (f64, u64, usize)) -> Result<(), TestCaseError> {
    let data = pattern(len, seed);
    let mut p = Pipe::new(loss, seed, TransportConfig::default());
    let (done, t) = transfer(&mut p, StreamClass::Unreliable, &data);
    prop_assert!(done);
    let id = t.id.unwrap();
    let mut all = p.delivered_fwd.clone();
    all.extend(p.dropped_fwd.iter().cloned());
    let mut ranges = unreliable_ranges(&stream_frames(&all), id);
    ranges.sort();
    for w in ranges.windows(2) {
        prop_assert!(w[0].1 <= w[1].0, "overlap {:?} {:?}", w[0], w[1]);
    }
    prop_assert!(p.cwnd_violations.is_empty());
    Ok(())
}

pub fn zero_fill_matches_losses((loss, seed, len): (f64, u64, usize)) -> Result<(), TestCaseError> {
    let data = pattern(len, seed);
    let mut p = Pipe::new(loss, seed, TransportConfig::default());
    let (done, t) = transfer(&mut p, StreamClass::Unreliable, &data);
    prop_assert!(done);
    let id = t.id.unwrap();
    let mut gone = p.dropped_fwd.clone();
    gone.extend(split_early(&p.delivered_fwd).1);
    let mut lost = RangeSet::new();
    for (a, b) in unreliable_ranges(&stream_frames(&gone), id) {
        lost.insert(a..b);
    }
    prop_assert_eq!(t.zeros.iter().collect::<Vec<_>>(), lost.iter().collect::<Vec<_>>());
    prop_assert_eq!(t.got.len(), data.len());
    for (i, (&g, &d)) in t.got.iter().zip(&data).enumerate() {
        let zeroed = t.zeros.contains(i as u64);
        prop_assert_eq!(g, if zeroed { 0 } else { d });
    }
    Ok(())
}

pub fn window_respected((loss, seed, len): (f64, u64, usize), reliable: bool) -> Result<(), TestCaseError> {
    let data = pattern(len, seed);
    let mut p = Pipe::new(loss, seed, TransportConfig::default());
    let class = if reliable {
        StreamClass::Reliable
    } else {
        StreamClass::Unreliable
    };
    let (done, _) = transfer(&mut p, class, &data);
    prop_assert!(done);
    prop_assert!(p.cwnd_violations.is_empty(), "{:?}", p.cwnd_violations);
    Ok(())
}

pub fn ack_roundtrip(set: BTreeSet<u64>) -> Result<(), TestCaseError> {
    let ack = encode_ack_ranges(&set, 32).unwrap();
    prop_assert_eq!(ack.largest_acked, *set.iter().next_back().unwrap());
    prop_assert_eq!(decode_ack_ranges(&ack).unwrap(), set);
    Ok(())
}

/// Every erasure pattern for k <= 8, m <= 4. Returns the number of
/// patterns tried.
pub fn mds_exhaustive() -> Result<u64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shard = 16;
    let mut patterns = 0u64;
    for k in 1..=8usize {
        for m in 0..=4usize {
            let params = FecParams::new(k, m, shard).map_err(|e| e.to_string())?;
            let len = k * shard - rng.gen_range(0..shard);
            let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let full = fec_encode(&payload, &params).map_err(|e| e.to_string())?;
            for (i, s) in full.shards[..k].iter().enumerate() {
                let s = s.as_ref().unwrap();
                let start = (i * shard).min(len);
                let end = ((i + 1) * shard).min(len);
                if s[..end - start] != payload[start..end] {
                    return Err(format!("k={k} m={m}: shard {i} is not systematic"));
                }
            }
            let n = k + m;
            for mask in 0u32..(1 << n) {
                let erased = mask.count_ones() as usize;
                let mut set = full.clone();
                for i in 0..n {
                    if mask & (1 << i) != 0 {
                        set.shards[i] = None;
                    }
                }
                let got = fec_decode(&set, &params);
                let ok = if erased <= m {
                    got.as_deref() == Ok(&payload[..])
                } else {
                    matches!(got, Err(FecError::InsufficientShards { .. }))
                };
                if !ok {
                    return Err(format!("k={k} m={m} mask={mask:b}"));
                }
                patterns += 1;
            }
        }
    }
    Ok(patterns)
}

/// Pushes `packets` small packets through a lossy link without queueing
/// and returns (randomly lost, delivered).
pub fn drop_count(loss: f64, seed: u64, packets: u64) -> (u64, u64) {
    let mut link = Link::new(LinkConfig {
        loss_rate: loss,
        seed,
        ..LinkConfig::default()
    })
    .unwrap();
    let mut now = SimTime::ZERO;
    for _ in 0..packets {
        link.push(vec![0; 64], now);
        now = SimTime(now.0 + 30);
        link.poll(now);
    }
    let s = link.stats();
    assert_eq!(s.tail_drops, 0);
    assert_eq!(s.accepted, packets);
    (s.random_losses, s.delivered + link.poll(SimTime::MAX).len() as u64)
}

/// Whether `lost` of `n` lies within three binomial standard deviations.
pub fn within_3_sigma(loss: f64, lost: u64, n: u64) -> bool {
    let mean = n as f64 * loss;
    let sigma = (n as f64 * loss * (1.0 - loss)).sqrt();
    (lost as f64 - mean).abs() <= 3.0 * sigma
}
