#![allow(dead_code)]

pub mod checks;

use std::time::Duration;

use clipstream::netem::{next_event_time, Link, LinkConfig};
use clipstream::transport::{Connection, Side, TransportConfig};
use clipstream::wire::{decode_packet, Frame};
use clipstream::SimTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Client and server over lossless links, with loss drawn here so the test
/// knows exactly which datagrams vanished.
pub struct Pipe {
    pub client: Connection,
    pub server: Connection,
    pub fwd: Link,
    pub rev: Link,
    rng: ChaCha8Rng,
    pub loss: f64,
    pub now: SimTime,
    pub delivered_fwd: Vec<Vec<u8>>,
    pub dropped_fwd: Vec<Vec<u8>>,
    pub sent_rev: Vec<Vec<u8>>,
    pub cwnd_violations: Vec<(u64, u64)>,
}

impl Pipe {
    pub fn new(loss: f64, seed: u64, cfg: TransportConfig) -> Self {
        Self {
            client: Connection::new(Side::Client, cfg.clone()),
            server: Connection::new(Side::Server, cfg),
            fwd: Link::new(LinkConfig::default()).unwrap(),
            rev: Link::new(LinkConfig::default()).unwrap(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            loss,
            now: SimTime::ZERO,
            delivered_fwd: Vec::new(),
            dropped_fwd: Vec::new(),
            sent_rev: Vec::new(),
            cwnd_violations: Vec::new(),
        }
    }

    /// Drives both endpoints until `app` reports completion or the virtual
    /// deadline passes. `app` gets (server, client, now).
    pub fn run(
        &mut self,
        deadline: SimTime,
        mut app: impl FnMut(&mut Connection, &mut Connection, SimTime) -> bool,
    ) -> bool {
        loop {
            let now = self.now;
            for (d, _) in self.fwd.poll(now) {
                self.client.on_datagram(&d, now);
            }
            for (d, _) in self.rev.poll(now) {
                self.server.on_datagram(&d, now);
            }
            for c in [&mut self.client, &mut self.server] {
                if c.next_timeout().is_some_and(|t| t <= now) {
                    c.on_timeout(now);
                }
            }
            if app(&mut self.server, &mut self.client, now) {
                return true;
            }
            let out = self.server.poll_transmit(now);
            let eliciting = out
                .iter()
                .any(|d| decode_packet(d).unwrap().1.iter().any(Frame::is_ack_eliciting));
            let cc = self.server.congestion();
            if eliciting && cc.bytes_in_flight > cc.cwnd {
                self.cwnd_violations.push((cc.bytes_in_flight, cc.cwnd));
            }
            for d in out {
                if self.rng.gen_bool(self.loss) {
                    self.dropped_fwd.push(d);
                } else {
                    self.delivered_fwd.push(d.clone());
                    self.fwd.push(d, now);
                }
            }
            for d in self.client.poll_transmit(now) {
                self.sent_rev.push(d.clone());
                if !self.rng.gen_bool(self.loss) {
                    self.rev.push(d, now);
                }
            }
            let next = next_event_time(
                [&self.fwd, &self.rev],
                [self.client.next_timeout(), self.server.next_timeout()],
            );
            match next {
                Some(t) if t <= deadline => self.now = t.max(now + Duration::from_micros(1)),
                _ => return false,
            }
        }
    }
}

pub fn pattern(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    (0..len).map(|_| rng.gen()).collect()
}

/// Stream frames carried by a set of datagrams.
pub fn stream_frames(datagrams: &[Vec<u8>]) -> Vec<(u64, clipstream::wire::StreamFrame)> {
    let mut out = Vec::new();
    for d in datagrams {
        let (h, frames) = decode_packet(d).unwrap();
        for f in frames {
            if let Frame::Stream(s) = f {
                out.push((h.packet_number, s));
            }
        }
    }
    out
}

/// Splits delivered datagrams into those the client processed and those it
/// discarded for arriving with stream data ahead of the handshake.
pub fn split_early(delivered: &[Vec<u8>]) -> (Vec<Vec<u8>>, Vec<Vec<u8>>) {
    let mut established = false;
    let (mut processed, mut early) = (Vec::new(), Vec::new());
    for d in delivered {
        let frames = decode_packet(d).unwrap().1;
        let hs = frames.iter().any(|f| matches!(f, Frame::Handshake { .. }));
        let data = frames.iter().any(|f| matches!(f, Frame::Stream(_)));
        if !established && !hs && data {
            early.push(d.clone());
        } else {
            established |= hs;
            processed.push(d.clone());
        }
    }
    (processed, early)
}
