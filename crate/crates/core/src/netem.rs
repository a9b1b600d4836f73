//! Deterministic bottleneck link: fixed-rate serialization behind a
//! drop-tail FIFO, constant propagation delay and i.i.d. Bernoulli loss
//! applied to packets as they leave the queue.

use std::collections::VecDeque;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimTime;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkConfigError {
    #[error("rate must be positive")]
    ZeroRate,
    #[error("buffer capacity must be at least one packet")]
    ZeroBuffer,
    #[error("loss rate {0} outside [0, 1]")]
    LossRate(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    /// Bottleneck rate in bits per second.
    pub rate_bps: u64,
    /// Propagation delay in each direction.
    pub one_way_delay: Duration,
    /// Drop-tail queue capacity in packets.
    pub buffer_capacity: usize,
    pub loss_rate: f64,
    pub seed: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            rate_bps: 20_000_000,
            one_way_delay: Duration::from_millis(15),
            buffer_capacity: 1000,
            loss_rate: 0.0,
            seed: 0,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), LinkConfigError> {
        if self.rate_bps == 0 {
            return Err(LinkConfigError::ZeroRate);
        }
        if self.buffer_capacity == 0 {
            return Err(LinkConfigError::ZeroBuffer);
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err(LinkConfigError::LossRate(self.loss_rate));
        }
        Ok(())
    }

    /// Time to clock `bytes` onto the wire, in nanoseconds.
    pub fn serialization_nanos(&self, bytes: usize) -> u64 {
        ((bytes as u128 * 8 * 1_000_000_000).div_ceil(self.rate_bps as u128)) as u64
    }

    pub fn serialization_time(&self, bytes: usize) -> Duration {
        Duration::from_nanos(self.serialization_nanos(bytes))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkStats {
    pub accepted: u64,
    pub tail_drops: u64,
    pub random_losses: u64,
    pub delivered: u64,
    pub bytes_accepted: u64,
}

#[derive(Debug)]
struct InFlight {
    datagram: Vec<u8>,
    deliver_at: SimTime,
}

/// One direction of the emulated path.
#[derive(Debug)]
pub struct Link {
    cfg: LinkConfig,
    rng: ChaCha8Rng,
    /// Departure instants (ns) of packets still occupying the buffer.
    queued: VecDeque<u64>,
    busy_until_ns: u64,
    in_flight: VecDeque<InFlight>,
    stats: LinkStats,
}

impl Link {
    pub fn new(cfg: LinkConfig) -> Result<Self, LinkConfigError> {
        cfg.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            queued: VecDeque::new(),
            busy_until_ns: 0,
            in_flight: VecDeque::new(),
            stats: LinkStats::default(),
        })
    }

    pub fn config(&self) -> &LinkConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &LinkStats {
        &self.stats
    }

    /// Packets waiting for or undergoing serialization at `now`.
    pub fn queue_len(&mut self, now: SimTime) -> usize {
        let now_ns = now.as_micros() * 1000;
        while self.queued.front().is_some_and(|&d| d <= now_ns) {
            self.queued.pop_front();
        }
        self.queued.len()
    }

    /// Offers a datagram to the link. Returns false on a tail drop; random
    /// wire loss is silent.
    pub fn push(&mut self, datagram: Vec<u8>, now: SimTime) -> bool {
        if self.queue_len(now) >= self.cfg.buffer_capacity {
            self.stats.tail_drops += 1;
            return false;
        }
        let now_ns = now.as_micros() * 1000;
        let departure = self.busy_until_ns.max(now_ns) + self.cfg.serialization_nanos(datagram.len());
        self.busy_until_ns = departure;
        self.queued.push_back(departure);
        self.stats.accepted += 1;
        self.stats.bytes_accepted += datagram.len() as u64;

        // FIFO departures keep draw order identical to departure order.
        let lost = self.cfg.loss_rate > 0.0 && self.rng.gen_bool(self.cfg.loss_rate);
        if lost {
            self.stats.random_losses += 1;
            return true;
        }
        let deliver_ns = departure + self.cfg.one_way_delay.as_nanos() as u64;
        self.in_flight.push_back(InFlight {
            datagram,
            deliver_at: SimTime::from_micros(deliver_ns.div_ceil(1000)),
        });
        true
    }

    /// Removes and returns every datagram due at or before `now`, in
    /// delivery order.
    pub fn poll(&mut self, now: SimTime) -> Vec<(Vec<u8>, SimTime)> {
        let mut out = Vec::new();
        while self.in_flight.front().is_some_and(|p| p.deliver_at <= now) {
            let p = self.in_flight.pop_front().unwrap();
            out.push((p.datagram, p.deliver_at));
        }
        self.stats.delivered += out.len() as u64;
        out
    }

    pub fn next_delivery(&self) -> Option<SimTime> {
        self.in_flight.front().map(|p| p.deliver_at)
    }

    pub fn is_idle(&self) -> bool {
        self.in_flight.is_empty()
    }
}

/// A pair of links forming a bidirectional path.
#[derive(Debug)]
pub struct DuplexLink {
    pub forward: Link,
    pub reverse: Link,
}

impl DuplexLink {
    /// Both directions share the configuration; the reverse direction gets
    /// a derived seed so the two loss processes are independent.
    pub fn new(cfg: LinkConfig) -> Result<Self, LinkConfigError> {
        let mut reverse = cfg.clone();
        reverse.seed = cfg.seed ^ 0x9E37_79B9_7F4A_7C15;
        Ok(Self {
            forward: Link::new(cfg)?,
            reverse: Link::new(reverse)?,
        })
    }
}

/// Earliest pending event across the links and the endpoints' timers.
pub fn next_event_time<'a>(
    links: impl IntoIterator<Item = &'a Link>,
    timers: impl IntoIterator<Item = Option<SimTime>>,
) -> Option<SimTime> {
    links
        .into_iter()
        .filter_map(Link::next_delivery)
        .chain(timers.into_iter().flatten())
        .min()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(loss: f64) -> Link {
        Link::new(LinkConfig {
            loss_rate: loss,
            ..LinkConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn single_packet_timing() {
        let mut l = link(0.0);
        let t0 = SimTime::from_millis(1);
        assert!(l.push(vec![0; 1500], t0));
        assert_eq!(l.config().serialization_time(1500), Duration::from_micros(600));
        assert!(l.poll(t0).is_empty());
        let due = t0 + Duration::from_micros(600) + Duration::from_millis(15);
        assert_eq!(l.next_delivery(), Some(due));
        let got = l.poll(due);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].1, due);
        assert!(l.poll(due).is_empty());
    }

    #[test]
    fn back_to_back_fifo_spacing() {
        let mut l = link(0.0);
        l.push(vec![1; 1500], SimTime::ZERO);
        l.push(vec![2; 1500], SimTime::ZERO);
        let got = l.poll(SimTime::from_millis(100));
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].0[0], 1);
        assert_eq!(got[1].1 - got[0].1, Duration::from_micros(600));
    }

    #[test]
    fn tail_drop_at_capacity() {
        let mut l = link(0.0);
        for _ in 0..1000 {
            assert!(l.push(vec![0; 1500], SimTime::ZERO));
        }
        assert!(!l.push(vec![0; 1500], SimTime::ZERO));
        assert_eq!(l.stats().tail_drops, 1);
        // one departure frees one slot
        assert!(l.push(vec![0; 1500], SimTime::from_micros(600)));
    }

    #[test]
    fn total_loss_delivers_nothing() {
        let mut l = link(1.0);
        for i in 0..100 {
            l.push(vec![0; 100], SimTime::from_millis(i));
        }
        assert!(l.poll(SimTime::from_millis(10_000)).is_empty());
        assert!(l.is_idle());
    }

    #[test]
    fn next_event_is_minimum() {
        assert_eq!(next_event_time([&link(0.0)], [None]), None);
        let mut l = link(0.0);
        l.push(vec![0; 1], SimTime::ZERO);
        let d = l.next_delivery().unwrap();
        assert_eq!(next_event_time([&l], [None]), Some(d));
        let mut late = Link::new(LinkConfig {
            one_way_delay: Duration::from_millis(5),
            ..LinkConfig::default()
        })
        .unwrap();
        late.push(vec![0; 1], SimTime::ZERO);
        assert_eq!(
            next_event_time([&late], [Some(SimTime::from_millis(3))]),
            Some(SimTime::from_millis(3))
        );
    }
}
