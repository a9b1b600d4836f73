//! QUIC-style connection with reliable and unreliable streams.
//!
//! Congestion control and acknowledgments work per packet; retransmission
//! is decided per stream. Data lost on an unreliable stream is never
//! resent: the sender moves on to new data and the receiver fills the hole
//! with zeros once it is declared lost. End-of-stream markers are resent on
//! every stream.
//!
//! The connection is a sans-IO state machine: every entry point takes the
//! current virtual time and nothing happens between calls.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::ops::Range;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranges::RangeSet;
use crate::time::SimTime;
use crate::wire::{
    self, AckFrame, Frame, PacketHeader, StreamFrame, WireConfig, ACK_FRAME_OVERHEAD, ACK_RANGE_LEN, FLAG_HANDSHAKE,
    STREAM_FRAME_OVERHEAD,
};

pub const PARAM_UNRELIABLE_SUPPORTED: u8 = 0x01;
pub const PARAM_INITIAL_MAX_DATA: u8 = 0x02;
pub const PARAM_INITIAL_MAX_STREAM_DATA: u8 = 0x03;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("peer speaks version {peer}, we speak {local}")]
    VersionMismatch { local: u8, peer: u8 },
    #[error("unreliable streams were not negotiated")]
    UnreliableNotNegotiated,
    #[error("stream id space exhausted")]
    StreamsExhausted,
    #[error("stream {0} is closed for writing")]
    StreamClosed(StreamId),
    #[error("unknown stream {0}")]
    UnknownStream(StreamId),
    #[error("connection not established")]
    NotEstablished,
}

/// Stream identifier. Even ids are reliable, odd ids unreliable; id 0 is
/// the reliable control stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StreamId(pub u32);

impl StreamId {
    pub const CONTROL: StreamId = StreamId(0);

    pub fn is_reliable(self) -> bool {
        self.0 & 1 == 0
    }

    pub fn class(self) -> StreamClass {
        if self.is_reliable() {
            StreamClass::Reliable
        } else {
            StreamClass::Unreliable
        }
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamClass {
    Reliable,
    Unreliable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportParams {
    pub version: u8,
    pub unreliable_supported: bool,
    pub initial_max_data: u64,
    pub initial_max_stream_data: u64,
    /// Bytes received past a hole before the hole counts as lost.
    pub reorder_window: u64,
    /// Age after which a hole counts as lost.
    pub reorder_timeout: Duration,
}

impl Default for TransportParams {
    fn default() -> Self {
        Self {
            version: wire::VERSION,
            unreliable_supported: true,
            initial_max_data: 16 << 20,
            initial_max_stream_data: 8 << 20,
            reorder_window: 4200,
            reorder_timeout: Duration::from_millis(60),
        }
    }
}

impl TransportParams {
    fn to_wire(&self) -> Vec<(u8, Vec<u8>)> {
        vec![
            (PARAM_UNRELIABLE_SUPPORTED, vec![u8::from(self.unreliable_supported)]),
            (PARAM_INITIAL_MAX_DATA, self.initial_max_data.to_be_bytes().to_vec()),
            (
                PARAM_INITIAL_MAX_STREAM_DATA,
                self.initial_max_stream_data.to_be_bytes().to_vec(),
            ),
        ]
    }

    /// Peer parameters from a HANDSHAKE frame. Unknown tags are skipped;
    /// missing ones default to "unsupported" and zero credit.
    fn from_wire(params: &[(u8, Vec<u8>)]) -> Self {
        let mut p = TransportParams {
            unreliable_supported: false,
            initial_max_data: 0,
            initial_max_stream_data: 0,
            ..TransportParams::default()
        };
        let as_u64 = |v: &[u8]| v.try_into().ok().map(u64::from_be_bytes);
        for (tag, value) in params {
            match *tag {
                PARAM_UNRELIABLE_SUPPORTED => p.unreliable_supported = value.first() == Some(&1),
                PARAM_INITIAL_MAX_DATA => p.initial_max_data = as_u64(value).unwrap_or(0),
                PARAM_INITIAL_MAX_STREAM_DATA => p.initial_max_stream_data = as_u64(value).unwrap_or(0),
                _ => {}
            }
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegotiatedParams {
    pub unreliable_supported: bool,
    pub initiator_max_data: u64,
    pub initiator_max_stream_data: u64,
    pub responder_max_data: u64,
    pub responder_max_stream_data: u64,
}

/// Unreliable streams are usable only when both sides offer them; flow
/// limits are whatever each side advertised.
pub fn handshake(initiator: &TransportParams, responder: &TransportParams) -> Result<NegotiatedParams, TransportError> {
    if initiator.version != responder.version {
        return Err(TransportError::VersionMismatch {
            local: initiator.version,
            peer: responder.version,
        });
    }
    Ok(NegotiatedParams {
        unreliable_supported: initiator.unreliable_supported && responder.unreliable_supported,
        initiator_max_data: initiator.initial_max_data,
        initiator_max_stream_data: initiator.initial_max_stream_data,
        responder_max_data: responder.initial_max_data,
        responder_max_stream_data: responder.initial_max_stream_data,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportConfig {
    pub wire: WireConfig,
    pub params: TransportParams,
    pub connection_id: u64,
    pub max_ack_delay: Duration,
    /// Acknowledge immediately once this many ack-eliciting packets wait.
    pub ack_eliciting_threshold: u32,
    pub packet_threshold: u64,
    /// Time threshold as a multiple of the RTT: numerator / denominator.
    pub time_threshold: (u32, u32),
    pub initial_rtt: Duration,
    pub initial_window_packets: u64,
    pub min_window_packets: u64,
    /// Leave slow start when round-trip times start climbing.
    pub hystart: bool,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            wire: WireConfig::default(),
            params: TransportParams::default(),
            connection_id: 0,
            max_ack_delay: Duration::from_millis(25),
            ack_eliciting_threshold: 2,
            packet_threshold: 3,
            time_threshold: (9, 8),
            initial_rtt: Duration::from_millis(100),
            initial_window_packets: 32,
            min_window_packets: 2,
            hystart: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Client,
    Server,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Connected,
    StreamOpened(StreamId),
    StreamReadable(StreamId),
}

/// A byte range of one stream carried by a sent packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentRange {
    pub stream_id: StreamId,
    pub offset: u64,
    pub length: u64,
    pub fin: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentPacketRecord {
    pub packet_number: u64,
    pub send_time: SimTime,
    pub size: usize,
    pub ranges: Vec<SentRange>,
    pub ack_eliciting: bool,
    handshake: bool,
    max_data: bool,
    max_stream_data: Vec<StreamId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CongestionState {
    pub cwnd: u64,
    pub ssthresh: u64,
    pub srtt: Duration,
    pub rttvar: Duration,
    pub bytes_in_flight: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionStats {
    pub packets_sent: u64,
    pub bytes_sent: u64,
    pub packets_received: u64,
    pub packets_acked: u64,
    pub packets_lost: u64,
    pub pto_count: u64,
    pub stream_bytes_sent: u64,
    pub stream_bytes_retransmitted: u64,
    pub unreliable_bytes_lost: u64,
    pub malformed_dropped: u64,
    pub early_dropped: u64,
    pub duplicate_packets: u64,
    pub acks_sent: u64,
}

/// Result of a stream read.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReadOutcome {
    pub data: Vec<u8>,
    /// Stream offsets handed out as zeros because they were declared lost.
    pub zero_filled: Vec<Range<u64>>,
    /// The read reached the end-of-stream marker.
    pub fin: bool,
}

#[derive(Debug)]
struct SendStream {
    reliable: bool,
    buf: VecDeque<u8>,
    buf_base: u64,
    write_offset: u64,
    send_offset: u64,
    fin_offset: Option<u64>,
    fin_sent: bool,
    fin_acked: bool,
    fin_lost: bool,
    acked: RangeSet,
    retransmit: RangeSet,
    lost: RangeSet,
    peer_limit: u64,
}

impl SendStream {
    fn new(reliable: bool, peer_limit: u64) -> Self {
        Self {
            reliable,
            buf: VecDeque::new(),
            buf_base: 0,
            write_offset: 0,
            send_offset: 0,
            fin_offset: None,
            fin_sent: false,
            fin_acked: false,
            fin_lost: false,
            acked: RangeSet::new(),
            retransmit: RangeSet::new(),
            lost: RangeSet::new(),
            peer_limit,
        }
    }

    fn copy_out(&self, offset: u64, len: usize, out: &mut Vec<u8>) {
        let start = (offset - self.buf_base) as usize;
        let (a, b) = self.buf.as_slices();
        let end = start + len;
        if end <= a.len() {
            out.extend_from_slice(&a[start..end]);
        } else if start >= a.len() {
            out.extend_from_slice(&b[start - a.len()..end - a.len()]);
        } else {
            out.extend_from_slice(&a[start..]);
            out.extend_from_slice(&b[..end - a.len()]);
        }
    }

    fn release(&mut self) {
        let keep_from = if self.reliable {
            match self.acked.range_containing(self.buf_base) {
                Some(r) => r.end,
                None => self.buf_base,
            }
        } else {
            self.send_offset
        };
        let drop = (keep_from.saturating_sub(self.buf_base) as usize).min(self.buf.len());
        if drop > 0 {
            self.buf.drain(..drop);
            self.buf_base += drop as u64;
        }
        if self.reliable {
            self.acked.remove_below(self.buf_base.saturating_sub(1));
        }
    }

    fn has_new(&self) -> bool {
        self.send_offset < self.write_offset || (self.fin_offset.is_some() && !self.fin_sent)
    }

    fn has_retransmit(&self) -> bool {
        !self.retransmit.is_empty() || (self.fin_lost && !self.fin_acked)
    }

    fn unsent(&self) -> u64 {
        self.write_offset - self.send_offset
    }
}

#[derive(Debug)]
struct Chunk {
    data: Vec<u8>,
    arrived: SimTime,
}

#[derive(Debug)]
struct RecvStream {
    reliable: bool,
    chunks: BTreeMap<u64, Chunk>,
    read_offset: u64,
    highest_received: u64,
    fin_offset: Option<u64>,
    local_limit: u64,
    zero_filled: RangeSet,
}

impl RecvStream {
    fn new(reliable: bool, local_limit: u64) -> Self {
        Self {
            reliable,
            chunks: BTreeMap::new(),
            read_offset: 0,
            highest_received: 0,
            fin_offset: None,
            local_limit,
            zero_filled: RangeSet::new(),
        }
    }

    fn insert(&mut self, offset: u64, data: &[u8], now: SimTime) -> bool {
        let end = offset + data.len() as u64;
        self.highest_received = self.highest_received.max(end);
        let start = offset.max(self.read_offset);
        if start >= end {
            return false;
        }
        // holes in [start, end) not already buffered
        let mut holes = Vec::new();
        let mut cursor = start;
        if let Some((&s, c)) = self.chunks.range(..=cursor).next_back() {
            cursor = cursor.max(s + c.data.len() as u64);
        }
        if cursor >= end {
            return false;
        }
        for (&s, c) in self.chunks.range(cursor..end) {
            if s > cursor {
                holes.push(cursor..s);
            }
            cursor = cursor.max(s + c.data.len() as u64);
        }
        if cursor < end {
            holes.push(cursor..end);
        }
        let stored = !holes.is_empty();
        for h in holes {
            let slice = &data[(h.start - offset) as usize..(h.end - offset) as usize];
            self.chunks.insert(
                h.start,
                Chunk {
                    data: slice.to_vec(),
                    arrived: now,
                },
            );
        }
        stored
    }

    /// When the hole at the read offset becomes consumable, if it is bounded.
    fn hole_deadline(&self, reorder_timeout: Duration) -> Option<SimTime> {
        if self.reliable || self.chunks.contains_key(&self.read_offset) {
            return None;
        }
        self.chunks
            .range(self.read_offset..)
            .next()
            .map(|(_, c)| c.arrived + reorder_timeout)
    }

    fn is_finished(&self) -> bool {
        self.fin_offset == Some(self.read_offset)
    }
}

#[derive(Debug, Clone, Copy)]
struct RttEstimator {
    latest: Duration,
    smoothed: Duration,
    var: Duration,
    min: Duration,
    has_sample: bool,
}

impl RttEstimator {
    fn new(initial: Duration) -> Self {
        Self {
            latest: initial,
            smoothed: initial,
            var: initial / 2,
            min: initial,
            has_sample: false,
        }
    }

    fn update(&mut self, sample: Duration, ack_delay: Duration) {
        self.latest = sample;
        if !self.has_sample {
            self.has_sample = true;
            self.min = sample;
            self.smoothed = sample;
            self.var = sample / 2;
            return;
        }
        self.min = self.min.min(sample);
        let adjusted = if sample >= self.min + ack_delay {
            sample - ack_delay
        } else {
            sample
        };
        let diff = self.smoothed.abs_diff(adjusted);
        self.var = (self.var * 3 + diff) / 4;
        self.smoothed = (self.smoothed * 7 + adjusted) / 8;
    }
}

#[derive(Debug, Clone, Copy)]
struct HyStart {
    round_end: u64,
    last_round_min: Option<Duration>,
    current_round_min: Option<Duration>,
    samples: u32,
}

#[derive(Debug)]
pub struct Connection {
    side: Side,
    cfg: TransportConfig,
    established: bool,
    peer_params: Option<TransportParams>,
    negotiated_unreliable: bool,
    handshake_pending: bool,
    handshake_acked: bool,

    next_pn: u64,
    sent: BTreeMap<u64, SentPacketRecord>,
    eliciting_in_flight: usize,
    largest_acked: Option<u64>,
    loss_time: Option<SimTime>,
    pto_backoff: u32,
    last_eliciting_sent: Option<SimTime>,
    probe_pending: bool,
    rtt: RttEstimator,

    cwnd: u64,
    ssthresh: u64,
    bytes_in_flight: u64,
    recovery_start: Option<SimTime>,
    ca_acc: u64,
    hystart: HyStart,

    received: RangeSet,
    largest_received: Option<(u64, SimTime)>,
    eliciting_unacked: u32,
    ack_deadline: Option<SimTime>,

    send_streams: BTreeMap<StreamId, SendStream>,
    recv_streams: BTreeMap<StreamId, RecvStream>,
    sendable: BTreeSet<StreamId>,
    retransmittable: BTreeSet<StreamId>,
    rr_cursor: Option<StreamId>,
    next_reliable: u64,
    next_unreliable: u64,

    peer_max_data: u64,
    written_total: u64,
    local_max_data: u64,
    consumed_total: u64,
    max_data_pending: bool,
    max_stream_data_pending: BTreeSet<StreamId>,

    last_now: SimTime,
    stats: ConnectionStats,
}

impl Connection {
    /// A client queues its handshake immediately; a server waits for one.
    pub fn new(side: Side, cfg: TransportConfig) -> Self {
        let mds = cfg.wire.max_datagram() as u64;
        let local_max_data = cfg.params.initial_max_data;
        Self {
            side,
            established: false,
            peer_params: None,
            negotiated_unreliable: false,
            handshake_pending: side == Side::Client,
            handshake_acked: false,
            next_pn: 0,
            sent: BTreeMap::new(),
            eliciting_in_flight: 0,
            largest_acked: None,
            loss_time: None,
            pto_backoff: 0,
            last_eliciting_sent: None,
            probe_pending: false,
            rtt: RttEstimator::new(cfg.initial_rtt),
            cwnd: cfg.initial_window_packets * mds,
            ssthresh: u64::MAX,
            bytes_in_flight: 0,
            recovery_start: None,
            ca_acc: 0,
            hystart: HyStart {
                round_end: 0,
                last_round_min: None,
                current_round_min: None,
                samples: 0,
            },
            received: RangeSet::new(),
            largest_received: None,
            eliciting_unacked: 0,
            ack_deadline: None,
            send_streams: BTreeMap::new(),
            recv_streams: BTreeMap::new(),
            sendable: BTreeSet::new(),
            retransmittable: BTreeSet::new(),
            rr_cursor: None,
            next_reliable: 2,
            next_unreliable: 1,
            peer_max_data: 0,
            written_total: 0,
            local_max_data,
            consumed_total: 0,
            max_data_pending: false,
            max_stream_data_pending: BTreeSet::new(),
            last_now: SimTime::ZERO,
            stats: ConnectionStats::default(),
            cfg,
        }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn config(&self) -> &TransportConfig {
        &self.cfg
    }

    pub fn is_established(&self) -> bool {
        self.established
    }

    pub fn unreliable_negotiated(&self) -> bool {
        self.negotiated_unreliable
    }

    pub fn stats(&self) -> &ConnectionStats {
        &self.stats
    }

    pub fn congestion(&self) -> CongestionState {
        CongestionState {
            cwnd: self.cwnd,
            ssthresh: self.ssthresh,
            srtt: self.rtt.smoothed,
            rttvar: self.rtt.var,
            bytes_in_flight: self.bytes_in_flight,
        }
    }

    fn max_datagram(&self) -> u64 {
        self.cfg.wire.max_datagram() as u64
    }

    fn min_window(&self) -> u64 {
        self.cfg.min_window_packets * self.max_datagram()
    }

    // ---- streams -------------------------------------------------------

    fn create_stream(&mut self, id: StreamId) {
        let reliable = id.is_reliable();
        let peer_limit = self.peer_params.as_ref().map_or(0, |p| p.initial_max_stream_data);
        let local_limit = self.cfg.params.initial_max_stream_data;
        self.send_streams
            .entry(id)
            .or_insert_with(|| SendStream::new(reliable, peer_limit));
        self.recv_streams
            .entry(id)
            .or_insert_with(|| RecvStream::new(reliable, local_limit));
    }

    /// The reserved reliable control stream, id 0.
    pub fn open_control_stream(&mut self) -> Result<StreamId, TransportError> {
        if !self.established {
            return Err(TransportError::NotEstablished);
        }
        self.create_stream(StreamId::CONTROL);
        Ok(StreamId::CONTROL)
    }

    pub fn open_stream(&mut self, class: StreamClass) -> Result<StreamId, TransportError> {
        if !self.established {
            return Err(TransportError::NotEstablished);
        }
        if class == StreamClass::Unreliable && !self.negotiated_unreliable {
            return Err(TransportError::UnreliableNotNegotiated);
        }
        let counter = match class {
            StreamClass::Reliable => &mut self.next_reliable,
            StreamClass::Unreliable => &mut self.next_unreliable,
        };
        loop {
            if *counter > u32::MAX as u64 {
                return Err(TransportError::StreamsExhausted);
            }
            let id = StreamId(*counter as u32);
            *counter += 2;
            if !self.send_streams.contains_key(&id) {
                self.create_stream(id);
                return Ok(id);
            }
        }
    }

    /// Bytes the peer still lets us write on `id`.
    pub fn stream_credit(&self, id: StreamId) -> u64 {
        match self.send_streams.get(&id) {
            Some(s) => s
                .peer_limit
                .saturating_sub(s.write_offset)
                .min(self.peer_max_data.saturating_sub(self.written_total)),
            None => 0,
        }
    }

    /// Written but never transmitted bytes on `id`.
    pub fn stream_unsent(&self, id: StreamId) -> u64 {
        self.send_streams.get(&id).map_or(0, SendStream::unsent)
    }

    pub fn stream_write(&mut self, id: StreamId, data: &[u8], fin: bool) -> Result<usize, TransportError> {
        let credit = self.stream_credit(id);
        let s = self
            .send_streams
            .get_mut(&id)
            .ok_or(TransportError::UnknownStream(id))?;
        if s.fin_offset.is_some() {
            return Err(TransportError::StreamClosed(id));
        }
        let n = (data.len() as u64).min(credit) as usize;
        s.buf.extend(&data[..n]);
        s.write_offset += n as u64;
        self.written_total += n as u64;
        if fin && n == data.len() {
            s.fin_offset = Some(s.write_offset);
        }
        if s.has_new() {
            self.sendable.insert(id);
        }
        Ok(n)
    }

    /// Lost ranges recorded on an unreliable send stream.
    pub fn stream_lost_ranges(&self, id: StreamId) -> Vec<Range<u64>> {
        self.send_streams
            .get(&id)
            .map(|s| s.lost.iter().collect())
            .unwrap_or_default()
    }

    /// Everything written on `id`, including the end marker, is acknowledged
    /// (reliable) or has been sent (unreliable data, acknowledged fin).
    pub fn stream_send_complete(&self, id: StreamId) -> bool {
        self.send_streams.get(&id).is_some_and(|s| {
            s.fin_acked
                && if s.reliable {
                    s.acked.contains_range(s.buf_base.min(s.write_offset)..s.write_offset)
                        || s.buf_base >= s.write_offset
                } else {
                    s.send_offset == s.write_offset
                }
        })
    }

    pub fn stream_ids(&self) -> impl Iterator<Item = StreamId> + '_ {
        self.recv_streams.keys().copied()
    }

    pub fn stream_read_offset(&self, id: StreamId) -> Option<u64> {
        self.recv_streams.get(&id).map(|r| r.read_offset)
    }

    pub fn stream_is_finished(&self, id: StreamId) -> bool {
        self.recv_streams.get(&id).is_some_and(RecvStream::is_finished)
    }

    /// Every range handed out as zeros so far on `id`.
    pub fn stream_zero_filled(&self, id: StreamId) -> Vec<Range<u64>> {
        self.recv_streams
            .get(&id)
            .map(|r| r.zero_filled.iter().collect())
            .unwrap_or_default()
    }

    /// Reads up to `max` bytes. Reliable streams return only the contiguous
    /// prefix. Unreliable streams also hand out zeros for holes that have
    /// been declared lost: enough later data arrived (`reorder_window`), the
    /// hole is older than `reorder_timeout`, or the hole ends at the
    /// end-of-stream marker.
    pub fn stream_read(&mut self, id: StreamId, max: usize, now: SimTime) -> Result<ReadOutcome, TransportError> {
        self.last_now = self.last_now.max(now);
        let window = self.cfg.params.reorder_window;
        let timeout = self.cfg.params.reorder_timeout;
        let r = self
            .recv_streams
            .get_mut(&id)
            .ok_or(TransportError::UnknownStream(id))?;
        let mut out = ReadOutcome::default();
        while out.data.len() < max {
            if r.is_finished() {
                out.fin = true;
                break;
            }
            let want = max - out.data.len();
            if let Some(mut chunk) = r.chunks.remove(&r.read_offset) {
                let take = want.min(chunk.data.len());
                if take == chunk.data.len() {
                    out.data.extend_from_slice(&chunk.data);
                } else {
                    out.data.extend_from_slice(&chunk.data[..take]);
                    let rest = chunk.data.split_off(take);
                    chunk.data = rest;
                    r.chunks.insert(r.read_offset + take as u64, chunk);
                }
                r.read_offset += take as u64;
                continue;
            }
            if r.reliable {
                break;
            }
            let next = r.chunks.range(r.read_offset..).next().map(|(&s, c)| (s, c.arrived));
            let (hole_end, consumable) = match (next, r.fin_offset) {
                (Some((start, arrived)), _) => (
                    start,
                    r.highest_received >= start + window || now.saturating_since(arrived) > timeout,
                ),
                (None, Some(fin)) if fin > r.read_offset => (fin, true),
                _ => break,
            };
            if !consumable {
                break;
            }
            let take = want.min((hole_end - r.read_offset) as usize);
            out.data.resize(out.data.len() + take, 0);
            let range = r.read_offset..r.read_offset + take as u64;
            r.zero_filled.insert(range.clone());
            match out.zero_filled.last_mut() {
                Some(last) if last.end == range.start => last.end = range.end,
                _ => out.zero_filled.push(range),
            }
            r.read_offset += take as u64;
        }
        if r.is_finished() {
            out.fin = true;
        }

        // flow-control credit follows consumption, zero fill included
        let consumed = out.data.len() as u64;
        let stream_window = self.cfg.params.initial_max_stream_data;
        if r.fin_offset.is_none() && r.local_limit - r.read_offset.min(r.local_limit) < stream_window / 2 {
            r.local_limit = r.read_offset + stream_window;
            self.max_stream_data_pending.insert(id);
        }
        self.consumed_total += consumed;
        let conn_window = self.cfg.params.initial_max_data;
        if self.local_max_data - self.consumed_total.min(self.local_max_data) < conn_window / 2 {
            self.local_max_data = self.consumed_total + conn_window;
            self.max_data_pending = true;
        }
        Ok(out)
    }

    // ---- receive path --------------------------------------------------

    pub fn on_datagram(&mut self, bytes: &[u8], now: SimTime) -> Vec<Event> {
        self.last_now = self.last_now.max(now);
        let mut events = Vec::new();
        let (header, frames) = match wire::decode_packet(bytes) {
            Ok(v) => v,
            Err(_) => {
                self.stats.malformed_dropped += 1;
                return events;
            }
        };
        let early = !self.established
            && !frames.iter().any(|f| matches!(f, Frame::Handshake { .. }))
            && frames.iter().any(|f| matches!(f, Frame::Stream(_)));
        if early {
            // data ahead of the handshake is dropped unacknowledged
            self.stats.early_dropped += 1;
            return events;
        }
        self.stats.packets_received += 1;
        let pn = header.packet_number;
        let eliciting = frames.iter().any(Frame::is_ack_eliciting);
        let duplicate = self.received.contains(pn);
        if duplicate {
            self.stats.duplicate_packets += 1;
        } else {
            self.received.insert_one(pn);
            if self.largest_received.is_none_or(|(l, _)| pn > l) {
                self.largest_received = Some((pn, now));
            }
            for frame in frames {
                self.handle_frame(frame, now, &mut events);
            }
        }
        if eliciting {
            self.eliciting_unacked += 1;
            if self.eliciting_unacked >= self.cfg.ack_eliciting_threshold || duplicate {
                self.ack_deadline = Some(now);
            } else if self.ack_deadline.is_none() {
                self.ack_deadline = Some(now + self.cfg.max_ack_delay);
            }
        }
        events
    }

    fn handle_frame(&mut self, frame: Frame, now: SimTime, events: &mut Vec<Event>) {
        match frame {
            Frame::Padding => {}
            Frame::Handshake { params } => self.on_handshake(&params, events),
            Frame::Ack(ack) => self.on_ack(&ack, now),
            Frame::MaxData { limit } => self.peer_max_data = self.peer_max_data.max(limit),
            Frame::MaxStreamData { stream_id, limit } => {
                if let Some(s) = self.send_streams.get_mut(&StreamId(stream_id)) {
                    s.peer_limit = s.peer_limit.max(limit);
                }
            }
            Frame::Stream(sf) => self.on_stream_frame(sf, now, events),
        }
    }

    fn on_handshake(&mut self, params: &[(u8, Vec<u8>)], events: &mut Vec<Event>) {
        let peer = TransportParams::from_wire(params);
        if self.side == Side::Server {
            // answer every (possibly repeated) client hello
            self.handshake_pending = true;
        }
        if self.established {
            return;
        }
        self.negotiated_unreliable = self.cfg.params.unreliable_supported && peer.unreliable_supported;
        self.peer_max_data = peer.initial_max_data;
        for s in self.send_streams.values_mut() {
            s.peer_limit = s.peer_limit.max(peer.initial_max_stream_data);
        }
        self.peer_params = Some(peer);
        self.established = true;
        events.push(Event::Connected);
    }

    fn on_stream_frame(&mut self, sf: StreamFrame, now: SimTime, events: &mut Vec<Event>) {
        let id = StreamId(sf.stream_id);
        if !self.established || (!id.is_reliable() && !self.negotiated_unreliable) {
            self.stats.malformed_dropped += 1;
            return;
        }
        if !self.recv_streams.contains_key(&id) {
            self.create_stream(id);
            events.push(Event::StreamOpened(id));
        }
        let r = self.recv_streams.get_mut(&id).unwrap();
        if sf.fin {
            r.fin_offset = Some(sf.end());
        }
        if r.insert(sf.offset, &sf.data, now) || sf.fin {
            events.push(Event::StreamReadable(id));
        }
    }

    fn on_ack(&mut self, ack: &AckFrame, now: SimTime) {
        if ack.largest_acked >= self.next_pn {
            return;
        }
        let Ok(ranges) = ack.acked_ranges() else {
            return;
        };
        let mut newly: Vec<SentPacketRecord> = Vec::new();
        for r in ranges {
            let pns: Vec<u64> = self.sent.range(r).map(|(&pn, _)| pn).collect();
            for pn in pns {
                newly.push(self.take_sent(pn));
            }
        }
        if newly.is_empty() {
            return;
        }
        self.largest_acked = Some(
            self.largest_acked
                .map_or(ack.largest_acked, |l| l.max(ack.largest_acked)),
        );
        if let Some(largest) = newly.iter().find(|p| p.packet_number == ack.largest_acked) {
            if largest.ack_eliciting {
                let ack_delay = Duration::from_micros(ack.ack_delay_us as u64).min(self.cfg.max_ack_delay);
                let sample = now.saturating_since(largest.send_time);
                self.rtt.update(sample, ack_delay);
                self.hystart_sample(sample);
            }
        }
        newly.sort_by_key(|p| p.packet_number);
        for p in &newly {
            self.on_packet_acked(p);
        }
        self.stats.packets_acked += newly.len() as u64;
        self.pto_backoff = 0;
        self.detect_losses(now);
    }

    fn on_packet_acked(&mut self, p: &SentPacketRecord) {
        if p.handshake {
            self.handshake_acked = true;
        }
        if p.ack_eliciting {
            self.bytes_in_flight -= p.size as u64;
            let in_recovery = self.recovery_start.is_some_and(|t| p.send_time <= t);
            if !in_recovery {
                if self.cwnd < self.ssthresh {
                    self.cwnd += p.size as u64;
                } else {
                    self.ca_acc += p.size as u64;
                    if self.ca_acc >= self.cwnd {
                        self.ca_acc -= self.cwnd;
                        self.cwnd += self.max_datagram();
                    }
                }
            }
            if self.cfg.hystart && p.packet_number >= self.hystart.round_end {
                self.hystart_round_end();
            }
        }
        for r in &p.ranges {
            if let Some(s) = self.send_streams.get_mut(&r.stream_id) {
                if r.fin {
                    s.fin_acked = true;
                }
                if s.reliable && r.length > 0 {
                    s.acked.insert(r.offset..r.offset + r.length);
                    s.retransmit.remove(r.offset..r.offset + r.length);
                    s.release();
                }
            }
        }
    }

    fn hystart_sample(&mut self, sample: Duration) {
        if !self.cfg.hystart || self.cwnd >= self.ssthresh {
            return;
        }
        let h = &mut self.hystart;
        h.samples += 1;
        h.current_round_min = Some(h.current_round_min.map_or(sample, |m| m.min(sample)));
        if let (Some(last), Some(cur)) = (h.last_round_min, h.current_round_min) {
            let eta = (last / 8).clamp(Duration::from_millis(4), Duration::from_millis(16));
            if h.samples >= 8 && cur >= last + eta {
                self.ssthresh = self.cwnd;
            }
        }
    }

    fn hystart_round_end(&mut self) {
        let h = &mut self.hystart;
        if h.current_round_min.is_some() {
            h.last_round_min = h.current_round_min;
        }
        h.current_round_min = None;
        h.samples = 0;
        h.round_end = self.next_pn;
    }

    // ---- loss recovery -------------------------------------------------

    /// Declares packets lost by the packet and time thresholds. Lost
    /// reliable data and every lost end marker are queued for resending;
    /// lost unreliable data is only recorded.
    pub fn detect_losses(&mut self, now: SimTime) -> Vec<SentPacketRecord> {
        self.loss_time = None;
        let Some(largest) = self.largest_acked else {
            return Vec::new();
        };
        let (num, den) = self.cfg.time_threshold;
        let base = self.rtt.smoothed.max(self.rtt.latest);
        let loss_delay = (base * num / den).max(Duration::from_millis(1));
        let mut lost_pns = Vec::new();
        for (&pn, p) in self.sent.range(..largest) {
            let by_count = pn + self.cfg.packet_threshold <= largest;
            let by_time = now.saturating_since(p.send_time) >= loss_delay;
            if by_count || by_time {
                lost_pns.push(pn);
            } else {
                self.loss_time = Some(p.send_time + loss_delay);
                break;
            }
        }
        let lost: Vec<SentPacketRecord> = lost_pns.into_iter().map(|pn| self.take_sent(pn)).collect();
        self.on_packets_lost(&lost, now);
        lost
    }

    fn on_packets_lost(&mut self, lost: &[SentPacketRecord], now: SimTime) {
        if lost.is_empty() {
            return;
        }
        self.stats.packets_lost += lost.len() as u64;
        let mut newest_eliciting: Option<SimTime> = None;
        for p in lost {
            if p.ack_eliciting {
                self.bytes_in_flight -= p.size as u64;
                newest_eliciting = Some(newest_eliciting.map_or(p.send_time, |t| t.max(p.send_time)));
            }
            if p.handshake && !self.handshake_acked {
                self.handshake_pending = true;
            }
            if p.max_data {
                self.max_data_pending = true;
            }
            self.max_stream_data_pending.extend(p.max_stream_data.iter().copied());
            for r in &p.ranges {
                let Some(s) = self.send_streams.get_mut(&r.stream_id) else {
                    continue;
                };
                if r.fin && !s.fin_acked {
                    s.fin_lost = true;
                    self.retransmittable.insert(r.stream_id);
                }
                if r.length == 0 {
                    continue;
                }
                let range = r.offset..r.offset + r.length;
                if s.reliable {
                    for gap in s.acked.gaps_within(range) {
                        s.retransmit.insert(gap);
                    }
                    if !s.retransmit.is_empty() {
                        self.retransmittable.insert(r.stream_id);
                    }
                } else {
                    s.lost.insert(range);
                    self.stats.unreliable_bytes_lost += r.length;
                }
            }
        }
        if let Some(sent_at) = newest_eliciting {
            // one reduction per loss epoch
            if self.recovery_start.is_none_or(|start| sent_at > start) {
                self.recovery_start = Some(now);
                self.ssthresh = (self.cwnd / 2).max(self.min_window());
                self.cwnd = self.ssthresh;
                self.ca_acc = 0;
            }
        }
    }

    fn take_sent(&mut self, pn: u64) -> SentPacketRecord {
        let p = self.sent.remove(&pn).unwrap();
        self.eliciting_in_flight -= p.ack_eliciting as usize;
        p
    }

    fn pto_deadline(&self) -> Option<SimTime> {
        let awaiting_handshake = self.side == Side::Client && !self.established;
        if self.eliciting_in_flight == 0 && !awaiting_handshake {
            return None;
        }
        let last = self.last_eliciting_sent?;
        let pto = self.rtt.smoothed + (self.rtt.var * 4).max(Duration::from_millis(1)) + self.cfg.max_ack_delay;
        Some(last + pto * (1u32 << self.pto_backoff.min(16)))
    }

    /// Earliest instant at which [`Connection::on_timeout`] has work to do.
    pub fn next_timeout(&self) -> Option<SimTime> {
        let mut t = [self.loss_time, self.pto_deadline(), None, None];
        if self.eliciting_unacked > 0 {
            t[2] = self.ack_deadline;
        }
        let timeout = self.cfg.params.reorder_timeout;
        t[3] = self
            .recv_streams
            .values()
            .filter_map(|r| r.hole_deadline(timeout))
            .map(|d| d + Duration::from_micros(1))
            .filter(|&d| d > self.last_now)
            .min();
        t.into_iter().flatten().min()
    }

    pub fn on_timeout(&mut self, now: SimTime) {
        self.last_now = self.last_now.max(now);
        if self.loss_time.is_some_and(|t| t <= now) {
            self.detect_losses(now);
            return;
        }
        if self.pto_deadline().is_some_and(|t| t <= now) {
            self.stats.pto_count += 1;
            self.pto_backoff += 1;
            // everything outstanding is presumed lost, as with an RTO
            let outstanding: Vec<u64> = self
                .sent
                .iter()
                .filter(|(_, p)| p.ack_eliciting)
                .map(|(&pn, _)| pn)
                .collect();
            let lost: Vec<SentPacketRecord> = outstanding.into_iter().map(|pn| self.take_sent(pn)).collect();
            self.on_packets_lost(&lost, now);
            if self.side == Side::Client && !self.established {
                self.handshake_pending = true;
            }
            self.probe_pending = true;
        }
    }

    // ---- send path -----------------------------------------------------

    fn ack_frame(&self, now: SimTime) -> Option<AckFrame> {
        let (_, at) = self.largest_received?;
        let ranges = self
            .received
            .iter()
            .rev()
            .take(self.cfg.wire.max_ack_ranges)
            .map(|r| r.start..=r.end - 1);
        let delay = now.saturating_since(at).as_micros().min(u32::MAX as u128) as u32;
        AckFrame::from_descending(ranges, delay).ok()
    }

    fn ack_due(&self, now: SimTime) -> bool {
        self.eliciting_unacked > 0 && self.ack_deadline.is_some_and(|d| d <= now)
    }

    fn has_eliciting_work(&self) -> bool {
        if self.handshake_pending || self.probe_pending {
            return true;
        }
        if !self.established {
            return false;
        }
        self.max_data_pending
            || !self.max_stream_data_pending.is_empty()
            || !self.retransmittable.is_empty()
            || !self.sendable.is_empty()
    }

    /// Assembles and encodes datagrams while the congestion window allows.
    /// ACK-only packets are not congestion controlled.
    pub fn poll_transmit(&mut self, now: SimTime) -> Vec<Vec<u8>> {
        self.last_now = self.last_now.max(now);
        let mut out = Vec::new();
        let mds = self.max_datagram();
        loop {
            let room = self.bytes_in_flight + mds <= self.cwnd;
            let datagram = if room && self.has_eliciting_work() {
                self.build_eliciting(now)
            } else {
                None
            };
            match datagram {
                Some(d) => out.push(d),
                None => {
                    if self.ack_due(now) {
                        if let Some(d) = self.build_ack_only(now) {
                            out.push(d);
                        }
                    }
                    break;
                }
            }
        }
        out
    }

    fn finish_packet(
        &mut self,
        header: PacketHeader,
        frames: Vec<Frame>,
        mut record: SentPacketRecord,
        now: SimTime,
    ) -> Vec<u8> {
        let bytes = wire::encode_packet(&header, &frames, &self.cfg.wire).expect("packet assembled within budget");
        self.next_pn += 1;
        self.stats.packets_sent += 1;
        self.stats.bytes_sent += bytes.len() as u64;
        if frames.iter().any(|f| matches!(f, Frame::Ack(_))) {
            self.stats.acks_sent += 1;
            self.eliciting_unacked = 0;
            self.ack_deadline = None;
        }
        record.size = bytes.len();
        if record.ack_eliciting {
            self.bytes_in_flight += bytes.len() as u64;
            self.last_eliciting_sent = Some(now);
        }
        self.eliciting_in_flight += record.ack_eliciting as usize;
        self.sent.insert(record.packet_number, record);
        bytes
    }

    fn header(&self) -> PacketHeader {
        let mut h = PacketHeader::new(self.cfg.connection_id, self.next_pn);
        if !self.handshake_acked && self.handshake_pending {
            h.flags |= FLAG_HANDSHAKE;
        }
        h
    }

    fn build_ack_only(&mut self, now: SimTime) -> Option<Vec<u8>> {
        let ack = self.ack_frame(now)?;
        let header = PacketHeader::new(self.cfg.connection_id, self.next_pn);
        let record = SentPacketRecord {
            packet_number: self.next_pn,
            send_time: now,
            size: 0,
            ranges: Vec::new(),
            ack_eliciting: false,
            handshake: false,
            max_data: false,
            max_stream_data: Vec::new(),
        };
        Some(self.finish_packet(header, vec![Frame::Ack(ack)], record, now))
    }

    fn build_eliciting(&mut self, now: SimTime) -> Option<Vec<u8>> {
        let header = self.header();
        let mut budget = self.cfg.wire.mtu_payload;
        let mut frames = Vec::new();
        let mut record = SentPacketRecord {
            packet_number: self.next_pn,
            send_time: now,
            size: 0,
            ranges: Vec::new(),
            ack_eliciting: true,
            handshake: false,
            max_data: false,
            max_stream_data: Vec::new(),
        };

        if self.eliciting_unacked > 0 || self.ack_deadline.is_some() {
            if let Some(ack) = self.ack_frame(now) {
                if ack.encoded_len() <= budget / 2 {
                    budget -= ack.encoded_len();
                    frames.push(Frame::Ack(ack));
                }
            }
        }
        if self.handshake_pending {
            let f = Frame::Handshake {
                params: self.cfg.params.to_wire(),
            };
            budget -= f.encoded_len();
            frames.push(f);
            record.handshake = true;
            self.handshake_pending = false;
        }
        if self.established {
            if self.max_data_pending && budget >= 9 {
                frames.push(Frame::MaxData {
                    limit: self.local_max_data,
                });
                budget -= 9;
                record.max_data = true;
                self.max_data_pending = false;
            }
            while budget >= 13 {
                let Some(id) = self.max_stream_data_pending.pop_first() else {
                    break;
                };
                let Some(r) = self.recv_streams.get(&id) else {
                    continue;
                };
                if r.fin_offset.is_some() {
                    continue;
                }
                frames.push(Frame::MaxStreamData {
                    stream_id: id.0,
                    limit: r.local_limit,
                });
                budget -= 13;
                record.max_stream_data.push(id);
            }
            self.fill_retransmissions(&mut frames, &mut record, &mut budget);
            self.fill_new_data(&mut frames, &mut record, &mut budget);
        }

        let eliciting = frames.iter().any(Frame::is_ack_eliciting);
        if !eliciting && self.probe_pending && self.established {
            frames.push(Frame::MaxData {
                limit: self.local_max_data,
            });
            record.max_data = true;
        }
        if !frames.iter().any(Frame::is_ack_eliciting) {
            // nothing worth a congestion-controlled packet; an ACK that
            // was prepared here goes out on the ACK-only path instead
            return None;
        }
        self.probe_pending = false;
        Some(self.finish_packet(header, frames, record, now))
    }

    fn fill_retransmissions(&mut self, frames: &mut Vec<Frame>, record: &mut SentPacketRecord, budget: &mut usize) {
        while *budget > STREAM_FRAME_OVERHEAD {
            let Some(&id) = self.retransmittable.first() else {
                break;
            };
            let s = self.send_streams.get_mut(&id).unwrap();
            if let Some(range) = s.retransmit.first() {
                let room = (*budget - STREAM_FRAME_OVERHEAD) as u64;
                let len = (range.end - range.start).min(room);
                let mut data = Vec::with_capacity(len as usize);
                s.copy_out(range.start, len as usize, &mut data);
                s.retransmit.remove(range.start..range.start + len);
                let end = range.start + len;
                let fin = s.fin_offset == Some(end) && s.fin_lost && !s.fin_acked;
                if fin {
                    s.fin_lost = false;
                }
                *budget -= STREAM_FRAME_OVERHEAD + len as usize;
                self.stats.stream_bytes_retransmitted += len;
                record.ranges.push(SentRange {
                    stream_id: id,
                    offset: range.start,
                    length: len,
                    fin,
                });
                frames.push(Frame::Stream(StreamFrame {
                    stream_id: id.0,
                    offset: range.start,
                    fin,
                    data,
                }));
            } else if s.fin_lost && !s.fin_acked {
                let Some(fin_at) = s.fin_offset else {
                    s.fin_lost = false;
                    continue;
                };
                s.fin_lost = false;
                *budget -= STREAM_FRAME_OVERHEAD;
                record.ranges.push(SentRange {
                    stream_id: id,
                    offset: fin_at,
                    length: 0,
                    fin: true,
                });
                frames.push(Frame::Stream(StreamFrame {
                    stream_id: id.0,
                    offset: fin_at,
                    fin: true,
                    data: Vec::new(),
                }));
            }
            let s = &self.send_streams[&id];
            if !s.has_retransmit() {
                self.retransmittable.remove(&id);
            }
        }
    }

    fn fill_new_data(&mut self, frames: &mut Vec<Frame>, record: &mut SentPacketRecord, budget: &mut usize) {
        while *budget > STREAM_FRAME_OVERHEAD && !self.sendable.is_empty() {
            let id = match self.rr_cursor {
                Some(c) => self
                    .sendable
                    .range((std::ops::Bound::Excluded(c), std::ops::Bound::Unbounded))
                    .next()
                    .or_else(|| self.sendable.first())
                    .copied()
                    .unwrap(),
                None => *self.sendable.first().unwrap(),
            };
            self.rr_cursor = Some(id);
            let s = self.send_streams.get_mut(&id).unwrap();
            let room = (*budget - STREAM_FRAME_OVERHEAD) as u64;
            let len = s.unsent().min(room);
            if len == 0 && !(s.fin_offset == Some(s.send_offset) && !s.fin_sent) {
                self.sendable.remove(&id);
                continue;
            }
            let offset = s.send_offset;
            let mut data = Vec::with_capacity(len as usize);
            s.copy_out(offset, len as usize, &mut data);
            s.send_offset += len;
            let fin = s.fin_offset == Some(s.send_offset) && !s.fin_sent;
            if fin {
                s.fin_sent = true;
            }
            if !s.reliable {
                s.release();
            }
            *budget -= STREAM_FRAME_OVERHEAD + len as usize;
            self.stats.stream_bytes_sent += len;
            record.ranges.push(SentRange {
                stream_id: id,
                offset,
                length: len,
                fin,
            });
            frames.push(Frame::Stream(StreamFrame {
                stream_id: id.0,
                offset,
                fin,
                data,
            }));
            if !self.send_streams[&id].has_new() {
                self.sendable.remove(&id);
            }
        }
    }

    /// Worst-case ACK frame size under the configured range cap.
    pub fn max_ack_frame_len(&self) -> usize {
        ACK_FRAME_OVERHEAD + ACK_RANGE_LEN * (self.cfg.wire.max_ack_ranges - 1)
    }
}
