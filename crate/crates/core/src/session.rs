//! Video shim on top of the transport.
//!
//! The server tags each frame, picks a stream for it and announces it on
//! the reliable control stream (id 0) before any of the frame's bytes are
//! written. The client reads the control stream, collects each frame's
//! byte range from the named stream and decides its outcome.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fec::{self, FecMode, FecParams, LossEstimator, ShardSet};
use crate::media::{FrameType, VideoTrace};
use crate::ranges::RangeSet;
use crate::time::SimTime;
use crate::transport::{Connection, StreamClass, StreamId, TransportError};

pub const CONTROL_RECORD_LEN: usize = 29;
pub const DEFAULT_SHARD_SIZE: usize = 1200;
pub const DEFAULT_BACKLOG: u64 = 256 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SessionError {
    #[error("control record truncated")]
    Truncated,
    #[error("unreliable streams required by {0} were not negotiated")]
    Negotiation(ProtocolMode),
    #[error("control stream corrupt: {0}")]
    ControlStreamCorrupt(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    TcpLike,
    QuicLike,
    Clipstream,
    ClipstreamFec,
}

impl ProtocolMode {
    pub const ALL: [ProtocolMode; 4] = [
        ProtocolMode::TcpLike,
        ProtocolMode::QuicLike,
        ProtocolMode::Clipstream,
        ProtocolMode::ClipstreamFec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolMode::TcpLike => "tcp_like",
            ProtocolMode::QuicLike => "quic_like",
            ProtocolMode::Clipstream => "clipstream",
            ProtocolMode::ClipstreamFec => "clipstream_fec",
        }
    }

    /// P and B frames travel unreliably.
    pub fn is_partially_reliable(self) -> bool {
        matches!(self, ProtocolMode::Clipstream | ProtocolMode::ClipstreamFec)
    }

    pub fn uses_fec(self) -> bool {
        self == ProtocolMode::ClipstreamFec
    }
}

impl fmt::Display for ProtocolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolMode {
    type Err = String;

    /// Accepts the full names and the short forms tcp, quic, cs, csfec.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tcp" | "tcp_like" => Ok(ProtocolMode::TcpLike),
            "quic" | "quic_like" => Ok(ProtocolMode::QuicLike),
            "cs" | "clipstream" => Ok(ProtocolMode::Clipstream),
            "csfec" | "clipstream_fec" => Ok(ProtocolMode::ClipstreamFec),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

/// Per-frame demultiplexing record on the control stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub video_frame_index: u32,
    pub frame_type: FrameType,
    pub stream_id: u32,
    pub offset: u64,
    /// Bytes the frame occupies on its stream.
    pub length: u32,
    /// `None` for uncoded frames (k, m and shard size all zero on the wire).
    pub fec: Option<FecParams>,
    pub payload_length: u32,
}

pub fn encode_control_record(rec: &ControlRecord) -> [u8; CONTROL_RECORD_LEN] {
    let mut b = [0u8; CONTROL_RECORD_LEN];
    b[0..4].copy_from_slice(&rec.video_frame_index.to_be_bytes());
    b[4] = rec.frame_type.code();
    b[5..9].copy_from_slice(&rec.stream_id.to_be_bytes());
    b[9..17].copy_from_slice(&rec.offset.to_be_bytes());
    b[17..21].copy_from_slice(&rec.length.to_be_bytes());
    let (k, m, shard) = rec.fec.map_or((0, 0, 0), |p| (p.k, p.m, p.shard_size));
    b[21] = k as u8;
    b[22] = m as u8;
    b[23..25].copy_from_slice(&(shard as u16).to_be_bytes());
    b[25..29].copy_from_slice(&rec.payload_length.to_be_bytes());
    b
}

pub fn decode_control_record(bytes: &[u8]) -> Result<ControlRecord, SessionError> {
    if bytes.len() < CONTROL_RECORD_LEN {
        return Err(SessionError::Truncated);
    }
    let u32_at = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    let frame_type = FrameType::from_code(bytes[4])
        .ok_or_else(|| SessionError::ControlStreamCorrupt(format!("frame type {}", bytes[4])))?;
    let k = bytes[21] as usize;
    let m = bytes[22] as usize;
    let shard_size = u16::from_be_bytes([bytes[23], bytes[24]]) as usize;
    let fec = if k == 0 && m == 0 && shard_size == 0 {
        None
    } else {
        Some(FecParams::new(k, m, shard_size).map_err(|e| SessionError::ControlStreamCorrupt(e.to_string()))?)
    };
    Ok(ControlRecord {
        video_frame_index: u32_at(0),
        frame_type,
        stream_id: u32_at(5),
        offset: u64::from_be_bytes(bytes[9..17].try_into().unwrap()),
        length: u32_at(17),
        fec,
        payload_length: u32_at(25),
    })
}

/// Deterministic stand-in for encoded video bytes.
pub fn frame_payload(index: u32, size: usize) -> Vec<u8> {
    let seed = (index as u8).wrapping_mul(151) ^ 0x5A;
    (0..size)
        .map(|j| seed ^ (j as u8).wrapping_mul(29) ^ (j >> 8) as u8)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameOutcome {
    Intact,
    Recovered,
    Corrupted,
    Missing,
}

impl FrameOutcome {
    pub fn is_good(self) -> bool {
        matches!(self, FrameOutcome::Intact | FrameOutcome::Recovered)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameStatus {
    pub index: u32,
    pub frame_type: FrameType,
    pub outcome: FrameOutcome,
    /// When the outcome became final.
    pub complete_time: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerConfig {
    pub mode: ProtocolMode,
    pub fec_mode: FecMode,
    pub shard_size: usize,
    /// Unsent bytes the server may leave queued in the transport.
    pub backlog_limit: u64,
}

impl ServerConfig {
    pub fn new(mode: ProtocolMode) -> Self {
        Self {
            mode,
            fec_mode: FecMode::Static,
            shard_size: DEFAULT_SHARD_SIZE,
            backlog_limit: DEFAULT_BACKLOG,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub records_written: u64,
    pub frames_written: u64,
    pub reliable_frames: u64,
    pub unreliable_frames: u64,
    pub reliable_payload_bytes: u64,
    pub unreliable_payload_bytes: u64,
    /// Coded bytes beyond the payload: parity plus padding.
    pub fec_overhead_bytes: u64,
    pub parity_shards: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServeProgress {
    pub records_written: u32,
    pub frames_written: u32,
    pub done: bool,
}

#[derive(Debug, Default)]
struct Lane {
    frames: Vec<u32>,
    pos: usize,
    pending: Option<(StreamId, Vec<u8>, usize, bool)>,
    streams: Vec<StreamId>,
}

#[derive(Debug)]
pub struct Server {
    cfg: ServerConfig,
    trace: Arc<VideoTrace>,
    records: Vec<Option<ControlRecord>>,
    next_record: u32,
    control_pending: Vec<u8>,
    control_fin: bool,
    lane: Lane,
    last_of_class: [u32; 2],
    started: bool,
    reliable_stream: Option<StreamId>,
    unreliable_stream: Option<StreamId>,
    chunk_streams: Vec<StreamId>,
    stream_offsets: HashMap<StreamId, u64>,
    loss: LossEstimator,
    seen_acked: u64,
    seen_lost: u64,
    stats: ServerStats,
}

impl Server {
    pub fn new(trace: Arc<VideoTrace>, cfg: ServerConfig) -> Self {
        let mut last_of_class = [0u32; 2];
        for f in &trace.frames {
            last_of_class[(f.frame_type == FrameType::I) as usize] = f.index;
        }
        let lane = Lane {
            frames: trace.frames.iter().map(|f| f.index).collect(),
            ..Lane::default()
        };
        Self {
            records: vec![None; trace.frames.len()],
            cfg,
            trace,
            next_record: 0,
            control_pending: Vec::new(),
            control_fin: false,
            lane,
            last_of_class,
            started: false,
            reliable_stream: None,
            unreliable_stream: None,
            chunk_streams: Vec::new(),
            stream_offsets: HashMap::new(),
            loss: LossEstimator::default(),
            seen_acked: 0,
            seen_lost: 0,
            stats: ServerStats::default(),
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    pub fn loss_estimate(&self) -> f64 {
        self.loss.estimate
    }

    pub fn record(&self, index: u32) -> Option<&ControlRecord> {
        self.records.get(index as usize).and_then(Option::as_ref)
    }

    pub fn is_done(&self) -> bool {
        self.control_fin && self.lane.pos == self.lane.frames.len() && self.lane.pending.is_none()
    }

    fn start(&mut self, conn: &mut Connection) -> Result<(), SessionError> {
        if self.cfg.mode.is_partially_reliable() && !conn.unreliable_negotiated() {
            return Err(SessionError::Negotiation(self.cfg.mode));
        }
        conn.open_control_stream()?;
        match self.cfg.mode {
            ProtocolMode::TcpLike => self.reliable_stream = Some(conn.open_stream(StreamClass::Reliable)?),
            ProtocolMode::QuicLike => {}
            ProtocolMode::Clipstream | ProtocolMode::ClipstreamFec => {
                self.reliable_stream = Some(conn.open_stream(StreamClass::Reliable)?);
                self.unreliable_stream = Some(conn.open_stream(StreamClass::Unreliable)?);
            }
        }
        self.started = true;
        Ok(())
    }

    fn stream_for(&mut self, index: u32, conn: &mut Connection) -> Result<StreamId, SessionError> {
        let frame = self.trace.frames[index as usize];
        Ok(match self.cfg.mode {
            ProtocolMode::TcpLike => self.reliable_stream.unwrap(),
            ProtocolMode::QuicLike => {
                let chunk = (index / self.trace.frames_per_chunk.max(1)) as usize;
                while self.chunk_streams.len() <= chunk {
                    self.chunk_streams.push(conn.open_stream(StreamClass::Reliable)?);
                }
                self.chunk_streams[chunk]
            }
            _ if frame.frame_type == FrameType::I => self.reliable_stream.unwrap(),
            _ => self.unreliable_stream.unwrap(),
        })
    }

    fn plan_record(&mut self, index: u32, conn: &mut Connection) -> Result<ControlRecord, SessionError> {
        let frame = self.trace.frames[index as usize];
        let stream = self.stream_for(index, conn)?;
        let payload_len = frame.size as usize;
        let fec = if self.cfg.mode.uses_fec() && frame.frame_type != FrameType::I {
            let k = FecParams::data_shards_for(payload_len, self.cfg.shard_size);
            let m = fec::parity_policy(k, self.loss.estimate, self.cfg.fec_mode);
            FecParams::new(k, m, self.cfg.shard_size).ok().filter(|p| p.m > 0)
        } else {
            None
        };
        let length = fec.map_or(payload_len, |p| p.coded_len());
        let offset = self.stream_offsets.entry(stream).or_insert(0);
        let rec = ControlRecord {
            video_frame_index: index,
            frame_type: frame.frame_type,
            stream_id: stream.0,
            offset: *offset,
            length: length as u32,
            fec,
            payload_length: frame.size,
        };
        *offset += length as u64;
        Ok(rec)
    }

    fn flush_control(&mut self, conn: &mut Connection) -> Result<(), SessionError> {
        if self.control_fin {
            return Ok(());
        }
        let last = self.next_record as usize == self.records.len();
        let n = conn.stream_write(StreamId::CONTROL, &self.control_pending, last)?;
        self.control_pending.drain(..n);
        if last && self.control_pending.is_empty() {
            self.control_fin = true;
        }
        Ok(())
    }

    /// Announces every frame up to and including `index`. False while the
    /// announcement is still stuck behind flow control.
    fn announce_through(&mut self, index: u32, conn: &mut Connection) -> Result<bool, SessionError> {
        while self.next_record <= index {
            let rec = self.plan_record(self.next_record, conn)?;
            self.control_pending.extend_from_slice(&encode_control_record(&rec));
            self.records[self.next_record as usize] = Some(rec);
            self.next_record += 1;
            self.stats.records_written += 1;
        }
        self.flush_control(conn)?;
        Ok(self.control_pending.is_empty())
    }

    fn last_on_stream(&self, lane: &Lane, pos: usize) -> bool {
        let index = lane.frames[pos];
        let Some(&next) = lane.frames.get(pos + 1) else {
            return true;
        };
        match self.cfg.mode {
            ProtocolMode::TcpLike => false,
            ProtocolMode::QuicLike => next % self.trace.frames_per_chunk.max(1) == 0,
            _ => {
                let is_i = self.trace.frames[index as usize].frame_type == FrameType::I;
                self.last_of_class[is_i as usize] == index
            }
        }
    }

    fn frame_bytes(&mut self, rec: &ControlRecord) -> Vec<u8> {
        let payload = frame_payload(rec.video_frame_index, rec.payload_length as usize);
        let reliable = StreamId(rec.stream_id).is_reliable();
        if reliable {
            self.stats.reliable_frames += 1;
            self.stats.reliable_payload_bytes += rec.payload_length as u64;
        } else {
            self.stats.unreliable_frames += 1;
            self.stats.unreliable_payload_bytes += rec.payload_length as u64;
        }
        match rec.fec {
            Some(p) => {
                let set = fec::fec_encode(&payload, &p).expect("k sized for the payload");
                self.stats.fec_overhead_bytes += (p.coded_len() - payload.len()) as u64;
                self.stats.parity_shards += p.m as u64;
                set.to_bytes()
            }
            None => payload,
        }
    }

    /// Pushes frames into the transport in presentation order until
    /// `backlog_limit` unsent bytes are queued or nothing is left.
    pub fn serve(&mut self, conn: &mut Connection, _now: SimTime) -> Result<ServeProgress, SessionError> {
        if !conn.is_established() {
            return Err(TransportError::NotEstablished.into());
        }
        if !self.started {
            self.start(conn)?;
        }
        let st = conn.stats();
        let (acked, lost) = (st.packets_acked, st.packets_lost);
        if acked + lost > self.seen_acked + self.seen_lost {
            self.loss.observe_counts(acked - self.seen_acked, lost - self.seen_lost);
            self.seen_acked = acked;
            self.seen_lost = lost;
        }
        self.flush_control(conn)?;

        let records_before = self.stats.records_written;
        let frames_before = self.stats.frames_written;
        let mut lane = std::mem::take(&mut self.lane);
        let result = self.feed_lane(&mut lane, conn);
        self.lane = lane;
        result?;
        if self.next_record as usize == self.records.len() {
            self.flush_control(conn)?;
        }
        Ok(ServeProgress {
            records_written: (self.stats.records_written - records_before) as u32,
            frames_written: (self.stats.frames_written - frames_before) as u32,
            done: self.is_done(),
        })
    }

    fn feed_lane(&mut self, lane: &mut Lane, conn: &mut Connection) -> Result<(), SessionError> {
        loop {
            if let Some((id, data, written, fin)) = lane.pending.as_mut() {
                let n = conn.stream_write(*id, &data[*written..], *fin)?;
                *written += n;
                if *written < data.len() {
                    return Ok(());
                }
                lane.pending = None;
                self.stats.frames_written += 1;
            }
            lane.streams.retain(|&s| conn.stream_unsent(s) > 0);
            let backlog: u64 = lane.streams.iter().map(|&s| conn.stream_unsent(s)).sum();
            if backlog >= self.cfg.backlog_limit || lane.pos == lane.frames.len() {
                return Ok(());
            }
            let index = lane.frames[lane.pos];
            if !self.announce_through(index, conn)? {
                return Ok(());
            }
            let rec = self.records[index as usize].unwrap();
            let fin = self.last_on_stream(lane, lane.pos);
            let bytes = self.frame_bytes(&rec);
            let id = StreamId(rec.stream_id);
            if !lane.streams.contains(&id) {
                lane.streams.push(id);
            }
            lane.pending = Some((id, bytes, 0, fin));
            lane.pos += 1;
        }
    }
}

/// Outcome of one frame given its bytes on the stream and the stream ranges
/// that were zero-filled. Returns the payload for intact and recovered frames.
pub fn classify_frame(rec: &ControlRecord, bytes: &[u8], holes: &[Range<u64>]) -> (FrameOutcome, Vec<u8>) {
    let range = rec.offset..rec.offset + rec.length as u64;
    let overlaps = |a: u64, b: u64| holes.iter().any(|z| z.start < b && z.end > a);
    if !overlaps(range.start, range.end) {
        return (FrameOutcome::Intact, bytes[..rec.payload_length as usize].to_vec());
    }
    let mut covered = RangeSet::new();
    for z in holes {
        covered.insert(z.start.max(range.start)..z.end.min(range.end));
    }
    let any_data = !covered.contains_range(range.clone());
    let lost = if any_data {
        FrameOutcome::Corrupted
    } else {
        FrameOutcome::Missing
    };
    let Some(p) = rec.fec else {
        return (lost, Vec::new());
    };
    let shards = (0..p.total_shards())
        .map(|i| {
            let a = rec.offset + (i * p.shard_size) as u64;
            (!overlaps(a, a + p.shard_size as u64)).then(|| bytes[i * p.shard_size..(i + 1) * p.shard_size].to_vec())
        })
        .collect();
    let set = ShardSet {
        shard_size: p.shard_size,
        payload_len: rec.payload_length as usize,
        shards,
    };
    match fec::fec_decode(&set, &p) {
        Ok(data) => (FrameOutcome::Recovered, data),
        Err(_) => (lost, Vec::new()),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub intact: u64,
    pub recovered: u64,
    pub corrupted: u64,
    pub missing: u64,
    pub zero_filled_bytes: u64,
}

#[derive(Debug, Default)]
struct ClientStream {
    base: u64,
    data: Vec<u8>,
    zero: RangeSet,
    pending: std::collections::VecDeque<ControlRecord>,
    finished: bool,
}

impl ClientStream {
    fn end(&self) -> u64 {
        self.base + self.data.len() as u64
    }
}

#[derive(Debug, Default)]
pub struct Client {
    control_buf: Vec<u8>,
    control_done: bool,
    records_seen: u32,
    expected_offsets: HashMap<u32, u64>,
    streams: BTreeMap<StreamId, ClientStream>,
    active: BTreeSet<StreamId>,
    resolved: BTreeMap<u32, FrameStatus>,
    next_emit: u32,
    keep_payloads: bool,
    payloads: BTreeMap<u32, Vec<u8>>,
    stats: ClientStats,
}

const READ_CHUNK: usize = 64 * 1024;

impl Client {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keep the bytes of every intact or recovered frame for inspection.
    pub fn keeping_payloads() -> Self {
        Self {
            keep_payloads: true,
            ..Self::default()
        }
    }

    pub fn stats(&self) -> &ClientStats {
        &self.stats
    }

    pub fn payload(&self, index: u32) -> Option<&[u8]> {
        self.payloads.get(&index).map(Vec::as_slice)
    }

    pub fn frames_announced(&self) -> u32 {
        self.records_seen
    }

    /// Every announced frame has an outcome and the control stream ended.
    pub fn is_complete(&self) -> bool {
        self.control_done && self.next_emit == self.records_seen
    }

    fn read_control(&mut self, conn: &mut Connection, now: SimTime) -> Result<(), SessionError> {
        if self.control_done || conn.stream_read_offset(StreamId::CONTROL).is_none() {
            return Ok(());
        }
        loop {
            let out = conn.stream_read(StreamId::CONTROL, READ_CHUNK, now)?;
            self.control_buf.extend_from_slice(&out.data);
            if out.fin {
                self.control_done = true;
            }
            if out.data.is_empty() || out.fin {
                break;
            }
        }
        let whole = self.control_buf.len() / CONTROL_RECORD_LEN * CONTROL_RECORD_LEN;
        for rec_bytes in self.control_buf[..whole].chunks_exact(CONTROL_RECORD_LEN) {
            let rec = decode_control_record(rec_bytes)?;
            if rec.video_frame_index != self.records_seen {
                return Err(SessionError::ControlStreamCorrupt(format!(
                    "record {} where {} was expected",
                    rec.video_frame_index, self.records_seen
                )));
            }
            let expected = self.expected_offsets.entry(rec.stream_id).or_insert(0);
            if rec.offset != *expected || rec.stream_id == 0 {
                return Err(SessionError::ControlStreamCorrupt(format!(
                    "frame {} at stream {} offset {}",
                    rec.video_frame_index, rec.stream_id, rec.offset
                )));
            }
            *expected += rec.length as u64;
            self.records_seen += 1;
            let id = StreamId(rec.stream_id);
            self.streams.entry(id).or_default().pending.push_back(rec);
            self.active.insert(id);
        }
        self.control_buf.drain(..whole);
        if self.control_done && !self.control_buf.is_empty() {
            return Err(SessionError::ControlStreamCorrupt("trailing bytes".into()));
        }
        Ok(())
    }

    fn read_stream(&mut self, id: StreamId, conn: &mut Connection, now: SimTime) -> Result<(), SessionError> {
        if conn.stream_read_offset(id).is_none() {
            return Ok(());
        }
        let s = self.streams.entry(id).or_default();
        loop {
            let start = s.end();
            let out = conn.stream_read(id, READ_CHUNK, now)?;
            for r in &out.zero_filled {
                s.zero.insert(r.clone());
                self.stats.zero_filled_bytes += r.end - r.start;
            }
            debug_assert!(out.zero_filled.iter().all(|r| r.start >= start));
            s.data.extend_from_slice(&out.data);
            if out.fin {
                s.finished = true;
            }
            if out.data.len() < READ_CHUNK {
                break;
            }
        }
        Ok(())
    }

    fn resolve(&mut self, id: StreamId, now: SimTime) {
        let keep = self.keep_payloads;
        let s = self.streams.get_mut(&id).unwrap();
        while let Some(rec) = s.pending.front().copied() {
            let end = rec.offset + rec.length as u64;
            if s.end() < end {
                break;
            }
            s.pending.pop_front();
            let lo = (rec.offset - s.base) as usize;
            let bytes = &s.data[lo..lo + rec.length as usize];
            let holes: Vec<Range<u64>> = s.zero.iter().filter(|z| z.start < end && z.end > rec.offset).collect();
            let (outcome, payload) = classify_frame(&rec, bytes, &holes);
            match outcome {
                FrameOutcome::Intact => self.stats.intact += 1,
                FrameOutcome::Recovered => self.stats.recovered += 1,
                FrameOutcome::Corrupted => self.stats.corrupted += 1,
                FrameOutcome::Missing => self.stats.missing += 1,
            }
            if keep && outcome.is_good() {
                self.payloads.insert(rec.video_frame_index, payload);
            }
            self.resolved.insert(
                rec.video_frame_index,
                FrameStatus {
                    index: rec.video_frame_index,
                    frame_type: rec.frame_type,
                    outcome,
                    complete_time: now,
                },
            );
            // everything before this frame's end is settled
            let drop = (end - s.base) as usize;
            s.data.drain(..drop);
            s.base = end;
            s.zero.remove_below(end);
        }
        if s.pending.is_empty() && (s.finished || self.control_done) {
            self.active.remove(&id);
        }
    }

    /// Reads whatever the transport can hand out and returns the frames
    /// whose outcome became final, in frame order.
    pub fn reassemble(&mut self, conn: &mut Connection, now: SimTime) -> Result<Vec<FrameStatus>, SessionError> {
        self.read_control(conn, now)?;
        let ids: Vec<StreamId> = self.active.iter().copied().collect();
        for id in ids {
            self.read_stream(id, conn, now)?;
            self.resolve(id, now);
        }
        let mut out = Vec::new();
        while let Some(st) = self.resolved.remove(&self.next_emit) {
            out.push(st);
            self.next_emit += 1;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ControlRecord {
        ControlRecord {
            video_frame_index: 0,
            frame_type: FrameType::I,
            stream_id: 2,
            offset: 0,
            length: 281_600,
            fec: None,
            payload_length: 281_600,
        }
    }

    #[test]
    fn control_record_layout() {
        let b = encode_control_record(&sample());
        assert_eq!(b.len(), 29);
        assert_eq!(&b[..9], &[0, 0, 0, 0, 0, 0, 0, 0, 2]);
        assert_eq!(decode_control_record(&b).unwrap(), sample());
        assert_eq!(decode_control_record(&b[..28]), Err(SessionError::Truncated));

        let coded = ControlRecord {
            video_frame_index: 7,
            frame_type: FrameType::B,
            stream_id: 1,
            offset: 1 << 40,
            length: 26_400,
            fec: Some(FecParams::new(19, 3, 1200).unwrap()),
            payload_length: 22_030,
        };
        let b = encode_control_record(&coded);
        assert_eq!(&b[21..25], &[19, 3, 0x04, 0xB0]);
        assert_eq!(decode_control_record(&b).unwrap(), coded);
    }

    #[test]
    fn mode_names() {
        for m in ProtocolMode::ALL {
            assert_eq!(m.name().parse::<ProtocolMode>(), Ok(m));
        }
        assert_eq!("csfec".parse::<ProtocolMode>(), Ok(ProtocolMode::ClipstreamFec));
        assert!("udp".parse::<ProtocolMode>().is_err());
    }

    #[test]
    fn payload_is_deterministic() {
        assert_eq!(frame_payload(3, 100), frame_payload(3, 100));
        assert_ne!(frame_payload(3, 100), frame_payload(4, 100));
        assert_eq!(frame_payload(9, 5).len(), 5);
    }
}
