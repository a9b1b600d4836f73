//! Bit-exact packet and frame codec.
//!
//! All integers are fixed-width big-endian. A packet is an 18-byte header
//! followed by a sequence of frames:
//!
//! ```text
//! version u8 | flags u8 | connection_id u64 | packet_number u64 | frames...
//!
//! PADDING         0x00
//! STREAM          0x01 | stream_id u32 | offset u64 | length u16 | flags u8 (bit0 FIN) | data
//! ACK             0x02 | largest_acked u64 | ack_delay_us u32 | range_count u16
//!                      | first_run_length u64 | (gap u64 | run_length u64) * range_count
//! HANDSHAKE       0x03 | param_count u8 | (tag u8 | len u16 | value) * count
//! MAX_DATA        0x04 | limit u64
//! MAX_STREAM_DATA 0x05 | stream_id u32 | limit u64
//! ```

use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use thiserror::Error;

pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 18;
/// Header flag: the packet belongs to the handshake.
pub const FLAG_HANDSHAKE: u8 = 0x01;

pub const FRAME_PADDING: u8 = 0x00;
pub const FRAME_STREAM: u8 = 0x01;
pub const FRAME_ACK: u8 = 0x02;
pub const FRAME_HANDSHAKE: u8 = 0x03;
pub const FRAME_MAX_DATA: u8 = 0x04;
pub const FRAME_MAX_STREAM_DATA: u8 = 0x05;

/// Fixed bytes of a STREAM frame before its data.
pub const STREAM_FRAME_OVERHEAD: usize = 1 + 4 + 8 + 2 + 1;
/// Fixed bytes of an ACK frame before its ranges.
pub const ACK_FRAME_OVERHEAD: usize = 1 + 8 + 4 + 2 + 8;
pub const ACK_RANGE_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("packet of {size} bytes exceeds the {limit}-byte budget")]
    OversizedPacket { size: usize, limit: usize },
    #[error("invalid frame: {0}")]
    InvalidFrame(&'static str),
    #[error("buffer truncated")]
    Truncated,
    #[error("unknown frame type 0x{0:02x}")]
    UnknownFrameType(u8),
    #[error("unknown version 0x{0:02x}")]
    UnknownVersion(u8),
    #[error("cannot acknowledge an empty set")]
    EmptySet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireConfig {
    pub mtu_payload: usize,
    pub max_ack_ranges: usize,
}

impl Default for WireConfig {
    fn default() -> Self {
        Self {
            mtu_payload: 1400,
            max_ack_ranges: 32,
        }
    }
}

impl WireConfig {
    /// Largest datagram the codec will produce.
    pub fn max_datagram(&self) -> usize {
        HEADER_LEN + self.mtu_payload
    }

    pub fn validate(&self) -> Result<(), WireError> {
        if self.mtu_payload < 64 {
            return Err(WireError::InvalidFrame("mtu_payload must be at least 64"));
        }
        if self.max_ack_ranges == 0 {
            return Err(WireError::InvalidFrame("max_ack_ranges must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketHeader {
    pub version: u8,
    pub flags: u8,
    pub connection_id: u64,
    pub packet_number: u64,
}

impl PacketHeader {
    pub fn new(connection_id: u64, packet_number: u64) -> Self {
        Self {
            version: VERSION,
            flags: 0,
            connection_id,
            packet_number,
        }
    }

    pub fn is_handshake(&self) -> bool {
        self.flags & FLAG_HANDSHAKE != 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamFrame {
    pub stream_id: u32,
    pub offset: u64,
    pub fin: bool,
    pub data: Vec<u8>,
}

impl StreamFrame {
    pub fn end(&self) -> u64 {
        self.offset + self.data.len() as u64
    }
}

/// One additional ACK range below the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AckRange {
    /// Unacknowledged numbers between the previous range's lowest number
    /// and this range's highest, minus one.
    pub gap: u64,
    pub run_length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AckFrame {
    pub largest_acked: u64,
    pub ack_delay_us: u32,
    pub first_run_length: u64,
    pub ranges: Vec<AckRange>,
}

impl AckFrame {
    /// Builds an ACK from descending, disjoint inclusive ranges.
    pub fn from_descending(
        ranges: impl IntoIterator<Item = RangeInclusive<u64>>,
        ack_delay_us: u32,
    ) -> Result<Self, WireError> {
        let mut iter = ranges.into_iter();
        let first = iter.next().ok_or(WireError::EmptySet)?;
        let mut ack = AckFrame {
            largest_acked: *first.end(),
            ack_delay_us,
            first_run_length: first.end() - first.start() + 1,
            ranges: Vec::new(),
        };
        let mut low = *first.start();
        for r in iter {
            if *r.end() + 1 >= low {
                return Err(WireError::InvalidFrame("ack ranges must descend with gaps"));
            }
            ack.ranges.push(AckRange {
                gap: low - r.end() - 1,
                run_length: r.end() - r.start() + 1,
            });
            low = *r.start();
        }
        Ok(ack)
    }

    /// Decodes the acknowledged numbers as descending inclusive ranges.
    pub fn acked_ranges(&self) -> Result<Vec<RangeInclusive<u64>>, WireError> {
        let bad = WireError::InvalidFrame("ack ranges underflow");
        if self.first_run_length == 0 || self.first_run_length > self.largest_acked + 1 {
            return Err(bad);
        }
        let mut out = Vec::with_capacity(1 + self.ranges.len());
        let mut low = self.largest_acked + 1 - self.first_run_length;
        out.push(low..=self.largest_acked);
        for r in &self.ranges {
            if r.run_length == 0 {
                return Err(bad);
            }
            let high = low
                .checked_sub(r.gap)
                .and_then(|v| v.checked_sub(1))
                .ok_or(bad.clone())?;
            low = (high + 1).checked_sub(r.run_length).ok_or(bad.clone())?;
            out.push(low..=high);
        }
        Ok(out)
    }

    pub fn encoded_len(&self) -> usize {
        ACK_FRAME_OVERHEAD + ACK_RANGE_LEN * self.ranges.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Padding,
    Stream(StreamFrame),
    Ack(AckFrame),
    Handshake { params: Vec<(u8, Vec<u8>)> },
    MaxData { limit: u64 },
    MaxStreamData { stream_id: u32, limit: u64 },
}

impl Frame {
    /// Frames other than ACK and PADDING require acknowledgment.
    pub fn is_ack_eliciting(&self) -> bool {
        !matches!(self, Frame::Padding | Frame::Ack(_))
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Frame::Padding => 1,
            Frame::Stream(s) => STREAM_FRAME_OVERHEAD + s.data.len(),
            Frame::Ack(a) => a.encoded_len(),
            Frame::Handshake { params } => 2 + params.iter().map(|(_, v)| 3 + v.len()).sum::<usize>(),
            Frame::MaxData { .. } => 9,
            Frame::MaxStreamData { .. } => 13,
        }
    }

    fn validate(&self) -> Result<(), WireError> {
        match self {
            Frame::Stream(s) if s.data.len() > u16::MAX as usize => {
                Err(WireError::InvalidFrame("stream data longer than u16"))
            }
            Frame::Stream(s) if s.offset.checked_add(s.data.len() as u64).is_none() => {
                Err(WireError::InvalidFrame("stream offset overflow"))
            }
            Frame::Ack(a) => {
                if a.ranges.len() > u16::MAX as usize {
                    return Err(WireError::InvalidFrame("too many ack ranges"));
                }
                a.acked_ranges().map(|_| ())
            }
            Frame::Handshake { params } => {
                if params.len() > u8::MAX as usize {
                    return Err(WireError::InvalidFrame("too many handshake params"));
                }
                if params.iter().any(|(_, v)| v.len() > u16::MAX as usize) {
                    return Err(WireError::InvalidFrame("handshake param too long"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Frame::Padding => out.push(FRAME_PADDING),
            Frame::Stream(s) => {
                out.push(FRAME_STREAM);
                out.extend_from_slice(&s.stream_id.to_be_bytes());
                out.extend_from_slice(&s.offset.to_be_bytes());
                out.extend_from_slice(&(s.data.len() as u16).to_be_bytes());
                out.push(u8::from(s.fin));
                out.extend_from_slice(&s.data);
            }
            Frame::Ack(a) => {
                out.push(FRAME_ACK);
                out.extend_from_slice(&a.largest_acked.to_be_bytes());
                out.extend_from_slice(&a.ack_delay_us.to_be_bytes());
                out.extend_from_slice(&(a.ranges.len() as u16).to_be_bytes());
                out.extend_from_slice(&a.first_run_length.to_be_bytes());
                for r in &a.ranges {
                    out.extend_from_slice(&r.gap.to_be_bytes());
                    out.extend_from_slice(&r.run_length.to_be_bytes());
                }
            }
            Frame::Handshake { params } => {
                out.push(FRAME_HANDSHAKE);
                out.push(params.len() as u8);
                for (tag, value) in params {
                    out.push(*tag);
                    out.extend_from_slice(&(value.len() as u16).to_be_bytes());
                    out.extend_from_slice(value);
                }
            }
            Frame::MaxData { limit } => {
                out.push(FRAME_MAX_DATA);
                out.extend_from_slice(&limit.to_be_bytes());
            }
            Frame::MaxStreamData { stream_id, limit } => {
                out.push(FRAME_MAX_STREAM_DATA);
                out.extend_from_slice(&stream_id.to_be_bytes());
                out.extend_from_slice(&limit.to_be_bytes());
            }
        }
    }
}

pub fn encode_packet(header: &PacketHeader, frames: &[Frame], cfg: &WireConfig) -> Result<Vec<u8>, WireError> {
    let limit = HEADER_LEN + cfg.mtu_payload;
    let mut size = HEADER_LEN;
    for f in frames {
        f.validate()?;
        size += f.encoded_len();
    }
    if size > limit {
        return Err(WireError::OversizedPacket { size, limit });
    }
    let mut out = Vec::with_capacity(size);
    out.push(header.version);
    out.push(header.flags);
    out.extend_from_slice(&header.connection_id.to_be_bytes());
    out.extend_from_slice(&header.packet_number.to_be_bytes());
    for f in frames {
        f.write(&mut out);
    }
    debug_assert_eq!(out.len(), size);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<PacketHeader, WireError> {
    let mut r = Reader { buf: bytes };
    let version = r.u8()?;
    let flags = r.u8()?;
    let connection_id = r.u64()?;
    let packet_number = r.u64()?;
    if version != VERSION {
        return Err(WireError::UnknownVersion(version));
    }
    Ok(PacketHeader {
        version,
        flags,
        connection_id,
        packet_number,
    })
}

pub fn decode_packet(bytes: &[u8]) -> Result<(PacketHeader, Vec<Frame>), WireError> {
    let header = decode_header(bytes)?;
    let mut r = Reader {
        buf: &bytes[HEADER_LEN..],
    };
    let mut frames = Vec::new();
    while !r.buf.is_empty() {
        let frame = match r.u8()? {
            FRAME_PADDING => Frame::Padding,
            FRAME_STREAM => {
                let stream_id = r.u32()?;
                let offset = r.u64()?;
                let length = r.u16()? as usize;
                let flags = r.u8()?;
                let data = r.take(length)?.to_vec();
                Frame::Stream(StreamFrame {
                    stream_id,
                    offset,
                    fin: flags & 0x01 != 0,
                    data,
                })
            }
            FRAME_ACK => {
                let largest_acked = r.u64()?;
                let ack_delay_us = r.u32()?;
                let count = r.u16()? as usize;
                let first_run_length = r.u64()?;
                let mut ranges = Vec::with_capacity(count.min(r.buf.len() / ACK_RANGE_LEN));
                for _ in 0..count {
                    let gap = r.u64()?;
                    let run_length = r.u64()?;
                    ranges.push(AckRange { gap, run_length });
                }
                let ack = AckFrame {
                    largest_acked,
                    ack_delay_us,
                    first_run_length,
                    ranges,
                };
                ack.acked_ranges()?;
                Frame::Ack(ack)
            }
            FRAME_HANDSHAKE => {
                let count = r.u8()?;
                let mut params = Vec::with_capacity(count as usize);
                for _ in 0..count {
                    let tag = r.u8()?;
                    let len = r.u16()? as usize;
                    params.push((tag, r.take(len)?.to_vec()));
                }
                Frame::Handshake { params }
            }
            FRAME_MAX_DATA => Frame::MaxData { limit: r.u64()? },
            FRAME_MAX_STREAM_DATA => Frame::MaxStreamData {
                stream_id: r.u32()?,
                limit: r.u64()?,
            },
            other => return Err(WireError::UnknownFrameType(other)),
        };
        frames.push(frame);
    }
    Ok((header, frames))
}

/// Encodes a set of received packet numbers as an ACK frame, keeping at
/// most `max_ranges` of the newest ranges.
pub fn encode_ack_ranges(received: &BTreeSet<u64>, max_ranges: usize) -> Result<AckFrame, WireError> {
    let mut ranges: Vec<RangeInclusive<u64>> = Vec::new();
    for &pn in received.iter().rev() {
        match ranges.last_mut() {
            Some(r) if *r.start() == pn + 1 => *r = pn..=*r.end(),
            _ => {
                if ranges.len() == max_ranges.max(1) {
                    break;
                }
                ranges.push(pn..=pn);
            }
        }
    }
    AckFrame::from_descending(ranges, 0)
}

/// Inverse of [`encode_ack_ranges`].
pub fn decode_ack_ranges(ack: &AckFrame) -> Result<BTreeSet<u64>, WireError> {
    Ok(ack.acked_ranges()?.into_iter().flatten().collect())
}
