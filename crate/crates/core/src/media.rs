//! Frame-level video model: traces of I/P/B frames grouped into fixed-size
//! chunks that each open with an I-frame.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MediaError {
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("trace invariant violated: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrameType {
    I,
    P,
    B,
}

impl FrameType {
    pub fn code(self) -> u8 {
        match self {
            FrameType::I => 0,
            FrameType::P => 1,
            FrameType::B => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FrameType::I),
            1 => Some(FrameType::P),
            2 => Some(FrameType::B),
            _ => None,
        }
    }
}

impl fmt::Display for FrameType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameType::I => "I",
            FrameType::P => "P",
            FrameType::B => "B",
        })
    }
}

impl FromStr for FrameType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "I" | "i" => Ok(FrameType::I),
            "P" | "p" => Ok(FrameType::P),
            "B" | "b" => Ok(FrameType::B),
            other => Err(format!("unknown frame type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reliability {
    Reliable,
    Unreliable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: u32,
    pub pts_ms: u64,
    pub frame_type: FrameType,
    pub size: u32,
}

/// Presentation timestamp of frame `index` in whole milliseconds.
pub fn pts_ms(index: u32, fps: f64) -> u64 {
    (index as f64 * 1000.0 / fps).floor() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTrace {
    pub fps: f64,
    pub duration_s: f64,
    pub frames_per_chunk: u32,
    pub frames: Vec<FrameRecord>,
}

impl VideoTrace {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.frames.iter().map(|f| f.size as u64).sum()
    }

    pub fn layout(&self) -> ChunkLayout {
        ChunkLayout::new(self.frames.len(), self.frames_per_chunk)
    }

    pub fn frame_period_s(&self) -> f64 {
        1.0 / self.fps
    }

    /// Checks chunk-start I-frames, sequential indices and sizes.
    pub fn validate(&self) -> Result<(), MediaError> {
        let bad = |m: String| Err(MediaError::InvariantViolation(m));
        if self.frames.is_empty() {
            return bad("trace has no frames".into());
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive".into());
        }
        if self.frames_per_chunk == 0 {
            return bad("frames_per_chunk must be positive".into());
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.index as usize != i {
                return bad(format!("frame at position {i} has index {}", f.index));
            }
            if f.size == 0 {
                return bad(format!("frame {i} has zero size"));
            }
            let chunk_start = (i as u32).is_multiple_of(self.frames_per_chunk);
            if chunk_start && f.frame_type != FrameType::I {
                return bad(format!("chunk-start frame {i} is {} not I", f.frame_type));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkLayout {
    pub frames_per_chunk: u32,
    /// Inclusive start and exclusive end frame index of each chunk.
    pub chunks: Vec<(u32, u32)>,
}

impl ChunkLayout {
    pub fn new(frame_count: usize, frames_per_chunk: u32) -> Self {
        let n = frame_count as u32;
        let fpc = frames_per_chunk.max(1);
        let chunks = (0..n).step_by(fpc as usize).map(|s| (s, (s + fpc).min(n))).collect();
        Self {
            frames_per_chunk: fpc,
            chunks,
        }
    }

    pub fn chunk_of(&self, frame_index: u32) -> usize {
        (frame_index / self.frames_per_chunk) as usize
    }

    pub fn is_chunk_start(&self, frame_index: u32) -> bool {
        frame_index.is_multiple_of(self.frames_per_chunk)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub duration_s: f64,
    pub fps: f64,
    pub total_bytes: u64,
    pub i_frame_byte_share: f64,
    pub i_frame_count_share: f64,
    /// Coefficient of variation of per-frame sizes within a frame type.
    pub size_jitter: f64,
    pub frames_per_chunk: u32,
    /// Explicit frame count; derived from duration and fps when `None`.
    pub frame_count: Option<u32>,
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            duration_s: 296.21,
            fps: 24.0,
            total_bytes: 176_000_000,
            i_frame_byte_share: 0.12,
            i_frame_count_share: 1.0 / 96.0,
            size_jitter: 0.2,
            frames_per_chunk: 96,
            // 75 I-frames + 7031 P/B frames; the rest of round(296.21 * 24)
            // are container control frames, which traces omit.
            frame_count: Some(7106),
            seed: 1,
        }
    }
}

impl GeneratorParams {
    pub fn resolved_frame_count(&self) -> u32 {
        self.frame_count
            .unwrap_or_else(|| (self.duration_s * self.fps).round() as u32)
    }

    fn validate(&self) -> Result<(), MediaError> {
        let bad = |m: &str| Err(MediaError::InvalidParams(m.to_string()));
        if !(self.duration_s > 0.0) || !(self.fps > 0.0) {
            return bad("duration and fps must be positive");
        }
        if !(self.i_frame_byte_share > 0.0 && self.i_frame_byte_share < 1.0) {
            return bad("i_frame_byte_share must be in (0, 1)");
        }
        if !(self.i_frame_count_share > 0.0 && self.i_frame_count_share < 1.0) {
            return bad("i_frame_count_share must be in (0, 1)");
        }
        if !(self.size_jitter >= 0.0) {
            return bad("size_jitter must be non-negative");
        }
        if self.frames_per_chunk == 0 {
            return bad("frames_per_chunk must be positive");
        }
        let n = self.resolved_frame_count() as u64;
        let n_i = n.div_ceil(self.frames_per_chunk as u64);
        if n < 2 || n_i >= n {
            return bad("trace needs at least one P/B frame");
        }
        let i_bytes = (self.total_bytes as f64 * self.i_frame_byte_share).round() as u64;
        if i_bytes < n_i || self.total_bytes - i_bytes < n - n_i {
            return bad("total_bytes too small for the frame count");
        }
        Ok(())
    }
}

/// Sizes drawn lognormal around `total / count`, then rescaled so they sum
/// to exactly `total`.
fn draw_sizes(count: usize, total: u64, cv: f64, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mean = total as f64 / count as f64;
    let raw: Vec<f64> = if cv == 0.0 {
        vec![1.0; count]
    } else {
        let sigma2 = (1.0 + cv * cv).ln();
        let dist = LogNormal::new(-sigma2 / 2.0, sigma2.sqrt()).expect("valid lognormal");
        (0..count).map(|_| dist.sample(rng)).collect()
    };
    let sum: f64 = raw.iter().sum();
    let mut sizes: Vec<u32> = raw
        .iter()
        .map(|r| ((r / sum) * total as f64).floor().max(1.0) as u32)
        .collect();
    // spread the rounding remainder one byte at a time, largest first
    let assigned: u64 = sizes.iter().map(|&s| s as u64).sum();
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
    if assigned < total {
        let mut rem = total - assigned;
        for &i in order.iter().cycle() {
            if rem == 0 {
                break;
            }
            sizes[i] += 1;
            rem -= 1;
        }
    } else {
        let mut excess = assigned - total;
        for &i in order.iter().cycle() {
            if excess == 0 {
                break;
            }
            if sizes[i] > 1 {
                sizes[i] -= 1;
                excess -= 1;
            }
        }
    }
    debug_assert!(mean > 0.0);
    sizes
}

pub fn generate_trace(params: &GeneratorParams) -> Result<VideoTrace, MediaError> {
    params.validate()?;
    let n = params.resolved_frame_count() as usize;
    let fpc = params.frames_per_chunk;
    let layout = ChunkLayout::new(n, fpc);
    let n_i = layout.chunks.len();
    let n_pb = n - n_i;
    let i_total = (params.total_bytes as f64 * params.i_frame_byte_share).round() as u64;
    let pb_total = params.total_bytes - i_total;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let i_sizes = draw_sizes(n_i, i_total, params.size_jitter, &mut rng);
    let pb_sizes = draw_sizes(n_pb, pb_total, params.size_jitter, &mut rng);

    let (mut i_iter, mut pb_iter) = (i_sizes.into_iter(), pb_sizes.into_iter());
    let frames = (0..n as u32)
        .map(|index| {
            let pos = index % fpc;
            let (frame_type, size) = if pos == 0 {
                (FrameType::I, i_iter.next().unwrap())
            } else if pos.is_multiple_of(3) {
                (FrameType::P, pb_iter.next().unwrap())
            } else {
                (FrameType::B, pb_iter.next().unwrap())
            };
            FrameRecord {
                index,
                pts_ms: pts_ms(index, params.fps),
                frame_type,
                size,
            }
        })
        .collect();
    let trace = VideoTrace {
        fps: params.fps,
        duration_s: params.duration_s,
        frames_per_chunk: fpc,
        frames,
    };
    trace.validate()?;
    Ok(trace)
}

pub const TRACE_CSV_HEADER: &str = "index,pts_ms,type,size_bytes";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsvOptions {
    pub fps: f64,
    pub frames_per_chunk: u32,
    /// Declared duration; `frames / fps` when `None`.
    pub duration_s: Option<f64>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            fps: 24.0,
            frames_per_chunk: 96,
            duration_s: None,
        }
    }
}

pub fn parse_trace_csv(text: &str) -> Result<VideoTrace, MediaError> {
    parse_trace_csv_with(text, &CsvOptions::default())
}

/// Parses `index,pts_ms,type,size_bytes` rows. The header line is optional.
pub fn parse_trace_csv_with(text: &str, opts: &CsvOptions) -> Result<VideoTrace, MediaError> {
    let mut frames = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if frames.is_empty() && line.starts_with("index") {
            if line.replace(' ', "") != TRACE_CSV_HEADER {
                return Err(MediaError::ParseError {
                    line: line_no,
                    message: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        let err = |message: String| MediaError::ParseError { line: line_no, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let index: u32 = fields[0].parse().map_err(|e| err(format!("index: {e}")))?;
        let pts: u64 = fields[1].parse().map_err(|e| err(format!("pts_ms: {e}")))?;
        let frame_type: FrameType = fields[2].parse().map_err(err)?;
        let size: u32 = fields[3].parse().map_err(|e| err(format!("size_bytes: {e}")))?;
        frames.push(FrameRecord {
            index,
            pts_ms: pts,
            frame_type,
            size,
        });
    }
    if frames.is_empty() {
        return Err(MediaError::ParseError {
            line: text.lines().count().max(1),
            message: "no frames".into(),
        });
    }
    let trace = VideoTrace {
        fps: opts.fps,
        duration_s: opts.duration_s.unwrap_or(frames.len() as f64 / opts.fps),
        frames_per_chunk: opts.frames_per_chunk,
        frames,
    };
    trace.validate()?;
    for f in &trace.frames {
        let expected = pts_ms(f.index, trace.fps);
        if f.pts_ms.abs_diff(expected) > 1 {
            return Err(MediaError::InvariantViolation(format!(
                "frame {} has pts {} ms, expected {expected}",
                f.index, f.pts_ms
            )));
        }
    }
    Ok(trace)
}

pub fn write_trace_csv(trace: &VideoTrace) -> String {
    let mut out = String::with_capacity(trace.frames.len() * 24);
    out.push_str(TRACE_CSV_HEADER);
    out.push('\n');
    for f in &trace.frames {
        out.push_str(&format!("{},{},{},{}\n", f.index, f.pts_ms, f.frame_type, f.size));
    }
    out
}

/// I-frames travel reliably; everything else does not.
pub fn tag_frame(frame: &FrameRecord) -> Reliability {
    match frame.frame_type {
        FrameType::I => Reliability::Reliable,
        FrameType::P | FrameType::B => Reliability::Unreliable,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub index: u32,
    pub pts_ms: u64,
    #[serde(rename = "type")]
    pub frame_type: FrameType,
    pub size: u32,
    pub reliable: bool,
}

/// Stream description handed to clients, with per-frame reliability tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fps: f64,
    pub duration_s: f64,
    pub frames_per_chunk: u32,
    pub frames: Vec<ManifestFrame>,
}

impl Manifest {
    pub fn chunks(&self) -> ChunkLayout {
        ChunkLayout::new(self.frames.len(), self.frames_per_chunk)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

pub fn build_manifest(trace: &VideoTrace, layout: &ChunkLayout) -> Manifest {
    Manifest {
        fps: trace.fps,
        duration_s: trace.duration_s,
        frames_per_chunk: layout.frames_per_chunk,
        frames: trace
            .frames
            .iter()
            .map(|f| ManifestFrame {
                index: f.index,
                pts_ms: f.pts_ms,
                frame_type: f.frame_type,
                size: f.size,
                reliable: tag_frame(f) == Reliability::Reliable,
            })
            .collect(),
    }
}
