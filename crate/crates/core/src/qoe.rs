//! Playback simulation and quality-of-experience metrics.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media::FrameType;
use crate::session::{FrameOutcome, FrameStatus, ProtocolMode};
use crate::time::SimTime;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlaybackError {
    #[error("frame statuses are incomplete or out of order at position {0}")]
    IncompleteStatuses(usize),
    #[error("invalid playback configuration: {0}")]
    InvalidConfig(&'static str),
}

/// Surrogate for per-frame SSIM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityModel {
    /// Score of a corrupted or missing frame.
    pub s_self: f64,
    /// Multiplier per unresolved loss for later frames of the same chunk.
    pub s_prop: f64,
    pub floor: f64,
}

impl Default for QualityModel {
    fn default() -> Self {
        Self {
            s_self: 0.30,
            s_prop: 0.85,
            floor: 0.20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaybackConfig {
    pub fps: f64,
    pub frames_per_chunk: u32,
    pub quality: QualityModel,
}

impl Default for PlaybackConfig {
    fn default() -> Self {
        Self {
            fps: 24.0,
            frames_per_chunk: 96,
            quality: QualityModel::default(),
        }
    }
}

impl PlaybackConfig {
    pub fn frame_period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.fps)
    }

    fn validate(&self) -> Result<(), PlaybackError> {
        if !(self.fps > 0.0) {
            return Err(PlaybackError::InvalidConfig("fps must be positive"));
        }
        if self.frames_per_chunk == 0 {
            return Err(PlaybackError::InvalidConfig("frames_per_chunk must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaybackEvents {
    pub start_time: SimTime,
    pub stalls: Vec<(SimTime, SimTime)>,
    pub render_times: Vec<SimTime>,
    /// Outcome as shown to the viewer: an unreliable frame that missed its
    /// due time is rendered as missing.
    pub rendered: Vec<FrameOutcome>,
}

impl PlaybackEvents {
    pub fn startup_delay(&self) -> Duration {
        self.start_time.saturating_since(SimTime::ZERO)
    }

    pub fn total_stall(&self) -> Duration {
        self.stalls.iter().map(|&(a, b)| b - a).sum()
    }

    pub fn late_frames(&self, statuses: &[FrameStatus]) -> usize {
        statuses
            .iter()
            .zip(&self.rendered)
            .filter(|(s, r)| s.outcome != **r)
            .count()
    }
}

/// Plays the frames back.
///
/// The clock starts once the first chunk is resolved. Frame `i` is due at
/// `start + i / fps` plus all stall time so far. A reliable frame that is
/// not final when due stalls playback until it is; back-to-back waits form
/// one stall. In partially reliable modes a late P or B frame never
/// stalls: the player consumes zeros in its place.
pub fn simulate_playback(
    statuses: &[FrameStatus],
    cfg: &PlaybackConfig,
    mode: ProtocolMode,
) -> Result<PlaybackEvents, PlaybackError> {
    cfg.validate()?;
    for (i, s) in statuses.iter().enumerate() {
        if s.index as usize != i {
            return Err(PlaybackError::IncompleteStatuses(i));
        }
    }
    let first_chunk = statuses.len().min(cfg.frames_per_chunk as usize);
    let start_time = statuses[..first_chunk]
        .iter()
        .map(|s| s.complete_time)
        .max()
        .unwrap_or(SimTime::ZERO);

    let period_us = 1e6 / cfg.fps;
    let mut stall_us: u64 = 0;
    let mut stalls: Vec<(SimTime, SimTime)> = Vec::new();
    let mut render_times = Vec::with_capacity(statuses.len());
    let mut rendered = Vec::with_capacity(statuses.len());
    for (i, s) in statuses.iter().enumerate() {
        let due = SimTime(start_time.0 + (i as f64 * period_us).round() as u64 + stall_us);
        let droppable = mode.is_partially_reliable() && s.frame_type != FrameType::I;
        if s.complete_time <= due {
            render_times.push(due);
            rendered.push(s.outcome);
        } else if droppable {
            render_times.push(due);
            rendered.push(FrameOutcome::Missing);
        } else {
            let end = s.complete_time;
            match stalls.last_mut() {
                Some(last) if last.1 == due => last.1 = end,
                _ => stalls.push((due, end)),
            }
            stall_us += end.0 - due.0;
            render_times.push(end);
            rendered.push(s.outcome);
        }
    }
    Ok(PlaybackEvents {
        start_time,
        stalls,
        render_times,
        rendered,
    })
}

/// Re-buffering time over video duration. May exceed 1.
pub fn buf_ratio(events: &PlaybackEvents, video_duration_s: f64) -> f64 {
    events.total_stall().as_secs_f64() / video_duration_s
}

/// Stall events per frame.
pub fn rate_buf(events: &PlaybackEvents, total_frames: usize) -> f64 {
    events.stalls.len() as f64 / total_frames as f64
}

/// Per-frame quality. Good frames score 1 unless earlier losses in the
/// same chunk degrade them to `max(floor, s_prop^u)`; a lost frame scores
/// `s_self`, or less when the chunk is already degraded further. The loss
/// count resets at every I-frame.
pub fn frame_ssim(frames: &[(FrameType, FrameOutcome)], model: &QualityModel) -> Vec<f64> {
    let mut losses: i32 = 0;
    frames
        .iter()
        .map(|&(ty, outcome)| {
            if ty == FrameType::I {
                losses = 0;
            }
            let carried = model.s_prop.powi(losses).max(model.floor);
            if outcome.is_good() {
                carried
            } else {
                losses += 1;
                model.s_self.min(carried)
            }
        })
        .collect()
}

/// Convenience: [`frame_ssim`] over what the viewer actually saw.
pub fn rendered_ssim(statuses: &[FrameStatus], events: &PlaybackEvents, model: &QualityModel) -> Vec<f64> {
    let frames: Vec<(FrameType, FrameOutcome)> = statuses
        .iter()
        .zip(&events.rendered)
        .map(|(s, &r)| (s.frame_type, r))
        .collect();
    frame_ssim(&frames, model)
}

/// Mean quality per frame period, with every period spent stalled
/// scoring zero.
pub fn assim(frame_ssims: &[f64], events: &PlaybackEvents, cfg: &PlaybackConfig) -> f64 {
    let stall_periods = (events.total_stall().as_secs_f64() * cfg.fps - 1e-9).ceil().max(0.0);
    let denom = frame_ssims.len() as f64 + stall_periods;
    if denom == 0.0 {
        return 0.0;
    }
    frame_ssims.iter().sum::<f64>() / denom
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MosClass {
    Bad,
    Poor,
    Fair,
    Good,
    Excellent,
}

impl fmt::Display for MosClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MosClass::Bad => "bad",
            MosClass::Poor => "poor",
            MosClass::Fair => "fair",
            MosClass::Good => "good",
            MosClass::Excellent => "excellent",
        })
    }
}

impl std::str::FromStr for MosClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "bad" => MosClass::Bad,
            "poor" => MosClass::Poor,
            "fair" => MosClass::Fair,
            "good" => MosClass::Good,
            "excellent" => MosClass::Excellent,
            other => return Err(format!("unknown MOS class '{other}'")),
        })
    }
}

pub fn mos_class(assim: f64) -> MosClass {
    match assim {
        a if a >= 0.99 => MosClass::Excellent,
        a if a >= 0.95 => MosClass::Good,
        a if a >= 0.88 => MosClass::Fair,
        a if a >= 0.50 => MosClass::Poor,
        _ => MosClass::Bad,
    }
}
