//! Experiment driver: one simulated streaming session per run, a mode by
//! loss-rate matrix with repetitions, aggregation and report output.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fec::FecMode;
use crate::media::{self, GeneratorParams, MediaError, VideoTrace};
use crate::netem::{self, DuplexLink, LinkConfig, LinkConfigError, LinkStats};
use crate::qoe::{self, MosClass, PlaybackConfig, PlaybackError, PlaybackEvents};
use crate::session::{
    Client, ClientStats, FrameOutcome, FrameStatus, ProtocolMode, Server, ServerConfig, ServerStats, SessionError,
};
use crate::time::SimTime;
use crate::transport::{Connection, ConnectionStats, Side, TransportConfig};

pub const DEFAULT_LOSS_RATES: [f64; 8] = [0.0, 0.0008, 0.0016, 0.0032, 0.0064, 0.0128, 0.0256, 0.0512];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Link(#[from] LinkConfigError),
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Playback(#[from] PlaybackError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("report parse: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TraceSource {
    Synthetic(GeneratorParams),
    Csv(PathBuf),
}

impl Default for TraceSource {
    fn default() -> Self {
        TraceSource::Synthetic(GeneratorParams::default())
    }
}

impl TraceSource {
    pub fn load(&self) -> Result<VideoTrace, HarnessError> {
        let trace = match self {
            TraceSource::Synthetic(p) => media::generate_trace(p)?,
            TraceSource::Csv(path) => media::parse_trace_csv(&std::fs::read_to_string(path)?)?,
        };
        trace.validate()?;
        Ok(trace)
    }
}

/// Knobs shared by every run of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub transport: TransportConfig,
    pub fec_mode: FecMode,
    pub playback: PlaybackConfig,
    /// Simulated-time cap as a multiple of the video duration.
    pub deadline_factor: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            transport: TransportConfig::default(),
            fec_mode: FecMode::Static,
            playback: PlaybackConfig::default(),
            deadline_factor: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub modes: Vec<ProtocolMode>,
    pub loss_rates: Vec<f64>,
    pub repetitions: u32,
    /// Loss rate and seed are set per run.
    pub link: LinkConfig,
    pub trace: TraceSource,
    pub base_seed: u64,
    pub options: RunOptions,
    /// Worker threads; runs are independent.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            modes: ProtocolMode::ALL.to_vec(),
            loss_rates: DEFAULT_LOSS_RATES.to_vec(),
            repetitions: 10,
            link: LinkConfig::default(),
            trace: TraceSource::default(),
            base_seed: 0,
            options: RunOptions::default(),
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.modes.is_empty() {
            return bad("at least one mode is required");
        }
        if self.loss_rates.is_empty() {
            return bad("at least one loss rate is required");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if !(self.options.deadline_factor > 1.0) {
            return bad("the deadline must exceed the video duration");
        }
        for &p in &self.loss_rates {
            LinkConfig {
                loss_rate: p,
                ..self.link.clone()
            }
            .validate()?;
        }
        self.link.validate()?;
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of one run: the base seed xor a hash of its cell and repetition.
pub fn run_seed(base: u64, mode: ProtocolMode, loss: f64, rep: u32) -> u64 {
    let h = splitmix64(mode as u64 + 1);
    let h = splitmix64(h ^ loss.to_bits());
    base ^ splitmix64(h ^ rep as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub mode: ProtocolMode,
    pub loss: f64,
    pub rep: u32,
    pub seed: u64,
    pub buf_ratio: f64,
    pub rate_buf: f64,
    pub assim: f64,
    pub mos: MosClass,
    pub startup_delay_s: f64,
    pub stall_count: u64,
    pub bytes_sent: u64,
    pub fec_overhead_ratio: f64,
    pub frames_intact: u64,
    pub frames_recovered: u64,
    pub frames_corrupted: u64,
    pub frames_missing: u64,
    pub late_frames: u64,
    pub completed: bool,
    pub sim_time_s: f64,
}

/// Everything a single run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub row: RunRow,
    pub statuses: Vec<FrameStatus>,
    pub events: PlaybackEvents,
    pub server: ServerStats,
    pub client: ClientStats,
    pub server_transport: ConnectionStats,
    pub client_transport: ConnectionStats,
    pub forward_link: LinkStats,
    pub reverse_link: LinkStats,
}

/// Streams `trace` once over an emulated path and scores the playback.
pub fn run_session(
    mode: ProtocolMode,
    link_cfg: &LinkConfig,
    trace: Arc<VideoTrace>,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunOutcome, HarnessError> {
    let mut link = DuplexLink::new(LinkConfig {
        seed,
        ..link_cfg.clone()
    })?;
    let mut cconn = Connection::new(Side::Client, opts.transport.clone());
    let mut sconn = Connection::new(Side::Server, opts.transport.clone());
    let mut server = Server::new(
        trace.clone(),
        ServerConfig {
            fec_mode: opts.fec_mode,
            ..ServerConfig::new(mode)
        },
    );
    let mut client = Client::new();
    let n = trace.len();
    let deadline = SimTime::ZERO + Duration::from_secs_f64(trace.duration_s * opts.deadline_factor);
    let mut statuses: Vec<FrameStatus> = Vec::with_capacity(n);
    let mut now = SimTime::ZERO;
    let mut completed = false;

    loop {
        for (d, _) in link.forward.poll(now) {
            cconn.on_datagram(&d, now);
        }
        for (d, _) in link.reverse.poll(now) {
            sconn.on_datagram(&d, now);
        }
        if cconn.next_timeout().is_some_and(|t| t <= now) {
            cconn.on_timeout(now);
        }
        if sconn.next_timeout().is_some_and(|t| t <= now) {
            sconn.on_timeout(now);
        }
        if sconn.is_established() {
            server.serve(&mut sconn, now)?;
        }
        statuses.extend(client.reassemble(&mut cconn, now)?);
        for d in sconn.poll_transmit(now) {
            link.forward.push(d, now);
        }
        for d in cconn.poll_transmit(now) {
            link.reverse.push(d, now);
        }
        if statuses.len() == n && client.is_complete() {
            completed = true;
            break;
        }
        let next = netem::next_event_time(
            [&link.forward, &link.reverse],
            [cconn.next_timeout(), sconn.next_timeout()],
        );
        match next {
            Some(t) if t <= deadline => now = if t > now { t } else { now + Duration::from_micros(1) },
            _ => break,
        }
    }
    if !completed {
        debug!(
            "{mode} seed {seed}: stopped at {now} with {} of {n} frames",
            statuses.len()
        );
        let cut = deadline.max(now);
        for f in &trace.frames[statuses.len()..] {
            statuses.push(FrameStatus {
                index: f.index,
                frame_type: f.frame_type,
                outcome: FrameOutcome::Missing,
                complete_time: cut,
            });
        }
    }

    let pcfg = PlaybackConfig {
        fps: trace.fps,
        frames_per_chunk: trace.frames_per_chunk,
        ..opts.playback
    };
    let events = qoe::simulate_playback(&statuses, &pcfg, mode)?;
    let ssim = qoe::rendered_ssim(&statuses, &events, &pcfg.quality);
    let assim = qoe::assim(&ssim, &events, &pcfg);
    let count = |o: FrameOutcome| events.rendered.iter().filter(|&&r| r == o).count() as u64;
    let sstats = server.stats().clone();
    let row = RunRow {
        mode,
        loss: link_cfg.loss_rate,
        rep: 0,
        seed,
        buf_ratio: qoe::buf_ratio(&events, trace.duration_s),
        rate_buf: qoe::rate_buf(&events, n),
        assim,
        mos: qoe::mos_class(assim),
        startup_delay_s: events.startup_delay().as_secs_f64(),
        stall_count: events.stalls.len() as u64,
        bytes_sent: sconn.stats().bytes_sent,
        fec_overhead_ratio: sstats.fec_overhead_bytes as f64 / trace.total_bytes() as f64,
        frames_intact: count(FrameOutcome::Intact),
        frames_recovered: count(FrameOutcome::Recovered),
        frames_corrupted: count(FrameOutcome::Corrupted),
        frames_missing: count(FrameOutcome::Missing),
        late_frames: events.late_frames(&statuses) as u64,
        completed,
        sim_time_s: now.as_secs_f64(),
    };
    Ok(RunOutcome {
        row,
        statuses,
        events,
        server: sstats,
        client: client.stats().clone(),
        server_transport: sconn.stats().clone(),
        client_transport: cconn.stats().clone(),
        forward_link: link.forward.stats().clone(),
        reverse_link: link.reverse.stats().clone(),
    })
}

pub fn run_once(
    mode: ProtocolMode,
    link_cfg: &LinkConfig,
    trace: Arc<VideoTrace>,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunRow, HarnessError> {
    run_session(mode, link_cfg, trace, seed, opts).map(|o| o.row)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub stddev: f64,
}

impl Summary {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len().is_multiple_of(2) {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        } else {
            sorted[mid]
        };
        let stddev = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Summary { mean, median, stddev }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mode: ProtocolMode,
    pub loss: f64,
    pub runs: u32,
    pub completed: u32,
    pub buf_ratio: Summary,
    pub rate_buf: Summary,
    pub assim: Summary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub runs: Vec<RunRow>,
    pub aggregates: Vec<Aggregate>,
}

impl RunReport {
    /// Sorts rows and recomputes one aggregate per (mode, loss) cell.
    pub fn from_rows(mut runs: Vec<RunRow>) -> Self {
        runs.sort_by_key(|a| (a.mode, a.loss.to_bits(), a.rep));
        let mut aggregates: Vec<Aggregate> = Vec::new();
        for cell in runs.chunk_by(|a, b| a.mode == b.mode && a.loss == b.loss) {
            let pick = |f: fn(&RunRow) -> f64| Summary::of(&cell.iter().map(f).collect::<Vec<_>>());
            aggregates.push(Aggregate {
                mode: cell[0].mode,
                loss: cell[0].loss,
                runs: cell.len() as u32,
                completed: cell.iter().filter(|r| r.completed).count() as u32,
                buf_ratio: pick(|r| r.buf_ratio),
                rate_buf: pick(|r| r.rate_buf),
                assim: pick(|r| r.assim),
            });
        }
        RunReport { runs, aggregates }
    }

    pub fn aggregate(&self, mode: ProtocolMode, loss: f64) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.mode == mode && a.loss == loss)
    }
}

/// Runs every mode, loss rate and repetition of `cfg`.
pub fn run_matrix(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let trace = Arc::new(cfg.trace.load()?);
    let mut jobs_list = Vec::new();
    for &mode in &cfg.modes {
        for &loss in &cfg.loss_rates {
            for rep in 0..cfg.repetitions {
                jobs_list.push((mode, loss, rep));
            }
        }
    }
    let next = AtomicUsize::new(0);
    let rows = Mutex::new(Vec::with_capacity(jobs_list.len()));
    let first_error: Mutex<Option<HarnessError>> = Mutex::new(None);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(mode, loss, rep)) = jobs_list.get(i) else {
            break;
        };
        let seed = run_seed(cfg.base_seed, mode, loss, rep);
        let link = LinkConfig {
            loss_rate: loss,
            ..cfg.link.clone()
        };
        match run_once(mode, &link, trace.clone(), seed, &cfg.options) {
            Ok(mut row) => {
                row.rep = rep;
                info!(
                    "{mode} loss {loss} rep {rep}: bufRatio {:.4} rateBuf {:.6} aSSIM {:.4}",
                    row.buf_ratio, row.rate_buf, row.assim
                );
                rows.lock().unwrap().push(row);
            }
            Err(e) => {
                first_error.lock().unwrap().get_or_insert(e);
            }
        }
    };
    let jobs = cfg.jobs.clamp(1, jobs_list.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    Ok(RunReport::from_rows(rows.into_inner().unwrap()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Gnuplot,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "gnuplot" => Ok(ReportFormat::Gnuplot),
            other => Err(format!("unknown format '{other}'")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AggregateCsvRow {
    mode: ProtocolMode,
    loss: f64,
    runs: u32,
    completed: u32,
    buf_ratio_mean: f64,
    buf_ratio_median: f64,
    buf_ratio_stddev: f64,
    rate_buf_mean: f64,
    rate_buf_median: f64,
    rate_buf_stddev: f64,
    assim_mean: f64,
    assim_median: f64,
    assim_stddev: f64,
}

const RUN_HEADER: &[&str] = &[
    "mode",
    "loss",
    "rep",
    "seed",
    "buf_ratio",
    "rate_buf",
    "assim",
    "mos",
    "startup_delay_s",
    "stall_count",
    "bytes_sent",
    "fec_overhead_ratio",
    "frames_intact",
    "frames_recovered",
    "frames_corrupted",
    "frames_missing",
    "late_frames",
    "completed",
    "sim_time_s",
];

const AGGREGATE_HEADER: &[&str] = &[
    "mode",
    "loss",
    "runs",
    "completed",
    "buf_ratio_mean",
    "buf_ratio_median",
    "buf_ratio_stddev",
    "rate_buf_mean",
    "rate_buf_median",
    "rate_buf_stddev",
    "assim_mean",
    "assim_median",
    "assim_stddev",
];

fn csv_block<T: Serialize>(header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<String, HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let io = |e: csv::Error| HarnessError::Parse(e.to_string());
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Renders a report. CSV holds the per-run rows, a blank line, then the
/// aggregates; gnuplot holds one index block per metric with the median
/// of each mode against the loss rate in percent.
pub fn emit_report(report: &RunReport, format: ReportFormat) -> Result<String, HarnessError> {
    match format {
        ReportFormat::Csv => {
            let runs = csv_block(RUN_HEADER, &report.runs)?;
            let aggs = csv_block(
                AGGREGATE_HEADER,
                report.aggregates.iter().map(|a| AggregateCsvRow {
                    mode: a.mode,
                    loss: a.loss,
                    runs: a.runs,
                    completed: a.completed,
                    buf_ratio_mean: a.buf_ratio.mean,
                    buf_ratio_median: a.buf_ratio.median,
                    buf_ratio_stddev: a.buf_ratio.stddev,
                    rate_buf_mean: a.rate_buf.mean,
                    rate_buf_median: a.rate_buf.median,
                    rate_buf_stddev: a.rate_buf.stddev,
                    assim_mean: a.assim.mean,
                    assim_median: a.assim.median,
                    assim_stddev: a.assim.stddev,
                }),
            )?;
            Ok(format!("{runs}\n{aggs}"))
        }
        ReportFormat::Json => serde_json::to_string_pretty(report).map_err(|e| HarnessError::Parse(e.to_string())),
        ReportFormat::Gnuplot => Ok(gnuplot(report)),
    }
}

fn gnuplot(report: &RunReport) -> String {
    let mut modes: Vec<ProtocolMode> = report.aggregates.iter().map(|a| a.mode).collect();
    modes.dedup();
    modes.sort();
    modes.dedup();
    let mut losses: Vec<f64> = report.aggregates.iter().map(|a| a.loss).collect();
    losses.sort_by(f64::total_cmp);
    losses.dedup();
    let metrics: [(&str, fn(&Aggregate) -> f64); 3] = [
        ("bufRatio", |a| a.buf_ratio.median),
        ("rateBuf", |a| a.rate_buf.median),
        ("aSSIM", |a| a.assim.median),
    ];
    let mut out = String::new();
    for (bi, (name, f)) in metrics.iter().enumerate() {
        if bi > 0 {
            out.push_str("\n\n");
        }
        let _ = write!(out, "# {name} (median)\n# loss_pct");
        for m in &modes {
            let _ = write!(out, " {m}");
        }
        out.push('\n');
        for &loss in &losses {
            let _ = write!(out, "{}", (loss * 100.0 * 1e9).round() / 1e9);
            for &m in &modes {
                match report.aggregate(m, loss) {
                    Some(a) => {
                        let _ = write!(out, " {}", f(a));
                    }
                    None => out.push_str(" NaN"),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Reads back the CSV written by [`emit_report`].
pub fn parse_report_csv(text: &str) -> Result<RunReport, HarnessError> {
    let (runs_text, aggs_text) = text
        .split_once("\n\n")
        .ok_or_else(|| HarnessError::Parse("missing aggregates section".into()))?;
    let perr = |e: csv::Error| HarnessError::Parse(e.to_string());
    let mut runs = Vec::new();
    for r in csv::Reader::from_reader(runs_text.as_bytes()).deserialize() {
        runs.push(r.map_err(perr)?);
    }
    let mut aggregates = Vec::new();
    for r in csv::Reader::from_reader(aggs_text.as_bytes()).deserialize::<AggregateCsvRow>() {
        let a = r.map_err(perr)?;
        aggregates.push(Aggregate {
            mode: a.mode,
            loss: a.loss,
            runs: a.runs,
            completed: a.completed,
            buf_ratio: Summary {
                mean: a.buf_ratio_mean,
                median: a.buf_ratio_median,
                stddev: a.buf_ratio_stddev,
            },
            rate_buf: Summary {
                mean: a.rate_buf_mean,
                median: a.rate_buf_median,
                stddev: a.rate_buf_stddev,
            },
            assim: Summary {
                mean: a.assim_mean,
                median: a.assim_median,
                stddev: a.assim_stddev,
            },
        });
    }
    Ok(RunReport { runs, aggregates })
}
