//! Datagram wire format and the live socket runner.
//!
//! Data frames carry one block plus its quantized utility share; a fixed
//! 16-byte stop frame travels back over a separate control socket. All
//! integers are big-endian; a trailing CRC-32 (IEEE) covers header and
//! payload, and frames that fail any check are counted and dropped like loss.
//!
//! Layouts (see docs/PROTOCOL.md):
//!
//! ```text
//! data: "BK" ver u8 | image_id u32 | block_id u32 | n_blocks u32 |
//!       utility_q u16 | total_utility_q u32 | payload_len u16 |
//!       payload bytes | crc32 u32
//! stop: "BS" ver u8 | image_id u32 | stop_step u32 | reason u8 | crc32 u32
//! ```

use std::collections::VecDeque;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use crate::detector::{BBox, DetectionSet, Detector};
use crate::error::{Error, Result};
use crate::image::{
    reconstruct, BlockGrid, BlockId, BlockPayloads, ImageRaster, RasterMeta, ReceptionSet,
};
use crate::metrics::match_success;
use crate::policy::{PolicyState, StopDecision, StopPolicy, StopReason};
use crate::sim::{ArrivalSchedule, OrderKind, RunTrace, TraceEvent};
use crate::utility::UtilityMap;
use crate::image::extract_block;

pub const MAGIC_DATA: [u8; 2] = *b"BK";
pub const MAGIC_STOP: [u8; 2] = *b"BS";
pub const WIRE_VERSION: u8 = 1;

/// Fixed bytes around a data payload: header (23) + crc (4).
pub const DATA_FRAME_OVERHEAD: usize = 27;
pub const STOP_FRAME_LEN: usize = 16;

/// Default whole-frame budget; keeps frames under common path MTUs.
pub const DEFAULT_MTU_BUDGET: usize = 1200;

/// Reasons a received datagram is rejected. Rejected frames count as loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("frame truncated")]
    TooShort,
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version")]
    BadVersion,
    #[error("crc mismatch")]
    BadCrc,
    #[error("payload length inconsistent with datagram size")]
    LengthMismatch,
    #[error("unknown stop reason code")]
    BadReason,
}

/// One block on the wire with its stopping metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFrame {
    pub image_id: u32,
    pub block_id: BlockId,
    pub n_blocks: u32,
    /// Utility share of this block, round(c_i / C_tot * 65535); 0 when C_tot = 0.
    pub utility_q: u16,
    /// Total utility C_tot in 16.16 fixed point.
    pub total_utility_q: u32,
    pub payload: Vec<u8>,
}

/// Receiver-to-sender stop signal; idempotent, safe to retransmit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopFrame {
    pub image_id: u32,
    pub stop_step: u32,
    pub reason: StopReason,
}

pub fn quantize_share(value: f64, total: f64) -> u16 {
    if total > 0.0 {
        ((value / total) * 65535.0).round().clamp(0.0, 65535.0) as u16
    } else {
        0
    }
}

pub fn dequantize_share(q: u16) -> f64 {
    f64::from(q) / 65535.0
}

pub fn quantize_total(total: f64) -> u32 {
    (total * 65536.0).round().clamp(0.0, f64::from(u32::MAX)) as u32
}

pub fn dequantize_total(q: u32) -> f64 {
    f64::from(q) / 65536.0
}

fn reason_code(reason: StopReason) -> u8 {
    match reason {
        StopReason::UtilityThreshold => 0,
        StopReason::Stability => 1,
        StopReason::FullReception => 2,
        StopReason::Exhausted => 3,
    }
}

fn reason_from_code(code: u8) -> std::result::Result<StopReason, FrameError> {
    match code {
        0 => Ok(StopReason::UtilityThreshold),
        1 => Ok(StopReason::Stability),
        2 => Ok(StopReason::FullReception),
        3 => Ok(StopReason::Exhausted),
        _ => Err(FrameError::BadReason),
    }
}

/// Encodes a data frame; fails when the whole frame would exceed `mtu_budget`.
pub fn encode_data_frame(frame: &DataFrame, mtu_budget: usize) -> Result<Vec<u8>> {
    let total_len = DATA_FRAME_OVERHEAD + frame.payload.len();
    if total_len > mtu_budget {
        return Err(Error::PayloadTooLarge {
            got: total_len,
            budget: mtu_budget,
        });
    }
    let mut out = Vec::with_capacity(total_len);
    out.extend_from_slice(&MAGIC_DATA);
    out.push(WIRE_VERSION);
    out.extend_from_slice(&frame.image_id.to_be_bytes());
    out.extend_from_slice(&frame.block_id.0.to_be_bytes());
    out.extend_from_slice(&frame.n_blocks.to_be_bytes());
    out.extend_from_slice(&frame.utility_q.to_be_bytes());
    out.extend_from_slice(&frame.total_utility_q.to_be_bytes());
    out.extend_from_slice(&(frame.payload.len() as u16).to_be_bytes());
    out.extend_from_slice(&frame.payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

pub fn decode_data_frame(bytes: &[u8]) -> std::result::Result<DataFrame, FrameError> {
    if bytes.len() < DATA_FRAME_OVERHEAD {
        return Err(FrameError::TooShort);
    }
    if bytes[0..2] != MAGIC_DATA {
        return Err(FrameError::BadMagic);
    }
    if bytes[2] != WIRE_VERSION {
        return Err(FrameError::BadVersion);
    }
    let payload_len = u16::from_be_bytes(bytes[21..23].try_into().unwrap()) as usize;
    if bytes.len() != DATA_FRAME_OVERHEAD + payload_len {
        return Err(FrameError::LengthMismatch);
    }
    let body_end = bytes.len() - 4;
    let crc = u32::from_be_bytes(bytes[body_end..].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_end]) != crc {
        return Err(FrameError::BadCrc);
    }
    Ok(DataFrame {
        image_id: u32::from_be_bytes(bytes[3..7].try_into().unwrap()),
        block_id: BlockId(u32::from_be_bytes(bytes[7..11].try_into().unwrap())),
        n_blocks: u32::from_be_bytes(bytes[11..15].try_into().unwrap()),
        utility_q: u16::from_be_bytes(bytes[15..17].try_into().unwrap()),
        total_utility_q: u32::from_be_bytes(bytes[17..21].try_into().unwrap()),
        payload: bytes[23..body_end].to_vec(),
    })
}

pub fn encode_stop_frame(frame: &StopFrame) -> [u8; STOP_FRAME_LEN] {
    let mut out = [0u8; STOP_FRAME_LEN];
    out[0..2].copy_from_slice(&MAGIC_STOP);
    out[2] = WIRE_VERSION;
    out[3..7].copy_from_slice(&frame.image_id.to_be_bytes());
    out[7..11].copy_from_slice(&frame.stop_step.to_be_bytes());
    out[11] = reason_code(frame.reason);
    let crc = crc32fast::hash(&out[..12]);
    out[12..16].copy_from_slice(&crc.to_be_bytes());
    out
}

pub fn decode_stop_frame(bytes: &[u8]) -> std::result::Result<StopFrame, FrameError> {
    if bytes.len() != STOP_FRAME_LEN {
        return Err(FrameError::TooShort);
    }
    if bytes[0..2] != MAGIC_STOP {
        return Err(FrameError::BadMagic);
    }
    if bytes[2] != WIRE_VERSION {
        return Err(FrameError::BadVersion);
    }
    let crc = u32::from_be_bytes(bytes[12..16].try_into().unwrap());
    if crc32fast::hash(&bytes[..12]) != crc {
        return Err(FrameError::BadCrc);
    }
    Ok(StopFrame {
        image_id: u32::from_be_bytes(bytes[3..7].try_into().unwrap()),
        stop_step: u32::from_be_bytes(bytes[7..11].try_into().unwrap()),
        reason: reason_from_code(bytes[11])?,
    })
}

// ---------------------------------------------------------------------------
// Live sender
// ---------------------------------------------------------------------------

/// Sender-side knobs for a live run.
#[derive(Debug, Clone)]
pub struct SenderConfig {
    pub image_id: u32,
    pub mtu_budget: usize,
    /// Wall-clock pacing between schedule slots.
    pub inter_arrival: Duration,
}

/// What the sender did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendReport {
    pub frames_sent: u32,
    /// Schedule entries skipped to inject loss deterministically.
    pub frames_suppressed: u32,
    pub stopped_early: bool,
    pub stop_frame: Option<StopFrame>,
}

/// Streams the schedule over `data` to `peer`, polling `control` between
/// sends for a stop frame. Entries flagged as lost in the schedule are
/// skipped (loss is injected at the sender so live runs stay deterministic).
/// Stops transmitting as soon as a stop frame for this image arrives.
pub fn sender_loop(
    image: &ImageRaster,
    grid: &BlockGrid,
    utility: &UtilityMap,
    schedule: &ArrivalSchedule,
    data: &UdpSocket,
    peer: SocketAddr,
    control: &UdpSocket,
    config: &SenderConfig,
) -> Result<SendReport> {
    control.set_nonblocking(true)?;
    let total_q = quantize_total(utility.total);
    let mut report = SendReport {
        frames_sent: 0,
        frames_suppressed: 0,
        stopped_early: false,
        stop_frame: None,
    };
    let mut buf = [0u8; 2048];

    let mut check_stop = |report: &mut SendReport| -> Result<bool> {
        loop {
            match control.recv(&mut buf) {
                Ok(n) => {
                    if let Ok(stop) = decode_stop_frame(&buf[..n]) {
                        if stop.image_id == config.image_id {
                            report.stopped_early = true;
                            report.stop_frame = Some(stop);
                            return Ok(true);
                        }
                        // stop frame for some other image: ignore
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => return Ok(false),
                Err(e) => return Err(Error::SocketAbort(e.to_string())),
            }
        }
    };

    for entry in &schedule.entries {
        if check_stop(&mut report)? {
            return Ok(report);
        }
        if entry.delivered {
            let payload = extract_block(image, grid, entry.block)?;
            let frame = DataFrame {
                image_id: config.image_id,
                block_id: entry.block,
                n_blocks: grid.n_blocks(),
                utility_q: quantize_share(utility.value(entry.block), utility.total),
                total_utility_q: total_q,
                payload,
            };
            let bytes = encode_data_frame(&frame, config.mtu_budget)?;
            data.send_to(&bytes, peer)
                .map_err(|e| Error::SocketAbort(e.to_string()))?;
            report.frames_sent += 1;
        } else {
            report.frames_suppressed += 1;
        }
        std::thread::sleep(config.inter_arrival);
    }
    // catch a stop that raced the tail of the stream
    check_stop(&mut report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Live receiver
// ---------------------------------------------------------------------------

/// Receiver-side configuration for a live run.
#[derive(Debug, Clone)]
pub struct ReceiverConfig {
    pub meta: RasterMeta,
    pub grid: BlockGrid,
    /// Accept only this image id; None locks onto the first frame seen.
    pub expected_image_id: Option<u32>,
    pub policy: StopPolicy,
    pub inference_cadence: u32,
    /// Finalize with whatever arrived after this long without any frame.
    pub idle_timeout: Duration,
    /// Stop-frame retransmission spacing.
    pub stop_retransmit: Duration,
    /// Data silence that ends stop retransmission.
    pub stop_quiet: Duration,
    /// Ground truth for the match flag; empty leaves it unset.
    pub gt_boxes: Vec<BBox>,
    /// Provenance labels copied into the trace (the receiver cannot observe
    /// the sender's schedule parameters itself).
    pub order_label: OrderKind,
    pub loss_label: f64,
    pub seed_label: u64,
}

impl ReceiverConfig {
    pub fn new(meta: RasterMeta, grid: BlockGrid, policy: StopPolicy) -> Self {
        Self {
            meta,
            grid,
            expected_image_id: None,
            policy,
            inference_cadence: crate::sim::DEFAULT_INFERENCE_CADENCE,
            idle_timeout: Duration::from_millis(500),
            stop_retransmit: Duration::from_millis(20),
            stop_quiet: Duration::from_millis(100),
            gt_boxes: Vec::new(),
            order_label: OrderKind::Raster,
            loss_label: 0.0,
            seed_label: 0,
        }
    }
}

/// Result of a live receive session.
#[derive(Debug)]
pub enum ReceiverOutcome {
    /// A run finished (by stop rule, completed stream, or idle timeout after
    /// partial reception).
    Finished(Box<LiveRunReport>),
    /// The idle timeout fired before any frame arrived.
    IdleEmpty,
}

/// Live-run record: the trace plus transport counters.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveRunReport {
    pub trace: RunTrace,
    pub rejected_frames: u32,
    pub duplicate_frames: u32,
    pub image_id: u32,
}

struct Accepted {
    frame: DataFrame,
    at: Instant,
}

/// Runs the receive-update-infer loop over live datagrams: same policy
/// semantics as the simulator, but steps are counted per accepted distinct
/// frame and the clock is wall time from the first arrival. Emits the stop
/// frame over `control` and retransmits it until the data stream goes quiet.
pub fn receiver_loop(
    detector: &dyn Detector,
    data: &UdpSocket,
    control: &UdpSocket,
    control_peer: SocketAddr,
    config: &ReceiverConfig,
) -> Result<ReceiverOutcome> {
    data.set_read_timeout(Some(Duration::from_millis(5)))?;
    let start = Instant::now();
    let quit = AtomicBool::new(false);
    let rejected = AtomicU32::new(0);
    // micros since `start` of the most recent datagram, 0 = none yet
    let last_arrival_us = AtomicU64::new(0);
    let (tx, rx) = mpsc::channel::<Accepted>();

    let n_blocks = config.grid.n_blocks();
    let payload_len = config.grid.payload_bytes(config.meta.channels);

    let outcome = std::thread::scope(|scope| -> Result<ReceiverOutcome> {
        let net_socket = data.try_clone()?;
        let net_quit = &quit;
        let net_rejected = &rejected;
        let net_last = &last_arrival_us;
        let expected = config.expected_image_id;
        scope.spawn(move || {
            let mut buf = [0u8; 65536];
            let mut locked_image: Option<u32> = expected;
            while !net_quit.load(Ordering::Relaxed) {
                match net_socket.recv(&mut buf) {
                    Ok(n) => {
                        net_last.store(
                            start.elapsed().as_micros().max(1) as u64,
                            Ordering::Relaxed,
                        );
                        match decode_data_frame(&buf[..n]) {
                            Ok(frame) => {
                                let id_ok = match locked_image {
                                    Some(id) => frame.image_id == id,
                                    None => {
                                        locked_image = Some(frame.image_id);
                                        true
                                    }
                                };
                                let shape_ok = frame.n_blocks == n_blocks
                                    && frame.block_id.0 < n_blocks
                                    && frame.payload.len() == payload_len;
                                if id_ok && shape_ok {
                                    if tx.send(Accepted { frame, at: Instant::now() }).is_err() {
                                        break;
                                    }
                                } else {
                                    net_rejected.fetch_add(1, Ordering::Relaxed);
                                }
                            }
                            Err(_) => {
                                net_rejected.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                    }
                    Err(e)
                        if e.kind() == std::io::ErrorKind::WouldBlock
                            || e.kind() == std::io::ErrorKind::TimedOut => {}
                    Err(_) => break,
                }
            }
        });

        let result = inference_loop(detector, &rx, config, start, &last_arrival_us);

        // finish: notify net thread, then retransmit the stop frame (when we
        // have one) until the data stream has been quiet long enough
        let (report, stop) = match result {
            InferenceOutcome::Empty => {
                quit.store(true, Ordering::Relaxed);
                return Ok(ReceiverOutcome::IdleEmpty);
            }
            InferenceOutcome::Done { report, stop } => (report, stop),
        };

        let mut extra_in_flight = 0u32;
        let mut seen_extra = std::collections::HashSet::new();
        if let Some(stop_frame) = stop {
            let bytes = encode_stop_frame(&stop_frame);
            let deadline = Instant::now() + Duration::from_secs(5);
            loop {
                control
                    .send_to(&bytes, control_peer)
                    .map_err(|e| Error::SocketAbort(e.to_string()))?;
                std::thread::sleep(config.stop_retransmit);
                // drain frames that were already in flight
                while let Ok(acc) = rx.try_recv() {
                    if seen_extra.insert(acc.frame.block_id) {
                        extra_in_flight += 1;
                    }
                }
                let last = last_arrival_us.load(Ordering::Relaxed);
                let quiet = if last == 0 {
                    config.stop_quiet
                } else {
                    start.elapsed().saturating_sub(Duration::from_micros(last))
                };
                if quiet >= config.stop_quiet || Instant::now() > deadline {
                    break;
                }
            }
        }
        quit.store(true, Ordering::Relaxed);

        let mut report = report;
        report.trace.extra_in_flight = extra_in_flight;
        report.trace.packets_delivered += extra_in_flight;
        report.rejected_frames = rejected.load(Ordering::Relaxed);
        Ok(ReceiverOutcome::Finished(Box::new(report)))
    })?;

    Ok(outcome)
}

enum InferenceOutcome {
    Empty,
    Done {
        report: LiveRunReport,
        stop: Option<StopFrame>,
    },
}

fn inference_loop(
    detector: &dyn Detector,
    rx: &mpsc::Receiver<Accepted>,
    config: &ReceiverConfig,
    start: Instant,
    last_arrival_us: &AtomicU64,
) -> InferenceOutcome {
    let n_blocks = config.grid.n_blocks();
    let history_bound = match config.policy {
        StopPolicy::Stability(p) => p.window.max(1),
        _ => 1,
    };

    let mut reception = ReceptionSet::new(n_blocks);
    let mut payloads = BlockPayloads::new();
    let mut history: VecDeque<DetectionSet> = VecDeque::with_capacity(history_bound);
    let mut events: Vec<TraceEvent> = Vec::new();
    let mut rho = 0.0f64;
    let mut duplicates = 0u32;
    let mut step = 0u32;
    let mut image_id = 0u32;
    let mut first_arrival: Option<Instant> = None;

    let finished = |step: u32,
                    reason: StopReason,
                    reception: &ReceptionSet,
                    payloads: &BlockPayloads,
                    history: &mut VecDeque<DetectionSet>,
                    events: Vec<TraceEvent>,
                    duplicates: u32,
                    image_id: u32,
                    fired: bool,
                    elapsed_ms: f64|
     -> InferenceOutcome {
        let final_detections = if fired {
            history.back().cloned().unwrap_or_default()
        } else {
            let observation = reconstruct(config.meta, &config.grid, reception, payloads)
                .expect("payload recorded for every received block");
            detector.detect(&observation)
        };
        let matched = if config.gt_boxes.is_empty() {
            None
        } else {
            Some(match_success(&final_detections, &config.gt_boxes))
        };
        let trace = RunTrace {
            image_id: format!("live_{image_id}"),
            policy: config.policy,
            policy_label: config.policy.label(),
            order: config.order_label,
            loss_rate: config.loss_label,
            seed: config.seed_label,
            inter_arrival_ms: 0.0,
            feedback_delay_ms: 0.0,
            inference_cadence: config.inference_cadence,
            events,
            stop_step: step,
            stop_reason: reason,
            events_elapsed: step,
            packets_delivered: reception.len() as u32,
            extra_in_flight: 0,
            stop_time_ms: elapsed_ms,
            final_detections,
            matched,
        };
        InferenceOutcome::Done {
            report: LiveRunReport {
                trace,
                rejected_frames: 0,
                duplicate_frames: duplicates,
                image_id,
            },
            stop: Some(StopFrame {
                image_id,
                stop_step: step,
                reason,
            }),
        }
    };

    loop {
        match rx.recv_timeout(Duration::from_millis(10)) {
            Ok(acc) => {
                image_id = acc.frame.image_id;
                let first = *first_arrival.get_or_insert(acc.at);
                if !reception.insert(acc.frame.block_id, step) {
                    duplicates += 1;
                    continue;
                }
                step += 1;
                payloads.insert(acc.frame.block_id, acc.frame.payload.clone());
                rho += dequantize_share(acc.frame.utility_q);
                let exhausted = reception.is_complete();
                let cadence_hit = config.inference_cadence > 0
                    && reception.len() as u32 % config.inference_cadence == 0;
                let mut fired = false;
                if cadence_hit || exhausted {
                    let observation =
                        reconstruct(config.meta, &config.grid, &reception, &payloads)
                            .expect("payload recorded for every received block");
                    let detections = detector.detect(&observation);
                    if history.len() == history_bound {
                        history.pop_front();
                    }
                    history.push_back(detections);
                    fired = true;
                }
                let state = PolicyState {
                    step,
                    reception: &reception,
                    rho,
                    history: &history,
                    schedule_exhausted: exhausted,
                };
                let decision = config.policy.decide(&state);
                let elapsed_ms = acc.at.duration_since(first).as_secs_f64() * 1e3;
                events.push(TraceEvent {
                    time_ms: elapsed_ms,
                    block: acc.frame.block_id,
                    delivered: true,
                    rho,
                    inference_fired: fired || decision.is_stop(),
                    stop: decision.is_stop(),
                });
                if let StopDecision::Stop { reason, .. } = decision {
                    return finished(
                        step, reason, &reception, &payloads, &mut history, events,
                        duplicates, image_id, fired, elapsed_ms,
                    );
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                let last = last_arrival_us.load(Ordering::Relaxed);
                let since_activity = if last == 0 {
                    start.elapsed()
                } else {
                    start.elapsed().saturating_sub(Duration::from_micros(last))
                };
                if since_activity >= config.idle_timeout {
                    if reception.is_empty() {
                        return InferenceOutcome::Empty;
                    }
                    // stalled sender: finalize with what we have
                    let elapsed_ms = first_arrival
                        .map(|f| f.elapsed().as_secs_f64() * 1e3)
                        .unwrap_or(0.0);
                    return finished(
                        step,
                        StopReason::Exhausted,
                        &reception,
                        &payloads,
                        &mut history,
                        events,
                        duplicates,
                        image_id,
                        false,
                        elapsed_ms,
                    );
                }
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                return InferenceOutcome::Empty;
            }
        }
    }
}
