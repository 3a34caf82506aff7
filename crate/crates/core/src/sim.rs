//! Deterministic event-driven transport simulation.
//!
//! A run is fully determined by (image, utility map, policy, schedule,
//! config): the schedule fixes arrival order, timing, and which packets
//! survive, and the receive-update-infer loop advances on a purely virtual
//! clock. Identical inputs give byte-identical traces.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{BBox, DetectionSet, Detector};
use crate::error::Result;
use crate::image::{partial_observation, BlockGrid, BlockId, ImageRaster, ReceptionSet};
use crate::metrics::match_success;
use crate::policy::{PolicyState, StopDecision, StopPolicy, StopReason};
use crate::utility::UtilityMap;

/// Packet arrival orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderKind {
    CenterFirst,
    Raster,
    Random,
}

impl std::fmt::Display for OrderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            OrderKind::CenterFirst => "center_first",
            OrderKind::Raster => "raster",
            OrderKind::Random => "random",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for OrderKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "center_first" => Ok(OrderKind::CenterFirst),
            "raster" => Ok(OrderKind::Raster),
            "random" => Ok(OrderKind::Random),
            other => Err(format!("unknown arrival order '{other}'")),
        }
    }
}

/// Default inter-arrival spacing between packet blocks.
pub const DEFAULT_INTER_ARRIVAL_MS: f64 = 5.0;

/// Default inference cadence: one detector evaluation every E delivered blocks.
pub const DEFAULT_INFERENCE_CADENCE: u32 = 8;

/// One slot of the arrival timeline.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleEntry {
    pub block: BlockId,
    pub send_time_ms: f64,
    pub delivered: bool,
}

/// Precomputed arrival timeline: every block appears exactly once; entry j is
/// sent at j * inter_arrival; loss flags are i.i.d. Bernoulli(1 - loss_rate)
/// drawn from the seed after ordering.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArrivalSchedule {
    pub entries: Vec<ScheduleEntry>,
    pub order: OrderKind,
    pub inter_arrival_ms: f64,
    pub loss_rate: f64,
    pub seed: u64,
}

impl ArrivalSchedule {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn delivered_count(&self) -> usize {
        self.entries.iter().filter(|e| e.delivered).count()
    }
}

/// Block ids in the given arrival order (no timing or loss applied).
pub fn arrival_order(grid: &BlockGrid, order: OrderKind, seed: u64) -> Vec<BlockId> {
    let mut ids: Vec<BlockId> = grid.ids().collect();
    match order {
        OrderKind::Raster => {}
        OrderKind::CenterFirst => {
            // integer squared distance of twice the offsets, so ties are exact
            let width = i64::from(grid.cols * grid.block_width);
            let height = i64::from(grid.rows * grid.block_height);
            ids.sort_by_key(|&id| {
                let (x0, y0) = grid.block_origin(id);
                let dx = 2 * i64::from(x0) + i64::from(grid.block_width) - width;
                let dy = 2 * i64::from(y0) + i64::from(grid.block_height) - height;
                (dx * dx + dy * dy, id.0)
            });
        }
        OrderKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ids.shuffle(&mut rng);
        }
    }
    ids
}

/// Builds the complete arrival timeline for a grid.
pub fn build_schedule(
    grid: &BlockGrid,
    order: OrderKind,
    inter_arrival_ms: f64,
    loss_rate: f64,
    seed: u64,
) -> ArrivalSchedule {
    assert!((0.0..1.0).contains(&loss_rate), "loss rate must be in [0,1)");
    let ids = arrival_order(grid, order, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if order == OrderKind::Random {
        // replay the shuffle so loss flags are drawn after ordering
        let mut scratch: Vec<BlockId> = grid.ids().collect();
        scratch.shuffle(&mut rng);
    }
    let entries = ids
        .into_iter()
        .enumerate()
        .map(|(j, block)| ScheduleEntry {
            block,
            send_time_ms: j as f64 * inter_arrival_ms,
            delivered: rng.gen::<f64>() >= loss_rate,
        })
        .collect();
    ArrivalSchedule {
        entries,
        order,
        inter_arrival_ms,
        loss_rate,
        seed,
    }
}

/// Idealized time-to-action: counted schedule slots (lost ones included —
/// time passes either way) times the inter-arrival spacing, plus the reverse
/// signaling delay.
pub fn delay_model(counted_events: f64, inter_arrival_ms: f64, feedback_delay_ms: f64) -> f64 {
    counted_events * inter_arrival_ms + feedback_delay_ms
}

/// One line of the per-run event log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceEvent {
    pub time_ms: f64,
    pub block: BlockId,
    pub delivered: bool,
    pub rho: f64,
    pub inference_fired: bool,
    pub stop: bool,
}

/// Complete record of one run: the event log plus final costs and output.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunTrace {
    pub image_id: String,
    pub policy: StopPolicy,
    pub policy_label: String,
    pub order: OrderKind,
    pub loss_rate: f64,
    pub seed: u64,
    pub inter_arrival_ms: f64,
    pub feedback_delay_ms: f64,
    pub inference_cadence: u32,
    pub events: Vec<TraceEvent>,
    /// 1-based index of the event that triggered the stop.
    pub stop_step: u32,
    pub stop_reason: StopReason,
    /// Schedule slots elapsed up to the stop trigger (lost slots included).
    pub events_elapsed: u32,
    /// Blocks actually delivered by the stop, including in-flight extras.
    pub packets_delivered: u32,
    /// Deliveries that were already in flight when the stop signal landed.
    pub extra_in_flight: u32,
    /// Time to action T: stop slot time plus feedback delay.
    pub stop_time_ms: f64,
    pub final_detections: DetectionSet,
    pub matched: Option<bool>,
}

/// Everything a single simulated run needs.
pub struct RunSetup<'a> {
    pub image_id: &'a str,
    pub image: &'a ImageRaster,
    pub grid: &'a BlockGrid,
    pub utility: &'a UtilityMap,
    pub detector: &'a dyn Detector,
    pub policy: StopPolicy,
    pub schedule: &'a ArrivalSchedule,
    pub feedback_delay_ms: f64,
    pub inference_cadence: u32,
    pub epsilon: f64,
    /// Ground-truth boxes for the match flag; empty slice leaves it unset.
    pub gt_boxes: &'a [BBox],
}

/// Drives the receive-update-infer loop over a schedule and records the trace.
///
/// Per delivered event the reception set and utility ratio advance; the
/// detector fires every `inference_cadence` deliveries and at the final slot;
/// the policy is consulted after every event. On stop, in-flight deliveries
/// from the feedback window are accounted into the delivered count but never
/// into the final detection, which is fixed at the stop decision.
pub fn run(setup: &RunSetup<'_>) -> RunTrace {
    let schedule = setup.schedule;
    let n_events = schedule.entries.len();
    assert!(n_events > 0, "schedule must contain at least one entry");
    assert_eq!(
        setup.utility.n_blocks,
        setup.grid.n_blocks(),
        "utility map and grid disagree on block count"
    );

    let history_bound = match setup.policy {
        StopPolicy::Stability(p) => p.window.max(1),
        _ => 1,
    };

    let mut reception = ReceptionSet::new(setup.grid.n_blocks());
    let mut history: VecDeque<DetectionSet> = VecDeque::with_capacity(history_bound);
    let mut events = Vec::with_capacity(n_events);
    let mut received_sum = 0.0f64;
    let mut delivered_count = 0u32;
    let denom = setup.utility.total + setup.epsilon;

    let mut stopped: Option<(usize, StopReason)> = None;
    let mut final_detections: Option<DetectionSet> = None;

    for (j, entry) in schedule.entries.iter().enumerate() {
        let step = (j + 1) as u32;
        if entry.delivered && reception.insert(entry.block, j as u32) {
            received_sum += setup.utility.value(entry.block);
            delivered_count += 1;
        }
        let rho = received_sum / denom;
        let exhausted = j + 1 == n_events;
        let cadence_hit = entry.delivered
            && setup.inference_cadence > 0
            && delivered_count % setup.inference_cadence == 0;
        let mut fired = false;
        if cadence_hit || exhausted {
            let observation = partial_observation(setup.image, setup.grid, &reception);
            let detections = setup.detector.detect(&observation);
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
        let decision = setup.policy.decide(&state);
        let stop = decision.is_stop();

        if stop && final_detections.is_none() {
            // the receiver outputs the detection state at the stop decision
            let detections = if fired {
                history.back().cloned().unwrap_or_default()
            } else {
                fired = true;
                let observation = partial_observation(setup.image, setup.grid, &reception);
                setup.detector.detect(&observation)
            };
            final_detections = Some(detections);
        }

        events.push(TraceEvent {
            time_ms: f64::from(step) * schedule.inter_arrival_ms,
            block: entry.block,
            delivered: entry.delivered,
            rho,
            inference_fired: fired,
            stop,
        });

        if stop {
            let reason = match decision {
                StopDecision::Stop { reason, .. } => reason,
                StopDecision::Continue => unreachable!(),
            };
            stopped = Some((j, reason));
            break;
        }
    }

    let (trigger_index, stop_reason) =
        stopped.expect("exhausted schedule always forces a stop decision");
    let stop_step = (trigger_index + 1) as u32;

    // In-flight slots: packets the sender emits before the stop signal lands.
    let flight_slots = if setup.feedback_delay_ms <= 0.0 {
        0usize
    } else {
        (setup.feedback_delay_ms / schedule.inter_arrival_ms).ceil() as usize
    };
    let remaining = n_events - (trigger_index + 1);
    let extra_in_flight = schedule.entries[trigger_index + 1..]
        .iter()
        .take(flight_slots.min(remaining))
        .filter(|e| e.delivered)
        .count() as u32;

    let final_detections = final_detections.unwrap_or_default();
    let matched = if setup.gt_boxes.is_empty() {
        None
    } else {
        Some(match_success(&final_detections, setup.gt_boxes))
    };

    RunTrace {
        image_id: setup.image_id.to_string(),
        policy: setup.policy,
        policy_label: setup.policy.label(),
        order: schedule.order,
        loss_rate: schedule.loss_rate,
        seed: schedule.seed,
        inter_arrival_ms: schedule.inter_arrival_ms,
        feedback_delay_ms: setup.feedback_delay_ms,
        inference_cadence: setup.inference_cadence,
        events,
        stop_step,
        stop_reason,
        events_elapsed: stop_step,
        packets_delivered: delivered_count + extra_in_flight,
        extra_in_flight,
        stop_time_ms: delay_model(
            f64::from(stop_step),
            schedule.inter_arrival_ms,
            setup.feedback_delay_ms,
        ),
        final_detections,
        matched,
    }
}

impl RunTrace {
    /// Rebuilds the schedule prefix this trace observed, for replaying the
    /// recorded arrivals through a policy independently of the simulator.
    pub fn to_schedule(&self) -> ArrivalSchedule {
        let entries = self
            .events
            .iter()
            .map(|e| ScheduleEntry {
                block: e.block,
                send_time_ms: e.time_ms - self.inter_arrival_ms,
                delivered: e.delivered,
            })
            .collect();
        ArrivalSchedule {
            entries,
            order: self.order,
            inter_arrival_ms: self.inter_arrival_ms,
            loss_rate: self.loss_rate,
            seed: self.seed,
        }
    }
}

/// Writes traces as line-delimited JSON.
pub fn write_traces_jsonl<P: AsRef<Path>>(path: P, traces: &[RunTrace]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for trace in traces {
        serde_json::to_writer(&mut f, trace)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads traces from line-delimited JSON.
pub fn read_traces_jsonl<P: AsRef<Path>>(path: P) -> Result<Vec<RunTrace>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut traces = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        traces.push(serde_json::from_str(&line)?);
    }
    Ok(traces)
}
