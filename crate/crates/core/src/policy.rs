//! Stopping policies: full reception, detector-stability baseline, and the
//! utility-threshold rule.
//!
//! Policies are pure functions of the receiver state, so a recorded run can
//! be replayed through them and reproduce the same decision. Stop is
//! absorbing: the event loop consults the policy only until the first stop.

use std::collections::VecDeque;

use crate::detector::{iou, DetectionSet};
use crate::image::ReceptionSet;

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    UtilityThreshold,
    Stability,
    FullReception,
    /// Arrival schedule ran out (or the live stream went idle) before any
    /// rule fired; forces a definite final decision on every run.
    Exhausted,
}

/// Outcome of consulting a policy after one reception event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop { step: u32, reason: StopReason },
}

impl StopDecision {
    pub fn is_stop(&self) -> bool {
        matches!(self, StopDecision::Stop { .. })
    }
}

/// Receiver state snapshot handed to a policy after an event was processed.
/// `step` counts schedule events so far (1-based); `rho` is the accumulated
/// utility ratio, non-decreasing along a run.
#[derive(Debug)]
pub struct PolicyState<'a> {
    pub step: u32,
    pub reception: &'a ReceptionSet,
    pub rho: f64,
    /// Detection sets from past inference events, oldest first, bounded by
    /// the largest window any policy needs.
    pub history: &'a VecDeque<DetectionSet>,
    pub schedule_exhausted: bool,
}

/// Stability-baseline parameters: stop when the last `window` inference
/// results agree in class, all clear `conf_floor`, and consecutive top boxes
/// overlap by at least `iou_floor`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StabilityParams {
    pub conf_floor: f64,
    pub iou_floor: f64,
    pub window: usize,
}

impl Default for StabilityParams {
    fn default() -> Self {
        Self {
            conf_floor: 0.9,
            iou_floor: 0.9,
            window: 3,
        }
    }
}

/// The three stopping rules.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopPolicy {
    Full,
    Stability(StabilityParams),
    Utility { tau_rho: f64 },
}

impl StopPolicy {
    pub fn decide(&self, state: &PolicyState<'_>) -> StopDecision {
        match *self {
            StopPolicy::Full => full_policy(state),
            StopPolicy::Stability(params) => {
                stability_policy(state, params.conf_floor, params.iou_floor, params.window)
            }
            StopPolicy::Utility { tau_rho } => utility_policy(state, tau_rho),
        }
    }

    /// Label used in aggregate reports, e.g. "utility(0.80)".
    pub fn label(&self) -> String {
        match *self {
            StopPolicy::Full => "full".to_string(),
            StopPolicy::Stability(p) => format!("stability({:.2})", p.conf_floor),
            StopPolicy::Utility { tau_rho } => format!("utility({tau_rho:.2})"),
        }
    }
}

/// Stop once the accumulated utility ratio reaches `tau_rho`.
pub fn utility_policy(state: &PolicyState<'_>, tau_rho: f64) -> StopDecision {
    debug_assert!((0.0..=1.0).contains(&tau_rho));
    if state.rho >= tau_rho {
        return StopDecision::Stop {
            step: state.step,
            reason: StopReason::UtilityThreshold,
        };
    }
    exhausted_fallback(state)
}

/// Stop once the last `window` inference results are mutually consistent.
pub fn stability_policy(
    state: &PolicyState<'_>,
    conf_floor: f64,
    iou_floor: f64,
    window: usize,
) -> StopDecision {
    debug_assert!(window >= 2);
    if window_is_stable(state.history, conf_floor, iou_floor, window) {
        return StopDecision::Stop {
            step: state.step,
            reason: StopReason::Stability,
        };
    }
    exhausted_fallback(state)
}

fn window_is_stable(
    history: &VecDeque<DetectionSet>,
    conf_floor: f64,
    iou_floor: f64,
    window: usize,
) -> bool {
    if history.len() < window {
        return false;
    }
    let recent: Vec<&DetectionSet> = history.iter().skip(history.len() - window).collect();
    let tops: Vec<_> = recent
        .iter()
        .map(|set| set.detections.first())
        .collect::<Option<Vec<_>>>()
        .unwrap_or_default();
    if tops.len() < window {
        return false; // some entry had no detection at all
    }
    let class = tops[0].class_id;
    if !tops.iter().all(|d| d.class_id == class && d.confidence >= conf_floor) {
        return false;
    }
    tops.windows(2).all(|pair| iou(&pair[0].bbox, &pair[1].bbox) >= iou_floor)
}

/// Stop only when every block has been received (or nothing more can arrive).
pub fn full_policy(state: &PolicyState<'_>) -> StopDecision {
    if state.reception.is_complete() {
        return StopDecision::Stop {
            step: state.step,
            reason: StopReason::FullReception,
        };
    }
    exhausted_fallback(state)
}

fn exhausted_fallback(state: &PolicyState<'_>) -> StopDecision {
    if state.schedule_exhausted {
        StopDecision::Stop {
            step: state.step,
            reason: StopReason::Exhausted,
        }
    } else {
        StopDecision::Continue
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{BBox, Detection, DetectionSet, HAZARD_CLASS};
    use crate::image::BlockId;

    fn state_with<'a>(
        reception: &'a ReceptionSet,
        history: &'a VecDeque<DetectionSet>,
        step: u32,
        rho: f64,
        exhausted: bool,
    ) -> PolicyState<'a> {
        PolicyState {
            step,
            reception,
            rho,
            history,
            schedule_exhausted: exhausted,
        }
    }

    fn det(bbox: BBox, confidence: f64) -> DetectionSet {
        DetectionSet::new(
            vec![Detection {
                bbox,
                confidence,
                class_id: HAZARD_CLASS,
            }],
            128,
            64,
        )
    }

    #[test]
    fn utility_stops_at_threshold() {
        let reception = ReceptionSet::new(8);
        let history = VecDeque::new();
        let s = state_with(&reception, &history, 5, 0.81, false);
        assert_eq!(
            utility_policy(&s, 0.8),
            StopDecision::Stop {
                step: 5,
                reason: StopReason::UtilityThreshold
            }
        );
        let s = state_with(&reception, &history, 5, 0.79, false);
        assert_eq!(utility_policy(&s, 0.8), StopDecision::Continue);
    }

    #[test]
    fn utility_exhausted_fallback() {
        let reception = ReceptionSet::new(8);
        let history = VecDeque::new();
        let s = state_with(&reception, &history, 8, 0.0, true);
        assert_eq!(
            utility_policy(&s, 0.8),
            StopDecision::Stop {
                step: 8,
                reason: StopReason::Exhausted
            }
        );
    }

    #[test]
    fn stability_needs_full_window_without_gaps() {
        let reception = ReceptionSet::new(8);
        let b = BBox::new(0.0, 0.0, 100.0, 10.0);
        // window containing an empty detection set can never be stable
        let mut history = VecDeque::new();
        history.push_back(det(b, 0.95));
        history.push_back(DetectionSet::new(vec![], 128, 64));
        history.push_back(det(b, 0.95));
        let s = state_with(&reception, &history, 3, 0.0, false);
        assert_eq!(stability_policy(&s, 0.9, 0.9, 3), StopDecision::Continue);
    }

    #[test]
    fn stability_fires_on_identical_window() {
        let reception = ReceptionSet::new(8);
        let b = BBox::new(0.0, 0.0, 100.0, 10.0);
        let history: VecDeque<_> = (0..3).map(|_| det(b, 0.95)).collect();
        let s = state_with(&reception, &history, 6, 0.0, false);
        assert_eq!(
            stability_policy(&s, 0.9, 0.9, 3),
            StopDecision::Stop {
                step: 6,
                reason: StopReason::Stability
            }
        );
    }

    #[test]
    fn stability_rejects_unstable_pair() {
        // first consecutive pair overlaps well, second drops below the floor
        let reception = ReceptionSet::new(8);
        let a = BBox::new(0.0, 0.0, 100.0, 10.0);
        let c = BBox::new(8.5, 0.0, 108.5, 10.0); // IoU vs a ~ 0.84 < 0.9
        let mut history = VecDeque::new();
        history.push_back(det(a, 0.95));
        history.push_back(det(a, 0.95));
        history.push_back(det(c, 0.95));
        assert!(iou(&a, &c) < 0.9 && iou(&a, &c) > 0.8);
        let s = state_with(&reception, &history, 9, 0.0, false);
        assert_eq!(stability_policy(&s, 0.9, 0.9, 3), StopDecision::Continue);
    }

    #[test]
    fn stability_rejects_low_confidence() {
        let reception = ReceptionSet::new(8);
        let b = BBox::new(0.0, 0.0, 100.0, 10.0);
        let mut history: VecDeque<_> = (0..2).map(|_| det(b, 0.95)).collect();
        history.push_back(det(b, 0.85)); // below floor 0.9
        let s = state_with(&reception, &history, 9, 0.0, false);
        assert_eq!(stability_policy(&s, 0.9, 0.9, 3), StopDecision::Continue);
    }

    #[test]
    fn full_policy_waits_for_all_blocks() {
        let mut reception = ReceptionSet::new(4);
        for i in 0..3 {
            reception.insert(BlockId(i), i);
        }
        let history = VecDeque::new();
        let s = state_with(&reception, &history, 3, 0.9, false);
        assert_eq!(full_policy(&s), StopDecision::Continue);

        reception.insert(BlockId(3), 3);
        let s = state_with(&reception, &history, 4, 0.9, false);
        assert_eq!(
            full_policy(&s),
            StopDecision::Stop {
                step: 4,
                reason: StopReason::FullReception
            }
        );
    }

    #[test]
    fn full_policy_exhausted_under_loss() {
        // two of four blocks lost, schedule over: fires via exhaustion
        let mut reception = ReceptionSet::new(4);
        reception.insert(BlockId(0), 0);
        reception.insert(BlockId(2), 2);
        let history = VecDeque::new();
        let s = state_with(&reception, &history, 4, 0.9, true);
        assert_eq!(
            full_policy(&s),
            StopDecision::Stop {
                step: 4,
                reason: StopReason::Exhausted
            }
        );
    }

    #[test]
    fn labels_are_distinct() {
        let labels: Vec<String> = [
            StopPolicy::Full,
            StopPolicy::Stability(StabilityParams::default()),
            StopPolicy::Utility { tau_rho: 0.8 },
            StopPolicy::Utility { tau_rho: 0.9 },
        ]
        .iter()
        .map(StopPolicy::label)
        .collect();
        let mut unique = labels.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), labels.len());
    }
}
