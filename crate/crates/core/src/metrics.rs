//! Run-trace aggregation: match rate, block and delay averages, objective
//! cost, and the CSV/JSON report emitters.

use std::collections::BTreeMap;
use std::path::Path;

use crate::detector::{iou, BBox, DetectionSet, HAZARD_CLASS};
use crate::error::Result;
use crate::sim::{OrderKind, RunTrace};

/// Inclusive IoU threshold for counting a prediction as matching ground truth.
pub const MATCH_IOU: f64 = 0.5;

/// True iff some hazard prediction overlaps any ground-truth box with
/// IoU >= 0.5 (inclusive).
pub fn match_success(finals: &DetectionSet, ground_truth: &[BBox]) -> bool {
    finals
        .detections
        .iter()
        .filter(|d| d.class_id == HAZARD_CLASS)
        .any(|d| ground_truth.iter().any(|gt| iou(&d.bbox, gt) >= MATCH_IOU))
}

/// 0/1 task loss of a finished run; an unknown match flag counts as a miss.
pub fn zero_one_task_loss(trace: &RunTrace) -> f64 {
    if trace.matched == Some(true) {
        0.0
    } else {
        1.0
    }
}

/// Scalarized run cost: task loss + lambda1 * blocks + lambda2 * delay.
pub fn objective_cost(trace: &RunTrace, task_loss: f64, lambda1: f64, lambda2: f64) -> f64 {
    debug_assert!(lambda1 >= 0.0 && lambda2 >= 0.0);
    task_loss + lambda1 * f64::from(trace.events_elapsed) + lambda2 * trace.stop_time_ms
}

/// One row of a results table: means over a (policy, order, loss) group,
/// averaged per seed first and then across seeds.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AggregateRow {
    pub policy: String,
    pub order: OrderKind,
    pub loss_rate: f64,
    pub n_images: usize,
    pub seeds: Vec<u64>,
    pub match_rate: f64,
    pub mean_blocks_elapsed: f64,
    pub mean_blocks_delivered: f64,
    pub mean_delay_ms: f64,
}

#[derive(Default)]
struct GroupStats {
    matched: u32,
    runs: u32,
    blocks_elapsed: f64,
    blocks_delivered: f64,
    delay_ms: f64,
}

impl GroupStats {
    fn push(&mut self, t: &RunTrace) {
        self.runs += 1;
        if t.matched == Some(true) {
            self.matched += 1;
        }
        self.blocks_elapsed += f64::from(t.events_elapsed);
        self.blocks_delivered += f64::from(t.packets_delivered);
        self.delay_ms += t.stop_time_ms;
    }
}

/// Groups traces by (policy, order, loss rate), computes per-seed means, then
/// averages the seed means. Rows come back sorted by policy label, order, and
/// loss rate so output files are stable under trace permutation.
pub fn aggregate(traces: &[RunTrace]) -> Vec<AggregateRow> {
    // key: (policy label, order, loss-rate bits) -> seed -> stats
    let mut groups: BTreeMap<(String, String, u64), BTreeMap<u64, GroupStats>> = BTreeMap::new();
    let mut images: BTreeMap<(String, String, u64), std::collections::BTreeSet<String>> =
        BTreeMap::new();
    let mut orders: BTreeMap<(String, String, u64), (OrderKind, f64)> = BTreeMap::new();

    for t in traces {
        let key = (
            t.policy_label.clone(),
            t.order.to_string(),
            t.loss_rate.to_bits(),
        );
        groups
            .entry(key.clone())
            .or_default()
            .entry(t.seed)
            .or_default()
            .push(t);
        images.entry(key.clone()).or_default().insert(t.image_id.clone());
        orders.entry(key).or_insert((t.order, t.loss_rate));
    }

    groups
        .into_iter()
        .map(|(key, per_seed)| {
            let (order, loss_rate) = orders[&key];
            let seeds: Vec<u64> = per_seed.keys().copied().collect();
            let n_seeds = per_seed.len() as f64;
            let mut match_rate = 0.0;
            let mut blocks_elapsed = 0.0;
            let mut blocks_delivered = 0.0;
            let mut delay = 0.0;
            for stats in per_seed.values() {
                let n = f64::from(stats.runs);
                match_rate += f64::from(stats.matched) / n;
                blocks_elapsed += stats.blocks_elapsed / n;
                blocks_delivered += stats.blocks_delivered / n;
                delay += stats.delay_ms / n;
            }
            AggregateRow {
                policy: key.0.clone(),
                order,
                loss_rate,
                n_images: images[&key].len(),
                seeds,
                match_rate: match_rate / n_seeds,
                mean_blocks_elapsed: blocks_elapsed / n_seeds,
                mean_blocks_delivered: blocks_delivered / n_seeds,
                mean_delay_ms: delay / n_seeds,
            }
        })
        .collect()
}

/// Fraction of the full-reception packet budget saved by a policy.
pub fn budget_saving_fraction(policy_blocks: f64, full_blocks: f64) -> f64 {
    1.0 - policy_blocks / full_blocks
}

/// Fraction of the full-reception match rate a policy retains.
pub fn match_rate_retention(policy_match: f64, full_match: f64) -> f64 {
    policy_match / full_match
}

fn fmt_seeds(seeds: &[u64]) -> String {
    seeds
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// CSV schema v1 (one row per aggregate group):
/// policy, order, loss_rate, n_images, seeds, match_rate,
/// mean_blocks_elapsed, mean_blocks_delivered, mean_delay_ms
pub fn emit_csv<P: AsRef<Path>>(rows: &[AggregateRow], path: P) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "policy",
        "order",
        "loss_rate",
        "n_images",
        "seeds",
        "match_rate",
        "mean_blocks_elapsed",
        "mean_blocks_delivered",
        "mean_delay_ms",
    ])?;
    for r in rows {
        w.write_record([
            r.policy.clone(),
            r.order.to_string(),
            format!("{}", r.loss_rate),
            r.n_images.to_string(),
            fmt_seeds(&r.seeds),
            format!("{:.6}", r.match_rate),
            format!("{:.6}", r.mean_blocks_elapsed),
            format!("{:.6}", r.mean_blocks_delivered),
            format!("{:.6}", r.mean_delay_ms),
        ])?;
    }
    w.flush().map_err(std::io::Error::from)?;
    Ok(())
}

pub fn emit_json<P: AsRef<Path>>(rows: &[AggregateRow], path: P) -> Result<()> {
    let data = serde_json::to_vec_pretty(rows)?;
    std::fs::write(path, data)?;
    Ok(())
}

/// Long-format export for external plotting: one (group, metric, value) row
/// per metric.
pub fn emit_long_csv<P: AsRef<Path>>(rows: &[AggregateRow], path: P) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["policy", "order", "loss_rate", "metric", "value"])?;
    for r in rows {
        for (metric, value) in [
            ("match_rate", r.match_rate),
            ("mean_blocks_elapsed", r.mean_blocks_elapsed),
            ("mean_blocks_delivered", r.mean_blocks_delivered),
            ("mean_delay_ms", r.mean_delay_ms),
        ] {
            w.write_record([
                r.policy.clone(),
                r.order.to_string(),
                format!("{}", r.loss_rate),
                metric.to_string(),
                format!("{value:.6}"),
            ])?;
        }
    }
    w.flush().map_err(std::io::Error::from)?;
    Ok(())
}
