//! Per-block decision utility: leave-one-block-out supervision and the
//! accumulated-utility stopping statistic.
//!
//! The utility of a block is the non-negative drop in matched detection
//! confidence when that block is removed from the payload. Maps are computed
//! sender-side and travel with the stream as control metadata; the receiver
//! never estimates utility for missing blocks.

use std::path::Path;

use rayon::prelude::*;

use crate::detector::{match_to_reference, Detection, Detector};
use crate::error::{Error, Result};
use crate::image::{mask_block, BlockGrid, ImageRaster};

/// Where a utility map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilitySource {
    EmpiricalOracle,
    ExternalPredictor,
}

/// Per-block utility values c_i plus their total.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UtilityMap {
    pub image_id: String,
    pub n_blocks: u32,
    pub values: Vec<f64>,
    pub total: f64,
    pub source: UtilitySource,
}

impl UtilityMap {
    pub fn new(image_id: String, values: Vec<f64>, source: UtilitySource) -> Self {
        debug_assert!(values.iter().all(|&v| v >= 0.0));
        let total = values.iter().sum();
        Self {
            image_id,
            n_blocks: values.len() as u32,
            values,
            total,
            source,
        }
    }

    pub fn value(&self, block: crate::image::BlockId) -> f64 {
        self.values[block.index()]
    }
}

/// Default epsilon in the accumulated-utility ratio denominator.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Accumulated utility ratio: sum of received utilities over (total + epsilon).
pub fn normalize_ratio(received_utilities: &[f64], total: f64, epsilon: f64) -> f64 {
    debug_assert!(total >= 0.0 && epsilon > 0.0);
    let sum: f64 = received_utilities.iter().sum();
    sum / (total + epsilon)
}

/// Leave-one-block-out supervision for one image.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UtilitySupervisionRecord {
    pub image_id: String,
    /// Top hazard confidence on the full image.
    pub full_confidence: f64,
    /// The full-image top detection that per-block results are matched against.
    pub full_detection: Detection,
    /// Matched confidence after removing each block.
    pub matched_confidences: Vec<f64>,
    pub map: UtilityMap,
}

/// Runs the leave-one-block-out procedure: detect on the full image, then for
/// each block re-detect on the image with that block masked and score the
/// result against the full-image top detection. Exactly n_blocks + 1 detector
/// calls. Errors with [`Error::NoFullImageDetection`] when the full image has
/// no detection, which callers treat as "skip this image".
pub fn compute_utility_map(
    image_id: &str,
    image: &ImageRaster,
    grid: &BlockGrid,
    detector: &dyn Detector,
    iou_floor: f64,
) -> Result<UtilitySupervisionRecord> {
    let full = detector.detect(image);
    let reference = *full
        .top_of_class(crate::detector::HAZARD_CLASS)
        .ok_or(Error::NoFullImageDetection)?;
    let s_full = reference.confidence;

    let matched_confidences: Vec<f64> = grid
        .ids()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|id| {
            let masked = mask_block(image, grid, id).expect("id from grid is in range");
            let detections = detector.detect(&masked);
            match_to_reference(&detections, &reference, iou_floor)
        })
        .collect();

    let values: Vec<f64> = matched_confidences
        .iter()
        .map(|&m| (s_full - m).max(0.0))
        .collect();

    Ok(UtilitySupervisionRecord {
        image_id: image_id.to_string(),
        full_confidence: s_full,
        full_detection: reference,
        matched_confidences,
        map: UtilityMap::new(image_id.to_string(), values, UtilitySource::EmpiricalOracle),
    })
}

// ---------------------------------------------------------------------------
// JSON serialization: {image_id, n_blocks, values[], total}
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct UtilityMapFile {
    image_id: String,
    n_blocks: u32,
    values: Vec<f64>,
    total: f64,
}

pub fn save_utility_map<P: AsRef<Path>>(path: P, map: &UtilityMap) -> Result<()> {
    let file = UtilityMapFile {
        image_id: map.image_id.clone(),
        n_blocks: map.n_blocks,
        values: map.values.clone(),
        total: map.total,
    };
    let data = serde_json::to_vec_pretty(&file)?;
    std::fs::write(path, data)?;
    Ok(())
}

/// Result of loading an externally predicted utility map.
pub struct LoadedUtility {
    pub map: UtilityMap,
    /// Number of negative entries clamped to zero.
    pub clamped: u32,
}

/// Loads a predictor-produced utility map. Negative entries are clamped to
/// zero (counted in `clamped`); a block count mismatch against the grid is a
/// schema error.
pub fn load_external_utility<P: AsRef<Path>>(path: P, grid: &BlockGrid) -> Result<LoadedUtility> {
    let data = std::fs::read(path)?;
    let file: UtilityMapFile = serde_json::from_slice(&data)?;
    if file.values.len() as u32 != file.n_blocks || file.n_blocks != grid.n_blocks() {
        return Err(Error::UtilityLength {
            got: file.values.len(),
            want: grid.n_blocks() as usize,
        });
    }
    let mut clamped = 0u32;
    let values: Vec<f64> = file
        .values
        .into_iter()
        .map(|v| {
            if v < 0.0 {
                clamped += 1;
                0.0
            } else {
                v
            }
        })
        .collect();
    Ok(LoadedUtility {
        map: UtilityMap::new(file.image_id, values, UtilitySource::ExternalPredictor),
        clamped,
    })
}
