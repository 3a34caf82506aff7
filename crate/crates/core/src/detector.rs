//! Task oracle interface and the deterministic synthetic detector.
//!
//! The detector maps (partial) observations to detections. Implementations
//! must be pure: identical input bytes give bitwise-identical output, with no
//! mutable state across calls, so utility-map generation can fan out across
//! threads and simulator runs replay exactly.

use crate::image::ImageRaster;

/// Class label of the single hazard category detected in v1.
pub const HAZARD_CLASS: u32 = 0;

/// Axis-aligned pixel box, min-inclusive / max-exclusive.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        debug_assert!(x_min < x_max && y_min < y_max, "degenerate box");
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

/// Intersection-over-union of two boxes; 0 when disjoint, 1 iff identical.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// One detected object.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub class_id: u32,
}

/// Detections for one observation, sorted by confidence descending
/// (ties broken by x_min then y_min so the order is total and stable).
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
    pub image_width: u32,
    pub image_height: u32,
}

impl DetectionSet {
    pub fn new(mut detections: Vec<Detection>, image_width: u32, image_height: u32) -> Self {
        detections.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap()
                .then(a.bbox.x_min.partial_cmp(&b.bbox.x_min).unwrap())
                .then(a.bbox.y_min.partial_cmp(&b.bbox.y_min).unwrap())
        });
        Self {
            detections,
            image_width,
            image_height,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Highest-confidence detection of the given class, if any.
    pub fn top_of_class(&self, class_id: u32) -> Option<&Detection> {
        self.detections.iter().find(|d| d.class_id == class_id)
    }
}

/// The task oracle f(.): observations in, detections out. Must be pure.
pub trait Detector: Sync {
    fn detect(&self, observation: &ImageRaster) -> DetectionSet;
}

/// Thresholded connected-component detector with mass-proportional confidence.
///
/// Pixels with intensity >= `tau_pix` are foreground; 4-connected components
/// with at least `min_area` pixels become detections. Confidence is
/// clamp(visible_mass / reference_mass, 0, 1) where visible_mass sums the
/// foreground intensities of the component, so confidence is monotone
/// non-decreasing as more blocks of the scene become visible.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticBlobDetector {
    pub tau_pix: u8,
    pub min_area: u32,
    pub reference_mass: f64,
}

pub const DEFAULT_TAU_PIX: u8 = 128;
pub const DEFAULT_MIN_AREA: u32 = 16;

impl SyntheticBlobDetector {
    pub fn new(tau_pix: u8, min_area: u32, reference_mass: f64) -> Self {
        assert!(reference_mass > 0.0, "reference mass must be positive");
        Self {
            tau_pix,
            min_area,
            reference_mass,
        }
    }
}

impl Detector for SyntheticBlobDetector {
    fn detect(&self, observation: &ImageRaster) -> DetectionSet {
        let (w, h) = (observation.width(), observation.height());
        let n = w as usize * h as usize;
        let mut visited = vec![false; n];
        let mut detections = Vec::new();
        let mut stack: Vec<(u32, u32)> = Vec::new();

        for start_y in 0..h {
            for start_x in 0..w {
                let idx = (start_y * w + start_x) as usize;
                if visited[idx] || observation.intensity(start_x, start_y) < self.tau_pix {
                    continue;
                }
                // flood-fill one 4-connected component
                visited[idx] = true;
                stack.push((start_x, start_y));
                let mut area = 0u32;
                let mut mass = 0.0f64;
                let (mut min_x, mut min_y, mut max_x, mut max_y) =
                    (start_x, start_y, start_x, start_y);
                while let Some((x, y)) = stack.pop() {
                    area += 1;
                    mass += f64::from(observation.intensity(x, y));
                    min_x = min_x.min(x);
                    min_y = min_y.min(y);
                    max_x = max_x.max(x);
                    max_y = max_y.max(y);
                    let mut push = |nx: u32, ny: u32| {
                        let nidx = (ny * w + nx) as usize;
                        if !visited[nidx] && observation.intensity(nx, ny) >= self.tau_pix {
                            visited[nidx] = true;
                            stack.push((nx, ny));
                        }
                    };
                    if x > 0 {
                        push(x - 1, y);
                    }
                    if x + 1 < w {
                        push(x + 1, y);
                    }
                    if y > 0 {
                        push(x, y - 1);
                    }
                    if y + 1 < h {
                        push(x, y + 1);
                    }
                }
                if area < self.min_area {
                    continue;
                }
                detections.push(Detection {
                    bbox: BBox::new(
                        f64::from(min_x),
                        f64::from(min_y),
                        f64::from(max_x + 1),
                        f64::from(max_y + 1),
                    ),
                    confidence: (mass / self.reference_mass).clamp(0.0, 1.0),
                    class_id: HAZARD_CLASS,
                });
            }
        }
        DetectionSet::new(detections, w, h)
    }
}

/// Matched confidence of a candidate set against a reference detection.
///
/// Candidates of other classes are ignored. The candidate with maximum IoU
/// against the reference wins (ties: higher confidence, then lower x_min).
/// At IoU >= `iou_floor` the confidence passes through unchanged; weak
/// overlaps below the floor are scaled by IoU/iou_floor; zero overlap or no
/// candidate gives 0.
pub fn match_to_reference(candidate: &DetectionSet, reference: &Detection, iou_floor: f64) -> f64 {
    debug_assert!(iou_floor > 0.0 && iou_floor < 1.0);
    let best = candidate
        .detections
        .iter()
        .filter(|d| d.class_id == reference.class_id)
        .map(|d| (iou(&d.bbox, &reference.bbox), d))
        .max_by(|(ia, da), (ib, db)| {
            ia.partial_cmp(ib)
                .unwrap()
                .then(da.confidence.partial_cmp(&db.confidence).unwrap())
                .then(db.bbox.x_min.partial_cmp(&da.bbox.x_min).unwrap())
        });
    match best {
        None => 0.0,
        Some((overlap, _)) if overlap == 0.0 => 0.0,
        Some((overlap, det)) if overlap >= iou_floor => det.confidence,
        Some((overlap, det)) => det.confidence * (overlap / iou_floor),
    }
}

/// Default IoU floor shared by matching and the match-rate metric.
pub const DEFAULT_IOU_FLOOR: f64 = 0.5;
