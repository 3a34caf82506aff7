//! Deterministic synthetic hazard scenes with ground-truth boxes.
//!
//! A scene is one or more smooth radial-falloff blobs over uniform background
//! noise. Noise stays strictly below the detector's pixel threshold, so
//! above-threshold pixels come from blobs alone: false-positive components
//! are impossible and off-blob blocks carry exactly zero utility.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::image::ImageRaster;

/// One elliptical blob with a parabolic intensity falloff: the intensity at
/// normalized radius r is peak * (1 - r^2) for r < 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlobSpec {
    pub center_x: f64,
    pub center_y: f64,
    pub radius_x: f64,
    pub radius_y: f64,
    pub peak: u8,
}

impl BlobSpec {
    fn intensity_at(&self, x: u32, y: u32) -> f64 {
        let dx = (f64::from(x) + 0.5 - self.center_x) / self.radius_x;
        let dy = (f64::from(y) + 0.5 - self.center_y) / self.radius_y;
        let r2 = dx * dx + dy * dy;
        if r2 >= 1.0 {
            0.0
        } else {
            f64::from(self.peak) * (1.0 - r2)
        }
    }
}

/// Full description of one synthetic scene.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub blobs: Vec<BlobSpec>,
    /// Maximum background noise byte; must stay below the detector threshold.
    pub noise_level: u8,
    pub seed: u64,
}

/// A rendered scene: the raster, per-blob tight ground-truth boxes over
/// above-threshold pixels, and the total above-threshold mass the detector
/// sees on the full image.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub image: ImageRaster,
    pub gt_boxes: Vec<BBox>,
    pub above_threshold_mass: f64,
}

/// Renders a scene. `tau_pix` and `min_area` are the detector settings the
/// scene must satisfy: every blob's above-threshold region needs at least
/// `min_area` pixels so the full image is always detectable.
pub fn generate(spec: &SceneSpec, tau_pix: u8, min_area: u32) -> Result<GeneratedScene> {
    if spec.blobs.is_empty() {
        return Err(Error::SceneSpec("scene needs at least one blob".into()));
    }
    if spec.noise_level >= tau_pix {
        return Err(Error::SceneSpec(format!(
            "noise level {} reaches detector threshold {}",
            spec.noise_level, tau_pix
        )));
    }
    for (i, blob) in spec.blobs.iter().enumerate() {
        if blob.peak <= tau_pix {
            return Err(Error::SceneSpec(format!(
                "blob {i} peak {} never crosses threshold {tau_pix}",
                blob.peak
            )));
        }
        if blob.center_x - blob.radius_x < 0.0
            || blob.center_x + blob.radius_x > f64::from(spec.width)
            || blob.center_y - blob.radius_y < 0.0
            || blob.center_y + blob.radius_y > f64::from(spec.height)
        {
            return Err(Error::SceneSpec(format!("blob {i} exceeds image bounds")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pixels = vec![0u8; (spec.width * spec.height) as usize];
    let mut extents: Vec<Option<(u32, u32, u32, u32)>> = vec![None; spec.blobs.len()];
    let mut areas = vec![0u32; spec.blobs.len()];
    let mut mass = 0.0f64;
    let threshold = f64::from(tau_pix);

    for y in 0..spec.height {
        for x in 0..spec.width {
            let noise = if spec.noise_level == 0 {
                0
            } else {
                rng.gen_range(0..=spec.noise_level)
            };
            let mut value = f64::from(noise);
            for (i, blob) in spec.blobs.iter().enumerate() {
                let v = blob.intensity_at(x, y);
                if v >= threshold {
                    areas[i] += 1;
                    let e = extents[i].get_or_insert((x, y, x, y));
                    e.0 = e.0.min(x);
                    e.1 = e.1.min(y);
                    e.2 = e.2.max(x);
                    e.3 = e.3.max(y);
                }
                value = value.max(v);
            }
            let byte = value.round().min(255.0) as u8;
            if byte >= tau_pix {
                mass += f64::from(byte);
            }
            pixels[(y * spec.width + x) as usize] = byte;
        }
    }

    let mut gt_boxes = Vec::with_capacity(spec.blobs.len());
    for (i, extent) in extents.iter().enumerate() {
        let (min_x, min_y, max_x, max_y) = extent.ok_or_else(|| {
            Error::SceneSpec(format!("blob {i} has no above-threshold pixels"))
        })?;
        if areas[i] < min_area {
            return Err(Error::SceneSpec(format!(
                "blob {i} covers {} px, below detector floor {min_area}",
                areas[i]
            )));
        }
        gt_boxes.push(BBox::new(
            f64::from(min_x),
            f64::from(min_y),
            f64::from(max_x + 1),
            f64::from(max_y + 1),
        ));
    }

    Ok(GeneratedScene {
        image: ImageRaster::new(spec.width, spec.height, 1, pixels)?,
        gt_boxes,
        above_threshold_mass: mass,
    })
}

/// Knobs for corpus generation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusParams {
    pub count: u32,
    pub master_seed: u64,
    pub width: u32,
    pub height: u32,
    pub tau_pix: u8,
    pub min_area: u32,
    /// Full-scene detector confidence; reference mass is derived per scene.
    pub target_confidence: f64,
    pub noise_level: u8,
    /// Probability a blob is placed near the image center rather than
    /// anywhere; keeps center-first and random arrival orders distinct.
    pub center_bias: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            count: 200,
            master_seed: 42,
            width: 256,
            height: 128,
            tau_pix: crate::detector::DEFAULT_TAU_PIX,
            min_area: crate::detector::DEFAULT_MIN_AREA,
            target_confidence: 0.9,
            noise_level: 40,
            center_bias: 0.55,
        }
    }
}

impl CorpusParams {
    /// Stress profile: 640x320 (20x20 blocks of 32x16).
    pub fn large(mut self) -> Self {
        self.width = 640;
        self.height = 320;
        self
    }
}

/// Manifest entry for one generated scene.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub seed: u64,
    pub spec: SceneSpec,
    pub gt_boxes: Vec<BBox>,
    pub above_threshold_mass: f64,
    /// Detector reference mass: above_threshold_mass / target_confidence.
    pub reference_mass: f64,
}

/// Corpus manifest written alongside the scene rasters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub params: CorpusParams,
    pub scenes: Vec<SceneRecord>,
}

fn scene_seed(master: u64, index: u32) -> u64 {
    // splitmix64 step keeps per-scene streams well separated
    let mut z = master.wrapping_add(u64::from(index + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws one scene spec from the corpus distribution.
fn draw_spec(params: &CorpusParams, index: u32) -> SceneSpec {
    let seed = scene_seed(params.master_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (f64::from(params.width), f64::from(params.height));

    let radius_x = rng.gen_range(0.09..0.19) * w;
    let radius_y = rng.gen_range(0.11..0.23) * h;
    let peak = rng.gen_range(190..=240) as u8;

    let margin = 2.0;
    let span_x = w / 2.0 - radius_x - margin;
    let span_y = h / 2.0 - radius_y - margin;
    let central = rng.gen::<f64>() < params.center_bias;
    let reach = if central { 0.3 } else { 1.0 };
    let center_x = w / 2.0 + rng.gen_range(-1.0..1.0) * span_x * reach;
    let center_y = h / 2.0 + rng.gen_range(-1.0..1.0) * span_y * reach;

    SceneSpec {
        id: format!("scene_{index:04}"),
        width: params.width,
        height: params.height,
        blobs: vec![BlobSpec {
            center_x,
            center_y,
            radius_x,
            radius_y,
            peak,
        }],
        noise_level: params.noise_level,
        seed,
    }
}

/// Generates the whole corpus in memory. Deterministic in the params.
pub fn generate_corpus(params: &CorpusParams) -> Result<Vec<(SceneRecord, ImageRaster)>> {
    let mut out = Vec::with_capacity(params.count as usize);
    for index in 0..params.count {
        let spec = draw_spec(params, index);
        let scene = generate(&spec, params.tau_pix, params.min_area)?;
        let record = SceneRecord {
            id: spec.id.clone(),
            file: format!("{}.rimg", spec.id),
            width: spec.width,
            height: spec.height,
            channels: 1,
            seed: spec.seed,
            gt_boxes: scene.gt_boxes.clone(),
            above_threshold_mass: scene.above_threshold_mass,
            reference_mass: scene.above_threshold_mass / params.target_confidence,
            spec,
        };
        out.push((record, scene.image));
    }
    Ok(out)
}

pub fn save_manifest<P: AsRef<std::path::Path>>(path: P, manifest: &CorpusManifest) -> Result<()> {
    let data = serde_json::to_vec_pretty(manifest)?;
    std::fs::write(path, data)?;
    Ok(())
}

pub fn load_manifest<P: AsRef<std::path::Path>>(path: P) -> Result<CorpusManifest> {
    let data = std::fs::read(path)?;
    Ok(serde_json::from_slice(&data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{iou, Detector, SyntheticBlobDetector};

    fn one_blob_spec(noise: u8) -> SceneSpec {
        SceneSpec {
            id: "t".into(),
            width: 256,
            height: 128,
            blobs: vec![BlobSpec {
                center_x: 120.0,
                center_y: 60.0,
                radius_x: 34.0,
                radius_y: 22.0,
                peak: 220,
            }],
            noise_level: noise,
            seed: 11,
        }
    }

    #[test]
    fn same_seed_gives_identical_scenes() {
        let spec = one_blob_spec(40);
        let a = generate(&spec, 128, 16).unwrap();
        let b = generate(&spec, 128, 16).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.gt_boxes, b.gt_boxes);
    }

    #[test]
    fn detector_recovers_gt_box_and_target_confidence() {
        let spec = one_blob_spec(0);
        let scene = generate(&spec, 128, 16).unwrap();
        let target = 0.9;
        let det = SyntheticBlobDetector::new(128, 16, scene.above_threshold_mass / target);
        let out = det.detect(&scene.image);
        assert_eq!(out.detections.len(), 1);
        let d = &out.detections[0];
        assert_eq!(iou(&d.bbox, &scene.gt_boxes[0]), 1.0);
        assert!((d.confidence - target).abs() < 1e-9);
    }

    #[test]
    fn noise_below_threshold_never_changes_detection() {
        let clean = generate(&one_blob_spec(0), 128, 16).unwrap();
        let noisy = generate(&one_blob_spec(100), 128, 16).unwrap();
        assert_eq!(clean.gt_boxes, noisy.gt_boxes);
        assert_eq!(clean.above_threshold_mass, noisy.above_threshold_mass);
        let det = SyntheticBlobDetector::new(128, 16, clean.above_threshold_mass / 0.9);
        assert_eq!(det.detect(&clean.image), det.detect(&noisy.image));
    }

    #[test]
    fn rejects_out_of_bounds_blob() {
        let mut spec = one_blob_spec(20);
        spec.blobs[0].center_x = 10.0; // radius 34 pokes past the left edge
        assert!(matches!(generate(&spec, 128, 16), Err(Error::SceneSpec(_))));
    }

    #[test]
    fn rejects_noise_at_threshold() {
        let spec = one_blob_spec(128);
        assert!(matches!(generate(&spec, 128, 16), Err(Error::SceneSpec(_))));
    }

    #[test]
    fn rejects_subthreshold_blob() {
        let mut spec = one_blob_spec(20);
        spec.blobs[0].peak = 100;
        assert!(matches!(generate(&spec, 128, 16), Err(Error::SceneSpec(_))));
    }

    #[test]
    fn corpus_is_deterministic_and_detectable() {
        let params = CorpusParams {
            count: 16,
            ..CorpusParams::default()
        };
        let a = generate_corpus(&params).unwrap();
        let b = generate_corpus(&params).unwrap();
        assert_eq!(a.len(), 16);
        for ((ra, ia), (rb, ib)) in a.iter().zip(&b) {
            assert_eq!(ra, rb);
            assert_eq!(ia, ib);
            // gt area can never fall below the detector floor
            assert!(ra.gt_boxes[0].area() >= f64::from(params.min_area));
            assert!(ra.above_threshold_mass > 0.0);
        }
        // scene variety: not all centers identical
        let first = a[0].0.spec.blobs[0].center_x;
        assert!(a.iter().any(|(r, _)| r.spec.blobs[0].center_x != first));
    }
}
