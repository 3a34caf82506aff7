//! Utility-gated progressive image delivery over lossy datagram links.
//!
//! An image travels as fixed-size packet blocks. The sender attaches a
//! per-block decision-utility map as control metadata; the receiver rebuilds
//! a partial observation as blocks arrive, runs a task detector on it, and
//! stops reception early once enough accumulated utility (or another stopping
//! rule) says the decision is good enough. The same policy engine runs inside
//! a deterministic event-driven simulator and over live UDP sockets.

pub mod detector;
pub mod error;
pub mod image;
pub mod metrics;
pub mod policy;
pub mod scenegen;
pub mod sim;
pub mod utility;
pub mod wire;

pub use detector::{BBox, Detection, DetectionSet, Detector, SyntheticBlobDetector};
pub use error::{Error, Result};
pub use image::{BlockGrid, BlockId, ImageRaster, RasterMeta, ReceptionSet};
pub use metrics::AggregateRow;
pub use policy::{StabilityParams, StopDecision, StopPolicy, StopReason};
pub use sim::{ArrivalSchedule, OrderKind, RunTrace};
pub use utility::{UtilityMap, UtilitySource};
