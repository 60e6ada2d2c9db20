//! Frames, labels, velocity-based auto-annotation, augmentation,
//! normalization, environment-level splitting and the on-disk layout.

mod annotate;
mod augment;
pub mod layout;
mod preprocess;
mod split;

use std::path::PathBuf;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use annotate::{auto_annotate_positives, auto_annotate_sessions, AutoAnnotation};
pub use augment::{augment, flip_horizontal};
pub use preprocess::{conform, downsample, from_u8, preprocess, to_u8, RawImage};
pub use split::{split_by_environment, Split, SplitAssignment, SplitRequest};

/// Frame edge length after preprocessing.
pub const FRAME_SIZE: usize = 128;
/// Auto-annotation window length in seconds.
pub const AUTO_WINDOW_S: f64 = 2.4;
/// Minimum linear speed over the whole window.
pub const AUTO_MIN_VELOCITY: f64 = 0.3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read image {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },
    #[error("image too small: {width}x{height} (minimum 8x8)")]
    TooSmall { width: usize, height: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed {file}: {reason}")]
    Malformed { file: PathBuf, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// One normalized observation. Pixels are channels-first `[n, H, W]` in
/// [−1, 1], with `n = 3` (mono) or `n = 6` (left RGB then right RGB).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Array3<f32>,
    pub timestamp_s: f64,
    pub velocity_mps: Option<f64>,
    pub source_env: String,
}

impl Frame {
    pub fn new(pixels: Array3<f32>, source_env: impl Into<String>) -> Self {
        Self {
            pixels,
            timestamp_s: 0.0,
            velocity_mps: None,
            source_env: source_env.into(),
        }
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_stereo(&self) -> bool {
        self.channels() == 6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    AutoVelocity,
    Hand,
    ModelReannotated,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::AutoVelocity => "auto_velocity",
            Provenance::Hand => "hand",
            Provenance::ModelReannotated => "model_reannotated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "auto_velocity" => Some(Self::AutoVelocity),
            "hand" => Some(Self::Hand),
            "model_reannotated" => Some(Self::ModelReannotated),
            _ => None,
        }
    }
}

/// Traversability probability with its origin. Hand labels are exactly 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraversabilityLabel {
    value: f64,
    provenance: Provenance,
}

impl TraversabilityLabel {
    pub fn new(value: f64, provenance: Provenance) -> Result<Self, DatasetError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(DatasetError::Config(format!("label {value} outside [0, 1]")));
        }
        if provenance == Provenance::Hand && value != 0.0 && value != 1.0 {
            return Err(DatasetError::Config(format!(
                "hand label must be 0 or 1, got {value}"
            )));
        }
        Ok(Self { value, provenance })
    }

    pub fn hand(traversable: bool) -> Self {
        Self {
            value: if traversable { 1.0 } else { 0.0 },
            provenance: Provenance::Hand,
        }
    }

    pub fn auto_positive() -> Self {
        Self {
            value: 1.0,
            provenance: Provenance::AutoVelocity,
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub frame: Frame,
    pub label: TraversabilityLabel,
}

/// One odometry row of a drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryEntry {
    pub frame_index: usize,
    pub timestamp_s: f64,
    pub velocity_mps: Option<f64>,
}

/// Ordered odometry of one recording session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub env: String,
    pub session: String,
    pub entries: Vec<OdometryEntry>,
}

impl SessionLog {
    pub fn new(
        env: impl Into<String>,
        session: impl Into<String>,
        entries: Vec<OdometryEntry>,
    ) -> Result<Self, DatasetError> {
        if entries
            .windows(2)
            .any(|w| w[1].timestamp_s <= w[0].timestamp_s)
        {
            return Err(DatasetError::Config(
                "session timestamps must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            env: env.into(),
            session: session.into(),
            entries,
        })
    }

    /// Uniformly sampled session with a velocity per frame.
    pub fn uniform(env: &str, session: &str, period_s: f64, velocities: &[f64]) -> Self {
        let entries = velocities
            .iter()
            .enumerate()
            .map(|(i, v)| OdometryEntry {
                frame_index: i,
                timestamp_s: i as f64 * period_s,
                velocity_mps: Some(*v),
            })
            .collect();
        Self {
            env: env.into(),
            session: session.into(),
            entries,
        }
    }
}
