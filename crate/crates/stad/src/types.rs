//! Shared domain types.
//!
//! Everything here is an immutable value; construction validates the
//! invariants and the rest of the crate relies on them. Coordinates are
//! normalized to `[0, 1]` throughout; pixel coordinates exist only at
//! file ingestion/emission boundaries (see [`crate::data`]).

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned spatial box in normalized image coordinates.
///
/// Invariants: `0 <= x_min < x_max <= 1`, `0 <= y_min < y_max <= 1`,
/// hence strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    /// Checks the box invariants, returning the box unchanged on success.
    pub fn validate(&self) -> Result<Self> {
        for (name, v) in [
            ("x_min", self.x_min),
            ("y_min", self.y_min),
            ("x_max", self.x_max),
            ("y_max", self.y_max),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidBox(format!(
                    "{name} = {v} outside normalized range [0, 1]"
                )));
            }
        }
        if self.x_min >= self.x_max {
            return Err(Error::InvalidBox(format!(
                "zero or negative width: x_min {} >= x_max {}",
                self.x_min, self.x_max
            )));
        }
        if self.y_min >= self.y_max {
            return Err(Error::InvalidBox(format!(
                "zero or negative height: y_min {} >= y_max {}",
                self.y_min, self.y_max
            )));
        }
        Ok(*self)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Deterministic lexicographic order on corners, for tie-breaking.
    pub fn cmp_lex(&self, other: &Self) -> std::cmp::Ordering {
        (self.x_min, self.y_min, self.x_max, self.y_max)
            .partial_cmp(&(other.x_min, other.y_min, other.x_max, other.y_max))
            .unwrap_or(std::cmp::Ordering::Equal)
    }
}

/// Checks box invariants and returns the box unchanged.
pub fn validate_box(b: BoundingBox) -> Result<BoundingBox> {
    b.validate()
}

/// A class-scored spatial detection on one frame.
///
/// `anchor_id` indexes the flattened anchor grid the detection was decoded
/// from. It is present on freshly decoded detections and absent after a
/// file round-trip.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
    pub anchor_id: Option<usize>,
}

impl Detection {
    pub fn new(bbox: BoundingBox, class_id: usize, score: f64, anchor_id: Option<usize>) -> Result<Self> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidValue(format!(
                "detection score {score} outside [0, 1]"
            )));
        }
        Ok(Detection {
            bbox,
            class_id,
            score,
            anchor_id,
        })
    }

    /// Validates the class id against a configured class count.
    pub fn validate_class(&self, num_classes: usize) -> Result<()> {
        if self.class_id >= num_classes {
            return Err(Error::InvalidValue(format!(
                "class id {} out of range for {} classes",
                self.class_id, num_classes
            )));
        }
        Ok(())
    }
}

/// Input block for a stream: a single image `(C, H, W)` or a clip
/// `(C, N, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ClipTensor {
    TwoD(Array3<f64>),
    ThreeD(Array4<f64>),
}

impl ClipTensor {
    pub fn two_d(values: Array3<f64>) -> Self {
        ClipTensor::TwoD(values)
    }

    pub fn three_d(values: Array4<f64>) -> Result<Self> {
        if values.shape()[1] < 1 {
            return Err(Error::ShapeMismatch(
                "clip temporal length must be >= 1".into(),
            ));
        }
        Ok(ClipTensor::ThreeD(values))
    }

    pub fn channels(&self) -> usize {
        match self {
            ClipTensor::TwoD(a) => a.shape()[0],
            ClipTensor::ThreeD(a) => a.shape()[0],
        }
    }

    /// Temporal length; 1 for the 2D layout.
    pub fn temporal_len(&self) -> usize {
        match self {
            ClipTensor::TwoD(_) => 1,
            ClipTensor::ThreeD(a) => a.shape()[1],
        }
    }

    pub fn spatial(&self) -> (usize, usize) {
        match self {
            ClipTensor::TwoD(a) => (a.shape()[1], a.shape()[2]),
            ClipTensor::ThreeD(a) => (a.shape()[2], a.shape()[3]),
        }
    }

    pub fn is_three_d(&self) -> bool {
        matches!(self, ClipTensor::ThreeD(_))
    }
}

/// Ground-truth instances on one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_index: usize,
    /// `(class_id, box)` per action instance; a frame may contain several.
    pub instances: Vec<(usize, BoundingBox)>,
}

/// One element of an action tube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeElement {
    pub frame_index: usize,
    pub bbox: BoundingBox,
    pub score: f64,
}

/// A temporal chain of boxes for one action instance in one video.
///
/// A finalized tube covers consecutive frames with no gaps and its
/// `tube_score` equals the mean of its element scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTube {
    pub video_id: String,
    pub class_id: usize,
    pub elements: Vec<TubeElement>,
    pub tube_score: f64,
}

impl ActionTube {
    /// Builds a tube, recomputing `tube_score` as the mean element score.
    pub fn new(video_id: String, class_id: usize, elements: Vec<TubeElement>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::InvalidValue("tube must have >= 1 element".into()));
        }
        let score = elements.iter().map(|e| e.score).sum::<f64>() / elements.len() as f64;
        let tube = ActionTube {
            video_id,
            class_id,
            elements,
            tube_score: score,
        };
        tube.validate()?;
        Ok(tube)
    }

    /// Checks the tube invariants: consecutive frames, recomputable score.
    pub fn validate(&self) -> Result<()> {
        if self.elements.is_empty() {
            return Err(Error::InvalidValue("empty tube".into()));
        }
        for w in self.elements.windows(2) {
            if w[1].frame_index != w[0].frame_index + 1 {
                return Err(Error::InvalidValue(format!(
                    "tube frames not consecutive: {} then {}",
                    w[0].frame_index, w[1].frame_index
                )));
            }
        }
        let mean = self.elements.iter().map(|e| e.score).sum::<f64>() / self.elements.len() as f64;
        if (mean - self.tube_score).abs() > 1e-9 {
            return Err(Error::InvalidValue(format!(
                "tube_score {} differs from element mean {}",
                self.tube_score, mean
            )));
        }
        Ok(())
    }

    pub fn start_frame(&self) -> usize {
        self.elements[0].frame_index
    }

    pub fn end_frame(&self) -> usize {
        self.elements[self.elements.len() - 1].frame_index
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// Input modality of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Rgb,
    Flow,
}

/// Whether a stream consumes a single image or a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemporalArity {
    TwoD,
    ThreeD,
}

/// One of the four stream inputs: 2D/3D x RGB/flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKind {
    pub modality: Modality,
    pub arity: TemporalArity,
}

impl StreamKind {
    pub const RGB_2D: StreamKind = StreamKind {
        modality: Modality::Rgb,
        arity: TemporalArity::TwoD,
    };
    pub const FLOW_2D: StreamKind = StreamKind {
        modality: Modality::Flow,
        arity: TemporalArity::TwoD,
    };
    pub const RGB_3D: StreamKind = StreamKind {
        modality: Modality::Rgb,
        arity: TemporalArity::ThreeD,
    };
    pub const FLOW_3D: StreamKind = StreamKind {
        modality: Modality::Flow,
        arity: TemporalArity::ThreeD,
    };

    pub const ALL: [StreamKind; 4] = [
        StreamKind::RGB_2D,
        StreamKind::FLOW_2D,
        StreamKind::RGB_3D,
        StreamKind::FLOW_3D,
    ];

    pub fn is_three_d(&self) -> bool {
        self.arity == TemporalArity::ThreeD
    }
}

impl std::fmt::Display for StreamKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let arity = match self.arity {
            TemporalArity::TwoD => "2d",
            TemporalArity::ThreeD => "3d",
        };
        let modality = match self.modality {
            Modality::Rgb => "RGB",
            Modality::Flow => "OF",
        };
        write!(f, "{arity}{modality}")
    }
}

impl std::str::FromStr for StreamKind {
    type Err = Error;

    /// Parses the stream notation used in fusion recipes: `2dRGB`, `3dOF`,
    /// case-insensitive, with `flow` accepted as an alias of `OF`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (arity, rest) = if let Some(rest) = lower.strip_prefix("2d") {
            (TemporalArity::TwoD, rest)
        } else if let Some(rest) = lower.strip_prefix("3d") {
            (TemporalArity::ThreeD, rest)
        } else {
            return Err(Error::Config(format!(
                "stream '{s}' must start with 2d or 3d"
            )));
        };
        let modality = match rest {
            "rgb" => Modality::Rgb,
            "of" | "flow" => Modality::Flow,
            other => {
                return Err(Error::Config(format!(
                    "unknown stream modality '{other}' in '{s}'"
                )))
            }
        };
        Ok(StreamKind { modality, arity })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn full_image_box_accepted() {
        let b = validate_box(BoundingBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 1.0,
            y_max: 1.0,
        })
        .unwrap();
        assert_eq!(b.area(), 1.0);
    }

    #[test]
    fn zero_width_box_rejected() {
        let err = BoundingBox::new(0.5, 0.5, 0.5, 0.9).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn out_of_range_box_rejected() {
        let err = BoundingBox::new(-0.1, 0.0, 0.5, 0.5).unwrap_err();
        assert!(err.to_string().contains("[0, 1]"), "{err}");
    }

    #[test]
    fn detection_score_range_checked() {
        let b = BoundingBox::new(0.1, 0.1, 0.5, 0.5).unwrap();
        assert!(Detection::new(b, 0, 1.2, None).is_err());
        assert!(Detection::new(b, 0, f64::NAN, None).is_err());
        let d = Detection::new(b, 2, 0.7, Some(11)).unwrap();
        assert!(d.validate_class(3).is_ok());
        assert!(d.validate_class(2).is_err());
    }

    #[test]
    fn clip_tensor_shapes() {
        let two = ClipTensor::two_d(Array3::zeros((3, 8, 10)));
        assert_eq!(two.channels(), 3);
        assert_eq!(two.spatial(), (8, 10));
        assert_eq!(two.temporal_len(), 1);

        let three = ClipTensor::three_d(ndarray::Array4::zeros((3, 4, 8, 10))).unwrap();
        assert_eq!(three.temporal_len(), 4);
        assert!(three.is_three_d());
    }

    #[test]
    fn tube_invariants() {
        let b = BoundingBox::new(0.1, 0.1, 0.5, 0.5).unwrap();
        let make = |frames: &[usize]| {
            ActionTube::new(
                "v".into(),
                1,
                frames
                    .iter()
                    .map(|&f| TubeElement {
                        frame_index: f,
                        bbox: b,
                        score: 0.5,
                    })
                    .collect(),
            )
        };
        assert!(make(&[3, 4, 5]).is_ok());
        assert!(make(&[3, 5]).is_err());
        let t = make(&[0, 1]).unwrap();
        assert!((t.tube_score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stream_kind_round_trip() {
        for kind in StreamKind::ALL {
            let s = kind.to_string();
            let parsed: StreamKind = s.parse().unwrap();
            assert_eq!(parsed, kind);
        }
        assert_eq!(
            "3dflow".parse::<StreamKind>().unwrap(),
            StreamKind::FLOW_3D
        );
        assert!("4dRGB".parse::<StreamKind>().is_err());
    }
}
