//! Pure box geometry: IoU, anchor offset encoding/decoding, and
//! per-class non-maximum suppression.
//!
//! All functions are deterministic; NMS tie-breaking is total so runs are
//! bit-reproducible.

use crate::types::{BoundingBox, Detection};
use crate::util::cmp_f64;

/// Center-offset and log-size regression target relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OffsetVector {
    pub d_cx: f64,
    pub d_cy: f64,
    pub d_w: f64,
    pub d_h: f64,
}

impl OffsetVector {
    pub fn as_array(&self) -> [f64; 4] {
        [self.d_cx, self.d_cy, self.d_w, self.d_h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        OffsetVector {
            d_cx: a[0],
            d_cy: a[1],
            d_w: a[2],
            d_h: a[3],
        }
    }
}

/// Default offset variances `(center, size)`.
pub const DEFAULT_VARIANCES: (f64, f64) = (0.1, 0.2);

/// Intersection-over-union of two boxes; symmetric, in `[0, 1]`,
/// 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Encodes `target` relative to `anchor` as center offsets and log sizes,
/// scaled by the variances.
pub fn encode_offsets(
    anchor: &BoundingBox,
    target: &BoundingBox,
    variances: (f64, f64),
) -> OffsetVector {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    OffsetVector {
        d_cx: (tcx - acx) / (aw * variances.0),
        d_cy: (tcy - acy) / (ah * variances.0),
        d_w: (target.width() / aw).ln() / variances.1,
        d_h: (target.height() / ah).ln() / variances.1,
    }
}

/// Decodes offsets against an anchor, clamping the result into `[0, 1]`.
///
/// Returns `None` when the clamped box is degenerate (zero width or
/// height); callers drop such detections.
pub fn decode_offsets(
    anchor: &BoundingBox,
    offsets: &OffsetVector,
    variances: (f64, f64),
) -> Option<BoundingBox> {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + offsets.d_cx * variances.0 * aw;
    let cy = acy + offsets.d_cy * variances.0 * ah;
    let w = aw * (offsets.d_w * variances.1).exp();
    let h = ah * (offsets.d_h * variances.1).exp();
    let b = BoundingBox {
        x_min: (cx - 0.5 * w).clamp(0.0, 1.0),
        y_min: (cy - 0.5 * h).clamp(0.0, 1.0),
        x_max: (cx + 0.5 * w).clamp(0.0, 1.0),
        y_max: (cy + 0.5 * h).clamp(0.0, 1.0),
    };
    if b.x_min < b.x_max && b.y_min < b.y_max {
        Some(b)
    } else {
        None
    }
}

/// Sorts detections by score descending with deterministic tie-breaks:
/// lower anchor id first (detections without an anchor id last), then
/// lexicographic box order.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        cmp_f64(b.score, a.score)
            .then_with(|| {
                let ka = a.anchor_id.unwrap_or(usize::MAX);
                let kb = b.anchor_id.unwrap_or(usize::MAX);
                ka.cmp(&kb)
            })
            .then_with(|| a.bbox.cmp_lex(&b.bbox))
    });
}

/// Greedy non-maximum suppression over detections of a single class.
///
/// Keeps a detection iff its IoU with every already-kept detection is
/// `<= iou_threshold`; at most `top_k` survivors, returned sorted by
/// score descending.
pub fn nms(dets: &[Detection], iou_threshold: f64, top_k: usize) -> Vec<Detection> {
    let mut sorted: Vec<Detection> = dets.to_vec();
    sort_detections(&mut sorted);
    let mut kept: Vec<Detection> = Vec::new();
    for det in sorted {
        if kept.len() >= top_k {
            break;
        }
        if kept.iter().all(|k| iou(&k.bbox, &det.bbox) <= iou_threshold) {
            kept.push(det);
        }
    }
    kept
}
