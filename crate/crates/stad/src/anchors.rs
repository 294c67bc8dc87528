//! Default-box lattice generation and ground-truth matching.
//!
//! Every stream built from the same anchor config produces the identical
//! flat grid, which is what makes per-anchor score fusion across streams
//! well defined. Flat order is row-major over
//! `(level, cell_y, cell_x, box_index)`.

use serde::{Deserialize, Serialize};

use crate::boxops::{encode_offsets, iou, OffsetVector};
use crate::types::BoundingBox;
use crate::{Error, Result};

/// One prediction level of the lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorLevelConfig {
    pub feature_h: usize,
    pub feature_w: usize,
    /// Base box scale at this level, as a fraction of the image side.
    pub scale: f64,
    /// Scale of the following level; the extra box uses
    /// `sqrt(scale * next_scale)`.
    pub next_scale: f64,
    pub aspect_ratios: Vec<f64>,
    /// Adds one extra aspect-ratio-1 box at the intermediate scale.
    pub extra_scale_box: bool,
}

impl AnchorLevelConfig {
    pub fn boxes_per_cell(&self) -> usize {
        self.aspect_ratios.len() + usize::from(self.extra_scale_box)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub levels: Vec<AnchorLevelConfig>,
}

impl AnchorConfig {
    pub fn total_anchors(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.feature_h * l.feature_w * l.boxes_per_cell())
            .sum()
    }
}

/// Shape of one level in a generated grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelShape {
    pub feature_h: usize,
    pub feature_w: usize,
    pub boxes_per_cell: usize,
}

/// The flattened multi-scale anchor lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub levels: Vec<LevelShape>,
    pub flat_boxes: Vec<BoundingBox>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.flat_boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat_boxes.is_empty()
    }
}

/// Generates the anchor lattice: per cell, one box per aspect ratio at
/// the level scale, plus (optionally) one extra box at
/// `sqrt(scale * next_scale)`. Centers sit at `((x+0.5)/fw, (y+0.5)/fh)`;
/// boxes are clamped into `[0, 1]`.
pub fn generate_anchors(cfg: &AnchorConfig) -> Result<AnchorGrid> {
    let mut flat = Vec::with_capacity(cfg.total_anchors());
    let mut levels = Vec::with_capacity(cfg.levels.len());
    for (li, level) in cfg.levels.iter().enumerate() {
        if level.feature_h == 0 || level.feature_w == 0 {
            return Err(Error::Config(format!("level {li} has empty feature map")));
        }
        if level.scale <= 0.0 || level.aspect_ratios.is_empty() {
            return Err(Error::Config(format!(
                "level {li} needs positive scale and at least one aspect ratio"
            )));
        }
        levels.push(LevelShape {
            feature_h: level.feature_h,
            feature_w: level.feature_w,
            boxes_per_cell: level.boxes_per_cell(),
        });
        for cy in 0..level.feature_h {
            for cx in 0..level.feature_w {
                let ccx = (cx as f64 + 0.5) / level.feature_w as f64;
                let ccy = (cy as f64 + 0.5) / level.feature_h as f64;
                let mut push = |w: f64, h: f64| {
                    flat.push(BoundingBox {
                        x_min: (ccx - 0.5 * w).clamp(0.0, 1.0),
                        y_min: (ccy - 0.5 * h).clamp(0.0, 1.0),
                        x_max: (ccx + 0.5 * w).clamp(0.0, 1.0),
                        y_max: (ccy + 0.5 * h).clamp(0.0, 1.0),
                    });
                };
                for &ratio in &level.aspect_ratios {
                    let r = ratio.sqrt();
                    push(level.scale * r, level.scale / r);
                }
                if level.extra_scale_box {
                    let s = (level.scale * level.next_scale).sqrt();
                    push(s, s);
                }
            }
        }
    }
    // Cell centers are strictly inside (0,1), so clamping preserves area.
    debug_assert!(flat.iter().all(|b| b.area() > 0.0));
    Ok(AnchorGrid {
        levels,
        flat_boxes: flat,
    })
}

/// Per-anchor training targets produced by [`match_targets`].
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Matched class per anchor; 0 is background.
    pub labels: Vec<usize>,
    /// Regression target per anchor; meaningful only where `positive`.
    pub offsets: Vec<OffsetVector>,
    pub positive: Vec<bool>,
    /// Index of the matched ground-truth instance for positive anchors.
    pub matched_gt: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn num_positives(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// Matches ground truth to anchors for training targets.
///
/// Two stages: each ground-truth box first claims its best-IoU anchor
/// among those not already claimed (processed in ground-truth order, so
/// every instance gets at least one positive anchor); then every
/// remaining anchor whose best IoU against some ground truth reaches
/// `pos_iou` becomes positive for that highest-IoU instance. Ties break
/// toward the lower anchor index / lower ground-truth index.
///
/// Ground-truth class ids are 1-based; 0 is reserved for background.
pub fn match_targets(
    grid: &AnchorGrid,
    gt: &[(usize, BoundingBox)],
    pos_iou: f64,
    variances: (f64, f64),
) -> Result<MatchResult> {
    if !(0.0..1.0).contains(&pos_iou) || pos_iou <= 0.0 {
        return Err(Error::Config(format!("pos_iou {pos_iou} outside (0, 1)")));
    }
    for (class_id, b) in gt {
        b.validate()?;
        if *class_id == 0 {
            return Err(Error::InvalidValue(
                "ground-truth class id 0 collides with background".into(),
            ));
        }
    }
    let n = grid.len();
    let mut labels = vec![0usize; n];
    let mut offsets = vec![OffsetVector::default(); n];
    let mut positive = vec![false; n];
    let mut matched_gt = vec![None; n];

    if gt.is_empty() {
        return Ok(MatchResult {
            labels,
            offsets,
            positive,
            matched_gt,
        });
    }

    // IoU table: gt-major for cache friendliness on the forced stage.
    let table: Vec<Vec<f64>> = gt
        .iter()
        .map(|(_, g)| grid.flat_boxes.iter().map(|a| iou(a, g)).collect())
        .collect();

    // Stage 1: forced positives, one distinct anchor per ground truth.
    let mut claimed = vec![false; n];
    for (gi, row) in table.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (ai, &v) in row.iter().enumerate() {
            if claimed[ai] {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bv)) => v > bv,
            };
            if better {
                best = Some((ai, v));
            }
        }
        if let Some((ai, _)) = best {
            claimed[ai] = true;
            positive[ai] = true;
            labels[ai] = gt[gi].0;
            matched_gt[ai] = Some(gi);
            offsets[ai] = encode_offsets(&grid.flat_boxes[ai], &gt[gi].1, variances);
        }
    }

    // Stage 2: threshold matching for the remaining anchors.
    for ai in 0..n {
        if claimed[ai] {
            continue;
        }
        let mut best_gi = 0usize;
        let mut best_v = table[0][ai];
        for (gi, row) in table.iter().enumerate().skip(1) {
            if row[ai] > best_v {
                best_v = row[ai];
                best_gi = gi;
            }
        }
        if best_v >= pos_iou {
            positive[ai] = true;
            labels[ai] = gt[best_gi].0;
            matched_gt[ai] = Some(best_gi);
            offsets[ai] = encode_offsets(&grid.flat_boxes[ai], &gt[best_gi].1, variances);
        }
    }

    Ok(MatchResult {
        labels,
        offsets,
        positive,
        matched_gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxops::DEFAULT_VARIANCES;

    fn level(fh: usize, fw: usize, scale: f64, ratios: &[f64], extra: bool) -> AnchorLevelConfig {
        AnchorLevelConfig {
            feature_h: fh,
            feature_w: fw,
            scale,
            next_scale: scale * 1.5,
            aspect_ratios: ratios.to_vec(),
            extra_scale_box: extra,
        }
    }

    #[test]
    fn single_cell_centered_box() {
        let cfg = AnchorConfig {
            levels: vec![level(1, 1, 0.5, &[1.0], false)],
        };
        let grid = generate_anchors(&cfg).unwrap();
        assert_eq!(grid.len(), 1);
        let b = grid.flat_boxes[0];
        assert!((b.x_min - 0.25).abs() < 1e-12);
        assert!((b.y_min - 0.25).abs() < 1e-12);
        assert!((b.x_max - 0.75).abs() < 1e-12);
        assert!((b.y_max - 0.75).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_grid_centers() {
        let cfg = AnchorConfig {
            levels: vec![level(2, 2, 0.4, &[1.0], false)],
        };
        let grid = generate_anchors(&cfg).unwrap();
        assert_eq!(grid.len(), 4);
        let centers: Vec<(f64, f64)> = grid.flat_boxes.iter().map(|b| b.center()).collect();
        assert_eq!(
            centers,
            vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
        );
    }

    #[test]
    fn anchor_count_matches_config() {
        let cfg = AnchorConfig {
            levels: vec![
                level(8, 8, 0.2, &[1.0, 2.0, 0.5], true),
                level(4, 4, 0.4, &[1.0, 2.0], true),
                level(2, 2, 0.6, &[1.0], false),
            ],
        };
        let grid = generate_anchors(&cfg).unwrap();
        // Counting oracle: sum over levels of fh*fw*boxes_per_cell.
        let expected = 8 * 8 * 4 + 4 * 4 * 3 + 2 * 2 * 1;
        assert_eq!(grid.len(), expected);
        assert_eq!(grid.len(), cfg.total_anchors());
        assert!(grid.flat_boxes.iter().all(|b| b.area() > 0.0));
    }

    #[test]
    fn grid_is_deterministic() {
        let cfg = AnchorConfig {
            levels: vec![level(4, 4, 0.3, &[1.0, 2.0, 0.5], true)],
        };
        let a = generate_anchors(&cfg).unwrap();
        let b = generate_anchors(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_gt_is_all_background() {
        let cfg = AnchorConfig {
            levels: vec![level(2, 2, 0.4, &[1.0], false)],
        };
        let grid = generate_anchors(&cfg).unwrap();
        let m = match_targets(&grid, &[], 0.5, DEFAULT_VARIANCES).unwrap();
        assert_eq!(m.num_positives(), 0);
        assert!(m.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn gt_equal_to_anchor_matches_with_zero_offsets() {
        let cfg = AnchorConfig {
            levels: vec![level(2, 2, 0.4, &[1.0], false)],
        };
        let grid = generate_anchors(&cfg).unwrap();
        let gt = vec![(3usize, grid.flat_boxes[2])];
        let m = match_targets(&grid, &gt, 0.5, DEFAULT_VARIANCES).unwrap();
        assert!(m.positive[2]);
        assert_eq!(m.labels[2], 3);
        let off = m.offsets[2].as_array();
        assert!(off.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn every_gt_gets_a_positive_even_below_threshold() {
        let cfg = AnchorConfig {
            levels: vec![level(2, 2, 0.3, &[1.0], false)],
        };
        let grid = generate_anchors(&cfg).unwrap();
        // A small box overlapping every anchor weakly.
        let gt = vec![(1usize, BoundingBox::new(0.45, 0.45, 0.55, 0.55).unwrap())];
        let m = match_targets(&grid, &gt, 0.99, DEFAULT_VARIANCES).unwrap();
        assert_eq!(m.num_positives(), 1);
    }

    #[test]
    fn matching_is_total_and_single_class() {
        let cfg = AnchorConfig {
            levels: vec![level(4, 4, 0.3, &[1.0, 2.0], true)],
        };
        let grid = generate_anchors(&cfg).unwrap();
        let gt = vec![
            (1usize, BoundingBox::new(0.1, 0.1, 0.4, 0.4).unwrap()),
            (2usize, BoundingBox::new(0.55, 0.55, 0.9, 0.9).unwrap()),
        ];
        let m = match_targets(&grid, &gt, 0.4, DEFAULT_VARIANCES).unwrap();
        for i in 0..grid.len() {
            // Totality: positive or background, never both.
            assert_eq!(m.positive[i], m.labels[i] != 0);
            assert_eq!(m.positive[i], m.matched_gt[i].is_some());
        }
        // Both instances matched.
        assert!(m.matched_gt.iter().flatten().any(|&g| g == 0));
        assert!(m.matched_gt.iter().flatten().any(|&g| g == 1));
    }
}
