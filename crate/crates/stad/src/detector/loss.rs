//! Multibox training loss: smooth-L1 localization over positive anchors
//! plus cross-entropy with hard negative mining.

use ndarray::Array2;

use crate::anchors::MatchResult;
use crate::boxops::OffsetVector;
use crate::{Error, Result};

use super::RawPrediction;

/// Negatives used when a frame has no positive anchors.
pub const FALLBACK_NEGATIVES: usize = 16;

/// Loss value plus gradients w.r.t. the raw per-anchor outputs.
///
/// `d_logits` is the gradient w.r.t. the pre-softmax class logits (for a
/// softmax output `p`, that gradient is `p - onehot`, so it is computable
/// from the probabilities alone).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub d_offsets: Vec<OffsetVector>,
    pub d_logits: Array2<f64>,
    pub num_positives: usize,
}

fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Shared core: consumes per-anchor class probabilities.
fn multibox_loss_from_probs(
    offsets: &[OffsetVector],
    probs: &Array2<f64>,
    targets: &MatchResult,
    neg_pos_ratio: f64,
) -> Result<LossOutput> {
    let anchors = offsets.len();
    if probs.shape()[0] != anchors || targets.labels.len() != anchors {
        return Err(Error::ShapeMismatch(format!(
            "loss inputs disagree on anchor count: {} offsets, {} score rows, {} targets",
            anchors,
            probs.shape()[0],
            targets.labels.len()
        )));
    }
    let num_classes = probs.shape()[1];
    let mut d_offsets = vec![OffsetVector::default(); anchors];
    let mut d_logits = Array2::<f64>::zeros((anchors, num_classes));

    let positives: Vec<usize> = (0..anchors).filter(|&a| targets.positive[a]).collect();
    let n_pos = positives.len();

    // Localization term over positives.
    let mut loc_loss = 0.0;
    for &a in &positives {
        let pred = offsets[a].as_array();
        let tgt = targets.offsets[a].as_array();
        for c in 0..4 {
            let diff = pred[c] - tgt[c];
            loc_loss += smooth_l1(diff);
        }
    }

    let logp = |a: usize, k: usize| -> f64 { probs[[a, k]].max(1e-300).ln() };

    // Classification: positives plus hard-mined negatives.
    let mut ce_loss = 0.0;
    for &a in &positives {
        ce_loss += -logp(a, targets.labels[a]);
    }
    let mut negatives: Vec<(usize, f64)> = (0..anchors)
        .filter(|&a| !targets.positive[a])
        .map(|a| (a, -logp(a, 0)))
        .collect();
    negatives.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    let n_neg = if n_pos > 0 {
        ((neg_pos_ratio * n_pos as f64).floor() as usize).min(negatives.len())
    } else {
        FALLBACK_NEGATIVES.min(negatives.len())
    };
    let mined: Vec<usize> = negatives[..n_neg].iter().map(|(a, _)| *a).collect();
    for &a in &mined {
        ce_loss += -logp(a, 0);
    }

    let norm = if n_pos > 0 {
        n_pos as f64
    } else {
        n_neg.max(1) as f64
    };
    let loss = (loc_loss + ce_loss) / norm;

    for &a in &positives {
        let pred = offsets[a].as_array();
        let tgt = targets.offsets[a].as_array();
        let mut g = [0.0; 4];
        for c in 0..4 {
            g[c] = smooth_l1_grad(pred[c] - tgt[c]) / norm;
        }
        d_offsets[a] = OffsetVector::from_array(g);
    }
    for &a in positives.iter().chain(mined.iter()) {
        let label = if targets.positive[a] {
            targets.labels[a]
        } else {
            0
        };
        for k in 0..num_classes {
            let y = if k == label { 1.0 } else { 0.0 };
            d_logits[[a, k]] = (probs[[a, k]] - y) / norm;
        }
    }

    Ok(LossOutput {
        loss,
        d_offsets,
        d_logits,
        num_positives: n_pos,
    })
}

/// Multibox loss over a post-softmax prediction.
pub fn multibox_loss(
    pred: &RawPrediction,
    targets: &MatchResult,
    neg_pos_ratio: f64,
) -> Result<LossOutput> {
    multibox_loss_from_probs(&pred.offsets, &pred.scores, targets, neg_pos_ratio)
}

/// Multibox loss from pre-softmax logits; used on the training path where
/// the stable log-softmax matters.
pub fn multibox_loss_from_logits(
    offsets: &[OffsetVector],
    logits: &Array2<f64>,
    targets: &MatchResult,
    neg_pos_ratio: f64,
) -> Result<LossOutput> {
    multibox_loss_from_probs(offsets, &super::softmax_rows(logits), targets, neg_pos_ratio)
}
