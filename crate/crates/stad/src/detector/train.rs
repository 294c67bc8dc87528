//! Stochastic gradient training of one stream.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{match_targets, MatchResult};
use crate::backbone::{Weight2d, Weight3d};
use crate::types::{BoundingBox, ClipTensor};
use crate::{Error, Result};

use super::loss::multibox_loss_from_logits;
use super::{ModelGrads, StreamModel, TrunkWeights};

/// One training example: an input block and its frame-level ground truth.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: ClipTensor,
    pub gt: Vec<(usize, BoundingBox)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub neg_pos_ratio: f64,
    pub pos_iou: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 8,
            steps: 500,
            neg_pos_ratio: 3.0,
            pos_iou: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Trains a copy of the model with SGD + momentum. Deterministic given
/// the optimizer seed: sample order, initialization (the caller's), and
/// all arithmetic are fixed.
pub fn train(
    model: &StreamModel,
    data: &[TrainSample],
    cfg: &OptimizerConfig,
) -> Result<(StreamModel, TrainReport)> {
    if data.is_empty() {
        return Err(Error::InvalidValue("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut model = model.clone();
    let targets: Vec<MatchResult> = data
        .iter()
        .map(|s| match_targets(&model.grid, &s.gt, cfg.pos_iou, model.config.variances))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut velocity = ModelGrads::zeros_like(&model);
    let mut report = TrainReport::default();

    for step in 0..cfg.steps {
        let mut batch_grads = ModelGrads::zeros_like(&model);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let sample = &data[i];
            let cache = model.forward_cached(&sample.input)?;
            let lo = multibox_loss_from_logits(
                &cache.offsets,
                &cache.logits,
                &targets[i],
                cfg.neg_pos_ratio,
            )?;
            if !lo.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged at step {step}: loss = {}",
                    lo.loss
                )));
            }
            batch_loss += lo.loss;
            let g = model.backward(&sample.input, &cache, &lo.d_offsets, &lo.d_logits)?;
            batch_grads.add_assign(&g);
        }
        let scale = 1.0 / cfg.batch_size as f64;
        batch_grads.scale(scale);
        batch_loss *= scale;
        report.losses.push(batch_loss);
        sgd_step(&mut model, &mut velocity, &batch_grads, cfg);
    }
    Ok((model, report))
}

fn sgd_step(
    model: &mut StreamModel,
    velocity: &mut ModelGrads,
    grads: &ModelGrads,
    cfg: &OptimizerConfig,
) {
    let lr = cfg.learning_rate;
    let mu = cfg.momentum;
    let wd = cfg.weight_decay;

    fn update2d(w: &mut Weight2d, v: &mut Weight2d, g: &Weight2d, lr: f64, mu: f64, wd: f64) {
        for ((w, v), g) in w.w.iter_mut().zip(v.w.iter_mut()).zip(g.w.iter()) {
            *v = mu * *v + *g + wd * *w;
            *w -= lr * *v;
        }
        for ((w, v), g) in w.b.iter_mut().zip(v.b.iter_mut()).zip(g.b.iter()) {
            *v = mu * *v + *g;
            *w -= lr * *v;
        }
    }
    fn update3d(w: &mut Weight3d, v: &mut Weight3d, g: &Weight3d, lr: f64, mu: f64, wd: f64) {
        for ((w, v), g) in w.w.iter_mut().zip(v.w.iter_mut()).zip(g.w.iter()) {
            *v = mu * *v + *g + wd * *w;
            *w -= lr * *v;
        }
        for ((w, v), g) in w.b.iter_mut().zip(v.b.iter_mut()).zip(g.b.iter()) {
            *v = mu * *v + *g;
            *w -= lr * *v;
        }
    }

    match (&mut model.trunk, &mut velocity.trunk, &grads.trunk) {
        (TrunkWeights::TwoD(w), TrunkWeights::TwoD(v), TrunkWeights::TwoD(g)) => {
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                if let (Some(w), Some(v), Some(g)) = (w.as_mut(), v.as_mut(), g.as_ref()) {
                    update2d(w, v, g, lr, mu, wd);
                }
            }
        }
        (TrunkWeights::ThreeD(w), TrunkWeights::ThreeD(v), TrunkWeights::ThreeD(g)) => {
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                if let (Some(w), Some(v), Some(g)) = (w.as_mut(), v.as_mut(), g.as_ref()) {
                    update3d(w, v, g, lr, mu, wd);
                }
            }
        }
        _ => panic!("velocity/gradient arity mismatch"),
    }
    for ((w, v), g) in model
        .extra
        .iter_mut()
        .zip(velocity.extra.iter_mut())
        .zip(grads.extra.iter())
    {
        update2d(w, v, g, lr, mu, wd);
    }
    for ((w, v), g) in model
        .loc_heads
        .iter_mut()
        .zip(velocity.loc_heads.iter_mut())
        .zip(grads.loc_heads.iter())
    {
        update2d(w, v, g, lr, mu, wd);
    }
    for ((w, v), g) in model
        .conf_heads
        .iter_mut()
        .zip(velocity.conf_heads.iter_mut())
        .zip(grads.conf_heads.iter())
    {
        update2d(w, v, g, lr, mu, wd);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::tests::{micro_config, rgb_input};
    use crate::types::StreamKind;

    fn samples() -> Vec<TrainSample> {
        let b1 = BoundingBox::new(0.1, 0.1, 0.45, 0.5).unwrap();
        let b2 = BoundingBox::new(0.5, 0.45, 0.9, 0.85).unwrap();
        vec![
            TrainSample {
                input: rgb_input(),
                gt: vec![(1, b1)],
            },
            TrainSample {
                input: rgb_input(),
                gt: vec![(2, b2)],
            },
        ]
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let model = StreamModel::new_random(micro_config(), StreamKind::RGB_2D, 1).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.0,
            steps: 3,
            batch_size: 2,
            ..OptimizerConfig::default()
        };
        let (trained, _) = train(&model, &samples(), &cfg).unwrap();
        match (&model.trunk, &trained.trunk) {
            (TrunkWeights::TwoD(a), TrunkWeights::TwoD(b)) => {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert_eq!(x, y);
                }
            }
            _ => unreachable!(),
        }
        assert_eq!(model.loc_heads[0].w, trained.loc_heads[0].w);
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let model = StreamModel::new_random(micro_config(), StreamKind::RGB_2D, 2).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            steps: 40,
            batch_size: 2,
            ..OptimizerConfig::default()
        };
        let (_, report) = train(&model, &samples(), &cfg).unwrap();
        let first = report.losses[0];
        let last = report.final_loss();
        assert!(
            last < first,
            "loss did not decrease: {first} -> {last}"
        );
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let model = StreamModel::new_random(micro_config(), StreamKind::RGB_2D, 3).unwrap();
        let cfg = OptimizerConfig {
            steps: 5,
            batch_size: 2,
            ..OptimizerConfig::default()
        };
        let (a, ra) = train(&model, &samples(), &cfg).unwrap();
        let (b, rb) = train(&model, &samples(), &cfg).unwrap();
        assert_eq!(ra.losses, rb.losses);
        match (&a.trunk, &b.trunk) {
            (TrunkWeights::TwoD(x), TrunkWeights::TwoD(y)) => assert_eq!(x, y),
            _ => unreachable!(),
        }
        assert_eq!(a.conf_heads[0].w, b.conf_heads[0].w);
    }
}
