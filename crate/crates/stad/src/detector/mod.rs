//! A complete single-shot stream: trunk taps (temporally pooled for 3D
//! streams), extra convolutional layers, localization/classification
//! heads, decode, and per-class NMS.
//!
//! All four stream kinds share the anchor lattice of their
//! [`DetectorConfig`], and `predict` emits per-anchor rows in the grid's
//! flat order, which is what makes cross-stream score fusion exact.

mod checkpoint;
mod loss;
mod train;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, AnchorConfig, AnchorGrid};
use crate::backbone::ops;
use crate::backbone::{
    self, inflate_config, inflate_weight_stack, BackboneConfig, InflateMode, LayerKind, LayerSpec,
    Weight2d, Weight3d,
};
use crate::boxops::{decode_offsets, nms, sort_detections, OffsetVector};
use crate::types::{ClipTensor, Detection, StreamKind, TemporalArity};
use crate::util::fnv1a64;
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{multibox_loss, multibox_loss_from_logits, LossOutput, FALLBACK_NEGATIVES};
pub use train::{train, OptimizerConfig, TrainReport, TrainSample};

/// Full configuration of one detection stream (shared by all four
/// stream kinds; the 3D kinds inflate the backbone on construction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// The trunk in its 2D form.
    pub backbone: BackboneConfig,
    /// Convolutional layers appended after the last backbone tap.
    pub extra_layers: Vec<LayerSpec>,
    /// Indices of extra layers that serve as prediction levels.
    pub extra_taps: Vec<usize>,
    pub anchors: AnchorConfig,
    /// Number of action classes; score rows carry `num_classes + 1`
    /// entries with background at index 0.
    pub num_classes: usize,
    pub variances: (f64, f64),
    /// Spatial kernel of the two heads (odd; padded to preserve size).
    pub head_kernel: usize,
    pub inflate_mode: InflateMode,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one action class".into()));
        }
        if self.head_kernel % 2 == 0 {
            return Err(Error::Config("head kernel must be odd".into()));
        }
        if self.backbone.taps.last() != Some(&(self.backbone.layers.len() - 1)) {
            return Err(Error::Config(
                "last backbone layer must be a tap so the extra layers chain from it".into(),
            ));
        }
        for (i, l) in self.extra_layers.iter().enumerate() {
            if l.kind != LayerKind::Conv {
                return Err(Error::Config(format!("extra layer {i} must be a conv")));
            }
        }
        let mut prev = None;
        for &t in &self.extra_taps {
            if t >= self.extra_layers.len() {
                return Err(Error::Config(format!("extra tap {t} out of range")));
            }
            if let Some(p) = prev {
                if t <= p {
                    return Err(Error::Config("extra taps must be increasing".into()));
                }
            }
            prev = Some(t);
        }
        let shapes = self.level_shapes()?;
        if shapes.len() != self.anchors.levels.len() {
            return Err(Error::Config(format!(
                "{} prediction levels but {} anchor levels",
                shapes.len(),
                self.anchors.levels.len()
            )));
        }
        for (i, ((_, h, w), lvl)) in shapes.iter().zip(self.anchors.levels.iter()).enumerate() {
            if *h != lvl.feature_h || *w != lvl.feature_w {
                return Err(Error::Config(format!(
                    "level {i}: feature map {h}x{w} but anchor level is {}x{}",
                    lvl.feature_h, lvl.feature_w
                )));
            }
        }
        Ok(())
    }

    /// `(channels, h, w)` of every prediction level, backbone taps first.
    /// Spatial geometry is shared by the 2D and 3D forms, since inflation
    /// only touches the temporal axis.
    pub fn level_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let per_layer = backbone::layer_shapes_2d(&self.backbone)?;
        let mut out: Vec<(usize, usize, usize)> =
            self.backbone.taps.iter().map(|&t| per_layer[t]).collect();
        let (mut c, mut h, mut w) = *per_layer.last().expect("non-empty backbone");
        for (i, l) in self.extra_layers.iter().enumerate() {
            h = ops::out_extent(h, l.kernel.1, l.stride.1, l.padding.1)?;
            w = ops::out_extent(w, l.kernel.2, l.stride.2, l.padding.2)?;
            c = l.out_channels;
            if self.extra_taps.contains(&i) {
                out.push((c, h, w));
            }
        }
        Ok(out)
    }

    /// Fingerprint of everything fusion depends on: the anchor lattice,
    /// the class count, and the offset variances.
    pub fn anchor_fingerprint(&self) -> u64 {
        #[derive(Serialize)]
        struct Fp<'a> {
            anchors: &'a AnchorConfig,
            num_classes: usize,
            variances: (f64, f64),
        }
        let json = serde_json::to_string(&Fp {
            anchors: &self.anchors,
            num_classes: self.num_classes,
            variances: self.variances,
        })
        .expect("config serializes");
        fnv1a64(json.as_bytes())
    }

    /// Hash of the entire configuration.
    pub fn config_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a64(json.as_bytes())
    }
}

/// Per-anchor offsets and post-softmax class scores, in anchor-grid
/// flat order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub offsets: Vec<OffsetVector>,
    /// `(anchors, num_classes + 1)`, rows summing to 1; background is
    /// column 0.
    pub scores: Array2<f64>,
}

impl RawPrediction {
    pub fn num_anchors(&self) -> usize {
        self.offsets.len()
    }

    /// Checks that score rows are valid distributions.
    pub fn validate(&self) -> Result<()> {
        if self.scores.shape()[0] != self.offsets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} score rows for {} offsets",
                self.scores.shape()[0],
                self.offsets.len()
            )));
        }
        for (i, row) in self.scores.axis_iter(Axis(0)).enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidValue(format!(
                    "score row {i} is not a distribution (sum {s})"
                )));
            }
        }
        Ok(())
    }
}

/// Trunk weights in the arity matching the stream kind.
#[derive(Debug, Clone, PartialEq)]
pub enum TrunkWeights {
    TwoD(Vec<Option<Weight2d>>),
    ThreeD(Vec<Option<Weight3d>>),
}

/// One trained (or freshly initialized) detection stream.
#[derive(Debug, Clone)]
pub struct StreamModel {
    pub kind: StreamKind,
    pub config: DetectorConfig,
    /// Inflated copy of `config.backbone` for 3D streams, the plain 2D
    /// config otherwise.
    pub trunk_cfg: BackboneConfig,
    pub trunk: TrunkWeights,
    pub extra: Vec<Weight2d>,
    pub loc_heads: Vec<Weight2d>,
    pub conf_heads: Vec<Weight2d>,
    pub grid: AnchorGrid,
    pub fingerprint: u64,
}

pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

impl StreamModel {
    /// Builds a stream with seeded random weights. 3D streams start from
    /// the inflation of the same random 2D trunk, mirroring how a
    /// pretrained 2D network bootstraps its 3D counterpart.
    pub fn new_random(config: DetectorConfig, kind: StreamKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w2d = backbone::random_weights_2d(&config.backbone, &mut rng);
        let (trunk_cfg, trunk) = match kind.arity {
            TemporalArity::TwoD => (config.backbone.clone(), TrunkWeights::TwoD(w2d)),
            TemporalArity::ThreeD => {
                let cfg3 = inflate_config(&config.backbone);
                let w3 = inflate_weight_stack(&cfg3, &w2d, config.inflate_mode);
                (cfg3, TrunkWeights::ThreeD(w3))
            }
        };
        let level_shapes = config.level_shapes()?;
        let base_channels = backbone::layer_shapes_2d(&config.backbone)?
            .last()
            .expect("non-empty")
            .0;
        let mut extra = Vec::with_capacity(config.extra_layers.len());
        let mut in_c = base_channels;
        for l in &config.extra_layers {
            extra.push(backbone::init_weight_2d(
                &mut rng,
                l.out_channels,
                in_c,
                l.kernel.1,
                l.kernel.2,
            ));
            in_c = l.out_channels;
        }
        let k = config.head_kernel;
        let mut loc_heads = Vec::new();
        let mut conf_heads = Vec::new();
        for (shape, lvl) in level_shapes.iter().zip(config.anchors.levels.iter()) {
            let b = lvl.boxes_per_cell();
            loc_heads.push(backbone::init_weight_2d(&mut rng, b * 4, shape.0, k, k));
            conf_heads.push(backbone::init_weight_2d(
                &mut rng,
                b * (config.num_classes + 1),
                shape.0,
                k,
                k,
            ));
        }
        let grid = generate_anchors(&config.anchors)?;
        let fingerprint = config.anchor_fingerprint();
        Ok(StreamModel {
            kind,
            config,
            trunk_cfg,
            trunk,
            extra,
            loc_heads,
            conf_heads,
            grid,
            fingerprint,
        })
    }

    /// Runs the stream and returns per-anchor offsets and softmax scores
    /// in anchor-grid flat order.
    pub fn predict(&self, x: &ClipTensor) -> Result<RawPrediction> {
        let cache = self.forward_cached(x)?;
        Ok(RawPrediction {
            scores: softmax_rows(&cache.logits),
            offsets: cache.offsets,
        })
    }

    /// Decodes, thresholds, and suppresses a prediction into detections.
    ///
    /// Background is dropped; per class, scores strictly above
    /// `conf_threshold` survive, NMS runs per class, and the merged list
    /// is cut to the global `top_k`. Emitted class ids are 1-based.
    pub fn detect(
        &self,
        x: &ClipTensor,
        conf_threshold: f64,
        nms_iou: f64,
        top_k: usize,
    ) -> Result<Vec<Detection>> {
        let raw = self.predict(x)?;
        Ok(self.decode_prediction(&raw, conf_threshold, nms_iou, top_k))
    }

    /// The decode/threshold/NMS pipeline on an existing prediction
    /// (shared with late fusion).
    pub fn decode_prediction(
        &self,
        raw: &RawPrediction,
        conf_threshold: f64,
        nms_iou: f64,
        top_k: usize,
    ) -> Vec<Detection> {
        let decoded: Vec<Option<crate::types::BoundingBox>> = raw
            .offsets
            .iter()
            .zip(self.grid.flat_boxes.iter())
            .map(|(off, anchor)| decode_offsets(anchor, off, self.config.variances))
            .collect();
        let mut all = Vec::new();
        for class in 1..=self.config.num_classes {
            let candidates: Vec<Detection> = decoded
                .iter()
                .enumerate()
                .filter_map(|(a, bbox)| {
                    let bbox = (*bbox)?;
                    let score = raw.scores[[a, class]];
                    if score > conf_threshold {
                        Some(Detection {
                            bbox,
                            class_id: class,
                            score,
                            anchor_id: Some(a),
                        })
                    } else {
                        None
                    }
                })
                .collect();
            all.extend(nms(&candidates, nms_iou, top_k));
        }
        sort_detections(&mut all);
        all.truncate(top_k);
        all
    }

    pub(crate) fn forward_cached(&self, x: &ClipTensor) -> Result<ForwardCache> {
        let (trunk2d, trunk3d, mut pooled): (
            Option<backbone::Cache2d>,
            Option<backbone::Cache3d>,
            Vec<Array3<f64>>,
        ) = match (&self.trunk, x) {
            (TrunkWeights::TwoD(w), ClipTensor::TwoD(img)) => {
                let cache = backbone::forward_2d_cached(&self.trunk_cfg, w, img)?;
                let taps = cache.taps(&self.trunk_cfg);
                (Some(cache), None, taps)
            }
            (TrunkWeights::ThreeD(w), ClipTensor::ThreeD(clip)) => {
                let cache = backbone::forward_3d_cached(&self.trunk_cfg, w, clip)?;
                let taps = cache
                    .taps(&self.trunk_cfg)
                    .iter()
                    .map(backbone::temporal_pool_array)
                    .collect();
                (None, Some(cache), taps)
            }
            (TrunkWeights::TwoD(_), _) => {
                return Err(Error::ShapeMismatch(format!(
                    "{} stream expects a (C, H, W) input",
                    self.kind
                )))
            }
            (TrunkWeights::ThreeD(_), _) => {
                return Err(Error::ShapeMismatch(format!(
                    "{} stream expects a (C, N, H, W) clip",
                    self.kind
                )))
            }
        };

        // Extra layers chain from the final (pooled) backbone tap.
        let mut extra_acts: Vec<Array3<f64>> = Vec::with_capacity(self.extra.len());
        let mut cur = pooled.last().expect("at least one tap").clone();
        for (l, wt) in self.config.extra_layers.iter().zip(self.extra.iter()) {
            let mut y = ops::conv2d_forward(
                &cur,
                &wt.w,
                &wt.b,
                (l.stride.1, l.stride.2),
                (l.padding.1, l.padding.2),
            )?;
            if l.relu {
                ops::relu_inplace(&mut y);
            }
            extra_acts.push(y.clone());
            cur = y;
        }
        let mut level_feats: Vec<Array3<f64>> = Vec::new();
        level_feats.append(&mut pooled);
        for &t in &self.config.extra_taps {
            level_feats.push(extra_acts[t].clone());
        }

        // Heads.
        let pad = self.config.head_kernel / 2;
        let mut loc_maps = Vec::with_capacity(level_feats.len());
        let mut conf_maps = Vec::with_capacity(level_feats.len());
        for (feat, (wl, wc)) in level_feats
            .iter()
            .zip(self.loc_heads.iter().zip(self.conf_heads.iter()))
        {
            loc_maps.push(ops::conv2d_forward(feat, &wl.w, &wl.b, (1, 1), (pad, pad))?);
            conf_maps.push(ops::conv2d_forward(feat, &wc.w, &wc.b, (1, 1), (pad, pad))?);
        }

        // Flatten in (level, cell_y, cell_x, box) order.
        let num_anchors = self.grid.len();
        let kk = self.config.num_classes + 1;
        let mut offsets = Vec::with_capacity(num_anchors);
        let mut logits = Array2::<f64>::zeros((num_anchors, kk));
        let mut a = 0usize;
        for (lvl, (loc, conf)) in self
            .grid
            .levels
            .iter()
            .zip(loc_maps.iter().zip(conf_maps.iter()))
        {
            let b_per = lvl.boxes_per_cell;
            for cy in 0..lvl.feature_h {
                for cx in 0..lvl.feature_w {
                    for b in 0..b_per {
                        offsets.push(OffsetVector {
                            d_cx: loc[[b * 4, cy, cx]],
                            d_cy: loc[[b * 4 + 1, cy, cx]],
                            d_w: loc[[b * 4 + 2, cy, cx]],
                            d_h: loc[[b * 4 + 3, cy, cx]],
                        });
                        for k in 0..kk {
                            logits[[a, k]] = conf[[b * kk + k, cy, cx]];
                        }
                        a += 1;
                    }
                }
            }
        }
        debug_assert_eq!(a, num_anchors);

        Ok(ForwardCache {
            trunk2d,
            trunk3d,
            level_feats,
            extra_acts,
            offsets,
            logits,
        })
    }

    /// Backpropagates gradients w.r.t. the flattened per-anchor outputs
    /// into gradients for every weight tensor of the stream.
    pub(crate) fn backward(
        &self,
        x: &ClipTensor,
        cache: &ForwardCache,
        d_offsets: &[OffsetVector],
        d_logits: &Array2<f64>,
    ) -> Result<ModelGrads> {
        let kk = self.config.num_classes + 1;
        let pad = self.config.head_kernel / 2;

        // Scatter per-anchor grads back into head maps, then head convs.
        let mut level_grads: Vec<Array3<f64>> = cache
            .level_feats
            .iter()
            .map(|f| Array3::zeros(f.raw_dim()))
            .collect();
        let mut loc_grads = Vec::with_capacity(self.loc_heads.len());
        let mut conf_grads = Vec::with_capacity(self.conf_heads.len());
        let mut a = 0usize;
        for (li, lvl) in self.grid.levels.iter().enumerate() {
            let b_per = lvl.boxes_per_cell;
            let mut d_loc = Array3::<f64>::zeros((b_per * 4, lvl.feature_h, lvl.feature_w));
            let mut d_conf = Array3::<f64>::zeros((b_per * kk, lvl.feature_h, lvl.feature_w));
            for cy in 0..lvl.feature_h {
                for cx in 0..lvl.feature_w {
                    for b in 0..b_per {
                        let o = d_offsets[a].as_array();
                        for (c, &v) in o.iter().enumerate() {
                            d_loc[[b * 4 + c, cy, cx]] = v;
                        }
                        for k in 0..kk {
                            d_conf[[b * kk + k, cy, cx]] = d_logits[[a, k]];
                        }
                        a += 1;
                    }
                }
            }
            let feat = &cache.level_feats[li];
            let (gf_loc, gw_loc, gb_loc) =
                ops::conv2d_backward(feat, &self.loc_heads[li].w, &d_loc, (1, 1), (pad, pad));
            let (gf_conf, gw_conf, gb_conf) =
                ops::conv2d_backward(feat, &self.conf_heads[li].w, &d_conf, (1, 1), (pad, pad));
            loc_grads.push(Weight2d {
                w: gw_loc,
                b: gb_loc,
            });
            conf_grads.push(Weight2d {
                w: gw_conf,
                b: gb_conf,
            });
            level_grads[li] = gf_loc + gf_conf;
        }

        // Split level grads between backbone taps and extra taps.
        let nb = self.trunk_cfg.taps.len();
        let mut pooled_grads: Vec<Array3<f64>> = level_grads.drain(..nb).collect();
        let mut extra_out_grads: Vec<Option<Array3<f64>>> = vec![None; self.extra.len()];
        for (gi, &t) in self.config.extra_taps.iter().enumerate() {
            extra_out_grads[t] = Some(level_grads[gi].clone());
        }

        // Extra chain backward.
        let mut extra_grads: Vec<Weight2d> = Vec::with_capacity(self.extra.len());
        let mut chain: Option<Array3<f64>> = None;
        for i in (0..self.extra.len()).rev() {
            let mut g = match (extra_out_grads[i].take(), chain.take()) {
                (Some(a), Some(b)) => a + b,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => Array3::zeros(cache.extra_acts[i].raw_dim()),
            };
            let l = &self.config.extra_layers[i];
            if l.relu {
                ops::relu_backward_inplace(&mut g, &cache.extra_acts[i]);
            }
            let input = if i == 0 {
                &cache.level_feats[nb - 1]
            } else {
                &cache.extra_acts[i - 1]
            };
            let (gx, gw, gb) = ops::conv2d_backward(
                input,
                &self.extra[i].w,
                &g,
                (l.stride.1, l.stride.2),
                (l.padding.1, l.padding.2),
            );
            extra_grads.push(Weight2d { w: gw, b: gb });
            chain = Some(gx);
        }
        extra_grads.reverse();
        if let Some(gx) = chain {
            pooled_grads[nb - 1] += &gx;
        }

        // Trunk backward.
        let trunk = match (&self.trunk, x) {
            (TrunkWeights::TwoD(w), ClipTensor::TwoD(img)) => {
                let mut tap_grads: Vec<Option<Array3<f64>>> =
                    vec![None; self.trunk_cfg.layers.len()];
                for (i, &t) in self.trunk_cfg.taps.iter().enumerate() {
                    tap_grads[t] = Some(pooled_grads[i].clone());
                }
                let cache2d = cache.trunk2d.as_ref().expect("2D cache");
                let (grads, _) =
                    backbone::backward_2d(&self.trunk_cfg, w, img, cache2d, &tap_grads)?;
                TrunkWeights::TwoD(grads)
            }
            (TrunkWeights::ThreeD(w), ClipTensor::ThreeD(clip)) => {
                let cache3d = cache.trunk3d.as_ref().expect("3D cache");
                let mut tap_grads: Vec<Option<Array4<f64>>> =
                    vec![None; self.trunk_cfg.layers.len()];
                for (i, &t) in self.trunk_cfg.taps.iter().enumerate() {
                    let n_t = cache3d.acts[t].shape()[1];
                    tap_grads[t] = Some(ops::temporal_mean_backward(&pooled_grads[i], n_t));
                }
                let (grads, _) =
                    backbone::backward_3d(&self.trunk_cfg, w, clip, cache3d, &tap_grads)?;
                TrunkWeights::ThreeD(grads)
            }
            _ => unreachable!("forward_cached validated the layout"),
        };

        Ok(ModelGrads {
            trunk,
            extra: extra_grads,
            loc_heads: loc_grads,
            conf_heads: conf_grads,
        })
    }
}

/// Intermediate activations of one stream forward pass.
pub(crate) struct ForwardCache {
    trunk2d: Option<backbone::Cache2d>,
    trunk3d: Option<backbone::Cache3d>,
    /// Prediction-level inputs: pooled backbone taps, then extra taps.
    level_feats: Vec<Array3<f64>>,
    extra_acts: Vec<Array3<f64>>,
    pub offsets: Vec<OffsetVector>,
    pub logits: Array2<f64>,
}

/// Gradients mirroring the weight layout of a [`StreamModel`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub trunk: TrunkWeights,
    pub extra: Vec<Weight2d>,
    pub loc_heads: Vec<Weight2d>,
    pub conf_heads: Vec<Weight2d>,
}

impl ModelGrads {
    pub fn zeros_like(model: &StreamModel) -> Self {
        let trunk = match &model.trunk {
            TrunkWeights::TwoD(w) => TrunkWeights::TwoD(backbone::zero_like_2d(w)),
            TrunkWeights::ThreeD(w) => TrunkWeights::ThreeD(backbone::zero_like_3d(w)),
        };
        let zero2 = |v: &Vec<Weight2d>| -> Vec<Weight2d> {
            v.iter()
                .map(|w| Weight2d {
                    w: ndarray::Array4::zeros(w.w.raw_dim()),
                    b: ndarray::Array1::zeros(w.b.len()),
                })
                .collect()
        };
        ModelGrads {
            trunk,
            extra: zero2(&model.extra),
            loc_heads: zero2(&model.loc_heads),
            conf_heads: zero2(&model.conf_heads),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        match (&mut self.trunk, &other.trunk) {
            (TrunkWeights::TwoD(a), TrunkWeights::TwoD(b)) => {
                for (x, y) in a.iter_mut().zip(b.iter()) {
                    if let (Some(x), Some(y)) = (x.as_mut(), y.as_ref()) {
                        x.w += &y.w;
                        x.b += &y.b;
                    }
                }
            }
            (TrunkWeights::ThreeD(a), TrunkWeights::ThreeD(b)) => {
                for (x, y) in a.iter_mut().zip(b.iter()) {
                    if let (Some(x), Some(y)) = (x.as_mut(), y.as_ref()) {
                        x.w += &y.w;
                        x.b += &y.b;
                    }
                }
            }
            _ => panic!("gradient arity mismatch"),
        }
        for (x, y) in self.extra.iter_mut().zip(other.extra.iter()) {
            x.w += &y.w;
            x.b += &y.b;
        }
        for (x, y) in self.loc_heads.iter_mut().zip(other.loc_heads.iter()) {
            x.w += &y.w;
            x.b += &y.b;
        }
        for (x, y) in self.conf_heads.iter_mut().zip(other.conf_heads.iter()) {
            x.w += &y.w;
            x.b += &y.b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        match &mut self.trunk {
            TrunkWeights::TwoD(a) => {
                for x in a.iter_mut().flatten() {
                    x.w *= factor;
                    x.b *= factor;
                }
            }
            TrunkWeights::ThreeD(a) => {
                for x in a.iter_mut().flatten() {
                    x.w *= factor;
                    x.b *= factor;
                }
            }
        }
        for x in self
            .extra
            .iter_mut()
            .chain(self.loc_heads.iter_mut())
            .chain(self.conf_heads.iter_mut())
        {
            x.w *= factor;
            x.b *= factor;
        }
    }
}
