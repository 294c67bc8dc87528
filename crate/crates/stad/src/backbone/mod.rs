//! The convolutional trunk in 2D and 3D forms.
//!
//! A [`BackboneConfig`] describes an ordered conv/pool stack with feature
//! tap points. [`inflate_config`] turns the 2D stack into its 3D
//! counterpart: 3x3 kernels grow a temporal extent of 3 (with replicated
//! temporal padding 1), 1x1 kernels keep temporal extent 1, and pooling
//! layers gain temporal kernel 2 / stride 2, clamped to identity when the
//! incoming temporal size is already 1. [`temporal_pool`] bridges 3D
//! feature maps back to 2D by mean-pooling along time.

pub(crate) mod ops;
mod weights;

use ndarray::{Array1, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::types::ClipTensor;
use crate::{Error, Result};

pub use weights::{
    inflate_weights, init_weight_2d, read_f32_file, write_f32_file, InflateMode, Weight2d,
    Weight3d,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Pool,
}

/// One layer of the trunk. Kernel, stride, and padding are `(t, h, w)`
/// triples; the temporal components stay 1/1/0 until the config is
/// inflated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Output channels for conv layers; pools preserve channels.
    pub out_channels: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
    pub relu: bool,
}

impl LayerSpec {
    pub fn conv2d(out_channels: usize, k: usize, stride: usize, pad: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            out_channels,
            kernel: (1, k, k),
            stride: (1, stride, stride),
            padding: (0, pad, pad),
            relu: true,
        }
    }

    pub fn pool2d(k: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Pool,
            out_channels: 0,
            kernel: (1, k, k),
            stride: (1, stride, stride),
            padding: (0, 0, 0),
            relu: false,
        }
    }

    /// Temporal kernel/stride actually applied for an input of temporal
    /// size `in_t`: inflated pools clamp to identity when time is already
    /// collapsed below the kernel.
    fn effective_temporal(&self, in_t: usize) -> (usize, usize) {
        if self.kind == LayerKind::Pool && in_t < self.kernel.0 {
            (1, 1)
        } else {
            (self.kernel.0, self.stride.0)
        }
    }
}

/// Ordered layer stack with input geometry and feature tap points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: Vec<LayerSpec>,
    pub in_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    /// Clip length consumed by the 3D form.
    pub clip_len: usize,
    /// Indices of layers whose outputs feed the detection stack.
    pub taps: Vec<usize>,
    pub inflated: bool,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("backbone has no layers".into()));
        }
        if self.taps.is_empty() {
            return Err(Error::Config("backbone has no tap points".into()));
        }
        let mut prev: Option<usize> = None;
        for &t in &self.taps {
            if t >= self.layers.len() {
                return Err(Error::Config(format!(
                    "tap {t} out of range for {} layers",
                    self.layers.len()
                )));
            }
            if let Some(p) = prev {
                if t <= p {
                    return Err(Error::Config("taps must be strictly increasing".into()));
                }
            }
            prev = Some(t);
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kind == LayerKind::Conv && l.out_channels == 0 {
                return Err(Error::Config(format!("conv layer {i} has 0 channels")));
            }
            if l.kind == LayerKind::Pool && l.padding != (0, 0, 0) {
                return Err(Error::Config(format!("pool layer {i} must be unpadded")));
            }
        }
        if self.clip_len == 0 {
            return Err(Error::Config("clip_len must be >= 1".into()));
        }
        Ok(())
    }

    /// Channel count produced by each layer.
    pub fn layer_channels(&self) -> Vec<usize> {
        let mut c = self.in_channels;
        self.layers
            .iter()
            .map(|l| {
                if l.kind == LayerKind::Conv {
                    c = l.out_channels;
                }
                c
            })
            .collect()
    }
}

/// Inflates a 2D trunk config to 3D: 3x3 convs become 3x3x3 with temporal
/// padding 1, other convs keep temporal extent 1, pools take temporal
/// kernel 2 / stride 2. Tap points are preserved.
pub fn inflate_config(cfg2d: &BackboneConfig) -> BackboneConfig {
    let layers = cfg2d
        .layers
        .iter()
        .map(|l| {
            let mut out = l.clone();
            match l.kind {
                LayerKind::Conv => {
                    if l.kernel.1 == 3 && l.kernel.2 == 3 {
                        out.kernel.0 = 3;
                        out.padding.0 = 1;
                    } else {
                        out.kernel.0 = 1;
                        out.padding.0 = 0;
                    }
                    out.stride.0 = 1;
                }
                LayerKind::Pool => {
                    out.kernel.0 = 2;
                    out.stride.0 = 2;
                    out.padding.0 = 0;
                }
            }
            out
        })
        .collect();
    BackboneConfig {
        layers,
        inflated: true,
        ..cfg2d.clone()
    }
}

/// Output shape `(c, h, w)` of every layer in the 2D form.
pub fn layer_shapes_2d(cfg: &BackboneConfig) -> Result<Vec<(usize, usize, usize)>> {
    let mut shapes = Vec::with_capacity(cfg.layers.len());
    let (mut c, mut h, mut w) = (cfg.in_channels, cfg.input_h, cfg.input_w);
    for l in &cfg.layers {
        h = ops::out_extent(h, l.kernel.1, l.stride.1, l.padding.1)?;
        w = ops::out_extent(w, l.kernel.2, l.stride.2, l.padding.2)?;
        if l.kind == LayerKind::Conv {
            c = l.out_channels;
        }
        shapes.push((c, h, w));
    }
    Ok(shapes)
}

/// Output shape `(c, t, h, w)` of every layer in the 3D form, applying
/// the temporal clamp rule for pools.
pub fn layer_shapes_3d(cfg: &BackboneConfig) -> Result<Vec<(usize, usize, usize, usize)>> {
    let mut shapes = Vec::with_capacity(cfg.layers.len());
    let (mut c, mut t, mut h, mut w) = (cfg.in_channels, cfg.clip_len, cfg.input_h, cfg.input_w);
    for l in &cfg.layers {
        let (kt, st) = l.effective_temporal(t);
        t = ops::out_extent(t, kt, st, l.padding.0)?;
        h = ops::out_extent(h, l.kernel.1, l.stride.1, l.padding.1)?;
        w = ops::out_extent(w, l.kernel.2, l.stride.2, l.padding.2)?;
        if l.kind == LayerKind::Conv {
            c = l.out_channels;
        }
        shapes.push((c, t, h, w));
    }
    Ok(shapes)
}

/// Activations of a 2D forward pass, kept for backpropagation.
pub struct Cache2d {
    /// Post-activation output of each layer.
    pub acts: Vec<Array3<f64>>,
    /// Argmax indices for pool layers.
    argmax: Vec<Option<Vec<usize>>>,
}

impl Cache2d {
    pub fn taps(&self, cfg: &BackboneConfig) -> Vec<Array3<f64>> {
        cfg.taps.iter().map(|&t| self.acts[t].clone()).collect()
    }
}

/// Runs the 2D trunk and returns the feature map at every tap point.
pub fn forward_2d(
    cfg: &BackboneConfig,
    weights: &[Option<Weight2d>],
    x: &Array3<f64>,
) -> Result<Vec<Array3<f64>>> {
    Ok(forward_2d_cached(cfg, weights, x)?.taps(cfg))
}

/// As [`forward_2d`] but retains every intermediate activation.
pub fn forward_2d_cached(
    cfg: &BackboneConfig,
    weights: &[Option<Weight2d>],
    x: &Array3<f64>,
) -> Result<Cache2d> {
    check_weights_2d(cfg, weights)?;
    if x.shape() != [cfg.in_channels, cfg.input_h, cfg.input_w] {
        return Err(Error::ShapeMismatch(format!(
            "2D input {:?} does not match config ({}, {}, {})",
            x.shape(),
            cfg.in_channels,
            cfg.input_h,
            cfg.input_w
        )));
    }
    let mut acts = Vec::with_capacity(cfg.layers.len());
    let mut argmax = Vec::with_capacity(cfg.layers.len());
    let mut cur = x.clone();
    for (l, wt) in cfg.layers.iter().zip(weights.iter()) {
        match l.kind {
            LayerKind::Conv => {
                let wt = wt.as_ref().expect("checked");
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
                argmax.push(None);
                cur = y;
            }
            LayerKind::Pool => {
                let (y, am) = ops::maxpool2d_forward(
                    &cur,
                    (l.kernel.1, l.kernel.2),
                    (l.stride.1, l.stride.2),
                )?;
                argmax.push(Some(am));
                cur = y;
            }
        }
        acts.push(cur.clone());
    }
    Ok(Cache2d { acts, argmax })
}

/// Backpropagates tap gradients through the 2D trunk.
///
/// `tap_grads` holds, per layer index, the externally injected gradient
/// at that layer's output (entries stay `None` for layers without one).
/// Returns per-layer weight gradients and the input gradient.
pub fn backward_2d(
    cfg: &BackboneConfig,
    weights: &[Option<Weight2d>],
    x: &Array3<f64>,
    cache: &Cache2d,
    tap_grads: &[Option<Array3<f64>>],
) -> Result<(Vec<Option<Weight2d>>, Array3<f64>)> {
    let n = cfg.layers.len();
    assert_eq!(tap_grads.len(), n, "tap_grads must align with layers");
    let mut grads: Vec<Option<Weight2d>> = vec![None; n];
    let mut g = Array3::<f64>::zeros(cache.acts[n - 1].raw_dim());
    for i in (0..n).rev() {
        if let Some(tg) = &tap_grads[i] {
            g += tg;
        }
        let input = if i == 0 { x } else { &cache.acts[i - 1] };
        let l = &cfg.layers[i];
        match l.kind {
            LayerKind::Conv => {
                let wt = weights[i].as_ref().expect("checked");
                if l.relu {
                    ops::relu_backward_inplace(&mut g, &cache.acts[i]);
                }
                let (gx, gw, gb) = ops::conv2d_backward(
                    input,
                    &wt.w,
                    &g,
                    (l.stride.1, l.stride.2),
                    (l.padding.1, l.padding.2),
                );
                grads[i] = Some(Weight2d { w: gw, b: gb });
                g = gx;
            }
            LayerKind::Pool => {
                let am = cache.argmax[i].as_ref().expect("pool argmax");
                let shape = input.raw_dim();
                g = ops::maxpool2d_backward(am, &g, (shape[0], shape[1], shape[2]));
            }
        }
    }
    Ok((grads, g))
}

/// Activations of a 3D forward pass.
pub struct Cache3d {
    pub acts: Vec<Array4<f64>>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl Cache3d {
    pub fn taps(&self, cfg: &BackboneConfig) -> Vec<Array4<f64>> {
        cfg.taps.iter().map(|&t| self.acts[t].clone()).collect()
    }
}

/// Runs the 3D trunk and returns the feature map at every tap point.
pub fn forward_3d(
    cfg: &BackboneConfig,
    weights: &[Option<Weight3d>],
    x: &Array4<f64>,
) -> Result<Vec<Array4<f64>>> {
    Ok(forward_3d_cached(cfg, weights, x)?.taps(cfg))
}

pub fn forward_3d_cached(
    cfg: &BackboneConfig,
    weights: &[Option<Weight3d>],
    x: &Array4<f64>,
) -> Result<Cache3d> {
    check_weights_3d(cfg, weights)?;
    if x.shape() != [cfg.in_channels, cfg.clip_len, cfg.input_h, cfg.input_w] {
        return Err(Error::ShapeMismatch(format!(
            "3D input {:?} does not match config ({}, {}, {}, {})",
            x.shape(),
            cfg.in_channels,
            cfg.clip_len,
            cfg.input_h,
            cfg.input_w
        )));
    }
    let mut acts = Vec::with_capacity(cfg.layers.len());
    let mut argmax = Vec::with_capacity(cfg.layers.len());
    let mut cur = x.clone();
    for (l, wt) in cfg.layers.iter().zip(weights.iter()) {
        let in_t = cur.shape()[1];
        let (kt, st) = l.effective_temporal(in_t);
        match l.kind {
            LayerKind::Conv => {
                let wt = wt.as_ref().expect("checked");
                let mut y = ops::conv3d_forward(
                    &cur,
                    &wt.w,
                    &wt.b,
                    (st, l.stride.1, l.stride.2),
                    (l.padding.0, l.padding.1, l.padding.2),
                )?;
                if l.relu {
                    ops::relu_inplace(&mut y);
                }
                argmax.push(None);
                cur = y;
            }
            LayerKind::Pool => {
                let (y, am) = ops::maxpool3d_forward(
                    &cur,
                    (kt, l.kernel.1, l.kernel.2),
                    (st, l.stride.1, l.stride.2),
                )?;
                argmax.push(Some(am));
                cur = y;
            }
        }
        acts.push(cur.clone());
    }
    Ok(Cache3d { acts, argmax })
}

/// Backpropagates tap gradients through the 3D trunk.
pub fn backward_3d(
    cfg: &BackboneConfig,
    weights: &[Option<Weight3d>],
    x: &Array4<f64>,
    cache: &Cache3d,
    tap_grads: &[Option<Array4<f64>>],
) -> Result<(Vec<Option<Weight3d>>, Array4<f64>)> {
    let n = cfg.layers.len();
    assert_eq!(tap_grads.len(), n, "tap_grads must align with layers");
    let mut grads: Vec<Option<Weight3d>> = vec![None; n];
    let mut g = Array4::<f64>::zeros(cache.acts[n - 1].raw_dim());
    for i in (0..n).rev() {
        if let Some(tg) = &tap_grads[i] {
            g += tg;
        }
        let input = if i == 0 { x } else { &cache.acts[i - 1] };
        let in_t = input.shape()[1];
        let l = &cfg.layers[i];
        let (kt, st) = l.effective_temporal(in_t);
        match l.kind {
            LayerKind::Conv => {
                let wt = weights[i].as_ref().expect("checked");
                if l.relu {
                    ops::relu_backward_inplace(&mut g, &cache.acts[i]);
                }
                let (gx, gw, gb) = ops::conv3d_backward(
                    input,
                    &wt.w,
                    &g,
                    (st, l.stride.1, l.stride.2),
                    (l.padding.0, l.padding.1, l.padding.2),
                );
                grads[i] = Some(Weight3d { w: gw, b: gb });
                g = gx;
            }
            LayerKind::Pool => {
                let am = cache.argmax[i].as_ref().expect("pool argmax");
                let _ = kt;
                let shape = input.raw_dim();
                g = ops::maxpool3d_backward(am, &g, (shape[0], shape[1], shape[2], shape[3]));
            }
        }
    }
    Ok((grads, g))
}

fn check_weights_2d(cfg: &BackboneConfig, weights: &[Option<Weight2d>]) -> Result<()> {
    cfg.validate()?;
    if weights.len() != cfg.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weight entries for {} layers",
            weights.len(),
            cfg.layers.len()
        )));
    }
    let mut in_c = cfg.in_channels;
    for (i, (l, wt)) in cfg.layers.iter().zip(weights.iter()).enumerate() {
        match (l.kind, wt) {
            (LayerKind::Conv, Some(wt)) => {
                let expect = [l.out_channels, in_c, l.kernel.1, l.kernel.2];
                if wt.w.shape() != expect || wt.b.len() != l.out_channels {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i}: weight shape {:?} != expected {:?}",
                        wt.w.shape(),
                        expect
                    )));
                }
                in_c = l.out_channels;
            }
            (LayerKind::Conv, None) => {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: missing conv weights"
                )))
            }
            (LayerKind::Pool, Some(_)) => {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: pool layers carry no weights"
                )))
            }
            (LayerKind::Pool, None) => {}
        }
    }
    Ok(())
}

fn check_weights_3d(cfg: &BackboneConfig, weights: &[Option<Weight3d>]) -> Result<()> {
    cfg.validate()?;
    if weights.len() != cfg.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weight entries for {} layers",
            weights.len(),
            cfg.layers.len()
        )));
    }
    let mut in_c = cfg.in_channels;
    for (i, (l, wt)) in cfg.layers.iter().zip(weights.iter()).enumerate() {
        match (l.kind, wt) {
            (LayerKind::Conv, Some(wt)) => {
                let expect = [l.out_channels, in_c, l.kernel.0, l.kernel.1, l.kernel.2];
                if wt.w.shape() != expect || wt.b.len() != l.out_channels {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i}: weight shape {:?} != expected {:?}",
                        wt.w.shape(),
                        expect
                    )));
                }
                in_c = l.out_channels;
            }
            (LayerKind::Conv, None) => {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: missing conv weights"
                )))
            }
            (LayerKind::Pool, Some(_)) => {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: pool layers carry no weights"
                )))
            }
            (LayerKind::Pool, None) => {}
        }
    }
    Ok(())
}

/// Random 2D trunk weights matching a config.
pub fn random_weights_2d(
    cfg: &BackboneConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Option<Weight2d>> {
    let mut in_c = cfg.in_channels;
    cfg.layers
        .iter()
        .map(|l| match l.kind {
            LayerKind::Conv => {
                let w = init_weight_2d(rng, l.out_channels, in_c, l.kernel.1, l.kernel.2);
                in_c = l.out_channels;
                Some(w)
            }
            LayerKind::Pool => None,
        })
        .collect()
}

/// Inflates a full 2D weight stack to match an inflated config.
pub fn inflate_weight_stack(
    cfg3d: &BackboneConfig,
    weights2d: &[Option<Weight2d>],
    mode: InflateMode,
) -> Vec<Option<Weight3d>> {
    cfg3d
        .layers
        .iter()
        .zip(weights2d.iter())
        .map(|(l, wt)| wt.as_ref().map(|w| inflate_weights(w, l.kernel.0, mode)))
        .collect()
}

/// Mean-pools a `(C, N, H, W)` clip along time into a `(C, H, W)` map.
pub fn temporal_pool(x: &ClipTensor) -> Result<ClipTensor> {
    match x {
        ClipTensor::ThreeD(a) => Ok(ClipTensor::TwoD(ops::temporal_mean_forward(a))),
        ClipTensor::TwoD(_) => Err(Error::ShapeMismatch(
            "temporal_pool expects a (C, N, H, W) clip".into(),
        )),
    }
}

/// Array-level temporal mean pooling.
pub fn temporal_pool_array(x: &Array4<f64>) -> Array3<f64> {
    ops::temporal_mean_forward(x)
}

pub(crate) fn zero_like_2d(weights: &[Option<Weight2d>]) -> Vec<Option<Weight2d>> {
    weights
        .iter()
        .map(|w| {
            w.as_ref().map(|w| Weight2d {
                w: ndarray::Array4::zeros(w.w.raw_dim()),
                b: Array1::zeros(w.b.len()),
            })
        })
        .collect()
}

pub(crate) fn zero_like_3d(weights: &[Option<Weight3d>]) -> Vec<Option<Weight3d>> {
    weights
        .iter()
        .map(|w| {
            w.as_ref().map(|w| Weight3d {
                w: ndarray::Array5::zeros(w.w.raw_dim()),
                b: Array1::zeros(w.b.len()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            layers: vec![
                LayerSpec::conv2d(4, 3, 1, 1),
                LayerSpec::pool2d(2, 2),
                LayerSpec::conv2d(6, 3, 1, 1),
                LayerSpec::pool2d(2, 2),
                LayerSpec::conv2d(8, 3, 1, 1),
            ],
            in_channels: 3,
            input_h: 16,
            input_w: 16,
            clip_len: 8,
            taps: vec![2, 4],
            inflated: false,
        }
    }

    #[test]
    fn shape_law_2d() {
        let cfg = tiny_cfg();
        let shapes = layer_shapes_2d(&cfg).unwrap();
        assert_eq!(shapes[0], (4, 16, 16));
        assert_eq!(shapes[1], (4, 8, 8));
        assert_eq!(shapes[2], (6, 8, 8));
        assert_eq!(shapes[3], (6, 4, 4));
        assert_eq!(shapes[4], (8, 4, 4));
    }

    #[test]
    fn inflate_sets_temporal_fields() {
        let cfg = inflate_config(&tiny_cfg());
        assert!(cfg.inflated);
        assert_eq!(cfg.layers[0].kernel, (3, 3, 3));
        assert_eq!(cfg.layers[0].padding.0, 1);
        assert_eq!(cfg.layers[1].kernel.0, 2);
        assert_eq!(cfg.layers[1].stride.0, 2);
        assert_eq!(cfg.taps, tiny_cfg().taps);
    }

    #[test]
    fn inflate_keeps_1x1_temporal_extent_1() {
        let mut base = tiny_cfg();
        base.layers.push(LayerSpec::conv2d(8, 1, 1, 0));
        let cfg = inflate_config(&base);
        let last = cfg.layers.last().unwrap();
        assert_eq!(last.kernel.0, 1);
        assert_eq!(last.padding.0, 0);
    }

    #[test]
    fn temporal_size_sequence_through_five_pools() {
        // N=8 through five stride-2 temporal pools: 8 -> 4 -> 2 -> 1 -> 1 -> 1.
        let cfg2d = BackboneConfig {
            layers: vec![
                LayerSpec::pool2d(2, 2),
                LayerSpec::pool2d(2, 2),
                LayerSpec::pool2d(2, 2),
                LayerSpec::pool2d(2, 2),
                LayerSpec::pool2d(2, 2),
            ],
            in_channels: 1,
            input_h: 64,
            input_w: 64,
            clip_len: 8,
            taps: vec![4],
            inflated: false,
        };
        let cfg = inflate_config(&cfg2d);
        let shapes = layer_shapes_3d(&cfg).unwrap();
        let ts: Vec<usize> = shapes.iter().map(|s| s.1).collect();
        assert_eq!(ts, vec![4, 2, 1, 1, 1]);

        // A real forward agrees with the shape law.
        let weights: Vec<Option<Weight3d>> = vec![None; 5];
        let x = Array4::<f64>::from_shape_fn((1, 8, 64, 64), |(_, t, h, w)| {
            (t * 64 * 64 + h * 64 + w) as f64 * 1e-4
        });
        let cache = forward_3d_cached(&cfg, &weights, &x).unwrap();
        for (act, expect) in cache.acts.iter().zip(shapes.iter()) {
            assert_eq!(act.shape(), &[expect.0, expect.1, expect.2, expect.3]);
        }
    }

    #[test]
    fn temporal_extent_1_matches_per_frame_2d() {
        // A 3D stack whose kernels all have temporal extent 1 reduces to
        // running the 2D stack on each frame.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg2d = BackboneConfig {
            layers: vec![LayerSpec::conv2d(3, 1, 1, 0), LayerSpec::conv2d(2, 1, 1, 0)],
            in_channels: 2,
            input_h: 5,
            input_w: 5,
            clip_len: 3,
            taps: vec![1],
            inflated: false,
        };
        let w2d = random_weights_2d(&cfg2d, &mut rng);
        let cfg3d = inflate_config(&cfg2d);
        let w3d = inflate_weight_stack(&cfg3d, &w2d, InflateMode::Repeat);
        let x = Array4::from_shape_fn((2, 3, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let taps3d = forward_3d(&cfg3d, &w3d, &x).unwrap();
        for t in 0..3 {
            let frame = x.index_axis(Axis(1), t).to_owned();
            let taps2d = forward_2d(&cfg2d, &w2d, &frame).unwrap();
            let got = taps3d[0].index_axis(Axis(1), t);
            for (a, b) in got.iter().zip(taps2d[0].iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inflation_equivalence_on_constant_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg2d = tiny_cfg();
        let w2d = random_weights_2d(&cfg2d, &mut rng);
        let frame = Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(0.0..1.0));
        let taps2d = forward_2d(&cfg2d, &w2d, &frame).unwrap();

        let cfg3d = inflate_config(&cfg2d);
        let w3d = inflate_weight_stack(&cfg3d, &w2d, InflateMode::RepeatScaled);
        let mut clip = Array4::<f64>::zeros((3, 8, 16, 16));
        for t in 0..8 {
            clip.index_axis_mut(Axis(1), t).assign(&frame);
        }
        let taps3d = forward_3d(&cfg3d, &w3d, &clip).unwrap();
        for (t3, t2) in taps3d.iter().zip(taps2d.iter()) {
            let pooled = temporal_pool_array(t3);
            for (a, b) in pooled.iter().zip(t2.iter()) {
                let denom = b.abs().max(1e-8);
                assert!(
                    ((a - b).abs() / denom) < 1e-5,
                    "equivalence violated: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn trunk_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfg = BackboneConfig {
            layers: vec![
                LayerSpec::conv2d(3, 3, 1, 1),
                LayerSpec::pool2d(2, 2),
                LayerSpec::conv2d(2, 3, 1, 1),
            ],
            in_channels: 2,
            input_h: 8,
            input_w: 8,
            clip_len: 1,
            taps: vec![0, 2],
            inflated: false,
        };
        let mut weights = random_weights_2d(&cfg, &mut rng);
        let x = Array3::from_shape_fn((2, 8, 8), |_| rng.gen_range(-1.0..1.0));
        // Random linear loss over both taps.
        let shapes = layer_shapes_2d(&cfg).unwrap();
        let c0 = Array3::from_shape_fn((shapes[0].0, shapes[0].1, shapes[0].2), |_| {
            rng.gen_range(-1.0..1.0)
        });
        let c2 = Array3::from_shape_fn((shapes[2].0, shapes[2].1, shapes[2].2), |_| {
            rng.gen_range(-1.0..1.0)
        });
        let loss = |weights: &[Option<Weight2d>]| -> f64 {
            let taps = forward_2d(&cfg, weights, &x).unwrap();
            (&taps[0] * &c0).sum() + (&taps[1] * &c2).sum()
        };
        let cache = forward_2d_cached(&cfg, &weights, &x).unwrap();
        let tap_grads = vec![Some(c0.clone()), None, Some(c2.clone())];
        let (grads, _gx) = backward_2d(&cfg, &weights, &x, &cache, &tap_grads).unwrap();

        let eps = 1e-4;
        for li in [0usize, 2usize] {
            let idx = [0, 0, 1, 1];
            let orig = weights[li].as_ref().unwrap().w[idx];
            weights[li].as_mut().unwrap().w[idx] = orig + eps;
            let lp = loss(&weights);
            weights[li].as_mut().unwrap().w[idx] = orig - eps;
            let lm = loss(&weights);
            weights[li].as_mut().unwrap().w[idx] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let ana = grads[li].as_ref().unwrap().w[idx];
            let denom = num.abs().max(ana.abs()).max(1e-8);
            assert!(
                ((num - ana).abs() / denom) < 1e-3,
                "layer {li}: fd {num} vs analytic {ana}"
            );
        }
    }
}
