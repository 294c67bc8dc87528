//! Weight tensors, 2D-to-3D inflation, initialization, and the raw
//! little-endian f32 array files used by checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array4, Array5, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Conv weights of shape `(out, in, kh, kw)` plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Weight2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
}

/// Conv weights of shape `(out, in, kt, kh, kw)` plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Weight3d {
    pub w: Array5<f64>,
    pub b: Array1<f64>,
}

/// How 2D kernels are replicated along time when inflating.
///
/// `Repeat` copies the 2D kernel into every temporal slice.
/// `RepeatScaled` divides each slice by the temporal extent so a clip
/// that is constant along time produces the same activations as the 2D
/// network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InflateMode {
    Repeat,
    #[default]
    RepeatScaled,
}

/// Replicates a 2D kernel `t` times along a new temporal axis.
pub fn inflate_weights(src: &Weight2d, t: usize, mode: InflateMode) -> Weight3d {
    let (o, i, kh, kw) = (
        src.w.shape()[0],
        src.w.shape()[1],
        src.w.shape()[2],
        src.w.shape()[3],
    );
    let scale = match mode {
        InflateMode::Repeat => 1.0,
        InflateMode::RepeatScaled => 1.0 / t as f64,
    };
    let mut w = Array5::<f64>::zeros((o, i, t, kh, kw));
    for dt in 0..t {
        w.index_axis_mut(Axis(2), dt).assign(&(&src.w * scale));
    }
    Weight3d {
        w,
        b: src.b.clone(),
    }
}

/// Uniform Xavier/Glorot initialization of a conv kernel; biases start
/// at zero.
pub fn init_weight_2d(
    rng: &mut ChaCha8Rng,
    out_c: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
) -> Weight2d {
    let fan_in = (in_c * kh * kw) as f64;
    let fan_out = (out_c * kh * kw) as f64;
    let limit = (6.0 / (fan_in + fan_out)).sqrt();
    let w = Array4::from_shape_fn((out_c, in_c, kh, kw), |_| rng.gen_range(-limit..limit));
    Weight2d {
        w,
        b: Array1::zeros(out_c),
    }
}

/// Writes an f64 array to disk as raw little-endian f32 values.
pub fn write_f32_file(path: &Path, values: &ArrayD<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads a raw little-endian f32 file into an f64 array of the given shape.
pub fn read_f32_file(path: &Path, shape: &[usize]) -> Result<ArrayD<f64>> {
    let expected: usize = shape.iter().product();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if buf.len() != expected * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} f32 values ({} bytes), found {} bytes",
            path.display(),
            expected,
            expected * 4,
            buf.len()
        )));
    }
    let values: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), values)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::SeedableRng;

    #[test]
    fn inflate_t1_is_identity_in_both_modes() {
        let w2 = Weight2d {
            w: Array4::from_elem((1, 1, 1, 1), 0.7),
            b: arr1(&[0.3]),
        };
        for mode in [InflateMode::Repeat, InflateMode::RepeatScaled] {
            let w3 = inflate_weights(&w2, 1, mode);
            assert_eq!(w3.w.shape(), &[1, 1, 1, 1, 1]);
            assert!((w3.w[[0, 0, 0, 0, 0]] - 0.7).abs() < 1e-15);
            assert_eq!(w3.b, w2.b);
        }
    }

    #[test]
    fn inflate_repeat_copies_each_slice() {
        let w2 = Weight2d {
            w: Array4::from_elem((1, 1, 1, 1), 1.0),
            b: arr1(&[0.0]),
        };
        let w3 = inflate_weights(&w2, 3, InflateMode::Repeat);
        for dt in 0..3 {
            assert!((w3.w[[0, 0, dt, 0, 0]] - 1.0).abs() < 1e-15);
        }
        let scaled = inflate_weights(&w2, 3, InflateMode::RepeatScaled);
        for dt in 0..3 {
            assert!((scaled.w[[0, 0, dt, 0, 0]] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn f32_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.f32");
        let values = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |ix| (ix[0] * 3 + ix[1]) as f64 * 0.25);
        write_f32_file(&path, &values).unwrap();
        let back = read_f32_file(&path, &[2, 3]).unwrap();
        assert_eq!(back, values);
        assert!(read_f32_file(&path, &[7]).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_weight_2d(&mut ChaCha8Rng::seed_from_u64(5), 4, 3, 3, 3);
        let b = init_weight_2d(&mut ChaCha8Rng::seed_from_u64(5), 4, 3, 3, 3);
        assert_eq!(a.w, b.w);
    }
}
