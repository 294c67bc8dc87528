//! Checkpoint persistence.
//!
//! A checkpoint is a directory holding `manifest.json` (format version,
//! stream kind, the full detector config, a config hash, and the tensor
//! list) plus one raw little-endian f32 file per weight tensor, named by
//! role and layer index. Loading validates every shape against the
//! config and rejects hash mismatches.

use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::anchors::generate_anchors;
use crate::backbone::{
    inflate_config, read_f32_file, write_f32_file, Weight2d, Weight3d,
};
use crate::types::{StreamKind, TemporalArity};
use crate::{Error, Result};

use super::{DetectorConfig, StreamModel, TrunkWeights};

const FORMAT: &str = "stad-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    stream: String,
    config: DetectorConfig,
    config_hash: String,
    anchor_fingerprint: String,
    tensors: Vec<TensorEntry>,
}

fn tensor_files(model: &StreamModel) -> Vec<(String, ndarray::ArrayD<f64>)> {
    let mut out: Vec<(String, ndarray::ArrayD<f64>)> = Vec::new();
    match &model.trunk {
        TrunkWeights::TwoD(ws) => {
            for (i, w) in ws.iter().enumerate() {
                if let Some(w) = w {
                    out.push((format!("trunk_{i:03}_w.f32"), w.w.clone().into_dyn()));
                    out.push((format!("trunk_{i:03}_b.f32"), w.b.clone().into_dyn()));
                }
            }
        }
        TrunkWeights::ThreeD(ws) => {
            for (i, w) in ws.iter().enumerate() {
                if let Some(w) = w {
                    out.push((format!("trunk_{i:03}_w.f32"), w.w.clone().into_dyn()));
                    out.push((format!("trunk_{i:03}_b.f32"), w.b.clone().into_dyn()));
                }
            }
        }
    }
    for (i, w) in model.extra.iter().enumerate() {
        out.push((format!("extra_{i:03}_w.f32"), w.w.clone().into_dyn()));
        out.push((format!("extra_{i:03}_b.f32"), w.b.clone().into_dyn()));
    }
    for (i, w) in model.loc_heads.iter().enumerate() {
        out.push((format!("loc_{i:03}_w.f32"), w.w.clone().into_dyn()));
        out.push((format!("loc_{i:03}_b.f32"), w.b.clone().into_dyn()));
    }
    for (i, w) in model.conf_heads.iter().enumerate() {
        out.push((format!("conf_{i:03}_w.f32"), w.w.clone().into_dyn()));
        out.push((format!("conf_{i:03}_b.f32"), w.b.clone().into_dyn()));
    }
    out
}

/// Writes a model into `dir` (created if needed).
pub fn save_checkpoint(model: &StreamModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let tensors = tensor_files(model);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        stream: model.kind.to_string(),
        config: model.config.clone(),
        config_hash: format!("{:016x}", model.config.config_hash()),
        anchor_fingerprint: format!("{:016x}", model.fingerprint),
        tensors: tensors
            .iter()
            .map(|(file, arr)| TensorEntry {
                file: file.clone(),
                shape: arr.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json + "\n")
        .map_err(|e| Error::io(dir.join("manifest.json").display().to_string(), e))?;
    for (file, arr) in &tensors {
        write_f32_file(&dir.join(file), arr)?;
    }
    Ok(())
}

/// Loads a model from a checkpoint directory, validating format version,
/// config hash, and every tensor shape.
pub fn load_checkpoint(dir: &Path) -> Result<StreamModel> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint format {} v{}",
            manifest_path.display(),
            manifest.format,
            manifest.version
        )));
    }
    let config = manifest.config;
    config.validate()?;
    let expect_hash = format!("{:016x}", config.config_hash());
    if manifest.config_hash != expect_hash {
        return Err(Error::Format(format!(
            "{}: config hash mismatch ({} recorded, {} recomputed)",
            manifest_path.display(),
            manifest.config_hash,
            expect_hash
        )));
    }
    let kind: StreamKind = manifest.stream.parse()?;

    let load2d = |file_w: String, file_b: String, shape: &[usize]| -> Result<Weight2d> {
        let w = read_f32_file(&dir.join(file_w), shape)?;
        let b = read_f32_file(&dir.join(file_b), &[shape[0]])?;
        Ok(Weight2d {
            w: w.into_dimensionality::<ndarray::Ix4>()
                .map_err(|e| Error::Format(e.to_string()))?,
            b: b.into_dimensionality::<ndarray::Ix1>()
                .map_err(|e| Error::Format(e.to_string()))?,
        })
    };

    let (trunk_cfg, trunk) = match kind.arity {
        TemporalArity::TwoD => {
            let cfg = config.backbone.clone();
            let mut in_c = cfg.in_channels;
            let mut ws: Vec<Option<Weight2d>> = Vec::with_capacity(cfg.layers.len());
            for (i, l) in cfg.layers.iter().enumerate() {
                if l.kind == crate::backbone::LayerKind::Conv {
                    let shape = [l.out_channels, in_c, l.kernel.1, l.kernel.2];
                    ws.push(Some(load2d(
                        format!("trunk_{i:03}_w.f32"),
                        format!("trunk_{i:03}_b.f32"),
                        &shape,
                    )?));
                    in_c = l.out_channels;
                } else {
                    ws.push(None);
                }
            }
            (cfg, TrunkWeights::TwoD(ws))
        }
        TemporalArity::ThreeD => {
            let cfg = inflate_config(&config.backbone);
            let mut in_c = cfg.in_channels;
            let mut ws: Vec<Option<Weight3d>> = Vec::with_capacity(cfg.layers.len());
            for (i, l) in cfg.layers.iter().enumerate() {
                if l.kind == crate::backbone::LayerKind::Conv {
                    let shape = [l.out_channels, in_c, l.kernel.0, l.kernel.1, l.kernel.2];
                    let w = read_f32_file(&dir.join(format!("trunk_{i:03}_w.f32")), &shape)?;
                    let b = read_f32_file(
                        &dir.join(format!("trunk_{i:03}_b.f32")),
                        &[l.out_channels],
                    )?;
                    ws.push(Some(Weight3d {
                        w: w.into_dimensionality::<ndarray::Ix5>()
                            .map_err(|e| Error::Format(e.to_string()))?,
                        b: b.into_dimensionality::<ndarray::Ix1>()
                            .map_err(|e| Error::Format(e.to_string()))?,
                    }));
                    in_c = l.out_channels;
                } else {
                    ws.push(None);
                }
            }
            (cfg, TrunkWeights::ThreeD(ws))
        }
    };

    let level_shapes = config.level_shapes()?;
    let base_channels = crate::backbone::layer_shapes_2d(&config.backbone)?
        .last()
        .expect("non-empty")
        .0;
    let mut extra = Vec::with_capacity(config.extra_layers.len());
    let mut in_c = base_channels;
    for (i, l) in config.extra_layers.iter().enumerate() {
        let shape = [l.out_channels, in_c, l.kernel.1, l.kernel.2];
        extra.push(load2d(
            format!("extra_{i:03}_w.f32"),
            format!("extra_{i:03}_b.f32"),
            &shape,
        )?);
        in_c = l.out_channels;
    }
    let k = config.head_kernel;
    let mut loc_heads = Vec::new();
    let mut conf_heads = Vec::new();
    for (i, (shape, lvl)) in level_shapes
        .iter()
        .zip(config.anchors.levels.iter())
        .enumerate()
    {
        let b = lvl.boxes_per_cell();
        loc_heads.push(load2d(
            format!("loc_{i:03}_w.f32"),
            format!("loc_{i:03}_b.f32"),
            &[b * 4, shape.0, k, k],
        )?);
        conf_heads.push(load2d(
            format!("conf_{i:03}_w.f32"),
            format!("conf_{i:03}_b.f32"),
            &[b * (config.num_classes + 1), shape.0, k, k],
        )?);
    }

    // Cross-check the recorded tensor list against what was read.
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        let arr = read_f32_file(&path, &entry.shape)?;
        let _ = arr.into_shape(IxDyn(&entry.shape));
    }

    let grid = generate_anchors(&config.anchors)?;
    let fingerprint = config.anchor_fingerprint();
    if format!("{fingerprint:016x}") != manifest.anchor_fingerprint {
        return Err(Error::Format(format!(
            "{}: anchor fingerprint mismatch",
            manifest_path.display()
        )));
    }
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::tests::{clip_input, micro_config, rgb_input};

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        for (kind, input) in [
            (StreamKind::RGB_2D, rgb_input()),
            (StreamKind::RGB_3D, clip_input()),
        ] {
            let path = dir.path().join(kind.to_string());
            let model = StreamModel::new_random(micro_config(), kind, 23).unwrap();
            save_checkpoint(&model, &path).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert_eq!(loaded.kind, kind);
            assert_eq!(loaded.fingerprint, model.fingerprint);
            // f32 storage truncates; predictions agree to f32 precision.
            let a = model.predict(&input).unwrap();
            let b = loaded.predict(&input).unwrap();
            for (x, y) in a.scores.iter().zip(b.scores.iter()) {
                assert!((x - y).abs() < 1e-5, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a");
        let second = dir.path().join("b");
        let model = StreamModel::new_random(micro_config(), StreamKind::RGB_2D, 7).unwrap();
        save_checkpoint(&model, &first).unwrap();
        let loaded = load_checkpoint(&first).unwrap();
        save_checkpoint(&loaded, &second).unwrap();
        for entry in std::fs::read_dir(&first).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(first.join(&name)).unwrap();
            let b = std::fs::read(second.join(&name)).unwrap();
            assert_eq!(a, b, "file {name:?} differs after round trip");
        }
    }

    #[test]
    fn corrupted_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let model = StreamModel::new_random(micro_config(), StreamKind::RGB_2D, 7).unwrap();
        save_checkpoint(&model, &path).unwrap();
        // Truncate one tensor file.
        let victim = path.join("trunk_000_w.f32");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
