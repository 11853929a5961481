//! Checkpoint format: a JSON manifest listing per entry a stable dotted
//! name, shape and byte offset, next to one contiguous blob of 32-bit
//! little-endian floats in manifest order. Batch-norm running statistics
//! are stored as frozen entries so eval-mode inference round-trips.

use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MvttConfig, MvttModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: MvttConfig,
    dims: [usize; 3],
    params: Vec<ManifestEntry>,
    blob: String,
}

fn entries(model: &MvttModel) -> Vec<(String, Vec<usize>, Vec<f64>, bool)> {
    let mut out = Vec::new();
    for (name, p) in model.params.iter() {
        out.push((
            name.clone(),
            p.tensor.shape().to_vec(),
            p.tensor.data().to_vec(),
            p.trainable,
        ));
    }
    for (name, state) in &model.bn {
        out.push((
            format!("{name}.running_mean"),
            vec![state.channels()],
            state.running_mean.clone(),
            false,
        ));
        out.push((
            format!("{name}.running_var"),
            vec![state.channels()],
            state.running_var.clone(),
            false,
        ));
    }
    out
}

pub fn save_checkpoint(model: &MvttModel, path: &Path) -> Result<()> {
    let blob_path = path.with_extension("blob");
    let blob_name = blob_path
        .file_name()
        .ok_or_else(|| Error::invalid("checkpoint path has no file name"))?
        .to_string_lossy()
        .to_string();
    let mut manifest = Manifest {
        format_version: 1,
        config: model.config.clone(),
        dims: [model.dims.0, model.dims.1, model.dims.2],
        params: Vec::new(),
        blob: blob_name,
    };
    let mut blob: Vec<u8> = Vec::new();
    for (name, shape, data, trainable) in entries(model) {
        manifest.params.push(ManifestEntry {
            name,
            shape,
            offset: blob.len(),
            trainable,
        });
        for v in data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, json).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut f = std::fs::File::create(&blob_path).map_err(|e| Error::Io {
        path: blob_path.display().to_string(),
        source: e,
    })?;
    f.write_all(&blob).map_err(|e| Error::Io {
        path: blob_path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MvttModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        reason: format!("bad manifest: {}", e),
    })?;
    if manifest.format_version != 1 {
        return Err(Error::Malformed {
            path: path.display().to_string(),
            reason: format!("unknown format_version {}", manifest.format_version),
        });
    }
    let blob_path: PathBuf = match path.parent() {
        Some(dir) => dir.join(&manifest.blob),
        None => PathBuf::from(&manifest.blob),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(&blob_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Io {
            path: blob_path.display().to_string(),
            source: e,
        })?;

    let mut model = MvttModel::new(
        manifest.config.clone(),
        (manifest.dims[0], manifest.dims[1], manifest.dims[2]),
        0,
    )?;
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * n;
        if end > bytes.len() {
            return Err(Error::Malformed {
                path: blob_path.display().to_string(),
                reason: format!(
                    "entry '{}' spans bytes {}..{} but blob has {}",
                    entry.name,
                    entry.offset,
                    end,
                    bytes.len()
                ),
            });
        }
        let values: Vec<f64> = bytes[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if let Some(stripped) = entry.name.strip_suffix(".running_mean") {
            let state = model.bn.get_mut(stripped).ok_or_else(|| Error::Malformed {
                path: path.display().to_string(),
                reason: format!("unknown batch-norm layer '{}'", stripped),
            })?;
            state.running_mean = values;
        } else if let Some(stripped) = entry.name.strip_suffix(".running_var") {
            let state = model.bn.get_mut(stripped).ok_or_else(|| Error::Malformed {
                path: path.display().to_string(),
                reason: format!("unknown batch-norm layer '{}'", stripped),
            })?;
            state.running_var = values;
        } else {
            let t = model.params.get_mut(&entry.name).map_err(|_| Error::Malformed {
                path: path.display().to_string(),
                reason: format!("unknown parameter '{}'", entry.name),
            })?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Malformed {
                    path: path.display().to_string(),
                    reason: format!(
                        "parameter '{}' shape {:?} does not match model shape {:?}",
                        entry.name,
                        entry.shape,
                        t.shape()
                    ),
                });
            }
            *t = Tensor::new(entry.shape.clone(), values)?;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, normalize, PhantomSpec};

    fn tiny_model() -> (MvttModel, crate::phantom::Volume) {
        let mut spec = PhantomSpec::desk_scale(8);
        spec.dims = (3, 8, 8);
        spec.spacing_mm = (2.0, 1.0, 1.0);
        spec.semi_axes_mm = (2.5, 2.5, 2.5);
        spec.center_mm = (3.0, 4.0, 4.0);
        spec.pv_stub_count = 0;
        let p = generate_phantom(&spec).unwrap();
        let model = MvttModel::new(MvttConfig::desk_scale(1), spec.dims, 3).unwrap();
        (model, normalize(&p.intensity).unwrap())
    }

    #[test]
    fn save_load_save_is_bitwise_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (model, _) = tiny_model();
        let p1 = dir.path().join("a.json");
        save_checkpoint(&model, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        let p2 = dir.path().join("b.json");
        save_checkpoint(&loaded, &p2).unwrap();
        // Values survived one f32 rounding, so the second trip is lossless.
        assert_eq!(
            std::fs::read(dir.path().join("a.blob")).unwrap(),
            std::fs::read(dir.path().join("b.blob")).unwrap()
        );
        let again = load_checkpoint(&p2).unwrap();
        for (name, p) in loaded.params.iter() {
            assert_eq!(p.tensor.data(), again.params.get(name).unwrap().data());
        }
    }

    #[test]
    fn loaded_model_infers_identically_to_its_own_reload() {
        let dir = tempfile::tempdir().unwrap();
        let (model, volume) = tiny_model();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&model, &path).unwrap();
        let mut m1 = load_checkpoint(&path).unwrap();
        let mut m2 = load_checkpoint(&path).unwrap();
        let a = m1.infer(&volume).unwrap();
        let b = m2.infer(&volume).unwrap();
        assert_eq!(a.m_l.values(), b.m_l.values());
        assert_eq!(a.m_as.values(), b.m_as.values());
        assert_eq!(a.anatomy_mask.values(), b.anatomy_mask.values());
    }

    #[test]
    fn round_trip_preserves_config_dims_and_bn_stats() {
        let dir = tempfile::tempdir().unwrap();
        let (mut model, _) = tiny_model();
        model.bn.get_mut("theta_a.enc1.bn").unwrap().running_mean[0] = 0.25;
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.dims, model.dims);
        assert_eq!(loaded.config.channels(), model.config.channels());
        assert_eq!(
            loaded.bn["theta_a.enc1.bn"].running_mean[0],
            0.25f32 as f64
        );
    }

    #[test]
    fn corrupt_manifests_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (model, _) = tiny_model();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&model, &path).unwrap();

        // Truncated blob.
        let blob = dir.path().join("ckpt.blob");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::write(&blob, &bytes).unwrap();

        // Unknown parameter name.
        let text = std::fs::read_to_string(&path).unwrap();
        let hacked = text.replace("theta_a.enc1.weight", "theta_a.bogus.weight");
        std::fs::write(&path, hacked).unwrap();
        assert!(load_checkpoint(&path).is_err());

        // Not JSON at all.
        std::fs::write(&path, "not a manifest").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
