//! Model checkpoints: named `f32` arrays in a safetensors file, with the
//! model metadata and a SHA-256 manifest in the header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{IntensityRegressor, ModelMeta, NetWeights, StyleModel};
use crate::plane::{hex, ImagePlane};

pub const FORMAT: &str = "brushwork-checkpoint/1";

fn to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn digest(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Serializes a model to bytes.
pub fn to_bytes_checkpoint(model: &StyleModel) -> Result<Vec<u8>> {
    let mut arrays: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, conv) in model.weights().layers() {
        arrays.push((
            format!("{name}.weight"),
            vec![conv.out_channels, conv.in_channels, conv.kernel, conv.kernel],
            to_bytes(&conv.weight),
        ));
        arrays.push((format!("{name}.bias"), vec![conv.out_channels], to_bytes(&conv.bias)));
    }
    let reg = model.regressor();
    arrays.push(("regressor.weight".into(), vec![reg.weight.len()], to_bytes(&reg.weight)));
    arrays.push(("regressor.bias".into(), vec![reg.bias.len()], to_bytes(&reg.bias)));
    if let Some(img) = model.style_image() {
        arrays.push(("style.image".into(), vec![img.height(), img.width(), 3], to_bytes(img.data())));
    }

    let manifest: BTreeMap<&str, String> = arrays.iter().map(|(n, _, b)| (n.as_str(), digest(b))).collect();
    let mut metadata = HashMap::new();
    metadata.insert("format".to_string(), FORMAT.to_string());
    metadata.insert("meta".to_string(), serde_json::to_string(model.meta()).expect("meta serializes"));
    metadata.insert("sha256".to_string(), serde_json::to_string(&manifest).expect("manifest serializes"));

    let views = arrays
        .iter()
        .map(|(n, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Integrity(format!("{n}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &Some(metadata)).map_err(|e| Error::Integrity(e.to_string()))
}

/// Writes a checkpoint, replacing `path` atomically.
pub fn save_checkpoint(model: &StyleModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes_checkpoint(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<StyleModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes_checkpoint(&bytes).map_err(|e| match e {
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads only the metadata of a checkpoint.
pub fn read_meta(path: impl AsRef<Path>) -> Result<ModelMeta> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Integrity(e.to_string()))?;
    parse_meta(header.metadata())
}

fn parse_meta(metadata: &Option<HashMap<String, String>>) -> Result<ModelMeta> {
    let md = metadata
        .as_ref()
        .ok_or_else(|| Error::Integrity("checkpoint has no metadata".into()))?;
    match md.get("format") {
        Some(f) if f == FORMAT => {}
        other => return Err(Error::Integrity(format!("unknown checkpoint format {other:?}"))),
    }
    let meta = md
        .get("meta")
        .ok_or_else(|| Error::Integrity("checkpoint has no model metadata".into()))?;
    serde_json::from_str(meta).map_err(|e| Error::Integrity(format!("bad model metadata: {e}")))
}

pub fn from_bytes_checkpoint(bytes: &[u8]) -> Result<StyleModel> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Integrity(e.to_string()))?;
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Integrity(e.to_string()))?;
    let meta = parse_meta(header.metadata())?;
    let manifest: BTreeMap<String, String> = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("sha256"))
        .ok_or_else(|| Error::Integrity("checkpoint has no hash manifest".into()))
        .and_then(|s| serde_json::from_str(s).map_err(|e| Error::Integrity(format!("bad hash manifest: {e}"))))?;

    let names: std::collections::BTreeSet<String> = st.names().into_iter().cloned().collect();
    let listed: std::collections::BTreeSet<String> = manifest.keys().cloned().collect();
    if names != listed {
        return Err(Error::Integrity("tensor names disagree with the hash manifest".into()));
    }

    let read = |name: &str, len: usize| -> Result<Vec<f32>> {
        let t = st
            .tensor(name)
            .map_err(|_| Error::Integrity(format!("missing tensor {name}")))?;
        if t.dtype() != Dtype::F32 {
            return Err(Error::Integrity(format!("{name} is not F32")));
        }
        if digest(t.data()) != manifest[name] {
            return Err(Error::Integrity(format!("hash mismatch for {name}")));
        }
        if t.data().len() != 4 * len {
            return Err(Error::Integrity(format!("{name} has the wrong size")));
        }
        Ok(t.data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };

    let mut weights = NetWeights::zeros(&meta.arch);
    let names: Vec<String> = weights.layers().into_iter().map(|(n, _)| n).collect();
    for (name, conv) in names.iter().zip(weights.layers_mut()) {
        conv.weight = read(&format!("{name}.weight"), conv.weight.len())?;
        conv.bias = read(&format!("{name}.bias"), conv.bias.len())?;
    }
    let p = meta.arch.cin_layout().param_count();
    let regressor = IntensityRegressor {
        weight: read("regressor.weight", p)?,
        bias: read("regressor.bias", p)?,
    };
    let style_image = match st.tensor("style.image") {
        Ok(t) => {
            let shape = t.shape().to_vec();
            if shape.len() != 3 || shape[2] != 3 {
                return Err(Error::Integrity("style.image must be H×W×3".into()));
            }
            let data = read("style.image", shape[0] * shape[1] * 3)?;
            Some(ImagePlane::from_vec(shape[0], shape[1], data)?)
        }
        Err(_) => None,
    };
    StyleModel::new(meta, weights, regressor, style_image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ArchConfig;
    use crate::params::StrokeParams;
    use crate::synth;

    fn model() -> StyleModel {
        let mut meta = ModelMeta::untrained("Starry", ArchConfig::tiny());
        meta.trained_factors = vec![2.0, 4.0];
        StyleModel::initialized(meta, 3).with_style_image(synth::brush_strokes(20, 24, 1))
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let bytes = to_bytes_checkpoint(&m).unwrap();
        let back = from_bytes_checkpoint(&bytes).unwrap();
        assert_eq!(back.meta(), m.meta());
        assert_eq!(back.weights(), m.weights());
        assert_eq!(back.regressor(), m.regressor());
        assert_eq!(back.style_image(), m.style_image());
        let img = synth::scene(24, 24, 2);
        let p = StrokeParams::new(2.0, 0.5, 0.0).unwrap();
        assert_eq!(back.stylize(&img, &p).unwrap(), m.stylize(&img, &p).unwrap());
    }

    #[test]
    fn truncation_and_corruption_are_integrity_errors() {
        let bytes = to_bytes_checkpoint(&model()).unwrap();
        for cut in [0, 7, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes_checkpoint(&bytes[..cut]), Err(Error::Integrity(_))));
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 5;
        flipped[last] ^= 0x40;
        assert!(matches!(from_bytes_checkpoint(&flipped), Err(Error::Integrity(_))));
    }

    #[test]
    fn file_round_trip_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.safetensors");
        save_checkpoint(&model(), &path).unwrap();
        assert_eq!(read_meta(&path).unwrap().style_name, "Starry");
        assert_eq!(load_checkpoint(&path).unwrap().meta().style_name, "Starry");
    }
}
