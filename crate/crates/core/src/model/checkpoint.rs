//! Checkpoint directories: `manifest.json`, `params.bin` (f32 LE) and an
//! optional `scaler.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneSpec, HeadSpec, Inflation, Model};
use crate::data::{read_json, write_json, TargetScaler};
use crate::error::{Error, Result};
use lvq_nn::{ParamKind, ParamStore, Tensor};

const FORMAT: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";
const SCALER: &str = "scaler.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub buffer: bool,
    pub shape: Vec<usize>,
    /// Offset into `params.bin`, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub spec: BackboneSpec,
    pub head: HeadSpec,
    pub inflation: Option<Inflation>,
    pub decoder: bool,
    pub lineage: Vec<String>,
    /// File holding the target scaler, relative to the checkpoint directory.
    pub scaler: Option<String>,
    pub metadata: BTreeMap<String, String>,
    pub params: Vec<ParamEntry>,
}

/// Writes `model` at f32 precision. Callers that keep using the in-memory
/// model should round it first (`store.round_to_f32`) to stay bit-identical.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    scaler: Option<&TargetScaler>,
    metadata: BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut bytes = Vec::new();
    let mut params = Vec::new();
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            buffer: p.kind == ParamKind::Buffer,
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.numel();
        for &v in p.value.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let path = dir.join(PARAMS);
    fs::write(&path, bytes).map_err(Error::io(&path))?;
    if let Some(s) = scaler {
        write_json(&dir.join(SCALER), s)?;
    }
    let manifest = CheckpointManifest {
        format: FORMAT,
        spec: model.spec.clone(),
        head: model.head,
        inflation: model.inflation,
        decoder: model.decoder,
        lineage: model.lineage.clone(),
        scaler: scaler.map(|_| SCALER.to_string()),
        metadata,
        params,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, Option<TargetScaler>, CheckpointManifest)> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::MissingCheckpoint(dir.display().to_string()));
    }
    let manifest: CheckpointManifest = read_json(&manifest_path)?;
    if manifest.format != FORMAT {
        return Err(Error::Invalid(format!("checkpoint format {} (expected {FORMAT})", manifest.format)));
    }
    let path = dir.join(PARAMS);
    let raw = fs::read(&path).map_err(Error::io(&path))?;
    let values: Vec<f64> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Invalid(format!("{}: parameter {} out of range", path.display(), e.name)))?;
        let kind = if e.buffer { ParamKind::Buffer } else { ParamKind::Trainable };
        store.insert(&e.name, kind, Tensor::new(&e.shape, data.to_vec())?)?;
    }
    let scaler = match &manifest.scaler {
        Some(file) => Some(read_json(&dir.join(file))?),
        None => None,
    };
    let model = Model {
        spec: manifest.spec.clone(),
        head: manifest.head,
        inflation: manifest.inflation,
        decoder: manifest.decoder,
        store,
        lineage: manifest.lineage.clone(),
    };
    Ok((model, scaler, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attach_sr_decoder, build_2d, inflate_to_3d, Init};

    #[test]
    fn round_trip_is_bitwise_after_rounding() {
        let spec = BackboneSpec::from_name("mini").unwrap();
        let m = build_2d(&spec, HeadSpec::Joint, Init::Random, 9).unwrap();
        let mut m = inflate_to_3d(&attach_sr_decoder(&m, 9).unwrap(), Inflation::KernelSize).unwrap();
        m.store.round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        let scaler = TargetScaler { min: [1.0; 11], max: [2.0; 11] };
        let meta = BTreeMap::from([("note".to_string(), "x".to_string())]);
        save_checkpoint(dir.path(), &m, Some(&scaler), meta.clone()).unwrap();
        let (back, sc, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(sc, Some(scaler));
        assert_eq!(manifest.metadata, meta);
        assert_eq!(back.lineage, m.lineage);
        assert_eq!(back.store.len(), m.store.len());
        for ((_, a), (_, b)) in back.store.iter().zip(m.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.value, b.value);
        }
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::MissingCheckpoint(_))));
    }
}
