//! On-disk model checkpoints: a `manifest.json` plus one LDNT file per tensor.
//!
//! The manifest carries no timestamps, so two identical models produce
//! byte-identical checkpoint directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::params::ParamStore;
use crate::dataio::dataset::Meta;
use crate::error::{Error, Result};
use crate::kernels::norm::BnRunning;
use crate::ldnt::{self, DynTensor};
use crate::nets::{build, ArchSpec, Model};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnEntry {
    pub channels: usize,
    pub initialized: bool,
    /// f64 tensor of shape [2, C]: running mean then running variance.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub arch: ArchSpec,
    pub params: Vec<ParamEntry>,
    pub batch_norm: Vec<BnEntry>,
    /// `ParamStore::checksum` in hex.
    pub checksum: String,
    /// Metadata of the training data (mean pixel, palette), when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Meta>,
}

/// Accepts either the checkpoint directory or its manifest file.
pub fn resolve_dir(path: &Path) -> PathBuf {
    if path.is_file() || path.file_name().is_some_and(|n| n == MANIFEST) {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

pub fn save(model: &Model, dir: &Path, data: Option<&Meta>) -> Result<Manifest> {
    fs::create_dir_all(dir.join("params"))?;
    fs::create_dir_all(dir.join("bn"))?;
    let store = &model.store;
    let mut params = Vec::with_capacity(store.values.len());
    for (i, (spec, v)) in store.specs.iter().zip(&store.values).enumerate() {
        let file = format!("params/{:04}.ldnt", i);
        ldnt::save(dir.join(&file), v)?;
        params.push(ParamEntry {
            name: spec.name.clone(),
            shape: spec.shape.clone(),
            file,
        });
    }
    let mut batch_norm = Vec::with_capacity(store.bn.len());
    for (i, r) in store.bn.iter().enumerate() {
        let file = format!("bn/{:04}.ldnt", i);
        let mut data = r.mean.clone();
        data.extend_from_slice(&r.var);
        ldnt::save(
            dir.join(&file),
            &Tensor::from_vec(&[2, r.channels()], data)?,
        )?;
        batch_norm.push(BnEntry {
            channels: r.channels(),
            initialized: r.initialized,
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arch: model.spec.clone(),
        params,
        batch_norm,
        checksum: format!("{:016x}", store.checksum()),
        data: data.cloned(),
    };
    fs::write(
        dir.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let dir = resolve_dir(path);
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            m.format_version
        )));
    }
    Ok(m)
}

/// Loads and validates a checkpoint: the layout must match the architecture
/// and the stored checksum must match the loaded values.
pub fn load(path: &Path) -> Result<Model> {
    let dir = resolve_dir(path);
    let m = read_manifest(&dir)?;
    m.arch.validate()?;
    let d = m.arch.downsample_factor;
    let g = build(&m.arch, 1, d, d)?;
    let mut store = ParamStore::init(&g.graph, 0);
    if m.params.len() != store.values.len() || m.batch_norm.len() != store.bn.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} params and {} batch norms, architecture needs {} and {}",
            m.params.len(),
            m.batch_norm.len(),
            store.values.len(),
            store.bn.len()
        )));
    }
    for (i, e) in m.params.iter().enumerate() {
        let spec = &store.specs[i];
        if e.name != spec.name || e.shape != spec.shape {
            return Err(Error::Format(format!(
                "param {} is `{}` {:?}, expected `{}` {:?}",
                i, e.name, e.shape, spec.name, spec.shape
            )));
        }
        match ldnt::load(dir.join(&e.file))? {
            DynTensor::F32(t) if t.shape() == spec.shape.as_slice() => store.values[i] = t,
            other => {
                return Err(Error::Format(format!(
                    "`{}` holds {:?} {:?}",
                    e.file,
                    other.dtype(),
                    other.shape()
                )))
            }
        }
    }
    for (i, e) in m.batch_norm.iter().enumerate() {
        let c = store.bn[i].channels();
        let t = match ldnt::load(dir.join(&e.file))? {
            DynTensor::F64(t) if e.channels == c && t.shape() == [2, c] => t,
            other => {
                return Err(Error::Format(format!(
                    "`{}` holds {:?} {:?}",
                    e.file,
                    other.dtype(),
                    other.shape()
                )))
            }
        };
        let mut r = BnRunning::new(c);
        r.mean.copy_from_slice(&t.data()[..c]);
        r.var.copy_from_slice(&t.data()[c..]);
        r.initialized = e.initialized;
        store.bn[i] = r;
    }
    let sum = format!("{:016x}", store.checksum());
    if sum != m.checksum {
        return Err(Error::Format(format!(
            "checksum {} does not match manifest {}",
            sum, m.checksum
        )));
    }
    Model::from_store(m.arch, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::norm::BnMode;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::new(ArchSpec::toy(), 3).unwrap();
        let x = Tensor::from_fn(&[1, 3, 64, 64], |i| (i % 13) as f32 / 13.0);
        m.forward(&x, BnMode::Train).unwrap();
        save(&m, dir.path(), None).unwrap();
        let mut back = load(&dir.path().join(MANIFEST)).unwrap();
        assert_eq!(back.store.checksum(), m.store.checksum());
        assert_eq!(back.store.bn, m.store.bn);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::new(ArchSpec::toy(), 3).unwrap();
        save(&m, dir.path(), None).unwrap();
        let mut w = m.store.values[0].clone();
        w.data_mut()[0] += 1.0;
        ldnt::save(dir.path().join("params/0000.ldnt"), &w).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Format(_))));
    }
}
