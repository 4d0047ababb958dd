//! Checkpoint directories.
//!
//! A model directory holds `model.json` (model config and init seed) and one
//! subdirectory per component: `higher`, `fx`, `lower_<i>` for a hierarchy,
//! or `flat_fx` and `flat` for the ablation model. Each component directory
//! has a `header.json` listing its tensors and one `<name>.hrtn` blob per
//! tensor. Lower-model headers name the extractor they run on in `refs`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::hex;
use crate::error::{Error, Result};
use crate::hierarchy::{FlatModel, HierarchicalModel, ModelConfig};
use crate::nn::Parameterized;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";
pub const MODEL_FILE: &str = "model.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    /// Hex SHA-256 of the blob file.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub refs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    /// `hierarchical` or `flat`.
    pub kind: String,
    pub config: ModelConfig,
    pub seed: u64,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(path, e.to_string()))
}

/// Writes one component into `dir`.
pub fn save_component<C: Serialize>(
    dir: &Path,
    kind: &str,
    config: &C,
    seed: u64,
    model: &dyn Parameterized,
    refs: &[&str],
) -> Result<CheckpointHeader> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let mut failure = None;
    model.visit(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let file = format!("{name}.hrtn");
        let blob = t.to_blob();
        let sha256 = hex(&<sha2::Sha256 as sha2::Digest>::digest(&blob));
        if let Err(e) = write(&dir.join(&file), &blob) {
            failure = Some(e);
        }
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), file, sha256 });
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        seed,
        tensors,
        refs: refs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&dir.join(HEADER_FILE), &header)?;
    Ok(header)
}

/// Overwrites the parameters of `model` with the tensors stored in `dir`.
/// Names, order and shapes must match exactly.
pub fn load_component(dir: &Path, kind: &str, model: &mut dyn Parameterized) -> Result<CheckpointHeader> {
    let header_path = dir.join(HEADER_FILE);
    let header: CheckpointHeader = read_json(&header_path)?;
    if header.version != CHECKPOINT_VERSION || header.kind != kind {
        return Err(Error::corrupt(
            &header_path,
            format!("expected {kind} v{CHECKPOINT_VERSION}, found {} v{}", header.kind, header.version),
        ));
    }
    let names = model.param_names();
    let stored: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
    if names != stored {
        return Err(Error::corrupt(&header_path, "tensor names differ from the model layout"));
    }
    let mut loaded = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if hex(&<sha2::Sha256 as sha2::Digest>::digest(&bytes)) != entry.sha256 {
            return Err(Error::corrupt(&path, "checksum mismatch"));
        }
        let t = Tensor::from_blob(&bytes).map_err(|e| Error::corrupt(&path, e.to_string()))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::corrupt(&path, format!("shape {:?} differs from header {:?}", t.shape(), entry.shape)));
        }
        loaded.push(t);
    }
    let mut mismatch = None;
    let mut it = loaded.into_iter();
    model.visit_mut(&mut |name, t| {
        let new = it.next().expect("counts checked above");
        if new.shape() != t.shape() && mismatch.is_none() {
            mismatch = Some(name.to_string());
        }
        *t = new;
    });
    if let Some(name) = mismatch {
        return Err(Error::corrupt(&header_path, format!("tensor {name} does not fit the configured model")));
    }
    Ok(header)
}

pub fn lower_dir(i: usize) -> String {
    format!("lower_{i}")
}

pub fn save_hierarchy(model: &HierarchicalModel, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(
        &dir.join(MODEL_FILE),
        &ModelFile { version: CHECKPOINT_VERSION, kind: "hierarchical".into(), config: model.config.clone(), seed },
    )?;
    save_component(&dir.join("higher"), "higher", &model.config.higher, seed, &model.higher, &[])?;
    save_component(&dir.join("fx"), "fx", &model.config.extractor, seed, &model.fx, &[])?;
    for (i, lower) in model.lowers.iter().enumerate() {
        save_component(&dir.join(lower_dir(i)), "lower", &model.config.lower, seed, lower, &["fx"])?;
    }
    Ok(())
}

pub fn read_model_file(dir: &Path) -> Result<ModelFile> {
    read_json(&dir.join(MODEL_FILE))
}

pub fn load_hierarchy(dir: &Path) -> Result<HierarchicalModel> {
    let file = read_model_file(dir)?;
    if file.kind != "hierarchical" {
        return Err(Error::corrupt(dir.join(MODEL_FILE), format!("expected a hierarchical model, found {}", file.kind)));
    }
    let mut model = HierarchicalModel::new(file.config, file.seed)?;
    load_component(&dir.join("higher"), "higher", &mut model.higher)?;
    load_component(&dir.join("fx"), "fx", &mut model.fx)?;
    for i in 0..model.lowers.len() {
        let header = load_component(&dir.join(lower_dir(i)), "lower", &mut model.lowers[i])?;
        if header.refs != ["fx"] {
            return Err(Error::corrupt(dir.join(lower_dir(i)), "lower model must reference the shared extractor"));
        }
    }
    Ok(model)
}

pub fn save_flat(model: &FlatModel, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(
        &dir.join(MODEL_FILE),
        &ModelFile { version: CHECKPOINT_VERSION, kind: "flat".into(), config: model.config.clone(), seed },
    )?;
    save_component(&dir.join("flat_fx"), "fx", &model.config.extractor, seed, &model.fx, &[])?;
    save_component(&dir.join("flat"), "lower", &model.config.lower, seed, &model.lower, &["flat_fx"])?;
    Ok(())
}

pub fn load_flat(dir: &Path) -> Result<FlatModel> {
    let file = read_model_file(dir)?;
    if file.kind != "flat" {
        return Err(Error::corrupt(dir.join(MODEL_FILE), format!("expected a flat model, found {}", file.kind)));
    }
    let mut model = FlatModel::new(file.config, file.seed)?;
    load_component(&dir.join("flat_fx"), "fx", &mut model.fx)?;
    load_component(&dir.join("flat"), "lower", &mut model.lower)?;
    Ok(model)
}
