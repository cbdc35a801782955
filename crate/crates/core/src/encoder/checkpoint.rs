use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

use super::{ModelConfig, Parameters, Weights};

const CONFIG_FILE: &str = "config.txt";
const MANIFEST_FILE: &str = "manifest.txt";

/// A saved model: its config, weights and the optimizer step it was taken at.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    pub step: usize,
    pub path: PathBuf,
}

fn tensor_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.tensor"))
}

/// Writes `dir/` with the config, a manifest and one dump per tensor. The
/// directory is assembled under a temporary name and renamed into place.
pub fn save_params(params: &Parameters, cfg: &ModelConfig, step: usize, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let expected = Weights::shapes(cfg);
    for ((name, t), shape) in params.named().into_iter().zip(expected.values()) {
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
    }
    let file_name = dir
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("checkpoint path {} has no name", dir.display())))?;
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = parent.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let write = |path: PathBuf, text: String| fs::write(&path, text).map_err(|e| Error::io(&path, e));
    write(tmp.join(CONFIG_FILE), cfg.to_kv())?;
    let mut manifest = format!("step={step}\n");
    for (name, t) in params.named() {
        manifest.push_str(&name);
        manifest.push('\n');
        write(tensor_file(&tmp, &name), t.dump())?;
    }
    write(tmp.join(MANIFEST_FILE), manifest)?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn read_manifest(dir: &Path) -> Result<(usize, Vec<String>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    let step = lines
        .next()
        .and_then(|l| l.strip_prefix("step="))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(&path, 1, "expected step=<n>"))?;
    Ok((step, lines.map(str::to_string).collect()))
}

/// Loads weights saved by [`save_params`], checking every tensor against
/// `cfg`. Returns the weights and the saved step.
pub fn load_params(dir: impl AsRef<Path>, cfg: &ModelConfig) -> Result<(Parameters, usize)> {
    let dir = dir.as_ref();
    cfg.validate()?;
    let (step, names) = read_manifest(dir)?;
    let expected_names = Weights::<Tensor>::names(cfg.layers);
    if let Some(missing) = expected_names.iter().find(|n| !names.contains(n)) {
        return Err(Error::Checkpoint(format!(
            "{}: tensor {missing} missing",
            dir.display()
        )));
    }
    if let Some(extra) = names.iter().find(|n| !expected_names.contains(n)) {
        return Err(Error::Checkpoint(format!(
            "{}: tensor {extra} not expected by config {cfg}",
            dir.display()
        )));
    }
    let params = Weights::shapes(cfg).try_map(|name, shape| {
        let path = tensor_file(dir, name);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let t = Tensor::parse_dump(&text)
            .map_err(|e| Error::Checkpoint(format!("tensor {name} in {}: {e}", dir.display())))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    })?;
    Ok((params, step))
}

/// Loads a checkpoint using the config stored alongside it.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let config = ModelConfig::load(dir.join(CONFIG_FILE))?;
    let (params, step) = load_params(dir, &config)?;
    Ok(Checkpoint {
        config,
        params,
        step,
        path: dir.to_path_buf(),
    })
}
