//! Parameter checkpoints: one SEGV tensor record per parameter plus a
//! manifest listing (name, shape, role) in deterministic order, and the
//! run configuration needed to rebuild the networks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{decode_record, encode_record, Voxels};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const TENSOR_DIR: &str = "tensors";

/// Write `config_text` and the named tensors under `dir`, replacing any
/// previous checkpoint there.
pub fn save_records(
    dir: &Path,
    config_text: &str,
    named: &[(String, &'static str, Tensor<f32>)],
) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir.join(TENSOR_DIR))?;
    fs::write(dir.join(CONFIG_FILE), config_text)?;

    let mut manifest = String::new();
    for (idx, (name, role, tensor)) in named.iter().enumerate() {
        let file = format!("{TENSOR_DIR}/{idx:04}.segv");
        let shape = tensor.shape();
        let meta = vec![
            ("name".to_string(), name.clone()),
            ("role".to_string(), role.to_string()),
        ];
        let bytes = encode_record(&shape, &Voxels::F32(tensor.to_vec()), &meta);
        fs::write(dir.join(&file), bytes)?;
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name}\t{}\t{role}\t{file}\n", dims.join("x")));
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

pub fn load_config_text(dir: &Path) -> Result<String> {
    fs::read_to_string(dir.join(CONFIG_FILE))
        .map_err(|e| Error::data(format!("cannot read checkpoint config in {}: {e}", dir.display())))
}

/// Load every tensor record, keyed by its manifest name.
pub fn load_records(dir: &Path) -> Result<HashMap<String, (Vec<usize>, Vec<f32>)>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::data(format!("cannot read checkpoint manifest in {}: {e}", dir.display())))?;
    let mut out = HashMap::new();
    for line in manifest.lines().filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::data(format!("malformed checkpoint manifest line: {line}")));
        }
        let (name, file) = (fields[0], fields[3]);
        let path = dir.join(file);
        let bytes = fs::read(&path)?;
        let rec = decode_record(&bytes, &path)?;
        let values = match rec.voxels {
            Voxels::F32(v) => v,
            Voxels::U8(_) => {
                return Err(Error::data(format!("checkpoint record {name} is not f32")))
            }
        };
        out.insert(name.to_string(), (rec.dims, values));
    }
    Ok(out)
}

/// Copy loaded record values into an assembled network's tensors.
pub fn restore_named(
    records: &HashMap<String, (Vec<usize>, Vec<f32>)>,
    named: &[(String, &'static str, Tensor<f32>)],
) -> Result<()> {
    for (name, _, tensor) in named {
        let (dims, values) = records.get(name).ok_or_else(|| {
            Error::data(format!("checkpoint is missing tensor record '{name}'"))
        })?;
        if *dims != tensor.shape() {
            return Err(Error::data(format!(
                "checkpoint record '{name}' has shape {dims:?}, expected {:?}",
                tensor.shape()
            )));
        }
        tensor.copy_from(values);
    }
    Ok(())
}
