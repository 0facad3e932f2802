//! Checkpoints: one flat binary of little-endian f64 parameter values plus a
//! text manifest listing name, shape, and offset (in values) per parameter.
//! Loading verifies the manifest against the live model before touching any
//! parameter, so a mismatched checkpoint never half-applies.

use super::{ForecastModel, ModelError};
use std::fs;
use std::io::Write;
use std::path::Path;

fn ck<E: std::fmt::Display>(what: &str, e: E) -> ModelError {
    ModelError::Checkpoint { detail: format!("{what}: {e}") }
}

/// Write `params.bin` and `params.manifest` into `dir`.
pub fn save_checkpoint(model: &ForecastModel, dir: &Path) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(|e| ck("create checkpoint dir", e))?;
    let mut manifest = String::new();
    let mut bin: Vec<u8> = Vec::with_capacity(model.param_count() * 8);
    let mut offset = 0usize;
    for p in model.params() {
        let dims: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{}\t{}\t{}\n", p.name, dims.join("x"), offset));
        for v in p.tensor.data() {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        offset += p.tensor.numel();
    }
    let mut f = fs::File::create(dir.join("params.bin")).map_err(|e| ck("write params.bin", e))?;
    f.write_all(&bin).map_err(|e| ck("write params.bin", e))?;
    fs::write(dir.join("params.manifest"), manifest).map_err(|e| ck("write manifest", e))?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`] into a structurally
/// identical model.
pub fn load_checkpoint(model: &mut ForecastModel, dir: &Path) -> Result<(), ModelError> {
    let manifest_path = dir.join("params.manifest");
    let manifest = fs::read_to_string(&manifest_path)
        .map_err(|e| ck(&format!("read {}", manifest_path.display()), e))?;
    let bin = fs::read(dir.join("params.bin")).map_err(|e| ck("read params.bin", e))?;
    if bin.len() % 8 != 0 {
        return Err(ck("params.bin", "length is not a multiple of 8"));
    }
    let values: Vec<f64> = bin
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    struct Entry {
        name: String,
        shape: Vec<usize>,
        offset: usize,
    }
    let mut entries = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        let (name, dims, off) = (it.next(), it.next(), it.next());
        let (Some(name), Some(dims), Some(off)) = (name, dims, off) else {
            return Err(ck("manifest", format!("malformed line {}", lineno + 1)));
        };
        let shape: Result<Vec<usize>, _> = dims.split('x').map(str::parse).collect();
        let shape = shape.map_err(|e| ck("manifest", format!("line {}: {e}", lineno + 1)))?;
        let offset: usize =
            off.parse().map_err(|e| ck("manifest", format!("line {}: {e}", lineno + 1)))?;
        entries.push(Entry { name: name.to_string(), shape, offset });
    }

    {
        let live = model.params();
        if entries.len() != live.len() {
            return Err(ck(
                "manifest",
                format!("{} entries for a model with {} parameters", entries.len(), live.len()),
            ));
        }
        for (e, p) in entries.iter().zip(&live) {
            if e.name != p.name {
                return Err(ck(
                    "manifest",
                    format!("parameter `{}` where model expects `{}`", e.name, p.name),
                ));
            }
            if e.shape != p.tensor.shape() {
                return Err(ck(
                    "manifest",
                    format!("parameter `{}` has shape {:?}, model expects {:?}",
                        e.name, e.shape, p.tensor.shape()),
                ));
            }
            let n: usize = e.shape.iter().product();
            if e.offset + n > values.len() {
                return Err(ck("params.bin", format!("parameter `{}` exceeds file size", e.name)));
            }
        }
    }
    for (e, p) in entries.iter().zip(model.params_mut()) {
        let n = p.tensor.numel();
        p.tensor.data_mut().copy_from_slice(&values[e.offset..e.offset + n]);
    }
    Ok(())
}
