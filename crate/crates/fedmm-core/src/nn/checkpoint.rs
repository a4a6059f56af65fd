//! Flat, named, shape-annotated parameter checkpoints.
//!
//! Format (JSON, version 1):
//!
//! ```json
//! {
//!   "format": "fedmm-checkpoint",
//!   "version": 1,
//!   "meta": { ... caller-owned metadata ... },
//!   "params": [ {"name": "...", "rows": R, "cols": C, "values": [..R*C..]} ]
//! }
//! ```
//!
//! Values serialize via shortest-round-trip float formatting, so a
//! save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Mat, ParamSet};
use crate::error::{Error, Result};

pub const FORMAT: &str = "fedmm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    meta: serde_json::Value,
    params: Vec<ParamRecord>,
}

pub fn save_params(params: &ParamSet, meta: serde_json::Value, path: &Path) -> Result<()> {
    let records = params
        .params()
        .iter()
        .map(|p| ParamRecord {
            name: p.name.clone(),
            rows: p.value.nrows(),
            cols: p.value.ncols(),
            values: p.value.iter().cloned().collect(),
        })
        .collect();
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        meta,
        params: records,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
    let bytes = fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint {}/{} in {}",
            file.format,
            file.version,
            path.display()
        )));
    }
    let mut params = ParamSet::new();
    for rec in file.params {
        if rec.values.len() != rec.rows * rec.cols {
            return Err(Error::Shape {
                context: format!("checkpoint entry `{}`", rec.name),
                expected: format!("{} values", rec.rows * rec.cols),
                found: format!("{}", rec.values.len()),
            });
        }
        let value = Mat::from_shape_vec((rec.rows, rec.cols), rec.values)
            .expect("length checked above");
        params.add(rec.name, value);
    }
    Ok((params, file.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut params = ParamSet::new();
        params.add("a", array![[0.1 + 0.2, -1.0 / 3.0], [f64::MIN_POSITIVE, 1e300]]);
        params.add("b", array![[2.0_f64.sqrt()]]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_params(&params, serde_json::json!({"k": 1}), &path).unwrap();
        let (loaded, meta) = load_params(&path).unwrap();
        assert_eq!(meta["k"], 1);
        for (orig, got) in params.params().iter().zip(loaded.params()) {
            assert_eq!(orig.name, got.name);
            assert_eq!(orig.value, got.value);
            for (x, y) in orig.value.iter().zip(got.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
