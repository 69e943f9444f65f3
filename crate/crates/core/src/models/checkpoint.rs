//! Checkpoint files.
//!
//! ```text
//! magic    b"SBCK"
//! version  u8 (1)
//! length   u32 LE, byte length of the manifest
//! manifest UTF-8, one "<name> <d0>x<d1>x..." line per entry
//! payload  one f64 SBTN container per manifest entry, in manifest order
//! ```
//!
//! Entries are the trainable parameters in build order followed by each
//! batch-norm layer's `running_mean` and `running_var`.

use std::fs;
use std::path::Path;

use crate::container::{self, Dtype};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SBCK";
const VERSION: u8 = 1;

fn entries(model: &Model) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .params()
        .names()
        .iter()
        .cloned()
        .zip(model.params().values().iter().cloned())
        .collect();
    for (name, stats) in model.running_stat_names().iter().zip(model.running_stats()) {
        let n = stats.mean.len();
        out.push((
            format!("{name}.running_mean"),
            Tensor::new(&[n], stats.mean.clone()).expect("non-empty stats"),
        ));
        out.push((
            format!("{name}.running_var"),
            Tensor::new(&[n], stats.var.clone()).expect("non-empty stats"),
        ));
    }
    out
}

fn dims_str(dims: &[usize]) -> String {
    dims.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let entries = entries(model);
    let manifest: String = entries
        .iter()
        .map(|(n, t)| format!("{n} {}\n", dims_str(t.dims())))
        .collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    buf.extend_from_slice(manifest.as_bytes());
    for (_, t) in &entries {
        container::encode(t, Dtype::F64, &mut buf).map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads values into a model built from the same spec.
pub fn load_checkpoint(model: &mut Model, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing SBCK magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(path, format!("unsupported version {}", bytes[4])));
    }
    let mlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let manifest = bytes
        .get(9..9 + mlen)
        .and_then(|m| std::str::from_utf8(m).ok())
        .ok_or_else(|| Error::format(path, "unreadable manifest"))?;
    let expected = entries(model);
    let lines: Vec<&str> = manifest.lines().collect();
    if lines.len() != expected.len() {
        return Err(Error::format(
            path,
            format!("{} entries, model has {}", lines.len(), expected.len()),
        ));
    }
    let mut pos = 9 + mlen;
    let mut loaded = Vec::with_capacity(lines.len());
    for (line, (name, want)) in lines.iter().zip(&expected) {
        let want_line = format!("{name} {}", dims_str(want.dims()));
        if *line != want_line {
            return Err(Error::format(
                path,
                format!("manifest entry {line:?} does not match model entry {want_line:?}"),
            ));
        }
        let (t, _, used) = container::decode(&bytes[pos..]).map_err(|r| Error::format(path, r))?;
        if t.dims() != want.dims() {
            return Err(Error::format(path, format!("payload dims mismatch for {name}")));
        }
        pos += used;
        loaded.push(t);
    }
    if pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after payloads"));
    }

    let nparams = model.params().len();
    let mut iter = loaded.into_iter();
    for i in 0..nparams {
        let id = crate::params::ParamId(i);
        model.params_mut().set(id, iter.next().unwrap())?;
    }
    for stats in model.running_stats_mut() {
        stats.mean = iter.next().unwrap().into_data();
        stats.var = iter.next().unwrap().into_data();
    }
    Ok(())
}
