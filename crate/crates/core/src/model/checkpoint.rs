//! Checkpoint container ("CTS-CKPT1").
//!
//! A UTF-8 manifest followed by the concatenated raw tensors:
//!
//! ```text
//! CTS-CKPT1
//! config.<key> = <value>        one line per model config field
//! meta.epoch = <n>
//! meta.val_loss = <f64>
//! meta.seed = <u64>
//! <tensor path> = <byte offset>/<d0>x<d1>x...
//! end
//! <CTS-T1 records>
//! ```
//!
//! Offsets are relative to the first byte after the `end` line.

use std::path::Path;

use super::config::ModelConfig;
use super::network::SegModel;
use crate::error::{CtsError, Result};
use crate::tensor::io::{decode, encode};
use crate::tensor::Scalar;

pub const HEADER: &str = "CTS-CKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_loss: f64,
    pub seed: u64,
}

fn render_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

pub fn to_bytes<T: Scalar>(model: &SegModel<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut text = format!("{HEADER}\n");
    for (k, v) in model.config().to_pairs() {
        text.push_str(&format!("config.{k} = {v}\n"));
    }
    text.push_str(&format!("meta.epoch = {}\n", meta.epoch));
    text.push_str(&format!("meta.val_loss = {}\n", meta.val_loss));
    text.push_str(&format!("meta.seed = {}\n", meta.seed));
    let mut payload = Vec::new();
    for (name, t) in model.store.iter() {
        text.push_str(&format!("{} = {}/{}\n", name, payload.len(), render_shape(t.shape())));
        encode(t, &mut payload)?;
    }
    text.push_str("end\n");
    let mut out = text.into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(SegModel<T>, CheckpointMeta)> {
    let bad = |msg: String| CtsError::data(format!("checkpoint: {msg}"));
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("manifest is not terminated by `end`".into()))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line.to_string());
    }
    let payload = &bytes[pos..];
    if lines.first().map(String::as_str) != Some(HEADER) {
        return Err(bad(format!("missing `{HEADER}` header")));
    }

    let mut config = ModelConfig::default();
    let (mut epoch, mut val_loss, mut seed) = (None, None, None);
    let mut tensors = Vec::new();
    for line in &lines[1..] {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| bad(format!("malformed manifest line `{line}`")))?;
        if let Some(key) = k.strip_prefix("config.") {
            if !config.set(key, v)? {
                return Err(bad(format!("unknown config key `{key}`")));
            }
        } else if let Some(key) = k.strip_prefix("meta.") {
            let parse_err = || bad(format!("invalid meta value `{line}`"));
            match key {
                "epoch" => epoch = Some(v.parse().map_err(|_| parse_err())?),
                "val_loss" => val_loss = Some(v.parse().map_err(|_| parse_err())?),
                "seed" => seed = Some(v.parse().map_err(|_| parse_err())?),
                _ => return Err(bad(format!("unknown meta key `{key}`"))),
            }
        } else {
            let (off, shape) = v
                .split_once('/')
                .ok_or_else(|| bad(format!("tensor entry `{line}` lacks offset/shape")))?;
            let off: usize = off.parse().map_err(|_| bad(format!("bad offset in `{line}`")))?;
            let shape = parse_shape(shape).ok_or_else(|| bad(format!("bad shape in `{line}`")))?;
            tensors.push((k.to_string(), off, shape));
        }
    }
    let meta = CheckpointMeta {
        epoch: epoch.ok_or_else(|| bad("missing meta.epoch".into()))?,
        val_loss: val_loss.ok_or_else(|| bad("missing meta.val_loss".into()))?,
        seed: seed.ok_or_else(|| bad("missing meta.seed".into()))?,
    };

    let mut model = SegModel::<T>::new(config, meta.seed)?;
    if tensors.len() != model.store.len() {
        return Err(bad(format!(
            "{} tensors stored, architecture has {}",
            tensors.len(),
            model.store.len()
        )));
    }
    for (name, off, shape) in tensors {
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| bad(format!("unexpected tensor `{name}`")))?;
        let slice = payload
            .get(off..)
            .ok_or_else(|| bad(format!("offset of `{name}` past end of payload")))?;
        let (t, _) = decode::<T>(slice)?;
        let target = model.store.get_mut(id);
        if t.shape() != shape.as_slice() || t.shape() != target.shape() {
            return Err(bad(format!(
                "`{name}` has shape {:?}, manifest {:?}, architecture {:?}",
                t.shape(),
                shape,
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(t.data());
    }
    Ok((model, meta))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &SegModel<T>, meta: &CheckpointMeta) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    std::fs::write(path, bytes).map_err(|e| CtsError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(SegModel<T>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| CtsError::io(path, e))?;
    from_bytes(&bytes)
}
