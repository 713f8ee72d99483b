//! Checkpoint container: 8-byte magic, `u32` version, `u64` header length,
//! a JSON header, then raw little-endian `f64` blobs in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Group, Mode, ModelBundle, ModelConfig, RunningStats};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FDMXCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    meta: serde_json::Value,
    blobs: Vec<BlobEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    /// `{group}/{param}` for parameters, `bn/{layer}/{mean|var}` for
    /// running statistics.
    name: String,
    shape: Vec<usize>,
}

/// Serializes parameters, running statistics, the model config and caller
/// metadata. The mode is not stored.
pub fn write_checkpoint(model: &ModelBundle, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
        blobs.push(BlobEntry { name, shape });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for g in Group::ALL {
        for (name, t) in model.set(g).iter() {
            push(format!("{}/{name}", g.name()), t.shape().to_vec(), t.data());
        }
    }
    for (layer, r) in &model.bn_running {
        push(format!("bn/{layer}/mean"), vec![r.mean.len()], &r.mean);
        push(format!("bn/{layer}/var"), vec![r.var.len()], &r.var);
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        meta: meta.clone(),
        blobs,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Parses a checkpoint. The returned model is in evaluation mode.
pub fn read_checkpoint(mut bytes: &[u8]) -> Result<(ModelBundle, serde_json::Value)> {
    if take(&mut bytes, 8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().unwrap());
    let header: Header = serde_json::from_slice(take(&mut bytes, hlen as usize, "header")?)?;
    header.config.validate()?;

    let mut sets: [ParamSet; 5] = Default::default();
    let mut bn: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
    for entry in &header.blobs {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f64> = take(&mut bytes, n * 8, &entry.name)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(rest) = entry.name.strip_prefix("bn/") {
            let (layer, which) = rest
                .rsplit_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad blob name `{}`", entry.name)))?;
            let slot = bn.entry(layer.to_string()).or_default();
            match which {
                "mean" => slot.0 = Some(data),
                "var" => slot.1 = Some(data),
                _ => return Err(Error::Checkpoint(format!("bad blob name `{}`", entry.name))),
            }
        } else {
            let (group, name) = entry
                .name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad blob name `{}`", entry.name)))?;
            let g = Group::from_name(group)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter group `{group}`")))?;
            sets[g.index()].insert(name, Tensor::param(entry.shape.clone(), data)?)?;
        }
    }
    if !bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
    }
    let bn_running = bn
        .into_iter()
        .map(|(layer, (mean, var))| match (mean, var) {
            (Some(mean), Some(var)) => Ok((layer, RunningStats { mean, var })),
            _ => Err(Error::Checkpoint(format!(
                "incomplete running statistics for `{layer}`"
            ))),
        })
        .collect::<Result<_>>()?;
    let [params_f, params_h, params_cls, params_fsl, params_dom] = sets;
    let model = ModelBundle {
        config: header.config,
        params_f,
        params_h,
        params_cls,
        params_fsl,
        params_dom,
        bn_running,
        mode: Mode::Eval,
    };
    check_layout(&model)?;
    Ok((model, header.meta))
}

/// Rejects checkpoints whose parameter names or shapes differ from what the
/// stored config would build.
fn check_layout(model: &ModelBundle) -> Result<()> {
    let fresh = ModelBundle::new(model.config.clone(), 0)?;
    for g in Group::ALL {
        let want: Vec<(&str, &[usize])> = fresh.set(g).iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = model.set(g).iter().map(|(n, t)| (n, t.shape())).collect();
        if want != got {
            return Err(Error::Checkpoint(format!(
                "parameter layout of group `{}` does not match its config",
                g.name()
            )));
        }
    }
    let want: Vec<_> = fresh.bn_running.iter().map(|(k, r)| (k, r.mean.len())).collect();
    let got: Vec<_> = model.bn_running.iter().map(|(k, r)| (k, r.mean.len())).collect();
    if want != got || model.bn_running.values().any(|r| r.mean.len() != r.var.len()) {
        return Err(Error::Checkpoint(
            "batch-norm statistics do not match the config".into(),
        ));
    }
    Ok(())
}

pub fn save_checkpoint(model: &ModelBundle, meta: &serde_json::Value, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, serde_json::Value)> {
    read_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut m = ModelBundle::new(ModelConfig::default(), 3).unwrap();
        m.bn_running.get_mut("h.bn1").unwrap().mean[0] = 0.1 + 0.2;
        let meta = serde_json::json!({"epoch": 7, "score": 0.1 + 0.2});
        let bytes = write_checkpoint(&m, &meta).unwrap();
        let (back, meta2) = read_checkpoint(&bytes).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back.bn_running, m.bn_running);
        assert_eq!(write_checkpoint(&back, &meta2).unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let m = ModelBundle::new(ModelConfig::default(), 3).unwrap();
        let bytes = write_checkpoint(&m, &serde_json::Value::Null).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(read_checkpoint(&long).is_err());
    }
}
