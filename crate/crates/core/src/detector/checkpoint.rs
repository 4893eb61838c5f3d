//! Binary checkpoint: magic, format version, JSON header, little-endian f64
//! payload (parameters in header order, then optimizer velocity if present).

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task_stream::ClassId;
use crate::tensor::Tensor;

use super::model::{DetectorConfig, DetectorModel};
use super::optim::SgdMomentum;
use super::params::{ParamPartition, ParamRole};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WARPDET\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    role: ParamRole,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: DetectorConfig,
    seen_classes: BTreeSet<ClassId>,
    partition: ParamPartition,
    params: Vec<ParamEntry>,
    momentum: Option<f64>,
}

pub fn checkpoint_bytes(model: &DetectorModel, optimizer: Option<&SgdMomentum>) -> Result<Vec<u8>> {
    let params = model.params();
    let header = Header {
        config: model.config().clone(),
        seen_classes: model.seen_classes().clone(),
        partition: params.partition(),
        params: params
            .iter()
            .map(|p| ParamEntry { name: p.name.clone(), role: p.role, shape: p.value.shape().to_vec() })
            .collect(),
        momentum: optimizer.map(|o| o.momentum),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 16 + params.num_scalars() * 16);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut push = |t: &Tensor| t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    params.values().for_each(&mut push);
    if let Some(o) = optimizer {
        o.velocity().iter().for_each(&mut push);
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &DetectorModel, optimizer: Option<&SgdMomentum>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, checkpoint_bytes(model, optimizer)?)?;
    Ok(())
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), message: message.into() }
}

pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<(DetectorModel, Option<SgdMomentum>)> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| parse_err(path, "truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(parse_err(path, "not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| parse_err(path, "truncated header"))?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(parse_err(path, format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| parse_err(path, "truncated header"))?;
    let len = u64::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(parse_err(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&r[..len]).map_err(|e| parse_err(path, e.to_string()))?;
    let mut payload = &r[len..];
    let mut model = DetectorModel::new(header.config)?;
    if header.params.len() != model.params().len() {
        return Err(parse_err(path, "parameter count does not match configuration"));
    }
    let mut read_tensor = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if payload.len() < n * 8 {
            return Err(parse_err(path, "truncated payload"));
        }
        let data =
            payload[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        payload = &payload[n * 8..];
        Ok(Tensor::from_vec(shape, data))
    };
    for (entry, p) in header.params.iter().zip(model.params_mut().iter_mut()) {
        if entry.name != p.name || entry.role != p.role || entry.shape != p.value.shape() {
            return Err(parse_err(path, format!("parameter `{}` does not match configuration", entry.name)));
        }
        p.value = read_tensor(&entry.shape)?;
    }
    let optimizer = match header.momentum {
        Some(m) => {
            let velocity = header.params.iter().map(|e| read_tensor(&e.shape)).collect::<Result<Vec<_>>>()?;
            Some(SgdMomentum::from_parts(m, velocity))
        }
        None => None,
    };
    if !payload.is_empty() {
        return Err(parse_err(path, "trailing bytes after payload"));
    }
    header.partition.validate(model.params()).map_err(|e| parse_err(path, e.to_string()))?;
    model.set_seen_classes(header.seen_classes)?;
    Ok((model, optimizer))
}

pub fn load_checkpoint(path: &Path) -> Result<(DetectorModel, Option<SgdMomentum>)> {
    let bytes = std::fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    checkpoint_from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{apply_task_update, Gradients};

    #[test]
    fn round_trip_is_exact() {
        let mut m = DetectorModel::new(DetectorConfig { num_classes: 5, init_seed: 9, ..Default::default() }).unwrap();
        m.add_seen_classes([ClassId(2), ClassId(4)]).unwrap();
        let mut opt = SgdMomentum::new(m.params(), 0.9);
        let mut g = Gradients::all(m.params());
        g.tensors_mut().iter_mut().for_each(|t| t.fill(0.3));
        apply_task_update(&mut m, &mut opt, &g, 0.01).unwrap();
        let bytes = checkpoint_bytes(&m, Some(&opt)).unwrap();
        let (m2, o2) = checkpoint_from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(m2, m);
        assert_eq!(o2.unwrap(), opt);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let m = DetectorModel::new(DetectorConfig::default()).unwrap();
        let bytes = checkpoint_bytes(&m, None).unwrap();
        let p = Path::new("x.ckpt");
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 8], p).is_err());
        assert!(checkpoint_from_bytes(b"nonsense", p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(checkpoint_from_bytes(&extra, p).is_err());
    }
}
