//! P2D1 checkpoint format: magic `P2D1`, length-prefixed ModelConfig JSON,
//! then named parameter tensors (name, shape, f32 little-endian values) in
//! name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::model::{DynamicsModel, ModelConfig, TrainMeta};
use crate::nn::tensor::Tensor;

const MAGIC: &[u8; 4] = b"P2D1";

pub fn save_checkpoint(model: &DynamicsModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let config_json = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);
    // BTreeMap iteration gives a stable name order
    for (name, tensor) in model.params() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

fn take<'b>(buf: &'b [u8], pos: &mut usize, n: usize, path: &str) -> Result<&'b [u8]> {
    if *pos + n > buf.len() {
        return Err(Error::format(path, "truncated checkpoint"));
    }
    let s = &buf[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn take_u32(buf: &[u8], pos: &mut usize, path: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(
        take(buf, pos, 4, path)?.try_into().unwrap(),
    ))
}

pub fn load_checkpoint(path: &Path) -> Result<DynamicsModel> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    let mut pos = 0usize;
    if take(&buf, &mut pos, 4, &p)? != MAGIC {
        return Err(Error::format(p.clone(), "bad magic"));
    }
    let cfg_len = take_u32(&buf, &mut pos, &p)? as usize;
    let config: ModelConfig = serde_json::from_slice(take(&buf, &mut pos, cfg_len, &p)?)?;
    let mut params = BTreeMap::new();
    while pos < buf.len() {
        let name_len = take_u32(&buf, &mut pos, &p)? as usize;
        let name = String::from_utf8(take(&buf, &mut pos, name_len, &p)?.to_vec())
            .map_err(|_| Error::format(p.clone(), "non-utf8 tensor name"))?;
        let ndim = take_u32(&buf, &mut pos, &p)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(take_u32(&buf, &mut pos, &p)? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = take(&buf, &mut pos, n * 4, &p)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    DynamicsModel::from_parts(config, params, TrainMeta::default())
}
