//! Binary checkpoint container. All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes   "HRMCKPT1"
//! version    u32       CHECKPOINT_VERSION
//! config_len u32       byte length of the JSON model config that follows
//! config     bytes     UTF-8 JSON echo of ModelConfig
//! count      u32       number of tensor records
//! record × count:
//!   name_len u32, name UTF-8 bytes
//!   decay    u8        1 when weight decay applies
//!   ndim     u32, dims u32 × ndim
//!   values   f32 × product(dims), row-major
//! ```
//!
//! The learned parameters come first, followed by the two initial state
//! vectors under the names `state.init_l` and `state.init_h`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{HrmModel, ModelConfig, ModelError, ParamStore, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HRMCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

const INIT_L: &str = "state.init_l";
const INIT_H: &str = "state.init_h";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, decay: bool, t: &Tensor<T>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    out.push(u8::from(decay));
    put_u32(out, t.shape().len())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint<T: Scalar>(model: &HrmModel<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    put_u32(&mut out, model.params.len() + 2)?;
    for p in model.params.iter() {
        put_tensor(&mut out, &p.name, p.decay, &p.value)?;
    }
    let (l, h) = model.initial_state_vectors();
    for (name, v) in [(INIT_L, l), (INIT_H, h)] {
        put_tensor(&mut out, name, false, &Tensor::new(vec![v.len()], v.to_vec())?)?;
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(model: &HrmModel<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| ModelError::Checkpoint(format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn remaining(&self) -> usize {
        self.0.get_ref().len() - self.0.position() as usize
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<HrmModel<f32>> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("not an HRM checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}; expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = r.u32("config length")?;
    let config: ModelConfig = serde_json::from_slice(&r.bytes(len, "config")?)
        .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    let (mut init_l, mut init_h) = (None, None);
    for _ in 0..count {
        let n = r.u32("name length")?;
        let name = String::from_utf8(r.bytes(n, "name")?)
            .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?;
        let decay = r.bytes(1, "decay flag")?[0] != 0;
        let ndim = r.u32("rank")?;
        let shape = (0..ndim).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        if numel.saturating_mul(4) > r.remaining() {
            return Err(ModelError::Checkpoint(format!("truncated while reading {name}")));
        }
        let raw = r.bytes(numel * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data)?;
        match name.as_str() {
            INIT_L => init_l = Some(t.into_data()),
            INIT_H => init_h = Some(t.into_data()),
            _ => {
                store.add(name, t, decay);
            }
        }
    }
    if r.remaining() != 0 {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    let missing = |n: &str| ModelError::Checkpoint(format!("missing tensor {n}"));
    let model = HrmModel::assemble(
        config,
        store,
        init_l.ok_or_else(|| missing(INIT_L))?,
        init_h.ok_or_else(|| missing(INIT_H))?,
    )?;
    model.check_shapes()?;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<HrmModel<f32>> {
    decode_checkpoint(&fs::read(path)?)
}
