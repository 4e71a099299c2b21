//! Checkpoint container: magic `TSPMCKPT`, a u32 version, then records of
//! `(name_len u32, utf-8 name, rank u32, dims u32×rank, f32 data)` until end
//! of file. Optimizer state rides along under the `optim/` prefix:
//! `optim/m/<param>`, `optim/v/<param>` and finally `optim/step` (scalar).
//! The step record must come last, so a file cut at a record boundary is
//! still rejected.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{checked_numel, put_f32s, put_u32, ByteReader};
use crate::error::{Result, TspmError};
use crate::optim::{Moments, ParameterStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TSPMCKPT";
pub const VERSION: u32 = 1;
const OPTIM_PREFIX: &str = "optim/";
// The step counter is stored as an f32 scalar.
const MAX_EXACT_STEP: u64 = 1 << 24;

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    put_f32s(out, data);
}

pub fn encode(store: &ParameterStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for (name, t) in store.iter() {
        if name.starts_with(OPTIM_PREFIX) {
            return Err(TspmError::Contract(format!(
                "parameter name {name} collides with the optimizer prefix"
            )));
        }
        put_record(&mut out, name, t.shape(), t.data());
    }
    let step = store.step_count();
    if step > MAX_EXACT_STEP {
        return Err(TspmError::Contract(format!("step count {step} not representable")));
    }
    for (name, t) in store.iter() {
        if let Some(mo) = store.moments(name) {
            put_record(&mut out, &format!("optim/m/{name}"), t.shape(), &mo.m);
            put_record(&mut out, &format!("optim/v/{name}"), t.shape(), &mo.v);
        }
    }
    put_record(&mut out, "optim/step", &[], &[step as f32]);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ParameterStore> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(TspmError::Format {
            offset: 8,
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut store = ParameterStore::new();
    let mut step = None;
    let mut first: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut second: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    while !r.is_empty() {
        let at = r.offset();
        if step.is_some() {
            return Err(r.error("records after optim/step"));
        }
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.bytes(name_len, "record name")?)
            .map_err(|_| TspmError::Format {
                offset: at + 4,
                reason: "record name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank.saturating_mul(4) > r.remaining() {
            return Err(r.error(format!("rank {rank} of {name} exceeds file size")));
        }
        let dims = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims.contains(&0) {
            return Err(r.error(format!("zero dimension in {name}")));
        }
        let numel = checked_numel(&dims)
            .ok_or_else(|| r.error(format!("dimensions {dims:?} of {name} overflow")))?;
        let data = r.f32s(numel, &name)?;
        if name == "optim/step" {
            if numel != 1 {
                return Err(r.error("optim/step must be a scalar"));
            }
            let v = data[0];
            if !(v >= 0.0 && v.fract() == 0.0 && v as u64 <= MAX_EXACT_STEP) {
                return Err(r.error(format!("optim/step {v} is not a step count")));
            }
            step = Some(v as u64);
        } else if let Some(p) = name.strip_prefix("optim/m/") {
            first.insert(p.to_string(), data);
        } else if let Some(p) = name.strip_prefix("optim/v/") {
            second.insert(p.to_string(), data);
        } else if name.starts_with(OPTIM_PREFIX) {
            return Err(TspmError::Format {
                offset: at,
                reason: format!("unknown optimizer record {name}"),
            });
        } else {
            store
                .insert(name.clone(), Tensor::new(dims, data)?)
                .map_err(|_| TspmError::Format {
                    offset: at,
                    reason: format!("duplicate record {name}"),
                })?;
        }
    }
    let step = step.ok_or_else(|| r.error("missing optim/step record"))?;
    let mut moments = BTreeMap::new();
    for (name, m) in first {
        let v = second.remove(&name).ok_or_else(|| TspmError::Format {
            offset: r.offset(),
            reason: format!("first moment for {name} has no second moment"),
        })?;
        moments.insert(name, Moments { m, v });
    }
    if let Some(name) = second.keys().next() {
        return Err(r.error(format!("second moment for {name} has no first moment")));
    }
    store
        .set_optimizer_state(step, moments)
        .map_err(|e| r.error(e.to_string()))?;
    Ok(store)
}

pub fn write(path: impl AsRef<Path>, store: &ParameterStore) -> Result<()> {
    std::fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<ParameterStore> {
    decode(&std::fs::read(path)?)
}
