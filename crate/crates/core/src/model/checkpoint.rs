//! Named-tensor container.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "SFL1" version count
//! count × { name_len name_utf8 rank dims[rank] payload[f64 LE × product(dims)] }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFL1";
pub const VERSION: u32 = 1;

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} exceeds u32")))
}

pub fn write_tensors<T: Scalar, W: Write>(mut w: W, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(to_u32(tensors.len(), "tensor count")?)?;
    for (name, t) in tensors {
        w.write_u32::<LittleEndian>(to_u32(name.len(), "name length")?)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(to_u32(t.rank(), "rank")?)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(to_u32(d, "dimension")?)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v.as_f64())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors<T: Scalar, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::lit(r.read_f64::<LittleEndian>()?));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_tensors(std::io::BufWriter::new(f), tensors)
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<T>)>> {
    let f = std::fs::File::open(path)?;
    read_tensors(std::io::BufReader::new(f))
}

/// Optimizer-state tensors carry this prefix in a checkpoint.
pub const OPT_PREFIX: &str = "opt.";

/// Kind and role implied by a parameter name.
///
/// `blocks.3.attn.q.row` → (Multiplier, `attn.q`); `embed.w` → (Matrix,
/// `embed`); `blocks.1.ssm.log_a` → (Vector, `ssm.log_a`).
pub fn infer_kind_role(name: &str) -> (ParamKind, String) {
    let parts: Vec<&str> = name.split('.').collect();
    let last = *parts.last().unwrap_or(&"");
    let kind = match last {
        "w" => ParamKind::Matrix,
        "scalar" | "row" | "col" | "log_scalar" | "log_row" | "log_col" => ParamKind::Multiplier,
        _ => ParamKind::Vector,
    };
    let body: &[&str] = if parts.first() == Some(&"blocks") && parts.len() > 2 {
        &parts[2..]
    } else {
        &parts[..]
    };
    let role = match kind {
        ParamKind::Vector if last == "weight" => body[..body.len() - 1].join("."),
        ParamKind::Vector => body.join("."),
        _ => body[..body.len() - 1].join("."),
    };
    (kind, role)
}

/// Parameter tensors in store order.
pub fn store_tensors<T: Scalar>(store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
    store
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Rebuilds a store from checkpoint tensors, skipping optimizer state.
///
/// Block norm weights are marked frozen when `frozen_norms` is set; all
/// other parameters are trainable.
pub fn store_from_tensors<T: Scalar>(
    tensors: &[(String, Tensor<T>)],
    frozen_norms: bool,
) -> Result<ParamStore<T>> {
    let mut st = ParamStore::new();
    for (name, t) in tensors {
        if name.starts_with(OPT_PREFIX) {
            continue;
        }
        let (kind, role) = infer_kind_role(name);
        let trainable = !(frozen_norms && name.ends_with("norm.weight"));
        st.add(name.clone(), t.clone(), kind, role, trainable)?;
    }
    Ok(st)
}
