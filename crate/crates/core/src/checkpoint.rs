//! Model checkpoint file.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "CDECF-CK"
//! version    u16
//! config     u64 length + UTF-8 JSON of ModelConfig
//! tensors    u32 count, then per tensor:
//!              u32 name length + UTF-8 name
//!              u32 rank, rank × u64 dims
//!              prod(dims) × f32
//! ```
//!
//! Tensors: `user_embeddings` (U×d), `item_embeddings` (I×d), and either
//! `controller.{w1,b1,w2,b2}` or `node_weights` depending on the variant.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::dataset::{read_u16, read_u32, read_u64};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelState};
use crate::ode::WeightController;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CDECF-CK";
pub const CHECKPOINT_VERSION: u16 = 1;

struct Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    fn new(name: &str, dims: &[usize], data: impl IntoIterator<Item = f64>) -> Self {
        Tensor {
            name: name.to_string(),
            dims: dims.to_vec(),
            data: data.into_iter().collect(),
        }
    }
}

fn tensors_of(model: &Model) -> Vec<Tensor> {
    let e = &model.state.embeddings;
    let nu = model.num_users();
    let d = e.ncols();
    let mut out = vec![
        Tensor::new("user_embeddings", &[nu, d], e.slice(s![..nu, ..]).iter().copied()),
        Tensor::new(
            "item_embeddings",
            &[e.nrows() - nu, d],
            e.slice(s![nu.., ..]).iter().copied(),
        ),
    ];
    if let Some(c) = &model.state.controller {
        out.push(Tensor::new(
            "controller.w1",
            &[c.w1.nrows(), c.w1.ncols()],
            c.w1.iter().copied(),
        ));
        out.push(Tensor::new("controller.b1", &[c.b1.len()], c.b1.iter().copied()));
        out.push(Tensor::new("controller.w2", &[c.w2.len()], c.w2.iter().copied()));
        out.push(Tensor::new("controller.b2", &[1], [c.b2]));
    }
    if let Some(w) = &model.state.node_weights {
        out.push(Tensor::new("node_weights", &[w.len()], w.iter().copied()));
    }
    out
}

pub fn write_checkpoint<W: Write>(model: &Model, w: &mut W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let json = serde_json::to_string(&model.config)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    let tensors = tensors_of(model);
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for d in &t.dims {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

fn take(tensors: &mut Vec<Tensor>, name: &str, rank: usize) -> Result<Tensor> {
    let pos = tensors
        .iter()
        .position(|t| t.name == name)
        .ok_or_else(|| bad(format!("missing tensor {name}")))?;
    let t = tensors.remove(pos);
    if t.dims.len() != rank {
        return Err(bad(format!("tensor {name} has rank {}, expected {rank}", t.dims.len())));
    }
    Ok(t)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::IncompatibleCheckpoint(msg.into())
}

const MAX_ELEMENTS: u64 = 1 << 34;

fn read_string<R: Read>(r: &mut R, len: u64) -> Result<String> {
    if len > MAX_ELEMENTS {
        return Err(bad("implausible string length"));
    }
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf)?;
    if buf.len() as u64 != len {
        return Err(bad("truncated file"));
    }
    String::from_utf8(buf).map_err(|_| bad("text block is not UTF-8"))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model> {
    read_inner(r).map_err(|e| match e {
        Error::Io(io) if io.kind() == io::ErrorKind::UnexpectedEof => bad("truncated file"),
        Error::Json(j) => bad(format!("config block: {j}")),
        other => other,
    })
}

fn read_inner<R: Read>(r: &mut R) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = read_u16(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let json_len = read_u64(r)?;
    let json = read_string(r, json_len)?;
    let config: ModelConfig = serde_json::from_str(&json)?;

    let count = read_u32(r)?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as u64;
        let name = read_string(r, name_len)?;
        let rank = read_u32(r)? as usize;
        if rank > 4 {
            return Err(bad(format!("tensor {name} has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(r)?);
        }
        let len = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_ELEMENTS);
        let len = len.ok_or_else(|| bad(format!("tensor {name} is implausibly large")))?;
        let mut data = Vec::with_capacity((len as usize).min(1 << 20));
        let mut b = [0u8; 4];
        for _ in 0..len {
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        tensors.push(Tensor::new(
            &name,
            &dims.iter().map(|&d| d as usize).collect::<Vec<_>>(),
            data,
        ));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(bad("trailing bytes"));
    }

    let matrix = |t: Tensor| -> Result<Array2<f64>> {
        Array2::from_shape_vec((t.dims[0], t.dims[1]), t.data).map_err(|e| bad(e.to_string()))
    };
    let users = matrix(take(&mut tensors, "user_embeddings", 2)?)?;
    let items = matrix(take(&mut tensors, "item_embeddings", 2)?)?;
    if users.ncols() != items.ncols() {
        return Err(bad("user and item embeddings differ in width"));
    }
    let num_users = users.nrows();
    let embeddings = concatenate(Axis(0), &[users.view(), items.view()]).map_err(|e| bad(e.to_string()))?;

    let controller = if tensors.iter().any(|t| t.name.starts_with("controller.")) {
        let w1 = matrix(take(&mut tensors, "controller.w1", 2)?)?;
        let b1 = Array1::from(take(&mut tensors, "controller.b1", 1)?.data);
        let w2 = Array1::from(take(&mut tensors, "controller.w2", 1)?.data);
        let b2 = take(&mut tensors, "controller.b2", 1)?.data;
        if b2.len() != 1 || b1.len() != w1.nrows() || w2.len() != w1.nrows() {
            return Err(bad("controller tensors have inconsistent shapes"));
        }
        Some(WeightController { w1, b1, w2, b2: b2[0] })
    } else {
        None
    };
    let node_weights = if tensors.iter().any(|t| t.name == "node_weights") {
        Some(Array1::from(take(&mut tensors, "node_weights", 1)?.data))
    } else {
        None
    };
    if let Some(extra) = tensors.first() {
        return Err(bad(format!("unexpected tensor {}", extra.name)));
    }
    let state = ModelState {
        embeddings,
        controller,
        node_weights,
    };
    Model::from_parts(config, state, num_users).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn model(variant: Variant) -> Model {
        let cfg = ModelConfig {
            variant,
            embedding_dim: 4,
            ..ModelConfig::default()
        };
        Model::new(cfg, 3, 5).unwrap()
    }

    #[test]
    fn round_trip_each_variant() {
        for v in Variant::ALL {
            let m = model(v);
            let mut buf = Vec::new();
            write_checkpoint(&m, &mut buf).unwrap();
            let back = read_checkpoint(&mut buf.as_slice()).unwrap();
            assert_eq!(back.config, m.config);
            assert_eq!(back.num_users(), 3);
            assert_eq!(back.num_items(), 5);
            for (a, b) in back.state.embeddings.iter().zip(m.state.embeddings.iter()) {
                assert_eq!(*a, *b as f32 as f64);
            }
            assert_eq!(back.state.controller.is_some(), v == Variant::Controlled);
            assert_eq!(back.state.node_weights.is_some(), v == Variant::DiscreteWeight);
        }
    }

    #[test]
    fn corrupted_files_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&model(Variant::Controlled), &mut buf).unwrap();
        for cut in [0, 5, 20, buf.len() - 2] {
            assert!(matches!(
                read_checkpoint(&mut &buf[..cut]),
                Err(Error::IncompatibleCheckpoint(_))
            ));
        }
        let mut wrong = buf.clone();
        wrong[3] ^= 0xff;
        assert!(read_checkpoint(&mut wrong.as_slice()).is_err());
        let mut json = buf.clone();
        json[18] = b'#';
        assert!(matches!(
            read_checkpoint(&mut json.as_slice()),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }
}
