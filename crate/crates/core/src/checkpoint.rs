//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!   magic "STTCKPT\0", version u32,
//!   config: 10 × u32 (feature_dim, hidden_dim, num_layers, num_heads,
//!     ff_dim, predictor_layers, predictor_dim, joint_dim, chunk_size,
//!     left_chunks) + f64 layer_norm_eps,
//!   branches: count u32, then per branch lang (u32 len + utf8) and
//!     vocab_size u32,
//!   params: count u32, then per param name (u32 len + utf8), trainable u8,
//!     ndim u32, dims u32…, raw f64 values.
//!
//! Values are stored as raw f64 bits, so save→load→save is byte-identical.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::ChunkMaskSpec;
use crate::model::{Branch, BranchId, ModelConfig, ParamSet, TransducerModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"STTCKPT\0";
const VERSION: u32 = 1;

pub fn save(model: &TransducerModel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;

    let c = &model.config;
    for v in [
        c.feature_dim,
        c.hidden_dim,
        c.num_layers,
        c.num_heads,
        c.ff_dim,
        c.predictor_layers,
        c.predictor_dim,
        c.joint_dim,
        c.chunk.chunk_size,
        c.chunk.left_chunks,
    ] {
        w.write_all(&(v as u32).to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&c.layer_norm_eps.to_le_bytes()).map_err(io_err)?;

    w.write_all(&(model.branches().len() as u32).to_le_bytes()).map_err(io_err)?;
    for b in model.branches() {
        write_str(&mut w, &b.lang).map_err(io_err)?;
        w.write_all(&(b.vocab_size as u32).to_le_bytes()).map_err(io_err)?;
    }

    w.write_all(&(model.params().len() as u32).to_le_bytes()).map_err(io_err)?;
    for p in model.params().iter() {
        write_str(&mut w, &p.name).map_err(io_err)?;
        w.write_all(&[u8::from(p.trainable)]).map_err(io_err)?;
        w.write_all(&(p.value.shape.len() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in &p.value.shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        for v in &p.value.values {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<TransducerModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }

    let mut dims = [0usize; 10];
    for d in dims.iter_mut() {
        *d = read_u32(&mut r, path)? as usize;
    }
    let mut eps = [0u8; 8];
    read_exact(&mut r, &mut eps, path)?;
    let config = ModelConfig {
        feature_dim: dims[0],
        hidden_dim: dims[1],
        num_layers: dims[2],
        num_heads: dims[3],
        ff_dim: dims[4],
        predictor_layers: dims[5],
        predictor_dim: dims[6],
        joint_dim: dims[7],
        chunk: ChunkMaskSpec {
            chunk_size: dims[8],
            left_chunks: dims[9],
            num_layers: dims[2],
        },
        layer_norm_eps: f64::from_le_bytes(eps),
    };
    config.validate()?;

    let branch_count = read_u32(&mut r, path)? as usize;
    let mut branches = Vec::with_capacity(branch_count);
    for i in 0..branch_count {
        let lang = read_str(&mut r, path)?;
        let vocab_size = read_u32(&mut r, path)? as usize;
        branches.push(Branch {
            id: BranchId(i),
            lang,
            vocab_size,
        });
    }

    let param_count = read_u32(&mut r, path)? as usize;
    let mut params = ParamSet::default();
    for _ in 0..param_count {
        let name = read_str(&mut r, path)?;
        let mut flag = [0u8; 1];
        read_exact(&mut r, &mut flag, path)?;
        let ndim = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        read_exact(&mut r, &mut buf, path)?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let idx = params.add(name, Tensor::new(shape, values)?);
        params.by_idx_mut(idx).trainable = flag[0] != 0;
    }

    Ok(TransducerModel::restore(config, params, branches))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R, path: &Path) -> Result<String> {
    let len = read_u32(r, path)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, path)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-utf8 string".into()))
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}
