//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "SRILCKPT"
//! version    u32      1
//! arch id    u32 length + UTF-8 ("mlp-s" | "conv-s")
//! input      u32 rank + rank × u64 per-sample input extents
//! classes    u64
//! k          u64      proxies per class
//! margin     f64
//! arrays     u32 count, then per array:
//!              u32 name length + UTF-8 name
//!              u32 rank + rank × u64 extents
//!              product(extents) × f64 values
//! ```

use std::io::{self, Read, Write};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Architecture, Backbone, LscHead, Model, Stage};

const MAGIC: &[u8; 8] = b"SRILCKPT";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn put_dims(w: &mut impl Write, dims: &[usize]) -> io::Result<()> {
    put_u32(w, dims.len() as u32)?;
    dims.iter().try_for_each(|&d| put_u64(w, d as u64))
}

pub fn write_checkpoint<S: Scalar>(model: &Model<S>, w: &mut impl Write) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_str(w, model.arch().id())?;
    put_dims(w, &model.arch().input_shape())?;
    put_u64(w, model.num_classes() as u64)?;
    put_u64(w, model.head.k() as u64)?;
    w.write_all(&model.head.margin.as_f64().to_le_bytes())?;
    let names = model.param_names();
    let params = model.params();
    put_u32(w, params.len() as u32)?;
    for (name, p) in names.iter().zip(params) {
        put_str(w, name)?;
        put_dims(w, p.shape())?;
        for v in p.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        if len > 1 << 16 {
            return Err(CheckpointError::Malformed(format!("string length {len}")));
        }
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    fn dims(&mut self) -> Result<Vec<usize>, CheckpointError> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("rank {rank}")));
        }
        (0..rank).map(|_| Ok(self.u64()? as usize)).collect()
    }
}

pub fn read_checkpoint<S: Scalar>(r: &mut impl Read) -> Result<Model<S>, CheckpointError> {
    let mut rd = Reader { inner: r };
    if &rd.bytes::<8>()? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let id = rd.string()?;
    let input = rd.dims()?;
    let arch = Architecture::from_input_shape(&id, &input)
        .ok_or_else(|| CheckpointError::Malformed(format!("architecture {id} with input {input:?}")))?;
    let classes = rd.u64()? as usize;
    let k = rd.u64()? as usize;
    let margin = rd.f64()?;
    let count = rd.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name = rd.string()?;
        let dims = rd.dims()?;
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| Ok(S::lit(rd.f64()?)))
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        arrays.push((name, t));
    }
    let stages = arch.num_stages();
    if arrays.len() != 2 * stages + 2 {
        return Err(CheckpointError::Malformed(format!("{} arrays", arrays.len())));
    }
    let mut it = arrays.into_iter();
    let mut expect = |want: &str| {
        let (name, t) = it.next().expect("length checked");
        if name != want {
            return Err(CheckpointError::Malformed(format!("expected {want}, found {name}")));
        }
        Ok(t)
    };
    let mut stage_list = Vec::with_capacity(stages);
    for i in 0..stages {
        let weight = expect(&format!("stage{i}.weight"))?;
        let bias = expect(&format!("stage{i}.bias"))?;
        stage_list.push(Stage {
            weight,
            bias,
            relu: i + 1 < stages,
        });
    }
    let proxies = expect("head.proxies")?;
    let eta = expect("head.eta")?;
    if proxies.shape() != [classes, k, arch.embed_dim()] || eta.numel() != 1 {
        return Err(CheckpointError::Malformed(format!(
            "head shapes {:?} / {:?} disagree with header",
            proxies.shape(),
            eta.shape()
        )));
    }
    Ok(Model {
        backbone: Backbone {
            arch,
            stages: stage_list,
        },
        head: LscHead {
            proxies,
            eta,
            margin: S::lit(margin),
        },
    })
}
