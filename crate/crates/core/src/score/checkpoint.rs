//! Binary checkpoints for [`TinyNet`].
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      4 bytes  "HLCK"
//! version    u32      2
//! channels   u32
//! dim        u32
//! time_dim   u32
//! activation u32      0 identity, 1 relu, 2 silu, 3 tanh
//! skip       u32      0 none, 1 followed by mean f64, std f64  (absent in version 1)
//! pointwise  u32      hidden width of the per-element branch   (absent in version 1)
//! layers     u32
//! shapes     layers × (in u32, out u32)
//! params     f32 × Σ(in·out + out) + per-element branch
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::score::tinynet::{Activation, Architecture, Skip, TinyNet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HLCK";
pub const CHECKPOINT_VERSION: u32 = 2;

pub fn write_checkpoint<W: Write>(net: &TinyNet, mut out: W) -> Result<()> {
    let arch = net.architecture();
    let shapes = arch.layer_shapes();
    out.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        CHECKPOINT_VERSION,
        arch.channels as u32,
        arch.dim as u32,
        arch.time_dim as u32,
        arch.activation.code(),
        arch.skip.is_some() as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    if let Some(sk) = arch.skip {
        out.write_all(&sk.mean.to_le_bytes())?;
        out.write_all(&sk.std.to_le_bytes())?;
    }
    out.write_all(&(arch.pointwise as u32).to_le_bytes())?;
    out.write_all(&(shapes.len() as u32).to_le_bytes())?;
    for (i, o) in shapes {
        out.write_all(&(i as u32).to_le_bytes())?;
        out.write_all(&(o as u32).to_le_bytes())?;
    }
    for p in net.params() {
        out.write_all(&p.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::BadCheckpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<TinyNet> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| Error::BadCheckpoint("missing magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != 1 && version != CHECKPOINT_VERSION {
        return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
    }
    let channels = read_u32(&mut input)? as usize;
    let dim = read_u32(&mut input)? as usize;
    let time_dim = read_u32(&mut input)? as usize;
    let activation = Activation::from_code(read_u32(&mut input)?)
        .ok_or_else(|| Error::BadCheckpoint("unknown activation".into()))?;
    let skip = match if version == 1 { 0 } else { read_u32(&mut input)? } {
        0 => None,
        1 => {
            let mut b = [0u8; 16];
            input.read_exact(&mut b).map_err(|_| Error::BadCheckpoint("truncated skip statistics".into()))?;
            let mean = f64::from_le_bytes(b[..8].try_into().expect("8 bytes"));
            let std = f64::from_le_bytes(b[8..].try_into().expect("8 bytes"));
            Some(Skip { mean, std })
        }
        other => return Err(Error::BadCheckpoint(format!("unknown skip flag {other}"))),
    };
    let pointwise = if version == 1 { 0 } else { read_u32(&mut input)? as usize };
    if pointwise > 1 << 16 {
        return Err(Error::BadCheckpoint(format!("implausible branch width {pointwise}")));
    }
    let layers = read_u32(&mut input)? as usize;
    if layers == 0 || layers > 64 {
        return Err(Error::BadCheckpoint(format!("implausible layer count {layers}")));
    }
    let mut shapes = Vec::with_capacity(layers);
    for _ in 0..layers {
        shapes.push((read_u32(&mut input)? as usize, read_u32(&mut input)? as usize));
    }
    let hidden: Vec<usize> = shapes[..layers - 1].iter().map(|&(_, o)| o).collect();
    let arch = Architecture { dim, time_dim, hidden, activation, channels, skip, pointwise };
    if arch.layer_shapes() != shapes {
        return Err(Error::BadCheckpoint("layer-shape table is inconsistent".into()));
    }
    let count = arch.param_count();
    let mut raw = vec![0u8; count * 4];
    input.read_exact(&mut raw).map_err(|_| Error::BadCheckpoint("truncated parameters".into()))?;
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(Error::BadCheckpoint("trailing bytes".into()));
    }
    let params = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    TinyNet::from_params(arch, params)
}

pub fn save_checkpoint(net: &TinyNet, path: &Path) -> Result<()> {
    write_checkpoint(net, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<TinyNet> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    read_checkpoint(BufReader::new(File::open(path)?))
}
