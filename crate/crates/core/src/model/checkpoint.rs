//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CLPLCKPT"
//! version  u32
//! cfg_len  u64      followed by that many bytes of JSON (ModelConfig)
//! n_params u64
//! repeated per parameter, in name order:
//!   name_len u64, name bytes (UTF-8)
//!   ndim u64, dims u64 × ndim
//!   payload f64 × product(dims)
//! ```
//!
//! Alongside the binary file a plain-text manifest (`<path>.manifest.txt`)
//! lists every parameter name and shape for quick inspection.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::Arr;

const MAGIC: &[u8; 8] = b"CLPLCKPT";
const VERSION: u32 = 1;

pub fn save(path: &Path, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let cfg_json = serde_json::to_vec(&model.cfg)?;
    w.write_u64::<LittleEndian>(cfg_json.len() as u64)?;
    w.write_all(&cfg_json)?;
    w.write_u64::<LittleEndian>(model.params.len() as u64)?;
    for (name, value) in model.params.iter() {
        w.write_u64::<LittleEndian>(name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        w.write_u64::<LittleEndian>(value.ndim() as u64)?;
        for &d in value.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in value.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;

    let manifest_path = manifest_path(path);
    let mut m = BufWriter::new(File::create(manifest_path)?);
    writeln!(m, "version {VERSION}")?;
    writeln!(m, "params {}", model.params.len())?;
    for (name, value) in model.params.iter() {
        let dims: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
        writeln!(m, "{name} [{}]", dims.join(","))?;
    }
    m.flush()?;
    Ok(())
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    std::path::PathBuf::from(s)
}

pub fn load(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::checkpoint(format!("bad magic in {}", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.read_u64::<LittleEndian>()? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
    let n_params = r.read_u64::<LittleEndian>()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name_len = r.read_u64::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::checkpoint(format!("bad parameter name: {e}")))?;
        let ndim = r.read_u64::<LittleEndian>()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        let arr = Arr::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::checkpoint(format!("bad tensor shape: {e}")))?;
        params.insert(name, arr);
    }
    Ok(Model { cfg, params })
}
