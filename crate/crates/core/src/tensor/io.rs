//! Binary tensor container.
//!
//! One record is the 4-byte magic `T4DP`, a little-endian `u32` version,
//! four little-endian `u32` dims `(n, c, h, w)`, then `n·c·h·w` little-endian
//! `f64` values in row-major order. A named bundle is a `.t4dp` file holding
//! consecutive records plus a `.manifest` text sidecar with one
//! `name<TAB>n c h w` line per record, in file order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

pub const MAGIC: [u8; 4] = *b"T4DP";
pub const VERSION: u32 = 1;
const MANIFEST_HEADER: &str = "# t4dp manifest v1";

pub fn encode(t: &Tensor4, out: &mut impl Write) -> Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for d in t.shape().dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn decode(input: &mut impl Read) -> Result<Tensor4> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(input)? as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let mut bytes = vec![0u8; shape.numel() * 8];
    input.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Tensor4::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor4) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor4> {
    decode(&mut BufReader::new(File::open(path)?))
}

fn bundle_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("t4dp"), stem.with_extension("manifest"))
}

/// Writes `<stem>.t4dp` and `<stem>.manifest`.
pub fn save_bundle<'a>(stem: impl AsRef<Path>, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor4)>) -> Result<()> {
    let (bin_path, manifest_path) = bundle_paths(stem.as_ref());
    let mut bin = BufWriter::new(File::create(bin_path)?);
    let mut manifest = BufWriter::new(File::create(manifest_path)?);
    writeln!(manifest, "{MANIFEST_HEADER}")?;
    for (name, t) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Format(format!("invalid tensor name {name:?}")));
        }
        let s = t.shape();
        writeln!(manifest, "{name}\t{} {} {} {}", s.n, s.c, s.h, s.w)?;
        encode(t, &mut bin)?;
    }
    bin.flush()?;
    manifest.flush()?;
    Ok(())
}

/// Reads a bundle written by [`save_bundle`], checking the manifest against
/// every record header.
pub fn load_bundle(stem: impl AsRef<Path>) -> Result<Vec<(String, Tensor4)>> {
    let (bin_path, manifest_path) = bundle_paths(stem.as_ref());
    let manifest = BufReader::new(File::open(manifest_path)?);
    let mut bin = BufReader::new(File::open(bin_path)?);
    let mut out = Vec::new();
    for line in manifest.lines() {
        let line = line?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, dims) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("manifest line without tab: {line:?}")))?;
        let dims: Vec<usize> = dims
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| Error::Format(format!("bad dimension in {line:?}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 4 {
            return Err(Error::Format(format!("expected four dims in {line:?}")));
        }
        let t = decode(&mut bin)?;
        if t.shape().dims()[..] != dims[..] {
            return Err(Error::Format(format!("record for {name} has shape {}, manifest says {dims:?}", t.shape())));
        }
        out.push((name.to_string(), t));
    }
    let mut rest = [0u8; 1];
    if bin.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing records not listed in manifest".into()));
    }
    Ok(out)
}
