//! Binary tensor files, checkpoints, PGM export and dataset directories.
//!
//! Tensor file: `"BMT1"`, u32 LE rank, rank × u32 LE extents, f32 LE payload
//! in row-major order. Checkpoint: `"BMCK"`, u32 LE record count, then per
//! record a u16 LE name length, the UTF-8 name and an embedded tensor file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::WaldSample;
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"BMT1";
const CHECKPOINT_MAGIC: &[u8; 4] = b"BMCK";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn write_tensor<T: Scalar>(out: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| format_err(format!("extent {d} too large")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.len());
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(format_err(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(format_err(format!("tensor rank {rank} too large")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let len = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= 1 << 31)
        .ok_or_else(|| format_err(format!("tensor extents {shape:?} too large")))?;
    let mut buf = vec![0u8; 4 * len];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::from_vec(&shape, data)
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let t = read_tensor(&mut r)?;
    if !r.is_empty() {
        return Err(format_err(format!("{} trailing bytes", r.len())));
    }
    Ok(t)
}

/// Serialises every named parameter in visiting order.
pub fn write_checkpoint<T: Scalar>(out: &mut impl Write, params: &impl Parameters<T>) -> Result<()> {
    let list = params.param_list();
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(list.len() as u32).to_le_bytes())?;
    for p in list {
        let name = p.name.as_bytes();
        let n = u16::try_from(name.len()).map_err(|_| format_err("parameter name too long"))?;
        out.write_all(&n.to_le_bytes())?;
        out.write_all(name)?;
        write_tensor(out, p.tensor)?;
    }
    Ok(())
}

/// Raw `(name, tensor)` records of a checkpoint.
pub fn read_checkpoint_records<T: Scalar>(r: &mut impl Read) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err(format!("bad checkpoint magic {magic:?}")));
    }
    let count = read_u32(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let mut nb = [0u8; 2];
        r.read_exact(&mut nb)?;
        let mut name = vec![0u8; u16::from_le_bytes(nb) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| format_err("parameter name is not UTF-8"))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

/// Loads records into `params`; names and shapes must match exactly.
pub fn read_checkpoint_into<T: Scalar>(r: &mut impl Read, params: &mut impl Parameters<T>) -> Result<()> {
    let records = read_checkpoint_records::<T>(r)?;
    let mut slots = params.param_list_mut();
    if records.len() != slots.len() {
        return Err(format_err(format!(
            "checkpoint has {} tensors, model has {}",
            records.len(),
            slots.len()
        )));
    }
    for ((name, t), slot) in records.into_iter().zip(slots.iter_mut()) {
        if name != slot.name || t.shape() != slot.tensor.shape() {
            return Err(format_err(format!(
                "checkpoint record {name} {:?} does not match {} {:?}",
                t.shape(),
                slot.name,
                slot.tensor.shape()
            )));
        }
        *slot.tensor = t;
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &impl Parameters<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint_into<T: Scalar>(path: &Path, params: &mut impl Parameters<T>) -> Result<()> {
    let bytes = fs::read(path)?;
    read_checkpoint_into(&mut bytes.as_slice(), params)
}

/// Binary PGM of a 2-D slice; values are clamped to `[lo, hi]` and scaled
/// to 0–255.
pub fn pgm_bytes(h: usize, w: usize, values: &[f64], lo: f64, hi: f64) -> Result<Vec<u8>> {
    if values.len() != h * w {
        return Err(format_err(format!("{} values for a {h}x{w} image", values.len())));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        values
            .iter()
            .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Writes channel `c` of a `(C, H, W)` tensor, or a 2-D tensor, as PGM.
pub fn save_pgm<T: Scalar>(path: &Path, t: &Tensor<T>, channel: usize, lo: f64, hi: f64) -> Result<()> {
    let (h, w, slice) = match *t.shape() {
        [h, w] => (h, w, t.data()),
        [c, h, w] if channel < c => (h, w, t.channel(channel)),
        _ => return Err(format_err(format!("cannot export {:?} channel {channel}", t.shape()))),
    };
    let v: Vec<f64> = slice.iter().map(|x| x.as_f64()).collect();
    fs::write(path, pgm_bytes(h, w, &v, lo, hi)?)?;
    Ok(())
}

/// Reads a binary (P5, maxval ≤ 255) PGM as a `(1, H, W)` tensor in `[0, 1]`.
pub fn load_pgm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(format_err(format!("unsupported PGM type {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err(format!("bad PGM field '{s}'")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format_err(format!("unsupported PGM maxval {maxval}")));
    }
    let body = bytes
        .get(pos..pos + h * w)
        .ok_or_else(|| format_err("truncated PGM payload"))?;
    let data = body.iter().map(|&b| T::lit(b as f64 / maxval as f64)).collect();
    Tensor::from_vec(&[1, h, w], data)
}

/// Shape summary stored next to the sample files of a dataset directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub ratio: usize,
    pub train: usize,
    pub val: usize,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "bands={}\nheight={}\nwidth={}\nratio={}\ntrain={}\nval={}\n",
            self.bands, self.height, self.width, self.ratio, self.train, self.val
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut vals = [None; 6];
        const KEYS: [&str; 6] = ["bands", "height", "width", "ratio", "train", "val"];
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format_err(format!("manifest line {}: expected key=value", n + 1)))?;
            let slot = KEYS
                .iter()
                .position(|&key| key == k.trim())
                .ok_or_else(|| format_err(format!("manifest line {}: unknown key '{}'", n + 1, k.trim())))?;
            vals[slot] = Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| format_err(format!("manifest line {}: bad value '{}'", n + 1, v.trim())))?,
            );
        }
        let get = |i: usize| vals[i].ok_or_else(|| format_err(format!("manifest is missing '{}'", KEYS[i])));
        Ok(Self {
            bands: get(0)?,
            height: get(1)?,
            width: get(2)?,
            ratio: get(3)?,
            train: get(4)?,
            val: get(5)?,
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes training samples as indices `0..train` and validation samples after them.
pub fn save_dataset<T: Scalar>(dir: &Path, train: &[WaldSample<T>], val: &[WaldSample<T>]) -> Result<Manifest> {
    let first = train
        .first()
        .or(val.first())
        .ok_or_else(|| Error::Config("dataset is empty".into()))?;
    let (bands, height, width) = first.gt.dims3()?;
    let (_, lh, _) = first.lrms.dims3()?;
    fs::create_dir_all(dir)?;
    for (i, s) in train.iter().chain(val).enumerate() {
        save_tensor(&dir.join(format!("gt_{i}.bmt")), &s.gt)?;
        save_tensor(&dir.join(format!("pan_{i}.bmt")), &s.pan)?;
        save_tensor(&dir.join(format!("lrms_{i}.bmt")), &s.lrms)?;
    }
    let m = Manifest {
        bands,
        height,
        width,
        ratio: height / lh.max(1),
        train: train.len(),
        val: val.len(),
    };
    fs::write(dir.join(MANIFEST_FILE), m.to_text())?;
    Ok(m)
}

/// Returns `(manifest, train, val)`.
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<(Manifest, Vec<WaldSample<T>>, Vec<WaldSample<T>>)> {
    let m = Manifest::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut all = Vec::with_capacity(m.train + m.val);
    for i in 0..m.train + m.val {
        let s = WaldSample {
            gt: load_tensor(&dir.join(format!("gt_{i}.bmt")))?,
            pan: load_tensor(&dir.join(format!("pan_{i}.bmt")))?,
            lrms: load_tensor(&dir.join(format!("lrms_{i}.bmt")))?,
        };
        s.gt.expect_shape(&[m.bands, m.height, m.width], "dataset ground truth")?;
        s.pan.expect_shape(&[1, m.height, m.width], "dataset PAN")?;
        s.lrms
            .expect_shape(&[m.bands, m.height / m.ratio, m.width / m.ratio], "dataset LRMS")?;
        all.push(s);
    }
    let val = all.split_off(m.train);
    Ok((m, all, val))
}
