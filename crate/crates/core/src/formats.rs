//! Binary grid formats and run-length label rows.
//!
//! All binary formats are little-endian: a four byte magic, `u32` dimensions,
//! then a row-major payload.
//!
//! | magic  | header           | payload          |
//! |--------|------------------|------------------|
//! | `DG01` | `h`, `w`         | `h*w` `f32`      |
//! | `LM01` | `h`, `w`         | `h*w` `u32`      |
//! | `FM01` | `c`, `h`, `w`    | `c*h*w` `f32`    |
//!
//! Head weights are stored as a sequence of `FM01` blocks (see
//! [`write_head_weights`]).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::counter::{Conv3x3, FeatureMap, HeadWeights};
use crate::error::{Error, Result};
use crate::grid::{DensityGrid, LabelMap};
use crate::ipse::{Region, RegionKind};

const DGRID: &[u8; 4] = b"DG01";
const LMAP: &[u8; 4] = b"LM01";
const FMAP: &[u8; 4] = b"FM01";

/// Largest accepted payload, in elements, to reject corrupt headers early.
const MAX_ELEMENTS: usize = 1 << 28;

fn read_u32(r: &mut impl Read, fmt: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format(fmt, format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_magic(r: &mut impl Read, magic: &[u8; 4], fmt: &'static str) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format(fmt, format!("missing magic: {e}")))?;
    if &b != magic {
        return Err(Error::format(fmt, format!("bad magic {b:?}")));
    }
    Ok(())
}

fn element_count(dims: &[u32], fmt: &'static str) -> Result<usize> {
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|&n| n > 0 && n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::format(fmt, format!("unsupported dimensions {dims:?}")))?;
    Ok(n)
}

fn read_payload(r: &mut impl Read, n: usize, fmt: &'static str) -> Result<Vec<[u8; 4]>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::format(fmt, format!("truncated payload: {e}")))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::format(fmt, e.to_string()))? != 0 {
        return Err(Error::format(fmt, "trailing bytes after payload"));
    }
    Ok(bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
}

fn write_all(w: &mut impl Write, bytes: &[u8], fmt: &'static str) -> Result<()> {
    w.write_all(bytes).map_err(|e| Error::format(fmt, format!("write failed: {e}")))
}

pub fn write_dgrid(w: &mut impl Write, grid: &DensityGrid) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + grid.len() * 4);
    buf.extend_from_slice(DGRID);
    buf.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    for &v in grid.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_all(w, &buf, "DGRID")
}

/// Reads a density grid; values are widened from `f32`.
pub fn read_dgrid(r: &mut impl Read) -> Result<DensityGrid> {
    read_magic(r, DGRID, "DGRID")?;
    let (h, w) = (read_u32(r, "DGRID")?, read_u32(r, "DGRID")?);
    let n = element_count(&[h, w], "DGRID")?;
    let values = read_payload(r, n, "DGRID")?
        .into_iter()
        .map(|b| f32::from_le_bytes(b) as f64)
        .collect();
    DensityGrid::new(h as usize, w as usize, values)
}

pub fn dgrid_to_bytes(grid: &DensityGrid) -> Vec<u8> {
    let mut out = Vec::new();
    write_dgrid(&mut out, grid).expect("writing to a Vec cannot fail");
    out
}

pub fn dgrid_from_bytes(mut bytes: &[u8]) -> Result<DensityGrid> {
    read_dgrid(&mut bytes)
}

pub fn write_lmap(w: &mut impl Write, labels: &LabelMap) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + labels.labels().len() * 4);
    buf.extend_from_slice(LMAP);
    buf.extend_from_slice(&(labels.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(labels.width() as u32).to_le_bytes());
    for &l in labels.labels() {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    write_all(w, &buf, "LMAP")
}

pub fn read_lmap(r: &mut impl Read) -> Result<LabelMap> {
    read_magic(r, LMAP, "LMAP")?;
    let (h, w) = (read_u32(r, "LMAP")?, read_u32(r, "LMAP")?);
    let n = element_count(&[h, w], "LMAP")?;
    let labels = read_payload(r, n, "LMAP")?.into_iter().map(u32::from_le_bytes).collect();
    LabelMap::new(h as usize, w as usize, labels)
}

pub fn write_feature_map(w: &mut impl Write, fm: &FeatureMap) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + fm.values().len() * 4);
    buf.extend_from_slice(FMAP);
    for d in [fm.channels(), fm.height(), fm.width()] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in fm.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_all(w, &buf, "FM01")
}

fn read_feature_block(r: &mut impl Read) -> Result<FeatureMap> {
    read_magic(r, FMAP, "FM01")?;
    let dims = [read_u32(r, "FM01")?, read_u32(r, "FM01")?, read_u32(r, "FM01")?];
    let n = element_count(&dims, "FM01")?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::format("FM01", format!("truncated payload: {e}")))?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FeatureMap::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, values)
}

pub fn read_feature_map(r: &mut impl Read) -> Result<FeatureMap> {
    let fm = read_feature_block(r)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::format("FM01", e.to_string()))? != 0 {
        return Err(Error::format("FM01", "trailing bytes after payload"));
    }
    Ok(fm)
}

/// Writes head weights as seven `FM01` blocks: conv0 kernel (`C*C x 3 x 3`),
/// conv0 bias (`C x 1 x 1`), the same pair for conv1, projection weights
/// (`C x 1 x 1`), and a trailing `2 x 1 x 1` block holding the projection
/// bias and the upsampling factor.
pub fn write_head_weights(w: &mut impl Write, weights: &HeadWeights) -> Result<()> {
    let c = weights.channels();
    let block = |ch: usize, h: usize, wd: usize, v: &[f64]| {
        FeatureMap::new(ch, h, wd, v.to_vec()).expect("head weights have consistent shapes")
    };
    for conv in [&weights.conv0, &weights.conv1] {
        write_feature_map(w, &block(c * c, 3, 3, &conv.kernel))?;
        write_feature_map(w, &block(c, 1, 1, &conv.bias))?;
    }
    write_feature_map(w, &block(c, 1, 1, &weights.proj))?;
    write_feature_map(w, &block(2, 1, 1, &[weights.proj_bias, weights.upsample as f64]))
}

pub fn read_head_weights(r: &mut impl Read) -> Result<HeadWeights> {
    let mut conv = || -> Result<Conv3x3> {
        let kernel = read_feature_block(r)?;
        let bias = read_feature_block(r)?;
        let c = bias.channels();
        if kernel.channels() != c * c || (kernel.height(), kernel.width()) != (3, 3) {
            return Err(Error::format("FM01", "convolution block shapes disagree"));
        }
        Ok(Conv3x3 {
            channels: c,
            kernel: kernel.values().to_vec(),
            bias: bias.values().to_vec(),
        })
    };
    let conv0 = conv()?;
    let conv1 = conv()?;
    let proj = read_feature_block(r)?;
    let tail = read_feature_block(r)?;
    if tail.channels() != 2 {
        return Err(Error::format("FM01", "missing projection bias block"));
    }
    let weights = HeadWeights {
        conv0,
        conv1,
        proj: proj.values().to_vec(),
        proj_bias: tail.values()[0],
        upsample: tail.values()[1] as usize,
    };
    weights.validate()?;
    Ok(weights)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dgrid(path: impl AsRef<Path>) -> Result<DensityGrid> {
    read_dgrid(&mut open(path.as_ref())?)
}

pub fn save_dgrid(path: impl AsRef<Path>, grid: &DensityGrid) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_dgrid(&mut w, grid)?;
    finish(w, path)
}

pub fn load_lmap(path: impl AsRef<Path>) -> Result<LabelMap> {
    read_lmap(&mut open(path.as_ref())?)
}

pub fn save_lmap(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_lmap(&mut w, labels)?;
    finish(w, path)
}

pub fn save_feature_map(path: impl AsRef<Path>, fm: &FeatureMap) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_feature_map(&mut w, fm)?;
    finish(w, path)
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    read_feature_map(&mut open(path.as_ref())?)
}

pub fn save_head_weights(path: impl AsRef<Path>, weights: &HeadWeights) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_head_weights(&mut w, weights)?;
    finish(w, path)
}

pub fn load_head_weights(path: impl AsRef<Path>) -> Result<HeadWeights> {
    read_head_weights(&mut open(path.as_ref())?)
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_reader(open(path.as_ref())?)?)
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    finish(w, path)
}

/// One label-map row as `[label, run]` pairs.
pub type RleRow = Vec<[u32; 2]>;

pub fn rle_encode(labels: &LabelMap) -> Vec<RleRow> {
    labels
        .labels()
        .chunks(labels.width())
        .map(|row| {
            let mut runs: RleRow = Vec::new();
            for &l in row {
                match runs.last_mut() {
                    Some([label, run]) if *label == l => *run += 1,
                    _ => runs.push([l, 1]),
                }
            }
            runs
        })
        .collect()
}

pub fn rle_decode(rows: &[RleRow], width: usize) -> Result<LabelMap> {
    let mut labels = Vec::with_capacity(rows.len() * width);
    for (r, row) in rows.iter().enumerate() {
        let before = labels.len();
        for &[label, run] in row {
            labels.extend(std::iter::repeat_n(label, run as usize));
        }
        if labels.len() - before != width {
            return Err(Error::format("RLE", format!("row {r} does not span {width} pixels")));
        }
    }
    LabelMap::new(rows.len(), width, labels)
}

/// Entry of the region-table sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub id: u32,
    pub sum: f64,
    pub area: usize,
    pub kind: RegionKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionTable {
    pub regions: Vec<RegionEntry>,
}

impl RegionTable {
    pub fn from_regions(regions: &[Region]) -> Self {
        Self {
            regions: regions
                .iter()
                .map(|r| RegionEntry {
                    id: r.id,
                    sum: r.sum,
                    area: r.area(),
                    kind: r.kind,
                })
                .collect(),
        }
    }
}
