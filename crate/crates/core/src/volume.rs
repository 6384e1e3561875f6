//! Bit-exact volume container and the preprocessing chain: center crops,
//! axial slicing and restacking, paired 2-D crops, and intensity
//! normalization.
//!
//! File format (little-endian): magic "SEGV", version u16 (= 1), dtype u8
//! (0 = f32, 1 = u8), ndim u8, ndim x u32 dims, u32 meta length + UTF-8 meta
//! as key=value lines, then raw voxels row-major, channels-first.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SEGV_MAGIC: [u8; 4] = [0x53, 0x45, 0x47, 0x56];
pub const SEGV_VERSION: u16 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum VolumeDtype {
    F32,
    U8,
}

impl VolumeDtype {
    fn code(self) -> u8 {
        match self {
            VolumeDtype::F32 => 0,
            VolumeDtype::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(VolumeDtype::F32),
            1 => Some(VolumeDtype::U8),
            _ => None,
        }
    }

    fn elem_size(self) -> usize {
        match self {
            VolumeDtype::F32 => 4,
            VolumeDtype::U8 => 1,
        }
    }
}

#[derive(Clone, PartialEq, Debug)]
pub enum Voxels {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Voxels {
    pub fn len(&self) -> usize {
        match self {
            Voxels::F32(v) => v.len(),
            Voxels::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> VolumeDtype {
        match self {
            Voxels::F32(_) => VolumeDtype::F32,
            Voxels::U8(_) => VolumeDtype::U8,
        }
    }
}

/// Dense (C, H, W, D) voxel grid with free-form key=value metadata.
/// Linear index: ((c*H + h)*W + w)*D + d.
#[derive(Clone, PartialEq, Debug)]
pub struct Volume {
    pub dims: (usize, usize, usize, usize),
    pub voxels: Voxels,
    pub meta: Vec<(String, String)>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize, usize), voxels: Voxels) -> Result<Self> {
        let count = dims.0 * dims.1 * dims.2 * dims.3;
        if count != voxels.len() {
            return Err(Error::data(format!(
                "volume dims {dims:?} expected {count} voxels, got {}",
                voxels.len()
            )));
        }
        Ok(Volume {
            dims,
            voxels,
            meta: Vec::new(),
        })
    }

    pub fn with_meta(mut self, key: &str, value: &str) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn channels(&self) -> usize {
        self.dims.0
    }

    pub fn height(&self) -> usize {
        self.dims.1
    }

    pub fn width(&self) -> usize {
        self.dims.2
    }

    pub fn depth(&self) -> usize {
        self.dims.3
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize, d: usize) -> usize {
        ((c * self.dims.1 + h) * self.dims.2 + w) * self.dims.3 + d
    }

    pub fn f32_data(&self) -> Result<&[f32]> {
        match &self.voxels {
            Voxels::F32(v) => Ok(v),
            Voxels::U8(_) => Err(Error::data("expected an f32 volume, got u8".to_string())),
        }
    }

    pub fn u8_data(&self) -> Result<&[u8]> {
        match &self.voxels {
            Voxels::U8(v) => Ok(v),
            Voxels::F32(_) => Err(Error::data("expected a u8 volume, got f32".to_string())),
        }
    }
}

// --- SEGV records -----------------------------------------------------------

/// Serialize one record (arbitrary rank; volumes use rank 4).
pub fn encode_record(dims: &[usize], voxels: &Voxels, meta: &[(String, String)]) -> Vec<u8> {
    let mut meta_text = String::new();
    for (k, v) in meta {
        meta_text.push_str(k);
        meta_text.push('=');
        meta_text.push_str(v);
        meta_text.push('\n');
    }
    let meta_bytes = meta_text.as_bytes();

    let mut out = Vec::new();
    out.extend_from_slice(&SEGV_MAGIC);
    out.extend_from_slice(&SEGV_VERSION.to_le_bytes());
    out.push(voxels.dtype().code());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_bytes);
    match voxels {
        Voxels::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Voxels::U8(v) => out.extend_from_slice(v),
    }
    out
}

pub struct DecodedRecord {
    pub dims: Vec<usize>,
    pub voxels: Voxels,
    pub meta: Vec<(String, String)>,
}

/// Parse one record from a byte buffer. Errors carry the byte offset of the
/// problem.
pub fn decode_record(bytes: &[u8], path: &Path) -> Result<DecodedRecord> {
    let err = |reason: String, offset: u64| Error::Format {
        path: path.to_path_buf(),
        reason,
        offset,
    };
    let need = |len: usize, offset: usize, what: &str| -> Result<()> {
        if bytes.len() < offset + len {
            Err(err(
                format!("truncated {what}: need {len} bytes, have {}", bytes.len() - offset.min(bytes.len())),
                offset as u64,
            ))
        } else {
            Ok(())
        }
    };

    need(4, 0, "magic")?;
    if bytes[0..4] != SEGV_MAGIC {
        return Err(err("bad magic".to_string(), 0));
    }
    need(2, 4, "version")?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SEGV_VERSION {
        return Err(err(format!("unsupported version {version}"), 4));
    }
    need(2, 6, "dtype/ndim")?;
    let dtype = VolumeDtype::from_code(bytes[6])
        .ok_or_else(|| err(format!("unknown dtype code {}", bytes[6]), 6))?;
    let ndim = bytes[7] as usize;
    if ndim == 0 {
        return Err(err("zero-rank record".to_string(), 7));
    }
    let mut off = 8usize;
    need(4 * ndim, off, "dims")?;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let b = &bytes[off + 4 * i..off + 4 * i + 4];
        dims.push(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize);
    }
    off += 4 * ndim;

    need(4, off, "meta length")?;
    let meta_len =
        u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]) as usize;
    off += 4;
    need(meta_len, off, "meta")?;
    let meta_text = std::str::from_utf8(&bytes[off..off + meta_len])
        .map_err(|_| err("meta is not valid UTF-8".to_string(), off as u64))?;
    let meta: Vec<(String, String)> = meta_text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| match l.split_once('=') {
            Some((k, v)) => Ok((k.to_string(), v.to_string())),
            None => Err(err(format!("meta line without '=': {l}"), off as u64)),
        })
        .collect::<Result<_>>()?;
    off += meta_len;

    let count: usize = dims.iter().product();
    let payload = count * dtype.elem_size();
    if bytes.len() < off + payload {
        return Err(err(
            format!(
                "truncated payload: expected {payload} voxel bytes, got {}",
                bytes.len() - off
            ),
            off as u64,
        ));
    }
    if bytes.len() > off + payload {
        return Err(err(
            format!("{} trailing bytes after payload", bytes.len() - off - payload),
            (off + payload) as u64,
        ));
    }
    let voxels = match dtype {
        VolumeDtype::F32 => {
            let mut v = Vec::with_capacity(count);
            for i in 0..count {
                let b = &bytes[off + 4 * i..off + 4 * i + 4];
                v.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
            }
            Voxels::F32(v)
        }
        VolumeDtype::U8 => Voxels::U8(bytes[off..off + payload].to_vec()),
    };
    Ok(DecodedRecord { dims, voxels, meta })
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let dims = [v.dims.0, v.dims.1, v.dims.2, v.dims.3];
    fs::write(path, encode_record(&dims, &v.voxels, &v.meta))?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)?;
    let rec = decode_record(&bytes, path)?;
    if rec.dims.len() != 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("volume must be rank 4, got rank {}", rec.dims.len()),
            offset: 7,
        });
    }
    let mut vol = Volume::new(
        (rec.dims[0], rec.dims[1], rec.dims[2], rec.dims[3]),
        rec.voxels,
    )?;
    vol.meta = rec.meta;
    Ok(vol)
}

// --- Preprocessing ----------------------------------------------------------

fn crop_region(
    v: &Volume,
    oh: usize,
    ow: usize,
    od: usize,
    th: usize,
    tw: usize,
    td: usize,
) -> Volume {
    let c = v.channels();
    let copy = |src_idx: &dyn Fn(usize, usize, usize, usize) -> usize| -> Voxels {
        match &v.voxels {
            Voxels::F32(data) => {
                let mut out = Vec::with_capacity(c * th * tw * td);
                for ci in 0..c {
                    for h in 0..th {
                        for w in 0..tw {
                            for d in 0..td {
                                out.push(data[src_idx(ci, h, w, d)]);
                            }
                        }
                    }
                }
                Voxels::F32(out)
            }
            Voxels::U8(data) => {
                let mut out = Vec::with_capacity(c * th * tw * td);
                for ci in 0..c {
                    for h in 0..th {
                        for w in 0..tw {
                            for d in 0..td {
                                out.push(data[src_idx(ci, h, w, d)]);
                            }
                        }
                    }
                }
                Voxels::U8(out)
            }
        }
    };
    let idx = |ci: usize, h: usize, w: usize, d: usize| v.index(ci, oh + h, ow + w, od + d);
    let mut out = Volume::new((c, th, tw, td), copy(&idx)).expect("consistent crop");
    out.meta = v.meta.clone();
    out
}

/// Spatially centered crop; offset per axis is floor((dim - target)/2).
pub fn center_crop(v: &Volume, target: (usize, usize, usize)) -> Result<Volume> {
    let (th, tw, td) = target;
    if th > v.height() || tw > v.width() || td > v.depth() {
        return Err(Error::data(format!(
            "center_crop target {target:?} exceeds volume dims ({}, {}, {})",
            v.height(),
            v.width(),
            v.depth()
        )));
    }
    let oh = (v.height() - th) / 2;
    let ow = (v.width() - tw) / 2;
    let od = (v.depth() - td) / 2;
    Ok(crop_region(v, oh, ow, od, th, tw, td))
}

/// Split a volume into its D axial slices, order preserved.
pub fn slice_axial(v: &Volume) -> Vec<Volume> {
    (0..v.depth()).map(|d| crop_region(v, 0, 0, d, v.height(), v.width(), 1)).collect()
}

/// Inverse of [`slice_axial`]: stack single-slice volumes along depth.
pub fn restack(slices: &[Volume]) -> Result<Volume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::data("restack of an empty slice list".to_string()))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let dtype = first.voxels.dtype();
    for s in slices {
        if s.depth() != 1 {
            return Err(Error::data("restack expects single-slice volumes".to_string()));
        }
        if (s.channels(), s.height(), s.width()) != (c, h, w) || s.voxels.dtype() != dtype {
            return Err(Error::data("restack slices disagree in shape or dtype".to_string()));
        }
    }
    let depth = slices.len();
    let plane = c * h * w;
    let voxels = match dtype {
        VolumeDtype::F32 => {
            let per: Vec<&[f32]> = slices.iter().map(|s| s.f32_data().unwrap()).collect();
            let mut flat = Vec::with_capacity(plane * depth);
            for pos in 0..plane {
                for s in &per {
                    flat.push(s[pos]);
                }
            }
            Voxels::F32(flat)
        }
        VolumeDtype::U8 => {
            let per: Vec<&[u8]> = slices.iter().map(|s| s.u8_data().unwrap()).collect();
            let mut flat = Vec::with_capacity(plane * depth);
            for pos in 0..plane {
                for s in &per {
                    flat.push(s[pos]);
                }
            }
            Voxels::U8(flat)
        }
    };
    let mut out = Volume::new((c, h, w, depth), voxels)?;
    out.meta = first.meta.clone();
    Ok(out)
}

fn crop2d_at(slice: &Volume, oy: usize, ox: usize, size: usize) -> Volume {
    crop_region(slice, oy, ox, 0, size, size, slice.depth())
}

fn check_crop2d(slice: &Volume, size: usize) -> Result<(usize, usize)> {
    if size > slice.height() || size > slice.width() {
        return Err(Error::data(format!(
            "crop size {size} exceeds slice dims {}x{}",
            slice.height(),
            slice.width()
        )));
    }
    Ok((slice.height() - size, slice.width() - size))
}

/// Random square crop with offsets drawn uniformly from the valid range.
/// When the slice already has the target size no randomness is consumed.
pub fn random_crop2d(slice: &Volume, size: usize, rng: &mut ChaCha8Rng) -> Result<Volume> {
    let (my, mx) = check_crop2d(slice, size)?;
    let (oy, ox) = draw_offsets(my, mx, rng);
    Ok(crop2d_at(slice, oy, ox, size))
}

fn draw_offsets(max_y: usize, max_x: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let oy = if max_y == 0 { 0 } else { rng.gen_range(0..=max_y) };
    let ox = if max_x == 0 { 0 } else { rng.gen_range(0..=max_x) };
    (oy, ox)
}

/// Crop an image slice and its label slice with the same random offsets, so
/// their geometry never decouples.
pub fn random_crop_pair(
    image: &Volume,
    label: &Volume,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, Volume)> {
    if (image.height(), image.width()) != (label.height(), label.width()) {
        return Err(Error::data(format!(
            "image {}x{} and label {}x{} disagree",
            image.height(),
            image.width(),
            label.height(),
            label.width()
        )));
    }
    let (my, mx) = check_crop2d(image, size)?;
    let (oy, ox) = draw_offsets(my, mx, rng);
    Ok((crop2d_at(image, oy, ox, size), crop2d_at(label, oy, ox, size)))
}

/// Centered square crop of a slice.
pub fn center_crop2d(slice: &Volume, size: usize) -> Result<Volume> {
    check_crop2d(slice, size)?;
    let oy = (slice.height() - size) / 2;
    let ox = (slice.width() - size) / 2;
    Ok(crop2d_at(slice, oy, ox, size))
}

/// Per-channel min-max scaling into [0,1]; a constant channel maps to 0.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    let data = v.f32_data()?;
    let per_channel = v.height() * v.width() * v.depth();
    let mut out = vec![0.0f32; data.len()];
    for c in 0..v.channels() {
        let chan = &data[c * per_channel..(c + 1) * per_channel];
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &x in chan {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        let dst = &mut out[c * per_channel..(c + 1) * per_channel];
        if hi > lo {
            let scale = 1.0 / (hi - lo);
            for (o, &x) in dst.iter_mut().zip(chan) {
                *o = (x - lo) * scale;
            }
        }
        // else: constant channel stays all zero.
    }
    let mut vol = Volume::new(v.dims, Voxels::F32(out))?;
    vol.meta = v.meta.clone();
    Ok(vol)
}
