//! Slice sequences and the `SQIV` volume container.
//!
//! Layout (little-endian): magic `SQIV`, version u32, H u32, W u32,
//! n_slices u32, spacing_mm f64, window_low f64, window_high f64, then
//! `n_slices * H * W` f32 values, slice-major.

use std::fs;
use std::path::Path;

use crate::codec::{put_f32s, put_f64, put_u32, Reader};
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: [u8; 4] = *b"SQIV";
pub const VOLUME_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4 + 3 * 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Source {
    #[default]
    Real,
    Synthetic,
}

/// An ordered stack of equally sized 2-D slices, superior to inferior.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSequence {
    pub volume_id: String,
    height: usize,
    width: usize,
    data: Vec<f32>,
    spacing_mm: f64,
    pub source: Source,
}

impl SliceSequence {
    pub fn new(
        volume_id: impl Into<String>,
        height: usize,
        width: usize,
        data: Vec<f32>,
        spacing_mm: f64,
        source: Source,
    ) -> Result<Self> {
        if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
            return Err(Error::NonPositiveSpacing(spacing_mm));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidVolume(format!("empty slice size {height}x{width}")));
        }
        let area = height * width;
        if !data.len().is_multiple_of(area) {
            return Err(Error::InvalidVolume(format!(
                "{} values is not a whole number of {height}x{width} slices",
                data.len()
            )));
        }
        if data.len() / area < 2 {
            return Err(Error::InvalidVolume(format!(
                "need at least 2 slices, got {}",
                data.len() / area
            )));
        }
        Ok(Self {
            volume_id: volume_id.into(),
            height,
            width,
            data,
            spacing_mm,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / (self.height * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn slice(&self, i: usize) -> &[f32] {
        let a = self.height * self.width;
        &self.data[i * a..(i + 1) * a]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Area-averaged resampling of every slice to `height x width`.
    pub fn resize_area(&self, height: usize, width: usize) -> Result<Self> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(self.len() * height * width);
        for i in 0..self.len() {
            data.extend(area_resample(self.slice(i), self.height, self.width, height, width));
        }
        Self::new(self.volume_id.clone(), height, width, data, self.spacing_mm, self.source)
    }

    /// Encodes with the identity window `[-1, 1]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&VOLUME_MAGIC);
        put_u32(&mut out, VOLUME_VERSION);
        put_u32(&mut out, self.height as u32);
        put_u32(&mut out, self.width as u32);
        put_u32(&mut out, self.len() as u32);
        put_f64(&mut out, self.spacing_mm);
        put_f64(&mut out, -1.0);
        put_f64(&mut out, 1.0);
        put_f32s(&mut out, &self.data);
        out
    }

    /// Decodes a container, rescaling intensities from the stored window to
    /// `[-1, 1]` (clamped).
    pub fn from_bytes(volume_id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let raw = RawVolume::parse(bytes)?;
        let data = normalize_window(raw.values, raw.window_low, raw.window_high);
        Self::new(volume_id, raw.height, raw.width, data, raw.spacing_mm, Source::Real)
    }
}

/// Undecoded container contents with the original intensity window.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVolume {
    pub height: usize,
    pub width: usize,
    pub n_slices: usize,
    pub spacing_mm: f64,
    pub window_low: f64,
    pub window_high: f64,
    pub values: Vec<f32>,
}

impl RawVolume {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(VOLUME_MAGIC)?;
        let version = r.u32("version")?;
        if version != VOLUME_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let n_slices = r.u32("n_slices")? as usize;
        let spacing_mm = r.f64("spacing_mm")?;
        let window_low = r.f64("window_low")?;
        let window_high = r.f64("window_high")?;
        if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
            return Err(Error::NonPositiveSpacing(spacing_mm));
        }
        if !(window_low.is_finite() && window_high.is_finite() && window_low < window_high) {
            return Err(Error::InvalidVolume(format!(
                "intensity window [{window_low}, {window_high}] is empty"
            )));
        }
        let count = height
            .checked_mul(width)
            .and_then(|a| a.checked_mul(n_slices))
            .ok_or_else(|| Error::InvalidVolume("dimensions overflow".into()))?;
        let values = r.f32s(count, "slice payload")?;
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes after payload", r.remaining())));
        }
        Ok(Self {
            height,
            width,
            n_slices,
            spacing_mm,
            window_low,
            window_high,
            values,
        })
    }
}

fn normalize_window(mut values: Vec<f32>, low: f64, high: f64) -> Vec<f32> {
    if low == -1.0 && high == 1.0 {
        values.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        return values;
    }
    let span = high - low;
    for v in &mut values {
        let x = 2.0 * (*v as f64 - low) / span - 1.0;
        *v = x.clamp(-1.0, 1.0) as f32;
    }
    values
}

/// Box-filter resampling; each output pixel averages the input area it
/// covers, with fractional overlap weights at the edges.
pub fn area_resample(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let overlap = |i: usize, scale: f64, n: usize| -> Vec<(usize, f64)> {
        let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
        let mut taps = Vec::new();
        let mut k = lo.floor() as usize;
        while (k as f64) < hi && k < n {
            let w = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
            if w > 0.0 {
                taps.push((k, w));
            }
            k += 1;
        }
        taps
    };
    let (sy, sx) = (sh as f64 / dh as f64, sw as f64 / dw as f64);
    let rows: Vec<_> = (0..dh).map(|y| overlap(y, sy, sh)).collect();
    let cols: Vec<_> = (0..dw).map(|x| overlap(x, sx, sw)).collect();
    let mut out = Vec::with_capacity(dh * dw);
    for ry in &rows {
        for cx in &cols {
            let (mut acc, mut wsum) = (0.0f64, 0.0f64);
            for &(y, wy) in ry {
                for &(x, wx) in cx {
                    acc += src[y * sw + x] as f64 * wy * wx;
                    wsum += wy * wx;
                }
            }
            out.push((acc / wsum) as f32);
        }
    }
    out
}

pub fn save_volume(seq: &SliceSequence, path: &Path) -> Result<()> {
    fs::write(path, seq.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads a container; the volume id is the file stem.
pub fn load_volume(path: &Path) -> Result<SliceSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SliceSequence::from_bytes(id, &bytes)
}
