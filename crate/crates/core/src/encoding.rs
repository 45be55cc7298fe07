//! Event stream encodings: the bilinear voxel grid, its contrast-scaled
//! cumulative sum (CVGR) and CVGR-I, which adds the angle-0 intensity image to
//! every temporal bin.

use std::io::{Read, Write};

use crate::binio::*;
use crate::error::{Error, Result};
use crate::event_model::EventStream;
use crate::normal_map::Image;
use crate::tensor::Tensor;

const PCVG: &[u8; 4] = b"PCVG";

/// `B x H x W` bilinear event histogram, bin-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    pub t0: u64,
    pub duration: u64,
    pub values: Vec<f32>,
}

impl VoxelGrid {
    pub fn get(&self, b: usize, y: usize, x: usize) -> f32 {
        self.values[(b * self.height + y) * self.width + x]
    }
}

/// Cumulative encoding, optionally with the intensity image folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct CvgriTensor {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    pub contrast_threshold: f64,
    /// Whether `I[0]` has been added to every bin.
    pub with_intensity: bool,
    pub values: Vec<f32>,
}

impl CvgriTensor {
    pub fn get(&self, b: usize, y: usize, x: usize) -> f32 {
        self.values[(b * self.height + y) * self.width + x]
    }

    /// `[1, B, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.bins, self.height, self.width], self.values.clone())
            .expect("consistent extents")
    }

    /// Rescales all values into `[0, 1]`; a constant tensor becomes all zeros.
    pub fn normalize_min_max(&mut self) {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for v in &mut self.values {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
}

/// Spreads each event's polarity over the two temporal bins nearest to
/// `t* = (B - 1) (t - t0) / dT`. Events landing past the last bin are clamped
/// onto it, so every event contributes exactly its polarity.
pub fn build_voxel_grid(stream: &EventStream, bins: usize) -> Result<VoxelGrid> {
    if bins < 2 {
        return Err(Error::Config(format!("voxel grid needs at least 2 bins, got {bins}")));
    }
    let (w, h) = (stream.width, stream.height);
    let mut acc = vec![0.0f64; bins * h * w];
    let last = (bins - 1) as f64;
    if stream.duration > 0 {
        let scale = last / stream.duration as f64;
        for e in stream.events() {
            let ts = ((e.t - stream.t0) as f64 * scale).clamp(0.0, last);
            let lower = (ts.floor() as usize).min(bins - 1);
            let frac = ts - lower as f64;
            let pix = e.y as usize * w + e.x as usize;
            let p = e.p as f64;
            acc[lower * h * w + pix] += p * (1.0 - frac);
            if frac > 0.0 {
                acc[(lower + 1) * h * w + pix] += p * frac;
            }
        }
    } else {
        // zero-length window: everything sits in the first bin
        for e in stream.events() {
            acc[e.y as usize * w + e.x as usize] += e.p as f64;
        }
    }
    Ok(VoxelGrid {
        bins,
        height: h,
        width: w,
        t0: stream.t0,
        duration: stream.duration,
        values: acc.into_iter().map(|v| v as f32).collect(),
    })
}

/// `E(b) = C * sum_{i <= b} V(i)` per pixel.
pub fn build_cvgr(grid: &VoxelGrid, contrast_threshold: f64) -> Result<CvgriTensor> {
    if !(contrast_threshold > 0.0) {
        return Err(Error::Config(format!(
            "contrast threshold must be positive, got {contrast_threshold}"
        )));
    }
    let hw = grid.height * grid.width;
    let mut values = vec![0.0f32; grid.values.len()];
    let mut running = vec![0.0f64; hw];
    for b in 0..grid.bins {
        for p in 0..hw {
            running[p] += grid.values[b * hw + p] as f64;
            values[b * hw + p] = (contrast_threshold * running[p]) as f32;
        }
    }
    Ok(CvgriTensor {
        bins: grid.bins,
        height: grid.height,
        width: grid.width,
        contrast_threshold,
        with_intensity: false,
        values,
    })
}

/// Adds `i0` to every bin.
pub fn build_cvgri(cvgr: &CvgriTensor, i0: &Image) -> Result<CvgriTensor> {
    if i0.width != cvgr.width || i0.height != cvgr.height {
        return Err(Error::Dimension(format!(
            "intensity image {}x{} does not match encoding {}x{}",
            i0.width, i0.height, cvgr.width, cvgr.height
        )));
    }
    let hw = cvgr.height * cvgr.width;
    let mut out = cvgr.clone();
    for (i, v) in out.values.iter_mut().enumerate() {
        *v += i0.data[i % hw];
    }
    out.with_intensity = true;
    Ok(out)
}

/// Voxel grid, cumulative sum and intensity in one call.
pub fn encode_stream(stream: &EventStream, i0: &Image, bins: usize, contrast_threshold: f64) -> Result<CvgriTensor> {
    let grid = build_voxel_grid(stream, bins)?;
    build_cvgri(&build_cvgr(&grid, contrast_threshold)?, i0)
}

/// PCVG carries only extents and values; the threshold and intensity flag are
/// not stored and read back as `0` and `true`.
pub fn write_cvgri<W: Write>(w: &mut W, t: &CvgriTensor) -> Result<()> {
    write_magic(w, PCVG)?;
    write_u32(w, t.bins as u32)?;
    write_u32(w, t.height as u32)?;
    write_u32(w, t.width as u32)?;
    write_f32_slice(w, &t.values)
}

pub fn read_cvgri<R: Read>(r: &mut R) -> Result<CvgriTensor> {
    read_magic(r, PCVG)?;
    let bins = read_u32(r)? as usize;
    let height = read_u32(r)? as usize;
    let width = read_u32(r)? as usize;
    let values = read_f32_vec(r, bins * height * width)?;
    Ok(CvgriTensor {
        bins,
        height,
        width,
        contrast_threshold: 0.0,
        with_intensity: true,
        values,
    })
}
