//! The T×V grid data model: camera ring, pixel/latent grids, view and frame
//! slicing, box-filter resampling, and the diagonal traversal used by the
//! grid-aware Fréchet metrics.

mod io;
mod manifest;
mod render;

pub use io::{load_grid, save_grid};
pub use manifest::{read_manifest, write_manifest, Manifest, ManifestRecord};
pub use render::{render_scene, ColorMap, MotionProgram, Primitive, SceneSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ring of V cameras at equally spaced azimuths, fixed elevation and radius.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRing {
    views: usize,
    pub elevation: f64,
    pub radius: f64,
}

impl CameraRing {
    pub fn new(views: usize, elevation: f64, radius: f64) -> Result<Self> {
        if views < 2 {
            return Err(Error::config(format!("camera ring needs V ≥ 2, got {}", views)));
        }
        Ok(CameraRing { views, elevation, radius })
    }

    /// 16 views on the equator at radius 2.5.
    pub fn default_ring() -> Self {
        CameraRing { views: 16, elevation: 0.0, radius: 2.5 }
    }

    pub fn views(&self) -> usize {
        self.views
    }

    /// azimuth[k] = 2πk/V.
    pub fn azimuth(&self, k: usize) -> f64 {
        std::f64::consts::TAU * (k as f64) / (self.views as f64)
    }

    /// Azimuth in turns (k/V); exact for power-of-two V.
    pub fn azimuth_turns(&self, k: usize) -> f64 {
        (k as f64) / (self.views as f64)
    }
}

/// T×V grid of RGB frames in [0, 1], plus camera metadata.
///
/// `view_indices[j]` names the ring camera behind grid view slot `j`, so
/// sliced sub-grids keep their azimuths.
#[derive(Debug, Clone)]
pub struct ImageGrid {
    data: Tensor, // [T, V, 3, H, W]
    pub fps: f64,
    pub ring: CameraRing,
    view_indices: Vec<usize>,
}

impl ImageGrid {
    pub fn new(data: Tensor, fps: f64, ring: CameraRing) -> Result<Self> {
        let indices = match data.shape() {
            [_, v, 3, _, _] => (0..*v).collect(),
            s => return Err(Error::shape(format!("image grid wants [T,V,3,H,W], got {:?}", s))),
        };
        Self::with_view_indices(data, fps, ring, indices)
    }

    pub fn with_view_indices(
        data: Tensor,
        fps: f64,
        ring: CameraRing,
        view_indices: Vec<usize>,
    ) -> Result<Self> {
        match data.shape() {
            [_, v, 3, _, _] if *v == view_indices.len() => {}
            s => {
                return Err(Error::shape(format!(
                    "image grid [T,V,3,H,W] with {} view indices, got {:?}",
                    view_indices.len(),
                    s
                )))
            }
        }
        for &i in &view_indices {
            if i >= ring.views() {
                return Err(Error::shape(format!("view index {} outside ring of {}", i, ring.views())));
            }
        }
        if data.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::data("pixel outside [0, 1]"));
        }
        Ok(ImageGrid { data, fps, ring, view_indices })
    }

    /// Builds from raw data, clamping pixels into [0, 1]. Decoding and
    /// generation paths project back onto valid pixels this way.
    pub fn from_tensor_clamped(
        data: Tensor,
        fps: f64,
        ring: CameraRing,
        view_indices: Vec<usize>,
    ) -> Result<Self> {
        let clamped = Tensor::from_fn(data.shape().to_vec(), |i| data.data()[i].clamp(0.0, 1.0));
        Self::with_view_indices(clamped, fps, ring, view_indices)
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn views(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[4]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn view_indices(&self) -> &[usize] {
        &self.view_indices
    }

    /// Azimuth (radians) of grid view slot `j`.
    pub fn slot_azimuth(&self, j: usize) -> f64 {
        self.ring.azimuth(self.view_indices[j])
    }

    /// One [3, H, W] frame.
    pub fn frame(&self, t: usize, v: usize) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let cell = 3 * h * w;
        let base = (t * self.views() + v) * cell;
        Tensor::from_parts(
            vec![3, h, w],
            self.data.data()[base..base + cell].to_vec(),
        )
    }

    /// One view's video as [T, 3, H, W].
    pub fn view_video(&self, v: usize) -> Tensor {
        let (t, h, w) = (self.frames(), self.height(), self.width());
        let cell = 3 * h * w;
        let mut data = Vec::with_capacity(t * cell);
        for ti in 0..t {
            let base = (ti * self.views() + v) * cell;
            data.extend_from_slice(&self.data.data()[base..base + cell]);
        }
        Tensor::from_parts(vec![t, 3, h, w], data)
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> Result<f64> {
        self.data.max_abs_diff(&other.data)
    }
}

/// T×V grid mapped into latent space: [T, V, C, h, w].
#[derive(Debug, Clone)]
pub struct LatentGrid {
    data: Tensor,
    pub ring: CameraRing,
    view_indices: Vec<usize>,
}

impl LatentGrid {
    pub fn new(data: Tensor, ring: CameraRing, view_indices: Vec<usize>) -> Result<Self> {
        match data.shape() {
            [_, v, _, _, _] if *v == view_indices.len() => {}
            s => {
                return Err(Error::shape(format!(
                    "latent grid wants [T,V,C,h,w] with matching view indices, got {:?}",
                    s
                )))
            }
        }
        Ok(LatentGrid { data, ring, view_indices })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn views(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[4]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn view_indices(&self) -> &[usize] {
        &self.view_indices
    }

    pub fn slot_azimuth(&self, j: usize) -> f64 {
        self.ring.azimuth(self.view_indices[j])
    }

    /// Same metadata, new payload of identical shape.
    pub fn with_tensor(&self, data: Tensor) -> Result<Self> {
        if data.shape() != self.data.shape() {
            return Err(Error::shape(format!(
                "latent payload {:?} vs {:?}",
                data.shape(),
                self.data.shape()
            )));
        }
        Ok(LatentGrid { data, ring: self.ring.clone(), view_indices: self.view_indices.clone() })
    }
}

/// Box-filter average pooling over non-overlapping factor×factor blocks.
pub fn downsample_grid(grid: &ImageGrid, factor: usize) -> Result<ImageGrid> {
    if factor == 0 || grid.height() % factor != 0 || grid.width() % factor != 0 {
        return Err(Error::shape(format!(
            "downsample factor {} does not divide {}×{}",
            factor,
            grid.height(),
            grid.width()
        )));
    }
    let (t, v, h, w) = (grid.frames(), grid.views(), grid.height(), grid.width());
    let (oh, ow) = (h / factor, w / factor);
    let src = grid.tensor().data();
    let norm = 1.0 / (factor * factor) as f64;
    let mut data = vec![0.0; t * v * 3 * oh * ow];
    for cell in 0..t * v * 3 {
        let sbase = cell * h * w;
        let obase = cell * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[sbase + (oy * factor + dy) * w + ox * factor + dx];
                    }
                }
                data[obase + oy * ow + ox] = acc * norm;
            }
        }
    }
    ImageGrid::with_view_indices(
        Tensor::from_parts(vec![t, v, 3, oh, ow], data),
        grid.fps,
        grid.ring.clone(),
        grid.view_indices().to_vec(),
    )
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_grid(grid: &ImageGrid, factor: usize) -> Result<ImageGrid> {
    if factor == 0 {
        return Err(Error::shape("upsample factor must be ≥ 1"));
    }
    let (t, v, h, w) = (grid.frames(), grid.views(), grid.height(), grid.width());
    let (oh, ow) = (h * factor, w * factor);
    let src = grid.tensor().data();
    let mut data = vec![0.0; t * v * 3 * oh * ow];
    for cell in 0..t * v * 3 {
        let sbase = cell * h * w;
        let obase = cell * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                data[obase + oy * ow + ox] = src[sbase + (oy / factor) * w + ox / factor];
            }
        }
    }
    ImageGrid::with_view_indices(
        Tensor::from_parts(vec![t, v, 3, oh, ow], data),
        grid.fps,
        grid.ring.clone(),
        grid.view_indices().to_vec(),
    )
}

/// Sub-grid over the given view slots, preserving camera metadata.
pub fn slice_views(grid: &ImageGrid, indices: &[usize]) -> Result<ImageGrid> {
    let v = grid.views();
    let mut seen = vec![false; v];
    for &i in indices {
        if i >= v {
            return Err(Error::shape(format!("view index {} out of range (V={})", i, v)));
        }
        if seen[i] {
            return Err(Error::shape(format!("duplicate view index {}", i)));
        }
        seen[i] = true;
    }
    let picked = crate::tensor::ops::gather(grid.tensor(), 1, indices)?;
    let ring_indices: Vec<usize> = indices.iter().map(|&i| grid.view_indices()[i]).collect();
    ImageGrid::with_view_indices(picked, grid.fps, grid.ring.clone(), ring_indices)
}

/// Sub-grid over the given frame indices (ascending or arbitrary order).
pub fn slice_frames(grid: &ImageGrid, indices: &[usize]) -> Result<ImageGrid> {
    for &i in indices {
        if i >= grid.frames() {
            return Err(Error::shape(format!("frame index {} out of range (T={})", i, grid.frames())));
        }
    }
    let picked = crate::tensor::ops::gather(grid.tensor(), 0, indices)?;
    ImageGrid::with_view_indices(picked, grid.fps, grid.ring.clone(), grid.view_indices().to_vec())
}

/// Diagonal traversal: element k is cell (k mod T, k mod V) for
/// k in [0, max(T, V)). Returns the frames in traversal order.
pub fn extract_diagonal(grid: &ImageGrid) -> Vec<Tensor> {
    let (t, v) = (grid.frames(), grid.views());
    (0..t.max(v)).map(|k| grid.frame(k % t, k % v)).collect()
}
