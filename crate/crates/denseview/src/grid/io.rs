//! On-disk grid format: a directory of per-view tensor containers
//! `view_{v:02}.c4dv` (each [T, 3, H, W]) plus `meta.txt` with
//! `key=value` lines for T, V, H, W, fps, elevation.

use std::fs;
use std::path::Path;

use super::{CameraRing, ImageGrid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn save_grid(grid: &ImageGrid, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for v in 0..grid.views() {
        grid.view_video(v).save(dir.join(format!("view_{:02}.c4dv", v)))?;
    }
    let meta = format!(
        "T={}\nV={}\nH={}\nW={}\nfps={:?}\nelevation={:?}\n",
        grid.frames(),
        grid.views(),
        grid.height(),
        grid.width(),
        grid.fps,
        grid.ring.elevation,
    );
    fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

pub fn load_grid(dir: impl AsRef<Path>) -> Result<ImageGrid> {
    let dir = dir.as_ref();
    let meta = fs::read_to_string(dir.join("meta.txt"))
        .map_err(|e| Error::data(format!("{}: {}", dir.join("meta.txt").display(), e)))?;
    let mut t = None;
    let mut v = None;
    let mut h = None;
    let mut w = None;
    let mut fps = None;
    let mut elevation = None;
    for (lineno, line) in meta.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::data(format!("meta.txt line {}: no `=`", lineno + 1)))?;
        let parse_usize = || -> Result<usize> {
            value.parse().map_err(|_| Error::data(format!("meta.txt: bad {}={}", key, value)))
        };
        let parse_f64 = || -> Result<f64> {
            value.parse().map_err(|_| Error::data(format!("meta.txt: bad {}={}", key, value)))
        };
        match key {
            "T" => t = Some(parse_usize()?),
            "V" => v = Some(parse_usize()?),
            "H" => h = Some(parse_usize()?),
            "W" => w = Some(parse_usize()?),
            "fps" => fps = Some(parse_f64()?),
            "elevation" => elevation = Some(parse_f64()?),
            other => return Err(Error::data(format!("meta.txt: unknown key {}", other))),
        }
    }
    let (t, v, h, w) = match (t, v, h, w) {
        (Some(t), Some(v), Some(h), Some(w)) => (t, v, h, w),
        _ => return Err(Error::data("meta.txt: missing T/V/H/W")),
    };
    let fps = fps.ok_or_else(|| Error::data("meta.txt: missing fps"))?;
    let elevation = elevation.ok_or_else(|| Error::data("meta.txt: missing elevation"))?;

    let mut views = Vec::with_capacity(v);
    for vi in 0..v {
        let path = dir.join(format!("view_{:02}.c4dv", vi));
        let video = Tensor::load(&path)?;
        if video.shape() != [t, 3, h, w] {
            return Err(Error::data(format!(
                "{}: shape {:?}, meta says [{},3,{},{}]",
                path.display(),
                video.shape(),
                t,
                h,
                w
            )));
        }
        views.push(video);
    }
    // Interleave per-view videos back into [T, V, 3, H, W].
    let cell = 3 * h * w;
    let mut data = vec![0.0; t * v * cell];
    for (vi, video) in views.iter().enumerate() {
        for ti in 0..t {
            let dst = (ti * v + vi) * cell;
            data[dst..dst + cell].copy_from_slice(&video.data()[ti * cell..(ti + 1) * cell]);
        }
    }
    let ring = CameraRing::new(v.max(2), elevation, 2.5)?;
    ImageGrid::new(Tensor::from_parts(vec![t, v, 3, h, w], data), fps, ring)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_roundtrips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let ring = CameraRing::new(4, 0.1, 2.5).unwrap();
        let data = Tensor::from_fn(vec![3, 4, 3, 4, 4], |i| ((i * 13 + 5) % 97) as f64 / 96.0);
        let grid = ImageGrid::new(data, 10.0, ring).unwrap();
        save_grid(&grid, dir.path().join("g")).unwrap();
        let back = load_grid(dir.path().join("g")).unwrap();
        assert!(back.tensor().bit_eq(grid.tensor()));
        assert_eq!(back.fps, 10.0);
        assert_eq!(back.ring.elevation, 0.1);
    }

    #[test]
    fn missing_meta_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_grid(dir.path()), Err(Error::Data(_))));
    }
}
