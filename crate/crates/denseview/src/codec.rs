//! Exactly invertible pixel↔latent codec.
//!
//! Each non-overlapping `patch×patch` RGB block is flattened to a vector of
//! 3·patch² values and mixed by a fixed orthonormal matrix, giving a latent
//! with 3·patch² channels at 1/patch spatial resolution. Decoding applies
//! the transpose, so `decode(encode(x)) = x` up to rounding and norms are
//! preserved. The mixing matrix derives deterministically from a seed.

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LatentGrid};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CodecSpec {
    patch: usize,
    seed: u64,
    /// Row-major (channels × channels) orthonormal mixing matrix.
    mixing: Tensor,
}

impl CodecSpec {
    pub fn new(patch: usize, seed: u64) -> Result<Self> {
        if patch == 0 {
            return Err(Error::config("codec patch edge must be ≥ 1".to_string()));
        }
        let n = 3 * patch * patch;
        let mixing = orthonormal_matrix(n, seed);
        Ok(CodecSpec { patch, seed, mixing })
    }

    /// Patch edge 4 → 48 latent channels.
    pub fn default_spec() -> Self {
        CodecSpec::new(4, 0x6c47).expect("default codec")
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn mixing(&self) -> &Tensor {
        &self.mixing
    }

    /// Max |MᵀM − I| entry; construction keeps this below 1e-12.
    pub fn orthonormality_defect(&self) -> f64 {
        let n = self.channels();
        let m = self.mixing.data();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for k in 0..n {
                    dot += m[k * n + i] * m[k * n + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Seeded Gaussian matrix orthonormalized by modified Gram–Schmidt with one
/// re-orthogonalization pass.
fn orthonormal_matrix(n: usize, seed: u64) -> Tensor {
    let mut rng = rng::named_stream(seed, "codec.mixing");
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|_| rng::normal_tensor(&mut rng, vec![n]).data().to_vec())
        .collect();
    for i in 0..n {
        for _pass in 0..2 {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                for k in 0..n {
                    rows[i][k] -= dot * rows[j][k];
                }
            }
        }
        let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in rows[i].iter_mut() {
            *v /= norm;
        }
    }
    Tensor::from_parts(vec![n, n], rows.into_iter().flatten().collect())
}

/// Pixels → latents. H and W must be divisible by the patch edge.
pub fn encode(grid: &ImageGrid, spec: &CodecSpec) -> Result<LatentGrid> {
    let p = spec.patch;
    if grid.height() % p != 0 || grid.width() % p != 0 {
        return Err(Error::shape(format!(
            "resolution {}×{} not divisible by patch {}",
            grid.height(),
            grid.width(),
            p
        )));
    }
    let (t, v, h, w) = (grid.frames(), grid.views(), grid.height(), grid.width());
    let (lh, lw) = (h / p, w / p);
    let c = spec.channels();
    let m = spec.mixing.data();
    let src = grid.tensor().data();

    let mut data = vec![0.0; t * v * c * lh * lw];
    for cell in 0..t * v {
        let sbase = cell * 3 * h * w;
        let obase = cell * c * lh * lw;
        for by in 0..lh {
            for bx in 0..lw {
                let mut patch = vec![0.0; c];
                for ch in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            patch[(ch * p + py) * p + px] =
                                src[sbase + ch * h * w + (by * p + py) * w + bx * p + px];
                        }
                    }
                }
                for row in 0..c {
                    let mut acc = 0.0;
                    for k in 0..c {
                        acc += m[row * c + k] * patch[k];
                    }
                    data[obase + row * lh * lw + by * lw + bx] = acc;
                }
            }
        }
    }
    LatentGrid::new(
        Tensor::from_parts(vec![t, v, c, lh, lw], data),
        grid.ring.clone(),
        grid.view_indices().to_vec(),
    )
}

/// Latents → pixels (transpose mixing), clamped into [0, 1].
pub fn decode(latent: &LatentGrid, spec: &CodecSpec, fps: f64) -> Result<ImageGrid> {
    decode_raw(latent, spec).and_then(|(data, shape)| {
        ImageGrid::from_tensor_clamped(
            Tensor::from_parts(shape, data),
            fps,
            latent.ring.clone(),
            latent.view_indices().to_vec(),
        )
    })
}

fn decode_raw(latent: &LatentGrid, spec: &CodecSpec) -> Result<(Vec<f64>, Vec<usize>)> {
    let p = spec.patch;
    let c = spec.channels();
    if latent.channels() != c {
        return Err(Error::shape(format!(
            "latent has {} channels, codec expects {}",
            latent.channels(),
            c
        )));
    }
    let (t, v, lh, lw) = (latent.frames(), latent.views(), latent.height(), latent.width());
    let (h, w) = (lh * p, lw * p);
    let m = spec.mixing.data();
    let src = latent.tensor().data();

    let mut data = vec![0.0; t * v * 3 * h * w];
    for cell in 0..t * v {
        let sbase = cell * c * lh * lw;
        let obase = cell * 3 * h * w;
        for by in 0..lh {
            for bx in 0..lw {
                let mut latent_vec = vec![0.0; c];
                for row in 0..c {
                    latent_vec[row] = src[sbase + row * lh * lw + by * lw + bx];
                }
                for k in 0..c {
                    // Mᵀ row k = column k of M.
                    let mut acc = 0.0;
                    for row in 0..c {
                        acc += m[row * c + k] * latent_vec[row];
                    }
                    let ch = k / (p * p);
                    let py = (k / p) % p;
                    let px = k % p;
                    data[obase + ch * h * w + (by * p + py) * w + bx * p + px] = acc;
                }
            }
        }
    }
    Ok((data, vec![t, v, 3, h, w]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CameraRing;

    fn toy_grid(h: usize, w: usize) -> ImageGrid {
        let ring = CameraRing::new(2, 0.0, 2.5).unwrap();
        let data = Tensor::from_fn(vec![2, 2, 3, h, w], |i| ((i * 31 + 7) % 89) as f64 / 88.0);
        ImageGrid::new(data, 10.0, ring).unwrap()
    }

    #[test]
    fn mixing_is_orthonormal() {
        let spec = CodecSpec::default_spec();
        assert!(spec.orthonormality_defect() < 1e-10);
    }

    #[test]
    fn same_seed_same_matrix() {
        let a = CodecSpec::new(4, 9).unwrap();
        let b = CodecSpec::new(4, 9).unwrap();
        assert!(a.mixing().bit_eq(b.mixing()));
        let c = CodecSpec::new(4, 10).unwrap();
        assert!(!a.mixing().bit_eq(c.mixing()));
    }

    #[test]
    fn encode_shape_32_to_8x8x48() {
        let spec = CodecSpec::default_spec();
        let grid = toy_grid(32, 32);
        let latent = encode(&grid, &spec).unwrap();
        assert_eq!(latent.channels(), 48);
        assert_eq!((latent.height(), latent.width()), (8, 8));
        assert_eq!((latent.frames(), latent.views()), (2, 2));
    }

    #[test]
    fn indivisible_resolution_rejected() {
        let spec = CodecSpec::default_spec();
        let grid = toy_grid(30, 32);
        assert!(encode(&grid, &spec).is_err());
    }

    #[test]
    fn zero_frame_encodes_to_zero_latent() {
        let spec = CodecSpec::default_spec();
        let ring = CameraRing::new(2, 0.0, 2.5).unwrap();
        let grid = ImageGrid::new(Tensor::zeros(vec![1, 2, 3, 8, 8]), 10.0, ring).unwrap();
        let latent = encode(&grid, &spec).unwrap();
        assert!(latent.tensor().data().iter().all(|&v| v == 0.0));
        let back = decode(&latent, &spec, 10.0).unwrap();
        assert!(back.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn roundtrip_identity() {
        let spec = CodecSpec::default_spec();
        let grid = toy_grid(16, 24);
        let back = decode(&encode(&grid, &spec).unwrap(), &spec, grid.fps).unwrap();
        assert!(grid.max_abs_diff(&back).unwrap() < 1e-9);
    }

    #[test]
    fn norm_preserved() {
        let spec = CodecSpec::default_spec();
        let grid = toy_grid(16, 16);
        let latent = encode(&grid, &spec).unwrap();
        assert!((latent.tensor().norm() - grid.tensor().norm()).abs() < 1e-9);
    }

    #[test]
    fn encode_is_linear() {
        let spec = CodecSpec::default_spec();
        let ring = CameraRing::new(2, 0.0, 2.5).unwrap();
        let xa = Tensor::from_fn(vec![1, 2, 3, 8, 8], |i| ((i * 13) % 50) as f64 / 100.0);
        let xb = Tensor::from_fn(vec![1, 2, 3, 8, 8], |i| ((i * 29) % 50) as f64 / 100.0);
        let (a, b) = (0.3, 0.6);
        let combo = Tensor::from_fn(vec![1, 2, 3, 8, 8], |i| {
            a * xa.data()[i] + b * xb.data()[i]
        });
        let ga = ImageGrid::new(xa, 10.0, ring.clone()).unwrap();
        let gb = ImageGrid::new(xb, 10.0, ring.clone()).unwrap();
        let gc = ImageGrid::new(combo, 10.0, ring).unwrap();
        let (la, lb, lc) = (
            encode(&ga, &spec).unwrap(),
            encode(&gb, &spec).unwrap(),
            encode(&gc, &spec).unwrap(),
        );
        let expect = Tensor::from_fn(la.tensor().shape().to_vec(), |i| {
            a * la.tensor().data()[i] + b * lb.tensor().data()[i]
        });
        assert!(lc.tensor().max_abs_diff(&expect).unwrap() < 1e-9);
    }
}
