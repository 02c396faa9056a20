//! Fixed sinusoidal embeddings for diffusion step, frame index, and spatial
//! position, plus the (sin φ, cos φ) azimuth encoding rows.

use crate::tensor::Tensor;

/// Interleaved sin/cos features of a scalar position.
pub fn sinusoid_vec(pos: f64, width: usize) -> Tensor {
    let data: Vec<f64> = (0..width)
        .map(|i| {
            let pair = (i / 2) as f64;
            let freq = (10_000f64).powf(-2.0 * pair / width as f64);
            if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect();
    Tensor::from_parts(vec![width], data)
}

/// Per-frame-index embedding matrix [T, width], scaled for additive use.
pub fn frame_embedding(frames: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(frames * width);
    for t in 0..frames {
        data.extend(sinusoid_vec(t as f64, width).data().iter().map(|v| 0.25 * v));
    }
    Tensor::from_parts(vec![frames, width], data)
}

/// Spatial position embedding [C, H, W]: first half of the channels encode x,
/// the rest encode y. Scaled for additive use.
pub fn spatial_embedding(channels: usize, height: usize, width: usize) -> Tensor {
    let half = channels / 2;
    let mut data = vec![0.0; channels * height * width];
    for c in 0..channels {
        let (axis_pos, k) = if c < half { (0, c) } else { (1, c - half) };
        let denom = if axis_pos == 0 { half.max(1) } else { (channels - half).max(1) };
        let pair = (k / 2) as f64;
        let freq = (10_000f64).powf(-2.0 * pair / denom as f64);
        for y in 0..height {
            for x in 0..width {
                let pos = if axis_pos == 0 { x as f64 } else { y as f64 };
                let v = if k % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
                data[c * height * width + y * width + x] = 0.25 * v;
            }
        }
    }
    Tensor::from_parts(vec![channels, height, width], data)
}

/// Rows of (sin φ, cos φ) for a list of azimuths: [V, 2].
pub fn azimuth_rows(azimuths: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(azimuths.len() * 2);
    for &phi in azimuths {
        data.push(phi.sin());
        data.push(phi.cos());
    }
    Tensor::from_parts(vec![azimuths.len(), 2], data)
}
