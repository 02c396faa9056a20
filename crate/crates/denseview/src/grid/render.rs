//! Deterministic orthographic renderer producing dynamic multi-view videos.
//!
//! Object rotation is folded into the camera azimuth, so a scene spinning at
//! k/V turns per frame reproduces the ring's own view shift bit-exactly when
//! V is a power of two (all angles stay dyadic). Background is a constant
//! (black by default); the object sits at the origin.

use rand::Rng;
use rayon::prelude::*;

use super::{CameraRing, ImageGrid};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Axis-aligned box with the given half-extent.
    Box { half: f64 },
    /// Centered sphere.
    Sphere { radius: f64 },
    /// Two spheres separated along the object x-axis.
    TwoBody { radius_a: f64, radius_b: f64, separation: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ColorMap {
    /// One color everywhere.
    Uniform { rgb: [f64; 3] },
    /// Seed-derived palette: per box face / per body.
    Palette,
    /// 3-D checker pattern in object space; `cells` counts cells per unit.
    Checker { cells: f64 },
}

/// Motion is a pure function of the frame index. Rotation is in turns per
/// frame; translation displaces the object along `translation_axis` (object
/// frame) by `amp·sin(2π·freq·t)`; deformation scales the primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionProgram {
    pub spin_turns_per_frame: f64,
    pub translation_amp: f64,
    pub translation_axis: [f64; 3],
    pub translation_freq: f64,
    pub deform_amp: f64,
    pub deform_freq: f64,
}

impl MotionProgram {
    pub fn still() -> Self {
        MotionProgram {
            spin_turns_per_frame: 0.0,
            translation_amp: 0.0,
            translation_axis: [0.0, 0.0, 1.0],
            translation_freq: 0.0,
            deform_amp: 0.0,
            deform_freq: 0.0,
        }
    }

    pub fn spin(turns_per_frame: f64) -> Self {
        MotionProgram { spin_turns_per_frame: turns_per_frame, ..MotionProgram::still() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub primitive: Primitive,
    pub color: ColorMap,
    pub motion: MotionProgram,
    pub seed: u64,
    pub background: f64,
}

impl SceneSpec {
    pub fn new(primitive: Primitive, color: ColorMap, motion: MotionProgram, seed: u64) -> Self {
        SceneSpec { primitive, color, motion, seed, background: 0.0 }
    }
}

/// Renders the T×V image grid for a scene: cell (t, v) is the orthographic
/// projection of the scene at time t from ring azimuth v.
pub fn render_scene(
    spec: &SceneSpec,
    ring: &CameraRing,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<ImageGrid> {
    let views = ring.views();
    let palette = palette_from_seed(spec.seed);
    let cell = 3 * height * width;
    let mut data = vec![0.0; frames * views * cell];
    data.par_chunks_mut(cell).enumerate().for_each(|(idx, out)| {
        let t = idx / views;
        let v = idx % views;
        render_cell(spec, ring, &palette, t, v, height, width, out);
    });
    ImageGrid::new(
        Tensor::from_parts(vec![frames, views, 3, height, width], data),
        10.0,
        ring.clone(),
    )
}

fn palette_from_seed(seed: u64) -> [[f64; 3]; 6] {
    let mut rng = rng::named_stream(seed, "scene.palette");
    let mut palette = [[0.0; 3]; 6];
    for color in palette.iter_mut() {
        for ch in color.iter_mut() {
            *ch = rng.gen_range(0.25..1.0);
        }
    }
    palette
}

#[allow(clippy::too_many_arguments)]
fn render_cell(
    spec: &SceneSpec,
    ring: &CameraRing,
    palette: &[[f64; 3]; 6],
    t: usize,
    v: usize,
    height: usize,
    width: usize,
    out: &mut [f64],
) {
    let m = &spec.motion;
    // Relative azimuth in turns: the object's spin moves the camera backwards.
    // Wrapping into [0, 1) keeps whole-turn-apart angles bit-identical.
    let psi_turns = (ring.azimuth_turns(v) - m.spin_turns_per_frame * t as f64).rem_euclid(1.0);
    let phi = std::f64::consts::TAU * psi_turns;
    let (sp, cp) = (phi.sin(), phi.cos());
    let (se, ce) = (ring.elevation.sin(), ring.elevation.cos());

    let eye = [ring.radius * ce * cp, ring.radius * ce * sp, ring.radius * se];
    let fwd = [-ce * cp, -ce * sp, -se];
    let right = [-sp, cp, 0.0];
    let up = [-se * cp, -se * sp, ce];

    let tphase = std::f64::consts::TAU * m.translation_freq * t as f64;
    let offset_mag = m.translation_amp * tphase.sin();
    let axis = normalize(m.translation_axis);
    let offset = [axis[0] * offset_mag, axis[1] * offset_mag, axis[2] * offset_mag];
    let dphase = std::f64::consts::TAU * m.deform_freq * t as f64;
    let scale = (1.0 + m.deform_amp * dphase.sin()).max(0.05);

    let half_view = 1.4; // orthographic half-width framing a unit-scale object

    for py in 0..height {
        for px in 0..width {
            let x_ndc = ((px as f64 + 0.5) / width as f64) * 2.0 - 1.0;
            let y_ndc = 1.0 - ((py as f64 + 0.5) / height as f64) * 2.0;
            let origin = [
                eye[0] + half_view * (x_ndc * right[0] + y_ndc * up[0]) - offset[0],
                eye[1] + half_view * (x_ndc * right[1] + y_ndc * up[1]) - offset[1],
                eye[2] + half_view * (x_ndc * right[2] + y_ndc * up[2]) - offset[2],
            ];
            let hit = intersect(&spec.primitive, scale, origin, fwd);
            let base = (py * width + px) as usize;
            let n = height * width;
            match hit {
                Some(h) => {
                    let rgb = shade(spec, palette, &h, fwd);
                    out[base] = rgb[0];
                    out[base + n] = rgb[1];
                    out[base + 2 * n] = rgb[2];
                }
                None => {
                    out[base] = spec.background;
                    out[base + n] = spec.background;
                    out[base + 2 * n] = spec.background;
                }
            }
        }
    }
}

struct Hit {
    point: [f64; 3],
    normal: [f64; 3],
    /// Palette slot: box face 0..6, body 0/1.
    part: usize,
}

fn intersect(prim: &Primitive, scale: f64, o: [f64; 3], d: [f64; 3]) -> Option<Hit> {
    match *prim {
        Primitive::Sphere { radius } => sphere_hit(o, d, [0.0; 3], radius * scale, 0),
        Primitive::Box { half } => box_hit(o, d, half * scale),
        Primitive::TwoBody { radius_a, radius_b, separation } => {
            let s = separation * 0.5 * scale;
            let a = sphere_hit(o, d, [-s, 0.0, 0.0], radius_a * scale, 0);
            let b = sphere_hit(o, d, [s, 0.0, 0.0], radius_b * scale, 1);
            match (a, b) {
                (Some(ha), Some(hb)) => {
                    if dist2(ha.point, o) <= dist2(hb.point, o) {
                        Some(ha)
                    } else {
                        Some(hb)
                    }
                }
                (h, None) | (None, h) => h,
            }
        }
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn sphere_hit(o: [f64; 3], d: [f64; 3], center: [f64; 3], radius: f64, part: usize) -> Option<Hit> {
    let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
    let b = oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2];
    let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = -b - disc.sqrt();
    if s < 0.0 {
        return None;
    }
    let point = [o[0] + s * d[0], o[1] + s * d[1], o[2] + s * d[2]];
    let inv_r = 1.0 / radius;
    let normal = [
        (point[0] - center[0]) * inv_r,
        (point[1] - center[1]) * inv_r,
        (point[2] - center[2]) * inv_r,
    ];
    Some(Hit { point, normal, part })
}

fn box_hit(o: [f64; 3], d: [f64; 3], half: f64) -> Option<Hit> {
    // Slab method; entry face determines the normal.
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut near_sign = 1.0;
    for ax in 0..3 {
        if d[ax].abs() < 1e-12 {
            if o[ax].abs() > half {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[ax];
        let mut t0 = (-half - o[ax]) * inv;
        let mut t1 = (half - o[ax]) * inv;
        let mut sign = -1.0;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            sign = 1.0;
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = ax;
            near_sign = sign;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near < 0.0 {
        return None;
    }
    let point = [o[0] + t_near * d[0], o[1] + t_near * d[1], o[2] + t_near * d[2]];
    let mut normal = [0.0; 3];
    normal[near_axis] = near_sign;
    let part = near_axis * 2 + if near_sign > 0.0 { 0 } else { 1 };
    Some(Hit { point, normal, part })
}

fn shade(spec: &SceneSpec, palette: &[[f64; 3]; 6], hit: &Hit, view_dir: [f64; 3]) -> [f64; 3] {
    let base = match spec.color {
        ColorMap::Uniform { rgb } => rgb,
        ColorMap::Palette => palette[hit.part % 6],
        ColorMap::Checker { cells } => {
            let ix = (hit.point[0] * cells).floor() as i64
                + (hit.point[1] * cells).floor() as i64
                + (hit.point[2] * cells).floor() as i64;
            if ix.rem_euclid(2) == 0 {
                palette[hit.part % 6]
            } else {
                [0.08, 0.08, 0.08]
            }
        }
    };
    let ndotv =
        (hit.normal[0] * view_dir[0] + hit.normal[1] * view_dir[1] + hit.normal[2] * view_dir[2])
            .abs();
    let lum = 0.35 + 0.65 * ndotv;
    [base[0] * lum, base[1] * lum, base[2] * lum]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 {
        [0.0, 0.0, 1.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(v: usize) -> CameraRing {
        CameraRing::new(v, 0.0, 2.5).unwrap()
    }

    #[test]
    fn rendering_is_a_pure_function() {
        let spec = SceneSpec::new(
            Primitive::Box { half: 0.6 },
            ColorMap::Palette,
            MotionProgram::spin(0.03),
            42,
        );
        let a = render_scene(&spec, &ring(4), 3, 8, 8).unwrap();
        let b = render_scene(&spec, &ring(4), 3, 8, 8).unwrap();
        assert!(a.tensor().bit_eq(b.tensor()));
    }

    #[test]
    fn static_box_frames_identical_over_time() {
        let spec = SceneSpec::new(
            Primitive::Box { half: 0.6 },
            ColorMap::Palette,
            MotionProgram::still(),
            7,
        );
        let grid = render_scene(&spec, &ring(4), 4, 8, 8).unwrap();
        for v in 0..4 {
            let first = grid.frame(0, v);
            for t in 1..4 {
                assert!(grid.frame(t, v).bit_eq(&first));
            }
        }
    }

    #[test]
    fn uniform_sphere_views_identical() {
        let spec = SceneSpec::new(
            Primitive::Sphere { radius: 0.7 },
            ColorMap::Uniform { rgb: [0.8, 0.4, 0.2] },
            MotionProgram::still(),
            0,
        );
        let grid = render_scene(&spec, &ring(8), 1, 8, 8).unwrap();
        let first = grid.frame(0, 0);
        for v in 1..8 {
            assert!(grid.frame(0, v).max_abs_diff(&first).unwrap() < 1e-12);
        }
    }

    #[test]
    fn box_spinning_at_ring_rate_shifts_views() {
        // spin = 1/V turns per frame → cell (t+1, v) == cell (t, v−1 mod V).
        // Power-of-two V keeps every angle dyadic, so equality is bit-exact.
        let v_count = 8;
        let spec = SceneSpec::new(
            Primitive::Box { half: 0.6 },
            ColorMap::Palette,
            MotionProgram::spin(1.0 / v_count as f64),
            3,
        );
        let grid = render_scene(&spec, &ring(v_count), 3, 8, 8).unwrap();
        for t in 0..2 {
            for v in 0..v_count {
                let prev_v = (v + v_count - 1) % v_count;
                let a = grid.frame(t + 1, v);
                let b = grid.frame(t, prev_v);
                assert!(
                    a.bit_eq(&b),
                    "cell ({},{}) != cell ({},{})",
                    t + 1,
                    v,
                    t,
                    prev_v
                );
            }
        }
    }

    #[test]
    fn object_is_centered_and_background_black() {
        let spec = SceneSpec::new(
            Primitive::Sphere { radius: 0.5 },
            ColorMap::Uniform { rgb: [1.0, 1.0, 1.0] },
            MotionProgram::still(),
            0,
        );
        let grid = render_scene(&spec, &ring(4), 1, 16, 16).unwrap();
        let f = grid.frame(0, 0);
        // corners are background, center is lit
        assert_eq!(f.at(&[0, 0, 0]), 0.0);
        assert!(f.at(&[0, 8, 8]) > 0.5);
    }
}
