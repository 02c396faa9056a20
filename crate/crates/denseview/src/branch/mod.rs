//! Trainable structure condition branch for the refinement stage.
//!
//! A stem of strided convolutions encodes the coarse multi-view layout
//! pixels down to each mainstream level's resolution; a conv block plus a
//! MAP cross-attention module produces per-site features, and zero-initialized
//! 1×1 projections emit the additive injections, so an untrained branch
//! leaves the mainstream bit-identical. Ablation variants differ only in
//! which sites they emit: every level of encoder and decoder (full),
//! encoder-side only (adapter-style), or decoder-side only (controlnet-style).

pub mod map;

use std::collections::BTreeMap;

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LatentGrid};
use crate::params::{ParameterStore, Partition};
use crate::tensor::{ops, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchVariant {
    /// Inject at every encoder and decoder level.
    Full,
    /// Decoder-side sites only.
    ControlNetStyle,
    /// Encoder-side sites only.
    AdapterStyle,
}

impl BranchVariant {
    pub fn tag(self) -> &'static str {
        match self {
            BranchVariant::Full => "full",
            BranchVariant::ControlNetStyle => "controlnet-style",
            BranchVariant::AdapterStyle => "adapter-style",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "full" => Ok(BranchVariant::Full),
            "controlnet-style" => Ok(BranchVariant::ControlNetStyle),
            "adapter-style" => Ok(BranchVariant::AdapterStyle),
            other => Err(Error::config(format!("unknown branch variant `{}`", other))),
        }
    }

    fn emits(self, site: &str) -> bool {
        match self {
            BranchVariant::Full => true,
            BranchVariant::ControlNetStyle => site.starts_with("dec."),
            BranchVariant::AdapterStyle => site.starts_with("enc."),
        }
    }

    /// Whether the decoder-side branch path is needed at all.
    fn needs_decoder_path(self) -> bool {
        !matches!(self, BranchVariant::AdapterStyle)
    }
}

#[derive(Debug, Clone)]
pub struct BranchConfig {
    pub variant: BranchVariant,
    /// Stride-2 stem convs taking layout pixels down to the first site's
    /// resolution: layout edge = latent edge · 2^stem_downsamples.
    pub stem_downsamples: usize,
    /// MAP attention heads (single-head by default).
    pub map_heads: usize,
}

impl BranchConfig {
    pub fn new(stem_downsamples: usize) -> Self {
        BranchConfig { variant: BranchVariant::Full, stem_downsamples, map_heads: 1 }
    }

    pub fn with_variant(mut self, variant: BranchVariant) -> Self {
        self.variant = variant;
        self
    }

    /// Sites this variant injects, in forward order.
    pub fn emitted_sites(&self, denoiser: &DenoiserConfig) -> Vec<String> {
        denoiser
            .sites()
            .into_iter()
            .filter(|(name, _, _)| self.variant.emits(name))
            .map(|(name, _, _)| name)
            .collect()
    }
}

/// Branch parameters (partition `branch`). Injection projections start at
/// exactly zero.
pub fn build_branch_params(
    denoiser: &DenoiserConfig,
    branch: &BranchConfig,
    seed: u64,
) -> Result<ParameterStore> {
    denoiser.validate()?;
    if branch.map_heads == 0 || denoiser.base_channels % branch.map_heads != 0 {
        return Err(Error::config(format!(
            "MAP heads {} must divide channel widths",
            branch.map_heads
        )));
    }
    let mut store = ParameterStore::new();
    let c0 = denoiser.base_channels;
    let c_ref = denoiser.latent_channels;
    let init = |name: &str, shape: Vec<usize>| -> Tensor {
        let fan_in: usize = shape[1..].iter().product();
        let mut rng = crate::rng::named_stream(seed, name);
        let t = crate::rng::normal_tensor(&mut rng, shape);
        ops::scale(&t, 1.0 / (fan_in as f64).sqrt()).expect("finite init")
    };

    // Stem: 3 → C0 with stride-2 convs down to the first site's resolution.
    for k in 0..branch.stem_downsamples.max(1) {
        let cin = if k == 0 { 3 } else { c0 };
        let name = format!("branch.stem.k{}.w", k);
        store.insert(name.clone(), init(&name, vec![c0, cin, 3, 3]), Partition::Branch);
        store.insert(format!("branch.stem.k{}.b", k), Tensor::zeros(vec![c0]), Partition::Branch);
    }

    let site_params = |store: &mut ParameterStore, site: &str, c: usize| {
        let conv = format!("branch.{}.conv.w", site);
        store.insert(conv.clone(), init(&conv, vec![c, c, 3, 3]), Partition::Branch);
        store.insert(format!("branch.{}.conv.b", site), Tensor::zeros(vec![c]), Partition::Branch);
        let q = format!("branch.{}.map.q.w", site);
        store.insert(q.clone(), init(&q, vec![c_ref, c]), Partition::Branch);
        store.insert(format!("branch.{}.map.q.b", site), Tensor::zeros(vec![c]), Partition::Branch);
        for stem in ["k", "v"] {
            let name = format!("branch.{}.map.{}.w", site, stem);
            store.insert(name.clone(), init(&name, vec![c, c]), Partition::Branch);
            store.insert(format!("branch.{}.map.{}.b", site, stem), Tensor::zeros(vec![c]), Partition::Branch);
        }
        store.insert(
            format!("branch.{}.inject.w", site),
            Tensor::zeros(vec![c, c, 1, 1]),
            Partition::Branch,
        );
        store.insert(format!("branch.{}.inject.b", site), Tensor::zeros(vec![c]), Partition::Branch);
    };

    for l in 0..denoiser.levels {
        let c = denoiser.channels_at(l);
        if l > 0 {
            let name = format!("branch.down.l{}.w", l);
            store.insert(name.clone(), init(&name, vec![c, denoiser.channels_at(l - 1), 3, 3]), Partition::Branch);
            store.insert(format!("branch.down.l{}.b", l), Tensor::zeros(vec![c]), Partition::Branch);
        }
        site_params(&mut store, &format!("enc.l{}", l), c);
    }
    if branch.variant.needs_decoder_path() {
        for l in (0..denoiser.levels).rev() {
            let c = denoiser.channels_at(l);
            site_params(&mut store, &format!("dec.l{}", l), c);
            if l > 0 {
                let prev = denoiser.channels_at(l - 1);
                let name = format!("branch.up.l{}.w", l);
                store.insert(name.clone(), init(&name, vec![prev, c, 3, 3]), Partition::Branch);
                store.insert(format!("branch.up.l{}.b", l), Tensor::zeros(vec![prev]), Partition::Branch);
            }
        }
    }
    Ok(store)
}

/// Layer-normalized (over channels) per-site reference features, average-
/// pooled to each site's resolution. The reference is data, not parameters,
/// so this happens outside the tape.
fn site_reference_features(
    ref_latent: &LatentGrid,
    factors: &[usize],
) -> Result<BTreeMap<usize, Tensor>> {
    let (normed, _) = ops::layernorm(ref_latent.tensor(), 2, 1e-6)?;
    let (t, c, h, w) = (
        ref_latent.frames(),
        ref_latent.channels(),
        ref_latent.height(),
        ref_latent.width(),
    );
    let base = ops::reshape(&normed, &[t, c, h, w])?;
    let mut out = BTreeMap::new();
    for &f in factors {
        if out.contains_key(&f) {
            continue;
        }
        out.insert(f, avg_pool(&base, f)?);
    }
    Ok(out)
}

fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let s = x.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!("pool factor {} vs {}×{}", factor, h, w)));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let src = x.data();
    let mut data = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let sbase = plane * h * w;
        let obase = plane * oh * ow;
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
    Ok(Tensor::from_parts(vec![n, c, oh, ow], data))
}

/// Runs the branch over the coarse layout, producing one zero-initialized
/// injection feature map per emitted site, keyed by site name. Features are
/// shaped [T·V', C_site, h_site, w_site].
pub fn branch_forward(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    denoiser: &DenoiserConfig,
    branch: &BranchConfig,
    layout: &ImageGrid,
    ref_latent: &LatentGrid,
) -> Result<BTreeMap<String, Var>> {
    if layout.frames() != ref_latent.frames() {
        return Err(Error::shape(format!(
            "layout has {} frames, reference {}",
            layout.frames(),
            ref_latent.frames()
        )));
    }
    let latent_edge = ref_latent.height();
    if ref_latent.width() != latent_edge {
        return Err(Error::shape("branch expects square latents".to_string()));
    }
    let expect_px = latent_edge << branch.stem_downsamples;
    if layout.height() != expect_px || layout.width() != expect_px {
        return Err(Error::shape(format!(
            "layout {}×{} incompatible with {} stem downsamples to latent edge {}",
            layout.height(),
            layout.width(),
            branch.stem_downsamples,
            latent_edge
        )));
    }

    let (t, v) = (layout.frames(), layout.views());
    let factors: Vec<usize> = denoiser.sites().iter().map(|(_, _, f)| *f).collect();
    let refs = site_reference_features(ref_latent, &factors)?;

    let var = |name: &str| -> Result<Var> {
        vars.get(name).cloned().ok_or_else(|| Error::data(format!("missing parameter `{}`", name)))
    };
    let conv = |tape: &mut Tape, x: &Var, prefix: &str, stride: usize| -> Result<Var> {
        let w = var(&format!("{}.w", prefix))?;
        let b = var(&format!("{}.b", prefix))?;
        let pad = (w.shape()[2] - 1) / 2; // same-size padding for the kernel
        let y = tape.conv2d(x, &w, stride, pad)?;
        let b4 = tape.reshape(&b, &[1, b.shape()[0], 1, 1])?;
        tape.add_broadcast(&y, &b4)
    };

    // Stem: layout pixels → [T·V', C0, latent, latent].
    let px = tape.constant(layout.tensor().clone());
    let mut feat = tape.reshape(&px, &[t * v, 3, layout.height(), layout.width()])?;
    for k in 0..branch.stem_downsamples.max(1) {
        let stride = if branch.stem_downsamples == 0 { 1 } else { 2 };
        feat = conv(tape, &feat, &format!("branch.stem.k{}", k), stride)?;
        feat = tape.silu(&feat)?;
    }

    let mut injections = BTreeMap::new();
    let site_pass = |tape: &mut Tape, feat: &Var, site: &str, factor: usize| -> Result<Var> {
        let h = conv(tape, feat, &format!("branch.{}.conv", site), 1)?;
        let h = tape.silu(&h)?;
        let h = tape.add(&h, feat)?;
        let f_ref = refs.get(&factor).expect("pooled reference");
        let h = map_over_frames(tape, vars, &format!("branch.{}.map", site), &h, f_ref, t, v, branch.map_heads)?;
        Ok(h)
    };

    for l in 0..denoiser.levels {
        if l > 0 {
            feat = conv(tape, &feat, &format!("branch.down.l{}", l), 2)?;
            feat = tape.silu(&feat)?;
        }
        let site = format!("enc.l{}", l);
        feat = site_pass(tape, &feat, &site, 1 << l)?;
        if branch.variant.emits(&site) {
            let inj = conv(tape, &feat, &format!("branch.{}.inject", site), 1)?;
            injections.insert(site, inj);
        }
    }

    if branch.variant.needs_decoder_path() {
        for l in (0..denoiser.levels).rev() {
            let site = format!("dec.l{}", l);
            feat = site_pass(tape, &feat, &site, 1 << l)?;
            if branch.variant.emits(&site) {
                let inj = conv(tape, &feat, &format!("branch.{}.inject", site), 1)?;
                injections.insert(site, inj);
            }
            if l > 0 {
                feat = upsample2(tape, &feat)?;
                feat = conv(tape, &feat, &format!("branch.up.l{}", l), 1)?;
                feat = tape.silu(&feat)?;
            }
        }
    }
    Ok(injections)
}

/// MAP over each frame: reference features (repeated V times) query the
/// layout features; the result is residual-added to the layout features.
#[allow(clippy::too_many_arguments)]
fn map_over_frames(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    f_lr: &Var,
    f_ref: &Tensor, // [T, C_ref, h, w]
    frames: usize,
    views: usize,
    heads: usize,
) -> Result<Var> {
    let s = f_lr.shape().to_vec();
    let (nc, h, w) = (s[1], s[2], s[3]);
    let c_ref = f_ref.shape()[1];
    let whv = views * h * w;
    let mut outputs = Vec::with_capacity(frames);
    for t in 0..frames {
        let cells = tape.slice(f_lr, 0, t * views, views)?; // [V, N_c, h, w]
        let tok = tape.transpose(&cells, &[0, 2, 3, 1])?;
        let lr_tokens = tape.reshape(&tok, &[whv, nc])?;

        let rf = ops::slice(f_ref, 0, t, 1)?; // [1, C_ref, h, w]
        let rf = ops::transpose(&ops::reshape(&rf, &[c_ref, h, w])?, &[1, 2, 0])?; // [h,w,C_ref]
        let rf = ops::reshape(&rf, &[1, h, w, c_ref])?;
        let rf = ops::broadcast(&rf, &[views, h, w, c_ref])?;
        let ref_tokens = tape.constant(ops::reshape(&rf, &[whv, c_ref])?);

        let operands = map::map_project(tape, vars, prefix, &ref_tokens, &lr_tokens)?;
        let attended = map::map_attend_frame(tape, &operands, heads)?;
        let fused = tape.add(&attended, &lr_tokens)?;
        let back = tape.reshape(&fused, &[views, h, w, nc])?;
        let back = tape.transpose(&back, &[0, 3, 1, 2])?;
        outputs.push(back);
    }
    let refs: Vec<&Var> = outputs.iter().collect();
    tape.concat(&refs, 0)
}

fn upsample2(tape: &mut Tape, x: &Var) -> Result<Var> {
    let s = x.shape().to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let r = tape.reshape(x, &[b, c, h, 1, w, 1])?;
    let bcast = tape.broadcast(&r, &[b, c, h, 2, w, 2])?;
    tape.reshape(&bcast, &[b, c, 2 * h, 2 * w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CameraRing;

    fn tiny_denoiser() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 3,
            base_channels: 8,
            levels: 2,
            heads: 2,
            lora_rank: 2,
            lora_scale: 1.0,
            embed_width: 8,
            gn_groups: 2,
        }
    }

    fn layout_and_ref(t: usize, v: usize, px: usize, latent: usize) -> (ImageGrid, LatentGrid) {
        let ring = CameraRing::new(v.max(2), 0.0, 2.5).unwrap();
        let pixels = Tensor::from_fn(vec![t, v, 3, px, px], |i| ((i * 13 + 7) % 97) as f64 / 96.0);
        let layout = ImageGrid::new(pixels, 10.0, ring.clone()).unwrap();
        let rl = Tensor::from_fn(vec![t, 1, 3, latent, latent], |i| (i as f64 * 0.17).sin());
        let ref_latent = LatentGrid::new(rl, ring, vec![0]).unwrap();
        (layout, ref_latent)
    }

    fn run_variant(variant: BranchVariant) -> BTreeMap<String, Tensor> {
        let dcfg = tiny_denoiser();
        let bcfg = BranchConfig::new(1).with_variant(variant);
        let params = build_branch_params(&dcfg, &bcfg, 3).unwrap();
        let (layout, ref_latent) = layout_and_ref(2, 2, 8, 4);
        let mut tape = Tape::inference();
        let vars = params.vars(&mut tape, &[]);
        branch_forward(&mut tape, &vars, &dcfg, &bcfg, &layout, &ref_latent)
            .unwrap()
            .into_iter()
            .map(|(k, v)| (k, v.tensor().clone()))
            .collect()
    }

    #[test]
    fn fresh_branch_injections_are_exactly_zero() {
        for (_, feat) in run_variant(BranchVariant::Full) {
            assert!(feat.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn site_sets_follow_variant() {
        let full: Vec<String> = run_variant(BranchVariant::Full).into_keys().collect();
        assert_eq!(full, vec!["dec.l0", "dec.l1", "enc.l0", "enc.l1"]);
        let adapter: Vec<String> = run_variant(BranchVariant::AdapterStyle).into_keys().collect();
        assert_eq!(adapter, vec!["enc.l0", "enc.l1"]);
        let controlnet: Vec<String> = run_variant(BranchVariant::ControlNetStyle).into_keys().collect();
        assert_eq!(controlnet, vec!["dec.l0", "dec.l1"]);
    }

    #[test]
    fn injection_shapes_match_sites() {
        let dcfg = tiny_denoiser();
        let out = run_variant(BranchVariant::Full);
        // latent edge 4: enc.l0 at 4×4 (C0=8), enc.l1 at 2×2 (C=16)
        assert_eq!(out["enc.l0"].shape(), &[4, dcfg.base_channels, 4, 4]);
        assert_eq!(out["enc.l1"].shape(), &[4, 2 * dcfg.base_channels, 2, 2]);
        assert_eq!(out["dec.l0"].shape(), &[4, dcfg.base_channels, 4, 4]);
    }

    #[test]
    fn branch_forward_is_deterministic() {
        let a = run_variant(BranchVariant::Full);
        let b = run_variant(BranchVariant::Full);
        for (k, v) in &a {
            assert!(v.bit_eq(&b[k]));
        }
    }

    #[test]
    fn layout_resolution_must_match_stem() {
        let dcfg = tiny_denoiser();
        let bcfg = BranchConfig::new(1);
        let params = build_branch_params(&dcfg, &bcfg, 3).unwrap();
        let (layout, ref_latent) = layout_and_ref(2, 2, 16, 4); // 16 ≠ 4·2¹
        let mut tape = Tape::inference();
        let vars = params.vars(&mut tape, &[]);
        assert!(branch_forward(&mut tape, &vars, &dcfg, &bcfg, &layout, &ref_latent).is_err());
    }
}
