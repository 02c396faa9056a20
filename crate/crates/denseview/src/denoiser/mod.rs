//! The base ε-prediction network: a two-level UNet over the latent grid whose
//! blocks interleave three attention families — spatial (per cell), frame
//! (along T, fusing the reference video), and view (along V, fusing the
//! reference views with azimuth embeddings) — plus sinusoidal step embedding
//! and optional low-rank adapters on every attention projection.
//!
//! Conditioning latents travel through the per-cell stages as extra batch
//! cells and contribute key/value tokens to their attention family; only the
//! T×V main cells reach the output head.

pub mod attention;
pub mod embed;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::params::{ParameterStore, Partition};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

use attention::{attend, AttnProj};

#[derive(Debug, Clone)]
pub struct DenoiserConfig {
    /// Latent channel count coming from the codec.
    pub latent_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub heads: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub embed_width: usize,
    pub gn_groups: usize,
}

impl DenoiserConfig {
    pub fn new(latent_channels: usize) -> Self {
        DenoiserConfig {
            latent_channels,
            base_channels: 32,
            levels: 2,
            heads: 4,
            lora_rank: 4,
            lora_scale: 1.0,
            embed_width: 64,
            gn_groups: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("denoiser needs ≥ 1 level".to_string()));
        }
        if self.heads == 0 || self.base_channels % self.heads != 0 {
            return Err(Error::config(format!(
                "channels {} not divisible by {} heads",
                self.base_channels, self.heads
            )));
        }
        if self.gn_groups == 0 || self.base_channels % self.gn_groups != 0 {
            return Err(Error::config(format!(
                "groupnorm groups {} must divide base channels {}",
                self.gn_groups, self.base_channels
            )));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Block positions carrying the three attention families, encoder order
    /// then decoder order.
    pub fn attention_blocks(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.levels).map(|l| format!("enc.l{}", l)).collect();
        out.extend((0..self.levels).rev().map(|l| format!("dec.l{}", l)));
        out
    }

    /// Injection site names and their (channels, downsample factor) relative
    /// to the latent resolution, in forward order.
    pub fn sites(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for l in 0..self.levels {
            out.push((format!("enc.l{}", l), self.channels_at(l), 1 << l));
        }
        for l in (0..self.levels).rev() {
            out.push((format!("dec.l{}", l), self.channels_at(l), 1 << l));
        }
        out
    }
}

/// Conditioning for the grid denoiser: the reference monocular video (one
/// latent per frame) and the reference views (one latent per view).
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub ref_video: LatentGrid,
    pub ref_views: LatentGrid,
}

impl ConditioningBundle {
    pub fn validate_against(&self, z: &LatentGrid) -> Result<()> {
        if self.ref_video.views() != 1 || self.ref_video.frames() != z.frames() {
            return Err(Error::shape(format!(
                "ref video [{}×{}] must be [T={}×1]",
                self.ref_video.frames(),
                self.ref_video.views(),
                z.frames()
            )));
        }
        if self.ref_views.frames() != 1 || self.ref_views.views() != z.views() {
            return Err(Error::shape(format!(
                "ref views [{}×{}] must be [1×V={}]",
                self.ref_views.frames(),
                self.ref_views.views(),
                z.views()
            )));
        }
        for grid in [&self.ref_video, &self.ref_views] {
            if grid.channels() != z.channels()
                || grid.height() != z.height()
                || grid.width() != z.width()
            {
                return Err(Error::shape(format!(
                    "conditioning latent [{},{},{}] vs grid [{},{},{}]",
                    grid.channels(),
                    grid.height(),
                    grid.width(),
                    z.channels(),
                    z.height(),
                    z.width()
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// parameter construction
// ---------------------------------------------------------------------------

fn normal_param(seed: u64, name: &str, shape: Vec<usize>, std: f64) -> Tensor {
    let mut rng = rng::named_stream(seed, name);
    let t = rng::normal_tensor(&mut rng, shape);
    crate::tensor::ops::scale(&t, std).expect("finite init")
}

fn conv_init(seed: u64, name: &str, cout: usize, cin: usize, k: usize) -> Tensor {
    let fan_in = (cin * k * k) as f64;
    normal_param(seed, name, vec![cout, cin, k, k], 1.0 / fan_in.sqrt())
}

fn linear_init(seed: u64, name: &str, rows: usize, cols: usize) -> Tensor {
    normal_param(seed, name, vec![rows, cols], 1.0 / (rows as f64).sqrt())
}

fn insert_res_params(store: &mut ParameterStore, seed: u64, prefix: &str, cin: usize, c: usize, e: usize) {
    let p = |suffix: &str| format!("{}.res.{}", prefix, suffix);
    store.insert(p("conv1.w"), conv_init(seed, &p("conv1.w"), c, cin, 3), Partition::Base);
    store.insert(p("conv1.b"), Tensor::zeros(vec![c]), Partition::Base);
    store.insert(p("temb.w"), linear_init(seed, &p("temb.w"), e, 2 * c), Partition::Base);
    store.insert(p("temb.b"), Tensor::zeros(vec![2 * c]), Partition::Base);
    store.insert(p("conv2.w"), conv_init(seed, &p("conv2.w"), c, c, 3), Partition::Base);
    store.insert(p("conv2.b"), Tensor::zeros(vec![c]), Partition::Base);
    if cin != c {
        store.insert(p("skip.w"), conv_init(seed, &p("skip.w"), c, cin, 1), Partition::Base);
    }
}

fn insert_attn_params(store: &mut ParameterStore, seed: u64, prefix: &str, c: usize) {
    for fam in ["spatial", "frame", "view"] {
        for proj in ["q", "k", "v", "o"] {
            let w = format!("{}.{}.{}.w", prefix, fam, proj);
            store.insert(w.clone(), linear_init(seed, &w, c, c), Partition::Base);
            store.insert(format!("{}.{}.{}.b", prefix, fam, proj), Tensor::zeros(vec![c]), Partition::Base);
        }
    }
    let az = format!("{}.view.azim.w", prefix);
    store.insert(az.clone(), linear_init(seed, &az, 2, c), Partition::Base);
}

/// Base denoiser parameters (partition `base`), deterministic in the seed.
pub fn build_denoiser_params(config: &DenoiserConfig, seed: u64) -> Result<ParameterStore> {
    config.validate()?;
    let mut store = ParameterStore::new();
    let (cl, c0, e) = (config.latent_channels, config.base_channels, config.embed_width);

    store.insert("stem.w", conv_init(seed, "stem.w", c0, cl, 3), Partition::Base);
    store.insert("stem.b", Tensor::zeros(vec![c0]), Partition::Base);
    store.insert("temb.w1", linear_init(seed, "temb.w1", e, e), Partition::Base);
    store.insert("temb.b1", Tensor::zeros(vec![e]), Partition::Base);
    store.insert("temb.w2", linear_init(seed, "temb.w2", e, e), Partition::Base);
    store.insert("temb.b2", Tensor::zeros(vec![e]), Partition::Base);

    for l in 0..config.levels {
        let c = config.channels_at(l);
        if l > 0 {
            let prev = config.channels_at(l - 1);
            let name = format!("down.l{}.w", l);
            store.insert(name.clone(), conv_init(seed, &name, c, prev, 3), Partition::Base);
            store.insert(format!("down.l{}.b", l), Tensor::zeros(vec![c]), Partition::Base);
        }
        let prefix = format!("enc.l{}", l);
        insert_res_params(&mut store, seed, &prefix, c, c, e);
        insert_attn_params(&mut store, seed, &prefix, c);
    }

    let c_last = config.channels_at(config.levels - 1);
    insert_res_params(&mut store, seed, "mid", c_last, c_last, e);

    for l in (0..config.levels).rev() {
        let c = config.channels_at(l);
        let prefix = format!("dec.l{}", l);
        insert_res_params(&mut store, seed, &prefix, 2 * c, c, e);
        insert_attn_params(&mut store, seed, &prefix, c);
        if l > 0 {
            let prev = config.channels_at(l - 1);
            let name = format!("up.l{}.w", l);
            store.insert(name.clone(), conv_init(seed, &name, prev, c, 3), Partition::Base);
            store.insert(format!("up.l{}.b", l), Tensor::zeros(vec![prev]), Partition::Base);
        }
    }

    store.insert("head.w", conv_init(seed, "head.w", cl, c0, 3), Partition::Base);
    store.insert("head.b", Tensor::zeros(vec![cl]), Partition::Base);
    Ok(store)
}

/// Low-rank adapters for the three attention families' Q/K/V/out projections
/// (partition `lora`). Up-projections start at zero, so fresh adapters leave
/// the base model untouched.
pub fn build_lora_params(config: &DenoiserConfig, seed: u64) -> Result<ParameterStore> {
    config.validate()?;
    let r = config.lora_rank;
    let mut store = ParameterStore::new();
    for block in config.attention_blocks() {
        let level: usize = block[block.len() - 1..].parse().unwrap_or(0);
        let c = config.channels_at(level);
        for fam in ["spatial", "frame", "view"] {
            for proj in ["q", "k", "v", "o"] {
                let down = format!("lora.{}.{}.{}.down", block, fam, proj);
                store.insert(down.clone(), linear_init(seed, &down, c, r), Partition::Lora);
                store.insert(
                    format!("lora.{}.{}.{}.up", block, fam, proj),
                    Tensor::zeros(vec![r, c]),
                    Partition::Lora,
                );
            }
        }
    }
    Ok(store)
}

// ---------------------------------------------------------------------------
// forward pass
// ---------------------------------------------------------------------------

/// One denoiser execution against a tape. Borrowed parameters arrive as
/// `Var`s so the same forward serves inference, LORA training, and branch
/// training.
pub struct DenoiserRun<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a BTreeMap<String, Var>,
    pub config: &'a DenoiserConfig,
    pub use_adapters: bool,
}

impl<'a> DenoiserRun<'a> {
    pub fn new(
        tape: &'a mut Tape,
        vars: &'a BTreeMap<String, Var>,
        config: &'a DenoiserConfig,
        use_adapters: bool,
    ) -> Self {
        DenoiserRun { tape, vars, config, use_adapters }
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .cloned()
            .ok_or_else(|| Error::data(format!("missing parameter `{}`", name)))
    }

    fn conv(&mut self, x: &Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.var(&format!("{}.w", prefix))?;
        let y = self.tape.conv2d(x, &w, stride, pad)?;
        match self.vars.get(&format!("{}.b", prefix)) {
            Some(b) => {
                let b4 = self.tape.reshape(b, &[1, b.shape()[0], 1, 1])?;
                self.tape.add_broadcast(&y, &b4)
            }
            None => Ok(y),
        }
    }

    /// Sinusoidal step embedding through a two-layer MLP → [1, E].
    fn time_embedding(&mut self, t: usize) -> Result<Var> {
        let e = self.config.embed_width;
        let sin = self.tape.constant(embed::sinusoid_vec(t as f64, e));
        let row = self.tape.reshape(&sin, &[1, e])?;
        let w1 = self.var("temb.w1")?;
        let b1 = self.var("temb.b1")?;
        let w2 = self.var("temb.w2")?;
        let b2 = self.var("temb.b2")?;
        let h = self.tape.matmul(&row, &w1)?;
        let h = self.tape.add_broadcast(&h, &b1)?;
        let h = self.tape.silu(&h)?;
        let h = self.tape.matmul(&h, &w2)?;
        self.tape.add_broadcast(&h, &b2)
    }

    /// GroupNorm → SiLU → conv, FiLM-modulated by the step embedding, with a
    /// residual skip (1×1-projected on channel change).
    fn resblock(&mut self, x: &Var, temb: &Var, prefix: &str) -> Result<Var> {
        let groups = self.config.gn_groups;
        let c = self.var(&format!("{}.res.conv1.w", prefix))?.shape()[0];

        let h = self.tape.groupnorm(x, groups, 1e-6)?;
        let h = self.tape.silu(&h)?;
        let h = self.conv(&h, &format!("{}.res.conv1", prefix), 1, 1)?;

        let tw = self.var(&format!("{}.res.temb.w", prefix))?;
        let tb = self.var(&format!("{}.res.temb.b", prefix))?;
        let film = self.tape.matmul(temb, &tw)?;
        let film = self.tape.add_broadcast(&film, &tb)?; // [1, 2C]
        let parts = self.tape.split(&film, 1, &[c, c])?;
        let scale = self.tape.reshape(&parts[0], &[1, c, 1, 1])?;
        let shift = self.tape.reshape(&parts[1], &[1, c, 1, 1])?;
        let ones = self.tape.constant(Tensor::ones(vec![1, c, 1, 1]));
        let gain = self.tape.add(&ones, &scale)?;
        let gain = self.tape.broadcast(&gain, h.shape())?;
        let h = self.tape.mul(&h, &gain)?;
        let h = self.tape.add_broadcast(&h, &shift)?;

        let h = self.tape.groupnorm(&h, groups, 1e-6)?;
        let h = self.tape.silu(&h)?;
        let h = self.conv(&h, &format!("{}.res.conv2", prefix), 1, 1)?;

        let skip = if x.shape()[1] == c {
            x.clone()
        } else {
            self.conv(x, &format!("{}.res.skip", prefix), 1, 0)?
        };
        self.tape.add(&h, &skip)
    }

    /// Self-attention over the h·w token axis of every cell.
    pub fn spatial_attention(&mut self, x: &Var, prefix: &str) -> Result<Var> {
        let (b, c, h, w) = dims4(x)?;
        let flat = self.tape.reshape(x, &[b, c, h * w])?;
        let tokens = self.tape.transpose(&flat, &[0, 2, 1])?;
        let proj = AttnProj {
            vars: self.vars,
            prefix: &format!("{}.spatial", prefix),
            use_adapters: self.use_adapters,
            lora_scale: self.config.lora_scale,
        };
        let out = attend(self.tape, &proj, &tokens, &tokens, self.config.heads)?;
        let back = self.tape.transpose(&out, &[0, 2, 1])?;
        let back = self.tape.reshape(&back, &[b, c, h, w])?;
        self.tape.add(x, &back)
    }

    /// Attention along the frame axis per (view, position); keys/values carry
    /// the reference-video tokens alongside the grid tokens.
    pub fn frame_attention(
        &mut self,
        main: &Var,
        cf: &Var,
        frames: usize,
        views: usize,
        prefix: &str,
    ) -> Result<Var> {
        let (_, c, h, w) = dims4(main)?;
        let grid5 = self.tape.reshape(main, &[frames, views, c, h, w])?;
        let grouped = self.tape.transpose(&grid5, &[1, 3, 4, 0, 2])?; // [V,h,w,T,C]
        let g = views * h * w;
        let q = self.tape.reshape(&grouped, &[g, frames, c])?;

        let femb = self.tape.constant(embed::frame_embedding(frames, c));
        let femb = self.tape.reshape(&femb, &[1, frames, c])?;
        let femb = self.tape.broadcast(&femb, &[g, frames, c])?;
        let q_in = self.tape.add(&q, &femb)?;

        // cf tokens: same for every view → broadcast across V.
        let cf_g = self.tape.transpose(cf, &[2, 3, 0, 1])?; // [h,w,T,C]
        let cf_g = self.tape.reshape(&cf_g, &[1, h, w, frames, c])?;
        let cf_g = self.tape.broadcast(&cf_g, &[views, h, w, frames, c])?;
        let cf_tokens = self.tape.reshape(&cf_g, &[g, frames, c])?;
        let cf_in = self.tape.add(&cf_tokens, &femb)?;

        let kv = self.tape.concat(&[&q_in, &cf_in], 1)?; // [G, 2T, C]
        let proj = AttnProj {
            vars: self.vars,
            prefix: &format!("{}.frame", prefix),
            use_adapters: self.use_adapters,
            lora_scale: self.config.lora_scale,
        };
        let out = attend(self.tape, &proj, &q_in, &kv, self.config.heads)?;

        let out5 = self.tape.reshape(&out, &[views, h, w, frames, c])?;
        let back = self.tape.transpose(&out5, &[3, 0, 4, 1, 2])?; // [T,V,C,h,w]
        let back = self.tape.reshape(&back, &[frames * views, c, h, w])?;
        self.tape.add(main, &back)
    }

    /// Attention along the view axis per (frame, position); every view token
    /// receives its camera-azimuth embedding, and the reference views join
    /// the keys/values.
    pub fn view_attention(
        &mut self,
        main: &Var,
        cv: &Var,
        frames: usize,
        views: usize,
        grid_azimuths: &[f64],
        cv_azimuths: &[f64],
        prefix: &str,
    ) -> Result<Var> {
        let (_, c, h, w) = dims4(main)?;
        let grid5 = self.tape.reshape(main, &[frames, views, c, h, w])?;
        let grouped = self.tape.transpose(&grid5, &[0, 3, 4, 1, 2])?; // [T,h,w,V,C]
        let g = frames * h * w;
        let q = self.tape.reshape(&grouped, &[g, views, c])?;

        let az_w = self.var(&format!("{}.view.azim.w", prefix))?;
        let azemb = |azimuths: &[f64], tape: &mut Tape| -> Result<Var> {
            let rows = tape.constant(embed::azimuth_rows(azimuths));
            let emb = tape.matmul(&rows, &az_w)?; // [V, C]
            let emb = tape.reshape(&emb, &[1, azimuths.len(), c])?;
            tape.broadcast(&emb, &[g, azimuths.len(), c])
        };
        let grid_emb = azemb(grid_azimuths, self.tape)?;
        let cv_emb = azemb(cv_azimuths, self.tape)?;

        let q_in = self.tape.add(&q, &grid_emb)?;

        let cv_g = self.tape.transpose(cv, &[2, 3, 0, 1])?; // [h,w,V,C]
        let cv_g = self.tape.reshape(&cv_g, &[1, h, w, views, c])?;
        let cv_g = self.tape.broadcast(&cv_g, &[frames, h, w, views, c])?;
        let cv_tokens = self.tape.reshape(&cv_g, &[g, views, c])?;
        let cv_in = self.tape.add(&cv_tokens, &cv_emb)?;

        let kv = self.tape.concat(&[&q_in, &cv_in], 1)?; // [G, 2V, C]
        let proj = AttnProj {
            vars: self.vars,
            prefix: &format!("{}.view", prefix),
            use_adapters: self.use_adapters,
            lora_scale: self.config.lora_scale,
        };
        let out = attend(self.tape, &proj, &q_in, &kv, self.config.heads)?;

        let out5 = self.tape.reshape(&out, &[frames, h, w, views, c])?;
        let back = self.tape.transpose(&out5, &[0, 3, 4, 1, 2])?; // [T,V,C,h,w]
        let back = self.tape.reshape(&back, &[frames * views, c, h, w])?;
        self.tape.add(main, &back)
    }

    /// Elementwise addition of branch features into the main cells.
    fn inject(&mut self, x: &Var, features: &Var, frames: usize, views: usize) -> Result<Var> {
        let b = x.shape()[0];
        let tv = frames * views;
        if features.shape()[0] != tv || features.shape()[1..] != x.shape()[1..] {
            return Err(Error::shape(format!(
                "injection {:?} vs activations {:?} (T·V = {})",
                features.shape(),
                x.shape(),
                tv
            )));
        }
        let parts = self.tape.split(x, 0, &[tv, b - tv])?;
        let main = self.tape.add(&parts[0], features)?;
        self.tape.concat(&[&main, &parts[1]], 0)
    }

    /// Resblock + the three attention families (+ optional injection).
    #[allow(clippy::too_many_arguments)]
    fn level_block(
        &mut self,
        x: &Var,
        temb: &Var,
        prefix: &str,
        frames: usize,
        views: usize,
        grid_azimuths: &[f64],
        cv_azimuths: &[f64],
        injections: Option<&BTreeMap<String, Var>>,
    ) -> Result<Var> {
        let tv = frames * views;
        let h = self.resblock(x, temb, prefix)?;
        let h = self.spatial_attention(&h, prefix)?;

        let b = h.shape()[0];
        let parts = self.tape.split(&h, 0, &[tv, frames, b - tv - frames])?;
        let (main, cf, cv) = (&parts[0], &parts[1], &parts[2]);
        let main = self.frame_attention(main, cf, frames, views, prefix)?;
        let main =
            self.view_attention(&main, cv, frames, views, grid_azimuths, cv_azimuths, prefix)?;
        let mut h = self.tape.concat(&[&main, cf, cv], 0)?;

        if let Some(sites) = injections {
            if let Some(features) = sites.get(prefix) {
                h = self.inject(&h, features, frames, views)?;
            }
        }
        Ok(h)
    }

    /// Full ε prediction. Returns a Var shaped [T, V, C_latent, h, w].
    pub fn denoise(
        &mut self,
        z_t: &LatentGrid,
        t: usize,
        cond: &ConditioningBundle,
        injections: Option<&BTreeMap<String, Var>>,
    ) -> Result<Var> {
        cond.validate_against(z_t)?;
        let (frames, views) = (z_t.frames(), z_t.views());
        let (c, h, w) = (z_t.channels(), z_t.height(), z_t.width());
        let tv = frames * views;

        let grid_azimuths: Vec<f64> = (0..views).map(|j| z_t.slot_azimuth(j)).collect();
        let cv_azimuths: Vec<f64> =
            (0..cond.ref_views.views()).map(|j| cond.ref_views.slot_azimuth(j)).collect();

        // Assemble the cell batch: T·V grid cells, T reference-video cells,
        // V reference-view cells.
        let z = self.tape.constant(z_t.tensor().clone());
        let z = self.tape.reshape(&z, &[tv, c, h, w])?;
        let cf = self.tape.constant(cond.ref_video.tensor().clone());
        let cf = self.tape.reshape(&cf, &[frames, c, h, w])?;
        let cv = self.tape.constant(cond.ref_views.tensor().clone());
        let cv = self.tape.reshape(&cv, &[views, c, h, w])?;
        let x = self.tape.concat(&[&z, &cf, &cv], 0)?;

        let mut feat = self.conv(&x, "stem", 1, 1)?;
        let c0 = self.config.base_channels;
        let pos = self.tape.constant(embed::spatial_embedding(c0, h, w));
        let pos = self.tape.reshape(&pos, &[1, c0, h, w])?;
        feat = self.tape.add_broadcast(&feat, &pos)?;

        let temb = self.time_embedding(t)?;

        let mut skips = Vec::with_capacity(self.config.levels);
        for l in 0..self.config.levels {
            if l > 0 {
                feat = self.conv(&feat, &format!("down.l{}", l), 2, 1)?;
            }
            feat = self.level_block(
                &feat,
                &temb,
                &format!("enc.l{}", l),
                frames,
                views,
                &grid_azimuths,
                &cv_azimuths,
                injections,
            )?;
            skips.push(feat.clone());
        }

        feat = self.resblock(&feat, &temb, "mid")?;

        for l in (0..self.config.levels).rev() {
            feat = self.tape.concat(&[&feat, &skips[l]], 1)?;
            feat = self.level_block(
                &feat,
                &temb,
                &format!("dec.l{}", l),
                frames,
                views,
                &grid_azimuths,
                &cv_azimuths,
                injections,
            )?;
            if l > 0 {
                feat = upsample2(self.tape, &feat)?;
                feat = self.conv(&feat, &format!("up.l{}", l), 1, 1)?;
            }
        }

        let out = self.tape.groupnorm(&feat, self.config.gn_groups, 1e-6)?;
        let out = self.tape.silu(&out)?;
        let out = self.conv(&out, "head", 1, 1)?;
        let main = self.tape.slice(&out, 0, 0, tv)?;
        self.tape.reshape(&main, &[frames, views, c, h, w])
    }
}

/// Nearest-neighbor ×2 via reshape → broadcast → reshape.
fn upsample2(tape: &mut Tape, x: &Var) -> Result<Var> {
    let s = x.shape().to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let r = tape.reshape(x, &[b, c, h, 1, w, 1])?;
    let bcast = tape.broadcast(&r, &[b, c, h, 2, w, 2])?;
    tape.reshape(&bcast, &[b, c, 2 * h, 2 * w])
}

fn dims4(x: &Var) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(Error::shape(format!("expected 4-D activations, got {:?}", s))),
    }
}

/// Inference-mode ε prediction returning a latent grid.
pub fn denoise_grid(
    params: &ParameterStore,
    z_t: &LatentGrid,
    t: usize,
    cond: &ConditioningBundle,
    config: &DenoiserConfig,
    use_adapters: bool,
) -> Result<LatentGrid> {
    let mut tape = Tape::inference();
    let vars = params.vars(&mut tape, &[]);
    let mut run = DenoiserRun::new(&mut tape, &vars, config, use_adapters);
    let out = run.denoise(z_t, t, cond, None)?;
    z_t.with_tensor(out.tensor().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CameraRing;

    fn tiny_config() -> DenoiserConfig {
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

    fn latent(t: usize, v: usize, c: usize, hw: usize, seed: u64) -> LatentGrid {
        let ring = CameraRing::new(v.max(2), 0.0, 2.5).unwrap();
        let tensor = crate::rng::normal_tensor(&mut crate::rng::stream(seed, 0), vec![t, v, c, hw, hw]);
        LatentGrid::new(tensor, ring, (0..v).collect()).unwrap()
    }

    fn bundle(z: &LatentGrid, seed: u64) -> ConditioningBundle {
        let (t, v, c, hw) = (z.frames(), z.views(), z.channels(), z.height());
        let mut cf = latent(t, 1, c, hw, seed + 1);
        // single-view conditioning shares the grid's first camera
        cf = LatentGrid::new(cf.tensor().clone(), z.ring.clone(), vec![z.view_indices()[0]]).unwrap();
        let cv = LatentGrid::new(
            latent(1, v, c, hw, seed + 2).tensor().clone(),
            z.ring.clone(),
            z.view_indices().to_vec(),
        )
        .unwrap();
        ConditioningBundle { ref_video: cf, ref_views: cv }
    }

    #[test]
    fn output_shape_matches_input() {
        let config = tiny_config();
        let params = build_denoiser_params(&config, 5).unwrap();
        let z = latent(2, 3, 3, 4, 10);
        let cond = bundle(&z, 20);
        let eps = denoise_grid(&params, &z, 7, &cond, &config, false).unwrap();
        assert_eq!(eps.tensor().shape(), z.tensor().shape());
    }

    #[test]
    fn zero_init_adapters_leave_output_unchanged() {
        let config = tiny_config();
        let mut params = build_denoiser_params(&config, 5).unwrap();
        let z = latent(2, 2, 3, 4, 11);
        let cond = bundle(&z, 21);
        let base = denoise_grid(&params, &z, 3, &cond, &config, false).unwrap();
        params.absorb(build_lora_params(&config, 6).unwrap()).unwrap();
        let adapted = denoise_grid(&params, &z, 3, &cond, &config, true).unwrap();
        assert_eq!(adapted.tensor().max_abs_diff(base.tensor()).unwrap(), 0.0);
    }

    #[test]
    fn deterministic_given_same_inputs() {
        let config = tiny_config();
        let params = build_denoiser_params(&config, 5).unwrap();
        let z = latent(2, 2, 3, 4, 12);
        let cond = bundle(&z, 22);
        let a = denoise_grid(&params, &z, 4, &cond, &config, false).unwrap();
        let b = denoise_grid(&params, &z, 4, &cond, &config, false).unwrap();
        assert!(a.tensor().bit_eq(b.tensor()));
    }

    #[test]
    fn view_permutation_equivariance() {
        // Jointly permuting grid views, their cameras, and the reference-view
        // columns permutes the output identically.
        let config = tiny_config();
        let params = build_denoiser_params(&config, 5).unwrap();
        let z = latent(2, 4, 3, 4, 13);
        let cond = bundle(&z, 23);
        let base = denoise_grid(&params, &z, 6, &cond, &config, false).unwrap();

        let perm = [2usize, 0, 3, 1];
        let zp_tensor = crate::tensor::ops::gather(z.tensor(), 1, &perm).unwrap();
        let zp_indices: Vec<usize> = perm.iter().map(|&p| z.view_indices()[p]).collect();
        let zp = LatentGrid::new(zp_tensor, z.ring.clone(), zp_indices.clone()).unwrap();
        let cvp_tensor = crate::tensor::ops::gather(cond.ref_views.tensor(), 1, &perm).unwrap();
        let cvp = LatentGrid::new(cvp_tensor, z.ring.clone(), zp_indices).unwrap();
        let cond_p = ConditioningBundle { ref_video: cond.ref_video.clone(), ref_views: cvp };

        let permuted_out = denoise_grid(&params, &zp, 6, &cond_p, &config, false).unwrap();
        let expected = crate::tensor::ops::gather(base.tensor(), 1, &perm).unwrap();
        assert!(permuted_out.tensor().max_abs_diff(&expected).unwrap() < 1e-10);
    }

    #[test]
    fn activations_stay_finite_for_extreme_inputs() {
        let config = tiny_config();
        let params = build_denoiser_params(&config, 5).unwrap();
        let ring = CameraRing::new(2, 0.0, 2.5).unwrap();
        let z = LatentGrid::new(
            Tensor::from_fn(vec![1, 2, 3, 4, 4], |i| if i % 2 == 0 { 10.0 } else { -10.0 }),
            ring,
            vec![0, 1],
        )
        .unwrap();
        let cond = bundle(&z, 30);
        let out = denoise_grid(&params, &z, 9, &cond, &config, false).unwrap();
        assert!(out.tensor().all_finite());
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        // Tiny end-to-end check; the acceptance suite runs the larger one.
        let config = DenoiserConfig {
            latent_channels: 3,
            base_channels: 4,
            levels: 1,
            heads: 2,
            lora_rank: 2,
            lora_scale: 1.0,
            embed_width: 4,
            gn_groups: 2,
        };
        let params = build_denoiser_params(&config, 5).unwrap();
        let z = latent(2, 2, 3, 2, 14);
        let cond = bundle(&z, 24);
        let all = params.snapshot();
        let report = crate::tensor::finite_diff_check_sampled(
            &|tape, vars| {
                let mut run = DenoiserRun::new(tape, vars, &config, false);
                let out = run.denoise(&z, 3, &cond, None)?;
                let sq = run.tape.mul(&out, &out)?;
                run.tape.mean(&sq)
            },
            &all,
            1e-4,
            1e-3,
            6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
