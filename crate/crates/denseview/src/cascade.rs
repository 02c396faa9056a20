//! End-to-end pipelines: coarse dense-view generation, structure-aware
//! refinement over view subsets, and the anchor-sampled temporal extension
//! from the T-frame window to full-length videos.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::branch::{branch_forward, BranchConfig, BranchVariant};
use crate::codec::{decode, encode, CodecSpec};
use crate::denoiser::{ConditioningBundle, DenoiserConfig, DenoiserRun};
use crate::diffusion::{sample, EpsModel, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::grid::{downsample_grid, slice_frames, slice_views, upsample_grid, ImageGrid, LatentGrid};
use crate::params::{ParameterStore, Partition};
use crate::tensor::{Tape, Tensor};

/// Everything the two-stage pipeline needs to agree on.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub coarse_res: usize,
    pub fine_res: usize,
    pub t_window: usize,
    pub views: usize,
    pub train_subset: usize,
    pub target_length: usize,
    pub anchor_stride: usize,
    pub schedule_steps: usize,
    pub stage1_sample_steps: usize,
    pub stage2_sample_steps: usize,
    pub patch: usize,
    pub codec_seed: u64,
    pub base_channels: usize,
    pub levels: usize,
    pub heads: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub embed_width: usize,
    pub gn_groups: usize,
    pub branch_variant: BranchVariant,
    pub map_heads: usize,
    pub elevation: f64,
    pub radius: f64,
    pub fps: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            coarse_res: 32,
            fine_res: 64,
            t_window: 5,
            views: 16,
            train_subset: 4,
            target_length: 21,
            anchor_stride: 5,
            schedule_steps: 50,
            stage1_sample_steps: 10,
            stage2_sample_steps: 10,
            patch: 4,
            codec_seed: 0x6c47,
            base_channels: 32,
            levels: 2,
            heads: 4,
            lora_rank: 4,
            lora_scale: 1.0,
            embed_width: 64,
            gn_groups: 8,
            branch_variant: BranchVariant::Full,
            map_heads: 1,
            elevation: 0.0,
            radius: 2.5,
            fps: 10.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser_config().validate()?;
        if self.views < 2 {
            return Err(Error::config("need at least 2 views".to_string()));
        }
        if self.train_subset == 0 || self.train_subset > self.views {
            return Err(Error::config(format!(
                "training subset {} must be in [1, {}]",
                self.train_subset, self.views
            )));
        }
        if self.t_window < 2 || self.target_length < self.t_window {
            return Err(Error::config("need target length ≥ window ≥ 2".to_string()));
        }
        if (self.target_length - 1) % (self.t_window - 1) != 0 {
            return Err(Error::config(format!(
                "(target length − 1 = {}) must divide by (window − 1 = {})",
                self.target_length - 1,
                self.t_window - 1
            )));
        }
        if self.coarse_res % self.patch != 0 || self.fine_res % self.patch != 0 {
            return Err(Error::config(format!(
                "resolutions {}/{} must divide by patch {}",
                self.coarse_res, self.fine_res, self.patch
            )));
        }
        if self.fine_res % self.coarse_res != 0 {
            return Err(Error::config(format!(
                "fine {} must be a multiple of coarse {}",
                self.fine_res, self.coarse_res
            )));
        }
        self.stem_downsamples()?;
        Ok(())
    }

    pub fn codec(&self) -> Result<CodecSpec> {
        CodecSpec::new(self.patch, self.codec_seed)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 3 * self.patch * self.patch,
            base_channels: self.base_channels,
            levels: self.levels,
            heads: self.heads,
            lora_rank: self.lora_rank,
            lora_scale: self.lora_scale,
            embed_width: self.embed_width,
            gn_groups: self.gn_groups,
        }
    }

    /// Stride-2 convs taking coarse layout pixels to the fine latent edge.
    pub fn stem_downsamples(&self) -> Result<usize> {
        let latent_edge = self.fine_res / self.patch;
        let mut k = 0;
        let mut edge = latent_edge;
        while edge < self.coarse_res {
            edge <<= 1;
            k += 1;
        }
        if edge != self.coarse_res {
            return Err(Error::config(format!(
                "coarse res {} must be fine latent edge {} times a power of two",
                self.coarse_res, latent_edge
            )));
        }
        Ok(k)
    }

    pub fn branch_config(&self) -> Result<BranchConfig> {
        Ok(BranchConfig {
            variant: self.branch_variant,
            stem_downsamples: self.stem_downsamples()?,
            map_heads: self.map_heads,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.schedule_steps)
    }

    pub fn stage1_sampler(&self) -> SamplerConfig {
        SamplerConfig::new(self.stage1_sample_steps)
    }

    pub fn stage2_sampler(&self) -> SamplerConfig {
        SamplerConfig::new(self.stage2_sample_steps)
    }

    /// Stable content hash over every field.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let canon = format!("{:?}", self);
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(16);
        for b in digest.iter().take(8) {
            out.push_str(&format!("{:02x}", b));
        }
        out
    }
}

/// Wall-clock and evaluation accounting for a pipeline run.
#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub stage1_secs: f64,
    pub stage2_secs: f64,
    pub stage1_evals: usize,
    pub stage2_evals: usize,
}

/// ε source for the cascade: learned parameters, or an oracle that knows the
/// ground truth and returns the exact noise consistent with it — proving the
/// orchestration itself adds no distortion.
pub enum CascadeModel<'a> {
    Learned { params: &'a ParameterStore },
    Oracle { coarse_truth: ImageGrid, fine_truth: ImageGrid },
}

impl CascadeModel<'_> {
    /// Restricts oracle truths to the given absolute frame indices.
    fn window(&self, frames: &[usize]) -> Result<CascadeModel<'_>> {
        Ok(match self {
            CascadeModel::Learned { params } => CascadeModel::Learned { params },
            CascadeModel::Oracle { coarse_truth, fine_truth } => CascadeModel::Oracle {
                coarse_truth: slice_frames(coarse_truth, frames)?,
                fine_truth: slice_frames(fine_truth, frames)?,
            },
        })
    }
}

/// Predicts the exact ε that maps z_t back to a known z₀ under the schedule.
struct ExactNoiseOracle {
    z0: LatentGrid,
    schedule: NoiseSchedule,
}

impl EpsModel for ExactNoiseOracle {
    fn predict_eps(&self, z_t: &LatentGrid, t: usize) -> Result<LatentGrid> {
        let a = self.schedule.sqrt_alpha_bar(t);
        let b = self.schedule.sqrt_one_minus_alpha_bar(t);
        if b == 0.0 {
            return Err(Error::Numerical("oracle queried at ᾱ = 1".to_string()));
        }
        let data: Vec<f64> = z_t
            .tensor()
            .data()
            .iter()
            .zip(self.z0.tensor().data())
            .map(|(zt, z0)| (zt - a * z0) / b)
            .collect();
        z_t.with_tensor(Tensor::from_parts(z_t.tensor().shape().to_vec(), data))
    }
}

struct LearnedStage1<'a> {
    params: &'a ParameterStore,
    config: DenoiserConfig,
    cond: ConditioningBundle,
    use_adapters: bool,
}

impl EpsModel for LearnedStage1<'_> {
    fn predict_eps(&self, z_t: &LatentGrid, t: usize) -> Result<LatentGrid> {
        crate::denoiser::denoise_grid(self.params, z_t, t, &self.cond, &self.config, self.use_adapters)
    }
}

struct LearnedStage2<'a> {
    params: &'a ParameterStore,
    config: DenoiserConfig,
    cond: ConditioningBundle,
    /// Branch output is independent of (z_t, t), so it is computed once.
    injections: BTreeMap<String, Tensor>,
}

impl EpsModel for LearnedStage2<'_> {
    fn predict_eps(&self, z_t: &LatentGrid, t: usize) -> Result<LatentGrid> {
        let mut tape = Tape::inference();
        let vars = self.params.vars(&mut tape, &[]);
        let injections: BTreeMap<String, crate::tensor::Var> = self
            .injections
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        let mut run = DenoiserRun::new(&mut tape, &vars, &self.config, false);
        let out = run.denoise(z_t, t, &self.cond, Some(&injections))?;
        z_t.with_tensor(out.tensor().clone())
    }
}

/// Coarse 16-view generation: encodes the (downsampled) reference video and
/// views, samples the dense-view latent grid, and decodes at coarse
/// resolution. Deterministic per seed.
pub fn run_stage1(
    ref_video: &ImageGrid,
    ref_views: &ImageGrid,
    model: &CascadeModel,
    config: &PipelineConfig,
    seed: u64,
) -> Result<(ImageGrid, RunStats)> {
    config.validate()?;
    if ref_video.views() != 1 {
        return Err(Error::shape("reference video must be a T×1 grid".to_string()));
    }
    if ref_views.frames() != 1 || ref_views.views() != config.views {
        return Err(Error::shape(format!(
            "reference views must be 1×{}, got {}×{}",
            config.views,
            ref_views.frames(),
            ref_views.views()
        )));
    }
    if ref_views.view_indices()[0] != ref_video.view_indices()[0] {
        return Err(Error::shape(
            "first reference view must match the input video's viewpoint".to_string(),
        ));
    }
    if ref_video.height() != config.fine_res || ref_views.height() != config.fine_res {
        return Err(Error::shape(format!(
            "stage-1 inputs must be at fine resolution {}",
            config.fine_res
        )));
    }
    let t0 = Instant::now();
    let factor = config.fine_res / config.coarse_res;
    let codec = config.codec()?;
    let schedule = config.schedule()?;
    let frames = ref_video.frames();

    let cf = encode(&downsample_grid(ref_video, factor)?, &codec)?;
    let cv = encode(&downsample_grid(ref_views, factor)?, &codec)?;
    let cond = ConditioningBundle { ref_video: cf, ref_views: cv.clone() };

    let edge = config.coarse_res / config.patch;
    let template = LatentGrid::new(
        Tensor::zeros(vec![frames, config.views, codec.channels(), edge, edge]),
        ref_views.ring.clone(),
        ref_views.view_indices().to_vec(),
    )?;
    let init = crate::diffusion::seeded_noise_like(&template, seed, 0x5731);

    let run = match model {
        CascadeModel::Learned { params } => {
            let use_adapters = !params.names_in(Partition::Lora).is_empty();
            let m = LearnedStage1 {
                params,
                config: config.denoiser_config(),
                cond,
                use_adapters,
            };
            sample(&m, init, &schedule, &config.stage1_sampler())?
        }
        CascadeModel::Oracle { coarse_truth, .. } => {
            let m = ExactNoiseOracle { z0: encode(coarse_truth, &codec)?, schedule: schedule.clone() };
            sample(&m, init, &schedule, &config.stage1_sampler())?
        }
    };
    let grid = decode(&run.latent, &codec, config.fps)?;
    let stats = RunStats {
        stage1_secs: t0.elapsed().as_secs_f64(),
        stage1_evals: run.evals,
        ..RunStats::default()
    };
    Ok((grid, stats))
}

/// Whether stage 2 runs under training-time constraints (4-view subsets) or
/// full-grid inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageMode {
    Training,
    Inference,
}

/// Structure-aware refinement conditioned on the coarse layouts. `views`
/// defaults to the full ring at inference and must be a `train_subset`-sized
/// subset in training mode. The reference views for the view-attention
/// conditioning derive from the coarse grid's first-frame row.
pub fn run_stage2(
    coarse: &ImageGrid,
    ref_video: &ImageGrid,
    model: &CascadeModel,
    config: &PipelineConfig,
    seed: u64,
    views: Option<&[usize]>,
    mode: StageMode,
) -> Result<(ImageGrid, RunStats)> {
    config.validate()?;
    if coarse.views() != config.views || coarse.height() != config.coarse_res {
        return Err(Error::shape(format!(
            "coarse grid must be {}-view at {}px",
            config.views, config.coarse_res
        )));
    }
    if ref_video.views() != 1 || ref_video.frames() != coarse.frames() {
        return Err(Error::shape("reference video must be T×1 and match the coarse grid".to_string()));
    }
    if ref_video.height() != config.fine_res {
        return Err(Error::shape(format!("reference video must be at fine resolution {}", config.fine_res)));
    }
    let all: Vec<usize> = (0..config.views).collect();
    let views = views.unwrap_or(&all);
    if mode == StageMode::Training && views.len() != config.train_subset {
        return Err(Error::config(format!(
            "training mode requires exactly {} views, got {}",
            config.train_subset,
            views.len()
        )));
    }

    let t0 = Instant::now();
    let codec = config.codec()?;
    let schedule = config.schedule()?;
    let frames = coarse.frames();

    let layout = slice_views(coarse, views)?;
    let cf = encode(ref_video, &codec)?;
    // Reference views: the coarse grid's first-frame row, upsampled to fine.
    let first_row = slice_frames(coarse, &[0])?;
    let cv_pixels = upsample_grid(&slice_views(&first_row, views)?, config.fine_res / config.coarse_res)?;
    let cv = encode(&cv_pixels, &codec)?;
    let cond = ConditioningBundle { ref_video: cf.clone(), ref_views: cv };

    let edge = config.fine_res / config.patch;
    let template = LatentGrid::new(
        Tensor::zeros(vec![frames, views.len(), codec.channels(), edge, edge]),
        layout.ring.clone(),
        layout.view_indices().to_vec(),
    )?;
    let init = crate::diffusion::seeded_noise_like(&template, seed, 0x5732);

    let run = match model {
        CascadeModel::Learned { params } => {
            let mut tape = Tape::inference();
            let vars = params.vars(&mut tape, &[]);
            let injections = branch_forward(
                &mut tape,
                &vars,
                &config.denoiser_config(),
                &config.branch_config()?,
                &layout,
                &cf,
            )?
            .into_iter()
            .map(|(k, v)| (k, v.tensor().clone()))
            .collect();
            let m = LearnedStage2 { params, config: config.denoiser_config(), cond, injections };
            sample(&m, init, &schedule, &config.stage2_sampler())?
        }
        CascadeModel::Oracle { fine_truth, .. } => {
            let target = slice_views(fine_truth, views)?;
            let m = ExactNoiseOracle { z0: encode(&target, &codec)?, schedule: schedule.clone() };
            sample(&m, init, &schedule, &config.stage2_sampler())?
        }
    };
    let grid = decode(&run.latent, &codec, config.fps)?;
    let stats = RunStats {
        stage2_secs: t0.elapsed().as_secs_f64(),
        stage2_evals: run.evals,
        ..RunStats::default()
    };
    Ok((grid, stats))
}

/// Both stages back to back at inference defaults.
pub fn run_cascade(
    ref_video: &ImageGrid,
    ref_views: &ImageGrid,
    model: &CascadeModel,
    config: &PipelineConfig,
    seed: u64,
) -> Result<(ImageGrid, ImageGrid, RunStats)> {
    let (coarse, s1) = run_stage1(ref_video, ref_views, model, config, seed)?;
    let (fine, s2) = run_stage2(&coarse, ref_video, model, config, seed, None, StageMode::Inference)?;
    Ok((
        coarse,
        fine,
        RunStats {
            stage1_secs: s1.stage1_secs,
            stage1_evals: s1.stage1_evals,
            stage2_secs: s2.stage2_secs,
            stage2_evals: s2.stage2_evals,
        },
    ))
}

/// Uniformly random distinct view indices (sorted); no view is given special
/// treatment.
pub fn sample_training_views(views: usize, subset: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if subset > views {
        return Err(Error::config(format!("subset {} larger than view count {}", subset, views)));
    }
    let mut all: Vec<usize> = (0..views).collect();
    all.shuffle(rng);
    let mut picked: Vec<usize> = all[..subset].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Anchor-sampled temporal extension. Pass 1 runs the cascade on the strided
/// anchor frames; pass 2 fills each [a, a+T) window with the reference views
/// replaced by the generated views at the window's anchor. Anchor frames in
/// the output come from pass 1 verbatim.
pub fn extend_anchored(
    full_ref_video: &ImageGrid,
    ref_views: &ImageGrid,
    model: &CascadeModel,
    config: &PipelineConfig,
    seed: u64,
) -> Result<(ImageGrid, RunStats)> {
    config.validate()?;
    let length = config.target_length;
    if full_ref_video.frames() != length || full_ref_video.views() != 1 {
        return Err(Error::shape(format!(
            "extension wants a {}×1 reference video, got {}×{}",
            length,
            full_ref_video.frames(),
            full_ref_video.views()
        )));
    }
    let stride = config.anchor_stride;
    if stride != config.t_window {
        return Err(Error::config(format!(
            "anchor stride {} must equal the window length {}",
            stride, config.t_window
        )));
    }
    if (length - 1) % stride != 0 {
        return Err(Error::config(format!(
            "(length − 1 = {}) must divide by stride {}",
            length - 1,
            stride
        )));
    }

    let anchors: Vec<usize> = (0..length).step_by(stride).collect();

    // Pass 1: anchor frames through the full cascade.
    let anchor_ref = slice_frames(full_ref_video, &anchors)?;
    let anchor_model = model.window(&anchors)?;
    let (_, anchor_fine, mut stats) =
        run_cascade(&anchor_ref, ref_views, &anchor_model, config, seed)?;

    // Pass 2: windows [a, a+T), conditioned on the generated anchor views.
    let (h, w, v) = (anchor_fine.height(), anchor_fine.width(), anchor_fine.views());
    let cell = 3 * h * w;
    let mut data = vec![0.0; length * v * cell];
    let mut place_frame = |t_out: usize, source: &ImageGrid, t_src: usize| {
        let dst = t_out * v * cell;
        let src = t_src * v * cell;
        data[dst..dst + v * cell].copy_from_slice(&source.tensor().data()[src..src + v * cell]);
    };
    for (i, &a) in anchors.iter().enumerate() {
        place_frame(a, &anchor_fine, i);
    }
    for (i, pair) in anchors.windows(2).enumerate() {
        let a = pair[0];
        let window: Vec<usize> = (a..a + config.t_window).collect();
        let window_ref = slice_frames(full_ref_video, &window)?;
        let anchor_views = slice_frames(&anchor_fine, &[i])?;
        let window_model = model.window(&window)?;
        let (_, fine, ws) = run_cascade(&window_ref, &anchor_views, &window_model, config, seed)?;
        stats.stage1_secs += ws.stage1_secs;
        stats.stage2_secs += ws.stage2_secs;
        stats.stage1_evals += ws.stage1_evals;
        stats.stage2_evals += ws.stage2_evals;
        for (k, &t_abs) in window.iter().enumerate() {
            if t_abs != a {
                place_frame(t_abs, &fine, k);
            }
        }
    }

    let grid = ImageGrid::with_view_indices(
        Tensor::from_parts(vec![length, v, 3, h, w], data),
        config.fps,
        anchor_fine.ring.clone(),
        anchor_fine.view_indices().to_vec(),
    )?;
    Ok((grid, stats))
}
