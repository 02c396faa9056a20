//! Training steps for both stages and the plain gradient-descent optimizer.
//!
//! Stage 1 updates only the low-rank adapters of the coarse dense-view model;
//! stage 2 updates only the structure condition branch. The base network is
//! registered as constants on the tape, so its freezing is structural rather
//! than policed by the optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use super::{add_noise, NoiseSchedule};
use crate::branch::{branch_forward, BranchConfig};
use crate::denoiser::{ConditioningBundle, DenoiserConfig, DenoiserRun};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LatentGrid};
use crate::params::{ParameterStore, Partition};
use crate::rng;
use crate::tensor::{GradMap, Tape, Tensor};

/// Coarse-stage batch: the 16-view low-resolution target latents plus their
/// conditioning.
pub struct Stage1Batch {
    pub z0: LatentGrid,
    pub cond: ConditioningBundle,
}

/// Refinement-stage batch: a high-res view subset, its conditioning, and the
/// matching low-res layout condition over the same views.
pub struct Stage2Batch {
    pub z0: LatentGrid,
    pub cond: ConditioningBundle,
    pub layout: ImageGrid,
}

/// The per-step noise draw: t uniform over [1, N], ε standard normal, both
/// keyed by (seed, step) so reruns are bit-identical.
pub fn draw_step_noise(
    schedule: &NoiseSchedule,
    like: &LatentGrid,
    seed: u64,
    step: u64,
) -> (usize, LatentGrid) {
    let mut r = rng::stream(seed, step.wrapping_mul(2).wrapping_add(1));
    let t = r.gen_range(1..=schedule.steps());
    let eps = rng::normal_tensor(&mut r, like.tensor().shape().to_vec());
    (t, like.with_tensor(eps).expect("same shape"))
}

fn check_partition_prefix(params: &ParameterStore, partition: Partition, prefix: &str) -> Result<()> {
    for (name, _, p) in params.iter() {
        let tagged = p == partition;
        let named = name.starts_with(prefix);
        if tagged != named {
            return Err(Error::config(format!(
                "parameter `{}` breaks the {} partition contract",
                name,
                partition.tag()
            )));
        }
    }
    Ok(())
}

/// One coarse-stage step: ε-prediction loss at a random (t, ε), gradients for
/// the adapter parameters only.
pub fn train_step_stage1(
    batch: &Stage1Batch,
    params: &ParameterStore,
    config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    step: u64,
) -> Result<(f64, GradMap)> {
    check_partition_prefix(params, Partition::Lora, "lora.")?;
    let (t, eps) = draw_step_noise(schedule, &batch.z0, seed, step);
    let z_t = add_noise(&batch.z0, t, &eps, schedule)?;

    let mut tape = Tape::new();
    let vars = params.vars(&mut tape, &[Partition::Lora]);
    let mut run = DenoiserRun::new(&mut tape, &vars, config, true);
    let pred = run.denoise(&z_t, t, &batch.cond, None)?;
    let target = tape.constant(eps.tensor().clone());
    let loss = tape.mse(&pred, &target)?;
    let value = loss.tensor().item()?;
    let grads = tape.backward(&loss)?;
    Ok((value, grads))
}

/// One refinement-stage step: layout-conditioned ε-prediction loss,
/// gradients for the branch parameters only.
#[allow(clippy::too_many_arguments)]
pub fn train_step_stage2(
    batch: &Stage2Batch,
    params: &ParameterStore,
    config: &DenoiserConfig,
    branch: &BranchConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    step: u64,
) -> Result<(f64, GradMap)> {
    check_partition_prefix(params, Partition::Branch, "branch.")?;
    if batch.layout.view_indices() != batch.z0.view_indices() {
        return Err(Error::config(format!(
            "layout views {:?} differ from target views {:?}",
            batch.layout.view_indices(),
            batch.z0.view_indices()
        )));
    }
    let (t, eps) = draw_step_noise(schedule, &batch.z0, seed, step);
    let z_t = add_noise(&batch.z0, t, &eps, schedule)?;

    let mut tape = Tape::new();
    let vars = params.vars(&mut tape, &[Partition::Branch]);
    let injections =
        branch_forward(&mut tape, &vars, config, branch, &batch.layout, &batch.cond.ref_video)?;
    let mut run = DenoiserRun::new(&mut tape, &vars, config, false);
    let pred = run.denoise(&z_t, t, &batch.cond, Some(&injections))?;
    let target = tape.constant(eps.tensor().clone());
    let loss = tape.mse(&pred, &target)?;
    let value = loss.tensor().item()?;
    let grads = tape.backward(&loss)?;
    Ok((value, grads))
}

/// Plain gradient descent with optional first-moment smoothing.
pub struct GradientDescent {
    pub lr: f64,
    pub momentum: Option<f64>,
    velocity: BTreeMap<String, Tensor>,
}

impl GradientDescent {
    pub fn new(lr: f64, momentum: Option<f64>) -> Self {
        GradientDescent { lr, momentum, velocity: BTreeMap::new() }
    }

    /// Applies one update; only parameters present in the gradient map move.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &GradMap) -> Result<()> {
        for (name, grad) in grads {
            let direction = match self.momentum {
                Some(beta) => {
                    let prev = self
                        .velocity
                        .get(name)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(grad.shape().to_vec()));
                    let v = Tensor::from_fn(grad.shape().to_vec(), |i| {
                        beta * prev.data()[i] + grad.data()[i]
                    });
                    self.velocity.insert(name.clone(), v.clone());
                    v
                }
                None => grad.clone(),
            };
            let current = params.get(name)?;
            let updated = Tensor::from_fn(current.shape().to_vec(), |i| {
                current.data()[i] - self.lr * direction.data()[i]
            });
            params.update(name, updated)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{build_denoiser_params, build_lora_params};
    use crate::grid::CameraRing;
    use crate::params::Partition;

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

    fn latent(t: usize, v: usize, hw: usize, seed: u64) -> LatentGrid {
        let ring = CameraRing::new(v.max(2), 0.0, 2.5).unwrap();
        LatentGrid::new(
            rng::normal_tensor(&mut rng::stream(seed, 0), vec![t, v, 3, hw, hw]),
            ring,
            (0..v).collect(),
        )
        .unwrap()
    }

    fn stage1_batch(seed: u64) -> Stage1Batch {
        let z0 = latent(2, 2, 4, seed);
        let cf = LatentGrid::new(
            latent(2, 1, 4, seed + 1).tensor().clone(),
            z0.ring.clone(),
            vec![0],
        )
        .unwrap();
        let cv = LatentGrid::new(
            latent(1, 2, 4, seed + 2).tensor().clone(),
            z0.ring.clone(),
            vec![0, 1],
        )
        .unwrap();
        Stage1Batch { z0, cond: ConditioningBundle { ref_video: cf, ref_views: cv } }
    }

    #[test]
    fn stage1_gradients_cover_exactly_the_adapters() {
        let config = tiny_config();
        let mut params = build_denoiser_params(&config, 1).unwrap();
        params.absorb(build_lora_params(&config, 2).unwrap()).unwrap();
        let schedule = NoiseSchedule::cosine(20).unwrap();
        let batch = stage1_batch(5);
        let (loss, grads) = train_step_stage1(&batch, &params, &config, &schedule, 7, 0).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let lora_names = params.names_in(Partition::Lora);
        assert_eq!(grads.len(), lora_names.len());
        for name in grads.keys() {
            assert!(name.starts_with("lora."), "{name}");
        }
        for name in &lora_names {
            assert_eq!(grads[name].shape(), params.get(name).unwrap().shape());
        }
    }

    #[test]
    fn zero_init_adapters_give_exactly_the_base_loss() {
        let config = tiny_config();
        let base_only = build_denoiser_params(&config, 1).unwrap();
        let mut with_lora = base_only.clone();
        with_lora.absorb(build_lora_params(&config, 2).unwrap()).unwrap();
        let schedule = NoiseSchedule::cosine(20).unwrap();
        let batch = stage1_batch(6);

        let (loss, _) = train_step_stage1(&batch, &with_lora, &config, &schedule, 9, 3).unwrap();

        // Recompute the frozen base model's loss on the same (t, ε) draw.
        let (t, eps) = draw_step_noise(&schedule, &batch.z0, 9, 3);
        let z_t = add_noise(&batch.z0, t, &eps, &schedule).unwrap();
        let pred =
            crate::denoiser::denoise_grid(&base_only, &z_t, t, &batch.cond, &config, false).unwrap();
        let base_loss = super::super::loss_eps(pred.tensor(), eps.tensor()).unwrap();
        assert_eq!(loss, base_loss);
    }

    #[test]
    fn stage1_rejects_mislabelled_trainables() {
        let config = tiny_config();
        let mut params = build_denoiser_params(&config, 1).unwrap();
        params.absorb(build_lora_params(&config, 2).unwrap()).unwrap();
        // a base-named parameter wrongly tagged trainable
        params.insert("stem.rogue", Tensor::ones(vec![1]), Partition::Lora);
        let schedule = NoiseSchedule::cosine(20).unwrap();
        let batch = stage1_batch(8);
        assert!(train_step_stage1(&batch, &params, &config, &schedule, 1, 0).is_err());
    }

    #[test]
    fn stage1_freezes_base_parameters() {
        let config = tiny_config();
        let mut params = build_denoiser_params(&config, 1).unwrap();
        params.absorb(build_lora_params(&config, 2).unwrap()).unwrap();
        let schedule = NoiseSchedule::cosine(20).unwrap();
        let batch = stage1_batch(10);
        let before = params.snapshot();
        let mut opt = GradientDescent::new(0.05, Some(0.9));
        for step in 0..3 {
            let (_, grads) =
                train_step_stage1(&batch, &params, &config, &schedule, 11, step).unwrap();
            opt.step(&mut params, &grads).unwrap();
        }
        let mut lora_moved = false;
        for (name, tensor, partition) in params.iter() {
            match partition {
                Partition::Lora => {
                    if !tensor.bit_eq(&before[name]) {
                        lora_moved = true;
                    }
                }
                _ => assert!(tensor.bit_eq(&before[name]), "base parameter `{}` moved", name),
            }
        }
        assert!(lora_moved);
    }

    fn stage2_batch(seed: u64) -> Stage2Batch {
        let z0 = latent(2, 2, 4, seed);
        let cf = LatentGrid::new(
            latent(2, 1, 4, seed + 1).tensor().clone(),
            z0.ring.clone(),
            vec![0],
        )
        .unwrap();
        let cv = LatentGrid::new(
            latent(1, 2, 4, seed + 2).tensor().clone(),
            z0.ring.clone(),
            vec![0, 1],
        )
        .unwrap();
        let ring = z0.ring.clone();
        let layout_px = Tensor::from_fn(vec![2, 2, 3, 8, 8], |i| ((i * 19 + 3) % 91) as f64 / 90.0);
        let layout = ImageGrid::new(layout_px, 10.0, ring).unwrap();
        Stage2Batch { z0, cond: ConditioningBundle { ref_video: cf, ref_views: cv }, layout }
    }

    #[test]
    fn stage2_trains_branch_only_and_matches_base_at_zero_init() {
        let config = tiny_config();
        let bcfg = BranchConfig::new(1);
        let base_only = build_denoiser_params(&config, 1).unwrap();
        let mut params = base_only.clone();
        params
            .absorb(crate::branch::build_branch_params(&config, &bcfg, 4).unwrap())
            .unwrap();
        let schedule = NoiseSchedule::cosine(20).unwrap();
        let batch = stage2_batch(20);

        let (loss, grads) =
            train_step_stage2(&batch, &params, &config, &bcfg, &schedule, 13, 2).unwrap();
        for name in grads.keys() {
            assert!(name.starts_with("branch."), "{name}");
        }
        assert_eq!(grads.len(), params.names_in(Partition::Branch).len());

        // With zero-initialized injections the loss equals the plain base loss.
        let (t, eps) = draw_step_noise(&schedule, &batch.z0, 13, 2);
        let z_t = add_noise(&batch.z0, t, &eps, &schedule).unwrap();
        let pred =
            crate::denoiser::denoise_grid(&base_only, &z_t, t, &batch.cond, &config, false).unwrap();
        let base_loss = super::super::loss_eps(pred.tensor(), eps.tensor()).unwrap();
        assert_eq!(loss, base_loss);
    }

    #[test]
    fn stage2_rejects_mismatched_layout_views() {
        let config = tiny_config();
        let bcfg = BranchConfig::new(1);
        let mut params = build_denoiser_params(&config, 1).unwrap();
        params
            .absorb(crate::branch::build_branch_params(&config, &bcfg, 4).unwrap())
            .unwrap();
        let schedule = NoiseSchedule::cosine(20).unwrap();
        let mut batch = stage2_batch(30);
        batch.layout = crate::grid::slice_views(&batch.layout, &[1, 0]).unwrap();
        assert!(train_step_stage2(&batch, &params, &config, &bcfg, &schedule, 1, 0).is_err());
    }

    #[test]
    fn optimizer_moves_against_gradient() {
        let mut params = ParameterStore::new();
        params.insert("lora.x", Tensor::from_fn(vec![2], |_| 1.0), Partition::Lora);
        let mut grads = GradMap::new();
        grads.insert("lora.x".to_string(), Tensor::from_fn(vec![2], |_| 0.5));
        let mut opt = GradientDescent::new(0.1, None);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params.get("lora.x").unwrap().data(), &[0.95, 0.95]);
        // with momentum the same gradient accumulates
        let mut opt_m = GradientDescent::new(0.1, Some(0.5));
        opt_m.step(&mut params, &grads).unwrap();
        opt_m.step(&mut params, &grads).unwrap();
        let expect = 0.95 - 0.1 * 0.5 - 0.1 * (0.5 * 0.5 + 0.5);
        assert!((params.get("lora.x").unwrap().data()[0] - expect).abs() < 1e-12);
    }
}
