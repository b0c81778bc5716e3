//! Adam training loop: anchors -> world positions (ŝᵢ) -> decoded child
//! splats -> tile render -> losses, with the full reverse chain back to MLP
//! weights, anchor features, and per-view scalars.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::anchors::{
    anchor_world_position, anchor_world_position_dds, build_anchor_set, AnchorSet, TrainingView,
};
use crate::decoder::{
    decode_residuals, spawn_splats, BankGrads, ChildResidual, ColorMode, DecodeCache, DecoderBank,
    FEATURE_DIM, backward_anchor,
};
use crate::error::{Error, Result};
use crate::losses::{
    aniso_loss, depth_loss, photometric_loss, total_loss, volumetric_loss, LossBreakdown,
    LossWeights,
};
use crate::rasterize::{render, render_backward, RasterConfig};
use crate::scene::GaussianSplat;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Scene/model construction knobs.
#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    /// Child splats per anchor.
    pub k: usize,
    /// Voxel resolution and nominal scale (meters).
    pub eps: f64,
    /// Pixel stride of the unprojection grid.
    pub stride: usize,
    pub init_opacity: f64,
    /// Position-offset squash bound; defaults to 2ε.
    pub offset_bound: f64,
    pub color_mode: ColorMode,
    /// Seeds MLP hidden layers and anchor features.
    pub seed: u64,
    /// Anchor features start uniform in [-bound, bound]; nonzero so the
    /// rectifier layer has live units at step 0 (outputs stay neutral
    /// because the decoder output layers are zero).
    pub feature_init_bound: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let eps = 0.05;
        ModelConfig {
            k: 5,
            eps,
            stride: 4,
            init_opacity: 0.1,
            offset_bound: 2.0 * eps,
            color_mode: ColorMode::Residual,
            seed: 0,
            feature_init_bound: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub anchors: AnchorSet,
    pub bank: DecoderBank,
    pub raster: RasterConfig,
    pub background: Vector3<f64>,
}

pub struct AnchorForward {
    pub world: Vector3<f64>,
    pub residuals: Vec<ChildResidual>,
    pub cache: DecodeCache,
}

pub struct ForwardPass {
    pub per_anchor: Vec<AnchorForward>,
    pub splats: Vec<GaussianSplat>,
}

impl Model {
    pub fn build(views: &[TrainingView], cfg: &ModelConfig) -> Result<Model> {
        let mut anchors = build_anchor_set(views, cfg.eps, cfg.stride, cfg.init_opacity, FEATURE_DIM)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bank = DecoderBank::init(&mut rng, cfg.k, cfg.offset_bound, cfg.color_mode);
        for a in anchors.anchors.iter_mut() {
            for f in a.feature.iter_mut() {
                *f = rng.gen_range(-cfg.feature_init_bound..=cfg.feature_init_bound);
            }
        }
        Ok(Model {
            anchors,
            bank,
            raster: RasterConfig::default(),
            background: Vector3::zeros(),
        })
    }

    /// Decodes every anchor into its child splats. Splat index `i*k + j` is
    /// child j of anchor i.
    pub fn forward(&self) -> Result<ForwardPass> {
        let per_anchor: Result<Vec<AnchorForward>> = self
            .anchors
            .anchors
            .par_iter()
            .map(|a| {
                let group = &self.anchors.groups[a.view_id];
                let world = anchor_world_position(a, group);
                let (residuals, cache) = decode_residuals(&self.bank, &a.feature)?;
                Ok(AnchorForward {
                    world,
                    residuals,
                    cache,
                })
            })
            .collect();
        let per_anchor = per_anchor?;
        let mut splats = Vec::with_capacity(per_anchor.len() * self.bank.k);
        for (a, fw) in self.anchors.anchors.iter().zip(&per_anchor) {
            splats.extend(spawn_splats(a, &fw.world, &fw.residuals, self.bank.color_mode));
        }
        Ok(ForwardPass { per_anchor, splats })
    }

    pub fn params_finite(&self) -> bool {
        self.bank.has_finite_params()
            && self
                .anchors
                .anchors
                .iter()
                .all(|a| a.feature.iter().all(|v| v.is_finite()))
            && self
                .anchors
                .groups
                .iter()
                .all(|g| g.log_s.is_finite() && g.log_lambda.is_finite())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_mlp: f64,
    pub lr_features: f64,
    pub lr_view_s: f64,
    pub lr_view_lambda: f64,
    pub weights: LossWeights,
    /// Seeds the per-epoch view shuffle.
    pub seed: u64,
    pub freeze_view_scales: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            lr_mlp: 2e-3,
            lr_features: 5e-3,
            lr_view_s: 1e-3,
            lr_view_lambda: 1e-3,
            weights: LossWeights::default(),
            seed: 0,
            freeze_view_scales: false,
        }
    }
}

/// Cosine decay from `base` to 10% of `base` over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Bias-corrected update deltas (to be subtracted). `t` is 1-based.
    pub fn deltas(&mut self, t: u64, lr: f64, grads: &[f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.m.len());
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        grads
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + ADAM_EPS)
            })
            .collect()
    }
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub step_count: u64,
    adam_mlp: AdamState,
    adam_features: AdamState,
    adam_view_s: AdamState,
    adam_view_lambda: AdamState,
    // Persistent shuffled view order so training can be paused and resumed
    // without perturbing the schedule.
    order_rng: ChaCha8Rng,
    order: Vec<usize>,
    order_pos: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Self {
        let n_mlp = model.bank.param_count();
        let n_feat = model.anchors.anchors.len() * FEATURE_DIM;
        let n_groups = model.anchors.groups.len();
        Trainer {
            model,
            cfg,
            step_count: 0,
            adam_mlp: AdamState::new(n_mlp),
            adam_features: AdamState::new(n_feat),
            adam_view_s: AdamState::new(n_groups),
            adam_view_lambda: AdamState::new(n_groups),
            order_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: Vec::new(),
            order_pos: 0,
        }
    }

    fn next_view(&mut self, n_views: usize) -> usize {
        if self.order.len() != n_views {
            self.order = (0..n_views).collect();
            self.order_pos = n_views; // force a shuffle
        }
        if self.order_pos >= self.order.len() {
            self.order.shuffle(&mut self.order_rng);
            self.order_pos = 0;
        }
        let v = self.order[self.order_pos];
        self.order_pos += 1;
        v
    }

    /// One optimization step on a single view. Returns the loss breakdown at
    /// the pre-update parameters.
    pub fn train_step(&mut self, views: &[TrainingView], view_idx: usize) -> Result<LossBreakdown> {
        let fwd = self.model.forward()?;
        let view = &views[view_idx];
        let target = render(&fwd.splats, &view.cam, self.model.background, &self.model.raster);

        let w = self.cfg.weights;
        let (photo, mut g_img) = photometric_loss(&view.image, &target.color, w.w)?;
        let lambda_hat = self.model.anchors.groups[view_idx].depth_scale_lambda();
        let (dloss, mut g_dhat, g_lambda) =
            depth_loss(&view.depth, &target.depth, &target.alpha, lambda_hat)?;
        let (vol, vol_g) = volumetric_loss(&fwd.splats);
        let (aniso, aniso_g) = aniso_loss(&fwd.splats, w.r);
        let breakdown = total_loss(&w, photo, dloss, vol, aniso);
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {}",
                self.step_count
            )));
        }

        for g in g_img.data.iter_mut() {
            *g *= w.lambda_p;
        }
        for g in g_dhat.data.iter_mut() {
            *g *= w.lambda_d;
        }
        let mut splat_grads = render_backward(
            &fwd.splats,
            &view.cam,
            self.model.background,
            &self.model.raster,
            &g_img,
            &g_dhat,
            None,
        );
        for (sg, (vg, ag)) in splat_grads.iter_mut().zip(vol_g.iter().zip(&aniso_g)) {
            sg.scale += w.lambda_s * vg + w.lambda_u * ag;
        }

        // Per-anchor reverse pass, parallel over fixed chunks and folded in
        // chunk order so accumulation is deterministic.
        let anchors = &self.model.anchors.anchors;
        let groups = &self.model.anchors.groups;
        let bank = &self.model.bank;
        let k = bank.k;
        let n_anchors = anchors.len();
        let n_groups = groups.len();
        const CHUNK: usize = 64;
        let n_chunks = n_anchors.div_ceil(CHUNK);
        let partials: Vec<(BankGrads, Vec<f64>, Vec<f64>)> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let lo = c * CHUNK;
                let hi = (lo + CHUNK).min(n_anchors);
                let mut bg = BankGrads::zeros_like(bank);
                let mut feat = vec![0.0; (hi - lo) * FEATURE_DIM];
                let mut gs = vec![0.0; n_groups];
                for i in lo..hi {
                    let a = &anchors[i];
                    let fw = &fwd.per_anchor[i];
                    let g_world = backward_anchor(
                        bank,
                        a,
                        &fw.residuals,
                        &fw.cache,
                        &splat_grads[i * k..(i + 1) * k],
                        &mut bg,
                        &mut feat[(i - lo) * FEATURE_DIM..(i - lo + 1) * FEATURE_DIM],
                    );
                    let dds = anchor_world_position_dds(a, &groups[a.view_id]);
                    let s = groups[a.view_id].depth_scale_s();
                    gs[a.view_id] += g_world.dot(&dds) * s;
                }
                (bg, feat, gs)
            })
            .collect();

        let mut bank_grads = BankGrads::zeros_like(bank);
        let mut feat_grads = vec![0.0; n_anchors * FEATURE_DIM];
        let mut log_s_grads = vec![0.0; n_groups];
        for (c, (bg, feat, gs)) in partials.iter().enumerate() {
            bank_grads.add_assign(bg);
            let lo = c * CHUNK * FEATURE_DIM;
            feat_grads[lo..lo + feat.len()].copy_from_slice(feat);
            for (acc, g) in log_s_grads.iter_mut().zip(gs) {
                *acc += g;
            }
        }
        let mut log_lambda_grads = vec![0.0; n_groups];
        log_lambda_grads[view_idx] = w.lambda_d * g_lambda * lambda_hat;

        // Updates.
        let t = self.step_count + 1;
        let decay_step = self.step_count as usize;
        let total = self.cfg.iterations;

        let mut gflat = Vec::with_capacity(self.model.bank.param_count());
        bank_grads.visit(|g| gflat.push(g));
        let deltas = self
            .adam_mlp
            .deltas(t, cosine_lr(self.cfg.lr_mlp, decay_step, total), &gflat);
        let mut i = 0;
        self.model.bank.visit_params_mut(|p| {
            *p -= deltas[i];
            i += 1;
        });

        let deltas = self.adam_features.deltas(
            t,
            cosine_lr(self.cfg.lr_features, decay_step, total),
            &feat_grads,
        );
        for (ai, a) in self.model.anchors.anchors.iter_mut().enumerate() {
            for (d, f) in a.feature.iter_mut().enumerate() {
                *f -= deltas[ai * FEATURE_DIM + d];
            }
        }

        if !self.cfg.freeze_view_scales {
            let deltas = self.adam_view_s.deltas(
                t,
                cosine_lr(self.cfg.lr_view_s, decay_step, total),
                &log_s_grads,
            );
            for (g, d) in self.model.anchors.groups.iter_mut().zip(&deltas) {
                g.log_s -= d;
            }
            let deltas = self.adam_view_lambda.deltas(
                t,
                cosine_lr(self.cfg.lr_view_lambda, decay_step, total),
                &log_lambda_grads,
            );
            for (g, d) in self.model.anchors.groups.iter_mut().zip(&deltas) {
                g.log_lambda -= d;
            }
        }

        self.step_count = t;
        if !self.model.params_finite() {
            return Err(Error::NonFinite(format!(
                "parameters after step {}",
                self.step_count
            )));
        }
        Ok(breakdown)
    }

    /// Runs `n` further optimization steps from the current state. `on_step`
    /// sees (iteration, view index, losses) and may abort. Two calls of n/2
    /// steps match one call of n exactly.
    pub fn run_for(
        &mut self,
        views: &[TrainingView],
        n: usize,
        mut on_step: impl FnMut(usize, usize, &LossBreakdown) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..n {
            let it = self.step_count as usize;
            let view_idx = self.next_view(views.len());
            let b = self.train_step(views, view_idx)?;
            on_step(it, view_idx, &b)?;
        }
        Ok(())
    }

    /// Full training loop: seeded per-epoch view shuffle, one view per step.
    pub fn run(
        &mut self,
        views: &[TrainingView],
        on_step: impl FnMut(usize, usize, &LossBreakdown) -> Result<()>,
    ) -> Result<()> {
        let remaining = self.cfg.iterations.saturating_sub(self.step_count as usize);
        self.run_for(views, remaining, on_step)
    }
}
