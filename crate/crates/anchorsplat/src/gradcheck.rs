//! Central finite-difference verification of every analytic gradient path:
//! rasterizer splat attributes, decoder weights/features, the per-view scale
//! chain, the depth loss scalars, and the image/regularizer losses.

use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::anchors::{anchor_world_position, anchor_world_position_dds, DepthMap};
use crate::decoder::{
    backward_anchor, decode_residuals, spawn_splats, BankGrads, ColorMode, DecoderBank,
    FEATURE_DIM,
};
use crate::error::Result;
use crate::img::{ImageGray, ImageRgb};
use crate::losses::{aniso_loss, depth_loss, photometric_loss, volumetric_loss};
use crate::rasterize::{render, render_backward, RasterConfig};
use crate::scene::{quat_normalize, Anchor, Camera, GaussianSplat, PerViewGroup, Pose, SplatGrad};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub checks: usize,
    /// Probes discarded because the two one-sided differences disagreed,
    /// i.e. the finite-difference window straddled one of the forward
    /// model's intentional decision boundaries.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
fn rel_err(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs());
    if denom < 1e-7 {
        return 0.0;
    }
    (analytic - fd).abs() / denom
}

struct Accum {
    name: String,
    checks: usize,
    skipped: usize,
    max_rel: f64,
}

impl Accum {
    fn new(name: &str) -> Self {
        Accum {
            name: name.into(),
            checks: 0,
            skipped: 0,
            max_rel: 0.0,
        }
    }
    fn record(&mut self, analytic: f64, fd: f64) {
        self.checks += 1;
        self.max_rel = self.max_rel.max(rel_err(analytic, fd));
    }
    /// Record a central-difference check, unless the forward slopes on the
    /// two sides of the base point disagree so strongly that the window must
    /// straddle a jump in the forward model (alpha skip, transmittance
    /// cutoff, ...). Tangents at those points are undefined, so the probe is
    /// discarded rather than compared. The decision never looks at the
    /// analytic value, so a wrong analytic gradient cannot hide behind it.
    fn record_sided(&mut self, analytic: f64, d_plus: f64, d_minus: f64) {
        if (d_plus - d_minus).abs() > 0.5 + 1e-3 * d_plus.abs().max(d_minus.abs()) {
            self.skipped += 1;
            return;
        }
        self.record(analytic, 0.5 * (d_plus + d_minus));
    }
    fn done(self) -> CheckResult {
        // Discarded probes must stay a small minority, otherwise the scene is
        // too degenerate for the comparison to mean anything.
        let pass = self.max_rel < REL_TOL && self.checks > 0 && self.skipped * 5 < self.checks;
        CheckResult {
            pass,
            name: self.name,
            checks: self.checks,
            skipped: self.skipped,
            max_rel_err: self.max_rel,
        }
    }
}

fn random_splats(rng: &mut StdRng, n: usize) -> Vec<GaussianSplat> {
    (0..n)
        .map(|i| {
            let q = quat_normalize(&[
                1.0,
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ])
            .unwrap();
            GaussianSplat {
                // Staggered depths and moderate overlap keep every sampled
                // configuration away from the rasterizer's hard decision
                // boundaries (transmittance cutoff, per-splat alpha skip),
                // where the forward map is non-differentiable by design.
                mu: Vector3::new(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    1.5 + 0.15 * i as f64,
                ),
                rot: q,
                scale: Vector3::new(
                    rng.gen_range(0.04..0.12),
                    rng.gen_range(0.04..0.12),
                    rng.gen_range(0.04..0.12),
                ),
                opacity: rng.gen_range(0.3..0.6),
                color: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            }
        })
        .collect()
}

fn probe_images(rng: &mut StdRng, w: usize, h: usize) -> (ImageRgb, ImageGray) {
    let mut gc = ImageRgb::new(w, h);
    for p in gc.data.iter_mut() {
        *p = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
    }
    let mut gd = ImageGray::new(w, h);
    for p in gd.data.iter_mut() {
        *p = rng.gen_range(-1.0..1.0);
    }
    (gc, gd)
}

fn probe_loss(
    splats: &[GaussianSplat],
    cam: &Camera,
    cfg: &RasterConfig,
    gc: &ImageRgb,
    gd: &ImageGray,
) -> f64 {
    let t = render(splats, cam, Vector3::new(0.1, 0.2, 0.3), cfg);
    let mut l = 0.0;
    for (c, g) in t.color.data.iter().zip(&gc.data) {
        l += c.dot(g);
    }
    for (d, g) in t.depth.data.iter().zip(&gd.data) {
        l += d * g;
    }
    l
}

fn check_rasterizer(rng: &mut StdRng) -> CheckResult {
    let mut acc = Accum::new("rasterizer splat attributes");
    let cam = Camera::new(
        40.0,
        40.0,
        16.0,
        16.0,
        32,
        32,
        Pose::identity(),
    )
    .unwrap();
    let cfg = RasterConfig::default();
    let mut splats = random_splats(rng, 12);
    let (gc, gd) = probe_images(rng, 32, 32);
    let grads = render_backward(
        &splats,
        &cam,
        Vector3::new(0.1, 0.2, 0.3),
        &cfg,
        &gc,
        &gd,
        None,
    );
    let l0 = probe_loss(&splats, &cam, &cfg, &gc, &gd);
    let h = FD_STEP;
    for i in 0..splats.len() {
        let fd_pair = |s: &mut Vec<GaussianSplat>, set: &dyn Fn(&mut GaussianSplat, f64), get: f64, analytic: f64, acc: &mut Accum| {
            set(&mut s[i], get + h);
            let lp = probe_loss(s, &cam, &cfg, &gc, &gd);
            set(&mut s[i], get - h);
            let lm = probe_loss(s, &cam, &cfg, &gc, &gd);
            set(&mut s[i], get);
            acc.record_sided(analytic, (lp - l0) / h, (l0 - lm) / h);
        };
        for a in 0..3 {
            let v = splats[i].mu[a];
            fd_pair(&mut splats, &move |s, x| s.mu[a] = x, v, grads[i].mu[a], &mut acc);
        }
        for a in 0..4 {
            let v = splats[i].rot[a];
            fd_pair(&mut splats, &move |s, x| s.rot[a] = x, v, grads[i].rot[a], &mut acc);
        }
        for a in 0..3 {
            let v = splats[i].scale[a];
            fd_pair(&mut splats, &move |s, x| s.scale[a] = x, v, grads[i].scale[a], &mut acc);
        }
        {
            let v = splats[i].opacity;
            fd_pair(&mut splats, &move |s, x| s.opacity = x, v, grads[i].opacity, &mut acc);
        }
        for a in 0..3 {
            let v = splats[i].color[a];
            fd_pair(&mut splats, &move |s, x| s.color[a] = x, v, grads[i].color[a], &mut acc);
        }
    }
    acc.done()
}

fn test_anchor(rng: &mut StdRng) -> Anchor {
    Anchor {
        position_cam: Vector3::new(
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(1.0..3.0),
        ),
        view_id: 0,
        feature: (0..FEATURE_DIM).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        nominal_mu: Vector3::new(0.1, -0.2, 2.0),
        nominal_color: Vector3::new(0.4, 0.5, 0.6),
        nominal_opacity: 0.45,
        nominal_scale: Vector3::new(0.05, 0.06, 0.07),
    }
}

/// Linear probe over all child-splat attributes.
fn splat_probe(splats: &[GaussianSplat], probes: &[SplatGrad]) -> f64 {
    let mut l = 0.0;
    for (s, p) in splats.iter().zip(probes) {
        l += s.mu.dot(&p.mu) + s.scale.dot(&p.scale) + s.color.dot(&p.color);
        l += s.opacity * p.opacity;
        for a in 0..4 {
            l += s.rot[a] * p.rot[a];
        }
    }
    l
}

fn check_decoder(rng: &mut StdRng) -> CheckResult {
    let mut acc = Accum::new("decoder weights and features");
    for &mode in &[ColorMode::Residual, ColorMode::Direct] {
        let mut bank = DecoderBank::init(rng, 3, 0.1, mode);
        // Populate output layers so clamps and gates see generic inputs.
        bank.visit_params_mut(|p| {
            if *p == 0.0 {
                *p = rng.gen_range(-0.2..0.2);
            }
        });
        let mut anchor = test_anchor(rng);
        let world = anchor.nominal_mu;
        let probes: Vec<SplatGrad> = (0..bank.k)
            .map(|_| SplatGrad {
                mu: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                rot: [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ],
                scale: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                opacity: rng.gen_range(-1.0..1.0),
                color: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            })
            .collect();
        let loss = |bank: &DecoderBank, anchor: &Anchor| -> f64 {
            let (res, _) = decode_residuals(bank, &anchor.feature).unwrap();
            splat_probe(&spawn_splats(anchor, &world, &res, bank.color_mode), &probes)
        };
        let (res, cache) = decode_residuals(&bank, &anchor.feature).unwrap();
        let mut bg = BankGrads::zeros_like(&bank);
        let mut gfeat = vec![0.0; FEATURE_DIM];
        let _ = backward_anchor(&bank, &anchor, &res, &cache, &probes, &mut bg, &mut gfeat);
        let h = FD_STEP;
        // Features.
        for d in 0..FEATURE_DIM {
            let orig = anchor.feature[d];
            anchor.feature[d] = orig + h;
            let lp = loss(&bank, &anchor);
            anchor.feature[d] = orig - h;
            let lm = loss(&bank, &anchor);
            anchor.feature[d] = orig;
            acc.record(gfeat[d], (lp - lm) / (2.0 * h));
        }
        // Sampled weights (stable visit order pairs params with grads).
        let mut gflat = Vec::new();
        bg.visit(|g| gflat.push(g));
        let n_params = gflat.len();
        for t in 0..60 {
            let target = (t * 977) % n_params;
            let mut lp = 0.0;
            let mut lm = 0.0;
            for (sign, out) in [(1.0, &mut lp), (-1.0, &mut lm)] {
                let mut i = 0;
                bank.visit_params_mut(|p| {
                    if i == target {
                        *p += sign * h;
                    }
                    i += 1;
                });
                *out = loss(&bank, &anchor);
                let mut i = 0;
                bank.visit_params_mut(|p| {
                    if i == target {
                        *p -= sign * h;
                    }
                    i += 1;
                });
            }
            acc.record(gflat[target], (lp - lm) / (2.0 * h));
        }
    }
    acc.done()
}

fn check_view_scale(rng: &mut StdRng) -> CheckResult {
    let mut acc = Accum::new("per-view scale s through world position");
    for _ in 0..10 {
        let q = quat_normalize(&[
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ])
        .unwrap();
        let pose = Pose::new(q, Vector3::new(rng.gen_range(-1.0..1.0), 0.3, -0.5));
        let anchor = test_anchor(rng);
        let probe = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let s0: f64 = rng.gen_range(0.5..2.0);
        let group = |s: f64| PerViewGroup {
            view_id: 0,
            anchor_ids: vec![],
            cam_to_world: pose,
            log_s: s.ln(),
            log_lambda: 0.0,
        };
        let analytic = probe.dot(&anchor_world_position_dds(&anchor, &group(s0)));
        let h = FD_STEP;
        let lp = probe.dot(&anchor_world_position(&anchor, &group(s0 + h)));
        let lm = probe.dot(&anchor_world_position(&anchor, &group(s0 - h)));
        acc.record(analytic, (lp - lm) / (2.0 * h));
    }
    acc.done()
}

fn check_depth_loss(rng: &mut StdRng) -> CheckResult {
    let mut acc = Accum::new("depth loss: lambda and rendered depth");
    let (w, h_img) = (16usize, 16usize);
    let mut mono = DepthMap::new(w, h_img);
    for v in mono.values.iter_mut() {
        *v = rng.gen_range(0.5..3.0);
    }
    mono.values[3] = f64::NAN;
    let mut dhat = ImageGray::new(w, h_img);
    for v in dhat.data.iter_mut() {
        *v = rng.gen_range(0.5..3.0);
    }
    let mut alpha = ImageGray::filled(w, h_img, 1.0);
    alpha.data[7] = 0.1;
    let lam = 1.4;
    let (_, g_dhat, g_lam) = depth_loss(&mono, &dhat, &alpha, lam).unwrap();
    let h = FD_STEP;
    let (lp, _, _) = depth_loss(&mono, &dhat, &alpha, lam + h).unwrap();
    let (lm, _, _) = depth_loss(&mono, &dhat, &alpha, lam - h).unwrap();
    acc.record(g_lam, (lp - lm) / (2.0 * h));
    for t in 0..40 {
        let p = (t * 17) % (w * h_img);
        let orig = dhat.data[p];
        dhat.data[p] = orig + h;
        let (lp, _, _) = depth_loss(&mono, &dhat, &alpha, lam).unwrap();
        dhat.data[p] = orig - h;
        let (lm, _, _) = depth_loss(&mono, &dhat, &alpha, lam).unwrap();
        dhat.data[p] = orig;
        acc.record(g_dhat.data[p], (lp - lm) / (2.0 * h));
    }
    acc.done()
}

fn check_image_and_reg_losses(rng: &mut StdRng) -> CheckResult {
    let mut acc = Accum::new("photometric, volume, anisotropy losses");
    let (w, h_img) = (16usize, 16usize);
    let mut gt = ImageRgb::new(w, h_img);
    let mut pred = ImageRgb::new(w, h_img);
    for p in gt.data.iter_mut() {
        *p = Vector3::new(rng.gen(), rng.gen(), rng.gen());
    }
    for p in pred.data.iter_mut() {
        *p = Vector3::new(rng.gen(), rng.gen(), rng.gen());
    }
    let (_, grad) = photometric_loss(&gt, &pred, 0.2).unwrap();
    let h = FD_STEP;
    for t in 0..40 {
        let p = (t * 29) % (w * h_img);
        let ch = t % 3;
        let orig = pred.data[p][ch];
        pred.data[p][ch] = orig + h;
        let (lp, _) = photometric_loss(&gt, &pred, 0.2).unwrap();
        pred.data[p][ch] = orig - h;
        let (lm, _) = photometric_loss(&gt, &pred, 0.2).unwrap();
        pred.data[p][ch] = orig;
        acc.record(grad.data[p][ch], (lp - lm) / (2.0 * h));
    }
    let r_thresh = 1.5;
    let mut splats = random_splats(rng, 10);
    let (_, vg) = volumetric_loss(&splats);
    let (_, ag) = aniso_loss(&splats, r_thresh);
    for i in 0..splats.len() {
        // The threshold max(ratio, r) is a kink; skip splats too close to it
        // for central differences to be one-sided-consistent.
        let ratio = splats[i].scale.max() / splats[i].scale.min();
        let near_kink = (ratio - r_thresh).abs() < 0.02;
        for a in 0..3 {
            let orig = splats[i].scale[a];
            splats[i].scale[a] = orig + h;
            let (vp, _) = volumetric_loss(&splats);
            let (ap, _) = aniso_loss(&splats, r_thresh);
            splats[i].scale[a] = orig - h;
            let (vm, _) = volumetric_loss(&splats);
            let (am, _) = aniso_loss(&splats, r_thresh);
            splats[i].scale[a] = orig;
            acc.record(vg[i][a], (vp - vm) / (2.0 * h));
            if !near_kink {
                acc.record(ag[i][a], (ap - am) / (2.0 * h));
            }
        }
    }
    acc.done()
}

pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let results = vec![
        check_rasterizer(&mut rng),
        check_decoder(&mut rng),
        check_view_scale(&mut rng),
        check_depth_loss(&mut rng),
        check_image_and_reg_losses(&mut rng),
    ];
    Ok(GradcheckReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let report = run_gradcheck(7).unwrap();
        for r in &report.results {
            assert!(
                r.pass,
                "{}: max rel err {} over {} checks",
                r.name, r.max_rel_err, r.checks
            );
        }
    }

    #[test]
    fn suite_is_seed_deterministic() {
        let a = run_gradcheck(3).unwrap();
        let b = run_gradcheck(3).unwrap();
        for (x, y) in a.results.iter().zip(&b.results) {
            assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
        }
    }
}
