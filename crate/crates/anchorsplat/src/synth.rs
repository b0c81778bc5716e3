//! Synthetic scenes with known ground truth: a random opaque splat cloud is
//! rendered into color + depth from orbit or free-trajectory cameras, and the
//! written "monocular" depths are corrupted by known per-view scales s*ᵢ so
//! calibration quality is measurable. Also hosts the evaluation suite (PSNR,
//! SSIM, scale recovery, decoder ablation).

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::anchors::{DepthMap, TrainingView};
use crate::error::{Error, Result};
use crate::img::ImageRgb;
use crate::losses::ssim_with_grad;
use crate::rasterize::{render, RasterConfig};
use crate::scene::{quat_normalize, Camera, GaussianSplat, Pose, Quat};
use crate::train::{Model, ModelConfig, TrainConfig, Trainer};

pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraPath {
    Orbit,
    Free,
}

#[derive(Clone, Copy, Debug)]
pub struct SynthSceneSpec {
    pub seed: u64,
    pub n_splats: usize,
    /// Scene half-extent in meters; splat centers fill [-extent, extent]³.
    pub extent: f64,
    pub n_train_views: usize,
    pub n_eval_views: usize,
    pub path: CameraPath,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Per-view depth corruption scales s*ᵢ drawn log-uniform from this
    /// range; (1, 1) writes clean depths.
    pub s_star_range: (f64, f64),
    /// Multiplicative log-normal depth noise; 0 disables.
    pub noise_sigma: f64,
    pub orbit_radius: f64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        SynthSceneSpec {
            seed: 0,
            n_splats: 40,
            extent: 1.0,
            n_train_views: 8,
            n_eval_views: 4,
            path: CameraPath::Orbit,
            width: 64,
            height: 64,
            focal: 64.0,
            s_star_range: (1.0, 1.0),
            noise_sigma: 0.0,
            orbit_radius: 4.0,
        }
    }
}

pub struct SynthDataset {
    pub train: Vec<TrainingView>,
    /// Eval views carry clean (uncorrupted) depth.
    pub eval: Vec<TrainingView>,
    pub s_star: Vec<f64>,
    pub splats: Vec<GaussianSplat>,
}

/// Camera-to-world pose looking from `eye` toward `target`, +z forward,
/// +y down in the image.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Result<Pose> {
    let f = target - eye;
    let n = f.norm();
    if n < 1e-9 {
        return Err(Error::Degenerate("look-at target coincides with eye".into()));
    }
    let f = f / n;
    let down0 = if f.y.abs() < 0.99 {
        Vector3::new(0.0, -1.0, 0.0)
    } else {
        Vector3::new(1.0, 0.0, 0.0)
    };
    let r = down0.cross(&f).normalize();
    let d = f.cross(&r);
    let m = Matrix3::from_columns(&[r, d, f]);
    let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
    let q: Quat = quat_normalize(&[uq.w, uq.i, uq.j, uq.k])?;
    Ok(Pose::new(q, eye))
}

fn random_scene(rng: &mut ChaCha8Rng, spec: &SynthSceneSpec) -> Vec<GaussianSplat> {
    (0..spec.n_splats)
        .map(|_| {
            let e = spec.extent;
            let q = quat_normalize(&[
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ])
            .unwrap();
            GaussianSplat {
                mu: Vector3::new(
                    rng.gen_range(-e..e),
                    rng.gen_range(-e..e),
                    rng.gen_range(-e..e),
                ),
                rot: q,
                scale: Vector3::new(
                    rng.gen_range(0.08 * e..0.25 * e),
                    rng.gen_range(0.08 * e..0.25 * e),
                    rng.gen_range(0.08 * e..0.25 * e),
                ),
                opacity: rng.gen_range(0.7..0.95),
                color: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            }
        })
        .collect()
}

fn camera_poses(rng: &mut ChaCha8Rng, spec: &SynthSceneSpec) -> Result<Vec<Pose>> {
    let total = spec.n_train_views + spec.n_eval_views;
    if spec.n_train_views == 0 {
        return Err(Error::Config("need at least one training view".into()));
    }
    let poses: Vec<Pose> = match spec.path {
        CameraPath::Orbit => {
            if spec.orbit_radius <= 0.0 {
                return Err(Error::Config(
                    "orbit radius must be positive (coincident views)".into(),
                ));
            }
            (0..total)
                .map(|i| {
                    let th = 2.0 * std::f64::consts::PI * i as f64 / total as f64;
                    let eye = Vector3::new(
                        spec.orbit_radius * th.sin(),
                        0.25 * spec.orbit_radius,
                        spec.orbit_radius * th.cos(),
                    );
                    look_at(eye, Vector3::zeros())
                })
                .collect::<Result<_>>()?
        }
        CameraPath::Free => {
            // Seeded random walk on a shell around the scene, always facing
            // a jittered point near the center.
            let mut eye = Vector3::new(0.0, 0.3 * spec.orbit_radius, spec.orbit_radius);
            (0..total)
                .map(|_| {
                    let step = Vector3::new(
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.1..0.1),
                        rng.gen_range(-0.3..0.3),
                    ) * spec.extent;
                    eye += step;
                    // Keep a sane standoff distance.
                    let dist = eye.norm();
                    if dist < 2.0 * spec.extent {
                        eye *= 2.0 * spec.extent / dist;
                    }
                    let target = Vector3::new(
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.2..0.2),
                    ) * spec.extent;
                    look_at(eye, target)
                })
                .collect::<Result<_>>()?
        }
    };
    for i in 1..poses.len() {
        if (poses[i].t - poses[0].t).norm() > 1e-9 {
            return Ok(poses);
        }
    }
    if poses.len() > 1 {
        return Err(Error::Config("degenerate camera path: all views coincident".into()));
    }
    Ok(poses)
}

/// Renders ground truth and assembles train (corrupted depth) and eval
/// (clean) views. Deterministic in the seed.
pub fn generate(spec: &SynthSceneSpec) -> Result<SynthDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let splats = random_scene(&mut rng, spec);
    let poses = camera_poses(&mut rng, spec)?;
    let s_star: Vec<f64> = (0..spec.n_train_views)
        .map(|_| {
            let (lo, hi) = spec.s_star_range;
            if lo == hi {
                lo
            } else {
                (rng.gen_range(lo.ln()..hi.ln())).exp()
            }
        })
        .collect();
    let noise_seeds: Vec<u64> = (0..spec.n_train_views).map(|_| rng.gen()).collect();

    let cfg = RasterConfig::default();
    let cam_for = |pose: &Pose| {
        Camera::new(
            spec.focal,
            spec.focal,
            spec.width as f64 / 2.0,
            spec.height as f64 / 2.0,
            spec.width,
            spec.height,
            pose.inverse(),
        )
    };

    let rendered: Vec<(ImageRgb, DepthMap)> = poses
        .par_iter()
        .map(|pose| {
            let cam = cam_for(pose)?;
            let t = render(&splats, &cam, Vector3::zeros(), &cfg);
            let mut depth = DepthMap::new(spec.width, spec.height);
            for p in 0..depth.values.len() {
                depth.values[p] = if t.alpha.data[p] >= 0.5 {
                    t.depth.data[p]
                } else {
                    f64::NAN
                };
            }
            Ok((t.color, depth))
        })
        .collect::<Result<_>>()?;

    let mut train = Vec::with_capacity(spec.n_train_views);
    let mut eval = Vec::with_capacity(spec.n_eval_views);
    for (i, ((image, depth), pose)) in rendered.into_iter().zip(&poses).enumerate() {
        let cam = cam_for(pose)?;
        if i < spec.n_train_views {
            // Corruption: D_mono = true / s*, so recovery drives ŝ -> s*.
            let mut d = depth.clone();
            let mut nrng = ChaCha8Rng::seed_from_u64(noise_seeds[i]);
            for v in d.values.iter_mut() {
                if DepthMap::is_valid(*v) {
                    *v /= s_star[i];
                    if spec.noise_sigma > 0.0 {
                        let n: f64 = StandardNormal.sample(&mut nrng);
                        *v *= (spec.noise_sigma * n).exp();
                    }
                }
            }
            train.push(TrainingView::new(cam, image, d)?);
        } else {
            eval.push(TrainingView::new(cam, image, depth)?);
        }
    }
    Ok(SynthDataset {
        train,
        eval,
        s_star,
        splats,
    })
}

// ---------------------------------------------------------------------------
// On-disk form: standard dataset layout plus a manifest recording the
// corruption ground truth.

/// FNV-1a over all train images and depths (depth NaNs hash by bit pattern).
pub fn scene_hash(ds: &SynthDataset) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for v in &ds.train {
        for p in &v.image.data {
            for c in 0..3 {
                eat(&p[c].to_le_bytes());
            }
        }
        for d in &v.depth.values {
            eat(&d.to_le_bytes());
        }
    }
    h
}

pub fn write_synth_dataset(
    root: &std::path::Path,
    ds: &SynthDataset,
    spec: &SynthSceneSpec,
) -> Result<()> {
    crate::io::write_dataset(root, &ds.train)?;
    if !ds.eval.is_empty() {
        crate::io::write_dataset(&root.join("eval"), &ds.eval)?;
    }
    let mut m = std::collections::BTreeMap::new();
    m.insert("seed".into(), spec.seed.to_string());
    m.insert("sigma".into(), spec.noise_sigma.to_string());
    m.insert("n_train".into(), ds.train.len().to_string());
    m.insert("n_eval".into(), ds.eval.len().to_string());
    // Depths on disk are true_depth / s_star; recovery multiplies by s_star.
    for (i, s) in ds.s_star.iter().enumerate() {
        m.insert(format!("s_star_{i}"), format!("{s:.17e}"));
    }
    m.insert("scene_hash".into(), format!("{:016x}", scene_hash(ds)));
    crate::io::write_config(&root.join("manifest.txt"), &m)
}

/// Ground-truth corruption scales from a generated dataset's manifest.
pub fn read_manifest_s_star(root: &std::path::Path) -> Result<Vec<f64>> {
    let m = crate::io::parse_config(&root.join("manifest.txt"))?;
    let n: usize = m
        .get("n_train")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Config("manifest missing n_train".into()))?;
    (0..n)
        .map(|i| {
            m.get(&format!("s_star_{i}"))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("manifest missing s_star_{i}")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Metrics.

pub fn mse(a: &ImageRgb, b: &ImageRgb) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = x - y;
        acc += d.norm_squared();
    }
    acc / (a.data.len() * 3) as f64
}

/// PSNR on [0,1] images, capped at 99.0.
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> f64 {
    let m = mse(a, b);
    if m <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Renders every view from the model and scores it against the view's image.
pub fn eval_render(model: &Model, views: &[TrainingView]) -> Result<(Vec<ViewMetrics>, f64, f64)> {
    let fwd = model.forward()?;
    let mut out = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let t = render(&fwd.splats, &v.cam, model.background, &model.raster);
        let (ssim, _) = ssim_with_grad(&v.image, &t.color)?;
        out.push(ViewMetrics {
            view: i,
            psnr: psnr(&v.image, &t.color),
            ssim,
        });
    }
    let n = out.len().max(1) as f64;
    let mean_psnr = out.iter().map(|m| m.psnr).sum::<f64>() / n;
    let mean_ssim = out.iter().map(|m| m.ssim).sum::<f64>() / n;
    Ok((out, mean_psnr, mean_ssim))
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct ScaleRecoveryReport {
    /// Gauge-normalized recovery ratios, one per train view; 1 is perfect.
    pub rho: Vec<f64>,
    pub max_deviation: f64,
    pub pass: bool,
}

/// Monocular scale is recoverable only up to one global factor, so the
/// ratios ŝᵢ/s*ᵢ are normalized by their geometric mean before comparison
/// against 1.
pub fn eval_scale_recovery(model: &Model, s_star: &[f64], tolerance: f64) -> Result<ScaleRecoveryReport> {
    if model.anchors.groups.len() != s_star.len() {
        return Err(Error::Mismatch(format!(
            "{} view groups vs {} ground-truth scales",
            model.anchors.groups.len(),
            s_star.len()
        )));
    }
    let raw: Vec<f64> = model
        .anchors
        .groups
        .iter()
        .zip(s_star)
        .map(|(g, s)| g.depth_scale_s() / s)
        .collect();
    let gm = (raw.iter().map(|r| r.ln()).sum::<f64>() / raw.len() as f64).exp();
    let rho: Vec<f64> = raw.iter().map(|r| r / gm).collect();
    let max_deviation = rho.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    Ok(ScaleRecoveryReport {
        rho,
        max_deviation,
        pass: max_deviation < tolerance,
    })
}

// ---------------------------------------------------------------------------
// Residual-vs-direct decoder ablation.

#[derive(Clone, Debug, serde::Serialize)]
pub struct AblationCurves {
    /// (iteration, train-set mean PSNR) samples for each variant.
    pub residual: Vec<(usize, f64)>,
    pub direct: Vec<(usize, f64)>,
}

/// Trains one decoder variant, pausing at multiples of `sample_every` to
/// score train-set PSNR. Pausing does not perturb the schedule.
pub fn train_with_curve(
    views: &[TrainingView],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    sample_every: usize,
) -> Result<(Model, Vec<(usize, f64)>)> {
    let model = Model::build(views, model_cfg)?;
    let mut trainer = Trainer::new(model, *train_cfg);
    let every = sample_every.max(1);
    let total = train_cfg.iterations;
    let mut curve = Vec::new();
    let (_, p0, _) = eval_render(&trainer.model, views)?;
    curve.push((0, p0));
    let mut done = 0usize;
    while done < total {
        let stop = (done + every).min(total);
        trainer.run_for(views, stop - done, |_, _, _| Ok(()))?;
        done = stop;
        let (_, p, _) = eval_render(&trainer.model, views)?;
        curve.push((done, p));
    }
    Ok((trainer.model, curve))
}

/// Trains both decoder forms on identical data/seeds, sampling train PSNR
/// along the way.
pub fn ablation_residual_vs_direct(
    views: &[TrainingView],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    sample_every: usize,
) -> Result<AblationCurves> {
    let run = |mode| -> Result<Vec<(usize, f64)>> {
        let mcfg = ModelConfig {
            color_mode: mode,
            ..*model_cfg
        };
        let (_, curve) = train_with_curve(views, &mcfg, train_cfg, sample_every)?;
        Ok(curve)
    };
    Ok(AblationCurves {
        residual: run(crate::decoder::ColorMode::Residual)?,
        direct: run(crate::decoder::ColorMode::Direct)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn clean_spec_writes_true_depths() {
        let spec = SynthSceneSpec {
            n_train_views: 2,
            n_eval_views: 1,
            width: 32,
            height: 32,
            focal: 32.0,
            ..SynthSceneSpec::default()
        };
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.s_star, vec![1.0, 1.0]);
        // Clean: train depth equals an uncorrupted re-render.
        let ds2 = generate(&spec).unwrap();
        for (a, b) in ds.train[0].depth.values.iter().zip(&ds2.train[0].depth.values) {
            assert!(a.to_bits() == b.to_bits());
        }
    }

    #[test]
    fn orbit_poses_distinct_and_facing_center() {
        let spec = SynthSceneSpec {
            n_train_views: 8,
            n_eval_views: 0,
            ..SynthSceneSpec::default()
        };
        let ds = generate(&spec).unwrap();
        for i in 0..8 {
            for j in 0..i {
                let d = (ds.train[i].cam_to_world.t - ds.train[j].cam_to_world.t).norm();
                assert!(d > 1e-6, "views {i},{j} coincide");
            }
            // Forward axis (+z of camera, in world) points at the origin.
            let c2w = ds.train[i].cam_to_world;
            let fwd = c2w.rotation() * Vector3::new(0.0, 0.0, 1.0);
            let to_center = (-c2w.t).normalize();
            assert!(fwd.dot(&to_center) > 0.999, "view {i} not facing center");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSceneSpec {
            s_star_range: (0.5, 2.0),
            noise_sigma: 0.05,
            ..SynthSceneSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.s_star, b.s_star);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.image.data, y.image.data);
            for (u, v) in x.depth.values.iter().zip(&y.depth.values) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn corruption_divides_by_s_star() {
        let spec = SynthSceneSpec {
            seed: 3,
            s_star_range: (2.0, 2.0),
            n_train_views: 1,
            n_eval_views: 1,
            ..SynthSceneSpec::default()
        };
        let ds = generate(&spec).unwrap();
        // Eval view 0 shares no pose with train 0, so regenerate clean.
        let clean = generate(&SynthSceneSpec {
            s_star_range: (1.0, 1.0),
            ..spec
        })
        .unwrap();
        for (c, t) in clean.train[0].depth.values.iter().zip(&ds.train[0].depth.values) {
            if DepthMap::is_valid(*c) {
                assert_relative_eq!(c / 2.0, *t, epsilon = 1e-12);
            } else {
                assert!(t.is_nan());
            }
        }
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageRgb::filled(8, 8, Vector3::new(0.5, 0.5, 0.5));
        assert_eq!(psnr(&a, &a), PSNR_CAP);
        let b = ImageRgb::filled(8, 8, Vector3::new(0.6, 0.6, 0.6));
        assert_relative_eq!(psnr(&a, &b), 20.0, epsilon = 1e-9);
        // Independent two-line recomputation.
        let m: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).norm_squared())
            .sum::<f64>()
            / (8.0 * 8.0 * 3.0);
        assert_relative_eq!(psnr(&a, &b), 10.0 * (1.0 / m).log10(), epsilon = 1e-9);
    }

    #[test]
    fn scale_recovery_gauge_invariance() {
        let spec = SynthSceneSpec {
            n_train_views: 3,
            n_eval_views: 0,
            ..SynthSceneSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let model = Model::build(&ds.train, &ModelConfig::default()).unwrap();
        let r1 = eval_scale_recovery(&model, &[1.0, 2.0, 0.5], 0.05).unwrap();
        let r2 = eval_scale_recovery(&model, &[3.0, 6.0, 1.5], 0.05).unwrap();
        for (a, b) in r1.rho.iter().zip(&r2.rho) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        let exact = eval_scale_recovery(&model, &[1.0, 1.0, 1.0], 0.05).unwrap();
        assert!(exact.pass);
        assert!(exact.max_deviation < 1e-12);
    }

    #[test]
    fn degenerate_paths_rejected() {
        assert!(generate(&SynthSceneSpec {
            orbit_radius: 0.0,
            ..SynthSceneSpec::default()
        })
        .is_err());
        assert!(generate(&SynthSceneSpec {
            n_train_views: 0,
            ..SynthSceneSpec::default()
        })
        .is_err());
    }

    #[test]
    fn free_path_generates_valid_views() {
        let spec = SynthSceneSpec {
            path: CameraPath::Free,
            n_train_views: 4,
            n_eval_views: 2,
            ..SynthSceneSpec::default()
        };
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.train.len(), 4);
        assert_eq!(ds.eval.len(), 2);
        // Scene must actually be visible from the walk.
        let visible = ds.train[0]
            .depth
            .values
            .iter()
            .filter(|v| DepthMap::is_valid(**v))
            .count();
        assert!(visible > 0);
    }
}
