//! Tile-based differentiable rasterization of color and depth by
//! front-to-back alpha blending, plus the exact analytic backward pass to
//! splat attributes.

use nalgebra::{Matrix2, Matrix3, Matrix2x3, Vector2, Vector3};
use rayon::prelude::*;

use crate::img::{ImageGray, ImageRgb};
use crate::scene::{
    compose_covariance, pinhole_jacobian, pixel_center, quat_rotmat_backward, quat_to_rotmat,
    Camera, GaussianSplat, SplatGrad, NEAR_PLANE,
};

#[derive(Clone, Copy, Debug)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Diagonal dilation of the projected covariance, px².
    pub dilation: f64,
    /// Per-sample alpha ceiling.
    pub alpha_clamp: f64,
    /// Samples below this alpha are skipped.
    pub alpha_skip: f64,
    /// Blending stops once transmittance falls below this.
    pub term_transmittance: f64,
    /// Screen-space bounding radius in units of sqrt(variance). 3.5 covers
    /// every sample whose alpha can reach `alpha_skip` (o·exp(-3.5²/2) <
    /// 1/255), so tiling never drops a visible contribution.
    pub radius_factor: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            dilation: 0.3,
            alpha_clamp: 0.99,
            alpha_skip: 1.0 / 255.0,
            term_transmittance: 1e-4,
            radius_factor: 3.5,
        }
    }
}

/// Splat after projection to screen space, carrying what blending needs.
#[derive(Clone, Debug)]
pub struct ProjectedSplat {
    pub splat_id: usize,
    pub center: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub inv: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

#[derive(Clone, Debug)]
pub struct RenderTarget {
    pub color: ImageRgb,
    pub depth: ImageGray,
    pub alpha: ImageGray,
    pub background: Vector3<f64>,
}

/// Projects splats, dropping those behind the near plane or whose screen
/// bounding box misses the image. Output preserves input order.
pub fn cull_and_project(
    splats: &[GaussianSplat],
    cam: &Camera,
    cfg: &RasterConfig,
) -> Vec<ProjectedSplat> {
    let w = cam.pose.rotation();
    let mut out = Vec::new();
    for (id, s) in splats.iter().enumerate() {
        let p_cam = cam.pose.apply(&s.mu);
        if p_cam.z <= NEAR_PLANE {
            continue;
        }
        let u = cam.fx * p_cam.x / p_cam.z + cam.cx;
        let v = cam.fy * p_cam.y / p_cam.z + cam.cy;
        let sigma = compose_covariance(&s.rot, &s.scale).expect("splat scales must be positive");
        let j = pinhole_jacobian(cam, &p_cam);
        let t: Matrix2x3<f64> = j * w;
        let mut cov = t * sigma * t.transpose();
        cov[(0, 0)] += cfg.dilation;
        cov[(1, 1)] += cfg.dilation;
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        if det <= 0.0 {
            continue;
        }
        let rx = cfg.radius_factor * cov[(0, 0)].sqrt();
        let ry = cfg.radius_factor * cov[(1, 1)].sqrt();
        if u + rx < 0.0 || u - rx > cam.width as f64 || v + ry < 0.0 || v - ry > cam.height as f64 {
            continue;
        }
        let inv = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
        out.push(ProjectedSplat {
            splat_id: id,
            center: Vector2::new(u, v),
            cov,
            inv,
            depth: p_cam.z,
            opacity: s.opacity,
            color: s.color,
        });
    }
    out
}

/// Global front-to-back order: increasing depth, ties broken by splat id.
pub fn sort_projected(proj: &mut [ProjectedSplat]) {
    proj.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap()
            .then(a.splat_id.cmp(&b.splat_id))
    });
}

pub struct TileSchedule {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub tile_size: usize,
    /// Per-tile indices into the sorted projected list, in sorted order.
    pub lists: Vec<Vec<usize>>,
}

/// Assigns each projected splat to every tile its bounding box touches.
pub fn tile_schedule(
    proj: &[ProjectedSplat],
    cfg: &RasterConfig,
    width: usize,
    height: usize,
) -> TileSchedule {
    let ts = cfg.tile_size.max(1);
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (i, p) in proj.iter().enumerate() {
        let rx = cfg.radius_factor * p.cov[(0, 0)].sqrt();
        let ry = cfg.radius_factor * p.cov[(1, 1)].sqrt();
        let x0 = (((p.center.x - rx) / ts as f64).floor().max(0.0)) as usize;
        let y0 = (((p.center.y - ry) / ts as f64).floor().max(0.0)) as usize;
        let x1 = ((p.center.x + rx) / ts as f64).floor() as usize;
        let y1 = ((p.center.y + ry) / ts as f64).floor() as usize;
        for ty in y0..=y1.min(tiles_y - 1) {
            for tx in x0..=x1.min(tiles_x - 1) {
                lists[ty * tiles_x + tx].push(i);
            }
        }
    }
    TileSchedule {
        tiles_x,
        tiles_y,
        tile_size: ts,
        lists,
    }
}

#[inline]
fn sample_alpha(p: &ProjectedSplat, px: f64, py: f64, cfg: &RasterConfig) -> Option<f64> {
    let d = Vector2::new(px, py) - p.center;
    let maha = p.inv[(0, 0)] * d.x * d.x
        + (p.inv[(0, 1)] + p.inv[(1, 0)]) * d.x * d.y
        + p.inv[(1, 1)] * d.y * d.y;
    if maha < 0.0 {
        return None;
    }
    let alpha = (p.opacity * (-0.5 * maha).exp()).min(cfg.alpha_clamp);
    if alpha < cfg.alpha_skip {
        None
    } else {
        Some(alpha)
    }
}

/// Renders color, alpha-normalized depth, and accumulated opacity.
pub fn render(
    splats: &[GaussianSplat],
    cam: &Camera,
    background: Vector3<f64>,
    cfg: &RasterConfig,
) -> RenderTarget {
    let mut proj = cull_and_project(splats, cam, cfg);
    sort_projected(&mut proj);
    let sched = tile_schedule(&proj, cfg, cam.width, cam.height);
    let (w, h) = (cam.width, cam.height);
    let ts = sched.tile_size;

    let tiles: Vec<(Vec<Vector3<f64>>, Vec<f64>, Vec<f64>)> = (0..sched.lists.len())
        .into_par_iter()
        .map(|tidx| {
            let tx = tidx % sched.tiles_x;
            let ty = tidx / sched.tiles_x;
            let x0 = tx * ts;
            let y0 = ty * ts;
            let x1 = (x0 + ts).min(w);
            let y1 = (y0 + ts).min(h);
            let list = &sched.lists[tidx];
            let mut color = Vec::with_capacity((x1 - x0) * (y1 - y0));
            let mut depth = Vec::with_capacity(color.capacity());
            let mut alpha = Vec::with_capacity(color.capacity());
            for py in y0..y1 {
                for px in x0..x1 {
                    let c = pixel_center(px, py);
                    let mut acc = Vector3::zeros();
                    let mut num = 0.0;
                    let mut a_acc = 0.0;
                    let mut trans = 1.0;
                    for &i in list {
                        let p = &proj[i];
                        if let Some(al) = sample_alpha(p, c.x, c.y, cfg) {
                            let wgt = al * trans;
                            acc += p.color * wgt;
                            num += p.depth * wgt;
                            a_acc += wgt;
                            trans *= 1.0 - al;
                            if trans < cfg.term_transmittance {
                                break;
                            }
                        }
                    }
                    color.push(acc + background * trans);
                    depth.push(num / a_acc.max(1e-6));
                    alpha.push(a_acc);
                }
            }
            (color, depth, alpha)
        })
        .collect();

    let mut out = RenderTarget {
        color: ImageRgb::new(w, h),
        depth: ImageGray::new(w, h),
        alpha: ImageGray::new(w, h),
        background,
    };
    for (tidx, (tc, td, ta)) in tiles.iter().enumerate() {
        let tx = tidx % sched.tiles_x;
        let ty = tidx / sched.tiles_x;
        let x0 = tx * ts;
        let y0 = ty * ts;
        let x1 = (x0 + ts).min(w);
        let y1 = (y0 + ts).min(h);
        let mut k = 0;
        for py in y0..y1 {
            for px in x0..x1 {
                out.color.set(px, py, tc[k]);
                out.depth.set(px, py, td[k]);
                out.alpha.set(px, py, ta[k]);
                k += 1;
            }
        }
    }
    out
}

/// Screen-space gradient accumulator for one projected splat.
#[derive(Clone, Debug)]
struct Grad2d {
    center: Vector2<f64>,
    ginv: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    color: Vector3<f64>,
}

impl Grad2d {
    fn zero() -> Self {
        Grad2d {
            center: Vector2::zeros(),
            ginv: Matrix2::zeros(),
            depth: 0.0,
            opacity: 0.0,
            color: Vector3::zeros(),
        }
    }
}

/// Exact analytic gradients of `render` under the same culling, skip, clamp
/// and termination decisions as the forward pass. `g_alpha` optionally adds
/// an upstream gradient on the accumulated-opacity image.
pub fn render_backward(
    splats: &[GaussianSplat],
    cam: &Camera,
    background: Vector3<f64>,
    cfg: &RasterConfig,
    g_color: &ImageRgb,
    g_depth: &ImageGray,
    g_alpha: Option<&ImageGray>,
) -> Vec<SplatGrad> {
    assert_eq!(g_color.width, cam.width);
    assert_eq!(g_color.height, cam.height);
    let mut proj = cull_and_project(splats, cam, cfg);
    sort_projected(&mut proj);
    let sched = tile_schedule(&proj, cfg, cam.width, cam.height);
    let (w, h) = (cam.width, cam.height);
    let ts = sched.tile_size;

    // Per-tile local accumulation, folded in tile order (deterministic).
    let tile_grads: Vec<Vec<Grad2d>> = (0..sched.lists.len())
        .into_par_iter()
        .map(|tidx| {
            let tx = tidx % sched.tiles_x;
            let ty = tidx / sched.tiles_x;
            let x0 = tx * ts;
            let y0 = ty * ts;
            let x1 = (x0 + ts).min(w);
            let y1 = (y0 + ts).min(h);
            let list = &sched.lists[tidx];
            let mut local = vec![Grad2d::zero(); list.len()];
            let mut contrib: Vec<(usize, f64, f64)> = Vec::new(); // (local idx, alpha, weight)
            for py in y0..y1 {
                for px in x0..x1 {
                    let gc = g_color.get(px, py);
                    let gd = g_depth.get(px, py);
                    let ga_in = g_alpha.map_or(0.0, |g| g.get(px, py));
                    if gc == Vector3::zeros() && gd == 0.0 && ga_in == 0.0 {
                        continue;
                    }
                    let c = pixel_center(px, py);
                    contrib.clear();
                    let mut num = 0.0;
                    let mut a_acc = 0.0;
                    let mut trans = 1.0;
                    for (li, &i) in list.iter().enumerate() {
                        let p = &proj[i];
                        if let Some(al) = sample_alpha(p, c.x, c.y, cfg) {
                            let wgt = al * trans;
                            num += p.depth * wgt;
                            a_acc += wgt;
                            contrib.push((li, al, wgt));
                            trans *= 1.0 - al;
                            if trans < cfg.term_transmittance {
                                break;
                            }
                        }
                    }
                    let denom = a_acc.max(1e-6);
                    let g_num = gd / denom;
                    let mut g_a = ga_in - gc.dot(&background);
                    if a_acc > 1e-6 {
                        g_a -= gd * num / (denom * denom);
                    }
                    // Reverse sweep with suffix accumulator.
                    let mut suffix = 0.0;
                    for &(li, al, wgt) in contrib.iter().rev() {
                        let i = list[li];
                        let p = &proj[i];
                        let g_w = p.color.dot(&gc) + p.depth * g_num + g_a;
                        let t_i = wgt / al;
                        let g_al = t_i * g_w - suffix / (1.0 - al);
                        suffix += wgt * g_w;
                        let g = &mut local[li];
                        g.color += gc * wgt;
                        g.depth += g_num * wgt;
                        // alpha clamped -> zero gradient through the sample.
                        let d = c - p.center;
                        let maha = p.inv[(0, 0)] * d.x * d.x
                            + (p.inv[(0, 1)] + p.inv[(1, 0)]) * d.x * d.y
                            + p.inv[(1, 1)] * d.y * d.y;
                        let gval = (-0.5 * maha).exp();
                        if p.opacity * gval < cfg.alpha_clamp {
                            g.opacity += gval * g_al;
                            let g_power = al * g_al;
                            let v = p.inv * d;
                            g.center += v * g_power;
                            g.ginv -= (d * d.transpose()) * (0.5 * g_power);
                        }
                    }
                }
            }
            local
        })
        .collect();

    let mut grads2d = vec![Grad2d::zero(); proj.len()];
    for (tidx, local) in tile_grads.iter().enumerate() {
        for (li, g) in local.iter().enumerate() {
            let i = sched.lists[tidx][li];
            let gi = &mut grads2d[i];
            gi.center += g.center;
            gi.ginv += g.ginv;
            gi.depth += g.depth;
            gi.opacity += g.opacity;
            gi.color += g.color;
        }
    }

    // Screen-space -> splat-attribute chain.
    let w_rot = cam.pose.rotation();
    let mut out = vec![SplatGrad::default(); splats.len()];
    let per_splat: Vec<(usize, SplatGrad)> = proj
        .par_iter()
        .zip(grads2d.par_iter())
        .map(|(p, g2)| {
            let s = &splats[p.splat_id];
            let p_cam = cam.pose.apply(&s.mu);
            let z = p_cam.z;
            let j = pinhole_jacobian(cam, &p_cam);
            let u_mat: Matrix2x3<f64> = j * w_rot;
            let sigma = compose_covariance(&s.rot, &s.scale).unwrap();
            // Inverse chain: dL/dcov = -inv · dL/dinv · inv.
            let g_cov = -(p.inv * g2.ginv * p.inv);
            // Symmetric part (ginv was accumulated as -1/2 d dᵀ, symmetric).
            let g_sigma = u_mat.transpose() * g_cov * u_mat;
            let g_u = (g_cov + g_cov.transpose()) * u_mat * sigma;
            let g_j = g_u * w_rot.transpose();
            let mut g_pcam = Vector3::zeros();
            // Projection of the center.
            g_pcam.x += g2.center.x * cam.fx / z;
            g_pcam.y += g2.center.y * cam.fy / z;
            g_pcam.z += -g2.center.x * cam.fx * p_cam.x / (z * z)
                - g2.center.y * cam.fy * p_cam.y / (z * z);
            // Depth output.
            g_pcam.z += g2.depth;
            // Jacobian entries depend on p_cam.
            g_pcam.x += g_j[(0, 2)] * (-cam.fx / (z * z));
            g_pcam.y += g_j[(1, 2)] * (-cam.fy / (z * z));
            g_pcam.z += g_j[(0, 0)] * (-cam.fx / (z * z))
                + g_j[(1, 1)] * (-cam.fy / (z * z))
                + g_j[(0, 2)] * (2.0 * cam.fx * p_cam.x / (z * z * z))
                + g_j[(1, 2)] * (2.0 * cam.fy * p_cam.y / (z * z * z));
            let g_mu = w_rot.transpose() * g_pcam;
            // Σ = M Mᵀ with M = R S.
            let r = quat_to_rotmat(&s.rot).unwrap();
            let m = r * Matrix3::from_diagonal(&s.scale);
            let g_sigma_sym = (g_sigma + g_sigma.transpose()) * 0.5;
            let g_m = 2.0 * g_sigma_sym * m;
            let mut g_scale = Vector3::zeros();
            for a in 0..3 {
                for b in 0..3 {
                    g_scale[b] += g_m[(a, b)] * r[(a, b)];
                }
            }
            let mut g_r_mat = Matrix3::zeros();
            for a in 0..3 {
                for b in 0..3 {
                    g_r_mat[(a, b)] = g_m[(a, b)] * s.scale[b];
                }
            }
            let g_rot = quat_rotmat_backward(&s.rot, &g_r_mat).unwrap();
            (
                p.splat_id,
                SplatGrad {
                    mu: g_mu,
                    rot: g_rot,
                    scale: g_scale,
                    opacity: g2.opacity,
                    color: g2.color,
                },
            )
        })
        .collect();
    for (id, g) in per_splat {
        out[id].add_assign(&g);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Pose, QUAT_IDENTITY};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn cam(width: usize, height: usize) -> Camera {
        Camera::new(
            width as f64,
            width as f64,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            Pose::identity(),
        )
        .unwrap()
    }

    fn iso_splat(mu: Vector3<f64>, s: f64, opacity: f64, color: Vector3<f64>) -> GaussianSplat {
        GaussianSplat {
            mu,
            rot: QUAT_IDENTITY,
            scale: Vector3::new(s, s, s),
            opacity,
            color,
        }
    }

    #[test]
    fn empty_scene_renders_background() {
        let cam = cam(32, 32);
        let bg = Vector3::new(0.2, 0.4, 0.6);
        let rt = render(&[], &cam, bg, &RasterConfig::default());
        for px in &rt.color.data {
            assert_eq!(*px, bg);
        }
        assert!(rt.alpha.data.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn near_plane_culls() {
        let cam = cam(32, 32);
        let s = iso_splat(Vector3::new(0.0, 0.0, 0.0), 0.01, 0.5, Vector3::new(1.0, 0.0, 0.0));
        assert!(cull_and_project(&[s], &cam, &RasterConfig::default()).is_empty());
    }

    #[test]
    fn on_axis_center_projection() {
        let cam = cam(32, 32);
        let s = iso_splat(Vector3::new(0.0, 0.0, 2.0), 0.02, 0.5, Vector3::new(1.0, 0.0, 0.0));
        let proj = cull_and_project(&[s], &cam, &RasterConfig::default());
        assert_eq!(proj.len(), 1);
        assert_relative_eq!(proj[0].center.x, 16.0, epsilon = 1e-12);
        assert_relative_eq!(proj[0].center.y, 16.0, epsilon = 1e-12);
    }

    #[test]
    fn survivor_count_matches_per_splat_oracle() {
        let mut rng = StdRng::seed_from_u64(12);
        let camera = cam(64, 64);
        let cfg = RasterConfig::default();
        let splats: Vec<_> = (0..200)
            .map(|_| {
                iso_splat(
                    Vector3::new(
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-1.0..5.0),
                    ),
                    rng.gen_range(0.01..0.1),
                    0.5,
                    Vector3::new(0.5, 0.5, 0.5),
                )
            })
            .collect();
        let survivors = cull_and_project(&splats, &camera, &cfg).len();
        // Brute-force per-splat test with the same two rules.
        let mut expect = 0;
        for s in &splats {
            if s.mu.z <= NEAR_PLANE {
                continue;
            }
            let sigma = compose_covariance(&s.rot, &s.scale).unwrap();
            let c2 = crate::scene::project_covariance(&camera, &s.mu, &sigma, cfg.dilation);
            let c2 = match c2 {
                Some(c) => c,
                None => continue,
            };
            let (u, v, _) = crate::scene::project_point(&camera, &s.mu).unwrap();
            let rx = cfg.radius_factor * c2[(0, 0)].sqrt();
            let ry = cfg.radius_factor * c2[(1, 1)].sqrt();
            if u + rx >= 0.0 && u - rx <= 64.0 && v + ry >= 0.0 && v - ry <= 64.0 {
                expect += 1;
            }
        }
        assert_eq!(survivors, expect);
    }

    #[test]
    fn single_splat_at_pixel_center() {
        // cx = 16.5 so the pixel (16, 16) center coincides with the splat.
        let camera = Camera::new(33.0, 33.0, 16.5, 16.5, 33, 33, Pose::identity()).unwrap();
        let o = 0.7;
        let col = Vector3::new(0.9, 0.1, 0.3);
        let bg = Vector3::new(0.0, 0.0, 1.0);
        let s = iso_splat(Vector3::new(0.0, 0.0, 2.0), 0.05, o, col);
        let rt = render(&[s], &camera, bg, &RasterConfig::default());
        let a = o; // G = 1 exactly at the center
        let expect = col * a + bg * (1.0 - a);
        assert!((rt.color.get(16, 16) - expect).norm() < 1e-12);
        assert_relative_eq!(rt.alpha.get(16, 16), a, epsilon = 1e-12);
    }

    #[test]
    fn depth_of_opaque_splat_equals_its_depth() {
        let camera = Camera::new(33.0, 33.0, 16.5, 16.5, 33, 33, Pose::identity()).unwrap();
        let z = 2.75;
        let s = iso_splat(Vector3::new(0.0, 0.0, z), 0.3, 0.95, Vector3::new(1.0, 1.0, 1.0));
        let rt = render(&[s], &camera, Vector3::zeros(), &RasterConfig::default());
        assert!((rt.depth.get(16, 16) - z).abs() < 1e-5);
    }

    #[test]
    fn tile_membership_simple_cases() {
        let camera = cam(64, 64);
        let cfg = RasterConfig::default();
        // Small splat fully inside one tile.
        let inner = iso_splat(Vector3::new(-0.4, -0.4, 2.0), 0.005, 0.5, Vector3::zeros());
        let mut proj = cull_and_project(&[inner], &camera, &cfg);
        sort_projected(&mut proj);
        let sched = tile_schedule(&proj, &cfg, 64, 64);
        let occupied: Vec<usize> = (0..sched.lists.len())
            .filter(|t| !sched.lists[*t].is_empty())
            .collect();
        assert_eq!(occupied.len(), 1);

        // Splat centered on the corner shared by 4 tiles.
        let corner_world = crate::scene::unproject_point(&camera, 16.0, 16.0, 2.0);
        let corner = iso_splat(corner_world, 0.005, 0.5, Vector3::zeros());
        let mut proj = cull_and_project(&[corner], &camera, &cfg);
        sort_projected(&mut proj);
        let sched = tile_schedule(&proj, &cfg, 64, 64);
        let occupied: Vec<usize> = (0..sched.lists.len())
            .filter(|t| !sched.lists[*t].is_empty())
            .collect();
        assert_eq!(occupied, vec![0, 1, 4, 5]);
    }

    #[test]
    fn transmittance_stays_monotone_and_alpha_bounded() {
        let mut rng = StdRng::seed_from_u64(77);
        let camera = cam(32, 32);
        let splats: Vec<_> = (0..30)
            .map(|_| {
                iso_splat(
                    Vector3::new(
                        rng.gen_range(-0.4..0.4),
                        rng.gen_range(-0.4..0.4),
                        rng.gen_range(1.0..3.0),
                    ),
                    rng.gen_range(0.02..0.15),
                    rng.gen_range(0.2..0.95),
                    Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                )
            })
            .collect();
        let rt = render(&splats, &camera, Vector3::zeros(), &RasterConfig::default());
        for a in &rt.alpha.data {
            assert!(*a >= 0.0 && *a <= 1.0 + 1e-12, "alpha_acc {a}");
        }
    }

    #[test]
    fn three_overlapping_splats_match_scalar_blend() {
        let camera = Camera::new(33.0, 33.0, 16.5, 16.5, 33, 33, Pose::identity()).unwrap();
        let cfg = RasterConfig::default();
        let splats = [
            iso_splat(Vector3::new(0.0, 0.0, 1.5), 0.05, 0.4, Vector3::new(1.0, 0.0, 0.0)),
            iso_splat(Vector3::new(0.01, 0.0, 2.0), 0.06, 0.5, Vector3::new(0.0, 1.0, 0.0)),
            iso_splat(Vector3::new(0.0, 0.01, 2.5), 0.07, 0.6, Vector3::new(0.0, 0.0, 1.0)),
        ];
        let bg = Vector3::new(0.1, 0.1, 0.1);
        let rt = render(&splats, &camera, bg, &cfg);
        // Scalar term-by-term blend at the center pixel.
        let c = pixel_center(16, 16);
        let mut proj = cull_and_project(&splats, &camera, &cfg);
        sort_projected(&mut proj);
        let mut acc = Vector3::zeros();
        let mut trans: f64 = 1.0;
        for p in &proj {
            let d = c - p.center;
            let maha = (p.inv * d).dot(&d);
            let al = (p.opacity * (-0.5 * maha).exp()).min(cfg.alpha_clamp);
            if al < cfg.alpha_skip {
                continue;
            }
            acc += p.color * al * trans;
            trans *= 1.0 - al;
        }
        let expect = acc + bg * trans;
        assert!((rt.color.get(16, 16) - expect).norm() < 1e-6);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_splat_grads() {
        let camera = cam(32, 32);
        let s = iso_splat(Vector3::new(0.0, 0.0, 2.0), 0.05, 0.5, Vector3::new(1.0, 0.5, 0.2));
        let g = render_backward(
            &[s],
            &camera,
            Vector3::zeros(),
            &RasterConfig::default(),
            &ImageRgb::new(32, 32),
            &ImageGray::new(32, 32),
            None,
        );
        assert_eq!(g[0], SplatGrad::default());
    }

    /// L = Σ_p gC_p·C_p + gD_p·D_p as a linear probe.
    fn probe(
        splats: &[GaussianSplat],
        camera: &Camera,
        bg: Vector3<f64>,
        cfg: &RasterConfig,
        gc: &ImageRgb,
        gd: &ImageGray,
    ) -> f64 {
        let rt = render(splats, camera, bg, cfg);
        let mut l = 0.0;
        for (a, b) in rt.color.data.iter().zip(&gc.data) {
            l += a.dot(b);
        }
        for (a, b) in rt.depth.data.iter().zip(&gd.data) {
            l += a * b;
        }
        l
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(101);
        let camera = cam(24, 24);
        let cfg = RasterConfig::default();
        let bg = Vector3::new(0.3, 0.2, 0.1);
        let mut splats: Vec<GaussianSplat> = (0..8)
            .map(|i| GaussianSplat {
                mu: Vector3::new(
                    rng.gen_range(-0.25..0.25),
                    rng.gen_range(-0.25..0.25),
                    1.5 + 0.2 * i as f64,
                ),
                rot: crate::scene::quat_normalize(&[
                    1.0,
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                ])
                .unwrap(),
                scale: Vector3::new(
                    rng.gen_range(0.04..0.12),
                    rng.gen_range(0.04..0.12),
                    rng.gen_range(0.04..0.12),
                ),
                opacity: rng.gen_range(0.3..0.7),
                color: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            })
            .collect();
        let mut gc = ImageRgb::new(24, 24);
        let mut gd = ImageGray::new(24, 24);
        for v in gc.data.iter_mut() {
            *v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        for v in gd.data.iter_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
        let grads = render_backward(&splats, &camera, bg, &cfg, &gc, &gd, None);
        let h = 1e-4;
        let rel = |a: f64, fd: f64| (a - fd).abs() / fd.abs().max(1e-3);
        for i in 0..splats.len() {
            for a in 0..3 {
                let orig = splats[i].mu[a];
                splats[i].mu[a] = orig + h;
                let lp = probe(&splats, &camera, bg, &cfg, &gc, &gd);
                splats[i].mu[a] = orig - h;
                let lm = probe(&splats, &camera, bg, &cfg, &gc, &gd);
                splats[i].mu[a] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!(rel(grads[i].mu[a], fd) < 1e-3, "mu[{i}][{a}] {} vs {fd}", grads[i].mu[a]);
            }
            for a in 0..3 {
                let orig = splats[i].scale[a];
                splats[i].scale[a] = orig + h;
                let lp = probe(&splats, &camera, bg, &cfg, &gc, &gd);
                splats[i].scale[a] = orig - h;
                let lm = probe(&splats, &camera, bg, &cfg, &gc, &gd);
                splats[i].scale[a] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!(rel(grads[i].scale[a], fd) < 1e-3, "scale[{i}][{a}]");
            }
            for a in 0..4 {
                let orig = splats[i].rot[a];
                splats[i].rot[a] = orig + h;
                let lp = probe(&splats, &camera, bg, &cfg, &gc, &gd);
                splats[i].rot[a] = orig - h;
                let lm = probe(&splats, &camera, bg, &cfg, &gc, &gd);
                splats[i].rot[a] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!(rel(grads[i].rot[a], fd) < 1e-3, "rot[{i}][{a}]");
            }
            {
                let orig = splats[i].opacity;
                splats[i].opacity = orig + h;
                let lp = probe(&splats, &camera, bg, &cfg, &gc, &gd);
                splats[i].opacity = orig - h;
                let lm = probe(&splats, &camera, bg, &cfg, &gc, &gd);
                splats[i].opacity = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!(rel(grads[i].opacity, fd) < 1e-3, "opacity[{i}]");
            }
            for a in 0..3 {
                let orig = splats[i].color[a];
                splats[i].color[a] = orig + h;
                let lp = probe(&splats, &camera, bg, &cfg, &gc, &gd);
                splats[i].color[a] = orig - h;
                let lm = probe(&splats, &camera, bg, &cfg, &gc, &gd);
                splats[i].color[a] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!(rel(grads[i].color[a], fd) < 1e-3, "color[{i}][{a}]");
            }
        }
    }
}
