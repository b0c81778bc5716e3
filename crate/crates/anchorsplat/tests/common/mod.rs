//! Independent reference implementations used as oracles by the integration
//! tests. Everything here is written directly from the mathematical
//! definitions — per-pixel loops over globally sorted splats, dense 2D
//! window sums — and deliberately shares no code with the production
//! renderer or loss implementations.

use anchorsplat::img::{ImageGray, ImageRgb};
use anchorsplat::scene::{Camera, GaussianSplat};
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

// The blending model's fixed constants, restated here independently.
const NEAR: f64 = 0.01;
const DILATION: f64 = 0.3;
const ALPHA_CLAMP: f64 = 0.99;
const ALPHA_SKIP: f64 = 1.0 / 255.0;
const TERM: f64 = 1e-4;

pub struct NaiveTarget {
    pub color: ImageRgb,
    pub depth: ImageGray,
    pub alpha: ImageGray,
}

fn quat_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

struct Projected {
    center: Vector2<f64>,
    inv: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    color: Vector3<f64>,
}

/// Per-pixel reference renderer: every splat is projected with the EWA
/// affine approximation, sorted front to back globally, and blended at every
/// pixel with no tiling and no screen-space culling.
pub fn naive_render(splats: &[GaussianSplat], cam: &Camera, background: Vector3<f64>) -> NaiveTarget {
    let w_mat = quat_rotation(&cam.pose.rot);
    let t = cam.pose.t;

    let mut proj: Vec<(usize, Projected)> = Vec::new();
    for (id, s) in splats.iter().enumerate() {
        let p_cam = w_mat * s.mu + t;
        if p_cam.z <= NEAR {
            continue;
        }
        let u = cam.fx * p_cam.x / p_cam.z + cam.cx;
        let v = cam.fy * p_cam.y / p_cam.z + cam.cy;
        // 3D covariance R S S^T R^T.
        let r = quat_rotation(&s.rot);
        let sdiag = Matrix3::from_diagonal(&Vector3::new(
            s.scale.x * s.scale.x,
            s.scale.y * s.scale.y,
            s.scale.z * s.scale.z,
        ));
        let sigma = r * sdiag * r.transpose();
        // Pinhole Jacobian at the camera-frame center.
        let z = p_cam.z;
        let j = nalgebra::Matrix2x3::new(
            cam.fx / z,
            0.0,
            -cam.fx * p_cam.x / (z * z),
            0.0,
            cam.fy / z,
            -cam.fy * p_cam.y / (z * z),
        );
        let u_mat = j * w_mat;
        let mut cov = u_mat * sigma * u_mat.transpose();
        cov[(0, 0)] += DILATION;
        cov[(1, 1)] += DILATION;
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        if det <= 0.0 {
            continue;
        }
        let inv = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
        proj.push((
            id,
            Projected {
                center: Vector2::new(u, v),
                inv,
                depth: z,
                opacity: s.opacity,
                color: s.color,
            },
        ));
    }
    proj.sort_by(|a, b| a.1.depth.partial_cmp(&b.1.depth).unwrap().then(a.0.cmp(&b.0)));

    let mut out = NaiveTarget {
        color: ImageRgb::new(cam.width, cam.height),
        depth: ImageGray::new(cam.width, cam.height),
        alpha: ImageGray::new(cam.width, cam.height),
    };
    for py in 0..cam.height {
        for px in 0..cam.width {
            let c = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
            let mut acc = Vector3::zeros();
            let mut num = 0.0;
            let mut a_acc = 0.0;
            let mut trans = 1.0;
            for (_, p) in &proj {
                let d = c - p.center;
                let maha = p.inv[(0, 0)] * d.x * d.x
                    + (p.inv[(0, 1)] + p.inv[(1, 0)]) * d.x * d.y
                    + p.inv[(1, 1)] * d.y * d.y;
                if maha < 0.0 {
                    continue;
                }
                let alpha = (p.opacity * (-0.5 * maha).exp()).min(ALPHA_CLAMP);
                if alpha < ALPHA_SKIP {
                    continue;
                }
                let wgt = alpha * trans;
                acc += p.color * wgt;
                num += p.depth * wgt;
                a_acc += wgt;
                trans *= 1.0 - alpha;
                if trans < TERM {
                    break;
                }
            }
            out.color.set(px, py, acc + background * trans);
            out.depth.set(px, py, num / a_acc.max(1e-6));
            out.alpha.set(px, py, a_acc);
        }
    }
    out
}

/// Definitional PSNR on [0, 1] images: 10 log10(1 / MSE), capped at 99 dB.
pub fn reference_psnr(a: &ImageRgb, b: &ImageRgb) -> f64 {
    let mut se = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = x - y;
        se += d.x * d.x + d.y * d.y + d.z * d.z;
    }
    let mse = se / (3.0 * a.data.len() as f64);
    if mse == 0.0 {
        return 99.0;
    }
    (10.0 * (1.0 / mse).log10()).min(99.0)
}

/// Definitional mean SSIM: dense (non-separable) 11x11 Gaussian-weighted
/// window statistics with border renormalization, averaged over pixels and
/// channels.
pub fn reference_ssim(a: &ImageRgb, b: &ImageRgb) -> f64 {
    const R: isize = 5;
    const SIGMA: f64 = 1.5;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let (w, h) = (a.width as isize, a.height as isize);
    let mut total = 0.0;
    for ch in 0..3 {
        for py in 0..h {
            for px in 0..w {
                let (mut sw, mut sx, mut sy, mut sxx, mut syy, mut sxy) =
                    (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -R..=R {
                    for dx in -R..=R {
                        let (qx, qy) = (px + dx, py + dy);
                        if qx < 0 || qx >= w || qy < 0 || qy >= h {
                            continue;
                        }
                        let g = (-((dx * dx + dy * dy) as f64) / (2.0 * SIGMA * SIGMA)).exp();
                        let x = a.data[(qy * w + qx) as usize][ch];
                        let y = b.data[(qy * w + qx) as usize][ch];
                        sw += g;
                        sx += g * x;
                        sy += g * y;
                        sxx += g * x * x;
                        syy += g * y * y;
                        sxy += g * x * y;
                    }
                }
                let mx = sx / sw;
                let my = sy / sw;
                let vx = sxx / sw - mx * mx;
                let vy = syy / sw - my * my;
                let cxy = sxy / sw - mx * my;
                total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2))
                    / ((mx * mx + my * my + C1) * (vx + vy + C2));
            }
        }
    }
    total / (3.0 * (w * h) as f64)
}
