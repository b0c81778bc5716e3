//! Training losses: photometric (L1 + D-SSIM), scale-consistent depth,
//! volumetric and anisotropy regularizers, and the weighted total. Every
//! loss returns analytic gradients.

use nalgebra::Vector3;

use crate::anchors::DepthMap;
use crate::error::{Error, Result};
use crate::img::{ImageGray, ImageRgb};
use crate::scene::GaussianSplat;

pub const SSIM_WINDOW_RADIUS: usize = 5; // 11x11
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Depth supervision is applied only where accumulated opacity reaches this.
pub const DEPTH_ALPHA_MIN: f64 = 0.5;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub lambda_u: f64,
    /// D-SSIM mix weight inside the photometric loss.
    pub w: f64,
    /// Anisotropy ratio threshold.
    pub r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_p: 1.0,
            lambda_s: 0.01,
            lambda_d: 0.2,
            lambda_u: 0.01,
            w: 0.2,
            r: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct LossBreakdown {
    pub photo: f64,
    pub depth: f64,
    pub vol: f64,
    pub aniso: f64,
    pub total: f64,
}

pub fn total_loss(weights: &LossWeights, photo: f64, depth: f64, vol: f64, aniso: f64) -> LossBreakdown {
    LossBreakdown {
        photo,
        depth,
        vol,
        aniso,
        total: weights.lambda_p * photo
            + weights.lambda_d * depth
            + weights.lambda_s * vol
            + weights.lambda_u * aniso,
    }
}

fn gaussian_kernel() -> [f64; 2 * SSIM_WINDOW_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_WINDOW_RADIUS + 1];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_WINDOW_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable windowed mean with zero padding and per-pixel kernel
/// renormalization, so every output is a true weighted average even at the
/// borders (and for images smaller than the window).
struct WindowOps {
    kernel: [f64; 2 * SSIM_WINDOW_RADIUS + 1],
    norm_x: Vec<f64>,
    norm_y: Vec<f64>,
    width: usize,
    height: usize,
}

impl WindowOps {
    fn new(width: usize, height: usize) -> Self {
        let kernel = gaussian_kernel();
        let r = SSIM_WINDOW_RADIUS as isize;
        let edge_norm = |n: usize| -> Vec<f64> {
            (0..n as isize)
                .map(|x| {
                    let mut s = 0.0;
                    for t in -r..=r {
                        if x + t >= 0 && x + t < n as isize {
                            s += kernel[(t + r) as usize];
                        }
                    }
                    s
                })
                .collect()
        };
        WindowOps {
            kernel,
            norm_x: edge_norm(width),
            norm_y: edge_norm(height),
            width,
            height,
        }
    }

    fn conv_raw(&self, f: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let r = SSIM_WINDOW_RADIUS as isize;
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w as isize {
                let mut s = 0.0;
                for t in -r..=r {
                    let xx = x + t;
                    if xx >= 0 && xx < w as isize {
                        s += self.kernel[(t + r) as usize] * f[y * w + xx as usize];
                    }
                }
                tmp[y * w + x as usize] = s;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h as isize {
            for x in 0..w {
                let mut s = 0.0;
                for t in -r..=r {
                    let yy = y + t;
                    if yy >= 0 && yy < h as isize {
                        s += self.kernel[(t + r) as usize] * tmp[yy as usize * w + x];
                    }
                }
                out[y as usize * w + x] = s;
            }
        }
        out
    }

    /// Normalized windowed mean.
    fn mean(&self, f: &[f64]) -> Vec<f64> {
        let mut out = self.conv_raw(f);
        for y in 0..self.height {
            for x in 0..self.width {
                out[y * self.width + x] /= self.norm_x[x] * self.norm_y[y];
            }
        }
        out
    }

    /// Adjoint of `mean` (kernel is symmetric).
    fn mean_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut scaled = g.to_vec();
        for y in 0..self.height {
            for x in 0..self.width {
                scaled[y * self.width + x] /= self.norm_x[x] * self.norm_y[y];
            }
        }
        self.conv_raw(&scaled)
    }
}

/// Mean SSIM over pixels and channels, plus its gradient w.r.t. `ihat`.
pub fn ssim_with_grad(i: &ImageRgb, ihat: &ImageRgb) -> Result<(f64, ImageRgb)> {
    if i.width != ihat.width || i.height != ihat.height {
        return Err(Error::Mismatch(format!(
            "ssim inputs {}x{} vs {}x{}",
            i.width, i.height, ihat.width, ihat.height
        )));
    }
    let (w, h) = (i.width, i.height);
    let ops = WindowOps::new(w, h);
    let n = (w * h) as f64;
    let upstream = 1.0 / (3.0 * n);
    let mut total = 0.0;
    let mut grad = ImageRgb::new(w, h);
    for ch in 0..3 {
        let xs: Vec<f64> = i.data.iter().map(|p| p[ch]).collect();
        let ys: Vec<f64> = ihat.data.iter().map(|p| p[ch]).collect();
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
        let mx = ops.mean(&xs);
        let my = ops.mean(&ys);
        let mxx = ops.mean(&xx);
        let myy = ops.mean(&yy);
        let mxy = ops.mean(&xy);
        let mut g_my = vec![0.0; w * h];
        let mut g_myy = vec![0.0; w * h];
        let mut g_mxy = vec![0.0; w * h];
        for p in 0..w * h {
            let sx2 = mxx[p] - mx[p] * mx[p];
            let sy2 = myy[p] - my[p] * my[p];
            let sxy = mxy[p] - mx[p] * my[p];
            let a1 = 2.0 * mx[p] * my[p] + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = mx[p] * mx[p] + my[p] * my[p] + SSIM_C1;
            let b2 = sx2 + sy2 + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            let ds_dsy2 = -s / b2;
            let ds_dsxy = 2.0 * a1 / (b1 * b2);
            let ds_dmy_direct = 2.0 * mx[p] * a2 / (b1 * b2) - s * 2.0 * my[p] / b1;
            g_my[p] = upstream * (ds_dmy_direct - 2.0 * my[p] * ds_dsy2 - mx[p] * ds_dsxy);
            g_myy[p] = upstream * ds_dsy2;
            g_mxy[p] = upstream * ds_dsxy;
        }
        let t_my = ops.mean_transpose(&g_my);
        let t_myy = ops.mean_transpose(&g_myy);
        let t_mxy = ops.mean_transpose(&g_mxy);
        for p in 0..w * h {
            grad.data[p][ch] = t_my[p] + 2.0 * ys[p] * t_myy[p] + xs[p] * t_mxy[p];
        }
    }
    Ok((total / (3.0 * n), grad))
}

/// w·D-SSIM + (1-w)·mean L1, with the gradient w.r.t. the rendered image.
pub fn photometric_loss(i: &ImageRgb, ihat: &ImageRgb, w: f64) -> Result<(f64, ImageRgb)> {
    if i.width != ihat.width || i.height != ihat.height {
        return Err(Error::Mismatch(format!(
            "photometric inputs {}x{} vs {}x{}",
            i.width, i.height, ihat.width, ihat.height
        )));
    }
    let n = (i.width * i.height * 3) as f64;
    let mut l1 = 0.0;
    let mut grad = ImageRgb::new(i.width, i.height);
    for (p, (a, b)) in i.data.iter().zip(&ihat.data).enumerate() {
        for ch in 0..3 {
            let d = b[ch] - a[ch];
            l1 += d.abs();
            grad.data[p][ch] = if d == 0.0 { 0.0 } else { (1.0 - w) * d.signum() / n };
        }
    }
    l1 /= n;
    let (ssim, ssim_grad) = ssim_with_grad(i, ihat)?;
    let dssim = (1.0 - ssim) / 2.0;
    for (g, sg) in grad.data.iter_mut().zip(&ssim_grad.data) {
        *g -= sg * (w * 0.5);
    }
    Ok((w * dssim + (1.0 - w) * l1, grad))
}

/// Mean over valid pixels of log(1 + |λ̂·D_mono - D̂|). A pixel is valid when
/// its monocular depth is valid and accumulated opacity ≥ 0.5 (the mask is
/// not differentiated). Returns (loss, dL/dD̂, dL/dλ̂).
pub fn depth_loss(
    d_mono: &DepthMap,
    d_hat: &ImageGray,
    alpha: &ImageGray,
    lambda_hat: f64,
) -> Result<(f64, ImageGray, f64)> {
    if d_mono.width != d_hat.width || d_mono.height != d_hat.height {
        return Err(Error::Mismatch(format!(
            "depth inputs {}x{} vs {}x{}",
            d_mono.width, d_mono.height, d_hat.width, d_hat.height
        )));
    }
    assert!(lambda_hat > 0.0);
    let mut grad = ImageGray::new(d_hat.width, d_hat.height);
    let mut g_lambda = 0.0;
    let mut loss = 0.0;
    let mut count = 0usize;
    for p in 0..d_hat.data.len() {
        let d = d_mono.values[p];
        if !DepthMap::is_valid(d) || alpha.data[p] < DEPTH_ALPHA_MIN {
            continue;
        }
        let e = lambda_hat * d - d_hat.data[p];
        loss += e.abs().ln_1p();
        let s = if e == 0.0 { 0.0 } else { e.signum() / (1.0 + e.abs()) };
        grad.data[p] = -s;
        g_lambda += s * d;
        count += 1;
    }
    if count == 0 {
        return Ok((0.0, grad, 0.0));
    }
    let n = count as f64;
    for g in grad.data.iter_mut() {
        *g /= n;
    }
    Ok((loss / n, grad, g_lambda / n))
}

/// Σ over splats of the product of scale components, with per-splat
/// gradients.
pub fn volumetric_loss(splats: &[GaussianSplat]) -> (f64, Vec<Vector3<f64>>) {
    let mut total = 0.0;
    let grads = splats
        .iter()
        .map(|s| {
            let (a, b, c) = (s.scale.x, s.scale.y, s.scale.z);
            total += a * b * c;
            Vector3::new(b * c, a * c, a * b)
        })
        .collect();
    (total, grads)
}

/// Mean over splats of max(max(s)/min(s), r) - r; subgradient 0 below the
/// threshold, ties broken by first index.
pub fn aniso_loss(splats: &[GaussianSplat], r: f64) -> (f64, Vec<Vector3<f64>>) {
    assert!(r >= 1.0);
    if splats.is_empty() {
        return (0.0, Vec::new());
    }
    let n = splats.len() as f64;
    let mut total = 0.0;
    let grads = splats
        .iter()
        .map(|s| {
            let mut imax = 0;
            let mut imin = 0;
            for a in 1..3 {
                if s.scale[a] > s.scale[imax] {
                    imax = a;
                }
                if s.scale[a] < s.scale[imin] {
                    imin = a;
                }
            }
            let ratio = s.scale[imax] / s.scale[imin];
            let mut g = Vector3::zeros();
            if ratio > r {
                total += ratio - r;
                g[imax] += 1.0 / (s.scale[imin] * n);
                g[imin] -= ratio / (s.scale[imin] * n);
            }
            g
        })
        .collect();
    (total / n, grads)
}
