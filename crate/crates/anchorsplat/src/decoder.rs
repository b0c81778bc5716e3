//! Residual-form Gaussian decoders: five 2-layer MLPs mapping an anchor
//! feature to k sets of per-child attribute residuals, the combination rules
//! that spawn child splats, and the exact reverse-mode pass through both.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scene::{quat_norm, Anchor, GaussianSplat, Quat, SplatGrad, QUAT_IDENTITY};

pub const FEATURE_DIM: usize = 32;
pub const HIDDEN_DIM: usize = 32;

/// Raw scale-residual outputs are clamped to [-4, 4] before exponentiation.
pub const SCALE_RAW_CLAMP: f64 = 4.0;

/// Two-layer MLP (in -> hidden, rectifier, hidden -> out). Output layers are
/// zero-initialized so residuals start exactly neutral.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2 {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub w1: Vec<f64>, // hidden x in, row-major
    pub b1: Vec<f64>,
    pub w2: Vec<f64>, // out x hidden, row-major
    pub b2: Vec<f64>,
}

impl Mlp2 {
    pub fn init(rng: &mut impl Rng, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        // He-style fan-in uniform for the hidden layer, zero output layer.
        let bound = (6.0 / in_dim as f64).sqrt();
        let w1 = (0..hidden * in_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Mlp2 {
            in_dim,
            hidden,
            out_dim,
            w1,
            b1: vec![0.0; hidden],
            w2: vec![0.0; out_dim * hidden],
            b2: vec![0.0; out_dim],
        }
    }

    /// Returns (post-rectifier hidden activations, raw outputs).
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut h = vec![0.0; self.hidden];
        for i in 0..self.hidden {
            let mut acc = self.b1[i];
            let row = &self.w1[i * self.in_dim..(i + 1) * self.in_dim];
            for (w, xv) in row.iter().zip(x) {
                acc += w * xv;
            }
            h[i] = acc.max(0.0);
        }
        let mut out = vec![0.0; self.out_dim];
        for o in 0..self.out_dim {
            let mut acc = self.b2[o];
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            for (w, hv) in row.iter().zip(&h) {
                acc += w * hv;
            }
            out[o] = acc;
        }
        (h, out)
    }

    /// Accumulates weight gradients and the input gradient given dL/draw.
    pub fn backward(
        &self,
        x: &[f64],
        h: &[f64],
        graw: &[f64],
        grads: &mut Mlp2Grads,
        gx: &mut [f64],
    ) {
        let mut gh = vec![0.0; self.hidden];
        for o in 0..self.out_dim {
            let g = graw[o];
            if g == 0.0 {
                continue;
            }
            grads.b2[o] += g;
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            let grow = &mut grads.w2[o * self.hidden..(o + 1) * self.hidden];
            for i in 0..self.hidden {
                grow[i] += g * h[i];
                gh[i] += g * row[i];
            }
        }
        for i in 0..self.hidden {
            if h[i] <= 0.0 {
                continue; // rectifier gate
            }
            let g = gh[i];
            grads.b1[i] += g;
            let row = &self.w1[i * self.in_dim..(i + 1) * self.in_dim];
            let grow = &mut grads.w1[i * self.in_dim..(i + 1) * self.in_dim];
            for j in 0..self.in_dim {
                grow[j] += g * x[j];
                gx[j] += g * row[j];
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn has_finite_params(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct Mlp2Grads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mlp2Grads {
    pub fn zeros_like(mlp: &Mlp2) -> Self {
        Mlp2Grads {
            w1: vec![0.0; mlp.w1.len()],
            b1: vec![0.0; mlp.b1.len()],
            w2: vec![0.0; mlp.w2.len()],
            b2: vec![0.0; mlp.b2.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Mlp2Grads) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
    }
}

/// Residual color (added to the nominal) or direct color decoded straight
/// from the feature. Direct form exists for the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorMode {
    Residual,
    Direct,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBank {
    pub f_mu: Mlp2,
    pub f_o: Mlp2,
    pub f_c: Mlp2,
    pub f_s: Mlp2,
    pub f_r: Mlp2,
    pub k: usize,
    pub offset_bound: f64,
    pub color_mode: ColorMode,
}

impl DecoderBank {
    pub fn init(rng: &mut impl Rng, k: usize, offset_bound: f64, color_mode: ColorMode) -> Self {
        DecoderBank {
            f_mu: Mlp2::init(rng, FEATURE_DIM, HIDDEN_DIM, 3 * k),
            f_o: Mlp2::init(rng, FEATURE_DIM, HIDDEN_DIM, k),
            f_c: Mlp2::init(rng, FEATURE_DIM, HIDDEN_DIM, 3 * k),
            f_s: Mlp2::init(rng, FEATURE_DIM, HIDDEN_DIM, 3 * k),
            f_r: Mlp2::init(rng, FEATURE_DIM, HIDDEN_DIM, 4 * k),
            k,
            offset_bound,
            color_mode,
        }
    }

    pub fn heads(&self) -> [&Mlp2; 5] {
        [&self.f_mu, &self.f_o, &self.f_c, &self.f_s, &self.f_r]
    }

    pub fn param_count(&self) -> usize {
        self.heads().iter().map(|m| m.param_count()).sum()
    }

    /// Stable parameter ordering: heads mu, o, c, s, r; within each head
    /// w1, b1, w2, b2.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for m in [
            &mut self.f_mu,
            &mut self.f_o,
            &mut self.f_c,
            &mut self.f_s,
            &mut self.f_r,
        ] {
            for v in m.w1.iter_mut().chain(&mut m.b1).chain(&mut m.w2).chain(&mut m.b2) {
                f(v);
            }
        }
    }

    pub fn has_finite_params(&self) -> bool {
        self.heads().iter().all(|m| m.has_finite_params())
    }
}

#[derive(Clone, Debug)]
pub struct BankGrads {
    pub f_mu: Mlp2Grads,
    pub f_o: Mlp2Grads,
    pub f_c: Mlp2Grads,
    pub f_s: Mlp2Grads,
    pub f_r: Mlp2Grads,
}

impl BankGrads {
    pub fn zeros_like(bank: &DecoderBank) -> Self {
        BankGrads {
            f_mu: Mlp2Grads::zeros_like(&bank.f_mu),
            f_o: Mlp2Grads::zeros_like(&bank.f_o),
            f_c: Mlp2Grads::zeros_like(&bank.f_c),
            f_s: Mlp2Grads::zeros_like(&bank.f_s),
            f_r: Mlp2Grads::zeros_like(&bank.f_r),
        }
    }

    pub fn add_assign(&mut self, other: &BankGrads) {
        self.f_mu.add_assign(&other.f_mu);
        self.f_o.add_assign(&other.f_o);
        self.f_c.add_assign(&other.f_c);
        self.f_s.add_assign(&other.f_s);
        self.f_r.add_assign(&other.f_r);
    }

    /// Same ordering as `DecoderBank::visit_params_mut`.
    pub fn visit(&self, mut f: impl FnMut(f64)) {
        for g in [&self.f_mu, &self.f_o, &self.f_c, &self.f_s, &self.f_r] {
            for v in g.w1.iter().chain(&g.b1).chain(&g.w2).chain(&g.b2) {
                f(*v);
            }
        }
    }
}

/// Decoded residuals for one child splat. In direct color mode `dc` holds
/// the decoded color itself (already in [0, 1]).
#[derive(Clone, Copy, Debug)]
pub struct ChildResidual {
    pub dmu: Vector3<f64>,
    pub dc: Vector3<f64>,
    pub d_o: f64,
    pub ds: Vector3<f64>,
    pub dr: Quat,
}

/// Forward activations cached for the backward pass.
#[derive(Clone, Debug)]
pub struct DecodeCache {
    pub h_mu: Vec<f64>,
    pub h_o: Vec<f64>,
    pub h_c: Vec<f64>,
    pub h_s: Vec<f64>,
    pub h_r: Vec<f64>,
    pub raw_mu: Vec<f64>,
    pub raw_o: Vec<f64>,
    pub raw_c: Vec<f64>,
    pub raw_s: Vec<f64>,
    pub raw_r: Vec<f64>,
}

pub fn decode_residuals(
    bank: &DecoderBank,
    feature: &[f64],
) -> Result<(Vec<ChildResidual>, DecodeCache)> {
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("anchor feature".into()));
    }
    let (h_mu, raw_mu) = bank.f_mu.forward(feature);
    let (h_o, raw_o) = bank.f_o.forward(feature);
    let (h_c, raw_c) = bank.f_c.forward(feature);
    let (h_s, raw_s) = bank.f_s.forward(feature);
    let (h_r, raw_r) = bank.f_r.forward(feature);
    let mut out = Vec::with_capacity(bank.k);
    for j in 0..bank.k {
        let dmu = Vector3::new(
            bank.offset_bound * raw_mu[3 * j].tanh(),
            bank.offset_bound * raw_mu[3 * j + 1].tanh(),
            bank.offset_bound * raw_mu[3 * j + 2].tanh(),
        );
        let dc = match bank.color_mode {
            ColorMode::Residual => Vector3::new(
                raw_c[3 * j].tanh(),
                raw_c[3 * j + 1].tanh(),
                raw_c[3 * j + 2].tanh(),
            ),
            ColorMode::Direct => Vector3::new(
                0.5 * (1.0 + raw_c[3 * j].tanh()),
                0.5 * (1.0 + raw_c[3 * j + 1].tanh()),
                0.5 * (1.0 + raw_c[3 * j + 2].tanh()),
            ),
        };
        let d_o = raw_o[j].tanh();
        let ds = Vector3::new(
            raw_s[3 * j].clamp(-SCALE_RAW_CLAMP, SCALE_RAW_CLAMP).exp(),
            raw_s[3 * j + 1].clamp(-SCALE_RAW_CLAMP, SCALE_RAW_CLAMP).exp(),
            raw_s[3 * j + 2].clamp(-SCALE_RAW_CLAMP, SCALE_RAW_CLAMP).exp(),
        );
        let dr = [
            raw_r[4 * j],
            raw_r[4 * j + 1],
            raw_r[4 * j + 2],
            raw_r[4 * j + 3],
        ];
        out.push(ChildResidual { dmu, dc, d_o, ds, dr });
    }
    Ok((
        out,
        DecodeCache {
            h_mu,
            h_o,
            h_c,
            h_s,
            h_r,
            raw_mu,
            raw_o,
            raw_c,
            raw_s,
            raw_r,
        },
    ))
}

#[inline]
fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Combines nominal attributes with decoded residuals into k child splats.
/// `world_mu` is the anchor's current world position (depends on ŝᵢ).
pub fn spawn_splats(
    anchor: &Anchor,
    world_mu: &Vector3<f64>,
    residuals: &[ChildResidual],
    color_mode: ColorMode,
) -> Vec<GaussianSplat> {
    residuals
        .iter()
        .map(|r| {
            let color = match color_mode {
                ColorMode::Residual => (anchor.nominal_color + r.dc).map(clamp01),
                ColorMode::Direct => r.dc,
            };
            let u = [
                QUAT_IDENTITY[0] + r.dr[0],
                QUAT_IDENTITY[1] + r.dr[1],
                QUAT_IDENTITY[2] + r.dr[2],
                QUAT_IDENTITY[3] + r.dr[3],
            ];
            let n = quat_norm(&u);
            GaussianSplat {
                mu: world_mu + r.dmu,
                rot: [u[0] / n, u[1] / n, u[2] / n, u[3] / n],
                scale: anchor.nominal_scale.component_mul(&r.ds),
                opacity: clamp01(anchor.nominal_opacity + r.d_o),
                color,
            }
        })
        .collect()
}

/// k identical splats carrying the anchor's nominal attributes verbatim;
/// the same multiset `spawn_splats` produces under neutral residuals.
pub fn spawn_nominal(anchor: &Anchor, world_mu: &Vector3<f64>, k: usize) -> Vec<GaussianSplat> {
    vec![
        GaussianSplat {
            mu: *world_mu,
            rot: QUAT_IDENTITY,
            scale: anchor.nominal_scale,
            opacity: clamp01(anchor.nominal_opacity),
            color: anchor.nominal_color.map(clamp01),
        };
        k
    ]
}

/// Reverse-mode pass through spawn + decode for one anchor. Accumulates MLP
/// weight gradients into `grads` and the feature gradient into `gfeature`;
/// returns dL/d(world_mu). Clamp regions propagate zero gradient.
#[allow(clippy::too_many_arguments)]
pub fn backward_anchor(
    bank: &DecoderBank,
    anchor: &Anchor,
    residuals: &[ChildResidual],
    cache: &DecodeCache,
    splat_grads: &[SplatGrad],
    grads: &mut BankGrads,
    gfeature: &mut [f64],
) -> Vector3<f64> {
    debug_assert_eq!(splat_grads.len(), bank.k);
    let k = bank.k;
    let mut graw_mu = vec![0.0; 3 * k];
    let mut graw_o = vec![0.0; k];
    let mut graw_c = vec![0.0; 3 * k];
    let mut graw_s = vec![0.0; 3 * k];
    let mut graw_r = vec![0.0; 4 * k];
    let mut gworld = Vector3::zeros();
    for (j, (r, g)) in residuals.iter().zip(splat_grads).enumerate() {
        gworld += g.mu;
        for a in 0..3 {
            // dmu = bound * tanh(raw); tanh value recovered from dmu.
            let t = r.dmu[a] / bank.offset_bound;
            graw_mu[3 * j + a] = g.mu[a] * bank.offset_bound * (1.0 - t * t);
        }
        match bank.color_mode {
            ColorMode::Residual => {
                for a in 0..3 {
                    let pre = anchor.nominal_color[a] + r.dc[a];
                    if (0.0..=1.0).contains(&pre) {
                        let t = r.dc[a];
                        graw_c[3 * j + a] = g.color[a] * (1.0 - t * t);
                    }
                }
            }
            ColorMode::Direct => {
                for a in 0..3 {
                    let t = 2.0 * r.dc[a] - 1.0;
                    graw_c[3 * j + a] = g.color[a] * 0.5 * (1.0 - t * t);
                }
            }
        }
        let pre_o = anchor.nominal_opacity + r.d_o;
        if (0.0..=1.0).contains(&pre_o) {
            graw_o[j] = g.opacity * (1.0 - r.d_o * r.d_o);
        }
        for a in 0..3 {
            let raw = cache.raw_s[3 * j + a];
            if raw.abs() < SCALE_RAW_CLAMP {
                graw_s[3 * j + a] = g.scale[a] * anchor.nominal_scale[a] * r.ds[a];
            }
        }
        // rot = normalize(identity + dr); upstream grad is w.r.t. the stored
        // (normalized) quaternion.
        let u = [
            1.0 + r.dr[0],
            r.dr[1],
            r.dr[2],
            r.dr[3],
        ];
        let n = quat_norm(&u);
        let uh = [u[0] / n, u[1] / n, u[2] / n, u[3] / n];
        let dot = uh[0] * g.rot[0] + uh[1] * g.rot[1] + uh[2] * g.rot[2] + uh[3] * g.rot[3];
        for a in 0..4 {
            graw_r[4 * j + a] = (g.rot[a] - uh[a] * dot) / n;
        }
    }
    bank.f_mu
        .backward(&anchor.feature, &cache.h_mu, &graw_mu, &mut grads.f_mu, gfeature);
    bank.f_o
        .backward(&anchor.feature, &cache.h_o, &graw_o, &mut grads.f_o, gfeature);
    bank.f_c
        .backward(&anchor.feature, &cache.h_c, &graw_c, &mut grads.f_c, gfeature);
    bank.f_s
        .backward(&anchor.feature, &cache.h_s, &graw_s, &mut grads.f_s, gfeature);
    bank.f_r
        .backward(&anchor.feature, &cache.h_r, &graw_r, &mut grads.f_r, gfeature);
    gworld
}
