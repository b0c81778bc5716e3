//! Core geometric and appearance types: cameras, splats, anchors, per-view
//! groups, and the closed-form operations on them (quaternion algebra,
//! covariance composition, pinhole projection and its covariance pushforward).
//!
//! Quaternion storage order is (w, x, y, z) everywhere, including file I/O.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};

/// Default near-plane in meters. Splats/points at or behind it are culled.
pub const NEAR_PLANE: f64 = 0.01;

/// Low-pass dilation added to the diagonal of projected 2D covariances, in px².
pub const COV2D_DILATION: f64 = 0.3;

pub type Quat = [f64; 4]; // (w, x, y, z)

pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

#[inline]
pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize(q: &Quat) -> Result<Quat> {
    let n = quat_norm(q);
    if n < 1e-12 {
        return Err(Error::Degenerate("zero-norm quaternion".into()));
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Hamilton product a*b.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Rotation matrix of a quaternion. Normalizes internally; errors on a
/// zero-norm input.
pub fn quat_to_rotmat(q: &Quat) -> Result<Matrix3<f64>> {
    let q = quat_normalize(q)?;
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Gradient of `L` w.r.t. the (possibly unnormalized) quaternion `q`, given
/// `g = dL/dR` for `R = quat_to_rotmat(q)`. The internal normalization is
/// part of the chain (radial components are projected out).
pub fn quat_rotmat_backward(q: &Quat, g: &Matrix3<f64>) -> Result<Quat> {
    let n = quat_norm(q);
    if n < 1e-12 {
        return Err(Error::Degenerate("zero-norm quaternion".into()));
    }
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    // dL/du from the entry-wise derivatives of the rotation-matrix formula.
    let gw = -2.0 * z * g[(0, 1)] + 2.0 * y * g[(0, 2)] + 2.0 * z * g[(1, 0)]
        - 2.0 * x * g[(1, 2)]
        - 2.0 * y * g[(2, 0)]
        + 2.0 * x * g[(2, 1)];
    let gx = 2.0 * y * g[(0, 1)] + 2.0 * z * g[(0, 2)] + 2.0 * y * g[(1, 0)]
        - 4.0 * x * g[(1, 1)]
        - 2.0 * w * g[(1, 2)]
        + 2.0 * z * g[(2, 0)]
        + 2.0 * w * g[(2, 1)]
        - 4.0 * x * g[(2, 2)];
    let gy = -4.0 * y * g[(0, 0)] + 2.0 * x * g[(0, 1)] + 2.0 * w * g[(0, 2)] + 2.0 * x * g[(1, 0)]
        + 2.0 * z * g[(1, 2)]
        - 2.0 * w * g[(2, 0)]
        + 2.0 * z * g[(2, 1)]
        - 4.0 * y * g[(2, 2)];
    let gz = -4.0 * z * g[(0, 0)] - 2.0 * w * g[(0, 1)] + 2.0 * x * g[(0, 2)] + 2.0 * w * g[(1, 0)]
        - 4.0 * z * g[(1, 1)]
        + 2.0 * y * g[(1, 2)]
        + 2.0 * x * g[(2, 0)]
        + 2.0 * y * g[(2, 1)];
    let gu = Vector4::new(gw, gx, gy, gz);
    // Project out the radial component and undo the normalization scale.
    let uv = Vector4::new(w, x, y, z);
    let tang = (gu - uv * uv.dot(&gu)) / n;
    Ok([tang[0], tang[1], tang[2], tang[3]])
}

/// Rigid transform x -> R x + t.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rot: Quat,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rot: QUAT_IDENTITY,
            t: Vector3::zeros(),
        }
    }

    pub fn new(rot: Quat, t: Vector3<f64>) -> Self {
        Pose { rot, t }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_rotmat(&self.rot).expect("pose quaternion must be non-degenerate")
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.t
    }

    pub fn inverse(&self) -> Pose {
        let rinv = [self.rot[0], -self.rot[1], -self.rot[2], -self.rot[3]];
        let r = quat_to_rotmat(&rinv).expect("pose quaternion must be non-degenerate");
        Pose {
            rot: quat_normalize(&rinv).unwrap(),
            t: -(r * self.t),
        }
    }
}

/// Pinhole camera. `pose` is the world-to-camera transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub pose: Pose,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        pose: Pose,
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Domain("focal lengths must be positive".into()));
        }
        if width < 1 || height < 1 {
            return Err(Error::Domain("image size must be at least 1x1".into()));
        }
        let n = quat_norm(&pose.rot);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "pose quaternion norm {n} deviates from 1 beyond 1e-9"
            )));
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose,
        })
    }
}

/// Renderable Gaussian primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSplat {
    pub mu: Vector3<f64>,
    pub rot: Quat,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

/// Gradient of a scalar loss w.r.t. one splat's attributes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatGrad {
    pub mu: Vector3<f64>,
    pub rot: Quat,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Default for SplatGrad {
    fn default() -> Self {
        SplatGrad {
            mu: Vector3::zeros(),
            rot: [0.0; 4],
            scale: Vector3::zeros(),
            opacity: 0.0,
            color: Vector3::zeros(),
        }
    }
}

impl SplatGrad {
    pub fn add_assign(&mut self, o: &SplatGrad) {
        self.mu += o.mu;
        for a in 0..4 {
            self.rot[a] += o.rot[a];
        }
        self.scale += o.scale;
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

/// A fixed 3D point carrying a learnable feature and nominal splat
/// attributes. `position_cam` lives in the camera frame of its source view.
/// The nominal rotation is always the identity quaternion and is not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub position_cam: Vector3<f64>,
    pub view_id: usize,
    pub feature: Vec<f64>,
    pub nominal_mu: Vector3<f64>,
    pub nominal_color: Vector3<f64>,
    pub nominal_opacity: f64,
    pub nominal_scale: Vector3<f64>,
}

impl Anchor {
    pub fn nominal_rot(&self) -> Quat {
        QUAT_IDENTITY
    }
}

/// Per-view anchor group with its two learnable scale parameters, both kept
/// in log-space so positivity is structural.
#[derive(Clone, Debug, PartialEq)]
pub struct PerViewGroup {
    pub view_id: usize,
    pub anchor_ids: Vec<usize>,
    /// Source view's camera-to-world pose; fixed geometry, kept here so a
    /// trained model can be rendered without the dataset.
    pub cam_to_world: Pose,
    pub log_s: f64,
    pub log_lambda: f64,
}

impl PerViewGroup {
    pub fn depth_scale_s(&self) -> f64 {
        self.log_s.exp()
    }

    pub fn depth_scale_lambda(&self) -> f64 {
        self.log_lambda.exp()
    }
}

/// Σ = R S Sᵀ Rᵀ for a unit quaternion rotation and positive axis scales.
pub fn compose_covariance(rot: &Quat, scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if scale.x <= 0.0 || scale.y <= 0.0 || scale.z <= 0.0 {
        return Err(Error::Domain(format!(
            "scale components must be positive, got {:?}",
            scale
        )));
    }
    let r = quat_to_rotmat(rot)?;
    let m = r * Matrix3::from_diagonal(scale);
    Ok(m * m.transpose())
}

/// Projects a world point. Returns `None` when the camera depth is at or
/// below the near plane (behind-camera signal; the caller culls).
pub fn project_point(cam: &Camera, p_world: &Vector3<f64>) -> Option<(f64, f64, f64)> {
    let p = cam.pose.apply(p_world);
    if p.z <= NEAR_PLANE {
        return None;
    }
    let u = cam.fx * p.x / p.z + cam.cx;
    let v = cam.fy * p.y / p.z + cam.cy;
    Some((u, v, p.z))
}

/// Inverse of `project_point` at known camera depth z.
pub fn unproject_point(cam: &Camera, u: f64, v: f64, z: f64) -> Vector3<f64> {
    let p_cam = Vector3::new((u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z);
    cam.pose.inverse().apply(&p_cam)
}

/// Affine Jacobian of the pinhole map at camera-frame point p.
pub fn pinhole_jacobian(cam: &Camera, p_cam: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let z = p_cam.z;
    nalgebra::Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * p_cam.x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * p_cam.y / (z * z),
    )
}

/// EWA pushforward of a 3D covariance to screen space: upper-left 2x2 of
/// J W Σ Wᵀ Jᵀ plus a diagonal dilation. `None` when behind the near plane.
pub fn project_covariance(
    cam: &Camera,
    mu_world: &Vector3<f64>,
    sigma: &Matrix3<f64>,
    dilation: f64,
) -> Option<Matrix2<f64>> {
    let p_cam = cam.pose.apply(mu_world);
    if p_cam.z <= NEAR_PLANE {
        return None;
    }
    let j = pinhole_jacobian(cam, &p_cam);
    let w = cam.pose.rotation();
    let u = j * w;
    let mut c2 = u * sigma * u.transpose();
    c2[(0, 0)] += dilation;
    c2[(1, 1)] += dilation;
    Some(c2)
}

#[inline]
pub fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}
