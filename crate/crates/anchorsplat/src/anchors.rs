//! Anchor-set construction: unprojecting per-view depth maps, voxel
//! deduplication at resolution ε, and the per-view depth-scale chain
//! pᵂ = ŝᵢ Rᵢ p꜀ + tᵢ.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::img::ImageRgb;
use crate::scene::{Anchor, Camera, PerViewGroup, Pose};

/// Per-pixel depth in meters. Invalid pixels are NaN (or any non-finite /
/// non-positive value).
#[derive(Clone, Debug)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            values: vec![f64::NAN; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    #[inline]
    pub fn is_valid(v: f64) -> bool {
        v.is_finite() && v > 0.0
    }
}

/// One input frame: image, scale-ambiguous depth, camera. `cam.pose` is
/// world-to-camera; `cam_to_world` is the odometry pose (Rᵢ, tᵢ).
#[derive(Clone, Debug)]
pub struct TrainingView {
    pub cam: Camera,
    pub cam_to_world: Pose,
    pub image: ImageRgb,
    pub depth: DepthMap,
}

impl TrainingView {
    pub fn new(cam: Camera, image: ImageRgb, depth: DepthMap) -> Result<Self> {
        if image.width != cam.width || image.height != cam.height {
            return Err(Error::Mismatch(format!(
                "image {}x{} vs camera {}x{}",
                image.width, image.height, cam.width, cam.height
            )));
        }
        if depth.width != cam.width || depth.height != cam.height {
            return Err(Error::Mismatch(format!(
                "depth {}x{} vs camera {}x{}",
                depth.width, depth.height, cam.width, cam.height
            )));
        }
        let cam_to_world = cam.pose.inverse();
        Ok(TrainingView {
            cam,
            cam_to_world,
            image,
            depth,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub groups: Vec<PerViewGroup>,
    pub voxel_resolution: f64,
}

/// Unprojects valid depth pixels on a stride grid into the camera frame,
/// pairing each point with its source pixel color.
pub fn unproject_view(
    cam: &Camera,
    depth: &DepthMap,
    image: &ImageRgb,
    stride: usize,
) -> Result<Vec<(Vector3<f64>, Vector3<f64>)>> {
    if depth.width != cam.width || depth.height != cam.height {
        return Err(Error::Mismatch(format!(
            "depth {}x{} vs camera {}x{}",
            depth.width, depth.height, cam.width, cam.height
        )));
    }
    if stride < 1 {
        return Err(Error::Domain("stride must be >= 1".into()));
    }
    let mut out = Vec::new();
    let mut v = 0;
    while v < cam.height {
        let mut u = 0;
        while u < cam.width {
            let d = depth.get(u, v);
            if DepthMap::is_valid(d) {
                let p = Vector3::new(
                    (u as f64 - cam.cx) / cam.fx * d,
                    (v as f64 - cam.cy) / cam.fy * d,
                    d,
                );
                out.push((p, image.get(u, v)));
            }
            u += stride;
        }
        v += stride;
    }
    Ok(out)
}

#[inline]
fn voxel_key(p: &Vector3<f64>, eps: f64) -> (i64, i64, i64) {
    (
        (p.x / eps).floor() as i64,
        (p.y / eps).floor() as i64,
        (p.z / eps).floor() as i64,
    )
}

/// Keeps the first-seen point per occupied ε-voxel (grid anchored at the
/// world origin). Returns kept indices in input order.
pub fn voxel_dedup(points: &[Vector3<f64>], eps: f64) -> Vec<usize> {
    assert!(eps > 0.0, "voxel resolution must be positive");
    let mut seen = HashMap::new();
    let mut kept = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if seen.insert(voxel_key(p, eps), ()).is_none() {
            kept.push(i);
        }
    }
    kept
}

/// Builds the anchor set from all views: unproject at ŝᵢ = 1, transform to
/// world, dedup globally in view index order, attach nominal attributes.
/// Features start at zero; ŝᵢ = λ̂ᵢ = 1.
pub fn build_anchor_set(
    views: &[TrainingView],
    eps: f64,
    stride: usize,
    init_opacity: f64,
    feature_dim: usize,
) -> Result<AnchorSet> {
    if views.is_empty() {
        return Err(Error::Config("anchor set requires at least one view".into()));
    }
    let mut anchors = Vec::new();
    let mut groups = Vec::new();
    let mut occupied: HashMap<(i64, i64, i64), ()> = HashMap::new();
    for (view_id, view) in views.iter().enumerate() {
        let pts = unproject_view(&view.cam, &view.depth, &view.image, stride)?;
        let mut group = PerViewGroup {
            view_id,
            anchor_ids: Vec::new(),
            cam_to_world: view.cam_to_world,
            log_s: 0.0,
            log_lambda: 0.0,
        };
        for (p_cam, color) in pts {
            let p_world = view.cam_to_world.apply(&p_cam);
            if occupied.insert(voxel_key(&p_world, eps), ()).is_some() {
                continue;
            }
            group.anchor_ids.push(anchors.len());
            anchors.push(Anchor {
                position_cam: p_cam,
                view_id,
                feature: vec![0.0; feature_dim],
                nominal_mu: p_world,
                nominal_color: color,
                nominal_opacity: init_opacity,
                nominal_scale: Vector3::new(eps, eps, eps),
            });
        }
        groups.push(group);
    }
    if anchors.is_empty() {
        return Err(Error::Config(
            "no anchors survived unprojection + dedup; check depth maps".into(),
        ));
    }
    Ok(AnchorSet {
        anchors,
        groups,
        voxel_resolution: eps,
    })
}

/// pᵂ = ŝᵢ Rᵢ p꜀ + tᵢ with (Rᵢ, tᵢ) the source view's camera-to-world pose.
pub fn anchor_world_position(anchor: &Anchor, group: &PerViewGroup) -> Vector3<f64> {
    debug_assert_eq!(anchor.view_id, group.view_id);
    let s = group.depth_scale_s();
    s * (group.cam_to_world.rotation() * anchor.position_cam) + group.cam_to_world.t
}

/// ∂pᵂ/∂ŝᵢ = Rᵢ p꜀.
pub fn anchor_world_position_dds(anchor: &Anchor, group: &PerViewGroup) -> Vector3<f64> {
    group.cam_to_world.rotation() * anchor.position_cam
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;

    fn test_camera() -> Camera {
        Camera::new(100.0, 100.0, 50.0, 50.0, 100, 100, Pose::identity()).unwrap()
    }

    #[test]
    fn unproject_principal_point() {
        let cam = test_camera();
        let mut depth = DepthMap::new(100, 100);
        depth.set(50, 50, 2.0);
        let img = ImageRgb::new(100, 100);
        let pts = unproject_view(&cam, &depth, &img, 1).unwrap();
        assert_eq!(pts.len(), 1);
        assert_relative_eq!((pts[0].0 - Vector3::new(0.0, 0.0, 2.0)).norm(), 0.0);
    }

    #[test]
    fn unproject_off_axis_pixel() {
        let cam = test_camera();
        let mut depth = DepthMap::new(100, 100);
        depth.set(60, 50, 2.0);
        let img = ImageRgb::new(100, 100);
        let pts = unproject_view(&cam, &depth, &img, 1).unwrap();
        assert_eq!(pts.len(), 1);
        assert_relative_eq!((pts[0].0 - Vector3::new(0.2, 0.0, 2.0)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn unproject_skips_invalid_pixels() {
        let cam = test_camera();
        let mut depth = DepthMap::new(100, 100);
        depth.set(10, 10, f64::NAN);
        depth.set(20, 20, -1.0);
        depth.set(30, 30, 1.5);
        let img = ImageRgb::new(100, 100);
        let pts = unproject_view(&cam, &depth, &img, 1).unwrap();
        assert_eq!(pts.len(), 1);
    }

    #[test]
    fn unproject_rejects_mismatched_dims() {
        let cam = test_camera();
        let depth = DepthMap::new(50, 50);
        let img = ImageRgb::new(100, 100);
        assert!(unproject_view(&cam, &depth, &img, 1).is_err());
    }

    #[test]
    fn dedup_same_cell_keeps_first() {
        let eps = 0.1;
        let pts = vec![
            Vector3::new(0.01, 0.01, 0.01),
            Vector3::new(0.05, 0.01, 0.01), // 0.4*eps away, same cell
        ];
        assert_eq!(voxel_dedup(&pts, eps), vec![0]);
    }

    #[test]
    fn dedup_grid_spacing_all_survive() {
        let eps = 0.1;
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                pts.push(Vector3::new(i as f64 * 2.0 * eps, j as f64 * 2.0 * eps, 0.05));
            }
        }
        assert_eq!(voxel_dedup(&pts, eps).len(), pts.len());
    }

    #[test]
    fn dedup_matches_cell_enumeration_oracle() {
        let mut rng = StdRng::seed_from_u64(19);
        let eps = 0.1;
        let pts: Vec<_> = (0..10_000)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let kept = voxel_dedup(&pts, eps);
        // Independent oracle: count distinct occupied cells by brute force.
        let cells: HashSet<(i64, i64, i64)> = pts
            .iter()
            .map(|p| {
                (
                    (p.x / eps).floor() as i64,
                    (p.y / eps).floor() as i64,
                    (p.z / eps).floor() as i64,
                )
            })
            .collect();
        assert_eq!(kept.len(), cells.len());
    }

    #[test]
    fn dedup_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(4);
        let pts: Vec<_> = (0..500)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        assert_eq!(voxel_dedup(&pts, 0.07), voxel_dedup(&pts, 0.07));
    }

    fn constant_depth_view(d: f64) -> TrainingView {
        let cam = test_camera();
        let mut depth = DepthMap::new(100, 100);
        for v in depth.values.iter_mut() {
            *v = d;
        }
        let img = ImageRgb::filled(100, 100, Vector3::new(0.5, 0.2, 0.1));
        TrainingView::new(cam, img, depth).unwrap()
    }

    #[test]
    fn single_view_single_column() {
        let view = constant_depth_view(2.0);
        let set = build_anchor_set(std::slice::from_ref(&view), 0.05, 100, 0.1, 32).unwrap();
        assert!(set.anchors.len() <= 100);
        assert!(set.anchors.iter().all(|a| a.view_id == 0));
        assert_eq!(set.groups.len(), 1);
        assert_eq!(set.groups[0].anchor_ids.len(), set.anchors.len());
    }

    #[test]
    fn duplicate_views_contribute_no_new_anchors() {
        let view = constant_depth_view(2.0);
        let views = vec![view.clone(), view];
        let set = build_anchor_set(&views, 0.05, 4, 0.1, 32).unwrap();
        // Second, identical view falls in occupied voxels.
        assert_eq!(set.groups[1].anchor_ids.len(), 0);
    }

    #[test]
    fn scales_initialized_to_one() {
        let view = constant_depth_view(1.5);
        let set = build_anchor_set(std::slice::from_ref(&view), 0.05, 8, 0.1, 32).unwrap();
        for g in &set.groups {
            assert_eq!(g.depth_scale_s(), 1.0);
            assert_eq!(g.depth_scale_lambda(), 1.0);
        }
    }

    #[test]
    fn nominal_attributes_set_from_source() {
        let view = constant_depth_view(2.0);
        let eps = 0.05;
        let set = build_anchor_set(std::slice::from_ref(&view), eps, 8, 0.25, 32).unwrap();
        for a in &set.anchors {
            assert_eq!(a.nominal_opacity, 0.25);
            assert_eq!(a.nominal_scale, Vector3::new(eps, eps, eps));
            assert_eq!(a.nominal_color, Vector3::new(0.5, 0.2, 0.1));
            assert!(a.position_cam.z > 0.0);
            // Scale neutrality at s = 1.
            let g = &set.groups[a.view_id];
            let w = anchor_world_position(a, g);
            assert_eq!(w, a.nominal_mu);
        }
    }

    #[test]
    fn world_position_identity_and_scaling() {
        let anchor = Anchor {
            position_cam: Vector3::new(1.0, 2.0, 3.0),
            view_id: 0,
            feature: vec![],
            nominal_mu: Vector3::zeros(),
            nominal_color: Vector3::zeros(),
            nominal_opacity: 0.1,
            nominal_scale: Vector3::new(0.05, 0.05, 0.05),
        };
        let mut group = PerViewGroup {
            view_id: 0,
            anchor_ids: vec![0],
            cam_to_world: Pose::identity(),
            log_s: 0.0,
            log_lambda: 0.0,
        };
        assert_eq!(
            anchor_world_position(&anchor, &group),
            Vector3::new(1.0, 2.0, 3.0)
        );
        group.log_s = 2.0f64.ln();
        let anchor2 = Anchor {
            position_cam: Vector3::new(1.0, 0.0, 0.0),
            ..anchor
        };
        assert_relative_eq!(
            (anchor_world_position(&anchor2, &group) - Vector3::new(2.0, 0.0, 0.0)).norm(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn world_position_scale_derivative_matches_fd() {
        let mut rng = StdRng::seed_from_u64(8);
        let q = crate::scene::quat_normalize(&[0.9, 0.1, -0.2, 0.3]).unwrap();
        let pose = Pose::new(q, Vector3::new(0.5, -0.5, 1.0));
        let anchor = Anchor {
            position_cam: Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.5..3.0),
            ),
            view_id: 0,
            feature: vec![],
            nominal_mu: Vector3::zeros(),
            nominal_color: Vector3::zeros(),
            nominal_opacity: 0.1,
            nominal_scale: Vector3::new(0.05, 0.05, 0.05),
        };
        let s0 = 1.3;
        let mk = |s: f64| PerViewGroup {
            view_id: 0,
            anchor_ids: vec![],
            cam_to_world: pose,
            log_s: (s as f64).ln(),
            log_lambda: 0.0,
        };
        let analytic = anchor_world_position_dds(&anchor, &mk(s0));
        let h = 1e-6;
        let fd = (anchor_world_position(&anchor, &mk(s0 + h))
            - anchor_world_position(&anchor, &mk(s0 - h)))
            / (2.0 * h);
        assert!((analytic - fd).norm() < 1e-6);
    }

    #[test]
    fn empty_views_rejected() {
        assert!(build_anchor_set(&[], 0.05, 4, 0.1, 32).is_err());
    }

    #[test]
    fn coverage_every_stride_pixel_maps_to_occupied_voxel() {
        let view = constant_depth_view(2.0);
        let eps = 0.05;
        let set = build_anchor_set(std::slice::from_ref(&view), eps, 4, 0.1, 32).unwrap();
        let occupied: HashSet<(i64, i64, i64)> = set
            .anchors
            .iter()
            .map(|a| {
                let p = a.nominal_mu;
                (
                    (p.x / eps).floor() as i64,
                    (p.y / eps).floor() as i64,
                    (p.z / eps).floor() as i64,
                )
            })
            .collect();
        let pts = unproject_view(&view.cam, &view.depth, &view.image, 4).unwrap();
        for (p_cam, _) in pts {
            let p = view.cam_to_world.apply(&p_cam);
            let key = (
                (p.x / eps).floor() as i64,
                (p.y / eps).floor() as i64,
                (p.z / eps).floor() as i64,
            );
            assert!(occupied.contains(&key));
        }
    }
}
