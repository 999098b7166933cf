//! Pinhole camera with a rigid pose. Projection exists twice: a plain f64
//! routine for data synthesis and oracles, and a graph program used where
//! gradients must flow into pose, focal length or the 3D points themselves.

use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, NodeId};
use crate::hand::{rodrigues, rodrigues_graph};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Points with camera-frame depth at or below this are treated as behind
/// the camera.
pub const MIN_DEPTH: f64 = 1e-4;

/// Square-pixel pinhole intrinsics: focal length and principal point, all in
/// pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f: f64,
    pub p0: f64,
    pub q0: f64,
}

impl CameraIntrinsics {
    /// Intrinsics for an image of the given size with the principal point at
    /// the pixel-center midpoint `(W-1)/2, (H-1)/2`.
    pub fn from_image(width: usize, height: usize, f: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if !(f > 0.0) || !f.is_finite() {
            return Err(Error::Config(format!("focal length must be positive, got {f}")));
        }
        Ok(CameraIntrinsics {
            f,
            p0: (width as f64 - 1.0) / 2.0,
            q0: (height as f64 - 1.0) / 2.0,
        })
    }

    /// Intrinsics for the same camera after resampling the image by `s`
    /// (e.g. 0.25 for a 128 -> 32 feature map). Uses the pixel-center
    /// convention, so coordinates map as `u' = (u + 0.5) s - 0.5`.
    pub fn scaled(&self, s: f64) -> Self {
        CameraIntrinsics {
            f: self.f * s,
            p0: (self.p0 + 0.5) * s - 0.5,
            q0: (self.q0 + 0.5) * s - 0.5,
        }
    }
}

/// World-to-camera rigid transform: axis-angle rotation then translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl RigidPose {
    pub fn identity() -> Self {
        RigidPose { rotation: [0.0; 3], translation: [0.0; 3] }
    }
}

/// Flat camera description as stored in JSON records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub f: f64,
    pub p0: f64,
    pub q0: f64,
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl CameraRecord {
    pub fn new(intr: CameraIntrinsics, pose: RigidPose) -> Self {
        CameraRecord {
            f: intr.f,
            p0: intr.p0,
            q0: intr.q0,
            rotation: pose.rotation,
            translation: pose.translation,
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics { f: self.f, p0: self.p0, q0: self.q0 }
    }

    pub fn pose(&self) -> RigidPose {
        RigidPose { rotation: self.rotation, translation: self.translation }
    }
}

/// Projects world points to pixel coordinates, plain f64 version.
///
/// Any point with camera-frame depth <= [`MIN_DEPTH`] aborts the whole call
/// with its index and depth.
pub fn project(
    points: &[[f64; 3]],
    pose: &RigidPose,
    intr: &CameraIntrinsics,
) -> Result<Vec<[f64; 2]>> {
    let r = rodrigues(pose.rotation);
    let t = pose.translation;
    let mut out = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let cam = [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ];
        if cam[2] <= MIN_DEPTH {
            return Err(Error::BehindCamera { index: i, z: cam[2] });
        }
        out.push([
            intr.f * cam[0] / cam[2] + intr.p0,
            intr.f * cam[1] / cam[2] + intr.q0,
        ]);
    }
    Ok(out)
}

/// Node handles produced by [`project_graph`].
#[derive(Debug, Clone, Copy)]
pub struct ProjectionNodes {
    /// Pixel coordinates `[N,2]`.
    pub pixels: NodeId,
    /// Camera-frame depths `[N,1]`, already validated to exceed [`MIN_DEPTH`].
    pub depths: NodeId,
}

/// Identity pass-through that rejects depths at or below [`MIN_DEPTH`] at
/// evaluation time, reporting the offending point.
struct MinDepthGuard;

impl<T: Real> CustomOp<T> for MinDepthGuard {
    fn name(&self) -> &'static str {
        "min_depth_guard"
    }

    fn output_shape(&self, input_shapes: &[&[usize]]) -> Result<Vec<usize>> {
        Ok(input_shapes[0].to_vec())
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let z = inputs[0];
        for (i, &v) in z.data().iter().enumerate() {
            if v.to_f64() <= MIN_DEPTH {
                return Err(Error::BehindCamera { index: i, z: v.to_f64() });
            }
        }
        Ok(z.clone())
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad_out.clone())])
    }
}

/// Differentiable projection of `points` (`[N,3]`) through an axis-angle
/// `rotation` (`[3]`), `translation` (`[3]`) and scalar `focal`, with a fixed
/// principal point. Gradients flow into all four inputs.
pub fn project_graph<T: Real>(
    g: &mut Graph<T>,
    points: NodeId,
    rotation: NodeId,
    translation: NodeId,
    focal: NodeId,
    p0: f64,
    q0: f64,
) -> Result<ProjectionNodes> {
    let shape = g.shape(points).to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::Shape {
            op: "project".into(),
            detail: format!("points must be [N,3], got {shape:?}"),
        });
    }
    if !g.shape(focal).is_empty() {
        return Err(Error::Shape {
            op: "project".into(),
            detail: format!("focal must be a scalar, got {:?}", g.shape(focal)),
        });
    }
    let rot = rodrigues_graph(g, rotation)?;
    let rot_t = g.transpose2d(rot)?;
    let in_frame = g.matmul(points, rot_t)?;
    let t_row = g.reshape(translation, &[1, 3])?;
    let cam = g.add(in_frame, t_row)?;
    let xy = g.slice(cam, 1, 0, 2)?;
    let z_raw = g.slice(cam, 1, 2, 1)?;
    let depths = g.custom(&[z_raw], Arc::new(MinDepthGuard))?;
    let ratio = g.div(xy, depths)?;
    let scaled = g.mul(ratio, focal)?;
    let principal = g.constant(
        Tensor::new(&[2], vec![T::from_f64(p0), T::from_f64(q0)]).expect("principal layout"),
    );
    let pixels = g.add(scaled, principal)?;
    Ok(ProjectionNodes { pixels, depths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{grad_check, Values};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn principal_point_centers_pixels() {
        let intr = CameraIntrinsics::from_image(128, 96, 200.0).unwrap();
        assert_eq!(intr.p0, 63.5);
        assert_eq!(intr.q0, 47.5);
        let px = project(&[[0.0, 0.0, 1.0]], &RigidPose::identity(), &intr).unwrap();
        assert_eq!(px[0], [63.5, 47.5]);
    }

    #[test]
    fn known_offset_projects_to_known_pixel() {
        let intr = CameraIntrinsics { f: 100.0, p0: 32.0, q0: 32.0 };
        let px = project(&[[0.1, 0.0, 1.0]], &RigidPose::identity(), &intr).unwrap();
        assert!((px[0][0] - 42.0).abs() < 1e-12);
        assert!((px[0][1] - 32.0).abs() < 1e-12);
        // doubling f doubles the offset from the principal point
        let intr2 = CameraIntrinsics { f: 200.0, ..intr };
        let px2 = project(&[[0.1, 0.0, 1.0]], &RigidPose::identity(), &intr2).unwrap();
        assert!((px2[0][0] - 52.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected_with_index() {
        let intr = CameraIntrinsics::from_image(64, 64, 80.0).unwrap();
        let pts = [[0.0, 0.0, 0.6], [0.0, 0.1, -0.2]];
        let err = project(&pts, &RigidPose::identity(), &intr).unwrap_err();
        match err {
            Error::BehindCamera { index, z } => {
                assert_eq!(index, 1);
                assert!((z + 0.2).abs() < 1e-12);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn projection_is_scale_invariant_along_rays() {
        let intr = CameraIntrinsics::from_image(128, 128, 150.0).unwrap();
        let pose = RigidPose { rotation: [0.2, -0.1, 0.3], translation: [0.01, -0.02, 0.4] };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let p = [
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(0.2..0.8),
            ];
            // scale the camera-frame point along its ray, then map it back
            // to world coordinates; the pixel must not move
            let r = rodrigues(pose.rotation);
            let cam = [
                r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + pose.translation[0],
                r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + pose.translation[1],
                r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + pose.translation[2],
            ];
            let s = rng.gen_range(0.5..2.0);
            let scaled = [cam[0] * s, cam[1] * s, cam[2] * s];
            let back = [
                r[0][0] * (scaled[0] - pose.translation[0])
                    + r[1][0] * (scaled[1] - pose.translation[1])
                    + r[2][0] * (scaled[2] - pose.translation[2]),
                r[0][1] * (scaled[0] - pose.translation[0])
                    + r[1][1] * (scaled[1] - pose.translation[1])
                    + r[2][1] * (scaled[2] - pose.translation[2]),
                r[0][2] * (scaled[0] - pose.translation[0])
                    + r[1][2] * (scaled[1] - pose.translation[1])
                    + r[2][2] * (scaled[2] - pose.translation[2]),
            ];
            let a = project(&[p], &pose, &intr).unwrap();
            let b = project(&[back], &pose, &intr).unwrap();
            assert!((a[0][0] - b[0][0]).abs() < 1e-5, "u moved under ray scaling");
            assert!((a[0][1] - b[0][1]).abs() < 1e-5, "v moved under ray scaling");
        }
    }

    #[test]
    fn graph_projection_matches_plain_and_is_differentiable() {
        let intr = CameraIntrinsics::from_image(64, 64, 90.0).unwrap();
        let pose = RigidPose { rotation: [0.3, 0.2, -0.4], translation: [0.02, 0.01, 0.5] };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f64; 3]> = (0..6)
            .map(|_| {
                [
                    rng.gen_range(-0.08..0.08),
                    rng.gen_range(-0.08..0.08),
                    rng.gen_range(-0.05..0.05),
                ]
            })
            .collect();

        let mut g: Graph<f64> = Graph::new();
        let points = g.param("points", &[6, 3]);
        let rotation = g.param("rotation", &[3]);
        let translation = g.param("translation", &[3]);
        let focal = g.param("focal", &[]);
        let proj = project_graph(&mut g, points, rotation, translation, focal, intr.p0, intr.q0)
            .unwrap();
        let head = g.constant(Tensor::new(&[6, 2], (0..12).map(|i| 0.3 + 0.1 * i as f64).collect()).unwrap());
        let weighted = g.mul(proj.pixels, head).unwrap();
        let loss = g.sum_all(weighted);

        let mut values = Values::new(&g);
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        values.bind(&g, points, Tensor::new(&[6, 3], flat).unwrap()).unwrap();
        values.bind(&g, rotation, Tensor::from_vec(pose.rotation.to_vec())).unwrap();
        values.bind(&g, translation, Tensor::from_vec(pose.translation.to_vec())).unwrap();
        values.bind(&g, focal, Tensor::scalar(intr.f)).unwrap();
        g.forward(&mut values).unwrap();

        let expect = project(&pts, &pose, &intr).unwrap();
        let got = values.value(proj.pixels);
        for (i, e) in expect.iter().enumerate() {
            assert!((got.at(&[i, 0]) - e[0]).abs() < 1e-9);
            assert!((got.at(&[i, 1]) - e[1]).abs() < 1e-9);
        }

        let report = grad_check(&g, &mut values, loss, &[], 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "projection gradients: {:?}", report.worst());
    }

    #[test]
    fn graph_projection_rejects_behind_camera() {
        let mut g: Graph<f64> = Graph::new();
        let points = g.input("points", &[1, 3]);
        let rotation = g.input("rotation", &[3]);
        let translation = g.input("translation", &[3]);
        let focal = g.input("focal", &[]);
        let proj =
            project_graph(&mut g, points, rotation, translation, focal, 31.5, 31.5).unwrap();
        let mut values = Values::new(&g);
        values.bind(&g, points, Tensor::new(&[1, 3], vec![0.0, 0.0, -0.3]).unwrap()).unwrap();
        values.bind(&g, rotation, Tensor::from_vec(vec![0.0; 3])).unwrap();
        values.bind(&g, translation, Tensor::from_vec(vec![0.0; 3])).unwrap();
        values.bind(&g, focal, Tensor::scalar(50.0)).unwrap();
        let err = g.forward(&mut values).unwrap_err();
        assert!(matches!(err, Error::BehindCamera { index: 0, .. }), "got {err:?}");
        let _ = proj;
    }

    #[test]
    fn scaled_intrinsics_follow_pixel_centers() {
        let intr = CameraIntrinsics::from_image(128, 128, 120.0).unwrap();
        let quarter = intr.scaled(0.25);
        assert!((quarter.f - 30.0).abs() < 1e-12);
        assert!((quarter.p0 - 15.5).abs() < 1e-12);
        assert!((quarter.q0 - 15.5).abs() < 1e-12);
        // a projected point lands at the equivalent map location
        let pose = RigidPose { rotation: [0.0; 3], translation: [0.0, 0.0, 0.5] };
        let p = [[0.03, -0.04, 0.0]];
        let full = project(&p, &pose, &intr).unwrap()[0];
        let map = project(&p, &pose, &quarter).unwrap()[0];
        assert!(((full[0] + 0.5) * 0.25 - 0.5 - map[0]).abs() < 1e-9);
        assert!(((full[1] + 0.5) * 0.25 - 0.5 - map[1]).abs() < 1e-9);
    }

    #[test]
    fn from_image_rejects_bad_focal() {
        assert!(CameraIntrinsics::from_image(64, 64, 0.0).is_err());
        assert!(CameraIntrinsics::from_image(64, 64, -5.0).is_err());
        assert!(CameraIntrinsics::from_image(0, 64, 50.0).is_err());
    }
}
