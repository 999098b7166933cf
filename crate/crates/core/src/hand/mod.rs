//! Parametric hand model: shape blend offsets, forward kinematics and linear
//! blend skinning, built as graph programs so meshes, joints and keypoints
//! stay differentiable with respect to pose and shape.
//!
//! Conventions: 16 skinning joints (wrist is joint 0, every finger adds mcp,
//! pip, dip), 15 articulated rotations as axis-angle rows of theta, global
//! rotation and translation live in the camera pose instead. Positions are
//! row vectors, so a rotation R applied to rows is `x · Rᵀ`.

mod bundle;
mod toy;

pub use bundle::{load_bundle, save_bundle};
pub use toy::make_toy_model;

use crate::encodings::SkeletonHierarchy;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Values};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

/// Skinning joints in the kinematic tree.
pub const JOINT_COUNT: usize = 16;
/// Articulated joints carrying an axis-angle rotation (all but the wrist).
pub const ARTICULATED_COUNT: usize = 15;
/// Shape coefficients.
pub const SHAPE_COEFFS: usize = 10;
/// Pose blend features: one 3x3 rotation residual per articulated joint.
pub const POSE_FEATURES: usize = ARTICULATED_COUNT * 9;
/// Reported keypoints: the 16 joints plus five fingertip vertices.
pub const KEYPOINT_COUNT: usize = 21;

const ROT_EPS: f64 = 1e-24;

/// Rest geometry and blend fields of a skinnable hand.
///
/// Tensors are kept in f64 and cast when embedded into a graph. Layouts:
/// template `[V,3]`, shape_basis `[V,3,10]`, pose_basis `[V,3,135]`,
/// joint_regressor `[16,V]`, skinning_weights `[V,16]`.
#[derive(Debug, Clone)]
pub struct HandModelData {
    pub template: Tensor<f64>,
    pub faces: Vec<[usize; 3]>,
    pub shape_basis: Tensor<f64>,
    pub pose_basis: Tensor<f64>,
    pub joint_regressor: Tensor<f64>,
    pub skinning_weights: Tensor<f64>,
    /// Parent joint per joint; the root stores -1.
    pub parents: Vec<i32>,
    /// Vertex index of each fingertip, thumb to pinky.
    pub fingertip_vertex_ids: [usize; 5],
    /// Names of the 21 keypoints in reporting order.
    pub keypoint_names: Vec<String>,
}

impl HandModelData {
    pub fn vertex_count(&self) -> usize {
        self.template.shape()[0]
    }

    pub fn has_pose_blendshapes(&self) -> bool {
        self.pose_basis.data().iter().any(|&x| x != 0.0)
    }

    /// Checks every structural invariant, naming the offending row or index.
    pub fn validate(&self) -> Result<()> {
        let v = self.vertex_count();
        let model_err = |msg: String| Err(Error::Model(msg));
        if v == 0 || self.template.shape() != [v, 3] {
            return model_err(format!("template shape {:?}", self.template.shape()));
        }
        if self.shape_basis.shape() != [v, 3, SHAPE_COEFFS] {
            return model_err(format!("shape_basis shape {:?}", self.shape_basis.shape()));
        }
        if self.pose_basis.shape() != [v, 3, POSE_FEATURES] {
            return model_err(format!("pose_basis shape {:?}", self.pose_basis.shape()));
        }
        if self.joint_regressor.shape() != [JOINT_COUNT, v] {
            return model_err(format!(
                "joint_regressor shape {:?}",
                self.joint_regressor.shape()
            ));
        }
        if self.skinning_weights.shape() != [v, JOINT_COUNT] {
            return model_err(format!(
                "skinning_weights shape {:?}",
                self.skinning_weights.shape()
            ));
        }
        for (name, t) in [
            ("template", &self.template),
            ("shape_basis", &self.shape_basis),
            ("pose_basis", &self.pose_basis),
            ("joint_regressor", &self.joint_regressor),
            ("skinning_weights", &self.skinning_weights),
        ] {
            if !t.all_finite() {
                return model_err(format!("{name} contains non-finite values"));
            }
        }
        if self.parents.len() != JOINT_COUNT || self.parents[0] != -1 {
            return model_err(format!("parents must be 16 entries rooted at -1"));
        }
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return model_err(format!("joint {j} has invalid parent {p}"));
            }
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&ix| ix >= v) || f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return model_err(format!("face {i} is degenerate or out of range"));
            }
        }
        for (f, &tip) in self.fingertip_vertex_ids.iter().enumerate() {
            if tip >= v {
                return model_err(format!("fingertip {f} vertex id {tip} out of range"));
            }
        }
        if self.keypoint_names.len() != KEYPOINT_COUNT {
            return model_err(format!(
                "expected {KEYPOINT_COUNT} keypoint names, got {}",
                self.keypoint_names.len()
            ));
        }
        for i in 0..v {
            let row = &self.skinning_weights.data()[i * JOINT_COUNT..(i + 1) * JOINT_COUNT];
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| w < -1e-12) {
                return model_err(format!("skinning weight row {i} has a negative entry"));
            }
            if (sum - 1.0).abs() > 1e-5 {
                return model_err(format!("skinning weight row {i} sums to {sum}"));
            }
        }
        for j in 0..JOINT_COUNT {
            let row = &self.joint_regressor.data()[j * v..(j + 1) * v];
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| w < -1e-12) {
                return model_err(format!("joint regressor row {j} has a negative entry"));
            }
            if (sum - 1.0).abs() > 1e-5 {
                return model_err(format!("joint regressor row {j} sums to {sum}"));
            }
        }
        Ok(())
    }
}

/// Pose and shape coefficients for one hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandParams {
    pub beta: [f64; SHAPE_COEFFS],
    /// Axis-angle per articulated joint, rows follow joints 1..=15.
    pub theta: [[f64; 3]; ARTICULATED_COUNT],
}

impl HandParams {
    pub fn zero() -> Self {
        HandParams { beta: [0.0; SHAPE_COEFFS], theta: [[0.0; 3]; ARTICULATED_COUNT] }
    }

    /// Rescales any joint rotation with magnitude >= pi down to just below it.
    pub fn clamped(mut self) -> Self {
        let max = std::f64::consts::PI - 1e-3;
        for row in &mut self.theta {
            let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            if n > max {
                let s = max / n;
                for x in row.iter_mut() {
                    *x *= s;
                }
            }
        }
        self
    }

    pub fn beta_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(self.beta.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn theta_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.theta.iter().flatten().map(|&x| T::from_f64(x)).collect();
        Tensor::new(&[ARTICULATED_COUNT, 3], data).expect("theta layout")
    }
}

/// A posed mesh in model/camera-independent coordinates.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

/// Node handles produced by [`build_skin_graph`].
#[derive(Debug, Clone, Copy)]
pub struct SkinOutput {
    /// Posed vertices `[V,3]`.
    pub vertices: NodeId,
    /// Posed joint positions `[16,3]`.
    pub joints: NodeId,
    /// Rest joints regressed from the shaped template `[16,3]`.
    pub rest_joints: NodeId,
}

/// Axis-angle to rotation matrix, plain f64 version.
pub fn rodrigues(aa: [f64; 3]) -> [[f64; 3]; 3] {
    let (x, y, z) = (aa[0], aa[1], aa[2]);
    let t = (x * x + y * y + z * z + ROT_EPS).sqrt();
    let a = t.sin() / t;
    let h = (t * 0.5).sin();
    let b = 2.0 * h * h / (t * t);
    let k = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let mut r = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let k2ij: f64 = (0..3).map(|m| k[i][m] * k[m][j]).sum();
            r[i][j] = (i == j) as u8 as f64 + a * k[i][j] + b * k2ij;
        }
    }
    r
}

/// Axis-angle `[3]` to rotation matrix `[3,3]` as a graph program.
///
/// Uses the half-angle form `b = 2 sin^2(t/2) / t^2` so both the value and
/// the gradient stay accurate through t -> 0; a tiny bias under the square
/// root keeps the node finite there.
pub fn rodrigues_graph<T: Real>(g: &mut Graph<T>, aa: NodeId) -> Result<NodeId> {
    if g.shape(aa) != [3] {
        return Err(Error::Shape {
            op: "rodrigues".into(),
            detail: format!("axis-angle must be [3], got {:?}", g.shape(aa)),
        });
    }
    let x = g.slice(aa, 0, 0, 1)?;
    let y = g.slice(aa, 0, 1, 1)?;
    let z = g.slice(aa, 0, 2, 1)?;
    let x2 = g.square(x);
    let y2 = g.square(y);
    let z2 = g.square(z);
    let mut t2 = g.add(x2, y2)?;
    t2 = g.add(t2, z2)?;
    let eps = g.scalar(T::from_f64(ROT_EPS));
    t2 = g.add(t2, eps)?;
    let t = g.sqrt(t2);
    let sin_t = g.sin(t);
    let a = g.div(sin_t, t)?;
    let half = g.scalar(T::from_f64(0.5));
    let th = g.mul(t, half)?;
    let sh = g.sin(th);
    let sh2 = g.square(sh);
    let two = g.scalar(T::from_f64(2.0));
    let num = g.mul(sh2, two)?;
    let b = g.div(num, t2)?;

    let zero = g.constant(Tensor::zeros(&[1]));
    let nx = g.neg(x);
    let ny = g.neg(y);
    let nz = g.neg(z);
    let k_flat = g.concat(&[zero, nz, y, z, zero, nx, ny, x, zero], 0)?;
    let k = g.reshape(k_flat, &[3, 3])?;
    let k2 = g.matmul(k, k)?;
    let eye = g.constant(identity3::<T>());
    let ak = g.mul(k, a)?;
    let bk2 = g.mul(k2, b)?;
    let sum = g.add(ak, bk2)?;
    g.add(eye, sum)
}

fn identity3<T: Real>() -> Tensor<T> {
    let mut t = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        t.data_mut()[i * 4] = T::ONE;
    }
    t
}

/// Builds shape blending, forward kinematics and linear blend skinning on
/// top of `beta` (`[10]`) and `theta` (`[15,3]`), which may be any nodes.
pub fn build_skin_graph<T: Real>(
    g: &mut Graph<T>,
    model: &HandModelData,
    beta: NodeId,
    theta: NodeId,
) -> Result<SkinOutput> {
    model.validate()?;
    if g.shape(beta) != [SHAPE_COEFFS] {
        return Err(Error::Shape {
            op: "skin".into(),
            detail: format!("beta must be [{SHAPE_COEFFS}], got {:?}", g.shape(beta)),
        });
    }
    if g.shape(theta) != [ARTICULATED_COUNT, 3] {
        return Err(Error::Shape {
            op: "skin".into(),
            detail: format!("theta must be [{ARTICULATED_COUNT},3], got {:?}", g.shape(theta)),
        });
    }
    let v = model.vertex_count();

    // Shaped template and the rest joints regressed from it.
    let template = g.constant(model.template.cast::<T>());
    let shape_mat = g.constant(
        model.shape_basis.cast::<T>().reshaped(&[v * 3, SHAPE_COEFFS]).expect("basis layout"),
    );
    let beta_col = g.reshape(beta, &[SHAPE_COEFFS, 1])?;
    let shape_off_col = g.matmul(shape_mat, beta_col)?;
    let shape_off = g.reshape(shape_off_col, &[v, 3])?;
    let v_shaped = g.add(template, shape_off)?;
    let regressor = g.constant(model.joint_regressor.cast::<T>());
    let rest_joints = g.matmul(regressor, v_shaped)?;

    // Local rotations per joint; the wrist stays at identity.
    let eye = g.constant(identity3::<T>());
    let mut rot = Vec::with_capacity(JOINT_COUNT);
    rot.push(eye);
    for j in 1..JOINT_COUNT {
        let row = g.slice(theta, 0, j - 1, 1)?;
        let aa = g.reshape(row, &[3])?;
        rot.push(rodrigues_graph(g, aa)?);
    }

    // Optional pose-dependent corrective offsets from rotation residuals.
    let v_rest = if model.has_pose_blendshapes() {
        let mut feats = Vec::with_capacity(ARTICULATED_COUNT);
        for j in 1..JOINT_COUNT {
            let res = g.sub(rot[j], eye)?;
            feats.push(g.reshape(res, &[9])?);
        }
        let feat = g.concat(&feats, 0)?;
        let feat_col = g.reshape(feat, &[POSE_FEATURES, 1])?;
        let pose_mat = g.constant(
            model.pose_basis.cast::<T>().reshaped(&[v * 3, POSE_FEATURES]).expect("basis layout"),
        );
        let off_col = g.matmul(pose_mat, feat_col)?;
        let off = g.reshape(off_col, &[v, 3])?;
        g.add(v_shaped, off)?
    } else {
        v_shaped
    };

    // Forward kinematics along the tree. World rotation composes parent
    // first; translations track where each joint lands.
    let mut world_rot = Vec::with_capacity(JOINT_COUNT);
    let mut world_pos = Vec::with_capacity(JOINT_COUNT);
    world_rot.push(rot[0]);
    world_pos.push(g.slice(rest_joints, 0, 0, 1)?);
    for j in 1..JOINT_COUNT {
        let p = model.parents[j] as usize;
        world_rot.push(g.matmul(world_rot[p], rot[j])?);
        let jj = g.slice(rest_joints, 0, j, 1)?;
        let jp = g.slice(rest_joints, 0, p, 1)?;
        let off = g.sub(jj, jp)?;
        let wp_t = g.transpose2d(world_rot[p])?;
        let moved = g.matmul(off, wp_t)?;
        world_pos.push(g.add(world_pos[p], moved)?);
    }
    let joints = g.concat(&world_pos, 0)?;

    // Linear blend skinning: each joint contributes its rigid placement of
    // the rest vertices, weighted by its skinning column.
    let weights = g.constant(model.skinning_weights.cast::<T>());
    let mut acc: Option<NodeId> = None;
    for j in 0..JOINT_COUNT {
        let w_t = g.transpose2d(world_rot[j])?;
        let rotated = g.matmul(v_rest, w_t)?;
        let jj = g.slice(rest_joints, 0, j, 1)?;
        let j_moved = g.matmul(jj, w_t)?;
        let shift = g.sub(world_pos[j], j_moved)?;
        let placed = g.add(rotated, shift)?;
        let col = g.slice(weights, 1, j, 1)?;
        let term = g.mul(placed, col)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(SkinOutput { vertices: acc.expect("at least one joint"), joints, rest_joints })
}

/// Canonical names for the 21 keypoints in reporting order.
pub fn keypoint_names() -> Vec<String> {
    let mut names = vec!["wrist".to_string()];
    for finger in ["thumb", "index", "middle", "ring", "pinky"] {
        for part in ["mcp", "pip", "dip", "tip"] {
            names.push(format!("{finger}_{part}"));
        }
    }
    names
}

/// Assembles the 21 keypoints `[21,3]`: wrist, then per finger its three
/// joints followed by the fingertip vertex.
pub fn keypoints21_graph<T: Real>(
    g: &mut Graph<T>,
    model: &HandModelData,
    skin: &SkinOutput,
) -> Result<NodeId> {
    let mut parts = Vec::with_capacity(11);
    parts.push(g.gather_rows(skin.joints, vec![0])?);
    for f in 0..5 {
        let base = 1 + 3 * f;
        parts.push(g.gather_rows(skin.joints, vec![base, base + 1, base + 2])?);
        parts.push(g.gather_rows(skin.vertices, vec![model.fingertip_vertex_ids[f]])?);
    }
    g.concat(&parts, 0)
}

/// Unit bone direction per skeleton bone, plain f64 version.
///
/// Bones shorter than 1e-9 are rejected with the bone index.
pub fn bone_directions(
    keypoints: &[[f64; 3]],
    skeleton: &SkeletonHierarchy,
) -> Result<Vec<[f64; 3]>> {
    if keypoints.len() != skeleton.keypoints {
        return Err(Error::Shape {
            op: "bone_directions".into(),
            detail: format!("expected {} keypoints, got {}", skeleton.keypoints, keypoints.len()),
        });
    }
    let mut out = Vec::with_capacity(skeleton.bones.len());
    for (i, &(p, c)) in skeleton.bones.iter().enumerate() {
        let d = [
            keypoints[c][0] - keypoints[p][0],
            keypoints[c][1] - keypoints[p][1],
            keypoints[c][2] - keypoints[p][2],
        ];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if n <= 1e-9 {
            return Err(Error::DegenerateBone { bone: i });
        }
        out.push([d[0] / n, d[1] / n, d[2] / n]);
    }
    Ok(out)
}

/// Unit bone directions `[20,3]` as a graph program over keypoints `[21,3]`.
///
/// A tiny bias under the square root keeps gradients finite; callers are
/// expected to feed non-degenerate skeletons, which forward kinematics of a
/// valid model guarantees.
pub fn bone_directions_graph<T: Real>(
    g: &mut Graph<T>,
    keypoints: NodeId,
    skeleton: &SkeletonHierarchy,
) -> Result<NodeId> {
    let nb = skeleton.bones.len();
    let parents: Vec<usize> = skeleton.bones.iter().map(|&(p, _)| p).collect();
    let children: Vec<usize> = skeleton.bones.iter().map(|&(_, c)| c).collect();
    let pk = g.gather_rows(keypoints, parents)?;
    let ck = g.gather_rows(keypoints, children)?;
    let d = g.sub(ck, pk)?;
    let sq = g.square(d);
    let n2 = g.sum_axis(sq, 1)?;
    let n2c = g.reshape(n2, &[nb, 1])?;
    let eps = g.scalar(T::from_f64(1e-18));
    let biased = g.add(n2c, eps)?;
    let n = g.sqrt(biased);
    g.div(d, n)
}

/// Convenience wrapper: skins the model at `params` and returns the posed
/// mesh together with the 21 keypoints.
pub fn skin_mesh(model: &HandModelData, params: &HandParams) -> Result<(Mesh, Vec<[f64; 3]>)> {
    let mut g: Graph<f64> = Graph::new();
    let beta = g.input("beta", &[SHAPE_COEFFS]);
    let theta = g.input("theta", &[ARTICULATED_COUNT, 3]);
    let skin = build_skin_graph(&mut g, model, beta, theta)?;
    let kpts = keypoints21_graph(&mut g, model, &skin)?;
    let mut values = Values::new(&g);
    values.bind(&g, beta, params.beta_tensor())?;
    values.bind(&g, theta, params.theta_tensor())?;
    g.forward(&mut values)?;
    let verts = values.value(skin.vertices);
    let vertices = verts
        .data()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let keypoints = values
        .value(kpts)
        .data()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok((Mesh { vertices, faces: model.faces.clone() }, keypoints))
}
