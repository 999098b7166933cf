//! Procedurally generated stylized hand: 20 tapered six-sided tubes (one per
//! bone) plus fingertip apex vertices, with rigid-dominant skinning weights
//! and a joint regressor that reproduces the rest joints exactly.

use super::{keypoint_names, HandModelData, ARTICULATED_COUNT, JOINT_COUNT, SHAPE_COEFFS};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const RINGS: usize = 5;
const SIDES: usize = 6;
const BONES: usize = 20;
/// 20 tubes of 5 rings x 6 vertices, plus one apex per fingertip.
pub const TOY_VERTEX_COUNT: usize = BONES * RINGS * SIDES + 5;

type V3 = [f64; 3];

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: V3) -> V3 {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    scale(a, 1.0 / n)
}

/// Builds the toy hand. Geometry is fixed; the seed only drives the random
/// linear fields of the shape basis, so two calls with one seed are
/// byte-identical.
pub fn make_toy_model(seed: u64) -> HandModelData {
    // Palm lies in the xy plane, fingers extend toward +y, sizes in meters.
    let wrist: V3 = [0.0, 0.0, 0.0];
    let mcp: [V3; 5] = [
        [-0.042, 0.018, 0.0],
        [-0.019, 0.046, 0.0],
        [-0.001, 0.050, 0.0],
        [0.017, 0.046, 0.0],
        [0.034, 0.038, 0.0],
    ];
    let dir: [V3; 5] = [
        normalize([-0.55, 0.80, 0.0]),
        normalize([-0.08, 1.0, 0.0]),
        normalize([0.0, 1.0, 0.0]),
        normalize([0.08, 1.0, 0.0]),
        normalize([0.18, 1.0, 0.0]),
    ];
    let seg: [[f64; 3]; 5] = [
        [0.032, 0.026, 0.022],
        [0.038, 0.024, 0.019],
        [0.042, 0.026, 0.020],
        [0.038, 0.024, 0.019],
        [0.030, 0.019, 0.016],
    ];
    // Radii at the two ends of each bone segment: palm, then the three
    // finger segments tapering toward the tip.
    let seg_radii: [[f64; 2]; 4] = [
        [0.0115, 0.0105],
        [0.0085, 0.0070],
        [0.0070, 0.0060],
        [0.0060, 0.0048],
    ];

    // Joint positions: wrist, then mcp/pip/dip per finger.
    let mut joints = vec![wrist];
    for f in 0..5 {
        let m = mcp[f];
        let p = add(m, scale(dir[f], seg[f][0]));
        let d = add(p, scale(dir[f], seg[f][1]));
        joints.extend([m, p, d]);
    }
    let tips: Vec<V3> = (0..5)
        .map(|f| add(joints[3 + 3 * f], scale(dir[f], seg[f][2])))
        .collect();

    let mut parents = vec![-1i32; JOINT_COUNT];
    for f in 0..5i32 {
        parents[(1 + 3 * f) as usize] = 0;
        parents[(2 + 3 * f) as usize] = 1 + 3 * f;
        parents[(3 + 3 * f) as usize] = 2 + 3 * f;
    }

    // One tube per bone. Bone order is finger-major: palm, mcp->pip,
    // pip->dip, dip->tip for the thumb, then the same for each finger.
    // Vertex order inside a bone is ring-major, ring 0 at the bone start.
    let mut vertices = Vec::with_capacity(TOY_VERTEX_COUNT);
    let mut faces = Vec::new();
    let mut weights = vec![0.0f64; TOY_VERTEX_COUNT * JOINT_COUNT];
    // Blend toward the child joint on the rings closest to it.
    let child_ramp = [0.0, 0.0, 0.1, 0.3, 0.5];

    for f in 0..5 {
        let thumb_boost = if f == 0 { 1.12 } else { 1.0 };
        let chain = [
            (wrist, joints[1 + 3 * f], 0usize, Some(1 + 3 * f)),
            (joints[1 + 3 * f], joints[2 + 3 * f], 1 + 3 * f, Some(2 + 3 * f)),
            (joints[2 + 3 * f], joints[3 + 3 * f], 2 + 3 * f, Some(3 + 3 * f)),
            (joints[3 + 3 * f], tips[f], 3 + 3 * f, None),
        ];
        for (s, &(start, end, parent_joint, child_joint)) in chain.iter().enumerate() {
            let axis = normalize(sub(end, start));
            let up = if axis[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
            let n1 = normalize(cross(axis, up));
            let n2 = cross(axis, n1);
            let base = vertices.len();
            for r in 0..RINGS {
                let t = r as f64 / (RINGS - 1) as f64;
                let center = add(start, scale(sub(end, start), t));
                let radius =
                    (seg_radii[s][0] + (seg_radii[s][1] - seg_radii[s][0]) * t) * thumb_boost;
                for k in 0..SIDES {
                    let phi = 2.0 * std::f64::consts::PI * k as f64 / SIDES as f64;
                    let rim = add(scale(n1, radius * phi.cos()), scale(n2, radius * phi.sin()));
                    let idx = vertices.len();
                    vertices.push(add(center, rim));
                    let wc = child_joint.map_or(0.0, |_| child_ramp[r]);
                    weights[idx * JOINT_COUNT + parent_joint] = 1.0 - wc;
                    if let Some(c) = child_joint {
                        weights[idx * JOINT_COUNT + c] = wc;
                    }
                }
            }
            for r in 0..RINGS - 1 {
                for k in 0..SIDES {
                    let k2 = (k + 1) % SIDES;
                    let a = base + r * SIDES + k;
                    let b = base + r * SIDES + k2;
                    let c = base + (r + 1) * SIDES + k2;
                    let d = base + (r + 1) * SIDES + k;
                    faces.push([a, b, c]);
                    faces.push([a, c, d]);
                }
            }
        }
    }

    // Fingertip apexes cap the last ring of each tip bone.
    let mut fingertip_vertex_ids = [0usize; 5];
    for f in 0..5 {
        let apex = vertices.len();
        vertices.push(tips[f]);
        fingertip_vertex_ids[f] = apex;
        weights[apex * JOINT_COUNT + 3 + 3 * f] = 1.0;
        let tip_bone = 4 * f + 3;
        let last_ring = tip_bone * RINGS * SIDES + (RINGS - 1) * SIDES;
        for k in 0..SIDES {
            faces.push([last_ring + k, last_ring + (k + 1) % SIDES, apex]);
        }
    }
    let v = vertices.len();
    debug_assert_eq!(v, TOY_VERTEX_COUNT);

    // Joint regressor: each joint is the mean of ring 0 of a bone that
    // starts at it, which reproduces the rest joints exactly.
    let mut regressor = vec![0.0f64; JOINT_COUNT * v];
    let ring0_bone = |joint: usize| -> usize {
        if joint == 0 {
            0
        } else {
            // joint = 1+3f+s sits at the start of bone 4f+s+1
            let f = (joint - 1) / 3;
            let s = (joint - 1) % 3;
            4 * f + s + 1
        }
    };
    for j in 0..JOINT_COUNT {
        let base = ring0_bone(j) * RINGS * SIDES;
        for k in 0..SIDES {
            regressor[j * v + base + k] = 1.0 / SIDES as f64;
        }
    }

    // Shape basis: ten gentle linear fields over vertex position. Component
    // zero is a uniform scale about the wrist, the rest are seeded random
    // affine fields.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape_basis = vec![0.0f64; v * 3 * SHAPE_COEFFS];
    for b in 0..SHAPE_COEFFS {
        let (mat, off, gain) = if b == 0 {
            ([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3], 0.05)
        } else {
            let mut m = [[0.0f64; 3]; 3];
            for row in &mut m {
                for e in row.iter_mut() {
                    *e = rng.gen_range(-1.0..1.0);
                }
            }
            let mut c = [0.0f64; 3];
            for e in &mut c {
                *e = rng.gen_range(-0.3..0.3);
            }
            (m, c, 0.004)
        };
        for (i, p) in vertices.iter().enumerate() {
            for r in 0..3 {
                let field = mat[r][0] * p[0] + mat[r][1] * p[1] + mat[r][2] * p[2] + off[r];
                shape_basis[(i * 3 + r) * SHAPE_COEFFS + b] = gain * field;
            }
        }
    }

    let template_data: Vec<f64> = vertices.iter().flatten().copied().collect();
    let model = HandModelData {
        template: Tensor::new(&[v, 3], template_data).expect("template layout"),
        faces,
        shape_basis: Tensor::new(&[v, 3, SHAPE_COEFFS], shape_basis).expect("basis layout"),
        pose_basis: Tensor::zeros(&[v, 3, ARTICULATED_COUNT * 9]),
        joint_regressor: Tensor::new(&[JOINT_COUNT, v], regressor).expect("regressor layout"),
        skinning_weights: Tensor::new(&[v, JOINT_COUNT], weights).expect("weights layout"),
        parents,
        fingertip_vertex_ids,
        keypoint_names: keypoint_names(),
    };
    debug_assert!(model.validate().is_ok());
    model
}
