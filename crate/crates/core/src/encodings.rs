//! Dense map encodings for sparse hand structure: Gaussian keypoint heatmaps
//! with a differentiable expectation decoder, and part orientation fields
//! (POF) that paint each bone's normalized 2D image direction plus the z
//! component of its 3D direction onto the pixels supporting the bone.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

/// Number of 2D/3D keypoints in the canonical hand layout.
pub const KEYPOINT_COUNT: usize = 21;
/// Number of bones connecting those keypoints.
pub const BONE_COUNT: usize = 20;

/// Keypoint connectivity. Bones are (parent, child) index pairs into the
/// 21-keypoint layout and double as the channel order for orientation fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonHierarchy {
    pub keypoints: usize,
    pub bones: Vec<(usize, usize)>,
}

impl SkeletonHierarchy {
    /// The canonical hand skeleton: wrist at keypoint 0, then per finger
    /// (thumb..pinky) mcp, pip, dip, tip at 1+4f..4+4f. Four bones per
    /// finger chain the wrist out to the tip.
    pub fn hand() -> Self {
        let mut bones = Vec::with_capacity(BONE_COUNT);
        for f in 0..5 {
            let base = 1 + 4 * f;
            bones.push((0, base));
            bones.push((base, base + 1));
            bones.push((base + 1, base + 2));
            bones.push((base + 2, base + 3));
        }
        SkeletonHierarchy { keypoints: KEYPOINT_COUNT, bones }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &(p, c)) in self.bones.iter().enumerate() {
            if p >= self.keypoints || c >= self.keypoints || p == c {
                return Err(Error::Model(format!(
                    "bone {i} connects invalid keypoints ({p}, {c})"
                )));
            }
        }
        Ok(())
    }
}

/// Per-keypoint Gaussian confidence maps, `[K,H,W]`, values in [0,1].
#[derive(Debug, Clone)]
pub struct HeatmapStack {
    pub data: Tensor<f64>,
    pub sigma: f64,
}

/// Part orientation field, `[3*B,H,W]`. Bone `b` occupies channels
/// `3b..3b+3`: the normalized 2D image direction of the projected bone and
/// the z component of its unit 3D direction, zero off support.
#[derive(Debug, Clone)]
pub struct PofField {
    pub data: Tensor<f64>,
    pub support_width: f64,
}

/// Foreground probability (or binary coverage) image, `[H,W]`, values in
/// [0,1].
#[derive(Debug, Clone)]
pub struct MaskImage {
    pub data: Tensor<f64>,
}

impl MaskImage {
    pub fn new(data: Tensor<f64>) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::Shape {
                op: "mask".into(),
                detail: format!("expected [H,W], got {:?}", data.shape()),
            });
        }
        if data.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Model("mask values must lie in [0,1]".into()));
        }
        Ok(MaskImage { data })
    }
}

/// Renders one Gaussian heatmap channel per keypoint.
///
/// Values follow `exp(-((x-x̂)² + (y-ŷ)²) / 2σ²)`: 1 at the keypoint,
/// `exp(-1/2)` at distance sigma. Keypoints may lie outside the map; their
/// channels then just hold tail values.
pub fn render_heatmaps(
    keypoints: &[[f64; 2]],
    width: usize,
    height: usize,
    sigma: f64,
) -> Result<HeatmapStack> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let k = keypoints.len();
    let mut out = Tensor::zeros(&[k, height, width]);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (c, kp) in keypoints.iter().enumerate() {
        let base = c * height * width;
        for v in 0..height {
            for u in 0..width {
                let du = u as f64 - kp[0];
                let dv = v as f64 - kp[1];
                out.data_mut()[base + v * width + u] = (-(du * du + dv * dv) * inv).exp();
            }
        }
    }
    Ok(HeatmapStack { data: out, sigma })
}

/// Differentiable heatmap decoding: the map-weighted spatial expectation
/// `Σ H·(u,v) / Σ H` per channel.
///
/// A channel with no mass to weight by (constant, or non-positive total) is
/// rejected with its index.
pub fn soft_argmax(heatmaps: &HeatmapStack) -> Result<Vec<[f64; 2]>> {
    let shape = heatmaps.data.shape();
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "soft_argmax".into(),
            detail: format!("expected [K,H,W], got {shape:?}"),
        });
    }
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let plane = &heatmaps.data.data()[c * h * w..(c + 1) * h * w];
        let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        if max == min {
            return Err(Error::EmptyChannel { channel: c });
        }
        let mut zsum = 0.0;
        let mut usum = 0.0;
        let mut vsum = 0.0;
        for v in 0..h {
            for u in 0..w {
                let z = plane[v * w + u];
                zsum += z;
                usum += z * u as f64;
                vsum += z * v as f64;
            }
        }
        if zsum <= 0.0 {
            return Err(Error::EmptyChannel { channel: c });
        }
        out.push([usum / zsum, vsum / zsum]);
    }
    Ok(out)
}

/// Graph version of [`soft_argmax`]: `[K,H,W]` heatmaps to `[K,2]` pixel
/// coordinates. A tiny bias keeps the normalization finite; feed maps with
/// positive mass (e.g. sigmoid outputs) for meaningful coordinates.
pub fn soft_argmax_graph<T: Real>(g: &mut Graph<T>, heatmaps: NodeId) -> Result<NodeId> {
    let shape = g.shape(heatmaps).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "soft_argmax".into(),
            detail: format!("expected [K,H,W], got {shape:?}"),
        });
    }
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(heatmaps, &[k, h * w])?;
    let mut coords = Tensor::zeros(&[h * w, 2]);
    for v in 0..h {
        for u in 0..w {
            coords.data_mut()[(v * w + u) * 2] = T::from_f64(u as f64);
            coords.data_mut()[(v * w + u) * 2 + 1] = T::from_f64(v as f64);
        }
    }
    let grid = g.constant(coords);
    let weighted = g.matmul(flat, grid)?;
    let mass = g.sum_axis(flat, 1)?;
    let mass_col = g.reshape(mass, &[k, 1])?;
    let eps = g.scalar(T::from_f64(1e-12));
    let denom = g.add(mass_col, eps)?;
    g.div(weighted, denom)
}

fn point_segment_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    d[0] * d[0] + d[1] * d[1]
}

/// True when pixel `pt` lies in the support of bone `b` after the overlap
/// partition: within the width of bone `b`'s segment and of no later bone.
fn owns_pixel(segs: &[([f64; 2], [f64; 2])], b: usize, pt: [f64; 2], r2: f64) -> bool {
    point_segment_dist2(pt, segs[b].0, segs[b].1) <= r2
        && !segs[b + 1..]
            .iter()
            .any(|&(a, e)| point_segment_dist2(pt, a, e) <= r2)
}

/// Paints each bone's `(û_2d, z_3d)` triple onto the pixels within
/// `support_width` of its projected 2D segment.
///
/// Where supports overlap, the pixel belongs to the later bone in skeleton
/// order and earlier bones hold zero there. A bone whose 2D projection is
/// degenerate is an error only if it actually owns pixels.
pub fn encode_pof(
    keypoints2d: &[[f64; 2]],
    bone_dirs: &[[f64; 3]],
    skeleton: &SkeletonHierarchy,
    width: usize,
    height: usize,
    support_width: f64,
) -> Result<PofField> {
    skeleton.validate()?;
    if keypoints2d.len() != skeleton.keypoints || bone_dirs.len() != skeleton.bones.len() {
        return Err(Error::Shape {
            op: "encode_pof".into(),
            detail: format!(
                "got {} keypoints and {} directions for a {}-keypoint {}-bone skeleton",
                keypoints2d.len(),
                bone_dirs.len(),
                skeleton.keypoints,
                skeleton.bones.len()
            ),
        });
    }
    let nb = skeleton.bones.len();
    let segs: Vec<([f64; 2], [f64; 2])> = skeleton
        .bones
        .iter()
        .map(|&(p, c)| (keypoints2d[p], keypoints2d[c]))
        .collect();
    let mut out = Tensor::zeros(&[3 * nb, height, width]);
    let r2 = support_width * support_width;
    let plane = height * width;
    for b in 0..nb {
        let (a, e) = segs[b];
        let d2 = [e[0] - a[0], e[1] - a[1]];
        let len = (d2[0] * d2[0] + d2[1] * d2[1]).sqrt();
        let mut u2d = [0.0, 0.0];
        let mut degenerate = true;
        if len > 1e-6 {
            u2d = [d2[0] / len, d2[1] / len];
            degenerate = false;
        }
        let z = bone_dirs[b][2];
        for v in 0..height {
            for u in 0..width {
                if !owns_pixel(&segs, b, [u as f64, v as f64], r2) {
                    continue;
                }
                if degenerate {
                    return Err(Error::DegenerateBone { bone: b });
                }
                let px = v * width + u;
                out.data_mut()[(3 * b) * plane + px] = u2d[0];
                out.data_mut()[(3 * b + 1) * plane + px] = u2d[1];
                out.data_mut()[(3 * b + 2) * plane + px] = z;
            }
        }
    }
    Ok(PofField { data: out, support_width })
}

/// Recovers per-bone unit 3D directions and support pixel counts from an
/// orientation field.
///
/// Channel values are averaged over each bone's owned support (the same
/// overlap partition as [`encode_pof`]); the direction is rebuilt as
/// `(sqrt(max(0, 1-z̄²))·û, z̄)` from the renormalized mean 2D part û and the
/// mean z part. The reconstruction equates image direction with camera-frame
/// xy direction, which holds in the distant-camera regime.
pub fn decode_pof(
    pof: &PofField,
    keypoints2d: &[[f64; 2]],
    skeleton: &SkeletonHierarchy,
) -> Result<(Vec<[f64; 3]>, Vec<usize>)> {
    let nb = skeleton.bones.len();
    let shape = pof.data.shape();
    if shape.len() != 3 || shape[0] != 3 * nb {
        return Err(Error::Shape {
            op: "decode_pof".into(),
            detail: format!("expected [{},H,W], got {shape:?}", 3 * nb),
        });
    }
    if keypoints2d.len() != skeleton.keypoints {
        return Err(Error::Shape {
            op: "decode_pof".into(),
            detail: format!("expected {} keypoints, got {}", skeleton.keypoints, keypoints2d.len()),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let r2 = pof.support_width * pof.support_width;
    let segs: Vec<([f64; 2], [f64; 2])> = skeleton
        .bones
        .iter()
        .map(|&(p, c)| (keypoints2d[p], keypoints2d[c]))
        .collect();
    let mut dirs = Vec::with_capacity(nb);
    let mut counts = Vec::with_capacity(nb);
    for b in 0..nb {
        let mut acc = [0.0f64; 3];
        let mut count = 0usize;
        for v in 0..h {
            for u in 0..w {
                if !owns_pixel(&segs, b, [u as f64, v as f64], r2) {
                    continue;
                }
                let px = v * w + u;
                for r in 0..3 {
                    acc[r] += pof.data.data()[(3 * b + r) * plane + px];
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptySupport { bone: b });
        }
        let mean = [acc[0] / count as f64, acc[1] / count as f64, acc[2] / count as f64];
        let n2d = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
        if n2d <= 1e-12 && mean[2].abs() <= 1e-12 {
            return Err(Error::EmptySupport { bone: b });
        }
        let zbar = mean[2].clamp(-1.0, 1.0);
        let xy = (1.0 - zbar * zbar).max(0.0).sqrt();
        let dir = if n2d <= 1e-12 {
            // a bone seen end-on: all information is in the z channel
            [0.0, 0.0, if zbar >= 0.0 { 1.0 } else { -1.0 }]
        } else {
            [xy * mean[0] / n2d, xy * mean[1] / n2d, zbar]
        };
        dirs.push(dir);
        counts.push(count);
    }
    Ok((dirs, counts))
}
