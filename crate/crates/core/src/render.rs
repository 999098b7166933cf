//! Differentiable soft silhouette rasterizer plus a hard-coverage mode for
//! ground-truth masks. Per pixel the soft occupancy is
//! `A = 1 - prod_j (1 - sigmoid(-d_j / s))` over projected triangles, with
//! `d_j` the signed 2D distance to triangle j (negative inside), so gradients
//! flow back to the projected vertices and through them to pose and focal
//! length.

use crate::camera::{project, CameraIntrinsics, RigidPose};
use crate::encodings::MaskImage;
use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, NodeId};
use crate::hand::Mesh;
use crate::tensor::{Real, Tensor};
use std::path::Path;
use std::sync::Arc;

/// Rasterization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Soft,
    Hard,
}

/// Knobs of the silhouette rasterizer.
#[derive(Debug, Clone, Copy)]
pub struct SoftRenderConfig {
    /// Sigmoid temperature on the signed distance, in pixels.
    pub sharpness: f64,
    pub mode: RenderMode,
}

impl SoftRenderConfig {
    pub fn soft(sharpness: f64) -> Self {
        SoftRenderConfig { sharpness, mode: RenderMode::Soft }
    }

    pub fn hard() -> Self {
        SoftRenderConfig { sharpness: 1.0, mode: RenderMode::Hard }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == RenderMode::Soft && !(self.sharpness > 0.0) {
            return Err(Error::Config(format!(
                "soft rasterization needs positive sharpness, got {}",
                self.sharpness
            )));
        }
        Ok(())
    }
}

/// Contributions fade out beyond this many sharpness units from a triangle;
/// triangles farther than that are culled per pixel.
const CUTOFF_SIGMAS: f64 = 24.0;

fn sigmoid<T: Real>(x: T) -> T {
    if x.to_f64() >= 0.0 {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Signed distance from `p` to the triangle `(a, b, c)`: negative inside,
/// positive outside, magnitude is the distance to the nearest edge.
fn signed_distance<T: Real>(p: [T; 2], a: [T; 2], b: [T; 2], c: [T; 2]) -> T {
    let dist = nearest_edge(p, a, b, c).0;
    if inside(p, a, b, c) {
        -dist
    } else {
        dist
    }
}

fn inside<T: Real>(p: [T; 2], a: [T; 2], b: [T; 2], c: [T; 2]) -> bool {
    let z = T::ZERO;
    let s1 = cross(sub(b, a), sub(p, a));
    let s2 = cross(sub(c, b), sub(p, b));
    let s3 = cross(sub(a, c), sub(p, c));
    (s1 >= z && s2 >= z && s3 >= z) || (s1 <= z && s2 <= z && s3 <= z)
}

fn sub<T: Real>(a: [T; 2], b: [T; 2]) -> [T; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn cross<T: Real>(a: [T; 2], b: [T; 2]) -> T {
    a[0] * b[1] - a[1] * b[0]
}

/// Distance from `p` to the nearest triangle edge, along with the edge index
/// and the clamped projection parameter along it.
fn nearest_edge<T: Real>(p: [T; 2], a: [T; 2], b: [T; 2], c: [T; 2]) -> (T, usize, T) {
    let mut best = (T::from_f64(f64::MAX), 0usize, T::ZERO);
    for (i, (s, e)) in [(a, b), (b, c), (c, a)].into_iter().enumerate() {
        let ab = sub(e, s);
        let ap = sub(p, s);
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = if len2.to_f64() > 0.0 {
            let raw = (ap[0] * ab[0] + ap[1] * ab[1]) / len2;
            raw.max(T::ZERO).min(T::ONE)
        } else {
            T::ZERO
        };
        let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
        let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
        if dist < best.0 {
            best = (dist, i, t);
        }
    }
    best
}

struct TriangleBounds {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    empty: bool,
}

fn triangle_bounds<T: Real>(
    verts: &[[T; 2]; 3],
    width: usize,
    height: usize,
    margin: f64,
) -> TriangleBounds {
    let mut min = [f64::MAX, f64::MAX];
    let mut max = [f64::MIN, f64::MIN];
    for v in verts {
        for k in 0..2 {
            min[k] = min[k].min(v[k].to_f64());
            max[k] = max[k].max(v[k].to_f64());
        }
    }
    let x0 = (min[0] - margin).floor().max(0.0);
    let y0 = (min[1] - margin).floor().max(0.0);
    let x1 = (max[0] + margin).ceil().min(width as f64 - 1.0);
    let y1 = (max[1] + margin).ceil().min(height as f64 - 1.0);
    TriangleBounds {
        x0: x0 as usize,
        x1: x1 as usize,
        y0: y0 as usize,
        y1: y1 as usize,
        empty: x0 > x1 || y0 > y1,
    }
}

fn tri_verts<T: Real>(verts: &[T], face: &[usize; 3]) -> [[T; 2]; 3] {
    [
        [verts[face[0] * 2], verts[face[0] * 2 + 1]],
        [verts[face[1] * 2], verts[face[1] * 2 + 1]],
        [verts[face[2] * 2], verts[face[2] * 2 + 1]],
    ]
}

/// Soft occupancy over the full pixel grid, triangle-major with bbox culling.
fn soft_coverage<T: Real>(
    verts: &[T],
    faces: &[[usize; 3]],
    width: usize,
    height: usize,
    sharpness: f64,
) -> Vec<T> {
    let margin = (CUTOFF_SIGMAS * sharpness).max(1.0);
    let inv_s = T::from_f64(1.0 / sharpness);
    let mut survival = vec![T::ONE; width * height];
    for face in faces {
        let tv = tri_verts(verts, face);
        let bounds = triangle_bounds(&tv, width, height, margin);
        if bounds.empty {
            continue;
        }
        for y in bounds.y0..=bounds.y1 {
            for x in bounds.x0..=bounds.x1 {
                let p = [T::from_f64(x as f64), T::from_f64(y as f64)];
                let d = signed_distance(p, tv[0], tv[1], tv[2]);
                survival[y * width + x] = survival[y * width + x] * sigmoid(d * inv_s);
            }
        }
    }
    survival.iter().map(|&s| T::ONE - s).collect()
}

/// Gradient of the soft coverage wrt the flat `[V*2]` vertex buffer.
///
/// Pixel-major so each pixel can form leave-one-out products of its factors
/// with prefix/suffix passes instead of dividing (factors underflow deep
/// inside the mesh).
fn soft_coverage_grad<T: Real>(
    verts: &[T],
    faces: &[[usize; 3]],
    width: usize,
    height: usize,
    sharpness: f64,
    grad_out: &[T],
) -> Vec<T> {
    let margin = (CUTOFF_SIGMAS * sharpness).max(1.0);
    let inv_s = T::from_f64(1.0 / sharpness);
    let mut grad = vec![T::ZERO; verts.len()];
    // precompute bboxes once; the per-pixel loop tests against them
    let tvs: Vec<[[T; 2]; 3]> = faces.iter().map(|f| tri_verts(verts, f)).collect();
    let boxes: Vec<[f64; 4]> = tvs
        .iter()
        .map(|tv| {
            let mut min = [f64::MAX, f64::MAX];
            let mut max = [f64::MIN, f64::MIN];
            for v in tv {
                for k in 0..2 {
                    min[k] = min[k].min(v[k].to_f64());
                    max[k] = max[k].max(v[k].to_f64());
                }
            }
            [min[0] - margin, min[1] - margin, max[0] + margin, max[1] + margin]
        })
        .collect();
    let mut hits: Vec<(usize, T)> = Vec::with_capacity(64);
    let mut pre: Vec<T> = Vec::with_capacity(64);
    for y in 0..height {
        for x in 0..width {
            let g = grad_out[y * width + x];
            if g.to_f64() == 0.0 {
                continue;
            }
            let (fx, fy) = (x as f64, y as f64);
            hits.clear();
            for (t, bb) in boxes.iter().enumerate() {
                if fx < bb[0] || fy < bb[1] || fx > bb[2] || fy > bb[3] {
                    continue;
                }
                let tv = &tvs[t];
                let p = [T::from_f64(fx), T::from_f64(fy)];
                let d = signed_distance(p, tv[0], tv[1], tv[2]);
                hits.push((t, sigmoid(d * inv_s)));
            }
            if hits.is_empty() {
                continue;
            }
            // prefix[i] = product of factors before i; suffix builds in the
            // reverse sweep, so leave-one-out products never divide
            pre.clear();
            let mut acc = T::ONE;
            for &(_, f) in &hits {
                pre.push(acc);
                acc = acc * f;
            }
            let mut suf = T::ONE;
            for i in (0..hits.len()).rev() {
                let (t, f) = hits[i];
                let others = pre[i] * suf;
                suf = suf * f;
                // dA/dd = -(prod of other factors) * sigma' / s
                let dd = -(g * others * f * (T::ONE - f) * inv_s);
                if dd.to_f64() == 0.0 {
                    continue;
                }
                let tv = &tvs[t];
                let p = [T::from_f64(fx), T::from_f64(fy)];
                let (dist, edge, tpar) = nearest_edge(p, tv[0], tv[1], tv[2]);
                if dist.to_f64() <= 1e-12 {
                    continue;
                }
                let sign = if inside(p, tv[0], tv[1], tv[2]) { -T::ONE } else { T::ONE };
                let (s_i, e_i) = match edge {
                    0 => (0, 1),
                    1 => (1, 2),
                    _ => (2, 0),
                };
                let s_v = tv[s_i];
                let e_v = tv[e_i];
                let q = [
                    s_v[0] + tpar * (e_v[0] - s_v[0]),
                    s_v[1] + tpar * (e_v[1] - s_v[1]),
                ];
                let n = [(p[0] - q[0]) / dist, (p[1] - q[1]) / dist];
                let coeff = dd * sign;
                let (vs, ve) = (faces[t][s_i], faces[t][e_i]);
                let one_minus_t = T::ONE - tpar;
                grad[vs * 2] = grad[vs * 2] - coeff * one_minus_t * n[0];
                grad[vs * 2 + 1] = grad[vs * 2 + 1] - coeff * one_minus_t * n[1];
                grad[ve * 2] = grad[ve * 2] - coeff * tpar * n[0];
                grad[ve * 2 + 1] = grad[ve * 2 + 1] - coeff * tpar * n[1];
            }
        }
    }
    grad
}

fn hard_coverage(verts: &[f64], faces: &[[usize; 3]], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; width * height];
    for face in faces {
        let tv = tri_verts(verts, face);
        let bounds = triangle_bounds(&tv, width, height, 0.0);
        if bounds.empty {
            continue;
        }
        for y in bounds.y0..=bounds.y1 {
            for x in bounds.x0..=bounds.x1 {
                let p = [x as f64, y as f64];
                if inside(p, tv[0], tv[1], tv[2]) {
                    out[y * width + x] = 1.0;
                }
            }
        }
    }
    out
}

/// The rasterizer as a graph operation over projected vertices `[V,2]`,
/// emitting occupancy `[H,W]`.
struct SilhouetteOp {
    faces: Arc<Vec<[usize; 3]>>,
    width: usize,
    height: usize,
    sharpness: f64,
}

impl<T: Real> CustomOp<T> for SilhouetteOp {
    fn name(&self) -> &'static str {
        "soft_silhouette"
    }

    fn output_shape(&self, input_shapes: &[&[usize]]) -> Result<Vec<usize>> {
        let s = input_shapes[0];
        if s.len() != 2 || s[1] != 2 {
            return Err(Error::Shape {
                op: "soft_silhouette".into(),
                detail: format!("projected vertices must be [V,2], got {s:?}"),
            });
        }
        Ok(vec![self.height, self.width])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let data = soft_coverage(
            inputs[0].data(),
            &self.faces,
            self.width,
            self.height,
            self.sharpness,
        );
        Tensor::new(&[self.height, self.width], data)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let grad = soft_coverage_grad(
            inputs[0].data(),
            &self.faces,
            self.width,
            self.height,
            self.sharpness,
            grad_out.data(),
        );
        Ok(vec![Some(Tensor::new(inputs[0].shape(), grad)?)])
    }
}

/// Appends a soft silhouette node over projected vertices `[V,2]`.
pub fn silhouette_graph<T: Real>(
    g: &mut Graph<T>,
    verts2d: NodeId,
    faces: &[[usize; 3]],
    width: usize,
    height: usize,
    sharpness: f64,
) -> Result<NodeId> {
    SoftRenderConfig::soft(sharpness).validate()?;
    g.custom(
        &[verts2d],
        Arc::new(SilhouetteOp {
            faces: Arc::new(faces.to_vec()),
            width,
            height,
            sharpness,
        }),
    )
}

/// Renders the mesh silhouette under the given camera.
///
/// Soft mode produces the differentiable occupancy (here evaluated in f64);
/// hard mode produces exact binary point-in-triangle coverage for ground
/// truth.
pub fn render_silhouette(
    mesh: &Mesh,
    pose: &RigidPose,
    intr: &CameraIntrinsics,
    width: usize,
    height: usize,
    config: &SoftRenderConfig,
) -> Result<MaskImage> {
    config.validate()?;
    let projected = project(&mesh.vertices, pose, intr)?;
    let mut verts = Vec::with_capacity(projected.len() * 2);
    for p in &projected {
        verts.extend_from_slice(p);
    }
    let data = match config.mode {
        RenderMode::Soft => soft_coverage(&verts, &mesh.faces, width, height, config.sharpness),
        RenderMode::Hard => hard_coverage(&verts, &mesh.faces, width, height),
    };
    MaskImage::new(Tensor::new(&[height, width], data)?)
}

/// Intersection over union of the two masks after thresholding.
/// Two empty masks are a perfect match.
pub fn mask_iou(a: &MaskImage, b: &MaskImage, threshold: f64) -> Result<f64> {
    if a.data.shape() != b.data.shape() {
        return Err(Error::Shape {
            op: "mask_iou".into(),
            detail: format!("mask dims {:?} vs {:?}", a.data.shape(), b.data.shape()),
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.data().iter().zip(b.data.data()) {
        let fa = x > threshold;
        let fb = y > threshold;
        inter += (fa && fb) as usize;
        union += (fa || fb) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Writes a mask as 8-bit grayscale PNG, 255 = full foreground.
pub fn write_mask_png(path: &Path, mask: &MaskImage) -> Result<()> {
    let shape = mask.data.shape();
    let (h, w) = (shape[0], shape[1]);
    let pixels: Vec<u8> = mask
        .data
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("pixel buffer matches dims");
    img.save(path).map_err(|e| Error::Format(format!("png write failed: {e}")))?;
    Ok(())
}
