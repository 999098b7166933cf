//! Evaluation metrics: PCK curves and their AUC, segmentation mIoU, and
//! per-vertex mesh error under optional alignment.
//!
//! Everything here is a pure function over plain data, unit-agnostic where
//! possible: [`pck_curve`] counts whatever distances it is given against
//! thresholds in the same unit, so one implementation serves pixel and
//! millimeter grids alike.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::encodings::MaskImage;
use crate::error::{Error, Result};
use crate::hand::Mesh;

/// Fraction of keypoints whose error falls within each threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckCurve {
    /// Strictly ascending, in the unit of the errors that built the curve.
    pub thresholds: Vec<f64>,
    /// Same length, each in [0,1], non-decreasing.
    pub fractions: Vec<f64>,
}

impl PckCurve {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.len() != self.fractions.len() {
            return Err(Error::Config(format!(
                "curve has {} thresholds but {} fractions",
                self.thresholds.len(),
                self.fractions.len()
            )));
        }
        if self.thresholds.is_empty() {
            return Err(Error::Config("curve is empty".into()));
        }
        if self.thresholds.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("non-finite threshold".into()));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("thresholds must be strictly ascending".into()));
        }
        for &f in &self.fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("fraction {f} outside [0,1]")));
            }
        }
        if self.fractions.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("fractions must be non-decreasing".into()));
        }
        Ok(())
    }
}

/// Builds a PCK curve from per-keypoint error distances.
pub fn pck_curve(errors: &[f64], thresholds: &[f64]) -> Result<PckCurve> {
    if errors.is_empty() {
        return Err(Error::Config("PCK needs at least one error value".into()));
    }
    for &e in errors {
        if !e.is_finite() || e < 0.0 {
            return Err(Error::Config(format!("error distances must be finite and >= 0, got {e}")));
        }
    }
    if thresholds.is_empty() {
        return Err(Error::Config("PCK needs at least one threshold".into()));
    }
    if thresholds.iter().any(|t| !t.is_finite()) {
        return Err(Error::Config("non-finite threshold".into()));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("thresholds must be strictly ascending".into()));
    }
    let n = errors.len() as f64;
    let fractions = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / n)
        .collect();
    Ok(PckCurve { thresholds: thresholds.to_vec(), fractions })
}

/// Area under the curve by the trapezoid rule, normalized by the threshold
/// span so a constant fraction of 1 scores exactly 1.
pub fn auc(curve: &PckCurve) -> Result<f64> {
    curve.validate()?;
    if curve.thresholds.len() < 2 {
        return Err(Error::Config("AUC needs at least two thresholds".into()));
    }
    let span = curve.thresholds.last().unwrap() - curve.thresholds.first().unwrap();
    let mut area = 0.0;
    for i in 1..curve.thresholds.len() {
        let dt = curve.thresholds[i] - curve.thresholds[i - 1];
        area += 0.5 * (curve.fractions[i] + curve.fractions[i - 1]) * dt;
    }
    Ok(area / span)
}

fn binarize(mask: &MaskImage, threshold: f64) -> Vec<bool> {
    mask.data.data().iter().map(|&v| v > threshold).collect()
}

fn class_iou(a: &[bool], b: &[bool], class: bool) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x == class, y == class);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        // both masks agree the class is absent
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Foreground intersection-over-union after thresholding both masks.
pub fn mask_iou(pred: &MaskImage, gt: &MaskImage, threshold: f64) -> Result<f64> {
    check_mask_pair(pred, gt, threshold)?;
    Ok(class_iou(&binarize(pred, threshold), &binarize(gt, threshold), true))
}

/// Mean of foreground and background IoU after thresholding both masks.
pub fn miou(pred: &MaskImage, gt: &MaskImage, threshold: f64) -> Result<f64> {
    check_mask_pair(pred, gt, threshold)?;
    let a = binarize(pred, threshold);
    let b = binarize(gt, threshold);
    Ok(0.5 * (class_iou(&a, &b, true) + class_iou(&a, &b, false)))
}

fn check_mask_pair(pred: &MaskImage, gt: &MaskImage, threshold: f64) -> Result<()> {
    if pred.data.shape() != gt.data.shape() {
        return Err(Error::Shape {
            op: "miou".into(),
            detail: format!("mask dims differ: {:?} vs {:?}", pred.data.shape(), gt.data.shape()),
        });
    }
    if !threshold.is_finite() || !(0.0..1.0).contains(&threshold) {
        return Err(Error::Config(format!("mask threshold must lie in [0,1), got {threshold}")));
    }
    Ok(())
}

/// How predicted vertices are registered to ground truth before measuring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    /// Compare raw coordinates.
    None,
    /// Remove the centroid offset. Meshes carry no canonical wrist vertex,
    /// so the centroid stands in for the root.
    #[default]
    Root,
    /// Similarity Procrustes: closed-form rotation, uniform scale, and
    /// translation minimizing the summed squared distance.
    Procrustes,
}

impl Alignment {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Alignment::None),
            "root" => Ok(Alignment::Root),
            "procrustes" => Ok(Alignment::Procrustes),
            other => Err(Error::Config(format!(
                "unknown alignment '{other}' (expected none, root, procrustes)"
            ))),
        }
    }
}

/// Per-vertex reconstruction error after alignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VertexError {
    /// Mean Euclidean distance, meters.
    pub mean: f64,
    /// Vertex-level PCK over the same distances; threshold unit = meters.
    pub curve: PckCurve,
}

fn centroid(pts: &[[f64; 3]]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in pts {
        c += Vector3::new(p[0], p[1], p[2]);
    }
    c / pts.len() as f64
}

/// Umeyama similarity alignment of `pred` onto `gt`: returns the transformed
/// prediction points.
fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    let pc = centroid(pred);
    let gc = centroid(gt);
    let mut h = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let pv = Vector3::new(p[0], p[1], p[2]) - pc;
        let gv = Vector3::new(g[0], g[1], g[2]) - gc;
        h += gv * pv.transpose();
        var_p += pv.norm_squared();
    }
    if var_p <= 0.0 {
        return Err(Error::Config("degenerate prediction: all vertices coincide".into()));
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Config("SVD failed on cross-covariance".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Config("SVD failed on cross-covariance".into()))?;
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let scale = (svd.singular_values[0] * d[(0, 0)]
        + svd.singular_values[1] * d[(1, 1)]
        + svd.singular_values[2] * d[(2, 2)])
        / var_p;
    let t = gc - r * pc * scale;
    Ok(pred
        .iter()
        .map(|p| {
            let q = r * Vector3::new(p[0], p[1], p[2]) * scale + t;
            [q[0], q[1], q[2]]
        })
        .collect())
}

/// Mean per-vertex distance plus a vertex PCK curve, after the chosen
/// alignment. Coordinates and `thresholds` are both meters.
pub fn per_vertex_error(
    pred: &Mesh,
    gt: &Mesh,
    align: Alignment,
    thresholds: &[f64],
) -> Result<VertexError> {
    if pred.vertices.len() != gt.vertices.len() {
        return Err(Error::Shape {
            op: "per_vertex_error".into(),
            detail: format!(
                "vertex counts differ: {} vs {}",
                pred.vertices.len(),
                gt.vertices.len()
            ),
        });
    }
    if pred.vertices.is_empty() {
        return Err(Error::Config("meshes have no vertices".into()));
    }
    let aligned: Vec<[f64; 3]> = match align {
        Alignment::None => pred.vertices.clone(),
        Alignment::Root => {
            let shift = centroid(&gt.vertices) - centroid(&pred.vertices);
            pred.vertices
                .iter()
                .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
                .collect()
        }
        Alignment::Procrustes => procrustes_align(&pred.vertices, &gt.vertices)?,
    };
    let errors: Vec<f64> = aligned
        .iter()
        .zip(&gt.vertices)
        .map(|(p, g)| {
            ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt()
        })
        .collect();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let curve = pck_curve(&errors, thresholds)?;
    Ok(VertexError { mean, curve })
}

/// Evenly spaced thresholds from `start` to `end` inclusive.
pub fn threshold_grid(start: f64, end: f64, points: usize) -> Result<Vec<f64>> {
    if points < 2 || !(end > start) || !start.is_finite() || !end.is_finite() {
        return Err(Error::Config(format!(
            "grid needs >= 2 points and end > start, got {points} over [{start}, {end}]"
        )));
    }
    let step = (end - start) / (points - 1) as f64;
    Ok((0..points).map(|i| start + step * i as f64).collect())
}

/// Default 2D keypoint grid: 0 to 30 px, 31 points.
pub fn default_grid_2d() -> Vec<f64> {
    threshold_grid(0.0, 30.0, 31).expect("static grid")
}

/// Default 3D grid: 0 to 50 mm, 51 points.
pub fn default_grid_3d_mm() -> Vec<f64> {
    threshold_grid(0.0, 50.0, 51).expect("static grid")
}
