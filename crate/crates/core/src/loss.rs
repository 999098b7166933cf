//! Training and fitting objectives: backbone map supervision, weakly
//! supervised regressor terms, and the self-supervised consistency pair.
//!
//! Every term is built as a scalar graph node so gradients reach whatever
//! produced the prediction (network weights or hand/camera parameters). The
//! weighted total is itself a node; [`LossReport`] snapshots evaluated term
//! values for logging.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Values};
use crate::tensor::Real;
use serde::{Deserialize, Serialize};

/// Per-term weights of the full objective. All must be nonnegative.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_hm: f64,
    pub w_pof: f64,
    pub w_seg: f64,
    pub w_3d: f64,
    pub w_2d: f64,
    pub w_mask: f64,
    pub w_cons_mask: f64,
    pub w_cons_pose: f64,
    pub w_reg_beta: f64,
    pub w_reg_theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_hm: 1.0,
            w_pof: 1.0,
            w_seg: 1.0,
            w_3d: 1.0,
            w_2d: 10.0,
            w_mask: 1.0,
            w_cons_mask: 0.5,
            w_cons_pose: 0.5,
            w_reg_beta: 1e-3,
            w_reg_theta: 1e-4,
        }
    }
}

impl LossWeights {
    fn fields(&self) -> [(&'static str, f64); 10] {
        [
            ("w_hm", self.w_hm),
            ("w_pof", self.w_pof),
            ("w_seg", self.w_seg),
            ("w_3d", self.w_3d),
            ("w_2d", self.w_2d),
            ("w_mask", self.w_mask),
            ("w_cons_mask", self.w_cons_mask),
            ("w_cons_pose", self.w_cons_pose),
            ("w_reg_beta", self.w_reg_beta),
            ("w_reg_theta", self.w_reg_theta),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.fields() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::NegativeWeight { name: name.into() });
            }
        }
        Ok(())
    }

    /// Weight applied to a named loss term.
    pub fn weight_of(&self, term: &str) -> Option<f64> {
        Some(match term {
            term::HM => self.w_hm,
            term::POF => self.w_pof,
            term::SEG => self.w_seg,
            term::BONE3D => self.w_3d,
            term::KPT2D => self.w_2d,
            term::MASK => self.w_mask,
            term::CONS_MASK => self.w_cons_mask,
            term::CONS_POSE => self.w_cons_pose,
            term::REG_BETA => self.w_reg_beta,
            term::REG_THETA => self.w_reg_theta,
            _ => return None,
        })
    }
}

/// Canonical term names, also used as CSV row labels.
pub mod term {
    pub const HM: &str = "hm";
    pub const POF: &str = "pof";
    pub const SEG: &str = "seg";
    pub const BONE3D: &str = "bone3d";
    pub const KPT2D: &str = "kpt2d";
    pub const MASK: &str = "mask";
    pub const CONS_MASK: &str = "cons_mask";
    pub const CONS_POSE: &str = "cons_pose";
    pub const REG_BETA: &str = "reg_beta";
    pub const REG_THETA: &str = "reg_theta";
    pub const TOTAL: &str = "total";
}

/// Named scalar loss nodes collected while building an objective graph.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    entries: Vec<(&'static str, NodeId)>,
}

impl LossTerms {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &'static str, node: NodeId) {
        self.entries.push((name, node));
    }

    pub fn extend(&mut self, other: LossTerms) {
        self.entries.extend(other.entries);
    }

    pub fn entries(&self) -> &[(&'static str, NodeId)] {
        &self.entries
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.entries.iter().find(|(n, _)| *n == name).map(|&(_, id)| id)
    }
}

/// One MTL stack's map outputs entering the backbone objective.
#[derive(Debug, Clone, Copy)]
pub struct StackPrediction {
    /// `[K,H,W]` heatmaps, already in [0,1].
    pub heatmaps: NodeId,
    /// `[3B,H,W]` part orientation channels.
    pub pof: NodeId,
    /// `[2,H,W]` segmentation logits, channel 1 foreground.
    pub mask_logits: NodeId,
}

/// Map supervision summed over all stacks: heatmap and POF mean squared
/// error plus two-class segmentation cross-entropy.
pub fn backbone_terms<T: Real>(
    g: &mut Graph<T>,
    preds: &[StackPrediction],
    gt_heatmaps: NodeId,
    gt_pof: NodeId,
    gt_mask: NodeId,
) -> Result<LossTerms> {
    if preds.is_empty() {
        return Err(Error::Config("backbone loss needs at least one stack".into()));
    }
    let mut hm = None;
    let mut pof = None;
    let mut seg = None;
    let acc = |slot: &mut Option<NodeId>, g: &mut Graph<T>, node: NodeId| -> Result<()> {
        *slot = Some(match *slot {
            Some(prev) => g.add(prev, node)?,
            None => node,
        });
        Ok(())
    };
    for p in preds {
        let e_hm = g.mse(p.heatmaps, gt_heatmaps)?;
        acc(&mut hm, g, e_hm)?;
        let e_pof = g.mse(p.pof, gt_pof)?;
        acc(&mut pof, g, e_pof)?;
        let e_seg = g.mask_cross_entropy(p.mask_logits, gt_mask)?;
        acc(&mut seg, g, e_seg)?;
    }
    let mut terms = LossTerms::new();
    terms.push(term::HM, hm.unwrap());
    terms.push(term::POF, pof.unwrap());
    terms.push(term::SEG, seg.unwrap());
    Ok(terms)
}

/// Mean squared keypoint error normalized by image width:
/// `mean_k ‖p̂_k − p_k‖² / W`.
pub fn keypoint2d_term<T: Real>(
    g: &mut Graph<T>,
    pred_px: NodeId,
    gt_px: NodeId,
    image_width: f64,
) -> Result<(&'static str, NodeId)> {
    if image_width <= 0.0 {
        return Err(Error::Config(format!("image width must be positive, got {image_width}")));
    }
    // mse averages over 2K coordinates; per-keypoint squared norms need twice
    // that
    let raw = g.mse(pred_px, gt_px)?;
    let scale = g.scalar(T::from_f64(2.0 / image_width));
    Ok((term::KPT2D, g.mul(scale, raw)?))
}

/// Summed squared difference of unit bone directions, `Σ_b ‖d̂_b − d_b‖²`.
pub fn bone_direction_term<T: Real>(
    g: &mut Graph<T>,
    pred_dirs: NodeId,
    gt_dirs: NodeId,
) -> Result<(&'static str, NodeId)> {
    let diff = g.sub(pred_dirs, gt_dirs)?;
    let sq = g.square(diff);
    Ok((term::BONE3D, g.sum_all(sq)))
}

/// Regressor supervision: bone directions, reprojected keypoints, optional
/// rendered-mask alignment, and the β/θ regularizers.
#[allow(clippy::too_many_arguments)]
pub fn regressor_terms<T: Real>(
    g: &mut Graph<T>,
    pred_dirs: NodeId,
    gt_dirs: NodeId,
    pred_px: NodeId,
    gt_px: NodeId,
    image_width: f64,
    mask_pair: Option<(NodeId, NodeId)>,
    beta: NodeId,
    theta: NodeId,
) -> Result<LossTerms> {
    let mut terms = LossTerms::new();
    let (name, node) = bone_direction_term(g, pred_dirs, gt_dirs)?;
    terms.push(name, node);
    let (name, node) = keypoint2d_term(g, pred_px, gt_px, image_width)?;
    terms.push(name, node);
    if let Some((rendered, gt_mask)) = mask_pair {
        terms.push(term::MASK, g.mse(rendered, gt_mask)?);
    }
    let beta_sq = g.square(beta);
    terms.push(term::REG_BETA, g.sum_all(beta_sq));
    let theta_sq = g.square(theta);
    terms.push(term::REG_THETA, g.sum_all(theta_sq));
    Ok(terms)
}

/// Gradient routing for the self-supervised consistency pair.
#[derive(Debug, Clone, Copy, Default)]
pub struct SslDetach {
    /// Stop gradients into the backbone maps.
    pub detach_backbone: bool,
    /// Stop gradients into the regressed-parameter branch.
    pub detach_regressor: bool,
}

/// Self-supervised consistency: rendered mask vs backbone foreground
/// probability, and reprojected keypoints vs heatmap soft-argmax locations.
/// By default gradients flow into both branches.
pub fn ssl_terms<T: Real>(
    g: &mut Graph<T>,
    rendered_mask: NodeId,
    backbone_fg: NodeId,
    proj_px: NodeId,
    decoded_px: NodeId,
    image_width: f64,
    detach: SslDetach,
) -> Result<LossTerms> {
    let hold = |g: &mut Graph<T>, node: NodeId, stop: bool| if stop { g.detach(node) } else { node };
    let rendered = hold(g, rendered_mask, detach.detach_regressor);
    let proj = hold(g, proj_px, detach.detach_regressor);
    let fg = hold(g, backbone_fg, detach.detach_backbone);
    let decoded = hold(g, decoded_px, detach.detach_backbone);
    let mut terms = LossTerms::new();
    terms.push(term::CONS_MASK, g.mse(rendered, fg)?);
    let (_, pose) = keypoint2d_term(g, proj, decoded, image_width)?;
    terms.push(term::CONS_POSE, pose);
    Ok(terms)
}

/// Appends the weighted sum of all terms. Unknown term names are rejected.
pub fn weighted_total<T: Real>(
    g: &mut Graph<T>,
    terms: &LossTerms,
    weights: &LossWeights,
) -> Result<NodeId> {
    weights.validate()?;
    let mut acc = g.scalar(T::ZERO);
    for &(name, node) in terms.entries() {
        let w = weights
            .weight_of(name)
            .ok_or_else(|| Error::Config(format!("no weight defined for loss term '{name}'")))?;
        let w_node = g.scalar(T::from_f64(w));
        let weighted = g.mul(w_node, node)?;
        acc = g.add(acc, weighted)?;
    }
    Ok(acc)
}

/// Evaluated loss values for logging. The total is the weighted sum of the
/// recorded terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl LossReport {
    /// Snapshots term values from an evaluated graph.
    pub fn from_values<T: Real>(
        values: &Values<T>,
        terms: &LossTerms,
        weights: &LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        let mut rows = Vec::with_capacity(terms.entries().len());
        let mut total = 0.0f64;
        for &(name, node) in terms.entries() {
            let v = values.value(node).data()[0].to_f64();
            let w = weights
                .weight_of(name)
                .ok_or_else(|| Error::Config(format!("no weight defined for loss term '{name}'")))?;
            total += w * v;
            rows.push((name.to_string(), v));
        }
        Ok(LossReport { terms: rows, total })
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Confirms the recorded total against an independent weighted sum.
    pub fn verify(&self, weights: &LossWeights) -> Result<()> {
        let mut sum = 0.0f64;
        for (name, v) in &self.terms {
            let w = weights
                .weight_of(name)
                .ok_or_else(|| Error::Config(format!("no weight defined for loss term '{name}'")))?;
            sum += w * v;
        }
        if (sum - self.total).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "loss total {} disagrees with weighted sum {sum}",
                self.total
            )));
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "step,term,value"
    }

    /// One CSV row per term plus the total, labeled with the step index.
    pub fn csv_rows(&self, step: usize) -> String {
        let mut out = String::new();
        for (name, v) in &self.terms {
            out.push_str(&format!("{step},{name},{v}\n"));
        }
        out.push_str(&format!("{step},{},{}\n", term::TOTAL, self.total));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{project, project_graph, CameraIntrinsics, RigidPose};
    use crate::encodings::{render_heatmaps, soft_argmax_graph, SkeletonHierarchy};
    use crate::graph::grad_check;
    use crate::hand::{
        bone_directions, bone_directions_graph, build_skin_graph, keypoints21_graph,
        make_toy_model, skin_mesh, HandParams,
    };
    use crate::render::{render_silhouette, silhouette_graph, SoftRenderConfig};
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_validate() {
        LossWeights::default().validate().unwrap();
        let bad = LossWeights { w_2d: -1.0, ..LossWeights::default() };
        match bad.validate().unwrap_err() {
            Error::NegativeWeight { name } => assert_eq!(name, "w_2d"),
            e => panic!("unexpected error {e}"),
        }
    }

    fn random_maps(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::new(&[k, h, w], (0..k * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn backbone_matches_gt_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt_hm = random_maps(&mut rng, 4, 8, 8);
        let gt_pof = random_maps(&mut rng, 6, 8, 8);
        let gt_mask = Tensor::new(
            &[8, 8],
            (0..64).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect::<Vec<f64>>(),
        )
        .unwrap();
        // logits with margin 20 on the correct class
        let logits: Vec<f64> = {
            let mut l0 = Vec::new();
            let mut l1 = Vec::new();
            for &m in gt_mask.data() {
                l0.push(if m > 0.5 { 0.0 } else { 20.0 });
                l1.push(if m > 0.5 { 20.0 } else { 0.0 });
            }
            l0.into_iter().chain(l1).collect()
        };
        let mut g: Graph<f64> = Graph::new();
        let hm_gt = g.constant(gt_hm.clone());
        let pof_gt = g.constant(gt_pof.clone());
        let mask_gt = g.constant(gt_mask.clone());
        let stack = StackPrediction {
            heatmaps: g.constant(gt_hm),
            pof: g.constant(gt_pof),
            mask_logits: g.constant(Tensor::new(&[2, 8, 8], logits).unwrap()),
        };
        let terms = backbone_terms(&mut g, &[stack, stack], hm_gt, pof_gt, mask_gt).unwrap();
        let mut values = Values::new(&g);
        g.forward(&mut values).unwrap();
        let report = LossReport::from_values(&values, &terms, &LossWeights::default()).unwrap();
        for (name, v) in &report.terms {
            assert!(*v < 1e-6, "term {name} = {v}");
        }
    }

    #[test]
    fn zero_heatmap_prediction_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt_hm = random_maps(&mut rng, 3, 6, 6);
        let expected = gt_hm.data().iter().map(|v| v * v).sum::<f64>() / gt_hm.numel() as f64;
        let mut g: Graph<f64> = Graph::new();
        let hm_gt = g.constant(gt_hm);
        let pof_gt = g.constant(Tensor::zeros(&[3, 6, 6]));
        let mask_gt = g.constant(Tensor::zeros(&[6, 6]));
        let stack = StackPrediction {
            heatmaps: g.constant(Tensor::zeros(&[3, 6, 6])),
            pof: g.constant(Tensor::zeros(&[3, 6, 6])),
            mask_logits: g.constant(Tensor::zeros(&[2, 6, 6])),
        };
        let terms = backbone_terms(&mut g, &[stack], hm_gt, pof_gt, mask_gt).unwrap();
        let mut values = Values::new(&g);
        g.forward(&mut values).unwrap();
        let report = LossReport::from_values(&values, &terms, &LossWeights::default()).unwrap();
        assert!((report.term(term::HM).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g: Graph<f64> = Graph::new();
        let hm = g.param("hm", &[2, 5, 5]);
        let pof = g.param("pof", &[3, 5, 5]);
        let logits = g.param("logits", &[2, 5, 5]);
        let hm_gt = g.constant(random_maps(&mut rng, 2, 5, 5));
        let pof_gt = g.constant(random_maps(&mut rng, 3, 5, 5));
        let mask_gt = g.constant(Tensor::new(
            &[5, 5],
            (0..25).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect::<Vec<f64>>(),
        )
        .unwrap());
        let stack = StackPrediction { heatmaps: hm, pof, mask_logits: logits };
        let terms = backbone_terms(&mut g, &[stack], hm_gt, pof_gt, mask_gt).unwrap();
        let total = weighted_total(&mut g, &terms, &LossWeights::default()).unwrap();
        let mut values = Values::new(&g);
        values.bind(&g, hm, random_maps(&mut rng, 2, 5, 5)).unwrap();
        values.bind(&g, pof, random_maps(&mut rng, 3, 5, 5)).unwrap();
        values
            .bind(
                &g,
                logits,
                Tensor::new(&[2, 5, 5], (0..50).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .unwrap(),
            )
            .unwrap();
        g.forward(&mut values).unwrap();
        let report = grad_check(&g, &mut values, total, &[], 1e-6, 1e-5).unwrap();
        assert!(report.passed(), "backbone gradients: {:?}", report.worst());
    }

    /// Builds the full regressor objective graph over leaf parameters and
    /// ground truth generated from a known state. With `at_truth` the leaves
    /// are bound to the generating state itself; otherwise to a perturbed
    /// state so gradients are far from zero.
    fn regressor_fixture(at_truth: bool) -> (Graph<f64>, Values<f64>, LossTerms, NodeId) {
        let model = make_toy_model(9);
        let skeleton = SkeletonHierarchy::hand();
        let mut truth = HandParams::zero();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for row in &mut truth.theta {
            for v in row.iter_mut() {
                *v = rng.gen_range(-0.25..0.25);
            }
        }
        for v in &mut truth.beta {
            *v = rng.gen_range(-0.5..0.5);
        }
        let pose = RigidPose { rotation: [0.05, -0.1, 0.08], translation: [0.0, -0.05, 0.5] };
        let (dims, f) = (24usize, 55.0);
        let intr = CameraIntrinsics::from_image(dims, dims, f).unwrap();
        let sharpness = 0.8;

        // ground truth from the forward model
        let (mesh, kpts3d) = skin_mesh(&model, &truth).unwrap();
        let gt_dirs = bone_directions(&kpts3d, &skeleton).unwrap();
        let gt_px = project(&kpts3d, &pose, &intr).unwrap();
        let gt_mask = render_silhouette(
            &mesh,
            &pose,
            &intr,
            dims,
            dims,
            &SoftRenderConfig::soft(sharpness),
        )
        .unwrap();

        // graph over the same state as leaves
        let mut g: Graph<f64> = Graph::new();
        let beta = g.param("beta", &[10]);
        let theta = g.param("theta", &[15, 3]);
        let rotation = g.param("rotation", &[3]);
        let translation = g.param("translation", &[3]);
        let focal = g.param("focal", &[]);
        let skin = build_skin_graph(&mut g, &model, beta, theta).unwrap();
        let kpts = keypoints21_graph(&mut g, &model, &skin).unwrap();
        let dirs = bone_directions_graph(&mut g, kpts, &skeleton).unwrap();
        let proj = project_graph(&mut g, kpts, rotation, translation, focal, intr.p0, intr.q0)
            .unwrap();
        let vproj =
            project_graph(&mut g, skin.vertices, rotation, translation, focal, intr.p0, intr.q0)
                .unwrap();
        let rendered =
            silhouette_graph(&mut g, vproj.pixels, &mesh.faces, dims, dims, sharpness).unwrap();

        let gt_dirs_node = {
            let flat: Vec<f64> = gt_dirs.iter().flatten().copied().collect();
            g.constant(Tensor::new(&[20, 3], flat).unwrap())
        };
        let gt_px_node = {
            let flat: Vec<f64> = gt_px.iter().flatten().copied().collect();
            g.constant(Tensor::new(&[21, 2], flat).unwrap())
        };
        let gt_mask_node = g.constant(gt_mask.data.clone());
        let terms = regressor_terms(
            &mut g,
            dirs,
            gt_dirs_node,
            proj.pixels,
            gt_px_node,
            dims as f64,
            Some((rendered, gt_mask_node)),
            beta,
            theta,
        )
        .unwrap();
        let total = weighted_total(&mut g, &terms, &LossWeights::default()).unwrap();

        let mut state = truth.clone();
        let mut cam_rot = pose.rotation;
        let mut cam_t = pose.translation;
        let mut focal_v = f;
        if !at_truth {
            for row in &mut state.theta {
                for v in row.iter_mut() {
                    *v += rng.gen_range(-0.1..0.1);
                }
            }
            for v in &mut state.beta {
                *v += rng.gen_range(-0.2..0.2);
            }
            for v in &mut cam_rot {
                *v += rng.gen_range(-0.05..0.05);
            }
            cam_t = [0.012, -0.06, 0.52];
            focal_v = 58.0;
        }
        let mut values = Values::new(&g);
        values.bind(&g, beta, state.beta_tensor()).unwrap();
        values.bind(&g, theta, state.theta_tensor()).unwrap();
        values.bind(&g, rotation, Tensor::from_vec(cam_rot.to_vec())).unwrap();
        values.bind(&g, translation, Tensor::from_vec(cam_t.to_vec())).unwrap();
        values.bind(&g, focal, Tensor::scalar(focal_v)).unwrap();
        g.forward(&mut values).unwrap();
        (g, values, terms, total)
    }

    #[test]
    fn regressor_self_consistency_is_near_zero() {
        let (_, values, terms, _) = regressor_fixture(true);
        let report = LossReport::from_values(&values, &terms, &LossWeights::default()).unwrap();
        for name in [term::BONE3D, term::KPT2D, term::MASK] {
            let v = report.term(name).unwrap();
            assert!(v < 1e-4, "term {name} = {v}");
        }
        // regularizers report the actual parameter norms
        assert!(report.term(term::REG_THETA).unwrap() > 0.0);
        report.verify(&LossWeights::default()).unwrap();
    }

    #[test]
    fn regressor_gradients_match_finite_differences() {
        let (g, mut values, _, total) = regressor_fixture(false);
        let report = grad_check(&g, &mut values, total, &[], 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "regressor gradients: {:?}", report.worst());
    }

    #[test]
    fn flipped_bone_contributes_exactly_four() {
        let mut dirs = vec![[0.0, 0.0, 1.0]; 20];
        dirs[3] = [1.0, 0.0, 0.0];
        let mut flipped = dirs.clone();
        flipped[3] = [-1.0, 0.0, 0.0];
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::new(&[20, 3], dirs.iter().flatten().copied().collect()).unwrap());
        let b = g
            .constant(Tensor::new(&[20, 3], flipped.iter().flatten().copied().collect()).unwrap());
        let (_, node) = bone_direction_term(&mut g, a, b).unwrap();
        let mut values = Values::new(&g);
        g.forward(&mut values).unwrap();
        assert_eq!(values.value(node).data()[0], 4.0);
    }

    #[test]
    fn bone_term_is_translation_invariant() {
        // dyadic coordinates keep every subtraction exact, so the assertion
        // can be bitwise
        let skeleton = SkeletonHierarchy::hand();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let kpts: Vec<[f64; 3]> = (0..21)
            .map(|_| {
                [
                    rng.gen_range(-32i32..32) as f64 * 0.125,
                    rng.gen_range(-32i32..32) as f64 * 0.125,
                    rng.gen_range(-32i32..32) as f64 * 0.125 + 16.0,
                ]
            })
            .collect();
        let shifted: Vec<[f64; 3]> =
            kpts.iter().map(|p| [p[0] + 0.25, p[1] - 0.5, p[2] + 1.0]).collect();
        let a = bone_directions(&kpts, &skeleton).unwrap();
        let b = bone_directions(&shifted, &skeleton).unwrap();
        for (da, db) in a.iter().zip(&b) {
            for k in 0..3 {
                assert_eq!(da[k].to_bits(), db[k].to_bits());
            }
        }
    }

    #[test]
    fn ssl_self_consistency_is_near_zero() {
        let model = make_toy_model(13);
        let (mesh, kpts3d) = skin_mesh(&model, &HandParams::zero()).unwrap();
        let pose = RigidPose { rotation: [0.0; 3], translation: [0.0, -0.05, 0.5] };
        let intr = CameraIntrinsics::from_image(64, 64, 150.0).unwrap();
        let px = project(&kpts3d, &pose, &intr).unwrap();
        let rendered =
            render_silhouette(&mesh, &pose, &intr, 64, 64, &SoftRenderConfig::soft(0.5)).unwrap();
        let hm = render_heatmaps(&px, 64, 64, 2.0).unwrap();

        let mut g: Graph<f64> = Graph::new();
        let rendered_node = g.constant(rendered.data.clone());
        let fg_node = g.constant(rendered.data.clone());
        let px_node = {
            let flat: Vec<f64> = px.iter().flatten().copied().collect();
            g.constant(Tensor::new(&[21, 2], flat).unwrap())
        };
        let hm_node = g.constant(hm.data.clone());
        let decoded = soft_argmax_graph(&mut g, hm_node).unwrap();
        let terms = ssl_terms(
            &mut g,
            rendered_node,
            fg_node,
            px_node,
            decoded,
            64.0,
            SslDetach::default(),
        )
        .unwrap();
        let mut values = Values::new(&g);
        g.forward(&mut values).unwrap();
        let report = LossReport::from_values(&values, &terms, &LossWeights::default()).unwrap();
        assert_eq!(report.term(term::CONS_MASK).unwrap(), 0.0);
        let pose_term = report.term(term::CONS_POSE).unwrap();
        assert!(pose_term < 1e-4, "pose consistency {pose_term}");
    }

    #[test]
    fn detach_backbone_zeroes_backbone_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g: Graph<f64> = Graph::new();
        let rendered = g.param("rendered", &[6, 6]);
        let fg = g.param("fg", &[6, 6]);
        let proj = g.param("proj", &[4, 2]);
        let decoded = g.param("decoded", &[4, 2]);
        let terms = ssl_terms(
            &mut g,
            rendered,
            fg,
            proj,
            decoded,
            6.0,
            SslDetach { detach_backbone: true, detach_regressor: false },
        )
        .unwrap();
        let total = weighted_total(&mut g, &terms, &LossWeights::default()).unwrap();
        let mut values = Values::new(&g);
        let mut rand_t = |shape: &[usize]| {
            Tensor::new(
                shape,
                (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap()
        };
        values.bind(&g, rendered, rand_t(&[6, 6])).unwrap();
        values.bind(&g, fg, rand_t(&[6, 6])).unwrap();
        values.bind(&g, proj, rand_t(&[4, 2])).unwrap();
        values.bind(&g, decoded, rand_t(&[4, 2])).unwrap();
        g.forward(&mut values).unwrap();
        let mut grads = crate::graph::GradStore::new(&g);
        g.backward(&values, total, &mut grads).unwrap();
        for id in [fg, decoded] {
            let zero =
                grads.get(id).map(|t| t.data().iter().all(|&v| v == 0.0)).unwrap_or(true);
            assert!(zero, "backbone side leaked gradient");
        }
        for id in [rendered, proj] {
            let nonzero =
                grads.get(id).map(|t| t.data().iter().any(|&v| v != 0.0)).unwrap_or(false);
            assert!(nonzero, "regressor side lost gradient");
        }
    }

    #[test]
    fn total_identities() {
        let mut g: Graph<f64> = Graph::new();
        let t1 = g.scalar(0.3);
        let t2 = g.scalar(1.7);
        let mut terms = LossTerms::new();
        terms.push(term::HM, t1);
        terms.push(term::SEG, t2);

        let zero_w = LossWeights {
            w_hm: 0.0,
            w_pof: 0.0,
            w_seg: 0.0,
            w_3d: 0.0,
            w_2d: 0.0,
            w_mask: 0.0,
            w_cons_mask: 0.0,
            w_cons_pose: 0.0,
            w_reg_beta: 0.0,
            w_reg_theta: 0.0,
        };
        let total0 = weighted_total(&mut g, &terms, &zero_w).unwrap();
        let single = LossWeights { w_hm: 2.0, ..zero_w };
        let total1 = weighted_total(&mut g, &terms, &single).unwrap();
        let totald = weighted_total(&mut g, &terms, &LossWeights::default()).unwrap();
        let mut values = Values::new(&g);
        g.forward(&mut values).unwrap();
        assert_eq!(values.value(total0).data()[0], 0.0);
        assert!((values.value(total1).data()[0] - 0.6).abs() < 1e-12);
        let report = LossReport::from_values(&values, &terms, &LossWeights::default()).unwrap();
        assert!((values.value(totald).data()[0] - report.total).abs() < 1e-6);
        report.verify(&LossWeights::default()).unwrap();
    }

    #[test]
    fn csv_rows_are_labelled() {
        let report = LossReport {
            terms: vec![("hm".into(), 0.25), ("seg".into(), 0.5)],
            total: 0.75,
        };
        let rows = report.csv_rows(3);
        assert!(rows.contains("3,hm,0.25"));
        assert!(rows.contains("3,seg,0.5"));
        assert!(rows.contains("3,total,0.75"));
        assert_eq!(LossReport::csv_header(), "step,term,value");
    }
}
