//! Model bundle persistence: a directory holding manifest.json for the
//! structural data plus one HKT tensor file per blend field.

use super::{HandModelData, JOINT_COUNT, KEYPOINT_COUNT};
use crate::error::{Error, Result};
use crate::tensor::{read_hkt, write_hkt};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    vertices: usize,
    joints: usize,
    shape_coeffs: usize,
    pose_features: usize,
    parents: Vec<i32>,
    fingertip_vertex_ids: [usize; 5],
    keypoint_order: Vec<String>,
    faces: Vec<[usize; 3]>,
}

/// Writes `manifest.json` plus the five tensor files into `dir`, creating it
/// if needed. The model is validated first.
pub fn save_bundle(model: &HandModelData, dir: &Path) -> Result<()> {
    model.validate()?;
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        vertices: model.vertex_count(),
        joints: JOINT_COUNT,
        shape_coeffs: model.shape_basis.shape()[2],
        pose_features: model.pose_basis.shape()[2],
        parents: model.parents.clone(),
        fingertip_vertex_ids: model.fingertip_vertex_ids,
        keypoint_order: model.keypoint_names.clone(),
        faces: model.faces.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    write_hkt(&dir.join("template.hkt"), &model.template)?;
    write_hkt(&dir.join("shape_basis.hkt"), &model.shape_basis)?;
    write_hkt(&dir.join("pose_basis.hkt"), &model.pose_basis)?;
    write_hkt(&dir.join("joint_regressor.hkt"), &model.joint_regressor)?;
    write_hkt(&dir.join("skinning_weights.hkt"), &model.skinning_weights)?;
    Ok(())
}

/// Loads and validates a bundle directory written by [`save_bundle`] or an
/// external converter following the same layout.
pub fn load_bundle(dir: &Path) -> Result<HandModelData> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Format(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&raw)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported bundle version {}",
            manifest.format_version
        )));
    }
    if manifest.joints != JOINT_COUNT {
        return Err(Error::Format(format!(
            "bundle declares {} joints, expected {JOINT_COUNT}",
            manifest.joints
        )));
    }
    if manifest.keypoint_order.len() != KEYPOINT_COUNT {
        return Err(Error::Format(format!(
            "bundle declares {} keypoints, expected {KEYPOINT_COUNT}",
            manifest.keypoint_order.len()
        )));
    }
    let model = HandModelData {
        template: read_hkt(&dir.join("template.hkt"))?,
        faces: manifest.faces,
        shape_basis: read_hkt(&dir.join("shape_basis.hkt"))?,
        pose_basis: read_hkt(&dir.join("pose_basis.hkt"))?,
        joint_regressor: read_hkt(&dir.join("joint_regressor.hkt"))?,
        skinning_weights: read_hkt(&dir.join("skinning_weights.hkt"))?,
        parents: manifest.parents,
        fingertip_vertex_ids: manifest.fingertip_vertex_ids,
        keypoint_names: manifest.keypoint_order,
    };
    if model.vertex_count() != manifest.vertices {
        return Err(Error::Format(format!(
            "manifest declares {} vertices but template holds {}",
            manifest.vertices,
            model.vertex_count()
        )));
    }
    model.validate()?;
    Ok(model)
}
