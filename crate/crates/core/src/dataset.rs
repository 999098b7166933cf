//! Synthetic dataset records: posed toy hands rendered as silhouette-over-
//! noise composites, with every observation the toolkit consumes written
//! alongside the generating parameters.
//!
//! A record directory holds `params.json` (the generating state), derived
//! keypoints (`kpts2d.json`, `kpts3d.json`, camera frame), and HKT tensors
//! for heatmaps, orientation fields, the map-resolution mask, and the image.
//! Everything regenerates bit-identically from the dataset seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{project, CameraIntrinsics, RigidPose};
use crate::encodings::{
    encode_pof, render_heatmaps, HeatmapStack, MaskImage, PofField, SkeletonHierarchy,
};
use crate::error::{Error, Result};
use crate::fit::{FitObservations, FitState};
use crate::hand::{rodrigues, skin_mesh, HandModelData, HandParams, ARTICULATED_COUNT};
use crate::net::{TrainSample, TrainTarget};
use crate::render::{render_silhouette, SoftRenderConfig};
use crate::tensor::{read_hkt, write_hkt, Tensor};

const MANIFEST_NAME: &str = "dataset_manifest.json";
const MANIFEST_FORMAT: &str = "handkit-dataset";
const MANIFEST_VERSION: u32 = 1;

/// Foreground intensity of the composite image; the background is noise
/// below it.
const FOREGROUND_LEVEL: f64 = 0.85;
const BACKGROUND_CEIL: f64 = 0.3;

/// How many pose re-draws a record gets before synthesis gives up. A draw is
/// accepted only when the whole silhouette fits the frame and the encoded
/// orientation field decodes back at map resolution, so every emitted record
/// is usable downstream by construction.
const DRAW_TRIES: usize = 100;

/// Sampling ranges for the generating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRanges {
    /// Shape coefficients are uniform in [-beta, beta].
    pub beta: f64,
    /// Per-joint articulation limits [lo, hi], applied to each axis-angle
    /// component; must have one entry per articulated joint.
    pub theta: Vec<[f64; 2]>,
    /// Global rotation components are uniform in [-rotation, rotation].
    pub rotation: f64,
    /// In-plane translation components are uniform in [-xy, xy] meters.
    pub translation_xy: f64,
    /// Depth is uniform in [depth[0], depth[1]] meters.
    pub depth: [f64; 2],
    /// Focal length is uniform in this multiple of the image width.
    pub focal_factor: [f64; 2],
}

impl Default for SynthRanges {
    fn default() -> Self {
        SynthRanges {
            beta: 1.0,
            theta: vec![[-0.3, 0.3]; ARTICULATED_COUNT],
            rotation: 0.2,
            translation_xy: 0.02,
            depth: [0.45, 0.6],
            focal_factor: [1.6, 2.0],
        }
    }
}

impl SynthRanges {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta range must be >= 0, got {}", self.beta)));
        }
        if self.theta.len() != ARTICULATED_COUNT {
            return Err(Error::Config(format!(
                "theta limits need {ARTICULATED_COUNT} entries, got {}",
                self.theta.len()
            )));
        }
        for (j, [lo, hi]) in self.theta.iter().enumerate() {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("joint {j} limits [{lo}, {hi}] are invalid")));
            }
        }
        if !(self.rotation >= 0.0) || !(self.translation_xy >= 0.0) {
            return Err(Error::Config("rotation and translation ranges must be >= 0".into()));
        }
        if !(self.depth[0] > 0.0) || !(self.depth[1] >= self.depth[0]) {
            return Err(Error::Config(format!(
                "depth range [{}, {}] must be positive and ordered",
                self.depth[0], self.depth[1]
            )));
        }
        if !(self.focal_factor[0] > 0.0) || !(self.focal_factor[1] >= self.focal_factor[0]) {
            return Err(Error::Config("focal factor range must be positive and ordered".into()));
        }
        Ok(())
    }
}

/// Record geometry plus the encoding knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub map_width: usize,
    pub map_height: usize,
    /// Heatmap Gaussian width in map pixels.
    pub sigma: f64,
    /// POF support half-width in map pixels.
    pub pof_support_width: f64,
    pub ranges: SynthRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_width: 128,
            image_height: 128,
            map_width: 32,
            map_height: 32,
            sigma: 1.5,
            pof_support_width: 1.0,
            ranges: SynthRanges::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("image_width", self.image_width),
            ("image_height", self.image_height),
            ("map_width", self.map_width),
            ("map_height", self.map_height),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.map_width > self.image_width || self.map_height > self.image_height {
            return Err(Error::Config("map resolution must not exceed the image".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.pof_support_width > 0.0) {
            return Err(Error::Config("pof_support_width must be positive".into()));
        }
        self.ranges.validate()
    }
}

/// One fully materialized record.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub name: String,
    /// The generating parameters.
    pub state: FitState,
    /// Keypoints in image pixels.
    pub kpts2d: Vec<[f64; 2]>,
    /// Keypoints in the camera frame, meters.
    pub kpts3d: Vec<[f64; 3]>,
    /// `[3,H,W]` composite in [0,1].
    pub image: Tensor<f64>,
    /// `[21,mh,mw]` at map resolution.
    pub heatmaps: HeatmapStack,
    /// `[60,mh,mw]` at map resolution.
    pub pof: PofField,
    /// `[mh,mw]` hard coverage at map resolution.
    pub mask: MaskImage,
}

impl DatasetRecord {
    /// The observation subset a fitter is allowed to see: 2D keypoints, the
    /// mask, and bone directions via the orientation field. The generating
    /// parameters stay out.
    pub fn observations(&self) -> FitObservations {
        FitObservations {
            image_width: self.image.shape()[2],
            image_height: self.image.shape()[1],
            kpts2d: self.kpts2d.clone(),
            mask: self.mask.clone(),
            bone_dirs: None,
            pof: Some(self.pof.clone()),
        }
    }

    /// Camera-frame bone directions derived from the stored 3D keypoints.
    pub fn bone_dirs(&self, skeleton: &SkeletonHierarchy) -> Result<Vec<[f64; 3]>> {
        crate::hand::bone_directions(&self.kpts3d, skeleton)
    }

    /// The record as a training sample; `supervised: false` strips the
    /// targets so only consistency terms apply.
    pub fn train_sample(&self, supervised: bool, skeleton: &SkeletonHierarchy) -> Result<TrainSample> {
        if !supervised {
            return Ok(TrainSample { image: self.image.clone(), gt: None });
        }
        let dirs = self.bone_dirs(skeleton)?;
        let gt = TrainTarget {
            heatmaps: self.heatmaps.data.clone(),
            pof: self.pof.data.clone(),
            mask: self.mask.data.clone(),
            kpts2d: Tensor::new(
                &[self.kpts2d.len(), 2],
                self.kpts2d.iter().flatten().copied().collect(),
            )?,
            bone_dirs: Tensor::new(&[dirs.len(), 3], dirs.iter().flatten().copied().collect())?,
        };
        Ok(TrainSample { image: self.image.clone(), gt: Some(gt) })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
    pub records: Vec<String>,
}

fn rotate(r: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

fn sample_state(rng: &mut ChaCha8Rng, config: &DatasetConfig) -> FitState {
    let r = &config.ranges;
    let mut params = HandParams::zero();
    for v in &mut params.beta {
        *v = if r.beta > 0.0 { rng.gen_range(-r.beta..r.beta) } else { 0.0 };
    }
    for (row, [lo, hi]) in params.theta.iter_mut().zip(&r.theta) {
        for v in row.iter_mut() {
            *v = if lo < hi { rng.gen_range(*lo..*hi) } else { *lo };
        }
    }
    let rot = r.rotation;
    FitState {
        params,
        rotation: if rot > 0.0 {
            [
                rng.gen_range(-rot..rot),
                rng.gen_range(-rot..rot),
                rng.gen_range(-rot..rot),
            ]
        } else {
            [0.0; 3]
        },
        translation: [
            if r.translation_xy > 0.0 {
                rng.gen_range(-r.translation_xy..r.translation_xy)
            } else {
                0.0
            },
            if r.translation_xy > 0.0 {
                rng.gen_range(-r.translation_xy..r.translation_xy)
            } else {
                0.0
            },
            rng.gen_range(r.depth[0]..=r.depth[1]),
        ],
        focal: rng.gen_range(r.focal_factor[0]..=r.focal_factor[1]) * config.image_width as f64,
    }
}

fn fully_in_frame(points: &[[f64; 2]], width: usize, height: usize) -> bool {
    points.iter().all(|p| {
        p[0] >= 0.0 && p[0] <= (width - 1) as f64 && p[1] >= 0.0 && p[1] <= (height - 1) as f64
    })
}

/// One accepted pose draw with everything derived from it.
struct DrawProducts {
    state: FitState,
    mesh: crate::hand::Mesh,
    kpts3d: Vec<[f64; 3]>,
    kpts2d: Vec<[f64; 2]>,
    map_kpts: Vec<[f64; 2]>,
    pof: PofField,
}

/// Derives a draw's artifacts, or `None` when the draw fails an acceptance
/// check: part of the silhouette leaves the frame, or some bone's
/// orientation field would not decode at map resolution.
fn try_draw(
    model: &HandModelData,
    config: &DatasetConfig,
    skeleton: &SkeletonHierarchy,
    state: FitState,
) -> Result<Option<DrawProducts>> {
    let (w, h) = (config.image_width, config.image_height);
    let (mw, mh) = (config.map_width, config.map_height);
    let (mesh, kpts_hand) = skin_mesh(model, &state.params)?;
    let pose = RigidPose { rotation: state.rotation, translation: state.translation };
    let intr = CameraIntrinsics::from_image(w, h, state.focal)?;
    let Ok(px) = project(&mesh.vertices, &pose, &intr) else { return Ok(None) };
    if !fully_in_frame(&px, w, h) {
        return Ok(None);
    }
    let rot = rodrigues(state.rotation);
    let kpts3d: Vec<[f64; 3]> = kpts_hand
        .iter()
        .map(|&k| {
            let r = rotate(&rot, k);
            [
                r[0] + state.translation[0],
                r[1] + state.translation[1],
                r[2] + state.translation[2],
            ]
        })
        .collect();
    let kpts2d = project(&kpts_hand, &pose, &intr)?;
    let sx = mw as f64 / w as f64;
    let sy = mh as f64 / h as f64;
    let map_kpts: Vec<[f64; 2]> = kpts2d
        .iter()
        .map(|p| [(p[0] + 0.5) * sx - 0.5, (p[1] + 0.5) * sy - 0.5])
        .collect();
    let dirs_cam = crate::hand::bone_directions(&kpts3d, skeleton)?;
    let Ok(pof) = encode_pof(&map_kpts, &dirs_cam, skeleton, mw, mh, config.pof_support_width)
    else {
        return Ok(None);
    };
    if crate::encodings::decode_pof(&pof, &map_kpts, skeleton).is_err() {
        return Ok(None);
    }
    Ok(Some(DrawProducts { state, mesh, kpts3d, kpts2d, map_kpts, pof }))
}

/// Generates one record from its seed. Pure aside from the RNG; no files are
/// touched.
pub fn generate_record(
    model: &HandModelData,
    config: &DatasetConfig,
    name: &str,
    record_seed: u64,
) -> Result<DatasetRecord> {
    config.validate()?;
    let skeleton = SkeletonHierarchy::hand();
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed);
    let (w, h) = (config.image_width, config.image_height);
    let (mw, mh) = (config.map_width, config.map_height);

    let mut products = None;
    for tries_left in (0..DRAW_TRIES).rev() {
        let state = sample_state(&mut rng, config);
        if let Some(p) = try_draw(model, config, &skeleton, state)? {
            products = Some(p);
            break;
        }
        if tries_left == 0 {
            return Err(Error::Dataset(format!(
                "record '{name}': no acceptable pose in {DRAW_TRIES} draws; ranges too wide \
                 for the configured geometry"
            )));
        }
    }
    let DrawProducts { state, mesh, kpts3d, kpts2d, map_kpts, pof } =
        products.expect("loop either sets products or returns");

    let pose = RigidPose { rotation: state.rotation, translation: state.translation };
    let intr = CameraIntrinsics::from_image(w, h, state.focal)?;
    let sx = mw as f64 / w as f64;
    let heatmaps = render_heatmaps(&map_kpts, mw, mh, config.sigma)?;
    let mask = render_silhouette(&mesh, &pose, &intr.scaled(sx), mw, mh, &SoftRenderConfig::hard())?;

    let full_mask = render_silhouette(&mesh, &pose, &intr, w, h, &SoftRenderConfig::hard())?;
    let mut image = Tensor::zeros(&[3, h, w]);
    for i in 0..h * w {
        let fg = full_mask.data.data()[i] > 0.5;
        for c in 0..3 {
            image.data_mut()[c * h * w + i] =
                if fg { FOREGROUND_LEVEL } else { rng.gen_range(0.0..BACKGROUND_CEIL) };
        }
    }

    Ok(DatasetRecord {
        name: name.to_string(),
        state,
        kpts2d,
        kpts3d,
        image,
        heatmaps,
        pof,
        mask,
    })
}

/// Writes one record directory under `root`.
pub fn write_record(root: &Path, record: &DatasetRecord) -> Result<()> {
    let dir = root.join(&record.name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("params.json"), serde_json::to_string_pretty(&record.state)?)?;
    fs::write(dir.join("kpts2d.json"), serde_json::to_string_pretty(&record.kpts2d)?)?;
    fs::write(dir.join("kpts3d.json"), serde_json::to_string_pretty(&record.kpts3d)?)?;
    write_hkt(&dir.join("heatmaps.hkt"), &record.heatmaps.data)?;
    write_hkt(&dir.join("pof.hkt"), &record.pof.data)?;
    write_hkt(&dir.join("mask.hkt"), &record.mask.data)?;
    write_hkt(&dir.join("image.hkt"), &record.image)?;
    Ok(())
}

/// Reads one record directory back.
pub fn read_record(root: &Path, name: &str, config: &DatasetConfig) -> Result<DatasetRecord> {
    let dir = root.join(name);
    let state: FitState = serde_json::from_str(&fs::read_to_string(dir.join("params.json"))?)?;
    state.validate()?;
    let kpts2d: Vec<[f64; 2]> = serde_json::from_str(&fs::read_to_string(dir.join("kpts2d.json"))?)?;
    let kpts3d: Vec<[f64; 3]> = serde_json::from_str(&fs::read_to_string(dir.join("kpts3d.json"))?)?;
    let heatmaps: Tensor<f64> = read_hkt(&dir.join("heatmaps.hkt"))?;
    let pof: Tensor<f64> = read_hkt(&dir.join("pof.hkt"))?;
    let mask: Tensor<f64> = read_hkt(&dir.join("mask.hkt"))?;
    let image: Tensor<f64> = read_hkt(&dir.join("image.hkt"))?;
    let (mh, mw) = (config.map_height, config.map_width);
    let expect = |t: &Tensor<f64>, shape: &[usize], what: &str| -> Result<()> {
        if t.shape() != shape {
            return Err(Error::Dataset(format!(
                "record '{name}': {what} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(())
    };
    expect(&heatmaps, &[kpts2d.len(), mh, mw], "heatmaps")?;
    expect(&mask, &[mh, mw], "mask")?;
    expect(&image, &[3, config.image_height, config.image_width], "image")?;
    if pof.shape().len() != 3 || pof.shape()[0] % 3 != 0 {
        return Err(Error::Dataset(format!(
            "record '{name}': pof has shape {:?}",
            pof.shape()
        )));
    }
    Ok(DatasetRecord {
        name: name.to_string(),
        state,
        kpts2d,
        kpts3d,
        image,
        heatmaps: HeatmapStack { data: heatmaps, sigma: config.sigma },
        pof: PofField { data: pof, support_width: config.pof_support_width },
        mask: MaskImage::new(mask)?,
    })
}

/// Synthesizes `count` records under `dir` and writes the manifest. Records
/// generate in parallel; their seeds are drawn up front from the master
/// seed, so the output is deterministic regardless of scheduling.
pub fn synth_dataset(
    dir: &Path,
    model: &HandModelData,
    config: &DatasetConfig,
    count: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    config.validate()?;
    model.validate()?;
    fs::create_dir_all(dir)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let jobs: Vec<(String, u64)> =
        (0..count).map(|i| (format!("rec_{i:05}"), master.gen::<u64>())).collect();
    jobs.par_iter().try_for_each(|(name, record_seed)| -> Result<()> {
        let record = generate_record(model, config, name, *record_seed)?;
        write_record(dir, &record)
    })?;
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        seed,
        config: config.clone(),
        records: jobs.into_iter().map(|(n, _)| n).collect(),
    };
    fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads and sanity-checks a dataset manifest.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    let raw = fs::read_to_string(&path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&raw)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Dataset(format!(
            "expected a '{MANIFEST_FORMAT}' manifest, got '{}'",
            manifest.format
        )));
    }
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!("unsupported dataset version {}", manifest.version)));
    }
    manifest.config.validate()?;
    Ok(manifest)
}

/// Record directories listed by a manifest, in manifest order.
pub fn record_paths(dir: &Path, manifest: &DatasetManifest) -> Vec<PathBuf> {
    manifest.records.iter().map(|n| dir.join(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encodings::soft_argmax;
    use crate::hand::make_toy_model;

    // Maps stay at 32x32 so map-space bone lengths match the default
    // geometry; smaller maps starve short bones of orientation-field pixels
    // and synthesis would reject nearly every draw.
    fn small_config() -> DatasetConfig {
        DatasetConfig {
            image_width: 64,
            image_height: 64,
            ..DatasetConfig::default()
        }
    }

    fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    files.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
        files.sort_by(|a, b| a.0.cmp(&b.0));
        files
    }

    #[test]
    fn empty_dataset_still_writes_a_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let model = make_toy_model(0);
        let manifest = synth_dataset(dir.path(), &model, &small_config(), 0, 7).unwrap();
        assert!(manifest.records.is_empty());
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.records.len(), 0);
        assert_eq!(loaded.seed, 7);
    }

    #[test]
    fn same_seed_gives_byte_identical_directories() {
        let model = make_toy_model(0);
        let config = small_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_dataset(a.path(), &model, &config, 3, 99).unwrap();
        synth_dataset(b.path(), &model, &config, 3, 99).unwrap();
        let fa = dir_bytes(a.path());
        let fb = dir_bytes(b.path());
        assert_eq!(fa.len(), fb.len());
        for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
            assert_eq!(na, nb);
            assert_eq!(ba, bb, "{na} differs between identically seeded runs");
        }
    }

    #[test]
    fn different_seeds_differ() {
        let model = make_toy_model(0);
        let config = small_config();
        let a = generate_record(&model, &config, "rec_00000", 1).unwrap();
        let b = generate_record(&model, &config, "rec_00000", 2).unwrap();
        assert_ne!(a.state.params.beta, b.state.params.beta);
    }

    #[test]
    fn records_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let model = make_toy_model(0);
        let config = small_config();
        let rec = generate_record(&model, &config, "rec_00000", 5).unwrap();
        write_record(dir.path(), &rec).unwrap();
        let back = read_record(dir.path(), "rec_00000", &config).unwrap();
        assert_eq!(back.state, rec.state);
        assert_eq!(back.kpts2d, rec.kpts2d);
        assert_eq!(back.kpts3d, rec.kpts3d);
        assert_eq!(back.image.data(), rec.image.data());
        assert_eq!(back.heatmaps.data.data(), rec.heatmaps.data.data());
        assert_eq!(back.pof.data.data(), rec.pof.data.data());
        assert_eq!(back.mask.data.data(), rec.mask.data.data());
    }

    #[test]
    fn corrupt_records_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = make_toy_model(0);
        let config = small_config();
        let rec = generate_record(&model, &config, "rec_00000", 5).unwrap();
        write_record(dir.path(), &rec).unwrap();
        fs::write(dir.path().join("rec_00000/heatmaps.hkt"), b"garbage").unwrap();
        assert!(read_record(dir.path(), "rec_00000", &config).is_err());
        fs::remove_file(dir.path().join("rec_00000/params.json")).unwrap();
        assert!(read_record(dir.path(), "rec_00000", &config).is_err());
    }

    #[test]
    fn hands_stay_in_frame() {
        let model = make_toy_model(0);
        let config = DatasetConfig::default();
        let mut framed = 0;
        let total = 10;
        for seed in 0..total {
            let rec = generate_record(&model, &config, "r", seed).unwrap();
            let pose =
                RigidPose { rotation: rec.state.rotation, translation: rec.state.translation };
            let intr =
                CameraIntrinsics::from_image(config.image_width, config.image_height, rec.state.focal)
                    .unwrap();
            let (mesh, _) = skin_mesh(&model, &rec.state.params).unwrap();
            let px = project(&mesh.vertices, &pose, &intr).unwrap();
            if fully_in_frame(&px, config.image_width, config.image_height) {
                framed += 1;
            }
        }
        assert!(
            framed * 10 >= total * 9,
            "only {framed}/{total} records kept the hand fully in frame"
        );
    }

    #[test]
    fn heatmaps_decode_back_to_keypoints() {
        let model = make_toy_model(0);
        let config = DatasetConfig::default();
        let sx = config.map_width as f64 / config.image_width as f64;
        let sy = config.map_height as f64 / config.image_height as f64;
        let margin = 8.0;
        let mut checked = 0;
        for seed in 0..4 {
            let rec = generate_record(&model, &config, "r", seed).unwrap();
            let decoded = soft_argmax(&rec.heatmaps).unwrap();
            for (d, gt) in decoded.iter().zip(&rec.kpts2d) {
                let mx = (gt[0] + 0.5) * sx - 0.5;
                let my = (gt[1] + 0.5) * sy - 0.5;
                let interior = mx >= margin
                    && my >= margin
                    && mx <= config.map_width as f64 - 1.0 - margin
                    && my <= config.map_height as f64 - 1.0 - margin;
                if !interior {
                    continue;
                }
                let dx = (d[0] + 0.5) / sx - 0.5 - gt[0];
                let dy = (d[1] + 0.5) / sy - 0.5 - gt[1];
                let err = (dx * dx + dy * dy).sqrt();
                assert!(err <= 0.05, "seed {seed}: decode error {err:.4} px");
                checked += 1;
            }
        }
        assert!(checked >= 20, "only {checked} interior keypoints exercised the oracle");
    }

    #[test]
    fn train_sample_and_observations_wire_correctly() {
        let model = make_toy_model(0);
        let config = small_config();
        let rec = generate_record(&model, &config, "r", 3).unwrap();
        let skeleton = SkeletonHierarchy::hand();
        let sup = rec.train_sample(true, &skeleton).unwrap();
        let gt = sup.gt.as_ref().unwrap();
        assert_eq!(gt.heatmaps.shape(), [21, 32, 32]);
        assert_eq!(gt.kpts2d.shape(), [21, 2]);
        assert_eq!(gt.bone_dirs.shape(), [20, 3]);
        let unsup = rec.train_sample(false, &skeleton).unwrap();
        assert!(unsup.gt.is_none());
        let obs = rec.observations();
        assert_eq!(obs.image_width, 64);
    }

    /// Bone directions must decode from the orientation field at the default
    /// geometry for every record a fitter might see.
    #[test]
    fn pof_decodes_reliably_at_default_geometry() {
        let model = make_toy_model(0);
        let config = DatasetConfig::default();
        let skeleton = SkeletonHierarchy::hand();
        for seed in 0..10 {
            let rec = generate_record(&model, &config, "r", seed).unwrap();
            let dirs = rec.observations().resolve_bone_dirs(&skeleton).unwrap();
            assert_eq!(dirs.len(), 20);
            let truth = rec.bone_dirs(&skeleton).unwrap();
            for (b, (d, t)) in dirs.iter().zip(&truth).enumerate() {
                let dot = (d[0] * t[0] + d[1] * t[1] + d[2] * t[2]).clamp(-1.0, 1.0);
                let deg = dot.acos().to_degrees();
                assert!(deg < 15.0, "seed {seed} bone {b}: decoded {deg:.2} degrees off");
            }
        }
    }

    #[test]
    fn ranges_are_validated() {
        let mut config = small_config();
        config.ranges.theta = vec![[-0.3, 0.3]; 3];
        assert!(config.validate().is_err());
        let mut config = small_config();
        config.ranges.depth = [0.6, 0.4];
        assert!(config.validate().is_err());
        let mut config = small_config();
        config.sigma = 0.0;
        assert!(config.validate().is_err());
    }
}
