//! Reproducible on-disk datasets: generation, manifest, and loaders.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json                object list, per-sample entries, config hash
//! objects/{id}.cart            surface sample points, (N, 3) f64
//! samples/{id}/{index}/data.cart   rgb/depth/mask/roc tensors for both views
//! samples/{id}/{index}/meta.json   poses, intrinsics, normalization, symmetry
//! ```

use std::fs;
use std::path::Path;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::archive::{Archive, Value};
use crate::error::{Error, Result};
use crate::geometry::{
    BinaryMask, CameraIntrinsics, DepthMap, NormalizationTransform, RigidTransform, RocMap,
};
use crate::tensor::Tensor;

use super::{
    make_pair, make_primitive, OcclusionConfig, PrimitiveKind, RenderedView, SceneSample,
    SymmetryClass,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One object to generate: stable id, geometry, texture seed.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObjectSpec {
    pub id: String,
    pub kind: PrimitiveKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetConfig {
    pub objects: Vec<ObjectSpec>,
    pub train_per_object: usize,
    pub val_per_object: usize,
    pub test_per_object: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// Focal length in pixels (same for both axes).
    pub focal: f64,
    /// Camera-to-object distance range in meters, `[near, far]`.
    pub distance_range: [f64; 2],
    /// Upper bound on the reference-to-query rotation angle.
    pub max_relative_rotation_deg: f64,
    pub occlusion: OcclusionConfig,
}

impl DatasetConfig {
    /// Small desk-scale default: an asymmetric box, a two-part composite,
    /// and an axially symmetric cylinder (so symmetry-aware metrics have
    /// something to disambiguate).
    pub fn toy() -> Self {
        DatasetConfig {
            objects: vec![
                ObjectSpec {
                    id: "box".into(),
                    kind: PrimitiveKind::Box {
                        extents: [0.12, 0.18, 0.26],
                    },
                    seed: 101,
                },
                ObjectSpec {
                    id: "widget".into(),
                    kind: PrimitiveKind::Composite {
                        extents: [0.15, 0.12, 0.22],
                    },
                    seed: 202,
                },
                ObjectSpec {
                    id: "can".into(),
                    kind: PrimitiveKind::Cylinder {
                        radius: 0.06,
                        height: 0.22,
                    },
                    seed: 303,
                },
            ],
            train_per_object: 160,
            val_per_object: 20,
            test_per_object: 20,
            image_width: 128,
            image_height: 128,
            focal: 160.0,
            distance_range: [0.5, 2.0],
            max_relative_rotation_deg: 60.0,
            occlusion: OcclusionConfig {
                probability: 0.3,
                max_fraction: 0.3,
            },
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            self.image_width as f64 / 2.0,
            self.image_height as f64 / 2.0,
            self.image_width,
            self.image_height,
        )
    }

    pub fn samples_per_object(&self) -> usize {
        self.train_per_object + self.val_per_object + self.test_per_object
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.objects.is_empty() {
            return bad("dataset config lists no objects".into());
        }
        let mut ids: Vec<&str> = self.objects.iter().map(|o| o.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.objects.len() {
            return bad("object ids must be unique".into());
        }
        if self
            .objects
            .iter()
            .any(|o| o.id.is_empty() || o.id.contains(['/', '\\', '.']))
        {
            return bad("object ids must be non-empty path-safe names".into());
        }
        if self.samples_per_object() == 0 {
            return bad("at least one sample per object is required".into());
        }
        if self.image_width < 32 || self.image_height < 32 {
            return bad(format!(
                "resolution {}x{} is below the 32 px minimum",
                self.image_width, self.image_height
            ));
        }
        if !(self.focal > 0.0) {
            return bad(format!("focal length must be positive, got {}", self.focal));
        }
        let [near, far] = self.distance_range;
        if !(near > 0.0 && far >= near) {
            return bad(format!("bad distance range [{near}, {far}]"));
        }
        if !(self.max_relative_rotation_deg > 0.0 && self.max_relative_rotation_deg <= 180.0) {
            return bad(format!(
                "max relative rotation {} deg outside (0, 180]",
                self.max_relative_rotation_deg
            ));
        }
        if !(0.0..=1.0).contains(&self.occlusion.probability)
            || !(0.0..1.0).contains(&self.occlusion.max_fraction)
        {
            return bad("occlusion probability must be in [0,1], fraction in [0,1)".into());
        }
        Ok(())
    }
}

/// Per-object summary stored in the manifest.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObjectRecord {
    pub id: String,
    pub kind: PrimitiveKind,
    pub seed: u64,
    pub diameter: f64,
    pub symmetry: SymmetryClass,
    pub points_file: String,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    /// Sample directory, relative to the dataset root.
    pub dir: String,
    pub object_id: String,
    pub split: Split,
    pub sample_seed: u64,
    /// Reference-to-query rotation angle in degrees.
    pub rotation_deg: f64,
    pub occlusion: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config_hash: String,
    pub config: DatasetConfig,
    pub objects: Vec<ObjectRecord>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries_for(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn object(&self, id: &str) -> Result<&ObjectRecord> {
        self.objects
            .iter()
            .find(|o| o.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown object id `{id}`")))
    }
}

/// Everything stored per sample besides the tensors.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct SampleMeta {
    object_id: String,
    symmetry: SymmetryClass,
    intrinsics: CameraIntrinsics,
    /// Row-major 3x4 `[R | t]`.
    t_ro: [[f64; 4]; 3],
    t_qo: [[f64; 4]; 3],
    t_rq: [[f64; 4]; 3],
    center: [f64; 3],
    diameter: f64,
    occlusion: f64,
    sample_seed: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_sample_seed(seed: u64, object_index: u64, sample_index: u64, attempt: u64) -> u64 {
    splitmix(seed ^ splitmix(object_index ^ splitmix(sample_index ^ splitmix(attempt))))
}

fn config_hash(config: &DatasetConfig) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    let mut hasher = Sha256::new();
    hasher.update(&json);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn random_unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        let y: f64 = StandardNormal.sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        let v = Vector3::new(x, y, z);
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Object position: depth in the configured range, lateral offset small
/// enough that the object stays well inside the frustum.
fn random_position(rng: &mut ChaCha8Rng, config: &DatasetConfig) -> Vector3<f64> {
    let z = rng.gen_range(config.distance_range[0]..=config.distance_range[1]);
    let half_fov_extent = z * (config.image_width.min(config.image_height) as f64 / 2.0)
        / config.focal;
    let lateral = 0.25 * half_fov_extent;
    Vector3::new(
        rng.gen_range(-lateral..=lateral),
        rng.gen_range(-lateral..=lateral),
        z,
    )
}

/// Draw reference and query poses with a relative rotation whose angle is
/// uniform in `[0, max]` about a uniform axis.
fn sample_pose_pair(
    rng: &mut ChaCha8Rng,
    config: &DatasetConfig,
) -> (RigidTransform, RigidTransform, f64) {
    let r_ro = RigidTransform::sample_uniform(rng, 0.0).rotation;
    let p_r = random_position(rng, config);
    let p_q = random_position(rng, config);

    let angle_deg = rng.gen_range(0.0..=config.max_relative_rotation_deg);
    let axis = Unit::new_normalize(random_unit_vector(rng));
    let r_rq = Rotation3::from_axis_angle(&axis, angle_deg.to_radians()).into_inner();

    // Choose t_RQ so the object sits at p_r in the reference view and p_q
    // in the query view.
    let t_ro = RigidTransform::from_parts_unchecked(r_ro, p_r);
    let t_rq = RigidTransform::from_parts_unchecked(r_rq, p_r - r_rq * p_q);
    let t_qo = t_rq.inverse().compose(&t_ro);
    (t_ro, t_qo, angle_deg)
}

const MAX_ATTEMPTS_PER_SAMPLE: u64 = 64;

/// Generate the full dataset under `root`. Fully determined by
/// `(config, seed)`: regenerating into a fresh directory reproduces every
/// file byte for byte.
pub fn generate_dataset(config: &DatasetConfig, seed: u64, root: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let intrinsics = config.intrinsics()?;
    let hash = config_hash(config)?;

    fs::create_dir_all(root.join("objects"))?;

    let mut objects = Vec::with_capacity(config.objects.len());
    let mut built = Vec::with_capacity(config.objects.len());
    for spec in &config.objects {
        let object = make_primitive(spec.kind, spec.seed)?;
        let points_file = format!("objects/{}.cart", spec.id);
        let n = object.samples.len();
        let mut flat = Vec::with_capacity(n * 3);
        for p in &object.samples {
            flat.extend_from_slice(&[p.x, p.y, p.z]);
        }
        let mut archive = Archive::new();
        archive.insert_tensor("points", &Tensor::from_vec(&[n, 3], flat)?)?;
        archive.save(root.join(&points_file))?;
        objects.push(ObjectRecord {
            id: spec.id.clone(),
            kind: spec.kind,
            seed: spec.seed,
            diameter: object.diameter(),
            symmetry: object.symmetry,
            points_file,
        });
        built.push(object);
    }

    let per_object = config.samples_per_object();
    let mut entries = Vec::with_capacity(config.objects.len() * per_object);
    for (object_index, (spec, object)) in config.objects.iter().zip(&built).enumerate() {
        let sample_root = root.join("samples").join(&spec.id);
        fs::create_dir_all(&sample_root)?;
        for sample_index in 0..per_object {
            let split = if sample_index < config.train_per_object {
                Split::Train
            } else if sample_index < config.train_per_object + config.val_per_object {
                Split::Val
            } else {
                Split::Test
            };
            let mut emitted = None;
            for attempt in 0..MAX_ATTEMPTS_PER_SAMPLE {
                let sample_seed = derive_sample_seed(
                    seed,
                    object_index as u64,
                    sample_index as u64,
                    attempt,
                );
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
                let (t_ro, t_qo, rotation_deg) = sample_pose_pair(&mut rng, config);
                match make_pair(
                    object,
                    &spec.id,
                    &t_ro,
                    &t_qo,
                    &intrinsics,
                    &config.occlusion,
                    sample_seed,
                ) {
                    Ok(sample) => {
                        emitted = Some((sample, sample_seed, rotation_deg));
                        break;
                    }
                    // Bad luck (visibility, clamping): retry with the next
                    // derived seed. Real errors propagate.
                    Err(Error::Render(_)) | Err(Error::EmptyMask(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            let Some((sample, sample_seed, rotation_deg)) = emitted else {
                return Err(Error::Render(format!(
                    "object `{}` sample {sample_index}: no valid pose pair after {MAX_ATTEMPTS_PER_SAMPLE} attempts",
                    spec.id
                )));
            };
            let dir_rel = format!("samples/{}/{:05}", spec.id, sample_index);
            write_sample(&root.join(&dir_rel), &sample, sample_seed)?;
            entries.push(ManifestEntry {
                dir: dir_rel,
                object_id: spec.id.clone(),
                split,
                sample_seed,
                rotation_deg,
                occlusion: sample.occlusion,
            });
        }
    }

    let manifest = DatasetManifest {
        seed,
        config_hash: hash,
        config: config.clone(),
        objects,
        entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(root.join("manifest.json"), json)?;
    Ok(manifest)
}

fn mask_to_value(mask: &BinaryMask) -> Value {
    Value::U16 {
        shape: vec![mask.height(), mask.width()],
        data: mask.data().iter().map(|&b| u16::from(b)).collect(),
    }
}

fn depth_to_tensor(depth: &DepthMap) -> Result<Tensor<f64>> {
    Tensor::from_vec(&[depth.height(), depth.width()], depth.data().to_vec())
}

fn write_sample(dir: &Path, sample: &SceneSample, sample_seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut archive = Archive::new();
    archive.insert_tensor("rgb_r", &sample.reference.rgb)?;
    archive.insert_tensor("depth_r", &depth_to_tensor(&sample.reference.depth)?)?;
    archive.insert("mask_r", mask_to_value(&sample.reference.mask))?;
    archive.insert_tensor("rgb_q", &sample.query.rgb)?;
    archive.insert_tensor("depth_q", &depth_to_tensor(&sample.query.depth)?)?;
    archive.insert("mask_q", mask_to_value(&sample.query.mask))?;
    archive.insert_tensor("roc_r", &sample.roc_reference.to_hw4_tensor())?;
    archive.insert_tensor("roc_q", &sample.roc_query.to_hw4_tensor())?;
    archive.save(dir.join("data.cart"))?;

    let meta = SampleMeta {
        object_id: sample.object_id.clone(),
        symmetry: sample.symmetry,
        intrinsics: sample.intrinsics,
        t_ro: sample.t_ro.to_rows_3x4(),
        t_qo: sample.t_qo.to_rows_3x4(),
        t_rq: sample.t_rq.to_rows_3x4(),
        center: sample.normalization.center.into(),
        diameter: sample.normalization.diameter,
        occlusion: sample.occlusion,
        sample_seed,
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// Read and validate a manifest: parse, check every referenced file exists.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(root.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    for record in &manifest.objects {
        if !root.join(&record.points_file).is_file() {
            return Err(Error::Archive(format!(
                "manifest references missing file `{}`",
                record.points_file
            )));
        }
    }
    for entry in &manifest.entries {
        let dir = root.join(&entry.dir);
        for file in ["data.cart", "meta.json"] {
            if !dir.join(file).is_file() {
                return Err(Error::Archive(format!(
                    "manifest references missing file `{}/{file}`",
                    entry.dir
                )));
            }
        }
    }
    Ok(manifest)
}

fn mask_from_value(value: &Value, what: &str) -> Result<BinaryMask> {
    let Value::U16 { shape, data } = value else {
        return Err(Error::Archive(format!("record `{what}` is not a u16 mask")));
    };
    if shape.len() != 2 {
        return Err(Error::Archive(format!(
            "mask `{what}` has rank {}, expected 2",
            shape.len()
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut mask = BinaryMask::filled(w, h, false);
    for v in 0..h {
        for u in 0..w {
            mask.set(u, v, data[v * w + u] != 0);
        }
    }
    Ok(mask)
}

fn depth_from_tensor(t: &Tensor<f64>, what: &str) -> Result<DepthMap> {
    if t.rank() != 2 {
        return Err(Error::Archive(format!(
            "depth `{what}` has rank {}, expected 2",
            t.rank()
        )));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut depth = DepthMap::zeros(w, h);
    for v in 0..h {
        for u in 0..w {
            depth.set(u, v, t.data()[v * w + u]);
        }
    }
    Ok(depth)
}

fn pose_from_rows(rows: &[[f64; 4]; 3]) -> Result<RigidTransform> {
    RigidTransform::from_rows_3x4(rows)
}

/// Load one sample directory back into memory.
pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<SceneSample> {
    let dir = root.join(&entry.dir);
    let meta: SampleMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let archive = Archive::load(dir.join("data.cart"))?;

    let reference = RenderedView {
        rgb: archive.tensor("rgb_r")?,
        depth: depth_from_tensor(&archive.tensor("depth_r")?, "depth_r")?,
        mask: mask_from_value(archive.get("mask_r")?, "mask_r")?,
    };
    let query = RenderedView {
        rgb: archive.tensor("rgb_q")?,
        depth: depth_from_tensor(&archive.tensor("depth_q")?, "depth_q")?,
        mask: mask_from_value(archive.get("mask_q")?, "mask_q")?,
    };
    let (roc_reference, _) = RocMap::from_hw4_tensor(&archive.tensor("roc_r")?)?;
    let (roc_query, _) = RocMap::from_hw4_tensor(&archive.tensor("roc_q")?)?;

    Ok(SceneSample {
        reference,
        query,
        intrinsics: meta.intrinsics,
        t_ro: pose_from_rows(&meta.t_ro)?,
        t_qo: pose_from_rows(&meta.t_qo)?,
        t_rq: pose_from_rows(&meta.t_rq)?,
        normalization: NormalizationTransform::new(Vector3::from(meta.center), meta.diameter)?,
        roc_reference,
        roc_query,
        object_id: meta.object_id,
        symmetry: meta.symmetry,
        occlusion: meta.occlusion,
    })
}

/// Object-frame surface points for an object id, as stored at generation
/// time; used by the pose-error metrics.
pub fn load_object_points(root: &Path, manifest: &DatasetManifest, id: &str) -> Result<Vec<Vector3<f64>>> {
    let record = manifest.object(id)?;
    let archive = Archive::load(root.join(&record.points_file))?;
    let t: Tensor<f64> = archive.tensor("points")?;
    if t.rank() != 2 || t.shape()[1] != 3 {
        return Err(Error::Archive(format!(
            "object `{id}` points have shape {:?}, expected (N, 3)",
            t.shape()
        )));
    }
    Ok(t.data()
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect())
}
