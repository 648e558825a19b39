//! Procedural RGB-D scene generator with exact ground truth.
//!
//! Objects are unions of analytic primitives, so depth comes from exact
//! ray intersection rather than rasterization: the geometric acceptance
//! tests can be tight. Appearance is deliberately plain (Lambertian, value
//! noise albedo) because correspondence, not realism, is what the learned
//! pipeline needs.

mod dataset;
mod noise;
mod shapes;

pub use dataset::{
    generate_dataset, load_manifest, load_object_points, load_sample, DatasetConfig,
    DatasetManifest, ManifestEntry, ObjectRecord, ObjectSpec, Split,
};
pub use noise::{fbm, lattice_hash, value_noise};
pub use shapes::Shape;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    backproject, compute_normalization, estimate_diameter, recover_relative_pose, roc_query,
    roc_reference, BinaryMask, CameraIntrinsics, DepthMap, NormalizationTransform, RigidTransform,
    RocMap,
};
use crate::tensor::Tensor;

/// Appearance symmetry of an object, deciding which pose-error metric is
/// meaningful for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetryClass {
    None,
    Axial,
    Spherical,
}

/// Object family plus size parameters (meters).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Box { extents: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
    Capsule { radius: f64, length: f64 },
    /// Box body with an embedded tilted cylinder arm; the stand-in for
    /// "generic asymmetric household object".
    Composite { extents: [f64; 3] },
}

/// One convex piece of an object, posed in the object frame.
#[derive(Debug, Clone)]
pub struct Part {
    pub shape: Shape,
    pub pose: RigidTransform,
}

/// A renderable object: analytic parts, surface point samples, texture.
#[derive(Debug, Clone)]
pub struct PrimitiveObject {
    pub kind: PrimitiveKind,
    pub parts: Vec<Part>,
    /// Object-frame surface samples (at least 512; used for diameters and
    /// pose-error metrics).
    pub samples: Vec<Vector3<f64>>,
    pub albedo_seed: u64,
    pub symmetry: SymmetryClass,
    texture_scale: f64,
}

const MIN_SURFACE_SAMPLES: usize = 1024;

impl PrimitiveObject {
    /// True diameter: maximum pairwise distance over the surface samples
    /// (extremal points are included explicitly, so this is exact for the
    /// analytic shapes).
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.samples.len() {
            for j in i + 1..self.samples.len() {
                best = best.max((self.samples[i] - self.samples[j]).norm_squared());
            }
        }
        best.sqrt()
    }

    /// True when `p` (object frame) is inside the union of parts.
    pub fn contains(&self, p: Vector3<f64>) -> bool {
        self.parts.iter().any(|part| {
            let local = part.pose.inverse().apply(p);
            part.shape.contains(local)
        })
    }

    /// Albedo at an object-frame surface point. The sampling rule encodes
    /// the symmetry class: spherically symmetric objects get a uniform
    /// color, axially symmetric ones a texture that depends only on radius
    /// and height, everything else full 3D noise.
    pub fn albedo_at(&self, p: Vector3<f64>) -> [f32; 3] {
        match self.symmetry {
            SymmetryClass::Spherical => {
                let mut rgb = [0.0f32; 3];
                for (c, out) in rgb.iter_mut().enumerate() {
                    *out = (0.3 + 0.6 * lattice_hash(c as i64, 11, 29, self.albedo_seed)) as f32;
                }
                rgb
            }
            SymmetryClass::Axial => {
                let q = Vector3::new(p.xy().norm(), p.z, 0.0) * self.texture_scale;
                self.noise_rgb(q)
            }
            SymmetryClass::None => self.noise_rgb(p * self.texture_scale),
        }
    }

    fn noise_rgb(&self, q: Vector3<f64>) -> [f32; 3] {
        let mut rgb = [0.0f32; 3];
        for (c, out) in rgb.iter_mut().enumerate() {
            let v = fbm(q, self.albedo_seed.wrapping_add(0x51_7C + c as u64));
            *out = (0.15 + 0.85 * v) as f32;
        }
        rgb
    }
}

/// Build an object: parts, ≥512 verified surface samples, texture seed,
/// symmetry class.
pub fn make_primitive(kind: PrimitiveKind, seed: u64) -> Result<PrimitiveObject> {
    let (parts, symmetry) = assemble_parts(kind, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_1234_8765);

    let areas: Vec<f64> = parts.iter().map(|p| p.shape.surface_area()).collect();
    let total_area: f64 = areas.iter().sum();

    let mut samples = Vec::with_capacity(MIN_SURFACE_SAMPLES + 32);
    let mut guard = 0usize;
    while samples.len() < MIN_SURFACE_SAMPLES {
        guard += 1;
        if guard > MIN_SURFACE_SAMPLES * 200 {
            return Err(Error::Render(
                "surface sampling rejected too many points; parts may fully overlap".into(),
            ));
        }
        let mut pick = rng.gen_range(0.0..total_area);
        let mut part_idx = parts.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                part_idx = i;
                break;
            }
            pick -= a;
        }
        let local = parts[part_idx].shape.sample_surface(&mut rng);
        let world = parts[part_idx].pose.apply(local);
        // Union surface: drop points swallowed by another part.
        let inside_other = parts
            .iter()
            .enumerate()
            .any(|(j, part)| j != part_idx && part.shape.contains(part.pose.inverse().apply(world)));
        if !inside_other {
            samples.push(world);
        }
    }
    // Extremal points make the sample diameter exact.
    for (part_idx, part) in parts.iter().enumerate() {
        for local in extremal_points(&part.shape) {
            let world = part.pose.apply(local);
            let inside_other = parts.iter().enumerate().any(|(j, other)| {
                j != part_idx && other.shape.contains(other.pose.inverse().apply(world))
            });
            if !inside_other {
                samples.push(world);
            }
        }
    }

    let mut obj = PrimitiveObject {
        kind,
        parts,
        samples,
        albedo_seed: seed,
        symmetry,
        texture_scale: 1.0,
    };
    let d = obj.diameter();
    if d <= 0.0 {
        return Err(Error::InvalidArgument(
            "object diameter is zero after sampling".into(),
        ));
    }
    // Roughly ten noise cells across the object.
    obj.texture_scale = 10.0 / d;
    Ok(obj)
}

fn assemble_parts(kind: PrimitiveKind, seed: u64) -> Result<(Vec<Part>, SymmetryClass)> {
    let bad_size = |what: &str| Error::InvalidArgument(format!("{what} must be positive"));
    match kind {
        PrimitiveKind::Box { extents } => {
            if extents.iter().any(|&e| e <= 0.0) {
                return Err(bad_size("box extents"));
            }
            Ok((
                vec![Part {
                    shape: Shape::Box {
                        half: [extents[0] / 2.0, extents[1] / 2.0, extents[2] / 2.0],
                    },
                    pose: RigidTransform::identity(),
                }],
                SymmetryClass::None,
            ))
        }
        PrimitiveKind::Cylinder { radius, height } => {
            if radius <= 0.0 || height <= 0.0 {
                return Err(bad_size("cylinder size"));
            }
            Ok((
                vec![Part {
                    shape: Shape::Cylinder {
                        radius,
                        half_height: height / 2.0,
                    },
                    pose: RigidTransform::identity(),
                }],
                SymmetryClass::Axial,
            ))
        }
        PrimitiveKind::Sphere { radius } => {
            if radius <= 0.0 {
                return Err(bad_size("sphere radius"));
            }
            Ok((
                vec![Part {
                    shape: Shape::Sphere { radius },
                    pose: RigidTransform::identity(),
                }],
                SymmetryClass::Spherical,
            ))
        }
        PrimitiveKind::Capsule { radius, length } => {
            if radius <= 0.0 || length <= 0.0 {
                return Err(bad_size("capsule size"));
            }
            // Geometrically axisymmetric, but the full-3D noise albedo pins
            // the azimuth, so poses are fully observable.
            Ok((
                vec![Part {
                    shape: Shape::Capsule {
                        radius,
                        half_length: length / 2.0,
                    },
                    pose: RigidTransform::identity(),
                }],
                SymmetryClass::None,
            ))
        }
        PrimitiveKind::Composite { extents } => {
            if extents.iter().any(|&e| e <= 0.0) {
                return Err(bad_size("composite extents"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0C09_9051_7E00_11AA);
            let body_half = [extents[0] / 2.0, extents[1] / 2.0, extents[2] * 0.3];
            let arm_radius = 0.22 * extents[0].min(extents[1]);
            let arm_half = extents[2] * 0.42;
            // Arm leans a little and sits off-center so no symmetry is left.
            let tilt = nalgebra::Rotation3::from_euler_angles(
                rng.gen_range(0.15..0.35),
                rng.gen_range(-0.1..0.1),
                0.0,
            )
            .into_inner();
            let offset = Vector3::new(
                rng.gen_range(0.1..0.3) * extents[0],
                rng.gen_range(-0.15..0.15) * extents[1],
                extents[2] * 0.3 + arm_half * 0.5,
            );
            Ok((
                vec![
                    Part {
                        shape: Shape::Box { half: body_half },
                        pose: RigidTransform::identity(),
                    },
                    Part {
                        shape: Shape::Cylinder {
                            radius: arm_radius,
                            half_height: arm_half,
                        },
                        pose: RigidTransform::from_parts_unchecked(tilt, offset),
                    },
                ],
                SymmetryClass::None,
            ))
        }
    }
}

/// Analytic farthest points of each shape; appended to the random samples
/// so max-pairwise distance equals the true diameter.
fn extremal_points(shape: &Shape) -> Vec<Vector3<f64>> {
    match *shape {
        Shape::Box { half } => {
            let mut corners = Vec::with_capacity(8);
            for i in 0..8 {
                corners.push(Vector3::new(
                    if i & 1 == 0 { -half[0] } else { half[0] },
                    if i & 2 == 0 { -half[1] } else { half[1] },
                    if i & 4 == 0 { -half[2] } else { half[2] },
                ));
            }
            corners
        }
        Shape::Sphere { radius } => vec![
            Vector3::new(radius, 0.0, 0.0),
            Vector3::new(-radius, 0.0, 0.0),
            Vector3::new(0.0, radius, 0.0),
            Vector3::new(0.0, -radius, 0.0),
            Vector3::new(0.0, 0.0, radius),
            Vector3::new(0.0, 0.0, -radius),
        ],
        Shape::Cylinder {
            radius,
            half_height,
        } => {
            let mut rim = Vec::with_capacity(16);
            for k in 0..8 {
                let phi = std::f64::consts::TAU * k as f64 / 8.0;
                for z in [half_height, -half_height] {
                    rim.push(Vector3::new(radius * phi.cos(), radius * phi.sin(), z));
                }
            }
            rim
        }
        Shape::Capsule {
            radius,
            half_length,
        } => vec![
            Vector3::new(0.0, 0.0, half_length + radius),
            Vector3::new(0.0, 0.0, -(half_length + radius)),
            Vector3::new(radius, 0.0, 0.0),
            Vector3::new(-radius, 0.0, 0.0),
        ],
    }
}

/// One rendered camera view.
#[derive(Debug, Clone)]
pub struct RenderedView {
    /// `(H, W, 3)` linear RGB in [0, 1].
    pub rgb: Tensor<f32>,
    pub depth: DepthMap,
    pub mask: BinaryMask,
}

const BACKGROUND_GRAY: f32 = 0.12;
const AMBIENT: f64 = 0.25;

fn light_direction() -> Vector3<f64> {
    // Toward the light, fixed in the camera frame (a headlight slightly
    // off-axis). Fixed lighting keeps axially symmetric objects truly
    // appearance-invariant under axial rotation.
    Vector3::new(-0.3, 0.4, -0.85).normalize()
}

/// Render the object under camera-from-object pose `t_co`: analytic ray
/// intersection per pixel, nearest part wins, Lambertian shading.
pub fn render_view(
    object: &PrimitiveObject,
    t_co: &RigidTransform,
    intrinsics: &CameraIntrinsics,
) -> Result<RenderedView> {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut rgb = vec![BACKGROUND_GRAY; w * h * 3];
    let mut depth = DepthMap::zeros(w, h);
    let mut mask = BinaryMask::filled(w, h, false);

    let t_oc = t_co.inverse();
    // Per part: camera frame -> part-local frame.
    let part_from_cam: Vec<RigidTransform> = object
        .parts
        .iter()
        .map(|p| p.pose.inverse().compose(&t_oc))
        .collect();
    let to_light = light_direction();

    for v in 0..h {
        for u in 0..w {
            let dir_cam = Vector3::new(
                (u as f64 - intrinsics.cx) / intrinsics.fx,
                (v as f64 - intrinsics.cy) / intrinsics.fy,
                1.0,
            );
            let mut best: Option<(f64, usize)> = None;
            for (i, pfc) in part_from_cam.iter().enumerate() {
                let o = pfc.translation;
                let d = pfc.rotation * dir_cam;
                if let Some(t) = object.parts[i].shape.intersect(o, d) {
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, i));
                    }
                }
            }
            let Some((t, part_idx)) = best else { continue };
            // dir_cam.z == 1, so the ray parameter is the camera-space depth.
            depth.set(u, v, t);
            mask.set(u, v, true);

            let part = &object.parts[part_idx];
            let p_local = part_from_cam[part_idx].translation
                + part_from_cam[part_idx].rotation * dir_cam * t;
            let n_local = part.shape.normal_at(p_local);
            let mut n_cam = t_co.rotation * part.pose.rotation * n_local;
            if n_cam.dot(&dir_cam) > 0.0 {
                n_cam = -n_cam;
            }
            let p_obj = part.pose.apply(p_local);
            let albedo = object.albedo_at(p_obj);
            let shade = (AMBIENT + (1.0 - AMBIENT) * n_cam.dot(&to_light).max(0.0)) as f32;
            let px = (v * w + u) * 3;
            for c in 0..3 {
                rgb[px + c] = albedo[c] * shade;
            }
        }
    }

    if mask.count() == 0 {
        return Err(Error::Render(
            "object does not intersect the view frustum".into(),
        ));
    }
    Ok(RenderedView {
        rgb: Tensor::from_vec(&[h, w, 3], rgb).expect("sized above"),
        depth,
        mask,
    })
}

/// Occluder placement policy for query views.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OcclusionConfig {
    /// Chance that a query view gets an occluder at all.
    pub probability: f64,
    /// Upper bound on the fraction of object mask pixels an occluder may
    /// remove.
    pub max_fraction: f64,
}

impl OcclusionConfig {
    pub fn none() -> Self {
        OcclusionConfig {
            probability: 0.0,
            max_fraction: 0.0,
        }
    }
}

/// A complete supervised example: both views, poses, normalization, and
/// ground-truth coordinate maps.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub reference: RenderedView,
    pub query: RenderedView,
    pub intrinsics: CameraIntrinsics,
    pub t_ro: RigidTransform,
    pub t_qo: RigidTransform,
    pub t_rq: RigidTransform,
    /// Shared normalization computed from the reference view.
    pub normalization: NormalizationTransform,
    pub roc_reference: RocMap,
    pub roc_query: RocMap,
    pub object_id: String,
    pub symmetry: SymmetryClass,
    /// Fraction of the query object mask removed by the occluder.
    pub occlusion: f64,
}

const MIN_MASK_PIXELS: usize = 32;
/// Round-trip gate every emitted sample must pass.
const ROUNDTRIP_ROT_DEG: f64 = 0.01;
const ROUNDTRIP_TRANS_REL: f64 = 1e-4;

/// Render a reference/query pair with ground truth, optionally occluding
/// the query view, and verify the sample's internal consistency before
/// returning it.
pub fn make_pair(
    object: &PrimitiveObject,
    object_id: &str,
    t_ro: &RigidTransform,
    t_qo: &RigidTransform,
    intrinsics: &CameraIntrinsics,
    occlusion: &OcclusionConfig,
    seed: u64,
) -> Result<SceneSample> {
    let reference = render_view(object, t_ro, intrinsics)?;
    let mut query = render_view(object, t_qo, intrinsics)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0CC1_00DE_0FAB_u64.rotate_left(8));
    let unoccluded = query.mask.count();
    let mut occluded_fraction = 0.0;
    if occlusion.max_fraction > 0.0
        && occlusion.probability > 0.0
        && rng.gen_bool(occlusion.probability.clamp(0.0, 1.0))
    {
        let mut target = rng.gen_range(0.2..1.0) * occlusion.max_fraction;
        for _attempt in 0..6 {
            let mut trial = query.clone();
            let removed = apply_occluder(&mut trial, intrinsics, target, &mut rng);
            let frac = removed as f64 / unoccluded as f64;
            if frac <= occlusion.max_fraction && trial.mask.count() >= MIN_MASK_PIXELS {
                query = trial;
                occluded_fraction = frac;
                break;
            }
            target *= 0.6;
        }
    }

    if reference.mask.count() < MIN_MASK_PIXELS || query.mask.count() < MIN_MASK_PIXELS {
        return Err(Error::Render(format!(
            "visibility lost: {} reference / {} query mask pixels (need {MIN_MASK_PIXELS})",
            reference.mask.count(),
            query.mask.count()
        )));
    }

    let ref_points = backproject(&reference.depth, intrinsics, &reference.mask)?;
    let d = estimate_diameter(&reference.mask, &reference.depth, intrinsics)?;
    let s = compute_normalization(&ref_points, d)?;
    let t_rq = t_ro.compose(&t_qo.inverse());

    let (roc_r, _) = roc_reference(&reference.depth, &reference.mask, intrinsics, &s)?;
    let (roc_q, _) = roc_query(&query.depth, &query.mask, intrinsics, &t_rq, &s)?;

    let sample = SceneSample {
        reference,
        query,
        intrinsics: *intrinsics,
        t_ro: *t_ro,
        t_qo: *t_qo,
        t_rq,
        normalization: s,
        roc_reference: roc_r,
        roc_query: roc_q,
        object_id: object_id.to_string(),
        symmetry: object.symmetry,
        occlusion: occluded_fraction,
    };
    sample.verify()?;
    Ok(sample)
}

/// Drop a primitive in front of the object along a ray through a random
/// masked pixel, write it into the color/depth buffers, and carve it out of
/// the object mask. Returns the number of object pixels removed.
fn apply_occluder(
    view: &mut RenderedView,
    intrinsics: &CameraIntrinsics,
    target_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    let mask_px: Vec<(usize, usize)> = (0..view.mask.height())
        .flat_map(|v| (0..view.mask.width()).map(move |u| (u, v)))
        .filter(|&(u, v)| view.mask.get(u, v))
        .collect();
    if mask_px.is_empty() {
        return 0;
    }
    let (au, av) = mask_px[rng.gen_range(0..mask_px.len())];
    let anchor_depth = view.depth.get(au, av);
    let z_occ = anchor_depth * rng.gen_range(0.45..0.7);

    // Pixel radius that would cover roughly the target fraction of the
    // mask, converted to meters at the occluder depth.
    let cover_px = (target_fraction * mask_px.len() as f64 / std::f64::consts::PI)
        .sqrt()
        .max(1.0);
    let radius = cover_px * z_occ / ((intrinsics.fx + intrinsics.fy) / 2.0);

    let center = Vector3::new(
        (au as f64 - intrinsics.cx) * z_occ / intrinsics.fx,
        (av as f64 - intrinsics.cy) * z_occ / intrinsics.fy,
        z_occ,
    );
    let shape = if rng.gen_bool(0.5) {
        Shape::Sphere { radius }
    } else {
        Shape::Box {
            half: [
                radius * rng.gen_range(0.7..1.3),
                radius * rng.gen_range(0.7..1.3),
                radius * rng.gen_range(0.7..1.3),
            ],
        }
    };
    let pose = RigidTransform::from_parts_unchecked(
        nalgebra::Rotation3::from_euler_angles(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .into_inner(),
        center,
    );
    let occluder = PrimitiveObject {
        kind: PrimitiveKind::Sphere { radius: 1.0 }, // placeholder tag, not used below
        parts: vec![Part {
            shape,
            pose: RigidTransform::identity(),
        }],
        samples: Vec::new(),
        albedo_seed: rng.gen(),
        symmetry: SymmetryClass::None,
        texture_scale: 6.0 / radius.max(1e-6),
    };

    let cam_to_occ = pose.inverse();
    let to_light = light_direction();
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut removed = 0usize;
    let rgb = view.rgb.data_mut();
    for v in 0..h {
        for u in 0..w {
            let dir_cam = Vector3::new(
                (u as f64 - intrinsics.cx) / intrinsics.fx,
                (v as f64 - intrinsics.cy) / intrinsics.fy,
                1.0,
            );
            let o = cam_to_occ.translation;
            let d = cam_to_occ.rotation * dir_cam;
            let Some(t) = occluder.parts[0].shape.intersect(o, d) else {
                continue;
            };
            let scene_depth = view.depth.get(u, v);
            if scene_depth != 0.0 && t >= scene_depth {
                continue; // occluder is behind the surface here
            }
            let p_local = o + d * t;
            let n_local = occluder.parts[0].shape.normal_at(p_local);
            let mut n_cam = pose.rotation * n_local;
            if n_cam.dot(&dir_cam) > 0.0 {
                n_cam = -n_cam;
            }
            let albedo = occluder.noise_rgb(p_local * occluder.texture_scale);
            let shade = (AMBIENT + (1.0 - AMBIENT) * n_cam.dot(&to_light).max(0.0)) as f32;
            let px = (v * w + u) * 3;
            for c in 0..3 {
                rgb[px + c] = albedo[c] * shade;
            }
            view.depth.set(u, v, t);
            if view.mask.get(u, v) {
                view.mask.set(u, v, false);
                removed += 1;
            }
        }
    }
    removed
}

impl SceneSample {
    /// Internal consistency gates run on every emitted sample: pose
    /// composition closes, stored coordinate maps match a recomputation
    /// from depth and poses, and the ground-truth maps round-trip to the
    /// relative pose within the geometric tolerance.
    pub fn verify(&self) -> Result<()> {
        let recomposed = self.t_ro.compose(&self.t_qo.inverse());
        let rot_err = (recomposed.rotation - self.t_rq.rotation).abs().max();
        let trans_err = (recomposed.translation - self.t_rq.translation).norm();
        if rot_err > 1e-9 || trans_err > 1e-9 {
            return Err(Error::Render(format!(
                "pose composition inconsistent: rot {rot_err:.2e}, trans {trans_err:.2e}"
            )));
        }

        let (roc_r, _) = roc_reference(
            &self.reference.depth,
            &self.reference.mask,
            &self.intrinsics,
            &self.normalization,
        )?;
        let (roc_q, _) = roc_query(
            &self.query.depth,
            &self.query.mask,
            &self.intrinsics,
            &self.t_rq,
            &self.normalization,
        )?;
        for (got, want, label) in [
            (&self.roc_reference, &roc_r, "reference"),
            (&self.roc_query, &roc_q, "query"),
        ] {
            if got.valid() != want.valid() {
                return Err(Error::Render(format!(
                    "{label} coordinate map validity differs from recomputation"
                )));
            }
            let max_diff = got
                .data()
                .iter()
                .zip(want.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            if max_diff > 1e-6 {
                return Err(Error::Render(format!(
                    "{label} coordinate map deviates from recomputation by {max_diff:.2e}"
                )));
            }
        }

        let recovered = recover_relative_pose(
            &self.roc_query,
            &self.query.depth,
            &self.query.mask,
            &self.intrinsics,
            &self.normalization,
        )?;
        let rot = recovered.rotation_angle_deg_to(&self.t_rq);
        let trans = recovered.translation_distance_to(&self.t_rq);
        if rot > ROUNDTRIP_ROT_DEG || trans > ROUNDTRIP_TRANS_REL * self.normalization.diameter {
            return Err(Error::Render(format!(
                "ground-truth round trip off: rotation {rot:.4} deg, translation {trans:.2e} m"
            )));
        }
        Ok(())
    }
}
