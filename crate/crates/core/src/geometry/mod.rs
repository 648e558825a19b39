//! Camera model, coordinate-map construction, and rigid-pose recovery.
//!
//! The central representation is the normalized reference-frame coordinate
//! map: each valid pixel of a view stores the 3D point it sees, expressed in
//! the reference camera frame and squashed into roughly [-1, 1] by a
//! center-and-scale normalization shared between both views. Two such maps
//! are dense 3D-3D correspondences, so the relative camera pose falls out of
//! a least-squares rigid alignment.

mod umeyama;

pub use umeyama::umeyama;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pinhole camera; no distortion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }
}

/// Rotation + translation in meters. Applied as `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub const ORTHONORMALITY_TOL: f64 = 1e-9;

    /// Validating constructor: rotation must be orthonormal with det +1
    /// within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if ortho_err > Self::ORTHONORMALITY_TOL {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (max |R^T R - I| = {ortho_err:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > Self::ORTHONORMALITY_TOL {
            return Err(Error::InvalidArgument(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    /// For internally constructed rotations that are orthonormal by
    /// construction (e.g. from an SVD or a unit quaternion).
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(
            (rotation.transpose() * rotation - Matrix3::identity())
                .abs()
                .max()
                < 1e-7,
            "internal rotation drifted from orthonormality"
        );
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self.compose(other)` applies `other` first: `(self ∘ other)(p)`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::from_parts_unchecked(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::from_parts_unchecked(rt, -(rt * self.translation))
    }

    /// Geodesic distance between the two rotations, in degrees.
    pub fn rotation_angle_deg_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        cos.acos().to_degrees()
    }

    pub fn translation_distance_to(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Uniformly random rotation (via a normalized Gaussian quaternion) and
    /// a translation drawn uniformly from a cube of half-extent
    /// `translation_extent`.
    pub fn sample_uniform(rng: &mut impl rand::Rng, translation_extent: f64) -> RigidTransform {
        use rand_distr::{Distribution, StandardNormal};
        let q: [f64; 4] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let quat = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[0], q[1], q[2], q[3],
        ));
        let t = Vector3::new(
            rng.gen_range(-translation_extent..=translation_extent),
            rng.gen_range(-translation_extent..=translation_extent),
            rng.gen_range(-translation_extent..=translation_extent),
        );
        RigidTransform::from_parts_unchecked(quat.to_rotation_matrix().into_inner(), t)
    }

    /// Row-major 3x4 `[R | t]` layout used in evaluation reports.
    pub fn to_rows_3x4(&self) -> [[f64; 4]; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2]],
        ]
    }

    pub fn from_rows_3x4(rows: &[[f64; 4]; 3]) -> Result<Self> {
        let rotation = Matrix3::new(
            rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0],
            rows[2][1], rows[2][2],
        );
        let translation = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        RigidTransform::new(rotation, translation)
    }
}

/// Center-and-scale normalization `p -> (p - c) / d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform {
    pub center: Vector3<f64>,
    pub diameter: f64,
}

impl NormalizationTransform {
    pub fn new(center: Vector3<f64>, diameter: f64) -> Result<Self> {
        if !(diameter > 0.0) || !diameter.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "normalization diameter must be positive and finite, got {diameter}"
            )));
        }
        Ok(NormalizationTransform { center, diameter })
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        (p - self.center) / self.diameter
    }

    pub fn invert(&self, p: Vector3<f64>) -> Vector3<f64> {
        p * self.diameter + self.center
    }
}

/// Per-pixel depth in meters; 0 encodes "no measurement".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "depth buffer of {} values for {width}x{height} map",
                data.len()
            )));
        }
        if data.iter().any(|&z| !(z >= 0.0) || !z.is_finite()) {
            return Err(Error::InvalidArgument(
                "depth values must be finite and non-negative".into(),
            ));
        }
        Ok(DepthMap {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, z: f64) {
        debug_assert!(z >= 0.0 && z.is_finite());
        self.data[v * self.width + u] = z;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_value(&self) -> crate::archive::Value {
        crate::archive::Value::F64 {
            shape: vec![self.height, self.width],
            data: self.data.clone(),
        }
    }

    pub fn from_value(value: &crate::archive::Value) -> Result<Self> {
        match value {
            crate::archive::Value::F64 { shape, data } if shape.len() == 2 => {
                DepthMap::from_vec(shape[1], shape[0], data.clone())
            }
            _ => Err(Error::Archive(format!(
                "depth map record must be rank-2 f64, got {:?} {:?}",
                value.dtype(),
                value.shape()
            ))),
        }
    }
}

/// Per-pixel boolean mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "mask buffer of {} values for {width}x{height} mask",
                data.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: bool) {
        self.data[v * self.width + u] = value;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Inclusive bounding box `(min_u, min_v, max_u, max_v)` of set pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for v in 0..self.height {
            for u in 0..self.width {
                if self.get(u, v) {
                    bb = Some(match bb {
                        None => (u, v, u, v),
                        Some((u0, v0, u1, v1)) => (u0.min(u), v0.min(v), u1.max(u), v1.max(v)),
                    });
                }
            }
        }
        bb
    }

    /// Pixel-set intersection-over-union with another mask of the same size.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(format!(
                "mask IoU between {}x{} and {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            // Two empty masks agree perfectly by convention.
            return Ok(1.0);
        }
        Ok(inter as f64 / union as f64)
    }

    pub fn to_value(&self) -> crate::archive::Value {
        crate::archive::Value::U16 {
            shape: vec![self.height, self.width],
            data: self.data.iter().map(|&b| b as u16).collect(),
        }
    }

    pub fn from_value(value: &crate::archive::Value) -> Result<Self> {
        match value {
            crate::archive::Value::U16 { shape, data } if shape.len() == 2 => {
                if data.iter().any(|&v| v > 1) {
                    return Err(Error::Archive(
                        "mask record contains values other than {0,1}".into(),
                    ));
                }
                BinaryMask::from_vec(shape[1], shape[0], data.iter().map(|&v| v == 1).collect())
            }
            _ => Err(Error::Archive(format!(
                "mask record must be rank-2 u16, got {:?} {:?}",
                value.dtype(),
                value.shape()
            ))),
        }
    }
}

/// Dense per-pixel 3D points in meters with validity.
#[derive(Debug, Clone)]
pub struct PointMap {
    pub points: Vec<Vector3<f64>>,
    pub valid: BinaryMask,
}

impl PointMap {
    pub fn width(&self) -> usize {
        self.valid.width()
    }

    pub fn height(&self) -> usize {
        self.valid.height()
    }

    pub fn get(&self, u: usize, v: usize) -> Option<Vector3<f64>> {
        self.valid
            .get(u, v)
            .then(|| self.points[v * self.width() + u])
    }

    pub fn valid_points(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.points
            .iter()
            .zip(self.valid.data())
            .filter(|(_, &m)| m)
            .map(|(p, _)| *p)
    }
}

/// Normalized reference-frame coordinate map: 3 channels per pixel, valid
/// values in [-1, 1], invalid pixels exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RocMap {
    width: usize,
    height: usize,
    data: Vec<f32>, // interleaved xyz, length width*height*3
    valid: BinaryMask,
}

impl RocMap {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        RocMap {
            width,
            height,
            data: vec![0.0; width * height * 3],
            valid: BinaryMask::filled(width, height, false),
        }
    }

    /// Build from raw channels, enforcing the invariants: invalid pixels are
    /// zeroed, valid pixels must be finite and within [-1, 1].
    pub fn from_parts(width: usize, height: usize, data: Vec<f32>, valid: BinaryMask) -> Result<Self> {
        if data.len() != width * height * 3 || valid.width() != width || valid.height() != height {
            return Err(Error::shape(format!(
                "coordinate map parts disagree: {} values, {}x{} mask, {width}x{height} map",
                data.len(),
                valid.width(),
                valid.height()
            )));
        }
        let mut data = data;
        for (i, chunk) in data.chunks_mut(3).enumerate() {
            if valid.data()[i] {
                for c in chunk.iter() {
                    if !c.is_finite() || c.abs() > 1.0 {
                        return Err(Error::InvalidArgument(format!(
                            "valid pixel {i} holds out-of-range component {c}"
                        )));
                    }
                }
            } else {
                chunk.fill(0.0);
            }
        }
        Ok(RocMap {
            width,
            height,
            data,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn valid(&self) -> &BinaryMask {
        &self.valid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, u: usize, v: usize) -> Option<[f32; 3]> {
        self.valid.get(u, v).then(|| {
            let i = (v * self.width + u) * 3;
            [self.data[i], self.data[i + 1], self.data[i + 2]]
        })
    }

    /// `(H, W, 4)` float tensor: xyz channels plus a 0/1 validity channel.
    /// This is the layout every learned component consumes.
    pub fn to_hw4_tensor(&self) -> Tensor<f32> {
        let mut out = vec![0.0f32; self.width * self.height * 4];
        for i in 0..self.width * self.height {
            out[i * 4..i * 4 + 3].copy_from_slice(&self.data[i * 3..i * 3 + 3]);
            out[i * 4 + 3] = self.valid.data()[i] as u8 as f32;
        }
        Tensor::from_vec(&[self.height, self.width, 4], out).expect("sized above")
    }

    /// Inverse of [`RocMap::to_hw4_tensor`]: validity channel thresholded at
    /// 0.5, coordinate channels clamped to [-1, 1]. Returns the number of
    /// clamped components.
    pub fn from_hw4_tensor(t: &Tensor<f32>) -> Result<(Self, usize)> {
        if t.rank() != 3 || t.shape()[2] != 4 {
            return Err(Error::shape(format!(
                "coordinate tensor must be (H, W, 4), got {:?}",
                t.shape()
            )));
        }
        let (height, width) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0f32; width * height * 3];
        let mut valid = BinaryMask::filled(width, height, false);
        let mut clamped = 0usize;
        for i in 0..width * height {
            let px = &t.data()[i * 4..(i + 1) * 4];
            if px[3] > 0.5 {
                valid.set(i % width, i / width, true);
                for c in 0..3 {
                    let v = px[c];
                    let vc = v.clamp(-1.0, 1.0);
                    if vc != v {
                        clamped += 1;
                    }
                    data[i * 3 + c] = vc;
                }
            }
        }
        Ok((
            RocMap {
                width,
                height,
                data,
                valid,
            },
            clamped,
        ))
    }

    pub fn to_value(&self) -> crate::archive::Value {
        crate::archive::Value::F32 {
            shape: vec![self.height, self.width, 3],
            data: self.data.clone(),
        }
    }

    pub fn from_value(value: &crate::archive::Value, valid: BinaryMask) -> Result<Self> {
        match value {
            crate::archive::Value::F32 { shape, data } if shape.len() == 3 && shape[2] == 3 => {
                RocMap::from_parts(shape[1], shape[0], data.clone(), valid)
            }
            _ => Err(Error::Archive(format!(
                "coordinate map record must be (H, W, 3) f32, got {:?} {:?}",
                value.dtype(),
                value.shape()
            ))),
        }
    }
}

/// Lift masked depth pixels into camera-frame 3D points:
/// `(u, v, z) -> ((u-cx) z/fx, (v-cy) z/fy, z)`. Pixels outside the mask or
/// with zero depth come back invalid.
pub fn backproject(
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    mask: &BinaryMask,
) -> Result<PointMap> {
    if depth.width() != intrinsics.width
        || depth.height() != intrinsics.height
        || mask.width() != intrinsics.width
        || mask.height() != intrinsics.height
    {
        return Err(Error::shape(format!(
            "backproject: depth {}x{}, mask {}x{}, intrinsics {}x{}",
            depth.width(),
            depth.height(),
            mask.width(),
            mask.height(),
            intrinsics.width,
            intrinsics.height
        )));
    }
    let (w, h) = (depth.width(), depth.height());
    let mut points = vec![Vector3::zeros(); w * h];
    let mut valid = BinaryMask::filled(w, h, false);
    for v in 0..h {
        for u in 0..w {
            let z = depth.get(u, v);
            if !mask.get(u, v) || z == 0.0 {
                continue;
            }
            points[v * w + u] = Vector3::new(
                (u as f64 - intrinsics.cx) * z / intrinsics.fx,
                (v as f64 - intrinsics.cy) * z / intrinsics.fy,
                z,
            );
            valid.set(u, v, true);
        }
    }
    Ok(PointMap { points, valid })
}

/// Pinhole projection of a camera-frame point to (possibly fractional)
/// pixel coordinates. Depth must be positive.
pub fn project(point: Vector3<f64>, intrinsics: &CameraIntrinsics) -> Result<(f64, f64)> {
    if !(point.z > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cannot project point with depth {}",
            point.z
        )));
    }
    Ok((
        intrinsics.fx * point.x / point.z + intrinsics.cx,
        intrinsics.fy * point.y / point.z + intrinsics.cy,
    ))
}

/// Object diameter estimate from a single masked depth view:
/// `d = median_depth * sqrt(w^2 + h^2) / ((fx + fy)/2)` with `w`, `h` the
/// inclusive pixel extents of the mask's bounding box.
pub fn estimate_diameter(
    mask: &BinaryMask,
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
) -> Result<f64> {
    let (min_u, min_v, max_u, max_v) = mask
        .bounding_box()
        .ok_or_else(|| Error::EmptyMask("diameter estimate needs a non-empty mask".into()))?;
    let mut depths: Vec<f64> = (min_v..=max_v)
        .flat_map(|v| (min_u..=max_u).map(move |u| (u, v)))
        .filter(|&(u, v)| mask.get(u, v) && depth.get(u, v) > 0.0)
        .map(|(u, v)| depth.get(u, v))
        .collect();
    if depths.is_empty() {
        return Err(Error::EmptyMask(
            "all masked pixels have invalid depth".into(),
        ));
    }
    depths.sort_by(|a, b| a.partial_cmp(b).expect("depths are finite"));
    let n = depths.len();
    // Even counts take the midpoint of the two central values.
    let median = if n % 2 == 1 {
        depths[n / 2]
    } else {
        0.5 * (depths[n / 2 - 1] + depths[n / 2])
    };
    let bbox_w = (max_u - min_u + 1) as f64;
    let bbox_h = (max_v - min_v + 1) as f64;
    let diag = (bbox_w * bbox_w + bbox_h * bbox_h).sqrt();
    Ok(median * diag / ((intrinsics.fx + intrinsics.fy) / 2.0))
}

/// Normalization from the arithmetic centroid of the valid reference points
/// and a supplied diameter.
pub fn compute_normalization(
    reference_points: &PointMap,
    diameter: f64,
) -> Result<NormalizationTransform> {
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for p in reference_points.valid_points() {
        sum += p;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask(
            "normalization needs at least one valid point".into(),
        ));
    }
    NormalizationTransform::new(sum / n as f64, diameter)
}

fn roc_from_points(
    points: &PointMap,
    transform: Option<&RigidTransform>,
    s: &NormalizationTransform,
) -> (RocMap, usize) {
    let (w, h) = (points.width(), points.height());
    let mut data = vec![0.0f32; w * h * 3];
    let mut clamped = 0usize;
    for i in 0..w * h {
        if !points.valid.data()[i] {
            continue;
        }
        let mut p = points.points[i];
        if let Some(t) = transform {
            p = t.apply(p);
        }
        let nrm = s.apply(p);
        for c in 0..3 {
            let v = nrm[c];
            let vc = v.clamp(-1.0, 1.0);
            if vc != v {
                clamped += 1;
            }
            data[i * 3 + c] = vc as f32;
        }
    }
    (
        RocMap {
            width: w,
            height: h,
            data,
            valid: points.valid.clone(),
        },
        clamped,
    )
}

/// Reference-view coordinate map: normalized backprojection of the masked
/// reference depth. Also returns how many components hit the [-1, 1] clamp.
pub fn roc_reference(
    depth: &DepthMap,
    mask: &BinaryMask,
    intrinsics: &CameraIntrinsics,
    s: &NormalizationTransform,
) -> Result<(RocMap, usize)> {
    let points = backproject(depth, intrinsics, mask)?;
    Ok(roc_from_points(&points, None, s))
}

/// Query-view coordinate map: query depth backprojected, carried into the
/// reference frame by `t_rq`, then normalized.
pub fn roc_query(
    depth: &DepthMap,
    mask: &BinaryMask,
    intrinsics: &CameraIntrinsics,
    t_rq: &RigidTransform,
    s: &NormalizationTransform,
) -> Result<(RocMap, usize)> {
    let points = backproject(depth, intrinsics, mask)?;
    Ok(roc_from_points(&points, Some(t_rq), s))
}

/// Recover the query-to-reference transform from a predicted query-view
/// coordinate map: denormalize the prediction, backproject the query depth,
/// and rigidly align the two point sets over the jointly valid pixels.
pub fn recover_relative_pose(
    roc_pred: &RocMap,
    depth_q: &DepthMap,
    mask_q: &BinaryMask,
    intrinsics: &CameraIntrinsics,
    s: &NormalizationTransform,
) -> Result<RigidTransform> {
    let query_points = backproject(depth_q, intrinsics, mask_q)?;
    if roc_pred.width() != query_points.width() || roc_pred.height() != query_points.height() {
        return Err(Error::shape(format!(
            "predicted map {}x{} vs query depth {}x{}",
            roc_pred.width(),
            roc_pred.height(),
            query_points.width(),
            query_points.height()
        )));
    }
    let n_px = roc_pred.width() * roc_pred.height();
    let mut reference_frame = Vec::new();
    let mut camera_frame = Vec::new();
    for i in 0..n_px {
        if !roc_pred.valid.data()[i] || !query_points.valid.data()[i] {
            continue;
        }
        let r = &roc_pred.data[i * 3..i * 3 + 3];
        reference_frame.push(s.invert(Vector3::new(r[0] as f64, r[1] as f64, r[2] as f64)));
        camera_frame.push(query_points.points[i]);
    }
    if reference_frame.len() < 3 {
        return Err(Error::InsufficientCorrespondences {
            got: reference_frame.len(),
            need: 3,
        });
    }
    umeyama(&reference_frame, &camera_frame)
}

/// Object pose in the query frame from the relative view transform and the
/// object pose in the reference frame: `T_QO = T_RQ^-1 * T_RO`.
pub fn compose_absolute(t_rq: &RigidTransform, t_ro: &RigidTransform) -> RigidTransform {
    t_rq.inverse().compose(t_ro)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(250.0, 250.0, 64.0, 64.0, 128, 128).unwrap()
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(-1.0, 250.0, 64.0, 64.0, 128, 128).is_err());
        assert!(CameraIntrinsics::new(250.0, 250.0, 128.0, 64.0, 128, 128).is_err());
    }

    #[test]
    fn backproject_known_pixels() {
        let k = intr();
        let mut depth = DepthMap::zeros(128, 128);
        depth.set(64, 64, 1.0); // principal point
        depth.set(114, 64, 2.0); // cx + fx/5
        let mask = BinaryMask::filled(128, 128, true);
        let pm = backproject(&depth, &k, &mask).unwrap();
        assert_relative_eq!(pm.get(64, 64).unwrap(), Vector3::new(0.0, 0.0, 1.0));
        // (114 - 64) * 2 / 250 = 0.4
        assert_relative_eq!(pm.get(114, 64).unwrap(), Vector3::new(0.4, 0.0, 2.0));
        // zero depth pixels are invalid even inside the mask
        assert!(pm.get(0, 0).is_none());
    }

    #[test]
    fn backproject_empty_mask_is_all_invalid() {
        let k = intr();
        let mut depth = DepthMap::zeros(128, 128);
        depth.set(10, 10, 1.0);
        let mask = BinaryMask::filled(128, 128, false);
        let pm = backproject(&depth, &k, &mask).unwrap();
        assert_eq!(pm.valid.count(), 0);
    }

    #[test]
    fn project_examples() {
        let k = CameraIntrinsics::new(500.0, 500.0, 64.0, 64.0, 640, 480).unwrap();
        for z in [0.5, 1.0, 3.7] {
            let (u, v) = project(Vector3::new(0.0, 0.0, z), &k).unwrap();
            assert_relative_eq!(u, 64.0);
            assert_relative_eq!(v, 64.0);
        }
        let (u, _) = project(Vector3::new(1.0, 0.0, 2.0), &k).unwrap();
        assert_relative_eq!(u, 314.0);
        assert!(project(Vector3::new(0.0, 0.0, 0.0), &k).is_err());
        assert!(project(Vector3::new(0.0, 0.0, -1.0), &k).is_err());
    }

    #[test]
    fn project_backproject_roundtrip() {
        let k = intr();
        let mut depth = DepthMap::zeros(128, 128);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        for _ in 0..200 {
            let u = rng.gen_range(0..128);
            let v = rng.gen_range(0..128);
            depth.set(u, v, rng.gen_range(0.3..3.0));
        }
        let mask = BinaryMask::filled(128, 128, true);
        let pm = backproject(&depth, &k, &mask).unwrap();
        for v in 0..128 {
            for u in 0..128 {
                if let Some(p) = pm.get(u, v) {
                    let (pu, pv) = project(p, &k).unwrap();
                    assert!((pu - u as f64).abs() < 1e-9);
                    assert!((pv - v as f64).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn diameter_matches_hand_evaluations() {
        let k = intr();
        // 60x80 bounding box at constant depth 0.5.
        let mut mask = BinaryMask::filled(128, 128, false);
        let mut depth = DepthMap::zeros(128, 128);
        for v in 20..100 {
            for u in 30..90 {
                mask.set(u, v, true);
                depth.set(u, v, 0.5);
            }
        }
        let d = estimate_diameter(&mask, &depth, &k).unwrap();
        assert_relative_eq!(d, 0.2, epsilon = 1e-12);

        // Single pixel, unit focal length, unit depth.
        let k1 = CameraIntrinsics::new(1.0, 1.0, 1.0, 1.0, 4, 4).unwrap();
        let mut m1 = BinaryMask::filled(4, 4, false);
        m1.set(2, 2, true);
        let mut d1 = DepthMap::zeros(4, 4);
        d1.set(2, 2, 1.0);
        assert_relative_eq!(
            estimate_diameter(&m1, &d1, &k1).unwrap(),
            2.0f64.sqrt(),
            epsilon = 1e-12
        );

        let empty = BinaryMask::filled(128, 128, false);
        assert!(matches!(
            estimate_diameter(&empty, &depth, &k),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn normalization_examples() {
        let s = NormalizationTransform::new(Vector3::new(0.1, 0.2, 0.3), 0.2).unwrap();
        assert_relative_eq!(
            s.apply(Vector3::new(0.3, 0.2, 0.3)),
            Vector3::new(1.0, 0.0, 0.0)
        );
        // Inverse composition.
        let p = Vector3::new(-0.04, 0.77, 0.21);
        assert_relative_eq!(s.invert(s.apply(p)), p, epsilon = 1e-12);
        assert!(NormalizationTransform::new(Vector3::zeros(), 0.0).is_err());
        assert!(NormalizationTransform::new(Vector3::zeros(), -0.5).is_err());
    }

    #[test]
    fn normalization_of_constant_points_is_zero() {
        let c = Vector3::new(0.3, -0.1, 1.2);
        let points = PointMap {
            points: vec![c; 9],
            valid: BinaryMask::filled(3, 3, true),
        };
        let s = compute_normalization(&points, 1.0).unwrap();
        for p in points.valid_points() {
            assert_relative_eq!(s.apply(p), Vector3::zeros());
        }
    }

    #[test]
    fn roc_reference_center_pixel_is_origin() {
        let k = intr();
        let mut depth = DepthMap::zeros(128, 128);
        let mut mask = BinaryMask::filled(128, 128, false);
        depth.set(64, 64, 1.0);
        mask.set(64, 64, true);
        let pm = backproject(&depth, &k, &mask).unwrap();
        let s = compute_normalization(&pm, 0.5).unwrap();
        let (roc, clamped) = roc_reference(&depth, &mask, &k, &s).unwrap();
        assert_eq!(roc.get(64, 64).unwrap(), [0.0, 0.0, 0.0]);
        assert_eq!(clamped, 0);
    }

    #[test]
    fn roc_query_identity_matches_reference() {
        let k = intr();
        let mut depth = DepthMap::zeros(128, 128);
        let mut mask = BinaryMask::filled(128, 128, false);
        for v in 50..80 {
            for u in 40..90 {
                depth.set(u, v, 0.8 + 0.001 * (u + v) as f64);
                mask.set(u, v, true);
            }
        }
        let pm = backproject(&depth, &k, &mask).unwrap();
        let d = estimate_diameter(&mask, &depth, &k).unwrap();
        let s = compute_normalization(&pm, d).unwrap();
        let (r_ref, _) = roc_reference(&depth, &mask, &k, &s).unwrap();
        let (r_query, _) =
            roc_query(&depth, &mask, &k, &RigidTransform::identity(), &s).unwrap();
        assert_eq!(r_ref, r_query);
    }

    #[test]
    fn roc_query_pure_translation_shifts_values() {
        let k = intr();
        let mut depth = DepthMap::zeros(128, 128);
        let mut mask = BinaryMask::filled(128, 128, false);
        for v in 60..70 {
            for u in 60..70 {
                depth.set(u, v, 1.0);
                mask.set(u, v, true);
            }
        }
        let pm = backproject(&depth, &k, &mask).unwrap();
        let s = compute_normalization(&pm, 2.0).unwrap();
        let t = RigidTransform::new(Matrix3::identity(), Vector3::new(0.2, -0.1, 0.3)).unwrap();
        let (r0, _) = roc_query(&depth, &mask, &k, &RigidTransform::identity(), &s).unwrap();
        let (r1, _) = roc_query(&depth, &mask, &k, &t, &s).unwrap();
        let shift = t.translation / s.diameter;
        for v in 60..70 {
            for u in 60..70 {
                let a = r0.get(u, v).unwrap();
                let b = r1.get(u, v).unwrap();
                for c in 0..3 {
                    assert!((b[c] as f64 - a[c] as f64 - shift[c]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn roc_query_empty_mask_is_all_invalid() {
        let k = intr();
        let depth = DepthMap::zeros(128, 128);
        let mask = BinaryMask::filled(128, 128, false);
        let s = NormalizationTransform::new(Vector3::zeros(), 1.0).unwrap();
        let (roc, _) = roc_query(&depth, &mask, &k, &RigidTransform::identity(), &s).unwrap();
        assert_eq!(roc.valid().count(), 0);
        assert!(roc.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rigid_transform_validation_and_algebra() {
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.5, 1.1).into_inner();
        let t = RigidTransform::new(rot, Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let inv = t.inverse();
        let composed = t.compose(&inv);
        assert_relative_eq!(composed.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(composed.translation, Vector3::zeros(), epsilon = 1e-12);

        let skewed = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidTransform::new(skewed, Vector3::zeros()).is_err());
        let reflection = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidTransform::new(reflection, Vector3::zeros()).is_err());
    }

    #[test]
    fn rows_3x4_roundtrip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t = RigidTransform::sample_uniform(&mut rng, 1.0);
        let rows = t.to_rows_3x4();
        let back = RigidTransform::from_rows_3x4(&rows).unwrap();
        assert_relative_eq!(back.rotation, t.rotation, epsilon = 1e-12);
        assert_relative_eq!(back.translation, t.translation, epsilon = 1e-12);
    }

    #[test]
    fn compose_absolute_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let t_ro = RigidTransform::sample_uniform(&mut rng, 1.0);
        let id = RigidTransform::identity();
        let got = compose_absolute(&id, &t_ro);
        assert_relative_eq!(got.rotation, t_ro.rotation, epsilon = 1e-12);
        assert_relative_eq!(got.translation, t_ro.translation, epsilon = 1e-12);

        let r = RigidTransform::sample_uniform(&mut rng, 0.0);
        let got = compose_absolute(&r, &id);
        assert_relative_eq!(got.rotation, r.rotation.transpose(), epsilon = 1e-12);

        // Random pair against hand multiplication in homogeneous form.
        let t_rq = RigidTransform::sample_uniform(&mut rng, 1.0);
        let t_ro = RigidTransform::sample_uniform(&mut rng, 1.0);
        let got = compose_absolute(&t_rq, &t_ro);
        let want_r = t_rq.rotation.transpose() * t_ro.rotation;
        let want_t = t_rq.rotation.transpose() * (t_ro.translation - t_rq.translation);
        assert_relative_eq!(got.rotation, want_r, epsilon = 1e-12);
        assert_relative_eq!(got.translation, want_t, epsilon = 1e-12);
    }

    #[test]
    fn rotation_angle_is_geodesic() {
        let a = RigidTransform::identity();
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 0.25f64.to_radians());
        let b = RigidTransform::from_parts_unchecked(rot.into_inner(), Vector3::zeros());
        assert_relative_eq!(a.rotation_angle_deg_to(&b), 0.25, epsilon = 1e-9);
    }

    #[test]
    fn recover_pose_insufficient_pixels_errors() {
        let k = intr();
        let mut depth = DepthMap::zeros(128, 128);
        let mut mask = BinaryMask::filled(128, 128, false);
        depth.set(10, 10, 1.0);
        depth.set(20, 20, 1.0);
        mask.set(10, 10, true);
        mask.set(20, 20, true);
        let s = NormalizationTransform::new(Vector3::zeros(), 1.0).unwrap();
        let pm = backproject(&depth, &k, &mask).unwrap();
        let (roc, _) = roc_from_points(&pm, None, &s);
        assert!(matches!(
            recover_relative_pose(&roc, &depth, &mask, &k, &s),
            Err(Error::InsufficientCorrespondences { got: 2, need: 3 })
        ));
    }

    #[test]
    fn recover_pose_roundtrip_identity_view() {
        let k = intr();
        let mut depth = DepthMap::zeros(128, 128);
        let mut mask = BinaryMask::filled(128, 128, false);
        for v in 40..90 {
            for u in 30..100 {
                depth.set(u, v, 0.6 + 0.002 * (u as f64) + 0.001 * (v as f64));
                mask.set(u, v, true);
            }
        }
        let pm = backproject(&depth, &k, &mask).unwrap();
        let d = estimate_diameter(&mask, &depth, &k).unwrap();
        let s = compute_normalization(&pm, d).unwrap();
        let (roc, _) = roc_reference(&depth, &mask, &k, &s).unwrap();
        let t = recover_relative_pose(&roc, &depth, &mask, &k, &s).unwrap();
        let id = RigidTransform::identity();
        assert!(t.rotation_angle_deg_to(&id) < 0.01);
        assert!(t.translation_distance_to(&id) < 1e-4 * s.diameter);
    }

    #[test]
    fn roc_map_from_parts_enforces_invariants() {
        let mut mask = BinaryMask::filled(2, 1, false);
        mask.set(0, 0, true);
        // Invalid pixel (index 1) is zeroed even if nonzero on input.
        let roc = RocMap::from_parts(2, 1, vec![0.5, -0.5, 0.0, 9.0, 9.0, 9.0], mask.clone())
            .unwrap();
        assert_eq!(&roc.data()[3..6], &[0.0, 0.0, 0.0]);
        // Out-of-range valid pixel rejected.
        assert!(RocMap::from_parts(2, 1, vec![1.5, 0.0, 0.0, 0.0, 0.0, 0.0], mask).is_err());
    }

    #[test]
    fn hw4_tensor_roundtrip() {
        let mut mask = BinaryMask::filled(3, 2, false);
        mask.set(1, 0, true);
        mask.set(2, 1, true);
        let mut data = vec![0.0f32; 18];
        data[3..6].copy_from_slice(&[0.25, -0.75, 1.0]);
        data[15..18].copy_from_slice(&[-1.0, 0.0, 0.5]);
        let roc = RocMap::from_parts(3, 2, data, mask).unwrap();
        let t = roc.to_hw4_tensor();
        assert_eq!(t.shape(), &[2, 3, 4]);
        let (back, clamped) = RocMap::from_hw4_tensor(&t).unwrap();
        assert_eq!(back, roc);
        assert_eq!(clamped, 0);
    }

    #[test]
    fn mask_iou_counts_pixels() {
        let mut a = BinaryMask::filled(4, 1, false);
        let mut b = BinaryMask::filled(4, 1, false);
        a.set(0, 0, true);
        a.set(1, 0, true);
        b.set(1, 0, true);
        b.set(2, 0, true);
        assert_relative_eq!(a.iou(&b).unwrap(), 1.0 / 3.0);
        let empty = BinaryMask::filled(4, 1, false);
        assert_relative_eq!(empty.iou(&empty).unwrap(), 1.0);
    }
}
