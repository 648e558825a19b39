//! Pose-error metrics: ADD, ADD-S, recall at a diameter fraction, and the
//! area under the accuracy-threshold curve.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

/// Mean distance between corresponding model points under the two poses.
pub fn add_error(
    points: &[Vector3<f64>],
    t_gt: &RigidTransform,
    t_est: &RigidTransform,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty model point set".into()));
    }
    let sum: f64 = points
        .iter()
        .map(|&p| (t_gt.apply(p) - t_est.apply(p)).norm())
        .sum();
    Ok(sum / points.len() as f64)
}

/// Symmetric variant: mean distance from each ground-truth-posed point to
/// the nearest estimated-posed point (brute-force nearest neighbor; model
/// point sets stay small here).
pub fn adds_error(
    points: &[Vector3<f64>],
    t_gt: &RigidTransform,
    t_est: &RigidTransform,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty model point set".into()));
    }
    let est: Vec<Vector3<f64>> = points.iter().map(|&p| t_est.apply(p)).collect();
    let sum: f64 = points
        .iter()
        .map(|&p| {
            let g = t_gt.apply(p);
            est.iter()
                .map(|e| (g - e).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    Ok(sum / points.len() as f64)
}

/// Area under the accuracy-vs-threshold curve for thresholds in
/// `[0, cutoff]`, normalized to `[0, 1]`. Errors above the cutoff
/// contribute nothing; the closed form is
/// `mean_i(max(0, cutoff - e_i)) / cutoff`.
pub fn auc(errors: &[f64], cutoff: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("empty error list".into()));
    }
    if !(cutoff > 0.0) || !cutoff.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "AUC cutoff must be positive and finite, got {cutoff}"
        )));
    }
    let sum: f64 = errors.iter().map(|&e| (cutoff - e).max(0.0)).sum();
    Ok(sum / (errors.len() as f64 * cutoff))
}

/// Fraction of samples whose error is strictly below `ratio` times the
/// object diameter.
pub fn recall_at(errors: &[f64], diameters: &[f64], ratio: f64) -> Result<f64> {
    if errors.len() != diameters.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} errors vs {} diameters",
            errors.len(),
            diameters.len()
        )));
    }
    if errors.is_empty() {
        return Err(Error::InvalidArgument("empty error list".into()));
    }
    let hits = errors
        .iter()
        .zip(diameters)
        .filter(|(e, d)| **e < ratio * **d)
        .count();
    Ok(hits as f64 / errors.len() as f64)
}

/// Default AUC cutoff in meters (the usual 10 cm evaluation convention).
pub const AUC_CUTOFF_M: f64 = 0.1;
/// Default recall threshold as a fraction of the object diameter.
pub const RECALL_RATIO: f64 = 0.1;

/// Per-sample pose errors.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SampleErrors {
    pub sample_id: String,
    pub add: f64,
    pub adds: f64,
    pub rot_deg: f64,
    pub trans_m: f64,
    pub diameter: f64,
}

impl SampleErrors {
    pub fn compute(
        sample_id: &str,
        points: &[Vector3<f64>],
        diameter: f64,
        t_gt: &RigidTransform,
        t_est: &RigidTransform,
    ) -> Result<Self> {
        Ok(SampleErrors {
            sample_id: sample_id.to_string(),
            add: add_error(points, t_gt, t_est)?,
            adds: adds_error(points, t_gt, t_est)?,
            rot_deg: t_gt.rotation_angle_deg_to(t_est),
            trans_m: t_gt.translation_distance_to(t_est),
            diameter,
        })
    }
}

/// Aggregate report over a sample set.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PoseErrorReport {
    pub samples: Vec<SampleErrors>,
    pub recall_add: f64,
    pub recall_adds: f64,
    pub auc_add: f64,
    pub auc_adds: f64,
    pub mean_add: f64,
    pub mean_adds: f64,
    pub mean_rot_deg: f64,
    pub mean_trans_m: f64,
}

impl PoseErrorReport {
    pub fn aggregate(samples: Vec<SampleErrors>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no samples to aggregate".into()));
        }
        let add: Vec<f64> = samples.iter().map(|s| s.add).collect();
        let adds: Vec<f64> = samples.iter().map(|s| s.adds).collect();
        let diam: Vec<f64> = samples.iter().map(|s| s.diameter).collect();
        let n = samples.len() as f64;
        Ok(PoseErrorReport {
            recall_add: recall_at(&add, &diam, RECALL_RATIO)?,
            recall_adds: recall_at(&adds, &diam, RECALL_RATIO)?,
            auc_add: auc(&add, AUC_CUTOFF_M)?,
            auc_adds: auc(&adds, AUC_CUTOFF_M)?,
            mean_add: add.iter().sum::<f64>() / n,
            mean_adds: adds.iter().sum::<f64>() / n,
            mean_rot_deg: samples.iter().map(|s| s.rot_deg).sum::<f64>() / n,
            mean_trans_m: samples.iter().map(|s| s.trans_m).sum::<f64>() / n,
            samples,
        })
    }

    /// Aligned plain-text table of the aggregate numbers.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>10} {:>10} {:>10} {:>10}\n",
            "metric", "ADD", "ADD-S", "rot(deg)", "trans(m)"
        ));
        out.push_str(&format!(
            "{:<14} {:>10.4} {:>10.4} {:>10.3} {:>10.4}\n",
            "mean", self.mean_add, self.mean_adds, self.mean_rot_deg, self.mean_trans_m
        ));
        out.push_str(&format!(
            "{:<14} {:>10.4} {:>10.4} {:>10} {:>10}\n",
            "recall@0.1d", self.recall_add, self.recall_adds, "-", "-"
        ));
        out.push_str(&format!(
            "{:<14} {:>10.4} {:>10.4} {:>10} {:>10}\n",
            "auc@0.1m", self.auc_add, self.auc_adds, "-", "-"
        ));
        out.push_str(&format!("samples: {}\n", self.samples.len()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                )
            })
            .collect()
    }

    // Exact integral of the empirical accuracy step function, computed
    // segment by segment over the sorted errors. Independent of the
    // closed form used by `auc`.
    fn auc_by_segments(errors: &[f64], cutoff: f64) -> f64 {
        let mut sorted: Vec<f64> = errors.iter().map(|e| e.min(cutoff)).collect();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len() as f64;
        let mut area = 0.0;
        let mut prev = 0.0;
        for (i, &e) in sorted.iter().enumerate() {
            // Before reaching e, exactly i errors are below the threshold.
            area += (e - prev) * i as f64 / m;
            prev = e;
        }
        area += (cutoff - prev) * 1.0;
        area / cutoff
    }

    #[test]
    fn identical_poses_give_zero_and_translation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points = random_points(50, &mut rng);
        let t = RigidTransform::sample_uniform(&mut rng, 0.5);
        assert_eq!(add_error(&points, &t, &t).unwrap(), 0.0);
        assert_eq!(adds_error(&points, &t, &t).unwrap(), 0.0);
        // A pure translation offset moves every point by exactly its norm.
        let shifted = RigidTransform::new(
            t.rotation,
            t.translation + Vector3::new(0.01, 0.0, 0.0),
        )
        .unwrap();
        let e = add_error(&points, &t, &shifted).unwrap();
        assert!((e - 0.01).abs() < 1e-12, "{e}");
        assert!(add_error(&[], &t, &t).is_err());
    }

    #[test]
    fn rotation_error_respects_chord_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let points = random_points(64, &mut rng);
        let max_norm = points.iter().map(|p| p.norm()).fold(0.0, f64::max);
        for _ in 0..50 {
            let t = RigidTransform::sample_uniform(&mut rng, 0.3);
            let theta: f64 = rng.gen_range(0.0..1.0);
            let axis = nalgebra::Unit::new_normalize(Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            let extra = Matrix3::from(nalgebra::Rotation3::from_axis_angle(&axis, theta));
            let est = RigidTransform::new(t.rotation * extra, t.translation).unwrap();
            let e = add_error(&points, &t, &est).unwrap();
            let bound = 2.0 * (theta / 2.0).sin() * max_norm;
            assert!(e <= bound + 1e-12, "{e} vs {bound}");
        }
    }

    #[test]
    fn symmetric_sphere_has_near_zero_adds_under_rotation() {
        // Dense samples on a sphere: rotating the pose barely changes the
        // nearest-neighbor distances while ADD sees the full chord.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<Vector3<f64>> = (0..500)
            .map(|_| {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                v.normalize() * 0.1
            })
            .collect();
        let t = RigidTransform::identity();
        let rot = Matrix3::from(nalgebra::Rotation3::from_axis_angle(
            &Vector3::y_axis(),
            1.0,
        ));
        let est = RigidTransform::new(rot, Vector3::zeros()).unwrap();
        let s = adds_error(&points, &t, &est).unwrap();
        let a = add_error(&points, &t, &est).unwrap();
        // The floor on ADD-S is the sampling density: mean nearest-neighbor
        // spacing for n points on a sphere of radius r.
        let spacing = (4.0 * std::f64::consts::PI * 0.1f64.powi(2) / 500.0).sqrt();
        assert!(s < spacing, "adds {s} vs spacing {spacing}");
        assert!(s < 0.15 * a, "adds {s} vs add {a}");
    }

    #[test]
    fn adds_never_exceeds_add_and_both_are_left_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let points = random_points(20, &mut rng);
            let t_gt = RigidTransform::sample_uniform(&mut rng, 0.4);
            let t_est = RigidTransform::sample_uniform(&mut rng, 0.4);
            let add = add_error(&points, &t_gt, &t_est).unwrap();
            let adds = adds_error(&points, &t_gt, &t_est).unwrap();
            assert!(adds <= add + 1e-12);

            let common = RigidTransform::sample_uniform(&mut rng, 0.4);
            let add2 = add_error(&points, &common.compose(&t_gt), &common.compose(&t_est)).unwrap();
            let adds2 =
                adds_error(&points, &common.compose(&t_gt), &common.compose(&t_est)).unwrap();
            assert!((add - add2).abs() < 1e-9, "{add} vs {add2}");
            assert!((adds - adds2).abs() < 1e-9, "{adds} vs {adds2}");
        }
    }

    #[test]
    fn auc_boundary_cases_and_oracle_agreement() {
        assert_eq!(auc(&[0.0, 0.0], 0.1).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 9.0], 0.1).unwrap(), 0.0);
        assert!(auc(&[], 0.1).is_err());
        assert!(auc(&[0.1], 0.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..200 {
            let m = rng.gen_range(1..60);
            let cutoff = rng.gen_range(0.01..0.5);
            let errors: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..(2.0 * cutoff))).collect();
            let closed = auc(&errors, cutoff).unwrap();
            let oracle = auc_by_segments(&errors, cutoff);
            assert!(
                (closed - oracle).abs() < 1e-6,
                "trial {trial}: {closed} vs {oracle}"
            );
        }
    }

    #[test]
    fn auc_is_monotone_in_each_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let mut errors: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..0.2)).collect();
            let before = auc(&errors, 0.1).unwrap();
            let idx = rng.gen_range(0..errors.len());
            errors[idx] += rng.gen_range(0.0..0.1);
            let after = auc(&errors, 0.1).unwrap();
            assert!(after <= before + 1e-15);
        }
    }

    #[test]
    fn recall_uses_strict_inequality() {
        let d = [1.0, 1.0, 1.0, 1.0];
        // Exactly at 0.1 d counts as a failure.
        let r = recall_at(&[0.1, 0.099, 0.101, 0.0], &d, 0.1).unwrap();
        assert_eq!(r, 0.5);
        assert!(recall_at(&[0.1], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn report_aggregates_and_serializes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let points = random_points(30, &mut rng);
        let mut samples = Vec::new();
        for i in 0..10 {
            let t_gt = RigidTransform::sample_uniform(&mut rng, 0.3);
            let t_est = if i < 7 {
                t_gt
            } else {
                RigidTransform::sample_uniform(&mut rng, 0.3)
            };
            samples.push(
                SampleErrors::compute(&format!("s{i}"), &points, 0.3, &t_gt, &t_est).unwrap(),
            );
        }
        let report = PoseErrorReport::aggregate(samples).unwrap();
        assert!(report.recall_add >= 0.7);
        assert!(report.recall_adds >= report.recall_add - 1e-12);
        let json = serde_json::to_string(&report).unwrap();
        let back: PoseErrorReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.samples.len(), 10);
        assert!(report.table().contains("recall@0.1d"));
    }
}
