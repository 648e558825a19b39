//! Least-squares rigid alignment of paired 3D point sets.

use nalgebra::{Matrix3, Vector3};

use super::RigidTransform;
use crate::error::{Error, Result};

/// Singular values below this are treated as zero rank.
const DEGENERACY_TOL: f64 = 1e-12;

/// Find the rigid transform `T = (R, t)` minimizing `sum_i ||T(q_i) - p_i||^2`
/// with `det(R) = +1` and no scale (both sets are metric).
///
/// Method: form the cross-covariance `H = (1/N) sum (p_i - mu_p)(q_i - mu_q)^T`,
/// take its SVD `H = U diag(s) V^T`, and set `R = U diag(1, 1, sign(det(U V^T))) V^T`,
/// `t = mu_p - R mu_q`. The sign flip on the smallest singular direction
/// corrects reflections.
///
/// Errors when fewer than 3 pairs are given or when the two smallest
/// singular values of `H` both vanish (collinear or coincident points leave
/// the rotation underdetermined).
pub fn umeyama(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> Result<RigidTransform> {
    if p.len() != q.len() {
        return Err(Error::shape(format!(
            "alignment needs paired sets, got {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let n = p.len();
    if n < 3 {
        return Err(Error::InsufficientCorrespondences { got: n, need: 3 });
    }

    let inv_n = 1.0 / n as f64;
    let mut mu_p = Vector3::zeros();
    let mut mu_q = Vector3::zeros();
    for i in 0..n {
        mu_p += p[i];
        mu_q += q[i];
    }
    mu_p *= inv_n;
    mu_q *= inv_n;

    let mut h = Matrix3::zeros();
    for i in 0..n {
        h += (p[i] - mu_p) * (q[i] - mu_q).transpose();
    }
    h *= inv_n;

    // nalgebra's `svd` sorts singular values in descending order.
    let svd = h.svd(true, true);
    let sigma = svd.singular_values;
    if sigma[1] < DEGENERACY_TOL && sigma[2] < DEGENERACY_TOL {
        return Err(Error::Degenerate(format!(
            "point sets are collinear or coincident (singular values {:.3e}, {:.3e}, {:.3e})",
            sigma[0], sigma[1], sigma[2]
        )));
    }
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");

    let d = (u * v_t).determinant();
    let sign = if d < 0.0 { -1.0 } else { 1.0 };
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let r = u * correction * v_t;
    let t = mu_p - r * mu_q;
    Ok(RigidTransform::from_parts_unchecked(r, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn identical_sets_give_identity() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.3, 0.4, 0.5),
        ];
        let t = umeyama(&pts, &pts).unwrap();
        assert_relative_eq!(t.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(t.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn recovers_quarter_turn_and_offset() {
        // p = R q + t with R a 90 degree turn about z and t = (1, 2, 3).
        let r = nalgebra::Rotation3::from_axis_angle(
            &Vector3::z_axis(),
            std::f64::consts::FRAC_PI_2,
        )
        .into_inner();
        let t = Vector3::new(1.0, 2.0, 3.0);
        let q = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.2, -0.7, 0.4),
        ];
        let p: Vec<_> = q.iter().map(|&v| r * v + t).collect();
        let got = umeyama(&p, &q).unwrap();
        assert_relative_eq!(got.rotation, r, epsilon = 1e-9);
        assert_relative_eq!(got.translation, t, epsilon = 1e-9);
    }

    #[test]
    fn random_transforms_recover_exactly() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let truth = RigidTransform::sample_uniform(&mut rng, 2.0);
            let q: Vec<Vector3<f64>> = (0..20)
                .map(|_| {
                    Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect();
            let p: Vec<_> = q.iter().map(|&v| truth.apply(v)).collect();
            let got = umeyama(&p, &q).unwrap();
            assert_relative_eq!(got.rotation, truth.rotation, epsilon = 1e-9);
            assert_relative_eq!(got.translation, truth.translation, epsilon = 1e-9);
        }
    }

    #[test]
    fn too_few_points_error() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        assert!(matches!(
            umeyama(&pts, &pts),
            Err(Error::InsufficientCorrespondences { got: 2, need: 3 })
        ));
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let q: Vec<Vector3<f64>> = (0..10)
            .map(|i| Vector3::new(i as f64 * 0.1, 2.0 * i as f64 * 0.1, -i as f64 * 0.1))
            .collect();
        let p = q.clone();
        assert!(matches!(umeyama(&p, &q), Err(Error::Degenerate(_))));
    }

    #[test]
    fn planar_points_still_resolve_rotation() {
        // Rank-2 covariance: alignment is well posed, reflection correction
        // picks the proper rotation.
        let r = nalgebra::Rotation3::from_euler_angles(0.2, -0.4, 0.9).into_inner();
        let t = Vector3::new(-0.3, 0.1, 0.7);
        let q: Vec<Vector3<f64>> = (0..12)
            .map(|i| {
                let a = i as f64 * 0.5;
                Vector3::new(a.cos(), a.sin(), 0.0)
            })
            .collect();
        let p: Vec<_> = q.iter().map(|&v| r * v + t).collect();
        let got = umeyama(&p, &q).unwrap();
        assert_relative_eq!(got.rotation, r, epsilon = 1e-9);
        assert_relative_eq!(got.translation, t, epsilon = 1e-9);
        assert_relative_eq!(got.rotation.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn noisy_alignment_is_least_squares_optimal_under_perturbation() {
        // With noise the recovered transform should beat (or match) the
        // generating one in summed squared residual, since it is the
        // least-squares minimizer.
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let truth = RigidTransform::sample_uniform(&mut rng, 1.0);
        let q: Vec<Vector3<f64>> = (0..50)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let p: Vec<_> = q
            .iter()
            .map(|&v| {
                truth.apply(v)
                    + Vector3::new(
                        rng.gen_range(-0.01..0.01),
                        rng.gen_range(-0.01..0.01),
                        rng.gen_range(-0.01..0.01),
                    )
            })
            .collect();
        let got = umeyama(&p, &q).unwrap();
        let res = |t: &RigidTransform| -> f64 {
            p.iter()
                .zip(&q)
                .map(|(pi, qi)| (t.apply(*qi) - pi).norm_squared())
                .sum()
        };
        assert!(res(&got) <= res(&truth) + 1e-12);
    }
}
