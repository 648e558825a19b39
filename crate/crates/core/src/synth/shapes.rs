//! Analytic primitives: ray intersection, outward normals, containment,
//! surface area, and uniform surface sampling. All in the shape's local
//! frame with the cylinder/capsule axis along +z.

use nalgebra::Vector3;
use rand::Rng;

/// Ray parameter below this counts as "behind the origin"; keeps surface
/// acne away when the camera sits exactly on a surface plane.
const T_MIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Shape {
    /// Axis-aligned box given by half extents.
    Box { half: [f64; 3] },
    /// Finite cylinder: radius, half height, axis +z, with end caps.
    Cylinder { radius: f64, half_height: f64 },
    Sphere { radius: f64 },
    /// Cylinder of `half_length` capped by hemispheres of `radius`.
    Capsule { radius: f64, half_length: f64 },
}

impl Shape {
    pub fn validate(&self) -> bool {
        match *self {
            Shape::Box { half } => half.iter().all(|&h| h > 0.0),
            Shape::Cylinder {
                radius,
                half_height,
            } => radius > 0.0 && half_height > 0.0,
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Capsule {
                radius,
                half_length,
            } => radius > 0.0 && half_length > 0.0,
        }
    }

    /// Nearest intersection parameter `t > T_MIN` of `origin + t * dir`
    /// with the surface, if any. `dir` need not be normalized; `t` is in
    /// units of `dir`.
    pub fn intersect(&self, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<f64> {
        match *self {
            Shape::Sphere { radius } => sphere_hit(origin, dir, radius),
            Shape::Box { half } => box_hit(origin, dir, half),
            Shape::Cylinder {
                radius,
                half_height,
            } => cylinder_hit(origin, dir, radius, half_height),
            Shape::Capsule {
                radius,
                half_length,
            } => capsule_hit(origin, dir, radius, half_length),
        }
    }

    /// Outward unit normal at a surface point.
    pub fn normal_at(&self, p: Vector3<f64>) -> Vector3<f64> {
        match *self {
            Shape::Sphere { .. } => p.normalize(),
            Shape::Box { half } => {
                // The face whose relative coordinate is largest.
                let rel = Vector3::new(p.x / half[0], p.y / half[1], p.z / half[2]);
                let (ax, _) = rel
                    .iter()
                    .map(|v| v.abs())
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
                    .expect("three axes");
                let mut n = Vector3::zeros();
                n[ax] = rel[ax].signum();
                n
            }
            Shape::Cylinder { half_height, .. } => {
                if p.z.abs() >= half_height - 1e-9 {
                    // On a cap (rim points pick the cap normal).
                    Vector3::new(0.0, 0.0, p.z.signum())
                } else {
                    Vector3::new(p.x, p.y, 0.0).normalize()
                }
            }
            Shape::Capsule { half_length, .. } => {
                if p.z.abs() <= half_length {
                    Vector3::new(p.x, p.y, 0.0).normalize()
                } else {
                    let center = Vector3::new(0.0, 0.0, half_length * p.z.signum());
                    (p - center).normalize()
                }
            }
        }
    }

    pub fn contains(&self, p: Vector3<f64>) -> bool {
        match *self {
            Shape::Sphere { radius } => p.norm() < radius,
            Shape::Box { half } => {
                p.x.abs() < half[0] && p.y.abs() < half[1] && p.z.abs() < half[2]
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => p.z.abs() < half_height && p.xy().norm() < radius,
            Shape::Capsule {
                radius,
                half_length,
            } => {
                let clamped = p.z.clamp(-half_length, half_length);
                (p - Vector3::new(0.0, 0.0, clamped)).norm() < radius
            }
        }
    }

    pub fn surface_area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Shape::Sphere { radius } => 4.0 * PI * radius * radius,
            Shape::Box { half } => {
                8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2])
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => 2.0 * PI * radius * (2.0 * half_height) + 2.0 * PI * radius * radius,
            Shape::Capsule {
                radius,
                half_length,
            } => 2.0 * PI * radius * (2.0 * half_length) + 4.0 * PI * radius * radius,
        }
    }

    /// Uniform sample on the surface.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> Vector3<f64> {
        use std::f64::consts::{PI, TAU};
        match *self {
            Shape::Sphere { radius } => unit_sphere_dir(rng) * radius,
            Shape::Box { half } => {
                let areas = [
                    half[1] * half[2], // x faces
                    half[0] * half[2], // y faces
                    half[0] * half[1], // z faces
                ];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = i;
                        break;
                    }
                    pick -= a;
                }
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let mut p = Vector3::new(
                    rng.gen_range(-half[0]..=half[0]),
                    rng.gen_range(-half[1]..=half[1]),
                    rng.gen_range(-half[2]..=half[2]),
                );
                p[axis] = half[axis] * side;
                p
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let side_area = 2.0 * PI * radius * (2.0 * half_height);
                let cap_area = PI * radius * radius;
                let total = side_area + 2.0 * cap_area;
                let pick = rng.gen_range(0.0..total);
                if pick < side_area {
                    let phi = rng.gen_range(0.0..TAU);
                    Vector3::new(
                        radius * phi.cos(),
                        radius * phi.sin(),
                        rng.gen_range(-half_height..=half_height),
                    )
                } else {
                    let z = if pick < side_area + cap_area {
                        half_height
                    } else {
                        -half_height
                    };
                    let r = radius * rng.gen_range(0.0f64..1.0).sqrt();
                    let phi = rng.gen_range(0.0..TAU);
                    Vector3::new(r * phi.cos(), r * phi.sin(), z)
                }
            }
            Shape::Capsule {
                radius,
                half_length,
            } => {
                let side_area = 2.0 * PI * radius * (2.0 * half_length);
                let sphere_area = 4.0 * PI * radius * radius;
                if rng.gen_range(0.0..side_area + sphere_area) < side_area {
                    let phi = rng.gen_range(0.0..TAU);
                    Vector3::new(
                        radius * phi.cos(),
                        radius * phi.sin(),
                        rng.gen_range(-half_length..=half_length),
                    )
                } else {
                    let dir = unit_sphere_dir(rng);
                    let z_off = half_length * dir.z.signum();
                    Vector3::new(dir.x * radius, dir.y * radius, z_off + dir.z * radius)
                }
            }
        }
    }
}

fn unit_sphere_dir(rng: &mut impl Rng) -> Vector3<f64> {
    use rand_distr::{Distribution, StandardNormal};
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

fn accept(t: f64) -> Option<f64> {
    (t > T_MIN).then_some(t)
}

fn nearest(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

fn sphere_hit(o: Vector3<f64>, d: Vector3<f64>, radius: f64) -> Option<f64> {
    let a = d.dot(&d);
    let b = 2.0 * o.dot(&d);
    let c = o.dot(&o) - radius * radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / (2.0 * a);
    let t1 = (-b + sq) / (2.0 * a);
    nearest(accept(t0), accept(t1))
}

fn box_hit(o: Vector3<f64>, d: Vector3<f64>, half: [f64; 3]) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for ax in 0..3 {
        if d[ax].abs() < 1e-15 {
            if o[ax].abs() > half[ax] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[ax];
        let mut t1 = (-half[ax] - o[ax]) * inv;
        let mut t2 = (half[ax] - o[ax]) * inv;
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        t_near = t_near.max(t1);
        t_far = t_far.min(t2);
        if t_near > t_far {
            return None;
        }
    }
    nearest(accept(t_near), accept(t_far))
}

fn cylinder_hit(o: Vector3<f64>, d: Vector3<f64>, radius: f64, half_height: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    // Lateral surface.
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = 2.0 * (o.x * d.x + o.y * d.y);
        let c = o.x * o.x + o.y * o.y - radius * radius;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                if let Some(t) = accept(t) {
                    if (o.z + t * d.z).abs() <= half_height {
                        best = nearest(best, Some(t));
                    }
                }
            }
        }
    }
    // End caps.
    if d.z.abs() > 1e-15 {
        for z_cap in [half_height, -half_height] {
            if let Some(t) = accept((z_cap - o.z) / d.z) {
                let x = o.x + t * d.x;
                let y = o.y + t * d.y;
                if x * x + y * y <= radius * radius {
                    best = nearest(best, Some(t));
                }
            }
        }
    }
    best
}

fn capsule_hit(o: Vector3<f64>, d: Vector3<f64>, radius: f64, half_length: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    // Cylindrical body between the hemisphere centers.
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-15 {
        let b = 2.0 * (o.x * d.x + o.y * d.y);
        let c = o.x * o.x + o.y * o.y - radius * radius;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                if let Some(t) = accept(t) {
                    if (o.z + t * d.z).abs() <= half_length {
                        best = nearest(best, Some(t));
                    }
                }
            }
        }
    }
    // Hemisphere ends: accept sphere hits on the outward side.
    for sign in [1.0, -1.0] {
        let center = Vector3::new(0.0, 0.0, sign * half_length);
        let oc = o - center;
        let aa = d.dot(&d);
        let b = 2.0 * oc.dot(&d);
        let c = oc.dot(&oc) - radius * radius;
        let disc = b * b - 4.0 * aa * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * aa), (-b + sq) / (2.0 * aa)] {
                if let Some(t) = accept(t) {
                    let z = o.z + t * d.z;
                    if (z - sign * half_length) * sign >= 0.0 {
                        best = nearest(best, Some(t));
                    }
                }
            }
        }
    }
    best
}
