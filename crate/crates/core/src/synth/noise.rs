//! Deterministic integer-hash value noise for procedural textures.
//!
//! No tables, no global state: a lattice value is a pure function of its
//! integer coordinates and a seed, so textures are reproducible across runs
//! and platforms.

use nalgebra::Vector3;

/// SplitMix64-style avalanche of lattice coordinates and seed into [0, 1).
pub fn lattice_hash(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (iz as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinear value noise in [0, 1).
pub fn value_noise(p: Vector3<f64>, seed: u64) -> f64 {
    let base = p.map(|c| c.floor());
    let frac = p - base;
    let (ix, iy, iz) = (base.x as i64, base.y as i64, base.z as i64);
    let (tx, ty, tz) = (smooth(frac.x), smooth(frac.y), smooth(frac.z));

    let mut corners = [0.0f64; 8];
    for (i, c) in corners.iter_mut().enumerate() {
        let dx = (i & 1) as i64;
        let dy = ((i >> 1) & 1) as i64;
        let dz = ((i >> 2) & 1) as i64;
        *c = lattice_hash(ix + dx, iy + dy, iz + dz, seed);
    }
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let x00 = lerp(corners[0], corners[1], tx);
    let x10 = lerp(corners[2], corners[3], tx);
    let x01 = lerp(corners[4], corners[5], tx);
    let x11 = lerp(corners[6], corners[7], tx);
    let y0 = lerp(x00, x10, ty);
    let y1 = lerp(x01, x11, ty);
    lerp(y0, y1, tz)
}

/// Three-octave fractal sum, normalized back into [0, 1).
pub fn fbm(p: Vector3<f64>, seed: u64) -> f64 {
    let mut sum = 0.0;
    let mut amp = 1.0;
    let mut freq = 1.0;
    let mut norm = 0.0;
    for octave in 0..3u64 {
        sum += amp * value_noise(p * freq, seed.wrapping_add(octave.wrapping_mul(0x9E3779B9)));
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_deterministic_and_spread() {
        assert_eq!(lattice_hash(1, 2, 3, 42), lattice_hash(1, 2, 3, 42));
        assert_ne!(lattice_hash(1, 2, 3, 42), lattice_hash(1, 2, 3, 43));
        assert_ne!(lattice_hash(1, 2, 3, 42), lattice_hash(2, 2, 3, 42));
        // All outputs in range over a grid.
        for i in -5..5 {
            for j in -5..5 {
                let v = lattice_hash(i, j, i * j, 7);
                assert!((0.0..1.0).contains(&v));
            }
        }
    }

    #[test]
    fn noise_is_continuous_at_lattice_points() {
        let seed = 9;
        let p = Vector3::new(2.0, -1.0, 5.0);
        let at = value_noise(p, seed);
        let eps = 1e-7;
        for d in [
            Vector3::new(eps, 0.0, 0.0),
            Vector3::new(0.0, eps, 0.0),
            Vector3::new(0.0, 0.0, eps),
            Vector3::new(-eps, -eps, -eps),
        ] {
            assert!((value_noise(p + d, seed) - at).abs() < 1e-5);
        }
    }

    #[test]
    fn fbm_stays_in_unit_range() {
        for i in 0..200 {
            let p = Vector3::new(i as f64 * 0.37, (i as f64) * -0.21, i as f64 * 0.11);
            let v = fbm(p, 1234);
            assert!((0.0..1.0).contains(&v), "fbm({p:?}) = {v}");
        }
    }
}
