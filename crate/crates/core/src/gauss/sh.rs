//! Real spherical harmonics for splat colors: evaluation up to degree 3 in
//! the de-facto splatting basis, and per-band rotation matrices.
//!
//! Band rotation matrices are solved numerically from the evaluation basis
//! itself: for band `l`, `2l+1` fixed generic directions give a square system
//! `A * D = B` with `A[k][m] = Y_lm(d_k)` and `B[k][m] = Y_lm(R^-1 d_k)`, so
//! rotated coefficients `c' = D * c` reproduce the original radiance in the
//! rotated frame. This stays consistent with the shading basis by
//! construction, whatever its sign conventions.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of coefficients per channel for a given degree.
pub fn band_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Evaluate the basis functions of band `l` at unit direction `d`.
/// Ordering matches the flattened coefficient layout (m = -l..l).
pub fn eval_band(l: usize, d: &Vector3<f64>) -> Vec<f64> {
    let (x, y, z) = (d.x, d.y, d.z);
    match l {
        0 => vec![SH_C0],
        1 => vec![-SH_C1 * y, SH_C1 * z, -SH_C1 * x],
        2 => {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            vec![
                SH_C2[0] * x * y,
                SH_C2[1] * y * z,
                SH_C2[2] * (2.0 * zz - xx - yy),
                SH_C2[3] * x * z,
                SH_C2[4] * (xx - yy),
            ]
        }
        3 => {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            vec![
                SH_C3[0] * y * (3.0 * xx - yy),
                SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4.0 * zz - xx - yy),
                SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
                SH_C3[4] * x * (4.0 * zz - xx - yy),
                SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3.0 * yy),
            ]
        }
        _ => panic!("SH degree {l} unsupported"),
    }
}

/// Full basis row for all bands up to `degree`, length `(degree+1)^2`.
pub fn eval_basis(degree: usize, d: &Vector3<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(band_count(degree));
    for l in 0..=degree {
        out.extend(eval_band(l, d));
    }
    out
}

/// Shade one channel: `0.5 + sum_b Y_b(dir) * coeffs[b]`, unclamped.
/// `coeffs` is band-flattened for one channel, length `(degree+1)^2`.
pub fn shade_channel(degree: usize, coeffs: &[f64], dir: &Vector3<f64>) -> f64 {
    let basis = eval_basis(degree, dir);
    0.5 + basis.iter().zip(coeffs.iter()).map(|(b, c)| b * c).sum::<f64>()
}

// Fixed generic directions; the first 2l+1 are used for band l. Chosen so the
// per-band evaluation matrices are far from singular (checked in tests).
const SOLVE_DIRS: [[f64; 3]; 7] = [
    [1.0, 2.0, 3.0],
    [3.0, -1.0, 2.0],
    [-2.0, 3.0, 1.0],
    [2.0, 2.0, -1.0],
    [-1.0, 2.0, 2.0],
    [3.0, 1.0, -2.0],
    [1.0, -3.0, 2.0],
];

/// Rotation matrix for band `l` under rotation `r`: coefficients transform as
/// `c' = D * c` so the shaded radiance satisfies `f'(d) = f(r^-1 d)`.
pub fn band_rotation(l: usize, r: &UnitQuaternion<f64>) -> DMatrix<f64> {
    let n = 2 * l + 1;
    let r_inv = r.inverse();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for (k, raw) in SOLVE_DIRS.iter().take(n).enumerate() {
        let d = Vector3::new(raw[0], raw[1], raw[2]).normalize();
        let ya = eval_band(l, &d);
        let yb = eval_band(l, &(r_inv * d));
        for m in 0..n {
            a[(k, m)] = ya[m];
            b[(k, m)] = yb[m];
        }
    }
    a.lu().solve(&b).expect("SH solve directions are non-degenerate")
}

/// Rotate the band coefficients of one channel in place (skips DC).
pub fn rotate_channel(degree: usize, coeffs: &mut [f64], rotations: &[DMatrix<f64>]) {
    let mut offset = 1;
    for l in 1..=degree {
        let n = 2 * l + 1;
        let d = &rotations[l - 1];
        let src = DVector::from_column_slice(&coeffs[offset..offset + n]);
        let dst = d * src;
        coeffs[offset..offset + n].copy_from_slice(dst.as_slice());
        offset += n;
    }
}

/// Band rotation matrices for bands `1..=degree`.
pub fn band_rotations(degree: usize, r: &UnitQuaternion<f64>) -> Vec<DMatrix<f64>> {
    (1..=degree).map(|l| band_rotation(l, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Quaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_quat(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
        let q = Quaternion::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        UnitQuaternion::from_quaternion(q)
    }

    #[test]
    fn solve_directions_are_well_conditioned() {
        for l in 1..=3 {
            let n = 2 * l + 1;
            let mut a = DMatrix::zeros(n, n);
            for (k, raw) in SOLVE_DIRS.iter().take(n).enumerate() {
                let d = Vector3::new(raw[0], raw[1], raw[2]).normalize();
                let ya = eval_band(l, &d);
                for m in 0..n {
                    a[(k, m)] = ya[m];
                }
            }
            let det = a.determinant().abs();
            assert!(det > 1e-6, "band {l} solve matrix near-singular: det={det}");
        }
    }

    #[test]
    fn rotation_matches_direction_pullback() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let r = random_unit_quat(&mut rng);
            let degree = 3;
            let rots = band_rotations(degree, &r);
            let coeffs: Vec<f64> =
                (0..band_count(degree)).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let mut rotated = coeffs.clone();
            rotate_channel(degree, &mut rotated, &rots);
            for _ in 0..10 {
                let d = Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                )
                .normalize();
                let want = shade_channel(degree, &coeffs, &(r.inverse() * d));
                let got = shade_channel(degree, &rotated, &d);
                assert!((want - got).abs() < 1e-10, "want {want}, got {got}");
            }
        }
    }

    #[test]
    fn band1_rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = random_unit_quat(&mut rng);
        let d = band_rotation(1, &r);
        let prod = &d * d.transpose();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - want).abs() < 1e-10);
            }
        }
    }
}
