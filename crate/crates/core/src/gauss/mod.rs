//! The 3D Gaussian data model: parameter arrays, covariance math, affine
//! world placement, procedural initializers, density control, and PLY I/O.

pub mod ply;
pub mod sh;

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const QUAT_UNIT_TOL: f64 = 1e-6;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Optimizable 3D Gaussian set. All arrays share length `n`; spherical
/// harmonic coefficients are band-major per Gaussian (`[band][channel]`),
/// band 0 being the DC color term. Quaternions are stored `(w, x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub means: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
    pub sh_degree: usize,
    pub frozen: Vec<bool>,
}

impl GaussianCloud {
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            means: vec![],
            log_scales: vec![],
            rotations: vec![],
            opacity_logits: vec![],
            sh_coeffs: vec![],
            sh_degree,
            frozen: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Coefficients per Gaussian: 3 channels x (degree+1)^2 bands.
    pub fn sh_stride(&self) -> usize {
        3 * sh::band_count(self.sh_degree)
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh_coeffs[i * s..(i + 1) * s]
    }

    pub fn sh_of_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.sh_stride();
        &mut self.sh_coeffs[i * s..(i + 1) * s]
    }

    /// DC coefficient for channel `ch` of Gaussian `i`.
    #[inline]
    pub fn dc(&self, i: usize, ch: usize) -> f64 {
        self.sh_coeffs[i * self.sh_stride() + ch]
    }

    #[inline]
    pub fn dc_mut(&mut self, i: usize, ch: usize) -> &mut f64 {
        let s = self.sh_stride();
        &mut self.sh_coeffs[i * s + ch]
    }

    #[inline]
    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn rotation_quat(&self, i: usize) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.rotations[i];
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.opacity_logits.len() != n
            || self.frozen.len() != n
            || self.sh_coeffs.len() != n * self.sh_stride()
        {
            return Err(Error::Validation(format!(
                "inconsistent parameter array lengths for n={n}"
            )));
        }
        if self.sh_degree > 3 {
            return Err(Error::Validation(format!("sh_degree {} > 3", self.sh_degree)));
        }
        for (i, q) in self.rotations.iter().enumerate() {
            let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if (norm - 1.0).abs() > QUAT_UNIT_TOL {
                return Err(Error::Validation(format!(
                    "rotation {i} not unit-norm (|q| = {norm})"
                )));
            }
        }
        Ok(())
    }

    /// Sub-cloud over a contiguous index range (copies).
    pub fn slice(&self, range: std::ops::Range<usize>) -> GaussianCloud {
        let s = self.sh_stride();
        GaussianCloud {
            means: self.means[range.clone()].to_vec(),
            log_scales: self.log_scales[range.clone()].to_vec(),
            rotations: self.rotations[range.clone()].to_vec(),
            opacity_logits: self.opacity_logits[range.clone()].to_vec(),
            sh_coeffs: self.sh_coeffs[range.start * s..range.end * s].to_vec(),
            sh_degree: self.sh_degree,
            frozen: self.frozen[range].to_vec(),
        }
    }

    /// FNV-1a hash over the raw parameter bits of a range; used to verify
    /// freeze contracts.
    pub fn param_hash(&self, range: std::ops::Range<usize>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        let s = self.sh_stride();
        for i in range {
            let m = self.means[i];
            let ls = self.log_scales[i];
            eat(m.x);
            eat(m.y);
            eat(m.z);
            eat(ls.x);
            eat(ls.y);
            eat(ls.z);
            for r in self.rotations[i] {
                eat(r);
            }
            eat(self.opacity_logits[i]);
            for c in &self.sh_coeffs[i * s..(i + 1) * s] {
                eat(*c);
            }
        }
        h
    }
}

fn unit_quat_checked(q: &[f64; 4]) -> Result<UnitQuaternion<f64>> {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if (norm - 1.0).abs() > QUAT_UNIT_TOL {
        return Err(Error::Validation(format!("quaternion not unit-norm (|q| = {norm})")));
    }
    Ok(UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])))
}

/// Full 3D covariance `Sigma = R * diag(exp(2 s)) * R^T`.
pub fn covariance_from(log_scales: &Vector3<f64>, rotation: &[f64; 4]) -> Result<Matrix3<f64>> {
    let q = unit_quat_checked(rotation)?;
    let r = q.to_rotation_matrix();
    let d = Matrix3::from_diagonal(&log_scales.map(|s| (2.0 * s).exp()));
    Ok(r.matrix() * d * r.matrix().transpose())
}

/// Unnormalized Gaussian density `exp(-x^T Sigma^-1 x / 2)` at offset `x`
/// from the mean. The inverse uses the factored form `R diag(exp(-2s)) R^T`.
pub fn density_at(log_scales: &Vector3<f64>, rotation: &[f64; 4], x: &Vector3<f64>) -> Result<f64> {
    let q = unit_quat_checked(rotation)?;
    if log_scales.iter().any(|s| !s.is_finite() || s.exp() < 1e-150) {
        return Err(Error::DegenerateCovariance(format!("scale underflow: {log_scales:?}")));
    }
    let local = q.inverse() * x;
    let quad: f64 = (0..3).map(|k| local[k] * local[k] * (-2.0 * log_scales[k]).exp()).sum();
    Ok((-0.5 * quad).exp())
}

/// `sqrt(det Sigma)`, i.e. the product of the three axis scales. The constant
/// ellipsoid factor is dropped; only volume ratios are consumed downstream.
pub fn volume_of(log_scales: &Vector3<f64>) -> f64 {
    (log_scales.x + log_scales.y + log_scales.z).exp()
}

/// Uniform-scale similarity transform placing an object in the world frame:
/// `world(x) = r * s * x + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePlacement {
    pub scale: f64,
    pub rotation: [f64; 4],
    pub translation: Vector3<f64>,
}

impl AffinePlacement {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: [1.0, 0.0, 0.0, 0.0], translation: Vector3::zeros() }
    }

    pub fn from_yaw_deg(scale: f64, yaw_deg: f64, translation: Vector3<f64>) -> Self {
        let half = yaw_deg.to_radians() / 2.0;
        Self { scale, rotation: [half.cos(), 0.0, 0.0, half.sin()], translation }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Validation(format!("placement scale {} must be > 0", self.scale)));
        }
        unit_quat_checked(&self.rotation)?;
        Ok(())
    }

    pub fn quat(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
    }

    pub fn apply_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.quat() * (self.scale * x) + self.translation
    }

    /// `self` after `first`: `(self o first)(x) = self(first(x))`.
    pub fn compose(&self, first: &AffinePlacement) -> AffinePlacement {
        let r = self.quat() * first.quat();
        let q = r.quaternion();
        AffinePlacement {
            scale: self.scale * first.scale,
            rotation: [q.w, q.i, q.j, q.k],
            translation: self.quat() * (self.scale * first.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> AffinePlacement {
        let r_inv = self.quat().inverse();
        let q = r_inv.quaternion();
        AffinePlacement {
            scale: 1.0 / self.scale,
            rotation: [q.w, q.i, q.j, q.k],
            translation: r_inv * (self.translation * (-1.0 / self.scale)),
        }
    }
}

/// Map a cloud into the world frame. Means follow `r*s*x + t`, rotations are
/// left-composed with `r`, log scales shift by `ln s`. Opacity and the DC
/// color stay untouched; higher SH bands are rotated to keep the radiance
/// field consistent with the new orientation.
pub fn apply_placement(cloud: &GaussianCloud, placement: &AffinePlacement) -> Result<GaussianCloud> {
    placement.validate()?;
    let r = placement.quat();
    let ln_s = placement.scale.ln();
    let mut out = cloud.clone();
    for m in &mut out.means {
        *m = placement.apply_point(m);
    }
    for ls in &mut out.log_scales {
        *ls += Vector3::repeat(ln_s);
    }
    for q in &mut out.rotations {
        let composed = r * UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        let c = composed.quaternion();
        *q = [c.w, c.i, c.j, c.k];
    }
    if cloud.sh_degree > 0 {
        let rots = sh::band_rotations(cloud.sh_degree, &r);
        let bands = sh::band_count(cloud.sh_degree);
        let n = out.len();
        for i in 0..n {
            let sh_i = out.sh_of_mut(i);
            for ch in 0..3 {
                // gather this channel's bands, rotate, scatter back
                let mut chan: Vec<f64> = (0..bands).map(|b| sh_i[b * 3 + ch]).collect();
                sh::rotate_channel(cloud.sh_degree, &mut chan, &rots);
                for b in 0..bands {
                    sh_i[b * 3 + ch] = chan[b];
                }
            }
        }
    }
    Ok(out)
}

/// Concatenate clouds, zero-padding lower SH degrees up to the maximum.
/// Per-source frozen flags are preserved. An empty input yields an empty
/// degree-0 cloud.
pub fn merge_clouds(clouds: &[GaussianCloud]) -> GaussianCloud {
    let degree = clouds.iter().map(|c| c.sh_degree).max().unwrap_or(0);
    let bands = sh::band_count(degree);
    let mut out = GaussianCloud::empty(degree);
    for c in clouds {
        out.means.extend_from_slice(&c.means);
        out.log_scales.extend_from_slice(&c.log_scales);
        out.rotations.extend_from_slice(&c.rotations);
        out.opacity_logits.extend_from_slice(&c.opacity_logits);
        out.frozen.extend_from_slice(&c.frozen);
        let src_bands = sh::band_count(c.sh_degree);
        for i in 0..c.len() {
            let sh_i = c.sh_of(i);
            for b in 0..bands {
                for ch in 0..3 {
                    out.sh_coeffs.push(if b < src_bands { sh_i[b * 3 + ch] } else { 0.0 });
                }
            }
        }
    }
    out
}

/// Procedural starting shapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Solid ball of the given radius; the first sample anchors the center.
    Sphere { radius: f64 },
    /// Solid axis-aligned box with full side lengths.
    Box { size: [f64; 3] },
    /// Room interior: Gaussians on the six inner faces, floor at z = 0.
    /// Floor samples come first.
    CuboidRoom { width: f64, depth: f64, height: f64 },
    /// Ground disk at z = 0 plus an upper hemispherical shell.
    /// Disk samples come first.
    HemisphereDome { radius: f64 },
}

impl Primitive {
    fn validate(&self, count: usize) -> Result<()> {
        if count == 0 {
            return Err(Error::Validation("init count must be > 0".into()));
        }
        let ok = match self {
            Primitive::Sphere { radius } => *radius > 0.0,
            Primitive::Box { size } => size.iter().all(|s| *s > 0.0),
            Primitive::CuboidRoom { width, depth, height } => {
                *width > 0.0 && *depth > 0.0 && *height > 0.0
            }
            Primitive::HemisphereDome { radius } => *radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("non-positive extent in {self:?}")))
        }
    }

    /// Characteristic length, used for fallback scales.
    fn extent(&self) -> f64 {
        match self {
            Primitive::Sphere { radius } => *radius,
            Primitive::Box { size } => size.iter().cloned().fold(f64::MIN, f64::max),
            Primitive::CuboidRoom { width, depth, height } => width.max(*depth).max(*height),
            Primitive::HemisphereDome { radius } => *radius,
        }
    }
}

/// Number of leading Gaussians that belong to the ground for environment
/// primitives (floor face / ground disk). Zero for object primitives. Shares
/// the allocation arithmetic with `init_primitive`.
pub fn ground_count(prim: &Primitive, count: usize) -> usize {
    match prim {
        Primitive::Sphere { .. } | Primitive::Box { .. } => 0,
        Primitive::CuboidRoom { width, depth, height } => {
            let areas = room_face_areas(*width, *depth, *height);
            let total: f64 = areas.iter().sum();
            face_allocation(&areas, total, count)[0]
        }
        Primitive::HemisphereDome { radius } => {
            let areas = [std::f64::consts::PI * radius * radius, 2.0 * std::f64::consts::PI * radius * radius];
            let total: f64 = areas.iter().sum();
            face_allocation(&areas, total, count)[0]
        }
    }
}

fn room_face_areas(w: f64, d: f64, h: f64) -> [f64; 6] {
    // floor, ceiling, two w x h walls, two d x h walls
    [w * d, w * d, w * h, w * h, d * h, d * h]
}

/// Largest-remainder allocation of `count` samples proportional to areas.
fn face_allocation(areas: &[f64], total: f64, count: usize) -> Vec<usize> {
    let mut alloc: Vec<usize> = areas.iter().map(|a| (a / total * count as f64) as usize).collect();
    let mut assigned: usize = alloc.iter().sum();
    let mut rema: Vec<(usize, f64)> = areas
        .iter()
        .enumerate()
        .map(|(i, a)| (i, a / total * count as f64 - alloc[i] as f64))
        .collect();
    rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut k = 0;
    while assigned < count {
        alloc[rema[k % rema.len()].0] += 1;
        assigned += 1;
        k += 1;
    }
    alloc
}

/// Deterministic procedural initializer. Initial scales are isotropic, set
/// from the mean distance to the 3 nearest samples; colors start mid-gray
/// and opacity at 0.1.
pub fn init_primitive(prim: &Primitive, count: usize, seed: u64) -> Result<GaussianCloud> {
    init_primitive_with(prim, count, seed, 0.1)
}

pub fn init_primitive_with(
    prim: &Primitive,
    count: usize,
    seed: u64,
    initial_opacity: f64,
) -> Result<GaussianCloud> {
    prim.validate(count)?;
    if !(initial_opacity > 0.0 && initial_opacity < 1.0) {
        return Err(Error::Validation(format!("initial opacity {initial_opacity} not in (0,1)")));
    }
    let mut rng = seeded_rng(seed);
    let means = sample_means(prim, count, &mut rng);
    let scales = local_spacing_scales(&means, prim.extent());

    let mut cloud = GaussianCloud::empty(0);
    cloud.means = means;
    cloud.log_scales = scales.iter().map(|s| Vector3::repeat(s.ln())).collect();
    cloud.rotations = vec![[1.0, 0.0, 0.0, 0.0]; count];
    cloud.opacity_logits = vec![logit(initial_opacity); count];
    cloud.sh_coeffs = vec![0.0; count * 3];
    cloud.frozen = vec![false; count];
    Ok(cloud)
}

fn sample_means(prim: &Primitive, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut means = Vec::with_capacity(count);
    match prim {
        Primitive::Sphere { radius } => {
            means.push(Vector3::zeros());
            while means.len() < count {
                let v = Vector3::new(
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                );
                if v.norm_squared() <= 1.0 {
                    means.push(v * *radius);
                }
            }
        }
        Primitive::Box { size } => {
            for _ in 0..count {
                means.push(Vector3::new(
                    (rng.random::<f64>() - 0.5) * size[0],
                    (rng.random::<f64>() - 0.5) * size[1],
                    (rng.random::<f64>() - 0.5) * size[2],
                ));
            }
        }
        Primitive::CuboidRoom { width, depth, height } => {
            let (w, d, h) = (*width, *depth, *height);
            let thick = 0.01 * w.min(d).min(h);
            let areas = room_face_areas(w, d, h);
            let total: f64 = areas.iter().sum();
            let alloc = face_allocation(&areas, total, count);
            // face order: floor, ceiling, wall y-, wall y+, wall x-, wall x+
            for (face, n) in alloc.iter().enumerate() {
                for _ in 0..*n {
                    let (u, v, j) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
                    let p = match face {
                        0 => Vector3::new((u - 0.5) * w, (v - 0.5) * d, j * thick),
                        1 => Vector3::new((u - 0.5) * w, (v - 0.5) * d, h - j * thick),
                        2 => Vector3::new((u - 0.5) * w, -d / 2.0 + j * thick, v * h),
                        3 => Vector3::new((u - 0.5) * w, d / 2.0 - j * thick, v * h),
                        4 => Vector3::new(-w / 2.0 + j * thick, (u - 0.5) * d, v * h),
                        _ => Vector3::new(w / 2.0 - j * thick, (u - 0.5) * d, v * h),
                    };
                    means.push(p);
                }
            }
        }
        Primitive::HemisphereDome { radius } => {
            let r = *radius;
            let thick = 0.01 * r;
            let pi = std::f64::consts::PI;
            let areas = [pi * r * r, 2.0 * pi * r * r];
            let total: f64 = areas.iter().sum();
            let alloc = face_allocation(&areas, total, count);
            for _ in 0..alloc[0] {
                let rr = r * rng.random::<f64>().sqrt();
                let phi = rng.random::<f64>() * 2.0 * pi;
                means.push(Vector3::new(rr * phi.cos(), rr * phi.sin(), rng.random::<f64>() * thick));
            }
            for _ in 0..alloc[1] {
                // uniform over the upper hemisphere: z uniform in [0, 1]
                let z = rng.random::<f64>();
                let phi = rng.random::<f64>() * 2.0 * pi;
                let s = (1.0 - z * z).max(0.0).sqrt();
                let dir = Vector3::new(s * phi.cos(), s * phi.sin(), z);
                let rr = r - rng.random::<f64>() * thick;
                means.push(dir * rr);
            }
        }
    }
    means
}

/// Isotropic scale per sample: mean distance to the 3 nearest other samples.
fn local_spacing_scales(means: &[Vector3<f64>], extent: f64) -> Vec<f64> {
    let fallback = 0.1 * extent;
    if means.len() < 2 {
        return vec![fallback; means.len()];
    }
    let k = 3.min(means.len() - 1);
    means
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = [f64::INFINITY; 3];
            for (j, q) in means.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d2 = (p - q).norm_squared();
                if d2 < best[2] {
                    best[2] = d2;
                    if best[2] < best[1] {
                        best.swap(1, 2);
                    }
                    if best[1] < best[0] {
                        best.swap(0, 1);
                    }
                }
            }
            let mean_d = best[..k].iter().map(|d2| d2.sqrt()).sum::<f64>() / k as f64;
            if mean_d > 0.0 && mean_d.is_finite() {
                mean_d
            } else {
                fallback
            }
        })
        .collect()
}

/// Where each output Gaussian of a densification came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DensifySource {
    Kept(usize),
    CloneOf(usize),
    SplitOf(usize),
}

#[derive(Debug, Clone)]
pub struct DensifyOutcome {
    pub cloud: GaussianCloud,
    pub sources: Vec<DensifySource>,
    pub cloned: usize,
    pub split: usize,
}

pub const DEFAULT_SPLIT_DIVISOR: f64 = 1.6;
/// Fraction of the largest axis scale used as the split offset; calibrated so
/// the two children roughly reproduce the parent's peak on a central ray.
const SPLIT_OFFSET_FACTOR: f64 = 0.6;

/// Clone/split density control. Gaussians whose positional gradient norm
/// exceeds `grad_threshold` are duplicated in place when small, or replaced
/// by two shrunken children when their largest axis scale is above the
/// `scale_percentile` boundary. Opacity values are never modified here.
pub fn densify_clone_split(
    cloud: &GaussianCloud,
    positional_grad_norms: &[f64],
    grad_threshold: f64,
    scale_percentile: f64,
) -> Result<DensifyOutcome> {
    let n = cloud.len();
    if positional_grad_norms.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} grad norms"),
            got: format!("{}", positional_grad_norms.len()),
        });
    }
    if !(0.0..=100.0).contains(&scale_percentile) {
        return Err(Error::Validation(format!("scale percentile {scale_percentile} out of range")));
    }

    let max_scale: Vec<f64> =
        (0..n).map(|i| cloud.log_scales[i].iter().cloned().fold(f64::MIN, f64::max).exp()).collect();
    let boundary = percentile(&max_scale, scale_percentile);

    let mut clone_idx = Vec::new();
    let mut split_idx = Vec::new();
    for i in 0..n {
        if positional_grad_norms[i] > grad_threshold {
            if max_scale[i] > boundary {
                split_idx.push(i);
            } else {
                clone_idx.push(i);
            }
        }
    }

    let is_split: Vec<bool> = {
        let mut v = vec![false; n];
        for &i in &split_idx {
            v[i] = true;
        }
        v
    };

    let mut out = GaussianCloud::empty(cloud.sh_degree);
    let mut sources = Vec::new();
    let s = cloud.sh_stride();
    let mut push_from = |src: &GaussianCloud, i: usize, mean: Vector3<f64>, log_scales: Vector3<f64>| {
        out.means.push(mean);
        out.log_scales.push(log_scales);
        out.rotations.push(src.rotations[i]);
        out.opacity_logits.push(src.opacity_logits[i]);
        out.sh_coeffs.extend_from_slice(&src.sh_coeffs[i * s..(i + 1) * s]);
        out.frozen.push(src.frozen[i]);
    };

    for i in 0..n {
        if !is_split[i] {
            push_from(cloud, i, cloud.means[i], cloud.log_scales[i]);
            sources.push(DensifySource::Kept(i));
        }
    }
    for &i in &clone_idx {
        push_from(cloud, i, cloud.means[i], cloud.log_scales[i]);
        sources.push(DensifySource::CloneOf(i));
    }
    for &i in &split_idx {
        let ls = cloud.log_scales[i];
        let axis_k = (0..3).max_by(|&a, &b| ls[a].partial_cmp(&ls[b]).unwrap()).unwrap();
        let axis_obj = match axis_k {
            0 => Vector3::x(),
            1 => Vector3::y(),
            _ => Vector3::z(),
        };
        let dir = cloud.rotation_quat(i) * axis_obj;
        let offset = dir * (SPLIT_OFFSET_FACTOR * ls[axis_k].exp());
        let child_ls = ls - Vector3::repeat(DEFAULT_SPLIT_DIVISOR.ln());
        push_from(cloud, i, cloud.means[i] + offset, child_ls);
        sources.push(DensifySource::SplitOf(i));
        push_from(cloud, i, cloud.means[i] - offset, child_ls);
        sources.push(DensifySource::SplitOf(i));
    }

    Ok(DensifyOutcome { cloud: out, sources, cloned: clone_idx.len(), split: split_idx.len() })
}

/// Nearest-rank percentile (p in [0, 100]) of a non-empty slice.
fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::INFINITY;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p / 100.0 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}
