//! Deterministic software splatting rasterizer. Forward rendering produces
//! color, accumulated alpha and expected depth; the backward pass returns
//! exact reverse-mode gradients of the compositing equation for means,
//! opacity logits, DC colors and (optionally) log scales.
//!
//! Compositing is front-to-back over splats sorted by camera depth with the
//! original index as tiebreak. The tiled path is a performance layout only:
//! it composites the same splats in the same order per pixel and is
//! bit-identical to the per-pixel reference loop. Parallelism is over fixed
//! row bands, so results do not depend on the worker count.

use crate::error::{Error, Result};
use crate::gauss::{sh, GaussianCloud};
use crate::image::{Image, Plane};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

/// Opacity contribution ceiling per splat per pixel.
pub const ALPHA_CLAMP: f64 = 0.99;
/// Early-exit transmittance threshold.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
/// Footprint cutoff in standard deviations.
pub const FOOTPRINT_SIGMA: f64 = 3.0;

const TILE: usize = 16;
const ROW_BANDS: usize = 16;

/// Pinhole camera. `yaw` rotates about world +z; `pitch` is measured from the
/// world +z axis, so 90 degrees looks at the horizon. There is no roll: the
/// image x axis stays horizontal.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: Vector3<f64>,
    pub yaw: f64,
    pub pitch: f64,
    pub vertical_fov: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Validation(format!(
                "camera needs 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if !(self.pitch > 0.0 && self.pitch < std::f64::consts::PI) {
            return Err(Error::Validation(format!("camera pitch {} out of (0, pi)", self.pitch)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("camera image must be at least 1x1".into()));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < std::f64::consts::PI) {
            return Err(Error::Validation(format!("camera fov {} out of (0, pi)", self.vertical_fov)));
        }
        Ok(())
    }

    pub fn forward_dir(&self) -> Vector3<f64> {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        Vector3::new(sp * cy, sp * sy, cp)
    }

    /// World-to-camera rotation; rows are (right, down, forward).
    pub fn world_to_cam(&self) -> Matrix3<f64> {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let right = Vector3::new(sy, -cy, 0.0);
        let down = Vector3::new(cp * cy, cp * sy, -sp);
        let forward = Vector3::new(sp * cy, sp * sy, cp);
        Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()])
    }

    /// `(fx, fy, cx, cy)` in pixels; square pixels, principal point centered.
    pub fn intrinsics(&self) -> (f64, f64, f64, f64) {
        let fy = (self.height as f64 / 2.0) / (self.vertical_fov / 2.0).tan();
        (fy, fy, self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn with_size(&self, width: usize, height: usize) -> Camera {
        Camera { width, height, ..self.clone() }
    }

    /// Camera at `position` looking at `target`.
    pub fn look_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        vertical_fov: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Camera {
        let d = target - position;
        let norm = d.norm().max(1e-12);
        let pitch = (d.z / norm).clamp(-1.0, 1.0).acos().clamp(1e-6, std::f64::consts::PI - 1e-6);
        let yaw = d.y.atan2(d.x);
        Camera { position, yaw, pitch, vertical_fov, width, height, near, far }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    pub alpha: Plane,
    pub depth: Plane,
}

/// One Gaussian projected to the image plane.
#[derive(Debug, Clone)]
pub struct ProjectedSplat {
    pub index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub inv_cov2d: Matrix2<f64>,
    pub depth: f64,
    pub color: [f64; 3],
    pub color_unclamped: [f64; 3],
    pub alpha_peak: f64,
    pub radius: f64,
    /// Inclusive pixel bbox, clamped to the image.
    pub x_lo: usize,
    pub x_hi: usize,
    pub y_lo: usize,
    pub y_hi: usize,
    // retained for the backward pass
    pub mean_cam: Vector3<f64>,
    pub jac: Matrix2x3<f64>,
    pub cov_cam: Matrix3<f64>,
}

impl ProjectedSplat {
    #[inline]
    pub fn covers(&self, px: usize, py: usize) -> bool {
        px >= self.x_lo && px <= self.x_hi && py >= self.y_lo && py <= self.y_hi
    }
}

/// EWA-style projection with local-affine (Jacobian) linearization. Splats
/// behind the near plane or outside a 3-sigma screen margin are culled.
pub fn project(cloud: &GaussianCloud, camera: &Camera) -> Result<Vec<ProjectedSplat>> {
    camera.validate()?;
    cloud.validate()?;
    let rot = camera.world_to_cam();
    let (fx, fy, cx, cy) = camera.intrinsics();
    let (w, h) = (camera.width as f64, camera.height as f64);

    let mut out = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let mean_cam = rot * (cloud.means[i] - camera.position);
        let z = mean_cam.z;
        if z <= camera.near {
            continue;
        }
        let q = cloud.rotation_quat(i);
        let rq = q.to_rotation_matrix();
        let d = Matrix3::from_diagonal(&cloud.log_scales[i].map(|s| (2.0 * s).exp()));
        let sigma_world = rq.matrix() * d * rq.matrix().transpose();
        let cov_cam = rot * sigma_world * rot.transpose();

        let (x, y) = (mean_cam.x, mean_cam.y);
        let z2 = z * z;
        let jac =
            Matrix2x3::new(fx / z, 0.0, -fx * x / z2, 0.0, fy / z, -fy * y / z2);
        let cov2d = jac * cov_cam * jac.transpose();
        let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
        if !(det > 1e-300) {
            continue;
        }
        let inv_cov2d = Matrix2::new(
            cov2d[(1, 1)] / det,
            -cov2d[(0, 1)] / det,
            -cov2d[(1, 0)] / det,
            cov2d[(0, 0)] / det,
        );

        let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
        let disc = (mid * mid - det).max(0.0).sqrt();
        let lambda_max = mid + disc;
        let radius = FOOTPRINT_SIGMA * lambda_max.max(0.0).sqrt();

        let mean2d = Vector2::new(fx * x / z + cx, fy * y / z + cy);
        if mean2d.x < -radius
            || mean2d.x > w + radius
            || mean2d.y < -radius
            || mean2d.y > h + radius
        {
            continue;
        }

        let x_lo_f = (mean2d.x - radius).floor();
        let x_hi_f = (mean2d.x + radius).ceil();
        let y_lo_f = (mean2d.y - radius).floor();
        let y_hi_f = (mean2d.y + radius).ceil();
        if x_hi_f < 0.0 || y_hi_f < 0.0 || x_lo_f >= w || y_lo_f >= h {
            continue;
        }
        let x_lo = x_lo_f.max(0.0) as usize;
        let y_lo = y_lo_f.max(0.0) as usize;
        let x_hi = (x_hi_f as usize).min(camera.width - 1);
        let y_hi = (y_hi_f as usize).min(camera.height - 1);

        let dir = (cloud.means[i] - camera.position) / (cloud.means[i] - camera.position).norm();
        let sh_i = cloud.sh_of(i);
        let bands = sh::band_count(cloud.sh_degree);
        let mut color_unclamped = [0.0; 3];
        for ch in 0..3 {
            let chan: Vec<f64> = (0..bands).map(|b| sh_i[b * 3 + ch]).collect();
            color_unclamped[ch] = sh::shade_channel(cloud.sh_degree, &chan, &dir);
        }
        let color = color_unclamped.map(|c| c.clamp(0.0, 1.0));

        out.push(ProjectedSplat {
            index: i,
            mean2d,
            cov2d,
            inv_cov2d,
            depth: z,
            color,
            color_unclamped,
            alpha_peak: cloud.opacity(i),
            radius,
            x_lo,
            x_hi,
            y_lo,
            y_hi,
            mean_cam,
            jac,
            cov_cam,
        })
    }
    Ok(out)
}

/// Indices into `splats`, front to back; ties broken by original index.
fn depth_order(splats: &[ProjectedSplat]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .partial_cmp(&splats[b].depth)
            .unwrap()
            .then(splats[a].index.cmp(&splats[b].index))
    });
    order
}

struct PixelContribution {
    slot: usize,
    alpha: f64,
    transmittance: f64,
    gaussian: f64,
    delta: Vector2<f64>,
    clamped: bool,
}

/// Composite one pixel over the given splat slots (already depth-ordered).
/// Returns `(rgb, alpha, depth)`; optionally records per-splat contributions.
#[inline]
fn composite_pixel(
    px: usize,
    py: usize,
    order: &[usize],
    splats: &[ProjectedSplat],
    background: [f64; 3],
    far: f64,
    mut record: Option<&mut Vec<PixelContribution>>,
) -> ([f64; 3], f64, f64) {
    let p = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
    let mut rgb = [0.0; 3];
    let mut acc_alpha = 0.0;
    let mut depth_acc = 0.0;
    let mut t = 1.0;
    for &slot in order {
        let s = &splats[slot];
        if !s.covers(px, py) {
            continue;
        }
        let delta = p - s.mean2d;
        let q = s.inv_cov2d[(0, 0)] * delta.x * delta.x
            + (s.inv_cov2d[(0, 1)] + s.inv_cov2d[(1, 0)]) * delta.x * delta.y
            + s.inv_cov2d[(1, 1)] * delta.y * delta.y;
        let g = (-0.5 * q).exp();
        let raw = s.alpha_peak * g;
        let clamped = raw > ALPHA_CLAMP;
        let alpha = if clamped { ALPHA_CLAMP } else { raw };
        let weight = alpha * t;
        for ch in 0..3 {
            rgb[ch] += s.color[ch] * weight;
        }
        acc_alpha += weight;
        depth_acc += s.depth * weight;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(PixelContribution { slot, alpha, transmittance: t, gaussian: g, delta, clamped });
        }
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_EPS {
            break;
        }
    }
    for ch in 0..3 {
        rgb[ch] += t * background[ch];
    }
    let depth = if acc_alpha > 0.0 { depth_acc / acc_alpha } else { far };
    (rgb, acc_alpha, depth)
}

/// Reference forward path: per pixel, loop over every depth-sorted splat.
pub fn render_forward_reference(
    cloud: &GaussianCloud,
    camera: &Camera,
    background: [f64; 3],
) -> Result<RenderOutput> {
    let splats = project(cloud, camera)?;
    let order = depth_order(&splats);
    let (w, h) = (camera.width, camera.height);
    let mut color = Image::zeros(w, h);
    let mut alpha = Plane::filled(w, h, 0.0);
    let mut depth = Plane::filled(w, h, camera.far);
    for py in 0..h {
        for px in 0..w {
            let (rgb, a, d) = composite_pixel(px, py, &order, &splats, background, camera.far, None);
            color.set(px, py, rgb);
            alpha.set(px, py, a);
            depth.set(px, py, d);
        }
    }
    Ok(RenderOutput { color, alpha, depth })
}

/// Bin depth-ordered splat slots into 16x16 screen tiles.
fn bin_tiles(order: &[usize], splats: &[ProjectedSplat], width: usize, height: usize) -> Vec<Vec<usize>> {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for &slot in order {
        let s = &splats[slot];
        let tx0 = s.x_lo / TILE;
        let tx1 = s.x_hi / TILE;
        let ty0 = s.y_lo / TILE;
        let ty1 = s.y_hi / TILE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(slot);
            }
        }
    }
    bins
}

/// Default forward path: tile-binned, parallel over tiles, bit-identical to
/// the reference loop.
pub fn render_forward(cloud: &GaussianCloud, camera: &Camera, background: [f64; 3]) -> Result<RenderOutput> {
    let splats = project(cloud, camera)?;
    let order = depth_order(&splats);
    let (w, h) = (camera.width, camera.height);
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let bins = bin_tiles(&order, &splats, w, h);

    let tile_results: Vec<Vec<([f64; 3], f64, f64)>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let tx = ti % tiles_x;
            let ty = ti / tiles_x;
            let x0 = tx * TILE;
            let y0 = ty * TILE;
            let x1 = (x0 + TILE).min(w);
            let y1 = (y0 + TILE).min(h);
            let mut vals = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for py in y0..y1 {
                for px in x0..x1 {
                    vals.push(composite_pixel(px, py, &bins[ti], &splats, background, camera.far, None));
                }
            }
            vals
        })
        .collect();

    let mut color = Image::zeros(w, h);
    let mut alpha = Plane::filled(w, h, 0.0);
    let mut depth = Plane::filled(w, h, camera.far);
    for ti in 0..tiles_x * tiles_y {
        let tx = ti % tiles_x;
        let ty = ti / tiles_x;
        let x0 = tx * TILE;
        let y0 = ty * TILE;
        let x1 = (x0 + TILE).min(w);
        let y1 = (y0 + TILE).min(h);
        let mut k = 0;
        for py in y0..y1 {
            for px in x0..x1 {
                let (rgb, a, d) = tile_results[ti][k];
                k += 1;
                color.set(px, py, rgb);
                alpha.set(px, py, a);
                depth.set(px, py, d);
            }
        }
    }
    Ok(RenderOutput { color, alpha, depth })
}

/// Gradients with respect to the cloud parameters, aligned with cloud order.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub means: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub sh_dc: Vec<[f64; 3]>,
    pub log_scales: Option<Vec<Vector3<f64>>>,
}

impl ParamGrads {
    pub fn zeros(n: usize, with_log_scales: bool) -> Self {
        Self {
            means: vec![Vector3::zeros(); n],
            opacity_logits: vec![0.0; n],
            sh_dc: vec![[0.0; 3]; n],
            log_scales: if with_log_scales { Some(vec![Vector3::zeros(); n]) } else { None },
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.means.iter_mut().zip(other.means.iter()) {
            *a += b;
        }
        for (a, b) in self.opacity_logits.iter_mut().zip(other.opacity_logits.iter()) {
            *a += b;
        }
        for (a, b) in self.sh_dc.iter_mut().zip(other.sh_dc.iter()) {
            for ch in 0..3 {
                a[ch] += b[ch];
            }
        }
        if let (Some(a), Some(b)) = (self.log_scales.as_mut(), other.log_scales.as_ref()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.means.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logits.iter().all(|x| x.is_finite())
            && self.sh_dc.iter().all(|c| c.iter().all(|x| x.is_finite()))
            && self
                .log_scales
                .as_ref()
                .map(|ls| ls.iter().all(|v| v.iter().all(|x| x.is_finite())))
                .unwrap_or(true)
    }

    /// Positional gradient norms per Gaussian, for density control.
    pub fn mean_norms(&self) -> Vec<f64> {
        self.means.iter().map(|v| v.norm()).collect()
    }
}

#[derive(Clone)]
struct SplatAcc {
    d_mean2d: Vector2<f64>,
    d_lambda: Matrix2<f64>,
    d_color: [f64; 3],
    d_opacity_logit: f64,
    touched: bool,
}

impl Default for SplatAcc {
    fn default() -> Self {
        Self {
            d_mean2d: Vector2::zeros(),
            d_lambda: Matrix2::zeros(),
            d_color: [0.0; 3],
            d_opacity_logit: 0.0,
            touched: false,
        }
    }
}

/// Exact reverse-mode gradients of `render_forward` for the given adjoint
/// `dloss_dcolor`. Gradient support covers means, opacity logits and the DC
/// color; log-scale gradients are opt-in. For SH degrees above zero the
/// view-direction dependence of the color is treated as constant.
pub fn render_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    dloss_dcolor: &Image,
    background: [f64; 3],
    with_log_scales: bool,
) -> Result<ParamGrads> {
    if dloss_dcolor.width != camera.width || dloss_dcolor.height != camera.height {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", camera.width, camera.height),
            got: format!("{}x{}", dloss_dcolor.width, dloss_dcolor.height),
        });
    }
    let splats = project(cloud, camera)?;
    let order = depth_order(&splats);
    let (w, h) = (camera.width, camera.height);

    // Per fixed row band, accumulate splat-level adjoints; bands are merged
    // in order so the result is independent of the worker count.
    let band_size = h.div_ceil(ROW_BANDS).max(1);
    let band_accs: Vec<Vec<SplatAcc>> = (0..h.div_ceil(band_size))
        .into_par_iter()
        .map(|band| {
            let y0 = band * band_size;
            let y1 = ((band + 1) * band_size).min(h);
            let mut acc = vec![SplatAcc::default(); splats.len()];
            let mut contribs: Vec<PixelContribution> = Vec::new();
            for py in y0..y1 {
                for px in 0..w {
                    contribs.clear();
                    let (_, _, _) = composite_pixel(
                        px,
                        py,
                        &order,
                        &splats,
                        [0.0; 3],
                        camera.far,
                        Some(&mut contribs),
                    );
                    if contribs.is_empty() {
                        continue;
                    }
                    let dc = dloss_dcolor.get(px, py);
                    // transmittance left after the last composited splat
                    let last = contribs.last().unwrap();
                    let t_final = last.transmittance * (1.0 - last.alpha);
                    // suffix = everything composited after splat j, background included
                    let mut suffix = [0.0; 3];
                    for ch in 0..3 {
                        suffix[ch] = t_final * background[ch];
                    }
                    for c in contribs.iter().rev() {
                        let s = &splats[c.slot];
                        let a = &mut acc[c.slot];
                        a.touched = true;
                        let weight = c.alpha * c.transmittance;
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            a.d_color[ch] += dc[ch] * weight;
                            d_alpha +=
                                dc[ch] * (s.color[ch] * c.transmittance - suffix[ch] / (1.0 - c.alpha));
                        }
                        if !c.clamped {
                            let peak = s.alpha_peak;
                            let d_g = d_alpha * peak;
                            a.d_opacity_logit += d_alpha * c.gaussian * peak * (1.0 - peak);
                            let lam_delta = s.inv_cov2d * c.delta;
                            a.d_mean2d += lam_delta * (d_g * c.gaussian);
                            let f = -0.5 * d_g * c.gaussian;
                            a.d_lambda[(0, 0)] += f * c.delta.x * c.delta.x;
                            a.d_lambda[(0, 1)] += f * c.delta.x * c.delta.y;
                            a.d_lambda[(1, 0)] += f * c.delta.y * c.delta.x;
                            a.d_lambda[(1, 1)] += f * c.delta.y * c.delta.y;
                        }
                        for ch in 0..3 {
                            suffix[ch] += s.color[ch] * weight;
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut acc = vec![SplatAcc::default(); splats.len()];
    for band in band_accs {
        for (a, b) in acc.iter_mut().zip(band.into_iter()) {
            if !b.touched {
                continue;
            }
            a.touched = true;
            a.d_mean2d += b.d_mean2d;
            a.d_lambda += b.d_lambda;
            for ch in 0..3 {
                a.d_color[ch] += b.d_color[ch];
            }
            a.d_opacity_logit += b.d_opacity_logit;
        }
    }

    // Chain splat-space adjoints back to cloud parameters.
    let rot = camera.world_to_cam();
    let (fx, fy, _, _) = camera.intrinsics();
    let mut grads = ParamGrads::zeros(cloud.len(), with_log_scales);
    for (slot, s) in splats.iter().enumerate() {
        let a = &acc[slot];
        if !a.touched {
            continue;
        }
        let i = s.index;

        let lam = s.inv_cov2d;
        let d_m = -(lam * a.d_lambda * lam);
        let d_j = (d_m + d_m.transpose()) * s.jac * s.cov_cam;

        let (x, y, z) = (s.mean_cam.x, s.mean_cam.y, s.mean_cam.z);
        let z2 = z * z;
        let z3 = z2 * z;
        let mut d_t = s.jac.transpose() * a.d_mean2d;
        d_t.x += d_j[(0, 2)] * (-fx / z2);
        d_t.y += d_j[(1, 2)] * (-fy / z2);
        d_t.z += d_j[(0, 0)] * (-fx / z2)
            + d_j[(0, 2)] * (2.0 * fx * x / z3)
            + d_j[(1, 1)] * (-fy / z2)
            + d_j[(1, 2)] * (2.0 * fy * y / z3);
        grads.means[i] += rot.transpose() * d_t;

        grads.opacity_logits[i] += a.d_opacity_logit;
        for ch in 0..3 {
            let u = s.color_unclamped[ch];
            if u > 0.0 && u < 1.0 {
                grads.sh_dc[i][ch] += a.d_color[ch] * sh::SH_C0;
            }
        }

        if let Some(ls_grads) = grads.log_scales.as_mut() {
            let d_v = s.jac.transpose() * d_m * s.jac;
            let d_sigma_world = rot.transpose() * d_v * rot;
            let rq = cloud.rotation_quat(i).to_rotation_matrix();
            let in_local = rq.matrix().transpose() * d_sigma_world * rq.matrix();
            let ls = cloud.log_scales[i];
            for k in 0..3 {
                ls_grads[i][k] += in_local[(k, k)] * 2.0 * (2.0 * ls[k]).exp();
            }
        }
    }
    Ok(grads)
}

pub fn export_ppm(output: &RenderOutput, path: &std::path::Path) -> Result<()> {
    crate::image::write_ppm(&output.color, path)
}

pub fn export_depth(output: &RenderOutput, path: &std::path::Path) -> Result<()> {
    crate::image::write_depth_raw(&output.depth, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{logit, seeded_rng};
    use approx::assert_relative_eq;
    use rand::Rng;

    pub(crate) fn test_camera(width: usize, height: usize) -> Camera {
        Camera {
            position: Vector3::zeros(),
            yaw: 0.0,
            pitch: std::f64::consts::FRAC_PI_2,
            vertical_fov: std::f64::consts::FRAC_PI_3,
            width,
            height,
            near: 0.01,
            far: 100.0,
        }
    }

    fn one_gaussian(mean: Vector3<f64>, scale: f64, opacity: f64, rgb_dc: [f64; 3]) -> GaussianCloud {
        GaussianCloud {
            means: vec![mean],
            log_scales: vec![Vector3::repeat(scale.ln())],
            rotations: vec![[1.0, 0.0, 0.0, 0.0]],
            opacity_logits: vec![logit(opacity)],
            sh_coeffs: rgb_dc.to_vec(),
            sh_degree: 0,
            frozen: vec![false],
        }
    }

    pub(crate) fn random_scene(n: usize, seed: u64) -> GaussianCloud {
        let mut rng = seeded_rng(seed);
        let mut c = GaussianCloud::empty(0);
        for _ in 0..n {
            c.means.push(Vector3::new(
                2.0 + rng.random::<f64>() * 2.0,
                (rng.random::<f64>() - 0.5) * 1.6,
                (rng.random::<f64>() - 0.5) * 1.6,
            ));
            c.log_scales.push(Vector3::new(
                (0.05 + rng.random::<f64>() * 0.2).ln(),
                (0.05 + rng.random::<f64>() * 0.2).ln(),
                (0.05 + rng.random::<f64>() * 0.2).ln(),
            ));
            let raw = [
                rng.random::<f64>() + 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            ];
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            c.rotations.push([raw[0] / norm, raw[1] / norm, raw[2] / norm, raw[3] / norm]);
            c.opacity_logits.push(logit(0.3 + rng.random::<f64>() * 0.5));
            for _ in 0..3 {
                c.sh_coeffs.push(rng.random::<f64>() * 2.0 - 1.0);
            }
            c.frozen.push(false);
        }
        c
    }

    #[test]
    fn on_axis_gaussian_projects_to_center() {
        let cam = test_camera(64, 64);
        let cloud = one_gaussian(Vector3::new(5.0, 0.0, 0.0), 0.1, 0.8, [0.0; 3]);
        let splats = project(&cloud, &cam).unwrap();
        assert_eq!(splats.len(), 1);
        assert_relative_eq!(splats[0].mean2d.x, 32.0, epsilon = 1e-9);
        assert_relative_eq!(splats[0].mean2d.y, 32.0, epsilon = 1e-9);
        assert_relative_eq!(splats[0].depth, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = test_camera(32, 32);
        let cloud = one_gaussian(Vector3::new(-5.0, 0.0, 0.0), 0.1, 0.8, [0.0; 3]);
        assert!(project(&cloud, &cam).unwrap().is_empty());
    }

    #[test]
    fn isotropic_cov2d_matches_pinhole_small_angle() {
        let cam = test_camera(64, 64);
        let (s, d) = (0.05, 4.0);
        let cloud = one_gaussian(Vector3::new(d, 0.0, 0.0), s, 0.8, [0.0; 3]);
        let splats = project(&cloud, &cam).unwrap();
        let (_, fy, _, _) = cam.intrinsics();
        let expect = (fy * s / d) * (fy * s / d);
        for (i, j, want) in [(0, 0, expect), (1, 1, expect), (0, 1, 0.0), (1, 0, 0.0)] {
            let got = splats[0].cov2d[(i, j)];
            assert!((got - want).abs() <= 0.01 * expect, "cov2d[{i}{j}] = {got}, want {want}");
        }
    }

    #[test]
    fn empty_cloud_renders_background() {
        let cam = test_camera(16, 16);
        let bg = [0.2, 0.4, 0.6];
        let out = render_forward(&GaussianCloud::empty(0), &cam, bg).unwrap();
        for py in 0..16 {
            for px in 0..16 {
                assert_eq!(out.color.get(px, py), bg);
                assert_eq!(out.alpha.get(px, py), 0.0);
                assert_eq!(out.depth.get(px, py), cam.far);
            }
        }
    }

    #[test]
    fn single_splat_center_pixel_composites_linearly() {
        // odd image size puts the optical axis exactly on a pixel center
        let cam = test_camera(33, 33);
        let dc = (0.9 - 0.5) / sh::SH_C0; // channel value 0.9
        let cloud = one_gaussian(Vector3::new(5.0, 0.0, 0.0), 0.3, 0.8, [dc, dc, dc]);
        let bg = [0.1, 0.2, 0.3];
        let out = render_forward(&cloud, &cam, bg).unwrap();
        let center = out.color.get(16, 16);
        for ch in 0..3 {
            let want = 0.8 * 0.9 + 0.2 * bg[ch];
            assert_relative_eq!(center[ch], want, epsilon = 1e-12);
        }
        assert_relative_eq!(out.alpha.get(16, 16), 0.8, epsilon = 1e-12);
        assert_relative_eq!(out.depth.get(16, 16), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let cam = test_camera(33, 33);
        let a = one_gaussian(Vector3::new(4.0, 0.05, 0.0), 0.4, 0.7, [0.8, -0.4, 0.1]);
        let b = one_gaussian(Vector3::new(6.0, -0.05, 0.0), 0.5, 0.6, [-0.5, 0.9, 0.2]);
        let ab = crate::gauss::merge_clouds(&[a.clone(), b.clone()]);
        let ba = crate::gauss::merge_clouds(&[b, a]);
        let bg = [0.0, 0.0, 0.0];
        let img_ab = render_forward(&ab, &cam, bg).unwrap();
        let img_ba = render_forward(&ba, &cam, bg).unwrap();
        assert_eq!(img_ab.color.data, img_ba.color.data);

        // brute-force oracle at the center pixel: composite strictly by depth
        let splats = project(&ab, &cam).unwrap();
        let mut s: Vec<&ProjectedSplat> = splats.iter().collect();
        s.sort_by(|p, q| p.depth.partial_cmp(&q.depth).unwrap());
        let p = Vector2::new(16.5, 16.5);
        let mut want = [0.0; 3];
        let mut t = 1.0;
        for sp in s {
            let d = p - sp.mean2d;
            let q = (sp.inv_cov2d * d).dot(&d);
            let alpha = (sp.alpha_peak * (-0.5 * q).exp()).min(ALPHA_CLAMP);
            for ch in 0..3 {
                want[ch] += sp.color[ch] * alpha * t;
            }
            t *= 1.0 - alpha;
        }
        let got = img_ab.color.get(16, 16);
        for ch in 0..3 {
            assert_relative_eq!(got[ch], want[ch], epsilon = 1e-12);
        }
    }

    #[test]
    fn tiled_path_is_bit_identical_to_reference() {
        let cam = test_camera(40, 56); // non multiple of the tile size
        let cloud = random_scene(30, 12);
        let a = render_forward(&cloud, &cam, [0.1, 0.1, 0.1]).unwrap();
        let b = render_forward_reference(&cloud, &cam, [0.1, 0.1, 0.1]).unwrap();
        assert_eq!(a.color.data, b.color.data);
        assert_eq!(a.alpha.data, b.alpha.data);
        assert_eq!(a.depth.data, b.depth.data);
    }

    #[test]
    fn deterministic_across_worker_counts() {
        let cam = test_camera(48, 48);
        let cloud = random_scene(25, 3);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| render_forward(&cloud, &cam, [0.0; 3]).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.color.data, b.color.data);

        let dl = Image::filled(48, 48, [1.0, -0.5, 0.25]);
        let ga = {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
            pool.install(|| render_backward(&cloud, &cam, &dl, [0.0; 3], true).unwrap())
        };
        let gb = {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
            pool.install(|| render_backward(&cloud, &cam, &dl, [0.0; 3], true).unwrap())
        };
        assert_eq!(ga.means, gb.means);
        assert_eq!(ga.opacity_logits, gb.opacity_logits);
    }

    #[test]
    fn transmittance_telescoping() {
        let cam = test_camera(33, 33);
        let cloud = random_scene(12, 5);
        let out = render_forward(&cloud, &cam, [0.0; 3]).unwrap();
        let splats = project(&cloud, &cam).unwrap();
        let order = depth_order(&splats);
        for py in 0..33 {
            for px in 0..33 {
                // recompute the alpha product independently
                let p = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                let mut t = 1.0;
                let mut prod_ok = true;
                for &slot in &order {
                    let s = &splats[slot];
                    if !s.covers(px, py) {
                        continue;
                    }
                    let d = p - s.mean2d;
                    let q = (s.inv_cov2d * d).dot(&d);
                    let alpha = (s.alpha_peak * (-0.5 * q).exp()).min(ALPHA_CLAMP);
                    t *= 1.0 - alpha;
                    if t < TRANSMITTANCE_EPS {
                        prod_ok = false;
                        break;
                    }
                }
                if prod_ok {
                    assert!(
                        (out.alpha.get(px, py) - (1.0 - t)).abs() < 1e-9,
                        "telescoping failed at ({px},{py})"
                    );
                }
            }
        }
    }

    #[test]
    fn backward_zero_adjoint_gives_zero_grads() {
        let cam = test_camera(32, 32);
        let cloud = random_scene(8, 9);
        let g = render_backward(&cloud, &cam, &Image::zeros(32, 32), [0.0; 3], true).unwrap();
        assert!(g.means.iter().all(|v| v.norm() == 0.0));
        assert!(g.opacity_logits.iter().all(|v| *v == 0.0));
        assert!(g.sh_dc.iter().all(|c| c.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn backward_center_pixel_color_grad_is_alpha() {
        let cam = test_camera(33, 33);
        let cloud = one_gaussian(Vector3::new(5.0, 0.0, 0.0), 0.3, 0.8, [0.0, 0.0, 0.0]);
        let mut dl = Image::zeros(33, 33);
        dl.set(16, 16, [1.0, 1.0, 1.0]);
        let g = render_backward(&cloud, &cam, &dl, [0.0; 3], false).unwrap();
        // d(loss)/d(dc) = alpha * SH_C0 at the center pixel
        for ch in 0..3 {
            assert_relative_eq!(g.sh_dc[0][ch], 0.8 * sh::SH_C0, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_rejects_wrong_shape() {
        let cam = test_camera(32, 32);
        let cloud = random_scene(3, 1);
        let r = render_backward(&cloud, &cam, &Image::zeros(16, 16), [0.0; 3], false);
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    /// Central finite differences on a scalar loss L = sum(dl * render).
    pub(crate) fn finite_diff_check(
        cloud: &GaussianCloud,
        cam: &Camera,
        dl: &Image,
        step: f64,
        rel_tol: f64,
        with_log_scales: bool,
    ) {
        let bg = [0.15, 0.25, 0.35];
        let loss = |c: &GaussianCloud| -> f64 {
            let out = render_forward(c, cam, bg).unwrap();
            out.color.data.iter().zip(dl.data.iter()).map(|(a, b)| a * b).sum()
        };
        let grads = render_backward(cloud, cam, dl, bg, with_log_scales).unwrap();
        let check = |name: &str, got: f64, mut plus: GaussianCloud, mut minus: GaussianCloud, setp: &dyn Fn(&mut GaussianCloud, f64)| {
            setp(&mut plus, step);
            setp(&mut minus, -step);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let denom = fd.abs().max(got.abs()).max(1e-6);
            assert!(
                (fd - got).abs() / denom <= rel_tol,
                "{name}: analytic {got} vs fd {fd}"
            );
        };
        for i in 0..cloud.len() {
            for k in 0..3 {
                check(
                    &format!("mean[{i}][{k}]"),
                    grads.means[i][k],
                    cloud.clone(),
                    cloud.clone(),
                    &|c, h| c.means[i][k] += h,
                );
            }
            check(
                &format!("opacity[{i}]"),
                grads.opacity_logits[i],
                cloud.clone(),
                cloud.clone(),
                &|c, h| c.opacity_logits[i] += h,
            );
            for ch in 0..3 {
                check(
                    &format!("dc[{i}][{ch}]"),
                    grads.sh_dc[i][ch],
                    cloud.clone(),
                    cloud.clone(),
                    &|c, h| *c.dc_mut(i, ch) += h,
                );
            }
            if with_log_scales {
                let lg = grads.log_scales.as_ref().unwrap();
                for k in 0..3 {
                    check(
                        &format!("log_scale[{i}][{k}]"),
                        lg[i][k],
                        cloud.clone(),
                        cloud.clone(),
                        &|c, h| c.log_scales[i][k] += h,
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cam = test_camera(17, 17);
        let cloud = random_scene(5, 21);
        let mut rng = seeded_rng(33);
        let dl = Image::from_fn(17, 17, |_, _| {
            [
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            ]
        });
        finite_diff_check(&cloud, &cam, &dl, 1e-5, 1e-3, true);
    }
}
