//! Diffusion machinery behind a pluggable noise-predictor interface: the
//! variance schedule, forward noising, single-step denoised estimates, the
//! conditional-minus-unconditional residual, and deterministic DDIM mapping
//! between noise levels.
//!
//! The reference predictor `AnalyticGaussianGuidance` models clean images as
//! an isotropic Gaussian around a per-condition mean, `x0 ~ N(mu_c, s2 I)`.
//! With `x_t = sqrt(ab) x0 + sqrt(1-ab) eps` the pair `(x0, x_t)` is jointly
//! Gaussian, so the posterior mean is available in closed form:
//!
//! ```text
//! k(t)        = ab s2 / (ab s2 + 1 - ab)          (shrinkage, in [0, 1])
//! E[x0 | x_t] = (1 - k) mu + k x_t / sqrt(ab)
//! eps_hat     = (x_t - sqrt(ab) E[x0|x_t]) / sqrt(1 - ab)
//!             = (1 - k) (x_t - sqrt(ab) mu) / sqrt(1 - ab)
//! ```
//!
//! `eps_hat` equals `E[eps | x_t]`, the MSE-optimal noise prediction, which is
//! what makes every downstream formula numerically checkable. At `t = 0` the
//! noisy sample carries no noise information, so the predictor returns zero.

use crate::error::{Error, Result};
use crate::image::Image;
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

/// Variance schedule. Timesteps run `0..=t_max()`; `alpha_bar(0)` is defined
/// as exactly 1 so the small-t boundary is well posed, and `alpha_bar(t)` for
/// `t >= 1` is the cumulative product over the first `t` betas.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Stable-Diffusion-style default: scaled-linear betas over 1000 steps.
pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

pub fn build_schedule(
    kind: ScheduleKind,
    t_total: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if t_total == 0 {
        return Err(Error::Validation("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Validation(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if t_total == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (t_total - 1) as f64
        }
    };
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_total).map(|i| lerp(beta_start, beta_end, i)).collect(),
        ScheduleKind::ScaledLinear => (0..t_total)
            .map(|i| {
                let s = lerp(beta_start.sqrt(), beta_end.sqrt(), i);
                s * s
            })
            .collect(),
    };
    let mut alpha_bars = Vec::with_capacity(t_total);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { kind, beta_start, beta_end, betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn default_scaled_linear() -> NoiseSchedule {
        build_schedule(ScheduleKind::ScaledLinear, DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::Validation(format!("timestep {t} exceeds schedule T={}", self.t_max())));
        }
        Ok(())
    }

    /// Signal retention at timestep `t in 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        debug_assert!(t <= self.t_max());
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// CSV dump `(t, beta, alpha_bar)` for t = 1..=T.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar\n");
        for t in 1..=self.t_max() {
            writeln!(out, "{t},{},{}", self.betas[t - 1], self.alpha_bar(t)).unwrap();
        }
        out
    }
}

/// Forward noising: `x_t = sqrt(ab) x0 + sqrt(1-ab) eps`.
pub fn add_noise(x0: &Image, t: usize, eps: &Image, schedule: &NoiseSchedule) -> Result<Image> {
    x0.check_same_shape(eps)?;
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data.iter().zip(eps.data.iter()).map(|(x, e)| sa * x + sb * e).collect();
    Ok(Image { width: x0.width, height: x0.height, data })
}

/// Single-step denoised estimate: `(x_t - sqrt(1-ab) eps_hat) / sqrt(ab)`.
pub fn pseudo_gt(x_t: &Image, t: usize, eps_hat: &Image, schedule: &NoiseSchedule) -> Result<Image> {
    x_t.check_same_shape(eps_hat)?;
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    if ab <= 0.0 {
        return Err(Error::DivisionDegenerate(format!("alpha_bar({t}) = {ab}")));
    }
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data =
        x_t.data.iter().zip(eps_hat.data.iter()).map(|(x, e)| (x - sb * e) / sa).collect();
    Ok(Image { width: x_t.width, height: x_t.height, data })
}

/// Noise predictor interface: `eps_hat = predict(x_t, t, condition)`, where a
/// `None` condition is the unconditional branch. Implementations must be
/// deterministic in their inputs and safe for concurrent read-only use.
pub trait GuidanceModel: Sync {
    fn predict_noise(&self, x_t: &Image, t: usize, condition: Option<&str>) -> Result<Image>;
}

/// Conditional-minus-unconditional prediction difference.
pub fn csd_residual(
    x_t: &Image,
    t: usize,
    condition: &str,
    model: &dyn GuidanceModel,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    schedule.check_t(t)?;
    let cond = model.predict_noise(x_t, t, Some(condition))?;
    let uncond = model.predict_noise(x_t, t, None)?;
    cond.sub(&uncond)
}

fn timestep_grid(t_from: usize, t_to: usize, substeps: usize) -> Vec<usize> {
    let n = substeps.max(1);
    let mut grid = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = t_from as f64 + (t_to as f64 - t_from as f64) * k as f64 / n as f64;
        let t = t.round() as usize;
        if grid.last() != Some(&t) {
            grid.push(t);
        }
    }
    grid
}

/// One deterministic DDIM hop `t -> t_next` (either direction):
/// re-projects the current denoised estimate to the target noise level.
pub fn ddim_step(
    x: &Image,
    t: usize,
    t_next: usize,
    condition: Option<&str>,
    model: &dyn GuidanceModel,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    let eps_hat = model.predict_noise(x, t, condition)?;
    let x0_hat = pseudo_gt(x, t, &eps_hat, schedule)?;
    let ab = schedule.alpha_bar(t_next);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0_hat.data.iter().zip(eps_hat.data.iter()).map(|(x0, e)| sa * x0 + sb * e).collect();
    Ok(Image { width: x.width, height: x.height, data })
}

/// Deterministic inversion from noise level `t_from` up to `t_to`, stepped
/// over `substeps` equal hops. `t_to == t_from` is the identity.
pub fn ddim_invert(
    x_from: &Image,
    t_from: usize,
    t_to: usize,
    substeps: usize,
    condition: Option<&str>,
    model: &dyn GuidanceModel,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    schedule.check_t(t_from)?;
    schedule.check_t(t_to)?;
    if t_to < t_from {
        return Err(Error::Validation(format!("ddim_invert needs t_to >= t_from, got {t_from} -> {t_to}")));
    }
    if t_to == t_from {
        return Ok(x_from.clone());
    }
    let grid = timestep_grid(t_from, t_to, substeps);
    let mut x = x_from.clone();
    for w in grid.windows(2) {
        x = ddim_step(&x, w[0], w[1], condition, model, schedule)?;
    }
    Ok(x)
}

/// Deterministic sampling from noise level `t_from` down to `t_to`.
pub fn ddim_sample(
    x_from: &Image,
    t_from: usize,
    t_to: usize,
    substeps: usize,
    condition: Option<&str>,
    model: &dyn GuidanceModel,
    schedule: &NoiseSchedule,
) -> Result<Image> {
    schedule.check_t(t_from)?;
    schedule.check_t(t_to)?;
    if t_to > t_from {
        return Err(Error::Validation(format!("ddim_sample needs t_to <= t_from, got {t_from} -> {t_to}")));
    }
    if t_to == t_from {
        return Ok(x_from.clone());
    }
    let grid = timestep_grid(t_from, t_to, substeps);
    let mut x = x_from.clone();
    for w in grid.windows(2) {
        x = ddim_step(&x, w[0], w[1], condition, model, schedule)?;
    }
    Ok(x)
}

/// Closed-form Bayes-optimal noise predictor for per-condition Gaussian data
/// (see the module docs for the algebra). Condition ids map to mean images;
/// the `None` condition uses `null_mean`.
pub struct AnalyticGaussianGuidance {
    pub schedule: NoiseSchedule,
    pub sigma2: f64,
    pub null_mean: Image,
    means: BTreeMap<String, Image>,
}

impl AnalyticGaussianGuidance {
    pub fn new(schedule: NoiseSchedule, sigma2: f64, null_mean: Image) -> Result<Self> {
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(Error::Validation(format!("sigma2 {sigma2} must be finite and >= 0")));
        }
        if !null_mean.is_finite() {
            return Err(Error::Validation("null mean image must be finite".into()));
        }
        Ok(Self { schedule, sigma2, null_mean, means: BTreeMap::new() })
    }

    pub fn register(&mut self, condition: &str, mean: Image) -> Result<()> {
        if !mean.is_finite() {
            return Err(Error::Validation(format!("mean image for '{condition}' must be finite")));
        }
        self.null_mean.check_same_shape(&mean)?;
        self.means.insert(condition.to_string(), mean);
        Ok(())
    }

    pub fn conditions(&self) -> impl Iterator<Item = &str> {
        self.means.keys().map(|s| s.as_str())
    }

    pub fn mean_for(&self, condition: Option<&str>) -> Result<&Image> {
        match condition {
            None => Ok(&self.null_mean),
            Some(c) => self.means.get(c).ok_or_else(|| Error::UnknownCondition(c.to_string())),
        }
    }

    /// Load a registry from a directory of `.ppm`/`.png` mean images keyed by
    /// file stem; a stem named `null` becomes the unconditional mean,
    /// otherwise mid-gray is used.
    pub fn from_dir(dir: &Path, schedule: NoiseSchedule, sigma2: f64) -> Result<Self> {
        let mut entries: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(p.extension().and_then(|e| e.to_str()), Some("ppm") | Some("png"))
            })
            .collect();
        entries.sort();
        if entries.is_empty() {
            return Err(Error::Validation(format!("no .ppm/.png mean images in {}", dir.display())));
        }
        let mut null_mean = None;
        let mut named = Vec::new();
        for p in &entries {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let img = crate::image::read_image(p)?;
            if stem == "null" {
                null_mean = Some(img);
            } else {
                named.push((stem, img));
            }
        }
        let first_shape = named.first().map(|(_, i)| (i.width, i.height));
        let null_mean = null_mean.unwrap_or_else(|| {
            let (w, h) = first_shape.expect("at least one image present");
            Image::filled(w, h, [0.5, 0.5, 0.5])
        });
        let mut model = Self::new(schedule, sigma2, null_mean)?;
        for (stem, img) in named {
            model.register(&stem, img)?;
        }
        Ok(model)
    }

    /// Posterior shrinkage `k(t) = ab s2 / (ab s2 + 1 - ab)`.
    pub fn shrinkage(&self, t: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t);
        let denom = ab * self.sigma2 + 1.0 - ab;
        if denom <= 0.0 {
            // only at s2 = 0, ab = 1: the data is a point mass at mu
            0.0
        } else {
            ab * self.sigma2 / denom
        }
    }

    /// `E[x0 | x_t]` under the registered condition.
    pub fn posterior_mean(&self, x_t: &Image, t: usize, condition: Option<&str>) -> Result<Image> {
        self.schedule.check_t(t)?;
        let mu = self.mean_for(condition)?;
        x_t.check_same_shape(mu)?;
        let ab = self.schedule.alpha_bar(t);
        let k = self.shrinkage(t);
        let sa = ab.sqrt();
        let data = x_t
            .data
            .iter()
            .zip(mu.data.iter())
            .map(|(x, m)| (1.0 - k) * m + k * x / sa)
            .collect();
        Ok(Image { width: x_t.width, height: x_t.height, data })
    }
}

impl GuidanceModel for AnalyticGaussianGuidance {
    fn predict_noise(&self, x_t: &Image, t: usize, condition: Option<&str>) -> Result<Image> {
        self.schedule.check_t(t)?;
        let mu = self.mean_for(condition)?;
        x_t.check_same_shape(mu)?;
        if t == 0 {
            // x_0 carries no information about eps: E[eps | x_0] = 0
            return Ok(Image::zeros(x_t.width, x_t.height));
        }
        let ab = self.schedule.alpha_bar(t);
        let k = self.shrinkage(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x_t
            .data
            .iter()
            .zip(mu.data.iter())
            .map(|(x, m)| (1.0 - k) * (x - sa * m) / sb)
            .collect();
        Ok(Image { width: x_t.width, height: x_t.height, data })
    }
}

/// Standard normal image, one draw per channel value.
pub fn randn_image(width: usize, height: usize, rng: &mut impl Rng) -> Image {
    let data = (0..width * height * 3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Image { width, height, data }
}
