//! AMCW time-of-flight image formation.
//!
//! Every sub-aperture view `u` produces four correlation images
//! `C[psi, u] = alpha * L_u * (beta + cos(phi_u + psi)) * g * T / pi`; the
//! masked views are averaged over all `U * V` views and corrupted with a
//! scaled Gaussian field per phase offset.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::mask::MicrolensMask;
use crate::rng::RngState;
use crate::scene::LightField;
use crate::tensor::Tensor;

/// Phase offsets of the four stored correlation images, in storage order.
pub const PSI_OFFSETS: [f64; 4] = [0.0, FRAC_PI_2, 3.0 * FRAC_PI_2, PI];

/// 2.998e8 m/s in mm/ms.
pub const SPEED_OF_LIGHT_MM_PER_MS: f64 = 2.998e8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToFConfig {
    pub mod_freq_hz: f64,
    /// Peak returned intensity for unit albedo, in 8-bit sensor units.
    pub amplitude: f64,
    /// Constant offset of the correlation waveform.
    pub bias: f64,
    pub gain: f64,
    pub integration_ms: f64,
    pub speed_of_light_mm_per_ms: f64,
}

impl Default for ToFConfig {
    fn default() -> Self {
        ToFConfig {
            mod_freq_hz: 30e6,
            amplitude: 255.0,
            bias: 0.5,
            gain: 20.0,
            integration_ms: 1.0,
            speed_of_light_mm_per_ms: SPEED_OF_LIGHT_MM_PER_MS,
        }
    }
}

impl ToFConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.mod_freq_hz > 0.0, InvalidParam, "modulation frequency must be positive");
        ensure!(
            self.gain > 0.0 && self.integration_ms > 0.0,
            InvalidParam,
            "gain and integration time must be positive"
        );
        ensure!(
            self.amplitude >= 0.0 && self.speed_of_light_mm_per_ms > 0.0,
            InvalidParam,
            "amplitude must be >= 0 and c > 0"
        );
        Ok(())
    }

    fn c_mm_per_s(&self) -> f64 {
        self.speed_of_light_mm_per_ms * 1e3
    }

    /// `c / (2 omega)` in mm.
    pub fn unambiguous_range_mm(&self) -> f64 {
        self.c_mm_per_s() / (2.0 * self.mod_freq_hz)
    }

    /// Depth per radian of phase, `c / (4 pi omega)`.
    pub fn mm_per_rad(&self) -> f64 {
        self.c_mm_per_s() / (4.0 * PI * self.mod_freq_hz)
    }

    /// `g * T / pi`.
    pub fn correlation_scale(&self) -> f64 {
        self.gain * self.integration_ms / PI
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub a: f64,
    pub b: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            a: 0.75,
            b: 1.25,
            mu: 0.0,
            sigma: 3.0,
        }
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        NoiseConfig {
            a: 1.0,
            b: 1.0,
            mu: 0.0,
            sigma: 0.0,
        }
    }

    pub fn is_off(&self) -> bool {
        self.sigma == 0.0 && self.mu == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.a <= self.b, InvalidParam, "noise bounds reversed");
        ensure!(self.sigma >= 0.0, InvalidParam, "noise sigma must be >= 0");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationStack {
    /// `[4, H, W]` in [`PSI_OFFSETS`] order.
    pub images: Tensor,
}

impl CorrelationStack {
    pub fn new(images: Tensor) -> Result<Self> {
        ensure!(
            images.ndim() == 3 && images.dims()[0] == 4,
            Shape,
            "correlation stack must be [4, H, W], got {:?}",
            images.dims()
        );
        Ok(CorrelationStack { images })
    }

    pub fn sensor(&self) -> (usize, usize) {
        (self.images.dims()[1], self.images.dims()[2])
    }

    pub fn psi_offsets(&self) -> [f64; 4] {
        PSI_OFFSETS
    }
}

fn phase_of(depth_mm: f64, cfg: &ToFConfig) -> f64 {
    4.0 * PI * cfg.mod_freq_hz * depth_mm / cfg.c_mm_per_s()
}

/// `4 pi omega D / c`, refusing depths that would wrap.
pub fn phase_from_depth(depth: &Tensor, cfg: &ToFConfig) -> Result<Tensor> {
    cfg.validate()?;
    let range = cfg.unambiguous_range_mm();
    let bad = depth
        .data()
        .iter()
        .filter(|&&z| !(z >= 0.0 && (z as f64) < range))
        .count();
    if bad > 0 {
        return Err(Error::WrapViolation {
            count: bad,
            range_mm: range,
        });
    }
    Ok(depth.map(|z| phase_of(z as f64, cfg) as f32))
}

/// Unmasked per-view correlation images as `[4, U*V, H, W]` in f64.
pub fn per_view_correlation(lf: &LightField, cfg: &ToFConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let range = cfg.unambiguous_range_mm();
    let bad = lf
        .view_depth
        .data()
        .iter()
        .filter(|&&z| (z as f64) >= range)
        .count();
    if bad > 0 {
        return Err(Error::WrapViolation {
            count: bad,
            range_mm: range,
        });
    }
    let amp = lf.amplitude.data();
    let dep = lf.view_depth.data();
    let n = amp.len();
    let scale = cfg.amplitude * cfg.correlation_scale();
    let mut out = vec![0f64; 4 * n];
    out.par_chunks_mut(n).enumerate().for_each(|(k, chunk)| {
        let psi = PSI_OFFSETS[k];
        for ((o, &a), &z) in chunk.iter_mut().zip(amp).zip(dep) {
            *o = scale * a as f64 * (cfg.bias + (phase_of(z as f64, cfg) + psi).cos());
        }
    });
    Ok(out)
}

/// Binary global aperture over the view grid; `true` passes light.
pub fn full_aperture(u_views: usize, v_views: usize) -> Vec<bool> {
    vec![true; u_views * v_views]
}

/// Masked view average of per-view correlations (f64 core shared with the
/// differentiable pipeline). `per_view` is `[4, UV, H, W]`, `mask` is
/// `[UV, H, W]`.
pub fn average_views(per_view: &[f64], mask: &[f64], aperture: &[bool], hw: usize) -> Vec<f64> {
    let views = aperture.len();
    let inv = 1.0 / views as f64;
    let mut out = vec![0f64; 4 * hw];
    for (k, img) in out.chunks_mut(hw).enumerate() {
        for (view, &open) in aperture.iter().enumerate() {
            if !open {
                continue;
            }
            let src = &per_view[(k * views + view) * hw..(k * views + view + 1) * hw];
            let m = &mask[view * hw..(view + 1) * hw];
            for ((o, &c), &mv) in img.iter_mut().zip(src).zip(m) {
                *o += mv * c;
            }
        }
        img.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Per-view stacks `[4, U, V, H, W]` and the masked average `[4, H, W]`.
pub fn correlation_stack(
    lf: &LightField,
    mask: &MicrolensMask<'_>,
    aperture: &[bool],
    cfg: &ToFConfig,
) -> Result<(Tensor, CorrelationStack)> {
    let (u, v) = lf.views();
    let (h, w) = lf.sensor();
    ensure!(
        mask.views() == (u, v) && mask.sensor() == (h, w),
        Shape,
        "mask tiles {:?} views over {:?}, light field has {:?} over {:?}",
        mask.views(),
        mask.sensor(),
        (u, v),
        (h, w)
    );
    ensure!(
        aperture.len() == u * v,
        Shape,
        "aperture has {} cells, expected {}",
        aperture.len(),
        u * v
    );
    let per_view = per_view_correlation(lf, cfg)?;
    let m: Vec<f64> = mask.dense().to_f64();
    let avg = average_views(&per_view, &m, aperture, h * w);
    Ok((
        Tensor::from_f64(&[4, u, v, h, w], &per_view)?,
        CorrelationStack::new(Tensor::from_f64(&[4, h, w], &avg)?)?,
    ))
}

/// One `[4, H, W]` noise draw: per offset a scalar `s ~ U(a, b)` times an
/// i.i.d. `N(mu, sigma^2)` field.
pub fn noise_field(ncfg: &NoiseConfig, h: usize, w: usize, rng: &mut RngState) -> Result<Vec<f64>> {
    ncfg.validate()?;
    let mut out = Vec::with_capacity(4 * h * w);
    for _ in 0..4 {
        let s = rng.uniform(ncfg.a, ncfg.b)?;
        for _ in 0..h * w {
            out.push(s * (ncfg.mu + ncfg.sigma * rng.standard_normal()));
        }
    }
    Ok(out)
}

pub fn add_noise(stack: &CorrelationStack, ncfg: &NoiseConfig, rng: &mut RngState) -> Result<CorrelationStack> {
    let (h, w) = stack.sensor();
    let eta = noise_field(ncfg, h, w, rng)?;
    let data: Vec<f64> = stack
        .images
        .data()
        .iter()
        .zip(&eta)
        .map(|(&c, &e)| c as f64 + e)
        .collect();
    CorrelationStack::new(Tensor::from_f64(&[4, h, w], &data)?)
}

/// Phase of the sum of two phasors, in `[0, 2 pi)`.
pub fn mix_phase_oracle(amp_bg: f64, phi_bg: f64, amp_fg: f64, phi_fg: f64) -> Result<f64> {
    if amp_bg + amp_fg <= 0.0 {
        return Err(Error::ZeroAmplitude);
    }
    let y = amp_bg * phi_bg.sin() + amp_fg * phi_fg.sin();
    let x = amp_bg * phi_bg.cos() + amp_fg * phi_fg.cos();
    Ok(y.atan2(x).rem_euclid(TAU))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LensGeometry {
    pub focal_mm: f64,
    pub radius_mm: f64,
    pub depth_mm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualPath {
    pub delta_mm: f64,
    pub phase_err_rad: f64,
    pub depth_bias_mm: f64,
}

fn ray_length(u: f64, x: f64, g: &LensGeometry) -> f64 {
    let lens = ((g.radius_mm - u).powi(2) + g.focal_mm.powi(2)).sqrt();
    let scene = (g.depth_mm.powi(2) + (x * g.depth_mm / g.focal_mm + u).powi(2)).sqrt();
    lens + scene
}

/// Extra path through aperture point `u` relative to the chief ray for the
/// sensor position `sensor_x_mm`, with the phase and depth error it causes.
pub fn residual_path_delta(
    u: f64,
    sensor_x_mm: f64,
    geom: &LensGeometry,
    cfg: &ToFConfig,
) -> Result<ResidualPath> {
    ensure!(
        geom.focal_mm > 0.0 && geom.radius_mm > 0.0 && geom.depth_mm > 0.0,
        InvalidParam,
        "lens geometry must be positive"
    );
    ensure!(u.abs() <= geom.radius_mm, InvalidParam, "|u| = {} exceeds lens radius", u.abs());
    let delta = ray_length(u, sensor_x_mm, geom) - ray_length(0.0, sensor_x_mm, geom);
    let phase_err = TAU * cfg.mod_freq_hz * delta / cfg.c_mm_per_s();
    Ok(ResidualPath {
        delta_mm: delta,
        phase_err_rad: phase_err,
        depth_bias_mm: phase_err * cfg.mm_per_rad(),
    })
}
