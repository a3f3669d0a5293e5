//! Parametric layered scenes and their discretized light fields.
//!
//! A scene is a front-to-back stack of planar layers, each with an albedo
//! texture and a binary opacity map. Rendering warps every layer into each
//! sub-aperture view by its disparity and composites front to back.
//!
//! Axis conventions: light-field tensors are `[U, V, H, W]`. The aperture
//! offset `u` shifts content along columns (x, the `W` axis) and `v` along
//! rows (y, the `H` axis). For a layer at depth `z` the shift in pixels is
//! `offset * baseline * (1/z - 1/focus)`, so positive `u` moves content
//! nearer than the focus plane toward positive x.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::rng::RngState;
use crate::tensor::{tns_read, tns_write, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub depth_mm: f64,
    /// `H x W`, values in `[0, 1]`.
    pub albedo: Vec<f32>,
    /// `H x W`; ignored (treated as all-opaque) for the backmost layer.
    pub opacity: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayeredScene {
    pub height: usize,
    pub width: usize,
    pub layers: Vec<Layer>,
}

impl LayeredScene {
    pub fn new(height: usize, width: usize, mut layers: Vec<Layer>) -> Result<Self> {
        ensure!(!layers.is_empty(), InvalidParam, "scene needs at least one layer");
        ensure!(height > 0 && width > 0, InvalidParam, "empty sensor");
        for pair in layers.windows(2) {
            ensure!(
                pair[0].depth_mm < pair[1].depth_mm,
                InvalidParam,
                "layer depths must increase front to back ({} >= {})",
                pair[0].depth_mm,
                pair[1].depth_mm
            );
        }
        for l in &layers {
            ensure!(
                l.depth_mm > 0.0 && l.depth_mm.is_finite(),
                InvalidParam,
                "layer depth must be positive, got {}",
                l.depth_mm
            );
            ensure!(
                l.albedo.len() == height * width && l.opacity.len() == height * width,
                Shape,
                "layer maps must be {height}x{width}"
            );
            ensure!(
                l.albedo.iter().all(|a| (0.0..=1.0).contains(a)),
                InvalidParam,
                "albedo outside [0, 1]"
            );
        }
        layers.last_mut().unwrap().opacity.iter_mut().for_each(|o| *o = true);
        Ok(LayeredScene {
            height,
            width,
            layers,
        })
    }

    pub fn depths(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.depth_mm).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Preset {
    Flat,
    Edge,
    Bars,
    Staircase,
    Disk,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Flat,
        Preset::Edge,
        Preset::Bars,
        Preset::Staircase,
        Preset::Disk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Flat => "flat",
            Preset::Edge => "edge",
            Preset::Bars => "bars",
            Preset::Staircase => "staircase",
            Preset::Disk => "disk",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown preset `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    Constant(f32),
    /// Smooth random texture spanning `[lo, hi]`; shortest wavelength in pixels.
    Noise { lo: f32, hi: f32, min_wavelength: f32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PresetParams {
    pub height: usize,
    pub width: usize,
    /// Foreground depth; the flat preset ignores it.
    pub fg_mm: f64,
    /// Background depth, also the depth of the flat preset.
    pub bg_mm: f64,
    /// Depths must stay strictly below this (the unambiguous range).
    pub max_depth_mm: f64,
    /// Edge split column; defaults to `width / 2`.
    pub split: Option<usize>,
    pub steps: usize,
    pub bar_period: usize,
    /// Disk radius in pixels; defaults to `min(H, W) / 4`.
    pub radius: Option<f64>,
    pub texture: Texture,
}

impl Default for PresetParams {
    fn default() -> Self {
        PresetParams {
            height: 64,
            width: 64,
            fg_mm: 1000.0,
            bg_mm: 3000.0,
            max_depth_mm: crate::forward::ToFConfig::default().unambiguous_range_mm(),
            split: None,
            steps: 4,
            bar_period: 16,
            radius: None,
            texture: Texture::Constant(1.0),
        }
    }
}

fn make_texture(tex: Texture, h: usize, w: usize, rng: &mut RngState) -> Result<Vec<f32>> {
    match tex {
        Texture::Constant(a) => {
            ensure!((0.0..=1.0).contains(&a), InvalidParam, "albedo {a} outside [0, 1]");
            Ok(vec![a; h * w])
        }
        Texture::Noise {
            lo,
            hi,
            min_wavelength,
        } => {
            ensure!(
                0.0 <= lo && lo <= hi && hi <= 1.0,
                InvalidParam,
                "texture range [{lo}, {hi}] not inside [0, 1]"
            );
            ensure!(min_wavelength >= 2.0, InvalidParam, "wavelength below Nyquist");
            const WAVES: usize = 8;
            let kmax = std::f64::consts::TAU / min_wavelength as f64;
            let waves: Vec<(f64, f64, f64)> = (0..WAVES)
                .map(|_| {
                    let k = rng.uniform(0.1 * kmax, kmax).unwrap();
                    let theta = rng.uniform(0.0, std::f64::consts::TAU).unwrap();
                    let phase = rng.uniform(0.0, std::f64::consts::TAU).unwrap();
                    (k * theta.cos(), k * theta.sin(), phase)
                })
                .collect();
            let raw: Vec<f64> = (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    waves
                        .iter()
                        .map(|(ky, kx, p)| (ky * y + kx * x + p).cos())
                        .sum()
                })
                .collect();
            let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (max - min).max(1e-12);
            Ok(raw
                .iter()
                .map(|v| {
                    let t = (v - min) / span;
                    (lo as f64 + (hi - lo) as f64 * t).clamp(lo as f64, hi as f64) as f32
                })
                .collect())
        }
    }
}

/// Builds a named parametric scene. Deterministic in `(preset, params, rng)`.
pub fn preset_scene(preset: Preset, params: &PresetParams, rng: &mut RngState) -> Result<LayeredScene> {
    let (h, w) = (params.height, params.width);
    ensure!(h > 0 && w > 0, InvalidParam, "sensor extents must be positive");
    let check = |z: f64| -> Result<()> {
        ensure!(
            z > 0.0 && z < params.max_depth_mm,
            InvalidParam,
            "depth {z} mm outside (0, {}) mm",
            params.max_depth_mm
        );
        Ok(())
    };
    check(params.bg_mm)?;
    if preset != Preset::Flat {
        check(params.fg_mm)?;
        ensure!(
            params.fg_mm < params.bg_mm,
            InvalidParam,
            "foreground must be nearer than background"
        );
    }
    let layer = |depth_mm: f64, opacity: Vec<bool>, rng: &mut RngState| -> Result<Layer> {
        Ok(Layer {
            depth_mm,
            albedo: make_texture(params.texture, h, w, rng)?,
            opacity,
        })
    };
    let mask_from = |f: &dyn Fn(usize, usize) -> bool| -> Vec<bool> {
        (0..h * w).map(|i| f(i / w, i % w)).collect()
    };
    let full = vec![true; h * w];

    let layers = match preset {
        Preset::Flat => vec![layer(params.bg_mm, full, rng)?],
        Preset::Edge => {
            let split = params.split.unwrap_or(w / 2);
            ensure!(split > 0 && split < w, InvalidParam, "edge split {split} outside (0, {w})");
            vec![
                layer(params.fg_mm, mask_from(&|_, x| x < split), rng)?,
                layer(params.bg_mm, full, rng)?,
            ]
        }
        Preset::Bars => {
            let p = params.bar_period;
            ensure!(p >= 2, InvalidParam, "bar period must be >= 2");
            let vertical = rng.bernoulli(0.5);
            let open = move |y: usize, x: usize| {
                let c = if vertical { x } else { y };
                c % p < p / 2
            };
            vec![
                layer(params.fg_mm, mask_from(&open), rng)?,
                layer(params.bg_mm, full, rng)?,
            ]
        }
        Preset::Staircase => {
            let n = params.steps;
            ensure!(n >= 2 && n <= w, InvalidParam, "staircase needs 2..=width steps, got {n}");
            (0..n)
                .map(|k| {
                    let t = k as f64 / (n - 1) as f64;
                    let z = params.fg_mm + t * (params.bg_mm - params.fg_mm);
                    let (lo, hi) = (k * w / n, (k + 1) * w / n);
                    layer(z, mask_from(&|_, x| x >= lo && x < hi), rng)
                })
                .collect::<Result<Vec<_>>>()?
        }
        Preset::Disk => {
            let r = params.radius.unwrap_or(h.min(w) as f64 / 4.0);
            ensure!(r > 0.0, InvalidParam, "disk radius must be positive");
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            vec![
                layer(
                    params.fg_mm,
                    mask_from(&|y, x| {
                        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                        dy * dy + dx * dx <= r * r
                    }),
                    rng,
                )?,
                layer(params.bg_mm, full, rng)?,
            ]
        }
    };
    LayeredScene::new(h, w, layers)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LightField {
    /// `[U, V, H, W]`, values in `[0, 1]`.
    pub amplitude: Tensor,
    /// `[U, V, H, W]`, depth in mm of the first opaque layer along each ray.
    pub view_depth: Tensor,
    /// Pixel shift per unit aperture offset per unit inverse depth (px * mm).
    pub baseline: f64,
    pub focus_depth_mm: f64,
}

impl LightField {
    pub fn views(&self) -> (usize, usize) {
        let d = self.amplitude.dims();
        (d[0], d[1])
    }

    pub fn sensor(&self) -> (usize, usize) {
        let d = self.amplitude.dims();
        (d[2], d[3])
    }

    /// Distinct depths of the central view, ascending; the layered model
    /// guarantees these are exactly the visible layer depths.
    pub fn layer_depths(&self) -> Vec<f64> {
        let gt = central_depth(self);
        let mut zs: Vec<f32> = gt.data().to_vec();
        zs.sort_by(f32::total_cmp);
        zs.dedup();
        zs.into_iter().map(f64::from).collect()
    }

    /// Crops a spatial window, keeping all views.
    pub fn window(&self, row: usize, col: usize, size: usize) -> Result<LightField> {
        let (u, v) = self.views();
        let (h, w) = self.sensor();
        ensure!(
            row + size <= h && col + size <= w && size > 0,
            Shape,
            "window {size} at ({row}, {col}) exceeds {h}x{w}"
        );
        let crop = |t: &Tensor| -> Tensor {
            let src = t.data();
            let mut out = Vec::with_capacity(u * v * size * size);
            for view in 0..u * v {
                for y in row..row + size {
                    let base = (view * h + y) * w + col;
                    out.extend_from_slice(&src[base..base + size]);
                }
            }
            Tensor::new(vec![u, v, size, size], out).unwrap()
        };
        Ok(LightField {
            amplitude: crop(&self.amplitude),
            view_depth: crop(&self.view_depth),
            baseline: self.baseline,
            focus_depth_mm: self.focus_depth_mm,
        })
    }
}

/// Signed aperture offset of view index `i` on an axis with `n` samples.
pub fn view_offset(i: usize, n: usize) -> f64 {
    i as f64 - ((n - 1) / 2) as f64
}

/// Baseline that yields `max_px` of disparity at the outermost view for a
/// layer at `near_mm` when focused at `focus_mm`.
pub fn baseline_for_disparity(max_px: f64, near_mm: f64, focus_mm: f64, views: usize) -> f64 {
    let edge = ((views - 1) / 2).max(1) as f64;
    max_px / (edge * (1.0 / near_mm - 1.0 / focus_mm).abs())
}

fn bilinear(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| src[yy * w + xx] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

fn nearest_index(h: usize, w: usize, y: f64, x: f64) -> usize {
    let yi = (y + 0.5).floor().clamp(0.0, (h - 1) as f64) as usize;
    let xi = (x + 0.5).floor().clamp(0.0, (w - 1) as f64) as usize;
    yi * w + xi
}

/// Renders all `u_views x v_views` sub-aperture views of a scene.
pub fn render_lightfield(
    scene: &LayeredScene,
    u_views: usize,
    v_views: usize,
    baseline: f64,
    focus_depth_mm: f64,
) -> Result<LightField> {
    ensure!(
        u_views % 2 == 1 && v_views % 2 == 1,
        InvalidParam,
        "aperture extents must be odd, got {u_views}x{v_views}"
    );
    ensure!(
        focus_depth_mm > 0.0 && focus_depth_mm.is_finite(),
        InvalidParam,
        "focus depth must be positive"
    );
    ensure!(baseline.is_finite(), InvalidParam, "baseline must be finite");
    let (h, w) = (scene.height, scene.width);
    let n = h * w;

    let views: Vec<(Vec<f32>, Vec<f32>)> = (0..u_views * v_views)
        .into_par_iter()
        .map(|view| {
            let du = view_offset(view / v_views, u_views);
            let dv = view_offset(view % v_views, v_views);
            let mut amp = vec![0f32; n];
            let mut dep = vec![0f32; n];
            let mut done = vec![false; n];
            let last = scene.layers.len() - 1;
            for (k, layer) in scene.layers.iter().enumerate() {
                let s = baseline * (1.0 / layer.depth_mm - 1.0 / focus_depth_mm);
                let (sx, sy) = (du * s, dv * s);
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        if done[i] {
                            continue;
                        }
                        let (ys, xs) = (y as f64 - sy, x as f64 - sx);
                        if k != last && !layer.opacity[nearest_index(h, w, ys, xs)] {
                            continue;
                        }
                        amp[i] = bilinear(&layer.albedo, h, w, ys, xs);
                        dep[i] = layer.depth_mm as f32;
                        done[i] = true;
                    }
                }
            }
            (amp, dep)
        })
        .collect();

    let mut amplitude = Vec::with_capacity(views.len() * n);
    let mut view_depth = Vec::with_capacity(views.len() * n);
    for (a, d) in views {
        amplitude.extend(a);
        view_depth.extend(d);
    }
    let dims = vec![u_views, v_views, h, w];
    Ok(LightField {
        amplitude: Tensor::new(dims.clone(), amplitude)?,
        view_depth: Tensor::new(dims, view_depth)?,
        baseline,
        focus_depth_mm,
    })
}

/// Ground-truth depth: the central view's per-ray depth.
pub fn central_depth(lf: &LightField) -> Tensor {
    let (u, v) = lf.views();
    let (h, w) = lf.sensor();
    let view = (u / 2) * v + v / 2;
    let data = lf.view_depth.data()[view * h * w..(view + 1) * h * w].to_vec();
    Tensor::new(vec![h, w], data).expect("central view is a valid HxW map")
}

fn sidecar(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

/// Paths of the three files that persist a light field under `prefix`.
pub fn lightfield_paths(prefix: impl AsRef<Path>) -> [PathBuf; 3] {
    let p = prefix.as_ref();
    [
        sidecar(p, ".amp.tns"),
        sidecar(p, ".dep.tns"),
        sidecar(p, ".meta"),
    ]
}

pub fn write_lightfield(lf: &LightField, prefix: impl AsRef<Path>) -> Result<()> {
    let [amp, dep, meta] = lightfield_paths(prefix);
    tns_write(&lf.amplitude, &amp)?;
    tns_write(&lf.view_depth, &dep)?;
    let (u, v) = lf.views();
    let text = format!(
        "U = {u}\nV = {v}\nbaseline = {}\nfocus_depth_mm = {}\n",
        lf.baseline, lf.focus_depth_mm
    );
    fs::write(&meta, text).map_err(|e| Error::io(&meta, e))
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_lightfield(prefix: impl AsRef<Path>) -> Result<LightField> {
    let [amp, dep, meta] = lightfield_paths(prefix);
    let amplitude = tns_read(&amp)?;
    let view_depth = tns_read(&dep)?;
    let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let kv = parse_key_values(&text)?;
    let get = |k: &str| -> Result<f64> {
        kv.get(k)
            .ok_or_else(|| Error::Parse(format!("meta missing `{k}`")))?
            .parse()
            .map_err(|_| Error::Parse(format!("meta `{k}` is not a number")))
    };
    let (u, v) = (get("U")? as usize, get("V")? as usize);
    ensure!(
        amplitude.ndim() == 4 && amplitude.dims()[..2] == [u, v],
        Shape,
        "amplitude dims {:?} disagree with U={u} V={v}",
        amplitude.dims()
    );
    ensure!(
        view_depth.dims() == amplitude.dims(),
        Shape,
        "depth dims {:?} differ from amplitude dims {:?}",
        view_depth.dims(),
        amplitude.dims()
    );
    Ok(LightField {
        amplitude,
        view_depth,
        baseline: get("baseline")?,
        focus_depth_mm: get("focus_depth_mm")?,
    })
}

/// One entry of the desk-scale scene suite.
#[derive(Clone, Debug)]
pub struct SuiteScene {
    pub name: String,
    pub preset: Preset,
    pub seed: u64,
    pub held_out: bool,
    pub lightfield: LightField,
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub size: usize,
    pub views: usize,
    pub count: usize,
    pub fg_range_mm: (f64, f64),
    pub bg_range_mm: (f64, f64),
    pub baseline: f64,
    pub texture: Texture,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            size: 64,
            views: 9,
            count: 16,
            fg_range_mm: (900.0, 1400.0),
            bg_range_mm: (2600.0, 3400.0),
            // ~3 px of disparity at the outer views for 1000 mm over 3000 mm
            baseline: baseline_for_disparity(3.0, 1000.0, 3000.0, 9),
            texture: Texture::Noise {
                lo: 0.6,
                hi: 1.0,
                min_wavelength: 12.0,
            },
        }
    }
}

/// Deterministic parametric stand-in for a light-field dataset.
///
/// Scene `i` uses preset `[edge, disk, bars, staircase][i / 4 % 4]`; scenes
/// with `i % 4 == 3` are held out, so every preset contributes one test scene.
/// Each scene is focused at its background.
pub fn desk_suite(cfg: &SuiteConfig, seed: u64) -> Result<Vec<SuiteScene>> {
    const ORDER: [Preset; 4] = [Preset::Edge, Preset::Disk, Preset::Bars, Preset::Staircase];
    let root = RngState::new(seed);
    (0..cfg.count)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let preset = ORDER[(i / 4) % ORDER.len()];
            let fg = rng.uniform(cfg.fg_range_mm.0, cfg.fg_range_mm.1)?.round();
            let bg = rng.uniform(cfg.bg_range_mm.0, cfg.bg_range_mm.1)?.round();
            let params = PresetParams {
                height: cfg.size,
                width: cfg.size,
                fg_mm: fg,
                bg_mm: bg,
                split: Some(cfg.size / 4 + rng.below(cfg.size / 2)),
                radius: Some(cfg.size as f64 * rng.uniform(0.2, 0.35)?),
                bar_period: 12 + 2 * rng.below(5),
                steps: 3 + rng.below(2),
                texture: cfg.texture,
                ..PresetParams::default()
            };
            let scene = preset_scene(preset, &params, &mut rng)?;
            let lightfield = render_lightfield(&scene, cfg.views, cfg.views, cfg.baseline, bg)?;
            Ok(SuiteScene {
                name: format!("{}-{i:02}", preset.name()),
                preset,
                seed: i as u64,
                held_out: i % 4 == 3,
                lightfield,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> PresetParams {
        PresetParams {
            height: 16,
            width: 16,
            ..PresetParams::default()
        }
    }

    #[test]
    fn flat_is_one_constant_layer() {
        let p = PresetParams {
            bg_mm: 2000.0,
            ..params()
        };
        let s = preset_scene(Preset::Flat, &p, &mut RngState::new(0)).unwrap();
        assert_eq!(s.layers.len(), 1);
        let lf = render_lightfield(&s, 3, 3, 500.0, 1500.0).unwrap();
        assert!(central_depth(&lf).data().iter().all(|&z| z == 2000.0));
    }

    #[test]
    fn edge_layers() {
        let s = preset_scene(Preset::Edge, &params(), &mut RngState::new(0)).unwrap();
        assert_eq!(s.depths(), vec![1000.0, 3000.0]);
        let front = &s.layers[0];
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(front.opacity[y * 16 + x], x < 8);
            }
        }
        let lf = render_lightfield(&s, 3, 3, 500.0, 3000.0).unwrap();
        let gt = central_depth(&lf);
        assert!(gt.data().iter().all(|&z| z == 1000.0 || z == 3000.0));
        assert!(gt.data().contains(&1000.0) && gt.data().contains(&3000.0));
    }

    #[test]
    fn staircase_layers_increase() {
        let s = preset_scene(Preset::Staircase, &params(), &mut RngState::new(0)).unwrap();
        assert_eq!(s.layers.len(), 4);
        assert!(s.depths().windows(2).all(|p| p[0] < p[1]));
        let lf = render_lightfield(&s, 3, 3, 100.0, 3000.0).unwrap();
        assert_eq!(lf.layer_depths().len(), 4);
    }

    #[test]
    fn depth_out_of_range() {
        let p = PresetParams {
            bg_mm: 6000.0,
            ..params()
        };
        assert!(preset_scene(Preset::Flat, &p, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn focus_plane_has_no_parallax() {
        let p = PresetParams {
            texture: Texture::Noise {
                lo: 0.0,
                hi: 1.0,
                min_wavelength: 4.0,
            },
            bg_mm: 2000.0,
            ..params()
        };
        let s = preset_scene(Preset::Flat, &p, &mut RngState::new(3)).unwrap();
        let lf = render_lightfield(&s, 5, 5, 800.0, 2000.0).unwrap();
        let n = 16 * 16;
        let center = &lf.amplitude.data()[12 * n..13 * n];
        for view in 0..25 {
            assert_eq!(&lf.amplitude.data()[view * n..(view + 1) * n], center);
        }
    }

    #[test]
    fn impulse_shifts_by_disparity() {
        // 1/z - 1/zf = 1/1000 - 1/2000 = 1/2000, baseline 4000 -> 2 px per view step
        let (h, w) = (9, 16);
        let mut albedo = vec![0f32; h * w];
        albedo[4 * w + 6] = 1.0;
        let scene = LayeredScene::new(
            h,
            w,
            vec![Layer {
                depth_mm: 1000.0,
                albedo: albedo.clone(),
                opacity: vec![true; h * w],
            }],
        )
        .unwrap();
        let lf = render_lightfield(&scene, 3, 3, 4000.0, 2000.0).unwrap();
        // view (u=+1, v=0) is index (2, 1)
        let view = 2 * 3 + 1;
        let amp = &lf.amplitude.data()[view * h * w..(view + 1) * h * w];
        for (i, &a) in amp.iter().enumerate() {
            let expect = if i == 4 * w + 8 { 1.0 } else { 0.0 };
            assert_eq!(a, expect, "pixel {i}");
        }
        // v = -1 moves it up two rows
        let view = 3;
        let amp = &lf.amplitude.data()[view * h * w..(view + 1) * h * w];
        assert_eq!(amp[2 * w + 6], 1.0);
    }

    fn mixed_rays(fg: f64) -> usize {
        let p = PresetParams {
            fg_mm: fg,
            ..params()
        };
        let s = preset_scene(Preset::Edge, &p, &mut RngState::new(0)).unwrap();
        let lf = render_lightfield(&s, 5, 5, 3000.0, 3000.0).unwrap();
        let n = 16 * 16;
        let d = lf.view_depth.data();
        (0..n)
            .filter(|&i| (1..25).any(|v| d[v * n + i] != d[i]))
            .count()
    }

    #[test]
    fn parallax_grows_with_inverse_depth_gap() {
        let near = mixed_rays(1000.0);
        let mid = mixed_rays(1500.0);
        let far = mixed_rays(2300.0);
        assert!(far > 0);
        assert!(near > mid && mid > far, "{near} {mid} {far}");
    }

    #[test]
    fn rendering_is_deterministic_and_bounded() {
        let p = PresetParams {
            texture: Texture::Noise {
                lo: 0.2,
                hi: 0.9,
                min_wavelength: 6.0,
            },
            ..params()
        };
        let render = || {
            let s = preset_scene(Preset::Disk, &p, &mut RngState::new(17)).unwrap();
            render_lightfield(&s, 5, 5, 1200.0, 3000.0).unwrap()
        };
        let a = render();
        assert_eq!(a, render());
        assert!(a.amplitude.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.view_depth.data().iter().all(|&z| z > 0.0));
    }

    #[test]
    fn even_aperture_rejected() {
        let s = preset_scene(Preset::Flat, &params(), &mut RngState::new(0)).unwrap();
        assert!(render_lightfield(&s, 4, 3, 1.0, 100.0).is_err());
        assert!(render_lightfield(&s, 3, 3, 1.0, 0.0).is_err());
    }

    #[test]
    fn lightfield_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("s1");
        let s = preset_scene(Preset::Bars, &params(), &mut RngState::new(2)).unwrap();
        let lf = render_lightfield(&s, 3, 3, 700.0, 3000.0).unwrap();
        write_lightfield(&lf, &prefix).unwrap();
        for p in lightfield_paths(&prefix) {
            assert!(p.exists());
        }
        assert_eq!(read_lightfield(&prefix).unwrap(), lf);
    }

    #[test]
    fn suite_holds_out_one_per_preset() {
        let cfg = SuiteConfig {
            size: 16,
            views: 3,
            ..SuiteConfig::default()
        };
        let suite = desk_suite(&cfg, 0).unwrap();
        assert_eq!(suite.len(), 16);
        let held: Vec<Preset> = suite.iter().filter(|s| s.held_out).map(|s| s.preset).collect();
        assert_eq!(held, vec![Preset::Edge, Preset::Disk, Preset::Bars, Preset::Staircase]);
    }
}
