//! Learnable microlens mask patches and their toroidal tiling.
//!
//! A [`MaskPatch`] stores, for each of `P x P` sensor pixels, the
//! transmittance of every `U x V` sub-aperture cell. The full-sensor mask
//! repeats the centered `K x K` crop of the patch with an adjustable phase.

use std::path::Path;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::formats::{write_pgm, Pgm};
use crate::rng::RngState;
use crate::tensor::{tns_read, tns_write, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPatch {
    values: Tensor,
}

impl MaskPatch {
    /// Wraps a `[U, V, P, P]` tensor whose values lie in `[0, 1]`.
    pub fn new(values: Tensor) -> Result<Self> {
        let d = values.dims();
        ensure!(
            d.len() == 4 && d[2] == d[3],
            Shape,
            "mask patch must be [U, V, P, P], got {d:?}"
        );
        ensure!(
            values.data().iter().all(|v| (0.0..=1.0).contains(v)),
            InvalidParam,
            "mask transmittance outside [0, 1]"
        );
        Ok(MaskPatch { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn views(&self) -> (usize, usize) {
        (self.values.dims()[0], self.values.dims()[1])
    }

    pub fn side(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(tns_read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        tns_write(&self.values, path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskPattern {
    Ones,
    /// Disk of the given diameter in aperture cells.
    Circle(usize),
    /// Independent open cells with this probability.
    Bernoulli(f64),
    /// `N(0.5, s^2)` clamped into `[0, 1]`.
    Gaussian(f64),
    /// Stripes of this width with a random orientation and phase per pixel.
    Barcode(usize),
}

impl FromStr for MaskPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || Error::InvalidParam(format!("bad mask pattern `{s}`"));
        let num = |default: &str| -> Result<f64> {
            arg.unwrap_or(default).parse::<f64>().map_err(|_| bad())
        };
        Ok(match name {
            "ones" => MaskPattern::Ones,
            "circle" => MaskPattern::Circle(arg.ok_or_else(bad)?.parse().map_err(|_| bad())?),
            "bernoulli" => MaskPattern::Bernoulli(num("0.5")?),
            "gaussian" => MaskPattern::Gaussian(num("0.2")?),
            "barcode" => MaskPattern::Barcode(num("1")? as usize),
            _ => return Err(bad()),
        })
    }
}

impl std::fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskPattern::Ones => write!(f, "ones"),
            MaskPattern::Circle(d) => write!(f, "circle:{d}"),
            MaskPattern::Bernoulli(p) => write!(f, "bernoulli:{p}"),
            MaskPattern::Gaussian(s) => write!(f, "gaussian:{s}"),
            MaskPattern::Barcode(w) => write!(f, "barcode:{w}"),
        }
    }
}

/// Aperture cells within radius `(d - 1) / 2` of the center; `d = 1` keeps
/// only the chief ray and `d = 5` on a 9x9 grid opens 13 cells.
pub fn circle_cells(u_views: usize, v_views: usize, diameter: usize) -> Vec<bool> {
    let r = (diameter as f64 - 1.0) / 2.0;
    let (cu, cv) = ((u_views / 2) as f64, (v_views / 2) as f64);
    (0..u_views * v_views)
        .map(|i| {
            let du = (i / v_views) as f64 - cu;
            let dv = (i % v_views) as f64 - cv;
            du * du + dv * dv <= r * r + 1e-9
        })
        .collect()
}

pub fn init_mask(
    pattern: MaskPattern,
    u_views: usize,
    v_views: usize,
    side: usize,
    rng: &mut RngState,
) -> Result<MaskPatch> {
    ensure!(
        u_views > 0 && v_views > 0 && side > 0,
        InvalidParam,
        "mask extents must be positive"
    );
    let cells = u_views * v_views;
    let pixels = side * side;
    // values[view * pixels + pixel]
    let mut values = vec![0f32; cells * pixels];
    match pattern {
        MaskPattern::Ones => values.fill(1.0),
        MaskPattern::Circle(d) => {
            ensure!(
                d >= 1 && d <= u_views.min(v_views),
                InvalidParam,
                "circle diameter {d} outside [1, {}]",
                u_views.min(v_views)
            );
            for (view, open) in circle_cells(u_views, v_views, d).into_iter().enumerate() {
                if open {
                    values[view * pixels..(view + 1) * pixels].fill(1.0);
                }
            }
        }
        MaskPattern::Bernoulli(p) => {
            ensure!((0.0..=1.0).contains(&p), InvalidParam, "bernoulli p={p} outside [0, 1]");
            for v in values.iter_mut() {
                *v = if rng.bernoulli(p) { 1.0 } else { 0.0 };
            }
        }
        MaskPattern::Gaussian(s) => {
            ensure!(s >= 0.0 && s.is_finite(), InvalidParam, "gaussian spread must be >= 0");
            for v in values.iter_mut() {
                *v = (0.5 + s * rng.standard_normal()).clamp(0.0, 1.0) as f32;
            }
        }
        MaskPattern::Barcode(width) => {
            ensure!(width >= 1, InvalidParam, "barcode stripe width must be >= 1");
            for pixel in 0..pixels {
                let theta = std::f64::consts::PI * rng.uniform(0.0, 1.0)?;
                let phase = rng.uniform(0.0, 2.0 * width as f64)?;
                let (c, s) = (theta.cos(), theta.sin());
                for view in 0..cells {
                    let du = view_offset(view / v_views, u_views);
                    let dv = view_offset(view % v_views, v_views);
                    let t = du * c + dv * s + phase;
                    let band = (t / width as f64).floor() as i64;
                    values[view * pixels + pixel] = if band.rem_euclid(2) == 0 { 1.0 } else { 0.0 };
                }
            }
        }
    }
    MaskPatch::new(Tensor::new(vec![u_views, v_views, side, side], values)?)
}

fn view_offset(i: usize, n: usize) -> f64 {
    crate::scene::view_offset(i, n)
}

/// Full-sensor view of a patch: the centered `crop x crop` block repeated
/// toroidally with phase `offset`.
#[derive(Clone, Copy, Debug)]
pub struct MicrolensMask<'a> {
    patch: &'a MaskPatch,
    height: usize,
    width: usize,
    crop: usize,
    offset: (usize, usize),
}

pub fn tile_mask(
    patch: &MaskPatch,
    height: usize,
    width: usize,
    crop: usize,
    offset: (usize, usize),
) -> Result<MicrolensMask<'_>> {
    ensure!(
        crop >= 1 && crop <= patch.side(),
        InvalidParam,
        "crop {crop} exceeds patch side {}",
        patch.side()
    );
    ensure!(height > 0 && width > 0, InvalidParam, "empty sensor");
    Ok(MicrolensMask {
        patch,
        height,
        width,
        crop,
        offset,
    })
}

impl<'a> MicrolensMask<'a> {
    pub fn patch(&self) -> &'a MaskPatch {
        self.patch
    }

    pub fn sensor(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn views(&self) -> (usize, usize) {
        self.patch.views()
    }

    pub fn crop(&self) -> usize {
        self.crop
    }

    pub fn offset(&self) -> (usize, usize) {
        self.offset
    }

    fn anchor(&self) -> usize {
        (self.patch.side() - self.crop) / 2
    }

    /// Flat index into the patch tensor backing sensor pixel `(x, y)` of
    /// aperture cell `view` (row-major over `U x V`).
    pub fn patch_index(&self, view: usize, x: usize, y: usize) -> usize {
        let p = self.patch.side();
        let a = self.anchor();
        let row = a + (x + self.offset.0) % self.crop;
        let col = a + (y + self.offset.1) % self.crop;
        (view * p + row) * p + col
    }

    pub fn value(&self, u: usize, v: usize, x: usize, y: usize) -> f32 {
        let (_, vv) = self.views();
        self.patch.values.data()[self.patch_index(u * vv + v, x, y)]
    }

    /// Patch indices for every `[view, x, y]`, row-major.
    pub fn gather_indices(&self) -> Vec<usize> {
        let (u, v) = self.views();
        let mut out = Vec::with_capacity(u * v * self.height * self.width);
        for view in 0..u * v {
            for x in 0..self.height {
                for y in 0..self.width {
                    out.push(self.patch_index(view, x, y));
                }
            }
        }
        out
    }

    /// Materialized `[U, V, H, W]` mask.
    pub fn dense(&self) -> Tensor {
        let src = self.patch.values.data();
        let data = self.gather_indices().into_iter().map(|i| src[i]).collect();
        let (u, v) = self.views();
        Tensor::new(vec![u, v, self.height, self.width], data).expect("mask values are finite")
    }
}

pub fn project_box(patch: &MaskPatch) -> MaskPatch {
    MaskPatch {
        values: patch.values.map(|v| v.clamp(0.0, 1.0)),
    }
}

/// Clamps an arbitrary tensor into a valid patch.
pub fn project_tensor(values: Tensor) -> Result<MaskPatch> {
    MaskPatch::new(values.map(|v| v.clamp(0.0, 1.0)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinarizeReport {
    pub throughput_before: f64,
    pub throughput_after: f64,
}

pub fn binarize(patch: &MaskPatch, threshold: f64) -> Result<(MaskPatch, BinarizeReport)> {
    ensure!(
        threshold > 0.0 && threshold < 1.0,
        InvalidParam,
        "threshold {threshold} outside (0, 1)"
    );
    let out = MaskPatch {
        values: patch
            .values
            .map(|v| if v as f64 >= threshold { 1.0 } else { 0.0 }),
    };
    let report = BinarizeReport {
        throughput_before: throughput(patch),
        throughput_after: throughput(&out),
    };
    Ok((out, report))
}

/// Mean transmittance.
pub fn throughput(patch: &MaskPatch) -> f64 {
    let d = patch.values.data();
    d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64
}

/// Mean transmittance over the `crop x crop` region that tiling actually uses.
pub fn tiled_throughput(patch: &MaskPatch, crop: usize) -> Result<f64> {
    let m = tile_mask(patch, crop, crop, crop, (0, 0))?;
    let d = m.dense();
    Ok(d.data().iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64)
}

/// Binary PGM mosaic: each sensor pixel becomes a `U x V` block, so the
/// image is `P*U` rows by `P*V` columns.
pub fn mosaic_pgm(patch: &MaskPatch) -> Pgm {
    let (u, v) = patch.views();
    let p = patch.side();
    let (rows, cols) = (p * u, p * v);
    let src = patch.values.data();
    let mut pixels = vec![0u8; rows * cols];
    for view in 0..u * v {
        let (iu, iv) = (view / v, view % v);
        for x in 0..p {
            for y in 0..p {
                let val = src[(view * p + x) * p + y];
                pixels[(x * u + iu) * cols + y * v + iv] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Pgm {
        width: cols,
        height: rows,
        maxval: 255,
        comment: Some(format!(
            "mosaic U={u} V={v} P={p}: row = x*{u} + u, col = y*{v} + v for patch pixel (x, y) and aperture cell (u, v)"
        )),
        pixels,
    }
}

/// Inverse of [`mosaic_pgm`] given the aperture extents.
pub fn patch_from_mosaic(pgm: &Pgm, u: usize, v: usize) -> Result<MaskPatch> {
    ensure!(
        u > 0 && v > 0 && pgm.height.is_multiple_of(u) && pgm.width.is_multiple_of(v) && pgm.height / u == pgm.width / v,
        Shape,
        "{}x{} mosaic does not hold a square patch of {u}x{v} cells",
        pgm.width,
        pgm.height
    );
    let p = pgm.height / u;
    let mut values = vec![0f32; u * v * p * p];
    for view in 0..u * v {
        let (iu, iv) = (view / v, view % v);
        for x in 0..p {
            for y in 0..p {
                let b = pgm.pixels[(x * u + iu) * pgm.width + y * v + iv];
                values[(view * p + x) * p + y] = b as f32 / pgm.maxval as f32;
            }
        }
    }
    MaskPatch::new(Tensor::new(vec![u, v, p, p], values)?)
}

pub fn write_mosaic(patch: &MaskPatch, path: impl AsRef<Path>) -> Result<()> {
    write_pgm(&mosaic_pgm(patch), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn open_cells_per_pixel(p: &MaskPatch) -> Vec<usize> {
        let side = p.side();
        let pixels = side * side;
        let (u, v) = p.views();
        (0..pixels)
            .map(|px| {
                (0..u * v)
                    .filter(|view| p.values().data()[view * pixels + px] == 1.0)
                    .count()
            })
            .collect()
    }

    #[test]
    fn pinhole_keeps_chief_ray() {
        let p = init_mask(MaskPattern::Circle(1), 9, 9, 4, &mut RngState::new(0)).unwrap();
        assert!(open_cells_per_pixel(&p).iter().all(|&c| c == 1));
        let (_, v) = p.views();
        assert_eq!(p.values().at(&[4, 4, 0, 0]), 1.0);
        assert_eq!(p.values().at(&[4, 3, 0, 0]), 0.0);
        assert_eq!(v, 9);
        assert!((throughput(&p) - 1.0 / 81.0).abs() < 1e-12);
    }

    #[test]
    fn circle5_has_thirteen_cells() {
        let p = init_mask(MaskPattern::Circle(5), 9, 9, 4, &mut RngState::new(0)).unwrap();
        assert!(open_cells_per_pixel(&p).iter().all(|&c| c == 13));
        assert!((throughput(&p) - 13.0 / 81.0).abs() < 1e-12);
        let pin = init_mask(MaskPattern::Circle(1), 9, 9, 4, &mut RngState::new(0)).unwrap();
        assert!((throughput(&p) / throughput(&pin) - 13.0).abs() < 1e-9);
    }

    #[test]
    fn ones_throughput() {
        let p = init_mask(MaskPattern::Ones, 3, 3, 5, &mut RngState::new(0)).unwrap();
        assert_eq!(throughput(&p), 1.0);
    }

    #[test]
    fn invalid_patterns() {
        let mut rng = RngState::new(0);
        assert!(init_mask(MaskPattern::Circle(0), 9, 9, 4, &mut rng).is_err());
        assert!(init_mask(MaskPattern::Circle(11), 9, 9, 4, &mut rng).is_err());
        assert!(init_mask(MaskPattern::Bernoulli(1.5), 9, 9, 4, &mut rng).is_err());
        assert!("circle".parse::<MaskPattern>().is_err());
        assert!("hexagon:2".parse::<MaskPattern>().is_err());
        assert_eq!("circle:5".parse::<MaskPattern>().unwrap(), MaskPattern::Circle(5));
    }

    #[test]
    fn random_patterns_are_valid_and_seeded() {
        for pat in [
            MaskPattern::Bernoulli(0.3),
            MaskPattern::Gaussian(0.3),
            MaskPattern::Barcode(2),
        ] {
            let a = init_mask(pat, 5, 5, 6, &mut RngState::new(4)).unwrap();
            let b = init_mask(pat, 5, 5, 6, &mut RngState::new(4)).unwrap();
            assert_eq!(a, b);
            assert!(a.values().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let bern = init_mask(MaskPattern::Bernoulli(0.3), 5, 5, 6, &mut RngState::new(4)).unwrap();
        assert!(bern.values().data().iter().all(|&v| v == 0.0 || v == 1.0));
        let bar = init_mask(MaskPattern::Barcode(1), 9, 9, 3, &mut RngState::new(1)).unwrap();
        let t = throughput(&bar);
        assert!(t > 0.3 && t < 0.7, "barcode throughput {t}");
    }

    fn ramp_patch(u: usize, v: usize, p: usize) -> MaskPatch {
        let n = u * v * p * p;
        let data = (0..n).map(|i| i as f32 / n as f32).collect();
        MaskPatch::new(Tensor::new(vec![u, v, p, p], data).unwrap()).unwrap()
    }

    #[test]
    fn identity_tiling() {
        let patch = ramp_patch(2, 3, 5);
        let m = tile_mask(&patch, 5, 5, 5, (0, 0)).unwrap();
        assert_eq!(m.dense().data(), patch.values().data());
    }

    #[test]
    fn double_tiling_repeats_each_value_four_times() {
        let patch = ramp_patch(1, 1, 6);
        let m = tile_mask(&patch, 8, 8, 4, (0, 0)).unwrap();
        let mut counts = std::collections::HashMap::new();
        for i in m.gather_indices() {
            *counts.entry(i).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 16);
        assert!(counts.values().all(|&c| c == 4));
    }

    #[test]
    fn crop_larger_than_patch() {
        let patch = ramp_patch(1, 1, 4);
        assert!(tile_mask(&patch, 8, 8, 5, (0, 0)).is_err());
    }

    proptest! {
        #[test]
        fn tiling_is_periodic(r in 0usize..20, c in 0usize..20, x in 0usize..12, y in 0usize..12) {
            let patch = ramp_patch(2, 2, 7);
            let k = 5;
            let a = tile_mask(&patch, 12, 12, k, (r, c)).unwrap();
            let b = tile_mask(&patch, 12, 12, k, (r + k, c + k)).unwrap();
            prop_assert_eq!(a.dense(), b.dense());
            // shift invariance in sensor coordinates
            let big = tile_mask(&patch, 24, 24, k, (r, c)).unwrap();
            prop_assert_eq!(big.value(1, 0, x, y), big.value(1, 0, x + k, y + k));
        }

        #[test]
        fn binarize_is_idempotent(seed in any::<u64>(), t in 0.05f64..0.95) {
            let p = init_mask(MaskPattern::Gaussian(0.4), 3, 3, 4, &mut RngState::new(seed)).unwrap();
            let (b, report) = binarize(&p, t).unwrap();
            let (bb, _) = binarize(&b, t).unwrap();
            prop_assert_eq!(&b, &bb);
            prop_assert!((0.0..=1.0).contains(&report.throughput_after));
            prop_assert!(b.values().data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn box_projection() {
        let t = Tensor::new(vec![1, 1, 2, 2], vec![0.5, 1.7, -0.2, 1.0]).unwrap();
        let p = project_tensor(t).unwrap();
        assert_eq!(p.values().data(), &[0.5, 1.0, 0.0, 1.0]);
        assert_eq!(project_box(&p), p);
        let inside = ramp_patch(2, 2, 3);
        assert_eq!(project_box(&inside), inside);
    }

    #[test]
    fn binarize_fixed_points() {
        let t = Tensor::full(&[1, 1, 2, 2], 0.6);
        let (b, r) = binarize(&MaskPatch::new(t).unwrap(), 0.5).unwrap();
        assert!(b.values().data().iter().all(|&v| v == 1.0));
        assert!((r.throughput_before - 0.6).abs() < 1e-6);
        assert_eq!(r.throughput_after, 1.0);
        let c5 = init_mask(MaskPattern::Circle(5), 9, 9, 3, &mut RngState::new(0)).unwrap();
        assert_eq!(binarize(&c5, 0.5).unwrap().0, c5);
        assert!(binarize(&c5, 1.0).is_err());
    }

    #[test]
    fn mosaic_round_trip() {
        let p = init_mask(MaskPattern::Bernoulli(0.5), 3, 5, 4, &mut RngState::new(8)).unwrap();
        let pgm = mosaic_pgm(&p);
        assert_eq!((pgm.height, pgm.width), (12, 20));
        assert!(pgm.pixels.iter().all(|&b| b == 0 || b == 255));
        assert_eq!(patch_from_mosaic(&pgm, 3, 5).unwrap(), p);
    }
}
