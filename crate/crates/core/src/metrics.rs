//! Depth error metrics, flying-pixel counting and mask evaluation.

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::forward::{full_aperture, NoiseConfig, ToFConfig};
use crate::loss::{chamfer, ChamferMode};
use crate::mask::{init_mask, tile_mask, tiled_throughput, MaskPatch, MaskPattern};
use crate::pipeline::simulate_depth;
use crate::recon::{project_points, PointCloud};
use crate::refiner::{refine_forward, RefinerWeights};
use crate::rng::RngState;
use crate::scene::{central_depth, LightField};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub thresh3: f64,
    pub thresh15: f64,
    pub fp_ratio: f64,
    pub chamfer: f64,
    pub throughput: f64,
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    ensure!(
        pred.dims() == gt.dims(),
        Shape,
        "prediction {:?} and ground truth {:?} differ",
        pred.dims(),
        gt.dims()
    );
    ensure!(!pred.is_empty(), Shape, "empty depth map");
    Ok(())
}

pub fn rmse_mae(pred: &Tensor, gt: &Tensor) -> Result<(f64, f64)> {
    check_pair(pred, gt)?;
    let (mut sq, mut ab) = (0.0, 0.0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let d = p as f64 - g as f64;
        sq += d * d;
        ab += d.abs();
    }
    let n = pred.len() as f64;
    Ok(((sq / n).sqrt(), ab / n))
}

/// Percentage of pixels more than `x_mm` from the ground truth.
pub fn thresh_metric(pred: &Tensor, gt: &Tensor, x_mm: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    ensure!(x_mm > 0.0, InvalidParam, "threshold must be positive");
    let far = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(&p, &g)| (p as f64 - g as f64).abs() > x_mm)
        .count();
    Ok(100.0 * far as f64 / pred.len() as f64)
}

/// Points strictly inside `(z_fg + eps, z_bg - eps)`.
pub fn fp_count(cloud: &PointCloud, z_fg: f64, z_bg: f64, eps: f64) -> Result<usize> {
    let (lo, hi) = (z_fg + eps, z_bg - eps);
    ensure!(lo < hi, InvalidParam, "empty flying-pixel band ({lo}, {hi})");
    Ok((0..cloud.len())
        .filter(|&i| {
            let z = cloud.depth(i);
            z > lo && z < hi
        })
        .count())
}

pub fn fp_ratio(cloud: &PointCloud, z_fg: f64, z_bg: f64, eps: f64, reference_count: f64) -> Result<f64> {
    ensure!(reference_count > 0.0, InvalidParam, "reference count must be positive");
    Ok(fp_count(cloud, z_fg, z_bg, eps)? as f64 / reference_count)
}

/// Flying pixels of a layered scene: points inside any gap between adjacent
/// layer depths. Gaps no wider than `2 eps` hold no band and are skipped.
pub fn fp_count_layers(cloud: &PointCloud, layers: &[f64], eps: f64) -> usize {
    let bands: Vec<(f64, f64)> = layers
        .windows(2)
        .map(|p| (p[0] + eps, p[1] - eps))
        .filter(|(lo, hi)| lo < hi)
        .collect();
    (0..cloud.len())
        .filter(|&i| {
            let z = cloud.depth(i);
            bands.iter().any(|&(lo, hi)| z > lo && z < hi)
        })
        .count()
}

/// Pixels whose `(2r+1)^2` neighbourhood has a single ground-truth depth.
pub fn flat_region(gt: &Tensor, radius: usize) -> Vec<bool> {
    let (h, w) = (gt.dims()[0], gt.dims()[1]);
    let d = gt.data();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let z = d[y * w + x];
            let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            out[y * w + x] = (y0..=y1).all(|yy| (x0..=x1).all(|xx| d[yy * w + xx] == z));
        }
    }
    out
}

/// Mean absolute error over selected pixels; `None` if nothing is selected.
pub fn masked_mae(pred: &Tensor, gt: &Tensor, select: &[bool]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&p, &g), &s) in pred.data().iter().zip(gt.data()).zip(select) {
        if s {
            sum += (p as f64 - g as f64).abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// `1.4826 * median(|x - median(x)|)`.
pub fn robust_sigma(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let mut v = values.to_vec();
    let m = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    1.4826 * median(&mut dev)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tof: ToFConfig,
    pub noise: NoiseConfig,
    /// Tiled crop of the mask patch.
    pub crop: usize,
    /// Root of the per-scene noise streams.
    pub seed: u64,
    /// Flying-pixel band margin in mm.
    pub margin_mm: f64,
    pub s_z: f64,
    /// Neighbourhood radius for the flat-region mask.
    pub flat_radius: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tof: ToFConfig::default(),
            noise: NoiseConfig::default(),
            crop: 16,
            seed: 0,
            margin_mm: 0.0,
            s_z: 1.0,
            flat_radius: 4,
        }
    }
}

fn scene_rng(cfg: &EvalConfig, index: usize) -> RngState {
    RngState::new(cfg.seed).split(index as u64)
}

fn pinhole(views: (usize, usize), side: usize) -> Result<MaskPatch> {
    init_mask(MaskPattern::Circle(1), views.0, views.1, side, &mut RngState::new(0))
}

/// Three robust standard deviations of the pinhole depth error on flat
/// regions: the band margin that keeps the noisiest baseline's planes out of
/// the flying-pixel band.
pub fn calibrate_margin(scenes: &[&LightField], cfg: &EvalConfig) -> Result<f64> {
    ensure!(!scenes.is_empty(), InvalidParam, "no scenes to calibrate on");
    let mut errors = Vec::new();
    for (i, lf) in scenes.iter().enumerate() {
        let (h, w) = lf.sensor();
        let patch = pinhole(lf.views(), 1)?;
        let mask = tile_mask(&patch, h, w, 1, (0, 0))?;
        let (u, v) = lf.views();
        let sim = simulate_depth(lf, &mask, &full_aperture(u, v), &cfg.tof, &cfg.noise, &mut scene_rng(cfg, i))?;
        let gt = central_depth(lf);
        let flat = flat_region(&gt, cfg.flat_radius);
        for ((&p, &g), &f) in sim.depth.data().iter().zip(gt.data()).zip(&flat) {
            if f {
                errors.push(p as f64 - g as f64);
            }
        }
    }
    Ok(3.0 * robust_sigma(&errors))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEval {
    pub name: String,
    pub report: MetricsReport,
    pub fp_count: usize,
    /// Flying pixels of the all-ones mask on the same noise draw.
    pub reference_count: usize,
    /// MAE over flat regions, if any.
    pub flat_mae: Option<f64>,
}

impl SceneEval {
    /// The ratio is undefined when the reference has no flying pixels.
    pub fn fp_defined(&self) -> bool {
        self.reference_count > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scenes: Vec<SceneEval>,
    pub aggregate: MetricsReport,
    pub flat_mae: f64,
}

fn depth_metrics(pred: &Tensor, gt: &Tensor, s_z: f64) -> Result<MetricsReport> {
    let (rmse, mae) = rmse_mae(pred, gt)?;
    Ok(MetricsReport {
        rmse,
        mae,
        thresh3: thresh_metric(pred, gt, 3.0)?,
        thresh15: thresh_metric(pred, gt, 15.0)?,
        fp_ratio: 0.0,
        chamfer: chamfer(
            &project_points(pred, s_z)?,
            &project_points(gt, s_z)?,
            ChamferMode::Accelerated,
        )?,
        throughput: 0.0,
    })
}

/// Simulate, reconstruct, optionally refine, and score each scene.
/// Every mask sees the same noise draw per scene index.
pub fn evaluate_mask(
    patch: &MaskPatch,
    refiner: Option<&RefinerWeights>,
    scenes: &[(String, &LightField)],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    ensure!(!scenes.is_empty(), InvalidParam, "no scenes to evaluate");
    ensure!(cfg.margin_mm >= 0.0, InvalidParam, "margin must be non-negative");
    let throughput = tiled_throughput(patch, cfg.crop)?;
    let ones = init_mask(
        MaskPattern::Ones,
        patch.views().0,
        patch.views().1,
        1,
        &mut RngState::new(0),
    )?;

    let scenes: Vec<SceneEval> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, (name, lf))| -> Result<SceneEval> {
            let (h, w) = lf.sensor();
            let (u, v) = lf.views();
            ensure!(
                patch.views() == (u, v),
                Shape,
                "mask has {:?} views, scene `{name}` has {:?}",
                patch.views(),
                (u, v)
            );
            let aperture = full_aperture(u, v);
            let gt = central_depth(lf);
            let layers = lf.layer_depths();

            let mask = tile_mask(patch, h, w, cfg.crop, (0, 0))?;
            let sim = simulate_depth(lf, &mask, &aperture, &cfg.tof, &cfg.noise, &mut scene_rng(cfg, i))?;
            let pred = match refiner {
                Some(r) => refine_forward(&sim.depth, &mask, r)?,
                None => sim.depth,
            };

            let reference_mask = tile_mask(&ones, h, w, 1, (0, 0))?;
            let reference = simulate_depth(lf, &reference_mask, &aperture, &cfg.tof, &cfg.noise, &mut scene_rng(cfg, i))?;
            let reference_count = fp_count_layers(&project_points(&reference.depth, 1.0)?, &layers, cfg.margin_mm);

            let fp = fp_count_layers(&project_points(&pred, 1.0)?, &layers, cfg.margin_mm);
            let mut report = depth_metrics(&pred, &gt, cfg.s_z)?;
            report.throughput = throughput;
            report.fp_ratio = if reference_count > 0 {
                fp as f64 / reference_count as f64
            } else {
                0.0
            };
            let flat = flat_region(&gt, cfg.flat_radius);
            Ok(SceneEval {
                name: name.clone(),
                report,
                fp_count: fp,
                reference_count,
                flat_mae: masked_mae(&pred, &gt, &flat),
            })
        })
        .collect::<Result<_>>()?;

    let n = scenes.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| scenes.iter().map(|s| f(&s.report)).sum::<f64>() / n;
    let defined: Vec<f64> = scenes
        .iter()
        .filter(|s| s.fp_defined())
        .map(|s| s.report.fp_ratio)
        .collect();
    let flats: Vec<f64> = scenes.iter().filter_map(|s| s.flat_mae).collect();
    let aggregate = MetricsReport {
        rmse: mean(&|r| r.rmse),
        mae: mean(&|r| r.mae),
        thresh3: mean(&|r| r.thresh3),
        thresh15: mean(&|r| r.thresh15),
        fp_ratio: if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        },
        chamfer: mean(&|r| r.chamfer),
        throughput,
    };
    let flat_mae = if flats.is_empty() {
        0.0
    } else {
        flats.iter().sum::<f64>() / flats.len() as f64
    };
    Ok(EvalReport {
        scenes,
        aggregate,
        flat_mae,
    })
}

pub const CSV_HEADER: &str = "label,rmse,mae,thresh3,thresh15,fp_ratio,chamfer,throughput";

pub fn csv_row(label: &str, r: &MetricsReport) -> String {
    format!(
        "{label},{},{},{},{},{},{},{}",
        r.rmse, r.mae, r.thresh3, r.thresh15, r.fp_ratio, r.chamfer, r.throughput
    )
}

/// One row per scene plus a final `aggregate` row.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for s in &report.scenes {
        out.push_str(&csv_row(&s.name, &s.report));
        out.push('\n');
    }
    out.push_str(&csv_row("aggregate", &report.aggregate));
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{preset_scene, render_lightfield, Preset, PresetParams};

    fn t(dims: &[usize], v: Vec<f32>) -> Tensor {
        Tensor::new(dims.to_vec(), v).unwrap()
    }

    #[test]
    fn error_metrics() {
        let gt = Tensor::full(&[10, 10], 1000.0);
        assert_eq!(rmse_mae(&gt, &gt).unwrap(), (0.0, 0.0));
        assert_eq!(rmse_mae(&gt.map(|z| z + 2.0), &gt).unwrap(), (2.0, 2.0));
        let mut one = gt.clone();
        one.data_mut()[37] += 10.0;
        let (rmse, mae) = rmse_mae(&one, &gt).unwrap();
        assert!((rmse - 1.0).abs() < 1e-12 && (mae - 0.1).abs() < 1e-12);
        assert!(rmse_mae(&gt, &Tensor::zeros(&[5])).is_err());
    }

    #[test]
    fn threshold_percentages() {
        let gt = Tensor::zeros(&[2, 2]);
        assert_eq!(thresh_metric(&gt, &gt, 3.0).unwrap(), 0.0);
        assert_eq!(thresh_metric(&Tensor::full(&[2, 2], 6.0), &gt, 3.0).unwrap(), 100.0);
        assert_eq!(thresh_metric(&t(&[2, 2], vec![6.0, 0.0, 6.0, 0.0]), &gt, 3.0).unwrap(), 50.0);
        // exactly at the threshold is not "further than"
        assert_eq!(thresh_metric(&Tensor::full(&[2, 2], 3.0), &gt, 3.0).unwrap(), 0.0);
        assert!(thresh_metric(&gt, &gt, 0.0).is_err());
    }

    #[test]
    fn fp_band() {
        let cloud = project_points(&t(&[1, 5], vec![1000.0, 1010.0, 2000.0, 2990.0, 3000.0]), 1.0).unwrap();
        assert_eq!(fp_count(&cloud, 1000.0, 3000.0, 0.0).unwrap(), 3);
        assert_eq!(fp_count(&cloud, 1000.0, 3000.0, 20.0).unwrap(), 1);
        assert_eq!(fp_ratio(&cloud, 1000.0, 3000.0, 20.0, 1.0).unwrap(), 1.0);
        assert!(fp_count(&cloud, 1000.0, 1010.0, 10.0).is_err());
        let layered = project_points(&t(&[1, 4], vec![1000.0, 1000.0, 3000.0, 3000.0]), 1.0).unwrap();
        assert_eq!(fp_count(&layered, 1000.0, 3000.0, 0.0).unwrap(), 0);
        assert_eq!(fp_count_layers(&cloud, &[1000.0, 1500.0, 3000.0], 20.0), 1);
        // 1000..1030 is narrower than 2 eps, so only the upper gap counts
        assert_eq!(fp_count_layers(&cloud, &[1000.0, 1030.0, 3000.0], 20.0), 1);
    }

    #[test]
    fn flat_region_excludes_edges() {
        let gt = t(&[1, 6], vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(flat_region(&gt, 1), vec![true, true, false, false, true, true]);
        assert_eq!(masked_mae(&gt, &gt, &[false; 6]), None);
    }

    #[test]
    fn robust_sigma_of_normal_sample() {
        let mut rng = RngState::new(3);
        let v: Vec<f64> = (0..20000).map(|_| 5.0 * rng.standard_normal()).collect();
        assert!((robust_sigma(&v) - 5.0).abs() < 0.15);
    }

    fn scene(preset: Preset) -> LightField {
        let p = PresetParams {
            height: 16,
            width: 16,
            ..PresetParams::default()
        };
        let s = preset_scene(preset, &p, &mut RngState::new(1)).unwrap();
        render_lightfield(&s, 3, 3, crate::scene::baseline_for_disparity(2.0, 1000.0, 3000.0, 3), 3000.0).unwrap()
    }

    #[test]
    fn ones_mask_is_its_own_reference() {
        let lf = scene(Preset::Edge);
        let ones = init_mask(MaskPattern::Ones, 3, 3, 4, &mut RngState::new(0)).unwrap();
        let cfg = EvalConfig {
            crop: 4,
            margin_mm: 10.0,
            ..EvalConfig::default()
        };
        let rep = evaluate_mask(&ones, None, &[("edge".into(), &lf)], &cfg).unwrap();
        assert!(rep.scenes[0].reference_count > 0);
        assert_eq!(rep.aggregate.fp_ratio, 1.0);
        let csv = report_csv(&rep);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn noise_free_flat_scene_is_exact() {
        let lf = scene(Preset::Flat);
        let ones = init_mask(MaskPattern::Ones, 3, 3, 4, &mut RngState::new(0)).unwrap();
        let cfg = EvalConfig {
            crop: 4,
            noise: NoiseConfig::off(),
            ..EvalConfig::default()
        };
        let rep = evaluate_mask(&ones, None, &[("flat".into(), &lf)], &cfg).unwrap();
        assert!(rep.aggregate.rmse < 1e-3, "{}", rep.aggregate.rmse);
        assert!(!rep.scenes[0].fp_defined());
    }

    #[test]
    fn pinhole_has_fewer_flying_pixels_without_noise() {
        let lf = scene(Preset::Edge);
        let cfg = EvalConfig {
            crop: 4,
            noise: NoiseConfig::off(),
            margin_mm: 1.0,
            ..EvalConfig::default()
        };
        let pin = init_mask(MaskPattern::Circle(1), 3, 3, 4, &mut RngState::new(0)).unwrap();
        let ones = init_mask(MaskPattern::Ones, 3, 3, 4, &mut RngState::new(0)).unwrap();
        let scenes = [("edge".to_string(), &lf)];
        let a = evaluate_mask(&pin, None, &scenes, &cfg).unwrap();
        let b = evaluate_mask(&ones, None, &scenes, &cfg).unwrap();
        assert!(a.aggregate.fp_ratio < b.aggregate.fp_ratio);
    }
}
