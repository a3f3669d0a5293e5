//! Smooth-L1 and one-directional Chamfer terms of the training objective.

use crate::error::{ensure, Result};
use crate::kdtree::{nearest_bruteforce, KdTree};
use crate::recon::{project_points, PointCloud};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub w_l: f64,
    pub w_c: f64,
    pub delta: f64,
    /// Depth scaling applied before projecting to points.
    pub s_z: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_l: 100.0,
            w_c: 0.08,
            delta: 1.0,
            s_z: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.w_l >= 0.0 && self.w_c >= 0.0,
            InvalidParam,
            "loss weights must be non-negative"
        );
        ensure!(self.delta > 0.0, InvalidParam, "delta must be positive");
        ensure!(self.s_z > 0.0, InvalidParam, "s_z must be positive");
        Ok(())
    }
}

#[inline]
pub fn smooth_l1_scalar(d: f64, delta: f64) -> f64 {
    let a = d.abs();
    if a >= delta {
        a - delta / 2.0
    } else {
        d * d / (2.0 * delta)
    }
}

#[inline]
pub fn smooth_l1_grad(d: f64, delta: f64) -> f64 {
    if d.abs() >= delta {
        d.signum()
    } else {
        d / delta
    }
}

/// Elementwise smooth-L1 of `pred - target`.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, delta: f64) -> Result<Tensor> {
    ensure!(
        pred.dims() == target.dims(),
        Shape,
        "smooth-L1 shapes differ: {:?} vs {:?}",
        pred.dims(),
        target.dims()
    );
    ensure!(delta > 0.0, InvalidParam, "delta must be positive");
    let data: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| smooth_l1_scalar(p as f64 - t as f64, delta))
        .collect();
    Tensor::from_f64(pred.dims(), &data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChamferMode {
    BruteForce,
    Accelerated,
}

/// Per-point distance from each `recon` point to its nearest `gt` point.
pub fn chamfer_distances(recon: &PointCloud, gt: &PointCloud, mode: ChamferMode) -> Result<Vec<f64>> {
    ensure!(!gt.is_empty(), InvalidParam, "ground-truth cloud is empty");
    Ok(match mode {
        ChamferMode::BruteForce => recon
            .points
            .iter()
            .map(|p| nearest_bruteforce(&gt.points, p).0.sqrt())
            .collect(),
        ChamferMode::Accelerated => {
            let tree = KdTree::build(&gt.points);
            recon
                .points
                .iter()
                .map(|p| tree.nearest(p).expect("non-empty").0.sqrt())
                .collect()
        }
    })
}

/// Mean nearest-neighbour distance from `recon` to `gt`.
pub fn chamfer(recon: &PointCloud, gt: &PointCloud, mode: ChamferMode) -> Result<f64> {
    let d = chamfer_distances(recon, gt, mode)?;
    if d.is_empty() {
        return Ok(0.0);
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// `(1/HW) sum_i (w_L S_i + w_C C_i)` over an `[H, W]` prediction.
pub fn total_loss(pred: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let s = smooth_l1(pred, gt, cfg.delta)?;
    let c = chamfer_distances(
        &project_points(pred, cfg.s_z)?,
        &project_points(gt, cfg.s_z)?,
        ChamferMode::Accelerated,
    )?;
    let total: f64 = s
        .data()
        .iter()
        .zip(&c)
        .map(|(&si, &ci)| cfg.w_l * si as f64 + cfg.w_c * ci)
        .sum();
    Ok(total / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        PointCloud {
            points,
            depth_scale: 1.0,
        }
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1_scalar(0.0, 1.0), 0.0);
        assert_eq!(smooth_l1_scalar(0.5, 1.0), 0.125);
        assert_eq!(smooth_l1_scalar(2.0, 1.0), 1.5);
        assert_eq!(smooth_l1_scalar(-2.0, 1.0), 1.5);
        // value and slope agree on both sides of the knee
        let (l, r) = (1.0 - 1e-9, 1.0 + 1e-9);
        assert!((smooth_l1_scalar(l, 1.0) - smooth_l1_scalar(r, 1.0)).abs() < 1e-8);
        assert!((smooth_l1_grad(l, 1.0) - smooth_l1_grad(r, 1.0)).abs() < 1e-8);
        let a = Tensor::zeros(&[2]);
        assert!(smooth_l1(&a, &Tensor::zeros(&[3]), 1.0).is_err());
    }

    #[test]
    fn chamfer_examples() {
        let gt = cloud(vec![[0.0, 0.0, 0.0], [0.0, 0.0, 8.0]]);
        let r = cloud(vec![[0.0, 0.0, 5.0]]);
        for mode in [ChamferMode::BruteForce, ChamferMode::Accelerated] {
            assert_eq!(chamfer(&r, &gt, mode).unwrap(), 3.0);
            assert_eq!(chamfer(&gt, &gt, mode).unwrap(), 0.0);
        }
        assert!(chamfer(&r, &cloud(vec![]), ChamferMode::BruteForce).is_err());
    }

    #[test]
    fn total_loss_term_by_term() {
        let mut rng = RngState::new(5);
        let (h, w) = (8, 8);
        let gt: Vec<f32> = (0..h * w).map(|_| rng.uniform(900.0, 3000.0).unwrap() as f32).collect();
        let pred: Vec<f32> = gt
            .iter()
            .map(|&g| g + (3.0 * rng.standard_normal()) as f32)
            .collect();
        let cfg = LossConfig {
            s_z: 0.5,
            ..LossConfig::default()
        };
        let got = total_loss(
            &Tensor::new(vec![h, w], pred.clone()).unwrap(),
            &Tensor::new(vec![h, w], gt.clone()).unwrap(),
            &cfg,
        )
        .unwrap();

        // independent recomputation with explicit double loops
        let mut want = 0.0;
        for i in 0..h * w {
            let d = pred[i] as f64 - gt[i] as f64;
            let s = if d.abs() < 1.0 { d * d / 2.0 } else { d.abs() - 0.5 };
            let p = [(i % w) as f64, (i / w) as f64, 0.5 * pred[i] as f64];
            let mut best = f64::INFINITY;
            for j in 0..h * w {
                let q = [(j % w) as f64, (j / w) as f64, 0.5 * gt[j] as f64];
                let dd = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                best = best.min(dd);
            }
            want += 100.0 * s + 0.08 * best;
        }
        want /= (h * w) as f64;
        assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");

        let same = Tensor::new(vec![h, w], gt).unwrap();
        assert_eq!(total_loss(&same, &same, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn no_chamfer_weight_is_scaled_smooth_l1() {
        let pred = Tensor::new(vec![2, 2], vec![0.0, 3.0, 0.5, 10.0]).unwrap();
        let gt = Tensor::zeros(&[2, 2]);
        let cfg = LossConfig {
            w_c: 0.0,
            ..LossConfig::default()
        };
        let want = 100.0 * (0.0 + 2.5 + 0.125 + 9.5) / 4.0;
        assert!((total_loss(&pred, &gt, &cfg).unwrap() - want).abs() < 1e-9);
    }
}
