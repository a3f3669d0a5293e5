//! Four-bucket phase estimation, phase-to-depth conversion and point
//! projection.

use std::f64::consts::TAU;

use crate::error::{ensure, Result};
use crate::forward::{CorrelationStack, ToFConfig};
use crate::tensor::Tensor;

/// Phase from one pixel's buckets in [`crate::forward::PSI_OFFSETS`] order.
///
/// With `C(psi) ~ cos(phi + psi)`, `C(3pi/2) - C(pi/2) = 2 sin(phi)` and
/// `C(0) - C(pi) = 2 cos(phi)`; the bias term cancels in both differences.
/// Returns `None` when both differences vanish.
#[inline]
pub fn bucket_phase(c0: f64, c90: f64, c270: f64, c180: f64) -> Option<f64> {
    let y = c270 - c90;
    let x = c0 - c180;
    if x == 0.0 && y == 0.0 {
        None
    } else {
        Some(y.atan2(x).rem_euclid(TAU))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseEstimate {
    /// `[H, W]` in `[0, 2 pi)`.
    pub phase: Tensor,
    /// `false` where all four buckets carried no modulation (phase set to 0).
    pub valid: Vec<bool>,
}

pub fn phase_estimate(stack: &CorrelationStack) -> PhaseEstimate {
    let (h, w) = stack.sensor();
    let n = h * w;
    let c = stack.images.data();
    let mut phase = vec![0f32; n];
    let mut valid = vec![true; n];
    for i in 0..n {
        match bucket_phase(c[i] as f64, c[n + i] as f64, c[2 * n + i] as f64, c[3 * n + i] as f64) {
            Some(p) => {
                // f32 rounding can land exactly on 2 pi
                let p = p as f32;
                phase[i] = if p >= TAU as f32 { 0.0 } else { p };
            }
            None => valid[i] = false,
        }
    }
    PhaseEstimate {
        phase: Tensor::new(vec![h, w], phase).expect("phase is finite"),
        valid,
    }
}

/// `z = phi * c / (4 pi omega)` with no phase unwrapping.
pub fn depth_from_phase(phi: &Tensor, cfg: &ToFConfig) -> Tensor {
    let k = cfg.mm_per_rad();
    phi.map(|p| (p as f64 * k) as f32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `(x_px, y_px, s_z * z)` with `x` the column and `y` the row.
    pub points: Vec<[f64; 3]>,
    pub depth_scale: f64,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Raw depth in mm of point `i`.
    pub fn depth(&self, i: usize) -> f64 {
        self.points[i][2] / self.depth_scale
    }
}

/// Point `i * W + j` is `(j, i, s_z * depth[i, j])`.
pub fn project_points(depth: &Tensor, depth_scale: f64) -> Result<PointCloud> {
    ensure!(depth.ndim() == 2, Shape, "depth map must be [H, W], got {:?}", depth.dims());
    ensure!(depth_scale > 0.0, InvalidParam, "depth scale must be positive");
    Ok(PointCloud {
        points: project_raw(&depth.to_f64(), depth.dims()[1], depth_scale),
        depth_scale,
    })
}

pub(crate) fn project_raw(depth: &[f64], width: usize, depth_scale: f64) -> Vec<[f64; 3]> {
    depth
        .iter()
        .enumerate()
        .map(|(k, &z)| [(k % width) as f64, (k / width) as f64, depth_scale * z])
        .collect()
}
