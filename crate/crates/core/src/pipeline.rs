//! End-to-end passes: light field to coded correlations, phase, depth and
//! refined depth. [`simulate_depth`] is the plain evaluation path;
//! [`patch_graph`] records the same chain on a tape for training.

use std::sync::Arc;

use crate::error::{ensure, Result};
use crate::forward::{add_noise, correlation_stack, per_view_correlation, CorrelationStack, NoiseConfig, ToFConfig};
use crate::loss::LossConfig;
use crate::mask::{tile_mask, MaskPatch, MicrolensMask};
use crate::recon::{depth_from_phase, phase_estimate, project_points, PhaseEstimate};
use crate::refiner::{refiner_graph, RefinerConfig, RefinerWeights};
use crate::rng::RngState;
use crate::scene::{central_depth, LightField};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub struct Simulation {
    pub stack: CorrelationStack,
    pub phase: PhaseEstimate,
    /// Unrefined `[H, W]` depth in mm.
    pub depth: Tensor,
}

/// Coded capture of `lf` through `mask`, noisy unless `noise` is off.
pub fn simulate_depth(
    lf: &LightField,
    mask: &MicrolensMask<'_>,
    aperture: &[bool],
    tof: &ToFConfig,
    noise: &NoiseConfig,
    rng: &mut RngState,
) -> Result<Simulation> {
    let (_, clean) = correlation_stack(lf, mask, aperture, tof)?;
    let stack = if noise.is_off() {
        clean
    } else {
        add_noise(&clean, noise, rng)?
    };
    let phase = phase_estimate(&stack);
    let depth = depth_from_phase(&phase.phase, tof);
    Ok(Simulation { stack, phase, depth })
}

/// One training window with everything that does not depend on parameters.
pub struct PatchInput {
    pub height: usize,
    pub width: usize,
    /// `[4, U*V, H, W]` unmasked per-view correlations.
    pub per_view: Arc<Vec<f64>>,
    /// `[H, W]` ground-truth depth.
    pub gt: Arc<Vec<f64>>,
    pub gt_cloud: Arc<Vec<[f64; 3]>>,
    /// `[4, H, W]` additive noise for this forward pass.
    pub noise: Vec<f64>,
    /// Mask tiling phase.
    pub offset: (usize, usize),
}

impl PatchInput {
    pub fn new(
        lf: &LightField,
        tof: &ToFConfig,
        loss: &LossConfig,
        noise: Vec<f64>,
        offset: (usize, usize),
    ) -> Result<Self> {
        let (height, width) = lf.sensor();
        ensure!(
            noise.len() == 4 * height * width,
            Shape,
            "noise field has {} values, expected {}",
            noise.len(),
            4 * height * width
        );
        let gt = central_depth(lf);
        let cloud = project_points(&gt, loss.s_z)?;
        Ok(Self {
            height,
            width,
            per_view: Arc::new(per_view_correlation(lf, tof)?),
            gt: Arc::new(gt.to_f64()),
            gt_cloud: Arc::new(cloud.points),
            noise,
            offset,
        })
    }
}

/// Mask and refiner parameters as flat f64 vectors, the form the tape
/// records and finite-difference checks perturb. Coordinates are numbered
/// mask first, then each layer's kernel and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams {
    pub mask: Vec<f64>,
    pub mask_dims: [usize; 4],
    pub refiner: RefinerConfig,
    pub views: usize,
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl FlatParams {
    pub fn new(mask: &MaskPatch, refiner: &RefinerWeights) -> Self {
        let d = mask.values().dims();
        Self {
            mask: mask.values().to_f64(),
            mask_dims: [d[0], d[1], d[2], d[3]],
            refiner: refiner.config,
            views: refiner.views,
            layers: refiner
                .layers
                .iter()
                .map(|l| (l.kernel.to_f64(), l.bias.to_f64()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len() + self.layers.iter().map(|(k, b)| k.len() + b.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slot(&mut self, mut i: usize) -> &mut f64 {
        if i < self.mask.len() {
            return &mut self.mask[i];
        }
        i -= self.mask.len();
        for (k, b) in &mut self.layers {
            if i < k.len() {
                return &mut k[i];
            }
            i -= k.len();
            if i < b.len() {
                return &mut b[i];
            }
            i -= b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, i: usize, value: f64) {
        *self.slot(i) = value;
    }

    pub fn get(&self, mut i: usize) -> f64 {
        if i < self.mask.len() {
            return self.mask[i];
        }
        i -= self.mask.len();
        for (k, b) in &self.layers {
            if i < k.len() {
                return k[i];
            }
            i -= k.len();
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("parameter index out of range")
    }
}

pub struct PatchGraph {
    pub tape: Tape,
    pub loss: Var,
    /// Flat patch parameter.
    pub mask: Var,
    pub weights: Vec<(Var, Var)>,
    /// Unrefined depth.
    pub depth: Var,
    pub refined: Var,
}

impl PatchGraph {
    pub fn loss_value(&self) -> f64 {
        self.tape.scalar(self.loss)
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(self.loss)
    }
}

/// Records mask tiling, view averaging, noise, phase recovery, refinement
/// and the weighted loss for one window.
pub fn patch_graph(
    input: &PatchInput,
    params: &FlatParams,
    crop: usize,
    aperture: &Arc<Vec<bool>>,
    tof: &ToFConfig,
    loss: &LossConfig,
) -> Result<PatchGraph> {
    loss.validate()?;
    let (h, w) = (input.height, input.width);
    let hw = h * w;
    let [u, v, side, _] = params.mask_dims;
    ensure!(
        aperture.len() == u * v && input.per_view.len() == 4 * u * v * hw && params.views == u * v,
        Shape,
        "window carries {} per-view values, mask expects {u}x{v} views over {h}x{w}",
        input.per_view.len()
    );
    // tiling only needs the patch geometry, so index with a zero patch
    let geometry = MaskPatch::new(Tensor::zeros(&params.mask_dims))?;
    let tiling = tile_mask(&geometry, h, w, crop, input.offset)?;
    debug_assert_eq!(geometry.side(), side);

    let mut tape = Tape::new();
    let m = tape.param(&[params.mask.len()], params.mask.clone());
    let tiled = tape.gather(m, Arc::new(tiling.gather_indices()), &[u * v, h, w])?;
    let clean = tape.view_average(input.per_view.clone(), tiled, aperture.clone())?;
    let eta = tape.constant(&[4, h, w], input.noise.clone());
    let c = tape.add(clean, eta)?;
    let c0 = tape.slice(c, 0, &[h, w])?;
    let c90 = tape.slice(c, hw, &[h, w])?;
    let c270 = tape.slice(c, 2 * hw, &[h, w])?;
    let c180 = tape.slice(c, 3 * hw, &[h, w])?;
    let sy = tape.sub(c270, c90)?;
    let sx = tape.sub(c0, c180)?;
    let phi = tape.atan2(sy, sx)?;
    let depth = tape.scale(phi, tof.mm_per_rad());

    let shapes = params.refiner.layer_shapes(params.views);
    ensure!(shapes.len() == params.layers.len(), Shape, "refiner layer count mismatch");
    let mut weights = Vec::with_capacity(shapes.len());
    for (&(co, ci, _), (k, b)) in shapes.iter().zip(&params.layers) {
        ensure!(
            k.len() == co * ci * 9 && b.len() == co,
            Shape,
            "refiner layer does not match [{co}, {ci}, 3, 3]"
        );
        weights.push((tape.param(&[co, ci, 3, 3], k.clone()), tape.param(&[co], b.clone())));
    }
    let refined = refiner_graph(&mut tape, &params.refiner, depth, tiled, &weights)?;

    let s = tape.smooth_l1_sum(refined, input.gt.clone(), loss.delta)?;
    let s = tape.scale(s, loss.w_l / hw as f64);
    let ch = tape.chamfer_sum(refined, loss.s_z, input.gt_cloud.clone())?;
    let ch = tape.scale(ch, loss.w_c / hw as f64);
    let total = tape.add(s, ch)?;
    Ok(PatchGraph {
        tape,
        loss: total,
        mask: m,
        weights,
        depth,
        refined,
    })
}

/// Loss and gradients for the mask patch and each refiner layer.
pub struct PatchGradients {
    pub loss: f64,
    pub mask: Vec<f64>,
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl PatchGradients {
    /// Gradient of coordinate `i` in [`FlatParams`] numbering.
    pub fn get(&self, mut i: usize) -> f64 {
        if i < self.mask.len() {
            return self.mask[i];
        }
        i -= self.mask.len();
        for (k, b) in &self.layers {
            if i < k.len() {
                return k[i];
            }
            i -= k.len();
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("parameter index out of range")
    }
}

pub fn patch_gradients(graph: &PatchGraph) -> Result<PatchGradients> {
    let mut g = graph.backward()?;
    let mut take = |v: Var| g.take(v).unwrap_or_else(|| vec![0.0; graph.tape.value(v).len()]);
    let mask = take(graph.mask);
    let layers = graph.weights.iter().map(|&(k, b)| (take(k), take(b))).collect();
    Ok(PatchGradients {
        loss: graph.loss_value(),
        mask,
        layers,
    })
}
