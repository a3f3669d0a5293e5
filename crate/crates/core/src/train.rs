//! Patch-based joint training of the mask patch and the refiner.
//!
//! Every random draw derives from `(seed, epoch, batch, element)` by stream
//! splitting, and per-element gradients are summed in batch order, so a run
//! is bit-identical for any worker count.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;

use crate::adam::{adam_step, AdamState};
use crate::error::{ensure, Error, Result};
use crate::forward::{full_aperture, noise_field, NoiseConfig, ToFConfig};
use crate::loss::LossConfig;
use crate::mask::{project_tensor, tiled_throughput, MaskPatch};
use crate::metrics::{evaluate_mask, EvalConfig};
use crate::pipeline::{patch_gradients, patch_graph, FlatParams, PatchGradients, PatchInput};
use crate::refiner::{refine_init, RefinerConfig, RefinerWeights};
use crate::rng::RngState;
use crate::scene::{central_depth, LightField};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_refiner: f64,
    pub lr_mask: f64,
    pub halve_every: usize,
    pub mask_freeze: usize,
    /// Side of the square training window in sensor pixels.
    pub patch_size: usize,
    /// Side of the tiled crop of the mask patch.
    pub mask_crop: usize,
    pub batch_size: usize,
    /// Batches per epoch; 0 means one pass over the scenes.
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Worker threads; results do not depend on this.
    pub threads: usize,
    /// Held-out metrics are refreshed every this many epochs and at the end.
    pub eval_every: usize,
    /// Where to write the parameters if the loss stops being finite.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_refiner: 0.004,
            lr_mask: 0.1,
            halve_every: 80,
            mask_freeze: 70,
            patch_size: 80,
            mask_crop: 64,
            batch_size: 4,
            batches_per_epoch: 0,
            epochs: 200,
            seed: 0,
            threads: 1,
            eval_every: 10,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    /// Settings sized for a 64x64, 9x9-view suite on a CPU.
    pub fn desk() -> Self {
        Self {
            patch_size: 24,
            mask_crop: 12,
            batch_size: 4,
            batches_per_epoch: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr_refiner > 0.0 && self.lr_mask > 0.0,
            InvalidParam,
            "learning rates must be positive"
        );
        ensure!(
            self.halve_every > 0
                && self.patch_size > 0
                && self.mask_crop > 0
                && self.batch_size > 0
                && self.epochs > 0
                && self.threads > 0
                && self.eval_every > 0,
            InvalidParam,
            "training sizes and counts must be positive"
        );
        Ok(())
    }

    /// Step size in effect during `epoch` (0-based).
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        base * 0.5f64.powi((epoch / self.halve_every) as i32)
    }

    pub fn mask_trainable(&self, epoch: usize) -> bool {
        epoch >= self.mask_freeze
    }
}

/// A training window and the tiling phase the mask is seen at.
#[derive(Clone, Debug)]
pub struct PatchSample {
    pub lightfield: LightField,
    pub gt: Tensor,
    pub origin: (usize, usize),
    pub offset: (usize, usize),
}

/// Window origin and mask phase, the random part of [`sample_patch`].
pub fn draw_window(
    rng: &mut RngState,
    h: usize,
    w: usize,
    patch: usize,
    crop: usize,
) -> ((usize, usize), (usize, usize)) {
    let row = rng.below(h - patch + 1);
    let col = rng.below(w - patch + 1);
    ((row, col), (rng.below(crop), rng.below(crop)))
}

/// Uniform window of side `patch` and uniform mask phase in `[0, crop)^2`.
pub fn sample_patch(lf: &LightField, rng: &mut RngState, patch: usize, crop: usize) -> Result<PatchSample> {
    let (h, w) = lf.sensor();
    ensure!(
        patch >= 1 && patch <= h.min(w),
        InvalidParam,
        "patch {patch} does not fit {h}x{w}"
    );
    ensure!(crop >= 1, InvalidParam, "crop must be positive");
    let ((row, col), offset) = draw_window(rng, h, w, patch, crop);
    let lightfield = lf.window(row, col, patch)?;
    let gt = central_depth(&lightfield);
    Ok(PatchSample {
        lightfield,
        gt,
        origin: (row, col),
        offset,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr_refiner: f64,
    pub lr_mask: f64,
    pub throughput: f64,
    pub holdout_fp_ratio: Option<f64>,
    pub holdout_mae: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,loss,lr_refiner,lr_mask,throughput,holdout_fp_ratio,holdout_mae";

pub fn log_csv(log: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{LOG_HEADER}\n");
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.loss,
            r.lr_refiner,
            r.lr_mask,
            r.throughput,
            opt(r.holdout_fp_ratio),
            opt(r.holdout_mae)
        );
    }
    out
}

/// Scene scored during training with the current mask and refiner.
pub struct Holdout<'a> {
    pub name: String,
    pub lightfield: &'a LightField,
    pub eval: EvalConfig,
}

pub struct TrainSetup<'a> {
    pub scenes: &'a [LightField],
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub noise: NoiseConfig,
    pub refiner: RefinerConfig,
    pub tof: ToFConfig,
    pub mask_init: MaskPatch,
    pub holdout: Option<Holdout<'a>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub mask: MaskPatch,
    pub refiner: RefinerWeights,
    pub log: Vec<EpochRecord>,
}

const REFINER_STREAM: u64 = 0;
const ORDER_STREAM: u64 = 0;

fn epoch_rng(seed: u64, epoch: usize) -> RngState {
    RngState::new(seed).split(1 + epoch as u64)
}

fn element_gradients(
    setup: &TrainSetup<'_>,
    params: &FlatParams,
    aperture: &Arc<Vec<bool>>,
    scene: &LightField,
    mut rng: RngState,
) -> Result<PatchGradients> {
    let t = &setup.train;
    let sample = sample_patch(scene, &mut rng, t.patch_size, t.mask_crop)?;
    let p = t.patch_size;
    let noise = if setup.noise.is_off() {
        vec![0.0; 4 * p * p]
    } else {
        noise_field(&setup.noise, p, p, &mut rng)?
    };
    let input = PatchInput::new(&sample.lightfield, &setup.tof, &setup.loss, noise, sample.offset)?;
    let graph = patch_graph(&input, params, t.mask_crop, aperture, &setup.tof, &setup.loss)?;
    patch_gradients(&graph)
}

fn dump_state(dir: &Option<PathBuf>, mask: &MaskPatch, refiner: &RefinerWeights) -> Option<PathBuf> {
    let dir = dir.as_ref()?;
    std::fs::create_dir_all(dir).ok()?;
    mask.write(dir.join("diverged_mask.tns")).ok()?;
    refiner.write(dir.join("diverged_refiner.tnsw")).ok()?;
    Some(dir.clone())
}

/// Runs the full schedule. `on_epoch` sees every record with the parameters
/// at the end of that epoch (checkpointing hook).
pub fn train(
    setup: &TrainSetup<'_>,
    on_epoch: &mut dyn FnMut(&EpochRecord, &MaskPatch, &RefinerWeights) -> Result<()>,
) -> Result<TrainOutput> {
    let t = &setup.train;
    t.validate()?;
    setup.loss.validate()?;
    setup.noise.validate()?;
    setup.tof.validate()?;
    ensure!(!setup.scenes.is_empty(), InvalidParam, "no training scenes");
    let (u, v) = setup.mask_init.views();
    for lf in setup.scenes {
        ensure!(
            lf.views() == (u, v),
            Shape,
            "scene has {:?} views, mask has {:?}",
            lf.views(),
            (u, v)
        );
    }
    ensure!(
        t.mask_crop <= setup.mask_init.side(),
        InvalidParam,
        "crop {} exceeds mask side {}",
        t.mask_crop,
        setup.mask_init.side()
    );

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(t.threads)
        .build()
        .map_err(|e| Error::InvalidParam(format!("thread pool: {e}")))?;

    let mut mask = setup.mask_init.clone();
    let mut refiner = refine_init(
        &setup.refiner,
        u * v,
        &mut RngState::new(t.seed).split(0).split(REFINER_STREAM),
    )?;
    let mut mask_state = AdamState::new(mask.values().len());
    let mut layer_state: Vec<(AdamState, AdamState)> = refiner
        .layers
        .iter()
        .map(|l| (AdamState::new(l.kernel.len()), AdamState::new(l.bias.len())))
        .collect();
    let aperture = Arc::new(full_aperture(u, v));
    let n = setup.scenes.len();
    let batches = if t.batches_per_epoch > 0 {
        t.batches_per_epoch
    } else {
        n.div_ceil(t.batch_size)
    };

    let mut log = Vec::with_capacity(t.epochs);
    let mut holdout_metrics: (Option<f64>, Option<f64>) = (None, None);
    for epoch in 0..t.epochs {
        let lr_r = t.lr_at(t.lr_refiner, epoch);
        let lr_m = t.lr_at(t.lr_mask, epoch);
        let er = epoch_rng(t.seed, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut orng = er.split(ORDER_STREAM);
        for i in (1..n).rev() {
            order.swap(i, orng.below(i + 1));
        }

        let mut loss_sum = 0.0;
        for b in 0..batches {
            let params = FlatParams::new(&mask, &refiner);
            let results: Vec<Result<PatchGradients>> = pool.install(|| {
                (0..t.batch_size)
                    .into_par_iter()
                    .map(|k| {
                        let slot = b * t.batch_size + k;
                        let scene = &setup.scenes[order[slot % n]];
                        element_gradients(setup, &params, &aperture, scene, er.split(1 + slot as u64))
                    })
                    .collect()
            });

            let inv = 1.0 / t.batch_size as f64;
            let mut loss = 0.0;
            let mut g_mask = vec![0.0; mask.values().len()];
            let mut g_layers: Vec<(Vec<f64>, Vec<f64>)> = refiner
                .layers
                .iter()
                .map(|l| (vec![0.0; l.kernel.len()], vec![0.0; l.bias.len()]))
                .collect();
            for r in results {
                let g = r?;
                loss += g.loss;
                g_mask.iter_mut().zip(&g.mask).for_each(|(a, b)| *a += b);
                for ((ak, ab), (gk, gb)) in g_layers.iter_mut().zip(&g.layers) {
                    ak.iter_mut().zip(gk).for_each(|(a, b)| *a += b);
                    ab.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
                }
            }
            loss *= inv;
            let finite = loss.is_finite()
                && g_mask.iter().all(|x| x.is_finite())
                && g_layers
                    .iter()
                    .all(|(k, b)| k.iter().chain(b).all(|x| x.is_finite()));
            if !finite {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    dump: dump_state(&t.dump_dir, &mask, &refiner),
                });
            }
            loss_sum += loss;

            for (layer, ((gk, gb), (sk, sb))) in refiner
                .layers
                .iter_mut()
                .zip(g_layers.iter_mut().zip(layer_state.iter_mut()))
            {
                gk.iter_mut().for_each(|x| *x *= inv);
                gb.iter_mut().for_each(|x| *x *= inv);
                adam_step(&mut layer.kernel, gk, sk, lr_r)?;
                adam_step(&mut layer.bias, gb, sb, lr_r)?;
            }
            if t.mask_trainable(epoch) {
                g_mask.iter_mut().for_each(|x| *x *= inv);
                let mut values = mask.values().clone();
                adam_step(&mut values, &g_mask, &mut mask_state, lr_m)?;
                mask = project_tensor(values)?;
            }
        }

        if let Some(h) = &setup.holdout {
            if (epoch + 1) % t.eval_every == 0 || epoch + 1 == t.epochs {
                let scenes = [(h.name.clone(), h.lightfield)];
                let rep = pool.install(|| evaluate_mask(&mask, Some(&refiner), &scenes, &h.eval))?;
                let s = &rep.scenes[0];
                holdout_metrics = (s.fp_defined().then_some(s.report.fp_ratio), Some(s.report.mae));
            }
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            lr_refiner: lr_r,
            lr_mask: lr_m,
            throughput: tiled_throughput(&mask, t.mask_crop)?,
            holdout_fp_ratio: holdout_metrics.0,
            holdout_mae: holdout_metrics.1,
        };
        on_epoch(&record, &mask, &refiner)?;
        log.push(record);
    }
    Ok(TrainOutput { mask, refiner, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{init_mask, MaskPattern};
    use crate::scene::{baseline_for_disparity, preset_scene, render_lightfield, Preset, PresetParams};

    fn field(seed: u64, size: usize) -> LightField {
        let p = PresetParams {
            height: size,
            width: size,
            ..PresetParams::default()
        };
        let s = preset_scene(Preset::Edge, &p, &mut RngState::new(seed)).unwrap();
        render_lightfield(&s, 3, 3, baseline_for_disparity(1.5, 1000.0, 3000.0, 3), 3000.0).unwrap()
    }

    #[test]
    fn schedule_arithmetic() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(0.004, 0), 0.004);
        assert_eq!(t.lr_at(0.004, 79), 0.004);
        assert_eq!(t.lr_at(0.004, 80), 0.002);
        assert_eq!(t.lr_at(0.1, 160), 0.025);
        assert!(!t.mask_trainable(69));
        assert!(t.mask_trainable(70));
    }

    #[test]
    fn patch_sampling() {
        let lf = field(0, 16);
        let a = sample_patch(&lf, &mut RngState::new(4), 8, 5).unwrap();
        let b = sample_patch(&lf, &mut RngState::new(4), 8, 5).unwrap();
        assert_eq!((a.origin, a.offset), (b.origin, b.offset));
        assert_eq!(a.gt.dims(), &[8, 8]);
        let full = sample_patch(&lf, &mut RngState::new(4), 16, 5).unwrap();
        assert_eq!(full.origin, (0, 0));
        assert!(full.offset.0 < 5 && full.offset.1 < 5);
        assert!(sample_patch(&lf, &mut RngState::new(4), 17, 5).is_err());
    }

    #[test]
    fn window_origins_are_uniform() {
        // chi-square over the 33 possible rows for 64 rows and patch 32
        let lf = field(0, 64);
        let mut rng = RngState::new(11);
        let mut counts = [0usize; 33];
        let draws = 10_000;
        let mut col_counts = [0usize; 33];
        for _ in 0..draws {
            let ((row, col), _) = draw_window(&mut rng, 64, 64, 32, 8);
            counts[row] += 1;
            col_counts[col] += 1;
        }
        let e = draws as f64 / 33.0;
        for c in [counts, col_counts] {
            let chi2: f64 = c.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
            // 32 degrees of freedom, 0.999 quantile is about 62.5
            assert!(chi2 < 62.5, "chi2 {chi2}");
        }
        assert!(sample_patch(&lf, &mut rng, 32, 8).is_ok());
    }

    fn tiny_setup<'a>(scenes: &'a [LightField], epochs: usize, threads: usize) -> TrainSetup<'a> {
        TrainSetup {
            scenes,
            train: TrainConfig {
                patch_size: 8,
                mask_crop: 4,
                batch_size: 3,
                epochs,
                mask_freeze: 2,
                halve_every: 2,
                threads,
                eval_every: 2,
                ..TrainConfig::default()
            },
            loss: LossConfig::default(),
            noise: NoiseConfig::default(),
            refiner: RefinerConfig {
                hidden_channels: 4,
                num_layers: 3,
                ..RefinerConfig::default()
            },
            tof: ToFConfig::default(),
            mask_init: init_mask(MaskPattern::Circle(3), 3, 3, 4, &mut RngState::new(0)).unwrap(),
            holdout: None,
        }
    }

    #[test]
    fn freeze_and_thread_independence() {
        let scenes = vec![field(1, 12), field(2, 12)];
        let setup = tiny_setup(&scenes, 4, 1);
        let mut masks = Vec::new();
        let out = train(&setup, &mut |_, m, _| {
            masks.push(m.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(masks[0], setup.mask_init);
        assert_eq!(masks[1], setup.mask_init);
        assert_ne!(masks[2], setup.mask_init);
        assert_eq!(out.log[2].lr_mask, 0.05);

        let par = train(&tiny_setup(&scenes, 4, 3), &mut |_, _, _| Ok(())).unwrap();
        assert_eq!(par.mask, out.mask);
        assert_eq!(par.refiner, out.refiner);
        assert_eq!(par.log, out.log);
    }

    #[test]
    fn log_csv_columns() {
        let rec = EpochRecord {
            epoch: 0,
            loss: 1.5,
            lr_refiner: 0.004,
            lr_mask: 0.1,
            throughput: 0.5,
            holdout_fp_ratio: None,
            holdout_mae: Some(2.0),
        };
        let csv = log_csv(&[rec]);
        assert_eq!(csv, format!("{LOG_HEADER}\n0,1.5,0.004,0.1,0.5,,2\n"));
    }
}
