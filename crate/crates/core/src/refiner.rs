//! Small fully convolutional residual depth refiner conditioned on the mask.
//!
//! Input channels are the normalized depth followed by the `U*V` mask values
//! seen by each pixel. With `downsample`, layer 1 is a stride-2 encoder whose
//! output is upsampled back and added to layer 0's activations before the
//! final layer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{ensure, Error, Result};
use crate::mask::MicrolensMask;
use crate::rng::RngState;
use crate::tape::{ConvSpec, Tape, Var};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &str = "TNSW1";
pub const MIN_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefinerConfig {
    pub hidden_channels: usize,
    pub num_layers: usize,
    pub downsample: bool,
    /// Depth is divided by this before entering the network and the residual
    /// is multiplied by it on the way out.
    pub depth_scale_mm: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 16,
            num_layers: 4,
            downsample: true,
            depth_scale_mm: 100.0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_layers >= 2, InvalidParam, "refiner needs at least 2 layers");
        ensure!(self.hidden_channels >= 1, InvalidParam, "refiner needs at least 1 channel");
        ensure!(
            !self.downsample || self.num_layers >= 3,
            InvalidParam,
            "downsampling refiner needs at least 3 layers"
        );
        ensure!(
            self.depth_scale_mm > 0.0 && self.depth_scale_mm.is_finite(),
            InvalidParam,
            "depth scale must be positive"
        );
        Ok(())
    }

    /// `(c_out, c_in, stride)` per layer.
    pub fn layer_shapes(&self, views: usize) -> Vec<(usize, usize, usize)> {
        let h = self.hidden_channels;
        (0..self.num_layers)
            .map(|l| {
                let c_in = if l == 0 { 1 + views } else { h };
                let c_out = if l + 1 == self.num_layers { 1 } else { h };
                let stride = if self.downsample && l == 1 { 2 } else { 1 };
                (c_out, c_in, stride)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[C_out, C_in, 3, 3]`
    pub kernel: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerWeights {
    pub config: RefinerConfig,
    /// `U * V` mask channels expected at the input.
    pub views: usize,
    pub layers: Vec<ConvLayer>,
}

impl RefinerWeights {
    pub fn new(config: RefinerConfig, views: usize, layers: Vec<ConvLayer>) -> Result<Self> {
        config.validate()?;
        ensure!(views >= 1, InvalidParam, "refiner needs at least one view channel");
        let shapes = config.layer_shapes(views);
        ensure!(
            layers.len() == shapes.len(),
            Shape,
            "expected {} layers, got {}",
            shapes.len(),
            layers.len()
        );
        for (i, (layer, &(co, ci, _))) in layers.iter().zip(&shapes).enumerate() {
            ensure!(
                layer.kernel.dims() == [co, ci, 3, 3] && layer.bias.dims() == [co],
                Shape,
                "layer {i}: kernel {:?} bias {:?}, expected [{co}, {ci}, 3, 3] and [{co}]",
                layer.kernel.dims(),
                layer.bias.dims()
            );
        }
        Ok(Self {
            config,
            views,
            layers,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.len() + l.bias.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut head = format!("{WEIGHTS_MAGIC} {}\n", 2 * self.layers.len());
        let _ = writeln!(
            head,
            "hidden_channels={} num_layers={} downsample={} depth_scale_mm={} views={}",
            c.hidden_channels, c.num_layers, c.downsample as u8, c.depth_scale_mm, self.views
        );
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [("kernel", &l.kernel), ("bias", &l.bias)] {
                let dims: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
                let _ = writeln!(head, "layer{i}.{name} {} {}", t.ndim(), dims.join(" "));
            }
        }
        let mut out = head.into_bytes();
        for l in &self.layers {
            out.extend(l.kernel.to_tns_bytes());
            out.extend(l.bias.to_tns_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut line = || -> Result<String> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::BadHeader("unterminated weights header".into()))?;
            let s = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| Error::BadHeader("weights header is not UTF-8".into()))?
                .to_string();
            pos += end + 1;
            Ok(s)
        };
        let first = line()?;
        let mut toks = first.split_whitespace();
        let magic = toks.next().unwrap_or("");
        if magic != WEIGHTS_MAGIC {
            return Err(Error::BadMagic {
                expected: WEIGHTS_MAGIC,
                found: magic.into(),
            });
        }
        let count: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::BadHeader("missing tensor count".into()))?;

        let cfg_line = line()?;
        let mut kv = std::collections::BTreeMap::new();
        for tok in cfg_line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::BadHeader(format!("bad config token `{tok}`")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| Error::BadHeader(format!("weights config lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::BadHeader(format!("bad `{k}`")))
        };
        let config = RefinerConfig {
            hidden_channels: num("hidden_channels")?,
            num_layers: num("num_layers")?,
            downsample: num("downsample")? != 0,
            depth_scale_mm: get("depth_scale_mm")?
                .parse()
                .map_err(|_| Error::BadHeader("bad `depth_scale_mm`".into()))?,
        };
        let views = num("views")?;

        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let l = line()?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            ensure!(toks.len() >= 2, BadHeader, "bad manifest line `{l}`");
            let dims: Vec<usize> = toks[2..]
                .iter()
                .map(|t| t.parse().map_err(|_| Error::BadHeader(format!("bad dim in `{l}`"))))
                .collect::<Result<_>>()?;
            ensure!(
                toks[1].parse::<usize>().ok() == Some(dims.len()),
                BadHeader,
                "rank mismatch in `{l}`"
            );
            manifest.push(dims);
        }

        let mut tensors = Vec::with_capacity(count);
        for dims in &manifest {
            let (t, used) = Tensor::from_tns_prefix(&bytes[pos..])?;
            ensure!(
                t.dims() == dims.as_slice(),
                BadHeader,
                "tensor shape {:?} disagrees with manifest {dims:?}",
                t.dims()
            );
            pos += used;
            tensors.push(t);
        }
        if pos != bytes.len() {
            return Err(Error::PayloadMismatch {
                expected: pos,
                found: bytes.len(),
            });
        }
        ensure!(count.is_multiple_of(2), BadHeader, "odd tensor count {count}");
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        while let (Some(kernel), Some(bias)) = (it.next(), it.next()) {
            layers.push(ConvLayer { kernel, bias });
        }
        Self::new(config, views, layers)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// He-normal kernels, zero biases, zero final layer.
pub fn refine_init(cfg: &RefinerConfig, views: usize, rng: &mut RngState) -> Result<RefinerWeights> {
    cfg.validate()?;
    let shapes = cfg.layer_shapes(views);
    let last = shapes.len() - 1;
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(i, &(co, ci, _))| {
            let dims = [co, ci, 3, 3];
            let kernel = if i == last {
                Tensor::zeros(&dims)
            } else {
                rng.gaussian(&dims, 0.0, (2.0 / (ci * 9) as f64).sqrt())?
            };
            Ok(ConvLayer {
                kernel,
                bias: Tensor::zeros(&[co]),
            })
        })
        .collect::<Result<_>>()?;
    RefinerWeights::new(*cfg, views, layers)
}

/// Tape variables of every layer as `(kernel, bias)`.
pub fn weight_vars(tape: &mut Tape, w: &RefinerWeights, trainable: bool) -> Vec<(Var, Var)> {
    w.layers
        .iter()
        .map(|l| {
            let mut leaf = |t: &Tensor| {
                if trainable {
                    tape.param(t.dims(), t.to_f64())
                } else {
                    tape.constant(t.dims(), t.to_f64())
                }
            };
            (leaf(&l.kernel), leaf(&l.bias))
        })
        .collect()
}

/// Records the refiner on `tape`. `depth` is `[H, W]` in mm, `mask` is the
/// per-pixel `[U*V, H, W]` mask. Returns the refined `[H, W]` depth.
pub fn refiner_graph(
    tape: &mut Tape,
    cfg: &RefinerConfig,
    depth: Var,
    mask: Var,
    layers: &[(Var, Var)],
) -> Result<Var> {
    let dd = tape.dims(depth).to_vec();
    ensure!(dd.len() == 2, Shape, "depth must be [H, W], got {dd:?}");
    let (h, w) = (dd[0], dd[1]);
    ensure!(
        h >= MIN_SIDE && w >= MIN_SIDE,
        Shape,
        "refiner input {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}"
    );
    ensure!(
        tape.dims(mask).len() == 3 && tape.dims(mask)[1..] == [h, w],
        Shape,
        "mask channels {:?} do not match depth {h}x{w}",
        tape.dims(mask)
    );
    ensure!(layers.len() == cfg.num_layers, Shape, "layer count mismatch");
    let ds = cfg.depth_scale_mm;

    let d3 = tape.slice(depth, 0, &[1, h, w])?;
    let dn = tape.scale(d3, 1.0 / ds);
    let mut x = tape.concat(dn, mask)?;
    let last = layers.len() - 1;
    let mut skip = None;
    for (l, &(k, b)) in layers.iter().enumerate() {
        if l == last {
            if let Some(s) = skip.take() {
                let up = tape.upsample(x, h, w)?;
                x = tape.add(up, s)?;
            }
            x = tape.conv2d(x, k, b, ConvSpec { stride: 1 })?;
        } else {
            let stride = if cfg.downsample && l == 1 { 2 } else { 1 };
            let y = tape.conv2d(x, k, b, ConvSpec { stride })?;
            x = tape.relu(y);
            if cfg.downsample && l == 0 {
                skip = Some(x);
            }
        }
    }
    let res = tape.slice(x, 0, &[h, w])?;
    let res = tape.scale(res, ds);
    let sum = tape.add(depth, res)?;
    Ok(tape.relu(sum))
}

/// `max(0, D + R(D, M))` for a full depth map.
pub fn refine_forward(depth: &Tensor, mask: &MicrolensMask<'_>, weights: &RefinerWeights) -> Result<Tensor> {
    ensure!(depth.ndim() == 2, Shape, "depth must be [H, W], got {:?}", depth.dims());
    let (h, w) = (depth.dims()[0], depth.dims()[1]);
    ensure!(
        mask.sensor() == (h, w),
        Shape,
        "mask tiles {:?}, depth is {h}x{w}",
        mask.sensor()
    );
    let (u, v) = mask.views();
    ensure!(
        u * v == weights.views,
        Shape,
        "refiner expects {} mask channels, mask has {}",
        weights.views,
        u * v
    );
    let mut tape = Tape::new();
    let d = tape.constant(&[h, w], depth.to_f64());
    let patch = tape.constant(&[mask.patch().values().len()], mask.patch().values().to_f64());
    let m = tape.gather(patch, Arc::new(mask.gather_indices()), &[u * v, h, w])?;
    let vars = weight_vars(&mut tape, weights, false);
    let out = refiner_graph(&mut tape, &weights.config, d, m, &vars)?;
    Tensor::from_f64(&[h, w], tape.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{init_mask, tile_mask, MaskPattern};

    fn mask_patch(seed: u64) -> crate::mask::MaskPatch {
        init_mask(MaskPattern::Bernoulli(0.5), 3, 3, 4, &mut RngState::new(seed)).unwrap()
    }

    fn perturbed(w: &RefinerWeights, seed: u64, sd: f64) -> RefinerWeights {
        let mut rng = RngState::new(seed);
        let mut out = w.clone();
        for l in &mut out.layers {
            for t in [&mut l.kernel, &mut l.bias] {
                for x in t.data_mut() {
                    *x += (sd * rng.standard_normal()) as f32;
                }
            }
        }
        out
    }

    #[test]
    fn init_shapes_and_zero_head() {
        let cfg = RefinerConfig::default();
        let w = refine_init(&cfg, 81, &mut RngState::new(1)).unwrap();
        assert_eq!(w.layers[0].kernel.dims(), &[16, 82, 3, 3]);
        assert_eq!(w.layers[3].kernel.dims(), &[1, 16, 3, 3]);
        assert!(w.layers[3].kernel.data().iter().all(|&x| x == 0.0));
        assert!(w.layers.iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
        assert_eq!(w, refine_init(&cfg, 81, &mut RngState::new(1)).unwrap());
        assert!(refine_init(
            &RefinerConfig {
                num_layers: 1,
                ..cfg
            },
            81,
            &mut RngState::new(1)
        )
        .is_err());
    }

    #[test]
    fn init_variance_matches_fan_in() {
        let cfg = RefinerConfig {
            hidden_channels: 32,
            ..RefinerConfig::default()
        };
        let w = refine_init(&cfg, 81, &mut RngState::new(2)).unwrap();
        let k = w.layers[1].kernel.data();
        assert!(k.len() >= 9000);
        let var = k.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / k.len() as f64;
        let want = 2.0 / (32.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.2, "{var} vs {want}");
    }

    #[test]
    fn identity_residual_at_init() {
        let patch = mask_patch(3);
        let mask = tile_mask(&patch, 9, 11, 4, (1, 2)).unwrap();
        let w = refine_init(&RefinerConfig::default(), 9, &mut RngState::new(3)).unwrap();
        let mut rng = RngState::new(4);
        let depth = rng.gaussian(&[9, 11], 100.0, 300.0).unwrap();
        let out = refine_forward(&depth, &mask, &w).unwrap();
        for (o, d) in out.data().iter().zip(depth.data()) {
            assert_eq!(*o, d.max(0.0));
        }
        let neg = refine_forward(&Tensor::full(&[9, 11], -5.0), &mask, &w).unwrap();
        assert!(neg.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn any_size_from_eight_up() {
        let patch = mask_patch(5);
        let w = perturbed(
            &refine_init(&RefinerConfig::default(), 9, &mut RngState::new(5)).unwrap(),
            6,
            0.05,
        );
        for (h, ww) in [(8, 8), (13, 9), (64, 64), (128, 128)] {
            let mask = tile_mask(&patch, h, ww, 4, (0, 0)).unwrap();
            let out = refine_forward(&Tensor::full(&[h, ww], 1500.0), &mask, &w).unwrap();
            assert_eq!(out.dims(), &[h, ww]);
        }
        let mask = tile_mask(&patch, 7, 8, 4, (0, 0)).unwrap();
        assert!(refine_forward(&Tensor::full(&[7, 8], 1.0), &mask, &w).is_err());
    }

    #[test]
    fn mask_channels_are_wired() {
        let patch = mask_patch(7);
        let w = perturbed(
            &refine_init(&RefinerConfig::default(), 9, &mut RngState::new(7)).unwrap(),
            8,
            0.2,
        );
        let depth = Tensor::full(&[12, 12], 1200.0);
        let a = refine_forward(&depth, &tile_mask(&patch, 12, 12, 4, (0, 0)).unwrap(), &w).unwrap();
        // permute the view channels by reversing the patch along views
        let p = patch.values();
        let n = 16;
        let mut rev = Vec::with_capacity(p.len());
        for view in (0..9).rev() {
            rev.extend_from_slice(&p.data()[view * n..(view + 1) * n]);
        }
        let swapped = crate::mask::MaskPatch::new(Tensor::new(p.dims().to_vec(), rev).unwrap()).unwrap();
        let b = refine_forward(&depth, &tile_mask(&swapped, 12, 12, 4, (0, 0)).unwrap(), &w).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn container_round_trip() {
        let w = perturbed(
            &refine_init(&RefinerConfig::default(), 9, &mut RngState::new(9)).unwrap(),
            10,
            0.1,
        );
        let bytes = w.to_bytes();
        assert!(bytes.starts_with(b"TNSW1 8\n"));
        assert_eq!(RefinerWeights::from_bytes(&bytes).unwrap(), w);
        assert!(RefinerWeights::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[4] = b'X';
        assert!(matches!(
            RefinerWeights::from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));
    }
}
