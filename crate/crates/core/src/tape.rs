//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Operations append nodes to a [`Tape`] in evaluation order, so the node
//! list is already topologically sorted; [`Tape::backward`] walks it once in
//! reverse. Values are f64 so finite-difference checks stay meaningful.

use std::f64::consts::TAU;
use std::sync::Arc;

use crate::error::{ensure, Error, Result};
use crate::kdtree::KdTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvSpec {
    pub stride: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Cos(Var),
    /// `atan2(y, x)` wrapped into `[0, 2 pi)`; zero with zero gradient at the origin.
    Atan2 { y: Var, x: Var },
    Relu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    /// Contiguous slice `[start, start + len)`.
    Slice { x: Var, start: usize },
    /// `out[i] = x[indices[i]]`.
    Gather { x: Var, indices: Arc<Vec<usize>> },
    Concat(Var, Var),
    /// Masked mean over views: constant per-view data `[4, V, HW]`, mask `[V, HW]`.
    ViewAverage {
        per_view: Arc<Vec<f64>>,
        mask: Var,
        aperture: Arc<Vec<bool>>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        /// reflection-padded input, kept for the backward pass
        padded: Vec<f64>,
    },
    Upsample { x: Var },
    Sum(Var),
    SmoothL1Sum { pred: Var, target: Arc<Vec<f64>>, delta: f64 },
    /// Sum over predicted points of the distance to their nearest target point.
    ChamferSum {
        pred: Var,
        width: usize,
        scale: f64,
        target: Arc<Vec<[f64; 3]>>,
        nearest: Vec<usize>,
    },
}

struct Node {
    value: Vec<f64>,
    dims: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that needed them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, dims: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), dims.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            dims,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, dims: &[usize], value: Vec<f64>) -> Var {
        self.push(value, dims.to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, dims: &[usize], value: Vec<f64>) -> Var {
        self.push(value, dims.to_vec(), Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        ensure!(
            self.dims(a) == self.dims(b),
            Shape,
            "operand shapes differ: {:?} vs {:?}",
            self.dims(a),
            self.dims(b)
        );
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let dims = self.dims(a).to_vec();
        Ok(self.push(value, dims, op, needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let needs = self.needs(a);
        let dims = self.dims(a).to_vec();
        self.push(value, dims, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { x: a, lo, hi })
    }

    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.binary(
            y,
            x,
            |yy, xx| {
                if yy == 0.0 && xx == 0.0 {
                    0.0
                } else {
                    yy.atan2(xx).rem_euclid(TAU)
                }
            },
            Op::Atan2 { y, x },
        )
    }

    /// Flat slice reinterpreted with `dims`.
    pub fn slice(&mut self, x: Var, start: usize, dims: &[usize]) -> Result<Var> {
        let len: usize = dims.iter().product();
        ensure!(
            start + len <= self.value(x).len(),
            Shape,
            "slice [{start}, {}) out of bounds",
            start + len
        );
        let value = self.value(x)[start..start + len].to_vec();
        let needs = self.needs(x);
        Ok(self.push(value, dims.to_vec(), Op::Slice { x, start }, needs))
    }

    pub fn gather(&mut self, x: Var, indices: Arc<Vec<usize>>, dims: &[usize]) -> Result<Var> {
        ensure!(
            indices.len() == dims.iter().product::<usize>(),
            Shape,
            "gather index count does not match {dims:?}"
        );
        let src = self.value(x);
        ensure!(
            indices.iter().all(|&i| i < src.len()),
            Shape,
            "gather index out of range"
        );
        let value = indices.iter().map(|&i| src[i]).collect();
        let needs = self.needs(x);
        Ok(self.push(value, dims.to_vec(), Op::Gather { x, indices }, needs))
    }

    /// Concatenates two `[C, H, W]` maps along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        ensure!(
            da.len() == 3 && db.len() == 3 && da[1..] == db[1..],
            Shape,
            "cannot concat {da:?} with {db:?}"
        );
        let mut value = self.value(a).to_vec();
        value.extend_from_slice(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, vec![da[0] + db[0], da[1], da[2]], Op::Concat(a, b), needs))
    }

    pub fn view_average(
        &mut self,
        per_view: Arc<Vec<f64>>,
        mask: Var,
        aperture: Arc<Vec<bool>>,
    ) -> Result<Var> {
        let md = self.dims(mask).to_vec();
        ensure!(md.len() == 3, Shape, "mask must be [views, H, W], got {md:?}");
        let views = md[0];
        let hw = md[1] * md[2];
        ensure!(
            aperture.len() == views && per_view.len() == 4 * views * hw,
            Shape,
            "per-view stack does not match mask {md:?}"
        );
        let value = crate::forward::average_views(&per_view, self.value(mask), &aperture, hw);
        let needs = self.needs(mask);
        Ok(self.push(
            value,
            vec![4, md[1], md[2]],
            Op::ViewAverage {
                per_view,
                mask,
                aperture,
            },
            needs,
        ))
    }

    /// 3x3 convolution with reflection padding; `input [Ci, H, W]`,
    /// `weight [Co, Ci, 3, 3]`, `bias [Co]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let di = self.dims(input).to_vec();
        let dw = self.dims(weight).to_vec();
        ensure!(di.len() == 3, Shape, "conv input must be [C, H, W], got {di:?}");
        ensure!(
            dw.len() == 4 && dw[1] == di[0] && dw[2] == 3 && dw[3] == 3,
            Shape,
            "conv weight {dw:?} does not fit input {di:?}"
        );
        ensure!(self.dims(bias) == [dw[0]], Shape, "bias must be [{}]", dw[0]);
        ensure!(di[1] >= 2 && di[2] >= 2, Shape, "reflection padding needs H, W >= 2");
        ensure!(spec.stride >= 1, InvalidParam, "stride must be >= 1");
        let (ci, h, w) = (di[0], di[1], di[2]);
        let co = dw[0];
        let s = spec.stride;
        let (ho, wo) = (conv_out(h, s), conv_out(w, s));
        let (hp, wp) = (h + 2, w + 2);

        let src = self.value(input);
        let mut padded = vec![0f64; ci * hp * wp];
        for c in 0..ci {
            for py in 0..hp {
                let y = reflect(py as isize - 1, h);
                for px in 0..wp {
                    let x = reflect(px as isize - 1, w);
                    padded[(c * hp + py) * wp + px] = src[(c * h + y) * w + x];
                }
            }
        }

        let wt = self.value(weight);
        let b = self.value(bias);
        let mut out = vec![0f64; co * ho * wo];
        for o in 0..co {
            let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            plane.fill(b[o]);
            for c in 0..ci {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = wt[((o * ci + c) * 3 + ky) * 3 + kx];
                        if k == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let row = &padded[(c * hp + oy * s + ky) * wp..][..wp];
                            let dst = &mut plane[oy * wo..(oy + 1) * wo];
                            if s == 1 {
                                for (d, &p) in dst.iter_mut().zip(&row[kx..kx + wo]) {
                                    *d += k * p;
                                }
                            } else {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d += k * row[ox * s + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            vec![co, ho, wo],
            Op::Conv2d {
                input,
                weight,
                bias,
                stride: s,
                padded,
            },
            needs,
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[C, h, w]`, cropped to `[C, H, W]`.
    pub fn upsample(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let d = self.dims(x).to_vec();
        ensure!(
            d.len() == 3 && d[1] == conv_out(height, 2) && d[2] == conv_out(width, 2),
            Shape,
            "cannot upsample {d:?} to {height}x{width}"
        );
        let src = self.value(x);
        let mut value = Vec::with_capacity(d[0] * height * width);
        for c in 0..d[0] {
            for y in 0..height {
                for xx in 0..width {
                    value.push(src[(c * d[1] + y / 2) * d[2] + xx / 2]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(value, vec![d[0], height, width], Op::Upsample { x }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![s], vec![1], Op::Sum(x), needs)
    }

    pub fn smooth_l1_sum(&mut self, pred: Var, target: Arc<Vec<f64>>, delta: f64) -> Result<Var> {
        ensure!(delta > 0.0, InvalidParam, "smooth-L1 delta must be positive");
        ensure!(
            self.value(pred).len() == target.len(),
            Shape,
            "prediction and target lengths differ"
        );
        let s = self
            .value(pred)
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| crate::loss::smooth_l1_scalar(p - t, delta))
            .sum();
        let needs = self.needs(pred);
        Ok(self.push(vec![s], vec![1], Op::SmoothL1Sum { pred, target, delta }, needs))
    }

    /// One-directional Chamfer sum from the projected `[H, W]` prediction to
    /// `target`. Nearest neighbours are found here and held fixed for the
    /// backward pass.
    pub fn chamfer_sum(
        &mut self,
        pred: Var,
        scale: f64,
        target: Arc<Vec<[f64; 3]>>,
    ) -> Result<Var> {
        let d = self.dims(pred).to_vec();
        ensure!(d.len() == 2, Shape, "chamfer prediction must be [H, W]");
        ensure!(!target.is_empty(), InvalidParam, "chamfer target is empty");
        let width = d[1];
        let points = crate::recon::project_raw(self.value(pred), width, scale);
        let tree = KdTree::build(&target);
        let mut total = 0.0;
        let mut nearest = Vec::with_capacity(points.len());
        for p in &points {
            let (d2, j) = tree.nearest(p).expect("target is non-empty");
            total += d2.sqrt();
            nearest.push(j);
        }
        let needs = self.needs(pred);
        Ok(self.push(
            vec![total],
            vec![1],
            Op::ChamferSum {
                pred,
                width,
                scale,
                target,
                nearest,
            },
            needs,
        ))
    }

    /// Branch taken at every non-smooth point of the recorded graph
    /// (rectifier and clamp sides, smooth-L1 regime, nearest-neighbour
    /// assignment). Two evaluations with equal signatures lie on the same
    /// smooth piece.
    pub fn branch_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => sig.extend(self.value(*a).iter().map(|&v| (v > 0.0) as u64)),
                Op::Clamp { x, lo, hi } => sig.extend(
                    self.value(*x)
                        .iter()
                        .map(|&v| (v > *lo) as u64 + 2 * (v < *hi) as u64),
                ),
                Op::SmoothL1Sum { pred, target, delta } => sig.extend(
                    self.value(*pred)
                        .iter()
                        .zip(target.iter())
                        .map(|(&p, &t)| ((p - t).abs() >= *delta) as u64),
                ),
                Op::ChamferSum { nearest, .. } => sig.extend(nearest.iter().map(|&j| j as u64)),
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.nodes[loss.0].value.len() == 1,
            Shape,
            "backward needs a scalar, got {:?}",
            self.nodes[loss.0].dims
        );
        if !self.needs(loss) {
            return Err(Error::Disconnected);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |s| s.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                self.accumulate(grads, *b, |s| s.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |s| {
                    for ((d, &x), &o) in s.iter_mut().zip(g).zip(vb) {
                        *d += x * o;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((d, &x), &o) in s.iter_mut().zip(g).zip(va) {
                        *d += x * o;
                    }
                });
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(d, &x)| *d += k * x));
            }
            Op::Cos(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, |s| {
                    for ((d, &x), &v) in s.iter_mut().zip(g).zip(va) {
                        *d -= x * v.sin();
                    }
                });
            }
            Op::Atan2 { y, x } => {
                let (vy, vx) = (self.value(*y), self.value(*x));
                let r2 = |i: usize| vx[i] * vx[i] + vy[i] * vy[i];
                self.accumulate(grads, *y, |s| {
                    for (i, d) in s.iter_mut().enumerate() {
                        let r = r2(i);
                        if r > 0.0 {
                            *d += g[i] * vx[i] / r;
                        }
                    }
                });
                self.accumulate(grads, *x, |s| {
                    for (i, d) in s.iter_mut().enumerate() {
                        let r = r2(i);
                        if r > 0.0 {
                            *d -= g[i] * vy[i] / r;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, |s| {
                    for ((d, &x), &v) in s.iter_mut().zip(g).zip(va) {
                        if v > 0.0 {
                            *d += x;
                        }
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x);
                self.accumulate(grads, *x, |s| {
                    for ((d, &gg), &v) in s.iter_mut().zip(g).zip(vx) {
                        if v > *lo && v < *hi {
                            *d += gg;
                        }
                    }
                });
            }
            Op::Slice { x, start } => {
                self.accumulate(grads, *x, |s| {
                    for (d, &gg) in s[*start..*start + g.len()].iter_mut().zip(g) {
                        *d += gg;
                    }
                });
            }
            Op::Gather { x, indices } => {
                self.accumulate(grads, *x, |s| {
                    for (&i, &gg) in indices.iter().zip(g) {
                        s[i] += gg;
                    }
                });
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                self.accumulate(grads, *a, |s| s.iter_mut().zip(&g[..na]).for_each(|(d, &x)| *d += x));
                self.accumulate(grads, *b, |s| s.iter_mut().zip(&g[na..]).for_each(|(d, &x)| *d += x));
            }
            Op::ViewAverage {
                per_view,
                mask,
                aperture,
            } => {
                let views = aperture.len();
                let hw = g.len() / 4;
                let inv = 1.0 / views as f64;
                self.accumulate(grads, *mask, |s| {
                    for (view, &open) in aperture.iter().enumerate() {
                        if !open {
                            continue;
                        }
                        let dst = &mut s[view * hw..(view + 1) * hw];
                        for k in 0..4 {
                            let c = &per_view[(k * views + view) * hw..][..hw];
                            let gk = &g[k * hw..(k + 1) * hw];
                            for ((d, &cv), &gv) in dst.iter_mut().zip(c).zip(gk) {
                                *d += inv * cv * gv;
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padded,
            } => self.conv_backward(node, g, grads, *input, *weight, *bias, *stride, padded),
            Op::Upsample { x } => {
                let d = self.dims(*x).to_vec();
                let (h, w) = (node.dims[1], node.dims[2]);
                self.accumulate(grads, *x, |s| {
                    for c in 0..d[0] {
                        for y in 0..h {
                            for xx in 0..w {
                                s[(c * d[1] + y / 2) * d[2] + xx / 2] += g[(c * h + y) * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |s| s.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::SmoothL1Sum { pred, target, delta } => {
                let vp = self.value(*pred);
                self.accumulate(grads, *pred, |s| {
                    for ((d, &p), &t) in s.iter_mut().zip(vp).zip(target.iter()) {
                        *d += g[0] * crate::loss::smooth_l1_grad(p - t, *delta);
                    }
                });
            }
            Op::ChamferSum {
                pred,
                width,
                scale,
                target,
                nearest,
            } => {
                let vp = self.value(*pred);
                self.accumulate(grads, *pred, |s| {
                    for (k, d) in s.iter_mut().enumerate() {
                        let p = [(k % width) as f64, (k / width) as f64, scale * vp[k]];
                        let q = &target[nearest[k]];
                        let dist = crate::kdtree::dist2(&p, q).sqrt();
                        if dist > 0.0 {
                            *d += g[0] * scale * (p[2] - q[2]) / dist;
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        input: Var,
        weight: Var,
        bias: Var,
        s: usize,
        padded: &[f64],
    ) {
        let di = self.dims(input);
        let (ci, h, w) = (di[0], di[1], di[2]);
        let (co, ho, wo) = (node.dims[0], node.dims[1], node.dims[2]);
        let (hp, wp) = (h + 2, w + 2);
        let wt = self.value(weight);

        self.accumulate(grads, bias, |sb| {
            for (o, d) in sb.iter_mut().enumerate() {
                *d += g[o * ho * wo..(o + 1) * ho * wo].iter().sum::<f64>();
            }
        });

        self.accumulate(grads, weight, |sw| {
            for o in 0..co {
                let go = &g[o * ho * wo..(o + 1) * ho * wo];
                for c in 0..ci {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let mut acc = 0.0;
                            for oy in 0..ho {
                                let row = &padded[(c * hp + oy * s + ky) * wp..][..wp];
                                let grow = &go[oy * wo..(oy + 1) * wo];
                                if s == 1 {
                                    for (&gv, &p) in grow.iter().zip(&row[kx..kx + wo]) {
                                        acc += gv * p;
                                    }
                                } else {
                                    for (ox, &gv) in grow.iter().enumerate() {
                                        acc += gv * row[ox * s + kx];
                                    }
                                }
                            }
                            sw[((o * ci + c) * 3 + ky) * 3 + kx] += acc;
                        }
                    }
                }
            }
        });

        if !self.needs(input) {
            return;
        }
        let mut gpad = vec![0f64; ci * hp * wp];
        for o in 0..co {
            let go = &g[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..ci {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = wt[((o * ci + c) * 3 + ky) * 3 + kx];
                        if k == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let base = (c * hp + oy * s + ky) * wp;
                            let grow = &go[oy * wo..(oy + 1) * wo];
                            if s == 1 {
                                let dst = &mut gpad[base + kx..base + kx + wo];
                                for (d, &gv) in dst.iter_mut().zip(grow) {
                                    *d += k * gv;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    gpad[base + ox * s + kx] += k * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.accumulate(grads, input, |si| {
            for c in 0..ci {
                for py in 0..hp {
                    let y = reflect(py as isize - 1, h);
                    for px in 0..wp {
                        let x = reflect(px as isize - 1, w);
                        si[(c * h + y) * w + x] += gpad[(c * hp + py) * wp + px];
                    }
                }
            }
        });
    }
}
