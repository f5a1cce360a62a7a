//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] records operations as they execute (define-by-run) and can
//! replay them backwards to produce gradients for every leaf, in particular
//! for network parameters registered through a [`ParamSet`]. Tensors are
//! dynamic-rank `ndarray` arrays; activations are `(C, H, W)`, convolution
//! kernels `(C_out, C_in, kH, kW)`, scalars shape `[1]`.
//!
//! The op set is exactly what the flow network and its losses need:
//! convolution (im2col + GEMM), bilinear resizing, pointwise maps,
//! arithmetic, channel concatenation, reductions, and a [`TapeOp`] hook for
//! domain-specific differentiable ops (event splatting, smoothness).

mod conv;

pub use conv::{col2im, conv2d_shape, im2col};

use ndarray::{ArrayD, Axis, IxDyn};
use std::collections::HashMap;
use std::rc::Rc;

pub type Tensor = ArrayD<f64>;

/// Handle to a node in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(usize);

/// Handle to a parameter in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Custom differentiable operation plugged into the tape.
pub trait TapeOp {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    /// Gradient w.r.t. each input given the upstream gradient; `None` marks
    /// inputs that do not receive gradient.
    fn backward(&self, inputs: &[&Tensor], grad_out: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
}

enum Op {
    Leaf,
    Conv2d {
        x: Id,
        w: Id,
        b: Option<Id>,
        stride: usize,
        pad: usize,
    },
    Resize {
        x: Id,
    },
    Map {
        x: Id,
        f: Unary,
    },
    /// `a * x + b` with scalar constants; only the slope matters backward.
    Affine {
        x: Id,
        a: f64,
    },
    Add {
        a: Id,
        b: Id,
    },
    Sub {
        a: Id,
        b: Id,
    },
    Mul {
        a: Id,
        b: Id,
    },
    Div {
        a: Id,
        b: Id,
    },
    ConcatC {
        parts: Vec<Id>,
    },
    Sum {
        x: Id,
    },
    SumSq {
        x: Id,
    },
    /// `num / x` for scalar `x`.
    RecipScale {
        x: Id,
        num: f64,
    },
    Custom {
        inputs: Vec<Id>,
        op: Rc<dyn TapeOp>,
    },
}

/// Define-by-run computation graph.
#[derive(Default)]
pub struct Graph {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    param_of: Vec<Option<ParamId>>,
    param_cache: HashMap<usize, Id>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, v: Tensor, op: Op) -> Id {
        self.vals.push(v);
        self.ops.push(op);
        self.param_of.push(None);
        Id(self.vals.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Constant input (no parameter gradient is collected for it, but
    /// gradients still flow through if requested via [`Grads::of_node`]).
    pub fn leaf(&mut self, v: Tensor) -> Id {
        self.push(v, Op::Leaf)
    }

    /// Leaf bound to a trainable parameter; repeated calls for the same
    /// parameter return the same node so gradients accumulate across uses.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Id {
        if let Some(&n) = self.param_cache.get(&id.0) {
            return n;
        }
        let n = self.push(params.value(id).clone(), Op::Leaf);
        self.param_of[n.0] = Some(id);
        self.param_cache.insert(id.0, n);
        n
    }

    /// Copy a node's value into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, x: Id) -> Id {
        let v = self.vals[x.0].clone();
        self.leaf(v)
    }

    pub fn val(&self, id: Id) -> &Tensor {
        &self.vals[id.0]
    }

    pub fn scalar(&self, id: Id) -> f64 {
        debug_assert_eq!(self.vals[id.0].len(), 1);
        self.vals[id.0][IxDyn(&[0])]
    }

    /// 2-D convolution over `(C,H,W)` input with zero padding.
    pub fn conv2d(&mut self, x: Id, w: Id, b: Option<Id>, stride: usize, pad: usize) -> Id {
        let y = conv::conv2d(
            &self.vals[x.0],
            &self.vals[w.0],
            b.map(|b| &self.vals[b.0]),
            stride,
            pad,
        );
        self.push(y, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Bilinear resize of a `(C,H,W)` tensor to `(C,oh,ow)`.
    pub fn resize_bilinear(&mut self, x: Id, oh: usize, ow: usize) -> Id {
        let y = resize_forward(&self.vals[x.0], oh, ow);
        self.push(y, Op::Resize { x })
    }

    fn map(&mut self, x: Id, f: Unary) -> Id {
        let y = match f {
            Unary::Sigmoid => self.vals[x.0].mapv(|v| 1.0 / (1.0 + (-v).exp())),
            Unary::Tanh => self.vals[x.0].mapv(f64::tanh),
            Unary::Relu => self.vals[x.0].mapv(|v| v.max(0.0)),
            Unary::Exp => self.vals[x.0].mapv(f64::exp),
        };
        self.push(y, Op::Map { x, f })
    }

    pub fn sigmoid(&mut self, x: Id) -> Id {
        self.map(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Id) -> Id {
        self.map(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Id) -> Id {
        self.map(x, Unary::Relu)
    }

    pub fn exp(&mut self, x: Id) -> Id {
        self.map(x, Unary::Exp)
    }

    /// Elementwise `a * x + b` with constants.
    pub fn affine(&mut self, x: Id, a: f64, b: f64) -> Id {
        let y = self.vals[x.0].mapv(|v| a * v + b);
        self.push(y, Op::Affine { x, a })
    }

    pub fn scale(&mut self, x: Id, a: f64) -> Id {
        self.affine(x, a, 0.0)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let y = &self.vals[a.0] + &self.vals[b.0];
        self.push(y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        let y = &self.vals[a.0] - &self.vals[b.0];
        self.push(y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        let y = &self.vals[a.0] * &self.vals[b.0];
        self.push(y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Id, b: Id) -> Id {
        let y = &self.vals[a.0] / &self.vals[b.0];
        self.push(y, Op::Div { a, b })
    }

    /// Concatenate `(C,H,W)` tensors along the channel axis.
    pub fn concat_c(&mut self, parts: &[Id]) -> Id {
        let views: Vec<_> = parts.iter().map(|p| self.vals[p.0].view()).collect();
        let y = ndarray::concatenate(Axis(0), &views).expect("concat shapes");
        self.push(y, Op::ConcatC { parts: parts.to_vec() })
    }

    pub fn sum(&mut self, x: Id) -> Id {
        let s = self.vals[x.0].sum();
        self.push(Tensor::from_elem(IxDyn(&[1]), s), Op::Sum { x })
    }

    pub fn sum_sq(&mut self, x: Id) -> Id {
        let s = self.vals[x.0].iter().map(|v| v * v).sum();
        self.push(Tensor::from_elem(IxDyn(&[1]), s), Op::SumSq { x })
    }

    /// Scalar `num / x`.
    pub fn recip_scale(&mut self, x: Id, num: f64) -> Id {
        let s = num / self.scalar(x);
        self.push(Tensor::from_elem(IxDyn(&[1]), s), Op::RecipScale { x, num })
    }

    pub fn custom(&mut self, op: Rc<dyn TapeOp>, inputs: &[Id]) -> Id {
        let views: Vec<&Tensor> = inputs.iter().map(|i| &self.vals[i.0]).collect();
        let y = op.forward(&views);
        self.push(
            y,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Reverse pass from a scalar node. Returns per-node gradients.
    pub fn backward(&self, loss: Id) -> Grads {
        assert_eq!(self.vals[loss.0].len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(Tensor::from_elem(IxDyn(&[1]), 1.0));

        for i in (0..self.ops.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = conv::conv2d_backward(
                        &self.vals[x.0],
                        &self.vals[w.0],
                        &gy,
                        *stride,
                        *pad,
                        b.is_some(),
                    );
                    accum(&mut grads[x.0], gx);
                    accum(&mut grads[w.0], gw);
                    if let (Some(b), Some(gb)) = (b, gb) {
                        accum(&mut grads[b.0], gb);
                    }
                }
                Op::Resize { x } => {
                    let gx = resize_backward(&self.vals[x.0], &gy);
                    accum(&mut grads[x.0], gx);
                }
                Op::Map { x, f } => {
                    let y = &self.vals[i];
                    let gx = match f {
                        Unary::Sigmoid => {
                            let mut g = y * &(1.0 - y);
                            g *= &gy;
                            g
                        }
                        Unary::Tanh => {
                            let mut g = y.mapv(|v| 1.0 - v * v);
                            g *= &gy;
                            g
                        }
                        Unary::Relu => {
                            let mut g = self.vals[x.0].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                            g *= &gy;
                            g
                        }
                        Unary::Exp => y * &gy,
                    };
                    accum(&mut grads[x.0], gx);
                }
                Op::Affine { x, a } => {
                    accum(&mut grads[x.0], gy.mapv(|v| v * a));
                }
                Op::Add { a, b } => {
                    accum(&mut grads[a.0], gy.clone());
                    accum(&mut grads[b.0], gy);
                }
                Op::Sub { a, b } => {
                    accum(&mut grads[a.0], gy.clone());
                    accum(&mut grads[b.0], gy.mapv(|v| -v));
                }
                Op::Mul { a, b } => {
                    accum(&mut grads[a.0], &gy * &self.vals[b.0]);
                    accum(&mut grads[b.0], &gy * &self.vals[a.0]);
                }
                Op::Div { a, b } => {
                    let vb = &self.vals[b.0];
                    accum(&mut grads[a.0], &gy / vb);
                    let ga = &gy * &self.vals[i];
                    accum(&mut grads[b.0], -(&ga / vb));
                }
                Op::ConcatC { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let c = self.vals[p.0].shape()[0];
                        let slice = gy
                            .slice_axis(Axis(0), ndarray::Slice::from(off..off + c))
                            .to_owned();
                        accum(&mut grads[p.0], slice);
                        off += c;
                    }
                }
                Op::Sum { x } => {
                    let g = gy[IxDyn(&[0])];
                    accum(&mut grads[x.0], Tensor::from_elem(self.vals[x.0].raw_dim(), g));
                }
                Op::SumSq { x } => {
                    let g = 2.0 * gy[IxDyn(&[0])];
                    accum(&mut grads[x.0], self.vals[x.0].mapv(|v| g * v));
                }
                Op::RecipScale { x, num } => {
                    let vx = self.vals[x.0][IxDyn(&[0])];
                    let g = -num / (vx * vx) * gy[IxDyn(&[0])];
                    accum(&mut grads[x.0], Tensor::from_elem(IxDyn(&[1]), g));
                }
                Op::Custom { inputs, op } => {
                    let views: Vec<&Tensor> = inputs.iter().map(|i| &self.vals[i.0]).collect();
                    let gs = op.backward(&views, &gy);
                    debug_assert_eq!(gs.len(), inputs.len());
                    for (inp, g) in inputs.iter().zip(gs) {
                        if let Some(g) = g {
                            accum(&mut grads[inp.0], g);
                        }
                    }
                }
            }
        }
        Grads {
            by_node: grads,
            param_of: self.param_of.clone(),
        }
    }
}

fn accum(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Result of a backward pass.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
    param_of: Vec<Option<ParamId>>,
}

impl Grads {
    pub fn of_node(&self, id: Id) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }

    /// Gradients per parameter of `params`, zero-filled where a parameter
    /// did not participate in the graph.
    pub fn by_param(&self, params: &ParamSet) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = (0..params.len())
            .map(|i| Tensor::zeros(params.value(ParamId(i)).raw_dim()))
            .collect();
        for (node, pid) in self.param_of.iter().enumerate() {
            if let (Some(pid), Some(g)) = (pid, self.by_node[node].as_ref()) {
                out[pid.0] += g;
            }
        }
        out
    }
}

fn resize_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let shape = x.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut y = Tensor::zeros(IxDyn(&[c, oh, ow]));
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let (y0, y1, wy) = src_coords(oy, sy, h);
        for ox in 0..ow {
            let (x0, x1, wx) = src_coords(ox, sx, w);
            for ci in 0..c {
                let v = (1.0 - wy) * (1.0 - wx) * x[[ci, y0, x0]]
                    + (1.0 - wy) * wx * x[[ci, y0, x1]]
                    + wy * (1.0 - wx) * x[[ci, y1, x0]]
                    + wy * wx * x[[ci, y1, x1]];
                y[[ci, oy, ox]] = v;
            }
        }
    }
    y
}

fn resize_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let shape = x.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (gy.shape()[1], gy.shape()[2]);
    let mut gx = Tensor::zeros(x.raw_dim());
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let (y0, y1, wy) = src_coords(oy, sy, h);
        for ox in 0..ow {
            let (x0, x1, wx) = src_coords(ox, sx, w);
            for ci in 0..c {
                let g = gy[[ci, oy, ox]];
                gx[[ci, y0, x0]] += (1.0 - wy) * (1.0 - wx) * g;
                gx[[ci, y0, x1]] += (1.0 - wy) * wx * g;
                gx[[ci, y1, x0]] += wy * (1.0 - wx) * g;
                gx[[ci, y1, x1]] += wy * wx * g;
            }
        }
    }
    gx
}

/// Half-pixel-centered source coordinates with edge clamping.
fn src_coords(o: usize, scale: f64, n: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

/// Numerical checking helpers shared by unit and acceptance tests.
pub mod check {
    use super::Tensor;

    /// Central finite differences of `f` with respect to `x`.
    pub fn central_diff(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
        let mut g = Tensor::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = x.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// `||a - b|| / max(||a||, ||b||, floor)`.
    pub fn rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        diff / na.max(nb).max(floor)
    }
}
