//! Shared convolution-layer plumbing for the encoder and decoder.

use crate::autodiff::{Graph, Id, ParamId, ParamSet};
use crate::cells::conv_kernel_init;
use crate::error::{Error, Result};
use ndarray::IxDyn;
use rand::Rng;

/// A single convolution with optional bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        ps: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.register(
            format!("{name}.w"),
            conv_kernel_init(rng, c_out, c_in, k, gain),
        );
        let b = bias.then(|| {
            ps.register(
                format!("{name}.b"),
                crate::autodiff::Tensor::zeros(IxDyn(&[c_out])),
            )
        });
        Self {
            w,
            b,
            stride,
            pad: k / 2,
            c_in,
            c_out,
        }
    }

    pub fn apply(&self, g: &mut Graph, ps: &ParamSet, x: Id) -> Result<Id> {
        let got = g.val(x).shape()[0];
        if got != self.c_in {
            return Err(Error::ShapeMismatch {
                context: "conv layer input (channels)".to_string(),
                expected: self.c_in.to_string(),
                got: got.to_string(),
            });
        }
        let w = g.param(ps, self.w);
        let b = self.b.map(|b| g.param(ps, b));
        Ok(g.conv2d(x, w, b, self.stride, self.pad))
    }

    /// Convolution followed by ReLU.
    pub fn apply_relu(&self, g: &mut Graph, ps: &ParamSet, x: Id) -> Result<Id> {
        let y = self.apply(g, ps, x)?;
        Ok(g.relu(y))
    }

    /// Bilinear resize to `(oh, ow)`, then convolution + ReLU.
    pub fn apply_resize_relu(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x: Id,
        oh: usize,
        ow: usize,
    ) -> Result<Id> {
        let up = g.resize_bilinear(x, oh, ow);
        self.apply_relu(g, ps, up)
    }
}
