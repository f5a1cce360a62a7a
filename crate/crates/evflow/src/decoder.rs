//! Flow-guided decoder: four upsampling modules that predict a flow pyramid,
//! each level refined by a small convolutional GRU conditioned on the
//! forward-warped flow of the previous timestep.
//!
//! Flow heads produce `max_flow * tanh(conv(D))`, where `max_flow` is a
//! fraction of the width at that scale. The refinement GRU runs in
//! normalized flow units (`flow / max_flow`), so its tanh-bounded state
//! covers the whole representable range; its updated hidden state, scaled
//! back to pixels, is the level's flow. The prior flow enters the GRU as
//! the initial hidden state after downscaling, with vector magnitudes
//! rescaled by the resolution ratio.

use crate::autodiff::{Graph, Id, ParamSet};
use crate::cells::{convgru_step_g, ConvGruParams};
use crate::error::{Error, Result};
use crate::layers::ConvLayer;
use crate::motion::FlowField;
use ndarray::{Array2, Ix3};
use rand::Rng;

/// Decoder channel plan and options.
#[derive(Debug, Clone)]
pub struct DecoderConfig {
    /// Feature channels of the four decoder modules (coarse to fine).
    pub channels: [usize; 4],
    pub kernel: usize,
    /// Flow cap at each scale as a fraction of that scale's width.
    pub max_flow_frac: f64,
    /// Feed the warped previous flow into the refinement GRUs. When off,
    /// the GRUs see a zero prior (the ablation arm).
    pub prior_flow_enabled: bool,
    /// One refinement GRU shared across levels instead of per-level ones.
    pub share_refine_gru: bool,
}

impl DecoderConfig {
    /// Mirror of the encoder channel plan.
    pub fn for_encoder(enc_channels: [usize; 4]) -> Self {
        Self {
            channels: [
                enc_channels[2],
                enc_channels[1],
                enc_channels[0],
                enc_channels[0],
            ],
            kernel: 3,
            max_flow_frac: 0.25,
            prior_flow_enabled: true,
            share_refine_gru: false,
        }
    }
}

/// All decoder parameters.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub cfg: DecoderConfig,
    /// Upsampling convolutions (resize x2 then conv + ReLU).
    pub up: Vec<ConvLayer>,
    /// Flow prediction heads, one per level.
    pub head: Vec<ConvLayer>,
    /// Refinement GRUs over 2-channel flow states (one, if shared).
    pub refine: Vec<ConvGruParams>,
}

impl DecoderParams {
    pub fn register(
        ps: &mut ParamSet,
        enc_channels: [usize; 4],
        cfg: DecoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.channels;
        let k = cfg.kernel;
        let mut up = Vec::new();
        let mut head = Vec::new();
        for l in 0..4 {
            let c_in = if l == 0 {
                2 * enc_channels[3]
            } else {
                d[l - 1] + enc_channels[3 - l] + 2
            };
            up.push(ConvLayer::register(
                ps,
                &format!("dec.up{}", l + 1),
                c_in,
                d[l],
                k,
                1,
                true,
                1.0,
                rng,
            ));
            // Small-gain head: initial flows start near zero.
            head.push(ConvLayer::register(
                ps,
                &format!("dec.head{}", l + 1),
                d[l],
                2,
                k,
                1,
                true,
                0.1,
                rng,
            ));
        }
        let n_refine = if cfg.share_refine_gru { 1 } else { 4 };
        let refine = (0..n_refine)
            .map(|l| ConvGruParams::register(ps, &format!("dec.refine{}", l + 1), 2, 2, k, rng))
            .collect();
        Self {
            cfg,
            up,
            head,
            refine,
        }
    }

    fn refine_params(&self, level: usize) -> &ConvGruParams {
        if self.cfg.share_refine_gru {
            &self.refine[0]
        } else {
            &self.refine[level]
        }
    }
}

/// Multi-scale flow estimate; level 3 is full resolution.
#[derive(Debug, Clone)]
pub struct FlowPyramid {
    pub levels: Vec<FlowField>,
}

impl FlowPyramid {
    pub fn full(&self) -> &FlowField {
        &self.levels[3]
    }
}

/// Scatter a flow field to the pixels its vectors point at, under the
/// constant-flow assumption. Targets are rounded to the nearest pixel,
/// out-of-bounds targets dropped, collisions averaged, holes zero.
pub fn forward_warp_flow(u_prev: &FlowField) -> FlowField {
    let (_, h, w) = u_prev.data.dim();
    let mut sum = FlowField::zeros(h, w);
    let mut count = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (fu, fv) = u_prev.at(y, x);
            let tx = (x as f64 + fu).round();
            let ty = (y as f64 + fv).round();
            if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                continue;
            }
            let (tx, ty) = (tx as usize, ty as usize);
            sum.data[[0, ty, tx]] += fu;
            sum.data[[1, ty, tx]] += fv;
            count[[ty, tx]] += 1.0;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let n = count[[y, x]];
            if n > 0.0 {
                sum.data[[0, y, x]] /= n;
                sum.data[[1, y, x]] /= n;
            }
        }
    }
    sum
}

/// Decoder outputs on the tape.
pub struct DecodeOut {
    /// Refined flows per level, pixel units at that level's resolution.
    pub pyramid: [Id; 4],
    /// Raw head outputs (`max_flow * tanh`), before GRU refinement.
    pub heads: [Id; 4],
}

impl DecodeOut {
    pub fn full_flow(&self) -> Id {
        self.pyramid[3]
    }
}

/// Run the decoder on the tape.
///
/// `feats` and `residual` come from the encoder at input size `(h, w)`;
/// `prior_px` is the forward-warped previous full-resolution flow in pixel
/// units (pass a zero field at the start of a sequence).
pub fn decode_g(
    g: &mut Graph,
    ps: &ParamSet,
    dec: &DecoderParams,
    feats: &[Id; 4],
    residual: Id,
    prior_px: Id,
    h: usize,
    w: usize,
) -> Result<DecodeOut> {
    let prior_shape = g.val(prior_px).shape().to_vec();
    if prior_shape != [2, h, w] {
        return Err(Error::ShapeMismatch {
            context: "decoder prior flow".to_string(),
            expected: format!("[2, {h}, {w}]"),
            got: format!("{prior_shape:?}"),
        });
    }
    // Normalized prior: dividing the full-resolution field by the
    // full-resolution cap makes the per-level rescale (w_l / W) and the
    // per-level normalization (1 / max_flow_l) cancel into one constant.
    let max_flow_full = dec.cfg.max_flow_frac * w as f64;
    let prior_norm = g.scale(prior_px, 1.0 / max_flow_full);

    let mut pyramid = [residual; 4];
    let mut heads = [residual; 4];
    let mut d_prev = residual;
    let mut u_norm_prev: Option<Id> = None;
    for l in 0..4 {
        let (lh, lw) = (h >> (3 - l), w >> (3 - l));
        let cat = if l == 0 {
            g.concat_c(&[residual, feats[3]])
        } else {
            g.concat_c(&[d_prev, feats[3 - l], u_norm_prev.unwrap()])
        };
        let d = dec.up[l]
            .apply_resize_relu(g, ps, cat, lh, lw)
            .map_err(|e| match e {
                Error::ShapeMismatch { expected, got, .. } => Error::ShapeMismatch {
                    context: format!("decoder level {}", l + 1),
                    expected,
                    got,
                },
                other => other,
            })?;

        let head_pre = dec.head[l].apply(g, ps, d)?;
        let u_hat_norm = g.tanh(head_pre);
        let max_flow_l = dec.cfg.max_flow_frac * lw as f64;
        heads[l] = g.scale(u_hat_norm, max_flow_l);

        let prior_l = if dec.cfg.prior_flow_enabled {
            g.resize_bilinear(prior_norm, lh, lw)
        } else {
            g.leaf(crate::encoder::zeros3(2, lh, lw))
        };
        let u_norm = convgru_step_g(g, ps, dec.refine_params(l), u_hat_norm, prior_l)?;
        pyramid[l] = g.scale(u_norm, max_flow_l);

        d_prev = d;
        u_norm_prev = Some(u_norm);
    }
    Ok(DecodeOut { pyramid, heads })
}

/// Plain-array decoder pass (features and residual as arrays).
pub fn decode(
    ps: &ParamSet,
    dec: &DecoderParams,
    feats: &[ndarray::Array3<f64>],
    residual: &ndarray::Array3<f64>,
    prior: &FlowField,
    h: usize,
    w: usize,
) -> Result<FlowPyramid> {
    let mut g = Graph::new();
    let f_ids = [
        g.leaf(feats[0].clone().into_dyn()),
        g.leaf(feats[1].clone().into_dyn()),
        g.leaf(feats[2].clone().into_dyn()),
        g.leaf(feats[3].clone().into_dyn()),
    ];
    let r = g.leaf(residual.clone().into_dyn());
    let p = g.leaf(prior.data.clone().into_dyn());
    let out = decode_g(&mut g, ps, dec, &f_ids, r, p, h, w)?;
    let levels = out
        .pyramid
        .iter()
        .map(|&id| FlowField::from_array(g.val(id).clone().into_dimensionality::<Ix3>().unwrap()))
        .collect();
    Ok(FlowPyramid { levels })
}

/// The per-level downscaled prior used by the refinement GRUs, in pixel
/// units at that level: bilinear resize with magnitudes scaled by the
/// resolution ratio.
pub fn prior_at_level(prior: &FlowField, lh: usize, lw: usize) -> FlowField {
    let (_, _, w) = prior.data.dim();
    let mut g = Graph::new();
    let p = g.leaf(prior.data.clone().into_dyn());
    let r = g.resize_bilinear(p, lh, lw);
    let scaled = g.scale(r, lw as f64 / w as f64);
    FlowField::from_array(g.val(scaled).clone().into_dimensionality::<Ix3>().unwrap())
}
