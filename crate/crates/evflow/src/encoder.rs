//! Recurrent encoder: four stride-2 encoder modules with convolutional GRU
//! memories, followed by two residual blocks.
//!
//! The first module uses the dual-memory cell: it receives the previous
//! timestep's deepest hidden state, upsampled and channel-mapped, as its
//! second memory, so fine layers keep access to what the coarse layer saw.
//! Modules two through four are standard convolutional GRUs. Hidden states
//! start at zero when a sequence begins.

use crate::autodiff::{Graph, Id, ParamSet, Tensor};
use crate::cells::{convgru_step_g, st_convgru_step_g, ConvGruParams, StConvGruParams};
use crate::error::{Error, Result};
use crate::layers::ConvLayer;
use ndarray::{Array3, Ix3};
use rand::Rng;

/// Channel plan and cell options for the encoder.
#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Hidden channels per layer; spatial size halves at each layer.
    pub channels: [usize; 4],
    pub in_ch: usize,
    pub kernel: usize,
    /// Use the dual-memory cell in layer 1 (plain GRU when false).
    pub use_st: bool,
    /// Share parameters between the S and M branches of the dual cell.
    pub share_st_branches: bool,
}

impl EncoderConfig {
    pub fn with_channels(channels: [usize; 4]) -> Self {
        Self {
            channels,
            in_ch: 2,
            kernel: 3,
            use_st: true,
            share_st_branches: false,
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::with_channels([32, 64, 128, 256])
    }
}

/// First-layer memory cell, dual or plain.
#[derive(Debug, Clone)]
pub enum Layer1Params {
    St(StConvGruParams),
    Plain(ConvGruParams),
}

/// All encoder parameters.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub down: Vec<ConvLayer>,
    pub layer1: Layer1Params,
    /// GRUs of layers 2..4.
    pub grus: Vec<ConvGruParams>,
    /// Maps the deepest hidden state onto layer-1 memory channels
    /// (bias-free so a zero state stays an exactly-zero memory).
    pub up_m: Option<ConvLayer>,
    /// Two residual blocks, two convolutions each.
    pub rb: [[ConvLayer; 2]; 2],
}

impl EncoderParams {
    pub fn register(ps: &mut ParamSet, cfg: EncoderConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let k = cfg.kernel;
        let mut down = Vec::new();
        let ins = [cfg.in_ch, c[0], c[1], c[2]];
        for l in 0..4 {
            down.push(ConvLayer::register(
                ps,
                &format!("enc.down{}", l + 1),
                ins[l],
                c[l],
                k,
                2,
                true,
                1.0,
                rng,
            ));
        }
        let layer1 = if cfg.use_st {
            Layer1Params::St(StConvGruParams::register(
                ps,
                "enc.l1",
                c[0],
                c[0],
                k,
                cfg.share_st_branches,
                rng,
            ))
        } else {
            Layer1Params::Plain(ConvGruParams::register(ps, "enc.l1", c[0], c[0], k, rng))
        };
        let grus = (1..4)
            .map(|l| ConvGruParams::register(ps, &format!("enc.l{}", l + 1), c[l], c[l], k, rng))
            .collect();
        let up_m = cfg.use_st.then(|| {
            ConvLayer::register(ps, "enc.up_m", c[3], c[0], k, 1, false, 1.0, rng)
        });
        let rb = [
            [
                ConvLayer::register(ps, "enc.rb1.conv1", c[3], c[3], k, 1, true, 1.0, rng),
                ConvLayer::register(ps, "enc.rb1.conv2", c[3], c[3], k, 1, true, 1.0, rng),
            ],
            [
                ConvLayer::register(ps, "enc.rb2.conv1", c[3], c[3], k, 1, true, 1.0, rng),
                ConvLayer::register(ps, "enc.rb2.conv2", c[3], c[3], k, 1, true, 1.0, rng),
            ],
        ];
        Self {
            cfg,
            down,
            layer1,
            grus,
            up_m,
            rb,
        }
    }
}

/// Per-layer hidden states carried across timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub s: [Array3<f64>; 4],
}

impl RecurrentState {
    /// Zero state for a `(h, w)` input; the reset point between sequences.
    pub fn zeros(cfg: &EncoderConfig, h: usize, w: usize) -> Self {
        let c = cfg.channels;
        Self {
            s: [
                Array3::zeros((c[0], h / 2, w / 2)),
                Array3::zeros((c[1], h / 4, w / 4)),
                Array3::zeros((c[2], h / 8, w / 8)),
                Array3::zeros((c[3], h / 16, w / 16)),
            ],
        }
    }
}

/// Graph-node view of the state, used to carry gradients across timesteps
/// within a sequence.
#[derive(Debug, Clone, Copy)]
pub struct StateIds {
    pub s: [Id; 4],
}

impl StateIds {
    pub fn from_state(g: &mut Graph, state: &RecurrentState) -> Self {
        let s = [
            g.leaf(state.s[0].clone().into_dyn()),
            g.leaf(state.s[1].clone().into_dyn()),
            g.leaf(state.s[2].clone().into_dyn()),
            g.leaf(state.s[3].clone().into_dyn()),
        ];
        Self { s }
    }

    pub fn to_state(&self, g: &Graph) -> RecurrentState {
        let take =
            |id: Id| -> Array3<f64> { g.val(id).clone().into_dimensionality::<Ix3>().unwrap() };
        RecurrentState {
            s: [take(self.s[0]), take(self.s[1]), take(self.s[2]), take(self.s[3])],
        }
    }
}

/// Encoder outputs for one timestep.
pub struct EncodedFeatures {
    /// Multi-scale features, `feats[l]` at `H/2^(l+1)`.
    pub feats: [Id; 4],
    /// Residual-refined deepest features.
    pub residual: Id,
    pub state: StateIds,
}

fn check_input(cfg: &EncoderConfig, shape: &[usize]) -> Result<(usize, usize)> {
    if shape[0] != cfg.in_ch {
        return Err(Error::ShapeMismatch {
            context: "encoder input (channels)".to_string(),
            expected: cfg.in_ch.to_string(),
            got: shape[0].to_string(),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Config(format!(
            "encoder input size {h}x{w} must be divisible by 16"
        )));
    }
    Ok((h, w))
}

fn residual_block(
    g: &mut Graph,
    ps: &ParamSet,
    block: &[ConvLayer; 2],
    x: Id,
) -> Result<Id> {
    let inner = block[0].apply_relu(g, ps, x)?;
    let out = block[1].apply(g, ps, inner)?;
    Ok(g.add(x, out))
}

/// One encoder step on the tape.
pub fn encode_g(
    g: &mut Graph,
    ps: &ParamSet,
    enc: &EncoderParams,
    x: Id,
    state: &StateIds,
) -> Result<EncodedFeatures> {
    let (h, w) = check_input(&enc.cfg, g.val(x).shape())?;
    for (l, s) in state.s.iter().enumerate() {
        let expect = [enc.cfg.channels[l], h >> (l + 1), w >> (l + 1)];
        let got = g.val(*s).shape();
        if got != expect {
            return Err(Error::ShapeMismatch {
                context: format!("encoder state S{}", l + 1),
                expected: format!("{expect:?}"),
                got: format!("{got:?}"),
            });
        }
    }

    // Layer 1: downsample, then the recurrent cell with the routed memory.
    let x1 = enc.down[0].apply_relu(g, ps, x)?;
    let (f1, s1) = match &enc.layer1 {
        Layer1Params::St(p) => {
            let up_m = enc.up_m.as_ref().expect("dual cell requires up_m");
            let m_in = up_m.apply_resize_relu(g, ps, state.s[3], h / 2, w / 2)?;
            st_convgru_step_g(g, ps, p, x1, state.s[0], m_in)?
        }
        Layer1Params::Plain(p) => {
            let s1 = convgru_step_g(g, ps, p, x1, state.s[0])?;
            (s1, s1)
        }
    };

    // Layers 2..4: plain GRU ladder.
    let mut feats = [f1; 4];
    let mut new_s = [s1; 4];
    let mut prev = f1;
    for l in 1..4 {
        let xd = enc.down[l].apply_relu(g, ps, prev)?;
        let s = convgru_step_g(g, ps, &enc.grus[l - 1], xd, state.s[l])?;
        feats[l] = s;
        new_s[l] = s;
        prev = s;
    }

    let r1 = residual_block(g, ps, &enc.rb[0], feats[3])?;
    let residual = residual_block(g, ps, &enc.rb[1], r1)?;

    Ok(EncodedFeatures {
        feats,
        residual,
        state: StateIds { s: new_s },
    })
}

/// Plain-array encoder step.
pub fn encode(
    ps: &ParamSet,
    enc: &EncoderParams,
    input: &Array3<f64>,
    state: &RecurrentState,
) -> Result<(Vec<Array3<f64>>, Array3<f64>, RecurrentState)> {
    let mut g = Graph::new();
    let x = g.leaf(input.clone().into_dyn());
    let sids = StateIds::from_state(&mut g, state);
    let out = encode_g(&mut g, ps, enc, x, &sids)?;
    let take = |id: Id| -> Array3<f64> {
        g.val(id).clone().into_dimensionality::<Ix3>().unwrap()
    };
    let feats = out.feats.iter().map(|&f| take(f)).collect();
    let residual = take(out.residual);
    let state = out.state.to_state(&g);
    Ok((feats, residual, state))
}

/// Zero tensor helper used by tests and the decoder.
pub fn zeros3(c: usize, h: usize, w: usize) -> Tensor {
    Array3::<f64>::zeros((c, h, w)).into_dyn()
}
