//! The assembled flow network: recurrent encoder, residual bottleneck and
//! flow-guided decoder behind one parameter set.

use crate::autodiff::{Graph, Id, ParamSet};
use crate::decoder::{decode_g, DecodeOut, DecoderConfig, DecoderParams, FlowPyramid};
use crate::encoder::{encode_g, EncoderConfig, EncoderParams, RecurrentState, StateIds};
use crate::error::Result;
use crate::event::CountImage;
use crate::motion::FlowField;
use ndarray::{Array3, Ix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Structural options of the network.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Layer-1 channel count; deeper layers double it.
    pub base_channels: usize,
    pub kernel: usize,
    pub use_st: bool,
    pub share_st_branches: bool,
    pub prior_flow_enabled: bool,
    pub share_refine_gru: bool,
    pub max_flow_frac: f64,
}

impl ModelConfig {
    /// Desk-scale profile: channels (8, 16, 32, 64).
    pub fn toy() -> Self {
        Self {
            base_channels: 8,
            kernel: 3,
            use_st: true,
            share_st_branches: false,
            prior_flow_enabled: true,
            share_refine_gru: false,
            max_flow_frac: 0.25,
        }
    }

    /// Full profile: channels (32, 64, 128, 256).
    pub fn full() -> Self {
        Self {
            base_channels: 32,
            ..Self::toy()
        }
    }

    pub fn channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.channels(),
            in_ch: 2,
            kernel: self.kernel,
            use_st: self.use_st,
            share_st_branches: self.share_st_branches,
        }
    }

    fn decoder_config(&self) -> DecoderConfig {
        let mut d = DecoderConfig::for_encoder(self.channels());
        d.kernel = self.kernel;
        d.max_flow_frac = self.max_flow_frac;
        d.prior_flow_enabled = self.prior_flow_enabled;
        d.share_refine_gru = self.share_refine_gru;
        d
    }
}

/// Network parameters plus their structural description.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub enc: EncoderParams,
    pub dec: DecoderParams,
}

impl Model {
    /// Deterministic initialization from a seed.
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let enc = EncoderParams::register(&mut params, cfg.encoder_config(), &mut rng);
        let dec = DecoderParams::register(
            &mut params,
            cfg.channels(),
            cfg.decoder_config(),
            &mut rng,
        );
        Self {
            cfg,
            params,
            enc,
            dec,
        }
    }

    /// Network input from a count image: the two polarity grids stacked
    /// and scaled by the volume's maximum count, so entries sit in [0,1].
    pub fn input_from_count(ci: &CountImage) -> Array3<f64> {
        let (h, w) = ci.pos.dim();
        let max = ci
            .pos
            .iter()
            .chain(ci.neg.iter())
            .cloned()
            .fold(0.0, f64::max)
            .max(1.0);
        let mut x = Array3::zeros((2, h, w));
        x.index_axis_mut(ndarray::Axis(0), 0)
            .assign(&(&ci.pos / max));
        x.index_axis_mut(ndarray::Axis(0), 1)
            .assign(&(&ci.neg / max));
        x
    }

    pub fn zero_state(&self, h: usize, w: usize) -> RecurrentState {
        RecurrentState::zeros(&self.enc.cfg, h, w)
    }

    /// One timestep on the tape: encoder, residual blocks, decoder.
    pub fn forward_g(
        &self,
        g: &mut Graph,
        x: Id,
        state: &StateIds,
        prior_px: Id,
    ) -> Result<(DecodeOut, StateIds)> {
        let shape = g.val(x).shape();
        let (h, w) = (shape[1], shape[2]);
        let encoded = encode_g(g, &self.params, &self.enc, x, state)?;
        let out = decode_g(
            g,
            &self.params,
            &self.dec,
            &encoded.feats,
            encoded.residual,
            prior_px,
            h,
            w,
        )?;
        Ok((out, encoded.state))
    }

    /// Plain inference step: input image, carried state, carried prior
    /// flow (pixel units). Returns the pyramid and the new state.
    pub fn forward(
        &self,
        input: &Array3<f64>,
        state: &RecurrentState,
        prior: &FlowField,
    ) -> Result<(FlowPyramid, RecurrentState)> {
        let mut g = Graph::new();
        let x = g.leaf(input.clone().into_dyn());
        let sids = StateIds::from_state(&mut g, state);
        let p = g.leaf(prior.data.clone().into_dyn());
        let (out, new_state) = self.forward_g(&mut g, x, &sids, p)?;
        let levels = out
            .pyramid
            .iter()
            .map(|&id| {
                FlowField::from_array(g.val(id).clone().into_dimensionality::<Ix3>().unwrap())
            })
            .collect();
        Ok((FlowPyramid { levels }, new_state.to_state(&g)))
    }
}
