//! Unsupervised training objective over images of warped events.
//!
//! Three parts, each evaluated at both reference times (volume start and
//! end): the sum of squared average timestamps, an inverse-sum penalty on
//! the exponential count image, and a Charbonnier smoothness prior on the
//! flow. Plain (`f64`) and tape versions share the splatting kernels from
//! [`crate::motion`].

use crate::autodiff::{Graph, Id, TapeOp, Tensor};
use crate::error::{Error, Result};
use crate::event::{EventVolume, Polarity};
use crate::motion::{exp_count_grid_g, exp_count_iwe, splat_grids_g, FlowField, AT_EPS};
use ndarray::{Ix3, IxDyn};
use std::rc::Rc;

/// Reference time at the volume start (first timestamp maps here).
pub const T_START: f64 = 0.0;
/// Reference time at the volume end (last timestamp maps here).
pub const T_END: f64 = 1.0;

/// Charbonnier exponent and epsilon.
pub const CHARB_GAMMA: f64 = 0.45;
pub const CHARB_EPS: f64 = 1e-3;

/// Weights and constants of the total objective.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Saturation factor of the exponential count image.
    pub alpha: f64,
    /// Weight of the exponential-count term.
    pub lambda1: f64,
    /// Weight of the smoothness term.
    pub lambda2: f64,
    pub charb_gamma: f64,
    pub charb_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            lambda1: 1.0,
            lambda2: 0.001,
            charb_gamma: CHARB_GAMMA,
            charb_eps: CHARB_EPS,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::Config(format!(
                "loss.alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config(
                "loss weights must be nonnegative".to_string(),
            ));
        }
        Ok(())
    }
}

/// Individual terms of the objective for one volume.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_at_t0: f64,
    pub l_at_t1: f64,
    pub l_ec_t0: f64,
    pub l_ec_t1: f64,
    pub l_smooth: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_at_t0,
            self.l_at_t1,
            self.l_ec_t0,
            self.l_ec_t1,
            self.l_smooth,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Elementwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.l_at_t0 += b.l_at_t0;
            acc.l_at_t1 += b.l_at_t1;
            acc.l_ec_t0 += b.l_ec_t0;
            acc.l_ec_t1 += b.l_ec_t1;
            acc.l_smooth += b.l_smooth;
            acc.total += b.total;
        }
        LossBreakdown {
            l_at_t0: acc.l_at_t0 / n,
            l_at_t1: acc.l_at_t1 / n,
            l_ec_t0: acc.l_ec_t0 / n,
            l_ec_t1: acc.l_ec_t1 / n,
            l_smooth: acc.l_smooth / n,
            total: acc.total / n,
        }
    }
}

/// Squared average-timestamp objective, weighted by the event mass each
/// pixel holds and normalized by the total splatted mass:
/// `sum_x den(x) * I_AT(x)^2 / sum_x den(x)` summed over both polarities.
///
/// The per-event normalization makes the objective invariant to how the
/// bilinear kernel divides a pixel's mass among neighbors at equal value,
/// so quantized events do not reward the un-warped (integer-position)
/// configuration, and by Jensen's inequality any timestamp-ordered smear
/// costs more than a compact cluster. The plain per-pixel sum does not
/// have these properties and its minimum sits away from the true flow on
/// quantized data.
pub fn loss_at(v: &EventVolume, u: &FlowField, t_ref: f64) -> Result<f64> {
    let w = crate::motion::warp_events(v, u, t_ref)?;
    let ones = vec![1.0; w.positions.len()];
    let (den_p, den_n) = crate::motion::splat_bilinear(&w, &ones);
    let times = w.times.clone();
    let (num_p, num_n) = crate::motion::splat_bilinear(&w, &times);
    let mut weighted = 0.0;
    let mut mass = 0.0;
    for (num, den) in [(&num_p, &den_p), (&num_n, &den_n)] {
        for (n, d) in num.iter().zip(den.iter()) {
            weighted += n * n / (d + AT_EPS);
            mass += d;
        }
    }
    Ok(weighted / (mass + AT_EPS))
}

/// Dispersion penalty on the exponential count image:
/// `N / sum(I_pos) + N / sum(I_neg) - 2`.
pub fn loss_ec(v: &EventVolume, u: &FlowField, t_ref: f64, alpha: f64) -> Result<f64> {
    let iwe = exp_count_iwe(v, u, t_ref, alpha)?;
    let n = v.sensor.pixels() as f64;
    Ok(n / iwe.pos.sum() + n / iwe.neg.sum() - 2.0)
}

/// Charbonnier smoothness over four neighbor directions (right, down,
/// down-right, down-left), averaged over valid pixel pairs.
pub fn loss_smooth(u: &FlowField) -> f64 {
    charbonnier_mean(
        &u.data.view().into_dyn().to_owned(),
        CHARB_GAMMA,
        CHARB_EPS,
    )
}

fn charbonnier_mean(u: &Tensor, gamma: f64, eps: f64) -> f64 {
    let v = u.view().into_dimensionality::<Ix3>().expect("flow rank 3");
    let (c, h, w) = v.dim();
    debug_assert_eq!(c, 2);
    let rho = |z: f64| (z * z + eps * eps).powf(gamma);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            for (dy, dx) in NEIGHBOR_OFFSETS {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                sum += rho(v[[0, y, x]] - v[[0, ny, nx]]) + rho(v[[1, y, x]] - v[[1, ny, nx]]);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

const NEIGHBOR_OFFSETS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

/// Full objective for one volume at full resolution.
pub fn loss_hmc(v: &EventVolume, u: &FlowField, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let l_at_t0 = loss_at(v, u, T_START)?;
    let l_at_t1 = loss_at(v, u, T_END)?;
    let l_ec_t0 = loss_ec(v, u, T_START, cfg.alpha)?;
    let l_ec_t1 = loss_ec(v, u, T_END, cfg.alpha)?;
    let l_smooth = charbonnier_mean(
        &u.data.view().into_dyn().to_owned(),
        cfg.charb_gamma,
        cfg.charb_eps,
    );
    let total =
        (l_at_t0 + l_at_t1) + cfg.lambda1 * (l_ec_t0 + l_ec_t1) + cfg.lambda2 * l_smooth;
    Ok(LossBreakdown {
        l_at_t0,
        l_at_t1,
        l_ec_t0,
        l_ec_t1,
        l_smooth,
        total,
    })
}

/// Charbonnier smoothness as a tape op (input: flow `(2,H,W)`).
pub struct CharbonnierOp {
    pub gamma: f64,
    pub eps: f64,
}

impl TapeOp for CharbonnierOp {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        Tensor::from_elem(
            IxDyn(&[1]),
            charbonnier_mean(inputs[0], self.gamma, self.eps),
        )
    }

    fn backward(&self, inputs: &[&Tensor], grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let u = inputs[0];
        let v = u.view().into_dimensionality::<Ix3>().unwrap();
        let (_, h, w) = v.dim();
        let gy = grad_out[IxDyn(&[0])];
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                for (dy, dx) in NEIGHBOR_OFFSETS {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize {
                        count += 1;
                    }
                }
            }
        }
        let mut g = Tensor::zeros(u.raw_dim());
        if count == 0 {
            return vec![Some(g)];
        }
        let scale = gy / count as f64;
        let drho = |z: f64| self.gamma * (z * z + self.eps * self.eps).powf(self.gamma - 1.0) * 2.0 * z;
        for y in 0..h {
            for x in 0..w {
                for (dy, dx) in NEIGHBOR_OFFSETS {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    for ch in 0..2 {
                        let d = drho(v[[ch, y, x]] - v[[ch, ny, nx]]) * scale;
                        g[[ch, y, x]] += d;
                        g[[ch, ny, nx]] -= d;
                    }
                }
            }
        }
        vec![Some(g)]
    }
}

/// Node handles for every term of the tape-built objective.
pub struct LossNodes {
    pub at_t0: Id,
    pub at_t1: Id,
    pub ec_t0: Id,
    pub ec_t1: Id,
    pub smooth: Id,
    pub total: Id,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_at_t0: g.scalar(self.at_t0),
            l_at_t1: g.scalar(self.at_t1),
            l_ec_t0: g.scalar(self.ec_t0),
            l_ec_t1: g.scalar(self.ec_t1),
            l_smooth: g.scalar(self.smooth),
            total: g.scalar(self.total),
        }
    }
}

fn loss_at_g(g: &mut Graph, u: Id, v: &EventVolume, t_ref: f64) -> Result<Id> {
    let mut weighted_parts = Vec::new();
    let mut mass_parts = Vec::new();
    for polarity in [Polarity::Pos, Polarity::Neg] {
        let (num, den) = splat_grids_g(g, u, v, polarity, t_ref)?;
        let den_eps = g.affine(den, 1.0, AT_EPS);
        let num_sq = g.mul(num, num);
        let ratio = g.div(num_sq, den_eps);
        weighted_parts.push(g.sum(ratio));
        mass_parts.push(g.sum(den));
    }
    let weighted = g.add(weighted_parts[0], weighted_parts[1]);
    let mass = g.add(mass_parts[0], mass_parts[1]);
    let mass_eps = g.affine(mass, 1.0, AT_EPS);
    Ok(g.div(weighted, mass_eps))
}

fn loss_ec_g(g: &mut Graph, u: Id, v: &EventVolume, t_ref: f64, alpha: f64) -> Result<Id> {
    let n = v.sensor.pixels() as f64;
    let ip = exp_count_grid_g(g, u, v, Polarity::Pos, t_ref, alpha)?;
    let in_ = exp_count_grid_g(g, u, v, Polarity::Neg, t_ref, alpha)?;
    let sp = g.sum(ip);
    let sn = g.sum(in_);
    let rp = g.recip_scale(sp, n);
    let rn = g.recip_scale(sn, n);
    let s = g.add(rp, rn);
    Ok(g.affine(s, 1.0, -2.0))
}

/// Build the full objective on the tape for one volume.
pub fn loss_hmc_g(g: &mut Graph, u: Id, v: &EventVolume, cfg: &LossConfig) -> Result<LossNodes> {
    cfg.validate()?;
    let at_t0 = loss_at_g(g, u, v, T_START)?;
    let at_t1 = loss_at_g(g, u, v, T_END)?;
    let ec_t0 = loss_ec_g(g, u, v, T_START, cfg.alpha)?;
    let ec_t1 = loss_ec_g(g, u, v, T_END, cfg.alpha)?;
    let smooth = g.custom(
        Rc::new(CharbonnierOp {
            gamma: cfg.charb_gamma,
            eps: cfg.charb_eps,
        }),
        &[u],
    );
    let at = g.add(at_t0, at_t1);
    let ec = g.add(ec_t0, ec_t1);
    let ec_w = g.scale(ec, cfg.lambda1);
    let sm_w = g.scale(smooth, cfg.lambda2);
    let t1 = g.add(at, ec_w);
    let total = g.add(t1, sm_w);
    Ok(LossNodes {
        at_t0,
        at_t1,
        ec_t0,
        ec_t1,
        smooth,
        total,
    })
}
