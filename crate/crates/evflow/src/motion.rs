//! Event warping and images of warped events (IWEs).
//!
//! Events are transported along a per-pixel flow to a reference time and
//! accumulated with a bilinear kernel. Three IWE flavors are built on the
//! same splatting kernel: plain counts, per-pixel average timestamps, and
//! exponentially saturated counts. Splatting is differentiable with respect
//! to the flow; the tape op lives here so the loss module can ride on it.

use crate::autodiff::{Graph, Id, TapeOp, Tensor};
use crate::error::{Error, Result};
use crate::event::{EventVolume, Polarity, SensorSize};
use ndarray::{Array2, Array3, IxDyn};
use std::rc::Rc;

/// Stabilizer added to the average-timestamp denominator; pixels that
/// receive no mass read as 0.
pub const AT_EPS: f64 = 1e-9;

/// Dense flow field, `(2, H, W)` with channel 0 horizontal (`u`) and
/// channel 1 vertical (`v`), in pixels per volume interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub data: Array3<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Array3::zeros((2, h, w)),
        }
    }

    pub fn uniform(h: usize, w: usize, u: f64, v: f64) -> Self {
        let mut f = Self::zeros(h, w);
        f.data.index_axis_mut(ndarray::Axis(0), 0).fill(u);
        f.data.index_axis_mut(ndarray::Axis(0), 1).fill(v);
        f
    }

    pub fn from_array(data: Array3<f64>) -> Self {
        assert_eq!(data.dim().0, 2, "flow field needs 2 channels");
        Self { data }
    }

    pub fn sensor(&self) -> SensorSize {
        let (_, h, w) = self.data.dim();
        SensorSize::new(h, w)
    }

    /// Flow vector at an integer pixel.
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        (self.data[[0, y, x]], self.data[[1, y, x]])
    }
}

/// Events transported to a reference time; positions are continuous.
#[derive(Debug, Clone)]
pub struct WarpedEvents {
    pub positions: Vec<[f64; 2]>,
    pub times: Vec<f64>,
    pub polarities: Vec<Polarity>,
    pub t_ref: f64,
    pub sensor: SensorSize,
}

/// Which accumulation a grid holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IweKind {
    PlainCount,
    AvgTimestamp,
    ExpCount,
}

/// Image of warped events, one grid per polarity.
#[derive(Debug, Clone)]
pub struct Iwe {
    pub pos: Array2<f64>,
    pub neg: Array2<f64>,
    pub kind: IweKind,
}

impl Iwe {
    /// Polarity-summed image.
    pub fn total(&self) -> Array2<f64> {
        &self.pos + &self.neg
    }
}

/// Transport each event to `t_ref` along the flow sampled at its source
/// pixel: `x' = x + (t_ref - t) * u(x)`.
///
/// The volume must be timestamp-normalized; `t_ref` is 0 (volume start) or
/// 1 (volume end).
pub fn warp_events(v: &EventVolume, u: &FlowField, t_ref: f64) -> Result<WarpedEvents> {
    if !v.is_normalized() {
        return Err(Error::UnnormalizedVolume);
    }
    let mut positions = Vec::with_capacity(v.len());
    let mut times = Vec::with_capacity(v.len());
    let mut polarities = Vec::with_capacity(v.len());
    for e in v.events() {
        let (fu, fv) = u.at(e.y as usize, e.x as usize);
        let dt = t_ref - e.t;
        positions.push([e.x as f64 + dt * fu, e.y as f64 + dt * fv]);
        times.push(e.t);
        polarities.push(e.p);
    }
    Ok(WarpedEvents {
        positions,
        times,
        polarities,
        t_ref,
        sensor: v.sensor,
    })
}

/// Bilinear deposit of `weight` at continuous position `(x, y)`.
/// Mass falling outside the grid is discarded.
#[inline]
fn deposit(grid: &mut Array2<f64>, x: f64, y: f64, weight: f64) {
    let (h, w) = grid.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    for (iy, fy) in [(y0, 1.0 - (y - y0)), (y0 + 1.0, y - y0)] {
        if fy <= 0.0 || iy < 0.0 || iy >= h as f64 {
            continue;
        }
        for (ix, fx) in [(x0, 1.0 - (x - x0)), (x0 + 1.0, x - x0)] {
            if fx <= 0.0 || ix < 0.0 || ix >= w as f64 {
                continue;
            }
            grid[[iy as usize, ix as usize]] += weight * fy * fx;
        }
    }
}

/// Splat per-event weights onto per-polarity grids with the bilinear kernel.
pub fn splat_bilinear(w: &WarpedEvents, weights: &[f64]) -> (Array2<f64>, Array2<f64>) {
    assert_eq!(weights.len(), w.positions.len(), "one weight per event");
    let SensorSize { h, w: wd } = w.sensor;
    let mut pos = Array2::zeros((h, wd));
    let mut neg = Array2::zeros((h, wd));
    for ((p, pol), &wt) in w.positions.iter().zip(&w.polarities).zip(weights) {
        let grid = match pol {
            Polarity::Pos => &mut pos,
            Polarity::Neg => &mut neg,
        };
        deposit(grid, p[0], p[1], wt);
    }
    (pos, neg)
}

/// Plain count IWE: unit weight per event.
pub fn plain_count_iwe(v: &EventVolume, u: &FlowField, t_ref: f64) -> Result<Iwe> {
    let w = warp_events(v, u, t_ref)?;
    let ones = vec![1.0; w.positions.len()];
    let (pos, neg) = splat_bilinear(&w, &ones);
    Ok(Iwe {
        pos,
        neg,
        kind: IweKind::PlainCount,
    })
}

/// Average-timestamp IWE: per-pixel mean of warped event timestamps,
/// with an `AT_EPS`-stabilized denominator so empty pixels read 0.
pub fn avg_timestamp_iwe(v: &EventVolume, u: &FlowField, t_ref: f64) -> Result<Iwe> {
    let w = warp_events(v, u, t_ref)?;
    let ones = vec![1.0; w.positions.len()];
    let (den_p, den_n) = splat_bilinear(&w, &ones);
    let times = w.times.clone();
    let (num_p, num_n) = splat_bilinear(&w, &times);
    let ratio = |num: Array2<f64>, den: Array2<f64>| num / (den + AT_EPS);
    Ok(Iwe {
        pos: ratio(num_p, den_p),
        neg: ratio(num_n, den_n),
        kind: IweKind::AvgTimestamp,
    })
}

/// Exponential count IWE: `exp(-alpha * count)` per pixel.
pub fn exp_count_iwe(v: &EventVolume, u: &FlowField, t_ref: f64, alpha: f64) -> Result<Iwe> {
    if alpha <= 0.0 {
        return Err(Error::Config(format!(
            "saturation factor must be positive, got {alpha}"
        )));
    }
    let counts = plain_count_iwe(v, u, t_ref)?;
    Ok(Iwe {
        pos: counts.pos.mapv(|c| (-alpha * c).exp()),
        neg: counts.neg.mapv(|c| (-alpha * c).exp()),
        kind: IweKind::ExpCount,
    })
}

/// Per-event weighting used by the differentiable splat.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplatWeight {
    One,
    Timestamp,
}

/// Differentiable splat of one polarity's events; input is the flow
/// `(2,H,W)`, output the accumulated `(H,W)` grid.
pub struct SplatOp {
    /// `(x, y, t)` per event, source pixel integer-valued.
    events: Rc<Vec<(usize, usize, f64)>>,
    t_ref: f64,
    weight: SplatWeight,
    h: usize,
    w: usize,
}

impl SplatOp {
    pub fn new(
        v: &EventVolume,
        polarity: Polarity,
        t_ref: f64,
        weight: SplatWeight,
    ) -> Result<Self> {
        if !v.is_normalized() {
            return Err(Error::UnnormalizedVolume);
        }
        let events = v
            .events()
            .iter()
            .filter(|e| e.p == polarity)
            .map(|e| (e.x as usize, e.y as usize, e.t))
            .collect();
        Ok(Self {
            events: Rc::new(events),
            t_ref,
            weight,
            h: v.sensor.h,
            w: v.sensor.w,
        })
    }

    fn event_weight(&self, t: f64) -> f64 {
        match self.weight {
            SplatWeight::One => 1.0,
            SplatWeight::Timestamp => t,
        }
    }
}

impl TapeOp for SplatOp {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let u = inputs[0];
        let mut grid = Array2::zeros((self.h, self.w));
        for &(x, y, t) in self.events.iter() {
            let dt = self.t_ref - t;
            let px = x as f64 + dt * u[[0, y, x]];
            let py = y as f64 + dt * u[[1, y, x]];
            deposit(&mut grid, px, py, self.event_weight(t));
        }
        grid.into_dyn()
    }

    fn backward(&self, inputs: &[&Tensor], grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let u = inputs[0];
        let mut gu = Tensor::zeros(IxDyn(&[2, self.h, self.w]));
        for &(x, y, t) in self.events.iter() {
            let dt = self.t_ref - t;
            let wt = self.event_weight(t);
            let px = x as f64 + dt * u[[0, y, x]];
            let py = y as f64 + dt * u[[1, y, x]];
            let x0 = px.floor();
            let y0 = py.floor();
            let mut dx_acc = 0.0;
            let mut dy_acc = 0.0;
            for (iy, fy, dfy) in [(y0, 1.0 - (py - y0), -1.0), (y0 + 1.0, py - y0, 1.0)] {
                if fy <= 0.0 || iy < 0.0 || iy >= self.h as f64 {
                    continue;
                }
                for (ix, fx, dfx) in [(x0, 1.0 - (px - x0), -1.0), (x0 + 1.0, px - x0, 1.0)] {
                    if fx <= 0.0 || ix < 0.0 || ix >= self.w as f64 {
                        continue;
                    }
                    let g = grad_out[[iy as usize, ix as usize]];
                    dx_acc += g * dfx * fy;
                    dy_acc += g * fx * dfy;
                }
            }
            gu[[0, y, x]] += wt * dt * dx_acc;
            gu[[1, y, x]] += wt * dt * dy_acc;
        }
        vec![Some(gu)]
    }
}

/// Differentiable timestamp and count splats of one polarity:
/// `(numerator, denominator)` grids for average-timestamp images.
pub fn splat_grids_g(
    g: &mut Graph,
    u: Id,
    v: &EventVolume,
    polarity: Polarity,
    t_ref: f64,
) -> Result<(Id, Id)> {
    let den_op = Rc::new(SplatOp::new(v, polarity, t_ref, SplatWeight::One)?);
    let num_op = Rc::new(SplatOp::new(v, polarity, t_ref, SplatWeight::Timestamp)?);
    let den = g.custom(den_op, &[u]);
    let num = g.custom(num_op, &[u]);
    Ok((num, den))
}

/// Tape version of [`avg_timestamp_iwe`] for one polarity.
pub fn avg_timestamp_grid_g(
    g: &mut Graph,
    u: Id,
    v: &EventVolume,
    polarity: Polarity,
    t_ref: f64,
) -> Result<Id> {
    let (num, den) = splat_grids_g(g, u, v, polarity, t_ref)?;
    let den_eps = g.affine(den, 1.0, AT_EPS);
    Ok(g.div(num, den_eps))
}

/// Tape version of [`exp_count_iwe`] for one polarity.
pub fn exp_count_grid_g(
    g: &mut Graph,
    u: Id,
    v: &EventVolume,
    polarity: Polarity,
    t_ref: f64,
    alpha: f64,
) -> Result<Id> {
    if alpha <= 0.0 {
        return Err(Error::Config(format!(
            "saturation factor must be positive, got {alpha}"
        )));
    }
    let count_op = Rc::new(SplatOp::new(v, polarity, t_ref, SplatWeight::One)?);
    let count = g.custom(count_op, &[u]);
    let scaled = g.scale(count, -alpha);
    Ok(g.exp(scaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check;
    use crate::event::{Event, EventVolume};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm_volume(events: Vec<(u16, u16, f64, i8)>, h: usize, w: usize) -> EventVolume {
        let evs = events
            .into_iter()
            .map(|(x, y, t, p)| Event {
                x,
                y,
                t,
                p: Polarity::from_value(p).unwrap(),
            })
            .collect();
        let v = EventVolume::new(evs, 0.0, 1.0, SensorSize::new(h, w)).unwrap();
        crate::event::normalize_timestamps(&v).unwrap()
    }

    #[test]
    fn warp_moves_event_toward_reference() {
        let v = norm_volume(vec![(2, 3, 0.5, 1)], 8, 8);
        let mut u = FlowField::zeros(8, 8);
        u.data[[0, 3, 2]] = 2.0;
        u.data[[1, 3, 2]] = -2.0;
        let w1 = warp_events(&v, &u, 1.0).unwrap();
        assert_eq!(w1.positions[0], [3.0, 2.0]);
        let w0 = warp_events(&v, &u, 0.0).unwrap();
        assert_eq!(w0.positions[0], [1.0, 4.0]);
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let v = norm_volume(vec![(2, 3, 0.25, 1), (5, 1, 0.75, -1)], 8, 8);
        let u = FlowField::zeros(8, 8);
        for t_ref in [0.0, 1.0] {
            let w = warp_events(&v, &u, t_ref).unwrap();
            assert_eq!(w.positions, vec![[2.0, 3.0], [5.0, 1.0]]);
        }
    }

    #[test]
    fn warp_rejects_unnormalized_volume() {
        let v = EventVolume::new(
            vec![Event {
                x: 0,
                y: 0,
                t: 0.5,
                p: Polarity::Pos,
            }],
            0.0,
            1.0,
            SensorSize::new(2, 2),
        )
        .unwrap();
        let err = warp_events(&v, &FlowField::zeros(2, 2), 1.0).unwrap_err();
        assert!(matches!(err, Error::UnnormalizedVolume));
    }

    #[test]
    fn splat_halves_between_pixels() {
        let w = WarpedEvents {
            positions: vec![[1.5, 2.0]],
            times: vec![0.3],
            polarities: vec![Polarity::Pos],
            t_ref: 1.0,
            sensor: SensorSize::new(4, 4),
        };
        let (pos, _) = splat_bilinear(&w, &[1.0]);
        assert!((pos[[2, 1]] - 0.5).abs() < 1e-12);
        assert!((pos[[2, 2]] - 0.5).abs() < 1e-12);
        assert!((pos.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn splat_integer_position_single_pixel() {
        let w = WarpedEvents {
            positions: vec![[3.0, 3.0]],
            times: vec![0.3],
            polarities: vec![Polarity::Pos],
            t_ref: 1.0,
            sensor: SensorSize::new(5, 5),
        };
        let (pos, _) = splat_bilinear(&w, &[1.0]);
        assert_eq!(pos[[3, 3]], 1.0);
        assert_eq!(pos.sum(), 1.0);
    }

    #[test]
    fn splat_boundary_mass_is_dropped() {
        let w = WarpedEvents {
            positions: vec![[-0.5, 0.0]],
            times: vec![0.3],
            polarities: vec![Polarity::Pos],
            t_ref: 1.0,
            sensor: SensorSize::new(3, 3),
        };
        let (pos, _) = splat_bilinear(&w, &[1.0]);
        assert!((pos[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((pos.sum() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn avg_timestamp_mean_and_empty_pixels() {
        let v = norm_volume(vec![(1, 1, 0.2, 1), (1, 1, 0.6, 1)], 3, 3);
        let iwe = avg_timestamp_iwe(&v, &FlowField::zeros(3, 3), 1.0).unwrap();
        assert!((iwe.pos[[1, 1]] - 0.4).abs() < 1e-6);
        assert_eq!(iwe.pos[[0, 0]], 0.0);
        assert_eq!(iwe.neg.sum(), 0.0);
    }

    #[test]
    fn avg_timestamp_single_late_event() {
        let v = norm_volume(vec![(2, 2, 1.0, 1)], 4, 4);
        let iwe = avg_timestamp_iwe(&v, &FlowField::zeros(4, 4), 1.0).unwrap();
        assert!((iwe.pos[[2, 2]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn exp_count_values() {
        let v = norm_volume(vec![(1, 1, 0.2, 1), (1, 1, 0.6, 1)], 2, 2);
        let iwe = exp_count_iwe(&v, &FlowField::zeros(2, 2), 1.0, 0.6).unwrap();
        assert!((iwe.pos[[1, 1]] - (-1.2f64).exp()).abs() < 1e-12);
        assert!((iwe.pos[[1, 1]] - 0.3012).abs() < 1e-4);
        assert_eq!(iwe.pos[[0, 0]], 1.0);
        assert!(exp_count_iwe(&v, &FlowField::zeros(2, 2), 1.0, 0.0).is_err());
    }

    #[test]
    fn gt_flow_sharpens_count_iwe() {
        use crate::synth::{generate, Emission, Particle, SceneSpec};
        // Two edge-like segments of collinear particles sharing one motion.
        let mut particles = Vec::new();
        for j in 0..5 {
            particles.push(Particle {
                x0: 6.0,
                y0: 6.0 + j as f64,
                vx: 55.0,
                vy: 15.0,
                polarity: Polarity::Pos,
            });
            particles.push(Particle {
                x0: 10.0,
                y0: 18.0 + j as f64,
                vx: 55.0,
                vy: 15.0,
                polarity: Polarity::Neg,
            });
        }
        let spec = SceneSpec {
            sensor: SensorSize::new(32, 32),
            particles,
            duration: 0.2,
            event_rate: 800.0,
            contrast_threshold: 0.2,
            emission: Emission::Poisson,
            alternate_polarity: false,
            subpixel_positions: false,
            seed: 5,
        };
        let scene = generate(&spec).unwrap();
        let vols = crate::event::slice_stream(&scene.events, 0.1, spec.sensor).unwrap();
        let v = crate::event::normalize_timestamps(&vols[1]).unwrap();
        let gt = scene.ground_truth(vols[1].t_start, 0.1);

        let at_gt = plain_count_iwe(&v, &gt.flow, 1.0).unwrap().total();
        let at_zero = plain_count_iwe(&v, &FlowField::zeros(32, 32), 1.0)
            .unwrap()
            .total();
        let max_gt = at_gt.iter().cloned().fold(0.0, f64::max);
        let max_zero = at_zero.iter().cloned().fold(0.0, f64::max);
        let support_gt = at_gt.iter().filter(|&&v| v > 1e-9).count();
        let support_zero = at_zero.iter().filter(|&&v| v > 1e-9).count();
        assert!(
            max_gt > max_zero,
            "gt max {max_gt} should exceed zero-flow max {max_zero}"
        );
        assert!(
            support_gt < support_zero,
            "gt support {support_gt} should be below zero-flow support {support_zero}"
        );
    }

    /// Gradient of scalar reductions of both IWE flavors w.r.t. the flow,
    /// against central finite differences.
    #[test]
    fn splat_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (h, w) = (8, 8);
        let mut events = Vec::new();
        for _ in 0..20 {
            let x = rng.gen_range(1..7u16);
            let y = rng.gen_range(1..7u16);
            // Timestamps away from 0/1 keep warped positions off kernel kinks.
            let t = rng.gen_range(0.13..0.87);
            let p = if rng.gen_bool(0.5) { 1 } else { -1 };
            events.push((x, y, t, p));
        }
        events.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap());
        let v = norm_volume(events, h, w);
        let u0 = Tensor::from_shape_fn(IxDyn(&[2, h, w]), |_| rng.gen_range(-0.8..0.8) + 0.17);

        for t_ref in [0.0, 1.0] {
            // Weighted sums expose every grid cell's gradient.
            let mask_p = Array2::from_shape_fn((h, w), |_| rng.gen_range(-1.0..1.0)).into_dyn();
            let mask_n = Array2::from_shape_fn((h, w), |_| rng.gen_range(-1.0..1.0)).into_dyn();

            let eval = |u: &Tensor| -> f64 {
                let mut g = Graph::new();
                let ui = g.leaf(u.clone());
                let at_p = avg_timestamp_grid_g(&mut g, ui, &v, Polarity::Pos, t_ref).unwrap();
                let ec_n = exp_count_grid_g(&mut g, ui, &v, Polarity::Neg, t_ref, 0.6).unwrap();
                let mp = g.leaf(mask_p.clone());
                let mn = g.leaf(mask_n.clone());
                let wp = g.mul(at_p, mp);
                let wn = g.mul(ec_n, mn);
                let sp = g.sum(wp);
                let sn = g.sum(wn);
                let tot = g.add(sp, sn);
                g.scalar(tot)
            };

            let mut g = Graph::new();
            let ui = g.leaf(u0.clone());
            let at_p = avg_timestamp_grid_g(&mut g, ui, &v, Polarity::Pos, t_ref).unwrap();
            let ec_n = exp_count_grid_g(&mut g, ui, &v, Polarity::Neg, t_ref, 0.6).unwrap();
            let mp = g.leaf(mask_p.clone());
            let mn = g.leaf(mask_n.clone());
            let wp = g.mul(at_p, mp);
            let wn = g.mul(ec_n, mn);
            let sp = g.sum(wp);
            let sn = g.sum(wn);
            let tot = g.add(sp, sn);
            let grads = g.backward(tot);

            let fd = check::central_diff(&u0, 1e-4, eval);
            let rel = check::rel_err(grads.of_node(ui).unwrap(), &fd, 1e-12);
            assert!(rel <= 1e-4, "t_ref {t_ref}: relative error {rel}");
        }
    }

    #[test]
    fn tape_forward_matches_plain_iwes() {
        let v = norm_volume(
            vec![(1, 1, 0.2, 1), (2, 3, 0.4, -1), (5, 5, 0.7, 1)],
            8,
            8,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u_arr = Array3::from_shape_fn((2, 8, 8), |_| rng.gen_range(-1.5..1.5));
        let u = FlowField::from_array(u_arr.clone());

        let plain_at = avg_timestamp_iwe(&v, &u, 1.0).unwrap();
        let plain_ec = exp_count_iwe(&v, &u, 0.0, 0.6).unwrap();

        let mut g = Graph::new();
        let ui = g.leaf(u_arr.into_dyn());
        let at_p = avg_timestamp_grid_g(&mut g, ui, &v, Polarity::Pos, 1.0).unwrap();
        let ec_n = exp_count_grid_g(&mut g, ui, &v, Polarity::Neg, 0.0, 0.6).unwrap();
        let at_diff = (&plain_at.pos.clone().into_dyn() - g.val(at_p))
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        let ec_diff = (&plain_ec.neg.clone().into_dyn() - g.val(ec_n))
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(at_diff < 1e-12 && ec_diff < 1e-12);
    }

    proptest! {
        /// Fully in-bounds splats conserve total mass.
        #[test]
        fn splat_conserves_interior_mass(
            pts in proptest::collection::vec((1.0f64..6.0, 1.0f64..6.0, 0.1f64..2.0), 1..30),
        ) {
            let n = pts.len();
            let w = WarpedEvents {
                positions: pts.iter().map(|&(x, y, _)| [x, y]).collect(),
                times: vec![0.5; n],
                polarities: vec![Polarity::Pos; n],
                t_ref: 1.0,
                sensor: SensorSize::new(8, 8),
            };
            let weights: Vec<f64> = pts.iter().map(|&(_, _, w)| w).collect();
            let (pos, _) = splat_bilinear(&w, &weights);
            let total: f64 = weights.iter().sum();
            prop_assert!((pos.sum() - total).abs() < 1e-9);
        }

        /// Average-timestamp entries stay inside [0,1] for normalized volumes.
        #[test]
        fn avg_timestamp_bounded(
            evs in proptest::collection::vec((0u16..8, 0u16..8, 0.0f64..1.0), 1..40),
            flow in proptest::collection::vec(-3.0f64..3.0, 2),
        ) {
            let mut evs = evs;
            evs.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap());
            let events: Vec<(u16, u16, f64, i8)> = evs
                .iter()
                .enumerate()
                .map(|(i, &(x, y, t))| (x, y, t, if i % 2 == 0 { 1 } else { -1 }))
                .collect();
            let v = norm_volume(events, 8, 8);
            let u = FlowField::uniform(8, 8, flow[0], flow[1]);
            for t_ref in [0.0, 1.0] {
                let iwe = avg_timestamp_iwe(&v, &u, t_ref).unwrap();
                for g in [&iwe.pos, &iwe.neg] {
                    for &val in g.iter() {
                        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&val));
                    }
                }
            }
        }
    }
}
