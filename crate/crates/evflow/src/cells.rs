//! Recurrent memory cells: a convolutional GRU and a dual-memory variant
//! that fuses the layer's own hidden state with a routed top-layer memory
//! through an output gate.
//!
//! Gate convolutions are `k x k`, stride 1, zero padding `k/2`, with one
//! bias per gate. The fusion convolutions (`w_mm`, `w_ss`) are 1x1. The two
//! branches of the dual-memory cell use independent parameters unless
//! `share_branches` is set.

use crate::autodiff::{Graph, Id, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};
use ndarray::{Array3, Ix3, IxDyn};
use rand::Rng;

/// Uniform Kaiming-style init: `U(-s, s)` with `s = gain / sqrt(fan_in)`.
pub fn conv_kernel_init(
    rng: &mut impl Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
    gain: f64,
) -> Tensor {
    let s = gain / ((c_in * k * k) as f64).sqrt();
    Tensor::from_shape_fn(IxDyn(&[c_out, c_in, k, k]), |_| rng.gen_range(-s..s))
}

fn zeros_bias(c: usize) -> Tensor {
    Tensor::zeros(IxDyn(&[c]))
}

/// Parameters of one convolutional GRU cell.
#[derive(Debug, Clone)]
pub struct ConvGruParams {
    pub w_xr: ParamId,
    pub w_hr: ParamId,
    pub w_xz: ParamId,
    pub w_hz: ParamId,
    pub w_hh: ParamId,
    pub w_xh: ParamId,
    pub b_r: ParamId,
    pub b_z: ParamId,
    pub b_h: ParamId,
    pub in_ch: usize,
    pub hidden_ch: usize,
    pub kernel: usize,
}

impl ConvGruParams {
    pub fn register(
        ps: &mut ParamSet,
        prefix: &str,
        in_ch: usize,
        hidden_ch: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut kx = |name: &str, ci: usize| {
            let t = conv_kernel_init(rng, hidden_ch, ci, kernel, 1.0);
            ps.register(format!("{prefix}.{name}"), t)
        };
        let w_xr = kx("w_xr", in_ch);
        let w_hr = kx("w_hr", hidden_ch);
        let w_xz = kx("w_xz", in_ch);
        let w_hz = kx("w_hz", hidden_ch);
        let w_hh = kx("w_hh", hidden_ch);
        let w_xh = kx("w_xh", in_ch);
        let b_r = ps.register(format!("{prefix}.b_r"), zeros_bias(hidden_ch));
        let b_z = ps.register(format!("{prefix}.b_z"), zeros_bias(hidden_ch));
        let b_h = ps.register(format!("{prefix}.b_h"), zeros_bias(hidden_ch));
        Self {
            w_xr,
            w_hr,
            w_xz,
            w_hz,
            w_hh,
            w_xh,
            b_r,
            b_z,
            b_h,
            in_ch,
            hidden_ch,
            kernel,
        }
    }
}

/// Parameters of the dual-memory cell: two full GRU branches plus the
/// output gate and fusion convolutions.
#[derive(Debug, Clone)]
pub struct StConvGruParams {
    pub branch_s: ConvGruParams,
    pub branch_m: ConvGruParams,
    pub w_fo: ParamId,
    pub w_so: ParamId,
    pub w_mo: ParamId,
    pub w_mm: ParamId,
    pub w_ss: ParamId,
    pub b_o: ParamId,
    pub b_f: ParamId,
    pub share_branches: bool,
}

impl StConvGruParams {
    pub fn register(
        ps: &mut ParamSet,
        prefix: &str,
        in_ch: usize,
        hidden_ch: usize,
        kernel: usize,
        share_branches: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let branch_s =
            ConvGruParams::register(ps, &format!("{prefix}.s"), in_ch, hidden_ch, kernel, rng);
        let branch_m = if share_branches {
            branch_s.clone()
        } else {
            ConvGruParams::register(ps, &format!("{prefix}.m"), in_ch, hidden_ch, kernel, rng)
        };
        let w_fo = ps.register(
            format!("{prefix}.w_fo"),
            conv_kernel_init(rng, hidden_ch, in_ch, kernel, 1.0),
        );
        let w_so = ps.register(
            format!("{prefix}.w_so"),
            conv_kernel_init(rng, hidden_ch, hidden_ch, kernel, 1.0),
        );
        let w_mo = ps.register(
            format!("{prefix}.w_mo"),
            conv_kernel_init(rng, hidden_ch, hidden_ch, kernel, 1.0),
        );
        let w_mm = ps.register(
            format!("{prefix}.w_mm"),
            conv_kernel_init(rng, hidden_ch, hidden_ch, 1, 1.0),
        );
        let w_ss = ps.register(
            format!("{prefix}.w_ss"),
            conv_kernel_init(rng, hidden_ch, hidden_ch, 1, 1.0),
        );
        let b_o = ps.register(format!("{prefix}.b_o"), zeros_bias(hidden_ch));
        let b_f = ps.register(format!("{prefix}.b_f"), zeros_bias(hidden_ch));
        Self {
            branch_s,
            branch_m,
            w_fo,
            w_so,
            w_mo,
            w_mm,
            w_ss,
            b_o,
            b_f,
            share_branches,
        }
    }
}

fn check_spatial(context: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a[1] != b[1] {
        return Err(Error::ShapeMismatch {
            context: format!("{context} (height)"),
            expected: a[1].to_string(),
            got: b[1].to_string(),
        });
    }
    if a[2] != b[2] {
        return Err(Error::ShapeMismatch {
            context: format!("{context} (width)"),
            expected: a[2].to_string(),
            got: b[2].to_string(),
        });
    }
    Ok(())
}

fn check_channels(context: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch {
            context: format!("{context} (channels)"),
            expected: expected.to_string(),
            got: got.to_string(),
        });
    }
    Ok(())
}

fn validate_gru_inputs(p: &ConvGruParams, x: &[usize], h: &[usize]) -> Result<()> {
    check_channels("gru input", p.in_ch, x[0])?;
    check_channels("gru hidden", p.hidden_ch, h[0])?;
    check_spatial("gru input vs hidden", x, h)
}

/// One GRU step on the tape: reset and update gates, candidate state,
/// convex blend with the previous hidden state.
pub fn convgru_step_g(
    g: &mut Graph,
    ps: &ParamSet,
    p: &ConvGruParams,
    x: Id,
    h_prev: Id,
) -> Result<Id> {
    validate_gru_inputs(p, g.val(x).shape(), g.val(h_prev).shape())?;
    let pad = p.kernel / 2;
    let w_xr = g.param(ps, p.w_xr);
    let w_hr = g.param(ps, p.w_hr);
    let w_xz = g.param(ps, p.w_xz);
    let w_hz = g.param(ps, p.w_hz);
    let w_hh = g.param(ps, p.w_hh);
    let w_xh = g.param(ps, p.w_xh);
    let b_r = g.param(ps, p.b_r);
    let b_z = g.param(ps, p.b_z);
    let b_h = g.param(ps, p.b_h);

    let xr = g.conv2d(x, w_xr, Some(b_r), 1, pad);
    let hr = g.conv2d(h_prev, w_hr, None, 1, pad);
    let r_pre = g.add(xr, hr);
    let r = g.sigmoid(r_pre);

    let xz = g.conv2d(x, w_xz, Some(b_z), 1, pad);
    let hz = g.conv2d(h_prev, w_hz, None, 1, pad);
    let z_pre = g.add(xz, hz);
    let z = g.sigmoid(z_pre);

    let hh = g.conv2d(h_prev, w_hh, None, 1, pad);
    let gated = g.mul(r, hh);
    let xh = g.conv2d(x, w_xh, Some(b_h), 1, pad);
    let cand_pre = g.add(gated, xh);
    let cand = g.tanh(cand_pre);

    let one_minus_z = g.affine(z, -1.0, 1.0);
    let keep = g.mul(one_minus_z, h_prev);
    let update = g.mul(z, cand);
    Ok(g.add(keep, update))
}

/// One dual-memory step on the tape. Returns `(fused_output, s_new)`.
///
/// The first line is exactly [`convgru_step_g`] on the S branch; the M
/// branch runs the same cell over the routed memory, and an output gate
/// blends the two through a tanh fusion.
pub fn st_convgru_step_g(
    g: &mut Graph,
    ps: &ParamSet,
    p: &StConvGruParams,
    x: Id,
    s_prev: Id,
    m_prev: Id,
) -> Result<(Id, Id)> {
    let pad = p.branch_s.kernel / 2;
    let s_new = convgru_step_g(g, ps, &p.branch_s, x, s_prev)?;
    let m_bar = convgru_step_g(g, ps, &p.branch_m, x, m_prev)?;

    let w_fo = g.param(ps, p.w_fo);
    let w_so = g.param(ps, p.w_so);
    let w_mo = g.param(ps, p.w_mo);
    let b_o = g.param(ps, p.b_o);
    let fo = g.conv2d(x, w_fo, Some(b_o), 1, pad);
    let so = g.conv2d(s_new, w_so, None, 1, pad);
    let mo = g.conv2d(m_bar, w_mo, None, 1, pad);
    let o_pre1 = g.add(fo, so);
    let o_pre = g.add(o_pre1, mo);
    let o = g.sigmoid(o_pre);

    let w_mm = g.param(ps, p.w_mm);
    let w_ss = g.param(ps, p.w_ss);
    let b_f = g.param(ps, p.b_f);
    let mm = g.conv2d(m_bar, w_mm, Some(b_f), 1, 0);
    let ss = g.conv2d(s_new, w_ss, None, 1, 0);
    let fuse_pre = g.add(mm, ss);
    let fuse = g.tanh(fuse_pre);
    let f_out = g.mul(o, fuse);
    Ok((f_out, s_new))
}

/// Plain-array GRU step; thin wrapper over the tape builder.
pub fn convgru_step(
    ps: &ParamSet,
    p: &ConvGruParams,
    x: &Array3<f64>,
    h_prev: &Array3<f64>,
) -> Result<Array3<f64>> {
    let mut g = Graph::new();
    let xi = g.leaf(x.clone().into_dyn());
    let hi = g.leaf(h_prev.clone().into_dyn());
    let h = convgru_step_g(&mut g, ps, p, xi, hi)?;
    Ok(g.val(h).clone().into_dimensionality::<Ix3>().unwrap())
}

/// Plain-array dual-memory step. Returns `(fused_output, s_new)`.
pub fn st_convgru_step(
    ps: &ParamSet,
    p: &StConvGruParams,
    x: &Array3<f64>,
    s_prev: &Array3<f64>,
    m_prev: &Array3<f64>,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let mut g = Graph::new();
    let xi = g.leaf(x.clone().into_dyn());
    let si = g.leaf(s_prev.clone().into_dyn());
    let mi = g.leaf(m_prev.clone().into_dyn());
    let (f, s) = st_convgru_step_g(&mut g, ps, p, xi, si, mi)?;
    Ok((
        g.val(f).clone().into_dimensionality::<Ix3>().unwrap(),
        g.val(s).clone().into_dimensionality::<Ix3>().unwrap(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(ps: &mut ParamSet) {
        for i in 0..ps.len() {
            ps.value_mut(ParamId(i)).fill(0.0);
        }
    }

    fn rand3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    use rand::Rng as _;

    /// Direct per-pixel evaluation of the GRU equations, independent of the
    /// im2col convolution path.
    mod oracle {
        use ndarray::Array3;

        pub fn conv(
            x: &Array3<f64>,
            w: &ndarray::ArrayD<f64>,
            b: Option<&ndarray::ArrayD<f64>>,
            pad: usize,
        ) -> Array3<f64> {
            let (ci, h, wd) = x.dim();
            let k = w.shape()[2];
            let co = w.shape()[0];
            assert_eq!(w.shape()[1], ci);
            let mut y = Array3::zeros((co, h, wd));
            for oc in 0..co {
                for oy in 0..h {
                    for ox in 0..wd {
                        let mut acc = b.map_or(0.0, |b| b[[oc]]);
                        for ic in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                                        acc += w[[oc, ic, ky, kx]]
                                            * x[[ic, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[oc, oy, ox]] = acc;
                    }
                }
            }
            y
        }

        pub fn sigmoid(x: &Array3<f64>) -> Array3<f64> {
            x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
        }

        pub fn tanh(x: &Array3<f64>) -> Array3<f64> {
            x.mapv(f64::tanh)
        }
    }

    fn oracle_gru(
        ps: &ParamSet,
        p: &ConvGruParams,
        x: &Array3<f64>,
        h: &Array3<f64>,
    ) -> Array3<f64> {
        let pad = p.kernel / 2;
        let r = oracle::sigmoid(
            &(oracle::conv(x, ps.value(p.w_xr), Some(ps.value(p.b_r)), pad)
                + oracle::conv(h, ps.value(p.w_hr), None, pad)),
        );
        let z = oracle::sigmoid(
            &(oracle::conv(x, ps.value(p.w_xz), Some(ps.value(p.b_z)), pad)
                + oracle::conv(h, ps.value(p.w_hz), None, pad)),
        );
        let cand = oracle::tanh(
            &(r * &oracle::conv(h, ps.value(p.w_hh), None, pad)
                + oracle::conv(x, ps.value(p.w_xh), Some(ps.value(p.b_h)), pad)),
        );
        (1.0 - &z) * h + z * cand
    }

    #[test]
    fn zero_params_halve_hidden_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let p = ConvGruParams::register(&mut ps, "gru", 1, 1, 3, &mut rng);
        zero_all(&mut ps);
        let x = rand3(&mut rng, 1, 4, 4);
        let h0 = rand3(&mut rng, 1, 4, 4);
        let h1 = convgru_step(&ps, &p, &x, &h0).unwrap();
        let expect = h0.mapv(|v| 0.5 * v);
        assert!(
            h1.iter()
                .zip(expect.iter())
                .all(|(a, b)| (a - b).abs() < 1e-12)
        );
    }

    #[test]
    fn zero_params_zero_hidden_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let p = ConvGruParams::register(&mut ps, "gru", 2, 3, 3, &mut rng);
        zero_all(&mut ps);
        let x = rand3(&mut rng, 2, 4, 4);
        let h0 = Array3::zeros((3, 4, 4));
        let h1 = convgru_step(&ps, &p, &x, &h0).unwrap();
        assert!(h1.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gru_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let p = ConvGruParams::register(&mut ps, "gru", 1, 1, 3, &mut rng);
        let x = rand3(&mut rng, 1, 4, 4);
        let h0 = rand3(&mut rng, 1, 4, 4);
        let got = convgru_step(&ps, &p, &x, &h0).unwrap();
        let expect = oracle_gru(&ps, &p, &x, &h0);
        let max_err = got
            .iter()
            .zip(expect.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-6, "max abs error {max_err}");
    }

    #[test]
    fn st_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let p = StConvGruParams::register(&mut ps, "st", 2, 2, 3, false, &mut rng);
        let x = rand3(&mut rng, 2, 4, 4);
        let s0 = rand3(&mut rng, 2, 4, 4);
        let m0 = rand3(&mut rng, 2, 4, 4);
        let (f, s_new) = st_convgru_step(&ps, &p, &x, &s0, &m0).unwrap();

        let s_expect = oracle_gru(&ps, &p.branch_s, &x, &s0);
        let m_bar = oracle_gru(&ps, &p.branch_m, &x, &m0);
        let o = oracle::sigmoid(
            &(oracle::conv(&x, ps.value(p.w_fo), Some(ps.value(p.b_o)), 1)
                + oracle::conv(&s_expect, ps.value(p.w_so), None, 1)
                + oracle::conv(&m_bar, ps.value(p.w_mo), None, 1)),
        );
        let fuse = oracle::tanh(
            &(oracle::conv(&m_bar, ps.value(p.w_mm), Some(ps.value(p.b_f)), 0)
                + oracle::conv(&s_expect, ps.value(p.w_ss), None, 0)),
        );
        let f_expect = o * fuse;

        let max_f = f
            .iter()
            .zip(f_expect.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let max_s = s_new
            .iter()
            .zip(s_expect.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_f <= 1e-6 && max_s <= 1e-6, "errors {max_f}, {max_s}");
    }

    #[test]
    fn st_s_branch_equals_standalone_gru_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let p = StConvGruParams::register(&mut ps, "st", 3, 2, 3, false, &mut rng);
        let x = rand3(&mut rng, 3, 4, 4);
        let s0 = rand3(&mut rng, 2, 4, 4);
        let m0 = rand3(&mut rng, 2, 4, 4);
        let (_, s_new) = st_convgru_step(&ps, &p, &x, &s0, &m0).unwrap();
        let direct = convgru_step(&ps, &p.branch_s, &x, &s0).unwrap();
        assert_eq!(s_new, direct);
    }

    #[test]
    fn zero_fusion_kernels_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamSet::new();
        let p = StConvGruParams::register(&mut ps, "st", 2, 2, 3, false, &mut rng);
        for id in [p.w_fo, p.w_so, p.w_mo, p.w_mm, p.w_ss, p.b_o, p.b_f] {
            ps.value_mut(id).fill(0.0);
        }
        let x = rand3(&mut rng, 2, 4, 4);
        let s0 = rand3(&mut rng, 2, 4, 4);
        let m0 = rand3(&mut rng, 2, 4, 4);
        let (f, _) = st_convgru_step(&ps, &p, &x, &s0, &m0).unwrap();
        // o = 0.5 everywhere, tanh(0) = 0 -> output identically zero.
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fused_output_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        let p = StConvGruParams::register(&mut ps, "st", 2, 4, 3, false, &mut rng);
        // Push activations toward the bounds, short of f64 saturation
        // (tanh collapses to exactly 1.0 near 19).
        for i in 0..ps.len() {
            ps.value_mut(ParamId(i)).mapv_inplace(|v| v * 3.0);
        }
        let x = rand3(&mut rng, 2, 4, 4).mapv(|v| v * 3.0);
        let s0 = rand3(&mut rng, 4, 4, 4);
        let m0 = rand3(&mut rng, 4, 4, 4);
        let (f, _) = st_convgru_step(&ps, &p, &x, &s0, &m0).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1.0));
        assert!(f.iter().any(|v| v.abs() > 0.2));
    }

    #[test]
    fn gate_limits_via_saturated_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamSet::new();
        let p = ConvGruParams::register(&mut ps, "gru", 1, 1, 3, &mut rng);
        let x = rand3(&mut rng, 1, 4, 4);
        let h0 = rand3(&mut rng, 1, 4, 4);

        // z -> 1: h_new approaches the candidate state.
        ps.value_mut(p.b_z).fill(60.0);
        let h_cand_path = convgru_step(&ps, &p, &x, &h0).unwrap();
        let pad = p.kernel / 2;
        let r = oracle::sigmoid(
            &(oracle::conv(&x, ps.value(p.w_xr), Some(ps.value(p.b_r)), pad)
                + oracle::conv(&h0, ps.value(p.w_hr), None, pad)),
        );
        let cand = oracle::tanh(
            &(r * &oracle::conv(&h0, ps.value(p.w_hh), None, pad)
                + oracle::conv(&x, ps.value(p.w_xh), Some(ps.value(p.b_h)), pad)),
        );
        let err = h_cand_path
            .iter()
            .zip(cand.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "z=1 limit broken: {err}");

        // z -> 0: h_new stays at h_prev.
        ps.value_mut(p.b_z).fill(-60.0);
        let h_keep = convgru_step(&ps, &p, &x, &h0).unwrap();
        let err = h_keep
            .iter()
            .zip(h0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "z=0 limit broken: {err}");
    }

    #[test]
    fn magnitude_never_exceeds_unit_or_previous_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let p = ConvGruParams::register(&mut ps, "gru", 2, 3, 3, &mut rng);
        for i in 0..ps.len() {
            ps.value_mut(ParamId(i)).mapv_inplace(|v| v * 15.0);
        }
        let x = rand3(&mut rng, 2, 5, 5).mapv(|v| v * 8.0);
        let h0 = rand3(&mut rng, 3, 5, 5).mapv(|v| v * 2.0);
        let h1 = convgru_step(&ps, &p, &x, &h0).unwrap();
        let bound = h0.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(h1.iter().all(|v| v.abs() <= bound + 1e-12));
    }

    #[test]
    fn shape_mismatch_names_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ps = ParamSet::new();
        let p = ConvGruParams::register(&mut ps, "gru", 1, 1, 3, &mut rng);
        let x = rand3(&mut rng, 1, 4, 4);
        let h_bad = rand3(&mut rng, 1, 4, 5);
        let err = convgru_step(&ps, &p, &x, &h_bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("width"), "unexpected message: {msg}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let p = StConvGruParams::register(&mut ps, "st", 1, 1, 3, false, &mut rng);
        let x = rand3(&mut rng, 1, 4, 4);
        let s0 = rand3(&mut rng, 1, 4, 4);
        let m0 = rand3(&mut rng, 1, 4, 4);

        let eval = |ps: &ParamSet| -> f64 {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone().into_dyn());
            let si = g.leaf(s0.clone().into_dyn());
            let mi = g.leaf(m0.clone().into_dyn());
            let (f, s) = st_convgru_step_g(&mut g, ps, &p, xi, si, mi).unwrap();
            let sf = g.sum(f);
            let ss = g.sum_sq(s);
            let tot = g.add(sf, ss);
            g.scalar(tot)
        };

        let mut g = Graph::new();
        let xi = g.leaf(x.clone().into_dyn());
        let si = g.leaf(s0.clone().into_dyn());
        let mi = g.leaf(m0.clone().into_dyn());
        let (f, s) = st_convgru_step_g(&mut g, &ps, &p, xi, si, mi).unwrap();
        let sf = g.sum(f);
        let ss = g.sum_sq(s);
        let tot = g.add(sf, ss);
        let grads = g.backward(tot).by_param(&ps);

        for idx in 0..ps.len() {
            let pid = ParamId(idx);
            let base = ps.value(pid).clone();
            let fd = check::central_diff(&base, 1e-4, |w| {
                let mut ps2 = ps.clone();
                *ps2.value_mut(pid) = w.clone();
                eval(&ps2)
            });
            let rel = check::rel_err(&grads[idx], &fd, 1e-8);
            assert!(
                rel <= 1e-4,
                "param {} gradient relative error {rel}",
                ps.name(pid)
            );
        }
    }
}
