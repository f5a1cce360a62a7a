//! im2col/GEMM convolution kernels used by the tape.

use ndarray::{Array1, Array2, ArrayD, Ix3, Ix4, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Output spatial size of a convolution.
pub fn conv2d_shape(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    (oh, ow)
}

/// Unfold `(C,H,W)` into a `(C*kh*kw, OH*OW)` matrix of patches.
pub fn im2col(
    x: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let shape = x.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let x_std;
    let xs: &[f64] = match x.as_slice() {
        Some(s) => s,
        None => {
            x_std = x.as_standard_layout().to_owned();
            x_std.as_slice().unwrap()
        }
    };
    let mut col = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    let cs = col.as_slice_mut().unwrap();
    let plane = h * w;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = ci * plane + iy as usize * w;
                    let dst_row = row + oy * ow;
                    if stride == 1 {
                        // Valid ox range: 0 <= ox + kx - pad < w
                        let ox_lo = pad.saturating_sub(kx);
                        let ox_hi = (w + pad - kx).min(ow);
                        if ox_lo < ox_hi {
                            let ix0 = ox_lo + kx - pad;
                            cs[dst_row + ox_lo..dst_row + ox_hi]
                                .copy_from_slice(&xs[src_row + ix0..src_row + ix0 + ox_hi - ox_lo]);
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[dst_row + ox] = xs[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold a `(C*kh*kw, OH*OW)` gradient matrix back onto the input grid.
pub fn col2im(
    gcol: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor {
    let mut gx = Tensor::zeros(IxDyn(&[c, h, w]));
    let gxs = gx.as_slice_mut().unwrap();
    let gs = gcol.as_slice().unwrap();
    let plane = h * w;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = ci * plane + iy as usize * w;
                    let src_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            gxs[dst_row + ix as usize] += gs[src_row + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let xv = x.view().into_dimensionality::<Ix3>().expect("conv input rank 3");
    let wv = w.view().into_dimensionality::<Ix4>().expect("conv kernel rank 4");
    let (c_in, h, wdt) = xv.dim();
    let (c_out, wc_in, kh, kw) = wv.dim();
    assert_eq!(c_in, wc_in, "conv channel mismatch");
    let (oh, ow) = conv2d_shape(h, wdt, kh, stride, pad);

    let col = im2col(x, kh, kw, stride, pad, oh, ow);
    let w2 = wv
        .to_shape((c_out, c_in * kh * kw))
        .expect("kernel reshape");
    let mut y2 = w2.dot(&col); // (C_out, OH*OW)
    if let Some(b) = b {
        for (mut row, &bias) in y2.rows_mut().into_iter().zip(b.iter()) {
            row += bias;
        }
    }
    y2.into_shape_with_order((c_out, oh, ow))
        .unwrap()
        .into_dyn()
}

/// Gradients of a convolution w.r.t. input, kernel and (optionally) bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    has_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let xv = x.view().into_dimensionality::<Ix3>().unwrap();
    let wv = w.view().into_dimensionality::<Ix4>().unwrap();
    let (c_in, h, wdt) = xv.dim();
    let (c_out, _, kh, kw) = wv.dim();
    let (oh, ow) = (gy.shape()[1], gy.shape()[2]);

    let gy_std;
    let gy2 = {
        let gyv = match gy.as_slice() {
            Some(_) => gy.view(),
            None => {
                gy_std = gy.as_standard_layout().to_owned();
                gy_std.view()
            }
        };
        gyv.into_shape_with_order((c_out, oh * ow)).unwrap().to_owned()
    };

    // dW = gY . col(x)^T  (col recomputed instead of cached: cheaper in memory)
    let col = im2col(x, kh, kw, stride, pad, oh, ow);
    let gw2 = gy2.dot(&col.t());
    let gw = gw2
        .into_shape_with_order((c_out, c_in, kh, kw))
        .unwrap()
        .into_dyn();

    // dX = fold(W^T . gY)
    let w2 = wv.to_shape((c_out, c_in * kh * kw)).unwrap();
    let gcol = w2.t().dot(&gy2);
    let gx = col2im(&gcol, c_in, h, wdt, kh, kw, stride, pad, oh, ow);

    let gb = has_bias.then(|| {
        let mut b = Array1::<f64>::zeros(c_out);
        for (i, mut_b) in b.iter_mut().enumerate() {
            *mut_b = gy2.row(i).sum();
        }
        b.into_dyn()
    });
    (gx, gw, gb)
}
