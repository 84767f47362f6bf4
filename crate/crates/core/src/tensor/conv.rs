//! Convolution, transposed convolution, and max pooling, via im2col.

use super::{Tape, Var};
use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, Axis, Ix1, Ix4};
use rayon::prelude::*;

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `[C,H,W]` into `[(C*kh*kw), OH*OW]` patches.
fn im2col(
    img: ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = img.dim();
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ch * kh + i) * kw + j;
                for oy in 0..oh {
                    let y = (oy * stride + i) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * stride + j) as isize - pad as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = img[[ch, y as usize, x as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: fold patch columns back into `[C,H,W]`,
/// accumulating overlaps.
fn col2im(
    cols: ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let mut img = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ch * kh + i) * kw + j;
                for oy in 0..oh {
                    let y = (oy * stride + i) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * stride + j) as isize - pad as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        img[[ch, y as usize, x as usize]] += cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    img
}

/// Plain (non-tape) conv2d forward used by inference paths.
pub fn conv2d_forward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: &ndarray::Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, _cin, h, wd) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    debug_assert_eq!(x.dim().1, cin_w);
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(wd, kw, stride, pad);
    let wmat = w
        .view()
        .into_shape_with_order((cout, cin_w * kh * kw))
        .unwrap()
        .to_owned();
    let outputs: Vec<Array3<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let cols = im2col(x.index_axis(Axis(0), i), kh, kw, stride, pad);
            let mut y = wmat.dot(&cols);
            for (mut row, &bias) in y.rows_mut().into_iter().zip(b.iter()) {
                row += bias;
            }
            y.into_shape_with_order((cout, oh, ow)).unwrap()
        })
        .collect();
    let mut out = Array4::<f64>::zeros((n, cout, oh, ow));
    for (i, y) in outputs.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&y);
    }
    out
}

/// Plain transposed-conv forward used by inference paths.
pub fn conv_transpose2d_forward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: &ndarray::Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, cin, h_in, w_in) = x.dim();
    let (cin_w, cout, kh, kw) = w.dim();
    debug_assert_eq!(cin, cin_w);
    let h_out = (h_in - 1) * stride + kh - 2 * pad;
    let w_out = (w_in - 1) * stride + kw - 2 * pad;
    let wmat = w
        .view()
        .into_shape_with_order((cin, cout * kh * kw))
        .unwrap()
        .to_owned();
    let outputs: Vec<Array3<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x_flat = x
                .index_axis(Axis(0), i)
                .into_shape_with_order((cin, h_in * w_in))
                .unwrap()
                .to_owned();
            let cols = wmat.t().dot(&x_flat);
            let mut y = col2im(cols.view(), cout, h_out, w_out, kh, kw, stride, pad);
            for (mut ch, &bias) in y.outer_iter_mut().zip(b.iter()) {
                ch += bias;
            }
            y
        })
        .collect();
    let mut out = Array4::<f64>::zeros((n, cout, h_out, w_out));
    for (i, y) in outputs.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&y);
    }
    out
}

/// Plain 2x2/stride-2 max pool used by inference paths.
pub fn maxpool2_forward(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 requires even spatial size");
    let mut out = Array4::<f64>::zeros((n, c, h / 2, w / 2));
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(x[[i, ch, 2 * oy + dy, 2 * ox + dx]]);
                        }
                    }
                    out[[i, ch, oy, ox]] = best;
                }
            }
        }
    }
    out
}

impl Tape {
    /// `conv2d(x[N,Cin,H,W], w[Cout,Cin,kh,kw]) + b[Cout]`
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let x_val = self.value_rc(x);
        let w_val = self.value_rc(w);
        let x4 = x_val.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let w4 = w_val.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let b1 = self.value(b).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let value = conv2d_forward(&x4, &w4, &b1, stride, pad).into_dyn();
        let (n, cin, h, wd) = x4.dim();
        let (cout, _, kh, kw) = w4.dim();
        let xa = x_val.clone();
        let wa = w_val.clone();
        self.op(
            value,
            vec![
                (
                    x,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                        let w4 = wa.view().into_dimensionality::<Ix4>().unwrap();
                        let wmat = w4
                            .into_shape_with_order((cout, cin * kh * kw))
                            .unwrap()
                            .to_owned();
                        let parts: Vec<Array3<f64>> = (0..n)
                            .into_par_iter()
                            .map(|i| {
                                let gy = g4
                                    .index_axis(Axis(0), i)
                                    .into_shape_with_order((cout, g4.dim().2 * g4.dim().3))
                                    .unwrap()
                                    .to_owned();
                                let dcols = wmat.t().dot(&gy);
                                col2im(dcols.view(), cin, h, wd, kh, kw, stride, pad)
                            })
                            .collect();
                        let mut out = Array4::<f64>::zeros((n, cin, h, wd));
                        for (i, p) in parts.into_iter().enumerate() {
                            out.index_axis_mut(Axis(0), i).assign(&p);
                        }
                        out.into_dyn()
                    }),
                ),
                (
                    w,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                        let x4 = xa.view().into_dimensionality::<Ix4>().unwrap();
                        let parts: Vec<Array2<f64>> = (0..n)
                            .into_par_iter()
                            .map(|i| {
                                let cols = im2col(x4.index_axis(Axis(0), i), kh, kw, stride, pad);
                                let gy = g4
                                    .index_axis(Axis(0), i)
                                    .into_shape_with_order((cout, g4.dim().2 * g4.dim().3))
                                    .unwrap()
                                    .to_owned();
                                gy.dot(&cols.t())
                            })
                            .collect();
                        let mut acc = Array2::<f64>::zeros((cout, cin * kh * kw));
                        for p in parts {
                            acc += &p;
                        }
                        acc.into_shape_with_order((cout, cin, kh, kw))
                            .unwrap()
                            .into_dyn()
                    }),
                ),
                (
                    b,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                        let mut out = ndarray::Array1::<f64>::zeros(g4.dim().1);
                        for i in 0..g4.dim().0 {
                            for ch in 0..g4.dim().1 {
                                out[ch] += g4.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum();
                            }
                        }
                        out.into_dyn()
                    }),
                ),
            ],
        )
    }

    /// `conv_transpose2d(x[N,Cin,H,W], w[Cin,Cout,kh,kw]) + b[Cout]`
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let x_val = self.value_rc(x);
        let w_val = self.value_rc(w);
        let x4 = x_val.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let w4 = w_val.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let b1 = self.value(b).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let value = conv_transpose2d_forward(&x4, &w4, &b1, stride, pad).into_dyn();
        let (n, cin, h_in, w_in) = x4.dim();
        let (_, cout, kh, kw) = w4.dim();
        let xa = x_val.clone();
        let wa = w_val.clone();
        self.op(
            value,
            vec![
                (
                    x,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                        let w4 = wa.view().into_dimensionality::<Ix4>().unwrap();
                        let wmat = w4
                            .into_shape_with_order((cin, cout * kh * kw))
                            .unwrap()
                            .to_owned();
                        let parts: Vec<Array2<f64>> = (0..n)
                            .into_par_iter()
                            .map(|i| {
                                let dcols =
                                    im2col(g4.index_axis(Axis(0), i), kh, kw, stride, pad);
                                wmat.dot(&dcols)
                            })
                            .collect();
                        let mut out = Array4::<f64>::zeros((n, cin, h_in, w_in));
                        for (i, p) in parts.into_iter().enumerate() {
                            out.index_axis_mut(Axis(0), i)
                                .assign(&p.into_shape_with_order((cin, h_in, w_in)).unwrap());
                        }
                        out.into_dyn()
                    }),
                ),
                (
                    w,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                        let x4 = xa.view().into_dimensionality::<Ix4>().unwrap();
                        let parts: Vec<Array2<f64>> = (0..n)
                            .into_par_iter()
                            .map(|i| {
                                let dcols =
                                    im2col(g4.index_axis(Axis(0), i), kh, kw, stride, pad);
                                let x_flat = x4
                                    .index_axis(Axis(0), i)
                                    .into_shape_with_order((cin, h_in * w_in))
                                    .unwrap()
                                    .to_owned();
                                x_flat.dot(&dcols.t())
                            })
                            .collect();
                        let mut acc = Array2::<f64>::zeros((cin, cout * kh * kw));
                        for p in parts {
                            acc += &p;
                        }
                        acc.into_shape_with_order((cin, cout, kh, kw))
                            .unwrap()
                            .into_dyn()
                    }),
                ),
                (
                    b,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                        let mut out = ndarray::Array1::<f64>::zeros(g4.dim().1);
                        for i in 0..g4.dim().0 {
                            for ch in 0..g4.dim().1 {
                                out[ch] += g4.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum();
                            }
                        }
                        out.into_dyn()
                    }),
                ),
            ],
        )
    }

    /// 2x2 max pool with stride 2. Ties pick the first maximum in row-major
    /// scan order, so the backward pass is deterministic.
    pub fn maxpool2(&mut self, x: Var) -> Var {
        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x4.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 requires even spatial size");
        let (oh, ow) = (h / 2, w / 2);
        let mut value = Array4::<f64>::zeros((n, c, oh, ow));
        let mut argmax = vec![0u8; n * c * oh * ow];
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_k = 0u8;
                        for (k, (dy, dx)) in
                            [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate()
                        {
                            let v = x4[[i, ch, 2 * oy + dy, 2 * ox + dx]];
                            if v > best {
                                best = v;
                                best_k = k as u8;
                            }
                        }
                        value[[i, ch, oy, ox]] = best;
                        argmax[((i * c + ch) * oh + oy) * ow + ox] = best_k;
                    }
                }
            }
        }
        self.op(
            value.into_dyn(),
            vec![(
                x,
                Box::new(move |g: &ArrayD<f64>| {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let mut out = Array4::<f64>::zeros((n, c, h, w));
                    for i in 0..n {
                        for ch in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let k = argmax[((i * c + ch) * oh + oy) * ow + ox] as usize;
                                    let (dy, dx) = [(0, 0), (0, 1), (1, 0), (1, 1)][k];
                                    out[[i, ch, 2 * oy + dy, 2 * ox + dx]] += g4[[i, ch, oy, ox]];
                                }
                            }
                        }
                    }
                    out.into_dyn()
                }),
            )],
        )
    }
}
