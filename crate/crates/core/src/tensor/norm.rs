//! Batch normalization over `[N,C,H,W]` with per-channel statistics.

use super::{Tape, Var};
use ndarray::{Array1, Array4, ArrayD, Ix1, Ix4};

/// Per-channel batch statistics from one normalization forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Biased variance (divisor N*H*W), as used inside the normalization.
    pub var: Array1<f64>,
}

/// Plain (non-tape) batch-norm forward with explicit statistics, used by
/// inference paths with running statistics.
pub fn batchnorm2d_forward(
    x: &Array4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    mean: &Array1<f64>,
    var: &Array1<f64>,
    eps: f64,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for ch in 0..c {
        let inv_std = 1.0 / (var[ch] + eps).sqrt();
        let (g, b, m) = (gamma[ch], beta[ch], mean[ch]);
        for i in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    out[[i, ch, y, xx]] = g * (x[[i, ch, y, xx]] - m) * inv_std + b;
                }
            }
        }
    }
    out
}

/// Per-channel mean and biased variance over `(N,H,W)`.
pub fn batch_statistics(x: &Array4<f64>) -> BatchStats {
    let (n, c, h, w) = x.dim();
    let count = (n * h * w) as f64;
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    s += x[[i, ch, y, xx]];
                }
            }
        }
        mean[ch] = s / count;
        let mut v = 0.0;
        for i in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let d = x[[i, ch, y, xx]] - mean[ch];
                    v += d * d;
                }
            }
        }
        var[ch] = v / count;
    }
    BatchStats { mean, var }
}

impl Tape {
    /// Batch normalization with batch statistics:
    /// `gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
    ///
    /// The backward pass differentiates through the statistics. Returns
    /// the output node and the statistics so callers can maintain running
    /// averages.
    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let x4 = self.value(x).view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let g1 = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let b1 = self.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let (n, c, h, w) = x4.dim();
        let count = (n * h * w) as f64;
        let stats = batch_statistics(&x4);
        let inv_std: Array1<f64> = stats.var.mapv(|v| 1.0 / (v + eps).sqrt());

        let mut xhat = Array4::<f64>::zeros((n, c, h, w));
        let mut value = Array4::<f64>::zeros((n, c, h, w));
        for ch in 0..c {
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let xh = (x4[[i, ch, y, xx]] - stats.mean[ch]) * inv_std[ch];
                        xhat[[i, ch, y, xx]] = xh;
                        value[[i, ch, y, xx]] = g1[ch] * xh + b1[ch];
                    }
                }
            }
        }

        let xhat_x = xhat.clone();
        let xhat_g = xhat;
        let inv_std_x = inv_std;
        let gamma_x = g1;
        let out = self.op(
            value.into_dyn(),
            vec![
                (
                    x,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                        let mut out = Array4::<f64>::zeros((n, c, h, w));
                        for ch in 0..c {
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for i in 0..n {
                                for y in 0..h {
                                    for xx in 0..w {
                                        sum_g += g4[[i, ch, y, xx]];
                                        sum_gx += g4[[i, ch, y, xx]] * xhat_x[[i, ch, y, xx]];
                                    }
                                }
                            }
                            let mean_g = sum_g / count;
                            let mean_gx = sum_gx / count;
                            let coeff = gamma_x[ch] * inv_std_x[ch];
                            for i in 0..n {
                                for y in 0..h {
                                    for xx in 0..w {
                                        out[[i, ch, y, xx]] = coeff
                                            * (g4[[i, ch, y, xx]]
                                                - mean_g
                                                - xhat_x[[i, ch, y, xx]] * mean_gx);
                                    }
                                }
                            }
                        }
                        out.into_dyn()
                    }),
                ),
                (
                    gamma,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                        let mut out = Array1::<f64>::zeros(c);
                        for ch in 0..c {
                            let mut s = 0.0;
                            for i in 0..n {
                                for y in 0..h {
                                    for xx in 0..w {
                                        s += g4[[i, ch, y, xx]] * xhat_g[[i, ch, y, xx]];
                                    }
                                }
                            }
                            out[ch] = s;
                        }
                        out.into_dyn()
                    }),
                ),
                (
                    beta,
                    Box::new(move |g: &ArrayD<f64>| {
                        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                        let mut out = Array1::<f64>::zeros(c);
                        for ch in 0..c {
                            let mut s = 0.0;
                            for i in 0..n {
                                for y in 0..h {
                                    for xx in 0..w {
                                        s += g4[[i, ch, y, xx]];
                                    }
                                }
                            }
                            out[ch] = s;
                        }
                        out.into_dyn()
                    }),
                ),
            ],
        );
        (out, stats)
    }
}
