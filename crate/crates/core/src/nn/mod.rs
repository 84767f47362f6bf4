//! Layers shared by the generator, fusion network, and classifier.
//!
//! Each layer owns its parameters as plain arrays. Inference paths call
//! `forward`; training paths `bind` the layer onto a [`Tape`] and apply
//! the bound copy, then harvest gradients by the bound `Var` handles.

mod adam;

pub use adam::Adam;

use crate::rng::Rng;
use crate::tensor::{conv_out_size, BatchStats, Gradients, Tape, Var};
use ndarray::{Array1, Array2, Array4, ArrayD};
use rand_distr::{Distribution, Normal};

pub use crate::tensor::conv::{conv2d_forward, conv_transpose2d_forward, maxpool2_forward};
pub use crate::tensor::norm::{batch_statistics, batchnorm2d_forward};

fn normal_array2(shape: (usize, usize), std: f64, rng: &mut Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

fn normal_array4(shape: (usize, usize, usize, usize), std: f64, rng: &mut Rng) -> Array4<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    Array4::from_shape_simple_fn(shape, || dist.sample(rng))
}

// ---------------------------------------------------------------- linear

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f64>, // [in, out]
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        Linear {
            weight: normal_array2((inputs, outputs), std, rng),
            bias: Array1::zeros(outputs),
        }
    }

    /// All-zero layer; pre-activation outputs start at exactly zero.
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            w: tape.param(self.weight.clone().into_dyn()),
            b: tape.param(self.bias.clone().into_dyn()),
        }
    }

    /// Bind as frozen constants (no gradient).
    pub fn bind_const(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            w: tape.constant(self.weight.clone().into_dyn()),
            b: tape.constant(self.bias.clone().into_dyn()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let y = tape.matmul(x, self.w);
        tape.add_row_bias(y, self.b)
    }
}

// ------------------------------------------------------------------ conv

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array4<f64>, // [out, in, k, k]
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let fan_in = (cin * k * k) as f64;
        Conv2d {
            weight: normal_array4((cout, cin, k, k), (2.0 / fan_in).sqrt(), rng),
            bias: Array1::zeros(cout),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        conv2d_forward(x, &self.weight, &self.bias, self.stride, self.pad)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundConv2d {
        BoundConv2d {
            w: tape.param(self.weight.clone().into_dyn()),
            b: tape.param(self.bias.clone().into_dyn()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    /// Bind as frozen constants (no gradient).
    pub fn bind_const(&self, tape: &mut Tape) -> BoundConv2d {
        BoundConv2d {
            w: tape.constant(self.weight.clone().into_dyn()),
            b: tape.constant(self.bias.clone().into_dyn()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.dim().2;
        (
            conv_out_size(h, k, self.stride, self.pad),
            conv_out_size(w, k, self.stride, self.pad),
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv2d {
    pub w: Var,
    pub b: Var,
    stride: usize,
    pad: usize,
}

impl BoundConv2d {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        tape.conv2d(x, self.w, self.b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Array4<f64>, // [in, out, k, k]
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let fan_in = (cin * k * k) as f64;
        ConvTranspose2d {
            weight: normal_array4((cin, cout, k, k), (2.0 / fan_in).sqrt(), rng),
            bias: Array1::zeros(cout),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        conv_transpose2d_forward(x, &self.weight, &self.bias, self.stride, self.pad)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundConvTranspose2d {
        BoundConvTranspose2d {
            w: tape.param(self.weight.clone().into_dyn()),
            b: tape.param(self.bias.clone().into_dyn()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    /// Bind as frozen constants (no gradient).
    pub fn bind_const(&self, tape: &mut Tape) -> BoundConvTranspose2d {
        BoundConvTranspose2d {
            w: tape.constant(self.weight.clone().into_dyn()),
            b: tape.constant(self.bias.clone().into_dyn()),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConvTranspose2d {
    pub w: Var,
    pub b: Var,
    stride: usize,
    pad: usize,
}

impl BoundConvTranspose2d {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        tape.conv_transpose2d(x, self.w, self.b, self.stride, self.pad)
    }
}

// ------------------------------------------------------------ batch norm

/// Batch norm layer with running statistics for inference.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Inference forward with running statistics.
    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        batchnorm2d_forward(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.eps,
        )
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundBatchNorm2d {
        BoundBatchNorm2d {
            gamma: tape.param(self.gamma.clone().into_dyn()),
            beta: tape.param(self.beta.clone().into_dyn()),
            eps: self.eps,
        }
    }

    /// Fold one batch's statistics into the running averages.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + &stats.mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &stats.var * m;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl BoundBatchNorm2d {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> (Var, BatchStats) {
        tape.batchnorm2d(x, self.gamma, self.beta, self.eps)
    }
}

// --------------------------------------------------------------- helpers

/// Gradient for a bound var, as a dense vector (zeros when unreached).
pub fn grad_vec(grads: &Gradients, var: Var, len: usize) -> Vec<f64> {
    match grads.get(var) {
        Some(g) => g.iter().copied().collect(),
        None => vec![0.0; len],
    }
}

/// Flat view over any ndarray in standard layout.
pub fn flat_mut(a: &mut ArrayD<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter array must be contiguous")
}
