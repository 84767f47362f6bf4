//! Feature extractors for the perceptual loss term.
//!
//! The full-scale method uses a large ImageNet-trained extractor; here the
//! extractor is an injected dependency so desk-scale runs can use a small
//! frozen random network and tests can use the identity map.

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::rng::Rng;
use crate::tensor::{Tape, Var};
use ndarray::{Array4, ArrayD, Axis};

/// Produces an ordered list of feature maps for an image. `features_tape`
/// must compute the same maps as `features` so gradients of the
/// perceptual term flow into the generated image.
pub trait FeatureExtractor {
    /// Feature maps for one image, each `[C,H,W]`-shaped (dyn).
    fn features(&self, image: &ImageTensor) -> Vec<ArrayD<f64>>;

    /// Same maps for a `[1,3,H,W]` image node on a tape.
    fn features_tape(&self, tape: &mut Tape, image: Var) -> Vec<Var>;
}

/// Returns the image itself as its only feature map.
#[derive(Debug, Clone, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, image: &ImageTensor) -> Vec<ArrayD<f64>> {
        vec![image.to_chw().into_dyn()]
    }

    fn features_tape(&self, _tape: &mut Tape, image: Var) -> Vec<Var> {
        vec![image]
    }
}

/// Small frozen convolutional extractor: three stride-2 conv/ReLU stages,
/// random weights fixed at construction.
#[derive(Debug, Clone)]
pub struct ToyPerceptualNet {
    convs: Vec<Conv2d>,
}

impl ToyPerceptualNet {
    pub fn new(rng: &mut Rng) -> Self {
        ToyPerceptualNet {
            convs: vec![
                Conv2d::new(3, 8, 3, 2, 1, rng),
                Conv2d::new(8, 16, 3, 2, 1, rng),
                Conv2d::new(16, 16, 3, 2, 1, rng),
            ],
        }
    }

    fn batched(image: &ImageTensor) -> Array4<f64> {
        let chw = image.to_chw();
        let (c, h, w) = chw.dim();
        chw.into_shape_with_order((1, c, h, w)).unwrap()
    }
}

impl FeatureExtractor for ToyPerceptualNet {
    fn features(&self, image: &ImageTensor) -> Vec<ArrayD<f64>> {
        let mut cur = Self::batched(image);
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            cur = conv.forward(&cur).mapv(|v| v.max(0.0));
            out.push(cur.index_axis(Axis(0), 0).to_owned().into_dyn());
        }
        out
    }

    fn features_tape(&self, tape: &mut Tape, image: Var) -> Vec<Var> {
        let mut cur = image;
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let bound = conv.bind_const(tape);
            cur = bound.apply(tape, cur);
            cur = tape.relu(cur);
            out.push(cur);
        }
        out
    }
}

/// Sum over layers of the mean squared feature difference.
pub fn perceptual_distance(
    a: &ImageTensor,
    b: &ImageTensor,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let fa = extractor.features(a);
    let fb = extractor.features(b);
    if fa.is_empty() || fb.is_empty() {
        return Err(Error::data("feature extractor returned no feature maps"));
    }
    if fa.len() != fb.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} feature maps", fa.len()),
            got: format!("{}", fb.len()),
        });
    }
    let mut total = 0.0;
    for (la, lb) in fa.iter().zip(fb.iter()) {
        if la.shape() != lb.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", la.shape()),
                got: format!("{:?}", lb.shape()),
            });
        }
        let n = la.len() as f64;
        let mut s = 0.0;
        for (&x, &y) in la.iter().zip(lb.iter()) {
            s += (x - y) * (x - y);
        }
        total += s / n;
    }
    Ok(total)
}
