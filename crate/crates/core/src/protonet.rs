//! Prototype classifier: embedding backbone, class prototypes, and the
//! distance-softmax episode loss.

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, BoundBatchNorm2d, BoundConv2d, Conv2d};
use crate::rng::Rng;
use crate::tensor::{BatchStats, Tape, Var};
use ndarray::{Array1, Array2, Array4, Axis};

/// Probabilities are floored at this constant before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Conv4Block {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

/// Four-layer convolutional backbone: conv3x3 / batch norm / ReLU /
/// 2x2 max pool per block, flattened at the end.
#[derive(Debug, Clone)]
pub struct Conv4 {
    pub blocks: Vec<Conv4Block>,
    pub width: usize,
}

impl Conv4 {
    pub fn new(width: usize, rng: &mut Rng) -> Self {
        let mut blocks = Vec::with_capacity(4);
        let mut cin = 3;
        for _ in 0..4 {
            blocks.push(Conv4Block {
                conv: Conv2d::new(cin, width, 3, 1, 1, rng),
                bn: BatchNorm2d::new(width),
            });
            cin = width;
        }
        Conv4 { blocks, width }
    }

    /// Flattened feature length for the given input size.
    pub fn feature_dim(&self, height: usize, width: usize) -> usize {
        self.width * (height / 16) * (width / 16)
    }

    /// Inference forward with running batch-norm statistics.
    pub fn forward_eval(&self, x: &Array4<f64>) -> Array2<f64> {
        let mut cur = x.clone();
        for block in &self.blocks {
            cur = block.conv.forward(&cur);
            cur = block.bn.forward_eval(&cur);
            cur.mapv_inplace(|v| v.max(0.0));
            cur = crate::nn::maxpool2_forward(&cur);
        }
        let (n, c, h, w) = cur.dim();
        cur.into_shape_with_order((n, c * h * w)).unwrap()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundConv4 {
        BoundConv4 {
            blocks: self
                .blocks
                .iter()
                .map(|b| (b.conv.bind(tape), b.bn.bind(tape)))
                .collect(),
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.push(block.conv.weight.as_slice_mut().unwrap());
            out.push(block.conv.bias.as_slice_mut().unwrap());
            out.push(block.bn.gamma.as_slice_mut().unwrap());
            out.push(block.bn.beta.as_slice_mut().unwrap());
        }
        out
    }

    /// Fold per-layer batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            block.bn.update_running(s);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundConv4 {
    pub blocks: Vec<(BoundConv2d, BoundBatchNorm2d)>,
}

impl BoundConv4 {
    /// Train-mode forward to `[N, feature_dim]`; returns per-layer batch
    /// statistics for running-average updates.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> (Var, Vec<BatchStats>) {
        let mut cur = x;
        let mut stats = Vec::with_capacity(self.blocks.len());
        for (conv, bn) in &self.blocks {
            cur = conv.apply(tape, cur);
            let (normed, s) = bn.apply(tape, cur);
            stats.push(s);
            cur = tape.relu(normed);
            cur = tape.maxpool2(cur);
        }
        let shape = tape.value(cur).shape().to_vec();
        let flat = tape.reshape(cur, &[shape[0], shape[1] * shape[2] * shape[3]]);
        (flat, stats)
    }

    /// Vars in the same order as [`Conv4::param_slices_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (conv, bn) in &self.blocks {
            out.push(conv.w);
            out.push(conv.b);
            out.push(bn.gamma);
            out.push(bn.beta);
        }
        out
    }
}

/// The one-shot classifier's embedding network.
#[derive(Debug, Clone)]
pub struct EmbeddingNetwork {
    pub backbone: Conv4,
}

impl EmbeddingNetwork {
    pub fn new(width: usize, rng: &mut Rng) -> Self {
        EmbeddingNetwork {
            backbone: Conv4::new(width, rng),
        }
    }

    pub fn feature_dim(&self, height: usize, width: usize) -> usize {
        self.backbone.feature_dim(height, width)
    }
}

/// Stack images into a `[N,3,H,W]` batch.
pub fn batch_from_images(images: &[&ImageTensor]) -> Array4<f64> {
    assert!(!images.is_empty());
    let (h, w) = (images[0].height(), images[0].width());
    let mut out = Array4::<f64>::zeros((images.len(), 3, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&img.to_chw());
    }
    out
}

/// Embed a batch of images in inference mode: one feature vector per
/// image, deterministic and independent across batch items.
pub fn embed_batch(net: &EmbeddingNetwork, images: &[&ImageTensor]) -> Result<Vec<Array1<f64>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let (h, w) = (images[0].height(), images[0].width());
    if images.iter().any(|i| i.height() != h || i.width() != w) {
        return Err(Error::ShapeMismatch {
            expected: format!("{h} x {w}"),
            got: "mixed image sizes in batch".into(),
        });
    }
    let batch = batch_from_images(images);
    let feats = net.backbone.forward_eval(&batch);
    Ok(feats.rows().into_iter().map(|r| r.to_owned()).collect())
}

/// Per-class mean embeddings, ordered by episode-local class index.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub prototypes: Vec<Array1<f64>>,
}

/// Average the embeddings of each class `0..n`.
pub fn compute_prototypes(
    embeddings: &[Array1<f64>],
    labels: &[usize],
    n: usize,
) -> Result<PrototypeSet> {
    if embeddings.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", embeddings.len()),
            got: format!("{}", labels.len()),
        });
    }
    let dim = embeddings
        .first()
        .map(|e| e.len())
        .ok_or_else(|| Error::data("no embeddings supplied".to_string()))?;
    let mut sums = vec![Array1::<f64>::zeros(dim); n];
    let mut counts = vec![0usize; n];
    for (emb, &label) in embeddings.iter().zip(labels) {
        if label >= n {
            return Err(Error::data(format!("label {label} outside 0..{n}")));
        }
        sums[label] += emb;
        counts[label] += 1;
    }
    let mut prototypes = Vec::with_capacity(n);
    for (c, (sum, count)) in sums.into_iter().zip(counts).enumerate() {
        if count == 0 {
            return Err(Error::data(format!("class {c} has no support embeddings")));
        }
        prototypes.push(sum / count as f64);
    }
    Ok(PrototypeSet { prototypes })
}

/// Softmax over negative prototype distances (Euclidean by default,
/// squared when `squared_distance` is set).
pub fn query_class_probabilities(
    prototypes: &PrototypeSet,
    query_embedding: &Array1<f64>,
    squared_distance: bool,
) -> Array1<f64> {
    let logits: Vec<f64> = prototypes
        .prototypes
        .iter()
        .map(|p| {
            let mut s = 0.0;
            for (a, b) in query_embedding.iter().zip(p.iter()) {
                s += (a - b) * (a - b);
            }
            if squared_distance {
                -s
            } else {
                -s.sqrt()
            }
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    Array1::from_vec(exps.into_iter().map(|e| e / denom).collect())
}

/// Mean negative log probability of the true class, floored at
/// [`PROB_FLOOR`]; also reports how many queries hit the floor.
pub fn episode_cross_entropy_counted(
    probabilities: &[Array1<f64>],
    query_labels: &[usize],
) -> Result<(f64, usize)> {
    if probabilities.len() != query_labels.len() || probabilities.is_empty() {
        return Err(Error::data(format!(
            "{} probability vectors for {} labels",
            probabilities.len(),
            query_labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut floored = 0usize;
    for (p, &y) in probabilities.iter().zip(query_labels) {
        if y >= p.len() {
            return Err(Error::data(format!("label {y} outside 0..{}", p.len())));
        }
        let prob = p[y];
        if prob < PROB_FLOOR {
            floored += 1;
            loss += -PROB_FLOOR.ln();
        } else {
            loss += -prob.ln();
        }
    }
    if floored > 0 {
        log::warn!("cross entropy floored {floored} query probabilities at {PROB_FLOOR}");
    }
    Ok((loss / query_labels.len() as f64, floored))
}

/// See [`episode_cross_entropy_counted`].
pub fn episode_cross_entropy(
    probabilities: &[Array1<f64>],
    query_labels: &[usize],
) -> Result<f64> {
    episode_cross_entropy_counted(probabilities, query_labels).map(|(loss, _)| loss)
}
