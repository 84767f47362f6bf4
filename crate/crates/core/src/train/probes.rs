//! Pilot-study probes: per-episode non-meta classifiers (nearest
//! neighbor, one-vs-all logistic regression, softmax regression) fit on
//! frozen features, over original / original+generated / original+mixed
//! support sets.

use super::eval::{confidence_interval, EvalReport};
use crate::baselines::manual_grid_mix;
use crate::data::{sample_episode, ClassId, Dataset, ImageTensor};
use crate::error::{Error, Result};
use crate::fusion::GeneratedLookup;
use crate::protonet::{embed_batch, EmbeddingNetwork};
use crate::rng::derive_rng;
use ndarray::{Array1, Array2};
use rand::Rng as _;
use rayon::prelude::*;
use std::collections::BTreeSet;

const PROBE_GD_STEPS: usize = 100;
const PROBE_GD_LR: f64 = 0.5;
const PROBE_L2: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeClassifier {
    NearestNeighbor,
    LogisticRegression,
    SoftmaxRegression,
}

impl ProbeClassifier {
    pub const ALL: [ProbeClassifier; 3] = [
        ProbeClassifier::NearestNeighbor,
        ProbeClassifier::LogisticRegression,
        ProbeClassifier::SoftmaxRegression,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeClassifier::NearestNeighbor => "nearest_neighbor",
            ProbeClassifier::LogisticRegression => "logistic_regression",
            ProbeClassifier::SoftmaxRegression => "softmax_regression",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeData {
    Original,
    OriginalPlusGenerated,
    OriginalPlusMixed,
}

impl ProbeData {
    pub const ALL: [ProbeData; 3] = [
        ProbeData::Original,
        ProbeData::OriginalPlusGenerated,
        ProbeData::OriginalPlusMixed,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeData::Original => "original",
            ProbeData::OriginalPlusGenerated => "original_plus_generated",
            ProbeData::OriginalPlusMixed => "original_plus_mixed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeSettings {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Binary pattern for the mixed setting.
    pub pattern: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub data: ProbeData,
    pub classifier: ProbeClassifier,
    pub report: EvalReport,
}

/// Unit-normalize a feature vector; probes operate on directions so the
/// gradient-descent fits stay well-conditioned across encoders.
fn normalize(f: &Array1<f64>) -> Array1<f64> {
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        f / norm
    } else {
        f.clone()
    }
}

fn nearest_neighbor(train: &[Array1<f64>], labels: &[usize], query: &Array1<f64>) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (f, &l) in train.iter().zip(labels) {
        let d: f64 = f
            .iter()
            .zip(query.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best_d {
            best_d = d;
            best = l;
        }
    }
    best
}

/// One-vs-all binary logistic regressions, full-batch gradient descent.
fn logistic_one_vs_all(
    train: &[Array1<f64>],
    labels: &[usize],
    n: usize,
    queries: &[Array1<f64>],
) -> Vec<usize> {
    let d = train[0].len();
    let mut scores = vec![vec![0.0f64; n]; queries.len()];
    for class in 0..n {
        let mut w = Array1::<f64>::zeros(d);
        let mut b = 0.0f64;
        for _ in 0..PROBE_GD_STEPS {
            let mut gw = Array1::<f64>::zeros(d);
            let mut gb = 0.0;
            for (f, &l) in train.iter().zip(labels) {
                let target = if l == class { 1.0 } else { 0.0 };
                let p = 1.0 / (1.0 + (-(w.dot(f) + b)).exp());
                let err = p - target;
                gw.scaled_add(err, f);
                gb += err;
            }
            let inv = 1.0 / train.len() as f64;
            gw.mapv_inplace(|v| v * inv);
            gw.scaled_add(PROBE_L2, &w);
            w.scaled_add(-PROBE_GD_LR, &gw);
            b -= PROBE_GD_LR * gb * inv;
        }
        for (qi, q) in queries.iter().enumerate() {
            scores[qi][class] = w.dot(q) + b;
        }
    }
    scores
        .into_iter()
        .map(|s| {
            let mut best = 0;
            for (i, &v) in s.iter().enumerate() {
                if v > s[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Multiclass (softmax) regression, full-batch gradient descent.
fn softmax_regression(
    train: &[Array1<f64>],
    labels: &[usize],
    n: usize,
    queries: &[Array1<f64>],
) -> Vec<usize> {
    let d = train[0].len();
    let mut w = Array2::<f64>::zeros((d, n));
    let mut b = Array1::<f64>::zeros(n);
    for _ in 0..PROBE_GD_STEPS {
        let mut gw = Array2::<f64>::zeros((d, n));
        let mut gb = Array1::<f64>::zeros(n);
        for (f, &l) in train.iter().zip(labels) {
            let logits = f.dot(&w) + &b;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps = logits.mapv(|v| (v - max).exp());
            let denom = exps.sum();
            for c in 0..n {
                let err = exps[c] / denom - if c == l { 1.0 } else { 0.0 };
                for j in 0..d {
                    gw[[j, c]] += err * f[j];
                }
                gb[c] += err;
            }
        }
        let inv = 1.0 / train.len() as f64;
        gw.mapv_inplace(|v| v * inv);
        gw.scaled_add(PROBE_L2, &w);
        gb.mapv_inplace(|v| v * inv);
        w.scaled_add(-PROBE_GD_LR, &gw);
        b.scaled_add(-PROBE_GD_LR, &gb);
    }
    queries
        .iter()
        .map(|q| {
            let logits = q.dot(&w) + &b;
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Evaluate the three probe classifiers over the three training-data
/// settings; nine reports over `settings.episodes` episodes.
pub fn evaluate_frozen_probes(
    embedder: &EmbeddingNetwork,
    dataset: &Dataset,
    pool: &BTreeSet<ClassId>,
    settings: &ProbeSettings,
    cache: &(dyn GeneratedLookup + Sync),
) -> Result<Vec<ProbeOutcome>> {
    if settings.episodes < 2 {
        return Err(Error::config("probe evaluation needs at least 2 episodes"));
    }
    // accuracy[data][classifier][episode]
    let per_episode: Vec<Result<Vec<Vec<f64>>>> = (0..settings.episodes)
        .into_par_iter()
        .map(|idx| {
            let mut rng = derive_rng(settings.seed, "probe-episode", idx as u64);
            let episode =
                sample_episode(dataset, pool, settings.n, settings.m, settings.q, &mut rng)?;
            // One generated variant per support image, fixed per episode.
            let mut generated = Vec::with_capacity(episode.support.len());
            for item in &episode.support {
                let count = cache.variant_count(&item.image);
                if count == 0 {
                    return Err(Error::data(format!(
                        "no cached variants for image {}",
                        item.image.content_hash()
                    )));
                }
                let choice = rng.random_range(0..count);
                generated.push(cache.variant(&item.image, choice)?);
            }
            let mixed: Vec<ImageTensor> = episode
                .support
                .iter()
                .zip(&generated)
                .map(|(item, gen)| manual_grid_mix(&item.image, gen, &settings.pattern))
                .collect::<Result<_>>()?;

            // One embed batch: support | generated | mixed | queries.
            let mut refs: Vec<&ImageTensor> = episode.support.iter().map(|s| &s.image).collect();
            refs.extend(generated.iter());
            refs.extend(mixed.iter());
            refs.extend(episode.query.iter().map(|s| &s.image));
            let feats = embed_batch(embedder, &refs)?;
            let feats: Vec<Array1<f64>> = feats.iter().map(normalize).collect();
            let s = episode.support.len();
            let support_feats = &feats[0..s];
            let gen_feats = &feats[s..2 * s];
            let mixed_feats = &feats[2 * s..3 * s];
            let query_feats = &feats[3 * s..];
            let support_labels = episode.support_local_labels();
            let query_labels = episode.query_local_labels();

            let mut out = vec![vec![0.0f64; ProbeClassifier::ALL.len()]; ProbeData::ALL.len()];
            for (di, data) in ProbeData::ALL.iter().enumerate() {
                let (train, labels): (Vec<Array1<f64>>, Vec<usize>) = match data {
                    ProbeData::Original => {
                        (support_feats.to_vec(), support_labels.clone())
                    }
                    ProbeData::OriginalPlusGenerated => {
                        let mut t = support_feats.to_vec();
                        t.extend(gen_feats.to_vec());
                        let mut l = support_labels.clone();
                        l.extend(support_labels.clone());
                        (t, l)
                    }
                    ProbeData::OriginalPlusMixed => {
                        let mut t = support_feats.to_vec();
                        t.extend(mixed_feats.to_vec());
                        let mut l = support_labels.clone();
                        l.extend(support_labels.clone());
                        (t, l)
                    }
                };
                for (ci, classifier) in ProbeClassifier::ALL.iter().enumerate() {
                    let predictions: Vec<usize> = match classifier {
                        ProbeClassifier::NearestNeighbor => query_feats
                            .iter()
                            .map(|q| nearest_neighbor(&train, &labels, q))
                            .collect(),
                        ProbeClassifier::LogisticRegression => {
                            logistic_one_vs_all(&train, &labels, episode.n, query_feats)
                        }
                        ProbeClassifier::SoftmaxRegression => {
                            softmax_regression(&train, &labels, episode.n, query_feats)
                        }
                    };
                    let correct = predictions
                        .iter()
                        .zip(&query_labels)
                        .filter(|(p, l)| p == l)
                        .count();
                    out[di][ci] = 100.0 * correct as f64 / query_labels.len() as f64;
                }
            }
            Ok(out)
        })
        .collect();

    let mut accs =
        vec![vec![Vec::with_capacity(settings.episodes); ProbeClassifier::ALL.len()]; 3];
    for ep in per_episode {
        let ep = ep?;
        for (di, row) in ep.into_iter().enumerate() {
            for (ci, acc) in row.into_iter().enumerate() {
                accs[di][ci].push(acc);
            }
        }
    }
    let mut outcomes = Vec::with_capacity(9);
    for (di, data) in ProbeData::ALL.iter().enumerate() {
        for (ci, classifier) in ProbeClassifier::ALL.iter().enumerate() {
            let values = &accs[di][ci];
            let (mean, ci95) = confidence_interval(values)?;
            outcomes.push(ProbeOutcome {
                data: *data,
                classifier: *classifier,
                report: EvalReport {
                    mean_accuracy: mean,
                    ci95,
                    episode_count: values.len(),
                    per_episode_accuracies: values.clone(),
                },
            });
        }
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::MemoryLookup;
    use crate::rng::rng_from_seed;
    use crate::synthetic::{generate_synthetic_dataset, SyntheticConfig};

    #[test]
    fn probes_produce_nine_deterministic_reports() {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            classes: 4,
            images_per_class: 5,
            image_size: 16,
            seed: 50,
        })
        .unwrap();
        let mut lookup = MemoryLookup::new();
        let mut rng = rng_from_seed(51);
        for li in ds.images() {
            let variants = (0..2)
                .map(|_| crate::baselines::jitter_augment(&li.image, 0.25, &mut rng))
                .collect();
            lookup.insert(&li.image, variants);
        }
        let embedder = EmbeddingNetwork::new(4, &mut rng_from_seed(52));
        let settings = ProbeSettings {
            n: 3,
            m: 1,
            q: 2,
            episodes: 4,
            seed: 13,
            pattern: ndarray::arr2(&[[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]),
        };
        let a = evaluate_frozen_probes(&embedder, &ds, &ds.classes(), &settings, &lookup).unwrap();
        let b = evaluate_frozen_probes(&embedder, &ds, &ds.classes(), &settings, &lookup).unwrap();
        assert_eq!(a.len(), 9);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.report.mean_accuracy, y.report.mean_accuracy);
            assert_eq!(x.report.episode_count, 4);
        }
        // Separable toy classes: the probes must beat chance (33%).
        let original_nn = &a[0];
        assert_eq!(original_nn.data, ProbeData::Original);
        assert_eq!(original_nn.classifier, ProbeClassifier::NearestNeighbor);
        assert!(
            original_nn.report.mean_accuracy > 40.0,
            "nearest neighbor accuracy {}",
            original_nn.report.mean_accuracy
        );
    }

    #[test]
    fn classifiers_fit_separable_toy_points() {
        // Two well-separated clusters in 2-D.
        let train = vec![
            Array1::from_vec(vec![1.0, 0.0]),
            Array1::from_vec(vec![0.9, 0.1]),
            Array1::from_vec(vec![-1.0, 0.0]),
            Array1::from_vec(vec![-0.9, -0.1]),
        ];
        let labels = vec![0usize, 0, 1, 1];
        let queries = vec![
            Array1::from_vec(vec![0.8, 0.05]),
            Array1::from_vec(vec![-0.85, 0.0]),
        ];
        assert_eq!(nearest_neighbor(&train, &labels, &queries[0]), 0);
        assert_eq!(nearest_neighbor(&train, &labels, &queries[1]), 1);
        assert_eq!(logistic_one_vs_all(&train, &labels, 2, &queries), vec![0, 1]);
        assert_eq!(softmax_regression(&train, &labels, 2, &queries), vec![0, 1]);
    }
}
