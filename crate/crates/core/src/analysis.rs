//! Diversity analysis: pairwise-distance distributions, intra/inter-class
//! splits, and PCA eigenvalue spectra over embedded image sets.

use crate::data::{ClassId, ImageTensor};
use crate::error::{Error, Result};
use crate::protonet::{embed_batch, EmbeddingNetwork};
use ndarray::{Array1, Array2};
use serde::Serialize;
use std::path::{Path, PathBuf};

pub const HISTOGRAM_BINS: usize = 50;

/// Fixed-width histogram over `[0, max]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn build(values: &[f64], bins: usize) -> Histogram {
        let max = values.iter().copied().fold(0.0_f64, f64::max);
        if max <= 0.0 {
            return Histogram {
                edges: vec![0.0, 0.0],
                counts: vec![values.len() as u64],
            };
        }
        let width = max / bins as f64;
        let mut counts = vec![0u64; bins];
        for &v in values {
            let idx = ((v / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        let edges = (0..=bins).map(|i| i as f64 * width).collect();
        Histogram { edges, counts }
    }
}

/// Summary of all-pairs Euclidean distances over a feature set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceStats {
    pub mean: f64,
    pub stddev: f64,
    pub histogram: Histogram,
    pub pair_count: usize,
}

fn euclid(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn stats_from_distances(distances: Vec<f64>) -> DistanceStats {
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    // Population standard deviation over the pair multiset.
    let var = distances.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    DistanceStats {
        mean,
        stddev: var.sqrt(),
        histogram: Histogram::build(&distances, HISTOGRAM_BINS),
        pair_count: distances.len(),
    }
}

/// Exact all-pairs distance statistics; `N*(N-1)/2` pairs.
pub fn pairwise_distance_stats(features: &[Array1<f64>]) -> Result<DistanceStats> {
    if features.len() < 2 {
        return Err(Error::data(format!(
            "pairwise statistics need at least 2 vectors, got {}",
            features.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::ShapeMismatch {
            expected: format!("{dim}"),
            got: "mixed feature dimensions".into(),
        });
    }
    let mut distances = Vec::with_capacity(features.len() * (features.len() - 1) / 2);
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            distances.push(euclid(&features[i], &features[j]));
        }
    }
    Ok(stats_from_distances(distances))
}

/// Same-label and different-label pair statistics; together the two
/// splits partition the full pair set.
pub fn class_conditional_distance_stats(
    features: &[Array1<f64>],
    labels: &[ClassId],
) -> Result<(DistanceStats, DistanceStats)> {
    if features.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", features.len()),
            got: format!("{}", labels.len()),
        });
    }
    if features.len() < 2 {
        return Err(Error::data("need at least 2 labeled vectors"));
    }
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            let d = euclid(&features[i], &features[j]);
            if labels[i] == labels[j] {
                intra.push(d);
            } else {
                inter.push(d);
            }
        }
    }
    if intra.is_empty() {
        return Err(Error::data(
            "intra-class split is empty: no class has two members",
        ));
    }
    if inter.is_empty() {
        return Err(Error::data(
            "inter-class split is empty: all items share one class",
        ));
    }
    Ok((stats_from_distances(intra), stats_from_distances(inter)))
}

/// Non-increasing, non-negative covariance eigenvalues.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenSpectrum {
    pub eigenvalues: Vec<f64>,
}

/// Top-`k` eigenvalues of the `(N-1)`-normalized covariance of the
/// mean-centered features, descending. When the dimension exceeds the
/// sample count the Gram matrix is decomposed instead (same nonzero
/// spectrum). `k` beyond the available spectrum truncates with a warning.
pub fn pca_eigenspectrum(features: &[Array1<f64>], k: usize) -> Result<EigenSpectrum> {
    let n = features.len();
    if n < 2 {
        return Err(Error::data("PCA needs at least 2 vectors"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::ShapeMismatch {
            expected: format!("{d}"),
            got: "mixed feature dimensions".into(),
        });
    }
    let mut centered = Array2::<f64>::zeros((n, d));
    for (i, f) in features.iter().enumerate() {
        centered.row_mut(i).assign(f);
    }
    let mean = centered.sum_axis(ndarray::Axis(0)) / n as f64;
    for mut row in centered.rows_mut() {
        row -= &mean;
    }
    let matrix = if d <= n {
        centered.t().dot(&centered) / (n as f64 - 1.0)
    } else {
        centered.dot(&centered.t()) / (n as f64 - 1.0)
    };
    let size = matrix.nrows();
    let na = nalgebra::DMatrix::from_fn(size, size, |i, j| matrix[[i, j]]);
    let eigen = nalgebra::SymmetricEigen::new(na);
    let mut values: Vec<f64> = eigen.eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut eigenvalues: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    if k < eigenvalues.len() {
        eigenvalues.truncate(k);
    } else if k > eigenvalues.len() {
        log::warn!(
            "requested {k} eigenvalues but spectrum has {}; truncating",
            eigenvalues.len()
        );
    }
    Ok(EigenSpectrum { eigenvalues })
}

/// Analysis for one image set.
#[derive(Debug, Clone, Serialize)]
pub struct SetReport {
    pub name: String,
    pub distances: DistanceStats,
    pub intra: Option<DistanceStats>,
    pub inter: Option<DistanceStats>,
    pub spectrum: EigenSpectrum,
}

/// Side-by-side diversity report for original / generated / fused sets.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub sets: Vec<SetReport>,
}

pub struct AnalysisSet<'a> {
    pub name: &'a str,
    pub images: &'a [ImageTensor],
    pub labels: Option<&'a [ClassId]>,
}

/// Embed each set with the shared encoder and compute per-set distance
/// statistics (plus intra/inter splits when labels are supplied) and the
/// eigenvalue spectrum.
pub fn compare_sets(
    sets: &[AnalysisSet<'_>],
    embedder: &EmbeddingNetwork,
    top_k: usize,
) -> Result<ComparisonReport> {
    let mut out = Vec::with_capacity(sets.len());
    for set in sets {
        if set.images.len() < 2 {
            return Err(Error::data(format!(
                "set `{}` needs at least 2 images, got {}",
                set.name,
                set.images.len()
            )));
        }
        let refs: Vec<&ImageTensor> = set.images.iter().collect();
        let features = embed_batch(embedder, &refs)?;
        let distances = pairwise_distance_stats(&features)?;
        let (intra, inter) = match set.labels {
            Some(labels) => {
                let (a, b) = class_conditional_distance_stats(&features, labels)?;
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        let spectrum = pca_eigenspectrum(&features, top_k)?;
        out.push(SetReport {
            name: set.name.to_string(),
            distances,
            intra,
            inter,
            spectrum,
        });
    }
    Ok(ComparisonReport { sets: out })
}

/// Write histogram plots (overall plus intra/inter when present), the
/// eigenvalue plot, and a CSV summary table. Returns the file paths.
pub fn write_report_artifacts(report: &ComparisonReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for set in &report.sets {
        let path = dir.join(format!("hist_{}.png", set.name));
        crate::plot::draw_histogram(
            &set.distances.histogram,
            &format!("{} pairwise distances", set.name),
            &path,
        )?;
        written.push(path);
        if let (Some(intra), Some(inter)) = (&set.intra, &set.inter) {
            let pi = dir.join(format!("hist_{}_intra.png", set.name));
            crate::plot::draw_histogram(
                &intra.histogram,
                &format!("{} intra-class distances", set.name),
                &pi,
            )?;
            written.push(pi);
            let pe = dir.join(format!("hist_{}_inter.png", set.name));
            crate::plot::draw_histogram(
                &inter.histogram,
                &format!("{} inter-class distances", set.name),
                &pe,
            )?;
            written.push(pe);
        }
    }
    let spectrum_path = dir.join("eigenspectrum.png");
    let series: Vec<(&str, &[f64])> = report
        .sets
        .iter()
        .map(|s| (s.name.as_str(), s.spectrum.eigenvalues.as_slice()))
        .collect();
    crate::plot::draw_spectrum(&series, &spectrum_path)?;
    written.push(spectrum_path);

    let summary_path = dir.join("summary.csv");
    let mut writer = csv::Writer::from_path(&summary_path)
        .map_err(|e| Error::data(format!("cannot write summary: {e}")))?;
    writer
        .write_record(["set", "split", "pairs", "mean", "stddev", "top_eigenvalue"])
        .map_err(|e| Error::data(e.to_string()))?;
    for set in &report.sets {
        let top = set
            .spectrum
            .eigenvalues
            .first()
            .copied()
            .unwrap_or(0.0);
        let mut row = |split: &str, st: &DistanceStats| {
            writer
                .write_record([
                    set.name.as_str(),
                    split,
                    &st.pair_count.to_string(),
                    &format!("{:.6}", st.mean),
                    &format!("{:.6}", st.stddev),
                    &format!("{:.6}", top),
                ])
                .map_err(|e| Error::data(e.to_string()))
        };
        row("all", &set.distances)?;
        if let Some(intra) = &set.intra {
            row("intra", intra)?;
        }
        if let Some(inter) = &set.inter {
            row("inter", inter)?;
        }
    }
    writer.flush().map_err(|e| Error::data(e.to_string()))?;
    written.push(summary_path);
    Ok(written)
}
