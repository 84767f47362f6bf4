//! Image fusion network: block weight grids and convex block-wise mixing
//! of an original image with a generated one.

use crate::data::{ImageTensor, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::{BoundConv2d, BoundLinear, Conv2d, Linear};
use crate::rng::Rng;
use crate::tensor::{Tape, Var};
use ndarray::{Array2, Array4, Axis};
use rand::Rng as _;

/// Weight grid entries are squashed into the open interval
/// `(GRID_EPS, 1 - GRID_EPS)`; extreme logits would otherwise saturate
/// the sigmoid to exactly 0 or 1 in f64.
pub const GRID_EPS: f64 = 1e-9;

/// A `g x g` matrix of mixing weights, each strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrid {
    g: usize,
    weights: Array2<f64>,
}

impl WeightGrid {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        let (r, c) = weights.dim();
        if r != c || r == 0 {
            return Err(Error::ShapeMismatch {
                expected: "square g x g grid".into(),
                got: format!("{r} x {c}"),
            });
        }
        let weights = weights.mapv(|w| w.clamp(GRID_EPS, 1.0 - GRID_EPS));
        Ok(WeightGrid { g: r, weights })
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }
}

/// Cell `(i, j)` owning pixel `(y, x)` under floor boundaries:
/// cell row `i` covers `[floor(i*H/g), floor((i+1)*H/g))`.
pub fn grid_cell(g: usize, height: usize, width: usize, y: usize, x: usize) -> (usize, usize) {
    let mut ci = g - 1;
    for i in 0..g {
        if y < ((i + 1) * height) / g {
            ci = i;
            break;
        }
    }
    let mut cj = g - 1;
    for j in 0..g {
        if x < ((j + 1) * width) / g {
            cj = j;
            break;
        }
    }
    (ci, cj)
}

/// Expand a grid to a block-constant `H x W` map; every pixel is covered
/// by exactly one cell.
pub fn expand_weight_grid(grid: &WeightGrid, height: usize, width: usize) -> Result<Array2<f64>> {
    expand_grid_values(grid.weights(), height, width)
}

/// Expansion shared by [`expand_weight_grid`] and the manual binary
/// pattern path.
pub(crate) fn expand_grid_values(
    values: &Array2<f64>,
    height: usize,
    width: usize,
) -> Result<Array2<f64>> {
    let g = values.nrows();
    if height < g || width < g {
        return Err(Error::data(format!(
            "target {height} x {width} smaller than grid size {g}"
        )));
    }
    let mut map = Array2::<f64>::zeros((height, width));
    for y in 0..height {
        for x in 0..width {
            let (ci, cj) = grid_cell(g, height, width, y, x);
            map[[y, x]] = values[[ci, cj]];
        }
    }
    Ok(map)
}

/// Per-pixel convex combination `w (.) original + (1-w) (.) generated`.
pub fn fuse_images(
    original: &ImageTensor,
    generated: &ImageTensor,
    weight_map: &Array2<f64>,
) -> Result<ImageTensor> {
    let (h, w) = (original.height(), original.width());
    if generated.height() != h || generated.width() != w {
        return Err(Error::ShapeMismatch {
            expected: format!("{h} x {w}"),
            got: format!("{} x {}", generated.height(), generated.width()),
        });
    }
    if weight_map.dim() != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: format!("{h} x {w} weight map"),
            got: format!("{:?}", weight_map.dim()),
        });
    }
    if weight_map.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
        return Err(Error::data("weight map entries must lie in [0, 1]"));
    }
    let a = original.data();
    let b = generated.data();
    let mut out = ndarray::Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let m = weight_map[[y, x]];
            for c in 0..3 {
                out[[y, x, c]] = m * a[[y, x, c]] + (1.0 - m) * b[[y, x, c]];
            }
        }
    }
    ImageTensor::new_clamped(out, original.range())
}

/// Convolutional encoder: stride-2 conv/ReLU stack with a global average
/// pool, producing a fixed-size vector for any input resolution.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub convs: Vec<Conv2d>,
}

impl ConvEncoder {
    pub fn new(width: usize, rng: &mut Rng) -> Self {
        let convs = vec![
            Conv2d::new(3, width, 3, 2, 1, rng),
            Conv2d::new(width, 2 * width, 3, 2, 1, rng),
            Conv2d::new(2 * width, 2 * width, 3, 2, 1, rng),
        ];
        ConvEncoder { convs }
    }

    pub fn feature_dim(&self) -> usize {
        self.convs.last().unwrap().weight.dim().0
    }

    /// Inference forward to `[N, feature_dim]`.
    pub fn forward(&self, x: &Array4<f64>) -> Array2<f64> {
        let mut cur = x.clone();
        for conv in &self.convs {
            cur = conv.forward(&cur).mapv(|v| v.max(0.0));
        }
        let (n, c, h, w) = cur.dim();
        let mut out = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                out[[i, ch]] =
                    cur.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum() / (h * w) as f64;
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundConvEncoder {
        BoundConvEncoder {
            convs: self.convs.iter().map(|c| c.bind(tape)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundConvEncoder {
    pub convs: Vec<BoundConv2d>,
}

impl BoundConvEncoder {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let mut cur = x;
        for conv in &self.convs {
            cur = conv.apply(tape, cur);
            cur = tape.relu(cur);
        }
        tape.global_avg_pool(cur)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.convs.iter().flat_map(|c| vec![c.w, c.b]).collect()
    }
}

/// The fusion network F: two non-weight-sharing encoders and a
/// fully-connected head mapping the concatenated pair features to the
/// `g*g` pre-squash logits.
#[derive(Debug, Clone)]
pub struct FusionNetwork {
    pub enc_original: ConvEncoder,
    pub enc_generated: ConvEncoder,
    pub head: Linear,
    g: usize,
}

impl FusionNetwork {
    /// Encoders are randomly initialized; the head starts at zero so the
    /// initial grid is uniformly 0.5.
    pub fn new(g: usize, encoder_width: usize, rng: &mut Rng) -> Self {
        let enc_original = ConvEncoder::new(encoder_width, rng);
        let enc_generated = ConvEncoder::new(encoder_width, rng);
        let feat = enc_original.feature_dim() + enc_generated.feature_dim();
        FusionNetwork {
            enc_original,
            enc_generated,
            head: Linear::zeros(feat, g * g),
            g,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.g
    }

    /// Inference-mode weight grid for one image pair.
    pub fn predict_weight_grid(
        &self,
        original: &ImageTensor,
        generated: &ImageTensor,
    ) -> Result<WeightGrid> {
        if (original.height(), original.width()) != (generated.height(), generated.width()) {
            return Err(Error::ShapeMismatch {
                expected: format!("{} x {}", original.height(), original.width()),
                got: format!("{} x {}", generated.height(), generated.width()),
            });
        }
        let to_batch = |img: &ImageTensor| {
            let chw = img.to_chw();
            let (c, h, w) = chw.dim();
            chw.into_shape_with_order((1, c, h, w)).unwrap()
        };
        let fa = self.enc_original.forward(&to_batch(original));
        let fb = self.enc_generated.forward(&to_batch(generated));
        let cat = ndarray::concatenate(Axis(1), &[fa.view(), fb.view()]).unwrap();
        let logits = self.head.forward(&cat);
        let squashed = logits.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let grid = squashed
            .into_shape_with_order((self.g, self.g))
            .unwrap();
        WeightGrid::new(grid)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundFusionNetwork {
        BoundFusionNetwork {
            enc_original: self.enc_original.bind(tape),
            enc_generated: self.enc_generated.bind(tape),
            head: self.head.bind(tape),
            g: self.g,
        }
    }

    /// Parameter arrays in bind order, flattened views.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for conv in self
            .enc_original
            .convs
            .iter_mut()
            .chain(self.enc_generated.convs.iter_mut())
        {
            out.push(conv.weight.as_slice_mut().unwrap());
            out.push(conv.bias.as_slice_mut().unwrap());
        }
        out.push(self.head.weight.as_slice_mut().unwrap());
        out.push(self.head.bias.as_slice_mut().unwrap());
        out
    }
}

#[derive(Debug, Clone)]
pub struct BoundFusionNetwork {
    pub enc_original: BoundConvEncoder,
    pub enc_generated: BoundConvEncoder,
    pub head: BoundLinear,
    g: usize,
}

impl BoundFusionNetwork {
    /// Weight grid node `[g,g]` for a single image pair (as `[1,3,H,W]`
    /// constants), differentiable in the fusion parameters.
    pub fn predict_grid(&self, tape: &mut Tape, original: Var, generated: Var) -> Var {
        let fa = self.enc_original.apply(tape, original);
        let fb = self.enc_generated.apply(tape, generated);
        let cat = tape.concat_cols(fa, fb);
        let logits = self.head.apply(tape, cat);
        let squashed = tape.sigmoid(logits);
        tape.reshape(squashed, &[self.g, self.g])
    }

    /// Vars in the same order as [`FusionNetwork::param_slices_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.enc_original.vars();
        out.extend(self.enc_generated.vars());
        out.push(self.head.w);
        out.push(self.head.b);
        out
    }
}

/// Source of cached generated variants, keyed by image content.
pub trait GeneratedLookup {
    /// Number of cached variants for this image, 0 when absent.
    fn variant_count(&self, image: &ImageTensor) -> usize;

    /// Load one cached variant.
    fn variant(&self, image: &ImageTensor, index: usize) -> Result<ImageTensor>;
}

/// In-memory lookup used by tests and by pipelines that keep everything
/// resident.
#[derive(Debug, Default)]
pub struct MemoryLookup {
    map: std::collections::BTreeMap<String, Vec<ImageTensor>>,
}

impl MemoryLookup {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image: &ImageTensor, variants: Vec<ImageTensor>) {
        self.map.insert(image.content_hash(), variants);
    }
}

impl GeneratedLookup for MemoryLookup {
    fn variant_count(&self, image: &ImageTensor) -> usize {
        self.map
            .get(&image.content_hash())
            .map(|v| v.len())
            .unwrap_or(0)
    }

    fn variant(&self, image: &ImageTensor, index: usize) -> Result<ImageTensor> {
        self.map
            .get(&image.content_hash())
            .and_then(|v| v.get(index))
            .cloned()
            .ok_or_else(|| {
                Error::data(format!(
                    "no cached variant {index} for image {}",
                    image.content_hash()
                ))
            })
    }
}

/// One entry of an augmented support set.
#[derive(Debug, Clone)]
pub struct AugmentedEntry {
    pub image: ImageTensor,
    pub label: crate::data::ClassId,
    /// Index of the source support entry.
    pub source: usize,
    pub fused: bool,
}

/// Original support pairs plus `n_aug` fused entries per original.
#[derive(Debug, Clone)]
pub struct AugmentedSupportSet {
    pub entries: Vec<AugmentedEntry>,
}

/// Per-fusion record of the predicted grid, for weight-dump inspection.
#[derive(Debug, Clone)]
pub struct FusionWeightRecord {
    pub source_hash: String,
    pub weights: Vec<f64>,
}

/// Build the augmented support set: each original is kept and followed by
/// `n_aug` fused images built from distinct cached variants chosen
/// uniformly at random by the episode rng.
pub fn augment_support_set(
    support: &[LabeledImage],
    lookup: &dyn GeneratedLookup,
    net: &FusionNetwork,
    n_aug: usize,
    rng: &mut Rng,
) -> Result<AugmentedSupportSet> {
    augment_support_set_detailed(support, lookup, net, n_aug, rng).map(|(set, _)| set)
}

/// [`augment_support_set`] plus the predicted weight grids.
pub fn augment_support_set_detailed(
    support: &[LabeledImage],
    lookup: &dyn GeneratedLookup,
    net: &FusionNetwork,
    n_aug: usize,
    rng: &mut Rng,
) -> Result<(AugmentedSupportSet, Vec<FusionWeightRecord>)> {
    let mut entries = Vec::with_capacity(support.len() * (1 + n_aug));
    let mut records = Vec::new();
    for (i, item) in support.iter().enumerate() {
        entries.push(AugmentedEntry {
            image: item.image.clone(),
            label: item.label,
            source: i,
            fused: false,
        });
        if n_aug == 0 {
            continue;
        }
        let count = lookup.variant_count(&item.image);
        if count < n_aug {
            return Err(Error::data(format!(
                "image {} has {count} cached variants, need n_aug={n_aug}",
                item.image.content_hash()
            )));
        }
        for &choice in pick_distinct(count, n_aug, rng).iter() {
            let generated = lookup.variant(&item.image, choice)?;
            let grid = net.predict_weight_grid(&item.image, &generated)?;
            let map = expand_weight_grid(&grid, item.image.height(), item.image.width())?;
            let fused = fuse_images(&item.image, &generated, &map)?;
            records.push(FusionWeightRecord {
                source_hash: item.image.content_hash(),
                weights: grid.weights().iter().copied().collect(),
            });
            entries.push(AugmentedEntry {
                image: fused,
                label: item.label,
                source: i,
                fused: true,
            });
        }
    }
    Ok((AugmentedSupportSet { entries }, records))
}

/// `k` distinct indices from `0..count`, uniform, by partial shuffle.
pub(crate) fn pick_distinct(count: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idxs: Vec<usize> = (0..count).collect();
    for i in 0..k.min(count) {
        let j = rng.random_range(i..count);
        idxs.swap(i, j);
    }
    idxs.truncate(k);
    idxs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassId, ValueRange};
    use crate::rng::rng_from_seed;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn image_from_fn(
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> ImageTensor {
        let mut data = Array3::<f64>::zeros((h, w, 3));
        for ((y, x, c), v) in data.indexed_iter_mut() {
            *v = f(y, x, c);
        }
        ImageTensor::new(data, ValueRange::UNIT_SIGNED).unwrap()
    }

    #[test]
    fn default_grid_is_three_by_three() {
        let mut rng = rng_from_seed(0);
        let net = FusionNetwork::new(3, 4, &mut rng);
        let a = image_from_fn(16, 16, |y, x, c| ((y + x + c) % 5) as f64 / 5.0 - 0.4);
        let b = image_from_fn(16, 16, |y, x, c| ((y * x + c) % 7) as f64 / 7.0 - 0.4);
        let grid = net.predict_weight_grid(&a, &b).unwrap();
        assert_eq!(grid.weights().dim(), (3, 3));
    }

    #[test]
    fn five_by_five_variant_is_supported() {
        let mut rng = rng_from_seed(1);
        let net = FusionNetwork::new(5, 4, &mut rng);
        let a = image_from_fn(20, 20, |y, _, _| y as f64 / 40.0);
        let b = image_from_fn(20, 20, |_, x, _| x as f64 / 40.0);
        let grid = net.predict_weight_grid(&a, &b).unwrap();
        assert_eq!(grid.weights().dim(), (5, 5));
    }

    #[test]
    fn zero_head_gives_all_half_weights() {
        let mut rng = rng_from_seed(2);
        let net = FusionNetwork::new(3, 4, &mut rng);
        // Head is zero-initialized by construction.
        let a = image_from_fn(8, 8, |y, x, _| ((y ^ x) % 3) as f64 / 3.0);
        let b = image_from_fn(8, 8, |y, x, _| ((y + x) % 3) as f64 / 3.0);
        let grid = net.predict_weight_grid(&a, &b).unwrap();
        assert!(grid.weights().iter().all(|&w| (w - 0.5).abs() < 1e-12));
    }

    #[test]
    fn expand_even_division_gives_uniform_blocks() {
        let grid = WeightGrid::new(ndarray::arr2(&[
            [0.1, 0.2, 0.3],
            [0.4, 0.5, 0.6],
            [0.7, 0.8, 0.9],
        ]))
        .unwrap();
        let map = expand_weight_grid(&grid, 6, 6).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(map[[y, x]], grid.weights()[[y / 2, x / 2]]);
            }
        }
    }

    #[test]
    fn expand_seven_gives_2_2_3_partition() {
        // Recompute the floor boundaries by hand: 0, floor(7/3)=2,
        // floor(14/3)=4, 7 -> stripe sizes 2, 2, 3.
        let grid = WeightGrid::new(ndarray::arr2(&[
            [0.1, 0.2, 0.3],
            [0.4, 0.5, 0.6],
            [0.7, 0.8, 0.9],
        ]))
        .unwrap();
        let map = expand_weight_grid(&grid, 7, 7).unwrap();
        let expect_cell = |p: usize| match p {
            0 | 1 => 0,
            2 | 3 => 1,
            _ => 2,
        };
        for y in 0..7 {
            for x in 0..7 {
                assert_eq!(map[[y, x]], grid.weights()[[expect_cell(y), expect_cell(x)]]);
            }
        }
    }

    #[test]
    fn expand_constant_grid_is_constant() {
        let grid = WeightGrid::new(Array2::from_elem((3, 3), 0.37)).unwrap();
        let map = expand_weight_grid(&grid, 10, 13).unwrap();
        assert!(map.iter().all(|&v| v == 0.37));
    }

    #[test]
    fn expand_rejects_images_smaller_than_grid() {
        let grid = WeightGrid::new(Array2::from_elem((3, 3), 0.5)).unwrap();
        assert!(expand_weight_grid(&grid, 2, 8).is_err());
        assert!(expand_weight_grid(&grid, 8, 2).is_err());
    }

    #[test]
    fn fuse_identity_cases_are_exact() {
        let a = image_from_fn(5, 4, |y, x, c| (y as f64 - x as f64 + c as f64) / 10.0);
        let b = image_from_fn(5, 4, |y, x, c| (x as f64 - y as f64 - c as f64) / 10.0);
        let ones = Array2::from_elem((5, 4), 1.0);
        let zeros = Array2::from_elem((5, 4), 0.0);
        assert_eq!(fuse_images(&a, &b, &ones).unwrap().data(), a.data());
        assert_eq!(fuse_images(&a, &b, &zeros).unwrap().data(), b.data());
    }

    #[test]
    fn fuse_half_weight_averages_pixels() {
        let a = image_from_fn(2, 2, |y, x, _| (y * 2 + x) as f64 / 10.0);
        let b = image_from_fn(2, 2, |y, x, _| -((y * 2 + x) as f64) / 20.0);
        let half = Array2::from_elem((2, 2), 0.5);
        let fused = fuse_images(&a, &b, &half).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    let expect = 0.5 * a.data()[[y, x, c]] + 0.5 * b.data()[[y, x, c]];
                    assert!((fused.data()[[y, x, c]] - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn fuse_rejects_shape_mismatch() {
        let a = image_from_fn(4, 4, |_, _, _| 0.0);
        let b = image_from_fn(4, 5, |_, _, _| 0.0);
        let map = Array2::from_elem((4, 4), 0.5);
        assert!(fuse_images(&a, &b, &map).is_err());
    }

    fn support_with_lookup(
        n: usize,
        m: usize,
        variants: usize,
    ) -> (Vec<LabeledImage>, MemoryLookup) {
        let mut support = Vec::new();
        let mut lookup = MemoryLookup::new();
        for c in 0..n {
            for i in 0..m {
                let img = image_from_fn(9, 9, |y, x, ch| {
                    ((y * 31 + x * 7 + ch * 3 + c * 11 + i * 5) % 19) as f64 / 19.0 - 0.5
                });
                let vars: Vec<ImageTensor> = (0..variants)
                    .map(|v| {
                        image_from_fn(9, 9, |y, x, ch| {
                            ((y + x * 13 + ch + v * 17 + c) % 23) as f64 / 23.0 - 0.5
                        })
                    })
                    .collect();
                lookup.insert(&img, vars);
                support.push(LabeledImage {
                    image: img,
                    label: ClassId(c as u32),
                });
            }
        }
        (support, lookup)
    }

    #[test]
    fn augmented_size_matches_formula() {
        let mut rng = rng_from_seed(3);
        let net = FusionNetwork::new(3, 4, &mut rng);
        let (support, lookup) = support_with_lookup(5, 1, 3);
        let aug = augment_support_set(&support, &lookup, &net, 1, &mut rng).unwrap();
        assert_eq!(aug.entries.len(), 10);

        let (support, lookup) = support_with_lookup(2, 2, 4);
        let aug = augment_support_set(&support, &lookup, &net, 3, &mut rng).unwrap();
        assert_eq!(aug.entries.len(), 16);
        for class in [ClassId(0), ClassId(1)] {
            assert_eq!(aug.entries.iter().filter(|e| e.label == class).count(), 8);
        }
    }

    #[test]
    fn zero_aug_returns_originals() {
        let mut rng = rng_from_seed(4);
        let net = FusionNetwork::new(3, 4, &mut rng);
        let (support, lookup) = support_with_lookup(3, 1, 2);
        let aug = augment_support_set(&support, &lookup, &net, 0, &mut rng).unwrap();
        assert_eq!(aug.entries.len(), 3);
        for (entry, orig) in aug.entries.iter().zip(&support) {
            assert_eq!(entry.image.data(), orig.image.data());
            assert!(!entry.fused);
        }
    }

    #[test]
    fn missing_cache_entry_names_the_image() {
        let mut rng = rng_from_seed(5);
        let net = FusionNetwork::new(3, 4, &mut rng);
        let (support, _) = support_with_lookup(2, 1, 2);
        let empty = MemoryLookup::new();
        let err = augment_support_set(&support, &empty, &net, 1, &mut rng).unwrap_err();
        assert!(err
            .to_string()
            .contains(&support[0].image.content_hash()[..16]));
    }

    #[test]
    fn label_inheritance_is_exhaustive() {
        let mut rng = rng_from_seed(6);
        let net = FusionNetwork::new(3, 4, &mut rng);
        let (support, lookup) = support_with_lookup(4, 2, 3);
        let aug = augment_support_set(&support, &lookup, &net, 2, &mut rng).unwrap();
        for entry in &aug.entries {
            assert_eq!(entry.label, support[entry.source].label);
        }
    }

    #[test]
    fn expanded_map_has_block_structure() {
        let grid = WeightGrid::new(ndarray::arr2(&[
            [0.15, 0.25, 0.35],
            [0.45, 0.55, 0.65],
            [0.75, 0.85, 0.95],
        ]))
        .unwrap();
        let map = expand_weight_grid(&grid, 11, 13).unwrap();
        for y in 0..11 {
            let mut distinct: Vec<f64> = map.row(y).iter().copied().collect();
            distinct.dedup();
            assert!(distinct.len() <= 3);
        }
        for x in 0..13 {
            let mut distinct: Vec<f64> = map.column(x).iter().copied().collect();
            distinct.dedup();
            assert!(distinct.len() <= 3);
        }
    }

    proptest! {
        #[test]
        fn fused_pixels_stay_convex(seed in 0u64..200) {
            let mut rng = rng_from_seed(seed);
            let a = image_from_fn(6, 6, |_, _, _| rng.random_range(-1.0..1.0));
            let b = image_from_fn(6, 6, |_, _, _| rng.random_range(-1.0..1.0));
            let grid = WeightGrid::new(Array2::from_shape_simple_fn((3, 3), || {
                rng.random_range(0.001..0.999)
            }))
            .unwrap();
            let map = expand_weight_grid(&grid, 6, 6).unwrap();
            let fused = fuse_images(&a, &b, &map).unwrap();
            for ((y, x, c), &v) in fused.data().indexed_iter() {
                let lo = a.data()[[y, x, c]].min(b.data()[[y, x, c]]);
                let hi = a.data()[[y, x, c]].max(b.data()[[y, x, c]]);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
