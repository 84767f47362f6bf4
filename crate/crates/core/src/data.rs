//! Dataset representation, class splits, and episodic sampling.

use crate::error::{Error, Result};
use crate::rng::Rng;
use ndarray::Array3;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

/// Declared value range of image tensors, `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValueRange {
    pub const UNIT_SIGNED: ValueRange = ValueRange { lo: -1.0, hi: 1.0 };

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

impl Default for ValueRange {
    fn default() -> Self {
        ValueRange::UNIT_SIGNED
    }
}

/// An `H x W x 3` image with values inside a declared range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>, range: ValueRange) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::ShapeMismatch {
                expected: "H x W x 3".into(),
                got: format!("{:?}", data.dim()),
            });
        }
        if range.hi <= range.lo {
            return Err(Error::config(format!(
                "invalid value range [{}, {}]",
                range.lo, range.hi
            )));
        }
        for &v in data.iter() {
            if !v.is_finite() || !range.contains(v) {
                return Err(Error::data(format!(
                    "pixel value {v} outside declared range [{}, {}]",
                    range.lo, range.hi
                )));
            }
        }
        Ok(ImageTensor { data, range })
    }

    /// Construct, clamping values into the range (used after numeric ops
    /// whose rounding may overshoot by an ulp).
    pub fn new_clamped(mut data: Array3<f64>, range: ValueRange) -> Result<Self> {
        data.mapv_inplace(|v| v.clamp(range.lo, range.hi));
        ImageTensor::new(data, range)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Channel-first copy `[3,H,W]` for network input.
    pub fn to_chw(&self) -> Array3<f64> {
        let (h, w, _) = self.data.dim();
        let mut out = Array3::<f64>::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[c, y, x]] = self.data[[y, x, c]];
                }
            }
        }
        out
    }

    pub fn from_chw(chw: &Array3<f64>, range: ValueRange) -> Result<Self> {
        let (c, h, w) = chw.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch {
                expected: "3 x H x W".into(),
                got: format!("{:?}", chw.dim()),
            });
        }
        let mut out = Array3::<f64>::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    out[[y, x, ch]] = chw[[ch, y, x]];
                }
            }
        }
        ImageTensor::new_clamped(out, range)
    }

    /// Content hash over dimensions, range, and raw f64 bytes.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let (h, w, c) = self.data.dim();
        hasher.update((h as u64).to_le_bytes());
        hasher.update((w as u64).to_le_bytes());
        hasher.update((c as u64).to_le_bytes());
        hasher.update(self.range.lo.to_le_bytes());
        hasher.update(self.range.hi.to_le_bytes());
        for &v in self.data.iter() {
            hasher.update(v.to_le_bytes());
        }
        hex_digest(&hasher.finalize())
    }

    /// Quantize into 8-bit RGB over the declared range.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, _) = self.data.dim();
        let mut buf = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let unit = (self.data[[y, x, c]] - self.range.lo) / self.range.width();
                    buf.push((unit * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage, range: ValueRange) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Array3::<f64>::zeros((h as usize, w as usize, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] =
                    range.lo + (px.0[c] as f64 / 255.0) * range.width();
            }
        }
        ImageTensor { data, range }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::data(format!("failed to write {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path, range: ValueRange) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::data(format!("failed to decode {}: {e}", path.display())))?;
        Ok(ImageTensor::from_rgb8(&img.to_rgb8(), range))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Class identifier as it appears in manifests and split specs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub label: ClassId,
}

/// Disjoint base / validation / novel class pools.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub base: BTreeSet<ClassId>,
    pub val: BTreeSet<ClassId>,
    pub novel: BTreeSet<ClassId>,
}

impl ClassSplit {
    pub fn new(
        base: BTreeSet<ClassId>,
        val: BTreeSet<ClassId>,
        novel: BTreeSet<ClassId>,
    ) -> Result<Self> {
        if base.is_empty() || val.is_empty() || novel.is_empty() {
            return Err(Error::config("class split has an empty part".to_string()));
        }
        for (a, b, name) in [
            (&base, &val, "base/val"),
            (&base, &novel, "base/novel"),
            (&val, &novel, "val/novel"),
        ] {
            if let Some(c) = a.intersection(b).next() {
                return Err(Error::config(format!(
                    "class {} appears in both {} splits",
                    c, name
                )));
            }
        }
        Ok(ClassSplit { base, val, novel })
    }
}

/// How to derive a [`ClassSplit`] from the dataset's class inventory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSpec {
    Explicit {
        base: Vec<u32>,
        val: Vec<u32>,
        novel: Vec<u32>,
    },
    Ratios { ratios: [f64; 3], seed: u64 },
}

/// Build a class split from the full class inventory.
///
/// Ratio splits shuffle the sorted class list with the given seed, then
/// allocate `floor(ratio * total)` classes to val and novel; base takes
/// the remainder.
pub fn build_class_splits(classes: &BTreeSet<ClassId>, spec: &SplitSpec) -> Result<ClassSplit> {
    if classes.is_empty() {
        return Err(Error::data("dataset has no classes".to_string()));
    }
    match spec {
        SplitSpec::Explicit { base, val, novel } => {
            let base: BTreeSet<ClassId> = base.iter().map(|&c| ClassId(c)).collect();
            let val: BTreeSet<ClassId> = val.iter().map(|&c| ClassId(c)).collect();
            let novel: BTreeSet<ClassId> = novel.iter().map(|&c| ClassId(c)).collect();
            for c in base.iter().chain(&val).chain(&novel) {
                if !classes.contains(c) {
                    return Err(Error::config(format!("split lists unknown class {c}")));
                }
            }
            let split = ClassSplit::new(base, val, novel)?;
            let covered: BTreeSet<ClassId> = split
                .base
                .iter()
                .chain(&split.val)
                .chain(&split.novel)
                .copied()
                .collect();
            if &covered != classes {
                let missing: Vec<String> = classes
                    .difference(&covered)
                    .map(|c| c.to_string())
                    .collect();
                return Err(Error::config(format!(
                    "split does not cover classes: {}",
                    missing.join(", ")
                )));
            }
            Ok(split)
        }
        SplitSpec::Ratios { ratios, seed } => {
            let total: f64 = ratios.iter().sum();
            if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
                return Err(Error::config(format!(
                    "split ratios must be non-negative and sum to 1, got {ratios:?}"
                )));
            }
            let mut ordered: Vec<ClassId> = classes.iter().copied().collect();
            let mut rng = crate::rng::rng_from_seed(*seed);
            // Fisher-Yates over the sorted inventory.
            for i in (1..ordered.len()).rev() {
                let j = rng.random_range(0..=i);
                ordered.swap(i, j);
            }
            let n = ordered.len();
            let n_val = (ratios[1] * n as f64).floor() as usize;
            let n_novel = (ratios[2] * n as f64).floor() as usize;
            if n_val + n_novel >= n || n_val == 0 || n_novel == 0 {
                return Err(Error::config(format!(
                    "ratio split of {n} classes produces an empty part"
                )));
            }
            let n_base = n - n_val - n_novel;
            let base = ordered[..n_base].iter().copied().collect();
            let val = ordered[n_base..n_base + n_val].iter().copied().collect();
            let novel = ordered[n_base + n_val..].iter().copied().collect();
            ClassSplit::new(base, val, novel)
        }
    }
}

/// A sampled n-way-m-shot task.
#[derive(Debug, Clone)]
pub struct Episode {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub support: Vec<LabeledImage>,
    pub query: Vec<LabeledImage>,
    /// Original class id -> episode-local index, assigned by draw order.
    pub label_map: BTreeMap<ClassId, usize>,
}

impl Episode {
    pub fn local_label(&self, class: ClassId) -> usize {
        self.label_map[&class]
    }

    pub fn support_local_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| self.label_map[&s.label]).collect()
    }

    pub fn query_local_labels(&self) -> Vec<usize> {
        self.query.iter().map(|s| self.label_map[&s.label]).collect()
    }
}

/// Immutable image collection indexed by class.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<LabeledImage>,
    by_class: BTreeMap<ClassId, Vec<usize>>,
    height: usize,
    width: usize,
    range: ValueRange,
}

impl Dataset {
    pub fn new(images: Vec<LabeledImage>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::data("dataset is empty".to_string()))?;
        let (height, width) = (first.image.height(), first.image.width());
        let range = first.image.range();
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, li) in images.iter().enumerate() {
            if li.image.height() != height || li.image.width() != width {
                return Err(Error::ShapeMismatch {
                    expected: format!("{height} x {width}"),
                    got: format!("{} x {}", li.image.height(), li.image.width()),
                });
            }
            by_class.entry(li.label).or_default().push(i);
        }
        Ok(Dataset {
            images,
            by_class,
            height,
            width,
            range,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, index: usize) -> &LabeledImage {
        &self.images[index]
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.by_class.keys().copied().collect()
    }

    pub fn class_indices(&self, class: ClassId) -> Option<&[usize]> {
        self.by_class.get(&class).map(|v| v.as_slice())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }
}

/// Sample an episode from `class_pool`, without replacement within a class.
///
/// Draw order, which the replay oracle in the tests reproduces:
/// 1. sort the pool ascending, select `n` classes by partial Fisher-Yates
///    (`swap(i, random_range(i..len))` for `i in 0..n`);
/// 2. per selected class, in draw order: sort that class's dataset indices
///    ascending, select `m + q` by the same partial shuffle; the first `m`
///    are support, the next `q` are query.
pub fn sample_episode(
    dataset: &Dataset,
    class_pool: &BTreeSet<ClassId>,
    n: usize,
    m: usize,
    q: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if n == 0 || m == 0 || q == 0 {
        return Err(Error::config(format!(
            "episode shape must be positive, got n={n} m={m} q={q}"
        )));
    }
    if class_pool.len() < n {
        return Err(Error::data(format!(
            "class pool has {} classes, need n={n}",
            class_pool.len()
        )));
    }
    let mut pool: Vec<ClassId> = class_pool.iter().copied().collect();
    for i in 0..n {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut support = Vec::with_capacity(n * m);
    let mut query = Vec::with_capacity(n * q);
    let mut label_map = BTreeMap::new();
    for (local, &class) in pool[..n].iter().enumerate() {
        let indices = dataset
            .class_indices(class)
            .ok_or_else(|| Error::data(format!("class {class} not present in dataset")))?;
        if indices.len() < m + q {
            return Err(Error::data(format!(
                "class {class} has {} images, need m+q={}",
                indices.len(),
                m + q
            )));
        }
        let mut idxs: Vec<usize> = indices.to_vec();
        for i in 0..(m + q) {
            let j = rng.random_range(i..idxs.len());
            idxs.swap(i, j);
        }
        for &i in &idxs[..m] {
            support.push(dataset.get(i).clone());
        }
        for &i in &idxs[m..m + q] {
            query.push(dataset.get(i).clone());
        }
        label_map.insert(class, local);
    }
    Ok(Episode {
        n,
        m,
        q,
        support,
        query,
        label_map,
    })
}

/// Files skipped during ingestion, with reasons.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub skipped: Vec<(PathBuf, String)>,
}

#[derive(Debug)]
pub struct DirectoryLoad {
    pub images: Vec<LabeledImage>,
    pub report: IngestReport,
}

fn decode_resized(path: &Path, target: (usize, usize), range: ValueRange) -> std::result::Result<ImageTensor, String> {
    let img = image::open(path).map_err(|e| format!("decode failed: {e}"))?;
    let resized = img.resize_exact(
        target.1 as u32,
        target.0 as u32,
        image::imageops::FilterType::Triangle,
    );
    Ok(ImageTensor::from_rgb8(&resized.to_rgb8(), range))
}

/// Load a class-per-subdirectory image tree. Class ids are assigned by
/// sorted subdirectory name; undecodable files are skipped and recorded.
pub fn load_image_directory(
    path: &Path,
    target_size: (usize, usize),
    range: ValueRange,
) -> Result<DirectoryLoad> {
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::data(format!(
            "no class subdirectories under {}",
            path.display()
        )));
    }
    let mut images = Vec::new();
    let mut report = IngestReport::default();
    for (class_idx, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut loaded = 0usize;
        for file in files {
            match decode_resized(&file, target_size, range) {
                Ok(img) => {
                    images.push(LabeledImage {
                        image: img,
                        label: ClassId(class_idx as u32),
                    });
                    loaded += 1;
                }
                Err(reason) => {
                    log::warn!("skipping {}: {reason}", file.display());
                    report.skipped.push((file, reason));
                }
            }
        }
        if loaded == 0 {
            return Err(Error::data(format!(
                "class directory {} contains no decodable images",
                dir.display()
            )));
        }
    }
    Ok(DirectoryLoad { images, report })
}

/// Load a flat directory of images (no class structure).
pub fn load_flat_images(
    path: &Path,
    target_size: (usize, usize),
    range: ValueRange,
) -> Result<(Vec<ImageTensor>, IngestReport)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut images = Vec::new();
    let mut report = IngestReport::default();
    for file in files {
        match decode_resized(&file, target_size, range) {
            Ok(img) => images.push(img),
            Err(reason) => {
                log::warn!("skipping {}: {reason}", file.display());
                report.skipped.push((file, reason));
            }
        }
    }
    if images.is_empty() {
        return Err(Error::data(format!(
            "{} holds no decodable images",
            path.display()
        )));
    }
    Ok((images, report))
}

/// Load a `relative_path<TAB>class_id` manifest rooted at the manifest's
/// directory (or an explicit root).
pub fn load_manifest(
    manifest: &Path,
    root: Option<&Path>,
    target_size: (usize, usize),
    range: ValueRange,
) -> Result<DirectoryLoad> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let root = root
        .map(Path::to_path_buf)
        .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_path_buf());
    let mut images = Vec::new();
    let mut report = IngestReport::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (rel, class) = line.split_once('\t').ok_or_else(|| {
            Error::data(format!(
                "{}:{}: expected `path<TAB>class_id`",
                manifest.display(),
                lineno + 1
            ))
        })?;
        let class: u32 = class.trim().parse().map_err(|_| {
            Error::data(format!(
                "{}:{}: class id `{class}` is not an integer",
                manifest.display(),
                lineno + 1
            ))
        })?;
        let file = root.join(rel);
        match decode_resized(&file, target_size, range) {
            Ok(img) => images.push(LabeledImage {
                image: img,
                label: ClassId(class),
            }),
            Err(reason) => {
                log::warn!("skipping {}: {reason}", file.display());
                report.skipped.push((file, reason));
            }
        }
    }
    if images.is_empty() {
        return Err(Error::data(format!(
            "manifest {} yielded no images",
            manifest.display()
        )));
    }
    Ok(DirectoryLoad { images, report })
}
