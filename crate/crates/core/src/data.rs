//! Class-per-directory datasets, stratified splitting, image loading and a
//! synthetic grating dataset.
//!
//! Layout on disk is `root/<class>/<image>` with `jpg`, `jpeg`, `png`, `tif`
//! or `tiff` files. Classes are indexed in lexicographic directory order.
//! Images are decoded as RGB, resized bilinearly, divided by 255 and then
//! normalized per channel as `(x - mean) / std`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png", "tif", "tiff"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset root {path} is not a readable directory: {source}")]
    Root {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset root {0} needs at least 2 class directories")]
    TooFewClasses(PathBuf),
    #[error("class '{0}' has no readable images")]
    EmptyClass(String),
    #[error("failed to load image {path}: {detail}")]
    Load { path: PathBuf, detail: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("sample index {index} out of range for {len} samples")]
    Index { index: usize, len: usize },
    #[error("manifest io error at {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Path relative to the manifest root.
    pub path: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub split_ratio: f64,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DataError::Manifest {
            path: PathBuf::new(),
            detail: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            DataError::Manifest { detail, .. } => DataError::Manifest {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })
    }
}

/// Number of test samples for a class of `n` images: `floor(n * (1 - ratio))`.
/// The remainder goes to train.
pub fn test_count(n: usize, ratio: f64) -> usize {
    ((n as f64) * (1.0 - ratio) + 1e-9).floor() as usize
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let read = fs::read_dir(dir).map_err(|source| DataError::Root {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out: Vec<PathBuf> = read.filter_map(|e| e.ok().map(|e| e.path())).collect();
    out.sort();
    Ok(out)
}

/// Scan `root` and split each class with a seeded shuffle.
///
/// Unreadable images are skipped with a warning. The same arguments always
/// produce identical manifests.
pub fn scan_and_split(root: &Path, seed: u64, ratio: f64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::Argument(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(DataError::TooFewClasses(root.to_path_buf()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = Vec::with_capacity(class_dirs.len());
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().expect("directory has a name").to_string_lossy().into_owned();
        let mut files = Vec::new();
        for path in sorted_entries(dir)? {
            if !path.is_file() || !has_image_extension(&path) {
                continue;
            }
            match image::image_dimensions(&path) {
                Ok(_) => {
                    let rel = path.strip_prefix(root).expect("under root");
                    files.push(rel.to_string_lossy().replace('\\', "/"));
                }
                Err(e) => log::warn!("skipping unreadable image {}: {e}", path.display()),
            }
        }
        if files.is_empty() {
            return Err(DataError::EmptyClass(name));
        }
        files.shuffle(&mut rng);
        let n_test = test_count(files.len(), ratio);
        for (k, path) in files.into_iter().enumerate() {
            let sample = Sample { path, label };
            if k < n_test {
                test.push(sample);
            } else {
                train.push(sample);
            }
        }
        classes.push(name);
    }
    let sort = |v: &mut Vec<Sample>| v.sort_by(|a, b| (a.label, &a.path).cmp(&(b.label, &b.path)));
    sort(&mut train);
    sort(&mut test);
    let make = |samples| DatasetManifest {
        root: root.to_path_buf(),
        classes: classes.clone(),
        samples,
        seed,
        split_ratio: ratio,
    };
    Ok((make(train), make(test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(DataError::Argument(format!("invalid normalization {self:?}")));
        }
        Ok(())
    }

    /// Bounds of normalized values for inputs in `[0, 1]`.
    pub fn range(&self, channel: usize) -> (f32, f32) {
        let (m, s) = (self.mean[channel], self.std[channel]);
        (-m / s, (1.0 - m) / s)
    }
}

/// Load images as a `(batch, height, width, 3)` tensor plus labels.
pub fn load_batch(
    manifest: &DatasetManifest,
    indices: &[usize],
    target_hw: (usize, usize),
    norm: &Normalization,
) -> Result<(Array4<f32>, Vec<usize>)> {
    norm.validate()?;
    let (h, w) = target_hw;
    if h == 0 || w == 0 {
        return Err(DataError::Argument("target size must be positive".into()));
    }
    let mut out = Array4::<f32>::zeros((indices.len(), h, w, 3));
    let mut labels = Vec::with_capacity(indices.len());
    for (b, &idx) in indices.iter().enumerate() {
        let sample = manifest.samples.get(idx).ok_or(DataError::Index {
            index: idx,
            len: manifest.len(),
        })?;
        let path = manifest.root.join(&sample.path);
        let img = image::open(&path)
            .map_err(|e| DataError::Load {
                path: path.clone(),
                detail: e.to_string(),
            })?
            .to_rgb8();
        let img = if img.dimensions() == (w as u32, h as u32) {
            img
        } else {
            image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
        };
        let mut view = out.slice_mut(s![b, .., .., ..]);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                let v = f32::from(px.0[c]) / 255.0;
                view[[y as usize, x as usize, c]] = (v - norm.mean[c]) / norm.std[c];
            }
        }
        labels.push(sample.label);
    }
    Ok((out, labels))
}

/// A batch in `(batch, channels, height, width)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
}

pub trait Dataset {
    fn len(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn batch(&self, indices: &[usize]) -> Result<Batch>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryDataset {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
}

impl InMemoryDataset {
    pub fn new(images: Array4<f32>, labels: Vec<usize>, classes: Vec<String>) -> Result<Self> {
        if images.dim().0 != labels.len() {
            return Err(DataError::Argument(format!(
                "{} images but {} labels",
                images.dim().0,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(DataError::Argument(format!("label {bad} out of range")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let batch = self.batch(indices)?;
        Ok(Self {
            images: batch.images,
            labels: batch.labels,
            classes: self.classes.clone(),
        })
    }

    pub fn input_hw(&self) -> (usize, usize) {
        let (_, _, h, w) = self.images.dim();
        (h, w)
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(DataError::Index {
                index: bad,
                len: self.len(),
            });
        }
        Ok(Batch {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

/// Images read from disk on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct FolderDataset {
    pub manifest: DatasetManifest,
    pub input_hw: (usize, usize),
    pub norm: Normalization,
}

impl FolderDataset {
    /// Decode every image once into memory.
    pub fn preload(&self) -> Result<InMemoryDataset> {
        let all: Vec<usize> = (0..self.manifest.len()).collect();
        let batch = self.batch(&all)?;
        InMemoryDataset::new(batch.images, batch.labels, self.manifest.classes.clone())
    }
}

impl Dataset for FolderDataset {
    fn len(&self) -> usize {
        self.manifest.len()
    }

    fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let (nhwc, labels) = load_batch(&self.manifest, indices, self.input_hw, &self.norm)?;
        let images = nhwc.permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned();
        Ok(Batch { images, labels })
    }
}

/// Mirror the selected samples of an NCHW batch left to right.
pub fn hflip(images: &mut Array4<f32>, which: &[bool]) {
    for (b, &flip) in which.iter().enumerate() {
        if flip {
            let mirrored = images.slice(s![b, .., .., ..;-1]).to_owned();
            images.slice_mut(s![b, .., .., ..]).assign(&mirrored);
        }
    }
}

/// Oriented sinusoidal gratings, one orientation per class, with seeded
/// jitter in angle, frequency, phase, tint and pixel noise.
///
/// Labels are interleaved (`i % classes`) so any prefix is nearly balanced.
pub fn make_synthetic(classes: usize, per_class: usize, hw: (usize, usize), seed: u64) -> Result<InMemoryDataset> {
    if classes < 2 {
        return Err(DataError::Argument(format!("need at least 2 classes, got {classes}")));
    }
    if per_class == 0 || hw.0 == 0 || hw.1 == 0 {
        return Err(DataError::Argument("per_class and image size must be positive".into()));
    }
    let (h, w) = hw;
    let total = classes * per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, 0.25).expect("valid std");
    let jitter = Normal::new(0.0f64, 0.15).expect("valid std");
    let mut images = Array4::<f32>::zeros((total, 3, h, w));
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let label = i % classes;
        let theta = std::f64::consts::PI * label as f64 / classes as f64 + jitter.sample(&mut rng);
        let freq = rng.gen_range(0.12..0.22);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let contrast = rng.gen_range(0.08..0.2);
        let tint: [f64; 3] = [rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2)];
        let (sin_t, cos_t) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 * cos_t + y as f64 * sin_t;
                let base = contrast * (std::f64::consts::TAU * freq * u + phase).sin();
                for (c, t) in tint.iter().enumerate() {
                    let v = 0.5 + base * t + noise.sample(&mut rng);
                    images[[i, c, y, x]] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        labels.push(label);
    }
    let names = (0..classes).map(|c| format!("class{c}")).collect();
    InMemoryDataset::new(images, labels, names)
}

/// Synthetic train/test pair: `train_per_class` samples per class for
/// training and `test_total` held-out samples from an independent stream,
/// interleaved across classes.
pub fn synthetic_split(
    classes: usize,
    train_per_class: usize,
    test_total: usize,
    hw: (usize, usize),
    seed: u64,
) -> Result<(InMemoryDataset, InMemoryDataset)> {
    if test_total == 0 {
        return Err(DataError::Argument("test_total must be positive".into()));
    }
    let train = make_synthetic(classes, train_per_class, hw, seed)?;
    let pool = make_synthetic(classes, test_total.div_ceil(classes), hw, seed.wrapping_add(0x5eed))?;
    let test = pool.subset(&(0..test_total).collect::<Vec<_>>())?;
    Ok((train, test))
}

/// The 200-train / 50-test, 4-class, 32x32 desk benchmark.
pub fn desk_benchmark(seed: u64) -> (InMemoryDataset, InMemoryDataset) {
    synthetic_split(4, 50, 50, (32, 32), seed).expect("valid arguments")
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_tree(root: &Path, counts: &[(&str, usize)]) {
        for (class, n) in counts {
            let dir = root.join(class);
            fs::create_dir_all(&dir).unwrap();
            for k in 0..*n {
                let img = RgbImage::from_pixel(4, 4, Rgb([k as u8 * 10, 20, 30]));
                img.save(dir.join(format!("img{k:02}.png"))).unwrap();
            }
        }
    }

    #[test]
    fn exact_split() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), &[("a", 10), ("b", 10)]);
        let (train, test) = scan_and_split(dir.path(), 1, 0.8).unwrap();
        assert_eq!(train.class_counts(), vec![8, 8]);
        assert_eq!(test.class_counts(), vec![2, 2]);
    }

    #[test]
    fn nine_images_floor_policy() {
        assert_eq!(test_count(9, 0.8), 1);
        assert_eq!(test_count(10, 0.8), 2);
        assert_eq!(test_count(1, 0.8), 0);
        assert_eq!(test_count(5, 0.8), 1);
    }

    #[test]
    fn skips_unreadable_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), &[("a", 3), ("b", 2)]);
        fs::write(dir.path().join("a/broken.png"), b"not an image").unwrap();
        fs::write(dir.path().join("a/notes.txt"), b"ignored").unwrap();
        let (train, test) = scan_and_split(dir.path(), 0, 0.8).unwrap();
        assert_eq!(train.len() + test.len(), 5);

        fs::create_dir(dir.path().join("c_empty")).unwrap();
        match scan_and_split(dir.path(), 0, 0.8) {
            Err(DataError::EmptyClass(name)) => assert_eq!(name, "c_empty"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_single_class_and_bad_ratio() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), &[("only", 3)]);
        assert!(matches!(
            scan_and_split(dir.path(), 0, 0.8),
            Err(DataError::TooFewClasses(_))
        ));
        assert!(scan_and_split(dir.path(), 0, 1.0).is_err());
        assert!(matches!(
            scan_and_split(&dir.path().join("missing"), 0, 0.8),
            Err(DataError::Root { .. })
        ));
    }

    #[test]
    fn solid_color_survives_resize() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["a", "b"] {
            fs::create_dir(dir.path().join(class)).unwrap();
            RgbImage::from_pixel(8, 8, Rgb([200, 100, 50]))
                .save(dir.path().join(class).join("x.png"))
                .unwrap();
        }
        let (train, _) = scan_and_split(dir.path(), 0, 0.5).unwrap();
        let (x, labels) = load_batch(&train, &[0, 1], (224, 224), &Normalization::default()).unwrap();
        assert_eq!(x.dim(), (2, 224, 224, 3));
        assert_eq!(labels, vec![0, 1]);
        let expect = [200.0 / 255.0, 100.0 / 255.0, 50.0 / 255.0];
        for ((_, _, _, c), v) in x.indexed_iter() {
            assert!((v - expect[c]).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn corrupt_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), &[("a", 1), ("b", 1)]);
        let (train, _) = scan_and_split(dir.path(), 0, 0.5).unwrap();
        let victim = dir.path().join(&train.samples[0].path);
        // Valid header, truncated body.
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        match load_batch(&train, &[0], (4, 4), &Normalization::default()) {
            Err(DataError::Load { path, .. }) => assert_eq!(path, victim),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_is_balanced_and_seeded() {
        let a = make_synthetic(4, 50, (32, 32), 7).unwrap();
        assert_eq!(a.len(), 200);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 50);
        }
        assert!(a.images.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, make_synthetic(4, 50, (32, 32), 7).unwrap());
        assert_ne!(a.images, make_synthetic(4, 50, (32, 32), 8).unwrap().images);
        assert!(make_synthetic(1, 5, (8, 8), 0).is_err());
    }

    #[test]
    fn desk_benchmark_sizes() {
        let (train, test) = desk_benchmark(0);
        assert_eq!(train.len(), 200);
        assert_eq!(test.len(), 50);
        let counts: Vec<usize> = (0..4).map(|c| test.labels.iter().filter(|&&l| l == c).count()).collect();
        assert_eq!(counts, vec![13, 13, 12, 12]);
    }

    #[test]
    fn flip_mirrors_width() {
        let mut x = Array4::from_shape_fn((2, 1, 1, 3), |(b, _, _, w)| (b * 10 + w) as f32);
        hflip(&mut x, &[true, false]);
        assert_eq!(x.iter().copied().collect::<Vec<_>>(), vec![2.0, 1.0, 0.0, 10.0, 11.0, 12.0]);
    }
}
