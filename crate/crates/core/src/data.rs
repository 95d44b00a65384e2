//! Dataset ingestion from class-folder trees, class balancing, stratified
//! train/test splitting with per-item attack assignments, and a seeded
//! synthetic 4-class phantom generator for desk-scale runs.

use crate::numerics::{NumericsError, RngStream, Tensor};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset root {0} has no class subdirectories")]
    NoClasses(PathBuf),
    #[error("class directory {0} contains no images")]
    EmptyClass(PathBuf),
    #[error("cannot decode image {path}: {reason}")]
    BadImage { path: PathBuf, reason: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("class '{0}' has fewer than 2 samples; cannot split")]
    ClassTooSmall(String),
    #[error("split fraction {0} outside (0, 1)")]
    BadFraction(f32),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One grayscale image with its class index and a stable name for manifests.
#[derive(Debug, Clone)]
pub struct DataItem {
    /// `[1, H, W]` pixels in [0,1].
    pub image: Tensor,
    pub label: usize,
    pub name: String,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub items: Vec<DataItem>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for item in &self.items {
            counts[item.label] += 1;
        }
        counts
    }
}

/// Load `root/<class_name>/*.png` (8-bit grayscale), resized to
/// `image_size` x `image_size` with corner-aligned bilinear sampling and
/// scaled to [0,1]. Class indices follow sorted directory names.
pub fn load_dataset(root: &Path, image_size: usize) -> Result<Dataset, DataError> {
    let read_dir = |p: &Path| {
        std::fs::read_dir(p).map_err(|source| DataError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let mut class_dirs: Vec<PathBuf> = Vec::new();
    for entry in read_dir(root)? {
        let entry = entry.map_err(|source| DataError::Io {
            path: root.to_path_buf(),
            source,
        })?;
        if entry.path().is_dir() {
            class_dirs.push(entry.path());
        }
    }
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses(root.to_path_buf()));
    }
    let mut dataset = Dataset::default();
    for (label, dir) in class_dirs.iter().enumerate() {
        let class_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = Vec::new();
        for entry in read_dir(dir)? {
            let entry = entry.map_err(|source| DataError::Io {
                path: dir.clone(),
                source,
            })?;
            if entry.path().is_file() {
                files.push(entry.path());
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(DataError::EmptyClass(dir.clone()));
        }
        for file in files {
            let image = load_grayscale(&file, image_size)?;
            let name = format!(
                "{class_name}/{}",
                file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
            );
            dataset.items.push(DataItem {
                image,
                label,
                name,
            });
        }
        dataset.class_names.push(class_name);
    }
    Ok(dataset)
}

fn load_grayscale(path: &Path, size: usize) -> Result<Tensor, DataError> {
    let img = image::open(path).map_err(|e| DataError::BadImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let src: Vec<f32> = gray.as_raw().iter().map(|&p| f32::from(p) / 255.0).collect();
    let resized = resize_bilinear(h, w, &src, size, size);
    Ok(Tensor::from_vec(&[1, size, size], resized)?)
}

/// Corner-aligned bilinear resampling; identity when sizes match.
pub fn resize_bilinear(
    src_h: usize,
    src_w: usize,
    src: &[f32],
    dst_h: usize,
    dst_w: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; dst_h * dst_w];
    let scale_y = if dst_h > 1 {
        (src_h - 1) as f64 / (dst_h - 1) as f64
    } else {
        0.0
    };
    let scale_x = if dst_w > 1 {
        (src_w - 1) as f64 / (dst_w - 1) as f64
    } else {
        0.0
    };
    for i in 0..dst_h {
        let fy = i as f64 * scale_y;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = (fy - y0 as f64) as f32;
        for j in 0..dst_w {
            let fx = j as f64 * scale_x;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = (fx - x0 as f64) as f32;
            let top = src[y0 * src_w + x0] * (1.0 - wx) + src[y0 * src_w + x1] * wx;
            let bottom = src[y1 * src_w + x0] * (1.0 - wx) + src[y1 * src_w + x1] * wx;
            out[i * dst_w + j] = top * (1.0 - wy) + bottom * wy;
        }
    }
    out
}

/// Resample every class to the mean class count (floor): majority classes
/// are subsampled without replacement, minority classes keep their items and
/// add duplicates drawn with replacement.
pub fn balance(dataset: &Dataset, seed: u64) -> Dataset {
    let counts = dataset.class_counts();
    if counts.is_empty() {
        return dataset.clone();
    }
    let target = counts.iter().sum::<usize>() / counts.len();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in dataset.items.iter().enumerate() {
        by_class.entry(item.label).or_default().push(i);
    }
    let root = RngStream::seed(seed).derive("balance");
    let mut items = Vec::new();
    for (class, indices) in by_class {
        let mut stream = root.derive_index(class as u64);
        if indices.len() == target {
            items.extend(indices);
        } else if indices.len() > target {
            let mut pool = indices;
            stream.shuffle(&mut pool);
            pool.truncate(target);
            pool.sort_unstable();
            items.extend(pool);
        } else {
            items.extend(&indices);
            for _ in indices.len()..target {
                let pick = stream.next_below(indices.len() as u64) as usize;
                items.push(indices[pick]);
            }
        }
    }
    Dataset {
        items: items
            .into_iter()
            .map(|i| dataset.items[i].clone())
            .collect(),
        class_names: dataset.class_names.clone(),
    }
}

/// Computes the balanced per-class target for a list of counts.
pub fn balance_target(counts: &[usize]) -> usize {
    counts.iter().sum::<usize>() / counts.len().max(1)
}

/// How the 20% test split is partitioned across clean and attack groups.
#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub train_fraction: f32,
    pub clean_test_fraction: f32,
    pub attack_kinds: Vec<String>,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            clean_test_fraction: 0.37,
            attack_kinds: default_attack_kinds(),
            seed: 0,
        }
    }
}

/// The seven evaluated attacks.
pub fn default_attack_kinds() -> Vec<String> {
    ["fgsm", "bim", "pgd", "dwt_fgsm", "dwt_pgd", "dwt_autopgd", "spectrum"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// One test item with its attack assignment (`None` = stays clean).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestAssignment {
    pub index: usize,
    pub attack: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<TestAssignment>,
}

/// Stratified-by-class train/test split, then a largest-remainder partition
/// of the test set into clean and per-attack shares.
pub fn split(dataset: &Dataset, plan: &SplitPlan) -> Result<Split, DataError> {
    if dataset.is_empty() {
        return Err(DataError::Empty);
    }
    for f in [plan.train_fraction, plan.clean_test_fraction] {
        if !(0.0..1.0).contains(&f) || f == 0.0 {
            return Err(DataError::BadFraction(f));
        }
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in dataset.items.iter().enumerate() {
        by_class.entry(item.label).or_default().push(i);
    }
    let root = RngStream::seed(plan.seed).derive("split");
    let mut train = Vec::new();
    let mut test_pool = Vec::new();
    for (class, mut indices) in by_class {
        if indices.len() < 2 {
            let name = dataset
                .class_names
                .get(class)
                .cloned()
                .unwrap_or_else(|| class.to_string());
            return Err(DataError::ClassTooSmall(name));
        }
        root.derive_index(class as u64).shuffle(&mut indices);
        let n = indices.len();
        let want = (plan.train_fraction * n as f32).round() as usize;
        let take = want.clamp(1, n - 1);
        train.extend_from_slice(&indices[..take]);
        test_pool.extend_from_slice(&indices[take..]);
    }
    root.derive("assign").shuffle(&mut test_pool);

    // Largest-remainder apportionment over clean + attack groups.
    let n_test = test_pool.len();
    let mut shares = vec![f64::from(plan.clean_test_fraction)];
    let attack_share =
        (1.0 - f64::from(plan.clean_test_fraction)) / plan.attack_kinds.len().max(1) as f64;
    shares.extend(std::iter::repeat(attack_share).take(plan.attack_kinds.len()));
    let quotas: Vec<f64> = shares.iter().map(|s| s * n_test as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = quotas
        .iter()
        .enumerate()
        .map(|(i, q)| (i, q - q.floor()))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..n_test - assigned {
        counts[remainders[k % remainders.len()].0] += 1;
    }

    let mut test = Vec::with_capacity(n_test);
    let mut cursor = 0usize;
    for (group, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let index = test_pool[cursor];
            cursor += 1;
            let attack = if group == 0 {
                None
            } else {
                Some(plan.attack_kinds[group - 1].clone())
            };
            test.push(TestAssignment { index, attack });
        }
    }
    train.sort_unstable();
    Ok(Split { train, test })
}

/// Brain-like 4-class phantoms: a fixed outer ellipse, a ventricle ellipse
/// whose radius grows with class index, sinusoidal cortical texture whose
/// frequency varies with class, and Gaussian pixel noise (std 0.02).
pub fn generate_synthetic(per_class: usize, size: usize, seed: u64) -> Dataset {
    let class_names: Vec<String> = (0..4).map(|c| format!("grade{c}")).collect();
    let root = RngStream::seed(seed).derive("synthetic");
    let mut items = Vec::with_capacity(per_class * 4);
    for class in 0..4usize {
        let class_stream = root.derive_index(class as u64);
        for idx in 0..per_class {
            let mut stream = class_stream.derive_index(idx as u64);
            let image = phantom(size, class, &mut stream);
            items.push(DataItem {
                image,
                label: class,
                name: format!("{}/{idx:04}.png", class_names[class]),
            });
        }
    }
    Dataset { items, class_names }
}

fn phantom(size: usize, class: usize, stream: &mut RngStream) -> Tensor {
    let n = size as f32;
    // Per-image jitter keeps the generator from collapsing to 4 templates.
    let cx = 0.5 + stream.uniform(-0.02, 0.02);
    let cy = 0.5 + stream.uniform(-0.02, 0.02);
    let scale = stream.uniform(0.95, 1.05);
    let outer_a = 0.42 * scale;
    let outer_b = 0.35 * scale;
    let ventricle_r = (0.07 + 0.045 * class as f32) * stream.uniform(0.92, 1.08);
    let texture_freq = 3.0 + 2.0 * class as f32;
    let texture_phase = stream.uniform(0.0, std::f32::consts::TAU);

    let mut data = vec![0.0f32; size * size];
    for i in 0..size {
        for j in 0..size {
            let u = (j as f32 + 0.5) / n - cx;
            let v = (i as f32 + 0.5) / n - cy;
            let outer = (u / outer_a).powi(2) + (v / outer_b).powi(2);
            let ventricle = (u / ventricle_r).powi(2) + (v / (0.65 * ventricle_r)).powi(2);
            let mut value = 0.03;
            if outer <= 1.0 {
                value = if outer > 0.85 {
                    0.85 // skull rim
                } else if ventricle <= 1.0 {
                    0.12 // ventricle interior
                } else {
                    let tex = (std::f32::consts::TAU * texture_freq * u + texture_phase).sin()
                        * (std::f32::consts::TAU * texture_freq * v).sin();
                    0.55 + 0.12 * tex
                };
            }
            value += stream.normal(0.0, 0.02);
            data[i * size + j] = value.clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(&[1, size, size], data).expect("phantom buffer sized to shape")
}
