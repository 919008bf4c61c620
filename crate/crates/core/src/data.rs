//! MNIST (IDX) and CIFAR-10 (binary batch) loaders, plus stratified subsetting.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

pub const MNIST_CLASS_NAMES: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
pub const CIFAR10_CLASS_NAMES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// Images `N x C x H x W` in `[0, 1]` with integer labels and class names.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.shape().len() != 4 || images.batch_size() != labels.len() {
            return Err(Error::Shape {
                context: "dataset images vs labels".into(),
                expected: vec![labels.len()],
                actual: images.shape().to_vec(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_names.len()) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                class_count: class_names.len(),
            });
        }
        Ok(Self {
            images,
            labels,
            class_names,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample image shape `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn per_class_total(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.class_count()];
        for &l in &self.labels {
            totals[l] += 1;
        }
        totals
    }

    /// The samples at `rows`, in the given order.
    pub fn select(&self, rows: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.gather_batch(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("file ends inside header at byte {offset}")))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "expected {expected} bytes for {n} images of {rows}x{cols}, found {}",
                bytes.len()
            ),
        ));
    }
    let pixels = bytes[16..].iter().map(|&p| p as f32 / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {n} labels, found {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads an MNIST-style IDX image/label file pair.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(ip)?, ip)?;
    let labels = parse_idx_labels(&read_file(lp)?, lp)?;
    if labels.len() != n {
        return Err(Error::format(
            lp,
            format!("{} labels but {} has {n} images", labels.len(), ip.display()),
        ));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let images = Tensor::new(vec![n, 1, rows, cols], pixels)?;
    let names = MNIST_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    LabeledDataset::new(images, labels, names).map_err(|e| match e {
        Error::LabelOutOfRange { index, label, .. } => {
            Error::format(lp, format!("label {label} at sample {index} is not a digit"))
        }
        other => other,
    })
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<LabeledDataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in batch_paths {
        let path = p.as_ref();
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::format(
                path,
                format!(
                    "length {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
                    bytes.len()
                ),
            ));
        }
        for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
            let label = record[0] as usize;
            if label >= CIFAR10_CLASS_NAMES.len() {
                return Err(Error::format(path, format!("label {label} in record {i}")));
            }
            labels.push(label);
            pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    let names = CIFAR10_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    LabeledDataset::new(images, labels, names)
}

/// Per-class quotas summing to `n`, as even as the class sizes allow.
///
/// Each round splits what is left equally over classes that still have spare
/// samples; a remainder smaller than the number of such classes goes one each
/// to the lowest class indices.
fn stratified_quotas(available: &[u64], n: u64) -> Vec<u64> {
    let mut quota = vec![0u64; available.len()];
    let mut remaining = n;
    while remaining > 0 {
        let open: Vec<usize> = (0..available.len()).filter(|&c| quota[c] < available[c]).collect();
        debug_assert!(!open.is_empty());
        let share = remaining / open.len() as u64;
        if share == 0 {
            for &c in open.iter().take(remaining as usize) {
                quota[c] += 1;
            }
            break;
        }
        for c in open {
            let give = share.min(available[c] - quota[c]);
            quota[c] += give;
            remaining -= give;
        }
    }
    quota
}

/// Seeded class-stratified sample of `n` samples without replacement.
///
/// Selected samples keep their original relative order, so `n == len()`
/// returns the dataset unchanged.
pub fn subset(data: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || n > data.len() {
        return Err(Error::InvalidArgument(format!(
            "subset size {n} must be in 1..={}",
            data.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count()];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let available: Vec<u64> = by_class.iter().map(|v| v.len() as u64).collect();
    let quotas = stratified_quotas(&available, n as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for (members, &q) in by_class.iter().zip(&quotas) {
        if q == 0 {
            continue;
        }
        rows.extend(
            index::sample(&mut rng, members.len(), q as usize)
                .into_iter()
                .map(|j| members[j]),
        );
    }
    rows.sort_unstable();
    Ok(data.select(&rows))
}
