//! Dataset ingestion (IDX), synthetic blob images and seeded subsampling.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images of shape `[C, H, W]` with pixels in `[0, 1]`, plus class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::arg(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {bad} >= class count {num_classes}")));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(Error::shape("images differ in shape"));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(Tensor::shape)
    }

    pub fn get(&self, i: usize) -> (&Tensor, usize) {
        (&self.images[i], self.labels[i])
    }

    /// Same data with a larger class count (e.g. an IDX file missing some digits).
    pub fn with_num_classes(self, num_classes: usize) -> Result<Self> {
        Self::new(self.images, self.labels, num_classes)
    }

    /// Items at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` items (all if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Mean pixel value over every image and channel.
    pub fn mean_pixel(&self) -> f32 {
        let (sum, n) = self
            .images
            .iter()
            .fold((0.0f64, 0usize), |(s, n), im| (s + im.sum(), n + im.numel()));
        if n == 0 {
            0.0
        } else {
            (sum / n as f64) as f32
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(format!("{what}: truncated header")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file into `[1, rows, cols]` tensors scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "images: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let plane = rows * cols;
    let body = &bytes[16..];
    let need = count
        .checked_mul(plane)
        .ok_or_else(|| Error::format("images: header dimensions overflow"))?;
    if body.len() < need {
        return Err(Error::format(format!(
            "images: truncated, header promises {count} images of {rows}x{cols} ({need} bytes), found {}",
            body.len()
        )));
    }
    if body.len() > need {
        return Err(Error::format(format!(
            "images: {} trailing bytes after {count} images",
            body.len() - need
        )));
    }
    Ok(body
        .chunks_exact(plane.max(1))
        .take(count)
        .map(|px| Tensor::new([1, rows, cols], px.iter().map(|&b| b as f32 / 255.0).collect()).expect("plane size"))
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "labels: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::format(format!(
            "labels: header promises {count} labels, found {} bytes",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair. The class count is `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&read_file(images_path.as_ref())?)
        .map_err(|e| Error::format(format!("{}: {e}", images_path.as_ref().display())))?;
    let labels = parse_idx_labels(&read_file(labels_path.as_ref())?)
        .map_err(|e| Error::format(format!("{}: {e}", labels_path.as_ref().display())))?;
    if images.len() != labels.len() {
        return Err(Error::format(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(images, labels, classes)
}

/// Encodes single-channel images as an IDX byte stream (pixels rounded to `v * 255`).
pub fn encode_idx_images(dataset: &Dataset) -> Result<Vec<u8>> {
    let (rows, cols) = match dataset.image_shape() {
        Some(&[1, h, w]) => (h, w),
        Some(other) => return Err(Error::shape(format!("IDX needs [1,H,W] images, got {other:?}"))),
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(16 + dataset.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, dataset.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for im in dataset.images() {
        out.extend(im.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn encode_idx_labels(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + dataset.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &l in dataset.labels() {
        let b = u8::try_from(l).map_err(|_| Error::arg(format!("label {l} does not fit a byte")))?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_idx(dataset: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    fs::write(images_path.as_ref(), encode_idx_images(dataset)?).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path.as_ref(), encode_idx_labels(dataset)?).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Parameters of the synthetic blob generator.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobConfig {
    pub n: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Blob radius (Gaussian sigma) as a fraction of the image width.
    pub sigma: f64,
    /// Std of additive pixel noise.
    pub noise: f64,
}

impl BlobConfig {
    pub fn new(n: usize, classes: usize, side: usize, seed: u64) -> Self {
        Self {
            n,
            classes,
            height: side,
            width: side,
            seed,
            sigma: 0.1,
            noise: 0.1,
        }
    }

    /// Blob center for `class` in pixel coordinates `(row, col)`.
    ///
    /// Centers sit on a circle of radius 0.3·size; consecutive classes are
    /// spread apart by stepping around the circle with a stride coprime to
    /// the class count.
    pub fn center(&self, class: usize) -> (f64, f64) {
        let k = self.classes.max(1);
        let mut step = (k / 2).max(1);
        while step > 1 && gcd(step, k) != 1 {
            step -= 1;
        }
        let slot = (class * step) % k;
        let angle = std::f64::consts::TAU * slot as f64 / k as f64;
        let (cy, cx) = ((self.height as f64 - 1.0) / 2.0, (self.width as f64 - 1.0) / 2.0);
        (
            cy + 0.3 * self.height as f64 * angle.sin(),
            cx + 0.3 * self.width as f64 * angle.cos(),
        )
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Class-conditional Gaussian blobs with pixel noise; labels cycle through the classes.
pub fn synthetic_blobs(cfg: &BlobConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.n < cfg.classes {
        return Err(Error::arg(format!(
            "need at least one image per class ({} images, {} classes)",
            cfg.n, cfg.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::arg(e.to_string()))?;
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let sigma = cfg.sigma * cfg.width as f64;
    let mut images = Vec::with_capacity(cfg.n);
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let class = i % cfg.classes;
        let (cy, cx) = cfg.center(class);
        let (cy, cx) = (cy + jitter.sample(&mut rng), cx + jitter.sample(&mut rng));
        let mut px = Vec::with_capacity(cfg.height * cfg.width);
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng);
                px.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        images.push(Tensor::new([1, cfg.height, cfg.width], px)?);
        labels.push(class);
    }
    Dataset::new(images, labels, cfg.classes)
}

/// `n` items drawn uniformly without replacement; deterministic in `seed`.
pub fn subsample(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > dataset.len() {
        return Err(Error::arg(format!(
            "cannot draw {n} samples from a dataset of {}",
            dataset.len()
        )));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = idx.partial_shuffle(&mut rng, n);
    let chosen = chosen.to_vec();
    Ok(dataset.select(&chosen))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut im = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 2, 2, 2] {
            im.extend_from_slice(&v.to_be_bytes());
        }
        im.extend_from_slice(&[0, 1, 128, 255, 255, 128, 1, 0]);
        let mut lb = Vec::new();
        for v in [IDX_LABELS_MAGIC, 2] {
            lb.extend_from_slice(&v.to_be_bytes());
        }
        lb.extend_from_slice(&[3, 7]);
        (im, lb)
    }

    #[test]
    fn parses_hand_built_fixture() {
        let (im, lb) = fixture();
        let images = parse_idx_images(&im).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].shape(), &[1, 2, 2]);
        assert_eq!(images[0].data(), &[0.0, 1.0 / 255.0, 128.0 / 255.0, 1.0]);
        assert_eq!(parse_idx_labels(&lb).unwrap(), vec![3, 7]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let (im, lb) = fixture();
        let mut wrong = lb.clone();
        wrong[3] = 0x03;
        assert!(matches!(parse_idx_labels(&wrong), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&lb), Err(Error::Format(_))));
        let mut big = im.clone();
        big[4..8].copy_from_slice(&60000u32.to_be_bytes());
        let err = parse_idx_images(&big).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        assert!(parse_idx_images(&im[..10]).is_err());
    }

    #[test]
    fn load_checks_count_agreement() {
        let dir = tempfile::tempdir().unwrap();
        let (im, lb) = fixture();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, &im).unwrap();
        fs::write(&lp, &lb).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.labels(), &[3, 7]);
        assert_eq!(ds.num_classes(), 8);
        let mut lb3 = lb.clone();
        lb3[7] = 3;
        lb3.push(1);
        fs::write(&lp, &lb3).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));
        assert!(matches!(
            load_idx(dir.path().join("missing"), &lp),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn idx_round_trip() {
        let ds = synthetic_blobs(&BlobConfig::new(12, 3, 9, 4)).unwrap();
        let im = encode_idx_images(&ds).unwrap();
        let back = Dataset::new(parse_idx_images(&im).unwrap(), ds.labels().to_vec(), 3).unwrap();
        assert_eq!(encode_idx_images(&back).unwrap(), im);
        assert_eq!(parse_idx_labels(&encode_idx_labels(&ds).unwrap()).unwrap(), ds.labels());
    }

    #[test]
    fn blobs_are_deterministic_and_bounded() {
        let cfg = BlobConfig::new(40, 4, 16, 9);
        let a = synthetic_blobs(&cfg).unwrap();
        assert_eq!(a, synthetic_blobs(&cfg).unwrap());
        assert!(a
            .images()
            .iter()
            .all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(synthetic_blobs(&BlobConfig::new(3, 4, 16, 0)).is_err());
    }

    #[test]
    fn blob_centers_are_separated() {
        for classes in [2, 3, 10] {
            let cfg = BlobConfig::new(100, classes, 28, 0);
            let (a, b) = (cfg.center(0), cfg.center(1));
            let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            assert!(d >= 28.0 / 4.0, "{classes} classes: {d}");
        }
    }

    #[test]
    fn nearest_centroid_separates_blobs() {
        let train = synthetic_blobs(&BlobConfig::new(200, 4, 16, 1)).unwrap();
        let test = synthetic_blobs(&BlobConfig::new(200, 4, 16, 2)).unwrap();
        let dim = 256;
        let mut centroids = vec![vec![0.0f64; dim]; 4];
        let mut counts = [0usize; 4];
        for (im, &l) in train.images().iter().zip(train.labels()) {
            counts[l] += 1;
            for (c, &v) in centroids[l].iter_mut().zip(im.data()) {
                *c += v as f64;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
        let correct = test
            .images()
            .iter()
            .zip(test.labels())
            .filter(|(im, &l)| {
                let d = |c: &Vec<f64>| -> f64 { c.iter().zip(im.data()).map(|(a, &b)| (a - b as f64).powi(2)).sum() };
                (0..4).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))) == Some(l)
            })
            .count();
        assert!(correct as f64 / 200.0 >= 0.9);
    }

    #[test]
    fn subsample_contract() {
        let ds = synthetic_blobs(&BlobConfig::new(50, 5, 8, 3)).unwrap();
        let all = subsample(&ds, 50, 1).unwrap();
        let mut a: Vec<_> = all.images().iter().map(|t| t.data().to_vec()).collect();
        let mut b: Vec<_> = ds.images().iter().map(|t| t.data().to_vec()).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(a, b);
        assert_eq!(subsample(&ds, 10, 4).unwrap(), subsample(&ds, 10, 4).unwrap());
        assert!(matches!(subsample(&ds, 51, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn balanced_subsample_stays_near_uniform() {
        let ds = synthetic_blobs(&BlobConfig::new(10_000, 10, 4, 0)).unwrap();
        let sub = subsample(&ds, 1000, 17).unwrap();
        let mut counts = [0usize; 10];
        sub.labels().iter().for_each(|&l| counts[l] += 1);
        for c in counts {
            assert!((c as f64 / 1000.0 - 0.1).abs() <= 0.05, "{counts:?}");
        }
    }
}
