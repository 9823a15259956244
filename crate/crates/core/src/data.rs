//! Image-classification datasets: IDX files, a synthetic stand-in, and
//! minibatch sampling.
//!
//! IDX layout (all header integers big-endian `u32`):
//!
//! | file   | magic        | header                     | payload               |
//! |--------|--------------|----------------------------|-----------------------|
//! | images | `0x00000803` | count, rows, cols          | `count*rows*cols` u8  |
//! | labels | `0x00000801` | count                      | `count` u8 in `0..=9` |
//!
//! Pixels are scaled to `[0, 1]` by dividing by 255 on load.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_DIM: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Mnist,
    Synthetic,
}

/// `n` images of `rows x cols` pixels in `[0, 1]` with labels in `0..10`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
    source: Source,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<u8>, rows: usize, cols: usize, source: Source) -> Result<Self> {
        let dim = rows * cols;
        if dim == 0 || images.len() != labels.len() * dim {
            return Err(Error::CountMismatch {
                images: if dim == 0 { 0 } else { images.len() / dim },
                labels: labels.len(),
            });
        }
        if let Some(p) = images.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidData(format!("pixel value {p} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::InvalidData(format!("label {l} outside 0..{NUM_CLASSES}")));
        }
        Ok(Dataset {
            images,
            labels,
            rows,
            cols,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.image_dim();
        &self.images[i * d..(i + 1) * d]
    }

    /// The first `n` examples (or all of them if there are fewer).
    pub fn subset(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_dim()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    /// `(images, one-hot labels)` for the given example indices.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let d = self.image_dim();
        let mut x = Vec::with_capacity(indices.len() * d);
        let mut y = vec![0.0; indices.len() * NUM_CLASSES];
        for (r, &i) in indices.iter().enumerate() {
            x.extend_from_slice(self.image(i));
            y[r * NUM_CLASSES + self.labels[i] as usize] = 1.0;
        }
        (
            Tensor::from_parts(vec![indices.len(), d], x),
            Tensor::from_parts(vec![indices.len(), NUM_CLASSES], y),
        )
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn check_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0);
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Parses an IDX image file and its label file.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = fs::read(ip)?;
    let lab = fs::read(lp)?;

    check_len(ip, &img, 16)?;
    check_magic(ip, &img, IMAGE_MAGIC)?;
    let (n_img, rows, cols) = (
        read_u32(&img, 4) as usize,
        read_u32(&img, 8) as usize,
        read_u32(&img, 12) as usize,
    );
    check_len(ip, &img, 16 + n_img * rows * cols)?;

    check_len(lp, &lab, 8)?;
    check_magic(lp, &lab, LABEL_MAGIC)?;
    let n_lab = read_u32(&lab, 4) as usize;
    check_len(lp, &lab, 8 + n_lab)?;

    if n_img != n_lab {
        return Err(Error::CountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }
    let images = img[16..16 + n_img * rows * cols]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels = lab[8..8 + n_lab].to_vec();
    Dataset::new(images, labels, rows, cols, Source::Mnist)
}

/// Writes `dataset` as IDX. Pixels are quantized to `round(255 p)`.
pub fn write_idx(dataset: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let n = dataset.len() as u32;
    let mut img = Vec::with_capacity(16 + dataset.images.len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&(dataset.rows as u32).to_be_bytes());
    img.extend_from_slice(&(dataset.cols as u32).to_be_bytes());
    img.extend(dataset.images.iter().map(|&p| (p * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + dataset.labels.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend_from_slice(&dataset.labels);
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Ten Gaussian class prototypes in 784 dimensions; each example is its
/// class prototype plus `N(0, 0.3²)` pixel noise, clipped to `[0, 1]`.
pub fn synthetic_fallback(seed: u64, n: usize) -> Result<Dataset> {
    if n < NUM_CLASSES {
        return Err(Error::arg("synthetic_fallback", format!("need at least {NUM_CLASSES} examples, got {n}")));
    }
    let mut rng = crate::seeded_rng(seed);
    let proto_dist = Normal::new(0.5, 0.25).expect("valid normal");
    let noise = Normal::new(0.0, 0.3).expect("valid normal");
    let prototypes: Vec<f64> = (0..NUM_CLASSES * IMAGE_DIM)
        .map(|_| proto_dist.sample(&mut rng))
        .collect();
    let class = Uniform::new(0, NUM_CLASSES as u8).expect("non-empty range");
    let mut images = Vec::with_capacity(n * IMAGE_DIM);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = class.sample(&mut rng);
        let proto = &prototypes[label as usize * IMAGE_DIM..(label as usize + 1) * IMAGE_DIM];
        images.extend(
            proto
                .iter()
                .map(|&p| (p + noise.sample(&mut rng)).clamp(0.0, 1.0)),
        );
        labels.push(label);
    }
    Dataset::new(images, labels, IMAGE_SIDE, IMAGE_SIDE, Source::Synthetic)
}

/// `size` distinct example indices drawn uniformly.
pub fn sample_minibatch<R: Rng + ?Sized>(dataset: &Dataset, size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if size == 0 {
        return Err(Error::Empty("minibatch"));
    }
    if size > dataset.len() {
        return Err(Error::arg(
            "sample_minibatch",
            format!("batch size {size} exceeds dataset size {}", dataset.len()),
        ));
    }
    Ok(index::sample(rng, dataset.len(), size).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn loads_minimal_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IMAGE_MAGIC, &[2, 28, 28]);
        img.extend(std::iter::repeat(255u8).take(784));
        img.extend(std::iter::repeat(0u8).take(784));
        let mut lab = header(LABEL_MAGIC, &[2]);
        lab.extend([7u8, 3]);
        let ds = load_idx(write_bytes(dir.path(), "i", &img), write_bytes(dir.path(), "l", &lab)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image(0)[0], 1.0);
        assert_eq!(ds.image(1)[5], 0.0);
        assert_eq!(ds.labels(), &[7, 3]);
        assert_eq!(ds.source(), Source::Mnist);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let mut img = header(IMAGE_MAGIC, &[1, 2, 2]);
        img.extend([0u8; 4]);
        let good_img = write_bytes(d, "img", &img);
        let mut lab = header(LABEL_MAGIC, &[1]);
        lab.push(1);
        let good_lab = write_bytes(d, "lab", &lab);
        assert!(load_idx(&good_img, &good_lab).is_ok());

        let swapped = load_idx(&good_lab, &good_img);
        assert!(matches!(swapped, Err(Error::BadMagic { .. }) | Err(Error::Truncated { .. })));

        let mut bad = img.clone();
        bad[3] = 0x01;
        let bad_magic = write_bytes(d, "bad", &bad);
        assert!(matches!(load_idx(&bad_magic, &good_lab), Err(Error::BadMagic { found: 0x801, .. })));

        let short = write_bytes(d, "short", &img[..18]);
        assert!(matches!(load_idx(&short, &good_lab), Err(Error::Truncated { .. })));

        let mut lab2 = header(LABEL_MAGIC, &[2]);
        lab2.extend([1u8, 2]);
        let two_labels = write_bytes(d, "lab2", &lab2);
        assert!(matches!(
            load_idx(&good_img, &two_labels),
            Err(Error::CountMismatch { images: 1, labels: 2 })
        ));
    }

    #[test]
    fn idx_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let synth = synthetic_fallback(5, 30).unwrap();
        write_idx(&synth, d.join("a.img"), d.join("a.lab")).unwrap();
        let loaded = load_idx(d.join("a.img"), d.join("a.lab")).unwrap();
        write_idx(&loaded, d.join("b.img"), d.join("b.lab")).unwrap();
        let reloaded = load_idx(d.join("b.img"), d.join("b.lab")).unwrap();
        assert_eq!(loaded, reloaded);
        assert_eq!(fs::read(d.join("a.img")).unwrap(), fs::read(d.join("b.img")).unwrap());
    }

    #[test]
    fn synthetic_is_deterministic_and_varied() {
        let a = synthetic_fallback(11, 100).unwrap();
        let b = synthetic_fallback(11, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthetic_fallback(12, 100).unwrap());
        assert_eq!(a.len(), 100);
        let mut seen = [false; NUM_CLASSES];
        for &l in a.labels() {
            seen[l as usize] = true;
        }
        assert!(seen.iter().filter(|&&s| s).count() > 5);
        assert!(synthetic_fallback(1, 9).is_err());
    }

    #[test]
    fn minibatch_sampling() {
        let ds = synthetic_fallback(0, 50).unwrap();
        let mut rng = crate::seeded_rng(1);
        let mut all = sample_minibatch(&ds, 50, &mut rng).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());

        let seq = |seed| {
            let mut rng = crate::seeded_rng(seed);
            (0..5).map(|_| sample_minibatch(&ds, 8, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(seq(9), seq(9));
        assert_ne!(seq(9)[0], seq(10)[0]);
        assert!(sample_minibatch(&ds, 51, &mut rng).is_err());
    }

    #[test]
    fn gather_builds_one_hot() {
        let ds = synthetic_fallback(2, 20).unwrap();
        let (x, y) = ds.gather(&[3, 4]);
        assert_eq!(x.shape(), &[2, IMAGE_DIM]);
        assert_eq!(y.shape(), &[2, NUM_CLASSES]);
        assert_eq!(y.data()[ds.labels()[3] as usize], 1.0);
        assert_eq!(y.sum(), 2.0);
    }
}
