//! Datasets: IDX ingestion, a synthetic blob generator, deterministic
//! subsetting and batching.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Images in `[0, 1]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: impl Into<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if images.rank() < 2 || images.rows() != labels.len() {
            return Err(Error::shape("dataset", images.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Domain(format!("label {bad} outside [0, {num_classes})")));
        }
        if let Some(&bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel {bad} outside [0, 1]")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split: split.into(),
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample, e.g. `[1, 28, 28]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Rows `idx`, in that order.
    pub fn take(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// The first `n` rows of a seeded permutation.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::Range {
                requested: n,
                available: self.len(),
            });
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng_for(seed, Stream::Subset, 0));
        idx.truncate(n);
        let mut out = self.take(&idx);
        out.provenance = format!("{} | subset n={n} seed={seed}", self.provenance);
        Ok(out)
    }

    /// Splits off the leading `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n > self.len() {
            return Err(Error::Range {
                requested: n,
                available: self.len(),
            });
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.take(&head), self.take(&tail)))
    }

    /// Index batches covering every row exactly once; the last partial
    /// batch is kept. With `shuffle`, the order is a Fisher-Yates
    /// permutation drawn from the `(seed, Shuffle, 0)` stream.
    pub fn batches(&self, batch_size: usize, shuffle: bool, seed: u64) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if shuffle {
            idx.shuffle(&mut rng_for(seed, Stream::Shuffle, 0));
        }
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Images and labels for the given row indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Images followed by labels, both in the tensor serialization format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let labels = Tensor::from_vec(self.labels.iter().map(|&l| l as f64).collect());
        let classes = Tensor::scalar(self.num_classes as f64);
        self.images
            .write_to(&mut w)
            .and_then(|_| labels.write_to(&mut w))
            .and_then(|_| classes.write_to(&mut w))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let images = Tensor::read_from(&mut r).map_err(|e| Error::io(path, e))?;
        let labels = Tensor::read_from(&mut r).map_err(|e| Error::io(path, e))?;
        let classes = Tensor::read_from(&mut r).map_err(|e| Error::io(path, e))?;
        let labels = labels.data().iter().map(|&l| l as usize).collect();
        Dataset::new(
            images,
            labels,
            classes.item() as usize,
            "saved",
            format!("tensor file {}", path.display()),
        )
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        return Ok(out);
    }
    Ok(raw)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            path: path.into(),
            msg: format!("length error: header truncated at byte {at}"),
        })
}

/// Parses a big-endian IDX image/label pair (optionally gzip-compressed).
/// Pixel bytes are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_all(images_path)?;
    let lab = read_all(labels_path)?;

    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format {
            path: images_path.into(),
            msg: format!("image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"),
        });
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let need = 16 + n * rows * cols;
    if img.len() < need {
        return Err(Error::Format {
            path: images_path.into(),
            msg: format!("length error: {} bytes, header promises {need}", img.len()),
        });
    }

    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format {
            path: labels_path.into(),
            msg: format!("label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"),
        });
    }
    let nl = be_u32(&lab, 4, labels_path)? as usize;
    if lab.len() < 8 + nl {
        return Err(Error::Format {
            path: labels_path.into(),
            msg: format!("length error: {} bytes, header promises {}", lab.len(), 8 + nl),
        });
    }
    if nl != n {
        return Err(Error::Format {
            path: labels_path.into(),
            msg: format!("{nl} labels for {n} images"),
        });
    }

    let data = img[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(
        Tensor::new(vec![n, 1, rows, cols], data)?,
        labels,
        num_classes,
        "idx",
        format!("idx {}", images_path.display()),
    )
}

/// Writes a dataset back out as an uncompressed IDX pair (pixels rounded to bytes).
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = ds.sample_shape();
    let (rows, cols) = match s {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        _ => return Err(Error::shape("write_idx", s, &[1, 0, 0])),
    };
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGE_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&p| (p * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Gaussian class blobs.
///
/// For a flat `shape = [d]` each class gets a centre drawn uniformly in
/// `[0.2, 0.8]^d`. For image shapes `[C, H, W]` each class gets an
/// oriented stripe template (orientation and phase set by the class
/// index). Samples are the class template plus `spread`-scaled Gaussian
/// noise, clipped to `[0, 1]`.
pub fn synth_blobs(k: usize, n_per_class: usize, shape: &[usize], spread: f64, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::Config(format!("synth_blobs needs k >= 2, got {k}")));
    }
    if n_per_class == 0 || shape.is_empty() || shape.contains(&0) {
        return Err(Error::Config("synth_blobs needs a non-empty shape and n_per_class >= 1".into()));
    }
    let numel: usize = shape.iter().product();
    let mut rng = rng_for(seed, Stream::Synthetic, 0);
    let templates: Vec<Vec<f64>> = (0..k)
        .map(|c| match shape {
            [_] => (0..numel).map(|_| rand::Rng::gen_range(&mut rng, 0.2..0.8)).collect(),
            _ => stripe_template(c, k, shape),
        })
        .collect();

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let n = k * n_per_class;
    let mut data = Vec::with_capacity(n * numel);
    let mut labels = Vec::with_capacity(n);
    // Interleave classes so any prefix is roughly balanced.
    for _ in 0..n_per_class {
        for (c, t) in templates.iter().enumerate() {
            data.extend(t.iter().map(|&m| (m + spread * noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(c);
        }
    }
    let mut full_shape = vec![n];
    full_shape.extend_from_slice(shape);
    Dataset::new(
        Tensor::new(full_shape, data)?,
        labels,
        k,
        "synthetic",
        format!("synth_blobs k={k} n_per_class={n_per_class} shape={shape:?} spread={spread} seed={seed}"),
    )
}

fn stripe_template(class: usize, k: usize, shape: &[usize]) -> Vec<f64> {
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes: usize = shape[..shape.len() - 2].iter().product();
    let theta = std::f64::consts::PI * class as f64 / k as f64;
    let freq = if class.is_multiple_of(2) { 2.0 } else { 3.0 };
    let (s, c) = theta.sin_cos();
    let mut out = Vec::with_capacity(planes * h * w);
    for _ in 0..planes {
        for i in 0..h {
            for j in 0..w {
                let u = (i as f64 / h as f64) * c + (j as f64 / w as f64) * s;
                out.push(0.5 + 0.4 * (2.0 * std::f64::consts::PI * freq * u).cos());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn idx_parses_pixels_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, idx_bytes(IDX_IMAGE_MAGIC, &[2, 2, 2], &[0, 255, 51, 102, 1, 2, 3, 4])).unwrap();
        std::fs::write(&lp, idx_bytes(IDX_LABEL_MAGIC, &[2], &[7, 3])).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(ds.images.data()[1], 1.0);
        assert_eq!(ds.images.data()[2], 0.2);
        assert_eq!(ds.num_classes, 8);
    }

    #[test]
    fn idx_wrong_magic_names_value() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, idx_bytes(0x0000_0801, &[1, 1, 1], &[0])).unwrap();
        std::fs::write(&lp, idx_bytes(IDX_LABEL_MAGIC, &[1], &[0])).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("0x00000801"), "{err}");
    }

    #[test]
    fn idx_truncated_is_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, idx_bytes(IDX_IMAGE_MAGIC, &[2, 2, 2], &[0, 1, 2])).unwrap();
        std::fs::write(&lp, idx_bytes(IDX_LABEL_MAGIC, &[2], &[0, 1])).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("length error"), "{err}");
        std::fs::write(&ip, [0u8, 0, 8]).unwrap();
        assert!(load_idx(&ip, &lp).unwrap_err().to_string().contains("length error"));
    }

    #[test]
    fn idx_gzip_is_transparent() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.gz"), dir.path().join("l"));
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&idx_bytes(IDX_IMAGE_MAGIC, &[1, 1, 2], &[255, 0])).unwrap();
        std::fs::write(&ip, enc.finish().unwrap()).unwrap();
        std::fs::write(&lp, idx_bytes(IDX_LABEL_MAGIC, &[1], &[1])).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images.data(), &[1.0, 0.0]);
    }

    #[test]
    fn blobs_are_deterministic_and_bounded() {
        let a = synth_blobs(3, 5, &[1, 8, 8], 0.1, 4).unwrap();
        let b = synth_blobs(3, 5, &[1, 8, 8], 0.1, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![5, 5, 5]);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_blobs(1, 5, &[4], 0.1, 0).is_err());
    }

    #[test]
    fn zero_spread_collapses_each_class() {
        let ds = synth_blobs(4, 6, &[5], 0.0, 1).unwrap();
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                if ds.labels[i] == ds.labels[j] {
                    assert_eq!(ds.images.row(i), ds.images.row(j));
                }
            }
        }
    }

    #[test]
    fn subset_and_batches() {
        let ds = synth_blobs(2, 5, &[3], 0.1, 0).unwrap();
        let all = ds.subset(10, 9).unwrap();
        let mut rows: Vec<Vec<u64>> = (0..10).map(|i| all.images.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        let mut orig: Vec<Vec<u64>> = (0..10).map(|i| ds.images.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);
        assert!(matches!(ds.subset(11, 0), Err(Error::Range { .. })));

        let b = ds.batches(3, true, 5);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut seen: Vec<usize> = b.concat();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(b, ds.batches(3, true, 5));
        assert_ne!(b, ds.batches(3, true, 6));
        assert_eq!(ds.batches(4, false, 0)[0], vec![0, 1, 2, 3]);
    }
}
