//! Data sources and the on-disk dataset container.
//!
//! Primary benchmark data are seeded Gaussian mixtures in 2 to 16 dimensions.
//! A small raster loader (IDX files, box-downsampled to a fixed square) covers
//! real images at desk scale. Datasets persist in a simple binary container:
//! an 8-byte magic, a version, three u32 dimensions, the little-endian f64
//! payload, and one label byte per point.

use std::io::{Read as _, Write as _};
use std::path::Path;

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_psd, SymMatrix};
use crate::rng::standard_normal_vec;

pub const DATASET_MAGIC: &[u8; 8] = b"DCLDATA1";
pub const DATASET_VERSION: u32 = 1;

/// In-memory labeled dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub dim: usize,
    /// Size of the class universe (labels are 0..num_classes).
    pub num_classes: usize,
    /// Human-readable origin: mixture description or source file path.
    pub provenance: String,
}

impl LabeledDataset {
    /// An empty dataset may be valid (an empty sample container has a
    /// dimension but no points), so `dim` is explicit rather than inferred.
    pub fn new(
        dim: usize,
        points: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: String,
    ) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::Structural(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::Structural(format!(
                    "point {} has dimension {}, expected {}",
                    i,
                    p.len(),
                    dim
                )));
            }
            if !crate::linalg::all_finite(p) {
                return Err(Error::Numeric(format!("point {} contains a non-finite value", i)));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Structural(format!(
                "label {} outside the declared class universe 0..{}",
                bad, num_classes
            )));
        }
        Ok(Self { points, labels, dim, num_classes, provenance })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// All points with the given label, cloned into a fresh set.
    pub fn class_points(&self, class: usize) -> Vec<Vec<f64>> {
        self.points
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == class)
            .map(|(p, _)| p.clone())
            .collect()
    }

    /// (point, label) view used by training code.
    pub fn labeled_pairs(&self) -> Vec<(Vec<f64>, Option<usize>)> {
        self.points
            .iter()
            .zip(&self.labels)
            .map(|(p, &l)| (p.clone(), Some(l)))
            .collect()
    }
}

/// One mixture component with its class assignment.
#[derive(Debug, Clone)]
pub struct GaussianMode {
    pub mean: Vec<f64>,
    /// Row-major d x d covariance; must be PSD (zero allowed).
    pub cov: Vec<f64>,
    pub class: usize,
}

/// Draws `n_per_class` points for each class from its modes (split as evenly
/// as possible when a class has several modes). Sampling order is the listed
/// mode order, so one seed gives one dataset.
pub fn gaussian_mixture_data(
    modes: &[GaussianMode],
    n_per_class: usize,
    rng: &mut ChaCha12Rng,
) -> Result<LabeledDataset> {
    if modes.is_empty() {
        return Err(Error::Config("mixture needs at least one mode".into()));
    }
    let dim = modes[0].mean.len();
    let num_classes = modes.iter().map(|m| m.class).max().unwrap() + 1;
    let mut per_class_mode_count = vec![0usize; num_classes];
    for m in modes {
        per_class_mode_count[m.class] += 1;
    }
    if per_class_mode_count.iter().any(|&c| c == 0) {
        return Err(Error::Config("every class id up to the maximum must own a mode".into()));
    }

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut seen_of_class = vec![0usize; num_classes];
    for mode in modes {
        if mode.mean.len() != dim {
            return Err(Error::Config("all modes must share one dimension".into()));
        }
        let cov = SymMatrix::from_rows(dim, mode.cov.clone())?;
        let chol = cholesky_psd(&cov)?;
        // Even split of the class budget across its modes.
        let k = per_class_mode_count[mode.class];
        let idx = seen_of_class[mode.class];
        let n = n_per_class / k + usize::from(idx < n_per_class % k);
        seen_of_class[mode.class] += 1;
        for _ in 0..n {
            let z = standard_normal_vec(dim, rng);
            let mut x = mode.mean.clone();
            for i in 0..dim {
                for j in 0..=i {
                    x[i] += chol[i * dim + j] * z[j];
                }
            }
            points.push(x);
            labels.push(mode.class);
        }
    }
    let provenance = format!(
        "gaussian-mixture({} modes, {} classes, {} per class)",
        modes.len(),
        num_classes,
        n_per_class
    );
    LabeledDataset::new(dim, points, labels, num_classes, provenance)
}

/// Isotropic helper: covariance sigma^2 I.
pub fn isotropic_mode(mean: Vec<f64>, sigma: f64, class: usize) -> GaussianMode {
    let d = mean.len();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        cov[i * d + i] = sigma * sigma;
    }
    GaussianMode { mean, cov, class }
}

fn read_u32(bytes: &[u8], offset: &mut usize, what: &str) -> Result<u32> {
    let end = *offset + 4;
    if end > bytes.len() {
        return Err(Error::Config(format!("dataset container truncated in {}", what)));
    }
    let v = u32::from_le_bytes(bytes[*offset..end].try_into().unwrap());
    *offset = end;
    Ok(v)
}

/// Serializes a dataset into the container format.
pub fn dataset_to_bytes(ds: &LabeledDataset) -> Result<Vec<u8>> {
    if ds.num_classes > 256 {
        return Err(Error::Capacity(format!(
            "container labels are single bytes; {} classes do not fit",
            ds.num_classes
        )));
    }
    let mut out = Vec::with_capacity(8 + 16 + ds.len() * ds.dim * 8 + ds.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.num_classes as u32).to_le_bytes());
    for p in &ds.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &l in &ds.labels {
        out.push(l as u8);
    }
    Ok(out)
}

/// Parses the container format.
pub fn dataset_from_bytes(bytes: &[u8], provenance: &str) -> Result<LabeledDataset> {
    if bytes.len() < 8 || &bytes[..8] != DATASET_MAGIC {
        return Err(Error::Config("not a dataset container (bad magic)".into()));
    }
    let mut off = 8;
    let version = read_u32(bytes, &mut off, "version")?;
    if version != DATASET_VERSION {
        return Err(Error::Config(format!(
            "unsupported dataset container version {}",
            version
        )));
    }
    let d = read_u32(bytes, &mut off, "dimension")? as usize;
    let n = read_u32(bytes, &mut off, "count")? as usize;
    let num_classes = read_u32(bytes, &mut off, "class count")? as usize;
    let payload_len = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(8))
        .ok_or_else(|| Error::Config("dataset container header overflows".into()))?;
    if bytes.len() != off + payload_len + n {
        return Err(Error::Config(format!(
            "dataset container length {} does not match header (expected {})",
            bytes.len(),
            off + payload_len + n
        )));
    }
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let base = off + i * d * 8;
        let mut p = Vec::with_capacity(d);
        for j in 0..d {
            let s = base + j * 8;
            p.push(f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap()));
        }
        points.push(p);
    }
    let labels: Vec<usize> =
        bytes[off + payload_len..].iter().map(|&b| b as usize).collect();
    LabeledDataset::new(d, points, labels, num_classes.max(1), provenance.to_string())
}

pub fn write_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let bytes = dataset_to_bytes(ds)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    dataset_from_bytes(&bytes, &path.display().to_string())
}

/// Box-downsamples a grayscale raster to `target` x `target` by averaging the
/// source pixels in each cell, then rescales bytes to [-1, 1].
pub fn box_downsample(pixels: &[u8], rows: usize, cols: usize, target: usize) -> Result<Vec<f64>> {
    if pixels.len() != rows * cols {
        return Err(Error::Structural(format!(
            "raster has {} bytes, expected {}x{}",
            pixels.len(),
            rows,
            cols
        )));
    }
    if target == 0 || target > rows || target > cols {
        return Err(Error::Config(format!(
            "target side {} invalid for {}x{} raster",
            target, rows, cols
        )));
    }
    let mut out = Vec::with_capacity(target * target);
    for i in 0..target {
        let r0 = i * rows / target;
        let r1 = (i + 1) * rows / target;
        for j in 0..target {
            let c0 = j * cols / target;
            let c1 = (j + 1) * cols / target;
            let mut acc = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    acc += pixels[r * cols + c] as f64;
                }
            }
            let mean = acc / ((r1 - r0) * (c1 - c0)) as f64;
            out.push(mean / 127.5 - 1.0);
        }
    }
    Ok(out)
}

fn idx_header(bytes: &[u8], expect_dims: usize, what: &str) -> Result<Vec<usize>> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Config(format!("{}: not an IDX file", what)));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Config(format!(
            "{}: only unsigned-byte IDX data is supported (type 0x{:02x})",
            what, bytes[2]
        )));
    }
    let ndim = bytes[3] as usize;
    if ndim != expect_dims {
        return Err(Error::Config(format!(
            "{}: expected {}-dimensional IDX data, got {}",
            what, expect_dims, ndim
        )));
    }
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(Error::Config(format!("{}: truncated IDX header", what)));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
        })
        .collect();
    let total: usize = dims.iter().product();
    if bytes.len() != header_len + total {
        return Err(Error::Config(format!("{}: IDX payload length mismatch", what)));
    }
    Ok(dims)
}

/// Loads an IDX image/label pair, downsampling each image to
/// `target_side` x `target_side` and rescaling to [-1, 1].
pub fn load_idx_dataset(
    images_path: &Path,
    labels_path: &Path,
    target_side: usize,
) -> Result<LabeledDataset> {
    let mut img_bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut img_bytes)?;
    let mut lbl_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut lbl_bytes)?;

    let img_dims = idx_header(&img_bytes, 3, "images")?;
    let lbl_dims = idx_header(&lbl_bytes, 1, "labels")?;
    let (n, rows, cols) = (img_dims[0], img_dims[1], img_dims[2]);
    if lbl_dims[0] != n {
        return Err(Error::Config(format!(
            "{} images but {} labels",
            n, lbl_dims[0]
        )));
    }
    let img_off = 4 + 4 * 3;
    let lbl_off = 4 + 4;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let raster = &img_bytes[img_off + i * rows * cols..img_off + (i + 1) * rows * cols];
        points.push(box_downsample(raster, rows, cols, target_side)?);
        labels.push(lbl_bytes[lbl_off + i] as usize);
    }
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    LabeledDataset::new(
        target_side * target_side,
        points,
        labels,
        num_classes,
        format!("idx({})", images_path.display()),
    )
}
