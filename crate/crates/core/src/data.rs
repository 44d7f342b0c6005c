//! Labelled datasets: synthetic generators and file loaders.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{SeedTree, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Samples stacked along the leading axis of `inputs`, with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub id: String,
    pub inputs: Tensor<S>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(id: impl Into<String>, inputs: Tensor<S>, labels: Vec<usize>) -> Result<Self, DataError> {
        if inputs.shape().first() != Some(&labels.len()) {
            return Err(DataError::Invalid(format!(
                "{} samples but {} labels",
                inputs.shape().first().copied().unwrap_or(0),
                labels.len()
            )));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            id: id.into(),
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Copy of the selected samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            id: self.id.clone(),
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Indices of samples whose label satisfies `keep`, in dataset order.
    pub fn indices_where(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| keep(self.labels[i])).collect()
    }

    /// Replaces every label `y` with `mapping[y]`.
    pub fn relabel(&self, mapping: &[usize]) -> Self {
        Self {
            labels: self.labels.iter().map(|&y| mapping[y]).collect(),
            ..self.clone()
        }
    }
}

/// Gaussian clusters with random centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of samples around their class center.
    pub spread: f64,
    /// Standard deviation of the class centers around the origin.
    pub center_scale: f64,
}

/// Concentric annuli, one per class, in the first two dimensions; any
/// further dimensions carry isotropic noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingsConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Radial noise standard deviation (rings are one unit apart).
    pub spread: f64,
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn assemble<S: Scalar>(
    id: &str,
    dim: usize,
    classes: usize,
    per_class: usize,
    mut sample: impl FnMut(usize, &mut Vec<f64>),
) -> Dataset<S> {
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    let mut buf = Vec::with_capacity(dim);
    for c in 0..classes {
        for _ in 0..per_class {
            buf.clear();
            sample(c, &mut buf);
            data.extend(buf.iter().map(|&v| S::lit(v)));
            labels.push(c);
        }
    }
    let inputs = Tensor::new(vec![labels.len(), dim], data).expect("generator fills every sample");
    Dataset {
        id: id.to_string(),
        inputs,
        labels,
        num_classes: classes,
    }
}

fn check_sizes(classes: usize, dim: usize, train: usize) -> Result<(), DataError> {
    if classes < 2 || dim == 0 || train == 0 {
        return Err(DataError::Invalid(format!(
            "generator needs ≥ 2 classes, dim ≥ 1 and ≥ 1 training sample per class (got {classes}, {dim}, {train})"
        )));
    }
    Ok(())
}

/// Train and test splits of a blobs dataset.
pub fn blobs<S: Scalar>(cfg: &BlobsConfig, seed: u64) -> Result<(Dataset<S>, Dataset<S>), DataError> {
    check_sizes(cfg.classes, cfg.dim, cfg.train_per_class)?;
    let tree = SeedTree::new(seed);
    let mut rng = tree.rng(Stream::Data, 0);
    let centers: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.dim).map(|_| cfg.center_scale * gauss(&mut rng)).collect())
        .collect();
    let draw = |split: u32, per_class: usize| {
        let mut rng = tree.rng(Stream::Data, split);
        assemble("blobs", cfg.dim, cfg.classes, per_class, |c, out| {
            out.extend(centers[c].iter().map(|&m| m + cfg.spread * gauss(&mut rng)));
        })
    };
    Ok((draw(1, cfg.train_per_class), draw(2, cfg.test_per_class)))
}

/// Train and test splits of a rings dataset.
pub fn rings<S: Scalar>(cfg: &RingsConfig, seed: u64) -> Result<(Dataset<S>, Dataset<S>), DataError> {
    check_sizes(cfg.classes, cfg.dim, cfg.train_per_class)?;
    if cfg.dim < 2 {
        return Err(DataError::Invalid("rings need at least two dimensions".into()));
    }
    let tree = SeedTree::new(seed);
    let draw = |split: u32, per_class: usize| {
        let mut rng = tree.rng(Stream::Data, split);
        assemble("rings", cfg.dim, cfg.classes, per_class, |c, out| {
            let radius = 1.0 + c as f64 + cfg.spread * gauss(&mut rng);
            let angle = TAU * rng.random::<f64>();
            out.push(radius * angle.cos());
            out.push(radius * angle.sin());
            out.extend((2..cfg.dim).map(|_| cfg.spread * gauss(&mut rng)));
        })
    };
    Ok((draw(1, cfg.train_per_class), draw(2, cfg.test_per_class)))
}

fn read_all(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(buf)
}

/// Parsed IDX array: big-endian extents followed by values.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
    /// Whether the payload was unsigned bytes.
    pub is_u8: bool,
}

pub fn parse_idx(bytes: &[u8], origin: &str) -> Result<IdxArray, DataError> {
    let bad = |msg: String| DataError::Format {
        path: origin.to_string(),
        msg,
    };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("missing IDX magic".into()));
    }
    let (kind, rank) = (bytes[2], bytes[3] as usize);
    let width = match kind {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        other => return Err(bad(format!("unknown IDX element type 0x{other:02X}"))),
    };
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != count * width {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            count * width,
            payload.len()
        )));
    }
    let values = payload
        .chunks(width)
        .map(|c| match kind {
            0x08 => f64::from(c[0]),
            0x09 => f64::from(c[0] as i8),
            0x0B => f64::from(i16::from_be_bytes([c[0], c[1]])),
            0x0C => f64::from(i32::from_be_bytes(c.try_into().expect("4 bytes"))),
            0x0D => f64::from(f32::from_be_bytes(c.try_into().expect("4 bytes"))),
            _ => f64::from_be_bytes(c.try_into().expect("8 bytes")),
        })
        .collect();
    Ok(IdxArray {
        dims,
        values,
        is_u8: kind == 0x08,
    })
}

/// Images `(N, H, W)` or `(N, C, H, W)` and labels `(N)` in IDX format.
/// Unsigned-byte pixels are scaled to [0, 1]; the result is `(N, C, H, W)`.
pub fn load_idx<S: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<S>, DataError> {
    let img = parse_idx(&read_all(images)?, &images.display().to_string())?;
    let lab = parse_idx(&read_all(labels)?, &labels.display().to_string())?;
    let shape = match img.dims.as_slice() {
        &[n, h, w] => vec![n, 1, h, w],
        &[n, c, h, w] => vec![n, c, h, w],
        other => {
            return Err(DataError::Format {
                path: images.display().to_string(),
                msg: format!("expected rank 3 or 4 images, got dims {other:?}"),
            })
        }
    };
    if lab.dims.len() != 1 || lab.dims[0] != shape[0] {
        return Err(DataError::Format {
            path: labels.display().to_string(),
            msg: format!("{:?} labels for {} images", lab.dims, shape[0]),
        });
    }
    let scale = if img.is_u8 { 1.0 / 255.0 } else { 1.0 };
    let data = img.values.iter().map(|&v| S::lit(v * scale)).collect();
    let label_ids = lab
        .values
        .iter()
        .map(|&v| {
            (v >= 0.0 && v.fract() == 0.0)
                .then_some(v as usize)
                .ok_or_else(|| DataError::Format {
                    path: labels.display().to_string(),
                    msg: format!("label {v} is not a non-negative integer"),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let inputs = Tensor::new(shape, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(format!("idx:{}", images.display()), inputs, label_ids)
}

/// Tabular data with a label column; every other column must be numeric.
/// Integer labels are used as-is, anything else is mapped to class ids in
/// sorted order of the distinct label strings.
pub fn load_csv<S: Scalar>(path: &Path, label_column: &str) -> Result<Dataset<S>, DataError> {
    let fmt = |msg: String| DataError::Format {
        path: path.display().to_string(),
        msg,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| fmt(e.to_string()))?;
    let headers = reader.headers().map_err(|e| fmt(e.to_string()))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| fmt(format!("no column named {label_column:?}")))?;
    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| fmt(e.to_string()))?;
        for (i, field) in record.iter().enumerate() {
            if i == label_idx {
                raw_labels.push(field.trim().to_string());
            } else {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| fmt(format!("row {}: column {:?} is not numeric", row + 1, &headers[i])))?;
                features.push(S::lit(v));
            }
        }
    }
    let n = raw_labels.len();
    let dim = headers.len() - 1;
    let labels = if raw_labels.iter().all(|l| l.parse::<usize>().is_ok()) {
        raw_labels.iter().map(|l| l.parse().expect("checked")).collect()
    } else {
        let names: BTreeMap<&str, usize> = raw_labels
            .iter()
            .map(String::as_str)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        raw_labels.iter().map(|l| names[l.as_str()]).collect()
    };
    let inputs = Tensor::new(vec![n, dim], features).map_err(|e| fmt(e.to_string()))?;
    Dataset::new(format!("csv:{}", path.display()), inputs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_cfg() -> BlobsConfig {
        BlobsConfig {
            classes: 4,
            dim: 3,
            train_per_class: 10,
            test_per_class: 5,
            spread: 0.5,
            center_scale: 3.0,
        }
    }

    #[test]
    fn blobs_shapes_and_determinism() {
        let (train, test) = blobs::<f64>(&blob_cfg(), 7).unwrap();
        assert_eq!(train.inputs.shape(), &[40, 3]);
        assert_eq!(test.len(), 20);
        assert_eq!(train.num_classes, 4);
        let (again, _) = blobs::<f64>(&blob_cfg(), 7).unwrap();
        assert_eq!(train, again);
        let (other, _) = blobs::<f64>(&blob_cfg(), 8).unwrap();
        assert_ne!(train, other);
    }

    #[test]
    fn rings_radii_grow_with_class() {
        let cfg = RingsConfig {
            classes: 3,
            dim: 2,
            train_per_class: 50,
            test_per_class: 1,
            spread: 0.05,
        };
        let (train, _) = rings::<f64>(&cfg, 1).unwrap();
        for c in 0..3 {
            let idx = train.indices_where(|y| y == c);
            let mean_r = idx
                .iter()
                .map(|&i| {
                    let p = &train.inputs.data()[2 * i..2 * i + 2];
                    (p[0] * p[0] + p[1] * p[1]).sqrt()
                })
                .sum::<f64>()
                / idx.len() as f64;
            assert!((mean_r - (1.0 + c as f64)).abs() < 0.05);
        }
    }

    #[test]
    fn generators_validate_sizes() {
        let mut cfg = blob_cfg();
        cfg.classes = 1;
        assert!(blobs::<f64>(&cfg, 0).is_err());
    }

    fn idx_bytes(kind: u8, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, kind, dims.len() as u8];
        for d in dims {
            b.extend(d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        std::fs::write(&img, idx_bytes(0x08, &[2, 2, 2], &[0, 255, 51, 102, 0, 0, 0, 255])).unwrap();
        std::fs::write(&lab, idx_bytes(0x08, &[2], &[3, 1])).unwrap();
        let ds = load_idx::<f64>(&img, &lab).unwrap();
        assert_eq!(ds.inputs.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.labels, vec![3, 1]);
        assert_eq!(ds.num_classes, 4);
        assert!((ds.inputs.data()[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn idx_rejects_truncation() {
        let bytes = idx_bytes(0x08, &[3], &[1, 2]);
        assert!(parse_idx(&bytes, "mem").is_err());
        assert!(parse_idx(&[1, 2, 3, 4], "mem").is_err());
    }

    #[test]
    fn csv_with_named_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x,species,y\n1.0,b,2\n3,a,4.5\n0,b,0\n").unwrap();
        let ds = load_csv::<f64>(&path, "species").unwrap();
        assert_eq!(ds.inputs.shape(), &[3, 2]);
        assert_eq!(ds.inputs.data(), &[1.0, 2.0, 3.0, 4.5, 0.0, 0.0]);
        assert_eq!(ds.labels, vec![1, 0, 1]);
        assert!(load_csv::<f64>(&path, "missing").is_err());
    }

    #[test]
    fn subset_and_relabel() {
        let (train, _) = blobs::<f64>(&blob_cfg(), 0).unwrap();
        let idx = train.indices_where(|y| y == 2);
        assert_eq!(idx.len(), 10);
        let sub = train.subset(&idx[..3]).relabel(&[3, 2, 0, 1]);
        assert_eq!(sub.labels, vec![0, 0, 0]);
        assert_eq!(sub.inputs.shape(), &[3, 3]);
    }
}
