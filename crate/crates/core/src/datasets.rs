//! Labeled datasets, the IDX image format, and client partitioning.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Dense row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values do not form {} rows of width {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {y} outside [0, {classes})")));
        }
        Ok(Self {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the given rows into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            features,
            labels,
            dim: self.dim,
            classes: self.classes,
        }
    }

    /// Concatenates datasets of equal width.
    pub fn concat(parts: &[LabeledDataset]) -> Result<LabeledDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut classes = 0;
        for p in parts {
            if p.dim != first.dim {
                return Err(Error::invalid(format!(
                    "feature width {} does not match {}",
                    p.dim, first.dim
                )));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
            classes = classes.max(p.classes);
        }
        LabeledDataset::new(features, labels, first.dim, classes)
    }

    /// Number of samples per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Seeded split into `(train, test)` with `test_fraction` of the rows held out.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::invalid(format!(
                "test fraction {test_fraction} outside [0, 1)"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seed::rng(seed, Stream::Dataset, 1, 0));
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }
}

/// Balanced Gaussian classes with identity covariance. Class `c` is centred
/// at `separation / √2 · e_c`, so every pair of class means is exactly
/// `separation` apart. Requires `classes <= dim`.
pub fn synth_gaussian(
    classes: usize,
    dim: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || n < classes {
        return Err(Error::invalid(format!(
            "need classes >= 2 and n >= classes, got classes={classes}, n={n}"
        )));
    }
    if classes > dim {
        return Err(Error::invalid(format!(
            "equidistant class means need dim >= classes, got dim={dim}, classes={classes}"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::invalid(format!("separation must be >= 0, got {separation}")));
    }
    let offset = separation / std::f64::consts::SQRT_2;
    let mut rng = seed::rng(seed, Stream::Dataset, 0, 0);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(if j == c { z + offset } else { z });
        }
        labels.push(c);
    }
    LabeledDataset::new(features, labels, dim, classes)
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> IdxReader<'a> {
    fn u32(&mut self, field: &str) -> Result<u32> {
        let end = self.pos + 4;
        let b = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::format(
                format!("{}:{field}", self.file),
                format!("file ends at byte {} before header field", self.bytes.len()),
            )
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn body(&self, len: usize, field: &str) -> Result<&'a [u8]> {
        self.bytes.get(self.pos..self.pos + len).ok_or_else(|| {
            Error::format(
                format!("{}:{field}", self.file),
                format!(
                    "expected {len} data bytes, found {}",
                    self.bytes.len().saturating_sub(self.pos)
                ),
            )
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses IDX image and label buffers. Pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let mut img = IdxReader {
        bytes: images,
        pos: 0,
        file: "images",
    };
    let magic = img.u32("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            "images:magic",
            format!("expected 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let n = img.u32("count")? as usize;
    let rows = img.u32("rows")? as usize;
    let cols = img.u32("cols")? as usize;
    let dim = rows * cols;
    if dim == 0 {
        return Err(Error::format("images:rows", "zero-sized images"));
    }
    let pixels = img.body(n * dim, "pixels")?;

    let mut lab = IdxReader {
        bytes: labels,
        pos: 0,
        file: "labels",
    };
    let magic = lab.u32("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "labels:magic",
            format!("expected 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let n_labels = lab.u32("count")? as usize;
    if n_labels != n {
        return Err(Error::format(
            "labels:count",
            format!("{n_labels} labels for {n} images"),
        ));
    }
    let ys: Vec<usize> = lab.body(n, "labels")?.iter().map(|&b| b as usize).collect();
    let classes = ys.iter().max().map_or(1, |m| m + 1);
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    LabeledDataset::new(features, ys, dim, classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images = read_file(images_path.as_ref())?;
    let labels = read_file(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

/// Disjoint per-client index lists into a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partitioning {
    pub assignment: Vec<Vec<usize>>,
}

impl Partitioning {
    pub fn clients(&self) -> usize {
        self.assignment.len()
    }

    /// Checks disjointness, range and non-emptiness against a parent of size `n`.
    pub fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (k, idx) in self.assignment.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::invalid(format!("client {k} received no samples")));
            }
            for &i in idx {
                if i >= n {
                    return Err(Error::invalid(format!("index {i} out of range for {n}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("index {i} assigned twice")));
                }
            }
        }
        Ok(())
    }

    pub fn materialize(&self, ds: &LabeledDataset) -> Vec<LabeledDataset> {
        self.assignment.iter().map(|idx| ds.subset(idx)).collect()
    }
}

/// Uniform random split into `clients` blocks; the first `n mod clients`
/// clients get one extra sample.
pub fn partition_iid(ds: &LabeledDataset, clients: usize, seed: u64) -> Result<Partitioning> {
    let n = ds.len();
    if clients == 0 || n < clients {
        return Err(Error::invalid(format!(
            "cannot split {n} samples across {clients} clients"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed, Stream::Partition, 0, 0));
    let base = n / clients;
    let extra = n % clients;
    let mut assignment = Vec::with_capacity(clients);
    let mut start = 0;
    for k in 0..clients {
        let len = base + usize::from(k < extra);
        assignment.push(perm[start..start + len].to_vec());
        start += len;
    }
    Ok(Partitioning { assignment })
}

/// Label-skewed split: sort by label, cut into `shards` contiguous pieces,
/// and deal `per_client` random shards to every client.
pub fn partition_shards(
    ds: &LabeledDataset,
    clients: usize,
    shards: usize,
    per_client: usize,
    seed: u64,
) -> Result<Partitioning> {
    if clients == 0 || per_client == 0 || shards != clients * per_client {
        return Err(Error::invalid(format!(
            "shards ({shards}) must equal clients ({clients}) x per_client ({per_client})"
        )));
    }
    let n = ds.len();
    if n < shards {
        return Err(Error::invalid(format!("cannot cut {n} samples into {shards} shards")));
    }
    let mut by_label: Vec<usize> = (0..n).collect();
    by_label.sort_by_key(|&i| (ds.label(i), i));

    let mut order: Vec<usize> = (0..shards).collect();
    order.shuffle(&mut seed::rng(seed, Stream::Partition, 1, 0));

    let shard = |s: usize| &by_label[s * n / shards..(s + 1) * n / shards];
    let assignment = order
        .chunks(per_client)
        .map(|group| group.iter().flat_map(|&s| shard(s).iter().copied()).collect())
        .collect();
    Ok(Partitioning { assignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(n: usize, classes: usize) -> LabeledDataset {
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        LabeledDataset::new((0..n).map(|i| i as f64).collect(), labels, 1, classes).unwrap()
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let a = synth_gaussian(4, 6, 400, 3.0, 5).unwrap();
        assert_eq!(a, synth_gaussian(4, 6, 400, 3.0, 5).unwrap());
        assert_eq!(a.histogram(), vec![100; 4]);
        assert_ne!(a, synth_gaussian(4, 6, 400, 3.0, 6).unwrap());
    }

    #[test]
    fn synthetic_rejects_bad_shapes() {
        assert!(synth_gaussian(1, 4, 10, 1.0, 0).is_err());
        assert!(synth_gaussian(5, 4, 10, 1.0, 0).is_err());
        assert!(synth_gaussian(3, 4, 2, 1.0, 0).is_err());
    }

    #[test]
    fn synthetic_class_means_are_equidistant() {
        let ds = synth_gaussian(3, 3, 30_000, 4.0, 1).unwrap();
        let mut means = vec![vec![0.0; 3]; 3];
        for i in 0..ds.len() {
            for j in 0..3 {
                means[ds.label(i)][j] += ds.row(i)[j] / 10_000.0;
            }
        }
        for a in 0..3 {
            for b in a + 1..3 {
                let d: f64 = (0..3).map(|j| (means[a][j] - means[b][j]).powi(2)).sum::<f64>().sqrt();
                assert!((d - 4.0).abs() < 0.1, "distance {d}");
            }
        }
    }

    #[test]
    fn iid_one_each() {
        let p = partition_iid(&tiny(100, 10), 100, 3).unwrap();
        assert!(p.assignment.iter().all(|a| a.len() == 1));
        p.check(100).unwrap();
    }

    #[test]
    fn iid_remainder_goes_to_first_client() {
        let p = partition_iid(&tiny(101, 10), 100, 3).unwrap();
        assert_eq!(p.assignment[0].len(), 2);
        assert!(p.assignment[1..].iter().all(|a| a.len() == 1));
    }

    #[test]
    fn iid_needs_enough_samples() {
        assert!(partition_iid(&tiny(5, 2), 6, 0).is_err());
    }

    #[test]
    fn shards_validate_counts() {
        assert!(partition_shards(&tiny(400, 10), 100, 199, 2, 0).is_err());
        assert!(partition_shards(&tiny(100, 10), 100, 200, 2, 0).is_err());
    }

    #[test]
    fn shards_single_client_gets_everything() {
        let p = partition_shards(&tiny(50, 5), 1, 3, 3, 0).unwrap();
        let mut all = p.assignment[0].clone();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn shards_skew_labels() {
        // 10 balanced classes, 2000 samples: each shard of 10 holds one label.
        let ds = tiny(2000, 10);
        let shards = partition_shards(&ds, 100, 200, 2, 4).unwrap();
        let iid = partition_iid(&ds, 100, 4).unwrap();
        let distinct = |p: &Partitioning| -> Vec<usize> {
            p.assignment
                .iter()
                .map(|idx| {
                    let mut l: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
                    l.sort();
                    l.dedup();
                    l.len()
                })
                .collect()
        };
        let ds_shard = distinct(&shards);
        assert!(ds_shard.iter().all(|&d| d <= 2));
        let mean_shard = ds_shard.iter().sum::<usize>() as f64 / 100.0;
        let mean_iid = distinct(&iid).iter().sum::<usize>() as f64 / 100.0;
        assert!(mean_shard < mean_iid, "{mean_shard} vs {mean_iid}");
    }

    #[test]
    fn iid_histograms_approach_global() {
        // Mean total-variation distance between client and global label
        // histograms shrinks as samples per client grow.
        let tv = |n: usize| {
            let ds = tiny(n, 10);
            let p = partition_iid(&ds, 10, 8).unwrap();
            p.assignment
                .iter()
                .map(|idx| {
                    let mut h = vec![0.0; 10];
                    for &i in idx {
                        h[ds.label(i)] += 1.0 / idx.len() as f64;
                    }
                    h.iter().map(|f| (f - 0.1f64).abs()).sum::<f64>() / 2.0
                })
                .sum::<f64>()
                / 10.0
        };
        assert!(tv(20_000) < tv(200));
        assert!(tv(20_000) < 0.05);
    }

    #[test]
    fn idx_errors() {
        assert!(matches!(parse_idx(&[], &[]), Err(Error::Format { .. })));
        let mut images = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 1, 1, 1] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        images.push(255);
        let mut labels = Vec::new();
        for v in [0x0000_0802u32, 1] {
            labels.extend_from_slice(&v.to_be_bytes());
        }
        labels.push(0);
        match parse_idx(&images, &labels) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "labels:magic"),
            other => panic!("unexpected {other:?}"),
        }
        labels[3] = 0x01;
        let ds = parse_idx(&images, &labels).unwrap();
        assert_eq!(ds.row(0), &[1.0]);
        // truncated pixel data
        assert!(parse_idx(&images[..16], &labels).is_err());
    }

    #[test]
    fn split_holds_out_fraction() {
        let (train, test) = tiny(100, 4).split(0.1, 1).unwrap();
        assert_eq!((train.len(), test.len()), (90, 10));
    }

    proptest! {
        #[test]
        fn partitions_are_valid(n in 1usize..300, k in 1usize..20, per in 1usize..4, seed in any::<u64>()) {
            let ds = tiny(n, 3);
            if n >= k {
                let p = partition_iid(&ds, k, seed).unwrap();
                prop_assert!(p.check(n).is_ok());
                prop_assert_eq!(p.assignment.iter().map(Vec::len).sum::<usize>(), n);
            }
            if n >= k * per {
                let p = partition_shards(&ds, k, k * per, per, seed).unwrap();
                prop_assert!(p.check(n).is_ok());
                prop_assert_eq!(p.assignment.iter().map(Vec::len).sum::<usize>(), n);
            }
        }
    }
}
