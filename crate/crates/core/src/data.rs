//! Synthetic classification data and heterogeneous client partitions.
//!
//! Data comes from an isotropic Gaussian mixture whose class means sit on a
//! sphere. Two label-skew regimes are provided:
//!
//! - `s`-skew: `s%` of each client's data is class-uniform, the rest is
//!   concentrated on a few dominant classes picked per client.
//! - pathological: each client holds a fixed number of classes.
//!
//! Both partitions assign every input sample to exactly one client.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

/// Samples plus their per-class histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    num_classes: usize,
    dim: usize,
    samples: Vec<Sample>,
    class_counts: Vec<usize>,
}

impl AsRef<LabeledDataset> for LabeledDataset {
    fn as_ref(&self) -> &LabeledDataset {
        self
    }
}

impl LabeledDataset {
    pub fn new(num_classes: usize, dim: usize, samples: Vec<Sample>) -> Result<Self> {
        let mut class_counts = vec![0; num_classes];
        for s in &samples {
            if s.y >= num_classes {
                return Err(Error::Argument(format!("label {} out of range 0..{num_classes}", s.y)));
            }
            if s.x.len() != dim {
                return Err(Error::dim("sample features", dim, s.x.len()));
            }
            class_counts[s.y] += 1;
        }
        Ok(Self {
            num_classes,
            dim,
            samples,
            class_counts,
        })
    }

    pub fn empty(num_classes: usize, dim: usize) -> Self {
        Self {
            num_classes,
            dim,
            samples: Vec::new(),
            class_counts: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    /// Classes with at least one sample, ascending.
    pub fn classes_present(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&k| self.class_counts[k] > 0).collect()
    }

    /// Class histogram normalized to sum 1 (all zeros when empty).
    pub fn histogram(&self) -> Vec<f64> {
        let n = self.len();
        if n == 0 {
            return vec![0.0; self.num_classes];
        }
        self.class_counts.iter().map(|&c| c as f64 / n as f64).collect()
    }

    pub fn refs(&self) -> Vec<&Sample> {
        self.samples.iter().collect()
    }

    fn push(&mut self, s: Sample) {
        self.class_counts[s.y] += 1;
        self.samples.push(s);
    }

    /// Writes `label,f0,...,f{d-1}` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.y.to_string()];
            row.extend(s.x.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, num_classes: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.is_empty() || &header[0] != "label" {
            return Err(Error::Argument("dataset csv must start with a `label` column".into()));
        }
        let dim = header.len() - 1;
        for (i, name) in header.iter().skip(1).enumerate() {
            if name != format!("f{i}") {
                return Err(Error::Argument(format!(
                    "unexpected csv column `{name}`, expected `f{i}`"
                )));
            }
        }
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let y = rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Argument(format!("bad label `{}`: {e}", &rec[0])))?;
            let x = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Argument(format!("bad feature `{v}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample { x, y });
        }
        Self::new(num_classes, dim, samples)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, num_classes)
    }
}

/// Class means on a sphere of radius `radius`, isotropic noise `spread`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    means: Vec<Vec<f64>>,
    spread: f64,
}

impl GaussianMixture {
    pub fn new(num_classes: usize, dim: usize, spread: f64, radius: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 || dim < 2 {
            return Err(Error::Config(format!(
                "mixture needs >= 2 classes and >= 2 dims, got {num_classes} and {dim}"
            )));
        }
        if !(spread >= 0.0 && spread.is_finite() && radius > 0.0 && radius.is_finite()) {
            return Err(Error::Config(format!(
                "bad mixture geometry: spread {spread}, radius {radius}"
            )));
        }
        let mut rng = rng_from_seed(seed);
        let means = (0..num_classes)
            .map(|_| {
                let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                dir.into_iter().map(|v| radius * v / norm).collect()
            })
            .collect();
        Ok(Self { means, spread })
    }

    /// Radius used when none is configured: `4 * spread`, or 4 for a
    /// zero-spread mixture so class means stay distinct.
    pub fn default_radius(spread: f64) -> f64 {
        if spread > 0.0 {
            4.0 * spread
        } else {
            4.0
        }
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn draw(&self, class: usize, rng: &mut SimRng) -> Sample {
        let x = self.means[class]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.spread * z
            })
            .collect();
        Sample { x, y: class }
    }

    /// Draws `counts[k]` samples of each class `k`, class-major order.
    pub fn sample_counts(&self, counts: &[usize], rng: &mut SimRng) -> LabeledDataset {
        let mut ds = LabeledDataset::empty(self.num_classes(), self.dim());
        for (k, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                ds.push(self.draw(k, rng));
            }
        }
        ds
    }

    pub fn sample_balanced(&self, n_per_class: usize, rng: &mut SimRng) -> LabeledDataset {
        self.sample_counts(&vec![n_per_class; self.num_classes()], rng)
    }
}

/// Draws `n_per_class` samples per class from a fresh mixture seeded by `seed`.
pub fn generate_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let mixture = GaussianMixture::new(num_classes, dim, spread, GaussianMixture::default_radius(spread), seed)?;
    let mut rng = rng_from_seed(seed ^ 0x5EED_DA7A);
    Ok(mixture.sample_balanced(n_per_class, &mut rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionMode {
    /// `s` in `0..=100`, plus the number of dominant classes per client.
    Skew {
        s: u32,
        dominant_classes: usize,
    },
    Pathological {
        classes_per_client: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub num_clients: usize,
    pub seed: u64,
}

pub fn partition(data: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<LabeledDataset>> {
    match spec.mode {
        PartitionMode::Skew { s, dominant_classes } => {
            partition_skew_with(data, spec.num_clients, s, dominant_classes, spec.seed)
        }
        PartitionMode::Pathological { classes_per_client } => {
            partition_pathological(data, spec.num_clients, classes_per_client, spec.seed)
        }
    }
}

/// Per-class sample indices, each list shuffled.
fn shuffled_class_pools(data: &LabeledDataset, rng: &mut SimRng) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); data.num_classes()];
    for (i, s) in data.samples().iter().enumerate() {
        pools[s.y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(rng);
    }
    pools
}

/// Client `i` gets `perm[(i * m + j) mod C]` for `j < m`: distinct within a
/// client when `m <= C`, and every class is covered when `N * m >= C`.
fn cyclic_class_assignment(
    num_classes: usize,
    num_clients: usize,
    per_client: usize,
    rng: &mut SimRng,
) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..num_classes).collect();
    perm.shuffle(rng);
    (0..num_clients)
        .map(|i| {
            let mut classes: Vec<usize> = (0..per_client)
                .map(|j| perm[(i * per_client + j) % num_classes])
                .collect();
            classes.sort_unstable();
            classes
        })
        .collect()
}

/// Splits `n` items into `parts` near-equal shares, larger shares first.
fn even_shares(n: usize, parts: usize) -> Vec<usize> {
    let base = n / parts;
    let extra = n % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

fn assemble(data: &LabeledDataset, assignment: Vec<Vec<usize>>) -> Vec<LabeledDataset> {
    assignment
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            let mut ds = LabeledDataset::empty(data.num_classes(), data.dim());
            for i in idx {
                ds.push(data.samples()[i].clone());
            }
            ds
        })
        .collect()
}

/// `s`-skew partition with two dominant classes per client.
pub fn partition_skew(data: &LabeledDataset, num_clients: usize, s: u32, seed: u64) -> Result<Vec<LabeledDataset>> {
    partition_skew_with(data, num_clients, s, 2, seed)
}

/// `s`-skew partition.
///
/// From every class, `floor(s% * n_k)` samples form the uniform share and are
/// dealt round-robin over the clients (the starting client rotates per class
/// so client totals stay balanced). The rest of class `k` is split evenly
/// among the clients that hold `k` as a dominant class. Each client holds
/// `max(dominant_classes, ceil(C / N))` dominant classes so that every class
/// has at least one holder.
pub fn partition_skew_with(
    data: &LabeledDataset,
    num_clients: usize,
    s: u32,
    dominant_classes: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    let c = data.num_classes();
    if s > 100 {
        return Err(Error::Partition(format!("skew s must be in 0..=100, got {s}")));
    }
    if num_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if dominant_classes == 0 || dominant_classes > c {
        return Err(Error::Partition(format!(
            "dominant class count must be in 1..={c}, got {dominant_classes}"
        )));
    }
    let per_client = dominant_classes.max(c.div_ceil(num_clients)).min(c);
    let mut rng = rng_from_seed(seed);
    let pools = shuffled_class_pools(data, &mut rng);
    let dominant = cyclic_class_assignment(c, num_clients, per_client, &mut rng);

    let mut holders = vec![Vec::new(); c];
    for (i, classes) in dominant.iter().enumerate() {
        for &k in classes {
            holders[k].push(i);
        }
    }

    let mut assignment = vec![Vec::new(); num_clients];
    let mut offset = 0usize;
    for (k, pool) in pools.iter().enumerate() {
        let n_uniform = (pool.len() * s as usize) / 100;
        let (uniform, biased) = pool.split_at(n_uniform);
        for (j, &idx) in uniform.iter().enumerate() {
            assignment[(offset + j) % num_clients].push(idx);
        }
        offset = (offset + n_uniform) % num_clients;

        if biased.is_empty() {
            continue;
        }
        let hs = &holders[k];
        if hs.is_empty() {
            return Err(Error::Partition(format!("class {k} has no dominant holder")));
        }
        let shares = even_shares(biased.len(), hs.len());
        let mut start = 0;
        for (&client, share) in hs.iter().zip(shares) {
            assignment[client].extend_from_slice(&biased[start..start + share]);
            start += share;
        }
    }
    Ok(assemble(data, assignment))
}

/// Each client receives exactly `classes_per_client` distinct classes; the
/// samples of a class are split evenly among its holders.
pub fn partition_pathological(
    data: &LabeledDataset,
    num_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    let c = data.num_classes();
    if num_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if classes_per_client == 0 || classes_per_client > c {
        return Err(Error::Partition(format!(
            "classes per client must be in 1..={c}, got {classes_per_client}"
        )));
    }
    if classes_per_client * num_clients < c {
        return Err(Error::Partition(format!(
            "{num_clients} clients x {classes_per_client} classes cannot cover {c} classes"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let pools = shuffled_class_pools(data, &mut rng);
    let classes = cyclic_class_assignment(c, num_clients, classes_per_client, &mut rng);

    let mut holders = vec![Vec::new(); c];
    for (i, cls) in classes.iter().enumerate() {
        for &k in cls {
            holders[k].push(i);
        }
    }

    let mut assignment = vec![Vec::new(); num_clients];
    for (k, pool) in pools.iter().enumerate() {
        let hs = &holders[k];
        if pool.len() < hs.len() {
            return Err(Error::Partition(format!(
                "class {k} has {} samples for {} holders",
                pool.len(),
                hs.len()
            )));
        }
        let shares = even_shares(pool.len(), hs.len());
        let mut start = 0;
        for (&client, share) in hs.iter().zip(shares) {
            assignment[client].extend_from_slice(&pool[start..start + share]);
            start += share;
        }
    }
    Ok(assemble(data, assignment))
}

/// Fresh test draws: one class-balanced global set plus one set per client
/// with the same class counts as that client's training data.
pub fn make_test_sets(
    mixture: &GaussianMixture,
    clients: &[LabeledDataset],
    balanced_per_class: usize,
    seed: u64,
) -> (LabeledDataset, Vec<LabeledDataset>) {
    let mut rng = rng_from_seed(seed);
    let global = mixture.sample_balanced(balanced_per_class, &mut rng);
    let matched = clients
        .iter()
        .map(|c| mixture.sample_counts(c.class_counts(), &mut rng))
        .collect();
    (global, matched)
}

pub(crate) fn random_subset<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut ids: Vec<usize> = rand::seq::index::sample(rng, n, k).into_iter().collect();
    ids.sort_unstable();
    ids
}
