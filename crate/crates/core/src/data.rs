//! Synthetic datasets, non-IID partitioning and per-client class statistics.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Matrix};
use crate::rng::{self, TAG_DATA, TAG_PARTITION};

/// Fraction of every shard held out as the client-local test split.
pub const LOCAL_TEST_FRACTION: f64 = 0.2;

const DIRICHLET_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows != labels.len() {
            return Err(Error::input(format!(
                "{} feature rows but {} labels",
                features.rows,
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::input("dataset needs at least 2 classes"));
        }
        if labels.len() < num_classes {
            return Err(Error::input(format!(
                "dataset has {} samples, fewer than its {num_classes} classes",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if features.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("dataset features must be finite"));
        }
        Ok(LabeledDataset {
            features,
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

    pub fn dim(&self) -> usize {
        self.features.cols
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(Matrix::from_vec(indices.len(), d, data)?, labels)
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.labels.clone())
    }

    /// Fraction of samples per class.
    pub fn class_proportions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
            .iter()
            .map(|&c| c as f64 / self.len() as f64)
            .collect()
    }

    const MAGIC: &'static [u8; 4] = b"FADC";
    const VERSION: u32 = 1;

    /// Flat little-endian encoding: `"FADC"`, version, n, dim, K (all u32),
    /// row-major f64 features, then u32 labels.
    pub fn encode(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(20 + n * self.dim() * 8 + n * 4);
        out.extend_from_slice(Self::MAGIC);
        for v in [
            Self::VERSION,
            n as u32,
            self.dim() as u32,
            self.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.features.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::input("dataset file shorter than its header"));
        }
        if &bytes[..4] != Self::MAGIC {
            return Err(Error::input("dataset file has a bad magic number"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != Self::VERSION {
            return Err(Error::input(format!(
                "unsupported dataset version {version}"
            )));
        }
        let (n, dim, k) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let body = &bytes[20..];
        let expected = n
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(8))
            .and_then(|v| v.checked_add(n.checked_mul(4)?));
        if expected != Some(body.len()) {
            return Err(Error::input(format!(
                "dataset body is {} bytes, header implies n={n} dim={dim}",
                body.len()
            )));
        }
        if dim == 0 {
            return Err(Error::input("dataset dimension must be positive"));
        }
        let (feat, lab) = body.split_at(n * dim * 8);
        let data = feat
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = lab
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        LabeledDataset::new(Matrix::from_vec(n, dim, data)?, labels, k)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::decode(&buf)
    }
}

/// Gaussian class clusters with unit covariance; class means lie on a sphere
/// of radius `separation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self, per_class: usize) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.dim == 0 || per_class == 0 {
            return Err(Error::config("synthetic dimensions must be positive"));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::config(
                "class separation must be a non-negative number",
            ));
        }
        Ok(())
    }

    fn means(&self) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(self.seed, &[TAG_DATA, 0]);
        (0..self.num_classes)
            .map(|_| {
                let u: Vec<f64> = (0..self.dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                u.iter().map(|v| self.separation * v / norm).collect()
            })
            .collect()
    }

    /// Draws `per_class` samples of each class from sample stream `split`.
    /// Different splits share the class means.
    pub fn sample(&self, per_class: usize, split: u64) -> Result<LabeledDataset> {
        self.validate(per_class)?;
        let means = self.means();
        let mut rng = rng::stream(self.seed, &[TAG_DATA, 1, split]);
        let n = per_class * self.num_classes;
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..per_class {
            for (c, mean) in means.iter().enumerate() {
                data.extend(
                    mean.iter()
                        .map(|m| m + rng.sample::<f64, _>(StandardNormal)),
                );
                labels.push(c);
            }
        }
        LabeledDataset::new(
            Matrix::from_vec(n, self.dim, data)?,
            labels,
            self.num_classes,
        )
    }

    /// Train split (stream 0) and a held-out test split (stream 1).
    pub fn train_test(
        &self,
        train_per_class: usize,
        test_per_class: usize,
    ) -> Result<(LabeledDataset, LabeledDataset)> {
        Ok((
            self.sample(train_per_class, 0)?,
            self.sample(test_per_class, 1)?,
        ))
    }
}

/// Balanced Gaussian-cluster dataset, deterministic per seed.
pub fn gen_synthetic(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    SyntheticSpec {
        num_classes,
        dim,
        separation,
        seed,
    }
    .sample(per_class, 0)
}

/// Class proportions `γ` and confidence `ρ_i = γ_i / max_j γ_j` of a shard.
pub fn class_stats(
    indices: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if indices.is_empty() {
        return Err(Error::input("class statistics of an empty shard"));
    }
    let mut counts = vec![0usize; num_classes];
    for &i in indices {
        let l = *labels
            .get(i)
            .ok_or_else(|| Error::input(format!("index {i} outside the dataset")))?;
        if l >= num_classes {
            return Err(Error::input(format!("label {l} out of range")));
        }
        counts[l] += 1;
    }
    let n = indices.len() as f64;
    let gamma: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let max = *counts.iter().max().unwrap() as f64;
    let rho = counts.iter().map(|&c| c as f64 / max).collect();
    Ok((gamma, rho))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    /// Shuffled row indices; `indices[..split]` trains, the rest is the local test set.
    pub indices: Vec<usize>,
    pub split: usize,
    pub gamma: Vec<f64>,
    pub rho: Vec<f64>,
}

impl ClientShard {
    fn build(
        client_id: usize,
        mut indices: Vec<usize>,
        ds: &LabeledDataset,
        seed: u64,
    ) -> Result<Self> {
        let (gamma, rho) = class_stats(&indices, ds.labels(), ds.num_classes())?;
        let mut rng = rng::stream(seed, &[TAG_PARTITION, 1, client_id as u64]);
        indices.shuffle(&mut rng);
        let test = (indices.len() as f64 * LOCAL_TEST_FRACTION).floor() as usize;
        let split = indices.len() - test;
        Ok(ClientShard {
            client_id,
            indices,
            split,
            gamma,
            rho,
        })
    }

    pub fn train(&self) -> &[usize] {
        &self.indices[..self.split]
    }

    pub fn test(&self) -> &[usize] {
        &self.indices[self.split..]
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Sorted distinct labels in the train split.
    pub fn train_labels(&self, labels: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = self.train().iter().map(|&i| labels[i]).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMethod {
    /// At most `skew` distinct labels per client.
    SortPartition {
        skew: usize,
    },
    Dirichlet {
        alpha: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub method: PartitionMethod,
    pub num_clients: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub shards: Vec<ClientShard>,
    /// Samples left out so that blocks have equal size.
    pub dropped: usize,
}

pub fn partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Partition> {
    match spec.method {
        PartitionMethod::SortPartition { skew } => {
            sort_and_partition(ds, spec.num_clients, skew, spec.seed)
        }
        PartitionMethod::Dirichlet { alpha } => {
            dirichlet_partition(ds, spec.num_clients, alpha, spec.seed)
        }
    }
}

/// Sorts samples by label, cuts them into `N·s` equal contiguous blocks and
/// deals `s` random blocks to every client.
///
/// Samples beyond the largest multiple of `N·s` are dropped from the end of
/// the dataset order before sorting.
pub fn sort_and_partition(
    ds: &LabeledDataset,
    num_clients: usize,
    skew: usize,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::config("need at least one client"));
    }
    if skew == 0 || skew > ds.num_classes() {
        return Err(Error::config(format!(
            "skew s={skew} must lie in [1, {}]",
            ds.num_classes()
        )));
    }
    let blocks = num_clients * skew;
    let block_len = ds.len() / blocks;
    if block_len == 0 {
        return Err(Error::config(format!(
            "{} samples cannot fill {blocks} blocks",
            ds.len()
        )));
    }
    let kept = block_len * blocks;
    let dropped = ds.len() - kept;
    if dropped > 0 {
        log::warn!("sort-and-partition dropped {dropped} samples to equalise {blocks} blocks");
    }
    let mut order: Vec<usize> = (0..kept).collect();
    order.sort_by_key(|&i| ds.labels()[i]);

    let mut assign: Vec<usize> = (0..blocks).collect();
    assign.shuffle(&mut rng::stream(seed, &[TAG_PARTITION, 0]));

    let shards = (0..num_clients)
        .map(|c| {
            let indices = assign[c * skew..(c + 1) * skew]
                .iter()
                .flat_map(|&b| order[b * block_len..(b + 1) * block_len].iter().copied())
                .collect();
            ClientShard::build(c, indices, ds, seed)
        })
        .collect::<Result<_>>()?;
    Ok(Partition { shards, dropped })
}

fn dirichlet_draw<R: Rng>(gamma: &Gamma<f64>, n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = g.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return g.iter().map(|v| v / sum).collect();
        }
    }
}

/// Largest-remainder apportionment of `total` items by `props`; ties go to
/// the lower index.
pub(crate) fn apportion(props: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut rest = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Splits every class over the clients with proportions drawn from
/// `Dir(α·1_N)`. The whole draw is repeated while any client ends up empty.
pub fn dirichlet_partition(
    ds: &LabeledDataset,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::config("need at least one client"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::config(format!(
            "Dirichlet concentration {alpha} must be positive"
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = rng::stream(seed, &[TAG_PARTITION, 2]);
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }

    for _ in 0..DIRICHLET_RETRIES {
        let mut members = vec![Vec::new(); num_clients];
        for class in &by_class {
            let mut class = class.clone();
            class.shuffle(&mut rng);
            let props = dirichlet_draw(&gamma, num_clients, &mut rng);
            let mut start = 0;
            for (client, count) in apportion(&props, class.len()).into_iter().enumerate() {
                members[client].extend_from_slice(&class[start..start + count]);
                start += count;
            }
        }
        if members.iter().all(|m| !m.is_empty()) {
            let shards = members
                .into_iter()
                .enumerate()
                .map(|(c, m)| ClientShard::build(c, m, ds, seed))
                .collect::<Result<_>>()?;
            return Ok(Partition { shards, dropped: 0 });
        }
    }
    Err(Error::Partition(format!(
        "Dirichlet partition with alpha={alpha} and N={num_clients} left a client empty after {DIRICHLET_RETRIES} draws"
    )))
}
