//! Federated datasets: the synthetic(alpha, beta) generator, power-law device
//! sizes, label-sharded partitioning and the plain-text dataset file format.
//!
//! File format (UTF-8, LF):
//!
//! ```text
//! fedsim-dataset,v1,N=<devices>,f=<features>,c=<classes>
//! device,<k>,<n_k>
//! <f comma-separated features>,<label>     (n_k rows)
//! device,<k+1>,<n_{k+1}>
//! ...
//! ```
//!
//! Floats are written with 17 significant digits so a save/load round trip
//! is bit-exact for `f64`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::Matrix;
use crate::objectives::{GlobalObjective, LocalObjective, ObjectiveError};
use crate::scalar::Scalar;

pub const SYNTHETIC_FEATURES: usize = 60;
pub const SYNTHETIC_CLASSES: usize = 10;
pub const DEFAULT_POWER_LAW_EXPONENT: f64 = 1.5;

const HEADER_TAG: &str = "fedsim-dataset";
const FORMAT_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
    #[error("not enough samples: {0}")]
    Insufficient(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Samples held by one device: an `n_k x f` row-major feature matrix and
/// integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceData<T> {
    features: Vec<T>,
    labels: Vec<usize>,
    n_features: usize,
}

impl<T: Scalar> DeviceData<T> {
    pub fn new(features: Vec<T>, labels: Vec<usize>, n_features: usize) -> Result<Self, DatasetError> {
        if n_features == 0 {
            return Err(DatasetError::Invalid("feature dimension must be positive".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(DatasetError::Invalid(format!(
                "{} feature values for {} samples of dimension {n_features}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            n_features,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, j: usize) -> &[T] {
        &self.features[j * self.n_features..(j + 1) * self.n_features]
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Per-device generating model of a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticModel<T> {
    /// `classes x features`
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    /// Mean of the model entries (`u_k ~ N(0, alpha)`).
    pub model_mean: f64,
    /// Device-level shift `B_k ~ N(0, beta)`.
    pub shift: f64,
    /// Feature mean `v_k ~ N(B_k, 1)`.
    pub feature_mean: f64,
}

impl<T: Scalar> SyntheticModel<T> {
    /// `argmax(W x + b)`, first index on ties.
    pub fn predict(&self, x: &[T]) -> usize {
        let z = self.weights.matvec(x);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] + self.bias[c] > z[best] + self.bias[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta<T> {
    pub name: String,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub seed: Option<u64>,
    pub n_features: usize,
    pub n_classes: usize,
    /// Generating models, present for synthetic datasets.
    pub models: Option<Vec<SyntheticModel<T>>>,
}

#[derive(Clone, Debug)]
pub struct FederatedDataset<T> {
    devices: Vec<Arc<DeviceData<T>>>,
    meta: DatasetMeta<T>,
}

impl<T: Scalar> FederatedDataset<T> {
    pub fn new(devices: Vec<DeviceData<T>>, meta: DatasetMeta<T>) -> Result<Self, DatasetError> {
        if devices.is_empty() {
            return Err(DatasetError::Invalid("no devices".into()));
        }
        for (k, d) in devices.iter().enumerate() {
            if d.is_empty() {
                return Err(DatasetError::Invalid(format!("device {k} has no samples")));
            }
            if d.n_features() != meta.n_features {
                return Err(DatasetError::Invalid(format!(
                    "device {k} has {} features, expected {}",
                    d.n_features(),
                    meta.n_features
                )));
            }
            if let Some(&y) = d.labels().iter().find(|&&y| y >= meta.n_classes) {
                return Err(DatasetError::Invalid(format!(
                    "device {k} has label {y} >= {}",
                    meta.n_classes
                )));
            }
        }
        Ok(Self {
            devices: devices.into_iter().map(Arc::new).collect(),
            meta,
        })
    }

    pub fn devices(&self) -> &[Arc<DeviceData<T>>] {
        &self.devices
    }

    pub fn meta(&self) -> &DatasetMeta<T> {
        &self.meta
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn n_features(&self) -> usize {
        self.meta.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.meta.n_classes
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.devices.iter().map(|d| d.len()).collect()
    }

    pub fn total_samples(&self) -> usize {
        self.devices.iter().map(|d| d.len()).sum()
    }

    /// `p_k = n_k / n`.
    pub fn weights(&self) -> Vec<T> {
        let n = T::from_count(self.total_samples());
        self.devices.iter().map(|d| T::from_count(d.len()) / n).collect()
    }

    /// Mean and population standard deviation of the device sizes.
    pub fn size_stats(&self) -> (f64, f64) {
        size_stats(&self.sizes())
    }

    /// Logistic-regression federated objective with regularization `lambda`.
    pub fn logistic_objective(&self, lambda: T) -> Result<GlobalObjective<T>, DatasetError> {
        let locals = self
            .devices
            .iter()
            .map(|d| LocalObjective::logistic(d.clone(), self.meta.n_classes, lambda))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(GlobalObjective::new(locals, self.weights())?)
    }
}

pub fn size_stats(sizes: &[usize]) -> (f64, f64) {
    let n = sizes.len() as f64;
    let mean = sizes.iter().map(|&s| s as f64).sum::<f64>() / n;
    let var = sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, variance: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + variance.sqrt() * z
}

/// synthetic(alpha, beta): per device, `u_k ~ N(0, alpha)`, every entry of
/// `W_k` and `b_k` drawn from `N(u_k, 1)`, `B_k ~ N(0, beta)`,
/// `v_k ~ N(B_k, 1)`, features `x_j ~ N(v_k, j^-1.2)` (j 1-based) and labels
/// `argmax(W_k x + b_k)`. The second argument of `N` is a variance.
pub fn generate_synthetic<T: Scalar>(
    alpha: f64,
    beta: f64,
    n_devices: usize,
    sizes: &[usize],
    seed: u64,
) -> Result<FederatedDataset<T>, DatasetError> {
    if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(DatasetError::Invalid(format!(
            "alpha={alpha}, beta={beta} must be >= 0"
        )));
    }
    if n_devices == 0 || sizes.len() != n_devices {
        return Err(DatasetError::Invalid(format!(
            "{} sizes for {n_devices} devices",
            sizes.len()
        )));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(DatasetError::Invalid("every device needs at least one sample".into()));
    }
    let (f, c) = (SYNTHETIC_FEATURES, SYNTHETIC_CLASSES);
    let feature_std: Vec<f64> = (1..=f).map(|j| (j as f64).powf(-1.2).sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut devices = Vec::with_capacity(n_devices);
    let mut models = Vec::with_capacity(n_devices);
    for &n_k in sizes {
        let model_mean = normal(&mut rng, 0.0, alpha);
        let weights = Matrix::from_fn(c, f, |_, _| T::lit(normal(&mut rng, model_mean, 1.0)));
        let bias: Vec<T> = (0..c).map(|_| T::lit(normal(&mut rng, model_mean, 1.0))).collect();
        let shift = normal(&mut rng, 0.0, beta);
        let feature_mean = normal(&mut rng, shift, 1.0);
        let model = SyntheticModel {
            weights,
            bias,
            model_mean,
            shift,
            feature_mean,
        };
        let mut features = Vec::with_capacity(n_k * f);
        let mut labels = Vec::with_capacity(n_k);
        for _ in 0..n_k {
            let start = features.len();
            for sd in &feature_std {
                let z: f64 = rng.sample(StandardNormal);
                features.push(T::lit(feature_mean + sd * z));
            }
            labels.push(model.predict(&features[start..]));
        }
        devices.push(DeviceData::new(features, labels, f)?);
        models.push(model);
    }
    FederatedDataset::new(
        devices,
        DatasetMeta {
            name: format!("synthetic({alpha},{beta})"),
            alpha: Some(alpha),
            beta: Some(beta),
            seed: Some(seed),
            n_features: f,
            n_classes: c,
            models: Some(models),
        },
    )
}

/// Splits `total` into parts proportional to `raw` (largest remainder).
fn largest_remainder(raw: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = raw.iter().sum();
    let quotas: Vec<f64> = raw.iter().map(|&r| r / sum * total as f64).collect();
    let mut parts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        parts[i] += 1;
    }
    parts
}

/// Device sizes following a power law.
///
/// Each device draws a Pareto variate with tail index `exponent`
/// (`(1-U)^(-1/exponent)`); after reserving `min_size` samples per device the
/// remaining `total - N*min_size` samples are split proportionally to the
/// draws with largest-remainder rounding, so the sizes sum to `total`
/// exactly. `exponent <= 0` gives the uniform split.
pub fn power_law_sizes<R: Rng + ?Sized>(
    n_devices: usize,
    total: usize,
    exponent: f64,
    min_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>, DatasetError> {
    if n_devices == 0 {
        return Err(DatasetError::Invalid("need at least one device".into()));
    }
    let reserved = n_devices
        .checked_mul(min_size.max(1))
        .ok_or_else(|| DatasetError::Invalid("size overflow".into()))?;
    if total < reserved {
        return Err(DatasetError::Invalid(format!(
            "total {total} cannot give {n_devices} devices at least {} samples",
            min_size.max(1)
        )));
    }
    if !exponent.is_finite() {
        return Err(DatasetError::Invalid("exponent must be finite".into()));
    }
    let raw: Vec<f64> = if exponent <= 0.0 {
        vec![1.0; n_devices]
    } else {
        (0..n_devices)
            .map(|_| (1.0 - rng.random::<f64>()).powf(-1.0 / exponent))
            .collect()
    };
    let extra = largest_remainder(&raw, total - reserved);
    Ok(extra.into_iter().map(|e| e + min_size.max(1)).collect())
}

/// How device sizes are chosen when partitioning a labelled corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SizeMode {
    /// Equal sizes; samples that do not fit evenly are dropped.
    Balanced,
    /// Power-law sizes summing to `total` (all samples if `None`).
    PowerLaw {
        exponent: f64,
        min_size: usize,
        total: Option<usize>,
    },
}

/// Distributes a labelled corpus over `n_devices` devices so that every
/// device sees at most `labels_per_device` distinct labels.
///
/// Balanced mode cuts every label's (shuffled) samples into single-label
/// shards of a common size and deals `labels_per_device` shards to each
/// device. Power-law mode assigns each device, largest first, the labels with
/// the most samples left and splits its quota across them.
pub fn partition_by_label<T: Scalar>(
    features: &[T],
    labels: &[usize],
    n_features: usize,
    n_classes: usize,
    n_devices: usize,
    labels_per_device: usize,
    mode: SizeMode,
    seed: u64,
) -> Result<FederatedDataset<T>, DatasetError> {
    let n = labels.len();
    if n_features == 0 || features.len() != n * n_features {
        return Err(DatasetError::Invalid(
            "feature matrix does not match label count".into(),
        ));
    }
    if n_devices == 0 || labels_per_device == 0 {
        return Err(DatasetError::Invalid(
            "need at least one device and one label per device".into(),
        ));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(DatasetError::Invalid(format!("label {y} >= {n_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        pools.entry(y).or_default().push(i);
    }
    for pool in pools.values_mut() {
        pool.shuffle(&mut rng);
    }

    let assignment: Vec<Vec<usize>> = match mode {
        SizeMode::Balanced => {
            let shards_needed = n_devices * labels_per_device;
            let mut shard = n / shards_needed;
            while shard > 0 && pools.values().map(|p| p.len() / shard).sum::<usize>() < shards_needed {
                shard -= 1;
            }
            if shard == 0 {
                return Err(DatasetError::Insufficient(format!(
                    "{n} samples cannot fill {shards_needed} single-label shards"
                )));
            }
            let mut shards: Vec<Vec<usize>> = pools
                .values()
                .flat_map(|p| p.chunks_exact(shard).map(|c| c.to_vec()))
                .collect();
            shards.shuffle(&mut rng);
            shards.truncate(shards_needed);
            shards.chunks(labels_per_device).map(|group| group.concat()).collect()
        }
        SizeMode::PowerLaw {
            exponent,
            min_size,
            total,
        } => {
            let total = total.unwrap_or(n);
            if total > n {
                return Err(DatasetError::Insufficient(format!("asked for {total} of {n} samples")));
            }
            let sizes = power_law_sizes(n_devices, total, exponent, min_size, &mut rng)?;
            let mut order: Vec<usize> = (0..n_devices).collect();
            order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
            let mut out = vec![Vec::new(); n_devices];
            for k in order {
                // labels with the most remaining samples, ties by a random key
                let mut cand: Vec<(usize, usize, u64)> = pools
                    .iter()
                    .filter(|(_, p)| !p.is_empty())
                    .map(|(&y, p)| (y, p.len(), rng.random::<u64>()))
                    .collect();
                cand.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
                cand.truncate(labels_per_device);
                let available: usize = cand.iter().map(|c| c.1).sum();
                if available < sizes[k] {
                    return Err(DatasetError::Insufficient(format!(
                        "device {k} needs {} samples but its {} largest label pools hold {available}",
                        sizes[k],
                        cand.len()
                    )));
                }
                // even split, capped by pool size, remainder to the larger pools
                let mut remaining = sizes[k];
                let mut take = vec![0usize; cand.len()];
                while remaining > 0 {
                    let open: Vec<usize> = (0..cand.len()).filter(|&i| take[i] < cand[i].1).collect();
                    let share = (remaining / open.len()).max(1);
                    for &i in &open {
                        let t = share.min(cand[i].1 - take[i]).min(remaining);
                        take[i] += t;
                        remaining -= t;
                        if remaining == 0 {
                            break;
                        }
                    }
                }
                for (i, c) in cand.iter().enumerate() {
                    let pool = pools.get_mut(&c.0).expect("candidate label exists");
                    let cut = pool.len() - take[i];
                    out[k].extend(pool.drain(cut..));
                }
            }
            out
        }
    };

    let devices = assignment
        .into_iter()
        .map(|idx| {
            let mut feats = Vec::with_capacity(idx.len() * n_features);
            let mut labs = Vec::with_capacity(idx.len());
            for &i in &idx {
                feats.extend_from_slice(&features[i * n_features..(i + 1) * n_features]);
                labs.push(labels[i]);
            }
            DeviceData::new(feats, labs, n_features)
        })
        .collect::<Result<Vec<_>, _>>()?;
    FederatedDataset::new(
        devices,
        DatasetMeta {
            name: "label-partitioned".into(),
            alpha: None,
            beta: None,
            seed: Some(seed),
            n_features,
            n_classes,
            models: None,
        },
    )
}

pub fn write_dataset<T: Scalar, W: Write>(ds: &FederatedDataset<T>, out: W) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(out);
    writeln!(
        out,
        "{HEADER_TAG},{FORMAT_VERSION},N={},f={},c={}",
        ds.num_devices(),
        ds.n_features(),
        ds.n_classes()
    )?;
    let mut line = String::new();
    for (k, d) in ds.devices().iter().enumerate() {
        writeln!(out, "device,{k},{}", d.len())?;
        for j in 0..d.len() {
            line.clear();
            for v in d.row(j) {
                line.push_str(&format!("{:.16e},", v.to_f64_lossy()));
            }
            line.push_str(&d.labels()[j].to_string());
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save<T: Scalar>(ds: &FederatedDataset<T>, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_dataset(ds, File::create(path)?)
}

fn parse_err(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        line,
        message: message.into(),
    }
}

fn header_field(part: Option<&str>, key: &str, line: usize) -> Result<usize, DatasetError> {
    let part = part.ok_or_else(|| parse_err(line, format!("missing header field {key}")))?;
    part.strip_prefix(key)
        .and_then(|v| v.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(line, format!("bad header field `{part}`, expected {key}=<int>")))
}

pub fn read_dataset<T: Scalar, R: Read>(input: R) -> Result<FederatedDataset<T>, DatasetError> {
    let mut lines = BufReader::new(input).lines().enumerate();
    let mut next = |expect: &str| -> Result<(usize, String), DatasetError> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(parse_err(i + 1, e.to_string())),
            None => Err(parse_err(0, format!("unexpected end of file, expected {expect}"))),
        }
    };
    let (ln, header) = next("header")?;
    let mut parts = header.split(',');
    if parts.next() != Some(HEADER_TAG) || parts.next() != Some(FORMAT_VERSION) {
        return Err(parse_err(ln, "not a fedsim-dataset v1 file"));
    }
    let n_devices = header_field(parts.next(), "N", ln)?;
    let n_features = header_field(parts.next(), "f", ln)?;
    let n_classes = header_field(parts.next(), "c", ln)?;
    let mut devices = Vec::with_capacity(n_devices);
    for k in 0..n_devices {
        let (ln, dev) = next("device line")?;
        let mut dp = dev.split(',');
        let ok = dp.next() == Some("device") && dp.next().and_then(|v| v.parse::<usize>().ok()) == Some(k);
        let n_k: usize = dp
            .next()
            .and_then(|v| v.parse().ok())
            .filter(|_| ok)
            .ok_or_else(|| parse_err(ln, format!("expected `device,{k},<n_k>`")))?;
        let mut feats = Vec::with_capacity(n_k * n_features);
        let mut labs = Vec::with_capacity(n_k);
        for _ in 0..n_k {
            let (ln, row) = next("sample row")?;
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != n_features + 1 {
                return Err(parse_err(
                    ln,
                    format!("expected {} fields, found {}", n_features + 1, fields.len()),
                ));
            }
            for (col, s) in fields[..n_features].iter().enumerate() {
                let v: f64 = s
                    .parse()
                    .map_err(|_| parse_err(ln, format!("bad float `{s}` in column {}", col + 1)))?;
                feats.push(T::lit(v));
            }
            let y: usize = fields[n_features]
                .parse()
                .map_err(|_| parse_err(ln, format!("bad label `{}`", fields[n_features])))?;
            labs.push(y);
        }
        devices.push(DeviceData::new(feats, labs, n_features)?);
    }
    if let Ok((ln, extra)) = next("end of file") {
        if !extra.trim().is_empty() {
            return Err(parse_err(ln, "trailing content after last device"));
        }
    }
    FederatedDataset::new(
        devices,
        DatasetMeta {
            name: "loaded".into(),
            alpha: None,
            beta: None,
            seed: None,
            n_features,
            n_classes,
            models: None,
        },
    )
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<FederatedDataset<T>, DatasetError> {
    read_dataset(File::open(path)?)
}

/// Reads a plain labelled corpus: one sample per line, feature values
/// followed by an integer label, comma separated.
pub fn read_corpus<T: Scalar, R: Read>(input: R) -> Result<(Vec<T>, Vec<usize>, usize), DatasetError> {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| parse_err(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(parse_err(i + 1, "need at least one feature and a label"));
        }
        let f = fields.len() - 1;
        if *width.get_or_insert(f) != f {
            return Err(parse_err(
                i + 1,
                format!("expected {} features, found {f}", width.unwrap_or(0)),
            ));
        }
        for s in &fields[..f] {
            let v: f64 = s.parse().map_err(|_| parse_err(i + 1, format!("bad float `{s}`")))?;
            feats.push(T::lit(v));
        }
        labels.push(
            fields[f]
                .parse()
                .map_err(|_| parse_err(i + 1, format!("bad label `{}`", fields[f])))?,
        );
    }
    let width = width.ok_or_else(|| parse_err(0, "empty corpus"))?;
    Ok((feats, labels, width))
}
