//! Federated datasets: the synthetic heterogeneous generator, label-skewed
//! partitioning of a labelled pool, and an IDX (MNIST-style) reader.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::error::{ensure_finite, invalid, Error, Result};
use crate::rng::{stream, Purpose};

/// One labelled example.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// The local data of one client, stored row-major (`n_k x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl ClientShard {
    pub fn new(client_id: usize, samples: &[DataSample], dim: usize) -> Result<Self> {
        let mut features = Array2::zeros((samples.len(), dim));
        for (mut row, s) in features.axis_iter_mut(Axis(0)).zip(samples) {
            if s.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: format!("{dim} features"),
                    actual: format!("{} features", s.features.len()),
                });
            }
            row.assign(&Array1::from(s.features.clone()));
        }
        Ok(Self {
            client_id,
            features,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    /// Number of samples `n_k`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = DataSample> + '_ {
        self.features
            .axis_iter(Axis(0))
            .zip(&self.labels)
            .map(|(row, &label)| DataSample {
                features: row.to_vec(),
                label,
            })
    }
}

/// Shards for `N` clients with weights `p_k = n_k / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub dim: usize,
    pub classes: usize,
    pub shards: Vec<ClientShard>,
    pub n_total: usize,
    pub weights: Vec<f64>,
}

impl FederatedDataset {
    /// Assembles a dataset; shard `k` must carry `client_id == k`.
    pub fn from_shards(shards: Vec<ClientShard>, dim: usize, classes: usize) -> Result<Self> {
        if shards.is_empty() {
            return Err(invalid("shards", "a federation needs at least one client"));
        }
        for (k, s) in shards.iter().enumerate() {
            if s.client_id != k {
                return Err(invalid("shards", format!("shard {k} carries client id {}", s.client_id)));
            }
            if s.is_empty() {
                return Err(Error::EmptyShard(k));
            }
            if s.features.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: format!("{dim} features"),
                    actual: format!("{} features", s.features.ncols()),
                });
            }
            if let Some(&bad) = s.labels.iter().find(|&&l| l >= classes) {
                return Err(invalid("labels", format!("label {bad} outside [0, {classes})")));
            }
        }
        let n_total: usize = shards.iter().map(ClientShard::len).sum();
        let weights = shards.iter().map(|s| s.len() as f64 / n_total as f64).collect();
        Ok(Self {
            dim,
            classes,
            shards,
            n_total,
            weights,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }

    /// Shard sizes `n_k`.
    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(ClientShard::len).collect()
    }
}

/// Parameters of the synthetic `(alpha, beta)` generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Spread of the client labelling models around the shared model.
    pub alpha: f64,
    /// Spread of the client input means.
    pub beta: f64,
    pub n_clients: usize,
    pub size_mean: f64,
    pub size_std: f64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_dim() -> usize {
    60
}

fn default_classes() -> usize {
    10
}

impl SyntheticSpec {
    /// 60-dimensional inputs, 10 classes.
    pub fn new(alpha: f64, beta: f64, n_clients: usize, size_mean: f64, size_std: f64) -> Self {
        Self {
            alpha,
            beta,
            n_clients,
            size_mean,
            size_std,
            dim: default_dim(),
            classes: default_classes(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(invalid("n_clients", "must be at least 1"));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("size_mean", self.size_mean),
            ("size_std", self.size_std),
        ] {
            ensure_finite(name, v)?;
            if v < 0.0 {
                return Err(invalid(name, format!("must be >= 0, got {v}")));
            }
        }
        if self.size_mean <= 0.0 {
            return Err(invalid("size_mean", "must be > 0"));
        }
        if self.dim == 0 || self.classes < 2 {
            return Err(invalid("dim/classes", "need dim >= 1 and classes >= 2"));
        }
        Ok(())
    }
}

/// The linear labelling rule of one synthetic client: `argmax(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelingModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LabelingModel {
    pub fn label(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (c, row) in self.weights.axis_iter(Axis(0)).enumerate() {
            let v = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + self.bias[c];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        best
    }
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Per-client labelling models.
///
/// A shared base model with standard-normal entries is drawn once; client
/// `k` adds independent `N(0, alpha)` perturbations to every entry, so
/// `alpha = 0` gives every client the same rule.
pub fn synthetic_labeling_models(spec: &SyntheticSpec, seed: u64) -> Result<Vec<LabelingModel>> {
    spec.validate()?;
    let mut shared = stream(seed, Purpose::DatasetShared, 0);
    let base_w = normal_matrix(&mut shared, spec.classes, spec.dim);
    let base_b: Array1<f64> = (0..spec.classes)
        .map(|_| StandardNormal.sample(&mut shared))
        .collect();
    let sd = spec.alpha.sqrt();
    Ok((0..spec.n_clients)
        .map(|k| {
            let mut rng = stream(seed, Purpose::DatasetClient, k as u64);
            let dw = normal_matrix(&mut rng, spec.classes, spec.dim);
            let db: Array1<f64> = (0..spec.classes)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            LabelingModel {
                weights: &base_w + &(dw * sd),
                bias: &base_b + &(db * sd),
            }
        })
        .collect())
}

/// Shard sizes from a log-normal law matched to `mean` and `std`.
///
/// Quantiles are stratified (one uniform per `1/N` slice, then shuffled), so
/// the sizes follow the heavy-tailed shape while their sample mean stays
/// close to `mean` even for modest `N`. Sizes are clamped below at 1.
pub fn lognormal_sizes(n: usize, mean: f64, std: f64, seed: u64) -> Vec<usize> {
    if std == 0.0 {
        return vec![(mean.round() as usize).max(1); n];
    }
    let sigma2 = (1.0 + (std / mean).powi(2)).ln();
    let mu = mean.ln() - sigma2 / 2.0;
    let z = StatNormal::new(0.0, 1.0).expect("standard normal");
    let mut rng = stream(seed, Purpose::ShardSizes, 0);
    let mut sizes: Vec<usize> = (0..n)
        .map(|i| {
            let u = (i as f64 + rng.random::<f64>()) / n as f64;
            let u = u.clamp(1e-12, 1.0 - 1e-12);
            let v = (mu + sigma2.sqrt() * z.inverse_cdf(u)).exp();
            (v.round() as usize).max(1)
        })
        .collect();
    sizes.shuffle(&mut rng);
    sizes
}

/// Generates the synthetic heterogeneous federation.
///
/// Client `k` owns a labelling model (see [`synthetic_labeling_models`]) and
/// an input law: a mean vector `v_k ~ N(B_k, 1)` with `B_k ~ N(0, beta)`,
/// and diagonal covariance `(j + 1)^-1.2` for coordinate `j`. Labels are
/// the argmax of the client's linear scores.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<FederatedDataset> {
    let models = synthetic_labeling_models(spec, seed)?;
    let sizes = lognormal_sizes(spec.n_clients, spec.size_mean, spec.size_std, seed);
    let stds: Vec<f64> = (0..spec.dim).map(|j| ((j + 1) as f64).powf(-1.2).sqrt()).collect();
    let beta_sd = spec.beta.sqrt();

    let shards: Vec<ClientShard> = models
        .par_iter()
        .zip(sizes.par_iter())
        .enumerate()
        .map(|(k, (model, &n_k))| {
            // continue the client's stream after its model draws
            let mut rng = stream(seed, Purpose::DatasetClient, k as u64);
            let _ = normal_matrix(&mut rng, spec.classes, spec.dim + 1);
            let z: f64 = StandardNormal.sample(&mut rng);
            let center = beta_sd * z;
            let mean_law = Normal::new(center, 1.0).expect("finite");
            let v: Vec<f64> = (0..spec.dim).map(|_| mean_law.sample(&mut rng)).collect();
            let mut features = Array2::zeros((n_k, spec.dim));
            let mut labels = Vec::with_capacity(n_k);
            for mut row in features.axis_iter_mut(Axis(0)) {
                for j in 0..spec.dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    row[j] = v[j] + stds[j] * z;
                }
                labels.push(model.label(row.as_slice().expect("contiguous row")));
            }
            ClientShard {
                client_id: k,
                features,
                labels,
            }
        })
        .collect();
    FederatedDataset::from_shards(shards, spec.dim, spec.classes)
}

/// Splits a labelled pool so that every client holds `samples_per_client`
/// samples drawn from exactly `labels_per_client` distinct labels.
///
/// The distinct labels present in the pool are shuffled into a ring and
/// client `i` takes ring positions `i*L .. i*L + L` (mod the ring size). A
/// client's quota is split evenly across its labels, the remainder going to
/// its first labels. No sample is used twice.
pub fn partition_by_label(
    pool: &[DataSample],
    n_clients: usize,
    labels_per_client: usize,
    samples_per_client: usize,
    seed: u64,
) -> Result<FederatedDataset> {
    if n_clients == 0 {
        return Err(invalid("n_clients", "must be at least 1"));
    }
    if labels_per_client == 0 || samples_per_client < labels_per_client {
        return Err(invalid(
            "samples_per_client",
            format!("need at least one sample per label ({labels_per_client} labels, {samples_per_client} samples)"),
        ));
    }
    let dim = pool.first().map(|s| s.features.len()).ok_or_else(|| invalid("pool", "is empty"))?;
    let classes = pool.iter().map(|s| s.label).max().unwrap_or(0) + 1;

    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in pool.iter().enumerate() {
        by_label[s.label].push(i);
    }
    let mut rng = stream(seed, Purpose::Partition, 0);
    let mut ring: Vec<usize> = (0..classes).filter(|&c| !by_label[c].is_empty()).collect();
    if ring.len() < labels_per_client {
        return Err(Error::NotEnoughLabels {
            available: ring.len(),
            requested: labels_per_client,
        });
    }
    ring.shuffle(&mut rng);

    let mut quotas: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n_clients);
    let mut demand = vec![0usize; classes];
    for i in 0..n_clients {
        let base = samples_per_client / labels_per_client;
        let extra = samples_per_client % labels_per_client;
        let q: Vec<(usize, usize)> = (0..labels_per_client)
            .map(|j| {
                let label = ring[(i * labels_per_client + j) % ring.len()];
                (label, base + usize::from(j < extra))
            })
            .collect();
        for &(label, count) in &q {
            demand[label] += count;
        }
        quotas.push(q);
    }
    for (label, &need) in demand.iter().enumerate() {
        if need > by_label[label].len() {
            return Err(Error::InsufficientLabel {
                label,
                needed: need,
                available: by_label[label].len(),
            });
        }
    }
    for idx in by_label.iter_mut() {
        idx.shuffle(&mut rng);
    }

    let mut cursor = vec![0usize; classes];
    let mut shards = Vec::with_capacity(n_clients);
    for (i, q) in quotas.iter().enumerate() {
        let mut samples = Vec::with_capacity(samples_per_client);
        for &(label, count) in q {
            let start = cursor[label];
            samples.extend(by_label[label][start..start + count].iter().map(|&s| pool[s].clone()));
            cursor[label] += count;
        }
        shards.push(ClientShard::new(i, &samples, dim)?);
    }
    FederatedDataset::from_shards(shards, dim, classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::MagicMismatch {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Reads an IDX image file and its label file.
///
/// Pixels are scaled from `0..=255` to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<DataSample>> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    check_magic(&images, IDX_IMAGES_MAGIC, images_path)?;
    check_magic(&labels, IDX_LABELS_MAGIC, labels_path)?;

    let n_images = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let n_labels = be_u32(&labels, 4, labels_path)? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let dim = rows * cols;
    let img_len = 16 + n_images * dim;
    if images.len() < img_len {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            expected: img_len,
            actual: images.len(),
        });
    }
    if labels.len() < 8 + n_labels {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            expected: 8 + n_labels,
            actual: labels.len(),
        });
    }
    Ok((0..n_images)
        .map(|i| DataSample {
            features: images[16 + i * dim..16 + (i + 1) * dim]
                .iter()
                .map(|&p| f64::from(p) / 255.0)
                .collect(),
            label: usize::from(labels[8 + i]),
        })
        .collect())
}

/// Writes one row per sample: `client_id, label, x0, .., x{d-1}`.
pub fn write_dataset_csv<W: Write>(dataset: &FederatedDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["client_id".to_string(), "label".to_string()];
    header.extend((0..dataset.dim).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for shard in &dataset.shards {
        for (row, label) in shard.features.axis_iter(Axis(0)).zip(&shard.labels) {
            let mut rec = vec![shard.client_id.to_string(), label.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|source| Error::Io {
        path: "<csv>".into(),
        source,
    })?;
    Ok(())
}
