//! Shared numeric machinery for the trainers: feature standardization, the
//! split model assembly, the supervised loss, and seeded batch sampling.
//!
//! The federated and centralized training paths both call into these
//! functions so that one communication round with a single local update is
//! arithmetically identical to one centralized SGD step on the composed
//! model.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DenseNet, GradientBundle};
use crate::scenario::Dataset;

/// Per-dimension affine normalization fitted on the training slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &Array2<f64>) -> Self {
        let n = rows.nrows().max(1) as f64;
        let mean = rows.sum_axis(Axis(0)) / n;
        let mut var = Array1::zeros(rows.ncols());
        for row in rows.rows() {
            for (j, (&x, &m)) in row.iter().zip(mean.iter()).enumerate() {
                var[j] += (x - m) * (x - m);
            }
        }
        var /= n;
        let std = var.mapv(|v| v.sqrt().max(1e-8));
        Standardizer {
            mean: mean.to_vec(),
            std: std.to_vec(),
        }
    }

    pub fn transform(&self, rows: &Array2<f64>) -> Array2<f64> {
        let mut out = rows.clone();
        for mut row in out.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn inverse_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &x)| x * self.std[j] + self.mean[j])
            .collect()
    }
}

/// Architecture shapes shared by every method of a comparison set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden sizes of every party's sub-model.
    pub sub_hidden: Vec<usize>,
    /// Hidden sizes of the host's global model.
    pub global_hidden: Vec<usize>,
    /// Sub-model output dimension (0 means: number of cells).
    pub output_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sub_hidden: vec![64],
            global_hidden: vec![64],
            output_dim: 0,
        }
    }
}

impl ModelConfig {
    pub fn resolved_output_dim(&self, n_cells: usize) -> usize {
        if self.output_dim == 0 {
            n_cells
        } else {
            self.output_dim
        }
    }

    pub fn sub_sizes(&self, in_dim: usize, n_cells: usize) -> Vec<usize> {
        let mut sizes = vec![in_dim];
        sizes.extend_from_slice(&self.sub_hidden);
        sizes.push(self.resolved_output_dim(n_cells));
        sizes
    }

    pub fn global_sizes(&self, n_parties_with_sub: usize, n_cells: usize) -> Vec<usize> {
        let dz = self.resolved_output_dim(n_cells);
        let mut sizes = vec![dz * n_parties_with_sub];
        sizes.extend_from_slice(&self.global_hidden);
        sizes.push(2 * n_cells);
        sizes
    }
}

/// Deterministic per-party initialization seeds.
pub fn party_seed(seed: u64, tag: &str) -> u64 {
    let digest = sha2::Sha256::digest(format!("{seed}:{tag}").as_bytes());
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

use sha2::Digest;

/// The full split model as one value: host sub-model, guest sub-models and
/// the host global model. The centralized baselines train this directly; the
/// protocol distributes its parts across parties.
#[derive(Debug, Clone)]
pub struct ComposedModel {
    pub host_sub: DenseNet,
    pub guest_subs: Vec<DenseNet>,
    pub global: DenseNet,
}

impl ComposedModel {
    pub fn init(
        host_in: usize,
        guest_ins: &[usize],
        n_cells: usize,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        let host_sub = DenseNet::init(&cfg.sub_sizes(host_in, n_cells), party_seed(seed, "host_sub"))?;
        let mut guest_subs = Vec::with_capacity(guest_ins.len());
        for (k, &g_in) in guest_ins.iter().enumerate() {
            guest_subs.push(DenseNet::init(
                &cfg.sub_sizes(g_in, n_cells),
                party_seed(seed, &format!("guest_sub{k}")),
            )?);
        }
        let global = DenseNet::init(
            &cfg.global_sizes(1 + guest_ins.len(), n_cells),
            party_seed(seed, "global"),
        )?;
        Ok(ComposedModel {
            host_sub,
            guest_subs,
            global,
        })
    }

    /// Forward pass: z⁰ = sub⁰(x⁰), z^k = sub^k(x^k), ŷ = global(z⁰‖z¹‖…).
    pub fn forward(&self, x_host: &Array2<f64>, x_guests: &[Array2<f64>]) -> Result<Array2<f64>> {
        let z0 = self.host_sub.forward(x_host)?;
        let mut zs = vec![z0];
        for (net, x) in self.guest_subs.iter().zip(x_guests) {
            zs.push(net.forward(x)?);
        }
        let input = concat_columns(&zs)?;
        self.global.forward(&input)
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.host_sub.l2_norm_sq()
            + self.global.l2_norm_sq()
            + self.guest_subs.iter().map(|n| n.l2_norm_sq()).sum::<f64>()
    }
}

pub fn concat_columns(parts: &[Array2<f64>]) -> Result<Array2<f64>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Dimension(e.to_string()))
}

/// Mean-squared supervised loss over a batch: per sample
/// (1/N)‖k − k̂‖² + α (1/N)‖q − q̂‖², averaged over the batch. Returns the
/// loss and its cotangent with respect to the predictions.
pub fn supervised_loss(
    predictions: &Array2<f64>,
    labels: &Array2<f64>,
    n_cells: usize,
    alpha: f64,
) -> Result<(f64, Array2<f64>)> {
    if predictions.dim() != labels.dim() {
        return Err(Error::Dimension(format!(
            "predictions {:?} vs labels {:?}",
            predictions.dim(),
            labels.dim()
        )));
    }
    if predictions.ncols() != 2 * n_cells {
        return Err(Error::Dimension("expected 2N outputs".into()));
    }
    if alpha < 0.0 {
        return Err(Error::Config("alpha must be nonnegative".into()));
    }
    let batch = predictions.nrows().max(1) as f64;
    let n = n_cells as f64;
    let mut loss = 0.0;
    let mut cot = Array2::zeros(predictions.dim());
    for (i, (p, l)) in predictions.rows().into_iter().zip(labels.rows()).enumerate() {
        for j in 0..2 * n_cells {
            let weight = if j < n_cells { 1.0 } else { alpha };
            let diff = p[j] - l[j];
            loss += weight * diff * diff / n;
            cot[(i, j)] = 2.0 * weight * diff / (n * batch);
        }
    }
    Ok((loss / batch, cot))
}

/// The collaborative objective: average per-sample loss over the whole
/// dataset plus λ Σ_k ‖θ^k‖².
pub fn objective(
    model: &ComposedModel,
    x_host: &Array2<f64>,
    x_guests: &[Array2<f64>],
    labels: &Array2<f64>,
    n_cells: usize,
    alpha: f64,
    lambda: f64,
) -> Result<f64> {
    let preds = model.forward(x_host, x_guests)?;
    let (data, _) = supervised_loss(&preds, labels, n_cells, alpha)?;
    Ok(data + lambda * model.l2_norm_sq())
}

/// Epochwise without-replacement batch sampler: a seeded reshuffle each time
/// the pool empties; trailing partial batches are dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pool: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(indices: Vec<usize>, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if indices.is_empty() {
            return Err(Error::Config("empty index pool".into()));
        }
        Ok(BatchSampler {
            pool: indices,
            cursor: usize::MAX, // forces an initial shuffle
            batch_size,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let take = self.batch_size.min(self.pool.len());
        if self.cursor == usize::MAX || self.cursor + take > self.pool.len() {
            self.pool.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.pool[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        batch
    }
}

/// Extracts a party's feature matrix from the dataset records.
pub fn host_features(ds: &Dataset) -> Array2<f64> {
    let mut m = Array2::zeros((ds.len(), ds.host_dim()));
    for (i, rec) in ds.records.iter().enumerate() {
        m.row_mut(i).assign(&Array1::from_vec(rec.x_host.clone()));
    }
    m
}

pub fn guest_features(ds: &Dataset, k: usize) -> Array2<f64> {
    let mut m = Array2::zeros((ds.len(), ds.guest_dim()));
    for (i, rec) in ds.records.iter().enumerate() {
        m.row_mut(i)
            .assign(&Array1::from_vec(rec.x_guest_k[k].clone()));
    }
    m
}

pub fn labels_matrix(ds: &Dataset) -> Array2<f64> {
    let mut m = Array2::zeros((ds.len(), ds.label_dim()));
    for (i, rec) in ds.records.iter().enumerate() {
        m.row_mut(i).assign(&Array1::from_vec(rec.labels.clone()));
    }
    m
}

/// Per-link speed features derived from a guest's (travel time, travel
/// distance) window: the partial-fusion baseline's shared data.
pub fn speed_features(ds: &Dataset, k: usize) -> Array2<f64> {
    let h = ds.history_window;
    let n = ds.n_cells;
    let mut m = Array2::zeros((ds.len(), h * n));
    for (i, rec) in ds.records.iter().enumerate() {
        let x = &rec.x_guest_k[k];
        for slot in 0..h {
            for cell in 0..n {
                let tt = x[slot * 2 * n + 2 * cell];
                let td = x[slot * 2 * n + 2 * cell + 1];
                m[(i, slot * n + cell)] = if tt > 0.0 { td / tt } else { 0.0 };
            }
        }
    }
    m
}

/// Rows of a matrix selected by index list.
pub fn take_rows(m: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), m.ncols()));
    for (i, &idx) in indices.iter().enumerate() {
        out.row_mut(i).assign(&m.row(idx));
    }
    out
}

/// One gradient-descent update of a network from a batch cotangent, with L2
/// regularization folded in. Shared by the protocol parties and the
/// centralized trainer so both paths are bit-identical.
pub fn descend(
    net: &mut DenseNet,
    input: &Array2<f64>,
    cotangent: &Array2<f64>,
    eta: f64,
    lambda: f64,
) -> Result<GradientBundle> {
    let trace = net.forward_trace(input)?;
    let mut grads = net.backward(&trace, cotangent)?;
    net.add_l2_gradient(&mut grads, lambda);
    net.sgd_update(&grads, eta)?;
    Ok(grads)
}
