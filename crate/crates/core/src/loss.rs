//! Pixel-level NT-Xent contrastive loss over corresponding descriptors.
//!
//! Descriptors are laid out as `M` pairs: rows `2k` and `2k + 1` are the two
//! views of correspondence `k`. Every row is an anchor whose positive is its
//! partner and whose negatives are the other rows of its pool.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{matmul, Mat, Scalar};

/// Which descriptors compete as negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePool {
    /// every descriptor in the batch
    #[default]
    Batch,
    /// only descriptors from the same image pair
    PerImagePair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub pool: NegativePool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            pool: NegativePool::Batch,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidParam(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Flat `2M × dim` descriptor rows plus the number of pairs contributed by
/// each image pair, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorBatch<T> {
    pub dim: usize,
    pub data: Vec<T>,
    pub groups: Vec<usize>,
}

/// Maximum tolerated deviation of a descriptor norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-3;

impl<T: Scalar> DescriptorBatch<T> {
    /// A batch with a single group holding every pair.
    pub fn new(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(2 * dim) {
            return Err(Error::DimMismatch(format!(
                "{} values do not form pairs of {dim}-vectors",
                data.len()
            )));
        }
        let m = data.len() / (2 * dim);
        Self::with_groups(dim, data, vec![m])
    }

    pub fn with_groups(dim: usize, data: Vec<T>, groups: Vec<usize>) -> Result<Self> {
        let pairs: usize = groups.iter().sum();
        if dim == 0 || data.len() != 2 * pairs * dim {
            return Err(Error::DimMismatch(format!(
                "{} values for {pairs} pairs of dim {dim}",
                data.len()
            )));
        }
        if pairs == 0 {
            return Err(Error::Empty("descriptor batch"));
        }
        Ok(Self { dim, data, groups })
    }

    pub fn pairs(&self) -> usize {
        self.data.len() / (2 * self.dim)
    }

    pub fn rows(&self) -> usize {
        2 * self.pairs()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn check_norms(&self) -> Result<()> {
        for i in 0..self.rows() {
            let n = self.row(i).iter().map(|&x| x * x).sum::<T>().sqrt();
            let n = n.to_f64().unwrap_or(f64::NAN);
            if !((n - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(Error::InvalidParam(format!(
                    "descriptor {i} has norm {n}, expected unit length"
                )));
            }
        }
        Ok(())
    }

    /// Row ranges of the negative pools under `pool`.
    fn pools(&self, pool: NegativePool) -> Vec<(usize, usize)> {
        match pool {
            NegativePool::Batch => vec![(0, self.rows())],
            NegativePool::PerImagePair => {
                let mut start = 0;
                self.groups
                    .iter()
                    .filter(|&&g| g > 0)
                    .map(|&g| {
                        let r = (start, start + 2 * g);
                        start += 2 * g;
                        r
                    })
                    .collect()
            }
        }
    }
}

/// All pairwise dot products, `2M × 2M` row-major.
pub fn similarity_matrix<T: Scalar>(batch: &DescriptorBatch<T>) -> Result<Vec<T>> {
    batch.check_norms()?;
    Ok(gram(&batch.data, batch.rows(), batch.dim))
}

fn gram<T: Scalar>(data: &[T], n: usize, dim: usize) -> Vec<T> {
    let mut s = vec![T::zero(); n * n];
    let m = Mat::new(data, n, dim);
    matmul(m, m.t(), &mut s, T::zero());
    s
}

/// Turns row `i` of a pool's similarity matrix into the softmax over
/// `k ≠ i` of `s / τ`, multiplied by `weight` (skipped when `None`).
/// Returns the negative log-probability of the positive `pos`.
fn anchor_term<T: Scalar>(row: &mut [T], i: usize, pos: usize, inv_tau: T, weight: Option<T>) -> T {
    let positive = row[pos];
    row[i] = T::neg_infinity();
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = ((*x - max) * inv_tau).exp();
        sum += *x;
    }
    if let Some(w) = weight {
        let f = w / sum;
        row.iter_mut().for_each(|x| *x *= f);
    }
    (max - positive) * inv_tau + sum.ln()
}

fn ntxent_impl<T: Scalar>(
    batch: &DescriptorBatch<T>,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(T, Vec<T>)> {
    cfg.validate()?;
    batch.check_norms()?;
    let dim = batch.dim;
    let total_rows = batch.rows();
    let inv_tau = T::lit(1.0 / cfg.temperature);
    // d loss / d s_ik = (P_ik − [k = positive]) / (τ · rows)
    let scale = inv_tau / T::lit(total_rows as f64);
    let weight = want_grad.then_some(scale);
    let mut loss = T::zero();
    let mut grad = if want_grad {
        vec![T::zero(); batch.data.len()]
    } else {
        Vec::new()
    };
    for (start, end) in batch.pools(cfg.pool) {
        let n = end - start;
        let rows = &batch.data[start * dim..end * dim];
        let mut probs = gram(rows, n, dim);
        for (i, row) in probs.chunks_exact_mut(n).enumerate() {
            loss += anchor_term(row, i, i ^ 1, inv_tau, weight);
        }
        if want_grad {
            // (P + Pᵀ)·d − 2·d_positive, scaled
            let out = &mut grad[start * dim..end * dim];
            let p = Mat::new(&probs, n, n);
            let d = Mat::new(rows, n, dim);
            matmul(p, d, out, T::zero());
            matmul(p.t(), d, out, T::one());
            let two = T::lit(2.0) * scale;
            for i in 0..n {
                let partner = &rows[(i ^ 1) * dim..((i ^ 1) + 1) * dim];
                for (g, &x) in out[i * dim..(i + 1) * dim].iter_mut().zip(partner) {
                    *g -= two * x;
                }
            }
        }
    }
    Ok((loss / T::lit(total_rows as f64), grad))
}

/// Mean over all `2M` anchors of `−log softmax` at the positive, with
/// similarities divided by the temperature.
pub fn ntxent<T: Scalar>(batch: &DescriptorBatch<T>, cfg: &LossConfig) -> Result<T> {
    ntxent_impl(batch, cfg, false).map(|(l, _)| l)
}

/// Loss and its gradient with respect to every descriptor row.
pub fn ntxent_grad<T: Scalar>(batch: &DescriptorBatch<T>, cfg: &LossConfig) -> Result<(T, Vec<T>)> {
    ntxent_impl(batch, cfg, true)
}
