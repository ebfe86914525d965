//! Composite autoencoder losses and latent correlation diagnostics.
//!
//! Tape functions return penalties without their weight; [`total_loss`]
//! applies it. Diagnostics run in `f64` on plain row-major slices.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::linalg::{det_lu, principal_submatrix};
use crate::models::{LatentVars, Variant};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// Variance floor inside the training-time correlation penalty.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Determinants below this are reported as exactly zero.
pub const DET_ZERO: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum DisentangleError {
    Tensor(TensorError),
    NonPositiveWeight(f64),
    TooFewSamples(usize),
    Shape { rows: usize, cols: usize, len: usize },
    /// A latent variable that takes a single value over every sample.
    ZeroVariance { column: usize },
    SubsetIndex { index: usize, dim: usize },
    DuplicateIndex(usize),
}

impl fmt::Display for DisentangleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DisentangleError::Tensor(e) => write!(f, "{e}"),
            DisentangleError::NonPositiveWeight(w) => write!(f, "loss weight must be positive, got {w}"),
            DisentangleError::TooFewSamples(k) => write!(f, "need at least 2 samples for a correlation, got {k}"),
            DisentangleError::Shape { rows, cols, len } => {
                write!(f, "{len} values do not form a {rows}x{cols} matrix")
            }
            DisentangleError::ZeroVariance { column } => {
                write!(f, "latent variable {column} has zero variance (collapsed)")
            }
            DisentangleError::SubsetIndex { index, dim } => write!(f, "index {index} out of range for dimension {dim}"),
            DisentangleError::DuplicateIndex(i) => write!(f, "index {i} repeated in subset"),
        }
    }
}

impl core::error::Error for DisentangleError {}

impl From<TensorError> for DisentangleError {
    fn from(e: TensorError) -> Self {
        DisentangleError::Tensor(e)
    }
}

/// Which penalty to add and its weight (λ, ν or β).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kind: Variant,
    pub weight: f64,
}

impl LossWeights {
    pub fn new(kind: Variant, weight: f64) -> Result<Self, DisentangleError> {
        let w = Self { kind, weight };
        w.validate()?;
        Ok(w)
    }

    pub fn plain() -> Self {
        Self { kind: Variant::Plain, weight: 0.0 }
    }

    pub fn validate(&self) -> Result<(), DisentangleError> {
        if self.kind != Variant::Plain && !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(DisentangleError::NonPositiveWeight(self.weight));
        }
        Ok(())
    }
}

// ---- tape losses ------------------------------------------------------

/// Mean squared error over all entries.
pub fn reconstruction_loss<T: Real>(tape: &mut Tape<T>, x: Var, x_rec: Var) -> Result<Var, TensorError> {
    if tape.shape(x) != tape.shape(x_rec) {
        return Err(TensorError::ShapeMismatch {
            op: "reconstruction_loss",
            left: tape.shape(x).to_vec(),
            right: tape.shape(x_rec).to_vec(),
        });
    }
    let d = tape.sub(x, x_rec)?;
    let d2 = tape.square(d)?;
    tape.mean(d2, None)
}

fn latent_dims<T: Real>(tape: &Tape<T>, z: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
    match *tape.shape(z) {
        [b, m] if b > 0 && m > 0 => Ok((b, m)),
        _ => Err(TensorError::ShapeMismatch { op, left: tape.shape(z).to_vec(), right: vec![0, 0] }),
    }
}

/// `‖ZᵀZ − I‖²_F / m²`.
pub fn oae_penalty<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var, TensorError> {
    let (_, m) = latent_dims(tape, z, "oae_penalty")?;
    let zt = tape.transpose(z)?;
    let gram = tape.matmul(zt, z)?;
    let eye = tape.constant(Tensor::eye(m));
    let d = tape.sub(gram, eye)?;
    let d2 = tape.square(d)?;
    let s = tape.sum(d2, None)?;
    tape.scale(s, T::of(1.0 / (m * m) as f64))
}

/// Batch Pearson correlation matrix `R` on the tape, with each variance
/// floored at [`VARIANCE_FLOOR`].
pub fn batch_correlation<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var, TensorError> {
    let (b, m) = latent_dims(tape, z, "batch_correlation")?;
    let mean = tape.mean(z, Some(&[0]))?;
    let c = tape.sub(z, mean)?;
    let ct = tape.transpose(c)?;
    let cov = tape.matmul(ct, c)?;
    let cov = tape.scale(cov, T::of(1.0 / b as f64))?;
    let c2 = tape.square(c)?;
    let var = tape.mean(c2, Some(&[0]))?;
    let var = tape.clamp(var, T::of(VARIANCE_FLOOR), T::max_value())?;
    let sd = tape.sqrt(var)?;
    let col = tape.reshape(sd, &[m, 1])?;
    let row = tape.reshape(sd, &[1, m])?;
    let denom = tape.mul(col, row)?;
    tape.div(cov, denom)
}

/// `‖R − I‖²_F / m²` for the batch correlation matrix.
///
/// Evaluated as the off-diagonal sum `Σ_{i≠j} R²ᵢⱼ / m²`, which equals the
/// Frobenius form because `Rᵢᵢ = 1` whenever the variance is above the floor;
/// below it the diagonal term would push collapsed variables apart instead of
/// decorrelating them.
pub fn uae_penalty<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var, TensorError> {
    let (_, m) = latent_dims(tape, z, "uae_penalty")?;
    let r = batch_correlation(tape, z)?;
    let r2 = tape.square(r)?;
    let mut mask = Tensor::full(&[m, m], T::one());
    for i in 0..m {
        mask.data_mut()[i * m + i] = T::zero();
    }
    let mask = tape.constant(mask);
    let off = tape.mul(r2, mask)?;
    let s = tape.sum(off, None)?;
    tape.scale(s, T::of(1.0 / (m * m) as f64))
}

/// KL divergence to the standard normal prior, per variable (`[m]`) and
/// summed: `(1/2b)·Σᵢ(σ² + μ² − 1 − logσ²)`.
pub fn kl_divergence<T: Real>(tape: &mut Tape<T>, mu: Var, log_var: Var) -> Result<(Var, Var), TensorError> {
    let (b, _) = latent_dims(tape, mu, "kl_divergence")?;
    if tape.shape(mu) != tape.shape(log_var) {
        return Err(TensorError::ShapeMismatch {
            op: "kl_divergence",
            left: tape.shape(mu).to_vec(),
            right: tape.shape(log_var).to_vec(),
        });
    }
    let var = tape.exp(log_var)?;
    let mu2 = tape.square(mu)?;
    let t = tape.add(var, mu2)?;
    let t = tape.sub(t, log_var)?;
    let t = tape.shift(t, -T::one())?;
    let per = tape.sum(t, Some(&[0]))?;
    let per = tape.scale(per, T::of(1.0 / (2 * b) as f64))?;
    let total = tape.sum(per, None)?;
    Ok((per, total))
}

/// Loss terms recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub reconstruction: Var,
    /// Unweighted penalty; `None` for the plain model.
    pub penalty: Option<Var>,
}

/// Reconstruction loss plus the weighted penalty matching `weights.kind`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    weights: LossWeights,
    x: Var,
    x_rec: Var,
    latent: LatentVars,
) -> Result<LossVars, DisentangleError> {
    weights.validate()?;
    let reconstruction = reconstruction_loss(tape, x, x_rec)?;
    let penalty = match (weights.kind, latent) {
        (Variant::Plain, _) => None,
        (Variant::Oae, LatentVars::Point(z)) => Some(oae_penalty(tape, z)?),
        (Variant::Uae, LatentVars::Point(z)) => Some(uae_penalty(tape, z)?),
        (Variant::BetaVae, LatentVars::Gaussian { mu, log_var }) => Some(kl_divergence(tape, mu, log_var)?.1),
        (kind, _) => {
            return Err(TensorError::InvalidArgument(match kind {
                Variant::BetaVae => "beta_vae loss needs a Gaussian latent payload",
                _ => "penalty needs a point latent payload",
            })
            .into())
        }
    };
    let total = match penalty {
        Some(p) => {
            let wp = tape.scale(p, T::of(weights.weight))?;
            tape.add(reconstruction, wp)?
        }
        None => reconstruction,
    };
    Ok(LossVars { total, reconstruction, penalty })
}

// ---- diagnostics ------------------------------------------------------

/// Pearson correlation matrix of `K` samples of `m` variables.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub dim: usize,
    pub samples: usize,
    /// Row-major `dim × dim`.
    pub values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    /// Determinant of the matrix or of its principal submatrix on `subset`.
    pub fn det(&self, subset: Option<&[usize]>) -> Result<f64, DisentangleError> {
        det_r(self, subset)
    }
}

/// Strict Pearson matrix of the row-major `k × m` matrix `z`. A column with a
/// single repeated value is an error naming that column.
pub fn pearson_matrix(z: &[f64], k: usize, m: usize) -> Result<CorrelationMatrix, DisentangleError> {
    if z.len() != k * m || m == 0 {
        return Err(DisentangleError::Shape { rows: k, cols: m, len: z.len() });
    }
    if k < 2 {
        return Err(DisentangleError::TooFewSamples(k));
    }
    let mut means = vec![0.0; m];
    for row in z.chunks_exact(m) {
        means.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
    }
    means.iter_mut().for_each(|a| *a /= k as f64);
    for j in 0..m {
        let first = z[j];
        if z.iter().skip(j).step_by(m).all(|&v| v == first) {
            return Err(DisentangleError::ZeroVariance { column: j });
        }
    }
    let mut cross = vec![0.0; m * m];
    for row in z.chunks_exact(m) {
        for i in 0..m {
            let di = row[i] - means[i];
            for j in i..m {
                cross[i * m + j] += di * (row[j] - means[j]);
            }
        }
    }
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let r = cross[i * m + j] / (cross[i * m + i].sqrt() * cross[j * m + j].sqrt());
            values[i * m + j] = r;
            values[j * m + i] = r;
        }
    }
    Ok(CorrelationMatrix { dim: m, samples: k, values })
}

/// `det(R)` or of the principal submatrix on `subset`, via pivoted LU.
/// Results below [`DET_ZERO`] are reported as 0.
pub fn det_r(r: &CorrelationMatrix, subset: Option<&[usize]>) -> Result<f64, DisentangleError> {
    let det = match subset {
        None => det_lu(&r.values, r.dim),
        Some(idx) => {
            for (n, &i) in idx.iter().enumerate() {
                if i >= r.dim {
                    return Err(DisentangleError::SubsetIndex { index: i, dim: r.dim });
                }
                if idx[..n].contains(&i) {
                    return Err(DisentangleError::DuplicateIndex(i));
                }
            }
            det_lu(&principal_submatrix(&r.values, r.dim, idx), idx.len())
        }
    };
    Ok(if det < DET_ZERO { 0.0 } else { det })
}

/// Per-variable KL terms for row-major `b × m` matrices of means and
/// log-variances, in `f64`.
pub fn kl_per_variable(mu: &[f64], log_var: &[f64], m: usize) -> Result<Vec<f64>, DisentangleError> {
    if m == 0 || mu.len() != log_var.len() || mu.len() % m != 0 || mu.is_empty() {
        return Err(DisentangleError::Shape { rows: mu.len() / m.max(1), cols: m, len: log_var.len() });
    }
    let b = mu.len() / m;
    let mut out = vec![0.0; m];
    for (rm, rl) in mu.chunks_exact(m).zip(log_var.chunks_exact(m)) {
        for j in 0..m {
            out[j] += rl[j].exp() + rm[j] * rm[j] - 1.0 - rl[j];
        }
    }
    out.iter_mut().for_each(|v| *v /= (2 * b) as f64);
    Ok(out)
}

/// Reported correlation metric: `|R₁₂|` for two variables, `det(R)` beyond.
/// `None` when a variable has collapsed.
pub fn correlation_metric(z: &[f64], k: usize, m: usize) -> Option<f64> {
    let r = pearson_matrix(z, k, m).ok()?;
    if m == 2 {
        Some(r.get(0, 1).abs())
    } else {
        det_r(&r, None).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_pearson() {
        let r = pearson_matrix(&[1.0, 2.0, 2.0, 1.0, 3.0, 3.0], 3, 2).unwrap();
        assert!((r.get(0, 1) - 0.5).abs() < 1e-12);
        assert_eq!(r.get(0, 1), r.get(1, 0));
    }

    #[test]
    fn zero_variance_names_column() {
        let err = pearson_matrix(&[1.0, 5.0, 2.0, 5.0, 3.0, 5.0], 3, 2).unwrap_err();
        assert_eq!(err, DisentangleError::ZeroVariance { column: 1 });
    }

    #[test]
    fn det_half_correlation() {
        let r = CorrelationMatrix { dim: 2, samples: 3, values: vec![1.0, 0.5, 0.5, 1.0] };
        assert!((det_r(&r, None).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(det_r(&r, Some(&[1])).unwrap(), 1.0);
        assert!(det_r(&r, Some(&[0, 0])).is_err());
        assert!(det_r(&r, Some(&[2])).is_err());
    }

    #[test]
    fn weights_validated() {
        assert!(LossWeights::new(Variant::Uae, 0.0).is_err());
        assert!(LossWeights::new(Variant::Plain, 0.0).is_ok());
    }
}
