use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Which statistics batch norm normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Statistics of the rows being normalized.
    Train,
    /// Running statistics.
    Eval,
}

/// Affine map `x W^T + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform in `[-1/sqrt(in), 1/sqrt(in)]` for weight and bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let w = draw(in_dim * out_dim);
        let b = draw(out_dim);
        Self {
            weight: Tensor::matrix(out_dim, in_dim, w).expect("finite init"),
            bias: Tensor::from_vec(b).expect("finite init"),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Applies a bound linear layer to a `[B, in]` batch.
pub fn linear_forward(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let rows = tape.value(x).rows();
    let wt = tape.transpose(weight)?;
    let xw = tape.matmul(x, wt)?;
    let b = tape.broadcast_rows(bias, rows)?;
    tape.add(xw, b)
}

/// Batch-norm parameters and running statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Per-feature statistics observed on one normalization group.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (divides by the row count), as used for normalization.
    pub var: Vec<f64>,
    pub rows: usize,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![dim], 1.0),
            beta: Tensor::zeros(vec![dim]),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds batch statistics into the running estimates.
    ///
    /// The running variance tracks the unbiased estimate.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let correction = if stats.rows > 1 {
            stats.rows as f64 / (stats.rows as f64 - 1.0)
        } else {
            1.0
        };
        for j in 0..self.dim() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * stats.mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * stats.var[j] * correction;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.gamma.numel() != d || self.beta.numel() != d || self.running_var.len() != d {
            return Err(Error::InvalidArgument("batch norm dimensions disagree".into()));
        }
        if !(self.eps > 0.0) || !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::InvalidArgument("batch norm eps/momentum out of range".into()));
        }
        if self.running_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("running variance must be >= 0".into()));
        }
        Ok(())
    }
}

/// Normalizes `x` (`[B, d]`) and applies `gamma`/`beta`.
///
/// In train mode the statistics are either `group_stats` (treated as
/// constants) or the statistics of `x` itself, differentiated through. The
/// statistics used are returned so the caller can fold them into the
/// running estimates. Eval mode uses the running estimates and returns `None`.
pub fn batchnorm_forward(
    tape: &mut Tape,
    state: &BatchNorm,
    gamma: Var,
    beta: Var,
    x: Var,
    mode: BnMode,
    group_stats: Option<(&[f64], &[f64])>,
) -> Result<(Var, Option<BatchStats>)> {
    let (rows, dim) = match tape.value(x).shape() {
        [r, d] => (*r, *d),
        s => {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                shapes: vec![s.to_vec()],
            })
        }
    };
    if dim != state.dim() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            shapes: vec![vec![rows, dim], vec![state.dim()]],
        });
    }
    let const_stats = match (mode, group_stats) {
        (BnMode::Eval, _) => Some((state.running_mean.clone(), state.running_var.clone())),
        (BnMode::Train, Some((m, v))) => {
            if m.len() != dim || v.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm",
                    shapes: vec![vec![m.len()], vec![v.len()], vec![dim]],
                });
            }
            Some((m.to_vec(), v.to_vec()))
        }
        (BnMode::Train, None) => None,
    };

    let (normalized, stats) = match const_stats {
        Some((mean, var)) => {
            let mean_b = Tensor::new(vec![rows, dim], mean.repeat(rows))?;
            // same arithmetic as the batch-statistics path below
            let inv: Vec<f64> = var.iter().map(|v| (v + state.eps).powf(-0.5)).collect();
            let inv_b = Tensor::new(vec![rows, dim], inv.repeat(rows))?;
            let mean_v = tape.constant(mean_b);
            let inv_v = tape.constant(inv_b);
            let xc = tape.sub(x, mean_v)?;
            let xn = tape.mul(xc, inv_v)?;
            let stats = (mode == BnMode::Train).then_some(BatchStats { mean, var, rows });
            (xn, stats)
        }
        None => {
            if rows < 2 {
                return Err(Error::DegenerateBatch(rows));
            }
            let inv_n = 1.0 / rows as f64;
            let s = tape.sum_rows(x)?;
            let mu = tape.scale(s, inv_n)?;
            let mu_b = tape.broadcast_rows(mu, rows)?;
            let xc = tape.sub(x, mu_b)?;
            let sq = tape.mul(xc, xc)?;
            let ss = tape.sum_rows(sq)?;
            let var = tape.scale(ss, inv_n)?;
            let ve = tape.add_scalar(var, state.eps)?;
            let inv = tape.powf(ve, -0.5)?;
            let inv_b = tape.broadcast_rows(inv, rows)?;
            let xn = tape.mul(xc, inv_b)?;
            let stats = BatchStats {
                mean: tape.value(mu).data().to_vec(),
                var: tape.value(var).data().to_vec(),
                rows,
            };
            (xn, Some(stats))
        }
    };
    let g = tape.broadcast_rows(gamma, rows)?;
    let b = tape.broadcast_rows(beta, rows)?;
    let scaled = tape.mul(normalized, g)?;
    let out = tape.add(scaled, b)?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(
        state: &BatchNorm,
        x: Tensor,
        mode: BnMode,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(Tensor, Option<BatchStats>)> {
        let mut t = Tape::new();
        let g = t.constant(state.gamma.clone());
        let b = t.constant(state.beta.clone());
        let xv = t.constant(x);
        let (y, s) = batchnorm_forward(&mut t, state, g, b, xv, mode, stats)?;
        Ok((t.value(y).clone(), s))
    }

    #[test]
    fn standardized_batch_is_near_identity() {
        let bn = BatchNorm::new(1);
        let x = Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap();
        let (y, _) = run(&bn, x, BnMode::Train, None).unwrap();
        let f = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((y.data()[0] + f).abs() < 1e-15);
        assert!((y.data()[1] - f).abs() < 1e-15);
    }

    #[test]
    fn constant_batch_maps_to_zero() {
        let bn = BatchNorm::new(2);
        let x = Tensor::from_rows(&[vec![3.0, -1.0], vec![3.0, -1.0], vec![3.0, -1.0]]).unwrap();
        let (y, s) = run(&bn, x, BnMode::Train, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.unwrap().var, vec![0.0, 0.0]);
    }

    #[test]
    fn eval_mode_formula() {
        let mut bn = BatchNorm::new(1);
        bn.gamma = Tensor::from_vec(vec![2.0]).unwrap();
        bn.beta = Tensor::from_vec(vec![1.0]).unwrap();
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let (y, s) = run(&bn, x, BnMode::Eval, None).unwrap();
        assert!(s.is_none());
        let expected = 2.0 / (1.0 + BN_EPS).sqrt() + 1.0;
        assert!((y.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn single_row_train_batch_is_degenerate() {
        let bn = BatchNorm::new(1);
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert!(matches!(
            run(&bn, x.clone(), BnMode::Train, None),
            Err(Error::DegenerateBatch(1))
        ));
        // supplied statistics lift the restriction
        let (y, _) = run(&bn, x, BnMode::Train, Some((&[1.0], &[4.0]))).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut bn = BatchNorm::new(1);
        bn.update_running(&BatchStats {
            mean: vec![1.0],
            var: vec![0.5],
            rows: 2,
        });
        assert!((bn.running_mean[0] - 0.1).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_is_reproducible() {
        let mut bn = BatchNorm::new(2);
        bn.running_mean = vec![0.3, -0.2];
        bn.running_var = vec![2.0, 0.5];
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.25]]).unwrap();
        let a = run(&bn, x.clone(), BnMode::Eval, None).unwrap().0;
        let b = run(&bn, x, BnMode::Eval, None).unwrap().0;
        assert_eq!(a, b);
    }
}
