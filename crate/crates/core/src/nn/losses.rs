use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Argument order of the KL consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(p_clean || p_adv)`: the clean distribution is the reference.
    #[default]
    CleanToAdv,
    /// `KL(p_adv || p_clean)`.
    AdvToClean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    L1,
    L2,
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb || sa.len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            shapes: vec![sa.to_vec(), sb.to_vec()],
        });
    }
    Ok(())
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = match tape.value(logits).shape() {
        [r, k] => (*r, *k),
        s => {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                shapes: vec![s.to_vec()],
            })
        }
    };
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            shapes: vec![vec![rows, classes], vec![labels.len()]],
        });
    }
    let mask = tape.constant(one_hot(labels, classes)?);
    let lsm = tape.log_softmax(logits)?;
    let picked = tape.mul(lsm, mask)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / rows as f64)
}

/// Mean KL divergence between the softmax distributions of two logit batches.
///
/// `logits_clean` is detached: no gradient reaches it.
pub fn kl_consistency(tape: &mut Tape, logits_adv: Var, logits_clean: Var, direction: KlDirection) -> Result<Var> {
    same_shape(tape, "kl_consistency", logits_adv, logits_clean)?;
    let rows = tape.value(logits_adv).rows();
    let clean = tape.stop_gradient(logits_clean)?;
    let log_p = tape.log_softmax(clean)?;
    let log_q = tape.log_softmax(logits_adv)?;
    let terms = match direction {
        KlDirection::CleanToAdv => {
            let p = tape.exp(log_p)?;
            let diff = tape.sub(log_p, log_q)?;
            tape.mul(p, diff)?
        }
        KlDirection::AdvToClean => {
            let q = tape.exp(log_q)?;
            let diff = tape.sub(log_q, log_p)?;
            tape.mul(q, diff)?
        }
    };
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / rows as f64)
}

/// Mean over the batch of the L1 or L2 norm of `a - b`, with `b` detached.
pub fn logit_distance(tape: &mut Tape, kind: DistanceKind, logits_a: Var, logits_b: Var) -> Result<Var> {
    same_shape(tape, "logit_distance", logits_a, logits_b)?;
    let b = tape.stop_gradient(logits_b)?;
    let diff = tape.sub(logits_a, b)?;
    let per_row = match kind {
        DistanceKind::L1 => {
            let a = tape.abs(diff)?;
            tape.sum_cols(a)?
        }
        DistanceKind::L2 => tape.row_l2_norm(diff)?,
    };
    tape.mean(per_row)
}

/// Mean binary cross-entropy of domain logits against a fixed domain label
/// (`source = true` means label 1).
pub fn domain_bce(tape: &mut Tape, logits: Var, source: bool) -> Result<Var> {
    // bce(z, 1) = softplus(-z), bce(z, 0) = softplus(z)
    let z = if source { tape.scale(logits, -1.0)? } else { logits };
    let sp = tape.softplus(z)?;
    tape.mean(sp)
}

/// DANN domain loss for one (source-side, target-side) pair of domain-logit
/// batches: the average of the two sides' mean binary cross-entropies.
pub fn domain_adversarial(tape: &mut Tape, source_logits: Var, target_logits: Var) -> Result<Var> {
    let s = domain_bce(tape, source_logits, true)?;
    let t = domain_bce(tape, target_logits, false)?;
    let both = tape.add(s, t)?;
    tape.scale(both, 0.5)
}
