use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

/// A sample matrix from one domain.
///
/// Labels of a target dataset are only reachable through [`Self::eval_labels`];
/// the training entry points take [`LabeledData`] for the source and
/// [`UnlabeledData`] for the target.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    features: Tensor,
    labels: Option<Vec<usize>>,
    classes: usize,
    domain: DomainTag,
    provenance: String,
}

impl DomainDataset {
    pub fn new(
        features: Tensor,
        labels: Option<Vec<usize>>,
        classes: usize,
        domain: DomainTag,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "dataset features must be a matrix, got shape {:?}",
                features.shape()
            )));
        }
        if classes < 2 {
            return Err(Error::InvalidArgument("datasets need at least 2 classes".into()));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::InvalidArgument(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.rows()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= classes) {
                return Err(Error::LabelOutOfRange { label: bad, classes });
            }
        }
        Ok(Self {
            features,
            labels,
            classes,
            domain,
            provenance: provenance.into(),
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Labels for evaluation. Never consulted by training code.
    pub fn eval_labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Training view of a labeled dataset.
    pub fn labeled(&self) -> Result<LabeledData> {
        let labels = self
            .labels
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("dataset `{}` has no labels", self.provenance)))?;
        Ok(LabeledData {
            features: self.features.clone(),
            labels,
            classes: self.classes,
        })
    }

    /// Training view with the labels stripped.
    pub fn unlabeled(&self) -> UnlabeledData {
        UnlabeledData {
            features: self.features.clone(),
        }
    }

    /// Same samples with labels replaced (used to check label quarantine).
    pub fn with_labels(&self, labels: Option<Vec<usize>>) -> Result<Self> {
        Self::new(
            self.features.clone(),
            labels,
            self.classes,
            self.domain,
            self.provenance.clone(),
        )
    }

    /// Same samples with a different domain tag.
    pub fn retagged(&self, domain: DomainTag) -> Self {
        Self {
            domain,
            ..self.clone()
        }
    }
}

/// Features with labels, for supervised training.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Features only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledData {
    pub features: Tensor,
}

impl LabeledData {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<(Tensor, Vec<usize>)>> {
        batch_indices(self.len(), batch_size, seed, epoch)?
            .into_iter()
            .map(|idx| {
                let x = self.features.select_rows(&idx)?;
                let y = idx.iter().map(|&i| self.labels[i]).collect();
                Ok((x, y))
            })
            .collect()
    }
}

impl UnlabeledData {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Tensor>> {
        batch_indices(self.len(), batch_size, seed, epoch)?
            .into_iter()
            .map(|idx| self.features.select_rows(&idx))
            .collect()
    }
}

/// Shuffled index batches for one epoch; the trailing partial batch is dropped.
///
/// The permutation comes from the generator seeded with `seed` on stream
/// `SHUFFLE_BASE + epoch`, so `(seed, epoch)` fixes the order.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!("batch size must be >= 2, got {batch_size}")));
    }
    if batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} exceeds dataset size {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::seeded(seed, rng::stream::SHUFFLE_BASE + epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}
