use serde::{Deserialize, Serialize};

use super::layers::{batchnorm_forward, linear_forward, Activation, BatchNorm, BatchStats, BnMode, Linear};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Architecture of a [`UdaModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Widths of the feature extractor's hidden layers.
    pub feature_widths: Vec<usize>,
    pub batch_norm: bool,
    /// Hidden widths of the classifier head before the `classes` logits.
    pub classifier_hidden: Vec<usize>,
    pub classes: usize,
    /// Hidden widths of the domain discriminator before its single logit.
    pub discriminator_hidden: Vec<usize>,
    pub grl_coefficient: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_dim: 2,
            feature_widths: vec![32, 32],
            batch_norm: true,
            classifier_hidden: vec![],
            classes: 2,
            discriminator_hidden: vec![32],
            grl_coefficient: 1.0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("model.input_dim must be >= 1".into()));
        }
        if self.feature_widths.is_empty() {
            return Err(Error::Config("model.feature_widths must list at least one layer".into()));
        }
        let all = self
            .feature_widths
            .iter()
            .chain(&self.classifier_hidden)
            .chain(&self.discriminator_hidden);
        if all.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("model layer widths must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("model.classes must be >= 2".into()));
        }
        if !(self.grl_coefficient >= 0.0) {
            return Err(Error::Config("model.grl_coefficient must be >= 0".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.feature_widths.last().expect("validated spec")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayer {
    pub linear: Linear,
    pub bn: Option<BatchNorm>,
    pub activation: Activation,
}

/// Feature extractor F, classifier C and domain discriminator D.
///
/// D sees F's output through a gradient-reversal layer.
#[derive(Debug, Clone, PartialEq)]
pub struct UdaModel {
    pub spec: ModelSpec,
    pub features: Vec<FeatureLayer>,
    pub classifier: Vec<Linear>,
    pub discriminator: Vec<Linear>,
}

/// Which output of the model to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Features,
    ClassLogits,
    DomainLogit,
}

fn head(dims: &[usize], rng: Option<&mut Rng>) -> Vec<Linear> {
    match rng {
        Some(rng) => dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect(),
        None => dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
    }
}

impl UdaModel {
    /// Deterministic initialization from `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::seeded(seed, rng::stream::INIT);
        Ok(Self::build(spec, Some(&mut rng)))
    }

    /// All weights and biases zero; batch norm at its identity initialization.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self::build(spec, None))
    }

    fn build(spec: &ModelSpec, mut rng: Option<&mut Rng>) -> Self {
        let mut features = Vec::new();
        let mut prev = spec.input_dim;
        for &w in &spec.feature_widths {
            let linear = match rng.as_deref_mut() {
                Some(r) => Linear::init(prev, w, r),
                None => Linear::zeros(prev, w),
            };
            features.push(FeatureLayer {
                linear,
                bn: spec.batch_norm.then(|| BatchNorm::new(w)),
                activation: Activation::Relu,
            });
            prev = w;
        }
        let mut cdims = vec![spec.feature_dim()];
        cdims.extend(&spec.classifier_hidden);
        cdims.push(spec.classes);
        let mut ddims = vec![spec.feature_dim()];
        ddims.extend(&spec.discriminator_hidden);
        ddims.push(1);
        let classifier = head(&cdims, rng.as_deref_mut());
        let discriminator = head(&ddims, rng);
        Self {
            spec: spec.clone(),
            features,
            classifier,
            discriminator,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Trainable tensors with their names, in canonical order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.features.iter().enumerate() {
            out.push((format!("feature.{i}.weight"), &l.linear.weight));
            out.push((format!("feature.{i}.bias"), &l.linear.bias));
            if let Some(bn) = &l.bn {
                out.push((format!("feature.{i}.bn.gamma"), &bn.gamma));
                out.push((format!("feature.{i}.bn.beta"), &bn.beta));
            }
        }
        for (i, l) in self.classifier.iter().enumerate() {
            out.push((format!("classifier.{i}.weight"), &l.weight));
            out.push((format!("classifier.{i}.bias"), &l.bias));
        }
        for (i, l) in self.discriminator.iter().enumerate() {
            out.push((format!("discriminator.{i}.weight"), &l.weight));
            out.push((format!("discriminator.{i}.bias"), &l.bias));
        }
        out
    }

    /// Mutable view of [`Self::params`], same order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.features {
            out.push(&mut l.linear.weight);
            out.push(&mut l.linear.bias);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        for l in self.classifier.iter_mut().chain(self.discriminator.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Places the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel<'_> {
        let params = self
            .params()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundModel {
            model: self,
            params,
        }
    }

    /// Folds one normalization group's statistics (one entry per BN layer).
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let layers = self.features.iter_mut().filter_map(|l| l.bn.as_mut());
        for (bn, s) in layers.zip(stats) {
            bn.update_running(s);
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Convenience: eval-mode class logits for a batch, without gradients.
    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = bound.forward(&mut tape, xv, Branch::ClassLogits, BnMode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// Eval-mode features F(x), without gradients.
    pub fn predict_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = bound.forward(&mut tape, xv, Branch::Features, BnMode::Eval)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict_logits(x)?.argmax_rows())
    }
}

/// A model whose parameters live on a tape.
pub struct BoundModel<'m> {
    model: &'m UdaModel,
    params: Vec<Var>,
}

impl BoundModel<'_> {
    pub fn model(&self) -> &UdaModel {
        self.model
    }

    /// Parameter variables in [`UdaModel::params`] order.
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.model.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                shapes: vec![shape.to_vec(), vec![self.model.input_dim()]],
            });
        }
        Ok(())
    }

    /// F(x). In train mode also returns the statistics of each BN layer.
    pub fn features(&self, tape: &mut Tape, x: Var, mode: BnMode) -> Result<(Var, Vec<BatchStats>)> {
        self.features_inner(tape, x, mode, None)
    }

    /// Train-mode F(x) normalized with fixed statistics (one entry per BN
    /// layer), e.g. those of another normalization group.
    pub fn features_with_stats(&self, tape: &mut Tape, x: Var, stats: &[BatchStats]) -> Result<Var> {
        let layers = self.model.features.iter().filter(|l| l.bn.is_some()).count();
        if stats.len() != layers {
            return Err(Error::InvalidArgument(format!(
                "{} statistics for {layers} batch-norm layers",
                stats.len()
            )));
        }
        Ok(self.features_inner(tape, x, BnMode::Train, Some(stats))?.0)
    }

    fn features_inner(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: BnMode,
        fixed: Option<&[BatchStats]>,
    ) -> Result<(Var, Vec<BatchStats>)> {
        self.check_input(tape, x)?;
        let mut h = x;
        let mut stats = Vec::new();
        let mut p = 0;
        for layer in &self.model.features {
            h = linear_forward(tape, h, self.params[p], self.params[p + 1])?;
            p += 2;
            if let Some(bn) = &layer.bn {
                let given = fixed.map(|f| {
                    let s = &f[stats.len()];
                    (s.mean.as_slice(), s.var.as_slice())
                });
                let (y, s) = batchnorm_forward(tape, bn, self.params[p], self.params[p + 1], h, mode, given)?;
                p += 2;
                h = y;
                stats.extend(s);
            }
            if layer.activation == Activation::Relu {
                h = tape.relu(h)?;
            }
        }
        Ok((h, stats))
    }

    fn feature_param_count(&self) -> usize {
        self.model
            .features
            .iter()
            .map(|l| if l.bn.is_some() { 4 } else { 2 })
            .sum()
    }

    fn run_head(&self, tape: &mut Tape, mut h: Var, layers: &[Linear], first: usize) -> Result<Var> {
        for (i, _) in layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h)?;
            }
            let p = first + 2 * i;
            h = linear_forward(tape, h, self.params[p], self.params[p + 1])?;
        }
        Ok(h)
    }

    /// C applied to precomputed features.
    pub fn classify(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        self.run_head(tape, features, &self.model.classifier, self.feature_param_count())
    }

    /// D(GRL(features)).
    pub fn discriminate(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let reversed = tape.grad_reverse(features, self.model.spec.grl_coefficient)?;
        let first = self.feature_param_count() + 2 * self.model.classifier.len();
        self.run_head(tape, reversed, &self.model.discriminator, first)
    }

    /// Runs the requested branch. Batch statistics from train mode are discarded.
    pub fn forward(&self, tape: &mut Tape, x: Var, branch: Branch, mode: BnMode) -> Result<Var> {
        let (f, _) = self.features(tape, x, mode)?;
        match branch {
            Branch::Features => Ok(f),
            Branch::ClassLogits => self.classify(tape, f),
            Branch::DomainLogit => self.discriminate(tape, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = UdaModel::zeros(&ModelSpec::default()).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -4.0], vec![0.3, 9.0]]).unwrap();
        let logits = m.predict_logits(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_then_head_equals_logits() {
        let m = UdaModel::init(&ModelSpec::default(), 7).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -0.5], vec![1.5, 0.2], vec![-1.0, 0.0]]).unwrap();
        let mut t = Tape::new();
        let b = m.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let direct = b.forward(&mut t, xv, Branch::ClassLogits, BnMode::Train).unwrap();
        let (f, _) = b.features(&mut t, xv, BnMode::Train).unwrap();
        let manual = b.classify(&mut t, f).unwrap();
        assert_eq!(t.value(direct), t.value(manual));
    }

    #[test]
    fn hand_set_network() {
        // F: 2 -> 2 ReLU (no BN), C: 2 -> 2.
        let spec = ModelSpec {
            input_dim: 2,
            feature_widths: vec![2],
            batch_norm: false,
            classifier_hidden: vec![],
            classes: 2,
            discriminator_hidden: vec![],
            grl_coefficient: 1.0,
        };
        let mut m = UdaModel::zeros(&spec).unwrap();
        m.features[0].linear.weight = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        m.features[0].linear.bias = Tensor::from_vec(vec![0.5, 0.25]).unwrap();
        m.classifier[0].weight = Tensor::from_rows(&[vec![2.0, 1.0], vec![-1.0, 3.0]]).unwrap();
        m.classifier[0].bias = Tensor::from_vec(vec![0.1, -0.2]).unwrap();
        // x = [1, 0]: pre = [1.5, -0.75] -> relu [1.5, 0] -> logits [3.1, -1.7]
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let logits = m.predict_logits(&x).unwrap();
        assert!((logits.data()[0] - 3.1).abs() < 1e-12);
        assert!((logits.data()[1] + 1.7).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let m = UdaModel::init(&ModelSpec::default(), 1).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(m.predict_logits(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = ModelSpec::default();
        let a = UdaModel::init(&spec, 3).unwrap();
        let b = UdaModel::init(&spec, 3).unwrap();
        let c = UdaModel::init(&spec, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let check = |l: &Linear| {
            let bound = 1.0 / (l.in_dim() as f64).sqrt();
            assert!(l.weight.data().iter().all(|w| w.abs() <= bound));
        };
        a.features.iter().for_each(|f| check(&f.linear));
        a.classifier.iter().chain(&a.discriminator).for_each(check);
        let bn = a.features[0].bn.as_ref().unwrap();
        assert!(bn.gamma.data().iter().all(|&g| g == 1.0));
        assert!(bn.beta.data().iter().all(|&g| g == 0.0));
        assert!(bn.running_mean.iter().all(|&g| g == 0.0));
        assert!(bn.running_var.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn spec_validation() {
        let s = ModelSpec { classes: 1, ..Default::default() };
        assert!(UdaModel::init(&s, 0).is_err());
    }
}
