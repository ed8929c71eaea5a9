//! Finite-difference checks shared by the autodiff tests and the acceptance
//! suite.

use rand::Rng as _;
use udalab_core::attacks::AttackConfig;
use udalab_core::autodiff::{finite_diff_check, Tape, Tensor, Var};
use udalab_core::data::{gen_two_moons_shift, TwoMoonsConfig};
use udalab_core::nn::{self, BnMode, ModelSpec, UdaModel};
use udalab_core::objectives::{compute_objective, make_adversarial_minibatch, ObjectiveSpec, Tag, TaggedBatch, Term};
use udalab_core::rng::{self, Rng};
use udalab_core::Result;

pub const H: f64 = 1e-3;

type Case = Box<dyn Fn(&mut Tape, Var, &Tensor) -> Result<Var>>;

/// One primitive under test: input shape, sampling range and a map from the
/// input to a tensor (later reduced against fixed random weights).
pub struct PrimitiveCase {
    pub name: &'static str,
    pub shape: [usize; 2],
    pub range: (f64, f64),
    pub apply: Case,
}

fn case(
    name: &'static str,
    shape: [usize; 2],
    range: (f64, f64),
    f: impl Fn(&mut Tape, Var, &Tensor) -> Result<Var> + 'static,
) -> PrimitiveCase {
    PrimitiveCase { name, shape, range, apply: Box::new(f) }
}

/// Every differentiable primitive except the gradient reversal, whose
/// backward pass deliberately disagrees with its forward map.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    let std = (-2.0, 2.0);
    let pos = (0.25, 2.0);
    vec![
        case("add", [3, 4], std, |t, x, c| {
            let c = t.constant(c.clone());
            t.add(x, c)
        }),
        case("sub", [3, 4], std, |t, x, c| {
            let c = t.constant(c.clone());
            t.sub(c, x)
        }),
        case("mul", [3, 4], std, |t, x, c| {
            let c = t.constant(c.clone());
            let y = t.mul(x, c)?;
            t.mul(y, x)
        }),
        case("scale", [3, 4], std, |t, x, _| t.scale(x, -1.7)),
        case("add_scalar", [3, 4], std, |t, x, _| t.add_scalar(x, 0.3)),
        case("matmul", [3, 4], std, |t, x, c| {
            let w = t.constant(c.clone());
            let wt = t.transpose(w)?;
            let a = t.matmul(x, wt)?;
            t.matmul(a, x)
        }),
        case("transpose", [3, 4], std, |t, x, _| t.transpose(x)),
        case("relu", [3, 4], std, |t, x, _| t.relu(x)),
        case("exp", [3, 4], std, |t, x, _| t.exp(x)),
        case("log", [3, 4], pos, |t, x, _| t.log(x)),
        case("powf", [3, 4], pos, |t, x, _| t.powf(x, -0.5)),
        case("abs", [3, 4], std, |t, x, _| t.abs(x)),
        case("softplus", [3, 4], std, |t, x, _| t.softplus(x)),
        case("log_softmax", [3, 4], std, |t, x, _| t.log_softmax(x)),
        case("sum_all", [3, 4], std, |t, x, _| t.sum(x)),
        case("mean_all", [3, 4], std, |t, x, _| t.mean(x)),
        case("sum_rows", [3, 4], std, |t, x, _| t.sum_rows(x)),
        case("sum_cols", [3, 4], std, |t, x, _| t.sum_cols(x)),
        case("broadcast_rows", [1, 4], std, |t, x, _| t.broadcast_rows(x, 3)),
        case("broadcast_cols", [3, 1], std, |t, x, _| t.broadcast_cols(x, 4)),
        case("concat", [3, 4], std, |t, x, c| {
            let c = t.constant(c.clone());
            t.concat(&[x, c, x])
        }),
        case("slice", [3, 4], std, |t, x, _| t.slice(x, 1, 3)),
        case("row_l2_norm", [3, 4], std, |t, x, _| t.row_l2_norm(x)),
    ]
}

fn uniform(rng: &mut Rng, shape: [usize; 2], (lo, hi): (f64, f64)) -> Tensor {
    let data = (0..shape[0] * shape[1])
        .map(|_| {
            let v: f64 = rng.random_range(lo..hi);
            // keep clear of the kinks of relu/abs so the central difference
            // does not straddle one
            if v.abs() < 10.0 * H { v + 20.0 * H } else { v }
        })
        .collect();
    Tensor::matrix(shape[0], shape[1], data).unwrap()
}

/// Worst relative error per primitive over `trials` random inputs.
pub fn primitive_errors(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng::seeded(seed, 0);
    primitive_cases()
        .into_iter()
        .map(|c| {
            let mut worst: f64 = 0.0;
            for _ in 0..trials {
                let x = uniform(&mut rng, c.shape, c.range);
                let other = uniform(&mut rng, [3, 4], (-2.0, 2.0));
                // reduce against fixed weights so every output coordinate
                // contributes a distinct upstream gradient
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone());
                let probe = (c.apply)(&mut tape, xv, &other).unwrap();
                let shape = tape.value(probe).shape().to_vec();
                let n: usize = shape.iter().product();
                let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
                let apply = &c.apply;
                let err = finite_diff_check(
                    |t, v| {
                        let y = apply(t, v, &other)?;
                        let wv = t.constant(w.clone());
                        let p = t.mul(y, wv)?;
                        t.sum(p)
                    },
                    &x,
                    H,
                )
                .unwrap();
                worst = worst.max(err);
            }
            (c.name, worst)
        })
        .collect()
}

fn small_model_spec() -> ModelSpec {
    ModelSpec {
        input_dim: 2,
        feature_widths: vec![5, 4],
        batch_norm: true,
        classifier_hidden: vec![3],
        classes: 2,
        discriminator_hidden: vec![4],
        grl_coefficient: 0.7,
    }
}

/// Class logits of the single shared normalization group `[x_s, x_t, x~_t]`,
/// split into the `x_t` and `x~_t` rows.
fn shared_group_logits(model: &UdaModel, batch: &TaggedBatch) -> (Var, Var, Tape) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let parts = [&batch.parts[&Tag::Xs], &batch.parts[&Tag::Xt], &batch.parts[&Tag::XtAdv]];
    let n = parts[0].rows();
    let x = tape.constant(Tensor::concat_rows(&parts).unwrap());
    let (f, _) = bound.features(&mut tape, x, BnMode::Train).unwrap();
    let logits = bound.classify(&mut tape, f).unwrap();
    let clean = tape.slice(logits, n, 2 * n).unwrap();
    let adv = tape.slice(logits, 2 * n, 3 * n).unwrap();
    (clean, adv, tape)
}

/// The objective with its consistency term re-evaluated against fixed clean
/// logits, plus the sum of its domain-adversarial terms.
fn objective_value(model: &UdaModel, batch: &TaggedBatch, spec: &ObjectiveSpec, frozen_clean: &Tensor) -> (f64, f64) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let out = compute_objective(&mut tape, &bound, batch, spec).unwrap();
    let value = |k: &dyn Fn(&Term) -> bool| -> f64 {
        out.terms.iter().filter(|(t, _)| k(t)).map(|(_, v)| tape.value(*v).item().unwrap()).sum()
    };
    let da = value(&|t| matches!(t, Term::Domain(..)));
    let live_consistency = value(&|t| *t == Term::Consistency);

    let (_, adv, mut t2) = shared_group_logits(model, batch);
    let clean = t2.constant(frozen_clean.clone());
    let kl = nn::kl_consistency(&mut t2, adv, clean, spec.kl_direction).unwrap();
    let frozen_consistency = t2.value(kl).item().unwrap();

    let total = tape.value(out.loss).item().unwrap() + spec.lambda_weight * (frozen_consistency - live_consistency);
    (total, da)
}

/// Worst relative error of the ARTUDA objective's parameter gradient over
/// `trials` random small models and batches.
///
/// The tape gradient is not the derivative of the loss value in two places,
/// and the numeric reference is assembled to match: the clean logits of the
/// consistency term are held at their unperturbed values (stop-gradient), and
/// feature-extractor parameters receive `d(rest) - c * d(domain terms)`
/// because of the reversal layer.
pub fn artuda_objective_error(trials: usize, seed: u64, h: f64) -> f64 {
    let spec = ObjectiveSpec::artuda(AttackConfig::pgd(0.15, 3));
    let mut worst: f64 = 0.0;
    for trial in 0..trials as u64 {
        let model = UdaModel::init(&small_model_spec(), seed + trial).unwrap();
        let c = model.spec.grl_coefficient;
        let feature_params: usize = model.features.iter().map(|l| if l.bn.is_some() { 4 } else { 2 }).sum();
        let (s, t) = gen_two_moons_shift(&TwoMoonsConfig { n: 12, seed: seed + trial, ..Default::default() }).unwrap();
        let mut r = rng::seeded(seed + trial, rng::stream::ATTACK);
        let batch = make_adversarial_minibatch(
            &model,
            &spec,
            s.features(),
            s.eval_labels().unwrap(),
            t.features(),
            None,
            &mut r,
        )
        .unwrap();

        let frozen_clean = {
            let (clean, _, t) = shared_group_logits(&model, &batch);
            t.value(clean).clone()
        };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let out = compute_objective(&mut tape, &bound, &batch, &spec).unwrap();
        let grads = tape.backward(out.loss).unwrap();
        let analytic: Vec<Tensor> = bound
            .param_vars()
            .iter()
            .map(|v| grads.get(*v).cloned().unwrap())
            .collect();
        drop(bound);

        for (pi, a) in analytic.iter().enumerate() {
            for k in 0..a.numel() {
                let shifted = |delta: f64| {
                    let mut m = model.clone();
                    let p = &mut m.params_mut()[pi];
                    let mut data = p.data().to_vec();
                    data[k] += delta;
                    **p = Tensor::new(p.shape().to_vec(), data).unwrap();
                    objective_value(&m, &batch, &spec, &frozen_clean)
                };
                let ((tp, dp), (tm, dm)) = (shifted(h), shifted(-h));
                let d_total = (tp - tm) / (2.0 * h);
                let d_da = (dp - dm) / (2.0 * h);
                let fd = if pi < feature_params {
                    d_total - d_da - c * d_da
                } else {
                    d_total
                };
                let g = a.data()[k];
                worst = worst.max((g - fd).abs() / g.abs().max(1.0));
            }
        }
    }
    worst
}
