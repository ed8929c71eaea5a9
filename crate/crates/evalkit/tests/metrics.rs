use udalab_core::attacks::AttackConfig;
use udalab_core::autodiff::Tensor;
use udalab_core::data::{gen_two_moons_shift, DomainDataset, DomainTag, TwoMoonsConfig};
use udalab_core::nn::{checkpoint, ModelSpec, UdaModel};
use udalab_core::objectives::{train, ObjectiveSpec, TrainConfig, Variant};
use udalab_evalkit::metrics::{
    black_box_accuracy, budget_sweep, classwise_accuracy, eval_accuracy, feature_distance,
};
use udalab_evalkit::sanity::{chance_level, data_diameter, sanity_suite, SanityConfig};

fn moons(n: usize, seed: u64) -> (DomainDataset, DomainDataset) {
    gen_two_moons_shift(&TwoMoonsConfig { n, seed, ..Default::default() }).unwrap()
}

fn small_spec() -> ModelSpec {
    ModelSpec {
        feature_widths: vec![16, 16],
        discriminator_hidden: vec![16],
        ..Default::default()
    }
}

fn natural(n: usize, seed: u64, epochs: usize) -> (UdaModel, DomainDataset) {
    let (s, t) = moons(n, seed);
    let cfg = TrainConfig { epochs, seed, ..Default::default() };
    let spec = ObjectiveSpec::new(Variant::Natural, AttackConfig::pgd(0.15, 3));
    let model = train(&s.labeled().unwrap(), &t.unlabeled(), &spec, &small_spec(), &cfg, None)
        .unwrap()
        .model;
    (model, t)
}

fn attacks() -> Vec<AttackConfig> {
    vec![AttackConfig::fgsm(0.3), AttackConfig::pgd(0.3, 10), AttackConfig::mifgsm(0.3, 5)]
}

#[test]
fn constant_model_scores_its_class_frequency() {
    let (_, t) = moons(200, 1);
    let model = UdaModel::zeros(&small_spec()).unwrap();
    let pred = model.predict(t.features()).unwrap();
    assert!(pred.iter().all(|&p| p == pred[0]));
    let y = t.eval_labels().unwrap();
    let freq = y.iter().filter(|&&c| c == pred[0]).count() as f64 / y.len() as f64;
    assert_eq!(eval_accuracy(&model, &t, None, 0).unwrap(), freq);
    for a in attacks() {
        assert_eq!(eval_accuracy(&model, &t, Some(&a), 0).unwrap(), freq);
        // zero feature weights give constant features
        assert_eq!(feature_distance(&model, &t, &a, 0).unwrap(), 0.0);
    }
}

#[test]
fn zero_budget_matches_clean() {
    let (model, t) = natural(400, 2, 5);
    let clean = eval_accuracy(&model, &t, None, 0).unwrap();
    for a in attacks() {
        let a = a.with_epsilon(0.0);
        assert_eq!(eval_accuracy(&model, &t, Some(&a), 0).unwrap(), clean);
        assert_eq!(feature_distance(&model, &t, &a, 0).unwrap(), 0.0);
    }
}

/// 1-D threshold model: logit_1 - logit_0 = relu(x) - 0.25, so points with
/// |x| >= 0.5 sit at least 0.25 from the boundary.
fn threshold_model() -> UdaModel {
    let spec = ModelSpec {
        input_dim: 1,
        feature_widths: vec![1],
        batch_norm: false,
        classifier_hidden: vec![],
        classes: 2,
        discriminator_hidden: vec![],
        grl_coefficient: 1.0,
    };
    let mut model = UdaModel::zeros(&spec).unwrap();
    let mut p = model.params_mut();
    *p[0] = Tensor::matrix(1, 1, vec![1.0]).unwrap();
    *p[2] = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
    *p[3] = Tensor::from_vec(vec![0.0, -0.25]).unwrap();
    model
}

fn separable() -> DomainDataset {
    let xs = [-2.0, -1.0, -0.5, 0.5, 0.75, 1.0, 3.0];
    let labels = xs.iter().map(|&x| usize::from(x > 0.0)).collect();
    let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
    DomainDataset::new(Tensor::from_rows(&rows).unwrap(), Some(labels), 2, DomainTag::Target, "line").unwrap()
}

#[test]
fn margin_bounds_robust_accuracy() {
    let model = threshold_model();
    let ds = separable();
    assert_eq!(eval_accuracy(&model, &ds, None, 0).unwrap(), 1.0);
    for a in attacks() {
        let a = a.with_epsilon(0.24);
        assert_eq!(eval_accuracy(&model, &ds, Some(&a), 0).unwrap(), 1.0);
    }
    // past the margin the point at 0.5 flips
    let pgd = AttackConfig::pgd(0.3, 10);
    assert_eq!(eval_accuracy(&model, &ds, Some(&pgd), 0).unwrap(), 6.0 / 7.0);
}

#[test]
fn unlabeled_data_is_rejected() {
    let model = threshold_model();
    let ds = separable().with_labels(None).unwrap();
    assert!(eval_accuracy(&model, &ds, None, 0).is_err());
    assert!(feature_distance(&model, &ds, &AttackConfig::fgsm(0.1), 0).is_err());
    assert!(classwise_accuracy(&model, &ds, None, 0).is_err());
}

#[test]
fn evaluation_leaves_the_checkpoint_untouched() {
    let (model, t) = natural(400, 3, 4);
    let (sub, _) = natural(400, 4, 4);
    let before = checkpoint::to_bytes(&model);
    let pgd = AttackConfig::pgd(0.15, 5);
    eval_accuracy(&model, &t, Some(&pgd), 0).unwrap();
    feature_distance(&model, &t, &pgd, 0).unwrap();
    classwise_accuracy(&model, &t, Some(&pgd), 0).unwrap();
    black_box_accuracy(&sub, &model, &t, &pgd, 0).unwrap();
    budget_sweep(&model, &t, &pgd, &[0.0, 0.1], &[1, 3], 0).unwrap();
    assert_eq!(checkpoint::to_bytes(&model), before);
}

#[test]
fn classwise_flags_absent_classes() {
    let model = threshold_model();
    let ds = separable();
    let three = DomainDataset::new(ds.features().clone(), ds.eval_labels().map(<[usize]>::to_vec), 3, DomainTag::Target, "x")
        .unwrap();
    let acc = classwise_accuracy(&model, &three, None, 0).unwrap();
    assert_eq!(acc, vec![Some(1.0), Some(1.0), None]);
}

#[test]
fn classwise_mean_matches_overall_on_balanced_data() {
    let (model, t) = natural(400, 5, 3);
    let pgd = AttackConfig::pgd(0.15, 5);
    for attack in [None, Some(&pgd)] {
        let per = classwise_accuracy(&model, &t, attack, 0).unwrap();
        let mean = per.iter().map(|a| a.unwrap()).sum::<f64>() / per.len() as f64;
        let overall = eval_accuracy(&model, &t, attack, 0).unwrap();
        assert!((mean - overall).abs() < 1e-12);
    }
    let a = classwise_accuracy(&model, &t, Some(&pgd), 0).unwrap();
    let b = classwise_accuracy(&model, &t, Some(&pgd), 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn symmetric_errors_give_equal_class_accuracy() {
    // threshold at 0.25 misclassifies exactly one point per class
    let rows = vec![vec![-1.0], vec![-0.5], vec![0.3], vec![0.1], vec![1.0], vec![2.0], vec![-2.0], vec![-3.0], vec![3.0], vec![0.5]];
    let labels = vec![0, 0, 0, 1, 1, 1, 0, 0, 1, 1];
    let ds = DomainDataset::new(Tensor::from_rows(&rows).unwrap(), Some(labels), 2, DomainTag::Target, "sym").unwrap();
    let model = threshold_model();
    assert_eq!(eval_accuracy(&model, &ds, None, 0).unwrap(), 0.8);
    let per = classwise_accuracy(&model, &ds, None, 0).unwrap();
    assert_eq!(per, vec![Some(0.8), Some(0.8)]);
}

#[test]
fn budget_sweep_shape_and_directions() {
    let (model, t) = natural(600, 6, 10);
    let base = AttackConfig::pgd(0.15, 20);
    let eps = [0.0, 0.05, 0.1, 0.2, 0.4];
    let table = budget_sweep(&model, &t, &base, &eps, &[1, 20], 6).unwrap();
    let clean = eval_accuracy(&model, &t, None, 6).unwrap();
    assert_eq!(table.accuracy.len(), 2);
    for row in &table.accuracy {
        assert_eq!(row.len(), eps.len());
        assert_eq!(row[0], clean);
        assert!(row.windows(2).all(|w| w[1] <= w[0]), "{row:?}");
    }
    for e in 0..eps.len() {
        assert!(table.accuracy[1][e] <= table.accuracy[0][e]);
    }
    let mut buf = Vec::new();
    table.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * eps.len());
    assert!(text.starts_with("j_max,epsilon,accuracy\n1,0,"));
}

#[test]
fn budget_sweep_rejects_bad_grids() {
    let model = threshold_model();
    let ds = separable();
    let base = AttackConfig::pgd(0.1, 3);
    assert!(budget_sweep(&model, &ds, &base, &[], &[1], 0).is_err());
    assert!(budget_sweep(&model, &ds, &base, &[0.1], &[], 0).is_err());
    assert!(budget_sweep(&model, &ds, &base, &[0.2, 0.1], &[1], 0).is_err());
    assert!(budget_sweep(&model, &ds, &base, &[0.1], &[3, 1], 0).is_err());
}

#[test]
fn unbounded_check_catches_a_constant_model() {
    let (model, t) = natural(400, 7, 5);
    let constant = UdaModel::zeros(&small_spec()).unwrap();
    let report = sanity_suite(&constant, &model, &model, &t, &SanityConfig::default(), 0).unwrap();
    let c = report.get("unbounded_reaches_chance").unwrap();
    assert!(!c.passed);
    assert_eq!(c.measured["accuracy"], 0.5);
    assert_eq!(c.measured["chance"], 0.5);
    assert_eq!(c.measured["clean"], 0.5);
    assert!(!report.all_passed());
    assert!(report.to_string().contains("[FAIL] unbounded_reaches_chance"));
}

#[test]
fn chance_and_diameter() {
    assert_eq!(chance_level(&[0, 0, 1, 2], 3), 0.5);
    assert_eq!(data_diameter(&separable()), 5.0);
}
