mod support {
    pub mod gradcases;
}

use proptest::prelude::*;
use support::gradcases;
use udalab_core::autodiff::{Tape, Tensor};
use udalab_core::nn::{self, KlDirection};

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, err) in gradcases::primitive_errors(100, 1) {
        assert!(err < 1e-4, "{name}: {err:e}");
    }
}

#[test]
fn artuda_objective_matches_finite_differences() {
    let err = gradcases::artuda_objective_error(100, 100, 1e-6);
    assert!(err < 1e-4, "{err:e}");
}

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn backward_is_linear(x in mat(3, 4), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let grad = |ca: f64, cb: f64| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let e = t.exp(xv).unwrap();
            let f = t.sum(e).unwrap();
            let s = t.softplus(xv).unwrap();
            let q = t.mul(s, s).unwrap();
            let g = t.mean(q).unwrap();
            let fa = t.scale(f, ca).unwrap();
            let gb = t.scale(g, cb).unwrap();
            let l = t.add(fa, gb).unwrap();
            t.input_gradient(l, xv).unwrap()
        };
        let combined = grad(a, b);
        let (gf, gg) = (grad(1.0, 0.0), grad(0.0, 1.0));
        for ((c, f), g) in combined.data().iter().zip(gf.data()).zip(gg.data()) {
            prop_assert!((c - (a * f + b * g)).abs() <= 1e-10 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn gradient_reversal_negates_and_scales(x in mat(2, 3), c in 0.0f64..4.0) {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let r = t.grad_reverse(xv, c).unwrap();
        prop_assert_eq!(t.value(r), &x);
        let sq = t.mul(r, r).unwrap();
        let l = t.sum(sq).unwrap();
        let g = t.input_gradient(l, xv).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            prop_assert!((gi - (-c * 2.0 * xi)).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_consistency_is_non_negative(a in mat(4, 3), b in mat(4, 3)) {
        for dir in [KlDirection::CleanToAdv, KlDirection::AdvToClean] {
            let mut t = Tape::new();
            let av = t.leaf(a.clone());
            let bv = t.constant(b.clone());
            let kl = nn::kl_consistency(&mut t, av, bv, dir).unwrap();
            prop_assert!(t.value(kl).item().unwrap() >= -1e-15);
        }
    }
}

#[test]
fn repeated_backward_is_bit_identical() {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.1, 0.0, -0.4]]).unwrap();
    let run = || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let l = t.log_softmax(xv).unwrap();
        let n = t.row_l2_norm(l).unwrap();
        let s = t.sum(n).unwrap();
        t.input_gradient(s, xv).unwrap()
    };
    let a = run();
    let b = run();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
