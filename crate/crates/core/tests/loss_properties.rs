use gaflow::autodiff::Tape;
use gaflow::losses::{compose_tryon, edge_loss, l1, tv_loss, weighted_cross_entropy, LossWeights};
use gaflow::Tensor;
use proptest::prelude::*;

const H: usize = 5;
const W: usize = 4;

fn tensor(c: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(lo..hi, c * H * W).prop_map(move |d| Tensor::new(vec![c, H, W], d).unwrap())
}

fn probabilities() -> impl Strategy<Value = Tensor<f64>> {
    tensor(7, 0.01, 1.0).prop_map(|raw| {
        let plane = H * W;
        Tensor::from_fn(&[7, H, W], |i| {
            let s: f64 = (0..7).map(|c| raw.data()[c * plane + i % plane]).sum();
            raw.data()[i] / s
        })
    })
}

fn one_hot() -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(0usize..7, H * W).prop_map(|labels| {
        Tensor::from_fn(&[7, H, W], |i| (labels[i % (H * W)] == i / (H * W)) as u8 as f64)
    })
}

fn eval(f: impl FnOnce(&mut Tape<f64>) -> gaflow::Result<gaflow::autodiff::Var>) -> f64 {
    let mut tape = Tape::inference();
    let v = f(&mut tape).unwrap();
    tape.value(v).item()
}

proptest! {
    #[test]
    fn tv_ignores_a_global_offset(flow in tensor(2, -4.0, 4.0), c in -10.0f64..10.0) {
        let shifted = Tensor::from_fn(flow.shape(), |i| flow.data()[i] + c);
        let a = eval(|t| { let f = t.constant(flow.clone()); tv_loss(t, f) });
        let b = eval(|t| { let f = t.constant(shifted.clone()); tv_loss(t, f) });
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn l1_and_edge_are_symmetric_and_non_negative(a in tensor(3, 0.0, 1.0), b in tensor(3, 0.0, 1.0)) {
        for f in [l1::<f64>, edge_loss::<f64>] {
            let ab = eval(|t| { let (x, y) = (t.constant(a.clone()), t.constant(b.clone())); f(t, x, y) });
            let ba = eval(|t| { let (x, y) = (t.constant(b.clone()), t.constant(a.clone())); f(t, x, y) });
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn composition_lies_between_its_inputs(
        m in tensor(1, 0.0, 1.0),
        a in tensor(3, 0.0, 1.0),
        b in tensor(3, 0.0, 1.0),
    ) {
        let mut tape = Tape::inference();
        let (mv, av, bv) = (tape.constant(m), tape.constant(a.clone()), tape.constant(b.clone()));
        let out = compose_tryon(&mut tape, mv, av, bv).unwrap();
        for (i, &v) in tape.value(out).data().iter().enumerate() {
            let (lo, hi) = (a.data()[i].min(b.data()[i]), a.data()[i].max(b.data()[i]));
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn unit_weight_cross_entropy_is_plain_cross_entropy(p in probabilities(), t in one_hot()) {
        let ce = eval(|tape| {
            let (pv, tv) = (tape.constant(p.clone()), tape.constant(t.clone()));
            weighted_cross_entropy(tape, pv, tv, &[1.0; 7])
        });
        let plane = H * W;
        let plain = -(0..7 * plane).map(|i| t.data()[i] * p.data()[i].ln()).sum::<f64>() / plane as f64;
        prop_assert!((ce - plain).abs() < 1e-6);
    }

    #[test]
    fn class_weights_scale_per_class_terms(p in probabilities(), t in one_hot(), k in 0.5f64..4.0) {
        let weights = LossWeights::default().class_weights;
        let scaled: Vec<f64> = weights.iter().map(|w| w * k).collect();
        let ce = |w: &[f64]| eval(|tape| {
            let (pv, tv) = (tape.constant(p.clone()), tape.constant(t.clone()));
            weighted_cross_entropy(tape, pv, tv, w)
        });
        let (base, big) = (ce(&weights), ce(&scaled));
        prop_assert!(base >= 0.0);
        prop_assert!((big - k * base).abs() < 1e-9 * big.max(1.0));
    }
}

#[test]
fn non_normalized_target_is_a_contract_error() {
    let mut tape = Tape::<f64>::inference();
    let p = tape.constant(Tensor::full(&[7, 2, 2], 1.0 / 7.0));
    let t = tape.constant(Tensor::full(&[7, 2, 2], 0.5));
    let err = weighted_cross_entropy(&mut tape, p, t, &[1.0; 7]).unwrap_err();
    assert!(matches!(err, gaflow::Error::Contract { .. }));
}

#[test]
fn out_of_range_mask_is_a_contract_error() {
    let mut tape = Tape::<f64>::inference();
    let m = tape.constant(Tensor::full(&[1, 2, 2], 1.5));
    let a = tape.constant(Tensor::full(&[3, 2, 2], 0.0));
    let err = compose_tryon(&mut tape, m, a, a).unwrap_err();
    assert!(matches!(err, gaflow::Error::Contract { .. }));
}
