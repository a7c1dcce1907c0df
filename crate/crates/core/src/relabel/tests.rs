use proptest::prelude::*;

use super::*;
use crate::data::{generate_synthetic, sample_episode, AugParams, Split, KEY_BITS};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

// independent scalar loop, no iterator adaptors
fn oracle(a: &[f64], b: &[f64], p: f64) -> f64 {
    let mut d = 0.0;
    let mut k = 0;
    while k < a.len() {
        let g = if a[k] > b[k] { a[k] - b[k] } else { b[k] - a[k] };
        d += if g == 0.0 { 0.0 } else { (p * g.ln()).exp() };
        k += 1;
    }
    (-d).exp()
}

#[test]
fn binary_examples() {
    assert_eq!(binary_label(3, 3), 1);
    assert_eq!(binary_label(3, 5), 0);
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(binary_label(i, j), (i == j) as u8);
        }
    }
}

#[test]
fn soft_examples() {
    assert_eq!(soft_label(&[0.3, 0.7], &[0.3, 0.7], 2.0).unwrap(), 1.0);
    assert!((soft_label(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 1.0).unwrap() - 0.135335).abs() < 1e-6);
    assert!((soft_label(&[0.5, 0.0], &[0.0, 0.0], 2.0).unwrap() - 0.778801).abs() < 1e-6);
    assert!(matches!(soft_label(&[0.0], &[0.0, 1.0], 1.0), Err(ArlError::Dimension { .. })));
    assert!(soft_label(&[0.0], &[1.0], 0.0).is_err());
}

#[test]
fn episode_targets_follow_classes() {
    let ds = generate_synthetic(1, 20, 12, 28).unwrap();
    let ep = sample_episode(&ds, 5, 1, 3, Split::Train, 4).unwrap();
    let t = episode_relation_targets(&ep, &ds, 2.0).unwrap();
    assert_eq!(t.len(), 5 * 15);
    for r in &t {
        let same = ep.query_labels[r.j] == r.i;
        assert_eq!(r.c_hat, same as u8 as f64);
        if same {
            assert_eq!(r.a_hat, 1.0);
        }
        assert!(r.a_hat > 0.0 && r.a_hat <= 1.0);
    }

    let one = sample_episode(&ds, 1, 1, 1, Split::Train, 0).unwrap();
    let t = episode_relation_targets(&one, &ds, 2.0).unwrap();
    assert!(t.iter().all(|r| r.c_hat == 1.0));
}

#[test]
fn absolute_targets_use_training_vocabulary() {
    let ds = generate_synthetic(1, 20, 12, 28).unwrap();
    let ep = sample_episode(&ds, 5, 2, 2, Split::Train, 9).unwrap();
    let t = absolute_targets(&ep, &ds).unwrap();
    let all = ep.all_instances();
    assert_eq!(t.classes.len(), all.len());
    for (k, &inst) in all.iter().enumerate() {
        let class = ds.class_of(inst);
        // synthetic training classes are the first indices, so vocab position == class index
        assert_eq!(t.classes[k], class);
        assert_eq!(t.attributes[k], ds.classes()[class].attribute);
    }
    // the two shots of one class agree
    assert_eq!(t.classes[0], t.classes[1]);
    assert_eq!(t.attributes[0], t.attributes[1]);
    assert!(t.classes.iter().all(|&c| c < ds.splits().train.len()));

    let test = sample_episode(&ds, 3, 1, 1, Split::Test, 0).unwrap();
    assert!(matches!(absolute_targets(&test, &ds), Err(ArlError::Contract(_))));
}

#[test]
fn unsup_examples() {
    let bits = AugParams::identity().bits();
    let k = |bits: [u8; KEY_BITS], source| AugmentationKey { bits, source };
    let t = unsup_targets(&k(bits, 4), &k(bits, 4), 1.0).unwrap();
    assert_eq!((t.relation.c_hat, t.relation.a_hat), (1.0, 1.0));
    assert_eq!(t.key_i, k(bits, 4).as_attribute());

    let mut other = bits;
    other[4] ^= 1;
    other[9] ^= 1;
    let t = unsup_targets(&k(bits, 1), &k(other, 2), 1.0).unwrap();
    assert_eq!(t.relation.c_hat, 0.0);
    assert!((t.relation.a_hat - 0.135335).abs() < 1e-6);

    let group: Vec<_> = (0..4).map(|q| k(AugParams { angle: 90.0 * q as f64, ..AugParams::identity() }.bits(), 7)).collect();
    for a in &group {
        for b in &group {
            assert_eq!(unsup_targets(a, b, 2.0).unwrap().relation.c_hat, 1.0);
        }
    }
}

fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=8).prop_flat_map(|n| (prop::collection::vec(0.0f64..=1.0, n), prop::collection::vec(0.0f64..=1.0, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn soft_label_properties((a, b) in vec_pair(), p in prop::sample::select(vec![0.5, 1.0, 2.0])) {
        let s = soft_label(&a, &b, p).unwrap();
        prop_assert_eq!(s, soft_label(&b, &a, p).unwrap());
        prop_assert!(s > 0.0 && s <= 1.0);
        prop_assert_eq!(s == 1.0, a == b);
        prop_assert!(close(s, oracle(&a, &b, p), 1e-12));
    }

    #[test]
    fn soft_label_is_monotone((a, b) in vec_pair(), k in 0usize..8, bump in 0.0f64..1.0, p in 0.25f64..4.0) {
        let k = k % a.len();
        let mut wider = b.clone();
        wider[k] = if b[k] >= a[k] { b[k] + bump } else { b[k] - bump };
        prop_assert!(soft_label(&a, &wider, p).unwrap() <= soft_label(&a, &b, p).unwrap());
    }
}
