use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::synthetic::{SyntheticClass, BACKGROUNDS, COLORS, SHAPES, SIZES};
use super::*;
use crate::ArlError;

fn small() -> Dataset {
    generate_synthetic(7, 20, 12, 28).unwrap()
}

#[test]
fn synthetic_is_deterministic_and_sized() {
    let a = generate_synthetic(7, 20, 30, 32).unwrap();
    let b = generate_synthetic(7, 20, 30, 32).unwrap();
    assert_eq!(a.num_instances(), 600);
    for (ca, cb) in a.classes().iter().zip(b.classes()) {
        assert_eq!(ca.id, cb.id);
        assert_eq!(ca.attribute, cb.attribute);
        for (ia, ib) in ca.images.iter().zip(&cb.images) {
            let bits_a: Vec<u32> = ia.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = ib.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }
    let c = generate_synthetic(8, 20, 30, 32).unwrap();
    assert_ne!(a.classes()[0].images[0], c.classes()[0].images[0]);
    assert!(a.classes().iter().all(|c| c.images.iter().all(|im| im.data.iter().all(|v| (0.0..=1.0).contains(v)))));
}

#[test]
fn synthetic_capacity_and_contracts() {
    let err = generate_synthetic(1, 300, 10, 32).unwrap_err();
    assert!(matches!(err, ArlError::Capacity(_)));
    assert!(err.to_string().contains("capacity"));
    assert!(generate_synthetic(1, 216, 10, 28).is_ok());
    assert!(generate_synthetic(1, 9, 10, 28).is_err());
    assert!(generate_synthetic(1, 10, 10, 30).is_err());
}

#[test]
fn color_only_difference_flips_color_bits() {
    let a = SyntheticClass { shape: 1, color: 2, size: 0, background: 2 };
    let b = SyntheticClass { color: 5, ..a };
    let (va, vb) = (a.attribute(), b.attribute());
    let diff: Vec<usize> = (0..SYNTHETIC_ATTRIBUTES).filter(|&k| va.0[k] != vb.0[k]).collect();
    assert_eq!(diff.len(), 2);
    assert!(diff.iter().all(|&k| (SHAPES..SHAPES + COLORS).contains(&k)));
    // exactly the 6 colour bits may differ between any two colour variants
    for c in 0..COLORS {
        let v = SyntheticClass { color: c, ..a }.attribute();
        assert!((0..SYNTHETIC_ATTRIBUTES)
            .filter(|&k| v.0[k] != va.0[k])
            .all(|k| (SHAPES..SHAPES + COLORS).contains(&k)));
    }
}

#[test]
fn same_shape_pairs_are_closer_in_attribute_space() {
    // enumerate every class pair of the full tuple space
    let n = SHAPES * COLORS * SIZES * BACKGROUNDS;
    let attrs: Vec<_> = (0..n).map(|i| SyntheticClass::from_index(i).attribute()).collect();
    let l1 = |a: &AttributeVector, b: &AttributeVector| -> f64 {
        a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).sum()
    };
    let (mut same, mut same_n, mut all, mut all_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let d = l1(&attrs[i], &attrs[j]);
            all += d;
            all_n += 1;
            if SyntheticClass::from_index(i).shape == SyntheticClass::from_index(j).shape {
                same += d;
                same_n += 1;
            }
        }
    }
    assert!(same / same_n as f64 > 0.0);
    assert!(same / (same_n as f64) < all / (all_n as f64));

    // and on a generated dataset
    let ds = small();
    let (mut same, mut same_n, mut all, mut all_n) = (0.0, 0usize, 0.0, 0usize);
    for (i, a) in ds.classes().iter().enumerate() {
        for b in &ds.classes()[i + 1..] {
            let d = l1(&a.attribute, &b.attribute);
            all += d;
            all_n += 1;
            if a.attribute.0[..SHAPES] == b.attribute.0[..SHAPES] {
                same += d;
                same_n += 1;
            }
        }
    }
    assert!(same_n > 0 && same / (same_n as f64) < all / (all_n as f64));
}

#[test]
fn splits_are_disjoint_and_cover() {
    let ds = generate_synthetic(3, 32, 10, 28).unwrap();
    let s = ds.splits();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (20, 6, 6));
    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort();
    assert_eq!(all, (0..32).collect::<Vec<_>>());
}

#[test]
fn episode_shapes_and_determinism() {
    let ds = generate_synthetic(3, 20, 20, 28).unwrap();
    let e = sample_episode(&ds, 5, 1, 15, Split::Train, 42).unwrap();
    assert_eq!(e.support.len(), 5);
    assert_eq!(e.query.len(), 75);
    assert_eq!(e, sample_episode(&ds, 5, 1, 15, Split::Train, 42).unwrap());
    for (q, &l) in e.query.iter().zip(&e.query_labels) {
        assert_eq!(ds.class_of(*q), e.classes[l]);
    }
    // consecutive query blocks follow consecutive classes
    assert_eq!(e.query_labels[..15], [0; 15]);
    assert_eq!(e.query_labels[15..30], [1; 15]);

    let one = sample_episode(&ds, 1, 1, 1, Split::Train, 0).unwrap();
    assert_eq!(one.support.len() + one.query.len(), 2);
    assert_eq!(one.support_labels, one.query_labels);
}

#[test]
fn episode_capacity_errors() {
    let ds = generate_synthetic(3, 20, 10, 28).unwrap();
    // 20 classes -> 4 val classes
    assert!(matches!(sample_episode(&ds, 5, 1, 1, Split::Val, 0), Err(ArlError::Capacity(_))));
    assert!(matches!(sample_episode(&ds, 2, 5, 6, Split::Train, 0), Err(ArlError::Capacity(_))));
}

#[test]
fn episodes_never_overlap_or_cross_splits() {
    let ds = generate_synthetic(5, 20, 12, 28).unwrap();
    for seed in 0..1000 {
        let split = [Split::Train, Split::Val, Split::Test][seed as usize % 3];
        let way = if split == Split::Train { 5 } else { 3 };
        let e = sample_episode(&ds, way, 2, 3, split, seed).unwrap();
        let s: HashSet<_> = e.support.iter().collect();
        assert!(e.query.iter().all(|q| !s.contains(q)));
        let allowed: HashSet<_> = ds.splits().get(split).iter().collect();
        assert!(e.all_instances().iter().all(|&i| allowed.contains(&ds.class_of(i))));
        let distinct: HashSet<_> = e.classes.iter().collect();
        assert_eq!(distinct.len(), way);
    }
}

#[test]
fn rotation_bits_follow_quadrants() {
    let p = |angle| AugParams { angle, ..AugParams::identity() };
    let key = |angle| AugmentationKey { bits: p(angle).bits(), source: 0 };
    assert_eq!(key(45.0).rotation_bits(), "0001");
    assert_eq!(key(135.0).rotation_bits(), "0010");
    assert_eq!(key(200.0).rotation_bits(), "0100");
    assert_eq!(key(359.9).rotation_bits(), "1000");
}

#[test]
fn identity_transform_preserves_image() {
    let ds = small();
    let im = ds.image(3);
    for angle in [0.0, 1e-4] {
        let params = AugParams { angle, ..AugParams::identity() };
        let out = augment_with(im, &params, 3);
        assert!(out.image.max_abs_diff(im) <= 2.0 / 255.0);
    }
}

#[test]
fn augmentation_replays_exactly_and_stays_in_range() {
    let ds = small();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..20 {
        let a = augment(ds.image(i), i, &mut rng);
        let b = augment_with(ds.image(i), &a.params, i);
        assert_eq!(a.key, b.key);
        let ba: Vec<u32> = a.image.data.iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.image.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ba, bb);
        assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.key.bits[..4].iter().map(|&b| b as u32).sum::<u32>(), 1);
        assert_eq!(a.key.bits, a.params.bits());
    }
}

#[test]
fn unsup_batch_layout() {
    let ds = small();
    let pool = UnlabeledPool::from_split(&ds, Split::Train);
    let b = sample_unsup_batch(&pool, 1, 4, 9).unwrap();
    assert_eq!(b.num_images(), 8);
    let p = &b.pairs[0];
    assert_eq!(p.x.keys.len() + p.y.keys.len(), 8);
    let xs: HashSet<_> = p.x.keys.iter().map(|k| k.source).collect();
    let ys: HashSet<_> = p.y.keys.iter().map(|k| k.source).collect();
    assert_eq!(xs.len(), 1);
    assert_eq!(ys.len(), 1);
    assert_ne!(xs, ys);
    let train: HashSet<_> = ds.split_instances(Split::Train).into_iter().collect();
    assert!(xs.iter().chain(&ys).all(|s| train.contains(s)));
    assert!(matches!(sample_unsup_batch(&pool, 1, 1, 0), Err(ArlError::Contract(_))));
}

#[test]
fn rotation_quadrants_are_uniform() {
    // Monte Carlo count over 10k draws
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        counts[AugParams::sample(&mut rng).quadrant()] += 1;
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{:?}", counts);
    }
}

#[test]
fn manifest_round_trip_and_errors() {
    let ds = generate_synthetic(11, 10, 10, 28).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_dataset(&ds, dir.path()).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back.num_instances(), 100);
    assert_eq!(back.attribute_dim(), SYNTHETIC_ATTRIBUTES);
    for (a, b) in ds.classes().iter().zip(back.classes()) {
        assert_eq!(a.id, b.id);
        assert!(a.images[0].max_abs_diff(&b.images[0]) <= 0.5 / 255.0 + 1e-6);
    }
}

fn tiny_manifest(dir: &std::path::Path, csv: &str) -> std::path::PathBuf {
    let im = Image::zeros(3, 4, 4);
    let ds = Dataset::new(
        (0..3)
            .map(|id| ClassRecord {
                id,
                attribute: AttributeVector(vec![0.0]),
                images: vec![im.clone(), im.clone()],
            })
            .collect(),
    )
    .unwrap();
    let path = write_dataset(&ds, dir).unwrap();
    std::fs::write(dir.join("attributes.csv"), csv).unwrap();
    path
}

#[test]
fn manifest_normalizes_and_validates_attributes() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_manifest(dir.path(), "class_id,a_0,a_1\n0,2,5\n1,4,5\n2,6,5\n");
    let ds = load_manifest(&path).unwrap();
    assert_eq!(ds.num_instances(), 6);
    assert_eq!(ds.attribute_dim(), 2);
    let col: Vec<f64> = ds.classes().iter().map(|c| c.attribute.0[0]).collect();
    assert_eq!(col, vec![0.0, 0.5, 1.0]);

    let path = tiny_manifest(dir.path(), "class_id,a_0\n0,1\n1,2\n");
    assert!(matches!(load_manifest(&path), Err(ArlError::AttributeMissing(2))));

    let path = tiny_manifest(dir.path(), "class_id,a_0\n0,1\n1,2\n2,3\n9,4\n");
    let err = load_manifest(&path).unwrap_err();
    assert!(matches!(err, ArlError::Format(_)) && err.to_string().contains('9'), "{}", err);

    let path = tiny_manifest(dir.path(), "class_id,a_0,a_1\n0,1,2\n1,2\n2,3,4\n");
    assert!(matches!(load_manifest(&path), Err(ArlError::Format(_))));
}
