use super::*;
use crate::data::{generate_synthetic, sample_episode, AugParams, AugSet, AugmentationKey, Split, UnsupPair};
use crate::training::Adam;

fn arl_desc(side: usize, ch: usize) -> Descriptor {
    Descriptor {
        attr_dim: 16,
        num_classes: 12,
        absolute: true,
        semantic: true,
        abs_feedback: true,
        rel_feedback: true,
        ..Descriptor::baseline(side, ch, 8)
    }
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn random_images(n: usize, side: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3 * side * side).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(vec![n, 3, side, side], data).unwrap()
}

fn encode_eval(store: &ParameterStore<f32>, images: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let net = store.bind_frozen(&mut tape);
    let x = tape.constant(images);
    let phi = encode(&mut tape, &net, &mut store.eval_phase(), x)?;
    Ok(tape.value(phi).clone())
}

#[test]
fn encoder_pooling_arithmetic() {
    for (side, phi) in [(32, 2), (28, 1), (64, 4)] {
        let store = ParameterStore::<f32>::new(Descriptor::baseline(side, 64, 8), 1).unwrap();
        let out = encode_eval(&store, random_images(2, side, 3)).unwrap();
        assert_eq!(out.shape(), &[2, 64, phi, phi]);
    }
    let err = ParameterStore::<f32>::new(Descriptor::baseline(8, 4, 8), 1).unwrap_err();
    assert!(matches!(err, ArlError::Dimension { .. }));

    let store = ParameterStore::<f32>::new(Descriptor::baseline(32, 4, 8), 1).unwrap();
    assert!(matches!(encode_eval(&store, random_images(1, 28, 0)), Err(ArlError::Dimension { .. })));
}

#[test]
fn zero_image_gives_zero_descriptor() {
    let store = ParameterStore::<f32>::new(Descriptor::baseline(32, 16, 8), 5).unwrap();
    let out = encode_eval(&store, Tensor::zeros(&[1, 3, 32, 32])).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn relate_concatenates_support_first() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::full(&[1, 64, 2, 2], 1.0));
    let b = tape.constant(Tensor::full(&[1, 64, 2, 2], 2.0));
    let y = relate(&mut tape, a, b).unwrap();
    assert_eq!(tape.shape(y), &[1, 128, 2, 2]);
    let v = tape.value(y).data();
    assert!(v[..256].iter().all(|&x| x == 1.0) && v[256..].iter().all(|&x| x == 2.0));

    let same = relate(&mut tape, a, a).unwrap();
    let v = tape.value(same).data();
    assert_eq!(v[..256], v[256..]);

    let c = tape.constant(Tensor::zeros(&[1, 32, 2, 2]));
    assert!(matches!(relate(&mut tape, a, c), Err(ArlError::Dimension { .. })));
}

#[test]
fn trunk_schedule_and_composition() {
    assert_eq!(Descriptor::baseline(32, 8, 8).trunk_pools(), [true, false, false, false]);
    assert_eq!(Descriptor::baseline(28, 8, 8).trunk_pools(), [false; 4]);
    assert_eq!(Descriptor::baseline(64, 8, 8).trunk_pools(), [true, true, false, false]);
    assert_eq!(Descriptor::baseline(64, 8, 8).trunk_dim(), 8);

    let store = ParameterStore::<f32>::new(Descriptor::baseline(32, 8, 8), 2).unwrap();
    let x = {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Tensor::new(vec![3, 16, 2, 2], (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let mut tape = Tape::new();
    let net = store.bind_frozen(&mut tape);
    let xv = tape.constant(x);
    let mut phase = store.eval_phase();
    let full = trunk_forward(&mut tape, &net, &mut phase, xv, Stop::Full).unwrap();
    let pre = trunk_forward(&mut tape, &net, &mut phase, xv, Stop::BeforeLast).unwrap();
    assert_eq!(tape.shape(pre), &[3, 8, 1, 1]);
    let last = trunk_last(&mut tape, &net, &mut phase, pre).unwrap();
    assert_eq!(tape.shape(full), &[3, 8]);
    assert_eq!(bits(tape.value(full).data()), bits(tape.value(last).data()));
}

#[test]
fn absolute_heads_shapes_and_zero_weights() {
    let mut store = ParameterStore::<f32>::new(arl_desc(32, 8), 3).unwrap();
    let phi = {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Tensor::new(vec![4, 8, 2, 2], (0..128).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
    };
    let mut tape = Tape::new();
    let net = store.bind_frozen(&mut tape);
    let p = tape.constant(phi.clone());
    let out = absolute_heads(&mut tape, &net, p).unwrap();
    assert_eq!(tape.shape(out.c), &[4, 12]);
    assert_eq!(tape.shape(out.a), &[4, 16]);
    assert!(tape.value(out.a).data().iter().all(|&v| (0.0..=1.0).contains(&v)));

    for name in ["hc.fc.w", "hc.fc.b", "ha.fc.w", "ha.fc.b"] {
        let t = store.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let mut tape = Tape::new();
    let net = store.bind_frozen(&mut tape);
    let p = tape.constant(phi);
    let out = absolute_heads(&mut tape, &net, p).unwrap();
    let sm = tape.softmax(out.c, 1).unwrap();
    assert!(tape.value(sm).data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-7));
    assert!(tape.value(out.a).data().iter().all(|&v| v == 0.5));

    let plain = ParameterStore::<f32>::new(Descriptor::baseline(32, 8, 8), 3).unwrap();
    let mut tape = Tape::new();
    let net = plain.bind_frozen(&mut tape);
    let p = tape.constant(Tensor::zeros(&[1, 8, 2, 2]));
    assert!(matches!(absolute_heads(&mut tape, &net, p), Err(ArlError::Contract(_))));
}

#[test]
fn feedback_channel_arithmetic() {
    let d = arl_desc(32, 64);
    assert_eq!(d.trunk_channels + d.feedback_channels(), 120);
    let store = ParameterStore::<f32>::new(d, 0).unwrap();
    assert_eq!(store.get("trunk.3.conv.w").unwrap().shape(), &[64, 120, 3, 3]);

    let mut tape = Tape::new();
    let net = store.bind_frozen(&mut tape);
    let psi = tape.constant(Tensor::full(&[2, 64, 1, 1], 0.25));
    let zeros = |tape: &mut Tape<f32>, n| tape.constant(Tensor::zeros(&[2, n]));
    let (c, a) = (zeros(&mut tape, 12), zeros(&mut tape, 16));
    let a = tape.sigmoid(a);
    let side = AbsOut { c, a };
    let out = absolute_feedback(&mut tape, &net, psi, side, side).unwrap();
    assert_eq!(tape.shape(out), &[2, 120, 1, 1]);
    let v = tape.value(out).data();
    for row in v.chunks(120) {
        assert!(row[..64].iter().all(|&x| x == 0.25));
        assert!(row[64..88].iter().all(|&x| (x - 1.0 / 12.0).abs() < 1e-7));
        assert!(row[88..].iter().all(|&x| x == 0.5));
    }

    let off = ParameterStore::<f32>::new(Descriptor::baseline(32, 64, 8), 0).unwrap();
    let mut tape = Tape::new();
    let net = off.bind_frozen(&mut tape);
    let psi = tape.constant(Tensor::zeros(&[2, 64, 1, 1]));
    let (c, a) = (zeros(&mut tape, 12), zeros(&mut tape, 16));
    let s = AbsOut { c, a };
    assert!(matches!(absolute_feedback(&mut tape, &net, psi, s, s), Err(ArlError::Contract(_))));
}

#[test]
fn relative_heads_widths_and_range() {
    let wide = Descriptor {
        trunk_channels: 576,
        ..arl_desc(28, 8)
    };
    assert_eq!(wide.trunk_dim(), 576);
    assert_eq!(wide.rc_input(), 577);

    let store = ParameterStore::<f32>::new(arl_desc(28, 16), 4).unwrap();
    assert_eq!(store.get("rc.fc1.w").unwrap().shape(), &[8, 17]);
    let mut tape = Tape::new();
    let net = store.bind_frozen(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let psi = tape.constant(Tensor::new(vec![5, 16], (0..80).map(|_| rng.gen_range(-20.0..20.0)).collect()).unwrap());
    let (c, a) = relative_heads(&mut tape, &net, psi).unwrap();
    assert_eq!(tape.shape(c), &[5]);
    assert_eq!(tape.shape(a.unwrap()), &[5, 1]);
    for v in tape.value(c).data().iter().chain(tape.value(a.unwrap()).data()) {
        assert!(*v > 0.0 && *v < 1.0);
    }

    // all ArL features off: encoder, trunk and a two-FC r_c, nothing else
    let plain = ParameterStore::<f32>::new(Descriptor::baseline(28, 16, 8), 4).unwrap();
    let groups: std::collections::BTreeSet<Group> = plain.names().iter().map(|n| Group::of(n)).collect();
    assert_eq!(groups.into_iter().collect::<Vec<_>>(), vec![Group::Encoder, Group::Trunk, Group::RelClass]);
    let rc: Vec<&String> = plain.names().iter().filter(|n| n.starts_with("rc.")).collect();
    assert_eq!(rc, ["rc.fc1.w", "rc.fc1.b", "rc.fc2.w", "rc.fc2.b"]);
}

fn unsup_batch(images: Vec<Image>, m: usize) -> UnsupBatch {
    let key = |s| AugmentationKey {
        bits: AugParams::identity().bits(),
        source: s,
    };
    let set = |ims: &[Image], s| AugSet {
        images: ims.to_vec(),
        keys: vec![key(s); ims.len()],
    };
    UnsupBatch {
        pairs: vec![UnsupPair {
            x: set(&images[..m], 0),
            y: set(&images[m..], 1),
        }],
        m,
    }
}

#[test]
fn unsup_forward_matrices() {
    let ds = generate_synthetic(3, 10, 10, 28).unwrap();
    let x = ds.image(0).clone();
    let y = ds.image(50).clone();
    let batch = unsup_batch(vec![x.clone(), x, y.clone(), y], 2);
    let d = Descriptor {
        mode: Mode::Unsupervised,
        attr_dim: 10,
        num_classes: 10,
        ..arl_desc(28, 8)
    };
    let mut store = ParameterStore::<f32>::new(d, 1).unwrap();
    for train in [false, true] {
        let mut tape = Tape::new();
        let net = store.bind(&mut tape);
        let mut phase = if train { store.train_phase() } else { store.eval_phase() };
        let f = unsup_forward(&mut tape, &net, &mut phase, &batch).unwrap();
        let mats = f.matrices(&tape);
        assert_eq!(mats.len(), 1);
        for m in &mats[0] {
            assert_eq!(m.shape(), &[2, 2]);
        }
        // X̂_1 == X̂_2, so ζ is constant
        let z = mats[0][0].data();
        assert!(z.iter().all(|&v| v == z[0]));
        assert_eq!(f.contrast_targets(), vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        // diagonal pairs compare a sample with itself
        assert!((0..2).all(|i| f.pairs[i * 2 + i].0 == f.pairs[i * 2 + i].1));
    }
}

fn scores_eval(store: &ParameterStore<f32>, ds: &Dataset, ep: &Episode) -> Vec<f32> {
    let mut tape = Tape::new();
    let net = store.bind_frozen(&mut tape);
    let b = episode_forward(&mut tape, &net, &mut store.eval_phase(), ep, ds).unwrap();
    tape.value(b.pass.c_rel).data().to_vec()
}

#[test]
fn baseline_identity_forward() {
    let ds = generate_synthetic(2, 20, 10, 32).unwrap();
    let ep = sample_episode(&ds, 5, 1, 3, Split::Train, 8).unwrap();
    let mut arl = ParameterStore::<f32>::new(Descriptor::baseline(32, 8, 8), 11).unwrap();
    // fresh networks built with the same seed agree without copying
    let mut base = BaselineNet::<f32>::new(32, 8, 8, 11).unwrap();
    assert_eq!(base.names(), arl.names());
    assert_eq!(base.tensors(), arl.tensors());

    // perturb, then load into the baseline by name
    for t in arl.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.01;
        }
    }
    base.load_from(&arl).unwrap();

    for train in [true, false] {
        let mut tape = Tape::new();
        let net = arl.bind(&mut tape);
        let mut phase = if train { arl.train_phase() } else { arl.eval_phase() };
        let b = episode_forward(&mut tape, &net, &mut phase, &ep, &ds).unwrap();
        let ours = tape.value(b.pass.c_rel).data().to_vec();

        let mut tape = Tape::new();
        let images = dataset_images(&ds, &ep.all_instances()).unwrap();
        let (_, out) = base.forward(&mut tape, images, &ep.support_groups(), ep.query.len(), train).unwrap();
        assert_eq!(bits(&ours), bits(tape.value(out).data()));
    }
    assert_eq!(base.stats(), &arl.stats()[..8]);
}

#[test]
fn shot_pooling_is_order_invariant() {
    let ds = generate_synthetic(2, 20, 12, 28).unwrap();
    let store = ParameterStore::<f32>::new(arl_desc(28, 8), 1).unwrap();
    let ep = sample_episode(&ds, 3, 3, 2, Split::Train, 5).unwrap();
    let mut shuffled = ep.clone();
    for c in 0..3 {
        shuffled.support[c * 3..(c + 1) * 3].reverse();
    }
    assert_ne!(ep.support, shuffled.support);
    assert_eq!(bits(&scores_eval(&store, &ds, &ep)), bits(&scores_eval(&store, &ds, &shuffled)));
}

#[test]
fn init_is_deterministic_and_name_keyed() {
    let a = ParameterStore::<f32>::new(arl_desc(32, 8), 9).unwrap();
    let b = ParameterStore::<f32>::new(arl_desc(32, 8), 9).unwrap();
    assert_eq!(a, b);
    let c = ParameterStore::<f32>::new(arl_desc(32, 8), 10).unwrap();
    assert_ne!(a.get("enc.0.conv.w"), c.get("enc.0.conv.w"));
    let plain = ParameterStore::<f32>::new(Descriptor::baseline(32, 8, 8), 9).unwrap();
    assert_eq!(a.get("enc.2.conv.w"), plain.get("enc.2.conv.w"));
    assert!(a.get("enc.0.conv.b").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(a.get("enc.0.bn.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    let names: std::collections::HashSet<_> = a.names().iter().collect();
    assert_eq!(names.len(), a.names().len());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(4, 20, 10, 28).unwrap();
    let mut store = ParameterStore::<f32>::new(arl_desc(28, 8), 3).unwrap();
    // move running stats and parameters away from their initial values
    {
        let ep = sample_episode(&ds, 5, 1, 2, Split::Train, 0).unwrap();
        let mut tape = Tape::new();
        let net = store.bind(&mut tape);
        let mut phase = store.train_phase();
        episode_forward(&mut tape, &net, &mut phase, &ep, &ds).unwrap();
    }
    let mut adam = Adam::new(store.tensors());
    let grads: Vec<Vec<f32>> = store.tensors().iter().map(|t| vec![0.3; t.len()]).collect();
    let g: Vec<Option<&[f32]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
    adam.update(store.tensors_mut(), &g, 1e-3);

    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &store, 17, Some(&adam)).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.iteration, 17);
    assert_eq!(back.store, store);
    assert_eq!(back.adam.as_ref(), Some(&adam));
    for (a, b) in back.store.tensors().iter().zip(store.tensors()) {
        assert_eq!(bits(a.data()), bits(b.data()));
    }
    let ep = sample_episode(&ds, 4, 1, 3, Split::Test, 1).unwrap();
    assert_eq!(bits(&scores_eval(&back.store, &ds, &ep)), bits(&scores_eval(&store, &ds, &ep)));

    // re-saving reproduces the same bytes
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&again, &back.store, 17, back.adam.as_ref()).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let h = read_header(&path).unwrap();
    assert_eq!(h.format_version, FORMAT_VERSION);
    assert_eq!(h.descriptor, *store.descriptor());
    assert!(matches!(load_checkpoint::<f64>(&path), Err(ArlError::Format(_))));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&again, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&again), Err(ArlError::Format(_))));

    let f64_store = store.cast::<f64>();
    save_checkpoint(&again, &f64_store, 0, None).unwrap();
    assert_eq!(load_checkpoint::<f64>(&again).unwrap().store, f64_store);
}
