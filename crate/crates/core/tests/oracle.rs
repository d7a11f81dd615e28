mod common;

use common::*;
use indexmap::IndexMap;
use proptest::prelude::*;
use rand::Rng;
use topoprune::ir::{apply_policy, parse_model, ModelIR, PruningPolicy, WeightMap, DEFAULT_A_MAX};
use topoprune::oracle::data::{self, encode_idx, parse_idx};
use topoprune::oracle::{evaluate, execute, fit, pruned_layers, Dataset, Split, TrainConfig};
use topoprune::Error;
use topoprune_numerics::{rng, OptimizerConfig, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_slice(shape, data).unwrap()
}

fn weights(entries: &[(&str, &[(&str, Tensor)])]) -> WeightMap {
    entries
        .iter()
        .map(|(layer, slots)| {
            let m: IndexMap<String, Tensor> = slots
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect();
            (layer.to_string(), m)
        })
        .collect()
}

/// All samples in the train split.
fn train_only(images: Tensor, labels: Vec<usize>, classes: usize) -> Dataset {
    let n = labels.len();
    Dataset::new(images, labels, classes, (0..n).collect(), vec![], vec![]).unwrap()
}

fn blobs_dataset(seed: u64) -> Dataset {
    Dataset::from_parts(
        data::blobs(200, seed),
        data::blobs(100, seed + 1),
        2,
        0.5,
        seed,
    )
    .unwrap()
}

fn random_images(n: usize, shape: (usize, usize, usize), seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let len = n * shape.0 * shape.1 * shape.2;
    Tensor::new(
        vec![n, shape.0, shape.1, shape.2],
        (0..len)
            .map(|_| r.gen_range(0..=255) as f64 / 255.0)
            .collect(),
    )
    .unwrap()
}

#[test]
fn zero_weights_give_input_independent_logits() {
    for name in PRUNING_FIXTURES {
        let m = fixture(name).zero_weights();
        let x = random_images(5, m.input_shape(), 3);
        let y = execute(&m, &x).unwrap();
        let k = y.shape()[1];
        for row in y.data().chunks(k) {
            assert_eq!(row, &y.data()[..k], "{name}");
        }
    }
}

#[test]
fn tiny_affine_net_matches_hand_evaluation() {
    let m = parse_model(
        r#"{"input_shape": [1, 3, 3],
            "layers": [
              {"id": "conv", "kind": "conv2d", "out_channels": 2, "kernel": [2, 2]},
              {"id": "gap", "kind": "global_avgpool"},
              {"id": "fc", "kind": "dense", "out_channels": 3}],
            "edges": [["input", "conv"], ["conv", "gap"], ["gap", "fc"]]}"#,
    )
    .unwrap();
    let w = weights(&[
        (
            "conv",
            &[
                (
                    "weight",
                    t(&[2, 1, 2, 2], &[0.5, 0.5, 0.5, 0.5, 1.0, -1.0, 2.0, 0.0]),
                ),
                ("bias", t(&[2], &[0.1, -0.2])),
            ],
        ),
        (
            "fc",
            &[
                ("weight", t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0])),
                ("bias", t(&[3], &[0.0, 0.5, -1.0])),
            ],
        ),
    ]);
    let m = m.with_weights(&w).unwrap();
    let y = execute(&m, &Tensor::ones(&[1, 1, 3, 3])).unwrap();
    // conv: 4·0.5 + 0.1 = 2.1 and 1 − 1 + 2 − 0.2 = 1.8 everywhere
    let expect = [2.1, 1.8 + 0.5, 2.1 + 1.8 - 1.0];
    for (a, b) in y.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{:?}", y.data());
    }
}

#[test]
fn channel_shuffle_interleaves_groups() {
    let m = parse_model(
        r#"{"input_shape": [4, 1, 1],
            "layers": [
              {"id": "shuffle", "kind": "channel_shuffle", "groups": 2},
              {"id": "flatten", "kind": "flatten"},
              {"id": "fc", "kind": "dense", "out_channels": 4}],
            "edges": [["input", "shuffle"], ["shuffle", "flatten"], ["flatten", "fc"]]}"#,
    )
    .unwrap();
    let mut eye = vec![0.0; 16];
    for k in 0..4 {
        eye[k * 5] = 1.0;
    }
    let w = weights(&[(
        "fc",
        &[("weight", t(&[4, 4], &eye)), ("bias", Tensor::zeros(&[4]))],
    )]);
    let y = execute(
        &m.with_weights(&w).unwrap(),
        &t(&[1, 4, 1, 1], &[10.0, 20.0, 30.0, 40.0]),
    )
    .unwrap();
    assert_eq!(y.data(), &[10.0, 30.0, 20.0, 40.0]);
}

#[test]
fn pruned_models_execute_with_same_class_count() {
    let mut r = rng::seeded(17);
    for name in PRUNING_FIXTURES {
        let m = fixture(name).init_weights(&mut rng::seeded(1));
        let classes = m.output_shape().0;
        for _ in 0..5 {
            let a: Vec<f64> = (0..m.num_slots())
                .map(|_| r.gen_range(0.0..=DEFAULT_A_MAX))
                .collect();
            let p = topoprune::strategy_ratios(&m, &a).unwrap();
            let pm = apply_policy(&m, &p).unwrap();
            let y = execute(&pm, &random_images(3, m.input_shape(), 5)).unwrap();
            assert_eq!(y.shape(), &[3, classes]);
            assert!(y.is_finite());
        }
    }
}

#[test]
fn wrong_batch_shape_is_rejected() {
    let m = fixture("plain_cnn").init_weights(&mut rng::seeded(0));
    let err = execute(&m, &Tensor::zeros(&[1, 3, 16, 16])).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    let err = execute(&fixture("plain_cnn"), &Tensor::zeros(&[1, 1, 16, 16])).unwrap_err();
    assert!(matches!(err, Error::Weights(_)));
}

#[test]
fn zero_epochs_leave_weights_unchanged() {
    let d = blobs_dataset(0);
    let m = fixture("blobs_cnn").init_weights(&mut rng::seeded(2));
    let (out, hist) = fit(
        &m,
        &d,
        &TrainConfig {
            epochs: 0,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(hist.is_empty());
    assert_eq!(out.weight_map(), m.weight_map());
}

#[test]
fn separable_blobs_are_learned() {
    let d = blobs_dataset(4);
    let m = fixture("blobs_cnn").init_weights(&mut rng::seeded(4));
    let (out, hist) = fit(
        &m,
        &d,
        &TrainConfig {
            epochs: 20,
            ..Default::default()
        },
    )
    .unwrap();
    let train = evaluate(&out, &d, Split::Train).unwrap();
    assert!(train >= 0.95, "train accuracy {train}");
    assert!(hist.last().unwrap().loss < hist[0].loss);
    assert!(evaluate(&out, &d, Split::Validation).unwrap() >= 0.9);
}

#[test]
fn freezing_an_unpruned_model_changes_nothing() {
    let d = blobs_dataset(1);
    let m = fixture("blobs_cnn").init_weights(&mut rng::seeded(3));
    assert!(pruned_layers(&m).is_empty());
    let cfg = TrainConfig {
        epochs: 3,
        freeze_unpruned: true,
        ..Default::default()
    };
    let (out, _) = fit(&m, &d, &cfg).unwrap();
    assert_eq!(out.weight_map(), m.weight_map());
}

#[test]
fn freezing_confines_updates_to_pruned_layers() {
    let d = Dataset::from_parts(
        data::synth_digits(64, 5),
        data::synth_digits(20, 6),
        10,
        0.5,
        0,
    )
    .unwrap();
    let m = fixture("plain_cnn").init_weights(&mut rng::seeded(5));
    let mut p = PruningPolicy::uniform(&m, 0.0, DEFAULT_A_MAX);
    p.ratios.insert("s1.conv".into(), 0.5);
    let pm = apply_policy(&m, &p).unwrap();
    let touched = pruned_layers(&pm);
    assert!(
        touched.contains("s1.conv") && touched.contains("s1.bn") && touched.contains("s2.conv")
    );
    assert!(!touched.contains("s3.conv") && !touched.contains("fc"));

    let dir = tempfile::tempdir().unwrap();
    let before = dir.path().join("before.bin");
    let after = dir.path().join("after.bin");
    pm.save_weights(&before).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        freeze_unpruned: true,
        ..Default::default()
    };
    fit(&pm, &d, &cfg).unwrap().0.save_weights(&after).unwrap();
    let a = pm.load_weights(&before).unwrap().weight_map();
    let b = pm.load_weights(&after).unwrap().weight_map();
    for (layer, slots) in &a {
        let same = slots == &b[layer];
        assert_eq!(same, !touched.contains(layer), "layer {layer}");
    }
}

#[test]
fn fit_is_bit_reproducible() {
    let d = blobs_dataset(2);
    let m = fixture("blobs_cnn").init_weights(&mut rng::seeded(6));
    let cfg = TrainConfig {
        epochs: 3,
        seed: 9,
        ..Default::default()
    };
    let (a, ha) = fit(&m, &d, &cfg).unwrap();
    let (b, hb) = fit(&m, &d, &cfg).unwrap();
    assert_eq!(a.weight_map(), b.weight_map());
    assert_eq!(ha, hb);
    let (c, _) = fit(&m, &d, &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.weight_map(), c.weight_map());
}

#[test]
fn divergence_is_reported() {
    let d = blobs_dataset(3);
    let m = fixture("blobs_cnn").init_weights(&mut rng::seeded(7));
    let cfg = TrainConfig {
        epochs: 5,
        optimizer: OptimizerConfig::sgd(f64::MAX, 0.0),
        ..Default::default()
    };
    let r = fit(&m, &d, &cfg);
    assert!(
        matches!(r, Err(Error::Divergence(_))),
        "{:?}",
        r.map(|x| x.1)
    );
}

#[test]
fn memorizing_net_scores_one_on_its_train_split() {
    let images = random_images(10, (1, 8, 8), 11);
    let labels = vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 0];
    let d = train_only(images, labels, 2);
    let m = fixture("blobs_cnn").init_weights(&mut rng::seeded(8));
    let cfg = TrainConfig {
        epochs: 150,
        batch_size: 10,
        ..Default::default()
    };
    let (out, _) = fit(&m, &d, &cfg).unwrap();
    assert_eq!(evaluate(&out, &d, Split::Train).unwrap(), 1.0);
}

#[test]
fn constant_net_scores_majority_frequency() {
    let mut r = rng::seeded(12);
    let labels: Vec<usize> = (0..300).map(|_| r.gen_range(0..10)).collect();
    let mut counts = [0usize; 10];
    for &l in &labels {
        counts[l] += 1;
    }
    let major = (0..10)
        .max_by_key(|&k| (counts[k], usize::MAX - k))
        .unwrap();
    let d = train_only(random_images(300, (1, 16, 16), 13), labels, 10);

    let m = fixture("resnet_toy").zero_weights();
    let mut w = m.weight_map();
    w["fc"]["bias"].data_mut()[major] = 1.0;
    let m = m.with_weights(&w).unwrap();
    let acc = evaluate(&m, &d, Split::Train).unwrap();
    assert_eq!(acc, counts[major] as f64 / 300.0);
}

#[test]
fn empty_split_is_an_error() {
    let d = train_only(random_images(4, (1, 8, 8), 1), vec![0, 1, 0, 1], 2);
    let m = fixture("blobs_cnn").init_weights(&mut rng::seeded(0));
    assert!(matches!(
        evaluate(&m, &d, Split::Validation),
        Err(Error::EmptySplit(_))
    ));
    let empty = Dataset::new(
        random_images(2, (1, 8, 8), 1),
        vec![0, 1],
        2,
        vec![],
        vec![0],
        vec![1],
    )
    .unwrap();
    assert!(matches!(
        fit(&m, &empty, &TrainConfig::default()),
        Err(Error::EmptySplit(_))
    ));
}

#[test]
fn dataset_rejects_inconsistent_parts() {
    let x = random_images(3, (1, 4, 4), 0);
    assert!(Dataset::new(x.clone(), vec![0, 1], 2, vec![], vec![], vec![]).is_err());
    assert!(Dataset::new(x.clone(), vec![0, 1, 2], 2, vec![], vec![], vec![]).is_err());
    assert!(Dataset::new(x.clone(), vec![0, 1, 1], 2, vec![0, 1], vec![1], vec![]).is_err());
    assert!(Dataset::new(x, vec![0, 1, 1], 2, vec![0, 5], vec![], vec![]).is_err());
}

#[test]
fn validation_is_carved_from_test_part() {
    let d = Dataset::from_parts(
        data::synth_digits(50, 1),
        data::synth_digits(200, 2),
        10,
        0.1,
        3,
    )
    .unwrap();
    assert_eq!(
        d.split(Split::Train),
        (0..50).collect::<Vec<_>>().as_slice()
    );
    assert_eq!(d.split(Split::Validation).len(), 20);
    assert_eq!(d.split(Split::Test).len(), 180);
    assert!(d.split(Split::Validation).iter().all(|&i| i >= 50));
    let again = Dataset::from_parts(
        data::synth_digits(50, 1),
        data::synth_digits(200, 2),
        10,
        0.1,
        3,
    )
    .unwrap();
    assert_eq!(d, again);
}

#[test]
fn idx_header_is_big_endian() {
    let bytes = [0u8, 0, 8, 2, 0, 0, 0, 2, 0, 0, 1, 0];
    let mut full = bytes.to_vec();
    full.extend((0..512).map(|k| (k % 256) as u8));
    let (dims, body) = parse_idx(&full).unwrap();
    assert_eq!(dims, vec![2, 256]);
    assert_eq!(body.len(), 512);
    assert_eq!(encode_idx(&dims, &body), full);

    assert!(parse_idx(&[1, 0, 8, 1, 0, 0, 0, 1, 7]).is_err());
    assert!(parse_idx(&[0, 0, 0x0D, 1, 0, 0, 0, 1, 7, 7, 7, 7]).is_err());
    assert!(parse_idx(&[0, 0, 8, 1, 0, 0, 0, 2, 7]).is_err());
    assert!(parse_idx(&[0, 0, 8, 1, 0, 0]).is_err());
}

#[test]
fn idx_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y) = data::synth_digits(30, 8);
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    data::write_idx_images(&ip, &x).unwrap();
    data::write_idx_labels(&lp, &y).unwrap();
    let raw = std::fs::read(&ip).unwrap();
    assert_eq!(
        &raw[..16],
        &[0, 0, 8, 3, 0, 0, 0, 30, 0, 0, 0, 16, 0, 0, 0, 16]
    );
    assert_eq!(data::read_idx_images(&ip).unwrap(), x);
    assert_eq!(data::read_idx_labels(&lp).unwrap(), y);
}

#[test]
fn csv_round_trips_and_skips_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let (x, y) = data::blobs(12, 3);
    data::write_csv(&path, &x, &y).unwrap();
    let (x2, y2) = data::read_csv(&path, (1, 8, 8)).unwrap();
    assert_eq!((x2, y2), (x, y));

    let bare = dir.path().join("bare.csv");
    std::fs::write(&bare, "1,0,255,128,0\n0,10,20,30,40\n").unwrap();
    let (x, y) = data::read_csv(&bare, (1, 2, 2)).unwrap();
    assert_eq!(y, vec![1, 0]);
    assert_eq!(x.data()[1], 1.0);
    assert_eq!(x.data()[2], 128.0 / 255.0);
    std::fs::write(&bare, "1,0,255\n").unwrap();
    assert!(data::read_csv(&bare, (1, 2, 2)).is_err());
}

#[test]
fn synthetic_digits_are_deterministic_bytes() {
    let (a, la) = data::synth_digits(200, 4);
    let (b, lb) = data::synth_digits(200, 4);
    assert_eq!((&a, &la), (&b, &lb));
    assert_eq!(a.shape(), &[200, 1, 16, 16]);
    for v in a.data() {
        assert!((0.0..=1.0).contains(v));
        assert!(
            (v * 255.0 - (v * 255.0).round()).abs() < 1e-9,
            "{v} is not a byte level"
        );
    }
    for k in 0..10 {
        assert!(la.contains(&k), "class {k} missing");
    }
    assert_ne!(data::synth_digits(200, 5).1, la);
}

#[test]
fn evaluate_is_deterministic() {
    let d = blobs_dataset(6);
    let m = fixture("blobs_cnn").init_weights(&mut rng::seeded(1));
    let a = evaluate(&m, &d, Split::Test).unwrap();
    assert_eq!(a, evaluate(&m, &d, Split::Test).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn batching_does_not_change_logits(seed in 0u64..500, n in 1usize..6) {
        let m: ModelIR = fixture("shuffle").init_weights(&mut rng::seeded(seed));
        let x = random_images(n, m.input_shape(), seed + 1);
        let all = execute(&m, &x).unwrap();
        let k = all.shape()[1];
        for i in 0..n {
            let one = execute(&m, &x.select(0, &[i]).unwrap()).unwrap();
            for (a, b) in one.data().iter().zip(&all.data()[i * k..(i + 1) * k]) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
