use std::collections::BTreeSet;

use dhqc::data::{
    encode_idx, load_idx_pair, parse_idx, partition_iid, synth_classification, IdxTensor,
};
use dhqc::model::{evaluate, local_train, TrainParams};
use dhqc::{Error, IdxError, ModelSpec};
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = IdxTensor> {
    prop::collection::vec(0usize..6, 1..4).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        prop::collection::vec(any::<u8>(), n).prop_map(move |data| IdxTensor {
            dims: dims.clone(),
            data,
        })
    })
}

proptest! {
    #[test]
    fn idx_encode_parse_roundtrip(t in tensor()) {
        let bytes = encode_idx(&t);
        prop_assert_eq!(parse_idx(&bytes).unwrap(), t);
    }

    #[test]
    fn idx_rejects_wrong_payload_length(t in tensor(), extra in 1usize..4) {
        let mut bytes = encode_idx(&t);
        bytes.extend(std::iter::repeat_n(0u8, extra));
        let is_size_mismatch = matches!(parse_idx(&bytes), Err(IdxError::SizeMismatch { .. }));
        prop_assert!(is_size_mismatch);
        if !t.data.is_empty() {
            let short = &encode_idx(&t)[..bytes.len() - extra - 1];
            prop_assert!(parse_idx(short).is_err());
        }
    }

    #[test]
    fn partition_is_disjoint_and_covering(n in 1usize..2000, m in 1usize..64, seed in any::<u64>()) {
        prop_assume!(m <= n);
        let p = partition_iid(n, m, seed).unwrap();
        let mut seen = BTreeSet::new();
        for c in 0..m {
            for &i in p.client(c) {
                prop_assert!(seen.insert(i), "index {} assigned twice", i);
            }
        }
        prop_assert_eq!(seen.len(), n);
        let sizes = p.sizes();
        let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }
}

#[test]
fn idx_rejects_bad_headers() {
    assert_eq!(parse_idx(&[0, 0]), Err(IdxError::TruncatedHeader));
    assert_eq!(
        parse_idx(&[1, 0, 8, 1, 0, 0, 0, 0]),
        Err(IdxError::BadMagic)
    );
    assert_eq!(
        parse_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 0]),
        Err(IdxError::UnsupportedType(0x0d))
    );
    assert_eq!(
        parse_idx(&[0, 0, 8, 2, 0, 0, 0, 1]),
        Err(IdxError::TruncatedHeader)
    );
}

fn write_pair(dir: &std::path::Path, n: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let images = IdxTensor {
        dims: vec![n, 2, 2],
        data: (0..n * 4).map(|i| (i * 17 % 256) as u8).collect(),
    };
    let labels = IdxTensor {
        dims: vec![n],
        data: (0..n).map(|i| (i % 10) as u8).collect(),
    };
    let (ip, lp) = (dir.join("img.idx"), dir.join("lab.idx"));
    std::fs::write(&ip, encode_idx(&images)).unwrap();
    std::fs::write(&lp, encode_idx(&labels)).unwrap();
    (ip, lp)
}

#[test]
fn idx_pair_loads_and_scales() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_pair(dir.path(), 30);
    let ds = load_idx_pair(&ip, &lp, None, 0).unwrap();
    assert_eq!((ds.len(), ds.dim(), ds.num_classes()), (30, 4, 10));
    assert_eq!(
        ds.row(1),
        &[68.0 / 255.0, 85.0 / 255.0, 102.0 / 255.0, 119.0 / 255.0]
    );
    for i in 0..ds.len() {
        assert!(ds.row(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(ds.labels()[i], i % 10);
    }

    let a = load_idx_pair(&ip, &lp, Some(12), 5).unwrap();
    let b = load_idx_pair(&ip, &lp, Some(12), 5).unwrap();
    assert_eq!(a.len(), 12);
    assert_eq!(a, b);
}

#[test]
fn idx_pair_rejects_mismatched_counts_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, _) = write_pair(dir.path(), 10);
    let lp = dir.path().join("short.idx");
    std::fs::write(
        &lp,
        encode_idx(&IdxTensor {
            dims: vec![9],
            data: vec![0; 9],
        }),
    )
    .unwrap();
    assert!(matches!(
        load_idx_pair(&ip, &lp, None, 0),
        Err(Error::Idx(IdxError::Shape(_)))
    ));

    let mut bytes = std::fs::read(&ip).unwrap();
    bytes.pop();
    std::fs::write(&ip, &bytes).unwrap();
    let err = load_idx_pair(&ip, &lp, None, 0).unwrap_err();
    assert!(err.is_data_error());
}

#[test]
fn synthetic_labels_are_balanced_and_deterministic() {
    let a = synth_classification(1001, 5, 4, 2.0, 9).unwrap();
    let b = synth_classification(1001, 5, 4, 2.0, 9).unwrap();
    assert_eq!(a, b);
    let mut counts = [0usize; 4];
    a.labels().iter().for_each(|&y| counts[y] += 1);
    assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
}

#[test]
fn client_label_histograms_follow_hypergeometric() {
    let (n, m, classes) = (6000usize, 20usize, 10usize);
    let ds = synth_classification(n, 8, classes, 1.0, 3).unwrap();
    let p = partition_iid(n, m, 4).unwrap();
    let mut total = [0usize; 10];
    ds.labels().iter().for_each(|&y| total[y] += 1);
    let nf = n as f64;
    for c in 0..m {
        let draw = p.client(c).len() as f64;
        let mut hist = [0usize; 10];
        p.client(c).iter().for_each(|&i| hist[ds.labels()[i]] += 1);
        for y in 0..classes {
            let share = total[y] as f64 / nf;
            let mean = draw * share;
            let sd = (draw * share * (1.0 - share) * (nf - draw) / (nf - 1.0)).sqrt();
            let z = (hist[y] as f64 - mean) / sd;
            assert!(
                z.abs() <= 3.0,
                "client {c} class {y}: count {} mean {mean:.1} z {z:.2}",
                hist[y]
            );
        }
    }
}

fn trained_accuracy(separation: f64, seed: u64) -> f64 {
    let all = synth_classification(6000, 20, 2, separation, seed).unwrap();
    let (train, test) = all.split_tail(1000).unwrap();
    let spec = ModelSpec::logistic(20, 2);
    let idx: Vec<usize> = (0..train.len()).collect();
    let params = TrainParams {
        epochs: 3,
        batch_size: 32,
        alpha: 0.1,
    };
    let w = local_train(&spec.init_params(seed), &spec, &train, &idx, &params, seed).unwrap();
    evaluate(&w, &spec, &test).unwrap().accuracy
}

#[test]
fn coincident_means_give_chance_accuracy() {
    let acc = trained_accuracy(0.0, 11);
    assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
}

#[test]
fn well_separated_blobs_are_learnable() {
    let acc = trained_accuracy(10.0, 12);
    assert!(acc >= 0.99, "accuracy {acc}");
}
