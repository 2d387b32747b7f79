#![allow(dead_code)]

use std::path::PathBuf;

use dhqc::codec::{encode_update, EncodedUpdate, Reconstruction};
use dhqc::sparsify::sparsify;
use dhqc::ParamVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Three fixtures: (file name, update).
pub fn golden_updates() -> Vec<(&'static str, EncodedUpdate)> {
    let mut hand = vec![0.1; 16];
    hand[1] = 0.5;
    hand[4] = -2.5;
    hand[9] = 1.3;
    vec![
        (
            "small.bin",
            fixture(hand, 18.75, 7, Reconstruction::LowerEdge),
        ),
        (
            "normal_1000.bin",
            fixture(normal(1000, 0.01, 42), 1.0, 300, Reconstruction::LowerEdge),
        ),
        (
            "midpoint_257.bin",
            fixture(normal(257, 2.0, 7), 10.0, 1, Reconstruction::Midpoint),
        ),
    ]
}

fn normal(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect()
}

fn fixture(v: Vec<f64>, k: f64, weight: u32, recon: Reconstruction) -> EncodedUpdate {
    let (sel, _) = sparsify(&ParamVector::new(v), k).unwrap();
    encode_update(&sel, weight, recon).unwrap()
}

/// Byte layout of `small.bin`, written out field by field.
pub fn hand_built_small() -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"DHQC");
    b.push(1); // version
    b.push(0); // lower-edge reconstruction
    b.extend_from_slice(&[16, 0, 0, 0, 0, 0, 0, 0]); // model_len
    b.extend_from_slice(&[3, 0, 0, 0, 0, 0, 0, 0]); // count
    b.extend_from_slice(&[0x00, 0x00, 0x00, 0x3f]); // thr = 0.5
    b.extend_from_slice(&[0x00, 0x00, 0x20, 0x40]); // theta = 2.5
    b.extend_from_slice(&[7, 0, 0, 0]); // client weight
    b.extend_from_slice(&[1, 0, 0, 0, 4, 0, 0, 0, 9, 0, 0, 0]);
    // step 0.25: +0.5 -> loc 0, -2.5 -> sign|loc 7, +1.3 -> loc 3
    b.extend_from_slice(&[0xf0, 0x03]);
    b
}
