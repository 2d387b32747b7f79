use dhqc::data::synth_classification;
use dhqc::model::{forward_loss, gradient, sgd_step};
use dhqc::{Batch, ModelSpec, ParamVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-sample loss written out directly: `ln(sum exp z) - z[y]` with no
/// max-shift and no shared code with the library.
fn naive_loss(spec: &ModelSpec, p: &[f64], x: &[f64], y: usize) -> f64 {
    let (d, c, h) = (spec.input_dim, spec.num_classes, spec.hidden_dim);
    let logits: Vec<f64> =
        if spec.hidden_dim == 0 || spec.kind == dhqc::ModelKind::LogisticRegression {
            (0..c)
                .map(|k| (0..d).map(|j| p[k * d + j] * x[j]).sum::<f64>() + p[c * d + k])
                .collect()
        } else {
            let w2 = h * d + h;
            let b2 = w2 + c * h;
            let hidden: Vec<f64> = (0..h)
                .map(|i| ((0..d).map(|j| p[i * d + j] * x[j]).sum::<f64>() + p[h * d + i]).max(0.0))
                .collect();
            (0..c)
                .map(|k| (0..h).map(|i| p[w2 + k * h + i] * hidden[i]).sum::<f64>() + p[b2 + k])
                .collect()
        };
    logits.iter().map(|z| z.exp()).sum::<f64>().ln() - logits[y]
}

fn random_instance(spec: &ModelSpec, n: usize, seed: u64) -> (ParamVector, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: ParamVector = (0..spec.param_count())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let feats = (0..n * spec.input_dim)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let labels = (0..n)
        .map(|_| rng.random_range(0..spec.num_classes))
        .collect();
    (params, Batch::new(feats, labels, spec.input_dim).unwrap())
}

#[test]
fn loss_matches_arbitrary_precision_reference() {
    // References evaluated with 50-digit arithmetic on the exact f64 inputs.
    let spec = ModelSpec::logistic(3, 3);
    let params = ParamVector::new(vec![
        0.25, -0.5, 0.125, -0.75, 0.375, 1.0, 0.5, 0.625, -0.25, 0.1, -0.2, 0.3,
    ]);
    let batch = Batch::new(
        vec![
            1.0, 0.5, -1.5, 0.0, 2.0, 0.25, -1.0, -0.5, 0.75, 0.3, 0.7, -0.2,
        ],
        vec![0, 2, 1, 2],
        3,
    )
    .unwrap();
    let loss = forward_loss(&params, &spec, &batch).unwrap();
    assert!((loss - 0.790_699_302_944_945_5).abs() < 1e-14, "{loss}");

    let spec = ModelSpec::mlp(2, 2, 2);
    let params = ParamVector::new(vec![
        0.5, -1.0, 1.5, 0.25, 0.1, -0.3, 1.0, -0.5, -2.0, 0.75, 0.05, -0.05,
    ]);
    let batch = Batch::new(vec![1.0, 0.5, -0.5, 2.0, 0.2, -0.4], vec![1, 0, 1], 2).unwrap();
    let loss = forward_loss(&params, &spec, &batch).unwrap();
    assert!((loss - 0.978_108_000_293_430_9).abs() < 1e-14, "{loss}");
}

#[test]
fn loss_matches_naive_oracle_on_seeded_instances() {
    for (i, spec) in [ModelSpec::logistic(4, 3), ModelSpec::mlp(4, 5, 3)]
        .iter()
        .enumerate()
    {
        let (params, batch) = random_instance(spec, 4, i as u64);
        let oracle: f64 = (0..batch.len())
            .map(|r| naive_loss(spec, &params, batch.row(r), batch.labels()[r]))
            .sum::<f64>()
            / batch.len() as f64;
        let loss = forward_loss(&params, spec, &batch).unwrap();
        assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
    }
}

fn fd_check(spec: &ModelSpec, seed: u64) {
    let (params, batch) = random_instance(spec, 6, seed);
    let grad = gradient(&params, spec, &batch).unwrap();
    let h = 1e-5;
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus[i] += h;
        let mut minus = params.clone();
        minus[i] -= h;
        let fd = (forward_loss(&plus, spec, &batch).unwrap()
            - forward_loss(&minus, spec, &batch).unwrap())
            / (2.0 * h);
        let err = (grad[i] - fd).abs();
        assert!(
            err <= 1e-4 * fd.abs().max(grad[i].abs()) || err <= 1e-6,
            "seed {seed} coord {i}: analytic {} vs fd {fd}",
            grad[i]
        );
    }
}

#[test]
fn gradient_matches_finite_differences_logistic() {
    for seed in 0..20 {
        fd_check(&ModelSpec::logistic(5, 3), seed);
    }
}

#[test]
fn gradient_matches_finite_differences_mlp() {
    for seed in 0..20 {
        fd_check(&ModelSpec::mlp(4, 6, 3), seed);
    }
}

#[test]
fn gradient_at_seed_zero_two_class() {
    fd_check(&ModelSpec::logistic(3, 2), 0);
    fd_check(&ModelSpec::mlp(3, 4, 2), 0);
}

#[test]
fn gradient_decreases_loss_on_blobs() {
    let ds = synth_classification(100, 3, 2, 2.0, 0).unwrap();
    let spec = ModelSpec::mlp(3, 4, 2);
    let p0 = spec.init_params(0);
    let b = ds.as_batch().unwrap();
    let g = gradient(&p0, &spec, &b).unwrap();
    let p1 = sgd_step(&p0, &g, 0.1).unwrap();
    assert!(forward_loss(&p1, &spec, &b).unwrap() < forward_loss(&p0, &spec, &b).unwrap());
}

proptest! {
    // Dyadic values with few significant bits make every product and sum
    // exact, so the two step orders must agree bit for bit.
    #[test]
    fn sgd_step_is_linear_in_alpha(
        p in prop::collection::vec(-1024i32..1024, 1..32),
        g_seed in any::<u64>(),
        a in 0u32..16,
        b in 0u32..16,
    ) {
        let params: ParamVector = p.iter().map(|&x| x as f64 / 256.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(g_seed);
        let grad: ParamVector = (0..params.len()).map(|_| rng.random_range(-64i32..64) as f64 / 32.0).collect();
        let (a, b) = (a as f64 / 16.0, b as f64 / 16.0);
        let once = sgd_step(&params, &grad, a + b).unwrap();
        let twice = sgd_step(&sgd_step(&params, &grad, a).unwrap(), &grad, b).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn loss_is_non_negative_and_finite(seed in any::<u64>(), scale in 0.0f64..50.0) {
        let spec = ModelSpec::mlp(3, 4, 4);
        let (mut params, batch) = random_instance(&spec, 5, seed);
        params.iter_mut().for_each(|v| *v *= scale);
        let loss = forward_loss(&params, &spec, &batch).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        prop_assert!(gradient(&params, &spec, &batch).unwrap().is_finite());
    }
}
