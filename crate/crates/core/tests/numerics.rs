use ltfl_core::model::{init_params, local_train, loss_and_grad, mean_loss};
use ltfl_core::netsim::transmit;
use ltfl_core::rng::{stream, Domain};
use ltfl_core::{ClientDataset, Matrix, ModelSpec, NetworkProfile, ParamVector, TrainHyper};
use rand::Rng;

fn random_problem(features: usize, classes: usize, n: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = stream(seed, Domain::Data, 99, 0);
    let data: Vec<f64> = (0..n * features).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (Matrix::new(n, features, data).unwrap(), y)
}

fn random_params(dim: usize, seed: u64) -> ParamVector {
    let mut rng = stream(seed, Domain::ModelInit, 99, 0);
    ParamVector::from_vec((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Central differences of the mean loss, one coordinate at a time.
fn numeric_grad(spec: &ModelSpec, params: &ParamVector, x: &Matrix, y: &[usize]) -> Vec<f64> {
    let h = 1e-6;
    (0..params.dim())
        .map(|i| {
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            (mean_loss(spec, &plus, x, y) - mean_loss(spec, &minus, x, y)) / (2.0 * h)
        })
        .collect()
}

fn relative_error(analytic: &ParamVector, numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

#[test]
fn logistic_gradient_matches_finite_differences() {
    let spec = ModelSpec::logistic(3, 3);
    let (x, y) = random_problem(3, 3, 5, 1);
    let idx: Vec<usize> = (0..5).collect();
    for seed in 0..5 {
        let params = random_params(spec.dim(), seed);
        let (loss, grad) = loss_and_grad(&spec, &params, &x, &y, &idx);
        assert!((loss - mean_loss(&spec, &params, &x, &y)).abs() < 1e-12);
        let err = relative_error(&grad, &numeric_grad(&spec, &params, &x, &y));
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let spec = ModelSpec::mlp(3, 3, 4);
    let (x, y) = random_problem(3, 3, 5, 2);
    let idx: Vec<usize> = (0..5).collect();
    for seed in 0..5 {
        let params = random_params(spec.dim(), seed);
        let (_, grad) = loss_and_grad(&spec, &params, &x, &y, &idx);
        let err = relative_error(&grad, &numeric_grad(&spec, &params, &x, &y));
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn gradient_over_subset_uses_only_those_rows() {
    let spec = ModelSpec::logistic(3, 3);
    let (x, y) = random_problem(3, 3, 5, 3);
    let params = random_params(spec.dim(), 7);
    let (_, sub) = loss_and_grad(&spec, &params, &x, &y, &[1, 3]);
    let rows = Matrix::from_rows(&[x.row(1).to_vec(), x.row(3).to_vec()]).unwrap();
    let err = relative_error(&sub, &numeric_grad(&spec, &params, &rows, &[y[1], y[3]]));
    assert!(err < 1e-4);
}

#[test]
fn single_sgd_step_by_hand() {
    // Zero weights give uniform probabilities (1/2, 1/2). With x = (1, 2) and
    // label 1 the gradient of class c's row [w, b] is (p_c - [c = y]) (1, 2, 1).
    let spec = ModelSpec::logistic(2, 2);
    let train = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
    let test = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
    let data = ClientDataset::new(train, vec![1], test, vec![0], 2).unwrap();
    let hyper = TrainHyper {
        learning_rate: 0.1,
        local_epochs: 1,
        batch_size: 1,
    };
    let (w, start_loss) = local_train(
        &spec,
        &init_params(&spec, 0),
        &data,
        &hyper,
        &mut stream(0, Domain::Training, 0, 0),
    )
    .unwrap();
    let expected = [-0.05, -0.1, -0.05, 0.05, 0.1, 0.05];
    for (got, want) in w.iter().zip(expected) {
        assert!((got - want).abs() < 1e-15, "{:?}", w);
    }
    assert!((start_loss - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    for spec in [ModelSpec::logistic(3, 3), ModelSpec::mlp(3, 3, 4)] {
        let (x, y) = random_problem(3, 3, 8, 4);
        let data = ClientDataset::new(x.clone(), y.clone(), x, y, 3).unwrap();
        let params = random_params(spec.dim(), 11);
        let hyper = TrainHyper {
            learning_rate: 0.0,
            local_epochs: 3,
            batch_size: 2,
        };
        let (w, _) = local_train(&spec, &params, &data, &hyper, &mut stream(1, Domain::Training, 0, 0)).unwrap();
        assert_eq!(w, params);
    }
}

#[test]
fn drop_frequency_matches_loss_ratio() {
    let r = 0.3;
    let trials = 10_000;
    let params = ParamVector::from_vec(vec![1.0; 1000]);
    let profile = NetworkProfile::insufficient(r);
    let mut dropped = vec![0u32; 1000];
    for t in 0..trials {
        let out = transmit(&params, &profile, 10, &mut stream(5, Domain::Network, t, 0)).unwrap();
        for (count, ok) in dropped.iter_mut().zip(&out.drop_mask) {
            *count += u32::from(!ok);
        }
    }
    let freqs: Vec<f64> = dropped.iter().map(|&c| c as f64 / trials as f64).collect();
    let overall = freqs.iter().sum::<f64>() / freqs.len() as f64;
    assert!((overall - r).abs() < 0.01, "overall drop frequency {overall}");
    // each entry shares its packet's fate: 100 independent estimates, std ~0.0046
    let worst = freqs.iter().map(|f| (f - r).abs()).fold(0.0, f64::max);
    assert!(worst < 0.025, "worst per-entry deviation {worst}");
}

#[test]
fn zero_filled_uploads_are_unbiased_up_to_the_keep_rate() {
    let trials = 20_000u64;
    let params = ParamVector::from_vec((1..=24).map(|i| i as f64 * 0.5 - 4.0).collect());
    for (r, packet_size) in [(0.1, 1), (0.3, 4), (0.5, 256)] {
        let profile = NetworkProfile::insufficient(r);
        let mut sum = ParamVector::zeros(params.dim());
        for t in 0..trials {
            let out = transmit(&params, &profile, packet_size, &mut stream(6, Domain::Network, t, 1)).unwrap();
            sum.axpy(1.0, &out.received);
        }
        sum.scale(1.0 / trials as f64);
        for (i, (&got, &p)) in sum.iter().zip(params.iter()).enumerate() {
            let want = (1.0 - r) * p;
            // 5 standard errors of a Bernoulli(1 - r) mean scaled by |p|
            let tol = 5.0 * p.abs() * (r * (1.0 - r) / trials as f64).sqrt();
            assert!((got - want).abs() <= tol, "r={r} entry {i}: {got} vs {want}");
        }
    }
}
