mod common;

use std::sync::Arc;

use coboost::ensemble::{sample_difficulty, WeightedEnsemble};
use coboost::model_zoo::{build_client, build_generator, Arch};
use coboost::synthesis::{
    adversarial_divergence_loss, diversify, diversify_along, draw_directions, dump_sample_grid, generator_objective,
    generator_step, sample_noise, GeneratorLoss, SynthesisConfig, SyntheticStore,
};
use coboost_nn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{blobs, parameter_copy, spec, trained_clients};

fn cfg(iters: usize, beta: f64) -> SynthesisConfig {
    SynthesisConfig {
        generator_iters: iters,
        beta,
        batch_size: 32,
        noise_dim: 16,
        ..SynthesisConfig::default()
    }
}

#[test]
fn diversify_matches_the_linear_closed_form() {
    let h = blobs();
    let mut model = build_client(&spec(Arch::Linear, &h), 3, 0).unwrap();
    model.freeze();
    let w = (*model.network().params()[0]).clone(); // [64, K]
    let ens = WeightedEnsemble::uniform(vec![Arc::new(model)]).unwrap();
    let (x, _) = h.test_batch(&[0, 1, 2, 3, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = draw_directions(&mut rng, 5, 10);
    let eps = 8.0 / 255.0;
    let out = diversify_along(&x, &ens, eps, &u).unwrap();
    for i in 0..5 {
        // d/dx (u . W^T x) = W u
        let g: Vec<f64> = (0..64)
            .map(|p| (0..10).map(|k| w.data()[p * 10 + k] * u.row(i)[k]).sum())
            .collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        for p in 0..64 {
            let expected = x.row(i)[p] + eps * g[p] / norm;
            assert!((out.row(i)[p] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn perturbations_have_norm_epsilon() {
    let h = blobs();
    let clients = trained_clients(&h, 3, 0.5, 5, 1);
    let ens = WeightedEnsemble::new(clients, vec![0.2, 0.5, 0.3]).unwrap();
    let (x, _) = h.test_batch(&(0..300).collect::<Vec<_>>());
    for eps in [1.0 / 255.0, 8.0 / 255.0, 32.0 / 255.0] {
        let out = diversify(&x, &ens, eps, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for i in 0..x.rows() {
            let d: f64 = out.row(i).iter().zip(x.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!((d - eps).abs() < 1e-6, "row {i}: {d}");
        }
    }
    let same = diversify(&x, &ens, 0.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(same, x);
}

#[test]
fn zero_gradient_samples_are_left_alone() {
    let h = blobs();
    let mut model = build_client(&spec(Arch::Linear, &h), 3, 0).unwrap();
    let zeros: Vec<Tensor> = model.network().params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    model.set_params(zeros).unwrap();
    model.freeze();
    let ens = WeightedEnsemble::uniform(vec![Arc::new(model)]).unwrap();
    let (x, _) = h.test_batch(&[0, 1, 2]);
    let out = diversify(&x, &ens, 8.0 / 255.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(out, x);
}

#[test]
fn diversification_does_not_lower_difficulty() {
    let h = blobs();
    let clients = trained_clients(&h, 5, 0.3, 20, 4);
    let ens = WeightedEnsemble::uniform(clients).unwrap();
    let idx: Vec<usize> = (0..500).chain(0..12).collect();
    let (x, y) = h.test_batch(&idx);
    for seed in 0..5 {
        let before = sample_difficulty(&ens, &x, &y).unwrap();
        let moved = diversify(&x, &ens, 8.0 / 255.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let after = sample_difficulty(&ens, &moved, &y).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&after) >= mean(&before) - 1e-3, "seed {seed}");
    }
}

#[test]
fn adversarial_loss_vanishes_for_a_server_copy() {
    let h = blobs();
    let clients = trained_clients(&h, 1, 1.0, 5, 2);
    let server = parameter_copy(&clients[0], 1);
    let ens = WeightedEnsemble::uniform(clients.clone()).unwrap();
    let (x, _) = h.test_batch(&(0..50).collect::<Vec<_>>());
    assert!(adversarial_divergence_loss(&ens, &server, &x, 1.0).unwrap().abs() < 1e-12);

    let other = build_client(&spec(Arch::MlpTiny, &h), 99, 1).unwrap();
    assert!(adversarial_divergence_loss(&ens, &other, &x, 1.0).unwrap() <= 0.0);
}

#[test]
fn generator_loss_is_hard_plus_beta_adversarial() {
    let h = blobs();
    let clients = trained_clients(&h, 3, 0.5, 5, 3);
    let ens = WeightedEnsemble::uniform(clients).unwrap();
    let server = build_client(&spec(Arch::MlpTiny, &h), 8, 3).unwrap();
    for beta in [0.0, 0.5, 1.0, 2.0] {
        let c = cfg(1, beta);
        let mut gen = build_generator(c.noise_dim, 10, h.sample_shape, &h.normalization, 1).unwrap();
        let step = generator_step(&mut gen, &ens, &server, &c, GeneratorLoss::HardAdversarial, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // one iteration: the batch is the pre-update generation the loss was measured on
        let expected = generator_objective(&ens, &server, &step.batch.samples, &step.batch.labels, &c).unwrap();
        assert!((step.losses[0] - expected).abs() < 1e-6, "beta {beta}");
    }
}

#[test]
fn zero_iterations_return_the_raw_generation() {
    let h = blobs();
    let clients = trained_clients(&h, 2, 0.5, 2, 3);
    let ens = WeightedEnsemble::uniform(clients).unwrap();
    let server = build_client(&spec(Arch::MlpTiny, &h), 8, 2).unwrap();
    let c = cfg(0, 1.0);
    let mut gen = build_generator(c.noise_dim, 10, h.sample_shape, &h.normalization, 1).unwrap();
    let before = gen.checksum();
    let step = generator_step(&mut gen, &ens, &server, &c, GeneratorLoss::HardAdversarial, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(gen.checksum(), before);
    assert!(step.losses.is_empty());
    let (z, y) = sample_noise(&mut ChaCha8Rng::seed_from_u64(4), c.batch_size, c.noise_dim, 10);
    assert_eq!(step.batch.labels, y);
    assert_eq!(step.batch.samples, gen.generate(&z, &y).unwrap());
}

#[test]
fn generator_steps_are_deterministic_and_labels_cover_classes() {
    let h = blobs();
    let clients = trained_clients(&h, 3, 0.5, 3, 5);
    let ens = WeightedEnsemble::uniform(clients).unwrap();
    let server = build_client(&spec(Arch::MlpTiny, &h), 8, 3).unwrap();
    let c = SynthesisConfig { batch_size: 200, ..cfg(3, 1.0) };
    let run = || {
        let mut gen = build_generator(c.noise_dim, 10, h.sample_shape, &h.normalization, 7).unwrap();
        let step = generator_step(&mut gen, &ens, &server, &c, GeneratorLoss::HardAdversarial, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        (step.batch, gen.checksum())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let mut counts = [0usize; 10];
    for &y in &a.labels {
        counts[y] += 1;
    }
    assert!(counts.iter().all(|&n| n > 5), "{counts:?}");
    // samples stay within the normalized image of [0, 1]
    let (lo, hi) = h.normalized_range()[0];
    assert!(a.samples.data().iter().all(|v| *v >= lo - 1e-9 && *v <= hi + 1e-9));
}

#[test]
fn hard_loss_mostly_decreases_with_a_fixed_ensemble() {
    let h = blobs();
    let clients = trained_clients(&h, 4, 0.5, 20, 6);
    let ens = WeightedEnsemble::uniform(clients).unwrap();
    let server = build_client(&spec(Arch::MlpTiny, &h), 8, 4).unwrap();
    let c = SynthesisConfig { batch_size: 64, ..cfg(40, 0.0) };
    let mut gen = build_generator(c.noise_dim, 10, h.sample_shape, &h.normalization, 2).unwrap();
    let step = generator_step(&mut gen, &ens, &server, &c, GeneratorLoss::HardAdversarial, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let steps = step.losses.windows(2).count();
    let down = step.losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down as f64 >= 0.8 * steps as f64, "{down}/{steps}: {:?}", step.losses);
}

#[test]
fn sample_grids_are_png_and_reproducible() {
    let h = blobs();
    let clients = trained_clients(&h, 2, 0.5, 2, 3);
    let ens = WeightedEnsemble::uniform(clients).unwrap();
    let server = build_client(&spec(Arch::MlpTiny, &h), 8, 2).unwrap();
    let c = SynthesisConfig { batch_size: 100, ..cfg(1, 1.0) };
    let mut gen = build_generator(c.noise_dim, 10, h.sample_shape, &h.normalization, 1).unwrap();
    let step = generator_step(&mut gen, &ens, &server, &c, GeneratorLoss::HardAdversarial, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut store = SyntheticStore::new(h.sample_shape, None);
    store.append(&step.batch).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let a = dump_sample_grid(&store, &h.normalization, 10, 3, 7, &dir.path().join("a")).unwrap();
    let b = dump_sample_grid(&store, &h.normalization, 10, 3, 7, &dir.path().join("b")).unwrap();
    assert_eq!(a.file_name().unwrap(), "grid_epoch7.png");
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());

    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let reader = decoder.read_info().unwrap();
    let info = reader.info();
    // ten class columns of 8-pixel tiles with 1-pixel gaps
    assert_eq!(info.width, 10 * 9 + 1);
    assert_eq!(info.height, 3 * 9 + 1);
    assert!(dump_sample_grid(&store, &h.normalization, 10, 0, 7, dir.path()).is_err());
    let empty = SyntheticStore::new(h.sample_shape, None);
    assert!(dump_sample_grid(&empty, &h.normalization, 10, 3, 7, dir.path()).is_err());
}
