//! Checks against values computed independently of the library: closed
//! forms, quadrature, and sample statistics with known spread.

use approx::assert_relative_eq;
use bilevel_core::data::{gen_dataset, MixtureSpec};
use bilevel_core::denoiser::{embed_time, Denoiser, DenoiserConfig};
use bilevel_core::diffusion::{forward_noise, DiffusionBatch, NoiseSchedule};
use bilevel_core::eval::energy_distance;
use bilevel_core::objectives::{cu_loss, ft_loss, Frozen, FtWeights, UnlearnSpec};
use bilevel_core::optim::{Optimizer, OptimizerKind};
use bilevel_core::params::{ParamKind, ParamStore};
use bilevel_core::rng::RngStream;
use bilevel_core::tape::Tape;
use bilevel_core::tensor::Tensor;

/// `E‖Z‖` for `Z ~ N(m, s²I)` in two dimensions, by midpoint quadrature.
fn mean_norm_2d(m: [f64; 2], s: f64) -> f64 {
    let h = 0.01;
    let half = (10.0 * s / h) as i64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * s * s);
    let mut total = 0.0;
    for i in -half..half {
        let u = (i as f64 + 0.5) * h;
        for j in -half..half {
            let v = (j as f64 + 0.5) * h;
            let pdf = norm * (-(u * u + v * v) / (2.0 * s * s)).exp();
            total += pdf * (u + m[0]).hypot(v + m[1]);
        }
    }
    total * h * h
}

fn gaussian(n: usize, mean: [f64; 2], rng: &mut RngStream) -> Tensor<f64> {
    let data = (0..n)
        .flat_map(|_| [mean[0] + rng.normal::<f64>(), mean[1] + rng.normal::<f64>()])
        .collect();
    Tensor::new(vec![n, 2], data).unwrap()
}

#[test]
fn quadrature_reproduces_rayleigh_mean() {
    // E‖Z‖ for Z ~ N(0, 2I) is √π.
    assert_relative_eq!(
        mean_norm_2d([0.0, 0.0], 2f64.sqrt()),
        std::f64::consts::PI.sqrt(),
        max_relative = 1e-6
    );
}

#[test]
fn energy_distance_of_shifted_gaussians() {
    // X − Y ~ N((3, 0), 2I); X − X′ ~ N(0, 2I).
    let s = 2f64.sqrt();
    let exact = 2.0 * mean_norm_2d([3.0, 0.0], s) - 2.0 * mean_norm_2d([0.0, 0.0], s);
    let mut rng = RngStream::root(5);
    let n = 10_000;
    let a = gaussian(n, [0.0, 0.0], &mut rng);
    let b = gaussian(n, [3.0, 0.0], &mut rng);
    let est = energy_distance(&a, &b).unwrap();
    assert_relative_eq!(est, exact, max_relative = 0.02);
}

#[test]
fn dataset_means_match_components() {
    let spec = MixtureSpec::circle(8, 5.0, 0.15);
    let n = 2000;
    let set = gen_dataset::<f64>(&spec, n, &mut RngStream::root(3)).unwrap();
    let se = (0.15 / n as f64).sqrt();
    for concept in 1..spec.concept_count() {
        let rows: Vec<&[f64]> = (0..set.len())
            .filter(|&i| set.c[i] == concept)
            .map(|i| set.x.row(i))
            .collect();
        assert_eq!(rows.len(), n);
        let mean = spec.component(concept).unwrap().mean.clone();
        for d in 0..2 {
            let m = rows.iter().map(|r| r[d]).sum::<f64>() / n as f64;
            assert!(
                (m - mean[d]).abs() < 3.5 * se,
                "concept {concept} axis {d}: {m} vs {}",
                mean[d]
            );
        }
    }
}

#[test]
fn vp_schedule_matches_product_of_betas() {
    let sched = NoiseSchedule::<f64>::vp_linear(100, 1e-3, 0.2).unwrap();
    let mut abar = 1.0;
    for t in 1..=100 {
        abar *= 1.0 - (1e-3 + (0.2 - 1e-3) * (t - 1) as f64 / 99.0);
        assert_relative_eq!(sched.alpha(t).powi(2), abar, max_relative = 1e-12);
        assert_relative_eq!(
            sched.alpha(t).powi(2) + sched.sigma(t).powi(2),
            1.0,
            epsilon = 1e-12
        );
    }
    assert!(abar < 1e-4);
    let edm = NoiseSchedule::<f64>::edm(100, 0.05).unwrap();
    assert_eq!((edm.alpha(40), edm.sigma(40)), (1.0, 2.0));
}

#[test]
fn nearby_timesteps_embed_close_together() {
    let e = embed_time::<f64>(&[50, 51, 60, 100], 16).unwrap();
    let cos = |i: usize, j: usize| {
        let (a, b) = (e.row(i), e.row(j));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|x| x * x).sum::<f64>()).sqrt()
    };
    assert!(cos(0, 1) > cos(0, 2));
    assert!(cos(0, 2) > cos(0, 3));
    assert!(cos(0, 1) > 0.9);
}

/// A linear ε-predictor at one noise level, trained by gradient descent,
/// recovers the Gaussian posterior mean `σ (α²S + σ²I)⁻¹ (x_t − αμ)`.
#[test]
fn linear_denoiser_learns_gaussian_posterior() {
    let mu = [1.5, -0.5f64];
    let s: [[f64; 2]; 2] = [[0.5, 0.2], [0.2, 0.3]];
    let (l00, l10) = (s[0][0].sqrt(), s[1][0] / s[0][0].sqrt());
    let l11 = (s[1][1] - l10 * l10).sqrt();
    let n = 20_000;
    let t = 30;
    let sched = NoiseSchedule::<f64>::vp_linear(100, 1e-3, 0.2).unwrap();
    let (alpha, sigma) = (sched.alpha(t), sched.sigma(t));

    let mut rng = RngStream::root(9);
    let x0: Vec<f64> = (0..n)
        .flat_map(|_| {
            let (z0, z1) = (rng.normal::<f64>(), rng.normal::<f64>());
            [mu[0] + l00 * z0, mu[1] + l10 * z0 + l11 * z1]
        })
        .collect();
    let x0 = Tensor::new(vec![n, 2], x0).unwrap();
    let batch = DiffusionBatch {
        eps: rng.normal_tensor(&[n, 2]),
        x0,
        t: vec![t; n],
        c: vec![1; n],
    };
    let x_t = forward_noise(&batch, &sched).unwrap();

    let mut store = ParamStore::new();
    store.insert("w", Tensor::zeros(&[2, 2]), ParamKind::Weight);
    store.insert("b", Tensor::zeros(&[2]), ParamKind::Bias);
    let mut opt = Optimizer::new(OptimizerKind::Sgd);
    for _ in 0..3000 {
        store.zero_grad();
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone()).unwrap();
        let w = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let y = tape.matmul(x, w).unwrap();
        let y = tape.add(y, b).unwrap();
        let target = tape.constant(batch.eps.clone()).unwrap();
        let r = tape.sub(y, target).unwrap();
        let loss = tape.sq_l2(r).unwrap();
        let loss = tape.scale(loss, 1.0 / (2 * n) as f64).unwrap();
        tape.backward(loss, &mut store).unwrap();
        opt.step(&mut store, 0.2);
    }

    // Posterior coefficients: ε̂ = A (x_t − αμ) with A = σ Σ_t⁻¹.
    let sig = [
        [
            alpha * alpha * s[0][0] + sigma * sigma,
            alpha * alpha * s[0][1],
        ],
        [
            alpha * alpha * s[1][0],
            alpha * alpha * s[1][1] + sigma * sigma,
        ],
    ];
    let det = sig[0][0] * sig[1][1] - sig[0][1] * sig[1][0];
    let a = [
        [sigma * sig[1][1] / det, -sigma * sig[0][1] / det],
        [-sigma * sig[1][0] / det, sigma * sig[0][0] / det],
    ];
    let w = store.value("w").unwrap().data().to_vec();
    let b = store.value("b").unwrap().data().to_vec();
    let mut msd = 0.0;
    let probe = 1000;
    for i in 0..probe {
        let x = x_t.row(i);
        let centered = [x[0] - alpha * mu[0], x[1] - alpha * mu[1]];
        for k in 0..2 {
            let exact = a[k][0] * centered[0] + a[k][1] * centered[1];
            let learned = x[0] * w[k] + x[1] * w[2 + k] + b[k];
            msd += (exact - learned).powi(2);
        }
    }
    msd /= probe as f64;
    assert!(msd < 5e-3, "mean squared deviation {msd}");
}

#[test]
fn teacher_parameters_never_reach_the_tape() {
    let cfg = DenoiserConfig {
        hidden: vec![8, 8],
        concept_count: 3,
        feature_taps: vec![0, 1],
        ..DenoiserConfig::default()
    };
    let model = Denoiser::<f64>::new(cfg).unwrap();
    let teacher_store = model.init(&mut RngStream::root(1));
    let mut student_store = model.init(&mut RngStream::root(2));
    let teacher = Frozen::new(&model, &teacher_store);
    let sched = NoiseSchedule::<f64>::vp_linear(100, 1e-3, 0.2).unwrap();
    let mut rng = RngStream::root(3);
    let batch = DiffusionBatch::sample(
        rng.normal_tensor(&[6, 2]),
        vec![1, 2, 1, 2, 0, 1],
        &sched,
        &mut rng,
    )
    .unwrap();

    let mut tape = Tape::new();
    let ft = ft_loss(
        &mut tape,
        &teacher,
        &model,
        &student_store,
        &batch,
        &sched,
        &FtWeights::default(),
    )
    .unwrap();
    let cu = cu_loss(
        &mut tape,
        &teacher,
        &model,
        &student_store,
        &batch.with_concepts(vec![1; 6]),
        &UnlearnSpec::negative_guidance(1),
        &sched,
    )
    .unwrap();
    let total = tape.add(ft.total, cu).unwrap();
    let leaves = tape.param_leaves();
    assert!(!leaves.is_empty());
    assert!(leaves.iter().all(|(id, _)| *id == student_store.id()));

    let before = teacher_store.clone();
    tape.backward(total, &mut student_store).unwrap();
    assert!(teacher_store.values_bitwise_eq(&before));
    assert!(student_store.grad_norm_sq() > 0.0);
}
