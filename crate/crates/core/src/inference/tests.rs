use super::*;
use crate::data::{gen_sine, Dataset};
use crate::network::{Activation, Mlp, MlpConfig, OutputHead, ParamVector};
use crate::numerics::gaussian_vector;
use crate::subspace::{
    projection_from_gradients, Basis, GradientMatrix, Projection, SubspaceMethod, SubspaceModel,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn small_mlp(head: OutputHead) -> Mlp {
    Mlp::new(MlpConfig {
        input_dim: 1,
        hidden: vec![3],
        head,
        activation: Activation::Tanh,
    })
    .unwrap()
}

fn data(n: usize) -> Dataset {
    gen_sine(n, 0.2, &mut RngStream::new(11, 0)).unwrap()
}

fn random_projection(n: usize, k: usize, seed: u64) -> Projection {
    let mut rng = RngStream::new(seed, 0);
    let g = DenseMatrix::from_vec(
        k + 2,
        n,
        gaussian_vector((k + 2) * n, 0.0, 1.0, &mut rng).unwrap(),
    )
    .unwrap();
    projection_from_gradients(
        &GradientMatrix {
            g,
            method: SubspaceMethod::As,
            sigma0: 0.0,
            seed,
        },
        k,
    )
    .unwrap()
}

fn anchor(mlp: &Mlp, seed: u64) -> ParamVector {
    mlp.init_params(&mut RngStream::new(seed, 0))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1e-8 + b.abs().max(a.abs()))
}

fn check_fd(target: &dyn TargetDensity, z: &[f64]) {
    let (_, g) = target.log_density_grad(z).unwrap();
    let h = 1e-5;
    for k in 0..z.len() {
        let mut zp = z.to_vec();
        zp[k] += h;
        let mut zm = z.to_vec();
        zm[k] -= h;
        let fd = (target.log_density(&zp).unwrap() - target.log_density(&zm).unwrap()) / (2.0 * h);
        assert!(
            rel_err(g[k], fd) <= 1e-5 || (g[k] - fd).abs() < 1e-7,
            "coord {k}: {} vs {fd}",
            g[k]
        );
    }
}

#[test]
fn empty_dataset_is_prior_only() {
    let mlp = small_mlp(OutputHead::MeanVariance);
    let model = SubspaceModel::new(
        anchor(&mlp, 1),
        random_projection(mlp.param_count(), 3, 2),
        2.0,
    )
    .unwrap();
    let empty = data(4).subset(&[]);
    let post = SubspacePosterior::new(&mlp, &model, &empty, NoiseModel::Head).unwrap();
    let z = [0.5, -1.0, 2.0];
    let (lp, g) = post.log_density_grad(&z).unwrap();
    let expected: f64 = z
        .iter()
        .map(|z| -0.5 * LN_2PI - 2f64.ln() - z * z / 8.0)
        .sum();
    assert!((lp - expected).abs() < 1e-12);
    for (gi, zi) in g.iter().zip(&z) {
        assert!((gi + zi / 4.0).abs() < 1e-12);
    }
    assert!(post.log_density(&[0.0; 3]).unwrap() > lp);
}

#[test]
fn doubling_prior_scale_changes_only_the_prior_term() {
    let mlp = small_mlp(OutputHead::MeanVariance);
    let d = data(30);
    let proj = random_projection(mlp.param_count(), 4, 3);
    let a = SubspaceModel::new(anchor(&mlp, 1), proj.clone(), 1.0).unwrap();
    let b = SubspaceModel::new(anchor(&mlp, 1), proj, 2.0).unwrap();
    let pa = SubspacePosterior::new(&mlp, &a, &d, NoiseModel::Head).unwrap();
    let pb = SubspacePosterior::new(&mlp, &b, &d, NoiseModel::Head).unwrap();
    let z = [0.3, -0.2, 0.9, 0.1];
    let zz: f64 = z.iter().map(|v| v * v).sum();
    // log N(z;0,4I) − log N(z;0,I) = −K ln 2 + ‖z‖²(1 − 1/4)/2
    let delta = -4.0 * 2f64.ln() + zz * 0.375;
    let diff = pb.log_density(&z).unwrap() - pa.log_density(&z).unwrap();
    assert!((diff - delta).abs() < 1e-10);
}

#[test]
fn gradients_match_finite_differences() {
    let d = data(40);
    let mut rng = RngStream::new(5, 0);
    let mv = small_mlp(OutputHead::MeanVariance);
    let model = SubspaceModel::new(
        anchor(&mv, 2),
        random_projection(mv.param_count(), 5, 4),
        1.0,
    )
    .unwrap();
    let post = SubspacePosterior::new(&mv, &model, &d, NoiseModel::Head).unwrap();
    for _ in 0..10 {
        let z = gaussian_vector(5, 0.0, 0.5, &mut rng).unwrap();
        check_fd(&post, &z);
    }
    let sc = small_mlp(OutputHead::Scalar);
    let model = SubspaceModel::new(
        anchor(&sc, 2),
        random_projection(sc.param_count(), 4, 4),
        1.0,
    )
    .unwrap();
    let post = SubspacePosterior::new(&sc, &model, &d, NoiseModel::default_global()).unwrap();
    assert_eq!(post.dim(), 5);
    for _ in 0..10 {
        let z = gaussian_vector(5, 0.0, 0.5, &mut rng).unwrap();
        check_fd(&post, &z);
    }
}

#[test]
fn gradient_vanishes_at_located_mode() {
    let sc = small_mlp(OutputHead::Scalar);
    let d = data(25);
    let model = SubspaceModel::new(
        anchor(&sc, 3),
        random_projection(sc.param_count(), 2, 9),
        1.0,
    )
    .unwrap();
    let post =
        SubspacePosterior::new(&sc, &model, &d, NoiseModel::Fixed { variance: 0.25 }).unwrap();
    let mut z = vec![0.0; 2];
    let mut lr = 1e-2;
    let mut last = post.log_density(&z).unwrap();
    for _ in 0..20000 {
        let (_, g) = post.log_density_grad(&z).unwrap();
        let trial: Vec<f64> = z.iter().zip(&g).map(|(z, g)| z + lr * g).collect();
        let v = post.log_density(&trial).unwrap();
        if v >= last {
            z = trial;
            last = v;
            lr *= 1.1;
        } else {
            lr *= 0.5;
        }
    }
    let (_, g) = post.log_density_grad(&z).unwrap();
    assert!(crate::numerics::norm2(&g) <= 1e-4, "{g:?}");
}

#[test]
fn full_rank_subspace_matches_full_space_posterior() {
    let mlp = small_mlp(OutputHead::MeanVariance);
    let n = mlp.param_count();
    assert!(n <= 20);
    let d = data(20);
    let proj = random_projection(n, n, 6);
    assert!(matches!(proj.basis, Basis::Dense(_)));
    let theta0 = anchor(&mlp, 4);
    let model = SubspaceModel::new(theta0.clone(), proj.clone(), 1.5).unwrap();
    let post = SubspacePosterior::new(&mlp, &model, &d, NoiseModel::Head).unwrap();
    let v = proj.matrix();
    let mut rng = RngStream::new(8, 0);
    for _ in 0..20 {
        let z = gaussian_vector(n, 0.0, 0.3, &mut rng).unwrap();
        let vz = v.matvec(&z).unwrap();
        let theta: Vec<f64> = theta0.iter().zip(&vz).map(|(a, b)| a + b).collect();
        let mut full = 0.0;
        for i in 0..d.len() {
            let out = mlp.forward(&theta, d.x(i)).unwrap();
            let var = out.variance.unwrap();
            full += -0.5 * (LN_2PI + var.ln()) - (d.y(i) - out.mean).powi(2) / (2.0 * var);
        }
        for (t, a) in theta.iter().zip(theta0.iter()) {
            full += -0.5 * LN_2PI - 1.5f64.ln() - (t - a).powi(2) / (2.0 * 2.25);
        }
        let sub = post.log_density(&z).unwrap();
        assert!(
            (sub - full).abs() <= 1e-10 * full.abs().max(1.0),
            "{sub} vs {full}"
        );
    }
}

#[test]
fn non_finite_reports_location() {
    let sc = small_mlp(OutputHead::Scalar);
    let d = data(5);
    let model = SubspaceModel::identity(sc.param_count(), 1.0).unwrap();
    let post = SubspacePosterior::new(&sc, &model, &d, NoiseModel::default_global()).unwrap();
    let mut z = vec![0.0; post.dim()];
    *z.last_mut().unwrap() = -800.0;
    match post.log_density_grad(&z) {
        Err(crate::Error::NonFinite { at, .. }) => assert_eq!(at, z),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    assert!(SubspacePosterior::new(&sc, &model, &d, NoiseModel::Head).is_err());
}

#[test]
fn hmc_standard_normal_moments() {
    let target = ConjugateGaussian::prior_only(DiagGaussian::isotropic(5, 1.0).unwrap());
    let cfg = HmcConfig {
        warmup: 1000,
        samples: 5000,
        ..HmcConfig::default()
    };
    let s = hmc_run(&target, &[0.5; 5], &cfg, &mut RngStream::new(3, 0)).unwrap();
    for k in 0..5 {
        let col = s.draws.col(k);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
        assert!(mean.abs() <= 0.1, "mean {mean}");
        assert!((0.85..=1.15).contains(&var), "var {var}");
    }
    let acc = s.acceptance_rate.unwrap();
    assert!((0.5..=0.99).contains(&acc), "{acc}");
}

#[test]
fn zero_step_size_keeps_state() {
    let target = ConjugateGaussian::prior_only(DiagGaussian::isotropic(2, 1.0).unwrap());
    let cfg = HmcConfig {
        warmup: 0,
        samples: 10,
        step_size: Some(0.0),
        ..HmcConfig::default()
    };
    let s = hmc_run(&target, &[0.3, -0.4], &cfg, &mut RngStream::new(1, 0)).unwrap();
    assert_eq!(s.acceptance_rate, Some(1.0));
    for r in 0..10 {
        assert_eq!(s.draws.row(r), &[0.3, -0.4]);
    }
}

#[test]
fn leapfrog_energy_error_is_small() {
    let target = ConjugateGaussian::new(
        DiagGaussian::new(vec![0.0, 1.0, -1.0], vec![1.0, 2.0, 0.5]).unwrap(),
        vec![0.2, 0.1, 0.0],
        vec![0.3, 1.0, 2.0],
    )
    .unwrap();
    let start = State::at(&target, vec![0.4, -0.3, 1.2]).unwrap();
    let p0 = [0.7, -1.1, 0.25];
    let m = [1.0; 3];
    let (end, p1) = leapfrog(&target, &start, &p0, 1e-3, 10, &m).unwrap();
    let dh = hamiltonian(end.log_density, &p1, &m) - hamiltonian(start.log_density, &p0, &m);
    assert!(dh.abs() <= 1e-4, "{dh}");
}

#[test]
fn stuck_sampler_is_reported() {
    let target = ConjugateGaussian::prior_only(DiagGaussian::isotropic(1, 1e-3).unwrap());
    let cfg = HmcConfig {
        warmup: 0,
        samples: 1000,
        step_size: Some(50.0),
        jitter: 0.0,
        max_consecutive_rejections: 500,
        ..HmcConfig::default()
    };
    assert!(matches!(
        hmc_run(&target, &[0.0], &cfg, &mut RngStream::new(2, 0)),
        Err(crate::Error::SamplerStuck { .. })
    ));
}

#[test]
fn kl_cases() {
    let prior = DiagGaussian::isotropic(3, 1.7).unwrap();
    let q = VariationalParams::new(vec![0.0; 3], vec![1.7f64.ln(); 3]).unwrap();
    assert!(kl_diag_gaussians(&q, &prior).unwrap().abs() < 1e-14);
    let q = VariationalParams::new(vec![1.0], vec![0.0]).unwrap();
    let kl = kl_diag_gaussians(&q, &DiagGaussian::isotropic(1, 1.0).unwrap()).unwrap();
    assert!((kl - 0.5).abs() < 1e-15);
    let mut rng = RngStream::new(4, 0);
    for _ in 0..100 {
        let q = VariationalParams::new(
            gaussian_vector(3, 0.0, 2.0, &mut rng).unwrap(),
            gaussian_vector(3, 0.0, 1.0, &mut rng).unwrap(),
        )
        .unwrap();
        assert!(kl_diag_gaussians(&q, &prior).unwrap() >= -1e-12);
    }
}

#[test]
fn collapsed_elbo_is_exact() {
    let target = ConjugateGaussian::with_posterior_1d(2.0, 0.5).unwrap();
    let q = VariationalParams::new(vec![1.3], vec![-1000.0]).unwrap();
    let elbo = elbo_estimate(&q, &target, 1, &mut RngStream::new(0, 0)).unwrap();
    let expected =
        target.log_likelihood(&[1.3]).unwrap() - kl_diag_gaussians(&q, target.prior()).unwrap();
    assert_eq!(elbo, expected);
}

#[test]
fn conjugate_posterior_oracle() {
    let t = ConjugateGaussian::with_posterior_1d(2.0, 0.5).unwrap();
    let post = t.posterior();
    assert!((post.mean[0] - 2.0).abs() < 1e-12);
    assert!((post.std[0] - 0.5).abs() < 1e-12);
    // y = 8/3 observed with variance 1/3 under N(0, 1): evidence N(8/3; 0, 4/3).
    let ev = -0.5 * (LN_2PI + (4.0f64 / 3.0).ln()) - (8.0f64 / 3.0).powi(2) / (2.0 * 4.0 / 3.0);
    assert!((t.log_evidence() - ev).abs() < 1e-12);
}

#[test]
fn vi_recovers_gaussian_and_evidence() {
    let t = ConjugateGaussian::with_posterior_1d(2.0, 0.5).unwrap();
    let fit = fit_vi(&t, &[0.0], &ViConfig::default(), &mut RngStream::new(9, 0)).unwrap();
    let q = &fit.params;
    assert!((q.mean[0] - 2.0).abs() <= 0.05, "{q:?}");
    assert!((q.std()[0] / 0.5 - 1.0).abs() <= 0.1, "{q:?}");
    let elbo = elbo_estimate(q, &t, 20000, &mut RngStream::new(10, 0)).unwrap();
    assert!((elbo - t.log_evidence()).abs() <= 0.05);
    // The exact posterior attains the evidence; any other q falls short of it.
    let off = VariationalParams::new(vec![1.7], vec![0.5f64.ln()]).unwrap();
    let kl_gap = kl_diag_gaussians(&off, &t.posterior()).unwrap();
    let exact = t.log_evidence() - kl_gap;
    let est = elbo_estimate(&off, &t, 20000, &mut RngStream::new(11, 0)).unwrap();
    assert!(est <= t.log_evidence());
    assert!((est - exact).abs() < 0.02);
}

#[test]
fn vi_prior_only_and_determinism() {
    let t = ConjugateGaussian::prior_only(DiagGaussian::isotropic(3, 2.0).unwrap());
    let run = || {
        fit_vi(
            &t,
            &[1.0, -1.0, 0.5],
            &ViConfig::default(),
            &mut RngStream::new(1, 0),
        )
        .unwrap()
    };
    let a = run();
    assert!(crate::numerics::norm2(&a.params.mean) <= 0.05);
    for s in a.params.std() {
        assert!((s / 2.0 - 1.0).abs() <= 0.1, "{s}");
    }
    assert_eq!(a.params, run().params);
}

#[test]
fn thinning_and_draws() {
    let idx = thinning_indices(5000, 30).unwrap();
    assert_eq!(idx[1] - idx[0], 166);
    assert_eq!(idx.len(), 30);
    assert!(thinning_indices(10, 11).is_err());

    let chain = PosteriorSamples::new(
        DenseMatrix::from_fn(100, 2, |i, j| (i * 2 + j) as f64),
        SampleSource::Hmc,
    )
    .unwrap();
    let one = draw_posterior(PosteriorSource::Hmc(&chain), 1, &mut RngStream::new(0, 0)).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one.draws.row(0), chain.draws.row(99));

    let q = VariationalParams::new(vec![0.5, 1.5], vec![-1000.0; 2]).unwrap();
    let d = draw_posterior(PosteriorSource::Vi(&q), 30, &mut RngStream::new(0, 0)).unwrap();
    assert_eq!(d.len(), 30);
    for r in 0..30 {
        assert_eq!(d.draws.row(r), &[0.5, 1.5]);
    }
}

#[test]
fn posterior_csv_round_trip() {
    let s = PosteriorSamples::new(
        DenseMatrix::from_fn(3, 3, |i, j| 0.1 * i as f64 - j as f64 / 3.0),
        SampleSource::Vi,
    )
    .unwrap();
    let mut buf = Vec::new();
    s.write_csv(&mut buf, true).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("z_1,z_2,log_noise\n"));
    let back = PosteriorSamples::read_csv(&buf[..], SampleSource::Vi).unwrap();
    assert_eq!(back.draws, s.draws);
}

#[test]
fn mixture_moments() {
    let m = PredictiveMixture::from_components(vec![(1.0, 0.0), (-1.0, 0.0)]).unwrap();
    assert_eq!(m.mean, 0.0);
    assert_eq!(m.variance, 1.0);
    let same = PredictiveMixture::from_components(vec![(0.3, 0.2); 5]).unwrap();
    assert!((same.variance - 0.2).abs() < 1e-15);
}

#[test]
fn bma_cases() {
    let mlp = small_mlp(OutputHead::MeanVariance);
    let model = SubspaceModel::new(
        anchor(&mlp, 1),
        random_projection(mlp.param_count(), 2, 3),
        1.0,
    )
    .unwrap();
    let xs = DenseMatrix::from_fn(4, 1, |i, _| i as f64 / 3.0);
    let same = PosteriorSamples::new(
        DenseMatrix::from_fn(30, 2, |_, j| 0.1 + j as f64),
        SampleSource::Vi,
    )
    .unwrap();
    let mix = bma_predictive(&mlp, &model, &same, &xs, NoiseModel::Head).unwrap();
    for m in &mix {
        assert_eq!(m.components.len(), 30);
        assert!((m.variance - m.components[0].1).abs() < 1e-12);
    }
    let wrong = PosteriorSamples::new(DenseMatrix::zeros(2, 3), SampleSource::Vi).unwrap();
    assert!(matches!(
        bma_predictive(&mlp, &model, &wrong, &xs, NoiseModel::Head),
        Err(crate::Error::Dimension(_))
    ));

    let sc = small_mlp(OutputHead::Scalar);
    let model = SubspaceModel::new(
        anchor(&sc, 1),
        random_projection(sc.param_count(), 2, 3),
        1.0,
    )
    .unwrap();
    let draws = PosteriorSamples::new(
        DenseMatrix::from_rows(&[[0.0, 0.0, 0.5f64.ln()]]).unwrap(),
        SampleSource::Vi,
    )
    .unwrap();
    let mix = bma_predictive(&sc, &model, &draws, &xs, NoiseModel::default_global()).unwrap();
    assert!((mix[0].variance - 0.25).abs() < 1e-12);
}

#[test]
fn averaged_weights() {
    let mlp = small_mlp(OutputHead::Scalar);
    let model = SubspaceModel::new(
        anchor(&mlp, 1),
        random_projection(mlp.param_count(), 3, 3),
        1.0,
    )
    .unwrap();
    let centered = PosteriorSamples::new(
        DenseMatrix::from_rows(&[[1.0, -2.0, 0.5], [-1.0, 2.0, -0.5]]).unwrap(),
        SampleSource::Vi,
    )
    .unwrap();
    let avg = averaged_weight_diagnostic(&model, &centered).unwrap();
    for (a, b) in avg.iter().zip(model.anchor.iter()) {
        assert!((a - b).abs() < 1e-15);
    }
    let z = [0.3, 0.1, -0.7];
    let single =
        PosteriorSamples::new(DenseMatrix::from_rows(&[z]).unwrap(), SampleSource::Vi).unwrap();
    assert_eq!(
        averaged_weight_diagnostic(&model, &single).unwrap(),
        model.embed(&z).unwrap()
    );

    let many = PosteriorSamples::new(
        DenseMatrix::from_fn(7, 3, |i, j| (i as f64 * 0.3 - j as f64).sin()),
        SampleSource::Vi,
    )
    .unwrap();
    let mean: Vec<f64> = (0..3)
        .map(|j| many.draws.col(j).iter().sum::<f64>() / 7.0)
        .collect();
    let lhs = averaged_weight_diagnostic(&model, &many).unwrap();
    let rhs = model.embed(&mean).unwrap();
    for (a, b) in lhs.iter().zip(rhs.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identity_model_covers_every_parameter() {
    let mlp = small_mlp(OutputHead::Scalar);
    let n = mlp.param_count();
    let model = SubspaceModel::identity(n, 1.0).unwrap();
    let d = data(10);
    let post =
        SubspacePosterior::new(&mlp, &model, &d, NoiseModel::Fixed { variance: 0.1 }).unwrap();
    assert_eq!(post.dim(), n);
    let z = gaussian_vector(n, 0.0, 0.5, &mut RngStream::new(1, 0)).unwrap();
    check_fd(&post, &z);
}
