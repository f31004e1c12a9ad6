//! End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
//! process exits nonzero when any check fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use subspace_bnn::data::gen_sine;
use subspace_bnn::experiment::plot_data;
use subspace_bnn::experiment::{
    run_experiment, ExperimentConfig, Grid, RunOptions, TrialPredictor,
};
use subspace_bnn::inference::{
    elbo_estimate, fit_vi, hmc_run, ConjugateGaussian, DiagGaussian, HmcConfig, NoiseModel,
    SubspacePosterior, TargetDensity, ViConfig,
};
use subspace_bnn::metrics::coverage95;
use subspace_bnn::network::{Activation, GradTarget, Mlp, MlpConfig, OutputHead};
use subspace_bnn::numerics::{
    gaussian_vector, norm2, orthonormality_error, sym_eig_desc, DenseMatrix, RngStream,
};
use subspace_bnn::pretrain::{iterate_deviations, train_map, TrainHyper};
use subspace_bnn::subspace::{
    empirical_covariance, pca_projection_from_deviations, projection_from_gradients,
    sample_gradient_matrix, GradientMatrix, LisObjective, Projection, SubspaceMethod,
    SubspaceModel,
};

type Outcome = Result<String, String>;
type Check<'a> = (&'static str, Duration, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

fn random_symmetric(n: usize, seed: u64) -> DenseMatrix {
    let mut rng = RngStream::new(seed, 0);
    let a =
        DenseMatrix::from_vec(n, n, gaussian_vector(n * n, 0.0, 1.0, &mut rng).unwrap()).unwrap();
    DenseMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

fn gradient_oracle() -> Outcome {
    let targets = [
        GradTarget::OutputMean,
        GradTarget::MseLoss,
        GradTarget::GaussianNll,
        GradTarget::StandardizedSqResidual,
    ];
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for case in 0..10u64 {
        let target = targets[case as usize % 4];
        let head = if target.needs_variance() || case % 3 == 0 {
            OutputHead::MeanVariance
        } else {
            OutputHead::Scalar
        };
        let mlp = Mlp::new(MlpConfig {
            input_dim: 1 + case as usize % 3,
            hidden: vec![4 + case as usize, 3],
            head,
            activation: if case % 2 == 0 {
                Activation::Tanh
            } else {
                Activation::Relu
            },
        })
        .map_err(fail)?;
        let mut rng = RngStream::new(100 + case, 0);
        let theta = mlp.init_params(&mut rng);
        let x = gaussian_vector(mlp.input_dim(), 0.0, 1.0, &mut rng).map_err(fail)?;
        let y = Some(rng.standard_normal());
        let g = mlp
            .backprop_param_grad(&theta, &x, y, target)
            .map_err(fail)?;
        let mut t = theta.to_vec();
        for i in 0..t.len() {
            let orig = t[i];
            t[i] = orig + h;
            let up = mlp.scalar_target(&t, &x, y, target).map_err(fail)?;
            t[i] = orig - h;
            let down = mlp.scalar_target(&t, &x, y, target).map_err(fail)?;
            t[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (g[i] - fd).abs() / (1e-8 + fd.abs());
            worst = worst.max(rel);
        }
    }
    ensure(
        worst <= 1e-5,
        format!("max relative error {worst:.2e} over 10 cases"),
    )
}

fn eigen_svd() -> Outcome {
    let s = random_symmetric(50, 1);
    let e = sym_eig_desc(&s).map_err(fail)?;
    let v = &e.eigenvectors;
    let lambda = DenseMatrix::from_fn(50, 50, |i, j| if i == j { e.eigenvalues[i] } else { 0.0 });
    let recon = v
        .matmul(&lambda)
        .and_then(|m| m.matmul(&v.transpose()))
        .map_err(fail)?;
    let diff = DenseMatrix::from_fn(50, 50, |i, j| recon[(i, j)] - s[(i, j)]);
    let rel = diff.frobenius_norm() / s.frobenius_norm();
    let ortho = orthonormality_error(v);

    let mut rng = RngStream::new(2, 0);
    let g = GradientMatrix {
        g: DenseMatrix::from_vec(
            40,
            200,
            gaussian_vector(8000, 0.0, 1.0, &mut rng).map_err(fail)?,
        )
        .map_err(fail)?,
        method: SubspaceMethod::As,
        sigma0: 0.0,
        seed: 2,
    };
    let k = 20;
    let proj = projection_from_gradients(&g, k).map_err(fail)?;
    let direct = sym_eig_desc(&empirical_covariance(&g)).map_err(fail)?;
    let p = proj.matrix();
    let mut route_gap: f64 = 0.0;
    for j in 0..k {
        let sign = if (0..200)
            .map(|i| p[(i, j)] * direct.eigenvectors[(i, j)])
            .sum::<f64>()
            < 0.0
        {
            -1.0
        } else {
            1.0
        };
        for i in 0..200 {
            route_gap = route_gap.max((p[(i, j)] - sign * direct.eigenvectors[(i, j)]).abs());
        }
        route_gap =
            route_gap.max((proj.spectrum[j] - direct.eigenvalues[j]).abs() / direct.eigenvalues[0]);
    }
    ensure(
        rel <= 1e-8 && ortho <= 1e-8 && route_gap <= 1e-8,
        format!(
            "reconstruction {rel:.2e}, orthonormality {ortho:.2e}, gram vs direct {route_gap:.2e}"
        ),
    )
}

fn subspace_contract() -> Outcome {
    let mut rng = RngStream::new(3, 0);
    let data = gen_sine(100, 0.4, &mut rng).map_err(fail)?;
    let cfg = MlpConfig {
        input_dim: 1,
        hidden: vec![32, 32, 32],
        head: OutputHead::Scalar,
        activation: Activation::Tanh,
    };
    let mlp = Mlp::new(cfg.clone()).map_err(fail)?;
    let hyper = TrainHyper {
        epochs: 400,
        seed: 3,
        ..TrainHyper::default()
    };
    let traj = train_map(&cfg, &data, &hyper).map_err(fail)?;
    let anchor = traj.swa_mean.clone();
    let sigma0 = 0.1 * anchor.rms();
    let mut projections: Vec<(&str, Projection)> = Vec::new();
    for (name, method) in [("AS", SubspaceMethod::As), ("LIS", SubspaceMethod::Lis)] {
        let g = sample_gradient_matrix(
            method,
            LisObjective::default(),
            &mlp,
            &anchor,
            sigma0,
            100,
            &data,
            4,
        )
        .map_err(fail)?;
        projections.push((name, projection_from_gradients(&g, 20).map_err(fail)?));
    }
    let dev = iterate_deviations(&traj, 100).map_err(fail)?;
    projections.push((
        "PCA",
        pca_projection_from_deviations(&dev, 20).map_err(fail)?,
    ));

    let mut details = Vec::new();
    let mut ok = true;
    for (name, proj) in projections {
        let ortho = orthonormality_error(&proj.matrix());
        let monotone = proj.spectrum.windows(2).all(|w| w[0] >= w[1]);
        let model = SubspaceModel::new(anchor.clone(), proj, 1.0).map_err(fail)?;
        let exact_anchor = model.embed(&[0.0; 20]).map_err(fail)?.to_vec() == anchor.to_vec();
        let mut iso: f64 = 0.0;
        for _ in 0..20 {
            let z = gaussian_vector(20, 0.0, 1.0, &mut rng).map_err(fail)?;
            let theta = model.embed(&z).map_err(fail)?;
            let pz: Vec<f64> = theta
                .iter()
                .zip(anchor.iter())
                .map(|(t, a)| t - a)
                .collect();
            let direct = model.projection.matrix().matvec(&z).map_err(fail)?;
            iso = iso.max((norm2(&direct) - norm2(&z)).abs());
            iso = iso.max((norm2(&pz) - norm2(&z)).abs() - 1e-12 * norm2(&anchor));
        }
        ok &= ortho <= 1e-8 && monotone && exact_anchor && iso <= 1e-10;
        details.push(format!("{name}: ortho {ortho:.1e} iso {iso:.1e}"));
    }
    ensure(ok, details.join("; "))
}

fn hmc_sanity() -> Outcome {
    let target = ConjugateGaussian::prior_only(DiagGaussian::isotropic(5, 1.0).map_err(fail)?);
    let cfg = HmcConfig {
        warmup: 1000,
        samples: 5000,
        ..HmcConfig::default()
    };
    let s = hmc_run(&target, &[0.5; 5], &cfg, &mut RngStream::new(5, 0)).map_err(fail)?;
    let mut ok = true;
    let (mut worst_mean, mut var_range): (f64, (f64, f64)) = (0.0, (f64::INFINITY, 0.0));
    for k in 0..5 {
        let col = s.draws.col(k);
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        ok &= mean.abs() <= 0.1 && (0.85..=1.15).contains(&var);
        worst_mean = worst_mean.max(mean.abs());
        var_range = (var_range.0.min(var), var_range.1.max(var));
    }
    let acc = s.acceptance_rate.unwrap_or(f64::NAN);
    ok &= (0.6..=0.95).contains(&acc);
    ensure(
        ok,
        format!(
            "max |mean| {worst_mean:.3}, variance [{:.3}, {:.3}], acceptance {acc:.3}",
            var_range.0, var_range.1
        ),
    )
}

fn vi_sanity() -> Outcome {
    let t = ConjugateGaussian::with_posterior_1d(2.0, 0.5).map_err(fail)?;
    let fit = fit_vi(&t, &[0.0], &ViConfig::default(), &mut RngStream::new(6, 0)).map_err(fail)?;
    let q = &fit.params;
    let (mean, std) = (q.mean[0], q.std()[0]);

    let prior = DiagGaussian::isotropic(2, 1.5).map_err(fail)?;
    let conj = ConjugateGaussian::new(prior, vec![0.7, -1.2], vec![0.5, 0.2]).map_err(fail)?;
    let fit2 = fit_vi(
        &conj,
        &[0.0, 0.0],
        &ViConfig::default(),
        &mut RngStream::new(7, 0),
    )
    .map_err(fail)?;
    let elbo =
        elbo_estimate(&fit2.params, &conj, 20000, &mut RngStream::new(8, 0)).map_err(fail)?;
    let gap = (elbo - conj.log_evidence()).abs();
    ensure(
        (mean - 2.0).abs() <= 0.05 && (std / 0.5 - 1.0).abs() <= 0.1 && gap <= 0.05,
        format!("mean {mean:.4}, std {std:.4}, elbo gap {gap:.4} nats"),
    )
}

fn full_rank_equivalence() -> Outcome {
    let mlp = Mlp::new(MlpConfig {
        input_dim: 1,
        hidden: vec![4],
        head: OutputHead::Scalar,
        activation: Activation::Tanh,
    })
    .map_err(fail)?;
    let n = mlp.param_count();
    let data = gen_sine(30, 0.3, &mut RngStream::new(9, 0)).map_err(fail)?;
    let mut rng = RngStream::new(10, 0);
    let anchor = mlp.init_params(&mut rng);
    let g = sample_gradient_matrix(
        SubspaceMethod::As,
        LisObjective::default(),
        &mlp,
        &anchor,
        0.3,
        3 * n,
        &data,
        11,
    )
    .map_err(fail)?;
    let proj = projection_from_gradients(&g, n).map_err(fail)?;
    let v = proj.matrix();
    let noise = NoiseModel::Fixed { variance: 0.09 };
    let sub_model = SubspaceModel::new(anchor.clone(), proj, 1.3).map_err(fail)?;
    let full_model =
        SubspaceModel::new(anchor.clone(), Projection::identity(n), 1.3).map_err(fail)?;
    let sub = SubspacePosterior::new(&mlp, &sub_model, &data, noise).map_err(fail)?;
    let full = SubspacePosterior::new(&mlp, &full_model, &data, noise).map_err(fail)?;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let z = gaussian_vector(n, 0.0, 0.5, &mut rng).map_err(fail)?;
        let vz = v.matvec(&z).map_err(fail)?;
        let a = sub.log_density(&z).map_err(fail)?;
        let b = full.log_density(&vz).map_err(fail)?;
        worst = worst.max((a - b).abs());
    }
    ensure(
        worst <= 1e-10,
        format!("n = {n}, max |difference| {worst:.2e} over 100 draws"),
    )
}

const SINE_TEMPLATE: &str = r#"
[experiment]
name = "sine-METHOD"
method = "METHOD"
seed = 2024

[data]
kind = "synthetic"
n_train = 100
noise_std = 0.4

[network]
hidden = [32, 32, 32]
activation = "tanh"
head = "scalar"

[subspace]
dim = 20
gradient_samples = 100

[inference]
algorithm = "hmc"
draws = 30

[inference.hmc]
warmup = 500
samples = 2000
"#;

fn sine_config(method: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&SINE_TEMPLATE.replace("METHOD", method)).expect("template parses")
}

fn band_widths(root: &Path) -> Outcome {
    let grid: Grid = "0:1:0.005".parse().map_err(fail)?;
    let mut widths = BTreeMap::new();
    for method in ["full", "as", "lis", "pca"] {
        let cfg = sine_config(method);
        let out = root.join(method);
        run_experiment(&cfg, &RunOptions::new(&out), None).map_err(fail)?;
        let plot = plot_data(&cfg, &out, 0, &grid).map_err(fail)?;
        if plot.bands.len() != 201 || plot.curves[0].len() != 30 {
            return Err(format!(
                "unexpected plot shape {} x {}",
                plot.bands.len(),
                plot.curves[0].len()
            ));
        }
        widths.insert(method, plot.mean_std());
    }
    let (full, as_, lis, pca) = (widths["full"], widths["as"], widths["lis"], widths["pca"]);
    let rel = (as_ - full).abs() / full;
    ensure(
        as_ > pca && lis > pca && rel < 0.5,
        format!("mean std FULL {full:.4}, AS {as_:.4}, LIS {lis:.4}, PCA {pca:.4}; |AS-FULL|/FULL {rel:.3}"),
    )
}

fn boston_csv() -> PathBuf {
    std::env::var_os("BOSTON_CSV")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/boston.csv"))
}

fn boston(root: &Path) -> Outcome {
    let path = boston_csv();
    let text = format!(
        r#"
[experiment]
name = "boston-as"
method = "as"
trials = 20

[data]
kind = "csv"
path = "{}"
target = "MEDV"

[network]
hidden = [50]
activation = "relu"
head = "mean_variance"

[pretrain]
weight_decay = 1e-2

[inference]
algorithm = "vi"
draws = 30
"#,
        path.display()
    );
    let cfg = ExperimentConfig::parse(&text).map_err(fail)?;
    cfg.validate().map_err(fail)?;
    let rec = run_experiment(&cfg, &RunOptions::new(root.join("boston")), None).map_err(fail)?;
    let (ll, rmse, cov) = (
        rec.aggregate.avg_log_lik,
        rec.aggregate.rmse,
        rec.aggregate.coverage95,
    );
    ensure(
        (ll.0 + 2.76).abs() <= 0.45
            && (rmse.0 - 3.54).abs() <= 1.0
            && (0.93..=1.0).contains(&cov.0),
        format!(
            "log-lik {:.3}±{:.3}, RMSE {:.3}±{:.3}, coverage {:.3}±{:.3}",
            ll.0, ll.1, rmse.0, rmse.1, cov.0, cov.1
        ),
    )
}

/// Scores the fitted AS model on targets drawn from its own predictive mixture.
fn self_consistency(root: &Path) -> Outcome {
    let cfg = sine_config("as");
    let out = root.join("as");
    if !out.join("results.json").is_file() {
        run_experiment(&cfg, &RunOptions::new(&out), None).map_err(fail)?;
    }
    let predictor = TrialPredictor::open(&cfg, &out, 0).map_err(fail)?;
    let mut rng = RngStream::new(99, 0);
    let xs: Vec<f64> = (0..2000).map(|_| rng.uniform()).collect();
    let mixtures = predictor
        .predict_raw(&DenseMatrix::from_vec(2000, 1, xs).map_err(fail)?)
        .map_err(fail)?;
    let ys: Vec<f64> = mixtures
        .iter()
        .map(|m| {
            let (mu, v) = m.components[rng.index(m.components.len())];
            mu + v.sqrt() * rng.standard_normal()
        })
        .collect();
    let c = coverage95(&mixtures, &ys).map_err(fail)?;
    ensure(
        (0.92..=0.98).contains(&c),
        format!("coverage95 {c:.4} on 2000 self-generated targets"),
    )
}

fn without_times(path: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(path).map_err(fail)?;
    let mut v: serde_json::Value = serde_json::from_str(&text).map_err(fail)?;
    for t in v["trials"]
        .as_array_mut()
        .ok_or("results.json has no trials")?
    {
        t.as_object_mut()
            .ok_or("trial is not an object")?
            .remove("times");
    }
    Ok(v)
}

fn determinism(root: &Path) -> Outcome {
    let text = SINE_TEMPLATE
        .replace("METHOD", "lis")
        .replace("algorithm = \"hmc\"", "algorithm = \"vi\"")
        .replace(
            "[inference.hmc]\nwarmup = 500\nsamples = 2000",
            "[inference.vi]\nsteps = 500",
        )
        .replace("[experiment]", "[pretrain]\nepochs = 100\n\n[experiment]")
        .replace("seed = 2024", "seed = 5\ntrials = 3");
    let cfg = ExperimentConfig::parse(&text).map_err(fail)?;
    let (a, b) = (root.join("det_a"), root.join("det_b"));
    run_experiment(&cfg, &RunOptions::new(&a), Some(text.as_bytes())).map_err(fail)?;
    run_experiment(&cfg, &RunOptions::new(&b), Some(text.as_bytes())).map_err(fail)?;
    let same = without_times(&a.join("results.json"))? == without_times(&b.join("results.json"))?;
    ensure(
        same,
        format!("3 trials; results identical apart from timing: {same}"),
    )
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let root = scratch.path();
    let checks: Vec<Check> = vec![
        (
            "gradient oracle",
            Duration::from_secs(5),
            Box::new(gradient_oracle),
        ),
        ("eigen and svd", Duration::from_secs(5), Box::new(eigen_svd)),
        (
            "subspace contract",
            Duration::from_secs(60),
            Box::new(subspace_contract),
        ),
        ("hmc sanity", Duration::from_secs(30), Box::new(hmc_sanity)),
        ("vi sanity", Duration::from_secs(30), Box::new(vi_sanity)),
        (
            "full-rank equivalence",
            Duration::from_secs(60),
            Box::new(full_rank_equivalence),
        ),
        (
            "sine band widths",
            Duration::from_secs(600),
            Box::new(|| band_widths(root)),
        ),
        (
            "boston reproduction",
            Duration::from_secs(1200),
            Box::new(|| boston(root)),
        ),
        (
            "self-consistent calibration",
            Duration::from_secs(120),
            Box::new(|| self_consistency(root)),
        ),
        (
            "determinism",
            Duration::from_secs(300),
            Box::new(|| determinism(root)),
        ),
    ];
    let mut failures = 0;
    for (name, budget, check) in checks {
        let t0 = Instant::now();
        let outcome = check();
        let elapsed = t0.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) => (elapsed <= budget, d),
            Err(d) => (false, d),
        };
        let budget_note = if elapsed > budget {
            " over time budget"
        } else {
            ""
        };
        println!(
            "{} {name}: {detail} ({:.1} s of {} s{budget_note})",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        failures += usize::from(!ok);
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}
