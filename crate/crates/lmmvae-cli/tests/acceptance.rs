//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured quantities (visible with `--nocapture`; cargo's own
//! per-test ok/FAILED line reports the verdict either way).
//!
//! Desk scale throughout: n = 20,000 observations, p = 30 features,
//! batch 500, 50 epochs, encoder trunk (64, 32), learning rate 2e-3.

use lmmvae_cli::experiment::{fit_method, reconstruct_with, Method, TrainSettings};
use lmmvae_core::design::{build_categorical_z, rbf_kernel, spatial_posterior_chol};
use lmmvae_core::linalg::lu_solve;
use lmmvae_core::metrics::{knn_auc, paired_t_test, recon_mse};
use lmmvae_core::model::{
    kl_gaussian_prior_rows, kl_standard_normal_rows, BatchSpec, BatchTerm, EncoderVariant,
    LmmvaeNets, NoiseDraws,
};
use lmmvae_core::nn::{GaussianHead, Matrix, Rng};
use lmmvae_core::simgen::{generate, ScenarioConfig, SimConfig, SimDataset, SplitMode};

const DESK_N: usize = 20_000;
const DESK_P: usize = 30;

fn desk_settings() -> TrainSettings {
    let mut s = TrainSettings::new(1);
    s.hidden = vec![64, 32];
    s.epochs = 50;
    s.batch_size = 500;
    s.learning_rate = 2e-3;
    s
}

fn desk_categorical(sigma2: f64, split: SplitMode, seed: u64) -> SimConfig {
    let mut config = SimConfig::new(
        DESK_N,
        DESK_P,
        1,
        ScenarioConfig::Categorical {
            cardinalities: vec![100, 300, 500],
            sigma2_b: vec![sigma2; 3],
        },
    );
    config.split = split;
    config.seed = seed;
    config
}

/// Test reconstruction error of one method on one realized dataset.
fn method_mse(method: Method, ds: &SimDataset, settings: &TrainSettings, seed: u64) -> f64 {
    let fitted = fit_method(method, &ds.x_train(), &ds.scenario_train(), settings, seed)
        .unwrap_or_else(|e| panic!("fitting {method}: {e}"));
    let (_, x_hat) = reconstruct_with(&fitted, &ds.x_test(), &ds.scenario_test())
        .unwrap_or_else(|e| panic!("reconstructing {method}: {e}"));
    recon_mse(&ds.x_test(), &x_hat).unwrap()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[test]
fn c01_categorical_trend() {
    // LMMVAE beats VAE-Ignore by at least 15% relative and VAE-Ignore is
    // no worse than PCA-Ignore, with paired-t significance over 5
    // replicates.
    let settings = desk_settings();
    let mut lmmvae = Vec::new();
    let mut vae = Vec::new();
    let mut pca = Vec::new();
    for rep in 0..5u64 {
        let ds = generate(
            &desk_categorical(0.3, SplitMode::Random, 100 + rep),
            &mut Rng::new(100 + rep),
        )
        .unwrap();
        lmmvae.push(method_mse(Method::Lmmvae, &ds, &settings, 10 + rep));
        vae.push(method_mse(Method::VaeIgnore, &ds, &settings, 10 + rep));
        pca.push(method_mse(Method::PcaIgnore, &ds, &settings, 10 + rep));
    }
    let (ml, mv, mp) = (mean(&lmmvae), mean(&vae), mean(&pca));
    let rel_gain = (mv - ml) / mv;
    let t = paired_t_test(&lmmvae, &vae).unwrap();
    assert!(
        rel_gain >= 0.15,
        "lmmvae {ml} vs vae {mv}: gain {rel_gain:.3} < 15%"
    );
    assert!(
        mv <= mp,
        "vae-ignore {mv} should not exceed pca-ignore {mp}"
    );
    assert!(
        t.p_less < 0.05,
        "paired t-test p {} not significant",
        t.p_less
    );
    println!(
        "PASS criterion 1: lmmvae {ml:.3} vs vae-ignore {mv:.3} vs pca-ignore {mp:.3}; \
         relative gain {:.1}%, paired-t p {:.2e}",
        rel_gain * 100.0,
        t.p_less
    );
}

#[test]
fn c02_variance_scaling_robustness() {
    // the VAE-Ignore/LMMVAE error ratio must widen as variance components
    // grow from 0.3 to 3.0
    let settings = desk_settings();
    let mut ratios = [0.0f64; 2];
    for (slot, sigma2) in [(0usize, 0.3f64), (1, 3.0)] {
        let mut lmmvae = Vec::new();
        let mut vae = Vec::new();
        for rep in 0..3u64 {
            let ds = generate(
                &desk_categorical(sigma2, SplitMode::Random, 200 + rep),
                &mut Rng::new(200 + rep),
            )
            .unwrap();
            lmmvae.push(method_mse(Method::Lmmvae, &ds, &settings, 20 + rep));
            vae.push(method_mse(Method::VaeIgnore, &ds, &settings, 20 + rep));
        }
        ratios[slot] = mean(&vae) / mean(&lmmvae);
    }
    assert!(
        ratios[1] > ratios[0],
        "ratio at sigma2=3.0 ({}) must exceed ratio at 0.3 ({})",
        ratios[1],
        ratios[0]
    );
    println!(
        "PASS criterion 2: vae/lmmvae error ratio {:.2} at sigma2 0.3 vs {:.2} at sigma2 3.0",
        ratios[0], ratios[1]
    );
}

#[test]
fn c03_longitudinal_future_mode() {
    // training only on past observations, LMMVAE beats VAE-Ignore by at
    // least 15% relative on the future held-out rows
    let settings = desk_settings();
    let mut lmmvae = Vec::new();
    let mut vae = Vec::new();
    for rep in 0..5u64 {
        let mut config = SimConfig::new(
            DESK_N,
            DESK_P,
            1,
            ScenarioConfig::Longitudinal {
                subjects: 200,
                poly_terms: 3,
                phi_diag: vec![0.3; 3],
                phi_offdiag: vec![(0, 1, 0.3), (0, 2, 0.3)],
            },
        );
        config.split = SplitMode::Future;
        config.seed = 300 + rep;
        let ds = generate(&config, &mut Rng::new(config.seed)).unwrap();
        lmmvae.push(method_mse(Method::Lmmvae, &ds, &settings, 30 + rep));
        vae.push(method_mse(Method::VaeIgnore, &ds, &settings, 30 + rep));
    }
    let (ml, mv) = (mean(&lmmvae), mean(&vae));
    let rel_gain = (mv - ml) / mv;
    assert!(
        rel_gain >= 0.15,
        "lmmvae {ml} vs vae {mv}: gain {rel_gain:.3} < 15%"
    );
    println!(
        "PASS criterion 3: future-mode lmmvae {ml:.3} vs vae-ignore {mv:.3} (gain {:.1}%)",
        rel_gain * 100.0
    );
}

#[test]
fn c04_spatial_unknown_mode() {
    // reconstruction at entirely-unseen locations: LMMVAE no worse than
    // VAE-Ignore
    let settings = desk_settings();
    let mut lmmvae = Vec::new();
    let mut vae = Vec::new();
    for rep in 0..5u64 {
        let mut config = SimConfig::new(
            DESK_N,
            DESK_P,
            1,
            ScenarioConfig::Spatial {
                locations: 1000,
                length_scale_sq: 0.3,
                sigma2_b: 0.3,
            },
        );
        config.split = SplitMode::Unknown;
        config.seed = 400 + rep;
        let ds = generate(&config, &mut Rng::new(config.seed)).unwrap();
        lmmvae.push(method_mse(Method::Lmmvae, &ds, &settings, 40 + rep));
        vae.push(method_mse(Method::VaeIgnore, &ds, &settings, 40 + rep));
    }
    let (ml, mv) = (mean(&lmmvae), mean(&vae));
    assert!(
        ml <= mv,
        "lmmvae {ml} must not exceed vae-ignore {mv} at unseen locations"
    );
    println!("PASS criterion 4: unknown-mode lmmvae {ml:.3} vs vae-ignore {mv:.3}");
}

#[test]
fn c05_noise_floor_sanity() {
    // the ground-truth reconstruction sits at the unit noise floor on
    // every scenario, and no fitted method beats it by more than 0.05
    let settings = desk_settings();
    let scenarios: Vec<(&str, SimConfig)> = vec![
        ("categorical", desk_categorical(0.3, SplitMode::Random, 500)),
        ("longitudinal", {
            let mut c = SimConfig::new(
                DESK_N,
                DESK_P,
                1,
                ScenarioConfig::Longitudinal {
                    subjects: 200,
                    poly_terms: 3,
                    phi_diag: vec![0.3; 3],
                    phi_offdiag: vec![(0, 1, 0.3), (0, 2, 0.3)],
                },
            );
            c.seed = 501;
            c
        }),
        ("spatial", {
            let mut c = SimConfig::new(
                DESK_N,
                DESK_P,
                1,
                ScenarioConfig::Spatial {
                    locations: 1000,
                    length_scale_sq: 0.3,
                    sigma2_b: 0.3,
                },
            );
            c.seed = 502;
            c
        }),
        ("spatial-categorical", {
            let mut c = SimConfig::new(
                DESK_N,
                DESK_P,
                1,
                ScenarioConfig::SpatialCategorical {
                    locations: 200,
                    length_scale_sq: 0.3,
                    sigma2_b_spatial: 0.3,
                    cardinalities: vec![150],
                    sigma2_b: vec![0.3],
                },
            );
            c.seed = 503;
            c
        }),
    ];
    // vae-ohe is excluded on the non-categorical scenarios
    for (name, config) in scenarios {
        let ds = generate(&config, &mut Rng::new(config.seed)).unwrap();
        let oracle_full = ds.oracle_reconstruction().unwrap();
        let oracle = recon_mse(&ds.x_test(), &oracle_full.gather_rows(&ds.test_idx)).unwrap();
        assert!(
            (oracle - 1.0).abs() <= 0.05,
            "{name}: oracle floor {oracle} should be 1.0 +- 0.05"
        );
        let methods: &[Method] = if name == "categorical" {
            &Method::ALL
        } else {
            &[
                Method::PcaIgnore,
                Method::PcaOhe,
                Method::VaeIgnore,
                Method::VaeEmbed,
                Method::Lmmvae,
                Method::LmmvaeI,
            ]
        };
        for &method in methods {
            let mse = method_mse(method, &ds, &settings, 50);
            assert!(
                mse >= oracle - 0.05,
                "{name}: {method} at {mse} beats the oracle floor {oracle} by more than 0.05"
            );
        }
        println!(
            "PASS criterion 5 ({name}): oracle floor {oracle:.3}, no method below {:.3}",
            oracle - 0.05
        );
    }
}

#[test]
fn c06_random_effect_recovery() {
    // strong-signal categorical data: extracted effects correlate with the
    // true ones at 0.8+ per column on average
    let settings = desk_settings();
    let config = desk_categorical(3.0, SplitMode::Random, 600);
    let ds = generate(&config, &mut Rng::new(config.seed)).unwrap();
    let fitted = fit_method(
        Method::Lmmvae,
        &ds.x_train(),
        &ds.scenario_train(),
        &settings,
        60,
    )
    .unwrap();
    let model = match fitted {
        lmmvae_cli::checkpoint::ModelCheckpoint::Lmmvae(m) => m,
        _ => unreachable!(),
    };
    let mut corr_sum = 0.0;
    let q_total = ds.truth.b.rows();
    for c in 0..DESK_P {
        let a: Vec<f64> = (0..q_total).map(|j| model.b_hat[(j, c)]).collect();
        let t: Vec<f64> = (0..q_total).map(|j| ds.truth.b[(j, c)]).collect();
        corr_sum += pearson(&a, &t);
    }
    let mean_corr = corr_sum / DESK_P as f64;
    assert!(mean_corr > 0.8, "mean correlation {mean_corr} below 0.8");
    println!("PASS criterion 6: mean per-column correlation(b_hat, b_true) {mean_corr:.3}");
}

#[test]
fn c07_joint_kl_decomposition() {
    // Monte Carlo KL of the factorized joint equals the sum of the two
    // analytic terms within 3 Monte Carlo standard errors (1e6 samples,
    // 20 random head configurations)
    let mut rng = Rng::new(700);
    let samples = 1_000_000usize;
    for trial in 0..20 {
        let d = 1 + (trial % 3);
        let p = 2 + (trial % 2);
        let u_head = random_head(&mut rng, d);
        let b_head = random_head(&mut rng, p);
        let delta_b = rng.uniform_range(-1.0, 1.0);
        let analytic =
            kl_standard_normal_rows(&u_head)[0] + kl_gaussian_prior_rows(&b_head, delta_b)[0];

        let u_mu = u_head.mu.row(0).to_vec();
        let u_lv = u_head.gamma.row(0).to_vec();
        let b_mu = b_head.mu.row(0).to_vec();
        let b_lv = b_head.gamma.row(0).to_vec();
        let prior_b = vec![delta_b; p];
        let zeros_u = vec![0.0; d];
        let prior_u = vec![0.0; d];
        let zeros_b = vec![0.0; p];

        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..samples {
            let zu: Vec<f64> = (0..d)
                .map(|l| u_mu[l] + (u_lv[l] / 2.0f64).exp() * rng.standard_normal())
                .collect();
            let zb: Vec<f64> = (0..p)
                .map(|l| b_mu[l] + (b_lv[l] / 2.0f64).exp() * rng.standard_normal())
                .collect();
            let log_ratio = log_normal(&zu, &u_mu, &u_lv) + log_normal(&zb, &b_mu, &b_lv)
                - log_normal(&zu, &zeros_u, &prior_u)
                - log_normal(&zb, &zeros_b, &prior_b);
            sum += log_ratio;
            sumsq += log_ratio * log_ratio;
        }
        let mc = sum / samples as f64;
        let var = (sumsq / samples as f64 - mc * mc).max(0.0);
        let se = (var / samples as f64).sqrt();
        assert!(
            (mc - analytic).abs() <= 3.0 * se + 1e-9,
            "trial {trial}: analytic {analytic} vs mc {mc} (3 se {})",
            3.0 * se
        );
    }
    println!("PASS criterion 7: joint KL decomposition verified on 20 configurations");
}

#[test]
fn c08_re_kl_closed_form() {
    // the closed-form random-effect KL matches a direct Monte Carlo
    // estimate within 1% on 20 configurations (1e6 draws each, antithetic)
    let mut rng = Rng::new(800);
    let pairs = 500_000usize;
    for trial in 0..20 {
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        let mu = sign * rng.uniform_range(1.0, 2.0);
        let lv = rng.uniform_range(-1.0, 1.0);
        let delta = rng.uniform_range(-1.0, 1.0);
        let head = GaussianHead::new(
            Matrix::from_vec(1, 1, vec![mu]),
            Matrix::from_vec(1, 1, vec![lv]),
        )
        .unwrap();
        let analytic = kl_gaussian_prior_rows(&head, delta)[0];
        let sigma_q = (lv / 2.0f64).exp();
        let mut sum = 0.0;
        for _ in 0..pairs {
            let eps = rng.standard_normal();
            for z in [mu + sigma_q * eps, mu - sigma_q * eps] {
                sum += log_normal(&[z], &[mu], &[lv]) - log_normal(&[z], &[0.0], &[delta]);
            }
        }
        let mc = sum / (2 * pairs) as f64;
        assert!(
            (mc - analytic).abs() / analytic.abs() < 0.01,
            "trial {trial}: analytic {analytic} vs mc {mc}"
        );
    }
    println!(
        "PASS criterion 8: closed-form RE KL matches Monte Carlo within 1% on 20 configurations"
    );
}

#[test]
fn c09_gradient_suite() {
    // every trainable parameter of the full loss matches central finite
    // differences at relative error < 1e-4 on the tiny configuration
    // (p = 4, d = 2, q = 3, two terms, batch 5)
    let mut rng = Rng::new(900);
    let (m, p, d) = (5usize, 4usize, 2usize);
    let mut nets = LmmvaeNets::init(p, d, &[6], 2, EncoderVariant::TwoEncoders, &mut rng);
    let x = rng.normal_matrix(m, p);
    let terms: Vec<BatchTerm> = (0..2)
        .map(|_| BatchTerm {
            q: 3,
            levels: (0..m).map(|_| Some(rng.index(3))).collect(),
            weights: vec![1.0; m],
        })
        .collect();
    let noise = NoiseDraws::draw(&mut rng, m, d, p, 2);
    let batch = BatchSpec {
        x: &x,
        terms: &terms,
        delta_b: &[0.0, 0.3],
        beta: 0.01,
        spatial: None,
    };
    let (_, grads) = nets.loss_and_grads(&batch, &noise).unwrap();
    let grad_copies: Vec<Vec<f64>> = grads.tensor_slices().iter().map(|s| s.to_vec()).collect();
    let h = 1e-5;
    let mut checked = 0usize;
    for t in 0..grad_copies.len() {
        for k in 0..grad_copies[t].len() {
            let orig = nets.param_slices()[t][k];
            nets.param_slices_mut()[t][k] = orig + h;
            let up = nets.loss_value(&batch, &noise).unwrap();
            nets.param_slices_mut()[t][k] = orig - h;
            let down = nets.loss_value(&batch, &noise).unwrap();
            nets.param_slices_mut()[t][k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grad_copies[t][k];
            if an.abs() < 1e-9 && fd.abs() < 1e-7 {
                checked += 1;
                continue;
            }
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            assert!(
                rel < 1e-4,
                "tensor {t} [{k}]: analytic {an} vs fd {fd} (rel {rel:.2e})"
            );
            checked += 1;
        }
    }
    println!("PASS criterion 9: {checked} parameter gradients match finite differences");
}

#[test]
fn c10_spatial_posterior_algebra() {
    // L L^T matches the dense-inverse posterior formula to 1e-8 on random
    // small instances, and the identity case comes out exactly as I/2
    let mut rng = Rng::new(1000);
    for trial in 0..10 {
        let q = 4 + (trial % 13);
        let n = q + 4 + trial;
        let locs = Matrix::from_fn(q, 2, |_, _| rng.uniform_range(-1.0, 1.0));
        let kernel = rbf_kernel(&locs, 0.7).unwrap();
        let ids: Vec<Option<usize>> = (0..n).map(|_| Some(rng.index(q))).collect();
        let z = build_categorical_z(&[ids], &[q]).unwrap();
        let noise_var = 0.6;
        let l = spatial_posterior_chol(&kernel, &z, noise_var, n, &mut rng).unwrap();
        let psi = l.matmul_transpose(&l);

        // dense oracle: invert the full n x n marginal covariance
        let zd = z.to_dense();
        let zk = zd.matmul(&kernel);
        let mut v = zk.matmul_transpose(&zd);
        for i in 0..n {
            v[(i, i)] += noise_var;
        }
        let v_inv = lu_solve(&v, &Matrix::identity(n)).unwrap();
        let kzt = kernel.matmul_transpose(&zd);
        let correction = kzt.matmul(&v_inv).matmul(&zk);
        let mut oracle = kernel.clone();
        oracle.axpy(-1.0, &correction);

        let err = psi.max_abs_diff(&oracle);
        assert!(err < 1e-8, "trial {trial} (q={q}): max deviation {err:.2e}");
    }

    let q = 5;
    let ids: Vec<Option<usize>> = (0..q).map(Some).collect();
    let z = build_categorical_z(&[ids], &[q]).unwrap();
    let l = spatial_posterior_chol(&Matrix::identity(q), &z, 1.0, q, &mut rng).unwrap();
    let expected = Matrix::from_fn(q, q, |i, j| {
        if i == j {
            core::f64::consts::FRAC_1_SQRT_2
        } else {
            0.0
        }
    });
    assert!(
        l.max_abs_diff(&expected) < 1e-12,
        "identity case must give I/sqrt(2)"
    );
    println!("PASS criterion 10: posterior factor matches the dense-inverse oracle");
}

#[test]
fn c11_downstream_classification() {
    // latent k-NN micro-AUC on a 4-class label built from the true latent
    // plus group effects: LMMVAE at least matches VAE-Ignore at d = 1.
    // Strong random effects (sigma2 = 3) are the regime where the plain
    // VAE's single latent gets polluted by group structure.
    let settings = desk_settings();
    let mut lmmvae_auc = Vec::new();
    let mut vae_auc = Vec::new();
    for rep in 0..5u64 {
        let config = desk_categorical(3.0, SplitMode::Random, 1100 + rep);
        let ds = generate(&config, &mut Rng::new(config.seed)).unwrap();
        let labels = latent_class_labels(&ds);
        let y_tr: Vec<usize> = ds.train_idx.iter().map(|&i| labels[i]).collect();
        let y_te: Vec<usize> = ds.test_idx.iter().map(|&i| labels[i]).collect();

        for (method, out) in [
            (Method::Lmmvae, &mut lmmvae_auc),
            (Method::VaeIgnore, &mut vae_auc),
        ] {
            let fitted = fit_method(
                method,
                &ds.x_train(),
                &ds.scenario_train(),
                &settings,
                110 + rep,
            )
            .unwrap();
            let (u_tr, _) = reconstruct_with(&fitted, &ds.x_train(), &ds.scenario_train()).unwrap();
            let (u_te, _) = reconstruct_with(&fitted, &ds.x_test(), &ds.scenario_test()).unwrap();
            out.push(knn_auc(&u_tr, &y_tr, &u_te, &y_te, 100).unwrap());
        }
    }
    let (ml, mv) = (mean(&lmmvae_auc), mean(&vae_auc));
    assert!(ml >= mv, "lmmvae AUC {ml} below vae-ignore {mv}");
    println!("PASS criterion 11: micro-AUC lmmvae {ml:.3} vs vae-ignore {mv:.3}");
}

/// Four classes from quartiles of the true latent plus a group-effect
/// perturbation (the first feature's effect, standardized and scaled to
/// a 0.25 coefficient). The class structure follows the fixed latent;
/// group effects nudge it, mirroring downstream labels that do not
/// themselves follow the nuisance grouping.
fn latent_class_labels(ds: &SimDataset) -> Vec<usize> {
    let z = ds.scenario.build_z().unwrap();
    let zb = z.matmul_dense(&ds.truth.b);
    let col: Vec<f64> = (0..ds.x.rows()).map(|i| zb[(i, 0)]).collect();
    let mean_zb = col.iter().sum::<f64>() / col.len() as f64;
    let sd_zb = (col
        .iter()
        .map(|v| (v - mean_zb) * (v - mean_zb))
        .sum::<f64>()
        / col.len() as f64)
        .sqrt()
        .max(1e-12);
    let score: Vec<f64> = (0..ds.x.rows())
        .map(|i| ds.truth.u[(i, 0)] + 0.25 * (zb[(i, 0)] - mean_zb) / sd_zb)
        .collect();
    let mut sorted = score.clone();
    sorted.sort_by(f64::total_cmp);
    let q = |f: f64| sorted[((sorted.len() as f64 * f) as usize).min(sorted.len() - 1)];
    let (q1, q2, q3) = (q(0.25), q(0.5), q(0.75));
    score
        .iter()
        .map(|&s| usize::from(s > q1) + usize::from(s > q2) + usize::from(s > q3))
        .collect()
}

fn random_head(rng: &mut Rng, dim: usize) -> GaussianHead {
    GaussianHead::new(
        Matrix::from_fn(1, dim, |_, _| rng.uniform_range(-2.0, 2.0)),
        Matrix::from_fn(1, dim, |_, _| rng.uniform_range(-1.0, 1.0)),
    )
    .unwrap()
}

fn log_normal(z: &[f64], mu: &[f64], log_var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&zv, &m), &lv) in z.iter().zip(mu).zip(log_var) {
        let d = zv - m;
        acc += -0.5 * (lv + d * d / lv.exp() + (2.0 * std::f64::consts::PI).ln());
    }
    acc
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}
