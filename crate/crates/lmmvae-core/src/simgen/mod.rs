//! Synthetic dataset generators for the three covariance scenarios and
//! their spatial-categorical combination, with Random / Future / Unknown
//! train-test splits.
//!
//! Data follows `X = f(U) + M + Z B + E` with `f(u) = (u W^T) .* cos(u W^T)`
//! applied rowwise, feature means drawn from `U(-10, 10)` and unit
//! Gaussian noise. Group sizes come from a uniform multinomial; empty
//! groups are re-dealt one row from the largest group so every level
//! appears.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent f64 methods replace the trait in std builds
use num_traits::Float;

use crate::design::{rbf_kernel, sample_matrix_normal, REScenario};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, clip_to_psd, psd_sqrt};
use crate::nn::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SplitMode {
    /// Uniform 80/20 row split.
    Random,
    /// Test rows are the latest 20% by measurement time (longitudinal).
    Future,
    /// Test rows come entirely from locations unseen in training (spatial).
    Unknown,
}

/// Scenario-specific generator parameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ScenarioConfig {
    Categorical {
        cardinalities: Vec<usize>,
        /// Poisson rate per feature's variance components, one per term.
        sigma2_b: Vec<f64>,
    },
    Longitudinal {
        subjects: usize,
        poly_terms: usize,
        /// Diagonal of the polynomial covariance.
        phi_diag: Vec<f64>,
        /// Symmetric off-diagonal entries `(i, j, value)`.
        phi_offdiag: Vec<(usize, usize, f64)>,
    },
    Spatial {
        locations: usize,
        length_scale_sq: f64,
        sigma2_b: f64,
    },
    SpatialCategorical {
        locations: usize,
        length_scale_sq: f64,
        sigma2_b_spatial: f64,
        cardinalities: Vec<usize>,
        sigma2_b: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub latent_dim: usize,
    pub scenario: ScenarioConfig,
    pub split: SplitMode,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(n: usize, p: usize, latent_dim: usize, scenario: ScenarioConfig) -> Self {
        SimConfig {
            n,
            p,
            latent_dim,
            scenario,
            split: SplitMode::Random,
            test_fraction: 0.2,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.latent_dim > self.p {
            return Err(Error::InvalidArgument("latent_dim must be in 1..=p".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidArgument(
                "test_fraction must be in (0, 1)".into(),
            ));
        }
        let check_q = |q: usize| -> Result<()> {
            if q == 0 || q > self.n {
                return Err(Error::InvalidArgument(format!(
                    "group count {q} must be in 1..=n ({})",
                    self.n
                )));
            }
            Ok(())
        };
        match (&self.scenario, self.split) {
            (ScenarioConfig::Longitudinal { .. }, SplitMode::Unknown) => {
                return Err(Error::InvalidArgument(
                    "unknown-location split needs a spatial scenario".into(),
                ))
            }
            (ScenarioConfig::Categorical { .. }, SplitMode::Future)
            | (ScenarioConfig::Spatial { .. }, SplitMode::Future)
            | (ScenarioConfig::SpatialCategorical { .. }, SplitMode::Future) => {
                return Err(Error::InvalidArgument(
                    "future split needs a longitudinal scenario".into(),
                ))
            }
            (ScenarioConfig::Categorical { .. }, SplitMode::Unknown) => {
                return Err(Error::InvalidArgument(
                    "unknown-location split needs a spatial scenario".into(),
                ))
            }
            _ => {}
        }
        match &self.scenario {
            ScenarioConfig::Categorical {
                cardinalities,
                sigma2_b,
            } => {
                if cardinalities.len() != sigma2_b.len() || cardinalities.is_empty() {
                    return Err(Error::InvalidArgument(
                        "one sigma2_b per categorical feature".into(),
                    ));
                }
                for &q in cardinalities {
                    check_q(q)?;
                }
                if sigma2_b.iter().any(|&s| s <= 0.0) {
                    return Err(Error::InvalidArgument("sigma2_b must be positive".into()));
                }
            }
            ScenarioConfig::Longitudinal {
                subjects,
                poly_terms,
                phi_diag,
                ..
            } => {
                check_q(*subjects)?;
                if *poly_terms == 0 || phi_diag.len() != *poly_terms {
                    return Err(Error::InvalidArgument(
                        "phi_diag must have one entry per polynomial term".into(),
                    ));
                }
            }
            ScenarioConfig::Spatial {
                locations,
                length_scale_sq,
                sigma2_b,
            } => {
                check_q(*locations)?;
                if *length_scale_sq <= 0.0 || *sigma2_b <= 0.0 {
                    return Err(Error::InvalidArgument(
                        "spatial variance parameters must be positive".into(),
                    ));
                }
            }
            ScenarioConfig::SpatialCategorical {
                locations,
                length_scale_sq,
                sigma2_b_spatial,
                cardinalities,
                sigma2_b,
            } => {
                check_q(*locations)?;
                for &q in cardinalities {
                    check_q(q)?;
                }
                if *length_scale_sq <= 0.0
                    || *sigma2_b_spatial <= 0.0
                    || sigma2_b.iter().any(|&s| s <= 0.0)
                    || cardinalities.len() != sigma2_b.len()
                {
                    return Err(Error::InvalidArgument(
                        "spatial-categorical parameters invalid".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth pieces kept alongside the observed matrix so tests can
/// re-assemble `X` exactly.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub u: Matrix,
    pub w: Matrix,
    /// `f(U)`, the noiseless fixed part.
    pub fixed: Matrix,
    pub means: Vec<f64>,
    /// Stacked Q x p random effects.
    pub b: Matrix,
    pub noise: Matrix,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub x: Matrix,
    pub scenario: REScenario,
    pub truth: SimTruth,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub config: SimConfig,
}

impl SimDataset {
    pub fn x_train(&self) -> Matrix {
        self.x.gather_rows(&self.train_idx)
    }

    pub fn x_test(&self) -> Matrix {
        self.x.gather_rows(&self.test_idx)
    }

    pub fn scenario_train(&self) -> REScenario {
        self.scenario.subset(&self.train_idx)
    }

    pub fn scenario_test(&self) -> REScenario {
        self.scenario.subset(&self.test_idx)
    }

    /// The noiseless reconstruction `f(U) + M + Z B`; its error against
    /// `X` is exactly the noise level.
    pub fn oracle_reconstruction(&self) -> Result<Matrix> {
        let z = self.scenario.build_z()?;
        let mut out = z.matmul_dense(&self.truth.b);
        out.axpy(1.0, &self.truth.fixed);
        for i in 0..out.rows() {
            for (v, &m) in out.row_mut(i).iter_mut().zip(&self.truth.means) {
                *v += m;
            }
        }
        Ok(out)
    }
}

/// Latent variables, loadings and the nonlinear fixed part
/// `f(U) = (U W^T) .* cos(U W^T)`.
pub fn gen_fixed_part(
    n: usize,
    p: usize,
    d: usize,
    rng: &mut Rng,
) -> Result<(Matrix, Matrix, Matrix)> {
    if d == 0 || d > p {
        return Err(Error::InvalidArgument(format!(
            "d = {d} must be in 1..={p}"
        )));
    }
    let u = rng.normal_matrix(n, d);
    let w = rng.normal_matrix(p, d);
    let fixed = u.matmul_transpose(&w).map(|v| v * v.cos());
    Ok((u, w, fixed))
}

/// Multinomial group sizes over `q` equiprobable groups; empty groups are
/// re-dealt one row from the currently largest group so every level has at
/// least one observation.
pub fn gen_group_sizes(n: usize, q: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if q == 0 || q > n {
        return Err(Error::InvalidArgument(format!(
            "q = {q} must be in 1..={n}"
        )));
    }
    let mut sizes = rng.multinomial_uniform(n, q);
    for j in 0..q {
        if sizes[j] == 0 {
            let largest = (0..q).max_by_key(|&k| sizes[k]).expect("nonempty");
            sizes[largest] -= 1;
            sizes[j] = 1;
        }
    }
    Ok(sizes)
}

/// Per-feature variance components `(Poisson(sigma2_b) + 1) * c` with
/// `c = min(sigma2_b, 1)`; every draw is at least `c > 0`.
pub fn gen_variance_components(sigma2_b: f64, p: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if sigma2_b <= 0.0 {
        return Err(Error::InvalidArgument("sigma2_b must be positive".into()));
    }
    let c = sigma2_b.min(1.0);
    Ok((0..p)
        .map(|_| (rng.poisson(sigma2_b) + 1) as f64 * c)
        .collect())
}

/// Shuffled per-row level assignment realizing the given group sizes.
fn assign_levels(sizes: &[usize], rng: &mut Rng) -> Vec<Option<usize>> {
    let mut labels = Vec::with_capacity(sizes.iter().sum());
    for (j, &s) in sizes.iter().enumerate() {
        labels.extend(core::iter::repeat_n(Some(j), s));
    }
    rng.shuffle(&mut labels);
    labels
}

/// The polynomial covariance from its diagonal and off-diagonal entries,
/// projected to the nearest positive semi-definite matrix by eigenvalue
/// clipping.
pub fn build_phi(diag: &[f64], offdiag: &[(usize, usize, f64)]) -> Result<Matrix> {
    let k = diag.len();
    let mut phi = Matrix::zeros(k, k);
    for (i, &v) in diag.iter().enumerate() {
        if v <= 0.0 {
            return Err(Error::InvalidArgument(
                "phi diagonal must be positive".into(),
            ));
        }
        phi[(i, i)] = v;
    }
    for &(i, j, v) in offdiag {
        if i >= k || j >= k || i == j {
            return Err(Error::InvalidArgument(format!(
                "off-diagonal index ({i}, {j}) invalid for {k} terms"
            )));
        }
        phi[(i, j)] = v;
        phi[(j, i)] = v;
    }
    Ok(clip_to_psd(&phi))
}

fn gen_split(
    n: usize,
    test_fraction: f64,
    mode: SplitMode,
    scenario: &REScenario,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<usize>) {
    let n_test = ((n as f64 * test_fraction) + 0.5).floor() as usize;
    match mode {
        SplitMode::Random => {
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let test: Vec<usize> = perm[..n_test].to_vec();
            let train: Vec<usize> = perm[n_test..].to_vec();
            (train, test)
        }
        SplitMode::Future => {
            let times = match scenario {
                REScenario::Longitudinal { times, .. } => times,
                _ => unreachable!("validated earlier"),
            };
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
            let split_at = n - n_test;
            (order[..split_at].to_vec(), order[split_at..].to_vec())
        }
        SplitMode::Unknown => {
            let (q, ids) = match scenario {
                REScenario::Spatial {
                    locations,
                    location_ids,
                } => (locations.rows(), location_ids),
                REScenario::SpatialCategorical {
                    locations,
                    location_ids,
                    ..
                } => (locations.rows(), location_ids),
                _ => unreachable!("validated earlier"),
            };
            let mut rows_per_location: Vec<Vec<usize>> = vec![Vec::new(); q];
            for (i, id) in ids.iter().enumerate() {
                rows_per_location[id.expect("generated ids are present")].push(i);
            }
            let mut order: Vec<usize> = (0..q).collect();
            rng.shuffle(&mut order);
            let mut test: Vec<usize> = Vec::new();
            let mut held = vec![false; q];
            for &loc in &order {
                if test.len() >= n_test {
                    break;
                }
                held[loc] = true;
                test.extend_from_slice(&rows_per_location[loc]);
            }
            let train: Vec<usize> = (0..n)
                .filter(|&i| !held[ids[i].expect("present")])
                .collect();
            test.sort_unstable();
            (train, test)
        }
    }
}

/// Generates a dataset according to the scenario configuration; the RNG
/// drives every random choice, so a fixed seed reproduces the dataset
/// bit-exactly.
pub fn generate(config: &SimConfig, rng: &mut Rng) -> Result<SimDataset> {
    config.validate()?;
    let (n, p, d) = (config.n, config.p, config.latent_dim);
    let (u, w, fixed) = gen_fixed_part(n, p, d, rng)?;
    let means: Vec<f64> = (0..p).map(|_| rng.uniform_range(-10.0, 10.0)).collect();

    let (scenario, b) = match &config.scenario {
        ScenarioConfig::Categorical {
            cardinalities,
            sigma2_b,
        } => {
            let mut level_ids = Vec::with_capacity(cardinalities.len());
            let mut blocks = Vec::with_capacity(cardinalities.len());
            for (&q, &s) in cardinalities.iter().zip(sigma2_b) {
                let sizes = gen_group_sizes(n, q, rng)?;
                level_ids.push(assign_levels(&sizes, rng));
                let vars = gen_variance_components(s, p, rng)?;
                blocks.push(sample_matrix_normal(rng, q, None, &vars));
            }
            let scenario = REScenario::Categorical {
                cardinalities: cardinalities.clone(),
                level_ids,
            };
            (scenario, vstack(&blocks))
        }
        ScenarioConfig::Longitudinal {
            subjects,
            poly_terms,
            phi_diag,
            phi_offdiag,
        } => {
            let q = *subjects;
            let k_terms = *poly_terms;
            let sizes = gen_group_sizes(n, q, rng)?;
            let subject_ids = assign_levels(&sizes, rng);
            let times: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let phi = build_phi(phi_diag, phi_offdiag)?;
            let phi_sqrt = psd_sqrt(&phi);
            // row covariance Phi x I_q: each subject's K x p block is
            // phi_sqrt * G_j; column covariance is the identity
            let mut b = Matrix::zeros(k_terms * q, p);
            for j in 0..q {
                let g = rng.normal_matrix(k_terms, p);
                let block = phi_sqrt.matmul(&g);
                for k in 0..k_terms {
                    b.row_mut(k * q + j).copy_from_slice(block.row(k));
                }
            }
            let scenario = REScenario::Longitudinal {
                subjects: q,
                poly_terms: k_terms,
                subject_ids,
                times,
            };
            (scenario, b)
        }
        ScenarioConfig::Spatial {
            locations,
            length_scale_sq,
            sigma2_b,
        } => {
            let q = *locations;
            let locs = sample_locations(q, rng);
            let sizes = gen_group_sizes(n, q, rng)?;
            let location_ids = assign_levels(&sizes, rng);
            let kernel = rbf_kernel(&locs, *length_scale_sq)?;
            let factor = cholesky_jittered(&kernel, 1e-10, 1e-4)?;
            let vars = gen_variance_components(*sigma2_b, p, rng)?;
            let b = sample_matrix_normal(rng, q, Some(&factor), &vars);
            let scenario = REScenario::Spatial {
                locations: locs,
                location_ids,
            };
            (scenario, b)
        }
        ScenarioConfig::SpatialCategorical {
            locations,
            length_scale_sq,
            sigma2_b_spatial,
            cardinalities,
            sigma2_b,
        } => {
            let q = *locations;
            let locs = sample_locations(q, rng);
            let sizes = gen_group_sizes(n, q, rng)?;
            let location_ids = assign_levels(&sizes, rng);
            let kernel = rbf_kernel(&locs, *length_scale_sq)?;
            let factor = cholesky_jittered(&kernel, 1e-10, 1e-4)?;
            let vars = gen_variance_components(*sigma2_b_spatial, p, rng)?;
            let mut blocks = vec![sample_matrix_normal(rng, q, Some(&factor), &vars)];
            let mut level_ids = Vec::with_capacity(cardinalities.len());
            for (&qc, &s) in cardinalities.iter().zip(sigma2_b) {
                let sizes = gen_group_sizes(n, qc, rng)?;
                level_ids.push(assign_levels(&sizes, rng));
                let vars = gen_variance_components(s, p, rng)?;
                blocks.push(sample_matrix_normal(rng, qc, None, &vars));
            }
            let scenario = REScenario::SpatialCategorical {
                locations: locs,
                location_ids,
                cardinalities: cardinalities.clone(),
                level_ids,
            };
            (scenario, vstack(&blocks))
        }
    };

    let noise = rng.normal_matrix(n, p);
    let z = scenario.build_z()?;
    let mut x = z.matmul_dense(&b);
    x.axpy(1.0, &fixed);
    x.axpy(1.0, &noise);
    for i in 0..n {
        for (v, &m) in x.row_mut(i).iter_mut().zip(&means) {
            *v += m;
        }
    }

    let (train_idx, test_idx) = gen_split(n, config.test_fraction, config.split, &scenario, rng);
    Ok(SimDataset {
        x,
        scenario,
        truth: SimTruth {
            u,
            w,
            fixed,
            means,
            b,
            noise,
        },
        train_idx,
        test_idx,
        config: config.clone(),
    })
}

/// 2-D locations on the unit square, sorted by coordinates so location
/// ids survive a save/reload round trip unchanged.
fn sample_locations(q: usize, rng: &mut Rng) -> Matrix {
    let mut coords: Vec<(f64, f64)> = (0..q)
        .map(|_| (rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)))
        .collect();
    coords.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Matrix::from_fn(q, 2, |i, j| if j == 0 { coords[i].0 } else { coords[i].1 })
}

fn vstack(blocks: &[Matrix]) -> Matrix {
    let cols = blocks[0].cols();
    let rows: usize = blocks.iter().map(|b| b.rows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut offset = 0;
    for b in blocks {
        for i in 0..b.rows() {
            out.row_mut(offset + i).copy_from_slice(b.row(i));
        }
        offset += b.rows();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_part_zero_latent_maps_to_zero() {
        let mut rng = Rng::new(1);
        let (mut u, w, _) = gen_fixed_part(3, 4, 2, &mut rng).unwrap();
        for v in u.data_mut() {
            *v = 0.0;
        }
        let f = u.matmul_transpose(&w).map(|v| v * v.cos());
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_part_scalar_value() {
        // d = 1, w = 1, u = pi: pi * cos(pi) = -pi
        let v = core::f64::consts::PI;
        let f = v * v.cos();
        assert!((f + core::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn fixed_part_matches_loop_oracle() {
        let mut rng = Rng::new(17);
        let (u, w, fixed) = gen_fixed_part(6, 5, 2, &mut rng).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                let mut dot = 0.0;
                for k in 0..2 {
                    dot += u[(i, k)] * w[(j, k)];
                }
                let expected = dot * dot.cos();
                assert!((fixed[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_sizes_sum_and_cover() {
        let mut rng = Rng::new(9);
        let sizes = gen_group_sizes(100, 100, &mut rng).unwrap();
        assert_eq!(sizes.iter().sum::<usize>(), 100);
        assert!(sizes.iter().all(|&s| s == 1), "saturation means all ones");
        let sizes = gen_group_sizes(50, 1, &mut rng).unwrap();
        assert_eq!(sizes, vec![50]);
        let sizes = gen_group_sizes(1000, 30, &mut rng).unwrap();
        assert_eq!(sizes.iter().sum::<usize>(), 1000);
        assert!(sizes.iter().all(|&s| s >= 1));
        assert!(gen_group_sizes(5, 6, &mut rng).is_err());
    }

    #[test]
    fn variance_components_support_and_moments() {
        let mut rng = Rng::new(30);
        // sigma2 = 0.3: support {0.3, 0.6, ...}, minimum 0.3
        let vars = gen_variance_components(0.3, 1000, &mut rng).unwrap();
        for &v in &vars {
            assert!(v >= 0.3 - 1e-12);
            let ratio = v / 0.3;
            assert!(
                (ratio - ratio.round()).abs() < 1e-9,
                "not a multiple of c: {v}"
            );
        }
        // sigma2 = 3: c = 1, mean (3 + 1) * 1 = 4
        let draws = 100_000;
        let mean = gen_variance_components(3.0, draws, &mut rng)
            .unwrap()
            .iter()
            .sum::<f64>()
            / draws as f64;
        assert!((mean - 4.0).abs() < 0.05, "mean {mean}");
        assert!(gen_variance_components(0.0, 3, &mut rng).is_err());
    }

    #[test]
    fn phi_with_stated_offdiagonals_is_projected_to_psd() {
        // diag 0.3 with 0.3 off-diagonals is indefinite and must be clipped
        let phi = build_phi(&[0.3, 0.3, 0.3], &[(0, 1, 0.3), (0, 2, 0.3)]).unwrap();
        let (eigs, _) = crate::linalg::symmetric_eigen(&phi);
        assert!(eigs.iter().all(|&e| e >= -1e-10));
        // a PSD input passes through unchanged
        let phi2 = build_phi(&[1.0, 1.0, 1.0], &[(0, 1, 0.3), (0, 2, 0.3)]).unwrap();
        assert!((phi2[(0, 1)] - 0.3).abs() < 1e-9);
        assert!((phi2[(0, 0)] - 1.0).abs() < 1e-9);
    }

    fn desk_config(scenario: ScenarioConfig) -> SimConfig {
        SimConfig::new(400, 6, 1, scenario)
    }

    #[test]
    fn categorical_pieces_reassemble_x() {
        let config = desk_config(ScenarioConfig::Categorical {
            cardinalities: vec![7, 11],
            sigma2_b: vec![0.3, 3.0],
        });
        let ds = generate(&config, &mut Rng::new(5)).unwrap();
        let mut rebuilt = ds.oracle_reconstruction().unwrap();
        rebuilt.axpy(1.0, &ds.truth.noise);
        assert!(rebuilt.max_abs_diff(&ds.x) < 1e-10);
    }

    #[test]
    fn longitudinal_reduces_to_categorical_at_one_term() {
        // K = 1: Z is the plain subject indicator, B is q x p
        let config = desk_config(ScenarioConfig::Longitudinal {
            subjects: 9,
            poly_terms: 1,
            phi_diag: vec![1.0],
            phi_offdiag: vec![],
        });
        let ds = generate(&config, &mut Rng::new(6)).unwrap();
        let z = ds.scenario.build_z().unwrap();
        assert_eq!(z.q(), 9);
        for i in 0..ds.x.rows() {
            assert_eq!(z.row(i).len(), 1);
            assert_eq!(z.row(i)[0].1, 1.0);
        }
        let mut rebuilt = ds.oracle_reconstruction().unwrap();
        rebuilt.axpy(1.0, &ds.truth.noise);
        assert!(rebuilt.max_abs_diff(&ds.x) < 1e-10);
    }

    #[test]
    fn longitudinal_subject_blocks_have_phi_covariance() {
        // empirical covariance of (b_0j, b_1j, b_2j) across many subjects
        let q = 10_000;
        let config = SimConfig::new(
            q,
            1,
            1,
            ScenarioConfig::Longitudinal {
                subjects: q,
                poly_terms: 3,
                phi_diag: vec![1.0, 1.0, 1.0],
                phi_offdiag: vec![(0, 1, 0.3), (0, 2, 0.3)],
            },
        );
        let ds = generate(&config, &mut Rng::new(11)).unwrap();
        let phi = build_phi(&[1.0, 1.0, 1.0], &[(0, 1, 0.3), (0, 2, 0.3)]).unwrap();
        let b = &ds.truth.b;
        for a in 0..3 {
            for c in a..3 {
                let mut acc = 0.0;
                for j in 0..q {
                    acc += b[(a * q + j, 0)] * b[(c * q + j, 0)];
                }
                let emp = acc / q as f64;
                // 3 standard errors for a second moment at this sample size
                let tol = 3.0 * (2.0f64 / q as f64).sqrt();
                assert!(
                    (emp - phi[(a, c)]).abs() < tol,
                    "cov[{a}{c}]: {emp} vs {}",
                    phi[(a, c)]
                );
            }
        }
    }

    #[test]
    fn spatial_long_length_scale_makes_effects_identical() {
        let config = SimConfig::new(
            200,
            4,
            1,
            ScenarioConfig::Spatial {
                locations: 40,
                length_scale_sq: 1e6,
                sigma2_b: 1.0,
            },
        );
        let ds = generate(&config, &mut Rng::new(3)).unwrap();
        let b = &ds.truth.b;
        // every location's effect is nearly the same draw: correlation
        // between rows > 0.99
        let r0: Vec<f64> = b.row(0).to_vec();
        for j in 1..40 {
            let rj = b.row(j);
            let dot: f64 = r0.iter().zip(rj).map(|(a, b)| a * b).sum();
            let n0: f64 = r0.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nj: f64 = rj.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dot / (n0 * nj) > 0.99, "row {j} decorrelates");
        }
    }

    #[test]
    fn spatial_column_covariance_tracks_kernel() {
        // with a single location pair fixed, repeated generation gives
        // cov(B[., col]) close to K * D_col; checked via many q=16 draws
        let mut rng = Rng::new(88);
        let q = 16;
        let locs = Matrix::from_fn(q, 2, |i, j| ((i * 2 + j) as f64 * 0.37).sin());
        let kernel = rbf_kernel(&locs, 1.0).unwrap();
        let factor = cholesky_jittered(&kernel, 1e-10, 1e-4).unwrap();
        let draws = 100_000;
        let mut acc = Matrix::zeros(q, q);
        for _ in 0..draws {
            let b = sample_matrix_normal(&mut rng, q, Some(&factor), &[2.0]);
            let col = b.col(0);
            for i in 0..q {
                for j in 0..q {
                    acc[(i, j)] += col[i] * col[j];
                }
            }
        }
        acc.scale(1.0 / draws as f64);
        let tol = 3.0 * (2.0f64 * 4.0 / draws as f64).sqrt() + 0.01;
        for i in 0..q {
            for j in 0..q {
                assert!(
                    (acc[(i, j)] - 2.0 * kernel[(i, j)]).abs() < tol * 2.0,
                    "cov[{i}{j}] {} vs {}",
                    acc[(i, j)],
                    2.0 * kernel[(i, j)]
                );
            }
        }
    }

    #[test]
    fn splits_partition_rows() {
        for (scenario, split) in [
            (
                ScenarioConfig::Categorical {
                    cardinalities: vec![11],
                    sigma2_b: vec![0.3],
                },
                SplitMode::Random,
            ),
            (
                ScenarioConfig::Longitudinal {
                    subjects: 13,
                    poly_terms: 2,
                    phi_diag: vec![0.3, 0.3],
                    phi_offdiag: vec![],
                },
                SplitMode::Future,
            ),
            (
                ScenarioConfig::Spatial {
                    locations: 37,
                    length_scale_sq: 0.3,
                    sigma2_b: 0.3,
                },
                SplitMode::Unknown,
            ),
        ] {
            let mut config = SimConfig::new(500, 4, 1, scenario);
            config.split = split;
            let ds = generate(&config, &mut Rng::new(7)).unwrap();
            let mut all: Vec<usize> = ds.train_idx.iter().chain(&ds.test_idx).copied().collect();
            all.sort_unstable();
            assert_eq!(
                all,
                (0..500).collect::<Vec<_>>(),
                "{split:?} not a partition"
            );
            match split {
                SplitMode::Unknown => {
                    // approximate fraction, exact location disjointness
                    let frac = ds.test_idx.len() as f64 / 500.0;
                    assert!((0.15..=0.3).contains(&frac), "{split:?} fraction {frac}");
                }
                _ => {
                    assert_eq!(ds.test_idx.len(), 100, "{split:?} fraction");
                }
            }
        }
    }

    #[test]
    fn future_split_holds_out_latest_times() {
        let mut config = SimConfig::new(
            300,
            4,
            1,
            ScenarioConfig::Longitudinal {
                subjects: 10,
                poly_terms: 2,
                phi_diag: vec![1.0, 1.0],
                phi_offdiag: vec![],
            },
        );
        config.split = SplitMode::Future;
        let ds = generate(&config, &mut Rng::new(10)).unwrap();
        let times = match &ds.scenario {
            REScenario::Longitudinal { times, .. } => times.clone(),
            _ => unreachable!(),
        };
        let max_train = ds
            .train_idx
            .iter()
            .map(|&i| times[i])
            .fold(f64::MIN, f64::max);
        let min_test = ds
            .test_idx
            .iter()
            .map(|&i| times[i])
            .fold(f64::MAX, f64::min);
        assert!(max_train <= min_test, "training sees future rows");
    }

    #[test]
    fn unknown_split_locations_are_disjoint() {
        let mut config = SimConfig::new(
            600,
            3,
            1,
            ScenarioConfig::Spatial {
                locations: 50,
                length_scale_sq: 0.3,
                sigma2_b: 0.3,
            },
        );
        config.split = SplitMode::Unknown;
        let ds = generate(&config, &mut Rng::new(21)).unwrap();
        let ids = match &ds.scenario {
            REScenario::Spatial { location_ids, .. } => location_ids.clone(),
            _ => unreachable!(),
        };
        let train_locs: alloc::collections::BTreeSet<usize> =
            ds.train_idx.iter().map(|&i| ids[i].unwrap()).collect();
        let test_locs: alloc::collections::BTreeSet<usize> =
            ds.test_idx.iter().map(|&i| ids[i].unwrap()).collect();
        assert!(train_locs.is_disjoint(&test_locs));
        assert!(!test_locs.is_empty());
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let config = desk_config(ScenarioConfig::Categorical {
            cardinalities: vec![9],
            sigma2_b: vec![0.3],
        });
        let a = generate(&config, &mut Rng::new(123)).unwrap();
        let b = generate(&config, &mut Rng::new(123)).unwrap();
        assert!(a.x.max_abs_diff(&b.x) == 0.0);
        assert_eq!(a.train_idx, b.train_idx);
        assert_eq!(a.scenario, b.scenario);
    }

    #[test]
    fn future_split_rejected_for_categorical() {
        let mut config = desk_config(ScenarioConfig::Categorical {
            cardinalities: vec![5],
            sigma2_b: vec![1.0],
        });
        config.split = SplitMode::Future;
        assert!(generate(&config, &mut Rng::new(0)).is_err());
    }
}
