//! The experiment runner: fits a list of methods on simulated or CSV data
//! over several replicates and appends one metric row per fit to an
//! append-only results CSV.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use lmmvae_core::baselines::{
    pca_fit, pca_fit_ohe, pca_transform_reconstruct, vae_train, AuxHandling, VaeConfig,
};
use lmmvae_core::design::{REPrior, REScenario};
use lmmvae_core::metrics::{nll_lmmvae, nll_vae, recon_mse};
use lmmvae_core::model::{train as lmmvae_train, EncoderVariant, LmmvaeConfig};
use lmmvae_core::nn::{Matrix, Rng};
use lmmvae_core::simgen::{generate, ScenarioConfig, SimConfig, SplitMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::ModelCheckpoint;
use crate::dataset::{load_dataset_pair, ScenarioDecl};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    PcaIgnore,
    PcaOhe,
    VaeIgnore,
    VaeOhe,
    VaeEmbed,
    Lmmvae,
    LmmvaeI,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::PcaIgnore,
        Method::PcaOhe,
        Method::VaeIgnore,
        Method::VaeOhe,
        Method::VaeEmbed,
        Method::Lmmvae,
        Method::LmmvaeI,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::PcaIgnore => "pca-ignore",
            Method::PcaOhe => "pca-ohe",
            Method::VaeIgnore => "vae-ignore",
            Method::VaeOhe => "vae-ohe",
            Method::VaeEmbed => "vae-embed",
            Method::Lmmvae => "lmmvae",
            Method::LmmvaeI => "lmmvae-i",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| {
                anyhow!(
                    "unknown method '{s}' (expected one of {:?})",
                    Method::ALL.map(|m| m.name())
                )
            })
    }
}

/// Shared training hyperparameters; the defaults mirror the large-scale
/// experiment settings (hidden 1000/500, batch 1000, 200 epochs, beta
/// 0.01, unit prior variance).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Prior variance for every random-effect term.
    pub sigma2_b_prior: f64,
    /// Kernel length scale assumed during training (spatial scenarios).
    pub train_length_scale_sq: f64,
    /// Noise variance of the spatial posterior computation.
    pub noise_var: f64,
    pub center: bool,
    pub posterior_sample_rows: usize,
}

impl TrainSettings {
    pub fn new(latent_dim: usize) -> Self {
        TrainSettings {
            latent_dim,
            hidden: vec![1000, 500],
            beta: 0.01,
            epochs: 200,
            batch_size: 1000,
            learning_rate: 1e-3,
            sigma2_b_prior: 1.0,
            train_length_scale_sq: 1.0,
            noise_var: 1.0,
            center: true,
            posterior_sample_rows: 10_000,
        }
    }

    pub fn lmmvae_config(
        &self,
        num_terms: usize,
        variant: EncoderVariant,
        seed: u64,
    ) -> LmmvaeConfig {
        LmmvaeConfig {
            latent_dim: self.latent_dim,
            hidden: self.hidden.clone(),
            beta: self.beta,
            prior: REPrior {
                delta_b: vec![self.sigma2_b_prior.ln(); num_terms],
                length_scale_sq: self.train_length_scale_sq,
                noise_var: self.noise_var,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            variant,
            center: self.center,
            posterior_sample_rows: self.posterior_sample_rows,
        }
    }

    pub fn vae_config(&self, handling: AuxHandling, seed: u64) -> VaeConfig {
        VaeConfig {
            latent_dim: self.latent_dim,
            hidden: self.hidden.clone(),
            beta: self.beta,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            center: self.center,
            handling,
        }
    }
}

/// Where the data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Simulate {
        sim: SimConfig,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        scenario: String,
        #[serde(default = "default_poly_terms")]
        poly_terms: usize,
        #[serde(default = "default_standardize")]
        standardize: bool,
    },
}

fn default_poly_terms() -> usize {
    2
}

fn default_standardize() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub methods: Vec<Method>,
    pub source: DataSource,
    pub train: TrainSettings,
    pub replicates: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            bail!("need at least one method");
        }
        if self.replicates == 0 {
            bail!("need at least one replicate");
        }
        Ok(())
    }

    /// Short hash of the canonical spec serialization; carried by every
    /// result row for reproduction. The output directory does not change
    /// what was run, so it is excluded.
    pub fn hash(&self) -> String {
        let mut normalized = self.clone();
        normalized.output_dir = None;
        let json = serde_json::to_string(&normalized).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub scenario: String,
    pub latent_dim: usize,
    pub params: String,
    pub seed: u64,
    pub recon_mse: f64,
    pub nll: f64,
    pub runtime_s: f64,
    pub spec_hash: String,
}

#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub method: String,
    pub mean_recon_mse: f64,
    pub se_recon_mse: f64,
    pub mean_nll: f64,
    pub se_nll: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ResultsTable {
    pub rows: Vec<MetricRow>,
}

impl ResultsTable {
    /// Mean and standard error over replicates, per method.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut methods: Vec<String> = Vec::new();
        for row in &self.rows {
            if !methods.contains(&row.method) {
                methods.push(row.method.clone());
            }
        }
        methods
            .into_iter()
            .map(|method| {
                let mses: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.method == method && r.recon_mse.is_finite())
                    .map(|r| r.recon_mse)
                    .collect();
                let nlls: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.method == method && r.nll.is_finite())
                    .map(|r| r.nll)
                    .collect();
                let (mean_mse, se_mse) = mean_se(&mses);
                let (mean_nll, se_nll) = mean_se(&nlls);
                AggregateRow {
                    method,
                    mean_recon_mse: mean_mse,
                    se_recon_mse: se_mse,
                    mean_nll,
                    se_nll,
                    replicates: mses.len(),
                }
            })
            .collect()
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One realized train/test split.
pub struct RealizedData {
    pub x_train: Matrix,
    pub scenario_train: REScenario,
    pub x_test: Matrix,
    pub scenario_test: REScenario,
    pub scenario_label: String,
    pub params_label: String,
}

pub fn realize(source: &DataSource, replicate_seed: u64) -> Result<RealizedData> {
    match source {
        DataSource::Simulate { sim } => {
            let mut sim = sim.clone();
            sim.seed = sim.seed.wrapping_add(replicate_seed);
            let ds = generate(&sim, &mut Rng::new(sim.seed))
                .map_err(|e| anyhow!("simulation failed: {e}"))?;
            Ok(RealizedData {
                x_train: ds.x_train(),
                scenario_train: ds.scenario_train(),
                x_test: ds.x_test(),
                scenario_test: ds.scenario_test(),
                scenario_label: scenario_label(&sim),
                params_label: params_label(&sim.scenario),
            })
        }
        DataSource::Csv {
            train,
            test,
            scenario,
            poly_terms,
            standardize,
        } => {
            let decl = ScenarioDecl::parse(scenario, *poly_terms)?;
            let ((tr, tr_sc), (te, te_sc)) = load_dataset_pair(train, test, decl, *standardize)?;
            Ok(RealizedData {
                x_train: tr.x,
                scenario_train: tr_sc,
                x_test: te.x,
                scenario_test: te_sc,
                scenario_label: format!("csv-{scenario}"),
                params_label: train
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            })
        }
    }
}

fn scenario_label(sim: &SimConfig) -> String {
    let base = match &sim.scenario {
        ScenarioConfig::Categorical { .. } => "categorical",
        ScenarioConfig::Longitudinal { .. } => "longitudinal",
        ScenarioConfig::Spatial { .. } => "spatial",
        ScenarioConfig::SpatialCategorical { .. } => "spatial-categorical",
    };
    let split = match sim.split {
        SplitMode::Random => "random",
        SplitMode::Future => "future",
        SplitMode::Unknown => "unknown",
    };
    format!("{base}-{split}")
}

fn params_label(scenario: &ScenarioConfig) -> String {
    match scenario {
        ScenarioConfig::Categorical { cardinalities, sigma2_b } => {
            format!("q={cardinalities:?} s2={sigma2_b:?}")
        }
        ScenarioConfig::Longitudinal { subjects, poly_terms, phi_diag, phi_offdiag } => {
            format!("q={subjects} K={poly_terms} phi={phi_diag:?}+{phi_offdiag:?}")
        }
        ScenarioConfig::Spatial { locations, length_scale_sq, sigma2_b } => {
            format!("q={locations} l2={length_scale_sq} s2={sigma2_b}")
        }
        ScenarioConfig::SpatialCategorical {
            locations,
            length_scale_sq,
            sigma2_b_spatial,
            cardinalities,
            sigma2_b,
        } => format!(
            "q={locations} l2={length_scale_sq} s2sp={sigma2_b_spatial} qc={cardinalities:?} s2={sigma2_b:?}"
        ),
    }
    .replace(' ', "")
    .replace(',', ";")
}

/// Fits one method; divergence surfaces as the core error so callers can
/// record it and continue.
pub fn fit_method(
    method: Method,
    x_train: &Matrix,
    scenario_train: &REScenario,
    settings: &TrainSettings,
    seed: u64,
) -> lmmvae_core::Result<ModelCheckpoint> {
    let mut rng = Rng::new(seed);
    Ok(match method {
        Method::PcaIgnore => ModelCheckpoint::Pca(Box::new(pca_fit(x_train, settings.latent_dim)?)),
        Method::PcaOhe => ModelCheckpoint::PcaOhe(Box::new(pca_fit_ohe(
            x_train,
            scenario_train,
            settings.latent_dim,
        )?)),
        Method::VaeIgnore => {
            let config = settings.vae_config(AuxHandling::Ignore, seed);
            ModelCheckpoint::Vae(Box::new(vae_train(x_train, None, &config, &mut rng)?))
        }
        Method::VaeOhe => {
            let config = settings.vae_config(AuxHandling::OneHot, seed);
            ModelCheckpoint::Vae(Box::new(vae_train(
                x_train,
                Some(scenario_train),
                &config,
                &mut rng,
            )?))
        }
        Method::VaeEmbed => {
            let config = settings.vae_config(AuxHandling::Embed, seed);
            ModelCheckpoint::Vae(Box::new(vae_train(
                x_train,
                Some(scenario_train),
                &config,
                &mut rng,
            )?))
        }
        Method::Lmmvae => {
            let config = settings.lmmvae_config(
                scenario_train.num_terms(),
                EncoderVariant::TwoEncoders,
                seed,
            );
            ModelCheckpoint::Lmmvae(Box::new(lmmvae_train(
                x_train,
                scenario_train,
                &config,
                &mut rng,
            )?))
        }
        Method::LmmvaeI => {
            let config = settings.lmmvae_config(
                scenario_train.num_terms(),
                EncoderVariant::SingleEncoder,
                seed,
            );
            ModelCheckpoint::Lmmvae(Box::new(lmmvae_train(
                x_train,
                scenario_train,
                &config,
                &mut rng,
            )?))
        }
    })
}

/// Latent scores and reconstruction of a fitted model on (test) data.
pub fn reconstruct_with(
    checkpoint: &ModelCheckpoint,
    x: &Matrix,
    scenario: &REScenario,
) -> lmmvae_core::Result<(Matrix, Matrix)> {
    match checkpoint {
        ModelCheckpoint::Pca(m) => pca_transform_reconstruct(m, x),
        ModelCheckpoint::PcaOhe(m) => m.transform_reconstruct(x, scenario),
        ModelCheckpoint::Vae(m) => {
            let aux = match m.config.handling {
                AuxHandling::Ignore => None,
                _ => Some(scenario),
            };
            m.reconstruct(x, aux)
        }
        ModelCheckpoint::Lmmvae(m) => m.reconstruct(x, scenario),
    }
}

/// Test metrics of a fitted model; PCA has no likelihood objective, so its
/// `nll` is NaN.
pub fn evaluate_method(
    checkpoint: &ModelCheckpoint,
    x_test: &Matrix,
    scenario_test: &REScenario,
) -> lmmvae_core::Result<(f64, f64)> {
    let (_, x_hat) = reconstruct_with(checkpoint, x_test, scenario_test)?;
    let mse = recon_mse(x_test, &x_hat)?;
    let nll = match checkpoint {
        ModelCheckpoint::Pca(_) | ModelCheckpoint::PcaOhe(_) => f64::NAN,
        ModelCheckpoint::Vae(m) => {
            let aux = match m.config.handling {
                AuxHandling::Ignore => None,
                _ => Some(scenario_test),
            };
            nll_vae(m, x_test, aux)?
        }
        ModelCheckpoint::Lmmvae(m) => nll_lmmvae(m, x_test, scenario_test)?,
    };
    Ok((mse, nll))
}

/// Runs the full experiment: replicates x methods, each fit timed and
/// reduced to one metric row. Replicates run on worker threads; rows come
/// back in deterministic (replicate, method) order. Training divergence is
/// recorded as NaN metrics and the run continues.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ResultsTable> {
    spec.validate()?;
    let spec_hash = spec.hash();

    let n_workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(spec.replicates);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Vec<MetricRow>>>> = Mutex::new(vec![None; spec.replicates]);

    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for _ in 0..n_workers {
            handles.push(scope.spawn(|| -> Result<()> {
                loop {
                    let r = next.fetch_add(1, Ordering::SeqCst);
                    if r >= spec.replicates {
                        return Ok(());
                    }
                    let rows = run_replicate(spec, r as u64, &spec_hash)?;
                    results.lock().expect("poisoned").insert_checked(r, rows);
                }
            }));
        }
        for handle in handles {
            handle
                .join()
                .map_err(|_| anyhow!("worker thread panicked"))??;
        }
        Ok(())
    })?;

    let rows: Vec<MetricRow> = results
        .into_inner()
        .expect("poisoned")
        .into_iter()
        .flat_map(|r| r.expect("all replicates ran"))
        .collect();
    let table = ResultsTable { rows };

    if let Some(dir) = &spec.output_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        append_results(&dir.join("results.csv"), &table.rows)?;
        write_aggregates(&dir.join("aggregate.csv"), &table.aggregate())?;
    }
    Ok(table)
}

trait InsertChecked<T> {
    fn insert_checked(&mut self, index: usize, value: T);
}

impl<T> InsertChecked<T> for Vec<Option<T>> {
    fn insert_checked(&mut self, index: usize, value: T) {
        assert!(self[index].is_none(), "replicate {index} ran twice");
        self[index] = Some(value);
    }
}

fn run_replicate(spec: &ExperimentSpec, replicate: u64, spec_hash: &str) -> Result<Vec<MetricRow>> {
    let data = realize(&spec.source, replicate)?;
    let seed = spec.seed.wrapping_add(replicate);
    let mut rows = Vec::with_capacity(spec.methods.len());
    for &method in &spec.methods {
        let start = Instant::now();
        let fit = fit_method(
            method,
            &data.x_train,
            &data.scenario_train,
            &spec.train,
            seed,
        );
        let (recon, nll) = match fit {
            Ok(checkpoint) => evaluate_method(&checkpoint, &data.x_test, &data.scenario_test)
                .map_err(|e| anyhow!("evaluating {method}: {e}"))?,
            Err(lmmvae_core::Error::Diverged { epoch }) => {
                eprintln!("warning: {method} diverged at epoch {epoch} (replicate {replicate})");
                (f64::NAN, f64::NAN)
            }
            Err(e) => bail!("fitting {method}: {e}"),
        };
        rows.push(MetricRow {
            method: method.name().to_owned(),
            scenario: data.scenario_label.clone(),
            latent_dim: spec.train.latent_dim,
            params: data.params_label.clone(),
            seed,
            recon_mse: recon,
            nll,
            runtime_s: start.elapsed().as_secs_f64(),
            spec_hash: spec_hash.to_owned(),
        });
    }
    Ok(rows)
}

const RESULTS_HEADER: &str = "method,scenario,d,params,seed,recon_mse,nll,runtime_s,spec_hash";

/// Appends rows to the results CSV, writing the header only when the file
/// is new. Existing rows are never rewritten.
pub fn append_results(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let new_file = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if new_file {
        writeln!(file, "{RESULTS_HEADER}")?;
    }
    for row in rows {
        writeln!(
            file,
            "{},{},{},{},{},{},{},{:.3},{}",
            row.method,
            row.scenario,
            row.latent_dim,
            row.params,
            row.seed,
            row.recon_mse,
            row.nll,
            row.runtime_s,
            row.spec_hash
        )?;
    }
    Ok(())
}

fn write_aggregates(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut file =
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(
        file,
        "method,mean_recon_mse,se_recon_mse,mean_nll,se_nll,replicates"
    )?;
    for row in rows {
        writeln!(
            file,
            "{},{},{},{},{},{}",
            row.method,
            row.mean_recon_mse,
            row.se_recon_mse,
            row.mean_nll,
            row.se_nll,
            row.replicates
        )?;
    }
    Ok(())
}
