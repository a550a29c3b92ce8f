use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lmmvae_cli::checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint};
use lmmvae_cli::dataset::{load_dataset, save_dataset, DataMatrix, ScenarioDecl};
use lmmvae_cli::experiment::{
    append_results, fit_method, run_experiment, DataSource, ExperimentSpec, Method, MetricRow,
    TrainSettings,
};
use lmmvae_core::metrics::recon_mse;
use lmmvae_core::nn::Rng;
use lmmvae_core::simgen::{generate, ScenarioConfig, SimConfig, SplitMode};

#[derive(Parser)]
#[command(
    name = "lmmvae",
    about = "Dimensionality reduction for correlated data: simulation, model fitting and evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write train/test CSV files.
    Simulate(SimulateArgs),
    /// Fit one method on a training CSV and write a model checkpoint.
    Fit(FitArgs),
    /// Evaluate a checkpoint on a train/test CSV pair.
    Evaluate(EvaluateArgs),
    /// Run a full replicate experiment (simulation or CSV source).
    Run(RunArgs),
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// categorical | longitudinal | spatial | spatial-categorical
    #[arg(long)]
    scenario: Option<String>,
    /// Group counts: categorical cardinalities, subject count, location
    /// count, or location count followed by cardinalities.
    #[arg(long, value_delimiter = ',', default_value = "100,300,500")]
    q: Vec<usize>,
    /// Random-effect variances, matching the layout of --q.
    #[arg(long = "sigma2-b", value_delimiter = ',', default_value = "0.3")]
    sigma2_b: Vec<f64>,
    /// Generator kernel length scale (spatial scenarios).
    #[arg(long, default_value_t = 0.3)]
    l2: f64,
    /// Polynomial random-effect terms (longitudinal scenarios).
    #[arg(long, default_value_t = 3)]
    poly_terms: usize,
    /// Off-diagonal entries of the polynomial covariance, as
    /// "i,j,value;i,j,value". The default couples the intercept with the
    /// slope and quadratic terms at 0.3.
    #[arg(long, default_value = "0,1,0.3;0,2,0.3")]
    phi_offdiag: String,
}

impl ScenarioArgs {
    fn build(&self) -> Result<ScenarioConfig> {
        let expand = |values: &[f64], len: usize| -> Vec<f64> {
            if values.len() == 1 {
                vec![values[0]; len]
            } else {
                values.to_vec()
            }
        };
        let scenario = self
            .scenario
            .as_deref()
            .ok_or_else(|| anyhow!("--scenario is required"))?;
        Ok(match scenario {
            "categorical" => {
                let sigma2 = expand(&self.sigma2_b, self.q.len());
                if sigma2.len() != self.q.len() {
                    bail!("--sigma2-b must have one value per --q entry");
                }
                ScenarioConfig::Categorical {
                    cardinalities: self.q.clone(),
                    sigma2_b: sigma2,
                }
            }
            "longitudinal" => {
                if self.q.len() != 1 {
                    bail!("longitudinal scenario takes a single --q (subject count)");
                }
                let diag = expand(&self.sigma2_b, self.poly_terms);
                if diag.len() != self.poly_terms {
                    bail!("--sigma2-b must have one value per polynomial term");
                }
                ScenarioConfig::Longitudinal {
                    subjects: self.q[0],
                    poly_terms: self.poly_terms,
                    phi_diag: diag,
                    phi_offdiag: parse_offdiag(&self.phi_offdiag, self.poly_terms)?,
                }
            }
            "spatial" => {
                if self.q.len() != 1 || self.sigma2_b.len() != 1 {
                    bail!("spatial scenario takes a single --q and --sigma2-b");
                }
                ScenarioConfig::Spatial {
                    locations: self.q[0],
                    length_scale_sq: self.l2,
                    sigma2_b: self.sigma2_b[0],
                }
            }
            "spatial-categorical" => {
                if self.q.len() < 2 {
                    bail!("spatial-categorical needs --q location-count,cardinality,...");
                }
                let sigma2 = expand(&self.sigma2_b, self.q.len());
                if sigma2.len() != self.q.len() {
                    bail!("--sigma2-b must match the layout of --q");
                }
                ScenarioConfig::SpatialCategorical {
                    locations: self.q[0],
                    length_scale_sq: self.l2,
                    sigma2_b_spatial: sigma2[0],
                    cardinalities: self.q[1..].to_vec(),
                    sigma2_b: sigma2[1..].to_vec(),
                }
            }
            other => bail!("unknown scenario '{other}'"),
        })
    }
}

fn parse_offdiag(text: &str, poly_terms: usize) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for part in text.split(';').filter(|p| !p.trim().is_empty()) {
        let fields: Vec<&str> = part.split(',').collect();
        if fields.len() != 3 {
            bail!("bad --phi-offdiag entry '{part}' (expected i,j,value)");
        }
        let i: usize = fields[0].trim().parse().context("phi-offdiag index")?;
        let j: usize = fields[1].trim().parse().context("phi-offdiag index")?;
        let v: f64 = fields[2].trim().parse().context("phi-offdiag value")?;
        if i < poly_terms && j < poly_terms {
            out.push((i, j, v));
        }
    }
    Ok(out)
}

#[derive(Args, Clone)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 30)]
    p: usize,
    #[arg(long, default_value_t = 1)]
    d: usize,
    /// random | future | unknown
    #[arg(long, default_value = "random")]
    split: String,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for train.csv and test.csv.
    #[arg(long)]
    out: PathBuf,
    /// Also write the true stacked random-effect matrix (truth_b.csv).
    #[arg(long)]
    with_truth: bool,
}

fn parse_split(name: &str) -> Result<SplitMode> {
    Ok(match name {
        "random" => SplitMode::Random,
        "future" => SplitMode::Future,
        "unknown" => SplitMode::Unknown,
        other => bail!("unknown split mode '{other}'"),
    })
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long, value_delimiter = ',', default_value = "1000,500")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1000)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Prior variance for all random-effect terms.
    #[arg(long, default_value_t = 1.0)]
    sigma2_b_prior: f64,
    /// Kernel length scale assumed during training (spatial).
    #[arg(long, default_value_t = 1.0)]
    train_l2: f64,
    /// Noise variance of the spatial posterior computation.
    #[arg(long, default_value_t = 1.0)]
    noise_var: f64,
    /// Row-subsample cap for the spatial posterior.
    #[arg(long, default_value_t = 10_000)]
    n_samp: usize,
    /// Disable centering on the training feature means.
    #[arg(long)]
    no_center: bool,
}

impl TrainArgs {
    fn settings(&self) -> TrainSettings {
        let mut s = TrainSettings::new(self.d);
        s.hidden = self.hidden.clone();
        s.beta = self.beta;
        s.epochs = self.epochs;
        s.batch_size = self.batch_size;
        s.learning_rate = self.learning_rate;
        s.sigma2_b_prior = self.sigma2_b_prior;
        s.train_length_scale_sq = self.train_l2;
        s.noise_var = self.noise_var;
        s.posterior_sample_rows = self.n_samp;
        s.center = !self.no_center;
        s
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    train: PathBuf,
    /// categorical | longitudinal | spatial | spatial-categorical
    #[arg(long)]
    scenario: String,
    /// Polynomial terms for longitudinal CSVs.
    #[arg(long, default_value_t = 2)]
    poly_terms: usize,
    #[arg(long)]
    method: Method,
    #[command(flatten)]
    train_args: TrainArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Where to write the model checkpoint (JSON).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Skip z-scoring the features on the training moments.
    #[arg(long)]
    no_standardize: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// The training CSV the model was fitted on (rebuilds level maps).
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 2)]
    poly_terms: usize,
    #[arg(long)]
    no_standardize: bool,
    /// Append a metric row to this results CSV.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Write the extracted random-effect matrix to this CSV.
    #[arg(long)]
    export_b_hat: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment spec; overrides every other flag except --out,
    /// --seed and --replicates.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 30)]
    p: usize,
    #[arg(long, default_value = "random")]
    split: String,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[command(flatten)]
    train_args: TrainArgs,
    /// Comma-separated method list.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "pca-ignore,vae-ignore,lmmvae"
    )]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 5)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    if let Err(e) = dispatch(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Fit(args) => fit(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Run(args) => run(args),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut config = SimConfig::new(args.n, args.p, args.d, args.scenario.build()?);
    config.split = parse_split(&args.split)?;
    config.test_fraction = args.test_fraction;
    config.seed = args.seed;
    let ds = generate(&config, &mut Rng::new(config.seed))
        .map_err(|e| anyhow!("simulation failed: {e}"))?;

    std::fs::create_dir_all(&args.out)?;
    let train = DataMatrix::with_default_names(ds.x_train());
    save_dataset(&args.out.join("train.csv"), &train, &ds.scenario_train())?;
    let test = DataMatrix::with_default_names(ds.x_test());
    save_dataset(&args.out.join("test.csv"), &test, &ds.scenario_test())?;
    if args.with_truth {
        let mut file = File::create(args.out.join("truth_b.csv"))?;
        let names: Vec<String> = (0..args.p).map(|j| format!("b{j}")).collect();
        writeln!(file, "{}", names.join(","))?;
        for i in 0..ds.truth.b.rows() {
            let fields: Vec<String> = ds.truth.b.row(i).iter().map(|v| format!("{v}")).collect();
            writeln!(file, "{}", fields.join(","))?;
        }
    }
    println!(
        "wrote {} training and {} test rows to {}",
        ds.train_idx.len(),
        ds.test_idx.len(),
        args.out.display()
    );
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let decl = ScenarioDecl::parse(&args.scenario, args.poly_terms)?;
    let (data, scenario) = load_dataset(&args.train, decl, !args.no_standardize)?;
    let settings = args.train_args.settings();
    let checkpoint = fit_method(args.method, &data.x, &scenario, &settings, args.seed)
        .map_err(|e| anyhow!("fitting {}: {e}", args.method))?;
    save_checkpoint(&args.checkpoint, &checkpoint)?;
    let (_, x_hat) = lmmvae_cli::experiment::reconstruct_with(&checkpoint, &data.x, &scenario)
        .map_err(|e| anyhow!("reconstructing: {e}"))?;
    let train_mse = recon_mse(&data.x, &x_hat).map_err(|e| anyhow!("{e}"))?;
    println!(
        "fitted {} on {} rows; training recon_mse {train_mse:.4}; checkpoint {}",
        args.method,
        data.x.rows(),
        args.checkpoint.display()
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let decl = ScenarioDecl::parse(&args.scenario, args.poly_terms)?;
    let ((_, _), (test, test_sc)) = lmmvae_cli::dataset::load_dataset_pair(
        &args.train,
        &args.test,
        decl,
        !args.no_standardize,
    )?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let (mse, nll) = lmmvae_cli::experiment::evaluate_method(&checkpoint, &test.x, &test_sc)
        .map_err(|e| anyhow!("evaluating: {e}"))?;
    println!("test recon_mse {mse:.6}");
    println!("test nll {nll:.6}");

    if let Some(path) = &args.export_b_hat {
        if let ModelCheckpoint::Lmmvae(model) = &checkpoint {
            let mut file = File::create(path)?;
            let names: Vec<String> = (0..model.b_hat.cols()).map(|j| format!("b{j}")).collect();
            writeln!(file, "{}", names.join(","))?;
            for i in 0..model.b_hat.rows() {
                let fields: Vec<String> =
                    model.b_hat.row(i).iter().map(|v| format!("{v}")).collect();
                writeln!(file, "{}", fields.join(","))?;
            }
        } else {
            bail!("--export-b-hat needs an lmmvae checkpoint");
        }
    }

    if let Some(path) = &args.results {
        let method = match &checkpoint {
            ModelCheckpoint::Pca(_) => "pca-ignore",
            ModelCheckpoint::PcaOhe(_) => "pca-ohe",
            ModelCheckpoint::Vae(m) => match m.config.handling {
                lmmvae_core::baselines::AuxHandling::Ignore => "vae-ignore",
                lmmvae_core::baselines::AuxHandling::OneHot => "vae-ohe",
                lmmvae_core::baselines::AuxHandling::Embed => "vae-embed",
            },
            ModelCheckpoint::Lmmvae(m) => match m.config.variant {
                lmmvae_core::model::EncoderVariant::TwoEncoders => "lmmvae",
                lmmvae_core::model::EncoderVariant::SingleEncoder => "lmmvae-i",
            },
        };
        let d = match &checkpoint {
            ModelCheckpoint::Pca(m) => m.loadings.cols(),
            ModelCheckpoint::PcaOhe(m) => m.pca.loadings.cols(),
            ModelCheckpoint::Vae(m) => m.config.latent_dim,
            ModelCheckpoint::Lmmvae(m) => m.config.latent_dim,
        };
        append_results(
            path,
            &[MetricRow {
                method: method.to_owned(),
                scenario: format!("csv-{}", args.scenario),
                latent_dim: d,
                params: args.test.display().to_string(),
                seed: 0,
                recon_mse: mse,
                nll,
                runtime_s: 0.0,
                spec_hash: String::new(),
            }],
        )?;
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let spec = if let Some(path) = &args.config {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut spec: ExperimentSpec =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(out) = args.out {
            spec.output_dir = Some(out);
        }
        spec
    } else {
        let scenario = &args.scenario;
        if scenario.scenario.is_none() {
            bail!("either --config or --scenario is required");
        }
        let mut sim = SimConfig::new(args.n, args.p, args.train_args.d, scenario.build()?);
        sim.split = parse_split(&args.split)?;
        sim.test_fraction = args.test_fraction;
        ExperimentSpec {
            methods: args.methods.clone(),
            source: DataSource::Simulate { sim },
            train: args.train_args.settings(),
            replicates: args.replicates,
            seed: args.seed,
            output_dir: args.out,
        }
    };

    let table = run_experiment(&spec)?;
    println!(
        "{:<12} {:>12} {:>10} {:>12} {:>10} {:>5}",
        "method", "recon_mse", "se", "nll", "se", "reps"
    );
    for agg in table.aggregate() {
        println!(
            "{:<12} {:>12.4} {:>10.4} {:>12.4} {:>10.4} {:>5}",
            agg.method,
            agg.mean_recon_mse,
            agg.se_recon_mse,
            agg.mean_nll,
            agg.se_nll,
            agg.replicates
        );
    }
    if let Some(dir) = &spec.output_dir {
        println!("rows appended to {}", dir.join("results.csv").display());
    }
    Ok(())
}
