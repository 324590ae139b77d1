use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ppes::acquisition::{AcquisitionContext, ContextConfig};
use ppes::baselines::{PolicyConfig, POLICY_NAMES};
use ppes::gp::{sample_hyperparameters, Dataset, Domain, GpHyper, HyperPosteriorSamples};
use ppes::harness::{aggregate, run_repeats, too_many_aborted, write_outputs, ExperimentConfig};
use ppes::objectives::OBJECTIVE_NAMES;
use ppes::oracle::{
    ground_truth_ppes, ppes_curve, ppes_surface, prior_draw_problem, spearman, validation_hyper, OracleConfig,
};
use ppes::{Error, Result};

#[derive(Parser)]
#[command(name = "ppes", version, about = "Batch Bayesian optimization by parallel predictive entropy search")]
struct Cli {
    /// Worker threads for parallel repeats and surface evaluation.
    #[arg(long, global = true, env = "PPES_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run repeated optimization experiments and report median immediate regret.
    Run(RunArgs),
    /// Compare the EP acquisition with its rejection-sampling ground truth on a
    /// one-dimensional GP draw.
    Oracle(OracleArgs),
    /// Dump the acquisition of a one-dimensional dataset on a grid.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "branin", value_parser = clap::builder::PossibleValuesParser::new(OBJECTIVE_NAMES))]
    objective: String,
    #[arg(long, default_value = "ppes", value_parser = clap::builder::PossibleValuesParser::new(POLICY_NAMES))]
    policy: String,
    #[arg(long, default_value_t = 3)]
    q: usize,
    #[arg(long, default_value_t = 15)]
    iters: usize,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "m-samples", default_value_t = 10)]
    m_samples: usize,
    #[arg(long = "init-count", default_value_t = 5)]
    init_count: usize,
    #[arg(long = "noise-sd")]
    noise_sd: Option<f64>,
    /// Output path stem; `.csv` and `.json` are appended.
    #[arg(long, default_value = "results/run")]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "grid-n", default_value_t = 50)]
    grid_n: usize,
    #[arg(long = "n-paths", default_value_t = 200_000)]
    n_paths: usize,
    #[arg(long = "m-samples", default_value_t = 200)]
    m_samples: usize,
    #[arg(long, default_value_t = 5)]
    observations: usize,
    /// Directory for `data.csv`, `ground_truth.csv` and `ep.csv`.
    #[arg(long, default_value = "results/oracle")]
    out: PathBuf,
}

#[derive(Args)]
struct VisualizeArgs {
    /// CSV with columns `x,y`; inputs must lie in [0, 1].
    #[arg(long)]
    data: PathBuf,
    /// Batch size, 1 or 2.
    #[arg(long, default_value_t = 2)]
    q: usize,
    #[arg(long = "grid-n", default_value_t = 50)]
    grid_n: usize,
    #[arg(long = "m-samples", default_value_t = 50)]
    m_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fix the squared lengthscale instead of sampling hyperparameters.
    #[arg(long = "lengthscale-sq", requires_all = ["amplitude_sq", "noise_var"])]
    lengthscale_sq: Option<f64>,
    #[arg(long = "amplitude-sq")]
    amplitude_sq: Option<f64>,
    #[arg(long = "noise-var")]
    noise_var: Option<f64>,
    #[arg(long, default_value = "results/acquisition.csv")]
    out: PathBuf,
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(File::create(path)?)
}

fn run(args: RunArgs) -> Result<bool> {
    let cfg = ExperimentConfig {
        objective: args.objective,
        policy: PolicyConfig::from_name(&args.policy)?,
        q: args.q,
        iters: args.iters,
        repeats: args.repeats,
        seed: args.seed,
        m_samples: args.m_samples,
        init_count: args.init_count,
        noise_sd: args.noise_sd,
        ..Default::default()
    };
    let traces = run_repeats(&cfg)?;
    let report = aggregate(&traces)?;
    write_outputs(&args.out, &cfg, &traces, &report)?;
    println!("t\tmedian_regret\tband_sd");
    for (t, (m, s)) in report.median.iter().zip(&report.band_sd).enumerate() {
        println!("{}\t{m:.6}\t{s:.6}", t + 1);
    }
    println!("completed {} aborted {}", report.completed, report.aborted);
    Ok(!too_many_aborted(&report))
}

fn oracle(args: OracleArgs) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let hyper = validation_hyper();
    let data = prior_draw_problem(&hyper, args.observations, &mut rng)?;
    std::fs::create_dir_all(&args.out)?;
    write_data(&data, &args.out.join("data.csv"))?;

    let hypers = HyperPosteriorSamples {
        samples: vec![hyper.clone(); args.m_samples],
        log_posterior: vec![0.0; args.m_samples],
    };
    let ctx = AcquisitionContext::build(&data, &hypers, 2, &ContextConfig::default(), &mut rng)?;
    let ep = ppes_surface(&ctx, args.grid_n)?;
    ep.write_csv(create(&args.out.join("ep.csv"))?)?;

    let cfg = OracleConfig {
        grid_n: args.grid_n,
        n_paths: args.n_paths,
        ..Default::default()
    };
    let truth = ground_truth_ppes(&data, &hyper, &cfg, &mut rng)?;
    truth.surface.write_csv(create(&args.out.join("ground_truth.csv"))?)?;

    let rho = spearman(ep.values.as_slice(), truth.surface.values.as_slice())?;
    println!("ep argmax {:?}", ep.argmax());
    println!("ground truth argmax {:?}", truth.surface.argmax());
    println!("spearman {rho:.4}");
    if truth.excluded > 0 {
        println!("maximizer locations excluded for too few paths: {}", truth.excluded);
    }
    Ok(true)
}

fn write_data(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["x", "y"])?;
    for (x, y) in data.inputs().iter().zip(data.outputs()) {
        w.serialize((x[0], y))?;
    }
    w.flush()?;
    Ok(())
}

fn read_data(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)?;
    let mut data = Dataset::new(Domain::unit(1));
    for row in r.deserialize() {
        let (x, y): (f64, f64) = row?;
        data.push(vec![x], y)?;
    }
    Ok(data)
}

fn visualize(args: VisualizeArgs) -> Result<bool> {
    if !(1..=2).contains(&args.q) {
        return Err(Error::InvalidArgument("visualize supports batches of 1 or 2 points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let data = read_data(&args.data)?;
    let (std_data, _) = data.standardized();
    let hypers = match (args.lengthscale_sq, args.amplitude_sq, args.noise_var) {
        (Some(l2), Some(a2), Some(n2)) => {
            let h = GpHyper::isotropic(data.output_mean(), a2, l2.sqrt(), 1, n2)?;
            HyperPosteriorSamples {
                samples: vec![h; args.m_samples],
                log_posterior: vec![0.0; args.m_samples],
            }
        }
        _ => sample_hyperparameters(&std_data, args.m_samples, &mut rng)?,
    };
    let fixed = args.lengthscale_sq.is_some();
    let ctx_data = if fixed { &data } else { &std_data };
    let ctx = AcquisitionContext::build(ctx_data, &hypers, args.q, &ContextConfig::default(), &mut rng)?;
    let out = create(&args.out)?;
    if args.q == 1 {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "value"])?;
        for row in ppes_curve(&ctx, args.grid_n)? {
            w.serialize(row)?;
        }
        w.flush()?;
    } else {
        ppes_surface(&ctx, args.grid_n)?.write_csv(out)?;
    }
    println!("wrote {}", args.out.display());
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("could not size the thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::Oracle(a) => oracle(a),
        Command::Visualize(a) => visualize(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("more than 10% of the repeats were aborted");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
