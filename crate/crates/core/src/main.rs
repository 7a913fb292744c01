use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use omtfuse::array::{ArrayGeometry, Covariance};
use omtfuse::harness::config::Config;
use omtfuse::harness::render::render_file;
use omtfuse::harness::sweep::{mc_sweep, summarize, write_results_csv, Estimators, Method};
use omtfuse::harness::extract_peaks;
use omtfuse::simulate::{generate_snapshots, sample_covariance, write_snapshots};
use omtfuse::spatial::Resolution;
use omtfuse::spectrum::write_spectrum_csv;

#[derive(Parser, Debug)]
#[command(name = "omtfuse", version, about = "Non-coherent sensor fusion by entropic OMT barycenters")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Grid resolution, `N` or `NXxNY`.
    #[arg(long, global = true, value_parser = parse_resolution)]
    grid_res: Option<Resolution>,
    /// Misalignment angles in degrees, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    angles: Option<Vec<f64>>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Methods, comma separated: proposed, music, mvdr.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_method)]
    methods: Option<Vec<Method>>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate covariances for the configured scenario.
    Simulate {
        /// Use noise-free model covariances instead of sample covariances.
        #[arg(long)]
        exact: bool,
        /// Also write raw snapshots as binary files.
        #[arg(long)]
        dump_snapshots: bool,
    },
    /// Fuse covariances from a `simulate` directory.
    Fuse {
        #[arg(long)]
        input: PathBuf,
    },
    /// Non-coherent MUSIC on a `simulate` directory.
    Music {
        #[arg(long)]
        input: PathBuf,
    },
    /// Non-coherent MVDR on a `simulate` directory.
    Mvdr {
        #[arg(long)]
        input: PathBuf,
    },
    /// Monte-Carlo misalignment sweep.
    McSweep,
    /// Render a spectrum CSV as a grayscale PNG.
    Render {
        #[arg(long)]
        input: PathBuf,
        /// Pixels per grid cell.
        #[arg(long, default_value_t = 8)]
        scale: u32,
    },
}

fn parse_resolution(s: &str) -> Result<Resolution, String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad grid resolution '{s}': {e}"));
    match s.split_once(['x', 'X']) {
        Some((a, b)) => Ok(Resolution::new(parse(a)?, parse(b)?)),
        None => Ok(Resolution::square(parse(s)?)),
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: omtfuse::Error| e.to_string())
}

fn load_config(cli: &Cli, input: Option<&Path>) -> anyhow::Result<Config> {
    let mut cfg = match (&cli.config, input) {
        (Some(p), _) => Config::load(p)?,
        // fall back to the config saved by `simulate`
        (None, Some(dir)) if dir.join("config.toml").exists() => Config::load(&dir.join("config.toml"))?,
        _ => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = cli.epsilon {
        cfg.solver.epsilon = e;
    }
    if let Some(g) = cli.gamma {
        cfg.solver.gamma = g;
    }
    if let Some(r) = cli.grid_res {
        cfg.grid.resolution = r;
    }
    if let Some(a) = &cli.angles {
        cfg.sweep.angles = a.clone();
    }
    if let Some(t) = cli.trials {
        cfg.sweep.trials = t;
    }
    if let Some(m) = &cli.methods {
        cfg.sweep.methods = m.clone();
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> anyhow::Result<File> {
    File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

fn simulate(cli: &Cli, exact: bool, dump: bool) -> anyhow::Result<()> {
    let mut cfg = load_config(cli, None)?;
    cfg.scenario.exact |= exact;
    if let Some(a) = cli.angles.as_ref().and_then(|a| a.first()) {
        cfg.scenario.misalignment_deg = *a;
    }
    let scenario = cfg.scenario()?;
    let grid = cfg.grid()?;
    let out = &cli.out;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;

    let covariances = if cfg.scenario.exact {
        scenario.exact_covariances()?
    } else {
        let x = generate_snapshots(&scenario)?;
        if dump {
            for (j, xj) in x.iter().enumerate() {
                write_snapshots(create(&out.join(format!("array{j}_snapshots.bin")))?, scenario.arrays[j].label(), xj)?;
            }
        }
        x.iter().map(sample_covariance).collect::<omtfuse::Result<Vec<_>>>()?
    };
    grid.write_csv(create(&out.join("grid.csv"))?)?;
    for (j, cov) in covariances.iter().enumerate() {
        scenario.assumed_arrays[j].write_csv(create(&out.join(format!("array{j}_geometry.csv")))?)?;
        scenario.arrays[j].write_csv(create(&out.join(format!("array{j}_true_geometry.csv")))?)?;
        cov.write_csv(create(&out.join(format!("array{j}_covariance.csv")))?)?;
    }
    let mut w = csv::Writer::from_writer(create(&out.join("sources.csv"))?);
    w.write_record(["index", "x", "y", "power"])?;
    for (i, (s, p)) in scenario.sources.iter().zip(&scenario.powers).enumerate() {
        w.write_record([i.to_string(), s.x.to_string(), s.y.to_string(), p.to_string()])?;
    }
    w.flush()?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    println!(
        "wrote {} arrays ({} covariances) to {}",
        covariances.len(),
        if cfg.scenario.exact { "exact" } else { "sample" },
        out.display()
    );
    Ok(())
}

fn read_inputs(dir: &Path, cfg: &Config) -> anyhow::Result<(Vec<ArrayGeometry>, Vec<Covariance>)> {
    let labels: Vec<String> = cfg.nominal_arrays()?.iter().map(|g| g.label().to_string()).collect();
    let mut geoms = Vec::new();
    let mut covs = Vec::new();
    for j in 0.. {
        let gpath = dir.join(format!("array{j}_geometry.csv"));
        if !gpath.exists() {
            break;
        }
        let label = labels.get(j).cloned().unwrap_or_else(|| format!("array{j}"));
        let g = ArrayGeometry::read_csv(&label, open(&gpath)?, cfg.wavelength())
            .with_context(|| format!("reading {}", gpath.display()))?;
        let cpath = dir.join(format!("array{j}_covariance.csv"));
        let c = Covariance::read_csv(open(&cpath)?).with_context(|| format!("reading {}", cpath.display()))?;
        if c.dim() != g.len() {
            bail!(
                "{} is {}x{} but array {j} has {} sensors",
                cpath.display(),
                c.dim(),
                c.dim(),
                g.len()
            );
        }
        geoms.push(g);
        covs.push(c);
    }
    if geoms.is_empty() {
        bail!("no array0_geometry.csv in {}", dir.display());
    }
    Ok((geoms, covs))
}

fn estimate(cli: &Cli, input: &Path, method: Method) -> anyhow::Result<()> {
    let cfg = load_config(cli, Some(input))?;
    let (geoms, covs) = read_inputs(input, &cfg)?;
    let est = Estimators::new(cfg.grid()?, geoms)?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("cannot create {}", cli.out.display()))?;
    let spectrum_path = cli.out.join(format!("spectrum_{method}.csv"));
    let values = if method == Method::Proposed {
        let problem = est.fusion_problem(&covs, &cfg)?;
        let result = omtfuse::fusion::FusionSolver::new(&problem, cfg.solver.options())?.run()?;
        result.write_convergence_log(create(&cli.out.join("convergence.csv"))?)?;
        if !result.converged {
            eprintln!(
                "warning: fusion stopped after {} outer iterations without converging",
                result.outer_iterations()
            );
        }
        println!("outer iterations: {}", result.outer_iterations());
        result.barycenter.as_slice().to_vec()
    } else {
        est.estimate(method, &covs, &cfg)?.values
    };
    write_spectrum_csv(create(&spectrum_path)?, est.grid(), &values)?;
    let peaks = extract_peaks(&values, est.grid(), cfg.methods.n_sources)?;
    for (i, p) in peaks.iter().enumerate() {
        println!("peak {}: ({}, {})", i + 1, p.x, p.y);
    }
    println!("wrote {}", spectrum_path.display());
    Ok(())
}

fn sweep(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli, None)?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("cannot create {}", cli.out.display()))?;
    let results = mc_sweep(&cfg)?;
    let path = cli.out.join("results.csv");
    write_results_csv(create(&path)?, &results, &cfg)?;
    println!("method,angle_deg,mean_error,trials,failures");
    for s in summarize(&results) {
        println!("{},{},{:.6},{},{}", s.method, s.angle_deg, s.mean_error, s.trials, s.failures);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Simulate { exact, dump_snapshots } => simulate(cli, *exact, *dump_snapshots),
        Command::Fuse { input } => estimate(cli, input, Method::Proposed),
        Command::Music { input } => estimate(cli, input, Method::Music),
        Command::Mvdr { input } => estimate(cli, input, Method::Mvdr),
        Command::McSweep => sweep(cli),
        Command::Render { input, scale } => {
            std::fs::create_dir_all(&cli.out).with_context(|| format!("cannot create {}", cli.out.display()))?;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("spectrum");
            let output = cli.out.join(format!("{stem}.png"));
            render_file(input, &output, *scale)?;
            println!("wrote {}", output.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
