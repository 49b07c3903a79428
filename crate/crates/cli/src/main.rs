use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use lasdi::checkpoint::{load_model, save_model, CheckpointMeta};
use lasdi::config::RunConfig;
use lasdi::data::{load_snapshots, save_snapshots, ParameterPoint, SnapshotSet, Trajectory};
use lasdi::dynamics::xi_csv;
use lasdi::fom::{Burgers, FullOrderModel};
use lasdi::greedy::{train, LOG_HEADER};
use lasdi::report::{benchmark, heatmap, heatmap_csv, StdOptions};
use lasdi::rom::relative_errors;
use lasdi::LasdiError;

#[derive(Parser)]
#[command(name = "lasdi", version, about = "Latent space dynamics identification for parameterized PDEs")]
struct Cli {
    /// Run configuration (TOML); every key has a default.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set loss.beta2=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Seed for every random choice; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker cap. All commands currently run on one thread.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the full-order model on a parameter grid and save the snapshots.
    FomRun {
        #[arg(long, value_enum, default_value = "train")]
        grid: Grid,
        /// Amplitude range `lo,hi`; replaces the first entries of `fom.mu_min`/`fom.mu_max`.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        a_range: Option<Vec<f64>>,
        /// Width range `lo,hi`; replaces the second entries.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        w_range: Option<Vec<f64>>,
        /// Points per parameter dimension for the chosen grid.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        /// Grid nodes; also resizes the first autoencoder layer.
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        tmax: Option<f64>,
        /// Output file; defaults to `paths.data`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the parameter grid as CSV.
        #[arg(long)]
        grid_csv: Option<PathBuf>,
    },
    /// Train on `paths.data`; writes `paths.model` and the epoch log `paths.log`.
    Train,
    /// Predict the solution at one parameter point and save it as a snapshot file.
    Predict {
        /// Comma-separated parameter values.
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        mu: Vec<f64>,
        /// Also write the pointwise std (`<out>.std.lsdi`) from this many GP draws.
        #[arg(long)]
        samples: Option<usize>,
        /// Snapshot file holding the true trajectory at `--mu`; adds `<out>.errors.csv`.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Defaults to `prediction.lsdi` in `paths.out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Max relative error (and optionally max std) over the test grid.
    Heatmap {
        /// Snapshot file with a trajectory for every test grid point.
        #[arg(long)]
        truth: PathBuf,
        /// Add the max-std column using `greedy.n_samples` GP draws.
        #[arg(long)]
        std: bool,
        /// Defaults to `heatmap.csv` in `paths.out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time FOM solves against mean-only ROM predictions.
    Benchmark {
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        mu: Vec<f64>,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
        repeats: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Numeric(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Io(_) => 4,
        }
    }
}

impl From<LasdiError> for Failure {
    fn from(e: LasdiError) -> Self {
        let msg = e.to_string();
        if e.is_numeric() {
            Failure::Numeric(msg)
        } else if matches!(e, LasdiError::Io(_) | LasdiError::Format(_)) {
            Failure::Io(msg)
        } else {
            Failure::Config(msg)
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::parse_with_overrides(&text, &overrides)?;
    let extra = fom_flags(&cli.command, &cfg)?;
    if extra.is_empty() {
        return Ok(cfg);
    }
    overrides.extend(extra);
    Ok(RunConfig::parse_with_overrides(&text, &overrides)?)
}

/// `fom-run` flags rewritten as config overrides, so they go through the
/// same validation as `--set`.
fn fom_flags(cmd: &Command, cfg: &RunConfig) -> CliResult<Vec<String>> {
    let Command::FomRun {
        grid,
        a_range,
        w_range,
        counts,
        nx,
        dt,
        tmax,
        ..
    } = cmd
    else {
        return Ok(Vec::new());
    };
    fn list<T: ToString>(v: &[T]) -> String {
        format!("[{}]", v.iter().map(T::to_string).collect::<Vec<_>>().join(","))
    }
    let mut out = Vec::new();
    let (mut lo, mut hi) = (cfg.mu_min.clone(), cfg.mu_max.clone());
    for (i, range) in [a_range, w_range].into_iter().enumerate() {
        if let Some(r) = range {
            if r.len() != 2 {
                return Err(Failure::Config(format!("a range needs two values lo,hi, got {}", r.len())));
            }
            if i >= lo.len() {
                return Err(Failure::Config(format!("the parameter box has only {} dimensions", lo.len())));
            }
            lo[i] = r[0];
            hi[i] = r[1];
        }
    }
    if a_range.is_some() || w_range.is_some() {
        out.push(format!("fom.mu_min={}", list(&lo)));
        out.push(format!("fom.mu_max={}", list(&hi)));
    }
    if let Some(c) = counts {
        let key = match grid {
            Grid::Train => "fom.train_grid",
            Grid::Test => "fom.test_grid",
        };
        out.push(format!("{key}={}", list(c)));
    }
    if let Some(n) = nx {
        let mut layers = cfg.ae_layers.clone();
        layers[0] = *n;
        out.push(format!("fom.n_x={n}"));
        out.push(format!("ae.layers={}", list(&layers)));
    }
    if let Some(v) = dt {
        out.push(format!("fom.dt={v:?}"));
    }
    if let Some(v) = tmax {
        out.push(format!("fom.t_max={v:?}"));
    }
    Ok(out)
}

fn need_file(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Io(format!("input file {} not found", p.display())))
    }
}

fn need_parent(p: &Path) -> CliResult<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() && !d.is_dir() => {
            Err(Failure::Io(format!("output directory {} does not exist", d.display())))
        }
        _ => Ok(()),
    }
}

fn point(mu: &[f64], cfg: &RunConfig) -> CliResult<ParameterPoint> {
    if mu.len() != cfg.mu_min.len() {
        return Err(Failure::Config(format!("--mu needs {} values, got {}", cfg.mu_min.len(), mu.len())));
    }
    Ok(ParameterPoint::new(mu.to_vec())?)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let paths = &cfg.paths;
    match &cli.command {
        Command::FomRun { grid, out, grid_csv, .. } => {
            let out = out.as_ref().unwrap_or(&paths.data);
            need_parent(out)?;
            if let Some(p) = grid_csv {
                need_parent(p)?;
            }
            let grid = match grid {
                Grid::Train => cfg.train_grid()?,
                Grid::Test => cfg.test_grid()?,
            };
            if let Some(p) = grid_csv {
                fs::write(p, grid.to_csv())?;
            }
            let fom = Burgers::new(cfg.fom.clone())?;
            let set = fom.solve_all(grid.points())?;
            save_snapshots(&set, out)?;
            println!("wrote {} trajectories to {}", set.len(), out.display());
        }
        Command::Train => {
            need_file(&paths.data)?;
            for p in [&paths.model, &paths.log] {
                need_parent(p)?;
            }
            if let Some(d) = &paths.checkpoints {
                fs::create_dir_all(d)?;
            }
            let tc = cfg.train_config()?;
            let data = load_snapshots(&paths.data)?;
            let fom = Burgers::new(cfg.fom.clone())?;
            let candidates = cfg.test_grid()?;
            let mut log = BufWriter::new(fs::File::create(&paths.log)?);
            writeln!(log, "{LOG_HEADER}")?;
            let out = train(&tc, data, &fom, candidates.points(), &mut |r| {
                writeln!(log, "{}", r.csv_row())?;
                if let Some(a) = &r.acquisition {
                    eprintln!("epoch {}: acquired {:?} (score {:e})", a.epoch, a.param.values(), a.score);
                }
                Ok(())
            })?;
            log.flush()?;
            let meta = CheckpointMeta {
                epoch: tc.n_epochs as u64,
                seed: cfg.seed,
            };
            save_model(&out.model, meta, &paths.model)?;
            fs::create_dir_all(&paths.out)?;
            let xi_path = paths.out.join("xi.csv");
            fs::write(&xi_path, xi_csv(&out.model.params, &out.model.xis, &out.model.library)?)?;
            if let Some(last) = out.log.epochs.last() {
                println!("final loss {:e}", last.loss.total);
            }
            println!("wrote {} ({} training points) and {}", paths.model.display(), out.data.len(), xi_path.display());
        }
        Command::Predict { mu, samples, truth, out } => {
            let out = out.clone().unwrap_or_else(|| paths.out.join("prediction.lsdi"));
            need_file(&paths.model)?;
            need_parent(&out)?;
            if let Some(t) = truth {
                need_file(t)?;
            }
            let (model, _) = load_model(&paths.model)?;
            let mu = point(mu, &cfg)?;
            let truth = match truth {
                Some(t) => {
                    let set = load_snapshots(t)?;
                    let found = set.trajectories().iter().find(|tr| tr.param().same_as(&mu)).cloned();
                    let msg = || format!("{} has no trajectory at mu = {:?}", t.display(), mu.values());
                    Some(found.ok_or_else(|| Failure::Config(msg()))?)
                }
                None => None,
            };
            let fom = Burgers::new(cfg.fom.clone())?;
            let u0 = fom.initial_condition(&mu)?;
            let pred = match samples {
                Some(n) => model.predict_with_uncertainty(&mu, &u0, *n, cfg.seed)?,
                None => model.predict(&mu, &u0)?,
            };
            save_field(&out, pred.mean.clone(), model.dt, &mu)?;
            if let Some(std) = pred.std() {
                save_field(&out.with_extension("std.lsdi"), std, model.dt, &mu)?;
                println!("max std {:e}, {} failed draws", pred.max_std(), pred.failed_draws);
            }
            if let Some(t) = truth {
                let errs = relative_errors(&pred.mean, t.states())?;
                let mut csv = String::from("t,rel_error\n");
                for (n, e) in errs.iter().enumerate() {
                    csv.push_str(&format!("{},{e}\n", n as f64 * model.dt));
                }
                fs::write(out.with_extension("errors.csv"), csv)?;
                println!("max relative error {:.3}%", 100.0 * errs.iter().fold(0.0, |a: f64, &b| a.max(b)));
            }
            println!("wrote {}", out.display());
        }
        Command::Heatmap { truth, std, out } => {
            let out = &out.clone().unwrap_or_else(|| paths.out.join("heatmap.csv"));
            need_file(&paths.model)?;
            need_file(truth)?;
            need_parent(out)?;
            let (model, _) = load_model(&paths.model)?;
            let truth = load_snapshots(truth)?;
            let opts = std.then_some(StdOptions {
                n_samples: cfg.n_samples,
                seed: cfg.seed,
            });
            let rows = heatmap(&model, &cfg.test_grid()?, &truth, opts)?;
            fs::write(out, heatmap_csv(&rows))?;
            let worst = rows.iter().map(|r| r.max_rel_error_pct).fold(0.0, f64::max);
            println!("worst max relative error {worst:.3}%, wrote {}", out.display());
        }
        Command::Benchmark { mu, repeats } => {
            need_file(&paths.model)?;
            let (model, _) = load_model(&paths.model)?;
            let mu = point(mu, &cfg)?;
            let fom = Burgers::new(cfg.fom.clone())?;
            let report = benchmark(&model, &fom, &mu, *repeats as usize)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

/// A predicted field as a one-trajectory snapshot file.
fn save_field(path: &Path, u: DMatrix<f64>, dt: f64, mu: &ParameterPoint) -> CliResult<()> {
    let set = SnapshotSet::new(vec![Trajectory::new(u, dt, mu.clone())?])?;
    Ok(save_snapshots(&set, path)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Config(m) | Failure::Numeric(m) | Failure::Io(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
