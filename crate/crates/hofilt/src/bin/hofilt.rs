//! Command-line front end: convergence experiments, coefficient-table dumps,
//! single-path estimation, the Kalman-Bucy oracle, and path simulation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 inadmissible mesh (unless
//! overridden), 4 numerical diagnostic (overflow or degenerate weights).

use clap::{Parser, Subcommand};
use hofilt::bench::{self, ReportFormat};
use hofilt::expr;
use hofilt::filter::{self, FilterError, OrderSpec};
use hofilt::likelihood::{self, LikelihoodError};
use hofilt::model::{build_table, load_model, ModelError, PosysModel};
use hofilt::partition::Partition;
use hofilt::simulate::{self, FineGrid, Measure};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "hofilt", version, about = "High-order discretizations of the filtering likelihood")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the convergence-order experiment described by a config file.
    Converge {
        #[arg(long)]
        config: PathBuf,
        /// Report destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// csv | json
        #[arg(long, default_value = "csv")]
        format: String,
        /// Worker threads (library default when omitted).
        #[arg(long)]
        threads: Option<usize>,
        /// Override both seeds deterministically.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the coefficient table `L^a h_i` of a model.
    Coeffs {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        order: usize,
        /// Sample max |L^r h_i| over the box LO:HI (optionally LO:HI:SAMPLES)
        /// and warn when it exceeds the model's lh_bound.
        #[arg(long, allow_hyphen_values = true)]
        lh_box: Option<String>,
    },
    /// Ensemble estimate of rho(phi), rho(1), pi(phi) on one observation path.
    Estimate {
        #[arg(long)]
        model: PathBuf,
        /// Scheme order, or `ref` for the fine-grid reference weight.
        #[arg(long)]
        order: String,
        /// Partition intervals.
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Ensemble size.
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        /// X-ensemble seed.
        #[arg(long)]
        seed: u64,
        /// Observation-path seed (defaults to a salt of --seed).
        #[arg(long)]
        y_seed: Option<u64>,
        #[arg(long, default_value = "x1")]
        phi: String,
        /// Fine sub-steps per coarse interval.
        #[arg(long, default_value_t = 256)]
        refinement: usize,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        /// Observation measure: `p` or `p-tilde`.
        #[arg(long, default_value = "p-tilde")]
        measure: String,
        /// Print the per-interval breakdown of the first particle.
        #[arg(long)]
        breakdown: bool,
        /// Evaluate even when the mesh violates the order's threshold.
        #[arg(long)]
        allow_inadmissible: bool,
    },
    /// Exact conditional mean/covariance for a linear-Gaussian model.
    Kalman {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        refinement: usize,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long, default_value = "p-tilde")]
        measure: String,
    },
    /// Generate one path bundle and write the binary dump.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        path_index: u64,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        refinement: usize,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long, default_value = "p")]
        measure: String,
    },
}

const CONFIG_ERROR: u8 = 2;
const MESH_ERROR: u8 = 3;
const NUMERIC_ERROR: u8 = 4;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: CONFIG_ERROR,
            message: message.into(),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::config(e.to_string())
    }
}

impl From<simulate::SimulateError> for Failure {
    fn from(e: simulate::SimulateError) -> Self {
        Failure::config(e.to_string())
    }
}

impl From<LikelihoodError> for Failure {
    fn from(e: LikelihoodError) -> Self {
        let code = match &e {
            LikelihoodError::InadmissibleMesh { .. } => MESH_ERROR,
            LikelihoodError::XiOverflow { .. } => NUMERIC_ERROR,
            _ => CONFIG_ERROR,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<FilterError> for Failure {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::Likelihood(inner) => inner.into(),
            FilterError::DegenerateWeights { .. } => Failure {
                code: NUMERIC_ERROR,
                message: e.to_string(),
            },
            other => Failure::config(other.to_string()),
        }
    }
}

impl From<bench::BenchError> for Failure {
    fn from(e: bench::BenchError) -> Self {
        match e {
            bench::BenchError::Filter(inner) => inner.into(),
            other => Failure::config(other.to_string()),
        }
    }
}

fn parse_measure(s: &str) -> Result<Measure, Failure> {
    match s {
        "p" | "P" => Ok(Measure::P),
        "p-tilde" | "ptilde" | "P-tilde" => Ok(Measure::PTilde),
        other => Err(Failure::config(format!(
            "unknown measure `{other}` (expected `p` or `p-tilde`)"
        ))),
    }
}

fn load_model_warned(path: &PathBuf) -> Result<PosysModel, Failure> {
    let (model, _) = load_model(path)?;
    for w in model.boundedness_warnings() {
        eprintln!("warning: {w}; convergence guarantees assume bounded coefficients");
    }
    Ok(model)
}

fn salted(seed: u64) -> u64 {
    seed ^ 0x517c_c1b7_2722_0a95
}

fn main() -> ExitCode {
    // die quietly when a downstream pipe closes (e.g. `coeffs | head`)
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Converge {
            config,
            out,
            format,
            threads,
            seed,
        } => {
            let format: ReportFormat = format
                .parse()
                .map_err(|e: String| Failure::config(e))?;
            let (mut cfg, model_path) = bench::ConvergenceConfig::from_path(&config)?;
            if let Some(s) = seed {
                cfg.seeds.x_seed = s;
                cfg.seeds.y_seed = salted(s);
            }
            let (model, bytes) = load_model(&model_path)?;
            for w in model.boundedness_warnings() {
                eprintln!("warning: {w}; convergence guarantees assume bounded coefficients");
            }
            let report = match threads {
                Some(k) => {
                    let pool = rayon::ThreadPoolBuilder::new()
                        .num_threads(k)
                        .build()
                        .map_err(|e| Failure::config(e.to_string()))?;
                    pool.install(|| bench::run_convergence(&cfg, &model, &model_path, &bytes))?
                }
                None => bench::run_convergence(&cfg, &model, &model_path, &bytes)?,
            };
            for f in &report.fits {
                match &f.fit {
                    Some(fit) => eprintln!(
                        "m={}: slope {:.4} (se {:.4}, {} points)",
                        f.m, fit.slope, fit.se, fit.points
                    ),
                    None => eprintln!("m={}: no fit ({})", f.m, f.note),
                }
            }
            bench::emit(&report, format, out.as_deref())?;
            Ok(())
        }
        Command::Coeffs {
            model,
            order,
            lh_box,
        } => {
            let model = load_model_warned(&model)?;
            let table = build_table(&model, order)?;
            for i in 0..=model.d_y {
                for alpha in table.indices() {
                    let e = table.lookup(i, alpha).unwrap();
                    println!("L^{alpha} h{i} = {e}");
                }
            }
            if let Some(spec) = lh_box {
                let parts: Vec<&str> = spec.split(':').collect();
                let bad = || Failure::config(format!("--lh-box expects LO:HI[:SAMPLES], got `{spec}`"));
                if parts.len() < 2 || parts.len() > 3 {
                    return Err(bad());
                }
                let lo: f64 = parts[0].parse().map_err(|_| bad())?;
                let hi: f64 = parts[1].parse().map_err(|_| bad())?;
                let samples: usize = match parts.get(2) {
                    Some(s) => s.parse().map_err(|_| bad())?,
                    None => 4096,
                };
                if !(lo < hi) {
                    return Err(bad());
                }
                let mut rng = hofilt::simulate::substream_rng(0, 0, 3);
                let sup = model.sample_lh_sup(lo, hi, samples, &mut rng);
                println!("sampled max |L^r h_i| over [{lo}, {hi}]^{}: {sup}", model.d_x);
                if sup > model.lh_bound {
                    eprintln!(
                        "warning: sampled bound {sup} exceeds lh_bound {}; delta0 is optimistic",
                        model.lh_bound
                    );
                }
            }
            Ok(())
        }
        Command::Estimate {
            model,
            order,
            n,
            paths,
            seed,
            y_seed,
            phi,
            refinement,
            t,
            measure,
            breakdown,
            allow_inadmissible,
        } => {
            let model = load_model_warned(&model)?;
            let order: OrderSpec = order.parse().map_err(Failure::config)?;
            let measure = parse_measure(&measure)?;
            let phi = expr::parse(&phi, model.d_x)
                .map_err(|e| Failure::config(format!("phi: {e}")))?;
            let y_seed = y_seed.unwrap_or_else(|| salted(seed));
            let partition = Partition::uniform(n, t);
            let grid = Arc::new(FineGrid::new(partition.clone(), refinement)?);
            let y_path = simulate::generate(&model, grid, y_seed, 0, measure);
            if breakdown {
                if let OrderSpec::Order(m) = order {
                    let table = build_table(&model, m)?;
                    let signal = simulate::generate_signal(&model, &y_path.grid, seed, 0);
                    let view = y_path.view_with_signal(&signal);
                    let res = likelihood::xi_bar(
                        &model,
                        &table,
                        &view,
                        &partition,
                        m,
                        allow_inadmissible,
                    )?;
                    println!("# per-interval breakdown, particle 0, order {m}");
                    println!("# j  xi2(j)  mu(j)  Gamma(mu(j))  xi_bar(j)");
                    for (j, c) in res.per_interval.iter().enumerate() {
                        match &c.parts {
                            Some(p) => println!(
                                "{j} {} {} {} {}",
                                p.second_order, p.raw_mu, p.tamed_mu, c.xi_bar
                            ),
                            None => println!("{j} {} - - {}", c.xi_bar, c.xi_bar),
                        }
                    }
                }
            }
            let est = filter::estimate(
                &model,
                &phi,
                &y_path,
                &partition,
                order,
                paths,
                seed,
                y_seed,
                allow_inadmissible,
            )?;
            println!("{}", serde_json::to_string_pretty(&est).unwrap());
            Ok(())
        }
        Command::Kalman {
            model,
            seed,
            n,
            refinement,
            t,
            measure,
        } => {
            let model = load_model_warned(&model)?;
            let measure = parse_measure(&measure)?;
            let coeffs = filter::certify_linear(&model).map_err(Failure::from)?;
            let grid = Arc::new(FineGrid::new(Partition::uniform(n, t), refinement)?);
            let y_path = simulate::generate(&model, grid, seed, 0, measure);
            let state = filter::kalman_bucy(&coeffs, &y_path);
            let mean: Vec<f64> = state.mean.iter().copied().collect();
            let cov: Vec<Vec<f64>> = (0..state.covariance.nrows())
                .map(|i| state.covariance.row(i).iter().copied().collect())
                .collect();
            let record = serde_json::json!({
                "mean": mean,
                "covariance": cov,
                "log_evidence": state.log_evidence,
                "n": n,
                "refinement": refinement,
                "t": t,
                "seed": seed,
            });
            println!("{}", serde_json::to_string_pretty(&record).unwrap());
            Ok(())
        }
        Command::Simulate {
            model,
            dump,
            seed,
            path_index,
            n,
            refinement,
            t,
            measure,
        } => {
            let model = load_model_warned(&model)?;
            let measure = parse_measure(&measure)?;
            let grid = Arc::new(FineGrid::new(Partition::uniform(n, t), refinement)?);
            let bundle = simulate::generate(&model, grid, seed, path_index, measure);
            let file = std::fs::File::create(&dump)
                .map_err(|e| Failure::config(format!("{}: {e}", dump.display())))?;
            simulate::dump_bundle(&bundle, std::io::BufWriter::new(file))?;
            let record = serde_json::json!({
                "dump": dump.display().to_string(),
                "n_steps": bundle.grid.n_steps(),
                "d_x": bundle.d_x,
                "d_v": bundle.d_v,
                "d_y": bundle.d_y,
                "seed": seed,
                "path_index": path_index,
            });
            println!("{}", serde_json::to_string_pretty(&record).unwrap());
            Ok(())
        }
    }
}
