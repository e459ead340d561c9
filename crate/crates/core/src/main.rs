//! Command-line front end: validate problem files, inspect switching costs
//! and jump quadratures, calibrate barriers, run the solver, compute
//! reference values, and drive the verification experiments.
//!
//! Exit codes: `0` success, `2` a data assumption failed (the message names
//! the tag, for example `(O1)`), `1` runtime failure, `64` usage errors and
//! malformed input files. All output is deterministic for fixed spec,
//! configuration, and seed; CSV files are byte-stable across reruns.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

use switchpide::barrier::{calibrate_c, lower_barrier, upper_barrier, BarrierParams};
use switchpide::model::{validate_assumptions, GridSpec, ProblemSpec, SamplePlan};
use switchpide::nonlocal::{build_quadrature, QuadratureConfig};
use switchpide::oracle::{dp_oracle, mc_oracle, DpOracleConfig, McOracleConfig};
use switchpide::report::{fmt_float, OutputDir, Table};
use switchpide::solver::{solve, SolverConfig};
use switchpide::switchgraph::triangle_closure;
use switchpide::verify::{
    comparison_experiment, continuous_dependence_experiment, regularity_experiment,
    PerturbationPlan,
};
use switchpide::Error;

#[derive(Parser)]
#[command(
    name = "switchpide",
    version,
    about = "Finite-difference solver and verification harness for optimal-switching \
             integro-differential systems"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct SpecArg {
    /// Problem description file (JSON; schema in the README)
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
}

#[derive(Args)]
struct GridArg {
    /// Space-time resolution NX,NT (NX nodes per axis, NT time levels)
    #[arg(long, value_name = "NX,NT", default_value = "101,101")]
    grid: String,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check the data assumptions (F2, F3, O1, O2, O3, G) on a sample sweep
    Validate {
        #[command(flatten)]
        spec: SpecArg,
        /// Number of sample points/pairs
        #[arg(long, default_value_t = SamplePlan::DEFAULT_COUNT)]
        samples: usize,
    },
    /// Evaluate the switching costs and their cheapest-chain closure
    CloseCosts {
        #[command(flatten)]
        spec: SpecArg,
        /// Evaluation point "x0[,x1],t"; repeatable (default: origin at t=0)
        #[arg(long = "at", value_name = "X,T")]
        at: Vec<String>,
        /// Output directory (CSV + manifest); prints CSV to stdout if absent
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Dump the jump-measure quadrature nodes and weights per mode
    QuadratureReport {
        #[command(flatten)]
        spec: SpecArg,
        /// Quadrature moment tolerance
        #[arg(long, value_name = "TOL")]
        tol: Option<f64>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Print upper/lower barrier values on a time slice of the grid
    Barrier {
        #[command(flatten)]
        spec: SpecArg,
        #[command(flatten)]
        grid: GridArg,
        /// Barrier constant (default: the calibration floor)
        #[arg(long)]
        c: Option<f64>,
        /// Barrier steepness (>= 1)
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Anchor point "y0[,y1]" (default: origin)
        #[arg(long, value_name = "Y")]
        anchor: Option<String>,
        /// Anchor mode index
        #[arg(long, default_value_t = 0)]
        anchor_mode: usize,
        /// Slice time (default 0; the anchor sits at the terminal time)
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Find the smallest barrier constant with nonnegative residual
    Calibrate {
        #[command(flatten)]
        spec: SpecArg,
        #[command(flatten)]
        grid: GridArg,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
    },
    /// Run the finite-difference scheme and write per-mode value surfaces
    Solve {
        #[command(flatten)]
        spec: SpecArg,
        #[command(flatten)]
        grid: GridArg,
        /// Output directory for CSV surfaces, diagnostics, and manifest
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Implicitness of the diffusion stage (1 = fully implicit)
        #[arg(long, default_value_t = 1.0)]
        theta: f64,
        /// Obstacle/complementarity tolerance
        #[arg(long, value_name = "TOL")]
        tol: Option<f64>,
        /// Cap on worker threads
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Reference values from exhaustive enumeration or Monte Carlo
    Oracle {
        #[command(subcommand)]
        which: OracleCmd,
    },
    /// Empirical checks of the dependence, ordering, and regularity estimates
    Verify {
        #[command(subcommand)]
        which: VerifyCmd,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Deterministic dynamic programming over coarse mode sequences
    Dp {
        #[command(flatten)]
        spec: SpecArg,
        /// Initial state "x0[,x1]"
        #[arg(long, value_name = "X", default_value = "0")]
        x0: String,
        /// Number of switching segments
        #[arg(long, default_value_t = 12)]
        segments: usize,
        /// Runge-Kutta substeps per segment
        #[arg(long, default_value_t = 32)]
        substeps: usize,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Monte Carlo estimate for single-mode problems
    Mc {
        #[command(flatten)]
        spec: SpecArg,
        /// Initial state "x0[,x1]"
        #[arg(long, value_name = "X", default_value = "0")]
        x0: String,
        /// Initial time
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        /// Simulation time step
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// RNG seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pair each path with its antithetic mirror
        #[arg(long)]
        antithetic: bool,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum VerifyCmd {
    /// Continuous dependence: solve base and perturbed systems, report norms
    Cd {
        #[command(flatten)]
        spec: SpecArg,
        /// Perturbation plan file (JSON: magnitude, which, direction)
        #[arg(long, value_name = "FILE")]
        plan: PathBuf,
        #[command(flatten)]
        grid: GridArg,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Space-Lipschitz and time-Hölder moduli of the computed solution
    Reg {
        #[command(flatten)]
        spec: SpecArg,
        #[command(flatten)]
        grid: GridArg,
        /// Slack subtracted from the 1/2 target slope
        #[arg(long, default_value_t = 0.05)]
        slack: f64,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Ordering check under a pointwise increase of f and/or g
    Cmp {
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long, value_name = "FILE")]
        plan: PathBuf,
        #[command(flatten)]
        grid: GridArg,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

/// Error classes carrying the process exit code.
enum CliError {
    /// Bad flags or malformed input files: exit 64.
    Usage(String),
    /// A data assumption failed: exit 2, message names the tag.
    Validation(String),
    /// Everything else: exit 1.
    Runtime(String),
}

/// Map library errors from a computation (not input parsing) to exit classes.
fn classify(e: Error) -> CliError {
    match e {
        Error::Assumption { .. } | Error::NegativeLoop(_) => CliError::Validation(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(64);
        }
    };
    match run(cli.cmd) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(64);
        }
        Err(CliError::Validation(msg)) => {
            eprintln!("validation failure: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}

fn load_spec(path: &Path) -> CliResult<(ProblemSpec, Vec<u8>)> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| CliError::Usage(format!("{} is not UTF-8", path.display())))?;
    let spec = ProblemSpec::from_json_str(text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok((spec, bytes))
}

fn load_plan(path: &Path) -> CliResult<PerturbationPlan> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: bad perturbation plan: {e}", path.display())))
}

fn parse_floats(s: &str, expect: usize, what: &str) -> CliResult<Vec<f64>> {
    let vals: Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
    let vals =
        vals.map_err(|e| CliError::Usage(format!("cannot parse {what} `{s}`: {e}")))?;
    if vals.len() != expect {
        return Err(CliError::Usage(format!(
            "{what} `{s}` has {} entries, expected {expect}",
            vals.len()
        )));
    }
    Ok(vals)
}

fn parse_grid(arg: &str, spec: &ProblemSpec) -> CliResult<GridSpec> {
    let parts: Vec<&str> = arg.split(',').collect();
    if parts.len() != 2 {
        return Err(CliError::Usage(format!(
            "grid `{arg}` must be NX,NT (nodes per axis, time levels)"
        )));
    }
    let nx: usize = parts[0]
        .trim()
        .parse()
        .map_err(|e| CliError::Usage(format!("bad NX in `{arg}`: {e}")))?;
    let nt: usize = parts[1]
        .trim()
        .parse()
        .map_err(|e| CliError::Usage(format!("bad NT in `{arg}`: {e}")))?;
    GridSpec::new(spec.domain.clone(), vec![nx; spec.n], nt)
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn init_threads(threads: Option<usize>) {
    if let Some(t) = threads {
        // A second builder call (tests, repeated init) leaves the first
        // global pool in place, which is fine.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
}

/// Either stream a table to stdout or write it (plus manifest) to a dir.
fn deliver(
    out: Option<&Path>,
    command: &str,
    spec_path: &Path,
    spec_bytes: &[u8],
    config: serde_json::Value,
    files: &[(&str, String)],
) -> CliResult<()> {
    match out {
        None => {
            for (_, contents) in files {
                print!("{contents}");
            }
            Ok(())
        }
        Some(dir) => {
            let mut outdir = OutputDir::create(
                dir,
                command,
                &spec_path.display().to_string(),
                spec_bytes,
                config,
            )
            .map_err(classify)?;
            for (name, contents) in files {
                outdir.write_file(name, contents).map_err(classify)?;
            }
            let manifest = outdir.finish().map_err(classify)?;
            eprintln!("wrote {}", manifest.display());
            Ok(())
        }
    }
}

fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::Validate { spec, samples } => {
            let (spec, _) = load_spec(&spec.spec)?;
            let plan = SamplePlan::build(&spec.domain, spec.t_end, samples);
            let report = validate_assumptions(&spec, &plan).map_err(classify)?;
            for check in &report.checks {
                println!(
                    "[{}] {}  empirical {:.6e} vs bound {:.6e}  ({}; worst: {})",
                    check.tag,
                    if check.pass { "PASS" } else { "FAIL" },
                    check.empirical,
                    check.bound,
                    check.description,
                    check.worst
                );
            }
            if report.pass() {
                println!("all {} assumption groups passed", report.checks.len());
                Ok(())
            } else {
                let first = report.first_failure().expect("some check failed");
                Err(CliError::Validation(format!(
                    "({}) {}: empirical {:.6e} vs bound {:.6e}, worst at {}",
                    first.tag, first.description, first.empirical, first.bound, first.worst
                )))
            }
        }

        Cmd::CloseCosts { spec, at, out } => {
            let spec_path = spec.spec.clone();
            let (spec, bytes) = load_spec(&spec.spec)?;
            let points = if at.is_empty() {
                vec![(vec![0.0; spec.n], 0.0)]
            } else {
                let mut pts = Vec::new();
                for s in &at {
                    let v = parse_floats(s, spec.n + 1, "evaluation point")?;
                    pts.push((v[..spec.n].to_vec(), v[spec.n]));
                }
                pts
            };
            let closed = triangle_closure(&spec.costs);
            let mut cols: Vec<String> = (0..spec.n).map(|k| format!("x{k}")).collect();
            cols.extend(["t", "i", "j", "cost", "closed_cost"].map(String::from));
            let colrefs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
            let mut table = Table::new(&colrefs);
            for (x, t) in &points {
                let c = spec.costs.matrix_at(x, *t).map_err(classify)?;
                let cc = closed.matrix_at(x, *t).map_err(classify)?;
                for i in 0..spec.m {
                    for j in 0..spec.m {
                        let mut row: Vec<String> = x.iter().map(|v| fmt_float(*v)).collect();
                        row.push(fmt_float(*t));
                        row.push(i.to_string());
                        row.push(j.to_string());
                        row.push(fmt_float(c[i * spec.m + j]));
                        row.push(fmt_float(cc[i * spec.m + j]));
                        table.push_row(row);
                    }
                }
            }
            let config = serde_json::json!({ "at": at });
            deliver(
                out.as_deref(),
                "close-costs",
                &spec_path,
                &bytes,
                config,
                &[("costs.csv", table.to_csv())],
            )
        }

        Cmd::QuadratureReport { spec, tol, out } => {
            let spec_path = spec.spec.clone();
            let (spec, bytes) = load_spec(&spec.spec)?;
            let mut qcfg = QuadratureConfig::default();
            if let Some(t) = tol {
                qcfg.tol = t;
            }
            let mut ell_max = 1;
            let mut quads = Vec::new();
            for comp in &spec.jumps {
                let q = build_quadrature(&comp.measure, qcfg.clone()).map_err(classify)?;
                for node in q.nodes().iter().chain(q.corr_nodes()) {
                    ell_max = ell_max.max(node.z.len());
                }
                quads.push(q);
            }
            let mut cols: Vec<String> = vec!["mode".into(), "role".into()];
            cols.extend((0..ell_max).map(|k| format!("z{k}")));
            cols.push("weight".into());
            let colrefs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
            let mut table = Table::new(&colrefs);
            for (i, q) in quads.iter().enumerate() {
                for (role, nodes) in [("jump", q.nodes()), ("correction", q.corr_nodes())] {
                    for node in nodes {
                        let mut row = vec![i.to_string(), role.to_string()];
                        for k in 0..ell_max {
                            row.push(node.z.get(k).map(|v| fmt_float(*v)).unwrap_or_default());
                        }
                        row.push(fmt_float(node.w));
                        table.push_row(row);
                    }
                }
                eprintln!(
                    "mode {i}: intensity {:.6e}, inner second moment {:.6e}, \
                     outer {}-moment {:.6e}",
                    q.intensity(),
                    q.second_moment_inner(),
                    spec.p,
                    q.p_moment_outer(spec.p)
                );
            }
            let config = serde_json::json!({ "tol": qcfg.tol, "kappa": qcfg.kappa });
            deliver(
                out.as_deref(),
                "quadrature-report",
                &spec_path,
                &bytes,
                config,
                &[("quadrature.csv", table.to_csv())],
            )
        }

        Cmd::Barrier {
            spec,
            grid,
            c,
            lambda,
            anchor,
            anchor_mode,
            time,
            out,
        } => {
            let spec_path = spec.spec.clone();
            let (spec, bytes) = load_spec(&spec.spec)?;
            let gr = parse_grid(&grid.grid, &spec)?;
            let y = match &anchor {
                Some(s) => parse_floats(s, spec.n, "anchor")?,
                None => vec![0.0; spec.n],
            };
            let c = c.unwrap_or(spec.k_bound * 2f64.powi(spec.p as i32 + 1));
            let params = BarrierParams::new(
                c,
                lambda,
                y,
                spec.t_end,
                anchor_mode,
                spec.terminal.g.clone(),
                spec.p,
            )
            .map_err(|e| CliError::Usage(e.to_string()))?;
            let mut cols: Vec<String> = (0..spec.n).map(|k| format!("x{k}")).collect();
            cols.extend(["mode", "upper", "lower"].map(String::from));
            let colrefs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
            let mut table = Table::new(&colrefs);
            for idx in 0..gr.num_nodes() {
                let x = gr.node(idx);
                for j in 0..spec.m {
                    let up = upper_barrier(&params, &spec.costs, j, &x[..spec.n], time)
                        .map_err(classify)?;
                    let lo =
                        lower_barrier(&params, j, &x[..spec.n], time).map_err(classify)?;
                    let mut row: Vec<String> =
                        x[..spec.n].iter().map(|v| fmt_float(*v)).collect();
                    row.push(j.to_string());
                    row.push(fmt_float(up));
                    row.push(fmt_float(lo));
                    table.push_row(row);
                }
            }
            let config = serde_json::json!({
                "c": c, "lambda": lambda, "anchor": anchor, "anchor_mode": anchor_mode,
                "time": time, "grid": grid.grid,
            });
            deliver(
                out.as_deref(),
                "barrier",
                &spec_path,
                &bytes,
                config,
                &[("barrier.csv", table.to_csv())],
            )
        }

        Cmd::Calibrate { spec, grid, lambda } => {
            let (spec, _) = load_spec(&spec.spec)?;
            let gr = parse_grid(&grid.grid, &spec)?;
            let report = calibrate_c(&spec, &gr, lambda).map_err(classify)?;
            println!("c_star {}", fmt_float(report.c_star));
            println!("floor {}", fmt_float(report.floor));
            println!("worst_residual {}", fmt_float(report.worst_residual));
            println!("worst_node {}", report.worst_node);
            println!("evaluations {}", report.evaluations);
            Ok(())
        }

        Cmd::Solve {
            spec,
            grid,
            out,
            theta,
            tol,
            threads,
        } => {
            init_threads(threads);
            let spec_path = spec.spec.clone();
            let (spec, bytes) = load_spec(&spec.spec)?;
            let gr = parse_grid(&grid.grid, &spec)?;
            let mut cfg = SolverConfig::new(gr);
            cfg.theta = theta;
            if let Some(t) = tol {
                cfg.obstacle_tol = t;
            }
            cfg.validate(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
            let result = solve(&spec, &cfg).map_err(classify)?;

            let config = serde_json::to_value(&cfg).expect("config serializes");
            let mut files: Vec<(String, String)> = Vec::new();
            let mut cols: Vec<String> = (0..spec.n).map(|k| format!("x{k}")).collect();
            cols.extend(["t", "u", "residual", "binding_mode"].map(String::from));
            let colrefs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
            for i in 0..spec.m {
                let mut table = Table::new(&colrefs);
                for k in 0..cfg.grid.nt {
                    let t = cfg.grid.time(spec.t_end, k);
                    for node in 0..cfg.grid.num_nodes() {
                        let x = cfg.grid.node(node);
                        let mut row: Vec<String> =
                            x[..spec.n].iter().map(|v| fmt_float(*v)).collect();
                        row.push(fmt_float(t));
                        row.push(fmt_float(result.u.get(i, k, node)));
                        row.push(fmt_float(result.residual.get(i, k, node)));
                        row.push(match result.binding_at(i, k, node) {
                            Some(j) => j.to_string(),
                            None => "-1".to_string(),
                        });
                        table.push_row(row);
                    }
                }
                files.push((format!("u_mode{i}.csv"), table.to_csv()));
            }
            let mut diag =
                serde_json::to_value(&result.diagnostics).expect("diagnostics serialize");
            diag["grid"] = serde_json::json!({ "nx": cfg.grid.nx, "nt": cfg.grid.nt });
            files.push((
                "diagnostics.json".to_string(),
                format!("{}\n", serde_json::to_string_pretty(&diag).unwrap()),
            ));
            let refs: Vec<(&str, String)> =
                files.iter().map(|(n, c)| (n.as_str(), c.clone())).collect();
            deliver(Some(&out), "solve", &spec_path, &bytes, config, &refs)?;
            println!(
                "solved {} modes on {:?} x {} nodes; dt {:.3e} (ceiling {:.3e}), \
                 obstacle sweeps max {}, linear iterations max {}",
                spec.m,
                cfg.grid.nx,
                cfg.grid.nt,
                result.diagnostics.dt,
                result.diagnostics.cfl_required_dt,
                result.diagnostics.obstacle_sweeps_max,
                result.diagnostics.linear_iters_max,
            );
            Ok(())
        }

        Cmd::Oracle { which } => match which {
            OracleCmd::Dp {
                spec,
                x0,
                segments,
                substeps,
                out,
            } => {
                let spec_path = spec.spec.clone();
                let (spec, bytes) = load_spec(&spec.spec)?;
                let x0 = parse_floats(&x0, spec.n, "initial state")?;
                let cfg = DpOracleConfig {
                    nt_coarse: segments,
                    substeps,
                };
                let value = dp_oracle(&spec, &x0, &cfg).map_err(classify)?;
                let mut table = Table::new(&["mode", "value", "best_sequence"]);
                for (i, v) in value.values.iter().enumerate() {
                    let seq: Vec<String> =
                        value.best_sequences[i].iter().map(|m| m.to_string()).collect();
                    println!("mode {i}: value {} via {}", fmt_float(*v), seq.join(" "));
                    table.push_row(vec![i.to_string(), fmt_float(*v), seq.join(" ")]);
                }
                println!("config segments {segments} substeps {substeps}");
                let config = serde_json::json!({
                    "x0": x0, "segments": segments, "substeps": substeps,
                });
                if out.is_some() {
                    deliver(
                        out.as_deref(),
                        "oracle dp",
                        &spec_path,
                        &bytes,
                        config,
                        &[("oracle_dp.csv", table.to_csv())],
                    )?;
                }
                Ok(())
            }
            OracleCmd::Mc {
                spec,
                x0,
                t0,
                paths,
                dt,
                seed,
                antithetic,
                threads,
                out,
            } => {
                init_threads(threads);
                let spec_path = spec.spec.clone();
                let (spec, bytes) = load_spec(&spec.spec)?;
                let x0 = parse_floats(&x0, spec.n, "initial state")?;
                let cfg = McOracleConfig {
                    paths,
                    dt_sim: dt,
                    seed,
                    antithetic,
                    ..McOracleConfig::default()
                };
                let est = mc_oracle(&spec, &x0, t0, &cfg).map_err(classify)?;
                println!("estimate {}", fmt_float(est.estimate));
                println!("std_error {}", fmt_float(est.std_error));
                println!("paths {}", est.paths);
                println!("seed {}", est.seed);
                println!("config t0 {t0} dt {dt} antithetic {antithetic}");
                if out.is_some() {
                    let mut table =
                        Table::new(&["estimate", "std_error", "paths", "seed"]);
                    table.push_row(vec![
                        fmt_float(est.estimate),
                        fmt_float(est.std_error),
                        est.paths.to_string(),
                        est.seed.to_string(),
                    ]);
                    let config = serde_json::json!({
                        "x0": x0, "t0": t0, "paths": paths, "dt": dt,
                        "seed": seed, "antithetic": antithetic,
                    });
                    deliver(
                        out.as_deref(),
                        "oracle mc",
                        &spec_path,
                        &bytes,
                        config,
                        &[("oracle_mc.csv", table.to_csv())],
                    )?;
                }
                Ok(())
            }
        },

        Cmd::Verify { which } => match which {
            VerifyCmd::Cd {
                spec,
                plan,
                grid,
                threads,
                out,
            } => {
                init_threads(threads);
                let spec_path = spec.spec.clone();
                let (spec, bytes) = load_spec(&spec.spec)?;
                let plan_val = load_plan(&plan)?;
                let gr = parse_grid(&grid.grid, &spec)?;
                let cfg = SolverConfig::new(gr);
                let report = continuous_dependence_experiment(&spec, &plan_val, &cfg)
                    .map_err(classify)?;
                let body = serde_json::to_string_pretty(&report).unwrap();
                println!("{body}");
                if out.is_some() {
                    let config = serde_json::json!({
                        "plan": plan.display().to_string(), "grid": grid.grid,
                    });
                    deliver(
                        out.as_deref(),
                        "verify cd",
                        &spec_path,
                        &bytes,
                        config,
                        &[("cd_report.json", format!("{body}\n"))],
                    )?;
                }
                Ok(())
            }
            VerifyCmd::Reg {
                spec,
                grid,
                slack,
                threads,
                out,
            } => {
                init_threads(threads);
                let spec_path = spec.spec.clone();
                let (spec, bytes) = load_spec(&spec.spec)?;
                let gr = parse_grid(&grid.grid, &spec)?;
                let cfg = SolverConfig::new(gr);
                let report = regularity_experiment(&spec, &cfg, slack).map_err(classify)?;
                println!("lipschitz_constant {}", fmt_float(report.lipschitz_constant));
                println!("time_slope {}", fmt_float(report.time_slope));
                println!("pass {}", report.pass);
                if out.is_some() {
                    let mut table = Table::new(&["gap", "modulus"]);
                    for (g, m) in report.gaps.iter().zip(&report.moduli) {
                        table.push_row(vec![fmt_float(*g), fmt_float(*m)]);
                    }
                    let body = serde_json::to_string_pretty(&report).unwrap();
                    let config = serde_json::json!({ "grid": grid.grid, "slack": slack });
                    deliver(
                        out.as_deref(),
                        "verify reg",
                        &spec_path,
                        &bytes,
                        config,
                        &[
                            ("reg_report.json", format!("{body}\n")),
                            ("moduli.csv", table.to_csv()),
                        ],
                    )?;
                }
                Ok(())
            }
            VerifyCmd::Cmp {
                spec,
                plan,
                grid,
                threads,
                out,
            } => {
                init_threads(threads);
                let spec_path = spec.spec.clone();
                let (spec, bytes) = load_spec(&spec.spec)?;
                let plan_val = load_plan(&plan)?;
                let gr = parse_grid(&grid.grid, &spec)?;
                let cfg = SolverConfig::new(gr);
                let report =
                    comparison_experiment(&spec, &plan_val, &cfg).map_err(classify)?;
                println!("worst_violation {}", fmt_float(report.worst_violation));
                println!("sup_diff {}", fmt_float(report.sup_diff));
                if out.is_some() {
                    let body = serde_json::to_string_pretty(&report).unwrap();
                    let config = serde_json::json!({
                        "plan": plan.display().to_string(), "grid": grid.grid,
                    });
                    deliver(
                        out.as_deref(),
                        "verify cmp",
                        &spec_path,
                        &bytes,
                        config,
                        &[("cmp_report.json", format!("{body}\n"))],
                    )?;
                }
                Ok(())
            }
        },
    }
}
