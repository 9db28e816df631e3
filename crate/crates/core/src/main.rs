use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use esdirk_ocp::bench::{
    emit_charts, emit_report, read_stats, run_low_tol_experiment, run_single, run_sweep,
    write_trajectory, BenchError, ReportFormat, RunConfig, RunStats, ALL_MODES, BENCHMARK_STEPS,
};
use esdirk_ocp::{Method, SensitivityMode};

#[derive(Parser)]
#[command(
    name = "esdirk-ocp",
    version,
    about = "ESDIRK sensitivity benchmark on the quadruple tank OCP"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one OCP and write its statistics and trajectory.
    Solve(Common),
    /// Sweep methods, sensitivity modes and step counts.
    Sweep(Common),
    /// Ts = 2 s, N = 10, tighter SQP, QP and Newton tolerances.
    Lowtol(Common),
    /// Re-emit tables and SVG charts from a JSON statistics file.
    Report {
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
        #[arg(long)]
        no_walltime: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Comma-separated for sweeps; defaults to all methods there.
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    /// iterated, direct or base; comma-separated for sweeps.
    #[arg(long, value_delimiter = ',')]
    sens: Vec<SensitivityMode>,
    /// Integration steps per control interval; comma-separated for sweeps.
    #[arg(long, value_delimiter = ',')]
    steps: Vec<usize>,
    #[arg(long)]
    ts: Option<f64>,
    #[arg(long)]
    nc: Option<usize>,
    #[arg(long)]
    tol_sqp: Option<f64>,
    #[arg(long)]
    tol_qp: Option<f64>,
    #[arg(long)]
    tol_step: Option<f64>,
    #[arg(long)]
    abs: Option<f64>,
    #[arg(long)]
    rel: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    max_sqp_iter: Option<usize>,
    /// Scale the initial BFGS Hessian instead of starting from the identity.
    #[arg(long)]
    scale_h0: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
    #[arg(long)]
    no_walltime: bool,
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn base_config(&self) -> Result<RunConfig, BenchError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(&m) = self.method.first() {
            c.method = m;
        }
        if let Some(&s) = self.sens.first() {
            c.sens = s;
        }
        if let Some(&n) = self.steps.first() {
            c.n = n;
        }
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { c.$field = v; })* };
        }
        set!(
            ts,
            nc,
            tol_sqp,
            tol_qp,
            tol_step,
            abs,
            rel,
            tau,
            max_sqp_iter
        );
        c.scale_h0 |= self.scale_h0;
        c.validate()?;
        Ok(c)
    }

    fn methods(&self) -> Vec<Method> {
        if self.method.is_empty() {
            Method::ALL.to_vec()
        } else {
            self.method.clone()
        }
    }

    fn modes(&self) -> Vec<SensitivityMode> {
        if self.sens.is_empty() {
            ALL_MODES.to_vec()
        } else {
            self.sens.clone()
        }
    }

    fn jobs(&self) -> usize {
        self.jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    }
}

fn summary(s: &RunStats) -> String {
    format!(
        "{} {} N={}: converged={} sqp={} qp={} kkt={:e} f={} jx={} ju={} lu={}",
        s.config.method,
        s.config.sens,
        s.config.n,
        s.converged,
        s.sqp_iterations,
        s.qp_iterations_total,
        s.kkt_final,
        s.f_evals,
        s.jac_x_evals,
        s.jac_u_evals,
        s.lu_factorizations
    )
}

/// Runs a table-producing experiment, appending each finished row to
/// `<stem>.jsonl` before the sorted report is written.
fn table_run(
    args: &Common,
    stem: &str,
    run: impl FnOnce(&(dyn Fn(&RunStats) + Send + Sync)) -> Result<Vec<RunStats>, BenchError>,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out).map_err(|source| BenchError::Io {
        path: args.out.clone(),
        source,
    })?;
    let jsonl_path = args.out.join(format!("{stem}.jsonl"));
    let jsonl = File::create(&jsonl_path).map_err(|source| BenchError::Io {
        path: jsonl_path.clone(),
        source,
    })?;
    let sink = Mutex::new(jsonl);
    let on_row = |row: &RunStats| {
        eprintln!("{}", summary(row));
        let mut f = sink.lock().expect("jsonl sink");
        let line = serde_json::to_string(row).expect("stats serialize");
        let _ = writeln!(f, "{line}");
    };
    let rows = run(&on_row)?;
    let files = emit_report(&rows, args.format, &args.out, stem, !args.no_walltime)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Solve(args) => {
            let config = args.base_config()?;
            let (stats, traj) = run_single(&config)?;
            println!("{}", summary(&stats));
            std::fs::create_dir_all(&args.out).map_err(|source| BenchError::Io {
                path: args.out.clone(),
                source,
            })?;
            let stem = format!("solve_{}_{}_N{}", config.method, config.sens, config.n);
            let traj_path = args.out.join(format!("{stem}_trajectory.csv"));
            write_trajectory(&traj_path, &traj)?;
            println!("{}", traj_path.display());
            for f in emit_report(&[stats], args.format, &args.out, &stem, !args.no_walltime)? {
                println!("{}", f.display());
            }
        }
        Command::Sweep(args) => {
            let base = args.base_config()?;
            let steps = if args.steps.is_empty() {
                BENCHMARK_STEPS.to_vec()
            } else {
                args.steps.clone()
            };
            let (methods, modes, jobs) = (args.methods(), args.modes(), args.jobs());
            table_run(&args, "sweep", |on_row| {
                run_sweep(&base, &methods, &modes, &steps, jobs, on_row)
            })?;
        }
        Command::Lowtol(args) => {
            let base = args.base_config()?;
            let (methods, modes, jobs) = (args.methods(), args.modes(), args.jobs());
            table_run(&args, "lowtol", |on_row| {
                run_low_tol_experiment(&base, &methods, &modes, jobs, on_row)
            })?;
        }
        Command::Report {
            input,
            out,
            format,
            no_walltime,
        } => {
            let rows = read_stats(&input)?;
            let stem = input
                .file_stem()
                .and_then(|s| s.to_str())
                .map_or("report".to_string(), |s| format!("{s}_report"));
            for f in emit_report(&rows, format, &out, &stem, !no_walltime)?
                .into_iter()
                .chain(emit_charts(&rows, &out)?)
            {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<BenchError>() {
        Some(BenchError::Io { .. }) => 3,
        Some(BenchError::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("esdirk-ocp failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
