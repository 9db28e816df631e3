//! Experiment harness: run configuration, single solves, sweeps over the
//! number of integration steps, the low-tolerance experiment and report
//! files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrator::{NewtonSettings, WorkCounters};
use crate::linalg::Matrix;
use crate::model::{Qts, QtsParameters};
use crate::nlp::{initial_guess, simulate_trajectory, OcpProblem, Setpoint, TrajectoryPoint};
use crate::sensitivity::SensitivityMode;
use crate::sqp::{solve_ocp, SqpFailure, SqpSettings};
use crate::tableau::{make_tableau, Method};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("solver error: {0}")]
    Solver(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Weight matrix given either by its diagonal or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Weight {
    pub fn to_matrix(&self) -> Result<Matrix, BenchError> {
        match self {
            Weight::Diagonal(d) => Ok(Matrix::from_diag(d)),
            Weight::Full(rows) => {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(BenchError::Config("weight matrix must be square".into()));
                }
                Ok(Matrix::from_vec(n, n, rows.concat()))
            }
        }
    }
}

/// One experiment. Every field has a default, so a config file only needs
/// the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub sens: SensitivityMode,
    /// Integration steps per control interval.
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "Ts")]
    pub ts: f64,
    #[serde(rename = "Nc")]
    pub nc: usize,
    #[serde(rename = "Qz")]
    pub qz: Weight,
    #[serde(rename = "Qdu")]
    pub qdu: Weight,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub x0: Vec<f64>,
    pub d: Vec<f64>,
    /// Output reference before and after the switch at half the horizon.
    pub setpoint_before: Vec<f64>,
    pub setpoint_after: Vec<f64>,
    pub u_prev: Vec<f64>,
    /// Constant input of the initial guess.
    pub init_value: f64,
    pub tol_sqp: f64,
    pub tol_qp: f64,
    pub tol_step: f64,
    pub abs: f64,
    pub rel: f64,
    pub tau: f64,
    pub max_sqp_iter: usize,
    /// Scale the initial BFGS Hessian (off: identity).
    pub scale_h0: bool,
    pub qts: QtsParameters,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Esdirk12,
            sens: SensitivityMode::Iterated,
            n: 10,
            ts: 10.0,
            nc: 40,
            qz: Weight::Diagonal(vec![10.0, 10.0]),
            qdu: Weight::Diagonal(vec![0.1, 0.1]),
            u_min: vec![0.0, 0.0],
            u_max: vec![500.0, 500.0],
            x0: vec![7602.7, 11404.0, 1000.0, 1000.0],
            d: vec![0.0, 0.0, 100.0, 100.0],
            setpoint_before: vec![20.0, 30.0],
            setpoint_after: vec![30.0, 20.0],
            u_prev: vec![300.0, 300.0],
            init_value: 300.0,
            tol_sqp: 1e-3,
            tol_qp: 1e-8,
            tol_step: 1e-8,
            abs: 1e-8,
            rel: 1e-8,
            tau: 0.1,
            max_sqp_iter: 200,
            scale_h0: false,
            qts: QtsParameters::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, BenchError> {
        toml::from_str(s).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
            .map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let field =
            |name: &str, msg: &str| Err(BenchError::Config(format!("field '{name}': {msg}")));
        if self.sens == SensitivityMode::None {
            return field("sens", "must be iterated, direct or base");
        }
        if self.n == 0 {
            return field("N", "must be at least 1");
        }
        if self.nc == 0 {
            return field("Nc", "must be at least 1");
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return field("Ts", "must be positive");
        }
        for (name, v) in [
            ("tol_sqp", self.tol_sqp),
            ("tol_qp", self.tol_qp),
            ("tol_step", self.tol_step),
            ("abs", self.abs),
            ("rel", self.rel),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return field(name, "must be positive");
            }
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return field("tau", "must lie in (0, 1]");
        }
        for (name, v, len) in [
            ("x0", &self.x0, 4),
            ("d", &self.d, 4),
            ("u_min", &self.u_min, 2),
            ("u_max", &self.u_max, 2),
            ("u_prev", &self.u_prev, 2),
            ("setpoint_before", &self.setpoint_before, 2),
            ("setpoint_after", &self.setpoint_after, 2),
        ] {
            if v.len() != len {
                return field(name, &format!("expected {len} entries, found {}", v.len()));
            }
        }
        self.qts
            .validate()
            .map_err(|e| BenchError::Config(format!("field 'qts': {e}")))?;
        Ok(())
    }

    pub fn sqp_settings(&self) -> SqpSettings {
        SqpSettings {
            tol_kkt: self.tol_sqp,
            tol_qp: self.tol_qp,
            tol_step: self.tol_step,
            max_sqp_iter: self.max_sqp_iter,
            scale_initial_hessian: self.scale_h0,
            ..SqpSettings::default()
        }
    }

    /// The OCP described by this configuration. `sens = base` selects the
    /// refactorizing Newton strategy, the other modes reuse `M_k`.
    pub fn problem(&self) -> Result<OcpProblem, BenchError> {
        self.validate()?;
        let model = Qts::new(self.qts.clone()).map_err(|e| BenchError::Config(e.to_string()))?;
        let problem = OcpProblem {
            model: Arc::new(model),
            x0: self.x0.clone(),
            ts: self.ts,
            nc: self.nc,
            n_steps: self.n,
            qz: self.qz.to_matrix()?,
            qdu: self.qdu.to_matrix()?,
            u_min: self.u_min.clone(),
            u_max: self.u_max.clone(),
            setpoint: Setpoint::Switch {
                before: self.setpoint_before.clone(),
                after: self.setpoint_after.clone(),
                switch_time: self.ts * self.nc as f64 / 2.0,
            },
            u_prev: self.u_prev.clone(),
            d: self.d.clone(),
            tableau: make_tableau(self.method),
            strategy: self.sens.natural_strategy(),
            mode: self.sens,
            newton: NewtonSettings {
                tau: self.tau,
                abs: self.abs,
                rel: self.rel,
                ..NewtonSettings::default()
            },
        };
        problem
            .validate()
            .map_err(|e| BenchError::Config(e.to_string()))?;
        Ok(problem)
    }
}

/// Outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub config: RunConfig,
    pub converged: bool,
    pub failure_reason: Option<SqpFailure>,
    pub sqp_iterations: usize,
    pub qp_iterations_total: usize,
    pub kkt_final: f64,
    pub f_evals: u64,
    pub jac_x_evals: u64,
    pub jac_u_evals: u64,
    pub lu_factorizations: u64,
    pub newton_iterations: u64,
    pub wall_time_seconds: f64,
}

impl RunStats {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &RunStats) -> bool {
        let mut a = self.clone();
        a.wall_time_seconds = other.wall_time_seconds;
        a == *other
    }

    fn sort_key(&self) -> (Method, SensitivityMode, usize) {
        (self.config.method, self.config.sens, self.config.n)
    }
}

/// Solves the configured OCP from constant inputs `init_value` with the
/// shooting states forward simulated. The counters include that simulation.
pub fn run_single(config: &RunConfig) -> Result<(RunStats, Vec<TrajectoryPoint>), BenchError> {
    let problem = config.problem()?;
    let start = Instant::now();
    let init = vec![config.init_value; problem.nu()];
    let mut stats = RunStats {
        config: config.clone(),
        converged: false,
        failure_reason: Some(SqpFailure::EvaluationFailure),
        sqp_iterations: 0,
        qp_iterations_total: 0,
        kkt_final: f64::INFINITY,
        f_evals: 0,
        jac_x_evals: 0,
        jac_u_evals: 0,
        lu_factorizations: 0,
        newton_iterations: 0,
        wall_time_seconds: 0.0,
    };
    let Ok((w0, sim_counters)) = initial_guess(&problem, &init) else {
        stats.wall_time_seconds = start.elapsed().as_secs_f64();
        return Ok((stats, Vec::new()));
    };
    let r = solve_ocp(&problem, &config.sqp_settings(), w0)
        .map_err(|e| BenchError::Solver(e.to_string()))?;
    stats.wall_time_seconds = start.elapsed().as_secs_f64();
    let c: WorkCounters = r.counters + sim_counters;
    stats.converged = r.converged;
    stats.failure_reason = r.failure_reason;
    stats.sqp_iterations = r.sqp_iterations;
    stats.qp_iterations_total = r.qp_iterations_total;
    stats.kkt_final = r.kkt;
    stats.f_evals = c.f_evals;
    stats.jac_x_evals = c.jac_x_evals;
    stats.jac_u_evals = c.jac_u_evals;
    stats.lu_factorizations = c.lu_factorizations;
    stats.newton_iterations = c.newton_iterations;
    let traj = simulate_trajectory(&problem, &r.w_star).unwrap_or_default();
    Ok((stats, traj))
}

/// The step counts of the benchmark sweep.
pub const BENCHMARK_STEPS: [usize; 10] = [5, 10, 15, 20, 25, 30, 35, 40, 45, 50];

pub const ALL_MODES: [SensitivityMode; 3] = [
    SensitivityMode::Iterated,
    SensitivityMode::Direct,
    SensitivityMode::BaseDirect,
];

/// Runs every `(method, sens, N)` combination on a pool of `jobs` threads.
/// Failed runs become rows; `on_row` sees each row as it finishes (calls are
/// serialized). The returned table is sorted by `(method, sens, N)`.
pub fn run_sweep<F>(
    base: &RunConfig,
    methods: &[Method],
    modes: &[SensitivityMode],
    steps: &[usize],
    jobs: usize,
    on_row: F,
) -> Result<Vec<RunStats>, BenchError>
where
    F: Fn(&RunStats) + Send + Sync,
{
    if steps.is_empty() || methods.is_empty() || modes.is_empty() {
        return Err(BenchError::Config(
            "sweep needs at least one method, mode and N".into(),
        ));
    }
    let mut configs = Vec::new();
    for &method in methods {
        for &sens in modes {
            for &n in steps {
                let c = RunConfig {
                    method,
                    sens,
                    n,
                    ..base.clone()
                };
                c.validate()?;
                configs.push(c);
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| BenchError::Config(e.to_string()))?;
    let sink = Mutex::new(on_row);
    let mut rows: Vec<RunStats> = pool.install(|| {
        configs
            .par_iter()
            .map(|c| {
                let stats = run_single(c).map(|(s, _)| s)?;
                (sink.lock().expect("row sink poisoned"))(&stats);
                Ok(stats)
            })
            .collect::<Result<Vec<_>, BenchError>>()
    })?;
    rows.sort_by_key(RunStats::sort_key);
    Ok(rows)
}

/// `Ts = 2`, `N = 10`, SQP tolerance 1e-6, QP tolerance 1e-10 and Newton
/// tolerances 1e-10, for every requested method and mode.
pub fn low_tol_config(base: &RunConfig) -> RunConfig {
    RunConfig {
        ts: 2.0,
        n: 10,
        tol_sqp: 1e-6,
        tol_qp: 1e-10,
        abs: 1e-10,
        rel: 1e-10,
        ..base.clone()
    }
}

pub fn run_low_tol_experiment<F>(
    base: &RunConfig,
    methods: &[Method],
    modes: &[SensitivityMode],
    jobs: usize,
    on_row: F,
) -> Result<Vec<RunStats>, BenchError>
where
    F: Fn(&RunStats) + Send + Sync,
{
    let cfg = low_tol_config(base);
    run_sweep(&cfg, methods, modes, &[cfg.n], jobs, on_row)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format '{other}' (expected csv or json)")),
        }
    }
}

pub const CSV_HEADER: [&str; 12] = [
    "method",
    "sens",
    "N",
    "converged",
    "sqp_iters",
    "qp_iters",
    "kkt",
    "f_evals",
    "jac_x_evals",
    "jac_u_evals",
    "lu_factorizations",
    "wall_time",
];

/// CSV table with the fixed column order. Reals use scientific notation with
/// round-trip precision; counts are written as integers.
pub fn stats_csv(rows: &[RunStats], include_walltime: bool) -> String {
    let cols = if include_walltime {
        CSV_HEADER.len()
    } else {
        CSV_HEADER.len() - 1
    };
    let mut out = CSV_HEADER[..cols].join(",");
    out.push('\n');
    for r in rows {
        let c = &r.config;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{:e},{},{},{},{}",
            c.method,
            c.sens,
            c.n,
            r.converged,
            r.sqp_iterations,
            r.qp_iterations_total,
            r.kkt_final,
            r.f_evals,
            r.jac_x_evals,
            r.jac_u_evals,
            r.lu_factorizations
        );
        if include_walltime {
            let _ = write!(out, ",{:e}", r.wall_time_seconds);
        }
        out.push('\n');
    }
    out
}

pub fn stats_json(rows: &[RunStats], include_walltime: bool) -> String {
    let rows: Vec<RunStats> = rows
        .iter()
        .map(|r| RunStats {
            wall_time_seconds: if include_walltime {
                r.wall_time_seconds
            } else {
                0.0
            },
            ..r.clone()
        })
        .collect();
    serde_json::to_string_pretty(&rows).expect("stats serialize")
}

/// Reads a table written as JSON (array) or JSON lines.
pub fn read_stats(path: &Path) -> Result<Vec<RunStats>, BenchError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let trimmed = text.trim_start();
    let parsed = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| e.to_string())
    } else {
        trimmed
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
            .collect()
    };
    parsed.map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), BenchError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes `<stem>.<ext>` with all rows and `<stem>_<method>.<ext>` per
/// method. Returns the paths written.
pub fn emit_report(
    rows: &[RunStats],
    format: ReportFormat,
    out_dir: &Path,
    stem: &str,
    include_walltime: bool,
) -> Result<Vec<PathBuf>, BenchError> {
    if rows.is_empty() {
        return Err(BenchError::Config("no statistics to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    type Render = fn(&[RunStats], bool) -> String;
    let (ext, render): (&str, Render) = match format {
        ReportFormat::Csv => ("csv", stats_csv),
        ReportFormat::Json => ("json", stats_json),
    };
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(RunStats::sort_key);
    let mut written = Vec::new();
    let path = out_dir.join(format!("{stem}.{ext}"));
    write_file(&path, &render(&sorted, include_walltime))?;
    written.push(path);
    for m in Method::ALL {
        let group: Vec<RunStats> = sorted
            .iter()
            .filter(|r| r.config.method == m)
            .cloned()
            .collect();
        if group.is_empty() {
            continue;
        }
        let path = out_dir.join(format!("{stem}_{m}.{ext}"));
        write_file(&path, &render(&group, include_walltime))?;
        written.push(path);
    }
    Ok(written)
}

/// `t, z1.., zbar1.., u1..` at every integration step.
pub fn trajectory_csv(points: &[TrajectoryPoint]) -> String {
    let Some(first) = points.first() else {
        return "t\n".into();
    };
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=first.z.len()).map(|i| format!("z{i}")));
    cols.extend((1..=first.z_ref.len()).map(|i| format!("zbar{i}")));
    cols.extend((1..=first.u.len()).map(|i| format!("u{i}")));
    let mut out = cols.join(",");
    out.push('\n');
    for p in points {
        let vals: Vec<String> = std::iter::once(p.t)
            .chain(p.z.iter().copied())
            .chain(p.z_ref.iter().copied())
            .chain(p.u.iter().copied())
            .map(|v| format!("{v:e}"))
            .collect();
        out.push_str(&vals.join(","));
        out.push('\n');
    }
    out
}

pub fn write_trajectory(path: &Path, points: &[TrajectoryPoint]) -> Result<(), BenchError> {
    write_file(path, &trajectory_csv(points))
}

/// Metrics that can be charted against `N`.
pub const CHART_METRICS: [&str; 6] = [
    "sqp_iters",
    "qp_iters",
    "kkt",
    "f_evals",
    "jac_x_evals",
    "lu_factorizations",
];

fn metric(r: &RunStats, name: &str) -> f64 {
    match name {
        "sqp_iters" => r.sqp_iterations as f64,
        "qp_iters" => r.qp_iterations_total as f64,
        "kkt" => r.kkt_final,
        "f_evals" => r.f_evals as f64,
        "jac_x_evals" => r.jac_x_evals as f64,
        "lu_factorizations" => r.lu_factorizations as f64,
        _ => f64::NAN,
    }
}

/// Line chart of `metric` over `N`, one series per sensitivity mode, log
/// scale on the y axis. Non-converged runs are drawn as crosses.
pub fn svg_chart(rows: &[RunStats], method: Method, metric_name: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let pts: Vec<&RunStats> = rows
        .iter()
        .filter(|r| {
            r.config.method == method
                && metric(r, metric_name).is_finite()
                && metric(r, metric_name) > 0.0
        })
        .collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\">{method}: {metric_name}</text>\n",
        w / 2.0
    );
    if pts.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let n_min = pts.iter().map(|r| r.config.n).min().unwrap() as f64;
    let n_max = pts.iter().map(|r| r.config.n).max().unwrap() as f64;
    let ly: Vec<f64> = pts.iter().map(|r| metric(r, metric_name).log10()).collect();
    let (mut y_lo, mut y_hi) = (
        ly.iter().cloned().fold(f64::INFINITY, f64::min),
        ly.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    if y_hi - y_lo < 1e-9 {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    let sx = |n: f64| {
        if n_max > n_min {
            pad + (n - n_min) / (n_max - n_min) * (w - 2.0 * pad)
        } else {
            w / 2.0
        }
    };
    let sy = |v: f64| h - pad - (v.log10() - y_lo) / (y_hi - y_lo) * (h - 2.0 * pad);
    let _ = writeln!(
        svg,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">N = {n_min}..{n_max}</text>\n<text x=\"4\" y=\"{pad}\" font-family=\"sans-serif\" font-size=\"12\">1e{:.1}</text>\n<text x=\"4\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">1e{:.1}</text>",
        w / 2.0 - 30.0,
        h - pad / 3.0,
        y_hi,
        h - pad,
        y_lo
    );
    let colors = ["#1f77b4", "#d62728", "#2ca02c"];
    for (k, mode) in ALL_MODES.iter().enumerate() {
        let mut series: Vec<&&RunStats> = pts.iter().filter(|r| r.config.sens == *mode).collect();
        series.sort_by_key(|r| r.config.n);
        if series.is_empty() {
            continue;
        }
        let color = colors[k % colors.len()];
        let path: Vec<String> = series
            .iter()
            .map(|r| {
                format!(
                    "{:.2},{:.2}",
                    sx(r.config.n as f64),
                    sy(metric(r, metric_name))
                )
            })
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>",
            path.join(" ")
        );
        for r in &series {
            let (x, y) = (sx(r.config.n as f64), sy(metric(r, metric_name)));
            if r.converged {
                let _ = writeln!(
                    svg,
                    "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\"/>"
                );
            } else {
                let _ = writeln!(
                    svg,
                    "<path d=\"M{:.2},{:.2} L{:.2},{:.2} M{:.2},{:.2} L{:.2},{:.2}\" stroke=\"{color}\"/>",
                    x - 4.0,
                    y - 4.0,
                    x + 4.0,
                    y + 4.0,
                    x - 4.0,
                    y + 4.0,
                    x + 4.0,
                    y - 4.0
                );
            }
        }
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-family=\"sans-serif\" font-size=\"12\">{mode}</text>",
            w - pad - 50.0,
            pad + 16.0 * k as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes one SVG per method and metric into `out_dir`.
pub fn emit_charts(rows: &[RunStats], out_dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    for m in Method::ALL {
        if !rows.iter().any(|r| r.config.method == m) {
            continue;
        }
        for name in CHART_METRICS {
            let path = out_dir.join(format!("{m}_{name}.svg"));
            write_file(&path, &svg_chart(rows, m, name))?;
            written.push(path);
        }
    }
    Ok(written)
}
