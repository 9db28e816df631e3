//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Exits non-zero on a FAIL only when `ACCEPTANCE_STRICT` is set, so the
//! default test run reports red criteria without aborting the workspace run.
//! `ACCEPTANCE_ONLY=2,3` restricts the run to the listed criteria.

use std::time::Instant;

use esdirk_ocp::bench::{
    run_low_tol_experiment, run_single, run_sweep, RunConfig, RunStats, ALL_MODES, BENCHMARK_STEPS,
};
use esdirk_ocp::integrator::{Esdirk, NewtonSettings, NewtonStrategy, WorkCounters};
use esdirk_ocp::model::Qts;
use esdirk_ocp::sensitivity::{fd_sensitivity_oracle, SensitivityMode, SensitivityPair};
use esdirk_ocp::tableau::{
    make_tableau, predict_stages, svp_coefficients, verify_order_conditions, Method,
};
use rand::{Rng, SeedableRng};

const X0: [f64; 4] = [7602.7, 11404.0, 1000.0, 1000.0];
const U: [f64; 2] = [300.0, 300.0];
const D: [f64; 4] = [0.0, 0.0, 100.0, 100.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn tight() -> NewtonSettings {
    NewtonSettings {
        abs: 1e-12,
        rel: 1e-12,
        max_iterations: 100,
        ..NewtonSettings::default()
    }
}

fn terminal(
    method: Method,
    n: usize,
    settings: NewtonSettings,
    mode: SensitivityMode,
) -> (Vec<f64>, Option<SensitivityPair>, WorkCounters) {
    let model = Qts::default();
    let tab = make_tableau(method);
    let e = Esdirk::new(&model, &tab, mode.natural_strategy(), settings, mode).expect("integrator");
    let mut c = WorkCounters::default();
    let r = e
        .integrate_interval(&X0, &U, &D, 0.0, 10.0, n, &mut c)
        .expect("integration");
    (r.x_final, r.sensitivities, c)
}

fn tableaus() -> Outcome {
    let mut bad = Vec::new();
    for m in Method::ALL {
        let t = make_tableau(m);
        if !verify_order_conditions(&t, t.advancing_order) {
            bad.push(format!("{m}: advancing order {}", t.advancing_order));
        }
        if !verify_order_conditions(&t.with_embedded_weights(), t.embedded_order) {
            bad.push(format!("{m}: embedded order {}", t.embedded_order));
        }
        if let Err(e) = t.check_structure() {
            bad.push(format!("{m}: {e}"));
        }
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            "orders and structure hold".into()
        } else {
            bad.join("; ")
        },
    )
}

fn fitted_order(hs: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn convergence_order() -> Outcome {
    let reference_settings = NewtonSettings {
        abs: 1e-14,
        rel: 1e-14,
        max_iterations: 100,
        ..NewtonSettings::default()
    };
    let (reference, _, _) = terminal(
        Method::Esdirk34,
        1280,
        reference_settings,
        SensitivityMode::None,
    );
    let steps = [5, 10, 20, 40, 80];
    let mut pass = true;
    let mut parts = Vec::new();
    for (m, expected) in Method::ALL.into_iter().zip([1.0, 2.0, 3.0]) {
        let mut hs = Vec::new();
        let mut errs = Vec::new();
        for n in steps {
            let (x, _, _) = terminal(m, n, tight(), SensitivityMode::None);
            let err = x
                .iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            hs.push(10.0 / n as f64);
            errs.push(err);
        }
        let p = fitted_order(&hs, &errs);
        pass &= (p - expected).abs() <= 0.25;
        parts.push(format!("{m} p={p:.3}"));
    }
    outcome(pass, parts.join(", "))
}

fn oracle_agreement() -> Outcome {
    let model = Qts::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for m in Method::ALL {
        let tab = make_tableau(m);
        let oracle =
            fd_sensitivity_oracle(&model, &tab, &X0, &U, &D, 0.0, 10.0, 10, 1e-6).expect("oracle");
        for mode in [SensitivityMode::Iterated, SensitivityMode::BaseDirect] {
            let (_, s, _) = terminal(m, 10, tight(), mode);
            let dev = s.expect("sensitivities").max_relative_deviation(&oracle);
            pass &= dev <= 1e-4;
            parts.push(format!("{m}/{mode} {dev:.1e}"));
        }
    }
    let tab = make_tableau(Method::Esdirk12);
    let oracle =
        fd_sensitivity_oracle(&model, &tab, &X0, &U, &D, 0.0, 10.0, 5, 1e-6).expect("oracle");
    let paper = NewtonSettings::default();
    let (_, it, _) = terminal(Method::Esdirk12, 5, paper, SensitivityMode::Iterated);
    let (_, di, _) = terminal(Method::Esdirk12, 5, paper, SensitivityMode::Direct);
    let e_it = it.expect("sensitivities").max_relative_deviation(&oracle);
    let e_di = di.expect("sensitivities").max_relative_deviation(&oracle);
    pass &= e_di > e_it;
    parts.push(format!(
        "N=5 esdirk12 direct {e_di:.1e} > iterated {e_it:.1e}"
    ));
    outcome(pass, parts.join(", "))
}

fn direct_refinement() -> Outcome {
    let steps = [5, 10, 20, 40, 80];
    let mut pass = true;
    let mut parts = Vec::new();
    for m in Method::ALL {
        let devs: Vec<f64> = steps
            .iter()
            .map(|&n| {
                let (_, d, _) = terminal(m, n, tight(), SensitivityMode::Direct);
                let (_, b, _) = terminal(m, n, tight(), SensitivityMode::BaseDirect);
                d.expect("direct").max_relative_deviation(&b.expect("base"))
            })
            .collect();
        // Halving h must shrink the deviation; first order would halve it, so
        // a ratio up to 0.5 * 1.5 is accepted.
        let ok = devs.windows(2).all(|w| w[1] <= 0.75 * w[0]);
        pass &= ok;
        let ratios: Vec<String> = devs
            .windows(2)
            .map(|w| format!("{:.2}", w[1] / w[0]))
            .collect();
        parts.push(format!(
            "{m} dev@5={:.1e} ratios [{}]",
            devs[0],
            ratios.join(" ")
        ));
    }
    outcome(pass, parts.join(", "))
}

#[allow(clippy::needless_range_loop)]
fn svp_closed_forms() -> Outcome {
    let mut rng = rand::rngs::StdRng::seed_from_u64(2024);
    let t12 = make_tableau(Method::Esdirk12);
    let t23 = make_tableau(Method::Esdirk23);
    let g = t23.gamma;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let r: f64 = rng.gen_range(0.1..10.0);
        let s12 = svp_coefficients(&t12, r);
        worst = worst.max((s12.alpha[0] + r).abs() / (1.0 + r));
        worst = worst.max((s12.beta[(0, 0)] - (1.0 + r)).abs() / (1.0 + r));

        let d = 2.0 * g - 1.0;
        let alpha = [
            r - 2.0 * g * r + 2.0 * g * r * r,
            (r - 2.0 * g * r + r * r) / (2.0 * g),
        ];
        let beta = [
            [
                (2.0 * g * r * r + r) / d,
                -(4.0 * g * g * r * r - 4.0 * g * g * r + 4.0 * g * r - 2.0 * g + 1.0) / d,
            ],
            [
                (r * r + r) / (2.0 * g * d),
                -(2.0 * r - 2.0 * g - 2.0 * g * r + r * r + 1.0) / d,
            ],
        ];
        let s23 = svp_coefficients(&t23, r);
        for i in 0..2 {
            worst = worst.max((s23.alpha[i] - alpha[i]).abs() / (1.0 + alpha[i].abs()));
            for j in 0..2 {
                worst = worst.max((s23.beta[(i, j)] - beta[i][j]).abs() / (1.0 + beta[i][j].abs()));
            }
        }
    }
    let mut const_err: f64 = 0.0;
    for m in Method::ALL {
        let t = make_tableau(m);
        for r in [0.5, 1.0, 2.0] {
            let v = vec![3.25, -1.5, 1e4];
            let prev = vec![v.clone(); t.s - 1];
            for p in predict_stages(&svp_coefficients(&t, r), &v, &prev) {
                for (a, b) in p.iter().zip(&v) {
                    const_err = const_err.max((a - b).abs() / (1.0 + b.abs()));
                }
            }
        }
    }
    outcome(
        worst <= 1e-12 && const_err <= 1e-12,
        format!("closed-form deviation {worst:.1e}, constant reproduction {const_err:.1e}"),
    )
}

fn row(rows: &[RunStats], m: Method, s: SensitivityMode, n: usize) -> &RunStats {
    rows.iter()
        .find(|r| r.config.method == m && r.config.sens == s && r.config.n == n)
        .expect("sweep row")
}

fn sweep(rows: &[RunStats]) -> Outcome {
    let mut parts = Vec::new();

    let mut misses = Vec::new();
    for m in Method::ALL {
        for s in [SensitivityMode::Iterated, SensitivityMode::BaseDirect] {
            for n in BENCHMARK_STEPS {
                let r = row(rows, m, s, n);
                if !(r.converged && r.kkt_final <= 1e-3) {
                    misses.push(format!("{m}/{s}/N{n} kkt={:.1e}", r.kkt_final));
                }
            }
        }
    }
    let a = misses.is_empty();
    parts.push(if a {
        "(a) iterated+base all converged".to_string()
    } else {
        format!("(a) not converged: {}", misses.join(" "))
    });

    let direct: Vec<&RunStats> = rows
        .iter()
        .filter(|r| r.config.sens == SensitivityMode::Direct)
        .collect();
    let failed = direct.iter().filter(|r| !r.converged).count();
    let e12_all = direct
        .iter()
        .filter(|r| r.config.method == Method::Esdirk12)
        .all(|r| !r.converged);
    let b = 2 * failed > direct.len() && e12_all;
    parts.push(format!(
        "(b) direct failed {failed}/{}, all esdirk12 failed: {e12_all}",
        direct.len()
    ));

    let mut c_bad = Vec::new();
    for m in Method::ALL {
        for n in BENCHMARK_STEPS {
            let it = row(rows, m, SensitivityMode::Iterated, n);
            let ba = row(rows, m, SensitivityMode::BaseDirect, n);
            if !(it.converged && ba.converged) {
                continue;
            }
            if !(ba.lu_factorizations >= 2 * it.lu_factorizations
                && ba.jac_x_evals > it.jac_x_evals)
            {
                c_bad.push(format!("{m}/N{n}"));
            }
        }
    }
    let c = c_bad.is_empty();
    parts.push(if c {
        "(c) base work exceeds iterated".to_string()
    } else {
        format!("(c) violated at {}", c_bad.join(" "))
    });
    outcome(a && b && c, parts.join("; "))
}

fn low_tolerance() -> Outcome {
    let rows = run_low_tol_experiment(
        &RunConfig::default(),
        &Method::ALL,
        &ALL_MODES,
        jobs(),
        |_| {},
    )
    .expect("low-tol");
    let mut pass = true;
    let mut parts = Vec::new();
    for r in &rows {
        let reached = r.converged && r.kkt_final <= 1e-6;
        let want = match (r.config.sens, r.config.method) {
            (SensitivityMode::Direct, Method::Esdirk12) => None,
            (SensitivityMode::Direct, _) => Some(false),
            _ => Some(true),
        };
        if let Some(w) = want {
            pass &= reached == w;
        }
        parts.push(format!(
            "{}/{} kkt={:.1e}",
            r.config.method, r.config.sens, r.kkt_final
        ));
    }
    outcome(pass, parts.join(", "))
}

fn counter_identities() -> Outcome {
    let n = 10;
    let mut pass = true;
    let mut parts = Vec::new();
    for m in Method::ALL {
        let s = make_tableau(m).s as u64;
        let run = |strategy: NewtonStrategy, mode: SensitivityMode| {
            let model = Qts::default();
            let tab = make_tableau(m);
            let e = Esdirk::new(&model, &tab, strategy, NewtonSettings::default(), mode)
                .expect("integrator");
            let mut c = WorkCounters::default();
            e.integrate_interval(&X0, &U, &D, 0.0, 10.0, n, &mut c)
                .expect("integration");
            c
        };
        let reuse = run(NewtonStrategy::ReusePerStep, SensitivityMode::None);
        let refac = run(
            NewtonStrategy::RefactorizeEveryIteration,
            SensitivityMode::None,
        );
        let iter = run(NewtonStrategy::ReusePerStep, SensitivityMode::Iterated);
        let base = run(
            NewtonStrategy::RefactorizeEveryIteration,
            SensitivityMode::BaseDirect,
        );
        let ok = reuse.lu_factorizations == n as u64
            && refac.lu_factorizations == refac.newton_iterations
            && iter.lu_factorizations == n as u64
            && base.lu_factorizations == base.newton_iterations + (s - 1) * n as u64;
        pass &= ok;
        parts.push(format!(
            "{m}: reuse {} refac {}/{} iterated {} base {}/{}",
            reuse.lu_factorizations,
            refac.lu_factorizations,
            refac.newton_iterations,
            iter.lu_factorizations,
            base.lu_factorizations,
            base.newton_iterations
        ));
    }
    outcome(pass, parts.join(", "))
}

fn determinism(sweep_rows: Option<&[RunStats]>) -> Outcome {
    let mut checked = 0;
    let mut pass = true;
    for (m, s, n) in [
        (Method::Esdirk12, SensitivityMode::Iterated, 5),
        (Method::Esdirk23, SensitivityMode::Direct, 10),
        (Method::Esdirk34, SensitivityMode::BaseDirect, 5),
    ] {
        let cfg = RunConfig {
            method: m,
            sens: s,
            n,
            ..RunConfig::default()
        };
        let (a, _) = run_single(&cfg).expect("run");
        let (b, _) = run_single(&cfg).expect("run");
        pass &= a.same_outcome(&b);
        if let Some(rows) = sweep_rows {
            pass &= row(rows, m, s, n).same_outcome(&a);
        }
        checked += 1;
    }
    outcome(
        pass,
        format!(
            "{checked} configurations rerun, sweep rows compared: {}",
            sweep_rows.is_some()
        ),
    )
}

fn jobs() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));

    let mut sweep_rows = None;
    let mut failures = 0;
    let mut report = |k: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(k) {
            return;
        }
        let start = Instant::now();
        let o = f();
        let status = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failures += 1;
        }
        println!(
            "{status} criterion {k} {name} ({:.1} s): {}",
            start.elapsed().as_secs_f64(),
            o.detail
        );
    };

    report(1, "tableau correctness", &mut tableaus);
    report(2, "convergence order", &mut convergence_order);
    report(3, "sensitivity oracle agreement", &mut oracle_agreement);
    report(4, "direct-mode h-refinement", &mut direct_refinement);
    report(5, "SVP closed forms", &mut svp_closed_forms);
    report(6, "benchmark sweep", &mut || {
        let rows = run_sweep(
            &RunConfig::default(),
            &Method::ALL,
            &ALL_MODES,
            &BENCHMARK_STEPS,
            jobs(),
            |_| {},
        )
        .expect("sweep");
        let o = sweep(&rows);
        sweep_rows = Some(rows);
        o
    });
    report(7, "low-tolerance experiment", &mut low_tolerance);
    report(8, "counter identities", &mut counter_identities);
    report(9, "determinism", &mut || determinism(sweep_rows.as_deref()));

    println!("acceptance: {failures} criteria failed");
    if failures > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
