//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Sizes, tolerances and runtime limits are fixed here.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pmelab::forward::*;
use pmelab::grid::Grid;
use pmelab::transform::*;
use pmelab::{BoundaryData, Coefficients, Field, Problem, Times, Trajectory};
use pmelab_cli::config::Mode;
use pmelab_cli::manifest::{RunManifest, MANIFEST};
use pmelab_cli::run::run;
use pmelab_cli::selftest::{builtin, selftest};

/// Grid, time grid, parameters, coefficients, data, source and solution.
type Oracle = (Arc<Grid<f64>>, Times, Problem, Coefficients, BoundaryData, Trajectory, ForwardSolution<f64>);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn oracle_a(nodes: usize, steps: usize, k: f64, newton_tol: f64) -> Oracle {
    let g = Arc::new(Grid::interval(nodes, 1.0).unwrap());
    let time = Times::new(1.0, steps).unwrap();
    let p = Problem::new(2.0, 1.2).unwrap();
    let coeffs = CoefficientSet::constant(&g, 1.0, 1.0, 1.0).unwrap();
    let phi = BoundarySeries::from_fn(&g, time, |t, _| t);
    let f = Trajectory::from_fn(&g, time, |t, _| 1.0 + t.powf(1.2));
    let sol = solve_forward(&p, &coeffs, &phi, &f, k, &ForwardOptions { newton_tol, ..Default::default() }).unwrap();
    (g, time, p, coeffs, phi, f, sol)
}

fn wave_exact(t: f64, x: [f64; 2]) -> f64 {
    (t - x[0]).max(0.0) / 2.0
}

fn oracle_b(nodes: usize, steps: usize, k: f64, newton_tol: f64) -> Oracle {
    let g = Arc::new(Grid::interval(nodes, 1.0).unwrap());
    let time = Times::new(1.0, steps).unwrap();
    let p = Problem::new(2.0, 1.2).unwrap();
    let coeffs = CoefficientSet::constant(&g, 1.0, 1.0, 0.0).unwrap();
    let phi = BoundarySeries::from_fn(&g, time, wave_exact);
    let f = Trajectory::zeros(&g, time);
    let sol = solve_forward(&p, &coeffs, &phi, &f, k, &ForwardOptions { newton_tol, ..Default::default() }).unwrap();
    (g, time, p, coeffs, phi, f, sol)
}

fn c1() -> Outcome {
    let (g, time, .., sol) = oracle_a(128, 256, 1e4, 1e-9);
    let e = sol.u.zip_with(&Trajectory::from_fn(&g, time, |t, _| t), |a, b| a - b).unwrap().max_abs();
    outcome(e <= 1e-3, format!("L-inf error {e:.3e} <= 1e-3 (128 nodes x 256 steps, k=1e4)"))
}

/// `(L-inf, L1)` error of the traveling wave, L1 taken as the max over levels.
fn wave_errors(nodes: usize, steps: usize, k: f64) -> (f64, f64) {
    let (g, time, .., sol) = oracle_b(nodes, steps, k, 1e-9);
    let err = sol.u.zip_with(&Trajectory::from_fn(&g, time, wave_exact), |a, b| (a - b).abs()).unwrap();
    (err.max_abs(), err.levels().iter().map(Field::l1_norm).fold(0.0, f64::max))
}

fn c2() -> Outcome {
    let (linf, _) = wave_errors(257, 512, 1e4);
    let errs: Vec<(f64, f64)> = [(129, 256), (257, 512), (513, 1024)].iter().map(|&(n, s)| wave_errors(n, s, 1e8)).collect();
    let l1: Vec<f64> = errs.windows(2).map(|w| (w[0].1 / w[1].1).log2()).collect();
    let li: Vec<f64> = errs.windows(2).map(|w| (w[0].0 / w[1].0).log2()).collect();
    let passed = linf <= 2e-2 && l1.iter().all(|&o| o >= 0.9);
    outcome(
        passed,
        format!(
            "L-inf error {linf:.3e} <= 2e-2 (256 cells x 512 steps); L1 orders {:.3}, {:.3} >= 0.9; L-inf orders {:.3}, {:.3} (reported)",
            l1[0], l1[1], li[0], li[1]
        ),
    )
}

fn c3() -> Outcome {
    let g = Arc::new(Grid::interval(33, 1.0).unwrap());
    let time = Times::new(0.5, 40).unwrap();
    let p = Problem::new(2.0, 1.2).unwrap();
    let coeffs = CoefficientSet::new(
        Field::from_fn(&g, |x| 1.0 + 0.5 * x[0]),
        Field::from_fn(&g, |x| 1.0 + 0.3 * (3.0 * x[0]).sin()),
        Field::constant(&g, 0.7),
    )
    .unwrap();
    let data = |g: &Arc<Grid<f64>>, time: Times, [a, b, c, d]: [f64; 4]| {
        (BoundarySeries::from_fn(g, time, move |t, x| a * t * (1.0 + b * x[0])), Trajectory::from_fn(g, time, move |t, x| c * (1.0 + t) + d * x[0]))
    };
    let opts = ForwardOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut cmp_excess, mut mp_excess, mut energy) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let base: [f64; 4] = [rng.gen_range(0.0..2.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..1.0)];
        let (da, dc) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let (phi1, f1) = data(&g, time, base);
        let (phi2, f2) = data(&g, time, [base[0] + da, base[1], base[2] + dc, base[3]]);
        let lo = solve_forward(&p, &coeffs, &phi1, &f1, 1e4, &opts).unwrap();
        let hi = solve_forward(&p, &coeffs, &phi2, &f2, 1e4, &opts).unwrap();
        cmp_excess = cmp_excess.max(lo.u.zip_with(&hi.u, |l, h| l - h).unwrap().max());
        for s in [&lo, &hi] {
            mp_excess = mp_excess.max(s.schedule.floor - s.u.min()).max(s.u.max() - s.schedule.ceiling);
        }
        energy = energy.max(energy_report(&lo.u, &phi1, &f1, &p).unwrap().ratio).max(energy_report(&hi.u, &phi2, &f2, &p).unwrap().ratio);
    }
    let (phi, f) = data(&g, time, [1.0, 0.5, 1.0, 0.2]);
    let weak = solve_weak(&p, &coeffs, &phi, &f, &[1e2, 1e3, 1e4, 1e5], &opts).unwrap();

    let mut res = Vec::new();
    for (n, s) in [(17, 20), (33, 40), (65, 80)] {
        let g = Arc::new(Grid::interval(n, 1.0).unwrap());
        let time = Times::new(0.5, s).unwrap();
        let coeffs = CoefficientSet::new(
            Field::from_fn(&g, |x| 1.0 + 0.5 * x[0]),
            Field::from_fn(&g, |x| 1.0 + 0.3 * (3.0 * x[0]).sin()),
            Field::constant(&g, 0.7),
        )
        .unwrap();
        let (phi, f) = data(&g, time, [1.0, 0.5, 1.0, 0.2]);
        let w = solve_weak(&p, &coeffs, &phi, &f, &[1e4, 1e6], &opts).unwrap();
        let psi = Trajectory::from_fn(&g, time, |t, x| (std::f64::consts::PI * x[0]).sin() * (0.5 - t));
        res.push(weak_residual(&w.u, &psi, &p, &coeffs, &f).unwrap());
    }
    let decays = res[1] < res[0] && res[2] < res[1];
    let passed = cmp_excess <= 1e-8 && mp_excess <= 1e-10 && weak.monotonicity_excess <= 1e-8 && energy <= ENERGY_CONSTANT && decays;
    outcome(
        passed,
        format!(
            "20 pairs: comparison excess {:.1e} <= 1e-8, bound excess {:.1e} <= 1e-10; k-monotone excess {:.1e} <= 1e-8; energy ratio {energy:.3} <= {ENERGY_CONSTANT}; weak residual {:.2e} > {:.2e} > {:.2e}",
            cmp_excess.max(0.0),
            mp_excess.max(0.0),
            weak.monotonicity_excess,
            res[0],
            res[1],
            res[2]
        ),
    )
}

fn identity_ratio(wave: bool) -> (f64, bool) {
    let (nodes, steps, k) = (129, 256, 1e8);
    let (g, time, p, coeffs, _, f, sol) = if wave { oracle_b(nodes, steps, k, 1e-12) } else { oracle_a(nodes, steps, k, 1e-12) };
    let tp = TransformParams::new(&p, 1.0, 2.0, 2.0).unwrap();
    let bundle = TransformBundle::new(&v_of_u(&sol.u, 2.0).unwrap(), &coeffs, &tp, &p).unwrap();
    let fk = f.map(|v| v + 1.0 / k);
    let id = identity_residual(&bundle, &coeffs, Some(&fk), Some(&Field::constant(&g, 1.0 / k))).unwrap();
    let h = g.spacing()[0];
    let ineq = verify_inequality(&bundle, &coeffs, &p).unwrap();
    (id.max_residual / (id.scale * (time.dt() + h * h)), ineq.holds)
}

fn c4() -> Outcome {
    let (ra, ha) = identity_ratio(false);
    let (rb, hb) = identity_ratio(true);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (t, alpha, m) = (rng.gen_range(0.01..3.0), rng.gen_range(0.5..6.0), rng.gen_range(1.05..5.0));
        let exact = time_weight_constant(t, alpha, m).unwrap();
        worst = worst.max((exact - time_weight_quadrature(t, alpha, m)).abs() / exact.abs());
    }
    let passed = ra <= IDENTITY_CONSTANT && rb <= IDENTITY_CONSTANT && ha && hb && worst <= 1e-10;
    outcome(
        passed,
        format!(
            "identity residual / (dt + spacing^2) = {ra:.2e}, {rb:.2e} <= C = {IDENTITY_CONSTANT}; Hoelder node-wise {}; time weight rel. error {worst:.1e} <= 1e-10 on 50 draws",
            if ha && hb { "holds" } else { "violated" }
        ),
    )
}

fn check_value(m: &RunManifest, name: &str) -> f64 {
    m.checks.iter().find(|c| c.name == name).map(|c| c.value).unwrap_or(f64::NAN)
}

fn mode_run(mode: Mode, dir: &Path) -> RunManifest {
    run(&builtin(mode), mode, &dir.join(mode.to_string())).unwrap()
}

fn failures(m: &RunManifest) -> String {
    let f: Vec<_> = m.failures().map(|c| format!("{}: {}", c.name, c.detail)).collect();
    if f.is_empty() {
        String::new()
    } else {
        format!("; failed: {}", f.join("; "))
    }
}

fn c5(dir: &Path) -> Outcome {
    let m = mode_run(Mode::Sweep, dir);
    let detail = format!(
        "T = {:e}; R1 exponent {:.3} <= 0.65; R2 exponent {:.3} <= 0.41; V_t trace rel. L2 {:.2e} <= 0.05{}",
        m.resolved["t_final"],
        check_value(&m, "r1-exponent"),
        check_value(&m, "r2-exponent"),
        check_value(&m, "vt-trace-rel-l2"),
        failures(&m)
    );
    outcome(m.all_pass() && m.resolved["t_final"] == 2f64.powi(-7), detail)
}

fn c6(dir: &Path) -> Outcome {
    let a = mode_run(Mode::Recover, dir);
    let b = mode_run(Mode::RecoverQ1, dir);
    let detail = format!(
        "eps {:.2e}, lambda {:.2e}; q=1 two-T eps {:.2e}, lambda {:.2e}; all <= 0.15 rel. L2{}{}",
        check_value(&a, "eps-rel-l2"),
        check_value(&a, "lambda-rel-l2"),
        check_value(&b, "eps-rel-l2"),
        check_value(&b, "lambda-rel-l2"),
        failures(&a),
        failures(&b)
    );
    outcome(a.all_pass() && b.all_pass(), detail)
}

fn c7(dir: &Path) -> Outcome {
    let m = mode_run(Mode::Partial, dir);
    let ci = |case: &str| m.checks.iter().find(|c| c.name == format!("ci-{case}")).map(|c| c.detail.clone()).unwrap_or_default();
    let detail = format!(
        "null residual {:.1e} <= 1e-12; CGO rate rel. error {:.3} <= 0.15; bounds on 100 z; deep: {}; straddle: {}{}",
        check_value(&m, "null-residual"),
        check_value(&m, "cgo-rate"),
        ci("deep"),
        ci("straddle"),
        failures(&m)
    );
    outcome(m.all_pass(), detail)
}

fn collect(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, root, out);
        } else if p.file_name().is_some_and(|n| n != MANIFEST) {
            out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
}

fn c8(dir: &Path) -> Outcome {
    let (a, b) = (dir.join("selftest-a"), dir.join("selftest-b"));
    let ra = selftest(&a, 17).unwrap();
    let rb = selftest(&b, 17).unwrap();
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    collect(&a, &a, &mut fa);
    collect(&b, &b, &mut fb);
    let same = fa == fb;
    let differing: Vec<_> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.clone()).collect();
    outcome(
        same && ra.all_pass() && rb.all_pass(),
        format!("{} artifacts compared, {} differ{}; selftest checks {}", fa.len(), differing.len(), if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }, if ra.all_pass() && rb.all_pass() { "pass" } else { "fail" }),
    )
}

fn main() -> ExitCode {
    let tmp = std::env::temp_dir().join(format!("pmelab-acceptance-{}", std::process::id()));
    let dir = tmp.as_path();
    let criteria: Vec<(&str, Option<Duration>, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 forward oracle A", Some(Duration::from_secs(30)), Box::new(c1)),
        ("2 forward oracle B", Some(Duration::from_secs(120)), Box::new(c2)),
        ("3 structural suite", None, Box::new(c3)),
        ("4 transform suite", None, Box::new(c4)),
        ("5 expansion exponents", Some(Duration::from_secs(1200)), Box::new(|| c5(dir))),
        ("6 recovery", Some(Duration::from_secs(600)), Box::new(|| c6(dir))),
        ("7 partial data", Some(Duration::from_secs(600)), Box::new(|| c7(dir))),
        ("8 reproducibility", None, Box::new(|| c8(dir))),
    ];
    let mut all = true;
    for (name, limit, f) in &criteria {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        let in_time = limit.is_none_or(|l| secs <= l.as_secs_f64());
        let passed = o.passed && in_time;
        all &= passed;
        let budget = limit.map(|l| format!(" <= {} s", l.as_secs())).unwrap_or_default();
        println!("{} criterion {name}: {}; runtime {secs:.1} s{budget}", if passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let _ = fs::remove_dir_all(dir);
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
