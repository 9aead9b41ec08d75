//! Built-in configurations and the self-test that runs them all.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use pmelab::forward::{solve_forward, BoundarySeries, CoefficientSet, ForwardOptions};
use pmelab::grid::Grid;
use pmelab::{Problem, Times, Trajectory};

use crate::config::{ExperimentConfig, Mode};
use crate::manifest::{sha256_hex, Artifacts, Check, RunManifest};
use crate::run::{run, RunError, StageExt};

pub const MODES: [Mode; 6] = [Mode::Forward, Mode::Transform, Mode::Sweep, Mode::Recover, Mode::RecoverQ1, Mode::Partial];

pub fn builtin_text(mode: Mode) -> &'static str {
    match mode {
        Mode::Forward => include_str!("../configs/forward.toml"),
        Mode::Transform => include_str!("../configs/transform.toml"),
        Mode::Sweep => include_str!("../configs/sweep.toml"),
        Mode::Recover => include_str!("../configs/recover.toml"),
        Mode::RecoverQ1 => include_str!("../configs/recover-q1.toml"),
        Mode::Partial => include_str!("../configs/partial.toml"),
    }
}

pub fn builtin(mode: Mode) -> ExperimentConfig {
    ExperimentConfig::from_toml(builtin_text(mode), &format!("builtin {mode}")).expect("built-in configs are valid")
}

#[derive(Debug)]
pub struct SelftestReport {
    pub runs: Vec<(String, RunManifest)>,
}

impl SelftestReport {
    pub fn all_pass(&self) -> bool {
        self.runs.iter().all(|(_, m)| m.all_pass())
    }
}

/// Runs every built-in configuration plus the randomized comparison check,
/// each into its own subdirectory of `out`.
pub fn selftest(out: &Path, seed: u64) -> Result<SelftestReport, RunError> {
    let mut runs = Vec::new();
    for mode in MODES {
        let mut cfg = builtin(mode);
        cfg.seed = seed;
        let m = run(&cfg, mode, &out.join(mode.to_string()))?;
        runs.push((mode.to_string(), m));
    }
    runs.push(("comparison".into(), comparison(&out.join("comparison"), seed, 20)?));
    Ok(SelftestReport { runs })
}

#[derive(Serialize)]
struct PairRecord {
    shift: f64,
    scale: f64,
    max_excess: f64,
}

/// Seeded pairs of ordered boundary data `phi1 <= phi2` on a variable
/// coefficient problem; every pair must give ordered solutions.
pub fn comparison(out: &Path, seed: u64, pairs: usize) -> Result<RunManifest, RunError> {
    let start = std::time::Instant::now();
    let mut art = Artifacts::create(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Arc::new(Grid::interval(33, 1.0).stage("grid")?);
    let time = Times::new(0.5, 40).stage("time grid")?;
    let p = Problem::new(2.0, 1.2).stage("problem")?;
    let coeffs = CoefficientSet::new(
        pmelab::Field::from_fn(&grid, |x| 1.0 + 0.5 * x[0]),
        pmelab::Field::from_fn(&grid, |x| 1.0 + 0.3 * (3.0 * x[0]).sin()),
        pmelab::Field::constant(&grid, 0.7),
    )
    .stage("coefficients")?;
    let f = Trajectory::zeros(&grid, time);
    let opts = ForwardOptions::default();
    let k = 1e4;
    let mut records = Vec::new();
    for _ in 0..pairs {
        let (a, b) = (rng.gen_range(0.2..2.0), rng.gen_range(0.5..1.5));
        let (shift, scale) = (rng.gen_range(0.0..0.5), rng.gen_range(1.0..2.0));
        let phi1 = BoundarySeries::from_fn(&grid, time, |t, x| a * t * (b + x[0]));
        let phi2 = BoundarySeries::from_fn(&grid, time, |t, x| scale * a * t * (b + x[0]) + shift * t);
        let u1 = solve_forward(&p, &coeffs, &phi1, &f, k, &opts).stage("comparison")?.u;
        let u2 = solve_forward(&p, &coeffs, &phi2, &f, k, &opts).stage("comparison")?.u;
        let max_excess = u1.zip_with(&u2, |x, y| x - y).stage("comparison")?.max().max(0.0);
        records.push(PairRecord { shift, scale, max_excess });
    }
    let worst = records.iter().map(|r| r.max_excess).fold(0.0, f64::max);
    art.write_json("comparison.json", &records)?;
    let manifest = RunManifest {
        mode: "comparison".into(),
        config_hash: sha256_hex(format!("comparison seed={seed} pairs={pairs}").as_bytes()),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        resolved: Default::default(),
        tolerances: [("comparison_tol".to_string(), 1e-8)].into(),
        checks: vec![Check::at_most("comparison-principle", worst, 1e-8)],
        files: Vec::new(),
    };
    Ok(art.finish(manifest)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_name_their_mode() {
        for mode in MODES {
            assert_eq!(builtin(mode).mode, Some(mode));
        }
    }
}
