//! Acceptance suite: one pass/fail line per criterion, tolerances pinned
//! below. Runs as a plain binary (no libtest harness) so lines print in
//! order; exits non-zero when any criterion fails.

use std::time::{Duration, Instant};

use gsbmdpo::config::{Ablation, Algo, RunConfig};
use gsbmdpo::envs::EnvKind;
use gsbmdpo::genpolicy::{NoiseSchedule, ScheduleKind};
use gsbmdpo::oracles;
use gsbmdpo::rng;
use gsbmdpo::toylab::{run_toy, ToyConfig};
use gsbmdpo::trainer::{goal_mode_shares, train, MetricsRow, Trainer};

const SEEDS: [u64; 3] = [0, 1, 2];

const GIRSANOV_TOL: f64 = 1e-10;
const GIRSANOV_TIME: Duration = Duration::from_secs(10);
const KL_ORDER_TOL: f64 = 1e-12;
const DECOMPOSITION_TOL: f64 = 1e-10;
const DECOMPOSITION_TIME: Duration = Duration::from_secs(30);
const TILT_TV_TOL: f64 = 1e-6;
const CONDITIONAL_TOL: f64 = 1e-10;
const TILT_TIME: Duration = Duration::from_secs(120);
const IMPROVEMENT_TOL: f64 = 1e-12;
const IS_MAX_Z: f64 = 3.0;
const IS_SAMPLES: usize = 100_000;
const COMPOSITE_SPREAD_TOL: f64 = 1e-8;
const SQUARE_TOL: f64 = 1e-10;
const GRADIENT_REL_TOL: f64 = 1e-4;
const GRADIENT_POINTS: usize = 20;
const TOY_L1_MAX: f64 = 0.15;
const TOY_MIN_MODES: usize = 4;
const TOY_TIME: Duration = Duration::from_secs(600);
const POINTMASS_DISTANCE: f64 = 0.1;
const POINTMASS_MAX_STEPS: usize = 1_000_000;
const POINTMASS_TIME: Duration = Duration::from_secs(900);
const MODE_RADIUS: f64 = 0.3;
const MODE_MIN_SHARE: f64 = 0.1;
const MODE_SAMPLES: usize = 2000;
const MULTIGOAL_STEPS: usize = 200_000;

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        let line = format!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((ok, line));
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t0 = Instant::now();
    let out = f();
    (out, t0.elapsed())
}

struct RunOutcome {
    rows: Vec<MetricsRow>,
    trainer: Trainer,
    elapsed: Duration,
}

impl RunOutcome {
    fn final_eval(&self) -> &MetricsRow {
        self.rows.iter().rev().find(|r| r.kind == "eval").expect("final evaluation row")
    }

    fn updates(&self) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(|r| r.kind == "update")
    }

    /// Aborted updates plus dropped non-finite paths.
    fn breakdown_events(&self) -> u64 {
        self.trainer.aborted_updates + self.updates().map(|r| r.nonfinite_paths.unwrap_or(0)).sum::<u64>()
    }
}

fn run(cfg: RunConfig) -> RunOutcome {
    let ((trainer, rows), elapsed) = timed(|| {
        let mut t = Trainer::new(cfg).expect("valid config");
        let rows = t.run(None).expect("training run");
        (t, rows)
    });
    RunOutcome { rows, trainer, elapsed }
}

fn pointmass(seed: u64) -> RunConfig {
    let mut c = RunConfig::from_json_str("{}").unwrap();
    c.env = EnvKind::PointMass2D;
    c.seed = seed;
    c
}

fn identities(rep: &mut Report) {
    let sched = NoiseSchedule::new(ScheduleKind::Linear, 3.0, 0.3, 16).unwrap();
    let (dev, dt) = timed(|| oracles::verify_girsanov(100, &sched, 1).unwrap());
    rep.check(
        "Girsanov exactness",
        dev < GIRSANOV_TOL && dt < GIRSANOV_TIME,
        format!("max |drift cost - sum of step KLs| = {dev:.2e} (tol {GIRSANOV_TOL:.0e}) on 100 paths in {dt:.2?}"),
    );

    let mut r = rng::stream(2, 0);
    let ((gap, decomp), dt) = timed(|| oracles::path_terminal_kl_sweep(1000, &mut r).unwrap());
    rep.check(
        "Path KL dominates terminal KL",
        gap <= KL_ORDER_TOL && decomp < DECOMPOSITION_TOL && dt < DECOMPOSITION_TIME,
        format!(
            "worst terminal - path KL = {gap:.2e} (tol {KL_ORDER_TOL:.0e}); decomposition residual {decomp:.2e} (tol {DECOMPOSITION_TOL:.0e}); 1000 chains in {dt:.2?}"
        ),
    );

    let mut r = rng::stream(3, 0);
    let ((tv, cond), dt) = timed(|| oracles::tilt_sweep(20, 10_000, &mut r).unwrap());
    rep.check(
        "Tilt is the per-state maximizer",
        tv < TILT_TV_TOL && cond < CONDITIONAL_TOL && dt < TILT_TIME,
        format!(
            "simplex ascent vs tilt TV = {tv:.2e} (tol {TILT_TV_TOL:.0e}); conditional deviation {cond:.2e} (tol {CONDITIONAL_TOL:.0e}); 20 instances in {dt:.2?}"
        ),
    );

    let mut r = rng::stream(4, 0);
    let viol = oracles::improvement_sweep(100, &mut r).unwrap();
    rep.check(
        "Advantage improvement bound",
        viol <= IMPROVEMENT_TOL,
        format!("worst E_k[A] + alpha KL - E*[A] = {viol:.2e} (tol {IMPROVEMENT_TOL:.0e}) on 100 instances"),
    );

    let (ge, gk) = oracles::gaussian_is_checks(0.0, 0.4, 1.0, IS_SAMPLES, 5).unwrap();
    let psched = NoiseSchedule::new(ScheduleKind::Linear, 1.0, 0.5, 4).unwrap();
    let (pe, pk) = oracles::path_is_checks(0.0, 0.3, &psched, IS_SAMPLES, 6).unwrap();
    let z = [ge.worst_z(), gk.worst_z(), pe.worst_z(), pk.worst_z()];
    rep.check(
        "Importance-sampling identities",
        z.iter().all(|z| *z < IS_MAX_Z),
        format!(
            "worst |z| expectation form {:.2}/{:.2}, KL form {:.2}/{:.2} (step/path; limit {IS_MAX_Z}) at {IS_SAMPLES} samples",
            z[0], z[2], z[1], z[3]
        ),
    );

    let mut r = rng::stream(7, 0);
    let disc = oracles::discrete_composite_spread(10, &mut r).unwrap();
    let gauss = oracles::gaussian_composite_spread(0.7, 0.3, 0.05, 10, &mut r).unwrap();
    let square = oracles::completing_square_deviation(100, &mut r).unwrap();
    rep.check(
        "Composite-KL identity",
        disc < COMPOSITE_SPREAD_TOL && gauss < COMPOSITE_SPREAD_TOL && square < SQUARE_TOL,
        format!(
            "spread discrete {disc:.2e}, Gaussian {gauss:.2e} (tol {COMPOSITE_SPREAD_TOL:.0e}); completing the square {square:.2e} (tol {SQUARE_TOL:.0e})"
        ),
    );

    let pg = oracles::policy_gradient_check(GRADIENT_POINTS, 8).unwrap();
    let vg = oracles::value_gradient_check(GRADIENT_POINTS, 8).unwrap();
    rep.check(
        "Gradient fidelity",
        pg < GRADIENT_REL_TOL && vg < GRADIENT_REL_TOL,
        format!(
            "relative error vs central differences: policy loss {pg:.2e}, value loss {vg:.2e} (tol {GRADIENT_REL_TOL:.0e}) at {GRADIENT_POINTS} points"
        ),
    );
}

fn toy(rep: &mut Report) {
    let (res, dt) = timed(|| run_toy(&ToyConfig::default()));
    match res {
        Ok(t) => rep.check(
            "Toy tilting reproduction",
            t.l1_error <= TOY_L1_MAX && t.mode_count() >= TOY_MIN_MODES && dt < TOY_TIME,
            format!(
                "quadrant-mass l1 {:.4} (max {TOY_L1_MAX}), {} modes (min {TOY_MIN_MODES}), {} samples, {dt:.1?}",
                t.l1_error,
                t.mode_count(),
                t.eval_samples
            ),
        ),
        Err(e) => rep.check("Toy tilting reproduction", false, format!("run failed: {e}")),
    }
}

fn learning_and_ablations(rep: &mut Report) {
    let default: Vec<RunOutcome> = SEEDS.iter().map(|&s| run(pointmass(s))).collect();
    let dists: Vec<f64> = default
        .iter()
        .map(|o| o.final_eval().final_distance.unwrap_or(f64::INFINITY))
        .collect();
    let reached = dists.iter().filter(|d| **d < POINTMASS_DISTANCE).count();
    let steps = default[0].trainer.env_steps as usize;
    let slowest = default.iter().map(|o| o.elapsed).max().unwrap();
    rep.check(
        "Desk-scale learning, PointMass2D",
        reached >= 2 && steps <= POINTMASS_MAX_STEPS && slowest < POINTMASS_TIME,
        format!(
            "deterministic final distance {:?} (< {POINTMASS_DISTANCE} needed on 2 of 3), {steps} env steps, slowest run {slowest:.1?}",
            dists.iter().map(|d| (d * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    );

    let mut diag_ok = true;
    let mut nonzero_runs = 0;
    for o in &default {
        let fracs: Vec<Option<f64>> = o.updates().map(|r| r.step_clip_frac).collect();
        diag_ok &= fracs.iter().all(|f| matches!(f, Some(x) if (0.0..=1.0).contains(x)));
        nonzero_runs += fracs.iter().any(|f| f.unwrap_or(0.0) > 0.0) as usize;
    }
    rep.check(
        "Clip-fraction diagnostics",
        diag_ok && nonzero_runs == default.len(),
        format!(
            "step-clip fraction logged in [0, 1] on every update: {diag_ok}; nonzero in {nonzero_runs} of {} runs",
            default.len()
        ),
    );

    let nokl: Vec<RunOutcome> = SEEDS
        .iter()
        .map(|&s| run(Ablation::NoPathKl.apply(&pointmass(s))))
        .collect();
    let ret = |o: &RunOutcome| o.final_eval().mean_return.unwrap_or(f64::NEG_INFINITY);
    let not_better = default.iter().zip(&nokl).filter(|(d, n)| ret(n) <= ret(d)).count();
    let noclip: Vec<RunOutcome> = SEEDS
        .iter()
        .map(|&s| run(Ablation::NoClipping.apply(&pointmass(s))))
        .collect();
    let ev_default: u64 = default.iter().map(RunOutcome::breakdown_events).sum();
    let ev_noclip: u64 = noclip.iter().map(RunOutcome::breakdown_events).sum();
    let fmt = |v: &[RunOutcome]| v.iter().map(|o| format!("{:.2}", ret(o))).collect::<Vec<_>>().join(", ");
    rep.check(
        "Ablation directionality",
        not_better >= 2 && ev_noclip >= ev_default,
        format!(
            "final return default [{}] vs kl_coef=0 [{}]: no-KL not better on {not_better} of 3 (need 2); breakdown events no-clip {ev_noclip} vs default {ev_default} ({}); no-clip returns [{}]",
            fmt(&default),
            fmt(&nokl),
            if ev_noclip > ev_default { "more often" } else if ev_noclip == ev_default { "matches" } else { "fewer" },
            fmt(&noclip)
        ),
    );

    let multigoal = |algo: Algo| {
        let mut c = RunConfig::from_json_str("{}").unwrap();
        c.env = EnvKind::MultiGoalReach;
        c.total_env_steps = MULTIGOAL_STEPS;
        c = c.with_overrides(&[("algo".into(), algo.to_string())]).unwrap();
        let o = run(c);
        let shares = goal_mode_shares(&o.trainer, MODE_SAMPLES, MODE_RADIUS, 99).unwrap();
        let covered = shares.iter().filter(|s| **s >= MODE_MIN_SHARE).count();
        (covered, shares)
    };
    let (gsb_modes, gsb_shares) = multigoal(Algo::GsbMdpo);
    let (ppo_modes, ppo_shares) = multigoal(Algo::Ppo);
    let round = |s: [f64; 4]| s.map(|x| (x * 1e3).round() / 1e3);
    rep.check(
        "Multimodal coverage, MultiGoalReach",
        gsb_modes >= 2 && ppo_modes == 1,
        format!(
            "goals covered (>= {MODE_MIN_SHARE} of samples within {MODE_RADIUS}): generative {gsb_modes} {:?}, Gaussian PPO {ppo_modes} {:?} after {MULTIGOAL_STEPS} env steps",
            round(gsb_shares),
            round(ppo_shares)
        ),
    );
}

fn determinism(rep: &mut Report) {
    let mut cfg = pointmass(11);
    cfg.num_envs = 16;
    cfg.rollout_length = 16;
    cfg.total_env_steps = 16 * 16 * 6;
    cfg.eval_interval = 16 * 16 * 2;
    cfg.checkpoint_interval = 3;
    let strip = |rows: &[MetricsRow]| rows.iter().map(MetricsRow::without_clock).collect::<Vec<_>>();
    let dir = tempfile::tempdir().unwrap();
    let (a_dir, b_dir, c_dir) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let (_, a) = train(&cfg, &a_dir).unwrap();
    let (_, b) = train(&cfg, &b_dir).unwrap();
    let csv_a = gsbmdpo::trainer::read_csv(&a_dir.join("metrics.csv")).unwrap();
    let csv_b = gsbmdpo::trainer::read_csv(&b_dir.join("metrics.csv")).unwrap();
    let replay = strip(&a) == strip(&b) && strip(&csv_a) == strip(&csv_b) && !a.is_empty();

    let mut resumed = Trainer::load_bundle(&a_dir.join("checkpoints").join("update_000003.ckpt")).unwrap();
    let tail = resumed.run(Some(&c_dir)).unwrap();
    let expected: Vec<MetricsRow> = a.iter().filter(|r| r.iteration > 3).cloned().collect();
    let resume = strip(&tail) == strip(&expected) && !tail.is_empty();
    rep.check(
        "Determinism and resume",
        replay && resume,
        format!(
            "two fixed-seed runs bit-identical: {replay} ({} rows); resume from update 3 matches uninterrupted run: {resume} ({} rows)",
            a.len(),
            tail.len()
        ),
    );
}

fn main() {
    let mut rep = Report { lines: Vec::new() };
    identities(&mut rep);
    determinism(&mut rep);
    toy(&mut rep);
    learning_and_ablations(&mut rep);
    let failed = rep.lines.iter().filter(|(ok, _)| !ok).count();
    println!("acceptance: {} passed, {failed} failed", rep.lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
