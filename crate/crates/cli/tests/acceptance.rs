//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::collections::HashSet;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tap_core::cache::{DifferenceStack, Schedule};
use tap_core::cost::{flops_full, flops_probe, hbm_peak, schedule_speedup, TransformerDims};
use tap_core::engine::{compare_strategies, run, Denoiser, EngineConfig, RunTrace, StrategyParams};
use tap_core::predictor::{build_family, predict, required_capacity, FamilyConfig, PredictorSpec};
use tap_core::selector::{select, LossMatrix, MetricKind, ProxyMetric};
use tap_core::simulator::{
    affine_suite, heterogeneous_suite, initial_state, make_denoiser, oracle_best, quadratic_suite,
    rough_early_smooth_late, ModulationSchedule, ProbeMode, SimulatedDenoiser,
};
use tap_core::tensor::relative_error;

/// Default scenario dimensions: batch, tokens, channels.
const SHAPE: (usize, usize, usize) = (2, 64, 16);
const T: usize = 50;

type Criterion = (&'static str, fn() -> Outcome);

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

fn hetero(seed: u64, mode: ProbeMode) -> (SimulatedDenoiser, Array3<f64>) {
    let (spec, _) = heterogeneous_suite(T, SHAPE, seed).unwrap();
    let d = make_denoiser(&spec, ModulationSchedule::drifting(T, SHAPE.2), mode).unwrap();
    (d, initial_state(SHAPE, seed))
}

fn schedule(t: usize, n: usize, w: usize) -> Schedule {
    Schedule::new(t, n, w).unwrap()
}

fn speedup_reproduction() -> Outcome {
    let table = [(4, 3.57), (5, 4.16), (8, 6.24), (10, 7.13)];
    let mut worst = 0.0f64;
    for (n, published) in table {
        let s = schedule_speedup(50, n, 3, 0.0).unwrap();
        worst = worst.max((s - published).abs() / published);
    }
    let schnell = schedule_speedup(4, 3, 2, 0.0).unwrap();
    outcome(
        worst <= 0.01 && schnell == 2.0,
        format!("max relative gap {worst:.4} (tol 0.01), 4-step row {schnell}"),
    )
}

/// Counts complete offset bins of width δ inside `[0, λ]`.
fn brute_force_family_size(lo: usize, hi: usize, lambda: usize, delta: usize) -> usize {
    let mut offsets = 0;
    let mut start = 0;
    while start + delta <= lambda + 1 {
        offsets += 1;
        start += delta;
    }
    let mut count = 0;
    for _ in 0..offsets {
        for _ in lo..=hi {
            count += 1;
        }
    }
    count
}

fn family_size() -> Outcome {
    let default_len = build_family(&FamilyConfig::default()).unwrap().len();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..50 {
        let lo = rng.random_range(0..4);
        let hi = rng.random_range(lo..7);
        let lambda = rng.random_range(0..12);
        let delta = rng.random_range(1..=(lambda + 1).min(5));
        let cfg = FamilyConfig {
            order_low: lo,
            order_high: hi,
            lambda,
            delta,
            ..FamilyConfig::default()
        };
        let family = build_family(&cfg).unwrap();
        let distinct: HashSet<String> = family.iter().map(|s| s.to_string()).collect();
        if family.len() != brute_force_family_size(lo, hi, lambda, delta) || distinct.len() != family.len() {
            mismatches += 1;
        }
    }
    outcome(
        default_len == 15 && mismatches == 0,
        format!("default family {default_len} specs, {mismatches}/50 grid mismatches"),
    )
}

fn traces_identical(a: &RunTrace, b: &RunTrace) -> bool {
    a.final_state == b.final_state
        && a.full_count == b.full_count
        && a.steps.len() == b.steps.len()
        && a.steps.iter().zip(&b.steps).all(|(x, y)| {
            x.step == y.step
                && x.was_full == y.was_full
                && x.steps_since_full == y.steps_since_full
                && x.output == y.output
                && x.residual_error.map(f64::to_bits) == y.residual_error.map(f64::to_bits)
        })
}

fn reuse_equivalence() -> Outcome {
    let params = StrategyParams {
        family: FamilyConfig::singleton(0),
        ..StrategyParams::default()
    };
    let mut identical = 0;
    for seed in 0..10 {
        let (d, x) = hetero(seed, ProbeMode::Modulated);
        let reuse = run(&d, &x, &EngineConfig::new(schedule(T, 5, 3), "reuse")).unwrap();
        let tap = run(&d, &x, &EngineConfig::new(schedule(T, 5, 3), "tap").with_params(params.clone())).unwrap();
        identical += usize::from(traces_identical(&reuse, &tap));
    }
    outcome(identical == 10, format!("{identical}/10 seeds bit-identical"))
}

fn linear_exactness() -> Outcome {
    let t = 20;
    let mut worst = 0.0f64;
    for n in [2, 5, 8] {
        for seed in 0..3 {
            let spec = affine_suite(t, SHAPE, seed).unwrap();
            let d = make_denoiser(&spec, ModulationSchedule::drifting(t, SHAPE.2), ProbeMode::TruthResidual).unwrap();
            let x = initial_state(SHAPE, seed);
            let exact = run(&d, &x, &EngineConfig::new(schedule(t, n, 3), "exact")).unwrap();
            let tap = run(&d, &x, &EngineConfig::new(schedule(t, n, 3), "tap")).unwrap();
            worst = worst.max(relative_error(&exact.final_state, &tap.final_state).unwrap());
        }
    }
    outcome(worst <= 1e-9, format!("max relative error {worst:.3e} (tol 1e-9), N in {{2,5,8}}, T=20"))
}

fn hermite_quadratic_exactness() -> Outcome {
    let spec = PredictorSpec::Hermite { order: 2, window: 3 };
    let shape = (1, 16, 8);
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let traj = quadratic_suite(T, shape, seed).unwrap();
        for n in [2, 5, 8] {
            let mut stack = DifferenceStack::new(3).unwrap();
            for j in 0..3 {
                stack.push(j * n, traj.residual_truth(j * n).unwrap()).unwrap();
            }
            for k in 1..=2 * n {
                let truth = traj.residual_truth(2 * n + k).unwrap();
                let pred = predict(&spec, &stack, k, n).unwrap().unwrap();
                worst = worst.max(relative_error(&truth, &pred).unwrap());
            }
        }
    }
    outcome(worst <= 1e-9, format!("max relative error {worst:.3e} (tol 1e-9), horizons up to 2N"))
}

/// Replays a TAP trace and compares each skipped step's selection with the
/// brute-force oracle over the same candidates.
fn oracle_agreement(d: &SimulatedDenoiser, x0: &Array3<f64>, trace: &RunTrace, metric: &ProxyMetric) -> (usize, usize) {
    let n = trace.schedule.window;
    let mut stack = DifferenceStack::new(required_capacity(&trace.family)).unwrap();
    let mut x = x0.clone();
    let mut last_full = 0;
    let (mut agree, mut total) = (0, 0);
    for rec in &trace.steps {
        if rec.was_full {
            stack.push(rec.step, &rec.output - &x).unwrap();
            last_full = rec.step;
        } else {
            let k = rec.step - last_full;
            let truth = d.reference_residual(&x, rec.step).unwrap();
            let (active, candidates): (Vec<usize>, Vec<Array3<f64>>) = trace
                .family
                .iter()
                .enumerate()
                .filter_map(|(i, s)| predict(s, &stack, k, n).unwrap().map(|p| (i, p)))
                .unzip();
            let oracle = oracle_best(&candidates, &truth, metric).unwrap().remap(&active);
            let chosen = &rec.selection.as_ref().unwrap().chosen;
            agree += chosen.iter().zip(oracle.chosen.iter()).filter(|(a, b)| a == b).count();
            total += chosen.len();
        }
        x = rec.output.clone();
    }
    (agree, total)
}

fn oracle_consistency() -> Outcome {
    let metric = ProxyMetric::new(MetricKind::L1);
    let params = StrategyParams {
        metric,
        ..StrategyParams::default()
    };
    let (mut agree, mut total) = (0, 0);
    for seed in 0..5 {
        let (d, x) = hetero(seed, ProbeMode::TruthResidual);
        let trace = run(&d, &x, &EngineConfig::new(schedule(T, 5, 3), "tap").with_params(params.clone())).unwrap();
        let (a, t) = oracle_agreement(&d, &x, &trace, &metric);
        agree += a;
        total += t;
    }
    let share = agree as f64 / total as f64;
    outcome(share >= 0.999, format!("{agree}/{total} tokens match ({:.4}%, tol 99.9%)", 100.0 * share))
}

fn ensemble_dominance() -> Outcome {
    let family = build_family(&FamilyConfig::default()).unwrap();
    let sched = schedule(T, 5, 3);
    let mut not_worse = 0;
    let mut strict = 0;
    let mut margins = Vec::new();
    for seed in 0..5 {
        let (d, x) = hetero(seed, ProbeMode::TruthResidual);
        let mut cfgs = vec![EngineConfig::new(sched, "tap").with_params(StrategyParams {
            metric: ProxyMetric::new(MetricKind::Mse),
            ..StrategyParams::default()
        })];
        for spec in &family {
            cfgs.push(EngineConfig::new(sched, "global").with_params(StrategyParams {
                global: *spec,
                ..StrategyParams::default()
            }));
        }
        let rows = compare_strategies(&d, &x, &cfgs).unwrap();
        let tap = rows[0].total_residual_error;
        let best = rows[1..].iter().map(|r| r.total_residual_error).fold(f64::INFINITY, f64::min);
        not_worse += usize::from(tap <= best);
        strict += usize::from(tap < best);
        margins.push(format!("{tap:.3}/{best:.3}"));
    }
    outcome(
        not_worse == 5 && strict >= 4,
        format!(
            "tap <= best global on {not_worse}/5 seeds, strictly on {strict}/5 (need 5 and 4); tap/best {}",
            margins.join(" ")
        ),
    )
}

fn regression_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

fn selection_pattern() -> Outcome {
    let mut slopes = Vec::new();
    for seed in 0..3 {
        let spec = rough_early_smooth_late(T, SHAPE, seed).unwrap();
        let d = make_denoiser(&spec, ModulationSchedule::drifting(T, SHAPE.2), ProbeMode::Modulated).unwrap();
        let x = initial_state(SHAPE, seed);
        let trace = run(&d, &x, &EngineConfig::new(schedule(T, 5, 3), "tap")).unwrap();
        let points: Vec<(f64, f64)> = trace
            .steps
            .iter()
            .filter_map(|s| {
                let sel = s.selection.as_ref()?;
                let orders: f64 = sel.chosen.iter().map(|&i| trace.family[i].order() as f64).sum();
                Some((s.step as f64, orders / sel.chosen.len() as f64))
            })
            .collect();
        slopes.push(regression_slope(&points));
    }
    outcome(
        slopes.iter().all(|&s| s > 0.0),
        format!("mean-order slopes {:?} (need > 0)", slopes.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>()),
    )
}

fn argmin_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut changed = 0;
    for _ in 0..100 {
        let p = rng.random_range(1..8);
        let (b, n) = (rng.random_range(1..4), rng.random_range(1..32));
        let mut values = Array3::from_shape_fn((p, b, n), |_| rng.random_range(0.0..2.0));
        // inject exact ties and non-finite entries
        for _ in 0..rng.random_range(0..4) {
            let (bi, ni) = (rng.random_range(0..b), rng.random_range(0..n));
            let (i, j) = (rng.random_range(0..p), rng.random_range(0..p));
            values[[j, bi, ni]] = values[[i, bi, ni]];
        }
        if rng.random_bool(0.3) {
            values[[rng.random_range(0..p), 0, 0]] = f64::NAN;
        }
        let mut active: Vec<bool> = (0..p).map(|_| rng.random_bool(0.8)).collect();
        active[rng.random_range(0..p)] = true;
        let before = select(&LossMatrix::new(values.clone(), active.clone()).unwrap()).unwrap();
        let scale = rng.random_range(1e-3..1e3);
        let per_token = Array2::from_shape_fn((b, n), |_| rng.random_range(1e-2..1e2));
        let mut scaled = values.mapv(|v| v * scale);
        for mut slab in scaled.outer_iter_mut() {
            slab *= &per_token;
        }
        let after = select(&LossMatrix::new(scaled, active).unwrap()).unwrap();
        changed += usize::from(before.chosen != after.chosen);
    }
    outcome(changed == 0, format!("{changed}/100 selection maps changed under positive scaling"))
}

fn cost_spot_checks() -> Outcome {
    let small = TransformerDims {
        layers: 1,
        tokens: 2,
        channels: 4,
        ..TransformerDims::default()
    };
    let hbm = TransformerDims {
        layers: 1,
        tokens: 4,
        channels: 8,
        params: 0,
        bytes_per_element: 2,
        cached_tensors: 2,
        activation_factor: 0.0,
        batch: 1,
    };
    let mut ratio_ok = true;
    for layers in 1..=64 {
        for (tokens, channels) in [(1, 1), (16, 64), (256, 64), (4096, 3072)] {
            let d = TransformerDims {
                layers,
                tokens,
                channels,
                ..TransformerDims::default()
            };
            ratio_ok &= flops_probe(&d) / flops_full(&d) <= 1.0 / layers as f64;
        }
    }
    let full = flops_full(&small);
    let bytes = hbm_peak(&hbm);
    outcome(
        full == 832.0 && bytes == 128.0 && ratio_ok,
        format!("flops_full {full}, hbm_peak {bytes} bytes, probe/full <= 1/L: {ratio_ok}"),
    )
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    std::fs::write(&cfg, "batch = 2\ntokens = 32\nchannels = 8\nsteps = 30\nwindow = 5\nfamily.hermite = true\n").unwrap();
    let mut stdouts = Vec::new();
    for run_dir in ["a", "b"] {
        let out = Command::new(env!("CARGO_BIN_EXE_tap"))
            .args(["run", "-c"])
            .arg(&cfg)
            .args(["--seed", "17", "--out"])
            .arg(dir.path().join(run_dir))
            .output()
            .unwrap();
        if !out.status.success() {
            return outcome(false, format!("tap run failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        stdouts.push(out.stdout);
    }
    let mut same = vec![("stdout", stdouts[0] == stdouts[1])];
    for file in ["summary.json", "trace.csv", "selection.csv"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        same.push((file, !a.is_empty() && a == b));
    }
    outcome(
        same.iter().all(|s| s.1),
        same.iter().map(|(f, ok)| format!("{f}:{}", if *ok { "same" } else { "differs" })).collect::<Vec<_>>().join(" "),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("schedule-speedup reproduction", speedup_reproduction),
        ("family-size formula", family_size),
        ("reuse equivalence", reuse_equivalence),
        ("linear exactness", linear_exactness),
        ("hermite quadratic exactness", hermite_quadratic_exactness),
        ("oracle selection consistency", oracle_consistency),
        ("ensemble dominance", ensemble_dominance),
        ("selection-pattern slope", selection_pattern),
        ("argmin invariance", argmin_invariance),
        ("cost-formula spot checks", cost_spot_checks),
        ("cli determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        println!(
            "{} [{:>2}] {name}: {} ({:.1}s)",
            if result.pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!result.pass);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
