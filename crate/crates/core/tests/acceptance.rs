//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::io::Write;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcd_core::cli_report::{run_evaluate_from, EvaluateConfig};
use pcd_core::pcd_metric::{compute_pcd_surface, exceedance_probability};
use pcd_core::spline_fit::{second_difference_matrix, BSplineBasis};
use pcd_core::synth_oracle::{
    brute_force_pcd, brute_force_sic_scan, generate, linear_reference_model, reference_normal_sf,
    series_to_precomputed_csv, MeanKind, SynthSpec,
};
use pcd_core::variance_changepoint::residuals;
use pcd_core::{
    build_basis, compute_iou, compute_pcd, detect_all, fit_penalized, sic_statistic, BoundingBox,
    ChangePointTest, DistanceSeries, FittedCurve, SegmentModel, SplineConfig, ThresholdGrid,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.2}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn exact_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let area = |r: [i64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    inter as f64 / union as f64
}

fn random_box(rng: &mut ChaCha8Rng) -> [i64; 4] {
    let x1 = rng.random_range(0..1000);
    let y1 = rng.random_range(0..1000);
    [
        x1,
        y1,
        x1 + rng.random_range(1..400),
        y1 + rng.random_range(1..400),
    ]
}

fn to_box(r: [i64; 4]) -> BoundingBox {
    BoundingBox::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (ra, rb) = (random_box(&mut rng), random_box(&mut rng));
        // bias half the pairs towards overlap
        let rb = if rng.random_bool(0.5) {
            [
                ra[0] + 5,
                ra[1] - 3,
                rb[2].max(ra[0] + 6),
                rb[3].max(ra[1] - 2),
            ]
        } else {
            rb
        };
        let (a, b) = (to_box(ra), to_box(rb));
        let got = compute_iou(&a, &b);
        worst = worst.max((got - exact_iou(ra, rb)).abs());
        check(got == compute_iou(&b, &a), || {
            format!("asymmetric on {ra:?} {rb:?}")
        })?;
        check(compute_iou(&a, &a) == 1.0, || {
            format!("self IoU != 1 for {ra:?}")
        })?;
    }
    check(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    within(start.elapsed(), 1.0)?;
    Ok(format!("1000 pairs, max deviation {worst:.1e}"))
}

fn random_x(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..250.0)).collect();
    x.sort_by(f64::total_cmp);
    x.dedup();
    x
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // (a) constant and affine data are in the penalty null space
    let mut worst_a = 0.0f64;
    for trial in 0..20 {
        let x = random_x(&mut rng, 60 + trial * 10);
        let c = rng.random_range(0.0..1.0);
        // line through two random scores at 0 m and 250 m stays inside [0, 1]
        let (a, end) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let b = (end - a) / 250.0;
        for lambda in [0.0, 0.6, 100.0] {
            let config = SplineConfig::default().with_lambda(lambda);
            for f in [&(|_: f64| c) as &dyn Fn(f64) -> f64, &|v: f64| a + b * v] {
                let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
                let curve = fit_penalized(
                    &DistanceSeries::new(x.clone(), y).map_err(|e| e.to_string())?,
                    &config,
                )
                .map_err(|e| e.to_string())?;
                for &v in &x {
                    worst_a = worst_a.max((curve.evaluate(v).unwrap() - f(v)).abs());
                }
            }
        }
    }
    check(worst_a <= 1e-6, || {
        format!("(a) reproduction error {worst_a:e}")
    })?;

    // (b) the coefficients solve the penalized normal equations
    let mut worst_b = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(30..400);
        let x = random_x(&mut rng, n);
        let y: Vec<f64> = x.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        let series = DistanceSeries::new(x.clone(), y.clone()).map_err(|e| e.to_string())?;
        let config = SplineConfig::default();
        let curve = fit_penalized(&series, &config).map_err(|e| e.to_string())?;
        let b = build_basis(&x, &config).map_err(|e| e.to_string())?;
        let d = second_difference_matrix(b.ncols());
        let lhs = b.transpose() * &b + d.transpose() * &d * config.lambda;
        let rhs = b.transpose() * DVector::from_column_slice(&y);
        let beta = DVector::from_column_slice(curve.coefficients());
        worst_b = worst_b.max((lhs * beta - rhs).norm());
    }
    check(worst_b <= 1e-8, || {
        format!("(b) normal-equation residual {worst_b:e}")
    })?;

    // (c) partition of unity inside the domain
    let mut worst_c = 0.0f64;
    let x = random_x(&mut rng, 200);
    let basis = BSplineBasis::for_data(&x, &SplineConfig::default()).map_err(|e| e.to_string())?;
    let (lo, hi) = basis.domain();
    for i in 0..10_000 {
        let v = if i == 0 {
            lo
        } else if i == 1 {
            hi
        } else {
            rng.random_range(lo..=hi)
        };
        let s: f64 = basis.row(v).map_err(|e| e.to_string())?.iter().sum();
        worst_c = worst_c.max((s - 1.0).abs());
    }
    check(worst_c <= 1e-12, || {
        format!("(c) partition of unity off by {worst_c:e}")
    })?;
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "(a) {worst_a:.1e}, (b) {worst_b:.1e}, (c) {worst_c:.1e}"
    ))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(40..=500);
        let split = rng.random_range(5..n - 5);
        let (s1, s2) = (rng.random_range(0.01..0.5), rng.random_range(0.01..0.5));
        let r: Vec<f64> = (0..n)
            .map(|i| rng.random_range(-1.0..1.0) * if i < split { s1 } else { s2 })
            .collect();
        let got = sic_statistic(&r, 5).map_err(|e| e.to_string())?;
        let (t, tau) = brute_force_sic_scan(&r, 5);
        worst = worst.max((got.t_n - t).abs());
        check(got.tau_hat == tau, || {
            format!("n={n}: split {} vs oracle {tau}", got.tau_hat)
        })?;
    }
    check(worst <= 1e-10, || format!("max |ΔT_n| {worst:e}"))?;
    within(start.elapsed(), 10.0)?;
    Ok(format!("100 sequences, max |ΔT_n| {worst:.1e}"))
}

fn planted(sigmas: Vec<f64>, indices: &[usize], seed: u64) -> SynthSpec {
    SynthSpec {
        mean: MeanKind::Constant { c: 0.5 },
        boundaries: indices
            .iter()
            .map(|&i| SynthSpec::boundary_after_index(300, (0.0, 300.0), i))
            .collect(),
        segment_sigmas: sigmas,
        n: 300,
        x_range: (0.0, 300.0),
        seed,
    }
}

fn detections(spec: &SynthSpec) -> Result<Vec<usize>, String> {
    let (series, _) = generate(spec).map_err(|e| e.to_string())?;
    let curve = fit_penalized(&series, &SplineConfig::default()).map_err(|e| e.to_string())?;
    Ok(detect_all(&series, &curve, &ChangePointTest::default())
        .map_err(|e| e.to_string())?
        .indices())
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut single = 0;
    let mut double = 0;
    for seed in 0..100 {
        let found = detections(&planted(vec![0.02, 0.2], &[150], seed))?;
        if found.iter().any(|&i| i.abs_diff(150) <= 10) {
            single += 1;
        }
        let found = detections(&planted(vec![0.02, 0.2, 0.05], &[100, 200], seed))?;
        if [100, 200]
            .iter()
            .all(|&t| found.iter().any(|&i| i.abs_diff(t) <= 10))
        {
            double += 1;
        }
    }
    check(single >= 90, || {
        format!("single shift recovered in {single}/100")
    })?;
    check(double >= 85, || {
        format!("double shift recovered in {double}/100")
    })?;
    within(start.elapsed(), 30.0)?;
    Ok(format!("single {single}/100, double {double}/100"))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut positives = 0;
    for seed in 0..200 {
        if !detections(&planted(vec![0.1], &[], 50_000 + seed))?.is_empty() {
            positives += 1;
        }
    }
    let rate = positives as f64 / 200.0;
    check(rate <= 0.12, || {
        format!("false-positive rate {:.1}%", rate * 100.0)
    })?;
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "false positives {positives}/200 ({:.1}%)",
        rate * 100.0
    ))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_half = 0.0f64;
    for _ in 0..200 {
        let sigma = rng.random_range(0.001..0.5);
        let m = linear_reference_model(sigma).map_err(|e| e.to_string())?;
        let i = rng.random_range(1..200);
        let mu = m.curve().evaluate(m.series().x()[i]).unwrap();
        worst_half = worst_half.max((exceedance_probability(&m, i, mu) - 0.5).abs());
    }
    check(worst_half <= 1e-12, || {
        format!("μ = y_t gives {worst_half:e} off 0.5")
    })?;

    // μ(80) = 0.6 on the reference line
    let m = linear_reference_model(0.1).map_err(|e| e.to_string())?;
    let p = exceedance_probability(&m, 80, 0.5);
    let oracle = 1.0 - reference_normal_sf(1.0);
    check(
        (p - 0.841345).abs() <= 1e-6 && (p - oracle).abs() <= 1e-6,
        || format!("Φ(1) case gave {p}, oracle {oracle}"),
    )?;

    let m = linear_reference_model(0.0).map_err(|e| e.to_string())?;
    for i in 0..m.series().len() {
        let mu = m.curve().evaluate(m.series().x()[i]).unwrap();
        for y_t in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let want = if mu > y_t { 1.0 } else { 0.0 };
            let got = exceedance_probability(&m, i, y_t);
            check(got == want, || format!("σ = 0 at μ={mu}, y_t={y_t}: {got}"))?;
        }
    }
    Ok(format!("max |P − 0.5| {worst_half:.1e}, Φ(1) = {p:.6}"))
}

fn random_model(rng: &mut ChaCha8Rng) -> Result<SegmentModel, String> {
    let n = rng.random_range(25..150);
    let x = random_x(rng, n);
    let n = x.len();
    let top = rng.random_range(0.4..1.0);
    let mid = rng.random_range(50.0..200.0);
    let y: Vec<f64> = x
        .iter()
        .map(|&v| {
            (top / (1.0 + ((v - mid) / 30.0).exp()) + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0)
        })
        .collect();
    let series = DistanceSeries::new(x, y).map_err(|e| e.to_string())?;
    let curve: FittedCurve =
        fit_penalized(&series, &SplineConfig::default()).map_err(|e| e.to_string())?;
    let mut boundaries: Vec<usize> = (0..rng.random_range(0..4))
        .map(|_| rng.random_range(1..n))
        .collect();
    boundaries.sort_unstable();
    boundaries.dedup();
    let sigmas = (0..=boundaries.len())
        .map(|_| {
            if rng.random_bool(0.15) {
                0.0
            } else {
                rng.random_range(0.005..0.3)
            }
        })
        .collect();
    SegmentModel::from_parts(series, curve, boundaries, sigmas).map_err(|e| e.to_string())
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid = ThresholdGrid::default();
    let mut cells = 0;
    for k in 0..1000 {
        let m = random_model(&mut rng)?;
        let surface = compute_pcd_surface(&m, &grid).map_err(|e| e.to_string())?;
        for (r, &y_t) in grid.y_values().iter().enumerate() {
            for (c, &p_t) in grid.p_values().iter().enumerate() {
                let want = brute_force_pcd(&m, y_t, p_t);
                let got = compute_pcd(&m, y_t, p_t).map_err(|e| e.to_string())?;
                check(got == want && surface.get(r, c) == want, || {
                    format!(
                        "model {k} ({y_t},{p_t}): {got:?} / {:?} vs {want:?}",
                        surface.get(r, c)
                    )
                })?;
                cells += 1;
            }
        }
    }
    let m = linear_reference_model(0.05).map_err(|e| e.to_string())?;
    let canonical = compute_pcd(&m, 0.5, 0.5).map_err(|e| e.to_string())?;
    check(canonical == Some(99.0), || {
        format!("linear case gave {canonical:?}")
    })?;
    within(start.elapsed(), 10.0)?;
    Ok(format!("{cells} cells agree, linear case 99.0 m"))
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = ThresholdGrid::default();
    let mut violations = 0;
    for _ in 0..100 {
        let m = random_model(&mut rng)?;
        let s = compute_pcd_surface(&m, &grid).map_err(|e| e.to_string())?;
        let v = |r, c| s.get(r, c).unwrap_or(0.0);
        for r in 0..9 {
            for c in 0..9 {
                if r + 1 < 9 && v(r + 1, c) > v(r, c) {
                    violations += 1;
                }
                if c + 1 < 9 && v(r, c + 1) > v(r, c) {
                    violations += 1;
                }
            }
        }
        check(s.mpcd >= 0.0 && s.mpcd <= s.max_value(), || {
            format!("mPCD {} outside [0, {}]", s.mpcd, s.max_value())
        })?;
    }
    check(violations == 0, || {
        format!("{violations} monotonicity violations")
    })?;
    Ok("100 surfaces monotone, mPCD within bounds".into())
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log = dir.path().join("synthetic.csv");
    let spec = SynthSpec {
        mean: MeanKind::Logistic {
            top: 0.9,
            midpoint: 150.0,
            scale: 25.0,
        },
        boundaries: vec![80.0, 190.0],
        segment_sigmas: vec![0.02, 0.15, 0.05],
        n: 400,
        x_range: (0.0, 300.0),
        seed: 9,
    };
    let (series, _) = generate(&spec).map_err(|e| e.to_string())?;
    std::fs::write(&log, series_to_precomputed_csv(&series)).map_err(|e| e.to_string())?;
    let run = |threads: usize| -> Result<Vec<u8>, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_pcd"))
            .args(["--threads", &threads.to_string(), "eval", "--input"])
            .arg(&log)
            .output()
            .map_err(|e| e.to_string())?;
        check(out.status.success(), || {
            String::from_utf8_lossy(&out.stderr).into_owned()
        })?;
        Ok(out.stdout)
    };
    let reference = run(8)?;
    for threads in [8, 8, 8, 8, 1, 2] {
        check(run(threads)? == reference, || {
            format!("output differs with {threads} threads")
        })?;
    }
    Ok(format!(
        "{} bytes identical over 7 runs (1, 2, 8 threads)",
        reference.len()
    ))
}

fn criterion_10() -> Outcome {
    let spec = SynthSpec {
        mean: MeanKind::Logistic {
            top: 0.9,
            midpoint: 150.0,
            scale: 25.0,
        },
        boundaries: vec![100.0, 200.0],
        segment_sigmas: vec![0.02, 0.2, 0.05],
        n: 500,
        x_range: (0.0, 300.0),
        seed: 10,
    };
    let (series, _) = generate(&spec).map_err(|e| e.to_string())?;
    let csv = series_to_precomputed_csv(&series);
    let start = Instant::now();
    let eval = run_evaluate_from(csv.as_bytes(), &EvaluateConfig::new("<memory>"))
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(eval.report.surface.values.len() == 9, || {
        "surface is not 9x9".into()
    })?;
    let r = residuals(&series, eval.model.curve()).map_err(|e| e.to_string())?;
    check(r.len() == 500, || "residual length".into())?;
    within(elapsed, 1.0)?;
    Ok(format!(
        "n=500 in {:.1} ms, {} change points",
        elapsed.as_secs_f64() * 1e3,
        eval.report.change_points.len()
    ))
}

fn main() -> ExitCode {
    // `cargo test` passes filter/flag arguments; this suite always runs in full
    let criteria: [Criterion; 10] = [
        ("IoU oracle", criterion_1),
        ("spline correctness", criterion_2),
        ("SIC statistic equivalence", criterion_3),
        ("planted change-point recovery", criterion_4),
        ("false-positive control", criterion_5),
        ("exceedance probability", criterion_6),
        ("PCD definition equivalence", criterion_7),
        ("monotonicity sweep", criterion_8),
        ("end-to-end determinism", criterion_9),
        ("throughput", criterion_10),
    ];
    let mut failed = 0;
    let mut stdout = std::io::stdout().lock();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let _ = writeln!(
            stdout,
            "criterion {:>2} {tag}: {name}: {detail} [{ms:.0} ms]",
            i + 1
        );
    }
    let _ = writeln!(
        stdout,
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
