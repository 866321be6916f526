//! Acceptance checks. Each criterion prints one PASS or FAIL line; the process
//! exits nonzero if any criterion fails.

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use agestab::cli::{parse_config, sweep};
use agestab::diffusion::{evolve, positivity_safe_substeps, AgePropagator, GeneratorSpec};
use agestab::equilibrium::{homogeneous_equilibrium, trivial_equilibrium};
use agestab::expr::RateExpression;
use agestab::linearization::build_linearization;
use agestab::model::{AgeGrid, AgeSpaceField, Boundary, ModelSpec, Rate, SpatialField, SpatialGrid, VitalRates};
use agestab::spectral::SpectralContext;
use agestab::stability::{
    closed_form_r0, global_decay_check, instability_test_p50, verdict_equilibrium, verdict_trivial,
    verify_by_simulation, Envelopes, NormKind, Verdict, DEFAULT_BAND,
};
use agestab::transport::{fit_exponential_rate, linear_simulate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn spec(length: f64, n_x: usize, bc: Boundary, a_max: f64, n_a: usize, m: &str, b: &str, d: &str) -> ModelSpec {
    ModelSpec::new(
        SpatialGrid::new(length, n_x, bc).unwrap(),
        AgeGrid::new(a_max, n_a).unwrap(),
        VitalRates::parse(m, b, d, "1").unwrap(),
    )
    .unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    if start.elapsed() <= limit {
        Ok(())
    } else {
        Err(format!("took {:.1?}, limit {limit:?}", start.elapsed()))
    }
}

/// Root in `lambda` of `b0 (1 - e^{-(lambda + m0) A}) / (lambda + m0) = 1`.
fn scalar_lambda0(b0: f64, m0: f64, a_m: f64) -> f64 {
    let r = |l: f64| {
        let s = l + m0;
        if s.abs() < 1e-12 {
            b0 * a_m
        } else {
            b0 * (1.0 - (-s * a_m).exp()) / s
        }
    };
    let (mut lo, mut hi) = (-m0 - 50.0, 50.0);
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if r(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn closed_form_r0_random() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let b0 = rng.random_range(0.5..3.0);
        let m0 = rng.random_range(0.2..2.0);
        let a_m = rng.random_range(1.0..5.0);
        let s = spec(1.0, 101, Boundary::Neumann, a_m, 400, &m0.to_string(), &b0.to_string(), "0.1").with_substeps(10);
        let lin = build_linearization(&trivial_equilibrium(&s), &s).map_err(|e| e.to_string())?;
        let r = SpectralContext::new(&lin, &s).and_then(|c| c.r_q(0.0)).map_err(|e| e.to_string())?;
        worst = worst.max((r - b0 / m0 * (1.0 - (-m0 * a_m).exp())).abs());
    }
    within(Duration::from_secs(30), start)?;
    check(worst <= 1e-3, format!("max |r(Q0) - r0| = {worst:.2e} over 10 specs in {:.1?}", start.elapsed()))
}

fn dominated_rates() -> Outcome {
    let (mu, a_m) = (0.5, 2.0);
    let s = spec(1.0, 3, Boundary::Neumann, a_m, 4000, &mu.to_string(), &mu.to_string(), "0.1");
    let r0 = closed_form_r0(&s).map_err(|e| e.to_string())?;
    let exact = 1.0 - (-mu * a_m).exp();
    let v = verdict_trivial(&s, DEFAULT_BAND).map_err(|e| e.to_string())?;
    check(
        (r0 - exact).abs() <= 1e-8 && r0 < 1.0 && v.verdict == Verdict::Stable,
        format!("r0 = {r0:.12}, 1 - e^(-mu a_m) = {exact:.12}, r(Q0) = {:.10}, verdict {}", v.r_q0, v.verdict),
    )
}

fn lambda0_threshold() -> Outcome {
    let mut worst: f64 = 0.0;
    for &(b0, m0, a_m) in &[(2.0, 1.0, 2.0), (0.6, 0.5, 3.0), (1.5, 0.3, 1.0), (4.0, 2.0, 1.5)] {
        let s = spec(1.0, 11, Boundary::Neumann, a_m, 400, &m0.to_string(), &b0.to_string(), "0.1");
        let lin = build_linearization(&trivial_equilibrium(&s), &s).map_err(|e| e.to_string())?;
        let l0 = SpectralContext::new(&lin, &s).and_then(|c| c.find_lambda0()).map_err(|e| e.to_string())?;
        worst = worst.max((l0 - scalar_lambda0(b0, m0, a_m)).abs());
    }
    let text = r#"
[grid]
length = 1.0
n_x = 11
boundary = "neumann"
[age]
a_max = 2.0
n_a = 200
[rates]
m = "1"
b = "param:b0"
d = "0.1"
[params]
b0 = 1.0
[sweep]
param = "b0"
from = 0.5
to = 2.5
steps = 9
"#;
    let rows = sweep(&parse_config("sweep.toml", text).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let r_cross: Vec<usize> = (1..rows.len()).filter(|&k| (rows[k - 1].r_q0 - 1.0) * (rows[k].r_q0 - 1.0) < 0.0).collect();
    let l_cross: Vec<usize> = (1..rows.len())
        .filter(|&k| rows[k - 1].lambda0.unwrap_or(f64::NAN) * rows[k].lambda0.unwrap_or(f64::NAN) < 0.0)
        .collect();
    check(
        worst <= 1e-4 && r_cross.len() == 1 && r_cross == l_cross,
        format!("max |lambda0 - scalar root| = {worst:.2e}; r(Q0) crosses 1 at rows {r_cross:?}, lambda0 crosses 0 at rows {l_cross:?}"),
    )
}

fn spectral_dynamical() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for b0 in ["0.5", "2"] {
        let start = Instant::now();
        let s = spec(1.0, 21, Boundary::Neumann, 2.0, 200, "1", b0, "0.1");
        let lin = build_linearization(&trivial_equilibrium(&s), &s).map_err(|e| e.to_string())?;
        let l0 = SpectralContext::new(&lin, &s).and_then(|c| c.find_lambda0()).map_err(|e| e.to_string())?;
        let psi = AgeSpaceField::from_fn(&s, |a, x| (1.0 + 0.5 * (PI * x).cos()) * (-a).exp());
        let t = linear_simulate(&psi, 10.0, &lin, &s, true, 0).map_err(|e| e.to_string())?;
        let series: Vec<(f64, f64)> = t.times.iter().copied().zip(t.norm_l1_sup.iter().copied()).collect();
        let rate = fit_exponential_rate(&series, 0.5).map_err(|e| e.to_string())?;
        within(Duration::from_secs(120), start)?;
        ok &= (rate - l0).abs() <= 5e-2;
        parts.push(format!("b={b0}: rate {rate:.4} vs lambda0 {l0:.4} ({:.1?})", start.elapsed()));
    }
    check(ok, parts.join("; "))
}

fn verdict_simulation_agreement() -> Outcome {
    let b0 = 1.0 / (1.0 - (-3.0f64).exp());
    let s = spec(1.0, 21, Boundary::Neumann, 3.0, 150, "0.5 + z", &b0.to_string(), "0.1");
    let eq = homogeneous_equilibrium(&s).map_err(|e| e.to_string())?;
    let v = verdict_equilibrium(&eq, &s, DEFAULT_BAND, None).map_err(|e| e.to_string())?;
    let star = v.lambda_star.ok_or("no dominant real eigenvalue")?;
    let sim = verify_by_simulation(&eq, &s, 0.05, 10.0, NormKind::default()).map_err(|e| e.to_string())?;

    let allee = spec(1.0, 21, Boundary::Neumann, 3.0, 150, "1", "0.6*(1 + z/(1+z))", "0.1");
    let eq_a = homogeneous_equilibrium(&allee).map_err(|e| e.to_string())?;
    let p50 = instability_test_p50(&eq_a, &allee, DEFAULT_BAND, None).map_err(|e| e.to_string())?;
    let sim_a = verify_by_simulation(&eq_a, &allee, 0.05, 10.0, NormKind::default()).map_err(|e| e.to_string())?;
    let grew = sim_a.series.last().is_some_and(|&(_, d)| d > sim_a.series[0].1);
    check(
        v.verdict == Verdict::Stable
            && sim.rate < 0.0
            && (sim.rate - star).abs() <= 5e-2
            && p50.verdict == Verdict::Unstable
            && sim_a.rate > 0.0
            && grew,
        format!(
            "logistic: verdict {} lambda* {star:.4} simulated {:.4}; Allee: P50 {} simulated {:.4}",
            v.verdict, sim.rate, p50.verdict, sim_a.rate
        ),
    )
}

fn eigen_system_reduction() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;

    // constant rates: psi(a) = e^{-(lambda0 + m) a} psi(0)
    let m0 = 1.0;
    let s = spec(1.0, 11, Boundary::Neumann, 2.0, 400, "1", "2", "0.1");
    let lin = build_linearization(&trivial_equilibrium(&s), &s).map_err(|e| e.to_string())?;
    let ctx = SpectralContext::new(&lin, &s).map_err(|e| e.to_string())?;
    let l0 = ctx.find_lambda0().map_err(|e| e.to_string())?;
    let (sigma, _, norm) = agestab::spectral::smallest_singular_triplet(&ctx.assemble_eigen_system(l0));
    ok &= sigma <= 1e-4 * norm;
    let (psi0, psibar) = ctx.kernel_vector(l0);
    let psi = ctx.reconstruct(l0, &psi0, &psibar);
    let mut err: f64 = 0.0;
    for j in 0..s.n_age_nodes() {
        let f = (-(l0 + m0) * s.age().node(j)).exp();
        for i in 0..s.n_x() {
            let exact = f * psi0[i];
            err = err.max((psi.get(j, i) - exact).abs() / exact.abs());
        }
    }
    ok &= err <= 1e-5;
    parts.push(format!("Neumann: sigma_min/||M|| = {:.1e}, reconstruction error {err:.1e}", sigma / norm));

    // space-dependent Dirichlet case: the reconstructed psi must close the renewal
    let s = spec(1.0, 21, Boundary::Dirichlet, 2.0, 400, "1 + 0.5*x", "3", "0.1");
    let lin = build_linearization(&trivial_equilibrium(&s), &s).map_err(|e| e.to_string())?;
    let ctx = SpectralContext::new(&lin, &s).map_err(|e| e.to_string())?;
    let l0 = ctx.find_lambda0().map_err(|e| e.to_string())?;
    let (sigma, _, norm) = agestab::spectral::smallest_singular_triplet(&ctx.assemble_eigen_system(l0));
    ok &= sigma <= 1e-4 * norm;
    let (psi0, psibar) = ctx.kernel_vector(l0);
    let psi = ctx.reconstruct(l0, &psi0, &psibar);
    let b = s.tabulate(Rate::B, &SpatialField::zeros(s.n_x())).map_err(|e| e.to_string())?;
    let w = s.age().weights();
    let scale = psi0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut renewal: f64 = 0.0;
    for i in 1..s.n_x() - 1 {
        let births: f64 = (0..s.n_age_nodes()).map(|j| w[j] * b[j * s.n_x() + i] * psi.get(j, i)).sum();
        renewal = renewal.max((births - psi0[i]).abs() / scale);
    }
    ok &= renewal <= 1e-5;
    parts.push(format!("Dirichlet: sigma_min/||M|| = {:.1e}, renewal defect {renewal:.1e}", sigma / norm));
    check(ok, parts.join("; "))
}

fn cocycle_defect(n_sub: usize) -> f64 {
    let s = spec(1.0, 41, Boundary::Dirichlet, 1.0, 4, "0", "1", "0.05 + 0.02*x + 0.3*a^2");
    let gen = GeneratorSpec::with_death(
        RateExpression::parse("0.05 + 0.02*x + 0.3*a^2").unwrap(),
        RateExpression::parse("1 + a + x").unwrap(),
        SpatialField::zeros(41),
    );
    let v = SpatialField((0..41).map(|i| {
        let x = s.spatial().node(i);
        (PI * x).sin() + 0.3 * (2.0 * PI * x).sin()
    }).collect());
    let (sigma, mid, a) = (0.1, 0.35, 0.9);
    let two = evolve(&gen, &evolve(&gen, &v, sigma, mid, n_sub, &s).unwrap(), mid, a, n_sub, &s).unwrap();
    let one = evolve(&gen, &v, sigma, a, n_sub, &s).unwrap();
    two.iter().zip(one.iter()).fold(0.0, |m, (p, q)| m.max((p - q).abs()))
}

fn evolution_axioms() -> Outcome {
    let r1 = cocycle_defect(16) / cocycle_defect(32);
    let r2 = cocycle_defect(32) / cocycle_defect(64);
    let order = (3.5..=4.5).contains(&r1) && (3.5..=4.5).contains(&r2);

    let s = spec(1.0, 21, Boundary::Neumann, 1.0, 4, "0", "1", "1 + x*a");
    let gen = GeneratorSpec::of_model(&s);
    let v = SpatialField((0..21).map(|i| (i as f64).sin()).collect());
    let same = evolve(&gen, &v, 0.4, 0.4, 5, &s).unwrap();
    let identity = same.iter().zip(v.iter()).all(|(p, q)| p.to_bits() == q.to_bits());
    let c = evolve(&gen, &SpatialField::constant(21, 2.5), 0.0, 0.9, 7, &s).unwrap();
    let constant = c.iter().fold(0.0f64, |m, x| m.max((x - 2.5).abs()));

    let s = spec(1.0, 41, Boundary::Dirichlet, 1.0, 10, "0", "1", "0.5 + 0.5*x");
    let gen = GeneratorSpec::with_death(
        RateExpression::parse("0.5 + 0.5*x").unwrap(),
        RateExpression::parse("2").unwrap(),
        SpatialField::zeros(41),
    );
    let n = positivity_safe_substeps(&gen, &s).unwrap();
    let prop = AgePropagator::new(&gen, &s, n).unwrap();
    let mut lowest = f64::INFINITY;
    for k in 0..41 {
        let mut e = vec![0.0; 41];
        e[k] = 1.0;
        lowest = prop.propagate(&e).values().iter().fold(lowest, |m, &x| m.min(x));
    }

    let s = spec(PI, 201, Boundary::Dirichlet, 1.0, 4, "0", "1", "0.1");
    let gen = GeneratorSpec::of_model(&s);
    let sine = SpatialField((0..201).map(|i| s.spatial().node(i).sin()).collect());
    let out = evolve(&gen, &sine, 0.0, 1.0, 20, &s).unwrap();
    let heat = out.iter().zip(sine.iter()).fold(0.0f64, |m, (p, q)| m.max((p - (-0.1f64).exp() * q).abs()));

    check(
        order && identity && lowest >= -1e-12 && constant <= 1e-10 && heat <= 1e-3,
        format!(
            "cocycle ratios {r1:.3}, {r2:.3}; identity {identity}; min entry {lowest:.1e}; constant drift {constant:.1e}; heat mode error {heat:.1e}"
        ),
    )
}

fn global_decay() -> Outcome {
    let start = Instant::now();
    let mu = 1.0;
    let s = spec(1.0, 21, Boundary::Neumann, 2.0, 100, "1 + z", "0.5*exp(-z)", "0.1");
    let u0 = AgeSpaceField::from_fn(&s, |_, x| 1.0 + 0.5 * (PI * x).cos());
    let env = Envelopes {
        b_star: RateExpression::constant(mu / 2.0),
        m_star: RateExpression::constant(mu),
    };
    let r = global_decay_check(&s, &u0, &env).map_err(|e| e.to_string())?;
    within(Duration::from_secs(120), start)?;
    let decay = r.decay_time.unwrap_or(f64::INFINITY);
    let predicted = r.predicted_time.unwrap_or(f64::NAN);
    check(
        r.hypotheses_hold() && r.passed() && decay <= predicted,
        format!(
            "envelope r0 {:.4}, omega0 {:.4}, decay below 1e-3 at t = {decay:.2}, envelope time {predicted:.2}, comparison {}, notes [{}]",
            r.envelope_r0,
            r.omega0.unwrap_or(f64::NAN),
            r.comparison_holds,
            r.notes.join("; ")
        ),
    )
}

fn run_cli(args: &[&str], out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_agestab"))
        .args(args)
        .arg("--output")
        .arg(out)
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited with {status}"))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("logistic.toml");
    std::fs::write(
        &cfg,
        "[grid]\nlength = 1.0\nn_x = 11\nboundary = \"neumann\"\n[age]\na_max = 2.0\nn_a = 60\n\
         [rates]\nm = \"0.5 + z\"\nb = \"1.2\"\nd = \"0.1\"\n[run]\nequilibrium = \"homogeneous\"\n",
    )
    .map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap();
    let mut compared = 0;
    for (command, files) in [("verdict", &["report.txt"][..]), ("spectrum", &["report.txt", "scan.csv"][..])] {
        let runs: Vec<_> = (0..2).map(|k| dir.path().join(format!("{command}_{k}"))).collect();
        for out in &runs {
            run_cli(&[command, cfg], out)?;
        }
        for f in files {
            let a = std::fs::read(runs[0].join(f)).map_err(|e| e.to_string())?;
            let b = std::fs::read(runs[1].join(f)).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!("{command}: {f} differs between runs"));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} output files byte-identical across repeated verdict and spectrum runs"))
}

fn monotonicity() -> Outcome {
    let lambdas: Vec<f64> = (0..9).map(|k| -2.0 + 0.5 * k as f64).collect();
    let mut parts = Vec::new();
    let mut ok = true;
    let logistic = spec(1.0, 21, Boundary::Neumann, 2.0, 100, "0.5 + z", "1.2*exp(-0.1*z)", "0.1");
    let cases = [
        ("Neumann constant", spec(1.0, 21, Boundary::Neumann, 2.0, 100, "1", "2", "0.1"), false),
        ("Dirichlet x-dependent", spec(1.0, 21, Boundary::Dirichlet, 2.0, 100, "0.5 + x", "2*exp(-a)*(1 + x)", "0.1 + 0.05*a"), false),
        ("Neumann positive equilibrium", logistic, true),
    ];
    for (name, s, positive) in cases {
        let eq = if positive {
            homogeneous_equilibrium(&s).map_err(|e| e.to_string())?
        } else {
            trivial_equilibrium(&s)
        };
        let lin = build_linearization(&eq, &s).map_err(|e| e.to_string())?;
        let ctx = SpectralContext::new(&lin, &s).map_err(|e| e.to_string())?;
        let r: Vec<f64> = lambdas.iter().map(|&l| ctx.r_q(l)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let dec = r.windows(2).all(|p| p[1] < p[0]);
        ok &= dec;
        parts.push(format!("{name}: r from {:.3} to {:.3}, decreasing {dec}", r[0], r[8]));
    }
    check(ok, parts.join("; "))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("closed-form r0 on random constant-rate specs", closed_form_r0_random),
        ("dominated rates give a stable trivial equilibrium", dominated_rates),
        ("lambda0 threshold", lambda0_threshold),
        ("spectral and dynamical rates agree", spectral_dynamical),
        ("verdict and simulation agree in sign", verdict_simulation_agreement),
        ("eigen-system reduction", eigen_system_reduction),
        ("evolution operator axioms", evolution_axioms),
        ("global decay under envelopes", global_decay),
        ("determinism of verdict and spectrum", determinism),
        ("r(Q_lambda) strictly decreasing", monotonicity),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", k + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.1}s]", k + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
