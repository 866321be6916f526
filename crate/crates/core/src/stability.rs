//! Stability verdicts from spectral data, and their checks by simulation.

use std::f64::consts::PI;
use std::fmt;

use crate::diffusion::{positivity_safe_substeps, GeneratorSpec};
use crate::equilibrium::{net_reproduction_scalar, trivial_equilibrium, Equilibrium};
use crate::error::{Error, Result};
use crate::expr::RateExpression;
use crate::linearization::{build_linearization, LinearizedModel};
use crate::model::{
    eval_rate, norm_l1_l2, norm_l1_sup, AgeSpaceField, Boundary, ModelSpec, Rate, VitalRates, VALIDATION_Z_SAMPLES,
};
use crate::spectral::{Scan, SpectralContext};
use crate::transport::{fit_exponential_rate, step_count, Stepper, DEFAULT_BLOW_UP_CAP};

pub const DEFAULT_BAND: f64 = 1e-3;
/// Allowed gap between the scalar and the matrix net reproduction number.
pub const R0_CONSISTENCY_TOL: f64 = 1e-3;
pub const FIT_WINDOW: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Stable,
    Unstable,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    RQ0Trivial,
    ClosedFormR0,
    DominantEigenvalue,
    P50Test,
}

/// Norm used to measure deviations from an equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormKind {
    /// Trapezoid L1 in age of the spatial sup norm.
    #[default]
    L1AgeSupSpace,
    L1AgeL2Space,
}

impl NormKind {
    pub fn norm(self, u: &AgeSpaceField, spec: &ModelSpec) -> f64 {
        match self {
            NormKind::L1AgeSupSpace => norm_l1_sup(u, spec),
            NormKind::L1AgeL2Space => norm_l1_l2(u, spec),
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Stable => "stable",
            Verdict::Unstable => "unstable",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::RQ0Trivial => "r_Q0_trivial",
            Basis::ClosedFormR0 => "closed_form_r0",
            Basis::DominantEigenvalue => "dominant_eigenvalue",
            Basis::P50Test => "P50_test",
        })
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::L1AgeSupSpace => "L1_age_sup_space",
            NormKind::L1AgeL2Space => "L1_age_L2_space",
        })
    }
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub verdict: Verdict,
    pub basis: Basis,
    pub r_q0: f64,
    pub lambda0: Option<f64>,
    pub lambda_star: Option<f64>,
    pub simulated_rate: Option<f64>,
    pub norm_kind: NormKind,
    /// Set when the verdict rests on a real-axis scan without the positivity
    /// that makes the real scan exhaustive.
    pub conditional: bool,
    pub notes: Vec<String>,
}

impl StabilityReport {
    fn new(verdict: Verdict, basis: Basis, r_q0: f64) -> Self {
        StabilityReport {
            verdict,
            basis,
            r_q0,
            lambda0: None,
            lambda_star: None,
            simulated_rate: None,
            norm_kind: NormKind::default(),
            conditional: false,
            notes: Vec::new(),
        }
    }

    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| format!("{x:.16e}"));
        let mut s = String::new();
        s.push_str(&format!("verdict={}\n", self.verdict));
        s.push_str(&format!("basis={}\n", self.basis));
        s.push_str(&format!("r_Q0={:.16e}\n", self.r_q0));
        s.push_str(&format!("lambda0={}\n", opt(self.lambda0)));
        s.push_str(&format!("lambda_star={}\n", opt(self.lambda_star)));
        s.push_str(&format!("simulated_rate={}\n", opt(self.simulated_rate)));
        s.push_str(&format!("norm_kind={}\n", self.norm_kind));
        s.push_str(&format!("conditional={}\n", self.conditional));
        s.push_str(&format!("notes={}\n", self.notes.join("; ")));
        s
    }
}

fn classify(value: f64, threshold: f64, band: f64, larger_is_unstable: bool) -> Verdict {
    let d = if larger_is_unstable { value - threshold } else { threshold - value };
    if d > band {
        Verdict::Unstable
    } else if d < -band {
        Verdict::Stable
    } else {
        Verdict::Inconclusive
    }
}

/// Verdict for the trivial equilibrium from `r(Q_0(0))`.
pub fn verdict_trivial(spec: &ModelSpec, band: f64) -> Result<StabilityReport> {
    let lin = build_linearization(&trivial_equilibrium(spec), spec)?;
    let ctx = SpectralContext::new(&lin, spec)?;
    let r = ctx.r_q(0.0)?;
    let mut report = StabilityReport::new(classify(r, 1.0, band, true), Basis::RQ0Trivial, r);
    if report.verdict == Verdict::Inconclusive {
        report.notes.push(format!("r(Q0) within {band} of 1"));
    }
    Ok(report)
}

/// Scalar net reproduction number at zero density, checked against the
/// Perron root of the matrix path.
pub fn closed_form_r0(spec: &ModelSpec) -> Result<f64> {
    let r0 = net_reproduction_scalar(0.0, spec)?;
    let lin = build_linearization(&trivial_equilibrium(spec), spec)?;
    let r = SpectralContext::new(&lin, spec)?.r_q(0.0)?;
    if (r - r0).abs() > R0_CONSISTENCY_TOL {
        return Err(Error::Precondition(format!(
            "scalar r0 = {r0} and matrix r(Q0) = {r} disagree by more than {R0_CONSISTENCY_TOL}"
        )));
    }
    Ok(r0)
}

/// Violated positivity hypotheses of the linearization: `b_phi > 0` and a
/// nonnegative death perturbation kernel.
fn positivity_failures(lin: &LinearizedModel) -> Vec<String> {
    let mut out = Vec::new();
    if lin.b_phi().values().iter().any(|&b| !(b > 0.0)) {
        out.push("b_phi > 0 violated".to_string());
    }
    if lin.kernel_factor.values().iter().any(|&g| g < 0.0) {
        out.push("kernel >= 0 violated".to_string());
    }
    out
}

/// Principle of linearized stability along the real axis.
pub fn verdict_equilibrium(eq: &Equilibrium, spec: &ModelSpec, band: f64, scan: Option<Scan>) -> Result<StabilityReport> {
    if !eq.accepted {
        return Err(Error::Precondition(format!(
            "equilibrium not accepted (residual {:e})",
            eq.residual
        )));
    }
    let lin = build_linearization(eq, spec)?;
    let ctx = SpectralContext::new(&lin, spec)?;
    let r = ctx.r_q(0.0)?;
    let lambda0 = ctx.find_lambda0()?;
    let found = ctx.dominant_real_eigenvalue(scan.unwrap_or_else(|| Scan::around(lambda0)))?;
    let mut report = StabilityReport::new(Verdict::Inconclusive, Basis::DominantEigenvalue, r);
    report.lambda0 = Some(lambda0);
    report.lambda_star = found.root;
    let Some(lambda) = found.root else {
        report.notes.push("no real eigenvalue in scan window".into());
        return Ok(report);
    };
    report.verdict = classify(lambda, 0.0, band, true);
    match report.verdict {
        Verdict::Inconclusive => report.notes.push(format!("|lambda*| <= {band}")),
        Verdict::Stable => {
            let failures = positivity_failures(&lin);
            if !failures.is_empty() {
                report.conditional = true;
                report.notes.extend(failures);
                report.notes.push("real-scan only, verdict conditional".into());
            }
        }
        Verdict::Unstable => {}
    }
    Ok(report)
}

/// Instability of a positive equilibrium under the sign conditions
/// `db/dz >= 0`, `dm/dz <= 0`: unstable when `r(Q_0(phi)) > 1`, or when the
/// dominant real eigenvalue is nonzero.
pub fn instability_test_p50(eq: &Equilibrium, spec: &ModelSpec, band: f64, scan: Option<Scan>) -> Result<StabilityReport> {
    let mut report = StabilityReport::new(Verdict::Inconclusive, Basis::P50Test, f64::NAN);
    if eq.is_trivial() || !eq.phi.values().iter().any(|&v| v > 0.0) {
        report.notes.push("requires positive equilibrium".into());
        return Ok(report);
    }
    if !eq.accepted {
        report.notes.push("equilibrium not accepted".into());
        return Ok(report);
    }
    let lin = build_linearization(eq, spec)?;
    let ctx = SpectralContext::new(&lin, spec)?;
    report.r_q0 = ctx.r_q(0.0)?;
    if lin.db_dz.values().iter().any(|&v| v < 0.0) {
        report.notes.push("∂₁b ≥ 0 violated".into());
    }
    if lin.dm_dz.values().iter().any(|&v| v > 0.0) {
        report.notes.push("∂₁m ≤ 0 violated".into());
    }
    if !report.notes.is_empty() {
        return Ok(report);
    }
    if report.r_q0 > 1.0 + band {
        report.verdict = Verdict::Unstable;
        report.notes.push("r(Q0(phi)) > 1".into());
        return Ok(report);
    }
    let lambda0 = ctx.find_lambda0()?;
    report.lambda0 = Some(lambda0);
    let found = ctx.dominant_real_eigenvalue(scan.unwrap_or_else(|| Scan::around(lambda0)))?;
    report.lambda_star = found.root;
    match found.root {
        Some(l) if l.abs() > band => {
            report.verdict = Verdict::Unstable;
            report.notes.push("dominant real eigenvalue nonzero".into());
        }
        Some(_) => report.notes.push(format!("|lambda*| <= {band}")),
        None => report.notes.push("no real eigenvalue in scan window".into()),
    }
    Ok(report)
}

/// Positive perturbation shape: decays over one lifespan in age; in space it
/// is the principal mode of the Laplacian for the boundary condition.
pub fn bump(spec: &ModelSpec) -> AgeSpaceField {
    let a_m = spec.age().a_max();
    let l = spec.spatial().length();
    let boundary = spec.spatial().boundary();
    AgeSpaceField::from_fn(spec, |a, x| {
        let space = match boundary {
            Boundary::Neumann => 1.0,
            Boundary::Dirichlet => (PI * x / l).sin().max(0.0),
        };
        (-a / a_m).exp() * space
    })
}

#[derive(Debug, Clone)]
pub struct SimulatedRate {
    /// `+inf` when the run blew up before enough samples were collected.
    pub rate: f64,
    pub blew_up: bool,
    /// `(t, ||u(t) - phi||)` up to the end of the fitted range.
    pub series: Vec<(f64, f64)>,
}

/// Growth rate of `||u(t) - phi||` from `u0 = phi (1 + eps) + eps ||phi|| bump`.
///
/// Growing deviations are followed only through their first decade, so the
/// fit sees the linear regime.
pub fn verify_by_simulation(eq: &Equilibrium, spec: &ModelSpec, epsilon: f64, horizon: f64, norm: NormKind) -> Result<SimulatedRate> {
    if !(epsilon > 0.0) {
        return Err(Error::Fit(format!("perturbation size {epsilon} gives no deviation to fit")));
    }
    let phi = &eq.phi;
    let scale = if eq.is_trivial() { 1.0 } else { phi.sup_norm() };
    let u0 = phi.scaled(1.0 + epsilon).axpy(epsilon * scale, &bump(spec));
    let n = step_count(horizon, spec)?;
    let da = spec.age().delta();
    let stepper = Stepper::new(spec)?;
    let deviation = |u: &AgeSpaceField| norm.norm(&u.axpy(-1.0, phi), spec);
    let d0 = deviation(&u0);
    let mut series = vec![(0.0, d0)];
    let mut u = u0;
    let mut blew_up = false;
    for k in 1..=n {
        let (next, _) = stepper.step(&u)?;
        if !next.is_finite() {
            return Err(Error::BlowUp { step: k });
        }
        u = next;
        let d = deviation(&u);
        series.push((k as f64 * da, d));
        if u.sup_norm() > DEFAULT_BLOW_UP_CAP {
            blew_up = true;
            break;
        }
        if d > 10.0 * d0 {
            break;
        }
    }
    if blew_up && series.len() < 10 {
        return Ok(SimulatedRate {
            rate: f64::INFINITY,
            blew_up,
            series,
        });
    }
    let rate = fit_exponential_rate(&series, FIT_WINDOW)?;
    Ok(SimulatedRate { rate, blew_up, series })
}

/// Rate envelopes for the global decay check.
#[derive(Debug, Clone)]
pub struct Envelopes {
    pub b_star: RateExpression,
    pub m_star: RateExpression,
}

#[derive(Debug, Clone)]
pub struct GlobalDecayReport {
    /// `b <= b_*` and `m >= m_*` on the grid for sampled densities.
    pub dominated: bool,
    /// Net reproduction number of the envelope model.
    pub envelope_r0: f64,
    pub subcritical: bool,
    pub bounded: bool,
    pub omega0: Option<f64>,
    /// Time at which the sup norm first fell below `1e-3` of its start.
    pub decay_time: Option<f64>,
    /// `ln(1e3) / |omega0|`.
    pub predicted_time: Option<f64>,
    /// `max_t ||u(t)|| e^{-omega0 t} / ||u0||`.
    pub envelope_constant: Option<f64>,
    /// `||u(t)|| <= ||S_*(t) u0||` at every step, `S_*` the envelope semigroup.
    pub comparison_holds: bool,
    pub horizon: f64,
    pub notes: Vec<String>,
}

impl GlobalDecayReport {
    pub fn hypotheses_hold(&self) -> bool {
        self.dominated && self.subcritical && self.bounded
    }

    pub fn passed(&self) -> bool {
        self.hypotheses_hold() && self.decay_time.is_some() && self.comparison_holds
    }
}

pub const BOUNDEDNESS_CAP: f64 = 1e6;

/// Checks the hypotheses of the comparison argument for global decay and, if
/// they hold, simulates from `u0` next to the envelope linear problem.
pub fn global_decay_check(spec: &ModelSpec, u0: &AgeSpaceField, envelopes: &Envelopes) -> Result<GlobalDecayReport> {
    if spec.spatial().boundary() != Boundary::Neumann {
        return Err(Error::Precondition("global decay check requires Neumann boundary conditions".into()));
    }
    u0.check_shape(spec)?;
    let mut report = GlobalDecayReport {
        dominated: true,
        envelope_r0: f64::NAN,
        subcritical: false,
        bounded: true,
        omega0: None,
        decay_time: None,
        predicted_time: None,
        envelope_constant: None,
        comparison_holds: false,
        horizon: 0.0,
        notes: Vec::new(),
    };
    let z_max = spec.z_max();
    for k in 0..VALIDATION_Z_SAMPLES {
        let z = z_max * k as f64 / (VALIDATION_Z_SAMPLES - 1) as f64;
        for j in 0..spec.n_age_nodes() {
            let a = spec.age().node(j);
            let bs = eval_rate("b_star", &envelopes.b_star, z, a, 0.0)?;
            let ms = eval_rate("m_star", &envelopes.m_star, z, a, 0.0)?;
            for i in 0..spec.n_x() {
                let x = spec.spatial().node(i);
                let b = spec.rate(Rate::B, z, a, x)?;
                let m = spec.rate(Rate::M, z, a, x)?;
                if b > bs || m < ms {
                    report.dominated = false;
                }
                let size = spec.rate(Rate::DbDz, z, a, x)?.abs() + m.abs() + spec.rate(Rate::DmDz, z, a, x)?.abs();
                if !(size <= BOUNDEDNESS_CAP) {
                    report.bounded = false;
                }
            }
        }
    }
    if !report.dominated {
        report.notes.push("b <= b_* or m >= m_* violated".into());
    }
    if !report.bounded {
        report.notes.push(format!("|db/dz| + |m| + |dm/dz| exceeds {BOUNDEDNESS_CAP}"));
    }
    let rates = VitalRates::new(
        envelopes.m_star.clone(),
        envelopes.b_star.clone(),
        spec.rates().d.clone(),
        spec.rates().rho.clone(),
        None,
        None,
    )?;
    let envelope = spec.with_rates(rates)?;
    report.envelope_r0 = net_reproduction_scalar(0.0, &envelope)?;
    report.subcritical = report.envelope_r0 < 1.0;
    if !report.subcritical {
        report.notes.push(format!("envelope net reproduction {} >= 1", report.envelope_r0));
    }
    if !report.hypotheses_hold() {
        return Ok(report);
    }

    let initial = u0.sup_norm();
    if initial == 0.0 {
        report.decay_time = Some(0.0);
        report.comparison_holds = true;
        report.notes.push("zero initial state".into());
        return Ok(report);
    }
    let lin = build_linearization(&trivial_equilibrium(&envelope), &envelope)?;
    let omega0 = SpectralContext::new(&lin, &envelope)?.find_lambda0()?;
    report.omega0 = Some(omega0);
    let predicted = 1e3f64.ln() / omega0.abs();
    report.predicted_time = Some(predicted);
    let da = spec.age().delta();
    let horizon = ((2.0 * predicted + spec.age().a_max()) / da).ceil() * da;
    report.horizon = horizon;

    // the comparison argument needs positive propagators
    let n_sub = positivity_safe_substeps(&GeneratorSpec::of_model(spec), spec)?.max(spec.n_substeps());
    let stepper = Stepper::with_substeps(spec, n_sub)?;
    let env_stepper = Stepper::with_substeps(&envelope, n_sub)?;
    let n = step_count(horizon, spec)?;
    let mut u = u0.clone();
    let mut v = u0.clone();
    let mut constant: f64 = 1.0;
    let mut comparison = true;
    for k in 1..=n {
        u = stepper.step(&u)?.0;
        v = env_stepper.step(&v)?.0;
        if !u.is_finite() {
            return Err(Error::BlowUp { step: k });
        }
        let t = k as f64 * da;
        let nu = u.sup_norm();
        if nu > v.sup_norm() * (1.0 + 1e-9) + 1e-300 {
            comparison = false;
        }
        constant = constant.max(nu / initial * (-omega0 * t).exp());
        if report.decay_time.is_none() && nu < 1e-3 * initial {
            report.decay_time = Some(t);
        }
    }
    report.envelope_constant = Some(constant);
    report.comparison_holds = comparison;
    if report.decay_time.is_none() {
        report.notes.push(format!("no decay below 1e-3 within t = {horizon}"));
    }
    Ok(report)
}
