//! Time stepping along characteristics with `dt = da`.
//!
//! One step shifts every age row by one cell: half of the death factor, the
//! pure-diffusion cell propagator, then the other half. The newborn row is
//! closed by the discrete renewal condition.

use rayon::prelude::*;

use crate::diffusion::{AgePropagator, GeneratorSpec};
use crate::error::{Error, Result};
use crate::expr::Var;
use crate::linearization::LinearizedModel;
use crate::model::{norm_l1_l2, norm_l1_sup, weighted_total, AgeSpaceField, ModelSpec, Rate, SpatialField};

pub const DEFAULT_BLOW_UP_CAP: f64 = 1e12;

const CLOSURE_MAX_ITER: usize = 50;

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub state: AgeSpaceField,
}

/// Per-step records of a run. Index 0 is the initial state.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub birth_series: Vec<SpatialField>,
    pub totals: Vec<SpatialField>,
    pub norm_l1_sup: Vec<f64>,
    pub norm_l1_l2: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    pub final_state: AgeSpaceField,
    /// Set when the sup norm passed the cap and the run stopped early.
    pub blew_up: bool,
}

impl Trajectory {
    fn start(u0: &AgeSpaceField, spec: &ModelSpec) -> Result<Self> {
        Ok(Trajectory {
            times: vec![0.0],
            birth_series: vec![SpatialField(u0.row(0).to_vec())],
            totals: vec![weighted_total(u0, spec)?],
            norm_l1_sup: vec![norm_l1_sup(u0, spec)],
            norm_l1_l2: vec![norm_l1_l2(u0, spec)],
            snapshots: vec![Snapshot { step: 0, state: u0.clone() }],
            final_state: u0.clone(),
            blew_up: false,
        })
    }

    fn record(&mut self, step: usize, t: f64, u: &AgeSpaceField, birth: SpatialField, stride: usize, spec: &ModelSpec) -> Result<()> {
        self.times.push(t);
        self.birth_series.push(birth);
        self.totals.push(weighted_total(u, spec)?);
        self.norm_l1_sup.push(norm_l1_sup(u, spec));
        self.norm_l1_l2.push(norm_l1_l2(u, spec));
        if stride > 0 && step.is_multiple_of(stride) {
            self.snapshots.push(Snapshot { step, state: u.clone() });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Number of `da`-steps covering `horizon`.
pub fn step_count(horizon: f64, spec: &ModelSpec) -> Result<usize> {
    let da = spec.age().delta();
    let n = (horizon / da).round();
    if !(horizon >= 0.0) || (n * da - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::Precondition(format!(
            "horizon {horizon} is not a multiple of the age step {da}"
        )));
    }
    Ok(n as usize)
}

fn half_death_factors(m: &[f64], da: f64) -> Vec<f64> {
    m.iter().map(|mi| (-0.5 * da * mi).exp()).collect()
}

/// Shifts every row one age cell. Row 0 of the result is left at zero.
fn shift(
    prop: &AgePropagator,
    half: &[f64],
    u: &AgeSpaceField,
    source: Option<(&AgeSpaceField, &[f64], f64)>,
) -> AgeSpaceField {
    let n_x = u.n_x();
    let n_cells = prop.n_cells();
    let mut out = AgeSpaceField::zeros(n_cells + 1, n_x);
    out.values_mut()[n_x..]
        .par_chunks_mut(n_x)
        .with_min_len(8)
        .enumerate()
        .for_each(|(j, row)| {
            let mut scratch = vec![0.0; n_x];
            let h0 = &half[j * n_x..(j + 1) * n_x];
            let h1 = &half[(j + 1) * n_x..(j + 2) * n_x];
            for i in 0..n_x {
                row[i] = u.get(j, i);
            }
            if let Some((g, wbar, hh)) = source {
                for i in 0..n_x {
                    row[i] += hh * g.get(j, i) * wbar[i];
                }
            }
            for i in 0..n_x {
                row[i] *= h0[i];
            }
            prop.apply_cell(j, row, &mut scratch);
            for i in 0..n_x {
                row[i] *= h1[i];
            }
        });
    out
}

/// Stepper for the full nonlinear problem.
#[derive(Debug, Clone)]
pub struct Stepper<'a> {
    spec: &'a ModelSpec,
    prop: AgePropagator,
    weights: Vec<f64>,
    birth_depends_on_z: bool,
}

impl<'a> Stepper<'a> {
    pub fn new(spec: &'a ModelSpec) -> Result<Self> {
        Self::with_substeps(spec, spec.n_substeps())
    }

    pub fn with_substeps(spec: &'a ModelSpec, n_substeps: usize) -> Result<Self> {
        let prop = AgePropagator::new(&GeneratorSpec::of_model(spec), spec, n_substeps)?;
        Ok(Stepper {
            spec,
            prop,
            weights: spec.age().weights(),
            birth_depends_on_z: spec.rates().b.depends_on(Var::Z),
        })
    }

    /// One step of length `da`. Returns the new state and its birth trace.
    pub fn step(&self, u: &AgeSpaceField) -> Result<(AgeSpaceField, SpatialField)> {
        let spec = self.spec;
        u.check_shape(spec)?;
        let ubar = weighted_total(u, spec)?;
        let m = spec.tabulate(Rate::M, &ubar)?;
        let half = half_death_factors(&m, spec.age().delta());
        let mut next = shift(&self.prop, &half, u, None);
        let birth = self.close(&mut next)?;
        Ok((next, birth))
    }

    /// Solves `u(0) = sum_j w_j b(ubar, a_j) u(a_j)` for the newborn row,
    /// with `ubar` depending on `u(0)` through its own quadrature weight.
    fn close(&self, u: &mut AgeSpaceField) -> Result<SpatialField> {
        let spec = self.spec;
        let n_x = spec.n_x();
        let w = &self.weights;
        let rho0 = spec.rho_row(0);
        let mut interior = SpatialField::zeros(n_x);
        for j in 1..spec.n_age_nodes() {
            let rho = spec.rho_row(j);
            for i in 0..n_x {
                interior[i] += w[j] * rho[i] * u.get(j, i);
            }
        }
        let mut u0 = SpatialField::zeros(n_x);
        let mut iterations = if self.birth_depends_on_z { CLOSURE_MAX_ITER } else { 1 };
        let mut gap = f64::INFINITY;
        while iterations > 0 {
            iterations -= 1;
            let ubar = SpatialField((0..n_x).map(|i| interior[i] + w[0] * rho0[i] * u0[i]).collect());
            let b = spec.tabulate(Rate::B, &ubar)?;
            gap = 0.0;
            for i in 0..n_x {
                let mut births = 0.0;
                for j in 1..spec.n_age_nodes() {
                    births += w[j] * b[j * n_x + i] * u.get(j, i);
                }
                let denom = 1.0 - w[0] * b[i];
                if denom <= 0.0 {
                    return Err(Error::Precondition(
                        "age step too coarse: the newborn weight in the birth integral reaches 1".into(),
                    ));
                }
                let new = births / denom;
                gap = gap.max((new - u0[i]).abs() / (1.0 + new.abs()));
                u0[i] = new;
            }
            if gap <= 4.0 * f64::EPSILON {
                break;
            }
        }
        if self.birth_depends_on_z && gap > 1e-12 {
            return Err(Error::NoConvergence {
                what: "renewal closure".into(),
                iterations: CLOSURE_MAX_ITER,
                gap,
            });
        }
        u.row_mut(0).copy_from_slice(&u0);
        Ok(u0)
    }
}

/// One nonlinear step; see [`Stepper::step`].
pub fn nonlinear_step(u: &AgeSpaceField, spec: &ModelSpec) -> Result<(AgeSpaceField, SpatialField)> {
    Stepper::new(spec)?.step(u)
}

fn run<F>(u0: &AgeSpaceField, horizon: f64, spec: &ModelSpec, stride: usize, cap: f64, mut step: F) -> Result<Trajectory>
where
    F: FnMut(&AgeSpaceField) -> Result<(AgeSpaceField, SpatialField)>,
{
    u0.check_shape(spec)?;
    let n = step_count(horizon, spec)?;
    let da = spec.age().delta();
    let mut traj = Trajectory::start(u0, spec)?;
    let mut u = u0.clone();
    for k in 1..=n {
        let (next, birth) = step(&u)?;
        if !next.is_finite() {
            traj.final_state = u;
            return Err(Error::BlowUp { step: k });
        }
        u = next;
        traj.record(k, k as f64 * da, &u, birth, stride, spec)?;
        if u.sup_norm() > cap {
            traj.blew_up = true;
            break;
        }
    }
    traj.final_state = u;
    Ok(traj)
}

/// Iterates [`nonlinear_step`] up to `horizon`, keeping a snapshot every
/// `snapshot_stride` steps (0 keeps only the initial one).
pub fn simulate(u0: &AgeSpaceField, horizon: f64, spec: &ModelSpec, snapshot_stride: usize) -> Result<Trajectory> {
    simulate_with_cap(u0, horizon, spec, snapshot_stride, DEFAULT_BLOW_UP_CAP)
}

pub fn simulate_with_cap(
    u0: &AgeSpaceField,
    horizon: f64,
    spec: &ModelSpec,
    snapshot_stride: usize,
    cap: f64,
) -> Result<Trajectory> {
    let stepper = Stepper::new(spec)?;
    run(u0, horizon, spec, snapshot_stride, cap, |u| stepper.step(u))
}

/// Stepper for the problem linearized at an equilibrium.
#[derive(Debug, Clone)]
pub struct LinearStepper<'a> {
    lin: &'a LinearizedModel,
    spec: &'a ModelSpec,
    prop: AgePropagator,
    half: Vec<f64>,
    weights: Vec<f64>,
    nonlocal: bool,
}

impl<'a> LinearStepper<'a> {
    pub fn new(lin: &'a LinearizedModel, spec: &'a ModelSpec, include_nonlocal: bool) -> Result<Self> {
        let prop = AgePropagator::new(&GeneratorSpec::diffusion(lin.gen_phi.d.clone()), spec, spec.n_substeps())?;
        let half = half_death_factors(lin.death.values(), spec.age().delta());
        let nonlocal = include_nonlocal && lin.kernel_factor.values().iter().any(|&g| g != 0.0);
        Ok(LinearStepper {
            lin,
            spec,
            prop,
            half,
            weights: spec.age().weights(),
            nonlocal,
        })
    }

    pub fn step(&self, psi: &AgeSpaceField) -> Result<(AgeSpaceField, SpatialField)> {
        let spec = self.spec;
        psi.check_shape(spec)?;
        if !self.nonlocal {
            let mut next = shift(&self.prop, &self.half, psi, None);
            let birth = self.close(&mut next);
            return Ok((next, birth));
        }
        let hh = 0.5 * spec.age().delta();
        let g = &self.lin.kernel_factor;
        let old = weighted_total(psi, spec)?;
        let base = shift(&self.prop, &self.half, psi, Some((g, &old, hh)));
        // predictor with the old total at the new time level, then one corrector
        let mut next = base.clone();
        self.add_source(&mut next, &old, hh);
        self.close(&mut next);
        let predicted = weighted_total(&next, spec)?;
        let mut next = base;
        self.add_source(&mut next, &predicted, hh);
        let birth = self.close(&mut next);
        Ok((next, birth))
    }

    fn add_source(&self, psi: &mut AgeSpaceField, wbar: &[f64], hh: f64) {
        let g = &self.lin.kernel_factor;
        for j in 1..psi.n_age_nodes() {
            let row = psi.row_mut(j);
            for i in 0..row.len() {
                row[i] += hh * g.get(j, i) * wbar[i];
            }
        }
    }

    /// Exact solve of the linear renewal condition for the newborn row.
    fn close(&self, psi: &mut AgeSpaceField) -> SpatialField {
        let spec = self.spec;
        let lin = self.lin;
        let w = &self.weights;
        let n_x = spec.n_x();
        let mut out = SpatialField::zeros(n_x);
        for i in 0..n_x {
            let c = lin.birth_correction[i];
            let mut births = 0.0;
            let mut total = 0.0;
            for j in 1..spec.n_age_nodes() {
                births += w[j] * lin.birth_base.get(j, i) * psi.get(j, i);
                total += w[j] * lin.rho_grid.get(j, i) * psi.get(j, i);
            }
            let denom = 1.0 - w[0] * (lin.birth_base.get(0, i) + c * lin.rho_grid.get(0, i));
            out[i] = (births + c * total) / denom;
        }
        psi.row_mut(0).copy_from_slice(&out);
        out
    }
}

/// Runs the linearized problem. Without `include_nonlocal` the death
/// perturbation is dropped and only the frozen birth and generator remain.
pub fn linear_simulate(
    psi0: &AgeSpaceField,
    horizon: f64,
    lin: &LinearizedModel,
    spec: &ModelSpec,
    include_nonlocal: bool,
    snapshot_stride: usize,
) -> Result<Trajectory> {
    let stepper = LinearStepper::new(lin, spec, include_nonlocal)?;
    run(psi0, horizon, spec, snapshot_stride, f64::INFINITY, |u| stepper.step(u))
}

/// Least-squares slope of `ln(norm)` against time over the trailing
/// `window` fraction of the series.
pub fn fit_exponential_rate(series: &[(f64, f64)], window: f64) -> Result<f64> {
    if series.len() < 10 {
        return Err(Error::Fit(format!("need at least 10 samples, got {}", series.len())));
    }
    if !(window > 0.0 && window <= 1.0) {
        return Err(Error::Fit(format!("window fraction {window} outside (0, 1]")));
    }
    let n = ((window * series.len() as f64).ceil() as usize).clamp(2, series.len());
    let tail = &series[series.len() - n..];
    if let Some(&(t, v)) = tail.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Fit(format!("norm {v} at t = {t} is not positive")));
    }
    let nf = n as f64;
    let tm = tail.iter().map(|p| p.0).sum::<f64>() / nf;
    let ym = tail.iter().map(|p| p.1.ln()).sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for &(t, v) in tail {
        sxy += (t - tm) * (v.ln() - ym);
        sxx += (t - tm) * (t - tm);
    }
    if sxx == 0.0 {
        return Err(Error::Fit("all samples at the same time".into()));
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::positivity_safe_substeps;
    use crate::equilibrium::{homogeneous_equilibrium, trivial_equilibrium};
    use crate::linearization::build_linearization;
    use crate::model::{AgeGrid, Boundary, SpatialGrid, VitalRates};
    use proptest::prelude::*;

    fn spec(m: &str, b: &str, d: &str, bc: Boundary, n_x: usize, a_max: f64, n_a: usize) -> ModelSpec {
        ModelSpec::new(
            SpatialGrid::new(1.0, n_x, bc).unwrap(),
            AgeGrid::new(a_max, n_a).unwrap(),
            VitalRates::parse(m, b, d, "1").unwrap(),
        )
        .unwrap()
    }

    fn series(t: &Trajectory) -> Vec<(f64, f64)> {
        t.times.iter().copied().zip(t.norm_l1_sup.iter().copied()).collect()
    }

    #[test]
    fn zero_is_invariant() {
        let s = spec("1 + z", "2", "0.1", Boundary::Neumann, 11, 1.0, 20);
        let (u, b) = nonlinear_step(&s.zeros(), &s).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
        assert!(b.iter().all(|&v| v == 0.0));
        let t = simulate(&s.zeros(), 1.0, &s, 5).unwrap();
        assert_eq!(t.len(), 21);
        assert!(t.norm_l1_sup.iter().all(|&v| v == 0.0));
        assert!(t.snapshots.iter().all(|sn| sn.state.sup_norm() == 0.0));
    }

    #[test]
    fn stationary_profile_is_kept() {
        // R = 1 for the continuous problem: b0 = m0 / (1 - e^{-m0 a_m})
        let (m0, a_m) = (0.5f64, 2.0);
        let b0 = m0 / (1.0 - (-m0 * a_m).exp());
        let s = spec(&m0.to_string(), &b0.to_string(), "0.3", Boundary::Neumann, 11, a_m, 400);
        let u = AgeSpaceField::from_fn(&s, |a, _| (-m0 * a).exp());
        let (next, _) = nonlinear_step(&u, &s).unwrap();
        assert!(next.axpy(-1.0, &u).sup_norm() <= 1e-6);
    }

    #[test]
    fn positivity_in_safe_regime() {
        let s = spec("1 + z + x", "2*exp(-z)", "0.5 + 0.5*x", Boundary::Dirichlet, 21, 1.0, 20);
        let n = positivity_safe_substeps(&GeneratorSpec::of_model(&s), &s).unwrap();
        let stepper = Stepper::with_substeps(&s, n).unwrap();
        let mut state = 12345u64;
        let u = AgeSpaceField::from_fn(&s, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        });
        let (next, _) = stepper.step(&u).unwrap();
        assert!(next.values().iter().all(|&v| v >= -1e-12));
    }

    #[test]
    fn blow_up_is_flagged() {
        let s = spec("0", "20", "0.1", Boundary::Neumann, 5, 1.0, 40);
        let u0 = AgeSpaceField::from_fn(&s, |_, _| 1.0);
        let t = simulate_with_cap(&u0, 50.0, &s, 0, 1e6).unwrap();
        assert!(t.blew_up);
        assert!(*t.times.last().unwrap() < 50.0);
        assert!(t.final_state.sup_norm() > 1e6);
    }

    #[test]
    fn horizon_must_align() {
        let s = spec("1", "1", "0.1", Boundary::Neumann, 5, 1.0, 10);
        assert!(matches!(simulate(&s.zeros(), 0.55, &s, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn logistic_run_converges_to_equilibrium() {
        let s = spec("0.5 + z", "1.2", "0.1", Boundary::Neumann, 11, 2.0, 80);
        let eq = homogeneous_equilibrium(&s).unwrap();
        let t = simulate(&eq.phi.scaled(1.1), 20.0, &s, 0).unwrap();
        let start = eq.phi.scaled(0.1).sup_norm();
        let end = t.final_state.axpy(-1.0, &eq.phi).sup_norm();
        assert!(end < 1e-3 * start, "{end} vs {start}");
    }

    #[test]
    fn frozen_equilibrium_stays_put() {
        let s = spec("0.5 + z", "1.2", "0.1", Boundary::Neumann, 21, 2.0, 200);
        let eq = homogeneous_equilibrium(&s).unwrap();
        let t = simulate(&eq.phi, 1.0, &s, 10).unwrap();
        let scale = eq.phi.sup_norm();
        for snap in &t.snapshots {
            assert!(snap.state.axpy(-1.0, &eq.phi).sup_norm() / scale <= 1e-4);
        }
    }

    #[test]
    fn birth_trace_matches_quadrature() {
        let s = spec("0.5 + z", "2*exp(-z) + 0.1*x", "0.1 + 0.05*a", Boundary::Neumann, 11, 2.0, 40);
        let mut u = AgeSpaceField::from_fn(&s, |a, x| (1.0 + x) * (-a).exp());
        let stepper = Stepper::new(&s).unwrap();
        let w = s.age().weights();
        for _ in 0..5 {
            let (next, birth) = stepper.step(&u).unwrap();
            let ubar = weighted_total(&next, &s).unwrap();
            let b = s.tabulate(Rate::B, &ubar).unwrap();
            for i in 0..s.n_x() {
                let q: f64 = (0..s.n_age_nodes()).map(|j| w[j] * b[j * s.n_x() + i] * next.get(j, i)).sum();
                assert!((q - birth[i]).abs() <= 1e-12 * (1.0 + q.abs()));
                assert_eq!(birth[i], next.get(0, i));
            }
            u = next;
        }
    }

    #[test]
    fn linear_zero_and_trivial_kernel() {
        let s = spec("1", "2", "0.1", Boundary::Neumann, 11, 1.0, 20);
        let lin = build_linearization(&trivial_equilibrium(&s), &s).unwrap();
        let t = linear_simulate(&s.zeros(), 1.0, &lin, &s, true, 1).unwrap();
        assert!(t.norm_l1_sup.iter().all(|&v| v == 0.0));
        let psi = AgeSpaceField::from_fn(&s, |a, x| (1.0 + x) * (-a).exp());
        let a = linear_simulate(&psi, 1.0, &lin, &s, true, 1).unwrap();
        let b = linear_simulate(&psi, 1.0, &lin, &s, false, 1).unwrap();
        for (p, q) in a.snapshots.iter().zip(&b.snapshots) {
            let same = p.state.values().iter().zip(q.state.values()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn nonlocal_off_when_death_ignores_density() {
        // dm/dz = 0 at a positive equilibrium: the kernel vanishes
        let s = spec("0.5", "1.5*exp(-z)", "0.1", Boundary::Neumann, 11, 2.0, 40);
        let eq = homogeneous_equilibrium(&s).unwrap();
        let lin = build_linearization(&eq, &s).unwrap();
        let psi = AgeSpaceField::from_fn(&s, |a, x| (1.0 + x) * (-a).exp());
        let a = linear_simulate(&psi, 1.0, &lin, &s, true, 1).unwrap();
        let b = linear_simulate(&psi, 1.0, &lin, &s, false, 1).unwrap();
        for (p, q) in a.snapshots.iter().zip(&b.snapshots) {
            assert!(p.state.values().iter().zip(q.state.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    /// Root of `sum_j w_j b0 e^{-(lambda + m0) a_j} = 1` by bisection.
    fn scalar_lambda0(b0: f64, m0: f64, a_m: f64, n_a: usize) -> f64 {
        let h = a_m / n_a as f64;
        let f = |l: f64| {
            (0..=n_a)
                .map(|j| {
                    let w = if j == 0 || j == n_a { 0.5 * h } else { h };
                    w * b0 * (-(l + m0) * j as f64 * h).exp()
                })
                .sum::<f64>()
                - 1.0
        };
        let (mut lo, mut hi) = (-m0 - 5.0, 20.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn linear_rate_matches_lambda0() {
        for b0 in [0.6, 2.5] {
            let s = spec("1", &b0.to_string(), "0.1", Boundary::Neumann, 11, 2.0, 100);
            let lin = build_linearization(&trivial_equilibrium(&s), &s).unwrap();
            let psi = AgeSpaceField::from_fn(&s, |a, _| (-a).exp());
            let t = linear_simulate(&psi, 10.0, &lin, &s, true, 0).unwrap();
            let rate = fit_exponential_rate(&series(&t), 0.5).unwrap();
            let oracle = scalar_lambda0(b0, 1.0, 2.0, 100);
            assert!((rate - oracle).abs() <= 5e-2, "{rate} vs {oracle}");
        }
    }

    #[test]
    fn linear_and_nonlinear_steppers_agree() {
        let s = spec("0.5 + 0.3*a + 0.2*x", "1.5*exp(-a) + 0.1*x", "0.1 + 0.05*a", Boundary::Dirichlet, 11, 2.0, 40);
        let lin = build_linearization(&trivial_equilibrium(&s), &s).unwrap();
        let u0 = AgeSpaceField::from_fn(&s, |a, x| (std::f64::consts::PI * x).sin() * (-a).exp());
        let a = simulate(&u0, 2.0, &s, 1).unwrap();
        let b = linear_simulate(&u0, 2.0, &lin, &s, false, 1).unwrap();
        for (p, q) in a.snapshots.iter().zip(&b.snapshots) {
            let scale = p.state.sup_norm().max(1e-300);
            assert!(p.state.axpy(-1.0, &q.state).sup_norm() <= 1e-12 * scale);
        }
    }

    #[test]
    fn fit_examples() {
        let pts = |f: &dyn Fn(f64) -> f64| (0..50).map(|k| 0.1 * k as f64).map(|t| (t, f(t))).collect::<Vec<_>>();
        assert!((fit_exponential_rate(&pts(&|t| (-2.0 * t).exp()), 0.5).unwrap() + 2.0).abs() <= 1e-9);
        assert!((fit_exponential_rate(&pts(&|t| 5.0 * (0.3 * t).exp()), 0.5).unwrap() - 0.3).abs() <= 1e-9);
        let noisy: Vec<(f64, f64)> = (0..200).map(|k| 0.1 * k as f64).map(|t| (t, (-t).exp() * (1.0 + 0.01 * t.sin()))).collect();
        assert!((fit_exponential_rate(&noisy, 0.5).unwrap() + 1.0).abs() <= 2e-2);
        assert!(matches!(fit_exponential_rate(&pts(&|_| 1.0)[..5], 0.5), Err(Error::Fit(_))));
        assert!(matches!(fit_exponential_rate(&pts(&|t| t - 4.0), 0.5), Err(Error::Fit(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn linear_simulate_is_linear(
            p in prop::collection::vec(-1.0f64..1.0, 11 * 11),
            q in prop::collection::vec(-1.0f64..1.0, 11 * 11),
            alpha in -2.0f64..2.0, beta in -2.0f64..2.0,
        ) {
            let s = spec("0.5 + z", "1.2", "0.1", Boundary::Neumann, 11, 2.0, 10);
            let eq = homogeneous_equilibrium(&s).unwrap();
            let lin = build_linearization(&eq, &s).unwrap();
            let rows = |v: &[f64]| AgeSpaceField::from_rows(v.chunks(11).map(<[f64]>::to_vec).collect());
            let (p, q) = (rows(&p), rows(&q));
            let combo = p.scaled(alpha).axpy(beta, &q);
            let tc = linear_simulate(&combo, 1.0, &lin, &s, true, 5).unwrap();
            let tp = linear_simulate(&p, 1.0, &lin, &s, true, 5).unwrap();
            let tq = linear_simulate(&q, 1.0, &lin, &s, true, 5).unwrap();
            for k in 0..tc.snapshots.len() {
                let expect = tp.snapshots[k].state.scaled(alpha).axpy(beta, &tq.snapshots[k].state);
                let scale = expect.sup_norm().max(tc.snapshots[k].state.sup_norm()).max(1e-300);
                prop_assert!(tc.snapshots[k].state.axpy(-1.0, &expect).sup_norm() <= 1e-10 * scale);
            }
        }
    }
}
