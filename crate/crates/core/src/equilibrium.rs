//! Stationary solutions: the trivial one, spatially homogeneous ones for
//! x-independent rates, and general ones by amplitude shooting.

use crate::diffusion::{AgePropagator, GeneratorSpec};
use crate::error::{Error, Result};
use crate::model::{weighted_total, AgeSpaceField, Boundary, ModelSpec, Rate, SpatialField};
use crate::spectral::perron_vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquilibriumKind {
    Trivial,
    Homogeneous,
    Shooting,
}

impl std::fmt::Display for EquilibriumKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EquilibriumKind::Trivial => "trivial",
            EquilibriumKind::Homogeneous => "homogeneous",
            EquilibriumKind::Shooting => "shooting",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub phi: AgeSpaceField,
    pub ubar: SpatialField,
    /// Value returned by [`residual`] for this `phi`.
    pub residual: f64,
    pub kind: EquilibriumKind,
    /// False when the residual is above the acceptance threshold.
    pub accepted: bool,
}

impl Equilibrium {
    pub fn is_trivial(&self) -> bool {
        self.phi.values().iter().all(|&v| v == 0.0)
    }
}

pub fn trivial_equilibrium(spec: &ModelSpec) -> Equilibrium {
    Equilibrium {
        phi: spec.zeros(),
        ubar: SpatialField::zeros(spec.n_x()),
        residual: 0.0,
        kind: EquilibriumKind::Trivial,
        accepted: true,
    }
}

/// Defect of `phi` as a discrete mild stationary solution: the larger of the
/// per-cell propagation defect divided by the age step and the defect in the
/// renewal condition. Death is frozen at the weighted total of `phi`.
pub fn residual(phi: &AgeSpaceField, spec: &ModelSpec) -> Result<f64> {
    phi.check_shape(spec)?;
    let ubar = weighted_total(phi, spec)?;
    let prop = AgePropagator::new(&GeneratorSpec::of_model_frozen(spec, ubar.clone()), spec, spec.n_substeps())?;
    let n_x = spec.n_x();
    let da = spec.age().delta();
    let mut defect: f64 = 0.0;
    let mut v = vec![0.0; n_x];
    let mut scratch = vec![0.0; n_x];
    for j in 0..prop.n_cells() {
        v.copy_from_slice(phi.row(j));
        prop.apply_cell(j, &mut v, &mut scratch);
        for (p, q) in phi.row(j + 1).iter().zip(&v) {
            defect = defect.max((p - q).abs() / da);
        }
    }
    let b = spec.tabulate(Rate::B, &ubar)?;
    let w = spec.age().weights();
    for i in 0..n_x {
        let births: f64 = (0..spec.n_age_nodes()).map(|j| w[j] * b[j * n_x + i] * phi.get(j, i)).sum();
        defect = defect.max((phi.get(0, i) - births).abs());
    }
    Ok(defect)
}

fn require_scalar_reduction(spec: &ModelSpec, what: &str) -> Result<()> {
    if spec.spatial().boundary() != Boundary::Neumann {
        return Err(Error::Precondition(format!("{what} requires Neumann boundary conditions")));
    }
    if !spec.rates_x_independent()? {
        return Err(Error::Precondition(format!("{what} requires rates independent of x")));
    }
    Ok(())
}

/// Survival `exp(-cumulative trapezoid of m(z, .))` on the age nodes, at `x_0`.
fn survival(z: f64, spec: &ModelSpec) -> Result<Vec<f64>> {
    let age = spec.age();
    let x = spec.spatial().node(0);
    let mut out = Vec::with_capacity(age.n_nodes());
    let mut integral = 0.0;
    let mut m_prev = spec.rate(Rate::M, z, age.node(0), x)?;
    out.push(1.0);
    for j in 1..age.n_nodes() {
        let m = spec.rate(Rate::M, z, age.node(j), x)?;
        integral += 0.5 * age.delta() * (m_prev + m);
        m_prev = m;
        out.push((-integral).exp());
    }
    Ok(out)
}

fn net_reproduction_unchecked(z: f64, spec: &ModelSpec) -> Result<f64> {
    let age = spec.age();
    let x = spec.spatial().node(0);
    let w = age.weights();
    let s = survival(z, spec)?;
    let mut r = 0.0;
    for j in 0..age.n_nodes() {
        r += w[j] * spec.rate(Rate::B, z, age.node(j), x)? * s[j];
    }
    Ok(r)
}

/// Net reproduction number `R(z)` for x-independent rates.
pub fn net_reproduction_scalar(z: f64, spec: &ModelSpec) -> Result<f64> {
    require_scalar_reduction(spec, "net reproduction number")?;
    net_reproduction_unchecked(z, spec)
}

const MONOTONE_SAMPLES: usize = 65;

/// Spatially constant positive equilibrium with `R(ubar*) = 1`.
///
/// `R` must be strictly monotone on `[0, z_max]`. For decreasing `R` the root
/// exists when `R(0) > 1`; increasing `R` (Allee effect) needs `R(0) < 1`.
pub fn homogeneous_equilibrium(spec: &ModelSpec) -> Result<Equilibrium> {
    require_scalar_reduction(spec, "homogeneous equilibrium")?;
    let z_max = spec.z_max();
    let samples: Vec<f64> = (0..MONOTONE_SAMPLES)
        .map(|k| net_reproduction_unchecked(z_max * k as f64 / (MONOTONE_SAMPLES - 1) as f64, spec))
        .collect::<Result<_>>()?;
    let decreasing = samples.windows(2).all(|p| p[1] < p[0]);
    let increasing = samples.windows(2).all(|p| p[1] > p[0]);
    let r0 = samples[0];
    let r_end = samples[MONOTONE_SAMPLES - 1];
    if decreasing && r0 <= 1.0 {
        return Err(Error::NoPositiveEquilibrium { r0 });
    }
    if !decreasing && !increasing {
        return Err(Error::Precondition("R(z) is not strictly monotone on [0, z_max]; bisection refused".into()));
    }
    if (r0 - 1.0) * (r_end - 1.0) >= 0.0 {
        return Err(Error::NotBracketed {
            what: "R(z) - 1".into(),
            lo: 0.0,
            hi: z_max,
        });
    }
    let (mut lo, mut hi) = (0.0, z_max);
    for _ in 0..200 {
        if hi - lo <= 1e-14 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let above = net_reproduction_unchecked(mid, spec)? > 1.0;
        if above == decreasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z = 0.5 * (lo + hi);
    let s = survival(z, spec)?;
    let w = spec.age().weights();
    let rho = spec.rho_row(0)[0];
    let mass: f64 = (0..s.len()).map(|j| w[j] * spec.rho_row(j)[0] * s[j]).sum();
    if !(mass > 0.0) {
        return Err(Error::Precondition(format!(
            "weighted survival integral is {mass}; rho must not vanish identically (rho(0) = {rho})"
        )));
    }
    let phi0 = z / mass;
    let rows = s.iter().map(|sj| vec![phi0 * sj; spec.n_x()]).collect();
    let phi = AgeSpaceField::from_rows(rows);
    let res = residual(&phi, spec)?;
    Ok(Equilibrium {
        ubar: weighted_total(&phi, spec)?,
        phi,
        residual: res,
        kind: EquilibriumKind::Homogeneous,
        accepted: true,
    })
}

#[derive(Debug, Clone)]
pub struct ShootingOptions {
    pub damping: f64,
    pub max_iter: usize,
    /// Relative tolerance of the inner fixed point in `ubar`.
    pub inner_tol: f64,
    /// Stop once `|r - 1|` falls below this.
    pub outer_tol: f64,
    pub max_outer: usize,
    /// Equilibria with a larger residual are returned with `accepted = false`.
    pub accept: f64,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        ShootingOptions {
            damping: 0.5,
            max_iter: 200,
            inner_tol: 1e-12,
            outer_tol: 1e-12,
            max_outer: 200,
            accept: 1e-4,
        }
    }
}

struct Shot {
    phi: AgeSpaceField,
    ubar: SpatialField,
    r: f64,
}

/// Principal eigenvector of the birth map with death frozen at `ubar`, and
/// the age profile it generates.
fn frozen_profile(spec: &ModelSpec, ubar: &SpatialField) -> Result<(AgeSpaceField, Vec<f64>, f64)> {
    let n_x = spec.n_x();
    let prop = AgePropagator::new(&GeneratorSpec::of_model_frozen(spec, ubar.clone()), spec, spec.n_substeps())?;
    let b = spec.tabulate(Rate::B, ubar)?;
    let w = spec.age().weights();
    let mut q = nalgebra::DMatrix::<f64>::zeros(n_x, n_x);
    let mut columns = Vec::with_capacity(n_x);
    for k in 0..n_x {
        let mut e = vec![0.0; n_x];
        e[k] = 1.0;
        let p = prop.propagate(&e);
        for j in 0..spec.n_age_nodes() {
            for i in 0..n_x {
                q[(i, k)] += w[j] * b[j * n_x + i] * p.get(j, i);
            }
        }
        columns.push(p);
    }
    let (r, v) = perron_vector(&q)?;
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let v: Vec<f64> = v.iter().map(|x| x.abs() / vmax).collect();
    let mut profile = spec.zeros();
    for (k, col) in columns.iter().enumerate() {
        if v[k] != 0.0 {
            for (o, p) in profile.values_mut().iter_mut().zip(col.values()) {
                *o += v[k] * p;
            }
        }
    }
    Ok((profile, v, r))
}

fn shoot(spec: &ModelSpec, s: f64, start: &SpatialField, opts: &ShootingOptions) -> Result<Shot> {
    let mut ubar = start.clone();
    let mut gap = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let (profile, _, _) = frozen_profile(spec, &ubar)?;
        let phi = profile.scaled(s);
        let target = weighted_total(&phi, spec)?;
        gap = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..ubar.len() {
            let next = (1.0 - opts.damping) * ubar[i] + opts.damping * target[i];
            gap = gap.max((next - ubar[i]).abs());
            scale = scale.max(next.abs());
            ubar[i] = next;
        }
        if gap <= opts.inner_tol * (1.0 + scale) {
            let (profile, _, r) = frozen_profile(spec, &ubar)?;
            return Ok(Shot {
                phi: profile.scaled(s),
                ubar,
                r,
            });
        }
    }
    Err(Error::NoConvergence {
        what: format!("fixed point for the weighted total at amplitude {s}"),
        iterations: opts.max_iter,
        gap,
    })
}

/// Amplitude shooting: for amplitude `s`, the profile `s * Pi(a, 0) v` with `v`
/// the principal eigenvector of the frozen birth map is iterated to a fixed
/// point in `ubar`; then `s` is chosen so that the frozen birth map has
/// spectral radius one. The outer root search is a bracketing false-position
/// method (Illinois variant).
pub fn solve_equilibrium(spec: &ModelSpec, bracket: (f64, f64), opts: &ShootingOptions) -> Result<Equilibrium> {
    let (s_lo, s_hi) = bracket;
    if s_lo == 0.0 && s_hi == 0.0 {
        return Ok(trivial_equilibrium(spec));
    }
    if !(s_lo >= 0.0 && s_hi > s_lo) {
        return Err(Error::Precondition(format!("invalid amplitude bracket [{s_lo}, {s_hi}]")));
    }
    let zero = SpatialField::zeros(spec.n_x());
    let lo_shot = shoot(spec, s_lo, &zero, opts)?;
    let hi_shot = shoot(spec, s_hi, &lo_shot.ubar, opts)?;
    let (mut a, mut fa) = (s_lo, lo_shot.r - 1.0);
    let (mut b, mut fb) = (s_hi, hi_shot.r - 1.0);
    if fa * fb > 0.0 {
        return Err(Error::NotBracketed {
            what: "r(Q0) - 1 over the amplitude".into(),
            lo: s_lo,
            hi: s_hi,
        });
    }
    let mut best = if fa.abs() < fb.abs() { lo_shot } else { hi_shot };
    let mut side = 0i8;
    for _ in 0..opts.max_outer {
        if (best.r - 1.0).abs() <= opts.outer_tol || (b - a) <= 1e-15 * b.abs().max(1.0) {
            break;
        }
        let mut c = (a * fb - b * fa) / (fb - fa);
        if !(c > a && c < b) {
            c = 0.5 * (a + b);
        }
        let shot = shoot(spec, c, &best.ubar, opts)?;
        let fc = shot.r - 1.0;
        if fc * fb > 0.0 {
            b = c;
            fb = fc;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        } else {
            a = c;
            fa = fc;
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        }
        best = shot;
    }
    let res = residual(&best.phi, spec)?;
    let accepted = res <= opts.accept && best.phi.values().iter().all(|&v| v >= -1e-12);
    Ok(Equilibrium {
        ubar: weighted_total(&best.phi, spec)?,
        phi: best.phi,
        residual: res,
        kind: EquilibriumKind::Shooting,
        accepted,
    })
}
