//! Discrete parabolic evolution operators along age.
//!
//! The generator `A(a) w = div(d(a, x) grad w)` is discretized in flux form with
//! arithmetic means of `d` at cell midpoints. Dirichlet boundary nodes are held
//! at zero, Neumann boundaries use mirrored ghost nodes. An optional absorption
//! term `-m(ubar(x), a, x)` turns `A` into the shifted generator `A_phi`.
//!
//! Propagation over an age interval is a composition of Crank–Nicolson substeps
//! with coefficients frozen at the substep midpoints.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::RateExpression;
use crate::model::{eval_rate, AgeSpaceField, Boundary, ModelSpec, SpatialField};

/// Death term absorbed into the generator, frozen at a weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct Absorption {
    pub m: RateExpression,
    pub ubar: SpatialField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub d: RateExpression,
    pub absorb: Option<Absorption>,
}

impl GeneratorSpec {
    /// Pure diffusion `A(a)`.
    pub fn diffusion(d: RateExpression) -> Self {
        GeneratorSpec { d, absorb: None }
    }

    /// `A(a) - m(ubar, a, .)`.
    pub fn with_death(d: RateExpression, m: RateExpression, ubar: SpatialField) -> Self {
        GeneratorSpec {
            d,
            absorb: Some(Absorption { m, ubar }),
        }
    }

    /// The pure-diffusion generator of a model.
    pub fn of_model(spec: &ModelSpec) -> Self {
        Self::diffusion(spec.rates().d.clone())
    }

    /// The generator of a model with death frozen at `ubar`.
    pub fn of_model_frozen(spec: &ModelSpec, ubar: SpatialField) -> Self {
        Self::with_death(spec.rates().d.clone(), spec.rates().m.clone(), ubar)
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if let Some(abs) = &self.absorb {
            if abs.ubar.len() != spec.n_x() {
                return Err(Error::Shape {
                    expected: format!("ubar of length {}", spec.n_x()),
                    got: format!("{}", abs.ubar.len()),
                });
            }
        }
        Ok(())
    }
}

/// Tridiagonal matrix; `lower[i] = A[i][i-1]`, `upper[i] = A[i][i+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        Tridiagonal {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.matvec_into(v, &mut out);
        out
    }

    fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        let n = v.len();
        for i in 0..n {
            let mut s = self.diag[i] * v[i];
            if i > 0 {
                s += self.lower[i] * v[i - 1];
            }
            if i + 1 < n {
                s += self.upper[i] * v[i + 1];
            }
            out[i] = s;
        }
    }
}

/// Second-order flux-form discretization of the generator at age `a`.
pub fn assemble_generator(gen: &GeneratorSpec, a: f64, spec: &ModelSpec) -> Result<Tridiagonal> {
    gen.check(spec)?;
    let grid = spec.spatial();
    let n = grid.n_x();
    let h2 = grid.spacing() * grid.spacing();
    let d: Vec<f64> = (0..n)
        .map(|i| eval_rate("d", &gen.d, 0.0, a, grid.node(i)))
        .collect::<Result<_>>()?;
    // d at midpoints i + 1/2
    let mid: Vec<f64> = d.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    if let Some((k, v)) = mid.iter().enumerate().find(|(_, &v)| v <= 0.0) {
        return Err(Error::InvalidSpec(format!(
            "diffusivity d = {v} <= 0 at a = {a}, x = {}",
            0.5 * (grid.node(k) + grid.node(k + 1))
        )));
    }
    let mut t = Tridiagonal::zeros(n);
    for i in 1..n - 1 {
        t.lower[i] = mid[i - 1] / h2;
        t.upper[i] = mid[i] / h2;
        t.diag[i] = -(mid[i - 1] + mid[i]) / h2;
    }
    if grid.boundary() == Boundary::Neumann {
        t.upper[0] = 2.0 * mid[0] / h2;
        t.diag[0] = -2.0 * mid[0] / h2;
        t.lower[n - 1] = 2.0 * mid[n - 2] / h2;
        t.diag[n - 1] = -2.0 * mid[n - 2] / h2;
    }
    if let Some(abs) = &gen.absorb {
        let (lo, hi) = match grid.boundary() {
            Boundary::Neumann => (0, n),
            Boundary::Dirichlet => (1, n - 1),
        };
        for i in lo..hi {
            t.diag[i] -= eval_rate("m", &abs.m, abs.ubar[i], a, grid.node(i))?;
        }
    }
    Ok(t)
}

/// One Crank–Nicolson substep `(I - ds/2 A) v' = (I + ds/2 A) v`, with the
/// left-hand side pre-factorized for the Thomas algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct CnStep {
    explicit: Tridiagonal,
    lhs_lower: Vec<f64>,
    c_prime: Vec<f64>,
    inv_denom: Vec<f64>,
    dirichlet: bool,
}

impl CnStep {
    pub fn new(gen_matrix: &Tridiagonal, ds: f64, boundary: Boundary) -> Result<Self> {
        let n = gen_matrix.len();
        let half = 0.5 * ds;
        let mut explicit = Tridiagonal::zeros(n);
        let mut lhs = Tridiagonal::zeros(n);
        for i in 0..n {
            explicit.lower[i] = half * gen_matrix.lower[i];
            explicit.upper[i] = half * gen_matrix.upper[i];
            explicit.diag[i] = 1.0 + half * gen_matrix.diag[i];
            lhs.lower[i] = -half * gen_matrix.lower[i];
            lhs.upper[i] = -half * gen_matrix.upper[i];
            lhs.diag[i] = 1.0 - half * gen_matrix.diag[i];
        }
        let dirichlet = boundary == Boundary::Dirichlet;
        if dirichlet {
            for i in [0, n - 1] {
                explicit.lower[i] = 0.0;
                explicit.upper[i] = 0.0;
                explicit.diag[i] = 0.0;
                lhs.lower[i] = 0.0;
                lhs.upper[i] = 0.0;
                lhs.diag[i] = 1.0;
            }
        }
        let mut c_prime = vec![0.0; n];
        let mut inv_denom = vec![0.0; n];
        for i in 0..n {
            let denom = if i == 0 {
                lhs.diag[0]
            } else {
                lhs.diag[i] - lhs.lower[i] * c_prime[i - 1]
            };
            if denom == 0.0 || !denom.is_finite() {
                return Err(Error::Singular { row: i });
            }
            inv_denom[i] = 1.0 / denom;
            c_prime[i] = lhs.upper[i] * inv_denom[i];
        }
        Ok(CnStep {
            explicit,
            lhs_lower: lhs.lower,
            c_prime,
            inv_denom,
            dirichlet,
        })
    }

    /// Advances `v` in place; `scratch` must have the same length.
    pub fn apply(&self, v: &mut [f64], scratch: &mut [f64]) {
        let n = v.len();
        self.explicit.matvec_into(v, scratch);
        if self.dirichlet {
            scratch[0] = 0.0;
            scratch[n - 1] = 0.0;
        }
        // forward sweep
        scratch[0] *= self.inv_denom[0];
        for i in 1..n {
            scratch[i] = (scratch[i] - self.lhs_lower[i] * scratch[i - 1]) * self.inv_denom[i];
        }
        // back substitution
        v[n - 1] = scratch[n - 1];
        for i in (0..n - 1).rev() {
            v[i] = scratch[i] - self.c_prime[i] * v[i + 1];
        }
    }
}

fn substeps(
    gen: &GeneratorSpec,
    sigma: f64,
    a: f64,
    n_substeps: usize,
    spec: &ModelSpec,
    prev: Option<&(Tridiagonal, Arc<CnStep>)>,
) -> Result<Vec<(Tridiagonal, Arc<CnStep>)>> {
    let ds = (a - sigma) / n_substeps as f64;
    let mut out: Vec<(Tridiagonal, Arc<CnStep>)> = Vec::with_capacity(n_substeps);
    for k in 0..n_substeps {
        let s = sigma + (k as f64 + 0.5) * ds;
        let g = assemble_generator(gen, s, spec)?;
        let last = out.last().or(prev);
        let step = match last {
            // a-independent coefficients share one factorization
            Some((pg, ps)) if *pg == g => Arc::clone(ps),
            _ => Arc::new(CnStep::new(&g, ds, spec.spatial().boundary())?),
        };
        out.push((g, step));
    }
    Ok(out)
}

/// Computes `Pi(a, sigma) v` with `n_substeps` Crank–Nicolson substeps.
pub fn evolve(
    gen: &GeneratorSpec,
    v: &SpatialField,
    sigma: f64,
    a: f64,
    n_substeps: usize,
    spec: &ModelSpec,
) -> Result<SpatialField> {
    if sigma > a {
        return Err(Error::Precondition(format!(
            "evolve requires sigma <= a, got sigma = {sigma}, a = {a}"
        )));
    }
    if n_substeps == 0 {
        return Err(Error::Precondition("n_substeps must be at least 1".into()));
    }
    if v.len() != spec.n_x() {
        return Err(Error::Shape {
            expected: format!("field of length {}", spec.n_x()),
            got: format!("{}", v.len()),
        });
    }
    let mut out = v.clone();
    if sigma == a {
        return Ok(out);
    }
    let mut scratch = vec![0.0; v.len()];
    for (_, step) in substeps(gen, sigma, a, n_substeps, spec, None)? {
        step.apply(&mut out, &mut scratch);
    }
    Ok(out)
}

/// Precomputed Crank–Nicolson substeps for every age cell `[a_j, a_{j+1}]`.
#[derive(Debug, Clone)]
pub struct AgePropagator {
    cells: Vec<Vec<Arc<CnStep>>>,
    n_x: usize,
}

impl AgePropagator {
    pub fn new(gen: &GeneratorSpec, spec: &ModelSpec, n_substeps: usize) -> Result<Self> {
        gen.check(spec)?;
        if n_substeps == 0 {
            return Err(Error::Precondition("n_substeps must be at least 1".into()));
        }
        let age = spec.age();
        let mut cells = Vec::with_capacity(age.n_a());
        let mut prev: Option<(Tridiagonal, Arc<CnStep>)> = None;
        for j in 0..age.n_a() {
            let steps = substeps(gen, age.node(j), age.node(j + 1), n_substeps, spec, prev.as_ref())?;
            prev = steps.last().cloned();
            cells.push(steps.into_iter().map(|(_, s)| s).collect());
        }
        Ok(AgePropagator {
            cells,
            n_x: spec.n_x(),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// Applies `Pi(a_{j+1}, a_j)` in place.
    pub fn apply_cell(&self, j: usize, v: &mut [f64], scratch: &mut [f64]) {
        for step in &self.cells[j] {
            step.apply(v, scratch);
        }
    }

    /// `Pi(a_j, 0) x0` for every age node `j`.
    pub fn propagate(&self, x0: &[f64]) -> AgeSpaceField {
        let mut out = AgeSpaceField::zeros(self.cells.len() + 1, self.n_x);
        out.row_mut(0).copy_from_slice(x0);
        let mut v = x0.to_vec();
        let mut scratch = vec![0.0; self.n_x];
        for j in 0..self.cells.len() {
            self.apply_cell(j, &mut v, &mut scratch);
            out.row_mut(j + 1).copy_from_slice(&v);
        }
        out
    }
}

/// Mild solution `v(a) = Pi(a,0) x0 + int_0^a Pi(a,s) f(s) ds` on the age grid,
/// with the Duhamel integral accumulated cell by cell with the trapezoid rule.
pub fn mild_solve(
    gen: &GeneratorSpec,
    x0: &SpatialField,
    f: &AgeSpaceField,
    spec: &ModelSpec,
) -> Result<AgeSpaceField> {
    f.check_shape(spec)?;
    if x0.len() != spec.n_x() {
        return Err(Error::Shape {
            expected: format!("x0 of length {}", spec.n_x()),
            got: format!("{}", x0.len()),
        });
    }
    let prop = AgePropagator::new(gen, spec, spec.n_substeps())?;
    let half = 0.5 * spec.age().delta();
    let mut out = spec.zeros();
    out.row_mut(0).copy_from_slice(x0);
    let mut v = x0.to_vec();
    let mut scratch = vec![0.0; spec.n_x()];
    for j in 0..prop.n_cells() {
        for (vi, fi) in v.iter_mut().zip(f.row(j)) {
            *vi += half * fi;
        }
        prop.apply_cell(j, &mut v, &mut scratch);
        for (vi, fi) in v.iter_mut().zip(f.row(j + 1)) {
            *vi += half * fi;
        }
        out.row_mut(j + 1).copy_from_slice(&v);
    }
    Ok(out)
}

/// Smallest substep count per age cell for which every Crank–Nicolson substep
/// has a nonnegative explicit part, i.e. `ds * max|A_ii| <= 2`.
pub fn positivity_safe_substeps(gen: &GeneratorSpec, spec: &ModelSpec) -> Result<usize> {
    let age = spec.age();
    let mut max_diag: f64 = 0.0;
    for j in 0..age.n_a() {
        for a in [age.node(j), 0.5 * (age.node(j) + age.node(j + 1)), age.node(j + 1)] {
            let g = assemble_generator(gen, a, spec)?;
            max_diag = g.diag.iter().fold(max_diag, |m, v| m.max(v.abs()));
        }
    }
    let ds_max = 2.0 / max_diag;
    Ok(((age.delta() / ds_max).ceil() as usize).max(1))
}
