//! Continuous model data and its tensor-grid discretization.

use std::fmt;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::expr::RateExpression;

/// Default number of Crank–Nicolson substeps per age cell.
pub const DEFAULT_SUBSTEPS: usize = 10;
/// Default upper end of the sampled density bracket `[0, z_max]`.
pub const DEFAULT_Z_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Dirichlet,
    Neumann,
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Boundary::Dirichlet => "dirichlet",
            Boundary::Neumann => "neumann",
        })
    }
}

/// Node-centered uniform grid on `(0, length)` with `n_x` nodes including both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    length: f64,
    n_x: usize,
    boundary: Boundary,
}

impl SpatialGrid {
    pub fn new(length: f64, n_x: usize, boundary: Boundary) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidSpec(format!("grid length must be positive, got {length}")));
        }
        if n_x < 3 {
            return Err(Error::InvalidSpec(format!("n_x must be at least 3, got {n_x}")));
        }
        Ok(SpatialGrid {
            length,
            n_x,
            boundary,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn spacing(&self) -> f64 {
        self.length / (self.n_x - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.n_x - 1 {
            self.length
        } else {
            i as f64 * self.spacing()
        }
    }

    /// Composite trapezoid weights over the nodes.
    pub fn weights(&self) -> Vec<f64> {
        trapezoid_weights(self.n_x, self.spacing())
    }
}

/// Age nodes `a_j = j * delta_a`, `j = 0..=n_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeGrid {
    a_max: f64,
    n_a: usize,
}

impl AgeGrid {
    pub fn new(a_max: f64, n_a: usize) -> Result<Self> {
        if !(a_max.is_finite() && a_max > 0.0) {
            return Err(Error::InvalidSpec(format!("a_max must be positive, got {a_max}")));
        }
        if n_a < 2 {
            return Err(Error::InvalidSpec(format!("n_a must be at least 2, got {n_a}")));
        }
        Ok(AgeGrid { a_max, n_a })
    }

    pub fn a_max(&self) -> f64 {
        self.a_max
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_nodes(&self) -> usize {
        self.n_a + 1
    }

    pub fn delta(&self) -> f64 {
        self.a_max / self.n_a as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        if j == self.n_a {
            self.a_max
        } else {
            j as f64 * self.delta()
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        trapezoid_weights(self.n_a + 1, self.delta())
    }
}

pub fn trapezoid_weights(n_nodes: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n_nodes];
    w[0] = 0.5 * h;
    w[n_nodes - 1] = 0.5 * h;
    w
}

/// Which vital rate an expression stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rate {
    M,
    B,
    D,
    Rho,
    DmDz,
    DbDz,
}

impl Rate {
    pub fn name(self) -> &'static str {
        match self {
            Rate::M => "m",
            Rate::B => "b",
            Rate::D => "d",
            Rate::Rho => "rho",
            Rate::DmDz => "dm_dz",
            Rate::DbDz => "db_dz",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitalRates {
    pub m: RateExpression,
    pub b: RateExpression,
    pub d: RateExpression,
    pub rho: RateExpression,
    pub dm_dz: RateExpression,
    pub db_dz: RateExpression,
}

impl VitalRates {
    /// Builds the rate bundle; missing z-derivatives are obtained symbolically.
    pub fn new(
        m: RateExpression,
        b: RateExpression,
        d: RateExpression,
        rho: RateExpression,
        dm_dz: Option<RateExpression>,
        db_dz: Option<RateExpression>,
    ) -> Result<Self> {
        let dm_dz = match dm_dz {
            Some(e) => e,
            None => m.differentiate_in_z()?,
        };
        let db_dz = match db_dz {
            Some(e) => e,
            None => b.differentiate_in_z()?,
        };
        Ok(VitalRates {
            m,
            b,
            d,
            rho,
            dm_dz,
            db_dz,
        })
    }

    /// Parses all four rate sources, differentiating `m` and `b` symbolically.
    pub fn parse(m: &str, b: &str, d: &str, rho: &str) -> Result<Self> {
        let p = |name: &str, s: &str| {
            RateExpression::parse(s).map_err(|source| Error::Parse {
                name: name.to_string(),
                source,
            })
        };
        Self::new(p("m", m)?, p("b", b)?, p("d", d)?, p("rho", rho)?, None, None)
    }

    pub fn get(&self, rate: Rate) -> &RateExpression {
        match rate {
            Rate::M => &self.m,
            Rate::B => &self.b,
            Rate::D => &self.d,
            Rate::Rho => &self.rho,
            Rate::DmDz => &self.dm_dz,
            Rate::DbDz => &self.db_dz,
        }
    }
}

/// Evaluates a rate expression, mapping failures and non-finite values to errors.
pub fn eval_rate(name: &str, e: &RateExpression, z: f64, a: f64, x: f64) -> Result<f64> {
    let v = e.eval(z, a, x).map_err(|source| Error::Eval {
        name: name.to_string(),
        z,
        a,
        x,
        source,
    })?;
    if !v.is_finite() {
        return Err(Error::NonFiniteRate {
            name: name.to_string(),
            z,
            a,
            x,
        });
    }
    Ok(v)
}

/// The full problem data: grids, vital rates and discretization controls.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    spatial: SpatialGrid,
    age: AgeGrid,
    rates: VitalRates,
    n_substeps: usize,
    z_max: f64,
    /// rho(a_j, x_i), row-major by age.
    rho_table: Vec<f64>,
}

impl ModelSpec {
    pub fn new(spatial: SpatialGrid, age: AgeGrid, rates: VitalRates) -> Result<Self> {
        let mut rho_table = Vec::with_capacity(age.n_nodes() * spatial.n_x());
        for j in 0..age.n_nodes() {
            let a = age.node(j);
            for i in 0..spatial.n_x() {
                rho_table.push(eval_rate("rho", &rates.rho, 0.0, a, spatial.node(i))?);
            }
        }
        Ok(ModelSpec {
            spatial,
            age,
            rates,
            n_substeps: DEFAULT_SUBSTEPS,
            z_max: DEFAULT_Z_MAX,
            rho_table,
        })
    }

    pub fn with_substeps(mut self, n_substeps: usize) -> Self {
        assert!(n_substeps >= 1, "n_substeps must be at least 1");
        self.n_substeps = n_substeps;
        self
    }

    pub fn with_z_max(mut self, z_max: f64) -> Self {
        self.z_max = z_max;
        self
    }

    /// Same grids and controls with a different rate bundle.
    pub fn with_rates(&self, rates: VitalRates) -> Result<Self> {
        Ok(ModelSpec::new(self.spatial.clone(), self.age.clone(), rates)?
            .with_substeps(self.n_substeps)
            .with_z_max(self.z_max))
    }

    pub fn spatial(&self) -> &SpatialGrid {
        &self.spatial
    }

    pub fn age(&self) -> &AgeGrid {
        &self.age
    }

    pub fn rates(&self) -> &VitalRates {
        &self.rates
    }

    pub fn n_substeps(&self) -> usize {
        self.n_substeps
    }

    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    pub fn n_x(&self) -> usize {
        self.spatial.n_x()
    }

    pub fn n_age_nodes(&self) -> usize {
        self.age.n_nodes()
    }

    pub fn rate(&self, rate: Rate, z: f64, a: f64, x: f64) -> Result<f64> {
        eval_rate(rate.name(), self.rates.get(rate), z, a, x)
    }

    /// Tabulates `rate(z(x_i), a_j, x_i)` on the full grid for a spatial density field.
    pub fn tabulate(&self, rate: Rate, z: &[f64]) -> Result<Vec<f64>> {
        let n_x = self.n_x();
        let mut out = Vec::with_capacity(self.n_age_nodes() * n_x);
        for j in 0..self.n_age_nodes() {
            let a = self.age.node(j);
            for (i, &zi) in z.iter().enumerate() {
                out.push(self.rate(rate, zi, a, self.spatial.node(i))?);
            }
        }
        Ok(out)
    }

    pub fn rho_row(&self, j: usize) -> &[f64] {
        let n = self.n_x();
        &self.rho_table[j * n..(j + 1) * n]
    }

    pub fn zeros(&self) -> AgeSpaceField {
        AgeSpaceField::zeros(self.n_age_nodes(), self.n_x())
    }

    /// True when every rate takes the same value at all spatial nodes,
    /// checked on the age grid for a few sampled densities.
    pub fn rates_x_independent(&self) -> Result<bool> {
        let zs = [0.0, 0.5 * self.z_max, self.z_max];
        for rate in [Rate::M, Rate::B, Rate::D, Rate::Rho, Rate::DmDz, Rate::DbDz] {
            for &z in &zs {
                for j in 0..self.n_age_nodes() {
                    let a = self.age.node(j);
                    let v0 = self.rate(rate, z, a, self.spatial.node(0))?;
                    for i in 1..self.n_x() {
                        let v = self.rate(rate, z, a, self.spatial.node(i))?;
                        if (v - v0).abs() > 1e-13 * (1.0 + v0.abs()) {
                            return Ok(false);
                        }
                    }
                }
            }
        }
        Ok(true)
    }
}

/// A real function of position sampled on the spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField(pub Vec<f64>);

impl SpatialField {
    pub fn zeros(n_x: usize) -> Self {
        SpatialField(vec![0.0; n_x])
    }

    pub fn constant(n_x: usize, c: f64) -> Self {
        SpatialField(vec![c; n_x])
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.0)
    }
}

impl Deref for SpatialField {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for SpatialField {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Density on the age × space tensor grid; row `j` holds `u(a_j, ·)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeSpaceField {
    n_x: usize,
    values: Vec<f64>,
}

impl AgeSpaceField {
    pub fn zeros(n_age_nodes: usize, n_x: usize) -> Self {
        AgeSpaceField {
            n_x,
            values: vec![0.0; n_age_nodes * n_x],
        }
    }

    pub fn from_fn(spec: &ModelSpec, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut u = spec.zeros();
        for j in 0..spec.n_age_nodes() {
            let a = spec.age().node(j);
            for i in 0..spec.n_x() {
                u.row_mut(j)[i] = f(a, spec.spatial().node(i));
            }
        }
        u
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n_x = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_x), "ragged rows");
        AgeSpaceField {
            n_x,
            values: rows.into_iter().flatten().collect(),
        }
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_age_nodes(&self) -> usize {
        self.values.len() / self.n_x
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.n_x..(j + 1) * self.n_x]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.values[j * self.n_x..(j + 1) * self.n_x]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.n_x)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.values[j * self.n_x + i]
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        AgeSpaceField {
            n_x: self.n_x,
            values: self.values.iter().map(|v| s * v).collect(),
        }
    }

    /// `self + s * other`
    pub fn axpy(&self, s: f64, other: &AgeSpaceField) -> Self {
        assert_eq!(self.values.len(), other.values.len());
        AgeSpaceField {
            n_x: self.n_x,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + s * b)
                .collect(),
        }
    }

    pub fn check_shape(&self, spec: &ModelSpec) -> Result<()> {
        if self.n_x != spec.n_x() || self.n_age_nodes() != spec.n_age_nodes() {
            return Err(Error::Shape {
                expected: format!("{}x{}", spec.n_age_nodes(), spec.n_x()),
                got: format!("{}x{}", self.n_age_nodes(), self.n_x),
            });
        }
        Ok(())
    }
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Composite-trapezoid age integral of `rho(a, x) u(a, x)` at each spatial node.
pub fn weighted_total(u: &AgeSpaceField, spec: &ModelSpec) -> Result<SpatialField> {
    u.check_shape(spec)?;
    let w = spec.age().weights();
    let mut out = SpatialField::zeros(spec.n_x());
    for (j, row) in u.rows().enumerate() {
        let rho = spec.rho_row(j);
        for i in 0..out.len() {
            out[i] += w[j] * rho[i] * row[i];
        }
    }
    Ok(out)
}

/// Discrete L1-in-age norm of the spatial sup norm.
pub fn norm_l1_sup(u: &AgeSpaceField, spec: &ModelSpec) -> f64 {
    let w = spec.age().weights();
    u.rows().zip(&w).map(|(row, wj)| wj * sup_norm(row)).sum()
}

/// Discrete L1-in-age norm of the spatial L2 norm (trapezoid in both).
pub fn norm_l1_l2(u: &AgeSpaceField, spec: &ModelSpec) -> f64 {
    let w = spec.age().weights();
    let wx = spec.spatial().weights();
    u.rows()
        .zip(&w)
        .map(|(row, wj)| {
            let s: f64 = row.iter().zip(&wx).map(|(v, w)| w * v * v).sum();
            wj * s.sqrt()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub rate: Rate,
    pub z: f64,
    pub a: f64,
    pub x: f64,
    /// `None` when the rate could not be evaluated.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Number of sampled densities in `[0, z_max]` used by [`validate_spec`].
pub const VALIDATION_Z_SAMPLES: usize = 9;

/// Samples the sign hypotheses `d > 0`, `m >= 0`, `b > 0`, `rho >= 0` on the grid.
pub fn validate_spec(spec: &ModelSpec, z_max: f64) -> ValidationReport {
    let mut violations = Vec::new();
    let n_z = VALIDATION_Z_SAMPLES;
    let zs: Vec<f64> = (0..n_z).map(|k| z_max * k as f64 / (n_z - 1) as f64).collect();
    let checks: [(Rate, fn(f64) -> bool, bool); 4] = [
        (Rate::D, |v| v > 0.0, false),
        (Rate::M, |v| v >= 0.0, true),
        (Rate::B, |v| v > 0.0, true),
        (Rate::Rho, |v| v >= 0.0, false),
    ];
    for (rate, ok, uses_z) in checks {
        let zs: &[f64] = if uses_z { &zs } else { &zs[..1] };
        for &z in zs {
            for j in 0..spec.n_age_nodes() {
                let a = spec.age().node(j);
                for i in 0..spec.n_x() {
                    let x = spec.spatial().node(i);
                    let value = spec.rate(rate, z, a, x).ok();
                    if !value.is_some_and(ok) {
                        violations.push(Violation {
                            rate,
                            z,
                            a,
                            x,
                            value,
                        });
                    }
                }
            }
        }
    }
    ValidationReport { violations }
}
