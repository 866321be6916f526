//! Finite-dimensional spectral quantities of the linearization.
//!
//! `Q_lambda = sum_j w_j e^{-lambda a_j} diag(b_phi(a_j)) P_j` with
//! `P_j = Pi_phi(a_j, 0)` assembled column by column. The propagated columns do
//! not depend on `lambda` and are computed once per [`SpectralContext`].
//!
//! The eigenvalue problem of the linearization is reduced to the block system
//!
//! ```text
//! [ I - Q_lambda                 sum w b_phi K_j     ] [psi(0)]
//! [ -sum w e^{-lambda a} rho P_j  I + sum w rho K_j  ] [ psibar ] = 0
//! ```
//!
//! where `K_j = int_0^{a_j} e^{-lambda (a_j - s)} Pi_phi(a_j, s) diag(dm/dz phi)(s) ds`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::diffusion::AgePropagator;
use crate::error::{Error, Result};
use crate::linearization::LinearizedModel;
use crate::model::{AgeSpaceField, Boundary, ModelSpec};

const POWER_MAX_ITER: usize = 100_000;
const POWER_TOL: f64 = 1e-10;
pub const LAMBDA_CAP: f64 = 100.0;
pub const LAMBDA0_TOL: f64 = 1e-8;
pub const SINGULAR_REL_TOL: f64 = 1e-6;
const GOLDEN_ITER: usize = 60;

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Power iteration with max-norm scaling for an entrywise nonnegative matrix.
/// Converged when the Collatz–Wielandt bounds on the support of the iterate
/// agree to a relative `1e-10`.
fn power_iteration(m: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
    let n = m.nrows();
    let mut v = DVector::from_element(n, 1.0);
    let mut w = DVector::zeros(n);
    let mut gap = f64::INFINITY;
    for _ in 0..POWER_MAX_ITER {
        m.mul_to(&v, &mut w);
        let scale = max_abs(w.as_slice());
        if scale == 0.0 {
            return Ok((0.0, v.as_slice().to_vec()));
        }
        let vmax = max_abs(v.as_slice());
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            if v[i] > 1e-9 * vmax {
                let q = w[i] / v[i];
                lo = lo.min(q);
                hi = hi.max(q);
            }
        }
        gap = (hi - lo) / hi;
        v.copy_from(&w);
        v /= scale;
        if gap <= POWER_TOL {
            return Ok((0.5 * (lo + hi), v.as_slice().to_vec()));
        }
    }
    Err(Error::NoConvergence {
        what: "power iteration".into(),
        iterations: POWER_MAX_ITER,
        gap,
    })
}

fn dense_spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone().complex_eigenvalues().iter().fold(0.0, |r, z| r.max(z.norm()))
}

fn is_nonnegative(m: &DMatrix<f64>) -> bool {
    m.iter().all(|&v| v >= -1e-12)
}

/// Spectral radius. Nonnegative matrices go through power iteration, all
/// others through a dense Schur decomposition.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidSpec("non-finite matrix entries".into()));
    }
    if is_nonnegative(m) {
        power_iteration(m).map(|p| p.0)
    } else {
        Ok(dense_spectral_radius(m))
    }
}

/// Perron root and a nonnegative eigenvector of a nonnegative matrix.
pub fn perron_vector(m: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
    if !is_nonnegative(m) {
        return Err(Error::Precondition("Perron vector of a matrix with negative entries".into()));
    }
    power_iteration(m)
}

/// Smallest singular value.
pub fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().fold(f64::INFINITY, |s, &v| s.min(v))
}

/// Smallest singular value, its right singular vector and the largest
/// singular value.
pub fn smallest_singular_triplet(m: &DMatrix<f64>) -> (f64, Vec<f64>, f64) {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let (k, &s) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty matrix");
    let norm = svd.singular_values.iter().fold(0.0f64, |a, &v| a.max(v));
    (s, v_t.row(k).iter().copied().collect(), norm)
}

/// Cached propagation data for one linearization.
#[derive(Debug, Clone)]
pub struct SpectralContext<'a> {
    lin: &'a LinearizedModel,
    spec: &'a ModelSpec,
    prop: AgePropagator,
    /// `P_j`, one matrix per age node.
    p: Vec<DMatrix<f64>>,
    b_phi: AgeSpaceField,
    /// `dm/dz(ubar_phi) * phi`, the source of `K`.
    h: AgeSpaceField,
    weights: Vec<f64>,
}

impl<'a> SpectralContext<'a> {
    pub fn new(lin: &'a LinearizedModel, spec: &'a ModelSpec) -> Result<Self> {
        Self::with_substeps(lin, spec, spec.n_substeps())
    }

    pub fn with_substeps(lin: &'a LinearizedModel, spec: &'a ModelSpec, n_substeps: usize) -> Result<Self> {
        let n_x = spec.n_x();
        let prop = AgePropagator::new(&lin.gen_phi, spec, n_substeps)?;
        let columns: Vec<AgeSpaceField> = (0..n_x)
            .into_par_iter()
            .map(|k| {
                let mut e = vec![0.0; n_x];
                e[k] = 1.0;
                prop.propagate(&e)
            })
            .collect();
        let mut p: Vec<DMatrix<f64>> = (0..spec.n_age_nodes())
            .map(|j| DMatrix::from_fn(n_x, n_x, |i, k| columns[k].get(j, i)))
            .collect();
        if spec.spatial().boundary() == Boundary::Dirichlet {
            // boundary nodes carry no state
            p[0][(0, 0)] = 0.0;
            p[0][(n_x - 1, n_x - 1)] = 0.0;
        }
        Ok(SpectralContext {
            lin,
            spec,
            prop,
            p,
            b_phi: lin.b_phi(),
            h: lin.kernel_factor.scaled(-1.0),
            weights: spec.age().weights(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    pub fn lin(&self) -> &LinearizedModel {
        self.lin
    }

    /// `Pi_phi(a_j, 0)`.
    pub fn propagator_at(&self, j: usize) -> &DMatrix<f64> {
        &self.p[j]
    }

    /// `sum_j w_j e^{-lambda a_j} diag(f_j) P_j`.
    fn weighted_sum(&self, lambda: f64, f: &AgeSpaceField) -> DMatrix<f64> {
        let n_x = self.spec.n_x();
        let mut out = DMatrix::zeros(n_x, n_x);
        for (j, pj) in self.p.iter().enumerate() {
            let c = self.weights[j] * (-lambda * self.spec.age().node(j)).exp();
            let row = f.row(j);
            for k in 0..n_x {
                for i in 0..n_x {
                    out[(i, k)] += c * row[i] * pj[(i, k)];
                }
            }
        }
        out
    }

    pub fn assemble_q(&self, lambda: f64) -> DMatrix<f64> {
        self.weighted_sum(lambda, &self.b_phi)
    }

    pub fn r_q(&self, lambda: f64) -> Result<f64> {
        spectral_radius(&self.assemble_q(lambda))
    }

    /// The unique `lambda0` with `r(Q_lambda0) = 1`.
    pub fn find_lambda0(&self) -> Result<f64> {
        let f = |l: f64| self.r_q(l).map(|r| r - 1.0);
        let f0 = f(0.0)?;
        if f0 == 0.0 {
            return Ok(0.0);
        }
        let dir = if f0 > 0.0 { 1.0 } else { -1.0 };
        let (mut near, mut far) = (0.0, dir);
        loop {
            let v = f(far)?;
            if v == 0.0 {
                return Ok(far);
            }
            if (v > 0.0) != (f0 > 0.0) {
                break;
            }
            if far.abs() >= LAMBDA_CAP {
                return Err(Error::NotBracketed {
                    what: "r(Q_lambda) - 1".into(),
                    lo: -LAMBDA_CAP,
                    hi: LAMBDA_CAP,
                });
            }
            near = far;
            far = (2.0 * far).clamp(-LAMBDA_CAP, LAMBDA_CAP);
        }
        // f is positive at `lo` and negative at `hi`
        let (mut lo, mut hi) = if dir > 0.0 { (near, far) } else { (far, near) };
        loop {
            let mid = 0.5 * (lo + hi);
            let v = f(mid)?;
            if v.abs() <= LAMBDA0_TOL || hi - lo <= 1e-13 * mid.abs().max(1.0) {
                return Ok(mid);
            }
            if v > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }

    /// Runs the recurrence for `K_j c` with a diagonal source `h_j * c`.
    /// Calls `visit(j, K_j c)` on every age node.
    fn k_sweep(&self, lambda: f64, c: &[f64], mut visit: impl FnMut(usize, &[f64])) {
        let n_x = self.spec.n_x();
        let da = self.spec.age().delta();
        let decay = (-lambda * da).exp();
        let mut v = vec![0.0; n_x];
        let mut scratch = vec![0.0; n_x];
        visit(0, &v);
        for j in 0..self.prop.n_cells() {
            let h0 = self.h.row(j);
            for i in 0..n_x {
                v[i] += 0.5 * da * h0[i] * c[i];
            }
            self.prop.apply_cell(j, &mut v, &mut scratch);
            let h1 = self.h.row(j + 1);
            for i in 0..n_x {
                v[i] = decay * v[i] + 0.5 * da * h1[i] * c[i];
            }
            visit(j + 1, &v);
        }
    }

    /// `K_{phi, lambda}(a_j)` as a dense matrix.
    pub fn assemble_k(&self, lambda: f64, a_index: usize) -> Result<DMatrix<f64>> {
        let n_x = self.spec.n_x();
        if a_index >= self.spec.n_age_nodes() {
            return Err(Error::Precondition(format!(
                "age index {a_index} beyond the last node {}",
                self.spec.n_age_nodes() - 1
            )));
        }
        let mut out = DMatrix::zeros(n_x, n_x);
        if self.lin.kernel_vanishes() || a_index == 0 {
            return Ok(out);
        }
        let cols: Vec<Vec<f64>> = (0..n_x)
            .into_par_iter()
            .map(|k| {
                let mut e = vec![0.0; n_x];
                e[k] = 1.0;
                let mut col = vec![0.0; n_x];
                self.k_sweep(lambda, &e, |j, v| {
                    if j == a_index {
                        col.copy_from_slice(v);
                    }
                });
                col
            })
            .collect();
        for (k, col) in cols.iter().enumerate() {
            out.set_column(k, &DVector::from_column_slice(col));
        }
        Ok(out)
    }

    /// `(sum_j w_j diag(b_phi_j) K_j, sum_j w_j diag(rho_j) K_j)`.
    fn k_moments(&self, lambda: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let n_x = self.spec.n_x();
        let mut sb = DMatrix::zeros(n_x, n_x);
        let mut sr = DMatrix::zeros(n_x, n_x);
        if self.lin.kernel_vanishes() {
            return (sb, sr);
        }
        let cols: Vec<(Vec<f64>, Vec<f64>)> = (0..n_x)
            .into_par_iter()
            .map(|k| {
                let mut e = vec![0.0; n_x];
                e[k] = 1.0;
                let mut cb = vec![0.0; n_x];
                let mut cr = vec![0.0; n_x];
                self.k_sweep(lambda, &e, |j, v| {
                    let w = self.weights[j];
                    let b = self.b_phi.row(j);
                    let rho = self.lin.rho_grid.row(j);
                    for i in 0..n_x {
                        cb[i] += w * b[i] * v[i];
                        cr[i] += w * rho[i] * v[i];
                    }
                });
                (cb, cr)
            })
            .collect();
        for (k, (cb, cr)) in cols.iter().enumerate() {
            sb.set_column(k, &DVector::from_column_slice(cb));
            sr.set_column(k, &DVector::from_column_slice(cr));
        }
        (sb, sr)
    }

    /// The `2 n_x` square block matrix `M(lambda)` acting on `(psi(0), psibar)`.
    pub fn assemble_eigen_system(&self, lambda: f64) -> DMatrix<f64> {
        let n = self.spec.n_x();
        let q = self.assemble_q(lambda);
        let r = self.weighted_sum(lambda, &self.lin.rho_grid);
        let (sb, sr) = self.k_moments(lambda);
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&(DMatrix::identity(n, n) - q));
        m.view_mut((0, n), (n, n)).copy_from(&sb);
        m.view_mut((n, 0), (n, n)).copy_from(&(-r));
        m.view_mut((n, n), (n, n)).copy_from(&(DMatrix::identity(n, n) + sr));
        m
    }

    /// `psi(a_j) = e^{-lambda a_j} P_j psi0 - K_j psibar`.
    pub fn reconstruct(&self, lambda: f64, psi0: &[f64], psibar: &[f64]) -> AgeSpaceField {
        let n_x = self.spec.n_x();
        let mut out = self.spec.zeros();
        let x0 = DVector::from_column_slice(psi0);
        for (j, pj) in self.p.iter().enumerate() {
            let c = (-lambda * self.spec.age().node(j)).exp();
            let v = pj * &x0;
            for i in 0..n_x {
                out.row_mut(j)[i] = c * v[i];
            }
        }
        if !self.lin.kernel_vanishes() {
            self.k_sweep(lambda, psibar, |j, v| {
                for (o, k) in out.row_mut(j).iter_mut().zip(v) {
                    *o -= k;
                }
            });
        }
        out
    }

    fn sigma_at(&self, lambda: f64) -> (f64, f64) {
        let m = self.assemble_eigen_system(lambda);
        let s = m.singular_values();
        let lo = s.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        let hi = s.iter().fold(0.0f64, |a, &v| a.max(v));
        (lo, hi)
    }

    /// Scans `sigma_min(M(lambda))` on `scan`, refines every local minimum by
    /// golden-section search and returns the largest refined `lambda` at which
    /// `M` is singular to `1e-6` relative to its 2-norm.
    pub fn dominant_real_eigenvalue(&self, scan: Scan) -> Result<ScanResult> {
        let grid = scan.grid()?;
        let curve: Vec<ScanPoint> = grid
            .par_iter()
            .map(|&lambda| {
                let (sigma_min, norm) = self.sigma_at(lambda);
                Ok(ScanPoint {
                    lambda,
                    sigma_min,
                    norm,
                    r_q: self.r_q(lambda)?,
                })
            })
            .collect::<Result<_>>()?;
        let n = curve.len();
        let mut candidates = Vec::new();
        for k in 0..n {
            let left = k == 0 || curve[k].sigma_min <= curve[k - 1].sigma_min;
            let right = k + 1 == n || curve[k].sigma_min <= curve[k + 1].sigma_min;
            if left && right {
                candidates.push((grid[k.saturating_sub(1)], grid[(k + 1).min(n - 1)]));
            }
        }
        let refined: Vec<Refined> = candidates
            .par_iter()
            .map(|&(a, b)| self.golden(a, b))
            .collect();
        let root = refined
            .iter()
            .filter(|r| r.sigma_min <= SINGULAR_REL_TOL * r.norm)
            .map(|r| r.lambda)
            .fold(None, |best: Option<f64>, l| Some(best.map_or(l, |b| b.max(l))));
        Ok(ScanResult { curve, refined, root })
    }

    fn golden(&self, mut a: f64, mut b: f64) -> Refined {
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let mut fc = self.sigma_at(c);
        let mut fd = self.sigma_at(d);
        for _ in 0..GOLDEN_ITER {
            if fc.0 <= fd.0 {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = self.sigma_at(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = self.sigma_at(d);
            }
        }
        let (lambda, (sigma_min, norm)) = if fc.0 <= fd.0 { (c, fc) } else { (d, fd) };
        Refined { lambda, sigma_min, norm }
    }

    /// Kernel vector `(psi(0), psibar)` of `M(lambda)`, normalized so that the
    /// largest entry is positive and has modulus one.
    pub fn kernel_vector(&self, lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.spec.n_x();
        let (_, mut v, _) = smallest_singular_triplet(&self.assemble_eigen_system(lambda));
        let k = (0..v.len()).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap_or(0);
        let s = v[k];
        for x in &mut v {
            *x /= s;
        }
        let psibar = v.split_off(n);
        (v, psibar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scan {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub n: usize,
}

pub const DEFAULT_SCAN_HALF_WIDTH: f64 = 5.0;
pub const DEFAULT_SCAN_POINTS: usize = 41;

impl Scan {
    /// The default window `[lambda0 - 5, lambda0 + 5]`.
    pub fn around(lambda0: f64) -> Self {
        Scan {
            lambda_min: lambda0 - DEFAULT_SCAN_HALF_WIDTH,
            lambda_max: lambda0 + DEFAULT_SCAN_HALF_WIDTH,
            n: DEFAULT_SCAN_POINTS,
        }
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        if self.n < 2 || !(self.lambda_max > self.lambda_min) {
            return Err(Error::Precondition(format!(
                "scan needs n >= 2 and lambda_max > lambda_min, got [{}, {}] with n = {}",
                self.lambda_min, self.lambda_max, self.n
            )));
        }
        let h = (self.lambda_max - self.lambda_min) / (self.n - 1) as f64;
        Ok((0..self.n).map(|k| self.lambda_min + k as f64 * h).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    pub lambda: f64,
    pub sigma_min: f64,
    /// `||M(lambda)||_2`.
    pub norm: f64,
    pub r_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refined {
    pub lambda: f64,
    pub sigma_min: f64,
    pub norm: f64,
}

#[derive(Debug, Clone)]
pub struct ScanResult {
    pub curve: Vec<ScanPoint>,
    pub refined: Vec<Refined>,
    pub root: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SpectralReport {
    pub r_q0: f64,
    pub lambda0: f64,
    pub dominant_real_eigenvalue: Option<f64>,
    pub scan: ScanResult,
}

/// `r(Q_0)`, `lambda0` and the dominant real eigenvalue. Without an explicit
/// scan window the default one around `lambda0` is used.
pub fn spectral_report(lin: &LinearizedModel, spec: &ModelSpec, scan: Option<Scan>) -> Result<SpectralReport> {
    let ctx = SpectralContext::new(lin, spec)?;
    let r_q0 = ctx.r_q(0.0)?;
    let lambda0 = ctx.find_lambda0()?;
    let scan = ctx.dominant_real_eigenvalue(scan.unwrap_or_else(|| Scan::around(lambda0)))?;
    Ok(SpectralReport {
        r_q0,
        lambda0,
        dominant_real_eigenvalue: scan.root,
        scan,
    })
}
