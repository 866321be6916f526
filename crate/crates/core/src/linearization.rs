//! Frozen coefficient data of the problem linearized at an equilibrium `phi`.
//!
//! Birth becomes `b_phi(a, x) = b(ubar_phi, a, x) + rho(a, x) c(x)` with
//! `c(x) = int db/dz(ubar_phi, s, x) phi(s, x) ds`, and the death perturbation
//! is the rank-one nonlocal term `g(a, x) * wbar(x)` with
//! `g = -dm/dz(ubar_phi, a, x) phi(a, x)`.

use crate::diffusion::GeneratorSpec;
use crate::equilibrium::Equilibrium;
use crate::error::{Error, Result};
use crate::model::{weighted_total, AgeSpaceField, ModelSpec, Rate, SpatialField};

#[derive(Debug, Clone)]
pub struct LinearizedModel {
    /// `A - m(ubar_phi, a, .)`.
    pub gen_phi: GeneratorSpec,
    pub ubar_phi: SpatialField,
    /// `b(ubar_phi, a, x)`.
    pub birth_base: AgeSpaceField,
    pub birth_correction: SpatialField,
    pub rho_grid: AgeSpaceField,
    /// `g(a, x)`.
    pub kernel_factor: AgeSpaceField,
    /// `m(ubar_phi, a, x)`.
    pub death: AgeSpaceField,
    pub db_dz: AgeSpaceField,
    pub dm_dz: AgeSpaceField,
    trivial: bool,
}

fn table(spec: &ModelSpec, values: Vec<f64>) -> AgeSpaceField {
    let n_x = spec.n_x();
    AgeSpaceField::from_rows(values.chunks(n_x).map(<[f64]>::to_vec).collect())
}

pub fn build_linearization(eq: &Equilibrium, spec: &ModelSpec) -> Result<LinearizedModel> {
    eq.phi.check_shape(spec)?;
    let n_x = spec.n_x();
    let trivial = eq.is_trivial();
    let ubar = if trivial { SpatialField::zeros(n_x) } else { weighted_total(&eq.phi, spec)? };
    let birth_base = table(spec, spec.tabulate(Rate::B, &ubar)?);
    let death = table(spec, spec.tabulate(Rate::M, &ubar)?);
    let db_dz = table(spec, spec.tabulate(Rate::DbDz, &ubar)?);
    let dm_dz = table(spec, spec.tabulate(Rate::DmDz, &ubar)?);
    let rho_grid = table(spec, (0..spec.n_age_nodes()).flat_map(|j| spec.rho_row(j).to_vec()).collect());
    let mut birth_correction = SpatialField::zeros(n_x);
    let mut kernel_factor = spec.zeros();
    if !trivial {
        let w = spec.age().weights();
        for j in 0..spec.n_age_nodes() {
            for i in 0..n_x {
                let p = eq.phi.get(j, i);
                birth_correction[i] += w[j] * db_dz.get(j, i) * p;
                kernel_factor.row_mut(j)[i] = -dm_dz.get(j, i) * p;
            }
        }
    }
    let lin = LinearizedModel {
        gen_phi: GeneratorSpec::of_model_frozen(spec, ubar.clone()),
        ubar_phi: ubar,
        birth_base,
        birth_correction,
        rho_grid,
        kernel_factor,
        death,
        db_dz,
        dm_dz,
        trivial,
    };
    let finite = [&lin.birth_base, &lin.kernel_factor, &lin.death, &lin.db_dz, &lin.dm_dz]
        .iter()
        .all(|f| f.is_finite())
        && lin.birth_correction.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::InvalidSpec("non-finite linearization data".into()));
    }
    Ok(lin)
}

impl LinearizedModel {
    pub fn is_trivial(&self) -> bool {
        self.trivial
    }

    /// True when the nonlocal death perturbation vanishes identically.
    pub fn kernel_vanishes(&self) -> bool {
        self.kernel_factor.values().iter().all(|&g| g == 0.0)
    }

    /// `b_phi(a_j, x_i)`.
    pub fn b_phi(&self) -> AgeSpaceField {
        let mut out = self.birth_base.clone();
        for j in 0..out.n_age_nodes() {
            let rho = self.rho_grid.row(j).to_vec();
            for (i, v) in out.row_mut(j).iter_mut().enumerate() {
                *v += rho[i] * self.birth_correction[i];
            }
        }
        out
    }
}

/// `(B_phi w)(a, x) = g(a, x) * wbar(x)`.
pub fn apply_bphi(lin: &LinearizedModel, w: &AgeSpaceField, spec: &ModelSpec) -> Result<AgeSpaceField> {
    let wbar = weighted_total(w, spec)?;
    let mut out = lin.kernel_factor.clone();
    for j in 0..out.n_age_nodes() {
        for (i, v) in out.row_mut(j).iter_mut().enumerate() {
            *v *= wbar[i];
        }
    }
    Ok(out)
}

/// Linearized renewal: `int b(ubar_phi, a) w da + c * wbar`.
pub fn apply_birth(lin: &LinearizedModel, w: &AgeSpaceField, spec: &ModelSpec) -> Result<SpatialField> {
    let wbar = weighted_total(w, spec)?;
    let wt = spec.age().weights();
    let mut out = SpatialField::zeros(spec.n_x());
    for j in 0..spec.n_age_nodes() {
        for i in 0..spec.n_x() {
            out[i] += wt[j] * lin.birth_base.get(j, i) * w.get(j, i);
        }
    }
    for i in 0..spec.n_x() {
        out[i] += lin.birth_correction[i] * wbar[i];
    }
    Ok(out)
}
