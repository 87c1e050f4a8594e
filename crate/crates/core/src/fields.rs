//! Electric and magnetic couplings.
//!
//! Both act through the mean-free order parameter
//! `u = (phi_A - phi_B) - (phibar_A - phibar_B)`. The chemical potential of
//! a coupling enters `mu_A` with a plus sign and `mu_B` with a minus sign.
//!
//! The electric field is `E = E0 - grad(Phi)` with `Phi` the induced
//! potential (Dirichlet data `Phi0`). At fixed applied potential the
//! thermodynamic energy is `F - W_e` with `W_e = (eps(u) |E|^2, 1) / 2`
//! and `eps(u) = eps0 + eps1 u`; with `Phi` frozen its first variation in
//! `u` is exactly `-(eps1 / 2) |E|^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    grad_h, inner_h, laplacian_h, mixed_xy_with, norm_h, second_difference, Axis, BoundaryKind,
    ScalarField,
};
use crate::spectral::{bicgstab, KrylovConfig, SineBasisPlan};

/// Applied electric field as a function of time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSchedule {
    Constant { e0: [f64; 2] },
    /// `(E1(t), 0)` ramping up, holding, ramping down, then off.
    Hysteresis,
}

impl FieldSchedule {
    pub fn at(&self, t: f64) -> [f64; 2] {
        match *self {
            FieldSchedule::Constant { e0 } => e0,
            FieldSchedule::Hysteresis => crate::harness::hysteresis_field(t),
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        matches!(self, FieldSchedule::Hysteresis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElectricParams {
    pub eps0: f64,
    pub eps1: f64,
    pub schedule: FieldSchedule,
    /// Boundary value of the induced potential.
    #[serde(default)]
    pub phi0: f64,
    #[serde(default = "default_picard_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_picard_maxit")]
    pub picard_maxit: usize,
}

fn default_picard_tol() -> f64 {
    1e-10
}

fn default_picard_maxit() -> usize {
    100
}

impl ElectricParams {
    pub fn new(eps0: f64, eps1: f64, schedule: FieldSchedule) -> Self {
        Self {
            eps0,
            eps1,
            schedule,
            phi0: 0.0,
            picard_tol: default_picard_tol(),
            picard_maxit: default_picard_maxit(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(Error::param("eps0", "must be positive"));
        }
        if !self.eps1.is_finite() || !self.phi0.is_finite() {
            return Err(Error::param("eps1", "must be finite"));
        }
        if !(self.picard_tol > 0.0) || self.picard_maxit == 0 {
            return Err(Error::param(
                "picard_tol",
                "tolerance and iteration limit must be positive",
            ));
        }
        if let FieldSchedule::Constant { e0 } = self.schedule {
            if e0.iter().any(|v| !v.is_finite()) {
                return Err(Error::param("e0", "must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagneticParams {
    pub gamma_m: f64,
    pub b0: [f64; 2],
}

impl MagneticParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_m >= 0.0 && self.gamma_m.is_finite()) {
            return Err(Error::param("gamma_m", "must be nonnegative"));
        }
        if self.b0.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("b0", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coupling {
    #[default]
    None,
    Electric(ElectricParams),
    Magnetic(MagneticParams),
}

impl Coupling {
    pub fn validate(&self) -> Result<()> {
        match self {
            Coupling::None => Ok(()),
            Coupling::Electric(e) => e.validate(),
            Coupling::Magnetic(m) => m.validate(),
        }
    }

    pub fn electric(&self) -> Option<&ElectricParams> {
        match self {
            Coupling::Electric(e) => Some(e),
            _ => None,
        }
    }
}

/// `(phi_A - phi_B) - dbar`.
pub fn order_parameter(phi_a: &ScalarField, phi_b: &ScalarField, dbar: f64) -> ScalarField {
    phi_a.zip_map(phi_b, |a, b| a - b - dbar)
}

/// Outcome of an induced-potential solve.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSolve {
    pub potential: ScalarField,
    pub iterations: usize,
    /// Relative residual of the discrete Gauss law.
    pub residual: f64,
}

/// Residual of the discrete Gauss law
/// `eps(u) lap(Phi) - eps1 (E0 - grad Phi) . grad u`, with `Phi` using
/// Dirichlet ghosts and `u` zero-Neumann ghosts.
pub fn electric_residual(
    potential: &ScalarField,
    u: &ScalarField,
    ep: &ElectricParams,
    t: f64,
) -> ScalarField {
    let e0 = ep.schedule.at(t);
    let bc = BoundaryKind::DirichletConstant(ep.phi0);
    let lap = laplacian_h(potential, bc);
    let (px, py) = grad_h(potential, bc);
    let (ux, uy) = grad_h(u, BoundaryKind::NeumannZero);
    let mut out = ScalarField::zeros(*u.grid());
    for (k, r) in out.values_mut().iter_mut().enumerate() {
        let eps = ep.eps0 + ep.eps1 * u.values()[k];
        let ex = e0[0] - px.values()[k];
        let ey = e0[1] - py.values()[k];
        *r = eps * lap.values()[k] - ep.eps1 * (ex * ux.values()[k] + ey * uy.values()[k]);
    }
    out
}

/// Solves the Gauss law for the induced potential at the order parameter
/// `u`. Picard sweeps move the variable-coefficient terms to the right-hand
/// side and invert `eps0 lap` exactly; if they fail to contract the linear
/// problem is handed to BiCGSTAB preconditioned by the same inverse.
pub fn solve_electric_potential(
    u: &ScalarField,
    ep: &ElectricParams,
    t: f64,
    guess: Option<&ScalarField>,
    plan: &SineBasisPlan,
) -> Result<PotentialSolve> {
    let grid = *u.grid();
    let e0 = ep.schedule.at(t);
    let min_eps = u.values().iter().fold(f64::INFINITY, |m, &v| m.min(ep.eps0 + ep.eps1 * v));
    if min_eps <= 0.0 {
        return Err(Error::NonPositiveDielectric { min: min_eps });
    }
    let homogeneous = ScalarField::constant(grid, ep.phi0);
    let (ux, uy) = grad_h(u, BoundaryKind::NeumannZero);
    // right-hand side at Phi = Phi0 (zero induced field)
    let source = ux.zip_map(&uy, |gx, gy| ep.eps1 * (e0[0] * gx + e0[1] * gy));
    let scale = norm_h(&source);
    if ep.eps1 == 0.0 || scale == 0.0 {
        return Ok(PotentialSolve {
            potential: homogeneous,
            iterations: 0,
            residual: 0.0,
        });
    }
    let rel = |p: &ScalarField| norm_h(&electric_residual(p, u, ep, t)) / scale;

    // work with w = Phi - Phi0, which has homogeneous ghosts
    let zero = BoundaryKind::DirichletConstant(0.0);
    let rhs_of = |w: &ScalarField| {
        let lap = laplacian_h(w, zero);
        let (wx, wy) = grad_h(w, zero);
        let mut r = ScalarField::zeros(grid);
        for (k, v) in r.values_mut().iter_mut().enumerate() {
            let ex = e0[0] - wx.values()[k];
            let ey = e0[1] - wy.values()[k];
            *v = (ep.eps1 * (ex * ux.values()[k] + ey * uy.values()[k])
                - ep.eps1 * u.values()[k] * lap.values()[k])
                / ep.eps0;
        }
        r
    };
    let mut w = match guess {
        Some(g) => g.map(|v| v - ep.phi0),
        None => ScalarField::zeros(grid),
    };
    let mut res = rel(&w.map(|v| v + ep.phi0));
    let mut iterations = 0;
    let mut prev = f64::INFINITY;
    while res > ep.picard_tol && iterations < ep.picard_maxit {
        w = plan.solve_dirichlet(&rhs_of(&w), 0.0);
        iterations += 1;
        let r = rel(&w.map(|v| v + ep.phi0));
        if !r.is_finite() || (iterations > 3 && r > 0.9 * prev) {
            res = r;
            break;
        }
        prev = r;
        res = r;
    }
    if res <= ep.picard_tol {
        return Ok(PotentialSolve {
            potential: w.map(|v| v + ep.phi0),
            iterations,
            residual: res,
        });
    }

    // Krylov fallback on A w = source, A w = eps(u) lap w + eps1 grad w . grad u
    let apply = |x: &[f64]| {
        let wf = ScalarField::from_vec(grid, x.to_vec()).expect("length");
        let lap = laplacian_h(&wf, zero);
        let (wx, wy) = grad_h(&wf, zero);
        (0..grid.len())
            .map(|k| {
                (ep.eps0 + ep.eps1 * u.values()[k]) * lap.values()[k]
                    + ep.eps1 * (wx.values()[k] * ux.values()[k] + wy.values()[k] * uy.values()[k])
            })
            .collect::<Vec<f64>>()
    };
    let precond = |x: &[f64]| {
        let r = ScalarField::from_vec(grid, x.iter().map(|v| v / ep.eps0).collect()).expect("length");
        plan.solve_dirichlet(&r, 0.0).into_values()
    };
    let cfg = KrylovConfig {
        tol: ep.picard_tol * 0.1,
        max_iter: 500,
    };
    let kr = bicgstab(apply, precond, source.values(), None, &cfg);
    let potential =
        ScalarField::from_vec(grid, kr.solution.iter().map(|v| v + ep.phi0).collect())
            .expect("length");
    let res = rel(&potential);
    if res <= ep.picard_tol {
        Ok(PotentialSolve {
            potential,
            iterations: iterations + kr.iterations,
            residual: res,
        })
    } else {
        Err(Error::PotentialStalled {
            iterations: iterations + kr.iterations,
            residual: res,
        })
    }
}

/// `|E0 - grad_h Phi|^2` per cell.
pub fn field_strength_sq(potential: &ScalarField, ep: &ElectricParams, t: f64) -> ScalarField {
    let e0 = ep.schedule.at(t);
    let (px, py) = grad_h(potential, BoundaryKind::DirichletConstant(ep.phi0));
    px.zip_map(&py, |gx, gy| {
        let ex = e0[0] - gx;
        let ey = e0[1] - gy;
        ex * ex + ey * ey
    })
}

/// `mu_e = -(eps1 / 2) |E0 - grad_h Phi|^2`.
pub fn electric_mu(potential: &ScalarField, ep: &ElectricParams, t: f64) -> ScalarField {
    field_strength_sq(potential, ep, t).scaled(-0.5 * ep.eps1)
}

/// `W_e = (eps0 + eps1 u, |E0 - grad_h Phi|^2)_h / 2`; enters the total
/// energy with a minus sign.
pub fn electric_energy(u: &ScalarField, potential: &ScalarField, ep: &ElectricParams, t: f64) -> f64 {
    let eps = u.map(|v| ep.eps0 + ep.eps1 * v);
    0.5 * inner_h(&eps, &field_strength_sq(potential, ep, t))
}

/// `(B1^2 d_xD_x + B2^2 d_yD_y + 2 B1 B2 K) u` where `K` is the symmetric
/// part of the zero-Neumann mixed stencil. The mixed stencil with odd
/// ghosts is the transpose of the mirror-ghost one, so `K` is their
/// average.
pub fn magnetic_operator(u: &ScalarField, b0: [f64; 2]) -> ScalarField {
    let [b1, b2] = b0;
    let mut out = ScalarField::zeros(*u.grid());
    if b1 != 0.0 {
        out.axpy(b1 * b1, &second_difference(u, Axis::X, BoundaryKind::NeumannZero));
    }
    if b2 != 0.0 {
        out.axpy(b2 * b2, &second_difference(u, Axis::Y, BoundaryKind::NeumannZero));
    }
    if b1 != 0.0 && b2 != 0.0 {
        out.axpy(b1 * b2, &mixed_xy_with(u, BoundaryKind::NeumannZero));
        out.axpy(b1 * b2, &mixed_xy_with(u, BoundaryKind::DirichletConstant(0.0)));
    }
    out
}

/// `mu_m = -gamma_m (B0 . grad)^2 u`.
pub fn magnetic_mu(u: &ScalarField, mp: &MagneticParams) -> ScalarField {
    magnetic_operator(u, mp.b0).scaled(-mp.gamma_m)
}

/// `-(gamma_m / 2) (u, (B0 . grad)^2 u)_h`, the discrete
/// `(gamma_m / 2) ||B0 . grad u||^2` whose gradient is [`magnetic_mu`].
pub fn magnetic_energy(u: &ScalarField, mp: &MagneticParams) -> f64 {
    if mp.gamma_m == 0.0 {
        return 0.0;
    }
    -0.5 * mp.gamma_m * inner_h(u, &magnetic_operator(u, mp.b0))
}
