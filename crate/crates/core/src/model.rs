//! Ternary copolymer-solution model: parameters, the regularized
//! Flory-Huggins bulk term, the discrete free energy and its chemical
//! potentials.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::grid::{
    gradient_norm_sq, inner_h, laplacian_h, mean_h, BoundaryKind, FieldTriple, Grid2D,
    ScalarField,
};
use crate::spectral::CosineBasisPlan;

pub const A: usize = 0;
pub const B: usize = 1;
pub const S: usize = 2;
pub const SPECIES: [&str; 3] = ["A", "B", "S"];

pub const DEFAULT_SIGMA: f64 = 0.01;

/// Regularized `(phi / n) ln phi`, returned as `(value, derivative)`.
///
/// Below `sigma` the logarithm is replaced by its second-order Taylor
/// expansion about `sigma`, so the function is C^2 and defined for all real
/// `phi`.
pub fn reg_log(phi: f64, n: f64, sigma: f64) -> (f64, f64) {
    if phi <= sigma {
        let ls = sigma.ln();
        (
            (phi * phi / (2.0 * sigma) + phi * ls - sigma / 2.0) / n,
            (phi / sigma + ls) / n,
        )
    } else {
        let l = phi.ln();
        (phi * l / n, (1.0 + l) / n)
    }
}

/// `m_kl = M_kl - (sum_j M_kj)(sum_j M_lj) / sum_ij M_ij`.
///
/// Rows of the result sum to zero, which is how the pointwise constraint
/// `phi_A + phi_B + phi_S = 1` survives the dynamics.
pub fn effective_mobility(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let total = m.sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::param(
            "mobility",
            format!("entries must have a positive sum, got {total}"),
        ));
    }
    let rows = m.column_sum();
    Ok(Matrix3::from_fn(|k, l| m[(k, l)] - rows[k] * rows[l] / total))
}

/// Pointwise `L = -sum_i (sum_j M_ij) mu_i / sum_ij M_ij`.
pub fn lagrange_multiplier(mu: &FieldTriple, m: &Matrix3<f64>) -> ScalarField {
    let total = m.sum();
    assert!(total > 0.0, "mobility must have a positive sum");
    let w = m.column_sum() / total;
    let mut out = mu[0].scaled(-w[0]);
    out.axpy(-w[1], &mu[1]);
    out.axpy(-w[2], &mu[2]);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Polymerization degrees.
    pub n: [f64; 3],
    pub chi: Matrix3<f64>,
    pub eps: f64,
    pub gamma: f64,
    pub phibar: [f64; 3],
    pub sigma: f64,
    pub mobility: Matrix3<f64>,
    /// When false the bulk term `f` is dropped entirely, leaving a quadratic
    /// energy (the infinite-polymerization limit).
    pub bulk_log: bool,
    pub gamma_i: [f64; 3],
    pub alpha: Matrix3<f64>,
    pub m_eff: Matrix3<f64>,
    /// Shift inside the quadratization variable `q = sqrt(f + C)`.
    pub eq_c: f64,
}

fn check_symmetric(name: &str, m: &Matrix3<f64>) -> Result<()> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-14 * scale {
        return Err(Error::param(name, "matrix must be symmetric"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::param(name, "entries must be finite"));
    }
    Ok(())
}

impl ModelParams {
    pub fn new(
        n: [f64; 3],
        chi: Matrix3<f64>,
        eps: f64,
        gamma: f64,
        phibar: [f64; 3],
        mobility: Matrix3<f64>,
    ) -> Result<Self> {
        Self::with_options(n, chi, eps, gamma, phibar, mobility, DEFAULT_SIGMA, true)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_options(
        n: [f64; 3],
        chi: Matrix3<f64>,
        eps: f64,
        gamma: f64,
        phibar: [f64; 3],
        mobility: Matrix3<f64>,
        sigma: f64,
        bulk_log: bool,
    ) -> Result<Self> {
        for (i, &ni) in n.iter().enumerate() {
            if !(ni > 0.0 && ni.is_finite()) {
                return Err(Error::param(
                    format!("n_{}", SPECIES[i]),
                    format!("polymerization degree must be positive, got {ni}"),
                ));
            }
        }
        check_symmetric("chi", &chi)?;
        if (0..3).any(|i| chi[(i, i)] != 0.0) {
            return Err(Error::param("chi", "diagonal must be zero"));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::param("eps", format!("must be positive, got {eps}")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::param(
                "gamma",
                format!("must be nonnegative, got {gamma}"),
            ));
        }
        if phibar.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::param(
                "phibar",
                format!("each mean must lie in (0, 1), got {phibar:?}"),
            ));
        }
        let total: f64 = phibar.iter().sum();
        // states produced by long runs carry accumulated roundoff in the sum
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param(
                "phibar",
                format!("means must sum to 1, got {total}"),
            ));
        }
        if !(sigma > 0.0 && sigma < 1.0) {
            return Err(Error::param(
                "sigma",
                format!("must lie in (0, 1), got {sigma}"),
            ));
        }
        check_symmetric("mobility", &mobility)?;
        let eig = SymmetricEigen::new(mobility).eigenvalues;
        let min_eig = eig.min();
        if min_eig < -1e-14 * mobility.amax() {
            return Err(Error::param(
                "mobility",
                format!("matrix must be positive semidefinite, smallest eigenvalue {min_eig:.3e}"),
            ));
        }
        let m_eff = effective_mobility(&mobility)?;

        let gamma_i = phibar.map(|p| eps * eps / p);
        let (pa, pb) = (phibar[A], phibar[B]);
        let alpha = Matrix3::new(
            1.0 / (pa * pa),
            -1.0 / (pa * pb),
            0.0,
            -1.0 / (pa * pb),
            1.0 / (pb * pb),
            0.0,
            0.0,
            0.0,
            0.0,
        ) * (1.5 * eps * gamma);
        // each species contributes at least -1/(n e) to f on the simplex
        let eq_c = 1.0 + n.iter().map(|ni| 1.0 / (ni * std::f64::consts::E)).sum::<f64>();
        Ok(Self {
            n,
            chi,
            eps,
            gamma,
            phibar,
            sigma,
            mobility,
            bulk_log,
            gamma_i,
            alpha,
            m_eff,
            eq_c,
        })
    }

    /// `chi` from its three off-diagonal entries.
    pub fn chi_from(ab: f64, a_s: f64, bs: f64) -> Matrix3<f64> {
        Matrix3::new(0.0, ab, a_s, ab, 0.0, bs, a_s, bs, 0.0)
    }

    /// Bulk density `f(phi)` at one cell.
    #[inline]
    pub fn bulk(&self, phi: [f64; 3]) -> f64 {
        if !self.bulk_log {
            return 0.0;
        }
        (0..3).map(|i| reg_log(phi[i], self.n[i], self.sigma).0).sum()
    }

    /// `df/dphi_i` at one cell.
    #[inline]
    pub fn bulk_derivative(&self, phi: [f64; 3]) -> [f64; 3] {
        if !self.bulk_log {
            return [0.0; 3];
        }
        std::array::from_fn(|i| reg_log(phi[i], self.n[i], self.sigma).1)
    }
}

/// The three volume fractions `(phi_A, phi_B, phi_S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub phi: FieldTriple,
}

impl PhaseState {
    pub fn new(a: ScalarField, b: ScalarField, s: ScalarField) -> Self {
        crate::grid::assert_same_grid(&a, &b);
        crate::grid::assert_same_grid(&a, &s);
        Self { phi: [a, b, s] }
    }

    /// Builds the state with `phi_S = 1 - phi_A - phi_B`.
    pub fn from_ab(a: ScalarField, b: ScalarField) -> Self {
        let s = a.zip_map(&b, |x, y| 1.0 - x - y);
        Self::new(a, b, s)
    }

    pub fn uniform(grid: Grid2D, phibar: [f64; 3]) -> Self {
        Self {
            phi: phibar.map(|p| ScalarField::constant(grid, p)),
        }
    }

    pub fn grid(&self) -> &Grid2D {
        self.phi[0].grid()
    }

    pub fn a(&self) -> &ScalarField {
        &self.phi[A]
    }

    pub fn b(&self) -> &ScalarField {
        &self.phi[B]
    }

    pub fn s(&self) -> &ScalarField {
        &self.phi[S]
    }

    pub fn means(&self) -> [f64; 3] {
        std::array::from_fn(|i| mean_h(&self.phi[i]))
    }

    /// `max |phi_A + phi_B + phi_S - 1|`.
    pub fn simplex_defect(&self) -> f64 {
        let [a, b, s] = &self.phi;
        a.values()
            .iter()
            .zip(b.values())
            .zip(s.values())
            .fold(0.0, |m, ((x, y), z)| m.max((x + y + z - 1.0).abs()))
    }

    /// `phi_A - phi_B`.
    pub fn ab_difference(&self) -> ScalarField {
        &self.phi[A] - &self.phi[B]
    }

    pub fn is_finite(&self) -> bool {
        self.phi.iter().all(ScalarField::is_finite)
    }

    #[inline]
    pub(crate) fn cell(&self, k: usize) -> [f64; 3] {
        [
            self.phi[0].values()[k],
            self.phi[1].values()[k],
            self.phi[2].values()[k],
        ]
    }
}

/// Contributions to the discrete free energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParts {
    pub gradient: f64,
    pub interaction: f64,
    pub bulk: f64,
    pub nonlocal: f64,
}

impl EnergyParts {
    pub fn total(&self) -> f64 {
        self.gradient + self.interaction + self.bulk + self.nonlocal
    }
}

/// `mu_i = -gamma_i lap(phi_i) + sum_j chi_ij phi_j + f'_i - sum_j alpha_ij psi_j`
/// where `psi_j` solves `lap(psi_j) = phi_j - phibar_j` (only A and B carry
/// a nonlocal term).
pub fn chemical_potentials(
    state: &PhaseState,
    params: &ModelParams,
    psi_a: &ScalarField,
    psi_b: &ScalarField,
) -> FieldTriple {
    let mut mu = linear_local(&state.phi, params);
    for i in 0..2 {
        mu[i].axpy(-params.alpha[(i, A)], psi_a);
        mu[i].axpy(-params.alpha[(i, B)], psi_b);
    }
    add_bulk_derivative(&mut mu, state, params);
    mu
}

/// `-gamma_i lap(x_i) + sum_j chi_ij x_j`.
fn linear_local(x: &FieldTriple, params: &ModelParams) -> FieldTriple {
    std::array::from_fn(|i| {
        let mut out = laplacian_h(&x[i], BoundaryKind::NeumannZero).scaled(-params.gamma_i[i]);
        for (j, xj) in x.iter().enumerate() {
            if params.chi[(i, j)] != 0.0 {
                out.axpy(params.chi[(i, j)], xj);
            }
        }
        out
    })
}

fn add_bulk_derivative(mu: &mut FieldTriple, state: &PhaseState, params: &ModelParams) {
    if !params.bulk_log {
        return;
    }
    for k in 0..state.grid().len() {
        let d = params.bulk_derivative(state.cell(k));
        for i in 0..3 {
            mu[i].values_mut()[k] += d[i];
        }
    }
}

/// Parameters bound to a grid, with the transform plan used for the
/// nonlocal term.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ModelParams,
    pub basis: CosineBasisPlan,
}

impl Model {
    pub fn new(params: ModelParams, grid: Grid2D) -> Self {
        Self {
            params,
            basis: CosineBasisPlan::new(grid),
        }
    }

    pub fn grid(&self) -> &Grid2D {
        self.basis.grid()
    }

    /// Zero-mean `psi` with `lap(psi) = phi - phibar`.
    pub fn solve_psi(&self, phi: &ScalarField, phibar: f64) -> Result<ScalarField> {
        let mean = mean_h(phi);
        if (mean - phibar).abs() > 1e-10 {
            return Err(Error::IncompatibleMean {
                mean,
                expected: phibar,
            });
        }
        Ok(self.basis.pseudo_inverse_laplacian(phi))
    }

    /// Zero-mean `psi` with `lap(psi) = phi - mean(phi)`, defined for any
    /// field; equals [`Model::solve_psi`] whenever that succeeds.
    pub fn psi(&self, phi: &ScalarField) -> ScalarField {
        self.basis.pseudo_inverse_laplacian(phi)
    }

    /// Linear part of the chemical potential, `L x`.
    pub fn linear_op(&self, x: &FieldTriple) -> FieldTriple {
        let mut out = linear_local(x, &self.params);
        if self.params.gamma != 0.0 {
            let psi = [self.psi(&x[A]), self.psi(&x[B])];
            for (i, o) in out.iter_mut().enumerate().take(2) {
                o.axpy(-self.params.alpha[(i, A)], &psi[0]);
                o.axpy(-self.params.alpha[(i, B)], &psi[1]);
            }
        }
        out
    }

    /// `f'(phi)` per species.
    pub fn bulk_derivative(&self, state: &PhaseState) -> FieldTriple {
        let mut out: FieldTriple = std::array::from_fn(|_| ScalarField::zeros(*state.grid()));
        add_bulk_derivative(&mut out, state, &self.params);
        out
    }

    /// `(f(phi), 1)_h`.
    pub fn bulk_energy(&self, state: &PhaseState) -> f64 {
        if !self.params.bulk_log {
            return 0.0;
        }
        let g = state.grid();
        let s: f64 = (0..g.len()).map(|k| self.params.bulk(state.cell(k))).sum();
        s * g.cell_area()
    }

    pub fn chemical_potentials(&self, state: &PhaseState) -> FieldTriple {
        let psi_a = self.psi(state.a());
        let psi_b = self.psi(state.b());
        chemical_potentials(state, &self.params, &psi_a, &psi_b)
    }

    pub fn energy_parts(&self, state: &PhaseState) -> EnergyParts {
        let p = &self.params;
        let phi = &state.phi;
        let gradient = (0..3)
            .map(|i| 0.5 * p.gamma_i[i] * gradient_norm_sq(&phi[i]))
            .sum();
        let mut interaction = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if p.chi[(i, j)] != 0.0 {
                    interaction += 0.5 * p.chi[(i, j)] * inner_h(&phi[i], &phi[j]);
                }
            }
        }
        let mut nonlocal = 0.0;
        if p.gamma != 0.0 {
            let psi = [self.psi(&phi[A]), self.psi(&phi[B])];
            for i in 0..2 {
                let centered = phi[i].map(|v| v - p.phibar[i]);
                for (j, pj) in psi.iter().enumerate() {
                    nonlocal -= 0.5 * p.alpha[(i, j)] * inner_h(&centered, pj);
                }
            }
        }
        EnergyParts {
            gradient,
            interaction,
            bulk: self.bulk_energy(state),
            nonlocal,
        }
    }

    /// Discrete free energy `F_h = (phi, L phi)_h / 2 + (f(phi), 1)_h`.
    pub fn free_energy_h(&self, state: &PhaseState) -> f64 {
        self.energy_parts(state).total()
    }

    /// `(phi, L phi)_h / 2`.
    pub fn quadratic_energy(&self, state: &PhaseState) -> f64 {
        let e = self.energy_parts(state);
        e.gradient + e.interaction + e.nonlocal
    }
}

/// `sum_kl m_kl (a_k, lap(b_l))_h`.
pub fn mobility_form(m: &Matrix3<f64>, a: &FieldTriple, b: &FieldTriple) -> f64 {
    let lap: Vec<ScalarField> = b
        .iter()
        .map(|f| laplacian_h(f, BoundaryKind::NeumannZero))
        .collect();
    let mut s = 0.0;
    for k in 0..3 {
        for l in 0..3 {
            if m[(k, l)] != 0.0 {
                s += m[(k, l)] * inner_h(&a[k], &lap[l]);
            }
        }
    }
    s
}

/// `(m lap x)_k = sum_l m_kl lap(x_l)`.
pub fn mobility_laplacian(m: &Matrix3<f64>, x: &FieldTriple) -> FieldTriple {
    let lap: Vec<ScalarField> = x
        .iter()
        .map(|f| laplacian_h(f, BoundaryKind::NeumannZero))
        .collect();
    std::array::from_fn(|k| {
        let mut out = lap[0].scaled(m[(k, 0)]);
        out.axpy(m[(k, 1)], &lap[1]);
        out.axpy(m[(k, 2)], &lap[2]);
        out
    })
}
