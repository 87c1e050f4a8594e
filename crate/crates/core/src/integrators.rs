//! Linear second-order time steppers: energy quadratization (EQ) and the
//! four prediction-correction supplementary-variable schemes (SVM1-4).
//!
//! All schemes advance `phi_t = m_eff lap(mu)` with `mu = L phi + h(phi)`,
//! where `L` is the constant linear operator of the model and `h` collects
//! the bulk derivative and any coupling potential. The implicit part is
//! always `I - (dt/2) m_eff lap L`, solved exactly per cosine mode.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{
    electric_energy, electric_mu, field_strength_sq, magnetic_energy, magnetic_mu,
    magnetic_operator, order_parameter, solve_electric_potential, Coupling,
};
use crate::grid::{flatten, inner_h, mean_h, unflatten, FieldTriple, ScalarField};
use crate::model::{mobility_form, mobility_laplacian, Model, PhaseState, A, B};
use crate::spectral::{bicgstab, BlockHelmholtzPlan, KrylovConfig, SineBasisPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Eq,
    Svm1,
    Svm2,
    Svm3,
    Svm4,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::Eq,
        SchemeKind::Svm1,
        SchemeKind::Svm2,
        SchemeKind::Svm3,
        SchemeKind::Svm4,
    ];

    pub fn is_svm(self) -> bool {
        self != SchemeKind::Eq
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeKind::Eq => "eq",
            SchemeKind::Svm1 => "svm1",
            SchemeKind::Svm2 => "svm2",
            SchemeKind::Svm3 => "svm3",
            SchemeKind::Svm4 => "svm4",
        })
    }
}

impl FromStr for SchemeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "eq" => Ok(SchemeKind::Eq),
            "svm1" => Ok(SchemeKind::Svm1),
            "svm2" => Ok(SchemeKind::Svm2),
            "svm3" => Ok(SchemeKind::Svm3),
            "svm4" => Ok(SchemeKind::Svm4),
            other => Err(Error::param(
                "scheme",
                format!("unknown scheme `{other}` (expected eq, svm1, svm2, svm3 or svm4)"),
            )),
        }
    }
}

/// Where the SVM energy target evaluates the dissipation rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DissipationPoint {
    /// At the predicted midpoint state.
    #[default]
    Predicted,
    /// At the midpoint of the current state and the uncorrected update.
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub dissipation: DissipationPoint,
    /// Re-solve the induced potential at every Newton iterate instead of
    /// freezing it at the predicted midpoint.
    pub refresh_potential: bool,
    pub krylov: KrylovConfig,
    /// Newton accepts `|residual| <= newton_tol * max(1, |target|)`.
    pub newton_tol: f64,
    pub newton_maxit: usize,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            dissipation: DissipationPoint::Predicted,
            refresh_potential: false,
            krylov: KrylovConfig::default(),
            newton_tol: 1e-12,
            newton_maxit: 50,
        }
    }
}

/// Per-step ledger entry.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    /// Discrete energy of the new state (free energy plus coupling energy).
    pub energy: f64,
    /// SVM: the energy target. EQ: the quadratized energy.
    pub predicted_energy: f64,
    /// `sum_kl m_kl (mu_k, lap mu_l)_h`, never positive.
    pub dissipation: f64,
    pub alpha: f64,
    pub beta: f64,
    pub newton_iters: usize,
    pub krylov_iters: usize,
    pub means: [f64; 3],
    /// Newton met a vanishing derivative and kept `beta = 0`.
    pub degenerate: bool,
}

/// Output of the SVM prediction stage.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub phi_mid: PhaseState,
    pub mu_mid: FieldTriple,
    /// Bulk derivative plus coupling potential at the midpoint.
    pub h_mid: FieldTriple,
    pub potential_mid: Option<ScalarField>,
    pub dissipation: f64,
    /// `E^n + dt * dissipation`.
    pub energy_pred: f64,
}

#[derive(Debug, Clone)]
pub struct Correction {
    pub next: PhaseState,
    pub beta: f64,
    pub newton_iters: usize,
    pub degenerate: bool,
    pub dissipation: f64,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOutcome {
    pub beta: f64,
    pub iterations: usize,
    pub residual: f64,
    pub degenerate: bool,
}

/// Scalar Newton iteration from `x = 0` for `u(x) = 0`.
///
/// `eval` returns `(u, u', scale)` where `scale` bounds `|u'|` (it is used
/// to recognise a vanishing derivative). Converged means `|u| <= tol` and
/// no further progress is available at working precision.
pub fn newton_scalar(
    mut eval: impl FnMut(f64) -> Result<(f64, f64, f64)>,
    tol: f64,
    target_scale: f64,
    maxit: usize,
) -> Result<NewtonOutcome> {
    let mut beta = 0.0;
    let mut prev_u = f64::INFINITY;
    // best acceptable iterate so far; a step that makes things worse once
    // the residual is within tolerance is roundoff noise and is undone
    let mut best: Option<(f64, f64)> = None;
    for it in 1..=maxit.max(1) {
        let (u, du, scale) = eval(beta)?;
        if let Some((b, ub)) = best {
            if u.abs() >= ub.abs() || !u.is_finite() {
                return Ok(NewtonOutcome {
                    beta: b,
                    iterations: it,
                    residual: ub,
                    degenerate: false,
                });
            }
        }
        if !u.is_finite() {
            return Err(Error::NewtonDiverged {
                iterations: it,
                beta,
                residual: u,
            });
        }
        let ok = u.abs() <= tol;
        if u == 0.0 {
            return Ok(NewtonOutcome {
                beta,
                iterations: it,
                residual: u,
                degenerate: false,
            });
        }
        if scale == 0.0 {
            // the direction vanishes: the residual cannot be changed
            return if ok {
                Ok(NewtonOutcome {
                    beta,
                    iterations: it,
                    residual: u,
                    degenerate: true,
                })
            } else {
                Err(Error::NoRoot { residual: u })
            };
        }
        if du.abs() <= 1e-14 * scale {
            return if ok {
                Ok(NewtonOutcome {
                    beta,
                    iterations: it,
                    residual: u,
                    degenerate: true,
                })
            } else {
                Err(Error::NewtonDiverged {
                    iterations: it,
                    beta,
                    residual: u,
                })
            };
        }
        let step = u / du;
        let fine = u.abs() <= 1e-14 * target_scale
            || step.abs() <= 1e-12 * (beta - step).abs()
            || (it > 1 && u.abs() >= 0.5 * prev_u);
        if ok && fine {
            return Ok(NewtonOutcome {
                beta: beta - step,
                iterations: it,
                residual: u,
                degenerate: false,
            });
        }
        if ok {
            best = Some((beta, u));
        }
        beta -= step;
        prev_u = u.abs();
        if !beta.is_finite() {
            return Err(Error::NewtonDiverged {
                iterations: it,
                beta,
                residual: u,
            });
        }
    }
    let (u, _, _) = eval(beta)?;
    if u.abs() <= tol {
        Ok(NewtonOutcome {
            beta,
            iterations: maxit,
            residual: u,
            degenerate: false,
        })
    } else {
        Err(Error::NewtonDiverged {
            iterations: maxit,
            beta,
            residual: u,
        })
    }
}

/// `(a/n) ln a - (b/n) ln b` for the regularized potential, evaluated so
/// that the error scales with `|a - b|` rather than with the values.
fn reg_log_diff(a: f64, b: f64, n: f64, sigma: f64) -> f64 {
    let high = |a: f64, b: f64| ((a - b) * a.ln() + b * ((a - b) / b).ln_1p()) / n;
    let low = |a: f64, b: f64| (a - b) * ((a + b) / (2.0 * sigma) + sigma.ln()) / n;
    match (a <= sigma, b <= sigma) {
        (false, false) => high(a, b),
        (true, true) => low(a, b),
        (false, true) => high(a, sigma) + low(sigma, b),
        (true, false) => low(a, sigma) + high(sigma, b),
    }
}

fn add_coupling(h: &mut FieldTriple, cmu: Option<&ScalarField>) {
    if let Some(c) = cmu {
        h[A].axpy(1.0, c);
        h[B].axpy(-1.0, c);
    }
}

fn triple_add(a: &FieldTriple, b: &FieldTriple, s: f64) -> FieldTriple {
    std::array::from_fn(|i| {
        let mut o = a[i].clone();
        o.axpy(s, &b[i]);
        o
    })
}

fn triple_inner(a: &FieldTriple, b: &FieldTriple) -> f64 {
    (0..3).map(|i| inner_h(&a[i], &b[i])).sum()
}

fn remove_means(x: &FieldTriple) -> FieldTriple {
    std::array::from_fn(|i| {
        let m = mean_h(&x[i]);
        x[i].map(|v| v - m)
    })
}

/// `E(hat + beta dir) - E(hat)` and its derivative along a fixed line.
struct LineEnergy<'a> {
    integ: &'a Integrator,
    hat: &'a PhaseState,
    dir: &'a FieldTriple,
    lhat: FieldTriple,
    ldir: FieldTriple,
    /// Linear and quadratic coefficients of the non-bulk energy.
    c1: f64,
    c2: f64,
    /// Coupling potential at `hat` and its (linear) change along `dir`.
    cm_hat: Option<ScalarField>,
    cm_dir: Option<ScalarField>,
    dir_norm: f64,
}

impl LineEnergy<'_> {
    /// `(increment, derivative, |mu| |dir|)` at `beta`.
    fn eval(&self, beta: f64) -> (f64, f64, f64) {
        let p = &self.integ.model.params;
        let g = self.hat.grid();
        let mut bulk = 0.0;
        let (mut du, mut mu_sq) = (0.0, 0.0);
        for k in 0..g.len() {
            let h = self.hat.cell(k);
            let d = [
                self.dir[A].values()[k],
                self.dir[B].values()[k],
                self.dir[2].values()[k],
            ];
            let x = [h[0] + beta * d[0], h[1] + beta * d[1], h[2] + beta * d[2]];
            let fp = if p.bulk_log {
                for i in 0..3 {
                    bulk += reg_log_diff(x[i], h[i], p.n[i], p.sigma);
                }
                p.bulk_derivative(x)
            } else {
                [0.0; 3]
            };
            let mut c = 0.0;
            if let Some(a) = &self.cm_hat {
                c += a.values()[k];
            }
            if let Some(a) = &self.cm_dir {
                c += beta * a.values()[k];
            }
            for i in 0..3 {
                let sign = [1.0, -1.0, 0.0][i];
                let mu = self.lhat[i].values()[k] + beta * self.ldir[i].values()[k] + fp[i] + sign * c;
                du += mu * d[i];
                mu_sq += mu * mu;
            }
        }
        let area = g.cell_area();
        let u = beta * self.c1 + 0.5 * beta * beta * self.c2 + bulk * area;
        (u, du * area, (mu_sq * area).sqrt() * self.dir_norm)
    }
}

/// A configured stepper: model, coupling, time step and the implicit plan.
#[derive(Debug, Clone)]
pub struct Integrator {
    pub model: Model,
    pub coupling: Coupling,
    pub dt: f64,
    pub options: StepOptions,
    plan: BlockHelmholtzPlan,
    sine: Option<SineBasisPlan>,
}

impl Integrator {
    pub fn new(model: Model, coupling: Coupling, dt: f64, options: StepOptions) -> Result<Self> {
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(Error::param("dt", format!("must be nonnegative, got {dt}")));
        }
        coupling.validate()?;
        let plan =
            BlockHelmholtzPlan::new(&model.basis, &model.params, 0.5 * dt, nalgebra::Matrix3::zeros())?;
        let sine = coupling
            .electric()
            .map(|_| SineBasisPlan::new(*model.grid()));
        Ok(Self {
            model,
            coupling,
            dt,
            options,
            plan,
            sine,
        })
    }

    pub fn plan(&self) -> &BlockHelmholtzPlan {
        &self.plan
    }

    fn dbar(&self) -> f64 {
        self.model.params.phibar[A] - self.model.params.phibar[B]
    }

    fn order(&self, st: &PhaseState) -> ScalarField {
        order_parameter(st.a(), st.b(), self.dbar())
    }

    /// Induced potential at `st` (electric coupling only).
    pub fn solve_potential(
        &self,
        st: &PhaseState,
        t: f64,
        guess: Option<&ScalarField>,
    ) -> Result<Option<ScalarField>> {
        match (&self.coupling, &self.sine) {
            (Coupling::Electric(ep), Some(plan)) => {
                let sol = solve_electric_potential(&self.order(st), ep, t, guess, plan)?;
                Ok(Some(sol.potential))
            }
            _ => Ok(None),
        }
    }

    /// Coupling chemical potential (added to `mu_A`, subtracted from `mu_B`)
    /// with the induced potential given.
    pub fn coupling_mu(
        &self,
        st: &PhaseState,
        t: f64,
        potential: Option<&ScalarField>,
    ) -> Option<ScalarField> {
        match &self.coupling {
            Coupling::None => None,
            Coupling::Magnetic(mp) => Some(magnetic_mu(&self.order(st), mp)),
            Coupling::Electric(ep) => {
                let p = potential.expect("electric coupling needs the induced potential");
                Some(electric_mu(p, ep, t))
            }
        }
    }

    pub fn coupling_energy(&self, st: &PhaseState, t: f64, potential: Option<&ScalarField>) -> f64 {
        match &self.coupling {
            Coupling::None => 0.0,
            Coupling::Magnetic(mp) => magnetic_energy(&self.order(st), mp),
            Coupling::Electric(ep) => {
                let p = potential.expect("electric coupling needs the induced potential");
                -electric_energy(&self.order(st), p, ep, t)
            }
        }
    }

    /// Free energy plus coupling energy.
    pub fn total_energy(&self, st: &PhaseState, t: f64, potential: Option<&ScalarField>) -> f64 {
        self.model.free_energy_h(st) + self.coupling_energy(st, t, potential)
    }

    /// `E(to) - E(from)` with the potential frozen, accurate to the size of
    /// the increment rather than the size of the energies.
    pub fn energy_increment(
        &self,
        from: &PhaseState,
        to: &PhaseState,
        t: f64,
        potential: Option<&ScalarField>,
    ) -> f64 {
        let p = &self.model.params;
        let delta: FieldTriple = std::array::from_fn(|i| &to.phi[i] - &from.phi[i]);
        let sum: FieldTriple = std::array::from_fn(|i| &to.phi[i] + &from.phi[i]);
        let mut incr = 0.5 * triple_inner(&delta, &self.model.linear_op(&sum));
        if p.bulk_log {
            let g = to.grid();
            let mut s = 0.0;
            for k in 0..g.len() {
                let a = to.cell(k);
                let b = from.cell(k);
                for i in 0..3 {
                    s += reg_log_diff(a[i], b[i], p.n[i], p.sigma);
                }
            }
            incr += s * g.cell_area();
        }
        let du = delta[A].zip_map(&delta[B], |a, b| a - b);
        match &self.coupling {
            Coupling::None => {}
            Coupling::Magnetic(mp) => {
                if mp.gamma_m != 0.0 {
                    let us = &self.order(to) + &self.order(from);
                    incr -= 0.5 * mp.gamma_m * inner_h(&du, &magnetic_operator(&us, mp.b0));
                }
            }
            Coupling::Electric(ep) => {
                let pot = potential.expect("electric coupling needs the induced potential");
                incr -= 0.5 * ep.eps1 * inner_h(&du, &field_strength_sq(pot, ep, t));
            }
        }
        incr
    }

    /// `f'(phi)` plus the coupling potential.
    fn h(&self, st: &PhaseState, cmu: Option<&ScalarField>) -> FieldTriple {
        let mut h = self.model.bulk_derivative(st);
        add_coupling(&mut h, cmu);
        h
    }

    /// Total chemical potential `L phi + f'(phi) + coupling`.
    pub fn total_mu(&self, st: &PhaseState, t: f64, potential: Option<&ScalarField>) -> FieldTriple {
        let mut mu = self.model.chemical_potentials(st);
        add_coupling(&mut mu, self.coupling_mu(st, t, potential).as_ref());
        mu
    }

    fn mdelta(&self, x: &FieldTriple) -> FieldTriple {
        mobility_laplacian(&self.model.params.m_eff, x)
    }

    fn extrapolate(&self, prev: Option<&PhaseState>, curr: &PhaseState) -> PhaseState {
        match prev {
            Some(p) => PhaseState {
                phi: std::array::from_fn(|i| curr.phi[i].zip_map(&p.phi[i], |c, q| 1.5 * c - 0.5 * q)),
            },
            None => curr.clone(),
        }
    }

    /// Half-step linearly implicit prediction of the midpoint state and the
    /// energy target `E^n + dt (mu~, m lap mu~)_h`. `prev = None` gives the
    /// first-order bootstrap variant.
    pub fn svm_predict(
        &self,
        prev: Option<&PhaseState>,
        curr: &PhaseState,
        t: f64,
        energy_curr: f64,
        potential_guess: Option<&ScalarField>,
    ) -> Result<Prediction> {
        let t_mid = t + 0.5 * self.dt;
        let bar = self.extrapolate(prev, curr);
        let pot_bar = self.solve_potential(&bar, t_mid, potential_guess)?;
        let h_bar = self.h(&bar, self.coupling_mu(&bar, t_mid, pot_bar.as_ref()).as_ref());
        let rhs = triple_add(&curr.phi, &self.mdelta(&h_bar), 0.5 * self.dt);
        // backward Euler over half a step, implicit in the linear part
        let phi_mid = PhaseState {
            phi: self.plan.solve(&rhs),
        };
        let potential_mid = self.solve_potential(&phi_mid, t_mid, pot_bar.as_ref())?;
        let h_mid = self.h(
            &phi_mid,
            self.coupling_mu(&phi_mid, t_mid, potential_mid.as_ref()).as_ref(),
        );
        let mu_mid = triple_add(&self.model.linear_op(&phi_mid.phi), &h_mid, 1.0);
        let dissipation = mobility_form(&self.model.params.m_eff, &mu_mid, &mu_mid);
        Ok(Prediction {
            phi_mid,
            mu_mid,
            h_mid,
            potential_mid,
            dissipation,
            energy_pred: energy_curr + self.dt * dissipation,
        })
    }

    /// Crank-Nicolson correction with the midpoint nonlinearity followed by
    /// the scalar energy constraint along the scheme's direction field.
    pub fn svm_correct(
        &self,
        curr: &PhaseState,
        pred: &Prediction,
        t: f64,
        energy_curr: f64,
        variant: SchemeKind,
    ) -> Result<Correction> {
        assert!(variant.is_svm(), "svm_correct needs an SVM variant");
        let dt = self.dt;
        let t_mid = t + 0.5 * dt;
        let lphi = self.model.linear_op(&curr.phi);
        let mut rhs = triple_add(&curr.phi, &self.mdelta(&lphi), 0.5 * dt);
        rhs = triple_add(&rhs, &self.mdelta(&pred.h_mid), dt);
        let hat = PhaseState {
            phi: self.plan.solve(&rhs),
        };
        let dir: FieldTriple = match variant {
            SchemeKind::Svm1 => self.plan.solve(&self.mdelta(&pred.h_mid)),
            SchemeKind::Svm2 => self.plan.solve(&self.mdelta(&pred.mu_mid)),
            SchemeKind::Svm3 => remove_means(&pred.phi_mid.phi),
            SchemeKind::Svm4 => remove_means(&hat.phi),
            SchemeKind::Eq => unreachable!(),
        };

        let frozen = pred.potential_mid.as_ref();
        let dissipation = match self.options.dissipation {
            DissipationPoint::Predicted => pred.dissipation,
            DissipationPoint::Final => {
                let mid = PhaseState {
                    phi: std::array::from_fn(|i| (&curr.phi[i] + &hat.phi[i]).scaled(0.5)),
                };
                let mu = self.total_mu(&mid, t_mid, frozen);
                mobility_form(&self.model.params.m_eff, &mu, &mu)
            }
        };
        let increment = dt * dissipation;
        let target = energy_curr + increment;
        let tol = self.options.newton_tol * target.abs().max(1.0);
        let mut dir_norm = triple_inner(&dir, &dir).sqrt();
        // a direction at roundoff level of the state carries no information
        let dir = if dir_norm <= 1e-13 * triple_inner(&hat.phi, &hat.phi).sqrt() {
            dir_norm = 0.0;
            std::array::from_fn(|_| ScalarField::zeros(*hat.grid()))
        } else {
            dir
        };

        let outcome = if self.options.refresh_potential && self.sine.is_some() {
            let mut guess = frozen.cloned();
            let base = {
                let p = self.solve_potential(curr, t_mid, guess.as_ref())?;
                self.total_energy(curr, t_mid, p.as_ref())
            };
            newton_scalar(
                |beta| {
                    let st = PhaseState {
                        phi: triple_add(&hat.phi, &dir, beta),
                    };
                    let p = self.solve_potential(&st, t_mid, guess.as_ref())?;
                    let u = self.total_energy(&st, t_mid, p.as_ref()) - base - increment;
                    let mu = self.total_mu(&st, t_mid, p.as_ref());
                    let du = triple_inner(&mu, &dir);
                    let scale = triple_inner(&mu, &mu).sqrt() * dir_norm;
                    guess = p;
                    Ok((u, du, scale))
                },
                tol,
                increment.abs(),
                self.options.newton_maxit,
            )?
        } else {
            let line = self.line_energy(&hat, &dir, t_mid, frozen);
            let offset = self.energy_increment(curr, &hat, t_mid, frozen) - increment;
            newton_scalar(
                |beta| {
                    let (u, du, scale) = line.eval(beta);
                    Ok((u + offset, du, scale))
                },
                tol,
                increment.abs(),
                self.options.newton_maxit,
            )?
        };
        let next = PhaseState {
            phi: triple_add(&hat.phi, &dir, outcome.beta),
        };
        Ok(Correction {
            next,
            beta: outcome.beta,
            newton_iters: outcome.iterations,
            degenerate: outcome.degenerate,
            dissipation,
            target,
        })
    }

    /// Precomputes the energy along `phi_hat + beta dir` with the potential
    /// frozen. Everything but the bulk term is a polynomial in `beta`.
    fn line_energy<'a>(
        &'a self,
        phi_hat: &'a PhaseState,
        dir: &'a FieldTriple,
        t: f64,
        potential: Option<&ScalarField>,
    ) -> LineEnergy<'a> {
        let lhat = self.model.linear_op(&phi_hat.phi);
        let ldir = self.model.linear_op(dir);
        let mut c1 = triple_inner(dir, &lhat);
        let mut c2 = triple_inner(dir, &ldir);
        let du = &dir[A] - &dir[B];
        let (cm_hat, cm_dir) = match &self.coupling {
            Coupling::None => (None, None),
            Coupling::Magnetic(mp) => {
                let a_hat = magnetic_mu(&self.order(phi_hat), mp);
                let a_dir = magnetic_mu(&du, mp);
                c1 += inner_h(&du, &a_hat);
                c2 += inner_h(&du, &a_dir);
                (Some(a_hat), Some(a_dir))
            }
            Coupling::Electric(ep) => {
                let pot = potential.expect("electric coupling needs the induced potential");
                let e = electric_mu(pot, ep, t);
                c1 += inner_h(&du, &e);
                (Some(e), None)
            }
        };
        LineEnergy {
            integ: self,
            hat: phi_hat,
            dir,
            lhat,
            ldir,
            c1,
            c2,
            cm_hat,
            cm_dir,
            dir_norm: triple_inner(dir, dir).sqrt(),
        }
    }

    /// Solves `E(phi_hat + beta dir) = target` for `beta`, starting from
    /// zero, with the induced potential frozen at `potential` (if any).
    pub fn newton_beta(
        &self,
        target: f64,
        phi_hat: &PhaseState,
        dir: &FieldTriple,
        t: f64,
        potential: Option<&ScalarField>,
    ) -> Result<NewtonOutcome> {
        let base = self.total_energy(phi_hat, t, potential);
        let increment = target - base;
        let line = self.line_energy(phi_hat, dir, t, potential);
        newton_scalar(
            |beta| {
                let (u, du, scale) = line.eval(beta);
                Ok((u - increment, du, scale))
            },
            self.options.newton_tol * target.abs().max(1.0),
            increment.abs(),
            self.options.newton_maxit,
        )
    }

    /// Quadratization variable `q = sqrt(f(phi) + C)` per cell.
    pub fn eq_variable(&self, st: &PhaseState) -> ScalarField {
        let p = &self.model.params;
        let g = *st.grid();
        ScalarField::from_vec(
            g,
            (0..g.len()).map(|k| (p.bulk(st.cell(k)) + p.eq_c).sqrt()).collect(),
        )
        .expect("length")
    }

    /// `(phi, L phi)_h / 2 + ||q||^2 - C |Omega|`.
    pub fn modified_energy(&self, st: &PhaseState, q: &ScalarField) -> f64 {
        let g = st.grid();
        self.model.quadratic_energy(st) + inner_h(q, q) - self.model.params.eq_c * g.area()
    }

    /// One EQ step. The midpoint `q` is eliminated through
    /// `q^{n+1} = q^n + w . (phi^{n+1} - phi^n)` with `w = q'(phi_bar)`, which
    /// leaves a variable-coefficient linear system for `phi^{n+1}`.
    pub fn eq_step(
        &self,
        prev: Option<&PhaseState>,
        curr: &PhaseState,
        q: &ScalarField,
        t: f64,
        potential_guess: Option<&ScalarField>,
    ) -> Result<EqOutcome> {
        let p = &self.model.params;
        let dt = self.dt;
        let g = *curr.grid();
        let n = g.len();
        let t_mid = t + 0.5 * dt;
        let bar = self.extrapolate(prev, curr);
        let pot_bar = self.solve_potential(&bar, t_mid, potential_guess)?;
        let cmu = self.coupling_mu(&bar, t_mid, pot_bar.as_ref());

        let mut w: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; n]);
        if p.bulk_log {
            for k in 0..n {
                let c = bar.cell(k);
                let qb = (p.bulk(c) + p.eq_c).sqrt();
                let d = p.bulk_derivative(c);
                for i in 0..3 {
                    w[i][k] = d[i] / (2.0 * qb);
                }
            }
        }
        let wdot = |x: &FieldTriple| -> Vec<f64> {
            (0..n)
                .map(|k| (0..3).map(|i| w[i][k] * x[i].values()[k]).sum())
                .collect()
        };
        let w_times = |s: &[f64]| -> FieldTriple {
            std::array::from_fn(|i| {
                ScalarField::from_vec(g, (0..n).map(|k| w[i][k] * s[k]).collect()).expect("length")
            })
        };

        // rhs = phi^n + (dt/2) m lap L phi^n + dt m lap [2 q w - w (w . phi^n) + coupling]
        let wphi = wdot(&curr.phi);
        let s: Vec<f64> = (0..n).map(|k| 2.0 * q.values()[k] - wphi[k]).collect();
        let mut explicit = w_times(&s);
        add_coupling(&mut explicit, cmu.as_ref());
        let lphi = self.model.linear_op(&curr.phi);
        let mut rhs = triple_add(&curr.phi, &self.mdelta(&lphi), 0.5 * dt);
        rhs = triple_add(&rhs, &self.mdelta(&explicit), dt);

        let apply = |x: &[f64]| -> Vec<f64> {
            let xt = unflatten(g, x);
            let mut out = self.plan.apply(&xt);
            let ww = self.mdelta(&w_times(&wdot(&xt)));
            for i in 0..3 {
                out[i].axpy(-dt, &ww[i]);
            }
            flatten(&out)
        };
        let mut wbar = nalgebra::Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                wbar[(i, j)] = (0..n).map(|k| w[i][k] * w[j][k]).sum::<f64>() / n as f64;
            }
        }
        let pre = BlockHelmholtzPlan::new(&self.model.basis, p, 0.5 * dt, wbar * 2.0)?;
        let precond = |x: &[f64]| flatten(&pre.solve(&unflatten(g, x)));
        // start from phi^n: its means and species sum are already exact, and
        // the Krylov corrections preserve both
        let x0 = flatten(&curr.phi);
        let kr = bicgstab(apply, precond, &flatten(&rhs), Some(&x0), &self.options.krylov)
            .into_result()?;
        let next = PhaseState {
            phi: unflatten(g, &kr.solution),
        };

        let delta: FieldTriple = std::array::from_fn(|i| &next.phi[i] - &curr.phi[i]);
        let wd = wdot(&delta);
        let q_next = ScalarField::from_vec(g, (0..n).map(|k| q.values()[k] + wd[k]).collect())
            .expect("length");

        // dissipation at the midpoint: mu = L phi_mid + 2 q_mid w + coupling
        let mid: FieldTriple = std::array::from_fn(|i| (&curr.phi[i] + &next.phi[i]).scaled(0.5));
        let q_mid: Vec<f64> = (0..n).map(|k| q.values()[k] + q_next.values()[k]).collect();
        let mut mu = triple_add(&self.model.linear_op(&mid), &w_times(&q_mid), 1.0);
        add_coupling(&mut mu, cmu.as_ref());
        let dissipation = mobility_form(&p.m_eff, &mu, &mu);
        Ok(EqOutcome {
            next,
            q_next,
            krylov_iters: kr.iterations,
            dissipation,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EqOutcome {
    pub next: PhaseState,
    pub q_next: ScalarField,
    pub krylov_iters: usize,
    pub dissipation: f64,
}

/// A running integration: current and previous state plus the scheme's
/// companion variables.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub integrator: Integrator,
    pub scheme: SchemeKind,
    pub state: PhaseState,
    prev: Option<PhaseState>,
    q: Option<ScalarField>,
    potential: Option<ScalarField>,
    t0: f64,
    steps: usize,
    energy: f64,
}

impl Simulation {
    pub fn new(
        integrator: Integrator,
        scheme: SchemeKind,
        initial: PhaseState,
        t0: f64,
    ) -> Result<Self> {
        if initial.grid() != integrator.model.grid() {
            return Err(Error::InvalidGrid(
                "initial state and model use different grids".into(),
            ));
        }
        if !initial.is_finite() {
            return Err(Error::param("initial", "state has non-finite values"));
        }
        let potential = integrator.solve_potential(&initial, t0, None)?;
        let energy = integrator.total_energy(&initial, t0, potential.as_ref());
        let q = (scheme == SchemeKind::Eq).then(|| integrator.eq_variable(&initial));
        Ok(Self {
            integrator,
            scheme,
            state: initial,
            prev: None,
            q,
            potential,
            t0,
            steps: 0,
            energy,
        })
    }

    pub fn time(&self) -> f64 {
        self.t0 + self.steps as f64 * self.integrator.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn potential(&self) -> Option<&ScalarField> {
        self.potential.as_ref()
    }

    pub fn q(&self) -> Option<&ScalarField> {
        self.q.as_ref()
    }

    /// Advances one step. The first step of a run is the first-order
    /// two-level bootstrap; later steps use the three-level extrapolation.
    pub fn step(&mut self) -> Result<StepRecord> {
        let integ = &self.integrator;
        let t = self.time();
        let t_next = self.t0 + (self.steps + 1) as f64 * integ.dt;
        let prev = self.prev.as_ref();
        let (next, rec_partial, q_next) = match self.scheme {
            SchemeKind::Eq => {
                let q = self.q.as_ref().expect("EQ keeps q");
                let out = integ.eq_step(prev, &self.state, q, t, self.potential.as_ref())?;
                let modified = integ.modified_energy(&out.next, &out.q_next);
                (
                    out.next,
                    (modified, out.dissipation, 0.0, 0, out.krylov_iters, false),
                    Some(out.q_next),
                )
            }
            variant => {
                let pred = integ.svm_predict(prev, &self.state, t, self.energy, self.potential.as_ref())?;
                let corr = integ.svm_correct(&self.state, &pred, t, self.energy, variant)?;
                (
                    corr.next,
                    (
                        corr.target,
                        corr.dissipation,
                        corr.beta,
                        corr.newton_iters,
                        0,
                        corr.degenerate,
                    ),
                    None,
                )
            }
        };
        if !next.is_finite() {
            return Err(Error::NewtonDiverged {
                iterations: 0,
                beta: f64::NAN,
                residual: f64::NAN,
            });
        }
        let potential = integ.solve_potential(&next, t_next, self.potential.as_ref())?;
        let energy = integ.total_energy(&next, t_next, potential.as_ref());
        let (predicted, dissipation, beta, newton_iters, krylov_iters, degenerate) = rec_partial;
        let record = StepRecord {
            t: t_next,
            energy,
            predicted_energy: predicted,
            dissipation,
            alpha: if integ.dt > 0.0 { beta / integ.dt } else { 0.0 },
            beta,
            newton_iters,
            krylov_iters,
            means: next.means(),
            degenerate,
        };
        let old = std::mem::replace(&mut self.state, next);
        self.prev = Some(old);
        if q_next.is_some() {
            self.q = q_next;
        }
        self.potential = potential;
        self.energy = energy;
        self.steps += 1;
        Ok(record)
    }

    /// Runs `n` steps, stopping at the first failure. Records of completed
    /// steps are returned alongside the error.
    pub fn run_steps(&mut self, n: usize) -> (Vec<StepRecord>, Option<Error>) {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            match self.step() {
                Ok(r) => out.push(r),
                Err(e) => return (out, Some(e)),
            }
        }
        (out, None)
    }
}

/// Single bootstrap step from `state0`: the two-level first-order variant
/// of `scheme`.
pub fn bootstrap_step(
    integrator: &Integrator,
    scheme: SchemeKind,
    state0: &PhaseState,
    t0: f64,
) -> Result<PhaseState> {
    let mut sim = Simulation::new(integrator.clone(), scheme, state0.clone(), t0)?;
    sim.step()?;
    Ok(sim.state)
}
