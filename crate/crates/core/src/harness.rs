//! Experiment catalogue, initial conditions, refinement studies and
//! morphology metrics.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, SymmetricEigen};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Coupling, ElectricParams, FieldSchedule, MagneticParams};
use crate::grid::{grad_h, norm_h, restrict, BoundaryKind, Grid2D, ScalarField};
use crate::integrators::{Integrator, SchemeKind, Simulation, StepOptions, StepRecord};
use crate::model::{Model, ModelParams, PhaseState, DEFAULT_SIGMA};

/// Applied field of the hysteresis protocol: ramp up on `[0, 5]`, hold at
/// 10 until `t = 15`, ramp down to zero at `t = 20`, then off. The field
/// points along `x`.
pub fn hysteresis_field(t: f64) -> [f64; 2] {
    let e = if t <= 5.0 {
        2.0 * t.max(0.0)
    } else if t <= 15.0 {
        10.0
    } else if t <= 20.0 {
        40.0 - 2.0 * t
    } else {
        0.0
    };
    [e, 0.0]
}

/// Serializable model block. `chi` lists the pair interactions
/// `(AB, AS, BS)`; the means are taken from the initial data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n: [f64; 3],
    pub chi: [f64; 3],
    pub eps: f64,
    pub gamma: f64,
    pub mobility: [[f64; 3]; 3],
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_true")]
    pub bulk_log: bool,
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    pub fn params(&self, phibar: [f64; 3]) -> Result<ModelParams> {
        let m = &self.mobility;
        ModelParams::with_options(
            self.n,
            ModelParams::chi_from(self.chi[0], self.chi[1], self.chi[2]),
            self.eps,
            self.gamma,
            phibar,
            Matrix3::from_fn(|i, j| m[i][j]),
            self.sigma,
            self.bulk_log,
        )
    }
}

/// Initial data for `(phi_A, phi_B)`; `phi_S = 1 - phi_A - phi_B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// `base + amp cos(k pi x) cos(k pi y)`.
    CosineProduct { base: [f64; 2], amp: [f64; 2], k: f64 },
    /// `base + amp (1 - cos(k pi x)) (1 - cos(k pi y))`.
    BumpProduct { base: [f64; 2], amp: [f64; 2], k: f64 },
    /// `mean + amplitude * r` with `r` uniform on `(-1, 1)`, independent per
    /// species, recentred so the discrete means are exact.
    Noise { mean: [f64; 2], amplitude: f64, seed: u64 },
    /// `from`, relaxed without coupling for `time` with step `dt` (SVM2).
    Relaxed { from: Box<InitialCondition>, time: f64, dt: f64 },
}

impl InitialCondition {
    /// Exact discrete means of `(phi_A, phi_B, phi_S)` on cell-centred
    /// grids of the unit square (the cosine terms average to zero there).
    pub fn phibar(&self) -> [f64; 3] {
        let (a, b) = match self {
            InitialCondition::CosineProduct { base, .. } => (base[0], base[1]),
            InitialCondition::BumpProduct { base, amp, .. } => (base[0] + amp[0], base[1] + amp[1]),
            InitialCondition::Noise { mean, .. } => (mean[0], mean[1]),
            InitialCondition::Relaxed { from, .. } => return from.phibar(),
        };
        [a, b, 1.0 - a - b]
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        match self {
            InitialCondition::Noise { mean, amplitude, .. } => InitialCondition::Noise {
                mean: *mean,
                amplitude: *amplitude,
                seed,
            },
            InitialCondition::Relaxed { from, time, dt } => InitialCondition::Relaxed {
                from: Box::new(from.with_seed(seed)),
                time: *time,
                dt: *dt,
            },
            other => other.clone(),
        }
    }

    /// Builds the state. `model` is needed only for relaxed data.
    pub fn build(&self, grid: Grid2D, model: &ModelSpec) -> Result<PhaseState> {
        Ok(match self {
            InitialCondition::CosineProduct { base, amp, k } => {
                let c = |x: f64, y: f64| (k * PI * x).cos() * (k * PI * y).cos();
                PhaseState::from_ab(
                    ScalarField::from_fn(grid, |x, y| base[0] + amp[0] * c(x, y)),
                    ScalarField::from_fn(grid, |x, y| base[1] + amp[1] * c(x, y)),
                )
            }
            InitialCondition::BumpProduct { base, amp, k } => {
                let c = |x: f64, y: f64| (1.0 - (k * PI * x).cos()) * (1.0 - (k * PI * y).cos());
                PhaseState::from_ab(
                    ScalarField::from_fn(grid, |x, y| base[0] + amp[0] * c(x, y)),
                    ScalarField::from_fn(grid, |x, y| base[1] + amp[1] * c(x, y)),
                )
            }
            InitialCondition::Noise {
                mean,
                amplitude,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut draw = |m: f64| {
                    let mut v: Vec<f64> = (0..grid.len())
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect();
                    let avg = v.iter().sum::<f64>() / v.len() as f64;
                    v.iter_mut().for_each(|r| *r = m + amplitude * (*r - avg));
                    ScalarField::from_vec(grid, v).expect("length")
                };
                let a = draw(mean[0]);
                let b = draw(mean[1]);
                PhaseState::from_ab(a, b)
            }
            InitialCondition::Relaxed { from, time, dt } => {
                let st = from.build(grid, model)?;
                let params = model.params(st.means())?;
                let integ = Integrator::new(
                    Model::new(params, grid),
                    Coupling::None,
                    *dt,
                    StepOptions::default(),
                )?;
                let mut sim = Simulation::new(integ, SchemeKind::Svm2, st, 0.0)?;
                let (_, err) = sim.run_steps(step_count(*time, *dt)?);
                if let Some(e) = err {
                    return Err(e);
                }
                sim.state
            }
        })
    }
}

/// Number of steps of size `dt` covering `[0, t]`; `t` must be a multiple
/// of `dt` up to roundoff.
pub fn step_count(t: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(t >= 0.0) {
        return Err(Error::param("dt", "time step must be positive and horizon nonnegative"));
    }
    let n = (t / dt).round();
    if (n * dt - t).abs() > 1e-9 * t.max(dt) {
        return Err(Error::param(
            "t_end",
            format!("horizon {t} is not a multiple of dt = {dt}"),
        ));
    }
    Ok(n as usize)
}

/// Grid size, time step and horizon of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scale {
    pub n: usize,
    pub dt: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub description: String,
    pub model: ModelSpec,
    #[serde(default)]
    pub coupling: Coupling,
    pub initial: InitialCondition,
    pub desk: Scale,
    pub full: Scale,
    /// Snapshot times as fractions of the horizon.
    #[serde(default)]
    pub snapshot_fractions: Vec<f64>,
}

impl ExperimentSpec {
    pub fn scale(&self, full: bool) -> Scale {
        if full {
            self.full
        } else {
            self.desk
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        self.model.params(self.initial.phibar())
    }

    pub fn grid(&self, n: usize) -> Result<Grid2D> {
        Grid2D::unit_square(n)
    }

    pub fn initial_state(&self, n: usize) -> Result<PhaseState> {
        self.initial.build(self.grid(n)?, &self.model)
    }

    /// Simulation on an arbitrary grid. The conserved means entering the
    /// model are the discrete means of the initial data.
    pub fn simulation_on(
        &self,
        scheme: SchemeKind,
        grid: Grid2D,
        dt: f64,
        options: StepOptions,
    ) -> Result<Simulation> {
        let state = self.initial.build(grid, &self.model)?;
        let params = self.model.params(state.means())?;
        let integ = Integrator::new(Model::new(params, grid), self.coupling, dt, options)?;
        Simulation::new(integ, scheme, state, 0.0)
    }

    pub fn simulation(
        &self,
        scheme: SchemeKind,
        n: usize,
        dt: f64,
        options: StepOptions,
    ) -> Result<Simulation> {
        self.simulation_on(scheme, self.grid(n)?, dt, options)
    }
}

fn diag(d: [f64; 3], s: f64) -> [[f64; 3]; 3] {
    [[d[0] * s, 0.0, 0.0], [0.0, d[1] * s, 0.0], [0.0, 0.0, d[2] * s]]
}

fn sym(d: [f64; 3], ab: f64, a_s: f64, bs: f64, s: f64) -> [[f64; 3]; 3] {
    [
        [d[0] * s, ab * s, a_s * s],
        [ab * s, d[1] * s, bs * s],
        [a_s * s, bs * s, d[2] * s],
    ]
}

fn model(n: [f64; 3], chi: [f64; 3], eps: f64, gamma: f64, mobility: [[f64; 3]; 3]) -> ModelSpec {
    ModelSpec {
        n,
        chi,
        eps,
        gamma,
        mobility,
        sigma: DEFAULT_SIGMA,
        bulk_log: true,
    }
}

const SEED: u64 = 20_240_501;

/// Mobility matrices of the cross-coupling study (`M1`..`M6`).
pub fn cross_coupling_mobilities() -> [[[f64; 3]; 3]; 6] {
    [
        diag([4.0, 4.0, 4.0], 1e-3),
        diag([3.0, 4.0, 5.0], 1e-3),
        sym([3.0, 4.0, 5.0], -0.5, 0.0, 0.0, 1e-3),
        sym([3.0, 4.0, 5.0], -0.5, -0.5, -0.5, 1e-3),
        sym([3.0, 4.0, 5.0], 0.5, 0.0, 0.0, 1e-3),
        sym([3.0, 4.0, 5.0], 0.5, 0.5, 0.5, 1e-3),
    ]
}

/// Mobilities 1-3 of the field-driven studies.
pub fn field_mobilities() -> [[[f64; 3]; 3]; 3] {
    [
        diag([4.0, 6.0, 20.0], 1e-4),
        sym([4.0, 6.0, 20.0], -1.0, 0.0, 0.0, 1e-4),
        sym([4.0, 6.0, 20.0], -1.0, -1.0, -1.0, 1e-4),
    ]
}

/// The mesh-refinement setup.
pub fn mesh_refinement_spec() -> ExperimentSpec {
    ExperimentSpec {
        name: "mesh_refinement".into(),
        description: "smooth cosine data for convergence ladders".into(),
        model: model(
            [3.0, 2.0, 1.0],
            [2.0, 3.0, 4.0],
            0.1,
            1.0,
            sym([4.0, 5.0, 6.0], 1.0, 2.0, 3.0, 1e-5),
        ),
        coupling: Coupling::None,
        initial: InitialCondition::CosineProduct {
            base: [0.3, 0.2],
            amp: [0.3, 0.2],
            k: 1.0,
        },
        desk: Scale {
            n: 64,
            dt: 5e-2,
            t_end: 1.0,
        },
        full: Scale {
            n: 256,
            dt: 5e-2,
            t_end: 1.0,
        },
        snapshot_fractions: vec![1.0],
    }
}

/// All built-in experiments with desk-scale defaults.
pub fn builtin_experiments() -> Vec<ExperimentSpec> {
    let m_diag = diag([4.0, 4.0, 4.0], 1e-3);
    let quarters = vec![0.25, 0.5, 0.75, 1.0];
    let noise = InitialCondition::Noise {
        mean: [0.3, 0.2],
        amplitude: 1e-3,
        seed: SEED,
    };
    let spots_model = model([2.0, 1.0, 1.0], [6.0, 4.0, 8.0], 0.01, 1e3, m_diag);
    let spots_initial = InitialCondition::BumpProduct {
        base: [1.0 / 15.0, 1.0 / 30.0],
        amp: [2.0 / 15.0, 1.0 / 15.0],
        k: 2.0,
    };
    let mut out = vec![
        mesh_refinement_spec(),
        ExperimentSpec {
            name: "spots".into(),
            description: "spot morphology".into(),
            model: spots_model.clone(),
            coupling: Coupling::None,
            initial: spots_initial.clone(),
            desk: Scale {
                n: 64,
                dt: 1e-4,
                t_end: 2.0,
            },
            full: Scale {
                n: 128,
                dt: 1e-5,
                t_end: 20.0,
            },
            snapshot_fractions: quarters.clone(),
        },
        ExperimentSpec {
            name: "lamellae".into(),
            description: "lamellar morphology".into(),
            model: model([1.0, 1.0, 1.0], [6.0, 6.0, 8.0], 0.01, 1e4, m_diag),
            coupling: Coupling::None,
            initial: InitialCondition::BumpProduct {
                base: [3.0 / 16.0, 3.0 / 16.0],
                amp: [1.0 / 16.0, 1.0 / 16.0],
                k: 2.0,
            },
            desk: Scale {
                n: 64,
                dt: 1e-4,
                t_end: 1.0,
            },
            full: Scale {
                n: 128,
                dt: 1e-5,
                t_end: 20.0,
            },
            snapshot_fractions: quarters.clone(),
        },
        ExperimentSpec {
            name: "lamellae_spots".into(),
            description: "coexisting lamellae and spots".into(),
            model: model([1.0, 1.0, 1.0], [6.0, 6.0, 8.0], 0.01, 1e3, m_diag),
            coupling: Coupling::None,
            initial: InitialCondition::BumpProduct {
                base: [0.05, 0.05],
                amp: [0.1, 0.1],
                k: 2.0,
            },
            desk: Scale {
                n: 64,
                dt: 1e-4,
                t_end: 1.0,
            },
            full: Scale {
                n: 128,
                dt: 1e-5,
                t_end: 20.0,
            },
            snapshot_fractions: quarters.clone(),
        },
    ];
    for (i, m) in cross_coupling_mobilities().into_iter().enumerate() {
        out.push(ExperimentSpec {
            name: format!("mobility_m{}", i + 1),
            description: format!("cross-coupling in mobility, matrix M{}", i + 1),
            model: model([3.0, 2.0, 1.0], [4.0, 6.0, 8.0], 0.01, 1e4, m),
            coupling: Coupling::None,
            initial: InitialCondition::BumpProduct {
                base: [3.0 / 14.0, 1.0 / 7.0],
                amp: [3.0 / 35.0, 2.0 / 35.0],
                k: 2.0,
            },
            desk: Scale {
                n: 64,
                dt: 1e-4,
                t_end: 0.5,
            },
            full: Scale {
                n: 128,
                dt: 1e-5,
                t_end: 120.0,
            },
            snapshot_fractions: quarters.clone(),
        });
    }
    let field_model = |m| model([15.0, 10.0, 1.0], [1.0, 2.0, 4.0], 0.01, 1e5, m);
    for (i, m) in field_mobilities().into_iter().enumerate() {
        out.push(ExperimentSpec {
            name: format!("electric_{}", i + 1),
            description: format!("electric-field-driven patterns, mobility {}", i + 1),
            model: field_model(m),
            coupling: Coupling::Electric(ElectricParams::new(
                1.0,
                1.0,
                FieldSchedule::Constant { e0: [10.0, 20.0] },
            )),
            initial: noise.clone(),
            // the field term is explicit and adds diffusion of rate
            // ~ m eps1^2 |E0|^2 k^2, which caps dt near 1.5e-4 at 64^2
            desk: Scale {
                n: 64,
                dt: 1e-4,
                t_end: 1.0,
            },
            full: Scale {
                n: 128,
                dt: 1e-5,
                t_end: 200.0,
            },
            snapshot_fractions: quarters.clone(),
        });
    }
    for (i, m) in field_mobilities().into_iter().enumerate() {
        out.push(ExperimentSpec {
            name: format!("magnetic_{}", i + 1),
            description: format!("magnetic-field-driven patterns, mobility {}", i + 1),
            model: field_model(m),
            coupling: Coupling::Magnetic(MagneticParams {
                gamma_m: 1e-3,
                b0: [1.0, 0.0],
            }),
            initial: noise.clone(),
            desk: Scale {
                n: 64,
                dt: 1e-3,
                t_end: 10.0,
            },
            full: Scale {
                n: 128,
                dt: 1e-5,
                t_end: 100.0,
            },
            snapshot_fractions: quarters.clone(),
        });
    }
    out.push(ExperimentSpec {
        name: "hysteresis".into(),
        description: "ramped electric field applied to relaxed spots, then removed".into(),
        model: spots_model,
        coupling: Coupling::Electric(ElectricParams::new(1.0, 0.6, FieldSchedule::Hysteresis)),
        initial: InitialCondition::Relaxed {
            from: Box::new(spots_initial),
            time: 0.5,
            dt: 1e-4,
        },
        desk: Scale {
            n: 32,
            dt: 5e-4,
            t_end: 20.0,
        },
        full: Scale {
            n: 128,
            dt: 1e-5,
            t_end: 70.0,
        },
        snapshot_fractions: vec![0.125, 0.25, 0.375, 0.5, 1.0],
    });
    out
}

pub fn find_experiment(name: &str) -> Result<ExperimentSpec> {
    builtin_experiments()
        .into_iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::UnknownExperiment(name.to_string()))
}

/// Runs `sim` to `t_end`, returning the records.
pub fn run_to(sim: &mut Simulation, t_end: f64) -> Result<Vec<StepRecord>> {
    let n = step_count(t_end - sim.time(), sim.integrator.dt)?;
    let (records, err) = sim.run_steps(n);
    match err {
        Some(e) => Err(e),
        None => Ok(records),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefinementAxis {
    Time,
    Space,
}

impl std::str::FromStr for RefinementAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(RefinementAxis::Time),
            "space" => Ok(RefinementAxis::Space),
            other => Err(Error::param("axis", format!("expected time or space, got `{other}`"))),
        }
    }
}

/// One rung of a refinement ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementLevel {
    /// `dt` (time ladder) or `h` (space ladder).
    pub step: f64,
    /// Discrete L2 difference to the next finer rung, per species; absent
    /// on the finest rung.
    pub errors: Option<[f64; 3]>,
    /// Largest `|alpha|` over the three-level steps (zero for EQ).
    pub max_alpha: f64,
    /// `|alpha|` of the bootstrap step.
    pub bootstrap_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub axis: RefinementAxis,
    pub scheme: SchemeKind,
    pub levels: Vec<RefinementLevel>,
    /// `log2(e_k / e_{k+1})` between consecutive errors.
    pub observed_orders: Vec<f64>,
    /// Least-squares slope of `log e` against `log step`.
    pub fitted_slope: Option<f64>,
    /// Least-squares slope of `log max|alpha|` against `log step`.
    pub alpha_slope: Option<f64>,
}

impl RefinementReport {
    /// Combined error of rung `k` (all species).
    pub fn combined_errors(&self) -> Vec<(f64, f64)> {
        self.levels
            .iter()
            .filter_map(|l| {
                l.errors
                    .map(|e| (l.step, e.iter().map(|v| v * v).sum::<f64>().sqrt()))
            })
            .collect()
    }
}

/// Least-squares slope of `log y` against `log x`; `None` with fewer than
/// two usable points.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(sxy / sxx)
}

/// Settings of a refinement ladder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ladder {
    /// Grid size of the coarsest rung (space) or of every rung (time).
    pub n: usize,
    /// Coarsest step (time) or the fixed step (space).
    pub dt: f64,
    pub t_end: f64,
    pub levels: usize,
}

/// Runs the halving ladder along `axis` and compares adjacent rungs at
/// `t_end`: in time on the common grid, in space after restricting the
/// finer solution onto the coarser grid by 2x2 averaging.
pub fn refinement_study(
    spec: &ExperimentSpec,
    scheme: SchemeKind,
    axis: RefinementAxis,
    ladder: Ladder,
    options: StepOptions,
) -> Result<RefinementReport> {
    let mut finals: Vec<(f64, PhaseState, f64, f64)> = Vec::with_capacity(ladder.levels);
    for k in 0..ladder.levels {
        let (n, dt) = match axis {
            RefinementAxis::Time => (ladder.n, ladder.dt / f64::powi(2.0, k as i32)),
            RefinementAxis::Space => (ladder.n << k, ladder.dt),
        };
        let mut sim = spec.simulation(scheme, n, dt, options)?;
        let records = run_to(&mut sim, ladder.t_end)?;
        // the first step is the first-order two-level bootstrap, whose
        // supplementary variable scales one order lower
        let max_alpha = records.iter().skip(1).map(|r| r.alpha.abs()).fold(0.0, f64::max);
        let bootstrap_alpha = records.first().map_or(0.0, |r| r.alpha.abs());
        let step = match axis {
            RefinementAxis::Time => dt,
            RefinementAxis::Space => sim.state.grid().hx,
        };
        finals.push((step, sim.state, max_alpha, bootstrap_alpha));
    }
    let mut levels = Vec::with_capacity(finals.len());
    for k in 0..finals.len() {
        let errors = if k + 1 < finals.len() {
            let coarse = &finals[k].1;
            let fine = &finals[k + 1].1;
            let mut e = [0.0; 3];
            for (i, ei) in e.iter_mut().enumerate() {
                let f = match axis {
                    RefinementAxis::Time => fine.phi[i].clone(),
                    RefinementAxis::Space => restrict(&fine.phi[i])?,
                };
                *ei = norm_h(&(&coarse.phi[i] - &f));
            }
            Some(e)
        } else {
            None
        };
        levels.push(RefinementLevel {
            step: finals[k].0,
            errors,
            max_alpha: finals[k].2,
            bootstrap_alpha: finals[k].3,
        });
    }
    let mut report = RefinementReport {
        axis,
        scheme,
        levels,
        observed_orders: Vec::new(),
        fitted_slope: None,
        alpha_slope: None,
    };
    let combined = report.combined_errors();
    report.observed_orders = combined
        .windows(2)
        .map(|w| (w[0].1 / w[1].1).log2())
        .collect();
    report.fitted_slope = loglog_slope(&combined);
    if scheme.is_svm() {
        let alphas: Vec<(f64, f64)> = report.levels.iter().map(|l| (l.step, l.max_alpha)).collect();
        report.alpha_slope = loglog_slope(&alphas);
    }
    Ok(report)
}

/// Structure-tensor summary of `phi_A - phi_B`.
///
/// A proxy for visual morphology: `anisotropy = (l1 - l2) / (l1 + l2)`
/// from the eigenvalues of the mean gradient outer product, and the
/// direction of the dominant gradient in degrees in `[0, 180)`. Stripes
/// lie perpendicular to that direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub anisotropy: f64,
    /// `None` for a state without gradients.
    pub gradient_angle: Option<f64>,
}

pub fn structure_metrics(state: &PhaseState) -> StructureMetrics {
    let u = state.ab_difference();
    let (gx, gy) = grad_h(&u, BoundaryKind::NeumannZero);
    let n = u.values().len() as f64;
    let (mut jxx, mut jxy, mut jyy) = (0.0, 0.0, 0.0);
    for (&a, &b) in gx.values().iter().zip(gy.values()) {
        jxx += a * a;
        jxy += a * b;
        jyy += b * b;
    }
    let j = Matrix2::new(jxx, jxy, jxy, jyy) / n;
    let trace = j.trace();
    let scale = u.max_abs().max(1.0);
    if trace <= 1e-24 * scale * scale {
        return StructureMetrics {
            anisotropy: 0.0,
            gradient_angle: None,
        };
    }
    let eig = SymmetricEigen::new(j);
    let (imax, imin) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    let (l1, l2) = (eig.eigenvalues[imax], eig.eigenvalues[imin].max(0.0));
    let v = eig.eigenvectors.column(imax);
    let angle = v[1].atan2(v[0]).to_degrees().rem_euclid(180.0);
    StructureMetrics {
        anisotropy: ((l1 - l2) / (l1 + l2)).clamp(0.0, 1.0),
        gradient_angle: Some(if angle >= 180.0 - 1e-12 { 0.0 } else { angle }),
    }
}

/// Smallest distance between two axial directions (degrees, modulo 180).
pub fn axial_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

/// Energy trace of a hysteresis run split around the midpoint of the
/// symmetric field window `[0, window]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HysteresisTrace {
    pub times: Vec<f64>,
    /// Free energy (without the field term) after each step.
    pub free_energy: Vec<f64>,
    pub records: Vec<StepRecord>,
}

/// Relative L2 difference between the free-energy trace on
/// `[0, window / 2]` and the time-mirrored trace on `[window / 2, window]`,
/// both measured from the initial energy. Zero for a system without
/// memory driven by the symmetric field window.
pub fn hysteresis_asymmetry(trace: &HysteresisTrace, f0: f64, window: f64) -> Option<f64> {
    let dt = trace.times.first().copied()?;
    let half = step_count(window / 2.0, dt).ok()?;
    let full = step_count(window, dt).ok()?;
    if trace.free_energy.len() < full {
        return None;
    }
    // index k holds t = (k + 1) dt; pair t = s with t = window - s
    let at = |steps: usize| {
        if steps == 0 {
            f0
        } else {
            trace.free_energy[steps - 1]
        }
    };
    let (mut diff, mut norm) = (0.0, 0.0);
    for s in 0..=half {
        let up = at(s) - f0;
        let down = at(full - s) - f0;
        diff += (up - down) * (up - down);
        norm += up.abs().max(down.abs()).powi(2);
    }
    (norm > 0.0).then(|| (diff / norm).sqrt())
}

/// Runs the hysteresis protocol and records the free energy per step.
pub fn hysteresis_run(
    spec: &ExperimentSpec,
    scheme: SchemeKind,
    n: usize,
    dt: f64,
    t_end: f64,
    options: StepOptions,
) -> Result<(HysteresisTrace, f64)> {
    let mut sim = spec.simulation(scheme, n, dt, options)?;
    let f0 = sim.integrator.model.free_energy_h(&sim.state);
    let steps = step_count(t_end, dt)?;
    let mut trace = HysteresisTrace {
        times: Vec::with_capacity(steps),
        free_energy: Vec::with_capacity(steps),
        records: Vec::with_capacity(steps),
    };
    for _ in 0..steps {
        let r = sim.step()?;
        trace.times.push(r.t);
        trace
            .free_energy
            .push(sim.integrator.model.free_energy_h(&sim.state));
        trace.records.push(r);
    }
    Ok((trace, f0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hysteresis_branches() {
        assert_eq!(hysteresis_field(2.5), [5.0, 0.0]);
        assert_eq!(hysteresis_field(10.0), [10.0, 0.0]);
        assert_eq!(hysteresis_field(25.0), [0.0, 0.0]);
        for t in [5.0, 15.0, 20.0] {
            let l = hysteresis_field(t - 1e-12)[0];
            let r = hysteresis_field(t + 1e-12)[0];
            assert!((l - r).abs() < 1e-10);
        }
    }

    #[test]
    fn builtin_catalogue() {
        let all = builtin_experiments();
        let spots = all.iter().find(|e| e.name == "spots").unwrap();
        assert_eq!(spots.model.n, [2.0, 1.0, 1.0]);
        assert_eq!(spots.model.chi, [6.0, 4.0, 8.0]);
        assert_eq!((spots.model.eps, spots.model.gamma), (0.01, 1e3));
        match find_experiment("magnetic_1").unwrap().coupling {
            Coupling::Magnetic(m) => {
                assert_eq!(m.gamma_m, 1e-3);
                assert_eq!(m.b0, [1.0, 0.0]);
            }
            other => panic!("unexpected coupling {other:?}"),
        }
        assert!(matches!(find_experiment("nope"), Err(Error::UnknownExperiment(_))));
        let mut names: Vec<_> = all.iter().map(|e| e.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), all.len());
    }

    #[test]
    fn initial_data_on_simplex_with_exact_means() {
        for e in builtin_experiments() {
            if matches!(e.initial, InitialCondition::Relaxed { .. }) {
                continue;
            }
            let st = e.initial_state(16).unwrap();
            assert!(st.simplex_defect() < 1e-15, "{}", e.name);
            let m = st.means();
            let pb = e.initial.phibar();
            for i in 0..3 {
                assert!((m[i] - pb[i]).abs() < 1e-14, "{}: {m:?} vs {pb:?}", e.name);
            }
            e.params().unwrap();
        }
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let ic = InitialCondition::Noise {
            mean: [0.3, 0.2],
            amplitude: 1e-3,
            seed: 7,
        };
        let spec = mesh_refinement_spec().model;
        let g = Grid2D::unit_square(8).unwrap();
        let a = ic.build(g, &spec).unwrap();
        let b = ic.build(g, &spec).unwrap();
        let c = ic.with_seed(8).build(g, &spec).unwrap();
        assert_eq!(a.a().values(), b.a().values());
        assert_ne!(a.a().values(), c.a().values());
        assert!(a.a().values().iter().all(|v| (v - 0.3).abs() <= 2e-3));
    }

    #[test]
    fn slope_fit() {
        let pts: Vec<(f64, f64)> = (0..5).map(|k| {
            let h = 0.1 / f64::powi(2.0, k);
            (h, 3.0 * h * h)
        }).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&pts[..1]), None);
    }

    #[test]
    fn one_level_ladder_has_no_orders() {
        let spec = mesh_refinement_spec();
        let r = refinement_study(
            &spec,
            SchemeKind::Svm2,
            RefinementAxis::Time,
            Ladder {
                n: 8,
                dt: 0.05,
                t_end: 0.1,
                levels: 1,
            },
            StepOptions::default(),
        )
        .unwrap();
        assert!(r.observed_orders.is_empty());
        assert_eq!(r.fitted_slope, None);
        assert_eq!(r.levels.len(), 1);
    }

    fn stripe(g: Grid2D, f: impl Fn(f64, f64) -> f64) -> PhaseState {
        PhaseState::from_ab(
            ScalarField::from_fn(g, |x, y| 0.3 + 0.1 * f(x, y)),
            ScalarField::constant(g, 0.2),
        )
    }

    #[test]
    fn structure_of_uniform_and_stripes() {
        let g = Grid2D::unit_square(32).unwrap();
        let m = structure_metrics(&PhaseState::uniform(g, [0.3, 0.2, 0.5]));
        assert_eq!(m.anisotropy, 0.0);
        assert_eq!(m.gradient_angle, None);

        let m = structure_metrics(&stripe(g, |x, _| (2.0 * PI * x).cos()));
        assert!(m.anisotropy > 1.0 - 1e-12);
        assert!(axial_distance(m.gradient_angle.unwrap(), 0.0) < 1e-9);

        let m = structure_metrics(&stripe(g, |_, y| (2.0 * PI * y).cos()));
        assert!(axial_distance(m.gradient_angle.unwrap(), 90.0) < 1e-9);
    }

    #[test]
    fn structure_rotation_equivariance() {
        let g = Grid2D::unit_square(24).unwrap();
        let st = stripe(g, |x, y| (2.0 * PI * (x + 2.0 * y)).cos() + 0.3 * (PI * x * y).sin());
        let rot = |f: &ScalarField| {
            // quarter turn: (i, j) -> (n - 1 - j, i)
            let mut out = ScalarField::zeros(g);
            for j in 0..g.ny {
                for i in 0..g.nx {
                    out[(g.nx - 1 - j, i)] = f[(i, j)];
                }
            }
            out
        };
        let rotated = PhaseState::from_ab(rot(st.a()), rot(st.b()));
        let m0 = structure_metrics(&st);
        let m1 = structure_metrics(&rotated);
        assert!((m0.anisotropy - m1.anisotropy).abs() < 1e-12);
        let d = axial_distance(m1.gradient_angle.unwrap(), m0.gradient_angle.unwrap() + 90.0);
        assert!(d < 1e-9, "{m0:?} {m1:?}");
    }

    #[test]
    fn mirror_symmetric_trace_has_no_asymmetry() {
        let dt = 0.5;
        let times: Vec<f64> = (1..=8).map(|k| k as f64 * dt).collect();
        let f = |t: f64| -((t * (4.0 - t)).max(0.0));
        let trace = HysteresisTrace {
            free_energy: times.iter().map(|&t| f(t)).collect(),
            times,
            records: Vec::new(),
        };
        assert!(hysteresis_asymmetry(&trace, f(0.0), 4.0).unwrap() < 1e-14);
        let mut skew = trace.clone();
        skew.free_energy[5] += 1.0;
        assert!(hysteresis_asymmetry(&skew, f(0.0), 4.0).unwrap() > 0.05);
    }
}
