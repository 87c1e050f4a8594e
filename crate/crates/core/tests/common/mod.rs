//! Dense brute-force oracles and finite-difference gradient checks shared by
//! the acceptance target and the regular integration tests.
//!
//! Every operator here is assembled entry by entry from the stencils and
//! ghost rules, without the library's transforms or matrix-free kernels.

#![allow(dead_code)]

use copolymer::fields::{
    electric_energy, electric_mu, magnetic_energy, magnetic_mu, order_parameter,
    solve_electric_potential, ElectricParams, FieldSchedule, MagneticParams,
};
use copolymer::grid::{inner_h, FieldTriple, Grid2D, ScalarField};
use copolymer::harness::mesh_refinement_spec;
use copolymer::integrators::{Integrator, StepOptions};
use copolymer::model::{Model, ModelParams, PhaseState};
use copolymer::spectral::{BlockHelmholtzPlan, CosineBasisPlan, KrylovConfig, SineBasisPlan};
use copolymer::fields::Coupling;
use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq)]
pub enum Ghost {
    Neumann,
    /// Homogeneous Dirichlet data on the wall.
    Dirichlet,
}

fn neighbours(g: &Grid2D, i: usize, j: usize) -> [(Option<usize>, f64); 4] {
    let (hx2, hy2) = (1.0 / (g.hx * g.hx), 1.0 / (g.hy * g.hy));
    [
        ((i > 0).then(|| g.idx(i - 1, j)), hx2),
        ((i + 1 < g.nx).then(|| g.idx(i + 1, j)), hx2),
        ((j > 0).then(|| g.idx(i, j - 1)), hy2),
        ((j + 1 < g.ny).then(|| g.idx(i, j + 1)), hy2),
    ]
}

/// Five-point Laplacian; a missing neighbour is the ghost value.
pub fn dense_laplacian(g: &Grid2D, ghost: Ghost) -> DMatrix<f64> {
    let n = g.len();
    let mut a = DMatrix::zeros(n, n);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.idx(i, j);
            for (nb, w) in neighbours(g, i, j) {
                a[(k, k)] -= w;
                match (nb, ghost) {
                    (Some(m), _) => a[(k, m)] += w,
                    (None, Ghost::Neumann) => a[(k, k)] += w,
                    (None, Ghost::Dirichlet) => a[(k, k)] -= w,
                }
            }
        }
    }
    a
}

/// Central first difference along x (`axis = 0`) or y.
pub fn dense_gradient(g: &Grid2D, axis: usize, ghost: Ghost) -> DMatrix<f64> {
    let n = g.len();
    let mut d = DMatrix::zeros(n, n);
    let sign = match ghost {
        Ghost::Neumann => 1.0,
        Ghost::Dirichlet => -1.0,
    };
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.idx(i, j);
            let (h, lo, hi) = if axis == 0 {
                (g.hx, (i > 0).then(|| g.idx(i - 1, j)), (i + 1 < g.nx).then(|| g.idx(i + 1, j)))
            } else {
                (g.hy, (j > 0).then(|| g.idx(i, j - 1)), (j + 1 < g.ny).then(|| g.idx(i, j + 1)))
            };
            let w = 1.0 / (2.0 * h);
            match hi {
                Some(m) => d[(k, m)] += w,
                None => d[(k, k)] += sign * w,
            }
            match lo {
                Some(m) => d[(k, m)] -= w,
                None => d[(k, k)] -= sign * w,
            }
        }
    }
    d
}

pub fn to_vec(f: &ScalarField) -> DVector<f64> {
    DVector::from_column_slice(f.values())
}

pub fn stack(t: &FieldTriple) -> DVector<f64> {
    let n = t[0].values().len();
    DVector::from_fn(3 * n, |r, _| t[r / n].values()[r % n])
}

pub fn rel_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Moore-Penrose inverse of the Neumann Laplacian: the zero-mean solution
/// of `lap psi = f - mean(f)`.
pub fn dense_pseudo_inverse(lap: &DMatrix<f64>) -> DMatrix<f64> {
    lap.clone().pseudo_inverse(1e-9).expect("svd converges")
}

/// The 3N x 3N matrix of the linear chemical-potential operator
/// `-gamma_i lap + chi - alpha lap^+`.
pub fn dense_linear_operator(p: &ModelParams, lap: &DMatrix<f64>, lap_pinv: &DMatrix<f64>) -> DMatrix<f64> {
    let n = lap.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let mut l = DMatrix::zeros(3 * n, 3 * n);
    for i in 0..3 {
        for j in 0..3 {
            let mut blk = &id * p.chi[(i, j)] - lap_pinv * p.alpha[(i, j)];
            if i == j {
                blk -= lap * p.gamma_i[i];
            }
            l.view_mut((i * n, j * n), (n, n)).copy_from(&blk);
        }
    }
    l
}

/// `m_eff (x) lap`: species mixing by the effective mobility, then the
/// Neumann Laplacian.
pub fn dense_mobility_laplacian(m: &Matrix3<f64>, lap: &DMatrix<f64>) -> DMatrix<f64> {
    let n = lap.nrows();
    let mut out = DMatrix::zeros(3 * n, 3 * n);
    for i in 0..3 {
        for j in 0..3 {
            out.view_mut((i * n, j * n), (n, n)).copy_from(&(lap * m[(i, j)]));
        }
    }
    out
}

pub fn oracle_params(g: &Grid2D) -> ModelParams {
    let spec = mesh_refinement_spec();
    let st = spec.initial.build(*g, &spec.model).unwrap();
    spec.model.params(st.means()).unwrap()
}

/// Smooth random field `base + amp * sum of low cosine modes`.
pub fn smooth_random(g: Grid2D, base: f64, amp: f64, rng: &mut ChaCha8Rng) -> ScalarField {
    let c: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..3.0f64).floor(),
                rng.random_range(0.0..3.0f64).floor(),
            )
        })
        .collect();
    let pi = std::f64::consts::PI;
    ScalarField::from_fn(g, |x, y| {
        base + amp * 0.25
            * c
                .iter()
                .map(|&(a, kx, ky)| a * (kx * pi * x).cos() * (ky * pi * y).cos())
                .sum::<f64>()
    })
}

pub fn random_state(g: Grid2D, seed: u64) -> PhaseState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = smooth_random(g, 0.3, 0.15, &mut rng);
    let b = smooth_random(g, 0.2, 0.1, &mut rng);
    PhaseState::from_ab(a, b)
}

/// Relative error of `solve_block_helmholtz` against a dense LU solve.
pub fn block_helmholtz_error(seed: u64) -> f64 {
    let g = Grid2D::unit_square(8).unwrap();
    let p = oracle_params(&g);
    let basis = CosineBasisPlan::new(g);
    let theta = 0.5 * 0.05;
    let plan = BlockHelmholtzPlan::new(&basis, &p, theta, Matrix3::zeros()).unwrap();
    let lap = dense_laplacian(&g, Ghost::Neumann);
    let l = dense_linear_operator(&p, &lap, &dense_pseudo_inverse(&lap));
    let a = DMatrix::identity(3 * g.len(), 3 * g.len())
        - dense_mobility_laplacian(&p.m_eff, &lap) * &l * theta;
    let rhs = random_state(g, seed).phi;
    let x = plan.solve(&rhs);
    let dense = a.lu().solve(&stack(&rhs)).expect("nonsingular");
    rel_diff(&stack(&x), &dense)
}

/// Relative error of `solve_psi` against the dense pseudo-inverse.
pub fn solve_psi_error(seed: u64) -> f64 {
    let g = Grid2D::unit_square(8).unwrap();
    let model = Model::new(oracle_params(&g), g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = smooth_random(g, 0.3, 0.2, &mut rng);
    let mean = phi.values().iter().sum::<f64>() / g.len() as f64;
    let psi = model.solve_psi(&phi, mean).unwrap();
    let lap = dense_laplacian(&g, Ghost::Neumann);
    let dense = dense_pseudo_inverse(&lap) * to_vec(&phi);
    rel_diff(&to_vec(&psi), &dense)
}

/// Relative error of one EQ step against the dense linear system it
/// solves, assembled from the quadratization weights at the extrapolated
/// state.
pub fn eq_system_error(seed: u64) -> f64 {
    let g = Grid2D::unit_square(8).unwrap();
    let p = oracle_params(&g);
    let dt = 0.05;
    let options = StepOptions {
        krylov: KrylovConfig {
            tol: 1e-14,
            max_iter: 500,
        },
        ..StepOptions::default()
    };
    let integ = Integrator::new(Model::new(p.clone(), g), Coupling::None, dt, options).unwrap();
    let prev = random_state(g, seed);
    let curr = random_state(g, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let q = smooth_random(g, 1.2, 0.1, &mut rng);
    let out = integ.eq_step(Some(&prev), &curr, &q, 0.0, None).unwrap();

    let n = g.len();
    let lap = dense_laplacian(&g, Ghost::Neumann);
    let l = dense_linear_operator(&p, &lap, &dense_pseudo_inverse(&lap));
    let md = dense_mobility_laplacian(&p.m_eff, &lap);
    // w = f'(phi_bar) / (2 sqrt(f(phi_bar) + C)) as a 3N x N block column
    let mut w = DMatrix::zeros(3 * n, n);
    for k in 0..n {
        let bar: [f64; 3] =
            std::array::from_fn(|i| 1.5 * curr.phi[i].values()[k] - 0.5 * prev.phi[i].values()[k]);
        let q_bar = (p.bulk(bar) + p.eq_c).sqrt();
        let d = p.bulk_derivative(bar);
        for i in 0..3 {
            w[(i * n + k, k)] = d[i] / (2.0 * q_bar);
        }
    }
    let id = DMatrix::<f64>::identity(3 * n, 3 * n);
    let ww = &w * w.transpose();
    let a = &id - &md * &l * (0.5 * dt) - &md * &ww * dt;
    let phi_n = stack(&curr.phi);
    let explicit = &w * (to_vec(&q) * 2.0) - &ww * &phi_n;
    let rhs = &phi_n + &md * &l * &phi_n * (0.5 * dt) + &md * explicit * dt;
    let dense = a.lu().solve(&rhs).expect("nonsingular");
    rel_diff(&stack(&out.next.phi), &dense)
}

/// Electric Poisson oracle: dense solve of the discrete Gauss law, compared
/// with the library solver; also returns the library residual evaluated at
/// the dense solution, relative to the source.
pub fn electric_poisson_errors(seed: u64) -> (f64, f64) {
    let g = Grid2D::unit_square(8).unwrap();
    let ep = ElectricParams {
        picard_tol: 1e-13,
        ..ElectricParams::new(1.0, 0.6, FieldSchedule::Constant { e0: [10.0, 20.0] })
    };
    let st = random_state(g, seed);
    let dbar = 0.1;
    let u = order_parameter(st.a(), st.b(), dbar);
    let lap = dense_laplacian(&g, Ghost::Dirichlet);
    let gx = dense_gradient(&g, 0, Ghost::Dirichlet);
    let gy = dense_gradient(&g, 1, Ghost::Dirichlet);
    let uv = to_vec(&u);
    let ux = dense_gradient(&g, 0, Ghost::Neumann) * &uv;
    let uy = dense_gradient(&g, 1, Ghost::Neumann) * &uv;
    let eps = uv.map(|v| ep.eps0 + ep.eps1 * v);
    let n = g.len();
    let mut a = DMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            a[(r, c)] = eps[r] * lap[(r, c)] + ep.eps1 * (ux[r] * gx[(r, c)] + uy[r] * gy[(r, c)]);
        }
    }
    let source = (&ux * 10.0 + &uy * 20.0) * ep.eps1;
    let dense = a.lu().solve(&source).expect("nonsingular");
    let plan = SineBasisPlan::new(g);
    let sol = solve_electric_potential(&u, &ep, 0.0, None, &plan).unwrap();
    let err = rel_diff(&to_vec(&sol.potential), &dense);
    let dense_field = ScalarField::from_vec(g, dense.as_slice().to_vec()).unwrap();
    let res = copolymer::fields::electric_residual(&dense_field, &u, &ep, 0.0);
    (err, to_vec(&res).norm() / source.norm())
}

/// Which functional a gradient check differentiates.
#[derive(Clone, Copy, Debug)]
pub enum GradientCase {
    /// Free energy against `chemical_potentials`.
    Free,
    /// Free energy plus magnetic energy against the potentials plus
    /// `magnetic_mu`.
    Magnetic,
    /// Free energy minus the electric energy at a frozen potential against
    /// the potentials plus `electric_mu`.
    Electric,
}

/// Central-difference errors `|dF(s) - (mu, v)|` for `s = s0 / 2^k`,
/// `k = 0..levels`, along a random smooth mean-free direction.
pub fn gradient_errors(case: GradientCase, seed: u64, s0: f64, levels: usize) -> Vec<(f64, f64)> {
    let g = Grid2D::unit_square(16).unwrap();
    let st = random_state(g, seed);
    let model = Model::new(oracle_params(&g), g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let v: FieldTriple = std::array::from_fn(|_| {
        let f = smooth_random(g, 0.0, 1.0, &mut rng);
        let m = f.values().iter().sum::<f64>() / g.len() as f64;
        f.map(|x| x - m)
    });
    let dbar = 0.1;
    let mp = MagneticParams {
        gamma_m: 0.05,
        b0: [1.0, 0.7],
    };
    let ep = ElectricParams::new(1.0, 0.6, FieldSchedule::Constant { e0: [10.0, 20.0] });
    // frozen potential: any fixed smooth field with the wall value
    let frozen = {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 11);
        let f = smooth_random(g, 0.0, 0.3, &mut r);
        ScalarField::from_fn(g, |x, y| x * (1.0 - x) * y * (1.0 - y)).zip_map(&f, |a, b| a * (1.0 + b))
    };
    let energy = |s: &PhaseState| -> f64 {
        let u = order_parameter(s.a(), s.b(), dbar);
        model.free_energy_h(s)
            + match case {
                GradientCase::Free => 0.0,
                GradientCase::Magnetic => magnetic_energy(&u, &mp),
                GradientCase::Electric => -electric_energy(&u, &frozen, &ep, 0.0),
            }
    };
    let mut mu = model.chemical_potentials(&st);
    let cmu = match case {
        GradientCase::Free => None,
        GradientCase::Magnetic => Some(magnetic_mu(&order_parameter(st.a(), st.b(), dbar), &mp)),
        GradientCase::Electric => Some(electric_mu(&frozen, &ep, 0.0)),
    };
    if let Some(c) = cmu {
        mu[0].axpy(1.0, &c);
        mu[1].axpy(-1.0, &c);
    }
    let analytic: f64 = (0..3).map(|i| inner_h(&mu[i], &v[i])).sum();
    let shifted = |s: f64| PhaseState {
        phi: std::array::from_fn(|i| {
            let mut f = st.phi[i].clone();
            f.axpy(s, &v[i]);
            f
        }),
    };
    (0..levels)
        .map(|k| {
            let s = s0 / f64::powi(2.0, k as i32);
            let fd = (energy(&shifted(s)) - energy(&shifted(-s))) / (2.0 * s);
            (s, (fd - analytic).abs())
        })
        .collect()
}

/// Successive Richardson slopes `log2(e(s) / e(s/2))`.
pub fn richardson_slopes(errors: &[(f64, f64)]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0].1 / w[1].1).log2()).collect()
}
