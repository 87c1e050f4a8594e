//! Fast solvers for the constant-coefficient systems.
//!
//! The zero-Neumann Laplacian is diagonal in the half-sample cosine basis
//! and the zero-Dirichlet Laplacian in the half-sample sine basis, both
//! on the cell-centered grid. Each coupled 3-species implicit system then
//! splits into one 3 x 3 solve per mode.

use std::sync::Arc;

use nalgebra::Matrix3;
use rustdct::{DctPlanner, TransformType2And3};

use crate::error::{Error, Result};
use crate::grid::{FieldTriple, Grid2D, ScalarField};
use crate::model::ModelParams;

type Plan = Arc<dyn TransformType2And3<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Basis {
    Cosine,
    Sine,
}

/// Orthonormal 1D forward scaling factor for mode `k` of length `n`.
fn scale(basis: Basis, k: usize, n: usize) -> f64 {
    let n_f = n as f64;
    match basis {
        Basis::Cosine if k == 0 => (1.0 / n_f).sqrt(),
        Basis::Sine if k + 1 == n => (1.0 / n_f).sqrt(),
        _ => (2.0 / n_f).sqrt(),
    }
}

/// Eigenvalue of the 1D second difference for mode `k`.
fn eigenvalue_1d(basis: Basis, k: usize, n: usize, h: f64) -> f64 {
    let kk = match basis {
        Basis::Cosine => k as f64,
        Basis::Sine => (k + 1) as f64,
    };
    let s = (kk * std::f64::consts::PI / (2.0 * n as f64)).sin();
    -4.0 / (h * h) * s * s
}

/// Separable 2D transform sharing the row/column plans.
#[derive(Clone)]
struct Separable {
    grid: Grid2D,
    basis: Basis,
    px: Plan,
    py: Plan,
    eigenvalues: Vec<f64>,
}

impl Separable {
    fn new(grid: Grid2D, basis: Basis) -> Self {
        let mut planner = DctPlanner::new();
        let px = planner.plan_dct2(grid.nx);
        let py = planner.plan_dct2(grid.ny);
        let mut eigenvalues = Vec::with_capacity(grid.len());
        for ky in 0..grid.ny {
            let ly = eigenvalue_1d(basis, ky, grid.ny, grid.hy);
            for kx in 0..grid.nx {
                eigenvalues.push(eigenvalue_1d(basis, kx, grid.nx, grid.hx) + ly);
            }
        }
        Self {
            grid,
            basis,
            px,
            py,
            eigenvalues,
        }
    }

    fn forward_1d(&self, plan: &Plan, buf: &mut [f64], scratch: &mut [f64]) {
        let n = buf.len();
        match self.basis {
            Basis::Cosine => plan.process_dct2_with_scratch(buf, scratch),
            Basis::Sine => plan.process_dst2_with_scratch(buf, scratch),
        }
        for (k, v) in buf.iter_mut().enumerate() {
            *v *= scale(self.basis, k, n);
        }
    }

    fn inverse_1d(&self, plan: &Plan, buf: &mut [f64], scratch: &mut [f64]) {
        let n = buf.len();
        for (k, v) in buf.iter_mut().enumerate() {
            *v *= scale(self.basis, k, n);
        }
        // the type-III transforms weight the boundary term by one half
        match self.basis {
            Basis::Cosine => {
                buf[0] *= 2.0;
                plan.process_dct3_with_scratch(buf, scratch);
            }
            Basis::Sine => {
                buf[n - 1] *= 2.0;
                plan.process_dst3_with_scratch(buf, scratch);
            }
        }
    }

    fn run(&self, data: &mut [f64], forward: bool) {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut scratch =
            vec![0.0; self.px.get_scratch_len().max(self.py.get_scratch_len())];
        for row in data.chunks_exact_mut(nx) {
            if forward {
                self.forward_1d(&self.px, row, &mut scratch);
            } else {
                self.inverse_1d(&self.px, row, &mut scratch);
            }
        }
        let mut col = vec![0.0; ny];
        for i in 0..nx {
            for j in 0..ny {
                col[j] = data[j * nx + i];
            }
            if forward {
                self.forward_1d(&self.py, &mut col, &mut scratch);
            } else {
                self.inverse_1d(&self.py, &mut col, &mut scratch);
            }
            for j in 0..ny {
                data[j * nx + i] = col[j];
            }
        }
    }

    fn forward(&self, f: &ScalarField) -> Vec<f64> {
        assert!(*f.grid() == self.grid, "grid mismatch with transform plan");
        let mut data = f.values().to_vec();
        self.run(&mut data, true);
        data
    }

    fn inverse(&self, coeffs: &[f64]) -> ScalarField {
        assert_eq!(coeffs.len(), self.grid.len(), "coefficient count mismatch");
        let mut data = coeffs.to_vec();
        self.run(&mut data, false);
        ScalarField::from_vec(self.grid, data).expect("length checked")
    }
}

/// Orthonormal cell-centered cosine transform; diagonalizes the
/// zero-Neumann `laplacian_h`. Coefficients are stored like fields, mode
/// `(kx, ky)` at `ky * nx + kx`.
#[derive(Clone)]
pub struct CosineBasisPlan {
    inner: Separable,
}

impl std::fmt::Debug for CosineBasisPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CosineBasisPlan")
            .field("grid", &self.inner.grid)
            .finish()
    }
}

impl CosineBasisPlan {
    pub fn new(grid: Grid2D) -> Self {
        Self {
            inner: Separable::new(grid, Basis::Cosine),
        }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.inner.grid
    }

    /// `lambda[ky * nx + kx]`; `lambda[0] == 0`, all others negative.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.inner.eigenvalues
    }

    pub fn dct_forward(&self, f: &ScalarField) -> Vec<f64> {
        self.inner.forward(f)
    }

    pub fn dct_inverse(&self, coeffs: &[f64]) -> ScalarField {
        self.inner.inverse(coeffs)
    }

    /// Zero-mean solution of `laplacian_h(u) = f - mean(f)`.
    pub fn pseudo_inverse_laplacian(&self, f: &ScalarField) -> ScalarField {
        let mut c = self.dct_forward(f);
        c[0] = 0.0;
        for (v, &l) in c.iter_mut().zip(self.eigenvalues()).skip(1) {
            *v /= l;
        }
        self.dct_inverse(&c)
    }
}

/// Orthonormal cell-centered sine transform; diagonalizes `laplacian_h`
/// with homogeneous Dirichlet ghosts.
#[derive(Clone)]
pub struct SineBasisPlan {
    inner: Separable,
}

impl std::fmt::Debug for SineBasisPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SineBasisPlan")
            .field("grid", &self.inner.grid)
            .finish()
    }
}

impl SineBasisPlan {
    pub fn new(grid: Grid2D) -> Self {
        Self {
            inner: Separable::new(grid, Basis::Sine),
        }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.inner.grid
    }

    /// All strictly negative.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.inner.eigenvalues
    }

    pub fn dst_forward(&self, f: &ScalarField) -> Vec<f64> {
        self.inner.forward(f)
    }

    pub fn dst_inverse(&self, coeffs: &[f64]) -> ScalarField {
        self.inner.inverse(coeffs)
    }

    /// Solves `laplacian_h(u) = rhs` with ghosts `2c - interior`.
    pub fn solve_dirichlet(&self, rhs: &ScalarField, boundary_value: f64) -> ScalarField {
        // u - c has homogeneous Dirichlet ghosts and the same Laplacian
        let mut c = self.dst_forward(rhs);
        for (v, &l) in c.iter_mut().zip(self.eigenvalues()) {
            *v /= l;
        }
        let mut u = self.dst_inverse(&c);
        if boundary_value != 0.0 {
            for v in u.values_mut() {
                *v += boundary_value;
            }
        }
        u
    }
}

/// Per-mode symbol of the linear part of the chemical potential,
/// `L(lambda)_ij = -gamma_i lambda delta_ij + chi_ij - alpha_ij / lambda`,
/// with the nonlocal term absent for the constant mode.
pub fn linear_symbol(params: &ModelParams, lambda: f64) -> Matrix3<f64> {
    let mut l = params.chi;
    for i in 0..3 {
        l[(i, i)] -= params.gamma_i[i] * lambda;
    }
    if lambda != 0.0 {
        l -= params.alpha / lambda;
    }
    l
}

/// Per-mode inverses of `I - theta * lambda * m_eff * (L(lambda) + extra)`.
///
/// With `theta = dt / 2` and `extra = 0` this is the implicit operator of the
/// Crank-Nicolson correction. A constant `extra` lets the same plan serve as
/// a preconditioner for systems whose linear part is only approximately
/// constant. The constant mode block is the identity.
#[derive(Debug, Clone)]
pub struct BlockHelmholtzPlan {
    basis: CosineBasisPlan,
    theta: f64,
    blocks: Vec<Matrix3<f64>>,
    inverses: Vec<Matrix3<f64>>,
}

impl BlockHelmholtzPlan {
    pub fn new(
        basis: &CosineBasisPlan,
        params: &ModelParams,
        theta: f64,
        extra: Matrix3<f64>,
    ) -> Result<Self> {
        let grid = *basis.grid();
        let mut blocks = Vec::with_capacity(grid.len());
        let mut inverses = Vec::with_capacity(grid.len());
        for (k, &lambda) in basis.eigenvalues().iter().enumerate() {
            let block = if lambda == 0.0 || theta == 0.0 {
                Matrix3::identity()
            } else {
                let sym = linear_symbol(params, lambda) + extra;
                Matrix3::identity() - params.m_eff * sym * (theta * lambda)
            };
            let scale = block.abs().max().powi(3);
            let det = block.determinant();
            let inv = if det.abs() <= 1e-13 * scale {
                None
            } else {
                block.try_inverse()
            };
            match inv {
                Some(inv) => inverses.push(inv),
                None => {
                    return Err(Error::SingularMode {
                        kx: k % grid.nx,
                        ky: k / grid.nx,
                    })
                }
            }
            blocks.push(block);
        }
        Ok(Self {
            basis: basis.clone(),
            theta,
            blocks,
            inverses,
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn basis(&self) -> &CosineBasisPlan {
        &self.basis
    }

    pub fn block(&self, kx: usize, ky: usize) -> &Matrix3<f64> {
        &self.blocks[self.basis.grid().idx(kx, ky)]
    }

    fn per_mode(&self, x: &FieldTriple, mats: &[Matrix3<f64>]) -> FieldTriple {
        let c: [Vec<f64>; 3] = std::array::from_fn(|s| self.basis.dct_forward(&x[s]));
        let mut out: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; c[0].len()]);
        for (k, m) in mats.iter().enumerate() {
            let v = m * nalgebra::Vector3::new(c[0][k], c[1][k], c[2][k]);
            out[0][k] = v[0];
            out[1][k] = v[1];
            out[2][k] = v[2];
        }
        std::array::from_fn(|s| self.basis.dct_inverse(&out[s]))
    }

    /// `solve_block_helmholtz`: exact solution of the implicit system.
    pub fn solve(&self, rhs: &FieldTriple) -> FieldTriple {
        self.per_mode(rhs, &self.inverses)
    }

    /// Applies the operator itself.
    pub fn apply(&self, x: &FieldTriple) -> FieldTriple {
        self.per_mode(x, &self.blocks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrylovConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KrylovConfig {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrylovResult {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// Final `||b - A x|| / ||b||`.
    pub residual: f64,
    pub converged: bool,
}

impl KrylovResult {
    pub fn into_result(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::KrylovStalled {
                iterations: self.iterations,
                residual: self.residual,
            })
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Right-preconditioned BiCGSTAB for `A x = b`.
///
/// `precond` approximates `A^{-1}`. Reductions are sequential so repeated
/// calls with the same inputs are bitwise identical.
pub fn bicgstab(
    mut apply: impl FnMut(&[f64]) -> Vec<f64>,
    mut precond: impl FnMut(&[f64]) -> Vec<f64>,
    b: &[f64],
    x0: Option<&[f64]>,
    cfg: &KrylovConfig,
) -> KrylovResult {
    let n = b.len();
    let b_norm = norm(b);
    let mut x = match x0 {
        Some(x0) => {
            assert_eq!(x0.len(), n, "initial guess has wrong length");
            x0.to_vec()
        }
        None => vec![0.0; n],
    };
    if b_norm == 0.0 {
        return KrylovResult {
            solution: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
    }
    let mut r: Vec<f64> = if x0.is_some() {
        let ax = apply(&x);
        b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect()
    } else {
        b.to_vec()
    };
    let mut res = norm(&r) / b_norm;
    if res <= cfg.tol {
        return KrylovResult {
            solution: x,
            iterations: 0,
            residual: res,
            converged: true,
        };
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    for it in 1..=cfg.max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || !rho_new.is_finite() {
            return KrylovResult {
                solution: x,
                iterations: it - 1,
                residual: res,
                converged: false,
            };
        }
        let beta = (rho_new / rho) * (alpha / omega);
        for k in 0..n {
            p[k] = r[k] + beta * (p[k] - omega * v[k]);
        }
        let p_hat = precond(&p);
        v = apply(&p_hat);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 {
            return KrylovResult {
                solution: x,
                iterations: it,
                residual: res,
                converged: false,
            };
        }
        alpha = rho_new / rv;
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        let s_res = norm(&s) / b_norm;
        if s_res <= cfg.tol {
            for k in 0..n {
                x[k] += alpha * p_hat[k];
            }
            return KrylovResult {
                solution: x,
                iterations: it,
                residual: s_res,
                converged: true,
            };
        }
        let s_hat = precond(&s);
        let t = apply(&s_hat);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for k in 0..n {
            x[k] += alpha * p_hat[k] + omega * s_hat[k];
            r[k] = s[k] - omega * t[k];
        }
        res = norm(&r) / b_norm;
        rho = rho_new;
        if res <= cfg.tol {
            return KrylovResult {
                solution: x,
                iterations: it,
                residual: res,
                converged: true,
            };
        }
        if omega == 0.0 {
            return KrylovResult {
                solution: x,
                iterations: it,
                residual: res,
                converged: false,
            };
        }
    }
    KrylovResult {
        solution: x,
        iterations: cfg.max_iter,
        residual: res,
        converged: false,
    }
}
