//! Cell-centered uniform grid, scalar fields and the finite-difference
//! operators everything else is assembled from.
//!
//! Values are stored row-major by `y` then `x`: cell `(i, j)` lives at
//! `j * nx + i`. Indices are zero based, so the center of cell `(i, j)` is
//! `((i + 1/2) hx, (j + 1/2) hy)`.
//!
//! Boundary conditions are realised with one layer of ghost cells:
//! zero-Neumann mirrors the adjacent interior value, a constant Dirichlet
//! value `c` reflects through the wall as `2c - interior`.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub hx: f64,
    pub hy: f64,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidGrid(format!(
                "cell counts must be positive, got {nx} x {ny}"
            )));
        }
        if !(lx.is_finite() && lx > 0.0 && ly.is_finite() && ly > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "domain lengths must be positive, got {lx} x {ly}"
            )));
        }
        Ok(Self {
            nx,
            ny,
            lx,
            ly,
            hx: lx / nx as f64,
            hy: ly / ny as f64,
        })
    }

    /// `n x n` cells on the unit square.
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(n, n, 1.0, 1.0)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.hx, (j as f64 + 0.5) * self.hy)
    }

    pub fn cell_area(&self) -> f64 {
        self.hx * self.hy
    }

    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    /// Grid with half the cells in each direction over the same domain.
    pub fn coarsened(&self) -> Result<Self> {
        if self.nx % 2 != 0 || self.ny % 2 != 0 {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen a {} x {} grid",
                self.nx, self.ny
            )));
        }
        Self::new(self.nx / 2, self.ny / 2, self.lx, self.ly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryKind {
    NeumannZero,
    DirichletConstant(f64),
}

impl BoundaryKind {
    #[inline]
    fn ghost(self, interior: f64) -> f64 {
        match self {
            BoundaryKind::NeumannZero => interior,
            BoundaryKind::DirichletConstant(c) => 2.0 * c - interior,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// One real value per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid2D,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid2D) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid2D, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    /// Samples `f(x, y)` at every cell center.
    pub fn from_fn(grid: Grid2D, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.center(i, j);
                values.push(f(x, y));
            }
        }
        Self { grid, values }
    }

    pub fn from_vec(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        assert_same_grid(self, other);
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &Self) {
        assert_same_grid(self, x);
        for (v, &xv) in self.values.iter_mut().zip(&x.values) {
            *v += a * xv;
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Value at `(i, j)` where out-of-range indices are resolved with the
    /// ghost rule of `bc` (applied per axis, so corners reflect twice).
    #[inline]
    fn sample(&self, i: isize, j: isize, bc: BoundaryKind) -> f64 {
        let nx = self.grid.nx as isize;
        let ny = self.grid.ny as isize;
        if i < 0 {
            return bc.ghost(self.sample(-1 - i, j, bc));
        }
        if i >= nx {
            return bc.ghost(self.sample(2 * nx - 1 - i, j, bc));
        }
        if j < 0 {
            return bc.ghost(self.sample(i, -1 - j, bc));
        }
        if j >= ny {
            return bc.ghost(self.sample(i, 2 * ny - 1 - j, bc));
        }
        self.values[(j * nx + i) as usize]
    }
}

impl Index<(usize, usize)> for ScalarField {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.values[self.grid.idx(i, j)]
    }
}

impl IndexMut<(usize, usize)> for ScalarField {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        let k = self.grid.idx(i, j);
        &mut self.values[k]
    }
}

impl Add for &ScalarField {
    type Output = ScalarField;
    fn add(self, rhs: &ScalarField) -> ScalarField {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl Sub for &ScalarField {
    type Output = ScalarField;
    fn sub(self, rhs: &ScalarField) -> ScalarField {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Mul<f64> for &ScalarField {
    type Output = ScalarField;
    fn mul(self, rhs: f64) -> ScalarField {
        self.scaled(rhs)
    }
}

impl Neg for &ScalarField {
    type Output = ScalarField;
    fn neg(self) -> ScalarField {
        self.map(|v| -v)
    }
}

impl AddAssign<&ScalarField> for ScalarField {
    fn add_assign(&mut self, rhs: &ScalarField) {
        self.axpy(1.0, rhs);
    }
}

impl SubAssign<&ScalarField> for ScalarField {
    fn sub_assign(&mut self, rhs: &ScalarField) {
        self.axpy(-1.0, rhs);
    }
}

/// One field per species, ordered A, B, S.
pub type FieldTriple = [ScalarField; 3];

/// Concatenates the three species into one flat vector (A, then B, then S).
pub fn flatten(t: &FieldTriple) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * t[0].grid.len());
    for f in t {
        out.extend_from_slice(&f.values);
    }
    out
}

/// Inverse of [`flatten`].
pub fn unflatten(grid: Grid2D, v: &[f64]) -> FieldTriple {
    let n = grid.len();
    assert_eq!(v.len(), 3 * n, "flat vector has wrong length");
    std::array::from_fn(|s| ScalarField {
        grid,
        values: v[s * n..(s + 1) * n].to_vec(),
    })
}

#[track_caller]
pub(crate) fn assert_same_grid(f: &ScalarField, g: &ScalarField) {
    assert!(
        f.grid == g.grid,
        "grid mismatch: {}x{} on {}x{} vs {}x{} on {}x{}",
        f.grid.nx,
        f.grid.ny,
        f.grid.lx,
        f.grid.ly,
        g.grid.nx,
        g.grid.ny,
        g.grid.lx,
        g.grid.ly
    );
}

/// Second difference along one axis, `d_x D_x f` or `d_y D_y f`.
pub fn second_difference(f: &ScalarField, axis: Axis, bc: BoundaryKind) -> ScalarField {
    let g = f.grid;
    let mut out = ScalarField::zeros(g);
    let (di, dj, h) = match axis {
        Axis::X => (1isize, 0isize, g.hx),
        Axis::Y => (0, 1, g.hy),
    };
    let inv_h2 = 1.0 / (h * h);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let (ii, jj) = (i as isize, j as isize);
            let c = f.values[g.idx(i, j)];
            let lo = f.sample(ii - di, jj - dj, bc);
            let hi = f.sample(ii + di, jj + dj, bc);
            out.values[g.idx(i, j)] = (lo - 2.0 * c + hi) * inv_h2;
        }
    }
    out
}

/// Five-point Laplacian `(d_x D_x + d_y D_y) f` with ghost cells from `bc`.
pub fn laplacian_h(f: &ScalarField, bc: BoundaryKind) -> ScalarField {
    let g = f.grid;
    let (nx, ny) = (g.nx, g.ny);
    let ax = 1.0 / (g.hx * g.hx);
    let ay = 1.0 / (g.hy * g.hy);
    let v = &f.values;
    let mut out = vec![0.0; g.len()];
    for j in 0..ny {
        for i in 0..nx {
            let k = j * nx + i;
            let c = v[k];
            let w = if i > 0 { v[k - 1] } else { bc.ghost(c) };
            let e = if i + 1 < nx { v[k + 1] } else { bc.ghost(c) };
            let s = if j > 0 { v[k - nx] } else { bc.ghost(c) };
            let n = if j + 1 < ny { v[k + nx] } else { bc.ghost(c) };
            out[k] = (w - 2.0 * c + e) * ax + (s - 2.0 * c + n) * ay;
        }
    }
    ScalarField {
        grid: g,
        values: out,
    }
}

/// Cell-centered first difference `d_x A_x f` (or `d_y A_y f`): the
/// central difference `(f[i+1] - f[i-1]) / 2h` with ghosts from `bc`.
pub fn central_difference(f: &ScalarField, axis: Axis, bc: BoundaryKind) -> ScalarField {
    let g = f.grid;
    let mut out = ScalarField::zeros(g);
    let (di, dj, h) = match axis {
        Axis::X => (1isize, 0isize, g.hx),
        Axis::Y => (0, 1, g.hy),
    };
    let inv = 0.5 / h;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let (ii, jj) = (i as isize, j as isize);
            let hi = f.sample(ii + di, jj + dj, bc);
            let lo = f.sample(ii - di, jj - dj, bc);
            out.values[g.idx(i, j)] = (hi - lo) * inv;
        }
    }
    out
}

/// Cell-centered gradient `[d_x A_x f, d_y A_y f]`.
pub fn grad_h(f: &ScalarField, bc: BoundaryKind) -> (ScalarField, ScalarField) {
    (
        central_difference(f, Axis::X, bc),
        central_difference(f, Axis::Y, bc),
    )
}

pub(crate) fn mixed_xy_with(f: &ScalarField, bc: BoundaryKind) -> ScalarField {
    let g = f.grid;
    let mut out = ScalarField::zeros(g);
    let inv = 0.25 / (g.hx * g.hy);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let (ii, jj) = (i as isize, j as isize);
            let pp = f.sample(ii + 1, jj + 1, bc);
            let pm = f.sample(ii + 1, jj - 1, bc);
            let mp = f.sample(ii - 1, jj + 1, bc);
            let mm = f.sample(ii - 1, jj - 1, bc);
            out.values[g.idx(i, j)] = (pp - pm - mp + mm) * inv;
        }
    }
    out
}

/// Mixed second derivative `d_x d_y A_x A_y f` with zero-Neumann ghosts.
pub fn mixed_xy_h(f: &ScalarField) -> ScalarField {
    mixed_xy_with(f, BoundaryKind::NeumannZero)
}

/// Face differences `D_x f` on the `(nx + 1) x ny` x-faces and `D_y f` on
/// the `nx x (ny + 1)` y-faces, zero on boundary faces (zero-Neumann).
pub fn face_differences(f: &ScalarField) -> (Vec<f64>, Vec<f64>) {
    let g = f.grid;
    let (nx, ny) = (g.nx, g.ny);
    let mut dx = vec![0.0; (nx + 1) * ny];
    for j in 0..ny {
        for i in 1..nx {
            dx[j * (nx + 1) + i] = (f.at(i, j) - f.at(i - 1, j)) / g.hx;
        }
    }
    let mut dy = vec![0.0; nx * (ny + 1)];
    for j in 1..ny {
        for i in 0..nx {
            dy[j * nx + i] = (f.at(i, j) - f.at(i, j - 1)) / g.hy;
        }
    }
    (dx, dy)
}

/// `sum_faces (D_x f)(D_x g) hx hy` and the same for `y`, i.e. the edge
/// inner products that pair with the Neumann Laplacian under summation by
/// parts.
pub fn face_inner(f: &ScalarField, g: &ScalarField) -> (f64, f64) {
    assert_same_grid(f, g);
    let (fx, fy) = face_differences(f);
    let (gx, gy) = face_differences(g);
    let w = f.grid.cell_area();
    let x: f64 = fx.iter().zip(&gx).map(|(a, b)| a * b).sum();
    let y: f64 = fy.iter().zip(&gy).map(|(a, b)| a * b).sum();
    (x * w, y * w)
}

/// `sum_faces |D f|^2 hx hy`, the discrete Dirichlet energy `||grad_h f||^2`.
pub fn gradient_norm_sq(f: &ScalarField) -> f64 {
    let g = f.grid;
    let (nx, ny) = (g.nx, g.ny);
    let v = &f.values;
    let ax = 1.0 / (g.hx * g.hx);
    let ay = 1.0 / (g.hy * g.hy);
    let mut sx = 0.0;
    let mut sy = 0.0;
    for j in 0..ny {
        for i in 0..nx {
            let k = j * nx + i;
            if i + 1 < nx {
                let d = v[k + 1] - v[k];
                sx += d * d;
            }
            if j + 1 < ny {
                let d = v[k + nx] - v[k];
                sy += d * d;
            }
        }
    }
    (sx * ax + sy * ay) * g.cell_area()
}

/// `(f, g)_h = sum f g hx hy`.
pub fn inner_h(f: &ScalarField, g: &ScalarField) -> f64 {
    assert_same_grid(f, g);
    let s: f64 = f.values.iter().zip(&g.values).map(|(a, b)| a * b).sum();
    s * f.grid.cell_area()
}

pub fn norm_h(f: &ScalarField) -> f64 {
    inner_h(f, f).sqrt()
}

pub fn mean_h(f: &ScalarField) -> f64 {
    let s: f64 = f.values.iter().sum();
    s * f.grid.cell_area() / f.grid.area()
}

/// Restricts a field to the grid with half the cells by averaging each
/// 2 x 2 block of children.
pub fn restrict(f: &ScalarField) -> Result<ScalarField> {
    let coarse = f.grid.coarsened()?;
    Ok(ScalarField::from_vec(
        coarse,
        (0..coarse.ny)
            .flat_map(|j| (0..coarse.nx).map(move |i| (i, j)))
            .map(|(i, j)| {
                0.25 * (f.at(2 * i, 2 * j)
                    + f.at(2 * i + 1, 2 * j)
                    + f.at(2 * i, 2 * j + 1)
                    + f.at(2 * i + 1, 2 * j + 1))
            })
            .collect(),
    )
    .expect("restriction preserves cell count"))
}
