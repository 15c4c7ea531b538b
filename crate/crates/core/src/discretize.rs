//! Positivity-preserving finite-state discretization: grids, sparse operators,
//! generator assembly with Feller boundary rows, discrete order maps, and the
//! exact discrete intertwiner B_h, C_h with `Phi A = (B + C) Phi`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion1d::{DiffusionModel, FellerBoundary, ScaleSpeedKilling};
use crate::expr::EvalError;
use crate::multid::{CoefficientField, MultiIndex};
use crate::order::DiffusionOrder;
use crate::report::Witness;

#[derive(Debug, Clone, Error)]
pub enum DiscretizeError {
    #[error("grid needs at least 4 cells, got {0}")]
    GridTooSmall(usize),
    #[error("coefficient evaluation failed at {at:?}: {source}")]
    Eval { at: Vec<f64>, source: EvalError },
    #[error("negative killing coefficient c({at}) = {value}; generator rows need c >= 0")]
    NegativeKilling { at: f64, value: f64 },
    #[error("negative rate {value} at state {state}; upwind construction should prevent this")]
    NegativeRate { state: usize, value: f64 },
    #[error("stencil positivity violated at {at:?}: |a12| = {a12} exceeds min(a11, a22) = {axis}")]
    StencilPositivity { at: Vec<f64>, a12: f64, axis: f64 },
    #[error("infinite interval needs a truncation radius (stationary mass is not computable)")]
    NeedTruncationRadius,
    #[error("state space too large: {0} states exceeds the desk-scale limit {1}")]
    TooLarge(usize, usize),
    #[error("order map {0} is not supported by the discrete intertwiner")]
    UnsupportedOrderMap(&'static str),
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

/// Uniform 1-d grid `x_0 < ... < x_N`. Finite model endpoints are included as
/// grid points; infinite intervals are truncated at a recorded radius.
#[derive(Debug, Clone)]
pub struct Grid {
    pub points: Vec<f64>,
    pub h: f64,
    /// Set when the model interval was infinite and replaced by `[-L, L]`
    /// (or one-sidedly); reports should carry this note.
    pub truncation: Option<Truncation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truncation {
    pub left: bool,
    pub right: bool,
    pub radius: f64,
}

impl Grid {
    /// Uniform grid with `cells >= 4` cells on `[l, r]`.
    pub fn uniform(l: f64, r: f64, cells: usize) -> Result<Grid, DiscretizeError> {
        if cells < 4 {
            return Err(DiscretizeError::GridTooSmall(cells));
        }
        let h = (r - l) / cells as f64;
        let points = (0..=cells).map(|i| l + h * i as f64).collect();
        Ok(Grid {
            points,
            h,
            truncation: None,
        })
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    /// Number of cells N (points are x_0..x_N).
    pub fn n_cells(&self) -> usize {
        self.points.len() - 1
    }
}

/// Build a grid for a model, truncating infinite endpoints.
///
/// The truncation radius is chosen so that the stationary-scale mass beyond
/// it is below 1e-6 of the total when the speed measure is finite; otherwise
/// the caller must supply a radius.
pub fn grid_for_model(
    model: &DiffusionModel,
    cells: usize,
    user_radius: Option<f64>,
) -> Result<Grid, DiscretizeError> {
    let left_inf = model.l.is_infinite();
    let right_inf = model.r.is_infinite();
    if !left_inf && !right_inf {
        return Grid::uniform(model.l, model.r, cells);
    }
    let radius = match user_radius {
        Some(radius) => radius,
        None => truncation_radius(model).ok_or(DiscretizeError::NeedTruncationRadius)?,
    };
    let l = if left_inf { -radius } else { model.l };
    let r = if right_inf { radius } else { model.r };
    let mut grid = Grid::uniform(l, r, cells)?;
    grid.truncation = Some(Truncation {
        left: left_inf,
        right: right_inf,
        radius,
    });
    Ok(grid)
}

/// Radius beyond which the stationary (speed) mass drops below 1e-6 relative,
/// or `None` when the speed measure does not converge numerically.
pub fn truncation_radius(model: &DiffusionModel) -> Option<f64> {
    let ssk = scale_speed(model);
    let mut masses = Vec::new();
    for k in 1..=8 {
        let radius = 2f64.powi(k);
        let lo = if model.l.is_finite() {
            model.l
        } else {
            -radius
        };
        let hi = if model.r.is_finite() { model.r } else { radius };
        let total = match (ssk.speed(hi), ssk.speed(lo)) {
            (Ok(a), Ok(b)) => a - b,
            _ => return None,
        };
        masses.push((radius, total));
        if masses.len() >= 2 {
            let (_, prev) = masses[masses.len() - 2];
            if total.is_finite() && total > 0.0 && (total - prev).abs() < 1e-6 * total {
                return Some(radius);
            }
        }
    }
    None
}

fn scale_speed(model: &DiffusionModel) -> ScaleSpeedKilling {
    crate::diffusion1d::scale_speed_killing(model, model.midpoint())
}

// ---------------------------------------------------------------------------
// Sparse operator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Generator,
    OrderMap,
    Resolvent,
    General,
}

/// Sparse row-major operator on grid functions. Rows keep their entries
/// sorted by column; construction is pure and the value is immutable
/// afterwards, so operators can be shared across threads freely.
#[derive(Debug, Clone)]
pub struct GridOperator {
    nrows: usize,
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
    pub kind: OperatorKind,
}

impl GridOperator {
    pub fn zeros(nrows: usize, ncols: usize, kind: OperatorKind) -> GridOperator {
        GridOperator {
            nrows,
            ncols,
            rows: vec![Vec::new(); nrows],
            kind,
        }
    }

    pub fn identity(n: usize) -> GridOperator {
        let mut op = GridOperator::zeros(n, n, OperatorKind::General);
        for i in 0..n {
            op.rows[i].push((i, 1.0));
        }
        op
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn is_square(&self) -> bool {
        self.nrows == self.ncols
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by(|(col, _)| col.cmp(&j))
            .map(|idx| self.rows[i][idx].1)
            .unwrap_or(0.0)
    }

    /// Add `v` to entry `(i, j)`; drops the entry when it cancels to zero.
    pub fn add_entry(&mut self, i: usize, j: usize, v: f64) {
        assert!(i < self.nrows && j < self.ncols);
        if v == 0.0 {
            return;
        }
        let row = &mut self.rows[i];
        match row.binary_search_by(|(col, _)| col.cmp(&j)) {
            Ok(idx) => {
                row[idx].1 += v;
                if row[idx].1 == 0.0 {
                    row.remove(idx);
                }
            }
            Err(idx) => row.insert(idx, (j, v)),
        }
    }

    pub fn set_entry(&mut self, i: usize, j: usize, v: f64) {
        let old = self.get(i, j);
        self.add_entry(i, j, v - old);
    }

    pub fn matvec(&self, f: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.ncols);
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, v)| v * f[j]).sum())
            .collect()
    }

    pub fn transpose(&self) -> GridOperator {
        let mut out = GridOperator::zeros(self.ncols, self.nrows, OperatorKind::General);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                out.rows[j].push((i, v));
            }
        }
        for row in &mut out.rows {
            row.sort_by_key(|&(j, _)| j);
        }
        out
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &GridOperator) -> GridOperator {
        assert_eq!(self.ncols, other.nrows);
        let mut out = GridOperator::zeros(self.nrows, other.ncols, OperatorKind::General);
        for i in 0..self.nrows {
            let mut acc: Vec<(usize, f64)> = Vec::new();
            for &(k, v) in &self.rows[i] {
                for &(j, w) in &other.rows[k] {
                    acc.push((j, v * w));
                }
            }
            acc.sort_by_key(|&(j, _)| j);
            let mut merged: Vec<(usize, f64)> = Vec::new();
            for (j, v) in acc {
                match merged.last_mut() {
                    Some((jj, vv)) if *jj == j => *vv += v,
                    _ => merged.push((j, v)),
                }
            }
            merged.retain(|&(_, v)| v != 0.0);
            out.rows[i] = merged;
        }
        out
    }

    pub fn scale(&self, s: f64) -> GridOperator {
        let mut out = self.clone();
        for row in &mut out.rows {
            for entry in row.iter_mut() {
                entry.1 *= s;
            }
        }
        out
    }

    pub fn add(&self, other: &GridOperator) -> GridOperator {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut out = self.clone();
        for (i, row) in other.rows.iter().enumerate() {
            for &(j, v) in row {
                out.add_entry(i, j, v);
            }
        }
        out
    }

    pub fn sub(&self, other: &GridOperator) -> GridOperator {
        self.add(&other.scale(-1.0))
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|&(_, v)| v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|row| row.iter().map(|&(_, v)| v.abs()))
            .fold(0.0, f64::max)
    }

    /// Induced max-norm: largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows)
            .map(|i| self.rows[i].iter().map(|&(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_diag_abs(&self) -> f64 {
        (0..self.nrows.min(self.ncols))
            .map(|i| self.get(i, i).abs())
            .fold(0.0, f64::max)
    }

    /// First strictly negative off-diagonal entry, if any.
    pub fn metzler_violation(&self, tol: f64) -> Option<(usize, usize, f64)> {
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                if i != j && v < -tol {
                    return Some((i, j, v));
                }
            }
        }
        None
    }

    /// First entry below `-tol`, if any (entrywise nonnegativity check).
    pub fn negative_entry(&self, tol: f64) -> Option<(usize, usize, f64)> {
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                if v < -tol {
                    return Some((i, j, v));
                }
            }
        }
        None
    }

    /// Validates the generator invariant: off-diagonal entries >= 0 and row
    /// sums <= tol.
    pub fn check_generator(&self, tol: f64) -> Result<(), Witness> {
        if let Some((i, j, v)) = self.metzler_violation(tol) {
            return Err(Witness::new(format!("entry ({i}, {j})"), v));
        }
        for i in 0..self.nrows {
            let s = self.row_sum(i);
            if s > tol {
                return Err(Witness::new(format!("row sum {i}"), s));
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn to_triplets(&self) -> SparseTriplets {
        let mut rows = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                rows.push((i, j, v));
            }
        }
        SparseTriplets {
            n: self.nrows,
            ncols: if self.ncols == self.nrows {
                None
            } else {
                Some(self.ncols)
            },
            rows,
        }
    }

    pub fn from_triplets(t: &SparseTriplets, kind: OperatorKind) -> GridOperator {
        let ncols = t.ncols.unwrap_or(t.n);
        let mut op = GridOperator::zeros(t.n, ncols, kind);
        for &(i, j, v) in &t.rows {
            op.add_entry(i, j, v);
        }
        op
    }
}

/// Documented JSON debug format: `{"n": rows, "ncols": cols-if-rectangular,
/// "rows": [[i, j, v], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseTriplets {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ncols: Option<usize>,
    pub rows: Vec<(usize, usize, f64)>,
}

// ---------------------------------------------------------------------------
// Generator assembly
// ---------------------------------------------------------------------------

/// Rate-form view of a tridiagonal generator: up/down jump rates per state.
#[derive(Debug, Clone)]
pub struct BirthDeathRates {
    pub up: Vec<f64>,
    pub down: Vec<f64>,
}

/// Conservative birth-death generator from jump rates (`up[n-1]` and
/// `down[0]` are ignored).
pub fn birth_death_generator(up: &[f64], down: &[f64]) -> GridOperator {
    let n = up.len();
    assert_eq!(n, down.len());
    let mut a = GridOperator::zeros(n, n, OperatorKind::Generator);
    for i in 0..n {
        let u = if i + 1 < n { up[i] } else { 0.0 };
        let d = if i > 0 { down[i] } else { 0.0 };
        if i + 1 < n {
            a.add_entry(i, i + 1, u);
        }
        if i > 0 {
            a.add_entry(i, i - 1, d);
        }
        a.add_entry(i, i, -(u + d));
    }
    a
}

/// Extract up/down rates from a tridiagonal generator, if it is one.
pub fn tridiagonal_rates(a: &GridOperator) -> Option<BirthDeathRates> {
    if !a.is_square() {
        return None;
    }
    let n = a.nrows();
    let mut up = vec![0.0; n];
    let mut down = vec![0.0; n];
    for i in 0..n {
        for &(j, v) in a.row(i) {
            if j == i {
                continue;
            } else if j == i + 1 {
                up[i] = v;
            } else if i > 0 && j == i - 1 {
                down[i] = v;
            } else {
                return None;
            }
        }
    }
    Some(BirthDeathRates { up, down })
}

/// Upwind birth-death discretization of a 1-d diffusion model with its Feller
/// boundary rows.
///
/// Interior rows: up-rate `a/(2h^2) + b^+/h`, down-rate `a/(2h^2) + b^-/h`,
/// killing `c` on the diagonal. Boundary rows realize the model's boundary
/// kind; infinite intervals must already be truncated in the grid (the
/// truncation uses reflecting rows and is recorded in `grid.truncation`).
pub fn build_generator(
    model: &DiffusionModel,
    grid: &Grid,
) -> Result<GridOperator, DiscretizeError> {
    let n = grid.n_points();
    let h = grid.h;
    let mut a_h = GridOperator::zeros(n, n, OperatorKind::Generator);

    let eval = |e: &crate::expr::Expr, x: f64| -> Result<f64, DiscretizeError> {
        e.evaluate(&[x]).map_err(|source| DiscretizeError::Eval {
            at: vec![x],
            source,
        })
    };

    for i in 1..n - 1 {
        let x = grid.points[i];
        let av = eval(&model.a, x)?;
        let bv = eval(&model.b, x)?;
        let cv = eval(&model.c, x)?;
        if cv < 0.0 {
            return Err(DiscretizeError::NegativeKilling { at: x, value: cv });
        }
        let up = av / (2.0 * h * h) + bv.max(0.0) / h;
        let down = av / (2.0 * h * h) + (-bv).max(0.0) / h;
        if up < 0.0 || down < 0.0 {
            return Err(DiscretizeError::NegativeRate {
                state: i,
                value: up.min(down),
            });
        }
        a_h.add_entry(i, i + 1, up);
        a_h.add_entry(i, i - 1, down);
        a_h.add_entry(i, i, -(up + down + cv));
    }

    boundary_row(model, grid, &mut a_h, true)?;
    boundary_row(model, grid, &mut a_h, false)?;
    Ok(a_h)
}

fn boundary_row(
    model: &DiffusionModel,
    grid: &Grid,
    a_h: &mut GridOperator,
    left: bool,
) -> Result<(), DiscretizeError> {
    let n = grid.n_points();
    let h = grid.h;
    let (state, inward): (usize, usize) = if left { (0, 1) } else { (n - 1, n - 2) };
    let x = grid.points[state];
    let truncated = grid
        .truncation
        .as_ref()
        .map(|t| if left { t.left } else { t.right })
        .unwrap_or(false);

    let eval = |e: &crate::expr::Expr| -> Result<f64, DiscretizeError> {
        e.evaluate(&[x]).map_err(|source| DiscretizeError::Eval {
            at: vec![x],
            source,
        })
    };
    let av = eval(&model.a)?;
    let cv = eval(&model.c)?;
    if cv < 0.0 {
        return Err(DiscretizeError::NegativeKilling { at: x, value: cv });
    }

    let kind = if truncated {
        // truncation of an infinite interval: reflecting wall at +-L
        FellerBoundary::Reflecting
    } else {
        *model.boundary(if left {
            crate::diffusion1d::Side::Left
        } else {
            crate::diffusion1d::Side::Right
        })
    };

    match kind {
        FellerBoundary::Reflecting | FellerBoundary::Natural => {
            let rate = av / (h * h);
            a_h.add_entry(state, inward, rate);
            a_h.add_entry(state, state, -(rate + cv));
        }
        FellerBoundary::Sticky { mass } => {
            // flux condition with point mass m_e plus the half-cell speed mass
            let rate = 1.0 / (h * (mass + h / av));
            a_h.add_entry(state, inward, rate);
            a_h.add_entry(state, state, -(rate + cv));
        }
        FellerBoundary::Absorbing => {
            // zero row: the state holds forever
        }
        FellerBoundary::Killing => {
            // strong killing rate realizes f(e) = 0 in the resolvent limit
            let kappa = av / (h * h * h);
            a_h.add_entry(state, state, -kappa);
        }
        FellerBoundary::Elastic { k } => {
            let rate = av / (h * h);
            let kill = av * k / h;
            a_h.add_entry(state, inward, rate);
            a_h.add_entry(state, state, -(rate + kill + cv));
        }
        FellerBoundary::Trap { gamma } => {
            a_h.add_entry(state, state, -gamma);
        }
    }
    Ok(())
}

/// Drift-only boundary row for the gamma = 0 domain `f''(e) = 0`
/// (`A f(e) = b(e) f'(e)`), used by the convex and increasing-convex
/// pipelines. Requires `b(l) >= 0` and `b(r) <= 0` for rate positivity,
/// which is exactly the theorems' drift sign hypothesis.
pub fn build_generator_gamma0(
    model: &DiffusionModel,
    grid: &Grid,
) -> Result<GridOperator, DiscretizeError> {
    let mut a_h = build_generator(model, grid)?;
    let n = grid.n_points();
    let h = grid.h;
    for (state, inward, left) in [(0usize, 1usize, true), (n - 1, n - 2, false)] {
        let x = grid.points[state];
        let bv = model
            .b
            .evaluate(&[x])
            .map_err(|source| DiscretizeError::Eval {
                at: vec![x],
                source,
            })?;
        let rate = if left { bv / h } else { -bv / h };
        if rate < 0.0 {
            return Err(DiscretizeError::NegativeRate { state, value: rate });
        }
        // replace whatever boundary row build_generator installed
        let existing: Vec<(usize, f64)> = a_h.row(state).to_vec();
        for (j, v) in existing {
            a_h.add_entry(state, j, -v);
        }
        a_h.add_entry(state, inward, rate);
        a_h.add_entry(state, state, -rate);
    }
    Ok(a_h)
}

// ---------------------------------------------------------------------------
// Discrete order maps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiBlockKind {
    /// Forward differences `(f_{i+1} - f_i) / h`, rows 0..N-1.
    ForwardDiff,
    /// Centered second differences `(f_{i+1} - 2 f_i + f_{i-1}) / h^2`,
    /// rows 1..N-1.
    SecondDiff,
    /// Mixed forward difference over a 2-d tensor grid.
    Mixed2d,
}

/// Tensor-grid layout of a mixed-difference block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedMeta {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
}

/// One block of a discrete order map. The stencil holds small-integer
/// coefficients; `scale` carries the `1/h^p` factor so that sign checks on
/// stencil contractions stay exact for exactly-representable inputs.
#[derive(Debug, Clone)]
pub struct PhiBlock {
    pub stencil: GridOperator,
    pub scale: f64,
    pub kind: PhiBlockKind,
    pub meta: Option<MixedMeta>,
}

impl PhiBlock {
    pub fn nrows(&self) -> usize {
        self.stencil.nrows()
    }

    /// Scaled application of this block.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.stencil
            .matvec(f)
            .into_iter()
            .map(|v| v * self.scale)
            .collect()
    }

    /// Scaled matrix form.
    pub fn matrix(&self) -> GridOperator {
        let mut m = self.stencil.scale(self.scale);
        m.kind = OperatorKind::OrderMap;
        m
    }
}

/// Discrete order map: one block per component of the order operator.
#[derive(Debug, Clone)]
pub struct DiscreteOrderMap {
    pub blocks: Vec<PhiBlock>,
}

impl DiscreteOrderMap {
    pub fn total_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    pub fn ncols(&self) -> usize {
        self.blocks[0].stencil.ncols()
    }

    /// Apply all blocks, concatenated.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_rows());
        for b in &self.blocks {
            out.extend(b.apply(f));
        }
        out
    }

    /// Stacked scaled matrix form.
    pub fn matrix(&self) -> GridOperator {
        let nrows = self.total_rows();
        let ncols = self.ncols();
        let mut out = GridOperator::zeros(nrows, ncols, OperatorKind::OrderMap);
        let mut offset = 0;
        for b in &self.blocks {
            let m = b.matrix();
            for i in 0..m.nrows() {
                for &(j, v) in m.row(i) {
                    out.add_entry(offset + i, j, v);
                }
            }
            offset += m.nrows();
        }
        out
    }
}

/// Discrete order map on a 1-d grid: forward differences for the increasing
/// order, centered second differences for the convex order, both stacked for
/// the increasing-convex order.
pub fn build_phi(order: DiffusionOrder, grid: &Grid) -> Result<DiscreteOrderMap, DiscretizeError> {
    let n = grid.n_points();
    if n < 5 {
        return Err(DiscretizeError::GridTooSmall(n.saturating_sub(1)));
    }
    let forward = || {
        let mut s = GridOperator::zeros(n - 1, n, OperatorKind::OrderMap);
        for i in 0..n - 1 {
            s.add_entry(i, i, -1.0);
            s.add_entry(i, i + 1, 1.0);
        }
        PhiBlock {
            stencil: s,
            scale: 1.0 / grid.h,
            kind: PhiBlockKind::ForwardDiff,
            meta: None,
        }
    };
    let second = || {
        let mut s = GridOperator::zeros(n - 2, n, OperatorKind::OrderMap);
        for i in 1..n - 1 {
            s.add_entry(i - 1, i - 1, 1.0);
            s.add_entry(i - 1, i, -2.0);
            s.add_entry(i - 1, i + 1, 1.0);
        }
        PhiBlock {
            stencil: s,
            scale: 1.0 / (grid.h * grid.h),
            kind: PhiBlockKind::SecondDiff,
            meta: None,
        }
    };
    let blocks = match order {
        DiffusionOrder::Increasing => vec![forward()],
        DiffusionOrder::Convex => vec![second()],
        DiffusionOrder::IncreasingConvex => vec![forward(), second()],
    };
    Ok(DiscreteOrderMap { blocks })
}

// ---------------------------------------------------------------------------
// Discrete intertwiner
// ---------------------------------------------------------------------------

/// Result of `derive_discrete_intertwiner`: `Phi A = (B + C) Phi + defect`,
/// with the max-norm defect reported exactly.
#[derive(Debug, Clone)]
pub struct DiscreteIntertwiner {
    pub b: GridOperator,
    pub c: GridOperator,
    /// Max-norm of `Phi A - (B + C) Phi`, computed by sparse multiplication.
    pub residual: f64,
    /// False when the kernel of Phi was not invariant under A (for example
    /// killing with the increasing order); B, C are then the best local
    /// representatives and `residual` quantifies the mismatch.
    pub exact: bool,
    /// First negative entry of C, if any (tolerance 0; exact arithmetic).
    pub c_negative_witness: Option<(usize, usize, f64)>,
}

impl DiscreteIntertwiner {
    pub fn c_nonneg(&self) -> bool {
        self.c_negative_witness.is_none()
    }

    pub fn m(&self) -> GridOperator {
        self.b.add(&self.c)
    }
}

/// Derive the exact discrete intertwiner `B_h`, `C_h` with
/// `Phi A_h = (B_h + C_h) Phi`.
///
/// The pseudo-inverse of the difference map is its combinatorial inverse
/// (cumulative sums anchored at the first coordinates), applied row-by-row as
/// an exact telescoping, so no spurious numerical residual appears. The
/// split into B and C depends on the block kind:
///
/// * forward differences: B is the edge chain using the up-rate of the lower
///   state and the down-rate of the upper state; C collects the rate
///   increments `up_{i+1} - up_i`, `down_i - down_{i+1}` whose sign is the
///   classical monotonicity pattern. Edge rows adjacent to boundary states
///   belong to B wholesale.
/// * second differences: B is the Metzler part of M, C the remainder; for
///   the stacked increasing-convex map the second-difference rows route
///   their first-moment defect (the discrete `b''`) into the lower-left C
///   block exactly as in the continuum operator.
/// * mixed 2-d differences: Metzler split of the telescoped M.
pub fn derive_discrete_intertwiner(
    a_h: &GridOperator,
    phi: &DiscreteOrderMap,
) -> Result<DiscreteIntertwiner, DiscretizeError> {
    let kinds: Vec<PhiBlockKind> = phi.blocks.iter().map(|b| b.kind).collect();
    match kinds.as_slice() {
        [PhiBlockKind::ForwardDiff] => intertwine_forward(a_h, phi),
        [PhiBlockKind::SecondDiff] => intertwine_second(a_h, phi),
        [PhiBlockKind::ForwardDiff, PhiBlockKind::SecondDiff] => intertwine_stacked(a_h, phi),
        [PhiBlockKind::Mixed2d] => intertwine_mixed(a_h, phi),
        _ => Err(DiscretizeError::UnsupportedOrderMap(
            "unsupported block combination",
        )),
    }
}

/// Telescoped coefficients of a zero-sum row functional in forward-difference
/// coordinates: `sum_k r_k f_k = sum_j (-h S_j) g_j + M0 f_0` with
/// `S_j = sum_{k <= j} r_k`. Returns the coefficient vector and the moment
/// defect `M0`.
fn telescope_forward(row: &[(usize, f64)], n_edges: usize, h: f64) -> (Vec<(usize, f64)>, f64) {
    let m0: f64 = row.iter().map(|&(_, v)| v).sum();
    if row.is_empty() {
        return (Vec::new(), m0);
    }
    let lo = row.first().unwrap().0;
    let hi = row.last().unwrap().0;
    let mut coeffs = Vec::new();
    let mut running = 0.0;
    let mut idx = 0;
    for j in lo..hi.min(n_edges) {
        while idx < row.len() && row[idx].0 <= j {
            running += row[idx].1;
            idx += 1;
        }
        // remainder above j equals m0 - running; anchored at f_0 the
        // coefficient on g_j is h * (m0 - S_j) for j >= lo, but entries below
        // the support vanish only when the defect m0 is zero, so the local
        // form uses -h * S_j and reports m0.
        let c = -h * running;
        if c != 0.0 {
            coeffs.push((j, c));
        }
    }
    (coeffs, m0)
}

fn intertwine_forward(
    a_h: &GridOperator,
    phi: &DiscreteOrderMap,
) -> Result<DiscreteIntertwiner, DiscretizeError> {
    let block = &phi.blocks[0];
    let n = a_h.nrows();
    let n_edges = n - 1;
    let h = 1.0 / block.scale;
    let phi_m = block.matrix();
    let phi_a = phi_m.matmul(a_h);

    let mut m = GridOperator::zeros(n_edges, n_edges, OperatorKind::General);
    let mut exact = true;
    for i in 0..n_edges {
        let (coeffs, defect) = telescope_forward(phi_a.row(i), n_edges, h);
        if defect.abs() > 1e-10 * (1.0 + a_h.max_abs()) {
            exact = false;
        }
        for (j, v) in coeffs {
            m.add_entry(i, j, v);
        }
    }

    // structural split via the rate form of A, when A is tridiagonal: the
    // certificate entries are the rate increments themselves, so their signs
    // are free of telescoping round-off; B absorbs the remainder
    let (b, c) = if let Some(rates) = tridiagonal_rates(a_h) {
        let mut c = GridOperator::zeros(n_edges, n_edges, OperatorKind::General);
        for i in 1..n_edges.saturating_sub(1) {
            // edges touching boundary states belong to B wholesale
            c.add_entry(i, i + 1, rates.up[i + 1] - rates.up[i]);
            c.add_entry(i, i - 1, rates.down[i] - rates.down[i + 1]);
        }
        let b = m.sub(&c);
        (b, c)
    } else {
        metzler_split(&m)
    };

    finish_intertwiner(a_h, phi, b, c, exact)
}

/// Telescoped coefficients of a row functional in second-difference
/// coordinates, after routing the first-moment defect to the supplied sink.
/// Green's function of the second-difference map anchored at `f_0 = f_1 = 0`
/// is `f_k = h^2 sum_{j<k} (k - j) g_j`.
fn telescope_second(row: &[(usize, f64)], n_nodes: usize, h: f64) -> (Vec<(usize, f64)>, f64, f64) {
    // moments: m0 = sum r_k, m1 = sum r_k * k
    let m0: f64 = row.iter().map(|&(_, v)| v).sum();
    let m1: f64 = row.iter().map(|&(k, v)| v * k as f64).sum();
    if row.is_empty() {
        return (Vec::new(), 0.0, 0.0);
    }
    let lo = row.first().unwrap().0;
    let hi = row.last().unwrap().0;
    let mut coeffs = Vec::new();
    // c_j = h^2 * sum_{k > j} r_k (k - j), local from above; with vanishing
    // moments it is also zero below the support.
    for j in lo.saturating_sub(1).max(1)..=hi.min(n_nodes - 2) {
        let c: f64 = row
            .iter()
            .filter(|&&(k, _)| k > j)
            .map(|&(k, v)| v * (k - j) as f64)
            .sum();
        let c = c * h * h;
        if c != 0.0 {
            coeffs.push((j - 1, c)); // second-difference rows are indexed from node 1
        }
    }
    (coeffs, m0, m1)
}

fn intertwine_second(
    a_h: &GridOperator,
    phi: &DiscreteOrderMap,
) -> Result<DiscreteIntertwiner, DiscretizeError> {
    let block = phi
        .blocks
        .iter()
        .find(|b| b.kind == PhiBlockKind::SecondDiff)
        .unwrap();
    let n = a_h.nrows();
    let h = (1.0 / block.scale).sqrt();
    let phi_m = block.matrix();
    let phi_a = phi_m.matmul(a_h);
    let n_rows = n - 2;

    let mut m = GridOperator::zeros(n_rows, n_rows, OperatorKind::General);
    let mut exact = true;
    let scale_ref = 1.0 + a_h.max_abs();
    for i in 0..n_rows {
        // cancel the first-moment defect with the forward difference at the
        // row's own node before telescoping; for a pure convex map that
        // defect (the discrete b'' term) makes the intertwining inexact
        let node = i + 1;
        let raw: Vec<(usize, f64)> = phi_a.row(i).to_vec();
        let m1: f64 = raw.iter().map(|&(k, v)| v * k as f64).sum();
        let mut adjusted = GridOperator::zeros(1, n, OperatorKind::General);
        for &(k, v) in &raw {
            adjusted.add_entry(0, k, v);
        }
        adjusted.add_entry(0, node + 1, -m1);
        adjusted.add_entry(0, node, m1);
        // m1 * h is the coefficient on the forward difference, the discrete
        // analogue of b''(x_node)
        if (m1 * h).abs() > 1e-10 * scale_ref {
            exact = false;
        }
        let (coeffs, m0, _) = telescope_second(adjusted.row(0), n, h);
        if m0.abs() > 1e-10 * scale_ref {
            exact = false;
        }
        for (j, v) in coeffs {
            m.add_entry(i, j, v);
        }
    }

    let (b, c) = metzler_split(&m);
    finish_intertwiner(a_h, phi, b, c, exact)
}

fn intertwine_stacked(
    a_h: &GridOperator,
    phi: &DiscreteOrderMap,
) -> Result<DiscreteIntertwiner, DiscretizeError> {
    let n = a_h.nrows();
    let fwd_block = &phi.blocks[0];
    let snd_block = &phi.blocks[1];
    let n_edges = n - 1;
    let n_snd = n - 2;
    let total = n_edges + n_snd;
    let h = 1.0 / fwd_block.scale;

    let fwd_only = DiscreteOrderMap {
        blocks: vec![fwd_block.clone()],
    };
    let part1 = intertwine_forward(a_h, &fwd_only)?;

    // second-difference rows with the first-moment defect routed to C21
    let phi_a2 = snd_block.matrix().matmul(a_h);
    let mut b2 = GridOperator::zeros(n_snd, n_snd, OperatorKind::General);
    let mut c21 = GridOperator::zeros(n_snd, n_edges, OperatorKind::General);
    let mut exact = part1.exact;
    let scale_ref = 1.0 + a_h.max_abs();
    for i in 0..n_snd {
        let node = i + 1;
        let raw: Vec<(usize, f64)> = phi_a2.row(i).to_vec();
        let m1: f64 = raw.iter().map(|&(k, v)| v * k as f64).sum();
        let mut adjusted = GridOperator::zeros(1, n, OperatorKind::General);
        for &(k, v) in &raw {
            adjusted.add_entry(0, k, v);
        }
        adjusted.add_entry(0, node + 1, -m1);
        adjusted.add_entry(0, node, m1);
        // m1 (f_{node+1} - f_node) = (m1 h) g_node: the discrete b''
        // coupling routed into the lower-left C block
        c21.add_entry(i, node, m1 * h);
        let (coeffs, m0, _) = telescope_second(adjusted.row(0), n, h);
        if m0.abs() > 1e-10 * scale_ref {
            exact = false;
        }
        for (j, v) in coeffs {
            b2.add_entry(i, j, v);
        }
    }
    let (b2, c22) = metzler_split(&b2);

    let mut b = GridOperator::zeros(total, total, OperatorKind::General);
    let mut c = GridOperator::zeros(total, total, OperatorKind::General);
    for i in 0..n_edges {
        for &(j, v) in part1.b.row(i) {
            b.add_entry(i, j, v);
        }
        for &(j, v) in part1.c.row(i) {
            c.add_entry(i, j, v);
        }
    }
    for i in 0..n_snd {
        for &(j, v) in b2.row(i) {
            b.add_entry(n_edges + i, n_edges + j, v);
        }
        for &(j, v) in c22.row(i) {
            c.add_entry(n_edges + i, n_edges + j, v);
        }
        for &(j, v) in c21.row(i) {
            c.add_entry(n_edges + i, j, v);
        }
    }
    finish_intertwiner(a_h, phi, b, c, exact)
}

fn intertwine_mixed(
    a_h: &GridOperator,
    phi: &DiscreteOrderMap,
) -> Result<DiscreteIntertwiner, DiscretizeError> {
    let block = &phi.blocks[0];
    let (nx, ny, hx, hy) = match &block.meta {
        Some(MixedMeta { nx, ny, hx, hy }) => (*nx, *ny, *hx, *hy),
        None => {
            return Err(DiscretizeError::UnsupportedOrderMap(
                "mixed block without meta",
            ))
        }
    };
    let n_rows = (nx - 1) * (ny - 1);
    let phi_a = block.matrix().matmul(a_h);
    let mut m = GridOperator::zeros(n_rows, n_rows, OperatorKind::General);
    let mut exact = true;
    let scale_ref = 1.0 + a_h.max_abs();

    for row_idx in 0..n_rows {
        let row = phi_a.row(row_idx);
        if row.is_empty() {
            continue;
        }
        // bounding box of the row support in (ix, iy)
        let mut lo_x = usize::MAX;
        let mut hi_x = 0;
        let mut lo_y = usize::MAX;
        let mut hi_y = 0;
        for &(k, _) in row {
            let (ix, iy) = (k / ny, k % ny);
            lo_x = lo_x.min(ix);
            hi_x = hi_x.max(ix);
            lo_y = lo_y.min(iy);
            hi_y = hi_y.max(iy);
        }
        // slice sums must vanish for the kernel (row + column functions) to
        // be invariant
        for ix in lo_x..=hi_x {
            let s: f64 = row
                .iter()
                .filter(|&&(k, _)| k / ny == ix)
                .map(|&(_, v)| v)
                .sum();
            if s.abs() > 1e-9 * scale_ref {
                exact = false;
            }
        }
        for iy in lo_y..=hi_y {
            let s: f64 = row
                .iter()
                .filter(|&&(k, _)| k % ny == iy)
                .map(|&(_, v)| v)
                .sum();
            if s.abs() > 1e-9 * scale_ref {
                exact = false;
            }
        }
        // c_{kl} = hx hy * sum_{ix > k, iy > l} r_{ix, iy}
        for k in lo_x.saturating_sub(1)..hi_x.min(nx - 2) + 1 {
            for l in lo_y.saturating_sub(1)..hi_y.min(ny - 2) + 1 {
                let s: f64 = row
                    .iter()
                    .filter(|&&(idx, _)| idx / ny > k && idx % ny > l)
                    .map(|&(_, v)| v)
                    .sum();
                let v = s * hx * hy;
                if v != 0.0 {
                    m.add_entry(row_idx, k * (ny - 1) + l, v);
                }
            }
        }
    }

    let (b, c) = metzler_split(&m);
    finish_intertwiner(a_h, phi, b, c, exact)
}

/// Split M into its Metzler part (off-diagonal nonnegative entries plus the
/// full diagonal) and the remainder of negative off-diagonal entries.
/// Entries within the telescoping round-off of zero stay in B so the
/// C >= 0 certificate is not spoiled by cancellation noise.
fn metzler_split(m: &GridOperator) -> (GridOperator, GridOperator) {
    let n = m.nrows();
    let eps = 1e-12 * m.max_abs();
    let mut b = GridOperator::zeros(n, m.ncols(), OperatorKind::Generator);
    let mut c = GridOperator::zeros(n, m.ncols(), OperatorKind::General);
    for i in 0..n {
        for &(j, v) in m.row(i) {
            if i == j || v >= -eps {
                b.add_entry(i, j, v);
            } else {
                c.add_entry(i, j, v);
            }
        }
    }
    (b, c)
}

fn finish_intertwiner(
    a_h: &GridOperator,
    phi: &DiscreteOrderMap,
    b: GridOperator,
    c: GridOperator,
    exact: bool,
) -> Result<DiscreteIntertwiner, DiscretizeError> {
    let phi_m = phi.matrix();
    let lhs = phi_m.matmul(a_h);
    let rhs = b.add(&c).matmul(&phi_m);
    let residual = lhs.sub(&rhs).max_abs();
    let c_negative_witness = c.negative_entry(0.0);
    Ok(DiscreteIntertwiner {
        b,
        c,
        residual,
        exact: exact && residual <= 1e-10 * (1.0 + a_h.max_abs()),
        c_negative_witness,
    })
}

// ---------------------------------------------------------------------------
// Two-dimensional tensor grids
// ---------------------------------------------------------------------------

/// Uniform tensor grid on a box; state index is `ix * ny + iy`.
#[derive(Debug, Clone)]
pub struct Grid2d {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub hx: f64,
    pub hy: f64,
}

impl Grid2d {
    pub fn uniform(box2: [(f64, f64); 2], cells: [usize; 2]) -> Result<Grid2d, DiscretizeError> {
        if cells[0] < 4 || cells[1] < 4 {
            return Err(DiscretizeError::GridTooSmall(cells[0].min(cells[1])));
        }
        let n_states = (cells[0] + 1) * (cells[1] + 1);
        if n_states > 64 * 64 {
            return Err(DiscretizeError::TooLarge(n_states, 64 * 64));
        }
        let hx = (box2[0].1 - box2[0].0) / cells[0] as f64;
        let hy = (box2[1].1 - box2[1].0) / cells[1] as f64;
        Ok(Grid2d {
            xs: (0..=cells[0]).map(|i| box2[0].0 + hx * i as f64).collect(),
            ys: (0..=cells[1]).map(|i| box2[1].0 + hy * i as f64).collect(),
            hx,
            hy,
        })
    }

    pub fn nx(&self) -> usize {
        self.xs.len()
    }

    pub fn ny(&self) -> usize {
        self.ys.len()
    }

    pub fn n_states(&self) -> usize {
        self.nx() * self.ny()
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        ix * self.ny() + iy
    }

    pub fn point(&self, state: usize) -> [f64; 2] {
        let ny = self.ny();
        [self.xs[state / ny], self.ys[state % ny]]
    }
}

/// Discrete order map for a single multi-index on a 2-d tensor grid:
/// axis forward differences for a first-order index, the mixed forward
/// difference for the supermodular index `(1,1)`.
pub fn build_phi_md(
    alpha: &MultiIndex,
    grid: &Grid2d,
) -> Result<DiscreteOrderMap, DiscretizeError> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let idx = |ix: usize, iy: usize| ix * ny + iy;
    let entries = alpha.entries();
    let block = if entries == [1, 1] {
        let mut s = GridOperator::zeros((nx - 1) * (ny - 1), nx * ny, OperatorKind::OrderMap);
        for ix in 0..nx - 1 {
            for iy in 0..ny - 1 {
                let row = ix * (ny - 1) + iy;
                s.add_entry(row, idx(ix + 1, iy + 1), 1.0);
                s.add_entry(row, idx(ix + 1, iy), -1.0);
                s.add_entry(row, idx(ix, iy + 1), -1.0);
                s.add_entry(row, idx(ix, iy), 1.0);
            }
        }
        PhiBlock {
            stencil: s,
            scale: 1.0 / (grid.hx * grid.hy),
            kind: PhiBlockKind::Mixed2d,
            meta: Some(MixedMeta {
                nx,
                ny,
                hx: grid.hx,
                hy: grid.hy,
            }),
        }
    } else if entries == [1, 0] || entries == [0, 1] {
        let along_x = entries == [1, 0];
        let (rows, h) = if along_x {
            ((nx - 1) * ny, grid.hx)
        } else {
            (nx * (ny - 1), grid.hy)
        };
        let mut s = GridOperator::zeros(rows, nx * ny, OperatorKind::OrderMap);
        let mut row = 0;
        for ix in 0..nx {
            for iy in 0..ny {
                if along_x && ix + 1 < nx {
                    s.add_entry(row, idx(ix + 1, iy), 1.0);
                    s.add_entry(row, idx(ix, iy), -1.0);
                    row += 1;
                } else if !along_x && iy + 1 < ny {
                    s.add_entry(row, idx(ix, iy + 1), 1.0);
                    s.add_entry(row, idx(ix, iy), -1.0);
                    row += 1;
                }
            }
        }
        PhiBlock {
            stencil: s,
            scale: 1.0 / h,
            kind: PhiBlockKind::ForwardDiff,
            meta: None,
        }
    } else {
        return Err(DiscretizeError::UnsupportedOrderMap(
            "2-d order maps support indices (1,0), (0,1) and (1,1)",
        ));
    };
    Ok(DiscreteOrderMap {
        blocks: vec![block],
    })
}

/// Monotone 9-point discretization of a 2-d elliptic operator: cross terms
/// split by sign into diagonal-neighbor jumps, axis rates upwinded. Rows are
/// Metzler with zero row sums; jumps leaving the grid are folded into the
/// diagonal (reflecting truncation).
pub fn build_generator_md(
    coeffs: &CoefficientField,
    grid: &Grid2d,
) -> Result<GridOperator, DiscretizeError> {
    if coeffs.dim() != 2 {
        return Err(DiscretizeError::UnsupportedOrderMap(
            "the monotone stencil generator is desk-scale 2-d only",
        ));
    }
    let (nx, ny) = (grid.nx(), grid.ny());
    let n = nx * ny;
    let (hx, hy) = (grid.hx, grid.hy);
    let mut a_h = GridOperator::zeros(n, n, OperatorKind::Generator);

    for ix in 0..nx {
        for iy in 0..ny {
            let state = grid.index(ix, iy);
            let p = [grid.xs[ix], grid.ys[iy]];
            let eval = |e: &crate::expr::Expr| -> Result<f64, DiscretizeError> {
                e.evaluate(&p).map_err(|source| DiscretizeError::Eval {
                    at: p.to_vec(),
                    source,
                })
            };
            let a11 = eval(coeffs.a(0, 0))?;
            let a22 = eval(coeffs.a(1, 1))?;
            let a12 = eval(coeffs.a(0, 1))?;
            let b1 = eval(coeffs.b(0))?;
            let b2 = eval(coeffs.b(1))?;
            if a12.abs() > a11.min(a22) + 1e-12 {
                return Err(DiscretizeError::StencilPositivity {
                    at: p.to_vec(),
                    a12: a12.abs(),
                    axis: a11.min(a22),
                });
            }

            let mut push = |dx: i64, dy: i64, rate: f64| {
                if rate == 0.0 {
                    return;
                }
                let jx = ix as i64 + dx;
                let jy = iy as i64 + dy;
                if jx < 0 || jy < 0 || jx >= nx as i64 || jy >= ny as i64 {
                    // reflecting truncation: fold the jump into the diagonal
                    return;
                }
                let target = grid.index(jx as usize, jy as usize);
                a_h.add_entry(state, target, rate);
                a_h.add_entry(state, state, -rate);
            };

            let cross = a12.abs() / (2.0 * hx * hy);
            if a12 >= 0.0 {
                push(1, 1, cross);
                push(-1, -1, cross);
            } else {
                push(1, -1, cross);
                push(-1, 1, cross);
            }
            let ax = (a11 - a12.abs()) / (2.0 * hx * hx);
            let ay = (a22 - a12.abs()) / (2.0 * hy * hy);
            push(1, 0, ax + b1.max(0.0) / hx);
            push(-1, 0, ax + (-b1).max(0.0) / hx);
            push(0, 1, ay + b2.max(0.0) / hy);
            push(0, -1, ay + (-b2).max(0.0) / hy);
        }
    }
    Ok(a_h)
}
