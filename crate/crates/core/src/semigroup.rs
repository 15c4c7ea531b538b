//! Resolvent solves, semigroup evolution and the verification pipelines:
//! the fundamental resolvent bound, the Neumann series U_lambda, monotonicity
//! certification, two-semigroup comparison, and Gillespie cross-validation.
//!
//! The continuum theory needs a density condition (cone members approximable
//! from the operator domain); on the finite state spaces verified here every
//! cone is finite-dimensional and closed, so that condition is vacuous and
//! no check is emitted for it.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::diffusion1d::{derive_bc, DiffusionModel};
use crate::discretize::{
    build_generator, build_generator_gamma0, build_generator_md, build_phi, build_phi_md,
    derive_discrete_intertwiner, grid_for_model, DiscreteOrderMap, DiscretizeError, Grid2d,
    GridOperator, OperatorKind, PhiBlockKind,
};
use crate::multid::{CoefficientField, IndexSet};
use crate::order::{generate_test_family, DiffusionOrder, Distribution, FamilyDomain, OrderSpec};
use crate::par;
use crate::report::{CheckRecord, CheckStatus, VerificationReport, Witness};

#[derive(Debug, Clone, Error)]
pub enum SemigroupError {
    #[error("operator must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("resolvent requires lambda > 0, got {0}")]
    BadLambda(f64),
    #[error("linear system is singular or numerically unstable")]
    Singular,
    #[error("solve residual {residual} exceeds tolerance {tol}")]
    SolveResidual { residual: f64, tol: f64 },
    #[error(
        "lambda = {lambda} is at or beyond the series bound lambda0 = {lambda0} \
         (norm estimate |C| |R(lambda,B)|)"
    )]
    SeriesDivergence { lambda: f64, lambda0: f64 },
    #[error("series did not converge within kmax = {kmax} terms")]
    SeriesNonConvergence { kmax: usize },
    #[error("dimension {0} exceeds the uniformization limit {1}; use yosida_evolve")]
    TooLargeForExpm(usize, usize),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("discretization failed: {0}")]
    Discretize(#[from] DiscretizeError),
    #[error(
        "row {row} of the generator difference is not expressible through the order map \
         (defect {defect})"
    )]
    DecompositionDefect { row: usize, defect: f64 },
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

// ---------------------------------------------------------------------------
// Linear solves and the resolvent cache
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum Factorization {
    /// Thomas factorization of a diagonally dominant tridiagonal system.
    Tridiag {
        lower: Vec<f64>,
        diag: Vec<f64>,
        upper: Vec<f64>,
    },
    Dense(Box<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>),
}

impl Factorization {
    fn solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        match self {
            Factorization::Tridiag { lower, diag, upper } => {
                let n = diag.len();
                let mut c = vec![0.0; n];
                let mut d = vec![0.0; n];
                let mut denom = diag[0];
                if denom == 0.0 {
                    return None;
                }
                c[0] = upper[0] / denom;
                d[0] = rhs[0] / denom;
                for i in 1..n {
                    denom = diag[i] - lower[i] * c[i - 1];
                    if denom == 0.0 {
                        return None;
                    }
                    c[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
                    d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
                }
                let mut x = d;
                for i in (0..n - 1).rev() {
                    x[i] -= c[i] * x[i + 1];
                }
                Some(x)
            }
            Factorization::Dense(lu) => {
                let b = nalgebra::DVector::from_column_slice(rhs);
                lu.solve(&b).map(|x| x.as_slice().to_vec())
            }
        }
    }
}

/// Extract (lower, diag, upper) bands when the matrix is tridiagonal and
/// strictly diagonally dominant, so the Thomas path is stable.
fn tridiag_bands(m: &GridOperator) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = m.nrows();
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    for i in 0..n {
        for &(j, v) in m.row(i) {
            if j == i {
                diag[i] = v;
            } else if j + 1 == i {
                lower[i] = v;
            } else if j == i + 1 {
                upper[i] = v;
            } else {
                return None;
            }
        }
        if diag[i].abs() < lower[i].abs() + upper[i].abs() {
            return None;
        }
    }
    Some((lower, diag, upper))
}

/// Cache of factorized `(I - lambda A)` systems, keyed by the bits of
/// lambda. Safe for concurrent use; factorizations are shared.
pub struct ResolventCache<'a> {
    a: &'a GridOperator,
    cache: Mutex<HashMap<u64, Arc<Factorization>>>,
}

impl<'a> ResolventCache<'a> {
    pub fn new(a: &'a GridOperator) -> Result<ResolventCache<'a>, SemigroupError> {
        if !a.is_square() {
            return Err(SemigroupError::NotSquare(a.nrows(), a.ncols()));
        }
        Ok(ResolventCache {
            a,
            cache: Mutex::new(HashMap::new()),
        })
    }

    fn factorization(&self, lambda: f64) -> Result<Arc<Factorization>, SemigroupError> {
        if let Some(f) = self.cache.lock().unwrap().get(&lambda.to_bits()) {
            return Ok(f.clone());
        }
        let system = GridOperator::identity(self.a.nrows()).sub(&self.a.scale(lambda));
        let fact = if let Some((lower, diag, upper)) = tridiag_bands(&system) {
            Factorization::Tridiag { lower, diag, upper }
        } else {
            let lu = system.to_dense().lu();
            Factorization::Dense(Box::new(lu))
        };
        let fact = Arc::new(fact);
        self.cache
            .lock()
            .unwrap()
            .insert(lambda.to_bits(), fact.clone());
        Ok(fact)
    }

    /// Solve `(I - lambda A) f = g` with iterative refinement down to the
    /// backward-error floor `1e-12 (|g| + (1 + lambda |A|) |f|)`, which
    /// reduces to `1e-12 |g|` for systems of moderate norm.
    pub fn solve(&self, lambda: f64, g: &[f64]) -> Result<Vec<f64>, SemigroupError> {
        if !(lambda > 0.0) {
            return Err(SemigroupError::BadLambda(lambda));
        }
        let fact = self.factorization(lambda)?;
        let mut f = fact.solve(g).ok_or(SemigroupError::Singular)?;
        let system_norm = 1.0 + lambda * self.a.norm_inf();
        let tol_for = |f: &[f64]| 1e-12 * (norm_inf(g) + system_norm * norm_inf(f)) + 1e-300;
        for _ in 0..2 {
            let res = self.residual(lambda, &f, g);
            if norm_inf(&res) <= tol_for(&f) {
                return Ok(f);
            }
            let corr = fact.solve(&res).ok_or(SemigroupError::Singular)?;
            for (fi, ci) in f.iter_mut().zip(&corr) {
                *fi += ci;
            }
        }
        let res = norm_inf(&self.residual(lambda, &f, g));
        let tol = tol_for(&f);
        if res <= tol {
            Ok(f)
        } else {
            Err(SemigroupError::SolveResidual { residual: res, tol })
        }
    }

    fn residual(&self, lambda: f64, f: &[f64], g: &[f64]) -> Vec<f64> {
        let af = self.a.matvec(f);
        f.iter()
            .zip(&af)
            .zip(g)
            .map(|((fi, afi), gi)| gi - (fi - lambda * afi))
            .collect()
    }
}

/// One-shot resolvent solve `R(lambda, A) g = (I - lambda A)^{-1} g`.
pub fn resolvent(a_h: &GridOperator, lambda: f64, g: &[f64]) -> Result<Vec<f64>, SemigroupError> {
    ResolventCache::new(a_h)?.solve(lambda, g)
}

// ---------------------------------------------------------------------------
// Semigroup evolution
// ---------------------------------------------------------------------------

const EXPM_DIM_LIMIT: usize = 4096;

/// `e^{tA} f` by uniformization: with `L >= max |A_ii|` the matrix
/// `P = I + A/L` has nonnegative entries and the exponential is the Poisson
/// mixture `sum_k e^{-Lt} (Lt)^k / k! P^k f`, truncated at mass `1e-15`.
pub fn expm_apply(a_h: &GridOperator, t: f64, f: &[f64]) -> Result<Vec<f64>, SemigroupError> {
    if !a_h.is_square() {
        return Err(SemigroupError::NotSquare(a_h.nrows(), a_h.ncols()));
    }
    if a_h.nrows() > EXPM_DIM_LIMIT {
        return Err(SemigroupError::TooLargeForExpm(a_h.nrows(), EXPM_DIM_LIMIT));
    }
    if t == 0.0 {
        return Ok(f.to_vec());
    }
    if !(t > 0.0) {
        return Err(SemigroupError::Precondition(format!(
            "time must be nonnegative, got {t}"
        )));
    }
    let rate = a_h.max_diag_abs();
    if rate == 0.0 {
        // Metzler with zero diagonal and nonpositive row sums means A = 0
        return Ok(f.to_vec());
    }
    let p = GridOperator::identity(a_h.nrows()).add(&a_h.scale(1.0 / rate));
    let lt = rate * t;
    let kmax = (lt + 60.0 * (lt + 1.0).sqrt() + 60.0) as usize;

    let mut out = vec![0.0; f.len()];
    let mut v = f.to_vec();
    let mut log_w = -lt;
    let mut cumulative = 0.0;
    for k in 0..=kmax {
        if k > 0 {
            v = p.matvec(&v);
            log_w += lt.ln() - (k as f64).ln();
        }
        let w = log_w.exp();
        if w > 0.0 {
            for (o, vi) in out.iter_mut().zip(&v) {
                *o += w * vi;
            }
        }
        cumulative += w;
        if cumulative >= 1.0 - 1e-15 && k as f64 >= lt {
            break;
        }
    }
    if a_h.kind == OperatorKind::Generator {
        // sub-stochastic contraction sanity
        debug_assert!(norm_inf(&out) <= norm_inf(f) * (1.0 + 1e-9) + 1e-12);
    }
    Ok(out)
}

/// Row `state` of `e^{tA}` as a sub-probability distribution (for
/// generators): evolves the indicator through the transposed operator.
pub fn expm_row(a_h: &GridOperator, t: f64, state: usize) -> Result<Distribution, SemigroupError> {
    let n = a_h.nrows();
    let mut e = vec![0.0; n];
    e[state] = 1.0;
    let at = a_h.transpose();
    let mut row: Vec<f64> = expm_apply(&at, t, &e)?
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let live: f64 = row.iter().sum();
    if live > 1.0 {
        // uniformization round-off can overshoot unit mass by ~1e-12
        for v in &mut row {
            *v /= live;
        }
    }
    let killed = (1.0 - row.iter().sum::<f64>()).max(0.0);
    Distribution::new(row, killed)
        .map_err(|e| SemigroupError::Precondition(format!("expm row not a distribution: {e}")))
}

/// Yosida-approximated evolution `e^{t A_n} f` with
/// `A_n = n (R(1/n, A) - I)`, computed as the Poisson-weighted series of
/// resolvent powers, truncated when the Poisson tail drops below `1e-14`.
pub fn yosida_evolve(
    a_h: &GridOperator,
    t: f64,
    f: &[f64],
    n: u64,
) -> Result<Vec<f64>, SemigroupError> {
    if t == 0.0 {
        return Ok(f.to_vec());
    }
    if !(t >= 0.0) || n == 0 {
        return Err(SemigroupError::Precondition(format!(
            "need t >= 0 and n >= 1, got t = {t}, n = {n}"
        )));
    }
    let cache = ResolventCache::new(a_h)?;
    let lambda = 1.0 / n as f64;
    let tn = t * n as f64;
    let kmax = (tn + 60.0 * (tn + 1.0).sqrt() + 60.0) as usize;
    let mut out = vec![0.0; f.len()];
    let mut v = f.to_vec();
    let mut log_w = -tn;
    let mut cumulative = 0.0;
    for k in 0..=kmax {
        if k > 0 {
            v = cache.solve(lambda, &v)?;
            log_w += tn.ln() - (k as f64).ln();
        }
        let w = log_w.exp();
        if w > 0.0 {
            for (o, vi) in out.iter_mut().zip(&v) {
                *o += w * vi;
            }
        }
        cumulative += w;
        if 1.0 - cumulative < 1e-14 && k as f64 >= tn {
            break;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// The Neumann series U_lambda
// ---------------------------------------------------------------------------

/// `U_lambda g = sum_k (lambda C R(lambda, B))^k g`, valid below
/// `lambda0 = 1 / (|C| |R(lambda,B)|)` in the induced max-norm.
pub fn compute_u_lambda(
    b_h: &GridOperator,
    c_h: &GridOperator,
    lambda: f64,
    g: &[f64],
    kmax: usize,
) -> Result<Vec<f64>, SemigroupError> {
    let cache = ResolventCache::new(b_h)?;
    let norm_c = c_h.norm_inf();
    let ones = vec![1.0; b_h.nrows()];
    let r_ones = cache.solve(lambda, &ones)?;
    let norm_r = norm_inf(&r_ones);
    let lambda0 = if norm_c * norm_r == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (norm_c * norm_r)
    };
    if lambda >= lambda0 {
        return Err(SemigroupError::SeriesDivergence { lambda, lambda0 });
    }

    let g_norm = norm_inf(g) + 1e-300;
    let mut sum = g.to_vec();
    let mut term = g.to_vec();
    let mut converged = false;
    for _ in 0..kmax {
        let rb = cache.solve(lambda, &term)?;
        term = c_h.matvec(&rb).iter().map(|v| lambda * v).collect();
        for (s, t) in sum.iter_mut().zip(&term) {
            *s += t;
        }
        if norm_inf(&term) < 1e-13 * g_norm {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SemigroupError::SeriesNonConvergence { kmax });
    }
    // verify (I - lambda C R(lambda,B)) sum = g
    let rb = cache.solve(lambda, &sum)?;
    let crb = c_h.matvec(&rb);
    let residual: f64 = sum
        .iter()
        .zip(&crb)
        .zip(g)
        .map(|((s, c), gi)| (s - lambda * c - gi).abs())
        .fold(0.0, f64::max);
    if residual > 1e-10 * g_norm {
        return Err(SemigroupError::SolveResidual {
            residual,
            tol: 1e-10 * g_norm,
        });
    }
    Ok(sum)
}

// ---------------------------------------------------------------------------
// Fundamental bound
// ---------------------------------------------------------------------------

/// Check the resolvent-level bound behind the main intertwining theorem: for
/// cone samples `g` (`Phi g >= 0`),
/// `Phi R(lambda,A) g >= R(lambda,B) Phi g >= 0` when `C >= 0`, plus the
/// chain identity `R(lambda,B) U_lambda Phi g = Phi R(lambda,A) g`.
pub fn verify_fundamental_bound(
    a_h: &GridOperator,
    b_h: &GridOperator,
    c_h: &GridOperator,
    phi: &DiscreteOrderMap,
    lambda: f64,
    cone_samples: &[Vec<f64>],
) -> Result<VerificationReport, SemigroupError> {
    let mut report = VerificationReport::new(format!("fundamental bound at lambda = {lambda}"));
    let a_cache = ResolventCache::new(a_h)?;
    let b_cache = ResolventCache::new(b_h)?;
    let c_nonneg = c_h.negative_entry(0.0).is_none();
    let m_h = b_h.add(c_h);
    let m_cache = ResolventCache::new(&m_h)?;

    for (idx, g) in cone_samples.iter().enumerate() {
        let scale = norm_inf(g) + 1e-300;
        let eps = 1e-9 * scale;
        let phi_g = phi.apply(g);
        if phi_g.iter().any(|v| *v < -1e-12 * scale) {
            return Err(SemigroupError::Precondition(format!(
                "cone sample {idx} has Phi g < 0"
            )));
        }
        let ra_g = a_cache.solve(lambda, g)?;
        let lhs = phi.apply(&ra_g);

        // route (i): positivity of Phi R(lambda,A) g
        let min_lhs = lhs.iter().copied().fold(f64::INFINITY, f64::min);
        report.push(if min_lhs >= -eps {
            CheckRecord::pass(format!("sample {idx}: Phi R(lambda,A)g >= 0"))
                .with_margin(min_lhs, eps)
        } else {
            CheckRecord::fail(
                format!("sample {idx}: Phi R(lambda,A)g >= 0"),
                Witness::new(
                    format!(
                        "entry {}",
                        lhs.iter()
                            .enumerate()
                            .min_by(|a, b| a.1.total_cmp(b.1))
                            .unwrap()
                            .0
                    ),
                    min_lhs,
                ),
            )
        });

        // route (ii): the B-relative lower bound, meaningful when C >= 0
        if c_nonneg {
            let rhs = b_cache.solve(lambda, &phi_g)?;
            let mut worst = f64::INFINITY;
            let mut worst_at = 0;
            for (i, (l, r)) in lhs.iter().zip(&rhs).enumerate() {
                if l - r < worst {
                    worst = l - r;
                    worst_at = i;
                }
            }
            report.push(if worst >= -eps {
                CheckRecord::pass(format!(
                    "sample {idx}: Phi R(lambda,A)g >= R(lambda,B) Phi g"
                ))
                .with_margin(worst, eps)
            } else {
                CheckRecord::fail(
                    format!("sample {idx}: Phi R(lambda,A)g >= R(lambda,B) Phi g"),
                    Witness::new(format!("entry {worst_at}"), worst),
                )
            });
        }

        // chain identity R(lambda,B) U_lambda Phi g = Phi R(lambda,A) g.
        // U_lambda Phi g comes from the series below its norm bound and from
        // the algebraic route R(lambda,B) U_lambda = R(lambda,B+C) otherwise.
        let chain = match compute_u_lambda(b_h, c_h, lambda, &phi_g, 10_000) {
            Ok(u) => b_cache.solve(lambda, &u)?,
            Err(SemigroupError::SeriesDivergence { .. }) => m_cache.solve(lambda, &phi_g)?,
            Err(e) => return Err(e),
        };
        let gap = lhs
            .iter()
            .zip(&chain)
            .map(|(l, c)| (l - c).abs())
            .fold(0.0, f64::max);
        report.push(if gap <= 1e-9 * scale.max(norm_inf(&lhs)) {
            CheckRecord::pass(format!("sample {idx}: chain identity")).with_margin(gap, 1e-9)
        } else {
            CheckRecord::fail(
                format!("sample {idx}: chain identity"),
                Witness::new("max deviation", gap),
            )
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Monotonicity certification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Certified,
    Refuted,
    Inconclusive,
}

/// Structured verdict of the full pipeline with every recorded residual.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MonotonicityCertificate {
    pub model_id: String,
    pub order: String,
    pub lambdas: Vec<f64>,
    pub times: Vec<f64>,
    pub intertwiner_residual: f64,
    pub c_nonnegative: bool,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
    pub report: VerificationReport,
}

#[derive(Debug, Clone)]
pub struct CertifyOptions {
    pub grid_cells: usize,
    pub lambdas: Vec<f64>,
    pub times: Vec<f64>,
    pub family_size: usize,
    pub seed: u64,
    pub tol: f64,
    pub truncation_radius: Option<f64>,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            grid_cells: 100,
            lambdas: vec![0.01, 0.1, 1.0],
            times: vec![0.1, 1.0],
            family_size: 20,
            seed: 7,
            tol: 1e-9,
            truncation_radius: None,
        }
    }
}

/// Shared tail of the certification pipeline, once the generator, order map
/// and test family are on the table.
fn certify_discrete(
    model_id: String,
    order_name: String,
    a_h: &GridOperator,
    phi: &DiscreteOrderMap,
    family: &[Vec<f64>],
    opts: &CertifyOptions,
    mut report: VerificationReport,
) -> Result<MonotonicityCertificate, SemigroupError> {
    let it = derive_discrete_intertwiner(a_h, phi)?;
    let res_tol = 1e-10 * (1.0 + a_h.max_abs());
    report.push(if it.exact && it.residual <= res_tol {
        CheckRecord::pass("intertwining residual").with_margin(it.residual, res_tol)
    } else {
        CheckRecord::fail(
            "intertwining residual",
            Witness::new("max-norm mismatch", it.residual),
        )
    });

    // Falling drift puts negative increments into the structural C; when the
    // whole intertwined operator is Metzler those increments belong to B's
    // potential term (the continuum operator has C = 0 there), so certify
    // against the folded split B = M, C = 0.
    let (b_mat, c_mat) = {
        let m = it.m();
        if it.c_negative_witness.is_some() && m.metzler_violation(1e-12 * m.max_abs()).is_none() {
            report.push(CheckRecord::pass("C_h >= 0 entrywise").with_detail(
                "drift increments folded into the potential of B (M is Metzler, C = 0)",
            ));
            let zero = GridOperator::zeros(m.nrows(), m.ncols(), OperatorKind::General);
            (m, zero)
        } else {
            report.push(match it.c_negative_witness {
                None => CheckRecord::pass("C_h >= 0 entrywise"),
                Some((i, j, v)) => {
                    CheckRecord::fail("C_h >= 0 entrywise", Witness::new(format!("C[{i},{j}]"), v))
                }
            });
            (it.b.clone(), it.c.clone())
        }
    };

    // resolvent positivity of B on basis vectors
    let b_cache = ResolventCache::new(&b_mat)?;
    let nb = b_mat.nrows();
    for &lambda in &opts.lambdas {
        let mut worst = f64::INFINITY;
        let mut worst_at = (0, 0);
        let mut solvable = true;
        for j in 0..nb {
            let mut e = vec![0.0; nb];
            e[j] = 1.0;
            match b_cache.solve(lambda, &e) {
                Ok(col) => {
                    for (i, v) in col.iter().enumerate() {
                        if *v < worst {
                            worst = *v;
                            worst_at = (i, j);
                        }
                    }
                }
                Err(_) => {
                    solvable = false;
                    break;
                }
            }
        }
        let name = format!("R(lambda={lambda}, B) positivity");
        report.push(if !solvable {
            CheckRecord::fail(name, Witness::new("factorization failed", f64::NAN))
        } else if worst >= -opts.tol {
            CheckRecord::pass(name).with_margin(worst, opts.tol)
        } else {
            CheckRecord::fail(
                name,
                Witness::new(format!("entry ({}, {})", worst_at.0, worst_at.1), worst),
            )
        });
    }

    // fundamental bound over the cone family
    for &lambda in &opts.lambdas {
        let fb = verify_fundamental_bound(a_h, &b_mat, &c_mat, phi, lambda, family)?;
        report.extend(fb);
    }

    // semigroup spot checks: Phi e^{tA} f >= -tol for cone members, in
    // parallel over the family
    let mut semigroup_violation: Option<Witness> = None;
    for &t in &opts.times {
        let margins: Vec<Result<(f64, usize), SemigroupError>> = par::map_slice(family, |f| {
            let evolved = expm_apply(a_h, t, f)?;
            let phi_ev = phi.apply(&evolved);
            let (at, margin) = phi_ev
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, v)| (i, *v))
                .unwrap_or((0, f64::INFINITY));
            Ok((margin, at))
        });
        for (idx, res) in margins.into_iter().enumerate() {
            let (margin, at) = res?;
            let scale = norm_inf(&family[idx]) + 1e-300;
            let name = format!("Phi e^(tA) f >= 0 at t = {t}, member {idx}");
            if margin >= -opts.tol * scale {
                report.push(CheckRecord::pass(name).with_margin(margin, opts.tol * scale));
            } else {
                let w = Witness::new(format!("t = {t}, member {idx}, entry {at}"), margin);
                if semigroup_violation.is_none() {
                    semigroup_violation = Some(w.clone());
                }
                report.push(CheckRecord::fail(name, w));
            }
        }
    }

    let verdict = decide_verdict(&report, semigroup_violation.as_ref());
    let witness = match verdict {
        Verdict::Certified => None,
        _ => semigroup_violation.or_else(|| {
            report
                .first_failure()
                .and_then(|c| c.witness.clone())
                .or(Some(Witness::new("see report", f64::NAN)))
        }),
    };
    Ok(MonotonicityCertificate {
        model_id,
        order: order_name,
        lambdas: opts.lambdas.clone(),
        times: opts.times.clone(),
        intertwiner_residual: it.residual,
        c_nonnegative: c_mat.negative_entry(0.0).is_none(),
        verdict,
        witness,
        report,
    })
}

fn decide_verdict(report: &VerificationReport, semigroup_violation: Option<&Witness>) -> Verdict {
    let admissibility_failed = report
        .checks
        .iter()
        .any(|c| c.status == CheckStatus::Fail && c.name.starts_with("admissibility"));
    if admissibility_failed || semigroup_violation.is_some() {
        return Verdict::Refuted;
    }
    if report.has_failure() || report.has_undecided() {
        return Verdict::Inconclusive;
    }
    Verdict::Certified
}

/// Full 1-d pipeline: symbolic admissibility, generator and order-map
/// assembly, discrete intertwiner, resolvent positivity, fundamental bound
/// on a generated cone family, and semigroup spot checks.
pub fn certify_monotonicity(
    model: &DiffusionModel,
    order: DiffusionOrder,
    opts: &CertifyOptions,
) -> Result<MonotonicityCertificate, SemigroupError> {
    let mut report = VerificationReport::new("monotonicity certificate");
    let derived = derive_bc(model, order);
    for check in &derived.admissibility.checks {
        let mut c = check.clone();
        c.name = format!("admissibility: {}", c.name);
        report.push(c);
    }

    let grid = grid_for_model(model, opts.grid_cells, opts.truncation_radius)?;
    if let Some(tr) = &grid.truncation {
        report.push(
            CheckRecord::pass("interval truncation").with_detail(format!(
            "infinite interval truncated at radius {} with reflecting rows (left: {}, right: {})",
            tr.radius, tr.left, tr.right
        )),
        );
    }
    let a_h = match order {
        DiffusionOrder::Increasing => build_generator(model, &grid)?,
        DiffusionOrder::Convex | DiffusionOrder::IncreasingConvex => {
            match build_generator_gamma0(model, &grid) {
                Ok(a) => a,
                Err(DiscretizeError::NegativeRate { state, value }) => {
                    // drift sign hypothesis violated at a boundary; already
                    // reported by derive_bc, surface the refutation
                    report.push(CheckRecord::fail(
                        "admissibility: boundary drift row positivity",
                        Witness::new(format!("state {state}"), value),
                    ));
                    return finish_refuted(model_hash(model), order, opts, report);
                }
                Err(e) => return Err(e.into()),
            }
        }
    };
    if derived.admissibility.has_failure() {
        return finish_refuted(model_hash(model), order, opts, report);
    }
    let phi = build_phi(order, &grid)?;
    let order_spec = match order {
        DiffusionOrder::Increasing => OrderSpec::Increasing,
        DiffusionOrder::Convex => OrderSpec::Convex,
        DiffusionOrder::IncreasingConvex => OrderSpec::IncreasingConvex,
    };
    let family = generate_test_family(
        &order_spec,
        &FamilyDomain::Grid1d(grid.points.clone()),
        opts.family_size,
        opts.seed,
    );
    certify_discrete(
        model_hash(model),
        order.as_str().to_string(),
        &a_h,
        &phi,
        &family,
        opts,
        report,
    )
}

fn finish_refuted(
    model_id: String,
    order: DiffusionOrder,
    opts: &CertifyOptions,
    report: VerificationReport,
) -> Result<MonotonicityCertificate, SemigroupError> {
    let witness = report.first_failure().and_then(|c| c.witness.clone());
    Ok(MonotonicityCertificate {
        model_id,
        order: order.as_str().to_string(),
        lambdas: opts.lambdas.clone(),
        times: opts.times.clone(),
        intertwiner_residual: f64::NAN,
        c_nonnegative: false,
        verdict: Verdict::Refuted,
        witness,
        report,
    })
}

fn model_hash(model: &DiffusionModel) -> String {
    format!(
        "diffusion1d[{},{}] a={} b={} c={}",
        model.l, model.r, model.a, model.b, model.c
    )
}

/// 2-d pipeline for a single-index order (axis-increasing or supermodular):
/// symbolic coefficient conditions, monotone stencil generator, mixed order
/// map, and the shared discrete certification tail.
pub fn certify_monotonicity_md(
    coeffs: &CoefficientField,
    index_set: &IndexSet,
    grid: &Grid2d,
    opts: &CertifyOptions,
) -> Result<MonotonicityCertificate, SemigroupError> {
    if coeffs.dim() != 2 {
        return Err(SemigroupError::Precondition(format!(
            "the numeric pipeline is desk-scale 2-d; got dimension {}",
            coeffs.dim()
        )));
    }
    let mut report = VerificationReport::new("monotonicity certificate (2-d)");
    let box_lo = [grid.xs[0], grid.ys[0]];
    let box_hi = [*grid.xs.last().unwrap(), *grid.ys.last().unwrap()];
    let samples = crate::multid::halton_samples(2, &box_lo, &box_hi, 200);
    let gb = crate::multid::check_gammabed(
        coeffs,
        index_set,
        &samples,
        crate::multid::CheckMode::SymbolicFirst,
    );
    for check in &gb.checks {
        let mut c = check.clone();
        c.name = format!("admissibility: {}", c.name);
        report.push(c);
    }
    if index_set.indices().len() != 1 {
        return Err(SemigroupError::Precondition(
            "the discrete 2-d pipeline certifies single-index orders; \
             multi-index sets are checked symbolically via check_gammabed"
                .to_string(),
        ));
    }
    let alpha = &index_set.indices()[0];
    let a_h = build_generator_md(coeffs, grid)?;
    let phi = build_phi_md(alpha, grid)?;
    let family = generate_test_family(
        &OrderSpec::MultiIndex(index_set.clone()),
        &FamilyDomain::Grid2d {
            nx: grid.nx(),
            ny: grid.ny(),
        },
        opts.family_size,
        opts.seed,
    );
    if report.has_failure() {
        let witness = report.first_failure().and_then(|c| c.witness.clone());
        return Ok(MonotonicityCertificate {
            model_id: "diffusion-2d".to_string(),
            order: format!("multi_index {alpha}"),
            lambdas: opts.lambdas.clone(),
            times: opts.times.clone(),
            intertwiner_residual: f64::NAN,
            c_nonnegative: false,
            verdict: Verdict::Refuted,
            witness,
            report,
        });
    }
    certify_discrete(
        "diffusion-2d".to_string(),
        format!("multi_index {alpha}"),
        &a_h,
        &phi,
        &family,
        opts,
        report,
    )
}

// ---------------------------------------------------------------------------
// Lower bound and comparison
// ---------------------------------------------------------------------------

/// Check `Phi e^{tA} f >= e^{tB} h` entrywise, given `Phi f >= h >= 0`.
pub fn verify_lower_bound(
    a_h: &GridOperator,
    b_h: &GridOperator,
    phi: &DiscreteOrderMap,
    f: &[f64],
    h_vec: &[f64],
    t: f64,
    tol: f64,
) -> Result<VerificationReport, SemigroupError> {
    let phi_f = phi.apply(f);
    if h_vec.iter().any(|v| *v < -1e-12) {
        return Err(SemigroupError::Precondition("h must be nonnegative".into()));
    }
    if phi_f.iter().zip(h_vec).any(|(pf, h)| pf - h < -1e-12) {
        return Err(SemigroupError::Precondition("need Phi f >= h".into()));
    }
    let mut report = VerificationReport::new(format!("lower bound at t = {t}"));
    let lhs = phi.apply(&expm_apply(a_h, t, f)?);
    let rhs = expm_apply(b_h, t, h_vec)?;
    let mut worst = f64::INFINITY;
    let mut worst_at = 0;
    for (i, (l, r)) in lhs.iter().zip(&rhs).enumerate() {
        if l - r < worst {
            worst = l - r;
            worst_at = i;
        }
    }
    report.push(if worst >= -tol {
        CheckRecord::pass("Phi e^(tA) f >= e^(tB) h").with_margin(worst, tol)
    } else {
        CheckRecord::fail(
            "Phi e^(tA) f >= e^(tB) h",
            Witness::new(format!("entry {worst_at}"), worst),
        )
    });
    Ok(report)
}

/// Exact decomposition `D = C Phi` of a generator difference through the
/// order map, requiring nonnegative coefficients to be meaningful. The
/// coefficient matrix is produced by the same telescoping as the
/// intertwiner; rows outside the row span are a structural error.
pub fn decompose_through_phi(
    d: &GridOperator,
    phi: &DiscreteOrderMap,
) -> Result<GridOperator, SemigroupError> {
    if phi.blocks.len() != 1 {
        return Err(SemigroupError::Precondition(
            "decomposition supports single-block order maps".into(),
        ));
    }
    let block = &phi.blocks[0];
    let n = d.nrows();
    let rows_phi = block.nrows();
    let mut c = GridOperator::zeros(n, rows_phi, OperatorKind::General);
    match block.kind {
        PhiBlockKind::ForwardDiff => {
            let h = 1.0 / block.scale;
            for i in 0..n {
                let row = d.row(i);
                let m0: f64 = row.iter().map(|&(_, v)| v).sum();
                if m0.abs() > 1e-9 * (1.0 + d.max_abs()) {
                    return Err(SemigroupError::DecompositionDefect { row: i, defect: m0 });
                }
                let mut running = 0.0;
                let mut idx = 0;
                let lo = row.first().map(|&(j, _)| j).unwrap_or(0);
                let hi = row.last().map(|&(j, _)| j).unwrap_or(0);
                for j in lo..hi.min(rows_phi) {
                    while idx < row.len() && row[idx].0 <= j {
                        running += row[idx].1;
                        idx += 1;
                    }
                    let v = -h * running;
                    if v != 0.0 {
                        c.add_entry(i, j, v);
                    }
                }
            }
        }
        PhiBlockKind::SecondDiff => {
            let h2 = 1.0 / block.scale;
            for i in 0..n {
                let row = d.row(i);
                let m0: f64 = row.iter().map(|&(_, v)| v).sum();
                let m1: f64 = row.iter().map(|&(k, v)| v * k as f64).sum();
                let scale_ref = 1.0 + d.max_abs();
                if m0.abs() > 1e-9 * scale_ref || m1.abs() > 1e-9 * scale_ref {
                    return Err(SemigroupError::DecompositionDefect {
                        row: i,
                        defect: m0.abs().max(m1.abs()),
                    });
                }
                if row.is_empty() {
                    continue;
                }
                let lo = row.first().unwrap().0;
                let hi = row.last().unwrap().0;
                for j in lo.saturating_sub(1).max(1)..=hi.min(rows_phi) {
                    let v: f64 = row
                        .iter()
                        .filter(|&&(k, _)| k > j)
                        .map(|&(k, v)| v * (k - j) as f64)
                        .sum();
                    let v = v * h2;
                    if v != 0.0 && j >= 1 && j - 1 < rows_phi {
                        c.add_entry(i, j - 1, v);
                    }
                }
            }
        }
        PhiBlockKind::Mixed2d => {
            return Err(SemigroupError::Precondition(
                "mixed 2-d decomposition is not supported".into(),
            ));
        }
    }
    // verify D = C Phi exactly
    let rhs = c.matmul(&block.matrix());
    let defect = d.sub(&rhs).max_abs();
    if defect > 1e-9 * (1.0 + d.max_abs()) {
        return Err(SemigroupError::DecompositionDefect { row: 0, defect });
    }
    Ok(c)
}

/// Check the comparison sandwich `e^{tA1} f <= e^{tA} f <= e^{tA2} f` for
/// cone functions, after verifying the decompositions
/// `(A2 - A) = C2 Phi`, `(A - A1) = C1 Phi` with nonnegative coefficients.
/// Also checks dominance of row distributions (initial-law propagation).
#[allow(clippy::too_many_arguments)]
pub fn verify_comparison(
    a1_h: &GridOperator,
    a_h: &GridOperator,
    a2_h: &GridOperator,
    phi: &DiscreteOrderMap,
    order: &OrderSpec,
    support: &[f64],
    cone_functions: &[Vec<f64>],
    t: f64,
) -> Result<VerificationReport, SemigroupError> {
    let mut report = VerificationReport::new(format!("comparison at t = {t}"));

    // structural decompositions (errors when not expressible at all)
    let c2 = decompose_through_phi(&a2_h.sub(a_h), phi)?;
    let c1 = decompose_through_phi(&a_h.sub(a1_h), phi)?;
    for (name, c) in [("C^(1) >= 0", &c1), ("C^(2) >= 0", &c2)] {
        report.push(match c.negative_entry(1e-12) {
            None => CheckRecord::pass(name),
            Some((i, j, v)) => {
                CheckRecord::fail(name, Witness::new(format!("entry ({i}, {j})"), v))
            }
        });
    }

    let results: Vec<Result<(usize, f64, f64), SemigroupError>> =
        par::map_indexed(cone_functions.len(), |idx| {
            let f = &cone_functions[idx];
            let s1 = expm_apply(a1_h, t, f)?;
            let s = expm_apply(a_h, t, f)?;
            let s2 = expm_apply(a2_h, t, f)?;
            let lower = s
                .iter()
                .zip(&s1)
                .map(|(m, l)| m - l)
                .fold(f64::INFINITY, f64::min);
            let upper = s2
                .iter()
                .zip(&s)
                .map(|(u, m)| u - m)
                .fold(f64::INFINITY, f64::min);
            Ok((idx, lower, upper))
        });
    for res in results {
        let (idx, lower, upper) = res?;
        let scale = norm_inf(&cone_functions[idx]) + 1e-300;
        let tol = 1e-9 * scale;
        report.push(if lower >= -tol {
            CheckRecord::pass(format!("member {idx}: e^(tA1) f <= e^(tA) f"))
                .with_margin(lower, tol)
        } else {
            CheckRecord::fail(
                format!("member {idx}: e^(tA1) f <= e^(tA) f"),
                Witness::new(format!("member {idx}"), lower),
            )
        });
        report.push(if upper >= -tol {
            CheckRecord::pass(format!("member {idx}: e^(tA) f <= e^(tA2) f"))
                .with_margin(upper, tol)
        } else {
            CheckRecord::fail(
                format!("member {idx}: e^(tA) f <= e^(tA2) f"),
                Witness::new(format!("member {idx}"), upper),
            )
        });
    }

    // initial-law dominance on a few row distributions
    let n = a_h.nrows();
    for state in [0, n / 2, n - 1] {
        let p1 = expm_row(a1_h, t, state)?;
        let p2 = expm_row(a2_h, t, state)?;
        let verdict =
            crate::order::stochastic_dominance(&p1, &p2, order, Some(support), cone_functions);
        let name = format!("row {state}: law(A1) dominated by law(A2)");
        report.push(match verdict {
            crate::order::DominanceVerdict::Dominated => CheckRecord::pass(name),
            crate::order::DominanceVerdict::NotDominated { witness, margin } => {
                CheckRecord::fail(name, Witness::new(witness, margin))
            }
            crate::order::DominanceVerdict::Undecided => {
                CheckRecord::undecided(name, "family-based check passed but is not exhaustive")
            }
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// CTMC simulation
// ---------------------------------------------------------------------------

/// Gillespie simulation of the chain generated by `a_h` (sub-stochastic rows
/// route their deficit to a graveyard). Deterministic for a fixed seed,
/// independent of thread count: every path owns a counter-derived RNG stream
/// and results are reduced in path order.
pub fn simulate_ctmc(
    a_h: &GridOperator,
    start: usize,
    t: f64,
    seed: u64,
    paths: usize,
) -> Result<Distribution, SemigroupError> {
    use rand::Rng;
    use rand::SeedableRng;
    if a_h.kind != OperatorKind::Generator {
        return Err(SemigroupError::Precondition(
            "simulate_ctmc needs a generator-kind operator".into(),
        ));
    }
    let n = a_h.nrows();
    // precompute per-state jump tables
    let mut jump: Vec<(f64, f64, Vec<(usize, f64)>)> = Vec::with_capacity(n);
    for i in 0..n {
        let out: Vec<(usize, f64)> = a_h
            .row(i)
            .iter()
            .copied()
            .filter(|&(j, v)| j != i && v > 0.0)
            .collect();
        let total_out: f64 = out.iter().map(|&(_, v)| v).sum();
        let kill = (-a_h.row_sum(i)).max(0.0);
        jump.push((total_out + kill, kill, out));
    }

    let finals: Vec<Option<usize>> = par::map_indexed(paths, |path| {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&(path as u64).to_le_bytes());
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(key);
        let mut state = start;
        let mut clock = 0.0;
        loop {
            let (total, kill, ref targets) = jump[state];
            if total == 0.0 {
                return Some(state);
            }
            let u: f64 = rng.gen_range(0.0..1.0f64);
            clock += -(1.0 - u).ln() / total;
            if clock >= t {
                return Some(state);
            }
            let mut pick = rng.gen_range(0.0..total);
            if pick < kill {
                return None; // graveyard
            }
            pick -= kill;
            let mut next = state;
            for &(j, v) in targets {
                if pick < v {
                    next = j;
                    break;
                }
                pick -= v;
            }
            state = next;
        }
    });

    let mut counts = vec![0u64; n];
    let mut killed = 0u64;
    for f in finals {
        match f {
            Some(s) => counts[s] += 1,
            None => killed += 1,
        }
    }
    let total = paths as f64;
    Distribution::new(
        counts.iter().map(|&c| c as f64 / total).collect(),
        killed as f64 / total,
    )
    .map_err(|e| SemigroupError::Precondition(format!("simulation distribution invalid: {e}")))
}
