//! Multi-dimensional diffusion orders: the mixed-derivative sign conditions
//! on the coefficient fields, the derived operators B^(alpha), and the
//! coefficient comparison conditions.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::expr::Expr;
use crate::report::{CheckRecord, CheckStatus, VerificationReport, Witness};

/// Multi-index over d coordinates. Entries stay <= 2 where used as a
/// derivative order and <= 1 inside an index set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MultiIndex(Vec<u8>);

impl MultiIndex {
    pub fn new(entries: Vec<u8>) -> MultiIndex {
        MultiIndex(entries)
    }

    pub fn unit(dim: usize, i: usize) -> MultiIndex {
        let mut v = vec![0; dim];
        v[i] = 1;
        MultiIndex(v)
    }

    pub fn pair(dim: usize, i: usize, j: usize) -> MultiIndex {
        let mut v = vec![0; dim];
        v[i] += 1;
        v[j] += 1;
        MultiIndex(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn entries(&self) -> &[u8] {
        &self.0
    }

    pub fn norm1(&self) -> u32 {
        self.0.iter().map(|&e| u32::from(e)).sum()
    }

    pub fn norm_inf(&self) -> u8 {
        self.0.iter().copied().max().unwrap_or(0)
    }

    /// Componentwise partial order.
    pub fn le(&self, other: &MultiIndex) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    /// Componentwise difference, `None` if any component would go negative.
    pub fn checked_sub(&self, other: &MultiIndex) -> Option<MultiIndex> {
        if !other.le(self) {
            return None;
        }
        Some(MultiIndex(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }
}

impl std::fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, Error)]
pub enum IndexSetError {
    #[error("index {0} has entries outside {{0,1}}")]
    NotBinary(MultiIndex),
    #[error("index {0} has size {1}, only sizes 1 and 2 are allowed")]
    BadSize(MultiIndex, u32),
    #[error("index {0} has dimension {1}, expected {2}")]
    DimMismatch(MultiIndex, usize, usize),
}

/// Index set generating a multi-dimensional integral order: a set of
/// {0,1}-multi-indices of size 1 or 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    dim: usize,
    indices: Vec<MultiIndex>,
}

impl IndexSet {
    pub fn new(dim: usize, indices: Vec<MultiIndex>) -> Result<IndexSet, IndexSetError> {
        for idx in &indices {
            if idx.dim() != dim {
                return Err(IndexSetError::DimMismatch(idx.clone(), idx.dim(), dim));
            }
            if idx.norm_inf() > 1 {
                return Err(IndexSetError::NotBinary(idx.clone()));
            }
            let n = idx.norm1();
            if n == 0 || n > 2 {
                return Err(IndexSetError::BadSize(idx.clone(), n));
            }
        }
        let mut indices = indices;
        indices.sort();
        indices.dedup();
        Ok(IndexSet { dim, indices })
    }

    /// The componentwise-increasing order: all first-order indices.
    pub fn increasing(dim: usize) -> IndexSet {
        IndexSet {
            dim,
            indices: (0..dim).map(|i| MultiIndex::unit(dim, i)).collect(),
        }
    }

    /// The supermodular order: all mixed pairs {kl}, k < l.
    pub fn supermodular(dim: usize) -> IndexSet {
        let mut indices = Vec::new();
        for k in 0..dim {
            for l in k + 1..dim {
                indices.push(MultiIndex::pair(dim, k, l));
            }
        }
        IndexSet { dim, indices }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn contains(&self, idx: &MultiIndex) -> bool {
        self.indices.contains(idx)
    }

    pub fn without(&self, idx: &MultiIndex) -> IndexSet {
        IndexSet {
            dim: self.dim,
            indices: self.indices.iter().filter(|i| *i != idx).cloned().collect(),
        }
    }
}

/// Coefficient field of an elliptic operator: symmetric a_ij and b_i as
/// expressions over x1..xd, with the zeroth coefficient identically zero.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    dim: usize,
    a: Vec<Vec<Expr>>,
    b: Vec<Expr>,
}

impl CoefficientField {
    /// Identity diffusion matrix, zero drift.
    pub fn isotropic(dim: usize) -> CoefficientField {
        let a = (0..dim)
            .map(|i| {
                (0..dim)
                    .map(|j| Expr::Const(if i == j { 1.0 } else { 0.0 }))
                    .collect()
            })
            .collect();
        CoefficientField {
            dim,
            a,
            b: vec![Expr::Const(0.0); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn a(&self, i: usize, j: usize) -> &Expr {
        &self.a[i][j]
    }

    pub fn b(&self, i: usize) -> &Expr {
        &self.b[i]
    }

    /// Sets `a_ij` and `a_ji` simultaneously.
    pub fn set_a(&mut self, i: usize, j: usize, e: Expr) {
        self.a[i][j] = e.clone();
        self.a[j][i] = e;
    }

    pub fn set_b(&mut self, i: usize, e: Expr) {
        self.b[i] = e;
    }

    /// Coefficient g_gamma of the multi-index form of the operator:
    /// `g_{2 e_i} = a_ii / 2`, `g_{e_i + e_j} = a_ij`, `g_{e_i} = b_i`,
    /// `g_0 = 0`.
    pub fn g(&self, gamma: &MultiIndex) -> Expr {
        match gamma.norm1() {
            0 => Expr::Const(0.0),
            1 => {
                let i = gamma.entries().iter().position(|&e| e == 1).unwrap();
                self.b[i].clone()
            }
            2 => {
                if gamma.norm_inf() == 2 {
                    let i = gamma.entries().iter().position(|&e| e == 2).unwrap();
                    Expr::mul(Expr::Const(0.5), self.a[i][i].clone()).simplify()
                } else {
                    let mut it = gamma.entries().iter().enumerate().filter(|(_, &e)| e == 1);
                    let i = it.next().unwrap().0;
                    let j = it.next().unwrap().0;
                    self.a[i][j].clone()
                }
            }
            _ => Expr::Const(0.0),
        }
    }

    /// Sampled uniform-ellipticity check: smallest eigenvalue of a(x) over
    /// the samples (2-d closed form; higher d via Gershgorin lower bound).
    pub fn ellipticity_lower_bound(
        &self,
        samples: &[Vec<f64>],
    ) -> Result<f64, crate::expr::EvalError> {
        let mut worst = f64::INFINITY;
        for p in samples {
            if self.dim == 2 {
                let a11 = self.a[0][0].evaluate(p)?;
                let a22 = self.a[1][1].evaluate(p)?;
                let a12 = self.a[0][1].evaluate(p)?;
                let tr = a11 + a22;
                let det = a11 * a22 - a12 * a12;
                let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                worst = worst.min(tr / 2.0 - disc);
            } else {
                for i in 0..self.dim {
                    let mut low = self.a[i][i].evaluate(p)?;
                    for j in 0..self.dim {
                        if j != i {
                            low -= self.a[i][j].evaluate(p)?.abs();
                        }
                    }
                    worst = worst.min(low);
                }
            }
        }
        Ok(worst)
    }
}

/// All derivative multi-indices gamma with 1 <= |gamma| <= 2.
fn derivative_indices(dim: usize) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    for i in 0..dim {
        out.push(MultiIndex::unit(dim, i));
    }
    for i in 0..dim {
        for j in i..dim {
            out.push(MultiIndex::pair(dim, i, j));
        }
    }
    out
}

/// All beta <= alpha componentwise (including alpha itself).
fn sub_indices(alpha: &MultiIndex) -> Vec<MultiIndex> {
    let mut out = vec![MultiIndex(vec![0; alpha.dim()])];
    for (pos, &amax) in alpha.entries().iter().enumerate() {
        let mut next = Vec::new();
        for base in &out {
            for v in 0..=amax {
                let mut e = base.0.clone();
                e[pos] = v;
                next.push(MultiIndex(e));
            }
        }
        out = next;
    }
    out.sort();
    out.dedup();
    out
}

fn binom_u8(n: u8, k: u8) -> f64 {
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * f64::from(n - i) / f64::from(i + 1);
    }
    acc
}

/// Multinomial coefficient `binom(alpha, beta)` componentwise.
fn multi_binom(alpha: &MultiIndex, beta: &MultiIndex) -> f64 {
    alpha
        .entries()
        .iter()
        .zip(beta.entries())
        .map(|(&a, &b)| binom_u8(a, b))
        .product()
}

/// Required relation of one derivative obligation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Obligation {
    NonNegative,
    Zero,
}

/// How a symbolic obligation was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckMode {
    /// Try canonical simplification to a literal zero first, then sample.
    SymbolicFirst,
    /// Sampling only.
    NumericOnly,
}

/// Deterministic Halton samples in a box, for the quasi-random obligation
/// checks.
pub fn halton_samples(dim: usize, box_lo: &[f64], box_hi: &[f64], count: usize) -> Vec<Vec<f64>> {
    const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    assert!(dim <= PRIMES.len());
    let radical_inverse = |mut n: u64, base: u64| -> f64 {
        let mut inv = 0.0;
        let mut denom = 1.0;
        while n > 0 {
            denom *= base as f64;
            inv += (n % base) as f64 / denom;
            n /= base;
        }
        inv
    };
    (1..=count as u64)
        .map(|n| {
            (0..dim)
                .map(|d| {
                    let u = radical_inverse(n, PRIMES[d]);
                    box_lo[d] + (box_hi[d] - box_lo[d]) * u
                })
                .collect()
        })
        .collect()
}

fn check_obligation(
    name: String,
    expr: &Expr,
    obligation: Obligation,
    samples: &[Vec<f64>],
    mode: CheckMode,
) -> CheckRecord {
    let simplified = expr.simplify();
    if mode == CheckMode::SymbolicFirst && simplified.is_zero() {
        return CheckRecord::pass(name).with_detail("symbolic zero");
    }
    let mut all_tiny = true;
    for p in samples {
        let v = match simplified.evaluate(p) {
            Ok(v) => v,
            Err(err) => {
                return CheckRecord::fail(name, Witness::new(format!("{p:?}"), f64::NAN))
                    .with_detail(format!("evaluation failed: {err}"));
            }
        };
        if v.abs() > 1e-12 {
            all_tiny = false;
        }
        let violated = match obligation {
            Obligation::NonNegative => v < -1e-12,
            Obligation::Zero => v.abs() > 1e-12,
        };
        if violated {
            return CheckRecord::fail(name, Witness::new(format!("{p:?}"), v));
        }
    }
    match obligation {
        Obligation::Zero => {
            if all_tiny {
                CheckRecord::undecided(name, "numerically zero on samples (unproven)")
            } else {
                CheckRecord::pass(name)
            }
        }
        Obligation::NonNegative => CheckRecord::pass(name).with_detail("sampled nonnegative"),
    }
}

/// Check the monotonicity condition on the coefficient derivatives: for each
/// `alpha` in the index set, `beta < alpha` and derivative index `gamma`,
/// whenever `beta + gamma - alpha` has a negative component the derivative
/// `d_{alpha-beta} g_gamma` must be nonnegative if `beta + gamma` lies in the
/// index set and vanish otherwise. The report lists every obligation.
pub fn check_gammabed(
    coeffs: &CoefficientField,
    index_set: &IndexSet,
    samples: &[Vec<f64>],
    mode: CheckMode,
) -> VerificationReport {
    let mut report = VerificationReport::new("gamma-bed coefficient conditions");
    let gammas = derivative_indices(coeffs.dim());
    for alpha in index_set.indices() {
        for beta in sub_indices(alpha) {
            if &beta == alpha {
                continue;
            }
            for gamma in &gammas {
                let shifted = beta.add(gamma);
                // zeta >= 0 solving beta + gamma = zeta + alpha exists
                // exactly when beta + gamma >= alpha componentwise
                if alpha.le(&shifted) {
                    continue;
                }
                let diff = alpha.checked_sub(&beta).expect("beta <= alpha");
                let derivative = coeffs
                    .g(gamma)
                    .differentiate_multi(diff.entries())
                    .simplify();
                let (obligation, rel) = if index_set.contains(&shifted) {
                    (Obligation::NonNegative, ">= 0")
                } else {
                    (Obligation::Zero, "= 0")
                };
                let name =
                    format!("alpha={alpha} beta={beta} gamma={gamma}: d_{diff} g_{gamma} {rel}");
                report.push(check_obligation(
                    name,
                    &derivative,
                    obligation,
                    samples,
                    mode,
                ));
            }
        }
    }
    report
}

#[derive(Debug, Clone, Error)]
pub enum BAlphaError {
    #[error("alpha {0} must have size 1 or 2 with entries <= 2")]
    BadAlpha(MultiIndex),
    #[error("alpha {0} has dimension {1}, coefficients have dimension {2}")]
    DimMismatch(MultiIndex, usize, usize),
}

/// Derived operator B^(alpha) as a map from derivative multi-indices zeta
/// (including zeta = 0, the killing term) to coefficient expressions.
#[derive(Debug, Clone)]
pub struct BAlphaOperator {
    pub alpha: MultiIndex,
    pub terms: BTreeMap<MultiIndex, Expr>,
}

impl BAlphaOperator {
    pub fn g(&self, zeta: &MultiIndex) -> Expr {
        self.terms.get(zeta).cloned().unwrap_or(Expr::Const(0.0))
    }
}

/// Coefficients of the derived operator
/// `g~_zeta = sum over gamma, beta <= alpha with beta + gamma = zeta + alpha
/// of binom(alpha, beta) d_{alpha - beta} g_gamma`.
pub fn build_b_alpha(
    coeffs: &CoefficientField,
    alpha: &MultiIndex,
) -> Result<BAlphaOperator, BAlphaError> {
    if alpha.dim() != coeffs.dim() {
        return Err(BAlphaError::DimMismatch(
            alpha.clone(),
            alpha.dim(),
            coeffs.dim(),
        ));
    }
    let size = alpha.norm1();
    if !(1..=2).contains(&size) || alpha.norm_inf() > 2 {
        return Err(BAlphaError::BadAlpha(alpha.clone()));
    }
    let dim = coeffs.dim();
    let mut terms: BTreeMap<MultiIndex, Expr> = BTreeMap::new();
    let mut zetas = derivative_indices(dim);
    zetas.push(MultiIndex(vec![0; dim]));
    let gammas = derivative_indices(dim);
    for zeta in zetas {
        let mut acc = Expr::Const(0.0);
        for gamma in &gammas {
            for beta in sub_indices(alpha) {
                if beta.add(gamma) != zeta.add(alpha) {
                    continue;
                }
                let diff = alpha.checked_sub(&beta).expect("beta <= alpha");
                let coeff = multi_binom(alpha, &beta);
                let term = Expr::mul(
                    Expr::Const(coeff),
                    coeffs.g(gamma).differentiate_multi(diff.entries()),
                );
                acc = Expr::add(acc, term);
            }
        }
        let acc = acc.simplify();
        if !acc.is_zero() {
            terms.insert(zeta, acc);
        }
    }
    Ok(BAlphaOperator {
        alpha: alpha.clone(),
        terms,
    })
}

/// Sampled comparison conditions for three coefficient fields: ordered
/// drifts/diffusions on the index set, equality elsewhere (symbolic first).
pub fn check_comparison_md(
    c1: &CoefficientField,
    c: &CoefficientField,
    c2: &CoefficientField,
    index_set: &IndexSet,
    samples: &[Vec<f64>],
) -> VerificationReport {
    let mut report = VerificationReport::new("multi-d comparison conditions");
    let dim = c.dim();

    let ordered = |name: String, lo: &Expr, hi: &Expr| -> CheckRecord {
        let diff = Expr::sub(hi.clone(), lo.clone()).simplify();
        check_obligation(
            name,
            &diff,
            Obligation::NonNegative,
            samples,
            CheckMode::SymbolicFirst,
        )
    };
    let equal = |name: String, x: &Expr, y: &Expr| -> CheckRecord {
        let diff = Expr::sub(x.clone(), y.clone()).simplify();
        let rec = check_obligation(
            name,
            &diff,
            Obligation::Zero,
            samples,
            CheckMode::SymbolicFirst,
        );
        // exact equality of identical trees short-circuits the sampling
        if rec.status == CheckStatus::Undecided && x.simplify() == y.simplify() {
            CheckRecord::pass(rec.name).with_detail("structurally equal")
        } else {
            rec
        }
    };

    for i in 0..dim {
        let alpha = MultiIndex::unit(dim, i);
        if index_set.contains(&alpha) {
            report.push(ordered(
                format!("b{}^(1) <= b{}", i + 1, i + 1),
                c1.b(i),
                c.b(i),
            ));
            report.push(ordered(
                format!("b{} <= b{}^(2)", i + 1, i + 1),
                c.b(i),
                c2.b(i),
            ));
        } else {
            report.push(equal(
                format!("b{}^(1) = b{}", i + 1, i + 1),
                c1.b(i),
                c.b(i),
            ));
            report.push(equal(
                format!("b{} = b{}^(2)", i + 1, i + 1),
                c.b(i),
                c2.b(i),
            ));
        }
    }
    for i in 0..dim {
        for j in i..dim {
            // diagonal indices are never members of a valid index set, so
            // they always land in the equality branch
            let in_set = i != j && index_set.contains(&MultiIndex::pair(dim, i, j));
            let name_ij = format!("a{}{}", i + 1, j + 1);
            if in_set {
                report.push(ordered(
                    format!("{name_ij}^(1) <= {name_ij}"),
                    c1.a(i, j),
                    c.a(i, j),
                ));
                report.push(ordered(
                    format!("{name_ij} <= {name_ij}^(2)"),
                    c.a(i, j),
                    c2.a(i, j),
                ));
            } else {
                report.push(equal(
                    format!("{name_ij}^(1) = {name_ij}"),
                    c1.a(i, j),
                    c.a(i, j),
                ));
                report.push(equal(
                    format!("{name_ij} = {name_ij}^(2)"),
                    c.a(i, j),
                    c2.a(i, j),
                ));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn samples2() -> Vec<Vec<f64>> {
        halton_samples(2, &[-2.0, -2.0], &[2.0, 2.0], 200)
    }

    fn samples3() -> Vec<Vec<f64>> {
        halton_samples(3, &[-2.0; 3], &[2.0; 3], 200)
    }

    /// First worked example: increasing order in d = 2 with a_ij depending
    /// only on its own coordinates and drifts increasing in the other
    /// variable.
    fn increasing_example() -> CoefficientField {
        let mut c = CoefficientField::isotropic(2);
        c.set_a(0, 0, parse("1 + 0.1*x1^2", 2).unwrap());
        c.set_a(1, 1, parse("1 + 0.1*x2^2", 2).unwrap());
        c.set_a(0, 1, parse("0.2*x1*x2", 2).unwrap());
        c.set_b(0, parse("-x1 + 0.5*x2", 2).unwrap());
        c.set_b(1, parse("0.3*x1 - x2", 2).unwrap());
        c
    }

    /// Second worked example: supermodular order in d = 3 with a_ij of
    /// (x_i, x_j) and b_i of x_i only.
    fn supermodular_example() -> CoefficientField {
        let mut c = CoefficientField::isotropic(3);
        c.set_a(0, 1, parse("0.25*exp(-(x1-x2)^2)", 3).unwrap());
        c.set_a(0, 2, parse("0.2 + 0.05*x1*x3", 3).unwrap());
        c.set_a(1, 2, parse("0.1*x2*x3", 3).unwrap());
        c.set_b(0, parse("-x1", 3).unwrap());
        c.set_b(1, parse("1 - x2^3", 3).unwrap());
        c.set_b(2, parse("0.5*x3", 3).unwrap());
        c
    }

    #[test]
    fn increasing_example_passes() {
        let report = check_gammabed(
            &increasing_example(),
            &IndexSet::increasing(2),
            &samples2(),
            CheckMode::SymbolicFirst,
        );
        assert!(!report.has_failure(), "{report:?}");
    }

    #[test]
    fn increasing_example_fails_with_decreasing_cross_drift() {
        let mut c = increasing_example();
        c.set_b(0, parse("-x1 - x2", 2).unwrap());
        let report = check_gammabed(
            &c,
            &IndexSet::increasing(2),
            &samples2(),
            CheckMode::SymbolicFirst,
        );
        let failure = report.first_failure().expect("d2 b1 = -1 must be caught");
        assert!(failure.name.contains("g_(1,0)"), "{}", failure.name);
        assert!((failure.witness.as_ref().unwrap().value - (-1.0)).abs() < 1e-9);
    }

    #[test]
    fn supermodular_example_passes() {
        let report = check_gammabed(
            &supermodular_example(),
            &IndexSet::supermodular(3),
            &samples3(),
            CheckMode::SymbolicFirst,
        );
        assert!(!report.has_failure(), "{report:?}");
    }

    #[test]
    fn supermodular_example_fails_with_cross_drift() {
        let mut c = supermodular_example();
        c.set_b(0, parse("-x1 + x2", 3).unwrap());
        let report = check_gammabed(
            &c,
            &IndexSet::supermodular(3),
            &samples3(),
            CheckMode::SymbolicFirst,
        );
        assert!(report.has_failure());
    }

    #[test]
    fn removing_an_index_keeps_remaining_obligations_passing() {
        // Obligations that survive with the same required relation keep
        // their status. (Shrinking the index set can still create stricter
        // obligations: a formerly in-set shifted index now demands equality.)
        let c = increasing_example();
        let full = IndexSet::increasing(2);
        let report_full = check_gammabed(&c, &full, &samples2(), CheckMode::SymbolicFirst);
        for idx in full.indices() {
            let smaller = full.without(idx);
            let report_small = check_gammabed(&c, &smaller, &samples2(), CheckMode::SymbolicFirst);
            for rec in &report_small.checks {
                if let Some(prev) = report_full.checks.iter().find(|r| r.name == rec.name) {
                    assert_eq!(prev.status, rec.status, "{}", rec.name);
                }
            }
        }
    }

    #[test]
    fn b_alpha_in_one_dimension_recovers_the_increasing_operator() {
        // d = 1, alpha = (1): g~_2 = a/2, g~_1 = a'/2 + b, g~_0 = b'
        let mut c = CoefficientField::isotropic(1);
        c.set_a(0, 0, parse("1 + x^2", 1).unwrap());
        c.set_b(0, parse("2 - 3*x", 1).unwrap());
        let op = build_b_alpha(&c, &MultiIndex::new(vec![1])).unwrap();
        let at = |e: &Expr, x: f64| e.evaluate(&[x]).unwrap();
        for x in [-1.0, 0.0, 0.7] {
            let g2 = at(&op.g(&MultiIndex::new(vec![2])), x);
            assert!((g2 - 0.5 * (1.0 + x * x)).abs() < 1e-12);
            let g1 = at(&op.g(&MultiIndex::new(vec![1])), x);
            assert!((g1 - (x + 2.0 - 3.0 * x)).abs() < 1e-12, "a'/2 + b");
            let g0 = at(&op.g(&MultiIndex::new(vec![0])), x);
            assert!((g0 - (-3.0)).abs() < 1e-12, "b'");
        }
    }

    #[test]
    fn b_alpha_with_second_order_index_recovers_the_convex_operator() {
        // d = 1, alpha = (2): g~_1 = a' + b, g~_0 = a''/2 + 2 b'
        let mut c = CoefficientField::isotropic(1);
        c.set_a(0, 0, parse("1 + x^2", 1).unwrap());
        c.set_b(0, parse("2 - 3*x", 1).unwrap());
        let op = build_b_alpha(&c, &MultiIndex::new(vec![2])).unwrap();
        let at = |e: &Expr, x: f64| e.evaluate(&[x]).unwrap();
        for x in [-1.0, 0.0, 0.7] {
            let g1 = at(&op.g(&MultiIndex::new(vec![1])), x);
            assert!((g1 - (2.0 * x + 2.0 - 3.0 * x)).abs() < 1e-12, "a' + b");
            let g0 = at(&op.g(&MultiIndex::new(vec![0])), x);
            assert!((g0 - (1.0 + 2.0 * (-3.0))).abs() < 1e-12, "a''/2 + 2 b'");
        }
    }

    #[test]
    fn constant_coefficients_give_back_the_generator() {
        let mut c = CoefficientField::isotropic(2);
        c.set_b(0, Expr::Const(1.5));
        let op = build_b_alpha(&c, &MultiIndex::unit(2, 0)).unwrap();
        assert!(op.g(&MultiIndex::new(vec![0, 0])).is_zero());
        let g = op.g(&MultiIndex::new(vec![2, 0]));
        assert_eq!(g.evaluate(&[0.0, 0.0]).unwrap(), 0.5);
    }

    #[test]
    fn comparison_conditions() {
        let dim = 2;
        let index_set = IndexSet::new(dim, vec![MultiIndex::unit(dim, 0)]).unwrap();
        let mut c = CoefficientField::isotropic(dim);
        c.set_b(0, parse("x1", 2).unwrap());
        c.set_b(1, parse("x2", 2).unwrap());
        let mut c1 = c.clone();
        c1.set_b(0, parse("x1 - 1", 2).unwrap());
        let mut c2 = c.clone();
        c2.set_b(0, parse("x1 + 1", 2).unwrap());
        let report = check_comparison_md(&c1, &c, &c2, &index_set, &samples2());
        assert!(!report.has_failure(), "{report:?}");

        // perturbing b2, whose index is outside the set, breaks an equality
        let mut c1_bad = c1.clone();
        c1_bad.set_b(1, parse("x2 + 0.5", 2).unwrap());
        let report = check_comparison_md(&c1_bad, &c, &c2, &index_set, &samples2());
        let failure = report.first_failure().expect("equality obligation");
        assert!(failure.name.contains("b2"));
    }

    #[test]
    fn identical_fields_pass_comparison() {
        let c = increasing_example();
        let report = check_comparison_md(&c, &c, &c, &IndexSet::increasing(2), &samples2());
        assert!(!report.has_failure());
    }
}
