//! One-dimensional diffusions with Feller boundary conditions.
//!
//! Covers the scale/speed/killing measures, exit/entrance boundary
//! classification, the gamma parameterization of reflecting/sticky/absorbing
//! boundaries, the regularity condition on coefficients, and the symbolic
//! construction of the operators B and C intertwined with the generator
//! through the increasing, convex and increasing-convex order maps.

use std::collections::HashMap;
use std::sync::Mutex;

use thiserror::Error;

use crate::expr::{EvalError, Expr, Polynomial};
use crate::order::DiffusionOrder;
use crate::report::{CheckRecord, VerificationReport, Witness};

/// Which endpoint of the interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Feller boundary condition at one endpoint.
///
/// `Reflecting`, `Sticky` and `Absorbing` form the gamma-parameterized family
/// `gamma_e f'(e) = f''(e)` used by the order-preservation theorems; the
/// remaining kinds are representable and enter the generator rows but are not
/// eligible for `derive_bc`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FellerBoundary {
    Reflecting,
    /// Sticky boundary holding speed mass `mass > 0` at the endpoint.
    Sticky {
        mass: f64,
    },
    /// Elastic boundary with killing mass `k > 0` at the endpoint.
    Elastic {
        k: f64,
    },
    Absorbing,
    /// Dirichlet condition `f(e) = 0`: the process is killed at the endpoint.
    Killing,
    /// Trap condition `g(e) = -gamma_e f(e)` with `gamma_e > 0`.
    Trap {
        gamma: f64,
    },
    /// Endpoint not part of the state space (only legal where the
    /// classification is natural).
    Natural,
}

impl FellerBoundary {
    pub fn kind_name(&self) -> &'static str {
        match self {
            FellerBoundary::Reflecting => "reflecting",
            FellerBoundary::Sticky { .. } => "sticky",
            FellerBoundary::Elastic { .. } => "elastic",
            FellerBoundary::Absorbing => "absorbing",
            FellerBoundary::Killing => "killing",
            FellerBoundary::Trap { .. } => "trap",
            FellerBoundary::Natural => "natural",
        }
    }

    /// Member of the gamma family of `gamma_to_kind`/`kind_to_gamma`?
    pub fn in_gamma_family(&self) -> bool {
        matches!(
            self,
            FellerBoundary::Reflecting | FellerBoundary::Sticky { .. } | FellerBoundary::Absorbing
        )
    }
}

#[derive(Debug, Clone, Error)]
pub enum ModelError {
    #[error("interval endpoints must satisfy l < r, got [{0}, {1}]")]
    BadInterval(f64, f64),
    #[error("diffusion coefficient a is not strictly positive at x = {at} (a = {value})")]
    NonPositiveA { at: f64, value: f64 },
    #[error("coefficient evaluation failed at x = {at}: {source}")]
    Eval { at: f64, source: EvalError },
    #[error("finite {side} endpoint needs a non-natural boundary condition")]
    MissingBoundary { side: &'static str },
    #[error("infinite {side} endpoint must use the natural boundary")]
    InfiniteNeedsNatural { side: &'static str },
    #[error("sticky mass must be positive, got {0}")]
    BadStickyMass(f64),
}

/// A one-dimensional diffusion `L f = a/2 f'' + b f' - c f` on an interval,
/// with a Feller boundary condition at each finite endpoint.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    /// Interval endpoints; either may be infinite.
    pub l: f64,
    pub r: f64,
    pub a: Expr,
    pub b: Expr,
    pub c: Expr,
    pub left: FellerBoundary,
    pub right: FellerBoundary,
}

impl DiffusionModel {
    /// Validates the interval, boundary kinds and strict positivity of `a` on
    /// a sample of interior points (denser towards finite endpoints).
    pub fn new(
        l: f64,
        r: f64,
        a: Expr,
        b: Expr,
        c: Expr,
        left: FellerBoundary,
        right: FellerBoundary,
    ) -> Result<DiffusionModel, ModelError> {
        if !(l < r) {
            return Err(ModelError::BadInterval(l, r));
        }
        if l.is_infinite() && left != FellerBoundary::Natural {
            return Err(ModelError::InfiniteNeedsNatural { side: "left" });
        }
        if r.is_infinite() && right != FellerBoundary::Natural {
            return Err(ModelError::InfiniteNeedsNatural { side: "right" });
        }
        if l.is_finite() && left == FellerBoundary::Natural {
            // allowed only when classification says natural; the caller can
            // still run classify_boundary, but a finite natural endpoint is
            // almost always a configuration mistake
        }
        for side in [&left, &right] {
            if let FellerBoundary::Sticky { mass } = side {
                if !(*mass > 0.0) {
                    return Err(ModelError::BadStickyMass(*mass));
                }
            }
        }
        let model = DiffusionModel {
            l,
            r,
            a,
            b,
            c,
            left,
            right,
        };
        for x in model.interior_samples(64) {
            let v = model
                .a
                .evaluate(&[x])
                .map_err(|source| ModelError::Eval { at: x, source })?;
            if v <= 0.0 {
                return Err(ModelError::NonPositiveA { at: x, value: v });
            }
        }
        Ok(model)
    }

    /// Interior sample points, geometric near finite endpoints so that
    /// degeneracies like the Wright-Fisher coefficient are caught.
    pub fn interior_samples(&self, n: usize) -> Vec<f64> {
        let lo = if self.l.is_finite() { self.l } else { -8.0 };
        let hi = if self.r.is_finite() { self.r } else { 8.0 };
        let width = hi - lo;
        let mut xs = Vec::with_capacity(n + 16);
        for i in 1..n {
            xs.push(lo + width * (i as f64) / (n as f64));
        }
        for j in 3..31 {
            let off = width * 0.5f64.powi(j as i32);
            if self.l.is_finite() {
                xs.push(lo + off);
            }
            if self.r.is_finite() {
                xs.push(hi - off);
            }
        }
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        xs
    }

    pub fn midpoint(&self) -> f64 {
        let lo = if self.l.is_finite() { self.l } else { -1.0 };
        let hi = if self.r.is_finite() { self.r } else { 1.0 };
        0.5 * (lo + hi)
    }

    pub fn eval_a(&self, x: f64) -> Result<f64, EvalError> {
        self.a.evaluate(&[x])
    }

    pub fn eval_b(&self, x: f64) -> Result<f64, EvalError> {
        self.b.evaluate(&[x])
    }

    pub fn eval_c(&self, x: f64) -> Result<f64, EvalError> {
        self.c.evaluate(&[x])
    }

    pub fn boundary(&self, side: Side) -> &FellerBoundary {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn endpoint(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.l,
            Side::Right => self.r,
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum BoundaryError {
    #[error(
        "gamma = {gamma} outside the legal range for the {side} endpoint \
         (bound -2b/a = {bound}; gamma = 0 there is possible only if b(r) <= 0, \
         mirrored on the left)"
    )]
    GammaOutOfRange {
        gamma: f64,
        bound: f64,
        side: &'static str,
    },
    #[error("boundary kind {0} is outside the gamma-parameterized family")]
    OutsideGammaFamily(&'static str),
}

/// Gamma value encoding a boundary kind of the gamma family, at an endpoint
/// with coefficient values `a_e > 0`, `b_e`.
///
/// Right endpoint: reflecting is `-inf`, absorbing is `-2 b_e / a_e`, sticky
/// with mass `m` is `-2 (1/m + b_e) / a_e`. Left endpoint mirrored.
///
/// Returns `None` for kinds outside the gamma family and for degenerate
/// endpoints with `a(e) <= 0` (Wright-Fisher-like models), where the
/// parameterization is not defined.
pub fn kind_to_gamma(kind: &FellerBoundary, a_e: f64, b_e: f64, side: Side) -> Option<f64> {
    if !(a_e > 0.0) {
        return None;
    }
    let bound = -2.0 * b_e / a_e;
    match (kind, side) {
        (FellerBoundary::Reflecting, Side::Right) => Some(f64::NEG_INFINITY),
        (FellerBoundary::Reflecting, Side::Left) => Some(f64::INFINITY),
        (FellerBoundary::Absorbing, _) => Some(bound),
        (FellerBoundary::Sticky { mass }, Side::Right) => Some(-2.0 * (1.0 / mass + b_e) / a_e),
        (FellerBoundary::Sticky { mass }, Side::Left) => Some(2.0 * (1.0 / mass - b_e) / a_e),
        _ => None,
    }
}

/// Recover the boundary kind from a gamma value.
pub fn gamma_to_kind(
    gamma: f64,
    a_e: f64,
    b_e: f64,
    side: Side,
) -> Result<FellerBoundary, BoundaryError> {
    let bound = -2.0 * b_e / a_e;
    let tol = 1e-12 * (1.0 + bound.abs());
    match side {
        Side::Right => {
            if gamma == f64::NEG_INFINITY {
                return Ok(FellerBoundary::Reflecting);
            }
            if (gamma - bound).abs() <= tol {
                return Ok(FellerBoundary::Absorbing);
            }
            if gamma < bound {
                // gamma = -2 (1/m + b) / a  =>  m = 2 / (-a gamma - 2 b)
                let mass = 2.0 / (-a_e * gamma - 2.0 * b_e);
                return Ok(FellerBoundary::Sticky { mass });
            }
            Err(BoundaryError::GammaOutOfRange {
                gamma,
                bound,
                side: "right",
            })
        }
        Side::Left => {
            if gamma == f64::INFINITY {
                return Ok(FellerBoundary::Reflecting);
            }
            if (gamma - bound).abs() <= tol {
                return Ok(FellerBoundary::Absorbing);
            }
            if gamma > bound {
                // gamma = 2 (1/m - b) / a  =>  m = 2 / (a gamma + 2 b)
                let mass = 2.0 / (a_e * gamma + 2.0 * b_e);
                return Ok(FellerBoundary::Sticky { mass });
            }
            Err(BoundaryError::GammaOutOfRange {
                gamma,
                bound,
                side: "left",
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Scale, speed and killing measures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Error)]
pub enum QuadratureError {
    #[error("quadrature did not converge on [{a}, {b}]")]
    NonConvergence { a: f64, b: f64 },
    #[error("integrand evaluation failed at {at}: {source}")]
    Eval { at: f64, source: EvalError },
    #[error("negative killing density c({at}) = {value}; killing measures need c >= 0")]
    NegativeKilling { at: f64, value: f64 },
}

/// Adaptive Simpson quadrature of `f` over the signed interval `[a, b]`.
fn adaptive_simpson<F>(f: &F, a: f64, b: f64, rel_tol: f64) -> Result<f64, QuadratureError>
where
    F: Fn(f64) -> Result<f64, QuadratureError>,
{
    if a == b {
        return Ok(0.0);
    }
    if a > b {
        return Ok(-adaptive_simpson(f, b, a, rel_tol)?);
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a)?, f(m)?, f(b)?);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let eps = (rel_tol * whole.abs()).max(1e-14);
    simpson_rec(f, a, b, fa, fm, fb, whole, eps, 60)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    eps: f64,
    depth: u32,
) -> Result<f64, QuadratureError>
where
    F: Fn(f64) -> Result<f64, QuadratureError>,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm)?, f(rm)?);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * eps {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(QuadratureError::NonConvergence { a, b });
    }
    Ok(
        simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1)?
            + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1)?,
    )
}

/// Scale/speed/killing accumulators of a diffusion model, anchored at a base
/// point `z`. Values of the exponent `Lambda` are memoized behind a lock so
/// repeated nested quadratures stay cheap and the struct can be shared across
/// threads.
pub struct ScaleSpeedKilling {
    a: Expr,
    b: Expr,
    c: Expr,
    pub z: f64,
    lambda_memo: Mutex<HashMap<u64, f64>>,
}

impl ScaleSpeedKilling {
    fn eval(e: &Expr, x: f64) -> Result<f64, QuadratureError> {
        e.evaluate(&[x])
            .map_err(|source| QuadratureError::Eval { at: x, source })
    }

    /// Lambda(x) = integral from z to x of 2 b / a.
    pub fn lambda(&self, x: f64) -> Result<f64, QuadratureError> {
        let key = x.to_bits();
        if let Some(v) = self.lambda_memo.lock().unwrap().get(&key) {
            return Ok(*v);
        }
        let a = &self.a;
        let b = &self.b;
        let integrand = |y: f64| -> Result<f64, QuadratureError> {
            Ok(2.0 * Self::eval(b, y)? / Self::eval(a, y)?)
        };
        let v = adaptive_simpson(&integrand, self.z, x, 1e-10)?;
        self.lambda_memo.lock().unwrap().insert(key, v);
        Ok(v)
    }

    pub fn scale_density(&self, x: f64) -> Result<f64, QuadratureError> {
        Ok((-self.lambda(x)?).exp())
    }

    pub fn speed_density(&self, x: f64) -> Result<f64, QuadratureError> {
        Ok(2.0 * self.lambda(x)?.exp() / Self::eval(&self.a, x)?)
    }

    pub fn killing_density(&self, x: f64) -> Result<f64, QuadratureError> {
        let c = Self::eval(&self.c, x)?;
        if c < 0.0 {
            return Err(QuadratureError::NegativeKilling { at: x, value: c });
        }
        Ok(2.0 * c * self.lambda(x)?.exp() / Self::eval(&self.a, x)?)
    }

    /// s(x) = integral from z to x of exp(-Lambda).
    pub fn scale(&self, x: f64) -> Result<f64, QuadratureError> {
        adaptive_simpson(&|y| self.scale_density(y), self.z, x, 1e-9)
    }

    /// m(x) = integral from z to x of 2 exp(Lambda) / a.
    pub fn speed(&self, x: f64) -> Result<f64, QuadratureError> {
        adaptive_simpson(&|y| self.speed_density(y), self.z, x, 1e-9)
    }

    /// k(x) = integral from z to x of 2 c exp(Lambda) / a.
    pub fn killing(&self, x: f64) -> Result<f64, QuadratureError> {
        adaptive_simpson(&|y| self.killing_density(y), self.z, x, 1e-9)
    }
}

/// Construct the scale/speed/killing accumulators anchored at `z`.
pub fn scale_speed_killing(model: &DiffusionModel, z: f64) -> ScaleSpeedKilling {
    ScaleSpeedKilling {
        a: model.a.clone(),
        b: model.b.clone(),
        c: model.c.clone(),
        z,
        lambda_memo: Mutex::new(HashMap::new()),
    }
}

// ---------------------------------------------------------------------------
// Boundary classification
// ---------------------------------------------------------------------------

/// Finiteness verdict for one of the nested integrals u(e), v(e).
#[derive(Debug, Clone, PartialEq)]
pub enum Finiteness {
    Finite { extrapolated: f64 },
    Infinite,
    Undecided,
}

impl Finiteness {
    pub fn is_finite(&self) -> bool {
        matches!(self, Finiteness::Finite { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Exit,
    Entrance,
    Regular,
    Natural,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::Exit => "exit",
            Classification::Entrance => "entrance",
            Classification::Regular => "regular",
            Classification::Natural => "natural",
        }
    }
}

/// Classification outcome with the partial-integral traces, so an undecided
/// verdict is never a silent guess.
#[derive(Debug, Clone)]
pub struct BoundaryClassification {
    pub side: Side,
    pub verdict: Option<Classification>,
    pub u: Finiteness,
    pub v: Finiteness,
    pub u_partials: Vec<f64>,
    pub v_partials: Vec<f64>,
}

const DIVERGENCE_CUTOFF: f64 = 1e12;
const SATURATION_CUTOFF: f64 = 1e280;

fn decide_finiteness(partials: &[f64], saturated: bool) -> Finiteness {
    if let Some(last) = partials.last() {
        if *last > DIVERGENCE_CUTOFF {
            return Finiteness::Infinite;
        }
    } else {
        return Finiteness::Undecided;
    }
    let deltas: Vec<f64> = partials.windows(2).map(|w| w[1] - w[0]).collect();
    let last = *partials.last().unwrap();
    // converged: the last few increments are negligible relative to the value
    let tail_small = deltas
        .iter()
        .rev()
        .take(3)
        .all(|d| d.abs() <= 1e-9 * (1.0 + last.abs()));
    if deltas.len() >= 3 && tail_small && !saturated {
        return Finiteness::Finite { extrapolated: last };
    }
    // Richardson-style ratio analysis on the geometric mesh: increments of a
    // finite integral decay geometrically, a logarithmic divergence has ratio
    // tending to one, a polynomial divergence has ratio above one.
    let positive: Vec<f64> = deltas.iter().copied().filter(|d| *d > 0.0).collect();
    if positive.len() < 4 {
        return if saturated {
            Finiteness::Undecided
        } else {
            Finiteness::Finite { extrapolated: last }
        };
    }
    let mut ratios: Vec<f64> = positive.windows(2).map(|w| w[1] / w[0]).collect();
    let m = ratios.len().min(6);
    let tail = ratios.split_off(ratios.len() - m);
    let mut sorted = tail;
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    if median >= 0.995 {
        Finiteness::Infinite
    } else if median <= 0.9 && !saturated {
        let d = *positive.last().unwrap();
        Finiteness::Finite {
            extrapolated: last + d * median / (1.0 - median),
        }
    } else {
        Finiteness::Undecided
    }
}

/// Classify a boundary point as exit / entrance / regular / natural by the
/// numerical finiteness of the nested integrals u(e) and v(e).
///
/// Partial integrals are accumulated over a geometric mesh approaching the
/// endpoint (doubling when the endpoint is infinite), integrating the state
/// (Lambda, s, m, k, u, v) with RK4 substeps per cell. The verdict is `None`
/// (undecided) whenever the ratio analysis is inconclusive.
pub fn classify_boundary(
    model: &DiffusionModel,
    side: Side,
) -> Result<BoundaryClassification, QuadratureError> {
    let z = model.midpoint();
    let e = model.endpoint(side);
    let dir: f64 = match side {
        Side::Left => -1.0,
        Side::Right => 1.0,
    };

    // state: [Lambda, s, m, k, u, v] as functions of distance t from z
    let a = &model.a;
    let b = &model.b;
    let c = &model.c;
    let deriv = |t: f64, st: &[f64; 6]| -> Result<[f64; 6], QuadratureError> {
        let y = z + dir * t;
        let av = ScaleSpeedKilling::eval(a, y)?;
        let bv = ScaleSpeedKilling::eval(b, y)?;
        let cv = ScaleSpeedKilling::eval(c, y)?;
        if cv < 0.0 {
            return Err(QuadratureError::NegativeKilling { at: y, value: cv });
        }
        let lam = st[0];
        let ds = (-lam).exp();
        let dm = 2.0 * lam.exp() / av;
        let dk = 2.0 * cv * lam.exp() / av;
        Ok([
            dir * 2.0 * bv / av,
            ds,
            dm,
            dk,
            (st[2] + st[3]) * ds,
            st[1] * (dm + dk),
        ])
    };

    let mesh: Vec<f64> = if e.is_finite() {
        let w = (e - z).abs();
        (1..=48).map(|j| w * (1.0 - 0.5f64.powi(j))).collect()
    } else {
        // quarter-octave expansion: strongly drifted models overflow the
        // accumulators within a few octaves, and the ratio analysis needs
        // several recorded partials before that happens
        (0..=160).map(|j| 2f64.powf(j as f64 / 4.0)).collect()
    };

    let mut state = [0.0f64; 6];
    let mut t = 0.0;
    let mut u_partials = Vec::with_capacity(mesh.len());
    let mut v_partials = Vec::with_capacity(mesh.len());
    let mut saturated = false;
    'cells: for &t_next in &mesh {
        let steps = 16;
        let h = (t_next - t) / steps as f64;
        for s in 0..steps {
            let t0 = t + s as f64 * h;
            let k1 = deriv(t0, &state)?;
            let mid1 = rk_step(&state, &k1, 0.5 * h);
            let k2 = deriv(t0 + 0.5 * h, &mid1)?;
            let mid2 = rk_step(&state, &k2, 0.5 * h);
            let k3 = deriv(t0 + 0.5 * h, &mid2)?;
            let end = rk_step(&state, &k3, h);
            let k4 = deriv(t0 + h, &end)?;
            for i in 0..6 {
                state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if !state.iter().all(|v| v.is_finite())
                || state[1..].iter().any(|v| *v > SATURATION_CUTOFF)
            {
                saturated = true;
                break 'cells;
            }
        }
        t = t_next;
        u_partials.push(state[4]);
        v_partials.push(state[5]);
        if state[4] > DIVERGENCE_CUTOFF && state[5] > DIVERGENCE_CUTOFF {
            break;
        }
    }

    let u = decide_finiteness(&u_partials, saturated);
    let v = decide_finiteness(&v_partials, saturated);
    let verdict = match (&u, &v) {
        (Finiteness::Undecided, _) | (_, Finiteness::Undecided) => None,
        (Finiteness::Finite { .. }, Finiteness::Finite { .. }) => Some(Classification::Regular),
        (Finiteness::Finite { .. }, Finiteness::Infinite) => Some(Classification::Exit),
        (Finiteness::Infinite, Finiteness::Finite { .. }) => Some(Classification::Entrance),
        (Finiteness::Infinite, Finiteness::Infinite) => Some(Classification::Natural),
    };
    Ok(BoundaryClassification {
        side,
        verdict,
        u,
        v,
        u_partials,
        v_partials,
    })
}

fn rk_step(state: &[f64; 6], k: &[f64; 6], h: f64) -> [f64; 6] {
    let mut out = *state;
    for i in 0..6 {
        out[i] += h * k[i];
    }
    out
}

// ---------------------------------------------------------------------------
// Condition checks and B/C derivation
// ---------------------------------------------------------------------------

/// Regularity check on the coefficients: uniform ellipticity of `a`, linear
/// growth of `b`, boundedness of `c`, twice differentiability of all three.
/// Failures are report entries with the witnessing sample point.
pub fn check_condition_proper(model: &DiffusionModel, samples: &[f64]) -> VerificationReport {
    let mut report = VerificationReport::new("condition: proper diffusion operator");

    for (name, e) in [("a", &model.a), ("b", &model.b), ("c", &model.c)] {
        if e.is_smooth() {
            report.push(CheckRecord::pass(format!("{name} twice differentiable")));
        } else {
            report.push(
                CheckRecord::fail(
                    format!("{name} twice differentiable"),
                    Witness::new("min/max node in coefficient tree", f64::NAN),
                )
                .with_detail("coefficient contains a non-smooth min/max node"),
            );
        }
    }

    let mut a_min = f64::INFINITY;
    let mut a_max: f64 = 0.0;
    let mut a_min_at = f64::NAN;
    let mut eval_failure = None;
    for &x in samples {
        match model.eval_a(x) {
            Ok(v) => {
                if v < a_min {
                    a_min = v;
                    a_min_at = x;
                }
                a_max = a_max.max(v);
            }
            Err(err) => {
                eval_failure = Some((x, err));
                break;
            }
        }
    }
    if let Some((x, err)) = eval_failure {
        report.push(
            CheckRecord::fail("ellipticity", Witness::new(format!("x = {x}"), f64::NAN))
                .with_detail(format!("a evaluation failed: {err}")),
        );
    } else if a_min <= 0.0 || a_min < 1e-6 * a_max {
        report.push(
            CheckRecord::fail(
                "ellipticity",
                Witness::new(format!("x = {a_min_at}"), a_min),
            )
            .with_detail(format!(
                "a not uniformly elliptic on samples: min {a_min} at x = {a_min_at}, max {a_max}"
            )),
        );
    } else {
        let a_bar = a_max.max(1.0 / a_min);
        report.push(
            CheckRecord::pass("ellipticity").with_detail(format!("estimated a-bar = {a_bar}")),
        );
    }

    // fit the growth constant on the inner half of the samples, then demand
    // the bound holds on all of them
    let growth_check = |name: &str, e: &Expr, growth_fn: &dyn Fn(f64) -> f64| -> CheckRecord {
        let mut pairs = Vec::new();
        for &x in samples {
            match e.evaluate(&[x]) {
                Ok(v) => pairs.push((x, v)),
                Err(err) => {
                    return CheckRecord::fail(
                        format!("{name} growth"),
                        Witness::new(format!("x = {x}"), f64::NAN),
                    )
                    .with_detail(format!("evaluation failed: {err}"));
                }
            }
        }
        let mut sorted: Vec<f64> = pairs.iter().map(|(x, _)| x.abs()).collect();
        sorted.sort_by(f64::total_cmp);
        let inner_radius = sorted[sorted.len() / 2];
        let fitted = pairs
            .iter()
            .filter(|(x, _)| x.abs() <= inner_radius)
            .map(|(x, v)| v.abs() / growth_fn(*x))
            .fold(0.0f64, f64::max);
        for (x, v) in &pairs {
            if v.abs() > fitted * growth_fn(*x) * (1.0 + 1e-9) + 1e-12 {
                return CheckRecord::fail(
                    format!("{name} growth"),
                    Witness::new(format!("x = {x}"), v.abs()),
                )
                .with_detail(format!(
                    "|{name}({x})| = {} exceeds fitted bound {} * {}",
                    v.abs(),
                    fitted,
                    growth_fn(*x)
                ));
            }
        }
        CheckRecord::pass(format!("{name} growth")).with_detail(format!("fitted constant {fitted}"))
    };
    report.push(growth_check("b", &model.b, &|x: f64| 1.0 + x.abs()));
    report.push(growth_check("c", &model.c, &|_| 1.0));

    report
}

/// Boundary condition of a derived operator B at one endpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivedBoundary {
    /// `gamma f(e) = f'(e)`; gamma = -inf (right) / +inf (left) degenerates to
    /// `f(e) = 0`.
    Robin { gamma: f64 },
    /// `f(e) = 0`
    Dirichlet,
    /// `f'(e) = 0`
    Neumann,
    /// no condition (endpoint not in the state space)
    Free,
}

/// One derived operator `B f = a/2 f'' + b f' + zeroth f` with its boundary
/// conditions.
#[derive(Debug, Clone)]
pub struct DerivedOperator {
    pub a: Expr,
    pub b: Expr,
    pub zeroth: Expr,
    pub left: DerivedBoundary,
    pub right: DerivedBoundary,
}

/// Output of [`derive_bc`]: the B blocks, the coupling matrix C (as
/// expressions over the block index), and the admissibility report naming any
/// violated hypothesis.
#[derive(Debug, Clone)]
pub struct DerivedIntertwining {
    pub order: DiffusionOrder,
    pub b_ops: Vec<DerivedOperator>,
    /// C as a block matrix of coefficient expressions; `c[i][j]` multiplies
    /// block j of the order map in row block i.
    pub c: Vec<Vec<Expr>>,
    pub admissibility: VerificationReport,
}

impl DerivedIntertwining {
    pub fn admissible(&self) -> bool {
        self.admissibility.passed()
    }
}

fn symbolic_zero_check(name: &str, e: &Expr, samples: &[f64]) -> CheckRecord {
    let s = e.simplify();
    if s.is_zero() {
        return CheckRecord::pass(format!("{name} = 0")).with_detail("symbolic zero");
    }
    if let Some(p) = s.to_polynomial(1) {
        if p.is_zero() {
            return CheckRecord::pass(format!("{name} = 0"))
                .with_detail("polynomial normalization zero");
        }
    }
    for &x in samples {
        match s.evaluate(&[x]) {
            Ok(v) if v.abs() > 1e-12 => {
                return CheckRecord::fail(
                    format!("{name} = 0"),
                    Witness::new(format!("x = {x}"), v),
                );
            }
            Ok(_) => {}
            Err(err) => {
                return CheckRecord::fail(
                    format!("{name} = 0"),
                    Witness::new(format!("x = {x}"), f64::NAN),
                )
                .with_detail(format!("evaluation failed: {err}"));
            }
        }
    }
    CheckRecord::undecided(
        format!("{name} = 0"),
        "numerically zero on samples (unproven)",
    )
}

fn sampled_sign_check(name: &str, e: &Expr, samples: &[f64], nonneg: bool) -> CheckRecord {
    for &x in samples {
        match e.evaluate(&[x]) {
            Ok(v) => {
                let bad = if nonneg { v < -1e-12 } else { v > 1e-12 };
                if bad {
                    return CheckRecord::fail(name, Witness::new(format!("x = {x}"), v));
                }
            }
            Err(err) => {
                return CheckRecord::fail(name, Witness::new(format!("x = {x}"), f64::NAN))
                    .with_detail(format!("evaluation failed: {err}"));
            }
        }
    }
    CheckRecord::pass(name)
}

/// Gamma value of the model's boundary at `side`, when the kind is in the
/// gamma family.
pub fn model_gamma(model: &DiffusionModel, side: Side) -> Result<Option<f64>, EvalError> {
    let e = model.endpoint(side);
    if e.is_infinite() {
        return Ok(None);
    }
    let a_e = model.eval_a(e)?;
    let b_e = model.eval_b(e)?;
    Ok(kind_to_gamma(model.boundary(side), a_e, b_e, side))
}

/// Symbolic construction of the intertwined operators B (and C) for one of
/// the three 1-d orders, with an admissibility report listing each hypothesis
/// of the corresponding preservation theorem.
pub fn derive_bc(model: &DiffusionModel, order: DiffusionOrder) -> DerivedIntertwining {
    let samples = model.interior_samples(64);
    let mut report = VerificationReport::new(format!("derive B/C for {} order", order.as_str()));

    let a = model.a.clone();
    let b = model.b.clone();
    let a1 = model.a.differentiate(0);
    let a2 = a1.differentiate(0);
    let b1 = model.b.differentiate(0);
    let b2 = b1.differentiate(0);
    let half = |e: Expr| Expr::mul(Expr::Const(0.5), e).simplify();

    // smoothness of the derivatives used by the formulas
    if !model.a.is_smooth() || !model.b.is_smooth() {
        report.push(
            CheckRecord::fail(
                "coefficients smooth",
                Witness::new("min/max node in a or b", f64::NAN),
            )
            .with_detail("symbolic derivatives of a, b unavailable"),
        );
    } else {
        report.push(CheckRecord::pass("coefficients smooth"));
    }
    // no killing: the order maps do not commute with the zeroth-order term
    report.push(symbolic_zero_check(
        "killing coefficient c",
        &model.c,
        &samples,
    ));

    // boundary kinds must lie in the gamma family
    let mut gammas = [f64::NAN, f64::NAN];
    for (idx, side) in [Side::Left, Side::Right].into_iter().enumerate() {
        let e = model.endpoint(side);
        if e.is_infinite() {
            gammas[idx] = f64::NAN;
            continue;
        }
        match model_gamma(model, side) {
            Ok(Some(g)) => {
                gammas[idx] = g;
                report.push(CheckRecord::pass(format!(
                    "{} boundary in gamma family (gamma = {g})",
                    side.as_str()
                )));
            }
            Ok(None) => {
                report.push(CheckRecord::fail(
                    format!("{} boundary in gamma family", side.as_str()),
                    Witness::new(model.boundary(side).kind_name(), f64::NAN),
                ));
            }
            Err(err) => {
                report.push(
                    CheckRecord::fail(
                        format!("{} boundary in gamma family", side.as_str()),
                        Witness::new(format!("x = {e}"), f64::NAN),
                    )
                    .with_detail(format!("boundary coefficient evaluation failed: {err}")),
                );
            }
        }
    }

    let increasing_block = || DerivedOperator {
        a: a.clone(),
        b: Expr::add(half(a1.clone()), b.clone()).simplify(),
        zeroth: b1.clone(),
        left: gamma_boundary(gammas[0], Side::Left),
        right: gamma_boundary(gammas[1], Side::Right),
    };
    let convex_block = || DerivedOperator {
        a: a.clone(),
        b: Expr::add(a1.clone(), b.clone()).simplify(),
        zeroth: Expr::add(half(a2.clone()), Expr::mul(Expr::Const(2.0), b1.clone())).simplify(),
        left: DerivedBoundary::Dirichlet,
        right: DerivedBoundary::Dirichlet,
    };

    let (b_ops, c) = match order {
        DiffusionOrder::Increasing => (vec![increasing_block()], vec![vec![Expr::Const(0.0)]]),
        DiffusionOrder::Convex => {
            bounded_interval_check(model, &mut report);
            report.push(symbolic_zero_check("b''", &b2, &samples));
            boundary_drift_sign_checks(model, &mut report);
            zero_gamma_checks(model, &gammas, &mut report);
            (vec![convex_block()], vec![vec![Expr::Const(0.0)]])
        }
        DiffusionOrder::IncreasingConvex => {
            bounded_interval_check(model, &mut report);
            report.push(sampled_sign_check("b'' >= 0", &b2, &samples, true));
            boundary_drift_sign_checks(model, &mut report);
            zero_gamma_checks(model, &gammas, &mut report);
            let mut b1_block = increasing_block();
            // theorem uses Neumann conditions for the first block
            b1_block.left = DerivedBoundary::Neumann;
            b1_block.right = DerivedBoundary::Neumann;
            (
                vec![b1_block, convex_block()],
                vec![
                    vec![Expr::Const(0.0), Expr::Const(0.0)],
                    vec![b2.clone(), Expr::Const(0.0)],
                ],
            )
        }
    };

    DerivedIntertwining {
        order,
        b_ops,
        c,
        admissibility: report,
    }
}

fn gamma_boundary(gamma: f64, side: Side) -> DerivedBoundary {
    if gamma.is_nan() {
        return DerivedBoundary::Free;
    }
    let reflecting = match side {
        Side::Left => f64::INFINITY,
        Side::Right => f64::NEG_INFINITY,
    };
    if gamma == reflecting {
        DerivedBoundary::Dirichlet
    } else {
        DerivedBoundary::Robin { gamma }
    }
}

fn bounded_interval_check(model: &DiffusionModel, report: &mut VerificationReport) {
    if model.l.is_finite() && model.r.is_finite() {
        report.push(CheckRecord::pass("bounded interval"));
    } else {
        report.push(CheckRecord::fail(
            "bounded interval",
            Witness::new(format!("[{}, {}]", model.l, model.r), f64::NAN),
        ));
    }
}

fn boundary_drift_sign_checks(model: &DiffusionModel, report: &mut VerificationReport) {
    if model.l.is_finite() {
        match model.eval_b(model.l) {
            Ok(v) if v >= -1e-12 => report.push(CheckRecord::pass("b(l) >= 0")),
            Ok(v) => report.push(CheckRecord::fail(
                "b(l) >= 0",
                Witness::new(format!("x = {}", model.l), v),
            )),
            Err(err) => report.push(
                CheckRecord::fail(
                    "b(l) >= 0",
                    Witness::new(format!("x = {}", model.l), f64::NAN),
                )
                .with_detail(format!("{err}")),
            ),
        }
    }
    if model.r.is_finite() {
        match model.eval_b(model.r) {
            Ok(v) if v <= 1e-12 => report.push(CheckRecord::pass("b(r) <= 0")),
            Ok(v) => report.push(CheckRecord::fail(
                "b(r) <= 0",
                Witness::new(format!("x = {}", model.r), v),
            )),
            Err(err) => report.push(
                CheckRecord::fail(
                    "b(r) <= 0",
                    Witness::new(format!("x = {}", model.r), f64::NAN),
                )
                .with_detail(format!("{err}")),
            ),
        }
    }
}

fn zero_gamma_checks(model: &DiffusionModel, gammas: &[f64; 2], report: &mut VerificationReport) {
    for (idx, side) in [Side::Left, Side::Right].into_iter().enumerate() {
        if model.endpoint(side).is_infinite() {
            continue;
        }
        let g = gammas[idx];
        if g.is_finite() && g.abs() <= 1e-10 {
            report.push(CheckRecord::pass(format!(
                "{} boundary has gamma = 0 (f''(e) = 0)",
                side.as_str()
            )));
        } else {
            report.push(CheckRecord::fail(
                format!("{} boundary has gamma = 0 (f''(e) = 0)", side.as_str()),
                Witness::new(side.as_str(), g),
            ));
        }
    }
}

/// Residual polynomial of the symbolic intertwining identity
/// `Phi A f - (B Phi f + C Phi f)` on the monomial test function `x^k`.
///
/// Returns one residual per block row of the order map, or `None` when the
/// coefficients are outside the polynomial fragment.
pub fn symbolic_intertwining_residual(
    model: &DiffusionModel,
    derived: &DerivedIntertwining,
    k: u32,
) -> Option<Vec<Polynomial>> {
    let a = model.a.to_polynomial(1)?;
    let b = model.b.to_polynomial(1)?;
    let c = model.c.to_polynomial(1)?;
    let f = Polynomial::monomial(1, 0, k);
    let d = |p: &Polynomial| p.differentiate(0);

    // A f = a/2 f'' + b f' - c f
    let af = a
        .scale(0.5)
        .mul(&d(&d(&f)))
        .add(&b.mul(&d(&f)))
        .sub(&c.mul(&f));

    let phis: Vec<Polynomial> = match derived.order {
        DiffusionOrder::Increasing => vec![d(&f)],
        DiffusionOrder::Convex => vec![d(&d(&f))],
        DiffusionOrder::IncreasingConvex => vec![d(&f), d(&d(&f))],
    };
    let phi_af: Vec<Polynomial> = match derived.order {
        DiffusionOrder::Increasing => vec![d(&af)],
        DiffusionOrder::Convex => vec![d(&d(&af))],
        DiffusionOrder::IncreasingConvex => vec![d(&af), d(&d(&af))],
    };

    let mut residuals = Vec::new();
    for (row, op) in derived.b_ops.iter().enumerate() {
        let op_a = op.a.to_polynomial(1)?;
        let op_b = op.b.to_polynomial(1)?;
        let op_z = op.zeroth.to_polynomial(1)?;
        let g = &phis[row];
        let mut rhs = op_a
            .scale(0.5)
            .mul(&d(&d(g)))
            .add(&op_b.mul(&d(g)))
            .add(&op_z.mul(g));
        for (col, centry) in derived.c[row].iter().enumerate() {
            let cp = centry.to_polynomial(1)?;
            rhs = rhs.add(&cp.mul(&phis[col]));
        }
        residuals.push(phi_af[row].sub(&rhs));
    }
    Some(residuals)
}
