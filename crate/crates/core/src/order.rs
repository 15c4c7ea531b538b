//! Order-cone utilities shared by all verifiers: test-function families,
//! cone membership, and stochastic dominance between finite distributions.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::discretize::DiscreteOrderMap;
use crate::multid::IndexSet;

/// The three 1-d diffusion orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionOrder {
    Increasing,
    Convex,
    IncreasingConvex,
}

impl DiffusionOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            DiffusionOrder::Increasing => "increasing",
            DiffusionOrder::Convex => "convex",
            DiffusionOrder::IncreasingConvex => "increasing_convex",
        }
    }
}

/// Order specification across all state-space kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum OrderSpec {
    Increasing,
    Convex,
    IncreasingConvex,
    MultiIndex(IndexSet),
    SpinMonotone,
}

impl OrderSpec {
    pub fn as_diffusion_order(&self) -> Option<DiffusionOrder> {
        match self {
            OrderSpec::Increasing => Some(DiffusionOrder::Increasing),
            OrderSpec::Convex => Some(DiffusionOrder::Convex),
            OrderSpec::IncreasingConvex => Some(DiffusionOrder::IncreasingConvex),
            _ => None,
        }
    }
}

/// Domain a test family lives on.
#[derive(Debug, Clone)]
pub enum FamilyDomain {
    /// 1-d grid points.
    Grid1d(Vec<f64>),
    /// Tensor grid, state index `ix * ny + iy`.
    Grid2d { nx: usize, ny: usize },
    /// Spin configurations of n sites, states indexed by bitmask.
    Spin { sites: usize },
}

impl FamilyDomain {
    pub fn n_states(&self) -> usize {
        match self {
            FamilyDomain::Grid1d(points) => points.len(),
            FamilyDomain::Grid2d { nx, ny } => nx * ny,
            FamilyDomain::Spin { sites } => 1usize << sites,
        }
    }
}

/// Quantize to a dyadic lattice so cumulative sums below the mantissa width
/// stay exact and every cone margin check is free of rounding noise.
fn dyadic(v: f64) -> f64 {
    (v * (1u64 << 20) as f64).round() / (1u64 << 20) as f64
}

/// Deterministic family of test functions in the cone of `order`,
/// constructed so that the discrete order map of each member is
/// nonnegative in exact arithmetic.
pub fn generate_test_family(
    order: &OrderSpec,
    domain: &FamilyDomain,
    count: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match (order, domain) {
        (OrderSpec::Increasing, FamilyDomain::Grid1d(points)) => {
            increasing_family(points.len(), count, &mut rng)
        }
        (OrderSpec::Convex, FamilyDomain::Grid1d(points)) => {
            convex_family(points.len(), count, &mut rng, false)
        }
        (OrderSpec::IncreasingConvex, FamilyDomain::Grid1d(points)) => {
            convex_family(points.len(), count, &mut rng, true)
        }
        (OrderSpec::MultiIndex(index_set), FamilyDomain::Grid2d { nx, ny }) => {
            multi_index_family(index_set, *nx, *ny, count, &mut rng)
        }
        (OrderSpec::SpinMonotone, FamilyDomain::Spin { sites }) => {
            spin_monotone_family(*sites, count, &mut rng)
        }
        _ => panic!("order/domain combination not supported"),
    }
}

/// Smoothed threshold functions: cumulative sums of nonnegative dyadic bump
/// increments centered at random knots, so forward differences are exactly
/// nonnegative.
fn increasing_family(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let knot = rng.gen_range(1..n.max(2) - 1) as f64;
            let width = rng.gen_range(0.5..(n as f64 / 4.0).max(0.6));
            let mut f = Vec::with_capacity(n);
            let mut acc = 0.0;
            for i in 0..n {
                f.push(acc);
                let bump = (-(((i as f64 - knot) / width).powi(2))).exp();
                acc += dyadic(bump / width);
            }
            f
        })
        .collect()
}

/// Hinge-like functions: double cumulative sums of nonnegative dyadic mass.
/// With `increasing` the first sums also start nonnegative, putting the
/// function in the increasing-convex cone.
fn convex_family(n: usize, count: usize, rng: &mut ChaCha8Rng, increasing: bool) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| {
            // every third member is a pure hinge anchored at a grid index
            if k % 3 == 0 {
                let knot = rng.gen_range(1..n - 1);
                return (0..n).map(|i| i.saturating_sub(knot) as f64).collect();
            }
            let knot = rng.gen_range(1..n.max(2) - 1) as f64;
            let width = rng.gen_range(0.5..(n as f64 / 4.0).max(0.6));
            let mut slope = if increasing {
                0.0
            } else {
                // start with a negative slope so plain convex members decrease
                // then increase
                dyadic(-rng.gen_range(0.2..1.0))
            };
            let mut acc = 0.0;
            let mut f = Vec::with_capacity(n);
            for i in 0..n {
                f.push(acc);
                acc += slope * 0.03125; // exact dyadic step
                let bump = (-(((i as f64 - knot) / width).powi(2))).exp();
                slope += dyadic(bump / width);
            }
            f
        })
        .collect()
}

/// Functions with nonnegative order-map entries for each index in the set:
/// separable sums for first-order indices, products of coordinatewise
/// increasing factors for pairs. All values are exact dyadics.
fn multi_index_family(
    index_set: &IndexSet,
    nx: usize,
    ny: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    assert_eq!(index_set.dim(), 2, "grid families are desk-scale 2-d");
    let only_pairs = index_set.indices().iter().all(|alpha| alpha.norm1() == 2);
    (0..count)
        .map(|_| {
            // exact increasing 0..1-ish profiles per axis
            let profile = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
                let knot = rng.gen_range(0..n) as f64;
                let width = rng.gen_range(1.0..(n as f64 / 3.0).max(1.1));
                let mut acc = 0.0;
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    out.push(acc);
                    acc += dyadic((-(((i as f64 - knot) / width).powi(2))).exp() / width);
                }
                out
            };
            let u = profile(nx, rng);
            let v = profile(ny, rng);
            let mut f = vec![0.0; nx * ny];
            for ix in 0..nx {
                for iy in 0..ny {
                    // u, v values are bounded dyadics, so the product and the
                    // optional separable part are exact and the mixed
                    // differences reproduce the increment products exactly
                    let mut val = u[ix] * v[iy];
                    if !only_pairs {
                        val += 0.5 * u[ix] + 0.5 * v[iy];
                    }
                    f[ix * ny + iy] = val;
                }
            }
            f
        })
        .collect()
}

/// 0/1 up-set indicators for small n (exhaustive), otherwise maxima of
/// weighted min-terms.
fn spin_monotone_family(sites: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if sites <= 4 {
        let all = enumerate_monotone_boolean(sites);
        return all
            .into_iter()
            .take(if count == 0 { usize::MAX } else { count.max(1) })
            .collect();
    }
    let n_states = 1usize << sites;
    (0..count)
        .map(|_| {
            let k = rng.gen_range(1..=4usize);
            let terms: Vec<(u32, f64)> = (0..k)
                .map(|_| {
                    let mask = rng.gen_range(1u32..(1u32 << sites));
                    let w = dyadic(rng.gen_range(0.1..1.0));
                    (mask, w)
                })
                .collect();
            (0..n_states)
                .map(|state| {
                    terms
                        .iter()
                        .filter(|(mask, _)| state as u32 & mask == *mask)
                        .map(|&(_, w)| w)
                        .fold(0.0, f64::max)
                })
                .collect()
        })
        .collect()
}

/// All monotone 0/1 functions on {0,1}^sites, as value vectors over the
/// 2^sites states (168 functions for four sites).
pub fn enumerate_monotone_boolean(sites: usize) -> Vec<Vec<f64>> {
    assert!(sites <= 4, "exhaustive enumeration is limited to 4 sites");
    let n_states = 1usize << sites;
    let mut out = Vec::new();
    for candidate in 0u64..(1u64 << n_states) {
        let value = |state: usize| (candidate >> state) & 1;
        let mut monotone = true;
        'scan: for state in 0..n_states {
            for site in 0..sites {
                if state & (1 << site) == 0 {
                    let upper = state | (1 << site);
                    if value(state) > value(upper) {
                        monotone = false;
                        break 'scan;
                    }
                }
            }
        }
        if monotone {
            out.push((0..n_states).map(|s| value(s) as f64).collect());
        }
    }
    out
}

/// Worst margin of a spin function over all covering pairs
/// `(state, state with one site raised)`; nonnegative means monotone.
pub fn spin_monotone_margin(f: &[f64], sites: usize) -> f64 {
    let n_states = 1usize << sites;
    assert_eq!(f.len(), n_states);
    let mut worst = f64::INFINITY;
    for state in 0..n_states {
        for site in 0..sites {
            if state & (1 << site) == 0 {
                worst = worst.min(f[state | (1 << site)] - f[state]);
            }
        }
    }
    worst
}

/// Cone membership of a grid function through its discrete order map.
#[derive(Debug, Clone, Copy)]
pub struct ConeMembership {
    pub member: bool,
    pub worst_margin: f64,
}

pub fn cone_membership(f: &[f64], phi: &DiscreteOrderMap, tol: f64) -> ConeMembership {
    let values = phi.apply(f);
    let worst_margin = values.iter().copied().fold(f64::INFINITY, f64::min);
    ConeMembership {
        member: worst_margin >= -tol,
        worst_margin,
    }
}

// ---------------------------------------------------------------------------
// Distributions and stochastic dominance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Error)]
pub enum DistributionError {
    #[error("negative probability {value} at state {state}")]
    Negative { state: usize, value: f64 },
    #[error("total mass {0} differs from 1 beyond 1e-12")]
    BadTotal(f64),
}

/// Finite distribution over labeled states with an explicit killed-mass
/// entry.
#[derive(Debug, Clone)]
pub struct Distribution {
    pub probs: Vec<f64>,
    pub killed: f64,
}

impl Distribution {
    pub fn new(probs: Vec<f64>, killed: f64) -> Result<Distribution, DistributionError> {
        for (state, &value) in probs.iter().enumerate() {
            if value < -1e-15 {
                return Err(DistributionError::Negative { state, value });
            }
        }
        let total: f64 = probs.iter().sum::<f64>() + killed;
        if (total - 1.0).abs() > 1e-12 {
            return Err(DistributionError::BadTotal(total));
        }
        Ok(Distribution { probs, killed })
    }

    pub fn point_mass(n: usize, at: usize) -> Distribution {
        let mut probs = vec![0.0; n];
        probs[at] = 1.0;
        Distribution { probs, killed: 0.0 }
    }

    pub fn expectation(&self, f: &[f64]) -> f64 {
        self.probs.iter().zip(f).map(|(p, v)| p * v).sum()
    }

    /// Mean of the support values (live mass only).
    pub fn mean(&self, values: &[f64]) -> f64 {
        self.expectation(values)
    }
}

/// Dominance verdict; `Undecided` is returned when a non-exhaustive family
/// all passed.
#[derive(Debug, Clone, PartialEq)]
pub enum DominanceVerdict {
    Dominated,
    NotDominated { witness: String, margin: f64 },
    Undecided,
}

/// Test `p` below `q` in the given integral order.
///
/// The 1-d increasing order is decided exactly via survivor-function
/// comparison (killed mass counts as bottom). The 1-d convex and
/// increasing-convex orders are decided by the hinge family over all support
/// knots, which is exhaustive up to grid resolution. Everything else is
/// family-based: a violation refutes dominance, full passes stay undecided.
pub fn stochastic_dominance(
    p: &Distribution,
    q: &Distribution,
    order: &OrderSpec,
    support: Option<&[f64]>,
    family: &[Vec<f64>],
) -> DominanceVerdict {
    let tol = 1e-10;
    match (order, support) {
        (OrderSpec::Increasing, Some(values)) => {
            // E_p f <= E_q f for all increasing f iff the survivor function
            // of p never exceeds that of q
            let mut order_idx: Vec<usize> = (0..values.len()).collect();
            order_idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
            let mut tail_p = 0.0;
            let mut tail_q = 0.0;
            for &i in order_idx.iter().rev() {
                tail_p += p.probs[i];
                tail_q += q.probs[i];
                if tail_p > tail_q + tol {
                    return DominanceVerdict::NotDominated {
                        witness: format!("threshold above x = {}", values[i]),
                        margin: tail_p - tail_q,
                    };
                }
            }
            DominanceVerdict::Dominated
        }
        (OrderSpec::Convex, Some(values)) | (OrderSpec::IncreasingConvex, Some(values)) => {
            let convex = matches!(order, OrderSpec::Convex);
            if convex && (p.killed > tol || q.killed > tol) {
                return DominanceVerdict::Undecided;
            }
            if convex {
                // means must match: both x and -x are convex
                let gap = p.mean(values) - q.mean(values);
                if gap.abs() > tol {
                    return DominanceVerdict::NotDominated {
                        witness: "mean (affine test functions)".to_string(),
                        margin: gap.abs(),
                    };
                }
            } else {
                // f = x is increasing convex
                let gap = p.mean(values) - q.mean(values);
                if gap > tol {
                    return DominanceVerdict::NotDominated {
                        witness: "identity test function".to_string(),
                        margin: gap,
                    };
                }
            }
            for &k in values {
                let hinge: Vec<f64> = values.iter().map(|&x| (x - k).max(0.0)).collect();
                let gap = p.expectation(&hinge) - q.expectation(&hinge);
                if gap > tol {
                    return DominanceVerdict::NotDominated {
                        witness: format!("hinge at k = {k}"),
                        margin: gap,
                    };
                }
            }
            DominanceVerdict::Dominated
        }
        _ => {
            for (idx, f) in family.iter().enumerate() {
                let gap = p.expectation(f) - q.expectation(f);
                if gap > tol {
                    return DominanceVerdict::NotDominated {
                        witness: format!("family member {idx}"),
                        margin: gap,
                    };
                }
            }
            DominanceVerdict::Undecided
        }
    }
}
