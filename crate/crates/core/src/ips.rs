//! Finite spin systems: flip-rate rules on a site graph, rate constants,
//! attractiveness, the exact generator / order map / B / C matrices with
//! `Phi A = (B + C) Phi`, monotone-cone preservation, and event-driven
//! Gillespie simulation for site counts beyond the matrix range.

use thiserror::Error;

use crate::discretize::{GridOperator, OperatorKind};
use crate::order::{enumerate_monotone_boolean, spin_monotone_margin};
use crate::par;
use crate::report::{CheckRecord, VerificationReport, Witness};
use crate::semigroup::{expm_apply, SemigroupError};

/// Spin configuration as a bitmask over sites (site i is bit i).
pub type SpinConfig = usize;

/// Flip-rate rule of a spin system.
#[derive(Debug, Clone)]
pub enum RateRule {
    /// Infected sites (`1`) heal at rate 1; healthy sites get infected at
    /// `lambda` times the number of infected neighbours.
    Contact { lambda: f64 },
    /// Flip toward each disagreeing neighbour at rate 1.
    Voter,
    /// Heat-bath dynamics for the ferromagnetic Ising model at inverse
    /// temperature `beta` (spins `0/1` mapped to `-1/+1`).
    Glauber { beta: f64 },
    /// Spin-independent flips at a fixed rate.
    Independent { rate: f64 },
    /// Explicit rate table: `table[site][config]`.
    Custom { table: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Error)]
pub enum IpsError {
    #[error("site count {0} exceeds the limit {1} for this operation")]
    TooManySites(usize, usize),
    #[error("custom rate table must have {expected} rows of length 2^{sites}")]
    BadCustomTable { expected: usize, sites: usize },
    #[error("edge ({u}, {v}) is invalid for {sites} sites")]
    BadEdge { u: usize, v: usize, sites: usize },
    #[error("rates must be finite and nonnegative; c({site}, {config:#b}) = {value}")]
    BadRate {
        site: usize,
        config: SpinConfig,
        value: f64,
    },
    #[error("matrix operation failed: {0}")]
    Semigroup(#[from] SemigroupError),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

/// Finite spin system: sites with an adjacency graph and a flip-rate rule.
#[derive(Debug, Clone)]
pub struct SpinSystem {
    sites: usize,
    adjacency: Vec<Vec<usize>>,
    pub rule: RateRule,
}

const MATRIX_SITE_LIMIT: usize = 12;
const BUILTIN_SITE_LIMIT: usize = 20;

impl SpinSystem {
    pub fn new(
        sites: usize,
        edges: &[(usize, usize)],
        rule: RateRule,
    ) -> Result<SpinSystem, IpsError> {
        let mut adjacency = vec![Vec::new(); sites];
        for &(u, v) in edges {
            if u >= sites || v >= sites || u == v {
                return Err(IpsError::BadEdge { u, v, sites });
            }
            if !adjacency[u].contains(&v) {
                adjacency[u].push(v);
                adjacency[v].push(u);
            }
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
        }
        if let RateRule::Custom { table } = &rule {
            if sites > MATRIX_SITE_LIMIT {
                return Err(IpsError::TooManySites(sites, MATRIX_SITE_LIMIT));
            }
            if table.len() != sites || table.iter().any(|row| row.len() != 1 << sites) {
                return Err(IpsError::BadCustomTable {
                    expected: sites,
                    sites,
                });
            }
            for (site, row) in table.iter().enumerate() {
                for (config, &value) in row.iter().enumerate() {
                    if !(value.is_finite() && value >= 0.0) {
                        return Err(IpsError::BadRate {
                            site,
                            config,
                            value,
                        });
                    }
                }
            }
        }
        Ok(SpinSystem {
            sites,
            adjacency,
            rule,
        })
    }

    /// Path graph 0 - 1 - ... - (n-1).
    pub fn path(sites: usize, rule: RateRule) -> Result<SpinSystem, IpsError> {
        let edges: Vec<(usize, usize)> = (1..sites).map(|i| (i - 1, i)).collect();
        SpinSystem::new(sites, &edges, rule)
    }

    /// Custom system from a rate closure (exhaustively tabulated).
    pub fn custom_from_fn(
        sites: usize,
        edges: &[(usize, usize)],
        rate: impl Fn(usize, SpinConfig, &[Vec<usize>]) -> f64,
    ) -> Result<SpinSystem, IpsError> {
        let mut adjacency = vec![Vec::new(); sites];
        for &(u, v) in edges {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        let table: Vec<Vec<f64>> = (0..sites)
            .map(|i| {
                (0..1usize << sites)
                    .map(|config| rate(i, config, &adjacency))
                    .collect()
            })
            .collect();
        SpinSystem::new(sites, edges, RateRule::Custom { table })
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn neighbors(&self, site: usize) -> &[usize] {
        &self.adjacency[site]
    }

    pub fn n_configs(&self) -> usize {
        1 << self.sites
    }

    /// Flip rate c(i, sigma).
    pub fn rate(&self, site: usize, config: SpinConfig) -> f64 {
        let bit = |s: usize| (config >> s) & 1;
        match &self.rule {
            RateRule::Contact { lambda } => {
                if bit(site) == 1 {
                    1.0
                } else {
                    let infected = self.adjacency[site]
                        .iter()
                        .filter(|&&j| bit(j) == 1)
                        .count();
                    lambda * infected as f64
                }
            }
            RateRule::Voter => self.adjacency[site]
                .iter()
                .filter(|&&j| bit(j) != bit(site))
                .count() as f64,
            RateRule::Glauber { beta } => {
                let spin = |s: usize| 2.0 * bit(s) as f64 - 1.0;
                let field: f64 = self.adjacency[site].iter().map(|&j| spin(j)).sum();
                let delta_h = 2.0 * spin(site) * field;
                1.0 / (1.0 + (beta * delta_h).exp())
            }
            RateRule::Independent { rate } => *rate,
            RateRule::Custom { table } => table[site][config],
        }
    }

    /// Flip rate from a state slice; equivalent to [`SpinSystem::rate`] but
    /// usable beyond 64 sites (bitmask configurations cap out there).
    pub fn rate_in_state(&self, site: usize, state: &[bool]) -> f64 {
        match &self.rule {
            RateRule::Contact { lambda } => {
                if state[site] {
                    1.0
                } else {
                    let infected = self.adjacency[site].iter().filter(|&&j| state[j]).count();
                    lambda * infected as f64
                }
            }
            RateRule::Voter => self.adjacency[site]
                .iter()
                .filter(|&&j| state[j] != state[site])
                .count() as f64,
            RateRule::Glauber { beta } => {
                let spin = |s: usize| 2.0 * (state[s] as u8 as f64) - 1.0;
                let field: f64 = self.adjacency[site].iter().map(|&j| spin(j)).sum();
                let delta_h = 2.0 * spin(site) * field;
                1.0 / (1.0 + (beta * delta_h).exp())
            }
            RateRule::Independent { rate } => *rate,
            RateRule::Custom { table } => {
                let config = state
                    .iter()
                    .enumerate()
                    .fold(0usize, |acc, (i, &s)| acc | ((s as usize) << i));
                table[site][config]
            }
        }
    }

    /// Sites whose rate depends on the state at `site` (itself plus its
    /// neighbours for the builtin local rules, everything for custom
    /// tables).
    fn dependents(&self, site: usize) -> Vec<usize> {
        match &self.rule {
            RateRule::Custom { .. } => (0..self.sites).collect(),
            _ => {
                let mut out = vec![site];
                out.extend_from_slice(&self.adjacency[site]);
                out
            }
        }
    }

    /// The dependency neighbourhood of `site`'s own rate.
    fn dependency_set(&self, site: usize) -> Vec<usize> {
        match &self.rule {
            RateRule::Custom { .. } => (0..self.sites).collect(),
            _ => {
                let mut out = vec![site];
                out.extend_from_slice(&self.adjacency[site]);
                out.sort_unstable();
                out
            }
        }
    }

    fn enumeration_limit(&self) -> usize {
        match self.rule {
            RateRule::Custom { .. } => MATRIX_SITE_LIMIT,
            _ => BUILTIN_SITE_LIMIT,
        }
    }
}

/// Enumerate all configurations over the free sites in `support`, filling the
/// other sites with zeros; rates of local rules only see their dependency
/// set, so this is exhaustive for them.
fn enumerate_over(support: &[usize], mut visit: impl FnMut(SpinConfig)) {
    let k = support.len();
    for mask in 0..1usize << k {
        let mut config = 0usize;
        for (pos, &site) in support.iter().enumerate() {
            if (mask >> pos) & 1 == 1 {
                config |= 1 << site;
            }
        }
        visit(config);
    }
}

/// Exact rate constants of a spin system: the maximal flip rate per site,
/// the per-pair variation constants, and the correlation-spread constant
/// `M = max_x sum_{u != x} c_u(x)`.
#[derive(Debug, Clone)]
pub struct RateConstants {
    pub c: Vec<f64>,
    pub c_u: Vec<Vec<f64>>,
    pub m: f64,
}

pub fn rate_constants(sys: &SpinSystem) -> Result<RateConstants, IpsError> {
    let n = sys.sites();
    if n > sys.enumeration_limit() {
        return Err(IpsError::TooManySites(n, sys.enumeration_limit()));
    }
    let mut c = vec![0.0f64; n];
    let mut c_u = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        let dep = sys.dependency_set(i);
        enumerate_over(&dep, |config| {
            c[i] = c[i].max(sys.rate(i, config));
        });
        for u in 0..n {
            if u == i {
                continue;
            }
            let mut support = dep.clone();
            if !support.contains(&u) {
                support.push(u);
            }
            enumerate_over(&support, |config| {
                let flipped = config ^ (1 << u);
                let gap = (sys.rate(i, config) - sys.rate(i, flipped)).abs();
                c_u[i][u] = c_u[i][u].max(gap);
            });
        }
    }
    let m = (0..n)
        .map(|x| (0..n).filter(|&u| u != x).map(|u| c_u[x][u]).sum::<f64>())
        .fold(0.0, f64::max);
    Ok(RateConstants { c, c_u, m })
}

/// Attractiveness: for every site pair `i != x` and configuration, raising
/// the spin at `x` must raise the up-flip rate (`sigma_i = 0`) and lower the
/// down-flip rate (`sigma_i = 1`). Witnesses record `(i, x, sigma)`.
pub fn check_attractive(sys: &SpinSystem) -> Result<VerificationReport, IpsError> {
    let n = sys.sites();
    if n > sys.enumeration_limit() {
        return Err(IpsError::TooManySites(n, sys.enumeration_limit()));
    }
    let mut report = VerificationReport::new("attractiveness");
    for i in 0..n {
        for x in 0..n {
            if x == i {
                continue;
            }
            let mut support = sys.dependency_set(i);
            if !support.contains(&x) {
                support.push(x);
            }
            let mut worst: Option<(SpinConfig, f64)> = None;
            enumerate_over(&support, |config| {
                let up = sys.rate(i, config | (1 << x));
                let down = sys.rate(i, config & !(1 << x));
                let margin = if (config >> i) & 1 == 0 {
                    up - down
                } else {
                    down - up
                };
                if margin < -1e-15 && worst.map(|(_, w)| margin < w).unwrap_or(true) {
                    worst = Some((config, margin));
                }
            });
            let name = format!("c({i}, sigma[{x},1]) vs c({i}, sigma[{x},0])");
            report.push(match worst {
                None => CheckRecord::pass(name),
                Some((config, margin)) => CheckRecord::fail(
                    name,
                    Witness::new(format!("i={i} x={x} sigma={config:#b}"), margin),
                ),
            });
        }
    }
    Ok(report)
}

/// Exact matrices of the spin system on `2^n` configurations; row index of
/// the lifted space is `x * 2^n + sigma`.
#[derive(Debug, Clone)]
pub struct IpsMatrices {
    pub a: GridOperator,
    pub phi: GridOperator,
    pub b: GridOperator,
    pub c: GridOperator,
}

impl IpsMatrices {
    pub fn lifted_index(&self, sites: usize, config: SpinConfig, x: usize) -> usize {
        let _ = sites;
        x * self.a.nrows() + config
    }
}

pub fn build_matrices(sys: &SpinSystem) -> Result<IpsMatrices, IpsError> {
    let n = sys.sites();
    if n > MATRIX_SITE_LIMIT {
        return Err(IpsError::TooManySites(n, MATRIX_SITE_LIMIT));
    }
    let states = sys.n_configs();
    let lifted = states * n;
    let idx = |config: SpinConfig, x: usize| x * states + config;

    let mut a = GridOperator::zeros(states, states, OperatorKind::Generator);
    for config in 0..states {
        let mut total = 0.0;
        for i in 0..n {
            let rate = sys.rate(i, config);
            if rate != 0.0 {
                a.add_entry(config, config ^ (1 << i), rate);
                total += rate;
            }
        }
        if total != 0.0 {
            a.add_entry(config, config, -total);
        }
    }

    let mut phi = GridOperator::zeros(lifted, states, OperatorKind::OrderMap);
    for x in 0..n {
        for config in 0..states {
            phi.add_entry(idx(config, x), config | (1 << x), 1.0);
            phi.add_entry(idx(config, x), config & !(1 << x), -1.0);
        }
    }

    let mut b = GridOperator::zeros(lifted, lifted, OperatorKind::Generator);
    let mut c = GridOperator::zeros(lifted, lifted, OperatorKind::General);
    for x in 0..n {
        for config in 0..states {
            let row = idx(config, x);
            let up = config | (1 << x);
            let down = config & !(1 << x);
            let mut diag = 0.0;
            for i in 0..n {
                let avg = 0.5 * (sys.rate(i, up) + sys.rate(i, down));
                if i == x {
                    // on the range of Phi a flip at x acts as killing at the
                    // summed rate: discrete gradients do not depend on bit x,
                    // and the expansion of Phi A there is -2 avg g(sigma, x)
                    diag -= 2.0 * avg;
                    continue;
                }
                if avg != 0.0 {
                    b.add_entry(row, idx(config ^ (1 << i), x), avg);
                    diag -= avg;
                }
                let sign = if (config >> i) & 1 == 0 { 1.0 } else { -1.0 };
                let w = 0.5 * sign * (sys.rate(i, up) - sys.rate(i, down));
                if w != 0.0 {
                    c.add_entry(row, idx(up, i), w);
                    c.add_entry(row, idx(down, i), w);
                }
            }
            if diag != 0.0 {
                b.add_entry(row, row, diag);
            }
        }
    }
    Ok(IpsMatrices { a, phi, b, c })
}

/// Max-norm of `Phi A - (B + C) Phi`; identically zero in exact arithmetic.
pub fn intertwining_residual(m: &IpsMatrices) -> f64 {
    let lhs = m.phi.matmul(&m.a);
    let rhs = m.b.add(&m.c).matmul(&m.phi);
    lhs.sub(&rhs).max_abs()
}

/// Triple norm: sum over sites of the maximal single-site variation.
pub fn triple_norm(f: &[f64], sites: usize) -> f64 {
    let states = 1 << sites;
    assert_eq!(f.len(), states);
    (0..sites)
        .map(|x| {
            (0..states)
                .filter(|config| (config >> x) & 1 == 0)
                .map(|config| (f[config | (1 << x)] - f[config]).abs())
                .fold(0.0, f64::max)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreservationMode {
    /// All monotone 0/1 functions (sites <= 4).
    Exhaustive,
    /// Random maxima of weighted min-terms.
    Randomized { count: usize, seed: u64 },
}

/// Check that the semigroup maps monotone functions to monotone functions:
/// for each test function and time, evolve by the exact matrix exponential
/// and scan all covering pairs.
pub fn verify_monotone_preservation(
    sys: &SpinSystem,
    times: &[f64],
    mode: PreservationMode,
) -> Result<VerificationReport, IpsError> {
    let n = sys.sites();
    let family: Vec<Vec<f64>> = match mode {
        PreservationMode::Exhaustive => {
            if n > 4 {
                return Err(IpsError::TooManySites(n, 4));
            }
            enumerate_monotone_boolean(n)
        }
        PreservationMode::Randomized { count, seed } => {
            if n > MATRIX_SITE_LIMIT {
                return Err(IpsError::TooManySites(n, MATRIX_SITE_LIMIT));
            }
            crate::order::generate_test_family(
                &crate::order::OrderSpec::SpinMonotone,
                &crate::order::FamilyDomain::Spin { sites: n },
                count,
                seed,
            )
        }
    };
    let matrices = build_matrices(sys)?;
    let mut report = VerificationReport::new("monotone preservation");
    for &t in times {
        let margins: Vec<Result<f64, SemigroupError>> = par::map_slice(&family, |f| {
            let evolved = expm_apply(&matrices.a, t, f)?;
            Ok(spin_monotone_margin(&evolved, n))
        });
        let mut worst = f64::INFINITY;
        let mut worst_member = 0;
        for (idx, m) in margins.into_iter().enumerate() {
            let m = m?;
            if m < worst {
                worst = m;
                worst_member = idx;
            }
        }
        let name = format!("S(t) preserves monotone functions at t = {t}");
        report.push(if worst >= -1e-10 {
            CheckRecord::pass(name)
                .with_margin(worst, 1e-10)
                .with_detail(format!("{} test functions", family.len()))
        } else {
            // locate the covering pair for the witness
            let evolved = expm_apply(&matrices.a, t, &family[worst_member])?;
            let mut loc = (0usize, 0usize);
            'outer: for config in 0..sys.n_configs() {
                for site in 0..n {
                    if (config >> site) & 1 == 0 {
                        let gap = evolved[config | (1 << site)] - evolved[config];
                        if gap <= worst + 1e-15 {
                            loc = (config, site);
                            break 'outer;
                        }
                    }
                }
            }
            CheckRecord::fail(
                name,
                Witness::new(
                    format!(
                        "member {worst_member}, sigma = {:#b}, site {}",
                        loc.0, loc.1
                    ),
                    worst,
                ),
            )
        });
    }
    Ok(report)
}

/// Check `Phi e^{tA} f >= e^{tB} h` entrywise on the lifted space, given
/// `Phi f >= h >= 0`.
pub fn verify_ips_lower_bound(
    sys: &SpinSystem,
    f: &[f64],
    h: &[f64],
    t: f64,
) -> Result<VerificationReport, IpsError> {
    let matrices = build_matrices(sys)?;
    let phi_f = matrices.phi.matvec(f);
    if h.iter().any(|v| *v < -1e-12) {
        return Err(IpsError::Precondition("h must be nonnegative".into()));
    }
    if phi_f.iter().zip(h).any(|(pf, hv)| pf - hv < -1e-12) {
        return Err(IpsError::Precondition("need Phi f >= h".into()));
    }
    let mut report = VerificationReport::new(format!("spin lower bound at t = {t}"));
    let lhs = matrices.phi.matvec(&expm_apply(&matrices.a, t, f)?);
    let rhs = expm_apply(&matrices.b, t, h)?;
    let mut worst = f64::INFINITY;
    let mut at = 0;
    for (i, (l, r)) in lhs.iter().zip(&rhs).enumerate() {
        if l - r < worst {
            worst = l - r;
            at = i;
        }
    }
    report.push(if worst >= -1e-10 {
        CheckRecord::pass("Phi e^(tA) f >= e^(tB) h").with_margin(worst, 1e-10)
    } else {
        CheckRecord::fail(
            "Phi e^(tA) f >= e^(tB) h",
            Witness::new(format!("lifted entry {at}"), worst),
        )
    });
    Ok(report)
}

// ---------------------------------------------------------------------------
// Gillespie simulation
// ---------------------------------------------------------------------------

/// Fenwick tree over site rates for O(log n) sampling and updates.
struct RateTree {
    tree: Vec<f64>,
}

impl RateTree {
    fn new(rates: &[f64]) -> RateTree {
        let n = rates.len();
        let mut tree = vec![0.0; n + 1];
        for (i, &r) in rates.iter().enumerate() {
            let mut idx = i + 1;
            while idx <= n {
                tree[idx] += r;
                idx += idx & idx.wrapping_neg();
            }
        }
        RateTree { tree }
    }

    fn total(&self) -> f64 {
        self.prefix(self.tree.len() - 1)
    }

    fn prefix(&self, mut idx: usize) -> f64 {
        let mut s = 0.0;
        while idx > 0 {
            s += self.tree[idx];
            idx -= idx & idx.wrapping_neg();
        }
        s
    }

    fn add(&mut self, i: usize, delta: f64) {
        let n = self.tree.len() - 1;
        let mut idx = i + 1;
        while idx <= n {
            self.tree[idx] += delta;
            idx += idx & idx.wrapping_neg();
        }
    }

    /// Smallest site with prefix sum exceeding `target`.
    fn sample(&self, target: f64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0usize;
        let mut remaining = target;
        let mut mask = n.next_power_of_two();
        while mask > 0 {
            let next = pos + mask;
            if next <= n && self.tree[next] <= remaining {
                remaining -= self.tree[next];
                pos = next;
            }
            mask >>= 1;
        }
        pos.min(n - 1)
    }
}

/// Empirical statistics of a Gillespie run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GillespieStats {
    pub paths: usize,
    pub t: f64,
    /// Mean and standard error of each site's spin at time t.
    pub marginal_mean: Vec<f64>,
    pub marginal_se: Vec<f64>,
    /// Mean and standard error of each supplied observable.
    pub observable_mean: Vec<f64>,
    pub observable_se: Vec<f64>,
}

/// Event-driven exact simulation of the spin system, `paths` independent
/// replicas to time `t`. Deterministic per seed regardless of thread count.
/// Observables are arbitrary functions of the final configuration bits.
pub fn gillespie(
    sys: &SpinSystem,
    sigma0: &[bool],
    t: f64,
    seed: u64,
    paths: usize,
    observables: &[&(dyn Fn(&[bool]) -> f64 + Sync)],
) -> GillespieStats {
    use rand::Rng;
    use rand::SeedableRng;
    let n = sys.sites();
    assert_eq!(sigma0.len(), n);

    let per_path: Vec<(Vec<bool>, Vec<f64>)> = par::map_indexed(paths, |path| {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&(path as u64).to_le_bytes());
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(key);

        let mut state: Vec<bool> = sigma0.to_vec();
        let mut rates: Vec<f64> = (0..n).map(|i| sys.rate_in_state(i, &state)).collect();
        let mut tree = RateTree::new(&rates);
        let mut clock = 0.0;
        loop {
            let total = tree.total();
            if total <= 0.0 {
                break;
            }
            let u: f64 = rng.gen_range(0.0..1.0f64);
            clock += -(1.0 - u).ln() / total;
            if clock >= t {
                break;
            }
            let site = tree.sample(rng.gen_range(0.0..total));
            state[site] = !state[site];
            for &j in &sys.dependents(site) {
                let fresh = sys.rate_in_state(j, &state);
                tree.add(j, fresh - rates[j]);
                rates[j] = fresh;
            }
        }
        let obs: Vec<f64> = observables.iter().map(|f| f(&state)).collect();
        (state, obs)
    });

    let mut marg_sum = vec![0.0f64; n];
    let mut marg_sq = vec![0.0f64; n];
    let mut obs_sum = vec![0.0f64; observables.len()];
    let mut obs_sq = vec![0.0f64; observables.len()];
    for (state, obs) in &per_path {
        for (i, &s) in state.iter().enumerate() {
            let v = s as u8 as f64;
            marg_sum[i] += v;
            marg_sq[i] += v * v;
        }
        for (k, &v) in obs.iter().enumerate() {
            obs_sum[k] += v;
            obs_sq[k] += v * v;
        }
    }
    let p = paths as f64;
    let finish = |sum: &[f64], sq: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mean: Vec<f64> = sum.iter().map(|s| s / p).collect();
        let se: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s2, m)| (((s2 / p - m * m).max(0.0)) / p).sqrt())
            .collect();
        (mean, se)
    };
    let (marginal_mean, marginal_se) = finish(&marg_sum, &marg_sq);
    let (observable_mean, observable_se) = finish(&obs_sum, &obs_sq);
    GillespieStats {
        paths,
        t,
        marginal_mean,
        marginal_se,
        observable_mean,
        observable_se,
    }
}

/// Anti-voter rates (flip toward agreement count) for refutation tests and
/// example models: a non-attractive rule.
pub fn anti_voter(sites: usize, edges: &[(usize, usize)]) -> Result<SpinSystem, IpsError> {
    SpinSystem::custom_from_fn(sites, edges, |i, config, adjacency| {
        let bit = |s: usize| (config >> s) & 1;
        adjacency[i].iter().filter(|&&j| bit(j) == bit(i)).count() as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contact_rate_constants_on_a_path() {
        let lambda = 1.5;
        let sys = SpinSystem::path(4, RateRule::Contact { lambda }).unwrap();
        let rc = rate_constants(&sys).unwrap();
        // interior site 1: heal rate 1 or up to 2 infected neighbours
        assert_eq!(rc.c[1], 2.0 * lambda.max(0.5));
        assert_eq!(rc.c[1], 2.0 * lambda);
        assert_eq!(rc.c_u[1][0], lambda);
        assert_eq!(rc.c_u[1][2], lambda);
        assert_eq!(rc.c_u[1][3], 0.0);
        // endpoint site 0: one neighbour
        assert_eq!(rc.c[0], lambda.max(1.0));
    }

    #[test]
    fn voter_rate_constants_on_a_path() {
        let sys = SpinSystem::path(4, RateRule::Voter).unwrap();
        let rc = rate_constants(&sys).unwrap();
        assert_eq!(rc.c[1], 2.0);
        assert_eq!(rc.c_u[1][0], 1.0);
        assert_eq!(rc.c_u[1][2], 1.0);
        assert_eq!(rc.m, 2.0);
    }

    #[test]
    fn independent_flips_have_no_interaction() {
        let sys = SpinSystem::path(5, RateRule::Independent { rate: 1.0 }).unwrap();
        let rc = rate_constants(&sys).unwrap();
        assert!(rc.c.iter().all(|&v| v == 1.0));
        assert_eq!(rc.m, 0.0);
    }

    #[test]
    fn contact_voter_glauber_are_attractive() {
        for n in [3, 6, 10] {
            for rule in [
                RateRule::Contact { lambda: 0.8 },
                RateRule::Voter,
                RateRule::Glauber { beta: 0.5 },
            ] {
                let sys = SpinSystem::path(n, rule).unwrap();
                let report = check_attractive(&sys).unwrap();
                assert!(!report.has_failure(), "n = {n}");
            }
        }
    }

    #[test]
    fn anti_voter_is_not_attractive() {
        let sys = anti_voter(3, &[(0, 1), (1, 2)]).unwrap();
        let report = check_attractive(&sys).unwrap();
        let failure = report.first_failure().expect("anti-voter must fail");
        assert!(failure.witness.is_some());
    }

    #[test]
    fn single_site_generator() {
        let sys = SpinSystem::new(1, &[], RateRule::Independent { rate: 0.7 }).unwrap();
        let m = build_matrices(&sys).unwrap();
        assert_eq!(m.a.get(0, 1), 0.7);
        assert_eq!(m.a.get(1, 0), 0.7);
        assert_eq!(m.a.get(0, 0), -0.7);
    }

    #[test]
    fn intertwining_is_exact_for_small_systems() {
        for n in 2..=6 {
            for rule in [
                RateRule::Contact { lambda: 1.0 },
                RateRule::Voter,
                RateRule::Glauber { beta: 0.3 },
            ] {
                let sys = SpinSystem::path(n, rule).unwrap();
                let m = build_matrices(&sys).unwrap();
                let res = intertwining_residual(&m);
                assert!(res <= 1e-12, "residual {res} at n = {n}");
            }
        }
        let sys = anti_voter(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let m = build_matrices(&sys).unwrap();
        assert!(intertwining_residual(&m) <= 1e-12);
    }

    #[test]
    fn attractive_iff_c_nonnegative() {
        let cases: Vec<SpinSystem> = vec![
            SpinSystem::path(4, RateRule::Contact { lambda: 1.2 }).unwrap(),
            SpinSystem::path(4, RateRule::Voter).unwrap(),
            anti_voter(4, &[(0, 1), (1, 2), (2, 3)]).unwrap(),
            SpinSystem::path(4, RateRule::Glauber { beta: 0.7 }).unwrap(),
        ];
        for sys in cases {
            let attractive = !check_attractive(&sys).unwrap().has_failure();
            let m = build_matrices(&sys).unwrap();
            let c_nonneg = m.c.negative_entry(0.0).is_none();
            assert_eq!(attractive, c_nonneg);
        }
    }

    #[test]
    fn independent_flips_preserve_monotone_functions() {
        let sys = SpinSystem::path(3, RateRule::Independent { rate: 1.0 }).unwrap();
        let report =
            verify_monotone_preservation(&sys, &[0.5, 2.0], PreservationMode::Exhaustive).unwrap();
        assert!(!report.has_failure());
    }

    #[test]
    fn contact_process_preserves_monotone_functions() {
        let sys = SpinSystem::path(4, RateRule::Contact { lambda: 1.5 }).unwrap();
        let report =
            verify_monotone_preservation(&sys, &[0.1, 1.0], PreservationMode::Exhaustive).unwrap();
        assert!(!report.has_failure());
    }

    #[test]
    fn anti_voter_violates_monotone_preservation() {
        let sys = anti_voter(3, &[(0, 1), (1, 2)]).unwrap();
        let report = verify_monotone_preservation(
            &sys,
            &[0.05, 0.1, 0.25, 0.5],
            PreservationMode::Exhaustive,
        )
        .unwrap();
        let failure = report
            .first_failure()
            .expect("counterexample must be found");
        assert!(failure.witness.is_some());
    }

    #[test]
    fn lower_bound_with_h_equal_phi_f() {
        let sys = SpinSystem::path(3, RateRule::Contact { lambda: 1.0 }).unwrap();
        let m = build_matrices(&sys).unwrap();
        // monotone f: number of infected sites
        let f: Vec<f64> = (0..8).map(|c: usize| c.count_ones() as f64).collect();
        let h = m.phi.matvec(&f);
        let report = verify_ips_lower_bound(&sys, &f, &h, 0.5).unwrap();
        assert!(!report.has_failure(), "{report:?}");
        // h = 0 reduces to monotone preservation
        let zero = vec![0.0; h.len()];
        let report = verify_ips_lower_bound(&sys, &f, &zero, 0.5).unwrap();
        assert!(!report.has_failure());
    }

    #[test]
    fn triple_norm_growth_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for rule in [RateRule::Contact { lambda: 0.9 }, RateRule::Voter] {
            let sys = SpinSystem::path(4, rule).unwrap();
            let rc = rate_constants(&sys).unwrap();
            let m = build_matrices(&sys).unwrap();
            for _ in 0..10 {
                let f: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for t in [0.2, 1.0] {
                    let evolved = expm_apply(&m.a, t, &f).unwrap();
                    let lhs = triple_norm(&evolved, 4);
                    let rhs = (t * rc.m).exp() * triple_norm(&f, 4);
                    assert!(
                        lhs <= rhs + 1e-9,
                        "|||S(t)f||| = {lhs} vs e^(tM)|||f||| = {rhs}"
                    );
                }
            }
        }
    }

    #[test]
    fn monotone_iff_phi_rows_nonnegative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let sys = SpinSystem::path(4, RateRule::Voter).unwrap();
        let m = build_matrices(&sys).unwrap();
        for _ in 0..200 {
            let f: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let by_pairs = spin_monotone_margin(&f, 4) >= 0.0;
            let by_phi = m.phi.matvec(&f).iter().all(|v| *v >= 0.0);
            assert_eq!(by_pairs, by_phi);
        }
    }

    #[test]
    fn frozen_system_stays_at_start() {
        let sys = SpinSystem::path(3, RateRule::Independent { rate: 0.0 }).unwrap();
        let sigma0 = [true, false, true];
        let stats = gillespie(&sys, &sigma0, 2.0, 5, 200, &[]);
        assert_eq!(stats.marginal_mean, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn gillespie_marginals_match_expm() {
        let sys = SpinSystem::path(4, RateRule::Contact { lambda: 1.0 }).unwrap();
        let m = build_matrices(&sys).unwrap();
        let sigma0 = [true, false, false, true];
        let start: usize = 0b1001;
        let t = 0.8;
        let paths = 30_000;
        let stats = gillespie(&sys, &sigma0, t, 42, paths, &[]);
        for site in 0..4 {
            let indicator: Vec<f64> = (0..16).map(|c: usize| ((c >> site) & 1) as f64).collect();
            let evolved = expm_apply(&m.a, t, &indicator).unwrap();
            let exact = evolved[start];
            let se = stats.marginal_se[site].max(1e-4);
            assert!(
                (stats.marginal_mean[site] - exact).abs() <= 4.0 * se,
                "site {site}: {} vs {exact} (se {se})",
                stats.marginal_mean[site]
            );
        }
    }

    #[test]
    fn paired_seeds_respect_monotone_coupling() {
        // two ordered starts under attractive rates: empirical E[f] ordering
        // holds within noise for a monotone observable
        let sys = SpinSystem::path(6, RateRule::Contact { lambda: 1.2 }).unwrap();
        let lower = [false, false, true, false, false, false];
        let upper = [true, false, true, false, true, true];
        let observable: &(dyn Fn(&[bool]) -> f64 + Sync) =
            &|s: &[bool]| s.iter().filter(|&&b| b).count() as f64;
        let lo = gillespie(&sys, &lower, 0.7, 77, 20_000, &[observable]);
        let hi = gillespie(&sys, &upper, 0.7, 77, 20_000, &[observable]);
        let se = (lo.observable_se[0].powi(2) + hi.observable_se[0].powi(2)).sqrt();
        assert!(
            lo.observable_mean[0] <= hi.observable_mean[0] + 4.0 * se,
            "{} vs {}",
            lo.observable_mean[0],
            hi.observable_mean[0]
        );
    }

    #[test]
    fn rate_in_state_matches_bitmask_rates() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for rule in [
            RateRule::Contact { lambda: 1.3 },
            RateRule::Voter,
            RateRule::Glauber { beta: 0.6 },
            RateRule::Independent { rate: 0.4 },
        ] {
            let sys = SpinSystem::path(6, rule).unwrap();
            for _ in 0..50 {
                let config: SpinConfig = rng.gen_range(0..64);
                let state: Vec<bool> = (0..6).map(|i| (config >> i) & 1 == 1).collect();
                for i in 0..6 {
                    assert_eq!(sys.rate(i, config), sys.rate_in_state(i, &state));
                }
            }
        }
    }

    #[test]
    fn gillespie_scales_to_thousands_of_sites() {
        let n = 2000;
        let sys = SpinSystem::path(n, RateRule::Contact { lambda: 0.8 }).unwrap();
        let sigma0: Vec<bool> = (0..n).map(|i| i % 10 == 0).collect();
        let stats = gillespie(&sys, &sigma0, 0.5, 31, 8, &[]);
        assert_eq!(stats.marginal_mean.len(), n);
        assert!(stats.marginal_mean.iter().all(|m| (0.0..=1.0).contains(m)));
    }

    #[test]
    fn gillespie_is_deterministic() {
        let sys = SpinSystem::path(5, RateRule::Voter).unwrap();
        let sigma0 = [true, false, true, false, true];
        let s1 = gillespie(&sys, &sigma0, 1.0, 9, 3_000, &[]);
        let s2 = gillespie(&sys, &sigma0, 1.0, 9, 3_000, &[]);
        assert_eq!(s1.marginal_mean, s2.marginal_mean);
    }
}
