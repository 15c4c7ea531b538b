//! Acceptance suite: one test per criterion, each pinned to its stated
//! tolerance and runtime budget, printing a pass line on success (failures
//! panic with the offending value).

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use intertwine::diffusion1d::{
    classify_boundary, derive_bc, Classification, DiffusionModel, FellerBoundary, Side,
};
use intertwine::discretize::{
    birth_death_generator, build_generator, build_generator_gamma0, build_phi,
    derive_discrete_intertwiner, Grid, Grid2d, GridOperator,
};
use intertwine::expr::{parse, Expr, Polynomial};
use intertwine::ips::{
    anti_voter, build_matrices, check_attractive, gillespie, intertwining_residual, rate_constants,
    triple_norm, verify_ips_lower_bound, verify_monotone_preservation, PreservationMode, RateRule,
    SpinSystem,
};
use intertwine::multid::{
    build_b_alpha, check_gammabed, halton_samples, CheckMode, CoefficientField, IndexSet,
    MultiIndex,
};
use intertwine::order::{
    enumerate_monotone_boolean, generate_test_family, DiffusionOrder, FamilyDomain, OrderSpec,
};
use intertwine::semigroup::{
    certify_monotonicity, certify_monotonicity_md, compute_u_lambda, expm_apply, expm_row,
    resolvent, simulate_ctmc, verify_comparison, verify_fundamental_bound, verify_lower_bound,
    yosida_evolve, CertifyOptions, SemigroupError, Verdict,
};

fn finish(criterion: &str, started: Instant, budget: Duration) {
    let elapsed = started.elapsed();
    assert!(
        elapsed <= budget,
        "{criterion}: runtime {elapsed:?} exceeds budget {budget:?}"
    );
    println!("{criterion}: PASS ({elapsed:.2?})");
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dyadic_coeff(rng: &mut ChaCha8Rng, lo: i32, hi: i32) -> f64 {
    rng.gen_range(lo..=hi) as f64 / 2.0
}

/// Random polynomial with dyadic coefficients (exact f64 arithmetic).
fn random_poly_expr(rng: &mut ChaCha8Rng, degree: u32, scale: i32) -> Expr {
    let mut e = Expr::Const(dyadic_coeff(rng, -scale, scale));
    for d in 1..=degree {
        e = Expr::add(
            e,
            Expr::mul(
                Expr::Const(dyadic_coeff(rng, -scale, scale)),
                Expr::pow(Expr::var(0), d as i32),
            ),
        );
    }
    e.simplify()
}

fn model_on_unit(a: Expr, b: Expr, left: FellerBoundary, right: FellerBoundary) -> DiffusionModel {
    DiffusionModel::new(0.0, 1.0, a, b, Expr::Const(0.0), left, right).unwrap()
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_symbolic_intertwining_exactness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..50 {
        // uniformly elliptic polynomial a: large dyadic constant plus small
        // higher-order dyadic terms
        let a = Expr::add(
            Expr::Const(4.0 + rng.gen_range(0..4) as f64),
            random_poly_expr(&mut rng, 4, 2),
        )
        .simplify();
        let b_general = random_poly_expr(&mut rng, 4, 4);
        let b_affine = Expr::add(
            Expr::Const(dyadic_coeff(&mut rng, -4, 4)),
            Expr::mul(Expr::Const(dyadic_coeff(&mut rng, -4, 4)), Expr::var(0)),
        )
        .simplify();

        let m_general = model_on_unit(
            a.clone(),
            b_general,
            FellerBoundary::Reflecting,
            FellerBoundary::Reflecting,
        );
        let derived = derive_bc(&m_general, DiffusionOrder::Increasing);
        for k in 0..=6 {
            let residuals =
                intertwine::diffusion1d::symbolic_intertwining_residual(&m_general, &derived, k)
                    .expect("polynomial fragment");
            for (row, r) in residuals.iter().enumerate() {
                assert!(
                    r.is_zero(),
                    "trial {trial}, increasing, monomial x^{k}, row {row}: residual {r:?}"
                );
            }
        }

        let m_affine = model_on_unit(
            a.clone(),
            b_affine,
            FellerBoundary::Reflecting,
            FellerBoundary::Reflecting,
        );
        let derived = derive_bc(&m_affine, DiffusionOrder::Convex);
        for k in 0..=6 {
            let residuals =
                intertwine::diffusion1d::symbolic_intertwining_residual(&m_affine, &derived, k)
                    .expect("polynomial fragment");
            for r in &residuals {
                assert!(r.is_zero(), "trial {trial}, convex, monomial x^{k}");
            }
        }
    }
    finish(
        "criterion 01 (1-d symbolic intertwining, 50 random models)",
        started,
        Duration::from_secs(10),
    );
}

/// Random birth-death rates; monotone pattern (increasing up, decreasing
/// down) when `monotone` is set, with at least one strict violation
/// otherwise.
fn random_chain(rng: &mut ChaCha8Rng, n: usize, monotone: bool) -> (Vec<f64>, Vec<f64>) {
    if monotone {
        let mut up = vec![rng.gen_range(0.2..0.5)];
        let mut down = vec![rng.gen_range(1.0..1.5)];
        for _ in 1..n {
            up.push(up.last().unwrap() + rng.gen_range(0.0..0.5 / n as f64));
            down.push(down.last().unwrap() - rng.gen_range(0.0..0.5 / n as f64));
        }
        (up, down)
    } else {
        let up: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.5)).collect();
        let down: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.5)).collect();
        (up, down)
    }
}

fn interior_pattern_monotone(up: &[f64], down: &[f64]) -> bool {
    let n = up.len();
    (1..n - 2).all(|i| up[i + 1] >= up[i] && down[i] >= down[i + 1])
}

#[test]
fn criterion_02_discrete_intertwiner_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for trial in 0..100 {
        let n = rng.gen_range(8..=200);
        let monotone = trial % 2 == 0;
        let (up, down) = random_chain(&mut rng, n, monotone);
        let a_h = birth_death_generator(&up, &down);
        let grid = Grid::uniform(0.0, 1.0, n - 1).unwrap();
        let phi = build_phi(DiffusionOrder::Increasing, &grid).unwrap();
        let it = derive_discrete_intertwiner(&a_h, &phi).unwrap();
        assert!(
            it.residual <= 1e-10 * (1.0 + a_h.max_abs()),
            "trial {trial}: residual {}",
            it.residual
        );
        assert!(it.exact);

        // hand-expansion oracle over interior edges 1..n-2
        for i in 1..n - 2 {
            let sup = it.c.get(i, i + 1);
            let sub = it.c.get(i, i - 1);
            assert!(
                (sup - (up[i + 1] - up[i])).abs() <= 1e-12,
                "trial {trial} edge {i}"
            );
            assert!((sub - (down[i] - down[i + 1])).abs() <= 1e-12);
            let b_sup = it.b.get(i, i + 1);
            let b_sub = it.b.get(i, i - 1);
            assert!((b_sup - up[i]).abs() <= 1e-12);
            assert!((b_sub - down[i + 1]).abs() <= 1e-12);
        }

        let pattern = interior_pattern_monotone(&up, &down);
        assert_eq!(
            it.c_nonneg(),
            pattern,
            "trial {trial}: C_h >= 0 must match the monotone rate pattern"
        );
    }
    finish(
        "criterion 02 (discrete intertwiner on 100 random chains)",
        started,
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_03_fundamental_bound() {
    let started = Instant::now();
    // replay the criterion-2 chain stream and keep the monotone half
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let lambdas = [0.01, 0.1, 1.0];
    for trial in 0..100 {
        let n = rng.gen_range(8..=200);
        let monotone = trial % 2 == 0;
        let (up, down) = random_chain(&mut rng, n, monotone);
        if !monotone {
            continue;
        }
        let a_h = birth_death_generator(&up, &down);
        let grid = Grid::uniform(0.0, 1.0, n - 1).unwrap();
        let phi = build_phi(DiffusionOrder::Increasing, &grid).unwrap();
        let it = derive_discrete_intertwiner(&a_h, &phi).unwrap();
        assert!(it.c_nonneg(), "trial {trial} should be monotone");
        let family = generate_test_family(
            &OrderSpec::Increasing,
            &FamilyDomain::Grid1d(grid.points.clone()),
            50,
            303 + trial,
        );
        for &lambda in &lambdas {
            let report =
                verify_fundamental_bound(&a_h, &it.b, &it.c, &phi, lambda, &family).unwrap();
            assert!(
                !report.has_failure(),
                "trial {trial}, lambda {lambda}: {:?}",
                report.first_failure()
            );
        }
    }

    // constructed non-monotone chain: the bound against the edge chain B
    // must be violated for some threshold function and lambda
    let n = 8;
    let up = vec![2.0, 0.1, 2.0, 0.1, 2.0, 0.1, 2.0, 0.1];
    let down = vec![0.5; n];
    let a_h = birth_death_generator(&up, &down);
    let grid = Grid::uniform(0.0, 1.0, n - 1).unwrap();
    let phi = build_phi(DiffusionOrder::Increasing, &grid).unwrap();
    let it = derive_discrete_intertwiner(&a_h, &phi).unwrap();
    assert!(!it.c_nonneg());
    let mut violation = None;
    'search: for &lambda in &[0.05, 0.1, 0.5, 1.0] {
        for knot in 1..n {
            let g: Vec<f64> = (0..n).map(|i| if i >= knot { 1.0 } else { 0.0 }).collect();
            let lhs = phi.apply(&resolvent(&a_h, lambda, &g).unwrap());
            let rhs = resolvent(&it.b, lambda, &phi.apply(&g)).unwrap();
            for (i, (l, r)) in lhs.iter().zip(&rhs).enumerate() {
                if l - r < -1e-9 {
                    violation = Some((lambda, knot, i, l - r));
                    break 'search;
                }
            }
        }
    }
    let (lambda, knot, entry, value) =
        violation.expect("non-monotone chain must violate the B-relative bound");
    println!(
        "  violation witness: lambda = {lambda}, threshold at {knot}, entry {entry}, \
         margin {value:.3e}"
    );
    finish(
        "criterion 03 (fundamental bound + chain identity)",
        started,
        Duration::from_secs(60),
    );
}

#[test]
fn criterion_04_u_lambda_properties() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for trial in 0..100 {
        let n = rng.gen_range(4..=50);
        let (up, down) = random_chain(&mut rng, n, false);
        let b_h = birth_death_generator(&up, &down);
        let mut c_h = GridOperator::zeros(n, n, intertwine::discretize::OperatorKind::General);
        for _ in 0..2 * n {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            c_h.add_entry(i, j, rng.gen_range(0.0..0.4));
        }
        let lambda = 0.4 / (c_h.norm_inf() + 1.0);
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let u = compute_u_lambda(&b_h, &c_h, lambda, &g, 100_000).unwrap();
        for (i, (ui, gi)) in u.iter().zip(&g).enumerate() {
            assert!(ui + 1e-12 >= *gi, "trial {trial}: (U g)[{i}] < g[{i}]");
        }
        // direct dense-solve oracle
        let rb = (nalgebra::DMatrix::identity(n, n) - lambda * b_h.to_dense())
            .try_inverse()
            .unwrap();
        let system = nalgebra::DMatrix::identity(n, n) - lambda * c_h.to_dense() * rb;
        let direct = system
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(&g))
            .unwrap();
        for (x, y) in u.iter().zip(direct.iter()) {
            assert!(
                (x - y).abs() <= 1e-10 * (1.0 + norm_inf(&g)),
                "trial {trial}"
            );
        }
        // beyond the norm-estimate bound the series must refuse
        let big_lambda = 10.0 / (c_h.norm_inf() + 1e-9).min(1e9);
        match compute_u_lambda(&b_h, &c_h, big_lambda.max(1e3), &g, 100_000) {
            Err(SemigroupError::SeriesDivergence { .. }) => {}
            other => panic!("trial {trial}: expected divergence error, got {other:?}"),
        }
    }
    finish(
        "criterion 04 (U_lambda on 100 random instances)",
        started,
        Duration::from_secs(10),
    );
}

#[test]
fn criterion_05_yosida_convergence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let up: Vec<f64> = (0..10).map(|_| rng.gen_range(0.05..0.25)).collect();
    let down: Vec<f64> = (0..10).map(|_| rng.gen_range(0.05..0.25)).collect();
    let a_h = birth_death_generator(&up, &down);
    let f: Vec<f64> = (0..10).map(|i| (0.9 * i as f64).sin()).collect();
    let t = 1.0;
    let exact = expm_apply(&a_h, t, &f).unwrap();
    let mut prev = f64::INFINITY;
    for n in [10u64, 100, 1_000, 10_000] {
        let approx = yosida_evolve(&a_h, t, &f, n).unwrap();
        let gap = approx
            .iter()
            .zip(&exact)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(
            gap < prev,
            "gap must decrease: {gap} at n = {n} (prev {prev})"
        );
        if n == 10_000 {
            assert!(gap <= 1e-4, "gap {gap} at n = 10^4");
        }
        prev = gap;
    }
    finish(
        "criterion 05 (Yosida convergence)",
        started,
        Duration::from_secs(10),
    );
}

#[test]
fn criterion_06_boundary_classification() {
    let started = Instant::now();
    // Wright-Fisher: exit, not entrance, never undecided
    let wf = model_on_unit(
        parse("x*(1-x)", 1).unwrap(),
        Expr::Const(0.0),
        FellerBoundary::Absorbing,
        FellerBoundary::Absorbing,
    );
    for side in [Side::Left, Side::Right] {
        let c = classify_boundary(&wf, side).unwrap();
        assert_eq!(c.verdict, Some(Classification::Exit), "WF {side:?}");
    }

    // proper-condition models on bounded intervals: finite endpoints regular
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for trial in 0..10 {
        let a = Expr::add(
            Expr::Const(rng.gen_range(0.5..3.0)),
            Expr::mul(Expr::Const(rng.gen_range(-0.3..0.3)), Expr::var(0)),
        );
        let b = Expr::add(
            Expr::Const(rng.gen_range(-1.0..1.0)),
            Expr::mul(Expr::Const(rng.gen_range(-1.0..1.0)), Expr::var(0)),
        );
        let c = Expr::Const(rng.gen_range(0.0..0.5));
        let model = DiffusionModel::new(
            0.0,
            1.0,
            a,
            b,
            c,
            FellerBoundary::Reflecting,
            FellerBoundary::Reflecting,
        )
        .unwrap();
        for side in [Side::Left, Side::Right] {
            let cls = classify_boundary(&model, side).unwrap();
            assert_eq!(
                cls.verdict,
                Some(Classification::Regular),
                "trial {trial} {side:?}"
            );
        }
    }

    // Brownian motion on the line: natural at both infinities
    let bm = DiffusionModel::new(
        f64::NEG_INFINITY,
        f64::INFINITY,
        Expr::Const(1.0),
        Expr::Const(0.0),
        Expr::Const(0.0),
        FellerBoundary::Natural,
        FellerBoundary::Natural,
    )
    .unwrap();
    for side in [Side::Left, Side::Right] {
        let c = classify_boundary(&bm, side).unwrap();
        assert_eq!(c.verdict, Some(Classification::Natural));
    }
    finish(
        "criterion 06 (boundary classification, no undecided)",
        started,
        Duration::from_secs(20),
    );
}

#[test]
fn criterion_07_one_d_monotonicity_theorems() {
    let started = Instant::now();
    let opts = CertifyOptions {
        grid_cells: 100,
        lambdas: vec![0.01, 0.1, 1.0],
        times: vec![0.1, 1.0],
        family_size: 20,
        seed: 7,
        tol: 1e-8,
        truncation_radius: None,
    };

    // increasing order certified for every admissible gamma pair
    let kinds = [
        FellerBoundary::Reflecting,
        FellerBoundary::Sticky { mass: 1.0 },
        FellerBoundary::Absorbing,
    ];
    for left in kinds {
        for right in kinds {
            let model = model_on_unit(Expr::Const(1.0), Expr::Const(0.0), left, right);
            let cert = certify_monotonicity(&model, DiffusionOrder::Increasing, &opts).unwrap();
            assert_eq!(
                cert.verdict,
                Verdict::Certified,
                "increasing, {left:?}/{right:?}: {:?}",
                cert.report.first_failure()
            );
        }
    }

    // convex order under b(l) >= 0 >= b(r), b'' = 0, gamma = 0 boundaries
    let convex_models = [
        model_on_unit(
            Expr::Const(1.0),
            Expr::Const(0.0),
            FellerBoundary::Absorbing,
            FellerBoundary::Absorbing,
        ),
        model_on_unit(
            Expr::Const(1.0),
            parse("0.25 - 0.5*x", 1).unwrap(),
            FellerBoundary::Sticky { mass: 4.0 },
            FellerBoundary::Sticky { mass: 4.0 },
        ),
    ];
    for (idx, model) in convex_models.iter().enumerate() {
        let cert = certify_monotonicity(model, DiffusionOrder::Convex, &opts).unwrap();
        assert_eq!(
            cert.verdict,
            Verdict::Certified,
            "convex model {idx}: {:?}",
            cert.report.first_failure()
        );
    }

    // lower bound Phi e^{tA} f >= e^{tB} Phi f for 20 cone functions
    let model = model_on_unit(
        Expr::Const(1.0),
        Expr::Const(0.0),
        FellerBoundary::Reflecting,
        FellerBoundary::Reflecting,
    );
    let grid = Grid::uniform(0.0, 1.0, 100).unwrap();
    let a_h = build_generator(&model, &grid).unwrap();
    let phi = build_phi(DiffusionOrder::Increasing, &grid).unwrap();
    let it = derive_discrete_intertwiner(&a_h, &phi).unwrap();
    let family = generate_test_family(
        &OrderSpec::Increasing,
        &FamilyDomain::Grid1d(grid.points.clone()),
        20,
        7,
    );
    for &t in &[0.1, 1.0] {
        for (idx, f) in family.iter().enumerate() {
            let h_vec = phi.apply(f);
            let report = verify_lower_bound(&a_h, &it.b, &phi, f, &h_vec, t, 1e-8).unwrap();
            assert!(!report.has_failure(), "t = {t}, member {idx}");
        }
    }
    finish(
        "criterion 07 (1-d monotonicity theorems at desk scale)",
        started,
        Duration::from_secs(120),
    );
}

#[test]
fn criterion_08_comparison_theorems() {
    let started = Instant::now();
    let grid = Grid::uniform(0.0, 1.0, 100).unwrap();

    // drift-ordered pair with common boundaries: increasing-order sandwich
    let lower = model_on_unit(
        Expr::Const(1.0),
        parse("-x", 1).unwrap(),
        FellerBoundary::Reflecting,
        FellerBoundary::Reflecting,
    );
    let upper = model_on_unit(
        Expr::Const(1.0),
        parse("-x + 0.5", 1).unwrap(),
        FellerBoundary::Reflecting,
        FellerBoundary::Reflecting,
    );
    let a1 = build_generator(&lower, &grid).unwrap();
    let a2 = build_generator(&upper, &grid).unwrap();
    let phi = build_phi(DiffusionOrder::Increasing, &grid).unwrap();
    let family = generate_test_family(
        &OrderSpec::Increasing,
        &FamilyDomain::Grid1d(grid.points.clone()),
        50,
        808,
    );
    for &t in &[0.1, 1.0] {
        let report = verify_comparison(
            &a1,
            &a1,
            &a2,
            &phi,
            &OrderSpec::Increasing,
            &grid.points,
            &family,
            t,
        )
        .unwrap();
        assert!(
            !report.has_failure(),
            "t = {t}: {:?}",
            report.first_failure()
        );
    }
    // reversed pair: a genuine violation witness
    let reversed = verify_comparison(
        &a2,
        &a2,
        &a1,
        &phi,
        &OrderSpec::Increasing,
        &grid.points,
        &family,
        0.5,
    )
    .unwrap();
    assert!(
        reversed.has_failure(),
        "reversed drift pair must be refuted"
    );

    // diffusion-ordered pair with common affine drift: convex-order sandwich
    let b = parse("0.25 - 0.5*x", 1).unwrap();
    let mk = |a: &str| {
        model_on_unit(
            parse(a, 1).unwrap(),
            b.clone(),
            FellerBoundary::Sticky { mass: 4.0 },
            FellerBoundary::Sticky { mass: 4.0 },
        )
    };
    let m1 = mk("1");
    let m = mk("1 + 0.5*x*(1-x)");
    let m2 = mk("1 + x*(1-x)");
    let a1 = build_generator_gamma0(&m1, &grid).unwrap();
    let a = build_generator_gamma0(&m, &grid).unwrap();
    let a2 = build_generator_gamma0(&m2, &grid).unwrap();
    let phi = build_phi(DiffusionOrder::Convex, &grid).unwrap();
    let family = generate_test_family(
        &OrderSpec::Convex,
        &FamilyDomain::Grid1d(grid.points.clone()),
        50,
        809,
    );
    for &t in &[0.1, 1.0] {
        let report = verify_comparison(
            &a1,
            &a,
            &a2,
            &phi,
            &OrderSpec::Convex,
            &grid.points,
            &family,
            t,
        )
        .unwrap();
        assert!(
            !report.has_failure(),
            "convex comparison at t = {t}: {:?}",
            report.first_failure()
        );
    }
    let reversed = verify_comparison(
        &a2,
        &a,
        &a1,
        &phi,
        &OrderSpec::Convex,
        &grid.points,
        &family,
        0.5,
    )
    .unwrap();
    assert!(
        reversed.has_failure(),
        "reversed diffusion pair must be refuted"
    );

    finish(
        "criterion 08 (comparison theorems with witnesses)",
        started,
        Duration::from_secs(120),
    );
}

#[test]
fn criterion_09_multid_conditions() {
    let started = Instant::now();

    // first worked example: component-wise increasing order in d = 2
    let samples2 = halton_samples(2, &[-2.0, -2.0], &[2.0, 2.0], 200);
    let mut example1 = CoefficientField::isotropic(2);
    example1.set_a(0, 0, parse("1 + 0.1*x1^2", 2).unwrap());
    example1.set_a(1, 1, parse("1 + 0.1*x2^2", 2).unwrap());
    example1.set_a(0, 1, parse("0.2*x1*x2", 2).unwrap());
    example1.set_b(0, parse("-x1 + 0.5*x2", 2).unwrap());
    example1.set_b(1, parse("0.3*x1 - x2", 2).unwrap());
    let report = check_gammabed(
        &example1,
        &IndexSet::increasing(2),
        &samples2,
        CheckMode::SymbolicFirst,
    );
    assert!(
        !report.has_failure(),
        "example 1: {:?}",
        report.first_failure()
    );

    let mut perturbed = example1.clone();
    perturbed.set_b(0, parse("-x1 + 0.5*x2 - x2", 2).unwrap());
    let report = check_gammabed(
        &perturbed,
        &IndexSet::increasing(2),
        &samples2,
        CheckMode::SymbolicFirst,
    );
    let failure = report
        .first_failure()
        .expect("perturbation by -x2 must fail");
    assert!(failure.witness.is_some());

    // second worked example: supermodular order in d = 3
    let samples3 = halton_samples(3, &[-2.0; 3], &[2.0; 3], 200);
    let mut example2 = CoefficientField::isotropic(3);
    example2.set_a(0, 1, parse("0.25*exp(-(x1-x2)^2)", 3).unwrap());
    example2.set_a(0, 2, parse("0.2 + 0.05*x1*x3", 3).unwrap());
    example2.set_a(1, 2, parse("0.1*x2*x3", 3).unwrap());
    example2.set_b(0, parse("-x1", 3).unwrap());
    example2.set_b(1, parse("1 - x2^3", 3).unwrap());
    example2.set_b(2, parse("0.5*x3", 3).unwrap());
    let report = check_gammabed(
        &example2,
        &IndexSet::supermodular(3),
        &samples3,
        CheckMode::SymbolicFirst,
    );
    assert!(
        !report.has_failure(),
        "example 2: {:?}",
        report.first_failure()
    );

    let mut perturbed = example2.clone();
    perturbed.set_b(0, parse("-x1 + x2", 3).unwrap());
    let report = check_gammabed(
        &perturbed,
        &IndexSet::supermodular(3),
        &samples3,
        CheckMode::SymbolicFirst,
    );
    assert!(
        report.first_failure().is_some(),
        "perturbation by +x2 must fail"
    );

    // B^(alpha) at d = 1 agrees symbolically with derive_bc
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for _ in 0..20 {
        let a = Expr::add(
            Expr::Const(4.0 + rng.gen_range(0..4) as f64),
            random_poly_expr(&mut rng, 4, 2),
        )
        .simplify();
        let b = random_poly_expr(&mut rng, 4, 4);
        let mut field = CoefficientField::isotropic(1);
        field.set_a(0, 0, a.clone());
        field.set_b(0, b.clone());
        let model = model_on_unit(
            a.clone(),
            b.clone(),
            FellerBoundary::Reflecting,
            FellerBoundary::Reflecting,
        );
        let poly = |e: &Expr| e.to_polynomial(1).expect("polynomial coefficients");

        let alpha1 = build_b_alpha(&field, &MultiIndex::new(vec![1])).unwrap();
        let derived = derive_bc(&model, DiffusionOrder::Increasing);
        let op = &derived.b_ops[0];
        let zero = |p: Polynomial| assert!(p.is_zero());
        zero(poly(&alpha1.g(&MultiIndex::new(vec![2]))).sub(&poly(&op.a).scale(0.5)));
        zero(poly(&alpha1.g(&MultiIndex::new(vec![1]))).sub(&poly(&op.b)));
        zero(poly(&alpha1.g(&MultiIndex::new(vec![0]))).sub(&poly(&op.zeroth)));

        let alpha2 = build_b_alpha(&field, &MultiIndex::new(vec![2])).unwrap();
        let derived = derive_bc(&model, DiffusionOrder::Convex);
        let op = &derived.b_ops[0];
        zero(poly(&alpha2.g(&MultiIndex::new(vec![2]))).sub(&poly(&op.a).scale(0.5)));
        zero(poly(&alpha2.g(&MultiIndex::new(vec![1]))).sub(&poly(&op.b)));
        zero(poly(&alpha2.g(&MultiIndex::new(vec![0]))).sub(&poly(&op.zeroth)));
    }

    // d = 2 supermodular model certified on a 24 x 24 grid
    let mut field = CoefficientField::isotropic(2);
    field.set_a(0, 1, parse("0.8 * x1*(1-x1) * x2*(1-x2)", 2).unwrap());
    field.set_b(0, parse("-x1", 2).unwrap());
    field.set_b(1, parse("-x2", 2).unwrap());
    let grid = Grid2d::uniform([(0.0, 1.0), (0.0, 1.0)], [24, 24]).unwrap();
    let opts = CertifyOptions {
        grid_cells: 24,
        lambdas: vec![0.01, 0.1, 1.0],
        times: vec![0.1, 1.0],
        family_size: 16,
        seed: 5,
        tol: 1e-7,
        truncation_radius: None,
    };
    let cert = certify_monotonicity_md(&field, &IndexSet::supermodular(2), &grid, &opts).unwrap();
    assert_eq!(
        cert.verdict,
        Verdict::Certified,
        "supermodular 2-d: {:?}",
        cert.report.first_failure()
    );
    finish(
        "criterion 09 (multi-d conditions)",
        started,
        Duration::from_secs(300),
    );
}

#[test]
fn criterion_10_interacting_particle_systems() {
    let started = Instant::now();
    let times = [0.1, 1.0, 5.0];

    // exhaustive monotone preservation for contact and voter on paths
    for n in 2..=4usize {
        for rule in [RateRule::Contact { lambda: 1.5 }, RateRule::Voter] {
            let sys = SpinSystem::path(n, rule).unwrap();
            let report =
                verify_monotone_preservation(&sys, &times, PreservationMode::Exhaustive).unwrap();
            assert!(
                !report.has_failure(),
                "n = {n}: {:?}",
                report.first_failure()
            );
        }
    }
    assert_eq!(enumerate_monotone_boolean(4).len(), 168);

    // anti-voter refuted with witness
    let av = anti_voter(3, &[(0, 1), (1, 2)]).unwrap();
    let report =
        verify_monotone_preservation(&av, &[0.05, 0.1, 0.25, 0.5], PreservationMode::Exhaustive)
            .unwrap();
    let failure = report.first_failure().expect("anti-voter must be refuted");
    assert!(failure.witness.is_some());

    // exact intertwining at n <= 6
    for n in 2..=6usize {
        for rule in [
            RateRule::Contact { lambda: 1.0 },
            RateRule::Voter,
            RateRule::Glauber { beta: 0.4 },
        ] {
            let sys = SpinSystem::path(n, rule).unwrap();
            let m = build_matrices(&sys).unwrap();
            let res = intertwining_residual(&m);
            assert!(res <= 1e-12, "n = {n}: residual {res}");
            // attractiveness must agree exactly with C >= 0
            let attractive = !check_attractive(&sys).unwrap().has_failure();
            assert_eq!(attractive, m.c.negative_entry(0.0).is_none());
        }
    }

    // triple-norm growth bound e^{tM}
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for rule in [RateRule::Contact { lambda: 0.9 }, RateRule::Voter] {
        let sys = SpinSystem::path(4, rule).unwrap();
        let rc = rate_constants(&sys).unwrap();
        let m = build_matrices(&sys).unwrap();
        for _ in 0..20 {
            let f: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for t in [0.2, 1.0] {
                let evolved = expm_apply(&m.a, t, &f).unwrap();
                assert!(triple_norm(&evolved, 4) <= (t * rc.m).exp() * triple_norm(&f, 4) + 1e-9);
            }
        }
    }

    // lifted lower bound at n = 3
    let sys = SpinSystem::path(3, RateRule::Contact { lambda: 1.0 }).unwrap();
    let m = build_matrices(&sys).unwrap();
    let f: Vec<f64> = (0..8usize).map(|c| c.count_ones() as f64).collect();
    let h = m.phi.matvec(&f);
    let report = verify_ips_lower_bound(&sys, &f, &h, 0.5).unwrap();
    assert!(!report.has_failure());

    finish(
        "criterion 10 (interacting particle systems)",
        started,
        Duration::from_secs(300),
    );
}

#[test]
fn criterion_11_approximation_operators() {
    use intertwine::approxops::{apply_t, SampledFunction, TVariant};
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);

    let bump_sum = |seed: u64, nonneg: bool| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let bumps: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    r.gen_range(0.0..1.0),
                    r.gen_range(0.05..0.3),
                    if nonneg {
                        r.gen_range(0.1..1.0)
                    } else {
                        r.gen_range(-1.0..1.0)
                    },
                )
            })
            .collect();
        move |x: f64| -> f64 {
            bumps
                .iter()
                .map(|&(c, w, a)| a * (-((x - c) / w).powi(2)).exp())
                .sum()
        }
    };

    // boundary-value identities within 1e-6 relative
    for (trial, n) in [(0u64, 8u32), (1, 12), (2, 16)] {
        let f_fn = bump_sum(trial, false);
        let f = SampledFunction::for_operator(0.0, 1.0, n, &f_fn);
        let scale = 1.0 + f.norm_inf() * (n as f64) * (n as f64);

        let t = apply_t(&f, n, TVariant::T).unwrap();
        assert!(t.deriv2_left().abs() <= 1e-6 * scale, "(T f)''(l) = 0");
        assert!(t.deriv2_right().abs() <= 1e-6 * scale, "(T f)''(r) = 0");

        let t1 = apply_t(&f, n, TVariant::TPrime).unwrap();
        for v in [
            t1.deriv1_left(),
            t1.deriv2_left(),
            t1.deriv1_right(),
            t1.deriv2_right(),
        ] {
            assert!(v.abs() <= 1e-6 * scale, "T' boundary derivative {v}");
        }

        let t2 = apply_t(&f, n, TVariant::TDoublePrime).unwrap();
        for v in [
            t2.values[0],
            t2.deriv1_left(),
            t2.deriv2_left(),
            t2.values[t2.len() - 1],
            t2.deriv1_right(),
            t2.deriv2_right(),
        ] {
            assert!(v.abs() <= 1e-6 * scale, "T'' boundary value {v}");
        }

        for gamma in [-2.0, -0.5, 0.0, 0.7, 3.0] {
            let hat1 = apply_t(
                &f,
                n,
                TVariant::THatPrime {
                    gamma_left: gamma,
                    gamma_right: gamma,
                },
            )
            .unwrap();
            for (lhs, rhs) in [
                (gamma * hat1.deriv1_left(), hat1.deriv2_left()),
                (gamma * hat1.deriv1_right(), hat1.deriv2_right()),
            ] {
                let rel = lhs.abs().max(rhs.abs()) + 1.0;
                assert!((lhs - rhs).abs() <= 1e-6 * rel, "hat': {lhs} vs {rhs}");
            }
            let hat2 = apply_t(
                &f,
                n,
                TVariant::THatDoublePrime {
                    gamma_left: gamma,
                    gamma_right: gamma,
                },
            )
            .unwrap();
            for (lhs, rhs) in [
                (gamma * hat2.values[0], hat2.deriv1_left()),
                (gamma * hat2.values[hat2.len() - 1], hat2.deriv1_right()),
            ] {
                let rel = lhs.abs().max(rhs.abs()) + 1.0;
                assert!((lhs - rhs).abs() <= 1e-6 * rel, "hat'': {lhs} vs {rhs}");
            }
        }
    }

    // preservation and weak-derivative inequalities on 50 random instances
    let worst_gap = |lhs: &SampledFunction, rhs: &SampledFunction| -> f64 {
        let offset = ((rhs.x0 - lhs.x0) / lhs.step).round() as i64;
        let mut worst = f64::INFINITY;
        for j in 0..rhs.len() {
            let i = j as i64 + offset;
            if i >= 0 && (i as usize) < lhs.len() {
                worst = worst.min(lhs.values[i as usize] - rhs.values[j]);
            }
        }
        worst
    };
    for trial in 0..50u64 {
        let n = rng.gen_range(8..16);
        let h_fn = bump_sum(5000 + trial, true);
        let extra = bump_sum(6000 + trial, true);
        let quad = |x: f64, g: &dyn Fn(f64) -> f64| -> f64 {
            let steps = 200;
            (0..steps)
                .map(|k| g(x * k as f64 / steps as f64) * x / steps as f64)
                .sum()
        };
        let f = SampledFunction::for_order_checks(0.0, 1.0, n, |x| {
            0.25 * x + quad(x, &|y| h_fn(y) + extra(y))
        });
        let h = SampledFunction::for_order_checks(0.0, 1.0, n, &h_fn);

        // T preserves the increasing cone
        let tf = apply_t(&f, n, TVariant::T).unwrap();
        assert!(
            tf.min_forward_difference() >= -1e-9,
            "trial {trial}: T preservation"
        );

        let t1h = apply_t(&h, n, TVariant::TPrime).unwrap();
        let dtf = tf.central_derivative();
        assert!(
            worst_gap(&dtf, &t1h) >= -1e-9,
            "trial {trial}: (Tf)' >= T'h"
        );
        assert!(
            t1h.values.iter().all(|v| *v >= -1e-9),
            "trial {trial}: T'h >= 0"
        );

        let t1f = apply_t(&f, n, TVariant::TPrime).unwrap();
        let t2h = apply_t(&h, n, TVariant::TDoublePrime).unwrap();
        let dt1f = t1f.central_derivative();
        assert!(
            worst_gap(&dt1f, &t2h) >= -1e-9,
            "trial {trial}: (T'f)' >= T''h"
        );
    }
    finish(
        "criterion 11 (approximation operators)",
        started,
        Duration::from_secs(60),
    );
}

#[test]
fn criterion_12_simulation_cross_validation() {
    let started = Instant::now();

    // 100-state reflecting Brownian chain: TV between the empirical law and
    // the expm row at 1e5 paths
    let model = model_on_unit(
        Expr::Const(1.0),
        Expr::Const(0.0),
        FellerBoundary::Reflecting,
        FellerBoundary::Reflecting,
    );
    let grid = Grid::uniform(0.0, 1.0, 99).unwrap();
    let a_h = build_generator(&model, &grid).unwrap();
    let start = 50;
    let t = 0.005;
    let paths = 100_000;
    let empirical = simulate_ctmc(&a_h, start, t, 1212, paths).unwrap();
    let exact = expm_row(&a_h, t, start).unwrap();
    let tv = 0.5
        * (empirical
            .probs
            .iter()
            .zip(&exact.probs)
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>()
            + (empirical.killed - exact.killed).abs());
    assert!(tv <= 0.01, "total variation {tv} exceeds 0.01");

    // byte-identical CSV under a fixed seed
    let as_csv = |d: &intertwine::order::Distribution| -> String {
        let mut s = String::from("t,quantity,value\n");
        for (i, p) in d.probs.iter().enumerate() {
            s.push_str(&format!("{t},p[{i}],{p}\n"));
        }
        s.push_str(&format!("{t},killed,{}\n", d.killed));
        s
    };
    let rerun = simulate_ctmc(&a_h, start, t, 1212, paths).unwrap();
    assert_eq!(as_csv(&empirical).into_bytes(), as_csv(&rerun).into_bytes());

    // gillespie marginals within 4 standard errors of expm at n = 4
    let sys = SpinSystem::path(4, RateRule::Contact { lambda: 1.0 }).unwrap();
    let m = build_matrices(&sys).unwrap();
    let sigma0 = [true, false, false, true];
    let start_cfg: usize = 0b1001;
    let tspin = 0.8;
    let stats = gillespie(&sys, &sigma0, tspin, 4242, 50_000, &[]);
    for site in 0..4 {
        let indicator: Vec<f64> = (0..16usize).map(|c| ((c >> site) & 1) as f64).collect();
        let evolved = expm_apply(&m.a, tspin, &indicator).unwrap();
        let se = stats.marginal_se[site].max(1e-4);
        assert!(
            (stats.marginal_mean[site] - evolved[start_cfg]).abs() <= 4.0 * se,
            "site {site}: {} vs {} (se {se})",
            stats.marginal_mean[site],
            evolved[start_cfg]
        );
    }
    let stats2 = gillespie(&sys, &sigma0, tspin, 4242, 50_000, &[]);
    assert_eq!(stats.marginal_mean, stats2.marginal_mean);

    finish(
        "criterion 12 (simulation cross-validation)",
        started,
        Duration::from_secs(120),
    );
}
