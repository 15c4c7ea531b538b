//! Command-line front end: parse model files, drive the verification
//! pipelines, emit JSON reports and CSV curves.
//!
//! Exit codes: 0 certified/pass, 1 refuted with witness, 2 input error,
//! 3 inconclusive/undecided.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use intertwine::diffusion1d::{classify_boundary, Side};
use intertwine::discretize::{build_generator, build_phi, grid_for_model};
use intertwine::ips::{
    build_matrices, check_attractive, gillespie, intertwining_residual, rate_constants,
    verify_monotone_preservation, PreservationMode,
};
use intertwine::model::{ModelFile, ModelSpec, Numerics};
use intertwine::multid::{check_comparison_md, check_gammabed, halton_samples, CheckMode};
use intertwine::order::{generate_test_family, FamilyDomain, OrderSpec};
use intertwine::report::VerificationReport;
use intertwine::semigroup::{
    certify_monotonicity, certify_monotonicity_md, expm_apply, expm_row, simulate_ctmc,
    verify_comparison, CertifyOptions, Verdict,
};

#[derive(Parser)]
#[command(
    name = "intertwine",
    about = "Verify stochastic monotonicity and propagation of integral stochastic orders",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify the boundaries of a 1-d diffusion model (exit / entrance /
    /// regular / natural) with partial-integral traces.
    Classify {
        model: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the monotonicity certification pipeline for the model's order.
    Check {
        model: PathBuf,
        /// Override the order named in the model file.
        #[arg(long)]
        order: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write CSV curves of the worst order-map margin of e^(tA) f over t.
        #[arg(long)]
        emit_curves: Option<PathBuf>,
    },
    /// Compare two models through a stochastically monotone middle model.
    Compare {
        model1: PathBuf,
        model: PathBuf,
        model2: PathBuf,
        #[arg(long)]
        order: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        t: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the model and cross-validate against the matrix semigroup
    /// when feasible; emits CSV.
    Simulate {
        model: PathBuf,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_PASS: u8 = 0;
const EXIT_REFUTED: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_INCONCLUSIVE: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            EXIT_INPUT
        }
    };
    ExitCode::from(code)
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Classify { model, out } => cmd_classify(&model, out.as_deref()),
        Command::Check {
            model,
            order,
            out,
            emit_curves,
        } => cmd_check(
            &model,
            order.as_deref(),
            out.as_deref(),
            emit_curves.as_deref(),
        ),
        Command::Compare {
            model1,
            model,
            model2,
            order,
            t,
            out,
        } => cmd_compare(
            &model1,
            &model,
            &model2,
            order.as_deref(),
            t,
            out.as_deref(),
        ),
        Command::Simulate {
            model,
            t,
            paths,
            seed,
            out,
        } => cmd_simulate(&model, t, paths, seed, out.as_deref()),
    }
}

struct LoadedModel {
    file: ModelFile,
    input_hash: String,
}

fn load_model(path: &Path) -> anyhow::Result<LoadedModel> {
    let bytes =
        std::fs::read(path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|e| anyhow::anyhow!("{} is not UTF-8: {e}", path.display()))?;
    let file = ModelFile::parse_str(&text)?;
    let input_hash = format!("{:x}", Sha256::digest(&bytes));
    Ok(LoadedModel { file, input_hash })
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn certify_options(n: &Numerics) -> CertifyOptions {
    CertifyOptions {
        grid_cells: n.grid,
        lambdas: n.lambdas.clone(),
        times: n.times.clone(),
        family_size: n.family,
        seed: n.seed,
        tol: n.tol,
        truncation_radius: n.truncation,
    }
}

// ---------------------------------------------------------------------------
// classify
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ClassifyOutput {
    input_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    left: EndpointClassification,
    right: EndpointClassification,
}

#[derive(Serialize)]
struct EndpointClassification {
    classification: String,
    exit: Option<bool>,
    entrance: Option<bool>,
    u_partials: Vec<f64>,
    v_partials: Vec<f64>,
}

fn cmd_classify(path: &Path, out: Option<&Path>) -> anyhow::Result<u8> {
    let loaded = load_model(path)?;
    let spec = match &loaded.file.spec {
        ModelSpec::Diffusion1d(d) => d,
        _ => anyhow::bail!("classify needs a diffusion1d model"),
    };
    let model = spec.to_model()?;
    let mut sides = Vec::new();
    for side in [Side::Left, Side::Right] {
        let c = classify_boundary(&model, side)?;
        sides.push(EndpointClassification {
            classification: c
                .verdict
                .map(|v| v.as_str().to_string())
                .unwrap_or_else(|| "undecided".to_string()),
            exit: match c.verdict {
                Some(_) => Some(c.u.is_finite()),
                None => None,
            },
            entrance: match c.verdict {
                Some(_) => Some(c.v.is_finite()),
                None => None,
            },
            u_partials: c.u_partials,
            v_partials: c.v_partials,
        });
    }
    let right = sides.pop().unwrap();
    let left = sides.pop().unwrap();
    let undecided = left.classification == "undecided" || right.classification == "undecided";
    let output = ClassifyOutput {
        input_hash: loaded.input_hash,
        name: loaded.file.name.clone(),
        left,
        right,
    };
    emit(&output, out)?;
    Ok(if undecided {
        EXIT_INCONCLUSIVE
    } else {
        EXIT_PASS
    })
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CheckOutput<T: Serialize> {
    input_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    verdict: String,
    result: T,
}

fn verdict_exit(verdict: Verdict) -> u8 {
    match verdict {
        Verdict::Certified => EXIT_PASS,
        Verdict::Refuted => EXIT_REFUTED,
        Verdict::Inconclusive => EXIT_INCONCLUSIVE,
    }
}

fn report_exit(report: &VerificationReport) -> (String, u8) {
    if report.has_failure() {
        ("refuted".to_string(), EXIT_REFUTED)
    } else if report.has_undecided() {
        ("inconclusive".to_string(), EXIT_INCONCLUSIVE)
    } else {
        ("certified".to_string(), EXIT_PASS)
    }
}

fn cmd_check(
    path: &Path,
    order_flag: Option<&str>,
    out: Option<&Path>,
    emit_curves: Option<&Path>,
) -> anyhow::Result<u8> {
    let loaded = load_model(path)?;
    let order = loaded.file.order_spec(order_flag)?;
    match &loaded.file.spec {
        ModelSpec::Diffusion1d(spec) => {
            let model = spec.to_model()?;
            let dorder = order
                .as_diffusion_order()
                .ok_or_else(|| anyhow::anyhow!("diffusion1d models need a 1-d order"))?;
            let opts = certify_options(&loaded.file.numerics);
            let cert = certify_monotonicity(&model, dorder, &opts)?;
            if let Some(curve_path) = emit_curves {
                let grid = grid_for_model(&model, opts.grid_cells, opts.truncation_radius)?;
                let a_h = build_generator(&model, &grid)?;
                let phi = build_phi(dorder, &grid)?;
                let family = generate_test_family(
                    &order,
                    &FamilyDomain::Grid1d(grid.points.clone()),
                    opts.family_size,
                    opts.seed,
                );
                let mut csv = String::from("t,quantity,value\n");
                let t_grid: Vec<f64> = (0..=20).map(|k| k as f64 * 0.05).collect();
                for &t in &t_grid {
                    for (idx, f) in family.iter().enumerate() {
                        let margin = phi
                            .apply(&expm_apply(&a_h, t, f)?)
                            .into_iter()
                            .fold(f64::INFINITY, f64::min);
                        csv.push_str(&format!("{t},phi_margin_member_{idx},{margin}\n"));
                    }
                }
                std::fs::write(curve_path, csv)?;
            }
            let exit = verdict_exit(cert.verdict);
            let output = CheckOutput {
                input_hash: loaded.input_hash,
                name: loaded.file.name.clone(),
                verdict: format!("{:?}", cert.verdict).to_lowercase(),
                result: cert,
            };
            emit(&output, out)?;
            Ok(exit)
        }
        ModelSpec::DiffusionMd(spec) => {
            let field = spec.to_field()?;
            let index_set = match &order {
                OrderSpec::MultiIndex(set) => set.clone(),
                _ => spec.to_index_set()?,
            };
            if index_set.indices().len() == 1 {
                let grid = spec.to_grid(loaded.file.numerics.grid2d)?;
                let opts = certify_options(&loaded.file.numerics);
                let cert = certify_monotonicity_md(&field, &index_set, &grid, &opts)?;
                let exit = verdict_exit(cert.verdict);
                let output = CheckOutput {
                    input_hash: loaded.input_hash,
                    name: loaded.file.name.clone(),
                    verdict: format!("{:?}", cert.verdict).to_lowercase(),
                    result: cert,
                };
                emit(&output, out)?;
                Ok(exit)
            } else {
                // multi-index sets: the symbolic obligation ledger decides
                let (lo, hi): (Vec<f64>, Vec<f64>) =
                    spec.sample_box.iter().map(|b| (b[0], b[1])).unzip();
                let samples = halton_samples(spec.dim, &lo, &hi, 200);
                let report = check_gammabed(&field, &index_set, &samples, CheckMode::SymbolicFirst);
                let (verdict, exit) = report_exit(&report);
                let output = CheckOutput {
                    input_hash: loaded.input_hash,
                    name: loaded.file.name.clone(),
                    verdict,
                    result: report,
                };
                emit(&output, out)?;
                Ok(exit)
            }
        }
        ModelSpec::SpinSystem(spec) => {
            let sys = spec.to_system()?;
            let mut report = check_attractive(&sys)?;
            if sys.sites() <= 12 {
                let m = build_matrices(&sys)?;
                let residual = intertwining_residual(&m);
                report.push(if residual <= 1e-10 {
                    intertwine::report::CheckRecord::pass("Phi A = (B + C) Phi")
                        .with_margin(residual, 1e-10)
                } else {
                    intertwine::report::CheckRecord::fail(
                        "Phi A = (B + C) Phi",
                        intertwine::report::Witness::new("max-norm residual", residual),
                    )
                });
                let mode = if sys.sites() <= 4 {
                    PreservationMode::Exhaustive
                } else {
                    PreservationMode::Randomized {
                        count: loaded.file.numerics.family,
                        seed: loaded.file.numerics.seed,
                    }
                };
                let preservation =
                    verify_monotone_preservation(&sys, &loaded.file.numerics.times, mode)?;
                report.extend(preservation);
            }
            let (verdict, exit) = report_exit(&report);
            let output = CheckOutput {
                input_hash: loaded.input_hash,
                name: loaded.file.name.clone(),
                verdict,
                result: report,
            };
            emit(&output, out)?;
            Ok(exit)
        }
    }
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

fn cmd_compare(
    path1: &Path,
    path_mid: &Path,
    path2: &Path,
    order_flag: Option<&str>,
    t: f64,
    out: Option<&Path>,
) -> anyhow::Result<u8> {
    let lo = load_model(path1)?;
    let mid = load_model(path_mid)?;
    let hi = load_model(path2)?;
    let order = mid.file.order_spec(order_flag)?;

    match (&lo.file.spec, &mid.file.spec, &hi.file.spec) {
        (ModelSpec::Diffusion1d(s1), ModelSpec::Diffusion1d(s), ModelSpec::Diffusion1d(s2)) => {
            let m1 = s1.to_model()?;
            let m = s.to_model()?;
            let m2 = s2.to_model()?;
            let dorder = order
                .as_diffusion_order()
                .ok_or_else(|| anyhow::anyhow!("diffusion1d comparison needs a 1-d order"))?;
            let numerics = &mid.file.numerics;
            let grid = grid_for_model(&m, numerics.grid, numerics.truncation)?;
            let a1 = build_generator(&m1, &grid)?;
            let a = build_generator(&m, &grid)?;
            let a2 = build_generator(&m2, &grid)?;
            let phi = build_phi(dorder, &grid)?;
            let family = generate_test_family(
                &order,
                &FamilyDomain::Grid1d(grid.points.clone()),
                numerics.family,
                numerics.seed,
            );
            let report = verify_comparison(&a1, &a, &a2, &phi, &order, &grid.points, &family, t)?;
            let (verdict, exit) = report_exit(&report);
            let output = CheckOutput {
                input_hash: format!("{} {} {}", lo.input_hash, mid.input_hash, hi.input_hash),
                name: mid.file.name.clone(),
                verdict,
                result: report,
            };
            emit(&output, out)?;
            Ok(exit)
        }
        (ModelSpec::DiffusionMd(s1), ModelSpec::DiffusionMd(s), ModelSpec::DiffusionMd(s2)) => {
            let index_set = match &order {
                OrderSpec::MultiIndex(set) => set.clone(),
                _ => s.to_index_set()?,
            };
            let (lo_box, hi_box): (Vec<f64>, Vec<f64>) =
                s.sample_box.iter().map(|b| (b[0], b[1])).unzip();
            let samples = halton_samples(s.dim, &lo_box, &hi_box, 200);
            let report = check_comparison_md(
                &s1.to_field()?,
                &s.to_field()?,
                &s2.to_field()?,
                &index_set,
                &samples,
            );
            let (verdict, exit) = report_exit(&report);
            let output = CheckOutput {
                input_hash: format!("{} {} {}", lo.input_hash, mid.input_hash, hi.input_hash),
                name: mid.file.name.clone(),
                verdict,
                result: report,
            };
            emit(&output, out)?;
            Ok(exit)
        }
        _ => anyhow::bail!("compare needs three models of the same diffusion kind"),
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn cmd_simulate(
    path: &Path,
    t_flag: Option<f64>,
    paths_flag: Option<usize>,
    seed_flag: Option<u64>,
    out: Option<&Path>,
) -> anyhow::Result<u8> {
    let loaded = load_model(path)?;
    let numerics = &loaded.file.numerics;
    let t = t_flag.unwrap_or_else(|| numerics.times.first().copied().unwrap_or(0.1));
    let paths = paths_flag.unwrap_or(numerics.paths);
    let seed = seed_flag.unwrap_or(numerics.seed);

    let mut csv = String::from("t,quantity,value\n");
    match &loaded.file.spec {
        ModelSpec::Diffusion1d(spec) => {
            let model = spec.to_model()?;
            let grid = grid_for_model(&model, numerics.grid, numerics.truncation)?;
            let a_h = build_generator(&model, &grid)?;
            let start = grid.n_points() / 2;
            let empirical = simulate_ctmc(&a_h, start, t, seed, paths)?;
            let exact = expm_row(&a_h, t, start)?;
            let tv: f64 = 0.5
                * (empirical
                    .probs
                    .iter()
                    .zip(&exact.probs)
                    .map(|(p, q)| (p - q).abs())
                    .sum::<f64>()
                    + (empirical.killed - exact.killed).abs());
            for (i, p) in empirical.probs.iter().enumerate() {
                csv.push_str(&format!("{t},empirical_p[{i}],{p}\n"));
            }
            for (i, p) in exact.probs.iter().enumerate() {
                csv.push_str(&format!("{t},expm_p[{i}],{p}\n"));
            }
            csv.push_str(&format!("{t},killed_empirical,{}\n", empirical.killed));
            csv.push_str(&format!("{t},killed_expm,{}\n", exact.killed));
            csv.push_str(&format!("{t},total_variation,{tv}\n"));
        }
        ModelSpec::SpinSystem(spec) => {
            let sys = spec.to_system()?;
            // alternating start keeps absorbing rules (contact from the
            // empty configuration) non-trivial
            let sigma0: Vec<bool> = (0..sys.sites()).map(|i| i % 2 == 0).collect();
            let stats = gillespie(&sys, &sigma0, t, seed, paths, &[]);
            for (i, (m, se)) in stats
                .marginal_mean
                .iter()
                .zip(&stats.marginal_se)
                .enumerate()
            {
                csv.push_str(&format!("{t},mean_site_{i},{m}\n"));
                csv.push_str(&format!("{t},se_site_{i},{se}\n"));
            }
            if sys.sites() <= 12 {
                let m = build_matrices(&sys)?;
                let start = sigma0
                    .iter()
                    .enumerate()
                    .fold(0usize, |acc, (i, &s)| acc | ((s as usize) << i));
                for site in 0..sys.sites() {
                    let indicator: Vec<f64> = (0..sys.n_configs())
                        .map(|c| ((c >> site) & 1) as f64)
                        .collect();
                    let evolved = expm_apply(&m.a, t, &indicator)?;
                    csv.push_str(&format!("{t},expm_mean_site_{site},{}\n", evolved[start]));
                }
            }
            let rc = rate_constants(&sys)?;
            csv.push_str(&format!("{t},spread_constant_m,{}\n", rc.m));
        }
        ModelSpec::DiffusionMd(_) => {
            anyhow::bail!("simulate supports diffusion1d and spin_system models")
        }
    }
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(EXIT_PASS)
}
