//! Command-line front end: `simulate`, `verify`, `horizon`, `calibrate`,
//! and `mixture` subcommands over the library engines.
//!
//! Exit codes separate mathematics from plumbing: 0 means the run succeeded
//! and any checked property held; 2 means the run was well-formed but a
//! certificate or verdict failed (so CI can gate on it); 1 means a tooling
//! error (bad flags, missing files, malformed input).
//!
//! Every run writes a manifest JSON next to its primary output, echoing the
//! resolved configuration, the seed, the tool version, and the list of
//! emitted files. All randomness flows from the single `--seed` flag; there
//! is no wall-clock entropy anywhere in the engines.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::constructions::{
    calibrate_rows, diagonal_row, horizon_from_drift, time_mixture, CalibratorSpec, WeightArray,
};
use crate::montecarlo::{
    experiment_grid, paths_to_csv, report_to_csv, SimConfig,
};
use crate::tree::{BiProcess, DriftSequence, MeasureFamily, OutcomeTree, ProcessRow, TreeProcess};
use crate::verifier::{certify_asymptotic, optional_sampling_check, snell_envelope_bounded};

/// Exit code for a well-formed run whose checked property failed.
pub const EXIT_VERDICT_FALSE: i32 = 2;
/// Exit code for tooling errors.
pub const EXIT_ERROR: i32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "eproc",
    version,
    about = "Asymptotic e-process toolkit: exact tree certification and Monte Carlo excursion estimation"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the Monte Carlo excursion experiment and write a CSV report.
    Simulate(SimulateArgs),
    /// Certify e-process properties, either on a bundle or a built-in suite.
    Verify(VerifyArgs),
    /// Select monitoring horizons from the drift rule and check decay.
    Horizon(HorizonArgs),
    /// Calibrate the p-value processes of a bundle into e-process rows.
    Calibrate(CalibrateArgs),
    /// Build time-mixture processes from a bundle of factors and a weight file.
    Mixture(MixtureArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// TOML configuration file; omitted keys use the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Output is identical for any value.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Retain this many evenly subsampled trajectories per cell as plot data.
    #[arg(long, default_value_t = 0)]
    paths: u32,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Bundle JSON with the processes to certify as rows 0, 1, ...
    #[arg(long, conflicts_with = "suite")]
    bundle: Option<PathBuf>,
    /// Built-in suite: `optional-sampling`, `snell`, or `diagonal`.
    #[arg(long)]
    suite: Option<String>,
    /// Random instances for suites.
    #[arg(long, default_value_t = 100)]
    trees: u32,
    /// Maximum tree depth for suites.
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON path.
    #[arg(long, default_value = "verify.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct HorizonArgs {
    /// TOML configuration file (m grid, drift scale, horizon rule).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report JSON path.
    #[arg(long, default_value = "horizon.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Bundle JSON whose processes hold p-values.
    #[arg(long)]
    bundle: PathBuf,
    /// Calibrator exponent in (0, 1).
    #[arg(long, default_value_t = 0.5)]
    kappa: f64,
    /// Cap for the bounded calibrator; omit for the unbounded one.
    #[arg(long)]
    cap: Option<f64>,
    /// Output bundle path.
    #[arg(long, default_value = "calibrated.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MixtureArgs {
    /// Bundle JSON whose processes hold mixture factors.
    #[arg(long)]
    bundle: PathBuf,
    /// JSON file with one weight row (array of arrays) per process.
    #[arg(long)]
    weights_file: PathBuf,
    /// Output bundle path.
    #[arg(long, default_value = "mixture.json")]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Configuration file
// ---------------------------------------------------------------------------

/// Accepts a single exponent or a list.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

/// Flat key-value configuration; unknown keys are rejected by name.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    m_grid: Option<Vec<u64>>,
    a: Option<f64>,
    sigma: Option<f64>,
    b: Option<f64>,
    c: Option<f64>,
    p_exp: Option<OneOrMany>,
    alpha: Option<f64>,
    n_traj: Option<u32>,
    n_end: Option<u32>,
    seed: Option<u64>,
}

/// Parses the TOML config file, layering it over the defaults; an absent
/// path yields the defaults outright.
pub fn parse_config(path: Option<&Path>) -> Result<SimConfig, String> {
    let mut config = SimConfig::default();
    let Some(path) = path else {
        return Ok(config);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {}", path.display(), e))?;
    let raw: RawConfig =
        toml::from_str(&text).map_err(|e| format!("config {}: {}", path.display(), e))?;
    if let Some(v) = raw.m_grid {
        config.m_grid = v;
    }
    if let Some(v) = raw.a {
        config.a = v;
    }
    if let Some(v) = raw.sigma {
        config.sigma = v;
    }
    if let Some(v) = raw.b {
        config.b = v;
    }
    if let Some(v) = raw.c {
        config.horizon_c = v;
    }
    if let Some(v) = raw.p_exp {
        config.p_exps = match v {
            OneOrMany::One(p) => vec![p],
            OneOrMany::Many(ps) => ps,
        };
    }
    if let Some(v) = raw.alpha {
        config.alpha = v;
    }
    if let Some(v) = raw.n_traj {
        config.n_traj = v;
    }
    if let Some(v) = raw.n_end {
        config.n_end = v;
    }
    if let Some(v) = raw.seed {
        config.seed = v;
    }
    config
        .validate()
        .map_err(|e| format!("config constraint: {}", e))?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    config: serde_json::Value,
    version: &'a str,
    seed: u64,
    duration_ms: u128,
    outputs: Vec<String>,
}

fn write_manifest(
    out: &Path,
    subcommand: &str,
    config: serde_json::Value,
    seed: u64,
    started: Instant,
    outputs: &[&Path],
) -> Result<(), String> {
    let manifest = RunManifest {
        subcommand,
        config,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        duration_ms: started.elapsed().as_millis(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let path = manifest_path(out);
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, body).map_err(|e| format!("cannot write {}: {}", path.display(), e))
}

/// `results.csv` gets `results.manifest.json` next to it.
pub fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Parses argv and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version via its own "error" kinds
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Verify(a) => run_verify(a),
        Command::Horizon(a) => run_horizon(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Mixture(a) => run_mixture(a),
    };
    match outcome {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {}", msg);
            EXIT_ERROR
        }
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), String> {
    std::fs::write(path, body).map_err(|e| format!("cannot write {}: {}", path.display(), e))
}

fn in_pool<F: FnOnce() -> R + Send, R: Send>(workers: usize, f: F) -> Result<R, String> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| format!("thread pool: {}", e))?;
    Ok(pool.install(f))
}

fn run_simulate(args: SimulateArgs) -> Result<i32, String> {
    let started = Instant::now();
    let mut config = parse_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if config.horizon_truncated() {
        eprintln!(
            "warning: some horizons exceed n_end = {}; within-horizon counts are truncated",
            config.n_end
        );
    }
    // evenly subsampled trajectory indices for plot data
    let keep: Vec<u32> = if args.paths > 0 {
        let k = args.paths.min(config.n_traj);
        (0..k).map(|i| i * config.n_traj / k).collect()
    } else {
        Vec::new()
    };
    let (report, raw) =
        in_pool(args.workers, || experiment_grid(&config, &keep))?.map_err(|e| e.to_string())?;
    write_file(&args.out, &report_to_csv(&report))?;
    let mut outputs: Vec<PathBuf> = vec![args.out.clone()];
    if !keep.is_empty() {
        let dir = args.out.parent().unwrap_or(Path::new("."));
        for cell in &raw {
            let p_exp = config.p_exps[cell.p_index];
            let path = dir.join(format!("paths_{}_{}.csv", cell.m, p_exp));
            write_file(&path, &paths_to_csv(cell))?;
            outputs.push(path);
        }
    }
    let refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    write_manifest(
        &args.out,
        "simulate",
        serde_json::to_value(&config).expect("config serializes"),
        config.seed,
        started,
        &refs,
    )?;
    Ok(0)
}

#[derive(Debug, Serialize)]
struct CertJson {
    m: u64,
    max: f64,
    tau: Vec<usize>,
    measure: String,
    non_integrable: bool,
    slack: f64,
}

#[derive(Debug, Serialize)]
struct VerifyJson {
    per_m: Vec<CertJson>,
    verdict: bool,
    m0: Option<usize>,
}

#[derive(Debug, Serialize)]
struct SuiteJson {
    suite: String,
    instances: u32,
    violations: u32,
    max_gap: f64,
}

/// Random tree, single measure with positive branch weights, nonnegative row.
fn random_instance(
    rng: &mut ChaCha12Rng,
    max_depth: usize,
) -> (MeasureFamily<f64>, TreeProcess<f64>) {
    let depth = rng.gen_range(1..=max_depth.max(1));
    let mut branching = Vec::new();
    let mut width = 1usize;
    for _ in 0..depth {
        let counts: Vec<usize> = (0..width).map(|_| rng.gen_range(1..=3)).collect();
        width = counts.iter().sum();
        branching.push(counts);
    }
    let tree = OutcomeTree::build(&branching).expect("random branching is valid");
    let mut probs = vec![1.0f64; tree.node_count()];
    for v in 0..tree.node_count() {
        let kids = tree.children(v).to_vec();
        if kids.is_empty() {
            continue;
        }
        let raw: Vec<f64> = kids.iter().map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        for (j, &c) in kids.iter().enumerate() {
            probs[c] = raw[j] / total;
        }
    }
    let fam = MeasureFamily::new(tree.clone(), vec!["rand".into()], vec![probs])
        .expect("normalized probs form a measure");
    let vals: Vec<f64> = (0..tree.node_count()).map(|_| rng.gen_range(0.0..3.0)).collect();
    let row = TreeProcess::new(tree, vals, true).expect("nonnegative values");
    (fam, row)
}

/// Rescales children so every conditional mean is at most the parent value.
fn force_supermartingale(
    fam: &MeasureFamily<f64>,
    row: &TreeProcess<f64>,
    rng: &mut ChaCha12Rng,
) -> TreeProcess<f64> {
    let tree = row.tree().clone();
    let mut vals = row.values().to_vec();
    vals[0] = vals[0].max(0.1);
    for v in 0..tree.node_count() {
        let kids = tree.children(v).to_vec();
        if kids.is_empty() {
            continue;
        }
        let mean: f64 = kids.iter().map(|&c| fam.edge_prob(0, c) * vals[c]).sum();
        if mean > 0.0 {
            let target = vals[v] * rng.gen_range(0.5..1.0);
            let s = target / mean;
            for &c in &kids {
                vals[c] *= s;
            }
        }
    }
    TreeProcess::new(tree, vals, true).expect("scaling preserves nonnegativity")
}

fn run_verify(args: VerifyArgs) -> Result<i32, String> {
    let started = Instant::now();
    let (report_json, ok) = match (&args.bundle, args.suite.as_deref()) {
        (Some(bundle_path), None) => {
            let text = std::fs::read_to_string(bundle_path)
                .map_err(|e| format!("cannot read {}: {}", bundle_path.display(), e))?;
            let bundle = Bundle::from_json(&text).map_err(|e| e.to_string())?;
            let family = bundle.family().map_err(|e| e.to_string())?;
            let procs = bundle
                .processes_on(family.tree())
                .map_err(|e| e.to_string())?;
            if procs.is_empty() {
                return Err("bundle has no processes to certify".into());
            }
            let rows: Vec<ProcessRow<f64>> = procs
                .iter()
                .enumerate()
                .map(|(i, (_, p))| ProcessRow {
                    m: i as u64,
                    family: family.clone(),
                    process: p.clone(),
                })
                .collect();
            let n = rows.len();
            let bi = BiProcess::new(rows);
            // harmonic tolerance schedule: row m must come within 1/(m+1)
            let tol: Vec<f64> = (0..n).map(|m| 1.0 / (m + 1) as f64).collect();
            let rep = certify_asymptotic(&bi, &tol).map_err(|e| e.to_string())?;
            let per_m = rep
                .per_m
                .iter()
                .zip(rep.slack.iter())
                .map(|(c, &s)| CertJson {
                    m: c.m,
                    max: c.max_stopped_expectation,
                    tau: c.argmax_stopping_time.stop_nodes().to_vec(),
                    measure: c.worst_measure.clone(),
                    non_integrable: c.non_integrable,
                    slack: s,
                })
                .collect();
            let verdict = rep.verdict;
            (
                serde_json::to_string_pretty(&VerifyJson {
                    per_m,
                    verdict,
                    m0: rep.m0,
                })
                .expect("report serializes"),
                verdict,
            )
        }
        (None, Some("optional-sampling")) => {
            let mut rng = ChaCha12Rng::seed_from_u64(args.seed);
            let mut violations = 0u32;
            let mut max_gap = f64::NEG_INFINITY;
            for _ in 0..args.trees {
                let (fam, row) = random_instance(&mut rng, args.depth);
                let s = force_supermartingale(&fam, &row, &mut rng);
                let rep = optional_sampling_check(&fam, &s, fam.tree().depth())
                    .map_err(|e| e.to_string())?;
                max_gap = max_gap.max(rep.max_gap);
                if rep.max_gap > 1e-12 {
                    violations += 1;
                }
            }
            let ok = violations == 0;
            (
                serde_json::to_string_pretty(&SuiteJson {
                    suite: "optional-sampling".into(),
                    instances: args.trees,
                    violations,
                    max_gap,
                })
                .expect("report serializes"),
                ok,
            )
        }
        (None, Some("snell")) => {
            let mut rng = ChaCha12Rng::seed_from_u64(args.seed);
            let mut violations = 0u32;
            let mut max_gap = f64::NEG_INFINITY;
            for _ in 0..args.trees {
                let (fam, row) = random_instance(&mut rng, args.depth.min(3));
                let r = fam.tree().depth();
                let envelope =
                    snell_envelope_bounded(&fam, 0, &row, r).map_err(|e| e.to_string())?;
                let cert = crate::verifier::certify_row(0, &fam, &row, r)
                    .map_err(|e| e.to_string())?;
                let gap = (envelope.value(0) - cert.max_stopped_expectation).abs();
                max_gap = max_gap.max(gap);
                if gap > 1e-12 {
                    violations += 1;
                }
            }
            let ok = violations == 0;
            (
                serde_json::to_string_pretty(&SuiteJson {
                    suite: "snell".into(),
                    instances: args.trees,
                    violations,
                    max_gap,
                })
                .expect("report serializes"),
                ok,
            )
        }
        (None, Some("diagonal")) => {
            // growing diagonal products must fail certification
            let mut factors = vec![1.1f64; 24];
            factors[0] = 1.0;
            let rows: Vec<ProcessRow<f64>> = (1..=8)
                .map(|m| diagonal_row(&factors, m, 3).expect("chain rows build"))
                .collect();
            let tol: Vec<f64> = (1..=8).map(|m| 1.0 / m as f64).collect();
            let rep =
                certify_asymptotic(&BiProcess::new(rows), &tol).map_err(|e| e.to_string())?;
            let per_m = rep
                .per_m
                .iter()
                .zip(rep.slack.iter())
                .map(|(c, &s)| CertJson {
                    m: c.m,
                    max: c.max_stopped_expectation,
                    tau: c.argmax_stopping_time.stop_nodes().to_vec(),
                    measure: c.worst_measure.clone(),
                    non_integrable: c.non_integrable,
                    slack: s,
                })
                .collect();
            let verdict = rep.verdict;
            (
                serde_json::to_string_pretty(&VerifyJson {
                    per_m,
                    verdict,
                    m0: rep.m0,
                })
                .expect("report serializes"),
                verdict,
            )
        }
        (None, Some(other)) => {
            return Err(format!(
                "unknown suite '{}': expected optional-sampling, snell, or diagonal",
                other
            ))
        }
        (None, None) => return Err("verify needs --bundle or --suite".into()),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    write_file(&args.out, &report_json)?;
    write_manifest(
        &args.out,
        "verify",
        serde_json::json!({
            "bundle": args.bundle.as_ref().map(|p| p.display().to_string()),
            "suite": args.suite,
            "trees": args.trees,
            "depth": args.depth,
        }),
        args.seed,
        started,
        &[&args.out],
    )?;
    Ok(if ok { 0 } else { EXIT_VERDICT_FALSE })
}

#[derive(Debug, Serialize)]
struct HorizonJson {
    m: Vec<u64>,
    r_m: Vec<usize>,
    product: Vec<f64>,
    decay_monotone: bool,
}

fn run_horizon(args: HorizonArgs) -> Result<i32, String> {
    let started = Instant::now();
    let config = parse_config(args.config.as_deref())?;
    let drift = DriftSequence::new(
        config.m_grid.clone(),
        config.m_grid.iter().map(|&m| config.drift(m)).collect(),
    );
    let p = config.p_exps[0];
    let rep = horizon_from_drift(&drift, config.horizon_c, p).map_err(|e| e.to_string())?;
    let r_m = rep
        .horizon
        .entries
        .iter()
        .map(|h| h.resolve(usize::MAX))
        .collect();
    let body = serde_json::to_string_pretty(&HorizonJson {
        m: config.m_grid.clone(),
        r_m,
        product: rep.products.clone(),
        decay_monotone: rep.decay_monotone,
    })
    .expect("report serializes");
    write_file(&args.out, &body)?;
    write_manifest(
        &args.out,
        "horizon",
        serde_json::to_value(&config).expect("config serializes"),
        config.seed,
        started,
        &[&args.out],
    )?;
    Ok(if rep.decay_monotone { 0 } else { EXIT_VERDICT_FALSE })
}

fn run_calibrate(args: CalibrateArgs) -> Result<i32, String> {
    let started = Instant::now();
    let spec = match args.cap {
        Some(cap) => CalibratorSpec::truncated_power(args.kappa, cap),
        None => CalibratorSpec::power(args.kappa),
    }
    .map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(&args.bundle)
        .map_err(|e| format!("cannot read {}: {}", args.bundle.display(), e))?;
    let bundle = Bundle::from_json(&text).map_err(|e| e.to_string())?;
    let family = bundle.family().map_err(|e| e.to_string())?;
    let procs = bundle
        .processes_on(family.tree())
        .map_err(|e| e.to_string())?;
    let rows: Vec<ProcessRow<f64>> = procs
        .iter()
        .enumerate()
        .map(|(i, (_, p))| ProcessRow {
            m: i as u64,
            family: family.clone(),
            process: p.clone(),
        })
        .collect();
    let calibrated = calibrate_rows(rows, &spec).map_err(|e| e.to_string())?;
    let named: Vec<(String, &TreeProcess<f64>)> = calibrated
        .rows
        .iter()
        .zip(procs.iter())
        .map(|(r, (name, _))| (format!("calibrated_{}", name), &r.process))
        .collect();
    let out_bundle = Bundle::from_parts(&family, &named);
    write_file(&args.out, &out_bundle.to_json())?;
    write_manifest(
        &args.out,
        "calibrate",
        serde_json::json!({
            "bundle": args.bundle.display().to_string(),
            "kappa": args.kappa,
            "cap": args.cap,
        }),
        0,
        started,
        &[&args.out],
    )?;
    Ok(0)
}

fn run_mixture(args: MixtureArgs) -> Result<i32, String> {
    let started = Instant::now();
    let text = std::fs::read_to_string(&args.bundle)
        .map_err(|e| format!("cannot read {}: {}", args.bundle.display(), e))?;
    let bundle = Bundle::from_json(&text).map_err(|e| e.to_string())?;
    let family = bundle.family().map_err(|e| e.to_string())?;
    let procs = bundle
        .processes_on(family.tree())
        .map_err(|e| e.to_string())?;
    let wtext = std::fs::read_to_string(&args.weights_file)
        .map_err(|e| format!("cannot read {}: {}", args.weights_file.display(), e))?;
    let rows: Vec<Vec<f64>> =
        serde_json::from_str(&wtext).map_err(|e| format!("weights file: {}", e))?;
    if rows.len() != procs.len() {
        return Err(format!(
            "{} weight rows for {} processes",
            rows.len(),
            procs.len()
        ));
    }
    let weights = WeightArray::new(rows).map_err(|e| e.to_string())?;
    let mut named_owned = Vec::with_capacity(procs.len());
    for (i, (name, factors)) in procs.iter().enumerate() {
        let mix = time_mixture(&weights, i, factors).map_err(|e| e.to_string())?;
        named_owned.push((format!("mixture_{}", name), mix));
    }
    let named: Vec<(String, &TreeProcess<f64>)> = named_owned
        .iter()
        .map(|(n, p)| (n.clone(), p))
        .collect();
    let out_bundle = Bundle::from_parts(&family, &named);
    write_file(&args.out, &out_bundle.to_json())?;
    write_manifest(
        &args.out,
        "mixture",
        serde_json::json!({
            "bundle": args.bundle.display().to_string(),
            "weights_file": args.weights_file.display().to_string(),
        }),
        0,
        started,
        &[&args.out],
    )?;
    Ok(0)
}
