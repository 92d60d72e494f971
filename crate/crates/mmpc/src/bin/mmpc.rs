//! Command line front end: plan layout, end-to-end simulation, privacy
//! audits, and rate sweeps. Exit codes: 0 ok, 1 verification failure,
//! 2 bad configuration.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;

use mmpc::analytics::{decimal6, rate_point, sweep};
use mmpc::audit::{
    find_sign_mapping, mutate_drop_query, mutate_dup_donor, mutate_swap_indices,
    mutate_unshuffle, structural_checks, transcript_shape_test, CheckReport, ShapeOptions,
};
use mmpc::coding::CodingError;
use mmpc::gf::Gf;
use mmpc::model::{build_library, relabel, DemandSet, MessageLibrary, RandomTape};
use mmpc::planner::{
    assign_signs, build_query_plan, dump_plan, min_field_size, plan_summary, shuffle_plan,
    stage_counts, QueryPlan,
};
use mmpc::protocol::{run_protocol, ProtocolError};

#[derive(Parser)]
#[command(
    name = "mmpc",
    about = "Multi-message private computation: plan, simulate, audit, sweep",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the query layout summary for one parameter point.
    Plan(PlanArgs),
    /// Run the protocol end to end on random files and verify decoding.
    Simulate(SimulateArgs),
    /// Run structural checks and optional privacy audits, JSON per line.
    Audit(AuditArgs),
    /// Evaluate the closed-form rates over a parameter grid, CSV output.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON config file; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total messages.
    #[arg(long = "M")]
    m: Option<usize>,
    /// Independent messages.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Demanded messages.
    #[arg(long = "P")]
    p: Option<usize>,
    /// Servers.
    #[arg(long = "N")]
    n: Option<usize>,
    /// Field size (odd prime); chosen automatically when omitted.
    #[arg(long)]
    q: Option<u64>,
    /// Randomness seed; falls back to config, then MMPC_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Demanded message labels, letters or 1-based numbers: "a,b" or "1,2".
    #[arg(long)]
    demand: Option<String>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Write the signed, shuffled plan as JSON lines.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Write the coded queries and answers as JSON lines.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Second demand set for the sign-mapping audit, e.g. "d,e".
    #[arg(long)]
    pair: Option<String>,
    /// Sample count for the transcript shape test (needs --pair).
    #[arg(long)]
    samples: Option<usize>,
    /// Sabotage the plan first: drop-query | swap-indices | dup-donor | no-shuffle.
    #[arg(long)]
    mutate: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// Range for M: "10", "10:15", or "10,15".
    #[arg(long = "M")]
    m: String,
    #[arg(long = "K")]
    k: String,
    #[arg(long = "P")]
    p: String,
    #[arg(long = "N")]
    n: String,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Deserialize, Default)]
struct FileConfig {
    #[serde(rename = "M")]
    m: Option<usize>,
    #[serde(rename = "K")]
    k: Option<usize>,
    #[serde(rename = "P")]
    p: Option<usize>,
    #[serde(rename = "N")]
    n: Option<usize>,
    q: Option<u64>,
    seed: Option<u64>,
    demand: Option<DemandField>,
    dependent_rows: Option<Vec<Vec<u64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum DemandField {
    Text(String),
    List(Vec<usize>),
}

enum CliError {
    Config(String),
    Verify(String),
}

fn cfg(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

struct Resolved {
    m: usize,
    k: usize,
    p: usize,
    n: usize,
    q: u64,
    seed: u64,
    /// 0-based message labels.
    demand: Vec<usize>,
    rows: Vec<Vec<u64>>,
}

/// "a,c" or "1,3" to 0-based labels.
fn parse_demand(text: &str, m: usize) -> Result<Vec<usize>, CliError> {
    let mut out = Vec::new();
    for token in text.split(',') {
        let token = token.trim();
        if token.is_empty() {
            continue;
        }
        let label = if let Ok(v) = token.parse::<usize>() {
            if v == 0 {
                return Err(cfg("demand labels are 1-based"));
            }
            v - 1
        } else if token.len() == 1 && token.chars().next().unwrap().is_ascii_lowercase() {
            (token.as_bytes()[0] - b'a') as usize
        } else {
            return Err(cfg(format!("cannot read demand label {token:?}")));
        };
        if label >= m {
            return Err(cfg(format!(
                "demand label {token:?} is outside the {m} messages"
            )));
        }
        out.push(label);
    }
    if out.is_empty() {
        return Err(cfg("demand is empty"));
    }
    Ok(out)
}

/// Smallest odd prime at or above `min`.
fn next_field(min: u64) -> u64 {
    let mut c = min.max(3) | 1;
    loop {
        if Gf::new(c).is_ok() {
            return c;
        }
        c += 2;
    }
}

fn draw_rows(m: usize, k: usize, q: u64, seed: u64) -> Result<Vec<Vec<u64>>, CliError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(0x6c69_6200);
    for _ in 0..200 {
        let rows: Vec<Vec<u64>> = (0..m - k)
            .map(|_| (0..k).map(|_| rng.next_u64() % q).collect())
            .collect();
        if build_library(m, k, q, &rows).is_ok() {
            return Ok(rows);
        }
    }
    Err(cfg(format!(
        "could not draw {} valid dependent rows over F_{q}",
        m - k
    )))
}

fn resolve(args: &RunArgs) -> Result<Resolved, CliError> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| cfg(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| cfg(format!("cannot parse {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let m = args.m.or(file.m).ok_or_else(|| cfg("M is required"))?;
    let k = args.k.or(file.k).ok_or_else(|| cfg("K is required"))?;
    let n = args.n.or(file.n).ok_or_else(|| cfg("N is required"))?;
    let seed = args
        .seed
        .or(file.seed)
        .or_else(|| {
            std::env::var("MMPC_SEED")
                .ok()
                .and_then(|v| v.parse::<u64>().ok())
        })
        .unwrap_or(0);
    let demand = match (&args.demand, &file.demand) {
        (Some(text), _) => Some(parse_demand(text, m)?),
        (None, Some(DemandField::Text(text))) => Some(parse_demand(text, m)?),
        (None, Some(DemandField::List(labels))) => {
            let mut out = Vec::new();
            for &v in labels {
                if v == 0 || v > m {
                    return Err(cfg(format!("demand label {v} is outside 1..={m}")));
                }
                out.push(v - 1);
            }
            Some(out)
        }
        (None, None) => None,
    };
    let p = args
        .p
        .or(file.p)
        .or_else(|| demand.as_ref().map(|d| d.len()))
        .ok_or_else(|| cfg("P is required (or give --demand)"))?;
    let demand = demand.unwrap_or_else(|| (0..p).collect());
    if demand.len() != p {
        return Err(cfg(format!(
            "P={p} but the demand names {} messages",
            demand.len()
        )));
    }
    let summary = plan_summary(m, k, p, n).map_err(|e| cfg(e.to_string()))?;
    let q = match args.q.or(file.q) {
        Some(q) => q,
        None => next_field(min_field_size(&summary)),
    };
    let rows = match file.dependent_rows {
        Some(rows) => rows,
        None if m > k => draw_rows(m, k, q, seed)?,
        None => Vec::new(),
    };
    Ok(Resolved {
        m,
        k,
        p,
        n,
        q,
        seed,
        demand,
        rows,
    })
}

fn show_demand(demand: &[usize]) -> String {
    let inner: Vec<String> = demand.iter().map(|&l| (l + 1).to_string()).collect();
    format!("[{}]", inner.join(","))
}

fn build_lib(r: &Resolved) -> Result<MessageLibrary, CliError> {
    build_library(r.m, r.k, r.q, &r.rows).map_err(|e| cfg(e.to_string()))
}

/// Signed and shuffled plan for one demand, tape drawn from `seed`.
fn build_plan(
    lib: &MessageLibrary,
    demand: &[usize],
    n: usize,
    seed: u64,
) -> Result<QueryPlan, CliError> {
    let demand = DemandSet::new(demand.to_vec(), lib).map_err(|e| cfg(e.to_string()))?;
    let rlib = relabel(lib, &demand).map_err(|e| cfg(e.to_string()))?;
    let counts = stage_counts(lib.m(), demand.p(), n).map_err(|e| cfg(e.to_string()))?;
    let mut plan = build_query_plan(&rlib, &counts, n).map_err(|e| cfg(e.to_string()))?;
    let mut tape = RandomTape::from_seed(seed, plan.l);
    assign_signs(&mut plan, &mut tape);
    shuffle_plan(&mut plan, &mut tape);
    Ok(plan)
}

fn cmd_plan(args: &PlanArgs) -> Result<(), CliError> {
    let r = resolve(&args.run)?;
    let summary = plan_summary(r.m, r.k, r.p, r.n).map_err(|e| cfg(e.to_string()))?;
    let point = rate_point(r.m, r.k, r.p, r.n).map_err(|e| cfg(e.to_string()))?;
    println!(
        "plan m={} k={} p={} n={} q={} seed={} demand={}",
        r.m,
        r.k,
        r.p,
        r.n,
        r.q,
        r.seed,
        show_demand(&r.demand)
    );
    println!(
        "alpha={:?} r={:?} stages_per_server={}",
        summary.alpha,
        summary.r_by_round,
        summary.alpha.iter().sum::<u64>()
    );
    println!(
        "L={} D={} R2={} ({})",
        summary.l,
        summary.d,
        summary.r2,
        decimal6(&summary.r2)
    );
    println!(
        "R1={} ({}) R_upper={} ({}) gap={}",
        point.r1,
        decimal6(&point.r1),
        point.r_upper,
        decimal6(&point.r_upper),
        decimal6(&point.gap)
    );
    if let Some(path) = &args.dump {
        let lib = build_lib(&r)?;
        let plan = build_plan(&lib, &r.demand, r.n, r.seed)?;
        fs::write(path, dump_plan(&plan))
            .map_err(|e| cfg(format!("cannot write {}: {e}", path.display())))?;
        println!("plan dumped to {}", path.display());
    }
    Ok(())
}

fn protocol_failure_is_verification(err: &ProtocolError) -> bool {
    matches!(
        err,
        ProtocolError::DecodeMismatch { .. }
            | ProtocolError::DownloadMismatch { .. }
            | ProtocolError::SingularSystem { .. }
            | ProtocolError::StageReplayed { .. }
            | ProtocolError::AnswerCount { .. }
            | ProtocolError::MissingDonor { .. }
            | ProtocolError::Malformed(_)
            | ProtocolError::Coding(CodingError::Undecodable { .. })
    )
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let r = resolve(&args.run)?;
    let lib = build_lib(&r)?;
    let demand = DemandSet::new(r.demand.clone(), &lib).map_err(|e| cfg(e.to_string()))?;
    println!(
        "simulate seed={} m={} k={} p={} n={} q={} demand={}",
        r.seed,
        r.m,
        r.k,
        r.p,
        r.n,
        r.q,
        show_demand(&r.demand)
    );
    let run = run_protocol(&lib, &demand, r.n, r.q, r.seed).map_err(|e| {
        if protocol_failure_is_verification(&e) {
            CliError::Verify(e.to_string())
        } else {
            cfg(e.to_string())
        }
    })?;
    println!(
        "download={} expected={} rate={} ({})",
        run.transcript.total,
        run.summary.d,
        run.summary.r2,
        decimal6(&run.summary.r2)
    );
    println!(
        "decoded {} messages x {} symbols: exact match",
        run.decoded.rows(),
        run.decoded.cols()
    );
    if let Some(path) = &args.transcript {
        fs::write(path, run.transcript.dump())
            .map_err(|e| cfg(format!("cannot write {}: {e}", path.display())))?;
        println!("transcript written to {}", path.display());
    }
    Ok(())
}

fn cmd_audit(args: &AuditArgs) -> Result<(), CliError> {
    let r = resolve(&args.run)?;
    let lib = build_lib(&r)?;
    let demand = DemandSet::new(r.demand.clone(), &lib).map_err(|e| cfg(e.to_string()))?;
    let rlib = relabel(&lib, &demand).map_err(|e| cfg(e.to_string()))?;
    let mut plan = build_plan(&lib, &r.demand, r.n, r.seed)?;

    let mut reports: Vec<CheckReport> = Vec::new();
    let mut shuffled = true;
    if let Some(which) = &args.mutate {
        let detail = match which.as_str() {
            "drop-query" => mutate_drop_query(&mut plan),
            "swap-indices" => mutate_swap_indices(&mut plan),
            "dup-donor" => mutate_dup_donor(&mut plan),
            "no-shuffle" => {
                shuffled = false;
                mutate_unshuffle(&mut plan)
            }
            other => return Err(cfg(format!("unknown mutation {other:?}"))),
        };
        reports.push(CheckReport {
            check: "mutation".to_string(),
            scope: which.clone(),
            pass: true,
            detail,
        });
    }
    reports.extend(structural_checks(&plan, &rlib));

    let pair = match &args.pair {
        Some(text) => Some(parse_demand(text, r.m)?),
        None => None,
    };
    if let Some(pair_demand) = &pair {
        let scope = format!(
            "demand {} vs {}",
            show_demand(&r.demand),
            show_demand(pair_demand)
        );
        let other = build_plan(&lib, pair_demand, r.n, r.seed.wrapping_add(1))?;
        let report = match find_sign_mapping(&plan, &other) {
            Ok(mapping) => {
                let pinned = mapping.unique_up_to_negation();
                CheckReport {
                    check: "sign-mapping".to_string(),
                    scope: scope.clone(),
                    pass: pinned,
                    detail: if pinned {
                        format!("{} stages, unique up to negation", mapping.stages.len())
                    } else {
                        "mapping found but not pinned up to one negation".to_string()
                    },
                }
            }
            Err(err) => CheckReport {
                check: "sign-mapping".to_string(),
                scope: scope.clone(),
                pass: false,
                detail: err.to_string(),
            },
        };
        reports.push(report);
    }
    if let Some(samples) = args.samples {
        let pair_demand = pair
            .clone()
            .ok_or_else(|| cfg("--samples needs --pair to name the second demand"))?;
        let opts = ShapeOptions {
            samples,
            seed: r.seed,
            shuffled,
        };
        let scope = format!(
            "demand {} vs {}, {} samples",
            show_demand(&r.demand),
            show_demand(&pair_demand),
            samples
        );
        let report = match transcript_shape_test(
            &lib,
            r.n,
            &[r.demand.clone(), pair_demand],
            &opts,
        ) {
            Ok(shape) => {
                let min_p = shape
                    .features
                    .iter()
                    .map(|f| f.p_value)
                    .fold(1.0_f64, f64::min);
                CheckReport {
                    check: "shape-test".to_string(),
                    scope,
                    pass: !shape.rejected,
                    detail: format!(
                        "{} features, min p={:.6}, threshold {:.6}",
                        shape.features.len(),
                        min_p,
                        shape.threshold
                    ),
                }
            }
            Err(err) => return Err(cfg(err.to_string())),
        };
        reports.push(report);
    }

    let mut failed = 0usize;
    for report in &reports {
        println!(
            "{}",
            serde_json::to_string(report).expect("reports serialize")
        );
        if !report.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::Verify(format!("{failed} audit check(s) failed")));
    }
    Ok(())
}

/// "7", "2:6", or "10,15" to a list.
fn parse_range(text: &str) -> Result<Vec<usize>, CliError> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        match part.split_once(':') {
            Some((a, b)) => {
                let a: usize = a
                    .parse()
                    .map_err(|_| cfg(format!("bad range start in {text:?}")))?;
                let b: usize = b
                    .parse()
                    .map_err(|_| cfg(format!("bad range end in {text:?}")))?;
                out.extend(a..=b);
            }
            None => out.push(
                part.parse()
                    .map_err(|_| cfg(format!("bad value in {text:?}")))?,
            ),
        }
    }
    Ok(out)
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let ms = parse_range(&args.m)?;
    let ks = parse_range(&args.k)?;
    let ps = parse_range(&args.p)?;
    let ns = parse_range(&args.n)?;
    let mut grid = Vec::new();
    for &m in &ms {
        for &k in &ks {
            for &p in &ps {
                for &n in &ns {
                    if 1 <= p && p < k && k <= m && n >= 2 {
                        grid.push((m, k, p, n));
                    }
                }
            }
        }
    }
    let csv = sweep(&grid).map_err(|e| cfg(e.to_string()))?;
    match &args.out {
        Some(path) => fs::write(path, csv)
            .map_err(|e| cfg(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Plan(args) => cmd_plan(args),
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Audit(args) => cmd_audit(args),
        Cmd::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => {}
        Err(CliError::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    }
}
