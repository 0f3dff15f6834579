//! Batch entry point: `synth`, `simulate`, `region`, and `report`.
//!
//! Exit codes: 0 success, 2 configuration error (bad file, bad flag, hash
//! mismatch), 3 synthesis infeasible or non-convergent, 4 runtime or solver
//! failure.

pub mod artifact;
pub mod config;

use std::fmt;
use std::path::Path;

use clap::{Parser, Subcommand};

use crate::mpc::{synthesize, MpcError, SynthesisBundle, TighteningMode};
use crate::poly::PolyError;
use crate::scenario::SamplePlan;
use crate::sets::SetsError;
use crate::sim::{average_cost_check, run_many, RunRecord, SimError, ViolationStats};

use config::{BuiltConfig, ScenarioConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, flags, or artifact compatibility (exit 2).
    Config(String),
    /// The offline pipeline could not produce a usable controller (exit 3).
    Synthesis(String),
    /// Runtime, solver, or I/O failure (exit 4).
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Synthesis(m) => write!(f, "synthesis: {m}"),
            CliError::Runtime(m) => write!(f, "runtime: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Synthesis(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

fn classify_mpc(e: MpcError) -> CliError {
    match e {
        MpcError::Solver(inner) => CliError::Runtime(format!("solver: {inner}")),
        MpcError::InvalidParameter(m) => CliError::Config(m),
        MpcError::Model(inner) => CliError::Config(inner.to_string()),
        other => CliError::Synthesis(other.to_string()),
    }
}

fn classify_sim(e: SimError) -> CliError {
    match e {
        SimError::Mpc(inner) => match classify_mpc(inner) {
            // An infeasible-set error during simulation is a runtime problem,
            // not an offline synthesis failure.
            CliError::Synthesis(m) => CliError::Runtime(m),
            other => other,
        },
        SimError::Model(inner) => CliError::Runtime(inner.to_string()),
        SimError::Poly(inner) => CliError::Runtime(inner.to_string()),
        SimError::InvalidParameter(m) => CliError::Config(m),
    }
}

/// Does this synthesis error mean "the tightened sets are empty" (an answer)
/// rather than "the pipeline failed" (an error)?
fn is_empty_outcome(e: &MpcError) -> bool {
    matches!(
        e,
        MpcError::Sets(SetsError::Empty { .. }) | MpcError::Poly(PolyError::Empty)
    )
}

#[derive(Parser)]
#[command(
    name = "smpc",
    version,
    about = "Synthesis and closed-loop simulation for stochastic MPC with certified constraint tightening"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Offline synthesis: gains, tightenings, invariant sets, QP image.
    Synth {
        /// Scenario configuration (JSON).
        #[arg(long)]
        config: String,
        /// Bundle artifact to write.
        #[arg(long)]
        out: String,
        /// Override the tightening mode from the config.
        #[arg(long)]
        mode: Option<String>,
        /// Override the sampling seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-loop Monte Carlo batch from a synthesized bundle.
    Simulate {
        /// Bundle artifact from `synth`.
        #[arg(long)]
        bundle: String,
        /// The configuration the bundle was synthesized from.
        #[arg(long)]
        config: String,
        /// Trajectory CSV to write; the per-step summary goes next to it
        /// as `<stem>_summary.csv`.
        #[arg(long)]
        out: String,
        /// Override run.n_runs.
        #[arg(long)]
        runs: Option<usize>,
        /// Override run.steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the base seed (default: sampling.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: run.workers or all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Feasible initial-state regions for all three tightening modes.
    Region {
        #[arg(long)]
        config: String,
        /// Vertex-list CSV to write.
        #[arg(long)]
        out: String,
        /// Override the sampling seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// One-shot summary: synthesis, simulation statistics, region areas.
    Report {
        #[arg(long)]
        config: String,
        /// JSON summary to write (printed regardless).
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

/// Parse arguments, dispatch, and map errors to exit codes.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                0
            } else {
                2
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Command::Synth { config, out, mode, seed } => cmd_synth(&config, &out, mode, seed),
        Command::Simulate { bundle, config, out, runs, steps, seed, workers } => {
            cmd_simulate(&bundle, &config, &out, runs, steps, seed, workers)
        }
        Command::Region { config, out, seed } => cmd_region(&config, &out, seed),
        Command::Report { config, out, runs, steps, seed, workers } => {
            cmd_report(&config, out.as_deref(), runs, steps, seed, workers)
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn distinct_plans(bundle: &SynthesisBundle) -> Vec<SamplePlan> {
    let mut out: Vec<SamplePlan> = Vec::new();
    if let Some(plans) = &bundle.plans {
        for p in plans.state.iter().chain([&plans.input, &plans.terminal]) {
            if !out.iter().any(|q| q.eps.to_bits() == p.eps.to_bits()) {
                out.push(*p);
            }
        }
        out.sort_by(|a, b| a.eps.total_cmp(&b.eps));
    }
    out
}

fn print_bundle_summary(bundle: &SynthesisBundle) {
    println!(
        "mode {}  horizon {}  seed {}  beta {}",
        bundle.mode,
        bundle.horizon(),
        bundle.seed,
        bundle.beta
    );
    for p in distinct_plans(bundle) {
        println!(
            "sample plan: eps {} -> N_s {}  discard {}  band [{}, {}]",
            p.eps,
            p.n_s,
            p.discard,
            p.band.0 * p.eps,
            p.band.1 * p.eps
        );
    }
    println!(
        "terminal set: {} facets (invariance fixed point in {} iterations)",
        bundle.sets.terminal.num_rows(),
        bundle.sets.mrpi_log.iterations
    );
    println!("tightened terminal set: {} facets", bundle.sets.z_t.num_rows());
    println!("t-step joint set: {} facets", bundle.sets.c_t.num_rows());
    if let (Some(inv), Some(log)) = (&bundle.sets.c_t_inf, &bundle.sets.rci_log) {
        println!(
            "first-step invariant set: {} facets ({} iterations)",
            inv.num_rows(),
            log.iterations
        );
    }
    if let (Some(tube), Some(log)) = (&bundle.sets.tube, &bundle.sets.tube_log) {
        println!(
            "invariant tube: {} facets ({} one-step terms, contraction {:.2e})",
            tube.num_rows(),
            log.exponent,
            log.alpha
        );
    }
    println!("feasible region: {} facets", bundle.sets.region.num_rows());
    println!(
        "cost bound E[(B_w w)' P (B_w w)] = {} +- {}",
        bundle.cost_bound, bundle.cost_bound_se
    );
    println!(
        "horizon cost constant = {} +- {}",
        bundle.cost_constant_c, bundle.cost_constant_c_se
    );
}

fn cmd_synth(
    config_path: &str,
    out_path: &str,
    mode: Option<String>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = ScenarioConfig::load(config_path)?;
    let mut built = cfg.build()?;
    if let Some(m) = mode {
        built.opts.mode = m.parse().map_err(CliError::Config)?;
    }
    if let Some(s) = seed {
        built.opts.seed = s;
    }
    let bundle = synthesize(
        &built.sys,
        &built.dist,
        &built.cons,
        &built.q_weight,
        &built.r_weight,
        &built.opts,
    )
    .map_err(classify_mpc)?;
    artifact::save_bundle(&bundle, &cfg.hash()?, out_path)?;
    print_bundle_summary(&bundle);
    println!("bundle written to {out_path}");
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn trajectory_csv(n: usize, m: usize, p: usize, records: &[RunRecord]) -> String {
    let mut out = String::new();
    out.push_str("run,step");
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    for i in 1..=m {
        out.push_str(&format!(",u{i}"));
    }
    out.push_str(",qp_status");
    for j in 1..=p {
        out.push_str(&format!(",viol_row_{j}"));
    }
    out.push_str(",stage_cost,prev_seq_feasible\n");
    for (run, rec) in records.iter().enumerate() {
        let steps = rec.us.len();
        for k in 0..=steps {
            out.push_str(&format!("{run},{k}"));
            for i in 0..n {
                out.push(',');
                out.push_str(&fmt_f64(rec.xs[k][i]));
            }
            if k < steps {
                for i in 0..m {
                    out.push(',');
                    out.push_str(&fmt_f64(rec.us[k][i]));
                }
                out.push(',');
                out.push_str(rec.statuses[k].as_str());
            } else {
                for _ in 0..m {
                    out.push(',');
                }
                out.push(',');
            }
            for j in 0..p {
                out.push(',');
                out.push(if rec.violations[k][j] { '1' } else { '0' });
            }
            if k < steps {
                out.push(',');
                out.push_str(&fmt_f64(rec.stage_costs[k]));
                out.push(',');
                match rec.prev_feasible[k] {
                    None => {}
                    Some(true) => out.push('1'),
                    Some(false) => out.push('0'),
                }
            } else {
                out.push_str(",,");
            }
            out.push('\n');
        }
    }
    out
}

fn summary_csv(stats: Option<&ViolationStats>) -> String {
    let mut out = String::from("row,step,violation_freq,ci_lo,ci_hi\n");
    if let Some(s) = stats {
        let rows = s.freq.first().map_or(0, Vec::len);
        for j in 0..rows {
            for k in 1..=s.steps {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    j + 1,
                    k,
                    fmt_f64(s.freq[k - 1][j]),
                    fmt_f64(s.ci_lo[k - 1][j]),
                    fmt_f64(s.ci_hi[k - 1][j])
                ));
            }
        }
    }
    out
}

fn summary_path(out_path: &str) -> String {
    let path = Path::new(out_path);
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let name = format!("{stem}_summary.csv");
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            dir.join(name).to_string_lossy().into_owned()
        }
        _ => name,
    }
}

fn write_file(path: &str, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {path}: {e}")))
}

fn print_stats(stats: &ViolationStats, infeasible_steps: usize) {
    let (lo, hi) = stats.window;
    for (j, avg) in stats.window_avg.iter().enumerate() {
        println!(
            "state row {}: window-averaged violation over steps {lo}-{hi} = {}",
            j + 1,
            avg
        );
    }
    println!(
        "eps_f estimate {} over {} audited steps",
        stats.eps_f, stats.eps_f_pairs
    );
    println!("infeasible steps: {infeasible_steps}");
}

fn count_infeasible(records: &[RunRecord]) -> usize {
    records
        .iter()
        .map(|r| {
            r.statuses
                .iter()
                .filter(|s| **s == crate::sim::StepStatus::Infeasible)
                .count()
        })
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    bundle_path: &str,
    config_path: &str,
    out_path: &str,
    runs: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
    workers: Option<usize>,
) -> Result<(), CliError> {
    let cfg = ScenarioConfig::load(config_path)?;
    let (bundle, stored_hash) = artifact::load_bundle(bundle_path)?;
    if cfg.hash()? != stored_hash {
        return Err(CliError::Config(
            "config does not match the bundle it claims to drive (hash mismatch); re-run synth"
                .into(),
        ));
    }
    let built = cfg.build()?;
    let n_runs = runs.unwrap_or(cfg.run.n_runs);
    let steps = steps.unwrap_or(cfg.run.steps);
    let base_seed = seed.unwrap_or(cfg.sampling.seed);
    let workers = workers.or(cfg.run.workers).unwrap_or_else(default_workers);
    if n_runs > 0 && steps == 0 {
        return Err(CliError::Config("run.steps must be at least 1".into()));
    }

    let records = run_many(&bundle, &built.dist, &built.x0, steps, n_runs, base_seed, workers)
        .map_err(classify_sim)?;
    let csv = trajectory_csv(
        bundle.sys.n(),
        bundle.sys.m(),
        bundle.cons.num_state_rows(),
        &records,
    );
    write_file(out_path, &csv)?;
    let stats = if records.is_empty() {
        None
    } else {
        Some(ViolationStats::from_records(&records, cfg.run.window).map_err(classify_sim)?)
    };
    write_file(&summary_path(out_path), &summary_csv(stats.as_ref()))?;

    println!("runs {n_runs}  steps {steps}  workers {workers}  base seed {base_seed}");
    match &stats {
        Some(s) => print_stats(s, count_infeasible(&records)),
        None => println!("no runs requested; wrote headers only"),
    }
    println!("trajectories written to {out_path}");
    Ok(())
}

/// Synthesize one mode's feasible region; `Ok(None)` means the tightened
/// problem is genuinely empty for that mode.
#[allow(clippy::type_complexity)]
fn region_for_mode(
    built: &BuiltConfig,
    mode: TighteningMode,
    seed: Option<u64>,
) -> Result<Option<(crate::poly::Polytope, Vec<nalgebra::Vector2<f64>>, f64)>, CliError> {
    let mut opts = built.opts;
    opts.mode = mode;
    if let Some(s) = seed {
        opts.seed = s;
    }
    match synthesize(
        &built.sys,
        &built.dist,
        &built.cons,
        &built.q_weight,
        &built.r_weight,
        &opts,
    ) {
        Ok(bundle) => {
            let region = bundle.sets.region;
            let verts = region
                .vertices_2d()
                .map_err(|e| CliError::Runtime(format!("region vertices: {e}")))?;
            let area = region
                .area_2d()
                .map_err(|e| CliError::Runtime(format!("region area: {e}")))?;
            Ok(Some((region, verts, area)))
        }
        Err(e) if is_empty_outcome(&e) => Ok(None),
        Err(e) => Err(classify_mpc(e)),
    }
}

const REGION_MODES: [TighteningMode; 3] =
    [TighteningMode::Robust, TighteningMode::RfTube, TighteningMode::Proposed];

fn cmd_region(config_path: &str, out_path: &str, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = ScenarioConfig::load(config_path)?;
    let built = cfg.build()?;
    if built.sys.n() != 2 {
        return Err(CliError::Config(
            "region vertex output needs a two-dimensional state space".into(),
        ));
    }

    let mut csv = String::from("mode,vertex_index,x1,x2,area,empty\n");
    let mut results = Vec::new();
    for mode in REGION_MODES {
        let entry = region_for_mode(&built, mode, seed)?;
        match &entry {
            Some((_, verts, area)) => {
                for (vi, v) in verts.iter().enumerate() {
                    csv.push_str(&format!(
                        "{mode},{vi},{},{},{},0\n",
                        fmt_f64(v.x),
                        fmt_f64(v.y),
                        fmt_f64(*area)
                    ));
                }
                println!("area {mode} = {area}");
            }
            None => {
                csv.push_str(&format!("{mode},,,,0,1\n"));
                println!("area {mode} = 0 (empty tightened problem)");
            }
        }
        results.push((mode, entry));
    }
    write_file(out_path, &csv)?;

    let area_of = |mode: TighteningMode| -> Option<f64> {
        results
            .iter()
            .find(|(m, _)| *m == mode)
            .and_then(|(_, e)| e.as_ref().map(|(_, _, a)| *a))
    };
    if let (Some(ap), Some(at)) = (area_of(TighteningMode::Proposed), area_of(TighteningMode::RfTube))
    {
        if at > 0.0 {
            println!("ratio proposed/rf-tube = {}", ap / at);
        }
    }
    if let (Some(ap), Some(ar)) = (area_of(TighteningMode::Proposed), area_of(TighteningMode::Robust))
    {
        if ar > 0.0 {
            println!("ratio proposed/robust = {}", ap / ar);
        }
    }
    for pair in results.windows(2) {
        if let (Some((inner, _, _)), Some((outer, _, _))) = (&pair[0].1, &pair[1].1) {
            let nested = inner
                .is_subset(outer, 1e-9)
                .map_err(|e| CliError::Runtime(format!("nesting check: {e}")))?;
            println!(
                "{} region within {} region: {}",
                pair[0].0,
                pair[1].0,
                if nested { "yes" } else { "no" }
            );
        }
    }
    println!("region vertices written to {out_path}");
    Ok(())
}

fn cmd_report(
    config_path: &str,
    out_path: Option<&str>,
    runs: Option<usize>,
    steps: Option<usize>,
    seed: Option<u64>,
    workers: Option<usize>,
) -> Result<(), CliError> {
    let cfg = ScenarioConfig::load(config_path)?;
    let mut built = cfg.build()?;
    if let Some(s) = seed {
        built.opts.seed = s;
    }
    let bundle = synthesize(
        &built.sys,
        &built.dist,
        &built.cons,
        &built.q_weight,
        &built.r_weight,
        &built.opts,
    )
    .map_err(classify_mpc)?;
    print_bundle_summary(&bundle);

    let n_runs = runs.unwrap_or(cfg.run.n_runs).max(1);
    let steps = steps.unwrap_or(cfg.run.steps).max(1);
    let base_seed = seed.unwrap_or(cfg.sampling.seed);
    let workers = workers.or(cfg.run.workers).unwrap_or_else(default_workers);
    let records = run_many(&bundle, &built.dist, &built.x0, steps, n_runs, base_seed, workers)
        .map_err(classify_sim)?;
    let stats = ViolationStats::from_records(&records, cfg.run.window).map_err(classify_sim)?;
    let infeasible = count_infeasible(&records);
    print_stats(&stats, infeasible);

    let discard = if steps >= 100 { 50 } else { steps / 5 };
    let cost = average_cost_check(&bundle, &records, discard).map_err(classify_sim)?;
    println!(
        "average state cost {} +- {} vs bound {} +- {} -> {}",
        cost.empirical_mean,
        cost.empirical_se,
        cost.bound,
        cost.bound_se,
        if cost.pass { "within bound" } else { "ABOVE BOUND" }
    );

    let mut areas = serde_json::Map::new();
    if built.sys.n() == 2 {
        for mode in REGION_MODES {
            let entry = region_for_mode(&built, mode, seed)?;
            let area = entry.as_ref().map_or(0.0, |(_, _, a)| *a);
            println!("area {mode} = {area}");
            areas.insert(mode.to_string(), serde_json::json!(area));
        }
    }

    let summary = serde_json::json!({
        "config_hash": cfg.hash()?,
        "mode": bundle.mode.to_string(),
        "runs": n_runs,
        "steps": steps,
        "window": { "from": stats.window.0, "to": stats.window.1 },
        "window_avg_violation": stats.window_avg,
        "eps_f": stats.eps_f,
        "eps_f_audited_steps": stats.eps_f_pairs,
        "infeasible_steps": infeasible,
        "average_cost": {
            "empirical": cost.empirical_mean,
            "empirical_se": cost.empirical_se,
            "bound": cost.bound,
            "bound_se": cost.bound_se,
            "discarded_steps": cost.discarded_steps,
            "pass": cost.pass,
        },
        "region_areas": areas,
        "sample_plans": distinct_plans(&bundle)
            .iter()
            .map(|p| serde_json::json!({"eps": p.eps, "n_s": p.n_s, "discard": p.discard}))
            .collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Runtime(format!("summary serialization: {e}")))?;
    if let Some(path) = out_path {
        write_file(path, &text)?;
        println!("summary written to {path}");
    } else {
        println!("{text}");
    }
    Ok(())
}
