//! Versioned on-disk form of a [`SynthesisBundle`].
//!
//! Numbers are serialized as JSON doubles (shortest round-trip form), so a
//! save/load cycle reproduces every `f64` exactly. The static QP image is
//! not stored: it is a deterministic function of the stored pieces and is
//! rebuilt on load, which keeps the file free of redundant (and potentially
//! inconsistent) data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::{ConstraintSpec, LinearSystem};
use crate::mpc::{PlanSet, QpStatic, SetCollection, SynthesisBundle, TighteningMode};
use crate::poly::Polytope;
use crate::scenario::{SamplePlan, Tightening};
use crate::sets::{IterationLog, TubeLog};

use super::config::{matrix_from_rows, matrix_to_rows};
use super::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PolytopeFile {
    dim: usize,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    empty: bool,
}

fn poly_to_file(p: &Polytope) -> PolytopeFile {
    PolytopeFile {
        dim: p.dim(),
        a: matrix_to_rows(p.a()),
        b: p.b().iter().copied().collect(),
        empty: p.is_marked_empty(),
    }
}

fn poly_from_file(f: &PolytopeFile, what: &str) -> Result<Polytope, CliError> {
    let a = if f.a.is_empty() {
        DMatrix::zeros(0, f.dim)
    } else {
        matrix_from_rows(&f.a, what)?
    };
    Polytope::from_parts(a, DVector::from_row_slice(&f.b), f.empty)
        .map_err(|e| CliError::Config(format!("bundle {what}: {e}")))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LogFile {
    iterations: usize,
    converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PlanFile {
    eps: f64,
    beta: f64,
    n_s: usize,
    discard: usize,
    band_lo: f64,
    band_hi: f64,
}

fn plan_to_file(p: &SamplePlan) -> PlanFile {
    PlanFile {
        eps: p.eps,
        beta: p.beta,
        n_s: p.n_s,
        discard: p.discard,
        band_lo: p.band.0,
        band_hi: p.band.1,
    }
}

fn plan_from_file(f: &PlanFile) -> SamplePlan {
    SamplePlan {
        n_s: f.n_s,
        discard: f.discard,
        eps: f.eps,
        beta: f.beta,
        band: (f.band_lo, f.band_hi),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PlansFile {
    state: Vec<PlanFile>,
    input: PlanFile,
    terminal: PlanFile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TubeLogFile {
    exponent: usize,
    alpha: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SetsFile {
    terminal: PolytopeFile,
    z_t: PolytopeFile,
    c_t: PolytopeFile,
    c_t_inf: Option<PolytopeFile>,
    region: PolytopeFile,
    tube: Option<PolytopeFile>,
    mrpi_log: LogFile,
    rci_log: Option<LogFile>,
    tube_log: Option<TubeLogFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BundleFile {
    schema_version: u32,
    config_hash: String,
    mode: String,
    beta: f64,
    accuracy_band: f64,
    seed: u64,
    terminal_uses_gain: bool,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    b_w: Vec<Vec<f64>>,
    q_weight: Vec<Vec<f64>>,
    r_weight: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    h_off: Vec<f64>,
    eps: Vec<f64>,
    g: Vec<Vec<f64>>,
    g_off: Vec<f64>,
    eps_u: f64,
    eps_t: f64,
    horizon: usize,
    k_gain: Vec<Vec<f64>>,
    p_dare: Vec<Vec<f64>>,
    p_cost: Vec<Vec<f64>>,
    eta: Vec<Vec<f64>>,
    mu: Vec<Vec<f64>>,
    eta_t: Vec<f64>,
    terminal_tight: PolytopeFile,
    plans: Option<PlansFile>,
    sets: SetsFile,
    w_outer: PolytopeFile,
    cost_bound: f64,
    cost_bound_se: f64,
    cost_constant_c: f64,
    cost_constant_c_se: f64,
}

/// Write a bundle (plus the hash of the config that produced it) to `path`.
pub fn save_bundle(
    bundle: &SynthesisBundle,
    config_hash: &str,
    path: &str,
) -> Result<(), CliError> {
    let file = BundleFile {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash.to_owned(),
        mode: bundle.mode.to_string(),
        beta: bundle.beta,
        accuracy_band: bundle.accuracy_band,
        seed: bundle.seed,
        terminal_uses_gain: bundle.terminal_uses_gain,
        a: matrix_to_rows(bundle.sys.a()),
        b: matrix_to_rows(bundle.sys.b()),
        b_w: matrix_to_rows(bundle.sys.b_w()),
        q_weight: matrix_to_rows(&bundle.q_weight),
        r_weight: matrix_to_rows(&bundle.r_weight),
        h: matrix_to_rows(&bundle.cons.h),
        h_off: bundle.cons.h_off.iter().copied().collect(),
        eps: bundle.cons.eps.iter().copied().collect(),
        g: matrix_to_rows(&bundle.cons.g),
        g_off: bundle.cons.g_off.iter().copied().collect(),
        eps_u: bundle.cons.eps_u,
        eps_t: bundle.cons.eps_t,
        horizon: bundle.cons.horizon,
        k_gain: matrix_to_rows(&bundle.k_gain),
        p_dare: matrix_to_rows(&bundle.p_dare),
        p_cost: matrix_to_rows(&bundle.p_cost),
        eta: matrix_to_rows(&bundle.tight.eta),
        mu: matrix_to_rows(&bundle.tight.mu),
        eta_t: bundle.tight.eta_t.iter().copied().collect(),
        terminal_tight: poly_to_file(&bundle.tight.terminal),
        plans: bundle.plans.as_ref().map(|p| PlansFile {
            state: p.state.iter().map(plan_to_file).collect(),
            input: plan_to_file(&p.input),
            terminal: plan_to_file(&p.terminal),
        }),
        sets: SetsFile {
            terminal: poly_to_file(&bundle.sets.terminal),
            z_t: poly_to_file(&bundle.sets.z_t),
            c_t: poly_to_file(&bundle.sets.c_t),
            c_t_inf: bundle.sets.c_t_inf.as_ref().map(poly_to_file),
            region: poly_to_file(&bundle.sets.region),
            tube: bundle.sets.tube.as_ref().map(poly_to_file),
            mrpi_log: LogFile {
                iterations: bundle.sets.mrpi_log.iterations,
                converged: bundle.sets.mrpi_log.converged,
            },
            rci_log: bundle.sets.rci_log.as_ref().map(|l| LogFile {
                iterations: l.iterations,
                converged: l.converged,
            }),
            tube_log: bundle.sets.tube_log.as_ref().map(|l| TubeLogFile {
                exponent: l.exponent,
                alpha: l.alpha,
            }),
        },
        w_outer: poly_to_file(&bundle.w_outer),
        cost_bound: bundle.cost_bound,
        cost_bound_se: bundle.cost_bound_se,
        cost_constant_c: bundle.cost_constant_c,
        cost_constant_c_se: bundle.cost_constant_c_se,
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| CliError::Runtime(format!("bundle serialization: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write bundle {path}: {e}")))
}

/// Read a bundle and the config hash it was synthesized under. The static QP
/// image is rebuilt from the stored pieces.
pub fn load_bundle(path: &str) -> Result<(SynthesisBundle, String), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read bundle {path}: {e}")))?;
    let file: BundleFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("bundle {path}: {e}")))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "bundle {path}: schema version {} (expected {SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    let bad = |what: &str, e: String| CliError::Config(format!("bundle {what}: {e}"));

    let sys = LinearSystem::new(
        matrix_from_rows(&file.a, "a")?,
        matrix_from_rows(&file.b, "b")?,
        matrix_from_rows(&file.b_w, "b_w")?,
    )
    .map_err(|e| bad("system", e.to_string()))?;
    let cons = ConstraintSpec {
        h: matrix_from_rows(&file.h, "h")?,
        h_off: DVector::from_row_slice(&file.h_off),
        eps: DVector::from_row_slice(&file.eps),
        g: matrix_from_rows(&file.g, "g")?,
        g_off: DVector::from_row_slice(&file.g_off),
        eps_u: file.eps_u,
        eps_t: file.eps_t,
        horizon: file.horizon,
    };
    cons.validate(&sys).map_err(|e| bad("constraints", e.to_string()))?;

    let tight = Tightening {
        eta: matrix_from_rows(&file.eta, "eta")?,
        mu: matrix_from_rows(&file.mu, "mu")?,
        eta_t: DVector::from_row_slice(&file.eta_t),
        terminal: poly_from_file(&file.terminal_tight, "terminal_tight")?,
    };
    let sets = SetCollection {
        terminal: poly_from_file(&file.sets.terminal, "sets.terminal")?,
        z_t: poly_from_file(&file.sets.z_t, "sets.z_t")?,
        c_t: poly_from_file(&file.sets.c_t, "sets.c_t")?,
        c_t_inf: file
            .sets
            .c_t_inf
            .as_ref()
            .map(|p| poly_from_file(p, "sets.c_t_inf"))
            .transpose()?,
        region: poly_from_file(&file.sets.region, "sets.region")?,
        tube: file
            .sets
            .tube
            .as_ref()
            .map(|p| poly_from_file(p, "sets.tube"))
            .transpose()?,
        mrpi_log: IterationLog {
            iterations: file.sets.mrpi_log.iterations,
            converged: file.sets.mrpi_log.converged,
        },
        rci_log: file.sets.rci_log.as_ref().map(|l| IterationLog {
            iterations: l.iterations,
            converged: l.converged,
        }),
        tube_log: file.sets.tube_log.as_ref().map(|l| TubeLog {
            exponent: l.exponent,
            alpha: l.alpha,
        }),
    };
    let mode: TighteningMode = file.mode.parse().map_err(CliError::Config)?;
    let q_weight = matrix_from_rows(&file.q_weight, "q_weight")?;
    let r_weight = matrix_from_rows(&file.r_weight, "r_weight")?;
    let p_cost = matrix_from_rows(&file.p_cost, "p_cost")?;
    let qp = if mode == TighteningMode::Robust {
        let tube = sets.tube.as_ref().ok_or_else(|| {
            CliError::Config(format!("bundle {path}: worst-case bundle without a tube section"))
        })?;
        QpStatic::build_tube(&sys, &cons, &q_weight, &r_weight, &p_cost, &tight, &sets.z_t, tube)
    } else {
        QpStatic::build(
            &sys,
            &cons,
            &q_weight,
            &r_weight,
            &p_cost,
            &tight,
            &sets.z_t,
            sets.c_t_inf.as_ref(),
        )
    };
    let bundle = SynthesisBundle {
        sys,
        cons,
        q_weight,
        r_weight,
        mode,
        beta: file.beta,
        accuracy_band: file.accuracy_band,
        seed: file.seed,
        terminal_uses_gain: file.terminal_uses_gain,
        k_gain: matrix_from_rows(&file.k_gain, "k_gain")?,
        p_dare: matrix_from_rows(&file.p_dare, "p_dare")?,
        p_cost,
        plans: file.plans.as_ref().map(|p| PlanSet {
            state: p.state.iter().map(plan_from_file).collect(),
            input: plan_from_file(&p.input),
            terminal: plan_from_file(&p.terminal),
        }),
        tight,
        sets,
        w_outer: poly_from_file(&file.w_outer, "w_outer")?,
        cost_bound: file.cost_bound,
        cost_bound_se: file.cost_bound_se,
        cost_constant_c: file.cost_constant_c,
        cost_constant_c_se: file.cost_constant_c_se,
        qp,
    };
    Ok((bundle, file.config_hash))
}
