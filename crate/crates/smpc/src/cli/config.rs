//! Configuration schema, environment overrides, and the content hash that
//! ties simulation runs to the bundle they were synthesized from.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ConstraintSpec, DisturbanceModel, LinearSystem};
use crate::mpc::{SynthesisOptions, TighteningMode};

use super::CliError;

fn default_outer_facets() -> usize {
    8
}
fn default_accuracy_band() -> f64 {
    0.05
}
fn default_cost_mc_samples() -> usize {
    100_000
}
fn default_window() -> (usize, usize) {
    (1, 6)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    /// Row-major `n x n` dynamics matrix.
    pub a: Vec<Vec<f64>>,
    /// Row-major `n x m` input matrix.
    pub b: Vec<Vec<f64>>,
    /// Row-major `n x m_w` disturbance matrix.
    pub b_w: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceBlock {
    /// `"truncated_gaussian"` (needs `sigma`, `truncation`) or `"samples"`
    /// (needs `samples`).
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    /// Bound on `||w||^2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<f64>,
    #[serde(default = "default_outer_facets")]
    pub outer_facets: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsBlock {
    /// Row-major `p x n` state constraint normals.
    pub h: Vec<Vec<f64>>,
    pub h_off: Vec<f64>,
    /// Per-row violation levels.
    pub eps: Vec<f64>,
    /// Row-major `q x m` input constraint normals.
    pub g: Vec<Vec<f64>>,
    pub g_off: Vec<f64>,
    pub eps_u: f64,
    pub eps_t: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcBlock {
    /// Row-major `n x n` state weight.
    pub q: Vec<Vec<f64>>,
    /// Row-major `m x m` input weight.
    pub r: Vec<Vec<f64>>,
    pub horizon: usize,
    #[serde(default)]
    pub terminal_uses_gain: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingBlock {
    /// Confidence budget for the scenario certificates.
    pub beta: f64,
    #[serde(default = "default_accuracy_band")]
    pub accuracy_band: f64,
    pub seed: u64,
    #[serde(default = "default_cost_mc_samples")]
    pub cost_mc_samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub x0: Vec<f64>,
    pub n_runs: usize,
    pub steps: usize,
    /// `proposed`, `rf-tube`, or `robust`.
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Inclusive step window for averaged violation rates.
    #[serde(default = "default_window")]
    pub window: (usize, usize),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub system: SystemBlock,
    pub disturbance: DisturbanceBlock,
    pub constraints: ConstraintsBlock,
    pub mpc: MpcBlock,
    pub sampling: SamplingBlock,
    pub run: RunBlock,
}

/// Everything a command needs, constructed and dimension-checked.
pub struct BuiltConfig {
    pub sys: LinearSystem,
    pub dist: DisturbanceModel,
    pub cons: ConstraintSpec,
    pub q_weight: DMatrix<f64>,
    pub r_weight: DMatrix<f64>,
    pub opts: SynthesisOptions,
    pub x0: DVector<f64>,
}

pub fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.is_empty() {
        return Err(CliError::Config(format!("{what}: matrix has no rows")));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(CliError::Config(format!("{what}: matrix has empty rows")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Config(format!("{what}: ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl ScenarioConfig {
    pub fn load(path: &str) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {path}: {e}")))?;
        let mut cfg: ScenarioConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {path}: {e}")))?;
        cfg.apply_env_overrides(std::env::vars())?;
        Ok(cfg)
    }

    /// Apply `SMPC_<BLOCK>__<FIELD>=value` overrides; the value is parsed as
    /// JSON, falling back to a bare string. Paths must name existing fields.
    pub fn apply_env_overrides(
        &mut self,
        vars: impl Iterator<Item = (String, String)>,
    ) -> Result<(), CliError> {
        const PREFIX: &str = "SMPC_";
        let mut overrides: Vec<(String, String)> = vars
            .filter_map(|(k, v)| k.strip_prefix(PREFIX).map(|rest| (rest.to_owned(), v)))
            .collect();
        if overrides.is_empty() {
            return Ok(());
        }
        overrides.sort();
        let mut tree = serde_json::to_value(&*self)
            .map_err(|e| CliError::Config(format!("config serialization: {e}")))?;
        for (path, raw) in overrides {
            let segments: Vec<String> =
                path.split("__").map(|s| s.to_ascii_lowercase()).collect();
            let mut node = &mut tree;
            for (i, seg) in segments.iter().enumerate() {
                let obj = node.as_object_mut().ok_or_else(|| {
                    CliError::Config(format!("override SMPC_{path}: '{seg}' is not an object"))
                })?;
                node = obj.get_mut(seg).ok_or_else(|| {
                    CliError::Config(format!(
                        "override SMPC_{path}: no field '{}'",
                        segments[..=i].join(".")
                    ))
                })?;
            }
            *node = serde_json::from_str(&raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        }
        *self = serde_json::from_value(tree)
            .map_err(|e| CliError::Config(format!("after env overrides: {e}")))?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the synthesis-relevant blocks
    /// (system, disturbance, constraints, mpc, sampling). The run block is
    /// excluded so changing run counts never invalidates a bundle.
    pub fn hash(&self) -> Result<String, CliError> {
        let canonical = serde_json::json!({
            "system": &self.system,
            "disturbance": &self.disturbance,
            "constraints": &self.constraints,
            "mpc": &self.mpc,
            "sampling": &self.sampling,
        });
        let text = serde_json::to_string(&canonical)
            .map_err(|e| CliError::Config(format!("config hashing: {e}")))?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn mode(&self) -> Result<TighteningMode, CliError> {
        self.run.mode.parse().map_err(CliError::Config)
    }

    /// Construct and dimension-check every domain object.
    pub fn build(&self) -> Result<BuiltConfig, CliError> {
        let bad = |e: String| CliError::Config(e);
        let a = matrix_from_rows(&self.system.a, "system.a")?;
        let b = matrix_from_rows(&self.system.b, "system.b")?;
        let b_w = matrix_from_rows(&self.system.b_w, "system.b_w")?;
        let sys = LinearSystem::new(a, b, b_w).map_err(|e| bad(format!("system: {e}")))?;

        let dist = match self.disturbance.kind.as_str() {
            "truncated_gaussian" => {
                let sigma = self
                    .disturbance
                    .sigma
                    .as_ref()
                    .ok_or_else(|| bad("disturbance: truncated_gaussian needs sigma".into()))?;
                let truncation = self
                    .disturbance
                    .truncation
                    .ok_or_else(|| bad("disturbance: truncated_gaussian needs truncation".into()))?;
                DisturbanceModel::truncated_gaussian(
                    matrix_from_rows(sigma, "disturbance.sigma")?,
                    truncation,
                    self.disturbance.outer_facets,
                )
                .map_err(|e| bad(format!("disturbance: {e}")))?
            }
            "samples" => {
                let rows = self
                    .disturbance
                    .samples
                    .as_ref()
                    .ok_or_else(|| bad("disturbance: kind 'samples' needs samples".into()))?;
                let samples: Vec<DVector<f64>> =
                    rows.iter().map(|r| DVector::from_row_slice(r)).collect();
                DisturbanceModel::from_samples(samples, self.disturbance.outer_facets)
                    .map_err(|e| bad(format!("disturbance: {e}")))?
            }
            other => return Err(bad(format!("disturbance: unknown kind '{other}'"))),
        };
        if dist.dim() != sys.m_w() {
            return Err(bad(format!(
                "disturbance dimension {} does not match b_w width {}",
                dist.dim(),
                sys.m_w()
            )));
        }

        let cons = ConstraintSpec {
            h: matrix_from_rows(&self.constraints.h, "constraints.h")?,
            h_off: DVector::from_row_slice(&self.constraints.h_off),
            eps: DVector::from_row_slice(&self.constraints.eps),
            g: matrix_from_rows(&self.constraints.g, "constraints.g")?,
            g_off: DVector::from_row_slice(&self.constraints.g_off),
            eps_u: self.constraints.eps_u,
            eps_t: self.constraints.eps_t,
            horizon: self.mpc.horizon,
        };
        cons.validate(&sys).map_err(|e| bad(format!("constraints: {e}")))?;
        if cons.horizon < 2 {
            return Err(bad("mpc.horizon must be at least 2".into()));
        }

        let q_weight = matrix_from_rows(&self.mpc.q, "mpc.q")?;
        let r_weight = matrix_from_rows(&self.mpc.r, "mpc.r")?;
        if q_weight.nrows() != sys.n() || q_weight.ncols() != sys.n() {
            return Err(bad("mpc.q must be n x n".into()));
        }
        if r_weight.nrows() != sys.m() || r_weight.ncols() != sys.m() {
            return Err(bad("mpc.r must be m x m".into()));
        }

        if self.run.x0.len() != sys.n() {
            return Err(bad(format!(
                "run.x0 has {} entries for an n = {} state",
                self.run.x0.len(),
                sys.n()
            )));
        }
        let opts = SynthesisOptions {
            mode: self.mode()?,
            beta: self.sampling.beta,
            accuracy_band: self.sampling.accuracy_band,
            seed: self.sampling.seed,
            terminal_uses_gain: self.mpc.terminal_uses_gain,
            cost_mc_samples: self.sampling.cost_mc_samples,
        };
        Ok(BuiltConfig {
            sys,
            dist,
            cons,
            q_weight,
            r_weight,
            opts,
            x0: DVector::from_row_slice(&self.run.x0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_config() -> ScenarioConfig {
        serde_json::from_str(
            r#"{
            "system": {"a": [[1.0]], "b": [[1.0]], "b_w": [[1.0]]},
            "disturbance": {"kind": "samples", "samples": [[0.01], [-0.01]]},
            "constraints": {"h": [[1.0]], "h_off": [2.0], "eps": [0.2],
                            "g": [[1.0], [-1.0]], "g_off": [1.0, 1.0],
                            "eps_u": 0.1, "eps_t": 0.1},
            "mpc": {"q": [[1.0]], "r": [[1.0]], "horizon": 3},
            "sampling": {"beta": 0.001, "seed": 7},
            "run": {"x0": [0.5], "n_runs": 10, "steps": 5, "mode": "proposed"}
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn env_overrides_reach_nested_fields() {
        let mut cfg = sample_config();
        cfg.apply_env_overrides(
            vec![
                ("SMPC_RUN__N_RUNS".into(), "500".into()),
                ("SMPC_CONSTRAINTS__EPS_U".into(), "0.05".into()),
                ("SMPC_RUN__MODE".into(), "robust".into()),
                ("HOME".into(), "/tmp".into()),
            ]
            .into_iter(),
        )
        .unwrap();
        assert_eq!(cfg.run.n_runs, 500);
        assert_eq!(cfg.constraints.eps_u, 0.05);
        assert_eq!(cfg.run.mode, "robust");
    }

    #[test]
    fn env_override_with_a_bogus_path_is_rejected() {
        let mut cfg = sample_config();
        let err = cfg
            .apply_env_overrides(vec![("SMPC_RUN__NRUNS".into(), "500".into())].into_iter())
            .unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn hash_ignores_the_run_block_but_not_the_physics() {
        let base = sample_config();
        let h0 = base.hash().unwrap();

        let mut runs_changed = base.clone();
        runs_changed.run.n_runs = 9999;
        assert_eq!(h0, runs_changed.hash().unwrap());

        let mut physics_changed = base.clone();
        physics_changed.system.a[0][0] = 1.5;
        assert_ne!(h0, physics_changed.hash().unwrap());
    }

    #[test]
    fn build_checks_dimensions_before_any_math() {
        let mut cfg = sample_config();
        cfg.run.x0 = vec![0.5, 0.5];
        assert!(matches!(cfg.build(), Err(CliError::Config(_))));
    }

    #[test]
    fn built_config_carries_the_sampling_options() {
        let built = sample_config().build().unwrap();
        assert_eq!(built.opts.seed, 7);
        assert_eq!(built.opts.beta, 0.001);
        assert_eq!(built.opts.accuracy_band, 0.05);
        assert_eq!(built.x0.len(), 1);
    }
}
