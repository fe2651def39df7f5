use madvm_core::cluster::ClusterSpec;
use madvm_core::demand::DemandLevelSet;
use madvm_core::madvm::{ControlMode, MadvmOptions, MigrationRanking};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::{Result, SimError};

/// Full description of one simulation run. Unknown keys are rejected so a
/// typo cannot silently fall back to a default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub cluster: ClusterConfig,
    /// Quantization level values (fractions of one PM's capacity),
    /// strictly increasing.
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    /// Sliding estimation window T_w, in slots.
    #[serde(default = "default_window_slots")]
    pub window_slots: usize,
    pub controller: ControllerKind,
    #[serde(default)]
    pub madvm: MadvmConfig,
    /// Window (slots) for the predictive scaler's demand forecast.
    #[serde(default = "default_prediction_window")]
    pub prediction_window: usize,
    /// Re-pack period (slots) for the pattern consolidator.
    #[serde(default = "default_repack_period")]
    pub repack_period: usize,
    #[serde(default = "default_slot_minutes")]
    pub slot_minutes: u64,
    #[serde(default)]
    pub seed: u64,
    pub trace: TraceSource,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_levels() -> Vec<f64> {
    vec![0.2, 0.4, 0.6, 0.8, 1.0]
}

fn default_window_slots() -> usize {
    432 // 3 days of 10-minute slots
}

fn default_prediction_window() -> usize {
    madvm_core::baselines::DEFAULT_PREDICTION_WINDOW
}

fn default_repack_period() -> usize {
    madvm_core::baselines::DEFAULT_REPACK_PERIOD
}

fn default_slot_minutes() -> u64 {
    10
}

/// Cluster sizes and the power model. `t_m` defaults to 2% of the VM
/// count, rounded up.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(default = "default_num_pms")]
    pub num_pms: usize,
    #[serde(default = "default_num_vms")]
    pub num_vms: usize,
    #[serde(default = "default_capacity")]
    pub capacity: f64,
    #[serde(default = "default_p_idle")]
    pub p_idle: f64,
    #[serde(default = "default_p_max")]
    pub p_max: f64,
    #[serde(default = "default_p_sleep")]
    pub p_sleep: f64,
    #[serde(default)]
    pub t_m: Option<usize>,
    #[serde(default = "default_lambda_weight")]
    pub lambda_weight: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

fn default_num_pms() -> usize {
    10
}

fn default_num_vms() -> usize {
    20
}

fn default_capacity() -> f64 {
    1.0
}

fn default_p_idle() -> f64 {
    250.0
}

fn default_p_max() -> f64 {
    500.0
}

fn default_p_sleep() -> f64 {
    50.0
}

fn default_lambda_weight() -> f64 {
    1e6
}

impl ClusterConfig {
    pub fn to_spec(&self) -> Result<ClusterSpec> {
        let t_m = self
            .t_m
            .unwrap_or_else(|| ((self.num_vms as f64) * 0.02).ceil() as usize);
        let spec = ClusterSpec {
            num_pms: self.num_pms,
            num_vms: self.num_vms,
            capacity: self.capacity,
            p_idle: self.p_idle,
            p_max: self.p_max,
            p_sleep: self.p_sleep,
            t_m,
            lambda_weight: self.lambda_weight,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Madvm,
    StaticFirstFit,
    PredictiveScaler,
    PatternConsolidator,
    ExactOracle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MadvmConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub ranking: MigrationRanking,
    #[serde(default)]
    pub mode: ControlMode,
    #[serde(default)]
    pub warm_start: bool,
}

fn default_tol() -> f64 {
    MadvmOptions::default().tol
}

fn default_max_iter() -> usize {
    MadvmOptions::default().max_iter
}

impl Default for MadvmConfig {
    fn default() -> Self {
        let o = MadvmOptions::default();
        Self {
            tol: o.tol,
            max_iter: o.max_iter,
            ranking: o.ranking,
            mode: o.mode,
            warm_start: o.warm_start,
        }
    }
}

impl MadvmConfig {
    pub fn to_options(&self) -> MadvmOptions {
        MadvmOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            ranking: self.ranking,
            mode: self.mode,
            warm_start: self.warm_start,
        }
    }
}

/// Where demands come from: a CSV file or seeded synthesis from per-VM
/// Markov chains.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum TraceSource {
    File { path: String },
    Synthesize(SynthesisConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub num_slots: usize,
    /// Per-VM row-major transition matrices. When absent, chains are
    /// generated from `seed` per `random`.
    #[serde(default)]
    pub chains: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub random: Option<RandomChainsConfig>,
    /// Initial demand level per VM; sampled from the seed when absent.
    #[serde(default)]
    pub start_levels: Option<Vec<usize>>,
    #[serde(default)]
    pub regime_switches: Vec<RegimeSwitchConfig>,
}

/// Parameters for seeded random chain generation. `stickiness` mixes in
/// a self-loop component, pushing traces toward quasi-static behavior.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomChainsConfig {
    #[serde(default = "default_stickiness")]
    pub stickiness: f64,
    #[serde(default = "default_min_entry")]
    pub min_entry: f64,
}

fn default_stickiness() -> f64 {
    0.0
}

fn default_min_entry() -> f64 {
    0.05
}

impl Default for RandomChainsConfig {
    fn default() -> Self {
        Self { stickiness: default_stickiness(), min_entry: default_min_entry() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSwitchConfig {
    pub slot: usize,
    pub chains: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub per_slot_csv: Option<String>,
    #[serde(default)]
    pub aggregate_json: Option<String>,
}

impl SimConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Input(format!("cannot read {}: {e}", path.display())))?;
        let cfg: SimConfig = serde_json::from_str(&text)
            .map_err(|e| SimError::Input(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.cluster.to_spec()?;
        self.level_set()?;
        if self.window_slots < 2 {
            return Err(SimError::Input("window_slots must be >= 2".into()));
        }
        if self.prediction_window == 0 {
            return Err(SimError::Input("prediction_window must be >= 1".into()));
        }
        if self.repack_period == 0 {
            return Err(SimError::Input("repack_period must be >= 1".into()));
        }
        if self.slot_minutes == 0 {
            return Err(SimError::Input("slot_minutes must be >= 1".into()));
        }
        match &self.trace {
            TraceSource::File { path } => {
                if !Path::new(path).exists() {
                    return Err(SimError::Input(format!("trace file {path} does not exist")));
                }
            }
            TraceSource::Synthesize(syn) => {
                if syn.num_slots == 0 {
                    return Err(SimError::Input("num_slots must be >= 1".into()));
                }
                if syn.chains.is_some() && syn.random.is_some() {
                    return Err(SimError::Input(
                        "give either explicit chains or random chain parameters, not both".into(),
                    ));
                }
                if let Some(r) = &syn.random {
                    if !(r.min_entry > 0.0) || !(0.0..1.0).contains(&r.stickiness) {
                        return Err(SimError::Input(
                            "need min_entry > 0 and stickiness in [0, 1)".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn level_set(&self) -> Result<DemandLevelSet> {
        Ok(DemandLevelSet::new(self.levels.clone())?)
    }

    pub fn spec(&self) -> Result<ClusterSpec> {
        self.cluster.to_spec()
    }
}
