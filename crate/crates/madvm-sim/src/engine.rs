use madvm_core::baselines;
use madvm_core::cluster::{
    self, apply_migrations, ClusterSpec, MigrationPlan, Placement, SystemState,
};
use madvm_core::demand::{
    self, quantize, DemandChain, DemandLevelSet, FeatureState, SlidingWindowEstimator,
};
use madvm_core::exact_mdp::{self, JointSpace, Policy, UtilityVector};
use madvm_core::madvm::{self, PerVMUtility};
use madvm_core::analysis;

use crate::config::{ControllerKind, SimConfig, TraceSource};
use crate::metrics::{MetricsReport, SlotRow};
use crate::trace::{load_trace, synthesize, BuiltTrace};
use crate::{Result, SimError};

const ORACLE_TOL: f64 = 1e-8;
const ORACLE_MAX_ITER: usize = 100_000;

pub fn build_trace(cfg: &SimConfig) -> Result<BuiltTrace> {
    let levels = cfg.level_set()?;
    let spec = cfg.spec()?;
    let built = match &cfg.trace {
        TraceSource::File { path } => {
            BuiltTrace { trace: load_trace(std::path::Path::new(path))?, ground_truth: None }
        }
        TraceSource::Synthesize(syn) => synthesize(syn, spec.num_vms, &levels, cfg.seed)?,
    };
    if built.trace.num_vms() != spec.num_vms {
        return Err(SimError::Input(format!(
            "trace covers {} VMs but the cluster has {}",
            built.trace.num_vms(),
            spec.num_vms
        )));
    }
    Ok(built)
}

/// Per-VM expected demand used for initial first-fit placement: the
/// stationary expectation of the ground-truth chain when known, otherwise
/// the uniform-prior expectation (mean level value).
fn expected_demands(
    ground_truth: Option<&[DemandChain]>,
    levels: &DemandLevelSet,
    num_vms: usize,
) -> Result<Vec<f64>> {
    match ground_truth {
        Some(chains) => {
            let lambda = levels.count();
            let uniform = vec![1.0 / lambda as f64; lambda];
            chains
                .iter()
                .map(|chain| {
                    let pi = demand::stationary_distribution(
                        chain,
                        &uniform,
                        demand::DEFAULT_STATIONARY_TOL,
                        demand::default_stationary_max_iter(lambda),
                    )?;
                    Ok(pi
                        .distribution
                        .iter()
                        .zip(levels.values())
                        .map(|(p, r)| p * r)
                        .sum())
                })
                .collect()
        }
        None => {
            let mean = levels.values().iter().sum::<f64>() / levels.count() as f64;
            Ok(vec![mean; num_vms])
        }
    }
}

/// Chains handed to the exact oracle: ground truth when the trace was
/// synthesized, otherwise a whole-trace MLE fit.
fn oracle_chains(built: &BuiltTrace, levels: &DemandLevelSet) -> Result<Vec<DemandChain>> {
    if let Some(chains) = &built.ground_truth {
        return Ok(chains.clone());
    }
    let trace = &built.trace;
    let window = trace.num_slots().max(2);
    let mut chains = Vec::with_capacity(trace.num_vms());
    for vm in 0..trace.num_vms() {
        let mut est = SlidingWindowEstimator::new(levels.count(), window)?;
        for slot in 0..trace.num_slots() {
            est.observe(quantize(trace.demand(vm, slot), levels)?)?;
        }
        chains.push(est.estimate());
    }
    Ok(chains)
}

enum ControllerState {
    Madvm {
        estimators: Vec<SlidingWindowEstimator>,
        previous: Option<Vec<PerVMUtility>>,
    },
    StaticFirstFit,
    PredictiveScaler {
        history: Vec<Vec<f64>>,
    },
    PatternConsolidator {
        history: Vec<Vec<f64>>,
    },
    ExactOracle {
        space: JointSpace,
        policy: Policy,
    },
}

fn init_controller(
    cfg: &SimConfig,
    built: &BuiltTrace,
    spec: &ClusterSpec,
    levels: &DemandLevelSet,
    initial: &Placement,
) -> Result<ControllerState> {
    Ok(match cfg.controller {
        ControllerKind::Madvm => ControllerState::Madvm {
            estimators: (0..spec.num_vms)
                .map(|_| SlidingWindowEstimator::new(levels.count(), cfg.window_slots))
                .collect::<madvm_core::Result<_>>()?,
            previous: None,
        },
        ControllerKind::StaticFirstFit => ControllerState::StaticFirstFit,
        ControllerKind::PredictiveScaler => {
            ControllerState::PredictiveScaler { history: vec![Vec::new(); spec.num_vms] }
        }
        ControllerKind::PatternConsolidator => {
            ControllerState::PatternConsolidator { history: vec![Vec::new(); spec.num_vms] }
        }
        ControllerKind::ExactOracle => {
            let chains = oracle_chains(built, levels)?;
            let space = JointSpace::new(spec, levels, exact_mdp::DEFAULT_STATE_BUDGET)?;
            let reference = SystemState::new(
                vec![0; spec.num_vms],
                initial.clone(),
                levels,
                spec,
            )?;
            let utility = exact_mdp::value_iteration(
                &chains,
                spec,
                levels,
                &reference,
                ORACLE_TOL,
                ORACLE_MAX_ITER,
            )?;
            let policy = exact_mdp::extract_policy(&utility, &chains, spec, levels)?;
            ControllerState::ExactOracle { space, policy }
        }
    })
}

fn initial_placement(
    cfg: &SimConfig,
    built: &BuiltTrace,
    spec: &ClusterSpec,
    levels: &DemandLevelSet,
) -> Result<Placement> {
    let demands = match cfg.controller {
        // The consolidator packs on what it has seen: the first slot.
        ControllerKind::PatternConsolidator => built.trace.slot(0).to_vec(),
        _ => expected_demands(built.ground_truth.as_deref(), levels, spec.num_vms)?,
    };
    Ok(baselines::static_first_fit(&demands, spec)?)
}

fn active_pm_count(placement: &Placement, spec: &ClusterSpec) -> usize {
    let mut hosts = vec![false; spec.num_pms];
    for pm in placement.assignment() {
        hosts[pm.0] = true;
    }
    hosts.iter().filter(|&&h| h).count()
}

pub fn run_simulation(cfg: &SimConfig) -> Result<MetricsReport> {
    let built = build_trace(cfg)?;
    run_on_trace(cfg, &built)
}

/// The slot loop on an already-built trace (lets λ-sweeps share one trace).
pub fn run_on_trace(cfg: &SimConfig, built: &BuiltTrace) -> Result<MetricsReport> {
    let spec = cfg.spec()?;
    let levels = cfg.level_set()?;
    if built.trace.num_vms() != spec.num_vms {
        return Err(SimError::Input("trace does not match the cluster size".into()));
    }
    let mut placement = initial_placement(cfg, built, &spec, &levels)?;
    let mut controller = init_controller(cfg, built, &spec, &levels, &placement)?;
    let options = cfg.madvm.to_options();
    let trace = &built.trace;
    let mut rows = Vec::with_capacity(trace.num_slots());
    for slot in 0..trace.num_slots() {
        let demands = trace.slot(slot);
        let demand_levels = demands
            .iter()
            .map(|&d| quantize(d, &levels))
            .collect::<madvm_core::Result<Vec<_>>>()?;
        let state = SystemState::new(demand_levels.clone(), placement.clone(), &levels, &spec)?;
        let plan: MigrationPlan = match &mut controller {
            ControllerState::Madvm { estimators, previous } => {
                for (est, &lvl) in estimators.iter_mut().zip(&demand_levels) {
                    est.observe(lvl)?;
                }
                let out =
                    madvm::madvm_step(&state, estimators, &spec, &levels, &options, previous.as_deref())?;
                if options.warm_start {
                    *previous = Some(out.utilities);
                }
                out.plan
            }
            ControllerState::StaticFirstFit => MigrationPlan::identity(&placement),
            ControllerState::PredictiveScaler { history } => {
                for (h, &d) in history.iter_mut().zip(demands) {
                    h.push(d);
                }
                baselines::predictive_scaler_step(&state, history, &spec, cfg.prediction_window)?
            }
            ControllerState::PatternConsolidator { history } => {
                for (h, &d) in history.iter_mut().zip(demands) {
                    h.push(d);
                }
                baselines::pattern_consolidator_step(&state, history, &spec, cfg.repack_period, slot)?
            }
            ControllerState::ExactOracle { space, policy } => {
                policy.plan(space.pack(&demand_levels, &placement)).clone()
            }
        };
        let moved = plan.migrations(&placement);
        if moved > spec.t_m {
            return Err(SimError::Invariant(format!(
                "controller asked for {moved} migrations at slot {slot}, cap is {}",
                spec.t_m
            )));
        }
        // Accrue on the pre-migration placement; the plan takes effect at
        // the next slot.
        rows.push(SlotRow {
            slot,
            power_watts: cluster::total_power(&state, &levels, &spec),
            shortage_sum: cluster::shortage_vector(&state, &levels, &spec).iter().sum(),
            migrations: moved,
            active_pms: active_pm_count(&placement, &spec),
        });
        placement = apply_migrations(&state, &plan, &spec)?;
    }
    Ok(MetricsReport::new(rows, cfg.window_slots, spec.lambda_weight, spec.num_vms))
}

/// One run per λ over the identical trace and seed.
pub fn sweep_lambda(cfg: &SimConfig, lambdas: &[f64]) -> Result<Vec<(f64, MetricsReport)>> {
    if lambdas.is_empty() {
        return Err(SimError::Input("lambda list must be nonempty".into()));
    }
    let built = build_trace(cfg)?;
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut run_cfg = cfg.clone();
        run_cfg.cluster.lambda_weight = lambda;
        out.push((lambda, run_on_trace(&run_cfg, &built)?));
    }
    Ok(out)
}

/// Exact MDP solution for the configured cluster and chains.
pub fn oracle_solution(cfg: &SimConfig) -> Result<(UtilityVector, usize)> {
    let spec = cfg.spec()?;
    let levels = cfg.level_set()?;
    let built = build_trace(cfg)?;
    let chains = oracle_chains(&built, &levels)?;
    let space = JointSpace::new(&spec, &levels, exact_mdp::DEFAULT_STATE_BUDGET)?;
    let placement = initial_placement(cfg, &built, &spec, &levels)?;
    let reference = SystemState::new(vec![0; spec.num_vms], placement, &levels, &spec)?;
    let utility =
        exact_mdp::value_iteration(&chains, &spec, &levels, &reference, ORACLE_TOL, ORACLE_MAX_ITER)?;
    Ok((utility, space.num_states()))
}

/// Approximation-error sandwich for the configured instance: converged
/// per-VM tables vs. the exact joint utilities.
pub fn bound_report(cfg: &SimConfig) -> Result<analysis::BoundReport> {
    let spec = cfg.spec()?;
    let levels = cfg.level_set()?;
    let built = build_trace(cfg)?;
    let chains = oracle_chains(&built, &levels)?;
    let placement = initial_placement(cfg, &built, &spec, &levels)?;
    let lambda = levels.count();
    let uniform = vec![1.0 / lambda as f64; lambda];
    let mut features = Vec::with_capacity(spec.num_vms);
    for (l, chain) in chains.iter().enumerate() {
        let pi = demand::stationary_distribution(
            chain,
            &uniform,
            demand::DEFAULT_STATIONARY_TOL,
            demand::default_stationary_max_iter(lambda),
        )?;
        features.push(demand::feature_state(&pi.distribution, &levels, placement.pm_of(l))?);
    }
    let mut tables = Vec::with_capacity(spec.num_vms);
    for l in 0..spec.num_vms {
        let ks = madvm::build_key_states(l, &features, &levels, &spec)?;
        tables.push(madvm::per_vm_value_iteration(
            &ks,
            &chains[l],
            &spec,
            &levels,
            1e-8,
            200_000,
            None,
        )?);
    }
    let w = madvm::WeightVector::from_tables(&tables)?;
    let reference = reference_state(&features, &levels, &spec)?;
    let exact =
        exact_mdp::value_iteration(&chains, &spec, &levels, &reference, 1e-9, 200_000)?;
    if !exact.converged {
        return Err(SimError::Input(
            "exact value iteration did not converge on this instance".into(),
        ));
    }
    let mapping = analysis::MappingMatrix::new(&features, &levels, &spec)?;
    let iteration = madvm::BlockIteration::new(&features, &chains, &levels, &spec)?;
    Ok(analysis::bound_check(&exact.values, &w.weights, &mapping, &iteration, 50)?)
}

fn reference_state(
    features: &[FeatureState],
    levels: &DemandLevelSet,
    spec: &ClusterSpec,
) -> Result<SystemState> {
    let mut lv = Vec::with_capacity(features.len());
    let mut pm = Vec::with_capacity(features.len());
    for f in features {
        lv.push(f.expected_level_index);
        pm.push(f.location);
    }
    Ok(SystemState::new(lv, Placement::new(pm, spec)?, levels, spec)?)
}
