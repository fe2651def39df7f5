//! Approximate per-VM controller: key states, per-VM value iteration,
//! linear utility decomposition, and the control-utility auction, run as
//! a five-step per-slot loop in centralized or simulated-distributed
//! mode.

use alloc::vec;
use alloc::vec::Vec;

use crate::cluster::{self, ClusterSpec, MigrationPlan, Placement, PmId, SystemState};
use crate::demand::{
    self, feature_state, DemandChain, DemandLevelSet, FeatureState, SlidingWindowEstimator,
};
use crate::error::{Error, Result};

/// The Λ·|V_s| joint states probed by one VM's value iteration: entry
/// (r, y) puts the owner at demand level `r` on PM `y` while every other
/// VM sits frozen at its feature state.
#[derive(Debug, Clone)]
pub struct KeyStateSet {
    owner: usize,
    owner_feature: FeatureState,
    num_levels: usize,
    num_pms: usize,
    /// Row-major by (r, y): `states[r * num_pms + y]`.
    states: Vec<SystemState>,
}

/// Frozen context + owner sweep over all (level, PM) pairs.
pub fn build_key_states(
    owner: usize,
    features: &[FeatureState],
    levels: &DemandLevelSet,
    spec: &ClusterSpec,
) -> Result<KeyStateSet> {
    if features.len() != spec.num_vms {
        return Err(Error::Input("one feature state per VM required".into()));
    }
    if owner >= spec.num_vms {
        return Err(Error::Input("owner VM index out of range".into()));
    }
    let lambda = levels.count();
    let mut states = Vec::with_capacity(lambda * spec.num_pms);
    for r in 0..lambda {
        for y in 0..spec.num_pms {
            let mut demand_levels = Vec::with_capacity(spec.num_vms);
            let mut pms = Vec::with_capacity(spec.num_vms);
            for (i, f) in features.iter().enumerate() {
                if i == owner {
                    demand_levels.push(r);
                    pms.push(PmId(y));
                } else {
                    demand_levels.push(f.expected_level_index);
                    pms.push(f.location);
                }
            }
            let placement = Placement::new(pms, spec)?;
            states.push(SystemState::new(demand_levels, placement, levels, spec)?);
        }
    }
    Ok(KeyStateSet {
        owner,
        owner_feature: features[owner],
        num_levels: lambda,
        num_pms: spec.num_pms,
        states,
    })
}

impl KeyStateSet {
    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn owner_feature(&self) -> FeatureState {
        self.owner_feature
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, r: usize, y: usize) -> &SystemState {
        &self.states[r * self.num_pms + y]
    }

    pub fn states(&self) -> &[SystemState] {
        &self.states
    }

    fn costs(&self, levels: &DemandLevelSet, spec: &ClusterSpec) -> Vec<f64> {
        self.states
            .iter()
            .map(|s| cluster::instantaneous_cost(s, levels, spec))
            .collect()
    }
}

/// Converged per-VM utility table over one key-state set. The entry at
/// the owner's feature state is pinned to 0 after every sweep.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PerVMUtility {
    pub owner: usize,
    pub num_levels: usize,
    pub num_pms: usize,
    /// Row-major by (r, y): `table[r * num_pms + y]`.
    pub table: Vec<f64>,
    /// Per-VM average-cost estimate at the reference state.
    pub beta: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Max-norm of successive table differences, one entry per sweep.
    pub diffs: Vec<f64>,
    /// Total (state, action) evaluations across all sweeps.
    pub evaluations: usize,
}

impl PerVMUtility {
    pub fn value(&self, r: usize, y: usize) -> f64 {
        self.table[r * self.num_pms + y]
    }
}

/// One Bellman sweep over a key-state table. Transitions move only the
/// owner: demand by `chain`, location deterministically to the chosen
/// target. Writes raw (pre-subtraction) values into `raw` and returns
/// the evaluation count.
fn block_sweep(
    costs: &[f64],
    chain: &DemandChain,
    num_pms: usize,
    table: &[f64],
    raw: &mut [f64],
) -> usize {
    let lambda = chain.num_levels();
    // Expected next value per (current level, target PM).
    let mut expected = vec![0.0; lambda * num_pms];
    for r in 0..lambda {
        let row = chain.row(r);
        for target in 0..num_pms {
            let mut acc = 0.0;
            for (r2, &p) in row.iter().enumerate() {
                acc += p * table[r2 * num_pms + target];
            }
            expected[r * num_pms + target] = acc;
        }
    }
    let mut evaluations = 0;
    for r in 0..lambda {
        for y in 0..num_pms {
            let idx = r * num_pms + y;
            let mut best = f64::INFINITY;
            for target in 0..num_pms {
                evaluations += 1;
                let v = costs[idx] + expected[r * num_pms + target];
                if v < best {
                    best = v;
                }
            }
            raw[idx] = best;
        }
    }
    evaluations
}

/// Relative value iteration restricted to one VM's key states. Reference
/// state = the all-feature-state joint state, i.e. the owner at its own
/// feature (level, location). Tables start from `init` when given
/// (warm start), zeros otherwise.
pub fn per_vm_value_iteration(
    key_states: &KeyStateSet,
    chain: &DemandChain,
    spec: &ClusterSpec,
    levels: &DemandLevelSet,
    tol: f64,
    max_iter: usize,
    init: Option<&[f64]>,
) -> Result<PerVMUtility> {
    if chain.num_levels() != key_states.num_levels {
        return Err(Error::Input("chain dimension must match the level set".into()));
    }
    let n = key_states.len();
    let num_pms = key_states.num_pms;
    let costs = key_states.costs(levels, spec);
    let f = key_states.owner_feature;
    let reference = f.expected_level_index * num_pms + f.location.0;
    let mut table = match init {
        Some(t) if t.len() == n => t.to_vec(),
        Some(_) => return Err(Error::Input("warm-start table has the wrong size".into())),
        None => vec![0.0; n],
    };
    let mut raw = vec![0.0; n];
    let mut diffs = Vec::new();
    let mut beta = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    let mut evaluations = 0;
    for sweep in 1..=max_iter {
        iterations = sweep;
        evaluations += block_sweep(&costs, chain, num_pms, &table, &mut raw);
        beta = raw[reference];
        let mut max_diff: f64 = 0.0;
        let mut span_lo = f64::INFINITY;
        let mut span_hi = f64::NEG_INFINITY;
        for i in 0..n {
            let next = raw[i] - beta;
            let d = next - table[i];
            max_diff = max_diff.max(libm::fabs(d));
            span_lo = span_lo.min(d);
            span_hi = span_hi.max(d);
            table[i] = next;
        }
        diffs.push(max_diff);
        if span_hi - span_lo <= tol {
            converged = true;
            break;
        }
    }
    table[reference] = 0.0;
    Ok(PerVMUtility {
        owner: key_states.owner,
        num_levels: key_states.num_levels,
        num_pms,
        table,
        beta,
        converged,
        iterations,
        diffs,
        evaluations,
    })
}

/// `Σ_l Ṽ_l(R_l, Y_l)`: the linear decomposition of the joint utility.
pub fn approximate_joint_utility(tables: &[PerVMUtility], state: &SystemState) -> f64 {
    tables
        .iter()
        .enumerate()
        .map(|(l, t)| t.value(state.demand_levels[l], state.placement.pm_of(l).0))
        .sum()
}

/// All per-VM tables stacked in VM order; index `(l, r, y)` lives at
/// `l·Λ·|V_s| + r·|V_s| + y`.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WeightVector {
    pub num_vms: usize,
    pub num_levels: usize,
    pub num_pms: usize,
    pub weights: Vec<f64>,
}

impl WeightVector {
    pub fn from_tables(tables: &[PerVMUtility]) -> Result<Self> {
        let first = tables.first().ok_or_else(|| Error::Input("no tables".into()))?;
        let (num_levels, num_pms) = (first.num_levels, first.num_pms);
        let mut weights = Vec::with_capacity(tables.len() * num_levels * num_pms);
        for t in tables {
            if t.num_levels != num_levels || t.num_pms != num_pms {
                return Err(Error::Input("tables disagree on dimensions".into()));
            }
            weights.extend_from_slice(&t.table);
        }
        Ok(Self { num_vms: tables.len(), num_levels, num_pms, weights })
    }

    pub fn index(&self, vm: usize, r: usize, y: usize) -> usize {
        vm * self.num_levels * self.num_pms + r * self.num_pms + y
    }

    /// Positions of the ones in the indicator feature encoding of `state`.
    pub fn feature_indices(&self, state: &SystemState) -> Vec<usize> {
        (0..self.num_vms)
            .map(|l| self.index(l, state.demand_levels[l], state.placement.pm_of(l).0))
            .collect()
    }

    /// `Wᵀ F(S)` — identical to [`approximate_joint_utility`].
    pub fn evaluate(&self, state: &SystemState) -> f64 {
        self.feature_indices(state).into_iter().map(|i| self.weights[i]).sum()
    }
}

/// One VM's auction bid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ControlBid {
    pub vm: usize,
    /// Best achievable one-step-plus-future value.
    pub control_utility: f64,
    pub best_target: PmId,
    /// Stay value minus best value; 0 whenever best_target = current.
    pub gain: f64,
}

/// Evaluates `g(S(t)) + Σ_{r'} Pr[r'|R_l] Ṽ_l(r', γ)` for every target
/// PM γ. Ties keep the current location, then the smallest PM id.
pub fn control_utility(
    vm: usize,
    current: &SystemState,
    table: &PerVMUtility,
    chain: &DemandChain,
    spec: &ClusterSpec,
    levels: &DemandLevelSet,
) -> ControlBid {
    let r = current.demand_levels[vm];
    let y = current.placement.pm_of(vm);
    // Action-independent, so computed once.
    let g = cluster::instantaneous_cost(current, levels, spec);
    let row = chain.row(r);
    let expected = |target: usize| -> f64 {
        row.iter().enumerate().map(|(r2, &p)| p * table.value(r2, target)).sum()
    };
    let stay_value = g + expected(y.0);
    let mut best_value = f64::INFINITY;
    let mut best_target = y;
    for target in 0..spec.num_pms {
        let v = g + expected(target);
        if v < best_value {
            best_value = v;
            best_target = PmId(target);
        }
    }
    if stay_value <= best_value {
        best_value = stay_value;
        best_target = y;
    }
    ControlBid {
        vm,
        control_utility: best_value,
        best_target,
        gain: stay_value - best_value,
    }
}

/// How the auction ranks bids. The improvement-based ranking is the
/// default; the two utility orderings exist for experimentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MigrationRanking {
    #[default]
    GainDescending,
    UtilityAscending,
    UtilityDescending,
}

/// Grants moves to the top ≤ `T_m` positive-gain bids; everyone else
/// stays put. Ties break by VM id.
pub fn select_migrations(
    bids: &[ControlBid],
    current: &Placement,
    spec: &ClusterSpec,
    ranking: MigrationRanking,
) -> Result<MigrationPlan> {
    if bids.len() != current.num_vms() {
        return Err(Error::Input("need exactly one bid per VM".into()));
    }
    let mut order: Vec<usize> = (0..bids.len()).collect();
    let key = |i: usize| -> f64 {
        match ranking {
            MigrationRanking::GainDescending => -bids[i].gain,
            MigrationRanking::UtilityAscending => bids[i].control_utility,
            MigrationRanking::UtilityDescending => -bids[i].control_utility,
        }
    };
    order.sort_by(|&a, &b| {
        key(a).partial_cmp(&key(b)).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut targets = current.assignment().to_vec();
    let mut moved = 0;
    for i in order {
        if moved == spec.t_m {
            break;
        }
        let bid = &bids[i];
        if bid.gain > 0.0 && bid.best_target != current.pm_of(bid.vm) {
            targets[bid.vm] = bid.best_target;
            moved += 1;
        }
    }
    Ok(MigrationPlan::new(targets))
}

/// Where the per-slot loop runs. Both modes compute the same plan; the
/// distributed mode additionally records what each VM would broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ControlMode {
    #[default]
    Centralized,
    Distributed,
}

/// The only information a VM shares in distributed mode: its feature
/// state and its current (demand level, location).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BroadcastMessage {
    pub vm: usize,
    pub feature: FeatureState,
    pub demand_level: usize,
    pub location: PmId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MadvmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub ranking: MigrationRanking,
    pub mode: ControlMode,
    /// Seed each slot's tables from the previous slot instead of zeros.
    pub warm_start: bool,
}

impl Default for MadvmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            ranking: MigrationRanking::GainDescending,
            mode: ControlMode::Centralized,
            warm_start: false,
        }
    }
}

/// Everything one slot of the controller produced, for the engine and
/// for diagnostics.
#[derive(Debug, Clone)]
pub struct SlotOutcome {
    pub plan: MigrationPlan,
    pub features: Vec<FeatureState>,
    pub utilities: Vec<PerVMUtility>,
    pub bids: Vec<ControlBid>,
    /// Empty in centralized mode.
    pub messages: Vec<BroadcastMessage>,
}

/// One slot of the controller: (1) reset tables, (2) re-estimate chains
/// and feature states from the sliding windows, (3) collect the shared
/// context, (4) per-VM value iteration, (5) bids and auction.
pub fn madvm_step(
    state: &SystemState,
    estimators: &[SlidingWindowEstimator],
    spec: &ClusterSpec,
    levels: &DemandLevelSet,
    options: &MadvmOptions,
    previous: Option<&[PerVMUtility]>,
) -> Result<SlotOutcome> {
    if estimators.len() != spec.num_vms {
        return Err(Error::Input("one estimator per VM required".into()));
    }
    let lambda = levels.count();
    let uniform = vec![1.0 / lambda as f64; lambda];
    let mut chains = Vec::with_capacity(spec.num_vms);
    let mut features = Vec::with_capacity(spec.num_vms);
    for (l, est) in estimators.iter().enumerate() {
        let chain = est.estimate();
        let pi = demand::stationary_distribution(
            &chain,
            &uniform,
            demand::DEFAULT_STATIONARY_TOL,
            demand::default_stationary_max_iter(lambda),
        )?;
        features.push(feature_state(&pi.distribution, levels, state.placement.pm_of(l))?);
        chains.push(chain);
    }
    let messages = match options.mode {
        ControlMode::Centralized => Vec::new(),
        ControlMode::Distributed => features
            .iter()
            .enumerate()
            .map(|(l, &feature)| BroadcastMessage {
                vm: l,
                feature,
                demand_level: state.demand_levels[l],
                location: state.placement.pm_of(l),
            })
            .collect(),
    };
    let mut utilities = Vec::with_capacity(spec.num_vms);
    for l in 0..spec.num_vms {
        let key_states = build_key_states(l, &features, levels, spec)?;
        let init = match (options.warm_start, previous) {
            (true, Some(prev)) => prev.get(l).map(|t| t.table.as_slice()),
            _ => None,
        };
        utilities.push(per_vm_value_iteration(
            &key_states,
            &chains[l],
            spec,
            levels,
            options.tol,
            options.max_iter,
            init,
        )?);
    }
    let bids: Vec<ControlBid> = (0..spec.num_vms)
        .map(|l| control_utility(l, state, &utilities[l], &chains[l], spec, levels))
        .collect();
    let plan = select_migrations(&bids, &state.placement, spec, options.ranking)?;
    Ok(SlotOutcome { plan, features, utilities, bids, messages })
}

/// The stacked weight-space iteration map: one Bellman sweep applied
/// blockwise per VM, each block pinned at its owner's feature state.
/// Its fixed point is the concatenation of the converged per-VM tables.
#[derive(Debug, Clone)]
pub struct BlockIteration {
    num_vms: usize,
    num_levels: usize,
    num_pms: usize,
    chains: Vec<DemandChain>,
    costs: Vec<Vec<f64>>,
    references: Vec<usize>,
}

impl BlockIteration {
    pub fn new(
        features: &[FeatureState],
        chains: &[DemandChain],
        levels: &DemandLevelSet,
        spec: &ClusterSpec,
    ) -> Result<Self> {
        if chains.len() != spec.num_vms {
            return Err(Error::Input("one demand chain per VM required".into()));
        }
        let mut costs = Vec::with_capacity(spec.num_vms);
        let mut references = Vec::with_capacity(spec.num_vms);
        for l in 0..spec.num_vms {
            let key_states = build_key_states(l, features, levels, spec)?;
            costs.push(key_states.costs(levels, spec));
            let f = key_states.owner_feature;
            references.push(f.expected_level_index * spec.num_pms + f.location.0);
        }
        Ok(Self {
            num_vms: spec.num_vms,
            num_levels: levels.count(),
            num_pms: spec.num_pms,
            chains: chains.to_vec(),
            costs,
            references,
        })
    }

    pub fn block_len(&self) -> usize {
        self.num_levels * self.num_pms
    }

    pub fn weight_len(&self) -> usize {
        self.num_vms * self.block_len()
    }

    /// Applies the map once to a stacked weight vector.
    pub fn sweep(&self, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.weight_len() {
            return Err(Error::Input("weight vector has the wrong length".into()));
        }
        let block = self.block_len();
        let mut out = vec![0.0; weights.len()];
        for l in 0..self.num_vms {
            let table = &weights[l * block..(l + 1) * block];
            let raw = &mut out[l * block..(l + 1) * block];
            block_sweep(&self.costs[l], &self.chains[l], self.num_pms, table, raw);
            let beta = raw[self.references[l]];
            for v in raw.iter_mut() {
                *v -= beta;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact_mdp;
    use alloc::vec;

    fn spec(num_pms: usize, num_vms: usize, t_m: usize) -> ClusterSpec {
        ClusterSpec {
            num_pms,
            num_vms,
            capacity: 1.0,
            p_idle: 250.0,
            p_max: 500.0,
            p_sleep: 50.0,
            t_m,
            lambda_weight: 1e6,
        }
    }

    fn feature(level: usize, pm: usize) -> FeatureState {
        FeatureState { expected_level_index: level, location: PmId(pm) }
    }

    #[test]
    fn key_state_counts() {
        let levels5 = DemandLevelSet::uniform(5, 1.0).unwrap();
        let s = spec(1, 1, 1);
        let ks = build_key_states(0, &[feature(0, 0)], &levels5, &s).unwrap();
        assert_eq!(ks.len(), 5);

        let levels2 = DemandLevelSet::uniform(2, 1.0).unwrap();
        let s = spec(3, 2, 1);
        let ks =
            build_key_states(0, &[feature(0, 0), feature(1, 2)], &levels2, &s).unwrap();
        assert_eq!(ks.len(), 6);
        for st in ks.states() {
            assert_eq!(st.demand_levels[1], 1);
            assert_eq!(st.placement.pm_of(1), PmId(2));
        }
    }

    #[test]
    fn frozen_context_tracks_features() {
        let levels = DemandLevelSet::uniform(2, 1.0).unwrap();
        let s = spec(2, 2, 1);
        let a = build_key_states(0, &[feature(0, 0), feature(0, 0)], &levels, &s).unwrap();
        let b = build_key_states(0, &[feature(0, 0), feature(1, 1)], &levels, &s).unwrap();
        for (sa, sb) in a.states().iter().zip(b.states()) {
            assert_ne!(sa.demand_levels[1], sb.demand_levels[1]);
            assert_ne!(sa.placement.pm_of(1), sb.placement.pm_of(1));
        }
    }

    #[test]
    fn single_vm_table_matches_exact_solver() {
        // With one VM the key states are the full joint space, so the
        // oracle applies directly.
        let s = spec(2, 1, 1);
        let levels = DemandLevelSet::new(vec![0.1, 0.6, 1.0]).unwrap();
        let chain = DemandChain::from_rows(vec![
            vec![0.7, 0.2, 0.1],
            vec![0.3, 0.5, 0.2],
            vec![0.1, 0.4, 0.5],
        ])
        .unwrap();
        let f = feature(1, 0);
        let ks = build_key_states(0, &[f], &levels, &s).unwrap();
        let approx =
            per_vm_value_iteration(&ks, &chain, &s, &levels, 1e-12, 100_000, None).unwrap();
        assert!(approx.converged);
        let reference = SystemState::new(
            vec![f.expected_level_index],
            Placement::new(vec![f.location], &s).unwrap(),
            &levels,
            &s,
        )
        .unwrap();
        let exact = exact_mdp::value_iteration(
            &[chain.clone()],
            &s,
            &levels,
            &reference,
            1e-12,
            100_000,
        )
        .unwrap();
        assert!(exact.converged);
        assert!(libm::fabs(approx.beta - exact.beta) < 1e-6);
        let space = exact_mdp::JointSpace::new(&s, &levels, exact_mdp::DEFAULT_STATE_BUDGET)
            .unwrap();
        for r in 0..levels.count() {
            for y in 0..s.num_pms {
                let placement = Placement::new(vec![PmId(y)], &s).unwrap();
                let idx = space.pack(&[r], &placement);
                assert!(
                    libm::fabs(approx.value(r, y) - exact.values[idx]) < 1e-6,
                    "mismatch at ({r},{y})"
                );
            }
        }
    }

    #[test]
    fn converges_before_fifteenth_iteration() {
        // 1 VM, 1 PM, 5 levels at span tolerance 1e-3.
        let s = spec(1, 1, 1);
        let levels = DemandLevelSet::uniform(5, 1.0).unwrap();
        let chain = DemandChain::from_rows(vec![
            vec![0.51, 0.175, 0.14, 0.105, 0.07],
            vec![0.21, 0.475, 0.14, 0.105, 0.07],
            vec![0.21, 0.175, 0.44, 0.105, 0.07],
            vec![0.21, 0.175, 0.14, 0.405, 0.07],
            vec![0.21, 0.175, 0.14, 0.105, 0.37],
        ])
        .unwrap();
        let ks = build_key_states(0, &[feature(2, 0)], &levels, &s).unwrap();
        let res = per_vm_value_iteration(&ks, &chain, &s, &levels, 1e-3, 100, None).unwrap();
        assert!(res.converged);
        assert!(res.iterations < 15, "took {} iterations", res.iterations);
    }

    #[test]
    fn table_monotone_in_demand_level() {
        let s = spec(2, 1, 1);
        let levels = DemandLevelSet::new(vec![0.0, 0.3, 0.7, 1.0]).unwrap();
        let chain = DemandChain::from_rows(vec![
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.25, 0.5, 0.15, 0.1],
            vec![0.1, 0.15, 0.5, 0.25],
            vec![0.1, 0.1, 0.1, 0.7],
        ])
        .unwrap();
        let ks = build_key_states(0, &[feature(1, 0)], &levels, &s).unwrap();
        let res = per_vm_value_iteration(&ks, &chain, &s, &levels, 1e-10, 100_000, None).unwrap();
        assert!(res.converged);
        for y in 0..s.num_pms {
            for r in 1..levels.count() {
                assert!(
                    res.value(r, y) >= res.value(r - 1, y) - 1e-9,
                    "not monotone at (r={r}, y={y})"
                );
            }
        }
    }

    #[test]
    fn evaluation_count_is_polynomial() {
        let s = spec(3, 2, 1);
        let levels = DemandLevelSet::uniform(4, 1.0).unwrap();
        let chain = DemandChain::from_rows(vec![
            vec![0.4, 0.3, 0.2, 0.1],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.1, 0.1, 0.4, 0.4],
        ])
        .unwrap();
        let ks = build_key_states(0, &[feature(0, 0), feature(2, 1)], &levels, &s).unwrap();
        let res = per_vm_value_iteration(&ks, &chain, &s, &levels, 1e-8, 10_000, None).unwrap();
        // Exactly (Λ·|V_s|)·|V_s| evaluations per sweep.
        assert_eq!(res.evaluations, res.iterations * levels.count() * s.num_pms * s.num_pms);
    }

    fn toy_table(owner: usize, num_levels: usize, num_pms: usize, table: Vec<f64>) -> PerVMUtility {
        PerVMUtility {
            owner,
            num_levels,
            num_pms,
            table,
            beta: 0.0,
            converged: true,
            iterations: 1,
            diffs: vec![0.0],
            evaluations: 0,
        }
    }

    #[test]
    fn joint_utility_sums_per_vm_entries() {
        let s = spec(2, 3, 1);
        let levels = DemandLevelSet::uniform(2, 1.0).unwrap();
        let t0 = toy_table(0, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let t1 = toy_table(1, 2, 2, vec![10.0, 20.0, 30.0, 40.0]);
        let t2 = toy_table(2, 2, 2, vec![100.0, 200.0, 300.0, 400.0]);
        let state = SystemState::new(
            vec![0, 1, 0],
            Placement::new(vec![PmId(0), PmId(0), PmId(1)], &s).unwrap(),
            &levels,
            &s,
        )
        .unwrap();
        let tables = [t0, t1, t2];
        // Ṽ_0(r_0, s_0) + Ṽ_1(r_1, s_0) + Ṽ_2(r_0, s_1).
        assert_eq!(approximate_joint_utility(&tables, &state), 1.0 + 30.0 + 200.0);
        let w = WeightVector::from_tables(&tables).unwrap();
        assert_eq!(w.evaluate(&state), 231.0);
        assert_eq!(w.feature_indices(&state), vec![0, 4 + 2, 8 + 1]);
    }

    #[test]
    fn joint_utility_degenerate_cases() {
        let s = spec(2, 1, 1);
        let levels = DemandLevelSet::uniform(2, 1.0).unwrap();
        let zero = toy_table(0, 2, 2, vec![0.0; 4]);
        let state = SystemState::new(
            vec![1],
            Placement::new(vec![PmId(1)], &s).unwrap(),
            &levels,
            &s,
        )
        .unwrap();
        assert_eq!(approximate_joint_utility(&[zero], &state), 0.0);
        let single = toy_table(0, 2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(approximate_joint_utility(core::slice::from_ref(&single), &state), 8.0);
        assert_eq!(single.value(1, 1), 8.0);
    }

    #[test]
    fn bid_single_pm_forced_stay() {
        let s = spec(1, 1, 1);
        let levels = DemandLevelSet::uniform(2, 1.0).unwrap();
        let chain = DemandChain::from_rows(vec![vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        let table = toy_table(0, 2, 1, vec![0.0, 10.0]);
        let state =
            SystemState::new(vec![0], Placement::all_on_first(&s), &levels, &s).unwrap();
        let bid = control_utility(0, &state, &table, &chain, &s, &levels);
        assert_eq!(bid.best_target, PmId(0));
        assert_eq!(bid.gain, 0.0);
    }

    #[test]
    fn bid_symmetric_pms_tie_breaks_to_stay() {
        // Two PMs, no other VMs: a converged table is symmetric in the
        // location, so both actions have equal value and the VM stays.
        let s = spec(2, 1, 1);
        let levels = DemandLevelSet::new(vec![0.2, 0.8]).unwrap();
        let chain = DemandChain::from_rows(vec![vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let ks = build_key_states(0, &[feature(0, 1)], &levels, &s).unwrap();
        let table = per_vm_value_iteration(&ks, &chain, &s, &levels, 1e-10, 100_000, None)
            .unwrap();
        let state = SystemState::new(
            vec![1],
            Placement::new(vec![PmId(1)], &s).unwrap(),
            &levels,
            &s,
        )
        .unwrap();
        // Symmetry of the action values, not just of the decision.
        for r in 0..levels.count() {
            assert!(libm::fabs(table.value(r, 0) - table.value(r, 1)) < 1e-8);
        }
        let bid = control_utility(0, &state, &table, &chain, &s, &levels);
        assert_eq!(bid.best_target, PmId(1), "tie must keep the current location");
        assert!(libm::fabs(bid.gain) < 1e-8);
    }

    #[test]
    fn bid_prefers_strictly_cheaper_pm() {
        // Hand-built table where PM 1 has strictly lower future cost.
        let s = spec(2, 1, 1);
        let levels = DemandLevelSet::uniform(2, 1.0).unwrap();
        let chain = DemandChain::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let table = toy_table(0, 2, 2, vec![10.0, 1.0, 20.0, 2.0]);
        let state =
            SystemState::new(vec![0], Placement::all_on_first(&s), &levels, &s).unwrap();
        let bid = control_utility(0, &state, &table, &chain, &s, &levels);
        // stay = g + 0.5·10 + 0.5·20 = g+15; move = g + 0.5·1 + 0.5·2 = g+1.5.
        assert_eq!(bid.best_target, PmId(1));
        assert!(libm::fabs(bid.gain - 13.5) < 1e-12);
    }

    fn bid(vm: usize, gain: f64, target: usize) -> ControlBid {
        ControlBid { vm, control_utility: -gain, best_target: PmId(target), gain }
    }

    #[test]
    fn auction_all_zero_gains_is_identity() {
        let s = spec(2, 3, 2);
        let current =
            Placement::new(vec![PmId(0), PmId(0), PmId(1)], &s).unwrap();
        let bids = vec![bid(0, 0.0, 0), bid(1, 0.0, 0), bid(2, 0.0, 1)];
        let plan =
            select_migrations(&bids, &current, &s, MigrationRanking::GainDescending).unwrap();
        assert_eq!(plan.migrations(&current), 0);
        assert_eq!(plan.targets(), current.assignment());
    }

    #[test]
    fn auction_caps_at_largest_gains() {
        let s = spec(2, 3, 2);
        let current = Placement::new(vec![PmId(0), PmId(0), PmId(0)], &s).unwrap();
        let bids = vec![bid(0, 1.0, 1), bid(1, 5.0, 1), bid(2, 3.0, 1)];
        let plan =
            select_migrations(&bids, &current, &s, MigrationRanking::GainDescending).unwrap();
        assert_eq!(plan.migrations(&current), 2);
        assert_eq!(plan.target_of(1), PmId(1));
        assert_eq!(plan.target_of(2), PmId(1));
        assert_eq!(plan.target_of(0), PmId(0));
    }

    #[test]
    fn auction_equal_gains_lowest_vm_wins() {
        let s = spec(2, 2, 1);
        let current = Placement::new(vec![PmId(0), PmId(0)], &s).unwrap();
        let bids = vec![bid(0, 2.0, 1), bid(1, 2.0, 1)];
        let plan =
            select_migrations(&bids, &current, &s, MigrationRanking::GainDescending).unwrap();
        assert_eq!(plan.target_of(0), PmId(1));
        assert_eq!(plan.target_of(1), PmId(0));
    }

    fn run_step_fixture(mode: ControlMode) -> SlotOutcome {
        let s = spec(2, 2, 1);
        let levels = DemandLevelSet::new(vec![0.2, 0.7]).unwrap();
        let mut estimators = vec![
            SlidingWindowEstimator::new(2, 50).unwrap(),
            SlidingWindowEstimator::new(2, 50).unwrap(),
        ];
        for t in 0..20 {
            estimators[0].observe(t % 2).unwrap();
            estimators[1].observe(usize::from(t % 3 == 0)).unwrap();
        }
        let state = SystemState::new(
            vec![1, 0],
            Placement::new(vec![PmId(0), PmId(1)], &s).unwrap(),
            &levels,
            &s,
        )
        .unwrap();
        let options = MadvmOptions { mode, ..MadvmOptions::default() };
        madvm_step(&state, &estimators, &s, &levels, &options, None).unwrap()
    }

    #[test]
    fn distributed_equals_centralized() {
        let c = run_step_fixture(ControlMode::Centralized);
        let d = run_step_fixture(ControlMode::Distributed);
        assert_eq!(c.plan.targets(), d.plan.targets());
        assert_eq!(c.bids, d.bids);
        assert!(c.messages.is_empty());
        assert_eq!(d.messages.len(), 2);
        for (l, m) in d.messages.iter().enumerate() {
            assert_eq!(m.vm, l);
            assert_eq!(m.feature, d.features[l]);
        }
    }

    #[test]
    fn zero_cap_yields_identity_plan() {
        let s = spec(2, 2, 0);
        let levels = DemandLevelSet::new(vec![0.2, 0.7]).unwrap();
        let mut estimators = vec![
            SlidingWindowEstimator::new(2, 50).unwrap(),
            SlidingWindowEstimator::new(2, 50).unwrap(),
        ];
        for t in 0..10 {
            estimators[0].observe(t % 2).unwrap();
            estimators[1].observe((t + 1) % 2).unwrap();
        }
        let state = SystemState::new(
            vec![1, 1],
            Placement::new(vec![PmId(0), PmId(1)], &s).unwrap(),
            &levels,
            &s,
        )
        .unwrap();
        let out =
            madvm_step(&state, &estimators, &s, &levels, &MadvmOptions::default(), None)
                .unwrap();
        assert_eq!(out.plan.targets(), state.placement.assignment());
    }

    #[test]
    fn static_demands_reach_a_stable_plan() {
        // Constant low demands on 2 PMs: once consolidated, the plan must
        // stay the identity for 50 further slots.
        let s = spec(2, 2, 1);
        let levels = DemandLevelSet::new(vec![0.2, 0.9]).unwrap();
        let mut estimators = vec![
            SlidingWindowEstimator::new(2, 100).unwrap(),
            SlidingWindowEstimator::new(2, 100).unwrap(),
        ];
        let mut state = SystemState::new(
            vec![0, 0],
            Placement::new(vec![PmId(0), PmId(1)], &s).unwrap(),
            &levels,
            &s,
        )
        .unwrap();
        let options = MadvmOptions::default();
        let mut stable_slots = 0;
        for slot in 0..60 {
            for est in estimators.iter_mut() {
                est.observe(0).unwrap();
            }
            let out = madvm_step(&state, &estimators, &s, &levels, &options, None).unwrap();
            let moved = out.plan.migrations(&state.placement);
            state.placement = cluster::apply_migrations(&state, &out.plan, &s).unwrap();
            if slot >= 10 {
                assert_eq!(moved, 0, "migration after warm-up at slot {slot}");
                stable_slots += 1;
            }
        }
        assert_eq!(stable_slots, 50);
        // And the consolidated placement is the cheap one.
        assert_eq!(state.placement.pm_of(0), state.placement.pm_of(1));
    }

    #[test]
    fn block_iteration_fixed_point_is_converged_tables() {
        let s = spec(2, 2, 1);
        let levels = DemandLevelSet::new(vec![0.1, 0.6]).unwrap();
        let chains = vec![
            DemandChain::from_rows(vec![vec![0.8, 0.2], vec![0.4, 0.6]]).unwrap(),
            DemandChain::from_rows(vec![vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap(),
        ];
        let features = [feature(0, 0), feature(1, 1)];
        let mut tables = Vec::new();
        for l in 0..2 {
            let ks = build_key_states(l, &features, &levels, &s).unwrap();
            tables.push(
                per_vm_value_iteration(&ks, &chains[l], &s, &levels, 1e-13, 200_000, None)
                    .unwrap(),
            );
        }
        let w = WeightVector::from_tables(&tables).unwrap();
        let iter = BlockIteration::new(&features, &chains, &levels, &s).unwrap();
        let swept = iter.sweep(&w.weights).unwrap();
        for (a, b) in w.weights.iter().zip(&swept) {
            assert!(libm::fabs(a - b) < 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_bids(n: usize) -> impl Strategy<Value = Vec<(f64, usize)>> {
            proptest::collection::vec((0.0f64..10.0, 0usize..4), n)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]
            #[test]
            fn auction_never_exceeds_cap(
                raw in arb_bids(6),
                t_m in 0usize..4,
                ranking in 0u8..3,
            ) {
                let s = ClusterSpec { t_m, ..super::spec(4, 6, 0) };
                let current =
                    Placement::new(vec![PmId(0); 6], &s).unwrap();
                let bids: Vec<ControlBid> = raw
                    .iter()
                    .enumerate()
                    .map(|(vm, &(gain, target))| ControlBid {
                        vm,
                        control_utility: -gain,
                        best_target: PmId(target),
                        gain: if target == 0 { 0.0 } else { gain },
                    })
                    .collect();
                let ranking = match ranking {
                    0 => MigrationRanking::GainDescending,
                    1 => MigrationRanking::UtilityAscending,
                    _ => MigrationRanking::UtilityDescending,
                };
                let plan = select_migrations(&bids, &current, &s, ranking).unwrap();
                prop_assert!(plan.migrations(&current) <= t_m);
                // A zero-gain VM never moves.
                for b in &bids {
                    if b.gain <= 0.0 {
                        prop_assert_eq!(plan.target_of(b.vm), current.pm_of(b.vm));
                    }
                }
            }
        }
    }
}
