//! Exact average-cost solver for the joint MDP by relative value
//! iteration. Only viable at oracle scale; guarded by a state budget.

use alloc::vec;
use alloc::vec::Vec;

use crate::cluster::{ClusterSpec, MigrationPlan, Placement, PmId, SystemState};
use crate::demand::{DemandChain, DemandLevelSet};
use crate::error::{Error, Result};
use crate::cluster;

/// Refuse to build joint spaces larger than this.
pub const DEFAULT_STATE_BUDGET: u128 = 100_000;

/// Bijective packing of `(demand levels, placement)` into `0..N_S` with
/// `N_S = (Λ |V_s|)^{|V_m|}`; VM 0 is the least significant digit and each
/// digit is `level * |V_s| + pm`.
#[derive(Debug, Clone)]
pub struct JointSpace {
    num_vms: usize,
    num_pms: usize,
    num_levels: usize,
    num_states: usize,
}

impl JointSpace {
    pub fn new(spec: &ClusterSpec, levels: &DemandLevelSet, budget: u128) -> Result<Self> {
        spec.validate()?;
        let base = (levels.count() * spec.num_pms) as u128;
        let mut states: u128 = 1;
        for _ in 0..spec.num_vms {
            states = states.saturating_mul(base);
            if states > budget {
                return Err(Error::BudgetExceeded { states, budget });
            }
        }
        Ok(Self {
            num_vms: spec.num_vms,
            num_pms: spec.num_pms,
            num_levels: levels.count(),
            num_states: states as usize,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn pack(&self, demand_levels: &[usize], placement: &Placement) -> usize {
        let base = self.num_levels * self.num_pms;
        let mut idx = 0;
        for l in (0..self.num_vms).rev() {
            idx = idx * base + demand_levels[l] * self.num_pms + placement.pm_of(l).0;
        }
        idx
    }

    pub fn unpack(&self, mut index: usize, spec: &ClusterSpec) -> SystemState {
        let base = self.num_levels * self.num_pms;
        let mut demand_levels = vec![0usize; self.num_vms];
        let mut pms = vec![PmId(0); self.num_vms];
        for l in 0..self.num_vms {
            let digit = index % base;
            index /= base;
            demand_levels[l] = digit / self.num_pms;
            pms[l] = PmId(digit % self.num_pms);
        }
        let placement = Placement::new(pms, spec).expect("unpack produces valid placement");
        SystemState { demand_levels, placement }
    }
}

/// `Pr[to | from, plan]`: the product of per-VM demand transitions when
/// `to`'s placement equals the plan's targets, zero otherwise.
pub fn joint_transition_prob(
    from: &SystemState,
    to: &SystemState,
    plan: &MigrationPlan,
    chains: &[DemandChain],
    spec: &ClusterSpec,
) -> Result<f64> {
    let moved = plan.migrations(&from.placement);
    if moved > spec.t_m {
        return Err(Error::MigrationCap { moved, cap: spec.t_m });
    }
    if to.placement.assignment() != plan.targets() {
        return Ok(0.0);
    }
    let mut prob = 1.0;
    for (l, chain) in chains.iter().enumerate() {
        prob *= chain.prob(from.demand_levels[l], to.demand_levels[l]);
    }
    Ok(prob)
}

/// Every feasible target vector from `placement` under the `T_m` cap, in
/// lexicographic order.
pub fn enumerate_feasible_plans(placement: &Placement, spec: &ClusterSpec) -> Vec<MigrationPlan> {
    let mut plans = Vec::new();
    let mut targets = vec![PmId(0); spec.num_vms];
    fn recurse(
        vm: usize,
        moves_left: usize,
        placement: &Placement,
        spec: &ClusterSpec,
        targets: &mut Vec<PmId>,
        out: &mut Vec<MigrationPlan>,
    ) {
        if vm == spec.num_vms {
            out.push(MigrationPlan::new(targets.clone()));
            return;
        }
        let current = placement.pm_of(vm);
        for pm in 0..spec.num_pms {
            let target = PmId(pm);
            let cost = usize::from(target != current);
            if cost > moves_left {
                continue;
            }
            targets[vm] = target;
            recurse(vm + 1, moves_left - cost, placement, spec, targets, out);
        }
    }
    recurse(0, spec.t_m, placement, spec, &mut targets, &mut plans);
    plans
}

/// Relative utilities over the joint space: `values[reference] = 0` and
/// `beta` is the average-cost estimate at convergence.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UtilityVector {
    pub values: Vec<f64>,
    pub reference_state: usize,
    pub beta: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Span of successive differences per sweep.
    pub span_history: Vec<f64>,
}

/// A deterministic stationary policy: one feasible plan per joint state.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Policy {
    pub plans: Vec<MigrationPlan>,
}

impl Policy {
    pub fn plan(&self, state_index: usize) -> &MigrationPlan {
        &self.plans[state_index]
    }
}

struct Instance<'a> {
    space: JointSpace,
    chains: &'a [DemandChain],
    spec: &'a ClusterSpec,
    /// Instantaneous cost per packed state.
    costs: Vec<f64>,
    /// Cached demand-level digits per packed state, VM-major.
    demand_digits: Vec<usize>,
    /// Feasible plans keyed by packed placement code (base |V_s|).
    plans_by_placement: Vec<Vec<PlanEntry>>,
    /// Packed placement code per state.
    placement_codes: Vec<usize>,
}

struct PlanEntry {
    plan: MigrationPlan,
    /// Contribution of the target placement to successor indices.
    placement_offset: usize,
}

impl<'a> Instance<'a> {
    fn build(
        chains: &'a [DemandChain],
        spec: &'a ClusterSpec,
        levels: &DemandLevelSet,
    ) -> Result<Self> {
        if chains.len() != spec.num_vms {
            return Err(Error::Input("one demand chain per VM required".into()));
        }
        if chains.iter().any(|c| c.num_levels() != levels.count()) {
            return Err(Error::Input("chain dimension must match the level set".into()));
        }
        let space = JointSpace::new(spec, levels, DEFAULT_STATE_BUDGET)?;
        let n = space.num_states();
        let mut costs = Vec::with_capacity(n);
        let mut demand_digits = Vec::with_capacity(n * spec.num_vms);
        let mut placement_codes = Vec::with_capacity(n);
        let num_placements = spec.num_pms.pow(spec.num_vms as u32);
        let mut plans_by_placement: Vec<Vec<PlanEntry>> = Vec::with_capacity(num_placements);
        for code in 0..num_placements {
            let placement = placement_from_code(code, spec);
            let entries = enumerate_feasible_plans(&placement, spec)
                .into_iter()
                .map(|plan| {
                    let placement_offset = placement_offset(&plan, &space);
                    PlanEntry { plan, placement_offset }
                })
                .collect();
            plans_by_placement.push(entries);
        }
        for idx in 0..n {
            let state = space.unpack(idx, spec);
            costs.push(cluster::instantaneous_cost(&state, levels, spec));
            demand_digits.extend_from_slice(&state.demand_levels);
            placement_codes.push(placement_code(&state.placement, spec));
        }
        Ok(Self { space, chains, spec, costs, demand_digits, plans_by_placement, placement_codes })
    }

    fn demand_of(&self, state: usize) -> &[usize] {
        &self.demand_digits[state * self.spec.num_vms..(state + 1) * self.spec.num_vms]
    }

    /// `Σ_j Pr[S_j | S_i, plan] v(S_j)` for one state/plan pair.
    fn expected_value(&self, state: usize, entry: &PlanEntry, v: &[f64]) -> f64 {
        let num_vms = self.spec.num_vms;
        let lambda = self.chains[0].num_levels();
        let from = self.demand_of(state);
        let base = lambda * self.spec.num_pms;
        // Odometer over successor demand vectors.
        let mut next = vec![0usize; num_vms];
        let mut acc = 0.0;
        loop {
            let mut prob = 1.0;
            let mut idx = entry.placement_offset;
            let mut stride = 1;
            for l in 0..num_vms {
                prob *= self.chains[l].prob(from[l], next[l]);
                idx += next[l] * self.spec.num_pms * stride;
                stride *= base;
            }
            if prob != 0.0 {
                acc += prob * v[idx];
            }
            // Advance the odometer.
            let mut l = 0;
            loop {
                if l == num_vms {
                    return acc;
                }
                next[l] += 1;
                if next[l] < lambda {
                    break;
                }
                next[l] = 0;
                l += 1;
            }
        }
    }

    fn plans_of(&self, state: usize) -> &[PlanEntry] {
        &self.plans_by_placement[self.placement_codes[state]]
    }
}

fn placement_code(placement: &Placement, spec: &ClusterSpec) -> usize {
    let mut code = 0;
    for l in (0..spec.num_vms).rev() {
        code = code * spec.num_pms + placement.pm_of(l).0;
    }
    code
}

fn placement_from_code(mut code: usize, spec: &ClusterSpec) -> Placement {
    let mut pms = Vec::with_capacity(spec.num_vms);
    for _ in 0..spec.num_vms {
        pms.push(PmId(code % spec.num_pms));
        code /= spec.num_pms;
    }
    Placement::new(pms, spec).expect("codes enumerate valid placements")
}

fn placement_offset(plan: &MigrationPlan, space: &JointSpace) -> usize {
    let base = space.num_levels * space.num_pms;
    let mut offset = 0;
    for l in (0..space.num_vms).rev() {
        offset = offset * base + plan.target_of(l).0;
    }
    offset
}

/// Relative value iteration (span-seminorm stopping rule) over the full
/// joint space. Refuses instances beyond [`DEFAULT_STATE_BUDGET`].
pub fn value_iteration(
    chains: &[DemandChain],
    spec: &ClusterSpec,
    levels: &DemandLevelSet,
    reference: &SystemState,
    tol: f64,
    max_iter: usize,
) -> Result<UtilityVector> {
    let inst = Instance::build(chains, spec, levels)?;
    let n = inst.space.num_states();
    let reference_state = inst.space.pack(&reference.demand_levels, &reference.placement);
    let mut v = vec![0.0; n];
    let mut raw = vec![0.0; n];
    let mut span_history = Vec::new();
    let mut beta = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    for sweep in 1..=max_iter {
        iterations = sweep;
        for i in 0..n {
            let mut best = f64::INFINITY;
            for entry in inst.plans_of(i) {
                let value = inst.costs[i] + inst.expected_value(i, entry, &v);
                if value < best {
                    best = value;
                }
            }
            raw[i] = best;
        }
        beta = raw[reference_state];
        let mut span_lo = f64::INFINITY;
        let mut span_hi = f64::NEG_INFINITY;
        for i in 0..n {
            let diff = raw[i] - v[i];
            span_lo = span_lo.min(diff);
            span_hi = span_hi.max(diff);
            v[i] = raw[i] - beta;
        }
        let span = span_hi - span_lo;
        span_history.push(span);
        if span <= tol {
            converged = true;
            break;
        }
    }
    v[reference_state] = 0.0;
    Ok(UtilityVector { values: v, reference_state, beta, converged, iterations, span_history })
}

/// Greedy policy w.r.t. converged utilities; ties resolve to the
/// lexicographically smallest target vector.
pub fn extract_policy(
    utility: &UtilityVector,
    chains: &[DemandChain],
    spec: &ClusterSpec,
    levels: &DemandLevelSet,
) -> Result<Policy> {
    let inst = Instance::build(chains, spec, levels)?;
    let n = inst.space.num_states();
    if utility.values.len() != n {
        return Err(Error::Input("utility vector does not match the joint space".into()));
    }
    let mut plans = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = f64::INFINITY;
        let mut best_plan = None;
        for entry in inst.plans_of(i) {
            let value = inst.costs[i] + inst.expected_value(i, entry, &utility.values);
            // Plans are enumerated in lexicographic order; strict
            // improvement keeps the first minimizer.
            if value < best {
                best = value;
                best_plan = Some(entry.plan.clone());
            }
        }
        plans.push(best_plan.expect("at least the identity plan exists"));
    }
    Ok(Policy { plans })
}

/// Long-run average cost of a fixed policy from `start`, computed on the
/// induced joint chain by damped power iteration (independent of the
/// Bellman machinery above only in the sense of evaluation, not as a test
/// oracle — the brute-force oracle lives in the test kit).
pub fn policy_average_cost(
    policy: &Policy,
    chains: &[DemandChain],
    spec: &ClusterSpec,
    levels: &DemandLevelSet,
    start: &SystemState,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let inst = Instance::build(chains, spec, levels)?;
    let n = inst.space.num_states();
    if policy.plans.len() != n {
        return Err(Error::Input("policy does not match the joint space".into()));
    }
    let space = &inst.space;
    let lambda = levels.count();
    let base = lambda * spec.num_pms;
    // Successor lists under the policy.
    let mut succ: Vec<(usize, f64)> = Vec::new();
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for i in 0..n {
        let entry = PlanEntry {
            placement_offset: placement_offset(&policy.plans[i], space),
            plan: policy.plans[i].clone(),
        };
        let moved = policy.plans[i].migrations(&space.unpack(i, spec).placement);
        if moved > spec.t_m {
            return Err(Error::MigrationCap { moved, cap: spec.t_m });
        }
        let from = inst.demand_of(i).to_vec();
        let mut next = vec![0usize; spec.num_vms];
        loop {
            let mut prob = 1.0;
            let mut idx = entry.placement_offset;
            let mut stride = 1;
            for l in 0..spec.num_vms {
                prob *= chains[l].prob(from[l], next[l]);
                idx += next[l] * spec.num_pms * stride;
                stride *= base;
            }
            if prob > 0.0 {
                succ.push((idx, prob));
            }
            let mut l = 0;
            let mut done = false;
            loop {
                if l == spec.num_vms {
                    done = true;
                    break;
                }
                next[l] += 1;
                if next[l] < lambda {
                    break;
                }
                next[l] = 0;
                l += 1;
            }
            if done {
                break;
            }
        }
        offsets.push(succ.len());
    }
    let start_idx = space.pack(&start.demand_levels, &start.placement);
    let mut pi = vec![0.0; n];
    pi[start_idx] = 1.0;
    let mut next_pi = vec![0.0; n];
    for _ in 0..max_iter {
        next_pi.fill(0.0);
        for i in 0..n {
            let p = pi[i];
            if p == 0.0 {
                continue;
            }
            // Lazy chain: half stays put, killing periodicity.
            next_pi[i] += 0.5 * p;
            for &(j, q) in &succ[offsets[i]..offsets[i + 1]] {
                next_pi[j] += 0.5 * p * q;
            }
        }
        let delta = pi
            .iter()
            .zip(&next_pi)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max);
        core::mem::swap(&mut pi, &mut next_pi);
        if delta <= tol {
            break;
        }
    }
    Ok(pi.iter().zip(&inst.costs).map(|(p, g)| p * g).sum())
}
