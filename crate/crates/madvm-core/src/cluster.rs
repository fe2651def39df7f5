//! Data-center state: placements, the linear server power model,
//! resource shortage and the per-slot migration cap.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::demand::DemandLevelSet;
use crate::error::{Error, Result};

/// Identifier of a physical machine, `0..num_pms`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct PmId(pub usize);

impl core::fmt::Display for PmId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Static cluster parameters: sizes, capacity, power constants, the
/// per-slot migration cap `T_m` and the shortage weight λ.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClusterSpec {
    pub num_pms: usize,
    pub num_vms: usize,
    /// CPU capacity of one PM; demands are fractions of this.
    pub capacity: f64,
    pub p_idle: f64,
    pub p_max: f64,
    pub p_sleep: f64,
    /// Max number of migrated VMs per slot.
    pub t_m: usize,
    /// Weight of resource shortage in the instantaneous cost.
    pub lambda_weight: f64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_pms == 0 || self.num_vms == 0 {
            return Err(Error::Input("need at least one PM and one VM".into()));
        }
        if !(self.p_sleep < self.p_idle && self.p_idle < self.p_max) {
            return Err(Error::Input(format!(
                "power model requires p_sleep < p_idle < p_max, got ({}, {}, {})",
                self.p_sleep, self.p_idle, self.p_max
            )));
        }
        if !(self.capacity > 0.0) {
            return Err(Error::Input("capacity must be positive".into()));
        }
        if !(self.lambda_weight >= 0.0) {
            return Err(Error::Input("lambda_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Where every VM currently runs: entry `l` hosts VM `m_l`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct Placement {
    assignment: Vec<PmId>,
}

impl Placement {
    pub fn new(assignment: Vec<PmId>, spec: &ClusterSpec) -> Result<Self> {
        if assignment.len() != spec.num_vms {
            return Err(Error::Input("placement must cover every VM".into()));
        }
        if assignment.iter().any(|pm| pm.0 >= spec.num_pms) {
            return Err(Error::Input("placement references an unknown PM".into()));
        }
        Ok(Self { assignment })
    }

    /// All VMs on PM `s_0`.
    pub fn all_on_first(spec: &ClusterSpec) -> Self {
        Self { assignment: vec![PmId(0); spec.num_vms] }
    }

    pub fn pm_of(&self, vm: usize) -> PmId {
        self.assignment[vm]
    }

    pub fn assignment(&self) -> &[PmId] {
        &self.assignment
    }

    pub fn num_vms(&self) -> usize {
        self.assignment.len()
    }
}

/// Joint demand levels and placement: `S(t) = [R(t), Y(t)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub demand_levels: Vec<usize>,
    pub placement: Placement,
}

impl SystemState {
    pub fn new(
        demand_levels: Vec<usize>,
        placement: Placement,
        levels: &DemandLevelSet,
        spec: &ClusterSpec,
    ) -> Result<Self> {
        if demand_levels.len() != spec.num_vms || placement.num_vms() != spec.num_vms {
            return Err(Error::Input("state must cover every VM".into()));
        }
        if demand_levels.iter().any(|&l| l >= levels.count()) {
            return Err(Error::Input("demand level index out of range".into()));
        }
        Ok(Self { demand_levels, placement })
    }
}

/// Per-slot migration action: entry `l` is the target PM of VM `m_l`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct MigrationPlan {
    targets: Vec<PmId>,
}

impl MigrationPlan {
    pub fn new(targets: Vec<PmId>) -> Self {
        Self { targets }
    }

    /// The stay-put plan.
    pub fn identity(placement: &Placement) -> Self {
        Self { targets: placement.assignment().to_vec() }
    }

    pub fn targets(&self) -> &[PmId] {
        &self.targets
    }

    pub fn target_of(&self, vm: usize) -> PmId {
        self.targets[vm]
    }

    /// Number of VMs whose target differs from their current location.
    pub fn migrations(&self, current: &Placement) -> usize {
        self.targets
            .iter()
            .zip(current.assignment())
            .filter(|(t, c)| t != c)
            .count()
    }
}

/// Per-PM utilization: sum of hosted demand values over `T_r`.
pub fn pm_loads(state: &SystemState, levels: &DemandLevelSet, spec: &ClusterSpec) -> Vec<f64> {
    let mut loads = vec![0.0; spec.num_pms];
    for (vm, &lvl) in state.demand_levels.iter().enumerate() {
        loads[state.placement.pm_of(vm).0] += levels.value(lvl) / spec.capacity;
    }
    loads
}

fn host_counts(placement: &Placement, spec: &ClusterSpec) -> Vec<usize> {
    let mut hosts = vec![0usize; spec.num_pms];
    for pm in placement.assignment() {
        hosts[pm.0] += 1;
    }
    hosts
}

/// Linear power model with the `min{., 1}` clamp; a PM hosting no VM sleeps.
pub fn server_power(load_fraction: f64, spec: &ClusterSpec, hosts_any_vm: bool) -> f64 {
    if !hosts_any_vm {
        return spec.p_sleep;
    }
    spec.p_idle + (spec.p_max - spec.p_idle) * load_fraction.min(1.0)
}

/// `P_total(t)`: sum of per-server power over all PMs.
pub fn total_power(state: &SystemState, levels: &DemandLevelSet, spec: &ClusterSpec) -> f64 {
    let loads = pm_loads(state, levels, spec);
    let hosts = host_counts(&state.placement, spec);
    loads
        .iter()
        .zip(&hosts)
        .map(|(&load, &n)| server_power(load, spec, n > 0))
        .sum()
}

/// Per-PM shortage `θ_i = max(load_i - 1, 0)` in capacity fractions.
pub fn shortage_vector(
    state: &SystemState,
    levels: &DemandLevelSet,
    spec: &ClusterSpec,
) -> Vec<f64> {
    pm_loads(state, levels, spec)
        .into_iter()
        .map(|load| (load - 1.0).max(0.0))
        .collect()
}

/// Instantaneous cost `g = P_total + (λ / |V_m|) Σ_i θ_i`.
pub fn instantaneous_cost(
    state: &SystemState,
    levels: &DemandLevelSet,
    spec: &ClusterSpec,
) -> f64 {
    let shortage: f64 = shortage_vector(state, levels, spec).iter().sum();
    total_power(state, levels, spec) + spec.lambda_weight / spec.num_vms as f64 * shortage
}

/// The placement in force next slot; the current slot's cost is always
/// accrued on the pre-migration placement.
pub fn apply_migrations(
    state: &SystemState,
    plan: &MigrationPlan,
    spec: &ClusterSpec,
) -> Result<Placement> {
    let moved = plan.migrations(&state.placement);
    if moved > spec.t_m {
        return Err(Error::MigrationCap { moved, cap: spec.t_m });
    }
    Placement::new(plan.targets().to_vec(), spec)
}
