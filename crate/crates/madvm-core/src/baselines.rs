//! Comparison controllers: a static first-fit placer, a shortage-averse
//! predictive scaler, and a periodic pattern consolidator. All are
//! deterministic and honor the per-slot migration cap.

use alloc::vec;
use alloc::vec::Vec;

use crate::cluster::{ClusterSpec, MigrationPlan, Placement, PmId, SystemState};
use crate::error::{Error, Result};

/// Prediction window of the scaler, in slots (3 hours at 10-minute slots).
pub const DEFAULT_PREDICTION_WINDOW: usize = 18;

/// Re-pack period of the consolidator, in slots (1 day at 10-minute slots).
pub const DEFAULT_REPACK_PERIOD: usize = 144;

/// First-fit by VM id on expected demands: lowest-id PM that stays within
/// capacity, else the least-loaded PM (ties to the lowest id).
pub fn static_first_fit(expected_demands: &[f64], spec: &ClusterSpec) -> Result<Placement> {
    if expected_demands.len() != spec.num_vms {
        return Err(Error::Input("one expected demand per VM required".into()));
    }
    let mut loads = vec![0.0f64; spec.num_pms];
    let mut assignment = Vec::with_capacity(spec.num_vms);
    for &demand in expected_demands {
        let fit = (0..spec.num_pms).find(|&pm| loads[pm] + demand <= spec.capacity);
        let pm = fit.unwrap_or_else(|| {
            let mut best = 0;
            for i in 1..spec.num_pms {
                if loads[i] < loads[best] {
                    best = i;
                }
            }
            best
        });
        loads[pm] += demand;
        assignment.push(PmId(pm));
    }
    Placement::new(assignment, spec)
}

/// Window-maximum prediction per VM over the last `window` slots of its
/// history (falling back to whatever is available).
fn window_max(history: &[f64], window: usize) -> f64 {
    let start = history.len().saturating_sub(window);
    history[start..].iter().copied().fold(0.0, f64::max)
}

fn window_mean(history: &[f64], window: usize) -> f64 {
    let start = history.len().saturating_sub(window);
    let tail = &history[start..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Moves VMs off PMs whose demand exceeds capacity: per overloaded PM (in
/// id order), its largest-demand VM goes to the first PM with headroom.
/// Returns the plan; never consolidates underloaded PMs.
fn relieve_overloads(
    placement: &Placement,
    demands: &[f64],
    spec: &ClusterSpec,
) -> MigrationPlan {
    let mut targets = placement.assignment().to_vec();
    let mut loads = vec![0.0f64; spec.num_pms];
    for (vm, &d) in demands.iter().enumerate() {
        loads[targets[vm].0] += d;
    }
    let mut moved = 0;
    for pm in 0..spec.num_pms {
        if moved == spec.t_m {
            break;
        }
        if loads[pm] <= spec.capacity {
            continue;
        }
        // Largest-demand VM on this PM; ties to the lowest id.
        let mut victim = None;
        for vm in 0..spec.num_vms {
            if targets[vm].0 != pm {
                continue;
            }
            match victim {
                Some(best) if demands[vm] <= demands[best] => {}
                _ => victim = Some(vm),
            }
        }
        let Some(victim) = victim else { continue };
        let dest = (0..spec.num_pms)
            .find(|&q| q != pm && loads[q] + demands[victim] <= spec.capacity);
        if let Some(dest) = dest {
            loads[pm] -= demands[victim];
            loads[dest] += demands[victim];
            targets[victim] = PmId(dest);
            moved += 1;
        }
    }
    MigrationPlan::new(targets)
}

/// Shortage-averse scaler: predicts each VM's next demand as the window
/// maximum and relieves any PM whose predicted load exceeds capacity.
pub fn predictive_scaler_step(
    state: &SystemState,
    history: &[Vec<f64>],
    spec: &ClusterSpec,
    window: usize,
) -> Result<MigrationPlan> {
    if history.len() != spec.num_vms {
        return Err(Error::Input("one demand history per VM required".into()));
    }
    if history.iter().any(|h| h.is_empty()) {
        return Err(Error::Input("demand history must cover at least one slot".into()));
    }
    let predicted: Vec<f64> = history.iter().map(|h| window_max(h, window)).collect();
    Ok(relieve_overloads(&state.placement, &predicted, spec))
}

/// Periodic consolidator: every `period` slots re-packs first-fit on
/// windowed mean demands and emits up to `T_m` moves toward that packing,
/// largest mean demand first. Between re-packs it only relieves observed
/// overloads.
pub fn pattern_consolidator_step(
    state: &SystemState,
    history: &[Vec<f64>],
    spec: &ClusterSpec,
    period: usize,
    slot: usize,
) -> Result<MigrationPlan> {
    if history.len() != spec.num_vms {
        return Err(Error::Input("one demand history per VM required".into()));
    }
    if history.iter().any(|h| h.is_empty()) {
        return Err(Error::Input("demand history must cover at least one slot".into()));
    }
    if period == 0 {
        return Err(Error::Input("re-pack period must be positive".into()));
    }
    if slot > 0 && slot % period == 0 {
        let means: Vec<f64> = history.iter().map(|h| window_mean(h, period)).collect();
        let target = static_first_fit(&means, spec)?;
        let mut mismatched: Vec<usize> = (0..spec.num_vms)
            .filter(|&vm| state.placement.pm_of(vm) != target.pm_of(vm))
            .collect();
        mismatched.sort_by(|&a, &b| {
            means[b]
                .partial_cmp(&means[a])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut targets = state.placement.assignment().to_vec();
        for &vm in mismatched.iter().take(spec.t_m) {
            targets[vm] = target.pm_of(vm);
        }
        return Ok(MigrationPlan::new(targets));
    }
    let observed: Vec<f64> = history.iter().map(|h| *h.last().expect("non-empty")).collect();
    Ok(relieve_overloads(&state.placement, &observed, spec))
}
