use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use madvm_core::demand::{synthesize_trace, DemandChain, DemandLevelSet, DemandTrace, RegimeSwitch};
use rand_core::{RngCore, SeedableRng};

use crate::config::{RandomChainsConfig, SynthesisConfig};
use crate::{Result, SimError};

/// Reads a `vm_id,slot,cpu` CSV into a rectangular trace. Every (vm, slot)
/// cell must be present exactly once; ids must be dense from 0.
pub fn load_trace(path: &Path) -> Result<DemandTrace> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| SimError::Input(format!("cannot open {}: {e}", path.display())))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| SimError::Input(format!("{}: {e}", path.display())))?;
        if headers.iter().collect::<Vec<_>>() != ["vm_id", "slot", "cpu"] {
            return Err(SimError::Input(format!(
                "{}: expected header vm_id,slot,cpu",
                path.display()
            )));
        }
    }
    let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
    let mut max_vm = 0usize;
    let mut max_slot = 0usize;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let record = record.map_err(|e| SimError::Input(format!("row {line}: {e}")))?;
        if record.len() != 3 {
            return Err(SimError::Input(format!("row {line}: expected 3 fields")));
        }
        let vm: usize = record[0]
            .parse()
            .map_err(|_| SimError::Input(format!("row {line}: bad vm_id {:?}", &record[0])))?;
        let slot: usize = record[1]
            .parse()
            .map_err(|_| SimError::Input(format!("row {line}: bad slot {:?}", &record[1])))?;
        let cpu: f64 = record[2]
            .parse()
            .map_err(|_| SimError::Input(format!("row {line}: bad cpu {:?}", &record[2])))?;
        if !(cpu >= 0.0) || !cpu.is_finite() {
            return Err(SimError::Input(format!("row {line}: cpu must be finite and >= 0")));
        }
        if cells.insert((vm, slot), cpu).is_some() {
            return Err(SimError::Input(format!("row {line}: duplicate cell (vm {vm}, slot {slot})")));
        }
        max_vm = max_vm.max(vm);
        max_slot = max_slot.max(slot);
    }
    if cells.is_empty() {
        return Err(SimError::Input(format!("{}: trace has no rows", path.display())));
    }
    let num_vms = max_vm + 1;
    let num_slots = max_slot + 1;
    let mut demands = Vec::with_capacity(num_vms * num_slots);
    for slot in 0..num_slots {
        for vm in 0..num_vms {
            match cells.get(&(vm, slot)) {
                Some(&cpu) => demands.push(cpu),
                None => {
                    return Err(SimError::Input(format!(
                        "missing cell for vm {vm} at slot {slot}"
                    )))
                }
            }
        }
    }
    Ok(DemandTrace::new(num_vms, num_slots, demands)?)
}

/// Writes a trace as `vm_id,slot,cpu`, rows sorted by (slot, vm_id), six
/// decimals per demand.
pub fn write_trace(trace: &DemandTrace, mut out: impl Write) -> Result<()> {
    let io_err = |e: std::io::Error| SimError::Input(format!("cannot write trace: {e}"));
    writeln!(out, "vm_id,slot,cpu").map_err(io_err)?;
    for slot in 0..trace.num_slots() {
        for vm in 0..trace.num_vms() {
            writeln!(out, "{vm},{slot},{:.6}", trace.demand(vm, slot)).map_err(io_err)?;
        }
    }
    Ok(())
}

fn uniform_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Seeded per-VM chain generation: each row is a floored random
/// distribution, optionally mixed with a self-loop of weight `stickiness`.
pub fn random_chains(
    num_vms: usize,
    num_levels: usize,
    params: &RandomChainsConfig,
    seed: u64,
) -> Result<Vec<DemandChain>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut chains = Vec::with_capacity(num_vms);
    for _ in 0..num_vms {
        let mut rows = Vec::with_capacity(num_levels);
        for i in 0..num_levels {
            let mut row: Vec<f64> =
                (0..num_levels).map(|_| params.min_entry + uniform_f64(&mut rng)).collect();
            let sum: f64 = row.iter().sum();
            for (j, p) in row.iter_mut().enumerate() {
                *p = (1.0 - params.stickiness) * (*p / sum)
                    + if j == i { params.stickiness } else { 0.0 };
            }
            rows.push(row);
        }
        chains.push(DemandChain::from_rows(rows)?);
    }
    Ok(chains)
}

fn parse_chain_set(raw: &[Vec<Vec<f64>>]) -> Result<Vec<DemandChain>> {
    raw.iter().map(|rows| Ok(DemandChain::from_rows(rows.clone())?)).collect()
}

/// A trace plus the ground-truth chains when they are known (synthesis);
/// file-based traces carry no ground truth.
pub struct BuiltTrace {
    pub trace: DemandTrace,
    pub ground_truth: Option<Vec<DemandChain>>,
}

pub fn synthesize(
    syn: &SynthesisConfig,
    num_vms: usize,
    levels: &DemandLevelSet,
    seed: u64,
) -> Result<BuiltTrace> {
    let chains = match &syn.chains {
        Some(raw) => {
            if raw.len() != num_vms {
                return Err(SimError::Input(format!(
                    "expected {num_vms} chains, got {}",
                    raw.len()
                )));
            }
            parse_chain_set(raw)?
        }
        None => random_chains(
            num_vms,
            levels.count(),
            &syn.random.unwrap_or_default(),
            seed,
        )?,
    };
    let start_levels = match &syn.start_levels {
        Some(v) => v.clone(),
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5851f42d4c957f2d);
            (0..num_vms)
                .map(|_| (uniform_f64(&mut rng) * levels.count() as f64) as usize)
                .map(|l| l.min(levels.count() - 1))
                .collect()
        }
    };
    let mut schedule = Vec::with_capacity(syn.regime_switches.len());
    for sw in &syn.regime_switches {
        schedule.push(RegimeSwitch { slot: sw.slot, chains: parse_chain_set(&sw.chains)? });
    }
    let trace =
        synthesize_trace(&chains, &schedule, levels, &start_levels, syn.num_slots, seed)?;
    Ok(BuiltTrace { trace, ground_truth: Some(chains) })
}
