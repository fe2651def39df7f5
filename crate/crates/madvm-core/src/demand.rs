//! Per-VM CPU-demand Markov chains: quantization, sliding-window MLE,
//! stationary distributions, feature states and synthetic traces.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::{RngCore, SeedableRng};

use crate::cluster::PmId;
use crate::error::{Error, Result};

/// Row-sum slack tolerated on stochastic matrices.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Default tolerance for [`stationary_distribution`].
pub const DEFAULT_STATIONARY_TOL: f64 = 1e-9;

/// Default iteration cap for [`stationary_distribution`].
pub fn default_stationary_max_iter(num_levels: usize) -> usize {
    10 * num_levels * 1000
}

/// The ordered quantization levels `r_0 < r_1 < ... < r_{Λ-1}`, each a CPU
/// demand expressed as a fraction of one PM's capacity.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DemandLevelSet {
    values: Vec<f64>,
}

impl DemandLevelSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Input(format!(
                "need at least 2 demand levels, got {}",
                values.len()
            )));
        }
        if values[0] < 0.0 {
            return Err(Error::Input(format!("levels must be >= 0, got r_0 = {}", values[0])));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("levels must be strictly increasing".into()));
        }
        Ok(Self { values })
    }

    /// Uniformly spaced levels `r_k = k / (Λ-1) * cap_multiple`.
    pub fn uniform(num_levels: usize, cap_multiple: f64) -> Result<Self> {
        if num_levels < 2 {
            return Err(Error::Input("need at least 2 demand levels".into()));
        }
        let values = (0..num_levels)
            .map(|k| k as f64 / (num_levels - 1) as f64 * cap_multiple)
            .collect();
        Self::new(values)
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Tolerance subtracted from a stationary expectation before quantizing it
/// into a feature level.
pub const FEATURE_QUANTIZE_SLACK: f64 = 1e-6;

/// Round-up quantization: the smallest level index `k` with `r_k >= raw`,
/// saturating at the top level.
pub fn quantize(raw: f64, levels: &DemandLevelSet) -> Result<usize> {
    if !(raw >= 0.0) {
        return Err(Error::Input(format!("demand must be >= 0, got {raw}")));
    }
    for (k, &r) in levels.values.iter().enumerate() {
        if r >= raw {
            return Ok(k);
        }
    }
    Ok(levels.count() - 1)
}

/// A row-stochastic Λ×Λ transition matrix; `matrix[current][next]` is
/// `Pr[next level | current level]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DemandChain {
    num_levels: usize,
    matrix: Vec<f64>,
}

impl DemandChain {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut matrix = Vec::with_capacity(n * n);
        for row in &rows {
            if row.len() != n {
                return Err(Error::Input("transition matrix must be square".into()));
            }
            matrix.extend_from_slice(row);
        }
        Self::from_flat(n, matrix)
    }

    /// Row-major construction; validates row sums within [`ROW_SUM_TOL`].
    pub fn from_flat(num_levels: usize, matrix: Vec<f64>) -> Result<Self> {
        if num_levels == 0 || matrix.len() != num_levels * num_levels {
            return Err(Error::Input("transition matrix dimension mismatch".into()));
        }
        for j in 0..num_levels {
            let row = &matrix[j * num_levels..(j + 1) * num_levels];
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Input(format!("row {j} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if libm::fabs(sum - 1.0) > ROW_SUM_TOL {
                return Err(Error::Input(format!("row {j} sums to {sum}, expected 1")));
            }
        }
        Ok(Self { num_levels, matrix })
    }

    pub fn identity(num_levels: usize) -> Self {
        let mut matrix = vec![0.0; num_levels * num_levels];
        for i in 0..num_levels {
            matrix[i * num_levels + i] = 1.0;
        }
        Self { num_levels, matrix }
    }

    pub fn num_levels(&self) -> usize {
        self.num_levels
    }

    /// `Pr[next = to | current = from]`.
    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.matrix[from * self.num_levels + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.matrix[from * self.num_levels..(from + 1) * self.num_levels]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.matrix
    }
}

/// Windowed maximum-likelihood estimator of one VM's demand chain.
///
/// Keeps the last `window_slots` observed level indices; the estimate for
/// row `j` is `count(j -> i within window) / count(visits to j within
/// window)`, with unvisited rows defaulting to the uniform distribution.
#[derive(Debug, Clone)]
pub struct SlidingWindowEstimator {
    num_levels: usize,
    window_slots: usize,
    buffer: VecDeque<usize>,
    transition_counts: Vec<u64>,
    visit_counts: Vec<u64>,
}

impl SlidingWindowEstimator {
    pub fn new(num_levels: usize, window_slots: usize) -> Result<Self> {
        if num_levels < 2 {
            return Err(Error::Input("need at least 2 demand levels".into()));
        }
        if window_slots < 2 {
            return Err(Error::Input("window must span at least 2 slots".into()));
        }
        Ok(Self {
            num_levels,
            window_slots,
            buffer: VecDeque::with_capacity(window_slots + 1),
            transition_counts: vec![0; num_levels * num_levels],
            visit_counts: vec![0; num_levels],
        })
    }

    pub fn window_slots(&self) -> usize {
        self.window_slots
    }

    /// Observed level indices currently inside the window, oldest first.
    pub fn window_contents(&self) -> impl Iterator<Item = usize> + '_ {
        self.buffer.iter().copied()
    }

    pub fn transition_count(&self, from: usize, to: usize) -> u64 {
        self.transition_counts[from * self.num_levels + to]
    }

    pub fn visit_count(&self, from: usize) -> u64 {
        self.visit_counts[from]
    }

    /// Appends an observation, evicting history beyond the window.
    pub fn observe(&mut self, new_level: usize) -> Result<()> {
        if new_level >= self.num_levels {
            return Err(Error::Input(format!(
                "level index {new_level} out of range (Λ = {})",
                self.num_levels
            )));
        }
        if let Some(&last) = self.buffer.back() {
            self.transition_counts[last * self.num_levels + new_level] += 1;
            self.visit_counts[last] += 1;
        }
        self.buffer.push_back(new_level);
        if self.buffer.len() > self.window_slots {
            let evicted = self.buffer.pop_front().expect("buffer non-empty");
            let next = *self.buffer.front().expect("window_slots >= 2");
            self.transition_counts[evicted * self.num_levels + next] -= 1;
            self.visit_counts[evicted] -= 1;
        }
        Ok(())
    }

    /// The windowed MLE chain; rows with no visits are uniform.
    pub fn estimate(&self) -> DemandChain {
        let n = self.num_levels;
        let mut matrix = vec![0.0; n * n];
        for j in 0..n {
            let visits = self.visit_counts[j];
            let row = &mut matrix[j * n..(j + 1) * n];
            if visits == 0 {
                row.fill(1.0 / n as f64);
            } else {
                for (i, slot) in row.iter_mut().enumerate() {
                    *slot = self.transition_counts[j * n + i] as f64 / visits as f64;
                }
            }
        }
        DemandChain { num_levels: n, matrix }
    }

    pub fn observe_and_estimate(&mut self, new_level: usize) -> Result<DemandChain> {
        self.observe(new_level)?;
        Ok(self.estimate())
    }
}

/// Outcome of power iteration on a demand chain.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryResult {
    pub distribution: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Repeated right-multiplication `π <- πP` from `start` until
/// `‖π - πP‖_∞ <= tol`; the last iterate is returned flagged
/// non-converged if `max_iter` is hit first.
pub fn stationary_distribution(
    chain: &DemandChain,
    start: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<StationaryResult> {
    let n = chain.num_levels;
    validate_distribution(start, n)?;
    let mut pi = start.to_vec();
    let mut next = vec![0.0; n];
    for it in 0..max_iter {
        right_multiply(&pi, chain, &mut next);
        let delta = pi
            .iter()
            .zip(&next)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max);
        if delta <= tol {
            return Ok(StationaryResult { distribution: pi, converged: true, iterations: it });
        }
        core::mem::swap(&mut pi, &mut next);
    }
    Ok(StationaryResult { distribution: pi, converged: false, iterations: max_iter })
}

fn right_multiply(pi: &[f64], chain: &DemandChain, out: &mut [f64]) {
    let n = chain.num_levels;
    out.fill(0.0);
    for (j, &p) in pi.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (i, slot) in out.iter_mut().enumerate() {
            *slot += p * chain.matrix[j * n + i];
        }
    }
}

fn validate_distribution(pi: &[f64], n: usize) -> Result<()> {
    if pi.len() != n {
        return Err(Error::Input("distribution length mismatch".into()));
    }
    if pi.iter().any(|&p| !(0.0..=1.0 + ROW_SUM_TOL).contains(&p)) {
        return Err(Error::Input("distribution entries must lie in [0, 1]".into()));
    }
    let sum: f64 = pi.iter().sum();
    if libm::fabs(sum - 1.0) > ROW_SUM_TOL {
        return Err(Error::Input(format!("distribution sums to {sum}, expected 1")));
    }
    Ok(())
}

/// A VM's location paired with its stationary-expected demand level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureState {
    pub expected_level_index: usize,
    pub location: PmId,
}

/// Expected demand under `pi_inf`, rounded up to the nearest quantization
/// level, paired with the VM's current location.
pub fn feature_state(
    pi_inf: &[f64],
    levels: &DemandLevelSet,
    location: PmId,
) -> Result<FeatureState> {
    validate_distribution(pi_inf, levels.count())?;
    let expected: f64 = pi_inf
        .iter()
        .zip(levels.values())
        .map(|(p, r)| p * r)
        .sum();
    // Absorb power-iteration residue so an expectation sitting exactly on a
    // level value does not get rounded up to the next one.
    let expected_level_index = quantize((expected - FEATURE_QUANTIZE_SLACK).max(0.0), levels)?;
    Ok(FeatureState { expected_level_index, location })
}

/// Raw per-(vm, slot) CPU demands, each a fraction of one PM's capacity.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DemandTrace {
    num_vms: usize,
    num_slots: usize,
    /// Slot-major: `demands[slot * num_vms + vm]`.
    demands: Vec<f64>,
}

impl DemandTrace {
    pub fn new(num_vms: usize, num_slots: usize, demands: Vec<f64>) -> Result<Self> {
        if num_vms == 0 || num_slots == 0 {
            return Err(Error::Input("trace must have at least one VM and one slot".into()));
        }
        if demands.len() != num_vms * num_slots {
            return Err(Error::Input(format!(
                "trace expects {} cells, got {}",
                num_vms * num_slots,
                demands.len()
            )));
        }
        if demands.iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::Input("demands must be >= 0".into()));
        }
        Ok(Self { num_vms, num_slots, demands })
    }

    pub fn num_vms(&self) -> usize {
        self.num_vms
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn demand(&self, vm: usize, slot: usize) -> f64 {
        self.demands[slot * self.num_vms + vm]
    }

    /// All demands of one slot, indexed by VM.
    pub fn slot(&self, slot: usize) -> &[f64] {
        &self.demands[slot * self.num_vms..(slot + 1) * self.num_vms]
    }
}

/// Replaces the active per-VM chains from `slot` onward.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RegimeSwitch {
    pub slot: usize,
    pub chains: Vec<DemandChain>,
}

/// Samples a trace from per-VM ground-truth chains, swapping the chain
/// set at each scheduled regime switch. Deterministic for a fixed seed.
pub fn synthesize_trace(
    ground_truth: &[DemandChain],
    regime_schedule: &[RegimeSwitch],
    levels: &DemandLevelSet,
    start_levels: &[usize],
    num_slots: usize,
    seed: u64,
) -> Result<DemandTrace> {
    if ground_truth.is_empty() {
        return Err(Error::Input("need at least one ground-truth chain".into()));
    }
    let num_vms = ground_truth.len();
    if start_levels.len() != num_vms {
        return Err(Error::Input("one start level per VM required".into()));
    }
    if num_slots == 0 {
        return Err(Error::Input("trace must cover at least one slot".into()));
    }
    let lambda = levels.count();
    let all_sets = core::iter::once(ground_truth)
        .chain(regime_schedule.iter().map(|s| s.chains.as_slice()));
    for set in all_sets {
        if set.len() != num_vms || set.iter().any(|c| c.num_levels != lambda) {
            return Err(Error::Input("every chain set must cover all VMs at Λ levels".into()));
        }
    }
    if regime_schedule.windows(2).any(|w| w[0].slot >= w[1].slot) {
        return Err(Error::Input("regime switch slots must be strictly increasing".into()));
    }
    if start_levels.iter().any(|&l| l >= lambda) {
        return Err(Error::Input("start level out of range".into()));
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut current = start_levels.to_vec();
    let mut active = ground_truth;
    let mut next_switch = 0usize;
    let mut demands = Vec::with_capacity(num_vms * num_slots);
    for vm in 0..num_vms {
        demands.push(levels.value(current[vm]));
    }
    for slot in 1..num_slots {
        while next_switch < regime_schedule.len() && regime_schedule[next_switch].slot <= slot {
            active = &regime_schedule[next_switch].chains;
            next_switch += 1;
        }
        for vm in 0..num_vms {
            let u = uniform_f64(&mut rng);
            current[vm] = sample_row(active[vm].row(current[vm]), u);
            demands.push(levels.value(current[vm]));
        }
    }
    DemandTrace::new(num_vms, num_slots, demands)
}

fn uniform_f64(rng: &mut impl RngCore) -> f64 {
    // 53 random bits in [0, 1).
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn sample_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}
