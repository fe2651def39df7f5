//! Independent test oracles and instance generators.
//!
//! The centerpiece is an exhaustive stationary-policy oracle for tiny
//! joint MDPs: it enumerates every recurrent-class behaviour a
//! deterministic stationary policy can induce and returns the minimum
//! long-run average cost. It deliberately re-derives transition products
//! and costs from first principles instead of calling the solver under
//! test.

use madvm_core::cluster::ClusterSpec;
use madvm_core::demand::{DemandChain, DemandLevelSet};
use madvm_core::{Error, Result};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Hard caps keeping the oracle's stack buffers fixed-size.
const MAX_PLACEMENTS: usize = 4;
const MAX_DEMANDS: usize = 16;
const MAX_STATES: usize = MAX_PLACEMENTS * MAX_DEMANDS;

/// Default cap on enumerated policy restrictions.
pub const DEFAULT_ASSIGNMENT_BUDGET: u128 = 100_000_000;

#[derive(Debug, Clone, Copy)]
pub struct BruteForceOutcome {
    /// Minimum long-run average cost over all stationary policies.
    pub min_gain: f64,
    /// Number of enumerated (placement set, restricted policy) pairs.
    pub assignments: u128,
    /// Number of recurrent classes whose gain was actually solved.
    pub classes_solved: u64,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A row-stochastic chain with every entry strictly positive (each entry
/// at least `min_entry / (Λ · (1 + min_entry))` after normalization), so
/// induced joint chains are irreducible and aperiodic.
pub fn random_chain(rng: &mut ChaCha8Rng, num_levels: usize, min_entry: f64) -> DemandChain {
    let mut rows = Vec::with_capacity(num_levels);
    for _ in 0..num_levels {
        let mut row: Vec<f64> =
            (0..num_levels).map(|_| min_entry + uniform_f64(rng)).collect();
        let sum: f64 = row.iter().sum();
        for v in &mut row {
            *v /= sum;
        }
        // Normalization drift: push any residual into the last entry.
        let residual = 1.0 - row.iter().sum::<f64>();
        *row.last_mut().expect("non-empty row") += residual;
        rows.push(row);
    }
    DemandChain::from_rows(rows).expect("normalized rows are stochastic")
}

/// Uniformly spaced levels with a randomized top value in [0.5, 1.2].
pub fn random_level_set(rng: &mut ChaCha8Rng, num_levels: usize) -> DemandLevelSet {
    let top = 0.5 + 0.7 * uniform_f64(rng);
    DemandLevelSet::uniform(num_levels, top).expect("valid uniform levels")
}

struct Instance {
    /// Λ^|V_m| demand combos.
    d_count: usize,
    /// |V_s|^|V_m| placements.
    p_count: usize,
    /// Product transition matrix over demand combos, row-major.
    pd: Vec<f64>,
    /// Cost per (demand combo, placement): `g[d * p_count + p]`.
    costs: Vec<f64>,
    /// Feasible target placements (≤ T_m moves) per placement.
    feasible: Vec<Vec<usize>>,
}

fn decode(mut code: usize, digits: usize, base: usize, out: &mut [usize]) {
    for slot in out.iter_mut().take(digits) {
        *slot = code % base;
        code /= base;
    }
}

impl Instance {
    fn build(
        chains: &[DemandChain],
        spec: &ClusterSpec,
        levels: &DemandLevelSet,
    ) -> Result<Self> {
        spec.validate()?;
        if chains.len() != spec.num_vms {
            return Err(Error::Input("one chain per VM required".into()));
        }
        let lambda = levels.count();
        if chains.iter().any(|c| c.num_levels() != lambda) {
            return Err(Error::Input("chain dimension must match the level set".into()));
        }
        if chains.iter().any(|c| c.as_flat().iter().any(|&p| p <= 0.0)) {
            return Err(Error::Input(
                "brute-force oracle requires strictly positive chains".into(),
            ));
        }
        if spec.t_m == 0 {
            return Err(Error::Input(
                "brute-force oracle requires T_m >= 1 (communicating MDP)".into(),
            ));
        }
        let p_count = spec.num_pms.pow(spec.num_vms as u32);
        let d_count = lambda.pow(spec.num_vms as u32);
        if p_count > MAX_PLACEMENTS || d_count > MAX_DEMANDS {
            return Err(Error::BudgetExceeded {
                states: (p_count * d_count) as u128,
                budget: MAX_STATES as u128,
            });
        }
        let mut pd = vec![0.0; d_count * d_count];
        let mut from = vec![0usize; spec.num_vms];
        let mut to = vec![0usize; spec.num_vms];
        for d in 0..d_count {
            decode(d, spec.num_vms, lambda, &mut from);
            for d2 in 0..d_count {
                decode(d2, spec.num_vms, lambda, &mut to);
                let mut prob = 1.0;
                for l in 0..spec.num_vms {
                    prob *= chains[l].prob(from[l], to[l]);
                }
                pd[d * d_count + d2] = prob;
            }
        }
        let mut costs = vec![0.0; d_count * p_count];
        let mut pms = vec![0usize; spec.num_vms];
        for d in 0..d_count {
            decode(d, spec.num_vms, lambda, &mut from);
            for p in 0..p_count {
                decode(p, spec.num_vms, spec.num_pms, &mut pms);
                let mut loads = vec![0.0f64; spec.num_pms];
                let mut hosted = vec![false; spec.num_pms];
                for l in 0..spec.num_vms {
                    loads[pms[l]] += levels.value(from[l]) / spec.capacity;
                    hosted[pms[l]] = true;
                }
                let mut power = 0.0;
                let mut shortage = 0.0;
                for i in 0..spec.num_pms {
                    power += if hosted[i] {
                        spec.p_idle + (spec.p_max - spec.p_idle) * loads[i].min(1.0)
                    } else {
                        spec.p_sleep
                    };
                    shortage += (loads[i] - 1.0).max(0.0);
                }
                costs[d * p_count + p] =
                    power + spec.lambda_weight / spec.num_vms as f64 * shortage;
            }
        }
        let mut feasible = Vec::with_capacity(p_count);
        let mut q_pms = vec![0usize; spec.num_vms];
        for p in 0..p_count {
            decode(p, spec.num_vms, spec.num_pms, &mut pms);
            let mut list = Vec::new();
            for q in 0..p_count {
                decode(q, spec.num_vms, spec.num_pms, &mut q_pms);
                let moves = pms.iter().zip(&q_pms).filter(|(a, b)| a != b).count();
                if moves <= spec.t_m {
                    list.push(q);
                }
            }
            feasible.push(list);
        }
        Ok(Self { d_count, p_count, pd, costs, feasible })
    }
}

/// Transitive-closure check that the placement digraph restricted to a
/// set of `k ≤ 4` nodes (local adjacency bitmasks) is strongly connected.
#[inline]
fn strongly_connected(nb: &[u8; MAX_PLACEMENTS], k: usize) -> bool {
    let full: u8 = ((1u16 << k) - 1) as u8;
    let mut r = [0u8; MAX_PLACEMENTS];
    for i in 0..k {
        r[i] = nb[i] | (1 << i);
    }
    // Two squarings cover paths of length up to 4.
    for _ in 0..2 {
        let prev = r;
        for i in 0..k {
            let mut acc = prev[i];
            let mut m = prev[i];
            while m != 0 {
                let j = m.trailing_zeros() as usize;
                acc |= prev[j];
                m &= m - 1;
            }
            r[i] = acc;
        }
    }
    (0..k).all(|i| r[i] == full)
}

/// Stationary gain of the irreducible chain on `k·D` states induced by
/// the current restricted policy. Solves `πᵀ(I − P) = 0, Σπ = 1` by
/// Gaussian elimination on fixed-size buffers.
#[allow(clippy::too_many_arguments)]
fn class_gain(
    inst: &Instance,
    k: usize,
    targets_local: &[u8; MAX_STATES],
    g_local: &[f64; MAX_STATES],
    a: &mut [f64],
    x: &mut [f64; MAX_STATES],
) -> Option<f64> {
    let d_count = inst.d_count;
    let n = k * d_count;
    let stride = n + 1;
    a[..n * stride].fill(0.0);
    for s in 0..n {
        a[s * stride + s] = 1.0;
    }
    // Column s = (placement i, demand d) contributes -Pr[d -> d2] to the
    // row of (target(i, d), d2): transposed balance equations.
    for i in 0..k {
        for d in 0..d_count {
            let s = i * d_count + d;
            let q = targets_local[s] as usize;
            let row_pd = &inst.pd[d * d_count..(d + 1) * d_count];
            for (d2, &prob) in row_pd.iter().enumerate() {
                a[(q * d_count + d2) * stride + s] -= prob;
            }
        }
    }
    // Replace the last balance row by the normalization Σπ = 1.
    let last = (n - 1) * stride;
    for j in 0..n {
        a[last + j] = 1.0;
    }
    a[last + n] = 1.0;
    // Partial-pivot elimination.
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * stride + col].abs();
        for row in col + 1..n {
            let v = a[row * stride + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best < 1e-12 {
            return None;
        }
        if piv != col {
            for j in col..stride {
                a.swap(col * stride + j, piv * stride + j);
            }
        }
        let pivot = a[col * stride + col];
        for row in col + 1..n {
            let factor = a[row * stride + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..stride {
                a[row * stride + j] -= factor * a[col * stride + j];
            }
        }
    }
    for s in (0..n).rev() {
        let mut acc = a[s * stride + n];
        for j in s + 1..n {
            acc -= a[s * stride + j] * x[j];
        }
        x[s] = acc / a[s * stride + s];
    }
    Some((0..n).map(|s| x[s] * g_local[s]).sum())
}

/// Exhaustive minimum long-run average cost over deterministic stationary
/// policies.
///
/// Requires strictly positive demand chains and `T_m ≥ 1`; the joint MDP
/// is then communicating and every recurrent class a policy can induce is
/// `D × Q` for some placement set `Q` that the restricted policy keeps
/// closed and strongly connected. Enumerating those restricted policies
/// by subset covers all of policy space without re-evaluating behaviour
/// that differs only on transient states.
pub fn min_average_cost(
    chains: &[DemandChain],
    spec: &ClusterSpec,
    levels: &DemandLevelSet,
    budget: u128,
) -> Result<BruteForceOutcome> {
    let inst = Instance::build(chains, spec, levels)?;
    let d_count = inst.d_count;
    let p_count = inst.p_count;
    let mut best = f64::INFINITY;
    let mut assignments: u128 = 0;
    let mut classes_solved: u64 = 0;
    let mut a = vec![0.0f64; MAX_STATES * (MAX_STATES + 1)];
    let mut x = [0.0f64; MAX_STATES];

    for q_mask in 1u32..(1 << p_count) {
        let members: Vec<usize> =
            (0..p_count).filter(|&p| q_mask & (1 << p) != 0).collect();
        let k = members.len();
        let local_of = |p: usize| members.iter().position(|&m| m == p).unwrap() as u8;
        // Allowed local targets per member placement.
        let opts: Vec<Vec<u8>> = members
            .iter()
            .map(|&p| {
                inst.feasible[p]
                    .iter()
                    .filter(|&&q| q_mask & (1 << q) != 0)
                    .map(|&q| local_of(q))
                    .collect()
            })
            .collect();
        // A placement that can only self-loop cannot join a larger class.
        if k > 1 && opts.iter().any(|o| o.len() == 1) {
            continue;
        }
        let n = k * d_count;
        let mut total: u128 = 1;
        for o in &opts {
            for _ in 0..d_count {
                total = total.saturating_mul(o.len() as u128);
            }
        }
        assignments = assignments.saturating_add(total);
        if assignments > budget {
            return Err(Error::BudgetExceeded { states: assignments, budget });
        }
        let mut g_local = [0.0f64; MAX_STATES];
        for i in 0..k {
            for d in 0..d_count {
                g_local[i * d_count + d] = inst.costs[d * p_count + members[i]];
            }
        }
        // Odometer over per-state option indices, placement-major so a
        // carry cascade stays within few placements.
        let mut digits = [0u8; MAX_STATES];
        let mut targets_local = [0u8; MAX_STATES];
        let mut nb = [0u8; MAX_PLACEMENTS];
        for i in 0..k {
            let first = opts[i][0];
            for d in 0..d_count {
                targets_local[i * d_count + d] = first;
            }
            nb[i] = 1 << first;
        }
        loop {
            if strongly_connected(&nb, k) {
                if let Some(gain) =
                    class_gain(&inst, k, &targets_local, &g_local, &mut a, &mut x)
                {
                    classes_solved += 1;
                    if gain < best {
                        best = gain;
                    }
                }
            }
            // Advance the odometer.
            let mut pos = 0;
            loop {
                if pos == n {
                    break;
                }
                let i = pos / d_count;
                digits[pos] += 1;
                if (digits[pos] as usize) < opts[i].len() {
                    targets_local[pos] = opts[i][digits[pos] as usize];
                    break;
                }
                digits[pos] = 0;
                targets_local[pos] = opts[i][0];
                pos += 1;
            }
            if pos == n {
                break;
            }
            // Refresh adjacency for every placement whose digits changed.
            for i in 0..=pos / d_count {
                let mut mask = 0u8;
                for d in 0..d_count {
                    mask |= 1 << targets_local[i * d_count + d];
                }
                nb[i] = mask;
            }
        }
    }
    Ok(BruteForceOutcome { min_gain: best, assignments, classes_solved })
}

#[cfg(test)]
mod tests {
    use super::*;
    use madvm_core::cluster::{Placement, PmId, SystemState};
    use madvm_core::demand::stationary_distribution;
    use madvm_core::exact_mdp;

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

    #[test]
    fn single_vm_single_pm_matches_stationary_cost() {
        let s = spec(1, 1, 1);
        let levels = DemandLevelSet::new(vec![0.0, 1.0]).unwrap();
        let chain =
            DemandChain::from_rows(vec![vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        let out =
            min_average_cost(&[chain.clone()], &s, &levels, DEFAULT_ASSIGNMENT_BUDGET)
                .unwrap();
        let pi = stationary_distribution(&chain, &[1.0, 0.0], 1e-13, 1_000_000).unwrap();
        let expected = pi.distribution[0] * 250.0 + pi.distribution[1] * 500.0;
        assert!((out.min_gain - expected).abs() < 1e-9);
    }

    #[test]
    fn single_vm_two_pms_matches_exact_solver() {
        let mut r = rng(42);
        for _ in 0..3 {
            let s = spec(2, 1, 1);
            let levels = random_level_set(&mut r, 3);
            let chain = random_chain(&mut r, 3, 0.05);
            let out = min_average_cost(
                core::slice::from_ref(&chain),
                &s,
                &levels,
                DEFAULT_ASSIGNMENT_BUDGET,
            )
            .unwrap();
            let reference = SystemState::new(
                vec![0],
                Placement::new(vec![PmId(0)], &s).unwrap(),
                &levels,
                &s,
            )
            .unwrap();
            let exact = exact_mdp::value_iteration(
                core::slice::from_ref(&chain),
                &s,
                &levels,
                &reference,
                1e-11,
                200_000,
            )
            .unwrap();
            assert!(exact.converged);
            assert!(
                (out.min_gain - exact.beta).abs() < 1e-6,
                "oracle {} vs solver {}",
                out.min_gain,
                exact.beta
            );
        }
    }

    #[test]
    fn rejects_non_positive_chains() {
        let s = spec(1, 1, 1);
        let levels = DemandLevelSet::new(vec![0.0, 1.0]).unwrap();
        let chain = DemandChain::identity(2);
        assert!(min_average_cost(&[chain], &s, &levels, DEFAULT_ASSIGNMENT_BUDGET).is_err());
    }

    #[test]
    fn budget_is_enforced() {
        let s = spec(2, 2, 1);
        let levels = DemandLevelSet::new(vec![0.2, 0.8]).unwrap();
        let mut r = rng(1);
        let chains = vec![random_chain(&mut r, 2, 0.1), random_chain(&mut r, 2, 0.1)];
        assert!(matches!(
            min_average_cost(&chains, &s, &levels, 1000),
            Err(Error::BudgetExceeded { .. })
        ));
    }
}
