//! Numerical verification tooling: the feature mapping matrix, the
//! approximation-error sandwich bound, value-iteration decay diagnostics,
//! and windowed transition heatmaps with a quasi-static score.

use alloc::vec;
use alloc::vec::Vec;

use crate::cluster::ClusterSpec;
use crate::demand::{
    quantize, DemandChain, DemandLevelSet, DemandTrace, FeatureState, SlidingWindowEstimator,
};
use crate::error::{Error, Result};
use crate::exact_mdp::{JointSpace, DEFAULT_STATE_BUDGET};
use crate::linalg;
use crate::madvm::BlockIteration;

/// Ridge added to the normal equations of the least-squares projection.
pub const PROJECTION_RIDGE: f64 = 1e-12;

/// Default half-width of the quasi-static run test.
pub const DEFAULT_QUASI_STATIC_EPS: f64 = 0.05;

/// The 0/1 matrix `M` mapping stacked per-VM weights to joint-state
/// utilities (each row holds the indicator features of one joint state),
/// plus the key-state selector `M†` (one 1 per row).
#[derive(Debug, Clone)]
pub struct MappingMatrix {
    num_states: usize,
    num_vms: usize,
    weight_len: usize,
    /// Flattened `num_states × num_vms`: columns of the ones in each row.
    rows: Vec<usize>,
    /// For each weight coordinate, the joint state its key state packs to.
    dag: Vec<usize>,
    /// `a = sqrt(|V_m| · (|V_s|Λ)^{|V_m|})`.
    pub a: f64,
}

impl MappingMatrix {
    pub fn new(
        features: &[FeatureState],
        levels: &DemandLevelSet,
        spec: &ClusterSpec,
    ) -> Result<Self> {
        let space = JointSpace::new(spec, levels, DEFAULT_STATE_BUDGET)?;
        let n = space.num_states();
        let lambda = levels.count();
        let block = lambda * spec.num_pms;
        let weight_len = spec.num_vms * block;
        let mut rows = Vec::with_capacity(n * spec.num_vms);
        for idx in 0..n {
            let state = space.unpack(idx, spec);
            for l in 0..spec.num_vms {
                rows.push(
                    l * block + state.demand_levels[l] * spec.num_pms
                        + state.placement.pm_of(l).0,
                );
            }
        }
        let mut dag = Vec::with_capacity(weight_len);
        for l in 0..spec.num_vms {
            let key_states = crate::madvm::build_key_states(l, features, levels, spec)?;
            for state in key_states.states() {
                dag.push(space.pack(&state.demand_levels, &state.placement));
            }
        }
        let a = libm::sqrt((spec.num_vms * n) as f64);
        Ok(Self { num_states: n, num_vms: spec.num_vms, weight_len, rows, dag, a })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn weight_len(&self) -> usize {
        self.weight_len
    }

    /// Columns of the ones in row `state`.
    pub fn row(&self, state: usize) -> &[usize] {
        &self.rows[state * self.num_vms..(state + 1) * self.num_vms]
    }

    /// `M · w`.
    pub fn apply(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.weight_len {
            return Err(Error::Input("weight vector has the wrong length".into()));
        }
        Ok((0..self.num_states)
            .map(|s| self.row(s).iter().map(|&c| w[c]).sum())
            .collect())
    }

    /// `M† · v`: the key-state entries of a joint-state vector.
    pub fn select_key_states(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.num_states {
            return Err(Error::Input("state vector has the wrong length".into()));
        }
        Ok(self.dag.iter().map(|&s| v[s]).collect())
    }

    /// Least-squares projection `X* = (MᵀM)† Mᵀ v` with a small ridge.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.num_states {
            return Err(Error::Input("state vector has the wrong length".into()));
        }
        let k = self.weight_len;
        let mut gram = vec![0.0; k * k];
        let mut rhs = vec![0.0; k];
        for s in 0..self.num_states {
            let row = self.row(s);
            for &i in row {
                rhs[i] += v[s];
                for &j in row {
                    gram[i * k + j] += 1.0;
                }
            }
        }
        for i in 0..k {
            gram[i * k + i] += PROJECTION_RIDGE;
        }
        linalg::solve_dense(&mut gram, &mut rhs, k, 0.0)
            .ok_or_else(|| Error::Input("projection system is singular".into()))
    }
}

/// The error sandwich: `lower ≤ ‖MW − V*‖ ≤ upper` with the constants
/// that certify the upper bound, all in the ℓ2 norm.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundReport {
    pub error: f64,
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
    pub beta_contraction: f64,
    pub c: f64,
    /// False when no (n, β<1, c<1) was found within `n_max`; the upper
    /// bound is then meaningless (infinity) and only `lower ≤ error`
    /// is claimed.
    pub certified: bool,
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Measures the sandwich bound for converged weights `w` against the
/// exact utilities `v_star`, searching `n ∈ [1, n_max]` for the constants
/// along the actual iteration trajectories.
pub fn bound_check(
    v_star: &[f64],
    w: &[f64],
    mapping: &MappingMatrix,
    iteration: &BlockIteration,
    n_max: usize,
) -> Result<BoundReport> {
    if n_max == 0 {
        return Err(Error::Input("n_max must be positive".into()));
    }
    if iteration.weight_len() != mapping.weight_len() {
        return Err(Error::Input("iteration map and mapping matrix disagree".into()));
    }
    let x_star = mapping.project(v_star)?;
    let error = linalg::l2_norm(&sub(&mapping.apply(w)?, v_star));
    let lower = linalg::l2_norm(&sub(&mapping.apply(&x_star)?, v_star));
    let dag_v = mapping.select_key_states(v_star)?;
    let x_gap = linalg::l2_norm(&sub(&x_star, &dag_v));
    let d0 = linalg::l2_norm(&sub(w, &x_star));

    // Iterate both trajectories in lockstep; the fixed-point side starts
    // from the converged weights, the other from the projection.
    let mut w_traj = w.to_vec();
    let mut x_traj = x_star.clone();
    let mut dist_to_dag = linalg::l2_norm(&sub(&x_traj, &dag_v));
    let mut c_running: f64 = 0.0;
    let mut best: Option<(f64, usize, f64, f64)> = None;
    for n in 1..=n_max {
        w_traj = iteration.sweep(&w_traj)?;
        x_traj = iteration.sweep(&x_traj)?;
        let next_dist = linalg::l2_norm(&sub(&x_traj, &dag_v));
        if dist_to_dag > 1e-15 {
            c_running = c_running.max(next_dist / dist_to_dag);
        }
        dist_to_dag = next_dist;
        let beta = if d0 > 1e-15 {
            linalg::l2_norm(&sub(&w_traj, &x_traj)) / d0
        } else {
            0.0
        };
        if beta < 1.0 && c_running < 1.0 {
            let upper = mapping.a * (libm::pow(c_running, n as f64) + 1.0) / (1.0 - beta)
                * x_gap
                + lower;
            if best.map_or(true, |(u, ..)| upper < u) {
                best = Some((upper, n, beta, c_running));
            }
        }
    }
    Ok(match best {
        Some((upper, n, beta_contraction, c)) => BoundReport {
            error,
            lower,
            upper,
            n,
            beta_contraction,
            c,
            certified: true,
        },
        None => BoundReport {
            error,
            lower,
            upper: f64::INFINITY,
            n: 0,
            beta_contraction: f64::NAN,
            c: f64::NAN,
            certified: false,
        },
    })
}

/// Decay behaviour of a value-iteration difference sequence.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DecayReport {
    /// Max-norm of successive differences, one entry per sweep.
    pub diffs: Vec<f64>,
    /// Geometric ratio fitted to the positive differences; 0 for an
    /// already-converged (all-zero) sequence.
    pub decay_ratio: f64,
    pub contracting: bool,
}

/// Fits a geometric envelope to recorded per-sweep max-norm differences.
pub fn convergence_diagnostics(diffs: &[f64]) -> Result<DecayReport> {
    if diffs.len() < 3 {
        return Err(Error::Input("need at least 3 recorded iterations".into()));
    }
    // Least-squares line through (k, ln diff_k) over the positive tail;
    // its slope exponentiates to the fitted ratio.
    let points: Vec<(f64, f64)> = diffs
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 0.0)
        .map(|(k, &d)| (k as f64, libm::log(d)))
        .collect();
    let decay_ratio = if points.len() < 2 {
        0.0
    } else {
        let n = points.len() as f64;
        let sx: f64 = points.iter().map(|p| p.0).sum();
        let sy: f64 = points.iter().map(|p| p.1).sum();
        let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
        let denom = n * sxx - sx * sx;
        if denom == 0.0 {
            0.0
        } else {
            libm::exp((n * sxy - sx * sy) / denom)
        }
    };
    Ok(DecayReport { diffs: diffs.to_vec(), decay_ratio, contracting: decay_ratio < 1.0 })
}

/// Windowed transition matrices for one VM, sampled every `stride` slots.
#[derive(Debug, Clone)]
pub struct HeatmapSeries {
    /// Start slot of each window.
    pub offsets: Vec<usize>,
    pub matrices: Vec<DemandChain>,
    /// Mean (over matrix entries) of the longest fraction of windows an
    /// entry stays within ±epsilon of its run mean; 1.0 = fully static.
    pub quasi_static_score: f64,
    pub epsilon: f64,
}

/// Longest run (as a fraction of the series) during which every value
/// stays within ±eps of the running mean of the run.
fn longest_stable_fraction(series: &[f64], eps: f64) -> f64 {
    let n = series.len();
    if n == 0 {
        return 0.0;
    }
    let mut best = 1usize;
    for start in 0..n {
        let mut sum = 0.0;
        for end in start..n {
            sum += series[end];
            let len = end - start + 1;
            let mean = sum / len as f64;
            if series[start..=end].iter().all(|&v| libm::fabs(v - mean) <= eps) {
                best = best.max(len);
            } else {
                break;
            }
        }
    }
    best as f64 / n as f64
}

/// Slides a window of `window` slots over one VM's quantized demand
/// series and re-estimates the transition matrix at every `stride`.
pub fn transition_heatmap(
    trace: &DemandTrace,
    levels: &DemandLevelSet,
    vm: usize,
    window: usize,
    stride: usize,
    epsilon: f64,
) -> Result<HeatmapSeries> {
    if vm >= trace.num_vms() {
        return Err(Error::Input("VM index out of range".into()));
    }
    if window < 2 || stride == 0 {
        return Err(Error::Input("need window >= 2 and stride >= 1".into()));
    }
    if trace.num_slots() < window {
        return Err(Error::Input("trace shorter than the analysis window".into()));
    }
    let lambda = levels.count();
    let series: Vec<usize> = (0..trace.num_slots())
        .map(|t| quantize(trace.demand(vm, t), levels))
        .collect::<Result<_>>()?;
    let mut offsets = Vec::new();
    let mut matrices = Vec::new();
    let mut start = 0;
    while start + window <= series.len() {
        let mut est = SlidingWindowEstimator::new(lambda, window)?;
        for &lvl in &series[start..start + window] {
            est.observe(lvl)?;
        }
        offsets.push(start);
        matrices.push(est.estimate());
        start += stride;
    }
    let mut score = 0.0;
    for i in 0..lambda {
        for j in 0..lambda {
            let entry_series: Vec<f64> =
                matrices.iter().map(|m| m.prob(i, j)).collect();
            score += longest_stable_fraction(&entry_series, epsilon);
        }
    }
    score /= (lambda * lambda) as f64;
    Ok(HeatmapSeries { offsets, matrices, quasi_static_score: score, epsilon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{Placement, PmId, SystemState};
    use crate::demand::{synthesize_trace, RegimeSwitch};
    use crate::madvm::{
        build_key_states, per_vm_value_iteration, WeightVector,
    };
    use crate::{exact_mdp, madvm};
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
    fn single_vm_mapping_is_permutation() {
        let s = spec(2, 1, 1);
        let levels = DemandLevelSet::uniform(3, 1.0).unwrap();
        let m = MappingMatrix::new(&[feature(0, 0)], &levels, &s).unwrap();
        assert_eq!(m.num_states(), m.weight_len());
        let mut seen = vec![false; m.weight_len()];
        for st in 0..m.num_states() {
            let row = m.row(st);
            assert_eq!(row.len(), 1);
            assert!(!seen[row[0]], "column hit twice");
            seen[row[0]] = true;
        }
        // M† undoes M: selecting key states of M·w recovers w.
        let w: Vec<f64> = (0..m.weight_len()).map(|i| i as f64 * 1.5).collect();
        let v = m.apply(&w).unwrap();
        assert_eq!(m.select_key_states(&v).unwrap(), w);
    }

    #[test]
    fn mapping_row_sums_equal_vm_count() {
        let s = spec(2, 3, 1);
        let levels = DemandLevelSet::uniform(2, 1.0).unwrap();
        let features = [feature(0, 0), feature(1, 1), feature(0, 1)];
        let m = MappingMatrix::new(&features, &levels, &s).unwrap();
        for st in 0..m.num_states() {
            assert_eq!(m.row(st).len(), 3);
        }
        let ones = vec![1.0; m.weight_len()];
        for v in m.apply(&ones).unwrap() {
            assert_eq!(v, 3.0);
        }
    }

    #[test]
    fn mapping_product_matches_joint_utility() {
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
                per_vm_value_iteration(&ks, &chains[l], &s, &levels, 1e-10, 100_000, None)
                    .unwrap(),
            );
        }
        let w = WeightVector::from_tables(&tables).unwrap();
        let m = MappingMatrix::new(&features, &levels, &s).unwrap();
        let mw = m.apply(&w.weights).unwrap();
        let space =
            exact_mdp::JointSpace::new(&s, &levels, exact_mdp::DEFAULT_STATE_BUDGET).unwrap();
        // 10 deterministic probe states.
        for k in 0..10 {
            let idx = (k * 7) % space.num_states();
            let state = space.unpack(idx, &s);
            let direct = madvm::approximate_joint_utility(&tables, &state);
            assert!(libm::fabs(mw[idx] - direct) < 1e-12);
        }
    }

    fn bound_fixture(
        s: &ClusterSpec,
        levels: &DemandLevelSet,
        chains: &[DemandChain],
        features: &[FeatureState],
    ) -> BoundReport {
        let mut tables = Vec::new();
        for l in 0..s.num_vms {
            let ks = build_key_states(l, features, levels, s).unwrap();
            tables.push(
                per_vm_value_iteration(&ks, &chains[l], s, levels, 1e-8, 200_000, None)
                    .unwrap(),
            );
        }
        let w = WeightVector::from_tables(&tables).unwrap();
        let reference_state = {
            let mut lv = Vec::new();
            let mut pm = Vec::new();
            for f in features {
                lv.push(f.expected_level_index);
                pm.push(f.location);
            }
            SystemState::new(lv, Placement::new(pm, s).unwrap(), levels, s).unwrap()
        };
        let exact = exact_mdp::value_iteration(chains, s, levels, &reference_state, 1e-9, 200_000)
            .unwrap();
        assert!(exact.converged);
        let mapping = MappingMatrix::new(features, levels, s).unwrap();
        let iteration = BlockIteration::new(features, chains, levels, s).unwrap();
        bound_check(&exact.values, &w.weights, &mapping, &iteration, 50).unwrap()
    }

    #[test]
    fn single_vm_error_vanishes() {
        let s = spec(2, 1, 1);
        let levels = DemandLevelSet::new(vec![0.1, 0.7]).unwrap();
        let chains =
            vec![DemandChain::from_rows(vec![vec![0.8, 0.2], vec![0.4, 0.6]]).unwrap()];
        let report = bound_fixture(&s, &levels, &chains, &[feature(0, 0)]);
        assert!(report.error <= 1e-6, "error {}", report.error);
        assert!(report.lower <= 1e-6);
        assert!(report.lower <= report.error + 1e-12);
    }

    #[test]
    fn two_vm_sandwich_holds() {
        let s = spec(2, 2, 1);
        let levels = DemandLevelSet::new(vec![0.1, 0.6]).unwrap();
        let chains = vec![
            DemandChain::from_rows(vec![vec![0.8, 0.2], vec![0.4, 0.6]]).unwrap(),
            DemandChain::from_rows(vec![vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap(),
        ];
        let report = bound_fixture(&s, &levels, &chains, &[feature(0, 0), feature(1, 1)]);
        assert!(report.lower <= report.error + 1e-9);
        if report.certified {
            assert!(report.error <= report.upper + 1e-9);
            assert!(report.beta_contraction < 1.0);
            assert!(report.c < 1.0);
        }
    }

    #[test]
    fn diagnostics_constant_sequence() {
        let report = convergence_diagnostics(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(report.decay_ratio, 0.0);
        assert!(report.contracting);
    }

    #[test]
    fn diagnostics_flags_divergence() {
        let report = convergence_diagnostics(&[1.0, 2.0, 4.0, 8.0]).unwrap();
        assert!(report.decay_ratio > 1.0);
        assert!(!report.contracting);
    }

    #[test]
    fn diagnostics_requires_history() {
        assert!(convergence_diagnostics(&[1.0, 0.5]).is_err());
    }

    #[test]
    fn five_level_fixture_converges_by_fifteen() {
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
        let res = per_vm_value_iteration(&ks, &chain, &s, &levels, 1e-14, 40, None).unwrap();
        let report = convergence_diagnostics(&res.diffs).unwrap();
        assert!(report.contracting);
        assert!(
            report.diffs.len() >= 15 || report.diffs.last().copied().unwrap_or(1.0) < 1e-3
        );
        let by_15 = report.diffs.iter().take(15).any(|&d| d < 1e-3);
        assert!(by_15, "differences never dropped below 1e-3 within 15 sweeps");
    }

    fn constant_trace(level_value: f64, slots: usize) -> DemandTrace {
        DemandTrace::new(1, slots, vec![level_value; slots]).unwrap()
    }

    #[test]
    fn heatmap_constant_trace_is_static() {
        let levels = DemandLevelSet::new(vec![0.0, 0.5, 1.0]).unwrap();
        let trace = constant_trace(0.5, 200);
        let hm = transition_heatmap(&trace, &levels, 0, 50, 10, DEFAULT_QUASI_STATIC_EPS)
            .unwrap();
        assert_eq!(hm.quasi_static_score, 1.0);
        for m in &hm.matrices {
            assert_eq!(m.prob(1, 1), 1.0);
        }
        for w in hm.matrices.windows(2) {
            assert_eq!(w[0].as_flat(), w[1].as_flat());
        }
    }

    #[test]
    fn heatmap_detects_regime_switch() {
        let levels = DemandLevelSet::new(vec![0.2, 0.8]).unwrap();
        let calm = DemandChain::from_rows(vec![vec![0.95, 0.05], vec![0.9, 0.1]]).unwrap();
        let busy = DemandChain::from_rows(vec![vec![0.1, 0.9], vec![0.05, 0.95]]).unwrap();
        let trace = synthesize_trace(
            &[calm.clone()],
            &[RegimeSwitch { slot: 400, chains: vec![busy.clone()] }],
            &levels,
            &[0],
            800,
            7,
        )
        .unwrap();
        let switched =
            transition_heatmap(&trace, &levels, 0, 100, 20, DEFAULT_QUASI_STATIC_EPS).unwrap();
        let steady = synthesize_trace(&[calm.clone()], &[], &levels, &[0], 800, 7).unwrap();
        let stable =
            transition_heatmap(&steady, &levels, 0, 100, 20, DEFAULT_QUASI_STATIC_EPS).unwrap();
        assert!(
            switched.quasi_static_score < stable.quasi_static_score,
            "switch {} vs steady {}",
            switched.quasi_static_score,
            stable.quasi_static_score
        );
        // Early windows look like the calm chain, late ones like the busy
        // chain.
        let first = &switched.matrices[0];
        let last = switched.matrices.last().unwrap();
        assert!(first.prob(0, 0) > 0.8);
        assert!(last.prob(0, 0) < 0.3);
    }

    #[test]
    fn heatmap_uniform_trace_recovers_uniform_rows() {
        let levels = DemandLevelSet::new(vec![0.25, 0.75]).unwrap();
        let uniform = DemandChain::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let trace = synthesize_trace(&[uniform], &[], &levels, &[0], 4000, 11).unwrap();
        let hm = transition_heatmap(&trace, &levels, 0, 4000, 1, DEFAULT_QUASI_STATIC_EPS)
            .unwrap();
        assert_eq!(hm.matrices.len(), 1);
        let m = &hm.matrices[0];
        // 3σ binomial tolerance at p = 0.5, n ≈ 2000 visits per row.
        let tol = 3.0 * libm::sqrt(0.25 / 1500.0);
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    libm::fabs(m.prob(i, j) - 0.5) < tol,
                    "entry ({i},{j}) = {}",
                    m.prob(i, j)
                );
            }
        }
    }

    #[test]
    fn heatmap_rejects_short_trace() {
        let levels = DemandLevelSet::new(vec![0.0, 1.0]).unwrap();
        let trace = constant_trace(0.0, 20);
        assert!(transition_heatmap(&trace, &levels, 0, 50, 10, 0.05).is_err());
    }

    #[test]
    fn heatmap_matrices_are_row_stochastic() {
        let levels = DemandLevelSet::new(vec![0.2, 0.8]).unwrap();
        let chain = DemandChain::from_rows(vec![vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let trace = synthesize_trace(&[chain], &[], &levels, &[0], 500, 3).unwrap();
        let hm = transition_heatmap(&trace, &levels, 0, 60, 15, 0.05).unwrap();
        for m in &hm.matrices {
            for i in 0..2 {
                let sum: f64 = m.row(i).iter().sum();
                assert!(libm::fabs(sum - 1.0) < 1e-9);
            }
        }
    }
}
