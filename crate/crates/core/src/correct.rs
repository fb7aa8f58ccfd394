//! Post-training multiplier correction.
//!
//! Training stops with one lambda per phase; realized cost under that lambda
//! rarely sits exactly on budget. This module evaluates a policy's per-phase
//! cost on held-out traffic and searches, per time slice and in decision
//! order, the multiplier that puts each phase inside a tight utilization band
//! (default 100% +/- 0.5%). The search is bisection on the realized cost
//! curve with a grid fallback should that curve ever fail to be monotone.
//!
//! Because the phase-t decision depends only on lambda_t, correcting a later
//! phase never moves an earlier phase's realized cost; one ordered pass lands
//! all phases simultaneously. The recorded drift between search-time and
//! final utilization makes that visible per run.

use crate::domain::{BudgetSpec, LambdaTable, LambdaVector, Phase, RewardWeights, PHASES};
use crate::error::{Error, Result};
use crate::metrics;
use crate::qnet::{argmax_calibrated, QNetworkParams};
use crate::sim::{initial_state, step, EncodingSpec, NoiseMode, PhaseState, StepResult, SyntheticRequest};

/// Relative utilization band half-width the search aims for.
pub const DEFAULT_BAND: f64 = 0.005;
/// Probe budget per phase (bracketing and bisection combined).
pub const MAX_PROBES: usize = 30;

/// Anything that can score a phase state's actions. The trained network is
/// the production scorer; tests substitute the simulator's exact values.
pub trait StateScorer {
    fn q_values(&self, req: &SyntheticRequest, state: &PhaseState) -> Result<Vec<f64>>;
}

/// Scores states with a trained Q-network (uniform head mixture).
pub struct NetScorer<'a> {
    pub params: &'a QNetworkParams,
    pub encoding: &'a EncodingSpec,
}

impl StateScorer for NetScorer<'_> {
    fn q_values(&self, _req: &SyntheticRequest, state: &PhaseState) -> Result<Vec<f64>> {
        let x = self.encoding.encode(state)?;
        self.params.forward(&x, state.phase)
    }
}

/// Scores each action by the exact value reachable from it: value of the
/// decisions so far, the candidate action, and value-maximal play afterwards.
pub struct OracleScorer;

impl StateScorer for OracleScorer {
    fn q_values(&self, req: &SyntheticRequest, state: &PhaseState) -> Result<Vec<f64>> {
        let mut prefix = req.base_value;
        for (i, &a) in state.decisions.iter().enumerate() {
            prefix *= req.factor(Phase::ALL[i], a);
        }
        let mut tail = 1.0;
        for p in Phase::ALL.iter().skip(state.phase.index() + 1) {
            let best = req
                .costs(*p)
                .iter()
                .enumerate()
                .map(|(a, _)| req.factor(*p, a))
                .fold(0.0, f64::max);
            tail *= best;
        }
        Ok((0..state.action_costs.len())
            .map(|a| prefix * req.factor(state.phase, a) * tail)
            .collect())
    }
}

/// One request played greedily end to end under calibrated selection.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    pub decisions: [usize; PHASES],
    pub costs: [f64; PHASES],
    pub value: f64,
}

pub fn greedy_rollout(
    scorer: &impl StateScorer,
    lambda: &LambdaVector,
    req: &SyntheticRequest,
) -> Result<RolloutTrace> {
    let weights = RewardWeights::default();
    let mut state = initial_state(req);
    let mut costs = [0.0; PHASES];
    loop {
        let q = scorer.q_values(req, &state)?;
        let action = argmax_calibrated(&q, &state.action_costs, lambda.get(state.phase))?;
        costs[state.phase.index()] = state.action_costs[action];
        match step(req, &state, action, NoiseMode::Free)? {
            StepResult::Next(next) => state = next,
            StepResult::Terminal { outcome, decisions } => {
                return Ok(RolloutTrace { decisions, costs, value: metrics::reward(&outcome, &weights) });
            }
        }
    }
}

/// Aggregate cost and return of greedy calibrated play over an eval set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyEval {
    pub costs: [f64; PHASES],
    pub ret: f64,
    pub requests: usize,
}

pub fn evaluate_policy(
    scorer: &impl StateScorer,
    lambda: &LambdaVector,
    reqs: &[SyntheticRequest],
) -> Result<PolicyEval> {
    if reqs.is_empty() {
        return Err(Error::config("empty evaluation set"));
    }
    let mut costs = [0.0; PHASES];
    let mut ret = 0.0;
    for req in reqs {
        let trace = greedy_rollout(scorer, lambda, req)?;
        for (total, c) in costs.iter_mut().zip(&trace.costs) {
            *total += c;
        }
        ret += trace.value;
    }
    Ok(PolicyEval { costs, ret, requests: reqs.len() })
}

/// Per-request search cache for one phase: the searched phase's q-values and
/// cost menu, plus, for each of its actions, the full-episode totals when
/// the other phases play greedily under their fixed multipliers. Probing a
/// new lambda is then an argmax per request instead of fresh rollouts.
struct PhaseCache {
    q: Vec<f64>,
    cost: Vec<f64>,
    totals: Vec<([f64; PHASES], f64)>,
}

fn build_phase_cache(
    scorer: &impl StateScorer,
    base: &LambdaVector,
    phase: Phase,
    reqs: &[SyntheticRequest],
) -> Result<Vec<PhaseCache>> {
    let weights = RewardWeights::default();
    let mut out = Vec::with_capacity(reqs.len());
    for req in reqs {
        let mut costs = [0.0; PHASES];
        let mut state = initial_state(req);
        while state.phase != phase {
            let q = scorer.q_values(req, &state)?;
            let action = argmax_calibrated(&q, &state.action_costs, base.get(state.phase))?;
            costs[state.phase.index()] = state.action_costs[action];
            match step(req, &state, action, NoiseMode::Free)? {
                StepResult::Next(next) => state = next,
                StepResult::Terminal { .. } => unreachable!("episode ended before phase"),
            }
        }
        let q = scorer.q_values(req, &state)?;
        let cost = state.action_costs.clone();
        let mut totals = Vec::with_capacity(cost.len());
        for (action, action_cost) in cost.iter().enumerate() {
            let mut tail_costs = costs;
            tail_costs[phase.index()] = *action_cost;
            let mut result = step(req, &state, action, NoiseMode::Free)?;
            let value = loop {
                match result {
                    StepResult::Next(next) => {
                        let q_tail = scorer.q_values(req, &next)?;
                        let a = argmax_calibrated(&q_tail, &next.action_costs, base.get(next.phase))?;
                        tail_costs[next.phase.index()] = next.action_costs[a];
                        result = step(req, &next, a, NoiseMode::Free)?;
                    }
                    StepResult::Terminal { outcome, .. } => break metrics::reward(&outcome, &weights),
                }
            };
            totals.push((tail_costs, value));
        }
        out.push(PhaseCache { q, cost, totals });
    }
    Ok(out)
}

fn cache_totals(cache: &[PhaseCache], lambda_t: f64) -> Result<([f64; PHASES], f64)> {
    let mut costs = [0.0; PHASES];
    let mut value = 0.0;
    for entry in cache {
        let a = argmax_calibrated(&entry.q, &entry.cost, lambda_t)?;
        let (c, v) = &entry.totals[a];
        for t in 0..PHASES {
            costs[t] += c[t];
        }
        value += v;
    }
    Ok((costs, value))
}

/// One evaluated multiplier during a phase search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbePoint {
    pub lambda: f64,
    /// Realized cost of the searched phase at this multiplier.
    pub cost: f64,
    pub value: f64,
}

/// Outcome of one phase's multiplier search.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSearch {
    pub phase: Phase,
    pub lambda: f64,
    pub utilization: f64,
    pub value: f64,
    pub converged: bool,
    pub used_grid: bool,
    pub probes: Vec<ProbePoint>,
}

/// Finds lambda for one phase so its realized cost meets `budget` within
/// `band`, holding the other phases' multipliers at `base`. Bisection over
/// the monotone cost curve; any detected non-monotonicity escalates to a
/// grid search that returns the best feasible probe.
pub fn bisect_phase(
    scorer: &impl StateScorer,
    reqs: &[SyntheticRequest],
    phase: Phase,
    budget: f64,
    base: &LambdaVector,
    band: f64,
) -> Result<PhaseSearch> {
    if reqs.is_empty() {
        return Err(Error::config("empty evaluation set"));
    }
    if !(budget > 0.0) {
        return Err(Error::config(format!("budget for {} phase must be > 0", phase.label())));
    }
    let cache = build_phase_cache(scorer, base, phase, reqs)?;
    let mut probes: Vec<ProbePoint> = Vec::new();
    let probe = |lambda: f64, probes: &mut Vec<ProbePoint>| -> Result<ProbePoint> {
        let (costs, value) = cache_totals(&cache, lambda)?;
        let p = ProbePoint { lambda, cost: costs[phase.index()], value };
        probes.push(p);
        Ok(p)
    };
    let in_band = |cost: f64| (cost / budget - 1.0).abs() <= band;
    let finish = |lambda: f64, cost: f64, value: f64, used_grid: bool, probes: Vec<ProbePoint>| PhaseSearch {
        phase,
        lambda,
        utilization: cost / budget,
        value,
        converged: in_band(cost) || cost <= budget * (1.0 + band),
        used_grid,
        probes,
    };

    let p0 = probe(0.0, &mut probes)?;
    if p0.cost <= budget * (1.0 + band) {
        // Constraint slack: the unconstrained policy already fits.
        return Ok(finish(0.0, p0.cost, p0.value, false, probes));
    }

    // Bracket: double until cost falls to budget or the curve bottoms out.
    let mut lo = 0.0;
    let mut lo_cost = p0.cost;
    let mut hi = 1.0;
    let mut hi_probe = probe(hi, &mut probes)?;
    let mut monotone = hi_probe.cost <= lo_cost;
    while hi_probe.cost > budget && probes.len() < MAX_PROBES {
        lo = hi;
        lo_cost = hi_probe.cost;
        hi *= 2.0;
        let next = probe(hi, &mut probes)?;
        if next.cost > hi_probe.cost {
            monotone = false;
        }
        hi_probe = next;
        if hi > 1e12 {
            break;
        }
    }
    if monotone && hi_probe.cost > budget * (1.0 + band) {
        // Non-bracketing: even huge multipliers cannot reach the budget
        // (the minimal-cost policy overspends). Return the boundary, flagged.
        let mut search = finish(hi, hi_probe.cost, hi_probe.value, false, probes);
        search.converged = false;
        return Ok(search);
    }

    if monotone {
        if in_band(hi_probe.cost) {
            return Ok(finish(hi, hi_probe.cost, hi_probe.value, false, probes));
        }
        let mut best_feasible: Option<ProbePoint> = probes
            .iter()
            .copied()
            .filter(|p| p.cost <= budget * (1.0 + band))
            .max_by(|a, b| a.value.partial_cmp(&b.value).unwrap());
        let mut hi_l = hi;
        while probes.len() < MAX_PROBES {
            let mid = 0.5 * (lo + hi_l);
            let p = probe(mid, &mut probes)?;
            if p.cost > lo_cost + 1e-9 * lo_cost.abs().max(1.0) {
                monotone = false;
                break;
            }
            if in_band(p.cost) {
                return Ok(finish(mid, p.cost, p.value, false, probes));
            }
            if p.cost > budget {
                lo = mid;
                lo_cost = p.cost;
            } else {
                hi_l = mid;
                if best_feasible.is_none_or(|b| p.value > b.value) {
                    best_feasible = Some(p);
                }
            }
        }
        if monotone {
            let best = best_feasible.expect("bracketed search keeps a feasible endpoint");
            return Ok(finish(best.lambda, best.cost, best.value, false, probes));
        }
    }

    // Non-monotone cost curve: fall back to a grid and keep the feasible
    // probe with the highest value.
    let span = hi.max(1.0);
    let points = 33usize;
    for i in 0..=points {
        probe(span * i as f64 / points as f64, &mut probes)?;
    }
    let best = probes
        .iter()
        .copied()
        .filter(|p| p.cost <= budget * (1.0 + band))
        .max_by(|a, b| a.value.partial_cmp(&b.value).unwrap())
        .ok_or_else(|| Error::unconverged(format!("no feasible multiplier for {} phase", phase.label())))?;
    Ok(finish(best.lambda, best.cost, best.value, true, probes))
}

/// Correction outcome for one time slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceCorrection {
    pub slice: usize,
    pub requests: usize,
    pub lambda: LambdaVector,
    pub utilization: [f64; PHASES],
    pub ret: f64,
    /// |final utilization - search-time utilization| per phase.
    pub drift: [f64; PHASES],
    pub searches: Vec<PhaseSearch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionResult {
    pub slices: Vec<SliceCorrection>,
    pub table: LambdaTable,
    pub converged: bool,
}

/// Corrects every time slice: phases in decision order, each phase's search
/// holding earlier phases at their corrected multipliers and later phases at
/// `initial`. Slices without traffic keep `initial` untouched.
pub fn correct_all(
    scorer: &impl StateScorer,
    reqs: &[SyntheticRequest],
    budgets: &BudgetSpec,
    slices: usize,
    initial: &LambdaVector,
    band: f64,
) -> Result<CorrectionResult> {
    if slices == 0 {
        return Err(Error::config("need at least one time slice"));
    }
    budgets.validate()?;
    let mut by_slice: Vec<Vec<&SyntheticRequest>> = vec![Vec::new(); slices];
    for req in reqs {
        if req.time_slice >= slices {
            return Err(Error::config(format!(
                "request {} sits in slice {} but only {} slices are covered",
                req.id, req.time_slice, slices
            )));
        }
        by_slice[req.time_slice].push(req);
    }

    let mut out = Vec::with_capacity(slices);
    let mut table = Vec::with_capacity(slices);
    let mut converged = true;
    for (slice, slice_reqs) in by_slice.iter().enumerate() {
        if slice_reqs.is_empty() {
            table.push(*initial);
            continue;
        }
        let owned: Vec<SyntheticRequest> = slice_reqs.iter().map(|r| (*r).clone()).collect();
        let slice_budgets = budgets.slice_budgets(slice, owned.len())?;
        let mut lambda = *initial;
        let mut searches = Vec::with_capacity(PHASES);
        for phase in Phase::ALL {
            let search = bisect_phase(scorer, &owned, phase, slice_budgets[phase.index()], &lambda, band)?;
            lambda.set(phase, search.lambda)?;
            converged &= search.converged;
            searches.push(search);
        }
        let eval = evaluate_policy(scorer, &lambda, &owned)?;
        let mut utilization = [0.0; PHASES];
        let mut drift = [0.0; PHASES];
        for t in 0..PHASES {
            utilization[t] = eval.costs[t] / slice_budgets[t];
            drift[t] = (utilization[t] - searches[t].utilization).abs();
        }
        table.push(lambda);
        out.push(SliceCorrection {
            slice,
            requests: owned.len(),
            lambda,
            utilization,
            ret: eval.ret,
            drift,
            searches,
        });
    }
    Ok(CorrectionResult { slices: out, table: LambdaTable { per_slice: table }, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ActionSpaceSpec;
    use crate::sim::{generate_dataset, EnvConfig};

    fn small_env(seed: u64) -> Vec<SyntheticRequest> {
        let cfg = EnvConfig {
            requests: 240,
            slices: 1,
            violation_fraction: 0.0,
            seed,
            ..EnvConfig::default()
        };
        generate_dataset(&cfg).unwrap()
    }

    use crate::sim::testkit::menu_request;

    #[test]
    fn huge_lambda_buys_the_minimal_cost_policy() {
        let reqs = small_env(11);
        let lambda = LambdaVector::new([1e12; PHASES]).unwrap();
        let eval = evaluate_policy(&OracleScorer, &lambda, &reqs).unwrap();
        let mut expected = [0.0; PHASES];
        for req in &reqs {
            for phase in Phase::ALL {
                let min = req.costs(phase).iter().copied().fold(f64::INFINITY, f64::min);
                expected[phase.index()] += min;
            }
        }
        for t in 0..PHASES {
            assert!((eval.costs[t] - expected[t]).abs() < 1e-9, "phase {t}");
        }
    }

    #[test]
    fn zero_lambda_is_unconstrained_greedy() {
        let reqs = small_env(12);
        let eval = evaluate_policy(&OracleScorer, &LambdaVector::zero(), &reqs).unwrap();
        // The oracle at lambda 0 takes the value-maximal path; return must be
        // the sum of each request's ceiling.
        let expected: f64 = reqs.iter().map(|r| r.max_joint_value()).sum();
        assert!((eval.ret - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn cost_and_return_fall_as_lambda_rises() {
        let reqs = small_env(13);
        for phase in Phase::ALL {
            let mut prev_cost = f64::INFINITY;
            let mut prev_ret = f64::INFINITY;
            for i in 0..30 {
                let mut lambda = LambdaVector::zero();
                lambda.set(phase, 0.3 * i as f64).unwrap();
                let eval = evaluate_policy(&OracleScorer, &lambda, &reqs).unwrap();
                let c = eval.costs[phase.index()];
                assert!(c <= prev_cost + 1e-9, "{} cost rose at probe {i}", phase.label());
                assert!(eval.ret <= prev_ret + 1e-9, "{} return rose at probe {i}", phase.label());
                prev_cost = c;
                prev_ret = eval.ret;
            }
        }
    }

    #[test]
    fn slack_budget_keeps_lambda_zero() {
        let reqs = small_env(14);
        let unconstrained = evaluate_policy(&OracleScorer, &LambdaVector::zero(), &reqs).unwrap();
        let budget = unconstrained.costs[Phase::Queue.index()] * 2.0;
        let search =
            bisect_phase(&OracleScorer, &reqs, Phase::Queue, budget, &LambdaVector::zero(), DEFAULT_BAND)
                .unwrap();
        assert_eq!(search.lambda, 0.0);
        assert!(search.converged);
        assert!(search.utilization <= 1.0 + DEFAULT_BAND);
    }

    #[test]
    fn bisection_lands_within_one_step_of_the_oracle_crossing() {
        // Two-action step curve: request i switches from cost 1 to cost 0 at
        // lambda_i = value gap; total cost is a known staircase in lambda.
        let gaps = [0.4, 0.9, 1.7, 2.6, 3.5, 4.4, 5.3, 6.2, 7.1, 8.0];
        let reqs: Vec<SyntheticRequest> = gaps
            .iter()
            .enumerate()
            .map(|(i, gap)| {
                menu_request(i as u64, Phase::Queue, vec![0.0, 1.0], vec![0.5, 0.5 + gap / 10.0], 10.0)
            })
            .collect();
        let budget = 4.0; // in band only once six requests have dropped out
        let search =
            bisect_phase(&OracleScorer, &reqs, Phase::Queue, budget, &LambdaVector::zero(), DEFAULT_BAND)
                .unwrap();
        assert!(search.probes.len() <= MAX_PROBES);
        // Brute-force the crossing on a fine grid.
        let mut oracle = f64::INFINITY;
        let mut l = 0.0;
        while l < 12.0 {
            let cost: f64 = gaps.iter().map(|g| if *g >= l { 1.0 } else { 0.0 }).sum();
            if cost <= budget {
                oracle = l;
                break;
            }
            l += 1e-3;
        }
        // Steps sit 0.9 apart; the landing lambda must be within one step.
        assert!(search.lambda >= oracle - 1e-3 && search.lambda <= oracle + 0.9 + 1e-3,
            "landed {} vs oracle crossing {}", search.lambda, oracle);
        assert!(search.utilization <= 1.0 + DEFAULT_BAND);
    }

    #[test]
    fn unreachable_budget_returns_flagged_boundary() {
        // Minimal cost is 2 per request; budget of 1 per request cannot be met.
        let reqs: Vec<SyntheticRequest> =
            (0..5).map(|i| menu_request(i, Phase::Model, vec![2.0, 4.0], vec![0.6, 1.0], 5.0)).collect();
        let search =
            bisect_phase(&OracleScorer, &reqs, Phase::Model, 5.0, &LambdaVector::zero(), DEFAULT_BAND)
                .unwrap();
        assert!(!search.converged);
        assert!(search.utilization > 1.0 + DEFAULT_BAND);
    }

    #[test]
    fn probe_costs_never_rise_with_lambda() {
        let reqs = small_env(15);
        let unconstrained = evaluate_policy(&OracleScorer, &LambdaVector::zero(), &reqs).unwrap();
        for phase in Phase::ALL {
            let budget = unconstrained.costs[phase.index()] * 0.7;
            let search =
                bisect_phase(&OracleScorer, &reqs, phase, budget, &LambdaVector::zero(), DEFAULT_BAND)
                    .unwrap();
            let mut sorted = search.probes.clone();
            sorted.sort_by(|a, b| a.lambda.partial_cmp(&b.lambda).unwrap());
            for w in sorted.windows(2) {
                assert!(w[1].cost <= w[0].cost + 1e-9, "{} phase", phase.label());
            }
            assert!(!search.used_grid);
        }
    }

    #[test]
    fn correct_all_meets_band_on_every_phase() {
        let reqs = small_env(16);
        let unconstrained = evaluate_policy(&OracleScorer, &LambdaVector::zero(), &reqs).unwrap();
        let n = reqs.len();
        let budgets = BudgetSpec::from_rates([
            unconstrained.costs[0] * 0.7 / n as f64,
            unconstrained.costs[1] * 0.7 / n as f64,
            unconstrained.costs[2] * 0.7 / n as f64,
        ]);
        let result =
            correct_all(&OracleScorer, &reqs, &budgets, 1, &LambdaVector::zero(), DEFAULT_BAND).unwrap();
        assert!(result.converged);
        let slice = &result.slices[0];
        for t in 0..PHASES {
            assert!(
                slice.utilization[t] <= 1.0 + DEFAULT_BAND,
                "phase {t} at {:.4}",
                slice.utilization[t]
            );
            // Later-phase corrections must not move earlier phases.
            assert!(slice.drift[t] < 1e-12, "phase {t} drifted {}", slice.drift[t]);
        }
    }

    #[test]
    fn equal_absolute_budgets_give_heavier_slice_larger_lambda() {
        let mut reqs = small_env(17);
        // 2:1 traffic split with identical absolute budgets per slice.
        for (i, req) in reqs.iter_mut().enumerate() {
            req.time_slice = if i % 3 == 2 { 1 } else { 0 };
        }
        let heavy: Vec<SyntheticRequest> =
            reqs.iter().filter(|r| r.time_slice == 0).cloned().collect();
        let light_count = reqs.len() - heavy.len();
        let light_eval = evaluate_policy(
            &OracleScorer,
            &LambdaVector::zero(),
            &reqs.iter().filter(|r| r.time_slice == 1).cloned().collect::<Vec<_>>(),
        )
        .unwrap();
        // Budget: 80% of the light slice's unconstrained cost, both slices.
        let row = [
            light_eval.costs[0] * 0.8,
            light_eval.costs[1] * 0.8,
            light_eval.costs[2] * 0.8,
        ];
        let budgets = BudgetSpec {
            per_request_rates: [
                row[0] / light_count as f64,
                row[1] / light_count as f64,
                row[2] / light_count as f64,
            ],
            per_slice: Some(vec![row, row]),
        };
        let result =
            correct_all(&OracleScorer, &reqs, &budgets, 2, &LambdaVector::zero(), DEFAULT_BAND).unwrap();
        assert_eq!(result.slices.len(), 2);
        let l0 = result.slices[0].lambda.as_array();
        let l1 = result.slices[1].lambda.as_array();
        assert!(heavy.len() > light_count);
        for t in 0..PHASES {
            assert!(
                l0[t] >= l1[t] - 1e-9,
                "phase {t}: heavy lambda {} < light lambda {}",
                l0[t],
                l1[t]
            );
        }
    }

    #[test]
    fn correction_is_deterministic() {
        let reqs = small_env(18);
        let unconstrained = evaluate_policy(&OracleScorer, &LambdaVector::zero(), &reqs).unwrap();
        let n = reqs.len() as f64;
        let budgets = BudgetSpec::from_rates([
            unconstrained.costs[0] * 0.75 / n,
            unconstrained.costs[1] * 0.75 / n,
            unconstrained.costs[2] * 0.75 / n,
        ]);
        let a = correct_all(&OracleScorer, &reqs, &budgets, 1, &LambdaVector::zero(), DEFAULT_BAND).unwrap();
        let b = correct_all(&OracleScorer, &reqs, &budgets, 1, &LambdaVector::zero(), DEFAULT_BAND).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn net_scorer_matches_manual_forward() {
        let reqs = small_env(19);
        let space = ActionSpaceSpec { channel_count: 2, model_count: 3, ..ActionSpaceSpec::default() };
        let enc = EncodingSpec::new(24, space);
        let params = QNetworkParams::init(enc.len(), &[16, 8], 2, [4, 26, 3], 7).unwrap();
        let scorer = NetScorer { params: &params, encoding: &enc };
        let state = initial_state(&reqs[0]);
        let q = scorer.q_values(&reqs[0], &state).unwrap();
        let manual = params.forward(&enc.encode(&state).unwrap(), Phase::Channel).unwrap();
        assert_eq!(q, manual);
    }
}
