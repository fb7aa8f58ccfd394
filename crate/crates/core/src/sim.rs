//! Synthetic three-phase environment with oracle-checkable ground truth.
//!
//! Each generated request carries explicit per-phase cost menus and value
//! factors. The joint value of a decision path (a_1, a_2, a_3) is
//! `v_i * g_1(a_1) * g_2(a_2) * g_3(a_3)` where each factor is
//! `(cost_t(a) / max cost_t)^{p_t}` with a per-request exponent `p_t` in (0,1).
//! That construction makes phase value monotone concave in phase cost, so the
//! monotone-value and diminishing-returns assumptions hold by construction for
//! conforming requests; a configurable fraction gets an injected value dip to
//! exercise the non-conforming paths. Channel strategy 0 retrieves nothing and
//! has cost 0, hence factor 0: downstream value collapses regardless of later
//! actions.
//!
//! Evaluation uses noise-free expected revenue; data collection can add
//! bounded, mean-one multiplicative noise keyed by (request, decision path) so
//! replays are deterministic.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    strategy_indicator, ActionSpaceSpec, Phase, RevenueOutcome, PHASES,
};
use crate::error::{Error, Result};
use crate::rng::{item_rng, mix};

pub const USER_DIM: usize = 4;
pub const CONTEXT_DIM: usize = 4;

/// Upper bound used to normalize retrieved-pool counts in state encodings.
const POOL_NORM: f64 = 400.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Number of requests M in the generated set.
    pub requests: usize,
    /// Number of time slices S the traffic is spread over.
    pub slices: usize,
    /// Relative amplitude of the sinusoidal traffic profile, in [0, 1).
    pub traffic_amplitude: f64,
    pub action_space: ActionSpaceSpec,
    /// Range (lo, hi) of the per-request value-curve exponents, inside (0, 1).
    pub exponent_range: (f64, f64),
    /// Fraction of requests generated with an assumption-violating value dip.
    pub violation_fraction: f64,
    /// Half-width of the bounded multiplicative revenue noise.
    pub revenue_noise: f64,
    /// Median scale of per-request base value.
    pub value_scale: f64,
    /// Spread of base value driven by observable user features.
    pub value_spread: f64,
    /// Extra lognormal value spread from a latent (unobservable) draw.
    pub value_noise: f64,
    /// Per-channel unit costs; length must equal `action_space.channel_count`.
    pub channel_base_costs: Vec<f64>,
    /// Per-request multiplicative jitter half-widths on phase costs.
    pub channel_cost_jitter: f64,
    pub queue_unit_jitter: f64,
    /// Model-phase cost curve: model 0 is free, model k costs
    /// `model_cost_base * growth^(k-1)` before per-request jitter.
    pub model_cost_base: f64,
    pub model_cost_growth: f64,
    pub model_cost_jitter: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        // Reference experiment env. Two retrieval channels and three models
        // (richer than the minimal action-space default) so that a fixed rule
        // can anchor budgets at 100% while the maximal policy runs ~2x over.
        EnvConfig {
            requests: 10_000,
            slices: 24,
            traffic_amplitude: 0.4,
            action_space: ActionSpaceSpec {
                channel_count: 2,
                model_count: 3,
                ..ActionSpaceSpec::default()
            },
            exponent_range: (0.3, 0.9),
            violation_fraction: 0.05,
            revenue_noise: 0.1,
            value_scale: 8.0,
            value_spread: 1.2,
            value_noise: 0.25,
            channel_base_costs: vec![1.0, 1.2],
            channel_cost_jitter: 0.2,
            queue_unit_jitter: 0.1,
            model_cost_base: 1.0,
            model_cost_growth: 2.0,
            model_cost_jitter: 0.2,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.action_space.validate()?;
        if !(0.0..1.0).contains(&self.traffic_amplitude) {
            return Err(Error::config("traffic_amplitude must be in [0, 1)"));
        }
        let (lo, hi) = self.exponent_range;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return Err(Error::config(format!(
                "exponent_range must satisfy 0 < lo <= hi < 1, got ({lo}, {hi})"
            )));
        }
        if !(0.0..1.0).contains(&self.violation_fraction) {
            return Err(Error::config("violation_fraction must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.revenue_noise) {
            return Err(Error::config("revenue_noise must be in [0, 1)"));
        }
        if self.slices == 0 {
            return Err(Error::config("slices must be >= 1"));
        }
        if self.channel_base_costs.len() != self.action_space.channel_count {
            return Err(Error::config(format!(
                "channel_base_costs has {} entries for {} channels",
                self.channel_base_costs.len(),
                self.action_space.channel_count
            )));
        }
        if self.channel_base_costs.iter().any(|c| !c.is_finite() || *c <= 0.0) {
            return Err(Error::config("channel_base_costs must be > 0"));
        }
        for (name, v) in [
            ("channel_cost_jitter", self.channel_cost_jitter),
            ("queue_unit_jitter", self.queue_unit_jitter),
            ("model_cost_jitter", self.model_cost_jitter),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must be in [0, 1)")));
            }
        }
        if self.value_scale <= 0.0 || self.model_cost_base <= 0.0 {
            return Err(Error::config("value_scale and model_cost_base must be > 0"));
        }
        if self.action_space.model_count > 1 && self.model_cost_growth <= 1.0 {
            return Err(Error::config("model_cost_growth must be > 1"));
        }
        Ok(())
    }

    /// Requests per slice: sinusoid over the day, scaled to sum to `requests`
    /// by largest-remainder rounding.
    pub fn traffic_profile(&self) -> Vec<usize> {
        let s = self.slices;
        let weights: Vec<f64> = (0..s)
            .map(|i| 1.0 + self.traffic_amplitude * (2.0 * std::f64::consts::PI * i as f64 / s as f64).sin())
            .collect();
        let total: f64 = weights.iter().sum();
        let ideal: Vec<f64> = weights.iter().map(|w| self.requests as f64 * w / total).collect();
        let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
        let mut remainder = self.requests - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| {
            let fa = ideal[a] - ideal[a].floor();
            let fb = ideal[b] - ideal[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &i in &order {
            if remainder == 0 {
                break;
            }
            counts[i] += 1;
            remainder -= 1;
        }
        counts
    }
}

/// One simulated request with its ground-truth value/cost structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRequest {
    pub id: u64,
    pub time_slice: usize,
    pub user: [f64; USER_DIM],
    pub context: [f64; CONTEXT_DIM],
    /// Joint value of the maximal path for a conforming request.
    pub base_value: f64,
    /// Fraction of value booked as advertising fee; the rest is order price.
    pub fee_share: f64,
    pub exponents: [f64; PHASES],
    /// Candidate-pool size contributed by each retrieval channel.
    pub channel_pools: Vec<u32>,
    /// Items per queue bucket; bucket b requests (b+1)*width items.
    pub queue_bucket_width: u32,
    /// Per-phase cost menus, indexed by action.
    pub phase_costs: [Vec<f64>; PHASES],
    /// Per-phase value factors in [0, 1], indexed by action.
    pub phase_factors: [Vec<f64>; PHASES],
    pub noise_seed: u64,
}

impl SyntheticRequest {
    pub fn costs(&self, phase: Phase) -> &[f64] {
        &self.phase_costs[phase.index()]
    }

    pub fn factor(&self, phase: Phase, action: usize) -> f64 {
        self.phase_factors[phase.index()][action]
    }

    pub fn cost(&self, phase: Phase, action: usize) -> f64 {
        self.phase_costs[phase.index()][action]
    }

    /// Per-phase value array with the other phases held at their value-maximal
    /// actions.
    pub fn values(&self, phase: Phase) -> Vec<f64> {
        let other: f64 = Phase::ALL
            .iter()
            .filter(|p| **p != phase)
            .map(|p| self.max_factor(*p))
            .product();
        self.phase_factors[phase.index()]
            .iter()
            .map(|g| self.base_value * g * other)
            .collect()
    }

    fn max_factor(&self, phase: Phase) -> f64 {
        self.phase_factors[phase.index()].iter().copied().fold(0.0, f64::max)
    }

    /// Noise-free joint value of a full decision path.
    pub fn joint_value(&self, decisions: &[usize; PHASES]) -> f64 {
        self.base_value
            * self.factor(Phase::Channel, decisions[0])
            * self.factor(Phase::Queue, decisions[1])
            * self.factor(Phase::Model, decisions[2])
    }

    /// Value of the all-maximal path (the ceiling for conforming requests).
    pub fn max_joint_value(&self) -> f64 {
        self.base_value * Phase::ALL.iter().map(|p| self.max_factor(*p)).product::<f64>()
    }
}

/// The MDP state at one phase of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub phase: Phase,
    pub request_id: u64,
    pub time_slice: usize,
    pub user: [f64; USER_DIM],
    pub context: [f64; CONTEXT_DIM],
    /// Candidates retrieved by the channel decision; 0 before it.
    pub retrieved_count: u32,
    /// Candidates surviving truncation; 0 before the queue decision.
    pub truncated_count: u32,
    /// Quality of the surviving list: product of the value factors of the
    /// decisions taken so far.
    pub pool_quality: f64,
    /// Decisions taken so far; length always equals `phase.index()`.
    pub decisions: Vec<usize>,
    /// Cost menu of the current phase (CR units per action).
    pub action_costs: Vec<f64>,
}

/// Result of stepping one decision.
#[derive(Debug, Clone, PartialEq)]
pub enum StepResult {
    Next(PhaseState),
    Terminal { outcome: RevenueOutcome, decisions: [usize; PHASES] },
}

/// Revenue-noise switch for `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Noise-free expected revenue (evaluation default).
    Free,
    /// Bounded mean-one multiplicative noise with the given half-width.
    Bounded(f64),
}

pub fn initial_state(req: &SyntheticRequest) -> PhaseState {
    PhaseState {
        phase: Phase::Channel,
        request_id: req.id,
        time_slice: req.time_slice,
        user: req.user,
        context: req.context,
        retrieved_count: 0,
        truncated_count: 0,
        pool_quality: 0.0,
        decisions: Vec::new(),
        action_costs: req.costs(Phase::Channel).to_vec(),
    }
}

/// Cost of taking `action` in `state`; a pure function of (request, phase,
/// action), identical whatever actions preceded it.
pub fn action_cost(req: &SyntheticRequest, state: &PhaseState, action: usize) -> Result<f64> {
    if state.request_id != req.id {
        return Err(Error::config("state does not belong to this request"));
    }
    let menu = req.costs(state.phase);
    menu.get(action).copied().ok_or_else(|| {
        Error::config(format!(
            "action {action} out of range for {} phase ({} actions)",
            state.phase.label(),
            menu.len()
        ))
    })
}

/// Advance one decision. Channel selects the retrieved pool, queue truncates
/// it, and the model decision closes the episode with a revenue outcome.
pub fn step(
    req: &SyntheticRequest,
    state: &PhaseState,
    action: usize,
    noise: NoiseMode,
) -> Result<StepResult> {
    if state.request_id != req.id {
        return Err(Error::config("state does not belong to this request"));
    }
    let menu_len = req.costs(state.phase).len();
    if action >= menu_len {
        return Err(Error::config(format!(
            "action {action} out of range for {} phase ({menu_len} actions)",
            state.phase.label()
        )));
    }

    let mut next = state.clone();
    next.decisions.push(action);
    next.pool_quality = if state.phase == Phase::Channel {
        req.factor(Phase::Channel, action)
    } else {
        state.pool_quality * req.factor(state.phase, action)
    };

    match state.phase {
        Phase::Channel => {
            let channels = strategy_indicator(action as u64, req.channel_pools.len())?;
            next.retrieved_count = channels
                .iter()
                .zip(&req.channel_pools)
                .filter(|(on, _)| **on)
                .map(|(_, n)| *n)
                .sum();
            next.phase = Phase::Queue;
            next.action_costs = req.costs(Phase::Queue).to_vec();
            Ok(StepResult::Next(next))
        }
        Phase::Queue => {
            // Truncation length is what the queue decision requests; the
            // surviving count is additionally capped by the retrieved pool.
            let requested = (action as u32 + 1) * req.queue_bucket_width;
            next.truncated_count = requested.min(next.retrieved_count);
            next.phase = Phase::Model;
            next.action_costs = req.costs(Phase::Model).to_vec();
            Ok(StepResult::Next(next))
        }
        Phase::Model => {
            let decisions = [next.decisions[0], next.decisions[1], next.decisions[2]];
            let value = req.joint_value(&decisions);
            let factor = match noise {
                NoiseMode::Free => 1.0,
                NoiseMode::Bounded(scale) => {
                    let path = (decisions[0] as u64) << 42
                        | (decisions[1] as u64) << 21
                        | decisions[2] as u64;
                    let mut rng = item_rng(req.noise_seed, "revenue", mix(path));
                    1.0 + scale * (2.0 * rng.gen::<f64>() - 1.0)
                }
            };
            let noisy = value * factor;
            Ok(StepResult::Terminal {
                outcome: RevenueOutcome {
                    fee_ad: req.fee_share * noisy,
                    price_o: (1.0 - req.fee_share) * noisy,
                },
                decisions,
            })
        }
    }
}

/// Per-phase (Assumption 1, Assumption 2) verdicts: value monotone
/// non-decreasing in cost, and value/cost non-increasing in cost (checked on
/// positive-cost actions; a zero-cost action has zero value by construction
/// and an undefined ratio).
pub fn check_assumptions(req: &SyntheticRequest) -> [(bool, bool); PHASES] {
    let mut out = [(true, true); PHASES];
    for phase in Phase::ALL {
        let costs = req.costs(phase);
        let values: Vec<f64> = req.phase_factors[phase.index()]
            .iter()
            .map(|g| req.base_value * g)
            .collect();
        let mut order: Vec<usize> = (0..costs.len()).collect();
        order.sort_by(|&a, &b| costs[a].partial_cmp(&costs[b]).unwrap().then(a.cmp(&b)));

        let mut monotone = true;
        let mut diminishing = true;
        let mut prev_value: Option<f64> = None;
        let mut prev_ratio: Option<f64> = None;
        for &i in &order {
            if let Some(pv) = prev_value {
                if values[i] < pv - 1e-9 {
                    monotone = false;
                }
            }
            prev_value = Some(prev_value.map_or(values[i], |pv| pv.max(values[i])));
            if costs[i] > 0.0 {
                let ratio = values[i] / costs[i];
                if let Some(pr) = prev_ratio {
                    if ratio > pr * (1.0 + 1e-9) + 1e-12 {
                        diminishing = false;
                    }
                }
                prev_ratio = Some(ratio);
            }
        }
        out[phase.index()] = (monotone, diminishing);
    }
    out
}

/// Deterministic request factory. Per-request streams are derived from
/// (seed, id), so the content of a request never depends on how many other
/// requests were generated before it.
pub fn generate_dataset(cfg: &EnvConfig) -> Result<Vec<SyntheticRequest>> {
    cfg.validate()?;
    let counts = cfg.traffic_profile();
    let mut requests = Vec::with_capacity(cfg.requests);
    let mut id: u64 = 0;
    for (slice, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            requests.push(generate_request(cfg, id, slice));
            id += 1;
        }
    }
    Ok(requests)
}

fn generate_request(cfg: &EnvConfig, id: u64, slice: usize) -> SyntheticRequest {
    let spec = &cfg.action_space;
    let mut rng = item_rng(cfg.seed, "request", id);

    let mut user = [0.0; USER_DIM];
    for u in &mut user {
        *u = rng.gen::<f64>();
    }
    let mut context = [0.0; CONTEXT_DIM];
    for c in &mut context {
        *c = rng.gen::<f64>();
    }
    let z: f64 = StandardNormal.sample(&mut rng);
    let base_value =
        cfg.value_scale * (cfg.value_spread * (user[0] + user[1] - 1.0) + cfg.value_noise * z).exp();
    let fee_share = 0.2 + 0.6 * user[2];

    let (lo, hi) = cfg.exponent_range;
    let exponents = [
        lo + (hi - lo) * context[0],
        lo + (hi - lo) * context[1],
        lo + (hi - lo) * context[2],
    ];

    let channel_scale = 1.0 + cfg.channel_cost_jitter * (2.0 * context[3] - 1.0);
    let queue_unit = 1.0 + cfg.queue_unit_jitter * (2.0 * user[3] - 1.0);
    let model_scale = 1.0 + cfg.model_cost_jitter * (2.0 * rng.gen::<f64>() - 1.0);

    let channel_pools: Vec<u32> =
        (0..spec.channel_count).map(|_| rng.gen_range(40..=160)).collect();

    let n_c = spec.channel_strategies();
    let mut channel_costs = Vec::with_capacity(n_c);
    for s in 0..n_c {
        let mut cost = 0.0;
        for (ch, base) in cfg.channel_base_costs.iter().enumerate() {
            if (s >> (spec.channel_count - 1 - ch)) & 1 == 1 {
                cost += base;
            }
        }
        channel_costs.push(channel_scale * cost);
    }

    let queue_costs: Vec<f64> = (0..spec.queue_buckets)
        .map(|b| queue_unit * f64::from(spec.queue_bucket_width * (b as u32 + 1)))
        .collect();

    let model_costs: Vec<f64> = (0..spec.model_count)
        .map(|k| {
            if k == 0 {
                0.0
            } else {
                cfg.model_cost_base * model_scale * cfg.model_cost_growth.powi(k as i32 - 1)
            }
        })
        .collect();

    let phase_costs = [channel_costs, queue_costs, model_costs];
    let mut phase_factors: [Vec<f64>; PHASES] = Default::default();
    for (t, costs) in phase_costs.iter().enumerate() {
        let max = costs.iter().copied().fold(0.0, f64::max);
        phase_factors[t] = costs
            .iter()
            .map(|c| if max > 0.0 { (c / max).powf(exponents[t]) } else { 1.0 })
            .collect();
    }

    let noise_seed: u64 = rng.gen();

    // Assumption-violating requests get one phase's highest-cost action dipped
    // below its runner-up, breaking value monotonicity there.
    let violate = rng.gen::<f64>() < cfg.violation_fraction;
    if violate {
        let eligible: Vec<usize> = (0..PHASES)
            .filter(|&t| phase_costs[t].iter().filter(|c| **c > 0.0).count() >= 2)
            .collect();
        if !eligible.is_empty() {
            let t = eligible[rng.gen_range(0..eligible.len())];
            let dip = 0.3 + 0.5 * rng.gen::<f64>();
            let costs = &phase_costs[t];
            let mut order: Vec<usize> = (0..costs.len()).collect();
            order.sort_by(|&a, &b| costs[a].partial_cmp(&costs[b]).unwrap());
            let top = order[costs.len() - 1];
            let runner_up = order[costs.len() - 2];
            phase_factors[t][top] = phase_factors[t][runner_up] * dip;
        }
    }

    SyntheticRequest {
        id,
        time_slice: slice,
        user,
        context,
        base_value,
        fee_share,
        exponents,
        channel_pools,
        queue_bucket_width: spec.queue_bucket_width,
        phase_costs,
        phase_factors,
        noise_seed,
    }
}

/// Shape of the fixed-length state encoding fed to function approximators:
/// `[phase one-hot | user | context | slice one-hot | list summary | decision one-hots]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub slices: usize,
    pub action_space: ActionSpaceSpec,
}

impl EncodingSpec {
    pub fn new(slices: usize, action_space: ActionSpaceSpec) -> Self {
        EncodingSpec { slices, action_space }
    }

    pub fn len(&self) -> usize {
        PHASES
            + USER_DIM
            + CONTEXT_DIM
            + self.slices
            + 3
            + self.action_space.channel_strategies()
            + self.action_space.queue_buckets
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, state: &PhaseState) -> Result<Vec<f64>> {
        if state.time_slice >= self.slices {
            return Err(Error::config(format!(
                "state slice {} out of range for {} slices",
                state.time_slice, self.slices
            )));
        }
        let mut x = Vec::with_capacity(self.len());
        for t in 0..PHASES {
            x.push(if t == state.phase.index() { 1.0 } else { 0.0 });
        }
        x.extend_from_slice(&state.user);
        x.extend_from_slice(&state.context);
        for s in 0..self.slices {
            x.push(if s == state.time_slice { 1.0 } else { 0.0 });
        }
        let max_len =
            f64::from(self.action_space.queue_bucket_width) * self.action_space.queue_buckets as f64;
        x.push(f64::from(state.retrieved_count) / POOL_NORM);
        x.push(f64::from(state.truncated_count) / max_len);
        x.push(state.pool_quality);
        let n_c = self.action_space.channel_strategies();
        for a in 0..n_c {
            x.push(if !state.decisions.is_empty() && state.decisions[0] == a { 1.0 } else { 0.0 });
        }
        for a in 0..self.action_space.queue_buckets {
            x.push(if state.decisions.len() > 1 && state.decisions[1] == a { 1.0 } else { 0.0 });
        }
        debug_assert_eq!(x.len(), self.len());
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("state encoding contains non-finite values"));
        }
        Ok(x)
    }
}

/// Rolls one request to termination under a fixed decision triple.
pub fn rollout(
    req: &SyntheticRequest,
    decisions: &[usize; PHASES],
    noise: NoiseMode,
) -> Result<(RevenueOutcome, [f64; PHASES])> {
    let mut state = initial_state(req);
    let mut costs = [0.0; PHASES];
    for (t, &a) in decisions.iter().enumerate() {
        costs[t] = action_cost(req, &state, a)?;
        match step(req, &state, a, noise)? {
            StepResult::Next(s) => state = s,
            StepResult::Terminal { outcome, .. } => {
                return Ok((outcome, costs));
            }
        }
    }
    Err(Error::config("decision triple did not terminate the episode"))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::reward;
    use crate::domain::RewardWeights;

    fn small_cfg() -> EnvConfig {
        EnvConfig {
            requests: 50,
            slices: 4,
            action_space: ActionSpaceSpec {
                channel_count: 1,
                queue_buckets: 3,
                model_count: 2,
                ..ActionSpaceSpec::default()
            },
            channel_base_costs: vec![1.0],
            violation_fraction: 0.0,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        EnvConfig::default().validate().unwrap();
    }

    #[test]
    fn traffic_profile_sums_and_varies() {
        let cfg = EnvConfig { requests: 1000, ..EnvConfig::default() };
        let counts = cfg.traffic_profile();
        assert_eq!(counts.len(), 24);
        assert_eq!(counts.iter().sum::<usize>(), 1000);
        assert!(counts.iter().max() > counts.iter().min());
    }

    #[test]
    fn conforming_dataset_passes_checker() {
        let cfg = EnvConfig {
            requests: 1000,
            violation_fraction: 0.0,
            seed: 7,
            ..EnvConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        assert_eq!(data.len(), 1000);
        for req in &data {
            let verdicts = check_assumptions(req);
            assert!(verdicts.iter().all(|(a1, a2)| *a1 && *a2), "request {} failed", req.id);
        }
    }

    #[test]
    fn violation_fraction_shows_up_in_checker() {
        let cfg = EnvConfig {
            requests: 1000,
            violation_fraction: 0.1,
            seed: 7,
            ..EnvConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let passing = data
            .iter()
            .filter(|r| check_assumptions(r).iter().all(|(a1, a2)| *a1 && *a2))
            .count();
        assert!((850..=950).contains(&passing), "passing = {passing}");
    }

    #[test]
    fn injected_dip_breaks_assumption_one() {
        let cfg = EnvConfig {
            requests: 200,
            violation_fraction: 0.5,
            seed: 3,
            ..EnvConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let broken = data
            .iter()
            .filter(|r| check_assumptions(r).iter().any(|(a1, _)| !*a1))
            .count();
        assert!(broken > 50, "broken = {broken}");
    }

    #[test]
    fn datasets_are_bit_identical_for_same_seed() {
        let cfg = EnvConfig { requests: 200, seed: 11, ..EnvConfig::default() };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn initial_state_contract() {
        let cfg = small_cfg();
        let req = &generate_dataset(&cfg).unwrap()[0];
        let s = initial_state(req);
        assert_eq!(s.phase, Phase::Channel);
        assert!(s.decisions.is_empty());
        assert_eq!(s.user, req.user);
        assert_eq!(s.context, req.context);
        assert_eq!(s.time_slice, req.time_slice);
    }

    #[test]
    fn richest_path_hits_the_value_ceiling() {
        let cfg = small_cfg();
        let data = generate_dataset(&cfg).unwrap();
        let w = RewardWeights::default();
        for req in &data {
            let maximal = [
                req.costs(Phase::Channel).len() - 1,
                req.costs(Phase::Queue).len() - 1,
                req.costs(Phase::Model).len() - 1,
            ];
            let (outcome, _) = rollout(req, &maximal, NoiseMode::Free).unwrap();
            let got = reward(&outcome, &w);
            assert!((got - req.max_joint_value()).abs() < 1e-9 * (1.0 + got.abs()));
        }
    }

    #[test]
    fn empty_channel_pool_kills_downstream_value() {
        let cfg = small_cfg();
        let data = generate_dataset(&cfg).unwrap();
        for req in data.iter().take(10) {
            for q in 0..req.costs(Phase::Queue).len() {
                for m in 0..req.costs(Phase::Model).len() {
                    let (outcome, _) = rollout(req, &[0, q, m], NoiseMode::Free).unwrap();
                    assert_eq!(outcome.fee_ad + outcome.price_o, 0.0);
                }
            }
        }
    }

    #[test]
    fn per_path_revenue_matches_value_table() {
        let cfg = small_cfg();
        let req = &generate_dataset(&cfg).unwrap()[3];
        let sizes = cfg.action_space.sizes();
        assert_eq!(sizes, [2, 3, 2]);
        for a1 in 0..sizes[0] {
            for a2 in 0..sizes[1] {
                for a3 in 0..sizes[2] {
                    let path = [a1, a2, a3];
                    let (outcome, costs) = rollout(req, &path, NoiseMode::Free).unwrap();
                    let total = outcome.fee_ad + outcome.price_o;
                    assert!((total - req.joint_value(&path)).abs() < 1e-9);
                    for t in 0..PHASES {
                        assert_eq!(costs[t], req.cost(Phase::from_index(t).unwrap(), path[t]));
                    }
                }
            }
        }
    }

    #[test]
    fn episode_length_is_three_decisions() {
        let cfg = small_cfg();
        let req = &generate_dataset(&cfg).unwrap()[0];
        let mut state = initial_state(req);
        for t in 0..PHASES {
            assert_eq!(state.decisions.len(), t);
            match step(req, &state, 0, NoiseMode::Free).unwrap() {
                StepResult::Next(s) => {
                    assert!(t < PHASES - 1);
                    state = s;
                }
                StepResult::Terminal { .. } => assert_eq!(t, PHASES - 1),
            }
        }
    }

    #[test]
    fn step_rejects_bad_actions_and_wrong_request() {
        let cfg = small_cfg();
        let data = generate_dataset(&cfg).unwrap();
        let req = &data[0];
        let state = initial_state(req);
        assert!(step(req, &state, 99, NoiseMode::Free).is_err());
        assert!(step(&data[1], &state, 0, NoiseMode::Free).is_err());
    }

    #[test]
    fn action_cost_is_path_independent() {
        let cfg = small_cfg();
        let req = &generate_dataset(&cfg).unwrap()[0];
        // Reach the queue phase along both channel decisions; the queue cost
        // menu must be identical.
        let s0 = initial_state(req);
        let via_skip = match step(req, &s0, 0, NoiseMode::Free).unwrap() {
            StepResult::Next(s) => s,
            _ => unreachable!(),
        };
        let via_full = match step(req, &s0, 1, NoiseMode::Free).unwrap() {
            StepResult::Next(s) => s,
            _ => unreachable!(),
        };
        for a in 0..req.costs(Phase::Queue).len() {
            assert_eq!(
                action_cost(req, &via_skip, a).unwrap(),
                action_cost(req, &via_full, a).unwrap()
            );
        }
    }

    #[test]
    fn queue_cost_ratio_matches_lengths() {
        let cfg = EnvConfig::default();
        let req = &generate_dataset(&EnvConfig { requests: 1, ..cfg }).unwrap()[0];
        let c = req.costs(Phase::Queue);
        assert!((c[1] / c[0] - 2.0).abs() < 1e-12, "bucket 0 vs 1 must cost 10:20");
        assert!((c[25] / c[0] - 26.0).abs() < 1e-12);
    }

    #[test]
    fn model_costs_follow_two_model_convention() {
        let cfg = EnvConfig {
            requests: 1,
            action_space: ActionSpaceSpec { channel_count: 1, model_count: 2, ..ActionSpaceSpec::default() },
            channel_base_costs: vec![1.0],
            model_cost_jitter: 0.0,
            ..EnvConfig::default()
        };
        let req = &generate_dataset(&cfg).unwrap()[0];
        assert_eq!(req.costs(Phase::Model), &[0.0, 1.0]);
    }

    #[test]
    fn maximal_policy_upper_bounds_costs_phasewise() {
        let cfg = EnvConfig { requests: 100, ..EnvConfig::default() };
        let data = generate_dataset(&cfg).unwrap();
        for req in &data {
            for phase in Phase::ALL {
                let menu = req.costs(phase);
                let last = *menu.last().unwrap();
                assert!(menu.iter().all(|c| *c <= last + 1e-12));
            }
        }
    }

    #[test]
    fn revenue_noise_is_bounded_mean_one_and_replayable() {
        let cfg = EnvConfig { requests: 300, revenue_noise: 0.1, ..EnvConfig::default() };
        let data = generate_dataset(&cfg).unwrap();
        let mut ratio_sum = 0.0;
        let mut n = 0usize;
        for req in &data {
            let path = [1, 5, 1];
            let (noisy, _) = rollout(req, &path, NoiseMode::Bounded(0.1)).unwrap();
            let (clean, _) = rollout(req, &path, NoiseMode::Free).unwrap();
            let (again, _) = rollout(req, &path, NoiseMode::Bounded(0.1)).unwrap();
            assert_eq!(noisy, again);
            let c = clean.fee_ad + clean.price_o;
            if c > 1e-9 {
                let r = (noisy.fee_ad + noisy.price_o) / c;
                assert!((0.9..=1.1).contains(&r));
                ratio_sum += r;
                n += 1;
            }
        }
        let mean = ratio_sum / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean noise ratio {mean}");
    }

    #[test]
    fn encoding_has_documented_layout() {
        let cfg = small_cfg();
        let spec = EncodingSpec::new(cfg.slices, cfg.action_space.clone());
        let req = &generate_dataset(&cfg).unwrap()[0];
        let s0 = initial_state(req);
        let x = spec.encode(&s0).unwrap();
        assert_eq!(x.len(), spec.len());
        // Phase one-hot leads.
        assert_eq!(&x[0..3], &[1.0, 0.0, 0.0]);
        // Decision one-hots are all zero before any decision.
        let tail = &x[spec.len() - 5..];
        assert!(tail.iter().all(|v| *v == 0.0));

        let s1 = match step(req, &s0, 1, NoiseMode::Free).unwrap() {
            StepResult::Next(s) => s,
            _ => unreachable!(),
        };
        let x1 = spec.encode(&s1).unwrap();
        assert_eq!(&x1[0..3], &[0.0, 1.0, 0.0]);
        // Channel decision 1 of 2 is one-hot at the second channel slot.
        let channel_slot = spec.len() - 5 + 1;
        assert_eq!(x1[channel_slot], 1.0);
    }

    #[test]
    fn encoding_rejects_out_of_range_slice() {
        let cfg = small_cfg();
        let spec = EncodingSpec::new(2, cfg.action_space.clone());
        let mut req = generate_dataset(&cfg).unwrap()[0].clone();
        req.time_slice = 3;
        let s = initial_state(&req);
        assert!(spec.encode(&s).is_err());
    }
}
