//! Comparison policies: global fixed rules, single-phase Lagrangian
//! allocation (DCAF-style), and black-box linear policies trained with the
//! cross-entropy method.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{ActionSpaceSpec, Phase, RewardWeights, PHASES};
use crate::error::{Error, Result};
use crate::metrics;
use crate::qnet::argmax_calibrated;
use crate::rng::sub_rng;
use crate::sim::{initial_state, step, EncodingSpec, NoiseMode, PhaseState, StepResult, SyntheticRequest};

/// One fixed decision triple applied to every request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticRule {
    pub channel_strategy: usize,
    pub queue_bucket: usize,
    pub model: usize,
}

impl StaticRule {
    /// Mid-tier rule: single first channel, middle truncation bucket, middle
    /// model. Its measured cost anchors the 100% budget line, so it should
    /// leave roughly 2x headroom to the maximal policy in every phase.
    pub fn default_for(space: &ActionSpaceSpec) -> Self {
        let strategies = space.channel_strategies();
        StaticRule {
            channel_strategy: if strategies > 2 { 2 } else { strategies - 1 },
            queue_bucket: (space.queue_buckets / 2).saturating_sub(1),
            model: space.model_count.div_ceil(2) - 1,
        }
    }

    pub fn validate(&self, space: &ActionSpaceSpec) -> Result<()> {
        space.validate()?;
        if self.channel_strategy >= space.channel_strategies() {
            return Err(Error::config(format!(
                "static channel strategy {} out of range",
                self.channel_strategy
            )));
        }
        if self.queue_bucket >= space.queue_buckets {
            return Err(Error::config(format!("static queue bucket {} out of range", self.queue_bucket)));
        }
        if self.model >= space.model_count {
            return Err(Error::config(format!("static model {} out of range", self.model)));
        }
        Ok(())
    }

    pub fn decisions(&self) -> [usize; PHASES] {
        [self.channel_strategy, self.queue_bucket, self.model]
    }
}

pub fn static_policy(rule: &StaticRule, state: &PhaseState) -> usize {
    rule.decisions()[state.phase.index()]
}

/// Per-phase linear scoring weights over the encoded state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicyParams {
    pub theta: [Vec<f64>; PHASES],
}

impl LinearPolicyParams {
    pub fn zeros(feature_len: usize) -> Self {
        LinearPolicyParams { theta: std::array::from_fn(|_| vec![0.0; feature_len]) }
    }

    pub fn from_flat(flat: &[f64], feature_len: usize) -> Result<Self> {
        if flat.len() != PHASES * feature_len {
            return Err(Error::config("flat policy vector has wrong length"));
        }
        Ok(LinearPolicyParams {
            theta: std::array::from_fn(|t| flat[t * feature_len..(t + 1) * feature_len].to_vec()),
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.theta.iter().flatten().copied().collect()
    }

    pub fn validate(&self, feature_len: usize) -> Result<()> {
        for t in &self.theta {
            if t.len() != feature_len {
                return Err(Error::config("policy weight length does not match encoding"));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("non-finite policy weights"));
            }
        }
        Ok(())
    }
}

/// Maps a real-valued phase score onto the action grid: clamped affine
/// rounding around the grid midpoint. Monotone in the score; score 0 is the
/// midpoint action.
pub fn score_to_action(score: f64, actions: usize) -> usize {
    let mid = (actions - 1) / 2;
    let raw = (mid as f64 + score).round();
    raw.clamp(0.0, (actions - 1) as f64) as usize
}

pub fn linear_act(params: &LinearPolicyParams, encoding: &EncodingSpec, state: &PhaseState) -> Result<usize> {
    let x = encoding.encode(state)?;
    let theta = &params.theta[state.phase.index()];
    if theta.len() != x.len() {
        return Err(Error::config("policy weight length does not match encoding"));
    }
    let score: f64 = theta.iter().zip(&x).map(|(w, xi)| w * xi).sum();
    if !score.is_finite() {
        return Err(Error::numeric("non-finite policy score"));
    }
    Ok(score_to_action(score, state.action_costs.len()))
}

/// Noise-free rollout of a linear policy over one request.
pub fn linear_rollout(
    params: &LinearPolicyParams,
    encoding: &EncodingSpec,
    req: &SyntheticRequest,
) -> Result<([usize; PHASES], [f64; PHASES], f64)> {
    let weights = RewardWeights::default();
    let mut state = initial_state(req);
    let mut costs = [0.0; PHASES];
    loop {
        let action = linear_act(params, encoding, &state)?;
        costs[state.phase.index()] = state.action_costs[action];
        match step(req, &state, action, NoiseMode::Free)? {
            StepResult::Next(next) => state = next,
            StepResult::Terminal { outcome, decisions } => {
                return Ok((decisions, costs, metrics::reward(&outcome, &weights)));
            }
        }
    }
}

/// Value, per-phase cost, and budget-penalized objective of one policy on an
/// eval set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenalizedEval {
    pub penalized: f64,
    pub raw_return: f64,
    pub costs: [f64; PHASES],
    pub feasible: bool,
}

/// Penalized objective: total value minus, per phase, `penalty_t` times the
/// budget overrun (zero when under budget). Feasible policies are therefore
/// ranked purely by raw return.
pub fn cem_penalized_reward(
    params: &LinearPolicyParams,
    encoding: &EncodingSpec,
    reqs: &[SyntheticRequest],
    budgets: &[f64; PHASES],
    penalty: &[f64; PHASES],
) -> Result<PenalizedEval> {
    let mut costs = [0.0; PHASES];
    let mut raw = 0.0;
    for req in reqs {
        let (_, c, v) = linear_rollout(params, encoding, req)?;
        for t in 0..PHASES {
            costs[t] += c[t];
        }
        raw += v;
    }
    let mut penalized = raw;
    let mut feasible = true;
    for t in 0..PHASES {
        let overrun = (costs[t] - budgets[t]).max(0.0);
        if overrun > 0.0 {
            feasible = false;
        }
        penalized -= penalty[t] * overrun;
    }
    Ok(PenalizedEval { penalized, raw_return: raw, costs, feasible })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub iterations: usize,
    pub n_sample: usize,
    pub n_retain: usize,
    /// Initial mean; zeros when absent.
    pub init_mu: Option<Vec<f64>>,
    pub init_sigma: f64,
    /// Budget-overrun multiplier per phase.
    pub penalty: f64,
    /// Lower bound keeping the sampler from collapsing to a point.
    pub sigma_floor: f64,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            iterations: 40,
            n_sample: 100,
            n_retain: 10,
            init_mu: None,
            init_sigma: 1.0,
            penalty: 1e8,
            sigma_floor: 1e-6,
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.iterations == 0 || self.n_sample == 0 {
            return Err(Error::config("CEM needs iterations >= 1 and n_sample >= 1"));
        }
        if self.n_retain == 0 || self.n_retain > self.n_sample {
            return Err(Error::config("need 1 <= n_retain <= n_sample"));
        }
        if let Some(mu) = &self.init_mu {
            if mu.len() != dim {
                return Err(Error::config("init_mu length does not match dimension"));
            }
        }
        if !(self.init_sigma > 0.0) || !(self.sigma_floor >= 0.0) || !(self.penalty >= 0.0) {
            return Err(Error::config("init_sigma must be > 0, sigma_floor and penalty >= 0"));
        }
        Ok(())
    }
}

/// Score of one candidate parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub reward: f64,
    pub raw: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemLogRow {
    pub iteration: usize,
    /// Best candidate reward this iteration.
    pub best_reward: f64,
    /// Average reward over the retained elites.
    pub elite_mean_reward: f64,
    /// Reward of the refit mean itself.
    pub mu_reward: f64,
    pub mu_norm: f64,
    pub sigma_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemOutcome {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Best feasible candidate ever evaluated, by penalized reward.
    pub best: Option<(Vec<f64>, CandidateScore)>,
    pub log: Vec<CemLogRow>,
}

/// Cross-entropy search: sample candidates from a diagonal Gaussian, keep the
/// top `n_retain` by reward, refit mean and standard deviation to the elites,
/// and remember the best feasible candidate ever seen.
///
/// The refit spread is measured around the pre-update mean, so it includes
/// the distance the mean just travelled. Refitting around the new mean makes
/// the sampler collapse while still far from the optimum; this variant keeps
/// spread at travel scale and only contracts once the mean is stationary.
pub fn cem_train(
    cfg: &CemConfig,
    dim: usize,
    mut objective: impl FnMut(&[f64]) -> Result<CandidateScore>,
) -> Result<CemOutcome> {
    cfg.validate(dim)?;
    let mut rng = sub_rng(cfg.seed, "cem");
    let mut mu = cfg.init_mu.clone().unwrap_or_else(|| vec![0.0; dim]);
    let mut sigma = vec![cfg.init_sigma; dim];
    let mut best: Option<(Vec<f64>, CandidateScore)> = None;
    let mut log = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let mut scored: Vec<(Vec<f64>, CandidateScore)> = Vec::with_capacity(cfg.n_sample);
        for _ in 0..cfg.n_sample {
            let theta: Vec<f64> = (0..dim)
                .map(|k| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu[k] + sigma[k] * z
                })
                .collect();
            let score = objective(&theta)?;
            if !score.reward.is_finite() {
                return Err(Error::numeric("non-finite candidate reward"));
            }
            if score.feasible
                && best.as_ref().is_none_or(|(_, b)| score.reward > b.reward)
            {
                best = Some((theta.clone(), score));
            }
            scored.push((theta, score));
        }
        scored.sort_by(|a, b| {
            b.1.reward.partial_cmp(&a.1.reward).unwrap().then(a.0.partial_cmp(&b.0).unwrap())
        });
        let elites = &scored[..cfg.n_retain];
        for k in 0..dim {
            let mean = elites.iter().map(|(t, _)| t[k]).sum::<f64>() / cfg.n_retain as f64;
            let spread = elites.iter().map(|(t, _)| (t[k] - mu[k]).powi(2)).sum::<f64>()
                / cfg.n_retain as f64;
            mu[k] = mean;
            sigma[k] = spread.sqrt().max(cfg.sigma_floor);
        }
        let elite_mean_reward =
            elites.iter().map(|(_, s)| s.reward).sum::<f64>() / cfg.n_retain as f64;
        let mu_reward = objective(&mu)?.reward;
        log.push(CemLogRow {
            iteration,
            best_reward: scored[0].1.reward,
            elite_mean_reward,
            mu_reward,
            mu_norm: mu.iter().map(|v| v * v).sum::<f64>().sqrt(),
            sigma_norm: sigma.iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
    }
    Ok(CemOutcome { mu, sigma, best, log })
}

/// Objective closure for linear allocation policies on an eval set.
pub fn cem_env_objective<'a>(
    encoding: &'a EncodingSpec,
    reqs: &'a [SyntheticRequest],
    budgets: [f64; PHASES],
    penalty: f64,
) -> impl FnMut(&[f64]) -> Result<CandidateScore> + 'a {
    let feature_len = encoding.len();
    move |flat: &[f64]| {
        let params = LinearPolicyParams::from_flat(flat, feature_len)?;
        let eval =
            cem_penalized_reward(&params, encoding, reqs, &budgets, &[penalty; PHASES])?;
        Ok(CandidateScore { reward: eval.penalized, raw: eval.raw_return, feasible: eval.feasible })
    }
}

/// DCAF-style allocation: channel and model fixed by the rule; per-request
/// queue actions maximize value minus lambda times cost, with one global
/// lambda bisected until total queue cost meets the budget.
#[derive(Debug, Clone, PartialEq)]
pub struct DcafOutcome {
    pub lambda: f64,
    pub actions: Vec<usize>,
    pub queue_cost: f64,
    pub utilization: f64,
    /// Value and full per-phase costs of the induced decision triples.
    pub total_value: f64,
    pub costs: [f64; PHASES],
    pub converged: bool,
    pub probes: Vec<(f64, f64)>,
}

pub fn dcaf_policy(
    reqs: &[SyntheticRequest],
    rule: &StaticRule,
    queue_budget: f64,
    band: f64,
) -> Result<DcafOutcome> {
    if reqs.is_empty() {
        return Err(Error::config("empty evaluation set"));
    }
    if !(queue_budget > 0.0) {
        return Err(Error::config("queue budget must be > 0"));
    }
    // Ground-truth per-request queue menus with the other phases pinned.
    let menus: Vec<(Vec<f64>, Vec<f64>)> = reqs
        .iter()
        .map(|req| {
            let values: Vec<f64> = (0..req.costs(Phase::Queue).len())
                .map(|a| req.joint_value(&[rule.channel_strategy, a, rule.model]))
                .collect();
            (values, req.costs(Phase::Queue).to_vec())
        })
        .collect();

    let assign = |lambda: f64| -> Result<(Vec<usize>, f64)> {
        let mut actions = Vec::with_capacity(menus.len());
        let mut cost = 0.0;
        for (values, costs) in &menus {
            let a = argmax_calibrated(values, costs, lambda)?;
            cost += costs[a];
            actions.push(a);
        }
        Ok((actions, cost))
    };

    let mut probes: Vec<(f64, f64)> = Vec::new();
    let (mut actions, mut cost) = assign(0.0)?;
    probes.push((0.0, cost));
    let mut lambda = 0.0;
    let mut converged = cost <= queue_budget * (1.0 + band);
    if !converged {
        // Bracket then bisect the monotone step curve.
        let mut lo = 0.0;
        let mut hi = 1.0;
        loop {
            let (a, c) = assign(hi)?;
            probes.push((hi, c));
            if c <= queue_budget {
                actions = a;
                cost = c;
                lambda = hi;
                break;
            }
            lo = hi;
            hi *= 2.0;
            if hi > 1e12 {
                // Even the cheapest assignment overspends; boundary + flag.
                actions = a;
                cost = c;
                lambda = hi;
                break;
            }
        }
        converged = (cost / queue_budget - 1.0).abs() <= band;
        for _ in 0..60 {
            if converged || cost > queue_budget * (1.0 + band) && hi > 1e12 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let (a, c) = assign(mid)?;
            probes.push((mid, c));
            if c > queue_budget {
                lo = mid;
            } else {
                hi = mid;
                actions = a;
                cost = c;
                lambda = mid;
            }
            converged = (cost / queue_budget - 1.0).abs() <= band;
        }
    }

    let weights = RewardWeights::default();
    let mut total_value = 0.0;
    let mut costs = [0.0; PHASES];
    for (req, &a) in reqs.iter().zip(&actions) {
        let decisions = [rule.channel_strategy, a, rule.model];
        let (outcome, c) = crate::sim::rollout(req, &decisions, NoiseMode::Free)?;
        total_value += metrics::reward(&outcome, &weights);
        for t in 0..PHASES {
            costs[t] += c[t];
        }
    }
    Ok(DcafOutcome {
        lambda,
        actions,
        queue_cost: cost,
        utilization: cost / queue_budget,
        total_value,
        costs,
        converged,
        probes,
    })
}
