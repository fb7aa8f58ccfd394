//! Offline training: double-Q learning over logged transitions with the
//! adaptive multiplier loop.
//!
//! Each iteration samples a minibatch, regresses the online net toward
//! double-Q targets (next action picked on the online net with calibration,
//! evaluated on the target net without it), then runs K rounds of the
//! multiplier update: re-select greedy actions for the batch under the
//! current lambda and push each phase's lambda up or down by how far the
//! batch's greedy cost sits from the batch budget. Lambda carries across
//! iterations; the target net syncs every `target_sync` steps.
//!
//! Algorithm variants: plain double-Q, batch-constrained (actions whose
//! imitation probability falls below tau times the batch maximum are masked
//! from selection), and random ensemble mixtures (a fresh convex head
//! mixture per minibatch, shared by the online selection and target
//! evaluation of that batch).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{linear_act, LinearPolicyParams};
use crate::correct::{evaluate_policy, NetScorer};
use crate::domain::{BudgetSpec, LambdaVector, Phase, RewardWeights, PHASES};
use crate::error::{Error, Result};
use crate::metrics;
use crate::qnet::{
    argmax_calibrated, argmax_calibrated_masked, loss_and_grads, AdamState, QNetworkParams,
    RemMixture, TdExample,
};
use crate::rng::{item_rng, sub_rng};
use crate::sim::{initial_state, step, EncodingSpec, NoiseMode, PhaseState, StepResult, SyntheticRequest};

/// RNG stream tags; fixed so tests can replay the exact draws.
pub const RNG_TAG_BATCH: &str = "batch";
pub const RNG_TAG_REM: &str = "rem-beta";
pub const RNG_TAG_BEHAVIOR: &str = "behavior";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Ddqn,
    Bcq,
    Rem,
}

impl Algo {
    pub fn label(self) -> &'static str {
        match self {
            Algo::Ddqn => "ddqn",
            Algo::Bcq => "bcq",
            Algo::Rem => "rem",
        }
    }
}

impl std::str::FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddqn" => Ok(Algo::Ddqn),
            "bcq" => Ok(Algo::Bcq),
            "rem" => Ok(Algo::Rem),
            other => Err(Error::config(format!("unknown algorithm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorTag {
    Random,
    Scripted,
}

/// One step of one logged episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub state: PhaseState,
    pub action: usize,
    /// Zero except on the terminal transition, which carries the revenue
    /// reward of the whole episode.
    pub reward: f64,
    /// Cost of the taken action, always `state.action_costs[action]`.
    pub cost: f64,
    pub next: NextState,
    pub behavior: BehaviorTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NextState {
    Terminal,
    State(PhaseState),
}

impl TransitionRecord {
    pub fn validate(&self) -> Result<()> {
        let menu = &self.state.action_costs;
        if self.action >= menu.len() {
            return Err(Error::format("transition action out of menu range"));
        }
        if self.cost != menu[self.action] {
            return Err(Error::format("transition cost does not match its menu"));
        }
        match &self.next {
            NextState::Terminal => {
                if self.state.phase != Phase::Model {
                    return Err(Error::format("terminal transition before the final phase"));
                }
            }
            NextState::State(next) => {
                if self.reward != 0.0 {
                    return Err(Error::format("non-terminal transition carries a reward"));
                }
                if next.phase != self.state.phase.next().ok_or_else(|| {
                    Error::format("final-phase transition must be terminal")
                })? {
                    return Err(Error::format("next state skips a phase"));
                }
            }
        }
        Ok(())
    }
}

/// Behavior-policy mixture for data collection: uniform-random exploration
/// plus an optional share of trajectories from a trained linear policy.
#[derive(Debug, Clone, Copy, Default)]
pub struct BehaviorMix<'a> {
    pub scripted: Option<(&'a LinearPolicyParams, &'a EncodingSpec)>,
    /// Fraction of requests rolled by the scripted policy.
    pub scripted_fraction: f64,
}

/// Rolls every request once and logs its transitions. Per-request RNG
/// streams: the log never depends on request order.
pub fn collect_behavior_data(
    reqs: &[SyntheticRequest],
    mix: &BehaviorMix,
    noise: NoiseMode,
    seed: u64,
) -> Result<Vec<TransitionRecord>> {
    if !(0.0..=1.0).contains(&mix.scripted_fraction) {
        return Err(Error::config("scripted_fraction must be in [0, 1]"));
    }
    if mix.scripted_fraction > 0.0 && mix.scripted.is_none() {
        return Err(Error::config("scripted_fraction > 0 needs a scripted policy"));
    }
    let weights = RewardWeights::default();
    let mut out = Vec::with_capacity(reqs.len() * PHASES);
    for req in reqs {
        let mut rng = item_rng(seed, RNG_TAG_BEHAVIOR, req.id);
        let scripted = rng.gen::<f64>() < mix.scripted_fraction;
        let tag = if scripted { BehaviorTag::Scripted } else { BehaviorTag::Random };
        let mut state = initial_state(req);
        loop {
            let action = if scripted {
                let (params, enc) = mix.scripted.unwrap();
                linear_act(params, enc, &state)?
            } else {
                rng.gen_range(0..state.action_costs.len())
            };
            let cost = state.action_costs[action];
            match step(req, &state, action, noise)? {
                StepResult::Next(next) => {
                    out.push(TransitionRecord {
                        state: state.clone(),
                        action,
                        reward: 0.0,
                        cost,
                        next: NextState::State(next.clone()),
                        behavior: tag,
                    });
                    state = next;
                }
                StepResult::Terminal { outcome, .. } => {
                    out.push(TransitionRecord {
                        state,
                        action,
                        reward: metrics::reward(&outcome, &weights),
                        cost,
                        next: NextState::Terminal,
                        behavior: tag,
                    });
                    break;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// K: multiplier updates per training iteration.
    pub lambda_updates: usize,
    /// Learning rate of the multiplier update.
    pub lambda_lr: f64,
    pub gamma: f64,
    pub lr: f64,
    /// Target-network sync period in iterations.
    pub target_sync: usize,
    /// Batch-constrained admission threshold (fraction of the max imitation
    /// probability).
    pub bcq_tau: f64,
    /// Ensemble heads (random-mixture variant; the others train one head).
    pub heads: usize,
    pub hidden: Vec<usize>,
    pub algo: Algo,
    /// Off freezes lambda at its initial value.
    pub adaptive_lambda: bool,
    /// Weight of the imitation cross-entropy term (batch-constrained only).
    pub imitation_weight: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 30_000,
            batch_size: 8192,
            lambda_updates: 10,
            lambda_lr: 0.1,
            gamma: 0.99,
            lr: 3e-4,
            target_sync: 100,
            bcq_tau: 0.3,
            heads: 64,
            hidden: vec![128, 64],
            algo: Algo::Ddqn,
            adaptive_lambda: true,
            imitation_weight: 1.0,
            eval_every: 5000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::config("iterations and batch_size must be >= 1"));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma must be in [0, 1)"));
        }
        if !(self.lr > 0.0) || !(self.lambda_lr >= 0.0) {
            return Err(Error::config("lr must be > 0 and lambda_lr >= 0"));
        }
        if self.target_sync == 0 || self.eval_every == 0 {
            return Err(Error::config("target_sync and eval_every must be >= 1"));
        }
        if !(self.bcq_tau >= 0.0) || !(self.imitation_weight >= 0.0) {
            return Err(Error::config("bcq_tau and imitation_weight must be >= 0"));
        }
        if self.heads == 0 || self.hidden.is_empty() {
            return Err(Error::config("need heads >= 1 and at least one hidden layer"));
        }
        Ok(())
    }

    /// Single-head algorithms ignore the ensemble width.
    pub fn effective_heads(&self) -> usize {
        if self.algo == Algo::Rem {
            self.heads
        } else {
            1
        }
    }
}

/// Batch budget: per-request rate times the number of phase-t states drawn.
pub fn batch_budget(rate_per_request: f64, phase_states: usize) -> f64 {
    rate_per_request * phase_states as f64
}

/// `max{0, lambda + alpha * (cost/budget - 1)}`.
pub fn adaptive_lambda_step(lambda_t: f64, batch_cost: f64, budget: f64, alpha: f64) -> Result<f64> {
    if !(budget > 0.0) {
        return Err(Error::config("batch budget must be > 0"));
    }
    let next = lambda_t + alpha * (batch_cost / budget - 1.0);
    if !next.is_finite() {
        return Err(Error::numeric("multiplier update produced a non-finite value"));
    }
    Ok(next.max(0.0))
}

/// Cached q-values and cost menus of one phase's batch states; greedy
/// re-selection inside the multiplier loop is then argmax-only.
#[derive(Debug, Clone, Default)]
pub struct LambdaBatch {
    pub q: Vec<Vec<f64>>,
    pub costs: Vec<Vec<f64>>,
}

impl LambdaBatch {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Greedy calibrated selection over the batch: (total cost, total q).
    pub fn greedy_totals(&self, lambda_t: f64) -> Result<(f64, f64)> {
        let mut cost = 0.0;
        let mut value = 0.0;
        for (q, c) in self.q.iter().zip(&self.costs) {
            let a = argmax_calibrated(q, c, lambda_t)?;
            cost += c[a];
            value += q[a];
        }
        Ok((cost, value))
    }
}

/// K rounds of greedy re-selection plus the multiplier update, each phase
/// against its batch budget. Phases with no states in the batch are skipped.
pub fn inner_lambda_loop(
    lambda: &mut LambdaVector,
    batches: &[LambdaBatch; PHASES],
    rates: &BudgetSpec,
    k: usize,
    alpha: f64,
) -> Result<()> {
    for _ in 0..k {
        for phase in Phase::ALL {
            let batch = &batches[phase.index()];
            if batch.is_empty() {
                continue;
            }
            let budget = batch_budget(rates.rate(phase), batch.len());
            let (cost, _) = batch.greedy_totals(lambda.get(phase))?;
            let next = adaptive_lambda_step(lambda.get(phase), cost, budget, alpha)?;
            lambda.set(phase, next)?;
        }
    }
    Ok(())
}

/// Double-Q target for one transition: select `a'` on the online net with
/// calibration (and batch-constrained masking when `bcq_tau` is given),
/// evaluate it on the target net without calibration. Terminal transitions
/// use the reward alone.
#[allow(clippy::too_many_arguments)]
pub fn ddqn_target(
    rec: &TransitionRecord,
    encoding: &EncodingSpec,
    online: &QNetworkParams,
    target: &QNetworkParams,
    lambda: &LambdaVector,
    gamma: f64,
    mixture: &RemMixture,
    bcq_tau: Option<f64>,
) -> Result<f64> {
    match &rec.next {
        NextState::Terminal => Ok(rec.reward),
        NextState::State(next) => {
            let x = encoding.encode(next)?;
            target_from_parts(
                &x,
                next.phase,
                &next.action_costs,
                rec.reward,
                online,
                target,
                lambda,
                gamma,
                mixture,
                bcq_tau,
            )
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn target_from_parts(
    x_next: &[f64],
    next_phase: Phase,
    next_costs: &[f64],
    reward: f64,
    online: &QNetworkParams,
    target: &QNetworkParams,
    lambda: &LambdaVector,
    gamma: f64,
    mixture: &RemMixture,
    bcq_tau: Option<f64>,
) -> Result<f64> {
    let q_online = crate::qnet::rem_combine(&online.forward_heads(x_next, next_phase)?, mixture)?;
    let lambda_next = lambda.get(next_phase);
    let a_next = match bcq_tau {
        None => argmax_calibrated(&q_online, next_costs, lambda_next)?,
        Some(tau) => {
            let probs = online.imitation_probs(x_next, next_phase)?;
            let max_p = probs.iter().copied().fold(0.0, f64::max);
            let mut admissible: Vec<bool> = probs.iter().map(|p| *p >= tau * max_p).collect();
            if !admissible.iter().any(|a| *a) {
                // Threshold above 1 can exclude everything; admit the
                // behavior-most-likely action.
                let best = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                admissible[best] = true;
            }
            argmax_calibrated_masked(&q_online, next_costs, lambda_next, &admissible)?
        }
    };
    let q_target = crate::qnet::rem_combine(&target.forward_heads(x_next, next_phase)?, mixture)?;
    Ok(reward + gamma * q_target[a_next])
}

/// One telemetry row per phase per evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub step: usize,
    pub phase: Phase,
    /// Eval-set cost of this phase divided by its absolute eval budget.
    pub utilization: f64,
    /// Eval-set return (noise-free).
    #[serde(rename = "return")]
    pub ret: f64,
    pub lambda: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: QNetworkParams,
    pub target_params: QNetworkParams,
    pub lambda: LambdaVector,
    pub telemetry: Vec<TelemetryRow>,
    /// Total loss per iteration (TD plus weighted imitation).
    pub loss_history: Vec<f64>,
    /// Iterations (1-based) at which the target net was synced.
    pub sync_steps: Vec<usize>,
}

struct Prepared {
    x: Vec<f64>,
    phase: Phase,
    action: usize,
    reward: f64,
    costs: Vec<f64>,
    next: Option<(Vec<f64>, Phase, Vec<f64>)>,
}

fn prepare(dataset: &[TransitionRecord], encoding: &EncodingSpec) -> Result<Vec<Prepared>> {
    dataset
        .iter()
        .map(|rec| {
            rec.validate()?;
            let next = match &rec.next {
                NextState::Terminal => None,
                NextState::State(s) => {
                    Some((encoding.encode(s)?, s.phase, s.action_costs.clone()))
                }
            };
            Ok(Prepared {
                x: encoding.encode(&rec.state)?,
                phase: rec.state.phase,
                action: rec.action,
                reward: rec.reward,
                costs: rec.state.action_costs.clone(),
                next,
            })
        })
        .collect()
}

/// Offline training over a transition log. `rates` back the per-batch
/// budgets of the multiplier loop; `eval`/`eval_budgets` drive the periodic
/// utilization telemetry.
pub fn train(
    dataset: &[TransitionRecord],
    encoding: &EncodingSpec,
    cfg: &TrainConfig,
    rates: &BudgetSpec,
    eval: &[SyntheticRequest],
    eval_budgets: [f64; PHASES],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    rates.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("empty training dataset"));
    }
    if eval_budgets.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
        return Err(Error::config("eval budgets must be positive and finite"));
    }
    let prepared = prepare(dataset, encoding)?;
    let action_sizes = encoding.action_space.sizes();
    let heads = cfg.effective_heads();
    let mut params =
        QNetworkParams::init(encoding.len(), &cfg.hidden, heads, action_sizes, cfg.seed)?;
    let mut target = params.clone();
    let mut adam = AdamState::new(params.flat_len());
    let mut lambda = LambdaVector::zero();
    let mut batch_rng = sub_rng(cfg.seed, RNG_TAG_BATCH);
    let mut rem_rng = sub_rng(cfg.seed, RNG_TAG_REM);

    let imitation_weight = if cfg.algo == Algo::Bcq { cfg.imitation_weight } else { 0.0 };
    let bcq_tau = if cfg.algo == Algo::Bcq { Some(cfg.bcq_tau) } else { None };

    let mut telemetry = Vec::new();
    let mut loss_history = Vec::with_capacity(cfg.iterations);
    let mut sync_steps = Vec::new();

    for iter in 0..cfg.iterations {
        let mixture = if cfg.algo == Algo::Rem {
            RemMixture::sample(heads, &mut rem_rng)
        } else {
            RemMixture::uniform(heads)
        };
        let indices: Vec<usize> =
            (0..cfg.batch_size).map(|_| batch_rng.gen_range(0..prepared.len())).collect();

        let mut examples = Vec::with_capacity(indices.len());
        let mut lambda_batches: [LambdaBatch; PHASES] = Default::default();
        for &i in &indices {
            let tr = &prepared[i];
            let y = match &tr.next {
                None => tr.reward,
                Some((x_next, next_phase, next_costs)) => target_from_parts(
                    x_next,
                    *next_phase,
                    next_costs,
                    tr.reward,
                    &params,
                    &target,
                    &lambda,
                    cfg.gamma,
                    &mixture,
                    bcq_tau,
                )?,
            };
            examples.push(TdExample {
                x: tr.x.clone(),
                phase: tr.phase,
                action: tr.action,
                target: y,
            });
            if cfg.adaptive_lambda {
                let q = crate::qnet::rem_combine(
                    &params.forward_heads(&tr.x, tr.phase)?,
                    &mixture,
                )?;
                let b = &mut lambda_batches[tr.phase.index()];
                b.q.push(q);
                b.costs.push(tr.costs.clone());
            }
        }

        let (loss, grads) = loss_and_grads(&params, &examples, &mixture, imitation_weight)?;
        let total_loss = loss.total(imitation_weight);
        if !total_loss.is_finite() {
            return Err(Error::numeric(format!("training diverged at iteration {iter}")));
        }
        adam.step(&mut params, &grads, cfg.lr)?;
        loss_history.push(total_loss);

        if cfg.adaptive_lambda {
            inner_lambda_loop(&mut lambda, &lambda_batches, rates, cfg.lambda_updates, cfg.lambda_lr)?;
        }

        if (iter + 1) % cfg.target_sync == 0 {
            target = params.clone();
            sync_steps.push(iter + 1);
        }

        if !eval.is_empty() && ((iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.iterations) {
            let scorer = NetScorer { params: &params, encoding };
            let e = evaluate_policy(&scorer, &lambda, eval)?;
            for phase in Phase::ALL {
                telemetry.push(TelemetryRow {
                    step: iter + 1,
                    phase,
                    utilization: e.costs[phase.index()] / eval_budgets[phase.index()],
                    ret: e.ret,
                    lambda: lambda.get(phase),
                    loss: total_loss,
                });
            }
        }
    }

    Ok(TrainOutcome { params, target_params: target, lambda, telemetry, loss_history, sync_steps })
}
