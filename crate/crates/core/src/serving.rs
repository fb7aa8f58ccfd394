//! Online serving: load a trained net and a per-slice multiplier table,
//! stream requests slice by slice, act greedily on the calibrated q-values,
//! and let the load controller clamp the action space when the stream runs
//! hot.
//!
//! Time model: every slice spans a fixed number of controller ticks and the
//! slice's requests are spread over them, so doubled traffic means doubled
//! arrivals per tick and a proportionally higher load signal. The controller
//! steps once per tick; the clamp level it emits applies from the next tick.

use serde::{Deserialize, Serialize};

use crate::control::{admissible_mask, clamp_level, pid_step, ClampLevel, PidConfig, PidState};
use crate::correct::correct_all;
use crate::correct::{NetScorer, PolicyEval};
use crate::domain::{BudgetSpec, LambdaTable, RevenueOutcome, RewardWeights, PHASES};
use crate::error::{Error, Result};
use crate::metrics;
use crate::qnet::{argmax_calibrated_masked, QNetworkParams};
use crate::sim::{initial_state, step, EncodingSpec, NoiseMode, StepResult, SyntheticRequest};

/// Full trace of one served request.
#[derive(Debug, Clone, PartialEq)]
pub struct ServeTrace {
    pub decisions: [usize; PHASES],
    pub costs: [f64; PHASES],
    pub outcome: RevenueOutcome,
    pub reward: f64,
    /// True when the clamp level restricted at least one phase's menu.
    pub clamped: bool,
    /// True when the request's slice lay outside the multiplier table and
    /// the nearest covered slice was used instead.
    pub slice_fallback: bool,
}

/// Serves one request: per phase, greedy on q minus lambda-weighted cost
/// over the clamp-admissible actions, executed against the environment.
pub fn serve_request(
    params: &QNetworkParams,
    encoding: &EncodingSpec,
    table: &LambdaTable,
    req: &SyntheticRequest,
    level: &ClampLevel,
    noise: NoiseMode,
) -> Result<ServeTrace> {
    let slice_fallback = req.time_slice >= table.slices();
    let lambda = table.get(req.time_slice);
    let weights = RewardWeights::default();
    let mut state = initial_state(req);
    let mut decisions = [0usize; PHASES];
    let mut costs = [0.0; PHASES];
    let mut clamped = false;
    loop {
        let phase = state.phase;
        let q = params.forward(&encoding.encode(&state)?, phase)?;
        let mask = admissible_mask(level, phase, state.action_costs.len());
        clamped |= mask.iter().any(|m| !*m);
        let action = argmax_calibrated_masked(&q, &state.action_costs, lambda.get(phase), &mask)?;
        decisions[phase.index()] = action;
        costs[phase.index()] = state.action_costs[action];
        match step(req, &state, action, noise)? {
            StepResult::Next(next) => state = next,
            StepResult::Terminal { outcome, .. } => {
                let reward = metrics::reward(&outcome, &weights);
                return Ok(ServeTrace {
                    decisions,
                    costs,
                    outcome,
                    reward,
                    clamped,
                    slice_fallback,
                });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub pid: PidConfig,
    /// Controller ticks each slice spans.
    pub ticks_per_slice: usize,
    /// CR capacity per tick; the load sample is tick cost over this.
    pub capacity_per_tick: f64,
    /// Smoothing of the load signal's exponential moving average, in (0, 1].
    pub ema_alpha: f64,
    pub noise: NoiseMode,
    /// When set, each slice's multipliers are re-corrected from that slice's
    /// just-served traffic (band = this value). Off by default.
    pub refresh_band: Option<f64>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            pid: PidConfig::default(),
            ticks_per_slice: 10,
            capacity_per_tick: f64::INFINITY,
            ema_alpha: 0.4,
            noise: NoiseMode::Free,
            refresh_band: None,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        self.pid.validate()?;
        if self.ticks_per_slice == 0 {
            return Err(Error::config("ticks_per_slice must be >= 1"));
        }
        if !(self.capacity_per_tick > 0.0) {
            return Err(Error::config("capacity_per_tick must be > 0"));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(Error::config("ema_alpha must be in (0, 1]"));
        }
        Ok(())
    }
}

/// One controller tick of telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSample {
    pub tick: usize,
    pub slice: usize,
    /// Smoothed load signal fed to the controller.
    pub measurement: f64,
    pub output: f64,
    /// Clamp severity in [0, 1] after this tick's controller step.
    pub clamp_fraction: f64,
}

/// Per-slice serving report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub slice: usize,
    pub requests: usize,
    pub utilization: [f64; PHASES],
    pub ret: f64,
    /// Time (in controller sample periods) this slice spent clamped.
    pub clamp_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutcome {
    pub slices: Vec<SliceReport>,
    pub control: Vec<ControlSample>,
    pub totals: PolicyEval,
    /// Requests whose slice fell outside the multiplier table.
    pub slice_fallbacks: usize,
    /// The table after any per-slice refreshes (equals the input when
    /// refresh is off).
    pub table: LambdaTable,
}

/// Streams a request set slice by slice. Requests are grouped by their
/// `time_slice` and spread over each slice's ticks; the controller is
/// stepped once per tick on the smoothed load signal.
pub fn run_stream(
    params: &QNetworkParams,
    encoding: &EncodingSpec,
    table: &LambdaTable,
    reqs: &[SyntheticRequest],
    budgets: &BudgetSpec,
    cfg: &StreamConfig,
) -> Result<StreamOutcome> {
    cfg.validate()?;
    budgets.validate()?;
    if reqs.is_empty() {
        return Err(Error::config("empty request stream"));
    }
    let slices = reqs.iter().map(|r| r.time_slice).max().unwrap() + 1;
    let mut by_slice: Vec<Vec<&SyntheticRequest>> = vec![Vec::new(); slices];
    for req in reqs {
        by_slice[req.time_slice].push(req);
    }

    let mut live_table = table.clone();
    let space = encoding.action_space.clone();
    let mut pid_state = PidState::new();
    let mut level = ClampLevel::none(&space);
    let mut ema: Option<f64> = None;
    let mut control = Vec::new();
    let mut reports = Vec::with_capacity(slices);
    let mut total_costs = [0.0; PHASES];
    let mut total_ret = 0.0;
    let mut fallbacks = 0usize;
    let mut tick_counter = 0usize;

    for (slice, slice_reqs) in by_slice.iter().enumerate() {
        let mut slice_costs = [0.0; PHASES];
        let mut slice_ret = 0.0;
        let mut clamp_ticks = 0usize;
        for tick in 0..cfg.ticks_per_slice {
            // Requests are dealt across ticks round-robin; slice totals do
            // not depend on the deal.
            let mut tick_cost = 0.0;
            for req in slice_reqs.iter().skip(tick).step_by(cfg.ticks_per_slice) {
                let trace =
                    serve_request(params, encoding, &live_table, req, &level, cfg.noise)?;
                for (total, c) in slice_costs.iter_mut().zip(&trace.costs) {
                    *total += c;
                }
                slice_ret += trace.reward;
                tick_cost += trace.costs.iter().sum::<f64>();
                fallbacks += trace.slice_fallback as usize;
            }
            if level.is_active(&space) {
                clamp_ticks += 1;
            }
            let sample = tick_cost / cfg.capacity_per_tick;
            let smoothed = match ema {
                None => sample,
                Some(prev) => cfg.ema_alpha * sample + (1.0 - cfg.ema_alpha) * prev,
            };
            ema = Some(smoothed);
            let (output, next_state) = pid_step(&cfg.pid, &pid_state, smoothed)?;
            pid_state = next_state;
            level = clamp_level(output, &cfg.pid, &space);
            control.push(ControlSample {
                tick: tick_counter,
                slice,
                measurement: smoothed,
                output,
                clamp_fraction: level.fraction(&space),
            });
            tick_counter += 1;
        }

        let utilization = if slice_reqs.is_empty() {
            [0.0; PHASES]
        } else {
            let slice_budgets = budgets.slice_budgets(slice, slice_reqs.len())?;
            [0, 1, 2].map(|t| slice_costs[t] / slice_budgets[t])
        };
        reports.push(SliceReport {
            slice,
            requests: slice_reqs.len(),
            utilization,
            ret: slice_ret,
            clamp_seconds: clamp_ticks as f64 * cfg.pid.dt,
        });
        for t in 0..PHASES {
            total_costs[t] += slice_costs[t];
        }
        total_ret += slice_ret;

        if let (Some(band), false) = (cfg.refresh_band, slice_reqs.is_empty()) {
            let owned: Vec<SyntheticRequest> =
                slice_reqs.iter().map(|r| (*r).clone()).collect();
            let scorer = NetScorer { params, encoding };
            let initial = *live_table.get(slice);
            let refreshed =
                correct_all(&scorer, &owned, budgets, slices, &initial, band)?;
            let i = slice.min(live_table.per_slice.len() - 1);
            live_table.per_slice[i] = *refreshed.table.get(slice);
        }
    }

    Ok(StreamOutcome {
        slices: reports,
        control,
        totals: PolicyEval { costs: total_costs, ret: total_ret, requests: reqs.len() },
        slice_fallbacks: fallbacks,
        table: live_table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correct::evaluate_policy;
    use crate::domain::{ActionSpaceSpec, LambdaVector, Phase};
    use crate::qnet::argmax_calibrated;
    use crate::sim::{generate_dataset, EnvConfig};

    fn env(requests: usize, slices: usize, seed: u64) -> (Vec<SyntheticRequest>, EncodingSpec) {
        let cfg = EnvConfig {
            requests,
            slices,
            violation_fraction: 0.0,
            seed,
            ..EnvConfig::default()
        };
        let enc = EncodingSpec::new(cfg.slices, cfg.action_space.clone());
        (generate_dataset(&cfg).unwrap(), enc)
    }

    fn net(enc: &EncodingSpec, seed: u64) -> QNetworkParams {
        QNetworkParams::init(enc.len(), &[16, 12], 1, enc.action_space.sizes(), seed).unwrap()
    }

    #[test]
    fn zero_lambda_no_clamp_matches_unconstrained_greedy() {
        let (reqs, enc) = env(25, 3, 1);
        let params = net(&enc, 7);
        let table = LambdaTable::uniform(3, LambdaVector::zero());
        let space = &enc.action_space;
        for req in &reqs {
            let trace = serve_request(
                &params,
                &enc,
                &table,
                req,
                &ClampLevel::none(space),
                NoiseMode::Free,
            )
            .unwrap();
            assert!(!trace.clamped);
            // Replay the episode picking plain argmax of q at each state.
            let mut state = initial_state(req);
            for phase in Phase::ALL {
                let q = params.forward(&enc.encode(&state).unwrap(), phase).unwrap();
                let a = argmax_calibrated(&q, &state.action_costs, 0.0).unwrap();
                assert_eq!(trace.decisions[phase.index()], a);
                if let StepResult::Next(next) = step(req, &state, a, NoiseMode::Free).unwrap() {
                    state = next;
                }
            }
        }
    }

    #[test]
    fn full_clamp_forces_cheapest_queue_and_model() {
        let (reqs, enc) = env(15, 2, 2);
        let params = net(&enc, 3);
        let table = LambdaTable::uniform(2, LambdaVector::zero());
        let space = &enc.action_space;
        let pid = PidConfig::default();
        let level = clamp_level(pid.out_max, &pid, space);
        for req in &reqs {
            let trace =
                serve_request(&params, &enc, &table, req, &level, NoiseMode::Free).unwrap();
            assert!(trace.clamped);
            assert_eq!(trace.decisions[1], 0);
            assert_eq!(trace.decisions[2], 0);
        }
    }

    #[test]
    fn replay_reproduces_policy_evaluation_exactly() {
        let (reqs, enc) = env(60, 4, 3);
        let params = net(&enc, 11);
        let lambda = LambdaVector::new([0.3, 0.05, 0.8]).unwrap();
        let table = LambdaTable::uniform(4, lambda);
        let scorer = NetScorer { params: &params, encoding: &enc };
        let eval = evaluate_policy(&scorer, &lambda, &reqs).unwrap();

        let space = &enc.action_space;
        let mut costs = [0.0; PHASES];
        let mut ret = 0.0;
        for req in &reqs {
            let trace = serve_request(
                &params,
                &enc,
                &table,
                req,
                &ClampLevel::none(space),
                NoiseMode::Free,
            )
            .unwrap();
            for t in 0..PHASES {
                costs[t] += trace.costs[t];
            }
            ret += trace.reward;
        }
        for t in 0..PHASES {
            assert!((costs[t] - eval.costs[t]).abs() < 1e-9);
        }
        assert!((ret - eval.ret).abs() < 1e-9);
    }

    #[test]
    fn slice_fallback_is_flagged_and_serving_continues() {
        let (reqs, enc) = env(30, 3, 4);
        let params = net(&enc, 5);
        // Table covers only slice 0; slices 1 and 2 fall back.
        let short = LambdaTable::uniform(1, LambdaVector::zero());
        let budgets = BudgetSpec::from_rates([10.0, 500.0, 10.0]);
        let out = run_stream(&params, &enc, &short, &reqs, &budgets, &StreamConfig::default())
            .unwrap();
        let outside = reqs.iter().filter(|r| r.time_slice >= 1).count();
        assert_eq!(out.slice_fallbacks, outside);
        assert!(outside > 0);
    }

    #[test]
    fn stream_totals_equal_the_sum_of_individual_traces() {
        let (reqs, enc) = env(40, 1, 5);
        let params = net(&enc, 9);
        let table = LambdaTable::uniform(1, LambdaVector::new([0.1, 0.02, 0.4]).unwrap());
        let budgets = BudgetSpec::from_rates([10.0, 500.0, 10.0]);
        let cfg = StreamConfig::default();
        let out = run_stream(&params, &enc, &table, &reqs, &budgets, &cfg).unwrap();

        let space = &enc.action_space;
        let mut costs = [0.0; PHASES];
        let mut ret = 0.0;
        for req in &reqs {
            let t = serve_request(
                &params,
                &enc,
                &table,
                req,
                &ClampLevel::none(space),
                NoiseMode::Free,
            )
            .unwrap();
            for i in 0..PHASES {
                costs[i] += t.costs[i];
            }
            ret += t.reward;
        }
        assert_eq!(out.slices.len(), 1);
        assert_eq!(out.slices[0].requests, reqs.len());
        for i in 0..PHASES {
            assert!((out.totals.costs[i] - costs[i]).abs() < 1e-9);
        }
        assert!((out.totals.ret - ret).abs() < 1e-9);
        assert_eq!(out.totals.requests, reqs.len());
    }

    #[test]
    fn slice_aggregates_ignore_request_order_when_unclamped() {
        let (mut reqs, enc) = env(50, 2, 6);
        let params = net(&enc, 13);
        let table = LambdaTable::uniform(2, LambdaVector::new([0.2, 0.01, 0.3]).unwrap());
        let budgets = BudgetSpec::from_rates([10.0, 500.0, 10.0]);
        let cfg = StreamConfig::default(); // infinite capacity: never clamps
        let a = run_stream(&params, &enc, &table, &reqs, &budgets, &cfg).unwrap();
        reqs.reverse();
        let b = run_stream(&params, &enc, &table, &reqs, &budgets, &cfg).unwrap();
        for (ra, rb) in a.slices.iter().zip(&b.slices) {
            assert_eq!(ra.slice, rb.slice);
            assert_eq!(ra.requests, rb.requests);
            for t in 0..PHASES {
                assert!((ra.utilization[t] - rb.utilization[t]).abs() < 1e-9);
            }
            assert!((ra.ret - rb.ret).abs() < 1e-9);
        }
    }

    #[test]
    fn corrected_table_keeps_slice_utilization_in_band() {
        let (reqs, enc) = env(400, 4, 7);
        let params = net(&enc, 17);
        let scorer = NetScorer { params: &params, encoding: &enc };

        // Budget the net's unconstrained behavior down to ~70%.
        let free = evaluate_policy(&scorer, &LambdaVector::zero(), &reqs).unwrap();
        let rates = [0, 1, 2]
            .map(|t| 0.7 * free.costs[t] / reqs.len() as f64);
        let budgets = BudgetSpec::from_rates(rates);
        let band = 0.005;
        let corr =
            correct_all(&scorer, &reqs, &budgets, 4, &LambdaVector::zero(), band).unwrap();

        let out = run_stream(
            &params,
            &enc,
            &corr.table,
            &reqs,
            &budgets,
            &StreamConfig::default(),
        )
        .unwrap();
        for (report, slice_corr) in out.slices.iter().zip(&corr.slices) {
            for (t, search) in slice_corr.searches.iter().enumerate() {
                if search.converged && !search.used_grid {
                    assert!(
                        report.utilization[t] <= 1.0 + band + 1e-9,
                        "slice {} phase {} at {:.4}",
                        report.slice,
                        t,
                        report.utilization[t]
                    );
                }
            }
        }
    }

    /// Zero-trunk net with per-phase head biases: q-values equal the biases
    /// everywhere, so greedy play is a fixed preference order.
    fn preference_net(enc: &EncodingSpec, prefs: [&[f64]; PHASES]) -> QNetworkParams {
        let mut p =
            QNetworkParams::init(enc.len(), &[4], 1, enc.action_space.sizes(), 0).unwrap();
        let zeros = vec![0.0; p.flat_len()];
        p.assign_flat(&zeros).unwrap();
        for t in 0..PHASES {
            p.phase_heads[t].b.copy_from_slice(prefs[t]);
        }
        p
    }

    #[test]
    fn traffic_spike_is_clamped_back_under_105_percent() {
        let (reqs, enc) = env(360, 3, 8);
        // Value-greedy serving: always the biggest queue bucket and the
        // heaviest model, so the clamp cap has authority over the whole
        // output range (queue cost is linear in the admissible cap).
        let space_sizes = enc.action_space.sizes();
        let channel_pref: Vec<f64> = (0..space_sizes[0]).map(|a| a as f64).collect();
        let queue_pref: Vec<f64> = (0..space_sizes[1]).map(|a| a as f64).collect();
        let model_pref: Vec<f64> = (0..space_sizes[2]).map(|a| a as f64).collect();
        let params = preference_net(&enc, [&channel_pref, &queue_pref, &model_pref]);
        let table = LambdaTable::uniform(3, LambdaVector::zero());
        let budgets = BudgetSpec::from_rates([10.0, 500.0, 10.0]);

        // Middle slice carries doubled traffic: its own requests plus slice
        // 0's remapped into it.
        let mut stream: Vec<SyntheticRequest> = reqs.clone();
        let extra: Vec<SyntheticRequest> = reqs
            .iter()
            .filter(|r| r.time_slice == 0)
            .map(|r| {
                let mut dup = r.clone();
                dup.id += 1_000_000;
                dup.time_slice = 1;
                dup
            })
            .collect();
        stream.extend(extra);

        // Capacity set so normal ticks run near 90% load.
        let space = &enc.action_space;
        let normal_cost: f64 = reqs
            .iter()
            .filter(|r| r.time_slice == 0)
            .map(|r| {
                serve_request(
                    &params,
                    &enc,
                    &table,
                    r,
                    &ClampLevel::none(space),
                    NoiseMode::Free,
                )
                .unwrap()
                .costs
                .iter()
                .sum::<f64>()
            })
            .sum();
        let ticks = 40usize;
        let capacity = normal_cost / ticks as f64 / 0.9;
        // Soft gains: the clamp acts on a near-static plant, so a large kp
        // limit-cycles between clamped and released.
        let cfg = StreamConfig {
            ticks_per_slice: ticks,
            capacity_per_tick: capacity,
            ema_alpha: 0.5,
            pid: PidConfig { kp: 0.35, ki: 0.12, integral_limit: 10.0, ..PidConfig::default() },
            ..StreamConfig::default()
        };
        let out = run_stream(&params, &enc, &table, &stream, &budgets, &cfg).unwrap();

        let spike: Vec<&ControlSample> =
            out.control.iter().filter(|c| c.slice == 1).collect();
        let peak = spike.iter().map(|c| c.measurement).fold(0.0, f64::max);
        assert!(peak > 1.2, "spike never registered, peak {peak:.2}");
        assert!(
            out.slices[1].clamp_seconds > 0.0,
            "clamp never engaged during the spike"
        );
        // Load must come back under 105% within the 25-tick window and the
        // tail of the spike must hold near the setpoint.
        let recovery = spike.iter().position(|c| c.measurement < 1.05);
        let at = recovery.expect("load never recovered below 105%");
        assert!(at < 25, "recovered only {at} ticks into the spike");
        let tail = &spike[spike.len() - 10..];
        for c in tail {
            assert!(c.measurement < 1.15, "late-spike load at {:.3}", c.measurement);
        }
        let settled = tail.iter().filter(|c| c.measurement < 1.05).count();
        assert!(settled >= 8, "only {settled}/10 tail ticks under 105%");
    }

    #[test]
    fn refresh_updates_the_live_table_and_is_off_by_default() {
        let (reqs, enc) = env(120, 2, 9);
        let params = net(&enc, 23);
        let scorer = NetScorer { params: &params, encoding: &enc };
        let free = evaluate_policy(&scorer, &LambdaVector::zero(), &reqs).unwrap();
        let rates = [0, 1, 2].map(|t| 0.6 * free.costs[t] / reqs.len() as f64);
        let budgets = BudgetSpec::from_rates(rates);
        let table = LambdaTable::uniform(2, LambdaVector::zero());

        let off = run_stream(&params, &enc, &table, &reqs, &budgets, &StreamConfig::default())
            .unwrap();
        assert_eq!(off.table, table);

        let cfg = StreamConfig { refresh_band: Some(0.005), ..StreamConfig::default() };
        let on = run_stream(&params, &enc, &table, &reqs, &budgets, &cfg).unwrap();
        assert_ne!(on.table, table);
        // The refreshed table reins in the over-budget slices it saw.
        for vec in &on.table.per_slice {
            for l in vec.as_array() {
                assert!(l >= 0.0 && l.is_finite());
            }
        }
    }

    #[test]
    fn stream_is_deterministic() {
        let (reqs, enc) = env(80, 2, 10);
        let params = net(&enc, 29);
        let table = LambdaTable::uniform(2, LambdaVector::new([0.1, 0.01, 0.2]).unwrap());
        let budgets = BudgetSpec::from_rates([10.0, 400.0, 10.0]);
        let cfg = StreamConfig {
            capacity_per_tick: 2000.0,
            noise: NoiseMode::Bounded(0.1),
            ..StreamConfig::default()
        };
        let a = run_stream(&params, &enc, &table, &reqs, &budgets, &cfg).unwrap();
        let b = run_stream(&params, &enc, &table, &reqs, &budgets, &cfg).unwrap();
        assert_eq!(a.totals, b.totals);
        assert_eq!(a.control, b.control);
        assert_eq!(a.slices, b.slices);
    }

    #[test]
    fn config_validation_rejects_degenerate_streams() {
        assert!(StreamConfig { ticks_per_slice: 0, ..Default::default() }.validate().is_err());
        assert!(
            StreamConfig { capacity_per_tick: 0.0, ..Default::default() }.validate().is_err()
        );
        assert!(StreamConfig { ema_alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(StreamConfig { ema_alpha: 1.5, ..Default::default() }.validate().is_err());
        let _ = ActionSpaceSpec::default();
    }
}
