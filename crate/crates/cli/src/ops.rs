//! Command bodies. Shared plumbing: effective-config resolution, budget
//! anchoring, decision-replay evaluation, the results-table writer, and a
//! deterministic worker pool.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use cralloc::baselines::{
    cem_env_objective, cem_train, dcaf_policy, linear_rollout, LinearPolicyParams, StaticRule,
};
use cralloc::correct::{correct_all, greedy_rollout, NetScorer, OracleScorer};
use cralloc::domain::{BudgetSpec, LambdaTable, LambdaVector, Phase, RewardWeights, PHASES};
use cralloc::io::{
    config_fingerprint, lambda_table_rows, load_checkpoint, load_experiment_config, read_dataset,
    read_lambda_table, read_results, read_transitions, render_results, render_sweep,
    save_checkpoint, write_cem_log, write_control_log, write_dataset, write_lambda_table,
    write_results, write_serving_report, write_sweep, write_telemetry, write_transitions,
    Checkpoint, ExperimentConfig, ResultRow, SweepRow, CHECKPOINT_VERSION,
};
use cralloc::metrics::{cost_metric, normalized_score, reward, utilizations};
use cralloc::serving::run_stream;
use cralloc::sim::{generate_dataset, rollout, EncodingSpec, EnvConfig, NoiseMode, SyntheticRequest};
use cralloc::train::{collect_behavior_data, BehaviorMix, TransitionRecord};

use crate::{
    BaselineRunArgs, CollectArgs, CommonArgs, CorrectArgs, EvalArgs, ServeArgs, SweepArgs,
    TrainArgs,
};

const DATASET_FILE: &str = "dataset.jsonl";
const TRANSITIONS_FILE: &str = "transitions.jsonl";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const LAMBDA_TABLE_FILE: &str = "lambda_table.csv";
const TELEMETRY_FILE: &str = "telemetry.csv";
const RESULTS_CSV: &str = "results.csv";
const RESULTS_TXT: &str = "results.txt";
const SERVING_FILE: &str = "serving.csv";
const CONTROL_FILE: &str = "control.csv";
const CEM_LOG_FILE: &str = "cem_log.csv";
const CEM_POLICY_FILE: &str = "cem_policy.json";
const SWEEP_CSV: &str = "sweep.csv";
const SWEEP_TXT: &str = "sweep.txt";
const WORKERS_ENV: &str = "CRALLOC_WORKERS";

const SWEEP_ALPHAS: [f64; 6] = [0.001, 0.01, 0.05, 0.1, 0.5, 1.0];
const SWEEP_KS: [usize; 6] = [1, 5, 10, 15, 20, 30];

struct Ctx {
    cfg: ExperimentConfig,
    /// Hash of the full effective config; embedded in every artifact.
    fingerprint: String,
    /// Hash of (env, weights, budgets) only: the part that makes result rows
    /// comparable. Training variants share it, so one table can hold them.
    identity: String,
    out_dir: PathBuf,
    encoding: EncodingSpec,
}

fn build_ctx(common: &CommonArgs, tweak: impl FnOnce(&mut ExperimentConfig)) -> Result<Ctx> {
    let mut cfg = match &common.config {
        Some(path) => load_experiment_config(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.env.seed = seed;
        cfg.train.seed = seed;
        cfg.cem.seed = seed;
    }
    tweak(&mut cfg);
    cfg.validate()?;
    fs::create_dir_all(&common.out_dir)
        .with_context(|| format!("creating {}", common.out_dir.display()))?;
    let fingerprint = cfg.fingerprint()?;
    let identity = identity_fingerprint(&cfg)?;
    let encoding = EncodingSpec::new(cfg.env.slices, cfg.env.action_space.clone());
    Ok(Ctx { cfg, fingerprint, identity, out_dir: common.out_dir.clone(), encoding })
}

fn identity_fingerprint(cfg: &ExperimentConfig) -> Result<String> {
    #[derive(Serialize)]
    struct Identity<'a> {
        env: &'a EnvConfig,
        weights: &'a RewardWeights,
        budgets: &'a Option<BudgetSpec>,
    }
    Ok(config_fingerprint(&Identity {
        env: &cfg.env,
        weights: &cfg.weights,
        budgets: &cfg.budgets,
    })?)
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

fn artifact(dir: &Path, flag: &Option<PathBuf>, name: &str) -> PathBuf {
    flag.clone().unwrap_or_else(|| dir.join(name))
}

fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(raw) => raw
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| anyhow!("{WORKERS_ENV} must be a positive integer, got '{raw}'")),
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(err) => Err(anyhow!("{WORKERS_ENV}: {err}")),
    }
}

/// Indexed map over `items` on a fixed-size thread pool. Each result lands in
/// its input's slot, so the output is independent of the worker count.
fn parallel_map<T, U, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, item)| f(i, item)).collect();
    }
    let slots: Vec<Mutex<Option<Result<U>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let cursor = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(items.len()) {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(i, &items[i]);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

/// The configured budgets when present; otherwise the mid-tier static rule's
/// measured noise-free cost per slice and phase, putting that rule at exactly
/// 100% utilization on this dataset.
fn resolve_budgets(cfg: &ExperimentConfig, reqs: &[SyntheticRequest]) -> Result<BudgetSpec> {
    if let Some(budgets) = &cfg.budgets {
        return Ok(budgets.clone());
    }
    if reqs.is_empty() {
        bail!("cannot anchor budgets on an empty dataset");
    }
    let rule = StaticRule::default_for(&cfg.env.action_space);
    rule.validate(&cfg.env.action_space)?;
    let decisions = rule.decisions();
    let mut per_slice = vec![[0.0; PHASES]; cfg.env.slices];
    let mut total = [0.0; PHASES];
    for req in reqs {
        let row = per_slice.get_mut(req.time_slice).ok_or_else(|| {
            anyhow!(
                "request {} sits in slice {}, outside the configured {}",
                req.id,
                req.time_slice,
                cfg.env.slices
            )
        })?;
        let (_, costs) = rollout(req, &decisions, NoiseMode::Free)?;
        for t in 0..PHASES {
            row[t] += costs[t];
            total[t] += costs[t];
        }
    }
    let rates = total.map(|c| c / reqs.len() as f64);
    if rates.iter().any(|r| !(*r > 0.0)) {
        bail!(
            "the anchor rule has a zero-cost phase on this environment; \
             state budgets explicitly in the config"
        );
    }
    let spec = if per_slice.iter().all(|row| row.iter().all(|c| *c > 0.0)) {
        BudgetSpec { per_request_rates: rates, per_slice: Some(per_slice) }
    } else {
        eprintln!("note: some slices carry no traffic; using flat per-request budget rates");
        BudgetSpec::from_rates(rates)
    };
    spec.validate()?;
    Ok(spec)
}

fn count_slices(reqs: &[SyntheticRequest], slices: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; slices];
    for req in reqs {
        let slot = counts.get_mut(req.time_slice).ok_or_else(|| {
            anyhow!(
                "request {} sits in slice {}, outside the configured {}",
                req.id,
                req.time_slice,
                slices
            )
        })?;
        *slot += 1;
    }
    Ok(counts)
}

struct TableEval {
    costs: [f64; PHASES],
    ret: f64,
    requests: usize,
    slice_counts: Vec<usize>,
}

/// Replays one decision triple per request (noise-free) and aggregates cost
/// and weighted return. All result rows go through here, so every policy is
/// scored on the same metric.
fn eval_decisions<F>(
    reqs: &[SyntheticRequest],
    weights: &RewardWeights,
    slices: usize,
    mut decide: F,
) -> Result<TableEval>
where
    F: FnMut(usize, &SyntheticRequest) -> Result<[usize; PHASES]>,
{
    if reqs.is_empty() {
        bail!("empty evaluation set");
    }
    let mut slice_counts = vec![0usize; slices];
    let mut costs = [0.0; PHASES];
    let mut ret = 0.0;
    for (i, req) in reqs.iter().enumerate() {
        let slot = slice_counts.get_mut(req.time_slice).ok_or_else(|| {
            anyhow!(
                "request {} sits in slice {}, outside the configured {}",
                req.id,
                req.time_slice,
                slices
            )
        })?;
        *slot += 1;
        let decisions = decide(i, req)?;
        let (outcome, c) = rollout(req, &decisions, NoiseMode::Free)?;
        for t in 0..PHASES {
            costs[t] += c[t];
        }
        ret += reward(&outcome, weights);
    }
    Ok(TableEval { costs, ret, requests: reqs.len(), slice_counts })
}

struct Anchors {
    static_ret: f64,
    expert_ret: f64,
}

/// Normalized-score anchors on this dataset: the fixed rule maps to 0, the
/// value-maximal (budget-ignoring) policy to 100.
fn compute_anchors(cfg: &ExperimentConfig, reqs: &[SyntheticRequest]) -> Result<Anchors> {
    let rule = StaticRule::default_for(&cfg.env.action_space);
    rule.validate(&cfg.env.action_space)?;
    let fixed = eval_decisions(reqs, &cfg.weights, cfg.env.slices, |_, _| Ok(rule.decisions()))?;
    let zero = LambdaVector::zero();
    let expert = eval_decisions(reqs, &cfg.weights, cfg.env.slices, |_, req| {
        Ok(greedy_rollout(&OracleScorer, &zero, req)?.decisions)
    })?;
    Ok(Anchors { static_ret: fixed.ret, expert_ret: expert.ret })
}

fn result_row(
    label: &str,
    eval: &TableEval,
    budgets: &BudgetSpec,
    anchors: &Anchors,
) -> Result<ResultRow> {
    let totals = budgets.total_budgets(&eval.slice_counts)?;
    let utils = utilizations(&eval.costs, &totals)?;
    let cost = cost_metric(&eval.costs, &totals)?;
    let score = normalized_score(eval.ret, anchors.static_ret, anchors.expert_ret).ok();
    Ok(ResultRow {
        label: label.to_string(),
        ret: eval.ret,
        cost,
        util_channel: utils[0],
        util_queue: utils[1],
        util_model: utils[2],
        score,
    })
}

/// Appends (or refreshes) one row of <out-dir>/results.csv and re-renders the
/// text table. Rows from a different environment, reward weighting, or budget
/// line are rejected: they would not be comparable.
fn append_result(ctx: &Ctx, row: ResultRow) -> Result<()> {
    let path = ctx.out_dir.join(RESULTS_CSV);
    let mut rows = if path.exists() {
        let (fp, rows) = read_results(&path)?;
        if fp.as_deref() != Some(ctx.identity.as_str()) {
            bail!(
                "{} holds rows for a different experiment (environment, weights, or budgets \
                 changed); move it aside or use a fresh --out-dir",
                path.display()
            );
        }
        rows
    } else {
        Vec::new()
    };
    rows.retain(|r| r.label != row.label);
    rows.push(row);
    write_results(&path, &ctx.identity, &rows)?;
    let text = render_results(&rows);
    fs::write(ctx.out_dir.join(RESULTS_TXT), &text)?;
    print!("{text}");
    Ok(())
}

fn load_dataset_at(ctx: &Ctx, flag: &Option<PathBuf>) -> Result<Vec<SyntheticRequest>> {
    let path = artifact(&ctx.out_dir, flag, DATASET_FILE);
    if !path.exists() {
        bail!(
            "no dataset at {}; run `cralloc gen-data` first or pass --data",
            path.display()
        );
    }
    let (_, reqs) = read_dataset(&path)?;
    Ok(reqs)
}

fn load_transitions_at(ctx: &Ctx, flag: &Option<PathBuf>) -> Result<Vec<TransitionRecord>> {
    let path = artifact(&ctx.out_dir, flag, TRANSITIONS_FILE);
    if !path.exists() {
        bail!(
            "no transition log at {}; run `cralloc collect` first or pass --transitions",
            path.display()
        );
    }
    let (_, log) = read_transitions(&path)?;
    Ok(log)
}

fn load_ckpt_at(ctx: &Ctx, flag: &Option<PathBuf>) -> Result<Checkpoint> {
    let path = artifact(&ctx.out_dir, flag, CHECKPOINT_FILE);
    if !path.exists() {
        bail!(
            "no checkpoint at {}; run `cralloc train` first or pass --checkpoint",
            path.display()
        );
    }
    load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))
}

/// The corrected multiplier table when one exists; otherwise a uniform table
/// holding the checkpoint's training-time multipliers. The second return is
/// the default row label for the policy this table represents.
fn load_table_for(
    ctx: &Ctx,
    flag: &Option<PathBuf>,
    ckpt: &Checkpoint,
) -> Result<(LambdaTable, String)> {
    let path = artifact(&ctx.out_dir, flag, LAMBDA_TABLE_FILE);
    if path.exists() {
        let (table, _, _) = read_lambda_table(&path)?;
        Ok((table, format!("{}+corrected", ckpt.algo.label())))
    } else if flag.is_some() {
        bail!("no multiplier table at {}", path.display());
    } else {
        eprintln!(
            "note: {} not found; using the checkpoint's training-time multipliers",
            path.display()
        );
        let table = LambdaTable::uniform(ctx.cfg.env.slices, ckpt.lambda.clone());
        Ok((table, ckpt.algo.label().to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct CemPolicyFile {
    kind: String,
    version: u32,
    fingerprint: String,
    feature_len: usize,
    flat: Vec<f64>,
}

fn write_cem_policy(path: &Path, fingerprint: &str, feature_len: usize, flat: &[f64]) -> Result<()> {
    let file = CemPolicyFile {
        kind: "cem-policy".into(),
        version: 1,
        fingerprint: fingerprint.into(),
        feature_len,
        flat: flat.to_vec(),
    };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

fn read_cem_policy(path: &Path, encoding: &EncodingSpec) -> Result<LinearPolicyParams> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: CemPolicyFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    if file.kind != "cem-policy" {
        bail!("{} is not a scripted-policy file", path.display());
    }
    if file.feature_len != encoding.len() {
        bail!(
            "scripted policy was fit for encoding width {}, this environment has {}",
            file.feature_len,
            encoding.len()
        );
    }
    Ok(LinearPolicyParams::from_flat(&file.flat, file.feature_len)?)
}

pub(crate) fn gen_data(args: &CommonArgs) -> Result<()> {
    let ctx = build_ctx(args, |_| {})?;
    let reqs = generate_dataset(&ctx.cfg.env)?;
    let path = ctx.out_dir.join(DATASET_FILE);
    write_dataset(&path, &ctx.fingerprint, ctx.cfg.env.seed, &reqs)?;
    let profile = ctx.cfg.env.traffic_profile();
    println!(
        "dataset: {} requests over {} slices (peak slice holds {}) -> {}",
        reqs.len(),
        ctx.cfg.env.slices,
        profile.iter().max().copied().unwrap_or(0),
        path.display()
    );
    println!("config: {}", short(&ctx.fingerprint));
    Ok(())
}

pub(crate) fn collect(args: &CollectArgs) -> Result<()> {
    let ctx = build_ctx(&args.common, |_| {})?;
    let reqs = load_dataset_at(&ctx, &args.data)?;
    let seed = ctx.cfg.train.seed;
    let noise = ctx.cfg.collect.noise;
    let scripted_fraction = ctx.cfg.collect.scripted_fraction;
    let scripted = if scripted_fraction > 0.0 {
        let path = artifact(&ctx.out_dir, &args.scripted, CEM_POLICY_FILE);
        if !path.exists() {
            bail!(
                "collect.scripted_fraction > 0 needs a scripted policy at {}; \
                 run `cralloc baseline cem` first or pass --scripted",
                path.display()
            );
        }
        Some(read_cem_policy(&path, &ctx.encoding)?)
    } else {
        None
    };

    let workers = worker_count()?;
    let chunk = reqs.len().div_ceil(workers.max(1)).max(1);
    let chunks: Vec<&[SyntheticRequest]> = reqs.chunks(chunk).collect();
    // Per-request RNG streams make chunked collection equal to one pass.
    let parts = parallel_map(&chunks, workers, |_, part| {
        let mix = BehaviorMix {
            scripted: scripted.as_ref().map(|p| (p, &ctx.encoding)),
            scripted_fraction,
        };
        Ok(collect_behavior_data(part, &mix, noise, seed)?)
    })?;
    let log: Vec<TransitionRecord> = parts.into_iter().flatten().collect();

    let path = ctx.out_dir.join(TRANSITIONS_FILE);
    write_transitions(&path, &ctx.fingerprint, seed, &log)?;
    println!(
        "transitions: {} records from {} requests ({:.0}% scripted) -> {}",
        log.len(),
        reqs.len(),
        100.0 * scripted_fraction,
        path.display()
    );
    Ok(())
}

pub(crate) fn train(args: &TrainArgs) -> Result<()> {
    let ctx = build_ctx(&args.common, |cfg| {
        if let Some(algo) = args.algo {
            cfg.train.algo = algo;
        }
        if let Some(flag) = args.adaptive_lambda {
            cfg.train.adaptive_lambda = flag.as_bool();
        }
    })?;
    let transitions = load_transitions_at(&ctx, &args.transitions)?;
    let eval_reqs = load_dataset_at(&ctx, &args.data)?;
    let budgets = resolve_budgets(&ctx.cfg, &eval_reqs)?;
    let slice_counts = count_slices(&eval_reqs, ctx.cfg.env.slices)?;
    let eval_budgets = budgets.total_budgets(&slice_counts)?;

    let started = Instant::now();
    let outcome = cralloc::train::train(
        &transitions,
        &ctx.encoding,
        &ctx.cfg.train,
        &budgets,
        &eval_reqs,
        eval_budgets,
    )?;
    let seconds = started.elapsed().as_secs_f64();

    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        fingerprint: ctx.fingerprint.clone(),
        algo: ctx.cfg.train.algo,
        encoding: ctx.encoding.clone(),
        params: outcome.params,
        lambda: outcome.lambda,
    };
    let ckpt_path = ctx.out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt_path, &ckpt)?;
    write_telemetry(&ctx.out_dir.join(TELEMETRY_FILE), &ctx.fingerprint, &outcome.telemetry)?;

    let final_loss = outcome.loss_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} for {} iterations in {:.1}s (final loss {:.4}) -> {}",
        ctx.cfg.train.algo.label(),
        ctx.cfg.train.iterations,
        seconds,
        final_loss,
        ckpt_path.display()
    );
    let lambda = ckpt.lambda.as_array();
    println!(
        "multipliers: channel {:.4}  queue {:.4}  model {:.4}",
        lambda[0], lambda[1], lambda[2]
    );
    if let Some(last) = outcome.telemetry.last() {
        let final_rows: Vec<_> =
            outcome.telemetry.iter().filter(|r| r.step == last.step).collect();
        let util = |p: Phase| {
            final_rows
                .iter()
                .find(|r| r.phase == p)
                .map_or(f64::NAN, |r| 100.0 * r.utilization)
        };
        println!(
            "final eval: return {:.2}, utilization channel {:.1}%  queue {:.1}%  model {:.1}%",
            last.ret,
            util(Phase::Channel),
            util(Phase::Queue),
            util(Phase::Model)
        );
    }
    Ok(())
}

pub(crate) fn correct(args: &CorrectArgs) -> Result<()> {
    let ctx = build_ctx(&args.common, |_| {})?;
    let ckpt = load_ckpt_at(&ctx, &args.checkpoint)?;
    let reqs = load_dataset_at(&ctx, &args.data)?;
    let budgets = resolve_budgets(&ctx.cfg, &reqs)?;
    let scorer = NetScorer { params: &ckpt.params, encoding: &ckpt.encoding };

    let result = correct_all(
        &scorer,
        &reqs,
        &budgets,
        ctx.cfg.env.slices,
        &ckpt.lambda,
        ctx.cfg.correction.band,
    )?;
    let rows = lambda_table_rows(&result);
    let path = ctx.out_dir.join(LAMBDA_TABLE_FILE);
    write_lambda_table(&path, &ctx.fingerprint, &rows)?;

    let mut worst = [0.0f64; PHASES];
    let mut max_probes = 0usize;
    for slice in &result.slices {
        for search in &slice.searches {
            let t = search.phase.index();
            worst[t] = worst[t].max((search.utilization - 1.0).abs());
            max_probes = max_probes.max(search.probes.len());
        }
    }
    println!(
        "multiplier table: {} slices corrected ({} carried traffic) -> {}",
        result.table.slices(),
        result.slices.len(),
        path.display()
    );
    println!(
        "worst deviation from budget: channel {:.2}%  queue {:.2}%  model {:.2}% \
         (max {} probes per search)",
        100.0 * worst[0],
        100.0 * worst[1],
        100.0 * worst[2],
        max_probes
    );

    if !result.converged {
        let mut bad = Vec::new();
        for slice in &result.slices {
            for search in &slice.searches {
                if !search.converged {
                    bad.push(format!(
                        "slice {} {} at {:.1}%",
                        slice.slice,
                        search.phase.label(),
                        100.0 * search.utilization
                    ));
                }
            }
        }
        bail!(
            "correction finished outside the ±{:.1}% band for {} searches: {}",
            100.0 * ctx.cfg.correction.band,
            bad.len(),
            bad.join(", ")
        );
    }
    Ok(())
}

pub(crate) fn eval(args: &EvalArgs) -> Result<()> {
    let ctx = build_ctx(&args.common, |_| {})?;
    let ckpt = load_ckpt_at(&ctx, &args.checkpoint)?;
    let (table, default_label) = load_table_for(&ctx, &args.lambda_table, &ckpt)?;
    let reqs = load_dataset_at(&ctx, &args.data)?;
    let budgets = resolve_budgets(&ctx.cfg, &reqs)?;
    let anchors = compute_anchors(&ctx.cfg, &reqs)?;
    let scorer = NetScorer { params: &ckpt.params, encoding: &ckpt.encoding };

    let eval = eval_decisions(&reqs, &ctx.cfg.weights, ctx.cfg.env.slices, |_, req| {
        Ok(greedy_rollout(&scorer, table.get(req.time_slice), req)?.decisions)
    })?;
    let label = args.label.clone().unwrap_or(default_label);
    println!("scored {} requests as '{}'", eval.requests, label);
    let row = result_row(&label, &eval, &budgets, &anchors)?;
    append_result(&ctx, row)
}

fn baseline_prep(args: &BaselineRunArgs) -> Result<(Ctx, Vec<SyntheticRequest>, BudgetSpec, Anchors)> {
    let ctx = build_ctx(&args.common, |_| {})?;
    let reqs = load_dataset_at(&ctx, &args.data)?;
    let budgets = resolve_budgets(&ctx.cfg, &reqs)?;
    let anchors = compute_anchors(&ctx.cfg, &reqs)?;
    Ok((ctx, reqs, budgets, anchors))
}

pub(crate) fn baseline_static(args: &BaselineRunArgs) -> Result<()> {
    let (ctx, reqs, budgets, anchors) = baseline_prep(args)?;
    let rule = StaticRule::default_for(&ctx.cfg.env.action_space);
    rule.validate(&ctx.cfg.env.action_space)?;
    let eval =
        eval_decisions(&reqs, &ctx.cfg.weights, ctx.cfg.env.slices, |_, _| Ok(rule.decisions()))?;
    let row = result_row("static", &eval, &budgets, &anchors)?;
    append_result(&ctx, row)
}

pub(crate) fn baseline_dcaf(args: &BaselineRunArgs) -> Result<()> {
    let (ctx, reqs, budgets, anchors) = baseline_prep(args)?;
    let rule = StaticRule::default_for(&ctx.cfg.env.action_space);
    rule.validate(&ctx.cfg.env.action_space)?;
    let slice_counts = count_slices(&reqs, ctx.cfg.env.slices)?;
    let queue_budget = budgets.total_budgets(&slice_counts)?[Phase::Queue.index()];

    let outcome = dcaf_policy(&reqs, &rule, queue_budget, ctx.cfg.correction.band)?;
    if !outcome.converged {
        eprintln!(
            "note: global multiplier search stopped at {:.1}% of the queue budget",
            100.0 * outcome.utilization
        );
    }
    let eval = eval_decisions(&reqs, &ctx.cfg.weights, ctx.cfg.env.slices, |i, _| {
        Ok([rule.channel_strategy, outcome.actions[i], rule.model])
    })?;
    let row = result_row("dcaf", &eval, &budgets, &anchors)?;
    append_result(&ctx, row)?;
    println!(
        "global queue multiplier: {:.5} ({} probes)",
        outcome.lambda,
        outcome.probes.len()
    );
    Ok(())
}

pub(crate) fn baseline_cem(args: &BaselineRunArgs) -> Result<()> {
    let (ctx, reqs, budgets, anchors) = baseline_prep(args)?;
    let feature_len = ctx.encoding.len();
    let dim = PHASES * feature_len;
    ctx.cfg.cem.validate(dim)?;
    let slice_counts = count_slices(&reqs, ctx.cfg.env.slices)?;
    let totals = budgets.total_budgets(&slice_counts)?;

    let started = Instant::now();
    let objective = cem_env_objective(&ctx.encoding, &reqs, totals, ctx.cfg.cem.penalty);
    let outcome = cem_train(&ctx.cfg.cem, dim, objective)?;
    let seconds = started.elapsed().as_secs_f64();
    write_cem_log(&ctx.out_dir.join(CEM_LOG_FILE), &ctx.fingerprint, &outcome.log)?;

    let (flat, note) = match &outcome.best {
        Some((flat, score)) => {
            (flat.clone(), format!("best feasible candidate (raw return {:.2})", score.raw))
        }
        None => (outcome.mu.clone(), "no feasible candidate; using the final mean".to_string()),
    };
    let policy_path = ctx.out_dir.join(CEM_POLICY_FILE);
    write_cem_policy(&policy_path, &ctx.fingerprint, feature_len, &flat)?;
    let params = LinearPolicyParams::from_flat(&flat, feature_len)?;

    let eval = eval_decisions(&reqs, &ctx.cfg.weights, ctx.cfg.env.slices, |_, req| {
        Ok(linear_rollout(&params, &ctx.encoding, req)?.0)
    })?;
    let row = result_row("cem", &eval, &budgets, &anchors)?;
    append_result(&ctx, row)?;
    println!("cem: {} in {:.1}s -> {}", note, seconds, policy_path.display());
    Ok(())
}

pub(crate) fn serve(args: &ServeArgs) -> Result<()> {
    let ctx = build_ctx(&args.common, |_| {})?;
    let ckpt = load_ckpt_at(&ctx, &args.checkpoint)?;
    let (table, _) = load_table_for(&ctx, &args.lambda_table, &ckpt)?;
    let reqs = load_dataset_at(&ctx, &args.data)?;
    let budgets = resolve_budgets(&ctx.cfg, &reqs)?;
    if ctx.cfg.weights != RewardWeights::default() {
        eprintln!("note: stream returns are reported with unit reward weights");
    }

    let outcome = run_stream(&ckpt.params, &ckpt.encoding, &table, &reqs, &budgets, &ctx.cfg.serving)?;
    write_serving_report(&ctx.out_dir.join(SERVING_FILE), &ctx.fingerprint, &outcome.slices)?;
    write_control_log(&ctx.out_dir.join(CONTROL_FILE), &ctx.fingerprint, &outcome.control)?;

    let slice_counts = count_slices(&reqs, outcome.slices.len())?;
    let totals = budgets.total_budgets(&slice_counts)?;
    let utils = utilizations(&outcome.totals.costs, &totals)?;
    let clamp_seconds: f64 = outcome.slices.iter().map(|s| s.clamp_seconds).sum();
    let peak = outcome.control.iter().map(|c| c.measurement).fold(0.0, f64::max);
    println!(
        "served {} requests over {} slices: return {:.2}",
        outcome.totals.requests,
        outcome.slices.len(),
        outcome.totals.ret
    );
    println!(
        "utilization: channel {:.1}%  queue {:.1}%  model {:.1}%",
        100.0 * utils[0],
        100.0 * utils[1],
        100.0 * utils[2]
    );
    println!(
        "controller: peak load {:.2}, clamped {:.1}s, {} table fallbacks",
        peak, clamp_seconds, outcome.slice_fallbacks
    );
    Ok(())
}

pub(crate) fn sweep(args: &SweepArgs) -> Result<()> {
    let ctx = build_ctx(&args.common, |_| {})?;
    let transitions = load_transitions_at(&ctx, &args.transitions)?;
    let reqs = load_dataset_at(&ctx, &args.data)?;
    let budgets = resolve_budgets(&ctx.cfg, &reqs)?;
    let slice_counts = count_slices(&reqs, ctx.cfg.env.slices)?;
    let eval_budgets = budgets.total_budgets(&slice_counts)?;

    let alphas = if args.alphas.is_empty() { SWEEP_ALPHAS.to_vec() } else { args.alphas.clone() };
    let ks = if args.ks.is_empty() { SWEEP_KS.to_vec() } else { args.ks.clone() };
    if alphas.iter().any(|a| !a.is_finite() || *a <= 0.0) {
        bail!("sweep step sizes must be positive and finite");
    }
    if ks.iter().any(|k| *k == 0) {
        bail!("sweep re-selection rounds must be >= 1");
    }
    let base_k = *ks.iter().min().unwrap();
    let cells: Vec<(f64, usize)> =
        alphas.iter().flat_map(|&a| ks.iter().map(move |&k| (a, k))).collect();

    let workers = worker_count()?;
    if workers > 1 {
        eprintln!(
            "note: timing {} cells on {} workers; relative times include scheduling contention",
            cells.len(),
            workers
        );
    }

    struct CellOut {
        ret: f64,
        utils: [f64; PHASES],
        seconds: f64,
    }
    let started = Instant::now();
    let cfg = &ctx.cfg;
    let encoding = &ctx.encoding;
    let measured = parallel_map(&cells, workers, |_, &(alpha, k)| {
        let mut tc = cfg.train.clone();
        tc.lambda_lr = alpha;
        tc.lambda_updates = k;
        tc.adaptive_lambda = true;
        let cell_start = Instant::now();
        // Mid-training evaluation is skipped (empty eval set); each cell is
        // scored once below, so cell timings cover pure training.
        let out = cralloc::train::train(&transitions, encoding, &tc, &budgets, &[], [1.0; PHASES])?;
        let seconds = cell_start.elapsed().as_secs_f64();
        let table = LambdaTable::uniform(cfg.env.slices, out.lambda.clone());
        let scorer = NetScorer { params: &out.params, encoding };
        let eval = eval_decisions(&reqs, &cfg.weights, cfg.env.slices, |_, req| {
            Ok(greedy_rollout(&scorer, table.get(req.time_slice), req)?.decisions)
        })?;
        let utils = utilizations(&eval.costs, &eval_budgets)?;
        Ok(CellOut { ret: eval.ret, utils, seconds })
    })?;

    let mut rows = Vec::with_capacity(cells.len());
    for (i, &(alpha, k)) in cells.iter().enumerate() {
        let base = cells
            .iter()
            .position(|&(a, kk)| a == alpha && kk == base_k)
            .map(|j| measured[j].seconds)
            .unwrap();
        let cell = &measured[i];
        rows.push(SweepRow {
            alpha,
            k,
            ret: cell.ret,
            util_channel: cell.utils[0],
            util_queue: cell.utils[1],
            util_model: cell.utils[2],
            seconds: cell.seconds,
            relative_time: if base > 0.0 { cell.seconds / base } else { f64::NAN },
        });
    }

    let csv_path = ctx.out_dir.join(SWEEP_CSV);
    write_sweep(&csv_path, &ctx.fingerprint, &rows)?;
    let text = render_sweep(&rows);
    fs::write(ctx.out_dir.join(SWEEP_TXT), &text)?;
    print!("{text}");
    println!(
        "swept {} cells in {:.1}s (times relative to K={}) -> {}",
        rows.len(),
        started.elapsed().as_secs_f64(),
        base_k,
        csv_path.display()
    );
    Ok(())
}
