//! Load feedback control: a positional PID tracks a system-load signal and,
//! when load runs above target, uniformly lowers the admissible queue
//! buckets (and at deep clamp forces the cheapest model) for all requests.
//!
//! Sign convention: error = measurement - setpoint, so overload produces a
//! positive output and a positive output means "clamp harder".

use serde::{Deserialize, Serialize};

use crate::domain::{ActionSpaceSpec, Phase, PHASES};
use crate::error::{Error, Result};

/// Clamp fraction at and above which the model phase is forced to the
/// cheapest model.
pub const FORCE_SIMPLE_THRESHOLD: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidConfig {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Target value of the load signal.
    pub setpoint: f64,
    pub out_min: f64,
    pub out_max: f64,
    /// Anti-windup: |integral| never exceeds this.
    pub integral_limit: f64,
    /// Sample period between controller steps.
    pub dt: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        PidConfig {
            kp: 0.8,
            ki: 0.15,
            kd: 0.0,
            setpoint: 1.0,
            out_min: 0.0,
            out_max: 1.0,
            integral_limit: 20.0,
            dt: 1.0,
        }
    }
}

impl PidConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.kp,
            self.ki,
            self.kd,
            self.setpoint,
            self.out_min,
            self.out_max,
            self.integral_limit,
            self.dt,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("controller parameters must be finite"));
        }
        if self.out_min > self.out_max {
            return Err(Error::config("controller output bounds are reversed"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("controller sample period must be > 0"));
        }
        if self.integral_limit < 0.0 {
            return Err(Error::config("integral limit must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    /// None before the first step; the derivative term starts at zero.
    pub prev_error: Option<f64>,
    pub last_output: f64,
}

impl PidState {
    pub fn new() -> Self {
        PidState::default()
    }
}

/// One controller step. Positional form: the output is computed from the
/// current error, the clamped integral, and the backward-difference
/// derivative, then clamped to the configured bounds.
pub fn pid_step(cfg: &PidConfig, state: &PidState, measurement: f64) -> Result<(f64, PidState)> {
    if !measurement.is_finite() {
        return Err(Error::numeric("load measurement is not finite"));
    }
    let error = measurement - cfg.setpoint;
    let integral =
        (state.integral + error * cfg.dt).clamp(-cfg.integral_limit, cfg.integral_limit);
    let derivative = match state.prev_error {
        Some(prev) => (error - prev) / cfg.dt,
        None => 0.0,
    };
    let raw = cfg.kp * error + cfg.ki * integral + cfg.kd * derivative;
    let output = raw.clamp(cfg.out_min, cfg.out_max);
    Ok((output, PidState { integral, prev_error: Some(error), last_output: output }))
}

/// How hard the allocator is currently being clamped. Derived from the
/// controller output each step, so easing the output eases the clamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampLevel {
    /// Highest admissible queue bucket index.
    pub max_queue_bucket: usize,
    pub force_simple_model: bool,
}

impl ClampLevel {
    pub fn none(space: &ActionSpaceSpec) -> Self {
        ClampLevel { max_queue_bucket: space.queue_buckets - 1, force_simple_model: false }
    }

    pub fn is_active(&self, space: &ActionSpaceSpec) -> bool {
        self.max_queue_bucket < space.queue_buckets - 1 || self.force_simple_model
    }

    /// Fraction of the output range the clamp represents, for telemetry.
    pub fn fraction(&self, space: &ActionSpaceSpec) -> f64 {
        1.0 - self.max_queue_bucket as f64 / (space.queue_buckets - 1).max(1) as f64
    }
}

/// Maps a controller output to a clamp level: the admissible queue range
/// shrinks linearly from the full menu (output <= 0) down to bucket 0 alone
/// (output at the upper bound), and past `FORCE_SIMPLE_THRESHOLD` of the
/// range the cheapest model is forced as well.
pub fn clamp_level(output: f64, cfg: &PidConfig, space: &ActionSpaceSpec) -> ClampLevel {
    let frac = if cfg.out_max > 0.0 { (output / cfg.out_max).clamp(0.0, 1.0) } else { 0.0 };
    let top = (space.queue_buckets - 1) as f64;
    ClampLevel {
        max_queue_bucket: (top * (1.0 - frac)).floor() as usize,
        force_simple_model: frac >= FORCE_SIMPLE_THRESHOLD,
    }
}

/// Admissible-action mask for one phase under a clamp level. Never all
/// false: bucket 0 and model 0 stay admissible at full clamp.
pub fn admissible_mask(level: &ClampLevel, phase: Phase, n_actions: usize) -> Vec<bool> {
    match phase {
        Phase::Channel => vec![true; n_actions],
        Phase::Queue => (0..n_actions).map(|a| a <= level.max_queue_bucket).collect(),
        Phase::Model => {
            if level.force_simple_model {
                (0..n_actions).map(|a| a == 0).collect()
            } else {
                vec![true; n_actions]
            }
        }
    }
}

/// Clamps a decision triple: queue bucket capped, model forced to 0 at deep
/// clamp, channel untouched. Zero or negative output is a no-op.
pub fn apply_clamp(
    output: f64,
    cfg: &PidConfig,
    space: &ActionSpaceSpec,
    decisions: [usize; PHASES],
) -> [usize; PHASES] {
    let level = clamp_level(output, cfg, space);
    let [channel, queue, model] = decisions;
    [
        channel,
        queue.min(level.max_queue_bucket),
        if level.force_simple_model { 0 } else { model },
    ]
}
