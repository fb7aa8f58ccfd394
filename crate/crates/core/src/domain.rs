//! Domain types shared by every stage: the three-phase geometry, action-space
//! encodings, budgets, reward weights, and Lagrange multiplier vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of decision phases in the cascade. The pipeline semantics (retrieve,
/// truncate, predict) are specific to three phases, so this is structural.
pub const PHASES: usize = 3;

/// One decision phase of the cascade, in decision order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Choose the subset of retrieval channels to query.
    Channel,
    /// Choose the truncation length bucket for the candidate queue.
    Queue,
    /// Choose the prediction model that scores the truncated list.
    Model,
}

impl Phase {
    pub const ALL: [Phase; PHASES] = [Phase::Channel, Phase::Queue, Phase::Model];

    pub fn index(self) -> usize {
        match self {
            Phase::Channel => 0,
            Phase::Queue => 1,
            Phase::Model => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Phase> {
        Phase::ALL.get(i).copied()
    }

    /// Next phase in decision order; `None` after the model phase.
    pub fn next(self) -> Option<Phase> {
        Phase::from_index(self.index() + 1)
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::Channel => "channel",
            Phase::Queue => "queue",
            Phase::Model => "model",
        }
    }
}

/// Sizes of the per-phase action spaces.
///
/// The channel phase's space is the power set of retrieval channels
/// (`2^channel_count` strategies); the queue phase has `queue_buckets`
/// truncation lengths spaced `queue_bucket_width` apart; the model phase picks
/// one of `model_count` prediction models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionSpaceSpec {
    pub num_phases: usize,
    pub channel_count: usize,
    pub queue_buckets: usize,
    pub queue_bucket_width: u32,
    pub model_count: usize,
}

impl Default for ActionSpaceSpec {
    fn default() -> Self {
        ActionSpaceSpec {
            num_phases: PHASES,
            channel_count: 1,
            queue_buckets: 26,
            queue_bucket_width: 10,
            model_count: 2,
        }
    }
}

impl ActionSpaceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_phases != PHASES {
            return Err(Error::config(format!(
                "only the {PHASES}-phase pipeline is supported, got num_phases={}",
                self.num_phases
            )));
        }
        if self.channel_count == 0 || self.channel_count > 16 {
            return Err(Error::config(format!(
                "channel_count must be in 1..=16, got {}",
                self.channel_count
            )));
        }
        if self.queue_buckets == 0 {
            return Err(Error::config("queue_buckets must be >= 1"));
        }
        if self.queue_bucket_width == 0 {
            return Err(Error::config("queue_bucket_width must be >= 1"));
        }
        if self.model_count == 0 {
            return Err(Error::config("model_count must be >= 1"));
        }
        Ok(())
    }

    /// Number of channel strategies (all subsets of the channel set).
    pub fn channel_strategies(&self) -> usize {
        1 << self.channel_count
    }

    pub fn phase_size(&self, phase: Phase) -> usize {
        match phase {
            Phase::Channel => self.channel_strategies(),
            Phase::Queue => self.queue_buckets,
            Phase::Model => self.model_count,
        }
    }

    pub fn sizes(&self) -> [usize; PHASES] {
        [
            self.phase_size(Phase::Channel),
            self.phase_size(Phase::Queue),
            self.phase_size(Phase::Model),
        ]
    }

    /// Truncation length (in items) for a queue bucket index.
    pub fn queue_action_length(&self, bucket_index: usize) -> Result<u32> {
        if bucket_index >= self.queue_buckets {
            return Err(Error::config(format!(
                "queue bucket {bucket_index} out of range (N_q = {})",
                self.queue_buckets
            )));
        }
        Ok(self.queue_bucket_width * (bucket_index as u32 + 1))
    }
}

/// Encode a channel indicator vector as its strategy number.
/// The first channel is the most significant bit: (0,1,1) -> 3.
pub fn strategy_number(indicator: &[bool]) -> Result<u64> {
    if indicator.is_empty() || indicator.len() > 16 {
        return Err(Error::config(format!(
            "indicator length must be in 1..=16, got {}",
            indicator.len()
        )));
    }
    let mut n = 0u64;
    for &bit in indicator {
        n = (n << 1) | u64::from(bit);
    }
    Ok(n)
}

/// Inverse of [`strategy_number`] for a given channel count.
pub fn strategy_indicator(number: u64, channel_count: usize) -> Result<Vec<bool>> {
    if channel_count == 0 || channel_count > 16 {
        return Err(Error::config(format!(
            "channel_count must be in 1..=16, got {channel_count}"
        )));
    }
    if number >= (1u64 << channel_count) {
        return Err(Error::config(format!(
            "strategy {number} out of range for {channel_count} channels"
        )));
    }
    Ok((0..channel_count)
        .map(|i| (number >> (channel_count - 1 - i)) & 1 == 1)
        .collect())
}

/// Weights of the two revenue components in the scalar reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub k1: f64,
    pub k2: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { k1: 1.0, k2: 1.0 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.k1.is_finite() || !self.k2.is_finite() || self.k1 < 0.0 || self.k2 < 0.0 {
            return Err(Error::config("reward weights must be finite and >= 0"));
        }
        if self.k1 == 0.0 && self.k2 == 0.0 {
            return Err(Error::config("reward weights must not both be zero"));
        }
        Ok(())
    }
}

/// Terminal revenue of one served request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevenueOutcome {
    pub fee_ad: f64,
    pub price_o: f64,
}

impl RevenueOutcome {
    pub fn validate(&self) -> Result<()> {
        if !self.fee_ad.is_finite() || !self.price_o.is_finite() {
            return Err(Error::numeric("revenue components must be finite"));
        }
        if self.fee_ad < 0.0 || self.price_o < 0.0 {
            return Err(Error::numeric("revenue components must be >= 0"));
        }
        Ok(())
    }
}

/// Per-phase Lagrange multipliers; always non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaVector {
    values: [f64; PHASES],
}

impl Default for LambdaVector {
    fn default() -> Self {
        LambdaVector::zero()
    }
}

impl LambdaVector {
    pub fn zero() -> Self {
        LambdaVector { values: [0.0; PHASES] }
    }

    pub fn new(values: [f64; PHASES]) -> Result<Self> {
        for v in values {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::numeric(format!(
                    "lambda entries must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(LambdaVector { values })
    }

    pub fn get(&self, phase: Phase) -> f64 {
        self.values[phase.index()]
    }

    /// Sets one entry, clamping to zero from below.
    pub fn set(&mut self, phase: Phase, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::numeric("lambda update produced a non-finite value"));
        }
        self.values[phase.index()] = value.max(0.0);
        Ok(())
    }

    pub fn as_array(&self) -> [f64; PHASES] {
        self.values
    }
}

/// One multiplier vector per time slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaTable {
    pub per_slice: Vec<LambdaVector>,
}

impl LambdaTable {
    pub fn uniform(slices: usize, lambda: LambdaVector) -> Self {
        LambdaTable { per_slice: vec![lambda; slices] }
    }

    pub fn slices(&self) -> usize {
        self.per_slice.len()
    }

    /// Multipliers for a slice. Out-of-range slices fall back to the nearest
    /// covered slice; callers that need strict coverage check `slices()` first.
    pub fn get(&self, slice: usize) -> &LambdaVector {
        let last = self.per_slice.len() - 1;
        &self.per_slice[slice.min(last)]
    }
}

/// Per-phase computation budgets.
///
/// `per_request_rates` are CR units per request and back minibatch-level
/// budgets during training. `per_slice` holds absolute per-slice budgets for
/// evaluation and serving; when absent, callers scale the rates by the slice's
/// request count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    pub per_request_rates: [f64; PHASES],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_slice: Option<Vec<[f64; PHASES]>>,
}

impl BudgetSpec {
    pub fn from_rates(per_request_rates: [f64; PHASES]) -> Self {
        BudgetSpec { per_request_rates, per_slice: None }
    }

    pub fn validate(&self) -> Result<()> {
        for r in self.per_request_rates {
            if !r.is_finite() || r <= 0.0 {
                return Err(Error::config(format!("budget rates must be > 0, got {r}")));
            }
        }
        if let Some(table) = &self.per_slice {
            if table.is_empty() {
                return Err(Error::config("per-slice budget table must not be empty"));
            }
            for row in table {
                for b in row {
                    if !b.is_finite() || *b <= 0.0 {
                        return Err(Error::config(format!("slice budgets must be > 0, got {b}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn rate(&self, phase: Phase) -> f64 {
        self.per_request_rates[phase.index()]
    }

    /// Absolute budgets for one slice: the stored table row when present,
    /// otherwise rates scaled by the slice's request count.
    pub fn slice_budgets(&self, slice: usize, slice_requests: usize) -> Result<[f64; PHASES]> {
        match &self.per_slice {
            Some(table) => table.get(slice).copied().ok_or_else(|| {
                Error::config(format!(
                    "slice {slice} missing from budget table ({} slices)",
                    table.len()
                ))
            }),
            None => {
                let n = slice_requests as f64;
                Ok([
                    self.per_request_rates[0] * n,
                    self.per_request_rates[1] * n,
                    self.per_request_rates[2] * n,
                ])
            }
        }
    }

    /// Total budgets over a set of slices with the given request counts.
    pub fn total_budgets(&self, slice_requests: &[usize]) -> Result<[f64; PHASES]> {
        let mut total = [0.0; PHASES];
        for (slice, &count) in slice_requests.iter().enumerate() {
            let b = self.slice_budgets(slice, count)?;
            for t in 0..PHASES {
                total[t] += b[t];
            }
        }
        Ok(total)
    }
}
