//! Multi-head Q-network with cost calibration.
//!
//! One shared ReLU trunk feeds three separate linear heads, one per phase;
//! each head stacks `heads` independent value estimates (the ensemble rows
//! mixed by convex weights). Separate per-phase imitation heads provide the
//! behavior-cloning logits used by batch-constrained training. All gradients
//! are exact reverse-mode, verified against central finite differences.
//!
//! Action selection subtracts multiplier-weighted action costs from the
//! q-values (the calibration layer) and takes the argmax, breaking ties toward
//! the cheaper action.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{LambdaVector, Phase, PHASES};
use crate::error::{Error, Result};
use crate::rng::sub_rng;

pub const CHECKPOINT_VERSION: u32 = 1;

/// One linear layer, `y = W x + b`, `W` row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn init(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        // Small uniform init scaled by fan-in.
        let scale = 1.0 / (cols as f64).sqrt();
        let w = (0..rows * cols).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect();
        let b = vec![0.0; rows];
        Dense { rows, cols, w, b }
    }

    fn zeros_like(&self) -> Dense {
        Dense { rows: self.rows, cols: self.cols, w: vec![0.0; self.w.len()], b: vec![0.0; self.b.len()] }
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.w.len() != self.rows * self.cols || self.b.len() != self.rows {
            return Err(Error::format(format!("{what}: weight shapes do not match manifest")));
        }
        if self.w.iter().chain(self.b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("{what}: non-finite weights")));
        }
        Ok(())
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.reserve(self.rows);
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
}

/// Weights of the Q-network plus its shape manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetworkParams {
    pub version: u32,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub heads: usize,
    pub action_sizes: [usize; PHASES],
    pub trunk: Vec<Dense>,
    /// Per phase: `(heads * N_t) x h_last`; head h's value for action a sits
    /// at row `h * N_t + a`.
    pub phase_heads: Vec<Dense>,
    /// Per phase: `N_t x h_last` behavior-cloning logits.
    pub imitation_heads: Vec<Dense>,
}

impl QNetworkParams {
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        heads: usize,
        action_sizes: [usize; PHASES],
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || heads == 0 || hidden.is_empty() {
            return Err(Error::config("network needs input_dim > 0, heads > 0, hidden layers"));
        }
        if action_sizes.contains(&0) {
            return Err(Error::config("action sizes must be >= 1"));
        }
        let mut rng = sub_rng(seed, "qnet-init");
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &h in hidden {
            trunk.push(Dense::init(h, prev, &mut rng));
            prev = h;
        }
        let phase_heads = action_sizes
            .iter()
            .map(|&n| Dense::init(heads * n, prev, &mut rng))
            .collect();
        let imitation_heads = action_sizes
            .iter()
            .map(|&n| Dense::init(n, prev, &mut rng))
            .collect();
        Ok(QNetworkParams {
            version: CHECKPOINT_VERSION,
            input_dim,
            hidden: hidden.to_vec(),
            heads,
            action_sizes,
            trunk,
            phase_heads,
            imitation_heads,
        })
    }

    /// Verifies stored weights against the shape manifest (used after load).
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        if self.trunk.len() != self.hidden.len() {
            return Err(Error::format("trunk depth does not match manifest"));
        }
        let mut prev = self.input_dim;
        for (i, (layer, &h)) in self.trunk.iter().zip(&self.hidden).enumerate() {
            if layer.rows != h || layer.cols != prev {
                return Err(Error::format(format!("trunk layer {i} has wrong shape")));
            }
            layer.check(&format!("trunk layer {i}"))?;
            prev = h;
        }
        if self.phase_heads.len() != PHASES || self.imitation_heads.len() != PHASES {
            return Err(Error::format("expected one value head and one imitation head per phase"));
        }
        for (t, head) in self.phase_heads.iter().enumerate() {
            if head.rows != self.heads * self.action_sizes[t] || head.cols != prev {
                return Err(Error::format(format!("value head {t} has wrong shape")));
            }
            head.check(&format!("value head {t}"))?;
        }
        for (t, head) in self.imitation_heads.iter().enumerate() {
            if head.rows != self.action_sizes[t] || head.cols != prev {
                return Err(Error::format(format!("imitation head {t} has wrong shape")));
            }
            head.check(&format!("imitation head {t}"))?;
        }
        Ok(())
    }

    fn last_width(&self) -> usize {
        *self.hidden.last().unwrap()
    }

    /// Trunk activations; returns (pre-activations, post-ReLU activations).
    fn trunk_forward(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pre = Vec::with_capacity(self.trunk.len());
        let mut post = Vec::with_capacity(self.trunk.len());
        let mut cur: &[f64] = x;
        for layer in &self.trunk {
            let mut z = Vec::new();
            layer.forward(cur, &mut z);
            let a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            pre.push(z);
            post.push(a);
            cur = post.last().unwrap();
        }
        (pre, post)
    }

    fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::config(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite network input"));
        }
        let (_, post) = self.trunk_forward(x);
        Ok(post.into_iter().last().unwrap())
    }

    /// Per-head q-values for one phase: `heads` rows of length `N_t`.
    pub fn forward_heads(&self, x: &[f64], phase: Phase) -> Result<Vec<Vec<f64>>> {
        let feat = self.features(x)?;
        let head = &self.phase_heads[phase.index()];
        let n = self.action_sizes[phase.index()];
        let mut flat = Vec::new();
        head.forward(&feat, &mut flat);
        Ok((0..self.heads).map(|h| flat[h * n..(h + 1) * n].to_vec()).collect())
    }

    /// Q-values for one phase under the uniform head mixture (the
    /// deterministic serving/evaluation path).
    pub fn forward(&self, x: &[f64], phase: Phase) -> Result<Vec<f64>> {
        let per_head = self.forward_heads(x, phase)?;
        rem_combine(&per_head, &RemMixture::uniform(self.heads))
    }

    /// Behavior-cloning probabilities for one phase (softmax of the imitation
    /// head's logits).
    pub fn imitation_probs(&self, x: &[f64], phase: Phase) -> Result<Vec<f64>> {
        let feat = self.features(x)?;
        let head = &self.imitation_heads[phase.index()];
        let mut logits = Vec::new();
        head.forward(&feat, &mut logits);
        Ok(softmax(&logits))
    }

    pub fn flat_len(&self) -> usize {
        self.layer_list().iter().map(|(_, d)| d.w.len() + d.b.len()).sum()
    }

    fn layer_list(&self) -> Vec<(String, &Dense)> {
        let mut out: Vec<(String, &Dense)> = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            out.push((format!("trunk{i}"), l));
        }
        for (t, l) in self.phase_heads.iter().enumerate() {
            out.push((format!("head_{}", Phase::ALL[t].label()), l));
        }
        for (t, l) in self.imitation_heads.iter().enumerate() {
            out.push((format!("imitation_{}", Phase::ALL[t].label()), l));
        }
        out
    }

    /// Named flat-index spans, one per layer, matching `flatten`'s layout.
    pub fn layer_spans(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (name, d) in self.layer_list() {
            let len = d.w.len() + d.b.len();
            out.push((name, offset..offset + len));
            offset += len;
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (_, d) in self.layer_list() {
            out.extend_from_slice(&d.w);
            out.extend_from_slice(&d.b);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::config("flat parameter vector has wrong length"));
        }
        let mut offset = 0;
        let mut write = |d: &mut Dense| {
            let wl = d.w.len();
            let bl = d.b.len();
            d.w.copy_from_slice(&flat[offset..offset + wl]);
            offset += wl;
            d.b.copy_from_slice(&flat[offset..offset + bl]);
            offset += bl;
        };
        for l in &mut self.trunk {
            write(l);
        }
        for l in &mut self.phase_heads {
            write(l);
        }
        for l in &mut self.imitation_heads {
            write(l);
        }
        Ok(())
    }
}

/// Convex combination weights over ensemble heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemMixture {
    weights: Vec<f64>,
}

impl RemMixture {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("mixture needs at least one head"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("mixture weights must be finite and >= 0"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("mixture weights sum to {sum}, not 1")));
        }
        Ok(RemMixture { weights })
    }

    pub fn uniform(heads: usize) -> Self {
        RemMixture { weights: vec![1.0 / heads as f64; heads.max(1)] }
    }

    /// Random convex weights: normalized uniforms, redrawn per minibatch.
    pub fn sample(heads: usize, rng: &mut impl Rng) -> Self {
        let mut w: Vec<f64> = (0..heads.max(1)).map(|_| rng.gen::<f64>() + 1e-12).collect();
        let sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        RemMixture { weights: w }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `Q_mix[a] = sum_h beta_h * Q_h[a]`.
pub fn rem_combine(per_head: &[Vec<f64>], mixture: &RemMixture) -> Result<Vec<f64>> {
    if per_head.len() != mixture.weights.len() {
        return Err(Error::config(format!(
            "{} heads but {} mixture weights",
            per_head.len(),
            mixture.weights.len()
        )));
    }
    let n = per_head[0].len();
    if per_head.iter().any(|h| h.len() != n) {
        return Err(Error::config("ragged per-head q-values"));
    }
    let mut out = vec![0.0; n];
    for (head, beta) in per_head.iter().zip(&mixture.weights) {
        for (o, q) in out.iter_mut().zip(head) {
            *o += beta * q;
        }
    }
    Ok(out)
}

/// Calibrated values `Q(s,a) - lambda_t * Cost(s,a)`.
pub fn constraint_layer(q: &[f64], costs: &[f64], lambda_t: f64) -> Result<Vec<f64>> {
    if !lambda_t.is_finite() || lambda_t < 0.0 {
        return Err(Error::numeric(format!("lambda must be finite and >= 0, got {lambda_t}")));
    }
    if q.len() != costs.len() {
        return Err(Error::config(format!(
            "{} q-values but {} action costs",
            q.len(),
            costs.len()
        )));
    }
    Ok(q.iter().zip(costs).map(|(qi, ci)| qi - lambda_t * ci).collect())
}

/// Argmax of calibrated values; ties break toward the cheaper action, then the
/// lower index. All selection paths in the crate route through here so that
/// tie-breaking is consistent everywhere.
pub fn argmax_calibrated(q: &[f64], costs: &[f64], lambda_t: f64) -> Result<usize> {
    let calibrated = constraint_layer(q, costs, lambda_t)?;
    let mut best = 0usize;
    for i in 1..calibrated.len() {
        let better = calibrated[i] > calibrated[best]
            || (calibrated[i] == calibrated[best] && costs[i] < costs[best]);
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// `argmax_calibrated` restricted to admissible actions (same tie-breaking).
/// Used by batch-constrained masking and by load-shedding clamps.
pub fn argmax_calibrated_masked(
    q: &[f64],
    costs: &[f64],
    lambda_t: f64,
    admissible: &[bool],
) -> Result<usize> {
    if admissible.len() != q.len() {
        return Err(Error::config("admissibility mask has wrong length"));
    }
    let calibrated = constraint_layer(q, costs, lambda_t)?;
    let mut best: Option<usize> = None;
    for i in 0..calibrated.len() {
        if !admissible[i] {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) => {
                let better = calibrated[i] > calibrated[b]
                    || (calibrated[i] == calibrated[b] && costs[i] < costs[b]);
                if better {
                    best = Some(i);
                }
            }
        }
    }
    best.ok_or_else(|| Error::config("no admissible action"))
}

/// Greedy calibrated action under the uniform head mixture.
pub fn act(
    params: &QNetworkParams,
    lambda: &LambdaVector,
    x: &[f64],
    costs: &[f64],
    phase: Phase,
) -> Result<usize> {
    let q = params.forward(x, phase)?;
    argmax_calibrated(&q, costs, lambda.get(phase))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// One TD regression example: fit the mixed q-value of (x, phase, action) to
/// `target` (a constant computed outside the gradient path).
#[derive(Debug, Clone)]
pub struct TdExample {
    pub x: Vec<f64>,
    pub phase: Phase,
    pub action: usize,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub td: f64,
    pub imitation: f64,
}

impl BatchLoss {
    pub fn total(&self, imitation_weight: f64) -> f64 {
        self.td + imitation_weight * self.imitation
    }
}

/// Mean squared TD loss (+ optional imitation cross-entropy on the batch's
/// behavior actions) and its exact gradients, flattened in `layer_spans`
/// order.
pub fn loss_and_grads(
    params: &QNetworkParams,
    batch: &[TdExample],
    mixture: &RemMixture,
    imitation_weight: f64,
) -> Result<(BatchLoss, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::config("empty training batch"));
    }
    if mixture.weights.len() != params.heads {
        return Err(Error::config("mixture width does not match network heads"));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let h_last = params.last_width();

    let mut g_trunk: Vec<Dense> = params.trunk.iter().map(Dense::zeros_like).collect();
    let mut g_heads: Vec<Dense> = params.phase_heads.iter().map(Dense::zeros_like).collect();
    let mut g_imit: Vec<Dense> = params.imitation_heads.iter().map(Dense::zeros_like).collect();
    let mut td_loss = 0.0;
    let mut im_loss = 0.0;

    for ex in batch {
        if !ex.target.is_finite() {
            return Err(Error::numeric("non-finite TD target"));
        }
        let t = ex.phase.index();
        let n = params.action_sizes[t];
        if ex.action >= n {
            return Err(Error::config(format!(
                "action {} out of range for {} phase",
                ex.action,
                ex.phase.label()
            )));
        }
        if ex.x.len() != params.input_dim {
            return Err(Error::config("example feature length mismatch"));
        }

        let (pre, post) = params.trunk_forward(&ex.x);
        let feat = post.last().unwrap();

        // Mixed q-value of the taken action.
        let head = &params.phase_heads[t];
        let mut q_mix = 0.0;
        for (h, beta) in mixture.weights.iter().enumerate() {
            let row = h * n + ex.action;
            let wrow = &head.w[row * head.cols..(row + 1) * head.cols];
            let mut q = head.b[row];
            for (wi, fi) in wrow.iter().zip(feat) {
                q += wi * fi;
            }
            q_mix += beta * q;
        }
        let err = q_mix - ex.target;
        td_loss += err * err * inv_b;
        let dq = 2.0 * err * inv_b;

        // Gradient into the value head and the trunk features.
        let mut dfeat = vec![0.0; h_last];
        let gh = &mut g_heads[t];
        for (h, beta) in mixture.weights.iter().enumerate() {
            let row = h * n + ex.action;
            let coeff = dq * beta;
            let wrow = &head.w[row * head.cols..(row + 1) * head.cols];
            let grow = &mut gh.w[row * gh.cols..(row + 1) * gh.cols];
            for i in 0..h_last {
                grow[i] += coeff * feat[i];
                dfeat[i] += coeff * wrow[i];
            }
            gh.b[row] += coeff;
        }

        // Imitation head: cross-entropy against the behavior action.
        if imitation_weight > 0.0 {
            let ihead = &params.imitation_heads[t];
            let mut logits = Vec::new();
            ihead.forward(feat, &mut logits);
            let probs = softmax(&logits);
            im_loss -= probs[ex.action].max(1e-300).ln() * inv_b;
            let gi = &mut g_imit[t];
            for (a, p) in probs.iter().enumerate().take(n) {
                let dlogit =
                    (p - if a == ex.action { 1.0 } else { 0.0 }) * imitation_weight * inv_b;
                let wrow = &ihead.w[a * ihead.cols..(a + 1) * ihead.cols];
                let grow = &mut gi.w[a * gi.cols..(a + 1) * gi.cols];
                for i in 0..h_last {
                    grow[i] += dlogit * feat[i];
                    dfeat[i] += dlogit * wrow[i];
                }
                gi.b[a] += dlogit;
            }
        }

        // Trunk backward pass.
        let mut delta = dfeat;
        for l in (0..params.trunk.len()).rev() {
            let layer = &params.trunk[l];
            for (d, z) in delta.iter_mut().zip(&pre[l]) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
            let below: &[f64] = if l == 0 { &ex.x } else { &post[l - 1] };
            let gl = &mut g_trunk[l];
            for (r, &coeff) in delta.iter().enumerate() {
                if coeff == 0.0 {
                    continue;
                }
                let grow = &mut gl.w[r * gl.cols..(r + 1) * gl.cols];
                for (gw, xi) in grow.iter_mut().zip(below) {
                    *gw += coeff * xi;
                }
                gl.b[r] += coeff;
            }
            if l > 0 {
                let mut next_delta = vec![0.0; layer.cols];
                for (r, &coeff) in delta.iter().enumerate() {
                    if coeff == 0.0 {
                        continue;
                    }
                    let wrow = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                    for (nd, wi) in next_delta.iter_mut().zip(wrow) {
                        *nd += coeff * wi;
                    }
                }
                delta = next_delta;
            }
        }
    }

    if !td_loss.is_finite() || !im_loss.is_finite() {
        return Err(Error::numeric("non-finite training loss"));
    }

    let mut flat = Vec::with_capacity(params.flat_len());
    for d in g_trunk.iter().chain(g_heads.iter()).chain(g_imit.iter()) {
        flat.extend_from_slice(&d.w);
        flat.extend_from_slice(&d.b);
    }
    Ok((BatchLoss { td: td_loss, imitation: im_loss }, flat))
}

/// Adam over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(flat_len: usize) -> Self {
        AdamState {
            m: vec![0.0; flat_len],
            v: vec![0.0; flat_len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut QNetworkParams, grads: &[f64], lr: f64) -> Result<()> {
        let mut flat = params.flatten();
        if grads.len() != flat.len() || self.m.len() != flat.len() {
            return Err(Error::config("gradient length does not match parameters"));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..flat.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            flat[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        params.assign_flat(&flat)
    }
}
