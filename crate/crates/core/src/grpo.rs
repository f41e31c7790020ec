//! Group-relative policy optimization objective.
//!
//! Pure numerical core: group advantages, the clipped surrogate term, the
//! k3 KL estimator, overlength masking, and token-level batch aggregation.
//! Everything here is a deterministic function of its inputs; gradients and
//! parameter updates live in [`crate::trainer`] and [`crate::optim`].

use serde::{Deserialize, Serialize};

/// Errors from the objective kernel.
#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("a rollout group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("group has {rollouts} rollouts but {rewards} rewards")]
    GroupShape { rollouts: usize, rewards: usize },
    #[error("rollout has {tokens} tokens but a log-prob vector of length {logps}")]
    RolloutShape { tokens: usize, logps: usize },
    #[error("log-probability {0} is above zero")]
    PositiveLogProb(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch contains no tokens")]
    NoTokens,
    #[error("beta is nonzero but a rollout has no reference log-probabilities")]
    MissingReference,
}

/// One sampled response: token ids plus per-token log-probabilities under the
/// old (sampling-time) policy, the current policy, and optionally a frozen
/// reference policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<u32>,
    /// Per-token log-probs under the policy that sampled the rollout (nats).
    pub logp_old: Vec<f64>,
    /// Per-token log-probs under the policy being optimized (nats).
    pub logp_cur: Vec<f64>,
    /// Per-token log-probs under the reference policy, when a KL term is used.
    pub logp_ref: Option<Vec<f64>>,
    /// Set when sampling hit the length cap without emitting a terminator.
    pub truncated: bool,
}

impl Rollout {
    pub fn new(
        tokens: Vec<u32>,
        logp_old: Vec<f64>,
        logp_cur: Vec<f64>,
        logp_ref: Option<Vec<f64>>,
        truncated: bool,
    ) -> Result<Self, GrpoError> {
        let n = tokens.len();
        for logps in [&logp_old, &logp_cur].into_iter().chain(logp_ref.iter()) {
            if logps.len() != n {
                return Err(GrpoError::RolloutShape {
                    tokens: n,
                    logps: logps.len(),
                });
            }
            for &lp in logps {
                if !lp.is_finite() {
                    return Err(GrpoError::NonFinite("log-probability"));
                }
                // log-softmax can land a hair above zero on the max element
                if lp > 1e-9 {
                    return Err(GrpoError::PositiveLogProb(lp));
                }
            }
        }
        Ok(Self {
            tokens,
            logp_old,
            logp_cur,
            logp_ref,
            truncated,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The G responses sampled for one task, with their scalar rewards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task_id: String,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(
        task_id: impl Into<String>,
        rollouts: Vec<Rollout>,
        rewards: Vec<f64>,
    ) -> Result<Self, GrpoError> {
        if rollouts.len() != rewards.len() {
            return Err(GrpoError::GroupShape {
                rollouts: rollouts.len(),
                rewards: rewards.len(),
            });
        }
        if rewards.len() < 2 {
            return Err(GrpoError::GroupTooSmall(rewards.len()));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(GrpoError::NonFinite("reward"));
        }
        Ok(Self {
            task_id: task_id.into(),
            rollouts,
            rewards,
        })
    }

    pub fn group_size(&self) -> usize {
        self.rewards.len()
    }
}

/// Standardized within-group advantages, one per rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector(Vec<f64>);

impl AdvantageVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.iter().all(|a| *a == 0.0)
    }
}

/// Knobs of the objective itself, a projection of the full trainer config.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GrpoParams {
    /// Clip half-width epsilon of the surrogate ratio.
    pub eps_clip: f64,
    /// KL penalty weight; 0 drops the term entirely.
    pub beta: f64,
    /// Reward-std floor below which a group is declared zero-advantage.
    pub eps_std: f64,
    /// Responses longer than this contribute zero advantage.
    pub max_response_tokens: usize,
}

impl Default for GrpoParams {
    fn default() -> Self {
        Self {
            eps_clip: 0.2,
            beta: 0.0,
            eps_std: 1e-8,
            max_response_tokens: 10_000,
        }
    }
}

/// Diagnostics of one objective evaluation over a batch of groups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    /// policy_term - beta * kl_term.
    pub objective: f64,
    pub policy_term: f64,
    pub kl_term: f64,
    pub token_count: usize,
    /// Fraction of tokens whose ratio fell outside [1-eps, 1+eps].
    pub clip_fraction: f64,
    /// Fraction of groups whose masked advantage vector is all zero.
    pub zero_adv_fraction: f64,
}

/// Pairwise (cascade) summation in slice order. Deterministic for a fixed
/// element order and more accurate than a running sum on long inputs.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Population standard deviation (divide by N; the group is the whole
/// population being normalized over, not a sample from one).
pub(crate) fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    (pairwise_sum(&sq) / xs.len() as f64).sqrt()
}

/// Standardize rewards within a group: A_i = (r_i - mean) / std.
///
/// When the population std falls below `eps_std` the whole group is declared
/// zero-advantage (identical rewards carry no preference signal) instead of
/// dividing by a vanishing denominator.
pub fn group_advantages(rewards: &[f64], eps_std: f64) -> Result<AdvantageVector, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::NonFinite("reward"));
    }
    let m = mean(rewards);
    let std = population_std(rewards);
    if std < eps_std {
        return Ok(AdvantageVector(vec![0.0; rewards.len()]));
    }
    Ok(AdvantageVector(
        rewards.iter().map(|r| (r - m) / std).collect(),
    ))
}

/// The k3 KL estimator: r - log r - 1 with r = pi_ref / pi_theta, evaluated
/// from per-token log-probabilities. Nonnegative, zero iff the two agree.
pub fn k3_kl(logp_cur: f64, logp_ref: f64) -> Result<f64, GrpoError> {
    if !logp_cur.is_finite() || !logp_ref.is_finite() {
        return Err(GrpoError::NonFinite("log-probability"));
    }
    let d = logp_ref - logp_cur;
    // exp(d) - d - 1 via exp_m1 so the small-d regime stays accurate
    Ok(f64::exp_m1(d) - d)
}

/// One token's clipped surrogate contribution:
/// min(ratio * A, clip(ratio, 1-eps, 1+eps) * A).
pub fn clipped_token_term(ratio: f64, advantage: f64, eps_clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip);
    (ratio * advantage).min(clipped * advantage)
}

/// Zero the advantage of any rollout that exceeds `max_tokens` or was
/// truncated by the sampler. Both routes trigger so post-hoc length checks
/// and sampler truncation agree.
pub fn mask_overlength(
    group: &RolloutGroup,
    adv: &AdvantageVector,
    max_tokens: usize,
) -> AdvantageVector {
    let masked = group
        .rollouts
        .iter()
        .zip(adv.values())
        .map(|(rollout, &a)| {
            if rollout.len() > max_tokens || rollout.truncated {
                0.0
            } else {
                a
            }
        })
        .collect();
    AdvantageVector(masked)
}

/// Advantages for every group in a batch: standardize rewards, then mask
/// overlength rollouts. This is the exact advantage construction the batch
/// objective and its gradient share.
pub fn batch_advantages(
    groups: &[RolloutGroup],
    params: &GrpoParams,
) -> Result<Vec<AdvantageVector>, GrpoError> {
    groups
        .iter()
        .map(|g| {
            if g.rollouts.len() != g.rewards.len() {
                return Err(GrpoError::GroupShape {
                    rollouts: g.rollouts.len(),
                    rewards: g.rewards.len(),
                });
            }
            let adv = group_advantages(&g.rewards, params.eps_std)?;
            Ok(mask_overlength(g, &adv, params.max_response_tokens))
        })
        .collect()
}

/// Token-level batch objective: the mean over all tokens in the batch of the
/// clipped surrogate term, minus beta times the mean k3 KL estimate.
///
/// Token-level (not per-sequence) averaging removes length bias: every token
/// carries the same weight regardless of which response it came from.
/// Summation order is fixed by (group, rollout, token) index.
pub fn batch_objective(
    groups: &[RolloutGroup],
    params: &GrpoParams,
) -> Result<LossReport, GrpoError> {
    if groups.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let advantages = batch_advantages(groups, params)?;

    let mut policy_terms = Vec::new();
    let mut kl_terms = Vec::new();
    let mut clipped_tokens = 0usize;

    for (group, adv) in groups.iter().zip(&advantages) {
        for (rollout, &a) in group.rollouts.iter().zip(adv.values()) {
            for (t, (&lp_cur, &lp_old)) in
                rollout.logp_cur.iter().zip(&rollout.logp_old).enumerate()
            {
                let ratio = (lp_cur - lp_old).exp();
                if ratio < 1.0 - params.eps_clip || ratio > 1.0 + params.eps_clip {
                    clipped_tokens += 1;
                }
                policy_terms.push(clipped_token_term(ratio, a, params.eps_clip));
                if params.beta != 0.0 {
                    let lp_ref = rollout
                        .logp_ref
                        .as_ref()
                        .ok_or(GrpoError::MissingReference)?[t];
                    kl_terms.push(k3_kl(lp_cur, lp_ref)?);
                }
            }
        }
    }

    let token_count = policy_terms.len();
    if token_count == 0 {
        return Err(GrpoError::NoTokens);
    }

    let policy_term = pairwise_sum(&policy_terms) / token_count as f64;
    let kl_term = if params.beta != 0.0 {
        pairwise_sum(&kl_terms) / token_count as f64
    } else {
        0.0
    };
    let zero_adv_groups = advantages.iter().filter(|a| a.is_all_zero()).count();

    Ok(LossReport {
        objective: policy_term - params.beta * kl_term,
        policy_term,
        kl_term,
        token_count,
        clip_fraction: clipped_tokens as f64 / token_count as f64,
        zero_adv_fraction: zero_adv_groups as f64 / groups.len() as f64,
    })
}
