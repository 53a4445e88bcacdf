//! Group-relative advantages, the clipped surrogate objective and its exact
//! gradient, plain gradient ascent and exponential learning-rate decay.
//!
//! Two objective shapes share one code path:
//!
//! * with KL: `mean_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i) - beta KL(pi || pi_old)`
//! * decoupled: `mean_i min(rho_i A_i, clip(rho_i, 1-eps_low, 1+eps_high) A_i)`
//!
//! where `rho_i = pi(O_i) / pi_old(O_i)` and the KL term is the exact
//! categorical divergence from the snapshot distribution stored in the group.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{
    grad_kl, kl_from_log_probs, log_probs, logit_weights_to_grad, CandidateSpace, PolicyError,
    PolicyGrad, PolicyParams, RolloutGroup,
};

/// Entropy bonus coefficient. Fixed; there is no entropy term.
pub const ENTROPY_COEF: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("a group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("round must be non-negative, got {0}")]
    NegativeRound(i64),
    #[error("group for `{0}` has no advantages")]
    MissingAdvantages(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub use_kl: bool,
    pub lr0: f64,
    pub decay_gamma: f64,
    pub inner_epochs: usize,
    pub std_floor: f64,
}

impl GrpoConfig {
    /// Baseline GRPO: symmetric clip 0.2, KL coefficient 1e-3, no decay.
    pub fn grpo() -> Self {
        Self {
            group_size: 5,
            eps_low: 0.2,
            eps_high: 0.2,
            beta: 1e-3,
            use_kl: true,
            lr0: 1e-6,
            decay_gamma: 1.0,
            inner_epochs: 1,
            std_floor: 1e-8,
        }
    }

    /// Dynamic multi-round hard sampling: baseline plus decay 0.8.
    pub fn dynamic_sampling() -> Self {
        Self { decay_gamma: 0.8, ..Self::grpo() }
    }

    /// Self-exemplifying: no KL, clip-higher 0.26 over clip-lower 0.2, decay 0.8.
    pub fn self_exemplifying() -> Self {
        Self { eps_high: 0.26, beta: 0.0, use_kl: false, ..Self::dynamic_sampling() }
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let fail = |m: &str| Err(GrpoError::Config(m.to_string()));
        if self.group_size < 2 {
            return fail("group_size must be at least 2");
        }
        if !(self.eps_low > 0.0 && self.eps_low < 1.0 && self.eps_high > 0.0 && self.eps_high < 1.0) {
            return fail("eps_low and eps_high must lie in (0, 1)");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail("beta must be non-negative");
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return fail("decay_gamma must lie in (0, 1]");
        }
        if !(self.std_floor > 0.0) {
            return fail("std_floor must be positive");
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return fail("lr0 must be non-negative");
        }
        if self.inner_epochs == 0 {
            return fail("inner_epochs must be at least 1");
        }
        Ok(())
    }
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self::dynamic_sampling()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveReport {
    pub surrogate: f64,
    pub kl_term: f64,
    pub total: f64,
    pub clipped_fraction: f64,
}

/// `(r_i - mean) / std` with the population standard deviation. Groups whose
/// std falls below `std_floor` get all-zero advantages.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, GrpoError> {
    let n = rewards.len();
    if n < 2 {
        return Err(GrpoError::GroupTooSmall(n));
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < std_floor {
        return Ok(vec![0.0; n]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

struct Term {
    ratio: f64,
    value: f64,
    clipped: bool,
}

/// One summand of the clipped surrogate. Ties go to the unclipped branch.
fn clipped_term(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> Term {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high) * advantage;
    if clipped < unclipped {
        Term { ratio, value: clipped, clipped: true }
    } else {
        Term { ratio, value: unclipped, clipped: false }
    }
}

/// Surrogate value of a single term, exposed for fixtures.
pub fn surrogate_term(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    clipped_term(ratio, advantage, eps_low, eps_high).value
}

fn evaluate(
    group: &RolloutGroup,
    params_new: &PolicyParams,
    space: &CandidateSpace,
    cfg: &GrpoConfig,
    temperature: f64,
) -> Result<(Vec<f64>, Vec<Term>, ObjectiveReport), GrpoError> {
    if group.advantages.len() != group.chosen.len() {
        return Err(GrpoError::MissingAdvantages(group.sample_id.clone()));
    }
    let lp = log_probs(params_new, space, &group.guidance, temperature)?;
    let n = group.chosen.len() as f64;
    let terms: Vec<Term> = group
        .chosen
        .iter()
        .zip(&group.old_logprobs)
        .zip(&group.advantages)
        .map(|((&k, old), &a)| clipped_term((lp[k] - old).exp(), a, cfg.eps_low, cfg.eps_high))
        .collect();
    let surrogate = terms.iter().map(|t| t.value).sum::<f64>() / n;
    let clipped_fraction = terms.iter().filter(|t| t.clipped).count() as f64 / n;
    let kl_term = if cfg.use_kl { kl_from_log_probs(&lp, &group.old_distribution) } else { 0.0 };
    let total = if cfg.use_kl { surrogate - cfg.beta * kl_term } else { surrogate };
    Ok((lp, terms, ObjectiveReport { surrogate, kl_term, total, clipped_fraction }))
}

pub fn surrogate_objective(
    group: &RolloutGroup,
    params_new: &PolicyParams,
    space: &CandidateSpace,
    cfg: &GrpoConfig,
    temperature: f64,
) -> Result<ObjectiveReport, GrpoError> {
    Ok(evaluate(group, params_new, space, cfg, temperature)?.2)
}

/// Objective report and the exact gradient of `total` with respect to the
/// sample's theta row and the shared weights.
pub fn objective_and_gradient(
    group: &RolloutGroup,
    params_new: &PolicyParams,
    space: &CandidateSpace,
    cfg: &GrpoConfig,
    temperature: f64,
) -> Result<(ObjectiveReport, PolicyGrad), GrpoError> {
    let (lp, terms, report) = evaluate(group, params_new, space, cfg, temperature)?;
    let n = group.chosen.len() as f64;
    let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    // d term_i / d logit_j = rho_i A_i (delta_jk - p_j) / T on the unclipped branch
    let mut weights = vec![0.0; p.len()];
    for ((term, &k), &a) in terms.iter().zip(&group.chosen).zip(&group.advantages) {
        if term.clipped {
            continue;
        }
        let c = term.ratio * a / (n * temperature);
        if c == 0.0 {
            continue;
        }
        for (j, w) in weights.iter_mut().enumerate() {
            *w += c * (if j == k { 1.0 } else { 0.0 } - p[j]);
        }
    }
    let mut grad = logit_weights_to_grad(space, &group.guidance, weights);
    if cfg.use_kl && cfg.beta != 0.0 {
        let kl_grad = grad_kl(params_new, &group.old_distribution, space, &group.guidance, temperature)?;
        grad.add_scaled(&kl_grad, -cfg.beta);
    }
    Ok((report, grad))
}

pub fn objective_gradient(
    group: &RolloutGroup,
    params_new: &PolicyParams,
    space: &CandidateSpace,
    cfg: &GrpoConfig,
    temperature: f64,
) -> Result<PolicyGrad, GrpoError> {
    Ok(objective_and_gradient(group, params_new, space, cfg, temperature)?.1)
}

/// `lr0 * gamma^round`.
pub fn lr_at_round(lr0: f64, gamma: f64, round: i64) -> Result<f64, GrpoError> {
    if round < 0 {
        return Err(GrpoError::NegativeRound(round));
    }
    let exp = i32::try_from(round).unwrap_or(i32::MAX);
    Ok(lr0 * gamma.powi(exp))
}

/// Gradient ascent: `params + lr * grad`. Rows the gradient does not mention
/// are left untouched.
pub fn update_step(params: &PolicyParams, grad: &PolicyGrad, lr: f64) -> Result<PolicyParams, GrpoError> {
    let mut next = params.clone();
    for (id, g_row) in &grad.theta {
        let row = next
            .theta
            .get_mut(id)
            .ok_or_else(|| PolicyError::UnknownSample(id.clone()))?;
        if row.len() != g_row.len() {
            return Err(PolicyError::ShapeMismatch { sample: id.clone(), expected: row.len(), got: g_row.len() }.into());
        }
        for (p, g) in row.iter_mut().zip(g_row) {
            *p += lr * g;
        }
    }
    next.guidance_weight += lr * grad.guidance_weight;
    next.exemplify_weight += lr * grad.exemplify_weight;
    Ok(next)
}
