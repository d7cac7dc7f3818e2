//! Group Relative Policy Optimization on [`ToyPolicy`].
//!
//! For each query a group of outputs is sampled from a frozen snapshot
//! `π_old`; rewards are standardized within the group to give advantages;
//! the policy ascends
//!
//! ```text
//! J(θ) = 1/G Σ_i min(ρ_i A_i, clip(ρ_i, 1-ε, 1+ε) A_i) - β KL(π_θ || π_ref)
//! ρ_i  = π_θ(o_i|q) / π_old(o_i|q)
//! ```
//!
//! The KL term is exact: the full forward KL over the vocabulary at every
//! context visited by the group's outputs, averaged over those contexts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{l2_norm, ToyPolicy, TokenId};
use crate::seeds::derive_seed;

/// Reward groups whose population std falls below this get zero advantage.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group needs at least 2 outputs, got {0}")]
    GroupTooSmall(usize),
    #[error("reference assigns zero probability to token {token} at context {context}")]
    SupportMismatch { context: TokenId, token: TokenId },
    #[error("policies have different vocabularies")]
    VocabMismatch,
    #[error("non-finite probability ratio for output {0}")]
    NonFiniteRatio(usize),
    #[error("objective became non-finite at update {0}")]
    DivergenceDetected(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("group is inconsistent: {0}")]
    MalformedGroup(String),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
}

/// `(r_i - mean) / std` with the population std; all zeros when the std is
/// below [`DEGENERATE_STD`].
pub fn advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    let std = (centered.iter().map(|d| d * d).sum::<f64>() / g as f64).sqrt();
    if !(std >= DEGENERATE_STD) {
        return Ok(vec![0.0; g]);
    }
    Ok(centered.into_iter().map(|d| d / std).collect())
}

/// `Σ_k p_k (log p_k - log q_k)` from log-probabilities. Zero-probability
/// terms of `p` contribute nothing.
pub fn kl_from_log_probs(lp: &[f64], lq: &[f64]) -> Result<f64, usize> {
    let mut kl = 0.0;
    for (k, (&a, &b)) in lp.iter().zip(lq).enumerate() {
        let p = a.exp();
        if p == 0.0 {
            continue;
        }
        if b == f64::NEG_INFINITY {
            return Err(k);
        }
        kl += p * (a - b);
    }
    Ok(kl)
}

fn kl_at(theta: &ToyPolicy, reference: &ToyPolicy, ctx: TokenId) -> Result<(Vec<f64>, Vec<f64>, f64), GrpoError> {
    let lp = theta.log_probs(ctx);
    let lq = reference.log_probs(ctx);
    let kl = kl_from_log_probs(&lp, &lq).map_err(|token| GrpoError::SupportMismatch { context: ctx, token })?;
    Ok((lp, lq, kl))
}

fn check_vocab(a: &ToyPolicy, b: &ToyPolicy) -> Result<(), GrpoError> {
    if a.vocab() == b.vocab() {
        Ok(())
    } else {
        Err(GrpoError::VocabMismatch)
    }
}

/// Mean over `contexts` of the exact per-context forward KL.
pub fn kl_divergence(theta: &ToyPolicy, reference: &ToyPolicy, contexts: &[TokenId]) -> Result<f64, GrpoError> {
    check_vocab(theta, reference)?;
    if contexts.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &c in contexts {
        total += kl_at(theta, reference, c)?.2;
    }
    Ok(total / contexts.len() as f64)
}

/// Adds `scale * ∇θ kl_divergence(θ, ref, contexts)` into `grad`.
fn accumulate_kl_grad(
    theta: &ToyPolicy,
    reference: &ToyPolicy,
    contexts: &[TokenId],
    scale: f64,
    grad: &mut [f64],
) -> Result<(), GrpoError> {
    if contexts.is_empty() {
        return Ok(());
    }
    let v = theta.vocab_size();
    let w = scale / contexts.len() as f64;
    for &c in contexts {
        let (lp, lq, kl) = kl_at(theta, reference, c)?;
        let row = &mut grad[c * v..(c + 1) * v];
        for k in 0..v {
            let p = lp[k].exp();
            if p > 0.0 {
                row[k] += w * p * (lp[k] - lq[k] - kl);
            }
        }
    }
    Ok(())
}

/// Largest total-variation distance between the two policies' conditional
/// distributions over all contexts.
pub fn max_tv_distance(a: &ToyPolicy, b: &ToyPolicy) -> f64 {
    (0..a.vocab_size())
        .map(|c| {
            let (p, q) = (a.probs(c), b.probs(c));
            0.5 * p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// `min(ρA, clip(ρ, 1-ε, 1+ε)A)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub eps: f64,
    pub beta: f64,
    pub lr: f64,
    pub updates: usize,
    pub seed: u64,
    /// Longest sampled output, end marker included.
    pub max_len: usize,
    /// Gradient steps taken against each `π_old` snapshot.
    pub inner_steps: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            eps: 0.2,
            beta: 0.01,
            lr: 0.5,
            updates: 100,
            seed: 0,
            max_len: 12,
            inner_steps: 1,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return bad("eps must lie in (0, 1)");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.max_len == 0 || self.inner_steps == 0 {
            return bad("max_len and inner_steps must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub query: Vec<TokenId>,
    pub outputs: Vec<Vec<TokenId>>,
    pub old_logps: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(
        query: Vec<TokenId>,
        outputs: Vec<Vec<TokenId>>,
        old_logps: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self, GrpoError> {
        if outputs.len() != old_logps.len() || outputs.len() != rewards.len() {
            return Err(GrpoError::MalformedGroup("outputs, old_logps and rewards differ in length".into()));
        }
        let advantages = advantages(&rewards)?;
        Ok(Self {
            query,
            outputs,
            old_logps,
            rewards,
            advantages,
        })
    }

    pub fn size(&self) -> usize {
        self.outputs.len()
    }

    /// Context of every generated token, with multiplicity.
    pub fn visited_contexts(&self, policy: &ToyPolicy) -> Vec<TokenId> {
        self.outputs
            .iter()
            .flat_map(|o| policy.steps(&self.query, o).map(|(c, _)| c).collect::<Vec<_>>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateValue {
    pub objective: f64,
    /// `1/G Σ_i` clipped terms, before the KL penalty.
    pub policy_term: f64,
    pub kl: f64,
    /// `∇θ objective`.
    pub grad: Vec<f64>,
}

/// Objective value and exact gradient for one group. Where the clipped
/// branch is strictly smaller, that output contributes no gradient.
pub fn surrogate(
    group: &RolloutGroup,
    theta: &ToyPolicy,
    reference: &ToyPolicy,
    cfg: &GrpoConfig,
) -> Result<SurrogateValue, GrpoError> {
    check_vocab(theta, reference)?;
    let g = group.size();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall(g));
    }
    if group.advantages.len() != g || group.old_logps.len() != g {
        return Err(GrpoError::MalformedGroup("advantages not populated".into()));
    }
    let mut grad = vec![0.0; theta.logits().len()];
    let mut policy_term = 0.0;
    for (i, out) in group.outputs.iter().enumerate() {
        let old = group.old_logps[i];
        if !old.is_finite() || old > 0.0 {
            return Err(GrpoError::NonFiniteRatio(i));
        }
        let ratio = (theta.log_prob(&group.query, out)? - old).exp();
        if !ratio.is_finite() {
            return Err(GrpoError::NonFiniteRatio(i));
        }
        let adv = group.advantages[i];
        let term = clipped_term(ratio, adv, cfg.eps);
        policy_term += term / g as f64;
        let clipped = ratio.clamp(1.0 - cfg.eps, 1.0 + cfg.eps);
        if ratio * adv <= clipped * adv && adv != 0.0 {
            theta.accumulate_grad_log_prob(&group.query, out, adv * ratio / g as f64, &mut grad);
        }
    }
    let contexts = group.visited_contexts(theta);
    let kl = kl_divergence(theta, reference, &contexts)?;
    if cfg.beta > 0.0 {
        accumulate_kl_grad(theta, reference, &contexts, -cfg.beta, &mut grad)?;
    }
    Ok(SurrogateValue {
        objective: policy_term - cfg.beta * kl,
        policy_term,
        kl,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoLogRow {
    pub step: usize,
    pub objective: f64,
    pub mean_reward: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoLog {
    pub rows: Vec<GrpoLogRow>,
}

impl GrpoLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,objective,mean_reward,kl\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.objective, r.mean_reward, r.kl));
        }
        out
    }
}

/// Samples one group per query from `old` and scores it.
pub fn collect_groups<R>(
    old: &ToyPolicy,
    queries: &[Vec<TokenId>],
    reward_fn: &R,
    cfg: &GrpoConfig,
    update: usize,
) -> Result<Vec<RolloutGroup>, GrpoError>
where
    R: Fn(&[TokenId], &[TokenId]) -> f64 + Sync,
{
    queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            let samples: Vec<_> = (0..cfg.group_size)
                .into_par_iter()
                .map(|i| {
                    let seed = derive_seed(cfg.seed, &[update as u64, qi as u64, i as u64]);
                    let s = old.sample_seeded(q, cfg.max_len, seed);
                    let r = reward_fn(q, &s.tokens);
                    (s, r)
                })
                .collect();
            let old_logps = samples.iter().map(|(s, _)| s.total_logp()).collect();
            let rewards = samples.iter().map(|(_, r)| *r).collect();
            let outputs = samples.into_iter().map(|(s, _)| s.tokens).collect();
            RolloutGroup::new(q.clone(), outputs, old_logps, rewards)
        })
        .collect()
}

/// Runs `cfg.updates` rounds of: snapshot `π_old ← π_θ`, sample a group per
/// query, standardize rewards, and take `inner_steps` gradient-ascent steps
/// on the mean surrogate over queries. The reference policy is `init`.
pub fn train_grpo<R>(
    init: &ToyPolicy,
    queries: &[Vec<TokenId>],
    reward_fn: &R,
    cfg: &GrpoConfig,
) -> Result<(ToyPolicy, GrpoLog), GrpoError>
where
    R: Fn(&[TokenId], &[TokenId]) -> f64 + Sync,
{
    cfg.validate()?;
    if queries.is_empty() {
        return Err(GrpoError::InvalidConfig("at least one query is required".into()));
    }
    let reference = init.clone();
    let mut theta = init.clone();
    let mut log = GrpoLog::default();
    for update in 0..cfg.updates {
        let old = theta.clone();
        let groups = collect_groups(&old, queries, reward_fn, cfg, update)?;
        let mean_reward = groups.iter().flat_map(|g| &g.rewards).sum::<f64>()
            / (groups.len() * cfg.group_size) as f64;
        let mut first: Option<(f64, f64, f64)> = None;
        for _ in 0..cfg.inner_steps {
            let mut grad = vec![0.0; theta.logits().len()];
            let (mut objective, mut kl) = (0.0, 0.0);
            for group in &groups {
                let s = surrogate(group, &theta, &reference, cfg)?;
                objective += s.objective / groups.len() as f64;
                kl += s.kl / groups.len() as f64;
                for (a, b) in grad.iter_mut().zip(&s.grad) {
                    *a += b / groups.len() as f64;
                }
            }
            let grad_norm = l2_norm(&grad);
            if !objective.is_finite() || !grad_norm.is_finite() {
                return Err(GrpoError::DivergenceDetected(update));
            }
            first.get_or_insert((objective, kl, grad_norm));
            for (p, g) in theta.logits_mut().iter_mut().zip(&grad) {
                *p += cfg.lr * g;
            }
        }
        let (objective, kl, grad_norm) = first.expect("inner_steps >= 1");
        log.rows.push(GrpoLogRow {
            step: update,
            objective,
            mean_reward,
            kl,
            grad_norm,
        });
    }
    Ok((theta, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Vocab;
    use std::sync::Arc;

    #[test]
    fn advantage_example() {
        let a = advantages(&[1.0, 2.0, 3.0]).unwrap();
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((a[0] + expected).abs() < 1e-12);
        assert_eq!(a[1], 0.0);
        assert!((a[2] - expected).abs() < 1e-12);
        assert!((a[2] - 1.224745).abs() < 1e-6);
    }

    #[test]
    fn degenerate_group() {
        assert_eq!(advantages(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn group_too_small() {
        assert!(matches!(advantages(&[1.0]), Err(GrpoError::GroupTooSmall(1))));
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clipped_term(1.0, 2.0, 0.2), 2.0);
        assert_eq!(clipped_term(2.0, 1.0, 0.2), 1.2);
        assert_eq!(clipped_term(0.5, -1.0, 0.2), -0.8);
    }

    #[test]
    fn negative_advantage_is_unbounded_below() {
        // With A < 0 a large ratio takes the unclipped branch, so the term
        // can fall well under (1 - eps) * A.
        assert_eq!(clipped_term(3.0, -1.0, 0.2), -3.0);
    }

    #[test]
    fn kl_identical_is_zero() {
        let v = Arc::new(Vocab::with_markers(["a", "b"]).unwrap());
        let mut p = ToyPolicy::uniform(v);
        for (i, l) in p.logits_mut().iter_mut().enumerate() {
            *l = (i as f64 * 0.7).sin();
        }
        assert_eq!(kl_divergence(&p, &p, &[0, 1, 2, 3]).unwrap(), 0.0);
    }

    #[test]
    fn support_mismatch() {
        let v = Arc::new(Vocab::with_markers(["a"]).unwrap());
        let theta = ToyPolicy::uniform(v.clone());
        let rows = vec![vec![0.5, 0.5, 0.0]; 3];
        let reference = ToyPolicy::from_probabilities(v, &rows).unwrap();
        assert!(matches!(
            kl_divergence(&theta, &reference, &[0]),
            Err(GrpoError::SupportMismatch { context: 0, token: 2 })
        ));
    }

    #[test]
    fn stale_old_logps_rejected() {
        let v = Arc::new(Vocab::with_markers(["a"]).unwrap());
        let p = ToyPolicy::uniform(v);
        let mut g = RolloutGroup::new(vec![0], vec![vec![2, 1], vec![1]], vec![-1.0, -1.0], vec![0.0, 1.0]).unwrap();
        g.old_logps[0] = f64::NEG_INFINITY;
        assert!(matches!(
            surrogate(&g, &p, &p, &GrpoConfig::default()),
            Err(GrpoError::NonFiniteRatio(0))
        ));
    }

    #[test]
    fn config_validation() {
        let ok = GrpoConfig::default();
        assert!(ok.validate().is_ok());
        assert!(GrpoConfig { eps: 1.0, ..ok.clone() }.validate().is_err());
        assert!(GrpoConfig { beta: -0.1, ..ok.clone() }.validate().is_err());
        assert!(matches!(
            GrpoConfig { group_size: 1, ..ok }.validate(),
            Err(GrpoError::GroupTooSmall(1))
        ));
    }

    #[test]
    fn constant_reward_moves_only_through_kl() {
        let v = Arc::new(Vocab::with_markers(["a", "b", "c"]).unwrap());
        let mut init = ToyPolicy::uniform(v);
        for (i, l) in init.logits_mut().iter_mut().enumerate() {
            *l = ((i * 13) % 7) as f64 * 0.2;
        }
        let cfg = GrpoConfig {
            updates: 5,
            beta: 0.0,
            max_len: 5,
            ..Default::default()
        };
        let (trained, log) = train_grpo(&init, &[vec![0]], &|_: &[TokenId], _: &[TokenId]| 1.0, &cfg).unwrap();
        assert_eq!(trained, init);
        assert!(log.rows.iter().all(|r| r.objective == 0.0));
    }
}
