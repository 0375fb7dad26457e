//! KL-regularized PPO against shaped per-token rewards: rollout, reward
//! shaping (normalize, interpolate, KL penalty), GAE, and clipped updates for
//! a separate policy and value network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{interpolate, InterpStrategy};
use crate::lm::{self, ModelParams};
use crate::normalizer::{normalize_spans, NormStrategy, NormalizerFn};
use crate::numerics::{self, softmax_into, Adam, GradResult, Objective, ParamVector};
use crate::reward::{segment_response, seq_eval, Granularity};
use crate::rng::derive_seed;
use crate::segment::SegmentSpan;
use crate::task::{oracle_score, TaskSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    /// Reward model and PPO share the same granularity.
    #[default]
    Matched,
    /// Bandit-trained reward model scores entropy segments.
    BanditAsSegment,
    /// Segment-trained reward model, collapsed to one end-of-sequence reward.
    SegmentAsBandit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PPOConfig {
    pub kl_beta: f64,
    pub eps_clip: f64,
    pub value_clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub rollout_batch: usize,
    /// Gradient steps per rollout batch, each on a disjoint minibatch.
    pub minibatches: usize,
    pub epochs_per_batch: usize,
    /// Passes over the prompt set.
    pub epochs: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub grad_clip_norm: f64,
    pub max_gen_len: usize,
    pub temperature: f64,
    pub c_ent: f64,
    pub reward_granularity: Granularity,
    pub reward_source: RewardSource,
    pub norm_strategy: NormStrategy,
    pub interp_strategy: InterpStrategy,
    pub seed: u64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        Self {
            kl_beta: 0.01,
            eps_clip: 0.2,
            value_clip: 0.25,
            gamma: 1.0,
            gae_lambda: 0.95,
            rollout_batch: 256,
            minibatches: 1,
            epochs_per_batch: 1,
            epochs: 2,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            grad_clip_norm: 1.0,
            max_gen_len: 64,
            temperature: 1.0,
            c_ent: 1.75,
            reward_granularity: Granularity::Segment,
            reward_source: RewardSource::Matched,
            norm_strategy: NormStrategy::Regression,
            interp_strategy: InterpStrategy::EvenSplit,
            seed: 0,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return bad("eps_clip must be in (0, 1)");
        }
        if !(self.kl_beta >= 0.0) {
            return bad("kl_beta must be ≥ 0");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must be in [0, 1]");
        }
        if self.rollout_batch == 0 || self.minibatches == 0 || self.max_gen_len == 0 {
            return bad("rollout_batch, minibatches, max_gen_len must be positive");
        }
        if !(self.actor_lr >= 0.0 && self.critic_lr >= 0.0 && self.value_clip > 0.0 && self.grad_clip_norm > 0.0) {
            return bad("learning rates must be ≥ 0, clips positive");
        }
        Ok(())
    }

    /// Granularity of the actions PPO scores.
    pub fn action_granularity(&self) -> Granularity {
        match self.reward_source {
            RewardSource::Matched => self.reward_granularity,
            RewardSource::BanditAsSegment | RewardSource::SegmentAsBandit => Granularity::Segment,
        }
    }

    /// Granularity the reward model is trained at.
    pub fn reward_model_granularity(&self) -> Granularity {
        match self.reward_source {
            RewardSource::Matched => self.reward_granularity,
            RewardSource::BanditAsSegment => Granularity::Bandit,
            RewardSource::SegmentAsBandit => Granularity::Segment,
        }
    }
}

/// Frozen models a rollout needs.
#[derive(Clone, Copy)]
pub struct Frozen<'a> {
    pub spec: &'a TaskSpec,
    pub sft: &'a ModelParams,
    pub reward: &'a ModelParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub spans: Vec<SegmentSpan>,
    pub raw_seg_rewards: Vec<f64>,
    pub norm_seg_rewards: Vec<f64>,
    pub shaped: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Rollout {
    pub fn kl(&self) -> Vec<f64> {
        self.logp_old.iter().zip(&self.logp_ref).map(|(a, b)| a - b).collect()
    }
}

fn context(prompt: &[usize], response: &[usize]) -> Vec<usize> {
    let mut t = prompt.to_vec();
    t.extend_from_slice(&response[..response.len() - 1]);
    t
}

/// Per-token value estimates `V(s_i)` for each response position.
pub fn token_values(value: &ModelParams, prompt: &[usize], response: &[usize]) -> Result<Vec<f64>> {
    let tape = value.run(&context(prompt, response))?;
    Ok((0..response.len()).map(|i| value.scalar_at(tape.hidden_at(prompt.len() - 1 + i))).collect())
}

/// One sampled response per prompt, segmented with the SFT model and scored
/// by the reward model. Prompt `k` uses the seed stream `seed_base + k`.
pub fn rollout(
    policy: &ModelParams,
    value: &ModelParams,
    frozen: Frozen<'_>,
    prompts: &[Vec<usize>],
    cfg: &PPOConfig,
    seed_base: u64,
) -> Result<Vec<Rollout>> {
    if prompts.is_empty() {
        return Err(Error::Empty("prompts"));
    }
    let g = cfg.action_granularity();
    prompts
        .iter()
        .enumerate()
        .map(|(k, prompt)| {
            let seed = derive_seed(cfg.seed, "rollout", seed_base + k as u64);
            let s = lm::sample(policy, prompt, cfg.max_gen_len, cfg.temperature, frozen.spec.eos_token, seed)?;
            let response = s.sequence.response_tokens;
            let (_, logp_ref) = lm::sequence_logprob(frozen.sft, prompt, &response)?;
            let spans = segment_response(g, frozen.sft, frozen.spec, prompt, &response, cfg.c_ent)?;
            let raw = lm::reward_forward(frozen.reward, prompt, &response, &spans)?;
            let values = token_values(value, prompt, &response)?;
            Ok(Rollout {
                prompt: prompt.clone(),
                logp_old: s.logprobs,
                logp_ref,
                spans,
                raw_seg_rewards: raw,
                norm_seg_rewards: Vec::new(),
                shaped: Vec::new(),
                values,
                advantages: Vec::new(),
                returns: Vec::new(),
                response,
            })
        })
        .collect()
}

/// Normalize, interpolate, and subtract the per-token KL penalty.
pub fn shape_rewards(r: &mut Rollout, norm: &NormalizerFn, cfg: &PPOConfig) -> Result<()> {
    let normed = normalize_spans(&r.raw_seg_rewards, &r.spans, norm)?;
    let n = r.response.len();
    let mut dense = if cfg.reward_source == RewardSource::SegmentAsBandit {
        let mut v = vec![0.0; n];
        v[n - 1] = seq_eval(&normed)?;
        v
    } else {
        interpolate(&normed, &r.spans, cfg.interp_strategy)?.values
    };
    for (d, k) in dense.iter_mut().zip(r.kl()) {
        *d -= cfg.kl_beta * k;
    }
    r.norm_seg_rewards = normed;
    r.shaped = dense;
    Ok(())
}

/// GAE with terminal bootstrap 0. Returns `(advantages, returns)`.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::Shape(format!("{} rewards, {} values", rewards.len(), values.len())));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for i in (0..n).rev() {
        let next = if i + 1 < n { values[i + 1] } else { 0.0 };
        let delta = rewards[i] + gamma * next - values[i];
        acc = delta + gamma * lambda * acc;
        adv[i] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Whitens advantages across all tokens of the batch to mean 0, std 1
/// (population std). A constant batch maps to all zeros.
pub fn whiten_advantages(rollouts: &mut [Rollout]) {
    let all: Vec<f64> = rollouts.iter().flat_map(|r| r.advantages.iter().copied()).collect();
    if all.is_empty() {
        return;
    }
    let m = numerics::mean(&all);
    let var = all.iter().map(|a| (a - m).powi(2)).sum::<f64>() / all.len() as f64;
    let s = var.sqrt();
    for r in rollouts.iter_mut() {
        for a in &mut r.advantages {
            *a = if s > 1e-12 { (*a - m) / s } else { 0.0 };
        }
    }
}

/// Clipped surrogate `-mean_i min(ρ_i A_i, clip(ρ_i, 1±ε) A_i)` over all tokens.
pub struct PolicyLoss<'a> {
    pub template: &'a ModelParams,
    pub rollouts: &'a [Rollout],
    pub eps_clip: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PolicyDiag {
    pub clip_frac: f64,
    pub approx_kl: f64,
}

impl PolicyLoss<'_> {
    pub fn compute(&self, params: &ParamVector, want_grad: bool) -> Result<(GradResult, PolicyDiag)> {
        let model = self.template.with_values(params.values.clone());
        let n_tok: usize = self.rollouts.iter().map(|r| r.response.len()).sum();
        if n_tok == 0 {
            return Err(Error::Empty("policy batch"));
        }
        let scale = 1.0 / n_tok as f64;
        let mut grad = if want_grad { vec![0.0; model.len()] } else { Vec::new() };
        let (mut total, mut clipped, mut kl) = (0.0, 0usize, 0.0);
        let mut probs = vec![0.0; model.vocab];
        for r in self.rollouts {
            let tape = model.run(&context(&r.prompt, &r.response))?;
            let mut dlogits = Vec::new();
            for (i, &y) in r.response.iter().enumerate() {
                let j = r.prompt.len() - 1 + i;
                let logits = model.logits_at(tape.hidden_at(j));
                let logp = logits[y] - numerics::logsumexp(&logits);
                let ratio = (logp - r.logp_old[i]).exp();
                if !ratio.is_finite() {
                    return Err(Error::NonFinite(format!("ppo ratio at token {i}: logp {logp}, old {}", r.logp_old[i])));
                }
                let a = r.advantages[i];
                let unclipped = ratio * a;
                let clip = ratio.clamp(1.0 - self.eps_clip, 1.0 + self.eps_clip) * a;
                kl += (r.logp_old[i] - logp) * scale;
                let coef = if unclipped <= clip {
                    -unclipped * scale
                } else {
                    clipped += 1;
                    0.0
                };
                total -= unclipped.min(clip) * scale;
                if want_grad && coef != 0.0 {
                    softmax_into(&logits, &mut probs);
                    let mut d: Vec<f64> = probs.iter().map(|p| -p * coef).collect();
                    d[y] += coef;
                    dlogits.push((j, d));
                }
            }
            if want_grad && !dlogits.is_empty() {
                lm::logits_backward(&model, &tape, &dlogits, &mut grad);
            }
        }
        numerics::ensure_finite(total, "ppo.policy_loss")?;
        let diag = PolicyDiag { clip_frac: clipped as f64 * scale, approx_kl: kl };
        Ok((GradResult { value: total, grad }, diag))
    }
}

impl Objective for PolicyLoss<'_> {
    fn name(&self) -> &str {
        "ppo_policy"
    }

    fn eval(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.compute(params, false)?.0.value)
    }

    fn eval_with_grad(&self, params: &ParamVector) -> Result<GradResult> {
        Ok(self.compute(params, true)?.0)
    }
}

/// Clipped value loss `0.5 mean max((V - R)^2, (V_clip - R)^2)`.
pub struct ValueLoss<'a> {
    pub template: &'a ModelParams,
    pub rollouts: &'a [Rollout],
    pub value_clip: f64,
}

impl ValueLoss<'_> {
    fn compute(&self, params: &ParamVector, want_grad: bool) -> Result<GradResult> {
        let model = self.template.with_values(params.values.clone());
        let n_tok: usize = self.rollouts.iter().map(|r| r.response.len()).sum();
        if n_tok == 0 {
            return Err(Error::Empty("value batch"));
        }
        let scale = 1.0 / n_tok as f64;
        let mut grad = if want_grad { vec![0.0; model.len()] } else { Vec::new() };
        let mut total = 0.0;
        for r in self.rollouts {
            let positions: Vec<usize> = (0..r.response.len()).map(|i| r.prompt.len() - 1 + i).collect();
            let (tape, v) = lm::scalar_reads(&model, &context(&r.prompt, &r.response), &positions)?;
            let mut ds = vec![0.0; v.len()];
            for i in 0..v.len() {
                let old = r.values[i];
                let vc = old + (v[i] - old).clamp(-self.value_clip, self.value_clip);
                let (e1, e2) = (v[i] - r.returns[i], vc - r.returns[i]);
                if e1 * e1 >= e2 * e2 {
                    total += 0.5 * e1 * e1 * scale;
                    ds[i] = e1 * scale;
                } else {
                    total += 0.5 * e2 * e2 * scale;
                    let inside = (v[i] - old).abs() < self.value_clip;
                    ds[i] = if inside { e2 * scale } else { 0.0 };
                }
            }
            if want_grad {
                lm::scalar_backward(&model, &tape, &positions, &ds, &mut grad);
            }
        }
        numerics::ensure_finite(total, "ppo.value_loss")?;
        Ok(GradResult { value: total, grad })
    }
}

impl Objective for ValueLoss<'_> {
    fn name(&self) -> &str {
        "ppo_value"
    }

    fn eval(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.compute(params, false)?.value)
    }

    fn eval_with_grad(&self, params: &ParamVector) -> Result<GradResult> {
        self.compute(params, true)
    }
}

/// Adam state of both networks, carried across batches.
pub struct PpoState {
    pub policy: ModelParams,
    pub value: ModelParams,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl PpoState {
    pub fn from_sft(sft: &ModelParams) -> Self {
        Self { policy: sft.clone(), value: sft.clone(), actor_opt: Adam::new(sft.len()), critic_opt: Adam::new(sft.len()) }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    pub policy_grad_norm: f64,
    pub value_grad_norm: f64,
}

/// Clipped policy and value steps on rollouts with whitened advantages.
/// Losses are reported before the first step.
pub fn ppo_update(state: &mut PpoState, rollouts: &[Rollout], cfg: &PPOConfig) -> Result<UpdateStats> {
    let mut stats = UpdateStats::default();
    let per = rollouts.len().div_ceil(cfg.minibatches).max(1);
    let mut first = true;
    for _ in 0..cfg.epochs_per_batch {
        for mb in rollouts.chunks(per) {
            let (pg, diag) = PolicyLoss { template: &state.policy, rollouts: mb, eps_clip: cfg.eps_clip }.compute(&state.policy.params, true)?;
            let vg = ValueLoss { template: &state.value, rollouts: mb, value_clip: cfg.value_clip }.eval_with_grad(&state.value.params)?;
            let mut gp = pg.grad;
            let mut gv = vg.grad;
            let np = numerics::clip_grad_norm(&mut gp, cfg.grad_clip_norm);
            let nv = numerics::clip_grad_norm(&mut gv, cfg.grad_clip_norm);
            if !np.is_finite() || !nv.is_finite() {
                return Err(Error::NonFinite("ppo gradient".into()));
            }
            state.actor_opt.step(&mut state.policy.params.values, &gp, cfg.actor_lr);
            state.critic_opt.step(&mut state.value.params.values, &gv, cfg.critic_lr);
            if first {
                stats =
                    UpdateStats { policy_loss: pg.value, value_loss: vg.value, clip_frac: diag.clip_frac, policy_grad_norm: np, value_grad_norm: nv };
                first = false;
            }
        }
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub mean_oracle_score: f64,
    pub mean_kl: f64,
    pub mean_raw_reward: f64,
    pub mean_norm_reward: f64,
    pub mean_resp_len: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `cfg.epochs` passes over `prompts` in batches of `cfg.rollout_batch`.
/// Policy and value networks start from the SFT model.
pub fn train_ppo(frozen: Frozen<'_>, norm: &NormalizerFn, prompts: &[Vec<usize>], cfg: &PPOConfig) -> Result<(ModelParams, Vec<MetricsRow>)> {
    cfg.validate()?;
    norm.validate()?;
    if prompts.is_empty() {
        return Err(Error::Empty("prompt set"));
    }
    let mut state = PpoState::from_sft(frozen.sft);
    let mut rows = Vec::new();
    let mut iter = 0;
    for _ in 0..cfg.epochs {
        for batch in prompts.chunks(cfg.rollout_batch) {
            let mut rs = rollout(&state.policy, &state.value, frozen, batch, cfg, (iter * cfg.rollout_batch) as u64)?;
            for r in &mut rs {
                shape_rewards(r, norm, cfg)?;
                let (a, ret) = compute_gae(&r.shaped, &r.values, cfg.gamma, cfg.gae_lambda)?;
                r.advantages = a;
                r.returns = ret;
            }
            let n = rs.len() as f64;
            let mean_oracle = rs.iter().map(|r| oracle_score(frozen.spec, &r.prompt, &r.response)).sum::<f64>() / n;
            let mean_kl = rs.iter().map(|r| r.kl().iter().sum::<f64>()).sum::<f64>() / n;
            let mean_raw = rs.iter().map(|r| numerics::mean(&r.raw_seg_rewards)).sum::<f64>() / n;
            let mean_norm = rs.iter().map(|r| numerics::mean(&r.norm_seg_rewards)).sum::<f64>() / n;
            let mean_len = rs.iter().map(|r| r.response.len() as f64).sum::<f64>() / n;
            whiten_advantages(&mut rs);
            let stats = ppo_update(&mut state, &rs, cfg).map_err(|e| Error::Diverged { step: iter, reason: e.to_string() })?;
            rows.push(MetricsRow {
                iter,
                mean_oracle_score: mean_oracle,
                mean_kl,
                mean_raw_reward: mean_raw,
                mean_norm_reward: mean_norm,
                mean_resp_len: mean_len,
                policy_loss: stats.policy_loss,
                value_loss: stats.value_loss,
            });
            iter += 1;
        }
    }
    Ok((state.policy, rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_oracle_score: f64,
    pub mean_resp_len: f64,
}

/// Mean oracle score of one sampled response per held-out prompt.
pub fn evaluate_policy(
    policy: &ModelParams,
    spec: &TaskSpec,
    prompts: &[Vec<usize>],
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<EvalSummary> {
    if prompts.is_empty() {
        return Err(Error::Empty("eval prompts"));
    }
    let (mut score, mut len) = (0.0, 0.0);
    for (k, p) in prompts.iter().enumerate() {
        let s = lm::sample(policy, p, max_len, temperature, spec.eos_token, derive_seed(seed, "eval", k as u64))?;
        score += oracle_score(spec, p, &s.sequence.response_tokens);
        len += s.sequence.response_tokens.len() as f64;
    }
    let n = prompts.len() as f64;
    Ok(EvalSummary { mean_oracle_score: score / n, mean_resp_len: len / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{init_params, ModelDims};
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use crate::task::{gen_task_spec, make_prompts, TaskParams};
    use rand::Rng as _;

    fn setup() -> (TaskSpec, ModelParams, ModelParams) {
        let spec = gen_task_spec(1, &TaskParams::default()).unwrap();
        let sft = init_params(&spec, ModelDims::default(), 1);
        let mut rm = sft.clone();
        let mut r = crate::rng::rng(2);
        rm.params.group_mut("scalar.w").iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        (spec, sft, rm)
    }

    #[test]
    fn gae_examples() {
        let r = [0.5, -1.0, 2.0, 0.25];
        let v = [0.1, 0.3, -0.2, 0.7];
        let (a, ret) = compute_gae(&r, &v, 1.0, 1.0).unwrap();
        for i in 0..4 {
            let tail: f64 = r[i..].iter().sum();
            assert!((a[i] - (tail - v[i])).abs() < 1e-12);
            assert!((ret[i] - tail).abs() < 1e-12);
        }
        let (a, _) = compute_gae(&[1.5], &[0.4], 0.9, 0.8).unwrap();
        assert!((a[0] - 1.1).abs() < 1e-15);
        assert!(compute_gae(&[1.0], &[], 1.0, 1.0).is_err());
    }

    #[test]
    fn whitening_moments() {
        let (spec, sft, rm) = setup();
        let prompts = make_prompts(&spec, 6, 3);
        let frozen = Frozen { spec: &spec, sft: &sft, reward: &rm };
        let cfg = PPOConfig { max_gen_len: 12, ..PPOConfig::default() };
        let mut rs = rollout(&sft, &sft, frozen, &prompts, &cfg, 0).unwrap();
        let mut r = crate::rng::rng(5);
        for x in &mut rs {
            x.advantages = (0..x.response.len()).map(|_| r.gen_range(-3.0..5.0)).collect();
        }
        whiten_advantages(&mut rs);
        let all: Vec<f64> = rs.iter().flat_map(|x| x.advantages.clone()).collect();
        let m = numerics::mean(&all);
        let s = (all.iter().map(|a| (a - m).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
        assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rollout_contracts() {
        let (spec, sft, rm) = setup();
        let prompts = make_prompts(&spec, 8, 4);
        let frozen = Frozen { spec: &spec, sft: &sft, reward: &rm };
        let cfg = PPOConfig { max_gen_len: 10, ..PPOConfig::default() };
        let rs = rollout(&sft, &sft, frozen, &prompts, &cfg, 0).unwrap();
        for r in &rs {
            assert!(r.response.len() <= 10);
            assert!(r.kl().iter().all(|&k| k.abs() < 1e-12));
            let ents = lm::predictive_entropies(&sft, &r.prompt, &r.response).unwrap();
            assert_eq!(r.spans, crate::segment::segment_by_entropy(&ents, cfg.c_ent).unwrap());
        }
        assert_eq!(rs, rollout(&sft, &sft, frozen, &prompts, &cfg, 0).unwrap());
    }

    #[test]
    fn shaping_identities() {
        let (spec, sft, rm) = setup();
        let prompts = make_prompts(&spec, 4, 6);
        let frozen = Frozen { spec: &spec, sft: &sft, reward: &rm };
        let base = PPOConfig { max_gen_len: 16, kl_beta: 0.0, norm_strategy: NormStrategy::None, ..PPOConfig::default() };
        let mut rs = rollout(&sft, &sft, frozen, &prompts, &base, 0).unwrap();
        let id = NormalizerFn::identity();
        for r in &mut rs {
            shape_rewards(r, &id, &base).unwrap();
            assert_eq!(r.shaped, interpolate(&r.raw_seg_rewards, &r.spans, base.interp_strategy).unwrap().values);
            let sab = PPOConfig { reward_source: RewardSource::SegmentAsBandit, ..base.clone() };
            shape_rewards(r, &id, &sab).unwrap();
            let total: f64 = r.shaped.iter().sum();
            assert!((total - seq_eval(&r.raw_seg_rewards).unwrap()).abs() < 1e-12);
            assert!(r.shaped[..r.shaped.len() - 1].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn bandit_none_is_sparse() {
        let (spec, sft, rm) = setup();
        let mut pol = sft.clone();
        pol.params.values[0] += 0.3;
        let prompts = make_prompts(&spec, 4, 7);
        let frozen = Frozen { spec: &spec, sft: &sft, reward: &rm };
        let cfg = PPOConfig {
            max_gen_len: 16,
            kl_beta: 0.0,
            reward_granularity: Granularity::Bandit,
            interp_strategy: InterpStrategy::None,
            ..PPOConfig::default()
        };
        for mut r in rollout(&pol, &sft, frozen, &prompts, &cfg, 0).unwrap() {
            shape_rewards(&mut r, &NormalizerFn::identity(), &cfg).unwrap();
            assert!(r.shaped[..r.shaped.len() - 1].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn identical_params_give_zero_loss() {
        let (spec, sft, rm) = setup();
        let prompts = make_prompts(&spec, 5, 8);
        let frozen = Frozen { spec: &spec, sft: &sft, reward: &rm };
        let cfg = PPOConfig { max_gen_len: 12, ..PPOConfig::default() };
        let mut rs = rollout(&sft, &sft, frozen, &prompts, &cfg, 0).unwrap();
        let mut r = crate::rng::rng(9);
        for x in &mut rs {
            x.advantages = (0..x.response.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        }
        whiten_advantages(&mut rs);
        let loss = PolicyLoss { template: &sft, rollouts: &rs, eps_clip: 0.2 };
        assert!(loss.eval(&sft.params).unwrap().abs() < 1e-9);
        for x in &mut rs {
            x.advantages.iter_mut().for_each(|a| *a = 0.0);
        }
        let g = PolicyLoss { template: &sft, rollouts: &rs, eps_clip: 0.2 }.eval_with_grad(&sft.params).unwrap();
        assert!(g.grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn policy_and_value_grads_match_fd() {
        let params = TaskParams {
            vocab_size: 12,
            n_keyphrases: 2,
            keyphrase_len: 2,
            n_filler: 3,
            n_delimiters: 1,
            required_min: 1,
            required_max: 2,
            max_len: 8,
            ..TaskParams::default()
        };
        let spec = gen_task_spec(3, &params).unwrap();
        let mut m = ModelParams::zeros(12, ModelDims { d_emb: 2, d_hidden: 3 });
        let mut r = crate::rng::rng(3);
        m.params.values.iter_mut().for_each(|v| *v = r.gen_range(-0.8..0.8));
        let prompts = make_prompts(&spec, 1, 3);
        let frozen = Frozen { spec: &spec, sft: &m, reward: &m };
        let cfg = PPOConfig { max_gen_len: 6, ..PPOConfig::default() };
        let mut rs = rollout(&m, &m, frozen, &prompts, &cfg, 0).unwrap();
        for x in &mut rs {
            x.advantages = (0..x.response.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
            x.returns = (0..x.response.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
            x.logp_old.iter_mut().for_each(|l| *l += r.gen_range(-0.1..0.1));
        }
        let pl = PolicyLoss { template: &m, rollouts: &rs, eps_clip: 0.2 };
        let a = pl.eval_with_grad(&m.params).unwrap().grad;
        let b = finite_diff_grad(&pl, &m.params, 1e-6).unwrap();
        assert!(max_relative_error(&a, &b, 1e-6) < 1e-4);
        let vl = ValueLoss { template: &m, rollouts: &rs, value_clip: 10.0 };
        let a = vl.eval_with_grad(&m.params).unwrap().grad;
        let b = finite_diff_grad(&vl, &m.params, 1e-6).unwrap();
        assert!(max_relative_error(&a, &b, 1e-6) < 1e-4);
    }

    #[test]
    fn zero_epochs_returns_sft() {
        let (spec, sft, rm) = setup();
        let prompts = make_prompts(&spec, 3, 1);
        let cfg = PPOConfig { epochs: 0, ..PPOConfig::default() };
        let (pol, rows) = train_ppo(Frozen { spec: &spec, sft: &sft, reward: &rm }, &NormalizerFn::identity(), &prompts, &cfg).unwrap();
        assert_eq!(pol, sft);
        assert!(rows.is_empty());
    }
}
