//! Reward-model training with the aggregated Bradley-Terry loss and its
//! bandit special case, plus preference accuracy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{self, ModelParams};
pub use crate::numerics::LossPoint;
use crate::numerics::{self, log_sigmoid, sigmoid, Adam, GradResult, Objective, ParamVector};
use crate::rng::rng;
use crate::segment::{self, SegmentSpan};
use crate::task::{PreferencePair, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Bandit,
    Sentence,
    Segment,
    Token,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bandit => "bandit",
            Self::Sentence => "sentence",
            Self::Segment => "segment",
            Self::Token => "token",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub c_ent: f64,
    pub aggregation: Aggregation,
    pub grad_clip_norm: f64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self { batch_size: 16, epochs: 1, lr: 1e-2, c_ent: 1.75, aggregation: Aggregation::Average, grad_clip_norm: 1.0 }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.c_ent >= 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("reward: batch_size, lr, grad_clip_norm must be positive and c_ent ≥ 0".into()));
        }
        Ok(())
    }
}

/// Spans for one response under a granularity. Entropy segmentation uses the
/// frozen SFT model's predictive entropies.
pub fn segment_response(
    granularity: Granularity,
    sft: &ModelParams,
    spec: &TaskSpec,
    prompt: &[usize],
    response: &[usize],
    c_ent: f64,
) -> Result<Vec<SegmentSpan>> {
    if response.is_empty() {
        return Err(Error::Empty("response"));
    }
    match granularity {
        Granularity::Bandit => Ok(segment::whole_span(response.len())),
        Granularity::Token => Ok(segment::per_token_spans(response.len())),
        Granularity::Sentence => segment::segment_by_delimiters(response, &spec.delimiter_tokens),
        Granularity::Segment => segment::segment_by_entropy(&lm::predictive_entropies(sft, prompt, response)?, c_ent),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentedPair {
    pub pair: PreferencePair,
    pub spans_w: Vec<SegmentSpan>,
    pub spans_l: Vec<SegmentSpan>,
}

pub fn segment_dataset(
    data: &[PreferencePair],
    granularity: Granularity,
    sft: &ModelParams,
    spec: &TaskSpec,
    c_ent: f64,
) -> Result<Vec<SegmentedPair>> {
    data.iter()
        .map(|p| {
            Ok(SegmentedPair {
                spans_w: segment_response(granularity, sft, spec, &p.prompt, &p.chosen.response_tokens, c_ent)?,
                spans_l: segment_response(granularity, sft, spec, &p.prompt, &p.rejected.response_tokens, c_ent)?,
                pair: p.clone(),
            })
        })
        .collect()
}

/// Sequence evaluation `e = (1/T) Σ_t r_t`.
pub fn seq_eval(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::Empty("segment rewards"));
    }
    Ok(numerics::mean(rewards))
}

/// `-log σ(e_w - e_l)`.
pub fn bt_from_evals(e_w: f64, e_l: f64) -> f64 {
    -log_sigmoid(e_w - e_l)
}

/// Mean Bradley-Terry loss over segment-averaged evaluations.
pub struct SegmentBtLoss<'a> {
    pub template: &'a ModelParams,
    pub pairs: &'a [SegmentedPair],
}

impl SegmentBtLoss<'_> {
    fn compute(&self, params: &ParamVector, want_grad: bool) -> Result<GradResult> {
        if self.pairs.is_empty() {
            return Err(Error::Empty("preference batch"));
        }
        let model = self.template.with_values(params.values.clone());
        let scale = 1.0 / self.pairs.len() as f64;
        let mut grad = if want_grad { vec![0.0; model.len()] } else { Vec::new() };
        let mut total = 0.0;
        for sp in self.pairs {
            let p = &sp.pair;
            let pos_w = lm::span_read_positions(p.prompt.len(), &sp.spans_w);
            let pos_l = lm::span_read_positions(p.prompt.len(), &sp.spans_l);
            let (tape_w, r_w) = lm::scalar_reads(&model, &p.chosen.full(), &pos_w)?;
            let (tape_l, r_l) = lm::scalar_reads(&model, &p.rejected.full(), &pos_l)?;
            let margin = seq_eval(&r_w)? - seq_eval(&r_l)?;
            let loss = numerics::ensure_finite(bt_from_evals(margin, 0.0), "bt.loss")?;
            total += loss * scale;
            if want_grad {
                // d/dm [-log σ(m)] = -σ(-m)
                let dm = -sigmoid(-margin) * scale;
                let ds_w = vec![dm / r_w.len() as f64; r_w.len()];
                let ds_l = vec![-dm / r_l.len() as f64; r_l.len()];
                lm::scalar_backward(&model, &tape_w, &pos_w, &ds_w, &mut grad);
                lm::scalar_backward(&model, &tape_l, &pos_l, &ds_l, &mut grad);
            }
        }
        Ok(GradResult { value: total, grad })
    }
}

impl Objective for SegmentBtLoss<'_> {
    fn name(&self) -> &str {
        "segment_bt"
    }

    fn eval(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.compute(params, false)?.value)
    }

    fn eval_with_grad(&self, params: &ParamVector) -> Result<GradResult> {
        self.compute(params, true)
    }
}

/// Classical Bradley-Terry loss on the final-token scalar reward.
pub struct BanditBtLoss<'a> {
    pub template: &'a ModelParams,
    pub pairs: &'a [PreferencePair],
}

impl BanditBtLoss<'_> {
    fn as_segmented(&self) -> Vec<SegmentedPair> {
        self.pairs
            .iter()
            .map(|p| SegmentedPair {
                spans_w: segment::whole_span(p.chosen.response_tokens.len()),
                spans_l: segment::whole_span(p.rejected.response_tokens.len()),
                pair: p.clone(),
            })
            .collect()
    }
}

impl Objective for BanditBtLoss<'_> {
    fn name(&self) -> &str {
        "bandit_bt"
    }

    fn eval(&self, params: &ParamVector) -> Result<f64> {
        let seg = self.as_segmented();
        SegmentBtLoss { template: self.template, pairs: &seg }.eval(params)
    }

    fn eval_with_grad(&self, params: &ParamVector) -> Result<GradResult> {
        let seg = self.as_segmented();
        SegmentBtLoss { template: self.template, pairs: &seg }.eval_with_grad(params)
    }
}

pub fn bt_loss_seg(params: &ModelParams, pair: &SegmentedPair) -> Result<f64> {
    SegmentBtLoss { template: params, pairs: std::slice::from_ref(pair) }.eval(&params.params)
}

pub fn bt_loss_bandit(params: &ModelParams, pair: &PreferencePair) -> Result<f64> {
    let r_w = lm::reward_forward(params, &pair.prompt, &pair.chosen.response_tokens, &segment::whole_span(pair.chosen.response_tokens.len()))?;
    let r_l = lm::reward_forward(params, &pair.prompt, &pair.rejected.response_tokens, &segment::whole_span(pair.rejected.response_tokens.len()))?;
    Ok(bt_from_evals(r_w[0], r_l[0]))
}

/// Minibatch Adam on the segment BT loss with gradient-norm clipping.
/// `data` must already carry spans for the chosen granularity.
pub fn train_reward_model(
    params0: &ModelParams,
    data: &[SegmentedPair],
    cfg: &RewardTrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<LossPoint>)> {
    cfg.validate()?;
    let mut model = params0.clone();
    let mut opt = Adam::new(model.len());
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut r = rng(seed);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SegmentedPair> = chunk.iter().map(|&i| data[i].clone()).collect();
            let out = SegmentBtLoss { template: &model, pairs: &batch }
                .eval_with_grad(&model.params)
                .map_err(|e| Error::Diverged { step, reason: e.to_string() })?;
            let mut grad = out.grad;
            let grad_norm = numerics::clip_grad_norm(&mut grad, cfg.grad_clip_norm);
            if !out.value.is_finite() || !grad_norm.is_finite() {
                return Err(Error::Diverged { step, reason: "non-finite loss".into() });
            }
            opt.step(&mut model.params.values, &grad, cfg.lr);
            curve.push(LossPoint { step, loss: out.value, grad_norm });
            step += 1;
        }
    }
    Ok((model, curve))
}

/// Sequence evaluations `(e_w, e_l)` for one segmented pair.
pub fn pair_evals(params: &ModelParams, sp: &SegmentedPair) -> Result<(f64, f64)> {
    let p = &sp.pair;
    let w = lm::reward_forward(params, &p.prompt, &p.chosen.response_tokens, &sp.spans_w)?;
    let l = lm::reward_forward(params, &p.prompt, &p.rejected.response_tokens, &sp.spans_l)?;
    Ok((seq_eval(&w)?, seq_eval(&l)?))
}

/// Fraction of pairs with `e_w > e_l`; ties count one half.
pub fn pref_accuracy(params: &ModelParams, data: &[SegmentedPair]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("preference data"));
    }
    let mut score = 0.0;
    for sp in data {
        let (w, l) = pair_evals(params, sp)?;
        score += if w > l {
            1.0
        } else if w == l {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / data.len() as f64)
}
