//! Shared autoregressive backbone: token embeddings, one GRU layer, a softmax
//! head (policy / SFT) and a scalar head (reward / value).
//!
//! Position `j` of a forward pass holds the hidden state after consuming
//! tokens `0..=j`; its logits predict token `j + 1` and its scalar output is
//! the reward or value read at that state.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    self, dot, ensure_all_finite, logsumexp, matvec_add, matvec_t_add, outer_add, sigmoid, softmax_entropy, softmax_into, Adam, GradResult,
    Objective, ParamVector,
};
use crate::rng::rng;
use crate::segment::SegmentSpan;
use crate::task::{TaskSpec, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub d_emb: usize,
    pub d_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { d_emb: 32, d_hidden: 64 }
    }
}

/// Precomputed offsets into the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Offsets {
    embed: usize,
    wx: usize,
    wh: usize,
    b: usize,
    head_w: usize,
    head_b: usize,
    scalar_w: usize,
    scalar_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub vocab: usize,
    pub dims: ModelDims,
    pub params: ParamVector,
    off: Offsets,
}

pub const GROUPS: [&str; 8] = ["embed", "gru.wx", "gru.wh", "gru.b", "head.w", "head.b", "scalar.w", "scalar.b"];

impl ModelParams {
    pub fn zeros(vocab: usize, dims: ModelDims) -> Self {
        let (e, h) = (dims.d_emb, dims.d_hidden);
        let params = ParamVector::zeros(&[
            ("embed", vec![vocab, e]),
            ("gru.wx", vec![3 * h, e]),
            ("gru.wh", vec![3 * h, h]),
            ("gru.b", vec![3 * h]),
            ("head.w", vec![vocab, h]),
            ("head.b", vec![vocab]),
            ("scalar.w", vec![h]),
            ("scalar.b", vec![1]),
        ]);
        Self::from_vector(vocab, dims, params).expect("fresh layout is valid")
    }

    pub fn from_vector(vocab: usize, dims: ModelDims, params: ParamVector) -> Result<Self> {
        let off_of = |name: &str| params.slot(name).map(|s| s.offset).ok_or_else(|| Error::Shape(format!("missing group `{name}`")));
        let off = Offsets {
            embed: off_of("embed")?,
            wx: off_of("gru.wx")?,
            wh: off_of("gru.wh")?,
            b: off_of("gru.b")?,
            head_w: off_of("head.w")?,
            head_b: off_of("head.b")?,
            scalar_w: off_of("scalar.w")?,
            scalar_b: off_of("scalar.b")?,
        };
        let fresh = Self::expected_len(vocab, dims);
        if params.len() != fresh {
            return Err(Error::Shape(format!("{} params, expected {fresh}", params.len())));
        }
        params.validate()?;
        Ok(Self { vocab, dims, params, off })
    }

    fn expected_len(vocab: usize, dims: ModelDims) -> usize {
        let (e, h) = (dims.d_emb, dims.d_hidden);
        vocab * e + 3 * h * e + 3 * h * h + 3 * h + vocab * h + vocab + h + 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    fn v(&self) -> &[f64] {
        &self.params.values
    }

    fn embed_row(&self, tok: usize) -> &[f64] {
        let e = self.dims.d_emb;
        &self.v()[self.off.embed + tok * e..self.off.embed + (tok + 1) * e]
    }

    fn wx(&self) -> &[f64] {
        let (e, h) = (self.dims.d_emb, self.dims.d_hidden);
        &self.v()[self.off.wx..self.off.wx + 3 * h * e]
    }

    fn wh(&self) -> &[f64] {
        let h = self.dims.d_hidden;
        &self.v()[self.off.wh..self.off.wh + 3 * h * h]
    }

    fn gru_b(&self) -> &[f64] {
        let h = self.dims.d_hidden;
        &self.v()[self.off.b..self.off.b + 3 * h]
    }

    fn head_w(&self) -> &[f64] {
        &self.v()[self.off.head_w..self.off.head_w + self.vocab * self.dims.d_hidden]
    }

    fn head_b(&self) -> &[f64] {
        &self.v()[self.off.head_b..self.off.head_b + self.vocab]
    }

    fn scalar_w(&self) -> &[f64] {
        &self.v()[self.off.scalar_w..self.off.scalar_w + self.dims.d_hidden]
    }

    fn scalar_b(&self) -> f64 {
        self.v()[self.off.scalar_b]
    }

    /// Replaces the values of the parameter vector, keeping its layout.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.len());
        let mut out = self.clone();
        out.params.values = values;
        out
    }

    /// One GRU step: `(h_new, r, z, n, wh_n·h)`.
    fn cell(&self, h_prev: &[f64], tok: usize) -> Step {
        let h = self.dims.d_hidden;
        let x = self.embed_row(tok);
        let mut ax = self.gru_b().to_vec();
        matvec_add(self.wx(), x, &mut ax);
        let mut ah = vec![0.0; 3 * h];
        matvec_add(self.wh(), h_prev, &mut ah);
        let mut r = vec![0.0; h];
        let mut z = vec![0.0; h];
        let mut n = vec![0.0; h];
        let mut h_new = vec![0.0; h];
        for k in 0..h {
            r[k] = sigmoid(ax[k] + ah[k]);
            z[k] = sigmoid(ax[h + k] + ah[h + k]);
            n[k] = (ax[2 * h + k] + r[k] * ah[2 * h + k]).tanh();
            h_new[k] = (1.0 - z[k]) * n[k] + z[k] * h_prev[k];
        }
        let uh_n = ah[2 * h..].to_vec();
        Step { h: h_new, r, z, n, uh_n }
    }

    pub fn logits_at(&self, hidden: &[f64]) -> Vec<f64> {
        let mut out = self.head_b().to_vec();
        matvec_add(self.head_w(), hidden, &mut out);
        out
    }

    pub fn scalar_at(&self, hidden: &[f64]) -> f64 {
        dot(self.scalar_w(), hidden) + self.scalar_b()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        match tokens.iter().find(|&&t| t >= self.vocab) {
            Some(&token) => Err(Error::TokenOutOfRange { token, vocab: self.vocab }),
            None => Ok(()),
        }
    }

    /// Runs the recurrence and keeps everything backward needs.
    pub fn run(&self, tokens: &[usize]) -> Result<Tape> {
        self.check_tokens(tokens)?;
        let h = self.dims.d_hidden;
        let mut tape = Tape { tokens: tokens.to_vec(), hidden: vec![0.0; h], r: vec![], z: vec![], n: vec![], uh_n: vec![], d_hidden: h };
        let mut prev = vec![0.0; h];
        for &tok in tokens {
            let s = self.cell(&prev, tok);
            tape.hidden.extend_from_slice(&s.h);
            tape.r.extend(s.r);
            tape.z.extend(s.z);
            tape.n.extend(s.n);
            tape.uh_n.extend(s.uh_n);
            prev = s.h;
        }
        ensure_all_finite(&tape.hidden, "gru.hidden")?;
        Ok(tape)
    }

    /// Accumulates gradients for the recurrence given `dL/dh_j` at every
    /// position (`dh` is `len × d_hidden`).
    pub fn backward(&self, tape: &Tape, mut dh: Vec<f64>, grad: &mut [f64]) {
        let (e, h) = (self.dims.d_emb, self.dims.d_hidden);
        let (wx, wh) = (self.wx(), self.wh());
        let len = tape.len();
        let mut carry = vec![0.0; h];
        let mut da = vec![0.0; 3 * h];
        let mut da_nr = vec![0.0; h];
        for j in (0..len).rev() {
            let dhj = &mut dh[j * h..(j + 1) * h];
            for k in 0..h {
                dhj[k] += carry[k];
            }
            let h_prev = tape.h_prev(j);
            let (r, z, n, uh_n) = (tape.slice(&tape.r, j), tape.slice(&tape.z, j), tape.slice(&tape.n, j), tape.slice(&tape.uh_n, j));
            for k in 0..h {
                let g = dhj[k];
                let dn = g * (1.0 - z[k]);
                let dz = g * (h_prev[k] - n[k]);
                carry[k] = g * z[k];
                let dan = dn * (1.0 - n[k] * n[k]);
                let dr = dan * uh_n[k];
                da[k] = dr * r[k] * (1.0 - r[k]);
                da[h + k] = dz * z[k] * (1.0 - z[k]);
                da[2 * h + k] = dan;
                da_nr[k] = dan * r[k];
            }
            // gate biases and input weights see the full pre-activation gradient
            for k in 0..3 * h {
                grad[self.off.b + k] += da[k];
            }
            let tok = tape.tokens[j];
            let x = self.embed_row(tok);
            outer_add(&mut grad[self.off.wx..self.off.wx + 3 * h * e], &da, x);
            let mut dx = vec![0.0; e];
            matvec_t_add(wx, &da, &mut dx);
            for (g, d) in grad[self.off.embed + tok * e..self.off.embed + (tok + 1) * e].iter_mut().zip(&dx) {
                *g += d;
            }
            // recurrent weights: r and z blocks see da, the candidate block sees da_n ⊙ r
            let gwh = &mut grad[self.off.wh..self.off.wh + 3 * h * h];
            outer_add(&mut gwh[..2 * h * h], &da[..2 * h], h_prev);
            outer_add(&mut gwh[2 * h * h..], &da_nr, h_prev);
            matvec_t_add(&wh[..2 * h * h], &da[..2 * h], &mut carry);
            matvec_t_add(&wh[2 * h * h..], &da_nr, &mut carry);
        }
    }

    /// Adds the softmax-head contribution of `dlogits` at position `j`.
    fn backward_logits(&self, tape: &Tape, j: usize, dlogits: &[f64], dh: &mut [f64], grad: &mut [f64]) {
        let h = self.dims.d_hidden;
        let hj = tape.hidden_at(j);
        outer_add(&mut grad[self.off.head_w..self.off.head_w + self.vocab * h], dlogits, hj);
        for (g, d) in grad[self.off.head_b..self.off.head_b + self.vocab].iter_mut().zip(dlogits) {
            *g += d;
        }
        matvec_t_add(self.head_w(), dlogits, &mut dh[j * h..(j + 1) * h]);
    }

    /// Adds the scalar-head contribution of `ds` at position `j`.
    fn backward_scalar(&self, tape: &Tape, j: usize, ds: f64, dh: &mut [f64], grad: &mut [f64]) {
        let h = self.dims.d_hidden;
        let hj = tape.hidden_at(j);
        for (g, x) in grad[self.off.scalar_w..self.off.scalar_w + h].iter_mut().zip(hj) {
            *g += ds * x;
        }
        grad[self.off.scalar_b] += ds;
        for (d, w) in dh[j * h..(j + 1) * h].iter_mut().zip(self.scalar_w()) {
            *d += ds * w;
        }
    }
}

struct Step {
    h: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    uh_n: Vec<f64>,
}

/// Forward cache. `hidden` holds `h_{-1} = 0` followed by one state per token.
#[derive(Clone, Debug)]
pub struct Tape {
    pub tokens: Vec<usize>,
    hidden: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    uh_n: Vec<f64>,
    d_hidden: usize,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn hidden_at(&self, j: usize) -> &[f64] {
        let h = self.d_hidden;
        &self.hidden[(j + 1) * h..(j + 2) * h]
    }

    fn h_prev(&self, j: usize) -> &[f64] {
        let h = self.d_hidden;
        &self.hidden[j * h..(j + 1) * h]
    }

    fn slice<'a>(&self, v: &'a [f64], j: usize) -> &'a [f64] {
        let h = self.d_hidden;
        &v[j * h..(j + 1) * h]
    }
}

/// Per-position hidden states and logits for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace {
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

/// Scaled-uniform init `U(-1/√fan_in, 1/√fan_in)`; the scalar head starts at zero.
pub fn init_params(spec: &TaskSpec, dims: ModelDims, seed: u64) -> ModelParams {
    let mut m = ModelParams::zeros(spec.vocab_size, dims);
    let mut r = rng(seed);
    for name in ["embed", "gru.wx", "gru.wh", "gru.b", "head.w", "head.b"] {
        let fan_in = match name {
            "embed" => 1.0,
            "gru.wx" => dims.d_emb as f64,
            _ => dims.d_hidden as f64,
        };
        let bound = 1.0 / fan_in.sqrt();
        for v in m.params.group_mut(name) {
            *v = r.gen_range(-bound..bound);
        }
    }
    m
}

pub fn forward(params: &ModelParams, tokens: &[usize]) -> Result<HiddenTrace> {
    let tape = params.run(tokens)?;
    let hidden: Vec<Vec<f64>> = (0..tape.len()).map(|j| tape.hidden_at(j).to_vec()).collect();
    let logits: Vec<Vec<f64>> = hidden.iter().map(|h| params.logits_at(h)).collect();
    for l in &logits {
        ensure_all_finite(l, "head.logits")?;
    }
    Ok(HiddenTrace { hidden, logits })
}

/// Entropy (nats) of the next-token distribution at each response position.
pub fn predictive_entropies(params: &ModelParams, prompt: &[usize], response: &[usize]) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Err(Error::Empty("response"));
    }
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(&response[..response.len() - 1]);
    let tape = params.run(&tokens)?;
    let p = prompt.len();
    Ok((0..response.len()).map(|i| softmax_entropy(&params.logits_at(tape.hidden_at(p - 1 + i)))).collect())
}

/// Per-token log-probabilities of `response` given `prompt`, plus their sum.
pub fn sequence_logprob(params: &ModelParams, prompt: &[usize], response: &[usize]) -> Result<(f64, Vec<f64>)> {
    if response.is_empty() {
        return Err(Error::Empty("response"));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(&response[..response.len() - 1]);
    let tape = params.run(&tokens)?;
    let per_token = token_logprobs(params, &tape, prompt.len(), response);
    Ok((per_token.iter().sum(), per_token))
}

fn token_logprobs(params: &ModelParams, tape: &Tape, prompt_len: usize, response: &[usize]) -> Vec<f64> {
    response
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let l = params.logits_at(tape.hidden_at(prompt_len - 1 + i));
            l[y] - logsumexp(&l)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sequence: TokenSequence,
    /// `log π(y_i | x, y_<i)` under the untempered model.
    pub logprobs: Vec<f64>,
}

/// Ancestral sampling until `eos` or `max_len` tokens. `temperature == 0` is greedy.
pub fn sample(params: &ModelParams, prompt: &[usize], max_len: usize, temperature: f64, eos: usize, seed: u64) -> Result<Sample> {
    assert!(max_len > 0);
    params.check_tokens(prompt)?;
    let mut r = rng(seed);
    let mut h = vec![0.0; params.dims.d_hidden];
    for &t in prompt {
        h = params.cell(&h, t).h;
    }
    let mut response = Vec::new();
    let mut logprobs = Vec::new();
    let mut probs = vec![0.0; params.vocab];
    loop {
        let logits = params.logits_at(&h);
        ensure_all_finite(&logits, "head.logits")?;
        let lse = logsumexp(&logits);
        let tok = if temperature <= 0.0 {
            argmax(&logits)
        } else {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            softmax_into(&scaled, &mut probs);
            categorical(&probs, r.gen())
        };
        logprobs.push(logits[tok] - lse);
        response.push(tok);
        if tok == eos || response.len() >= max_len {
            break;
        }
        h = params.cell(&h, tok).h;
    }
    Ok(Sample { sequence: TokenSequence { id: String::new(), prompt_tokens: prompt.to_vec(), response_tokens: response }, logprobs })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Mean next-token cross-entropy over response tokens of a batch.
pub struct SftLoss<'a> {
    pub template: &'a ModelParams,
    pub batch: &'a [TokenSequence],
}

impl SftLoss<'_> {
    fn compute(&self, params: &ParamVector, want_grad: bool) -> Result<GradResult> {
        let model = self.template.with_values(params.values.clone());
        let n_tokens: usize = self.batch.iter().map(|s| s.response_tokens.len()).sum();
        if n_tokens == 0 {
            return Err(Error::Empty("sft batch"));
        }
        let scale = 1.0 / n_tokens as f64;
        let mut grad = if want_grad { vec![0.0; model.len()] } else { Vec::new() };
        let mut total = 0.0;
        let mut probs = vec![0.0; model.vocab];
        for seq in self.batch {
            let p = seq.prompt_tokens.len();
            let resp = &seq.response_tokens;
            let mut tokens = seq.prompt_tokens.clone();
            tokens.extend_from_slice(&resp[..resp.len() - 1]);
            let tape = model.run(&tokens)?;
            let mut dh = if want_grad { vec![0.0; tape.len() * model.dims.d_hidden] } else { Vec::new() };
            for (i, &y) in resp.iter().enumerate() {
                let j = p - 1 + i;
                let logits = model.logits_at(tape.hidden_at(j));
                let lse = logsumexp(&logits);
                total += (lse - logits[y]) * scale;
                if want_grad {
                    softmax_into(&logits, &mut probs);
                    probs[y] -= 1.0;
                    probs.iter_mut().for_each(|g| *g *= scale);
                    model.backward_logits(&tape, j, &probs, &mut dh, &mut grad);
                }
            }
            if want_grad {
                model.backward(&tape, dh, &mut grad);
            }
        }
        numerics::ensure_finite(total, "sft.cross_entropy")?;
        Ok(GradResult { value: total, grad })
    }
}

impl Objective for SftLoss<'_> {
    fn name(&self) -> &str {
        "sft_cross_entropy"
    }

    fn eval(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.compute(params, false)?.value)
    }

    fn eval_with_grad(&self, params: &ParamVector) -> Result<GradResult> {
        self.compute(params, true)
    }
}

/// One Adam step on the SFT loss. Returns the pre-step loss.
pub fn sft_step(params: &mut ModelParams, opt: &mut Adam, batch: &[TokenSequence], lr: f64, clip: f64) -> Result<f64> {
    Ok(sft_step_traced(params, opt, batch, lr, clip)?.0)
}

/// [`sft_step`] that also returns the pre-clip gradient norm.
fn sft_step_traced(params: &mut ModelParams, opt: &mut Adam, batch: &[TokenSequence], lr: f64, clip: f64) -> Result<(f64, f64)> {
    assert!(lr >= 0.0);
    let out = SftLoss { template: params, batch }.eval_with_grad(&params.params)?;
    let mut grad = out.grad;
    let norm = numerics::clip_grad_norm(&mut grad, clip);
    opt.step(&mut params.params.values, &grad, lr);
    Ok((out.value, norm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip_norm: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { steps: 600, batch_size: 32, lr: 3e-3, grad_clip_norm: 1.0 }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr >= 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config(format!("invalid sft config {self:?}")));
        }
        Ok(())
    }
}

/// `cfg.steps` minibatch steps over `corpus`, reshuffled on every pass.
pub fn train_sft(init: &ModelParams, corpus: &[TokenSequence], cfg: &SftConfig, seed: u64) -> Result<(ModelParams, Vec<numerics::LossPoint>)> {
    cfg.validate()?;
    if corpus.len() < cfg.batch_size {
        return Err(Error::Config(format!("corpus of {} is smaller than one batch", corpus.len())));
    }
    let mut model = init.clone();
    let mut opt = Adam::new(model.len());
    let mut r = rng(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order = (0..corpus.len()).collect();
            order.shuffle(&mut r);
            cursor = 0;
        }
        let batch: Vec<TokenSequence> = order[cursor..cursor + cfg.batch_size].iter().map(|&i| corpus[i].clone()).collect();
        cursor += cfg.batch_size;
        let (loss, grad_norm) =
            sft_step_traced(&mut model, &mut opt, &batch, cfg.lr, cfg.grad_clip_norm).map_err(|e| Error::Diverged { step, reason: e.to_string() })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, reason: "non-finite loss".into() });
        }
        curve.push(numerics::LossPoint { step, loss, grad_norm });
    }
    Ok((model, curve))
}

/// Absolute forward positions at which each span's reward is read (the span's last token).
pub fn span_read_positions(prompt_len: usize, spans: &[SegmentSpan]) -> Vec<usize> {
    spans.iter().map(|s| prompt_len + s.end - 1).collect()
}

/// Scalar-head reward of every span, read at the hidden state of its last token.
pub fn reward_forward(params: &ModelParams, prompt: &[usize], response: &[usize], spans: &[SegmentSpan]) -> Result<Vec<f64>> {
    crate::segment::check_partition(spans, response.len())?;
    let tape = params.run(&[prompt, response].concat())?;
    Ok(span_read_positions(prompt.len(), spans).into_iter().map(|j| params.scalar_at(tape.hidden_at(j))).collect())
}

/// Scalar rewards at the given positions plus the tape used to get them.
pub(crate) fn scalar_reads(params: &ModelParams, tokens: &[usize], positions: &[usize]) -> Result<(Tape, Vec<f64>)> {
    let tape = params.run(tokens)?;
    let vals = positions.iter().map(|&j| params.scalar_at(tape.hidden_at(j))).collect();
    Ok((tape, vals))
}

/// Backpropagates `dL/ds_j` for scalar reads at `positions` into `grad`.
pub(crate) fn scalar_backward(params: &ModelParams, tape: &Tape, positions: &[usize], ds: &[f64], grad: &mut [f64]) {
    let mut dh = vec![0.0; tape.len() * params.dims.d_hidden];
    for (&j, &d) in positions.iter().zip(ds) {
        params.backward_scalar(tape, j, d, &mut dh, grad);
    }
    params.backward(tape, dh, grad);
}

/// Backpropagates `dL/dlogits` at the given positions into `grad`.
pub(crate) fn logits_backward(params: &ModelParams, tape: &Tape, dlogits: &[(usize, Vec<f64>)], grad: &mut [f64]) {
    let mut dh = vec![0.0; tape.len() * params.dims.d_hidden];
    for (j, d) in dlogits {
        params.backward_logits(tape, *j, d, &mut dh, grad);
    }
    params.backward(tape, dh, grad);
}

/// On-disk checkpoint: flat parameters, layout, and the task it was trained for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub vocab: usize,
    pub dims: ModelDims,
    pub task_hash: String,
    #[serde(default)]
    pub metadata: std::collections::BTreeMap<String, String>,
    pub params: ParamVector,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(model: &ModelParams, task_hash: &str) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            vocab: model.vocab,
            dims: model.dims,
            task_hash: task_hash.to_string(),
            metadata: Default::default(),
            params: model.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.format_version)));
        }
        Ok(ck)
    }

    pub fn model(&self, expected_task_hash: &str) -> Result<ModelParams> {
        if self.task_hash != expected_task_hash {
            return Err(Error::Checkpoint(format!("trained for task {}, not {expected_task_hash}", self.task_hash)));
        }
        ModelParams::from_vector(self.vocab, self.dims, self.params.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use crate::segment::SegmentSpan;
    use crate::task::{gen_task_spec, TaskParams};

    fn spec() -> TaskSpec {
        gen_task_spec(1, &TaskParams::default()).unwrap()
    }

    fn tiny(vocab: usize, seed: u64) -> ModelParams {
        let dims = ModelDims { d_emb: 3, d_hidden: 4 };
        let mut m = ModelParams::zeros(vocab, dims);
        let mut r = rng(seed);
        m.params.values.iter_mut().for_each(|v| *v = r.gen_range(-0.8..0.8));
        m
    }

    #[test]
    fn init_is_seeded_with_zero_scalar_head() {
        let s = spec();
        let a = init_params(&s, ModelDims::default(), 4);
        assert_eq!(a, init_params(&s, ModelDims::default(), 4));
        assert_ne!(a.params.values, init_params(&s, ModelDims::default(), 5).params.values);
        assert!(a.params.group("scalar.w").iter().all(|&w| w == 0.0));
        assert_eq!(a.params.group("scalar.b"), &[0.0]);
        let spans = crate::segment::segment_by_entropy(&[1.0, 0.0, 3.0], 0.5).unwrap();
        let rw = reward_forward(&a, &[1, 2], &[3, 4, 5], &spans).unwrap();
        assert!(rw.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn forward_is_causal() {
        let m = tiny(7, 1);
        let base = vec![1, 2, 3, 4, 5, 6];
        let a = forward(&m, &base).unwrap();
        for j in 0..base.len() {
            let mut pert = base.clone();
            pert[j] = (pert[j] + 1) % 7;
            let b = forward(&m, &pert).unwrap();
            for i in 0..base.len() {
                if i < j {
                    assert_eq!(a.logits[i], b.logits[i]);
                } else if i == j {
                    assert_ne!(a.logits[i], b.logits[i]);
                }
            }
        }
        assert_eq!(forward(&m, &[3]).unwrap().logits.len(), 1);
        assert!(matches!(forward(&m, &[9]), Err(Error::TokenOutOfRange { .. })));
        assert!(forward(&m, &[]).is_err());
    }

    #[test]
    fn logits_finite_on_random_inputs() {
        let s = spec();
        let m = init_params(&s, ModelDims::default(), 0);
        let mut r = rng(9);
        for _ in 0..100 {
            let len = r.gen_range(1..40);
            let toks: Vec<usize> = (0..len).map(|_| r.gen_range(0..s.vocab_size)).collect();
            let tr = forward(&m, &toks).unwrap();
            assert!(tr.logits.iter().flatten().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn zero_head_gives_max_entropy() {
        let s = spec();
        let mut m = init_params(&s, ModelDims::default(), 0);
        m.params.group_mut("head.w").iter_mut().for_each(|v| *v = 0.0);
        m.params.group_mut("head.b").iter_mut().for_each(|v| *v = 0.0);
        let ents = predictive_entropies(&m, &[1, 2], &[3, 4, 5, 6]).unwrap();
        assert_eq!(ents.len(), 4);
        for e in ents {
            assert!((e - (s.vocab_size as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn logprob_identity_and_recompute() {
        let m = tiny(6, 3);
        let (total, per) = sequence_logprob(&m, &[0, 1], &[2, 3, 4, 5]).unwrap();
        assert!((total - per.iter().sum::<f64>()).abs() < 1e-12);
        let tr = forward(&m, &[0, 1, 2, 3, 4]).unwrap();
        for (i, &y) in [2, 3, 4, 5].iter().enumerate() {
            let p = numerics::softmax(&tr.logits[1 + i]);
            assert!((p[y].ln() - per[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_logprobs_match_sequence_logprob() {
        let m = tiny(6, 4);
        let a = sample(&m, &[0, 1], 12, 1.0, 5, 77).unwrap();
        assert_eq!(a, sample(&m, &[0, 1], 12, 1.0, 5, 77).unwrap());
        assert!(a.sequence.response_tokens.len() <= 12);
        let (_, per) = sequence_logprob(&m, &[0, 1], &a.sequence.response_tokens).unwrap();
        for (x, y) in per.iter().zip(&a.logprobs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sft_grad_matches_fd() {
        let m = tiny(6, 5);
        let batch = vec![
            TokenSequence { id: "a".into(), prompt_tokens: vec![0, 1], response_tokens: vec![2, 3, 5] },
            TokenSequence { id: "b".into(), prompt_tokens: vec![4], response_tokens: vec![1, 5] },
        ];
        let loss = SftLoss { template: &m, batch: &batch };
        let a = numerics::eval_with_grad(&loss, &m.params).unwrap();
        let b = finite_diff_grad(&loss, &m.params, 1e-5).unwrap();
        let err = max_relative_error(&a.grad, &b, 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sft_zero_lr_is_identity() {
        let mut m = tiny(6, 6);
        let before = m.clone();
        let batch = vec![TokenSequence { id: "a".into(), prompt_tokens: vec![0], response_tokens: vec![2, 3] }];
        let mut opt = Adam::new(m.len());
        sft_step(&mut m, &mut opt, &batch, 0.0, 1.0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn sft_loss_decreases_on_repeated_batch() {
        let s = spec();
        let mut m = init_params(&s, ModelDims::default(), 1);
        let batch = crate::task::make_sft_corpus(&s, 16, 0.5, 2);
        let mut opt = Adam::new(m.len());
        let losses: Vec<f64> = (0..50).map(|_| sft_step(&mut m, &mut opt, &batch, 3e-3, 1.0).unwrap()).collect();
        let ups = losses.windows(2).filter(|w| w[1] >= w[0]).count();
        assert!(ups <= 5, "{ups} non-monotone steps: {losses:?}");
        assert!(losses[49] < losses[0]);
    }

    #[test]
    fn whole_span_reward_is_final_state_reward() {
        let m = tiny(8, 7);
        let prompt = [0, 1];
        let resp = [2, 3, 4, 5, 6];
        let whole = [SegmentSpan::new(0, 5, 0, 1)];
        let ents = [3.0, 0.1, 2.0, 0.0, 2.5];
        let segs = crate::segment::segment_by_entropy(&ents, 1.0).unwrap();
        let a = reward_forward(&m, &prompt, &resp, &whole).unwrap();
        let b = reward_forward(&m, &prompt, &resp, &segs).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0], *b.last().unwrap());
        let per_tok = crate::segment::per_token_spans(5);
        assert_eq!(reward_forward(&m, &prompt, &resp, &per_tok).unwrap().len(), 5);
        let bad = [SegmentSpan::new(0, 2, 0, 2), SegmentSpan::new(3, 5, 1, 2)];
        assert!(reward_forward(&m, &prompt, &resp, &bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny(6, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        Checkpoint::new(&m, "abc").save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.model("abc").unwrap(), m);
        assert!(ck.model("other").is_err());
    }
}
