//! Dense vector helpers, stable softmax/log-sum-exp, and the value-and-gradient
//! machinery shared by every trainable loss in the crate.
//!
//! Gradients are hand-derived over a closed set of primitives (affine maps,
//! elementwise `tanh`/sigmoid, softmax, log, mean, gather). Every loss
//! implements [`Objective`], which is also what [`finite_diff_grad`] probes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named parameter group inside a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage with a named layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<Slot>,
}

impl ParamVector {
    /// Zero-filled vector laid out as the given `(name, shape)` groups in order.
    pub fn zeros(groups: &[(&str, Vec<usize>)]) -> Self {
        let mut layout = Vec::with_capacity(groups.len());
        let mut offset = 0;
        for (name, shape) in groups {
            let slot = Slot { name: (*name).to_string(), offset, shape: shape.clone() };
            offset += slot.len();
            layout.push(slot);
        }
        Self { values: vec![0.0; offset], layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn group(&self, name: &str) -> &[f64] {
        let slot = self.slot(name).unwrap_or_else(|| panic!("no parameter group `{name}`"));
        &self.values[slot.range()]
    }

    pub fn group_mut(&mut self, name: &str) -> &mut [f64] {
        let range = self.slot(name).unwrap_or_else(|| panic!("no parameter group `{name}`")).range();
        &mut self.values[range]
    }

    /// Checks that slots are disjoint, ordered, cover the vector, and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for slot in &self.layout {
            if slot.offset != expected {
                return Err(Error::Shape(format!("slot `{}` at offset {} (expected {expected})", slot.name, slot.offset)));
            }
            expected += slot.len();
        }
        if expected != self.values.len() {
            return Err(Error::Shape(format!("layout covers {expected} of {} values", self.values.len())));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("params[{i}]")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// A differentiable scalar expression of a parameter vector. Implementors own
/// whatever input batch they are evaluated on.
pub trait Objective {
    fn name(&self) -> &str;

    fn eval(&self, params: &ParamVector) -> Result<f64>;

    fn eval_with_grad(&self, params: &ParamVector) -> Result<GradResult>;
}

pub fn eval_with_grad(expr: &dyn Objective, params: &ParamVector) -> Result<GradResult> {
    let out = expr.eval_with_grad(params)?;
    debug_assert_eq!(out.grad.len(), params.len());
    ensure_finite(out.value, expr.name())?;
    if out.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("{}.grad", expr.name())));
    }
    Ok(out)
}

/// Central-difference gradient, one coordinate at a time.
pub fn finite_diff_grad(expr: &dyn Objective, params: &ParamVector, eps: f64) -> Result<Vec<f64>> {
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let x = params.values[i];
        probe.values[i] = x + eps;
        let up = expr.eval(&probe)?;
        probe.values[i] = x - eps;
        let down = expr.eval(&probe)?;
        probe.values[i] = x;
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over coordinates.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

pub fn ensure_finite(v: f64, node: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(node.to_string()))
    }
}

pub fn ensure_all_finite(v: &[f64], node: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(node.to_string()))
    }
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn shannon_entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidDistribution("empty".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidDistribution(format!("entry {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!("sums to {total}")));
    }
    Ok(probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum())
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// Entropy of `softmax(logits)`, computed from log-probabilities.
pub fn softmax_entropy(logits: &[f64]) -> f64 {
    let lse = logsumexp(logits);
    logits
        .iter()
        .map(|&l| {
            let lp = l - lse;
            -lp.exp() * lp
        })
        .sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log σ(u) = -softplus(-u)`.
pub fn log_sigmoid(u: f64) -> f64 {
    -softplus(-u)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += W x` for row-major `W` of shape `(out.len(), x.len())`.
pub fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `out += Wᵀ y` for row-major `W` of shape `(y.len(), out.len())`.
pub fn matvec_t_add(w: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    debug_assert_eq!(w.len(), y.len() * cols);
    for (&yi, row) in y.iter().zip(w.chunks_exact(cols)) {
        if yi != 0.0 {
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += yi * wij;
            }
        }
    }
}

/// `G += y xᵀ` for row-major `G` of shape `(y.len(), x.len())`.
pub fn outer_add(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    for (&yi, row) in y.iter().zip(g.chunks_exact_mut(cols)) {
        if yi != 0.0 {
            for (gij, &xj) in row.iter_mut().zip(x) {
                *gij += yi * xj;
            }
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grad` in place so its norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = l2_norm(grad);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two samples.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// One optimizer step of a training curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Loss curve as CSV with columns `step, loss, grad_norm`.
pub fn write_loss_csv(curve: &[LossPoint], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Adam with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    /// Moment constants β1 = 0.9, β2 = 0.95.
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// `f(x) = x₀²`, the simplest gradient sanity case.
pub struct Square;

impl Objective for Square {
    fn name(&self) -> &str {
        "square"
    }

    fn eval(&self, params: &ParamVector) -> Result<f64> {
        Ok(params.values[0] * params.values[0])
    }

    fn eval_with_grad(&self, params: &ParamVector) -> Result<GradResult> {
        let x = params.values[0];
        let mut grad = vec![0.0; params.len()];
        grad[0] = 2.0 * x;
        Ok(GradResult { value: x * x, grad })
    }
}

/// `f(x) = k · x₀`.
pub struct Linear(pub f64);

impl Objective for Linear {
    fn name(&self) -> &str {
        "linear"
    }

    fn eval(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.0 * params.values[0])
    }

    fn eval_with_grad(&self, params: &ParamVector) -> Result<GradResult> {
        let mut grad = vec![0.0; params.len()];
        grad[0] = self.0;
        Ok(GradResult { value: self.eval(params)?, grad })
    }
}

/// Entropy of `softmax(params)`.
pub struct SoftmaxEntropy;

impl Objective for SoftmaxEntropy {
    fn name(&self) -> &str {
        "softmax_entropy"
    }

    fn eval(&self, params: &ParamVector) -> Result<f64> {
        Ok(softmax_entropy(&params.values))
    }

    fn eval_with_grad(&self, params: &ParamVector) -> Result<GradResult> {
        let p = softmax(&params.values);
        let lse = logsumexp(&params.values);
        let h = softmax_entropy(&params.values);
        // dH/dl_j = -p_j (log p_j + H)
        let grad = p.iter().zip(&params.values).map(|(&pj, &lj)| -pj * ((lj - lse) + h)).collect();
        Ok(GradResult { value: h, grad })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> ParamVector {
        let mut p = ParamVector::zeros(&[("x", vec![1])]);
        p.values[0] = x;
        p
    }

    #[test]
    fn square_value_and_grad() {
        let out = eval_with_grad(&Square, &scalar(3.0)).unwrap();
        assert_eq!(out.value, 9.0);
        assert_eq!(out.grad, vec![6.0]);
        let fd = finite_diff_grad(&Square, &scalar(3.0), 1e-5).unwrap();
        assert!((fd[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn linear_fd_is_exact() {
        for x in [-4.0, 0.0, 2.5, 1e3] {
            let fd = finite_diff_grad(&Linear(5.0), &scalar(x), 1e-5).unwrap();
            assert!((fd[0] - 5.0).abs() < 1e-6, "{}", fd[0]);
        }
    }

    #[test]
    fn uniform_logits_entropy_is_max_with_zero_grad() {
        let p = ParamVector::zeros(&[("logits", vec![4])]);
        let out = eval_with_grad(&SoftmaxEntropy, &p).unwrap();
        assert!((out.value - 4f64.ln()).abs() < 1e-12);
        assert!(out.grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn softmax_entropy_grad_matches_fd() {
        let mut p = ParamVector::zeros(&[("logits", vec![6])]);
        p.values.copy_from_slice(&[0.3, -1.2, 2.0, 0.0, 0.7, -0.4]);
        let a = eval_with_grad(&SoftmaxEntropy, &p).unwrap().grad;
        let b = finite_diff_grad(&SoftmaxEntropy, &p, 1e-5).unwrap();
        assert!(max_relative_error(&a, &b, 1e-8) < 1e-6);
    }

    #[test]
    fn entropy_examples() {
        assert!((shannon_entropy(&[0.125; 8]).unwrap() - 8f64.ln()).abs() < 1e-12);
        assert_eq!(shannon_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((shannon_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_bad_distributions() {
        assert!(shannon_entropy(&[0.5, 0.4]).is_err());
        assert!(shannon_entropy(&[1.5, -0.5]).is_err());
        assert!(shannon_entropy(&[]).is_err());
        assert!(shannon_entropy(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn stable_primitives() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((log_sigmoid(0.0) + 2f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert!((sigmoid(-1000.0)).abs() < 1e-300);
    }

    #[test]
    fn layout_validation() {
        let mut p = ParamVector::zeros(&[("a", vec![2, 3]), ("b", vec![4])]);
        assert_eq!(p.len(), 10);
        assert_eq!(p.slot("b").unwrap().offset, 6);
        p.validate().unwrap();
        p.values[7] = f64::INFINITY;
        assert!(matches!(p.validate(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut x = vec![1.0, -2.0];
        let mut opt = Adam::new(2);
        opt.step(&mut x, &[0.5, 0.5], 0.0);
        assert_eq!(x, vec![1.0, -2.0]);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut g = vec![3.0, 4.0];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((l2_norm(&g) - 1.0).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn entropy_bounded_by_log_v(raw in proptest::collection::vec(0.0f64..10.0, 1..32)) {
            let total: f64 = raw.iter().sum();
            proptest::prop_assume!(total > 1e-6);
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let h = shannon_entropy(&p).unwrap();
            proptest::prop_assert!(h >= 0.0);
            proptest::prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
        }
    }
}
