//! Location-aware reward normalization. Segment rewards are grouped by their
//! normalized location `p`, and `Mean(p)`, `Std(p)` are fitted as linear
//! functions of `log p`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{self, ModelParams};
use crate::numerics;
use crate::segment::{self, SegmentSpan};
use crate::task::TokenSequence;

pub const DEFAULT_SIGMA_FLOOR: f64 = 0.1;
pub const HUBER_DELTA: f64 = 1.35;
pub const HUBER_TOL: f64 = 1e-10;
pub const HUBER_MAX_ITER: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormPoint {
    pub p: f64,
    pub mu: f64,
    /// Sample std; absent for singleton groups.
    pub sigma: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormDataset {
    pub points: Vec<NormPoint>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStrategy {
    #[default]
    Regression,
    None,
    Global,
    Last,
}

impl NormStrategy {
    pub const ALL: [NormStrategy; 4] = [NormStrategy::None, NormStrategy::Global, NormStrategy::Last, NormStrategy::Regression];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Regression => "regression",
            Self::None => "none",
            Self::Global => "global",
            Self::Last => "last",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    Ols,
    #[default]
    Huber,
}

/// How much each location group counts in the regression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointWeight {
    /// One vote per group.
    Uniform,
    /// Proportional to the number of rewards in the group.
    #[default]
    Count,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizerFn {
    pub strategy: NormStrategy,
    pub w_mu: f64,
    pub b_mu: f64,
    pub w_sigma: f64,
    pub b_sigma: f64,
    pub mu_g: f64,
    pub sigma_g: f64,
    pub sigma_floor: f64,
}

impl NormalizerFn {
    pub fn identity() -> Self {
        Self {
            strategy: NormStrategy::None,
            w_mu: 0.0,
            b_mu: 0.0,
            w_sigma: 0.0,
            b_sigma: 1.0,
            mu_g: 0.0,
            sigma_g: 1.0,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }

    pub fn mean_at(&self, p: f64) -> f64 {
        match self.strategy {
            NormStrategy::Regression => self.w_mu * p.ln() + self.b_mu,
            NormStrategy::None => 0.0,
            NormStrategy::Global | NormStrategy::Last => self.mu_g,
        }
    }

    pub fn std_at(&self, p: f64) -> f64 {
        match self.strategy {
            NormStrategy::Regression => (self.w_sigma * p.ln() + self.b_sigma).max(self.sigma_floor),
            NormStrategy::None => 1.0,
            NormStrategy::Global | NormStrategy::Last => self.sigma_g,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.w_mu, self.b_mu, self.w_sigma, self.b_sigma, self.mu_g, self.sigma_g, self.sigma_floor];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("normalizer coefficients".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be positive".into()));
        }
        if matches!(self.strategy, NormStrategy::Global | NormStrategy::Last) && !(self.sigma_g > 0.0) {
            return Err(Error::Config("sigma_g must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("normalizer serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let f: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        f.validate()?;
        Ok(f)
    }
}

/// Applies the normalizer to segment rewards with locations `ps`.
pub fn normalize(rewards: &[f64], ps: &[f64], f: &NormalizerFn) -> Result<Vec<f64>> {
    if rewards.len() != ps.len() {
        return Err(Error::Shape(format!("{} rewards for {} locations", rewards.len(), ps.len())));
    }
    if f.strategy == NormStrategy::None {
        return Ok(rewards.to_vec());
    }
    Ok(rewards.iter().zip(ps).map(|(&r, &p)| (r - f.mean_at(p)) / f.std_at(p)).collect())
}

pub fn normalize_spans(rewards: &[f64], spans: &[SegmentSpan], f: &NormalizerFn) -> Result<Vec<f64>> {
    let ps: Vec<f64> = spans.iter().map(|s| s.p).collect();
    normalize(rewards, &ps, f)
}

/// Rounds `p` to `decimals` places, never below the smallest positive grid value.
pub fn round_p(p: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    ((p * scale).round() / scale).max(1.0 / scale)
}

/// `(p, reward)` for every span of every calibration response.
pub fn calibration_samples(reward: &ModelParams, calib: &[TokenSequence], spans: &[Vec<SegmentSpan>]) -> Result<Vec<(f64, f64)>> {
    if calib.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    if calib.len() != spans.len() {
        return Err(Error::Shape(format!("{} sequences, {} segmentations", calib.len(), spans.len())));
    }
    let mut out = Vec::new();
    for (seq, sp) in calib.iter().zip(spans) {
        let rs = lm::reward_forward(reward, &seq.prompt_tokens, &seq.response_tokens, sp)?;
        out.extend(sp.iter().zip(rs).map(|(s, r)| (s.p, r)));
    }
    Ok(out)
}

/// Groups samples by rounded `p` into per-location mean and sample std.
pub fn group_by_location(samples: &[(f64, f64)], p_round: u32) -> NormDataset {
    let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for &(p, r) in samples {
        groups.entry(round_p(p, p_round).to_bits()).or_default().push(r);
    }
    let mut points: Vec<NormPoint> = groups
        .into_iter()
        .map(|(bits, rs)| NormPoint {
            p: f64::from_bits(bits),
            mu: numerics::mean(&rs),
            sigma: (rs.len() >= 2).then(|| numerics::sample_std(&rs)),
            count: rs.len(),
        })
        .collect();
    points.sort_by(|a, b| a.p.total_cmp(&b.p));
    NormDataset { points }
}

/// Entropy-segments each response with the SFT model, scores the spans, and groups by location.
pub fn collect_calibration(reward: &ModelParams, calib: &[TokenSequence], sft: &ModelParams, c_ent: f64, p_round: u32) -> Result<NormDataset> {
    let spans = calib
        .iter()
        .map(|s| segment::segment_by_entropy(&lm::predictive_entropies(sft, &s.prompt_tokens, &s.response_tokens)?, c_ent))
        .collect::<Result<Vec<_>>>()?;
    Ok(group_by_location(&calibration_samples(reward, calib, &spans)?, p_round))
}

/// Weighted least squares for `y = w x + b`.
fn wls(x: &[f64], y: &[f64], wt: &[f64]) -> Result<(f64, f64)> {
    let sw: f64 = wt.iter().sum();
    let xm = x.iter().zip(wt).map(|(a, w)| a * w).sum::<f64>() / sw;
    let ym = y.iter().zip(wt).map(|(a, w)| a * w).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..x.len() {
        sxx += wt[i] * (x[i] - xm).powi(2);
        sxy += wt[i] * (x[i] - xm) * (y[i] - ym);
    }
    let spread = x.iter().fold(0.0f64, |m, v| m.max((v - xm).abs()));
    if !(sxx > 1e-24 * sw * (1.0 + spread * spread)) || spread == 0.0 {
        return Err(Error::Degenerate("all locations are equal".into()));
    }
    let w = sxy / sxx;
    Ok((w, ym - w * xm))
}

pub fn fit_line_ols(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    fit_line_ols_weighted(x, y, &vec![1.0; x.len()])
}

pub fn fit_line_ols_weighted(x: &[f64], y: &[f64], prior: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() != prior.len() || x.len() < 2 {
        return Err(Error::Degenerate(format!("need ≥ 2 points, got {}", x.len())));
    }
    if prior.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::Config("fit weights must be positive".into()));
    }
    wls(x, y, prior)
}

/// Smallest `v` whose cumulative weight reaches half the total.
fn weighted_median(v: &[f64], wt: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let half = 0.5 * wt.iter().sum::<f64>();
    let mut acc = 0.0;
    for &i in &idx {
        acc += wt[i];
        if acc >= half {
            return v[i];
        }
    }
    v[idx[idx.len() - 1]]
}

pub fn fit_line_huber(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    fit_line_huber_weighted(x, y, &vec![1.0; x.len()])
}

/// Huber regression by IRLS. The residual scale is re-estimated each pass as
/// `MAD / 0.6745`; `prior` multiplies the Huber weights.
pub fn fit_line_huber_weighted(x: &[f64], y: &[f64], prior: &[f64]) -> Result<(f64, f64)> {
    let (mut w, mut b) = fit_line_ols_weighted(x, y, prior)?;
    let y_scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for _ in 0..HUBER_MAX_ITER {
        let res: Vec<f64> = x.iter().zip(y).map(|(xi, yi)| yi - (w * xi + b)).collect();
        let abs: Vec<f64> = res.iter().map(|r| r.abs()).collect();
        let scale = weighted_median(&abs, prior) / 0.6745;
        if scale <= 1e-14 * y_scale {
            break;
        }
        let wt: Vec<f64> = res
            .iter()
            .zip(prior)
            .map(|(r, pw)| {
                let u = (r / scale).abs();
                pw * if u <= HUBER_DELTA { 1.0 } else { HUBER_DELTA / u }
            })
            .collect();
        let (w2, b2) = wls(x, y, &wt)?;
        let moved = (w2 - w).abs().max((b2 - b).abs());
        w = w2;
        b = b2;
        if moved < HUBER_TOL {
            break;
        }
    }
    Ok((w, b))
}

fn fit_line(x: &[f64], y: &[f64], prior: &[f64], method: FitMethod) -> Result<(f64, f64)> {
    match method {
        FitMethod::Ols => fit_line_ols_weighted(x, y, prior),
        FitMethod::Huber => fit_line_huber_weighted(x, y, prior),
    }
}

/// Fits `Mean(p) = w_mu log p + b_mu` on all groups and `Std(p)` on groups with a sample std.
pub fn fit_normalizer(data: &NormDataset, method: FitMethod, weight: PointWeight) -> Result<NormalizerFn> {
    let x: Vec<f64> = data.points.iter().map(|q| q.p.ln()).collect();
    let y: Vec<f64> = data.points.iter().map(|q| q.mu).collect();
    let cw = |q: &NormPoint| match weight {
        PointWeight::Uniform => 1.0,
        PointWeight::Count => q.count as f64,
    };
    let wy: Vec<f64> = data.points.iter().map(cw).collect();
    let (w_mu, b_mu) = fit_line(&x, &y, &wy, method)?;
    let with_sigma: Vec<&NormPoint> = data.points.iter().filter(|q| q.sigma.is_some()).collect();
    let xs: Vec<f64> = with_sigma.iter().map(|q| q.p.ln()).collect();
    let ys: Vec<f64> = with_sigma.iter().map(|q| q.sigma.unwrap_or(0.0)).collect();
    let ws: Vec<f64> = with_sigma.iter().map(|q| cw(q)).collect();
    let (w_sigma, b_sigma) = fit_line(&xs, &ys, &ws, method)?;
    Ok(NormalizerFn { strategy: NormStrategy::Regression, w_mu, b_mu, w_sigma, b_sigma, ..NormalizerFn::identity() })
}

/// Regression fit, degrading to an intercept-only fit when every span sits at
/// the same location (whole-response spans all have `p = 1`).
pub fn fit_normalizer_or_intercept(data: &NormDataset, method: FitMethod, weight: PointWeight) -> Result<NormalizerFn> {
    match fit_normalizer(data, method, weight) {
        Err(Error::Degenerate(_)) => {
            let (mu, sigma) = pooled(data.points.iter())?;
            Ok(NormalizerFn { strategy: NormStrategy::Regression, w_mu: 0.0, b_mu: mu, w_sigma: 0.0, b_sigma: sigma, ..NormalizerFn::identity() })
        }
        other => other,
    }
}

/// Pooled mean and sample std over the union of groups.
fn pooled<'a>(points: impl Iterator<Item = &'a NormPoint>) -> Result<(f64, f64)> {
    let (mut n, mut s1, mut s2) = (0usize, 0.0, 0.0);
    for q in points {
        let c = q.count as f64;
        n += q.count;
        s1 += c * q.mu;
        s2 += q.sigma.map_or(0.0, |s| (c - 1.0) * s * s) + c * q.mu * q.mu;
    }
    if n < 2 {
        return Err(Error::Degenerate(format!("pooled statistics need ≥ 2 rewards, got {n}")));
    }
    let nf = n as f64;
    let mean = s1 / nf;
    let var = ((s2 - nf * mean * mean) / (nf - 1.0)).max(0.0);
    Ok((mean, var.sqrt()))
}

pub fn fit_constant(data: &NormDataset, last_only: bool) -> Result<NormalizerFn> {
    let (mu_g, sigma) = if last_only { pooled(data.points.iter().filter(|q| q.p == 1.0))? } else { pooled(data.points.iter())? };
    let strategy = if last_only { NormStrategy::Last } else { NormStrategy::Global };
    Ok(NormalizerFn { strategy, mu_g, sigma_g: sigma.max(DEFAULT_SIGMA_FLOOR), ..NormalizerFn::identity() })
}

/// Builds the normalizer for a strategy from calibration statistics.
pub fn fit_strategy(data: &NormDataset, strategy: NormStrategy, method: FitMethod, weight: PointWeight) -> Result<NormalizerFn> {
    match strategy {
        NormStrategy::Regression => fit_normalizer_or_intercept(data, method, weight),
        NormStrategy::None => Ok(NormalizerFn::identity()),
        NormStrategy::Global => fit_constant(data, false),
        NormStrategy::Last => fit_constant(data, true),
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    p: f64,
    mu: f64,
    sigma: Option<f64>,
    count: usize,
}

impl NormDataset {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for q in &self.points {
            w.serialize(CsvRow { p: q.p, mu: q.mu, sigma: q.sigma, count: q.count })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut points = Vec::new();
        for row in r.deserialize::<CsvRow>() {
            let row = row?;
            points.push(NormPoint { p: row.p, mu: row.mu, sigma: row.sigma, count: row.count });
        }
        Ok(Self { points })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn exact(w: f64, b: f64, ws: f64, bs: f64) -> NormDataset {
        let points = (1..=10)
            .map(|k| {
                let p = k as f64 / 10.0;
                NormPoint { p, mu: w * p.ln() + b, sigma: Some(ws * p.ln() + bs), count: 5 }
            })
            .collect();
        NormDataset { points }
    }

    #[test]
    fn exact_linear_recovery() {
        let d = exact(2.0, 1.0, -0.3, 1.2);
        for m in [FitMethod::Ols, FitMethod::Huber] {
            let f = fit_normalizer(&d, m, PointWeight::Uniform).unwrap();
            assert!((f.w_mu - 2.0).abs() < 1e-9 && (f.b_mu - 1.0).abs() < 1e-9);
            assert!((f.w_sigma + 0.3).abs() < 1e-9 && (f.b_sigma - 1.2).abs() < 1e-9);
            assert_eq!(f.mean_at(1.0), f.b_mu);
        }
    }

    #[test]
    fn degenerate_design() {
        let d = NormDataset { points: vec![NormPoint { p: 1.0, mu: 0.3, sigma: Some(1.0), count: 4 }] };
        assert!(matches!(fit_normalizer(&d, FitMethod::Ols, PointWeight::Uniform), Err(Error::Degenerate(_))));
        let f = fit_normalizer_or_intercept(&d, FitMethod::Huber, PointWeight::Uniform).unwrap();
        assert_eq!((f.w_mu, f.b_mu), (0.0, 0.3));
        assert!((f.b_sigma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let f = NormalizerFn { strategy: NormStrategy::Regression, w_mu: 0.5, b_mu: 1.0, w_sigma: 0.1, b_sigma: 2.0, ..NormalizerFn::identity() };
        let p = 0.4;
        let out = normalize(&[f.mean_at(p), f.mean_at(p) + f.std_at(p)], &[p, p], &f).unwrap();
        assert!(out[0].abs() < 1e-15);
        assert!((out[1] - 1.0).abs() < 1e-12);
        let id = NormalizerFn::identity();
        assert_eq!(normalize(&[3.0, -2.5], &[0.5, 1.0], &id).unwrap(), vec![3.0, -2.5]);
    }

    #[test]
    fn floor_prevents_blowup() {
        let f = NormalizerFn { strategy: NormStrategy::Regression, w_sigma: 5.0, b_sigma: 0.0, ..NormalizerFn::identity() };
        assert_eq!(f.std_at(0.1), DEFAULT_SIGMA_FLOOR);
        assert!(normalize(&[1.0], &[0.1], &f).unwrap()[0].is_finite());
    }

    #[test]
    fn grouping_matches_brute_force() {
        let mut r = crate::rng::rng(9);
        let samples: Vec<(f64, f64)> = (0..500)
            .map(|_| {
                let t = r.gen_range(1..=7usize);
                let k = r.gen_range(1..=t);
                (k as f64 / t as f64, r.gen_range(-2.0..2.0))
            })
            .collect();
        let d = group_by_location(&samples, 3);
        for q in &d.points {
            let rs: Vec<f64> = samples.iter().filter(|(p, _)| (p - q.p).abs() < 5e-4).map(|s| s.1).collect();
            assert_eq!(rs.len(), q.count);
            let m = rs.iter().sum::<f64>() / rs.len() as f64;
            assert!((m - q.mu).abs() < 1e-12);
            if rs.len() >= 2 {
                let v = rs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (rs.len() - 1) as f64;
                assert!((v.sqrt() - q.sigma.unwrap()).abs() < 1e-12);
            } else {
                assert!(q.sigma.is_none());
            }
        }
        assert!(d.points.windows(2).all(|w| w[0].p < w[1].p));
        assert_eq!(d.points.last().unwrap().p, 1.0);
    }

    #[test]
    fn pooled_stats_match_direct() {
        let samples = [(0.5, 1.0), (0.5, 3.0), (1.0, -1.0), (1.0, 2.0), (1.0, 0.5), (0.25, 7.0)];
        let d = group_by_location(&samples, 3);
        let g = fit_constant(&d, false).unwrap();
        let all: Vec<f64> = samples.iter().map(|s| s.1).collect();
        assert!((g.mu_g - numerics::mean(&all)).abs() < 1e-12);
        assert!((g.sigma_g - numerics::sample_std(&all)).abs() < 1e-12);
        let l = fit_constant(&d, true).unwrap();
        assert!((l.mu_g - 0.5).abs() < 1e-12);
        assert!((l.sigma_g - numerics::sample_std(&[-1.0, 2.0, 0.5])).abs() < 1e-12);
    }

    #[test]
    fn count_weights_match_duplicated_points() {
        let points: Vec<NormPoint> = [(0.2, 1.5, 3), (0.5, -0.4, 1), (0.75, 2.0, 7), (1.0, 0.1, 2)]
            .iter()
            .map(|&(p, mu, count)| NormPoint { p, mu, sigma: Some(1.0 + mu.abs()), count })
            .collect();
        let dup = NormDataset { points: points.iter().flat_map(|q| std::iter::repeat(NormPoint { count: 1, ..q.clone() }).take(q.count)).collect() };
        let w = fit_normalizer(&NormDataset { points }, FitMethod::Ols, PointWeight::Count).unwrap();
        let u = fit_normalizer(&dup, FitMethod::Ols, PointWeight::Uniform).unwrap();
        for (a, b) in [(w.w_mu, u.w_mu), (w.b_mu, u.b_mu), (w.w_sigma, u.w_sigma), (w.b_sigma, u.b_sigma)] {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn huber_resists_outlier() {
        let mut d = exact(1.0, 0.0, 0.0, 1.0);
        d.points[9].mu += 50.0;
        let ols = fit_normalizer(&d, FitMethod::Ols, PointWeight::Uniform).unwrap();
        let hub = fit_normalizer(&d, FitMethod::Huber, PointWeight::Uniform).unwrap();
        assert!((hub.b_mu - 0.0).abs() < (ols.b_mu - 0.0).abs());
    }

    #[test]
    fn toml_and_csv_roundtrip() {
        let f = fit_normalizer(&exact(0.7, -0.2, 0.1, 0.9), FitMethod::Ols, PointWeight::Uniform).unwrap();
        assert_eq!(NormalizerFn::from_toml(&f.to_toml()).unwrap(), f);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("norm.csv");
        let mut d = exact(1.0, 2.0, 0.0, 1.0);
        d.points[0].sigma = None;
        d.points[0].count = 1;
        d.write_csv(&path).unwrap();
        assert_eq!(NormDataset::read_csv(&path).unwrap(), d);
    }

    proptest! {
        #[test]
        fn ols_is_a_minimum(ys in prop::collection::vec(-5.0f64..5.0, 6), dw in -1.0f64..1.0, db in -1.0f64..1.0) {
            let x: Vec<f64> = (1..=6).map(|k| (k as f64 / 6.0).ln()).collect();
            let (w, b) = fit_line_ols(&x, &ys).unwrap();
            let rss = |w: f64, b: f64| x.iter().zip(&ys).map(|(xi, yi)| (yi - w * xi - b).powi(2)).sum::<f64>();
            let base = rss(w, b);
            prop_assert!(rss(w + 1e-3 * dw.signum(), b + 1e-3 * db.signum()) >= base - 1e-12);
        }

        #[test]
        fn huber_equals_ols_on_exact(w in -3.0f64..3.0, b in -3.0f64..3.0) {
            let d = exact(w, b, 0.0, 1.0);
            let o = fit_normalizer(&d, FitMethod::Ols, PointWeight::Uniform).unwrap();
            let h = fit_normalizer(&d, FitMethod::Huber, PointWeight::Uniform).unwrap();
            prop_assert!((o.w_mu - h.w_mu).abs() < 1e-6 && (o.b_mu - h.b_mu).abs() < 1e-6);
        }
    }
}
