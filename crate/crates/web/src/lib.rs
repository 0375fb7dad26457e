//! Browser bindings for three small demos: entropy segmentation of a sampled
//! response, segment-to-token reward interpolation, and OLS against Huber
//! line fits. Every export returns a JSON string so the page stays plain JS.

use segrl::interp::{interpolate, InterpStrategy};
use segrl::normalizer::{fit_line_huber, fit_line_ols};
use segrl::numerics::shannon_entropy;
use segrl::segment::{segment_by_entropy, SegmentSpan};
use segrl::task::{conditional_dist, gen_task_spec, sample_reference_response, TaskParams, TaskSpec, TokenRole};
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Token {
    id: usize,
    label: String,
    entropy: f64,
}

#[derive(Serialize)]
struct Span {
    start: usize,
    end: usize,
    p: f64,
}

fn spans_json(spans: &[SegmentSpan]) -> Vec<Span> {
    spans.iter().map(|s| Span { start: s.start, end: s.end, p: s.p }).collect()
}

fn label(spec: &TaskSpec, t: usize) -> String {
    match spec.role(t) {
        TokenRole::Keyphrase { phrase, pos } => format!("k{phrase}.{pos}"),
        TokenRole::Filler => format!("f{t}"),
        TokenRole::Delimiter => format!("d{t}"),
        TokenRole::Eos => "eos".into(),
        TokenRole::Sep => "sep".into(),
        TokenRole::Unused => format!("?{t}"),
    }
}

fn error_json(e: impl std::fmt::Display) -> String {
    json!({ "error": e.to_string() }).to_string()
}

/// Samples a response from the reference process of task `seed`, computes the
/// true entropy of the distribution each token was drawn from, and opens a
/// segment wherever that entropy exceeds `c_ent`.
#[wasm_bindgen]
pub fn segment_sample(seed: u64, c_ent: f64) -> String {
    let run = || -> segrl::Result<String> {
        let spec = gen_task_spec(seed, &TaskParams::default())?;
        let (tokens, _) = sample_reference_response(&spec, spec.params.max_len, seed.wrapping_add(1));
        let mut out = Vec::with_capacity(tokens.len());
        for i in 0..tokens.len() {
            let entropy = shannon_entropy(&conditional_dist(&spec, &tokens[..i])?)?;
            out.push(Token { id: tokens[i], label: label(&spec, tokens[i]), entropy });
        }
        let ents: Vec<f64> = out.iter().map(|t| t.entropy).collect();
        let spans = segment_by_entropy(&ents, c_ent)?;
        Ok(json!({ "tokens": out, "spans": spans_json(&spans) }).to_string())
    };
    run().unwrap_or_else(error_json)
}

/// Spreads segment rewards over tokens. `lengths` are the segment lengths.
#[wasm_bindgen]
pub fn interpolate_rewards(rewards: &[f64], lengths: &[u32], strategy: &str) -> String {
    let strategy = match strategy {
        "even_split" => InterpStrategy::EvenSplit,
        "repeat" => InterpStrategy::Repeat,
        "none" => InterpStrategy::None,
        other => return error_json(format!("unknown strategy `{other}`")),
    };
    if lengths.contains(&0) {
        return error_json("segment lengths must be positive");
    }
    let mut spans = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for (i, &l) in lengths.iter().enumerate() {
        spans.push(SegmentSpan::new(start, start + l as usize, i, lengths.len()));
        start += l as usize;
    }
    match interpolate(rewards, &spans, strategy) {
        Ok(v) => json!({ "tokens": v.values, "sum_tokens": v.values.iter().sum::<f64>(), "sum_segments": rewards.iter().sum::<f64>() }).to_string(),
        Err(e) => error_json(e),
    }
}

/// Fits `y = w x + b` by least squares and by Huber IRLS.
#[wasm_bindgen]
pub fn compare_fits(x: &[f64], y: &[f64]) -> String {
    match (fit_line_ols(x, y), fit_line_huber(x, y)) {
        (Ok((w0, b0)), Ok((w1, b1))) => json!({ "ols": { "w": w0, "b": b0 }, "huber": { "w": w1, "b": b1 } }).to_string(),
        (Err(e), _) | (_, Err(e)) => error_json(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn segment_limits() {
        let one = parse(&segment_sample(3, 1000.0));
        assert_eq!(one["spans"].as_array().unwrap().len(), 1);
        // Tokens inside a keyphrase are forced, so only positive-entropy positions split.
        let all = parse(&segment_sample(3, 0.0));
        let toks = all["tokens"].as_array().unwrap();
        let open = 1 + toks.iter().skip(1).filter(|t| t["entropy"].as_f64().unwrap() > 0.0).count();
        assert_eq!(all["spans"].as_array().unwrap().len(), open);
    }

    #[test]
    fn segments_start_on_high_entropy() {
        let v = parse(&segment_sample(7, 1.0));
        let toks = v["tokens"].as_array().unwrap();
        for s in v["spans"].as_array().unwrap().iter().skip(1) {
            let start = s["start"].as_u64().unwrap() as usize;
            assert!(toks[start]["entropy"].as_f64().unwrap() > 1.0);
        }
    }

    #[test]
    fn even_split_keeps_sum() {
        let v = parse(&interpolate_rewards(&[1.0, -2.0, 0.5], &[2, 3, 1], "even_split"));
        assert!((v["sum_tokens"].as_f64().unwrap() - v["sum_segments"].as_f64().unwrap()).abs() < 1e-12);
        assert_eq!(v["tokens"].as_array().unwrap().len(), 6);
    }

    #[test]
    fn bad_inputs_report_errors() {
        assert!(parse(&interpolate_rewards(&[1.0], &[1], "spline"))["error"].is_string());
        assert!(parse(&interpolate_rewards(&[1.0], &[0], "repeat"))["error"].is_string());
        assert!(parse(&compare_fits(&[1.0], &[2.0]))["error"].is_string());
    }

    #[test]
    fn huber_resists_outlier() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let mut y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        y[19] += 200.0;
        let v = parse(&compare_fits(&x, &y));
        let hw = v["huber"]["w"].as_f64().unwrap();
        let ow = v["ols"]["w"].as_f64().unwrap();
        assert!((hw - 2.0).abs() < (ow - 2.0).abs());
        assert!((hw - 2.0).abs() < 0.05, "{hw}");
    }
}
