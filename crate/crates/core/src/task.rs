//! Synthetic "keyphrase coverage" task.
//!
//! A prompt names a few required keyphrases (by their first tokens, then a
//! separator). A response is a sequence of units: either a whole keyphrase
//! chain, in which every token deterministically fixes its successor, or a
//! single filler/delimiter token. Responses end with EOS. Quality is scored
//! analytically by [`oracle_score`].

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{rng, rng_for};

/// Size and generation knobs for [`gen_task_spec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    pub vocab_size: usize,
    pub n_keyphrases: usize,
    pub keyphrase_len: usize,
    pub n_filler: usize,
    pub n_delimiters: usize,
    /// Required keyphrases per prompt, inclusive range.
    pub required_min: usize,
    pub required_max: usize,
    /// Units emitted before the responder may stop.
    pub min_units: usize,
    /// Per-unit stop probability once `min_units` have been emitted.
    pub stop_prob: f64,
    /// Response length cap (tokens, EOS included).
    pub max_len: usize,
    /// Boundary probability mass on filler/delimiter tokens in the reference process.
    pub boundary_filler_mass: f64,
    /// Boundary probability mass on EOS in the reference process.
    pub boundary_eos_mass: f64,
    /// Minimum gap between the two quality knobs of a preference pair.
    pub pair_quality_gap: f64,
    /// Pairs whose oracle margin falls below this are redrawn.
    pub min_pair_margin: f64,
    /// Per-unit stop probability once every required keyphrase is present
    /// (the larger of this and `stop_prob` applies).
    pub coverage_stop_prob: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_keyphrases: 8,
            keyphrase_len: 4,
            n_filler: 16,
            n_delimiters: 2,
            required_min: 2,
            required_max: 4,
            min_units: 2,
            stop_prob: 0.1,
            max_len: 48,
            boundary_filler_mass: 0.0,
            boundary_eos_mass: 0.0,
            pair_quality_gap: 0.4,
            min_pair_margin: 0.0,
            coverage_stop_prob: 1.0,
        }
    }
}

impl TaskParams {
    /// Long, filler-heavy responses with one or two required keyphrases. Covering
    /// the prompt does not end the response early.
    pub fn sparse_credit() -> Self {
        Self { required_min: 1, required_max: 2, min_units: 4, stop_prob: 0.06, coverage_stop_prob: 0.06, max_len: 64, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub keyphrases: Vec<Vec<usize>>,
    pub filler_tokens: Vec<usize>,
    pub delimiter_tokens: Vec<usize>,
    pub eos_token: usize,
    pub sep_token: usize,
    pub seed: u64,
    pub params: TaskParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    /// Position `pos` of keyphrase `phrase`.
    Keyphrase {
        phrase: usize,
        pos: usize,
    },
    Filler,
    Delimiter,
    Eos,
    Sep,
    Unused,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub id: String,
    pub prompt_tokens: Vec<usize>,
    pub response_tokens: Vec<usize>,
}

impl TokenSequence {
    pub fn full(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.prompt_tokens.len() + self.response_tokens.len());
        v.extend_from_slice(&self.prompt_tokens);
        v.extend_from_slice(&self.response_tokens);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub prompt: Vec<usize>,
    pub chosen: TokenSequence,
    pub rejected: TokenSequence,
    pub oracle_margin: f64,
}

/// Flat line-delimited record for a [`PreferencePair`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub prompt_tokens: Vec<usize>,
    pub chosen_tokens: Vec<usize>,
    pub rejected_tokens: Vec<usize>,
    pub oracle_margin: f64,
}

impl From<&PreferencePair> for PairRecord {
    fn from(p: &PreferencePair) -> Self {
        Self {
            id: p.id.clone(),
            prompt_tokens: p.prompt.clone(),
            chosen_tokens: p.chosen.response_tokens.clone(),
            rejected_tokens: p.rejected.response_tokens.clone(),
            oracle_margin: p.oracle_margin,
        }
    }
}

impl From<PairRecord> for PreferencePair {
    fn from(r: PairRecord) -> Self {
        let seq = |tag: &str, tokens: Vec<usize>| TokenSequence {
            id: format!("{}/{tag}", r.id),
            prompt_tokens: r.prompt_tokens.clone(),
            response_tokens: tokens,
        };
        Self {
            chosen: seq("chosen", r.chosen_tokens),
            rejected: seq("rejected", r.rejected_tokens),
            id: r.id,
            prompt: r.prompt_tokens,
            oracle_margin: r.oracle_margin,
        }
    }
}

pub fn gen_task_spec(seed: u64, params: &TaskParams) -> Result<TaskSpec> {
    let p = params;
    if p.n_keyphrases == 0 {
        return Err(Error::TaskParams("need at least one keyphrase".into()));
    }
    if !(2..=8).contains(&p.keyphrase_len) {
        return Err(Error::TaskParams(format!("keyphrase_len {} outside 2..=8", p.keyphrase_len)));
    }
    if p.n_filler + p.n_delimiters == 0 {
        return Err(Error::TaskParams("need at least one filler or delimiter token".into()));
    }
    let needed = p.n_keyphrases * p.keyphrase_len + p.n_filler + p.n_delimiters + 2;
    if needed > p.vocab_size {
        return Err(Error::TaskParams(format!("{needed} tokens needed, vocab_size is {}", p.vocab_size)));
    }
    if p.required_min == 0 || p.required_min > p.required_max || p.required_max > p.n_keyphrases {
        return Err(Error::TaskParams(format!("required range {}..={} invalid for {} keyphrases", p.required_min, p.required_max, p.n_keyphrases)));
    }
    if !(0.0..=1.0).contains(&p.stop_prob) || !(0.0..=1.0).contains(&p.coverage_stop_prob) || p.max_len < p.keyphrase_len {
        return Err(Error::TaskParams("stop probabilities must be in [0,1] and max_len ≥ keyphrase_len".into()));
    }
    let masses = p.boundary_filler_mass + p.boundary_eos_mass;
    if p.boundary_filler_mass < 0.0 || p.boundary_eos_mass < 0.0 || masses >= 1.0 {
        return Err(Error::TaskParams("boundary masses must be nonnegative and sum below 1".into()));
    }
    if !(0.0..0.9).contains(&p.pair_quality_gap) {
        return Err(Error::TaskParams("pair_quality_gap must be in [0, 0.9)".into()));
    }
    if !(0.0..0.5).contains(&p.min_pair_margin) {
        return Err(Error::TaskParams("min_pair_margin must be in [0, 0.5)".into()));
    }

    let mut ids: Vec<usize> = (0..p.vocab_size).collect();
    ids.shuffle(&mut rng_for(seed, "task-spec", 0));
    let mut it = ids.into_iter();
    let keyphrases = (0..p.n_keyphrases).map(|_| it.by_ref().take(p.keyphrase_len).collect()).collect();
    let filler_tokens = it.by_ref().take(p.n_filler).collect();
    let delimiter_tokens = it.by_ref().take(p.n_delimiters).collect();
    let eos_token = it.next().expect("checked size");
    let sep_token = it.next().expect("checked size");
    Ok(TaskSpec { vocab_size: p.vocab_size, keyphrases, filler_tokens, delimiter_tokens, eos_token, sep_token, seed, params: p.clone() })
}

impl TaskSpec {
    pub fn branch_count(&self) -> usize {
        self.keyphrases.len()
    }

    pub fn role(&self, token: usize) -> TokenRole {
        for (phrase, chain) in self.keyphrases.iter().enumerate() {
            if let Some(pos) = chain.iter().position(|&t| t == token) {
                return TokenRole::Keyphrase { phrase, pos };
            }
        }
        if self.filler_tokens.contains(&token) {
            TokenRole::Filler
        } else if self.delimiter_tokens.contains(&token) {
            TokenRole::Delimiter
        } else if token == self.eos_token {
            TokenRole::Eos
        } else if token == self.sep_token {
            TokenRole::Sep
        } else {
            TokenRole::Unused
        }
    }

    /// Tokens a boundary filler unit draws from.
    pub fn filler_pool(&self) -> Vec<usize> {
        self.filler_tokens.iter().chain(&self.delimiter_tokens).copied().collect()
    }

    /// Indices of the keyphrases a prompt requires, in prompt order.
    pub fn required_keyphrases(&self, prompt: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        for &t in prompt {
            if let TokenRole::Keyphrase { phrase, pos: 0 } = self.role(t) {
                if !out.contains(&phrase) {
                    out.push(phrase);
                }
            }
        }
        out
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("task spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("task spec serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Grammar state after consuming a response prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ParseState {
    Boundary,
    InChain { phrase: usize, next: usize },
    Done,
}

fn parse_prefix(spec: &TaskSpec, context: &[usize]) -> Result<ParseState> {
    let mut state = ParseState::Boundary;
    for (i, &tok) in context.iter().enumerate() {
        state = match (state, spec.role(tok)) {
            (ParseState::Done, _) => {
                return Err(Error::Unreachable(format!("token at {i} follows EOS")));
            }
            (ParseState::InChain { phrase, next }, _) => {
                if spec.keyphrases[phrase][next] != tok {
                    return Err(Error::Unreachable(format!("token {tok} at {i} breaks keyphrase {phrase}")));
                }
                if next + 1 == spec.keyphrases[phrase].len() {
                    ParseState::Boundary
                } else {
                    ParseState::InChain { phrase, next: next + 1 }
                }
            }
            (ParseState::Boundary, TokenRole::Keyphrase { phrase, pos: 0 }) => ParseState::InChain { phrase, next: 1 },
            (ParseState::Boundary, TokenRole::Filler | TokenRole::Delimiter) => ParseState::Boundary,
            (ParseState::Boundary, TokenRole::Eos) => ParseState::Done,
            (ParseState::Boundary, role) => {
                return Err(Error::Unreachable(format!("token {tok} ({role:?}) at boundary position {i}")));
            }
        };
    }
    Ok(state)
}

/// Next-token distribution of the reference process given a response prefix.
///
/// Inside a keyphrase chain it is one-hot on the forced successor. At a unit
/// boundary the keyphrase first tokens share `1 - filler_mass - eos_mass`
/// uniformly, the filler pool shares `filler_mass`, and EOS gets `eos_mass`.
pub fn conditional_dist(spec: &TaskSpec, context: &[usize]) -> Result<Vec<f64>> {
    let mut dist = vec![0.0; spec.vocab_size];
    match parse_prefix(spec, context)? {
        ParseState::InChain { phrase, next } => dist[spec.keyphrases[phrase][next]] = 1.0,
        ParseState::Boundary => {
            let fm = spec.params.boundary_filler_mass;
            let em = spec.params.boundary_eos_mass;
            let b = spec.branch_count() as f64;
            for chain in &spec.keyphrases {
                dist[chain[0]] = (1.0 - fm - em) / b;
            }
            let pool = spec.filler_pool();
            for &t in &pool {
                dist[t] = fm / pool.len() as f64;
            }
            dist[spec.eos_token] += em;
        }
        ParseState::Done => return Err(Error::Unreachable("context already ended with EOS".into())),
    }
    Ok(dist)
}

/// A response drawn token by token from [`conditional_dist`], plus the start
/// index of every unit. Stops at EOS or after `max_len` tokens.
pub fn sample_reference_response(spec: &TaskSpec, max_len: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng(seed);
    let mut tokens = Vec::new();
    let mut starts = Vec::new();
    while tokens.len() < max_len {
        let dist = conditional_dist(spec, &tokens).expect("own samples are reachable");
        let u: f64 = r.gen();
        let mut acc = 0.0;
        let mut tok = spec.eos_token;
        for (t, &p) in dist.iter().enumerate() {
            acc += p;
            if p > 0.0 && u < acc {
                tok = t;
                break;
            }
        }
        if matches!(parse_prefix(spec, &tokens), Ok(ParseState::Boundary)) {
            starts.push(tokens.len());
        }
        tokens.push(tok);
        if tok == spec.eos_token {
            break;
        }
    }
    (tokens, starts)
}

/// Draws a prompt: `K` distinct required keyphrases (first tokens, shuffled) then SEP.
pub fn sample_prompt(spec: &TaskSpec, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    let p = &spec.params;
    let k = r.gen_range(p.required_min..=p.required_max);
    let mut idx: Vec<usize> = (0..spec.branch_count()).collect();
    idx.shuffle(&mut r);
    let mut prompt: Vec<usize> = idx[..k].iter().map(|&i| spec.keyphrases[i][0]).collect();
    prompt.push(spec.sep_token);
    prompt
}

/// Controllable-quality responder.
///
/// Each unit is, with probability `quality`, a required keyphrase (one not yet
/// emitted if any remain, otherwise a repeat), and otherwise one filler or
/// delimiter token. After `min_units` units the responder stops with
/// probability `stop_prob` per unit. EOS is always appended, and the response
/// never exceeds `max_len` tokens.
pub fn sample_response(spec: &TaskSpec, prompt: &[usize], quality: f64, max_len: usize, seed: u64) -> TokenSequence {
    respond(spec, prompt, quality, max_len, seed)
}

fn respond(spec: &TaskSpec, prompt: &[usize], quality: f64, max_len: usize, seed: u64) -> TokenSequence {
    let mut r = rng(seed);
    let required = spec.required_keyphrases(prompt);
    let pool = spec.filler_pool();
    let mut emitted: Vec<usize> = Vec::new();
    let mut tokens = Vec::new();
    let mut units = 0;
    loop {
        let covered = required.iter().all(|k| emitted.contains(k));
        let stop = if covered { spec.params.stop_prob.max(spec.params.coverage_stop_prob) } else { spec.params.stop_prob };
        if units >= spec.params.min_units && r.gen::<f64>() < stop {
            break;
        }
        let unit: Vec<usize> = if !required.is_empty() && r.gen::<f64>() < quality {
            let fresh: Vec<usize> = required.iter().copied().filter(|k| !emitted.contains(k)).collect();
            let choice = if fresh.is_empty() { required[r.gen_range(0..required.len())] } else { fresh[r.gen_range(0..fresh.len())] };
            emitted.push(choice);
            spec.keyphrases[choice].clone()
        } else {
            vec![pool[r.gen_range(0..pool.len())]]
        };
        if tokens.len() + unit.len() + 1 > max_len {
            break;
        }
        tokens.extend(unit);
        units += 1;
    }
    if tokens.len() < max_len {
        tokens.push(spec.eos_token);
    }
    TokenSequence { id: String::new(), prompt_tokens: prompt.to_vec(), response_tokens: tokens }
}

/// Response tokens before the first EOS.
pub fn strip_eos<'a>(spec: &TaskSpec, response: &'a [usize]) -> &'a [usize] {
    match response.iter().position(|&t| t == spec.eos_token) {
        Some(i) => &response[..i],
        None => response,
    }
}

/// First occurrence `(start, phrase)` of every required keyphrase present in the response.
pub fn keyphrase_occurrences(spec: &TaskSpec, required: &[usize], body: &[usize]) -> Vec<(usize, usize)> {
    let mut found = Vec::new();
    for &k in required {
        let chain = &spec.keyphrases[k];
        if let Some(start) = body.windows(chain.len()).position(|w| w == chain.as_slice()) {
            found.push((start, k));
        }
    }
    found.sort_unstable();
    found
}

/// `coverage / (1 + filler_fraction)`, where coverage is the fraction of
/// required keyphrases fully present and filler is every token outside the
/// first occurrence of a required keyphrase (so repeats count as filler).
pub fn oracle_score(spec: &TaskSpec, prompt: &[usize], response: &[usize]) -> f64 {
    let body = strip_eos(spec, response);
    let required = spec.required_keyphrases(prompt);
    if body.is_empty() || required.is_empty() {
        return 0.0;
    }
    let found = keyphrase_occurrences(spec, &required, body);
    let credited: usize = found.iter().map(|&(_, k)| spec.keyphrases[k].len()).sum();
    let coverage = found.len() as f64 / required.len() as f64;
    let filler_fraction = (body.len() - credited) as f64 / body.len() as f64;
    coverage / (1.0 + filler_fraction)
}

/// Preference pairs: two responses at independent uniform quality knobs at least
/// `pair_quality_gap` apart, labelled by [`oracle_score`]; ties are redrawn.
pub fn make_pref_dataset(spec: &TaskSpec, n_pairs: usize, seed: u64) -> Vec<PreferencePair> {
    (0..n_pairs).map(|i| make_pair(spec, seed, i as u64)).collect()
}

fn make_pair(spec: &TaskSpec, seed: u64, index: u64) -> PreferencePair {
    let prompt = sample_prompt(spec, rng_for(seed, "pair-prompt", index).gen());
    let max_len = spec.params.max_len;
    for attempt in 0u64.. {
        let mut r = rng_for(seed, &format!("pair-{index}"), attempt);
        let (qa, qb): (f64, f64) = (r.gen(), r.gen());
        if (qa - qb).abs() < spec.params.pair_quality_gap {
            continue;
        }
        let a = sample_response(spec, &prompt, qa, max_len, r.gen());
        let b = sample_response(spec, &prompt, qb, max_len, r.gen());
        let (sa, sb) = (oracle_score(spec, &prompt, &a.response_tokens), oracle_score(spec, &prompt, &b.response_tokens));
        if sa == sb || (sa - sb).abs() < spec.params.min_pair_margin {
            continue;
        }
        let id = format!("pair-{seed}-{index}");
        let (mut chosen, mut rejected, margin) = if sa > sb { (a, b, sa - sb) } else { (b, a, sb - sa) };
        chosen.id = format!("{id}/chosen");
        rejected.id = format!("{id}/rejected");
        return PreferencePair { id, prompt, chosen, rejected, oracle_margin: margin };
    }
    unreachable!()
}

/// Prompt-only sequences (empty responses) for policy training or evaluation.
pub fn make_prompts(spec: &TaskSpec, n: usize, seed: u64) -> Vec<Vec<usize>> {
    (0..n).map(|i| sample_prompt(spec, rng_for(seed, "prompt", i as u64).gen())).collect()
}

/// Supervised corpus drawn from the responder at a fixed quality.
pub fn make_sft_corpus(spec: &TaskSpec, n: usize, quality: f64, seed: u64) -> Vec<TokenSequence> {
    (0..n)
        .map(|i| {
            let mut r = rng_for(seed, "sft-corpus", i as u64);
            let prompt = sample_prompt(spec, r.gen());
            let mut seq = sample_response(spec, &prompt, quality, spec.params.max_len, r.gen());
            seq.id = format!("sft-{seed}-{i}");
            seq
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::shannon_entropy;

    fn spec() -> TaskSpec {
        gen_task_spec(1, &TaskParams::default()).unwrap()
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        assert_eq!(spec(), gen_task_spec(1, &TaskParams::default()).unwrap());
        let other = gen_task_spec(2, &TaskParams::default()).unwrap();
        assert_ne!(spec().keyphrases, other.keyphrases);
    }

    #[test]
    fn allocates_disjoint_tokens() {
        let s = spec();
        let kp: Vec<usize> = s.keyphrases.iter().flatten().copied().collect();
        assert_eq!(kp.len(), 32);
        let mut all = kp.clone();
        all.extend(&s.filler_tokens);
        all.extend(&s.delimiter_tokens);
        all.push(s.eos_token);
        all.push(s.sep_token);
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        assert!(all.iter().all(|&t| t < s.vocab_size));
    }

    #[test]
    fn infeasible_knobs_rejected() {
        let p = TaskParams { n_keyphrases: 20, ..TaskParams::default() };
        assert!(gen_task_spec(0, &p).is_err());
        let p = TaskParams { keyphrase_len: 9, ..TaskParams::default() };
        assert!(gen_task_spec(0, &p).is_err());
        let p = TaskParams { required_max: 9, ..TaskParams::default() };
        assert!(gen_task_spec(0, &p).is_err());
    }

    #[test]
    fn conditional_dist_in_chain_and_at_boundary() {
        let s = spec();
        let chain = &s.keyphrases[3];
        let d = conditional_dist(&s, &chain[..2]).unwrap();
        assert_eq!(d[chain[2]], 1.0);
        assert_eq!(shannon_entropy(&d).unwrap(), 0.0);
        let d = conditional_dist(&s, &[]).unwrap();
        assert!((shannon_entropy(&d).unwrap() - 8f64.ln()).abs() < 1e-12);
        let d = conditional_dist(&s, &[chain[0], chain[1], chain[2], chain[3], s.filler_tokens[0]]).unwrap();
        assert!((shannon_entropy(&d).unwrap() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn boundary_entropy_with_filler_mass() {
        let p = TaskParams { n_filler: 4, n_delimiters: 0, boundary_filler_mass: 0.2, ..TaskParams::default() };
        let s = gen_task_spec(5, &p).unwrap();
        let d = conditional_dist(&s, &[]).unwrap();
        let by_hand = -(8.0 * 0.1 * 0.1f64.ln() + 4.0 * 0.05 * 0.05f64.ln());
        assert!((by_hand - 2.4412145291060336).abs() < 1e-12);
        assert!((shannon_entropy(&d).unwrap() - by_hand).abs() < 1e-12);
    }

    #[test]
    fn unreachable_contexts_rejected() {
        let s = spec();
        let chain = &s.keyphrases[0];
        assert!(conditional_dist(&s, &[chain[1]]).is_err());
        assert!(conditional_dist(&s, &[chain[0], s.filler_tokens[0]]).is_err());
        assert!(conditional_dist(&s, &[s.eos_token]).is_err());
    }

    #[test]
    fn quality_extremes() {
        let s = spec();
        for i in 0..50 {
            let prompt = sample_prompt(&s, i);
            let req = s.required_keyphrases(&prompt);
            let hi = sample_response(&s, &prompt, 1.0, s.params.max_len, i);
            let body = strip_eos(&s, &hi.response_tokens);
            assert_eq!(*hi.response_tokens.last().unwrap(), s.eos_token);
            for &t in body {
                match s.role(t) {
                    TokenRole::Keyphrase { phrase, .. } => assert!(req.contains(&phrase)),
                    other => panic!("unexpected {other:?}"),
                }
            }
            let lo = sample_response(&s, &prompt, 0.0, s.params.max_len, i);
            assert!(lo.response_tokens.iter().all(|&t| !matches!(s.role(t), TokenRole::Keyphrase { .. })));
            assert!(lo.response_tokens.len() <= s.params.max_len);
        }
    }

    #[test]
    fn half_quality_unit_fraction() {
        let s = spec();
        let (mut kp, mut units) = (0usize, 0usize);
        for i in 0..1000 {
            let prompt = sample_prompt(&s, 10_000 + i);
            let seq = sample_response(&s, &prompt, 0.5, s.params.max_len, i);
            for &t in strip_eos(&s, &seq.response_tokens) {
                match s.role(t) {
                    TokenRole::Keyphrase { pos: 0, .. } => {
                        kp += 1;
                        units += 1;
                    }
                    TokenRole::Keyphrase { .. } => {}
                    _ => units += 1,
                }
            }
        }
        let frac = kp as f64 / units as f64;
        assert!((frac - 0.5).abs() < 0.05, "{frac}");
    }

    #[test]
    fn oracle_examples() {
        let s = spec();
        let prompt: Vec<usize> = vec![s.keyphrases[0][0], s.keyphrases[1][0], s.keyphrases[2][0], s.keyphrases[3][0], s.sep_token];
        let mut all: Vec<usize> = (0..4).flat_map(|k| s.keyphrases[k].clone()).collect();
        all.push(s.eos_token);
        assert_eq!(oracle_score(&s, &prompt, &all), 1.0);
        assert_eq!(oracle_score(&s, &prompt, &[]), 0.0);
        assert_eq!(oracle_score(&s, &prompt, &[s.eos_token]), 0.0);
        let mut half: Vec<usize> = s.keyphrases[0].clone();
        half.extend(&s.keyphrases[1]);
        half.extend(std::iter::repeat(s.filler_tokens[0]).take(8));
        let expected = 0.5 * (1.0 / 1.5);
        assert!((oracle_score(&s, &prompt, &half) - expected).abs() < 1e-15);
        assert!((expected - 0.3333).abs() < 1e-4);
    }

    #[test]
    fn oracle_penalizes_repeats() {
        let s = spec();
        let prompt = vec![s.keyphrases[0][0], s.keyphrases[1][0], s.sep_token];
        let mut once = s.keyphrases[0].clone();
        once.extend(&s.keyphrases[1]);
        let mut twice = once.clone();
        twice.extend(&s.keyphrases[0]);
        assert!(oracle_score(&s, &prompt, &once) > oracle_score(&s, &prompt, &twice));
    }

    #[test]
    fn dataset_labels_agree_with_oracle() {
        let s = spec();
        let data = make_pref_dataset(&s, 200, 3);
        assert_eq!(data.len(), 200);
        for p in &data {
            let w = oracle_score(&s, &p.prompt, &p.chosen.response_tokens);
            let l = oracle_score(&s, &p.prompt, &p.rejected.response_tokens);
            assert!(w > l);
            assert!((p.oracle_margin - (w - l)).abs() < 1e-15);
        }
        assert_eq!(data, make_pref_dataset(&s, 200, 3));
    }

    #[test]
    fn coverage_stop_ends_on_last_missing_keyphrase() {
        let s = spec();
        for i in 0..200 {
            let prompt = sample_prompt(&s, i);
            let req = s.required_keyphrases(&prompt);
            let seq = sample_response(&s, &prompt, 0.6, s.params.max_len, i);
            let body = strip_eos(&s, &seq.response_tokens);
            let found = keyphrase_occurrences(&s, &req, body);
            if found.len() == req.len() && body.len() + 1 < s.params.max_len - s.params.keyphrase_len {
                let last_start = found.iter().map(|f| f.0).max().unwrap();
                let units_before = body[..last_start].iter().filter(|&&t| !matches!(s.role(t), TokenRole::Keyphrase { pos: 1.., .. })).count();
                if units_before + 1 >= s.params.min_units {
                    assert_eq!(last_start + s.params.keyphrase_len, body.len());
                }
            }
        }
    }

    #[test]
    fn margin_floor_respected() {
        let p = TaskParams { min_pair_margin: 0.2, ..TaskParams::default() };
        let s = gen_task_spec(1, &p).unwrap();
        assert!(make_pref_dataset(&s, 100, 0).iter().all(|q| q.oracle_margin >= 0.2));
        assert!(gen_task_spec(1, &TaskParams { min_pair_margin: 0.7, ..TaskParams::default() }).is_err());
        assert!(gen_task_spec(1, &TaskParams { coverage_stop_prob: 1.5, ..TaskParams::default() }).is_err());
    }

    #[test]
    fn spec_toml_round_trip() {
        let s = spec();
        assert_eq!(TaskSpec::from_toml(&s.to_toml()).unwrap(), s);
    }

    proptest::proptest! {
        #[test]
        fn oracle_ignores_keyphrase_order(seed in 0u64..500) {
            let s = spec();
            let prompt = sample_prompt(&s, seed);
            let req = s.required_keyphrases(&prompt);
            let mut units: Vec<Vec<usize>> = req.iter().map(|&k| s.keyphrases[k].clone()).collect();
            units.push(vec![s.filler_tokens[0]]);
            let a: Vec<usize> = units.iter().flatten().copied().collect();
            let mut r = rng(seed);
            units.shuffle(&mut r);
            let b: Vec<usize> = units.iter().flatten().copied().collect();
            proptest::prop_assert_eq!(oracle_score(&s, &prompt, &a), oracle_score(&s, &prompt, &b));
        }
    }
}
