//! Turning a response into actions: entropy-threshold segmentation, the
//! sentence-delimiter baseline, and the two limit cases (one span per token,
//! one span per response).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open token interval `[start, end)` of one action inside a response.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub start: usize,
    pub end: usize,
    pub index: usize,
    /// Normalized location `(index + 1) / T`.
    pub p: f64,
}

impl SegmentSpan {
    pub fn new(start: usize, end: usize, index: usize, count: usize) -> Self {
        Self { start, end, index, p: (index + 1) as f64 / count as f64 }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Builds spans from sorted segment start indices (the first must be 0).
pub fn spans_from_starts(starts: &[usize], len: usize) -> Vec<SegmentSpan> {
    let count = starts.len();
    starts
        .iter()
        .enumerate()
        .map(|(t, &s)| {
            let end = starts.get(t + 1).copied().unwrap_or(len);
            SegmentSpan::new(s, end, t, count)
        })
        .collect()
}

pub fn starts_of(spans: &[SegmentSpan]) -> Vec<usize> {
    spans.iter().map(|s| s.start).collect()
}

/// Token `i ≥ 1` opens a new span iff `entropies[i] > c_ent`; token 0 always does.
pub fn segment_by_entropy(entropies: &[f64], c_ent: f64) -> Result<Vec<SegmentSpan>> {
    if entropies.is_empty() {
        return Err(Error::Empty("entropies"));
    }
    if entropies.iter().any(|e| !e.is_finite()) {
        return Err(Error::Segmentation("non-finite entropy".into()));
    }
    if !(c_ent >= 0.0) {
        return Err(Error::Segmentation(format!("c_ent {c_ent} must be ≥ 0")));
    }
    let mut starts = vec![0];
    starts.extend((1..entropies.len()).filter(|&i| entropies[i] > c_ent));
    Ok(spans_from_starts(&starts, entropies.len()))
}

/// Each delimiter closes the current span; trailing tokens form a final span.
pub fn segment_by_delimiters(tokens: &[usize], delimiters: &[usize]) -> Result<Vec<SegmentSpan>> {
    if tokens.is_empty() {
        return Err(Error::Empty("tokens"));
    }
    let mut starts = vec![0];
    for (i, t) in tokens.iter().enumerate() {
        if delimiters.contains(t) && i + 1 < tokens.len() {
            starts.push(i + 1);
        }
    }
    Ok(spans_from_starts(&starts, tokens.len()))
}

pub fn per_token_spans(len: usize) -> Vec<SegmentSpan> {
    (0..len).map(|i| SegmentSpan::new(i, i + 1, i, len)).collect()
}

pub fn whole_span(len: usize) -> Vec<SegmentSpan> {
    vec![SegmentSpan::new(0, len, 0, 1)]
}

/// Errors unless `spans` are ordered, contiguous, and cover `[0, len)`.
pub fn check_partition(spans: &[SegmentSpan], len: usize) -> Result<()> {
    if spans.is_empty() {
        return Err(Error::Segmentation("no spans".into()));
    }
    let mut cursor = 0;
    for (t, s) in spans.iter().enumerate() {
        if s.start != cursor || s.end <= s.start || s.index != t {
            return Err(Error::Segmentation(format!("span {t} = [{}, {}) breaks the partition at {cursor}", s.start, s.end)));
        }
        cursor = s.end;
    }
    if cursor != len {
        return Err(Error::Segmentation(format!("spans cover {cursor} of {len} tokens")));
    }
    Ok(())
}

/// Mean number of tokens per span over a collection of segmentations.
pub fn average_segment_length(all: &[Vec<SegmentSpan>]) -> f64 {
    let tokens: usize = all.iter().flatten().map(SegmentSpan::len).sum();
    let spans: usize = all.iter().map(Vec::len).sum();
    tokens as f64 / spans.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bounds(spans: &[SegmentSpan]) -> Vec<(usize, usize)> {
        spans.iter().map(|s| (s.start, s.end)).collect()
    }

    #[test]
    fn entropy_rule_example() {
        let spans = segment_by_entropy(&[0.5, 2.0, 0.1, 0.3, 2.5, 0.0], 1.75).unwrap();
        assert_eq!(bounds(&spans), vec![(0, 1), (1, 4), (4, 6)]);
        let ps: Vec<f64> = spans.iter().map(|s| s.p).collect();
        assert_eq!(ps, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn limit_thresholds() {
        let ents = [0.2, 1.0, 3.0, 0.01];
        assert_eq!(segment_by_entropy(&ents, 0.0).unwrap().len(), 4);
        assert_eq!(bounds(&segment_by_entropy(&ents, 1000.0).unwrap()), vec![(0, 4)]);
    }

    #[test]
    fn strict_inequality_at_threshold() {
        let spans = segment_by_entropy(&[1.0, 1.0, 1.0], 1.0).unwrap();
        assert_eq!(spans.len(), 1);
    }

    #[test]
    fn entropy_errors() {
        assert!(segment_by_entropy(&[], 1.0).is_err());
        assert!(segment_by_entropy(&[1.0, f64::NAN], 1.0).is_err());
        assert!(segment_by_entropy(&[1.0], -1.0).is_err());
    }

    #[test]
    fn delimiter_examples() {
        let (a, b, c, d) = (1, 2, 3, 9);
        assert_eq!(bounds(&segment_by_delimiters(&[a, b, d, c, d], &[d]).unwrap()), vec![(0, 3), (3, 5)]);
        assert_eq!(bounds(&segment_by_delimiters(&[a, b, c], &[d]).unwrap()), vec![(0, 3)]);
        assert_eq!(bounds(&segment_by_delimiters(&[d, d, d], &[d]).unwrap()), vec![(0, 1), (1, 2), (2, 3)]);
        assert!(segment_by_delimiters(&[], &[d]).is_err());
    }

    proptest! {
        #[test]
        fn partition_and_monotone(ents in prop::collection::vec(0.0f64..4.0, 1..60), c1 in 0.0f64..4.0, c2 in 0.0f64..4.0) {
            let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
            let a = segment_by_entropy(&ents, lo).unwrap();
            let b = segment_by_entropy(&ents, hi).unwrap();
            check_partition(&a, ents.len()).unwrap();
            check_partition(&b, ents.len()).unwrap();
            prop_assert!(b.len() <= a.len());
            prop_assert_eq!(a.last().unwrap().p, 1.0);
        }

        #[test]
        fn delimiter_partition(tokens in prop::collection::vec(0usize..6, 1..40)) {
            let spans = segment_by_delimiters(&tokens, &[0, 1]).unwrap();
            check_partition(&spans, tokens.len()).unwrap();
            prop_assert_eq!(spans.last().unwrap().p, 1.0);
        }
    }
}
