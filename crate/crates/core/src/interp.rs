//! Spreading segment rewards over the tokens of each segment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::{check_partition, SegmentSpan};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpStrategy {
    #[default]
    EvenSplit,
    Repeat,
    None,
}

impl InterpStrategy {
    pub const ALL: [InterpStrategy; 3] = [InterpStrategy::None, InterpStrategy::Repeat, InterpStrategy::EvenSplit];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::EvenSplit => "even_split",
            Self::Repeat => "repeat",
            Self::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenRewardVector {
    pub values: Vec<f64>,
    pub source_spans: Vec<SegmentSpan>,
}

pub fn interpolate(seg_rewards: &[f64], spans: &[SegmentSpan], strategy: InterpStrategy) -> Result<TokenRewardVector> {
    if seg_rewards.len() != spans.len() {
        return Err(Error::Shape(format!("{} rewards for {} spans", seg_rewards.len(), spans.len())));
    }
    let len = spans.last().map_or(0, |s| s.end);
    check_partition(spans, len)?;
    let mut values = vec![0.0; len];
    for (s, &r) in spans.iter().zip(seg_rewards) {
        let out = &mut values[s.start..s.end];
        match strategy {
            InterpStrategy::EvenSplit => out.fill(r / s.len() as f64),
            InterpStrategy::Repeat => out.fill(r),
            InterpStrategy::None => out[out.len() - 1] = r,
        }
    }
    Ok(TokenRewardVector { values, source_spans: spans.to_vec() })
}
