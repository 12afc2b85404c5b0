//! Multimodal sequence layouts and their position ids.
//!
//! A layout is `prefix_len` text tokens, then `num_frames` frames of
//! `tokens_per_frame` visual tokens each, then `suffix_len` text tokens.
//! Ids are 0-based. The visual span `[v_s, v_e]` is a single contiguous run.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct SequenceLayout {
    prefix_len: usize,
    num_frames: usize,
    tokens_per_frame: usize,
    suffix_len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    prefix_len: usize,
    num_frames: usize,
    tokens_per_frame: usize,
    suffix_len: usize,
}

impl TryFrom<RawLayout> for SequenceLayout {
    type Error = Error;

    fn try_from(raw: RawLayout) -> Result<Self> {
        build_layout(
            raw.prefix_len,
            raw.num_frames,
            raw.tokens_per_frame,
            raw.suffix_len,
        )
    }
}

impl From<SequenceLayout> for RawLayout {
    fn from(l: SequenceLayout) -> Self {
        RawLayout {
            prefix_len: l.prefix_len,
            num_frames: l.num_frames,
            tokens_per_frame: l.tokens_per_frame,
            suffix_len: l.suffix_len,
        }
    }
}

/// Role of a single token within a layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenRole {
    TextPrefix,
    Visual { frame: usize, slot: usize },
    TextSuffix,
}

impl TokenRole {
    pub fn is_visual(self) -> bool {
        matches!(self, TokenRole::Visual { .. })
    }

    pub fn frame(self) -> Option<usize> {
        match self {
            TokenRole::Visual { frame, .. } => Some(frame),
            _ => None,
        }
    }
}

impl fmt::Display for TokenRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenRole::TextPrefix => f.write_str("text_prefix"),
            TokenRole::Visual { frame, .. } => write!(f, "visual(frame {frame})"),
            TokenRole::TextSuffix => f.write_str("text_suffix"),
        }
    }
}

/// Validates counts and builds a layout.
pub fn build_layout(
    prefix_len: usize,
    num_frames: usize,
    tokens_per_frame: usize,
    suffix_len: usize,
) -> Result<SequenceLayout> {
    if (num_frames == 0) != (tokens_per_frame == 0) {
        return Err(Error::invalid(format!(
            "num_frames ({num_frames}) and tokens_per_frame ({tokens_per_frame}) must both be zero or both be positive"
        )));
    }
    let visual = num_frames
        .checked_mul(tokens_per_frame)
        .ok_or_else(|| Error::invalid("visual token count overflows"))?;
    let total = prefix_len
        .checked_add(visual)
        .and_then(|t| t.checked_add(suffix_len))
        .ok_or_else(|| Error::invalid("sequence length overflows"))?;
    if total == 0 {
        return Err(Error::invalid("sequence must contain at least one token"));
    }
    Ok(SequenceLayout {
        prefix_len,
        num_frames,
        tokens_per_frame,
        suffix_len,
    })
}

impl SequenceLayout {
    pub fn new(
        prefix_len: usize,
        num_frames: usize,
        tokens_per_frame: usize,
        suffix_len: usize,
    ) -> Result<Self> {
        build_layout(prefix_len, num_frames, tokens_per_frame, suffix_len)
    }

    /// Text-only layout of `len` tokens.
    pub fn text(len: usize) -> Result<Self> {
        build_layout(len, 0, 0, 0)
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn suffix_len(&self) -> usize {
        self.suffix_len
    }

    pub fn visual_len(&self) -> usize {
        self.num_frames * self.tokens_per_frame
    }

    /// Total token count `T`.
    pub fn len(&self) -> usize {
        self.prefix_len + self.visual_len() + self.suffix_len
    }

    /// Always false: a valid layout holds at least one token.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(v_s, v_e)`, inclusive, or `None` when there are no visual tokens.
    pub fn visual_span(&self) -> Option<(usize, usize)> {
        (self.visual_len() > 0).then(|| {
            let vs = self.prefix_len;
            (vs, vs + self.visual_len() - 1)
        })
    }

    /// Role of token `n`. Panics when `n >= len()`.
    pub fn role(&self, n: usize) -> TokenRole {
        assert!(n < self.len(), "token {n} out of range for T={}", self.len());
        if n < self.prefix_len {
            TokenRole::TextPrefix
        } else if n < self.prefix_len + self.visual_len() {
            let offset = n - self.prefix_len;
            TokenRole::Visual {
                frame: offset / self.tokens_per_frame,
                slot: offset % self.tokens_per_frame,
            }
        } else {
            TokenRole::TextSuffix
        }
    }

    pub fn frame_of(&self, n: usize) -> Option<usize> {
        self.role(n).frame()
    }

    /// Global ids of the tokens of frame `f`.
    pub fn frame_range(&self, f: usize) -> std::ops::Range<usize> {
        assert!(f < self.num_frames, "frame {f} out of range");
        let start = self.prefix_len + f * self.tokens_per_frame;
        start..start + self.tokens_per_frame
    }

    pub fn check_index(&self, n: usize) -> Result<()> {
        if n >= self.len() {
            return Err(Error::invalid(format!(
                "token index {n} out of range for T={}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// How the temporal id of text after the visual span is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuffixRule {
    /// Third branch exactly as `n - (v_e - v_s + 1 - floor((v_e - v_s) / m))`.
    /// The first suffix token then shares the last frame's temporal id.
    #[default]
    Literal,
    /// Literal rule plus one, so suffix ids continue strictly after the last frame.
    StrictMonotonic,
}

impl SuffixRule {
    pub fn from_flag(strict_monotonic_suffix: bool) -> Self {
        if strict_monotonic_suffix {
            SuffixRule::StrictMonotonic
        } else {
            SuffixRule::Literal
        }
    }
}

/// Temporal ids with the literal suffix rule.
pub fn temporal_ids(layout: &SequenceLayout) -> Vec<i64> {
    temporal_ids_with(layout, SuffixRule::Literal)
}

/// Temporal id per token: identity before the video, one id per frame inside
/// it (`v_s + floor((n - v_s) / m)`), and a shifted identity after it.
pub fn temporal_ids_with(layout: &SequenceLayout, rule: SuffixRule) -> Vec<i64> {
    let t = layout.len() as i64;
    let Some((vs, ve)) = layout.visual_span() else {
        return (0..t).collect();
    };
    let (vs, ve) = (vs as i64, ve as i64);
    let m = layout.tokens_per_frame() as i64;
    let suffix_offset = ve - vs + 1 - (ve - vs).div_euclid(m)
        - match rule {
            SuffixRule::Literal => 0,
            SuffixRule::StrictMonotonic => 1,
        };
    (0..t)
        .map(|n| {
            if n < vs {
                n
            } else if n <= ve {
                vs + (n - vs).div_euclid(m)
            } else {
                n - suffix_offset
            }
        })
        .collect()
}

/// Global, temporal and adjusted position per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionTable {
    global_ids: Vec<i64>,
    temporal_ids: Vec<i64>,
    adjusted: Vec<Real>,
    gamma: Real,
}

impl PositionTable {
    /// Builds a table from explicit ids; `adjusted[n] = global[n] + gamma * temporal[n]`.
    pub fn from_ids(global_ids: Vec<i64>, temporal_ids: Vec<i64>, gamma: Real) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be finite, got {gamma}")));
        }
        if global_ids.len() != temporal_ids.len() {
            return Err(Error::shape(
                "PositionTable::from_ids",
                global_ids.len(),
                temporal_ids.len(),
            ));
        }
        if global_ids.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::invalid("global ids must increase by exactly 1"));
        }
        if temporal_ids.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("temporal ids must be non-decreasing"));
        }
        let adjusted = global_ids
            .iter()
            .zip(&temporal_ids)
            .map(|(&n, &it)| n as Real + gamma * it as Real)
            .collect();
        Ok(PositionTable {
            global_ids,
            temporal_ids,
            adjusted,
            gamma,
        })
    }

    /// Same table with every global id shifted by `global_shift` and every
    /// temporal id by `temporal_shift`.
    pub fn shifted(&self, global_shift: i64, temporal_shift: i64) -> Result<Self> {
        Self::from_ids(
            self.global_ids.iter().map(|n| n + global_shift).collect(),
            self.temporal_ids.iter().map(|n| n + temporal_shift).collect(),
            self.gamma,
        )
    }

    pub fn len(&self) -> usize {
        self.global_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global_ids.is_empty()
    }

    pub fn gamma(&self) -> Real {
        self.gamma
    }

    pub fn global_ids(&self) -> &[i64] {
        &self.global_ids
    }

    pub fn temporal_ids(&self) -> &[i64] {
        &self.temporal_ids
    }

    pub fn adjusted(&self) -> &[Real] {
        &self.adjusted
    }
}

/// Position table for `layout` with the literal suffix rule.
pub fn adjusted_positions(layout: &SequenceLayout, gamma: Real) -> Result<PositionTable> {
    adjusted_positions_with(layout, gamma, SuffixRule::Literal)
}

pub fn adjusted_positions_with(
    layout: &SequenceLayout,
    gamma: Real,
    rule: SuffixRule,
) -> Result<PositionTable> {
    PositionTable::from_ids(
        (0..layout.len() as i64).collect(),
        temporal_ids_with(layout, rule),
        gamma,
    )
}

/// Adjusted-position distance between a text token and a visual token. With
/// `gamma = 0` this is the plain id difference.
pub fn relative_text_visual_distance(
    table: &PositionTable,
    text_pos: usize,
    visual_pos: usize,
) -> Result<Real> {
    for idx in [text_pos, visual_pos] {
        if idx >= table.len() {
            return Err(Error::invalid(format!(
                "token index {idx} out of range for T={}",
                table.len()
            )));
        }
    }
    Ok(table.adjusted[text_pos] - table.adjusted[visual_pos])
}
