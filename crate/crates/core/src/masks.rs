//! Additive attention masks over a [`SequenceLayout`].
//!
//! Entry `(i, j)` is `0` when query `i` may attend to key `j` and `-inf`
//! otherwise. Every kind keeps text-to-text and text-to-visual pairs causal;
//! the kinds differ only on visual-to-visual pairs:
//!
//! | kind              | visual pair `(i, j)` allowed when     |
//! |-------------------|---------------------------------------|
//! | `causal`          | `i >= j`                              |
//! | `full_visual`     | always                                |
//! | `fw_block`        | same frame                            |
//! | `fw_block_causal` | `i >= j` or same frame                |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::SequenceLayout;
use crate::numerics::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Causal,
    FullVisual,
    FwBlock,
    FwBlockCausal,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [
        MaskKind::Causal,
        MaskKind::FullVisual,
        MaskKind::FwBlock,
        MaskKind::FwBlockCausal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Causal => "causal",
            MaskKind::FullVisual => "full_visual",
            MaskKind::FwBlock => "fw_block",
            MaskKind::FwBlockCausal => "fw_block_causal",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = MaskKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::invalid(format!(
                    "unknown mask kind {s:?}; valid kinds: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Alternative readings of the mask definitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskOptions {
    /// Restrict `fw_block` intra-frame attention to `i >= j` instead of the full block.
    pub fw_block_causal_within_frame: bool,
}

pub fn allowed(kind: MaskKind, layout: &SequenceLayout, i: usize, j: usize) -> Result<bool> {
    allowed_with(kind, layout, i, j, MaskOptions::default())
}

pub fn allowed_with(
    kind: MaskKind,
    layout: &SequenceLayout,
    i: usize,
    j: usize,
    options: MaskOptions,
) -> Result<bool> {
    layout.check_index(i)?;
    layout.check_index(j)?;
    Ok(allowed_unchecked(kind, layout, i, j, options))
}

fn allowed_unchecked(
    kind: MaskKind,
    layout: &SequenceLayout,
    i: usize,
    j: usize,
    options: MaskOptions,
) -> bool {
    let causal = i >= j;
    let (fi, fj) = (layout.frame_of(i), layout.frame_of(j));
    let both_visual = fi.is_some() && fj.is_some();
    let same_frame = both_visual && fi == fj;
    match kind {
        MaskKind::Causal => causal,
        MaskKind::FullVisual => causal || both_visual,
        MaskKind::FwBlock if both_visual => {
            same_frame && (causal || !options.fw_block_causal_within_frame)
        }
        MaskKind::FwBlock => causal,
        MaskKind::FwBlockCausal => causal || same_frame,
    }
}

/// Dense `T x T` additive mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    kind: MaskKind,
    values: Matrix,
}

impl AttentionMask {
    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    #[inline]
    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.values.get(i, j) == 0.0
    }
}

pub fn build_mask(kind: MaskKind, layout: &SequenceLayout) -> AttentionMask {
    build_mask_with(kind, layout, MaskOptions::default())
}

pub fn build_mask_with(
    kind: MaskKind,
    layout: &SequenceLayout,
    options: MaskOptions,
) -> AttentionMask {
    let t = layout.len();
    let mut values = Matrix::filled(t, t, Real::NEG_INFINITY);
    for i in 0..t {
        for j in 0..t {
            if allowed_unchecked(kind, layout, i, j, options) {
                values.set(i, j, 0.0);
            }
        }
    }
    AttentionMask { kind, values }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskStats {
    pub allowed_count: usize,
    pub allowed_fraction: f64,
    pub per_row_allowed: Vec<usize>,
}

pub fn mask_stats(mask: &AttentionMask) -> MaskStats {
    let t = mask.size();
    let per_row_allowed: Vec<usize> = (0..t)
        .map(|i| (0..t).filter(|&j| mask.is_allowed(i, j)).count())
        .collect();
    let allowed_count = per_row_allowed.iter().sum();
    MaskStats {
        allowed_count,
        allowed_fraction: allowed_count as f64 / (t * t) as f64,
        per_row_allowed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::build_layout;
    use proptest::prelude::*;

    fn allowed_set(mask: &AttentionMask) -> Vec<bool> {
        let t = mask.size();
        (0..t * t).map(|x| mask.is_allowed(x / t, x % t)).collect()
    }

    #[test]
    fn parse_and_display() {
        for k in MaskKind::ALL {
            assert_eq!(k.as_str().parse::<MaskKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        let msg = "fancy".parse::<MaskKind>().unwrap_err().to_string();
        assert!(msg.contains("fw_block_causal") && msg.contains("full_visual"));
    }

    #[test]
    fn predicate_examples() {
        let text = build_layout(3, 0, 0, 0).unwrap();
        assert!(!allowed(MaskKind::Causal, &text, 0, 2).unwrap());
        let l = build_layout(1, 2, 2, 1).unwrap();
        assert!(allowed(MaskKind::FwBlockCausal, &l, 1, 2).unwrap());
        assert!(!allowed(MaskKind::FwBlockCausal, &l, 2, 4).unwrap());
        assert!(allowed(MaskKind::FwBlockCausal, &l, 4, 2).unwrap());
        assert!(allowed(MaskKind::Causal, &l, 9, 0).is_err());
    }

    #[test]
    fn causal_text_mask() {
        let mask = build_mask(MaskKind::Causal, &build_layout(3, 0, 0, 0).unwrap());
        let inf = Real::NEG_INFINITY;
        let expected =
            Matrix::from_rows(&[vec![0.0, inf, inf], vec![0.0, 0.0, inf], vec![0.0, 0.0, 0.0]])
                .unwrap();
        assert_eq!(mask.values(), &expected);
        assert_eq!(mask_stats(&mask).allowed_count, 6);
    }

    #[test]
    fn fw_block_on_pure_video_is_block_diagonal() {
        let mask = build_mask(MaskKind::FwBlock, &build_layout(0, 2, 2, 0).unwrap());
        let expected = [
            [true, true, false, false],
            [true, true, false, false],
            [false, false, true, true],
            [false, false, true, true],
        ];
        for (i, row) in expected.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                assert_eq!(mask.is_allowed(i, j), e, "({i},{j})");
            }
        }
    }

    #[test]
    fn fw_block_causal_within_frame_option() {
        let l = build_layout(0, 2, 2, 0).unwrap();
        let opts = MaskOptions {
            fw_block_causal_within_frame: true,
        };
        let mask = build_mask_with(MaskKind::FwBlock, &l, opts);
        assert!(mask.is_allowed(1, 0) && !mask.is_allowed(0, 1) && !mask.is_allowed(2, 1));
    }

    #[test]
    fn single_frame_full_visual_equals_fwbc() {
        let l = build_layout(1, 1, 2, 1).unwrap();
        assert_eq!(
            build_mask(MaskKind::FullVisual, &l).values(),
            build_mask(MaskKind::FwBlockCausal, &l).values()
        );
    }

    #[test]
    fn stats_examples() {
        let one_frame = build_layout(0, 1, 4, 0).unwrap();
        assert_eq!(
            mask_stats(&build_mask(MaskKind::FwBlockCausal, &one_frame)).allowed_count,
            16
        );
        let text = build_layout(5, 0, 0, 2).unwrap();
        for k in MaskKind::ALL {
            let s = mask_stats(&build_mask(k, &text));
            assert_eq!(s.allowed_count, 28);
            assert_eq!(s.per_row_allowed, vec![1, 2, 3, 4, 5, 6, 7]);
        }
    }

    proptest! {
        #[test]
        fn mask_relations(p in 0usize..5, f in 0usize..5, m in 1usize..5, s in 0usize..5) {
            let m = if f == 0 { 0 } else { m };
            prop_assume!(p + f * m + s > 0);
            let l = build_layout(p, f, m, s).unwrap();
            let t = l.len();
            let sets: Vec<Vec<bool>> = MaskKind::ALL.iter().map(|&k| allowed_set(&build_mask(k, &l))).collect();
            let (causal, full, block, fwbc) = (&sets[0], &sets[1], &sets[2], &sets[3]);
            for x in 0..t * t {
                let (i, j) = (x / t, x % t);
                prop_assert!(!causal[x] || fwbc[x]);
                prop_assert!(!fwbc[x] || full[x]);
                if fwbc[x] && !causal[x] {
                    prop_assert!(i < j && l.frame_of(i).is_some() && l.frame_of(i) == l.frame_of(j));
                }
                if l.frame_of(i).is_some() && l.frame_of(i) == l.frame_of(j) {
                    prop_assert_eq!(fwbc[x], fwbc[j * t + i]);
                }
                if i == j {
                    prop_assert!(causal[x] && full[x] && block[x] && fwbc[x]);
                }
            }
            if f == 0 {
                prop_assert!(sets.iter().all(|s| s == causal));
            }
        }
    }
}
