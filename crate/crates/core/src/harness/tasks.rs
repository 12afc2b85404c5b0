//! Synthetic frame-dependent classification tasks.
//!
//! Text and visual tokens share one vocabulary; a token's role comes only
//! from its position in the layout. Prefix tokens are `BOS`, a task token and
//! fixed filler text. Suffix tokens are fixed filler text ending in `QUERY`.
//! The model reads its answer off the last token.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::SequenceLayout;
use crate::numerics::Rng;

pub const BOS: usize = 0;
pub const QUERY: usize = 1;
pub const TEXT_BASE: usize = 2;
pub const TEXT_COUNT: usize = 8;
pub const MARKER: usize = TEXT_BASE + TEXT_COUNT;
pub const FILLER_BASE: usize = MARKER + 1;
pub const FILLER_COUNT: usize = 8;
pub const TARGET_BASE: usize = FILLER_BASE + FILLER_COUNT;
pub const TARGET_COUNT: usize = 8;
pub const VOCAB_SIZE: usize = TARGET_BASE + TARGET_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Label: index of the earliest frame holding a marker.
    FrameOrder,
    /// Label: number of frames holding at least one marker (a frame may hold two).
    MovingCount,
    /// Label: which target symbol appears in the final frame; every frame shows
    /// a different target.
    LastFrameRecall,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::FrameOrder,
        TaskKind::MovingCount,
        TaskKind::LastFrameRecall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::FrameOrder => "frame_order",
            TaskKind::MovingCount => "moving_count",
            TaskKind::LastFrameRecall => "last_frame_recall",
        }
    }

    pub fn num_classes(self, layout: &SequenceLayout) -> usize {
        match self {
            TaskKind::FrameOrder => layout.num_frames().max(1),
            TaskKind::MovingCount => layout.num_frames() + 1,
            TaskKind::LastFrameRecall => TARGET_COUNT,
        }
    }

    fn task_token(self) -> usize {
        TEXT_BASE + self as usize
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task {s:?}; valid tasks: frame_order, moving_count, last_frame_recall")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub task: TaskKind,
    pub layout: SequenceLayout,
    pub num_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    /// One line per example: space separated tokens, then `-> label`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            let toks: Vec<String> = ex.tokens.iter().map(usize::to_string).collect();
            out.push_str(&toks.join(" "));
            out.push_str(&format!(" -> {}\n", ex.label));
        }
        out
    }

    /// Empirical frequency of the most common label.
    pub fn majority_rate(&self) -> f64 {
        let mut counts = vec![0usize; self.num_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        let max = counts.into_iter().max().unwrap_or(0);
        max as f64 / self.examples.len().max(1) as f64
    }
}

/// Deterministic dataset of `count` examples.
pub fn gen_task(task: TaskKind, layout: &SequenceLayout, seed: u64, count: usize) -> Result<Dataset> {
    let frames = layout.num_frames();
    let m = layout.tokens_per_frame();
    if frames == 0 {
        return Err(Error::invalid(format!(
            "task {task} needs a non-empty visual span"
        )));
    }
    if task == TaskKind::LastFrameRecall && frames > TARGET_COUNT {
        return Err(Error::invalid(format!(
            "last_frame_recall supports at most {TARGET_COUNT} frames, got {frames}"
        )));
    }
    let mut rng = Rng::seeded(seed);
    let text_prefix: Vec<usize> = (0..layout.prefix_len())
        .map(|i| match i {
            0 => BOS,
            1 => task.task_token(),
            _ => TEXT_BASE + i % TEXT_COUNT,
        })
        .collect();
    let text_suffix: Vec<usize> = (0..layout.suffix_len())
        .map(|i| {
            if i + 1 == layout.suffix_len() {
                QUERY
            } else {
                TEXT_BASE + (i + 3) % TEXT_COUNT
            }
        })
        .collect();

    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut visual: Vec<usize> = (0..frames * m)
            .map(|_| FILLER_BASE + rng.below(FILLER_COUNT))
            .collect();
        let label = match task {
            TaskKind::FrameOrder => {
                let first = rng.below(frames);
                for f in first..frames {
                    if f == first || rng.bernoulli(0.5) {
                        visual[f * m + rng.below(m)] = MARKER;
                    }
                }
                first
            }
            TaskKind::MovingCount => {
                let k = rng.below(frames + 1);
                let mut order: Vec<usize> = (0..frames).collect();
                rng.shuffle(&mut order);
                for &f in &order[..k] {
                    let mut slots: Vec<usize> = (0..m).collect();
                    rng.shuffle(&mut slots);
                    let markers = if m >= 2 && rng.bernoulli(0.5) { 2 } else { 1 };
                    for &s in &slots[..markers] {
                        visual[f * m + s] = MARKER;
                    }
                }
                k
            }
            TaskKind::LastFrameRecall => {
                let mut targets: Vec<usize> = (0..TARGET_COUNT).collect();
                rng.shuffle(&mut targets);
                for (f, &t) in targets[..frames].iter().enumerate() {
                    visual[f * m + rng.below(m)] = TARGET_BASE + t;
                }
                targets[frames - 1]
            }
        };
        let mut tokens = text_prefix.clone();
        tokens.extend(visual);
        tokens.extend(&text_suffix);
        examples.push(Example { tokens, label });
    }
    Ok(Dataset {
        task,
        layout: *layout,
        num_classes: task.num_classes(layout),
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::build_layout;

    fn frames_with_marker(ex: &Example, layout: &SequenceLayout) -> Vec<usize> {
        (0..layout.num_frames())
            .filter(|&f| layout.frame_range(f).any(|n| ex.tokens[n] == MARKER))
            .collect()
    }

    #[test]
    fn labels_follow_definitions() {
        let layout = build_layout(2, 4, 4, 2).unwrap();
        let order = gen_task(TaskKind::FrameOrder, &layout, 1, 200).unwrap();
        for ex in &order.examples {
            assert_eq!(ex.tokens.len(), layout.len());
            assert_eq!(frames_with_marker(ex, &layout)[0], ex.label);
            assert_eq!(*ex.tokens.last().unwrap(), QUERY);
        }
        let count = gen_task(TaskKind::MovingCount, &layout, 2, 200).unwrap();
        for ex in &count.examples {
            assert_eq!(frames_with_marker(ex, &layout).len(), ex.label);
        }
        assert!(count.examples.iter().any(|e| e.label == 0));
        let recall = gen_task(TaskKind::LastFrameRecall, &layout, 3, 200).unwrap();
        for ex in &recall.examples {
            let last: Vec<usize> = layout.frame_range(3).map(|n| ex.tokens[n]).filter(|&t| t >= TARGET_BASE).collect();
            assert_eq!(last, vec![TARGET_BASE + ex.label]);
            let earlier = (0..3).flat_map(|f| layout.frame_range(f)).filter(|&n| ex.tokens[n] == TARGET_BASE + ex.label).count();
            assert_eq!(earlier, 0);
        }
    }

    #[test]
    fn single_frame_order_is_always_zero() {
        let layout = build_layout(1, 1, 3, 1).unwrap();
        let d = gen_task(TaskKind::FrameOrder, &layout, 9, 50).unwrap();
        assert!(d.examples.iter().all(|e| e.label == 0));
    }

    #[test]
    fn rejects_missing_video() {
        let layout = build_layout(4, 0, 0, 1).unwrap();
        for task in TaskKind::ALL {
            assert!(gen_task(task, &layout, 0, 1).is_err());
        }
        let long = build_layout(0, 9, 1, 1).unwrap();
        assert!(gen_task(TaskKind::LastFrameRecall, &long, 0, 1).is_err());
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let layout = build_layout(2, 4, 4, 2).unwrap();
        for task in TaskKind::ALL {
            let a = gen_task(task, &layout, 42, 32).unwrap();
            let b = gen_task(task, &layout, 42, 32).unwrap();
            assert_eq!(a.to_text(), b.to_text());
            assert_ne!(a.to_text(), gen_task(task, &layout, 43, 32).unwrap().to_text());
        }
    }
}
