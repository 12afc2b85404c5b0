//! Masked multi-head attention with temporal-aware rotary positions.
//!
//! Per head: rotate query and key rows at their positions, score
//! `scale * Q' K'^T (+ bias) + mask`, take the masked row softmax, and mix
//! value rows. Values are never rotated. The mask and position table are
//! shared by every head.
//!
//! Position modes:
//! - `rope_only`: rotate at the global id `n`.
//! - `time_rope_only`: rotate at `gamma * I_t(n)`.
//! - `dual_rope`: rotate at `n + gamma * I_t(n)`.
//! - `time_ape`: rotate at `n`, after adding a sinusoid of `I_t(n)` to query and key rows.
//! - `time_rpe`: rotate at `n`, and add `bias[clip(I_t(i) - I_t(j))]` to the scores.
//!
//! The last two are harness-grade stand-ins for absolute and relative
//! temporal encodings. They reproduce the mechanism class, not any specific
//! published variant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::layout::{adjusted_positions_with, PositionTable, SequenceLayout, SuffixRule};
use crate::masks::{build_mask_with, AttentionMask, MaskKind, MaskOptions};
use crate::numerics::{matmul, softmax_row_into, Matrix, Real, Rng};
use crate::rope::{self, frequencies, rotate_in_place, FrequencyTable, RopeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    RopeOnly,
    TimeRopeOnly,
    DualRope,
    TimeApe,
    TimeRpe,
}

impl PeMode {
    pub const ALL: [PeMode; 5] = [
        PeMode::RopeOnly,
        PeMode::TimeRopeOnly,
        PeMode::DualRope,
        PeMode::TimeApe,
        PeMode::TimeRpe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PeMode::RopeOnly => "rope_only",
            PeMode::TimeRopeOnly => "time_rope_only",
            PeMode::DualRope => "dual_rope",
            PeMode::TimeApe => "time_ape",
            PeMode::TimeRpe => "time_rpe",
        }
    }

    /// Rotation position of each token under this mode.
    pub fn rotation_positions(self, table: &PositionTable) -> Vec<Real> {
        let gamma = table.gamma();
        match self {
            PeMode::RopeOnly | PeMode::TimeApe | PeMode::TimeRpe => {
                table.global_ids().iter().map(|&n| n as Real).collect()
            }
            PeMode::TimeRopeOnly => table
                .temporal_ids()
                .iter()
                .map(|&it| gamma * it as Real)
                .collect(),
            PeMode::DualRope => table.adjusted().to_vec(),
        }
    }
}

impl fmt::Display for PeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PeMode::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = PeMode::ALL.iter().map(|k| k.as_str()).collect();
                Error::invalid(format!(
                    "unknown pe mode {s:?}; valid modes: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Default relative temporal bias: `-0.25 * |delta|` for `|delta| <= 4`.
pub fn default_rpe_bias() -> Vec<Real> {
    (-4..=4).map(|d: i32| -0.25 * d.abs() as Real).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub d_head: usize,
    #[serde(default = "default_base")]
    pub base: Real,
    #[serde(default = "default_gamma")]
    pub gamma: Real,
    #[serde(default = "default_mask_kind")]
    pub mask_kind: MaskKind,
    #[serde(default = "default_pe_mode")]
    pub pe_mode: PeMode,
    /// Score scale; `1 / sqrt(d_head)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Real>,
    #[serde(default)]
    pub mask_options: MaskOptions,
    #[serde(default)]
    pub suffix_rule: SuffixRule,
    /// Odd-length table indexed by the clipped temporal offset, centre = 0.
    #[serde(default = "default_rpe_bias")]
    pub rpe_bias: Vec<Real>,
}

fn default_base() -> Real {
    rope::DEFAULT_BASE
}

fn default_gamma() -> Real {
    rope::DEFAULT_GAMMA
}

fn default_mask_kind() -> MaskKind {
    MaskKind::FwBlockCausal
}

fn default_pe_mode() -> PeMode {
    PeMode::DualRope
}

impl AttentionConfig {
    pub fn new(num_heads: usize, d_head: usize) -> Self {
        AttentionConfig {
            num_heads,
            d_head,
            base: rope::DEFAULT_BASE,
            gamma: rope::DEFAULT_GAMMA,
            mask_kind: default_mask_kind(),
            pe_mode: default_pe_mode(),
            scale: None,
            mask_options: MaskOptions::default(),
            suffix_rule: SuffixRule::Literal,
            rpe_bias: default_rpe_bias(),
        }
    }

    pub fn with_mask(mut self, kind: MaskKind) -> Self {
        self.mask_kind = kind;
        self
    }

    pub fn with_pe_mode(mut self, mode: PeMode) -> Self {
        self.pe_mode = mode;
        self
    }

    pub fn with_gamma(mut self, gamma: Real) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            d_head: self.d_head,
            base: self.base,
            gamma: self.gamma,
        }
    }

    pub fn effective_scale(&self) -> Real {
        self.scale
            .unwrap_or_else(|| 1.0 / (self.d_head as Real).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(Error::invalid("num_heads must be positive"));
        }
        self.rope().validate()?;
        let scale = self.effective_scale();
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("scale must be positive, got {scale}")));
        }
        if self.rpe_bias.len().is_multiple_of(2) || self.rpe_bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid(
                "rpe_bias must have odd length and finite entries",
            ));
        }
        Ok(())
    }
}

/// `[heads x T x d_head]` real tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor {
    heads: usize,
    seq_len: usize,
    d_head: usize,
    data: Vec<Real>,
}

impl HeadTensor {
    pub fn zeros(heads: usize, seq_len: usize, d_head: usize) -> Self {
        HeadTensor {
            heads,
            seq_len,
            d_head,
            data: vec![0.0; heads * seq_len * d_head],
        }
    }

    pub fn from_vec(heads: usize, seq_len: usize, d_head: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != heads * seq_len * d_head {
            return Err(Error::shape(
                "HeadTensor::from_vec",
                heads * seq_len * d_head,
                data.len(),
            ));
        }
        Ok(HeadTensor {
            heads,
            seq_len,
            d_head,
            data,
        })
    }

    pub fn random(heads: usize, seq_len: usize, d_head: usize, rng: &mut Rng) -> Self {
        let data = (0..heads * seq_len * d_head)
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect();
        HeadTensor {
            heads,
            seq_len,
            d_head,
            data,
        }
    }

    /// Stacks per-head `T x d_head` matrices.
    pub fn from_heads(heads: &[Matrix]) -> Result<Self> {
        let (t, d) = heads.first().map_or((0, 0), Matrix::shape);
        let mut data = Vec::with_capacity(heads.len() * t * d);
        for h in heads {
            if h.shape() != (t, d) {
                return Err(Error::shape(
                    "HeadTensor::from_heads",
                    format!("{t}x{d}"),
                    format!("{:?}", h.shape()),
                ));
            }
            data.extend_from_slice(h.as_slice());
        }
        HeadTensor::from_vec(heads.len(), t, d, data)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.heads, self.seq_len, self.d_head)
    }

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn head(&self, h: usize) -> &[Real] {
        let n = self.seq_len * self.d_head;
        &self.data[h * n..(h + 1) * n]
    }

    pub fn row(&self, h: usize, t: usize) -> &[Real] {
        let start = (h * self.seq_len + t) * self.d_head;
        &self.data[start..start + self.d_head]
    }

    pub fn head_matrix(&self, h: usize) -> Matrix {
        Matrix::from_vec(self.seq_len, self.d_head, self.head(h).to_vec())
            .expect("head slice has T*d values")
    }

    pub fn max_abs_diff(&self, other: &HeadTensor) -> Real {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }
}

/// Everything about a forward pass that does not depend on Q, K or V:
/// rotation positions, mask, optional additive embeddings and score bias.
#[derive(Debug, Clone)]
pub struct AttentionPlan {
    num_heads: usize,
    d_head: usize,
    scale: Real,
    freqs: FrequencyTable,
    positions: Vec<Real>,
    mask: AttentionMask,
    /// `T x d_head` sinusoid added to query and key rows (time_ape).
    input_offset: Option<Matrix>,
    /// `T x T` score bias (time_rpe).
    score_bias: Option<Matrix>,
}

impl AttentionPlan {
    pub fn new(layout: &SequenceLayout, config: &AttentionConfig) -> Result<Self> {
        config.validate()?;
        let table = adjusted_positions_with(layout, config.gamma, config.suffix_rule)?;
        let mask = build_mask_with(config.mask_kind, layout, config.mask_options);
        Self::from_parts(&table, mask, config)
    }

    /// Plan from an explicit position table, e.g. one with shifted ids.
    pub fn from_parts(
        table: &PositionTable,
        mask: AttentionMask,
        config: &AttentionConfig,
    ) -> Result<Self> {
        config.validate()?;
        if mask.size() != table.len() {
            return Err(Error::shape("AttentionPlan", table.len(), mask.size()));
        }
        if table.gamma() != config.gamma {
            return Err(Error::invalid(format!(
                "position table gamma {} differs from config gamma {}",
                table.gamma(),
                config.gamma
            )));
        }
        let freqs = frequencies(&config.rope())?;
        let t = table.len();
        let ids = table.temporal_ids();
        let input_offset = (config.pe_mode == PeMode::TimeApe).then(|| {
            let mut m = Matrix::zeros(t, config.d_head);
            for (n, &it) in ids.iter().enumerate() {
                for (pair, &theta) in m.row_mut(n).chunks_exact_mut(2).zip(freqs.thetas()) {
                    let (sin, cos) = (it as Real * theta).sin_cos();
                    pair[0] = sin;
                    pair[1] = cos;
                }
            }
            m
        });
        let score_bias = (config.pe_mode == PeMode::TimeRpe).then(|| {
            let radius = (config.rpe_bias.len() / 2) as i64;
            let mut m = Matrix::zeros(t, t);
            for i in 0..t {
                for j in 0..t {
                    let delta = (ids[i] - ids[j]).clamp(-radius, radius);
                    m.set(i, j, config.rpe_bias[(delta + radius) as usize]);
                }
            }
            m
        });
        Ok(AttentionPlan {
            num_heads: config.num_heads,
            d_head: config.d_head,
            scale: config.effective_scale(),
            positions: config.pe_mode.rotation_positions(table),
            freqs,
            mask,
            input_offset,
            score_bias,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[Real] {
        &self.positions
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    fn check(&self, name: &'static str, x: &HeadTensor) -> Result<()> {
        let expected = (self.num_heads, self.seq_len(), self.d_head);
        if x.shape() != expected {
            return Err(Error::shape(
                name,
                format!("{expected:?}"),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    fn rotated(&self, x: &HeadTensor, h: usize) -> Matrix {
        let mut m = x.head_matrix(h);
        for n in 0..self.seq_len() {
            let row = m.row_mut(n);
            if let Some(off) = &self.input_offset {
                row.iter_mut().zip(off.row(n)).for_each(|(r, o)| *r += o);
            }
            rotate_in_place(row, self.positions[n], &self.freqs);
        }
        m
    }
}

/// Per-head intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub struct HeadState {
    pub q_rot: Matrix,
    pub k_rot: Matrix,
    pub v: Matrix,
    pub weights: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardState {
    heads: Vec<HeadState>,
    positions: Vec<Real>,
    freqs: FrequencyTable,
    scale: Real,
}

impl ForwardState {
    pub fn heads(&self) -> &[HeadState] {
        &self.heads
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: HeadTensor,
    /// Attention weights, one `T x T` matrix per head.
    pub weights: Vec<Matrix>,
    pub state: ForwardState,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub grad_q: HeadTensor,
    pub grad_k: HeadTensor,
    pub grad_v: HeadTensor,
}

pub fn attention_forward(
    q: &HeadTensor,
    k: &HeadTensor,
    v: &HeadTensor,
    layout: &SequenceLayout,
    config: &AttentionConfig,
) -> Result<AttentionOutput> {
    let plan = AttentionPlan::new(layout, config)?;
    forward_with_plan(q, k, v, &plan, Execution::Sequential)
}

pub fn forward_with_plan(
    q: &HeadTensor,
    k: &HeadTensor,
    v: &HeadTensor,
    plan: &AttentionPlan,
    exec: Execution,
) -> Result<AttentionOutput> {
    plan.check("attention_forward(Q)", q)?;
    plan.check("attention_forward(K)", k)?;
    plan.check("attention_forward(V)", v)?;
    let heads = exec.map_range(plan.num_heads, |h| forward_head(q, k, v, plan, h));
    let output = HeadTensor::from_vec(
        plan.num_heads,
        plan.seq_len(),
        plan.d_head,
        heads
            .iter()
            .flat_map(|(o, _)| o.as_slice().iter().copied())
            .collect(),
    )?;
    let states: Vec<HeadState> = heads.into_iter().map(|(_, s)| s).collect();
    Ok(AttentionOutput {
        output,
        weights: states.iter().map(|s| s.weights.clone()).collect(),
        state: ForwardState {
            heads: states,
            positions: plan.positions.clone(),
            freqs: plan.freqs.clone(),
            scale: plan.scale,
        },
    })
}

fn forward_head(
    q: &HeadTensor,
    k: &HeadTensor,
    v: &HeadTensor,
    plan: &AttentionPlan,
    h: usize,
) -> (Matrix, HeadState) {
    let t = plan.seq_len();
    let q_rot = plan.rotated(q, h);
    let k_rot = plan.rotated(k, h);
    let mut scores = matmul(&q_rot, &k_rot.transpose()).expect("T x d times d x T");
    scores.scale(plan.scale);
    if let Some(bias) = &plan.score_bias {
        scores = scores.add(bias).expect("bias is T x T");
    }
    let mut weights = Matrix::zeros(t, t);
    let mask = plan.mask.values();
    for i in 0..t {
        softmax_row_into(scores.row(i), mask.row(i), weights.row_mut(i));
    }
    let v = v.head_matrix(h);
    let out = matmul(&weights, &v).expect("T x T times T x d");
    (
        out,
        HeadState {
            q_rot,
            k_rot,
            v,
            weights,
        },
    )
}

/// Exact gradients of the forward map with respect to Q, K and V. Positions,
/// mask and biases are constants.
pub fn attention_backward(state: &ForwardState, grad_output: &HeadTensor) -> Result<AttentionGrads> {
    attention_backward_with(state, grad_output, Execution::Sequential)
}

pub fn attention_backward_with(
    state: &ForwardState,
    grad_output: &HeadTensor,
    exec: Execution,
) -> Result<AttentionGrads> {
    let heads = state.heads.len();
    let (t, d) = state.heads.first().map_or((0, 0), |h| h.v.shape());
    if grad_output.shape() != (heads, t, d) {
        return Err(Error::shape(
            "attention_backward",
            format!("{:?}", (heads, t, d)),
            format!("{:?}", grad_output.shape()),
        ));
    }
    let per_head = exec.map_range(heads, |h| backward_head(state, &state.heads[h], grad_output, h));
    let (mut gq, mut gk, mut gv) = (Vec::new(), Vec::new(), Vec::new());
    for (q, k, v) in per_head {
        gq.push(q);
        gk.push(k);
        gv.push(v);
    }
    Ok(AttentionGrads {
        grad_q: HeadTensor::from_heads(&gq)?,
        grad_k: HeadTensor::from_heads(&gk)?,
        grad_v: HeadTensor::from_heads(&gv)?,
    })
}

fn backward_head(
    state: &ForwardState,
    head: &HeadState,
    grad_output: &HeadTensor,
    h: usize,
) -> (Matrix, Matrix, Matrix) {
    let d_out = grad_output.head_matrix(h);
    let w = &head.weights;
    let t = w.rows();
    let grad_v = matmul(&w.transpose(), &d_out).expect("T x T times T x d");
    let d_w = matmul(&d_out, &head.v.transpose()).expect("T x d times d x T");
    let mut d_s = Matrix::zeros(t, t);
    for i in 0..t {
        let (wr, dwr) = (w.row(i), d_w.row(i));
        let row_dot: Real = wr.iter().zip(dwr).map(|(a, b)| a * b).sum();
        for (o, (&wij, &dwij)) in d_s.row_mut(i).iter_mut().zip(wr.iter().zip(dwr)) {
            *o = state.scale * wij * (dwij - row_dot);
        }
    }
    let mut grad_q = matmul(&d_s, &head.k_rot).expect("T x T times T x d");
    let mut grad_k = matmul(&d_s.transpose(), &head.q_rot).expect("T x T times T x d");
    for n in 0..t {
        rotate_in_place(grad_q.row_mut(n), -state.positions[n], &state.freqs);
        rotate_in_place(grad_k.row_mut(n), -state.positions[n], &state.freqs);
    }
    (grad_q, grad_k, grad_v)
}

/// Scalar-loop reference for [`attention_forward`]: one [`rope::pair_score`]
/// call per allowed pair and explicit normalisation.
pub fn attention_brute_oracle(
    q: &HeadTensor,
    k: &HeadTensor,
    v: &HeadTensor,
    layout: &SequenceLayout,
    config: &AttentionConfig,
) -> Result<HeadTensor> {
    config.validate()?;
    let t = layout.len();
    let d = config.d_head;
    for x in [q, k, v] {
        if x.shape() != (config.num_heads, t, d) {
            return Err(Error::shape(
                "attention_brute_oracle",
                format!("{:?}", (config.num_heads, t, d)),
                format!("{:?}", x.shape()),
            ));
        }
    }
    let table = adjusted_positions_with(layout, config.gamma, config.suffix_rule)?;
    let freqs = frequencies(&config.rope())?;
    let scale = config.effective_scale();
    let ids = table.temporal_ids();
    let position = |n: usize| -> Real {
        let global = n as Real;
        let temporal = ids[n] as Real;
        match config.pe_mode {
            PeMode::TimeRopeOnly => config.gamma * temporal,
            PeMode::DualRope => global + config.gamma * temporal,
            _ => global,
        }
    };
    let with_offset = |row: &[Real], n: usize| -> Vec<Real> {
        if config.pe_mode != PeMode::TimeApe {
            return row.to_vec();
        }
        let mut out = row.to_vec();
        for (c, x) in out.iter_mut().enumerate() {
            let phase = ids[n] as Real * freqs.thetas()[c / 2];
            *x += if c % 2 == 0 { phase.sin() } else { phase.cos() };
        }
        out
    };
    let radius = (config.rpe_bias.len() / 2) as i64;
    let mut out = vec![0.0; config.num_heads * t * d];
    for h in 0..config.num_heads {
        for i in 0..t {
            let qi = with_offset(q.row(h, i), i);
            let mut logits: Vec<(usize, Real)> = Vec::new();
            for j in 0..t {
                if !crate::masks::allowed_with(config.mask_kind, layout, i, j, config.mask_options)? {
                    continue;
                }
                let kj = with_offset(k.row(h, j), j);
                let mut s = scale * rope::pair_score(&qi, &kj, position(i), position(j), &freqs)?;
                if config.pe_mode == PeMode::TimeRpe {
                    let delta = (ids[i] - ids[j]).max(-radius).min(radius);
                    s += config.rpe_bias[(delta + radius) as usize];
                }
                logits.push((j, s));
            }
            let max = logits.iter().map(|&(_, s)| s).fold(Real::NEG_INFINITY, Real::max);
            let z: Real = logits.iter().map(|&(_, s)| (s - max).exp()).sum();
            let dst = &mut out[(h * t + i) * d..(h * t + i + 1) * d];
            for &(j, s) in &logits {
                let p = (s - max).exp() / z;
                for (o, &vj) in dst.iter_mut().zip(v.row(h, j)) {
                    *o += p * vj;
                }
            }
        }
    }
    HeadTensor::from_vec(config.num_heads, t, d, out)
}
