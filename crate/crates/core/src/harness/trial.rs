//! Training trials, gamma sweeps and ablation grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{default_rpe_bias, AttentionConfig, PeMode};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::layout::{build_layout, SequenceLayout, SuffixRule};
use crate::masks::{MaskKind, MaskOptions};
use crate::numerics::{Real, Rng};
use crate::rope;

use super::model::{ModelConfig, TinyModel};
use super::tasks::{gen_task, Example, TaskKind, VOCAB_SIZE};

/// Gamma values of the reference sweep.
pub const SWEEP_GAMMAS: [Real; 7] = [0.1, 0.3, 0.5, 0.7, 1.0, 1.5, 2.0];

/// First line of every rendered summary.
pub const REPORT_HEADER: &str = "# synthetic-task ablation: compares settings by direction of effect only; \
absolute video-benchmark scores are not reproduced at this scale";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub task: TaskKind,
    #[serde(default = "default_layout")]
    pub layout: SequenceLayout,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_pe_mode")]
    pub pe_mode: PeMode,
    #[serde(default = "default_mask_kind")]
    pub mask_kind: MaskKind,
    #[serde(default = "default_gamma")]
    pub gamma: Real,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: Real,
    #[serde(default = "default_momentum")]
    pub momentum: Real,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: Real,
    #[serde(default = "default_base")]
    pub rope_base: Real,
    /// Converged when the final loss is below this fraction of the
    /// chance-level loss `ln(num_classes)`.
    #[serde(default = "default_converge_ratio")]
    pub converge_ratio: Real,
    #[serde(default)]
    pub mask_options: MaskOptions,
    #[serde(default)]
    pub suffix_rule: SuffixRule,
    #[serde(default = "default_rpe_bias")]
    pub rpe_bias: Vec<Real>,
}

fn default_layout() -> SequenceLayout {
    build_layout(2, 4, 4, 2).expect("valid default layout")
}
fn default_pe_mode() -> PeMode {
    PeMode::RopeOnly
}
fn default_mask_kind() -> MaskKind {
    MaskKind::Causal
}
fn default_gamma() -> Real {
    rope::DEFAULT_GAMMA
}
fn default_steps() -> usize {
    500
}
fn default_lr() -> Real {
    0.1
}
fn default_momentum() -> Real {
    0.9
}
fn default_batch_size() -> usize {
    16
}
fn default_train_size() -> usize {
    1024
}
fn default_eval_size() -> usize {
    256
}
fn default_clip_norm() -> Real {
    1.0
}
fn default_base() -> Real {
    rope::DEFAULT_BASE
}
fn default_converge_ratio() -> Real {
    0.5
}

impl TrialConfig {
    /// Defaults for `task`: rotary on global ids with the causal mask.
    pub fn baseline(task: TaskKind) -> Self {
        serde_json::from_value(serde_json::json!({ "task": task })).expect("defaults deserialize")
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            num_heads: self.model.num_heads,
            d_head: self.model.d_head,
            base: self.rope_base,
            gamma: self.gamma,
            mask_kind: self.mask_kind,
            pe_mode: self.pe_mode,
            scale: None,
            mask_options: self.mask_options,
            suffix_rule: self.suffix_rule,
            rpe_bias: self.rpe_bias.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.batch_size == 0 || self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::invalid("batch_size, train_size and eval_size must be positive"));
        }
        for (name, v) in [("lr", self.lr), ("momentum", self.momentum), ("clip_norm", self.clip_norm)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        self.model.validate()?;
        self.attention().validate()
    }

    /// Stable 64-bit FNV-1a hash of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub config: TrialConfig,
    pub config_hash: String,
    /// Minibatch loss at every step; non-finite entries after a divergence.
    pub loss_curve: Vec<Real>,
    /// Mean of the last (up to) ten losses.
    pub final_loss: Real,
    pub accuracy: f64,
    /// Frequency of the most common eval label.
    pub chance: f64,
    pub converged: bool,
    pub diverged: bool,
    pub wall_ms: u64,
}

impl TrialReport {
    /// JSON with the wall-clock field zeroed, for byte-level comparisons.
    pub fn deterministic_json(&self) -> String {
        let mut r = self.clone();
        r.wall_ms = 0;
        serde_json::to_string(&r).expect("report serializes")
    }

    /// Metric fields only, formatted for bitwise comparison between runs
    /// whose configs differ in labels but not in computation.
    pub fn metrics_fingerprint(&self) -> String {
        let curve: Vec<String> = self.loss_curve.iter().map(|l| format!("{:x}", l.to_bits())).collect();
        format!(
            "{}|{:x}|{:x}|{}",
            curve.join(","),
            self.final_loss.to_bits(),
            self.accuracy.to_bits(),
            self.converged
        )
    }
}

fn data_seed(seed: u64, stream: u64) -> u64 {
    Rng::with_stream(seed, stream).next_u64()
}

/// Trains a fresh model with minibatch SGD (with momentum) and evaluates it
/// on a held-out set. Deterministic for a given config.
pub fn train_trial(config: &TrialConfig) -> Result<TrialReport> {
    config.validate()?;
    let start = Instant::now();
    let train = gen_task(config.task, &config.layout, data_seed(config.seed, 1), config.train_size)?;
    let eval = gen_task(config.task, &config.layout, data_seed(config.seed, 2), config.eval_size)?;
    let mut model = TinyModel::new(
        config.model,
        &config.layout,
        &config.attention(),
        VOCAB_SIZE,
        train.num_classes,
        data_seed(config.seed, 3),
    )?;
    let mut order_rng = Rng::with_stream(config.seed, 4);
    let mut order: Vec<usize> = (0..train.examples.len()).collect();
    order_rng.shuffle(&mut order);
    let mut cursor = 0;

    let mut velocity = vec![0.0; model.num_params()];
    let mut grad = vec![0.0; model.num_params()];
    let mut loss_curve = Vec::with_capacity(config.steps);
    let mut diverged = false;
    for _ in 0..config.steps {
        if diverged {
            loss_curve.push(Real::NAN);
            continue;
        }
        let mut batch: Vec<&Example> = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&train.examples[order[cursor]]);
            cursor += 1;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = model.loss_and_grad(&model.weights(), &batch, &mut grad)?;
        loss_curve.push(loss);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            diverged = true;
            continue;
        }
        if config.clip_norm > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<Real>().sqrt();
            if norm > config.clip_norm {
                let s = config.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
            *v = config.momentum * *v + g;
            *p -= config.lr * *v;
        }
    }

    let tail = &loss_curve[loss_curve.len().saturating_sub(10)..];
    let final_loss = tail.iter().sum::<Real>() / tail.len() as Real;
    let accuracy = if diverged {
        0.0
    } else {
        let w = model.weights();
        let correct = eval
            .examples
            .iter()
            .filter(|ex| model.predict(&w, &ex.tokens) == ex.label)
            .count();
        correct as f64 / eval.examples.len() as f64
    };
    let chance_loss = (train.num_classes as Real).ln();
    let converged = !diverged && final_loss.is_finite() && final_loss < config.converge_ratio * chance_loss;
    Ok(TrialReport {
        config: config.clone(),
        config_hash: config.config_hash(),
        loss_curve,
        final_loss,
        accuracy,
        chance: eval.majority_rate(),
        converged,
        diverged,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// One trial per gamma, all sharing the base seed and settings.
pub fn gamma_sweep(base: &TrialConfig, gammas: &[Real], exec: Execution) -> Result<Vec<TrialReport>> {
    if gammas.is_empty() {
        return Err(Error::invalid("gamma list is empty"));
    }
    let configs: Vec<TrialConfig> = gammas
        .iter()
        .map(|&gamma| TrialConfig { gamma, ..base.clone() })
        .collect();
    exec.map(&configs, train_trial).into_iter().collect()
}

const CSV_HEADER: &str = "task,pe_mode,mask_kind,gamma,seed,steps,accuracy,chance,final_loss,converged,config_hash";

fn csv_row(r: &TrialReport) -> String {
    let c = &r.config;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        c.task, c.pe_mode, c.mask_kind, c.gamma, c.seed, c.steps, r.accuracy, r.chance, r.final_loss, r.converged, r.config_hash
    )
}

/// CSV with one row per report; no wall-clock column.
pub fn sweep_csv(reports: &[TrialReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct GridReport {
    /// Keyed by config hash, so aggregation does not depend on run order.
    pub cells: BTreeMap<String, TrialReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub mask_kind: MaskKind,
    pub pe_mode: PeMode,
    pub median_accuracy: f64,
    pub mean_final_loss: Real,
    pub seeds: usize,
    pub non_converged: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskSummary {
    pub task: TaskKind,
    /// Best median accuracy first.
    pub rows: Vec<SummaryRow>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

impl GridReport {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn summary(&self) -> Vec<TaskSummary> {
        let mut groups: BTreeMap<(TaskKind, MaskKind, PeMode), Vec<&TrialReport>> = BTreeMap::new();
        for r in self.cells.values() {
            let c = &r.config;
            groups.entry((c.task, c.mask_kind, c.pe_mode)).or_default().push(r);
        }
        let mut by_task: BTreeMap<TaskKind, Vec<SummaryRow>> = BTreeMap::new();
        for ((task, mask_kind, pe_mode), reports) in groups {
            let mut acc: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
            let mean_final_loss = reports.iter().map(|r| r.final_loss).sum::<Real>() / reports.len() as Real;
            by_task.entry(task).or_default().push(SummaryRow {
                mask_kind,
                pe_mode,
                median_accuracy: median(&mut acc),
                mean_final_loss,
                seeds: reports.len(),
                non_converged: reports.iter().filter(|r| !r.converged).count(),
            });
        }
        by_task
            .into_iter()
            .map(|(task, mut rows)| {
                rows.sort_by(|a, b| {
                    b.median_accuracy
                        .total_cmp(&a.median_accuracy)
                        .then(a.mask_kind.cmp(&b.mask_kind))
                        .then(a.pe_mode.cmp(&b.pe_mode))
                });
                TaskSummary { task, rows }
            })
            .collect()
    }

    /// Plain-text ranked summary. Cells where any seed failed to converge are
    /// flagged `NOT CONVERGED (k/n)`.
    pub fn render_summary(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for ts in self.summary() {
            let _ = writeln!(out, "\n## task: {}", ts.task);
            let _ = writeln!(
                out,
                "{:<4} {:<16} {:<15} {:>8} {:>10}  status",
                "rank", "mask", "pe_mode", "median", "mean_loss"
            );
            for (i, r) in ts.rows.iter().enumerate() {
                let status = if r.non_converged == 0 {
                    "converged".to_string()
                } else {
                    format!("NOT CONVERGED ({}/{})", r.non_converged, r.seeds)
                };
                let _ = writeln!(
                    out,
                    "{:<4} {:<16} {:<15} {:>8.4} {:>10.4}  {}",
                    i + 1,
                    r.mask_kind.as_str(),
                    r.pe_mode.as_str(),
                    r.median_accuracy,
                    r.mean_final_loss,
                    status
                );
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("task,rank,mask_kind,pe_mode,median_accuracy,mean_final_loss,seeds,non_converged\n");
        for ts in self.summary() {
            for (i, r) in ts.rows.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    ts.task,
                    i + 1,
                    r.mask_kind,
                    r.pe_mode,
                    r.median_accuracy,
                    r.mean_final_loss,
                    r.seeds,
                    r.non_converged
                );
            }
        }
        out
    }

    /// Cell CSV in config-hash order.
    pub fn cells_csv(&self) -> String {
        let reports: Vec<TrialReport> = self.cells.values().cloned().collect();
        sweep_csv(&reports)
    }
}

/// Full cross product `tasks x mask_kinds x pe_modes x seeds` on top of `base`.
pub fn ablation_grid(
    base: &TrialConfig,
    tasks: &[TaskKind],
    mask_kinds: &[MaskKind],
    pe_modes: &[PeMode],
    seeds: &[u64],
    exec: Execution,
) -> Result<GridReport> {
    if tasks.is_empty() || mask_kinds.is_empty() || pe_modes.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("every grid axis needs at least one value"));
    }
    let mut configs = Vec::new();
    for &task in tasks {
        for &mask_kind in mask_kinds {
            for &pe_mode in pe_modes {
                for &seed in seeds {
                    configs.push(TrialConfig {
                        task,
                        mask_kind,
                        pe_mode,
                        seed,
                        ..base.clone()
                    });
                }
            }
        }
    }
    let reports = exec
        .map(&configs, train_trial)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(GridReport {
        cells: reports.into_iter().map(|r| (r.config_hash.clone(), r)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(task: TaskKind) -> TrialConfig {
        TrialConfig {
            steps: 20,
            train_size: 64,
            eval_size: 32,
            batch_size: 4,
            ..TrialConfig::baseline(task)
        }
    }

    #[test]
    fn steps_contract() {
        let mut c = quick(TaskKind::FrameOrder);
        c.steps = 0;
        assert!(train_trial(&c).is_err());
        c.steps = 1;
        let r = train_trial(&c).unwrap();
        assert_eq!(r.loss_curve.len(), 1);
        assert!((0.0..=1.0).contains(&r.accuracy));
    }

    #[test]
    fn trials_are_deterministic() {
        let c = TrialConfig { pe_mode: PeMode::DualRope, mask_kind: MaskKind::FwBlockCausal, ..quick(TaskKind::MovingCount) };
        let a = train_trial(&c).unwrap();
        let b = train_trial(&c).unwrap();
        assert_eq!(a.deterministic_json(), b.deterministic_json());
        assert_eq!(a.loss_curve.len(), 20);
    }

    #[test]
    fn config_json_defaults_and_hash() {
        let c: TrialConfig = serde_json::from_str(r#"{"task":"last_frame_recall","gamma":0.5}"#).unwrap();
        assert_eq!(c.steps, 500);
        assert_eq!(c.gamma, 0.5);
        assert_eq!(c.config_hash(), c.clone().config_hash());
        assert_ne!(c.config_hash(), TrialConfig { seed: 1, ..c.clone() }.config_hash());
        assert!(serde_json::from_str::<TrialConfig>(r#"{"task":"frame_order","bogus":1}"#).is_err());
        assert!(serde_json::from_str::<TrialConfig>(r#"{"task":"dance"}"#).is_err());
    }

    #[test]
    fn divergence_is_reported_not_raised() {
        let c = TrialConfig { lr: 1e30, clip_norm: 0.0, momentum: 0.0, ..quick(TaskKind::FrameOrder) };
        let r = train_trial(&c).unwrap();
        assert!(r.diverged && !r.converged);
        assert_eq!(r.loss_curve.len(), c.steps);
    }

    #[test]
    fn sweep_gamma_zero_matches_rope_only() {
        let base = TrialConfig { pe_mode: PeMode::DualRope, ..quick(TaskKind::FrameOrder) };
        let rows = gamma_sweep(&base, &[0.0, 1.0], Execution::Sequential).unwrap();
        assert_eq!(rows.len(), 2);
        let rope_only = train_trial(&TrialConfig { pe_mode: PeMode::RopeOnly, gamma: 0.0, ..base.clone() }).unwrap();
        assert_eq!(rows[0].metrics_fingerprint(), rope_only.metrics_fingerprint());
        assert_eq!(sweep_csv(&rows).lines().count(), 3);
        let par = gamma_sweep(&base, &[0.0, 1.0], Execution::Parallel).unwrap();
        assert_eq!(sweep_csv(&rows), sweep_csv(&par));
    }

    #[test]
    fn grid_cardinality_and_summary() {
        let base = TrialConfig { steps: 3, ..quick(TaskKind::FrameOrder) };
        let grid = ablation_grid(&base, &[TaskKind::FrameOrder], &MaskKind::ALL, &[PeMode::RopeOnly], &[0, 1, 2], Execution::Parallel).unwrap();
        assert_eq!(grid.len(), 12);
        let text = grid.render_summary();
        assert!(text.starts_with(REPORT_HEADER));
        assert!(text.contains("NOT CONVERGED"));
        let pe_grid = ablation_grid(&base, &[TaskKind::MovingCount], &[MaskKind::Causal], &[PeMode::TimeApe, PeMode::TimeRpe], &[0], Execution::Sequential).unwrap();
        let csv = pe_grid.summary_csv();
        assert!(csv.contains("time_ape") && csv.contains("time_rpe"));
        assert!(ablation_grid(&base, &[], &MaskKind::ALL, &[PeMode::RopeOnly], &[0], Execution::Sequential).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
