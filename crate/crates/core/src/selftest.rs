//! Invariant suite run by `tcattn selftest`. Every check is seeded, so the
//! printed report is identical from run to run.

use std::fmt;

use crate::attention::{
    attention_brute_oracle, attention_forward, forward_with_plan, AttentionConfig, AttentionPlan,
    HeadTensor, PeMode,
};
use crate::exec::Execution;
use crate::gradcheck::check_all_modes;
use crate::harness::model::check_model_gradients;
use crate::harness::tasks::{gen_task, TaskKind};
use crate::layout::{adjusted_positions, build_layout, temporal_ids, SequenceLayout};
use crate::masks::{allowed, build_mask, MaskKind};
use crate::numerics::{masked_row_softmax, matmul, Matrix, Real, Rng};
use crate::rope::{apply_rotary, frequencies, pair_score, rotary_oracle, RopeConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Random valid layout with at most `max_len` tokens.
pub fn random_layout(rng: &mut Rng, max_len: usize) -> SequenceLayout {
    loop {
        let frames = rng.below(6);
        let per_frame = if frames == 0 { 0 } else { 1 + rng.below(6) };
        let prefix = rng.below(8);
        let suffix = rng.below(8);
        let t = prefix + frames * per_frame + suffix;
        if (1..=max_len).contains(&t) {
            return build_layout(prefix, frames, per_frame, suffix).expect("counts are consistent");
        }
    }
}

type Check = fn() -> Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("softmax_row_stochastic", softmax_row_stochastic),
    ("matmul_associative", matmul_associative),
    ("temporal_ids_branches", temporal_ids_branches),
    ("rope_oracle_equivalence", rope_oracle_equivalence),
    ("rope_isometry_and_composition", rope_isometry_and_composition),
    ("pair_score_relative", pair_score_relative),
    ("mask_predicate_and_chain", mask_predicate_and_chain),
    ("zero_frame_masks_are_causal", zero_frame_masks_are_causal),
    ("dual_rope_gamma_zero", dual_rope_gamma_zero),
    ("joint_shift_invariance", joint_shift_invariance),
    ("brute_oracle_equivalence", brute_oracle_equivalence),
    ("attention_gradients", attention_gradients),
    ("model_gradients", model_gradients),
    ("task_determinism", task_determinism),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check in order.
pub fn run() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, check)| match check() {
            Ok(detail) => CheckOutcome { name, passed: true, detail },
            Err(detail) => CheckOutcome { name, passed: false, detail },
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn softmax_row_stochastic() -> Result<String, String> {
    let mut rng = Rng::seeded(1);
    let mut worst: Real = 0.0;
    for _ in 0..200 {
        let (r, c) = (1 + rng.below(6), 1 + rng.below(12));
        let s = Matrix::random(r, c, -30.0, 30.0, &mut rng);
        let data = (0..r * c)
            .map(|_| if rng.bernoulli(0.3) { Real::NEG_INFINITY } else { 0.0 })
            .collect();
        let mask = Matrix::from_vec(r, c, data).map_err(|e| e.to_string())?;
        let w = masked_row_softmax(&s, &mask).map_err(|e| e.to_string())?;
        for i in 0..r {
            let any = mask.row(i).contains(&0.0);
            let sum: Real = w.row(i).iter().sum();
            let err = if any { (sum - 1.0).abs() } else { sum.abs() };
            worst = worst.max(err);
            for j in 0..c {
                ensure(mask.get(i, j) == 0.0 || w.get(i, j) == 0.0, || format!("masked entry ({i},{j}) nonzero"))?;
            }
        }
    }
    ensure(worst < 1e-12, || format!("row sum error {worst:e}"))?;
    Ok(format!("max row-sum error {worst:.3e}"))
}

fn matmul_associative() -> Result<String, String> {
    let mut rng = Rng::seeded(2);
    let mut worst: Real = 0.0;
    for _ in 0..100 {
        let dims: Vec<usize> = (0..4).map(|_| 1 + rng.below(8)).collect();
        let a = Matrix::random(dims[0], dims[1], -1.0, 1.0, &mut rng);
        let b = Matrix::random(dims[1], dims[2], -1.0, 1.0, &mut rng);
        let c = Matrix::random(dims[2], dims[3], -1.0, 1.0, &mut rng);
        let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = l.as_slice().iter().fold(1.0 as Real, |m, x| m.max(x.abs()));
        worst = worst.max(l.max_abs_diff(&r) / scale);
    }
    ensure(worst < 1e-9, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.3e}"))
}

fn temporal_ids_branches() -> Result<String, String> {
    let mut rng = Rng::seeded(3);
    for case in 0..500 {
        let l = random_layout(&mut rng, 64);
        let ids = temporal_ids(&l);
        for (n, &got) in ids.iter().enumerate() {
            let n_i = n as i64;
            let expected = match l.visual_span() {
                None => n_i,
                Some((vs, ve)) => {
                    let (vs, ve, m) = (vs as i64, ve as i64, l.tokens_per_frame() as i64);
                    if n_i < vs {
                        n_i
                    } else if n_i <= ve {
                        vs + (n_i - vs) / m
                    } else {
                        n_i - (ve - vs + 1 - (ve - vs) / m)
                    }
                }
            };
            ensure(got == expected, || format!("case {case} token {n}: {got} != {expected}"))?;
        }
    }
    Ok("500 layouts exact".into())
}

fn rope_oracle_equivalence() -> Result<String, String> {
    let mut rng = Rng::seeded(4);
    let mut worst: Real = 0.0;
    for i in 0..1000 {
        let d = [2, 8, 64, 128][i % 4];
        let f = frequencies(&RopeConfig::new(d)).map_err(|e| e.to_string())?;
        let v: Vec<Real> = (0..d).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let p = rng.uniform(-200.0, 200.0);
        let a = apply_rotary(&v, p, &f).unwrap();
        let b = rotary_oracle(&v, p, &f).unwrap();
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, Real::max);
    }
    let tol = if cfg!(feature = "f32") { 1e-5 } else { 1e-12 };
    ensure(worst < tol, || format!("max abs error {worst:e}"))?;
    Ok(format!("max abs error {worst:.3e}"))
}

fn rope_isometry_and_composition() -> Result<String, String> {
    let mut rng = Rng::seeded(5);
    let f = frequencies(&RopeConfig::new(16)).unwrap();
    let mut worst: Real = 0.0;
    for _ in 0..200 {
        let v: Vec<Real> = (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (a, b) = (rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0));
        let r = apply_rotary(&v, a, &f).unwrap();
        let norm = |x: &[Real]| x.iter().map(|y| y * y).sum::<Real>().sqrt();
        worst = worst.max((norm(&r) - norm(&v)).abs());
        let twice = apply_rotary(&r, b, &f).unwrap();
        let once = apply_rotary(&v, a + b, &f).unwrap();
        worst = twice.iter().zip(&once).map(|(x, y)| (x - y).abs()).fold(worst, Real::max);
    }
    ensure(worst < 1e-12, || format!("error {worst:e}"))?;
    Ok(format!("max error {worst:.3e}"))
}

fn pair_score_relative() -> Result<String, String> {
    let mut rng = Rng::seeded(6);
    let f = frequencies(&RopeConfig::new(8)).unwrap();
    let mut worst: Real = 0.0;
    for _ in 0..200 {
        let q: Vec<Real> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let k: Vec<Real> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (pq, pk, s) = (rng.uniform(-40.0, 40.0), rng.uniform(-40.0, 40.0), rng.uniform(-500.0, 500.0));
        let a = pair_score(&q, &k, pq, pk, &f).unwrap();
        let b = pair_score(&q, &k, pq + s, pk + s, &f).unwrap();
        worst = worst.max((a - b).abs());
    }
    ensure(worst < 1e-9, || format!("error {worst:e}"))?;
    Ok(format!("max shift error {worst:.3e}"))
}

fn mask_predicate_and_chain() -> Result<String, String> {
    let mut rng = Rng::seeded(7);
    for case in 0..100 {
        let l = random_layout(&mut rng, 32);
        let masks: Vec<_> = MaskKind::ALL.iter().map(|&k| build_mask(k, &l)).collect();
        for (kind, mask) in MaskKind::ALL.iter().zip(&masks) {
            for i in 0..l.len() {
                for j in 0..l.len() {
                    let pred = allowed(*kind, &l, i, j).map_err(|e| e.to_string())?;
                    ensure(pred == mask.is_allowed(i, j), || format!("case {case} {kind} ({i},{j})"))?;
                }
            }
        }
        let (causal, full, fwbc) = (&masks[0], &masks[1], &masks[3]);
        for i in 0..l.len() {
            for j in 0..l.len() {
                ensure(!causal.is_allowed(i, j) || fwbc.is_allowed(i, j), || format!("case {case}: causal not within fwbc at ({i},{j})"))?;
                ensure(!fwbc.is_allowed(i, j) || full.is_allowed(i, j), || format!("case {case}: fwbc not within full_visual at ({i},{j})"))?;
            }
        }
    }
    Ok("100 layouts exhaustive".into())
}

fn zero_frame_masks_are_causal() -> Result<String, String> {
    let mut rng = Rng::seeded(8);
    for _ in 0..50 {
        let l = build_layout(1 + rng.below(10), 0, 0, rng.below(10)).unwrap();
        let causal = build_mask(MaskKind::Causal, &l);
        for k in MaskKind::ALL {
            ensure(build_mask(k, &l).values() == causal.values(), || format!("{k} differs on {l:?}"))?;
        }
    }
    Ok("50 text-only layouts".into())
}

fn random_qkv(rng: &mut Rng, heads: usize, t: usize, d: usize) -> (HeadTensor, HeadTensor, HeadTensor) {
    (
        HeadTensor::random(heads, t, d, rng),
        HeadTensor::random(heads, t, d, rng),
        HeadTensor::random(heads, t, d, rng),
    )
}

fn dual_rope_gamma_zero() -> Result<String, String> {
    let mut rng = Rng::seeded(9);
    let mut worst: Real = 0.0;
    for _ in 0..30 {
        let l = random_layout(&mut rng, 16);
        let (q, k, v) = random_qkv(&mut rng, 2, l.len(), 4);
        let kind = MaskKind::ALL[rng.below(4)];
        let base = AttentionConfig::new(2, 4).with_mask(kind).with_gamma(0.0);
        let a = attention_forward(&q, &k, &v, &l, &base.clone().with_pe_mode(PeMode::DualRope)).unwrap();
        let b = attention_forward(&q, &k, &v, &l, &base.with_pe_mode(PeMode::RopeOnly)).unwrap();
        worst = worst.max(a.output.max_abs_diff(&b.output));
    }
    ensure(worst <= 1e-12, || format!("difference {worst:e}"))?;
    Ok(format!("max difference {worst:.3e}"))
}

fn joint_shift_invariance() -> Result<String, String> {
    let mut rng = Rng::seeded(10);
    let mut worst: Real = 0.0;
    for _ in 0..30 {
        let l = random_layout(&mut rng, 16);
        let gamma = rng.uniform(0.0, 2.0);
        let cfg = AttentionConfig::new(2, 8)
            .with_mask(MaskKind::ALL[rng.below(4)])
            .with_pe_mode([PeMode::RopeOnly, PeMode::TimeRopeOnly, PeMode::DualRope, PeMode::TimeRpe][rng.below(4)])
            .with_gamma(gamma);
        let table = adjusted_positions(&l, gamma).unwrap();
        let shifted = table.shifted(rng.below(1000) as i64 - 500, rng.below(200) as i64 - 100).unwrap();
        let (q, k, v) = random_qkv(&mut rng, 2, l.len(), 8);
        let p0 = AttentionPlan::from_parts(&table, build_mask(cfg.mask_kind, &l), &cfg).unwrap();
        let p1 = AttentionPlan::from_parts(&shifted, build_mask(cfg.mask_kind, &l), &cfg).unwrap();
        let a = forward_with_plan(&q, &k, &v, &p0, Execution::Sequential).unwrap();
        let b = forward_with_plan(&q, &k, &v, &p1, Execution::Sequential).unwrap();
        worst = worst.max(a.output.max_abs_diff(&b.output));
    }
    ensure(worst < 1e-9, || format!("difference {worst:e}"))?;
    Ok(format!("max difference {worst:.3e}"))
}

fn brute_oracle_equivalence() -> Result<String, String> {
    let mut rng = Rng::seeded(11);
    let mut worst: Real = 0.0;
    for _ in 0..50 {
        let l = random_layout(&mut rng, 16);
        let cfg = AttentionConfig::new(1 + rng.below(3), 2 * (1 + rng.below(4)))
            .with_mask(MaskKind::ALL[rng.below(4)])
            .with_pe_mode(PeMode::ALL[rng.below(5)])
            .with_gamma(rng.uniform(0.0, 2.0));
        let (q, k, v) = random_qkv(&mut rng, cfg.num_heads, l.len(), cfg.d_head);
        let a = attention_forward(&q, &k, &v, &l, &cfg).unwrap();
        let b = attention_brute_oracle(&q, &k, &v, &l, &cfg).unwrap();
        worst = worst.max(a.output.max_abs_diff(&b));
    }
    ensure(worst < 1e-10, || format!("difference {worst:e}"))?;
    Ok(format!("max difference {worst:.3e}"))
}

fn attention_gradients() -> Result<String, String> {
    let l = build_layout(1, 2, 3, 1).unwrap();
    let reports = check_all_modes(&l, 2, 4, 1.0, 12).map_err(|e| e.to_string())?;
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, Real::max);
    if let Some(bad) = reports.iter().find(|r| !r.passes(1e-4)) {
        return Err(format!("{} at {}: {:e}", bad.label, bad.worst, bad.max_rel_error));
    }
    Ok(format!("{} mode/mask pairs, max relative error {worst:.3e}", reports.len()))
}

fn model_gradients() -> Result<String, String> {
    let r = check_model_gradients(13).map_err(|e| e.to_string())?;
    ensure(r.passes(1e-3), || format!("{} at {}: {:e}", r.label, r.worst, r.max_rel_error))?;
    Ok(format!("{} parameters, max relative error {:.3e}", r.checked, r.max_rel_error))
}

fn task_determinism() -> Result<String, String> {
    let l = build_layout(2, 4, 4, 2).unwrap();
    for task in TaskKind::ALL {
        let a = gen_task(task, &l, 42, 16).map_err(|e| e.to_string())?;
        let b = gen_task(task, &l, 42, 16).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{task} differs between runs"))?;
    }
    Ok("3 tasks".into())
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_and_are_repeatable() {
        let a = run();
        for o in &a {
            assert!(o.passed, "{o}");
        }
        assert_eq!(a, run());
        assert_eq!(check_names().len(), a.len());
    }
}
