use std::fs;
use std::path::PathBuf;

use tc_attention::attention::PeMode;
use tc_attention::harness::{ablation_grid, gen_task, median, train_trial, TaskKind, TrialConfig};
use tc_attention::layout::build_layout;
use tc_attention::masks::MaskKind;
use tc_attention::{Execution, Real};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Compares against a stored fixture; `TCATTN_BLESS=1` rewrites it instead.
fn assert_golden(name: &str, actual: &str) {
    let path = fixture(name);
    if std::env::var_os("TCATTN_BLESS").is_some() {
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} differs from golden");
}

#[test]
fn datasets_match_seed_42_golden() {
    let layout = build_layout(2, 4, 4, 2).unwrap();
    for task in TaskKind::ALL {
        let a = gen_task(task, &layout, 42, 32).unwrap().to_text();
        let b = gen_task(task, &layout, 42, 32).unwrap().to_text();
        assert_eq!(a, b);
        assert_golden(&format!("{task}_seed42_f4_m4.txt"), &a);
    }
}

#[test]
fn frame_tasks_reject_text_only_layouts() {
    let layout = build_layout(6, 0, 0, 2).unwrap();
    for task in TaskKind::ALL {
        assert!(gen_task(task, &layout, 0, 4).is_err(), "{task}");
    }
}

#[test]
fn steps_contract() {
    let zero = TrialConfig { steps: 0, ..TrialConfig::baseline(TaskKind::FrameOrder) };
    assert!(train_trial(&zero).is_err());
    let one = TrialConfig { steps: 1, ..TrialConfig::baseline(TaskKind::FrameOrder) };
    assert_eq!(train_trial(&one).unwrap().loss_curve.len(), 1);
}

#[test]
fn identical_configs_give_identical_reports() {
    let cfg = TrialConfig {
        steps: 30,
        pe_mode: PeMode::TimeRpe,
        mask_kind: MaskKind::FwBlock,
        ..TrialConfig::baseline(TaskKind::MovingCount)
    };
    let a = train_trial(&cfg).unwrap();
    let b = train_trial(&cfg).unwrap();
    assert_eq!(a.deterministic_json(), b.deterministic_json());
}

#[test]
fn divergence_is_reported_not_raised() {
    let cfg = TrialConfig {
        steps: 50,
        lr: 1e6,
        clip_norm: 0.0,
        ..TrialConfig::baseline(TaskKind::FrameOrder)
    };
    let r = train_trial(&cfg).unwrap();
    assert!(r.diverged);
    assert!(!r.converged);
    assert_eq!(r.loss_curve.len(), 50);
}

#[test]
fn baseline_loss_decreases_over_first_50_steps() {
    for task in TaskKind::ALL {
        let mut drops: Vec<f64> = (0..5)
            .map(|seed| {
                let cfg = TrialConfig { steps: 50, seed, ..TrialConfig::baseline(task) };
                let curve = train_trial(&cfg).unwrap().loss_curve;
                let early: Real = curve[..5].iter().sum::<Real>() / 5.0;
                let late: Real = curve[45..].iter().sum::<Real>() / 5.0;
                (early - late) as f64
            })
            .collect();
        let m = median(&mut drops);
        assert!(m > 0.0, "{task}: median loss drop {m}");
    }
}

#[test]
fn grid_cardinality_and_coverage() {
    let base = TrialConfig {
        steps: 5,
        train_size: 32,
        eval_size: 16,
        ..TrialConfig::baseline(TaskKind::FrameOrder)
    };
    let grid = ablation_grid(&base, &[TaskKind::FrameOrder], &MaskKind::ALL, &[PeMode::RopeOnly], &[0, 1, 2], Execution::best_available())
        .unwrap();
    assert_eq!(grid.len(), 12);

    let grid = ablation_grid(&base, &[TaskKind::FrameOrder], &[MaskKind::Causal], &PeMode::ALL, &[0], Execution::best_available())
        .unwrap();
    let text = grid.render_summary();
    assert!(text.contains("time_ape") && text.contains("time_rpe"));
    // Five steps cannot converge, and the summary must say so.
    assert!(text.contains("NOT CONVERGED (1/1)"));

    assert!(ablation_grid(&base, &[], &[MaskKind::Causal], &[PeMode::RopeOnly], &[0], Execution::Sequential).is_err());
}

/// Baseline on last_frame_recall with T = 30 and 500 steps; the measured
/// numbers are stored as the golden baseline.
#[cfg(not(feature = "f32"))]
#[test]
fn last_frame_recall_baseline_golden() {
    let cfg = TrialConfig {
        layout: build_layout(2, 6, 4, 4).unwrap(),
        steps: 500,
        ..TrialConfig::baseline(TaskKind::LastFrameRecall)
    };
    assert_eq!(cfg.layout.len(), 30);
    let r = train_trial(&cfg).unwrap();
    assert!(r.accuracy > r.chance, "accuracy {} vs chance {}", r.accuracy, r.chance);
    let summary = serde_json::json!({
        "config_hash": r.config_hash,
        "accuracy": r.accuracy,
        "chance": r.chance,
        "final_loss": r.final_loss,
        "converged": r.converged,
    });
    assert_golden("last_frame_recall_baseline.json", &format!("{}\n", serde_json::to_string_pretty(&summary).unwrap()));
}
