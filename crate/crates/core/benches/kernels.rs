use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tc_attention::attention::{forward_with_plan, AttentionConfig, AttentionPlan, HeadTensor, PeMode};
use tc_attention::harness::{gamma_sweep, TaskKind, TrialConfig};
use tc_attention::layout::build_layout;
use tc_attention::masks::MaskKind;
use tc_attention::numerics::matmul_with;
use tc_attention::{Execution, Matrix, Rng};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = Rng::seeded(1);
    for n in [64, 256] {
        let a = Matrix::random(n, n, -1.0, 1.0, &mut rng);
        let b = Matrix::random(n, n, -1.0, 1.0, &mut rng);
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |bench, _| {
                bench.iter(|| matmul_with(&a, &b, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_forward");
    let layout = build_layout(16, 8, 16, 16).unwrap();
    let cfg = AttentionConfig::new(8, 64)
        .with_pe_mode(PeMode::DualRope)
        .with_mask(MaskKind::FwBlockCausal);
    let plan = AttentionPlan::new(&layout, &cfg).unwrap();
    let mut rng = Rng::seeded(2);
    let t = layout.len();
    let q = HeadTensor::random(8, t, 64, &mut rng);
    let k = HeadTensor::random(8, t, 64, &mut rng);
    let v = HeadTensor::random(8, t, 64, &mut rng);
    for (name, exec) in MODES {
        group.bench_function(name, |bench| bench.iter(|| forward_with_plan(&q, &k, &v, &plan, exec).unwrap()));
    }
    group.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("gamma_sweep");
    group.sample_size(10);
    let base = TrialConfig {
        pe_mode: PeMode::DualRope,
        mask_kind: MaskKind::FwBlockCausal,
        steps: 20,
        train_size: 128,
        eval_size: 32,
        ..TrialConfig::baseline(TaskKind::FrameOrder)
    };
    let gammas = [0.5, 1.0, 1.5, 2.0];
    for (name, exec) in MODES {
        group.bench_function(name, |bench| bench.iter(|| gamma_sweep(&base, &gammas, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_attention, bench_sweep);
criterion_main!(benches);
