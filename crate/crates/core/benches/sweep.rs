//! Sweep throughput: the same batch of independent simulations run on the
//! rayon pool and one at a time.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use shardsim::simengine::{run_all, Exec, Job, SimOptions};
use shardsim::strategy::{StrategyKind, StrategyPlan};
use shardsim::topology::{BandwidthPreset, ClusterTopology};
use shardsim::workload::{apply_lora_mask, Calibration, ModelPreset};

fn jobs() -> Vec<Job> {
    let nics = [
        BandwidthPreset::Ib100RdmaMeasured,
        BandwidthPreset::Ib100IpoibMeasured,
        BandwidthPreset::Eth10gMeasured,
        BandwidthPreset::Eth1gMeasured,
    ];
    let model = apply_lora_mask(&ModelPreset::Gpt10b.build(), 0.01).unwrap();
    let model = Calibration::Fig9Peft.apply(&model).with_batch(8);
    let mut out = Vec::new();
    for nic in nics {
        let topo = ClusterTopology::commodity(2, 8, nic).unwrap();
        for kind in StrategyKind::ALL {
            let plan = match kind {
                StrategyKind::MiCS => StrategyPlan::mics(8),
                k => StrategyPlan::new(k),
            };
            out.push(Job {
                plan: plan.with_gpu_capacity(1 << 40),
                model: model.clone(),
                topo: topo.clone(),
                iterations: 3,
                options: SimOptions::default(),
            });
        }
    }
    out
}

fn sweep(c: &mut Criterion) {
    let jobs = jobs();
    let mut group = c.benchmark_group("sweep_24_points");
    group.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let traces = run_all(&jobs, exec);
                assert!(traces.iter().all(|t| t.is_ok()));
                traces
            })
        });
    }
    group.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
