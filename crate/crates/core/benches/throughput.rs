use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use cqnn::bench::{build_dataset, label_windows, SplitSizes};
use cqnn::events::{generate_synthetic, StreamSpec};
use cqnn::exec::Execution;
use cqnn::knowledge::KnowledgeBase;
use cqnn::neuro::WeightBundle;
use cqnn::oracle::{builtin, CompiledQuery, BUILTIN_IDS};
use cqnn::windows::{windows, WindowSpec};

const WINDOWS: usize = 2000;
const STRATEGIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn fan_out(c: &mut Criterion) {
    let kb = KnowledgeBase::default_for(10).unwrap();
    let queries: Vec<(u8, CompiledQuery)> = BUILTIN_IDS
        .iter()
        .filter(|&&id| id != 6 && id != 8)
        .map(|&id| (id, CompiledQuery::new(&builtin(id).unwrap(), &kb).unwrap()))
        .collect();
    let stream = generate_synthetic(&StreamSpec::with_sectors(10, WINDOWS as u32 + 4), 1).unwrap();
    let ws = windows(&stream, &WindowSpec::canonical()).unwrap();

    let mut g = c.benchmark_group("label");
    g.throughput(Throughput::Elements(ws.len() as u64));
    for (name, exec) in STRATEGIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(label_windows(&ws, &queries, exec).unwrap()))
        });
    }
    g.finish();

    let sizes = SplitSizes {
        train: WINDOWS - 500,
        test: 500,
    };
    let mut g = c.benchmark_group("dataset");
    g.throughput(Throughput::Elements(sizes.total() as u64));
    for (name, exec) in STRATEGIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(build_dataset(&stream, &WindowSpec::canonical(), &queries, 10, sizes, exec).unwrap()))
        });
    }
    g.finish();

    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/bundles");
    let mut g = c.benchmark_group("infer");
    g.throughput(Throughput::Elements(ws.len() as u64));
    for stem in ["q1_recurrent", "q1_convolutional"] {
        let Ok(bundle) = WeightBundle::load(format!("{dir}/{stem}.json")) else {
            continue;
        };
        for (name, exec) in STRATEGIES {
            g.bench_function(BenchmarkId::new(stem, name), |b| {
                b.iter(|| black_box(exec.try_map(&ws, |w| bundle.predict(w)).unwrap()))
            });
        }
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = fan_out
}
criterion_main!(benches);
