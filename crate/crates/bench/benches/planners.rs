use criterion::{black_box, criterion_group, criterion_main, Criterion};

use wmapf_bench::{open_map, warmed, Fixture};
use wmapf_core::framework::{run_episode, Limits, SsCbsGenerator};
use wmapf_core::scenarios::ScenarioKind;
use wmapf_core::sscbs::{plan_step, AgentPriorities, SsCbsOptions};
use wmapf_core::wcbs::{plan_window, WcbsOptions};

fn step(c: &mut Criterion) {
    let fixtures = [open_map(10, 0), open_map(30, 0), warmed(ScenarioKind::Tunnel, 3, 40), warmed(ScenarioKind::Loopchain, 6, 40)];
    let mut g = c.benchmark_group("plan_step");
    for f in &fixtures {
        let Fixture { instance: inst, fields, store, current, .. } = f;
        let pri = AgentPriorities::none(inst.num_agents());
        g.bench_function(&f.name, |b| {
            b.iter(|| plan_step(&inst.map, &inst.tasks, black_box(current), store, fields, &pri, &SsCbsOptions::default()).unwrap())
        });
    }
    g.finish();
}

fn window(c: &mut Criterion) {
    let f = open_map(20, 1);
    let mut g = c.benchmark_group("plan_window");
    for w in [1, 4, 16] {
        g.bench_function(format!("{}-w{w}", f.name), |b| {
            b.iter(|| plan_window(&f.instance.map, &f.instance.tasks, black_box(&f.current), w, &f.fields, &WcbsOptions::default()).unwrap())
        });
    }
    g.finish();
}

fn episode(c: &mut Criterion) {
    let f = warmed(ScenarioKind::CorridorSwap, 2, 0);
    let inst = &f.instance;
    let mut g = c.benchmark_group("episode");
    g.sample_size(10);
    g.bench_function("sscbs-corridor-swap-n2", |b| {
        b.iter(|| {
            let mut ag = SsCbsGenerator::new(inst, &f.fields, AgentPriorities::none(2), 1.0);
            run_episode(inst, &f.fields, &mut ag, &Limits { iteration_cap: Some(usize::MAX), ..Limits::default() })
        })
    });
    g.finish();
}

criterion_group!(benches, step, window, episode);
criterion_main!(benches);
