//! Fixtures for the criterion benchmarks under `benches/`.

use wmapf_core::framework::{run_episode_in, Limits, SsCbsGenerator};
use wmapf_core::heuristics::distance_fields;
use wmapf_core::scenarios::{generate, random_32_map, random_tasks, ScenarioKind};
use wmapf_core::sscbs::AgentPriorities;
use wmapf_core::{Configuration, DistanceField, Instance, PenaltyStore};

/// One planning call's inputs.
pub struct Fixture {
    pub name: String,
    pub instance: Instance,
    pub fields: Vec<DistanceField>,
    pub store: PenaltyStore,
    pub current: Configuration,
}

/// Random 32x32 map at its starts with an empty store.
pub fn open_map(n: usize, seed: u64) -> Fixture {
    let map = random_32_map(seed);
    let tasks = random_tasks(&map, n, 100 + seed).expect("enough free cells");
    let instance = Instance::new(map, tasks).expect("valid instance");
    let fields = distance_fields(&instance.map, &instance.tasks).expect("connected map");
    let current = instance.starts();
    Fixture { name: format!("random32-n{n}"), instance, fields, store: PenaltyStore::new(), current }
}

/// A congested scenario after `steps` executed SS-CBS steps, so the store
/// holds what was learned so far and `current` is mid-episode.
pub fn warmed(kind: ScenarioKind, n: usize, steps: usize) -> Fixture {
    let s = generate(kind, n, 0).expect("scenario");
    let instance = s.instance;
    let fields = distance_fields(&instance.map, &instance.tasks).expect("connected map");
    let mut store = PenaltyStore::new();
    let current = {
        let mut ag = SsCbsGenerator::new(&instance, &fields, AgentPriorities::none(n), 1.0);
        let limits = Limits { iteration_cap: Some(steps), ..Limits::default() };
        run_episode_in(&instance, &fields, &mut ag, &limits, &mut store).0.final_config
    };
    Fixture { name: format!("{kind}-n{n}-after{steps}"), instance, fields, store, current }
}
