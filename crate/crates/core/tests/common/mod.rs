#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wmapf_core::heuristics::{distance_fields, match_penalties};
use wmapf_core::model::{joint_cost, step_cost};
use wmapf_core::scenarios::random_instance;
use wmapf_core::sscbs::low_level_best_move;
use wmapf_core::{AgentId, AgentTask, Configuration, Cost, DistanceField, GridMap, GroupConfiguration, Instance, Location, PenaltyStore};

pub fn loc(r: u32, c: u32) -> Location {
    Location::new(r, c)
}

/// Two agents swapping through a 1x4 row with a single pocket above the
/// second cell:
///
/// ```text
///   @ . @ @
///   A B C D
/// ```
///
/// Agent 0 goes A to D, agent 1 goes D to A. Two learned penalties punish
/// agent 0 at B or A while agent 1 sits at C.
pub struct PocketSwap {
    pub instance: Instance,
    pub fields: Vec<DistanceField>,
    pub store: PenaltyStore,
}

pub const POCKET_A: Location = Location { row: 1, col: 0 };
pub const POCKET_B: Location = Location { row: 1, col: 1 };
pub const POCKET_C: Location = Location { row: 1, col: 2 };
pub const POCKET_D: Location = Location { row: 1, col: 3 };

pub fn pocket_swap() -> PocketSwap {
    let map = GridMap::from_rows(&["@.@@", "...."]).unwrap();
    let tasks = vec![AgentTask { id: 0, start: POCKET_A, goal: POCKET_D }, AgentTask { id: 1, start: POCKET_D, goal: POCKET_A }];
    let fields = distance_fields(&map, &tasks).unwrap();
    let mut store = PenaltyStore::new();
    store.upsert(GroupConfiguration::new(vec![(0, POCKET_B), (1, POCKET_C)]), 50);
    store.upsert(GroupConfiguration::new(vec![(0, POCKET_A), (1, POCKET_C)]), 20);
    PocketSwap { instance: Instance::new(map, tasks).unwrap(), fields, store }
}

fn h_of(config: &Configuration, fields: &[DistanceField], store: &PenaltyStore) -> Cost {
    wmapf_core::heuristics::evaluate_h(config, fields, store).unwrap()
}

/// Naive high level: every agent takes its penalty-blind best move and the
/// penalties are only added when the resulting node is scored. Returns the
/// chosen step and its `h`. Panics if the independent moves collide, which
/// never happens on the instances it is used for.
pub fn naive_high_level_step(map: &GridMap, tasks: &[AgentTask], current: &Configuration, store: &PenaltyStore, fields: &[DistanceField]) -> (Configuration, Cost) {
    let next = Configuration::new(tasks.iter().map(|t| low_level_best_move(map, current[t.id], t.goal, &fields[t.id], &[]).unwrap()).collect());
    assert!(wmapf_core::model::valid_joint_transition(current, &next, map).unwrap(), "naive high level produced a collision");
    let h = h_of(&next, fields, store);
    (next, h)
}

/// Naive low level: agents plan one after another in `order`; each one
/// minimises step cost plus distance plus the penalties completed by its
/// own choice together with the agents already planned.
pub fn naive_low_level_step(
    map: &GridMap,
    tasks: &[AgentTask],
    current: &Configuration,
    store: &PenaltyStore,
    fields: &[DistanceField],
    order: &[AgentId],
) -> (Configuration, Cost) {
    let n = tasks.len();
    let off = Location::new(u32::MAX, u32::MAX);
    let mut planned = vec![off; n];
    let mut done = vec![false; n];
    for &a in order {
        let t = &tasks[a];
        let mut best: Option<(Cost, Location)> = None;
        for to in map.successors(current[a]) {
            let Some(d) = fields[a].get(to) else { continue };
            if (0..n).any(|b| done[b] && planned[b] == to) {
                continue;
            }
            let mut trial = planned.clone();
            trial[a] = to;
            let mut with = done.clone();
            with[a] = true;
            let pen: Cost = match_penalties(&trial, store, |b| with[b]).iter().map(|p| p.penalty).sum();
            let v = step_cost(current[a], to, t.goal) + Cost::from(d) + pen;
            if best.is_none_or(|(bv, _)| v < bv) {
                best = Some((v, to));
            }
        }
        planned[a] = best.expect("naive low level found no move").1;
        done[a] = true;
    }
    let next = Configuration::new(planned);
    let h = h_of(&next, fields, store);
    (next, h)
}

/// A random oracle-equivalence case: small map, a current configuration,
/// and a store of random penalties that are likely to be reachable.
#[derive(Debug)]
pub struct RandomCase {
    pub instance: Instance,
    pub fields: Vec<DistanceField>,
    pub store: PenaltyStore,
    pub current: Configuration,
}

pub fn random_case(seed: u64) -> RandomCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=4);
    let w = rng.gen_range(3..=6);
    let h = rng.gen_range(3..=6);
    let ratio = rng.gen_range(0.0..=0.25);
    let instance = random_instance(w, h, ratio, n, false, rng.gen()).unwrap();
    let fields = distance_fields(&instance.map, &instance.tasks).unwrap();
    let current = instance.starts();
    let free: Vec<Location> = instance.map.free_cells().collect();
    let mut store = PenaltyStore::new();
    for _ in 0..rng.gen_range(0..=5) {
        let size = rng.gen_range(2..=n);
        let mut agents: Vec<AgentId> = (0..n).collect();
        agents.shuffle(&mut rng);
        agents.truncate(size);
        let entries = agents
            .iter()
            .map(|&a| {
                // mostly the greedy move or another neighbour, so the
                // penalties land where the search wants to go
                let t = &instance.tasks[a];
                let near: Vec<Location> = instance.map.successors(current[a]).collect();
                let l = match rng.gen_range(0..20) {
                    0..=9 => low_level_best_move(&instance.map, current[a], t.goal, &fields[a], &[]).unwrap(),
                    10..=16 => *near.choose(&mut rng).unwrap(),
                    _ => *free.choose(&mut rng).unwrap(),
                };
                (a, l)
            })
            .collect();
        store.upsert(GroupConfiguration::new(entries), rng.gen_range(1..=60));
    }
    RandomCase { instance, fields, store, current }
}

/// Sum of start-to-goal distances.
pub fn sum_h_star(instance: &Instance, fields: &[DistanceField]) -> Cost {
    instance.tasks.iter().map(|t| Cost::from(fields[t.id].get(t.start).unwrap())).sum()
}

/// Executed cost of a sequence of configurations.
pub fn path_cost(path: &[Configuration], tasks: &[AgentTask]) -> Cost {
    path.windows(2).map(|w| joint_cost(&w[0], &w[1], tasks)).sum()
}
