mod common;

use std::collections::HashMap;

use proptest::prelude::*;

use common::*;
use wmapf_core::framework::{run_episode, ExecutionTrace, Limits, Outcome, SsCbsGenerator};
use wmapf_core::heuristics::distance_fields;
use wmapf_core::oracle::{brute_force_best_step, find_group_improvement, group_cost_to_go, joint_optimal_cost};
use wmapf_core::scenarios::random_instance;
use wmapf_core::sscbs::{plan_step, AgentPriorities, SsCbsOptions};
use wmapf_core::{AgentId, AgentTask, Configuration, Cost, GroupConfiguration, Instance, PenaltyStore};

/// Relabels agents: new agent `i` is old agent `perm[i]`.
fn permute(c: &RandomCase, perm: &[AgentId]) -> RandomCase {
    let inv: Vec<AgentId> = {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        inv
    };
    let tasks: Vec<AgentTask> =
        perm.iter().enumerate().map(|(new, &old)| AgentTask { id: new, start: c.instance.tasks[old].start, goal: c.instance.tasks[old].goal }).collect();
    let instance = Instance::new(c.instance.map.clone(), tasks).unwrap();
    let fields = distance_fields(&instance.map, &instance.tasks).unwrap();
    let current = Configuration::new(perm.iter().map(|&old| c.current[old]).collect());
    let mut store = PenaltyStore::new();
    for e in c.store.iter() {
        store.upsert(GroupConfiguration::new(e.group.entries().iter().map(|&(a, l)| (inv[a], l)).collect()), e.penalty as i64);
    }
    RandomCase { instance, fields, store, current }
}

fn episode(instance: &Instance, trace: bool) -> (wmapf_core::framework::ExecutionResult, ExecutionTrace) {
    let fields = distance_fields(&instance.map, &instance.tasks).unwrap();
    let mut ag = SsCbsGenerator::new(instance, &fields, AgentPriorities::none(instance.num_agents()), 1.0);
    run_episode(instance, &fields, &mut ag, &Limits { record_trace: trace, ..Limits::default() })
}

/// Replays the written penalties and checks that nothing is ever lowered.
fn check_monotone(trace: &ExecutionTrace) -> Result<(), String> {
    let mut seen: HashMap<&str, i64> = HashMap::new();
    for e in &trace.entries {
        for w in &e.penalties {
            let prev = seen.get(w.group.as_str()).copied().unwrap_or(0);
            if w.stored != (w.penalty > prev) {
                return Err(format!("iteration {}: {} wrote {} over {prev} (stored={})", e.iteration, w.group, w.penalty, w.stored));
            }
            seen.insert(&w.group, prev.max(w.penalty));
        }
    }
    Ok(())
}

/// Between two visits of the same configuration some penalty must rise.
fn check_cycles(trace: &ExecutionTrace) -> Result<(), String> {
    let mut last: HashMap<&Configuration, usize> = HashMap::new();
    let mut raised_upto = vec![0usize; trace.entries.len() + 1];
    for (i, e) in trace.entries.iter().enumerate() {
        raised_upto[i + 1] = raised_upto[i] + e.penalties.iter().filter(|w| w.stored).count();
    }
    for (i, e) in trace.entries.iter().enumerate() {
        if let Some(&j) = last.get(&e.configuration) {
            if raised_upto[i] == raised_upto[j] {
                return Err(format!("cycle between iterations {j} and {i} with no penalty raised"));
            }
        }
        last.insert(&e.configuration, i);
    }
    Ok(())
}

fn small_case() -> impl Strategy<Value = RandomCase> {
    any::<u64>().prop_map(random_case)
}

fn small_instance(max_agents: usize) -> impl Strategy<Value = Instance> {
    (2..=max_agents, 3u32..=5, 3u32..=5, any::<u64>()).prop_map(|(n, w, h, seed)| random_instance(w, h, 0.15, n, true, seed).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn brute_force_invariant_under_relabeling(c in small_case(), rot in 0usize..4) {
        let n = c.instance.num_agents();
        let mut perm: Vec<AgentId> = (0..n).collect();
        perm.rotate_left(rot % n);
        perm.swap(0, n - 1);
        let p = permute(&c, &perm);
        let a = brute_force_best_step(&c.instance.map, &c.instance.tasks, &c.current, &c.store, &c.fields).unwrap().map(|r| r.0);
        let b = brute_force_best_step(&p.instance.map, &p.instance.tasks, &p.current, &p.store, &p.fields).unwrap().map(|r| r.0);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn joint_optimum_dominates_distances(inst in small_instance(3)) {
        let fields = distance_fields(&inst.map, &inst.tasks).unwrap();
        let opt = joint_optimal_cost(&inst, &fields).unwrap().expect("constructed solvable");
        prop_assert!(opt >= sum_h_star(&inst, &fields));
    }

    #[test]
    fn group_cost_to_go_dominates_distances(inst in small_instance(3), pick in any::<u8>()) {
        let fields = distance_fields(&inst.map, &inst.tasks).unwrap();
        let n = inst.num_agents();
        let mask = usize::from(pick) % ((1 << n) - 1) + 1;
        let group: Vec<AgentId> = (0..n).filter(|a| mask & (1 << a) != 0).collect();
        let cur = inst.starts();
        if let Some(v) = group_cost_to_go(&inst.map, &inst.tasks, &group, &cur, &fields).unwrap() {
            let lb: Cost = group.iter().map(|&a| Cost::from(fields[a].get(cur[a]).unwrap())).sum();
            prop_assert!(v >= lb);
        }
    }

    #[test]
    fn sscbs_value_matches_oracle(c in small_case()) {
        let inst = &c.instance;
        let want = brute_force_best_step(&inst.map, &inst.tasks, &c.current, &c.store, &c.fields).unwrap().map(|r| r.0);
        let got = plan_step(&inst.map, &inst.tasks, &c.current, &c.store, &c.fields, &AgentPriorities::none(inst.num_agents()), &SsCbsOptions::default()).ok().map(|r| r.value);
        prop_assert_eq!(want, got);
    }

    /// No group can do better by replanning alone with everyone else frozen.
    #[test]
    fn groups_are_sound(c in small_case()) {
        let inst = &c.instance;
        let n = inst.num_agents();
        let Ok(r) = plan_step(&inst.map, &inst.tasks, &c.current, &c.store, &c.fields, &AgentPriorities::none(n), &SsCbsOptions::default()) else {
            return Ok(());
        };
        let mut covered: Vec<AgentId> = r.groups.iter().flatten().copied().collect();
        covered.sort_unstable();
        prop_assert_eq!(covered, (0..n).collect::<Vec<_>>());
        let better = find_group_improvement(&inst.map, &inst.tasks, &c.current, &r.next, &r.groups, &c.store, &c.fields).unwrap();
        prop_assert!(better.is_none(), "{:?}", better);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn episode_traces_are_monotone_and_cycles_learn(inst in small_instance(4)) {
        let (r, trace) = episode(&inst, true);
        prop_assert_eq!(r.outcome, Outcome::Solved);
        check_monotone(&trace).map_err(TestCaseError::fail)?;
        check_cycles(&trace).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn solved_cost_dominates_distances(inst in small_instance(4)) {
        let (r, _) = episode(&inst, false);
        let fields = distance_fields(&inst.map, &inst.tasks).unwrap();
        prop_assert_eq!(r.outcome, Outcome::Solved);
        prop_assert!(r.cost >= sum_h_star(&inst, &fields));
    }
}

#[test]
fn interaction_free_optimum_equals_distances() {
    let map = wmapf_core::GridMap::open(4, 4);
    let tasks = vec![AgentTask { id: 0, start: loc(0, 0), goal: loc(0, 3) }, AgentTask { id: 1, start: loc(3, 0), goal: loc(3, 3) }];
    let fields = distance_fields(&map, &tasks).unwrap();
    let inst = Instance::new(map, tasks).unwrap();
    assert_eq!(joint_optimal_cost(&inst, &fields).unwrap(), Some(6));
}

#[test]
fn corridor_swap_revisits_only_while_learning() {
    let s = wmapf_core::scenarios::generate_with_depth(wmapf_core::scenarios::ScenarioKind::CorridorSwap, 2, 0, 3).unwrap();
    let inst = &s.instance;
    let fields = distance_fields(&inst.map, &inst.tasks).unwrap();
    let mut ag = SsCbsGenerator::new(inst, &fields, AgentPriorities::none(2), 1.0);
    let limits = Limits { record_trace: true, iteration_cap: Some(usize::MAX), ..Limits::default() };
    let (r, trace) = run_episode(inst, &fields, &mut ag, &limits);
    assert_eq!(r.outcome, Outcome::Solved);
    let distinct: std::collections::HashSet<_> = trace.entries.iter().map(|e| &e.configuration).collect();
    assert!(distinct.len() < trace.entries.len(), "expected revisits");
    check_monotone(&trace).unwrap();
    check_cycles(&trace).unwrap();
}
