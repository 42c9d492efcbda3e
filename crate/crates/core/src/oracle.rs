//! Exhaustive reference solvers for small instances.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::time::Instant;

use thiserror::Error;

use crate::framework::{run_episode, ActionGenerator, AgError, AgOutput, ExecutionResult, ExecutionTrace, Limits};
use crate::heuristics::{evaluate_group_h, evaluate_h, h_bd, DistanceField, HeuristicError, PenaltyStore};
use crate::model::{joint_cost, step_cost, valid_joint_transition, AgentId, AgentTask, Configuration, Cost, GridMap, Instance};

pub const MAX_BRUTE_FORCE_AGENTS: usize = 8;
pub const MAX_JOINT_SEARCH_AGENTS: usize = 4;
pub const DEFAULT_STATE_BUDGET: usize = 5_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{agents} agents exceeds the oracle limit of {limit}")]
    TooManyAgents { agents: usize, limit: usize },
    #[error("state budget of {0} exhausted")]
    Budget(usize),
    #[error(transparent)]
    Heuristic(#[from] HeuristicError),
}

/// Calls `f` for every joint successor of `current` (including invalid
/// ones), in lexicographic order of the resulting configuration's
/// per-agent action indices.
fn for_each_joint_successor(map: &GridMap, current: &Configuration, mut f: impl FnMut(Configuration)) {
    let options: Vec<Vec<_>> = current.locations().iter().map(|&l| map.successors(l).collect()).collect();
    let n = options.len();
    let mut idx = vec![0usize; n];
    if options.iter().any(|o| o.is_empty()) {
        return;
    }
    loop {
        f(Configuration::new((0..n).map(|a| options[a][idx[a]]).collect()));
        let mut a = n;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < options[a].len() {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Enumerates all joint successors and returns the minimum of
/// `c(C, C') + h(C')` over valid ones, with the lexicographically
/// smallest minimiser. `None` if no valid successor exists.
pub fn brute_force_best_step(
    map: &GridMap,
    tasks: &[AgentTask],
    current: &Configuration,
    store: &PenaltyStore,
    fields: &[DistanceField],
) -> Result<Option<(Cost, Configuration)>, OracleError> {
    let n = tasks.len();
    if n > MAX_BRUTE_FORCE_AGENTS {
        return Err(OracleError::TooManyAgents { agents: n, limit: MAX_BRUTE_FORCE_AGENTS });
    }
    let mut best: Option<(Cost, Configuration)> = None;
    let mut err = None;
    for_each_joint_successor(map, current, |next| {
        if err.is_some() || !valid_joint_transition(current, &next, map).unwrap_or(false) {
            return;
        }
        let h = match evaluate_h(&next, fields, store) {
            Ok(h) => h,
            Err(e) => {
                err = Some(e);
                return;
            }
        };
        let v = joint_cost(current, &next, tasks) + h;
        let better = match &best {
            None => true,
            Some((bv, bc)) => v < *bv || (v == *bv && next < *bc),
        };
        if better {
            best = Some((v, next));
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(best),
    }
}

/// A group that could lower its own `c + h` by replanning alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupImprovement {
    pub group: Vec<AgentId>,
    pub chosen: Cost,
    pub better: Cost,
    pub next: Configuration,
}

/// Checks the step `current -> next` against its agent groups: each group's
/// joint moves are enumerated with every other agent frozen at `next`, and
/// scored by the group's step cost plus its own `h` (penalties over its
/// members only). Returns the first valid alternative that scores lower.
pub fn find_group_improvement(
    map: &GridMap,
    tasks: &[AgentTask],
    current: &Configuration,
    next: &Configuration,
    groups: &[Vec<AgentId>],
    store: &PenaltyStore,
    fields: &[DistanceField],
) -> Result<Option<GroupImprovement>, OracleError> {
    let n = tasks.len();
    for g in groups {
        if g.len() > MAX_BRUTE_FORCE_AGENTS {
            return Err(OracleError::TooManyAgents { agents: g.len(), limit: MAX_BRUTE_FORCE_AGENTS });
        }
        let value = |c: &Configuration| -> Result<Cost, OracleError> {
            let step: Cost = g.iter().map(|&a| step_cost(current[a], c[a], tasks[a].goal)).sum();
            Ok(step + evaluate_group_h(&c.group(g), fields, store, n)?)
        };
        let chosen = value(next)?;
        let sub = Configuration::new(g.iter().map(|&a| current[a]).collect());
        let mut found = None;
        let mut err = None;
        for_each_joint_successor(map, &sub, |moves| {
            if found.is_some() || err.is_some() {
                return;
            }
            let mut locs = next.clone().into_inner();
            for (k, &a) in g.iter().enumerate() {
                locs[a] = moves[k];
            }
            let alt = Configuration::new(locs);
            if !valid_joint_transition(current, &alt, map).unwrap_or(false) {
                return;
            }
            match value(&alt) {
                Ok(v) if v < chosen => found = Some(GroupImprovement { group: g.clone(), chosen, better: v, next: alt }),
                Ok(_) => {}
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if found.is_some() {
            return Ok(found);
        }
    }
    Ok(None)
}

/// Optimal joint sum-of-costs from the starts to the goals, by A* over
/// joint configurations. `None` if the instance is unsolvable.
pub fn joint_optimal_cost(instance: &Instance, fields: &[DistanceField]) -> Result<Option<Cost>, OracleError> {
    joint_optimal_cost_with_budget(instance, fields, DEFAULT_STATE_BUDGET)
}

pub fn joint_optimal_cost_with_budget(instance: &Instance, fields: &[DistanceField], budget: usize) -> Result<Option<Cost>, OracleError> {
    let n = instance.num_agents();
    if n > MAX_JOINT_SEARCH_AGENTS {
        return Err(OracleError::TooManyAgents { agents: n, limit: MAX_JOINT_SEARCH_AGENTS });
    }
    let start = instance.starts();
    let goal = instance.goals();
    let mut g: HashMap<Configuration, Cost> = HashMap::new();
    let mut open = BinaryHeap::new();
    g.insert(start.clone(), 0);
    open.push(Reverse((h_bd(&start, fields)?, 0, start)));
    while let Some(Reverse((_, gc, cur))) = open.pop() {
        if g.get(&cur).is_some_and(|&b| b < gc) {
            continue;
        }
        if cur == goal {
            return Ok(Some(gc));
        }
        if g.len() > budget {
            return Err(OracleError::Budget(budget));
        }
        let mut pushes = Vec::new();
        for_each_joint_successor(&instance.map, &cur, |next| {
            if !valid_joint_transition(&cur, &next, &instance.map).unwrap_or(false) {
                return;
            }
            let ng = gc + joint_cost(&cur, &next, &instance.tasks);
            if g.get(&next).is_none_or(|&b| ng < b) {
                pushes.push((ng, next));
            }
        });
        for (ng, next) in pushes {
            if g.get(&next).is_none_or(|&b| ng < b) {
                let f = ng + h_bd(&next, fields)?;
                g.insert(next.clone(), ng);
                open.push(Reverse((f, ng, next)));
            }
        }
    }
    Ok(None)
}

/// Optimal cost-to-go for the agents of `group` from `current`, ignoring
/// every other agent.
pub fn group_cost_to_go(
    map: &GridMap,
    tasks: &[AgentTask],
    group: &[AgentId],
    current: &Configuration,
    fields: &[DistanceField],
) -> Result<Option<Cost>, OracleError> {
    let sub_tasks: Vec<AgentTask> = group
        .iter()
        .enumerate()
        .map(|(i, &a)| AgentTask { id: i, start: current[a], goal: tasks[a].goal })
        .collect();
    let sub_fields: Vec<DistanceField> = group.iter().map(|&a| fields[a].clone()).collect();
    let instance = Instance { map: map.clone(), tasks: sub_tasks };
    joint_optimal_cost(&instance, &sub_fields)
}

/// Action generator that enumerates every joint successor and treats all
/// agents as one coupled group.
pub struct BruteForceGenerator<'a> {
    map: &'a GridMap,
    tasks: &'a [AgentTask],
    fields: &'a [DistanceField],
}

impl<'a> BruteForceGenerator<'a> {
    pub fn new(instance: &'a Instance, fields: &'a [DistanceField]) -> Self {
        BruteForceGenerator { map: &instance.map, tasks: &instance.tasks, fields }
    }
}

impl ActionGenerator for BruteForceGenerator<'_> {
    fn name(&self) -> String {
        "brute-force".into()
    }

    fn uses_penalties(&self) -> bool {
        true
    }

    fn plan(&mut self, current: &Configuration, store: &PenaltyStore, _deadline: Option<Instant>) -> Result<AgOutput, AgError> {
        match brute_force_best_step(self.map, self.tasks, current, store, self.fields) {
            Ok(Some((_, next))) => Ok(AgOutput { steps: vec![next], commit: 1, groups: vec![(0..self.tasks.len()).collect()], hp_conflicts: 0 }),
            Ok(None) => Err(AgError::Failure("no valid joint successor".into())),
            Err(e) => Err(AgError::Failure(e.to_string())),
        }
    }
}

/// Joint LRTA*: the execution loop driven by brute-force step selection
/// with a single all-agent group.
pub fn joint_lrta_reference(instance: &Instance, fields: &[DistanceField], limits: &Limits) -> (ExecutionResult, ExecutionTrace) {
    let mut ag = BruteForceGenerator::new(instance, fields);
    run_episode(instance, fields, &mut ag, limits)
}
