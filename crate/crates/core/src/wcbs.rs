//! Windowed CBS: resolves vertex and edge conflicts only for timesteps
//! `1..=W` and scores each agent by its windowed step costs plus its
//! distance-to-goal at the horizon. No heuristic penalties.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::time::Instant;

use thiserror::Error;

use crate::heuristics::DistanceField;
use crate::model::{step_cost, AgentId, AgentTask, Configuration, Cost, GridMap, Location};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimedConstraint {
    /// Agent may not be at `loc` at time `t`.
    Vertex { agent: AgentId, loc: Location, t: usize },
    /// Agent may not move `from -> to` arriving at time `t`.
    Edge { agent: AgentId, from: Location, to: Location, t: usize },
}

impl TimedConstraint {
    pub fn agent(&self) -> AgentId {
        match *self {
            TimedConstraint::Vertex { agent, .. } | TimedConstraint::Edge { agent, .. } => agent,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WcbsError {
    #[error("time budget exceeded after {0} expansions")]
    Timeout(usize),
    #[error("no conflict-free window plan exists")]
    Infeasible,
    #[error("agent {0} cannot reach its goal")]
    Unreachable(AgentId),
}

pub const DEFAULT_MERGE_THRESHOLD: usize = 8;

#[derive(Debug, Clone, Copy)]
pub struct WcbsOptions {
    pub suboptimality: f64,
    pub deadline: Option<Instant>,
    /// Conflicts between two meta-agents before they are merged; `None`
    /// disables merging.
    pub merge_threshold: Option<usize>,
}

impl Default for WcbsOptions {
    fn default() -> Self {
        WcbsOptions { suboptimality: 1.0, deadline: None, merge_threshold: Some(DEFAULT_MERGE_THRESHOLD) }
    }
}

/// Per-agent location sequences of length `W + 1`; index 0 is the current
/// configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowedPath {
    pub paths: Vec<Vec<Location>>,
    /// Windowed cost: step costs over the window plus distance at the horizon.
    pub cost: Cost,
    pub nodes_expanded: usize,
}

impl WindowedPath {
    pub fn window(&self) -> usize {
        self.paths.first().map_or(0, |p| p.len() - 1)
    }

    pub fn config_at(&self, t: usize) -> Configuration {
        Configuration::new(self.paths.iter().map(|p| p[t]).collect())
    }
}

/// Optimal single-agent window path under timed constraints.
///
/// Minimises the sum of step costs over `window` steps plus the distance
/// to goal at the horizon. Returns the path (length `window + 1`) and its
/// cost, or `None` when every path violates a constraint.
pub fn space_time_astar(
    map: &GridMap,
    start: Location,
    goal: Location,
    field: &DistanceField,
    constraints: &[TimedConstraint],
    window: usize,
) -> Option<(Vec<Location>, Cost)> {
    let blocked = |loc: Location, t: usize| {
        constraints.iter().any(|c| matches!(*c, TimedConstraint::Vertex { loc: l, t: ct, .. } if l == loc && ct == t))
    };
    let edge_blocked = |from: Location, to: Location, t: usize| {
        constraints
            .iter()
            .any(|c| matches!(*c, TimedConstraint::Edge { from: a, to: b, t: ct, .. } if a == from && b == to && ct == t))
    };
    let h = |l: Location| field.get(l).map(Cost::from);

    // (f, h, seq) min-heap; seq keeps canonical action order among ties.
    let mut open: BinaryHeap<Reverse<(Cost, Cost, usize, Location, usize, Cost)>> = BinaryHeap::new();
    let mut best_g: HashMap<(Location, usize), Cost> = HashMap::new();
    let mut parent: HashMap<(Location, usize), Location> = HashMap::new();
    let mut seq = 0usize;
    let h0 = h(start)?;
    open.push(Reverse((h0, h0, seq, start, 0, 0)));
    best_g.insert((start, 0), 0);

    while let Some(Reverse((_, _, _, loc, t, g))) = open.pop() {
        if best_g.get(&(loc, t)).is_some_and(|&b| b < g) {
            continue;
        }
        if t == window {
            let mut path = vec![loc];
            let mut cur = (loc, t);
            while cur.1 > 0 {
                let p = parent[&cur];
                path.push(p);
                cur = (p, cur.1 - 1);
            }
            path.reverse();
            return Some((path, g + h(loc)?));
        }
        for next in map.successors(loc) {
            let Some(hn) = h(next) else { continue };
            let nt = t + 1;
            if blocked(next, nt) || edge_blocked(loc, next, nt) {
                continue;
            }
            let ng = g + step_cost(loc, next, goal);
            if best_g.get(&(next, nt)).is_none_or(|&b| ng < b) {
                best_g.insert((next, nt), ng);
                parent.insert((next, nt), loc);
                seq += 1;
                open.push(Reverse((ng + hn, hn, seq, next, nt, ng)));
            }
        }
    }
    None
}

/// Joint space-time A* for a meta-agent: minimises the members' summed
/// window cost with no collisions among members, under each member's
/// timed constraints. Returns per-member paths and costs.
#[allow(clippy::too_many_arguments)]
fn joint_window_astar(
    map: &GridMap,
    members: &[AgentId],
    current: &Configuration,
    tasks: &[AgentTask],
    fields: &[DistanceField],
    constraints: &[TimedConstraint],
    window: usize,
    deadline: Option<Instant>,
) -> Result<Option<(Vec<Vec<Location>>, Vec<Cost>)>, WcbsError> {
    let k = members.len();
    let goals: Vec<Location> = members.iter().map(|&a| tasks[a].goal).collect();
    let own: Vec<Vec<TimedConstraint>> = members.iter().map(|&a| constraints.iter().copied().filter(|c| c.agent() == a).collect()).collect();
    let allowed = |i: usize, from: Location, to: Location, t: usize| {
        !own[i].iter().any(|c| match *c {
            TimedConstraint::Vertex { loc, t: ct, .. } => loc == to && ct == t,
            TimedConstraint::Edge { from: a, to: b, t: ct, .. } => a == from && b == to && ct == t,
        })
    };
    let h_of = |locs: &[Location]| -> Option<Cost> {
        let mut h = 0;
        for (i, &l) in locs.iter().enumerate() {
            h += Cost::from(fields[members[i]].get(l)?);
        }
        Some(h)
    };
    let start: Vec<Location> = members.iter().map(|&a| current[a]).collect();
    let h0 = h_of(&start).ok_or(WcbsError::Unreachable(members[0]))?;
    type State = (Vec<Location>, usize);
    let mut best_g: HashMap<State, Cost> = HashMap::new();
    let mut parent: HashMap<State, Vec<Location>> = HashMap::new();
    let mut open: BinaryHeap<Reverse<(Cost, Cost, usize, usize, Cost, Vec<Location>)>> = BinaryHeap::new();
    let mut seq = 0usize;
    let mut expanded = 0usize;
    best_g.insert((start.clone(), 0), 0);
    open.push(Reverse((h0, h0, seq, 0, 0, start)));

    while let Some(Reverse((f, _, _, t, g, locs))) = open.pop() {
        if best_g.get(&(locs.clone(), t)).is_some_and(|&b| b < g) {
            continue;
        }
        expanded += 1;
        if expanded.is_multiple_of(1024) && deadline.is_some_and(|d| Instant::now() >= d) {
            return Err(WcbsError::Timeout(expanded));
        }
        if t == window {
            let mut paths = vec![Vec::with_capacity(window + 1); k];
            let mut cur = locs.clone();
            let mut ct = t;
            loop {
                for (i, p) in paths.iter_mut().enumerate() {
                    p.push(cur[i]);
                }
                if ct == 0 {
                    break;
                }
                cur = parent[&(cur, ct)].clone();
                ct -= 1;
            }
            let mut costs = Vec::with_capacity(k);
            for (i, p) in paths.iter_mut().enumerate() {
                p.reverse();
                let steps: Cost = p.windows(2).map(|w| step_cost(w[0], w[1], goals[i])).sum();
                costs.push(steps + Cost::from(fields[members[i]].get_or_max(p[window])));
            }
            debug_assert_eq!(costs.iter().sum::<Cost>(), f);
            return Ok(Some((paths, costs)));
        }
        let nt = t + 1;
        let choices: Vec<Vec<Location>> = (0..k)
            .map(|i| map.successors(locs[i]).filter(|&n| fields[members[i]].get(n).is_some() && allowed(i, locs[i], n, nt)).collect())
            .collect();
        let mut next = Vec::with_capacity(k);
        let mut stack = vec![0usize];
        // depth-first product with collision pruning, canonical order
        while let Some(&ci) = stack.last() {
            let i = stack.len() - 1;
            if ci >= choices[i].len() {
                stack.pop();
                next.pop();
                if let Some(last) = stack.last_mut() {
                    *last += 1;
                }
                continue;
            }
            let to = choices[i][ci];
            let clash = (0..i).any(|j| next[j] == to || (to != locs[i] && next[j] == locs[i] && locs[j] == to));
            if clash {
                *stack.last_mut().expect("non-empty") += 1;
                continue;
            }
            next.push(to);
            if next.len() == k {
                let ng = g + (0..k).map(|j| step_cost(locs[j], next[j], goals[j])).sum::<Cost>();
                let key = (next.clone(), nt);
                if best_g.get(&key).is_none_or(|&b| ng < b) {
                    let hn = h_of(&next).expect("filtered to reachable cells");
                    best_g.insert(key.clone(), ng);
                    parent.insert(key, locs.clone());
                    seq += 1;
                    open.push(Reverse((ng + hn, hn, seq, nt, ng, next.clone())));
                }
                next.pop();
                *stack.last_mut().expect("non-empty") += 1;
            } else {
                stack.push(0);
            }
        }
    }
    Ok(None)
}

#[derive(Debug, Clone)]
struct Node {
    constraints: Vec<TimedConstraint>,
    /// Meta-agent representative (smallest member) per agent.
    meta: Vec<AgentId>,
    paths: Vec<Vec<Location>>,
    costs: Vec<Cost>,
    total: Cost,
    first: Option<WindowConflict>,
}

#[derive(Debug, Clone, Copy)]
enum WindowConflict {
    Vertex { a: AgentId, b: AgentId, loc: Location, t: usize },
    Edge { a: AgentId, b: AgentId, a_from: Location, a_to: Location, t: usize },
}

impl WindowConflict {
    fn agents(&self) -> (AgentId, AgentId) {
        match *self {
            WindowConflict::Vertex { a, b, .. } | WindowConflict::Edge { a, b, .. } => (a, b),
        }
    }
}

/// Finds all conflicts within the window; returns the count and the
/// earliest one (lowest agent pair within a timestep).
fn find_conflicts(paths: &[Vec<Location>]) -> (usize, Option<WindowConflict>) {
    let window = paths.first().map_or(0, |p| p.len() - 1);
    let mut count = 0;
    let mut first = None;
    for t in 1..=window {
        let mut at: HashMap<Location, AgentId> = HashMap::new();
        let mut prev: HashMap<Location, AgentId> = HashMap::new();
        for (a, p) in paths.iter().enumerate() {
            prev.insert(p[t - 1], a);
        }
        let mut step: Vec<WindowConflict> = Vec::new();
        for (b, p) in paths.iter().enumerate() {
            if let Some(&a) = at.get(&p[t]) {
                step.push(WindowConflict::Vertex { a, b, loc: p[t], t });
            } else {
                at.insert(p[t], b);
            }
            if p[t] != p[t - 1] {
                if let Some(&a) = prev.get(&p[t]) {
                    if a < b && paths[a][t] == p[t - 1] {
                        step.push(WindowConflict::Edge { a, b, a_from: paths[a][t - 1], a_to: paths[a][t], t });
                    }
                }
            }
        }
        count += step.len();
        if first.is_none() {
            first = step.into_iter().min_by_key(WindowConflict::agents);
        }
    }
    (count, first)
}

/// Replans the meta-agent containing `agent` under `constraints`, writing
/// into `paths`/`costs`. `Ok(false)` means no feasible plan.
#[allow(clippy::too_many_arguments)]
fn replan(
    map: &GridMap,
    tasks: &[AgentTask],
    current: &Configuration,
    fields: &[DistanceField],
    window: usize,
    meta: &[AgentId],
    agent: AgentId,
    constraints: &[TimedConstraint],
    paths: &mut [Vec<Location>],
    costs: &mut [Cost],
    deadline: Option<Instant>,
) -> Result<bool, WcbsError> {
    let members: Vec<AgentId> = (0..meta.len()).filter(|&a| meta[a] == meta[agent]).collect();
    if members.len() == 1 {
        let own: Vec<TimedConstraint> = constraints.iter().copied().filter(|k| k.agent() == agent).collect();
        return Ok(match space_time_astar(map, current[agent], tasks[agent].goal, &fields[agent], &own, window) {
            Some((p, c)) => {
                paths[agent] = p;
                costs[agent] = c;
                true
            }
            None => false,
        });
    }
    match joint_window_astar(map, &members, current, tasks, fields, constraints, window, deadline)? {
        Some((ps, cs)) => {
            for (i, &a) in members.iter().enumerate() {
                paths[a] = ps[i].clone();
                costs[a] = cs[i];
            }
            Ok(true)
        }
        None => Ok(false),
    }
}

/// Plans a conflict-free window for all agents.
///
/// Agent pairs that conflict more than `merge_threshold` times across the
/// search are merged into a meta-agent planned jointly; the windowed
/// optimum is unchanged.
pub fn plan_window(
    map: &GridMap,
    tasks: &[AgentTask],
    current: &Configuration,
    window: usize,
    fields: &[DistanceField],
    options: &WcbsOptions,
) -> Result<WindowedPath, WcbsError> {
    assert!(window >= 1, "window must be at least 1");
    let n = tasks.len();
    let mut paths = Vec::with_capacity(n);
    let mut costs = Vec::with_capacity(n);
    for a in 0..n {
        let (p, c) = space_time_astar(map, current[a], tasks[a].goal, &fields[a], &[], window).ok_or(WcbsError::Unreachable(a))?;
        paths.push(p);
        costs.push(c);
    }
    let (n_conflicts, first) = find_conflicts(&paths);
    let total = costs.iter().sum();
    let mut nodes = vec![Node { constraints: Vec::new(), meta: (0..n).collect(), paths, costs, total, first }];
    let mut open: BTreeSet<(Cost, usize, usize)> = BTreeSet::new();
    open.insert((total, n_conflicts, 0));
    let focal = options.suboptimality > 1.0;
    let mut expanded = 0usize;
    let mut seen: HashMap<(AgentId, AgentId), usize> = HashMap::new();

    while let Some(&head) = open.first() {
        if expanded.is_multiple_of(32) && options.deadline.is_some_and(|d| Instant::now() >= d) {
            return Err(WcbsError::Timeout(expanded));
        }
        let key = if focal {
            let bound = head.0 as f64 * options.suboptimality;
            let k = *open
                .iter()
                .take_while(|k| k.0 as f64 <= bound)
                .min_by(|a, b| a.1.cmp(&b.1).then(a.cmp(b)))
                .expect("head is in focal");
            open.remove(&k);
            k
        } else {
            open.pop_first().expect("non-empty")
        };
        expanded += 1;
        let id = key.2;
        let Some(conflict) = nodes[id].first else {
            let node = &nodes[id];
            return Ok(WindowedPath { paths: node.paths.clone(), cost: node.total, nodes_expanded: expanded });
        };

        let (a, b) = conflict.agents();
        let meta = &nodes[id].meta;
        let (ma, mb) = (meta[a], meta[b]);
        *seen.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        if let Some(threshold) = options.merge_threshold {
            let between: usize = seen
                .iter()
                .filter(|(&(x, y), _)| (meta[x] == ma && meta[y] == mb) || (meta[x] == mb && meta[y] == ma))
                .map(|(_, &c)| c)
                .sum();
            if between > threshold {
                let mut node = nodes[id].clone();
                let rep = ma.min(mb);
                for m in node.meta.iter_mut() {
                    if *m == ma || *m == mb {
                        *m = rep;
                    }
                }
                if replan(map, tasks, current, fields, window, &node.meta, a, &node.constraints, &mut node.paths, &mut node.costs, options.deadline)? {
                    node.total = node.costs.iter().sum();
                    let (nc, first) = find_conflicts(&node.paths);
                    node.first = first;
                    nodes.push(node);
                    open.insert((nodes[nodes.len() - 1].total, nc, nodes.len() - 1));
                }
                continue;
            }
        }

        let branches: [TimedConstraint; 2] = match conflict {
            WindowConflict::Vertex { a, b, loc, t } => {
                [TimedConstraint::Vertex { agent: a, loc, t }, TimedConstraint::Vertex { agent: b, loc, t }]
            }
            WindowConflict::Edge { a, b, a_from, a_to, t } => [
                TimedConstraint::Edge { agent: a, from: a_from, to: a_to, t },
                TimedConstraint::Edge { agent: b, from: a_to, to: a_from, t },
            ],
        };
        for c in branches {
            let mut node = nodes[id].clone();
            node.constraints.push(c);
            if !replan(map, tasks, current, fields, window, &node.meta, c.agent(), &node.constraints, &mut node.paths, &mut node.costs, options.deadline)? {
                continue;
            }
            node.total = node.costs.iter().sum();
            let (nc, first) = find_conflicts(&node.paths);
            node.first = first;
            nodes.push(node);
            open.insert((nodes[nodes.len() - 1].total, nc, nodes.len() - 1));
        }
    }
    Err(WcbsError::Infeasible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heuristics::{backward_dijkstra, distance_fields};

    fn loc(r: u32, c: u32) -> Location {
        Location::new(r, c)
    }

    #[test]
    fn unconstrained_prefix() {
        let map = GridMap::open(6, 1);
        let goal = loc(0, 5);
        let f = backward_dijkstra(&map, goal).unwrap();
        let (p, c) = space_time_astar(&map, loc(0, 0), goal, &f, &[], 3).unwrap();
        assert_eq!(p, vec![loc(0, 0), loc(0, 1), loc(0, 2), loc(0, 3)]);
        assert_eq!(c, 5);
    }

    #[test]
    fn vertex_constraint_forces_wait() {
        let map = GridMap::open(6, 1);
        let goal = loc(0, 5);
        let f = backward_dijkstra(&map, goal).unwrap();
        let c = [TimedConstraint::Vertex { agent: 0, loc: loc(0, 1), t: 1 }];
        let (p, cost) = space_time_astar(&map, loc(0, 0), goal, &f, &c, 2).unwrap();
        assert_eq!(p, vec![loc(0, 0), loc(0, 0), loc(0, 1)]);
        assert_eq!(cost, 5 + 1);
    }

    #[test]
    fn at_goal_waits_free() {
        let map = GridMap::open(3, 3);
        let goal = loc(1, 1);
        let f = backward_dijkstra(&map, goal).unwrap();
        let (p, c) = space_time_astar(&map, goal, goal, &f, &[], 4).unwrap();
        assert!(p.iter().all(|&l| l == goal));
        assert_eq!(c, 0);
    }

    #[test]
    fn corridor_sidestep() {
        // 2x5: agents head opposite ways along row 0
        let map = GridMap::open(5, 2);
        let tasks = vec![
            AgentTask { id: 0, start: loc(0, 0), goal: loc(0, 4) },
            AgentTask { id: 1, start: loc(0, 4), goal: loc(0, 0) },
        ];
        let fields = distance_fields(&map, &tasks).unwrap();
        let w = plan_window(&map, &tasks, &Configuration::starts(&tasks), 8, &fields, &WcbsOptions::default()).unwrap();
        assert_eq!(find_conflicts(&w.paths).0, 0);
        assert_eq!(w.config_at(8), Configuration::goals(&tasks));
        // one agent detours through row 1: 4 + 6
        assert_eq!(w.cost, 10);
    }
}
