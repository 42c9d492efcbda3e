//! Backward-Dijkstra distance fields, the heuristic-penalty store and
//! joint heuristic evaluation `h(C) = h_BD(C) + sum of matched penalties`.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{AgentId, AgentTask, Configuration, Cost, GridMap, GroupConfiguration, Location};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeuristicError {
    #[error("goal {0} is blocked")]
    BlockedGoal(Location),
    #[error("agent {agent} at {location} cannot reach its goal")]
    Unreachable { agent: AgentId, location: Location },
    #[error("penalty store line {line}: {message}")]
    Format { line: usize, message: String },
}

const UNREACHABLE: u32 = u32::MAX;

/// Exact distance-to-goal for every cell of a map, for one goal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceField {
    width: u32,
    dist: Vec<u32>,
}

impl DistanceField {
    /// Distance from `loc` to the goal, or `None` when walled off.
    pub fn get(&self, loc: Location) -> Option<u32> {
        if loc.col >= self.width {
            return None;
        }
        match self.dist.get((loc.row * self.width + loc.col) as usize) {
            Some(&d) if d != UNREACHABLE => Some(d),
            _ => None,
        }
    }

    pub(crate) fn get_or_max(&self, loc: Location) -> u32 {
        self.get(loc).unwrap_or(UNREACHABLE)
    }
}

/// Breadth-first search outward from `goal`; equivalent to Dijkstra on a
/// unit-cost grid.
pub fn backward_dijkstra(map: &GridMap, goal: Location) -> Result<DistanceField, HeuristicError> {
    if map.is_blocked(goal) {
        return Err(HeuristicError::BlockedGoal(goal));
    }
    let mut dist = vec![UNREACHABLE; map.num_cells()];
    let mut queue = VecDeque::new();
    dist[map.index(goal)] = 0;
    queue.push_back(goal);
    while let Some(cur) = queue.pop_front() {
        let d = dist[map.index(cur)];
        for next in map.neighbors(cur) {
            let i = map.index(next);
            if dist[i] == UNREACHABLE {
                dist[i] = d + 1;
                queue.push_back(next);
            }
        }
    }
    Ok(DistanceField { width: map.width(), dist })
}

/// One distance field per agent, indexed by agent id.
pub fn distance_fields(map: &GridMap, tasks: &[AgentTask]) -> Result<Vec<DistanceField>, HeuristicError> {
    tasks.iter().map(|t| backward_dijkstra(map, t.goal)).collect()
}

/// `h_BD` of a full configuration.
pub fn h_bd(config: &Configuration, fields: &[DistanceField]) -> Result<Cost, HeuristicError> {
    config
        .locations()
        .iter()
        .enumerate()
        .map(|(agent, &location)| {
            fields[agent].get(location).map(Cost::from).ok_or(HeuristicError::Unreachable { agent, location })
        })
        .sum()
}

/// `h_BD` restricted to the agents of a group configuration.
pub fn group_h_bd(group: &GroupConfiguration, fields: &[DistanceField]) -> Result<Cost, HeuristicError> {
    group
        .entries()
        .iter()
        .map(|&(agent, location)| {
            fields[agent].get(location).map(Cost::from).ok_or(HeuristicError::Unreachable { agent, location })
        })
        .sum()
}

/// A positive offset above `h_BD` attached to a group configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeuristicPenalty {
    pub group: GroupConfiguration,
    pub penalty: Cost,
}

/// What an upsert did to the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsert {
    Inserted,
    Raised,
    Unchanged,
}

/// Learned penalties keyed by group configuration. Penalties only grow.
#[derive(Debug, Clone, Default)]
pub struct PenaltyStore {
    entries: Vec<HeuristicPenalty>,
    by_group: HashMap<GroupConfiguration, usize>,
    /// Entry indices per sorted agent set.
    by_agents: HashMap<Vec<AgentId>, Vec<usize>>,
}

impl PenaltyStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &HeuristicPenalty> {
        self.entries.iter()
    }

    pub fn get(&self, group: &GroupConfiguration) -> Option<Cost> {
        self.by_group.get(group).map(|&i| self.entries[i].penalty)
    }

    pub(crate) fn entry(&self, index: usize) -> &HeuristicPenalty {
        &self.entries[index]
    }

    /// Indices of entries matched exactly by `config`, restricted to
    /// entries whose agents are all `eligible`.
    pub(crate) fn matching(&self, config: &[Location], eligible: impl Fn(AgentId) -> bool) -> Vec<usize> {
        let mut out = Vec::new();
        for agents in self.by_agents.keys() {
            if agents.iter().all(|&a| a < config.len() && eligible(a)) {
                let key = GroupConfiguration::new(agents.iter().map(|&a| (a, config[a])).collect());
                if let Some(&i) = self.by_group.get(&key) {
                    out.push(i);
                }
            }
        }
        out
    }

    /// Indices of entries whose every agent's location is among that
    /// agent's `options`.
    pub(crate) fn within(&self, options: &[Vec<Location>]) -> Vec<usize> {
        let mut out = Vec::new();
        for (agents, idx) in &self.by_agents {
            if agents.iter().any(|&a| a >= options.len() || options[a].is_empty()) {
                continue;
            }
            let combos = agents.iter().try_fold(1usize, |acc, &a| acc.checked_mul(options[a].len()));
            if combos.is_some_and(|c| c <= idx.len()) {
                let mut pick = vec![0usize; agents.len()];
                'combos: loop {
                    let key = GroupConfiguration::new(agents.iter().zip(&pick).map(|(&a, &p)| (a, options[a][p])).collect());
                    if let Some(&i) = self.by_group.get(&key) {
                        out.push(i);
                    }
                    let mut k = agents.len();
                    loop {
                        if k == 0 {
                            break 'combos;
                        }
                        k -= 1;
                        pick[k] += 1;
                        if pick[k] < options[agents[k]].len() {
                            break;
                        }
                        pick[k] = 0;
                    }
                }
            } else {
                out.extend(idx.iter().copied().filter(|&i| self.entries[i].group.entries().iter().all(|&(a, l)| options[a].contains(&l))));
            }
        }
        out
    }

    /// Inserts or raises a penalty; non-positive candidates are ignored and
    /// an existing penalty is never lowered.
    pub fn upsert(&mut self, group: GroupConfiguration, candidate: i64) -> Upsert {
        if candidate <= 0 {
            return Upsert::Unchanged;
        }
        let candidate = candidate as Cost;
        if let Some(&i) = self.by_group.get(&group) {
            let e = &mut self.entries[i];
            if candidate > e.penalty {
                e.penalty = candidate;
                return Upsert::Raised;
            }
            return Upsert::Unchanged;
        }
        let i = self.entries.len();
        self.by_agents.entry(group.agents().collect()).or_default().push(i);
        self.by_group.insert(group.clone(), i);
        self.entries.push(HeuristicPenalty { group, penalty: candidate });
        Upsert::Inserted
    }

    /// Line-oriented dump: `agent:row,col;agent:row,col penalty`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{} {}", e.group, e.penalty);
        }
        out
    }

    pub fn load(text: &str) -> Result<Self, HeuristicError> {
        let mut store = PenaltyStore::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let ferr = |message: &str| HeuristicError::Format { line: i + 1, message: message.to_string() };
            let (group, penalty) = line.rsplit_once(' ').ok_or_else(|| ferr("missing penalty"))?;
            let penalty: i64 = penalty.parse().map_err(|_| ferr("bad penalty"))?;
            let mut entries = Vec::new();
            for part in group.split(';') {
                let (agent, rc) = part.split_once(':').ok_or_else(|| ferr("expected agent:row,col"))?;
                let (r, c) = rc.split_once(',').ok_or_else(|| ferr("expected row,col"))?;
                let parse = |s: &str| s.trim().parse::<u32>().map_err(|_| ferr("bad number"));
                let agent = agent.trim().parse::<AgentId>().map_err(|_| ferr("bad agent id"))?;
                entries.push((agent, Location::new(parse(r)?, parse(c)?)));
            }
            let mut ids: Vec<_> = entries.iter().map(|e| e.0).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != entries.len() {
                return Err(ferr("duplicate agent"));
            }
            store.upsert(GroupConfiguration::new(entries), penalty);
        }
        Ok(store)
    }
}

/// Greedy priority of penalty entries: higher penalty first, then the
/// lexicographically smaller agent-id set.
pub(crate) fn penalty_order(a: &HeuristicPenalty, b: &HeuristicPenalty) -> std::cmp::Ordering {
    b.penalty.cmp(&a.penalty).then_with(|| a.group.agents().cmp(b.group.agents())).then_with(|| a.group.cmp(&b.group))
}

/// Selects an agent-disjoint set of stored penalties matching `config`
/// among `eligible` agents, greedily by decreasing penalty. Computed from
/// scratch on every call.
pub fn match_penalties(config: &[Location], store: &PenaltyStore, eligible: impl Fn(AgentId) -> bool) -> Vec<HeuristicPenalty> {
    let mut candidates = store.matching(config, eligible);
    candidates.sort_by(|&a, &b| penalty_order(store.entry(a), store.entry(b)));
    let mut used = vec![false; config.len()];
    let mut selected = Vec::new();
    for i in candidates {
        let e = store.entry(i);
        if e.group.agents().any(|a| used[a]) {
            continue;
        }
        for a in e.group.agents() {
            used[a] = true;
        }
        selected.push(e.clone());
    }
    selected
}

/// `h(C) = h_BD(C) + greedy matched penalties over all agents`.
pub fn evaluate_h(config: &Configuration, fields: &[DistanceField], store: &PenaltyStore) -> Result<Cost, HeuristicError> {
    let base = h_bd(config, fields)?;
    let pen: Cost = match_penalties(config.locations(), store, |_| true).iter().map(|p| p.penalty).sum();
    Ok(base + pen)
}

/// `h` of a group configuration: `h_BD` over the group plus greedy matched
/// penalties whose agents all belong to the group.
pub fn evaluate_group_h(group: &GroupConfiguration, fields: &[DistanceField], store: &PenaltyStore, n_agents: usize) -> Result<Cost, HeuristicError> {
    let base = group_h_bd(group, fields)?;
    // Off-group agents get an out-of-map sentinel so nothing matches them.
    let mut locs = vec![Location::new(u32::MAX, u32::MAX); n_agents];
    let mut member = vec![false; n_agents];
    for &(a, l) in group.entries() {
        locs[a] = l;
        member[a] = true;
    }
    let pen: Cost = match_penalties(&locs, store, |a| member[a]).iter().map(|p| p.penalty).sum();
    Ok(base + pen)
}
