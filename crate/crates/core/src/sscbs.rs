//! Single-step conflict-based search.
//!
//! Given the current configuration and the penalty store, finds the joint
//! one-step move minimising `c(C, C') + h(C')`, where `h` is `h_BD` plus the
//! greedy disjoint set of matched penalties, and reports which agents
//! interacted while the move was chosen.
//!
//! Penalties are never charged when a node is created. A node whose chosen
//! locations could hit a stored penalty carries a heuristic conflict; the
//! split produces one child per group agent forbidding that agent's cell
//! and one child forcing the whole group onto the penalised configuration.
//!
//! Each node's penalty term is a lower bound on the greedy penalty of every
//! configuration its constraints admit, obtained by replaying the greedy
//! selection over entries whose match status the constraints already
//! decide. A node is a solution only when that bound equals the greedy
//! penalty of the node's own configuration, so the first solution popped
//! is optimal.

use std::cmp::Ordering;
use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::heuristics::{evaluate_group_h, penalty_order, DistanceField, HeuristicPenalty, PenaltyStore};
use crate::model::{step_cost, AgentId, AgentTask, Configuration, Cost, GridMap, GroupConfiguration, Location};

/// Branch constraint at the single planned timestep (t = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Constraint {
    /// Agent may not be at `loc`.
    NegativeVertex { agent: AgentId, loc: Location },
    /// Agent must be at `loc`.
    PositiveVertex { agent: AgentId, loc: Location },
    /// Agent may not traverse `from -> to`.
    NegativeEdge { agent: AgentId, from: Location, to: Location },
}

impl Constraint {
    pub fn agent(&self) -> AgentId {
        match *self {
            Constraint::NegativeVertex { agent, .. }
            | Constraint::PositiveVertex { agent, .. }
            | Constraint::NegativeEdge { agent, .. } => agent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Conflict {
    /// Two agents choose the same cell.
    Vertex { a: AgentId, b: AgentId, loc: Location },
    /// `a` moves `a_from -> a_to` while `b` moves the other way.
    Edge { a: AgentId, b: AgentId, a_from: Location, a_to: Location },
    /// A stored penalty the node's bound has not settled yet.
    Heuristic { group: GroupConfiguration, penalty: Cost },
}

impl Conflict {
    pub fn agents(&self) -> Vec<AgentId> {
        match self {
            Conflict::Vertex { a, b, .. } | Conflict::Edge { a, b, .. } => vec![*a, *b],
            Conflict::Heuristic { group, .. } => group.agents().collect(),
        }
    }

    pub fn is_heuristic(&self) -> bool {
        matches!(self, Conflict::Heuristic { .. })
    }
}

/// Constraint-tree tie-breaking mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    #[default]
    None,
    Distance,
    Random,
}

impl std::str::FromStr for TieBreak {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(TieBreak::None),
            "dist" | "distance" => Ok(TieBreak::Distance),
            "random" => Ok(TieBreak::Random),
            other => Err(format!("unknown tiebreak `{other}` (none|dist|random)")),
        }
    }
}

impl std::fmt::Display for TieBreak {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TieBreak::None => "none",
            TieBreak::Distance => "dist",
            TieBreak::Random => "random",
        })
    }
}

/// Per-agent tie-break priorities. Agents off their goal gain one unit per
/// executed step; an agent on its goal drops to zero.
#[derive(Debug, Clone)]
pub struct AgentPriorities {
    mode: TieBreak,
    values: Vec<f64>,
}

impl AgentPriorities {
    pub fn new(mode: TieBreak, tasks: &[AgentTask], fields: &[DistanceField], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = tasks
            .iter()
            .map(|t| {
                if t.start == t.goal {
                    return 0.0;
                }
                match mode {
                    TieBreak::None => 0.0,
                    TieBreak::Distance => f64::from(fields[t.id].get(t.start).unwrap_or(0)),
                    TieBreak::Random => rng.gen::<f64>(),
                }
            })
            .collect();
        AgentPriorities { mode, values }
    }

    pub fn none(n: usize) -> Self {
        AgentPriorities { mode: TieBreak::None, values: vec![0.0; n] }
    }

    pub fn mode(&self) -> TieBreak {
        self.mode
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Update after a step has been executed.
    pub fn advance(&mut self, executed: &Configuration, tasks: &[AgentTask]) {
        if self.mode == TieBreak::None {
            return;
        }
        for (v, t) in self.values.iter_mut().zip(tasks) {
            if executed[t.id] == t.goal {
                *v = 0.0;
            } else {
                *v += 1.0;
            }
        }
    }

    /// Agents by decreasing priority, ties by id.
    fn order(&self) -> Option<Vec<AgentId>> {
        if self.mode == TieBreak::None {
            return None;
        }
        let mut ids: Vec<AgentId> = (0..self.values.len()).collect();
        ids.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        Some(ids)
    }
}

/// How agent groups are read off the solution node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum GroupRule {
    /// Agents of the conflicts resolved on the solution branch only. Can
    /// leave a group that would do better alone.
    Conflicts,
    /// Also merges groups across penalties that could tempt one of them.
    #[default]
    Closed,
}

#[derive(Debug, Clone, Copy)]
pub struct SsCbsOptions {
    /// High-level suboptimality factor; 1.0 is optimal.
    pub suboptimality: f64,
    pub deadline: Option<Instant>,
    pub groups: GroupRule,
}

impl Default for SsCbsOptions {
    fn default() -> Self {
        SsCbsOptions { suboptimality: 1.0, deadline: None, groups: GroupRule::Closed }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub nodes_expanded: usize,
    pub nodes_generated: usize,
    pub heuristic_conflicts: usize,
    pub hps_matched: usize,
    pub children_pruned: usize,
    pub duplicates: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SsCbsError {
    #[error("constraint tree exhausted without a feasible node")]
    Exhausted(StepStats),
    #[error("time budget exceeded after {} expansions", .0.nodes_expanded)]
    Timeout(StepStats),
    #[error("agent {0} cannot reach its goal")]
    Unreachable(AgentId),
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub next: Configuration,
    /// Disjoint agent groups, each sorted, ordered by smallest member.
    pub groups: Vec<Vec<AgentId>>,
    /// `c(C, next) + h(next)`.
    pub value: Cost,
    /// `h(next)` including matched penalties.
    pub h: Cost,
    pub stats: StepStats,
}

pub type NodeId = usize;

/// A constraint-tree node. Per-agent arrays live in the tree; see
/// [`ConstraintTree::moves`].
#[derive(Debug, Clone)]
pub struct CtNode {
    pub parent: Option<NodeId>,
    /// Constraints added at this node; the full set is the branch's union.
    pub added: Vec<Constraint>,
    pub g: Cost,
    pub h_bd: Cost,
    /// Lower bound on the greedy penalty over this node's region.
    pub penalty: Cost,
    /// Number of store entries counted in `penalty`.
    pub matched: usize,
    /// Conflict to split on: the lowest colliding pair, else the heuristic
    /// conflict. `None` on a solution.
    pub conflict: Option<Conflict>,
    pub n_conflicts: usize,
    pub n_collisions: usize,
}

impl CtNode {
    pub fn h(&self) -> Cost {
        self.h_bd + self.penalty
    }

    pub fn f(&self) -> Cost {
        self.g + self.h()
    }

    pub fn is_solution(&self) -> bool {
        self.conflict.is_none()
    }
}

/// Picks the best single move for one agent under its branch constraints.
///
/// Minimises step cost plus distance-to-goal; ties go to the lower distance,
/// then canonical action order (wait, up, right, down, left). A positive
/// vertex constraint forces the move. `None` means no move is feasible.
pub fn low_level_best_move(
    map: &GridMap,
    from: Location,
    goal: Location,
    field: &DistanceField,
    constraints: &[Constraint],
) -> Option<Location> {
    let mut forced: Option<Location> = None;
    for c in constraints {
        if let Constraint::PositiveVertex { loc, .. } = *c {
            if forced.is_some_and(|f| f != loc) {
                return None;
            }
            forced = Some(loc);
        }
    }
    let allowed = |to: Location| {
        constraints.iter().all(|c| match *c {
            Constraint::NegativeVertex { loc, .. } => loc != to,
            Constraint::NegativeEdge { from: a, to: b, .. } => !(a == from && b == to),
            Constraint::PositiveVertex { .. } => true,
        }) && forced.is_none_or(|f| f == to)
    };
    let mut best: Option<(u64, u32, Location)> = None;
    for to in map.successors(from) {
        let Some(h) = field.get(to) else { continue };
        if !allowed(to) {
            continue;
        }
        let key = step_cost(from, to, goal) + u64::from(h);
        if best.is_none_or(|(k, bh, _)| (key, h) < (k, bh)) {
            best = Some((key, h, to));
        }
    }
    best.map(|b| b.2)
}

/// Merges the agent sets of resolved conflicts into disjoint groups;
/// agents in no set become singletons.
pub fn extract_disjoint_groups<'a>(resolved: impl IntoIterator<Item = &'a [AgentId]>, n_agents: usize) -> Vec<Vec<AgentId>> {
    let mut parent: Vec<usize> = (0..n_agents).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for set in resolved {
        for w in set.windows(2) {
            let (ra, rb) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut groups: Vec<Vec<AgentId>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for a in 0..n_agents {
        let r = find(&mut parent, a);
        let i = *slot.entry(r).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[i].push(a);
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Must,
    Cannot,
    Undecided,
}

const FORCED: u8 = 1 << 7;

/// An agent left with a single permitted slot is pinned there.
fn normalize(mask: u8) -> u8 {
    if (mask & !FORCED).count_ones() == 1 {
        mask | FORCED
    } else {
        mask
    }
}

/// Position of `loc` among an agent's successors. Callers only pass
/// locations that are successors.
fn slot_of(options: &[Location], loc: Location) -> u8 {
    options.iter().position(|&o| o == loc).expect("location is a successor") as u8
}

/// Search context for one planning step.
pub struct ConstraintTree<'a> {
    tasks: &'a [AgentTask],
    fields: &'a [DistanceField],
    current: &'a [Location],
    /// Successors per agent in canonical action order.
    options: Vec<Vec<Location>>,
    /// Store entries some successor could match, in greedy order.
    relevant: Vec<HeuristicPenalty>,
    /// Per relevant entry, each member's successor slot.
    slots: Vec<Vec<(AgentId, u8)>>,
    /// Relevant entry indices per agent.
    by_agent: Vec<Vec<usize>>,
    occupant: HashMap<Location, AgentId>,
    picked: RefCell<Vec<bool>>,
    order: RefCell<Vec<AgentId>>,
    /// Slot masks of every node generated so far. A node is determined by
    /// its masks, so a repeat is a duplicate subproblem.
    seen: HashSet<Vec<u8>>,
    priority_order: Option<Vec<AgentId>>,
    nodes: Vec<CtNode>,
    /// Node `i` owns `moves[i*n..(i+1)*n]` and `allowed[i*n..(i+1)*n]`
    /// (per agent: permitted successor slots, plus `FORCED` when a positive
    /// constraint pins the agent) and `statuses[i*r..(i+1)*r]`.
    moves: Vec<Location>,
    allowed: Vec<u8>,
    statuses: Vec<Status>,
    pub stats: StepStats,
}

impl<'a> ConstraintTree<'a> {
    pub fn new(
        map: &'a GridMap,
        tasks: &'a [AgentTask],
        fields: &'a [DistanceField],
        current: &'a Configuration,
        store: &PenaltyStore,
        priorities: &AgentPriorities,
    ) -> Self {
        let current = current.locations();
        let options: Vec<Vec<Location>> = current.iter().map(|&c| map.successors(c).collect()).collect();
        let mut relevant: Vec<HeuristicPenalty> = store.within(&options).into_iter().map(|i| store.entry(i).clone()).collect();
        relevant.sort_by(penalty_order);
        let mut by_agent = vec![Vec::new(); current.len()];
        for (k, hp) in relevant.iter().enumerate() {
            for a in hp.group.agents() {
                by_agent[a].push(k);
            }
        }
        let slots = relevant
            .iter()
            .map(|hp| hp.group.entries().iter().map(|&(a, l)| (a, slot_of(&options[a], l))).collect())
            .collect();
        ConstraintTree {
            tasks,
            fields,
            current,
            options,
            relevant,
            slots,
            by_agent,
            occupant: current.iter().enumerate().map(|(a, &l)| (l, a)).collect(),
            picked: RefCell::new(vec![false; current.len()]),
            order: RefCell::new((0..current.len()).collect()),
            seen: HashSet::new(),
            priority_order: priorities.order(),
            nodes: Vec::new(),
            moves: Vec::new(),
            allowed: Vec::new(),
            statuses: Vec::new(),
            stats: StepStats::default(),
        }
    }

    pub fn node(&self, id: NodeId) -> &CtNode {
        &self.nodes[id]
    }

    /// Chosen next location per agent at node `id`.
    pub fn moves(&self, id: NodeId) -> &[Location] {
        let n = self.current.len();
        &self.moves[id * n..(id + 1) * n]
    }

    fn node_allowed(&self, id: NodeId) -> &[u8] {
        let n = self.current.len();
        &self.allowed[id * n..(id + 1) * n]
    }

    fn status(&self, k: usize, allowed: &[u8]) -> Status {
        let mut all_forced = true;
        for &(a, slot) in &self.slots[k] {
            if allowed[a] & (1 << slot) == 0 {
                return Status::Cannot;
            }
            all_forced &= allowed[a] & FORCED != 0;
        }
        if all_forced {
            Status::Must
        } else {
            Status::Undecided
        }
    }


    /// Narrows `allowed` by one constraint.
    fn restrict(&self, allowed: &mut [u8], c: &Constraint) {
        let a = c.agent();
        let opts = &self.options[a];
        let bit = |l: Location| opts.iter().position(|&o| o == l).map_or(0, |s| 1u8 << s);
        match *c {
            Constraint::NegativeVertex { loc, .. } => allowed[a] &= !bit(loc),
            Constraint::PositiveVertex { loc, .. } => allowed[a] = (allowed[a] & bit(loc)) | FORCED,
            Constraint::NegativeEdge { from, to, .. } => {
                if from == self.current[a] && from != to {
                    allowed[a] &= !bit(to);
                }
            }
        }
        allowed[a] = normalize(allowed[a]);
    }

    fn root_allowed(&self) -> Vec<u8> {
        self.options.iter().map(|o| normalize(((1u16 << o.len()) - 1) as u8)).collect()
    }

    /// Replays greedy selection over the decided entries.
    ///
    /// Returns the penalty lower bound, the entries it counts, and the entry
    /// to branch on next (if the bound is not yet exact for `moves`).
    fn penalty_bound(&self, moves: &[Location], statuses: &[Status]) -> (Cost, usize, Option<usize>) {
        let mut picked = self.picked.borrow_mut();
        picked.iter_mut().for_each(|p| *p = false);
        let overlaps = |hp: &HeuristicPenalty, picked: &[bool]| hp.group.agents().any(|a| picked[a]);
        let mut sum = 0;
        let mut matched = 0;
        let mut first_match = None;
        for (k, hp) in self.relevant.iter().enumerate() {
            if statuses[k] == Status::Cannot || overlaps(hp, &picked) {
                continue;
            }
            if statuses[k] == Status::Must {
                for a in hp.group.agents() {
                    picked[a] = true;
                }
                sum += hp.penalty;
                matched += 1;
                continue;
            }
            // An undecided entry that could block a later forced entry
            // makes the rest of the replay unsound.
            let later = || {
                (k + 1..self.relevant.len())
                    .filter(|&m| statuses[m] == Status::Must && !overlaps(&self.relevant[m], &picked))
            };
            if later().any(|m| hp.group.shares_agent(&self.relevant[m].group)) {
                let tail = later().map(|m| self.relevant[m].penalty).max().unwrap_or(0);
                return (sum + tail, matched, Some(k));
            }
            if first_match.is_none() && hp.group.matches(moves) {
                first_match = Some(k);
            }
        }
        (sum, matched, first_match)
    }

    /// Vertex and swap collisions, lowest agent pair first.
    fn collisions(&self, moves: &[Location]) -> Vec<Conflict> {
        let mut out = Vec::new();
        let mut order = self.order.borrow_mut();
        order.sort_unstable_by_key(|&a| (moves[a], a));
        for w in order.chunk_by(|&x, &y| moves[x] == moves[y]) {
            for i in 0..w.len() {
                for j in (i + 1)..w.len() {
                    out.push(Conflict::Vertex { a: w[i], b: w[j], loc: moves[w[i]] });
                }
            }
        }
        for (a, (&from, &to)) in self.current.iter().zip(moves).enumerate() {
            if from == to {
                continue;
            }
            if let Some(&b) = self.occupant.get(&to) {
                if a < b && moves[b] == from {
                    out.push(Conflict::Edge { a, b, a_from: from, a_to: to });
                }
            }
        }
        out.sort_by_key(|c| match *c {
            Conflict::Vertex { a, b, .. } | Conflict::Edge { a, b, .. } => (a, b),
            Conflict::Heuristic { .. } => (usize::MAX, usize::MAX),
        });
        out
    }

    fn heuristic_conflict(&self, k: usize) -> Conflict {
        let hp = &self.relevant[k];
        Conflict::Heuristic { group: hp.group.clone(), penalty: hp.penalty }
    }

    /// Collision conflicts (lowest agent pair first) followed by at most one
    /// heuristic conflict, and the penalty lower bound, for `moves` under
    /// `constraints`.
    pub fn detect_conflicts(&self, moves: &[Location], constraints: &[Constraint]) -> (Vec<Conflict>, Cost) {
        let mut allowed = self.root_allowed();
        for c in constraints {
            self.restrict(&mut allowed, c);
        }
        let statuses: Vec<Status> = (0..self.relevant.len()).map(|k| self.status(k, &allowed)).collect();
        let (penalty, _, branch) = self.penalty_bound(moves, &statuses);
        let mut conflicts = self.collisions(moves);
        conflicts.extend(branch.map(|k| self.heuristic_conflict(k)));
        (conflicts, penalty)
    }

    /// Appends a node whose per-agent arrays are `allowed` and `moves`.
    /// `changed` lists the agents whose constraints differ from the parent's.
    fn make_node(&mut self, parent: Option<NodeId>, added: Vec<Constraint>, allowed: &[u8], moves: &[Location], changed: &[AgentId]) -> NodeId {
        let id = self.nodes.len();
        let r = self.relevant.len();
        match parent {
            None => {
                for k in 0..r {
                    let st = self.status(k, allowed);
                    self.statuses.push(st);
                }
            }
            Some(p) => {
                self.statuses.extend_from_within(p * r..(p + 1) * r);
                for &a in changed {
                    for &k in &self.by_agent[a] {
                        self.statuses[id * r + k] = self.status(k, allowed);
                    }
                }
            }
        }
        self.allowed.extend_from_slice(allowed);
        self.seen.insert(allowed.to_vec());
        self.moves.extend_from_slice(moves);
        let g = self.current.iter().zip(moves).zip(self.tasks).map(|((&a, &b), t)| step_cost(a, b, t.goal)).sum();
        let h_bd = moves.iter().enumerate().map(|(a, &l)| Cost::from(self.fields[a].get_or_max(l))).sum();
        let (penalty, matched, branch) = self.penalty_bound(moves, &self.statuses[id * r..(id + 1) * r]);
        let collisions = self.collisions(moves);
        let n_collisions = collisions.len();
        let n_conflicts = n_collisions + usize::from(branch.is_some());
        let conflict = collisions.into_iter().next().or_else(|| branch.map(|k| self.heuristic_conflict(k)));
        self.stats.nodes_generated += 1;
        self.nodes.push(CtNode { parent, added, g, h_bd, penalty, matched, conflict, n_conflicts, n_collisions });
        id
    }

    /// Same choice as [`low_level_best_move`], over the permitted slots.
    fn replan(&self, agent: AgentId, allowed: u8) -> Option<Location> {
        let (from, goal, field) = (self.current[agent], self.tasks[agent].goal, &self.fields[agent]);
        let mut best: Option<(u64, u32, Location)> = None;
        for (s, &to) in self.options[agent].iter().enumerate() {
            if allowed & (1 << s) == 0 {
                continue;
            }
            let Some(h) = field.get(to) else { continue };
            let key = step_cost(from, to, goal) + u64::from(h);
            if best.is_none_or(|(k, bh, _)| (key, h) < (k, bh)) {
                best = Some((key, h, to));
            }
        }
        best.map(|b| b.2)
    }

    /// Every constraint on the branch ending at `id`, root first.
    pub fn branch_constraints(&self, id: NodeId) -> Vec<Constraint> {
        let mut chain = Vec::new();
        let mut cur = Some(id);
        while let Some(n) = cur {
            chain.push(n);
            cur = self.nodes[n].parent;
        }
        chain.iter().rev().flat_map(|&n| self.nodes[n].added.iter().copied()).collect()
    }

    /// Plans every agent independently, in ascending id, with no constraints.
    pub fn root(&mut self) -> Result<NodeId, SsCbsError> {
        let allowed = self.root_allowed();
        let mut moves = Vec::with_capacity(self.current.len());
        for a in 0..self.current.len() {
            moves.push(self.replan(a, allowed[a]).ok_or(SsCbsError::Unreachable(a))?);
        }
        Ok(self.make_node(None, Vec::new(), &allowed, &moves, &[]))
    }

    /// Splits `node` on `conflict`. Children whose replanned agent has no
    /// feasible move are dropped.
    pub fn split_node(&mut self, node: NodeId, conflict: &Conflict) -> Vec<NodeId> {
        let mut branches: Vec<(Vec<Constraint>, Vec<AgentId>)> = Vec::new();
        match conflict {
            Conflict::Vertex { a, b, loc } => {
                for &agent in [a, b] {
                    branches.push((vec![Constraint::NegativeVertex { agent, loc: *loc }], vec![agent]));
                }
            }
            Conflict::Edge { a, b, a_from, a_to } => {
                branches.push((vec![Constraint::NegativeEdge { agent: *a, from: *a_from, to: *a_to }], vec![*a]));
                branches.push((vec![Constraint::NegativeEdge { agent: *b, from: *a_to, to: *a_from }], vec![*b]));
            }
            Conflict::Heuristic { group, .. } => {
                self.stats.heuristic_conflicts += 1;
                let allowed = self.node_allowed(node);
                let opts = &self.options;
                let is_forced = |agent: AgentId, loc: Location| {
                    allowed[agent] & FORCED != 0 && allowed[agent] & (1 << slot_of(&opts[agent], loc)) != 0
                };
                for &(agent, loc) in group.entries() {
                    if is_forced(agent, loc) {
                        continue;
                    }
                    branches.push((vec![Constraint::NegativeVertex { agent, loc }], vec![agent]));
                }
                let (added, agents): (Vec<_>, Vec<_>) = group
                    .entries()
                    .iter()
                    .filter(|&&(agent, loc)| !is_forced(agent, loc))
                    .map(|&(agent, loc)| (Constraint::PositiveVertex { agent, loc }, agent))
                    .unzip();
                branches.push((added, agents));
            }
        }
        let mut children = Vec::with_capacity(branches.len());
        let mut allowed = Vec::new();
        let mut moves = Vec::new();
        'branch: for (added, replan) in branches {
            allowed.clear();
            allowed.extend_from_slice(self.node_allowed(node));
            for c in &added {
                self.restrict(&mut allowed, c);
            }
            if self.seen.contains(&allowed) {
                self.stats.duplicates += 1;
                continue;
            }
            moves.clear();
            moves.extend_from_slice(self.moves(node));
            for &agent in &replan {
                match self.replan(agent, allowed[agent]) {
                    Some(l) => moves[agent] = l,
                    None => {
                        self.stats.children_pruned += 1;
                        continue 'branch;
                    }
                }
            }
            children.push(self.make_node(Some(node), added, &allowed, &moves, &replan));
        }
        children
    }

    /// Resolved conflicts on the branch ending at `goal`, merged into
    /// disjoint groups.
    ///
    /// A penalty can also couple agents without ever being split on this
    /// branch: it may have priced a pruned sibling. With [`GroupRule::Closed`],
    /// a penalty that spans groups merges them when it already matches the
    /// chosen step, or when one group could complete it alone (everyone else
    /// staying put) at a lower group `c + h` than it has now. Repeats until
    /// no such penalty is left.
    pub fn groups(&self, goal: NodeId, rule: GroupRule, store: &PenaltyStore) -> Vec<Vec<AgentId>> {
        let n = self.current.len();
        let mut sets: Vec<Vec<AgentId>> = Vec::new();
        let mut cur = self.nodes[goal].parent;
        while let Some(id) = cur {
            let node = &self.nodes[id];
            sets.extend(node.conflict.as_ref().map(Conflict::agents));
            cur = node.parent;
        }
        let moves = self.moves(goal);
        loop {
            let groups = extract_disjoint_groups(sets.iter().map(Vec::as_slice), n);
            if rule == GroupRule::Conflicts {
                return groups;
            }
            let mut of = vec![0; n];
            for (g, members) in groups.iter().enumerate() {
                for &a in members {
                    of[a] = g;
                }
            }
            let mut chosen: Vec<Option<Cost>> = vec![None; groups.len()];
            let before = sets.len();
            for hp in &self.relevant {
                let e = hp.group.entries();
                if e.iter().all(|&(a, _)| of[a] == of[e[0].0]) {
                    continue;
                }
                let mut away = e.iter().filter(|&&(a, l)| moves[a] != l).map(|&(a, _)| of[a]);
                let merge = match away.next() {
                    None => true,
                    Some(g) if away.all(|h| h == g) => {
                        let now = *chosen[g].get_or_insert_with(|| self.group_value(&groups[g], moves, store));
                        self.can_complete_below(&groups[g], hp, moves, store, now)
                    }
                    Some(_) => false,
                };
                if merge {
                    sets.push(hp.group.agents().collect());
                }
            }
            if sets.len() == before {
                return groups;
            }
        }
    }

    /// Step cost plus the group's own `h` with members at `locs`.
    fn group_value(&self, members: &[AgentId], locs: &[Location], store: &PenaltyStore) -> Cost {
        let step: Cost = members.iter().map(|&a| step_cost(self.current[a], locs[a], self.tasks[a].goal)).sum();
        let g = GroupConfiguration::new(members.iter().map(|&a| (a, locs[a])).collect());
        // unreachable cells never make it into a solution node
        step + evaluate_group_h(&g, self.fields, store, self.current.len()).unwrap_or(Cost::MAX / 2)
    }

    /// Whether `members` could move so that `hp` matches, everyone else
    /// staying at `moves`, for a group value below `bound`. Exact for small
    /// groups; larger ones use a distance-only lower bound.
    fn can_complete_below(&self, members: &[AgentId], hp: &HeuristicPenalty, moves: &[Location], store: &PenaltyStore, bound: Cost) -> bool {
        let mut locs = moves.to_vec();
        let mut free = Vec::new();
        for &a in members {
            match hp.group.location_of(a) {
                Some(l) => locs[a] = l,
                None => free.push(a),
            }
        }
        let best_move = |a: AgentId| {
            self.options[a].iter().filter_map(|&l| Some(step_cost(self.current[a], l, self.tasks[a].goal) + Cost::from(self.fields[a].get(l)?))).min()
        };
        if free.len() > 4 {
            let fixed: Cost = members
                .iter()
                .filter(|&&a| !free.contains(&a))
                .map(|&a| step_cost(self.current[a], locs[a], self.tasks[a].goal) + self.fields[a].get(locs[a]).map_or(Cost::MAX / 4, Cost::from))
                .sum();
            let rest: Cost = free.iter().map(|&a| best_move(a).unwrap_or(Cost::MAX / 4)).sum();
            return fixed + rest < bound;
        }
        let mut idx = vec![0usize; free.len()];
        loop {
            for (k, &a) in free.iter().enumerate() {
                locs[a] = self.options[a][idx[k]];
            }
            if self.collision_free(members, &locs) && self.group_value(members, &locs, store) < bound {
                return true;
            }
            let mut k = free.len();
            loop {
                if k == 0 {
                    return false;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < self.options[free[k]].len() {
                    break;
                }
                idx[k] = 0;
            }
        }
    }

    /// No vertex or swap collision involving `members`.
    fn collision_free(&self, members: &[AgentId], locs: &[Location]) -> bool {
        members.iter().all(|&a| {
            (0..locs.len()).all(|b| b == a || (locs[a] != locs[b] && !(locs[a] == self.current[b] && locs[b] == self.current[a])))
        })
    }

    fn key(&self, id: NodeId) -> OpenKey {
        let n = &self.nodes[id];
        let moves = self.moves(id);
        let lex = match &self.priority_order {
            Some(order) => order.iter().map(|&a| self.fields[a].get_or_max(moves[a])).collect(),
            None => Vec::new(),
        };
        OpenKey { f: n.f(), h: n.h(), g: n.g, conflicts: n.n_conflicts, lex, id }
    }
}

/// Open-list order: f, h, g, conflict count, then per-agent distances in
/// priority order, then creation order.
#[derive(Debug, Clone, PartialEq, Eq)]
struct OpenKey {
    f: Cost,
    h: Cost,
    g: Cost,
    conflicts: usize,
    lex: Vec<u32>,
    id: NodeId,
}

impl Ord for OpenKey {
    fn cmp(&self, o: &Self) -> Ordering {
        (self.f, self.h, self.g, self.conflicts, &self.lex, self.id).cmp(&(o.f, o.h, o.g, o.conflicts, &o.lex, o.id))
    }
}

impl PartialOrd for OpenKey {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Plans one joint step. With `suboptimality == 1` the returned step
/// minimises `c(C, C') + h(C')` exactly; above 1 a focal list keyed on
/// conflict count is used.
pub fn plan_step(
    map: &GridMap,
    tasks: &[AgentTask],
    current: &Configuration,
    store: &PenaltyStore,
    fields: &[DistanceField],
    priorities: &AgentPriorities,
    options: &SsCbsOptions,
) -> Result<StepResult, SsCbsError> {
    let mut tree = ConstraintTree::new(map, tasks, fields, current, store, priorities);
    let root = tree.root()?;
    let mut open = BTreeSet::new();
    open.insert(tree.key(root));
    let focal = options.suboptimality > 1.0;

    while let Some(first) = open.first() {
        if tree.stats.nodes_expanded.is_multiple_of(64) && options.deadline.is_some_and(|d| Instant::now() >= d) {
            return Err(SsCbsError::Timeout(tree.stats));
        }
        let key = if focal {
            let bound = first.f as f64 * options.suboptimality;
            let best = open
                .iter()
                .take_while(|k| k.f as f64 <= bound)
                .min_by(|a, b| a.conflicts.cmp(&b.conflicts).then_with(|| a.cmp(b)))
                .cloned()
                .expect("focal list contains the open head");
            open.remove(&best);
            best
        } else {
            open.pop_first().expect("non-empty")
        };
        tree.stats.nodes_expanded += 1;
        let node = &tree.nodes[key.id];
        if node.is_solution() {
            let next = Configuration::new(tree.moves(key.id).to_vec());
            let (value, h) = (node.f(), node.h());
            tree.stats.hps_matched = node.matched;
            let groups = tree.groups(key.id, options.groups, store);
            return Ok(StepResult { next, groups, value, h, stats: tree.stats });
        }
        let conflict = node.conflict.clone().expect("non-solution node has a conflict");
        for child in tree.split_node(key.id, &conflict) {
            open.insert(tree.key(child));
        }
    }
    Err(SsCbsError::Exhausted(tree.stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heuristics::distance_fields;

    fn loc(r: u32, c: u32) -> Location {
        Location::new(r, c)
    }

    fn gc(v: &[(AgentId, Location)]) -> GroupConfiguration {
        GroupConfiguration::new(v.to_vec())
    }

    #[test]
    fn low_level_at_goal_waits() {
        let map = GridMap::open(3, 3);
        let f = crate::heuristics::backward_dijkstra(&map, loc(1, 1)).unwrap();
        assert_eq!(low_level_best_move(&map, loc(1, 1), loc(1, 1), &f, &[]), Some(loc(1, 1)));
    }

    #[test]
    fn low_level_respects_negative_vertex() {
        // corridor with a side cell: . . . / . @ @
        let map = GridMap::from_rows(&["...", ".@@"]).unwrap();
        let goal = loc(0, 2);
        let f = crate::heuristics::backward_dijkstra(&map, goal).unwrap();
        let from = loc(0, 1);
        assert_eq!(low_level_best_move(&map, from, goal, &f, &[]), Some(goal));
        let c = [Constraint::NegativeVertex { agent: 0, loc: goal }];
        // remaining: wait (1 + 1), left (1 + 2) -> wait
        assert_eq!(low_level_best_move(&map, from, goal, &f, &c), Some(from));
        let c2 = [c[0], Constraint::NegativeVertex { agent: 0, loc: from }];
        assert_eq!(low_level_best_move(&map, from, goal, &f, &c2), Some(loc(0, 0)));
        let c3 = [c2[0], c2[1], Constraint::NegativeVertex { agent: 0, loc: loc(0, 0) }];
        assert_eq!(low_level_best_move(&map, from, goal, &f, &c3), None);
    }

    #[test]
    fn low_level_positive_forces_move() {
        let map = GridMap::open(3, 3);
        let goal = loc(1, 2);
        let f = crate::heuristics::backward_dijkstra(&map, goal).unwrap();
        let c = [Constraint::PositiveVertex { agent: 0, loc: loc(1, 0) }];
        assert_eq!(low_level_best_move(&map, loc(1, 1), goal, &f, &c), Some(loc(1, 0)));
        let bad = [c[0], Constraint::PositiveVertex { agent: 0, loc: loc(0, 1) }];
        assert_eq!(low_level_best_move(&map, loc(1, 1), goal, &f, &bad), None);
        let far = [Constraint::PositiveVertex { agent: 0, loc: loc(2, 2) }];
        assert_eq!(low_level_best_move(&map, loc(1, 1), goal, &f, &far), None);
    }

    #[test]
    fn groups_merge() {
        let sets: Vec<&[AgentId]> = vec![&[0, 1], &[1, 2]];
        assert_eq!(extract_disjoint_groups(sets, 4), vec![vec![0, 1, 2], vec![3]]);
        let sets: Vec<&[AgentId]> = vec![&[0, 1], &[2, 3]];
        assert_eq!(extract_disjoint_groups(sets, 5), vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert_eq!(extract_disjoint_groups(Vec::<&[AgentId]>::new(), 3), vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn penalty_priced_in_pruned_sibling_couples_groups() {
        let map = GridMap::from_rows(&[".....", ".....", ".@...", "....."]).unwrap();
        let tasks = vec![
            AgentTask { id: 0, start: loc(1, 4), goal: loc(2, 0) },
            AgentTask { id: 1, start: loc(1, 0), goal: loc(3, 4) },
            AgentTask { id: 2, start: loc(0, 0), goal: loc(3, 0) },
        ];
        let fields = distance_fields(&map, &tasks).unwrap();
        let mut store = PenaltyStore::new();
        store.upsert(gc(&[(0, loc(1, 3)), (2, loc(1, 0))]), 24);
        store.upsert(gc(&[(1, loc(1, 1)), (2, loc(1, 0))]), 26);
        let cur = Configuration::new(tasks.iter().map(|t| t.start).collect());
        let plan = |groups| {
            let opts = SsCbsOptions { groups, ..SsCbsOptions::default() };
            plan_step(&map, &tasks, &cur, &store, &fields, &AgentPriorities::none(3), &opts).unwrap()
        };
        let improves = |r: &StepResult| crate::oracle::find_group_improvement(&map, &tasks, &cur, &r.next, &r.groups, &store, &fields).unwrap();

        // splitting {1,2} sends agent 2 into the {0,2} penalty; that sibling
        // is pruned, so the branch alone never couples agent 0
        let loose = plan(GroupRule::Conflicts);
        assert_eq!(loose.groups, vec![vec![0], vec![1, 2]]);
        assert!(improves(&loose).is_some());

        let closed = plan(GroupRule::Closed);
        assert_eq!(closed.value, loose.value);
        assert_eq!(closed.groups, vec![vec![0, 1, 2]]);
        assert_eq!(improves(&closed), None);
    }

    fn line_tasks(pairs: &[(u32, u32)]) -> Vec<AgentTask> {
        pairs.iter().enumerate().map(|(id, &(s, g))| AgentTask { id, start: loc(0, s), goal: loc(0, g) }).collect()
    }

    #[test]
    fn single_agent_moves_toward_goal() {
        let map = GridMap::open(5, 5);
        let tasks = vec![AgentTask { id: 0, start: loc(2, 0), goal: loc(2, 4) }];
        let fields = distance_fields(&map, &tasks).unwrap();
        let cur = Configuration::starts(&tasks);
        let r = plan_step(&map, &tasks, &cur, &PenaltyStore::new(), &fields, &AgentPriorities::none(1), &SsCbsOptions::default()).unwrap();
        assert_eq!(r.next.get(0), loc(2, 1));
        assert_eq!(r.h, 3);
        assert_eq!(r.value, 4);
        assert_eq!(r.groups, vec![vec![0]]);
    }

    #[test]
    fn vertex_conflict_split_has_two_children() {
        let map = GridMap::open(3, 1);
        let tasks = line_tasks(&[(0, 2), (2, 0)]);
        let fields = distance_fields(&map, &tasks).unwrap();
        let cur = Configuration::starts(&tasks);
        let store = PenaltyStore::new();
        let pr = AgentPriorities::none(2);
        let mut t = ConstraintTree::new(&map, &tasks, &fields, &cur, &store, &pr);
        let root = t.root().unwrap();
        let c = t.node(root).conflict.clone().unwrap();
        assert_eq!(c, Conflict::Vertex { a: 0, b: 1, loc: loc(0, 1) });
        let kids = t.split_node(root, &c);
        assert_eq!(kids.len(), 2);
        assert_ne!(t.moves(kids[0])[0], loc(0, 1));
        assert_eq!(t.moves(kids[0])[1], loc(0, 1));
        assert_ne!(t.moves(kids[1])[1], loc(0, 1));
    }

    #[test]
    fn heuristic_conflict_prefers_highest_penalty() {
        let map = GridMap::open(4, 2);
        let tasks: Vec<AgentTask> = (0..4).map(|i| AgentTask { id: i, start: loc(0, i as u32), goal: loc(0, i as u32) }).collect();
        let fields = distance_fields(&map, &tasks).unwrap();
        let cur = Configuration::starts(&tasks);
        let mut store = PenaltyStore::new();
        store.upsert(gc(&[(1, loc(0, 1)), (2, loc(0, 2))]), 50);
        store.upsert(gc(&[(2, loc(0, 2)), (3, loc(0, 3))]), 20);
        let pr = AgentPriorities::none(4);
        let mut t = ConstraintTree::new(&map, &tasks, &fields, &cur, &store, &pr);
        let root = t.root().unwrap();
        let n = t.node(root);
        assert_eq!(n.conflict, Some(Conflict::Heuristic { group: gc(&[(1, loc(0, 1)), (2, loc(0, 2))]), penalty: 50 }));
        assert_eq!(n.n_conflicts, 1);
        assert_eq!(n.penalty, 0);
    }

    #[test]
    fn collision_free_empty_store_has_no_conflicts() {
        let map = GridMap::open(4, 4);
        let tasks = vec![AgentTask { id: 0, start: loc(0, 0), goal: loc(0, 3) }, AgentTask { id: 1, start: loc(3, 0), goal: loc(3, 3) }];
        let fields = distance_fields(&map, &tasks).unwrap();
        let cur = Configuration::starts(&tasks);
        let store = PenaltyStore::new();
        let pr = AgentPriorities::none(2);
        let mut t = ConstraintTree::new(&map, &tasks, &fields, &cur, &store, &pr);
        let root = t.root().unwrap();
        assert!(t.node(root).is_solution());
    }

    #[test]
    fn priorities_update() {
        let map = GridMap::open(4, 1);
        let tasks = line_tasks(&[(0, 3), (3, 3 - 3)]);
        let fields = distance_fields(&map, &tasks).unwrap();
        let mut p = AgentPriorities::new(TieBreak::Distance, &tasks, &fields, 0);
        assert_eq!(p.values(), &[3.0, 3.0]);
        p.advance(&Configuration::new(vec![loc(0, 1), loc(0, 0)]), &tasks);
        assert_eq!(p.values(), &[4.0, 0.0]);
        let mut none = AgentPriorities::new(TieBreak::None, &tasks, &fields, 0);
        none.advance(&Configuration::new(vec![loc(0, 1), loc(0, 2)]), &tasks);
        assert_eq!(none.values(), &[0.0, 0.0]);
    }
}
