//! The execution loop: plan, learn penalties for coupled groups, commit,
//! repeat until every agent sits on its goal.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::heuristics::{evaluate_group_h, group_h_bd, DistanceField, HeuristicError, PenaltyStore, Upsert};
use crate::model::{joint_cost, step_cost, valid_joint_transition, AgentId, AgentTask, Configuration, Cost, GridMap, Instance};
use crate::sscbs::{plan_step, AgentPriorities, GroupRule, SsCbsError, SsCbsOptions};
use crate::wcbs::{plan_window, WcbsError, WcbsOptions};

pub const DEFAULT_LIVELOCK_THRESHOLD: usize = 100;

#[derive(Debug, Clone)]
pub enum AgError {
    Timeout,
    Failure(String),
}

/// What an action generator hands back to the loop.
#[derive(Debug, Clone)]
pub struct AgOutput {
    /// Planned configurations after the current one; at least one.
    pub steps: Vec<Configuration>,
    /// How many of `steps` to execute.
    pub commit: usize,
    /// Disjoint coupled groups (SS-CBS only; empty otherwise).
    pub groups: Vec<Vec<AgentId>>,
    pub hp_conflicts: usize,
}

pub trait ActionGenerator {
    fn name(&self) -> String;

    /// Whether the loop should learn penalties from this generator's groups.
    fn uses_penalties(&self) -> bool;

    fn plan(&mut self, current: &Configuration, store: &PenaltyStore, deadline: Option<Instant>) -> Result<AgOutput, AgError>;

    /// Called for every executed configuration.
    fn observe(&mut self, _executed: &Configuration) {}
}

pub struct SsCbsGenerator<'a> {
    map: &'a GridMap,
    tasks: &'a [AgentTask],
    fields: &'a [DistanceField],
    priorities: AgentPriorities,
    suboptimality: f64,
    group_rule: GroupRule,
}

impl<'a> SsCbsGenerator<'a> {
    pub fn new(instance: &'a Instance, fields: &'a [DistanceField], priorities: AgentPriorities, suboptimality: f64) -> Self {
        SsCbsGenerator { map: &instance.map, tasks: &instance.tasks, fields, priorities, suboptimality, group_rule: GroupRule::default() }
    }

    pub fn with_group_rule(mut self, rule: GroupRule) -> Self {
        self.group_rule = rule;
        self
    }
}

impl ActionGenerator for SsCbsGenerator<'_> {
    fn name(&self) -> String {
        "sscbs".into()
    }

    fn uses_penalties(&self) -> bool {
        true
    }

    fn plan(&mut self, current: &Configuration, store: &PenaltyStore, deadline: Option<Instant>) -> Result<AgOutput, AgError> {
        let options = SsCbsOptions { suboptimality: self.suboptimality, deadline, groups: self.group_rule };
        match plan_step(self.map, self.tasks, current, store, self.fields, &self.priorities, &options) {
            Ok(r) => Ok(AgOutput { steps: vec![r.next], commit: 1, groups: r.groups, hp_conflicts: r.stats.heuristic_conflicts }),
            Err(SsCbsError::Timeout(_)) => Err(AgError::Timeout),
            Err(e) => Err(AgError::Failure(e.to_string())),
        }
    }

    fn observe(&mut self, executed: &Configuration) {
        self.priorities.advance(executed, self.tasks);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitPolicy {
    /// Execute the whole window.
    Window,
    /// Execute one step, then replan.
    Single,
}

pub struct WcbsGenerator<'a> {
    map: &'a GridMap,
    tasks: &'a [AgentTask],
    fields: &'a [DistanceField],
    window: usize,
    commit: CommitPolicy,
    suboptimality: f64,
}

impl<'a> WcbsGenerator<'a> {
    pub fn new(instance: &'a Instance, fields: &'a [DistanceField], window: usize, commit: CommitPolicy, suboptimality: f64) -> Self {
        WcbsGenerator { map: &instance.map, tasks: &instance.tasks, fields, window, commit, suboptimality }
    }
}

impl ActionGenerator for WcbsGenerator<'_> {
    fn name(&self) -> String {
        "wcbs".into()
    }

    fn uses_penalties(&self) -> bool {
        false
    }

    fn plan(&mut self, current: &Configuration, _store: &PenaltyStore, deadline: Option<Instant>) -> Result<AgOutput, AgError> {
        let options = WcbsOptions { suboptimality: self.suboptimality, deadline, ..WcbsOptions::default() };
        match plan_window(self.map, self.tasks, current, self.window, self.fields, &options) {
            Ok(w) => {
                let steps: Vec<Configuration> = (1..=self.window).map(|t| w.config_at(t)).collect();
                let commit = match self.commit {
                    CommitPolicy::Window => steps.len(),
                    CommitPolicy::Single => 1,
                };
                Ok(AgOutput { steps, commit, groups: Vec::new(), hp_conflicts: 0 })
            }
            Err(WcbsError::Timeout(_)) => Err(AgError::Timeout),
            Err(e) => Err(AgError::Failure(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Solved,
    Timeout,
    Livelock,
    AgFailure,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Solved => "solved",
            Outcome::Timeout => "timeout",
            Outcome::Livelock => "livelock",
            Outcome::AgFailure => "ag-failure",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExecutionResult {
    pub outcome: Outcome,
    /// Sum of costs of the executed steps.
    pub cost: Cost,
    /// Executed timesteps (makespan when solved).
    pub iterations: usize,
    /// Action-generator calls.
    pub plans: usize,
    /// Wall time of each action-generator call, in milliseconds.
    pub iteration_ms: Vec<f64>,
    pub total_ms: f64,
    pub hps_created: usize,
    pub hp_conflicts: usize,
    pub final_config: Configuration,
}

impl ExecutionResult {
    pub fn solved(&self) -> bool {
        self.outcome == Outcome::Solved
    }

    pub fn median_iter_ms(&self) -> f64 {
        if self.iteration_ms.is_empty() {
            return 0.0;
        }
        let mut v = self.iteration_ms.clone();
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 1 {
            v[m]
        } else {
            (v[m - 1] + v[m]) / 2.0
        }
    }

    pub fn max_iter_ms(&self) -> f64 {
        self.iteration_ms.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WrittenPenalty {
    pub group: String,
    pub penalty: i64,
    pub stored: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub configuration: Configuration,
    pub next: Configuration,
    pub groups: Vec<Vec<AgentId>>,
    pub penalties: Vec<WrittenPenalty>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ExecutionTrace {
    pub entries: Vec<TraceEntry>,
}

impl ExecutionTrace {
    /// One JSON object per line.
    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Limits {
    pub time_budget: Option<Duration>,
    /// Executed-step cap; `None` uses `64 * (N + sum of start distances)`.
    pub iteration_cap: Option<usize>,
    /// A configuration visited more than this many times is a livelock.
    /// Only applied to generators that do not learn penalties.
    pub livelock_threshold: usize,
    pub record_trace: bool,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { time_budget: None, iteration_cap: None, livelock_threshold: DEFAULT_LIVELOCK_THRESHOLD, record_trace: false }
    }
}

pub fn default_iteration_cap(instance: &Instance, fields: &[DistanceField]) -> usize {
    let sum: usize = instance.tasks.iter().map(|t| fields[t.id].get(t.start).unwrap_or(0) as usize).sum();
    64 * (instance.num_agents() + sum)
}

/// Learns penalties for every coupled group of the chosen step.
///
/// For group `G` with current `cur` and next `nxt`, stores
/// `max(h(cur), c(cur, nxt) + h(nxt)) - h_BD(cur)` when positive. Singleton
/// groups are skipped.
pub fn apply_group_updates(
    tasks: &[AgentTask],
    current: &Configuration,
    next: &Configuration,
    groups: &[Vec<AgentId>],
    fields: &[DistanceField],
    store: &mut PenaltyStore,
) -> Result<Vec<WrittenPenalty>, HeuristicError> {
    let n = tasks.len();
    // evaluate everything against the store as it was before this step
    let mut updates = Vec::new();
    for g in groups.iter().filter(|g| g.len() > 1) {
        let cur = current.group(g);
        let nxt = next.group(g);
        let h_cur = evaluate_group_h(&cur, fields, store, n)?;
        let h_next = evaluate_group_h(&nxt, fields, store, n)?;
        let c: Cost = g.iter().map(|&a| step_cost(current[a], next[a], tasks[a].goal)).sum();
        let h_new = h_cur.max(c + h_next);
        let candidate = h_new as i64 - group_h_bd(&cur, fields)? as i64;
        updates.push((cur, candidate));
    }
    let mut written = Vec::new();
    for (group, candidate) in updates {
        let label = group.to_string();
        let stored = store.upsert(group, candidate) != Upsert::Unchanged;
        if candidate > 0 {
            written.push(WrittenPenalty { group: label, penalty: candidate, stored });
        }
    }
    Ok(written)
}

/// Runs one episode from the instance's starts.
pub fn run_episode(
    instance: &Instance,
    fields: &[DistanceField],
    ag: &mut dyn ActionGenerator,
    limits: &Limits,
) -> (ExecutionResult, ExecutionTrace) {
    run_episode_in(instance, fields, ag, limits, &mut PenaltyStore::new())
}

/// [`run_episode`] against a caller-owned penalty store, which is left
/// holding everything learned.
pub fn run_episode_in(
    instance: &Instance,
    fields: &[DistanceField],
    ag: &mut dyn ActionGenerator,
    limits: &Limits,
    store: &mut PenaltyStore,
) -> (ExecutionResult, ExecutionTrace) {
    let t0 = Instant::now();
    let deadline = limits.time_budget.map(|b| t0 + b);
    let cap = limits.iteration_cap.unwrap_or_else(|| default_iteration_cap(instance, fields));
    let goal = instance.goals();
    let learn = ag.uses_penalties();

    let mut trace = ExecutionTrace::default();
    let mut visits: HashMap<Configuration, usize> = HashMap::new();
    let mut cur = instance.starts();
    let mut cost = 0;
    let mut iterations = 0;
    let mut iteration_ms = Vec::new();
    let mut hps_created = 0;
    let mut hp_conflicts = 0;
    if !learn {
        visits.insert(cur.clone(), 1);
    }

    let outcome = 'run: loop {
        if cur == goal {
            break Outcome::Solved;
        }
        if iterations >= cap || deadline.is_some_and(|d| Instant::now() >= d) {
            break Outcome::Timeout;
        }
        let t = Instant::now();
        let out = ag.plan(&cur, store, deadline);
        iteration_ms.push(t.elapsed().as_secs_f64() * 1e3);
        let out = match out {
            Ok(o) => o,
            Err(AgError::Timeout) => break Outcome::Timeout,
            Err(AgError::Failure(_)) => break Outcome::AgFailure,
        };
        hp_conflicts += out.hp_conflicts;
        let Some(first) = out.steps.first() else {
            break Outcome::AgFailure;
        };
        let written = if learn {
            match apply_group_updates(&instance.tasks, &cur, first, &out.groups, fields, store) {
                Ok(w) => w,
                Err(_) => break Outcome::AgFailure,
            }
        } else {
            Vec::new()
        };
        hps_created += written.iter().filter(|w| w.stored).count();
        if limits.record_trace {
            let next = out.steps[out.commit.max(1).min(out.steps.len()) - 1].clone();
            trace.entries.push(TraceEntry { iteration: iterations, configuration: cur.clone(), next, groups: out.groups.clone(), penalties: written });
        }
        for step in out.steps.into_iter().take(out.commit.max(1)) {
            if !valid_joint_transition(&cur, &step, &instance.map).unwrap_or(false) {
                break 'run Outcome::AgFailure;
            }
            cost += joint_cost(&cur, &step, &instance.tasks);
            iterations += 1;
            ag.observe(&step);
            cur = step;
            if !learn {
                let v = visits.entry(cur.clone()).or_insert(0);
                *v += 1;
                if *v > limits.livelock_threshold {
                    break 'run Outcome::Livelock;
                }
            }
            if cur == goal {
                break;
            }
        }
    };

    let result = ExecutionResult {
        outcome,
        cost,
        iterations,
        plans: iteration_ms.len(),
        iteration_ms,
        total_ms: t0.elapsed().as_secs_f64() * 1e3,
        hps_created,
        hp_conflicts,
        final_config: cur,
    };
    (result, trace)
}
