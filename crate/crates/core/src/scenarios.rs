//! Instance generators: reconstructed congested maps and random grids.
//!
//! The congested maps are topological reconstructions, not the original
//! benchmark files. Each one buries a reordering that takes more than 16
//! steps to pay off, so windowed planners see no improving window.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{AgentTask, GridMap, Instance, Location};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{kind} supports {min}..={max} agents, got {got}")]
    AgentCount { kind: ScenarioKind, min: usize, max: usize, got: usize },
    #[error("map has only {free} free cells for {agents} agents")]
    TooCrowded { free: usize, agents: usize },
    #[error("no suitable map after {0} attempts")]
    Attempts(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioKind {
    CorridorSwap,
    Tunnel,
    Loopchain,
    Connector,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [ScenarioKind::CorridorSwap, ScenarioKind::Tunnel, ScenarioKind::Loopchain, ScenarioKind::Connector];

    pub fn agent_range(self) -> (usize, usize) {
        match self {
            ScenarioKind::CorridorSwap => (2, 2),
            ScenarioKind::Tunnel => (3, 4),
            ScenarioKind::Loopchain => (6, 7),
            ScenarioKind::Connector => (5, 6),
        }
    }

    pub fn default_depth(self) -> usize {
        match self {
            ScenarioKind::CorridorSwap => 10,
            ScenarioKind::Tunnel => 3,
            ScenarioKind::Loopchain => 5,
            ScenarioKind::Connector => 5,
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::CorridorSwap => "corridor-swap",
            ScenarioKind::Tunnel => "tunnel",
            ScenarioKind::Loopchain => "loopchain",
            ScenarioKind::Connector => "connector",
        })
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "corridor-swap" => Ok(ScenarioKind::CorridorSwap),
            "tunnel" => Ok(ScenarioKind::Tunnel),
            "loopchain" => Ok(ScenarioKind::Loopchain),
            "connector" => Ok(ScenarioKind::Connector),
            _ => Err(format!("unknown scenario kind `{s}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    /// e.g. `tunnel-4-s3-reconstructed`
    pub name: String,
    pub instance: Instance,
}

/// Character canvas that becomes a map; everything starts blocked.
struct Canvas {
    rows: Vec<Vec<u8>>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Canvas { rows: vec![vec![b'@'; width]; height] }
    }

    fn open(&mut self, r: usize, c: usize) {
        self.rows[r][c] = b'.';
    }

    fn open_rect(&mut self, r0: usize, c0: usize, h: usize, w: usize) {
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                self.open(r, c);
            }
        }
    }

    fn build(self) -> GridMap {
        let rows: Vec<String> = self.rows.into_iter().map(|r| String::from_utf8(r).expect("ascii")).collect();
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        GridMap::from_rows(&refs).expect("canvas rows are rectangular")
    }
}

fn loc(r: usize, c: usize) -> Location {
    Location::new(r as u32, c as u32)
}

/// Applies the seed: optional horizontal mirror, then a label shuffle.
fn finish(kind: ScenarioKind, n: usize, seed: u64, map: GridMap, pairs: Vec<(Location, Location)>) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mirror = rng.gen::<bool>();
    let w = map.width();
    let flip = |l: Location| if mirror { Location::new(l.row, w - 1 - l.col) } else { l };
    let map = if mirror {
        let blocked = (0..map.num_cells()).map(|i| map.is_blocked(flip(map.location(i)))).collect();
        GridMap::new(map.width(), map.height(), blocked)
    } else {
        map
    };
    let mut pairs: Vec<_> = pairs.into_iter().map(|(s, g)| (flip(s), flip(g))).collect();
    pairs.shuffle(&mut rng);
    let tasks = pairs.into_iter().enumerate().map(|(id, (start, goal))| AgentTask { id, start, goal }).collect();
    let instance = Instance::new(map, tasks).expect("generated tasks are valid");
    Scenario { name: format!("{kind}-{n}-s{seed}-reconstructed"), instance }
}

/// Builds a congested scenario at the kind's default depth. The seed
/// mirrors the map and shuffles agent labels.
pub fn generate(kind: ScenarioKind, n: usize, seed: u64) -> Result<Scenario, ScenarioError> {
    generate_with_depth(kind, n, seed, kind.default_depth())
}

/// Like [`generate`], with an explicit depth: how far the reordering sits
/// from the free space it needs.
pub fn generate_with_depth(kind: ScenarioKind, n: usize, seed: u64, depth: usize) -> Result<Scenario, ScenarioError> {
    let (min, max) = kind.agent_range();
    if n < min || n > max {
        return Err(ScenarioError::AgentCount { kind, min, max, got: n });
    }
    let (map, pairs) = match kind {
        ScenarioKind::CorridorSwap => corridor_swap(depth),
        ScenarioKind::Tunnel => tunnel(n, depth),
        ScenarioKind::Loopchain => loopchain(n, depth),
        ScenarioKind::Connector => connector(n, depth),
    };
    Ok(finish(kind, n, seed, map, pairs))
}

/// 1-wide corridor with a single pocket cell far to one side. The two
/// agents start on each other's goals, so swapping means one of them
/// backs all the way into the pocket.
fn corridor_swap(gap: usize) -> (GridMap, Vec<(Location, Location)>) {
    let len = gap + 4;
    let mut cv = Canvas::new(len, 2);
    cv.open_rect(0, 0, 1, len);
    cv.open(1, 1);
    let c = 1 + gap;
    let (a, b) = (loc(0, c), loc(0, c + 1));
    (cv.build(), vec![(a, b), (b, a)])
}

/// Chamber agents on rows `row_cells`: start in column `back`, park in
/// column `mouth`.
fn flankers(row_cells: [usize; 2], back: usize, mouth: usize) -> [(Location, Location); 2] {
    [(loc(row_cells[0], back), loc(row_cells[0], mouth)), (loc(row_cells[1], back), loc(row_cells[1], mouth))]
}

/// Small chamber with a dead-end tunnel. The agents fill the far end of the
/// tunnel in reverse goal order, so all of them have to back out into the
/// chamber and re-enter in the opposite order.
fn tunnel(n: usize, depth: usize) -> (GridMap, Vec<(Location, Location)>) {
    // 2 rows x 3 cols chamber; the tunnel leaves from its bottom row
    let width = 3 + depth + n;
    let mut cv = Canvas::new(width, 2);
    cv.open_rect(0, 0, 2, 3);
    cv.open_rect(1, 3, 1, depth + n);
    let first = width - n;
    let pairs = (0..n).map(|i| (loc(1, first + i), loc(1, width - 1 - i))).collect();
    (cv.build(), pairs)
}

/// A ring with a dead-end chain hanging off it. The two agents at the end
/// of the chain stand on each other's goals; the rest sit on the ring and
/// each has to advance one cell clockwise.
fn loopchain(n: usize, depth: usize) -> (GridMap, Vec<(Location, Location)>) {
    // ring: perimeter of rows 0..4, cols 0..4 (12 cells)
    let width = 4 + depth + 2;
    let mut cv = Canvas::new(width, 4);
    cv.open_rect(0, 0, 1, 4);
    cv.open_rect(3, 0, 1, 4);
    cv.open_rect(0, 0, 4, 1);
    cv.open_rect(0, 3, 4, 1);
    cv.open_rect(1, 4, 1, depth + 2);
    let (a, b) = (loc(1, width - 1), loc(1, width - 2));
    let mut pairs = vec![(a, b), (b, a)];
    let ring = [loc(0, 0), loc(0, 1), loc(0, 2), loc(0, 3), loc(1, 3), loc(2, 3), loc(3, 3), loc(3, 2), loc(3, 1), loc(3, 0), loc(2, 0), loc(1, 0)];
    let slots = [0usize, 2, 6, 8, 10];
    for &s in slots.iter().take(n - 2) {
        pairs.push((ring[s], ring[(s + 1) % ring.len()]));
    }
    (cv.build(), pairs)
}

/// Two 3x3 chambers joined by a 1-wide connector. Two agents in the middle
/// of the connector stand on each other's goals; the rest park beside the
/// connector mouths.
fn connector(n: usize, depth: usize) -> (GridMap, Vec<(Location, Location)>) {
    let len = 2 * depth + 2;
    let width = 3 + len + 3;
    let right = 3 + len;
    let mut cv = Canvas::new(width, 3);
    cv.open_rect(0, 0, 3, 3);
    cv.open_rect(0, right, 3, 3);
    cv.open_rect(1, 3, 1, len);
    let (a, b) = (loc(1, 3 + depth), loc(1, 4 + depth));
    let mut pairs = vec![(a, b), (b, a)];
    let [l0, l1] = flankers([0, 2], 0, 2);
    let [r0, r1] = flankers([0, 2], right + 2, right);
    pairs.extend([l0, r0, l1, r1].into_iter().take(n - 2));
    (cv.build(), pairs)
}

/// Uniform random obstacles at `obstacle_ratio`.
pub fn random_map(width: u32, height: u32, obstacle_ratio: f64, rng: &mut impl Rng) -> GridMap {
    let blocked = (0..(width * height)).map(|_| rng.gen_bool(obstacle_ratio)).collect();
    GridMap::new(width, height, blocked)
}

/// Blocks every free cell outside the largest 4-connected component.
pub fn keep_largest_component(map: &GridMap) -> GridMap {
    let comp = components(map);
    let mut sizes = std::collections::HashMap::new();
    for c in comp.iter().flatten() {
        *sizes.entry(*c).or_insert(0usize) += 1;
    }
    let best = sizes.iter().max_by_key(|(&c, &s)| (s, std::cmp::Reverse(c))).map(|(&c, _)| c);
    let blocked = comp.iter().map(|c| *c != best || c.is_none()).collect();
    GridMap::new(map.width(), map.height(), blocked)
}

fn components(map: &GridMap) -> Vec<Option<usize>> {
    let mut comp = vec![None; map.num_cells()];
    let mut next = 0;
    for i in 0..map.num_cells() {
        let l = map.location(i);
        if comp[i].is_some() || !map.is_free(l) {
            continue;
        }
        let mut stack = vec![l];
        comp[i] = Some(next);
        while let Some(u) = stack.pop() {
            for v in map.neighbors(u) {
                let j = map.index(v);
                if comp[j].is_none() {
                    comp[j] = Some(next);
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    comp
}

pub fn is_connected(map: &GridMap) -> bool {
    let comp = components(map);
    let mut ids = comp.iter().flatten();
    match ids.next() {
        None => false,
        Some(&first) => ids.all(|&c| c == first),
    }
}

/// Free-cell graph is connected and has no articulation point.
pub fn is_biconnected(map: &GridMap) -> bool {
    if !is_connected(map) {
        return false;
    }
    let free: Vec<Location> = map.free_cells().collect();
    if free.len() < 3 {
        return free.len() == 2 || free.len() == 1;
    }
    let n = map.num_cells();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut time = 0;
    let root = free[0];
    // iterative DFS: (vertex, parent, neighbor cursor)
    let mut stack: Vec<(Location, Option<Location>, usize)> = vec![(root, None, 0)];
    let mut root_children = 0;
    disc[map.index(root)] = time;
    low[map.index(root)] = time;
    time += 1;
    while let Some(&mut (u, parent, ref mut cursor)) = stack.last_mut() {
        let nbrs: Vec<Location> = map.neighbors(u).collect();
        if *cursor < nbrs.len() {
            let v = nbrs[*cursor];
            *cursor += 1;
            let (ui, vi) = (map.index(u), map.index(v));
            if disc[vi] == usize::MAX {
                disc[vi] = time;
                low[vi] = time;
                time += 1;
                if parent.is_none() {
                    root_children += 1;
                }
                stack.push((v, Some(u), 0));
            } else if Some(v) != parent {
                low[ui] = low[ui].min(disc[vi]);
            }
        } else {
            stack.pop();
            if let Some(p) = parent {
                let (ui, pi) = (map.index(u), map.index(p));
                low[pi] = low[pi].min(low[ui]);
                if p != root && low[ui] >= disc[pi] {
                    return false;
                }
            }
        }
    }
    root_children <= 1
}

/// Whether the free-cell graph is a single simple cycle.
pub fn is_cycle(map: &GridMap) -> bool {
    is_connected(map) && map.free_cells().all(|l| map.neighbors(l).count() == 2)
}

/// Random instance with distinct random starts and goals. With
/// `require_solvable`, the free graph must be biconnected, not a cycle, and
/// keep at least two cells unoccupied, which guarantees a solution.
pub fn random_instance(width: u32, height: u32, obstacle_ratio: f64, n: usize, require_solvable: bool, seed: u64) -> Result<Instance, ScenarioError> {
    const ATTEMPTS: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..ATTEMPTS {
        let map = random_map(width, height, obstacle_ratio, &mut rng);
        let ok = if require_solvable { is_biconnected(&map) && !is_cycle(&map) } else { is_connected(&map) };
        if !ok {
            continue;
        }
        let free: Vec<Location> = map.free_cells().collect();
        if free.len() < n + if require_solvable { 2 } else { 0 } {
            continue;
        }
        let starts: Vec<Location> = free.choose_multiple(&mut rng, n).copied().collect();
        let goals: Vec<Location> = free.choose_multiple(&mut rng, n).copied().collect();
        let tasks = (0..n).map(|id| AgentTask { id, start: starts[id], goal: goals[id] }).collect();
        return Ok(Instance::new(map, tasks).expect("distinct free cells"));
    }
    Err(ScenarioError::Attempts(ATTEMPTS))
}

/// A random-32-32-20-style map: 32x32, 20% obstacles, largest component.
pub fn random_32_map(seed: u64) -> GridMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keep_largest_component(&random_map(32, 32, 0.2, &mut rng))
}

/// `n` agents with distinct random starts and goals on `map`.
pub fn random_tasks(map: &GridMap, n: usize, seed: u64) -> Result<Vec<AgentTask>, ScenarioError> {
    let free: Vec<Location> = map.free_cells().collect();
    if free.len() < n {
        return Err(ScenarioError::TooCrowded { free: free.len(), agents: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<Location> = free.choose_multiple(&mut rng, n).copied().collect();
    let goals: Vec<Location> = free.choose_multiple(&mut rng, n).copied().collect();
    Ok((0..n).map(|id| AgentTask { id, start: starts[id], goal: goals[id] }).collect())
}
