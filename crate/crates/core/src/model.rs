//! Grid world, MovingAI instance parsing, joint configurations and the
//! per-step cost model shared by every planner.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of an agent within an instance (dense, `0..N`).
pub type AgentId = usize;

/// Unit of path cost. All step costs are 0 or 1.
pub type Cost = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("requested {requested} agents but scenario has only {available} entries")]
    NotEnoughAgents { requested: usize, available: usize },
    #[error("agent {agent}: {message}")]
    InvalidTask { agent: AgentId, message: String },
    #[error("configuration length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

/// A grid cell. Ordering is row-major, which is the canonical order used
/// for all deterministic tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Location {
    pub row: u32,
    pub col: u32,
}

impl Location {
    pub const fn new(row: u32, col: u32) -> Self {
        Location { row, col }
    }

    /// Manhattan distance between two cells.
    pub fn manhattan(self, other: Location) -> u32 {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }

    /// True if `other` is reachable in one action (wait or cardinal move).
    pub fn is_adjacent_or_same(self, other: Location) -> bool {
        self.manhattan(other) <= 1
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// The five single-agent actions in canonical tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Wait,
    Up,
    Right,
    Down,
    Left,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Wait, Action::Up, Action::Right, Action::Down, Action::Left];
}

/// Static obstacle grid. Row 0 is the first grid line of a `.map` file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    width: u32,
    height: u32,
    blocked: Vec<bool>,
}

impl GridMap {
    /// Builds a map from a row-major blocked grid.
    ///
    /// Panics if the grid size does not match `width * height` or either
    /// dimension is zero.
    pub fn new(width: u32, height: u32, blocked: Vec<bool>) -> Self {
        assert!(width >= 1 && height >= 1, "map dimensions must be positive");
        assert_eq!(blocked.len(), (width * height) as usize, "blocked grid size mismatch");
        GridMap { width, height, blocked }
    }

    /// An obstacle-free map.
    pub fn open(width: u32, height: u32) -> Self {
        Self::new(width, height, vec![false; (width * height) as usize])
    }

    /// Builds a map from rows of `.`/`@` characters (test and generator helper).
    pub fn from_rows(rows: &[&str]) -> Result<Self, ModelError> {
        let mut text = format!("type octile\nheight {}\nwidth {}\nmap\n", rows.len(), rows.first().map_or(0, |r| r.len()));
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        parse_map(&text)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn num_cells(&self) -> usize {
        self.blocked.len()
    }

    pub fn in_bounds(&self, loc: Location) -> bool {
        loc.row < self.height && loc.col < self.width
    }

    /// Row-major cell index. Caller guarantees `loc` is in bounds.
    pub fn index(&self, loc: Location) -> usize {
        (loc.row * self.width + loc.col) as usize
    }

    pub fn location(&self, index: usize) -> Location {
        Location::new(index as u32 / self.width, index as u32 % self.width)
    }

    pub fn is_blocked(&self, loc: Location) -> bool {
        !self.in_bounds(loc) || self.blocked[self.index(loc)]
    }

    pub fn is_free(&self, loc: Location) -> bool {
        !self.is_blocked(loc)
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Location> + '_ {
        (0..self.blocked.len()).filter(|&i| !self.blocked[i]).map(|i| self.location(i))
    }

    /// Applies `action` to `loc`; `None` if the result leaves the grid.
    pub fn apply(&self, loc: Location, action: Action) -> Option<Location> {
        let next = match action {
            Action::Wait => loc,
            Action::Up => Location::new(loc.row.checked_sub(1)?, loc.col),
            Action::Right => Location::new(loc.row, loc.col + 1),
            Action::Down => Location::new(loc.row + 1, loc.col),
            Action::Left => Location::new(loc.row, loc.col.checked_sub(1)?),
        };
        self.in_bounds(next).then_some(next)
    }

    /// Free successor cells of `loc` (including `loc` itself) in canonical
    /// action order: wait, up, right, down, left.
    pub fn successors(&self, loc: Location) -> impl Iterator<Item = Location> + '_ {
        Action::ALL
            .into_iter()
            .filter_map(move |a| self.apply(loc, a))
            .filter(move |&l| self.is_free(l))
    }

    /// Free 4-neighbours of `loc` (no wait).
    pub fn neighbors(&self, loc: Location) -> impl Iterator<Item = Location> + '_ {
        self.successors(loc).filter(move |&l| l != loc)
    }

    /// Serializes in MovingAI `.map` format.
    pub fn to_map_string(&self) -> String {
        let mut out = format!("type octile\nheight {}\nwidth {}\nmap\n", self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                out.push(if self.blocked[self.index(Location::new(r, c))] { '@' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

/// Parses a MovingAI `.map` file. Only 4-connected motion is used even
/// though the header says `octile`.
pub fn parse_map(text: &str) -> Result<GridMap, ModelError> {
    let mut lines = text.lines().map(|l| l.trim_end()).enumerate().map(|(i, l)| (i + 1, l));
    let perr = |line: usize, message: String| ModelError::Parse { line, message };

    let mut header = |expect: &str| -> Result<(usize, String), ModelError> {
        let (n, l) = lines.next().ok_or_else(|| perr(0, format!("missing `{expect}` header")))?;
        let mut parts = l.split_whitespace();
        match parts.next() {
            Some(k) if k == expect => Ok((n, parts.collect::<Vec<_>>().join(" "))),
            _ => Err(perr(n, format!("expected `{expect}`, found `{l}`"))),
        }
    };

    header("type")?;
    let (hl, h) = header("height")?;
    let height: u32 = h.parse().map_err(|_| perr(hl, format!("bad height `{h}`")))?;
    let (wl, w) = header("width")?;
    let width: u32 = w.parse().map_err(|_| perr(wl, format!("bad width `{w}`")))?;
    let (ml, rest) = header("map")?;
    if !rest.is_empty() {
        return Err(perr(ml, "unexpected text after `map`".into()));
    }
    if width == 0 || height == 0 {
        return Err(perr(wl, "map dimensions must be positive".into()));
    }

    let mut blocked = Vec::with_capacity((width * height) as usize);
    let mut rows = 0u32;
    let mut last_line = ml;
    for (n, l) in lines {
        last_line = n;
        if rows == height {
            if l.is_empty() {
                continue;
            }
            return Err(perr(n, format!("more than {height} grid rows")));
        }
        if l.chars().count() != width as usize {
            return Err(perr(n, format!("row length {} != width {width}", l.chars().count())));
        }
        for ch in l.chars() {
            blocked.push(match ch {
                '.' | 'G' => false,
                '@' | 'O' | 'T' => true,
                other => return Err(perr(n, format!("unknown map character `{other}`"))),
            });
        }
        rows += 1;
    }
    if rows != height {
        return Err(perr(last_line, format!("expected {height} grid rows, found {rows}")));
    }
    Ok(GridMap::new(width, height, blocked))
}

/// One agent's start and goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTask {
    pub id: AgentId,
    pub start: Location,
    pub goal: Location,
}

/// Parses the first `n` entries of a MovingAI `.scen` file. Columns are
/// `bucket map width height start_x start_y goal_x goal_y distance`, where
/// x is the column and y the row.
pub fn parse_scen(text: &str, map: &GridMap, n: usize) -> Result<Vec<AgentTask>, ModelError> {
    let perr = |line: usize, message: String| ModelError::Parse { line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
    match lines.next() {
        Some((_, l)) if l.split_whitespace().next() == Some("version") => {}
        Some((i, l)) => return Err(perr(i, format!("expected `version` header, found `{l}`"))),
        None => return Err(perr(1, "empty scenario file".into())),
    }

    let mut tasks = Vec::with_capacity(n);
    let mut available = 0;
    for (line, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        available += 1;
        if tasks.len() == n {
            continue;
        }
        let cols: Vec<&str> = l.split_whitespace().collect();
        if cols.len() < 9 {
            return Err(perr(line, format!("expected 9 columns, found {}", cols.len())));
        }
        let num = |i: usize| -> Result<u32, ModelError> {
            cols[i].parse().map_err(|_| perr(line, format!("bad integer `{}`", cols[i])))
        };
        let (w, h) = (num(2)?, num(3)?);
        if w != map.width() || h != map.height() {
            return Err(perr(line, format!("scenario size {w}x{h} does not match map {}x{}", map.width(), map.height())));
        }
        let id = tasks.len();
        let start = Location::new(num(5)?, num(4)?);
        let goal = Location::new(num(7)?, num(6)?);
        for (what, loc) in [("start", start), ("goal", goal)] {
            if map.is_blocked(loc) {
                return Err(ModelError::InvalidTask { agent: id, message: format!("{what} {loc} is blocked or out of bounds") });
            }
        }
        tasks.push(AgentTask { id, start, goal });
    }
    if tasks.len() < n {
        return Err(ModelError::NotEnoughAgents { requested: n, available });
    }
    validate_tasks(map, &tasks)?;
    Ok(tasks)
}

/// Serializes tasks as a MovingAI `.scen` file.
pub fn scen_to_string(map_name: &str, map: &GridMap, tasks: &[AgentTask], fields: Option<&[crate::heuristics::DistanceField]>) -> String {
    let mut out = String::from("version 1\n");
    for t in tasks {
        let dist = fields.and_then(|f| f[t.id].get(t.start)).unwrap_or(0);
        out.push_str(&format!(
            "0\t{map_name}\t{}\t{}\t{}\t{}\t{}\t{}\t{dist}\n",
            map.width(),
            map.height(),
            t.start.col,
            t.start.row,
            t.goal.col,
            t.goal.row
        ));
    }
    out
}

/// Checks dense ids, free cells, and distinct starts and goals.
pub fn validate_tasks(map: &GridMap, tasks: &[AgentTask]) -> Result<(), ModelError> {
    let mut starts = std::collections::HashSet::new();
    let mut goals = std::collections::HashSet::new();
    for (i, t) in tasks.iter().enumerate() {
        let bad = |message: String| Err(ModelError::InvalidTask { agent: t.id, message });
        if t.id != i {
            return bad(format!("expected id {i}"));
        }
        if map.is_blocked(t.start) || map.is_blocked(t.goal) {
            return bad("start or goal is blocked or out of bounds".into());
        }
        if !starts.insert(t.start) {
            return bad(format!("duplicate start {}", t.start));
        }
        if !goals.insert(t.goal) {
            return bad(format!("duplicate goal {}", t.goal));
        }
    }
    Ok(())
}

/// Joint agent locations at one timestep, indexed by agent id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(Vec<Location>);

impl Configuration {
    pub fn new(locations: Vec<Location>) -> Self {
        Configuration(locations)
    }

    pub fn starts(tasks: &[AgentTask]) -> Self {
        Configuration(tasks.iter().map(|t| t.start).collect())
    }

    pub fn goals(tasks: &[AgentTask]) -> Self {
        Configuration(tasks.iter().map(|t| t.goal).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn locations(&self) -> &[Location] {
        &self.0
    }

    pub fn get(&self, agent: AgentId) -> Location {
        self.0[agent]
    }

    pub fn into_inner(self) -> Vec<Location> {
        self.0
    }

    /// True if every location is free and no two agents share a cell.
    pub fn is_valid(&self, map: &GridMap) -> bool {
        let mut seen = std::collections::HashSet::with_capacity(self.0.len());
        self.0.iter().all(|&l| map.is_free(l) && seen.insert(l))
    }

    /// Restriction of this configuration to the given agents.
    pub fn group(&self, agents: &[AgentId]) -> GroupConfiguration {
        GroupConfiguration::new(agents.iter().map(|&a| (a, self.0[a])).collect())
    }
}

impl std::ops::Index<AgentId> for Configuration {
    type Output = Location;
    fn index(&self, agent: AgentId) -> &Location {
        &self.0[agent]
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{l}")?;
        }
        f.write_str("]")
    }
}

/// Locations of a subset of agents, sorted by agent id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupConfiguration {
    entries: Vec<(AgentId, Location)>,
}

impl GroupConfiguration {
    /// Sorts entries by agent id. Panics on a repeated agent id.
    pub fn new(mut entries: Vec<(AgentId, Location)>) -> Self {
        entries.sort_unstable();
        assert!(entries.windows(2).all(|w| w[0].0 != w[1].0), "duplicate agent in group configuration");
        GroupConfiguration { entries }
    }

    pub fn entries(&self) -> &[(AgentId, Location)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn location_of(&self, agent: AgentId) -> Option<Location> {
        self.entries.binary_search_by_key(&agent, |e| e.0).ok().map(|i| self.entries[i].1)
    }

    /// True if every (agent, location) pair agrees with `config`.
    pub fn matches(&self, config: &[Location]) -> bool {
        self.entries.iter().all(|&(a, l)| config.get(a) == Some(&l))
    }

    pub fn shares_agent(&self, other: &GroupConfiguration) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.entries.len() && j < other.entries.len() {
            match self.entries[i].0.cmp(&other.entries[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }
}

impl fmt::Display for GroupConfiguration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (a, l)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{a}:{},{}", l.row, l.col)?;
        }
        Ok(())
    }
}

/// A map plus the agents' tasks.
#[derive(Debug, Clone)]
pub struct Instance {
    pub map: GridMap,
    pub tasks: Vec<AgentTask>,
}

impl Instance {
    pub fn new(map: GridMap, tasks: Vec<AgentTask>) -> Result<Self, ModelError> {
        validate_tasks(&map, &tasks)?;
        Ok(Instance { map, tasks })
    }

    pub fn num_agents(&self) -> usize {
        self.tasks.len()
    }

    pub fn starts(&self) -> Configuration {
        Configuration::starts(&self.tasks)
    }

    pub fn goals(&self) -> Configuration {
        Configuration::goals(&self.tasks)
    }
}

/// Step cost of one agent: free only when waiting on its goal.
pub fn step_cost(from: Location, to: Location, goal: Location) -> Cost {
    if from == to && to == goal {
        0
    } else {
        1
    }
}

/// Checks a single joint timestep for move legality and vertex/edge collisions.
pub fn valid_joint_transition(from: &Configuration, to: &Configuration, map: &GridMap) -> Result<bool, ModelError> {
    if from.len() != to.len() {
        return Err(ModelError::LengthMismatch { left: from.len(), right: to.len() });
    }
    Ok(valid_transition_slices(from.locations(), to.locations(), map))
}

pub(crate) fn valid_transition_slices(from: &[Location], to: &[Location], map: &GridMap) -> bool {
    for (i, (&a, &b)) in from.iter().zip(to).enumerate() {
        if !map.is_free(b) || !a.is_adjacent_or_same(b) {
            return false;
        }
        for j in (i + 1)..to.len() {
            if to[j] == b {
                return false;
            }
            if a != b && from[j] == b && to[j] == a {
                return false;
            }
        }
    }
    true
}

/// Sum of per-agent step costs for a transition.
pub fn joint_cost(from: &Configuration, to: &Configuration, tasks: &[AgentTask]) -> Cost {
    from.locations()
        .iter()
        .zip(to.locations())
        .zip(tasks)
        .map(|((&a, &b), t)| step_cost(a, b, t.goal))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loc(r: u32, c: u32) -> Location {
        Location::new(r, c)
    }

    #[test]
    fn parse_minimal_map() {
        let m = parse_map("type octile\nheight 1\nwidth 1\nmap\n.\n").unwrap();
        assert_eq!((m.width(), m.height()), (1, 1));
        assert!(m.is_free(loc(0, 0)));
    }

    #[test]
    fn parse_blocked_cell() {
        let m = parse_map("type octile\r\nheight 2\r\nwidth 2\r\nmap\r\n.@\r\n..  \r\n").unwrap();
        assert!(m.is_blocked(loc(0, 1)));
        assert_eq!(m.free_cells().count(), 3);
    }

    #[test]
    fn parse_rejects_unknown_char() {
        let err = parse_map("type octile\nheight 1\nwidth 2\nmap\n.X\n").unwrap_err();
        assert_eq!(err, ModelError::Parse { line: 5, message: "unknown map character `X`".into() });
    }

    #[test]
    fn parse_rejects_bad_shape() {
        assert!(matches!(parse_map("type octile\nheight 2\nwidth 2\nmap\n..\n"), Err(ModelError::Parse { line: 5, .. })));
        assert!(matches!(parse_map("type octile\nheight 1\nwidth 2\nmap\n...\n"), Err(ModelError::Parse { line: 5, .. })));
        assert!(matches!(parse_map("type octile\nwidth 2\nheight 1\nmap\n..\n"), Err(ModelError::Parse { line: 2, .. })));
    }

    #[test]
    fn scen_x_is_column() {
        let map = GridMap::open(8, 8);
        let tasks = parse_scen("version 1\n0 m 8 8 2 3 5 3 3.0\n", &map, 1).unwrap();
        assert_eq!(tasks, vec![AgentTask { id: 0, start: loc(3, 2), goal: loc(3, 5) }]);
        assert!(parse_scen("version 1\n0 m 8 8 2 3 5 3 3.0\n", &map, 0).unwrap().is_empty());
    }

    #[test]
    fn scen_errors() {
        let map = GridMap::from_rows(&["..@", "...", "..."]).unwrap();
        let blocked = "version 1\n0\tm\t3\t3\t2\t0\t0\t0\t2\n";
        assert!(matches!(parse_scen(blocked, &map, 1), Err(ModelError::InvalidTask { agent: 0, .. })));
        let ok = "version 1\n0\tm\t3\t3\t0\t0\t1\t1\t2\n";
        assert!(matches!(parse_scen(ok, &map, 2), Err(ModelError::NotEnoughAgents { requested: 2, available: 1 })));
        let size = "version 1\n0\tm\t4\t3\t0\t0\t1\t1\t2\n";
        assert!(matches!(parse_scen(size, &map, 1), Err(ModelError::Parse { line: 2, .. })));
    }

    #[test]
    fn transitions() {
        let map = GridMap::open(3, 1);
        let c = |v: &[u32]| Configuration::new(v.iter().map(|&x| loc(0, x)).collect());
        // swap
        assert!(!valid_joint_transition(&c(&[0, 1]), &c(&[1, 0]), &map).unwrap());
        // all wait
        assert!(valid_joint_transition(&c(&[0, 1]), &c(&[0, 1]), &map).unwrap());
        // follow into vacated cell
        assert!(valid_joint_transition(&c(&[0, 1]), &c(&[1, 2]), &map).unwrap());
        // vertex collision
        assert!(!valid_joint_transition(&c(&[0, 2]), &c(&[1, 1]), &map).unwrap());
        // teleport
        assert!(!valid_joint_transition(&c(&[0]), &c(&[2]), &map).unwrap());
        assert!(valid_joint_transition(&c(&[0]), &c(&[0, 1]), &map).is_err());
    }

    #[test]
    fn rotation_on_a_cycle_is_valid() {
        let map = GridMap::open(2, 2);
        let from = Configuration::new(vec![loc(0, 0), loc(0, 1), loc(1, 1), loc(1, 0)]);
        let to = Configuration::new(vec![loc(0, 1), loc(1, 1), loc(1, 0), loc(0, 0)]);
        assert!(valid_joint_transition(&from, &to, &map).unwrap());
    }

    #[test]
    fn costs() {
        let tasks = vec![
            AgentTask { id: 0, start: loc(0, 0), goal: loc(0, 0) },
            AgentTask { id: 1, start: loc(0, 2), goal: loc(0, 2) },
        ];
        let c = |a: u32, b: u32| Configuration::new(vec![loc(0, a), loc(0, b)]);
        assert_eq!(joint_cost(&c(0, 2), &c(0, 2), &tasks), 0);
        assert_eq!(joint_cost(&c(0, 2), &c(1, 2), &tasks), 1);
        let off = vec![
            AgentTask { id: 0, start: loc(0, 0), goal: loc(0, 3) },
            AgentTask { id: 1, start: loc(0, 2), goal: loc(0, 3) },
        ];
        assert_eq!(joint_cost(&c(0, 2), &c(0, 1), &off), 2);
    }

    #[test]
    fn map_round_trip() {
        let m = GridMap::from_rows(&[".@.", "T..", "..O"]).unwrap();
        assert_eq!(parse_map(&m.to_map_string()).unwrap(), m);
    }

    #[test]
    fn successors_are_canonical() {
        let m = GridMap::open(3, 3);
        let s: Vec<_> = m.successors(loc(1, 1)).collect();
        assert_eq!(s, vec![loc(1, 1), loc(0, 1), loc(1, 2), loc(2, 1), loc(1, 0)]);
        let corner: Vec<_> = m.successors(loc(0, 0)).collect();
        assert_eq!(corner, vec![loc(0, 0), loc(0, 1), loc(1, 0)]);
    }
}
