//! Episode specs, CSV rows, and the parallel batch runner behind the CLI.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use crate::framework::{run_episode, CommitPolicy, ExecutionResult, ExecutionTrace, Limits, Outcome, SsCbsGenerator, WcbsGenerator};
use crate::heuristics::distance_fields;
use crate::model::Instance;
use crate::sscbs::{AgentPriorities, TieBreak};

pub const CSV_HEADER: [&str; 16] = [
    "map",
    "scen",
    "n_agents",
    "algo",
    "window",
    "subopt",
    "tiebreak",
    "seed",
    "outcome",
    "cost",
    "iterations",
    "total_ms",
    "median_iter_ms",
    "max_iter_ms",
    "hps_created",
    "hp_conflicts",
];

/// Columns that legitimately differ between otherwise identical runs.
pub const TIMING_COLUMNS: [&str; 3] = ["total_ms", "median_iter_ms", "max_iter_ms"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    SsCbs,
    Wcbs,
}

impl FromStr for Algo {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sscbs" => Ok(Algo::SsCbs),
            "wcbs" => Ok(Algo::Wcbs),
            other => Err(format!("unknown algo `{other}` (sscbs|wcbs)")),
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::SsCbs => "sscbs",
            Algo::Wcbs => "wcbs",
        })
    }
}

/// Everything needed to run one episode.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub map_name: String,
    pub scen_name: String,
    pub instance: Arc<Instance>,
    pub algo: Algo,
    /// wCBS only.
    pub window: usize,
    pub commit: CommitPolicy,
    pub subopt: f64,
    /// SS-CBS only.
    pub tiebreak: TieBreak,
    pub seed: u64,
    pub timeout: Option<Duration>,
    /// `None` uses the framework default; `Some(usize::MAX)` is uncapped.
    pub iteration_cap: Option<usize>,
    pub record_trace: bool,
}

impl RunSpec {
    pub fn new(map_name: impl Into<String>, scen_name: impl Into<String>, instance: Arc<Instance>, algo: Algo) -> Self {
        RunSpec {
            map_name: map_name.into(),
            scen_name: scen_name.into(),
            instance,
            algo,
            window: 1,
            commit: CommitPolicy::Window,
            subopt: 1.0,
            tiebreak: TieBreak::None,
            seed: 0,
            timeout: None,
            iteration_cap: None,
            record_trace: false,
        }
    }
}

/// One CSV row; `None` fields serialize as empty cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsvRow {
    pub map: String,
    pub scen: String,
    pub n_agents: usize,
    pub algo: Algo,
    pub window: Option<usize>,
    pub subopt: f64,
    pub tiebreak: Option<String>,
    pub seed: u64,
    pub outcome: Outcome,
    /// Empty unless solved.
    pub cost: Option<u64>,
    pub iterations: usize,
    pub total_ms: String,
    pub median_iter_ms: Option<String>,
    pub max_iter_ms: Option<String>,
    pub hps_created: Option<usize>,
    pub hp_conflicts: Option<usize>,
}

impl CsvRow {
    pub fn new(spec: &RunSpec, r: &ExecutionResult) -> Self {
        let ss = spec.algo == Algo::SsCbs;
        let has_iters = !r.iteration_ms.is_empty();
        CsvRow {
            map: spec.map_name.clone(),
            scen: spec.scen_name.clone(),
            n_agents: spec.instance.num_agents(),
            algo: spec.algo,
            window: (!ss).then_some(spec.window),
            subopt: spec.subopt,
            tiebreak: ss.then(|| spec.tiebreak.to_string()),
            seed: spec.seed,
            outcome: r.outcome,
            cost: r.solved().then_some(r.cost),
            iterations: r.iterations,
            total_ms: format!("{:.3}", r.total_ms),
            median_iter_ms: has_iters.then(|| format!("{:.3}", r.median_iter_ms())),
            max_iter_ms: has_iters.then(|| format!("{:.3}", r.max_iter_ms())),
            hps_created: ss.then_some(r.hps_created),
            hp_conflicts: ss.then_some(r.hp_conflicts),
        }
    }
}

/// Result for an episode that could not even be set up.
fn not_started(spec: &RunSpec) -> ExecutionResult {
    ExecutionResult {
        outcome: Outcome::AgFailure,
        cost: 0,
        iterations: 0,
        plans: 0,
        iteration_ms: Vec::new(),
        total_ms: 0.0,
        hps_created: 0,
        hp_conflicts: 0,
        final_config: spec.instance.starts(),
    }
}

pub fn run(spec: &RunSpec) -> (CsvRow, ExecutionResult, ExecutionTrace) {
    let inst = &*spec.instance;
    let Ok(fields) = distance_fields(&inst.map, &inst.tasks) else {
        let r = not_started(spec);
        return (CsvRow::new(spec, &r), r, ExecutionTrace::default());
    };
    let limits = Limits { time_budget: spec.timeout, iteration_cap: spec.iteration_cap, record_trace: spec.record_trace, ..Limits::default() };
    let (r, trace) = match spec.algo {
        Algo::SsCbs => {
            let pri = AgentPriorities::new(spec.tiebreak, &inst.tasks, &fields, spec.seed);
            let mut ag = SsCbsGenerator::new(inst, &fields, pri, spec.subopt);
            run_episode(inst, &fields, &mut ag, &limits)
        }
        Algo::Wcbs => {
            let mut ag = WcbsGenerator::new(inst, &fields, spec.window, spec.commit, spec.subopt);
            run_episode(inst, &fields, &mut ag, &limits)
        }
    };
    (CsvRow::new(spec, &r), r, trace)
}

/// A batch entry: an episode to run, or a row already settled because the
/// episode could not be set up.
#[derive(Debug, Clone)]
pub enum Job {
    Run(RunSpec),
    Settled(CsvRow),
}

/// Runs every job on up to `threads` workers. Rows reach `sink` in job
/// order as soon as all earlier rows are done; only the calling thread
/// touches `sink`.
pub fn run_batch(jobs: &[Job], threads: usize, mut sink: impl FnMut(&CsvRow)) -> Vec<CsvRow> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().expect("thread pool");
    let (tx, rx) = mpsc::channel::<(usize, CsvRow)>();
    let mut rows = Vec::with_capacity(jobs.len());
    pool.in_place_scope(|scope| {
        for (i, job) in jobs.iter().enumerate() {
            let tx = tx.clone();
            match job {
                Job::Settled(row) => {
                    let _ = tx.send((i, row.clone()));
                }
                Job::Run(spec) => scope.spawn(move |_| {
                    let row = std::panic::catch_unwind(|| run(spec).0).unwrap_or_else(|_| CsvRow::new(spec, &not_started(spec)));
                    let _ = tx.send((i, row));
                }),
            }
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        for (i, row) in rx.iter() {
            pending.insert(i, row);
            while let Some(row) = pending.remove(&rows.len()) {
                sink(&row);
                rows.push(row);
            }
        }
    });
    rows
}

/// CSV writer that always emits the header, even for zero rows.
pub struct CsvSink<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(out: W) -> csv::Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(CSV_HEADER)?;
        Ok(CsvSink { inner })
    }

    pub fn write(&mut self, row: &CsvRow) -> csv::Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> csv::Result<W> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| e.into_error().into())
    }
}

/// Renders rows as CSV text, header included.
pub fn to_csv_string(rows: &[CsvRow]) -> String {
    let mut sink = CsvSink::new(Vec::new()).expect("in-memory csv");
    for r in rows {
        sink.write(r).expect("in-memory csv");
    }
    String::from_utf8(sink.finish().expect("in-memory csv")).expect("utf8 csv")
}

/// Drops the timing columns from a CSV line produced by [`CsvSink`].
pub fn strip_timing(line: &str) -> String {
    let idx: Vec<usize> = TIMING_COLUMNS.iter().map(|c| CSV_HEADER.iter().position(|h| h == c).unwrap()).collect();
    line.split(',').enumerate().filter(|(i, _)| !idx.contains(i)).map(|(_, f)| f).collect::<Vec<_>>().join(",")
}
