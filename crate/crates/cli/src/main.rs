use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use wmapf_core::framework::{CommitPolicy, Outcome};
use wmapf_core::harness::{run, run_batch, Algo, CsvRow, CsvSink, Job, RunSpec};
use wmapf_core::heuristics::distance_fields;
use wmapf_core::model::{parse_map, parse_scen, scen_to_string, Instance};
use wmapf_core::scenarios::{generate_with_depth, ScenarioKind};
use wmapf_core::sscbs::TieBreak;

const EXIT_SOLVED: u8 = 0;
const EXIT_AG_FAILURE: u8 = 1;
const EXIT_TIMEOUT: u8 = 2;
const EXIT_LIVELOCK: u8 = 3;
const EXIT_USAGE: u8 = 4;

#[derive(Parser)]
#[command(name = "wmapf", version, about = "Windowed multi-agent path finding: SS-CBS and windowed CBS")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode.
    Solve(SolveArgs),
    /// Run a sweep of episodes and write one CSV row per episode.
    Bench(BenchArgs),
    /// Write a congested scenario as .map and .scen files.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Sscbs,
    Wcbs,
}

impl From<AlgoArg> for Algo {
    fn from(a: AlgoArg) -> Algo {
        match a {
            AlgoArg::Sscbs => Algo::SsCbs,
            AlgoArg::Wcbs => Algo::Wcbs,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TieBreakArg {
    None,
    Dist,
    Random,
}

impl From<TieBreakArg> for TieBreak {
    fn from(t: TieBreakArg) -> TieBreak {
        match t {
            TieBreakArg::None => TieBreak::None,
            TieBreakArg::Dist => TieBreak::Distance,
            TieBreakArg::Random => TieBreak::Random,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CommitArg {
    #[value(name = "window")]
    Window,
    #[value(name = "1")]
    One,
}

impl From<CommitArg> for CommitPolicy {
    fn from(c: CommitArg) -> CommitPolicy {
        match c {
            CommitArg::Window => CommitPolicy::Window,
            CommitArg::One => CommitPolicy::Single,
        }
    }
}

/// Options shared by solve and bench.
#[derive(Args)]
struct PlannerArgs {
    #[arg(long, default_value_t = 1.0)]
    subopt: f64,
    #[arg(long, value_enum, default_value = "none")]
    tiebreak: TieBreakArg,
    /// wCBS: execute the whole window or a single step per plan.
    #[arg(long, value_enum, default_value = "window")]
    commit: CommitArg,
    /// Per-episode wall-clock budget in seconds.
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
    /// Executed-step cap. Off by default, so only --timeout ends an episode;
    /// `auto` uses 64 * (N + sum of start distances).
    #[arg(long, default_value = "off")]
    max_steps: String,
}

impl PlannerArgs {
    fn apply(&self, spec: &mut RunSpec) -> Result<()> {
        if self.subopt.is_nan() || self.subopt < 1.0 {
            bail!("--subopt must be at least 1");
        }
        if !self.timeout.is_finite() || self.timeout <= 0.0 {
            bail!("--timeout must be a positive number of seconds");
        }
        spec.subopt = self.subopt;
        spec.tiebreak = self.tiebreak.into();
        spec.commit = self.commit.into();
        spec.timeout = Some(Duration::from_secs_f64(self.timeout));
        spec.iteration_cap = match self.max_steps.as_str() {
            "off" => Some(usize::MAX),
            "auto" => None,
            n => Some(n.parse().ok().filter(|&n| n > 0).ok_or_else(|| anyhow!("--max-steps takes off, auto or a positive count"))?),
        };
        Ok(())
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    scen: PathBuf,
    /// Number of scenario entries to use; all of them by default.
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long, value_enum)]
    algo: AlgoArg,
    #[arg(long, default_value_t = 1)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    planner: PlannerArgs,
    /// Write the execution trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the result row as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Scenario files; each names its map in the second column.
    #[arg(long, num_args = 1..)]
    scen: Vec<PathBuf>,
    /// Directory whose .scen files are added to the list.
    #[arg(long)]
    scen_dir: Option<PathBuf>,
    /// Where to look for map files; defaults to each scenario's directory.
    #[arg(long)]
    map_dir: Option<PathBuf>,
    /// Generated congested scenarios to include (reconstructions).
    #[arg(long, value_delimiter = ',')]
    generate: Vec<String>,
    /// Agent-count sweep; generated scenarios default to their documented range.
    #[arg(long, value_delimiter = ',')]
    agents: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "sscbs,wcbs")]
    algos: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    windows: Vec<usize>,
    /// Seeds 0..SEEDS.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[command(flatten)]
    planner: PlannerArgs,
    /// Episodes run at once.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// CSV destination; stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    kind: String,
    #[arg(long)]
    agents: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Distance between the congestion and free space; kind-specific default.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

/// Error that maps to the usage exit code.
#[derive(Debug)]
struct Usage(anyhow::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| Usage(e).into())
}

fn exit_code(outcome: Outcome) -> u8 {
    match outcome {
        Outcome::Solved => EXIT_SOLVED,
        Outcome::Timeout => EXIT_TIMEOUT,
        Outcome::Livelock => EXIT_LIVELOCK,
        Outcome::AgFailure => EXIT_AG_FAILURE,
    }
}

fn count_scen_entries(text: &str) -> usize {
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).count()
}

fn load_instance(map_path: &Path, scen_path: &Path, agents: Option<usize>) -> Result<Instance> {
    let map_text = fs::read_to_string(map_path).with_context(|| format!("reading {}", map_path.display()))?;
    let map = parse_map(&map_text).with_context(|| format!("parsing {}", map_path.display()))?;
    let scen_text = fs::read_to_string(scen_path).with_context(|| format!("reading {}", scen_path.display()))?;
    let n = agents.unwrap_or_else(|| count_scen_entries(&scen_text));
    let tasks = parse_scen(&scen_text, &map, n).with_context(|| format!("parsing {}", scen_path.display()))?;
    Ok(Instance::new(map, tasks)?)
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn solve(args: SolveArgs) -> Result<u8> {
    let instance = usage(load_instance(&args.map, &args.scen, args.agents))?;
    let mut spec = RunSpec::new(file_name(&args.map), file_name(&args.scen), Arc::new(instance), args.algo.into());
    usage(args.planner.apply(&mut spec))?;
    if args.window == 0 {
        return usage(Err(anyhow!("--window must be at least 1")));
    }
    spec.window = args.window;
    spec.seed = args.seed;
    spec.record_trace = args.trace.is_some();

    let (row, r, trace) = run(&spec);
    println!(
        "outcome={} cost={} iterations={} median_iter_ms={:.3} max_iter_ms={:.3} hps_created={} hp_conflicts={}",
        r.outcome,
        r.cost,
        r.iterations,
        r.median_iter_ms(),
        r.max_iter_ms(),
        r.hps_created,
        r.hp_conflicts
    );
    if let Some(path) = &args.trace {
        let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = io::BufWriter::new(f);
        trace.write_jsonl(&mut w)?;
        w.flush()?;
    }
    if let Some(path) = &args.out {
        let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut sink = CsvSink::new(f)?;
        sink.write(&row)?;
        sink.finish()?;
    }
    Ok(exit_code(r.outcome))
}

/// One scenario source of a bench sweep.
enum Source {
    File { map: PathBuf, scen: PathBuf },
    Generated(ScenarioKind),
}

fn scen_map_name(scen: &Path) -> Result<String> {
    let text = fs::read_to_string(scen).with_context(|| format!("reading {}", scen.display()))?;
    text.lines()
        .nth(1)
        .and_then(|l| l.split('\t').nth(1).or_else(|| l.split_whitespace().nth(1)))
        .map(str::to_owned)
        .ok_or_else(|| anyhow!("{}: no map name in the first entry", scen.display()))
}

fn bench_sources(args: &BenchArgs) -> Result<Vec<Source>> {
    let mut scens = args.scen.clone();
    if let Some(dir) = &args.scen_dir {
        let mut found: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "scen"))
            .collect();
        found.sort();
        scens.extend(found);
    }
    let mut out = Vec::new();
    for scen in scens {
        let name = scen_map_name(&scen)?;
        let dir = args.map_dir.clone().unwrap_or_else(|| scen.parent().map(Path::to_path_buf).unwrap_or_default());
        out.push(Source::File { map: dir.join(name), scen });
    }
    for g in &args.generate {
        out.push(Source::Generated(g.parse().map_err(|e: String| anyhow!(e))?));
    }
    Ok(out)
}

fn bench(args: BenchArgs) -> Result<u8> {
    let sources = usage(bench_sources(&args))?;
    let mut algos = Vec::new();
    for a in &args.algos {
        algos.push(usage(a.parse::<Algo>().map_err(|e| anyhow!(e)))?);
    }
    if args.windows.contains(&0) {
        return usage(Err(anyhow!("windows must be at least 1")));
    }
    let mut template = RunSpec::new("", "", Arc::new(Instance { map: wmapf_core::GridMap::open(1, 1), tasks: Vec::new() }), Algo::SsCbs);
    usage(args.planner.apply(&mut template))?;

    // (algo, window) pairs in output order
    let mut configs = Vec::new();
    for &algo in &algos {
        match algo {
            Algo::SsCbs => configs.push((algo, 1)),
            Algo::Wcbs => configs.extend(args.windows.iter().map(|&w| (algo, w))),
        }
    }

    // episodes that cannot be set up stay in place as ag-failure rows
    let mut jobs = Vec::new();
    for src in &sources {
        let (map_name, counts) = match src {
            Source::File { map, .. } => (file_name(map), args.agents.clone()),
            Source::Generated(kind) => {
                let (lo, hi) = kind.agent_range();
                let counts = if args.agents.is_empty() { (lo..=hi).collect() } else { args.agents.clone() };
                (kind.to_string(), counts)
            }
        };
        for n in counts {
            for seed in 0..args.seeds {
                let (scen_name, loaded) = match src {
                    Source::File { map, scen } => (file_name(scen), load_instance(map, scen, Some(n))),
                    Source::Generated(kind) => (
                        format!("{kind}-{n}-s{seed}-reconstructed"),
                        generate_with_depth(*kind, n, seed, kind.default_depth()).map(|s| s.instance).map_err(anyhow::Error::from),
                    ),
                };
                let loaded = loaded.map(Arc::new);
                if let Err(e) = &loaded {
                    eprintln!("{scen_name} n={n} seed={seed}: {e:#}");
                }
                for &(algo, window) in &configs {
                    jobs.push(match &loaded {
                        Ok(inst) => {
                            let mut spec = template.clone();
                            spec.map_name = map_name.clone();
                            spec.scen_name = scen_name.clone();
                            spec.instance = inst.clone();
                            spec.algo = algo;
                            spec.window = window;
                            spec.seed = seed;
                            Job::Run(spec)
                        }
                        Err(_) => Job::Settled(setup_failure_row(&template, map_name.clone(), scen_name.clone(), n, algo, window, seed)),
                    });
                }
            }
        }
    }

    let out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut sink = CsvSink::new(out)?;
    let mut write_err = None;
    run_batch(&jobs, args.jobs, |row| {
        if write_err.is_none() {
            write_err = sink.write(row).err();
        }
    });
    if let Some(e) = write_err {
        return Err(e.into());
    }
    sink.finish()?;
    Ok(EXIT_SOLVED)
}

fn setup_failure_row(template: &RunSpec, map: String, scen: String, n: usize, algo: Algo, window: usize, seed: u64) -> CsvRow {
    let ss = algo == Algo::SsCbs;
    CsvRow {
        map,
        scen,
        n_agents: n,
        algo,
        window: (!ss).then_some(window),
        subopt: template.subopt,
        tiebreak: ss.then(|| template.tiebreak.to_string()),
        seed,
        outcome: Outcome::AgFailure,
        cost: None,
        iterations: 0,
        total_ms: format!("{:.3}", 0.0),
        median_iter_ms: None,
        max_iter_ms: None,
        hps_created: ss.then_some(0),
        hp_conflicts: ss.then_some(0),
    }
}

fn generate(args: GenerateArgs) -> Result<u8> {
    let kind: ScenarioKind = usage(args.kind.parse().map_err(|e: String| anyhow!(e)))?;
    let depth = args.depth.unwrap_or(kind.default_depth());
    let s = usage(generate_with_depth(kind, args.agents, args.seed, depth).map_err(anyhow::Error::from))?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let map_name = format!("{}.map", s.name);
    let map_path = args.out_dir.join(&map_name);
    let scen_path = args.out_dir.join(format!("{}.scen", s.name));
    let fields = distance_fields(&s.instance.map, &s.instance.tasks)?;
    fs::write(&map_path, s.instance.map.to_map_string()).with_context(|| format!("writing {}", map_path.display()))?;
    fs::write(&scen_path, scen_to_string(&map_name, &s.instance.map, &s.instance.tasks, Some(&fields)))
        .with_context(|| format!("writing {}", scen_path.display()))?;
    println!("{}", map_path.display());
    println!("{}", scen_path.display());
    Ok(EXIT_SOLVED)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_SOLVED });
        }
    };
    let r = match cli.cmd {
        Command::Solve(a) => solve(a),
        Command::Bench(a) => bench(a),
        Command::Generate(a) => generate(a),
    };
    match r {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<Usage>() { EXIT_USAGE } else { EXIT_AG_FAILURE })
        }
    }
}
