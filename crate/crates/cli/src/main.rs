use clap::{Parser, Subcommand, ValueEnum};
use seqmpc::bench::{run_benchmark, BenchConfig};
use seqmpc::mapgen::{generate_random_map, MapGenParams, ObstacleFamily};
use seqmpc::render::save_svg;
use seqmpc::scenario::{PlannedScenario, Scenario, ScenarioError, BUNDLED};
use seqmpc::sim::{
    collision_oracle, run_closed_loop, DisturbanceModel, SimOptions, TrajectoryLog, Verdict,
};
use serde_json::json;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "seqmpc",
    version,
    about = "Sequential CBF-MPC footstep planning through convex free space"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Plan a global path and its cell chain.
    Plan {
        /// Scenario file, or the name of a bundled scenario.
        scenario: String,
        /// Overrides the RRT* seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Chain output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Also draw the chain to this SVG file.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Plan, then walk the chain in closed loop.
    Simulate {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// MPC horizon in steps.
        #[arg(long)]
        horizon: Option<usize>,
        /// Trajectory log (JSON lines, or one CSV row per step); stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Apply random velocity kicks drawn with this seed.
        #[arg(long)]
        kick_seed: Option<u64>,
        /// Re-solve this many seconds into each step from mid-step feedback.
        #[arg(long)]
        mid_step: Option<f64>,
    },
    /// Run the randomized benchmark sweep.
    Bench {
        /// Obstacle families, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = ObstacleFamily::ALL.map(|f| f.name().to_string()))]
        families: Vec<String>,
        /// Obstacle counts, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [30usize, 40, 50, 60])]
        counts: Vec<usize>,
        /// Maps per (family, count) cell.
        #[arg(long, default_value_t = 10)]
        maps: usize,
        /// MPC horizons, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3, 4])]
        horizons: Vec<usize>,
        /// Master seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads; all cores when absent.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Write a random benchmark-style scenario.
    Gen {
        #[arg(long, default_value = "rectangles")]
        family: String,
        #[arg(long, default_value_t = 30)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a logged run over its scenario and chain.
    Render {
        scenario: String,
        /// Log written by `simulate --format json`.
        #[arg(long)]
        log: PathBuf,
        /// RRT* seed used for the run, if it was overridden.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "figure.svg")]
        out: PathBuf,
    },
}

/// Exit status 2 for bad input, 1 for a run that did not succeed.
enum Failure {
    Input(String),
    Run(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Input(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

fn load_scenario(arg: &str) -> Result<Scenario, Failure> {
    let path = Path::new(arg);
    if path.exists() {
        return Ok(Scenario::load(path)?);
    }
    if BUNDLED.contains(&arg) {
        return Ok(Scenario::bundled(arg)?);
    }
    Err(Failure::Input(format!(
        "{arg}: no such file and not a bundled scenario ({})",
        BUNDLED.join(", ")
    )))
}

fn with_seed(mut s: Scenario, seed: Option<u64>) -> Scenario {
    if let Some(seed) = seed {
        s.rrt.rng_seed = seed;
    }
    s
}

fn plan(s: &Scenario) -> Result<PlannedScenario, Failure> {
    s.plan()
        .map_err(|e| Failure::Run(format!("{}: {e}", s.name)))
}

/// Writes to `out`, or to stdout when absent.
fn emit(
    out: Option<&Path>,
    f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<(), Failure> {
    match out {
        Some(p) => {
            let mut file = File::create(p).map_err(|e| io_err(p, e))?;
            f(&mut file).map_err(|e| io_err(p, e))
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock).map_err(|e| Failure::Input(format!("stdout: {e}")))
        }
    }
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

fn cmd_plan(
    scenario: &str,
    seed: Option<u64>,
    out: Option<&Path>,
    format: Format,
    svg: Option<&Path>,
) -> Result<(), Failure> {
    let s = with_seed(load_scenario(scenario)?, seed);
    let p = plan(&s)?;
    emit(out, |w| match format {
        Format::Json => {
            let cells: Vec<_> = p
                .chain
                .cells
                .iter()
                .zip(&p.chain.waypoints)
                .map(|(c, wp)| json!({ "vertices_m": c.vertices(), "waypoint_m": wp }))
                .collect();
            let doc = json!({
                "scenario": s.name,
                "rrt_path_m": p.path.points,
                "rrt_path_length_m": p.path.total_length,
                "rrt_time_s": p.rrt_time_s,
                "decomposition_time_s": p.decomposition_time_s,
                "cells": cells,
            });
            serde_json::to_writer_pretty(&mut *w, &doc)?;
            writeln!(w)
        }
        Format::Csv => {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["cell", "waypoint_x_m", "waypoint_y_m", "vertices_m"])
                .map_err(csv_io)?;
            for (i, (cell, wp)) in p.chain.cells.iter().zip(&p.chain.waypoints).enumerate() {
                let verts: Vec<String> = cell
                    .vertices()
                    .iter()
                    .map(|v| format!("{} {}", v.x, v.y))
                    .collect();
                c.write_record([
                    i.to_string(),
                    wp.x.to_string(),
                    wp.y.to_string(),
                    verts.join(";"),
                ])
                .map_err(csv_io)?;
            }
            c.flush()
        }
    })?;
    if let Some(svg) = svg {
        save_svg(svg, &s, Some(&p), None).map_err(|e| io_err(svg, e))?;
    }
    eprintln!(
        "{}: {} cells, path {:.2} m",
        s.name,
        p.chain.len(),
        p.path.total_length
    );
    Ok(())
}

fn write_log_csv(log: &TrajectoryLog, w: &mut dyn Write) -> std::io::Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record([
        "k",
        "time_s",
        "x_m",
        "y_m",
        "xdot_mps",
        "ydot_mps",
        "theta_rad",
        "stance",
        "cell",
        "min_static_barrier",
        "min_moving_barrier",
        "ux_m",
        "uy_m",
        "utheta_rad",
        "status",
        "solve_time_s",
    ])
    .map_err(csv_io)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in &log.steps {
        let s = &r.state;
        c.write_record([
            r.k.to_string(),
            r.time_s.to_string(),
            s.x.to_string(),
            s.y.to_string(),
            s.xdot.to_string(),
            s.ydot.to_string(),
            s.theta.to_string(),
            format!("{:?}", r.stance).to_lowercase(),
            r.cell_index.to_string(),
            r.min_static_barrier.to_string(),
            opt(r.min_moving_barrier),
            opt(r.input.map(|u| u.ux)),
            opt(r.input.map(|u| u.uy)),
            opt(r.input.map(|u| u.utheta)),
            r.solver
                .as_ref()
                .map_or(String::new(), |s| format!("{:?}", s.status).to_lowercase()),
            opt(r.solver.as_ref().map(|s| s.solve_time_s)),
        ])
        .map_err(csv_io)?;
    }
    c.flush()
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    scenario: &str,
    seed: Option<u64>,
    horizon: Option<usize>,
    out: Option<&Path>,
    format: Format,
    svg: Option<&Path>,
    kick_seed: Option<u64>,
    mid_step: Option<f64>,
) -> Result<(), Failure> {
    let mut s = with_seed(load_scenario(scenario)?, seed);
    if let Some(n) = horizon {
        if n == 0 {
            return Err(Failure::Input("--horizon must be at least 1".into()));
        }
        s.mpc = s.mpc.clone().with_horizon(n);
    }
    if let Some(phase) = mid_step {
        if !(phase > 0.0 && phase < s.lip.step_duration_s) {
            return Err(Failure::Input(format!(
                "--mid-step must lie in (0, {})",
                s.lip.step_duration_s
            )));
        }
    }
    let p = plan(&s)?;
    let options = SimOptions {
        disturbance: kick_seed.map(DisturbanceModel::pushes),
        intra_step_phase_s: mid_step,
    };
    let log = run_closed_loop(&s, &p.chain, &s.mpc, &options);
    emit(out, |w| match format {
        Format::Json => log.write_jsonl(w),
        Format::Csv => write_log_csv(&log, w),
    })?;
    if let Some(svg) = svg {
        save_svg(svg, &s, Some(&p), Some(&log)).map_err(|e| io_err(svg, e))?;
    }
    let sum = &log.summary;
    let violations = collision_oracle(&log, &s).len();
    eprintln!(
        "{}: {} after {} steps, path {:.2} m, min static barrier {:.4}, mean solve {:.3} ms, oracle violations {violations}",
        s.name,
        sum.verdict.name(),
        sum.steps,
        sum.path_length_m,
        sum.min_static_barrier,
        sum.mean_solve_time_s * 1e3
    );
    if sum.verdict != Verdict::GoalReached {
        return Err(Failure::Run(format!(
            "{}: {}{}",
            s.name,
            sum.verdict.name(),
            sum.failure
                .as_ref()
                .map_or(String::new(), |f| format!(" ({f})"))
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    families: &[String],
    counts: Vec<usize>,
    maps: usize,
    horizons: Vec<usize>,
    seed: u64,
    threads: Option<usize>,
    out: Option<&Path>,
    format: Format,
) -> Result<(), Failure> {
    let families = families
        .iter()
        .map(|f| {
            ObstacleFamily::parse(f)
                .ok_or_else(|| Failure::Input(format!("unknown obstacle family {f:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if horizons.contains(&0) {
        return Err(Failure::Input("horizons must be at least 1".into()));
    }
    if threads == Some(0) {
        return Err(Failure::Input("--threads must be at least 1".into()));
    }
    let report = run_benchmark(&BenchConfig {
        families,
        counts,
        maps_per_cell: maps,
        horizons,
        seed,
        threads,
    });
    emit(out, |w| match format {
        Format::Csv => report.write_csv(w).map_err(csv_io),
        Format::Json => {
            serde_json::to_writer_pretty(&mut *w, &report)?;
            writeln!(w)
        }
    })?;
    eprint!("{}", report.table());
    eprintln!("wall time {:.1} s", report.wall_time_s);
    Ok(())
}

fn cmd_gen(family: &str, count: usize, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let fam = ObstacleFamily::parse(family)
        .ok_or_else(|| Failure::Input(format!("unknown obstacle family {family:?}")))?;
    let map = generate_random_map(&MapGenParams::benchmark(fam, count, seed))
        .map_err(|e| Failure::Run(e.to_string()))?;
    let name = format!("{}_{count}_{seed}", fam.name());
    let s = Scenario::from_random_map(&name, &map, seed);
    emit(out, |w| writeln!(w, "{}", s.to_json()))?;
    eprintln!(
        "{name}: {} obstacles, coverage {:.3}",
        s.static_obstacles.len(),
        map.coverage
    );
    Ok(())
}

fn cmd_render(scenario: &str, log: &Path, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let s = with_seed(load_scenario(scenario)?, seed);
    let file = File::open(log).map_err(|e| io_err(log, e))?;
    let log_data = TrajectoryLog::read_jsonl(BufReader::new(file)).map_err(|e| io_err(log, e))?;
    let p = plan(&s)?;
    save_svg(out, &s, Some(&p), Some(&log_data)).map_err(|e| io_err(out, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan {
            scenario,
            seed,
            out,
            format,
            svg,
        } => cmd_plan(&scenario, seed, out.as_deref(), format, svg.as_deref()),
        Command::Simulate {
            scenario,
            seed,
            horizon,
            out,
            format,
            svg,
            kick_seed,
            mid_step,
        } => cmd_simulate(
            &scenario,
            seed,
            horizon,
            out.as_deref(),
            format,
            svg.as_deref(),
            kick_seed,
            mid_step,
        ),
        Command::Bench {
            families,
            counts,
            maps,
            horizons,
            seed,
            threads,
            out,
            format,
        } => cmd_bench(
            &families,
            counts,
            maps,
            horizons,
            seed,
            threads,
            out.as_deref(),
            format,
        ),
        Command::Gen {
            family,
            count,
            seed,
            out,
        } => cmd_gen(&family, count, seed, out.as_deref()),
        Command::Render {
            scenario,
            log,
            seed,
            out,
        } => cmd_render(&scenario, &log, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
