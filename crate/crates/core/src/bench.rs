//! Randomized benchmark: generate maps per obstacle family and count,
//! decompose them, run the closed loop at several horizons and check every
//! run with the collision oracle.

use crate::freespace::validate_chain;
use crate::mapgen::{generate_random_map, MapGenError, MapGenParams, ObstacleFamily};
use crate::scenario::Scenario;
use crate::sim::{collision_oracle, run_closed_loop, SimOptions, Verdict};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub families: Vec<ObstacleFamily>,
    pub counts: Vec<usize>,
    pub maps_per_cell: usize,
    pub horizons: Vec<usize>,
    pub seed: u64,
    /// Worker threads; `None` uses every core.
    pub threads: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            families: ObstacleFamily::ALL.to_vec(),
            counts: vec![30, 40, 50, 60],
            maps_per_cell: 10,
            horizons: vec![2, 3, 4],
            seed: 0,
            threads: None,
        }
    }
}

/// One closed-loop run on one map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRun {
    pub horizon: usize,
    pub verdict: Verdict,
    pub steps: usize,
    pub solves: usize,
    pub fallbacks: usize,
    pub mean_solve_time_s: f64,
    pub max_solve_time_s: f64,
    pub path_length_m: f64,
    pub min_static_barrier: f64,
    pub oracle_violations: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub family: ObstacleFamily,
    pub count: usize,
    pub map_index: usize,
    pub map_seed: u64,
    pub coverage: f64,
    pub rrt_time_s: f64,
    pub decomposition_time_s: f64,
    pub cells: usize,
    pub chain_valid: bool,
    /// Generation or planning error; no runs when set.
    pub error: Option<String>,
    pub runs: Vec<HorizonRun>,
}

impl MapRecord {
    pub fn run(&self, horizon: usize) -> Option<&HorizonRun> {
        self.runs.iter().find(|r| r.horizon == horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchConfig,
    /// Sorted by family, count and map index.
    pub maps: Vec<MapRecord>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonStats {
    pub horizon: usize,
    pub runs: usize,
    pub goal_rate: f64,
    pub mean_solve_time_s: f64,
    pub mean_path_length_m: f64,
}

/// Aggregate over the maps of one family and count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub family: ObstacleFamily,
    pub count: usize,
    pub maps: usize,
    pub decomposition_rate: f64,
    pub mean_decomposition_time_s: f64,
    pub horizons: Vec<HorizonStats>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    family: &'a str,
    count: usize,
    map_index: usize,
    map_seed: u64,
    coverage: f64,
    cells: usize,
    chain_valid: bool,
    rrt_time_s: f64,
    decomposition_time_s: f64,
    horizon: usize,
    verdict: &'a str,
    steps: usize,
    solves: usize,
    fallbacks: usize,
    mean_solve_time_s: f64,
    max_solve_time_s: f64,
    path_length_m: f64,
    min_static_barrier: f64,
    oracle_violations: usize,
    error: &'a str,
}

/// Header of [`BenchmarkReport::write_csv`].
pub const CSV_HEADER: &str =
    "family,count,map_index,map_seed,coverage,cells,chain_valid,rrt_time_s,\
decomposition_time_s,horizon,verdict,steps,solves,fallbacks,mean_solve_time_s,max_solve_time_s,\
path_length_m,min_static_barrier,oracle_violations,error";

fn csv_row<'a>(m: &'a MapRecord, r: Option<&'a HorizonRun>) -> CsvRow<'a> {
    CsvRow {
        family: m.family.name(),
        count: m.count,
        map_index: m.map_index,
        map_seed: m.map_seed,
        coverage: m.coverage,
        cells: m.cells,
        chain_valid: m.chain_valid,
        rrt_time_s: m.rrt_time_s,
        decomposition_time_s: m.decomposition_time_s,
        horizon: r.map_or(0, |r| r.horizon),
        verdict: r.map_or("not_run", |r| r.verdict.name()),
        steps: r.map_or(0, |r| r.steps),
        solves: r.map_or(0, |r| r.solves),
        fallbacks: r.map_or(0, |r| r.fallbacks),
        mean_solve_time_s: r.map_or(0.0, |r| r.mean_solve_time_s),
        max_solve_time_s: r.map_or(0.0, |r| r.max_solve_time_s),
        path_length_m: r.map_or(0.0, |r| r.path_length_m),
        min_static_barrier: r.map_or(0.0, |r| r.min_static_barrier),
        oracle_violations: r.map_or(0, |r| r.oracle_violations),
        error: m
            .error
            .as_deref()
            .or(r.and_then(|r| r.failure.as_deref()))
            .unwrap_or(""),
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one benchmark map; independent of which other maps run.
pub fn map_seed(master: u64, family: ObstacleFamily, count: usize, index: usize) -> u64 {
    let fam = ObstacleFamily::ALL
        .iter()
        .position(|f| *f == family)
        .unwrap() as u64;
    mix(mix(mix(master) ^ fam) ^ count as u64) ^ mix(index as u64)
}

/// Static scenario of one benchmark map, with its raw coverage.
pub fn benchmark_scenario(
    family: ObstacleFamily,
    count: usize,
    index: usize,
    master_seed: u64,
) -> Result<(Scenario, f64), MapGenError> {
    let seed = map_seed(master_seed, family, count, index);
    let map = generate_random_map(&MapGenParams::benchmark(family, count, seed))?;
    let name = format!("{}_{count}_{index}", family.name());
    Ok((
        Scenario::from_random_map(&name, &map, mix(seed)),
        map.coverage,
    ))
}

/// Generates, plans and runs one map at every horizon.
pub fn run_map(
    family: ObstacleFamily,
    count: usize,
    index: usize,
    master_seed: u64,
    horizons: &[usize],
) -> MapRecord {
    let seed = map_seed(master_seed, family, count, index);
    let mut rec = MapRecord {
        family,
        count,
        map_index: index,
        map_seed: seed,
        coverage: 0.0,
        rrt_time_s: 0.0,
        decomposition_time_s: 0.0,
        cells: 0,
        chain_valid: false,
        error: None,
        runs: Vec::new(),
    };
    let (scenario, coverage) = match benchmark_scenario(family, count, index, master_seed) {
        Ok(s) => s,
        Err(e) => {
            rec.error = Some(format!("generation: {e}"));
            return rec;
        }
    };
    rec.coverage = coverage;
    let plan = match scenario.plan() {
        Ok(p) => p,
        Err(e) => {
            rec.error = Some(e.to_string());
            return rec;
        }
    };
    rec.rrt_time_s = plan.rrt_time_s;
    rec.decomposition_time_s = plan.decomposition_time_s;
    rec.cells = plan.chain.len();
    rec.chain_valid = validate_chain(&plan.chain, &plan.map, scenario.start, scenario.goal).is_ok();
    for &n in horizons {
        let cfg = scenario.mpc.clone().with_horizon(n);
        let log = run_closed_loop(&scenario, &plan.chain, &cfg, &SimOptions::default());
        let s = &log.summary;
        rec.runs.push(HorizonRun {
            horizon: n,
            verdict: s.verdict,
            steps: s.steps,
            solves: s.solves,
            fallbacks: s.fallbacks,
            mean_solve_time_s: s.mean_solve_time_s,
            max_solve_time_s: log.solve_times().fold(0.0, f64::max),
            path_length_m: s.path_length_m,
            min_static_barrier: s.min_static_barrier,
            oracle_violations: collision_oracle(&log, &scenario).len(),
            failure: s.failure.clone(),
        });
    }
    rec
}

/// Runs the sweep. Jobs are interleaved across families and counts so that
/// machine load affects every count alike; records come back sorted.
pub fn run_benchmark(cfg: &BenchConfig) -> BenchmarkReport {
    let t0 = Instant::now();
    let mut jobs = Vec::new();
    for i in 0..cfg.maps_per_cell {
        for &c in &cfg.counts {
            for &f in &cfg.families {
                jobs.push((f, c, i));
            }
        }
    }
    let work = || -> Vec<MapRecord> {
        jobs.par_iter()
            .map(|&(f, c, i)| run_map(f, c, i, cfg.seed, &cfg.horizons))
            .collect()
    };
    let mut maps = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map(|pool| pool.install(work))
            .unwrap_or_else(|_| work()),
        None => work(),
    };
    maps.sort_by_key(|m| (m.family, m.count, m.map_index));
    BenchmarkReport {
        config: cfg.clone(),
        maps,
        wall_time_s: t0.elapsed().as_secs_f64(),
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean(rx.iter().copied()), mean(ry.iter().copied()));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

impl BenchmarkReport {
    pub fn runs(&self, horizon: usize) -> impl Iterator<Item = (&MapRecord, &HorizonRun)> + '_ {
        self.maps
            .iter()
            .filter_map(move |m| m.run(horizon).map(|r| (m, r)))
    }

    /// Goal rate over every map, counting maps that never ran as failures.
    pub fn goal_rate(&self, horizon: usize) -> f64 {
        let ok = self
            .runs(horizon)
            .filter(|(_, r)| r.verdict == Verdict::GoalReached)
            .count();
        ok as f64 / self.maps.len().max(1) as f64
    }

    pub fn decomposition_rate(&self) -> f64 {
        self.maps
            .iter()
            .filter(|m| m.error.is_none() && m.chain_valid)
            .count() as f64
            / self.maps.len().max(1) as f64
    }

    /// Mean per-solve time at `horizon` over all maps with `count` obstacles,
    /// weighting each solve equally.
    pub fn mean_solve_time(&self, horizon: usize, count: usize) -> f64 {
        let (t, n) = self
            .runs(horizon)
            .filter(|(m, _)| m.count == count)
            .fold((0.0, 0usize), |(t, n), (_, r)| {
                (t + r.mean_solve_time_s * r.solves as f64, n + r.solves)
            });
        if n == 0 {
            f64::NAN
        } else {
            t / n as f64
        }
    }

    /// Spread of [`Self::mean_solve_time`] across counts: (max − min) / min.
    pub fn solve_time_spread(&self, horizon: usize) -> f64 {
        let ts: Vec<f64> = self
            .config
            .counts
            .iter()
            .map(|&c| self.mean_solve_time(horizon, c))
            .collect();
        let lo = ts.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (hi - lo) / lo
    }

    /// Rank correlation between obstacle count and decomposition time over
    /// every decomposed map.
    pub fn decomposition_time_correlation(&self) -> f64 {
        let ok: Vec<&MapRecord> = self.maps.iter().filter(|m| m.error.is_none()).collect();
        let xs: Vec<f64> = ok.iter().map(|m| m.count as f64).collect();
        let ys: Vec<f64> = ok.iter().map(|m| m.decomposition_time_s).collect();
        spearman(&xs, &ys)
    }

    pub fn cell_stats(&self) -> Vec<CellStats> {
        let mut groups: BTreeMap<(ObstacleFamily, usize), Vec<&MapRecord>> = BTreeMap::new();
        for m in &self.maps {
            groups.entry((m.family, m.count)).or_default().push(m);
        }
        groups
            .into_iter()
            .map(|((family, count), ms)| {
                let horizons = self
                    .config
                    .horizons
                    .iter()
                    .map(|&n| {
                        let runs: Vec<&HorizonRun> = ms.iter().filter_map(|m| m.run(n)).collect();
                        let ok: Vec<&&HorizonRun> = runs
                            .iter()
                            .filter(|r| r.verdict == Verdict::GoalReached)
                            .collect();
                        HorizonStats {
                            horizon: n,
                            runs: runs.len(),
                            goal_rate: ok.len() as f64 / ms.len() as f64,
                            mean_solve_time_s: mean(runs.iter().map(|r| r.mean_solve_time_s)),
                            mean_path_length_m: mean(ok.iter().map(|r| r.path_length_m)),
                        }
                    })
                    .collect();
                CellStats {
                    family,
                    count,
                    maps: ms.len(),
                    decomposition_rate: ms
                        .iter()
                        .filter(|m| m.error.is_none() && m.chain_valid)
                        .count() as f64
                        / ms.len() as f64,
                    mean_decomposition_time_s: mean(
                        ms.iter()
                            .filter(|m| m.error.is_none())
                            .map(|m| m.decomposition_time_s),
                    ),
                    horizons,
                }
            })
            .collect()
    }

    /// One row per map and horizon; maps that never ran get one row with
    /// horizon 0 and verdict `not_run`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for m in &self.maps {
            if m.runs.is_empty() {
                out.serialize(csv_row(m, None))?;
            }
            for r in &m.runs {
                out.serialize(csv_row(m, Some(r)))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Human-readable summary, one line per family and count.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{:<19} {:>5} {:>5} {:>9}",
            "family", "count", "maps", "decomp ms"
        );
        for n in &self.config.horizons {
            let _ = write!(s, " | N={n} goal  solve ms");
        }
        s.push('\n');
        for c in self.cell_stats() {
            let _ = write!(
                s,
                "{:<19} {:>5} {:>5} {:>9.2}",
                c.family.name(),
                c.count,
                c.maps,
                c.mean_decomposition_time_s * 1e3
            );
            for h in &c.horizons {
                let _ = write!(
                    s,
                    " | {:>8.0}% {:>9.4}",
                    h.goal_rate * 100.0,
                    h.mean_solve_time_s * 1e3
                );
            }
            s.push('\n');
        }
        let _ = write!(
            s,
            "{:<19} {:>5} {:>5} {:>9}",
            "all",
            "",
            self.maps.len(),
            ""
        );
        for &n in &self.config.horizons {
            let _ = write!(s, " | {:>8.0}% {:>9}", self.goal_rate(n) * 100.0, "");
        }
        s.push('\n');
        s
    }
}
