//! Scenario loading and output writing for the `fuota-sim` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fuota_core::engine::{replication_seed, run_once_traced, run_replications, slot_plan_for, RunResult};
use fuota_core::metrics::{aggregate, aggregate_csv, cell_edge, raw_csv, DistanceBin};
use fuota_core::scenario::{ScenarioRun, PRESETS};
use fuota_core::{Scenario, Scheme};

/// A preset name, or the path of a TOML scenario file.
pub fn load_scenario(spec: &str) -> Result<Scenario> {
    if let Some(s) = Scenario::preset(spec) {
        return Ok(s);
    }
    let path = Path::new(spec);
    if !path.exists() {
        bail!(
            "`{spec}` is neither a preset ({}) nor an existing scenario file",
            PRESETS.join(", ")
        );
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut scenario: Scenario =
        toml::from_str(&text).with_context(|| format!("invalid scenario file {}", path.display()))?;
    if scenario.name == Scenario::default().name {
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            scenario.name = stem.to_string();
        }
    }
    Ok(scenario)
}

/// Command-line overrides applied on top of a loaded scenario.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub schemes: Option<Vec<Scheme>>,
    pub runs: Option<u32>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, scenario: &mut Scenario) {
        if let Some(s) = &self.schemes {
            scenario.schemes = s.clone();
        }
        if let Some(r) = self.runs {
            scenario.config.replications = r;
        }
        if let Some(seed) = self.seed {
            scenario.config.seed = seed;
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OutputOptions {
    pub dump_trace: bool,
    pub dump_slot_plan: bool,
}

/// Files written so far; removed again if the scenario fails part-way.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(path);
        Ok(())
    }

    fn remove_all(&self) {
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean<I: Iterator<Item = f64>>(it: I) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn summary_header(scenario: &Scenario) -> String {
    let mut h = String::from("scheme");
    for s in &scenario.sweep {
        h.push(',');
        h.push_str(s.axis.name());
    }
    h.push_str(",edge_center_m,edge_completion_s,edge_activity_s,edge_energy_J,edge_tx_energy_J,edge_rx_energy_J,edge_n,edge_decoded,decoded_fraction,mean_gateway_frames,mean_d2d_frames,mean_session_end_s");
    h
}

fn summary_row(run: &ScenarioRun, results: &[RunResult], bins: &[DistanceBin]) -> String {
    let mut row = run.scheme.to_string();
    for (_, v) in &run.point {
        let _ = write!(row, ",{v}");
    }
    let edge = cell_edge(bins).expect("at least one bin");
    let eds = results.iter().map(|r| r.eds.len()).sum::<usize>().max(1);
    let decoded = results.iter().map(RunResult::decoded).sum::<usize>();
    let _ = write!(
        row,
        ",{},{},{},{},{},{},{},{},{},{},{},{}",
        edge.center_m(),
        opt(edge.mean_completion_s),
        opt(edge.mean_activity_s),
        opt(edge.mean_energy_j),
        opt(edge.mean_tx_energy_j),
        opt(edge.mean_rx_energy_j),
        edge.n,
        edge.n_decoded,
        decoded as f64 / eds as f64,
        mean(results.iter().map(|r| f64::from(r.gateway_frames))),
        mean(results.iter().map(|r| r.d2d_frames as f64)),
        mean(results.iter().map(|r| r.session_end_s)),
    );
    row
}

/// Runs every (scheme, sweep point) of `scenario` and writes its CSVs into
/// `out`. Returns the written paths. On failure nothing is left behind.
pub fn run_scenario(scenario: &Scenario, out: &Path, options: OutputOptions) -> Result<Vec<PathBuf>> {
    let runs = scenario.expand()?;
    let mut outputs = Outputs::new(out)?;
    match write_all(scenario, &runs, &mut outputs, options) {
        Ok(()) => Ok(outputs.files),
        Err(e) => {
            outputs.remove_all();
            Err(e)
        }
    }
}

fn write_all(
    scenario: &Scenario,
    runs: &[ScenarioRun],
    outputs: &mut Outputs,
    options: OutputOptions,
) -> Result<()> {
    let echo = toml::to_string(scenario).context("serialising the effective configuration")?;
    outputs.write(&format!("{}.config.toml", scenario.name), &echo)?;
    let mut summary = summary_header(scenario);
    summary.push('\n');
    for run in runs {
        let cfg = &run.config;
        let results = run_replications(cfg).with_context(|| format!("running {}", run.label))?;
        let bins = aggregate(&results, cfg.bin_width_m, cfg.cell_radius_m, &cfg.energy)?;
        outputs.write(&format!("{}.csv", run.label), &aggregate_csv(&bins))?;
        outputs.write(&format!("{}.raw.csv", run.label), &raw_csv(&results))?;
        if options.dump_trace {
            let (_, trace) = run_once_traced(cfg, replication_seed(cfg.seed, 0))?;
            outputs.write(&format!("{}.trace.txt", run.label), &trace.to_text())?;
        }
        if options.dump_slot_plan {
            outputs.write(&format!("{}.plan.csv", run.label), &slot_plan_for(cfg)?.to_csv())?;
        }
        let edge = cell_edge(&bins).and_then(|b| b.mean_completion_s);
        eprintln!(
            "{}: {} runs, cell-edge completion {}",
            run.label,
            results.len(),
            edge.map_or("n/a".to_string(), |s| format!("{:.2} h", s / 3600.0))
        );
        summary.push_str(&summary_row(run, &results, &bins));
        summary.push('\n');
    }
    outputs.write(&format!("{}_summary.csv", scenario.name), &summary)?;
    Ok(())
}
