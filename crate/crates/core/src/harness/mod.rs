//! Experiment runners behind the command-line tool: path simulation with
//! weights, proposal comparison, figures, an independence sampler and
//! backward-table dumps. Every runner writes into `config.out`.

pub mod config;
pub mod csv;
pub mod svg;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

pub use config::{AuxKind, ExperimentConfig, ModelChoice, SigmaPolicyKind};

use crate::error::{Error, Result};
use crate::proposals::{AuxiliaryChoice, Proposal, ProposalKind};
use crate::reference::{
    default_epsilon, ou_bridge_exact, ou_bridge_mean, ou_bridge_variance, rejection_oracle, ExampleModel,
    OracleBudget,
};
use crate::sde::{derive_seed, path_rng, sample_wiener, solve_flow, BridgeSpec, SamplePath, TimeGrid};
use crate::weights::{ess, log_weight, LogWeight};
use csv::{Table, WeightRecord};
use svg::{Panel, Series};

/// Endpoint tolerance of the rejection-sampled panel of `sine-well`.
pub const SINE_WELL_EPS: f64 = 0.05;

/// Figure names accepted by [`run_figure`].
pub const FIGURES: [&str; 2] = ["ou", "sine-well"];

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config("threads", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let file = File::create(&path)?;
    Ok((path, BufWriter::new(file)))
}

/// Proposal paths for seeds `derive_seed(seed, k)`, `k < n`. Paths from two
/// proposals with the same seed share their Wiener increments.
pub fn simulate_paths(proposal: &Proposal, seed: u64, n: usize) -> Result<Vec<SamplePath>> {
    (0..n)
        .into_par_iter()
        .map(|k| proposal.simulate_seed(derive_seed(seed, k as u64)))
        .collect()
}

/// Like [`simulate_paths`], with each path's log-weight.
pub fn simulate_weighted(proposal: &Proposal, seed: u64, n: usize) -> Result<Vec<(SamplePath, LogWeight)>> {
    (0..n)
        .into_par_iter()
        .map(|k| {
            let path = proposal.simulate_seed(derive_seed(seed, k as u64))?;
            let w = log_weight(proposal, &path)?;
            Ok((path, w))
        })
        .collect()
}

fn write_path_csv(dir: &Path, name: &str, paths: &[SamplePath]) -> Result<PathBuf> {
    let (file, mut w) = create(dir, name)?;
    let rows: Vec<(usize, &SamplePath)> = paths.iter().enumerate().collect();
    csv::write_paths(&mut w, &rows)?;
    w.flush()?;
    Ok(file)
}

#[derive(Debug, Clone)]
pub struct SimulateReport {
    pub proposal: String,
    pub paths_csv: PathBuf,
    pub weights_csv: PathBuf,
    pub ess: f64,
}

/// Simulates `config.paths` bridges under each listed proposal and writes
/// `<name>_paths.csv` and `<name>_weights.csv`.
pub fn run_simulate(config: &ExperimentConfig) -> Result<Vec<SimulateReport>> {
    config.validate()?;
    let (model, spec, grid) = (config.model(), config.spec()?, config.grid()?);
    let mut reports = Vec::new();
    for kind in config.proposal_kinds()? {
        let proposal = Proposal::new(kind.clone(), &model, &spec, &grid)?;
        let samples = simulate_weighted(&proposal, config.seed, config.paths)?;
        let (paths, weights): (Vec<SamplePath>, Vec<LogWeight>) = samples.into_iter().unzip();
        let name = kind.name();
        let paths_csv = write_path_csv(&config.out, &format!("{name}_paths.csv"), &paths)?;
        let records: Vec<WeightRecord> = weights
            .iter()
            .enumerate()
            .map(|(k, w)| WeightRecord::new(k, w))
            .collect();
        let (weights_csv, mut w) = create(&config.out, &format!("{name}_weights.csv"))?;
        csv::write_weights(&mut w, &records)?;
        w.flush()?;
        let totals: Vec<f64> = weights.iter().map(|w| w.total).collect();
        reports.push(SimulateReport {
            proposal: kind.to_string(),
            paths_csv,
            weights_csv,
            ess: ess(&totals)?,
        });
    }
    Ok(reports)
}

/// Exact bridge moments `(mean, variance)` at time `t` when the model has a
/// closed-form bridge.
pub fn exact_bridge_moments(model: &ModelChoice, spec: &BridgeSpec, t: f64) -> Option<(f64, f64)> {
    match *model {
        ModelChoice::Example(ExampleModel::Ou { alpha, sigma }) => {
            Some((ou_bridge_mean(alpha, spec, t), ou_bridge_variance(alpha, sigma, spec, t)))
        }
        ModelChoice::Linear { b: 0.0, sigma, .. } => {
            let (u, v, big_t) = (spec.u[0], spec.v[0], spec.t_end);
            Some((u + (v - u) * t / big_t, sigma * sigma * t * (big_t - t) / big_t))
        }
        ModelChoice::Linear { b, beta, sigma } => {
            // X − μ is an OU process with rate −b around μ = −β/b
            let mu = -beta / b;
            let shifted = BridgeSpec::scalar(spec.u[0] - mu, spec.v[0] - mu, spec.t_end).ok()?;
            Some((
                mu + ou_bridge_mean(-b, &shifted, t),
                ou_bridge_variance(-b, sigma, &shifted, t),
            ))
        }
        ModelChoice::Example(_) => None,
    }
}

/// Reference mean path and midpoint moments for [`run_compare`].
#[derive(Debug, Clone)]
pub struct ReferenceSummary {
    pub source: &'static str,
    pub mean_path: Vec<f64>,
    pub mid_mean: f64,
    pub mid_second: f64,
}

pub fn reference_summary(config: &ExperimentConfig, grid: &Arc<TimeGrid>) -> Result<ReferenceSummary> {
    let spec = config.spec()?;
    let mid = grid.nearest(spec.t_end / 2.0);
    if let Some((m, var)) = exact_bridge_moments(&config.model, &spec, grid.t(mid)) {
        let mean_path = grid
            .nodes()
            .iter()
            .map(|&t| exact_bridge_moments(&config.model, &spec, t).map_or(f64::NAN, |p| p.0))
            .collect();
        return Ok(ReferenceSummary {
            source: "exact",
            mean_path,
            mid_mean: m,
            mid_second: var + m * m,
        });
    }
    let model = config.model();
    let eps = config.eps.unwrap_or_else(|| default_epsilon(&model, &spec));
    let run = rejection_oracle(
        &model,
        &spec,
        grid,
        eps,
        config.oracle_paths,
        derive_seed(config.seed, u64::MAX),
        OracleBudget::default(),
    )?;
    let n = run.paths.len() as f64;
    let mut mean_path = vec![0.0; grid.len()];
    for p in &run.paths {
        for (m, x) in mean_path.iter_mut().zip(p.values()) {
            *m += x / n;
        }
    }
    let mids: Vec<f64> = run.paths.iter().map(|p| p.state(mid)[0]).collect();
    Ok(ReferenceSummary {
        source: "oracle",
        mean_path,
        mid_mean: mids.iter().sum::<f64>() / n,
        mid_second: mids.iter().map(|x| x * x).sum::<f64>() / n,
    })
}

/// Normalised signed weights.
fn normalized(weights: &[LogWeight]) -> Vec<f64> {
    let max = weights.iter().map(|w| w.total).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = weights.iter().map(|w| w.sign * (w.total - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn sup_gap(mean: &[f64], reference: &[f64]) -> f64 {
    mean.iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

pub const COMPARE_COLUMNS: [&str; 8] = [
    "paths",
    "ess",
    "mean_mid",
    "mean_mid_se",
    "second_mid",
    "second_mid_se",
    "sup_distance",
    "unweighted_sup_distance",
];

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub table: Table,
    pub csv: PathBuf,
    pub reference: ReferenceSummary,
}

/// Compares two or more proposals on the same seeds: ESS, importance-sampling
/// estimates of `E[X_{T/2}]` and `E[X_{T/2}²]`, and the sup distance from the
/// weighted (and unweighted) mean path to the reference mean path. Writes
/// `compare.csv`, with a final `reference` row.
pub fn run_compare(config: &ExperimentConfig) -> Result<CompareReport> {
    config.validate()?;
    let kinds = config.proposal_kinds()?;
    if kinds.len() < 2 {
        return Err(Error::config("proposal", "compare needs at least two proposals"));
    }
    let labels: Vec<String> = kinds.iter().map(ProposalKind::to_string).collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(Error::config("proposal", format!("'{l}' is listed twice")));
        }
    }
    let (model, spec, grid) = (config.model(), config.spec()?, config.grid()?);
    let reference = reference_summary(config, &grid)?;
    let mid = grid.nearest(spec.t_end / 2.0);
    let n = config.paths;
    let mut table = Table::new("proposal", &COMPARE_COLUMNS);
    for (kind, label) in kinds.into_iter().zip(labels) {
        let proposal = Proposal::new(kind, &model, &spec, &grid)?;
        let samples = simulate_weighted(&proposal, config.seed, n)?;
        let weights: Vec<LogWeight> = samples.iter().map(|(_, w)| w.clone()).collect();
        let xs: Vec<f64> = samples.iter().map(|(p, _)| p.state(mid)[0]).collect();
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let first = crate::weights::is_estimate(&xs, &weights)?;
        let second = crate::weights::is_estimate(&sq, &weights)?;
        let wn = normalized(&weights);
        let mut weighted = vec![0.0; grid.len()];
        let mut plain = vec![0.0; grid.len()];
        for ((p, _), w) in samples.iter().zip(&wn) {
            for ((a, b), x) in weighted.iter_mut().zip(plain.iter_mut()).zip(p.values()) {
                *a += w * x;
                *b += x / n as f64;
            }
        }
        table.push(
            label,
            vec![
                Some(n as f64),
                Some(first.ess),
                Some(first.mean),
                Some(first.std_error),
                Some(second.mean),
                Some(second.std_error),
                Some(sup_gap(&weighted, &reference.mean_path)),
                Some(sup_gap(&plain, &reference.mean_path)),
            ],
        );
    }
    table.push(
        format!("reference({})", reference.source),
        vec![None, None, Some(reference.mid_mean), None, Some(reference.mid_second), None, None, None],
    );
    let (csv, mut w) = create(&config.out, "compare.csv")?;
    table.write(&mut w)?;
    w.flush()?;
    Ok(CompareReport { table, csv, reference })
}

#[derive(Debug, Clone)]
pub struct MhReport {
    pub iterations: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub trace_csv: PathBuf,
    pub paths_csv: PathBuf,
}

/// Independence Metropolis–Hastings over bridges from the first listed
/// proposal. Candidate `k` uses seed `derive_seed(seed, k)`; the chain starts
/// from candidate 0. Writes `mh_trace.csv` (one row per iteration) and
/// `mh_paths.csv` (the current path every `thin` iterations).
pub fn run_mh(config: &ExperimentConfig, iterations: usize) -> Result<MhReport> {
    config.validate()?;
    if iterations == 0 {
        return Err(Error::config("iterations", "at least one iteration is required"));
    }
    let kind = config.proposal_kinds()?.remove(0);
    let (model, spec, grid) = (config.model(), config.spec()?, config.grid()?);
    let proposal = Proposal::new(kind, &model, &spec, &grid)?;
    let mid = grid.nearest(spec.t_end / 2.0);
    let draw = |k: usize| -> Result<(SamplePath, LogWeight)> {
        let path = proposal.simulate_seed(derive_seed(config.seed, k as u64))?;
        let w = log_weight(&proposal, &path)?;
        Ok((path, w))
    };
    let mut uniforms = path_rng(derive_seed(config.seed ^ 0x6d68, u64::MAX));
    let (mut current, mut current_w) = draw(0)?;
    let mut accepted = 0;
    let mut trace = Table::new("iteration", &["accepted", "log_weight", "x_mid"]);
    let mut kept: Vec<(usize, SamplePath)> = Vec::new();
    const BATCH: usize = 256;
    let mut it = 0;
    while it < iterations {
        let end = (it + BATCH).min(iterations);
        let candidates: Vec<(SamplePath, LogWeight)> =
            (it + 1..=end).into_par_iter().map(draw).collect::<Result<_>>()?;
        for (path, w) in candidates {
            it += 1;
            if current_w.omitted != w.omitted {
                return Err(Error::ConstantMismatch);
            }
            let u: f64 = uniforms.random();
            let accept = crate::weights::mh_accept(w.total - current_w.total, u);
            if accept {
                accepted += 1;
                current = path;
                current_w = w;
            }
            trace.push(
                it.to_string(),
                vec![Some(accept as u8 as f64), Some(current_w.total), Some(current.state(mid)[0])],
            );
            if it % config.thin == 0 {
                kept.push((it, current.clone()));
            }
        }
    }
    let (trace_csv, mut w) = create(&config.out, "mh_trace.csv")?;
    trace.write(&mut w)?;
    w.flush()?;
    let (paths_csv, mut w) = create(&config.out, "mh_paths.csv")?;
    let rows: Vec<(usize, &SamplePath)> = kept.iter().map(|(k, p)| (*k, p)).collect();
    csv::write_paths(&mut w, &rows)?;
    w.flush()?;
    Ok(MhReport {
        iterations,
        accepted,
        acceptance_rate: accepted as f64 / iterations as f64,
        trace_csv,
        paths_csv,
    })
}

/// Writes the backward table `(t, K, v, H̃)` of the configured auxiliary to
/// `tables.csv`.
pub fn run_tables(config: &ExperimentConfig) -> Result<PathBuf> {
    config.validate()?;
    let (model, spec, grid) = (config.model(), config.spec()?, config.grid()?);
    let proposal = Proposal::new(ProposalKind::Guided(config.auxiliary()?), &model, &spec, &grid)?;
    let setup = proposal.guided_setup().expect("guided proposal has a setup");
    let (path, mut w) = create(&config.out, "tables.csv")?;
    setup.table.write_csv(&mut w)?;
    w.flush()?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct FigureReport {
    pub svg: PathBuf,
    pub csvs: Vec<PathBuf>,
}

fn figure_model(config: &ExperimentConfig, name: &str) -> Result<ExampleModel> {
    Ok(match (config.model, name) {
        (ModelChoice::Example(m @ ExampleModel::Ou { .. }), "ou") => m,
        (ModelChoice::Example(m @ ExampleModel::OuSine { .. }), "sine-well") => m,
        (_, "ou") => ExampleModel::by_name("ou")?,
        _ => ExampleModel::by_name("ou-sine")?,
    })
}

/// Renders a figure into `<out>/figure_<name>.svg` with its data as
/// `<name>_<series>.csv`.
///
/// `ou`: one panel overlaying the deterministic flow with 5 exact OU bridges,
/// 5 guided and 5 residual proposals on shared increments.
/// `sine-well`: four panels with the flow, 25 guided, 25 residual and 25
/// rejection-sampled bridges of the double-well model.
///
/// The model's parameters and endpoints, `h`, `seed`, `eps` (default
/// [`SINE_WELL_EPS`]) and `out` are taken from `config` when it selects the
/// figure's model.
pub fn run_figure(name: &str, config: &ExperimentConfig) -> Result<FigureReport> {
    if !FIGURES.contains(&name) {
        return Err(Error::config("figure", format!("unknown figure '{name}', expected one of {FIGURES:?}")));
    }
    let mut config = config.clone();
    let example = figure_model(&config, name)?;
    if config.model != ModelChoice::Example(example) {
        config.model = ModelChoice::Example(example);
        config.u = None;
        config.v = None;
        config.t_end = None;
    }
    config.proposals = vec!["guided".into(), "residual".into()];
    config.aux = AuxKind::Simple51;
    config.validate()?;
    let (model, spec, grid) = (config.model(), config.spec()?, config.grid()?);
    let n = if name == "ou" { 5 } else { 25 };
    let flow = solve_flow(&model, &spec.u, &grid)?;
    let flow_path = SamplePath::new(grid.clone(), model.dim(), flow.states().iter().flat_map(|x| x.iter().copied()).collect())?;
    let guided = Proposal::new(ProposalKind::Guided(AuxiliaryChoice::FlowDrift), &model, &spec, &grid)?;
    let residual = Proposal::new(ProposalKind::Residual, &model, &spec, &grid)?;
    let guided_paths = simulate_paths(&guided, config.seed, n)?;
    let residual_paths = simulate_paths(&residual, config.seed, n)?;
    let (third_label, third_paths) = match example {
        ExampleModel::Ou { alpha, sigma } => {
            let paths = (0..n)
                .into_par_iter()
                .map(|k| {
                    let dw = sample_wiener(&grid, 1, derive_seed(config.seed, k as u64));
                    ou_bridge_exact(alpha, sigma, &spec, &grid, &dw)
                })
                .collect::<Result<Vec<_>>>()?;
            ("true", paths)
        }
        _ => {
            let eps = config.eps.unwrap_or(SINE_WELL_EPS);
            let run = rejection_oracle(&model, &spec, &grid, eps, n, derive_seed(config.seed, u64::MAX), OracleBudget::default())?;
            ("oracle", run.paths)
        }
    };

    let out = &config.out;
    let csvs = vec![
        write_path_csv(out, &format!("{name}_flow.csv"), std::slice::from_ref(&flow_path))?,
        write_path_csv(out, &format!("{name}_{third_label}.csv"), &third_paths)?,
        write_path_csv(out, &format!("{name}_guided.csv"), &guided_paths)?,
        write_path_csv(out, &format!("{name}_residual.csv"), &residual_paths)?,
    ];
    let flow_series = |color: &str| Series::from_paths("dynSys", color, [&flow_path]);
    let third = Series::from_paths(third_label, "black", &third_paths);
    let guided_series = Series::from_paths("guided", "blue", &guided_paths);
    let residual_series = Series::from_paths("residual", "red", &residual_paths);
    let svg_text = if name == "ou" {
        svg::render(
            &[Panel::new("OU bridges", vec![flow_series("green"), third, guided_series, residual_series])],
            1,
        )
    } else {
        svg::render(
            &[
                Panel::new("solution of the dynamical system", vec![flow_series("green")]),
                Panel::new("guided proposals", vec![guided_series]),
                Panel::new("residual proposals", vec![residual_series]),
                Panel::new("rejection-sampled bridges", vec![third]),
            ],
            2,
        )
    };
    let (svg_path, mut w) = create(out, &format!("figure_{name}.svg"))?;
    w.write_all(svg_text.as_bytes())?;
    w.flush()?;
    Ok(FigureReport { svg: svg_path, csvs })
}
