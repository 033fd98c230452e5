//! The six experiments. Each experiment is split into independent cells
//! keyed by (seed, width, metric) or its analogue; cells run on a worker
//! pool and their artifacts are written afterwards in cell order, so the
//! output does not depend on scheduling.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use ngd_core::data::{accuracy, forster_transform, load_idx, mnist_train_paths, read_csv, synthetic_gaussian, Dataset};
use ngd_core::diagnostics::{alpha_empirical, divergence_probe, isotropy_report, IsotropyReport, ProbeModel, ProbeStatus};
use ngd_core::dynamics::{ntk_trajectory, kernel_prediction, Trajectory};
use ngd_core::error::Error;
use ngd_core::fim::{MetricKind, MetricSpec};
use ngd_core::kernels::{alpha_of, analytic_stack, thetabar};
use ngd_core::network::{Activation, NetworkConfig, Params};
use ngd_core::numerics::SymmetricEigen;
use ngd_core::trainer::{discrepancy, linearized_train, train, TrainConfig};
use rayon::prelude::*;

use crate::config::{DataSource, ExperimentConfig, ExperimentId, LrSetting};
use crate::error::{CliError, CliResult};
use crate::output::{render_steps, render_summary, step_rows, write_file, SummaryRow};
use crate::plot::emit_plots;

/// Files written by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub step_files: Vec<PathBuf>,
    pub summary: PathBuf,
    pub extra_files: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Default)]
struct CellOutput {
    /// Per-step CSVs as `(file name, contents)`.
    steps: Vec<(String, String)>,
    /// Other raw files.
    extra: Vec<(String, String)>,
    summary: Vec<SummaryRow>,
    /// Lines of `accuracy.csv`.
    accuracy: Vec<String>,
}

#[derive(Debug, Clone)]
struct Cell {
    seed_index: usize,
    width: usize,
    depth: usize,
    activation: Activation,
    /// Index into the metric list; unused by the damping sweep.
    metric: usize,
}

pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> CliResult<Dataset> {
    let d = &cfg.data;
    let mut data = match d.source {
        DataSource::Mnist => {
            let (images, labels) = mnist_train_paths(&cfg.data_root());
            load_idx(&images, &labels, &d.classes, d.n_train, d.n_test, seed)?
        }
        DataSource::Synthetic => synthetic_gaussian(d.n_train, d.n_test, d.input_dim, seed)?.with_sign_targets(seed),
        DataSource::Csv => {
            let path = cfg.referenced_paths().pop().ok_or_else(|| CliError::Config("data.path is required for csv data".into()))?;
            read_csv(&path)?
        }
    };
    if d.forster {
        data.x = forster_transform(data.x.view(), 1e-10, 10_000)?;
    }
    data.check()?;
    Ok(data)
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Splits a run error into its trajectory and divergence step.
fn settle(run: ngd_core::error::Result<Trajectory>) -> CliResult<(Trajectory, Option<usize>)> {
    match run {
        Ok(t) => Ok((t, None)),
        Err(Error::Diverged { step, trajectory }) => Ok((*trajectory, Some(step))),
        Err(e) => Err(e.into()),
    }
}

fn final_loss(traj: &Trajectory, diverged: Option<usize>) -> f64 {
    if diverged.is_some() {
        f64::INFINITY
    } else {
        traj.final_loss()
    }
}

fn report_or_nan(report: ngd_core::error::Result<IsotropyReport>) -> CliResult<(f64, f64)> {
    match report {
        Ok(r) => Ok((alpha_empirical(&r), r.condition_number)),
        Err(e) if e.is_numerical() => Ok((f64::NAN, f64::INFINITY)),
        Err(e) => Err(e.into()),
    }
}

fn network_for(cfg: &ExperimentConfig, data: &Dataset, cell: &Cell) -> CliResult<NetworkConfig> {
    Ok(NetworkConfig::uniform(
        data.input_dim(),
        cell.width,
        cell.depth,
        data.outputs(),
        cfg.network.sigma_w2,
        cfg.network.sigma_b2,
        cell.activation,
    )?)
}

fn run_model(network: &NetworkConfig, params: &Params, tc: &TrainConfig, data: &Dataset, linearized: bool) -> CliResult<(Trajectory, Option<usize>)> {
    if linearized {
        settle(linearized_train(network, params, tc, data))
    } else {
        settle(train(network, params, tc, data).map(|r| r.0))
    }
}

fn convergence(cfg: &ExperimentConfig, data: &Dataset, seed: u64, cell: &Cell) -> CliResult<CellOutput> {
    let network = network_for(cfg, data, cell)?;
    let tc = cfg.base_train_configs(cell.depth)?.swap_remove(cell.metric);
    let params = Params::init(&network, seed);
    let spec = tc.spec(&network)?;
    let (alpha, cond) = report_or_nan(isotropy_report(&spec, &network, &params, data.x.view()))?;
    let (traj, diverged) = run_model(&network, &params, &tc, data, cfg.train.linearized)?;
    let name = spec.name();
    let mut row = SummaryRow::new(name, cell.width as f64, seed);
    row.alpha_emp = alpha;
    row.cond_number = cond;
    row.final_loss = final_loss(&traj, diverged);
    Ok(CellOutput {
        steps: vec![(format!("{name}_M{}_seed{seed}.csv", cell.width), render_steps(&step_rows(&traj, diverged)))],
        summary: vec![row],
        ..Default::default()
    })
}

fn tridiag_damping(cfg: &ExperimentConfig, data: &Dataset, seed: u64, cell: &Cell) -> CliResult<CellOutput> {
    let network = network_for(cfg, data, cell)?;
    let params = Params::init(&network, seed);
    let eta = match cfg.train.lr {
        LrSetting::Fixed(eta) => eta,
        LrSetting::Named(_) => return Err(CliError::Config("tridiag_damping needs a numeric train.lr".into())),
    };
    let rhos = cfg.train.rho.clone().unwrap_or_default();
    let model = if cfg.train.linearized { ProbeModel::Linearized } else { ProbeModel::Full };
    let probe = divergence_probe(&network, &params, data, &rhos, cfg.train.steps, eta, model)?;
    let mut out = CellOutput::default();
    for r in probe {
        let diverged = match r.status {
            ProbeStatus::Converged => None,
            ProbeStatus::Diverged { step } => Some(step.unwrap_or(0)),
        };
        let metric = format!("tridiagonal_L{}_rho{:e}", cell.depth, r.rho);
        out.steps.push((format!("{metric}_M{}_seed{seed}.csv", cell.width), render_steps(&step_rows(&r.trajectory, diverged))));
        let mut row = SummaryRow::new(metric, cell.width as f64, seed);
        row.final_loss = final_loss(&r.trajectory, diverged);
        out.summary.push(row);
    }
    Ok(out)
}

fn prediction(cfg: &ExperimentConfig, data: &Dataset, seed: u64, cell: &Cell) -> CliResult<CellOutput> {
    let network = network_for(cfg, data, cell)?;
    let tc = cfg.base_train_configs(cell.depth)?.swap_remove(cell.metric);
    let stack = analytic_stack(&network, data.x.view(), data.x_test.view())?;
    let tb = thetabar(&tc.metric, &stack, &network)?;
    let pred = kernel_prediction(&tb, data.y.view())?;
    let eta = match cfg.train.lr {
        LrSetting::Fixed(eta) => eta,
        LrSetting::Named(_) => cfg.train.lr_scale / tb.alpha,
    };
    let zeros = Array2::zeros(data.y.dim());
    let zeros_test = Array2::zeros((data.n_test(), data.outputs()));
    let (traj, diverged) = settle(ntk_trajectory(&tb, eta, cfg.train.steps, data.y.view(), zeros.view(), zeros_test.view()))?;
    let name = MetricSpec::new(tc.metric.clone(), 0.0).name();
    let acc = if data.test_labels.is_empty() { f64::NAN } else { accuracy(pred.view(), &data.test_labels, &data.classes) };
    let eig = SymmetricEigen::new(&((&tb.train_block + &tb.train_block.t()) * 0.5))?;
    let mut row = SummaryRow::new(name, f64::INFINITY, seed);
    row.alpha_emp = tb.alpha;
    row.cond_number = if eig.lambda_min() > 0.0 { eig.lambda_max() / eig.lambda_min() } else { f64::INFINITY };
    row.final_loss = final_loss(&traj, diverged);
    Ok(CellOutput {
        steps: vec![(format!("{name}_analytic_seed{seed}.csv"), render_steps(&step_rows(&traj, diverged)))],
        summary: vec![row],
        accuracy: vec![format!("{name},{seed},{}", crate::output::fmt_f64(acc))],
        ..Default::default()
    })
}

fn isotropy_vs_width(cfg: &ExperimentConfig, data: &Dataset, seed: u64, cell: &Cell) -> CliResult<CellOutput> {
    let network = network_for(cfg, data, cell)?;
    let tc = cfg.base_train_configs(cell.depth)?.swap_remove(cell.metric);
    let spec = tc.spec(&network)?;
    let params = Params::init(&network, seed);
    let name = spec.name();
    let mut row = SummaryRow::new(name, cell.width as f64, seed);
    let mut out = CellOutput::default();
    match isotropy_report(&spec, &network, &params, data.x.view()) {
        Ok(r) => {
            row.alpha_emp = alpha_empirical(&r);
            row.cond_number = r.condition_number;
            let eig = SymmetricEigen::new(&((&r.thetabar + &r.thetabar.t()) * 0.5))?;
            let mut text = String::from("index,eigenvalue\n");
            for (i, v) in eig.values.iter().enumerate() {
                text.push_str(&format!("{i},{}\n", crate::output::fmt_f64(*v)));
            }
            out.extra.push((format!("spectrum_{name}_M{}_seed{seed}.csv", cell.width), text));
        }
        Err(e) if e.is_numerical() => row.cond_number = f64::INFINITY,
        Err(e) => return Err(e.into()),
    }
    out.summary.push(row);
    Ok(out)
}

fn unitwise_alpha(cfg: &ExperimentConfig, data: &Dataset, seed: u64, cell: &Cell) -> CliResult<CellOutput> {
    let network = network_for(cfg, data, cell)?;
    let mut tc = cfg.base_train_configs(cell.depth)?.swap_remove(0);
    tc.metric = MetricKind::UnitWise;
    let spec = tc.spec(&network)?;
    let params = Params::init(&network, seed);
    let (alpha, cond) = report_or_nan(isotropy_report(&spec, &network, &params, data.x.view()))?;
    let theory = alpha_of(&MetricKind::UnitWise, &network, data.n_train())?;
    let (traj, diverged) = run_model(&network, &params, &tc, data, cfg.train.linearized)?;
    let shift = match cell.activation {
        Activation::ShiftedRelu(s) => s,
        _ => 0.0,
    };
    let metric = format!("unitwise_s{shift}");
    let mut row = SummaryRow::new(metric.clone(), cell.width as f64, seed);
    row.alpha_emp = alpha;
    row.cond_number = cond;
    row.final_loss = final_loss(&traj, diverged);
    row.discrepancy = (alpha / theory - 1.0).abs();
    Ok(CellOutput {
        steps: vec![(sanitize(&format!("{metric}_M{}_seed{seed}.csv", cell.width)), render_steps(&step_rows(&traj, diverged)))],
        summary: vec![row],
        ..Default::default()
    })
}

fn linearization_gap(cfg: &ExperimentConfig, data: &Dataset, seed: u64, cell: &Cell) -> CliResult<CellOutput> {
    let network = network_for(cfg, data, cell)?;
    let tc = cfg.base_train_configs(cell.depth)?.swap_remove(cell.metric);
    let params = Params::init(&network, seed);
    let name = tc.spec(&network)?.name();
    let (full, full_div) = run_model(&network, &params, &tc, data, false)?;
    let (lin, lin_div) = run_model(&network, &params, &tc, data, true)?;
    let mut row = SummaryRow::new(name, cell.width as f64, seed);
    row.final_loss = final_loss(&full, full_div);
    row.discrepancy = if full_div.is_some() || lin_div.is_some() { f64::INFINITY } else { discrepancy(&full, &lin)? };
    Ok(CellOutput {
        steps: vec![
            (format!("{name}_full_M{}_seed{seed}.csv", cell.width), render_steps(&step_rows(&full, full_div))),
            (format!("{name}_linearized_M{}_seed{seed}.csv", cell.width), render_steps(&step_rows(&lin, lin_div))),
        ],
        summary: vec![row],
        ..Default::default()
    })
}

fn cells(cfg: &ExperimentConfig) -> CliResult<Vec<Cell>> {
    let metrics = match cfg.experiment {
        ExperimentId::TridiagDamping | ExperimentId::UnitwiseAlpha => 1,
        _ => cfg.train.metrics.len(),
    };
    let widths = match cfg.experiment {
        ExperimentId::Prediction => vec![1],
        _ => cfg.widths(),
    };
    let mut out = Vec::new();
    for seed_index in 0..cfg.seeds.len() {
        for &depth in &cfg.depths() {
            for activation in cfg.activations()? {
                for &width in &widths {
                    for metric in 0..metrics {
                        out.push(Cell { seed_index, width, depth, activation, metric });
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check_experiment(cfg: &ExperimentConfig) -> CliResult<()> {
    match cfg.experiment {
        ExperimentId::TridiagDamping if !matches!(cfg.train.lr, LrSetting::Fixed(_)) => {
            Err(CliError::Config("tridiag_damping needs a numeric train.lr".into()))
        }
        ExperimentId::Prediction if cfg.data.n_test == 0 => Err(CliError::Config("prediction needs data.n_test > 0".into())),
        _ if cfg.data.forster && cfg.data.n_test > 0 => {
            Err(CliError::Config("the Forster transform is applied to training inputs only; set data.n_test = 0".into()))
        }
        _ => Ok(()),
    }
}

/// Runs the configured experiment on `workers` threads and writes its
/// artifacts under `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> CliResult<RunReport> {
    cfg.validate()?;
    check_experiment(cfg)?;
    let datasets = cfg.seeds.iter().map(|&s| load_data(cfg, s)).collect::<CliResult<Vec<_>>>()?;
    let cells = cells(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let results: Vec<CliResult<CellOutput>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let seed = cfg.seeds[cell.seed_index];
                let data = &datasets[cell.seed_index];
                match cfg.experiment {
                    ExperimentId::Convergence => convergence(cfg, data, seed, cell),
                    ExperimentId::TridiagDamping => tridiag_damping(cfg, data, seed, cell),
                    ExperimentId::Prediction => prediction(cfg, data, seed, cell),
                    ExperimentId::IsotropyVsWidth => isotropy_vs_width(cfg, data, seed, cell),
                    ExperimentId::UnitwiseAlpha => unitwise_alpha(cfg, data, seed, cell),
                    ExperimentId::LinearizationGap => linearization_gap(cfg, data, seed, cell),
                }
            })
            .collect()
    });
    let outputs = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    write_outputs(cfg, outputs)
}

fn write_outputs(cfg: &ExperimentConfig, outputs: Vec<CellOutput>) -> CliResult<RunReport> {
    let out = &cfg.out;
    let mut report = RunReport {
        step_files: Vec::new(),
        summary: out.join("summary.csv"),
        extra_files: Vec::new(),
        plots: Vec::new(),
        rows: Vec::new(),
    };
    let mut accuracy = Vec::new();
    for o in outputs {
        for (name, text) in o.steps {
            let path = out.join(name);
            write_file(&path, &text)?;
            report.step_files.push(path);
        }
        for (name, text) in o.extra {
            let path = out.join(name);
            write_file(&path, &text)?;
            report.extra_files.push(path);
        }
        report.rows.extend(o.summary);
        accuracy.extend(o.accuracy);
    }
    write_file(&report.summary, &render_summary(&report.rows))?;
    if !accuracy.is_empty() {
        let path = out.join("accuracy.csv");
        write_file(&path, &format!("metric,seed,test_accuracy\n{}\n", accuracy.join("\n")))?;
        report.extra_files.push(path);
    }
    if cfg.plots {
        let mut csvs = report.step_files.clone();
        csvs.push(report.summary.clone());
        report.plots = emit_plots(&csvs, &out.join("plots"))?;
    }
    Ok(report)
}

/// Reads the configuration, applies command-line overrides and runs it.
pub fn run_from_path(config: &Path, seeds: Option<Vec<u64>>, out: Option<PathBuf>, workers: usize) -> CliResult<RunReport> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    run_experiment(&cfg, workers)
}
