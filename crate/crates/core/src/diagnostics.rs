//! Empirical checks of the structural properties: isotropy of `Θ̄`, the
//! value of `α`, agreement between empirical and analytic kernels, and the
//! instability of the tri-diagonal metric at small damping.

use ndarray::{s, Array2, ArrayView2};

use crate::data::Dataset;
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::fim::{MetricKind, MetricSolver, MetricSpec, SigmaKind, build_sigma};
use crate::kernels::AnalyticKernelStack;
use crate::network::{linearize, EmpiricalKernels, JacobianBlocks, NetworkConfig, Params};
use crate::numerics::{relative_frobenius, SymmetricEigen};
use crate::trainer::{linearized_train, train, Damping, LearningRate, TrainConfig};

/// Spectrum summary of an empirical `Θ̄` on the training set.
#[derive(Debug, Clone)]
pub struct IsotropyReport {
    pub metric: String,
    pub width: usize,
    pub condition_number: f64,
    pub mean_diagonal: f64,
    /// `max |off-diagonal| / mean diagonal`
    pub off_diagonal_ratio: f64,
    pub thetabar: Array2<f64>,
}

impl IsotropyReport {
    pub fn from_matrix(metric: &str, width: usize, thetabar: Array2<f64>) -> Result<Self> {
        let sym = (&thetabar + &thetabar.t()) * 0.5;
        let eig = SymmetricEigen::new(&sym)?;
        let n = thetabar.nrows();
        let mean_diagonal = (0..n).map(|i| thetabar[[i, i]]).sum::<f64>() / n as f64;
        let mut off = 0.0_f64;
        for ((i, j), v) in thetabar.indexed_iter() {
            if i != j {
                off = off.max(v.abs());
            }
        }
        let condition_number = if eig.lambda_min() > 0.0 { eig.lambda_max() / eig.lambda_min() } else { f64::INFINITY };
        Ok(IsotropyReport {
            metric: metric.to_string(),
            width,
            condition_number,
            mean_diagonal,
            off_diagonal_ratio: off / mean_diagonal.abs(),
            thetabar,
        })
    }
}

/// `J G⁻¹ Jᵀ / N` assembled from metric solves against unit residuals.
pub fn empirical_thetabar(spec: &MetricSpec, blocks: &JacobianBlocks) -> Result<Array2<f64>> {
    let solver = MetricSolver::new(spec, blocks)?;
    solver.response(Array2::eye(blocks.rows()).view())
}

/// Isotropy of the metric at `params` on the inputs `x`.
pub fn isotropy_report(spec: &MetricSpec, network: &NetworkConfig, params: &Params, x: ArrayView2<'_, f64>) -> Result<IsotropyReport> {
    let (_, _, _, jb) = linearize(network, params, x)?;
    let tb = empirical_thetabar(spec, &jb)?;
    let width = (1..network.depth()).map(|l| network.width(l)).max().unwrap_or(0);
    IsotropyReport::from_matrix(spec.name(), width, tb)
}

/// Empirical `α`: mean diagonal of `Θ̄`.
pub fn alpha_empirical(report: &IsotropyReport) -> f64 {
    report.mean_diagonal
}

/// Relative Frobenius errors between finite-width and analytic kernels on
/// the training samples.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelAgreement {
    /// `A_0 .. A_{L-1}`
    pub a: Vec<f64>,
    /// `B_1 .. B_L` (first output)
    pub b: Vec<f64>,
    /// `Θ_1 .. Θ_L`
    pub theta_layers: Vec<f64>,
    pub theta: f64,
}

impl KernelAgreement {
    pub fn max_error(&self) -> f64 {
        self.a.iter().chain(&self.b).chain(&self.theta_layers).fold(self.theta, |m, &v| m.max(v))
    }

    /// `(name, error)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        out.extend(self.a.iter().enumerate().map(|(l, &e)| (format!("A_{l}"), e)));
        out.extend(self.b.iter().enumerate().map(|(l, &e)| (format!("B_{}", l + 1), e)));
        out.extend(self.theta_layers.iter().enumerate().map(|(l, &e)| (format!("Theta_{}", l + 1), e)));
        out.push(("Theta".to_string(), self.theta));
        out
    }
}

/// Compares `N·Θ_l` of the finite network with the analytic `Θ_l`.
pub fn kernel_agreement(analytic: &AnalyticKernelStack, empirical: &EmpiricalKernels) -> Result<KernelAgreement> {
    let n = analytic.n_train;
    let emp_n = empirical.a[0].nrows();
    if emp_n != n || empirical.theta.nrows() != n {
        return Err(Error::ShapeMismatch("kernel agreement needs single-output empirical kernels on the training rows".into()));
    }
    let train = |m: &Array2<f64>| m.slice(s![..n, ..]).to_owned();
    let err = |e: &Array2<f64>, a: &Array2<f64>| relative_frobenius(e.view(), train(a).view());
    let nf = n as f64;
    Ok(KernelAgreement {
        a: empirical.a.iter().zip(&analytic.a).map(|(e, a)| err(e, a)).collect(),
        b: empirical.b.iter().zip(&analytic.b).map(|(e, a)| err(&e[0], a)).collect(),
        theta_layers: empirical.theta_layers.iter().zip(&analytic.theta_layers).map(|(e, a)| err(&(e * nf), a)).collect(),
        theta: err(&(&empirical.theta * nf), &analytic.theta),
    })
}

/// Which model the divergence probe trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeModel {
    Full,
    Linearized,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeStatus {
    Converged,
    /// Loss passed the divergence sentinel (or the solve broke down) at `step`.
    Diverged { step: Option<usize> },
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub rho: f64,
    pub status: ProbeStatus,
    pub trajectory: Trajectory,
}

impl ProbeResult {
    pub fn converged(&self) -> bool {
        self.status == ProbeStatus::Converged
    }
}

/// Trains with the tri-diagonal metric at each damping value for `steps`
/// steps at learning rate `eta`.
pub fn divergence_probe(
    network: &NetworkConfig,
    params: &Params,
    data: &Dataset,
    rho_list: &[f64],
    steps: usize,
    eta: f64,
    model: ProbeModel,
) -> Result<Vec<ProbeResult>> {
    if rho_list.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::InvalidConfig("probe damping values must be positive".into()));
    }
    let sigma = build_sigma(SigmaKind::TriDiagonal, network.depth())?;
    let mut out = Vec::with_capacity(rho_list.len());
    for &rho in rho_list {
        let tc = TrainConfig::new(MetricKind::LayerWise(sigma.clone()), steps)
            .with_lr(LearningRate::Fixed(eta))
            .with_damping(Damping::Fixed(rho));
        let run = match model {
            ProbeModel::Full => train(network, params, &tc, data).map(|r| r.0),
            ProbeModel::Linearized => linearized_train(network, params, &tc, data),
        };
        let (status, trajectory) = match run {
            Ok(t) => (ProbeStatus::Converged, t),
            Err(Error::Diverged { step, trajectory }) => (ProbeStatus::Diverged { step: Some(step) }, *trajectory),
            Err(e) if e.is_numerical() => (ProbeStatus::Diverged { step: None }, Trajectory::default()),
            Err(e) => return Err(e),
        };
        out.push(ProbeResult { rho, status, trajectory });
    }
    Ok(out)
}
