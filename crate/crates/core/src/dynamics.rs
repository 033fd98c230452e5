//! Function-space training trajectories in closed form, kernel-regression
//! predictions and the limit point in parameter space.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::fim::{natural_gradient, MetricKind, MetricSpec};
use crate::kernels::ThetaBar;
use crate::network::{flatten_outputs, JacobianBlocks, Params};
use crate::numerics::{spd_solve, SymmetricEigen};

/// Per-step training record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub train_residual_norm: f64,
    /// `‖θ_t − θ_0‖`; NaN for trajectories computed purely in function space.
    pub param_displacement: f64,
}

/// Outputs along a training run, one entry per step `t = 0..=T`.
///
/// Outputs are stored output-major (`k·N + n`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub eta: f64,
    pub n_samples: usize,
    pub targets: Array1<f64>,
    pub train_outputs: Vec<Array1<f64>>,
    /// Empty when no test samples were tracked.
    pub test_outputs: Vec<Array1<f64>>,
    pub records: Vec<StepRecord>,
}

/// `‖y − f‖² / (2N)`.
pub fn mse_loss(y: ArrayView1<'_, f64>, f: ArrayView1<'_, f64>, n: usize) -> f64 {
    let r = &y - &f;
    r.dot(&r) / (2.0 * n as f64)
}

impl Trajectory {
    pub fn new(eta: f64, n_samples: usize, targets: Array1<f64>) -> Self {
        Trajectory { eta, n_samples, targets, ..Default::default() }
    }

    /// Number of update steps `T`.
    pub fn steps(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    /// Appends step `t` with the MSE loss of `f_train`.
    pub fn push(&mut self, f_train: Array1<f64>, f_test: Option<Array1<f64>>, displacement: f64) {
        let loss = mse_loss(self.targets.view(), f_train.view(), self.n_samples);
        self.push_with_loss(f_train, f_test, displacement, loss);
    }

    pub fn push_with_loss(&mut self, f_train: Array1<f64>, f_test: Option<Array1<f64>>, displacement: f64, loss: f64) {
        let r = &self.targets - &f_train;
        self.records.push(StepRecord {
            step: self.records.len(),
            loss,
            train_residual_norm: r.dot(&r).sqrt(),
            param_displacement: displacement,
        });
        self.train_outputs.push(f_train);
        if let Some(ft) = f_test {
            self.test_outputs.push(ft);
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn initial_loss(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.loss)
    }
}

/// `f_t` on train and test points for `Θ̄`, learning rate `eta` and `steps`
/// updates. `y`, `f0_train` are `N × C`, `f0_test` is `N' × C`.
///
/// The train block is diagonalized once; each eigenvalue `λ` contributes the
/// residual factor `(1−ηλ)^t` and the test weight `(1 − (1−ηλ)^t)/λ`.
pub fn ntk_trajectory(
    tb: &ThetaBar,
    eta: f64,
    steps: usize,
    y: ArrayView2<'_, f64>,
    f0_train: ArrayView2<'_, f64>,
    f0_test: ArrayView2<'_, f64>,
) -> Result<Trajectory> {
    let n = tb.train_block.nrows();
    if y.nrows() != n || f0_train.dim() != y.dim() || f0_test.ncols() != y.ncols() {
        return Err(Error::ShapeMismatch("targets and initial outputs must be N × C".into()));
    }
    let track_test = f0_test.nrows() > 0;
    let cross = match (&tb.cross_block, track_test) {
        (Some(c), true) if c.nrows() == f0_test.nrows() => Some(c),
        (_, true) => return Err(Error::ShapeMismatch("Θ̄ has no cross block for these test points".into())),
        _ => None,
    };
    let asym = (&tb.train_block - &tb.train_block.t()).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let scale = tb.train_block.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if asym > 1e-8 * scale.max(1.0) {
        return Err(Error::Unsupported("closed form needs a symmetric train block".into()));
    }
    let eig = SymmetricEigen::new(&((&tb.train_block + &tb.train_block.t()) * 0.5))?;
    if eig.lambda_min() <= eig.tolerance() {
        return Err(Error::SingularMatrix { min_eigenvalue: eig.lambda_min(), tolerance: eig.tolerance() });
    }
    let v = &eig.vectors;
    let r0 = &y - &f0_train;
    let coeffs = v.t().dot(&r0);
    let mut traj = Trajectory::new(eta, n, flatten_outputs(y));
    traj.push(flatten_outputs(f0_train), track_test.then(|| flatten_outputs(f0_test)), f64::NAN);
    for t in 1..=steps {
        let decay = eig.values.mapv(|l| (1.0 - eta * l).powi(t as i32));
        let residual = v.dot(&(&coeffs * &decay.view().insert_axis(Axis(1))));
        let f_train = &y - &residual;
        let f_test = cross.map(|c| {
            let w = Array1::from_iter(eig.values.iter().zip(&decay).map(|(l, d)| (1.0 - d) / l));
            let g = v.dot(&(&coeffs * &w.view().insert_axis(Axis(1))));
            flatten_outputs((&f0_test + &c.dot(&g)).view())
        });
        traj.push(flatten_outputs(f_train.view()), f_test, f64::NAN);
    }
    Ok(traj)
}

/// `f_t = y + (1−αη)^t (f_0 − y)` on the training set.
pub fn isotropic_trajectory(alpha: f64, eta: f64, steps: usize, y: ArrayView2<'_, f64>, f0: ArrayView2<'_, f64>) -> Trajectory {
    let (yv, f0v) = (flatten_outputs(y), flatten_outputs(f0));
    let mut traj = Trajectory::new(eta, y.nrows(), yv.clone());
    for t in 0..=steps {
        let decay = (1.0 - alpha * eta).powi(t as i32);
        traj.push(&yv + &((&f0v - &yv) * decay), None, f64::NAN);
    }
    traj
}

/// Kernel-regression prediction `Θ̄(x', x) Θ̄(x, x)⁻¹ y` on the test points
/// (`α⁻¹ Θ̄(x', x) y` when the train block is `αI`).
pub fn kernel_prediction(tb: &ThetaBar, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let cross = tb
        .cross_block
        .as_ref()
        .ok_or_else(|| Error::Unsupported(format!("{} kernel has no test block", tb.name)))?;
    if tb.is_isotropic() {
        return Ok(cross.dot(&y) / tb.alpha);
    }
    let train = (&tb.train_block + &tb.train_block.t()) * 0.5;
    Ok(cross.dot(&spd_solve(&train, y)?))
}

/// Limit displacement `θ_∞ − θ_0 = α⁻¹ G₀⁻¹ J₀ᵀ (y − f_0) / N` (CN vectors).
pub fn min_norm_params(
    spec: &MetricSpec,
    blocks: &JacobianBlocks,
    y: ArrayView1<'_, f64>,
    f0: ArrayView1<'_, f64>,
    alpha: f64,
) -> Result<Params> {
    let r = &y - &f0;
    let mut d = natural_gradient(spec, blocks, r.view())?;
    d.scale(1.0 / alpha);
    Ok(d)
}

/// Dense `G₀` for metrics whose matrix is cheap to write down: Euclidean,
/// exact, block-diagonal, unit-wise and entry-wise diagonal.
pub fn dense_metric(spec: &MetricSpec, blocks: &JacobianBlocks) -> Result<Array2<f64>> {
    let p = blocks.n_params();
    let n = blocks.n_samples() as f64;
    let mut g = match &spec.kind {
        MetricKind::Euclidean => Array2::eye(p),
        MetricKind::Exact => {
            let j = blocks.dense();
            j.t().dot(&j) / n
        }
        MetricKind::LayerWise(sigma) if sigma.is_identity() => {
            let mut g = Array2::zeros((p, p));
            let mut off = 0;
            for l in 1..=blocks.depth() {
                let jl = blocks.layer_dense(l);
                let size = jl.ncols();
                g.slice_mut(s![off..off + size, off..off + size]).assign(&(jl.t().dot(&jl) / n));
                off += size;
            }
            g
        }
        MetricKind::UnitWise => {
            let j = blocks.dense();
            let mut g = Array2::zeros((p, p));
            for l in 1..=blocks.depth() {
                for i in 0..blocks.width(l) {
                    let idx = blocks.unit_indices(l, i);
                    for &a in &idx {
                        for &b in &idx {
                            g[[a, b]] = j.column(a).dot(&j.column(b)) / n;
                        }
                    }
                }
            }
            g
        }
        MetricKind::EntryDiag => {
            let j = blocks.dense();
            Array2::from_diag(&j.map_axis(Axis(0), |c| c.dot(&c) / n))
        }
        other => return Err(Error::Unsupported(format!("no dense metric for {other:?}"))),
    };
    if !matches!(spec.kind, MetricKind::Euclidean) {
        for i in 0..p {
            g[[i, i]] += spec.rho;
        }
    }
    Ok(g)
}

/// Ridge solution `argmin ‖r − Jθ‖²/(2N) + (λ/2) θᵀGθ`, evaluated through
/// the push-through form `G⁻¹Jᵀ(JG⁻¹Jᵀ + NλI)⁻¹ r` with dense matrices.
/// `G` must be positive definite.
pub fn ridge_params(g: &Array2<f64>, j: &Array2<f64>, r: ArrayView1<'_, f64>, lambda: f64) -> Result<Array1<f64>> {
    let n = r.len() as f64;
    let g_inv_jt = spd_solve(g, j.t())?;
    let mut k = j.dot(&g_inv_jt);
    k = (&k + &k.t()) * 0.5;
    for i in 0..k.nrows() {
        k[[i, i]] += n * lambda;
    }
    let coef = spd_solve(&k, r.insert_axis(Axis(1)))?;
    Ok(g_inv_jt.dot(&coef).column(0).to_owned())
}
