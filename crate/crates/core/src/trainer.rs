//! Full-batch training of finite networks with gradient descent or any of the
//! natural-gradient metrics, and of their linearization at initialization.

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::data::Dataset;
use crate::dynamics::{mse_loss, Trajectory};
use crate::error::{Error, Result};
use crate::fim::{cross_entropy_natural_gradient, softmax, MetricKind, MetricSolver, MetricSpec};
use crate::kernels::alpha_of;
use crate::network::{flatten_outputs, forward, linearize, JacobianBlocks, NetworkConfig, Params};
use crate::numerics::SymmetricEigen;

/// Loss is declared diverged once it exceeds this multiple of the initial loss.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub enum LearningRate {
    Fixed(f64),
    /// `η = c/α` with `c ∈ (0, 2)`; for gradient descent `α = λ_max(Θ)`.
    Scaled(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Damping {
    Fixed(f64),
    /// One run per value; see [`TrainConfig::expand`].
    Sweep(Vec<f64>),
    /// `ρ = M^{−ε}` with `M` the widest hidden layer.
    WidthPower(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: LearningRate,
    pub damping: Damping,
    pub loss: Loss,
    pub metric: MetricKind,
    /// Damping added to the softmax Hessian in the cross-entropy metric.
    pub rho_tilde: f64,
    /// Record outputs on the dataset's test rows.
    pub track_test: bool,
}

/// Default `ε` of the width-dependent damping, inside `(0, 1/12)`.
pub const DEFAULT_EPSILON: f64 = 1.0 / 24.0;

impl TrainConfig {
    pub fn new(metric: MetricKind, steps: usize) -> Self {
        TrainConfig {
            steps,
            lr: LearningRate::Scaled(1.0),
            damping: Damping::Fixed(0.0),
            loss: Loss::Mse,
            metric,
            rho_tilde: 1e-3,
            track_test: true,
        }
    }

    pub fn with_lr(mut self, lr: LearningRate) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_damping(mut self, damping: Damping) -> Self {
        self.damping = damping;
        self
    }

    pub fn with_loss(mut self, loss: Loss) -> Self {
        self.loss = loss;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.lr {
            LearningRate::Scaled(c) if !(c > 0.0 && c < 2.0) => {
                return Err(Error::InvalidConfig(format!("learning-rate factor c = {c} must lie in (0, 2)")));
            }
            LearningRate::Fixed(eta) if !(eta > 0.0 && eta.is_finite()) => {
                return Err(Error::InvalidConfig(format!("learning rate {eta} must be positive")));
            }
            _ => {}
        }
        match &self.damping {
            Damping::Fixed(r) if *r < 0.0 => Err(Error::InvalidConfig("damping must be non-negative".into())),
            Damping::Sweep(v) if v.is_empty() || v.iter().any(|r| *r < 0.0) => {
                Err(Error::InvalidConfig("damping sweep must be a non-empty list of non-negative values".into()))
            }
            Damping::WidthPower(e) if !(*e > 0.0) => Err(Error::InvalidConfig("damping exponent must be positive".into())),
            _ => Ok(()),
        }
    }

    /// One configuration per damping value of a sweep; others are returned as is.
    pub fn expand(&self) -> Vec<TrainConfig> {
        match &self.damping {
            Damping::Sweep(values) => values.iter().map(|&r| self.clone().with_damping(Damping::Fixed(r))).collect(),
            _ => vec![self.clone()],
        }
    }

    pub fn rho(&self, network: &NetworkConfig) -> Result<f64> {
        match &self.damping {
            Damping::Fixed(r) => Ok(*r),
            Damping::WidthPower(e) => {
                let widest = (1..network.depth()).map(|l| network.width(l)).max().unwrap_or(1);
                Ok((widest as f64).powf(-e))
            }
            Damping::Sweep(_) => Err(Error::InvalidConfig("expand a damping sweep before training".into())),
        }
    }

    pub fn spec(&self, network: &NetworkConfig) -> Result<MetricSpec> {
        Ok(MetricSpec::new(self.metric.clone(), self.rho(network)?).with_rho_tilde(self.rho_tilde))
    }
}

/// `η = c/α`.
pub fn optimal_lr(alpha: f64, c: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig(format!("alpha = {alpha} must be positive")));
    }
    if !(c > 0.0 && c < 2.0) {
        return Err(Error::InvalidConfig(format!("c = {c} must lie in (0, 2)")));
    }
    Ok(c / alpha)
}

/// Learning rate for a run, using the empirical NTK at initialization for
/// gradient descent and the metric's closed-form `α` otherwise.
pub fn resolve_lr(tc: &TrainConfig, network: &NetworkConfig, blocks: &JacobianBlocks) -> Result<f64> {
    match tc.lr {
        LearningRate::Fixed(eta) => Ok(eta),
        LearningRate::Scaled(c) => {
            let alpha = match tc.metric {
                MetricKind::Euclidean => {
                    let theta = blocks.gram() / blocks.n_samples() as f64;
                    SymmetricEigen::new(&theta)?.lambda_max()
                }
                ref kind => alpha_of(kind, network, blocks.n_samples())?,
            };
            optimal_lr(alpha, c)
        }
    }
}

/// `−Σ y log softmax(f) / N` on `CN` vectors.
pub fn cross_entropy_loss(y: ArrayView1<'_, f64>, logits: ArrayView2<'_, f64>) -> f64 {
    let p = softmax(logits);
    -y.iter().zip(&p).map(|(&t, &q)| if t != 0.0 { t * q.max(1e-300).ln() } else { 0.0 }).sum::<f64>() / logits.nrows() as f64
}

fn loss_of(tc: &TrainConfig, y: ArrayView1<'_, f64>, logits: ArrayView2<'_, f64>, n: usize) -> f64 {
    match tc.loss {
        Loss::Mse => mse_loss(y, flatten_outputs(logits).view(), n),
        Loss::CrossEntropy => cross_entropy_loss(y, logits),
    }
}

fn check_divergence(traj: &Trajectory, step: usize) -> Result<()> {
    let loss = traj.records[step].loss;
    if !loss.is_finite() || loss > DIVERGENCE_FACTOR * traj.initial_loss() {
        return Err(Error::Diverged { step, trajectory: Box::new(traj.clone()) });
    }
    Ok(())
}

fn diverged_on_overflow<T>(r: Result<T>, traj: &Trajectory, step: usize) -> Result<T> {
    match r {
        Err(Error::NonFiniteActivation { .. }) if step > 0 => {
            Err(Error::Diverged { step, trajectory: Box::new(traj.clone()) })
        }
        other => other,
    }
}

/// `θ_{t+1} = θ_t − η G_t⁻¹ ∇L(θ_t)` for `tc.steps` steps, recording train
/// (and optionally test) outputs, loss and `‖θ_t − θ_0‖` at every step.
pub fn train(network: &NetworkConfig, params0: &Params, tc: &TrainConfig, data: &Dataset) -> Result<(Trajectory, Params)> {
    tc.validate()?;
    params0.check_shape(network)?;
    let spec = tc.spec(network)?;
    let n = data.n_train();
    let y = flatten_outputs(data.y.view());
    let track_test = tc.track_test && data.n_test() > 0;
    let mut params = params0.clone();
    let mut traj = Trajectory::new(f64::NAN, n, y.clone());
    let mut eta = f64::NAN;
    for t in 0..=tc.steps {
        let (f, _, _, jb) = diverged_on_overflow(linearize(network, &params, data.x.view()), &traj, t)?;
        let f_test = if track_test {
            let (ft, _) = diverged_on_overflow(forward(network, &params, data.x_test.view()), &traj, t)?;
            Some(flatten_outputs(ft.view()))
        } else {
            None
        };
        if t == 0 {
            eta = resolve_lr(tc, network, &jb)?;
            traj.eta = eta;
        }
        let displacement = params.difference(params0).norm();
        let loss = loss_of(tc, y.view(), f.view(), n);
        traj.push_with_loss(flatten_outputs(f.view()), f_test, displacement, loss);
        check_divergence(&traj, t)?;
        if t == tc.steps {
            break;
        }
        match tc.loss {
            Loss::Mse => {
                let r = &y - &flatten_outputs(f.view());
                let d = MetricSolver::new(&spec, &jb)?.direction(r.view())?;
                params.axpy(eta, &d);
            }
            Loss::CrossEntropy => {
                let d = cross_entropy_natural_gradient(&spec, &jb, softmax(f.view()).view(), y.view())?;
                params.axpy(-eta, &d);
            }
        }
    }
    Ok((traj, params))
}

/// Training of `f₀ + J₀(θ − θ₀)` with the metric frozen at initialization.
pub fn linearized_train(network: &NetworkConfig, params0: &Params, tc: &TrainConfig, data: &Dataset) -> Result<Trajectory> {
    tc.validate()?;
    params0.check_shape(network)?;
    let spec = tc.spec(network)?;
    let n = data.n_train();
    let y = flatten_outputs(data.y.view());
    let (f0, _, _, jb) = linearize(network, params0, data.x.view())?;
    let f0 = flatten_outputs(f0.view());
    let test = if tc.track_test && data.n_test() > 0 {
        let (ft, _, _, jbt) = linearize(network, params0, data.x_test.view())?;
        Some((flatten_outputs(ft.view()), jbt))
    } else {
        None
    };
    let solver = match tc.loss {
        Loss::Mse => Some(MetricSolver::new(&spec, &jb)?),
        Loss::CrossEntropy => None,
    };
    let eta = resolve_lr(tc, network, &jb)?;
    let c = data.outputs();
    let mut disp = Params::zeros(network);
    let mut traj = Trajectory::new(eta, n, y.clone());
    for t in 0..=tc.steps {
        let f: Array1<f64> = &f0 + &jb.apply(&disp);
        let f_test = test.as_ref().map(|(ft, jbt)| ft + &jbt.apply(&disp));
        let logits = crate::network::unflatten_outputs(f.view(), n);
        let loss = loss_of(tc, y.view(), logits.view(), n);
        traj.push_with_loss(f.clone(), f_test, disp.norm(), loss);
        check_divergence(&traj, t)?;
        if t == tc.steps {
            break;
        }
        match &solver {
            Some(s) => {
                let r = &y - &f;
                disp.axpy(eta, &s.direction(r.view())?);
            }
            None => {
                debug_assert_eq!(logits.ncols(), c);
                let d = cross_entropy_natural_gradient(&spec, &jb, softmax(logits.view()).view(), y.view())?;
                disp.axpy(-eta, &d);
            }
        }
    }
    Ok(traj)
}

/// `sup_t ‖f_t^{lin} − f_t‖₂` over the train outputs of two runs.
pub fn discrepancy(full: &Trajectory, lin: &Trajectory) -> Result<f64> {
    if full.train_outputs.len() != lin.train_outputs.len() {
        return Err(Error::ShapeMismatch("trajectories have different lengths".into()));
    }
    Ok(full
        .train_outputs
        .iter()
        .zip(&lin.train_outputs)
        .map(|(a, b)| {
            let d = a - b;
            d.dot(&d).sqrt()
        })
        .fold(0.0, f64::max))
}
