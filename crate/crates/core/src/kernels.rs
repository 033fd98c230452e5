//! Infinite-width kernels of fully-connected networks and the
//! preconditioned kernels `Θ̄` they induce under each metric.
//!
//! Kernels are evaluated on a union of samples: the training rows first,
//! then the test rows. Every stored matrix has one row per union sample and
//! one column per training sample, so train blocks are the leading square
//! part and cross blocks the trailing rows.

use std::f64::consts::PI;
use std::sync::OnceLock;

use libm::erf;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use ndarray_linalg::SVD;

use crate::error::{Error, Result};
use crate::fim::{MetricKind, SigmaKind, SigmaMatrix};
use crate::network::{Activation, NetworkConfig};
use crate::numerics::{spd_solve, SymmetricEigen};

/// Gauss–Hermite order used for 2-D Gaussian integrals.
pub const HERMITE_ORDER: usize = 64;
/// Gauss–Legendre order per smooth piece.
pub const LEGENDRE_ORDER: usize = 64;
/// Largest disagreement tolerated between order `n` and `2n` rules.
pub const QUADRATURE_TOL: f64 = 1e-8;
/// Half-width, in standard deviations, of the truncated integration range.
const TAIL: f64 = 12.0;

/// Nodes and weights of a Gaussian quadrature rule.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Golub–Welsch: nodes are the eigenvalues of the Jacobi matrix, weights the
/// squared first eigenvector components times the total mass.
fn golub_welsch(offdiag: &[f64], mass: f64) -> QuadratureRule {
    let n = offdiag.len() + 1;
    let mut jac = Array2::zeros((n, n));
    for (i, &b) in offdiag.iter().enumerate() {
        jac[[i, i + 1]] = b;
        jac[[i + 1, i]] = b;
    }
    let eig = SymmetricEigen::new(&jac).expect("Jacobi matrix is symmetric and finite");
    let nodes = eig.values.to_vec();
    let weights = eig.vectors.row(0).iter().map(|v| mass * v * v).collect();
    QuadratureRule { nodes, weights }
}

/// Rule for `∫ f(z) φ(z) dz` with `φ` the standard normal density.
pub fn gauss_hermite(order: usize) -> QuadratureRule {
    let off: Vec<f64> = (1..order).map(|k| (k as f64).sqrt()).collect();
    golub_welsch(&off, 1.0)
}

/// Rule for `∫_{-1}^{1} f(x) dx`.
pub fn gauss_legendre(order: usize) -> QuadratureRule {
    let off: Vec<f64> = (1..order)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&off, 2.0)
}

fn cached_hermite(order: usize) -> &'static QuadratureRule {
    static LOW: OnceLock<QuadratureRule> = OnceLock::new();
    static HIGH: OnceLock<QuadratureRule> = OnceLock::new();
    match order {
        HERMITE_ORDER => LOW.get_or_init(|| gauss_hermite(HERMITE_ORDER)),
        o if o == 2 * HERMITE_ORDER => HIGH.get_or_init(|| gauss_hermite(2 * HERMITE_ORDER)),
        _ => panic!("no cached Gauss-Hermite rule of order {order}"),
    }
}

fn cached_legendre(order: usize) -> &'static QuadratureRule {
    static LOW: OnceLock<QuadratureRule> = OnceLock::new();
    static HIGH: OnceLock<QuadratureRule> = OnceLock::new();
    match order {
        LEGENDRE_ORDER => LOW.get_or_init(|| gauss_legendre(LEGENDRE_ORDER)),
        o if o == 2 * LEGENDRE_ORDER => HIGH.get_or_init(|| gauss_legendre(2 * LEGENDRE_ORDER)),
        _ => panic!("no cached Gauss-Legendre rule of order {order}"),
    }
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// `∫ f(z) φ(z) dz` over `[-TAIL, TAIL]`, split at `breaks` so every piece
/// is smooth, with Gauss–Legendre of the given order per piece.
fn piecewise_normal_integral(f: impl Fn(f64) -> f64, breaks: &[f64], order: usize) -> f64 {
    let rule = cached_legendre(order);
    let mut points: Vec<f64> = breaks.iter().copied().filter(|b| b.abs() < TAIL).collect();
    points.push(-TAIL);
    points.push(TAIL);
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mut total = 0.0;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        for (x, wt) in rule.nodes.iter().zip(&rule.weights) {
            let z = mid + half * x;
            total += half * wt * f(z) * std_normal_pdf(z);
        }
    }
    total
}

/// `(E[φ(u)φ(v)], E[φ'(u)φ'(v)])` for `(u, v)` centered Gaussian with
/// variances `q1, q2` and correlation `c`.
pub fn pair_moments(act: Activation, q1: f64, q2: f64, c: f64) -> (f64, f64) {
    pair_moments_with_order(act, q1, q2, c, 1)
}

fn pair_moments_with_order(act: Activation, q1: f64, q2: f64, c: f64, refine: usize) -> (f64, f64) {
    let c = c.clamp(-1.0, 1.0);
    match act {
        Activation::Identity => (c * (q1 * q2).sqrt(), 1.0),
        Activation::Relu => {
            let a = (q1 * q2).sqrt() / (2.0 * PI) * ((1.0 - c * c).max(0.0).sqrt() + 0.5 * PI * c + c * c.asin());
            let xi = (c.asin() + 0.5 * PI) / (2.0 * PI);
            (a, xi)
        }
        Activation::Tanh => {
            let rule = cached_hermite(HERMITE_ORDER * refine);
            let (s1, s2) = (q1.sqrt(), q2.sqrt());
            let perp = (1.0 - c * c).max(0.0).sqrt();
            let (mut a, mut xi) = (0.0, 0.0);
            for (z1, w1) in rule.nodes.iter().zip(&rule.weights) {
                let u = s1 * z1;
                let tu = u.tanh();
                let du = 1.0 - tu * tu;
                let (mut ia, mut ix) = (0.0, 0.0);
                for (z2, w2) in rule.nodes.iter().zip(&rule.weights) {
                    let tv = (s2 * (c * z1 + perp * z2)).tanh();
                    ia += w2 * tv;
                    ix += w2 * (1.0 - tv * tv);
                }
                a += w1 * tu * ia;
                xi += w1 * du * ix;
            }
            (a, xi)
        }
        Activation::ShiftedRelu(s) => {
            // v | u is Gaussian; its conditional moments under φ_s are closed form
            let (s1, s2) = (q1.sqrt(), q2.sqrt());
            let sd = s2 * (1.0 - c * c).max(0.0).sqrt();
            let cond = move |z: f64| -> (f64, f64) {
                let m = c * s2 * z;
                if sd < 1e-300 {
                    (m.max(-s), if m > -s { 1.0 } else { 0.0 })
                } else {
                    let t = (m + s) / sd;
                    let cdf = std_normal_cdf(t);
                    (-s + (m + s) * cdf + sd * std_normal_pdf(t), cdf)
                }
            };
            let kink = -s / s1;
            let mut breaks = vec![kink];
            if c != 0.0 {
                breaks.push(-s / (c * s2));
            }
            let order = LEGENDRE_ORDER * refine;
            let a = piecewise_normal_integral(|z| (s1 * z).max(-s) * cond(z).0, &breaks, order);
            let xi = piecewise_normal_integral(|z| if z > kink { cond(z).1 } else { 0.0 }, &breaks, order);
            (a, xi)
        }
    }
}

/// Fails with [`Error::QuadratureNotConverged`] when doubling the quadrature
/// order moves the moments by more than [`QUADRATURE_TOL`] at a few probe
/// correlations.
pub fn check_quadrature(act: Activation, q: f64) -> Result<()> {
    if matches!(act, Activation::Relu | Activation::Identity) {
        return Ok(());
    }
    for c in [-0.9, -0.3, 0.0, 0.4, 0.8, 0.99, 1.0] {
        let lo = pair_moments_with_order(act, q, q, c, 1);
        let hi = pair_moments_with_order(act, q, q, c, 2);
        let difference = (lo.0 - hi.0).abs().max((lo.1 - hi.1).abs());
        if difference > QUADRATURE_TOL || !difference.is_finite() {
            return Err(Error::QuadratureNotConverged { difference });
        }
    }
    Ok(())
}

/// Kernels of the infinite-width network on a set of samples.
#[derive(Debug, Clone)]
pub struct AnalyticKernelStack {
    pub n_train: usize,
    /// `q[l-1]` is the variance of `u_l(x)` for each union sample, `l = 1..=L`
    pub q: Vec<Array1<f64>>,
    /// `qbar[l-1]` is the correlation matrix `Q̄_l`, `l = 1..L`
    pub qbar: Vec<Array2<f64>>,
    /// `a[l]` is `A_l`, `l = 0..L` (`A_0 = X' Xᵀ/M_0`)
    pub a: Vec<Array2<f64>>,
    /// `xi[l-1]` is `Ξ_l`, `l = 1..L`
    pub xi: Vec<Array2<f64>>,
    /// `b[l-1]` is `B_l`, `l = 1..=L`
    pub b: Vec<Array2<f64>>,
    /// `theta_layers[l-1]` is `Θ_l`
    pub theta_layers: Vec<Array2<f64>>,
    pub theta: Array2<f64>,
    /// union inputs (train rows then test rows)
    pub inputs: Array2<f64>,
}

impl AnalyticKernelStack {
    pub fn depth(&self) -> usize {
        self.b.len()
    }

    pub fn n_test(&self) -> usize {
        self.inputs.nrows() - self.n_train
    }

    pub fn train<'a>(&self, m: &'a Array2<f64>) -> ArrayView2<'a, f64> {
        m.slice(s![..self.n_train, ..])
    }

    pub fn cross<'a>(&self, m: &'a Array2<f64>) -> ArrayView2<'a, f64> {
        m.slice(s![self.n_train.., ..])
    }
}

/// Runs the layer recursion on the union of `x` (train) and `xp` (test).
pub fn analytic_stack(config: &NetworkConfig, x: ArrayView2<'_, f64>, xp: ArrayView2<'_, f64>) -> Result<AnalyticKernelStack> {
    let m0 = config.input_dim();
    if x.ncols() != m0 || xp.ncols() != m0 {
        return Err(Error::ShapeMismatch("sample dimension does not match the network input".into()));
    }
    let act = config.activation;
    let (sw2, sb2) = (config.sigma_w2, config.sigma_b2);
    let n = x.nrows();
    let inputs = ndarray::concatenate(Axis(0), &[x, xp]).unwrap();
    let rows = inputs.nrows();
    let depth = config.depth();

    let mut a = vec![inputs.dot(&x.t()) / m0 as f64];
    let mut a_diag: Array1<f64> = inputs.rows().into_iter().map(|r| r.dot(&r) / m0 as f64).collect();
    let mut q = Vec::with_capacity(depth);
    let mut qbar = Vec::with_capacity(depth);
    let mut xi = Vec::with_capacity(depth);
    for l in 1..=depth {
        let ql = a_diag.mapv(|v| sw2 * v + sb2);
        if ql.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: l });
        }
        q.push(ql.clone());
        if l == depth {
            break;
        }
        check_quadrature(act, ql[0])?;
        let prev = &a[l - 1];
        let mut cor = Array2::zeros((rows, n));
        let mut al = Array2::zeros((rows, n));
        let mut xl = Array2::zeros((rows, n));
        for i in 0..rows {
            for j in 0..n {
                let c = if i == j {
                    1.0
                } else {
                    let c = ((sw2 * prev[[i, j]] + sb2) / (ql[i] * ql[j]).sqrt()).clamp(-1.0, 1.0);
                    // rounding keeps duplicated samples just below 1, where asin is steep
                    if 1.0 - c.abs() < 1e-13 { c.signum() } else { c }
                };
                let (av, xv) = pair_moments(act, ql[i], ql[j], c);
                cor[[i, j]] = c;
                al[[i, j]] = av;
                xl[[i, j]] = xv;
            }
        }
        a_diag = ql.mapv(|v| pair_moments(act, v, v, 1.0).0);
        qbar.push(cor);
        a.push(al);
        xi.push(xl);
    }

    let mut b = vec![Array2::ones((rows, n)); depth];
    for l in (1..depth).rev() {
        b[l - 1] = &xi[l - 1] * &b[l] * sw2;
    }
    let (theta_layers, theta) = theta_l_analytic_parts(&a, &b, sw2, sb2);
    Ok(AnalyticKernelStack { n_train: n, q, qbar, a, xi, b, theta_layers, theta, inputs })
}

fn theta_l_analytic_parts(a: &[Array2<f64>], b: &[Array2<f64>], sw2: f64, sb2: f64) -> (Vec<Array2<f64>>, Array2<f64>) {
    let layers: Vec<Array2<f64>> = b.iter().zip(a).map(|(bl, al)| (bl * al) * sw2 + bl * sb2).collect();
    let mut total = layers[0].clone();
    for t in &layers[1..] {
        total += t;
    }
    (layers, total)
}

/// `Θ_l = σ_w² B_l ⊙ A_{l-1} + σ_b² B_l` and their sum, recomputed from a stack.
pub fn theta_l_analytic(stack: &AnalyticKernelStack, config: &NetworkConfig) -> (Vec<Array2<f64>>, Array2<f64>) {
    theta_l_analytic_parts(&stack.a, &stack.b, config.sigma_w2, config.sigma_b2)
}

/// Variances `q_1..q_L` of the pre-activations for unit-norm inputs.
pub fn signal_amplitudes(config: &NetworkConfig) -> Vec<f64> {
    let mut a_diag = 1.0 / config.input_dim() as f64;
    let mut out = Vec::with_capacity(config.depth());
    for _ in 1..=config.depth() {
        let q = config.sigma_w2 * a_diag + config.sigma_b2;
        out.push(q);
        a_diag = pair_moments(config.activation, q, q, 1.0).0;
    }
    out
}

/// `γ = P(φ'(u) ≠ 0)` for `u ~ N(0, q)`, in closed form.
pub fn gamma_coefficient(act: Activation, q: f64) -> f64 {
    match act {
        Activation::Relu => 0.5,
        Activation::ShiftedRelu(s) => 0.5 + 0.5 * erf(s / (2.0 * q).sqrt()),
        Activation::Tanh | Activation::Identity => 1.0,
    }
}

/// `γ` by integrating the indicator `1{φ'(u) ≠ 0}` against the Gaussian
/// density, piecewise between the activation's kinks.
pub fn gamma_by_quadrature(act: Activation, q: f64) -> f64 {
    let sd = q.sqrt();
    let breaks: Vec<f64> = act.kinks().iter().map(|k| k / sd).collect();
    let mut edges = breaks.clone();
    edges.push(-TAIL);
    edges.push(TAIL);
    edges.sort_by(f64::total_cmp);
    let indicator = |z: f64| {
        // evaluate the indicator at the midpoint of the piece containing z
        let hi = edges.iter().copied().find(|&e| e >= z).unwrap_or(TAIL);
        let lo = edges.iter().rev().copied().find(|&e| e < z).unwrap_or(-TAIL);
        let mid = 0.5 * (lo + hi) * sd;
        if act.derivative(mid) != 0.0 {
            1.0
        } else {
            0.0
        }
    };
    piecewise_normal_integral(indicator, &breaks, LEGENDRE_ORDER)
}

/// Sorted eigenvalues `1 + 2cos(κπ/(L+1))` of the tri-diagonal Σ and whether
/// one of them is exactly zero (`κ/(L+1) = 2/3` for an integer `κ`).
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagSpectrum {
    pub eigenvalues: Vec<f64>,
    pub singular: bool,
}

pub fn tridiag_spectrum(depth: usize) -> TridiagSpectrum {
    let mut eigenvalues: Vec<f64> = (1..=depth)
        .map(|k| 1.0 + 2.0 * (k as f64 * PI / (depth + 1) as f64).cos())
        .collect();
    let singular = (depth + 1) % 3 == 0;
    if singular {
        let k = 2 * (depth + 1) / 3;
        eigenvalues[k - 1] = 0.0;
    }
    eigenvalues.sort_by(f64::total_cmp);
    TridiagSpectrum { eigenvalues, singular }
}

/// Closed-form isotropy constant of a metric.
///
/// * exact: 1
/// * layer-wise: `1ᵀΣ⁻¹1` (for the tri-diagonal Σ, `s` when `L = 3s` and
///   `s + 1` when `L = 3s + 1`)
/// * K-FAC: `N·L`, or `N(L−1) + M_0` when `M_0 < N` (Forster-transformed inputs)
/// * unit-wise: `Σ_{l<L} γ_l M_l`
pub fn alpha_of(kind: &MetricKind, config: &NetworkConfig, n: usize) -> Result<f64> {
    let depth = config.depth();
    match kind {
        MetricKind::Exact => Ok(1.0),
        MetricKind::LayerWise(sigma) => layer_wise_alpha(sigma),
        MetricKind::KFac { .. } => {
            let (nf, m0) = (n as f64, config.input_dim() as f64);
            if config.input_dim() >= n {
                Ok(nf * depth as f64)
            } else {
                Ok(nf * (depth - 1) as f64 + m0)
            }
        }
        MetricKind::UnitWise => {
            let q = signal_amplitudes(config);
            Ok((1..depth).map(|l| gamma_coefficient(config.activation, q[l - 1]) * config.width(l) as f64).sum())
        }
        other => Err(Error::Unsupported(format!("{other:?} has no isotropy constant"))),
    }
}

fn layer_wise_alpha(sigma: &SigmaMatrix) -> Result<f64> {
    if sigma.kind() != SigmaKind::TriDiagonal {
        return if sigma.is_nonsingular() { sigma.alpha() } else { Err(Error::SingularSigma { depth: sigma.depth() }) };
    }
    let depth = sigma.depth();
    let s = depth / 3;
    let closed = match depth % 3 {
        0 => s as f64,
        1 => (s + 1) as f64,
        _ => return Err(Error::SingularSigma { depth }),
    };
    let numeric = sigma.alpha()?;
    if (numeric - closed).abs() > 1e-9 {
        return Err(Error::Linalg(format!("tri-diagonal alpha {numeric} disagrees with closed form {closed}")));
    }
    Ok(closed)
}

/// Preconditioned kernel `Θ̄` of a metric on train and test samples, per
/// output (the full kernel is `I_C ⊗ Θ̄`).
#[derive(Debug, Clone)]
pub struct ThetaBar {
    pub train_block: Array2<f64>,
    /// Test-by-train block; unavailable for the unit-wise metric.
    pub cross_block: Option<Array2<f64>>,
    /// Isotropy constant. For plain gradient descent (`Θ̄ = Θ`) this is
    /// `λ_max(Θ)`, the reciprocal of the largest stable-and-fastest rate.
    pub alpha: f64,
    pub name: &'static str,
}

impl ThetaBar {
    /// Whether the train block is exactly `α I`.
    pub fn is_isotropic(&self) -> bool {
        let n = self.train_block.nrows();
        self.train_block.indexed_iter().all(|((i, j), &v)| v == if i == j { self.alpha } else { 0.0 }) && n > 0
    }
}

/// `M' M⁻¹` for symmetric positive-definite `M` (train block of `m`).
fn right_divide(stack: &AnalyticKernelStack, m: &Array2<f64>) -> Result<Array2<f64>> {
    let train = stack.train(m).to_owned();
    let train = (&train + &train.t()) * 0.5;
    Ok(spd_solve(&train, m.t())?.t().to_owned())
}

/// Builds `Θ̄` on the stack's samples for the given metric.
pub fn thetabar(kind: &MetricKind, stack: &AnalyticKernelStack, config: &NetworkConfig) -> Result<ThetaBar> {
    let n = stack.n_train;
    let split = |m: Array2<f64>| -> (Array2<f64>, Array2<f64>) {
        (m.slice(s![..n, ..]).to_owned(), m.slice(s![n.., ..]).to_owned())
    };
    match kind {
        MetricKind::Euclidean => {
            let (train, cross) = split(stack.theta.clone());
            let alpha = SymmetricEigen::new(&((&train + &train.t()) * 0.5))?.lambda_max();
            Ok(ThetaBar { train_block: train, cross_block: Some(cross), alpha, name: "gd" })
        }
        MetricKind::Exact => {
            let (_, cross) = split(right_divide(stack, &stack.theta)?);
            Ok(ThetaBar { train_block: Array2::eye(n), cross_block: Some(cross), alpha: 1.0, name: "exact" })
        }
        MetricKind::LayerWise(sigma) => {
            if !sigma.is_nonsingular() {
                return Err(Error::SingularSigma { depth: sigma.depth() });
            }
            let weights = sigma.inverse_row_sums()?;
            let alpha = layer_wise_alpha(sigma)?;
            let mut total = Array2::zeros(stack.theta.dim());
            for (l, &w) in weights.iter().enumerate() {
                if w.abs() > 1e-12 {
                    total.scaled_add(w, &right_divide(stack, &stack.theta_layers[l])?);
                }
            }
            let (_, cross) = split(total);
            let name = match sigma.kind() {
                SigmaKind::Identity => "block_diagonal",
                SigmaKind::TriDiagonal => "tridiagonal",
                SigmaKind::Custom => "layerwise",
            };
            Ok(ThetaBar { train_block: Array2::eye(n) * alpha, cross_block: Some(cross), alpha, name })
        }
        MetricKind::KFac { .. } => {
            let depth = stack.depth();
            let x_train = stack.inputs.slice(s![..n, ..]).to_owned();
            let mut total = Array2::zeros(stack.theta.dim());
            for l in 1..=depth {
                let ra = if l == 1 {
                    stack.inputs.dot(&pseudo_inverse(&x_train)?)
                } else {
                    right_divide(stack, &stack.a[l - 1])?
                };
                let term = if l == depth { ra } else { right_divide(stack, &stack.b[l - 1])? * ra };
                total += &term;
            }
            total *= n as f64;
            let (train, cross) = split(total);
            let alpha = alpha_of(kind, config, n)?;
            Ok(ThetaBar { train_block: train, cross_block: Some(cross), alpha, name: "kfac" })
        }
        MetricKind::UnitWise => {
            let alpha = alpha_of(kind, config, n)?;
            Ok(ThetaBar { train_block: Array2::eye(n) * alpha, cross_block: None, alpha, name: "unitwise" })
        }
        other => Err(Error::Unsupported(format!("no analytic kernel for {other:?}"))),
    }
}

/// Moore–Penrose pseudo-inverse via SVD, cutting singular values below
/// `1e-10·σ_max`.
pub fn pseudo_inverse(m: &Array2<f64>) -> Result<Array2<f64>> {
    let (u, sv, vt) = m.svd(true, true)?;
    let (u, vt) = (u.unwrap(), vt.unwrap());
    let cut = 1e-10 * sv.iter().fold(0.0_f64, |a, &b| a.max(b));
    let k = sv.len();
    let mut out = Array2::zeros((m.ncols(), m.nrows()));
    for i in 0..k {
        if sv[i] > cut {
            let vi = vt.row(i);
            let ui = u.column(i);
            for (a, &va) in vi.iter().enumerate() {
                let mut row = out.row_mut(a);
                row.scaled_add(va / sv[i], &ui);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fim::build_sigma;
    use crate::network::{empirical_kernels, linearize, Params};
    use crate::numerics::relative_frobenius;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::<f64>::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
        for mut r in x.rows_mut() {
            let norm = r.dot(&r).sqrt();
            r /= norm;
        }
        x
    }

    #[test]
    fn hermite_rule_integrates_moments() {
        let rule = gauss_hermite(20);
        let m = |p: i32| rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!(m(3).abs() < 1e-12);
    }

    #[test]
    fn legendre_rule_integrates_polynomials() {
        let rule = gauss_legendre(10);
        let m = |p: i32| rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert!((m(0) - 2.0).abs() < 1e-13);
        assert!((m(2) - 2.0 / 3.0).abs() < 1e-13);
        assert!((m(18) - 2.0 / 19.0).abs() < 1e-13);
    }

    #[test]
    fn relu_same_sample_moments() {
        let (a, xi) = pair_moments(Activation::Relu, 0.7, 0.7, 1.0);
        assert!((xi - 0.5).abs() < 1e-15);
        assert!((a - 0.35).abs() < 1e-15);
    }

    #[test]
    fn shifted_relu_with_zero_shift_matches_relu() {
        for c in [-0.8, -0.1, 0.0, 0.3, 0.95] {
            let r = pair_moments(Activation::Relu, 1.3, 0.6, c);
            let z = pair_moments(Activation::ShiftedRelu(0.0), 1.3, 0.6, c);
            assert!((r.0 - z.0).abs() < 1e-10, "c={c}: {r:?} {z:?}");
            assert!((r.1 - z.1).abs() < 1e-10, "c={c}: {r:?} {z:?}");
        }
    }

    #[test]
    fn relu_closed_form_matches_two_dimensional_quadrature() {
        // brute-force 2-D Gauss-Hermite on the ReLU integrand, away from the kink
        // effect: a large rule converges algebraically, so compare loosely and
        // with the semi-analytic route tightly
        for c in [-0.6, 0.2, 0.7] {
            let closed = pair_moments(Activation::Relu, 1.0, 1.0, c);
            let semi = pair_moments(Activation::ShiftedRelu(0.0), 1.0, 1.0, c);
            assert!((closed.0 - semi.0).abs() < 1e-8);
            let rule = gauss_hermite(200);
            let perp = (1.0 - c * c).sqrt();
            let mut a = 0.0;
            for (z1, w1) in rule.nodes.iter().zip(&rule.weights) {
                for (z2, w2) in rule.nodes.iter().zip(&rule.weights) {
                    a += w1 * w2 * z1.max(0.0) * (c * z1 + perp * z2).max(0.0);
                }
            }
            assert!((a - closed.0).abs() < 1e-3);
        }
    }

    #[test]
    fn tanh_quadrature_converges() {
        check_quadrature(Activation::Tanh, 0.8).unwrap();
        check_quadrature(Activation::ShiftedRelu(1.0), 0.5).unwrap();
    }

    #[test]
    fn tanh_moments_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, c): (f64, f64) = (0.9, 0.4);
        let perp = (1.0 - c * c).sqrt();
        let samples = 200_000;
        let mut acc = 0.0;
        for _ in 0..samples {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            acc += (q.sqrt() * z1).tanh() * (q.sqrt() * (c * z1 + perp * z2)).tanh();
        }
        let mc = acc / samples as f64;
        let (a, _) = pair_moments(Activation::Tanh, q, q, c);
        assert!((a - mc).abs() < 5e-3, "{a} vs {mc}");
    }

    #[test]
    fn relu_critical_amplitude_is_preserved() {
        let config = NetworkConfig::uniform(10, 50, 4, 1, 2.0, 0.0, Activation::Relu).unwrap();
        let q = signal_amplitudes(&config);
        for l in 1..q.len() {
            assert!((q[l] - q[l - 1]).abs() < 1e-15);
        }
        let config = NetworkConfig::uniform(10, 50, 4, 1, 1.5, 0.3, Activation::Relu).unwrap();
        let q = signal_amplitudes(&config);
        for l in 1..q.len() {
            assert!((q[l] - (0.75 * q[l - 1] + 0.3)).abs() < 1e-15);
        }
    }

    #[test]
    fn stack_invariants() {
        let config = NetworkConfig::uniform(6, 10, 3, 1, 1.7, 0.2, Activation::Tanh).unwrap();
        let x = unit_rows(5, 6, 1);
        let xp = unit_rows(3, 6, 2);
        let st = analytic_stack(&config, x.view(), xp.view()).unwrap();
        for qb in &st.qbar {
            for i in 0..5 {
                assert_eq!(qb[[i, i]], 1.0);
            }
        }
        assert!(st.b[2].iter().all(|&v| v == 1.0));
        let expected = &st.xi[1] * &st.b[2] * config.sigma_w2;
        assert!((&st.b[1] - &expected).iter().all(|v| v.abs() < 1e-15));
        let (layers, theta) = theta_l_analytic(&st, &config);
        let sum = layers.iter().fold(Array2::<f64>::zeros(theta.dim()), |acc, t| acc + t);
        assert!((&sum - &st.theta).iter().all(|v| v.abs() < 1e-12));
        for m in st.a.iter().chain(&st.b).chain(&st.theta_layers) {
            let t = st.train(m);
            assert!((&t - &t.t()).iter().all(|v| v.abs() < 1e-12));
            let eig = SymmetricEigen::new(&t.to_owned()).unwrap();
            assert!(eig.lambda_min() > -1e-10);
        }
    }

    #[test]
    fn first_layer_kernel_specializes_without_bias() {
        let config = NetworkConfig::uniform(6, 10, 2, 1, 2.0, 0.0, Activation::Relu).unwrap();
        let x = unit_rows(4, 6, 3);
        let st = analytic_stack(&config, x.view(), x.slice(s![..0, ..])).unwrap();
        let expected = &st.b[0] * &(x.dot(&x.t()) / 6.0) * 2.0;
        assert!((&st.theta_layers[0] - &expected).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn identity_network_kernels_are_linear() {
        let config = NetworkConfig::uniform(5, 8, 2, 1, 1.0, 0.0, Activation::Identity).unwrap();
        let x = unit_rows(4, 5, 4);
        let st = analytic_stack(&config, x.view(), x.slice(s![..0, ..])).unwrap();
        let a0 = x.dot(&x.t()) / 5.0;
        assert!((&st.a[1] - &a0).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn wide_relu_network_matches_analytic_kernels() {
        // seed-averaged empirical kernels of a wide network
        let config = NetworkConfig::uniform(8, 2048, 3, 1, 2.0, 0.1, Activation::Relu).unwrap();
        let x = unit_rows(6, 8, 5);
        let st = analytic_stack(&config, x.view(), x.slice(s![..0, ..])).unwrap();
        let seeds = 8;
        let mut a1 = Array2::<f64>::zeros((6, 6));
        let mut layers = vec![Array2::<f64>::zeros((6, 6)); 3];
        for seed in 0..seeds {
            let p = Params::init(&config, seed);
            let (_, _, _, jb) = linearize(&config, &p, x.view()).unwrap();
            let emp = empirical_kernels(&jb);
            a1 += &(&emp.a[1] / seeds as f64);
            for l in 0..3 {
                layers[l] += &(&emp.theta_layers[l] * (6.0 / seeds as f64));
            }
        }
        let err = relative_frobenius(a1.view(), st.a[1].view());
        assert!(err < 0.03, "A_1 error {err}");
        for l in 0..3 {
            let e = relative_frobenius(layers[l].view(), st.theta_layers[l].view());
            assert!(e < 0.03, "Θ_{} error {e}", l + 1);
        }
    }

    #[test]
    fn relu_gamma_is_one_half() {
        for q in [0.1, 1.0, 7.0] {
            assert_eq!(gamma_coefficient(Activation::Relu, q), 0.5);
            assert!((gamma_by_quadrature(Activation::Relu, q) - 0.5).abs() < 1e-12);
            assert!((gamma_by_quadrature(Activation::Tanh, q) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_gamma_limits_and_monte_carlo() {
        assert!((gamma_coefficient(Activation::ShiftedRelu(50.0), 1.0) - 1.0).abs() < 1e-15);
        let closed = gamma_coefficient(Activation::ShiftedRelu(1.0), 1.0);
        let expected = 0.5 + 0.5 * erf(1.0 / 2f64.sqrt());
        assert_eq!(closed, expected);
        assert!((gamma_by_quadrature(Activation::ShiftedRelu(1.0), 1.0) - closed).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples = 1_000_000;
        let hits = (0..samples).filter(|_| rng.sample::<f64, _>(StandardNormal) > -1.0).count();
        let mc = hits as f64 / samples as f64;
        assert!((mc - closed).abs() < 5e-4 * 2.0, "{mc} vs {closed}");
        assert_eq!((mc * 1000.0).round(), (closed * 1000.0).round());
    }

    #[test]
    fn tridiagonal_spectrum_matches_dense() {
        let sp = tridiag_spectrum(2);
        assert_eq!(sp.eigenvalues, vec![0.0, 2.0]);
        assert!(sp.singular);
        let sp5 = tridiag_spectrum(5);
        assert!(sp5.singular && sp5.eigenvalues.contains(&0.0));
        let sp4 = tridiag_spectrum(4);
        assert!(!sp4.singular);
        let dense = SymmetricEigen::new(build_sigma(SigmaKind::TriDiagonal, 4).unwrap().entries()).unwrap();
        for (a, b) in dense.values.iter().zip(&sp4.eigenvalues) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn alpha_closed_forms() {
        let config = |l: usize| NetworkConfig::uniform(10, 4096, l, 1, 2.0, 0.0, Activation::Relu).unwrap();
        let bd = MetricKind::LayerWise(build_sigma(SigmaKind::Identity, 5).unwrap());
        assert_eq!(alpha_of(&bd, &config(5), 10).unwrap(), 5.0);
        for (l, a) in [(3, 1.0), (4, 2.0), (7, 3.0)] {
            let k = MetricKind::LayerWise(build_sigma(SigmaKind::TriDiagonal, l).unwrap());
            assert_eq!(alpha_of(&k, &config(l), 10).unwrap(), a);
        }
        let k5 = MetricKind::LayerWise(build_sigma(SigmaKind::TriDiagonal, 5).unwrap());
        assert!(matches!(alpha_of(&k5, &config(5), 10), Err(Error::SingularSigma { .. })));
        assert_eq!(alpha_of(&MetricKind::UnitWise, &config(3), 10).unwrap(), 4096.0);
        assert_eq!(alpha_of(&MetricKind::KFac { bias: false }, &config(3), 10).unwrap(), 30.0);
        assert_eq!(alpha_of(&MetricKind::KFac { bias: false }, &config(3), 100).unwrap(), 210.0);
    }

    #[test]
    fn thetabar_train_blocks() {
        let config = NetworkConfig::uniform(8, 16, 3, 1, 2.0, 0.1, Activation::Relu).unwrap();
        let x = unit_rows(5, 8, 8);
        let xp = unit_rows(3, 8, 9);
        let st = analytic_stack(&config, x.view(), xp.view()).unwrap();
        let ex = thetabar(&MetricKind::Exact, &st, &config).unwrap();
        assert_eq!(ex.train_block, Array2::<f64>::eye(5));
        assert!(ex.is_isotropic());
        let bd = thetabar(&MetricKind::LayerWise(build_sigma(SigmaKind::Identity, 3).unwrap()), &st, &config).unwrap();
        assert_eq!(bd.alpha, 3.0);
        // the cross block evaluated on training rows reproduces α I
        let stt = analytic_stack(&config, x.view(), x.view()).unwrap();
        let bdt = thetabar(&MetricKind::LayerWise(build_sigma(SigmaKind::Identity, 3).unwrap()), &stt, &config).unwrap();
        let cross = bdt.cross_block.unwrap();
        assert!((&cross - &(Array2::<f64>::eye(5) * 3.0)).iter().all(|v| v.abs() < 1e-9));
        let kf = thetabar(&MetricKind::KFac { bias: false }, &st, &config).unwrap();
        assert!((&kf.train_block - &(Array2::<f64>::eye(5) * 15.0)).iter().all(|v| v.abs() < 1e-8));
        assert_eq!(kf.alpha, 15.0);
    }

    #[test]
    fn kfac_undersampled_inputs_are_diagonal_not_isotropic() {
        // M_0 < N: the first layer contributes N·diag(X(XᵀX)⁻¹Xᵀ)
        let config = NetworkConfig::uniform(3, 16, 2, 1, 2.0, 0.0, Activation::Relu).unwrap();
        let x = unit_rows(6, 3, 10);
        let st = analytic_stack(&config, x.view(), x.slice(s![..0, ..])).unwrap();
        let kf = thetabar(&MetricKind::KFac { bias: false }, &st, &config).unwrap();
        let lev = x.dot(&pseudo_inverse(&x).unwrap());
        for i in 0..6 {
            for j in 0..6 {
                let expected = if i == j { 6.0 * (1.0 + lev[[i, i]]) } else { 0.0 };
                assert!((kf.train_block[[i, j]] - expected).abs() < 1e-8);
            }
        }
        let trace: f64 = (0..6).map(|i| kf.train_block[[i, i]]).sum::<f64>() / 6.0;
        assert!((trace - alpha_of(&MetricKind::KFac { bias: false }, &config, 6).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn pseudo_inverse_properties() {
        let m = unit_rows(4, 7, 11);
        let p = pseudo_inverse(&m).unwrap();
        let mpm = m.dot(&p).dot(&m);
        assert!((&mpm - &m).iter().all(|v| v.abs() < 1e-12));
    }
}
