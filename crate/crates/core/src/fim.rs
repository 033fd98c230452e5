//! Natural-gradient directions `Δθ = G⁻¹ Jᵀ r / N` for the exact Fisher
//! information matrix and its layer-wise, Kronecker-factored, unit-wise and
//! diagonal approximations.
//!
//! Every metric is used through a [`MetricSolver`]: the expensive
//! factorizations happen once in [`MetricSolver::new`], after which
//! [`MetricSolver::direction`] can be applied to many residuals.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, OwnedRepr, Zip};
use ndarray_linalg::{FactorizeInto, InverseC, LUFactorized, Solve};

use crate::error::{Error, Result};
use crate::network::{BackwardCache, ForwardCache, JacobianBlocks, Layer, NetworkConfig, Params};
use crate::numerics::{lu_solve, SymmetricEigen};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaKind {
    Identity,
    TriDiagonal,
    Custom,
}

/// `L × L` coupling between layer blocks of a layer-wise metric.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaMatrix {
    entries: Array2<f64>,
    kind: SigmaKind,
    positive_definite: bool,
    nonsingular: bool,
}

/// Smallest eigenvalue magnitude accepted as nonzero for Σ.
const SIGMA_TOL: f64 = 1e-10;

impl SigmaMatrix {
    pub fn custom(entries: Array2<f64>) -> Result<Self> {
        let (r, c) = entries.dim();
        if r != c || r == 0 {
            return Err(Error::ShapeMismatch(format!("sigma must be square and non-empty, got {r}x{c}")));
        }
        if entries.iter().zip(entries.t().iter()).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(Error::InvalidConfig("sigma must be symmetric".into()));
        }
        Ok(Self::tagged(entries, SigmaKind::Custom))
    }

    fn tagged(entries: Array2<f64>, kind: SigmaKind) -> Self {
        let (positive_definite, nonsingular) = match SymmetricEigen::new(&entries) {
            Ok(eig) => (
                eig.lambda_min() > SIGMA_TOL,
                eig.values.iter().all(|v| v.abs() > SIGMA_TOL),
            ),
            Err(_) => (false, false),
        };
        Self { entries, kind, positive_definite, nonsingular }
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn kind(&self) -> SigmaKind {
        self.kind
    }

    pub fn depth(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.positive_definite
    }

    /// Every eigenvalue is bounded away from zero. The tri-diagonal Σ is
    /// indefinite for `L ≥ 3` but invertible unless `L = 3s + 2`.
    pub fn is_nonsingular(&self) -> bool {
        self.nonsingular
    }

    pub fn is_identity(&self) -> bool {
        self.entries == Array2::eye(self.depth())
    }

    /// `Σ⁻¹ 1_L`.
    pub fn inverse_row_sums(&self) -> Result<Array1<f64>> {
        if !self.nonsingular {
            return Err(Error::SingularSigma { depth: self.depth() });
        }
        lu_solve(&self.entries, Array1::ones(self.depth()).view())
    }

    /// `1ᵀ Σ⁻¹ 1`.
    pub fn alpha(&self) -> Result<f64> {
        Ok(self.inverse_row_sums()?.sum())
    }

    /// `c Σ`, keeping the kind tag only when it is still meaningful.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::custom(&self.entries * c)
    }
}

pub fn build_sigma(kind: SigmaKind, depth: usize) -> Result<SigmaMatrix> {
    if depth == 0 {
        return Err(Error::InvalidConfig("sigma depth must be >= 1".into()));
    }
    let entries = match kind {
        SigmaKind::Identity => Array2::eye(depth),
        SigmaKind::TriDiagonal => {
            Array2::from_shape_fn((depth, depth), |(i, j)| if i.abs_diff(j) <= 1 { 1.0 } else { 0.0 })
        }
        SigmaKind::Custom => {
            return Err(Error::InvalidConfig("custom sigma needs explicit entries".into()));
        }
    };
    Ok(SigmaMatrix::tagged(entries, kind))
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricKind {
    /// `G = I`: plain gradient descent.
    Euclidean,
    Exact,
    LayerWise(SigmaMatrix),
    /// Kronecker-factored layer blocks; `bias` augments the input factor with
    /// the bias column.
    KFac { bias: bool },
    UnitWise,
    EntryDiag,
    QuasiDiag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub rho: f64,
    /// Inner damping `Λ + ρ̃I` for the cross-entropy metric.
    pub rho_tilde: f64,
}

impl MetricSpec {
    pub fn new(kind: MetricKind, rho: f64) -> Self {
        Self { kind, rho, rho_tilde: 0.0 }
    }

    pub fn with_rho_tilde(mut self, rho_tilde: f64) -> Self {
        self.rho_tilde = rho_tilde;
        self
    }

    pub fn gd() -> Self {
        Self::new(MetricKind::Euclidean, 0.0)
    }

    pub fn exact(rho: f64) -> Self {
        Self::new(MetricKind::Exact, rho)
    }

    pub fn block_diagonal(depth: usize, rho: f64) -> Self {
        Self::new(MetricKind::LayerWise(build_sigma(SigmaKind::Identity, depth).unwrap()), rho)
    }

    pub fn tridiagonal(depth: usize, rho: f64) -> Self {
        Self::new(MetricKind::LayerWise(build_sigma(SigmaKind::TriDiagonal, depth).unwrap()), rho)
    }

    pub fn name(&self) -> &'static str {
        match &self.kind {
            MetricKind::Euclidean => "gd",
            MetricKind::Exact => "exact",
            MetricKind::LayerWise(s) => match s.kind() {
                SigmaKind::Identity => "block_diagonal",
                SigmaKind::TriDiagonal => "tridiagonal",
                SigmaKind::Custom => "layerwise",
            },
            MetricKind::KFac { .. } => "kfac",
            MetricKind::UnitWise => "unitwise",
            MetricKind::EntryDiag => "entry_diag",
            MetricKind::QuasiDiag => "quasi_diag",
        }
    }

    fn validate(&self, blocks: &JacobianBlocks) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("rho must be finite and >= 0, got {}", self.rho)));
        }
        if let MetricKind::LayerWise(sigma) = &self.kind {
            if sigma.depth() != blocks.depth() {
                return Err(Error::ShapeMismatch(format!(
                    "sigma is {}x{}, network has {} layers",
                    sigma.depth(),
                    sigma.depth(),
                    blocks.depth()
                )));
            }
        }
        Ok(())
    }
}

struct KfacLayer {
    /// `(B* + ρI)⁻¹ δᵀ`, `M_l × N`
    left: Array2<f64>,
    /// `a (A* + ρI)⁻¹`, `N × (M_{l-1} [+1])`
    right: Array2<f64>,
}

struct DiagStats {
    ww: Array2<f64>,
    wb: Array2<f64>,
    bb: Array1<f64>,
}

enum Prepared {
    Euclidean,
    Exact(SymmetricEigen),
    /// Independent per-layer solves weighted by `weights` (Σ = I, or
    /// positive-definite Σ at ρ = 0).
    LayerDiag { weights: Array1<f64>, eigens: Vec<SymmetricEigen> },
    /// Coupled dual system of size `L·CN`.
    LayerDual(LUFactorized<OwnedRepr<f64>>),
    KFac(Vec<KfacLayer>),
    /// Per-layer shared feature Gram (tiled to `CN × CN`) and stacked deltas.
    UnitWise { features: Vec<Array2<f64>>, deltas: Vec<Array2<f64>> },
    EntryDiag(Params),
    QuasiDiag(Vec<DiagStats>),
}

/// A metric factorized against one set of Jacobian blocks.
pub struct MetricSolver<'a> {
    blocks: &'a JacobianBlocks,
    rho: f64,
    prepared: Prepared,
}

impl<'a> MetricSolver<'a> {
    pub fn new(spec: &MetricSpec, blocks: &'a JacobianBlocks) -> Result<Self> {
        spec.validate(blocks)?;
        let n = blocks.n_samples() as f64;
        let rho = spec.rho;
        let prepared = match &spec.kind {
            MetricKind::Euclidean => Prepared::Euclidean,
            MetricKind::Exact => {
                let eig = SymmetricEigen::new(&blocks.gram())?;
                eig.check_solvable(n * rho)?;
                Prepared::Exact(eig)
            }
            MetricKind::LayerWise(sigma) => {
                let grams: Vec<Array2<f64>> = (1..=blocks.depth()).map(|l| blocks.layer_gram(l)).collect();
                if sigma.is_identity() || (rho == 0.0 && sigma.is_nonsingular()) {
                    let weights = sigma.inverse_row_sums()?;
                    let eigens = grams
                        .iter()
                        .map(|g| {
                            let e = SymmetricEigen::new(g)?;
                            e.check_solvable(n * rho)?;
                            Ok(e)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Prepared::LayerDiag { weights, eigens }
                } else if rho == 0.0 {
                    return Err(Error::DampingRequired(format!(
                        "sigma for depth {} is singular; the layer-wise metric needs rho > 0",
                        sigma.depth()
                    )));
                } else {
                    let m = layer_dual_matrix(&grams, sigma.entries(), None, n * rho);
                    Prepared::LayerDual(factorize(m)?)
                }
            }
            MetricKind::KFac { bias } => Prepared::KFac(kfac_prepare(blocks, rho, *bias)?),
            MetricKind::UnitWise => {
                let features = (1..=blocks.depth()).map(|l| blocks.tile(&blocks.feature_gram(l))).collect();
                let deltas = (1..=blocks.depth()).map(|l| blocks.stacked_delta(l)).collect();
                Prepared::UnitWise { features, deltas }
            }
            MetricKind::EntryDiag => Prepared::EntryDiag(entry_diagonal(blocks)),
            MetricKind::QuasiDiag => Prepared::QuasiDiag(diag_stats(blocks)),
        };
        Ok(Self { blocks, rho, prepared })
    }

    pub fn blocks(&self) -> &JacobianBlocks {
        self.blocks
    }

    /// `G⁻¹ Jᵀ r / N`.
    pub fn direction(&self, r: ArrayView1<'_, f64>) -> Result<Params> {
        let jb = self.blocks;
        if r.len() != jb.rows() {
            return Err(Error::ShapeMismatch(format!("residual has length {}, expected {}", r.len(), jb.rows())));
        }
        let n = jb.n_samples() as f64;
        let rho = self.rho;
        match &self.prepared {
            Prepared::Euclidean => Ok(jb.transpose_apply((&r / n).view())),
            Prepared::Exact(eig) => {
                let z = eig.solve_damped_vec(n * rho, r)?;
                Ok(jb.transpose_apply(z.view()))
            }
            Prepared::LayerDiag { weights, eigens } => {
                let damping = n * rho;
                let layers = eigens
                    .iter()
                    .enumerate()
                    .map(|(i, e)| {
                        let z = e.solve_damped_vec(damping, r)? * weights[i];
                        Ok(jb.transpose_apply_layer(i + 1, z.view()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Params { layers })
            }
            Prepared::LayerDual(lu) => {
                let cn = jb.rows();
                let rhs = Array1::from_iter((0..jb.depth()).flat_map(|_| r.iter().copied()));
                let x = lu.solve(&rhs)?;
                check_finite(&x)?;
                let layers = (1..=jb.depth())
                    .map(|l| jb.transpose_apply_layer(l, x.slice(s![(l - 1) * cn..l * cn])))
                    .collect();
                Ok(Params { layers })
            }
            Prepared::KFac(layers) => {
                let out = layers
                    .iter()
                    .enumerate()
                    .map(|(i, kl)| {
                        let l = i + 1;
                        let mut scaled = kl.right.clone();
                        scaled.axis_iter_mut(Axis(0)).zip(r.iter()).for_each(|(mut row, &v)| row *= v / n);
                        let aug = kl.left.dot(&scaled);
                        let fan_in = jb.width(l - 1);
                        let weight = aug.slice(s![.., ..fan_in]).to_owned();
                        let bias = if aug.ncols() > fan_in {
                            aug.column(fan_in).to_owned()
                        } else {
                            Array1::zeros(jb.width(l))
                        };
                        Layer { weight, bias }
                    })
                    .collect();
                Ok(Params { layers: out })
            }
            Prepared::UnitWise { features, deltas } => {
                let layers = (1..=jb.depth())
                    .map(|l| unit_wise_layer(jb, l, &features[l - 1], &deltas[l - 1], r, rho))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Params { layers })
            }
            Prepared::EntryDiag(diag) => {
                let mut g = jb.transpose_apply((&r / n).view());
                for (gl, dl) in g.layers.iter_mut().zip(&diag.layers) {
                    Zip::from(&mut gl.weight).and(&dl.weight).for_each(|g, &f| *g /= f + rho);
                    Zip::from(&mut gl.bias).and(&dl.bias).for_each(|g, &f| *g /= f + rho);
                }
                check_params_finite(&g)?;
                Ok(g)
            }
            Prepared::QuasiDiag(stats) => {
                let g = jb.transpose_apply((&r / n).view());
                let layers = g
                    .layers
                    .iter()
                    .zip(stats)
                    .map(|(gl, st)| quasi_diag_layer(gl, st, rho))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Params { layers })
            }
        }
    }

    /// Function-space response `J G⁻¹ Jᵀ R / N` for each column of `R`.
    /// Assembling it on the identity gives the empirical `Θ̄`.
    pub fn response(&self, rhs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let jb = self.blocks;
        let mut out = Array2::zeros((jb.rows(), rhs.ncols()));
        if let Prepared::UnitWise { features, deltas } = &self.prepared {
            // J_i J_iᵀ (J_i J_iᵀ + NρI)⁻¹ R per unit, solved once for all columns
            for l in 1..=jb.depth() {
                for i in 0..jb.width(l) {
                    let d = deltas[l - 1].column(i);
                    if let Some((active, gram, z)) = unit_solve(d, &features[l - 1], rhs, self.rho, jb.n_samples())? {
                        let resp = gram.dot(&z);
                        for (a, &row) in active.iter().enumerate() {
                            let mut o = out.row_mut(row);
                            o += &resp.row(a);
                        }
                    }
                }
            }
            return Ok(out);
        }
        for (j, col) in rhs.axis_iter(Axis(1)).enumerate() {
            let d = self.direction(col)?;
            out.column_mut(j).assign(&jb.apply(&d));
        }
        Ok(out)
    }
}

/// One-shot `G⁻¹ Jᵀ r / N`.
pub fn natural_gradient(spec: &MetricSpec, blocks: &JacobianBlocks, r: ArrayView1<'_, f64>) -> Result<Params> {
    MetricSolver::new(spec, blocks)?.direction(r)
}

fn check_finite(x: &Array1<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::SingularMatrix { min_eigenvalue: f64::NAN, tolerance: 0.0 })
    }
}

fn check_params_finite(p: &Params) -> Result<()> {
    let ok = p.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()));
    if ok {
        Ok(())
    } else {
        Err(Error::SingularMatrix { min_eigenvalue: 0.0, tolerance: 0.0 })
    }
}

fn factorize(m: Array2<f64>) -> Result<LUFactorized<OwnedRepr<f64>>> {
    m.factorize_into().map_err(|_| Error::SingularMatrix { min_eigenvalue: 0.0, tolerance: 0.0 })
}

/// `(Σ ⊗ Λ̃) blockdiag(G_l) + damping·I` with `Λ̃ = I` when `lambda` is `None`.
fn layer_dual_matrix(grams: &[Array2<f64>], sigma: &Array2<f64>, lambda: Option<&Array2<f64>>, damping: f64) -> Array2<f64> {
    let depth = grams.len();
    let cn = grams[0].nrows();
    let mut m = Array2::zeros((depth * cn, depth * cn));
    let weighted: Vec<Array2<f64>> = match lambda {
        Some(lam) => grams.iter().map(|g| lam.dot(g)).collect(),
        None => grams.to_vec(),
    };
    for a in 0..depth {
        for b in 0..depth {
            let w = sigma[[a, b]];
            if w != 0.0 {
                let mut blk = m.slice_mut(s![a * cn..(a + 1) * cn, b * cn..(b + 1) * cn]);
                blk.scaled_add(w, &weighted[b]);
            }
        }
    }
    for i in 0..depth * cn {
        m[[i, i]] += damping;
    }
    m
}

/// Inverse of a symmetric matrix that must be positive definite when
/// `rho = 0`; damping is added on the diagonal.
fn damped_inverse(m: &Array2<f64>, rho: f64) -> Result<Array2<f64>> {
    let eig = SymmetricEigen::new(m)?;
    eig.inverse_damped(rho)
}

fn kfac_prepare(jb: &JacobianBlocks, rho: f64, bias: bool) -> Result<Vec<KfacLayer>> {
    if jb.n_outputs() != 1 {
        return Err(Error::Unsupported("K-FAC is implemented for a single output only".into()));
    }
    let n = jb.n_samples();
    let nf = n as f64;
    let depth = jb.depth();
    (1..=depth)
        .map(|l| {
            let a = kfac_input_features(jb, l, bias);
            let delta = jb.delta(l, 0);
            let left = if l == depth {
                // the output factor is the scalar 1/N
                delta.t().to_owned() / (1.0 / nf + rho)
            } else if delta.ncols() >= n {
                let k = damped_inverse(&(delta.dot(&delta.t()) / nf), rho)?;
                delta.t().dot(&k)
            } else {
                let k = damped_inverse(&(delta.t().dot(delta) / nf), rho)?;
                k.dot(&delta.t())
            };
            let right = if a.ncols() >= n {
                let k = damped_inverse(&(a.dot(&a.t()) / nf), rho)?;
                k.dot(&a)
            } else {
                let k = damped_inverse(&(a.t().dot(&a) / nf), rho)?;
                a.dot(&k)
            };
            Ok(KfacLayer { left, right })
        })
        .collect()
}

/// Rows `a_n = c·h_{l-1}(x_n)`, optionally followed by the bias entry `σ_b`.
fn kfac_input_features(jb: &JacobianBlocks, l: usize, bias: bool) -> Array2<f64> {
    let h = jb.layer_input(l) * jb.weight_scale(l);
    if bias {
        let col = Array2::from_elem((h.nrows(), 1), jb.sigma_b());
        ndarray::concatenate(Axis(1), &[h.view(), col.view()]).unwrap()
    } else {
        h
    }
}

/// Primal K-FAC preconditioning of one layer gradient:
/// `(B + ρI)⁻¹ grad (A + ρI)⁻¹`.
pub fn kronecker_precondition(grad: ArrayView2<'_, f64>, b: &Array2<f64>, a: &Array2<f64>, rho: f64) -> Result<Array2<f64>> {
    if grad.nrows() != b.nrows() || grad.ncols() != a.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "gradient {:?} does not match factors {}x{} and {}x{}",
            grad.dim(),
            b.nrows(),
            b.ncols(),
            a.nrows(),
            a.ncols()
        )));
    }
    let eb = SymmetricEigen::new(b)?;
    let ea = SymmetricEigen::new(a)?;
    let left = eb.solve_damped(rho, grad)?;
    Ok(ea.solve_damped(rho, left.t())?.t().to_owned())
}

/// Kronecker factors `(B*_l, A*_{l-1})` of every layer, with
/// `A* = aᵀa/N`, `B* = δᵀδ/N` and `B*_L = 1/N`.
pub fn kfac_factors(config: &NetworkConfig, fcache: &ForwardCache, bcache: &BackwardCache, bias: bool) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
    if config.outputs() != 1 {
        return Err(Error::Unsupported("K-FAC is implemented for a single output only".into()));
    }
    let n = fcache.n_samples() as f64;
    let depth = config.depth();
    Ok((1..=depth)
        .map(|l| {
            let mut a = fcache.post(l - 1) * config.weight_scale(l);
            if bias {
                let col = Array2::from_elem((a.nrows(), 1), config.sigma_b());
                a = ndarray::concatenate(Axis(1), &[a.view(), col.view()]).unwrap();
            }
            let a_star = a.t().dot(&a) / n;
            let b_star = if l == depth {
                Array2::from_elem((1, 1), 1.0 / n)
            } else {
                let d = bcache.delta(l, 0);
                d.t().dot(d) / n
            };
            (b_star, a_star)
        })
        .collect())
}

/// Primal K-FAC update of each layer's weight gradient (bias column
/// appended when `bias` is set).
pub fn kfac_gradient(
    config: &NetworkConfig,
    fcache: &ForwardCache,
    bcache: &BackwardCache,
    layer_gradients: &[Array2<f64>],
    rho: f64,
    bias: bool,
) -> Result<Vec<Array2<f64>>> {
    let factors = kfac_factors(config, fcache, bcache, bias)?;
    if layer_gradients.len() != factors.len() {
        return Err(Error::ShapeMismatch("one gradient per layer required".into()));
    }
    factors
        .iter()
        .zip(layer_gradients)
        .map(|((b, a), g)| kronecker_precondition(g.view(), b, a, rho))
        .collect()
}

/// Restricts unit `i`'s Gram `diag(d) F diag(d)` to the rows where `d ≠ 0`
/// and solves against `rhs`. Returns `None` for a dead unit.
#[allow(clippy::type_complexity)]
fn unit_solve(
    d: ArrayView1<'_, f64>,
    features: &Array2<f64>,
    rhs: ArrayView2<'_, f64>,
    rho: f64,
    n: usize,
) -> Result<Option<(Vec<usize>, Array2<f64>, Array2<f64>)>> {
    let active: Vec<usize> = d.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
    if active.is_empty() {
        return Ok(None);
    }
    let k = active.len();
    let gram = Array2::from_shape_fn((k, k), |(a, b)| {
        let (i, j) = (active[a], active[b]);
        d[i] * d[j] * features[[i, j]]
    });
    let mut damped = gram.clone();
    for a in 0..k {
        damped[[a, a]] += n as f64 * rho;
    }
    let inv = match damped.invc() {
        Ok(inv) if inv.iter().all(|v| v.is_finite()) => inv,
        _ => {
            let eig = SymmetricEigen::new(&gram)?;
            eig.inverse_damped(n as f64 * rho)?
        }
    };
    let sub = Array2::from_shape_fn((k, rhs.ncols()), |(a, c)| rhs[[active[a], c]]);
    let z = inv.dot(&sub);
    Ok(Some((active, gram, z)))
}

fn unit_wise_layer(
    jb: &JacobianBlocks,
    l: usize,
    features: &Array2<f64>,
    deltas: &Array2<f64>,
    r: ArrayView1<'_, f64>,
    rho: f64,
) -> Result<Layer> {
    let n = jb.n_samples();
    let rows = jb.rows();
    let units = jb.width(l);
    // column i holds d_i ∘ z_i with z_i = (Gram_i + NρI)⁻¹ r on the active rows
    let mut dz = Array2::zeros((rows, units));
    let rhs = r.insert_axis(Axis(1));
    for i in 0..units {
        let d = deltas.column(i);
        if let Some((active, _, z)) = unit_solve(d, features, rhs, rho, n)? {
            for (a, &row) in active.iter().enumerate() {
                dz[[row, i]] = d[row] * z[[a, 0]];
            }
        }
    }
    let h = jb.layer_input(l);
    let mut weight = Array2::zeros((units, jb.width(l - 1)));
    for k in 0..jb.n_outputs() {
        weight += &dz.slice(s![k * n..(k + 1) * n, ..]).t().dot(h);
    }
    weight *= jb.weight_scale(l);
    let bias = dz.sum_axis(Axis(0)) * jb.sigma_b();
    Ok(Layer { weight, bias })
}

/// Diagonal of `JᵀJ/N`.
fn entry_diagonal(jb: &JacobianBlocks) -> Params {
    let layers = diag_stats(jb).into_iter().map(|st| Layer { weight: st.ww, bias: st.bb }).collect();
    Params { layers }
}

fn diag_stats(jb: &JacobianBlocks) -> Vec<DiagStats> {
    let n = jb.n_samples() as f64;
    (1..=jb.depth())
        .map(|l| {
            let c = jb.weight_scale(l);
            let sb = jb.sigma_b();
            let h = jb.layer_input(l);
            let h2 = h.mapv(|v| v * v);
            let mut ww = Array2::zeros((jb.width(l), jb.width(l - 1)));
            let mut wb = Array2::zeros((jb.width(l), jb.width(l - 1)));
            let mut bb = Array1::zeros(jb.width(l));
            for k in 0..jb.n_outputs() {
                let d2 = jb.delta(l, k).mapv(|v| v * v);
                ww += &d2.t().dot(&h2);
                wb += &d2.t().dot(h);
                bb += &d2.sum_axis(Axis(0));
            }
            DiagStats { ww: ww * (c * c / n), wb: wb * (c * sb / n), bb: bb * (sb * sb / n) }
        })
        .collect()
}

/// Per weight, a damped 2×2 solve coupling `w_ij` with the bias `b_i` of its
/// unit; the bias then absorbs the remaining coupling.
fn quasi_diag_layer(g: &Layer, st: &DiagStats, rho: f64) -> Result<Layer> {
    let mut weight = Array2::zeros(g.weight.dim());
    let mut bias = Array1::zeros(g.bias.len());
    for i in 0..g.weight.nrows() {
        let fbb = st.bb[i] + rho;
        let gb = g.bias[i];
        let mut coupled = 0.0;
        for j in 0..g.weight.ncols() {
            let fww = st.ww[[i, j]] + rho;
            let fwb = st.wb[[i, j]];
            let det = fww * fbb - fwb * fwb;
            let dw = (g.weight[[i, j]] * fbb - gb * fwb) / det;
            weight[[i, j]] = dw;
            coupled += fwb * dw;
        }
        bias[i] = (gb - coupled) / fbb;
    }
    let out = Layer { weight, bias };
    check_params_finite(&Params { layers: vec![out.clone()] })?;
    Ok(out)
}

/// `Λ(σ)`: per-sample blocks `diag(σ_n) − σ_n σ_nᵀ`, output-major.
pub fn softmax_hessian(sigma: ArrayView1<'_, f64>, n: usize) -> Array2<f64> {
    let cn = sigma.len();
    let c = cn / n;
    let mut lam = Array2::zeros((cn, cn));
    for s in 0..n {
        for k in 0..c {
            for k2 in 0..c {
                let (a, b) = (sigma[k * n + s], sigma[k2 * n + s]);
                lam[[k * n + s, k2 * n + s]] = if k == k2 { a - a * b } else { -a * b };
            }
        }
    }
    lam
}

/// Row-wise softmax of `N × C` logits, flattened output-major.
pub fn softmax(logits: ArrayView2<'_, f64>) -> Array1<f64> {
    let mut p = logits.to_owned();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    crate::network::flatten_outputs(p.view())
}

/// Dual coefficients `X = ((Σ ⊗ Λ̃) blockdiag(J_lJ_lᵀ) + NρI)⁻¹ (1_L ⊗ g)`
/// and the layer Grams for the cross-entropy metric.
fn cross_entropy_dual(
    spec: &MetricSpec,
    blocks: &JacobianBlocks,
    sigma: ArrayView1<'_, f64>,
    g: ArrayView1<'_, f64>,
) -> Result<(Vec<Array2<f64>>, Array1<f64>)> {
    spec.validate(blocks)?;
    if blocks.n_outputs() < 2 {
        return Err(Error::Unsupported("cross-entropy metric needs at least two outputs".into()));
    }
    if spec.rho_tilde <= 0.0 {
        return Err(Error::DampingRequired("Λ(σ) is always singular; set rho_tilde > 0".into()));
    }
    if sigma.len() != blocks.rows() || g.len() != blocks.rows() {
        return Err(Error::ShapeMismatch("softmax and target vectors must have length CN".into()));
    }
    let n = blocks.n_samples();
    let mut lam = softmax_hessian(sigma, n);
    for i in 0..lam.nrows() {
        lam[[i, i]] += spec.rho_tilde;
    }
    let (grams, coupling) = match &spec.kind {
        MetricKind::Exact => (vec![blocks.gram()], Array2::eye(1)),
        MetricKind::LayerWise(s) => ((1..=blocks.depth()).map(|l| blocks.layer_gram(l)).collect(), s.entries().clone()),
        other => {
            return Err(Error::Unsupported(format!("cross-entropy direction for {other:?}")));
        }
    };
    let m = layer_dual_matrix(&grams, &coupling, Some(&lam), n as f64 * spec.rho);
    let rhs = Array1::from_iter((0..grams.len()).flat_map(|_| g.iter().copied()));
    let x = factorize(m)?.solve(&rhs)?;
    check_finite(&x)?;
    Ok((grams, x))
}

/// Function-space update `Λ J G⁻¹ Jᵀ (y − σ) / N` per unit learning rate,
/// with `G = Jᵀ(Λ + ρ̃I)J/N + ρI` (or its layer-wise form).
pub fn cross_entropy_direction(
    spec: &MetricSpec,
    blocks: &JacobianBlocks,
    sigma: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    let g = &y - &sigma;
    let (grams, x) = cross_entropy_dual(spec, blocks, sigma, g.view())?;
    let cn = blocks.rows();
    let mut out = Array1::zeros(cn);
    for (l, gram) in grams.iter().enumerate() {
        out += &gram.dot(&x.slice(s![l * cn..(l + 1) * cn]));
    }
    let lam = softmax_hessian(sigma, blocks.n_samples());
    Ok(lam.dot(&out))
}

/// Parameter-space descent direction `G⁻¹ Jᵀ (σ − y) / N` for the
/// cross-entropy loss.
pub fn cross_entropy_natural_gradient(
    spec: &MetricSpec,
    blocks: &JacobianBlocks,
    sigma: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<Params> {
    let g = &sigma - &y;
    let (grams, x) = cross_entropy_dual(spec, blocks, sigma, g.view())?;
    let cn = blocks.rows();
    if grams.len() == 1 {
        return Ok(blocks.transpose_apply(x.view()));
    }
    let layers = (1..=blocks.depth())
        .map(|l| blocks.transpose_apply_layer(l, x.slice(s![(l - 1) * cn..l * cn])))
        .collect();
    Ok(Params { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{flatten_outputs, linearize, Activation};
    use ndarray::array;
    use ndarray_linalg::Inverse;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    struct Fixture {
        config: NetworkConfig,
        params: Params,
        x: Array2<f64>,
        blocks: JacobianBlocks,
        fcache: ForwardCache,
        bcache: BackwardCache,
        r: Array1<f64>,
    }

    fn fixture(widths: Vec<usize>, act: Activation, n: usize, seed: u64) -> Fixture {
        let config = NetworkConfig::new(widths, 1.8, 0.4, act).unwrap();
        let params = Params::init(&config, seed);
        let x = gaussian(n, config.input_dim(), seed + 100);
        let (_, fcache, bcache, blocks) = linearize(&config, &params, x.view()).unwrap();
        let r = Array1::from_iter((0..blocks.rows()).map(|i| ((i * 7 + 3) as f64).sin()));
        Fixture { config, params, x, blocks, fcache, bcache, r }
    }

    fn dense_solve(g: &Array2<f64>, rhs: &Array1<f64>) -> Array1<f64> {
        g.inv().unwrap().dot(rhs)
    }

    fn rel(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        (a - b).mapv(|v| v * v).sum().sqrt() / b.mapv(|v| v * v).sum().sqrt()
    }

    fn gradient(fx: &Fixture) -> Array1<f64> {
        let n = fx.blocks.n_samples() as f64;
        fx.blocks.dense().t().dot(&fx.r) / n
    }

    /// `Sᵀ(Σ⊗I)S/N + ρI` assembled from dense layer blocks.
    fn dense_layer_metric(fx: &Fixture, sigma: &Array2<f64>, rho: f64) -> Array2<f64> {
        let n = fx.blocks.n_samples() as f64;
        let layers: Vec<Array2<f64>> = (1..=fx.config.depth()).map(|l| fx.blocks.layer_dense(l)).collect();
        let p = fx.config.n_params();
        let mut g = Array2::eye(p) * rho;
        for a in 0..layers.len() {
            for b in 0..layers.len() {
                let (oa, ob) = (fx.config.layer_offset(a + 1), fx.config.layer_offset(b + 1));
                let blk = layers[a].t().dot(&layers[b]) * (sigma[[a, b]] / n);
                let mut target = g.slice_mut(s![oa..oa + layers[a].ncols(), ob..ob + layers[b].ncols()]);
                target += &blk;
            }
        }
        g
    }

    #[test]
    fn identity_sigma_is_positive_definite() {
        let s = build_sigma(SigmaKind::Identity, 4).unwrap();
        assert_eq!(s.entries(), &Array2::<f64>::eye(4));
        assert!(s.is_positive_definite());
        assert_eq!(s.alpha().unwrap(), 4.0);
    }

    #[test]
    fn tridiagonal_sigma_singularity_pattern() {
        assert!(!build_sigma(SigmaKind::TriDiagonal, 5).unwrap().is_nonsingular());
        assert!(!build_sigma(SigmaKind::TriDiagonal, 2).unwrap().is_nonsingular());
        let s4 = build_sigma(SigmaKind::TriDiagonal, 4).unwrap();
        assert!(s4.is_nonsingular());
        assert!(!s4.is_positive_definite());
        let eig = SymmetricEigen::new(s4.entries()).unwrap();
        let mut expected: Vec<f64> = (1..=4).map(|k| 1.0 + 2.0 * (k as f64 * std::f64::consts::PI / 5.0).cos()).collect();
        expected.sort_by(f64::total_cmp);
        for (a, b) in eig.values.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_step_interpolates_linear_model() {
        let fx = fixture(vec![3, 6, 1], Activation::Tanh, 4, 1);
        let d = natural_gradient(&MetricSpec::exact(0.0), &fx.blocks, fx.r.view()).unwrap();
        // f_lin(θ − Δθ) = f0 − JΔθ should remove the residual entirely
        let left = &fx.r - &fx.blocks.apply(&d);
        assert!(left.iter().all(|v| v.abs() < 1e-10), "{left:?}");
    }

    #[test]
    fn exact_matches_primal_dense_inverse() {
        let fx = fixture(vec![2, 4, 3, 1], Activation::Tanh, 5, 2);
        for rho in [1e-2, 1e-4] {
            let d = natural_gradient(&MetricSpec::exact(rho), &fx.blocks, fx.r.view()).unwrap().to_flat();
            let j = fx.blocks.dense();
            let n = j.nrows() as f64;
            let g = j.t().dot(&j) / n + Array2::<f64>::eye(j.ncols()) * rho;
            let oracle = dense_solve(&g, &gradient(&fx));
            assert!(rel(&d, &oracle) < 1e-8, "rho={rho}: {}", rel(&d, &oracle));
        }
    }

    #[test]
    fn layer_wise_matches_dense_oracle() {
        let fx = fixture(vec![2, 3, 3, 1], Activation::Tanh, 4, 3);
        assert!(fx.config.n_params() <= 30);
        for kind in [SigmaKind::Identity, SigmaKind::TriDiagonal] {
            let sigma = build_sigma(kind, 3).unwrap();
            for rho in [1e-2, 1e-4] {
                let spec = MetricSpec::new(MetricKind::LayerWise(sigma.clone()), rho);
                let d = natural_gradient(&spec, &fx.blocks, fx.r.view()).unwrap().to_flat();
                let g = dense_layer_metric(&fx, sigma.entries(), rho);
                let oracle = dense_solve(&g, &gradient(&fx));
                assert!(rel(&d, &oracle) < 1e-8, "{kind:?} rho={rho}: {}", rel(&d, &oracle));
            }
        }
    }

    #[test]
    fn positive_sigma_route_agrees_with_dual_route() {
        let fx = fixture(vec![3, 8, 8, 8, 1], Activation::Tanh, 4, 4);
        let sigma = build_sigma(SigmaKind::TriDiagonal, 4).unwrap();
        let direct = natural_gradient(&MetricSpec::new(MetricKind::LayerWise(sigma.clone()), 0.0), &fx.blocks, fx.r.view())
            .unwrap()
            .to_flat();
        let grams: Vec<Array2<f64>> = (1..=4).map(|l| fx.blocks.layer_gram(l)).collect();
        let m = layer_dual_matrix(&grams, sigma.entries(), None, 0.0);
        let lu = factorize(m).unwrap();
        let solver = MetricSolver { blocks: &fx.blocks, rho: 0.0, prepared: Prepared::LayerDual(lu) };
        let dual = solver.direction(fx.r.view()).unwrap().to_flat();
        assert!(rel(&direct, &dual) < 1e-8);
    }

    #[test]
    fn singular_sigma_requires_damping() {
        let fx = fixture(vec![2, 4, 4, 4, 4, 1], Activation::Tanh, 3, 5);
        let spec = MetricSpec::tridiagonal(5, 0.0);
        assert!(matches!(natural_gradient(&spec, &fx.blocks, fx.r.view()), Err(Error::DampingRequired(_))));
        assert!(natural_gradient(&MetricSpec::tridiagonal(5, 1e-3), &fx.blocks, fx.r.view()).is_ok());
    }

    #[test]
    fn scaling_sigma_scales_direction_inversely() {
        let fx = fixture(vec![3, 8, 8, 1], Activation::Tanh, 4, 6);
        let sigma = build_sigma(SigmaKind::Identity, 3).unwrap().scaled(1.0).unwrap();
        let base = natural_gradient(&MetricSpec::new(MetricKind::LayerWise(sigma.clone()), 0.0), &fx.blocks, fx.r.view())
            .unwrap()
            .to_flat();
        let scaled = natural_gradient(
            &MetricSpec::new(MetricKind::LayerWise(sigma.scaled(2.5).unwrap()), 0.0),
            &fx.blocks,
            fx.r.view(),
        )
        .unwrap()
        .to_flat();
        assert!(rel(&(&scaled * 2.5), &base) < 1e-8);
    }

    /// Block diagonal over units: each unit's weights and bias.
    fn dense_unit_metric(fx: &Fixture, rho: f64) -> Array2<f64> {
        let j = fx.blocks.dense();
        let n = j.nrows() as f64 / fx.blocks.n_outputs() as f64;
        let full = j.t().dot(&j) / n;
        let mut g = Array2::eye(j.ncols()) * rho;
        for l in 1..=fx.config.depth() {
            for i in 0..fx.config.width(l) {
                let idx = fx.blocks.unit_indices(l, i);
                for &a in &idx {
                    for &b in &idx {
                        g[[a, b]] += full[[a, b]];
                    }
                }
            }
        }
        g
    }

    #[test]
    fn unit_wise_matches_dense_oracle() {
        for act in [Activation::Tanh, Activation::Relu] {
            let fx = fixture(vec![3, 5, 4, 1], act, 4, 7);
            for rho in [1e-2, 1e-4] {
                let d = natural_gradient(&MetricSpec::new(MetricKind::UnitWise, rho), &fx.blocks, fx.r.view())
                    .unwrap()
                    .to_flat();
                let oracle = dense_solve(&dense_unit_metric(&fx, rho), &gradient(&fx));
                assert!(rel(&d, &oracle) < 1e-8, "{act:?} rho={rho}: {}", rel(&d, &oracle));
            }
        }
    }

    #[test]
    fn unit_wise_multi_output_matches_dense_oracle() {
        let fx = fixture(vec![3, 5, 2], Activation::Tanh, 2, 8);
        let rho = 1e-3;
        let d = natural_gradient(&MetricSpec::new(MetricKind::UnitWise, rho), &fx.blocks, fx.r.view()).unwrap().to_flat();
        let oracle = dense_solve(&dense_unit_metric(&fx, rho), &gradient(&fx));
        assert!(rel(&d, &oracle) < 1e-8);
    }

    #[test]
    fn dead_unit_gets_zero_update() {
        let mut fx = fixture(vec![3, 4, 1], Activation::Relu, 5, 9);
        fx.params.layers[0].weight.row_mut(2).fill(0.0);
        fx.params.layers[0].bias[2] = -5.0;
        let (_, _, _, blocks) = linearize(&fx.config, &fx.params, fx.x.view()).unwrap();
        let d = natural_gradient(&MetricSpec::new(MetricKind::UnitWise, 1e-3), &blocks, fx.r.view()).unwrap();
        assert!(d.layers[0].weight.row(2).iter().all(|&v| v == 0.0));
        assert_eq!(d.layers[0].bias[2], 0.0);
    }

    #[test]
    fn entry_diag_matches_dense_oracle() {
        let fx = fixture(vec![3, 5, 4, 1], Activation::Tanh, 4, 10);
        let j = fx.blocks.dense();
        let n = j.nrows() as f64;
        for rho in [1e-2, 1e-4] {
            let d = natural_gradient(&MetricSpec::new(MetricKind::EntryDiag, rho), &fx.blocks, fx.r.view())
                .unwrap()
                .to_flat();
            let diag: Array1<f64> = j.axis_iter(Axis(1)).map(|c| c.dot(&c) / n + rho).collect();
            let g = Array2::from_diag(&diag);
            let oracle = dense_solve(&g, &gradient(&fx));
            assert!(rel(&d, &oracle) < 1e-8);
        }
    }

    #[test]
    fn quasi_diag_matches_per_pair_dense_solves() {
        let fx = fixture(vec![3, 5, 4, 1], Activation::Tanh, 4, 11);
        let j = fx.blocks.dense();
        let n = j.nrows() as f64;
        let f = j.t().dot(&j) / n;
        let g = gradient(&fx);
        for rho in [1e-2, 1e-4] {
            let d = natural_gradient(&MetricSpec::new(MetricKind::QuasiDiag, rho), &fx.blocks, fx.r.view())
                .unwrap()
                .to_flat();
            let mut oracle = Array1::zeros(g.len());
            for l in 1..=fx.config.depth() {
                for i in 0..fx.config.width(l) {
                    let idx = fx.blocks.unit_indices(l, i);
                    let b = *idx.last().unwrap();
                    let mut coupled = 0.0;
                    for &w in &idx[..idx.len() - 1] {
                        let m = array![[f[[w, w]] + rho, f[[w, b]]], [f[[w, b]], f[[b, b]] + rho]];
                        let sol = m.inv().unwrap().dot(&array![g[w], g[b]]);
                        oracle[w] = sol[0];
                        coupled += f[[w, b]] * sol[0];
                    }
                    oracle[b] = (g[b] - coupled) / (f[[b, b]] + rho);
                }
            }
            assert!(rel(&d, &oracle) < 1e-8, "rho={rho}: {}", rel(&d, &oracle));
        }
    }

    #[test]
    fn quasi_diag_without_bias_reduces_to_entry_diag() {
        let config = NetworkConfig::new(vec![3, 5, 1], 2.0, 0.0, Activation::Tanh).unwrap();
        let params = Params::init(&config, 12);
        let x = gaussian(4, 3, 13);
        let (_, _, _, jb) = linearize(&config, &params, x.view()).unwrap();
        let r = array![0.3, -0.2, 0.5, 0.1];
        let q = natural_gradient(&MetricSpec::new(MetricKind::QuasiDiag, 1e-3), &jb, r.view()).unwrap().to_flat();
        let e = natural_gradient(&MetricSpec::new(MetricKind::EntryDiag, 1e-3), &jb, r.view()).unwrap().to_flat();
        assert!(rel(&q, &e) < 1e-12);
        assert!(q.iter().any(|&v| v != 0.0));
    }

    fn kronecker(b: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
        let (bn, an) = (b.nrows(), a.nrows());
        Array2::from_shape_fn((bn * an, bn * an), |(i, j)| b[[i / an, j / an]] * a[[i % an, j % an]])
    }

    fn weight_gradients(fx: &Fixture) -> Vec<Array2<f64>> {
        let n = fx.blocks.n_samples() as f64;
        fx.blocks.transpose_apply((&fx.r / n).view()).layers.into_iter().map(|l| l.weight).collect()
    }

    #[test]
    fn kfac_matches_dense_kronecker_inverse() {
        let fx = fixture(vec![2, 3, 3, 1], Activation::Tanh, 4, 14);
        let rho = 1e-2;
        let grads = weight_gradients(&fx);
        let updates = kfac_gradient(&fx.config, &fx.fcache, &fx.bcache, &grads, rho, false).unwrap();
        let factors = kfac_factors(&fx.config, &fx.fcache, &fx.bcache, false).unwrap();
        for ((b, a), (g, u)) in factors.iter().zip(grads.iter().zip(&updates)) {
            let eye_b = Array2::<f64>::eye(b.nrows()) * rho;
            let eye_a = Array2::<f64>::eye(a.nrows()) * rho;
            let k = kronecker(&(b + &eye_b), &(a + &eye_a));
            let flat: Array1<f64> = g.iter().copied().collect();
            let oracle = dense_solve(&k, &flat);
            let got: Array1<f64> = u.iter().copied().collect();
            assert!(rel(&got, &oracle) < 1e-8);
        }
        // the dual-space solver route gives the same weights
        let d = natural_gradient(&MetricSpec::new(MetricKind::KFac { bias: false }, rho), &fx.blocks, fx.r.view()).unwrap();
        for (layer, u) in d.layers.iter().zip(&updates) {
            let a: Array1<f64> = layer.weight.iter().copied().collect();
            let b: Array1<f64> = u.iter().copied().collect();
            assert!(rel(&a, &b) < 1e-8);
            assert!(layer.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn kfac_bias_extension_matches_primal() {
        let fx = fixture(vec![2, 3, 3, 1], Activation::Tanh, 5, 15);
        let rho = 1e-3;
        let n = fx.blocks.n_samples() as f64;
        let g = fx.blocks.transpose_apply((&fx.r / n).view());
        let grads: Vec<Array2<f64>> = g
            .layers
            .iter()
            .map(|l| {
                let b = l.bias.clone().insert_axis(Axis(1));
                ndarray::concatenate(Axis(1), &[l.weight.view(), b.view()]).unwrap()
            })
            .collect();
        let updates = kfac_gradient(&fx.config, &fx.fcache, &fx.bcache, &grads, rho, true).unwrap();
        let d = natural_gradient(&MetricSpec::new(MetricKind::KFac { bias: true }, rho), &fx.blocks, fx.r.view()).unwrap();
        for (layer, u) in d.layers.iter().zip(&updates) {
            let fan_in = layer.weight.ncols();
            assert!((&layer.weight - &u.slice(s![.., ..fan_in])).iter().all(|v| v.abs() < 1e-8 * (1.0 + v.abs())));
            assert!((&layer.bias - &u.column(fan_in)).iter().all(|v| v.abs() < 1e-8));
        }
    }

    #[test]
    fn kfac_large_damping_limit() {
        let fx = fixture(vec![2, 3, 3, 1], Activation::Tanh, 4, 16);
        let rho = 1e8;
        let grads = weight_gradients(&fx);
        let updates = kfac_gradient(&fx.config, &fx.fcache, &fx.bcache, &grads, rho, false).unwrap();
        for (g, u) in grads.iter().zip(&updates) {
            let scaled = u * (rho * rho);
            assert!((&scaled - g).iter().all(|v| v.abs() < 1e-6 * g.iter().fold(0.0_f64, |m, x| m.max(x.abs()))));
        }
    }

    #[test]
    fn kfac_undamped_singular_input_factor() {
        // M_0 < N with a column that is zero on every sample (like image
        // borders): A*_0 is rank deficient.
        let config = NetworkConfig::new(vec![4, 16, 1], 2.0, 0.0, Activation::Relu).unwrap();
        let params = Params::init(&config, 17);
        let mut x = gaussian(10, 4, 18);
        x.column_mut(3).fill(0.0);
        let (_, fc, bc, _) = linearize(&config, &params, x.view()).unwrap();
        let grads: Vec<Array2<f64>> = vec![Array2::ones((16, 4)), Array2::ones((1, 16))];
        assert!(matches!(kfac_gradient(&config, &fc, &bc, &grads, 0.0, false), Err(Error::SingularMatrix { .. })));
    }

    #[test]
    fn cross_entropy_uniform_softmax_preserves_row_sums() {
        let fx = fixture(vec![3, 10, 3], Activation::Tanh, 3, 19);
        let n = 3;
        let sigma = Array1::from_elem(9, 1.0 / 3.0);
        let y = Array1::from_iter((0..9).map(|i| if i / n == i % n { 1.0 } else { 0.0 }));
        let spec = MetricSpec::exact(0.0).with_rho_tilde(1e-3);
        let ds = cross_entropy_direction(&spec, &fx.blocks, sigma.view(), y.view()).unwrap();
        for s in 0..n {
            let total: f64 = (0..3).map(|k| ds[k * n + s]).sum();
            assert!(total.abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_exact_reduces_to_softmax_form() {
        let fx = fixture(vec![3, 12, 3], Activation::Tanh, 3, 20);
        let (f, _) = crate::network::forward(&fx.config, &fx.params, fx.x.view()).unwrap();
        let sigma = softmax(f.view());
        let y = Array1::from_iter((0..9).map(|i| if i % 3 == i / 3 { 1.0 } else { 0.0 }));
        let rho_tilde = 1e-3;
        let spec = MetricSpec::exact(0.0).with_rho_tilde(rho_tilde);
        let ds = cross_entropy_direction(&spec, &fx.blocks, sigma.view(), y.view()).unwrap();
        let lam = softmax_hessian(sigma.view(), 3);
        let damped = &lam + &(Array2::<f64>::eye(9) * rho_tilde);
        let expected = lam.dot(&dense_solve(&damped, &(&y - &sigma)));
        assert!(rel(&ds, &expected) < 1e-8);
        assert!(matches!(
            cross_entropy_direction(&MetricSpec::exact(0.0), &fx.blocks, sigma.view(), y.view()),
            Err(Error::DampingRequired(_))
        ));
    }

    #[test]
    fn cross_entropy_large_inner_damping_vanishes() {
        let fx = fixture(vec![3, 12, 3], Activation::Tanh, 3, 21);
        let sigma = softmax(gaussian(3, 3, 22).view());
        let y = Array1::from_iter((0..9).map(|i| if i % 3 == i / 3 { 1.0 } else { 0.0 }));
        let rt = 1e8;
        let ds = cross_entropy_direction(&MetricSpec::exact(0.0).with_rho_tilde(rt), &fx.blocks, sigma.view(), y.view()).unwrap();
        let approx = softmax_hessian(sigma.view(), 3).dot(&(&y - &sigma)) / rt;
        assert!(rel(&ds, &approx) < 1e-6);
        assert!(ds.iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn cross_entropy_parameter_direction_matches_function_space() {
        let fx = fixture(vec![3, 12, 12, 3], Activation::Tanh, 3, 23);
        let (f, _) = crate::network::forward(&fx.config, &fx.params, fx.x.view()).unwrap();
        let sigma = softmax(f.view());
        let y = Array1::from_iter((0..9).map(|i| if i % 3 == i / 3 { 1.0 } else { 0.0 }));
        for spec in [MetricSpec::exact(1e-4), MetricSpec::block_diagonal(3, 1e-4)] {
            let spec = spec.with_rho_tilde(1e-2);
            let p = cross_entropy_natural_gradient(&spec, &fx.blocks, sigma.view(), y.view()).unwrap();
            let ds = cross_entropy_direction(&spec, &fx.blocks, sigma.view(), y.view()).unwrap();
            let lam = softmax_hessian(sigma.view(), 3);
            let via = -lam.dot(&fx.blocks.apply(&p));
            assert!(rel(&via, &ds) < 1e-8);
        }
        let _ = flatten_outputs(f.view());
    }
}
