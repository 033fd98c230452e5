//! Fully-connected networks in NTK parameterization.
//!
//! Layer `l` computes `u_l = (σ_w/√M_{l-1}) W_l h_{l-1} + σ_b b_l`,
//! `h_l = φ(u_l)`, and the network output is `f = u_L`. Jacobians are kept in
//! factored form: the derivative of output `k` on sample `n` with respect to
//! `W_{l,ij}` is `(σ_w/√M_{l-1}) δ^{(k)}_{l,i}(x_n) h_{l-1,j}(x_n)`, so the
//! per-layer blocks never need to be materialized at large width.
//!
//! Vectors indexed by (output, sample) pairs are laid out output-major:
//! entry `k·N + n`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    /// `φ_s(x) = x` for `x ≥ −s`, `−s` otherwise.
    ShiftedRelu(f64),
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::ShiftedRelu(s) => x.max(-s),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// The ReLU derivative at the kink is 0, matching the indicator
    /// `1{φ'(u) ≠ 0}` in the unit-wise analysis.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::ShiftedRelu(s) => {
                if x > -s {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    /// Points where φ or φ' is not smooth.
    pub fn kinks(self) -> Vec<f64> {
        match self {
            Activation::Relu => vec![0.0],
            Activation::ShiftedRelu(s) => vec![-s],
            Activation::Tanh | Activation::Identity => Vec::new(),
        }
    }

    pub fn name(self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::ShiftedRelu(s) => format!("shifted_relu({s})"),
            Activation::Tanh => "tanh".into(),
            Activation::Identity => "identity".into(),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            _ => {
                if let Some(rest) = s.strip_prefix("shifted_relu") {
                    let shift = rest
                        .trim_matches(|c| c == '(' || c == ')' || c == ':' || c == '=')
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidConfig(format!("bad shifted_relu shift in `{s}`")))?;
                    Ok(Activation::ShiftedRelu(shift))
                } else {
                    Err(Error::InvalidConfig(format!("unknown activation `{s}`")))
                }
            }
        }
    }
}

/// Architecture: widths `M_0..M_L` (with `M_L = C`), variances and activation.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    widths: Vec<usize>,
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    pub activation: Activation,
}

impl NetworkConfig {
    pub fn new(widths: Vec<usize>, sigma_w2: f64, sigma_b2: f64, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidConfig("need at least one weight layer".into()));
        }
        if let Some(l) = widths.iter().position(|&m| m == 0) {
            return Err(Error::InvalidConfig(format!("width M_{l} must be >= 1")));
        }
        if !(sigma_w2 > 0.0 && sigma_w2.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_w2 must be > 0, got {sigma_w2}")));
        }
        if !(sigma_b2 >= 0.0 && sigma_b2.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_b2 must be >= 0, got {sigma_b2}")));
        }
        Ok(Self { widths, sigma_w2, sigma_b2, activation })
    }

    /// `depth` weight layers with every hidden layer `width` units wide.
    pub fn uniform(
        input_dim: usize,
        width: usize,
        depth: usize,
        outputs: usize,
        sigma_w2: f64,
        sigma_b2: f64,
        activation: Activation,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidConfig("depth must be >= 1".into()));
        }
        let mut widths = vec![input_dim];
        widths.extend(std::iter::repeat_n(width, depth - 1));
        widths.push(outputs);
        Self::new(widths, sigma_w2, sigma_b2, activation)
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// `M_l` for `l = 0..=L`.
    pub fn width(&self, l: usize) -> usize {
        self.widths[l]
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn outputs(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn sigma_w(&self) -> f64 {
        self.sigma_w2.sqrt()
    }

    pub fn sigma_b(&self) -> f64 {
        self.sigma_b2.sqrt()
    }

    /// `σ_w/√M_{l-1}` for layer `l` (1-based).
    pub fn weight_scale(&self, l: usize) -> f64 {
        self.sigma_w() / (self.widths[l - 1] as f64).sqrt()
    }

    /// `M_l (M_{l-1} + 1)`.
    pub fn layer_params(&self, l: usize) -> usize {
        self.widths[l] * (self.widths[l - 1] + 1)
    }

    pub fn n_params(&self) -> usize {
        (1..=self.depth()).map(|l| self.layer_params(l)).sum()
    }

    /// Offset of layer `l` in the flat parameter ordering.
    pub fn layer_offset(&self, l: usize) -> usize {
        (1..l).map(|k| self.layer_params(k)).sum()
    }
}

/// Weights and bias of one layer. Also used for parameter-space directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `M_l × M_{l-1}`
    pub weight: Array2<f64>,
    /// `M_l`
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Self { weight: Array2::zeros((fan_out, fan_in)), bias: Array1::zeros(fan_out) }
    }

    fn dot(&self, other: &Layer) -> f64 {
        (&self.weight * &other.weight).sum() + self.bias.dot(&other.bias)
    }
}

/// Parameters `θ = (W_l, b_l)_{l=1..L}`; the same container holds tangent
/// vectors such as natural-gradient directions.
///
/// Flat ordering: layer by layer, `W_l` row-major followed by `b_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Layer>,
}

impl Params {
    pub fn zeros(config: &NetworkConfig) -> Self {
        let layers = (1..=config.depth())
            .map(|l| Layer::zeros(config.width(l), config.width(l - 1)))
            .collect();
        Self { layers }
    }

    /// I.i.d. standard normal entries, deterministic in `seed`.
    pub fn init(config: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        for layer in &mut p.layers {
            layer.weight.iter_mut().for_each(|w| *w = StandardNormal.sample(&mut rng));
            layer.bias.iter_mut().for_each(|b| *b = StandardNormal.sample(&mut rng));
        }
        p
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Layer `l`, 1-based.
    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l - 1]
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn check_shape(&self, config: &NetworkConfig) -> Result<()> {
        if self.depth() != config.depth() {
            return Err(Error::ShapeMismatch(format!(
                "params have {} layers, config has {}",
                self.depth(),
                config.depth()
            )));
        }
        for l in 1..=config.depth() {
            let layer = self.layer(l);
            if layer.weight.dim() != (config.width(l), config.width(l - 1)) || layer.bias.len() != config.width(l) {
                return Err(Error::ShapeMismatch(format!("layer {l} shape does not match config")));
            }
        }
        Ok(())
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(alpha, &b.weight);
            a.bias.scaled_add(alpha, &b.bias);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for l in &mut self.layers {
            l.weight *= alpha;
            l.bias *= alpha;
        }
    }

    pub fn dot(&self, other: &Params) -> f64 {
        self.layers.iter().zip(&other.layers).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn difference(&self, other: &Params) -> Params {
        let mut d = self.clone();
        d.axpy(-1.0, other);
        d
    }

    pub fn to_flat(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        Array1::from(out)
    }

    pub fn from_flat(config: &NetworkConfig, flat: ArrayView1<'_, f64>) -> Result<Self> {
        if flat.len() != config.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} entries, network has {}",
                flat.len(),
                config.n_params()
            )));
        }
        let mut p = Self::zeros(config);
        let mut offset = 0;
        for layer in &mut p.layers {
            let nw = layer.weight.len();
            layer.weight.iter_mut().zip(flat.slice(s![offset..offset + nw])).for_each(|(a, b)| *a = *b);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.assign(&flat.slice(s![offset..offset + nb]));
            offset += nb;
        }
        Ok(p)
    }
}

/// Pre-activations `u_l` and activations `h_l` for every layer.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `pre[l-1] = u_l`, `N × M_l`, `l = 1..=L`
    pre: Vec<Array2<f64>>,
    /// `post[l] = h_l`, `N × M_l`, `l = 0..L` with `h_0 = X`
    post: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn pre(&self, l: usize) -> &Array2<f64> {
        &self.pre[l - 1]
    }

    /// `h_l` for `l = 0..L`.
    pub fn post(&self, l: usize) -> &Array2<f64> {
        &self.post[l]
    }

    pub fn outputs(&self) -> &Array2<f64> {
        self.pre.last().unwrap()
    }

    pub fn n_samples(&self) -> usize {
        self.post[0].nrows()
    }

    pub fn depth(&self) -> usize {
        self.pre.len()
    }
}

/// Backpropagated signals `δ^{(k)}_l = ∂f_k/∂u_l`.
#[derive(Debug, Clone)]
pub struct BackwardCache {
    /// `deltas[l-1][k]` is `N × M_l`
    deltas: Vec<Vec<Array2<f64>>>,
}

impl BackwardCache {
    pub fn delta(&self, l: usize, k: usize) -> &Array2<f64> {
        &self.deltas[l - 1][k]
    }

    pub fn n_outputs(&self) -> usize {
        self.deltas[0].len()
    }
}

/// Evaluates the network on the rows of `x`. Returns outputs `N × C`.
pub fn forward(config: &NetworkConfig, params: &Params, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
    if x.ncols() != config.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "inputs have {} columns, network expects {}",
            x.ncols(),
            config.input_dim()
        )));
    }
    params.check_shape(config)?;
    let act = config.activation;
    let sb = config.sigma_b();
    let mut pre = Vec::with_capacity(config.depth());
    let mut post = Vec::with_capacity(config.depth());
    post.push(x.to_owned());
    for l in 1..=config.depth() {
        let layer = params.layer(l);
        let mut u = post[l - 1].dot(&layer.weight.t());
        u *= config.weight_scale(l);
        if sb != 0.0 {
            u += &(&layer.bias * sb);
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: l });
        }
        if l < config.depth() {
            post.push(u.mapv(|v| act.apply(v)));
        }
        pre.push(u);
    }
    let cache = ForwardCache { pre, post };
    Ok((cache.outputs().clone(), cache))
}

/// `δ^{(k)}_L = e_k`, `δ^{(k)}_l = φ'(u_l) ⊙ (δ^{(k)}_{l+1} W_{l+1}) · σ_w/√M_l`.
pub fn backward_deltas(config: &NetworkConfig, params: &Params, cache: &ForwardCache) -> BackwardCache {
    let depth = config.depth();
    let n = cache.n_samples();
    let c = config.outputs();
    let act = config.activation;
    let mut deltas: Vec<Vec<Array2<f64>>> = vec![Vec::new(); depth];
    deltas[depth - 1] = (0..c)
        .map(|k| {
            let mut d = Array2::zeros((n, c));
            d.column_mut(k).fill(1.0);
            d
        })
        .collect();
    let derivs: Vec<Array2<f64>> = (1..depth).map(|l| cache.pre(l).mapv(|v| act.derivative(v))).collect();
    for l in (1..depth).rev() {
        let w_next = &params.layer(l + 1).weight;
        let scale = config.weight_scale(l + 1);
        let next: Vec<Array2<f64>> = deltas[l]
            .iter()
            .map(|d| {
                let mut back = d.dot(w_next);
                Zip::from(&mut back).and(&derivs[l - 1]).for_each(|b, &g| *b *= g * scale);
                back
            })
            .collect();
        deltas[l - 1] = next;
    }
    BackwardCache { deltas }
}

/// Factored Jacobian `J = ∇_θ f` (`CN × P`) of a network on `N` samples.
#[derive(Debug, Clone)]
pub struct JacobianBlocks {
    /// `h_{l-1}` per layer (`inputs[l-1]`)
    inputs: Vec<Array2<f64>>,
    /// `δ^{(k)}_l` per layer and output
    deltas: Vec<Vec<Array2<f64>>>,
    weight_scales: Vec<f64>,
    sigma_b: f64,
    widths: Vec<usize>,
}

pub fn jacobian_blocks(config: &NetworkConfig, fcache: &ForwardCache, bcache: &BackwardCache) -> JacobianBlocks {
    let depth = config.depth();
    JacobianBlocks {
        inputs: (0..depth).map(|l| fcache.post(l).clone()).collect(),
        deltas: bcache.deltas.clone(),
        weight_scales: (1..=depth).map(|l| config.weight_scale(l)).collect(),
        sigma_b: config.sigma_b(),
        widths: config.widths().to_vec(),
    }
}

impl JacobianBlocks {
    pub fn n_samples(&self) -> usize {
        self.inputs[0].nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.deltas[0].len()
    }

    /// `CN`
    pub fn rows(&self) -> usize {
        self.n_samples() * self.n_outputs()
    }

    pub fn depth(&self) -> usize {
        self.inputs.len()
    }

    pub fn width(&self, l: usize) -> usize {
        self.widths[l]
    }

    pub fn n_params(&self) -> usize {
        (1..=self.depth()).map(|l| self.layer_params(l)).sum()
    }

    pub fn layer_params(&self, l: usize) -> usize {
        self.widths[l] * (self.widths[l - 1] + 1)
    }

    /// `h_{l-1}`, `N × M_{l-1}`.
    pub fn layer_input(&self, l: usize) -> &Array2<f64> {
        &self.inputs[l - 1]
    }

    /// `δ^{(k)}_l`, `N × M_l`.
    pub fn delta(&self, l: usize, k: usize) -> &Array2<f64> {
        &self.deltas[l - 1][k]
    }

    pub fn weight_scale(&self, l: usize) -> f64 {
        self.weight_scales[l - 1]
    }

    pub fn sigma_b(&self) -> f64 {
        self.sigma_b
    }

    /// `δ_l` stacked over outputs: `CN × M_l`, row `k·N + n`.
    pub fn stacked_delta(&self, l: usize) -> Array2<f64> {
        let parts: Vec<ArrayView2<'_, f64>> = self.deltas[l - 1].iter().map(|d| d.view()).collect();
        ndarray::concatenate(Axis(0), &parts).expect("delta blocks share a width")
    }

    /// Gram of the per-unit input features `[c·h_{l-1}(x_n); σ_b]`:
    /// `c² h hᵀ + σ_b² 11ᵀ` (`N × N`).
    pub fn feature_gram(&self, l: usize) -> Array2<f64> {
        let h = self.layer_input(l);
        let c = self.weight_scale(l);
        let mut g = h.dot(&h.t());
        g *= c * c;
        g += self.sigma_b * self.sigma_b;
        g
    }

    /// Tiles an `N × N` sample kernel to `CN × CN` (`11ᵀ ⊗ K`).
    pub fn tile(&self, k: &Array2<f64>) -> Array2<f64> {
        let n = self.n_samples();
        let c = self.n_outputs();
        Array2::from_shape_fn((c * n, c * n), |(i, j)| k[[i % n, j % n]])
    }

    /// `∇_{θ_l} f ∇_{θ_l} fᵀ` (unnormalized), `CN × CN`.
    pub fn layer_gram(&self, l: usize) -> Array2<f64> {
        let d = self.stacked_delta(l);
        let mut g = d.dot(&d.t());
        let feat = self.feature_gram(l);
        let n = self.n_samples();
        Zip::indexed(&mut g).for_each(|(i, j), v| *v *= feat[[i % n, j % n]]);
        g
    }

    /// `J Jᵀ` (unnormalized).
    pub fn gram(&self) -> Array2<f64> {
        let mut g = self.layer_gram(1);
        for l in 2..=self.depth() {
            g += &self.layer_gram(l);
        }
        g
    }

    /// `∇_{θ_l} f · v_l`, a `CN` vector.
    pub fn apply_layer(&self, l: usize, v: &Layer) -> Array1<f64> {
        let n = self.n_samples();
        let c = self.n_outputs();
        // rows: c·W h_n + σ_b b, the layer's pre-activation response
        let mut t = self.layer_input(l).dot(&v.weight.t());
        t *= self.weight_scale(l);
        if self.sigma_b != 0.0 {
            t += &(&v.bias * self.sigma_b);
        }
        let mut out = Array1::zeros(c * n);
        for k in 0..c {
            let d = self.delta(l, k);
            let mut seg = out.slice_mut(s![k * n..(k + 1) * n]);
            Zip::from(&mut seg).and(d.rows()).and(t.rows()).for_each(|o, dr, tr| *o = dr.dot(&tr));
        }
        out
    }

    /// `J v`.
    pub fn apply(&self, v: &Params) -> Array1<f64> {
        let mut out = self.apply_layer(1, v.layer(1));
        for l in 2..=self.depth() {
            out += &self.apply_layer(l, v.layer(l));
        }
        out
    }

    /// `∇_{θ_l} fᵀ r`.
    pub fn transpose_apply_layer(&self, l: usize, r: ArrayView1<'_, f64>) -> Layer {
        let n = self.n_samples();
        let h = self.layer_input(l);
        let mut weight = Array2::zeros((self.widths[l], self.widths[l - 1]));
        let mut bias = Array1::zeros(self.widths[l]);
        for k in 0..self.n_outputs() {
            let rk = r.slice(s![k * n..(k + 1) * n]);
            let mut dr = self.delta(l, k).clone();
            dr.axis_iter_mut(Axis(0)).zip(rk.iter()).for_each(|(mut row, &x)| row *= x);
            weight += &dr.t().dot(h);
            bias += &dr.sum_axis(Axis(0));
        }
        weight *= self.weight_scale(l);
        bias *= self.sigma_b;
        Layer { weight, bias }
    }

    /// `Jᵀ r`.
    pub fn transpose_apply(&self, r: ArrayView1<'_, f64>) -> Params {
        Params { layers: (1..=self.depth()).map(|l| self.transpose_apply_layer(l, r)).collect() }
    }

    /// Dense `∇_{θ_l} f`, `CN × M_l(M_{l-1}+1)` in flat ordering.
    pub fn layer_dense(&self, l: usize) -> Array2<f64> {
        let n = self.n_samples();
        let (fan_out, fan_in) = (self.widths[l], self.widths[l - 1]);
        let nw = fan_out * fan_in;
        let c = self.weight_scale(l);
        let h = self.layer_input(l);
        let mut out = Array2::zeros((self.rows(), self.layer_params(l)));
        for k in 0..self.n_outputs() {
            let d = self.delta(l, k);
            for s in 0..n {
                let mut row = out.row_mut(k * n + s);
                for i in 0..fan_out {
                    let di = d[[s, i]];
                    for j in 0..fan_in {
                        row[i * fan_in + j] = c * di * h[[s, j]];
                    }
                    row[nw + i] = self.sigma_b * di;
                }
            }
        }
        out
    }

    /// Dense `J`, `CN × P`. Only sensible for small networks.
    pub fn dense(&self) -> Array2<f64> {
        let blocks: Vec<Array2<f64>> = (1..=self.depth()).map(|l| self.layer_dense(l)).collect();
        let views: Vec<ArrayView2<'_, f64>> = blocks.iter().map(|b| b.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("layer blocks share row count")
    }

    /// `∇_{θ^{(l)}_i} f`, `CN × (M_{l-1}+1)`; columns are `W_{l,i·}` then `b_{l,i}`.
    pub fn unit_slice(&self, l: usize, i: usize) -> Array2<f64> {
        let n = self.n_samples();
        let fan_in = self.widths[l - 1];
        let c = self.weight_scale(l);
        let h = self.layer_input(l);
        let mut out = Array2::zeros((self.rows(), fan_in + 1));
        for k in 0..self.n_outputs() {
            let d = self.delta(l, k);
            for s in 0..n {
                let di = d[[s, i]];
                let mut row = out.row_mut(k * n + s);
                for j in 0..fan_in {
                    row[j] = c * di * h[[s, j]];
                }
                row[fan_in] = self.sigma_b * di;
            }
        }
        out
    }

    /// Flat indices of the parameters of unit `i` in layer `l`
    /// (the `M_{l-1}` weights then the bias).
    pub fn unit_indices(&self, l: usize, i: usize) -> Vec<usize> {
        let offset: usize = (1..l).map(|k| self.layer_params(k)).sum();
        let fan_in = self.widths[l - 1];
        let nw = self.widths[l] * fan_in;
        let mut idx: Vec<usize> = (0..fan_in).map(|j| offset + i * fan_in + j).collect();
        idx.push(offset + nw + i);
        idx
    }
}

/// Finite-width kernels on the training samples.
#[derive(Debug, Clone)]
pub struct EmpiricalKernels {
    /// `Θ = J Jᵀ / N`, `CN × CN`
    pub theta: Array2<f64>,
    /// `Θ_l = ∇_{θ_l} f ∇_{θ_l} fᵀ / N`
    pub theta_layers: Vec<Array2<f64>>,
    /// `A_l = h_l h_lᵀ / M_l` for `l = 0..L`
    pub a: Vec<Array2<f64>>,
    /// `B_l = δ_l δ_lᵀ` for `l = 1..=L`, one matrix per output (`b[l-1][k]`)
    pub b: Vec<Vec<Array2<f64>>>,
}

/// With these normalizations `N·Θ_l = I_C ⊗ (σ_w² B_l ⊙ A_{l-1} + σ_b² B_l)`
/// on the output-diagonal blocks.
pub fn empirical_kernels(blocks: &JacobianBlocks) -> EmpiricalKernels {
    let n = blocks.n_samples() as f64;
    let theta_layers: Vec<Array2<f64>> = (1..=blocks.depth()).map(|l| blocks.layer_gram(l) / n).collect();
    let mut theta = theta_layers[0].clone();
    for t in &theta_layers[1..] {
        theta += t;
    }
    let a = (1..=blocks.depth())
        .map(|l| {
            let h = blocks.layer_input(l);
            h.dot(&h.t()) / h.ncols() as f64
        })
        .collect();
    let b = (1..=blocks.depth())
        .map(|l| {
            (0..blocks.n_outputs())
                .map(|k| {
                    let d = blocks.delta(l, k);
                    d.dot(&d.t())
                })
                .collect()
        })
        .collect();
    EmpiricalKernels { theta, theta_layers, a, b }
}

/// Concatenates an `N × C` output matrix into an output-major `CN` vector.
pub fn flatten_outputs(f: ArrayView2<'_, f64>) -> Array1<f64> {
    f.t().iter().copied().collect()
}

/// Inverse of [`flatten_outputs`].
pub fn unflatten_outputs(v: ArrayView1<'_, f64>, n: usize) -> Array2<f64> {
    let c = v.len() / n;
    Array2::from_shape_fn((n, c), |(s, k)| v[k * n + s])
}

/// Convenience: forward, backward and Jacobian blocks in one call.
pub fn linearize(
    config: &NetworkConfig,
    params: &Params,
    x: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, ForwardCache, BackwardCache, JacobianBlocks)> {
    let (f, fc) = forward(config, params, x)?;
    let bc = backward_deltas(config, params, &fc);
    let jb = jacobian_blocks(config, &fc, &bc);
    Ok((f, fc, bc, jb))
}
