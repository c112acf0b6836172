//! Fully connected network with categorical embeddings and an exponential
//! output link.
//!
//! The input vector of a row is the scaled continuous covariates followed by
//! one embedding vector per categorical covariate. `d` hidden ReLU layers
//! feed a linear head; `mu = exp(head)` is the modelled frequency. Exposure
//! is applied by callers.
//!
//! Parameters live in a flat list of slots so the optimizer and the gradient
//! tape can treat them uniformly:
//!
//! ```text
//! [emb_1 .. emb_T, W_1, b_1, .., W_d, b_d, head_w, head_b]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    exp_link, exp_link_grad, link_clamped, matmul, matmul_nt, matmul_tn_acc, relu, GradTape,
    Matrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Exp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_continuous: usize,
    /// Level count `K_t` of each categorical covariate.
    pub cardinalities: Vec<usize>,
    /// Embedding dimension `b_t` of each categorical covariate.
    pub embedding_dims: Vec<usize>,
    /// Hidden layer widths `q_1..q_d`.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub link: Link,
}

impl Architecture {
    /// Three hidden layers of 32, 16 and 8 units with 5-dimensional
    /// embeddings (fewer for columns with at most 5 levels).
    pub fn standard(n_continuous: usize, cardinalities: Vec<usize>) -> Self {
        Self {
            n_continuous,
            embedding_dims: Vec::new(),
            cardinalities,
            hidden: vec![32, 16, 8],
            activation: Activation::Relu,
            link: Link::Exp,
        }
        .with_embedding_dim(5)
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    /// Embedding dimension `min(b, K - 1)` for a column with `K` levels.
    pub fn with_embedding_dim(mut self, b: usize) -> Self {
        self.embedding_dims = self
            .cardinalities
            .iter()
            .map(|&k| b.min(k.saturating_sub(1)).max(1))
            .collect();
        self
    }

    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    pub fn n_categorical(&self) -> usize {
        self.cardinalities.len()
    }

    /// Width `q_0` of the network input.
    pub fn input_dim(&self) -> usize {
        self.n_continuous + self.embedding_dims.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.hidden.is_empty() {
            problems.push("at least one hidden layer is required".to_string());
        }
        if self.hidden.contains(&0) {
            problems.push("hidden layer widths must be positive".to_string());
        }
        if self.cardinalities.len() != self.embedding_dims.len() {
            problems.push(format!(
                "{} categorical covariates but {} embedding dimensions",
                self.cardinalities.len(),
                self.embedding_dims.len()
            ));
        }
        for (t, (&k, &b)) in self.cardinalities.iter().zip(&self.embedding_dims).enumerate() {
            if b == 0 || b >= k {
                problems.push(format!(
                    "embedding {t}: dimension {b} must satisfy 1 <= b < K = {k}"
                ));
            }
        }
        if self.input_dim() == 0 {
            problems.push("network has no inputs".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(problems.join("; ")))
        }
    }

    pub fn slot_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes: Vec<(usize, usize)> = self
            .cardinalities
            .iter()
            .zip(&self.embedding_dims)
            .map(|(&k, &b)| (k, b))
            .collect();
        let mut prev = self.input_dim();
        for &q in &self.hidden {
            shapes.push((q, prev));
            shapes.push((1, q));
            prev = q;
        }
        shapes.push((1, prev));
        shapes.push((1, 1));
        shapes
    }

    pub fn n_parameters(&self) -> usize {
        self.slot_shapes().iter().map(|(r, c)| r * c).sum()
    }

    pub fn slot_of_embedding(&self, t: usize) -> usize {
        t
    }

    pub fn slot_of_weight(&self, layer: usize) -> usize {
        self.n_categorical() + 2 * layer
    }

    pub fn slot_of_bias(&self, layer: usize) -> usize {
        self.n_categorical() + 2 * layer + 1
    }

    pub fn slot_of_head_weight(&self) -> usize {
        self.n_categorical() + 2 * self.depth()
    }

    pub fn slot_of_head_bias(&self) -> usize {
        self.slot_of_head_weight() + 1
    }

    pub fn zero_tape(&self) -> GradTape {
        GradTape::zeros(self.slot_shapes())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkParams {
    arch: Architecture,
    slots: Vec<Matrix>,
    /// Bumped on every in-place update; forward caches remember it.
    #[serde(skip)]
    version: u64,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.slots == other.slots
    }
}

impl NetworkParams {
    /// Glorot-uniform dense weights (head included), zero biases and
    /// `N(0, 0.1^2)` embeddings.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Normal::new(0.0, 0.1).expect("valid normal");
        let mut slots = Vec::new();
        for (&k, &b) in arch.cardinalities.iter().zip(&arch.embedding_dims) {
            let data = (0..k * b).map(|_| emb.sample(&mut rng)).collect();
            slots.push(Matrix::from_vec(k, b, data)?);
        }
        let mut prev = arch.input_dim();
        for &q in arch.hidden.iter().chain(std::iter::once(&1)) {
            let limit = (6.0 / (prev + q) as f64).sqrt();
            let data = (0..q * prev).map(|_| rng.random_range(-limit..=limit)).collect();
            slots.push(Matrix::from_vec(q, prev, data)?);
            slots.push(Matrix::zeros(1, q));
            prev = q;
        }
        Ok(Self {
            arch: arch.clone(),
            slots,
            version: 0,
        })
    }

    pub fn from_slots(arch: Architecture, slots: Vec<Matrix>) -> Result<Self> {
        arch.validate()?;
        let p = Self {
            arch,
            slots,
            version: 0,
        };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<()> {
        let want = self.arch.slot_shapes();
        let got: Vec<_> = self.slots.iter().map(Matrix::shape).collect();
        if want != got {
            return Err(Error::dim(
                "NetworkParams",
                format!("slot shapes {got:?} do not match architecture {want:?}"),
            ));
        }
        if !self.slots.iter().all(Matrix::is_finite) {
            return Err(Error::Invalid("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn slots(&self) -> &[Matrix] {
        &self.slots
    }

    /// Mutable access to every slot. Invalidates outstanding forward caches.
    pub fn slots_mut(&mut self) -> &mut [Matrix] {
        self.version = self.version.wrapping_add(1);
        &mut self.slots
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn embedding(&self, t: usize) -> &Matrix {
        &self.slots[self.arch.slot_of_embedding(t)]
    }

    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.slots[self.arch.slot_of_weight(layer)]
    }

    pub fn bias(&self, layer: usize) -> &Matrix {
        &self.slots[self.arch.slot_of_bias(layer)]
    }

    pub fn head_weight(&self) -> &Matrix {
        &self.slots[self.arch.slot_of_head_weight()]
    }

    pub fn head_bias(&self) -> f64 {
        self.slots[self.arch.slot_of_head_bias()].get(0, 0)
    }

    pub fn set_head_bias(&mut self, b: f64) {
        let s = self.arch.slot_of_head_bias();
        self.slots_mut()[s].set(0, 0, b);
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().all(Matrix::is_finite)
    }

    /// Assembles the `n x q_0` input matrix from scaled continuous values and
    /// 1-based categorical codes.
    pub fn input_matrix(&self, x_cont: &Matrix, x_cat: &[u32]) -> Result<Matrix> {
        let arch = &self.arch;
        let n = x_cont.rows();
        let t_count = arch.n_categorical();
        if x_cont.cols() != arch.n_continuous || x_cat.len() != n * t_count {
            return Err(Error::dim(
                "forward",
                format!(
                    "got {} continuous columns and {} codes for {n} rows; expected {} and {}",
                    x_cont.cols(),
                    x_cat.len(),
                    arch.n_continuous,
                    n * t_count
                ),
            ));
        }
        let mut x0 = Matrix::zeros(n, arch.input_dim());
        for r in 0..n {
            let row = x0.row_mut(r);
            row[..arch.n_continuous].copy_from_slice(x_cont.row(r));
            let mut off = arch.n_continuous;
            for t in 0..t_count {
                let code = x_cat[r * t_count + t] as usize;
                let k = arch.cardinalities[t];
                if code == 0 || code > k {
                    return Err(Error::dim(
                        "forward",
                        format!("row {r}: code {code} outside 1..={k} for categorical {t}"),
                    ));
                }
                let b = arch.embedding_dims[t];
                row[off..off + b].copy_from_slice(self.embedding(t).row(code - 1));
                off += b;
            }
        }
        Ok(x0)
    }

    /// Batch forward pass returning `mu` per row and the activations needed
    /// by [`backward`].
    pub fn forward(&self, x_cont: &Matrix, x_cat: &[u32]) -> Result<(Vec<f64>, ForwardCache)> {
        let x0 = self.input_matrix(x_cont, x_cat)?;
        let n = x0.rows();
        let mut pre = Vec::with_capacity(self.arch.depth());
        let mut act = Vec::with_capacity(self.arch.depth() + 1);
        act.push(x0);
        for layer in 0..self.arch.depth() {
            let mut z = matmul_nt(act.last().expect("input"), self.weight(layer))?;
            let b = self.bias(layer).as_slice();
            for r in 0..n {
                for (zi, bi) in z.row_mut(r).iter_mut().zip(b) {
                    *zi += bi;
                }
            }
            act.push(relu(&z));
            pre.push(z);
        }
        let head = matmul_nt(act.last().expect("hidden"), self.head_weight())?;
        let hb = self.head_bias();
        let eta: Vec<f64> = head.as_slice().iter().map(|h| h + hb).collect();
        let mu: Vec<f64> = eta.iter().map(|&e| exp_link(e)).collect();
        let cache = ForwardCache {
            version: self.version,
            arch: self.arch.clone(),
            x_cat: x_cat.to_vec(),
            pre,
            act,
            eta,
        };
        Ok((mu, cache))
    }

    /// `mu` for every row of a dataset, without keeping a cache.
    pub fn predict(&self, x_cont: &Matrix, x_cat: &[u32]) -> Result<Vec<f64>> {
        Ok(self.forward(x_cont, x_cat)?.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: NetworkParams = serde_json::from_str(s)?;
        p.arch.validate()?;
        p.check_shapes()?;
        Ok(p)
    }
}

/// Activations retained from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    arch: Architecture,
    x_cat: Vec<u32>,
    /// Hidden pre-activations `z_1..z_d`.
    pre: Vec<Matrix>,
    /// Input followed by the hidden activations.
    act: Vec<Matrix>,
    eta: Vec<f64>,
}

impl ForwardCache {
    pub fn rows(&self) -> usize {
        self.eta.len()
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn hidden_pre_activations(&self) -> &[Matrix] {
        &self.pre
    }

    pub fn clamped_rows(&self) -> usize {
        self.eta.iter().filter(|&&e| link_clamped(e)).count()
    }
}

/// Gradients of a loss with upstream derivatives `dl_dmu` (one per row).
pub fn backward(params: &NetworkParams, cache: &ForwardCache, dl_dmu: &[f64]) -> Result<GradTape> {
    let mut tape = params.arch.zero_tape();
    backward_into(params, cache, dl_dmu, &mut tape)?;
    Ok(tape)
}

/// Like [`backward`] but adds into an existing tape.
pub fn backward_into(
    params: &NetworkParams,
    cache: &ForwardCache,
    dl_dmu: &[f64],
    tape: &mut GradTape,
) -> Result<()> {
    if cache.version != params.version || cache.arch != params.arch {
        return Err(Error::StaleCache(format!(
            "cache from parameter version {}, parameters at {}",
            cache.version, params.version
        )));
    }
    if dl_dmu.len() != cache.rows() {
        return Err(Error::dim(
            "backward",
            format!("{} upstream derivatives for {} rows", dl_dmu.len(), cache.rows()),
        ));
    }
    if tape.shapes() != params.arch.slot_shapes() {
        return Err(Error::dim("backward", "tape does not match architecture"));
    }
    let arch = &params.arch;
    let n = cache.rows();
    let d = arch.depth();

    let g_eta: Vec<f64> = dl_dmu
        .iter()
        .zip(&cache.eta)
        .map(|(&g, &e)| g * exp_link_grad(e))
        .collect();
    if g_eta.iter().all(|&g| g == 0.0) {
        return Ok(());
    }

    let g_head = Matrix::from_vec(n, 1, g_eta)?;
    matmul_tn_acc(tape.slot_mut(arch.slot_of_head_weight()), &g_head, &cache.act[d])?;
    let hb: f64 = g_head.as_slice().iter().sum();
    tape.slot_mut(arch.slot_of_head_bias()).as_mut_slice()[0] += hb;

    // delta for the top hidden layer
    let mut delta = matmul(&g_head, params.head_weight())?;
    for layer in (0..d).rev() {
        mask_relu(&mut delta, &cache.pre[layer]);
        matmul_tn_acc(tape.slot_mut(arch.slot_of_weight(layer)), &delta, &cache.act[layer])?;
        let bias = tape.slot_mut(arch.slot_of_bias(layer)).as_mut_slice();
        for r in 0..n {
            for (b, g) in bias.iter_mut().zip(delta.row(r)) {
                *b += g;
            }
        }
        if layer > 0 || arch.n_categorical() > 0 {
            delta = matmul(&delta, params.weight(layer))?;
        }
    }

    let t_count = arch.n_categorical();
    if t_count > 0 {
        for r in 0..n {
            let g = delta.row(r);
            let mut off = arch.n_continuous;
            for t in 0..t_count {
                let b = arch.embedding_dims[t];
                let code = cache.x_cat[r * t_count + t] as usize;
                let slot = tape.slot_mut(arch.slot_of_embedding(t));
                for (e, gv) in slot.row_mut(code - 1).iter_mut().zip(&g[off..off + b]) {
                    *e += gv;
                }
                off += b;
            }
        }
    }
    Ok(())
}

fn mask_relu(delta: &mut Matrix, pre: &Matrix) {
    for (g, &z) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Architecture {
        Architecture {
            n_continuous: 3,
            cardinalities: vec![6, 4],
            embedding_dims: vec![2, 3],
            hidden: vec![5, 4],
            activation: Activation::Relu,
            link: Link::Exp,
        }
    }

    fn inputs() -> (Matrix, Vec<u32>) {
        let x = Matrix::from_rows(&[vec![0.1, 0.5, 0.9], vec![0.7, 0.2, 0.4]]).unwrap();
        (x, vec![1, 4, 6, 2])
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = NetworkParams::init(&arch(), 3).unwrap();
        let b = NetworkParams::init(&arch(), 3).unwrap();
        assert_eq!(a, b);
        for layer in 0..2 {
            assert!(a.bias(layer).as_slice().iter().all(|&v| v == 0.0));
        }
        assert_eq!(a.head_bias(), 0.0);
        assert_ne!(a, NetworkParams::init(&arch(), 4).unwrap());
    }

    #[test]
    fn architecture_validation_lists_every_problem() {
        let mut bad = arch();
        bad.hidden = vec![];
        bad.embedding_dims = vec![6, 3];
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("hidden layer"));
        assert!(msg.contains("embedding 0"));
    }

    fn constant(beta: f64) -> NetworkParams {
        let mut p = NetworkParams::init(&arch(), 0).unwrap();
        for s in p.slots_mut() {
            s.fill(0.0);
        }
        p.set_head_bias(beta);
        p
    }

    #[test]
    fn constant_network_outputs_exp_of_head_bias() {
        let (x, c) = inputs();
        let mu = constant(-1.3).predict(&x, &c).unwrap();
        assert!(mu.iter().all(|&m| (m - (-1.3f64).exp()).abs() < 1e-15));
        let mu = constant(0.0).predict(&x, &c).unwrap();
        assert_eq!(mu, vec![1.0, 1.0]);
    }

    #[test]
    fn constant_network_head_bias_gradient_is_mu() {
        let p = constant(0.4);
        let (x, c) = inputs();
        let (mu, cache) = p.forward(&x, &c).unwrap();
        let tape = backward(&p, &cache, &[1.0, 0.0]).unwrap();
        let g = tape.slot(p.arch().slot_of_head_bias()).get(0, 0);
        assert!((g - mu[0]).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_tape() {
        let p = NetworkParams::init(&arch(), 1).unwrap();
        let (x, c) = inputs();
        let (_, cache) = p.forward(&x, &c).unwrap();
        assert!(backward(&p, &cache, &[0.0, 0.0]).unwrap().is_zero());
    }

    #[test]
    fn unused_embedding_rows_get_no_gradient() {
        let p = NetworkParams::init(&arch(), 2).unwrap();
        let (x, c) = inputs();
        let (_, cache) = p.forward(&x, &c).unwrap();
        let tape = backward(&p, &cache, &[0.3, -1.1]).unwrap();
        let e0 = tape.slot(0);
        for level in [1usize, 2, 3, 4] {
            assert!(e0.row(level).iter().all(|&v| v == 0.0));
        }
        let e1 = tape.slot(1);
        for level in [0usize, 2] {
            assert!(e1.row(level).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = NetworkParams::init(&arch(), 2).unwrap();
        let (x, c) = inputs();
        let (_, cache) = p.forward(&x, &c).unwrap();
        p.slots_mut()[0].set(0, 0, 0.5);
        assert!(matches!(
            backward(&p, &cache, &[1.0, 1.0]),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn bad_codes_and_shapes_are_errors() {
        let p = NetworkParams::init(&arch(), 2).unwrap();
        let (x, _) = inputs();
        assert!(p.forward(&x, &[0, 1, 1, 1]).is_err());
        assert!(p.forward(&x, &[7, 1, 1, 1]).is_err());
        assert!(p.forward(&x, &[1, 1]).is_err());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let p = NetworkParams::init(&arch(), 9).unwrap();
        let back = NetworkParams::from_json(&p.to_json().unwrap()).unwrap();
        for (a, b) in p.slots().iter().zip(back.slots()) {
            let ab: Vec<u64> = a.as_slice().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(p.arch(), back.arch());
    }
}
