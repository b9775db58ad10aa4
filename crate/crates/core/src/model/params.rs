use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Standard deviation of the normal initializer for weights and embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum InitKind {
    Normal,
    Ones,
    Zeros,
}

/// Ordered list of tensor names, shapes and initializers for a config.
pub(crate) fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let d = config.d_model;
    let v = config.vocab_size;
    let f = config.mlp_dim();
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d], InitKind::Normal),
        ("pos_emb".to_string(), vec![config.context_len, d], InitKind::Normal),
    ];
    for l in 0..config.n_layers {
        let p = |s: &str| format!("h{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d], InitKind::Ones),
            (p("ln1.bias"), vec![d], InitKind::Zeros),
            (p("attn.w_qkv"), vec![d, 3 * d], InitKind::Normal),
            (p("attn.w_out"), vec![d, d], InitKind::Normal),
            (p("attn.b_out"), vec![d], InitKind::Zeros),
            (p("ln2.gain"), vec![d], InitKind::Ones),
            (p("ln2.bias"), vec![d], InitKind::Zeros),
            (p("mlp.w_in"), vec![d, f], InitKind::Normal),
            (p("mlp.b_in"), vec![f], InitKind::Zeros),
            (p("mlp.w_out"), vec![f, d], InitKind::Normal),
            (p("mlp.b_out"), vec![d], InitKind::Zeros),
        ]);
    }
    out.extend([
        ("ln_f.gain".to_string(), vec![d], InitKind::Ones),
        ("ln_f.bias".to_string(), vec![d], InitKind::Zeros),
        ("head.w".to_string(), vec![d, v], InitKind::Normal),
        ("head.b".to_string(), vec![v], InitKind::Zeros),
    ]);
    out
}

/// Tensors per transformer block in [`layout`].
pub(crate) const PER_LAYER: usize = 11;

/// Index helpers into the ordered tensor list.
pub(crate) mod idx {
    use super::PER_LAYER;
    pub const TOK_EMB: usize = 0;
    pub const POS_EMB: usize = 1;
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const W_QKV: usize = 2;
    pub const W_ATT_OUT: usize = 3;
    pub const B_ATT_OUT: usize = 4;
    pub const LN2_G: usize = 5;
    pub const LN2_B: usize = 6;
    pub const W_IN: usize = 7;
    pub const B_IN: usize = 8;
    pub const W_MLP_OUT: usize = 9;
    pub const B_MLP_OUT: usize = 10;

    pub fn layer(l: usize, which: usize) -> usize {
        2 + l * PER_LAYER + which
    }

    pub fn final_base(n_layers: usize) -> usize {
        2 + n_layers * PER_LAYER
    }
}

/// All learnable weights of the transformer, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    /// Incremented by every optimizer step.
    pub version: u64,
    /// Identifier of the run that produced these weights.
    pub run_id: String,
}

impl ParameterSet {
    /// Seeded initialization: normal(0, 0.02) weights, unit gains, zero biases.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, kind) in layout(config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match kind {
                InitKind::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                InitKind::Ones => vec![1.0; n],
                InitKind::Zeros => vec![0.0; n],
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            run_id: format!("init-{}", config.config_hash()),
            config: config.clone(),
            names,
            tensors,
            version: 0,
        })
    }

    /// Assembles a parameter set from named tensors, checking them against the config layout.
    pub fn from_tensors(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != named.len() {
            return Err(Error::Input(format!(
                "expected {} tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((exp_name, exp_shape, _), (name, tensor)) in expected.into_iter().zip(named) {
            if exp_name != name {
                return Err(Error::Input(format!(
                    "tensor order mismatch: expected {exp_name}, found {name}"
                )));
            }
            if tensor.shape() != exp_shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: exp_shape,
                    found: tensor.shape().to_vec(),
                });
            }
            tensor.check_finite(&name)?;
            names.push(name);
            tensors.push(tensor);
        }
        Ok(Self {
            run_id: format!("init-{}", config.config_hash()),
            config,
            names,
            tensors,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_hash(&self) -> String {
        self.config.config_hash()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All scalars concatenated in tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Copy of `self` with scalars replaced from a flat vector in tensor order.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Dimension(format!(
                "flat vector of {} values for {} parameters",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in &mut out.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }
}

/// Gradients aligned with the tensors of a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x *= factor;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}
