//! Spatial feature extraction: a stack of graph-convolution layers applying
//! `activation(A_hat · H · W)` per time step with shared weights.

use crate::nncore::gradcheck::GradCheckCase;
use crate::nncore::{
    xavier_uniform, BoundParams, Graph, NnError, ParamKind, ParameterStore, Tensor, Var,
};
use crate::scalar::Scalar;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var, NnError> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcnConfig {
    pub in_dim: usize,
    /// Output width per layer; the last entry is the model width handed to
    /// the temporal stack.
    pub hidden_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Per-layer additive bias, off by default (the propagation rule has none).
    #[serde(default)]
    pub bias: bool,
}

impl GcnConfig {
    /// Default 3-layer stack `[64, 64, d_model]` with relu, relu, identity.
    pub fn new(in_dim: usize, d_model: usize) -> Self {
        Self {
            in_dim,
            hidden_dims: vec![64, 64, d_model],
            activations: vec![Activation::Relu, Activation::Relu, Activation::Identity],
            bias: false,
        }
    }

    pub fn layers(&self) -> usize {
        self.hidden_dims.len()
    }

    pub fn d_model(&self) -> usize {
        *self.hidden_dims.last().expect("at least one layer")
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.hidden_dims.is_empty() {
            return Err(NnError::InvalidArgument {
                op: "gcn_config",
                detail: "at least one layer required".into(),
            });
        }
        if self.in_dim == 0 || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(NnError::InvalidArgument {
                op: "gcn_config",
                detail: format!("zero dimension in {:?} (in_dim {})", self.hidden_dims, self.in_dim),
            });
        }
        if self.activations.len() != self.hidden_dims.len() {
            return Err(NnError::InvalidArgument {
                op: "gcn_config",
                detail: format!(
                    "{} activations for {} layers",
                    self.activations.len(),
                    self.hidden_dims.len()
                ),
            });
        }
        Ok(())
    }
}

pub fn param_name(layer: usize, which: &str) -> String {
    format!("gcn.layer{layer}.{which}")
}

/// Register the per-layer weights (and optional biases) into a store.
pub fn register_params<T: Scalar>(
    store: &mut ParameterStore<T>,
    cfg: &GcnConfig,
    rng: &mut ChaCha8Rng,
) {
    let mut fan_in = cfg.in_dim;
    for (l, &fan_out) in cfg.hidden_dims.iter().enumerate() {
        store.register(
            &param_name(l, "weight"),
            xavier_uniform([fan_in, fan_out], rng),
            ParamKind::Weight,
        );
        if cfg.bias {
            store.register(&param_name(l, "bias"), Tensor::zeros([fan_out]), ParamKind::Bias);
        }
        fan_in = fan_out;
    }
}

/// One graph-convolution layer `activation(A_hat · H · W)`.
///
/// `h` is `[N, F_in]` for a single step or `[B, N, F_in]` batched; `a_hat`
/// is the shared `[N, N]` normalized adjacency.
pub fn gcn_layer<T: Scalar>(
    g: &mut Graph<T>,
    a_hat: Var,
    h: Var,
    w: Var,
    bias: Option<Var>,
    activation: Activation,
) -> Result<Var, NnError> {
    let rank = g.shape(h).len();
    let pre = match rank {
        2 => {
            let mixed = g.matmul(a_hat, h)?;
            g.matmul(mixed, w)?
        }
        3 => {
            let (batch, n) = (g.shape(h)[0], g.shape(h)[1]);
            let f_in = g.shape(h)[2];
            let f_out = g.shape(w)[1];
            let mixed = g.matmul_lshared(a_hat, h)?;
            let flat = g.reshape(mixed, &[batch * n, f_in])?;
            let proj = g.matmul(flat, w)?;
            g.reshape(proj, &[batch, n, f_out])?
        }
        r => {
            return Err(NnError::ShapeMismatch {
                op: "gcn_layer",
                detail: format!("features must be rank 2 or 3, got rank {r}"),
            })
        }
    };
    let pre = match bias {
        Some(b) => g.add(pre, b)?,
        None => pre,
    };
    activation.apply(g, pre)
}

/// Full stack over one step (`[N, K]`) or a batch of steps (`[B, N, K]`).
pub fn gcn_forward<T: Scalar>(
    g: &mut Graph<T>,
    a_hat: Var,
    features: Var,
    cfg: &GcnConfig,
    params: &BoundParams,
) -> Result<Var, NnError> {
    cfg.validate()?;
    let mut h = features;
    for l in 0..cfg.layers() {
        let w = params.var(&param_name(l, "weight"))?;
        let bias = if cfg.bias { Some(params.var(&param_name(l, "bias"))?) } else { None };
        h = gcn_layer(g, a_hat, h, w, bias, cfg.activations[l])?;
    }
    Ok(h)
}

/// Gradient-check cases for the convolution stack.
pub fn gradcheck_cases(seed: u64) -> Vec<GradCheckCase> {
    use crate::graph::normalize_adjacency;
    use rand::{Rng, SeedableRng};

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x67636e);
    let n = 4;
    let mut raw = Tensor::zeros([n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = rng.gen_range(0.0..1.0);
            raw.set2(i, j, v);
            raw.set2(j, i, v);
        }
    }
    let a_hat = normalize_adjacency(&raw).expect("random adjacency is nonnegative");
    let h = Tensor::from_fn([n, 3], |_| rng.gen_range(-1.0..1.0));
    let w1 = Tensor::from_fn([3, 5], |_| rng.gen_range(-1.0..1.0));
    let w2 = Tensor::from_fn([5, 2], |_| rng.gen_range(-1.0..1.0));
    let target = Tensor::from_fn([n, 2], |_| rng.gen_range(-1.0..1.0));

    let a_hat_layer = a_hat.clone();
    let target_layer = Tensor::from_fn([n, 5], |_| rng.gen_range(-1.0..1.0));
    vec![
        GradCheckCase {
            name: "gcn_layer".to_string(),
            inputs: vec![h.clone(), w1.clone()],
            build: Box::new(move |g, v| {
                let a = g.constant(a_hat_layer.clone())?;
                let out = gcn_layer(g, a, v[0], v[1], None, Activation::Tanh)?;
                let t = g.constant(target_layer.clone())?;
                g.mse(out, t)
            }),
        },
        GradCheckCase {
            name: "gcn_stack".to_string(),
            inputs: vec![h, w1, w2],
            build: Box::new(move |g, v| {
                let a = g.constant(a_hat.clone())?;
                let h1 = gcn_layer(g, a, v[0], v[1], None, Activation::Sigmoid)?;
                let h2 = gcn_layer(g, a, h1, v[2], None, Activation::Identity)?;
                let t = g.constant(target.clone())?;
                g.mse(h2, t)
            }),
        },
    ]
}
