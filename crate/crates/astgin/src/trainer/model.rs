//! End-to-end model assembly: attribute augmentation feeds per-step graph
//! convolutions (or a linear projection under the no-GCN ablation), whose
//! per-station sequences feed the temporal encoder-decoder.

use crate::a2unit::{augment, AttributeSelection, AugmentedSample};
use crate::gcn::{self, GcnConfig};
use crate::informer::{self, AttentionTrace, InformerConfig};
use crate::nncore::gradcheck::GradCheckCase;
use crate::nncore::{
    xavier_uniform, BoundParams, Graph, NnError, ParamKind, ParameterStore, Tensor, Var,
};
use crate::scalar::Scalar;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("a2unit stage: {0}")]
    A2Unit(#[from] crate::a2unit::AugmentError),
    #[error("gcn stage: {source}")]
    Gcn {
        #[source]
        source: NnError,
    },
    #[error("informer stage: {source}")]
    Informer {
        #[source]
        source: NnError,
    },
    #[error("model setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Model variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoAttributes,
    NoGcn,
    PoiOnly,
    WeatherOnly,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoAttributes => "no_attributes",
            Ablation::NoGcn => "no_gcn",
            Ablation::PoiOnly => "poi_only",
            Ablation::WeatherOnly => "weather_only",
        }
    }

    /// Which attribute blocks reach the model.
    pub fn attribute_selection(self) -> AttributeSelection {
        match self {
            Ablation::Full | Ablation::NoGcn => AttributeSelection::all(),
            Ablation::NoAttributes => AttributeSelection::none(),
            Ablation::PoiOnly => AttributeSelection { use_static: true, use_dynamic: false },
            Ablation::WeatherOnly => AttributeSelection { use_static: false, use_dynamic: true },
        }
    }

    pub fn uses_gcn(self) -> bool {
        !matches!(self, Ablation::NoGcn)
    }
}

/// Assembled architecture: dimensions plus the spatial and temporal configs.
#[derive(Debug, Clone)]
pub struct AstGin {
    pub ablation: Ablation,
    /// Feature width after augmentation under this ablation.
    pub in_dim: usize,
    pub gcn: GcnConfig,
    pub informer: InformerConfig,
}

impl AstGin {
    /// `gcn_hidden` overrides the default `[64, 64, d_model]` stack when
    /// given (its last entry must equal `informer.d_model`).
    pub fn new(
        ablation: Ablation,
        in_dim: usize,
        gcn_hidden: Option<Vec<usize>>,
        informer: InformerConfig,
    ) -> Result<Self, ModelError> {
        informer.validate()?;
        let mut gcn = GcnConfig::new(in_dim, informer.d_model);
        if let Some(hidden) = gcn_hidden {
            if hidden.last() != Some(&informer.d_model) {
                return Err(ModelError::Setup(format!(
                    "gcn output width {:?} must end at d_model {}",
                    hidden,
                    informer.d_model
                )));
            }
            gcn.activations = std::iter::repeat(gcn::Activation::Relu)
                .take(hidden.len() - 1)
                .chain(std::iter::once(gcn::Activation::Identity))
                .collect();
            gcn.hidden_dims = hidden;
        }
        gcn.validate()?;
        Ok(Self { ablation, in_dim, gcn, informer })
    }

    /// Register every parameter of this architecture.
    pub fn register_params<T: Scalar>(&self, store: &mut ParameterStore<T>, rng: &mut ChaCha8Rng) {
        if self.ablation.uses_gcn() {
            gcn::register_params(store, &self.gcn, rng);
        } else {
            store.register(
                "proj.weight",
                xavier_uniform([self.in_dim, self.informer.d_model], rng),
                ParamKind::Weight,
            );
            store.register("proj.bias", Tensor::zeros([self.informer.d_model]), ParamKind::Bias);
        }
        informer::register_params(store, &self.informer, rng);
    }

    /// Spatial stage over the augmented batch `[B, S, N, K]` ->
    /// `[B, S, N, d_model]`.
    fn spatial<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        e: Var,
        a_hat: Var,
        params: &BoundParams,
    ) -> Result<Var, NnError> {
        let s = g.shape(e).to_vec();
        let (batch, steps, n, k) = (s[0], s[1], s[2], s[3]);
        let d = self.informer.d_model;
        if self.ablation.uses_gcn() {
            let folded = g.reshape(e, &[batch * steps, n, k])?;
            let out = gcn::gcn_forward(g, a_hat, folded, &self.gcn, params)?;
            g.reshape(out, &[batch, steps, n, d])
        } else {
            // shared per-station linear projection of the augmented slices
            let flat = g.reshape(e, &[batch * steps * n, k])?;
            let w = params.var("proj.weight")?;
            let b = params.var("proj.bias")?;
            let proj = g.matmul(flat, w)?;
            let proj = g.add(proj, b)?;
            g.reshape(proj, &[batch, steps, n, d])
        }
    }

    /// Batched forward pass: augmented features `[B, S, N, K]` to raw
    /// predictions `[B, M, N]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_batch<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        e: Var,
        a_hat: Var,
        horizon: usize,
        params: &BoundParams,
        seed: u64,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var, ModelError> {
        let s = g.shape(e).to_vec();
        if s.len() != 4 || s[3] != self.in_dim {
            return Err(ModelError::Setup(format!(
                "augmented batch {s:?} does not match feature width {}",
                self.in_dim
            )));
        }
        let spatial =
            self.spatial(g, e, a_hat, params).map_err(|source| ModelError::Gcn { source })?;
        informer::informer_forward(g, spatial, horizon, &self.informer, params, seed, trace)
            .map_err(|source| ModelError::Informer { source })
    }
}

/// Single-sample forward pass on an already-augmented sample: `[M, N]` raw
/// predictions.
pub fn astgin_forward<T: Scalar>(
    model: &AstGin,
    store: &ParameterStore<T>,
    sample: &AugmentedSample,
    a_hat: &Tensor<f64>,
    horizon: usize,
    checked: bool,
) -> Result<Tensor<T>, ModelError> {
    let mut g = if checked { Graph::checked() } else { Graph::new() };
    let params = BoundParams::bind(&mut g, store)?;
    let shape = sample.e.shape().to_vec();
    let e_batch = sample.e.cast::<T>().reshaped(vec![1, shape[0], shape[1], shape[2]]);
    let e = g.constant(e_batch)?;
    let a = g.constant(a_hat.cast::<T>())?;
    let out = model.forward_batch(&mut g, e, a, horizon, &params, 0, None)?;
    let v = g.value(out).clone();
    let s = v.shape().to_vec();
    Ok(v.reshaped(vec![s[1], s[2]]))
}

/// End-to-end micro-model gradient checks (per-parameter central
/// differences through augmentation, convolution, and attention).
pub fn gradcheck_cases(seed: u64) -> Vec<GradCheckCase> {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f64);

    let n = 2;
    let l = 4;
    let m = 2;
    let steps = l + 1;
    let informer_cfg = InformerConfig {
        d_model: 8,
        n_heads: 1,
        encoder_layers: 1,
        decoder_layers: 1,
        d_ff: 12,
        ..InformerConfig::default()
    };
    let x = Tensor::from_fn([steps, n], |_| rng.gen_range(0.0..1.0));
    let alpha = {
        let mut t = Tensor::zeros([n, 3]);
        for si in 0..n {
            t.set2(si, si % 3, 1.0);
        }
        t
    };
    let beta = Tensor::from_fn([steps, n, 1], |_| rng.gen_range(0.0..1.0));
    let e = augment(&x, Some(&alpha), Some(&beta)).expect("consistent dims");
    let k = e.shape()[2];
    let model = AstGin::new(Ablation::Full, k, Some(vec![6, 8]), informer_cfg)
        .expect("valid micro model");
    let mut store = ParameterStore::<f64>::new();
    model.register_params(&mut store, &mut rng);

    let mut a_raw = Tensor::zeros([n, n]);
    a_raw.set2(0, 1, 0.8);
    a_raw.set2(1, 0, 0.8);
    let a_hat = crate::graph::normalize_adjacency(&a_raw).unwrap();
    let target = Tensor::from_fn([1, m, n], |_| rng.gen_range(0.0..1.0));

    // gradients w.r.t. every parameter tensor, inputs held fixed
    let names: Vec<String> = store.names().map(String::from).collect();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|nm| store.get(nm).unwrap().clone()).collect();
    let e_shape = e.shape().to_vec();
    let e_batch = e.reshaped(vec![1, e_shape[0], e_shape[1], e_shape[2]]);
    vec![GradCheckCase {
        name: "astgin_micro_model".to_string(),
        inputs,
        build: Box::new(move |g, vars| {
            // the harness owns the leaf vars; bind them to parameter names
            let params = BoundParams::from_vars(
                names.iter().zip(vars).map(|(nm, v)| (nm.clone(), (*v, ParamKind::Weight))),
            );
            let e_var = g.constant(e_batch.clone())?;
            let a_var = g.constant(a_hat.clone())?;
            let spatial = model.spatial(g, e_var, a_var, &params)?;
            let out =
                informer::informer_forward(g, spatial, m, &model.informer, &params, 0, None)?;
            let t = g.constant(target.clone())?;
            g.mse(out, t)
        }),
    }]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::{grad_check_case, DEFAULT_H, DEFAULT_TOLERANCE};
    use rand::{Rng, SeedableRng};

    fn micro() -> (AstGin, ParameterStore<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let informer_cfg = InformerConfig {
            d_model: 8,
            n_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            d_ff: 16,
            ..InformerConfig::default()
        };
        let model = AstGin::new(Ablation::Full, 5, Some(vec![8]), informer_cfg).unwrap();
        let mut store = ParameterStore::new();
        model.register_params(&mut store, &mut rng);
        let mut a_raw = Tensor::zeros([3, 3]);
        for i in 0..3 {
            for j in (i + 1)..3 {
                let v: f64 = rng.gen_range(0.1..1.0);
                a_raw.set2(i, j, v);
                a_raw.set2(j, i, v);
            }
        }
        let a_hat = crate::graph::normalize_adjacency(&a_raw).unwrap();
        (model, store, a_hat)
    }

    #[test]
    fn output_shape_is_horizon_by_stations_for_all_ablations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let informer_cfg = InformerConfig {
            d_model: 8,
            n_heads: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            d_ff: 8,
            ..InformerConfig::default()
        };
        for ablation in [
            Ablation::Full,
            Ablation::NoAttributes,
            Ablation::NoGcn,
            Ablation::PoiOnly,
            Ablation::WeatherOnly,
        ] {
            let k = match ablation {
                Ablation::Full | Ablation::NoGcn => 5,
                Ablation::NoAttributes => 1,
                Ablation::PoiOnly => 3,
                Ablation::WeatherOnly => 4,
            };
            let model =
                AstGin::new(ablation, k, Some(vec![8]), informer_cfg.clone()).unwrap();
            let mut store = ParameterStore::<f64>::new();
            model.register_params(&mut store, &mut rng);
            let mut g = Graph::<f64>::new();
            let params = BoundParams::bind(&mut g, &store).unwrap();
            let e = g.constant(Tensor::from_fn([2, 3, 4, k], |_| rng.gen_range(0.0..1.0))).unwrap();
            let eye = Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
            let a = g.constant(eye).unwrap();
            let out = model.forward_batch(&mut g, e, a, 3, &params, 0, None).unwrap();
            assert_eq!(g.shape(out), &[2, 3, 4], "{}", ablation.name());
        }
    }

    #[test]
    fn feature_width_mismatch_is_reported() {
        let (model, store, a_hat) = micro();
        let mut g = Graph::<f64>::new();
        let params = BoundParams::bind(&mut g, &store).unwrap();
        let e = g.constant(Tensor::zeros([1, 5, 3, 7])).unwrap();
        let a = g.constant(a_hat).unwrap();
        let err = model.forward_batch(&mut g, e, a, 2, &params, 0, None).unwrap_err();
        assert!(err.to_string().contains("feature width"), "{err}");
    }

    #[test]
    fn single_sample_wrapper_matches_batch_path() {
        let (model, store, a_hat) = micro();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sample = AugmentedSample {
            e: Tensor::from_fn([5, 3, 5], |_| rng.gen_range(0.0..1.0)),
            y: Tensor::zeros([2, 3]),
            start: 0,
        };
        let single = astgin_forward(&model, &store, &sample, &a_hat, 2, true).unwrap();
        assert_eq!(single.shape(), &[2, 3]);

        let mut g = Graph::<f64>::new();
        let params = BoundParams::bind(&mut g, &store).unwrap();
        let e = g.constant(sample.e.clone().reshaped([1, 5, 3, 5])).unwrap();
        let a = g.constant(a_hat).unwrap();
        let out = model.forward_batch(&mut g, e, a, 2, &params, 0, None).unwrap();
        for m in 0..2 {
            for si in 0..3 {
                assert_eq!(single.at2(m, si), g.value(out).at3(0, m, si));
            }
        }
    }

    #[test]
    fn micro_model_gradcheck() {
        for case in gradcheck_cases(0) {
            let err = grad_check_case(&case, DEFAULT_H).unwrap();
            assert!(err < DEFAULT_TOLERANCE, "{}: {err}", case.name);
        }
    }
}
