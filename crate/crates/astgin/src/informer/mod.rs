//! Temporal extraction: sparse-attention encoder and masked-attention
//! decoder applied per station with shared weights, emitting the M-step
//! forecast head.

pub mod attention;

pub use attention::{
    active_query_count, full_attention, prob_sparse_attention, sinusoidal_encoding,
    AttentionOutput, EXACT_MEASURE_MAX_KEYS,
};

use crate::nncore::gradcheck::GradCheckCase;
use crate::nncore::{
    xavier_uniform, BoundParams, Graph, NnError, ParamKind, ParameterStore, Tensor, Var,
};
use crate::scalar::Scalar;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_ff: usize,
    /// ProbSparse sampling factor `c`.
    pub sampling_factor: f64,
    /// Sequence-halving convolutions between encoder layers.
    pub distilling: bool,
    /// Dropout rate on attention and feed-forward branches.
    pub dropout: f64,
}

impl Default for InformerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: 3,
            d_ff: 128,
            sampling_factor: 5.0,
            distilling: false,
            dropout: 0.0,
        }
    }
}

impl InformerConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |detail: String| Err(NnError::InvalidArgument { op: "informer_config", detail });
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("zero dimension".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("need at least one encoder and one decoder layer".into());
        }
        if !(self.sampling_factor > 0.0) {
            return bad(format!("sampling factor {} must be positive", self.sampling_factor));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        Ok(())
    }
}

/// Decoder start-token length for an `L+1`-step input window.
pub fn label_len(input_steps: usize) -> usize {
    input_steps.div_ceil(2)
}

fn attn_param(store: &mut ParameterStore<impl Scalar>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.register(&format!("{prefix}.{w}"), xavier_uniform([d, d], rng), ParamKind::Weight);
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.register(&format!("{prefix}.{b}"), Tensor::zeros([d]), ParamKind::Bias);
    }
}

fn norm_param(store: &mut ParameterStore<impl Scalar>, prefix: &str, d: usize) {
    store.register(&format!("{prefix}.gamma"), Tensor::filled([d], num_traits::One::one()), ParamKind::Norm);
    store.register(&format!("{prefix}.beta"), Tensor::zeros([d]), ParamKind::Norm);
}

fn ffn_param(
    store: &mut ParameterStore<impl Scalar>,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut ChaCha8Rng,
) {
    store.register(&format!("{prefix}.w1"), xavier_uniform([d, d_ff], rng), ParamKind::Weight);
    store.register(&format!("{prefix}.b1"), Tensor::zeros([d_ff]), ParamKind::Bias);
    store.register(&format!("{prefix}.w2"), xavier_uniform([d_ff, d], rng), ParamKind::Weight);
    store.register(&format!("{prefix}.b2"), Tensor::zeros([d]), ParamKind::Bias);
}

/// Register every temporal-stack parameter.
pub fn register_params<T: Scalar>(
    store: &mut ParameterStore<T>,
    cfg: &InformerConfig,
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.d_model;
    for l in 0..cfg.encoder_layers {
        attn_param(store, &format!("informer.enc{l}.self"), d, rng);
        norm_param(store, &format!("informer.enc{l}.norm1"), d);
        ffn_param(store, &format!("informer.enc{l}.ffn"), d, cfg.d_ff, rng);
        norm_param(store, &format!("informer.enc{l}.norm2"), d);
        if cfg.distilling && l + 1 < cfg.encoder_layers {
            for w in ["w0", "w1", "w2"] {
                store.register(
                    &format!("informer.distill{l}.{w}"),
                    xavier_uniform([d, d], rng),
                    ParamKind::Weight,
                );
            }
            store.register(
                &format!("informer.distill{l}.bias"),
                Tensor::zeros([d]),
                ParamKind::Bias,
            );
        }
    }
    for l in 0..cfg.decoder_layers {
        attn_param(store, &format!("informer.dec{l}.self"), d, rng);
        norm_param(store, &format!("informer.dec{l}.norm1"), d);
        attn_param(store, &format!("informer.dec{l}.cross"), d, rng);
        norm_param(store, &format!("informer.dec{l}.norm2"), d);
        ffn_param(store, &format!("informer.dec{l}.ffn"), d, cfg.d_ff, rng);
        norm_param(store, &format!("informer.dec{l}.norm3"), d);
    }
    store.register("informer.head.weight", xavier_uniform([d, 1], rng), ParamKind::Weight);
    store.register("informer.head.bias", Tensor::zeros([1]), ParamKind::Bias);
}

/// Affine map over the last axis of a rank-3 tensor.
fn linear3<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
) -> Result<Var, NnError> {
    let s = g.shape(x).to_vec();
    let (batch, l, din) = (s[0], s[1], s[2]);
    let flat = g.reshape(x, &[batch * l, din])?;
    let proj = g.matmul(flat, w)?;
    let proj = match b {
        Some(b) => g.add(proj, b)?,
        None => proj,
    };
    let dout = g.shape(proj)[1];
    g.reshape(proj, &[batch, l, dout])
}

struct LayerCtx<'a> {
    params: &'a BoundParams,
    cfg: &'a InformerConfig,
    /// Base seed for dropout masks; advanced per use.
    seed: u64,
    uses: u64,
}

impl<'a> LayerCtx<'a> {
    fn drop<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var, NnError> {
        if self.cfg.dropout == 0.0 {
            return Ok(x);
        }
        self.uses += 1;
        g.dropout(x, self.cfg.dropout, self.seed.wrapping_add(self.uses))
    }

    fn add_norm<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        residual: Var,
        branch: Var,
        prefix: &str,
    ) -> Result<Var, NnError> {
        let branch = self.drop(g, branch)?;
        let sum = g.add(residual, branch)?;
        let gamma = self.params.var(&format!("{prefix}.gamma"))?;
        let beta = self.params.var(&format!("{prefix}.beta"))?;
        g.layer_norm(sum, gamma, beta, T::from_f64_lossy(LN_EPS))
    }

    fn projected_qkv<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        q_in: Var,
        kv_in: Var,
        prefix: &str,
    ) -> Result<(Var, Var, Var, Var, Var), NnError> {
        let wq = self.params.var(&format!("{prefix}.wq"))?;
        let bq = self.params.var(&format!("{prefix}.bq"))?;
        let wk = self.params.var(&format!("{prefix}.wk"))?;
        let bk = self.params.var(&format!("{prefix}.bk"))?;
        let wv = self.params.var(&format!("{prefix}.wv"))?;
        let bv = self.params.var(&format!("{prefix}.bv"))?;
        let wo = self.params.var(&format!("{prefix}.wo"))?;
        let bo = self.params.var(&format!("{prefix}.bo"))?;
        let q = linear3(g, q_in, wq, Some(bq))?;
        let k = linear3(g, kv_in, wk, Some(bk))?;
        let v = linear3(g, kv_in, wv, Some(bv))?;
        Ok((q, k, v, wo, bo))
    }

    fn ffn<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var, NnError> {
        let w1 = self.params.var(&format!("{prefix}.w1"))?;
        let b1 = self.params.var(&format!("{prefix}.b1"))?;
        let w2 = self.params.var(&format!("{prefix}.w2"))?;
        let b2 = self.params.var(&format!("{prefix}.b2"))?;
        let h = linear3(g, x, w1, Some(b1))?;
        let h = g.relu(h)?;
        linear3(g, h, w2, Some(b2))
    }
}

/// Distilling block between encoder layers: kernel-3 causal-padded conv,
/// relu, then stride-2 max pool halving the sequence.
fn distill_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    params: &BoundParams,
    layer: usize,
) -> Result<Var, NnError> {
    let s = g.shape(x).to_vec();
    let (batch, l, d) = (s[0], s[1], s[2]);
    let zeros = g.constant(Tensor::zeros([batch, 1, d]))?;
    // shifted views implement the kernel taps
    let left = g.slice(x, 1, 0, l - 1)?;
    let left = g.concat(&[zeros, left], 1)?;
    let right = g.slice(x, 1, 1, l)?;
    let right = g.concat(&[right, zeros], 1)?;
    let w0 = params.var(&format!("informer.distill{layer}.w0"))?;
    let w1 = params.var(&format!("informer.distill{layer}.w1"))?;
    let w2 = params.var(&format!("informer.distill{layer}.w2"))?;
    let bias = params.var(&format!("informer.distill{layer}.bias"))?;
    let t0 = linear3(g, left, w0, None)?;
    let t1 = linear3(g, x, w1, Some(bias))?;
    let t2 = linear3(g, right, w2, None)?;
    let sum = g.add(t0, t1)?;
    let sum = g.add(sum, t2)?;
    let act = g.relu(sum)?;
    g.max_pool_axis1(act)
}

/// Optional sink for attention maps (debug dumps and weight-sum checks).
#[derive(Default)]
pub struct AttentionTrace {
    /// (name, weights var, selected-query indices when sparse)
    pub entries: Vec<(String, Var, Option<Vec<usize>>)>,
}

fn record(
    trace: &mut Option<&mut AttentionTrace>,
    name: String,
    att: &AttentionOutput,
) {
    if let Some(t) = trace.as_deref_mut() {
        t.entries.push((name, att.weights, att.selected.clone()));
    }
}

/// Encoder stack over `[B, S, d_model]` (positional encoding already added).
pub fn encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    seq: Var,
    cfg: &InformerConfig,
    params: &BoundParams,
    seed: u64,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<Var, NnError> {
    cfg.validate()?;
    let mut ctx = LayerCtx { params, cfg, seed, uses: 0 };
    let mut x = seq;
    for l in 0..cfg.encoder_layers {
        let prefix = format!("informer.enc{l}");
        let (q, k, v, wo, bo) = ctx.projected_qkv(g, x, x, &format!("{prefix}.self"))?;
        let att = prob_sparse_attention(
            g,
            q,
            k,
            v,
            Some(wo),
            cfg.n_heads,
            cfg.sampling_factor,
            seed.wrapping_add(l as u64),
        )?;
        record(&mut trace, format!("enc{l}.self"), &att);
        let att_out = g.add(att.out, bo)?;
        x = ctx.add_norm(g, x, att_out, &format!("{prefix}.norm1"))?;
        let ff = ctx.ffn(g, x, &format!("{prefix}.ffn"))?;
        x = ctx.add_norm(g, x, ff, &format!("{prefix}.norm2"))?;
        if cfg.distilling && l + 1 < cfg.encoder_layers {
            x = distill_block(g, x, params, l)?;
        }
    }
    Ok(x)
}

/// Decoder stack over `[B, label_len + M, d_model]` with causal
/// self-attention and cross attention over the encoder output.
pub fn decoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    dec_in: Var,
    enc_out: Var,
    cfg: &InformerConfig,
    params: &BoundParams,
    expected_len: usize,
    seed: u64,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<Var, NnError> {
    cfg.validate()?;
    let got = g.shape(dec_in)[1];
    if got != expected_len {
        return Err(NnError::ShapeMismatch {
            op: "decoder_forward",
            detail: format!("decoder input has {got} steps, expected label_len + M = {expected_len}"),
        });
    }
    let mut ctx = LayerCtx { params, cfg, seed: seed.wrapping_add(0x1000), uses: 0 };
    let mut x = dec_in;
    for l in 0..cfg.decoder_layers {
        let prefix = format!("informer.dec{l}");
        let (q, k, v, wo, bo) = ctx.projected_qkv(g, x, x, &format!("{prefix}.self"))?;
        let att = full_attention(g, q, k, v, Some(wo), cfg.n_heads, true)?;
        record(&mut trace, format!("dec{l}.self"), &att);
        let att_out = g.add(att.out, bo)?;
        x = ctx.add_norm(g, x, att_out, &format!("{prefix}.norm1"))?;

        let (q, k, v, wo, bo) = ctx.projected_qkv(g, x, enc_out, &format!("{prefix}.cross"))?;
        let att = full_attention(g, q, k, v, Some(wo), cfg.n_heads, false)?;
        record(&mut trace, format!("dec{l}.cross"), &att);
        let att_out = g.add(att.out, bo)?;
        x = ctx.add_norm(g, x, att_out, &format!("{prefix}.norm2"))?;

        let ff = ctx.ffn(g, x, &format!("{prefix}.ffn"))?;
        x = ctx.add_norm(g, x, ff, &format!("{prefix}.norm3"))?;
    }
    Ok(x)
}

/// Full temporal pass: station axis folded into the batch, sinusoidal
/// positions added, encoder + decoder + linear head over the last M
/// positions. `gcn_seq` is `[B, S, N, d_model]`; the result is `[B, M, N]`
/// raw (unclamped) availability predictions.
#[allow(clippy::too_many_arguments)]
pub fn informer_forward<T: Scalar>(
    g: &mut Graph<T>,
    gcn_seq: Var,
    horizon: usize,
    cfg: &InformerConfig,
    params: &BoundParams,
    seed: u64,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<Var, NnError> {
    cfg.validate()?;
    let s = g.shape(gcn_seq).to_vec();
    if s.len() != 4 || s[3] != cfg.d_model {
        return Err(NnError::ShapeMismatch {
            op: "informer_forward",
            detail: format!("expected [B, S, N, {}], got {s:?}", cfg.d_model),
        });
    }
    let (batch, steps, n, d) = (s[0], s[1], s[2], s[3]);
    if horizon == 0 {
        return Err(NnError::InvalidArgument {
            op: "informer_forward",
            detail: "horizon must be >= 1".into(),
        });
    }

    // fold stations into the batch: per-station sequences, shared weights
    let by_station = g.permute(gcn_seq, &[0, 2, 1, 3])?;
    let folded = g.reshape(by_station, &[batch * n, steps, d])?;

    let enc_pe = g.constant(sinusoidal_encoding::<T>(0, steps, d))?;
    let enc_in = g.add(folded, enc_pe)?;
    let enc_out = encoder_forward(g, enc_in, cfg, params, seed, trace.as_deref_mut())?;

    let ll = label_len(steps);
    let start_tokens = g.slice(folded, 1, steps - ll, steps)?;
    let placeholders = g.constant(Tensor::zeros([batch * n, horizon, d]))?;
    let tokens = g.concat(&[start_tokens, placeholders], 1)?;
    let dec_pe = g.constant(sinusoidal_encoding::<T>(steps - ll, ll + horizon, d))?;
    let dec_in = g.add(tokens, dec_pe)?;
    let dec_out =
        decoder_forward(g, dec_in, enc_out, cfg, params, ll + horizon, seed, trace)?;

    let tail = g.slice(dec_out, 1, ll, ll + horizon)?;
    let flat = g.reshape(tail, &[batch * n * horizon, d])?;
    let w = params.var("informer.head.weight")?;
    let b = params.var("informer.head.bias")?;
    let scalar_out = g.matmul(flat, w)?;
    let scalar_out = g.add(scalar_out, b)?;
    let shaped = g.reshape(scalar_out, &[batch, n, horizon])?;
    g.permute(shaped, &[0, 2, 1])
}

/// Gradient-check cases for attention and a one-layer encoder/decoder pass.
pub fn gradcheck_cases(seed: u64) -> Vec<GradCheckCase> {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x696e66);
    let rand3 = |rng: &mut ChaCha8Rng, shape: [usize; 3]| {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    };

    let q = rand3(&mut rng, [2, 5, 4]);
    let k = rand3(&mut rng, [2, 5, 4]);
    let v = rand3(&mut rng, [2, 5, 4]);
    let wo = Tensor::from_fn([4, 4], |_| rng.gen_range(-0.7..0.7));
    let target = rand3(&mut rng, [2, 5, 4]);

    let (t1, t2, t3) = (target.clone(), target.clone(), target);
    let (k2, v2) = (k.clone(), v.clone());
    let (q3, k3, v3, wo3) = (q.clone(), k.clone(), v.clone(), wo.clone());
    vec![
        GradCheckCase {
            name: "full_attention".to_string(),
            inputs: vec![q.clone(), k.clone(), v.clone(), wo.clone()],
            build: Box::new(move |g, vars| {
                let att = full_attention(g, vars[0], vars[1], vars[2], Some(vars[3]), 2, false)?;
                let t = g.constant(t1.clone())?;
                g.mse(att.out, t)
            }),
        },
        GradCheckCase {
            name: "full_attention_causal".to_string(),
            inputs: vec![q.clone(), k2, v2, wo.clone()],
            build: Box::new(move |g, vars| {
                let att = full_attention(g, vars[0], vars[1], vars[2], Some(vars[3]), 1, true)?;
                let t = g.constant(t2.clone())?;
                g.mse(att.out, t)
            }),
        },
        GradCheckCase {
            // c = 1 forces a genuinely sparse selection (u = 2 of 5)
            name: "prob_sparse_attention".to_string(),
            inputs: vec![q3, k3, v3, wo3],
            build: Box::new(move |g, vars| {
                let att = prob_sparse_attention(g, vars[0], vars[1], vars[2], Some(vars[3]), 1, 1.0, 7)?;
                let t = g.constant(t3.clone())?;
                g.mse(att.out, t)
            }),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::{grad_check_case, DEFAULT_H, DEFAULT_TOLERANCE};
    use rand::{Rng, SeedableRng};

    fn micro_cfg() -> InformerConfig {
        InformerConfig {
            d_model: 8,
            n_heads: 1,
            encoder_layers: 2,
            decoder_layers: 3,
            d_ff: 16,
            sampling_factor: 5.0,
            distilling: false,
            dropout: 0.0,
        }
    }

    fn store_for(cfg: &InformerConfig, seed: u64) -> ParameterStore<f64> {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_params(&mut store, cfg, &mut rng);
        store
    }

    fn rand4(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn label_len_is_ceil_half() {
        assert_eq!(label_len(5), 3);
        assert_eq!(label_len(4), 2);
        assert_eq!(label_len(1), 1);
    }

    #[test]
    fn forward_shape_contract_all_horizons() {
        let cfg = micro_cfg();
        let store = store_for(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = rand4(&mut rng, [2, 5, 3, 8]);
        for m in [1usize, 2, 4] {
            let mut g = Graph::<f64>::new();
            let params = BoundParams::bind(&mut g, &store).unwrap();
            let x = g.constant(seq.clone()).unwrap();
            let out = informer_forward(&mut g, x, m, &cfg, &params, 0, None).unwrap();
            assert_eq!(g.shape(out), &[2, m, 3]);
        }
    }

    #[test]
    fn doubling_d_ff_changes_params_not_output_shape() {
        let cfg = micro_cfg();
        let wide = InformerConfig { d_ff: 32, ..cfg.clone() };
        let store_a = store_for(&cfg, 1);
        let store_b = store_for(&wide, 1);
        let count = |s: &ParameterStore<f64>| -> usize {
            s.iter().map(|(_, t, _)| t.len()).sum()
        };
        assert!(count(&store_b) > count(&store_a));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = rand4(&mut rng, [1, 4, 2, 8]);
        for (cfg, store) in [(&cfg, &store_a), (&wide, &store_b)] {
            let mut g = Graph::<f64>::new();
            let params = BoundParams::bind(&mut g, store).unwrap();
            let x = g.constant(seq.clone()).unwrap();
            let out = informer_forward(&mut g, x, 2, cfg, &params, 0, None).unwrap();
            assert_eq!(g.shape(out), &[1, 2, 2]);
        }
    }

    #[test]
    fn zero_residual_branches_leave_layer_norm_chain() {
        // zero all weights/biases: attention and ffn branches vanish, so one
        // encoder layer is norm2(norm1(x))
        let cfg = InformerConfig { encoder_layers: 1, ..micro_cfg() };
        let mut store = store_for(&cfg, 4);
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in &names {
            if name.contains(".self.") || name.contains(".ffn.") {
                let shape = store.get(name).unwrap().shape().to_vec();
                store.set_value(name, Tensor::zeros(shape));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_val = Tensor::from_fn(vec![1, 4, 8], |_| rng.gen_range(-1.0..1.0));

        let mut g = Graph::<f64>::new();
        let params = BoundParams::bind(&mut g, &store).unwrap();
        let x = g.constant(x_val.clone()).unwrap();
        let out = encoder_forward(&mut g, x, &cfg, &params, 0, None).unwrap();

        let gamma = g.constant(Tensor::filled([8], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros([8])).unwrap();
        let n1 = g.layer_norm(x, gamma, beta, LN_EPS).unwrap();
        let n2 = g.layer_norm(n1, gamma, beta, LN_EPS).unwrap();
        let (a, b) = (g.value(out).data().to_vec(), g.value(n2).data().to_vec());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_placeholder_causality() {
        // perturbing placeholder position t leaves outputs before t unchanged
        let cfg = micro_cfg();
        let store = store_for(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let steps = 5;
        let m = 3;
        let ll = label_len(steps);
        let base = Tensor::from_fn(vec![2, ll + m, 8], |_| rng.gen_range(-1.0..1.0));
        let enc = Tensor::from_fn(vec![2, steps, 8], |_| rng.gen_range(-1.0..1.0));

        let run = |dec_val: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let params = BoundParams::bind(&mut g, &store).unwrap();
            let d = g.constant(dec_val.clone()).unwrap();
            let e = g.constant(enc.clone()).unwrap();
            let out =
                decoder_forward(&mut g, d, e, &cfg, &params, ll + m, 0, None).unwrap();
            g.value(out).clone()
        };
        let reference = run(&base);
        for perturb_pos in ll..ll + m {
            let mut perturbed = base.clone();
            for b in 0..2 {
                for c in 0..8 {
                    let v = perturbed.at3(b, perturb_pos, c);
                    perturbed.set3(b, perturb_pos, c, v + 11.0);
                }
            }
            let got = run(&perturbed);
            for b in 0..2 {
                for t in 0..perturb_pos {
                    for c in 0..8 {
                        assert!(
                            (got.at3(b, t, c) - reference.at3(b, t, c)).abs() < 1e-10,
                            "output at {t} changed by perturbation at {perturb_pos}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn decoder_length_mismatch_is_error() {
        let cfg = micro_cfg();
        let store = store_for(&cfg, 8);
        let mut g = Graph::<f64>::new();
        let params = BoundParams::bind(&mut g, &store).unwrap();
        let d = g.constant(Tensor::zeros([1, 4, 8])).unwrap();
        let e = g.constant(Tensor::zeros([1, 5, 8])).unwrap();
        let err = decoder_forward(&mut g, d, e, &cfg, &params, 5, 0, None).unwrap_err();
        assert!(err.to_string().contains("label_len"), "{err}");
    }

    #[test]
    fn zero_cross_value_weights_ignore_encoder_output() {
        let cfg = InformerConfig { decoder_layers: 2, ..micro_cfg() };
        let mut store = store_for(&cfg, 9);
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in &names {
            if name.contains(".cross.wv") {
                let shape = store.get(name).unwrap().shape().to_vec();
                store.set_value(name, Tensor::zeros(shape));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dec = Tensor::from_fn(vec![1, 4, 8], |_| rng.gen_range(-1.0..1.0));
        let enc_a = Tensor::from_fn(vec![1, 5, 8], |_| rng.gen_range(-1.0..1.0));
        let enc_b = Tensor::zeros([1, 5, 8]);
        let run = |enc_val: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let params = BoundParams::bind(&mut g, &store).unwrap();
            let d = g.constant(dec.clone()).unwrap();
            let e = g.constant(enc_val.clone()).unwrap();
            let out = decoder_forward(&mut g, d, e, &cfg, &params, 4, 0, None).unwrap();
            g.value(out).data().to_vec()
        };
        let a = run(&enc_a);
        let b = run(&enc_b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "decoder depends on encoder despite zero values");
        }
    }

    #[test]
    fn identical_station_inputs_give_identical_outputs() {
        let cfg = micro_cfg();
        let store = store_for(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let per_station = Tensor::from_fn(vec![1, 5, 1, 8], |_| rng.gen_range(-1.0..1.0));
        // three stations with identical sequences
        let mut seq = Tensor::zeros([1, 5, 3, 8]);
        for t in 0..5 {
            for n in 0..3 {
                for c in 0..8 {
                    seq.data_mut()[(t * 3 + n) * 8 + c] = per_station.data()[(t) * 8 + c];
                }
            }
        }
        let mut g = Graph::<f64>::new();
        let params = BoundParams::bind(&mut g, &store).unwrap();
        let x = g.constant(seq).unwrap();
        let out = informer_forward(&mut g, x, 2, &cfg, &params, 0, None).unwrap();
        let v = g.value(out);
        for m in 0..2 {
            let first = v.at3(0, m, 0);
            for n in 1..3 {
                assert_eq!(v.at3(0, m, n), first);
            }
        }
    }

    #[test]
    fn single_station_reduces_to_sequence_forecasting() {
        let cfg = micro_cfg();
        let store = store_for(&cfg, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let seq = rand4(&mut rng, [2, 5, 1, 8]);
        let mut g = Graph::<f64>::new();
        let params = BoundParams::bind(&mut g, &store).unwrap();
        let x = g.constant(seq).unwrap();
        let out = informer_forward(&mut g, x, 3, &cfg, &params, 0, None).unwrap();
        assert_eq!(g.shape(out), &[2, 3, 1]);
    }

    #[test]
    fn station_permutation_permutes_predictions() {
        let cfg = micro_cfg();
        let store = store_for(&cfg, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let n = 4;
        let seq = rand4(&mut rng, [1, 5, n, 8]);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Tensor::zeros([1, 5, n, 8]);
        for t in 0..5 {
            for si in 0..n {
                for c in 0..8 {
                    permuted.data_mut()[(t * n + si) * 8 + c] = seq.data()[(t * n + perm[si]) * 8 + c];
                }
            }
        }
        let run = |x_val: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let params = BoundParams::bind(&mut g, &store).unwrap();
            let x = g.constant(x_val.clone()).unwrap();
            let out = informer_forward(&mut g, x, 2, &cfg, &params, 0, None).unwrap();
            g.value(out).clone()
        };
        let base = run(&seq);
        let shuffled = run(&permuted);
        for m in 0..2 {
            for si in 0..n {
                assert!(
                    (shuffled.at3(0, m, si) - base.at3(0, m, perm[si])).abs() < 1e-10,
                    "prediction for permuted station {si} differs"
                );
            }
        }
    }

    #[test]
    fn distilling_halves_encoder_output_and_keeps_decoder_running() {
        let cfg = InformerConfig { distilling: true, ..micro_cfg() };
        let store = store_for(&cfg, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let seq_val = Tensor::from_fn(vec![2, 9, 8], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::<f64>::new();
        let params = BoundParams::bind(&mut g, &store).unwrap();
        let x = g.constant(seq_val).unwrap();
        let out = encoder_forward(&mut g, x, &cfg, &params, 0, None).unwrap();
        assert_eq!(g.shape(out), &[2, 5, 8]);

        let seq4 = rand4(&mut rng, [1, 9, 2, 8]);
        let mut g = Graph::<f64>::new();
        let params = BoundParams::bind(&mut g, &store).unwrap();
        let x = g.constant(seq4).unwrap();
        let out = informer_forward(&mut g, x, 2, &cfg, &params, 0, None).unwrap();
        assert_eq!(g.shape(out), &[1, 2, 2]);
    }

    #[test]
    fn attention_trace_rows_sum_to_one() {
        let cfg = micro_cfg();
        let store = store_for(&cfg, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let seq = rand4(&mut rng, [1, 5, 2, 8]);
        let mut g = Graph::<f64>::new();
        let params = BoundParams::bind(&mut g, &store).unwrap();
        let x = g.constant(seq).unwrap();
        let mut trace = AttentionTrace::default();
        informer_forward(&mut g, x, 2, &cfg, &params, 0, Some(&mut trace)).unwrap();
        assert_eq!(trace.entries.len(), cfg.encoder_layers + 2 * cfg.decoder_layers);
        for (name, weights, _) in &trace.entries {
            let w = g.value(*weights);
            let lk = *w.shape().last().unwrap();
            for row in w.data().chunks(lk) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "{name} weight row sums to {s}");
            }
        }
    }

    #[test]
    fn gradcheck_attention_cases() {
        for seed in [0u64, 1] {
            for case in gradcheck_cases(seed) {
                let err = grad_check_case(&case, DEFAULT_H).unwrap();
                assert!(err < DEFAULT_TOLERANCE, "{} at seed {seed}: {err}", case.name);
            }
        }
    }

    #[test]
    fn encoder_micro_gradcheck() {
        // one-layer micro config, gradients w.r.t. the input sequence
        let cfg = InformerConfig {
            d_model: 4,
            n_heads: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            d_ff: 8,
            ..micro_cfg()
        };
        let store = store_for(&cfg, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::from_fn(vec![1, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let target = Tensor::from_fn(vec![1, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let case = GradCheckCase {
            name: "encoder_micro".to_string(),
            inputs: vec![x],
            build: Box::new(move |g, v| {
                let params = BoundParams::bind(g, &store)?;
                let out = encoder_forward(g, v[0], &cfg, &params, 0, None)?;
                let t = g.constant(target.clone())?;
                g.mse(out, t)
            }),
        };
        let err = grad_check_case(&case, DEFAULT_H).unwrap();
        assert!(err < DEFAULT_TOLERANCE, "encoder micro gradcheck: {err}");
    }
}
