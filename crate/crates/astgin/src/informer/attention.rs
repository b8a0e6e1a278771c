//! Scaled dot-product attention in full and probability-sparse forms, plus
//! sinusoidal positional encodings.

use crate::nncore::{Graph, NnError, Tensor, Var};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Large negative logit used to mask future positions; exp() of it
/// underflows to exactly zero in both f32 and f64.
const MASK_NEG: f64 = -1e9;

/// Below this key count the sparsity measure uses every key (deterministic
/// exact-measure mode); above it, `ceil(c * ln Lk)` sampled keys.
pub const EXACT_MEASURE_MAX_KEYS: usize = 25;

/// Attention result: output features plus the softmax weight node for
/// attended queries (all queries for full attention, the selected subset for
/// sparse attention).
pub struct AttentionOutput {
    pub out: Var,
    /// `[B*heads, Lq_attended, Lk]`
    pub weights: Var,
    /// Flat per-batch-row selected query indices (sparse attention only).
    pub selected: Option<Vec<usize>>,
}

/// Sinusoidal positional encoding rows for positions `offset..offset+len`.
pub fn sinusoidal_encoding<T: Scalar>(offset: usize, len: usize, d_model: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d_model);
    for pos in offset..offset + len {
        for i in 0..d_model {
            let exponent = 2.0 * ((i / 2) as f64) / d_model as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            data.push(T::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_vec(vec![len, d_model], data)
}

fn causal_mask<T: Scalar>(l: usize) -> Tensor<T> {
    Tensor::from_fn([l, l], |flat| {
        let (i, j) = (flat / l, flat % l);
        if j > i {
            T::from_f64_lossy(MASK_NEG)
        } else {
            T::zero()
        }
    })
}

/// Accept `[L, d]` or `[B, L, d]`; lift rank 2 to a single-element batch.
fn lift_to_batch<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<(Var, bool), NnError> {
    match g.shape(x).len() {
        2 => {
            let s = g.shape(x).to_vec();
            Ok((g.reshape(x, &[1, s[0], s[1]])?, true))
        }
        3 => Ok((x, false)),
        r => Err(NnError::ShapeMismatch {
            op: "attention",
            detail: format!("inputs must be rank 2 or 3, got rank {r}"),
        }),
    }
}

fn drop_batch<T: Scalar>(g: &mut Graph<T>, x: Var, lifted: bool) -> Result<Var, NnError> {
    if lifted {
        let s = g.shape(x).to_vec();
        g.reshape(x, &[s[1], s[2]])
    } else {
        Ok(x)
    }
}

/// `[B, L, d] -> [B*h, L, d/h]`
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var, NnError> {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    if d % heads != 0 {
        return Err(NnError::ShapeMismatch {
            op: "attention",
            detail: format!("d_model {d} not divisible by {heads} heads"),
        });
    }
    let dh = d / heads;
    let r = g.reshape(x, &[b, l, heads, dh])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[b * heads, l, dh])
}

/// `[B*h, L, d/h] -> [B, L, d]`
fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var, NnError> {
    let s = g.shape(x).to_vec();
    let (bh, l, dh) = (s[0], s[1], s[2]);
    let b = bh / heads;
    let r = g.reshape(x, &[b, heads, l, dh])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    g.reshape(p, &[b, l, heads * dh])
}

fn check_qkv<T: Scalar>(g: &Graph<T>, q: Var, k: Var, v: Var) -> Result<(), NnError> {
    let (sq, sk, sv) = (g.shape(q), g.shape(k), g.shape(v));
    let ok = sq[0] == sk[0] && sk[0] == sv[0] && sq[2] == sk[2] && sk[1] == sv[1];
    if !ok {
        return Err(NnError::ShapeMismatch {
            op: "attention",
            detail: format!("q {sq:?}, k {sk:?}, v {sv:?}"),
        });
    }
    Ok(())
}

fn attend<T: Scalar>(
    g: &mut Graph<T>,
    qh: Var,
    kh: Var,
    vh: Var,
    causal: bool,
) -> Result<(Var, Var), NnError> {
    let dh = g.shape(qh)[2];
    let scores = g.bmm(qh, kh, true)?;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut scaled = g.scale(scores, scale)?;
    if causal {
        let lq = g.shape(qh)[1];
        let lk = g.shape(kh)[1];
        if lq != lk {
            return Err(NnError::ShapeMismatch {
                op: "attention",
                detail: format!("causal mask needs Lq == Lk, got {lq} vs {lk}"),
            });
        }
        let mask = g.constant(causal_mask::<T>(lq))?;
        scaled = g.add(scaled, mask)?;
    }
    let weights = g.softmax(scaled, 2)?;
    let out = g.bmm(weights, vh, false)?;
    Ok((out, weights))
}

/// Multi-head scaled dot-product attention over already-projected q/k/v.
/// Heads are split internally, attended with scale `1/sqrt(d_head)`,
/// concatenated, and projected through `wo` when given. `causal` masks
/// future key positions (decoder self-attention).
pub fn full_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    wo: Option<Var>,
    n_heads: usize,
    causal: bool,
) -> Result<AttentionOutput, NnError> {
    let (q, lifted) = lift_to_batch(g, q)?;
    let (k, _) = lift_to_batch(g, k)?;
    let (v, _) = lift_to_batch(g, v)?;
    check_qkv(g, q, k, v)?;
    let qh = split_heads(g, q, n_heads)?;
    let kh = split_heads(g, k, n_heads)?;
    let vh = split_heads(g, v, n_heads)?;
    let (ctx, weights) = attend(g, qh, kh, vh, causal)?;
    let merged = merge_heads(g, ctx, n_heads)?;
    let out = project_out(g, merged, wo)?;
    let out = drop_batch(g, out, lifted)?;
    Ok(AttentionOutput { out, weights, selected: None })
}

fn project_out<T: Scalar>(g: &mut Graph<T>, x: Var, wo: Option<Var>) -> Result<Var, NnError> {
    match wo {
        None => Ok(x),
        Some(w) => {
            let s = g.shape(x).to_vec();
            let (b, l, d) = (s[0], s[1], s[2]);
            let flat = g.reshape(x, &[b * l, d])?;
            let proj = g.matmul(flat, w)?;
            let dout = g.shape(proj)[1];
            g.reshape(proj, &[b, l, dout])
        }
    }
}

/// Query-sparsity measure per batch row: `max_j s_ij - mean_j s_ij` with
/// `s = q kᵀ / sqrt(d_head)` over `key_subset`.
fn sparsity_measures<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    key_subset: &[usize],
) -> Vec<Vec<f64>> {
    let (batch, l, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut rows = Vec::with_capacity(l);
        for i in 0..l {
            let qrow = &q.data()[(b * l + i) * dh..(b * l + i + 1) * dh];
            let mut max_s = f64::NEG_INFINITY;
            let mut sum_s = 0.0;
            for &j in key_subset {
                let krow = &k.data()[(b * l + j) * dh..(b * l + j + 1) * dh];
                let mut dot = 0.0;
                for (qv, kv) in qrow.iter().zip(krow) {
                    dot += qv.to_f64_lossless() * kv.to_f64_lossless();
                }
                let s = dot * scale;
                max_s = max_s.max(s);
                sum_s += s;
            }
            rows.push(max_s - sum_s / key_subset.len() as f64);
        }
        out.push(rows);
    }
    out
}

/// Number of active queries: `min(Lq, max(1, ceil(c * ln Lq)))`.
pub fn active_query_count(lq: usize, c: f64) -> usize {
    let raw = (c * (lq as f64).ln()).ceil() as usize;
    raw.max(1).min(lq)
}

/// ProbSparse self-attention: the top-u queries by max-minus-mean score
/// attend over all keys; the rest emit the key-mean of V. Ties break toward
/// the lower query index. Selection is computed outside the tape, so
/// gradients flow through the selected attention paths and the mean branch.
#[allow(clippy::too_many_arguments)]
pub fn prob_sparse_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    wo: Option<Var>,
    n_heads: usize,
    c: f64,
    key_sample_seed: u64,
) -> Result<AttentionOutput, NnError> {
    if !(c > 0.0) {
        return Err(NnError::InvalidArgument {
            op: "prob_sparse_attention",
            detail: format!("sampling factor c must be positive, got {c}"),
        });
    }
    let (q, lifted) = lift_to_batch(g, q)?;
    let (k, _) = lift_to_batch(g, k)?;
    let (v, _) = lift_to_batch(g, v)?;
    check_qkv(g, q, k, v)?;
    let (lq, lk) = (g.shape(q)[1], g.shape(k)[1]);
    if lq != lk {
        return Err(NnError::ShapeMismatch {
            op: "prob_sparse_attention",
            detail: format!("self-attention needs Lq == Lk, got {lq} vs {lk}"),
        });
    }
    let qh = split_heads(g, q, n_heads)?;
    let kh = split_heads(g, k, n_heads)?;
    let vh = split_heads(g, v, n_heads)?;

    let u = active_query_count(lq, c);
    if u >= lq {
        // every query attends: identical arithmetic to full attention
        let (ctx, weights) = attend(g, qh, kh, vh, false)?;
        let merged = merge_heads(g, ctx, n_heads)?;
        let out = project_out(g, merged, wo)?;
        let out = drop_batch(g, out, lifted)?;
        return Ok(AttentionOutput { out, weights, selected: None });
    }

    let key_subset: Vec<usize> = if lk <= EXACT_MEASURE_MAX_KEYS {
        (0..lk).collect()
    } else {
        let sample = ((c * (lk as f64).ln()).ceil() as usize).clamp(1, lk);
        let mut all: Vec<usize> = (0..lk).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(key_sample_seed);
        all.shuffle(&mut rng);
        let mut subset = all[..sample].to_vec();
        subset.sort_unstable();
        subset
    };

    let measures = sparsity_measures(g.value(qh), g.value(kh), &key_subset);
    let batch = g.shape(qh)[0];
    let mut idx_flat = Vec::with_capacity(batch * u);
    for row in &measures {
        let mut order: Vec<usize> = (0..lq).collect();
        order.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).unwrap().then_with(|| a.cmp(&b))
        });
        let mut chosen = order[..u].to_vec();
        chosen.sort_unstable();
        idx_flat.extend(chosen);
    }

    let q_sel = g.gather_rows(qh, &idx_flat, u)?;
    let (ctx_sel, weights) = attend(g, q_sel, kh, vh, false)?;
    let mean_v = g.mean_axis(vh, 1)?;
    let base = g.broadcast_axis1(mean_v, lq)?;
    let combined = g.scatter_rows(base, ctx_sel, &idx_flat, u)?;
    let merged = merge_heads(g, combined, n_heads)?;
    let out = project_out(g, merged, wo)?;
    let out = drop_batch(g, out, lifted)?;
    Ok(AttentionOutput { out, weights, selected: Some(idx_flat) })
}
