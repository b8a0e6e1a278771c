//! Named parameter store with per-parameter Adam state and a line-oriented
//! text checkpoint format (see `save`).

use super::autodiff::{Graph, NnError, Var};
use super::tensor::Tensor;
use crate::scalar::Scalar;
use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint at line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("checkpoint scalar type {found} does not match expected {expected}")]
    ScalarMismatch { found: String, expected: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

/// Role of a parameter; L2 regularization only touches `Weight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

impl ParamKind {
    fn tag(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Norm => "norm",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "weight" => Some(ParamKind::Weight),
            "bias" => Some(ParamKind::Bias),
            "norm" => Some(ParamKind::Norm),
            _ => None,
        }
    }
}

struct Param<T> {
    value: Tensor<T>,
    kind: ParamKind,
    adam_m: Tensor<T>,
    adam_v: Tensor<T>,
    step: u64,
}

/// Named parameters in registration order plus Adam moment estimates.
pub struct ParameterStore<T: Scalar> {
    entries: IndexMap<String, Param<T>>,
}

/// Adam hyperparameters; the defaults are the de facto standard constants.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    /// Register a parameter; names must be unique.
    pub fn register(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) {
        let shape = value.shape().to_vec();
        let prev = self.entries.insert(
            name.to_string(),
            Param {
                value,
                kind,
                adam_m: Tensor::zeros(shape.clone()),
                adam_v: Tensor::zeros(shape),
                step: 0,
            },
        );
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|p| p.kind)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, ParamKind)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), &p.value, p.kind))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) {
        let p = self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(p.value.shape(), value.shape(), "shape change for {name}");
        p.value = value;
    }

    /// Snapshot of all parameter values (used for best-epoch restore).
    pub fn values_snapshot(&self) -> HashMap<String, Tensor<T>> {
        self.entries.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect()
    }

    pub fn restore_snapshot(&mut self, snap: &HashMap<String, Tensor<T>>) {
        for (name, value) in snap {
            self.set_value(name, value.clone());
        }
    }

    /// Sum of squared entries over weight-kind parameters only.
    pub fn l2_penalty(&self) -> T {
        let mut acc = T::zero();
        for p in self.entries.values() {
            if p.kind == ParamKind::Weight {
                for &w in p.value.data() {
                    acc += w * w;
                }
            }
        }
        acc
    }

    /// One bias-corrected Adam update in place. `grads` must cover every
    /// registered parameter; NaN gradients are rejected.
    pub fn adam_step(
        &mut self,
        grads: &HashMap<String, Tensor<T>>,
        lr: f64,
        cfg: AdamConfig,
    ) -> Result<(), NnError> {
        for name in self.entries.keys() {
            if !grads.contains_key(name) {
                return Err(NnError::MissingGradient(name.clone()));
            }
        }
        let beta1 = T::from_f64_lossy(cfg.beta1);
        let beta2 = T::from_f64_lossy(cfg.beta2);
        let eps = T::from_f64_lossy(cfg.eps);
        let lr = T::from_f64_lossy(lr);
        let one = T::one();
        for (name, p) in self.entries.iter_mut() {
            let g = &grads[name];
            assert_eq!(g.shape(), p.value.shape(), "gradient shape for {name}");
            if !g.all_finite() {
                return Err(NnError::NonFinite { op: "adam_step" });
            }
            p.step += 1;
            let bc1 = one - beta1.powi(p.step as i32);
            let bc2 = one - beta2.powi(p.step as i32);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let m = beta1 * p.adam_m.data()[i] + (one - beta1) * gi;
                let v = beta2 * p.adam_v.data()[i] + (one - beta2) * gi * gi;
                p.adam_m.data_mut()[i] = m;
                p.adam_v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p.value.data_mut()[i] = p.value.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Write the checkpoint. Line-oriented text format:
    ///
    /// ```text
    /// astgin-checkpoint 1
    /// scalar <f32|f64>
    /// tensor <name> <kind> <rank> <dim>...
    /// <row-major values, space separated, shortest round-trip decimals>
    /// ...
    /// end
    /// ```
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        let mut write = |s: String| w.write_all(s.as_bytes()).map_err(io_err);
        write("astgin-checkpoint 1\n".to_string())?;
        write(format!("scalar {}\n", T::NAME))?;
        for (name, p) in &self.entries {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            write(format!(
                "tensor {} {} {} {}\n",
                name,
                p.kind.tag(),
                p.value.shape().len(),
                dims.join(" ")
            ))?;
            let vals: Vec<String> = p.value.data().iter().map(|v| format!("{v}")).collect();
            write(format!("{}\n", vals.join(" ")))?;
        }
        write("end\n".to_string())?;
        w.flush().map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Read a checkpoint written by [`ParameterStore::save`] with the same
    /// scalar type. Adam state starts fresh.
    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let file = std::fs::File::open(path).map_err(io_err)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();
        let mut next_line = |expect: &str| -> Result<(usize, String), CheckpointError> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(source))) => Err(CheckpointError::Io {
                    path: path.display().to_string(),
                    source,
                })
                .map_err(|e| {
                    let _ = i;
                    e
                }),
                None => Err(CheckpointError::Malformed {
                    line: 0,
                    detail: format!("unexpected end of file, expected {expect}"),
                }),
            }
        };

        let (ln, header) = next_line("header")?;
        let version: u32 = header
            .strip_prefix("astgin-checkpoint ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| CheckpointError::Malformed { line: ln, detail: header.clone() })?;
        if version != 1 {
            return Err(CheckpointError::Version(version));
        }
        let (ln, scalar) = next_line("scalar line")?;
        let found = scalar
            .strip_prefix("scalar ")
            .map(|s| s.trim().to_string())
            .ok_or_else(|| CheckpointError::Malformed { line: ln, detail: scalar.clone() })?;
        if found != T::NAME {
            return Err(CheckpointError::ScalarMismatch {
                found,
                expected: T::NAME.to_string(),
            });
        }

        let mut store = Self::new();
        loop {
            let (ln, line) = next_line("tensor or end")?;
            if line.trim() == "end" {
                break;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let malformed = |detail: String| CheckpointError::Malformed { line: ln, detail };
            if parts.len() < 4 || parts[0] != "tensor" {
                return Err(malformed(line.clone()));
            }
            let name = parts[1];
            let kind = ParamKind::from_tag(parts[2])
                .ok_or_else(|| malformed(format!("unknown kind {}", parts[2])))?;
            let rank: usize =
                parts[3].parse().map_err(|_| malformed(format!("bad rank {}", parts[3])))?;
            if parts.len() != 4 + rank {
                return Err(malformed(format!("expected {} dims", rank)));
            }
            let mut shape = Vec::with_capacity(rank);
            for d in &parts[4..] {
                shape.push(d.parse().map_err(|_| malformed(format!("bad dim {d}")))?);
            }
            let (vln, values_line) = next_line("values")?;
            let mut data = Vec::with_capacity(shape.iter().product());
            for v in values_line.split_whitespace() {
                let parsed: f64 = v.parse().map_err(|_| CheckpointError::Malformed {
                    line: vln,
                    detail: format!("bad value {v}"),
                })?;
                data.push(T::from_f64_lossy(parsed));
            }
            if data.len() != shape.iter().product::<usize>() {
                return Err(CheckpointError::Malformed {
                    line: vln,
                    detail: format!("expected {} values, got {}", shape.iter().product::<usize>(), data.len()),
                });
            }
            store.register(name, Tensor::from_vec(shape, data), kind);
        }
        Ok(store)
    }
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Xavier/Glorot uniform init: `U(-a, a)` with `a = sqrt(6/(fan_in+fan_out))`.
/// Draws in f64 so f32 and f64 stores start from the same stream.
pub fn xavier_uniform<T: Scalar>(shape: [usize; 2], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.gen_range(-limit..limit)))
}

/// Graph leaves for every parameter of a store, addressable by name.
pub struct BoundParams {
    vars: HashMap<String, (Var, ParamKind)>,
}

impl BoundParams {
    /// Insert one differentiable leaf per parameter.
    pub fn bind<T: Scalar>(
        graph: &mut Graph<T>,
        store: &ParameterStore<T>,
    ) -> Result<Self, NnError> {
        let mut vars = HashMap::with_capacity(store.len());
        for (name, value, kind) in store.iter() {
            let var = graph.param(value.clone())?;
            vars.insert(name.to_string(), (var, kind));
        }
        Ok(Self { vars })
    }

    /// Wrap pre-existing graph vars (gradient-check harnesses own the leaves).
    pub fn from_vars(vars: impl IntoIterator<Item = (String, (Var, ParamKind))>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var, NnError> {
        self.vars
            .get(name)
            .map(|&(v, _)| v)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    /// All weight-kind vars, in sorted-name order for deterministic sums.
    pub fn weight_vars(&self) -> Vec<Var> {
        let mut named: Vec<(&str, Var)> = self
            .vars
            .iter()
            .filter(|(_, (_, kind))| *kind == ParamKind::Weight)
            .map(|(n, (v, _))| (n.as_str(), *v))
            .collect();
        named.sort_by_key(|(n, _)| *n);
        named.into_iter().map(|(_, v)| v).collect()
    }

    /// Collect gradients after backward, keyed by parameter name.
    pub fn gradients<T: Scalar>(
        &self,
        graph: &Graph<T>,
    ) -> Result<HashMap<String, Tensor<T>>, NnError> {
        let mut out = HashMap::with_capacity(self.vars.len());
        for (name, &(var, _)) in &self.vars {
            let grad = graph
                .grad(var)
                .ok_or_else(|| NnError::MissingGradient(name.clone()))?
                .clone();
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of<T: Scalar>(
        store: &ParameterStore<T>,
        f: impl Fn(&str) -> Tensor<T>,
    ) -> HashMap<String, Tensor<T>> {
        store.names().map(|n| (n.to_string(), f(n))).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParameterStore::<f64>::new();
        store.register("w", Tensor::from_vec(vec![2], vec![1.0, -2.0]), ParamKind::Weight);
        let grads = grads_of(&store, |_| Tensor::zeros([2]));
        store.adam_step(&grads, 0.1, AdamConfig::default()).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        // closed form: first update = lr * g / (|g| + eps') ≈ lr * sign(g)
        let mut store = ParameterStore::<f64>::new();
        store.register("w", Tensor::from_vec(vec![2], vec![0.0, 0.0]), ParamKind::Weight);
        let grads = grads_of(&store, |_| Tensor::from_vec(vec![2], vec![3.0, -0.7]));
        store.adam_step(&grads, 0.01, AdamConfig::default()).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] + 0.01).abs() < 1e-6, "{w:?}");
        assert!((w[1] - 0.01).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn identical_calls_from_identical_state_agree() {
        let run = || {
            let mut store = ParameterStore::<f64>::new();
            store.register("w", Tensor::from_vec(vec![2], vec![0.5, 1.5]), ParamKind::Weight);
            let grads = grads_of(&store, |_| Tensor::from_vec(vec![2], vec![0.2, -0.1]));
            for _ in 0..5 {
                store.adam_step(&grads, 0.05, AdamConfig::default()).unwrap();
            }
            store.get("w").unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut store = ParameterStore::<f64>::new();
        store.register("w", Tensor::scalar(1.0), ParamKind::Weight);
        let grads = grads_of(&store, |_| Tensor::scalar(f64::NAN));
        assert!(matches!(
            store.adam_step(&grads, 0.1, AdamConfig::default()),
            Err(NnError::NonFinite { .. })
        ));
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut store = ParameterStore::<f64>::new();
        store.register("w", Tensor::scalar(1.0), ParamKind::Weight);
        let grads = HashMap::new();
        assert!(matches!(
            store.adam_step(&grads, 0.1, AdamConfig::default()),
            Err(NnError::MissingGradient(_))
        ));
    }

    #[test]
    fn l2_penalty_counts_weights_only() {
        let mut store = ParameterStore::<f64>::new();
        store.register("w", Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]), ParamKind::Weight);
        assert_eq!(store.l2_penalty(), 5.0);
        store.register("b", Tensor::from_vec(vec![2], vec![10.0, 10.0]), ParamKind::Bias);
        store.register("n", Tensor::from_vec(vec![2], vec![3.0, 3.0]), ParamKind::Norm);
        assert_eq!(store.l2_penalty(), 5.0);
        let empty = ParameterStore::<f64>::new();
        assert_eq!(empty.l2_penalty(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        let mut store = ParameterStore::<f32>::new();
        store.register(
            "layer.w",
            Tensor::from_fn([3, 2], |i| (i as f32) * 0.123456789 - 0.3),
            ParamKind::Weight,
        );
        store.register("layer.b", Tensor::from_vec(vec![2], vec![1e-7f32, -2.5]), ParamKind::Bias);
        store.save(&path).unwrap();
        let loaded = ParameterStore::<f32>::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get("layer.w").unwrap(), store.get("layer.w").unwrap());
        assert_eq!(loaded.get("layer.b").unwrap(), store.get("layer.b").unwrap());
        assert_eq!(loaded.kind("layer.b"), Some(ParamKind::Bias));
    }

    #[test]
    fn checkpoint_scalar_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        let mut store = ParameterStore::<f64>::new();
        store.register("w", Tensor::scalar(1.0), ParamKind::Weight);
        store.save(&path).unwrap();
        assert!(matches!(
            ParameterStore::<f32>::load(&path),
            Err(CheckpointError::ScalarMismatch { .. })
        ));
    }
}
