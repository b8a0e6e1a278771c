//! Attribute augmentation: fuse each availability window with the static POI
//! one-hots and the full dynamic-attribute window into one feature block per
//! input step.
//!
//! For every step of the window the station rows are the concatenation
//! `[x_t | alpha | beta over all L+1 steps]`, giving `K = p + 1 + w*(L+1)`
//! columns; the attribute blocks repeat across steps while column 0 carries
//! the step's raw availability.

use crate::ingest::{StaticAttributes, WindowSample, WindowSet};
use crate::nncore::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("axis mismatch on {axis}: {detail}")]
    AxisMismatch { axis: &'static str, detail: String },
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<AugmentError>,
    },
    #[error("no samples to augment")]
    Empty,
}

/// One augmented training sample: input feature tensor and target matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    /// [L+1, N, K]
    pub e: Tensor<f64>,
    /// [M, N]
    pub y: Tensor<f64>,
    /// First input step index in the source series.
    pub start: usize,
}

/// Feature width for `p` static categories and `w` dynamic factors over an
/// `L+1`-step window.
pub fn feature_width(p: usize, w: usize, l: usize) -> usize {
    p + 1 + w * (l + 1)
}

/// Build the augmented matrix `E` for one window.
///
/// `x_window` is `[L+1, N]`; `alpha` is `[N, p]` (may have p = 0 columns via
/// `None`); `beta_window` is `[L+1, N, w]` (w = 0 via `None`).
pub fn augment(
    x_window: &Tensor<f64>,
    alpha: Option<&Tensor<f64>>,
    beta_window: Option<&Tensor<f64>>,
) -> Result<Tensor<f64>, AugmentError> {
    let xs = x_window.shape();
    if xs.len() != 2 {
        return Err(AugmentError::AxisMismatch {
            axis: "x_window",
            detail: format!("expected [L+1, N], got {xs:?}"),
        });
    }
    let (steps, n) = (xs[0], xs[1]);
    let p = match alpha {
        Some(a) => {
            if a.shape().len() != 2 || a.shape()[0] != n {
                return Err(AugmentError::AxisMismatch {
                    axis: "alpha",
                    detail: format!("expected [{n}, p], got {:?}", a.shape()),
                });
            }
            a.shape()[1]
        }
        None => 0,
    };
    let w = match beta_window {
        Some(b) => {
            if b.shape().len() != 3 || b.shape()[0] != steps || b.shape()[1] != n {
                return Err(AugmentError::AxisMismatch {
                    axis: "beta_window",
                    detail: format!("expected [{steps}, {n}, w], got {:?}", b.shape()),
                });
            }
            b.shape()[2]
        }
        None => 0,
    };

    let k = feature_width(p, w, steps - 1);
    let mut e = Tensor::zeros([steps, n, k]);
    for t in 0..steps {
        for si in 0..n {
            let base = (t * n + si) * k;
            let row = &mut e.data_mut()[base..base + k];
            row[0] = x_window.at2(t, si);
            if let Some(a) = alpha {
                for c in 0..p {
                    row[1 + c] = a.at2(si, c);
                }
            }
            if let Some(b) = beta_window {
                // cumulative dynamic block: the whole window, identical at
                // every output step
                for s in 0..steps {
                    for wi in 0..w {
                        row[1 + p + s * w + wi] = b.at3(s, si, wi);
                    }
                }
            }
        }
    }
    Ok(e)
}

/// Which attribute blocks to keep when augmenting a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttributeSelection {
    pub use_static: bool,
    pub use_dynamic: bool,
}

impl AttributeSelection {
    pub fn all() -> Self {
        Self { use_static: true, use_dynamic: true }
    }

    pub fn none() -> Self {
        Self { use_static: false, use_dynamic: false }
    }
}

fn augment_sample(
    sample: &WindowSample,
    alpha: Option<&Tensor<f64>>,
    selection: AttributeSelection,
) -> Result<AugmentedSample, AugmentError> {
    let alpha = if selection.use_static { alpha } else { None };
    let beta = if selection.use_dynamic && sample.beta.shape()[2] > 0 {
        Some(&sample.beta)
    } else {
        None
    };
    Ok(AugmentedSample {
        e: augment(&sample.x, alpha, beta)?,
        y: sample.y.clone(),
        start: sample.start,
    })
}

/// Augment every window of a set; targets pass through unchanged.
pub fn augment_dataset(
    windows: &WindowSet,
    alpha: Option<&StaticAttributes>,
    selection: AttributeSelection,
) -> Result<Vec<AugmentedSample>, AugmentError> {
    if windows.samples.is_empty() {
        return Err(AugmentError::Empty);
    }
    let alpha_matrix = alpha.map(|a| &a.alpha);
    windows
        .samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            augment_sample(s, alpha_matrix, selection)
                .map_err(|e| AugmentError::Sample { index, source: Box::new(e) })
        })
        .collect()
}
