//! Weighted undirected station graph: great-circle distances, Gaussian-kernel
//! adjacency with a distance cutoff, and the self-loop symmetric
//! normalization consumed by the graph-convolution layers.

use crate::nncore::Tensor;
use thiserror::Error;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("coordinate out of range for station index {index}: lat {lat}, lon {lon}")]
    CoordinateOutOfRange { index: usize, lat: f64, lon: f64 },
    #[error("degenerate bandwidth: sigma must be positive, got {0}")]
    DegenerateBandwidth(f64),
    #[error("kappa must be positive, got {0}")]
    NonPositiveKappa(f64),
    #[error("adjacency has negative entry {value} at ({row},{col})")]
    NegativeAdjacency { row: usize, col: usize, value: f64 },
    #[error("distance matrix invalid: {0}")]
    InvalidDistanceMatrix(String),
    #[error("graph needs at least two stations, got {0}")]
    TooFewStations(usize),
    #[error("station count mismatch: {0}")]
    StationCountMismatch(String),
}

/// Station graph with raw distances, kernel adjacency `A`, and normalized
/// adjacency `A_hat` ready for convolution.
#[derive(Debug, Clone)]
pub struct StationGraph {
    pub station_ids: Vec<String>,
    /// (lat, lon) degrees per station; absent when built from a distance matrix.
    pub coords: Option<Vec<(f64, f64)>>,
    pub dist: Tensor<f64>,
    pub adjacency: Tensor<f64>,
    pub normalized: Tensor<f64>,
    pub sigma: f64,
    pub kappa: f64,
}

/// Haversine great-circle distance matrix in meters.
pub fn pairwise_distance(coords: &[(f64, f64)]) -> Result<Tensor<f64>, GraphError> {
    for (index, &(lat, lon)) in coords.iter().enumerate() {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(GraphError::CoordinateOutOfRange { index, lat, lon });
        }
    }
    let n = coords.len();
    let mut dist = Tensor::zeros([n, n]);
    for a in 0..n {
        for b in (a + 1)..n {
            let d = haversine(coords[a], coords[b]);
            dist.set2(a, b, d);
            dist.set2(b, a, d);
        }
    }
    Ok(dist)
}

fn haversine((lat_a, lon_a): (f64, f64), (lat_b, lon_b): (f64, f64)) -> f64 {
    let phi_a = lat_a.to_radians();
    let phi_b = lat_b.to_radians();
    let d_phi = (lat_b - lat_a).to_radians();
    let d_lambda = (lon_b - lon_a).to_radians();
    let s = (d_phi / 2.0).sin().powi(2)
        + phi_a.cos() * phi_b.cos() * (d_lambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * s.sqrt().min(1.0).asin()
}

/// Population standard deviation of the off-diagonal upper-triangle distances.
pub fn default_sigma(dist: &Tensor<f64>) -> Result<f64, GraphError> {
    let n = dist.shape()[0];
    if n < 2 {
        return Err(GraphError::TooFewStations(n));
    }
    let mut values = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in (a + 1)..n {
            values.push(dist.at2(a, b));
        }
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    Ok(var.sqrt())
}

/// Nearest-rank 95th percentile of off-diagonal distances, the default cutoff.
pub fn default_kappa(dist: &Tensor<f64>) -> Result<f64, GraphError> {
    let n = dist.shape()[0];
    if n < 2 {
        return Err(GraphError::TooFewStations(n));
    }
    let mut values = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in (a + 1)..n {
            values.push(dist.at2(a, b));
        }
    }
    values.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = ((0.95 * values.len() as f64).ceil() as usize).clamp(1, values.len());
    Ok(values[rank - 1])
}

/// Gaussian-kernel adjacency: `exp(-d²/σ²)` where `d ≤ κ`, else 0.
pub fn build_adjacency(
    dist: &Tensor<f64>,
    sigma: f64,
    kappa: f64,
) -> Result<Tensor<f64>, GraphError> {
    if !(sigma > 0.0) {
        return Err(GraphError::DegenerateBandwidth(sigma));
    }
    if !(kappa > 0.0) {
        return Err(GraphError::NonPositiveKappa(kappa));
    }
    validate_distance_matrix(dist)?;
    let n = dist.shape()[0];
    let mut a = Tensor::zeros([n, n]);
    for i in 0..n {
        for j in 0..n {
            let d = dist.at2(i, j);
            if d <= kappa {
                a.set2(i, j, (-(d * d) / (sigma * sigma)).exp());
            }
        }
    }
    Ok(a)
}

fn validate_distance_matrix(dist: &Tensor<f64>) -> Result<(), GraphError> {
    let shape = dist.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(GraphError::InvalidDistanceMatrix(format!("shape {shape:?} not square")));
    }
    let n = shape[0];
    for i in 0..n {
        if dist.at2(i, i) != 0.0 {
            return Err(GraphError::InvalidDistanceMatrix(format!(
                "nonzero diagonal at {i}: {}",
                dist.at2(i, i)
            )));
        }
        for j in 0..n {
            let d = dist.at2(i, j);
            if d < 0.0 || !d.is_finite() {
                return Err(GraphError::InvalidDistanceMatrix(format!(
                    "invalid entry {d} at ({i},{j})"
                )));
            }
            if (d - dist.at2(j, i)).abs() > 1e-9 * d.abs().max(1.0) {
                return Err(GraphError::InvalidDistanceMatrix(format!(
                    "asymmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

/// Self-loop symmetric normalization `D̃^{-1/2} (A + I) D̃^{-1/2}`.
pub fn normalize_adjacency(a: &Tensor<f64>) -> Result<Tensor<f64>, GraphError> {
    let n = a.shape()[0];
    assert_eq!(a.shape(), [n, n], "adjacency must be square");
    for i in 0..n {
        for j in 0..n {
            let v = a.at2(i, j);
            if v < 0.0 {
                return Err(GraphError::NegativeAdjacency { row: i, col: j, value: v });
            }
        }
    }
    let mut deg_inv_sqrt = vec![0.0; n];
    for i in 0..n {
        let mut d = 1.0; // self loop
        for j in 0..n {
            d += a.at2(i, j);
        }
        deg_inv_sqrt[i] = 1.0 / d.sqrt();
    }
    let mut out = Tensor::zeros([n, n]);
    for i in 0..n {
        for j in 0..n {
            let a_tilde = a.at2(i, j) + if i == j { 1.0 } else { 0.0 };
            out.set2(i, j, deg_inv_sqrt[i] * a_tilde * deg_inv_sqrt[j]);
        }
    }
    Ok(out)
}

impl StationGraph {
    /// Build from coordinates; `sigma`/`kappa` fall back to the distance
    /// standard deviation and 95th-percentile cutoff.
    pub fn from_coords(
        station_ids: Vec<String>,
        coords: Vec<(f64, f64)>,
        sigma: Option<f64>,
        kappa: Option<f64>,
    ) -> Result<Self, GraphError> {
        if station_ids.len() != coords.len() {
            return Err(GraphError::StationCountMismatch(format!(
                "{} ids vs {} coordinates",
                station_ids.len(),
                coords.len()
            )));
        }
        let dist = pairwise_distance(&coords)?;
        Self::assemble(station_ids, Some(coords), dist, sigma, kappa)
    }

    /// Build from a precomputed distance matrix (road-distance override).
    pub fn from_distance_matrix(
        station_ids: Vec<String>,
        dist: Tensor<f64>,
        sigma: Option<f64>,
        kappa: Option<f64>,
    ) -> Result<Self, GraphError> {
        if station_ids.len() != dist.shape()[0] {
            return Err(GraphError::StationCountMismatch(format!(
                "{} ids vs {}x{} distance matrix",
                station_ids.len(),
                dist.shape()[0],
                dist.shape().get(1).copied().unwrap_or(0),
            )));
        }
        validate_distance_matrix(&dist)?;
        Self::assemble(station_ids, None, dist, sigma, kappa)
    }

    fn assemble(
        station_ids: Vec<String>,
        coords: Option<Vec<(f64, f64)>>,
        dist: Tensor<f64>,
        sigma: Option<f64>,
        kappa: Option<f64>,
    ) -> Result<Self, GraphError> {
        let sigma = match sigma {
            Some(s) => s,
            None => default_sigma(&dist)?,
        };
        let kappa = match kappa {
            Some(k) => k,
            None => default_kappa(&dist)?,
        };
        let adjacency = build_adjacency(&dist, sigma, kappa)?;
        let normalized = normalize_adjacency(&adjacency)?;
        Ok(Self { station_ids, coords, dist, adjacency, normalized, sigma, kappa })
    }

    pub fn n_stations(&self) -> usize {
        self.station_ids.len()
    }
}
