//! Per-timestep fleet graphs and their fusion.
//!
//! Every input frame yields two fully-connected graphs over the buses — one
//! weighted by pairwise distance, one by speed similarity — and all of a
//! window's matrices are summed elementwise into a single fused adjacency
//! that drives one graph-attention pass for the whole window. Edge weights
//! use exponential kernels `exp(-d/sigma)` so they stay in (0, 1] and decay
//! smoothly; self-loops carry weight 1 so every row sum is positive.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::haversine_m;
use crate::ingest::WindowSample;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("{op}: matrices have mixed sizes ({a} vs {b})")]
    MixedSizes { op: &'static str, a: usize, b: usize },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
}

fn contract(op: &'static str, detail: impl Into<String>) -> GraphError {
    GraphError::Contract {
        op,
        detail: detail.into(),
    }
}

/// Dense symmetric adjacency with non-negative weights, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyMatrix {
    pub n: usize,
    pub weights: Vec<f64>,
}

impl AdjacencyMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (i + 1..self.n).all(|j| (self.at(i, j) - self.at(j, i)).abs() <= tol))
    }
}

/// Elementwise sum of a set of adjacency matrices, with the number of
/// summed sources recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedAdjacency {
    pub n: usize,
    pub weights: Vec<f64>,
    pub source_count: usize,
}

impl FusedAdjacency {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }
}

/// Kernel scales for the two feature graphs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Distance scale in meters for the position graph.
    pub sigma_d_m: f64,
    /// Speed-difference scale in km/h for the speed graph.
    pub sigma_v_kmh: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            sigma_d_m: 1000.0,
            sigma_v_kmh: 10.0,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.sigma_d_m > 0.0) || !(self.sigma_v_kmh > 0.0) {
            return Err("graph sigmas must be > 0".into());
        }
        Ok(())
    }
}

/// `a_ij = exp(-haversine(i, j) / sigma_d)` off the diagonal, 1 on it.
pub fn build_position_graph(
    positions: &[(f64, f64)],
    sigma_d_m: f64,
) -> Result<AdjacencyMatrix, GraphError> {
    let n = positions.len();
    if n < 2 {
        return Err(contract("build_position_graph", format!("need >= 2 nodes, got {n}")));
    }
    if !(sigma_d_m > 0.0) {
        return Err(contract("build_position_graph", "sigma_d must be > 0"));
    }
    if positions.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(GraphError::NonFinite {
            op: "build_position_graph",
        });
    }
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        weights[i * n + i] = 1.0;
        for j in i + 1..n {
            let w = (-haversine_m(positions[i], positions[j]) / sigma_d_m).exp();
            weights[i * n + j] = w;
            weights[j * n + i] = w;
        }
    }
    Ok(AdjacencyMatrix { n, weights })
}

/// `a_ij = exp(-|v_i - v_j| / sigma_v)` off the diagonal, 1 on it.
pub fn build_speed_graph(speeds: &[f64], sigma_v_kmh: f64) -> Result<AdjacencyMatrix, GraphError> {
    let n = speeds.len();
    if n < 2 {
        return Err(contract("build_speed_graph", format!("need >= 2 nodes, got {n}")));
    }
    if !(sigma_v_kmh > 0.0) {
        return Err(contract("build_speed_graph", "sigma_v must be > 0"));
    }
    if speeds.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(contract("build_speed_graph", "speeds must be finite and >= 0"));
    }
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        weights[i * n + i] = 1.0;
        for j in i + 1..n {
            let w = (-(speeds[i] - speeds[j]).abs() / sigma_v_kmh).exp();
            weights[i * n + j] = w;
            weights[j * n + i] = w;
        }
    }
    Ok(AdjacencyMatrix { n, weights })
}

/// Elementwise sum of the given matrices, accumulated left to right.
pub fn fuse(matrices: &[AdjacencyMatrix]) -> Result<FusedAdjacency, GraphError> {
    let first = matrices.first().ok_or_else(|| contract("fuse", "empty matrix list"))?;
    let n = first.n;
    let mut weights = vec![0.0; n * n];
    for m in matrices {
        if m.n != n {
            return Err(GraphError::MixedSizes {
                op: "fuse",
                a: n,
                b: m.n,
            });
        }
        for (acc, w) in weights.iter_mut().zip(&m.weights) {
            *acc += w;
        }
    }
    Ok(FusedAdjacency {
        n,
        weights,
        source_count: matrices.len(),
    })
}

/// Divides each row by its sum so attention inputs do not scale with the
/// number of fused sources. Self-loops guarantee positive row sums; a zero
/// row is still rejected in case a caller bypassed the builders.
pub fn row_normalize(fused: &FusedAdjacency) -> Result<AdjacencyMatrix, GraphError> {
    let n = fused.n;
    let mut weights = fused.weights.clone();
    for i in 0..n {
        let row = &mut weights[i * n..(i + 1) * n];
        let sum: f64 = row.iter().sum();
        if !(sum > 0.0) {
            return Err(contract("row_normalize", format!("row {i} sums to {sum}")));
        }
        for w in row {
            *w /= sum;
        }
    }
    Ok(AdjacencyMatrix { n, weights })
}

/// Everything the model needs from one window's graphs: the per-frame
/// matrices plus the row-normalized fusion of all of them.
#[derive(Debug, Clone)]
pub struct WindowGraphs {
    pub position: Vec<AdjacencyMatrix>,
    pub speed: Vec<AdjacencyMatrix>,
    pub fused: FusedAdjacency,
    pub normalized: AdjacencyMatrix,
}

/// Builds both feature graphs for every input frame of a window (in
/// denormalized units), fuses all `2 * l_in` matrices into one adjacency,
/// and row-normalizes it for the attention stack.
pub fn build_sequence(
    window: &WindowSample,
    stats: &crate::ingest::NormStats,
    config: &GraphConfig,
) -> Result<WindowGraphs, GraphError> {
    let n = window.n_buses;
    let mut position = Vec::with_capacity(window.l_in);
    let mut speed = Vec::with_capacity(window.l_in);
    for t in 0..window.l_in {
        let mut positions = Vec::with_capacity(n);
        let mut speeds = Vec::with_capacity(n);
        for b in 0..n {
            positions.push((
                stats.denormalize(0, window.input_at(t, b, 0)),
                stats.denormalize(1, window.input_at(t, b, 1)),
            ));
            speeds.push(stats.denormalize(2, window.input_at(t, b, 2)).max(0.0));
        }
        position.push(build_position_graph(&positions, config.sigma_d_m)?);
        speed.push(build_speed_graph(&speeds, config.sigma_v_kmh)?);
    }
    let all: Vec<AdjacencyMatrix> = position.iter().chain(speed.iter()).cloned().collect();
    let fused = fuse(&all)?;
    let normalized = row_normalize(&fused)?;
    Ok(WindowGraphs {
        position,
        speed,
        fused,
        normalized,
    })
}
