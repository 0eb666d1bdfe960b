//! Discretization grids on [0, T].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A strictly increasing grid `t_0 = 0 < t_1 < ... < t_n = T`.
///
/// Uniform grids are the default throughout the crate, but nothing below
/// assumes uniformity: step sizes are always taken from the nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `n_steps` steps on `[0, horizon]`.
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "grid horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidParameter(
                "grid needs at least one step".into(),
            ));
        }
        let nodes = (0..=n_steps)
            .map(|k| horizon * k as f64 / n_steps as f64)
            .collect();
        Ok(TimeGrid { nodes })
    }

    /// Grid from explicit nodes; must start at 0 and be strictly increasing.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidParameter(
                "grid needs at least two nodes".into(),
            ));
        }
        if nodes[0] != 0.0 {
            return Err(Error::InvalidParameter(format!(
                "grid must start at 0, got {}",
                nodes[0]
            )));
        }
        for w in nodes.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "grid nodes must be strictly increasing and finite ({} -> {})",
                    w[0], w[1]
                )));
            }
        }
        Ok(TimeGrid { nodes })
    }

    /// Number of steps `n` (one less than the number of nodes).
    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    /// All nodes, including both endpoints.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// The node `t_k`.
    pub fn node(&self, k: usize) -> Result<f64> {
        self.nodes
            .get(k)
            .copied()
            .ok_or_else(|| Error::Index(format!("node {k} on a grid with {} nodes", self.nodes.len())))
    }

    /// Step length `t_{k+1} - t_k`.
    pub fn dt(&self, k: usize) -> Result<f64> {
        if k + 1 >= self.nodes.len() {
            return Err(Error::Index(format!(
                "step {k} on a grid with {} steps",
                self.n_steps()
            )));
        }
        Ok(self.nodes[k + 1] - self.nodes[k])
    }

    /// The horizon `T`.
    pub fn horizon(&self) -> f64 {
        *self.nodes.last().expect("grid has nodes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_has_expected_nodes() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(g.n_steps(), 4);
        assert_eq!(g.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.dt(2).unwrap(), 0.25);
        assert_eq!(g.horizon(), 1.0);
    }

    #[test]
    fn invalid_grids_are_rejected() {
        assert!(TimeGrid::uniform(0.0, 4).is_err());
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.1, 0.5]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.25]).is_err());
    }

    #[test]
    fn out_of_range_indices_error() {
        let g = TimeGrid::uniform(1.0, 2).unwrap();
        assert!(g.node(3).is_err());
        assert!(g.dt(2).is_err());
    }
}
