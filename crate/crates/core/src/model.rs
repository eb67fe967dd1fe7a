//! Item characteristic curves and ability-space quadrature.

use serde::{Deserialize, Serialize};

use crate::stats::{logistic, normal_pdf};

/// Logistic model family for a dichotomous item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "2PL")]
    TwoPl,
    #[serde(rename = "3PL")]
    ThreePl,
}

/// Maximum admissible guessing probability.
pub const GUESSING_MAX: f64 = 0.5;

/// Parameters of one item's characteristic curve, in slope-intercept form:
/// p(theta) = c + (1 - c) * logistic(a . theta + d).
///
/// For one-factor models the classic difficulty is b = -d / a.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemParameters {
    /// Slope (discrimination) per factor; length 1 or 2.
    pub slopes: Vec<f64>,
    /// Intercept d.
    pub intercept: f64,
    /// Lower asymptote c; 0 for 2PL items.
    pub guessing: f64,
    pub kind: ModelKind,
}

impl ItemParameters {
    /// One-factor 2PL item from (slope, difficulty).
    pub fn two_pl(a: f64, b: f64) -> Self {
        Self {
            slopes: vec![a],
            intercept: -a * b,
            guessing: 0.0,
            kind: ModelKind::TwoPl,
        }
    }

    /// One-factor 3PL item from (slope, difficulty, guessing).
    pub fn three_pl(a: f64, b: f64, c: f64) -> Self {
        debug_assert!((0.0..1.0).contains(&c));
        Self {
            slopes: vec![a],
            intercept: -a * b,
            guessing: c,
            kind: ModelKind::ThreePl,
        }
    }

    /// Multi-factor item in slope-intercept form.
    pub fn slope_intercept(slopes: Vec<f64>, intercept: f64, guessing: f64, kind: ModelKind) -> Self {
        debug_assert!(matches!(slopes.len(), 1 | 2));
        Self {
            slopes,
            intercept,
            guessing,
            kind,
        }
    }

    pub fn factors(&self) -> usize {
        self.slopes.len()
    }

    /// Classic difficulty b = -d/a, defined for one-factor items with a != 0.
    pub fn difficulty(&self) -> Option<f64> {
        match self.slopes.as_slice() {
            [a] if *a != 0.0 => Some(-self.intercept / a),
            _ => None,
        }
    }

    /// Parameter count ignoring structural constraints (slopes + intercept,
    /// + guessing for 3PL). The fitter subtracts anchoring constraints when
    /// totalling free parameters.
    pub fn parameter_count(&self) -> usize {
        self.slopes.len() + 1 + usize::from(self.kind == ModelKind::ThreePl)
    }

    /// Probability of a correct response at ability point `theta`
    /// (one coordinate per factor).
    pub fn prob(&self, theta: &[f64]) -> f64 {
        debug_assert_eq!(theta.len(), self.factors());
        let z: f64 = self
            .slopes
            .iter()
            .zip(theta)
            .map(|(a, t)| a * t)
            .sum::<f64>()
            + self.intercept;
        self.guessing + (1.0 - self.guessing) * logistic(z)
    }

    /// One-factor convenience wrapper around [`prob`](Self::prob).
    pub fn prob1(&self, theta: f64) -> f64 {
        self.prob(std::slice::from_ref(&theta))
    }
}

/// Probability of a correct response under the 3PL curve
/// p = c + (1 - c) / (1 + exp(-a (theta - b))), with the 2PL as the c = 0
/// special case.
pub fn icc_probability(params: &ItemParameters, theta: &[f64]) -> f64 {
    params.prob(theta)
}

/// Fixed quadrature over the latent ability space: equally spaced nodes with
/// standard-normal prior mass, renormalized to sum to one. Two-factor grids
/// are tensor products with independent standard-normal factors.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    factors: usize,
    /// K x factors, row-major.
    nodes: Vec<f64>,
    /// Prior mass per node; sums to 1.
    weights: Vec<f64>,
}

pub const DEFAULT_NODES_1D: usize = 61;
pub const DEFAULT_NODES_PER_DIM_2D: usize = 31;
pub const DEFAULT_RANGE: (f64, f64) = (-6.0, 6.0);

impl QuadratureGrid {
    /// Equally spaced grid on `[lo, hi]` per dimension. A single node lands
    /// at the interval midpoint.
    pub fn equally_spaced(nodes_per_dim: usize, (lo, hi): (f64, f64), factors: usize) -> Self {
        assert!(nodes_per_dim >= 1);
        assert!(matches!(factors, 1 | 2));
        let axis: Vec<f64> = if nodes_per_dim == 1 {
            vec![(lo + hi) / 2.0]
        } else {
            let h = (hi - lo) / (nodes_per_dim - 1) as f64;
            (0..nodes_per_dim).map(|i| lo + h * i as f64).collect()
        };
        let (nodes, mut weights) = match factors {
            1 => (
                axis.clone(),
                axis.iter().map(|&t| normal_pdf(t)).collect::<Vec<_>>(),
            ),
            2 => {
                let mut nodes = Vec::with_capacity(nodes_per_dim * nodes_per_dim * 2);
                let mut weights = Vec::with_capacity(nodes_per_dim * nodes_per_dim);
                for &t1 in &axis {
                    for &t2 in &axis {
                        nodes.push(t1);
                        nodes.push(t2);
                        weights.push(normal_pdf(t1) * normal_pdf(t2));
                    }
                }
                (nodes, weights)
            }
            _ => unreachable!(),
        };
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Self {
            factors,
            nodes,
            weights,
        }
    }

    /// Default grid for the requested factor count: 61 nodes on [-6, 6] for
    /// one factor, a 31 x 31 tensor grid for two.
    pub fn default_for(factors: usize) -> Self {
        match factors {
            1 => Self::equally_spaced(DEFAULT_NODES_1D, DEFAULT_RANGE, 1),
            2 => Self::equally_spaced(DEFAULT_NODES_PER_DIM_2D, DEFAULT_RANGE, 2),
            other => panic!("unsupported factor count {other}"),
        }
    }

    /// Degenerate one-node grid at a fixed ability point.
    pub fn single_node(theta: f64) -> Self {
        Self {
            factors: 1,
            nodes: vec![theta],
            weights: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.factors..(k + 1) * self.factors]
    }

    /// First ability coordinate of node `k` (the node itself for 1-D grids).
    pub fn node1(&self, k: usize) -> f64 {
        self.nodes[k * self.factors]
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}
