//! Interval meshes and regular cell-centred rectangular grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiscretizationGrid {
    /// Piecewise-linear elements between strictly increasing nodes.
    Interval { nodes: Vec<f64> },
    /// `nx * ny` cells covering `[lo, hi]`; one node at every cell centre,
    /// bilinear elements between neighbouring centres. Node `ix + nx * iy`.
    Rect {
        nx: usize,
        ny: usize,
        lo: [f64; 2],
        hi: [f64; 2],
    },
}

impl DiscretizationGrid {
    pub fn interval(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Grid(format!("need at least 2 nodes, got {}", nodes.len())));
        }
        if let Some(v) = nodes.iter().find(|v| !v.is_finite()) {
            return Err(Error::Grid(format!("non-finite node {v}")));
        }
        for (e, w) in nodes.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::Grid(format!(
                    "degenerate element {e}: nodes {} and {} are not strictly increasing",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self::Interval { nodes })
    }

    /// `n` equispaced nodes on `[0, 1]`.
    pub fn unit_interval(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Grid(format!("need at least 2 nodes, got {n}")));
        }
        let h = 1.0 / (n - 1) as f64;
        let mut nodes: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
        nodes[n - 1] = 1.0;
        Self::interval(nodes)
    }

    pub fn rect(nx: usize, ny: usize, lo: [f64; 2], hi: [f64; 2]) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Grid(format!("need at least 2x2 cells, got {nx}x{ny}")));
        }
        for a in 0..2 {
            if !(hi[a] > lo[a]) || !lo[a].is_finite() || !hi[a].is_finite() {
                return Err(Error::Grid(format!(
                    "degenerate extent on axis {a}: [{}, {}]",
                    lo[a], hi[a]
                )));
            }
        }
        Ok(Self::Rect { nx, ny, lo, hi })
    }

    /// The PET domain `[-15, 15]^2` split into `side * side` cells.
    pub fn pet_square(side: usize) -> Result<Self> {
        Self::rect(side, side, [-15.0, -15.0], [15.0, 15.0])
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Interval { .. } => 1,
            Self::Rect { .. } => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Interval { nodes } => nodes.len(),
            Self::Rect { nx, ny, .. } => nx * ny,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Midpoint of the domain, where the probe value `u_mid` is read.
    pub fn centre(&self) -> [f64; 2] {
        match self {
            Self::Interval { nodes } => [0.5 * (nodes[0] + nodes[nodes.len() - 1]), 0.0],
            Self::Rect { lo, hi, .. } => [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])],
        }
    }

    /// Cell sizes `(hx, hy)` of a rectangular grid.
    pub fn cell_size(&self) -> Option<(f64, f64)> {
        match self {
            Self::Rect { nx, ny, lo, hi } => {
                Some(((hi[0] - lo[0]) / *nx as f64, (hi[1] - lo[1]) / *ny as f64))
            }
            Self::Interval { .. } => None,
        }
    }

    /// Coordinates of node `i` (second entry is zero in 1D).
    pub fn coord(&self, i: usize) -> [f64; 2] {
        match self {
            Self::Interval { nodes } => [nodes[i], 0.0],
            Self::Rect { nx, lo, .. } => {
                let (hx, hy) = self.cell_size().unwrap();
                let (ix, iy) = (i % nx, i / nx);
                [lo[0] + (ix as f64 + 0.5) * hx, lo[1] + (iy as f64 + 0.5) * hy]
            }
        }
    }

    /// True when every 1D element has the same length (closed-form spectra apply).
    pub fn is_uniform(&self) -> bool {
        match self {
            Self::Interval { nodes } => {
                let h = (nodes[nodes.len() - 1] - nodes[0]) / (nodes.len() - 1) as f64;
                nodes.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-12 * h.max(1.0))
            }
            Self::Rect { .. } => true,
        }
    }

    /// Basis-function weights for evaluating a nodal field at `point`.
    /// Points outside the node hull are clamped onto it.
    pub fn interpolation_weights(&self, point: [f64; 2]) -> Vec<(usize, f64)> {
        match self {
            Self::Interval { nodes } => {
                let s = point[0].clamp(nodes[0], nodes[nodes.len() - 1]);
                let (e, t) = locate(nodes, s);
                vec![(e, 1.0 - t), (e + 1, t)]
            }
            Self::Rect { nx, ny, .. } => {
                let (hx, hy) = self.cell_size().unwrap();
                let c0 = self.coord(0);
                let fx = ((point[0] - c0[0]) / hx).clamp(0.0, (*nx - 1) as f64);
                let fy = ((point[1] - c0[1]) / hy).clamp(0.0, (*ny - 1) as f64);
                let ix = (fx.floor() as usize).min(nx - 2);
                let iy = (fy.floor() as usize).min(ny - 2);
                let (tx, ty) = (fx - ix as f64, fy - iy as f64);
                let id = |a: usize, b: usize| a + nx * b;
                vec![
                    (id(ix, iy), (1.0 - tx) * (1.0 - ty)),
                    (id(ix + 1, iy), tx * (1.0 - ty)),
                    (id(ix, iy + 1), (1.0 - tx) * ty),
                    (id(ix + 1, iy + 1), tx * ty),
                ]
            }
        }
    }

    pub fn interpolate(&self, u: &[f64], point: [f64; 2]) -> f64 {
        self.interpolation_weights(point)
            .into_iter()
            .map(|(i, w)| w * u[i])
            .sum()
    }
}

/// Element index `e` and local coordinate `t` in `[0, 1]` with
/// `s = nodes[e] + t * (nodes[e + 1] - nodes[e])`.
pub(crate) fn locate(nodes: &[f64], s: f64) -> (usize, f64) {
    let n = nodes.len();
    let e = match nodes.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
        Ok(i) => i.min(n - 2),
        Err(i) => i.saturating_sub(1).min(n - 2),
    };
    let t = (s - nodes[e]) / (nodes[e + 1] - nodes[e]);
    (e, t.clamp(0.0, 1.0))
}
