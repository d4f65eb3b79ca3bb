//! Parameter-to-observable maps with analytic Jacobians.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::DiscretizationGrid;

/// A differentiable forward map `F: R^n -> R^m`.
pub trait ForwardModel: Send + Sync + std::fmt::Debug {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>>;
    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// True when every output is strictly positive, as Poisson data require.
    fn positive_output(&self) -> bool {
        false
    }

    fn eval_and_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.evaluate(u)?, self.jacobian(u)?))
    }

    /// `F(u)` and `J(u) V` for a block of directions `V` (n x k).
    fn eval_and_jvp(&self, u: &DVector<f64>, dirs: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (f, j) = self.eval_and_jacobian(u)?;
        Ok((f, j * dirs))
    }
}

fn check_input(u: &DVector<f64>, n: usize) -> Result<()> {
    if u.len() != n {
        return Err(Error::Dimension {
            what: "forward model input",
            expected: n,
            got: u.len(),
        });
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forward model input"));
    }
    Ok(())
}

/// `F(u) = A u`.
#[derive(Clone, Debug)]
pub struct LinearModel {
    a: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>) -> Self {
        Self { a }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl ForwardModel for LinearModel {
    fn input_dim(&self) -> usize {
        self.a.ncols()
    }

    fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_input(u, self.input_dim())?;
        Ok(&self.a * u)
    }

    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_input(u, self.input_dim())?;
        Ok(self.a.clone())
    }
}

// ---------------------------------------------------------------------------
// 1D elliptic problem
// ---------------------------------------------------------------------------

pub const ELLIPTIC_STATIONS: usize = 63;
pub const ELLIPTIC_LOAD: f64 = 1000.0;
pub const ELLIPTIC_SOURCES: [f64; 2] = [1.0 / 3.0, 2.0 / 3.0];

/// `-(exp(u) x')' = f` on `[0, 1]` with `x(0) = x(1) = 0`, observed at
/// `i / 64` for two point loads; output is the stacked station values.
#[derive(Clone, Debug)]
pub struct EllipticModel1D {
    nodes: Vec<f64>,
    load_nodes: [usize; 2],
    stations: Vec<Vec<(usize, f64)>>,
}

/// Tridiagonal `LDL^T` of the interior stiffness for one `u`.
struct EllipticSolve {
    coef: Vec<f64>,
    diag: Vec<f64>,
    lower: Vec<f64>,
}

impl EllipticSolve {
    /// Solves `B x = b` for a full-length nodal vector; boundary entries stay zero.
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let mut x = vec![0.0; n];
        let inner = n - 2;
        let mut y = vec![0.0; inner];
        for i in 0..inner {
            y[i] = rhs[i + 1] - if i > 0 { self.lower[i - 1] * y[i - 1] } else { 0.0 };
        }
        for i in (0..inner).rev() {
            let mut v = y[i] / self.diag[i];
            if i + 1 < inner {
                v -= self.lower[i] * x[i + 2];
            }
            x[i + 1] = v;
        }
        x
    }
}

impl EllipticModel1D {
    pub fn new(grid: &DiscretizationGrid) -> Result<Self> {
        let nodes = match grid {
            DiscretizationGrid::Interval { nodes } => nodes.clone(),
            _ => return Err(Error::Grid("elliptic model needs an interval grid".into())),
        };
        if nodes.len() < 4 || nodes[0] != 0.0 || nodes[nodes.len() - 1] != 1.0 {
            return Err(Error::Grid("elliptic model needs at least 4 nodes spanning [0, 1]".into()));
        }
        let nearest = |s: f64| {
            (1..nodes.len() - 1)
                .min_by(|&a, &b| (nodes[a] - s).abs().total_cmp(&(nodes[b] - s).abs()))
                .unwrap()
        };
        let load_nodes = [nearest(ELLIPTIC_SOURCES[0]), nearest(ELLIPTIC_SOURCES[1])];
        let stations = (1..=ELLIPTIC_STATIONS)
            .map(|i| grid.interpolation_weights([i as f64 / 64.0, 0.0]))
            .collect();
        Ok(Self {
            nodes,
            load_nodes,
            stations,
        })
    }

    pub fn load_nodes(&self) -> [usize; 2] {
        self.load_nodes
    }

    fn factor(&self, u: &DVector<f64>) -> Result<EllipticSolve> {
        check_input(u, self.nodes.len())?;
        let n = self.nodes.len();
        // kappa_e / h_e with kappa_e the exponential of the nodal average
        let coef: Vec<f64> = (0..n - 1)
            .map(|e| (0.5 * (u[e] + u[e + 1])).exp() / (self.nodes[e + 1] - self.nodes[e]))
            .collect();
        let inner = n - 2;
        let mut diag = vec![0.0; inner];
        let mut lower = vec![0.0; inner.saturating_sub(1)];
        for i in 0..inner {
            let node = i + 1;
            let mut d = coef[node - 1] + coef[node];
            if i > 0 {
                let off = -coef[node - 1];
                d -= off * off / diag[i - 1];
            }
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Factorization(format!(
                    "elliptic stiffness pivot {d} at node {node}"
                )));
            }
            diag[i] = d;
            if i + 1 < inner {
                lower[i] = -coef[node] / d;
            }
        }
        Ok(EllipticSolve { coef, diag, lower })
    }

    fn states(&self, solve: &EllipticSolve) -> [Vec<f64>; 2] {
        self.load_nodes.map(|k| {
            let mut f = vec![0.0; self.nodes.len()];
            f[k] = ELLIPTIC_LOAD;
            solve.solve(&f)
        })
    }

    fn observe(&self, states: &[Vec<f64>; 2]) -> DVector<f64> {
        DVector::from_iterator(
            2 * ELLIPTIC_STATIONS,
            states.iter().flat_map(|x| {
                self.stations
                    .iter()
                    .map(move |w| w.iter().map(|&(i, c)| c * x[i]).sum::<f64>())
            }),
        )
    }

    /// Adjoint Jacobian: one tridiagonal solve per station, shared by both loads.
    fn jacobian_from(&self, solve: &EllipticSolve, states: &[Vec<f64>; 2]) -> DMatrix<f64> {
        let n = self.nodes.len();
        let mut jac = DMatrix::zeros(2 * ELLIPTIC_STATIONS, n);
        let mut g = vec![0.0; n - 1];
        for (k, w) in self.stations.iter().enumerate() {
            let mut h = vec![0.0; n];
            for &(i, c) in w {
                h[i] += c;
            }
            let a = solve.solve(&h);
            for (f, x) in states.iter().enumerate() {
                for e in 0..n - 1 {
                    g[e] = solve.coef[e] * (a[e + 1] - a[e]) * (x[e + 1] - x[e]);
                }
                let row = k + f * ELLIPTIC_STATIONS;
                for j in 0..n {
                    let left = if j > 0 { g[j - 1] } else { 0.0 };
                    let right = if j < n - 1 { g[j] } else { 0.0 };
                    jac[(row, j)] = -0.5 * (left + right);
                }
            }
        }
        jac
    }
}

impl ForwardModel for EllipticModel1D {
    fn input_dim(&self) -> usize {
        self.nodes.len()
    }

    fn output_dim(&self) -> usize {
        2 * ELLIPTIC_STATIONS
    }

    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let solve = self.factor(u)?;
        Ok(self.observe(&self.states(&solve)))
    }

    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.eval_and_jacobian(u)?.1)
    }

    fn eval_and_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let solve = self.factor(u)?;
        let states = self.states(&solve);
        Ok((self.observe(&states), self.jacobian_from(&solve, &states)))
    }

    /// Tangent solves: one per direction and load.
    fn eval_and_jvp(&self, u: &DVector<f64>, dirs: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let solve = self.factor(u)?;
        let states = self.states(&solve);
        let n = self.nodes.len();
        let mut out = DMatrix::zeros(2 * ELLIPTIC_STATIONS, dirs.ncols());
        let mut rhs = vec![0.0; n];
        for (c, v) in dirs.column_iter().enumerate() {
            for (f, x) in states.iter().enumerate() {
                rhs.iter_mut().for_each(|r| *r = 0.0);
                for e in 0..n - 1 {
                    let t = solve.coef[e] * 0.5 * (v[e] + v[e + 1]) * (x[e + 1] - x[e]);
                    rhs[e] += t;
                    rhs[e + 1] -= t;
                }
                let dx = solve.solve(&rhs);
                for (k, w) in self.stations.iter().enumerate() {
                    out[(k + f * ELLIPTIC_STATIONS, c)] = w.iter().map(|&(i, a)| a * dx[i]).sum();
                }
            }
        }
        Ok((self.observe(&states), out))
    }
}

/// `min{1, 1 - 0.5 sin(2 pi (s - 0.25))}` at every grid node.
pub fn elliptic_true_field(grid: &DiscretizationGrid) -> DVector<f64> {
    DVector::from_fn(grid.len(), |i, _| {
        let s = grid.coord(i)[0];
        (1.0 - 0.5 * (2.0 * PI * (s - 0.25)).sin()).min(1.0)
    })
}

// ---------------------------------------------------------------------------
// 2D PET problem
// ---------------------------------------------------------------------------

/// Fan-beam layout: sources on an arc of a circle centred at the origin,
/// each emitting a fan of rays to detectors on the far side of the circle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PetGeometry {
    pub radius: f64,
    pub sources: usize,
    pub rays_per_source: usize,
    /// Angular span of the source arc, degrees.
    pub arc_degrees: f64,
    /// Polar angle of the arc midpoint, degrees.
    pub arc_center_degrees: f64,
    /// Half-opening of each fan, degrees; `None` spans 95% of the inscribed
    /// disc of the domain so that no ray grazes an edge.
    pub fan_half_angle_degrees: Option<f64>,
    /// Multiplies the line integrals; converts domain length units into optical depth.
    pub attenuation: f64,
}

impl Default for PetGeometry {
    fn default() -> Self {
        Self {
            radius: 30.0,
            sources: 10,
            rays_per_source: 40,
            arc_degrees: 120.0,
            arc_center_degrees: 270.0,
            fan_half_angle_degrees: None,
            attenuation: 1.0 / 30.0,
        }
    }
}

/// A ray segment from source to detector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub from: [f64; 2],
    pub to: [f64; 2],
}

impl PetGeometry {
    pub fn validate(&self, grid: &DiscretizationGrid) -> Result<()> {
        let DiscretizationGrid::Rect { lo, hi, .. } = grid else {
            return Err(Error::Grid("PET model needs a rectangular grid".into()));
        };
        let corner = lo
            .iter()
            .chain(hi)
            .map(|c| c.abs())
            .fold(0.0f64, f64::max);
        let mut problems = Vec::new();
        if !(self.radius > corner * 2f64.sqrt()) {
            problems.push(format!(
                "source circle radius {} does not enclose the domain",
                self.radius
            ));
        }
        if self.sources == 0 || self.rays_per_source == 0 {
            problems.push("need at least one source and one ray".into());
        }
        if !(self.attenuation > 0.0 && self.attenuation.is_finite()) {
            problems.push(format!("attenuation must be positive, got {}", self.attenuation));
        }
        if let Some(a) = self.fan_half_angle_degrees {
            if !(a > 0.0 && a < 90.0) {
                problems.push(format!("fan half-angle must lie in (0, 90) degrees, got {a}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn rays(&self, grid: &DiscretizationGrid) -> Vec<Ray> {
        let half_width = match grid {
            DiscretizationGrid::Rect { lo, hi, .. } => {
                0.5 * (hi[0] - lo[0]).min(hi[1] - lo[1])
            }
            _ => 0.0,
        };
        let fan = self
            .fan_half_angle_degrees
            .map(f64::to_radians)
            .unwrap_or_else(|| (0.95 * half_width / self.radius).asin());
        let arc = self.arc_degrees.to_radians();
        let mid = self.arc_center_degrees.to_radians();
        let spread = |k: usize, count: usize, width: f64| {
            if count == 1 {
                0.0
            } else {
                -0.5 * width + width * k as f64 / (count - 1) as f64
            }
        };
        let mut rays = Vec::with_capacity(self.sources * self.rays_per_source);
        for s in 0..self.sources {
            let phi = mid + spread(s, self.sources, arc);
            let src = [self.radius * phi.cos(), self.radius * phi.sin()];
            let inward = phi + PI;
            for r in 0..self.rays_per_source {
                let ang = inward + spread(r, self.rays_per_source, 2.0 * fan);
                let d = [ang.cos(), ang.sin()];
                // second intersection of the ray with the source circle
                let t = -2.0 * (src[0] * d[0] + src[1] * d[1]);
                rays.push(Ray {
                    from: src,
                    to: [src[0] + t * d[0], src[1] + t * d[1]],
                });
            }
        }
        rays
    }
}

/// Exact lengths of `ray` inside each cell of a rectangular grid, by
/// incremental grid traversal. Returns `(cell, length)` pairs in path order.
pub fn ray_cell_lengths(grid: &DiscretizationGrid, ray: &Ray) -> Vec<(usize, f64)> {
    let DiscretizationGrid::Rect { nx, ny, lo, hi } = grid else {
        return Vec::new();
    };
    let (hx, hy) = grid.cell_size().unwrap();
    let d = [ray.to[0] - ray.from[0], ray.to[1] - ray.from[1]];
    let norm = d[0].hypot(d[1]);
    // slab clipping to [lo, hi]
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for a in 0..2 {
        if d[a] == 0.0 {
            if ray.from[a] < lo[a] || ray.from[a] > hi[a] {
                return Vec::new();
            }
        } else {
            let ta = (lo[a] - ray.from[a]) / d[a];
            let tb = (hi[a] - ray.from[a]) / d[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if !(t1 > t0) {
        return Vec::new();
    }
    let sizes = [hx, hy];
    let counts = [*nx, *ny];
    let mut cell = [0usize; 2];
    let mut t_max = [f64::INFINITY; 2];
    let mut t_delta = [f64::INFINITY; 2];
    for a in 0..2 {
        let f = (ray.from[a] + t0 * d[a] - lo[a]) / sizes[a];
        let idx = if d[a] >= 0.0 { f.floor() } else { f.ceil() - 1.0 };
        cell[a] = (idx.max(0.0) as usize).min(counts[a] - 1);
        if d[a] != 0.0 {
            let edge = if d[a] > 0.0 { cell[a] + 1 } else { cell[a] };
            t_max[a] = (lo[a] + edge as f64 * sizes[a] - ray.from[a]) / d[a];
            t_delta[a] = sizes[a] / d[a].abs();
        }
    }
    let mut out = Vec::new();
    let mut t = t0;
    loop {
        let next = t_max[0].min(t_max[1]).min(t1);
        let len = (next - t) * norm;
        if len > 0.0 {
            out.push((cell[0] + nx * cell[1], len));
        }
        if next >= t1 {
            break;
        }
        t = next;
        let mut inside = true;
        for a in 0..2 {
            if t_max[a] <= next {
                if d[a] > 0.0 {
                    cell[a] += 1;
                    inside &= cell[a] < counts[a];
                } else if cell[a] == 0 {
                    inside = false;
                } else {
                    cell[a] -= 1;
                }
                t_max[a] += t_delta[a];
            }
        }
        if !inside {
            break;
        }
    }
    out
}

/// Assembles the ray-cell intersection matrix; also returns the indices of
/// rays that miss the domain.
pub fn pet_system_matrix(grid: &DiscretizationGrid, rays: &[Ray]) -> (DMatrix<f64>, Vec<usize>) {
    let mut b = DMatrix::zeros(rays.len(), grid.len());
    let mut empty = Vec::new();
    for (i, ray) in rays.iter().enumerate() {
        let hits = ray_cell_lengths(grid, ray);
        if hits.is_empty() {
            empty.push(i);
        }
        for (j, len) in hits {
            b[(i, j)] += len;
        }
    }
    (b, empty)
}

/// Beer's law: `F(u) = exp(-c B exp(u))`.
#[derive(Clone, Debug)]
pub struct PetModel2D {
    geometry: PetGeometry,
    /// Row-wise nonzeros of the scaled system matrix `c B`.
    rows: Vec<Vec<(usize, f64)>>,
    n: usize,
}

const EXP_OVERFLOW: f64 = 700.0;

impl PetModel2D {
    pub fn new(grid: &DiscretizationGrid, geometry: PetGeometry) -> Result<Self> {
        geometry.validate(grid)?;
        let rays = geometry.rays(grid);
        let mut rows = Vec::with_capacity(rays.len());
        let mut empty = Vec::new();
        for (i, ray) in rays.iter().enumerate() {
            let hits = ray_cell_lengths(grid, ray);
            if hits.is_empty() {
                empty.push(i);
            }
            rows.push(hits.into_iter().map(|(j, l)| (j, l * geometry.attenuation)).collect());
        }
        if !empty.is_empty() {
            return Err(Error::Grid(format!("rays {empty:?} miss the domain")));
        }
        Ok(Self {
            geometry,
            rows,
            n: grid.len(),
        })
    }

    /// Uses an already scaled dense system matrix.
    pub fn from_system_matrix(system: DMatrix<f64>, geometry: PetGeometry) -> Self {
        let rows = system
            .row_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, v)| (j, *v))
                    .collect()
            })
            .collect();
        Self {
            geometry,
            rows,
            n: system.ncols(),
        }
    }

    pub fn geometry(&self) -> &PetGeometry {
        &self.geometry
    }

    /// Scaled system matrix `c B`, densified.
    pub fn system_matrix(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.rows.len(), self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                b[(i, j)] += v;
            }
        }
        b
    }

    fn exp_u(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_input(u, self.n)?;
        if let Some(v) = u.iter().find(|&&v| v > EXP_OVERFLOW) {
            return Err(Error::domain(format!("log-density {v} overflows exp")));
        }
        Ok(u.map(f64::exp))
    }

    fn transmission(&self, e: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|row| (-row.iter().map(|&(j, b)| b * e[j]).sum::<f64>()).exp()),
        )
    }
}

impl ForwardModel for PetModel2D {
    fn input_dim(&self) -> usize {
        self.n
    }

    fn output_dim(&self) -> usize {
        self.rows.len()
    }

    fn positive_output(&self) -> bool {
        true
    }

    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.transmission(&self.exp_u(u)?))
    }

    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.eval_and_jacobian(u)?.1)
    }

    fn eval_and_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let e = self.exp_u(u)?;
        let f = self.transmission(&e);
        let mut j = DMatrix::zeros(self.rows.len(), self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(c, b) in row {
                j[(i, c)] -= f[i] * b * e[c];
            }
        }
        Ok((f, j))
    }

    fn eval_and_jvp(&self, u: &DVector<f64>, dirs: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let e = self.exp_u(u)?;
        let f = self.transmission(&e);
        // work on transposes so the inner loop runs over contiguous memory
        let dirs_t = dirs.transpose();
        let mut out_t = DMatrix::zeros(dirs.ncols(), self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            let mut acc = out_t.column_mut(i);
            for &(c, b) in row {
                acc.axpy(-f[i] * b * e[c], &dirs_t.column(c), 1.0);
            }
        }
        Ok((f, out_t.transpose()))
    }
}

/// `max{0, (pi / 2) sin(0.1 pi (s1 - 15)) sin(0.1 pi (s2 - 15))}` at cell centres.
pub fn pet_true_field(grid: &DiscretizationGrid) -> DVector<f64> {
    DVector::from_fn(grid.len(), |i, _| {
        let [x, y] = grid.coord(i);
        let v = 0.5 * PI * (0.1 * PI * (x - 15.0)).sin() * (0.1 * PI * (y - 15.0)).sin();
        v.max(0.0)
    })
}

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Gaussian,
    Poisson,
}

/// Noise precision giving `||eta|| / (sqrt(m) sigma) = snr`.
pub fn precision_for_snr(eta: &DVector<f64>, snr: f64) -> f64 {
    eta.len() as f64 * snr * snr / eta.norm_squared()
}

/// Gaussian: `y = F(u) + e`, `e ~ N(0, I / lambda)` (an infinite `lambda` gives
/// noise-free data). Poisson: `y_i ~ Poisson(lambda F_i(u))`.
pub fn generate_synthetic_data<R: Rng + ?Sized>(
    model: &dyn ForwardModel,
    u_true: &DVector<f64>,
    lambda: f64,
    kind: ObservationKind,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let eta = model.evaluate(u_true)?;
    match kind {
        ObservationKind::Gaussian => {
            if !(lambda > 0.0) {
                return Err(Error::domain(format!("noise precision must be positive, got {lambda}")));
            }
            let sigma = lambda.sqrt().recip();
            Ok(eta.map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)))
        }
        ObservationKind::Poisson => eta
            .iter()
            .map(|&v| {
                let rate = lambda * v;
                if !(rate > 0.0 && rate.is_finite()) {
                    return Err(Error::Data(format!("expected count {rate} is not positive")));
                }
                let dist = Poisson::new(rate).map_err(|e| Error::Data(e.to_string()))?;
                Ok(dist.sample(rng))
            })
            .collect::<Result<Vec<f64>>>()
            .map(DVector::from_vec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    /// Central-difference oracle for `J v`.
    fn fd_directional(model: &dyn ForwardModel, u: &DVector<f64>, v: &DVector<f64>, h: f64) -> DVector<f64> {
        let plus = model.evaluate(&(u + v * h)).unwrap();
        let minus = model.evaluate(&(u - v * h)).unwrap();
        (plus - minus) / (2.0 * h)
    }

    fn check_fd(model: &dyn ForwardModel, seed: u64, scale: f64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = model.input_dim();
        let u = DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let j = model.jacobian(&u).unwrap();
        for _ in 0..10 {
            let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
            let err = rel_err(&(&j * &v), &fd_directional(model, &u, &v, 1e-5));
            assert!(err < tol, "directional derivative error {err}");
        }
    }

    #[test]
    fn elliptic_jacobian_matches_finite_differences() {
        let model = EllipticModel1D::new(&DiscretizationGrid::unit_interval(65).unwrap()).unwrap();
        check_fd(&model, 1, 0.5, 1e-5);
    }

    fn check_jvp(model: &dyn ForwardModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = model.input_dim();
        let u = DVector::from_fn(n, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
        let v = DMatrix::from_fn(n, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (f0, j) = model.eval_and_jacobian(&u).unwrap();
        let (f1, jv) = model.eval_and_jvp(&u, &v).unwrap();
        assert_eq!(f0, f1);
        let dense = j * &v;
        assert!((&jv - &dense).amax() <= 1e-10 * dense.amax());
    }

    #[test]
    fn block_directional_derivatives_match_jacobian() {
        check_jvp(&EllipticModel1D::new(&DiscretizationGrid::unit_interval(40).unwrap()).unwrap(), 5);
        let grid = DiscretizationGrid::pet_square(6).unwrap();
        check_jvp(&PetModel2D::new(&grid, PetGeometry::default()).unwrap(), 6);
    }

    #[test]
    fn elliptic_green_function_limit() {
        let model = EllipticModel1D::new(&DiscretizationGrid::unit_interval(385).unwrap()).unwrap();
        let y = model.evaluate(&DVector::zeros(385)).unwrap();
        // station 21 is s = 21/64; the load sits at node 128 = 1/3 exactly
        let s: f64 = 21.0 / 64.0;
        let green = ELLIPTIC_LOAD * s * (2.0 / 3.0);
        assert!((y[20] - green).abs() < 1e-9 * green);
        assert!(y.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn elliptic_constant_shift_scales_output() {
        let model = EllipticModel1D::new(&DiscretizationGrid::unit_interval(33).unwrap()).unwrap();
        let base = model.evaluate(&DVector::zeros(33)).unwrap();
        let shifted = model.evaluate(&DVector::from_element(33, 0.7)).unwrap();
        assert!(rel_err(&shifted, &(&base * (-0.7f64).exp())) < 1e-12);
        let j = model.jacobian(&DVector::zeros(33)).unwrap();
        let dir = &j * DVector::from_element(33, 1.0);
        assert!(rel_err(&dir, &(-&base)) < 1e-10);
    }

    #[test]
    fn elliptic_loads_mirror() {
        let model = EllipticModel1D::new(&DiscretizationGrid::unit_interval(193).unwrap()).unwrap();
        let y = model.evaluate(&DVector::zeros(193)).unwrap();
        for i in 0..ELLIPTIC_STATIONS {
            let a = y[i];
            let b = y[ELLIPTIC_STATIONS + (ELLIPTIC_STATIONS - 1 - i)];
            assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn elliptic_rejects_non_finite_input() {
        let model = EllipticModel1D::new(&DiscretizationGrid::unit_interval(9).unwrap()).unwrap();
        let mut u = DVector::zeros(9);
        u[3] = f64::NAN;
        assert!(matches!(model.evaluate(&u), Err(Error::NonFinite(_))));
    }

    #[test]
    fn elliptic_refinement_converges() {
        let coarse_grid = DiscretizationGrid::unit_interval(1024).unwrap();
        let fine_grid = DiscretizationGrid::unit_interval(8192).unwrap();
        let coarse = EllipticModel1D::new(&coarse_grid).unwrap();
        let fine = EllipticModel1D::new(&fine_grid).unwrap();
        let yc = coarse.evaluate(&elliptic_true_field(&coarse_grid)).unwrap();
        let yf = fine.evaluate(&elliptic_true_field(&fine_grid)).unwrap();
        assert!(rel_err(&yc, &yf) < 5e-3, "{}", rel_err(&yc, &yf));
    }

    fn unit_cell() -> DiscretizationGrid {
        // 2x2 cells on [0, 2]^2 so the lower-left cell is [0, 1]^2
        DiscretizationGrid::rect(2, 2, [0.0, 0.0], [2.0, 2.0]).unwrap()
    }

    #[test]
    fn chord_through_cell_middle() {
        let hits = ray_cell_lengths(&unit_cell(), &Ray { from: [-1.0, 0.5], to: [0.999, 0.5] });
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, 0);
        assert!((hits[0].1 - 0.999).abs() < 1e-12);
        let across = ray_cell_lengths(&unit_cell(), &Ray { from: [-1.0, 0.5], to: [5.0, 0.5] });
        assert_eq!(across.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!(across.iter().all(|h| (h.1 - 1.0).abs() < 1e-12));
    }

    #[test]
    fn diagonal_through_corners() {
        let hits = ray_cell_lengths(&unit_cell(), &Ray { from: [-1.0, -1.0], to: [3.0, 3.0] });
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 3]);
        for h in hits {
            assert!((h.1 - 2f64.sqrt()).abs() < 1e-12);
        }
        let back = ray_cell_lengths(&unit_cell(), &Ray { from: [3.0, 3.0], to: [-1.0, -1.0] });
        assert_eq!(back.iter().map(|h| h.0).collect::<Vec<_>>(), vec![3, 0]);
    }

    #[test]
    fn row_sums_match_square_chords() {
        let grid = DiscretizationGrid::pet_square(20).unwrap();
        let geometry = PetGeometry::default();
        let rays = geometry.rays(&grid);
        let (b, empty) = pet_system_matrix(&grid, &rays);
        assert!(empty.is_empty());
        assert_eq!(b.nrows(), 400);
        assert!(b.iter().all(|&v| v >= 0.0));
        let one = DiscretizationGrid::pet_square(2).unwrap();
        for (i, ray) in rays.iter().enumerate() {
            // chord of the whole square from a coarse traversal
            let chord: f64 = ray_cell_lengths(&one, ray).iter().map(|h| h.1).sum();
            let oracle = square_chord(ray, 15.0);
            assert!((chord - oracle).abs() < 1e-10);
            assert!((b.row(i).sum() - oracle).abs() < 1e-10);
        }
    }

    /// Independent chord oracle: clip by testing the four edge lines.
    fn square_chord(ray: &Ray, half: f64) -> f64 {
        let d = [ray.to[0] - ray.from[0], ray.to[1] - ray.from[1]];
        let mut ts: Vec<f64> = Vec::new();
        for a in 0..2 {
            for side in [-half, half] {
                if d[a] != 0.0 {
                    let t = (side - ray.from[a]) / d[a];
                    let other = ray.from[1 - a] + t * d[1 - a];
                    if other.abs() <= half + 1e-12 && (0.0..=1.0).contains(&t) {
                        ts.push(t);
                    }
                }
            }
        }
        if ts.len() < 2 {
            return 0.0;
        }
        let lo = ts.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (hi - lo) * d[0].hypot(d[1])
    }

    #[test]
    fn single_cell_beer_law() {
        let g = PetGeometry::default();
        let model = PetModel2D::from_system_matrix(DMatrix::from_element(1, 1, 2.0), g.clone());
        let (f, j) = model.eval_and_jacobian(&DVector::zeros(1)).unwrap();
        assert!((f[0] - (-2.0f64).exp()).abs() < 1e-15);
        assert!((j[(0, 0)] + 2.0 * (-2.0f64).exp()).abs() < 1e-15);
        let empty = PetModel2D::from_system_matrix(DMatrix::zeros(3, 2), g);
        assert_eq!(empty.evaluate(&DVector::from_vec(vec![1.0, -3.0])).unwrap(), DVector::from_element(3, 1.0));
    }

    #[test]
    fn pet_jacobian_matches_finite_differences() {
        let grid = DiscretizationGrid::pet_square(8).unwrap();
        let model = PetModel2D::new(&grid, PetGeometry::default()).unwrap();
        check_fd(&model, 2, 0.5, 1e-6);
        let f = model.evaluate(&pet_true_field(&grid)).unwrap();
        assert!(f.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn pet_rejects_overflow() {
        let grid = DiscretizationGrid::pet_square(4).unwrap();
        let model = PetModel2D::new(&grid, PetGeometry::default()).unwrap();
        let mut u = DVector::zeros(16);
        u[0] = 800.0;
        assert!(matches!(model.evaluate(&u), Err(Error::Domain(_))));
    }

    #[test]
    fn noise_free_limit_and_determinism() {
        let model = LinearModel::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let u = DVector::from_vec(vec![0.5, -1.0]);
        let exact = model.evaluate(&u).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = generate_synthetic_data(&model, &u, f64::INFINITY, ObservationKind::Gaussian, &mut rng).unwrap();
        assert_eq!(y, exact);
        let a = generate_synthetic_data(&model, &u, 4.0, ObservationKind::Gaussian, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_synthetic_data(&model, &u, 4.0, ObservationKind::Gaussian, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn poisson_counts_have_the_right_mean() {
        let model = LinearModel::identity(1);
        let u = DVector::from_element(1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reps = 10_000;
        let mut sum = 0.0;
        for _ in 0..reps {
            let y = generate_synthetic_data(&model, &u, 100.0, ObservationKind::Poisson, &mut rng).unwrap();
            assert_eq!(y[0].fract(), 0.0);
            sum += y[0];
        }
        let mean = sum / reps as f64;
        let se = (100.0 / reps as f64).sqrt();
        assert!((mean - 100.0).abs() < 3.0 * se, "{mean}");
        let bad = generate_synthetic_data(&model, &DVector::zeros(1), 100.0, ObservationKind::Poisson, &mut rng);
        assert!(matches!(bad, Err(Error::Data(_))));
    }
}
