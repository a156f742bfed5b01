//! Diffusion models, time grids, Wiener increments and Euler–Maruyama.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg_ode::{rk4_solve, Matrix, OdeTrajectory, Vector};

pub type DriftFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
pub type DispersionFn = dyn Fn(f64, &[f64], &mut Matrix) + Send + Sync;
pub type JacobianFn = dyn Fn(f64, &[f64], &mut Matrix) + Send + Sync;

/// A diffusion `dX = b(t, X) dt + σ(t, X) dW` on `R^d` driven by a
/// `d'`-dimensional Wiener process.
///
/// Coefficients write into caller-owned buffers so the simulation loops stay
/// allocation free.
#[derive(Clone)]
pub struct DiffusionModel {
    dim: usize,
    noise_dim: usize,
    drift: Arc<DriftFn>,
    dispersion: Arc<DispersionFn>,
    jacobian: Option<Arc<JacobianFn>>,
}

impl fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl DiffusionModel {
    pub fn new<B, S>(dim: usize, noise_dim: usize, drift: B, dispersion: S) -> Self
    where
        B: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        S: Fn(f64, &[f64], &mut Matrix) + Send + Sync + 'static,
    {
        assert!(dim >= 1 && noise_dim >= 1, "dimensions must be positive");
        Self {
            dim,
            noise_dim,
            drift: Arc::new(drift),
            dispersion: Arc::new(dispersion),
            jacobian: None,
        }
    }

    pub fn with_jacobian<J>(mut self, jacobian: J) -> Self
    where
        J: Fn(f64, &[f64], &mut Matrix) + Send + Sync + 'static,
    {
        self.jacobian = Some(Arc::new(jacobian));
        self
    }

    /// Scalar model with constant dispersion `sigma`.
    pub fn scalar<B, D>(drift: B, drift_derivative: D, sigma: f64) -> Self
    where
        B: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self::new(
            1,
            1,
            move |t, x, out| out[0] = drift(t, x[0]),
            move |_, _, out| out[(0, 0)] = sigma,
        )
        .with_jacobian(move |t, x, out| out[(0, 0)] = drift_derivative(t, x[0]))
    }

    /// Linear model `dX = (B X + β) dt + σ dW` with constant coefficients.
    pub fn linear(b: Matrix, beta: Vector, sigma: Matrix) -> Self {
        let d = b.nrows();
        assert_eq!(b.ncols(), d);
        assert_eq!(beta.len(), d);
        assert_eq!(sigma.nrows(), d);
        let noise = sigma.ncols();
        let jac = b.clone();
        Self::new(
            d,
            noise,
            move |_, x, out| linear_drift(&b, &beta, x, out),
            move |_, _, out| out.copy_from(&sigma),
        )
        .with_jacobian(move |_, _, out| out.copy_from(&jac))
    }

    /// Scaled Brownian motion: zero drift, constant dispersion.
    pub fn brownian(sigma: Matrix) -> Self {
        let d = sigma.nrows();
        Self::linear(Matrix::zeros(d, d), Vector::zeros(d), sigma)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    #[inline]
    pub fn dispersion_into(&self, t: f64, x: &[f64], out: &mut Matrix) {
        (self.dispersion)(t, x, out)
    }

    pub fn drift(&self, t: f64, x: &Vector) -> Vector {
        let mut out = Vector::zeros(self.dim);
        self.drift_into(t, x.as_slice(), out.as_mut_slice());
        out
    }

    pub fn dispersion(&self, t: f64, x: &Vector) -> Matrix {
        let mut out = Matrix::zeros(self.dim, self.noise_dim);
        self.dispersion_into(t, x.as_slice(), &mut out);
        out
    }

    /// Diffusion coefficient `a = σ σᵀ`.
    pub fn diffusion(&self, t: f64, x: &Vector) -> Matrix {
        let s = self.dispersion(t, x);
        &s * s.transpose()
    }

    /// Drift Jacobian `V(t, x)_{ij} = ∂b_i/∂x_j`. Falls back to central
    /// differences with step `1e-6 · max(1, |x_j|)`.
    pub fn jacobian(&self, t: f64, x: &Vector) -> Matrix {
        let d = self.dim;
        let mut out = Matrix::zeros(d, d);
        if let Some(jac) = &self.jacobian {
            jac(t, x.as_slice(), &mut out);
            return out;
        }
        let mut probe = x.clone();
        let mut up = Vector::zeros(d);
        let mut down = Vector::zeros(d);
        for j in 0..d {
            let step = 1e-6 * x[j].abs().max(1.0);
            probe[j] = x[j] + step;
            self.drift_into(t, probe.as_slice(), up.as_mut_slice());
            probe[j] = x[j] - step;
            self.drift_into(t, probe.as_slice(), down.as_mut_slice());
            probe[j] = x[j];
            out.column_mut(j).copy_from(&((&up - &down) / (2.0 * step)));
        }
        out
    }
}

/// `out = B x + β`.
pub fn linear_drift(b: &Matrix, beta: &Vector, x: &[f64], out: &mut [f64]) {
    let d = beta.len();
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..d {
            s += b[(i, j)] * x[j];
        }
        out[i] = s + beta[i];
    }
}

/// Start point, end point and horizon of a bridge.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSpec {
    pub u: Vector,
    pub v: Vector,
    pub t_end: f64,
}

impl BridgeSpec {
    pub fn new(u: Vector, v: Vector, t_end: f64) -> Result<Self> {
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(Error::InvalidArgument(format!("horizon T = {t_end} must be positive")));
        }
        if u.len() != v.len() || u.is_empty() {
            return Err(Error::Dimension(format!(
                "start has dimension {}, end has dimension {}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("bridge endpoints must be finite".into()));
        }
        Ok(Self { u, v, t_end })
    }

    pub fn scalar(u: f64, v: f64, t_end: f64) -> Result<Self> {
        Self::new(Vector::from_element(1, u), Vector::from_element(1, v), t_end)
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    pub(crate) fn check_model(&self, model: &DiffusionModel) -> Result<()> {
        if model.dim() != self.dim() {
            return Err(Error::Dimension(format!(
                "model dimension {} vs bridge dimension {}",
                model.dim(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Time nodes `0 = t_0 < t_1 < … < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(t_end: f64, intervals: usize) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::InvalidArgument("grid needs at least one interval".into()));
        }
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(Error::InvalidArgument(format!("grid end {t_end} must be positive")));
        }
        let nodes = (0..=intervals)
            .map(|i| {
                if i == intervals {
                    t_end
                } else {
                    t_end * i as f64 / intervals as f64
                }
            })
            .collect();
        Ok(Self { nodes })
    }

    /// Uniform grid with step as close to `h` as divides `t_end`.
    pub fn with_step(t_end: f64, h: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidArgument(format!("step h = {h} must be positive")));
        }
        let n = (t_end / h).round().max(1.0) as usize;
        Self::uniform(t_end, n)
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidArgument("grid needs at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::InvalidArgument("grid must start at 0".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) || !nodes[nodes.len() - 1].is_finite() {
            return Err(Error::InvalidArgument("grid must be strictly increasing".into()));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    #[inline]
    pub fn t(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    #[inline]
    pub fn step(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    pub fn end(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Index of the node closest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        match self.nodes.binary_search_by(|g| g.total_cmp(&t)) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) if i >= self.nodes.len() => self.nodes.len() - 1,
            Err(i) => {
                if t - self.nodes[i - 1] <= self.nodes[i] - t {
                    i - 1
                } else {
                    i
                }
            }
        }
    }

    pub(crate) fn check_spec(&self, spec: &BridgeSpec) -> Result<()> {
        if self.end() != spec.t_end {
            return Err(Error::InvalidArgument(format!(
                "grid ends at {} but the bridge horizon is {}",
                self.end(),
                spec.t_end
            )));
        }
        Ok(())
    }
}

/// Mixes a base seed with a path index (splitmix64 finaliser), giving
/// independent, reproducible per-path seeds.
pub fn derive_seed(base: u64, path_id: u64) -> u64 {
    let mut z = base
        .wrapping_add(path_id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator behind every Wiener increment: ChaCha8 seeded from a `u64`,
/// standard normals by the Ziggurat method of `rand_distr`.
pub fn path_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Brownian increments `ΔW_i ~ N(0, h_i I)` for every grid interval.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerIncrements {
    seed: u64,
    dim: usize,
    data: Vec<f64>,
}

impl WienerIncrements {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn intervals(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn increment(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Increments with all entries zero (deterministic skeletons).
    pub fn zeros(grid: &TimeGrid, dim: usize) -> Self {
        Self {
            seed: 0,
            dim,
            data: vec![0.0; grid.intervals() * dim],
        }
    }
}

pub fn sample_wiener(grid: &TimeGrid, dim: usize, seed: u64) -> WienerIncrements {
    assert!(dim >= 1, "noise dimension must be positive");
    let mut rng = path_rng(seed);
    let mut data = Vec::with_capacity(grid.intervals() * dim);
    for i in 0..grid.intervals() {
        let sd = grid.step(i).sqrt();
        for _ in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(sd * z);
        }
    }
    WienerIncrements { seed, dim, data }
}

/// A simulated trajectory: one state per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    grid: Arc<TimeGrid>,
    dim: usize,
    data: Vec<f64>,
}

impl SamplePath {
    pub fn new(grid: Arc<TimeGrid>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() * dim {
            return Err(Error::Dimension(format!(
                "{} values for {} nodes of dimension {}",
                data.len(),
                grid.len(),
                dim
            )));
        }
        Ok(Self { grid, dim, data })
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn state(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn state_vec(&self, i: usize) -> Vector {
        Vector::from_column_slice(self.state(i))
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.grid.len() - 1)
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Sup-norm distance to another path on the same grid.
    pub fn sup_distance(&self, other: &SamplePath) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "paths on different grids");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_increments(grid: &TimeGrid, dw: &WienerIncrements, noise_dim: usize) -> Result<()> {
    if dw.intervals() != grid.intervals() || dw.dim() != noise_dim {
        return Err(Error::Dimension(format!(
            "{} increments of dimension {} for {} intervals and noise dimension {}",
            dw.intervals(),
            dw.dim(),
            grid.intervals(),
            noise_dim
        )));
    }
    Ok(())
}

/// Euler–Maruyama: `X_{i+1} = X_i + b_i h_i + σ_i ΔW_i` with left-point
/// coefficients. Both callbacks receive the node index alongside `(t, x)`.
pub fn euler_maruyama<B, S>(
    drift: B,
    dispersion: S,
    x0: &[f64],
    noise_dim: usize,
    grid: &Arc<TimeGrid>,
    dw: &WienerIncrements,
) -> Result<SamplePath>
where
    B: FnMut(usize, f64, &[f64], &mut [f64]),
    S: FnMut(usize, f64, &[f64], &mut Matrix),
{
    euler_scheme(drift, dispersion, x0, noise_dim, grid, dw, None)
}

/// Euler–Maruyama for a bridge proposal: steps `0..N-1` as usual, then the
/// terminal state is assigned `v` instead of taking the last step, so drifts
/// are never evaluated at `t_N`.
pub fn euler_bridge<B, S>(
    drift: B,
    dispersion: S,
    x0: &[f64],
    noise_dim: usize,
    grid: &Arc<TimeGrid>,
    dw: &WienerIncrements,
    end: &[f64],
) -> Result<SamplePath>
where
    B: FnMut(usize, f64, &[f64], &mut [f64]),
    S: FnMut(usize, f64, &[f64], &mut Matrix),
{
    euler_scheme(drift, dispersion, x0, noise_dim, grid, dw, Some(end))
}

fn euler_scheme<B, S>(
    mut drift: B,
    mut dispersion: S,
    x0: &[f64],
    noise_dim: usize,
    grid: &Arc<TimeGrid>,
    dw: &WienerIncrements,
    end: Option<&[f64]>,
) -> Result<SamplePath>
where
    B: FnMut(usize, f64, &[f64], &mut [f64]),
    S: FnMut(usize, f64, &[f64], &mut Matrix),
{
    check_increments(grid, dw, noise_dim)?;
    let d = x0.len();
    let n = grid.len();
    let mut data = vec![0.0; n * d];
    data[..d].copy_from_slice(x0);
    let mut b = vec![0.0; d];
    let mut s = Matrix::zeros(d, noise_dim);
    let steps = if end.is_some() { n - 2 } else { n - 1 };
    for i in 0..steps {
        let t = grid.t(i);
        let h = grid.step(i);
        let (head, tail) = data.split_at_mut((i + 1) * d);
        let x = &head[i * d..];
        let next = &mut tail[..d];
        drift(i, t, x, &mut b);
        dispersion(i, t, x, &mut s);
        let inc = dw.increment(i);
        for r in 0..d {
            let mut noise = 0.0;
            for c in 0..noise_dim {
                noise += s[(r, c)] * inc[c];
            }
            next[r] = x[r] + b[r] * h + noise;
        }
        if next.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite { node: i + 1 });
        }
    }
    if let Some(v) = end {
        data[(n - 1) * d..].copy_from_slice(v);
    }
    SamplePath::new(grid.clone(), d, data)
}

/// Simulates the unconditioned model from `x0`.
pub fn simulate_model(
    model: &DiffusionModel,
    x0: &[f64],
    grid: &Arc<TimeGrid>,
    dw: &WienerIncrements,
) -> Result<SamplePath> {
    euler_maruyama(
        |_, t, x, out| model.drift_into(t, x, out),
        |_, t, x, out| model.dispersion_into(t, x, out),
        x0,
        model.noise_dim(),
        grid,
        dw,
    )
}

/// Deterministic flow `ẋ = b(t, x)`, `x(0) = u`, by classical Runge–Kutta on
/// the grid.
pub fn solve_flow(model: &DiffusionModel, u: &Vector, grid: &TimeGrid) -> Result<OdeTrajectory> {
    rk4_solve(|t, x| model.drift(t, x), u, grid.nodes())
}

/// Euler skeleton of the flow on the grid: `x_{i+1} = x_i + b(t_i, x_i) h_i`.
///
/// This is the zero-noise limit of the Euler scheme used for the proposals,
/// so residual and guided constructions built on it agree node by node.
pub fn euler_flow(model: &DiffusionModel, u: &Vector, grid: &TimeGrid) -> Result<OdeTrajectory> {
    let n = grid.len();
    let mut states = Vec::with_capacity(n);
    let mut rates = Vec::with_capacity(n);
    let mut x = u.clone();
    for i in 0..n {
        let rate = model.drift(grid.t(i), &x);
        if i + 1 < n {
            let next = &x + &rate * grid.step(i);
            if next.iter().any(|z| !z.is_finite()) {
                return Err(Error::NonFinite { node: i + 1 });
            }
            states.push(std::mem::replace(&mut x, next));
        } else {
            states.push(x.clone());
        }
        rates.push(rate);
    }
    OdeTrajectory::new(grid.nodes().to_vec(), states, rates)
}
