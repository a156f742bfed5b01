//! The tractable linear process `dX̃ = (B̃(t) X̃ + β̃(t)) dt + σ̃(t) dW` that
//! guides the proposals, and the backward quantities `K`, `H̃ = K⁻¹`, `v(t)`
//! from which the guiding term `r̃(t, x) = H̃(t)(v(t) − x)` is read.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg_ode::{
    expm, gaussian_log_density, rk4_solve, rk_backward, solve_linear, solve_lyapunov, Cholesky,
    Matrix, OdeTrajectory, Vector,
};
use crate::sde::{BridgeSpec, DiffusionModel, TimeGrid};

/// A time-dependent coefficient.
#[derive(Clone)]
pub enum Coefficient<T> {
    Constant(T),
    /// Piecewise constant on `[t_i, t_{i+1})`, one value per grid node.
    Nodal { nodes: Arc<[f64]>, values: Arc<[T]> },
    Function(Arc<dyn Fn(f64) -> T + Send + Sync>),
}

impl<T: fmt::Debug> fmt::Debug for Coefficient<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            Coefficient::Nodal { nodes, .. } => write!(f, "Nodal({} nodes)", nodes.len()),
            Coefficient::Function(_) => f.write_str("Function"),
        }
    }
}

impl<T: Clone> Coefficient<T> {
    pub fn function<F: Fn(f64) -> T + Send + Sync + 'static>(f: F) -> Self {
        Coefficient::Function(Arc::new(f))
    }

    pub fn eval(&self, t: f64) -> T {
        match self {
            Coefficient::Constant(c) => c.clone(),
            Coefficient::Nodal { nodes, values } => {
                let i = match nodes.binary_search_by(|g| g.total_cmp(&t)) {
                    Ok(i) => i,
                    Err(0) => 0,
                    Err(i) => i - 1,
                };
                values[i.min(values.len() - 1)].clone()
            }
            Coefficient::Function(f) => f(t),
        }
    }

    /// Value at node `i` of `grid`; exact for nodal coefficients on that grid.
    fn at_node(&self, grid: &TimeGrid, i: usize) -> T {
        match self {
            Coefficient::Nodal { nodes, values }
                if nodes.len() == grid.len() && nodes[..] == grid.nodes()[..] =>
            {
                values[i].clone()
            }
            _ => self.eval(grid.t(i)),
        }
    }

    fn is_function(&self) -> bool {
        matches!(self, Coefficient::Function(_))
    }
}

/// How `σ̃` is chosen for data-derived auxiliaries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaTildePolicy {
    /// `σ̃(t) ≡ σ(T, v)`.
    ConstantEnd,
    /// `σ(t, x(t))` up to `t0`, then linear interpolation to `σ(T, v)`.
    Interpolate { t0: f64 },
}

/// Coefficients of the linear auxiliary process.
#[derive(Debug, Clone)]
pub struct LinearAuxiliary {
    dim: usize,
    noise_dim: usize,
    pub b_tilde: Coefficient<Matrix>,
    pub beta_tilde: Coefficient<Vector>,
    pub sigma_tilde: Coefficient<Matrix>,
}

impl LinearAuxiliary {
    pub fn new(
        dim: usize,
        noise_dim: usize,
        b_tilde: Coefficient<Matrix>,
        beta_tilde: Coefficient<Vector>,
        sigma_tilde: Coefficient<Matrix>,
    ) -> Self {
        Self {
            dim,
            noise_dim,
            b_tilde,
            beta_tilde,
            sigma_tilde,
        }
    }

    /// Time-homogeneous auxiliary.
    pub fn constant(b: Matrix, beta: Vector, sigma: Matrix) -> Self {
        let (dim, noise_dim) = sigma.shape();
        Self::new(
            dim,
            noise_dim,
            Coefficient::Constant(b),
            Coefficient::Constant(beta),
            Coefficient::Constant(sigma),
        )
    }

    /// `dX̃ = σ dW`.
    pub fn brownian(sigma: Matrix) -> Self {
        let d = sigma.nrows();
        Self::constant(Matrix::zeros(d, d), Vector::zeros(d), sigma)
    }

    /// `β̃(t) = b(t, x(t))`, `B̃ ≡ 0`, `σ̃ ≡ σ(T, v)`, with `x` tabulated on the
    /// grid (normally the Euler skeleton of the flow). `β̃` is piecewise
    /// constant between nodes, so that `∫_{t_i}^{T} β̃ = x(T) − x(t_i)` holds
    /// node by node for the Euler skeleton.
    pub fn flow_drift(model: &DiffusionModel, spec: &BridgeSpec, flow: &OdeTrajectory) -> Self {
        let d = model.dim();
        let values: Vec<Vector> = flow
            .grid()
            .iter()
            .zip(flow.states())
            .map(|(&t, x)| model.drift(t, x))
            .collect();
        Self::new(
            d,
            model.noise_dim(),
            Coefficient::Constant(Matrix::zeros(d, d)),
            Coefficient::Nodal {
                nodes: flow.grid().into(),
                values: values.into(),
            },
            Coefficient::Constant(model.dispersion(spec.t_end, &spec.v)),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// True when all three coefficients are time-constant.
    pub fn homogeneous(&self) -> bool {
        matches!(
            (&self.b_tilde, &self.beta_tilde, &self.sigma_tilde),
            (
                Coefficient::Constant(_),
                Coefficient::Constant(_),
                Coefficient::Constant(_)
            )
        )
    }

    fn drift_free(&self) -> bool {
        matches!(&self.b_tilde, Coefficient::Constant(b) if b.iter().all(|x| *x == 0.0))
            && !self.beta_tilde.is_function()
            && !self.sigma_tilde.is_function()
    }

    pub fn a_tilde(&self, t: f64) -> Matrix {
        let s = self.sigma_tilde.eval(t);
        &s * s.transpose()
    }

    /// `b̃(t, x) = B̃(t) x + β̃(t)`.
    pub fn drift(&self, t: f64, x: &Vector) -> Vector {
        self.b_tilde.eval(t) * x + self.beta_tilde.eval(t)
    }

    /// Checks `ã(T) = a(T, v)` entrywise within `1e-12`.
    pub fn check_endpoint(&self, model: &DiffusionModel, spec: &BridgeSpec) -> Result<()> {
        let diff = self.a_tilde(spec.t_end) - model.diffusion(spec.t_end, &spec.v);
        if diff.amax() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "auxiliary diffusion at T differs from a(T, v) by {:e}; the bridge law would be singular w.r.t. the proposal",
                diff.amax()
            )));
        }
        Ok(())
    }
}

/// `K(t_i)`, `H̃(t_i) = K(t_i)⁻¹` and `v(t_i)` on every grid node.
#[derive(Debug, Clone)]
pub struct BackwardTable {
    grid: Arc<TimeGrid>,
    spec: BridgeSpec,
    k: Vec<Matrix>,
    h_tilde: Vec<Matrix>,
    v: Vec<Vector>,
}

impl BackwardTable {
    /// Picks the most exact route available: quadrature for drift-free
    /// auxiliaries with constant or nodal coefficients, the closed form for
    /// homogeneous ones, the backward ODEs otherwise.
    pub fn build(aux: &LinearAuxiliary, grid: &Arc<TimeGrid>, spec: &BridgeSpec) -> Result<Self> {
        if aux.drift_free() {
            return backward_tables_quadrature(aux, grid, spec);
        }
        if aux.homogeneous() {
            match backward_tables_closed(aux, grid, spec) {
                Err(Error::ClosedFormUnavailable(_)) | Err(Error::SingularLyapunov) => {}
                other => return other,
            }
        }
        backward_tables_ode(aux, grid, spec)
    }

    fn from_k_and_v(
        grid: &Arc<TimeGrid>,
        spec: &BridgeSpec,
        k: Vec<Matrix>,
        mut v: Vec<Vector>,
    ) -> Result<Self> {
        let n = grid.len();
        let mut h_tilde = Vec::with_capacity(n - 1);
        for (i, ki) in k.iter().enumerate().take(n - 1) {
            let chol = Cholesky::new(ki).map_err(|_| Error::TableNotSpd {
                node: i,
                t: grid.t(i),
            })?;
            h_tilde.push(chol.inverse());
        }
        v[n - 1] = spec.v.clone();
        Ok(Self {
            grid: grid.clone(),
            spec: spec.clone(),
            k,
            h_tilde,
            v,
        })
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn spec(&self) -> &BridgeSpec {
        &self.spec
    }

    pub fn k(&self, i: usize) -> &Matrix {
        &self.k[i]
    }

    pub fn v(&self, i: usize) -> &Vector {
        &self.v[i]
    }

    pub fn h_tilde(&self, i: usize) -> Result<&Matrix> {
        self.h_tilde.get(i).ok_or(Error::TerminalNode { node: i })
    }

    /// `r̃(t_i, x) = H̃(t_i)(v(t_i) − x)`.
    pub fn rtilde(&self, i: usize, x: &Vector) -> Result<Vector> {
        let mut out = Vector::zeros(x.len());
        self.rtilde_into(i, x.as_slice(), out.as_mut_slice())?;
        Ok(out)
    }

    #[inline]
    pub fn rtilde_into(&self, i: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        let h = self.h_tilde.get(i).ok_or(Error::TerminalNode { node: i })?;
        let v = &self.v[i];
        let d = x.len();
        for r in 0..d {
            let mut s = 0.0;
            for c in 0..d {
                s += h[(r, c)] * (v[c] - x[c]);
            }
            out[r] = s;
        }
        Ok(())
    }

    pub(crate) fn check_grid(&self, grid: &TimeGrid, spec: &BridgeSpec) -> Result<()> {
        if self.grid.nodes() != grid.nodes() || &self.spec != spec {
            return Err(Error::InvalidArgument(
                "backward table was built for a different grid or bridge".into(),
            ));
        }
        Ok(())
    }

    /// CSV dump: `t,K_00,...,v_0,...`, one row per node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.spec.dim();
        let mut header = vec!["t".to_string()];
        for r in 0..d {
            for c in 0..d {
                header.push(format!("K_{r}{c}"));
            }
        }
        for r in 0..d {
            header.push(format!("v_{r}"));
        }
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.grid.len() {
            let mut row = vec![format!("{:.15e}", self.grid.t(i))];
            for r in 0..d {
                for c in 0..d {
                    row.push(format!("{:.15e}", self.k[i][(r, c)]));
                }
            }
            for r in 0..d {
                row.push(format!("{:.15e}", self.v[i][r]));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn check_aux(aux: &LinearAuxiliary, grid: &TimeGrid, spec: &BridgeSpec) -> Result<()> {
    if aux.dim() != spec.dim() {
        return Err(Error::Dimension(format!(
            "auxiliary dimension {} vs bridge dimension {}",
            aux.dim(),
            spec.dim()
        )));
    }
    grid.check_spec(spec)
}

fn flatten(k: &Matrix, v: &Vector) -> Vector {
    let d = v.len();
    let mut y = Vector::zeros(d * d + d);
    y.rows_mut(0, d * d).copy_from_slice(k.as_slice());
    y.rows_mut(d * d, d).copy_from(v);
    y
}

fn unflatten(y: &Vector, d: usize) -> (Matrix, Vector) {
    let k = Matrix::from_column_slice(d, d, &y.as_slice()[..d * d]);
    let v = Vector::from_column_slice(&y.as_slice()[d * d..]);
    (k, v)
}

fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}

/// Integrates `K' = B̃K + KB̃ᵀ − ã`, `K(T) = 0` and `v' = B̃v + β̃`,
/// `v(T) = v` backwards with classical Runge–Kutta.
pub fn backward_tables_ode(
    aux: &LinearAuxiliary,
    grid: &Arc<TimeGrid>,
    spec: &BridgeSpec,
) -> Result<BackwardTable> {
    check_aux(aux, grid, spec)?;
    let d = aux.dim();
    let terminal = flatten(&Matrix::zeros(d, d), &spec.v);
    let traj = rk_backward(
        |t, y| {
            let (k, v) = unflatten(y, d);
            let b = aux.b_tilde.eval(t);
            let dk = &b * &k + &k * b.transpose() - aux.a_tilde(t);
            let dv = &b * v + aux.beta_tilde.eval(t);
            flatten(&dk, &dv)
        },
        &terminal,
        grid.nodes(),
    )?;
    let (k, v): (Vec<_>, Vec<_>) = traj
        .states()
        .iter()
        .map(|y| {
            let (mut k, v) = unflatten(y, d);
            symmetrize(&mut k);
            (k, v)
        })
        .unzip();
    BackwardTable::from_k_and_v(grid, spec, k, v)
}

/// Closed form for a homogeneous auxiliary:
/// `K(t) = e^{-(T-t)B̃} Λ e^{-(T-t)B̃ᵀ} − Λ` with `B̃Λ + ΛB̃ᵀ + ã = 0`, and
/// `v(t) = e^{-(T-t)B̃}(v − μ) + μ` with `B̃μ + β̃ = 0`.
pub fn backward_tables_closed(
    aux: &LinearAuxiliary,
    grid: &Arc<TimeGrid>,
    spec: &BridgeSpec,
) -> Result<BackwardTable> {
    check_aux(aux, grid, spec)?;
    let (b, beta, sigma) = match (&aux.b_tilde, &aux.beta_tilde, &aux.sigma_tilde) {
        (Coefficient::Constant(b), Coefficient::Constant(beta), Coefficient::Constant(s)) => {
            (b, beta, s)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "closed-form tables need a homogeneous auxiliary".into(),
            ))
        }
    };
    let a = sigma * sigma.transpose();
    let t_end = spec.t_end;
    let n = grid.len();

    if b.iter().all(|x| *x == 0.0) {
        let k = (0..n).map(|i| &a * (t_end - grid.t(i))).collect();
        let v = (0..n).map(|i| &spec.v - beta * (t_end - grid.t(i))).collect();
        return BackwardTable::from_k_and_v(grid, spec, k, v);
    }

    let lambda = solve_lyapunov(b, &a)?;
    let mu = if beta.iter().all(|x| *x == 0.0) {
        Vector::zeros(beta.len())
    } else {
        let sol = solve_linear(b, &Matrix::from_column_slice(beta.len(), 1, beta.as_slice()))
            .map_err(|_| {
                Error::ClosedFormUnavailable("B̃ is singular and β̃ is nonzero".into())
            })?;
        -Vector::from_column_slice(sol.as_slice())
    };
    let mut k = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let e = expm(&(b * -(t_end - grid.t(i))));
        let mut ki = &e * &lambda * e.transpose() - &lambda;
        symmetrize(&mut ki);
        k.push(ki);
        v.push(&e * (&spec.v - &mu) + &mu);
    }
    k[n - 1] = Matrix::zeros(b.nrows(), b.nrows());
    BackwardTable::from_k_and_v(grid, spec, k, v)
}

/// Exact tables for `B̃ ≡ 0` when `β̃`, `σ̃` are constant or piecewise
/// constant on the grid: `K(t_i) = ∫_{t_i}^T ã`, `v(t_i) = v − ∫_{t_i}^T β̃`.
pub fn backward_tables_quadrature(
    aux: &LinearAuxiliary,
    grid: &Arc<TimeGrid>,
    spec: &BridgeSpec,
) -> Result<BackwardTable> {
    check_aux(aux, grid, spec)?;
    if !aux.drift_free() {
        return Err(Error::InvalidArgument(
            "quadrature tables need B̃ ≡ 0 and non-functional β̃, σ̃".into(),
        ));
    }
    let n = grid.len();
    let t_end = spec.t_end;
    let d = aux.dim();
    let mut k = vec![Matrix::zeros(d, d); n];
    let mut v = vec![spec.v.clone(); n];
    match &aux.sigma_tilde {
        Coefficient::Constant(s) => {
            let a = s * s.transpose();
            for (i, ki) in k.iter_mut().enumerate() {
                *ki = &a * (t_end - grid.t(i));
            }
        }
        _ => {
            for i in (0..n - 1).rev() {
                let s = aux.sigma_tilde.at_node(grid, i);
                k[i] = &k[i + 1] + &s * s.transpose() * grid.step(i);
            }
        }
    }
    match &aux.beta_tilde {
        Coefficient::Constant(beta) => {
            for (i, vi) in v.iter_mut().enumerate() {
                *vi = &spec.v - beta * (t_end - grid.t(i));
            }
        }
        _ => {
            for i in (0..n - 1).rev() {
                v[i] = &v[i + 1] - aux.beta_tilde.at_node(grid, i) * grid.step(i);
            }
        }
    }
    BackwardTable::from_k_and_v(grid, spec, k, v)
}

/// Mean and covariance of the auxiliary process started at `u`.
#[derive(Debug, Clone)]
pub struct ForwardMoments {
    pub nodes: Vec<f64>,
    pub mean: Vec<Vector>,
    pub cov: Vec<Matrix>,
}

impl ForwardMoments {
    pub fn last_mean(&self) -> &Vector {
        self.mean.last().expect("non-empty")
    }

    pub fn last_cov(&self) -> &Matrix {
        self.cov.last().expect("non-empty")
    }
}

/// `m' = B̃m + β̃`, `m(0) = u`; `Q' = B̃Q + QB̃ᵀ + ã`, `Q(0) = 0`.
pub fn forward_moments(aux: &LinearAuxiliary, u: &Vector, grid: &TimeGrid) -> Result<ForwardMoments> {
    let d = aux.dim();
    if u.len() != d {
        return Err(Error::Dimension("start point vs auxiliary dimension".into()));
    }
    let n = grid.len();
    if aux.drift_free() {
        let mut mean = vec![u.clone(); n];
        let mut cov = vec![Matrix::zeros(d, d); n];
        for i in 0..n - 1 {
            let h = grid.step(i);
            let s = aux.sigma_tilde.at_node(grid, i);
            mean[i + 1] = &mean[i] + aux.beta_tilde.at_node(grid, i) * h;
            cov[i + 1] = &cov[i] + &s * s.transpose() * h;
        }
        return Ok(ForwardMoments {
            nodes: grid.nodes().to_vec(),
            mean,
            cov,
        });
    }
    let traj = rk4_solve(
        |t, y| {
            let (q, m) = unflatten(y, d);
            let b = aux.b_tilde.eval(t);
            let dq = &b * &q + &q * b.transpose() + aux.a_tilde(t);
            let dm = &b * m + aux.beta_tilde.eval(t);
            flatten(&dq, &dm)
        },
        &flatten(&Matrix::zeros(d, d), u),
        grid.nodes(),
    )?;
    let (cov, mean) = traj
        .states()
        .iter()
        .map(|y| {
            let (mut q, m) = unflatten(y, d);
            symmetrize(&mut q);
            (q, m)
        })
        .unzip();
    Ok(ForwardMoments {
        nodes: grid.nodes().to_vec(),
        mean,
        cov,
    })
}

/// `log p̃(0, u; T, v)` from the forward moments at `T`.
pub fn log_ptilde_endpoint(aux: &LinearAuxiliary, spec: &BridgeSpec, grid: &TimeGrid) -> Result<f64> {
    grid.check_spec(spec)?;
    let moments = forward_moments(aux, &spec.u, grid)?;
    gaussian_log_density(&spec.v, moments.last_mean(), moments.last_cov()).map_err(|e| match e {
        Error::NotSpd { .. } => Error::Singular,
        other => other,
    })
}

/// `σ̃` as a function of time under the given policy. `flow` supplies
/// `x(t)` for the interpolating policy.
pub fn sigma_tilde_policy(
    model: &DiffusionModel,
    spec: &BridgeSpec,
    flow: &Arc<OdeTrajectory>,
    policy: SigmaTildePolicy,
) -> Result<Coefficient<Matrix>> {
    let end = model.dispersion(spec.t_end, &spec.v);
    match policy {
        SigmaTildePolicy::ConstantEnd => Ok(Coefficient::Constant(end)),
        SigmaTildePolicy::Interpolate { t0 } => {
            let t_end = spec.t_end;
            if !(t0 > 0.0 && t0 < t_end) {
                return Err(Error::InvalidArgument(format!(
                    "interpolation start t0 = {t0} must lie in (0, {t_end})"
                )));
            }
            let sigma0 = model.dispersion(t0, &flow.interpolate(t0));
            let model = model.clone();
            let flow = flow.clone();
            Ok(Coefficient::function(move |t| {
                if t <= t0 {
                    model.dispersion(t, &flow.interpolate(t))
                } else if t >= t_end {
                    end.clone()
                } else {
                    (&end - &sigma0) * ((t - t0) / (t_end - t0)) + &sigma0
                }
            }))
        }
    }
}

/// Linear noise approximation around the flow: `B̃(t) = V(t, x(t))`,
/// `β̃(t) = b(t, x(t)) − V(t, x(t)) x(t)`.
pub fn lna_auxiliary(
    model: &DiffusionModel,
    spec: &BridgeSpec,
    flow: &Arc<OdeTrajectory>,
    policy: SigmaTildePolicy,
) -> Result<LinearAuxiliary> {
    let sigma = sigma_tilde_policy(model, spec, flow, policy)?;
    let (m1, f1) = (model.clone(), flow.clone());
    let b_tilde = Coefficient::function(move |t| m1.jacobian(t, &f1.interpolate(t)));
    let (m2, f2) = (model.clone(), flow.clone());
    let beta_tilde = Coefficient::function(move |t| {
        let x = f2.interpolate(t);
        m2.drift(t, &x) - m2.jacobian(t, &x) * &x
    });
    Ok(LinearAuxiliary::new(
        model.dim(),
        model.noise_dim(),
        b_tilde,
        beta_tilde,
        sigma,
    ))
}
