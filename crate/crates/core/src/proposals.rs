//! Bridge proposals. Every simulator runs the Euler scheme with left-point
//! coefficients on steps `0..N-1` and assigns the terminal state `v`, so the
//! `1/(T − t)` pulling terms are never evaluated at `T`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::auxiliary::{
    forward_moments, lna_auxiliary, log_ptilde_endpoint, BackwardTable, Coefficient,
    LinearAuxiliary, SigmaTildePolicy,
};
use crate::error::{Error, Result};
use crate::linalg_ode::{rk4_solve, solve_linear, Cholesky, Matrix, OdeTrajectory, Vector};
use crate::sde::{
    euler_bridge, euler_flow, sample_wiener, solve_flow, BridgeSpec, DiffusionModel, SamplePath,
    TimeGrid, WienerIncrements,
};

/// Pulling term `κ(t, x) = (v − x)/(T − t)`.
#[inline]
pub fn kappa(spec: &BridgeSpec, t: f64, x: &[f64], out: &mut [f64]) {
    let tau = spec.t_end - t;
    for (k, o) in out.iter_mut().enumerate() {
        *o = (spec.v[k] - x[k]) / tau;
    }
}

/// Whether the Delyon–Hu proposal keeps the model drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelyonHuLambda {
    /// Drift `(v − x)/(T − t)` only (modified diffusion bridge).
    Zero,
    /// Drift `b(t, x) + (v − x)/(T − t)`.
    One,
}

/// `a = σσᵀ` into a preallocated buffer.
#[inline]
fn outer_into(s: &Matrix, a: &mut Matrix) {
    let (d, m) = s.shape();
    for r in 0..d {
        for c in 0..=r {
            let mut acc = 0.0;
            for k in 0..m {
                acc += s[(r, k)] * s[(c, k)];
            }
            a[(r, c)] = acc;
            a[(c, r)] = acc;
        }
    }
}

#[inline]
fn mat_vec_into(m: &Matrix, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, xc) in x.iter().enumerate() {
            acc += m[(r, c)] * xc;
        }
        *o = acc;
    }
}

fn check_inputs(model: &DiffusionModel, spec: &BridgeSpec, grid: &TimeGrid) -> Result<()> {
    spec.check_model(model)?;
    grid.check_spec(spec)
}

fn check_trajectory(traj: &OdeTrajectory, grid: &TimeGrid, what: &str) -> Result<()> {
    if traj.grid() != grid.nodes() {
        return Err(Error::InvalidArgument(format!(
            "{what} is not tabulated on the simulation grid"
        )));
    }
    Ok(())
}

pub fn delyon_hu(
    lambda: DelyonHuLambda,
    model: &DiffusionModel,
    spec: &BridgeSpec,
    grid: &Arc<TimeGrid>,
    dw: &WienerIncrements,
) -> Result<SamplePath> {
    check_inputs(model, spec, grid)?;
    let mut pull = vec![0.0; spec.dim()];
    euler_bridge(
        |_, t, x, out| {
            kappa(spec, t, x, &mut pull);
            match lambda {
                DelyonHuLambda::Zero => out.copy_from_slice(&pull),
                DelyonHuLambda::One => {
                    model.drift_into(t, x, out);
                    for (o, p) in out.iter_mut().zip(&pull) {
                        *o += p;
                    }
                }
            }
        },
        |_, t, x, out| model.dispersion_into(t, x, out),
        spec.u.as_slice(),
        model.noise_dim(),
        grid,
        dw,
        spec.v.as_slice(),
    )
}

/// Simulates a residual `C` around the tabulated trajectory `base` by Euler,
/// with `C_0 = 0`, `C_N = v − base_N`, and returns `base + C` with the
/// terminal state set to `v`. `drift` receives `(i, t, base_i, C_i, out)`.
fn residual_scheme<F>(
    model: &DiffusionModel,
    spec: &BridgeSpec,
    grid: &Arc<TimeGrid>,
    base: &OdeTrajectory,
    dw: &WienerIncrements,
    mut drift: F,
) -> Result<SamplePath>
where
    F: FnMut(usize, f64, &[f64], &[f64], &mut [f64]),
{
    let d = spec.dim();
    let mut at = vec![0.0; d];
    let end: Vec<f64> = (0..d).map(|k| spec.v[k] - base.last()[k]).collect();
    let c = euler_bridge(
        |i, t, c, out| drift(i, t, base.state(i).as_slice(), c, out),
        |i, t, c, out| {
            for k in 0..d {
                at[k] = base.state(i)[k] + c[k];
            }
            model.dispersion_into(t, &at, out)
        },
        &vec![0.0; d],
        model.noise_dim(),
        grid,
        dw,
        &end,
    )?;
    let n = grid.len();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n - 1 {
        data.extend(c.state(i).iter().zip(base.state(i).iter()).map(|(ci, xi)| xi + ci));
    }
    data.extend_from_slice(spec.v.as_slice());
    SamplePath::new(grid.clone(), d, data)
}

/// Residual proposal around the flow skeleton `flow`:
/// `dC = (v − x(T) − C)/(T − t) dt + σ(t, x(t) + C) dW`, path `x + C`.
pub fn residual(
    model: &DiffusionModel,
    spec: &BridgeSpec,
    grid: &Arc<TimeGrid>,
    flow: &OdeTrajectory,
    dw: &WienerIncrements,
) -> Result<SamplePath> {
    check_inputs(model, spec, grid)?;
    check_trajectory(flow, grid, "flow")?;
    let gap = spec.v.clone() - flow.last();
    residual_scheme(model, spec, grid, flow, dw, |_, t, _, c, out| {
        let tau = spec.t_end - t;
        for k in 0..out.len() {
            out[k] = (gap[k] - c[k]) / tau;
        }
    })
}

/// The residual proposal simulated directly as
/// `dX = b(t, x(t)) dt + (v − X − (x(T) − x(t)))/(T − t) dt + σ(t, X) dW`,
/// with `b(t, x(t)) dt` taken as the flow increment over each step.
pub fn residual_direct(
    model: &DiffusionModel,
    spec: &BridgeSpec,
    grid: &Arc<TimeGrid>,
    flow: &OdeTrajectory,
    dw: &WienerIncrements,
) -> Result<SamplePath> {
    check_inputs(model, spec, grid)?;
    check_trajectory(flow, grid, "flow")?;
    let x_end = flow.last();
    euler_bridge(
        |i, t, x, out| {
            let tau = spec.t_end - t;
            let h = grid.step(i);
            let (xi, xn) = (flow.state(i), flow.state(i + 1));
            for k in 0..out.len() {
                out[k] = (xn[k] - xi[k]) / h + (spec.v[k] - x[k] - (x_end[k] - xi[k])) / tau;
            }
        },
        |_, t, x, out| model.dispersion_into(t, x, out),
        spec.u.as_slice(),
        model.noise_dim(),
        grid,
        dw,
        spec.v.as_slice(),
    )
}

/// `z(t) = x(t) + ρ(t)` on the grid, where `ρ(t)` is the conditional mean of
/// the linearised residual `dR = V(t, x(t)) R dt + σ(t, x(t)) dW`, `R_0 = 0`,
/// given `R_T = v − x(T)`. Rates hold the forward secant slopes.
pub fn lna_trajectory(
    model: &DiffusionModel,
    spec: &BridgeSpec,
    grid: &Arc<TimeGrid>,
    flow: &Arc<OdeTrajectory>,
) -> Result<OdeTrajectory> {
    check_inputs(model, spec, grid)?;
    check_trajectory(flow, grid, "flow")?;
    let d = spec.dim();
    let (m1, f1) = (model.clone(), flow.clone());
    let (m2, f2) = (model.clone(), flow.clone());
    let residual_aux = LinearAuxiliary::new(
        d,
        model.noise_dim(),
        Coefficient::function(move |t| m1.jacobian(t, &f1.interpolate(t))),
        Coefficient::Constant(Vector::zeros(d)),
        Coefficient::function(move |t| m2.dispersion(t, &f2.interpolate(t))),
    );
    let moments = forward_moments(&residual_aux, &Vector::zeros(d), grid)?;

    let fundamental = rk4_solve(
        |t, y| {
            let phi = Matrix::from_column_slice(d, d, y.as_slice());
            let dphi = model.jacobian(t, &flow.interpolate(t)) * phi;
            Vector::from_column_slice(dphi.as_slice())
        },
        &Vector::from_column_slice(Matrix::identity(d, d).as_slice()),
        grid.nodes(),
    )?;
    let phi = |i: usize| Matrix::from_column_slice(d, d, fundamental.state(i).as_slice());
    let n = grid.len();
    let phi_end_t = phi(n - 1).transpose();
    let weight = Cholesky::new(moments.last_cov())
        .map_err(|_| Error::Singular)?
        .solve(&(&spec.v - flow.last()));

    let mut states = Vec::with_capacity(n);
    for i in 0..n - 1 {
        // Φ(T, t_i)ᵀ = Φ(t_i, 0)⁻ᵀ Φ(T, 0)ᵀ
        let transition_t = solve_linear(&phi(i).transpose(), &phi_end_t)?;
        let rho = &moments.cov[i] * (transition_t * &weight);
        states.push(flow.state(i) + rho);
    }
    states.push(spec.v.clone());
    let mut rates: Vec<Vector> = (0..n - 1)
        .map(|i| (&states[i + 1] - &states[i]) / grid.step(i))
        .collect();
    rates.push(rates.last().cloned().unwrap_or_else(|| Vector::zeros(d)));
    OdeTrajectory::new(grid.nodes().to_vec(), states, rates)
}

/// LNA residual proposal: `dC = −C/(T − t) dt + σ(t, z(t) + C) dW`, path
/// `z + C`, with `z` from [`lna_trajectory`].
pub fn lna_residual(
    model: &DiffusionModel,
    spec: &BridgeSpec,
    grid: &Arc<TimeGrid>,
    z: &OdeTrajectory,
    dw: &WienerIncrements,
) -> Result<SamplePath> {
    check_inputs(model, spec, grid)?;
    check_trajectory(z, grid, "LNA trajectory")?;
    residual_scheme(model, spec, grid, z, dw, |_, t, _, c, out| {
        let tau = spec.t_end - t;
        for k in 0..out.len() {
            out[k] = -c[k] / tau;
        }
    })
}

/// Guided proposal: drift `b(t, x) + a(t, x) r̃(t, x)`.
pub fn guided(
    model: &DiffusionModel,
    spec: &BridgeSpec,
    grid: &Arc<TimeGrid>,
    table: &BackwardTable,
    dw: &WienerIncrements,
) -> Result<SamplePath> {
    check_inputs(model, spec, grid)?;
    table.check_grid(grid, spec)?;
    let d = spec.dim();
    let mut sigma = Matrix::zeros(d, model.noise_dim());
    let mut a = Matrix::zeros(d, d);
    let mut r = vec![0.0; d];
    let mut ar = vec![0.0; d];
    let mut failure = None;
    let path = euler_bridge(
        |i, t, x, out| {
            model.drift_into(t, x, out);
            if let Err(e) = table.rtilde_into(i, x, &mut r) {
                failure.get_or_insert(e);
                return;
            }
            model.dispersion_into(t, x, &mut sigma);
            outer_into(&sigma, &mut a);
            mat_vec_into(&a, &r, &mut ar);
            for (o, p) in out.iter_mut().zip(&ar) {
                *o += p;
            }
        },
        |_, t, x, out| model.dispersion_into(t, x, out),
        spec.u.as_slice(),
        model.noise_dim(),
        grid,
        dw,
        spec.v.as_slice(),
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(path),
    }
}

fn check_constant_sigma(model: &DiffusionModel, spec: &BridgeSpec) -> Result<()> {
    let start = model.dispersion(0.0, &spec.u);
    let end = model.dispersion(spec.t_end, &spec.v);
    let diff = (&start - &end).amax();
    if diff > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "adjusted-v1 needs a constant dispersion but σ(0, u) and σ(T, v) differ by {diff:e}; use adjusted-v2"
        )));
    }
    Ok(())
}

/// Adjusted residual proposal for constant `σ`:
/// `dC = (b(t, x + C) − b(t, x)) dt + (v − x(T) − C)/(T − t) dt + σ dW`.
pub fn adjusted_residual_v1(
    model: &DiffusionModel,
    spec: &BridgeSpec,
    grid: &Arc<TimeGrid>,
    flow: &OdeTrajectory,
    dw: &WienerIncrements,
) -> Result<SamplePath> {
    check_inputs(model, spec, grid)?;
    check_trajectory(flow, grid, "flow")?;
    check_constant_sigma(model, spec)?;
    let d = spec.dim();
    let gap = spec.v.clone() - flow.last();
    let mut at = vec![0.0; d];
    let mut b_at = vec![0.0; d];
    residual_scheme(model, spec, grid, flow, dw, |i, t, x, c, out| {
        let tau = spec.t_end - t;
        for k in 0..d {
            at[k] = x[k] + c[k];
        }
        model.drift_into(t, &at, &mut b_at);
        let b_flow = &flow.rates()[i];
        for k in 0..d {
            out[k] = b_at[k] - b_flow[k] + (gap[k] - c[k]) / tau;
        }
    })
}

/// Adjusted residual proposal for general `σ`:
/// `dC = (b(t, x + C) − b(t, x)) dt + a(t, x + C) a(T, v)⁻¹ (v − x(T) − C)/(T − t) dt + σ(t, x + C) dW`.
pub fn adjusted_residual_v2(
    model: &DiffusionModel,
    spec: &BridgeSpec,
    grid: &Arc<TimeGrid>,
    flow: &OdeTrajectory,
    dw: &WienerIncrements,
) -> Result<SamplePath> {
    check_inputs(model, spec, grid)?;
    check_trajectory(flow, grid, "flow")?;
    let d = spec.dim();
    let a_end_inv = Cholesky::new(&model.diffusion(spec.t_end, &spec.v))?.inverse();
    let gap = spec.v.clone() - flow.last();
    let mut at = vec![0.0; d];
    let mut b_at = vec![0.0; d];
    let mut sigma = Matrix::zeros(d, model.noise_dim());
    let mut a = Matrix::zeros(d, d);
    let mut pull = vec![0.0; d];
    let mut scaled = vec![0.0; d];
    let mut adjusted = vec![0.0; d];
    residual_scheme(model, spec, grid, flow, dw, |i, t, x, c, out| {
        let tau = spec.t_end - t;
        for k in 0..d {
            at[k] = x[k] + c[k];
            pull[k] = (gap[k] - c[k]) / tau;
        }
        model.drift_into(t, &at, &mut b_at);
        model.dispersion_into(t, &at, &mut sigma);
        outer_into(&sigma, &mut a);
        mat_vec_into(&a_end_inv, &pull, &mut scaled);
        mat_vec_into(&a, &scaled, &mut adjusted);
        let b_flow = &flow.rates()[i];
        for k in 0..d {
            out[k] = b_at[k] - b_flow[k] + adjusted[k];
        }
    })
}

/// Auxiliary process behind a guided proposal.
#[derive(Debug, Clone)]
pub enum AuxiliaryChoice {
    /// `β̃(t) = b(t, x(t))`, `B̃ ≡ 0`, `σ̃ ≡ σ(T, v)` around the flow skeleton.
    FlowDrift,
    /// Linearisation of the drift around the flow.
    Lna(SigmaTildePolicy),
    /// `dX̃ = σ(T, v) dW`.
    Brownian,
    Custom(LinearAuxiliary),
}

impl AuxiliaryChoice {
    pub fn name(&self) -> &'static str {
        match self {
            AuxiliaryChoice::FlowDrift => "simple51",
            AuxiliaryChoice::Lna(_) => "lna",
            AuxiliaryChoice::Brownian => "brownian",
            AuxiliaryChoice::Custom(_) => "custom",
        }
    }
}

#[derive(Debug, Clone)]
pub enum ProposalKind {
    DelyonHu(DelyonHuLambda),
    Residual,
    LnaResidual,
    Guided(AuxiliaryChoice),
    AdjustedV1,
    AdjustedV2,
}

impl ProposalKind {
    pub const NAMES: [&'static str; 7] = [
        "delyon-hu-0",
        "delyon-hu-1",
        "residual",
        "lna-residual",
        "guided",
        "adjusted-v1",
        "adjusted-v2",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ProposalKind::DelyonHu(DelyonHuLambda::Zero) => "delyon-hu-0",
            ProposalKind::DelyonHu(DelyonHuLambda::One) => "delyon-hu-1",
            ProposalKind::Residual => "residual",
            ProposalKind::LnaResidual => "lna-residual",
            ProposalKind::Guided(_) => "guided",
            ProposalKind::AdjustedV1 => "adjusted-v1",
            ProposalKind::AdjustedV2 => "adjusted-v2",
        }
    }
}

impl fmt::Display for ProposalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProposalKind::Guided(aux) => write!(f, "guided({})", aux.name()),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for ProposalKind {
    type Err = Error;

    /// Parses the CLI names; `guided` defaults to the flow-drift auxiliary.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "delyon-hu-0" => ProposalKind::DelyonHu(DelyonHuLambda::Zero),
            "delyon-hu-1" => ProposalKind::DelyonHu(DelyonHuLambda::One),
            "residual" => ProposalKind::Residual,
            "lna-residual" => ProposalKind::LnaResidual,
            "guided" => ProposalKind::Guided(AuxiliaryChoice::FlowDrift),
            "adjusted-v1" => ProposalKind::AdjustedV1,
            "adjusted-v2" => ProposalKind::AdjustedV2,
            other => {
                return Err(Error::config(
                    "proposal",
                    format!("unknown proposal '{other}', expected one of {}", Self::NAMES.join(", ")),
                ))
            }
        })
    }
}

/// Auxiliary coefficients evaluated at the grid nodes.
#[derive(Debug, Clone)]
pub struct AuxiliaryNodes {
    pub drift_matrix: Vec<Matrix>,
    pub drift_offset: Vec<Vector>,
    pub diffusion: Vec<Matrix>,
}

impl AuxiliaryNodes {
    pub fn new(aux: &LinearAuxiliary, grid: &TimeGrid) -> Self {
        let nodes = grid.nodes();
        Self {
            drift_matrix: nodes.iter().map(|&t| aux.b_tilde.eval(t)).collect(),
            drift_offset: nodes.iter().map(|&t| aux.beta_tilde.eval(t)).collect(),
            diffusion: nodes.iter().map(|&t| aux.a_tilde(t)).collect(),
        }
    }
}

/// A guided auxiliary with its tables and `log p̃(0, u; T, v)`.
#[derive(Debug, Clone)]
pub struct GuidedSetup {
    pub aux: LinearAuxiliary,
    pub table: BackwardTable,
    pub nodes: AuxiliaryNodes,
    pub log_ptilde: f64,
}

impl GuidedSetup {
    pub fn new(aux: LinearAuxiliary, grid: &Arc<TimeGrid>, spec: &BridgeSpec) -> Result<Self> {
        let table = BackwardTable::build(&aux, grid, spec)?;
        let log_ptilde = log_ptilde_endpoint(&aux, spec, grid)?;
        let nodes = AuxiliaryNodes::new(&aux, grid);
        Ok(Self {
            aux,
            table,
            nodes,
            log_ptilde,
        })
    }
}

/// Precomputed, per-bridge state of a proposal.
#[derive(Debug, Clone)]
pub enum Prepared {
    DelyonHu(DelyonHuLambda),
    /// Flow skeleton.
    Residual(Arc<OdeTrajectory>),
    /// LNA-corrected trajectory `z`.
    LnaResidual(Arc<OdeTrajectory>),
    Guided(Box<GuidedSetup>),
    /// Flow skeleton and the equivalent guided setup, used for weighting.
    Adjusted {
        constant_sigma: bool,
        flow: Arc<OdeTrajectory>,
        guided: Box<GuidedSetup>,
    },
}

/// A proposal bound to a model, bridge and grid.
#[derive(Debug, Clone)]
pub struct Proposal {
    kind: ProposalKind,
    model: DiffusionModel,
    spec: BridgeSpec,
    grid: Arc<TimeGrid>,
    prepared: Prepared,
}

impl Proposal {
    pub fn new(
        kind: ProposalKind,
        model: &DiffusionModel,
        spec: &BridgeSpec,
        grid: &Arc<TimeGrid>,
    ) -> Result<Self> {
        check_inputs(model, spec, grid)?;
        let skeleton = || euler_flow(model, &spec.u, grid).map(Arc::new);
        let prepared = match &kind {
            ProposalKind::DelyonHu(lambda) => Prepared::DelyonHu(*lambda),
            ProposalKind::Residual => Prepared::Residual(skeleton()?),
            ProposalKind::LnaResidual => {
                let flow = Arc::new(solve_flow(model, &spec.u, grid)?);
                Prepared::LnaResidual(Arc::new(lna_trajectory(model, spec, grid, &flow)?))
            }
            ProposalKind::Guided(choice) => {
                let aux = match choice {
                    AuxiliaryChoice::FlowDrift => {
                        LinearAuxiliary::flow_drift(model, spec, &*skeleton()?)
                    }
                    AuxiliaryChoice::Lna(policy) => {
                        let flow = Arc::new(solve_flow(model, &spec.u, grid)?);
                        lna_auxiliary(model, spec, &flow, *policy)?
                    }
                    AuxiliaryChoice::Brownian => {
                        LinearAuxiliary::brownian(model.dispersion(spec.t_end, &spec.v))
                    }
                    AuxiliaryChoice::Custom(aux) => aux.clone(),
                };
                aux.check_endpoint(model, spec)?;
                Prepared::Guided(Box::new(GuidedSetup::new(aux, grid, spec)?))
            }
            ProposalKind::AdjustedV1 | ProposalKind::AdjustedV2 => {
                let constant_sigma = matches!(kind, ProposalKind::AdjustedV1);
                if constant_sigma {
                    check_constant_sigma(model, spec)?;
                }
                let flow = skeleton()?;
                let aux = LinearAuxiliary::flow_drift(model, spec, &flow);
                Prepared::Adjusted {
                    constant_sigma,
                    flow,
                    guided: Box::new(GuidedSetup::new(aux, grid, spec)?),
                }
            }
        };
        Ok(Self {
            kind,
            model: model.clone(),
            spec: spec.clone(),
            grid: grid.clone(),
            prepared,
        })
    }

    pub fn kind(&self) -> &ProposalKind {
        &self.kind
    }

    pub fn model(&self) -> &DiffusionModel {
        &self.model
    }

    pub fn spec(&self) -> &BridgeSpec {
        &self.spec
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn prepared(&self) -> &Prepared {
        &self.prepared
    }

    /// Guided setup for guided and adjusted proposals.
    pub fn guided_setup(&self) -> Option<&GuidedSetup> {
        match &self.prepared {
            Prepared::Guided(g) | Prepared::Adjusted { guided: g, .. } => Some(g),
            _ => None,
        }
    }

    pub fn simulate(&self, dw: &WienerIncrements) -> Result<SamplePath> {
        let (m, s, g) = (&self.model, &self.spec, &self.grid);
        match &self.prepared {
            Prepared::DelyonHu(lambda) => delyon_hu(*lambda, m, s, g, dw),
            Prepared::Residual(flow) => residual(m, s, g, flow, dw),
            Prepared::LnaResidual(z) => lna_residual(m, s, g, z, dw),
            Prepared::Guided(setup) => guided(m, s, g, &setup.table, dw),
            Prepared::Adjusted {
                constant_sigma: true,
                flow,
                ..
            } => adjusted_residual_v1(m, s, g, flow, dw),
            Prepared::Adjusted { flow, .. } => adjusted_residual_v2(m, s, g, flow, dw),
        }
    }

    /// Simulates with increments drawn from `seed`.
    pub fn simulate_seed(&self, seed: u64) -> Result<SamplePath> {
        self.simulate(&sample_wiener(&self.grid, self.model.noise_dim(), seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::derive_seed;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn m1(x: f64) -> Matrix {
        Matrix::from_element(1, 1, x)
    }

    fn ou(alpha: f64, sigma: f64) -> DiffusionModel {
        DiffusionModel::scalar(move |_, x| -alpha * x, move |_, _| -alpha, sigma)
    }

    fn sine(sigma: f64) -> DiffusionModel {
        use std::f64::consts::PI;
        DiffusionModel::scalar(
            |_, x| -(2.0 * PI * x).sin(),
            |_, x| -2.0 * PI * (2.0 * PI * x).cos(),
            sigma,
        )
    }

    fn setup(t: f64, n: usize) -> Arc<TimeGrid> {
        Arc::new(TimeGrid::uniform(t, n).unwrap())
    }

    #[test]
    fn kappa_is_the_pulling_term() {
        let spec = BridgeSpec::scalar(0.0, 2.0, 4.0).unwrap();
        let mut out = [0.0];
        kappa(&spec, 1.0, &[0.5], &mut out);
        assert_eq!(out[0], 0.5);
    }

    #[test]
    fn delyon_hu_zero_noise_is_a_straight_line() {
        let spec = BridgeSpec::scalar(0.2, 1.4, 2.0).unwrap();
        let grid = setup(2.0, 400);
        let dw = WienerIncrements::zeros(&grid, 1);
        let path = delyon_hu(DelyonHuLambda::Zero, &ou(1.0, 0.0), &spec, &grid, &dw).unwrap();
        for i in 0..grid.len() {
            let line = 0.2 + 1.2 * grid.t(i) / 2.0;
            assert_relative_eq!(path.state(i)[0], line, epsilon = 1e-12);
        }
        assert_eq!(path.last(), &[1.4]);
    }

    #[test]
    fn delyon_hu_zero_ignores_drift() {
        let spec = BridgeSpec::scalar(0.0, 1.0, 1.0).unwrap();
        let grid = setup(1.0, 200);
        let dw = sample_wiener(&grid, 1, 3);
        let a = delyon_hu(DelyonHuLambda::Zero, &sine(0.5), &spec, &grid, &dw).unwrap();
        let b = delyon_hu(DelyonHuLambda::Zero, &DiffusionModel::brownian(m1(0.5)), &spec, &grid, &dw).unwrap();
        assert_eq!(a, b);
        let c = delyon_hu(DelyonHuLambda::One, &sine(0.5), &spec, &grid, &dw).unwrap();
        assert!(a.sup_distance(&c) > 0.0);
        assert_eq!(c.last(), &[1.0]);
    }

    #[test]
    fn residual_forms_agree() {
        let model = ou(2.0, 0.1);
        let spec = BridgeSpec::scalar(0.1, 1.0, 3.0).unwrap();
        let grid = setup(3.0, 3000);
        let flow = euler_flow(&model, &spec.u, &grid).unwrap();
        for seed in 0..5 {
            let dw = sample_wiener(&grid, 1, seed);
            let a = residual(&model, &spec, &grid, &flow, &dw).unwrap();
            let b = residual_direct(&model, &spec, &grid, &flow, &dw).unwrap();
            assert!(a.sup_distance(&b) <= 1e-12, "{}", a.sup_distance(&b));
            assert_eq!(a.last(), &[1.0]);
        }
    }

    #[test]
    fn residual_without_drift_is_delyon_hu_zero() {
        let model = DiffusionModel::brownian(m1(0.7));
        let spec = BridgeSpec::scalar(0.3, -1.0, 2.0).unwrap();
        let grid = setup(2.0, 500);
        let flow = euler_flow(&model, &spec.u, &grid).unwrap();
        let dw = sample_wiener(&grid, 1, 11);
        let a = residual(&model, &spec, &grid, &flow, &dw).unwrap();
        let b = delyon_hu(DelyonHuLambda::Zero, &model, &spec, &grid, &dw).unwrap();
        assert!(a.sup_distance(&b) <= 1e-12);
    }

    #[test]
    fn residual_on_sine_model_has_zero_flow() {
        let model = sine(0.5);
        let spec = BridgeSpec::scalar(0.0, 1.0, 2.0).unwrap();
        let grid = setup(2.0, 400);
        let flow = euler_flow(&model, &spec.u, &grid).unwrap();
        assert!(flow.states().iter().all(|x| x[0] == 0.0));
        let dw = sample_wiener(&grid, 1, 5);
        let a = residual(&model, &spec, &grid, &flow, &dw).unwrap();
        let b = delyon_hu(DelyonHuLambda::Zero, &model, &spec, &grid, &dw).unwrap();
        assert!(a.sup_distance(&b) <= 1e-12);
    }

    #[test]
    fn guided_with_brownian_table_is_delyon_hu_zero() {
        let model = DiffusionModel::brownian(Matrix::identity(2, 2));
        let spec = BridgeSpec::new(Vector::from_vec(vec![0.0, 1.0]), Vector::from_vec(vec![1.0, -1.0]), 1.5).unwrap();
        let grid = setup(1.5, 300);
        let table = BackwardTable::build(&LinearAuxiliary::brownian(Matrix::identity(2, 2)), &grid, &spec).unwrap();
        let dw = sample_wiener(&grid, 2, 9);
        let a = guided(&model, &spec, &grid, &table, &dw).unwrap();
        let b = delyon_hu(DelyonHuLambda::Zero, &model, &spec, &grid, &dw).unwrap();
        assert!(a.sup_distance(&b) <= 1e-12);
    }

    #[test]
    fn guided_rejects_foreign_table() {
        let model = DiffusionModel::brownian(m1(1.0));
        let spec = BridgeSpec::scalar(0.0, 1.0, 1.0).unwrap();
        let table = BackwardTable::build(&LinearAuxiliary::brownian(m1(1.0)), &setup(1.0, 10), &spec).unwrap();
        let grid = setup(1.0, 20);
        let dw = sample_wiener(&grid, 1, 0);
        assert!(guided(&model, &spec, &grid, &table, &dw).is_err());
    }

    #[test]
    fn simple_auxiliary_drift_matches_closed_expression() {
        // b + a a(T,v)⁻¹ (v − x − ∫_t^T β̃)/(T − t) for a state-dependent σ
        let model = DiffusionModel::new(
            1,
            1,
            |_, x, out| out[0] = -x[0] + 0.3,
            |_, x, out| out[(0, 0)] = 0.5 + 0.1 * x[0].sin(),
        );
        let spec = BridgeSpec::scalar(0.2, 0.8, 1.0).unwrap();
        let grid = setup(1.0, 100);
        let flow = euler_flow(&model, &spec.u, &grid).unwrap();
        let aux = LinearAuxiliary::flow_drift(&model, &spec, &flow);
        let table = BackwardTable::build(&aux, &grid, &spec).unwrap();
        let a_end = model.diffusion(1.0, &spec.v)[(0, 0)];
        for i in [0, 17, 63, 99] {
            let t = grid.t(i);
            let x = Vector::from_element(1, 0.45);
            let integral = flow.last()[0] - flow.state(i)[0];
            let a = model.diffusion(t, &x)[(0, 0)];
            let expect = a / a_end * (0.8 - 0.45 - integral) / (1.0 - t);
            let got = a * table.rtilde(i, &x).unwrap()[0];
            assert_relative_eq!(got, expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn adjusted_v1_requires_constant_sigma() {
        let model = DiffusionModel::new(1, 1, |_, _, out| out[0] = 0.0, |_, x, out| out[(0, 0)] = 1.0 + x[0] * x[0]);
        let spec = BridgeSpec::scalar(0.0, 1.0, 1.0).unwrap();
        let grid = setup(1.0, 10);
        let flow = euler_flow(&model, &spec.u, &grid).unwrap();
        let dw = sample_wiener(&grid, 1, 0);
        let err = adjusted_residual_v1(&model, &spec, &grid, &flow, &dw).unwrap_err();
        assert!(err.to_string().contains("adjusted-v2"));
        assert!(adjusted_residual_v2(&model, &spec, &grid, &flow, &dw).is_ok());
    }

    #[test]
    fn adjusted_variants_and_guided_coincide() {
        let spec = BridgeSpec::scalar(0.0, 1.0, 2.0).unwrap();
        let grid = setup(2.0, 2000);
        for model in [sine(0.5), ou(2.0, 0.1)] {
            let flow = euler_flow(&model, &spec.u, &grid).unwrap();
            let setup = GuidedSetup::new(LinearAuxiliary::flow_drift(&model, &spec, &flow), &grid, &spec).unwrap();
            for seed in 0..3 {
                let dw = sample_wiener(&grid, 1, seed);
                let v1 = adjusted_residual_v1(&model, &spec, &grid, &flow, &dw).unwrap();
                let v2 = adjusted_residual_v2(&model, &spec, &grid, &flow, &dw).unwrap();
                let g = guided(&model, &spec, &grid, &setup.table, &dw).unwrap();
                assert!(v1.sup_distance(&v2) <= 1e-12);
                assert!(v2.sup_distance(&g) <= 1e-9);
                let r = residual(&model, &spec, &grid, &flow, &dw).unwrap();
                assert!(r.sup_distance(&v1) > 1e-6);
            }
        }
    }

    #[test]
    fn adjusted_v2_with_state_dependent_sigma_is_guided() {
        let model = DiffusionModel::new(
            1,
            1,
            |t, x, out| out[0] = -0.5 * x[0] + t.cos(),
            |_, x, out| out[(0, 0)] = 0.3 + 0.1 * (x[0] * x[0]).min(4.0),
        );
        let spec = BridgeSpec::scalar(0.5, -0.2, 1.0).unwrap();
        let grid = setup(1.0, 1000);
        let flow = euler_flow(&model, &spec.u, &grid).unwrap();
        let setup = GuidedSetup::new(LinearAuxiliary::flow_drift(&model, &spec, &flow), &grid, &spec).unwrap();
        for seed in 0..5 {
            let dw = sample_wiener(&grid, 1, seed);
            let v2 = adjusted_residual_v2(&model, &spec, &grid, &flow, &dw).unwrap();
            let g = guided(&model, &spec, &grid, &setup.table, &dw).unwrap();
            assert!(v2.sup_distance(&g) <= 1e-9);
        }
    }

    /// Mean of `X_t` given `X_T = v` for `dX = (BX + β) dt + σ dW` by
    /// conditioning the joint Gaussian law of `(X_t, X_T)`:
    /// `Cov(X_T, X_t) = e^{B(T−t)} Q(t)`, moments from a fine Heun recursion.
    fn linear_bridge_mean(b: &Matrix, beta: &Vector, sigma: &Matrix, spec: &BridgeSpec, t: f64) -> Vector {
        let d = b.nrows();
        let steps = 100_000;
        let dt = spec.t_end / steps as f64;
        let a = sigma * sigma.transpose();
        let rate = |m: &Vector, q: &Matrix| (b * m + beta, b * q + q * b.transpose() + &a);
        let (mut m, mut q) = (spec.u.clone(), Matrix::zeros(d, d));
        let split = (t / dt).round() as usize;
        let (mut m_t, mut q_t) = (m.clone(), q.clone());
        for k in 0..steps {
            if k == split {
                (m_t, q_t) = (m.clone(), q.clone());
            }
            let (dm, dq) = rate(&m, &q);
            let (dm2, dq2) = rate(&(&m + &dm * dt), &(&q + &dq * dt));
            m += (dm + dm2) * (0.5 * dt);
            q += (dq + dq2) * (0.5 * dt);
        }
        if split >= steps {
            return spec.v.clone();
        }
        let cross = crate::linalg_ode::expm(&(b * (spec.t_end - t))) * &q_t;
        m_t + cross.transpose() * q.try_inverse().unwrap() * (&spec.v - m)
    }

    #[test]
    fn lna_trajectory_is_exact_linear_bridge_mean() {
        let b = Matrix::from_row_slice(2, 2, &[-1.0, 0.5, -0.3, -0.8]);
        let beta = Vector::from_vec(vec![0.2, -0.1]);
        let sigma = Matrix::from_row_slice(2, 2, &[0.4, 0.0, 0.1, 0.3]);
        let model = DiffusionModel::linear(b.clone(), beta.clone(), sigma.clone());
        let spec = BridgeSpec::new(Vector::from_vec(vec![1.0, 0.0]), Vector::from_vec(vec![-0.5, 0.7]), 1.0).unwrap();
        let grid = setup(1.0, 1000);
        let flow = Arc::new(solve_flow(&model, &spec.u, &grid).unwrap());
        let z = lna_trajectory(&model, &spec, &grid, &flow).unwrap();
        assert_eq!(z.last(), &spec.v);
        for i in [0, 250, 500, 900] {
            let expect = linear_bridge_mean(&b, &beta, &sigma, &spec, grid.t(i));
            assert_relative_eq!(z.state(i), &expect, epsilon = 1e-6);
        }
    }

    #[test]
    fn lna_trajectory_without_drift_is_brownian_conditioning() {
        let model = DiffusionModel::new(1, 1, |_, _, out| out[0] = 0.4, |t, _, out| out[(0, 0)] = 1.0 + t);
        let spec = BridgeSpec::scalar(0.0, 1.0, 2.0).unwrap();
        let grid = setup(2.0, 400);
        let flow = Arc::new(solve_flow(&model, &spec.u, &grid).unwrap());
        let z = lna_trajectory(&model, &spec, &grid, &flow).unwrap();
        let p = |t: f64| ((1.0 + t).powi(3) - 1.0) / 3.0;
        let gap = 1.0 - 0.8;
        for i in (0..grid.len()).step_by(37) {
            let t = grid.t(i);
            assert_relative_eq!(z.state(i)[0], 0.4 * t + p(t) / p(2.0) * gap, epsilon = 1e-10);
        }
    }

    #[test]
    fn lna_residual_without_noise_follows_z() {
        let model = ou(1.0, 1e-6);
        let spec = BridgeSpec::scalar(0.5, 1.0, 1.0).unwrap();
        let grid = setup(1.0, 200);
        let flow = Arc::new(solve_flow(&model, &spec.u, &grid).unwrap());
        let z = lna_trajectory(&model, &spec, &grid, &flow).unwrap();
        let dw = WienerIncrements::zeros(&grid, 1);
        let path = lna_residual(&model, &spec, &grid, &z, &dw).unwrap();
        for i in 0..grid.len() {
            assert_relative_eq!(path.state(i)[0], z.state(i)[0], epsilon = 1e-14);
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for name in ProposalKind::NAMES {
            let kind: ProposalKind = name.parse().unwrap();
            assert_eq!(kind.name(), name);
        }
        assert!("bogus".parse::<ProposalKind>().is_err());
        assert_eq!(ProposalKind::Guided(AuxiliaryChoice::Brownian).to_string(), "guided(brownian)");
    }

    #[test]
    fn every_proposal_ends_at_v() {
        let model = sine(0.5);
        let spec = BridgeSpec::scalar(0.1, 0.9, 1.0).unwrap();
        let grid = setup(1.0, 200);
        let mut kinds: Vec<ProposalKind> = ProposalKind::NAMES.iter().map(|n| n.parse().unwrap()).collect();
        kinds.push(ProposalKind::Guided(AuxiliaryChoice::Lna(SigmaTildePolicy::ConstantEnd)));
        kinds.push(ProposalKind::Guided(AuxiliaryChoice::Brownian));
        for kind in kinds {
            let p = Proposal::new(kind.clone(), &model, &spec, &grid).unwrap();
            for k in 0..3 {
                let path = p.simulate_seed(derive_seed(1, k)).unwrap();
                assert_eq!(path.last(), &[0.9], "{kind}");
                assert_eq!(path.state(0), &[0.1]);
                assert!(path.values().iter().all(|x| x.is_finite()));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn endpoint_contract_holds(u in -2.0f64..2.0, v in -2.0f64..2.0, t_end in 0.2f64..3.0, seed in any::<u64>()) {
            let model = ou(1.3, 0.4);
            let spec = BridgeSpec::scalar(u, v, t_end).unwrap();
            let grid = setup(t_end, 150);
            for name in ["delyon-hu-1", "residual", "guided", "adjusted-v2", "lna-residual"] {
                let p = Proposal::new(name.parse().unwrap(), &model, &spec, &grid).unwrap();
                let path = p.simulate_seed(seed).unwrap();
                prop_assert_eq!(path.last(), &[v]);
            }
        }
    }
}
