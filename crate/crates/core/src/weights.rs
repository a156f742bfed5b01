//! Log-likelihood ratios of proposals against the true bridge, and the
//! importance-sampling and Metropolis–Hastings utilities built on them.
//!
//! Every weight omits the unknown factor `−log p(0, u; T, v)`; the omission is
//! recorded in [`OmittedConstant`] so that only comparable weights are mixed.

use crate::auxiliary::{BackwardTable, LinearAuxiliary};
use crate::error::{Error, Result};
use crate::linalg_ode::{gaussian_log_density, Cholesky, Matrix, OdeTrajectory, Vector};
use crate::proposals::{DelyonHuLambda, GuidedSetup, Prepared, Proposal};
use crate::sde::{linear_drift, BridgeSpec, DiffusionModel, SamplePath, TimeGrid};

/// Marks the excluded `−log p(0, u; T, v)` by its bridge.
#[derive(Debug, Clone, PartialEq)]
pub struct OmittedConstant {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub t_end: f64,
}

impl OmittedConstant {
    pub fn of(spec: &BridgeSpec) -> Self {
        Self {
            u: spec.u.as_slice().to_vec(),
            v: spec.v.as_slice().to_vec(),
            t_end: spec.t_end,
        }
    }
}

/// A natural-log weight and its components. `total` is their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LogWeight {
    pub total: f64,
    pub log_psi1: Option<f64>,
    pub log_psi2: Option<f64>,
    pub log_const: Option<f64>,
    pub g_integral: Option<f64>,
    /// Sign of the weight; only the literal reading of the residual weight
    /// can make it negative.
    pub sign: f64,
    pub omitted: OmittedConstant,
}

impl LogWeight {
    fn from_parts(
        spec: &BridgeSpec,
        log_psi1: Option<f64>,
        log_psi2: Option<f64>,
        log_const: Option<f64>,
        g_integral: Option<f64>,
    ) -> Result<Self> {
        let total = [log_psi1, log_psi2, log_const, g_integral]
            .iter()
            .flatten()
            .sum::<f64>();
        if !total.is_finite() {
            return Err(Error::InvalidArgument(format!("log-weight is not finite ({total})")));
        }
        Ok(Self {
            total,
            log_psi1,
            log_psi2,
            log_const,
            g_integral,
            sign: 1.0,
            omitted: OmittedConstant::of(spec),
        })
    }
}

#[derive(Debug, Clone)]
pub struct WeightedSample {
    pub path: SamplePath,
    pub log_weight: LogWeight,
}

/// How the bracketed sum in the residual likelihood ratio enters the weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Psi1Reading {
    /// The sum is the logarithm of the factor (Girsanov form).
    LogDensity,
    /// The sum is used as the factor itself; the weight can become negative.
    Literal,
}

/// The three sums making up `log Ψ₁`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psi1Terms {
    /// `Σ bᵀa⁻¹ ΔX`, left point.
    pub ito: f64,
    /// `−½ Σ bᵀa⁻¹b h`.
    pub quadratic: f64,
    /// `−½ Σ κ(t_{i+1}, X_{i+1})ᵀ (a⁻¹_{i+1} − a⁻¹_i)(v − X_{i+1})`.
    pub diamond: f64,
}

impl Psi1Terms {
    pub fn total(&self) -> f64 {
        self.ito + self.quadratic + self.diamond
    }
}

fn check_path(path: &SamplePath, model: &DiffusionModel, spec: &BridgeSpec) -> Result<()> {
    if path.dim() != model.dim() || spec.dim() != model.dim() {
        return Err(Error::Dimension("path, model and bridge dimensions differ".into()));
    }
    path.grid().check_spec(spec)
}

/// `a(t, x)⁻¹` along a path, refactorised only when `σ(t, x)` changes.
struct InverseDiffusion {
    sigma: Matrix,
    scratch: Matrix,
    a_inv: Matrix,
    filled: bool,
}

impl InverseDiffusion {
    fn new(model: &DiffusionModel) -> Self {
        let (d, m) = (model.dim(), model.noise_dim());
        Self {
            sigma: Matrix::zeros(d, m),
            scratch: Matrix::zeros(d, m),
            a_inv: Matrix::zeros(d, d),
            filled: false,
        }
    }

    /// Moves to `(t, x)`; returns the previous inverse if it changed.
    fn update(&mut self, model: &DiffusionModel, t: f64, x: &[f64], node: usize) -> Result<Option<Matrix>> {
        model.dispersion_into(t, x, &mut self.scratch);
        if self.filled && self.scratch == self.sigma {
            return Ok(None);
        }
        std::mem::swap(&mut self.sigma, &mut self.scratch);
        let a = &self.sigma * self.sigma.transpose();
        let inv = Cholesky::new(&a).map_err(|_| Error::SingularDiffusion { node })?.inverse();
        self.filled = true;
        Ok(Some(std::mem::replace(&mut self.a_inv, inv)))
    }
}

/// `xᵀ M y`.
#[inline]
fn bilinear(m: &Matrix, x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (r, xr) in x.iter().enumerate() {
        let mut row = 0.0;
        for (c, yc) in y.iter().enumerate() {
            row += m[(r, c)] * yc;
        }
        acc += xr * row;
    }
    acc
}

pub fn psi1_terms(path: &SamplePath, model: &DiffusionModel, spec: &BridgeSpec) -> Result<Psi1Terms> {
    check_path(path, model, spec)?;
    let grid = path.grid();
    let n = grid.len();
    let d = path.dim();
    let mut terms = Psi1Terms {
        ito: 0.0,
        quadratic: 0.0,
        diamond: 0.0,
    };
    let mut inv = InverseDiffusion::new(model);
    inv.update(model, grid.t(0), path.state(0), 0)?;
    let mut b = vec![0.0; d];
    let mut dx = vec![0.0; d];
    let mut gap = vec![0.0; d];
    for i in 0..n - 1 {
        let (t, h) = (grid.t(i), grid.step(i));
        let (x, next) = (path.state(i), path.state(i + 1));
        model.drift_into(t, x, &mut b);
        for k in 0..d {
            dx[k] = next[k] - x[k];
        }
        terms.ito += bilinear(&inv.a_inv, &b, &dx);
        terms.quadratic -= 0.5 * bilinear(&inv.a_inv, &b, &b) * h;
        if i + 1 < n - 1 {
            let t_next = grid.t(i + 1);
            if let Some(prev) = inv.update(model, t_next, next, i + 1)? {
                for k in 0..d {
                    gap[k] = spec.v[k] - next[k];
                }
                let change = &inv.a_inv - prev;
                terms.diamond -= 0.5 * bilinear(&change, &gap, &gap) / (spec.t_end - t_next);
            }
        }
    }
    Ok(terms)
}

/// `log Ψ₁` of the residual likelihood ratio, integrated up to `T`.
pub fn log_psi1(path: &SamplePath, model: &DiffusionModel, spec: &BridgeSpec) -> Result<f64> {
    Ok(psi1_terms(path, model, spec)?.total())
}

/// Log Radon–Nikodym derivative of the drift-free pulled process
/// (`dX = κ dt + σ dW`) with respect to the same process with the extra drift
/// `f_i` on `[t_i, t_{i+1})`:
/// `½ Σ fᵀa⁻¹f h − Σ fᵀa⁻¹ ΔX + Σ fᵀa⁻¹κ h`, left point. `offset` writes
/// `f_i` given `(i, t_i, X_i)`.
pub fn log_girsanov_offset<F>(
    path: &SamplePath,
    model: &DiffusionModel,
    spec: &BridgeSpec,
    mut offset: F,
) -> Result<f64>
where
    F: FnMut(usize, f64, &[f64], &mut [f64]),
{
    check_path(path, model, spec)?;
    let grid = path.grid();
    let d = path.dim();
    let mut inv = InverseDiffusion::new(model);
    let mut f = vec![0.0; d];
    let mut rest = vec![0.0; d];
    let mut acc = 0.0;
    for i in 0..grid.len() - 1 {
        let (t, h) = (grid.t(i), grid.step(i));
        let (x, next) = (path.state(i), path.state(i + 1));
        inv.update(model, t, x, i)?;
        offset(i, t, x, &mut f);
        let tau = spec.t_end - t;
        for k in 0..d {
            rest[k] = 0.5 * f[k] * h - (next[k] - x[k]) + (spec.v[k] - x[k]) / tau * h;
        }
        acc += bilinear(&inv.a_inv, &f, &rest);
    }
    Ok(acc)
}

/// `f(t_i) = b(t_i, x(t_i)) − (x(T) − x(t_i))/(T − t_i)` for `i < N`.
pub fn psi2_offsets(model: &DiffusionModel, spec: &BridgeSpec, flow: &OdeTrajectory) -> Vec<Vector> {
    let x_end = flow.last();
    (0..flow.len() - 1)
        .map(|i| {
            let t = flow.grid()[i];
            let x = flow.state(i);
            model.drift(t, x) - (x_end - x) / (spec.t_end - t)
        })
        .collect()
}

/// `log Ψ₂` with the offsets evaluated along the flow `x(t)`.
pub fn log_psi2(
    path: &SamplePath,
    model: &DiffusionModel,
    spec: &BridgeSpec,
    flow: &OdeTrajectory,
) -> Result<f64> {
    if flow.grid() != path.grid().nodes() {
        return Err(Error::InvalidArgument("flow is not tabulated on the path grid".into()));
    }
    let f = psi2_offsets(model, spec, flow);
    log_girsanov_offset(path, model, spec, |i, _, _, out| out.copy_from_slice(f[i].as_slice()))
}

/// `log φ(v; u, a(0, u) T) + ½ log(|a(0, u)| / |a(T, v)|)`.
pub fn log_const_residual(model: &DiffusionModel, spec: &BridgeSpec) -> Result<f64> {
    spec.check_model(model)?;
    let a0 = model.diffusion(0.0, &spec.u);
    let a_end = model.diffusion(spec.t_end, &spec.v);
    let c0 = Cholesky::new(&a0).map_err(|_| Error::SingularDiffusion { node: 0 })?;
    let c_end = Cholesky::new(&a_end).map_err(|_| Error::Singular)?;
    let density = gaussian_log_density(&spec.v, &spec.u, &(&a0 * spec.t_end))?;
    Ok(density + 0.5 * (c0.log_det() - c_end.log_det()))
}

/// `G(t_i, x) = (b − b̃)ᵀ r̃ − ½ tr[(a − ã)(H̃ − r̃ r̃ᵀ)]` at node `i < N`.
pub fn g_functional(
    i: usize,
    x: &Vector,
    model: &DiffusionModel,
    aux: &LinearAuxiliary,
    table: &BackwardTable,
) -> Result<f64> {
    let h_tilde = table.h_tilde(i)?;
    let t = table.grid().t(i);
    let r = table.rtilde(i, x)?;
    let mut b_tilde = Vector::zeros(x.len());
    linear_drift(&aux.b_tilde.eval(t), &aux.beta_tilde.eval(t), x.as_slice(), b_tilde.as_mut_slice());
    let drift_gap = model.drift(t, x) - b_tilde;
    let diffusion_gap = model.diffusion(t, x) - aux.a_tilde(t);
    let mut g = drift_gap.dot(&r);
    if diffusion_gap.iter().any(|e| *e != 0.0) {
        let inner: Matrix = h_tilde - &r * r.transpose();
        g -= 0.5 * (diffusion_gap * inner).trace();
    }
    Ok(g)
}

/// `log p̃(0, u; T, v) + Σ G(t_i, X_i) h_i`.
pub fn log_weight_guided(
    path: &SamplePath,
    model: &DiffusionModel,
    setup: &GuidedSetup,
    spec: &BridgeSpec,
    grid: &TimeGrid,
) -> Result<LogWeight> {
    check_path(path, model, spec)?;
    if path.grid().nodes() != grid.nodes() || setup.table.grid().nodes() != grid.nodes() {
        return Err(Error::InvalidArgument(
            "path, table and grid must share the same nodes".into(),
        ));
    }
    let d = spec.dim();
    let (mut b, mut b_tilde, mut r) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut sigma = Matrix::zeros(d, model.noise_dim());
    let mut integral = 0.0;
    for i in 0..grid.len() - 1 {
        let t = grid.t(i);
        let x = path.state(i);
        let nodes = &setup.nodes;
        model.drift_into(t, x, &mut b);
        linear_drift(&nodes.drift_matrix[i], &nodes.drift_offset[i], x, &mut b_tilde);
        setup.table.rtilde_into(i, x, &mut r)?;
        let mut g = 0.0;
        for k in 0..d {
            g += (b[k] - b_tilde[k]) * r[k];
        }
        model.dispersion_into(t, x, &mut sigma);
        let a = &sigma * sigma.transpose();
        let a_tilde = &nodes.diffusion[i];
        if a != *a_tilde {
            let h_tilde = setup.table.h_tilde(i)?;
            let mut trace = 0.0;
            for p in 0..d {
                for q in 0..d {
                    trace += (a[(p, q)] - a_tilde[(p, q)]) * (h_tilde[(q, p)] - r[q] * r[p]);
                }
            }
            g -= 0.5 * trace;
        }
        integral += g * grid.step(i);
    }
    LogWeight::from_parts(spec, None, None, Some(setup.log_ptilde), Some(integral))
}

fn with_psi1(
    path: &SamplePath,
    model: &DiffusionModel,
    spec: &BridgeSpec,
    log_psi2: Option<f64>,
    reading: Psi1Reading,
) -> Result<LogWeight> {
    let psi1 = log_psi1(path, model, spec)?;
    let log_const = log_const_residual(model, spec)?;
    match reading {
        Psi1Reading::LogDensity => LogWeight::from_parts(spec, Some(psi1), log_psi2, Some(log_const), None),
        Psi1Reading::Literal => {
            let mut w = LogWeight::from_parts(spec, Some(psi1.abs().ln()), log_psi2, Some(log_const), None)?;
            w.sign = if psi1 < 0.0 { -1.0 } else { 1.0 };
            Ok(w)
        }
    }
}

/// Residual-proposal weight: `log_const + log Ψ₁ + log Ψ₂`.
pub fn log_weight_residual(
    path: &SamplePath,
    model: &DiffusionModel,
    spec: &BridgeSpec,
    flow: &OdeTrajectory,
) -> Result<LogWeight> {
    log_weight_residual_with(path, model, spec, flow, Psi1Reading::LogDensity)
}

pub fn log_weight_residual_with(
    path: &SamplePath,
    model: &DiffusionModel,
    spec: &BridgeSpec,
    flow: &OdeTrajectory,
    reading: Psi1Reading,
) -> Result<LogWeight> {
    let psi2 = log_psi2(path, model, spec, flow)?;
    with_psi1(path, model, spec, Some(psi2), reading)
}

/// Weight of `path` under the proposal that produced it.
pub fn log_weight(proposal: &Proposal, path: &SamplePath) -> Result<LogWeight> {
    log_weight_with(proposal, path, Psi1Reading::LogDensity)
}

pub fn log_weight_with(proposal: &Proposal, path: &SamplePath, reading: Psi1Reading) -> Result<LogWeight> {
    let (model, spec, grid) = (proposal.model(), proposal.spec(), proposal.grid());
    match proposal.prepared() {
        Prepared::DelyonHu(DelyonHuLambda::Zero) => with_psi1(path, model, spec, None, reading),
        Prepared::DelyonHu(DelyonHuLambda::One) => {
            let offset = log_girsanov_offset(path, model, spec, |_, t, x, out| model.drift_into(t, x, out))?;
            with_psi1(path, model, spec, Some(offset), reading)
        }
        Prepared::Residual(flow) => log_weight_residual_with(path, model, spec, flow, reading),
        Prepared::LnaResidual(z) => {
            // the proposal drifts along the secants of z plus (z − X)/(T − t)
            let offset = log_girsanov_offset(path, model, spec, |i, t, _, out| {
                let (rate, zi) = (&z.rates()[i], z.state(i));
                for k in 0..out.len() {
                    out[k] = rate[k] - (spec.v[k] - zi[k]) / (spec.t_end - t);
                }
            })?;
            with_psi1(path, model, spec, Some(offset), reading)
        }
        Prepared::Guided(setup) | Prepared::Adjusted { guided: setup, .. } => {
            log_weight_guided(path, model, setup, spec, grid)
        }
    }
}

/// Effective sample size `(Σw)² / Σw²` of exponentiated log-weights.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    if log_weights.is_empty() {
        return Err(Error::InvalidArgument("ESS of an empty weight set".into()));
    }
    if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::InvalidArgument("log-weights must be finite or −∞".into()));
    }
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument("all weights are zero".into()));
    }
    let (s1, s2) = log_weights.iter().fold((0.0, 0.0), |(s1, s2), w| {
        let e = (w - max).exp();
        (s1 + e, s2 + e * e)
    });
    Ok(s1 * s1 / s2)
}

/// `candidate.total − current.total` for an independence sampler.
pub fn mh_log_ratio(current: &WeightedSample, candidate: &WeightedSample) -> Result<f64> {
    if current.log_weight.omitted != candidate.log_weight.omitted {
        return Err(Error::ConstantMismatch);
    }
    Ok(candidate.log_weight.total - current.log_weight.total)
}

/// Accepts when `log u < log_ratio`; a non-negative ratio always accepts.
pub fn mh_accept(log_ratio: f64, uniform: f64) -> bool {
    log_ratio >= 0.0 || uniform.ln() < log_ratio
}

/// Self-normalised importance-sampling estimate with its delta-method
/// standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub ess: f64,
}

/// Estimates `E[h]` from `values[i] = h(X_i)` and signed log-weights.
pub fn self_normalized_signed(values: &[f64], log_abs: &[f64], signs: &[f64]) -> Result<IsEstimate> {
    if values.is_empty() || values.len() != log_abs.len() || values.len() != signs.len() {
        return Err(Error::InvalidArgument(
            "values and weights must be non-empty and of equal length".into(),
        ));
    }
    let max = log_abs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::InvalidArgument("weights are not finite".into()));
    }
    let w: Vec<f64> = log_abs
        .iter()
        .zip(signs)
        .map(|(l, s)| s * (l - max).exp())
        .collect();
    let total: f64 = w.iter().sum();
    if total == 0.0 {
        return Err(Error::InvalidArgument("weights sum to zero".into()));
    }
    let mean = w.iter().zip(values).map(|(w, h)| w * h).sum::<f64>() / total;
    let var = w
        .iter()
        .zip(values)
        .map(|(w, h)| (w * (h - mean)).powi(2))
        .sum::<f64>()
        / (total * total);
    Ok(IsEstimate {
        mean,
        std_error: var.sqrt(),
        ess: ess(log_abs)?,
    })
}

pub fn self_normalized(values: &[f64], log_weights: &[f64]) -> Result<IsEstimate> {
    self_normalized_signed(values, log_weights, &vec![1.0; log_weights.len()])
}

/// [`self_normalized_signed`] over full weights.
pub fn is_estimate(values: &[f64], weights: &[LogWeight]) -> Result<IsEstimate> {
    let log_abs: Vec<f64> = weights.iter().map(|w| w.total).collect();
    let signs: Vec<f64> = weights.iter().map(|w| w.sign).collect();
    self_normalized_signed(values, &log_abs, &signs)
}
