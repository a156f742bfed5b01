//! Ground truth: the built-in example models, the exact Ornstein–Uhlenbeck
//! bridge and its moments, and a brute-force endpoint-rejection sampler.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg_ode::Matrix;
use crate::sde::{derive_seed, euler_bridge, path_rng, BridgeSpec, DiffusionModel, SamplePath, TimeGrid, WienerIncrements};

/// The three scalar models used throughout the experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExampleModel {
    /// `b(x) = −αx`.
    Ou { alpha: f64, sigma: f64 },
    /// `b(x) = −sin(2πx)`.
    Sine { sigma: f64 },
    /// `b(x) = −x/2 − sin(2πx)`.
    OuSine { sigma: f64 },
}

impl ExampleModel {
    pub const NAMES: [&'static str; 3] = ["ou", "sine", "ou-sine"];

    pub fn name(&self) -> &'static str {
        match self {
            ExampleModel::Ou { .. } => "ou",
            ExampleModel::Sine { .. } => "sine",
            ExampleModel::OuSine { .. } => "ou-sine",
        }
    }

    /// Model with its default parameters: `α = 2, σ = 0.1`; `σ = 0.5`;
    /// `σ = 0.15`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "ou" => Ok(ExampleModel::Ou { alpha: 2.0, sigma: 0.1 }),
            "sine" => Ok(ExampleModel::Sine { sigma: 0.5 }),
            "ou-sine" => Ok(ExampleModel::OuSine { sigma: 0.15 }),
            other => Err(Error::config(
                "model",
                format!("unknown model '{other}', expected one of {}", Self::NAMES.join(", ")),
            )),
        }
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            ExampleModel::Ou { sigma, .. } | ExampleModel::Sine { sigma } | ExampleModel::OuSine { sigma } => sigma,
        }
    }

    pub fn with_sigma(self, sigma: f64) -> Self {
        match self {
            ExampleModel::Ou { alpha, .. } => ExampleModel::Ou { alpha, sigma },
            ExampleModel::Sine { .. } => ExampleModel::Sine { sigma },
            ExampleModel::OuSine { .. } => ExampleModel::OuSine { sigma },
        }
    }

    pub fn drift(&self, x: f64) -> f64 {
        match *self {
            ExampleModel::Ou { alpha, .. } => -alpha * x,
            ExampleModel::Sine { .. } => -(2.0 * PI * x).sin(),
            ExampleModel::OuSine { .. } => -0.5 * x - (2.0 * PI * x).sin(),
        }
    }

    pub fn drift_derivative(&self, x: f64) -> f64 {
        match *self {
            ExampleModel::Ou { alpha, .. } => -alpha,
            ExampleModel::Sine { .. } => -2.0 * PI * (2.0 * PI * x).cos(),
            ExampleModel::OuSine { .. } => -0.5 - 2.0 * PI * (2.0 * PI * x).cos(),
        }
    }

    pub fn model(&self) -> DiffusionModel {
        let (m1, m2) = (*self, *self);
        DiffusionModel::scalar(move |_, x| m1.drift(x), move |_, x| m2.drift_derivative(x), self.sigma())
    }

    /// Bridge used in the experiments: `0.1 → 1` over `[0, 3]`; `0 → 1` over
    /// `[0, 2]`; `5 → 2` over `[0, 5]`.
    pub fn default_spec(&self) -> BridgeSpec {
        let (u, v, t) = match self {
            ExampleModel::Ou { .. } => (0.1, 1.0, 3.0),
            ExampleModel::Sine { .. } => (0.0, 1.0, 2.0),
            ExampleModel::OuSine { .. } => (5.0, 2.0, 5.0),
        };
        BridgeSpec::scalar(u, v, t).expect("valid default bridge")
    }
}

impl fmt::Display for ExampleModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExampleModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::by_name(s.trim())
    }
}

fn check_scalar(spec: &BridgeSpec, alpha: f64) -> Result<()> {
    if spec.dim() != 1 {
        return Err(Error::Dimension("the OU bridge is scalar".into()));
    }
    if alpha == 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidArgument("OU rate must be finite and nonzero".into()));
    }
    Ok(())
}

/// Euler path of the exact OU bridge SDE
/// `dX = −αX dt + 2α(e^{ατ}v − X)/(e^{2ατ} − 1) dt + σ dW`, `τ = T − t`.
pub fn ou_bridge_exact(
    alpha: f64,
    sigma: f64,
    spec: &BridgeSpec,
    grid: &Arc<TimeGrid>,
    dw: &WienerIncrements,
) -> Result<SamplePath> {
    check_scalar(spec, alpha)?;
    grid.check_spec(spec)?;
    let v = spec.v[0];
    euler_bridge(
        |_, t, x, out| {
            let tau = spec.t_end - t;
            out[0] = -alpha * x[0] + 2.0 * alpha * ((alpha * tau).exp() * v - x[0]) / (2.0 * alpha * tau).exp_m1();
        },
        |_, _, _, out: &mut Matrix| out[(0, 0)] = sigma,
        spec.u.as_slice(),
        1,
        grid,
        dw,
        spec.v.as_slice(),
    )
}

/// `E[X_t | X_0 = u, X_T = v] = (u sinh(α(T − t)) + v sinh(αt)) / sinh(αT)`.
pub fn ou_bridge_mean(alpha: f64, spec: &BridgeSpec, t: f64) -> f64 {
    let (u, v, big_t) = (spec.u[0], spec.v[0], spec.t_end);
    (u * (alpha * (big_t - t)).sinh() + v * (alpha * t).sinh()) / (alpha * big_t).sinh()
}

/// `Var[X_t | X_0 = u, X_T = v] = σ² sinh(αt) sinh(α(T − t)) / (α sinh(αT))`.
pub fn ou_bridge_variance(alpha: f64, sigma: f64, spec: &BridgeSpec, t: f64) -> f64 {
    let big_t = spec.t_end;
    sigma * sigma * (alpha * t).sinh() * (alpha * (big_t - t)).sinh() / (alpha * (alpha * big_t).sinh())
}

pub fn ou_bridge_second_moment(alpha: f64, sigma: f64, spec: &BridgeSpec, t: f64) -> f64 {
    ou_bridge_variance(alpha, sigma, spec, t) + ou_bridge_mean(alpha, spec, t).powi(2)
}

/// Default endpoint tolerance `max |σ(T, v)| √T / 20`.
pub fn default_epsilon(model: &DiffusionModel, spec: &BridgeSpec) -> f64 {
    model.dispersion(spec.t_end, &spec.v).amax() * spec.t_end.sqrt() / 20.0
}

/// Limits on the rejection sampler's work.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleBudget {
    /// Forward paths simulated before the acceptance rate is checked.
    pub check_after: usize,
    /// Smallest tolerated acceptance rate.
    pub min_rate: f64,
    pub max_attempts: usize,
    /// Paths simulated per parallel batch.
    pub batch: usize,
}

impl Default for OracleBudget {
    fn default() -> Self {
        Self {
            check_after: 200_000,
            min_rate: 1e-4,
            max_attempts: 5_000_000,
            batch: 8192,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleRun {
    pub paths: Vec<SamplePath>,
    /// Forward paths simulated up to and including the last accepted one.
    pub attempts: usize,
    pub eps: f64,
}

impl OracleRun {
    pub fn acceptance_rate(&self) -> f64 {
        self.paths.len() as f64 / self.attempts as f64
    }
}

/// `(t_i, h_i, √h_i)` per interval.
fn step_table(grid: &TimeGrid) -> Vec<(f64, f64, f64)> {
    (0..grid.intervals())
        .map(|i| (grid.t(i), grid.step(i), grid.step(i).sqrt()))
        .collect()
}

/// Forward Euler path with seed `seed`, written into `buf`. Draws and
/// arithmetic match `simulate_model` on `sample_wiener(grid, d', seed)`.
#[allow(clippy::too_many_arguments)]
fn forward_path(
    model: &DiffusionModel,
    x0: &[f64],
    steps: &[(f64, f64, f64)],
    seed: u64,
    buf: &mut [f64],
    b: &mut [f64],
    s: &mut Matrix,
    z: &mut [f64],
) -> bool {
    let d = x0.len();
    let m = z.len();
    let mut rng = path_rng(seed);
    buf[..d].copy_from_slice(x0);
    if d == 1 && m == 1 {
        let mut x = x0[0];
        for (slot, &(t, h, sd)) in buf[1..].iter_mut().zip(steps) {
            let n: f64 = StandardNormal.sample(&mut rng);
            let inc = sd * n;
            model.drift_into(t, std::slice::from_ref(&x), b);
            model.dispersion_into(t, std::slice::from_ref(&x), s);
            x = x + b[0] * h + (0.0 + s[(0, 0)] * inc);
            *slot = x;
        }
        return buf.iter().all(|x| x.is_finite());
    }
    for (i, &(t, h, sd)) in steps.iter().enumerate() {
        for zc in z.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *zc = sd * n;
        }
        let (head, tail) = buf.split_at_mut((i + 1) * d);
        let x = &head[i * d..];
        let next = &mut tail[..d];
        model.drift_into(t, x, b);
        model.dispersion_into(t, x, s);
        for r in 0..d {
            let mut noise = 0.0;
            for c in 0..m {
                noise += s[(r, c)] * z[c];
            }
            next[r] = x[r] + b[r] * h + noise;
        }
    }
    buf.iter().all(|x| x.is_finite())
}

/// Simulates unconditioned paths from `u` with seeds `derive_seed(seed, k)`,
/// `k = 0, 1, …`, and keeps the first `n_accept` whose endpoint lies within
/// `eps` of `v` in the sup norm. The result does not depend on the thread
/// count.
pub fn rejection_oracle(
    model: &DiffusionModel,
    spec: &BridgeSpec,
    grid: &Arc<TimeGrid>,
    eps: f64,
    n_accept: usize,
    seed: u64,
    budget: OracleBudget,
) -> Result<OracleRun> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("endpoint tolerance must be positive, got {eps}")));
    }
    if model.dim() != spec.dim() {
        return Err(Error::Dimension("model vs bridge dimension".into()));
    }
    grid.check_spec(spec)?;
    let d = model.dim();
    let n = grid.len();
    let v = spec.v.as_slice();
    let mut paths = Vec::with_capacity(n_accept);
    let mut attempts = 0usize;
    let mut next_check = budget.check_after;
    let steps = step_table(grid);
    while paths.len() < n_accept {
        if attempts >= budget.max_attempts {
            return Err(Error::LowAcceptance {
                accepted: paths.len(),
                attempts,
                rate: paths.len() as f64 / attempts.max(1) as f64,
                eps,
            });
        }
        let batch = budget.batch.min(budget.max_attempts - attempts);
        let hits: Vec<(u64, Vec<f64>)> = (attempts..attempts + batch)
            .into_par_iter()
            .map_init(
                || (vec![0.0; n * d], vec![0.0; d], Matrix::zeros(d, model.noise_dim()), vec![0.0; model.noise_dim()]),
                |(buf, b, s, z), k| {
                    let finite = forward_path(model, spec.u.as_slice(), &steps, derive_seed(seed, k as u64), buf, b, s, z);
                    let end = &buf[(n - 1) * d..];
                    let hit = finite && end.iter().zip(v).all(|(x, y)| (x - y).abs() <= eps);
                    hit.then(|| (k as u64, buf.clone()))
                },
            )
            .flatten()
            .collect();
        let start = attempts;
        attempts = start + batch;
        for (k, data) in hits {
            paths.push(SamplePath::new(grid.clone(), d, data)?);
            if paths.len() == n_accept {
                attempts = k as usize + 1;
                break;
            }
        }
        if paths.len() < n_accept && attempts >= next_check {
            let rate = paths.len() as f64 / attempts as f64;
            if rate < budget.min_rate {
                return Err(Error::LowAcceptance {
                    accepted: paths.len(),
                    attempts,
                    rate,
                    eps,
                });
            }
            next_check = usize::MAX;
        }
    }
    Ok(OracleRun { paths, attempts, eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auxiliary::LinearAuxiliary;
    use crate::proposals::{delyon_hu, guided, DelyonHuLambda, GuidedSetup};
    use crate::sde::{sample_wiener, simulate_model};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn m1(x: f64) -> Matrix {
        Matrix::from_element(1, 1, x)
    }

    /// Conditional mean and variance from the joint Gaussian law of
    /// `(X_t, X_T)` for OU started at `u`.
    fn conditioned(alpha: f64, sigma: f64, spec: &BridgeSpec, t: f64) -> (f64, f64) {
        let (u, v, big_t) = (spec.u[0], spec.v[0], spec.t_end);
        let c = sigma * sigma / (2.0 * alpha);
        let var_t = c * (1.0 - (-2.0 * alpha * t).exp());
        let var_end = c * (1.0 - (-2.0 * alpha * big_t).exp());
        let cov = c * ((-alpha * (big_t - t)).exp() - (-alpha * (big_t + t)).exp());
        let mean = u * (-alpha * t).exp() + cov / var_end * (v - u * (-alpha * big_t).exp());
        (mean, var_t - cov * cov / var_end)
    }

    #[test]
    fn example_models() {
        let ou = ExampleModel::by_name("ou").unwrap();
        assert_eq!(ou, ExampleModel::Ou { alpha: 2.0, sigma: 0.1 });
        assert_eq!(ou.drift(0.5), -1.0);
        assert_eq!(ExampleModel::Sine { sigma: 1.0 }.drift(0.25), -1.0);
        assert_relative_eq!(ExampleModel::OuSine { sigma: 1.0 }.drift(0.25), -1.125, max_relative = 1e-15);
        assert!("nope".parse::<ExampleModel>().is_err());
        for name in ExampleModel::NAMES {
            let m: ExampleModel = name.parse().unwrap();
            assert_eq!(m.to_string(), name);
            let model = m.model();
            for x in [-0.3, 0.0, 0.7, 1.9] {
                let h = 1e-6;
                let fd = (m.drift(x + h) - m.drift(x - h)) / (2.0 * h);
                assert_relative_eq!(m.drift_derivative(x), fd, epsilon = 1e-6);
                assert_eq!(model.drift(0.0, &crate::linalg_ode::Vector::from_element(1, x))[0], m.drift(x));
            }
        }
        assert_eq!(ExampleModel::by_name("ou-sine").unwrap().default_spec().u[0], 5.0);
    }

    #[test]
    fn bridge_mean_examples() {
        let spec = BridgeSpec::scalar(0.1, 1.0, 3.0).unwrap();
        assert_relative_eq!(ou_bridge_mean(2.0, &spec, 0.0), 0.1, max_relative = 1e-15);
        assert_relative_eq!(ou_bridge_mean(2.0, &spec, 3.0), 1.0, max_relative = 1e-15);
        let mid = ou_bridge_mean(2.0, &spec, 1.5);
        assert_relative_eq!(mid, 1.1 * 3f64.sinh() / 6f64.sinh(), max_relative = 1e-14);
        assert!((mid - 0.054630).abs() < 1e-6);
        let same = BridgeSpec::scalar(0.7, 0.7, 2.0).unwrap();
        assert_relative_eq!(ou_bridge_mean(1.3, &same, 1.0), 0.7 / 1.3f64.cosh(), max_relative = 1e-14);
    }

    proptest! {
        #[test]
        fn bridge_moments_match_gaussian_conditioning(
            alpha in 0.1f64..3.0, sigma in 0.05f64..2.0, u in -2.0f64..2.0, v in -2.0f64..2.0,
            big_t in 0.5f64..4.0, frac in 0.01f64..0.99,
        ) {
            let spec = BridgeSpec::scalar(u, v, big_t).unwrap();
            let t = frac * big_t;
            let (mean, var) = conditioned(alpha, sigma, &spec, t);
            prop_assert!((ou_bridge_mean(alpha, &spec, t) - mean).abs() < 1e-10 * (1.0 + mean.abs()));
            prop_assert!((ou_bridge_variance(alpha, sigma, &spec, t) - var).abs() < 1e-9 * var.max(1e-12));
        }
    }

    #[test]
    fn exact_bridge_without_noise() {
        let spec = BridgeSpec::scalar(0.1, 1.0, 3.0).unwrap();
        let grid = Arc::new(TimeGrid::with_step(3.0, 1e-4).unwrap());
        let dw = WienerIncrements::zeros(&grid, 1);
        let path = ou_bridge_exact(2.0, 0.1, &spec, &grid, &dw).unwrap();
        assert_eq!(path.last(), &[1.0]);
        for i in (0..grid.len() - 1).step_by(1234) {
            assert_relative_eq!(path.state(i)[0], ou_bridge_mean(2.0, &spec, grid.t(i)), epsilon = 1e-3);
        }
        assert!(ou_bridge_exact(0.0, 0.1, &spec, &grid, &dw).is_err());
    }

    #[test]
    fn exact_bridge_equals_matching_guided_proposal() {
        let spec = BridgeSpec::scalar(0.1, 1.0, 3.0).unwrap();
        let grid = Arc::new(TimeGrid::with_step(3.0, 1e-3).unwrap());
        let model = ExampleModel::Ou { alpha: 2.0, sigma: 0.1 }.model();
        let aux = LinearAuxiliary::constant(m1(-2.0), crate::linalg_ode::Vector::zeros(1), m1(0.1));
        let setup = GuidedSetup::new(aux, &grid, &spec).unwrap();
        for seed in 0..5 {
            let dw = sample_wiener(&grid, 1, seed);
            let a = ou_bridge_exact(2.0, 0.1, &spec, &grid, &dw).unwrap();
            let b = guided(&model, &spec, &grid, &setup.table, &dw).unwrap();
            assert!(a.sup_distance(&b) <= 1e-9, "{}", a.sup_distance(&b));
        }
    }

    #[test]
    fn exact_bridge_midpoint_mean() {
        let spec = BridgeSpec::scalar(0.1, 1.0, 3.0).unwrap();
        let grid = Arc::new(TimeGrid::with_step(3.0, 1e-3).unwrap());
        let mid = grid.nearest(1.5);
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|k| ou_bridge_exact(2.0, 0.1, &spec, &grid, &sample_wiener(&grid, 1, derive_seed(21, k))).unwrap().state(mid)[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        assert!((mean - ou_bridge_mean(2.0, &spec, 1.5)).abs() < 3.0 * se, "{mean} ± {se}");
        assert_relative_eq!(sd * sd, ou_bridge_variance(2.0, 0.1, &spec, 1.5), max_relative = 0.05);
    }

    #[test]
    fn forward_path_matches_simulate_model() {
        let model = ExampleModel::OuSine { sigma: 0.15 }.model();
        let grid = TimeGrid::uniform(5.0, 500).unwrap();
        let seed = derive_seed(3, 17);
        let mut buf = vec![0.0; grid.len()];
        forward_path(&model, &[5.0], &step_table(&grid), seed, &mut buf, &mut [0.0], &mut m1(0.0), &mut [0.0]);
        let reference = simulate_model(&model, &[5.0], &Arc::new(grid.clone()), &sample_wiener(&grid, 1, seed)).unwrap();
        assert_eq!(&buf[..], reference.values());
    }

    #[test]
    fn infinite_tolerance_accepts_everything() {
        let model = DiffusionModel::brownian(m1(1.0));
        let spec = BridgeSpec::scalar(0.0, 0.0, 1.0).unwrap();
        let grid = Arc::new(TimeGrid::uniform(1.0, 20).unwrap());
        let run = rejection_oracle(&model, &spec, &grid, f64::INFINITY, 50, 1, OracleBudget::default()).unwrap();
        assert_eq!(run.paths.len(), 50);
        assert_eq!(run.attempts, 50);
        for (k, p) in run.paths.iter().enumerate() {
            let expect = simulate_model(&model, &[0.0], &grid, &sample_wiener(&grid, 1, derive_seed(1, k as u64))).unwrap();
            assert_eq!(p, &expect);
        }
    }

    #[test]
    fn brownian_oracle_midpoint() {
        let model = DiffusionModel::brownian(m1(1.0));
        let spec = BridgeSpec::scalar(0.0, 1.0, 1.0).unwrap();
        let grid = Arc::new(TimeGrid::uniform(1.0, 50).unwrap());
        let budget = OracleBudget { batch: 1000, ..OracleBudget::default() };
        let run = rejection_oracle(&model, &spec, &grid, 0.02, 2000, 8, budget).unwrap();
        assert!(run.paths.iter().all(|p| (p.last()[0] - 1.0).abs() <= 0.02));
        let xs: Vec<f64> = run.paths.iter().map(|p| p.state(25)[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        // bridge variance 1/4 at the midpoint
        let se = (0.25f64 / xs.len() as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "{mean}");
        let rate = run.acceptance_rate();
        assert!(rate > 0.0 && rate < 1.0);

        let again = rejection_oracle(&model, &spec, &grid, 0.02, 2000, 8, OracleBudget { batch: 333, ..budget }).unwrap();
        assert_eq!(again.attempts, run.attempts);
        assert_eq!(again.paths, run.paths);
    }

    #[test]
    fn oracle_reports_low_acceptance() {
        let model = DiffusionModel::brownian(m1(0.1));
        let spec = BridgeSpec::scalar(0.0, 5.0, 1.0).unwrap();
        let grid = Arc::new(TimeGrid::uniform(1.0, 10).unwrap());
        let budget = OracleBudget { check_after: 1000, min_rate: 0.01, max_attempts: 10_000, batch: 500 };
        let err = rejection_oracle(&model, &spec, &grid, 0.01, 10, 0, budget).unwrap_err();
        assert!(matches!(err, Error::LowAcceptance { accepted: 0, .. }));
        assert!(err.to_string().contains("larger endpoint tolerance"));
        assert!(rejection_oracle(&model, &spec, &grid, 0.0, 10, 0, budget).is_err());
    }

    #[test]
    fn delyon_hu_is_the_brownian_bridge_oracle() {
        // zero drift: λ = 0 is exact, so it must agree with rejection in mean
        let model = DiffusionModel::brownian(m1(1.0));
        let spec = BridgeSpec::scalar(0.0, 1.0, 1.0).unwrap();
        let grid = Arc::new(TimeGrid::uniform(1.0, 50).unwrap());
        let n = 4000;
        let mean = (0..n)
            .map(|k| delyon_hu(DelyonHuLambda::Zero, &model, &spec, &grid, &sample_wiener(&grid, 1, k)).unwrap().state(25)[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
    }
}
