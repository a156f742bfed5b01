use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crate::auxiliary::{LinearAuxiliary, SigmaTildePolicy};
use crate::error::{Error, Result};
use crate::linalg_ode::{Matrix, Vector};
use crate::proposals::{AuxiliaryChoice, ProposalKind};
use crate::reference::ExampleModel;
use crate::sde::{BridgeSpec, DiffusionModel, TimeGrid};

/// Model under study: a built-in example or a scalar linear SDE
/// `dX = (bX + β) dt + σ dW`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelChoice {
    Example(ExampleModel),
    Linear { b: f64, beta: f64, sigma: f64 },
}

impl ModelChoice {
    pub fn name(&self) -> &'static str {
        match self {
            ModelChoice::Example(m) => m.name(),
            ModelChoice::Linear { b, beta, .. } if *b == 0.0 && *beta == 0.0 => "brownian",
            ModelChoice::Linear { .. } => "linear",
        }
    }

    pub fn model(&self) -> DiffusionModel {
        match *self {
            ModelChoice::Example(m) => m.model(),
            ModelChoice::Linear { b, beta, sigma } => DiffusionModel::linear(
                Matrix::from_element(1, 1, b),
                Vector::from_element(1, beta),
                Matrix::from_element(1, 1, sigma),
            ),
        }
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            ModelChoice::Example(m) => m.sigma(),
            ModelChoice::Linear { sigma, .. } => sigma,
        }
    }

    fn default_spec(&self) -> (f64, f64, f64) {
        match self {
            ModelChoice::Example(m) => {
                let s = m.default_spec();
                (s.u[0], s.v[0], s.t_end)
            }
            ModelChoice::Linear { .. } => (0.0, 1.0, 1.0),
        }
    }
}

/// Which auxiliary process guided proposals use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxKind {
    Simple51,
    Lna,
    Brownian,
    Custom,
}

impl FromStr for AuxKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "simple51" => Ok(AuxKind::Simple51),
            "lna" => Ok(AuxKind::Lna),
            "brownian" => Ok(AuxKind::Brownian),
            "custom" => Ok(AuxKind::Custom),
            other => Err(Error::config(
                "aux",
                format!("unknown auxiliary '{other}', expected simple51, lna, brownian or custom"),
            )),
        }
    }
}

impl fmt::Display for AuxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuxKind::Simple51 => "simple51",
            AuxKind::Lna => "lna",
            AuxKind::Brownian => "brownian",
            AuxKind::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaPolicyKind {
    ConstantEnd,
    Interpolate,
}

impl FromStr for SigmaPolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "constant-end" => Ok(SigmaPolicyKind::ConstantEnd),
            "interpolate" => Ok(SigmaPolicyKind::Interpolate),
            other => Err(Error::config(
                "sigma_policy",
                format!("unknown policy '{other}', expected constant-end or interpolate"),
            )),
        }
    }
}

/// Everything an experiment run needs. Built from a flat `key = value` file
/// (see [`ExperimentConfig::KEYS`]) plus command-line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelChoice,
    pub u: Option<f64>,
    pub v: Option<f64>,
    pub t_end: Option<f64>,
    pub h: f64,
    pub proposals: Vec<String>,
    pub aux: AuxKind,
    /// `(B̃, β̃, σ̃)` for the custom auxiliary.
    pub aux_b: Option<f64>,
    pub aux_beta: Option<f64>,
    pub aux_sigma: Option<f64>,
    pub sigma_policy: SigmaPolicyKind,
    pub t0: Option<f64>,
    pub paths: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub iterations: usize,
    pub thin: usize,
    pub eps: Option<f64>,
    pub oracle_paths: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelChoice::Example(ExampleModel::Ou { alpha: 2.0, sigma: 0.1 }),
            u: None,
            v: None,
            t_end: None,
            h: 1e-3,
            proposals: vec!["guided".into()],
            aux: AuxKind::Simple51,
            aux_b: None,
            aux_beta: None,
            aux_sigma: None,
            sigma_policy: SigmaPolicyKind::ConstantEnd,
            t0: None,
            paths: 5,
            seed: 1,
            out: PathBuf::from("out"),
            threads: None,
            iterations: 1000,
            thin: 10,
            eps: None,
            oracle_paths: 500,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse '{value}'")))
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 25] = [
        "model",
        "alpha",
        "sigma",
        "linear_b",
        "linear_beta",
        "u",
        "v",
        "t_end",
        "h",
        "proposal",
        "aux",
        "aux_b",
        "aux_beta",
        "aux_sigma",
        "sigma_policy",
        "t0",
        "paths",
        "seed",
        "out",
        "threads",
        "iterations",
        "thin",
        "eps",
        "oracle_paths",
        "T",
    ];

    /// Reads a config file: one `key = value` per line, `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config("config", format!("line {}: expected `key = value`", n + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Applies one setting. Model parameters (`alpha`, `sigma`, `linear_*`)
    /// apply to the model selected so far, so `model` should come first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => {
                let sigma = self.model.sigma();
                self.model = match value {
                    "linear" => ModelChoice::Linear { b: -1.0, beta: 0.0, sigma },
                    "brownian" => ModelChoice::Linear { b: 0.0, beta: 0.0, sigma: 1.0 },
                    name => ModelChoice::Example(ExampleModel::by_name(name)?),
                }
            }
            "alpha" => match &mut self.model {
                ModelChoice::Example(ExampleModel::Ou { alpha, .. }) => *alpha = parse_num(key, value)?,
                _ => return Err(Error::config(key, "only the ou model has a rate parameter")),
            },
            "sigma" => {
                let s: f64 = parse_num(key, value)?;
                match &mut self.model {
                    ModelChoice::Example(m) => *m = m.with_sigma(s),
                    ModelChoice::Linear { sigma, .. } => *sigma = s,
                }
            }
            "linear_b" | "linear_beta" => match &mut self.model {
                ModelChoice::Linear { b, beta, .. } => {
                    let x = parse_num(key, value)?;
                    if key == "linear_b" {
                        *b = x
                    } else {
                        *beta = x
                    }
                }
                _ => return Err(Error::config(key, "set model = linear first")),
            },
            "u" => self.u = Some(parse_num(key, value)?),
            "v" => self.v = Some(parse_num(key, value)?),
            "t_end" | "T" => self.t_end = Some(parse_num(key, value)?),
            "h" => self.h = parse_num(key, value)?,
            "proposal" | "proposals" => {
                self.proposals = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "aux" => self.aux = value.parse()?,
            "aux_b" => self.aux_b = Some(parse_num(key, value)?),
            "aux_beta" => self.aux_beta = Some(parse_num(key, value)?),
            "aux_sigma" => self.aux_sigma = Some(parse_num(key, value)?),
            "sigma_policy" => self.sigma_policy = value.parse()?,
            "t0" => self.t0 = Some(parse_num(key, value)?),
            "paths" => self.paths = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "threads" => self.threads = Some(parse_num(key, value)?),
            "iterations" => self.iterations = parse_num(key, value)?,
            "thin" => self.thin = parse_num(key, value)?,
            "eps" => self.eps = Some(parse_num(key, value)?),
            "oracle_paths" => self.oracle_paths = parse_num(key, value)?,
            other => {
                return Err(Error::config(
                    other,
                    format!("unknown key; known keys: {}", Self::KEYS.join(", ")),
                ))
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<BridgeSpec> {
        let (u, v, t) = self.model.default_spec();
        let t_end = self.t_end.unwrap_or(t);
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::config("t_end", format!("horizon must be positive, got {t_end}")));
        }
        BridgeSpec::scalar(self.u.unwrap_or(u), self.v.unwrap_or(v), t_end)
            .map_err(|e| Error::config("u", e.to_string()))
    }

    pub fn grid(&self) -> Result<Arc<TimeGrid>> {
        let spec = self.spec()?;
        TimeGrid::with_step(spec.t_end, self.h)
            .map(Arc::new)
            .map_err(|e| Error::config("h", e.to_string()))
    }

    pub fn model(&self) -> DiffusionModel {
        self.model.model()
    }

    fn policy(&self) -> Result<SigmaTildePolicy> {
        match self.sigma_policy {
            SigmaPolicyKind::ConstantEnd => Ok(SigmaTildePolicy::ConstantEnd),
            SigmaPolicyKind::Interpolate => {
                let t0 = self
                    .t0
                    .ok_or_else(|| Error::config("t0", "sigma policy `interpolate` needs t0"))?;
                Ok(SigmaTildePolicy::Interpolate { t0 })
            }
        }
    }

    pub fn auxiliary(&self) -> Result<AuxiliaryChoice> {
        Ok(match self.aux {
            AuxKind::Simple51 => AuxiliaryChoice::FlowDrift,
            AuxKind::Lna => AuxiliaryChoice::Lna(self.policy()?),
            AuxKind::Brownian => AuxiliaryChoice::Brownian,
            AuxKind::Custom => {
                // a linear model supplies its own coefficients as defaults
                let own = match self.model {
                    ModelChoice::Linear { b, beta, sigma } => [Some(b), Some(beta), Some(sigma)],
                    ModelChoice::Example(_) => [None; 3],
                };
                let get = |set: Option<f64>, fallback: Option<f64>, field: &str| {
                    set.or(fallback)
                        .ok_or_else(|| Error::config(field, "required by aux = custom"))
                };
                AuxiliaryChoice::Custom(LinearAuxiliary::constant(
                    Matrix::from_element(1, 1, get(self.aux_b, own[0], "aux_b")?),
                    Vector::from_element(1, get(self.aux_beta, own[1], "aux_beta")?),
                    Matrix::from_element(1, 1, get(self.aux_sigma, own[2], "aux_sigma")?),
                ))
            }
        })
    }

    /// Proposal kinds in order, with `guided` bound to the configured auxiliary.
    pub fn proposal_kinds(&self) -> Result<Vec<ProposalKind>> {
        self.proposals
            .iter()
            .map(|name| {
                Ok(match name.parse::<ProposalKind>()? {
                    ProposalKind::Guided(_) => ProposalKind::Guided(self.auxiliary()?),
                    other => other,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::config("h", format!("step must be positive, got {}", self.h)));
        }
        if self.paths < 1 {
            return Err(Error::config("paths", "at least one path is required"));
        }
        if self.proposals.is_empty() {
            return Err(Error::config("proposal", "no proposal given"));
        }
        if let ModelChoice::Example(ExampleModel::Ou { alpha, .. }) = self.model {
            if alpha == 0.0 {
                return Err(Error::config("alpha", "rate must be nonzero"));
            }
        }
        if !(self.model.sigma() > 0.0) {
            return Err(Error::config("sigma", "dispersion must be positive"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be at least 1"));
        }
        if self.thin == 0 {
            return Err(Error::config("thin", "must be at least 1"));
        }
        if let Some(eps) = self.eps {
            if !(eps > 0.0) {
                return Err(Error::config("eps", "endpoint tolerance must be positive"));
            }
        }
        let spec = self.spec()?;
        if let Some(t0) = self.t0 {
            if !(t0 > 0.0 && t0 < spec.t_end) {
                return Err(Error::config("t0", format!("must lie in (0, {})", spec.t_end)));
            }
        }
        self.grid()?;
        self.proposal_kinds()?;
        Ok(())
    }
}
