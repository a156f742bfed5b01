use crate::error::{Error, Result};

use super::Vector;

/// States of a deterministic ODE tabulated on a grid, together with the
/// vector field evaluated at each node (used for cubic Hermite
/// interpolation between nodes).
#[derive(Debug, Clone)]
pub struct OdeTrajectory {
    grid: Vec<f64>,
    states: Vec<Vector>,
    rates: Vec<Vector>,
}

impl OdeTrajectory {
    pub fn new(grid: Vec<f64>, states: Vec<Vector>, rates: Vec<Vector>) -> Result<Self> {
        if grid.len() != states.len() || grid.len() != rates.len() || grid.is_empty() {
            return Err(Error::Dimension(format!(
                "trajectory with {} nodes, {} states, {} rates",
                grid.len(),
                states.len(),
                rates.len()
            )));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(
                "trajectory grid must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            grid,
            states,
            rates,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn states(&self) -> &[Vector] {
        &self.states
    }

    pub fn rates(&self) -> &[Vector] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn state(&self, i: usize) -> &Vector {
        &self.states[i]
    }

    pub fn last(&self) -> &Vector {
        self.states.last().expect("non-empty trajectory")
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// Cubic Hermite interpolation; clamps to the end states outside the grid.
    pub fn interpolate(&self, t: f64) -> Vector {
        let n = self.grid.len();
        if n == 1 || t <= self.grid[0] {
            return self.states[0].clone();
        }
        if t >= self.grid[n - 1] {
            return self.states[n - 1].clone();
        }
        let i = match self.grid.binary_search_by(|g| g.total_cmp(&t)) {
            Ok(i) => return self.states[i].clone(),
            Err(i) => i - 1,
        };
        let (t0, t1) = (self.grid[i], self.grid[i + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        &self.states[i] * h00
            + &self.rates[i] * (h10 * h)
            + &self.states[i + 1] * h01
            + &self.rates[i + 1] * (h11 * h)
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty ODE grid".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(
            "ODE grid must be strictly increasing".into(),
        ));
    }
    Ok(())
}

fn rk4_step<F>(f: &mut F, t: f64, y: &Vector, k1: &Vector, h: f64) -> Vector
where
    F: FnMut(f64, &Vector) -> Vector,
{
    let half = 0.5 * h;
    let k2 = f(t + half, &(y + k1 * half));
    let k3 = f(t + half, &(y + &k2 * half));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Classical fourth-order Runge–Kutta, node to node over `grid`.
pub fn rk4_solve<F>(mut f: F, y0: &Vector, grid: &[f64]) -> Result<OdeTrajectory>
where
    F: FnMut(f64, &Vector) -> Vector,
{
    check_grid(grid)?;
    let n = grid.len();
    let mut states = Vec::with_capacity(n);
    let mut rates = Vec::with_capacity(n);
    let mut y = y0.clone();
    if y.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { node: 0 });
    }
    let mut k1 = f(grid[0], &y);
    for i in 0..n - 1 {
        let next = rk4_step(&mut f, grid[i], &y, &k1, grid[i + 1] - grid[i]);
        states.push(std::mem::replace(&mut y, next));
        rates.push(k1);
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { node: i + 1 });
        }
        k1 = f(grid[i + 1], &y);
    }
    states.push(y);
    rates.push(k1);
    OdeTrajectory::new(grid.to_vec(), states, rates)
}

/// Integrates from the terminal value at the last grid node back to the first
/// node with classical Runge–Kutta (order 4). The trajectory is stored in
/// forward grid order.
pub fn rk_backward<F>(mut f: F, y_end: &Vector, grid: &[f64]) -> Result<OdeTrajectory>
where
    F: FnMut(f64, &Vector) -> Vector,
{
    check_grid(grid)?;
    let n = grid.len();
    let mut states = vec![Vector::zeros(0); n];
    let mut rates = vec![Vector::zeros(0); n];
    let mut y = y_end.clone();
    if y.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { node: n - 1 });
    }
    let mut k1 = f(grid[n - 1], &y);
    for i in (1..n).rev() {
        let next = rk4_step(&mut f, grid[i], &y, &k1, grid[i - 1] - grid[i]);
        states[i] = std::mem::replace(&mut y, next);
        rates[i] = k1;
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { node: i - 1 });
        }
        k1 = f(grid[i - 1], &y);
    }
    states[0] = y;
    rates[0] = k1;
    OdeTrajectory::new(grid.to_vec(), states, rates)
}
