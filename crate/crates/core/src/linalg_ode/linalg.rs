use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Matrix,
}

impl Cholesky {
    /// Factors a symmetric positive definite matrix. Only the lower triangle
    /// of `a` is read.
    pub fn new(a: &Matrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!(
                "cholesky of a {}x{} matrix",
                n,
                a.ncols()
            )));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotSpd {
                    pivot: j,
                    value: diag,
                });
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `A y = rhs` by forward then backward substitution.
    pub fn solve(&self, rhs: &Vector) -> Vector {
        let mut y = rhs.clone();
        self.solve_in_place(y.as_mut_slice());
        y
    }

    pub fn solve_in_place(&self, y: &mut [f64]) {
        let l = &self.lower;
        let n = l.nrows();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::identity(n, n);
        for mut col in inv.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        // exact symmetry for downstream trace/quadratic forms
        for i in 0..n {
            for j in 0..i {
                let s = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = s;
                inv[(j, i)] = s;
            }
        }
        inv
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Solves `A y = rhs` for symmetric positive definite `A`.
pub fn cholesky_solve(a: &Matrix, rhs: &Vector) -> Result<Vector> {
    if rhs.len() != a.nrows() {
        return Err(Error::Dimension(format!(
            "rhs of length {} for a {}x{} system",
            rhs.len(),
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(Cholesky::new(a)?.solve(rhs))
}

/// General square solve through partial-pivot LU.
pub fn solve_linear(a: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    a.clone().lu().solve(rhs).ok_or(Error::Singular)
}

/// Log of the multivariate normal density `φ(x; mean, cov)`.
pub fn gaussian_log_density(x: &Vector, mean: &Vector, cov: &Matrix) -> Result<f64> {
    let chol = Cholesky::new(cov)?;
    let r = x - mean;
    let z = chol.solve(&r);
    let d = x.len() as f64;
    Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + chol.log_det() + r.dot(&z)))
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn norm1(a: &Matrix) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring around a degree-13 Padé
/// approximant.
pub fn expm(a: &Matrix) -> Matrix {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm of a non-square matrix");
    let ident = Matrix::identity(n, n);
    let norm = norm1(a);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let a = a / 2f64.powi(squarings);
    let b = &PADE13;
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = &a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    let numer = &v + &u;
    let denom = &v - &u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .expect("Padé denominator is nonsingular for scaled input");
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

/// Solves the continuous Lyapunov equation `B Λ + Λ Bᵀ + a = 0`.
///
/// Dimension ≤ 2 uses the vectorised (Kronecker) system directly; larger
/// problems go through a real Schur form (Bartels–Stewart).
pub fn solve_lyapunov(b: &Matrix, a: &Matrix) -> Result<Matrix> {
    let n = b.nrows();
    if b.ncols() != n || a.nrows() != n || a.ncols() != n {
        return Err(Error::Dimension("lyapunov operands must be square and conformable".into()));
    }
    let mut sol = if n <= 2 {
        lyapunov_kronecker(b, a)?
    } else {
        lyapunov_bartels_stewart(b, a)?
    };
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (sol[(i, j)] + sol[(j, i)]);
            sol[(i, j)] = s;
            sol[(j, i)] = s;
        }
    }
    Ok(sol)
}

fn lyapunov_kronecker(b: &Matrix, a: &Matrix) -> Result<Matrix> {
    let n = b.nrows();
    let ident = Matrix::identity(n, n);
    // column-major vec: vec(BΛ) = (I ⊗ B) vec Λ, vec(Λ Bᵀ) = (B ⊗ I) vec Λ
    let op = ident.kronecker(b) + b.kronecker(&ident);
    let rhs = Vector::from_iterator(n * n, a.iter().map(|x| -x));
    let scale = norm1(&op).max(f64::MIN_POSITIVE);
    let lu = op.lu();
    let min_pivot = lu
        .u()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, d| m.min(d.abs()));
    if min_pivot <= 1e-14 * scale {
        return Err(Error::SingularLyapunov);
    }
    let x = lu.solve(&rhs).ok_or(Error::SingularLyapunov)?;
    Ok(Matrix::from_column_slice(n, n, x.as_slice()))
}

fn lyapunov_bartels_stewart(b: &Matrix, a: &Matrix) -> Result<Matrix> {
    let n = b.nrows();
    let (q, t) = b.clone().schur().unpack();
    // T Y + Y Tᵀ = C with C = -Qᵀ a Q; columns solved from last to first
    let c = -(q.transpose() * a * &q);
    let mut y = Matrix::zeros(n, n);
    let ident = Matrix::identity(n, n);
    let tnorm = norm1(&t).max(f64::MIN_POSITIVE);

    let mut j = n;
    while j > 0 {
        let is_pair = j >= 2 && t[(j - 1, j - 2)].abs() > 1e-14 * tnorm;
        if is_pair {
            let (j0, j1) = (j - 2, j - 1);
            let mut r0 = c.column(j0).into_owned();
            let mut r1 = c.column(j1).into_owned();
            for k in j..n {
                r0 -= y.column(k) * t[(j0, k)];
                r1 -= y.column(k) * t[(j1, k)];
            }
            let mut sys = Matrix::zeros(2 * n, 2 * n);
            sys.view_mut((0, 0), (n, n))
                .copy_from(&(&t + &ident * t[(j0, j0)]));
            sys.view_mut((0, n), (n, n))
                .copy_from(&(&ident * t[(j0, j1)]));
            sys.view_mut((n, 0), (n, n))
                .copy_from(&(&ident * t[(j1, j0)]));
            sys.view_mut((n, n), (n, n))
                .copy_from(&(&t + &ident * t[(j1, j1)]));
            let mut rhs = Vector::zeros(2 * n);
            rhs.rows_mut(0, n).copy_from(&r0);
            rhs.rows_mut(n, n).copy_from(&r1);
            let sol = solve_checked(sys, &rhs)?;
            y.column_mut(j0).copy_from(&sol.rows(0, n));
            y.column_mut(j1).copy_from(&sol.rows(n, n));
            j -= 2;
        } else {
            let jj = j - 1;
            let mut r = c.column(jj).into_owned();
            for k in j..n {
                r -= y.column(k) * t[(jj, k)];
            }
            let sys = &t + &ident * t[(jj, jj)];
            let sol = solve_checked(sys, &r)?;
            y.column_mut(jj).copy_from(&sol);
            j -= 1;
        }
    }
    Ok(&q * y * q.transpose())
}

fn solve_checked(sys: Matrix, rhs: &Vector) -> Result<Vector> {
    let scale = norm1(&sys).max(f64::MIN_POSITIVE);
    let lu = sys.lu();
    let min_pivot = lu
        .u()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, d| m.min(d.abs()));
    if min_pivot <= 1e-14 * scale {
        return Err(Error::SingularLyapunov);
    }
    lu.solve(rhs).ok_or(Error::SingularLyapunov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        let n = rows.len();
        Matrix::from_fn(n, rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn cholesky_examples() {
        let y = cholesky_solve(&Matrix::identity(2, 2), &Vector::from_vec(vec![3.0, -1.0])).unwrap();
        assert_eq!(y.as_slice(), &[3.0, -1.0]);
        let y = cholesky_solve(&mat(&[&[4.0, 0.0], &[0.0, 9.0]]), &Vector::from_vec(vec![8.0, 27.0]))
            .unwrap();
        assert_eq!(y.as_slice(), &[2.0, 3.0]);
        let y = cholesky_solve(&mat(&[&[2.0, 1.0], &[1.0, 2.0]]), &Vector::from_vec(vec![3.0, 3.0]))
            .unwrap();
        assert_relative_eq!(y[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(y[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let a = mat(&[&[1.0, 2.0], &[2.0, 1.0]]);
        match Cholesky::new(&a) {
            Err(Error::NotSpd { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected NotSpd, got {other:?}"),
        }
        match Cholesky::new(&Matrix::zeros(1, 1)) {
            Err(Error::NotSpd { pivot, .. }) => assert_eq!(pivot, 0),
            other => panic!("expected NotSpd, got {other:?}"),
        }
    }

    #[test]
    fn expm_examples() {
        assert_eq!(expm(&Matrix::zeros(3, 3)), Matrix::identity(3, 3));
        let e = expm(&mat(&[&[-2.0]]));
        assert_relative_eq!(e[(0, 0)], (-2f64).exp(), max_relative = 1e-14);
        let e = expm(&mat(&[&[0.0, 1.0], &[0.0, 0.0]]));
        assert_relative_eq!(e, mat(&[&[1.0, 1.0], &[0.0, 1.0]]), epsilon = 1e-15);
    }

    #[test]
    fn expm_rotation_against_closed_form() {
        // exp([[0, θ], [-θ, 0]]) is a rotation; θ = 9 forces squarings
        let theta = 9.0;
        let e = expm(&mat(&[&[0.0, theta], &[-theta, 0.0]]));
        let (s, c) = f64::sin_cos(theta);
        let expect = mat(&[&[c, s], &[-s, c]]);
        assert_relative_eq!(e, expect, epsilon = 1e-12);
    }

    #[test]
    fn lyapunov_examples() {
        let l = solve_lyapunov(&mat(&[&[-2.0]]), &mat(&[&[0.01]])).unwrap();
        assert_relative_eq!(l[(0, 0)], 0.0025, max_relative = 1e-14);
        let l = solve_lyapunov(&mat(&[&[-1.0, 0.3], &[0.0, -2.0]]), &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(l, Matrix::zeros(2, 2));
        let l = solve_lyapunov(&(-Matrix::identity(2, 2)), &Matrix::identity(2, 2)).unwrap();
        assert_relative_eq!(l, Matrix::identity(2, 2) * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn lyapunov_singular_operator_is_an_error() {
        // eigenvalues ±1 sum to zero
        let b = mat(&[&[1.0, 0.0], &[0.0, -1.0]]);
        assert!(matches!(
            solve_lyapunov(&b, &Matrix::identity(2, 2)),
            Err(Error::SingularLyapunov)
        ));
        let b = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -1.0, -3.0]));
        assert!(matches!(
            solve_lyapunov(&b, &Matrix::identity(3, 3)),
            Err(Error::SingularLyapunov)
        ));
    }

    #[test]
    fn bartels_stewart_handles_complex_pairs() {
        // rotation-like block gives a 2x2 Schur block
        let b = mat(&[
            &[-0.5, 2.0, 0.1],
            &[-2.0, -0.5, 0.3],
            &[0.0, 0.4, -1.0],
        ]);
        let a = mat(&[&[1.0, 0.2, 0.0], &[0.2, 2.0, 0.1], &[0.0, 0.1, 0.5]]);
        let l = solve_lyapunov(&b, &a).unwrap();
        let res = &b * &l + &l * b.transpose() + &a;
        assert!(res.amax() <= 1e-10 * a.amax(), "residual {}", res.amax());
    }

    fn square(n: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-1.0f64..1.0, n * n)
            .prop_map(move |v| Matrix::from_column_slice(n, n, &v))
    }

    fn spd(n: usize) -> impl Strategy<Value = Matrix> {
        (square(n), proptest::collection::vec(-6.0f64..0.0, n)).prop_map(move |(m, log_eig)| {
            // orthogonal factor from QR, eigenvalues in [1e-6, 1] (condition ≤ 1e6)
            let q = m.qr().q();
            let diag = Vector::from_iterator(n, log_eig.iter().map(|e| 10f64.powf(*e)));
            &q * Matrix::from_diagonal(&diag) * q.transpose()
        })
    }

    proptest! {
        #[test]
        fn cholesky_recovers_solution(a in (1usize..=4).prop_flat_map(spd)) {
            let n = a.nrows();
            let y = Vector::from_fn(n, |i, _| (i as f64 + 1.0) * 0.7 - 1.1);
            let back = cholesky_solve(&a, &(&a * &y)).unwrap();
            prop_assert!((back - &y).norm() <= 1e-10 * y.norm());
        }

        #[test]
        fn expm_inverse_pair(m in square(3), scale in 0.0f64..5.0) {
            let a = &m * (scale / norm1(&m).max(1e-12));
            let prod = expm(&a) * expm(&(-&a));
            prop_assert!((prod - Matrix::identity(3, 3)).amax() <= 1e-10);
        }

        #[test]
        fn lyapunov_residual_small(n in 1usize..=5, m in square(5), w in spd(5)) {
            // shift to make B stable, so no eigenvalue pair sums to zero
            let b = m.view((0, 0), (n, n)).into_owned() - Matrix::identity(n, n) * 2.5;
            let a = w.view((0, 0), (n, n)).into_owned();
            let l = solve_lyapunov(&b, &a).unwrap();
            let res = &b * &l + &l * b.transpose() + &a;
            prop_assert!(res.amax() <= 1e-10 * a.amax());
            prop_assert!((&l - l.transpose()).amax() == 0.0);
        }
    }
}
