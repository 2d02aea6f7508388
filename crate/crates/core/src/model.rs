//! Discrete-time dynamics that are linear in an unknown parameter vector.
//!
//! The one-step map is
//!
//! ```text
//! x⁺ = f₀(x, u) + Σⱼ θⱼ fⱼ(x, u) + w
//! ```
//!
//! where every basis map `fⱼ : Rⁿ × Rᵐ → Rⁿ` is a polynomial given as a sum
//! of monomials per output row. Polynomials are smooth everywhere, so the
//! Jacobians below are exact.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// `coeff · Πᵢ xᵢ^{x_powers[i]} · Πⱼ uⱼ^{u_powers[j]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coeff: f64,
    pub x_powers: Vec<u32>,
    pub u_powers: Vec<u32>,
}

impl Monomial {
    pub fn new(coeff: f64, x_powers: Vec<u32>, u_powers: Vec<u32>) -> Self {
        Self {
            coeff,
            x_powers,
            u_powers,
        }
    }

    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mut v = self.coeff;
        for (xi, &p) in x.iter().zip(&self.x_powers) {
            if p > 0 {
                v *= xi.powi(p as i32);
            }
        }
        for (ui, &p) in u.iter().zip(&self.u_powers) {
            if p > 0 {
                v *= ui.powi(p as i32);
            }
        }
        v
    }

    /// Partial derivative with respect to `x[var]` (or `u[var]` when `wrt_input`).
    fn partial(&self, x: &DVector<f64>, u: &DVector<f64>, var: usize, wrt_input: bool) -> f64 {
        let powers = if wrt_input {
            &self.u_powers
        } else {
            &self.x_powers
        };
        let p = powers[var];
        if p == 0 || self.coeff == 0.0 {
            return 0.0;
        }
        let mut v = self.coeff * p as f64;
        for (i, (xi, &q)) in x.iter().zip(&self.x_powers).enumerate() {
            let q = if !wrt_input && i == var { q - 1 } else { q };
            if q > 0 {
                v *= xi.powi(q as i32);
            }
        }
        for (i, (ui, &q)) in u.iter().zip(&self.u_powers).enumerate() {
            let q = if wrt_input && i == var { q - 1 } else { q };
            if q > 0 {
                v *= ui.powi(q as i32);
            }
        }
        v
    }
}

/// One vector-valued basis map: `rows[i]` is the polynomial for output `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisMap {
    pub rows: Vec<Vec<Monomial>>,
}

impl BasisMap {
    pub fn new(rows: Vec<Vec<Monomial>>) -> Self {
        Self { rows }
    }

    pub fn zero(n: usize) -> Self {
        Self {
            rows: vec![Vec::new(); n],
        }
    }

    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|row| row.iter().map(|t| t.eval(x, u)).sum::<f64>()),
        )
    }

    /// `(∂f/∂x, ∂f/∂u)`.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.rows.len();
        let jx = DMatrix::from_fn(n, x.len(), |i, k| {
            self.rows[i].iter().map(|t| t.partial(x, u, k, false)).sum()
        });
        let ju = DMatrix::from_fn(n, u.len(), |i, k| {
            self.rows[i].iter().map(|t| t.partial(x, u, k, true)).sum()
        });
        (jx, ju)
    }
}

/// Basis evaluations at one `(x, u)`: column `j` holds `f_{j+1}(x, u)`.
///
/// The stored `n × S` matrix is `φᵀ`, so that `x⁺ = f₀ + φᵀθ + w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    values: DMatrix<f64>,
}

impl Regressor {
    pub fn from_columns(values: DMatrix<f64>) -> Self {
        Self { values }
    }

    /// `φᵀ`, shape `n × S`.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// `φ`, shape `S × n`.
    pub fn phi(&self) -> DMatrix<f64> {
        self.values.transpose()
    }

    /// `φᵀθ`.
    pub fn apply(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.values * theta
    }

    /// `φφᵀ`, shape `S × S`.
    pub fn gram(&self) -> DMatrix<f64> {
        self.values.transpose() * &self.values
    }
}

/// First-order data at an operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    /// `∂f/∂x`, including the `f₀` contribution.
    pub a: DMatrix<f64>,
    /// `∂f/∂u`, including the `f₀` contribution.
    pub b: DMatrix<f64>,
    /// `∂fⱼ/∂x` for `j = 1..=S`.
    pub a_basis: Vec<DMatrix<f64>>,
    /// `∂fⱼ/∂u` for `j = 1..=S`.
    pub b_basis: Vec<DMatrix<f64>>,
    /// Per state row `i`: row `j` of `c_rows[i]` is row `i` of `a_basis[j]` (`S × n`).
    pub c_rows: Vec<DMatrix<f64>>,
    /// Per state row `i`: row `j` of `d_rows[i]` is row `i` of `b_basis[j]` (`S × m`).
    pub d_rows: Vec<DMatrix<f64>>,
}

/// `(∂fⱼ/∂x, ∂fⱼ/∂u)` for `j = 1..=S`.
pub type BasisJacobians = (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>);

#[derive(Debug, Clone, PartialEq)]
pub struct ParametricModel {
    n: usize,
    m: usize,
    /// `basis[0]` is `f₀`; `basis[1..]` multiply the parameters.
    basis: Vec<BasisMap>,
    theta_true: DVector<f64>,
    w_bar: f64,
}

impl ParametricModel {
    pub fn new(
        n: usize,
        m: usize,
        basis: Vec<BasisMap>,
        theta_true: DVector<f64>,
        w_bar: f64,
    ) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::config("state and input dimensions must be at least 1"));
        }
        if basis.len() < 2 {
            return Err(Error::config(
                "model needs f0 plus at least one parameterised basis map",
            ));
        }
        for (j, map) in basis.iter().enumerate() {
            if map.rows.len() != n {
                return Err(Error::config(format!(
                    "basis map {j} has {} rows, expected {n}",
                    map.rows.len()
                )));
            }
            for row in &map.rows {
                for term in row {
                    if term.x_powers.len() != n || term.u_powers.len() != m {
                        return Err(Error::config(format!(
                            "monomial in basis map {j} has exponent lengths ({}, {}), expected ({n}, {m})",
                            term.x_powers.len(),
                            term.u_powers.len()
                        )));
                    }
                    if !term.coeff.is_finite() {
                        return Err(Error::config(format!(
                            "non-finite coefficient in basis map {j}"
                        )));
                    }
                }
            }
        }
        check_dim("theta_true", basis.len() - 1, theta_true.len())?;
        if !(w_bar >= 0.0 && w_bar.is_finite()) {
            return Err(Error::config(format!(
                "disturbance bound must be finite and nonnegative, got {w_bar}"
            )));
        }
        Ok(Self {
            n,
            m,
            basis,
            theta_true,
            w_bar,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn param_dim(&self) -> usize {
        self.basis.len() - 1
    }

    pub fn basis(&self) -> &[BasisMap] {
        &self.basis
    }

    pub fn theta_true(&self) -> &DVector<f64> {
        &self.theta_true
    }

    pub fn w_bar(&self) -> f64 {
        self.w_bar
    }

    pub fn with_w_bar(mut self, w_bar: f64) -> Self {
        self.w_bar = w_bar;
        self
    }

    fn check_xu(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        check_dim("state", self.n, x.len())?;
        check_dim("input", self.m, u.len())
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        check_dim("parameter", self.param_dim(), theta.len())
    }

    pub fn f0(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_xu(x, u)?;
        Ok(self.basis[0].eval(x, u))
    }

    /// `f₀(x,u) + Σⱼ θⱼ fⱼ(x,u) + w`.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        check_dim("disturbance", self.n, w.len())?;
        Ok(self.nominal(x, u, theta)? + w)
    }

    /// Noise-free step.
    pub fn nominal(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_xu(x, u)?;
        self.check_theta(theta)?;
        let mut next = self.basis[0].eval(x, u);
        for (map, &t) in self.basis[1..].iter().zip(theta.iter()) {
            if t != 0.0 {
                next += map.eval(x, u) * t;
            }
        }
        Ok(next)
    }

    pub fn regressor(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Regressor> {
        self.check_xu(x, u)?;
        let mut values = DMatrix::zeros(self.n, self.param_dim());
        for (j, map) in self.basis[1..].iter().enumerate() {
            values.set_column(j, &map.eval(x, u));
        }
        Ok(Regressor { values })
    }

    /// Jacobians `(∂f/∂x, ∂f/∂u)` of the noise-free step.
    pub fn jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_xu(x, u)?;
        self.check_theta(theta)?;
        let (mut a, mut b) = self.basis[0].jacobians(x, u);
        for (map, &t) in self.basis[1..].iter().zip(theta.iter()) {
            if t != 0.0 {
                let (ja, jb) = map.jacobians(x, u);
                a += ja * t;
                b += jb * t;
            }
        }
        Ok((a, b))
    }

    /// Per-basis Jacobians `(∂fⱼ/∂x, ∂fⱼ/∂u)` for `j = 1..=S`.
    pub fn basis_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<BasisJacobians> {
        self.check_xu(x, u)?;
        Ok(self.basis[1..].iter().map(|map| map.jacobians(x, u)).unzip())
    }

    pub fn linearize(
        &self,
        x_op: &DVector<f64>,
        u_op: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> Result<Linearization> {
        let (a, b) = self.jacobians(x_op, u_op, theta)?;
        let (a_basis, b_basis) = self.basis_jacobians(x_op, u_op)?;
        let s = self.param_dim();
        let c_rows = (0..self.n)
            .map(|i| DMatrix::from_fn(s, self.n, |j, k| a_basis[j][(i, k)]))
            .collect();
        let d_rows = (0..self.n)
            .map(|i| DMatrix::from_fn(s, self.m, |j, k| b_basis[j][(i, k)]))
            .collect();
        Ok(Linearization {
            a,
            b,
            a_basis,
            b_basis,
            c_rows,
            d_rows,
        })
    }
}

/// Builders for commonly used models.
pub mod library {
    use super::*;

    /// Scalar bilinear plant `x⁺ = θ₁x + θ₂xu + u + w`.
    pub fn scalar_bilinear(theta_true: [f64; 2], w_bar: f64) -> ParametricModel {
        let f0 = BasisMap::new(vec![vec![Monomial::new(1.0, vec![0], vec![1])]]);
        let f1 = BasisMap::new(vec![vec![Monomial::new(1.0, vec![1], vec![0])]]);
        let f2 = BasisMap::new(vec![vec![Monomial::new(1.0, vec![1], vec![1])]]);
        ParametricModel::new(
            1,
            1,
            vec![f0, f1, f2],
            DVector::from_row_slice(&theta_true),
            w_bar,
        )
        .expect("static model is well formed")
    }

    /// Linear plant `x⁺ = A x + B u` written with one parameter per matrix entry.
    ///
    /// The parameter vector is `vec(A)` row-major followed by `vec(B)` row-major,
    /// and `f₀ = 0`.
    pub fn linear(a: &DMatrix<f64>, b: &DMatrix<f64>, w_bar: f64) -> ParametricModel {
        let n = a.nrows();
        let m = b.ncols();
        let mut basis = vec![BasisMap::zero(n)];
        let mut theta = Vec::with_capacity(n * n + n * m);
        for i in 0..n {
            for k in 0..n {
                let mut map = BasisMap::zero(n);
                let mut xp = vec![0; n];
                xp[k] = 1;
                map.rows[i].push(Monomial::new(1.0, xp, vec![0; m]));
                basis.push(map);
                theta.push(a[(i, k)]);
            }
        }
        for i in 0..n {
            for k in 0..m {
                let mut map = BasisMap::zero(n);
                let mut up = vec![0; m];
                up[k] = 1;
                map.rows[i].push(Monomial::new(1.0, vec![0; n], up));
                basis.push(map);
                theta.push(b[(i, k)]);
            }
        }
        ParametricModel::new(n, m, basis, DVector::from_vec(theta), w_bar)
            .expect("linear model is well formed")
    }

    /// Parameter vector that `linear` would assign to `(A, B)`.
    pub fn linear_theta(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
        let vals: Vec<f64> = a
            .row_iter()
            .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
            .chain(b.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()))
            .collect();
        DVector::from_vec(vals)
    }
}
