//! Structural diagnostics of a model at its steady tuple.

use adampc::linalg;
use adampc::refgen::{output_reachability, Equilibrium, ReachabilityReport};
use adampc::{ParametricModel, Result};
use nalgebra::DMatrix;
use serde::Serialize;

/// An eigenvalue closer to one than this violates the no-unit-eigenvalue hypothesis.
pub const UNIT_EIGENVALUE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
    pub modulus: f64,
    pub is_one: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Hypotheses {
    pub controllable: bool,
    pub no_unit_eigenvalue: bool,
    /// Indices into `eigenvalues` that equal one.
    pub unit_eigenvalues: Vec<usize>,
    pub output_reachable_row: Option<usize>,
    pub all_hold: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub x_s: Vec<f64>,
    pub u_s: Vec<f64>,
    pub equilibrium_residual: f64,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub eigenvalues: Vec<Eigenvalue>,
    pub controllability_rank: usize,
    pub reachability: ReachabilityReport,
    pub hypotheses: Hypotheses,
}

/// `[B, AB, …, A^{n-1}B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for i in 0..n {
        out.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    out
}

pub fn check_model(model: &ParametricModel, eq: &Equilibrium) -> Result<CheckReport> {
    let lin = model.linearize(&eq.x_s, &eq.u_s, model.theta_true())?;
    let eigenvalues: Vec<Eigenvalue> = lin
        .a
        .complex_eigenvalues()
        .iter()
        .map(|z| {
            let is_one = (z.re - 1.0).hypot(z.im) <= UNIT_EIGENVALUE_TOL;
            Eigenvalue {
                re: z.re,
                im: z.im,
                modulus: z.norm(),
                is_one,
            }
        })
        .collect();
    let ctrb = controllability_matrix(&lin.a, &lin.b);
    let controllability_rank = linalg::numerical_rank(&ctrb, ctrb.nrows().max(ctrb.ncols()));
    let reachability = output_reachability(&lin);
    let unit_eigenvalues: Vec<usize> = eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, e)| e.is_one)
        .map(|(i, _)| i)
        .collect();
    let controllable = controllability_rank == model.state_dim();
    let hypotheses = Hypotheses {
        controllable,
        no_unit_eigenvalue: unit_eigenvalues.is_empty(),
        output_reachable_row: reachability.witness,
        all_hold: controllable && unit_eigenvalues.is_empty() && reachability.any_reachable,
        unit_eigenvalues,
    };
    Ok(CheckReport {
        x_s: eq.x_s.iter().copied().collect(),
        u_s: eq.u_s.iter().copied().collect(),
        equilibrium_residual: eq.residual,
        a: linalg::to_rows(&lin.a),
        b: linalg::to_rows(&lin.b),
        eigenvalues,
        controllability_rank,
        reachability,
        hypotheses,
    })
}

impl CheckReport {
    pub fn render(&self) -> String {
        let mut lines = vec![
            format!("steady tuple: x_s = {:?}, u_s = {:?}", self.x_s, self.u_s),
            format!("equilibrium residual: {:.3e}", self.equilibrium_residual),
            format!("A = {:?}", self.a),
            format!("B = {:?}", self.b),
        ];
        for (i, e) in self.eigenvalues.iter().enumerate() {
            let mark = if e.is_one { "  <- equals one" } else { "" };
            if e.im == 0.0 {
                lines.push(format!("eig(A)[{i}] = {}{mark}", e.re));
            } else {
                lines.push(format!("eig(A)[{i}] = {} {:+}i{mark}", e.re, e.im));
            }
        }
        lines.push(format!(
            "controllability rank: {} of {}",
            self.controllability_rank,
            self.a.len()
        ));
        for (i, row) in self.reachability.rows.iter().enumerate() {
            lines.push(format!(
                "row {i}: output reachability rank {} of {} ({}), matrix {:?}",
                row.rank,
                self.reachability.param_dim,
                if row.output_reachable { "reachable" } else { "not reachable" },
                row.matrix
            ));
        }
        let h = &self.hypotheses;
        let verdict = |ok: bool| if ok { "holds" } else { "violated" };
        lines.push(format!("hypothesis (A, B) controllable: {}", verdict(h.controllable)));
        let unit = if h.no_unit_eigenvalue {
            "holds".to_string()
        } else {
            format!("violated by eigenvalue index {:?}", h.unit_eigenvalues)
        };
        lines.push(format!("hypothesis no eigenvalue of A equals one: {unit}"));
        lines.push(format!(
            "hypothesis some state row output reachable: {}",
            match h.output_reachable_row {
                Some(i) => format!("holds (row {i})"),
                None => "violated".to_string(),
            }
        ));
        lines.push(format!("all hypotheses hold: {}", h.all_hold));
        lines.join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn controllability_blocks() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let c = controllability_matrix(&a, &b);
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let uncontrollable = controllability_matrix(&DMatrix::identity(2, 2), &DMatrix::from_row_slice(2, 1, &[1.0, 1.0]));
        assert_eq!(linalg::numerical_rank(&uncontrollable, 2), 1);
    }
}
