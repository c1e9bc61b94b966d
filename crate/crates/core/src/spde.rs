//! Evaluation of the non-stationarity fields `kappa^2(s)` and
//! `H(s) = gamma(s) I + v(s) v(s)^T`, finite-volume assembly of the sparse
//! operator `A` discretizing `(kappa^2 - div H grad)` with zero-flux
//! boundaries, the precision matrix `Q = A^T A V`, and the derivative
//! matrices `dQ/dtheta_i` used by the analytic gradient.
//!
//! The stencil for cell (i, j) is
//!
//!   (A u)_ij = kappa^2(s_ij) u_ij - (1/V) (F_E - F_W + F_N - F_S),
//!
//! with, for the east edge between (i, j) and (i, j+1),
//!
//!   F_E = h_y [ H11 (u_{i,j+1} - u_{i,j}) / h_x
//!             + H12 (ubar_north - ubar_south) / (2 h_y) ],
//!
//! where H is evaluated at the edge midpoint and ubar_north/south are the
//! averages of the two cells diagonally adjacent across the edge. Boundary
//! edges carry zero flux; tangential differences that would reference cells
//! outside the domain use reflected ghost values (the nearest inside cell),
//! consistent with the Neumann condition. Constants are annihilated by the
//! diffusion part, so A applied to the all-ones vector returns kappa^2 at
//! each cell.

use crate::basis::FieldBasis;
use crate::error::{Error, Result};
use crate::geometry::Grid;
use crate::sparse::SparseSym;
use serde::{Deserialize, Serialize};

/// Parameters of the non-stationary model: spline coefficients of
/// `log kappa^2`, `log gamma`, `v_x`, `v_y` and one log nugget precision
/// per region. Serialization order of the flat vector is fixed:
/// `(alpha_1, alpha_2, alpha_3, alpha_4, log_tau_noise...)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonStatParams {
    pub alpha: [Vec<f64>; 4],
    pub log_tau_noise: Vec<f64>,
}

impl NonStatParams {
    /// Constant-field (stationary) parameters.
    pub fn stationary(
        log_kappa2: f64,
        log_gamma: f64,
        v_x: f64,
        v_y: f64,
        log_tau_noise: Vec<f64>,
    ) -> NonStatParams {
        NonStatParams {
            alpha: [
                vec![log_kappa2],
                vec![log_gamma],
                vec![v_x],
                vec![v_y],
            ],
            log_tau_noise,
        }
    }

    pub fn n_coeffs(&self) -> usize {
        self.alpha[0].len()
    }

    pub fn n_regions(&self) -> usize {
        self.log_tau_noise.len()
    }

    pub fn n_params(&self) -> usize {
        4 * self.n_coeffs() + self.n_regions()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for a in &self.alpha {
            v.extend_from_slice(a);
        }
        v.extend_from_slice(&self.log_tau_noise);
        v
    }

    pub fn from_flat(theta: &[f64], n_coeffs: usize, n_regions: usize) -> Result<NonStatParams> {
        if theta.len() != 4 * n_coeffs + n_regions {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                4 * n_coeffs + n_regions,
                theta.len()
            )));
        }
        let alpha = [
            theta[0..n_coeffs].to_vec(),
            theta[n_coeffs..2 * n_coeffs].to_vec(),
            theta[2 * n_coeffs..3 * n_coeffs].to_vec(),
            theta[3 * n_coeffs..4 * n_coeffs].to_vec(),
        ];
        Ok(NonStatParams {
            alpha,
            log_tau_noise: theta[4 * n_coeffs..].to_vec(),
        })
    }
}

/// The non-stationarity fields sampled where the stencil needs them:
/// `kappa^2` at cell centers, `H` (and its ingredients) at interior edge
/// midpoints. Vertical edges separate horizontally adjacent cells.
#[derive(Debug, Clone)]
pub struct SpdeFields {
    pub kappa2: Vec<f64>,
    /// (H11, H12, H22) per vertical interior edge, index `j * n_y + i`
    /// for the edge between (i, j) and (i, j+1).
    pub h_vert: Vec<[f64; 3]>,
    /// (H11, H12, H22) per horizontal interior edge, index
    /// `j * (n_y - 1) + i` for the edge between (i, j) and (i+1, j).
    pub h_horiz: Vec<[f64; 3]>,
    pub gamma_vert: Vec<f64>,
    pub v_vert: Vec<[f64; 2]>,
    pub gamma_horiz: Vec<f64>,
    pub v_horiz: Vec<[f64; 2]>,
}

pub fn vert_edge_midpoint(grid: &Grid, i: usize, j: usize) -> (f64, f64) {
    (
        grid.x_min + (j as f64 + 1.0) * grid.h_x,
        grid.y_min + (i as f64 + 0.5) * grid.h_y,
    )
}

pub fn horiz_edge_midpoint(grid: &Grid, i: usize, j: usize) -> (f64, f64) {
    (
        grid.x_min + (j as f64 + 0.5) * grid.h_x,
        grid.y_min + (i as f64 + 1.0) * grid.h_y,
    )
}

fn check_domain(basis: &FieldBasis, grid: &Grid) -> Result<()> {
    if let FieldBasis::Tensor(b) = basis {
        let eps = 1e-9;
        if b.bx.a > grid.x_min + eps
            || b.bx.b < grid.x_max - eps
            || b.by.a > grid.y_min + eps
            || b.by.b < grid.y_max - eps
        {
            return Err(Error::DimensionMismatch(
                "basis domain does not cover the grid domain".into(),
            ));
        }
    }
    Ok(())
}

fn edge_points(grid: &Grid) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let mut vert = Vec::with_capacity((grid.n_x - 1) * grid.n_y);
    for j in 0..grid.n_x - 1 {
        for i in 0..grid.n_y {
            vert.push(vert_edge_midpoint(grid, i, j));
        }
    }
    let mut horiz = Vec::with_capacity(grid.n_x * (grid.n_y - 1));
    for j in 0..grid.n_x {
        for i in 0..grid.n_y - 1 {
            horiz.push(horiz_edge_midpoint(grid, i, j));
        }
    }
    (vert, horiz)
}

/// Evaluates `kappa^2` at cell centers and `H` at edge midpoints.
pub fn eval_spde_fields(
    params: &NonStatParams,
    basis: &FieldBasis,
    grid: &Grid,
) -> Result<SpdeFields> {
    check_domain(basis, grid)?;
    let centers: Vec<(f64, f64)> = (0..grid.n_cells()).map(|c| grid.cell_center(c)).collect();
    let (vert, horiz) = edge_points(grid);

    let kappa2: Vec<f64> = basis
        .eval(&params.alpha[0], &centers)?
        .into_iter()
        .map(f64::exp)
        .collect();

    let h_at = |pts: &[(f64, f64)]| -> Result<(Vec<[f64; 3]>, Vec<f64>, Vec<[f64; 2]>)> {
        let gamma: Vec<f64> = basis
            .eval(&params.alpha[1], pts)?
            .into_iter()
            .map(f64::exp)
            .collect();
        let vx = basis.eval(&params.alpha[2], pts)?;
        let vy = basis.eval(&params.alpha[3], pts)?;
        let h = gamma
            .iter()
            .zip(vx.iter().zip(vy.iter()))
            .map(|(&g, (&x, &y))| [g + x * x, x * y, g + y * y])
            .collect();
        let v = vx.into_iter().zip(vy).map(|(x, y)| [x, y]).collect();
        Ok((h, gamma, v))
    };

    let (h_vert, gamma_vert, v_vert) = h_at(&vert)?;
    let (h_horiz, gamma_horiz, v_horiz) = h_at(&horiz)?;
    Ok(SpdeFields {
        kappa2,
        h_vert,
        h_horiz,
        gamma_vert,
        v_vert,
        gamma_horiz,
        v_horiz,
    })
}

/// Derivatives of the fields with respect to one spline coefficient.
/// `which` indexes the flat parameter vector restricted to the four alpha
/// blocks; nugget parameters have no field derivative.
pub fn eval_field_derivatives(
    fields: &SpdeFields,
    basis: &FieldBasis,
    grid: &Grid,
    which: usize,
) -> Result<SpdeFields> {
    let nc = basis.n_coeffs();
    if which >= 4 * nc {
        return Err(Error::ParameterIndex(which));
    }
    let (func, coeff) = (which / nc, which % nc);
    let n_cells = grid.n_cells();
    let (vert, horiz) = edge_points(grid);

    let mut d = SpdeFields {
        kappa2: vec![0.0; n_cells],
        h_vert: vec![[0.0; 3]; vert.len()],
        h_horiz: vec![[0.0; 3]; horiz.len()],
        gamma_vert: vec![0.0; vert.len()],
        v_vert: vec![[0.0; 2]; vert.len()],
        gamma_horiz: vec![0.0; horiz.len()],
        v_horiz: vec![[0.0; 2]; horiz.len()],
    };

    match func {
        0 => {
            for c in 0..n_cells {
                d.kappa2[c] = fields.kappa2[c] * basis.fn_value(coeff, grid.cell_center(c));
            }
        }
        1 => {
            for (e, p) in vert.iter().enumerate() {
                let g = fields.gamma_vert[e] * basis.fn_value(coeff, *p);
                d.h_vert[e] = [g, 0.0, g];
            }
            for (e, p) in horiz.iter().enumerate() {
                let g = fields.gamma_horiz[e] * basis.fn_value(coeff, *p);
                d.h_horiz[e] = [g, 0.0, g];
            }
        }
        2 => {
            for (e, p) in vert.iter().enumerate() {
                let f = basis.fn_value(coeff, *p);
                let [vx, vy] = fields.v_vert[e];
                d.h_vert[e] = [2.0 * f * vx, f * vy, 0.0];
            }
            for (e, p) in horiz.iter().enumerate() {
                let f = basis.fn_value(coeff, *p);
                let [vx, vy] = fields.v_horiz[e];
                d.h_horiz[e] = [2.0 * f * vx, f * vy, 0.0];
            }
        }
        _ => {
            for (e, p) in vert.iter().enumerate() {
                let f = basis.fn_value(coeff, *p);
                let [vx, vy] = fields.v_vert[e];
                d.h_vert[e] = [0.0, f * vx, 2.0 * f * vy];
            }
            for (e, p) in horiz.iter().enumerate() {
                let f = basis.fn_value(coeff, *p);
                let [vx, vy] = fields.v_horiz[e];
                d.h_horiz[e] = [0.0, f * vx, 2.0 * f * vy];
            }
        }
    }
    Ok(d)
}

/// The discretized SPDE operator in CSR form; at most 9 nonzeros per row,
/// all within the 3x3 neighborhood of each cell.
#[derive(Debug, Clone)]
pub struct SpdeOperator {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

impl SpdeOperator {
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col[a..b], &self.val[a..b])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect()
    }

    pub fn max_row_nnz(&self) -> usize {
        (0..self.n)
            .map(|r| self.row_ptr[r + 1] - self.row_ptr[r])
            .max()
            .unwrap_or(0)
    }
}

/// Assembles the finite-volume operator from sampled fields.
pub fn assemble_a(fields: &SpdeFields, grid: &Grid) -> SpdeOperator {
    let (n_x, n_y) = (grid.n_x, grid.n_y);
    let n = n_x * n_y;
    let (h_x, h_y) = (grid.h_x, grid.h_y);
    let v_cell = grid.cell_area;
    let inv_v = 1.0 / v_cell;

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col = Vec::new();
    let mut val = Vec::new();
    row_ptr.push(0);

    // Local accumulator over at most 9 distinct columns.
    let mut local: Vec<(usize, f64)> = Vec::with_capacity(9);

    for j in 0..n_x {
        for i in 0..n_y {
            local.clear();
            // Entries are kept even when numerically zero so the pattern
            // does not depend on the parameter values; the factor pattern
            // of Q then covers every derivative matrix dQ.
            let add = |local: &mut Vec<(usize, f64)>, cell: usize, w: f64| {
                for e in local.iter_mut() {
                    if e.0 == cell {
                        e.1 += w;
                        return;
                    }
                }
                local.push((cell, w));
            };
            let c = grid.flat(i, j);
            add(&mut local, c, fields.kappa2[c]);

            let i_n = if i + 1 < n_y { i + 1 } else { i };
            let i_s = if i > 0 { i - 1 } else { i };
            let j_e = if j + 1 < n_x { j + 1 } else { j };
            let j_w = if j > 0 { j - 1 } else { j };

            // East edge: -(1/V) F_E.
            if j + 1 < n_x {
                let [h11, h12, _] = fields.h_vert[j * n_y + i];
                let wn = h11 * h_y / h_x * inv_v;
                add(&mut local, grid.flat(i, j + 1), -wn);
                add(&mut local, c, wn);
                let wt = h12 / (4.0 * v_cell);
                add(&mut local, grid.flat(i_n, j), -wt);
                add(&mut local, grid.flat(i_n, j + 1), -wt);
                add(&mut local, grid.flat(i_s, j), wt);
                add(&mut local, grid.flat(i_s, j + 1), wt);
            }
            // West edge: +(1/V) F_W.
            if j > 0 {
                let [h11, h12, _] = fields.h_vert[(j - 1) * n_y + i];
                let wn = h11 * h_y / h_x * inv_v;
                add(&mut local, c, wn);
                add(&mut local, grid.flat(i, j - 1), -wn);
                let wt = h12 / (4.0 * v_cell);
                add(&mut local, grid.flat(i_n, j - 1), wt);
                add(&mut local, grid.flat(i_n, j), wt);
                add(&mut local, grid.flat(i_s, j - 1), -wt);
                add(&mut local, grid.flat(i_s, j), -wt);
            }
            // North edge: -(1/V) F_N.
            if i + 1 < n_y {
                let [_, h12, h22] = fields.h_horiz[j * (n_y - 1) + i];
                let wn = h22 * h_x / h_y * inv_v;
                add(&mut local, grid.flat(i + 1, j), -wn);
                add(&mut local, c, wn);
                let wt = h12 / (4.0 * v_cell);
                add(&mut local, grid.flat(i, j_e), -wt);
                add(&mut local, grid.flat(i + 1, j_e), -wt);
                add(&mut local, grid.flat(i, j_w), wt);
                add(&mut local, grid.flat(i + 1, j_w), wt);
            }
            // South edge: +(1/V) F_S.
            if i > 0 {
                let [_, h12, h22] = fields.h_horiz[j * (n_y - 1) + i - 1];
                let wn = h22 * h_x / h_y * inv_v;
                add(&mut local, c, wn);
                add(&mut local, grid.flat(i - 1, j), -wn);
                let wt = h12 / (4.0 * v_cell);
                add(&mut local, grid.flat(i - 1, j_e), wt);
                add(&mut local, grid.flat(i, j_e), wt);
                add(&mut local, grid.flat(i - 1, j_w), -wt);
                add(&mut local, grid.flat(i, j_w), -wt);
            }

            local.sort_unstable_by_key(|e| e.0);
            for &(cc, w) in local.iter() {
                col.push(cc);
                val.push(w);
            }
            row_ptr.push(col.len());
        }
    }

    SpdeOperator {
        n,
        row_ptr,
        col,
        val,
    }
}

/// `Q = A^T A V`, assembled symmetrically from row outer products.
pub fn assemble_q(a: &SpdeOperator, grid: &Grid) -> SparseSym {
    let v_cell = grid.cell_area;
    let mut triplets = Vec::with_capacity(a.val.len() * 9);
    for r in 0..a.n {
        let (cols, vals) = a.row(r);
        for (p1, (&c1, &v1)) in cols.iter().zip(vals).enumerate() {
            let w = v1 * v1 * v_cell;
            triplets.push((c1, c1, w));
            for (&c2, &v2) in cols[p1 + 1..].iter().zip(&vals[p1 + 1..]) {
                let w = v1 * v2 * v_cell;
                triplets.push((c1, c2, w));
                triplets.push((c2, c1, w));
            }
        }
    }
    SparseSym::from_triplets(a.n, &triplets)
}

/// `dQ = (dA^T A + A^T dA) V` for `dA` assembled from derivative fields.
pub fn assemble_dq(a: &SpdeOperator, da: &SpdeOperator, grid: &Grid) -> SparseSym {
    let v_cell = grid.cell_area;
    let mut triplets = Vec::new();
    for r in 0..a.n {
        let (cols_a, vals_a) = a.row(r);
        let (cols_d, vals_d) = da.row(r);
        for (&cd, &vd) in cols_d.iter().zip(vals_d) {
            if vd == 0.0 {
                continue;
            }
            for (&ca, &va) in cols_a.iter().zip(vals_a) {
                let w = vd * va * v_cell;
                triplets.push((cd, ca, w));
                triplets.push((ca, cd, w));
            }
        }
    }
    SparseSym::from_triplets(a.n, &triplets)
}
