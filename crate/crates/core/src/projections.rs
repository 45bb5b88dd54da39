//! Shared linear-algebra kernels: the two-way Within projector, generalized
//! inverses, centering, and stratum row selectors.
//!
//! The projector is exposed as an operator. Applying it costs two sparse
//! passes over the observations plus one T x T matrix-vector product, so the
//! full n x n matrix is only ever materialized for small test problems.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::panel::{PanelIndex, StrataAssignment};

/// Relative eigenvalue cutoff used when pseudo-inverting projector cores.
pub const PINV_REL_TOL: f64 = 1e-10;

/// The two-way Within projector Q = Q_A - Q_A D_nu Qc^- D_nu' Q_A where
/// Q_A demeans within individuals and Qc = D_nu' Q_A D_nu.
#[derive(Debug, Clone)]
pub struct WithinProjector {
    index: PanelIndex,
    /// The T x T core Qc.
    core: DMatrix<f64>,
    /// Generalized inverse of the core.
    core_pinv: DMatrix<f64>,
    /// Numerical rank of the core.
    core_rank: usize,
    /// Whether the individual-period bipartite graph is connected.
    connected: bool,
}

impl WithinProjector {
    /// Build the projector for a panel.
    pub fn new(index: &PanelIndex) -> Result<Self> {
        let t = index.n_periods();
        let mut core = DMatrix::zeros(t, t);
        for (tt, &count) in index.n_t().iter().enumerate() {
            core[(tt, tt)] = count as f64;
        }
        for i in 0..index.n_individuals() {
            let periods = index.periods_of(i);
            let w = 1.0 / periods.len() as f64;
            for &s in periods {
                for &r in periods {
                    core[(s, r)] -= w;
                }
            }
        }

        let (core_pinv, core_rank) = pseudo_inverse_with_rank(&core)?;
        if core_rank == 0 && t > 1 {
            return Err(Error::SingularStructure {
                reason: "period core has rank 0".into(),
            });
        }
        // T = 1 panels degenerate to the one-way transformation; the core is
        // the zero matrix and its pseudoinverse is zero, which is consistent.
        let connected = is_connected(index);

        Ok(WithinProjector {
            index: index.clone(),
            core,
            core_pinv,
            core_rank,
            connected,
        })
    }

    pub fn index(&self) -> &PanelIndex {
        &self.index
    }

    /// The T x T core matrix Qc = D_nu' Q_A D_nu.
    pub fn core(&self) -> &DMatrix<f64> {
        &self.core
    }

    /// Generalized inverse of the core (Qc^-).
    pub fn core_pinv(&self) -> &DMatrix<f64> {
        &self.core_pinv
    }

    /// Numerical rank of the core; T-1 for a connected panel.
    pub fn core_rank(&self) -> usize {
        self.core_rank
    }

    /// Whether the panel's individual-period graph is connected. A
    /// disconnected panel still yields a valid projector through the
    /// pseudoinverse; callers may want to surface a warning.
    pub fn is_connected(&self) -> bool {
        self.connected
    }

    /// Demean within individuals: Q_A v.
    pub fn apply_qa(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for i in 0..self.index.n_individuals() {
            let range = self.index.rows_of(i);
            let mean = v.rows(range.start, range.len()).sum() / range.len() as f64;
            for r in range {
                out[r] -= mean;
            }
        }
        out
    }

    /// Apply the full projector: Q v.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.index.n_obs(), "vector length must equal n");
        let qa = self.apply_qa(v);
        // w = D_nu' Q_A v (period sums of the demeaned vector).
        let mut w = DVector::zeros(self.index.n_periods());
        for (r, &t) in self.index.row_period().iter().enumerate() {
            w[t] += qa[r];
        }
        let s = &self.core_pinv * w;
        // Subtract Q_A D_nu s.
        let mut out = qa;
        for i in 0..self.index.n_individuals() {
            let periods = self.index.periods_of(i);
            let mean: f64 = periods.iter().map(|&t| s[t]).sum::<f64>() / periods.len() as f64;
            for r in self.index.rows_of(i) {
                let t = self.index.row_period()[r];
                out[r] -= s[t] - mean;
            }
        }
        out
    }

    /// Apply the projector to every column of a matrix.
    pub fn apply_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for c in 0..m.ncols() {
            let col = self.apply(&DVector::from_column_slice(m.column(c).as_slice()));
            out.set_column(c, &col);
        }
        out
    }

    /// Diagonal of Q, computed per individual in closed form.
    pub fn diagonal(&self) -> DVector<f64> {
        let mut diag = DVector::zeros(self.index.n_obs());
        for i in 0..self.index.n_individuals() {
            let periods = self.index.periods_of(i).to_vec();
            let ti = periods.len() as f64;
            // chi' Qc^- chi over the observed periods of i.
            let mut quad = 0.0;
            for &s in &periods {
                for &r in &periods {
                    quad += self.core_pinv[(s, r)];
                }
            }
            for r in self.index.rows_of(i) {
                let t = self.index.row_period()[r];
                let row_sum: f64 = periods.iter().map(|&s| self.core_pinv[(t, s)]).sum();
                let w_quad = self.core_pinv[(t, t)] - 2.0 * row_sum / ti + quad / (ti * ti);
                diag[r] = (1.0 - 1.0 / ti) - w_quad;
            }
        }
        diag
    }

    /// trace(Q) = n - N - rank(Qc) up to roundoff.
    pub fn trace(&self) -> f64 {
        self.diagonal().sum()
    }

    /// Materialize Q densely. Intended for tests and small panels.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.index.n_obs();
        let mut q = DMatrix::zeros(n, n);
        // Q_A part: block diagonal of E_{T_i}.
        for i in 0..self.index.n_individuals() {
            let range = self.index.rows_of(i);
            let w = 1.0 / range.len() as f64;
            for r in range.clone() {
                q[(r, r)] += 1.0;
                for s in range.clone() {
                    q[(r, s)] -= w;
                }
            }
        }
        // B = Q_A D_nu, stored densely (n x T).
        let tlen = self.index.n_periods();
        let mut b = DMatrix::zeros(n, tlen);
        for i in 0..self.index.n_individuals() {
            let periods = self.index.periods_of(i).to_vec();
            let w = 1.0 / periods.len() as f64;
            for r in self.index.rows_of(i) {
                let tr = self.index.row_period()[r];
                b[(r, tr)] += 1.0;
                for &t in &periods {
                    b[(r, t)] -= w;
                }
            }
        }
        q - &b * &self.core_pinv * b.transpose()
    }
}

/// Row-selection view H_a for each stratum: an index list per stratum.
#[derive(Debug, Clone)]
pub struct StratumSelector {
    rows: Vec<Vec<usize>>,
}

impl StratumSelector {
    pub fn from_strata(strata: &StrataAssignment) -> Self {
        StratumSelector {
            rows: (0..strata.n_strata())
                .map(|a| strata.rows(a).to_vec())
                .collect(),
        }
    }

    pub fn n_strata(&self) -> usize {
        self.rows.len()
    }

    /// Rows selected by H_a.
    pub fn rows(&self, a: usize) -> &[usize] {
        &self.rows[a]
    }

    /// H_a v: gather the stratum's entries.
    pub fn select(&self, a: usize, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows[a].len(), self.rows[a].iter().map(|&r| v[r]))
    }

    /// H_a' w: scatter back into an n-vector of zeros.
    pub fn scatter(&self, a: usize, w: &DVector<f64>, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        for (k, &r) in self.rows[a].iter().enumerate() {
            out[r] = w[k];
        }
        out
    }
}

/// Moore-Penrose pseudoinverse of a symmetric positive-semidefinite matrix
/// via eigendecomposition. Eigenvalues below `PINV_REL_TOL` times the largest
/// magnitude are treated as zero.
pub fn generalized_inverse(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    pseudo_inverse_with_rank(s).map(|(m, _)| m)
}

fn pseudo_inverse_with_rank(s: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "generalized inverse".into(),
        });
    }
    // Defensive symmetrization.
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max_abs = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let tol = PINV_REL_TOL * max_abs;
    let mut rank = 0usize;
    let inv_vals: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| {
            if v.abs() > tol {
                rank += 1;
                1.0 / v
            } else {
                0.0
            }
        })
        .collect();
    let d = DMatrix::from_diagonal(&DVector::from_vec(inv_vals));
    let pinv = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Ok((pinv, rank))
}

/// Center a vector: subtract its mean. The result sums to zero.
pub fn center(v: &DVector<f64>) -> DVector<f64> {
    let mean = v.sum() / v.len() as f64;
    v.map(|x| x - mean)
}

fn is_connected(index: &PanelIndex) -> bool {
    let n_ind = index.n_individuals();
    if n_ind <= 1 {
        return true;
    }
    // Union individuals that share a period.
    let mut parent: Vec<usize> = (0..n_ind).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut first_in_period: Vec<Option<usize>> = vec![None; index.n_periods()];
    for i in 0..n_ind {
        for &t in index.periods_of(i) {
            match first_in_period[t] {
                None => first_in_period[t] = Some(i),
                Some(j) => {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri] = rj;
                    }
                }
            }
        }
    }
    let root = find(&mut parent, 0);
    (1..n_ind).all(|i| find(&mut parent, i) == root)
}

/// Build the Within projector for the panel behind an incidence set.
pub fn within_projector(index: &PanelIndex) -> Result<WithinProjector> {
    WithinProjector::new(index)
}
