//! Two-way SUR system estimation on unbalanced panels.
//!
//! Individuals are grouped by stratum and by the number of times they are
//! observed; within a group the error covariance of the stacked observations
//! has a closed-form inverse built from two M x M inverses, so the GLS
//! normal equations accumulate group by group without any large dense solve.
//!
//! Covariance components come from either of two procedures working on the
//! per-equation Within residuals: quadratic unbiased estimation (moment
//! matching of quadratic forms) or the within/between decomposition of the
//! residual (co)variation.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::panel::{IncidenceSet, PanelIndex, StrataAssignment};
use crate::projections::{center, WithinProjector};
use crate::single_eq::{
    within_fit, FitDiagnostics, FitReport, Regime, WithinFit,
};

/// Which covariance procedure produced a set of SUR components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurProcedure {
    /// Quadratic unbiased estimation from Within residual quadratic forms.
    Que,
    /// Within/between residual (co)variation matrices.
    Wb,
}

impl SurProcedure {
    pub fn label(self) -> &'static str {
        match self {
            SurProcedure::Que => "que",
            SurProcedure::Wb => "wb",
        }
    }
}

/// An M-equation system sharing one panel: per-equation regressors plus the
/// map from local coefficients to the stacked coefficient vector.
///
/// Every equation carries an implicit intercept as its first local
/// coefficient. In unrestricted (block-diagonal) form the global coefficient
/// count is the sum of the per-equation counts; cross-equation restrictions
/// merge coefficient slots so shared coefficients appear in several rows of
/// the per-observation regressor block.
#[derive(Debug, Clone)]
pub struct SurDesign {
    /// Per equation: n x (k_m - 1) regressors, intercept excluded.
    regressors: Vec<DMatrix<f64>>,
    /// Per equation: global coefficient id of [intercept, regressor...].
    coeff_map: Vec<Vec<usize>>,
    n_coeffs: usize,
    restricted: bool,
}

impl SurDesign {
    /// Block-diagonal design: no shared coefficients.
    pub fn unrestricted(regressors: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::build(regressors, &[])
    }

    /// Design with cross-equation restrictions. Each tie `((m, c), (j, d))`
    /// forces local coefficient `c` of equation `m` and `d` of equation `j`
    /// to share one slot; local index 0 is the intercept, `i >= 1` is
    /// regressor column `i - 1`.
    pub fn with_restrictions(
        regressors: Vec<DMatrix<f64>>,
        ties: &[((usize, usize), (usize, usize))],
    ) -> Result<Self> {
        Self::build(regressors, ties)
    }

    fn build(
        regressors: Vec<DMatrix<f64>>,
        ties: &[((usize, usize), (usize, usize))],
    ) -> Result<Self> {
        if regressors.is_empty() {
            return Err(Error::InconsistentInputs {
                reason: "a SUR design needs at least one equation".into(),
            });
        }
        let n = regressors[0].nrows();
        for (m, x) in regressors.iter().enumerate() {
            if x.nrows() != n {
                return Err(Error::DimensionMismatch {
                    context: format!("equation {} regressor rows", m + 1),
                    expected: n,
                    got: x.nrows(),
                });
            }
        }
        // Union-find over local coefficient slots.
        let slot_offsets: Vec<usize> = regressors
            .iter()
            .scan(0usize, |acc, x| {
                let start = *acc;
                *acc += x.ncols() + 1;
                Some(start)
            })
            .collect();
        let total_slots: usize = regressors.iter().map(|x| x.ncols() + 1).sum();
        let mut parent: Vec<usize> = (0..total_slots).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &((m, c), (j, d)) in ties {
            let check = |eq: usize, local: usize| -> Result<usize> {
                if eq >= regressors.len() || local > regressors[eq].ncols() {
                    return Err(Error::InconsistentInputs {
                        reason: format!(
                            "restriction names coefficient {local} of equation {}, \
                             which does not exist",
                            eq + 1
                        ),
                    });
                }
                Ok(slot_offsets[eq] + local)
            };
            let (a, b) = (check(m, c)?, check(j, d)?);
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut slot_id = vec![usize::MAX; total_slots];
        let mut next = 0usize;
        for s in 0..total_slots {
            let root = find(&mut parent, s);
            if slot_id[root] == usize::MAX {
                slot_id[root] = next;
                next += 1;
            }
            slot_id[s] = slot_id[root];
        }
        let coeff_map: Vec<Vec<usize>> = regressors
            .iter()
            .enumerate()
            .map(|(m, x)| {
                (0..=x.ncols())
                    .map(|c| slot_id[slot_offsets[m] + c])
                    .collect()
            })
            .collect();
        Ok(SurDesign {
            regressors,
            coeff_map,
            n_coeffs: next,
            restricted: !ties.is_empty(),
        })
    }

    /// Number of equations M.
    pub fn n_eqs(&self) -> usize {
        self.regressors.len()
    }

    /// Stacked coefficient count K (shared slots counted once).
    pub fn n_coeffs(&self) -> usize {
        self.n_coeffs
    }

    /// Local coefficient count of equation `m`, intercept included.
    pub fn k_m(&self, m: usize) -> usize {
        self.regressors[m].ncols() + 1
    }

    pub fn is_restricted(&self) -> bool {
        self.restricted
    }

    /// Regressors of equation `m`, intercept excluded.
    pub fn regressors(&self, m: usize) -> &DMatrix<f64> {
        &self.regressors[m]
    }

    /// Global slot of local coefficient `c` of equation `m` (0 = intercept).
    pub fn coeff_slot(&self, m: usize, c: usize) -> usize {
        self.coeff_map[m][c]
    }

    /// The M x K regressor block of observation row `r`.
    pub fn row_block(&self, r: usize) -> DMatrix<f64> {
        let m_eqs = self.n_eqs();
        let mut block = DMatrix::zeros(m_eqs, self.n_coeffs);
        for m in 0..m_eqs {
            block[(m, self.coeff_map[m][0])] += 1.0;
            for c in 0..self.regressors[m].ncols() {
                block[(m, self.coeff_map[m][c + 1])] += self.regressors[m][(r, c)];
            }
        }
        block
    }
}

/// Per-equation Within fits and centered residuals of a SUR system.
#[derive(Debug, Clone)]
pub struct SurResiduals {
    pub fits: Vec<WithinFit>,
    /// Centered residuals f_m = e_m - mean(e_m), one vector per equation.
    pub centered: Vec<DVector<f64>>,
}

/// Equation-by-equation Within fits; restrictions never enter this stage.
pub fn sur_within_residuals(
    design: &SurDesign,
    ys: &[DVector<f64>],
    proj: &WithinProjector,
) -> Result<SurResiduals> {
    if ys.len() != design.n_eqs() {
        return Err(Error::DimensionMismatch {
            context: "response vectors per equation".into(),
            expected: design.n_eqs(),
            got: ys.len(),
        });
    }
    let mut fits = Vec::with_capacity(design.n_eqs());
    let mut centered = Vec::with_capacity(design.n_eqs());
    for (m, y) in ys.iter().enumerate() {
        let fit = within_fit(design.regressors(m), y, proj).map_err(|e| match e {
            Error::RankDeficient { context, columns } => Error::RankDeficient {
                context: format!("equation {}: {context}", m + 1),
                columns,
            },
            other => other,
        })?;
        centered.push(center(&fit.residuals));
        fits.push(fit);
    }
    Ok(SurResiduals { fits, centered })
}

/// Flags for matrix-level adjustments applied to stored component matrices.
#[derive(Debug, Clone, Default)]
pub struct RepairFlags {
    /// Negative diagonal entries truncated at zero, per matrix kind.
    pub diagonal_clips: usize,
    /// Matrices whose eigenvalues needed clamping or diagonal flooring.
    pub repaired: Vec<String>,
}

/// SUR-system covariance components: pooled M x M matrices plus per-stratum
/// matrices where the regime makes them stratum-specific.
#[derive(Debug, Clone)]
pub struct SurComponents {
    pub procedure: SurProcedure,
    pub regime: Regime,
    pub sigma_u: DMatrix<f64>,
    pub sigma_mu: DMatrix<f64>,
    pub sigma_nu: DMatrix<f64>,
    /// Per-stratum idiosyncratic covariance (empty when pooled).
    pub psi: Vec<DMatrix<f64>>,
    /// Per-stratum individual-effect covariance (empty when pooled).
    pub phi: Vec<DMatrix<f64>>,
    /// Raw (pre-repair) estimates, same layout.
    pub raw_sigma_u: DMatrix<f64>,
    pub raw_sigma_mu: DMatrix<f64>,
    pub raw_sigma_nu: DMatrix<f64>,
    pub raw_psi: Vec<DMatrix<f64>>,
    pub raw_phi: Vec<DMatrix<f64>>,
    pub repair: RepairFlags,
}

impl SurComponents {
    pub fn n_eqs(&self) -> usize {
        self.sigma_u.nrows()
    }

    /// Idiosyncratic covariance of stratum `a` under the regime.
    pub fn psi_of(&self, a: usize) -> &DMatrix<f64> {
        if self.psi.is_empty() {
            &self.sigma_u
        } else {
            &self.psi[a]
        }
    }

    /// Individual-effect covariance of stratum `a` under the regime.
    pub fn phi_of(&self, a: usize) -> &DMatrix<f64> {
        if self.phi.is_empty() {
            &self.sigma_mu
        } else {
            &self.phi[a]
        }
    }
}

/// Symmetrize, truncate negative variances, clamp negative eigenvalues, and
/// floor the diagonal so downstream covariance blocks stay invertible.
fn repair_matrix(m: &DMatrix<f64>, name: &str, flags: &mut RepairFlags) -> DMatrix<f64> {
    let mut sym = (m + m.transpose()) * 0.5;
    let k = sym.nrows();
    let mut touched = false;
    for d in 0..k {
        if sym[(d, d)] < 0.0 {
            sym[(d, d)] = 0.0;
            flags.diagonal_clips += 1;
            touched = true;
        }
    }
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().any(|&v| v < 0.0) {
        let clamped = DVector::from_iterator(k, eig.eigenvalues.iter().map(|&v| v.max(0.0)));
        sym = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        sym = (&sym + sym.transpose()) * 0.5;
        touched = true;
    }
    let trace: f64 = sym.diagonal().sum();
    if trace > 0.0 {
        let floor = 1e-8 * trace;
        for d in 0..k {
            if sym[(d, d)] < floor {
                sym[(d, d)] = floor;
                touched = true;
            }
        }
    }
    if touched {
        flags.repaired.push(name.to_string());
    }
    sym
}

struct PairConstants {
    q_within: f64,
    q_within_stratum: Vec<f64>,
    q_indiv: f64,
    q_indiv_stratum: Vec<f64>,
    q_period: f64,
    k_pair: f64,
    k_pair_stratum: Vec<f64>,
    k_indiv: f64,
    k_indiv_stratum: Vec<f64>,
    k_period: f64,
    k_intercept: f64,
    k_intercept_stratum: Vec<f64>,
}

/// Per-equation precomputations shared across equation pairs.
struct EquationCache {
    qx: DMatrix<f64>,
    xtqx_inv: DMatrix<f64>,
    qf: DVector<f64>,
    fbar_i: DVector<f64>,
    fbar_t: DVector<f64>,
    xbar_i: DMatrix<f64>,
    xbar_t: DMatrix<f64>,
    csum: DVector<f64>,
    csum_stratum: Vec<DVector<f64>>,
    /// Single-equation stratum leverage of this equation's design.
    k_own_stratum: Vec<f64>,
}

fn equation_cache(
    design: &SurDesign,
    resids: &SurResiduals,
    proj: &WithinProjector,
    strata: &StrataAssignment,
    m: usize,
) -> EquationCache {
    let index = proj.index();
    let x = design.regressors(m);
    let fit = &resids.fits[m];
    let k = x.ncols();
    let n = index.n_obs();
    let f = &resids.centered[m];
    let qf = proj.apply(f);

    let mut fbar_i = DVector::zeros(index.n_individuals());
    let mut fbar_t = DVector::zeros(index.n_periods());
    let mut xbar_i = DMatrix::zeros(index.n_individuals(), k);
    let mut xbar_t = DMatrix::zeros(index.n_periods(), k);
    let mut csum = DVector::zeros(k);
    let mut csum_stratum = vec![DVector::zeros(k); strata.n_strata()];
    for r in 0..n {
        let i = index.row_individual()[r];
        let t = index.row_period()[r];
        let a = strata.row_stratum()[r];
        fbar_i[i] += f[r];
        fbar_t[t] += f[r];
        for j in 0..k {
            xbar_i[(i, j)] += x[(r, j)];
            xbar_t[(t, j)] += x[(r, j)];
            csum[j] += x[(r, j)];
            csum_stratum[a][j] += x[(r, j)];
        }
    }
    for i in 0..index.n_individuals() {
        let ti = index.t_i()[i] as f64;
        fbar_i[i] /= ti;
        for j in 0..k {
            xbar_i[(i, j)] /= ti;
        }
    }
    for t in 0..index.n_periods() {
        let nt = index.n_t()[t] as f64;
        fbar_t[t] /= nt;
        for j in 0..k {
            xbar_t[(t, j)] /= nt;
        }
    }

    let b = &fit.qx * &fit.xtqx_inv;
    let mut k_own_stratum = vec![0.0f64; strata.n_strata()];
    for (r, &a) in strata.row_stratum().iter().enumerate() {
        let mut acc = 0.0;
        for j in 0..k {
            acc += b[(r, j)] * fit.qx[(r, j)];
        }
        k_own_stratum[a] += acc;
    }

    EquationCache {
        qx: fit.qx.clone(),
        xtqx_inv: fit.xtqx_inv.clone(),
        qf,
        fbar_i,
        fbar_t,
        xbar_i,
        xbar_t,
        csum,
        csum_stratum,
        k_own_stratum,
    }
}

fn pair_constants(
    em: &EquationCache,
    ej: &EquationCache,
    design: &SurDesign,
    index: &PanelIndex,
    strata: &StrataAssignment,
    m: usize,
    j: usize,
) -> PairConstants {
    let n = index.n_obs();
    let n_strata = strata.n_strata();
    let (km, kj) = (design.regressors(m).ncols(), design.regressors(j).ncols());

    let mut q_within = 0.0;
    let mut q_within_stratum = vec![0.0f64; n_strata];
    for (r, &a) in strata.row_stratum().iter().enumerate() {
        let v = ej.qf[r] * em.qf[r];
        q_within += v;
        q_within_stratum[a] += v;
    }

    let mut q_indiv_stratum = vec![0.0f64; n_strata];
    for i in 0..index.n_individuals() {
        q_indiv_stratum[strata.stratum_of(i)] +=
            index.t_i()[i] as f64 * ej.fbar_i[i] * em.fbar_i[i];
    }
    let q_indiv = q_indiv_stratum.iter().sum();
    let q_period = (0..index.n_periods())
        .map(|t| index.n_t()[t] as f64 * ej.fbar_t[t] * em.fbar_t[t])
        .sum();

    // cross = X_m' Q X_j; gain = A_m cross A_j.
    let cross = em.qx.transpose() * design.regressors(j);
    let gain = &em.xtqx_inv * &cross * &ej.xtqx_inv; // km x kj

    let k_pair = (&gain * cross.transpose()).trace();

    // Σ_{r in a} (Q X_j)_r' (Q X_m)_r, contracted against `gain`.
    let mut k_pair_stratum = vec![0.0f64; n_strata];
    for (r, &a) in strata.row_stratum().iter().enumerate() {
        let mut acc = 0.0;
        for p in 0..km {
            for q in 0..kj {
                acc += gain[(p, q)] * ej.qx[(r, q)] * em.qx[(r, p)];
            }
        }
        k_pair_stratum[a] += acc;
    }

    // Individual-mean and period-mean weighted cross-products.
    let mut k_indiv_stratum = vec![0.0f64; n_strata];
    for i in 0..index.n_individuals() {
        let w = index.t_i()[i] as f64;
        let mut acc = 0.0;
        for p in 0..km {
            for q in 0..kj {
                acc += gain[(p, q)] * ej.xbar_i[(i, q)] * em.xbar_i[(i, p)];
            }
        }
        k_indiv_stratum[strata.stratum_of(i)] += w * acc;
    }
    let k_indiv = k_indiv_stratum.iter().sum();
    let mut k_period = 0.0;
    for t in 0..index.n_periods() {
        let w = index.n_t()[t] as f64;
        let mut acc = 0.0;
        for p in 0..km {
            for q in 0..kj {
                acc += gain[(p, q)] * ej.xbar_t[(t, q)] * em.xbar_t[(t, p)];
            }
        }
        k_period += w * acc;
    }

    let nf = n as f64;
    let bilinear = |u: &DVector<f64>, v: &DVector<f64>| -> f64 {
        let mut acc = 0.0;
        for p in 0..km {
            for q in 0..kj {
                acc += u[p] * gain[(p, q)] * v[q];
            }
        }
        acc
    };
    let k_intercept = bilinear(&em.csum, &ej.csum) / nf;
    let k_intercept_stratum: Vec<f64> = (0..n_strata)
        .map(|a| {
            (bilinear(&em.csum_stratum[a], &ej.csum) + bilinear(&em.csum, &ej.csum_stratum[a]))
                / nf
        })
        .collect();

    PairConstants {
        q_within,
        q_within_stratum,
        q_indiv,
        q_indiv_stratum,
        q_period,
        k_pair,
        k_pair_stratum,
        k_indiv,
        k_indiv_stratum,
        k_period,
        k_intercept,
        k_intercept_stratum,
    }
}

/// Quadratic unbiased estimation of the SUR covariance components.
pub fn que_sur_components(
    design: &SurDesign,
    resids: &SurResiduals,
    proj: &WithinProjector,
    inc: &IncidenceSet,
    regime: Regime,
) -> Result<SurComponents> {
    let index = proj.index();
    let strata = inc.strata();
    let m_eqs = design.n_eqs();
    let n_strata = strata.n_strata();
    let n = index.n_obs() as f64;
    let n_ind = index.n_individuals() as f64;
    let t_len = index.n_periods() as f64;
    let rank_core = proj.core_rank() as f64;

    let caches: Vec<EquationCache> = (0..m_eqs)
        .map(|m| equation_cache(design, resids, proj, strata, m))
        .collect();

    let diag = proj.diagonal();
    let mut tau = vec![0.0f64; n_strata];
    for a in 0..n_strata {
        let trace_a: f64 = strata.rows(a).iter().map(|&r| diag[r]).sum();
        tau[a] = strata.obs_counts()[a] as f64 - strata.individuals(a).len() as f64 - trace_a;
    }
    let lambda_mu = inc.lambda_mu();
    let lambda_nu = inc.lambda_nu();
    let lambda_mu_a: Vec<f64> = (0..n_strata).map(|a| inc.lambda_mu_a(a)).collect();
    let lambda_nu_a: Vec<f64> = (0..n_strata).map(|a| inc.lambda_nu_a(a)).collect();

    let mut sigma_u = DMatrix::zeros(m_eqs, m_eqs);
    let mut sigma_mu = DMatrix::zeros(m_eqs, m_eqs);
    let mut sigma_nu = DMatrix::zeros(m_eqs, m_eqs);
    let mut psi = vec![DMatrix::zeros(m_eqs, m_eqs); n_strata];
    let mut phi = vec![DMatrix::zeros(m_eqs, m_eqs); n_strata];

    for m in 0..m_eqs {
        for j in m..m_eqs {
            let pc = pair_constants(&caches[m], &caches[j], design, index, strata, m, j);
            let km = design.regressors(m).ncols() as f64;
            let kj = design.regressors(j).ncols() as f64;
            let dof = n - n_ind - rank_core - km - kj + pc.k_pair;
            let su = pc.q_within / dof;
            sigma_u[(m, j)] = su;
            sigma_u[(j, m)] = su;

            // Pooled individual/period covariances from the two-moment system.
            let rhs_n = pc.q_indiv - (n_ind + pc.k_indiv - pc.k_intercept - 1.0) * su;
            let rhs_t = pc.q_period - (t_len + pc.k_period - pc.k_intercept - 1.0) * su;
            let a11 = n - lambda_mu;
            let a12 = n_ind - lambda_nu;
            let a21 = t_len - lambda_mu;
            let a22 = n - lambda_nu;
            let det = a11 * a22 - a12 * a21;
            let smu = (rhs_n * a22 - a12 * rhs_t) / det;
            let snu = (a11 * rhs_t - rhs_n * a21) / det;
            sigma_mu[(m, j)] = smu;
            sigma_mu[(j, m)] = smu;
            sigma_nu[(m, j)] = snu;
            sigma_nu[(j, m)] = snu;

            if regime.heteroscedastic_u() {
                for a in 0..n_strata {
                    let n_a = strata.obs_counts()[a] as f64;
                    let cap_n_a = strata.individuals(a).len() as f64;
                    let denom = n_a - cap_n_a - tau[a];
                    if denom <= 1e-9 {
                        return Err(Error::DegenerateStratum {
                            stratum: a + 1,
                            reason: format!(
                                "within-variation denominator {denom:.3e} is nonpositive"
                            ),
                        });
                    }
                    let corr = caches[m].k_own_stratum[a] + caches[j].k_own_stratum[a]
                        - pc.k_pair_stratum[a];
                    let v = (pc.q_within_stratum[a] + corr * su) / denom;
                    psi[a][(m, j)] = v;
                    psi[a][(j, m)] = v;
                }
            }
            if regime.heteroscedastic_mu() {
                for a in 0..n_strata {
                    let n_a = strata.obs_counts()[a] as f64;
                    let cap_n_a = strata.individuals(a).len() as f64;
                    let share = n_a / n;
                    let denom = n_a - 2.0 * lambda_mu_a[a];
                    if denom <= 1e-9 {
                        return Err(Error::DegenerateStratum {
                            stratum: a + 1,
                            reason: format!(
                                "individual-mean denominator {denom:.3e} is nonpositive"
                            ),
                        });
                    }
                    let nu_term =
                        (cap_n_a - 2.0 * lambda_nu_a[a] + share * lambda_nu) * snu;
                    let mu_term = share * lambda_mu * smu;
                    let numer = if regime == Regime::HeteroBoth {
                        pc.q_indiv_stratum[a]
                            - (cap_n_a - 2.0 * share) * psi[a][(m, j)]
                            - (pc.k_indiv_stratum[a] - pc.k_intercept_stratum[a]
                                + share * pc.k_intercept
                                + share)
                                * su
                            - mu_term
                            - nu_term
                    } else {
                        pc.q_indiv_stratum[a]
                            - (cap_n_a + pc.k_indiv_stratum[a] - pc.k_intercept_stratum[a]
                                + share * pc.k_intercept
                                - share)
                                * su
                            - mu_term
                            - nu_term
                    };
                    let v = numer / denom;
                    phi[a][(m, j)] = v;
                    phi[a][(j, m)] = v;
                }
            }
        }
    }

    finalize_components(
        SurProcedure::Que,
        regime,
        sigma_u,
        sigma_mu,
        sigma_nu,
        psi,
        phi,
    )
}

/// Within/between residual-moment estimation of the SUR covariance
/// components.
pub fn wb_sur_components(
    design: &SurDesign,
    resids: &SurResiduals,
    index: &PanelIndex,
    strata: &StrataAssignment,
    regime: Regime,
) -> Result<SurComponents> {
    let m_eqs = design.n_eqs();
    let n_strata = strata.n_strata();
    let n = index.n_obs();
    let nf = n as f64;
    let n_ind = index.n_individuals() as f64;
    let t_len = index.n_periods() as f64;

    // Residual means per equation.
    let mut fbar_i: DMatrix<f64> = DMatrix::zeros(index.n_individuals(), m_eqs);
    let mut fbar_t: DMatrix<f64> = DMatrix::zeros(index.n_periods(), m_eqs);
    let mut fbar: DVector<f64> = DVector::zeros(m_eqs);
    for m in 0..m_eqs {
        let f = &resids.centered[m];
        for r in 0..n {
            fbar_i[(index.row_individual()[r], m)] += f[r];
            fbar_t[(index.row_period()[r], m)] += f[r];
            fbar[m] += f[r];
        }
    }
    for i in 0..index.n_individuals() {
        let ti = index.t_i()[i] as f64;
        for m in 0..m_eqs {
            fbar_i[(i, m)] /= ti;
        }
    }
    for t in 0..index.n_periods() {
        let nt = index.n_t()[t] as f64;
        for m in 0..m_eqs {
            fbar_t[(t, m)] /= nt;
        }
    }
    fbar /= nf;

    // Within and between (co)variation matrices.
    let mut within_stratum: Vec<DMatrix<f64>> = vec![DMatrix::zeros(m_eqs, m_eqs); n_strata];
    let mut between_indiv_stratum: Vec<DMatrix<f64>> =
        vec![DMatrix::zeros(m_eqs, m_eqs); n_strata];
    let mut between_period: DMatrix<f64> = DMatrix::zeros(m_eqs, m_eqs);
    let mut d: DVector<f64> = DVector::zeros(m_eqs);
    for r in 0..n {
        let i = index.row_individual()[r];
        let t = index.row_period()[r];
        let a = strata.row_stratum()[r];
        for m in 0..m_eqs {
            d[m] = resids.centered[m][r] - fbar_i[(i, m)] - fbar_t[(t, m)];
        }
        within_stratum[a] += &d * d.transpose();
    }
    for i in 0..index.n_individuals() {
        let a = strata.stratum_of(i);
        for m in 0..m_eqs {
            d[m] = fbar_i[(i, m)] - fbar[m];
        }
        between_indiv_stratum[a] += (&d * d.transpose()) * index.t_i()[i] as f64;
    }
    for t in 0..index.n_periods() {
        for m in 0..m_eqs {
            d[m] = fbar_t[(t, m)] - fbar[m];
        }
        between_period += (&d * d.transpose()) * index.n_t()[t] as f64;
    }
    let within_total = within_stratum
        .iter()
        .fold(DMatrix::zeros(m_eqs, m_eqs), |acc, w| acc + w);
    let between_indiv_total = between_indiv_stratum
        .iter()
        .fold(DMatrix::zeros(m_eqs, m_eqs), |acc, w| acc + w);

    let lambda_mu = index.t_i().iter().map(|&t| (t * t) as f64).sum::<f64>() / nf;
    let lambda_nu = index.n_t().iter().map(|&c| (c * c) as f64).sum::<f64>() / nf;

    let sigma_u = &within_total / (nf - n_ind - t_len);
    let sigma_mu = (&between_indiv_total - &sigma_u * (n_ind - 1.0)) / (nf - lambda_mu);
    let sigma_nu = (&between_period - &sigma_u * (t_len - 1.0)) / (nf - lambda_nu);

    let mut psi = vec![DMatrix::zeros(m_eqs, m_eqs); n_strata];
    let mut phi = vec![DMatrix::zeros(m_eqs, m_eqs); n_strata];
    for a in 0..n_strata {
        let n_a = strata.obs_counts()[a] as f64;
        let cap_n_a = strata.individuals(a).len() as f64;
        if regime.heteroscedastic_u() || regime == Regime::HeteroMu {
            if n_a - cap_n_a <= 0.0 && regime.heteroscedastic_u() {
                return Err(Error::DegenerateStratum {
                    stratum: a + 1,
                    reason: "stratum holds only once-observed individuals".into(),
                });
            }
        }
        // sum over the stratum's observations of 1/N_t.
        let inv_nt_sum: f64 = strata
            .rows(a)
            .iter()
            .map(|&r| 1.0 / index.n_t()[index.row_period()[r]] as f64)
            .sum();
        if regime.heteroscedastic_u() {
            psi[a] = (&within_stratum[a] + &sigma_u * inv_nt_sum) / (n_a - cap_n_a);
        }
        if regime.heteroscedastic_mu() {
            let share = n_a / nf;
            let base = &between_indiv_stratum[a] + &sigma_mu * (share * lambda_mu);
            phi[a] = if regime == Regime::HeteroBoth {
                (base - &psi[a] * cap_n_a + &sigma_u * share) / n_a
            } else {
                (base - &sigma_u * (cap_n_a - share)) / n_a
            };
        }
    }
    if !regime.heteroscedastic_u() {
        psi.clear();
    }
    if !regime.heteroscedastic_mu() {
        phi.clear();
    }

    finalize_components(
        SurProcedure::Wb,
        regime,
        sigma_u,
        sigma_mu,
        sigma_nu,
        psi,
        phi,
    )
}

fn finalize_components(
    procedure: SurProcedure,
    regime: Regime,
    sigma_u: DMatrix<f64>,
    sigma_mu: DMatrix<f64>,
    sigma_nu: DMatrix<f64>,
    mut psi: Vec<DMatrix<f64>>,
    mut phi: Vec<DMatrix<f64>>,
) -> Result<SurComponents> {
    if !regime.heteroscedastic_u() {
        psi.clear();
    }
    if !regime.heteroscedastic_mu() {
        phi.clear();
    }
    let raw_sigma_u = sigma_u.clone();
    let raw_sigma_mu = sigma_mu.clone();
    let raw_sigma_nu = sigma_nu.clone();
    let raw_psi = psi.clone();
    let raw_phi = phi.clone();

    let mut flags = RepairFlags::default();
    let sigma_u = repair_matrix(&sigma_u, "sigma_u", &mut flags);
    let sigma_mu = repair_matrix(&sigma_mu, "sigma_mu", &mut flags);
    let sigma_nu = repair_matrix(&sigma_nu, "sigma_nu", &mut flags);
    let psi: Vec<DMatrix<f64>> = psi
        .iter()
        .enumerate()
        .map(|(a, m)| repair_matrix(m, &format!("psi[{}]", a + 1), &mut flags))
        .collect();
    let phi: Vec<DMatrix<f64>> = phi
        .iter()
        .enumerate()
        .map(|(a, m)| repair_matrix(m, &format!("phi[{}]", a + 1), &mut flags))
        .collect();

    Ok(SurComponents {
        procedure,
        regime,
        sigma_u,
        sigma_mu,
        sigma_nu,
        psi,
        phi,
        raw_sigma_u,
        raw_sigma_mu,
        raw_sigma_nu,
        raw_psi,
        raw_phi,
        repair: flags,
    })
}

/// Error-covariance block of a (stratum, duration) group, carried through
/// its two M x M inverse factors. The pM x pM matrix is never inverted
/// directly.
#[derive(Debug, Clone)]
pub struct OmegaBlock {
    pub stratum: usize,
    pub duration: usize,
    /// (Psi_a + Sigma_nu)^{-1}: weights deviations from individual means.
    pub within_inv: DMatrix<f64>,
    /// (Psi_a + Sigma_nu + p Phi_a)^{-1}: weights the individual means.
    pub between_inv: DMatrix<f64>,
    psi_nu: DMatrix<f64>,
    phi: DMatrix<f64>,
}

impl OmegaBlock {
    /// Assemble the pM x pM covariance densely (tests, small systems).
    pub fn dense(&self) -> DMatrix<f64> {
        let m = self.psi_nu.nrows();
        let p = self.duration;
        let mut out = DMatrix::zeros(p * m, p * m);
        for s in 0..p {
            for t in 0..p {
                for i in 0..m {
                    for j in 0..m {
                        let mut v = self.phi[(i, j)];
                        if s == t {
                            v += self.psi_nu[(i, j)];
                        }
                        out[(s * m + i, t * m + j)] = v;
                    }
                }
            }
        }
        out
    }

    /// The closed-form inverse assembled from the two M x M inverses.
    pub fn dense_inverse(&self) -> DMatrix<f64> {
        let m = self.psi_nu.nrows();
        let p = self.duration;
        let pf = p as f64;
        let mut out = DMatrix::zeros(p * m, p * m);
        for s in 0..p {
            for t in 0..p {
                let e = if s == t { 1.0 - 1.0 / pf } else { -1.0 / pf };
                let jbar = 1.0 / pf;
                for i in 0..m {
                    for j in 0..m {
                        out[(s * m + i, t * m + j)] =
                            e * self.within_inv[(i, j)] + jbar * self.between_inv[(i, j)];
                    }
                }
            }
        }
        out
    }
}

/// Build the covariance block of stratum `a`, duration `p`.
pub fn omega_block(components: &SurComponents, a: usize, p: usize) -> Result<OmegaBlock> {
    let psi_nu = components.psi_of(a) + &components.sigma_nu;
    let phi = components.phi_of(a).clone();
    let within_inv = spd_inverse(&psi_nu).ok_or_else(|| Error::NotPositiveDefinite {
        context: format!("within factor of stratum {}, duration {p}", a + 1),
    })?;
    let full = &psi_nu + &phi * p as f64;
    let between_inv = spd_inverse(&full).ok_or_else(|| Error::NotPositiveDefinite {
        context: format!("between factor of stratum {}, duration {p}", a + 1),
    })?;
    Ok(OmegaBlock {
        stratum: a,
        duration: p,
        within_inv,
        between_inv,
        psi_nu,
        phi,
    })
}

fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    Cholesky::new(sym).map(|c| c.inverse())
}

/// Sum a list of matrices pairwise to keep the reduction order-independent.
fn pairwise_sum(mut items: Vec<DMatrix<f64>>, rows: usize, cols: usize) -> DMatrix<f64> {
    if items.is_empty() {
        return DMatrix::zeros(rows, cols);
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut iter = items.into_iter();
        while let Some(first) = iter.next() {
            match iter.next() {
                Some(second) => next.push(first + second),
                None => next.push(first),
            }
        }
        items = next;
    }
    items.pop().unwrap()
}

/// Group-by-duration GLS of the stacked system.
///
/// Groups with no individuals are skipped; the normal equations accumulate
/// per group and reduce pairwise.
pub fn sur_gls(
    design: &SurDesign,
    ys: &[DVector<f64>],
    components: &SurComponents,
    index: &PanelIndex,
    strata: &StrataAssignment,
) -> Result<FitReport> {
    let m_eqs = design.n_eqs();
    if ys.len() != m_eqs {
        return Err(Error::DimensionMismatch {
            context: "response vectors per equation".into(),
            expected: m_eqs,
            got: ys.len(),
        });
    }
    let k_total = design.n_coeffs();
    let mut normal_parts: Vec<DMatrix<f64>> = Vec::new();
    let mut rhs_parts: Vec<DMatrix<f64>> = Vec::new();

    for a in 0..strata.n_strata() {
        for (p, group) in index.duration_groups() {
            let members: Vec<usize> = group
                .iter()
                .copied()
                .filter(|&i| strata.stratum_of(i) == a)
                .collect();
            if members.is_empty() {
                continue; // empty (stratum, duration) cell
            }
            let block = omega_block(components, a, p)?;
            let mut g = DMatrix::zeros(k_total, k_total);
            let mut rhs = DMatrix::zeros(k_total, 1);
            let pf = p as f64;
            for &i in &members {
                let rows: Vec<usize> = index.rows_of(i).collect();
                let xs: Vec<DMatrix<f64>> = rows.iter().map(|&r| design.row_block(r)).collect();
                let yv: Vec<DVector<f64>> = rows
                    .iter()
                    .map(|&r| DVector::from_fn(m_eqs, |m, _| ys[m][r]))
                    .collect();
                let mut x_mean = DMatrix::zeros(m_eqs, k_total);
                let mut y_mean = DVector::zeros(m_eqs);
                for t in 0..p {
                    x_mean += &xs[t];
                    y_mean += &yv[t];
                }
                x_mean /= pf;
                y_mean /= pf;
                for t in 0..p {
                    let dx = &xs[t] - &x_mean;
                    let dy = &yv[t] - &y_mean;
                    let wdx = &block.within_inv * &dx;
                    g += dx.transpose() * &wdx;
                    rhs += dx.transpose() * (&block.within_inv * dy);
                }
                let bx = &block.between_inv * &x_mean;
                g += x_mean.transpose() * &bx * pf;
                rhs += x_mean.transpose() * (&block.between_inv * &y_mean) * pf;
            }
            normal_parts.push(g);
            rhs_parts.push(rhs);
        }
    }

    let normal = pairwise_sum(normal_parts, k_total, k_total);
    let rhs = pairwise_sum(rhs_parts, k_total, 1);
    let sym = (&normal + normal.transpose()) * 0.5;
    let chol = Cholesky::new(sym).ok_or_else(|| Error::RankDeficient {
        context: "SUR normal equations".into(),
        columns: Vec::new(),
    })?;
    let covariance = chol.inverse();
    let beta_mat = &covariance * rhs;
    let beta = DVector::from_column_slice(beta_mat.column(0).as_slice());
    let standard_errors = covariance.diagonal().map(|v| v.max(0.0).sqrt());
    Ok(FitReport {
        beta,
        covariance,
        standard_errors,
        components: None,
        diagnostics: FitDiagnostics {
            n_obs: index.n_obs(),
            n_params: k_total,
            residual_dof: (index.n_obs() * m_eqs) as f64 - k_total as f64,
        },
    })
}
