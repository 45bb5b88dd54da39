//! Single-equation estimators for the stratified two-way error-component
//! model: Within fit, classical and robust fixed-effects covariances,
//! quadratic unbiased variance-component estimation under four
//! heteroscedasticity regimes, and feasible GLS.
//!
//! The Within stage consumes the regressor matrix without the intercept; the
//! GLS stage consumes the full matrix including it. The two matrices are
//! passed explicitly so a column mismatch cannot slip through silently.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::panel::{IncidenceSet, StrataAssignment};
use crate::projections::{center, WithinProjector};

/// Which error components are allowed stratum-specific variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    /// Pooled variances for every component.
    Homoscedastic,
    /// Stratum-specific idiosyncratic variance only.
    HeteroU,
    /// Stratum-specific individual-effect variance only.
    HeteroMu,
    /// Both the idiosyncratic and the individual-effect variances vary.
    HeteroBoth,
}

impl Regime {
    /// All four regimes, in the order used by the simulation tables.
    pub const ALL: [Regime; 4] = [
        Regime::Homoscedastic,
        Regime::HeteroU,
        Regime::HeteroMu,
        Regime::HeteroBoth,
    ];

    pub fn heteroscedastic_u(self) -> bool {
        matches!(self, Regime::HeteroU | Regime::HeteroBoth)
    }

    pub fn heteroscedastic_mu(self) -> bool {
        matches!(self, Regime::HeteroMu | Regime::HeteroBoth)
    }

    pub fn label(self) -> &'static str {
        match self {
            Regime::Homoscedastic => "homoscedastic",
            Regime::HeteroU => "hetero_u",
            Regime::HeteroMu => "hetero_mu",
            Regime::HeteroBoth => "hetero_both",
        }
    }
}

/// Flags recording which raw estimates were truncated at zero.
#[derive(Debug, Clone, Default)]
pub struct ClipFlags {
    pub sigma2_mu: bool,
    pub sigma2_nu: bool,
    pub psi2: Vec<bool>,
    pub phi2: Vec<bool>,
}

impl ClipFlags {
    pub fn any(&self) -> bool {
        self.sigma2_mu
            || self.sigma2_nu
            || self.psi2.iter().any(|&c| c)
            || self.phi2.iter().any(|&c| c)
    }
}

/// Estimated variance components under a declared regime.
///
/// Stored values are nonnegative; raw (pre-truncation) estimates are kept for
/// reporting. `psi2`/`phi2` are empty when the regime pools that component.
#[derive(Debug, Clone)]
pub struct VarianceComponents {
    pub regime: Regime,
    pub sigma2_u: f64,
    pub sigma2_mu: f64,
    pub sigma2_nu: f64,
    /// Per-stratum idiosyncratic variances.
    pub psi2: Vec<f64>,
    /// Per-stratum individual-effect variances.
    pub phi2: Vec<f64>,
    /// Raw estimates before truncation, same layout.
    pub raw_sigma2_mu: f64,
    pub raw_sigma2_nu: f64,
    pub raw_psi2: Vec<f64>,
    pub raw_phi2: Vec<f64>,
    pub clipped: ClipFlags,
}

impl VarianceComponents {
    /// Assemble components from raw estimates, truncating negatives at zero.
    pub fn from_raw(
        regime: Regime,
        sigma2_u: f64,
        sigma2_mu: f64,
        sigma2_nu: f64,
        psi2: Vec<f64>,
        phi2: Vec<f64>,
    ) -> Self {
        let clip = |v: f64| if v < 0.0 { (0.0, true) } else { (v, false) };
        let (s_mu, c_mu) = clip(sigma2_mu);
        let (s_nu, c_nu) = clip(sigma2_nu);
        let mut flags = ClipFlags {
            sigma2_mu: c_mu,
            sigma2_nu: c_nu,
            ..Default::default()
        };
        let psi2_clipped: Vec<f64> = psi2
            .iter()
            .map(|&v| {
                let (x, c) = clip(v);
                flags.psi2.push(c);
                x
            })
            .collect();
        let phi2_clipped: Vec<f64> = phi2
            .iter()
            .map(|&v| {
                let (x, c) = clip(v);
                flags.phi2.push(c);
                x
            })
            .collect();
        VarianceComponents {
            regime,
            sigma2_u: sigma2_u.max(0.0),
            sigma2_mu: s_mu,
            sigma2_nu: s_nu,
            psi2: psi2_clipped,
            phi2: phi2_clipped,
            raw_sigma2_mu: sigma2_mu,
            raw_sigma2_nu: sigma2_nu,
            raw_psi2: psi2,
            raw_phi2: phi2,
            clipped: flags,
        }
    }

    /// Idiosyncratic variance of stratum `a` under this regime.
    pub fn psi2_of(&self, a: usize) -> f64 {
        if self.psi2.is_empty() {
            self.sigma2_u
        } else {
            self.psi2[a]
        }
    }

    /// Individual-effect variance of stratum `a` under this regime.
    pub fn phi2_of(&self, a: usize) -> f64 {
        if self.phi2.is_empty() {
            self.sigma2_mu
        } else {
            self.phi2[a]
        }
    }
}

/// Degrees-of-freedom constants recorded with every fit.
#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    pub n_obs: usize,
    pub n_params: usize,
    pub residual_dof: f64,
}

/// Coefficients, covariance, and standard errors of a fit.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub beta: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub standard_errors: DVector<f64>,
    /// Variance components behind the weighting (GLS fits only).
    pub components: Option<VarianceComponents>,
    pub diagnostics: FitDiagnostics,
}

/// A Within fit plus the intermediates reused by the robust covariances and
/// the variance-component estimators.
#[derive(Debug, Clone)]
pub struct WithinFit {
    pub beta: DVector<f64>,
    /// Classical covariance: sigma2_u (X' Q X)^{-1}.
    pub covariance: DMatrix<f64>,
    pub standard_errors: DVector<f64>,
    pub sigma2_u: f64,
    /// Raw residuals e = y - X beta (no demeaning applied).
    pub residuals: DVector<f64>,
    /// (X' Q X)^{-1}.
    pub xtqx_inv: DMatrix<f64>,
    /// Q X, the transformed design.
    pub qx: DMatrix<f64>,
    /// Residual degrees of freedom n - N - rank(core) - (k-1).
    pub dof: f64,
}

impl WithinFit {
    pub fn report(&self) -> FitReport {
        FitReport {
            beta: self.beta.clone(),
            covariance: self.covariance.clone(),
            standard_errors: self.standard_errors.clone(),
            components: None,
            diagnostics: FitDiagnostics {
                n_obs: self.residuals.len(),
                n_params: self.beta.len(),
                residual_dof: self.dof,
            },
        }
    }
}

fn suspect_columns(a: &DMatrix<f64>) -> Vec<usize> {
    let k = a.ncols();
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let max_diag = (0..k).fold(0.0f64, |acc, j| acc.max(r[(j, j)].abs()));
    let tol = 1e-12 * max_diag.max(1.0);
    // Track where each original column lands under the pivot permutation.
    let mut order = DMatrix::from_fn(1, k, |_, j| j as f64);
    qr.p().permute_columns(&mut order);
    (0..k)
        .filter(|&j| r[(j, j)].abs() <= tol)
        .map(|j| order[(0, j)] as usize)
        .collect()
}

fn spd_solve(a: &DMatrix<f64>, context: &str) -> Result<(Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>)> {
    let sym = (a + a.transpose()) * 0.5;
    match Cholesky::new(sym) {
        Some(chol) => {
            let inv = chol.inverse();
            Ok((chol, inv))
        }
        None => Err(Error::RankDeficient {
            context: context.to_string(),
            columns: suspect_columns(a),
        }),
    }
}

/// Fit the Within estimator.
///
/// `x` must exclude the intercept (it lies in the span the projector
/// annihilates); `k - 1` regressor columns are expected.
pub fn within_fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    proj: &WithinProjector,
) -> Result<WithinFit> {
    let n = proj.index().n_obs();
    if x.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "within_fit design rows".into(),
            expected: n,
            got: x.nrows(),
        });
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            context: "within_fit response length".into(),
            expected: n,
            got: y.len(),
        });
    }
    let qx = proj.apply_mat(x);
    let xtqx = x.transpose() * &qx;
    let (_, xtqx_inv) = spd_solve(&xtqx, "within regressor cross-product (intercept excluded)")?;
    let xtqy = qx.transpose() * y;
    let beta = &xtqx_inv * xtqy;
    let residuals = y - x * &beta;

    let f = center(&residuals);
    let qf = proj.apply(&f);
    let q_within = f.dot(&qf);
    let dof = n as f64
        - proj.index().n_individuals() as f64
        - proj.core_rank() as f64
        - x.ncols() as f64;
    if dof <= 0.0 {
        return Err(Error::SingularStructure {
            reason: format!("nonpositive residual degrees of freedom ({dof})"),
        });
    }
    let sigma2_u = q_within / dof;
    let covariance = &xtqx_inv * sigma2_u;
    let standard_errors = covariance.diagonal().map(|v| v.max(0.0).sqrt());

    Ok(WithinFit {
        beta,
        covariance,
        standard_errors,
        sigma2_u,
        residuals,
        xtqx_inv,
        qx,
        dof,
    })
}

/// Score of one cluster of rows: sum over the cluster of the transformed
/// regressor row times the transformed residual.
fn cluster_score(qx: &DMatrix<f64>, qe: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    let k = qx.ncols();
    let mut score = DVector::zeros(k);
    for &r in rows {
        for j in 0..k {
            score[j] += qx[(r, j)] * qe[r];
        }
    }
    score
}

/// Robust (sandwich) covariance of the Within estimator, stacking the
/// within-transformed observations by individual.
///
/// Both the design and the residuals enter fully transformed (Q X and Q e);
/// clustering only groups the rows. Under a pooled idiosyncratic variance
/// this converges to the classical covariance.
pub fn fe_robust_by_individual(
    fit: &WithinFit,
    proj: &WithinProjector,
) -> Result<DMatrix<f64>> {
    let k = fit.qx.ncols();
    let qe = proj.apply(&fit.residuals);
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..proj.index().n_individuals() {
        let rows: Vec<usize> = proj.index().rows_of(i).collect();
        let s = cluster_score(&fit.qx, &qe, &rows);
        meat += &s * s.transpose();
    }
    Ok(&fit.xtqx_inv * meat * &fit.xtqx_inv)
}

/// Robust (sandwich) covariance of the Within estimator, stacking the
/// within-transformed observations by stratum.
pub fn fe_robust_by_stratum(
    fit: &WithinFit,
    proj: &WithinProjector,
    strata: &StrataAssignment,
) -> Result<DMatrix<f64>> {
    let k = fit.qx.ncols();
    let qe = proj.apply(&fit.residuals);
    let mut meat = DMatrix::zeros(k, k);
    for a in 0..strata.n_strata() {
        let s = cluster_score(&fit.qx, &qe, strata.rows(a));
        meat += &s * s.transpose();
    }
    Ok(&fit.xtqx_inv * meat * &fit.xtqx_inv)
}

/// Quadratic residual statistics and trace constants entering the
/// variance-component estimators.
#[derive(Debug, Clone)]
pub struct QueStatistics {
    /// f' Q f and its per-stratum decomposition.
    pub q_within: f64,
    pub q_within_stratum: Vec<f64>,
    /// sum_i T_i fbar_i^2 and its per-stratum decomposition.
    pub q_indiv: f64,
    pub q_indiv_stratum: Vec<f64>,
    /// sum_t N_t fbar_t^2.
    pub q_period: f64,
    /// Leverage of the transformed design inside each stratum; sums to k-1.
    pub k_within_stratum: Vec<f64>,
    /// Period-coupling trace deficit per stratum; sums to rank(core) = T-1.
    pub tau_stratum: Vec<f64>,
    pub k_indiv: f64,
    pub k_period: f64,
    pub k_intercept: f64,
    pub k_indiv_stratum: Vec<f64>,
    pub k_intercept_stratum: Vec<f64>,
    pub lambda_indiv: f64,
    pub lambda_period: f64,
    pub lambda_indiv_stratum: Vec<f64>,
    pub lambda_period_stratum: Vec<f64>,
    pub residual_dof: f64,
}

/// Compute the quadratic statistics and trace constants for a Within fit.
pub fn que_statistics(
    x: &DMatrix<f64>,
    fit: &WithinFit,
    proj: &WithinProjector,
    inc: &IncidenceSet,
) -> Result<QueStatistics> {
    let index = proj.index();
    let strata = inc.strata();
    let n = index.n_obs();
    let n_strata = strata.n_strata();
    let k = x.ncols();

    let f = center(&fit.residuals);
    let qf = proj.apply(&f);
    let q_within = f.dot(&qf);
    let mut q_within_stratum = vec![0.0f64; n_strata];
    for (r, &a) in strata.row_stratum().iter().enumerate() {
        q_within_stratum[a] += qf[r] * qf[r];
    }

    // Individual and period means of f.
    let mut fbar_i = vec![0.0f64; index.n_individuals()];
    let mut fbar_t = vec![0.0f64; index.n_periods()];
    for r in 0..n {
        fbar_i[index.row_individual()[r]] += f[r];
        fbar_t[index.row_period()[r]] += f[r];
    }
    for (i, v) in fbar_i.iter_mut().enumerate() {
        *v /= index.t_i()[i] as f64;
    }
    for (t, v) in fbar_t.iter_mut().enumerate() {
        *v /= index.n_t()[t] as f64;
    }
    let mut q_indiv_stratum = vec![0.0f64; n_strata];
    for i in 0..index.n_individuals() {
        q_indiv_stratum[strata.stratum_of(i)] += index.t_i()[i] as f64 * fbar_i[i] * fbar_i[i];
    }
    let q_indiv = q_indiv_stratum.iter().sum();
    let q_period = fbar_t
        .iter()
        .zip(index.n_t())
        .map(|(&fb, &ct)| ct as f64 * fb * fb)
        .sum();

    // Stratum leverage of the transformed design: rows of QX weighted by
    // (X'QX)^{-1}.
    let b = &fit.qx * &fit.xtqx_inv; // n x k
    let mut k_within_stratum = vec![0.0f64; n_strata];
    for (r, &a) in strata.row_stratum().iter().enumerate() {
        let mut acc = 0.0;
        for j in 0..k {
            acc += b[(r, j)] * fit.qx[(r, j)];
        }
        k_within_stratum[a] += acc;
    }

    let diag = proj.diagonal();
    let mut tau_stratum = vec![0.0f64; n_strata];
    for a in 0..n_strata {
        let trace_a: f64 = strata.rows(a).iter().map(|&r| diag[r]).sum();
        tau_stratum[a] =
            strata.obs_counts()[a] as f64 - strata.individuals(a).len() as f64 - trace_a;
    }

    // Individual/period means of the raw regressors.
    let mut xbar_i = DMatrix::zeros(index.n_individuals(), k);
    let mut xbar_t = DMatrix::zeros(index.n_periods(), k);
    for r in 0..n {
        let i = index.row_individual()[r];
        let t = index.row_period()[r];
        for j in 0..k {
            xbar_i[(i, j)] += x[(r, j)];
            xbar_t[(t, j)] += x[(r, j)];
        }
    }
    for i in 0..index.n_individuals() {
        let ti = index.t_i()[i] as f64;
        for j in 0..k {
            xbar_i[(i, j)] /= ti;
        }
    }
    for t in 0..index.n_periods() {
        let nt = index.n_t()[t] as f64;
        for j in 0..k {
            xbar_t[(t, j)] /= nt;
        }
    }

    let quad = |v: &[f64]| -> f64 {
        let mut acc = 0.0;
        for p in 0..k {
            let mut row = 0.0;
            for q in 0..k {
                row += fit.xtqx_inv[(p, q)] * v[q];
            }
            acc += row * v[p];
        }
        acc
    };

    let mut k_indiv_stratum = vec![0.0f64; n_strata];
    for i in 0..index.n_individuals() {
        let row: Vec<f64> = (0..k).map(|j| xbar_i[(i, j)]).collect();
        k_indiv_stratum[strata.stratum_of(i)] += index.t_i()[i] as f64 * quad(&row);
    }
    let k_indiv = k_indiv_stratum.iter().sum();
    let mut k_period = 0.0;
    for t in 0..index.n_periods() {
        let row: Vec<f64> = (0..k).map(|j| xbar_t[(t, j)]).collect();
        k_period += index.n_t()[t] as f64 * quad(&row);
    }

    // Column sums of X, overall and per stratum.
    let mut csum = vec![0.0f64; k];
    let mut csum_stratum = vec![vec![0.0f64; k]; n_strata];
    for (r, &a) in strata.row_stratum().iter().enumerate() {
        for j in 0..k {
            csum[j] += x[(r, j)];
            csum_stratum[a][j] += x[(r, j)];
        }
    }
    let nf = n as f64;
    let k_intercept = quad(&csum) / nf;
    let bilinear = |u: &[f64], v: &[f64]| -> f64 {
        let mut acc = 0.0;
        for p in 0..k {
            let mut row = 0.0;
            for q in 0..k {
                row += fit.xtqx_inv[(p, q)] * v[q];
            }
            acc += row * u[p];
        }
        acc
    };
    let k_intercept_stratum: Vec<f64> = csum_stratum
        .iter()
        .map(|ca| 2.0 * bilinear(ca, &csum) / nf)
        .collect();

    let lambda_indiv_stratum: Vec<f64> = (0..n_strata).map(|a| inc.lambda_mu_a(a)).collect();
    let lambda_period_stratum: Vec<f64> = (0..n_strata).map(|a| inc.lambda_nu_a(a)).collect();

    let stats = QueStatistics {
        q_within,
        q_within_stratum,
        q_indiv,
        q_indiv_stratum,
        q_period,
        k_within_stratum,
        tau_stratum,
        k_indiv,
        k_period,
        k_intercept,
        k_indiv_stratum,
        k_intercept_stratum,
        lambda_indiv: inc.lambda_mu(),
        lambda_period: inc.lambda_nu(),
        lambda_indiv_stratum,
        lambda_period_stratum,
        residual_dof: fit.dof,
    };

    // Trace identities; exact up to roundoff for connected panels.
    if proj.is_connected() {
        let k_sum: f64 = stats.k_within_stratum.iter().sum();
        debug_assert!(
            (k_sum - k as f64).abs() <= 1e-6 * (k as f64).max(1.0),
            "stratum leverages must sum to the regressor count ({k_sum} vs {k})"
        );
        let tau_sum: f64 = stats.tau_stratum.iter().sum();
        let t_dof = proj.core_rank() as f64;
        debug_assert!(
            (tau_sum - t_dof).abs() <= 1e-6 * t_dof.max(1.0),
            "stratum trace deficits must sum to rank of the period core"
        );
    }

    Ok(stats)
}

/// Pooled individual/period variances from the two-moment linear system.
///
/// Returns raw (unclipped) `(sigma2_mu, sigma2_nu)`.
fn pooled_mu_nu(stats: &QueStatistics, inc: &IncidenceSet, sigma2_u: f64) -> (f64, f64) {
    let index = inc.index();
    let (n, n_ind, t_len) = (
        index.n_obs() as f64,
        index.n_individuals() as f64,
        index.n_periods() as f64,
    );
    let rhs_n =
        stats.q_indiv - (n_ind + stats.k_indiv - stats.k_intercept - 1.0) * sigma2_u;
    let rhs_t =
        stats.q_period - (t_len + stats.k_period - stats.k_intercept - 1.0) * sigma2_u;
    let a11 = n - stats.lambda_indiv;
    let a12 = n_ind - stats.lambda_period;
    let a21 = t_len - stats.lambda_indiv;
    let a22 = n - stats.lambda_period;
    let det = a11 * a22 - a12 * a21;
    let sigma2_mu = (rhs_n * a22 - a12 * rhs_t) / det;
    let sigma2_nu = (a11 * rhs_t - rhs_n * a21) / det;
    (sigma2_mu, sigma2_nu)
}

/// Estimate variance components from Within residuals under `regime`.
pub fn que_components(
    x: &DMatrix<f64>,
    fit: &WithinFit,
    proj: &WithinProjector,
    inc: &IncidenceSet,
    regime: Regime,
) -> Result<VarianceComponents> {
    let stats = que_statistics(x, fit, proj, inc)?;
    que_components_from_stats(&stats, inc, regime)
}

/// Same as [`que_components`] but reusing precomputed statistics.
pub fn que_components_from_stats(
    stats: &QueStatistics,
    inc: &IncidenceSet,
    regime: Regime,
) -> Result<VarianceComponents> {
    let strata = inc.strata();
    let index = inc.index();
    let n = index.n_obs() as f64;
    let sigma2_u = stats.q_within / stats.residual_dof;
    // Raw pooled estimates feed the per-stratum formulas so the chained
    // moment conditions stay exact; truncation happens at storage time.
    let (raw_mu, raw_nu) = pooled_mu_nu(stats, inc, sigma2_u);

    let mut psi2 = Vec::new();
    if regime.heteroscedastic_u() {
        for a in 0..strata.n_strata() {
            let n_a = strata.obs_counts()[a] as f64;
            let cap_n_a = strata.individuals(a).len() as f64;
            let denom = n_a - cap_n_a - stats.tau_stratum[a];
            if denom <= 1e-9 {
                return Err(Error::DegenerateStratum {
                    stratum: a + 1,
                    reason: format!("within-variation denominator {denom:.3e} is nonpositive"),
                });
            }
            psi2.push((stats.q_within_stratum[a] + stats.k_within_stratum[a] * sigma2_u) / denom);
        }
    }

    let mut phi2 = Vec::new();
    if regime.heteroscedastic_mu() {
        for a in 0..strata.n_strata() {
            let n_a = strata.obs_counts()[a] as f64;
            let cap_n_a = strata.individuals(a).len() as f64;
            let share = n_a / n;
            let denom = n_a - 2.0 * stats.lambda_indiv_stratum[a];
            if denom <= 1e-9 {
                return Err(Error::DegenerateStratum {
                    stratum: a + 1,
                    reason: format!(
                        "individual-mean denominator {denom:.3e} is nonpositive"
                    ),
                });
            }
            let nu_term = (cap_n_a - 2.0 * stats.lambda_period_stratum[a]
                + share * stats.lambda_period)
                * raw_nu;
            let mu_term = share * stats.lambda_indiv * raw_mu;
            let numer = match regime {
                Regime::HeteroBoth => {
                    // Uses the stratum's own idiosyncratic variance.
                    let psi_a = psi2[a];
                    stats.q_indiv_stratum[a]
                        - (cap_n_a - 2.0 * share) * psi_a
                        - (stats.k_indiv_stratum[a] - stats.k_intercept_stratum[a]
                            + share * stats.k_intercept
                            + share)
                            * sigma2_u
                        - mu_term
                        - nu_term
                }
                Regime::HeteroMu => {
                    // Pooled idiosyncratic variance absorbs both correction terms.
                    stats.q_indiv_stratum[a]
                        - (cap_n_a + stats.k_indiv_stratum[a] - stats.k_intercept_stratum[a]
                            + share * stats.k_intercept
                            - share)
                            * sigma2_u
                        - mu_term
                        - nu_term
                }
                _ => unreachable!(),
            };
            phi2.push(numer / denom);
        }
    }

    Ok(VarianceComponents::from_raw(
        regime, sigma2_u, raw_mu, raw_nu, psi2, phi2,
    ))
}

/// The composite-error covariance operator with a linear-solve capability.
///
/// The matrix is diag(psi) plus a rank N+T update carrying the individual and
/// period effects, so solves go through the matrix-inversion lemma: one
/// factorization of an (N+T) x (N+T) core instead of anything n x n. Dense
/// assembly stays available for tests.
#[derive(Debug, Clone)]
pub struct Omega {
    components: VarianceComponents,
    row_individual: Vec<usize>,
    row_period: Vec<usize>,
    /// Per-observation idiosyncratic variance after flooring.
    psi_row: DVector<f64>,
    /// Per-individual effect variance (zeros allowed).
    phi_ind: DVector<f64>,
    sigma2_nu: f64,
    /// Active low-rank columns: individual ids then period ids.
    active_ind: Vec<usize>,
    active_per: Vec<usize>,
    core_chol: Option<Cholesky<f64, nalgebra::Dyn>>,
}

impl Omega {
    pub fn components(&self) -> &VarianceComponents {
        &self.components
    }

    fn n(&self) -> usize {
        self.row_individual.len()
    }

    /// Apply the covariance to a vector.
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let n_ind = self.phi_ind.len();
        let t_len = self
            .row_period
            .iter()
            .copied()
            .max()
            .map(|t| t + 1)
            .unwrap_or(0);
        let mut ind_sum = vec![0.0f64; n_ind];
        let mut per_sum = vec![0.0f64; t_len];
        for r in 0..n {
            ind_sum[self.row_individual[r]] += v[r];
            per_sum[self.row_period[r]] += v[r];
        }
        DVector::from_fn(n, |r, _| {
            self.psi_row[r] * v[r]
                + self.phi_ind[self.row_individual[r]] * ind_sum[self.row_individual[r]]
                + self.sigma2_nu * per_sum[self.row_period[r]]
        })
    }

    /// Solve Omega z = v.
    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        let s = self.solve_mat(&m);
        DVector::from_column_slice(s.column(0).as_slice())
    }

    /// Solve Omega Z = V column-wise.
    pub fn solve_mat(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        let c = v.ncols();
        // D^{-1} V
        let mut dinv_v = v.clone();
        for r in 0..n {
            let w = 1.0 / self.psi_row[r];
            for j in 0..c {
                dinv_v[(r, j)] *= w;
            }
        }
        let Some(chol) = &self.core_chol else {
            return dinv_v; // no low-rank part
        };
        let m = self.active_ind.len() + self.active_per.len();
        // U' D^{-1} V
        let mut ut = DMatrix::zeros(m, c);
        let ind_pos: std::collections::HashMap<usize, usize> = self
            .active_ind
            .iter()
            .enumerate()
            .map(|(p, &i)| (i, p))
            .collect();
        let per_pos: std::collections::HashMap<usize, usize> = self
            .active_per
            .iter()
            .enumerate()
            .map(|(p, &t)| (t, p + self.active_ind.len()))
            .collect();
        for r in 0..n {
            if let Some(&p) = ind_pos.get(&self.row_individual[r]) {
                for j in 0..c {
                    ut[(p, j)] += dinv_v[(r, j)];
                }
            }
            if let Some(&p) = per_pos.get(&self.row_period[r]) {
                for j in 0..c {
                    ut[(p, j)] += dinv_v[(r, j)];
                }
            }
        }
        let z = chol.solve(&ut);
        // out = D^{-1}V - D^{-1} U z
        let mut out = dinv_v;
        for r in 0..n {
            let w = 1.0 / self.psi_row[r];
            let pi = ind_pos.get(&self.row_individual[r]);
            let pt = per_pos.get(&self.row_period[r]);
            for j in 0..c {
                let mut uz = 0.0;
                if let Some(&p) = pi {
                    uz += z[(p, j)];
                }
                if let Some(&p) = pt {
                    uz += z[(p, j)];
                }
                out[(r, j)] -= w * uz;
            }
        }
        out
    }

    /// Materialize the covariance densely (tests, small panels).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for r in 0..n {
            m[(r, r)] += self.psi_row[r];
            for s in 0..n {
                if self.row_individual[r] == self.row_individual[s] {
                    m[(r, s)] += self.phi_ind[self.row_individual[r]];
                }
                if self.row_period[r] == self.row_period[s] {
                    m[(r, s)] += self.sigma2_nu;
                }
            }
        }
        m
    }
}

/// Assemble the covariance operator for a set of components.
pub fn build_omega(components: &VarianceComponents, inc: &IncidenceSet) -> Result<Omega> {
    let index = inc.index();
    let strata = inc.strata();
    let n = index.n_obs();

    let mut psi_row = DVector::zeros(n);
    for (r, &a) in strata.row_stratum().iter().enumerate() {
        psi_row[r] = components.psi2_of(a);
    }
    let max_psi = psi_row.amax();
    if max_psi <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            context: "idiosyncratic variance floor (all strata truncated to zero)".into(),
        });
    }
    // Keep the diagonal strictly positive after truncation.
    let floor = 1e-8 * max_psi;
    for v in psi_row.iter_mut() {
        if *v <= 0.0 {
            *v = floor;
        }
    }

    let phi_ind = DVector::from_fn(index.n_individuals(), |i, _| {
        components.phi2_of(strata.stratum_of(i)).max(0.0)
    });
    let sigma2_nu = components.sigma2_nu.max(0.0);

    let active_ind: Vec<usize> = (0..index.n_individuals())
        .filter(|&i| phi_ind[i] > 0.0)
        .collect();
    let active_per: Vec<usize> = if sigma2_nu > 0.0 {
        (0..index.n_periods()).collect()
    } else {
        Vec::new()
    };

    let m = active_ind.len() + active_per.len();
    let core_chol = if m == 0 {
        None
    } else {
        let mut core = DMatrix::zeros(m, m);
        for (p, &i) in active_ind.iter().enumerate() {
            core[(p, p)] = 1.0 / phi_ind[i];
        }
        for (p, _) in active_per.iter().enumerate() {
            let q = active_ind.len() + p;
            core[(q, q)] = 1.0 / sigma2_nu;
        }
        let ind_pos: std::collections::HashMap<usize, usize> = active_ind
            .iter()
            .enumerate()
            .map(|(p, &i)| (i, p))
            .collect();
        let per_pos: std::collections::HashMap<usize, usize> = active_per
            .iter()
            .enumerate()
            .map(|(p, &t)| (t, p + active_ind.len()))
            .collect();
        for r in 0..n {
            let w = 1.0 / psi_row[r];
            let pi = ind_pos.get(&index.row_individual()[r]).copied();
            let pt = per_pos.get(&index.row_period()[r]).copied();
            if let Some(p) = pi {
                core[(p, p)] += w;
            }
            if let Some(q) = pt {
                core[(q, q)] += w;
            }
            if let (Some(p), Some(q)) = (pi, pt) {
                core[(p, q)] += w;
                core[(q, p)] += w;
            }
        }
        match Cholesky::new(core) {
            Some(c) => Some(c),
            None => {
                return Err(Error::NotPositiveDefinite {
                    context: "covariance core factorization".into(),
                })
            }
        }
    };

    Ok(Omega {
        components: components.clone(),
        row_individual: index.row_individual().to_vec(),
        row_period: index.row_period().to_vec(),
        psi_row,
        phi_ind,
        sigma2_nu,
        active_ind,
        active_per,
        core_chol,
    })
}

/// Feasible (or true) GLS with a known covariance operator.
///
/// `x` must include the intercept column here.
pub fn gls_fit(x: &DMatrix<f64>, y: &DVector<f64>, omega: &Omega) -> Result<FitReport> {
    let n = omega.n();
    if x.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "gls_fit design rows".into(),
            expected: n,
            got: x.nrows(),
        });
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            context: "gls_fit response length".into(),
            expected: n,
            got: y.len(),
        });
    }
    let w = omega.solve_mat(x);
    let a = x.transpose() * &w;
    let (_, a_inv) = spd_solve(&a, "GLS weighted cross-product (intercept included)")?;
    let wy = omega.solve_vec(y);
    let beta = &a_inv * (x.transpose() * wy);
    let standard_errors = a_inv.diagonal().map(|v| v.max(0.0).sqrt());
    Ok(FitReport {
        beta: beta.clone(),
        covariance: a_inv,
        standard_errors,
        components: Some(omega.components().clone()),
        diagnostics: FitDiagnostics {
            n_obs: n,
            n_params: x.ncols(),
            residual_dof: n as f64 - x.ncols() as f64,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{assign_strata, build_incidence, build_panel_index, StrataRule};
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn toy_panel(
        n_ind: usize,
        t_len: usize,
        drop: &[(usize, usize)],
    ) -> (crate::panel::PanelIndex, WithinProjector) {
        let mut obs = Vec::new();
        for i in 1..=n_ind {
            for t in 1..=t_len {
                if !drop.contains(&(i, t)) {
                    obs.push((i as u32, t as u32));
                }
            }
        }
        let ix = build_panel_index(&obs).unwrap();
        let proj = WithinProjector::new(&ix).unwrap();
        (ix, proj)
    }

    fn random_design(n: usize, k: usize, rng: &mut StdRng) -> DMatrix<f64> {
        DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn within_recovers_beta_exactly_without_noise() {
        let (ix, proj) = toy_panel(4, 3, &[(2, 3), (4, 1)]);
        let mut rng = StdRng::seed_from_u64(7);
        let x = random_design(ix.n_obs(), 2, &mut rng);
        let beta = DVector::from_vec(vec![1.5, -0.7]);
        let mut y = &x * &beta;
        for r in 0..ix.n_obs() {
            y[r] += 3.0 * ix.row_individual()[r] as f64 - 2.0 * ix.row_period()[r] as f64 + 0.5;
        }
        let fit = within_fit(&x, &y, &proj).unwrap();
        assert!((fit.beta - beta).amax() <= 1e-8);
        assert!(fit.sigma2_u.abs() <= 1e-12);
    }

    #[test]
    fn within_rejects_rank_deficient_design() {
        let (ix, proj) = toy_panel(3, 3, &[]);
        let mut x = DMatrix::zeros(ix.n_obs(), 2);
        for r in 0..ix.n_obs() {
            x[(r, 0)] = r as f64;
            x[(r, 1)] = 2.0 * r as f64; // collinear
        }
        let y = DVector::from_fn(ix.n_obs(), |r, _| r as f64);
        let err = within_fit(&x, &y, &proj).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }

    #[test]
    fn robust_individual_decomposes_over_clusters() {
        // Individual 3 observed once: its cluster score is just its single
        // transformed row, and the meat is the sum of cluster outer products.
        let obs = vec![(1u32, 1u32), (1, 2), (1, 3), (2, 1), (2, 2), (2, 3), (3, 1)];
        let ix = build_panel_index(&obs).unwrap();
        let proj = WithinProjector::new(&ix).unwrap();
        let mut rng = StdRng::seed_from_u64(11);
        let x = random_design(ix.n_obs(), 1, &mut rng);
        let y = DVector::from_fn(ix.n_obs(), |r, _| x[(r, 0)] * 2.0 + rng.gen_range(-0.1..0.1));
        let fit = within_fit(&x, &y, &proj).unwrap();
        let cov_all = fe_robust_by_individual(&fit, &proj).unwrap();
        let qe = proj.apply(&fit.residuals);
        let mut meat = 0.0;
        for i in 0..ix.n_individuals() {
            let s: f64 = ix.rows_of(i).map(|r| fit.qx[(r, 0)] * qe[r]).sum();
            meat += s * s;
        }
        let expect = fit.xtqx_inv[(0, 0)] * meat * fit.xtqx_inv[(0, 0)];
        assert_abs_diff_eq!(cov_all[(0, 0)], expect, epsilon = 1e-12);
    }

    #[test]
    fn robust_by_stratum_reduces_to_individual_when_strata_are_individuals() {
        let (ix, proj) = toy_panel(4, 3, &[(1, 2)]);
        let mut rng = StdRng::seed_from_u64(13);
        let x = random_design(ix.n_obs(), 2, &mut rng);
        let y = DVector::from_fn(ix.n_obs(), |r, _| {
            x[(r, 0)] - 0.5 * x[(r, 1)] + rng.gen_range(-0.3..0.3)
        });
        let fit = within_fit(&x, &y, &proj).unwrap();
        let labels: Vec<String> = (0..ix.n_individuals()).map(|i| format!("s{i}")).collect();
        let strata = assign_strata(&ix, &StrataRule::Explicit(labels)).unwrap();
        let by_ind = fe_robust_by_individual(&fit, &proj).unwrap();
        let by_str = fe_robust_by_stratum(&fit, &proj, &strata).unwrap();
        assert!((by_ind - by_str).amax() <= 1e-12);
    }

    #[test]
    fn robust_meat_is_psd_single_cluster_matches_aggregate() {
        let (ix, proj) = toy_panel(5, 4, &[(2, 1), (5, 4)]);
        let mut rng = StdRng::seed_from_u64(17);
        let x = random_design(ix.n_obs(), 2, &mut rng);
        let y = DVector::from_fn(ix.n_obs(), |r, _| {
            0.3 * x[(r, 0)] + x[(r, 1)] + rng.gen_range(-1.0..1.0)
        });
        let fit = within_fit(&x, &y, &proj).unwrap();
        let strata = assign_strata(
            &ix,
            &StrataRule::Explicit(vec!["all".into(); ix.n_individuals()]),
        )
        .unwrap();
        let cov = fe_robust_by_stratum(&fit, &proj, &strata).unwrap();
        // Single cluster: meat = s s' with s the aggregate score, which for
        // within-transformed data is X' Q e.
        let qe = proj.apply(&fit.residuals);
        let s = fit.qx.transpose() * qe;
        let expect = &fit.xtqx_inv * (&s * s.transpose()) * &fit.xtqx_inv;
        assert!((cov.clone() - expect).amax() <= 1e-12);
        // PSD by construction.
        let eig = nalgebra::SymmetricEigen::new(cov);
        assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-12));
    }

    #[test]
    fn que_single_stratum_collapses_to_pooled() {
        let (ix, proj) = toy_panel(5, 4, &[(1, 1), (3, 2), (4, 4)]);
        let mut rng = StdRng::seed_from_u64(23);
        let x = random_design(ix.n_obs(), 2, &mut rng);
        let y = DVector::from_fn(ix.n_obs(), |r, _| {
            1.0 + x[(r, 0)] * 2.0 - x[(r, 1)] + rng.gen_range(-1.0..1.0)
        });
        let fit = within_fit(&x, &y, &proj).unwrap();
        let strata = assign_strata(
            &ix,
            &StrataRule::Explicit(vec!["all".into(); ix.n_individuals()]),
        )
        .unwrap();
        let inc = build_incidence(&ix, &strata).unwrap();
        let both = que_components(&x, &fit, &proj, &inc, Regime::HeteroBoth).unwrap();
        let pooled = que_components(&x, &fit, &proj, &inc, Regime::Homoscedastic).unwrap();
        assert_abs_diff_eq!(both.psi2[0], pooled.sigma2_u, epsilon = 1e-8);
        assert_abs_diff_eq!(
            both.raw_phi2[0],
            pooled.raw_sigma2_mu,
            epsilon = 1e-8 * pooled.raw_sigma2_mu.abs().max(1.0)
        );
        let mu_only = que_components(&x, &fit, &proj, &inc, Regime::HeteroMu).unwrap();
        assert_abs_diff_eq!(
            mu_only.raw_phi2[0],
            pooled.raw_sigma2_mu,
            epsilon = 1e-8 * pooled.raw_sigma2_mu.abs().max(1.0)
        );
    }

    #[test]
    fn que_partition_identities() {
        let (ix, proj) = toy_panel(6, 4, &[(1, 2), (2, 4), (5, 1), (6, 3)]);
        let mut rng = StdRng::seed_from_u64(29);
        let x = random_design(ix.n_obs(), 2, &mut rng);
        let y = DVector::from_fn(ix.n_obs(), |r, _| {
            x[(r, 0)] + x[(r, 1)] + rng.gen_range(-1.0..1.0)
        });
        let fit = within_fit(&x, &y, &proj).unwrap();
        let labels: Vec<String> = (0..ix.n_individuals())
            .map(|i| if i % 2 == 0 { "even".into() } else { "odd".into() })
            .collect();
        let strata = assign_strata(&ix, &StrataRule::Explicit(labels)).unwrap();
        let inc = build_incidence(&ix, &strata).unwrap();
        let stats = que_statistics(&x, &fit, &proj, &inc).unwrap();
        let qn_sum: f64 = stats.q_within_stratum.iter().sum();
        assert_abs_diff_eq!(qn_sum, stats.q_within, epsilon = 1e-9 * stats.q_within.abs().max(1.0));
        let qi_sum: f64 = stats.q_indiv_stratum.iter().sum();
        assert_abs_diff_eq!(qi_sum, stats.q_indiv, epsilon = 1e-9 * stats.q_indiv.abs().max(1.0));
    }

    #[test]
    fn omega_diag_case_and_dense_assembly() {
        let (ix, _) = toy_panel(3, 3, &[(2, 2)]);
        let strata = assign_strata(
            &ix,
            &StrataRule::Explicit(vec!["a".into(), "b".into(), "a".into()]),
        )
        .unwrap();
        let inc = build_incidence(&ix, &strata).unwrap();
        // phi = sigma_nu = 0, psi_a = c  ->  Omega = c I.
        let comps = VarianceComponents::from_raw(
            Regime::HeteroBoth,
            0.0,
            0.0,
            0.0,
            vec![2.5, 2.5],
            vec![0.0, 0.0],
        );
        let omega = build_omega(&comps, &inc).unwrap();
        let dense = omega.to_dense();
        let expect = DMatrix::from_diagonal_element(ix.n_obs(), ix.n_obs(), 2.5);
        assert!((dense - expect).amax() <= 1e-12);

        // Heteroscedastic case: dense assembly equals the term-by-term sum.
        let comps = VarianceComponents::from_raw(
            Regime::HeteroBoth,
            1.0,
            0.5,
            0.3,
            vec![1.0, 2.0],
            vec![0.5, 0.25],
        );
        let omega = build_omega(&comps, &inc).unwrap();
        let dense = omega.to_dense();
        for r in 0..ix.n_obs() {
            for s in 0..ix.n_obs() {
                let mut v = 0.0;
                if r == s {
                    v += comps.psi2[strata.row_stratum()[r]];
                }
                if ix.row_individual()[r] == ix.row_individual()[s] {
                    v += comps.phi2[strata.stratum_of(ix.row_individual()[r])];
                }
                if ix.row_period()[r] == ix.row_period()[s] {
                    v += 0.3;
                }
                assert_abs_diff_eq!(dense[(r, s)], v, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn omega_solve_round_trip_matches_dense_factorization() {
        let (ix, _) = toy_panel(4, 4, &[(1, 3), (4, 2)]);
        let strata = assign_strata(
            &ix,
            &StrataRule::Explicit(vec!["a".into(), "b".into(), "a".into(), "b".into()]),
        )
        .unwrap();
        let inc = build_incidence(&ix, &strata).unwrap();
        let comps = VarianceComponents::from_raw(
            Regime::HeteroBoth,
            1.0,
            0.6,
            0.4,
            vec![0.9, 1.7],
            vec![0.8, 0.2],
        );
        let omega = build_omega(&comps, &inc).unwrap();
        let mut rng = StdRng::seed_from_u64(31);
        let v = DVector::from_fn(ix.n_obs(), |_, _| rng.gen_range(-1.0..1.0));
        let z = omega.solve_vec(&v);
        let back = omega.mul_vec(&z);
        assert!((back - &v).amax() <= 1e-8);
        // Against a dense factorization.
        let dense = omega.to_dense();
        let z_dense = dense.cholesky().unwrap().solve(&v);
        assert!((z - z_dense).amax() <= 1e-8);
    }

    #[test]
    fn gls_with_identity_weights_is_ols() {
        let (ix, _) = toy_panel(4, 3, &[]);
        let strata = assign_strata(
            &ix,
            &StrataRule::Explicit(vec!["a".into(); ix.n_individuals()]),
        )
        .unwrap();
        let inc = build_incidence(&ix, &strata).unwrap();
        let comps =
            VarianceComponents::from_raw(Regime::Homoscedastic, 1.0, 0.0, 0.0, vec![], vec![]);
        let omega = build_omega(&comps, &inc).unwrap();
        let mut rng = StdRng::seed_from_u64(37);
        let n = ix.n_obs();
        let mut x = DMatrix::from_element(n, 3, 1.0);
        for r in 0..n {
            x[(r, 1)] = rng.gen_range(-1.0..1.0);
            x[(r, 2)] = rng.gen_range(-1.0..1.0);
        }
        let y = DVector::from_fn(n, |r, _| {
            2.0 + x[(r, 1)] - 3.0 * x[(r, 2)] + rng.gen_range(-0.2..0.2)
        });
        let gls = gls_fit(&x, &y, &omega).unwrap();
        let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
        let ols = &xtx_inv * (x.transpose() * &y);
        assert!((gls.beta - ols).amax() <= 1e-10);
    }

    #[test]
    fn omega_floors_zeroed_stratum() {
        let (ix, _) = toy_panel(3, 3, &[]);
        let strata = assign_strata(
            &ix,
            &StrataRule::Explicit(vec!["a".into(), "b".into(), "b".into()]),
        )
        .unwrap();
        let inc = build_incidence(&ix, &strata).unwrap();
        let comps = VarianceComponents::from_raw(
            Regime::HeteroU,
            1.0,
            0.0,
            0.0,
            vec![-0.5, 2.0], // first stratum clips to zero, then floors
            vec![],
        );
        assert!(comps.clipped.psi2[0]);
        let omega = build_omega(&comps, &inc).unwrap();
        let dense = omega.to_dense();
        for r in 0..ix.n_obs() {
            assert!(dense[(r, r)] > 0.0);
        }
        // All-zero psi cannot be floored into a usable matrix.
        let comps =
            VarianceComponents::from_raw(Regime::HeteroU, 0.0, 0.0, 0.0, vec![-1.0, -2.0], vec![]);
        assert!(matches!(
            build_omega(&comps, &inc),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }
}
