//! Data-generating processes and the simulation runner.
//!
//! The regressor recursion, the rotating-panel construction, the decile
//! stratification of the second regressor, and the stratum-scaled error
//! variances follow the classic EC-model simulation designs. Runs execute in
//! parallel over a work queue; every run owns a counter-based RNG substream
//! keyed by its run id, so results are bit-identical for a given seed no
//! matter how many worker threads execute them.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::panel::{
    assign_strata, build_incidence, IncidenceSet, PanelIndex, StrataAssignment, StrataRule,
};
use crate::projections::WithinProjector;
use crate::single_eq::{
    build_omega, fe_robust_by_individual, fe_robust_by_stratum, gls_fit, que_components_from_stats,
    que_statistics, within_fit, Regime, VarianceComponents,
};
use crate::sur::{
    que_sur_components, sur_gls, sur_within_residuals, wb_sur_components, SurComponents,
    SurDesign, SurProcedure,
};

/// Number of regressor processes generated per individual.
pub const N_REGRESSORS: usize = 3;
/// Index of the regressor whose deciles define the strata.
pub const STRATA_REGRESSOR: usize = 1;

/// Single-equation data-generating parameters.
#[derive(Debug, Clone)]
pub struct SingleEqDgp {
    /// Intercept followed by the three slopes.
    pub beta: Vec<f64>,
    pub sigma2_mu: f64,
    pub sigma2_nu: f64,
    pub sigma2_u: f64,
}

/// One equation of the SUR data-generating process.
#[derive(Debug, Clone)]
pub struct SurEquationDgp {
    /// Which of the generated regressors enter (indices into 0..3).
    pub vars: Vec<usize>,
    /// Intercept followed by one slope per entry of `vars`.
    pub beta: Vec<f64>,
}

/// SUR-system data-generating parameters.
#[derive(Debug, Clone)]
pub struct SurDgp {
    pub equations: Vec<SurEquationDgp>,
    pub sigma_mu: DMatrix<f64>,
    pub sigma_nu: DMatrix<f64>,
    pub sigma_u: DMatrix<f64>,
}

/// Which model a simulation exercises.
#[derive(Debug, Clone)]
pub enum ModelDgp {
    Single(SingleEqDgp),
    Sur(SurDgp),
}

/// Full configuration of one simulation experiment.
#[derive(Debug, Clone)]
pub struct DgpConfig {
    pub n_individuals: usize,
    pub periods: usize,
    /// Fraction of active individuals replaced each period.
    pub rotation_rate: f64,
    /// Scale of the stratum variance functions; 0 is the homoscedastic case.
    pub lambda: f64,
    pub runs: usize,
    pub seed: u64,
    pub n_strata: usize,
    pub model: ModelDgp,
}

impl DgpConfig {
    /// The single-equation simulation design at its published parameter
    /// values: T = 12, 20% rotation, decile strata.
    pub fn paper_single(n_individuals: usize, lambda: f64, runs: usize, seed: u64) -> Self {
        DgpConfig {
            n_individuals,
            periods: 12,
            rotation_rate: 0.20,
            lambda,
            runs,
            seed,
            n_strata: 10,
            model: ModelDgp::Single(SingleEqDgp {
                beta: vec![10.0, -3.0, 8.0, -2.0],
                sigma2_mu: 6.488,
                sigma2_nu: 6.271,
                sigma2_u: 6.039,
            }),
        }
    }

    /// The three-equation SUR simulation design at its published values.
    pub fn paper_sur(n_individuals: usize, lambda: f64, runs: usize, seed: u64) -> Self {
        let sym3 = |a11: f64, a12: f64, a13: f64, a22: f64, a23: f64, a33: f64| {
            DMatrix::from_row_slice(3, 3, &[a11, a12, a13, a12, a22, a23, a13, a23, a33])
        };
        DgpConfig {
            n_individuals,
            periods: 12,
            rotation_rate: 0.20,
            lambda,
            runs,
            seed,
            n_strata: 10,
            model: ModelDgp::Sur(SurDgp {
                equations: vec![
                    SurEquationDgp {
                        vars: vec![0, 1],
                        beta: vec![15.0, 6.0, -3.0],
                    },
                    SurEquationDgp {
                        vars: vec![0, 1, 2],
                        beta: vec![10.0, -3.0, 8.0, -2.0],
                    },
                    SurEquationDgp {
                        vars: vec![1, 2],
                        beta: vec![20.0, -2.0, 5.0],
                    },
                ],
                sigma_nu: sym3(6.429, 0.717, -1.107, 6.271, 1.235, 9.371),
                sigma_mu: sym3(9.377, -1.048, 1.276, 6.488, 0.710, 6.207),
                sigma_u: sym3(6.544, 0.738, 0.881, 6.039, -1.232, 9.489),
            }),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_individuals < 2 || self.periods < 2 {
            return Err(Error::InconsistentInputs {
                reason: "simulation needs at least 2 individuals and 2 periods".into(),
            });
        }
        if !(0.0..1.0).contains(&self.rotation_rate) {
            return Err(Error::InconsistentInputs {
                reason: format!("rotation rate {} outside [0, 1)", self.rotation_rate),
            });
        }
        if self.runs == 0 {
            return Err(Error::InconsistentInputs {
                reason: "runs must be at least 1".into(),
            });
        }
        if self.lambda < 0.0 {
            return Err(Error::InconsistentInputs {
                reason: "lambda must be nonnegative".into(),
            });
        }
        Ok(())
    }

    fn n_eqs(&self) -> usize {
        match &self.model {
            ModelDgp::Single(_) => 1,
            ModelDgp::Sur(s) => s.equations.len(),
        }
    }
}

/// RNG substream for one run: same seed, stream keyed by the run id.
pub fn run_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64 + 1);
    rng
}

/// Latent regressor paths: for each regressor, an N x T matrix over the full
/// horizon. The panel later masks these to observed cells.
pub fn gen_regressors(
    n_individuals: usize,
    periods: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DMatrix<f64>> {
    (0..N_REGRESSORS)
        .map(|_| {
            let mut x = DMatrix::zeros(n_individuals, periods);
            for i in 0..n_individuals {
                let mut prev = 5.0 + 10.0 * rng.gen_range(-0.5..0.5);
                for t in 0..periods {
                    let val = 0.1 * (t + 1) as f64 + 0.5 * prev + rng.gen_range(-0.5..0.5);
                    x[(i, t)] = val;
                    prev = val;
                }
            }
            x
        })
        .collect()
}

/// Rotating-panel construction.
///
/// A fixed share of the active individuals is replaced each period;
/// replacements come from the never-observed pool first and re-enter from
/// the previously-observed pool once that is exhausted. The active-set size
/// is chosen so the realized duration profile follows the truncated
/// geometric distribution the rotation implies, which also pins the expected
/// observation count.
pub fn gen_rotating_panel(
    n_individuals: usize,
    periods: usize,
    rotation_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PanelIndex> {
    if rotation_rate == 0.0 {
        let obs: Vec<(usize, usize)> = (0..n_individuals)
            .flat_map(|i| (1..=periods).map(move |t| (i, t)))
            .collect();
        return PanelIndex::from_observations(&obs);
    }
    let q = 1.0 - rotation_rate;
    let norm = n_individuals as f64 * (1.0 - q) / (1.0 - q.powi(periods as i32));
    let expected_obs: f64 = (1..=periods)
        .map(|p| norm * p as f64 * q.powi(p as i32 - 1))
        .sum();
    let active_size = ((expected_obs / periods as f64).round() as usize)
        .clamp(1, n_individuals);

    // Shuffled stack of never-observed ids.
    let mut unused: Vec<usize> = (0..n_individuals).collect();
    for i in (1..unused.len()).rev() {
        let j = rng.gen_range(0..=i);
        unused.swap(i, j);
    }
    let mut active: Vec<usize> = unused.split_off(n_individuals - active_size);
    let mut dormant: Vec<usize> = Vec::new();

    let mut obs: Vec<(usize, usize)> = Vec::with_capacity(active_size * periods);
    for &i in &active {
        obs.push((i, 1));
    }
    let mut carry = 0.0f64;
    for t in 2..=periods {
        carry += rotation_rate * active_size as f64;
        let mut swaps = carry.floor() as usize;
        carry -= swaps as f64;
        swaps = swaps.min(active.len());
        // All leavers exit before any entrant joins, so a fresh entrant
        // cannot be rotated back out within the same period.
        for _ in 0..swaps {
            let leave = rng.gen_range(0..active.len());
            dormant.push(active.swap_remove(leave));
        }
        for _ in 0..swaps {
            let enter = match unused.pop() {
                Some(id) => id,
                None => {
                    let j = rng.gen_range(0..dormant.len());
                    dormant.swap_remove(j)
                }
            };
            active.push(enter);
        }
        for &i in &active {
            obs.push((i, t));
        }
    }
    PanelIndex::from_observations(&obs)
}

/// One simulated dataset: panel, strata, regressors masked to observed
/// cells, responses, and the true per-stratum variance scales.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub index: PanelIndex,
    pub strata: StrataAssignment,
    pub inc: IncidenceSet,
    /// n x 3 regressors in panel row order.
    pub x: DMatrix<f64>,
    /// One response per equation (a single entry for the scalar model).
    pub ys: Vec<DVector<f64>>,
    /// Per-stratum variance scale (1 + lambda xbar_a)^2.
    pub scale: Vec<f64>,
}

impl GeneratedData {
    /// True single-equation components of this run.
    pub fn true_single_components(&self, dgp: &SingleEqDgp) -> VarianceComponents {
        let psi2: Vec<f64> = self.scale.iter().map(|&s| dgp.sigma2_u * s).collect();
        let phi2: Vec<f64> = self.scale.iter().map(|&s| dgp.sigma2_mu * s).collect();
        VarianceComponents::from_raw(
            Regime::HeteroBoth,
            dgp.sigma2_u,
            dgp.sigma2_mu,
            dgp.sigma2_nu,
            psi2,
            phi2,
        )
    }

    /// True SUR components of this run.
    pub fn true_sur_components(&self, dgp: &SurDgp) -> SurComponents {
        let psi: Vec<DMatrix<f64>> = self.scale.iter().map(|&s| &dgp.sigma_u * s).collect();
        let phi: Vec<DMatrix<f64>> = self.scale.iter().map(|&s| &dgp.sigma_mu * s).collect();
        SurComponents {
            procedure: SurProcedure::Que,
            regime: Regime::HeteroBoth,
            sigma_u: dgp.sigma_u.clone(),
            sigma_mu: dgp.sigma_mu.clone(),
            sigma_nu: dgp.sigma_nu.clone(),
            psi: psi.clone(),
            phi: phi.clone(),
            raw_sigma_u: dgp.sigma_u.clone(),
            raw_sigma_mu: dgp.sigma_mu.clone(),
            raw_sigma_nu: dgp.sigma_nu.clone(),
            raw_psi: psi,
            raw_phi: phi,
            repair: Default::default(),
        }
    }

    /// The SUR design implied by the configured equations.
    pub fn sur_design(&self, dgp: &SurDgp) -> Result<SurDesign> {
        let mats: Vec<DMatrix<f64>> = dgp
            .equations
            .iter()
            .map(|eq| {
                DMatrix::from_fn(self.index.n_obs(), eq.vars.len(), |r, c| {
                    self.x[(r, eq.vars[c])]
                })
            })
            .collect();
        SurDesign::unrestricted(mats)
    }
}

fn chol_or_npd(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    Cholesky::new(sym)
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite {
            context: context.to_string(),
        })
}

/// Generate the dataset of one run.
pub fn generate_run(config: &DgpConfig, run: usize) -> Result<GeneratedData> {
    config.validate()?;
    let mut rng = run_rng(config.seed, run);
    let index = gen_rotating_panel(
        config.n_individuals,
        config.periods,
        config.rotation_rate,
        &mut rng,
    )?;
    // Latent paths for every configured individual; the panel position of
    // individual label `i` masks them to the observed cells.
    let latent = gen_regressors(config.n_individuals, config.periods, &mut rng);
    let n = index.n_obs();

    let orig_id: Vec<usize> = (0..index.n_individuals())
        .map(|i| index.individual_label(i).parse::<usize>().unwrap())
        .collect();
    let period_of_label: Vec<usize> = (0..index.n_periods())
        .map(|t| index.period_label(t).parse::<usize>().unwrap() - 1)
        .collect();

    let mut x = DMatrix::zeros(n, N_REGRESSORS);
    for r in 0..n {
        let i = orig_id[index.row_individual()[r]];
        let t = period_of_label[index.row_period()[r]];
        for k in 0..N_REGRESSORS {
            x[(r, k)] = latent[k][(i, t)];
        }
    }

    // Strata: quantiles of the individual time-mean of the stratifying
    // regressor, recomputed for every run.
    let mut means = vec![0.0f64; index.n_individuals()];
    for i in 0..index.n_individuals() {
        let range = index.rows_of(i);
        means[i] = range.clone().map(|r| x[(r, STRATA_REGRESSOR)]).sum::<f64>()
            / range.len() as f64;
    }
    let strata = assign_strata(
        &index,
        &StrataRule::Quantiles {
            values: means,
            count: config.n_strata,
        },
    )?;
    let inc = build_incidence(&index, &strata)?;

    // Stratum scale from the observation mean of the stratifying regressor.
    let scale: Vec<f64> = (0..strata.n_strata())
        .map(|a| {
            let xbar = strata
                .rows(a)
                .iter()
                .map(|&r| x[(r, STRATA_REGRESSOR)])
                .sum::<f64>()
                / strata.rows(a).len() as f64;
            let f = 1.0 + config.lambda * xbar;
            f * f
        })
        .collect();

    let n_eqs = config.n_eqs();
    // Error draws: individual effects, period effects, then idiosyncratic,
    // all in fixed order so the stream is reproducible.
    let mut mu = DMatrix::zeros(index.n_individuals(), n_eqs);
    let mut nu = DMatrix::zeros(index.n_periods(), n_eqs);
    let mut u = DMatrix::zeros(n, n_eqs);
    match &config.model {
        ModelDgp::Single(dgp) => {
            for i in 0..index.n_individuals() {
                let sd = (dgp.sigma2_mu * scale[strata.stratum_of(i)]).sqrt();
                mu[(i, 0)] = sd * rng.sample::<f64, _>(StandardNormal);
            }
            let sd_nu = dgp.sigma2_nu.sqrt();
            for t in 0..index.n_periods() {
                nu[(t, 0)] = sd_nu * rng.sample::<f64, _>(StandardNormal);
            }
            for r in 0..n {
                let a = strata.row_stratum()[r];
                let sd = (dgp.sigma2_u * scale[a]).sqrt();
                u[(r, 0)] = sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        ModelDgp::Sur(dgp) => {
            let l_mu = chol_or_npd(&dgp.sigma_mu, "individual-effect covariance")?;
            let l_nu = chol_or_npd(&dgp.sigma_nu, "period-effect covariance")?;
            let l_u = chol_or_npd(&dgp.sigma_u, "idiosyncratic covariance")?;
            let draw = |rng: &mut ChaCha8Rng, l: &DMatrix<f64>, s: f64| -> DVector<f64> {
                let z = DVector::from_fn(n_eqs, |_, _| rng.sample::<f64, _>(StandardNormal));
                l * z * s.sqrt()
            };
            for i in 0..index.n_individuals() {
                let v = draw(&mut rng, &l_mu, scale[strata.stratum_of(i)]);
                mu.set_row(i, &v.transpose());
            }
            for t in 0..index.n_periods() {
                let v = draw(&mut rng, &l_nu, 1.0);
                nu.set_row(t, &v.transpose());
            }
            for r in 0..n {
                let v = draw(&mut rng, &l_u, scale[strata.row_stratum()[r]]);
                u.set_row(r, &v.transpose());
            }
        }
    }

    let ys: Vec<DVector<f64>> = match &config.model {
        ModelDgp::Single(dgp) => {
            let y = DVector::from_fn(n, |r, _| {
                let mut v = dgp.beta[0];
                for k in 0..N_REGRESSORS {
                    v += dgp.beta[k + 1] * x[(r, k)];
                }
                v + mu[(index.row_individual()[r], 0)]
                    + nu[(index.row_period()[r], 0)]
                    + u[(r, 0)]
            });
            vec![y]
        }
        ModelDgp::Sur(dgp) => dgp
            .equations
            .iter()
            .enumerate()
            .map(|(m, eq)| {
                DVector::from_fn(n, |r, _| {
                    let mut v = eq.beta[0];
                    for (c, &k) in eq.vars.iter().enumerate() {
                        v += eq.beta[c + 1] * x[(r, k)];
                    }
                    v + mu[(index.row_individual()[r], m)]
                        + nu[(index.row_period()[r], m)]
                        + u[(r, m)]
                })
            })
            .collect(),
    };

    Ok(GeneratedData {
        index,
        strata,
        inc,
        x,
        ys,
        scale,
    })
}

/// Estimator labels used in the summary grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    FeClassical,
    FeRobustIndividual,
    FeRobustStratum,
    Gls(Regime),
    TrueGls,
}

impl EstimatorKind {
    pub fn label(self) -> String {
        match self {
            EstimatorKind::FeClassical => "fe".into(),
            EstimatorKind::FeRobustIndividual => "fe_robust_individual".into(),
            EstimatorKind::FeRobustStratum => "fe_robust_stratum".into(),
            EstimatorKind::Gls(r) => format!("gls_{}", r.label()),
            EstimatorKind::TrueGls => "gls_true".into(),
        }
    }
}

/// Per-run record of the single-equation experiment.
#[derive(Debug, Clone)]
pub struct SingleRunRecord {
    pub n_obs: usize,
    pub true_psi2: Vec<f64>,
    pub true_phi2: Vec<f64>,
    pub est_psi2: Vec<f64>,
    pub est_phi2_on_sigma_u: Vec<f64>,
    pub est_phi2_on_psi2: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_mu: f64,
    pub sigma2_nu: f64,
    pub obs_share: Vec<f64>,
    /// (estimator, coefficients, standard errors).
    pub fits: Vec<(EstimatorKind, DVector<f64>, DVector<f64>)>,
    /// Per GLS estimator: mean squared fitted composite error
    /// ||y - X b||^2 / n, the quantity the efficiency ratios compare.
    pub composite_error: Vec<(EstimatorKind, f64)>,
}

/// Per-run record of the SUR experiment.
#[derive(Debug, Clone)]
pub struct SurRunRecord {
    pub n_obs: usize,
    /// Per stratum: true and estimated component matrices.
    pub true_psi: Vec<DMatrix<f64>>,
    pub true_phi: Vec<DMatrix<f64>>,
    pub que_psi: Vec<DMatrix<f64>>,
    pub que_phi_on_sigma_u: Vec<DMatrix<f64>>,
    pub que_phi_on_psi: Vec<DMatrix<f64>>,
    pub wb_psi: Vec<DMatrix<f64>>,
    pub wb_phi_on_sigma_u: Vec<DMatrix<f64>>,
    pub wb_phi_on_psi: Vec<DMatrix<f64>>,
    /// (procedure, regime-or-true, coefficients, standard errors).
    pub fits: Vec<(String, DVector<f64>, DVector<f64>)>,
    /// Per estimator and equation: mean squared fitted composite error of
    /// that equation.
    pub composite_error: Vec<(String, Vec<f64>)>,
}

/// Aggregated results of a single-equation experiment.
#[derive(Debug, Clone)]
pub struct SingleSummary {
    pub runs_used: usize,
    pub failures: Vec<(usize, String)>,
    pub mean_n_obs: f64,
    pub avg_true_psi2: Vec<f64>,
    pub avg_est_psi2: Vec<f64>,
    pub avg_true_phi2: Vec<f64>,
    pub avg_phi2_on_sigma_u: Vec<f64>,
    pub avg_phi2_on_psi2: Vec<f64>,
    pub avg_sigma2_u: f64,
    pub avg_sigma2_mu: f64,
    pub avg_sigma2_nu: f64,
    /// Observation-weighted stratum averages of the heteroscedastic
    /// estimates, as displayed in the summary rows of the SE tables.
    pub avg_psi2_weighted: f64,
    pub avg_phi2_weighted_on_psi2: f64,
    /// Per estimator: mean coefficients, mean standard errors, and the MSE
    /// against the true coefficient vector (summed over coefficients).
    pub estimators: Vec<(String, DVector<f64>, DVector<f64>, f64)>,
    /// Relative efficiency against true GLS, per estimator label.
    pub relative_efficiency: Vec<(String, f64)>,
}

/// Aggregated results of a SUR experiment.
#[derive(Debug, Clone)]
pub struct SurSummary {
    pub runs_used: usize,
    pub failures: Vec<(usize, String)>,
    pub mean_n_obs: f64,
    pub avg_true_psi: Vec<DMatrix<f64>>,
    pub avg_true_phi: Vec<DMatrix<f64>>,
    pub avg_que_psi: Vec<DMatrix<f64>>,
    pub avg_que_phi_on_sigma_u: Vec<DMatrix<f64>>,
    pub avg_que_phi_on_psi: Vec<DMatrix<f64>>,
    pub avg_wb_psi: Vec<DMatrix<f64>>,
    pub avg_wb_phi_on_sigma_u: Vec<DMatrix<f64>>,
    pub avg_wb_phi_on_psi: Vec<DMatrix<f64>>,
    /// Per (estimator label): mean coefficients and mean standard errors.
    pub estimators: Vec<(String, DVector<f64>, DVector<f64>)>,
    /// Per (estimator label, equation): MSE summed over the equation's
    /// coefficients.
    pub mse: Vec<(String, Vec<f64>)>,
    /// Relative efficiency against true GLS, per (estimator label, equation).
    pub relative_efficiency: Vec<(String, Vec<f64>)>,
    /// Coefficient labels `eq:term` in stacked order.
    pub coeff_labels: Vec<String>,
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub enum RunSummary {
    Single(SingleSummary),
    Sur(SurSummary),
}

/// Run one full single-equation dataset through every estimator.
pub fn single_run(config: &DgpConfig, run: usize) -> Result<SingleRunRecord> {
    let ModelDgp::Single(dgp) = &config.model else {
        return Err(Error::InconsistentInputs {
            reason: "single_run requires a single-equation model".into(),
        });
    };
    let data = generate_run(config, run)?;
    let proj = WithinProjector::new(&data.index)?;
    let y = &data.ys[0];
    let fit = within_fit(&data.x, y, &proj)?;
    let stats = que_statistics(&data.x, &fit, &proj, &data.inc)?;

    let robust_i = fe_robust_by_individual(&fit, &proj)?;
    let robust_a = fe_robust_by_stratum(&fit, &proj, &data.strata)?;

    let mut fits: Vec<(EstimatorKind, DVector<f64>, DVector<f64>)> = vec![
        (
            EstimatorKind::FeClassical,
            fit.beta.clone(),
            fit.standard_errors.clone(),
        ),
        (
            EstimatorKind::FeRobustIndividual,
            fit.beta.clone(),
            robust_i.diagonal().map(|v| v.max(0.0).sqrt()),
        ),
        (
            EstimatorKind::FeRobustStratum,
            fit.beta.clone(),
            robust_a.diagonal().map(|v| v.max(0.0).sqrt()),
        ),
    ];

    let n = data.index.n_obs();
    let mut x_full = DMatrix::from_element(n, N_REGRESSORS + 1, 1.0);
    for r in 0..n {
        for k in 0..N_REGRESSORS {
            x_full[(r, k + 1)] = data.x[(r, k)];
        }
    }

    let mut composite_error: Vec<(EstimatorKind, f64)> = Vec::new();

    let mut comps_by_regime: Vec<(Regime, VarianceComponents)> = Vec::new();
    for regime in Regime::ALL {
        let comps = que_components_from_stats(&stats, &data.inc, regime)?;
        comps_by_regime.push((regime, comps));
    }
    for (regime, comps) in &comps_by_regime {
        let omega = build_omega(comps, &data.inc)?;
        let report = gls_fit(&x_full, y, &omega)?;
        let fitted_err = y - &x_full * &report.beta;
        composite_error.push((
            EstimatorKind::Gls(*regime),
            fitted_err.norm_squared() / n as f64,
        ));
        fits.push((
            EstimatorKind::Gls(*regime),
            report.beta,
            report.standard_errors,
        ));
    }
    let true_comps = data.true_single_components(dgp);
    let omega = build_omega(&true_comps, &data.inc)?;
    let report = gls_fit(&x_full, y, &omega)?;
    let fitted_err = y - &x_full * &report.beta;
    composite_error.push((EstimatorKind::TrueGls, fitted_err.norm_squared() / n as f64));
    fits.push((EstimatorKind::TrueGls, report.beta, report.standard_errors));

    let pick = |regime: Regime| -> &VarianceComponents {
        &comps_by_regime
            .iter()
            .find(|(r, _)| *r == regime)
            .unwrap()
            .1
    };
    let both = pick(Regime::HeteroBoth);
    let mu_only = pick(Regime::HeteroMu);
    let pooled = pick(Regime::Homoscedastic);

    let obs_share: Vec<f64> = data
        .strata
        .obs_counts()
        .iter()
        .map(|&c| c as f64 / n as f64)
        .collect();

    Ok(SingleRunRecord {
        n_obs: n,
        true_psi2: data.scale.iter().map(|&s| dgp.sigma2_u * s).collect(),
        true_phi2: data.scale.iter().map(|&s| dgp.sigma2_mu * s).collect(),
        est_psi2: both.psi2.clone(),
        est_phi2_on_sigma_u: mu_only.phi2.clone(),
        est_phi2_on_psi2: both.phi2.clone(),
        sigma2_u: pooled.sigma2_u,
        sigma2_mu: pooled.sigma2_mu,
        sigma2_nu: pooled.sigma2_nu,
        obs_share,
        fits,
        composite_error,
    })
}

/// Run one full SUR dataset through both covariance procedures and all
/// regimes.
pub fn sur_run(config: &DgpConfig, run: usize) -> Result<SurRunRecord> {
    let ModelDgp::Sur(dgp) = &config.model else {
        return Err(Error::InconsistentInputs {
            reason: "sur_run requires a SUR model".into(),
        });
    };
    let data = generate_run(config, run)?;
    let proj = WithinProjector::new(&data.index)?;
    let design = data.sur_design(dgp)?;
    let resids = sur_within_residuals(&design, &data.ys, &proj)?;

    // Mean squared fitted composite error per equation.
    let (_, _, eq_of) = sur_true_beta(dgp);
    let eq_slots: Vec<Vec<usize>> = (0..dgp.equations.len())
        .map(|m| {
            eq_of
                .iter()
                .enumerate()
                .filter(|(_, &e)| e == m)
                .map(|(c, _)| c)
                .collect()
        })
        .collect();
    let n_obs = data.index.n_obs();
    let composite = |beta: &DVector<f64>| -> Vec<f64> {
        dgp.equations
            .iter()
            .enumerate()
            .map(|(m, eq)| {
                let mut acc = 0.0;
                for r in 0..n_obs {
                    let mut fit = beta[eq_slots[m][0]];
                    for (c, &v) in eq.vars.iter().enumerate() {
                        fit += beta[eq_slots[m][c + 1]] * data.x[(r, v)];
                    }
                    let e = data.ys[m][r] - fit;
                    acc += e * e;
                }
                acc / n_obs as f64
            })
            .collect()
    };

    let mut fits: Vec<(String, DVector<f64>, DVector<f64>)> = Vec::new();
    let mut composite_error: Vec<(String, Vec<f64>)> = Vec::new();
    let mut que_by_regime = Vec::new();
    let mut wb_by_regime = Vec::new();
    for regime in Regime::ALL {
        let que = que_sur_components(&design, &resids, &proj, &data.inc, regime)?;
        let wb = wb_sur_components(&design, &resids, &data.index, &data.strata, regime)?;
        let fit_q = sur_gls(&design, &data.ys, &que, &data.index, &data.strata)?;
        composite_error.push((format!("que_{}", regime.label()), composite(&fit_q.beta)));
        fits.push((
            format!("que_{}", regime.label()),
            fit_q.beta,
            fit_q.standard_errors,
        ));
        let fit_w = sur_gls(&design, &data.ys, &wb, &data.index, &data.strata)?;
        composite_error.push((format!("wb_{}", regime.label()), composite(&fit_w.beta)));
        fits.push((
            format!("wb_{}", regime.label()),
            fit_w.beta,
            fit_w.standard_errors,
        ));
        que_by_regime.push((regime, que));
        wb_by_regime.push((regime, wb));
    }
    let true_comps = data.true_sur_components(dgp);
    let fit_t = sur_gls(&design, &data.ys, &true_comps, &data.index, &data.strata)?;
    composite_error.push(("true".into(), composite(&fit_t.beta)));
    fits.push(("true".into(), fit_t.beta, fit_t.standard_errors));

    let pick = |set: &[(Regime, SurComponents)], regime: Regime| -> SurComponents {
        set.iter().find(|(r, _)| *r == regime).unwrap().1.clone()
    };
    let que_both = pick(&que_by_regime, Regime::HeteroBoth);
    let que_mu = pick(&que_by_regime, Regime::HeteroMu);
    let wb_both = pick(&wb_by_regime, Regime::HeteroBoth);
    let wb_mu = pick(&wb_by_regime, Regime::HeteroMu);

    Ok(SurRunRecord {
        n_obs: data.index.n_obs(),
        true_psi: data.scale.iter().map(|&s| &dgp.sigma_u * s).collect(),
        true_phi: data.scale.iter().map(|&s| &dgp.sigma_mu * s).collect(),
        que_psi: que_both.psi.clone(),
        que_phi_on_sigma_u: que_mu.phi.clone(),
        que_phi_on_psi: que_both.phi.clone(),
        wb_psi: wb_both.psi.clone(),
        wb_phi_on_sigma_u: wb_mu.phi.clone(),
        wb_phi_on_psi: wb_both.phi.clone(),
        fits,
        composite_error,
    })
}

fn mean_vec(items: &[&DVector<f64>]) -> DVector<f64> {
    let mut acc = items[0].clone();
    for v in &items[1..] {
        acc += *v;
    }
    acc / items.len() as f64
}

fn mean_mats(items: Vec<Vec<&DMatrix<f64>>>) -> Vec<DMatrix<f64>> {
    // items[run][stratum] -> averaged over runs per stratum.
    let n_runs = items.len() as f64;
    let n_strata = items[0].len();
    (0..n_strata)
        .map(|a| {
            let mut acc = items[0][a].clone();
            for run in &items[1..] {
                acc += run[a];
            }
            acc / n_runs
        })
        .collect()
}

/// True coefficient vector of the single-equation model (intercept first).
pub fn single_true_beta(dgp: &SingleEqDgp) -> DVector<f64> {
    DVector::from_vec(dgp.beta.clone())
}

/// Stacked true coefficient vector and labels of the SUR model.
pub fn sur_true_beta(dgp: &SurDgp) -> (DVector<f64>, Vec<String>, Vec<usize>) {
    let mut beta = Vec::new();
    let mut labels = Vec::new();
    let mut eq_of = Vec::new();
    for (m, eq) in dgp.equations.iter().enumerate() {
        beta.push(eq.beta[0]);
        labels.push(format!("y{}:intercept", m + 1));
        eq_of.push(m);
        for (c, &v) in eq.vars.iter().enumerate() {
            beta.push(eq.beta[c + 1]);
            labels.push(format!("y{}:x{}", m + 1, v + 1));
            eq_of.push(m);
        }
    }
    (DVector::from_vec(beta), labels, eq_of)
}

/// Execute a full experiment: every run in parallel, aggregation in run
/// order so the output is reproducible for a given seed.
pub fn run_experiment(config: &DgpConfig) -> Result<RunSummary> {
    config.validate()?;
    match &config.model {
        ModelDgp::Single(dgp) => {
            let results: Vec<Result<SingleRunRecord>> = (0..config.runs)
                .into_par_iter()
                .map(|run| single_run(config, run))
                .collect();
            let mut records = Vec::new();
            let mut failures = Vec::new();
            for (run, res) in results.into_iter().enumerate() {
                match res {
                    Ok(r) => records.push(r),
                    Err(e) => failures.push((run, e.to_string())),
                }
            }
            if records.is_empty() {
                return Err(Error::InconsistentInputs {
                    reason: "every simulation run failed".into(),
                });
            }
            Ok(RunSummary::Single(summarize_single(
                dgp, records, failures,
            )))
        }
        ModelDgp::Sur(dgp) => {
            let results: Vec<Result<SurRunRecord>> = (0..config.runs)
                .into_par_iter()
                .map(|run| sur_run(config, run))
                .collect();
            let mut records = Vec::new();
            let mut failures = Vec::new();
            for (run, res) in results.into_iter().enumerate() {
                match res {
                    Ok(r) => records.push(r),
                    Err(e) => failures.push((run, e.to_string())),
                }
            }
            if records.is_empty() {
                return Err(Error::InconsistentInputs {
                    reason: "every simulation run failed".into(),
                });
            }
            Ok(RunSummary::Sur(summarize_sur(dgp, records, failures)))
        }
    }
}

fn summarize_single(
    dgp: &SingleEqDgp,
    records: Vec<SingleRunRecord>,
    failures: Vec<(usize, String)>,
) -> SingleSummary {
    let runs = records.len();
    let n_strata = records[0].true_psi2.len();
    let mean_of = |f: &dyn Fn(&SingleRunRecord) -> f64| -> f64 {
        records.iter().map(|r| f(r)).sum::<f64>() / runs as f64
    };
    let mean_stratum = |f: &dyn Fn(&SingleRunRecord) -> &Vec<f64>| -> Vec<f64> {
        (0..n_strata)
            .map(|a| records.iter().map(|r| f(r)[a]).sum::<f64>() / runs as f64)
            .collect()
    };

    // Observation-weighted stratum averages, then averaged over runs.
    let weighted = |vals: &dyn Fn(&SingleRunRecord) -> &Vec<f64>| -> f64 {
        records
            .iter()
            .map(|r| {
                vals(r)
                    .iter()
                    .zip(&r.obs_share)
                    .map(|(&v, &w)| v * w)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / runs as f64
    };

    let true_beta = single_true_beta(dgp);
    let slope_truth = true_beta.rows(1, true_beta.len() - 1).into_owned();
    let labels: Vec<EstimatorKind> = records[0].fits.iter().map(|(k, _, _)| *k).collect();
    let mut estimators = Vec::new();
    let mut mse_by_label = Vec::new();
    for (pos, kind) in labels.iter().enumerate() {
        let betas: Vec<&DVector<f64>> = records.iter().map(|r| &r.fits[pos].1).collect();
        let ses: Vec<&DVector<f64>> = records.iter().map(|r| &r.fits[pos].2).collect();
        // MSE aggregates the slope coefficients; the intercept column (when
        // present) is excluded so FE and GLS grids are comparable.
        let has_intercept = betas[0].len() == true_beta.len();
        let mse = records
            .iter()
            .map(|r| {
                let b = &r.fits[pos].1;
                let d = if has_intercept {
                    b.rows(1, b.len() - 1) - &slope_truth
                } else {
                    b - &slope_truth
                };
                d.dot(&d)
            })
            .sum::<f64>()
            / runs as f64;
        estimators.push((kind.label(), mean_vec(&betas), mean_vec(&ses), mse));
        mse_by_label.push((kind.label(), mse));
    }
    let _ = &mse_by_label;
    // Relative efficiency uses the composite-error MSE (the fitted-versus-
    // true disturbance magnitudes), referenced to the true-weights fit.
    let ce_labels: Vec<EstimatorKind> =
        records[0].composite_error.iter().map(|(k, _)| *k).collect();
    let ce_mean: Vec<f64> = (0..ce_labels.len())
        .map(|pos| {
            records
                .iter()
                .map(|r| r.composite_error[pos].1)
                .sum::<f64>()
                / runs as f64
        })
        .collect();
    let ce_true = ce_labels
        .iter()
        .zip(&ce_mean)
        .find(|(k, _)| matches!(k, EstimatorKind::TrueGls))
        .map(|(_, &m)| m)
        .unwrap_or(f64::NAN);
    let relative_efficiency: Vec<(String, f64)> = ce_labels
        .iter()
        .zip(&ce_mean)
        .map(|(k, &m)| (k.label(), m / ce_true))
        .collect();

    SingleSummary {
        runs_used: runs,
        failures,
        mean_n_obs: mean_of(&|r| r.n_obs as f64),
        avg_true_psi2: mean_stratum(&|r| &r.true_psi2),
        avg_est_psi2: mean_stratum(&|r| &r.est_psi2),
        avg_true_phi2: mean_stratum(&|r| &r.true_phi2),
        avg_phi2_on_sigma_u: mean_stratum(&|r| &r.est_phi2_on_sigma_u),
        avg_phi2_on_psi2: mean_stratum(&|r| &r.est_phi2_on_psi2),
        avg_sigma2_u: mean_of(&|r| r.sigma2_u),
        avg_sigma2_mu: mean_of(&|r| r.sigma2_mu),
        avg_sigma2_nu: mean_of(&|r| r.sigma2_nu),
        avg_psi2_weighted: weighted(&|r| &r.est_psi2),
        avg_phi2_weighted_on_psi2: weighted(&|r| &r.est_phi2_on_psi2),
        estimators,
        relative_efficiency,
    }
}

fn summarize_sur(
    dgp: &SurDgp,
    records: Vec<SurRunRecord>,
    failures: Vec<(usize, String)>,
) -> SurSummary {
    let runs = records.len();
    let (true_beta, coeff_labels, eq_of) = sur_true_beta(dgp);
    let n_eqs = dgp.equations.len();

    let collect_mats = |f: &dyn Fn(&SurRunRecord) -> &Vec<DMatrix<f64>>| -> Vec<DMatrix<f64>> {
        mean_mats(records.iter().map(|r| f(r).iter().collect()).collect())
    };

    let labels: Vec<String> = records[0].fits.iter().map(|(l, _, _)| l.clone()).collect();
    let mut estimators = Vec::new();
    let mut mse = Vec::new();
    for (pos, label) in labels.iter().enumerate() {
        let betas: Vec<&DVector<f64>> = records.iter().map(|r| &r.fits[pos].1).collect();
        let ses: Vec<&DVector<f64>> = records.iter().map(|r| &r.fits[pos].2).collect();
        estimators.push((label.clone(), mean_vec(&betas), mean_vec(&ses)));
        let mut per_eq = vec![0.0f64; n_eqs];
        for r in &records {
            let d = &r.fits[pos].1 - &true_beta;
            for (c, &eq) in eq_of.iter().enumerate() {
                // Slope coefficients only, as in the single-equation grids.
                if !coeff_labels[c].ends_with(":intercept") {
                    per_eq[eq] += d[c] * d[c];
                }
            }
        }
        for v in per_eq.iter_mut() {
            *v /= runs as f64;
        }
        mse.push((label.clone(), per_eq));
    }
    // Relative efficiency from composite-error MSEs.
    let ce_labels: Vec<String> = records[0]
        .composite_error
        .iter()
        .map(|(l, _)| l.clone())
        .collect();
    let ce_mean: Vec<Vec<f64>> = (0..ce_labels.len())
        .map(|pos| {
            (0..n_eqs)
                .map(|m| {
                    records
                        .iter()
                        .map(|r| r.composite_error[pos].1[m])
                        .sum::<f64>()
                        / runs as f64
                })
                .collect()
        })
        .collect();
    let ce_true: Vec<f64> = ce_labels
        .iter()
        .zip(&ce_mean)
        .find(|(l, _)| *l == "true")
        .map(|(_, m)| m.clone())
        .unwrap_or_default();
    let relative_efficiency: Vec<(String, Vec<f64>)> = ce_labels
        .iter()
        .zip(&ce_mean)
        .map(|(l, m)| {
            (
                l.clone(),
                m.iter().zip(&ce_true).map(|(a, b)| a / b).collect(),
            )
        })
        .collect();

    SurSummary {
        runs_used: runs,
        failures,
        mean_n_obs: records.iter().map(|r| r.n_obs as f64).sum::<f64>() / runs as f64,
        avg_true_psi: collect_mats(&|r| &r.true_psi),
        avg_true_phi: collect_mats(&|r| &r.true_phi),
        avg_que_psi: collect_mats(&|r| &r.que_psi),
        avg_que_phi_on_sigma_u: collect_mats(&|r| &r.que_phi_on_sigma_u),
        avg_que_phi_on_psi: collect_mats(&|r| &r.que_phi_on_psi),
        avg_wb_psi: collect_mats(&|r| &r.wb_psi),
        avg_wb_phi_on_sigma_u: collect_mats(&|r| &r.wb_phi_on_sigma_u),
        avg_wb_phi_on_psi: collect_mats(&|r| &r.wb_phi_on_psi),
        estimators,
        mse,
        relative_efficiency,
        coeff_labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regressor_recursion_hand_values() {
        // With the noise suppressed the recursion is deterministic:
        // x_0 = 5, x_1 = 0.1 + 2.5 = 2.6, x_2 = 0.2 + 1.3 = 1.5.
        let mut prev = 5.0;
        let mut vals = Vec::new();
        for t in 1..=2 {
            let v: f64 = 0.1 * t as f64 + 0.5 * prev;
            vals.push(v);
            prev = v;
        }
        assert!((vals[0] - 2.6).abs() < 1e-12);
        assert!((vals[1] - 1.5).abs() < 1e-12);
        // Monte Carlo mean of the noisy path approaches the deterministic
        // one (the innovations have mean zero).
        let mut rng = run_rng(99, 0);
        let reps = 4000;
        let mut acc = [0.0f64; 2];
        for _ in 0..reps {
            let mut prev = 5.0 + 10.0 * rng.gen_range(-0.5..0.5);
            for (t, a) in acc.iter_mut().enumerate() {
                let v = 0.1 * (t + 1) as f64 + 0.5 * prev + rng.gen_range(-0.5..0.5);
                *a += v;
                prev = v;
            }
        }
        assert!((acc[0] / reps as f64 - 2.6).abs() < 0.05);
        assert!((acc[1] / reps as f64 - 1.5).abs() < 0.05);
    }

    #[test]
    fn zero_rotation_is_balanced() {
        let mut rng = run_rng(1, 0);
        let ix = gen_rotating_panel(8, 5, 0.0, &mut rng).unwrap();
        assert_eq!(ix.n_obs(), 40);
        assert!(ix.t_i().iter().all(|&t| t == 5));
    }

    #[test]
    fn rotating_panel_matches_published_sizes() {
        let mut rng = run_rng(7, 0);
        let ix = gen_rotating_panel(250, 12, 0.20, &mut rng).unwrap();
        // Published scheme: 1031 observations on 250 individuals. The
        // rounding of per-period swap counts lands within a percent.
        assert_eq!(ix.n_individuals(), 250);
        assert!(
            (ix.n_obs() as i64 - 1031).abs() <= 15,
            "n = {}",
            ix.n_obs()
        );
        let mut rng = run_rng(7, 1);
        let ix = gen_rotating_panel(500, 12, 0.20, &mut rng).unwrap();
        assert_eq!(ix.n_individuals(), 500);
        assert!(
            (ix.n_obs() as i64 - 2062).abs() <= 25,
            "n = {}",
            ix.n_obs()
        );
    }

    #[test]
    fn duration_profile_decays_geometrically() {
        let mut rng = run_rng(11, 3);
        let ix = gen_rotating_panel(250, 12, 0.20, &mut rng).unwrap();
        let short = ix.duration_group(1).len() + ix.duration_group(2).len();
        let long = ix.duration_group(11).len() + ix.duration_group(12).len();
        // Short spells dominate long ones under 20% rotation.
        assert!(short > 2 * long, "short {short}, long {long}");
        // Every duration between 1 and 12 is populated at this scale.
        for p in 1..=12 {
            assert!(!ix.duration_group(p).is_empty(), "duration {p} empty");
        }
    }

    #[test]
    fn generated_run_is_reproducible() {
        let config = DgpConfig::paper_single(60, 1.0, 1, 12345);
        let a = generate_run(&config, 0).unwrap();
        let b = generate_run(&config, 0).unwrap();
        assert_eq!(a.index.n_obs(), b.index.n_obs());
        assert_eq!(a.x, b.x);
        assert_eq!(a.ys[0], b.ys[0]);
        // Different runs see different data.
        let c = generate_run(&config, 1).unwrap();
        assert_ne!(a.ys[0], c.ys[0]);
    }

    #[test]
    fn lambda_zero_scales_are_unit() {
        let config = DgpConfig::paper_single(40, 0.0, 1, 5);
        let data = generate_run(&config, 0).unwrap();
        assert!(data.scale.iter().all(|&s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn experiment_summary_is_deterministic_and_self_consistent() {
        let config = DgpConfig::paper_single(40, 1.0, 4, 777);
        let RunSummary::Single(s1) = run_experiment(&config).unwrap() else {
            panic!("expected single summary")
        };
        let RunSummary::Single(s2) = run_experiment(&config).unwrap() else {
            panic!("expected single summary")
        };
        assert_eq!(s1.runs_used, 4);
        assert!(s1.failures.is_empty());
        assert_eq!(s1.avg_est_psi2, s2.avg_est_psi2);
        assert_eq!(
            s1.estimators.iter().map(|e| e.3).collect::<Vec<_>>(),
            s2.estimators.iter().map(|e| e.3).collect::<Vec<_>>()
        );
        // True GLS is its own reference.
        let own = s1
            .relative_efficiency
            .iter()
            .find(|(l, _)| l == "gls_true")
            .unwrap();
        assert!((own.1 - 1.0).abs() < 1e-12);
    }
}
