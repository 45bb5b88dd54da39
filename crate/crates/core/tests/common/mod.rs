//! Shared generators and independent oracles for the integration tests.
//!
//! Everything here deliberately avoids the library's own linear-algebra
//! paths: projections are built from rank-revealing decompositions of the
//! raw incidence matrices, and Within coefficients come from a dummy-variable
//! regression.

use nalgebra::{DMatrix, DVector};
use panelec_core::panel::{
    assign_strata, build_incidence, build_panel_index, IncidenceSet, PanelIndex,
    StrataAssignment, StrataRule,
};
use rand::rngs::StdRng;
use rand::Rng;

/// Random connected panel with N <= max_ind individuals over T <= max_per
/// periods. Individual 0 spans every period, which keeps the
/// individual-period graph connected.
pub fn random_connected_panel(rng: &mut StdRng, max_ind: usize, max_per: usize) -> PanelIndex {
    let n_ind = rng.gen_range(3..=max_ind.max(3));
    let t_len = rng.gen_range(2..=max_per.max(2));
    let mut obs = Vec::new();
    for t in 1..=t_len {
        obs.push((0u32, t as u32));
    }
    for i in 1..n_ind {
        let mut any = false;
        for t in 1..=t_len {
            if rng.gen_bool(0.7) {
                obs.push((i as u32, t as u32));
                any = true;
            }
        }
        if !any {
            let t = rng.gen_range(1..=t_len);
            obs.push((i as u32, t as u32));
        }
    }
    build_panel_index(&obs).unwrap()
}

/// Random strata over `count` groups by individual index, guaranteed
/// nonempty.
pub fn random_strata(
    rng: &mut StdRng,
    index: &PanelIndex,
    count: usize,
) -> StrataAssignment {
    let n_ind = index.n_individuals();
    let a = count.min(n_ind).max(1);
    loop {
        let labels: Vec<String> = (0..n_ind)
            .map(|i| format!("s{}", if i < a { i } else { rng.gen_range(0..a) }))
            .collect();
        if let Ok(s) = assign_strata(index, &StrataRule::Explicit(labels)) {
            if s.n_strata() == a {
                return s;
            }
        }
    }
}

pub fn incidence(index: &PanelIndex, strata: &StrataAssignment) -> IncidenceSet {
    build_incidence(index, strata).unwrap()
}

pub fn random_design(rng: &mut StdRng, n: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0))
}

/// Two-way error-component response with stratum scales: y = a + X b + mu_i
/// + nu_t + u, var(mu_i) = phi2[a(i)], var(u) = psi2[a(r)], var(nu) = s2nu.
#[allow(clippy::too_many_arguments)]
pub fn gen_response(
    rng: &mut StdRng,
    inc: &IncidenceSet,
    x: &DMatrix<f64>,
    beta: &[f64],
    intercept: f64,
    psi2: &[f64],
    phi2: &[f64],
    s2nu: f64,
) -> DVector<f64> {
    let index = inc.index();
    let strata = inc.strata();
    let gauss = |rng: &mut StdRng| -> f64 {
        // Box-Muller keeps this oracle free of external distributions.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mu: Vec<f64> = (0..index.n_individuals())
        .map(|i| phi2[strata.stratum_of(i)].sqrt() * gauss(rng))
        .collect();
    let nu: Vec<f64> = (0..index.n_periods())
        .map(|_| s2nu.sqrt() * gauss(rng))
        .collect();
    DVector::from_fn(index.n_obs(), |r, _| {
        let mut v = intercept;
        for (j, b) in beta.iter().enumerate() {
            v += b * x[(r, j)];
        }
        v + mu[index.row_individual()[r]]
            + nu[index.row_period()[r]]
            + psi2[strata.row_stratum()[r]].sqrt() * gauss(rng)
    })
}

/// Dense oracle for the Within projector: identity minus the orthogonal
/// projector onto the joint column span of both incidence matrices, computed
/// by pseudo-inversion of the Gram matrix via SVD.
pub fn projector_oracle(inc: &IncidenceSet) -> DMatrix<f64> {
    let dmu = inc.delta_mu_dense();
    let dnu = inc.delta_nu_dense();
    let n = dmu.nrows();
    let mut b = DMatrix::zeros(n, dmu.ncols() + dnu.ncols());
    b.view_mut((0, 0), (n, dmu.ncols())).copy_from(&dmu);
    b.view_mut((0, dmu.ncols()), (n, dnu.ncols())).copy_from(&dnu);
    let gram = b.transpose() * &b;
    let pinv = gram.pseudo_inverse(1e-10).unwrap();
    DMatrix::identity(n, n) - &b * pinv * b.transpose()
}

/// Dummy-variable OLS oracle for the Within slopes: regress y on
/// [X, individual dummies, period dummies minus one] and keep the X block.
pub fn dummy_ols_within(index: &PanelIndex, x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let n = index.n_obs();
    let k = x.ncols();
    let n_ind = index.n_individuals();
    let t_len = index.n_periods();
    let cols = k + n_ind + (t_len - 1);
    let mut b = DMatrix::zeros(n, cols);
    b.view_mut((0, 0), (n, k)).copy_from(x);
    for r in 0..n {
        b[(r, k + index.row_individual()[r])] = 1.0;
        let t = index.row_period()[r];
        if t + 1 < t_len {
            b[(r, k + n_ind + t)] = 1.0;
        }
    }
    let svd = b.svd(true, true);
    let sol = svd.solve(&DMatrix::from_column_slice(n, 1, y.as_slice()), 1e-12).unwrap();
    DVector::from_iterator(k, (0..k).map(|j| sol[(j, 0)]))
}

/// Mean and Monte Carlo standard error of a sample.
pub fn mean_and_mcse(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
