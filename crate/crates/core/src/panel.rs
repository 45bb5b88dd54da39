//! Canonical representation of an unbalanced, stratified panel.
//!
//! Observations are canonicalized individual-major, period-minor; every
//! matrix and residual vector downstream follows that row order. Individual,
//! period and stratum labels are opaque: internally everything runs on dense
//! 0-based indices with a bidirectional label map.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Row order, per-individual and per-period counts, and duration groups of an
/// unbalanced panel.
///
/// Invariants established at construction:
/// - `sum(t_i) == sum(n_t) == n_obs`,
/// - no duplicate (individual, period) pair,
/// - rows sorted individual-major, period-minor,
/// - duration groups partition the individuals.
#[derive(Debug, Clone)]
pub struct PanelIndex {
    individual_labels: Vec<String>,
    period_labels: Vec<String>,
    /// Dense individual index of each row.
    row_individual: Vec<usize>,
    /// Dense period index of each row.
    row_period: Vec<usize>,
    /// First row of each individual's contiguous block (length N+1).
    block_start: Vec<usize>,
    /// Observation count per individual (T_i).
    t_i: Vec<usize>,
    /// Individual count per period (N_t).
    n_t: Vec<usize>,
    /// For each duration p (1-based), the individuals observed exactly p times.
    duration_groups: BTreeMap<usize, Vec<usize>>,
}

impl PanelIndex {
    /// Build the index from raw (individual, period) pairs.
    ///
    /// Labels are arbitrary orderable values; rows are re-sorted
    /// individual-major, period-minor regardless of input order.
    pub fn from_observations<I, P>(observations: &[(I, P)]) -> Result<Self>
    where
        I: Ord + Clone + Display,
        P: Ord + Clone + Display,
    {
        if observations.is_empty() {
            return Err(Error::EmptyPanel);
        }

        let mut individuals: BTreeSet<&I> = BTreeSet::new();
        let mut periods: BTreeSet<&P> = BTreeSet::new();
        for (i, t) in observations {
            individuals.insert(i);
            periods.insert(t);
        }
        let individual_ix: BTreeMap<&I, usize> =
            individuals.iter().enumerate().map(|(k, v)| (*v, k)).collect();
        let period_ix: BTreeMap<&P, usize> =
            periods.iter().enumerate().map(|(k, v)| (*v, k)).collect();

        let mut rows: Vec<(usize, usize)> = observations
            .iter()
            .map(|(i, t)| (individual_ix[i], period_ix[t]))
            .collect();
        rows.sort_unstable();
        for w in rows.windows(2) {
            if w[0] == w[1] {
                let (i, t) = w[0];
                return Err(Error::DuplicateObservation {
                    individual: individuals.iter().nth(i).unwrap().to_string(),
                    period: periods.iter().nth(t).unwrap().to_string(),
                });
            }
        }

        let n_individuals = individual_ix.len();
        let n_periods = period_ix.len();
        let mut t_i = vec![0usize; n_individuals];
        let mut n_t = vec![0usize; n_periods];
        for &(i, t) in &rows {
            t_i[i] += 1;
            n_t[t] += 1;
        }

        let mut block_start = Vec::with_capacity(n_individuals + 1);
        block_start.push(0);
        for &count in &t_i {
            let last = *block_start.last().unwrap();
            block_start.push(last + count);
        }

        let mut duration_groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &count) in t_i.iter().enumerate() {
            duration_groups.entry(count).or_default().push(i);
        }

        Ok(PanelIndex {
            individual_labels: individuals.iter().map(|i| i.to_string()).collect(),
            period_labels: periods.iter().map(|t| t.to_string()).collect(),
            row_individual: rows.iter().map(|&(i, _)| i).collect(),
            row_period: rows.iter().map(|&(_, t)| t).collect(),
            block_start,
            t_i,
            n_t,
            duration_groups,
        })
    }

    /// Total number of observations n.
    pub fn n_obs(&self) -> usize {
        self.row_individual.len()
    }

    /// Number of distinct individuals N.
    pub fn n_individuals(&self) -> usize {
        self.t_i.len()
    }

    /// Number of distinct periods T.
    pub fn n_periods(&self) -> usize {
        self.n_t.len()
    }

    /// Observation count of each individual.
    pub fn t_i(&self) -> &[usize] {
        &self.t_i
    }

    /// Individual count of each period.
    pub fn n_t(&self) -> &[usize] {
        &self.n_t
    }

    /// Dense individual index of each row (individual-major order).
    pub fn row_individual(&self) -> &[usize] {
        &self.row_individual
    }

    /// Dense period index of each row.
    pub fn row_period(&self) -> &[usize] {
        &self.row_period
    }

    /// Rows `start..end` belonging to individual `i`.
    pub fn rows_of(&self, i: usize) -> std::ops::Range<usize> {
        self.block_start[i]..self.block_start[i + 1]
    }

    /// Periods in which individual `i` is observed, ascending.
    pub fn periods_of(&self, i: usize) -> &[usize] {
        &self.row_period[self.rows_of(i)]
    }

    /// Individuals observed exactly `p` times (duration group I_p).
    pub fn duration_group(&self, p: usize) -> &[usize] {
        self.duration_groups
            .get(&p)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// All populated durations with their groups, ascending in p.
    pub fn duration_groups(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.duration_groups.iter().map(|(&p, v)| (p, v.as_slice()))
    }

    /// Cumulated individual counts C_p = sum_{h<=p} N_h for p = 1..=T.
    pub fn cumulative_duration_counts(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_periods());
        let mut acc = 0usize;
        for p in 1..=self.n_periods() {
            acc += self.duration_group(p).len();
            out.push(acc);
        }
        out
    }

    /// Original label of individual `i`.
    pub fn individual_label(&self, i: usize) -> &str {
        &self.individual_labels[i]
    }

    /// Original label of period `t`.
    pub fn period_label(&self, t: usize) -> &str {
        &self.period_labels[t]
    }

    /// Dense index of an individual label, if present.
    pub fn individual_index(&self, label: &str) -> Option<usize> {
        self.individual_labels.iter().position(|l| l == label)
    }

    /// Rows as (individual, period) label pairs, in canonical order.
    pub fn row_labels(&self) -> impl Iterator<Item = (&str, &str)> {
        self.row_individual
            .iter()
            .zip(&self.row_period)
            .map(|(&i, &t)| (self.individual_labels[i].as_str(), self.period_labels[t].as_str()))
    }
}

/// How individuals are mapped into strata.
#[derive(Debug, Clone)]
pub enum StrataRule {
    /// Explicit per-individual labels, in `PanelIndex` individual order.
    Explicit(Vec<String>),
    /// Rank the per-individual scalar (one value per individual, index order)
    /// and cut into `count` near-equal groups. Ties break by individual index.
    Quantiles { values: Vec<f64>, count: usize },
}

impl StrataRule {
    /// Decile stratification of a per-individual covariate summary.
    pub fn deciles(values: Vec<f64>) -> Self {
        StrataRule::Quantiles { values, count: 10 }
    }
}

/// Individual-to-stratum assignment with derived per-stratum bookkeeping.
#[derive(Debug, Clone)]
pub struct StrataAssignment {
    stratum_labels: Vec<String>,
    /// Stratum of each individual.
    stratum_of: Vec<usize>,
    /// Stratum of each row (follows `PanelIndex` row order).
    row_stratum: Vec<usize>,
    /// Individuals per stratum (N_a).
    individuals: Vec<Vec<usize>>,
    /// Observations per stratum (n_a).
    n_a: Vec<usize>,
    /// Rows per stratum, ascending (the H_a selector).
    rows: Vec<Vec<usize>>,
    /// Stratum-a individual count in each period (N_{t,a}).
    per_period: Vec<Vec<usize>>,
}

impl StrataAssignment {
    /// Assign every individual of `index` to a stratum according to `rule`.
    pub fn assign(index: &PanelIndex, rule: &StrataRule) -> Result<Self> {
        let n_ind = index.n_individuals();
        let (labels, stratum_of) = match rule {
            StrataRule::Explicit(per_individual) => {
                if per_individual.len() != n_ind {
                    return Err(Error::UncoveredIndividual {
                        individual: index
                            .individual_label(per_individual.len().min(n_ind - 1))
                            .to_string(),
                    });
                }
                let mut labels: Vec<String> = per_individual.clone();
                labels.sort();
                labels.dedup();
                let stratum_of = per_individual
                    .iter()
                    .map(|l| labels.binary_search(l).unwrap())
                    .collect();
                (labels, stratum_of)
            }
            StrataRule::Quantiles { values, count } => {
                if values.len() != n_ind {
                    return Err(Error::UncoveredIndividual {
                        individual: index
                            .individual_label(values.len().min(n_ind - 1))
                            .to_string(),
                    });
                }
                let a = *count;
                if a == 0 || n_ind < a {
                    return Err(Error::EmptyStratum { stratum: n_ind + 1 });
                }
                for (i, v) in values.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!(
                                "stratifying covariate of individual `{}`",
                                index.individual_label(i)
                            ),
                        });
                    }
                }
                let mut order: Vec<usize> = (0..n_ind).collect();
                // Stable: ties keep individual-index order.
                order.sort_by(|&x, &y| values[x].partial_cmp(&values[y]).unwrap());
                let mut stratum_of = vec![0usize; n_ind];
                for (rank, &i) in order.iter().enumerate() {
                    stratum_of[i] = rank * a / n_ind;
                }
                let labels = (1..=a).map(|q| q.to_string()).collect();
                (labels, stratum_of)
            }
        };

        let a = labels.len();
        let mut individuals: Vec<Vec<usize>> = vec![Vec::new(); a];
        for (i, &s) in stratum_of.iter().enumerate() {
            individuals[s].push(i);
        }
        if let Some(empty) = individuals.iter().position(Vec::is_empty) {
            return Err(Error::EmptyStratum { stratum: empty + 1 });
        }

        let mut row_stratum = vec![0usize; index.n_obs()];
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); a];
        let mut n_a = vec![0usize; a];
        let mut per_period = vec![vec![0usize; index.n_periods()]; a];
        for i in 0..index.n_individuals() {
            let s = stratum_of[i];
            for r in index.rows_of(i) {
                row_stratum[r] = s;
                rows[s].push(r);
                n_a[s] += 1;
                per_period[s][index.row_period()[r]] += 1;
            }
        }

        Ok(StrataAssignment {
            stratum_labels: labels,
            stratum_of,
            row_stratum,
            individuals,
            n_a,
            rows,
            per_period,
        })
    }

    /// Number of strata A.
    pub fn n_strata(&self) -> usize {
        self.stratum_labels.len()
    }

    /// Stratum index of individual `i`.
    pub fn stratum_of(&self, i: usize) -> usize {
        self.stratum_of[i]
    }

    /// Stratum index of each row.
    pub fn row_stratum(&self) -> &[usize] {
        &self.row_stratum
    }

    /// Individuals in stratum `a` (the set I_a).
    pub fn individuals(&self, a: usize) -> &[usize] {
        &self.individuals[a]
    }

    /// Individual count per stratum (N_a).
    pub fn individual_counts(&self) -> Vec<usize> {
        self.individuals.iter().map(Vec::len).collect()
    }

    /// Observation count per stratum (n_a).
    pub fn obs_counts(&self) -> &[usize] {
        &self.n_a
    }

    /// Rows of stratum `a`, ascending; this is the row list of H_a.
    pub fn rows(&self, a: usize) -> &[usize] {
        &self.rows[a]
    }

    /// Count of stratum-`a` individuals observed in each period (N_{t,a}).
    pub fn per_period_counts(&self, a: usize) -> &[usize] {
        &self.per_period[a]
    }

    /// Periods in which any individual of stratum `a` is observed (J_a).
    pub fn periods(&self, a: usize) -> Vec<usize> {
        self.per_period[a]
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(t, _)| t)
            .collect()
    }

    /// Individuals of stratum `a` observed exactly `p` times (I_{a,p}).
    pub fn duration_intersection(&self, index: &PanelIndex, a: usize, p: usize) -> Vec<usize> {
        self.individuals[a]
            .iter()
            .copied()
            .filter(|&i| index.t_i()[i] == p)
            .collect()
    }

    /// Original label of stratum `a`.
    pub fn label(&self, a: usize) -> &str {
        &self.stratum_labels[a]
    }
}

/// The indicator matrices of the panel and their products, stored sparsely
/// (one nonzero per row) with dense materialization on demand.
#[derive(Debug, Clone)]
pub struct IncidenceSet {
    index: PanelIndex,
    strata: StrataAssignment,
}

impl IncidenceSet {
    /// Bundle a panel index with a consistent stratum assignment.
    pub fn new(index: PanelIndex, strata: StrataAssignment) -> Result<Self> {
        if strata.row_stratum.len() != index.n_obs() {
            return Err(Error::InconsistentInputs {
                reason: format!(
                    "strata cover {} rows but the panel has {}",
                    strata.row_stratum.len(),
                    index.n_obs()
                ),
            });
        }
        Ok(IncidenceSet { index, strata })
    }

    pub fn index(&self) -> &PanelIndex {
        &self.index
    }

    pub fn strata(&self) -> &StrataAssignment {
        &self.strata
    }

    /// lambda_mu = sum_i T_i^2 / n.
    pub fn lambda_mu(&self) -> f64 {
        let n = self.index.n_obs() as f64;
        self.index.t_i().iter().map(|&t| (t * t) as f64).sum::<f64>() / n
    }

    /// lambda_nu = sum_t N_t^2 / n.
    pub fn lambda_nu(&self) -> f64 {
        let n = self.index.n_obs() as f64;
        self.index.n_t().iter().map(|&c| (c * c) as f64).sum::<f64>() / n
    }

    /// lambda_{mu_a} = sum_{i in I_a} T_i^2 / n.
    pub fn lambda_mu_a(&self, a: usize) -> f64 {
        let n = self.index.n_obs() as f64;
        self.strata
            .individuals(a)
            .iter()
            .map(|&i| {
                let t = self.index.t_i()[i];
                (t * t) as f64
            })
            .sum::<f64>()
            / n
    }

    /// lambda_{nu_a} = sum_t N_t N_{t,a} / n (matrix form of the definition).
    pub fn lambda_nu_a(&self, a: usize) -> f64 {
        let n = self.index.n_obs() as f64;
        self.strata
            .per_period_counts(a)
            .iter()
            .zip(self.index.n_t())
            .map(|(&cta, &ct)| (cta * ct) as f64)
            .sum::<f64>()
            / n
    }

    /// Dense n x N individual-incidence matrix.
    pub fn delta_mu_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.index.n_obs(), self.index.n_individuals());
        for (r, &i) in self.index.row_individual().iter().enumerate() {
            m[(r, i)] = 1.0;
        }
        m
    }

    /// Dense n x T period-incidence matrix.
    pub fn delta_nu_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.index.n_obs(), self.index.n_periods());
        for (r, &t) in self.index.row_period().iter().enumerate() {
            m[(r, t)] = 1.0;
        }
        m
    }

    /// Dense n x A stratum-incidence matrix.
    pub fn delta_alpha_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.index.n_obs(), self.strata.n_strata());
        for (r, &a) in self.strata.row_stratum().iter().enumerate() {
            m[(r, a)] = 1.0;
        }
        m
    }

    /// Dense T x N 0/1 matrix flagging presence of individual i at period t.
    pub fn delta_tn_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.index.n_periods(), self.index.n_individuals());
        for i in 0..self.index.n_individuals() {
            for &t in self.index.periods_of(i) {
                m[(t, i)] = 1.0;
            }
        }
        m
    }

    /// Dense A x N 0/1 matrix flagging membership of individual i in stratum a.
    pub fn delta_an_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.strata.n_strata(), self.index.n_individuals());
        for (i, &a) in self.strata.stratum_of.iter().enumerate() {
            m[(a, i)] = 1.0;
        }
        m
    }
}

/// Build a [`PanelIndex`] from raw observation pairs.
pub fn build_panel_index<I, P>(observations: &[(I, P)]) -> Result<PanelIndex>
where
    I: Ord + Clone + Display,
    P: Ord + Clone + Display,
{
    PanelIndex::from_observations(observations)
}

/// Assign strata according to `rule`; see [`StrataRule`].
pub fn assign_strata(index: &PanelIndex, rule: &StrataRule) -> Result<StrataAssignment> {
    StrataAssignment::assign(index, rule)
}

/// Bundle index and strata into an [`IncidenceSet`].
pub fn build_incidence(index: &PanelIndex, strata: &StrataAssignment) -> Result<IncidenceSet> {
    IncidenceSet::new(index.clone(), strata.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_rows() -> Vec<(u32, u32)> {
        vec![(1, 1), (1, 2), (2, 2)]
    }

    #[test]
    fn balanced_counts() {
        let obs: Vec<(u32, u32)> = (1..=4)
            .flat_map(|i| (1..=3).map(move |t| (i, t)))
            .collect();
        let ix = build_panel_index(&obs).unwrap();
        assert_eq!(ix.n_obs(), 12);
        assert!(ix.t_i().iter().all(|&t| t == 3));
        assert!(ix.n_t().iter().all(|&c| c == 4));
    }

    #[test]
    fn hand_counts_small_unbalanced() {
        let ix = build_panel_index(&toy_rows()).unwrap();
        assert_eq!(ix.n_individuals(), 2);
        assert_eq!(ix.n_periods(), 2);
        assert_eq!(ix.n_obs(), 3);
        assert_eq!(ix.t_i(), &[2, 1]);
        assert_eq!(ix.n_t(), &[1, 2]);
        // Duration groups partition the individuals.
        assert_eq!(ix.duration_group(1), &[1]);
        assert_eq!(ix.duration_group(2), &[0]);
        assert_eq!(ix.cumulative_duration_counts(), vec![1, 2]);
    }

    #[test]
    fn count_identities_hold() {
        let ix = build_panel_index(&toy_rows()).unwrap();
        let n: usize = ix.t_i().iter().sum();
        assert_eq!(n, ix.n_obs());
        let n2: usize = ix.n_t().iter().sum();
        assert_eq!(n2, ix.n_obs());
        let total_by_duration: usize = ix.duration_groups().map(|(p, g)| p * g.len()).sum();
        assert_eq!(total_by_duration, ix.n_obs());
    }

    #[test]
    fn rejects_duplicates_and_empty() {
        let err = build_panel_index(&[(1u32, 1u32), (1, 1)]).unwrap_err();
        assert!(matches!(err, Error::DuplicateObservation { .. }));
        let err = build_panel_index::<u32, u32>(&[]).unwrap_err();
        assert!(matches!(err, Error::EmptyPanel));
    }

    #[test]
    fn rows_are_individual_major_period_minor() {
        let ix = build_panel_index(&[(2u32, 1u32), (1, 2), (1, 1), (2, 3)]).unwrap();
        let rows: Vec<(usize, usize)> = ix
            .row_individual()
            .iter()
            .zip(ix.row_period())
            .map(|(&i, &t)| (i, t))
            .collect();
        assert_eq!(rows, vec![(0, 0), (0, 1), (1, 0), (1, 2)]);
    }

    #[test]
    fn single_stratum_assignment() {
        let ix = build_panel_index(&toy_rows()).unwrap();
        let strata =
            assign_strata(&ix, &StrataRule::Explicit(vec!["1".into(), "1".into()])).unwrap();
        assert_eq!(strata.n_strata(), 1);
        assert_eq!(strata.individual_counts(), vec![2]);
        assert_eq!(strata.obs_counts(), &[3]);
    }

    #[test]
    fn deciles_split_evenly_with_distinct_values() {
        let obs: Vec<(u32, u32)> = (0..20).map(|i| (i, 1u32)).collect();
        let ix = build_panel_index(&obs).unwrap();
        let values: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let strata = assign_strata(&ix, &StrataRule::deciles(values)).unwrap();
        assert_eq!(strata.n_strata(), 10);
        assert!(strata.individual_counts().iter().all(|&c| c == 2));
    }

    #[test]
    fn stratum_bookkeeping_consistent() {
        let obs = vec![(1u32, 1u32), (1, 2), (2, 2), (3, 1), (3, 2), (3, 3)];
        let ix = build_panel_index(&obs).unwrap();
        let strata = assign_strata(
            &ix,
            &StrataRule::Explicit(vec!["a".into(), "b".into(), "a".into()]),
        )
        .unwrap();
        assert_eq!(strata.n_strata(), 2);
        let total_na: usize = strata.individual_counts().iter().sum();
        assert_eq!(total_na, ix.n_individuals());
        let total_obs: usize = strata.obs_counts().iter().sum();
        assert_eq!(total_obs, ix.n_obs());
        // n_a = sum of T_i over the stratum.
        for a in 0..2 {
            let by_ti: usize = strata.individuals(a).iter().map(|&i| ix.t_i()[i]).sum();
            assert_eq!(by_ti, strata.obs_counts()[a]);
        }
        assert_eq!(strata.periods(0), vec![0, 1, 2]);
        assert_eq!(strata.periods(1), vec![1]);
        assert_eq!(strata.duration_intersection(&ix, 0, 2), vec![0]);
        assert_eq!(strata.duration_intersection(&ix, 0, 3), vec![2]);
    }

    #[test]
    fn uncovered_individual_rejected() {
        let ix = build_panel_index(&toy_rows()).unwrap();
        let err = assign_strata(&ix, &StrataRule::Explicit(vec!["1".into()])).unwrap_err();
        assert!(matches!(err, Error::UncoveredIndividual { .. }));
    }

    #[test]
    fn incidence_products_on_balanced_2x2() {
        let obs = vec![(1u32, 1u32), (1, 2), (2, 1), (2, 2)];
        let ix = build_panel_index(&obs).unwrap();
        let strata = assign_strata(&ix, &StrataRule::Explicit(vec!["1".into(); 2])).unwrap();
        let inc = build_incidence(&ix, &strata).unwrap();
        let dmu = inc.delta_mu_dense();
        let dnu = inc.delta_nu_dense();
        let dn = dmu.transpose() * &dmu;
        let dt = dnu.transpose() * &dnu;
        assert_eq!(dn, DMatrix::from_diagonal_element(2, 2, 2.0));
        assert_eq!(dt, DMatrix::from_diagonal_element(2, 2, 2.0));
        let dtn = dnu.transpose() * &dmu;
        assert_eq!(dtn, DMatrix::from_element(2, 2, 1.0));
        assert_eq!(inc.delta_tn_dense(), dtn);
    }

    #[test]
    fn incidence_tn_hand_construction() {
        let ix = build_panel_index(&toy_rows()).unwrap();
        let strata = assign_strata(&ix, &StrataRule::Explicit(vec!["1".into(); 2])).unwrap();
        let inc = build_incidence(&ix, &strata).unwrap();
        let dtn = inc.delta_tn_dense();
        assert_eq!(dtn, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]));
    }

    #[test]
    fn lambda_values_match_raw_counts() {
        let obs = vec![(1u32, 1u32), (1, 2), (2, 2), (3, 1), (3, 2), (3, 3)];
        let ix = build_panel_index(&obs).unwrap();
        let strata = assign_strata(&ix, &StrataRule::Explicit(vec!["1".into(); 3])).unwrap();
        let inc = build_incidence(&ix, &strata).unwrap();
        let n = ix.n_obs() as f64;
        let lam_mu: f64 = ix.t_i().iter().map(|&t| (t * t) as f64).sum::<f64>() / n;
        let lam_nu: f64 = ix.n_t().iter().map(|&c| (c * c) as f64).sum::<f64>() / n;
        assert_eq!(inc.lambda_mu(), lam_mu);
        assert_eq!(inc.lambda_nu(), lam_nu);
        // Single stratum: the per-stratum values collapse onto the totals.
        assert_eq!(inc.lambda_mu_a(0), lam_mu);
        assert_eq!(inc.lambda_nu_a(0), lam_nu);
    }
}
