//! Balance metrics for candidate allocation schemes.
//!
//! Two multi-arm metrics are provided, both taking the maximum over all
//! unordered arm pairs:
//!
//! * the weighted `l2` metric `max_{i≠i'} Σ_l ω_l (x̄_il − x̄_i'l)²`, and
//! * the Mahalanobis distance `max_{i≠i'} (X̄_i − X̄_i')' S⁻¹ (X̄_i − X̄_i')`,
//!
//! where `x̄_il` is the mean of cluster-level column `l` over the clusters in
//! arm `i`, and `S` is the sample covariance of the selected columns over all
//! `G` clusters. `S` is estimated once from the full cluster table, never per
//! scheme, so scores are comparable across schemes. When `S` is singular its
//! Moore–Penrose pseudo-inverse is used and the scorer carries a warning flag.

use crate::design::{CovariateTable, TrialDesign};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BalanceMetric {
    L2,
    Mahalanobis,
}

impl BalanceMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            BalanceMetric::L2 => "l2",
            BalanceMetric::Mahalanobis => "mahalanobis",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(BalanceMetric::L2),
            "mahalanobis" => Ok(BalanceMetric::Mahalanobis),
            other => Err(Error::InvalidArgument(format!(
                "unknown balance metric `{other}`"
            ))),
        }
    }
}

/// One column entering a balance metric: either a cluster-level column of
/// the covariate table, or the cluster-level aggregate of an individual-level
/// column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BalanceColumn {
    Cluster(usize),
    AggregatedIndividual(usize),
}

/// Which columns a balance metric scores, prior to weight/covariance
/// estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSpec {
    pub metric: BalanceMetric,
    pub columns: Vec<BalanceColumn>,
    /// Optional user weights for the l2 metric; defaults to inverse variances.
    pub weights: Option<Vec<f64>>,
}

impl BalanceSpec {
    pub fn l2(columns: Vec<BalanceColumn>) -> Self {
        Self {
            metric: BalanceMetric::L2,
            columns,
            weights: None,
        }
    }

    pub fn mahalanobis(columns: Vec<BalanceColumn>) -> Self {
        Self {
            metric: BalanceMetric::Mahalanobis,
            columns,
            weights: None,
        }
    }

    /// Materialize the selected `G × L` matrix (column major) with names.
    pub fn select_matrix(
        &self,
        table: &CovariateTable,
    ) -> Result<(Vec<Vec<f64>>, Vec<String>)> {
        let mut cols = Vec::with_capacity(self.columns.len());
        let mut names = Vec::with_capacity(self.columns.len());
        let aggregates = if self
            .columns
            .iter()
            .any(|c| matches!(c, BalanceColumn::AggregatedIndividual(_)))
        {
            table.aggregate_to_cluster()?
        } else {
            Vec::new()
        };
        for col in &self.columns {
            match *col {
                BalanceColumn::Cluster(idx) => {
                    if idx >= table.n_cluster_columns() {
                        return Err(Error::InvalidArgument(format!(
                            "cluster covariate index {idx} out of range"
                        )));
                    }
                    cols.push(table.cluster_column(idx).to_vec());
                    names.push(table.cluster_names()[idx].clone());
                }
                BalanceColumn::AggregatedIndividual(idx) => {
                    if idx >= table.n_individual_columns() {
                        return Err(Error::InvalidArgument(format!(
                            "individual covariate index {idx} out of range"
                        )));
                    }
                    cols.push(aggregates[idx].clone());
                    names.push(format!("mean({})", table.individual_names()[idx]));
                }
            }
        }
        Ok((cols, names))
    }
}

/// Inverse-variance weights `ω_l = 1 / var(x_l)` using the unbiased (n−1)
/// sample variance, the default weighting of the l2 metric.
pub fn default_weights(columns: &[Vec<f64>], names: &[String]) -> Result<Vec<f64>> {
    columns
        .iter()
        .enumerate()
        .map(|(l, col)| {
            let v = sample_variance(col);
            if v <= 0.0 || !v.is_finite() {
                Err(Error::DegenerateCovariate {
                    name: names
                        .get(l)
                        .cloned()
                        .unwrap_or_else(|| format!("column {l}")),
                    reason: "zero sample variance".into(),
                })
            } else {
                Ok(1.0 / v)
            }
        })
        .collect()
}

fn sample_variance(col: &[f64]) -> f64 {
    let n = col.len();
    if n < 2 {
        return 0.0;
    }
    let mean = col.iter().sum::<f64>() / n as f64;
    col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Sample covariance matrix (denominator G−1) of the selected columns.
fn sample_covariance(columns: &[Vec<f64>]) -> DMatrix<f64> {
    let l = columns.len();
    let g = columns.first().map_or(0, |c| c.len());
    let means: Vec<f64> = columns.iter().map(|c| c.iter().sum::<f64>() / g as f64).collect();
    let mut s = DMatrix::zeros(l, l);
    for a in 0..l {
        for b in a..l {
            let mut acc = 0.0;
            for j in 0..g {
                acc += (columns[a][j] - means[a]) * (columns[b][j] - means[b]);
            }
            let v = acc / (g as f64 - 1.0);
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
    }
    s
}

/// Maximum pairwise weighted l2 imbalance of a scheme over the selected
/// columns.
pub fn l2_score(
    labels: &[u8],
    design: &TrialDesign,
    columns: &[Vec<f64>],
    weights: &[f64],
) -> f64 {
    let scorer = prepared_l2(design, columns, weights.to_vec());
    scorer.score(labels)
}

/// Maximum pairwise Mahalanobis imbalance of a scheme; `S` is estimated from
/// the selected columns over all clusters. Returns the score together with a
/// flag that is true when `S` was singular and a pseudo-inverse was used.
pub fn mahalanobis_score(
    labels: &[u8],
    design: &TrialDesign,
    columns: &[Vec<f64>],
) -> (f64, bool) {
    let scorer = prepared_mahalanobis(design, columns);
    let singular = scorer.singular_covariance();
    (scorer.score(labels), singular)
}

fn prepared_l2(design: &TrialDesign, columns: &[Vec<f64>], weights: Vec<f64>) -> BalanceScorer {
    BalanceScorer {
        matrix: columns.to_vec(),
        names: Vec::new(),
        n_arms: design.n_arms(),
        clusters_per_arm: design.clusters_per_arm().to_vec(),
        kind: ScorerKind::L2 { weights },
    }
}

fn prepared_mahalanobis(design: &TrialDesign, columns: &[Vec<f64>]) -> BalanceScorer {
    let s = sample_covariance(columns);
    let (s_inv, singular) = pseudo_inverse(&s);
    BalanceScorer {
        matrix: columns.to_vec(),
        names: Vec::new(),
        n_arms: design.n_arms(),
        clusters_per_arm: design.clusters_per_arm().to_vec(),
        kind: ScorerKind::Mahalanobis { s_inv, singular },
    }
}

fn pseudo_inverse(s: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let l = s.nrows();
    if l == 0 {
        return (DMatrix::zeros(0, 0), false);
    }
    let svd = s.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = max_sv * l as f64 * f64::EPSILON * 16.0;
    let rank = svd.singular_values.iter().filter(|&&v| v > tol).count();
    let inv = svd
        .pseudo_inverse(tol)
        .unwrap_or_else(|_| DMatrix::zeros(l, l));
    (inv, rank < l)
}

#[derive(Debug, Clone)]
enum ScorerKind {
    L2 { weights: Vec<f64> },
    Mahalanobis { s_inv: DMatrix<f64>, singular: bool },
}

/// A balance metric bound to its covariate matrix and estimated weights or
/// covariance, ready to score many schemes cheaply.
#[derive(Debug, Clone)]
pub struct BalanceScorer {
    /// Selected columns, each of length `G`.
    matrix: Vec<Vec<f64>>,
    names: Vec<String>,
    n_arms: usize,
    clusters_per_arm: Vec<usize>,
    kind: ScorerKind,
}

impl BalanceScorer {
    /// Prepare a scorer from a spec and a covariate table. Default l2 weights
    /// are the inverse column variances; explicit weights must be nonnegative.
    pub fn prepare(spec: &BalanceSpec, table: &CovariateTable, design: &TrialDesign) -> Result<Self> {
        if table.n_clusters() != design.n_clusters() {
            return Err(Error::DesignViolation(
                "covariate table and design disagree on cluster count".into(),
            ));
        }
        let (matrix, names) = spec.select_matrix(table)?;
        if matrix.is_empty() {
            return Err(Error::InvalidArgument(
                "balance metric needs at least one column".into(),
            ));
        }
        let kind = match spec.metric {
            BalanceMetric::L2 => {
                let weights = match &spec.weights {
                    Some(w) => {
                        if w.len() != matrix.len() {
                            return Err(Error::InvalidArgument(format!(
                                "{} weights for {} balance columns",
                                w.len(),
                                matrix.len()
                            )));
                        }
                        if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                            return Err(Error::InvalidArgument(
                                "balance weights must be nonnegative and finite".into(),
                            ));
                        }
                        w.clone()
                    }
                    None => default_weights(&matrix, &names)?,
                };
                ScorerKind::L2 { weights }
            }
            BalanceMetric::Mahalanobis => {
                let s = sample_covariance(&matrix);
                let (s_inv, singular) = pseudo_inverse(&s);
                ScorerKind::Mahalanobis { s_inv, singular }
            }
        };
        Ok(Self {
            matrix,
            names,
            n_arms: design.n_arms(),
            clusters_per_arm: design.clusters_per_arm().to_vec(),
            kind,
        })
    }

    pub fn metric(&self) -> BalanceMetric {
        match self.kind {
            ScorerKind::L2 { .. } => BalanceMetric::L2,
            ScorerKind::Mahalanobis { .. } => BalanceMetric::Mahalanobis,
        }
    }

    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    /// True when the Mahalanobis covariance was singular and a pseudo-inverse
    /// is in use.
    pub fn singular_covariance(&self) -> bool {
        matches!(self.kind, ScorerKind::Mahalanobis { singular: true, .. })
    }

    /// Score a single label vector.
    pub fn score(&self, labels: &[u8]) -> f64 {
        let l = self.matrix.len();
        let c = self.n_arms;
        // Per-arm column sums; arm means follow from the fixed g_i.
        let mut sums = vec![0.0f64; c * l];
        for (j, &lab) in labels.iter().enumerate() {
            let base = usize::from(lab) * l;
            for (col_idx, col) in self.matrix.iter().enumerate() {
                sums[base + col_idx] += col[j];
            }
        }
        let mut means = sums;
        for arm in 0..c {
            let g = self.clusters_per_arm[arm] as f64;
            for v in &mut means[arm * l..(arm + 1) * l] {
                *v /= g;
            }
        }
        let mut best = 0.0f64;
        for a in 0..c {
            for b in (a + 1)..c {
                let d: Vec<f64> = (0..l)
                    .map(|k| means[a * l + k] - means[b * l + k])
                    .collect();
                let pair = match &self.kind {
                    ScorerKind::L2 { weights } => {
                        d.iter().zip(weights).map(|(x, w)| w * x * x).sum::<f64>()
                    }
                    ScorerKind::Mahalanobis { s_inv, .. } => {
                        let dv = DVector::from_vec(d);
                        (dv.transpose() * s_inv * &dv)[(0, 0)]
                    }
                };
                if pair > best {
                    best = pair;
                }
            }
        }
        best
    }

    /// Score many schemes stored as a flat label buffer of stride `g`.
    pub fn score_flat(&self, labels_flat: &[u8], g: usize) -> Vec<f64> {
        labels_flat.chunks_exact(g).map(|s| self.score(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::TrialDesign;
    use approx::assert_relative_eq;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("x{i}")).collect()
    }

    #[test]
    fn default_weights_reciprocal_variance() {
        // (0, 2, 4): mean 2, ss 8, unbiased var 4 -> weight 0.25
        let w4 = default_weights(&[vec![0.0, 2.0, 4.0]], &names(1)).unwrap();
        assert_relative_eq!(w4[0], 0.25, max_relative = 1e-12);
        // standardized column (-1, 0, 1): variance 1 -> weight 1
        let w1 = default_weights(&[vec![-1.0, 0.0, 1.0]], &names(1)).unwrap();
        assert_relative_eq!(w1[0], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn default_weight_of_alternating_binary() {
        // var(0,1,0,1) = 1/3 -> weight 3
        let w = default_weights(&vec![vec![0.0, 1.0, 0.0, 1.0]], &names(1)).unwrap();
        assert_relative_eq!(w[0], 3.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_variance_column_is_named() {
        let err = default_weights(&vec![vec![2.0, 2.0, 2.0]], &vec!["volume".into()]).unwrap_err();
        assert!(err.to_string().contains("volume"));
    }

    #[test]
    fn l2_balanced_scheme_scores_zero() {
        let design = TrialDesign::balanced(3, 2, 1).unwrap();
        // identical clusters -> any scheme perfectly balanced
        let col = vec![1.5; 6];
        let s = l2_score(&[0, 0, 1, 1, 2, 2], &design, &[col], &[1.0]);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn l2_three_arm_hand_computed() {
        // one covariate, unit weight, arm means 0, 1, 0.5:
        // pairs (0,1): 1.0, (0,0.5): 0.25, (1,0.5): 0.25 -> max 1.0
        let design = TrialDesign::balanced(3, 2, 1).unwrap();
        let col = vec![0.0, 0.0, 1.0, 1.0, 0.5, 0.5];
        let s = l2_score(&[0, 0, 1, 1, 2, 2], &design, &[col], &[1.0]);
        assert_relative_eq!(s, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn l2_linear_in_weights() {
        let design = TrialDesign::balanced(3, 2, 1).unwrap();
        let cols = vec![
            vec![0.3, -1.2, 0.8, 2.0, -0.4, 0.9],
            vec![1.0, 0.0, 0.5, -0.5, 2.0, 1.5],
        ];
        let labels = [1u8, 0, 2, 1, 0, 2];
        let w = vec![0.7, 1.3];
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let s1 = l2_score(&labels, &design, &cols, &w);
        let s2 = l2_score(&labels, &design, &cols, &w2);
        assert_relative_eq!(s2, 2.0 * s1, max_relative = 1e-12);
    }

    #[test]
    fn mahalanobis_identity_reduces_to_unit_l2() {
        // With S = I the quadratic form is the unweighted l2 metric. Feed the
        // scorer a hand-built identity by scoring columns whose sample
        // covariance is the identity: use orthogonal ±1 patterns scaled.
        let design = TrialDesign::balanced(2, 2, 1).unwrap();
        // columns chosen so sample covariance is exactly I
        let a = 3.0f64.sqrt() / 2.0;
        let cols = vec![
            vec![a, -a, a, -a],
            vec![a, a, -a, -a],
        ];
        // check the construction first
        let s = sample_covariance(&cols);
        assert_relative_eq!(s[(0, 0)], 1.0, max_relative = 1e-12);
        assert_relative_eq!(s[(1, 1)], 1.0, max_relative = 1e-12);
        assert_relative_eq!(s[(0, 1)], 0.0, epsilon = 1e-12);
        let labels = [0u8, 1, 0, 1];
        let (m, singular) = mahalanobis_score(&labels, &design, &cols);
        assert!(!singular);
        let l2 = l2_score(&labels, &design, &cols, &[1.0, 1.0]);
        assert_relative_eq!(m, l2, max_relative = 1e-10);
    }

    #[test]
    fn mahalanobis_zero_when_arm_means_equal() {
        let design = TrialDesign::balanced(3, 2, 1).unwrap();
        let cols = vec![vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]];
        let (m, _) = mahalanobis_score(&[0, 0, 1, 1, 2, 2], &design, &cols);
        assert_relative_eq!(m, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn singular_covariance_flagged() {
        let design = TrialDesign::balanced(2, 2, 1).unwrap();
        // two identical columns -> singular S
        let col = vec![0.0, 1.0, 2.0, 3.0];
        let (_, singular) = mahalanobis_score(&[0, 1, 0, 1], &design, &[col.clone(), col]);
        assert!(singular);
    }

    #[test]
    fn arm_relabeling_invariance() {
        let design = TrialDesign::balanced(3, 2, 1).unwrap();
        let cols = vec![vec![0.1, 1.7, -0.3, 0.9, 2.2, -1.1]];
        let w = vec![1.0];
        let labels = [0u8, 1, 2, 0, 1, 2];
        // swap arm labels 0 <-> 2
        let swapped: Vec<u8> = labels.iter().map(|&l| match l {
            0 => 2,
            2 => 0,
            other => other,
        }).collect();
        let s1 = l2_score(&labels, &design, &cols, &w);
        let s2 = l2_score(&swapped, &design, &cols, &w);
        assert_relative_eq!(s1, s2, max_relative = 1e-12);
    }

    #[test]
    fn scorer_prepare_with_spec() {
        let design = TrialDesign::balanced(2, 2, 2).unwrap();
        let table = CovariateTable::new(
            vec![vec![0.0, 1.0, 0.0, 1.0]],
            vec!["x".into()],
            vec![vec![vec![1.0, 3.0], vec![2.0, 2.0], vec![0.0, 4.0], vec![5.0, 1.0]]],
            vec!["z".into()],
            4,
        )
        .unwrap();
        let spec = BalanceSpec::l2(vec![
            BalanceColumn::Cluster(0),
            BalanceColumn::AggregatedIndividual(0),
        ]);
        let scorer = BalanceScorer::prepare(&spec, &table, &design).unwrap();
        assert_eq!(scorer.column_names(), &["x".to_string(), "mean(z)".to_string()]);
        // aggregates: (2, 2, 2, 3); weight column x: var((0,1,0,1)) = 1/3 -> 3
        let s = scorer.score(&[0, 0, 1, 1]);
        // arm means x: (0.5, 0.5) -> 0; agg: (2.0, 2.5) -> diff 0.5
        // var(agg) = var(2,2,2,3) = 0.25 -> weight 4 -> 4 * 0.25 = 1.0
        assert_relative_eq!(s, 1.0, max_relative = 1e-12);
    }
}
