//! Domain types for multi-arm parallel cluster randomized trials: designs,
//! allocation schemes, covariate tables, and outcome datasets.
//!
//! Arms are indexed `0..c`; the reference arm defaults to the last arm. A
//! scheme is identified by its label vector alone; the ±1 treatment
//! indicators are a pure function of the labels and the design.

use crate::error::{Error, Result};

/// Structure of a balanced multi-arm parallel design: `c` arms with fixed
/// numbers of clusters per arm and fixed cluster sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialDesign {
    n_arms: usize,
    clusters_per_arm: Vec<usize>,
    cluster_sizes: Vec<usize>,
    reference_arm: usize,
}

impl TrialDesign {
    /// Build a design with the reference arm set to the last arm.
    pub fn new(clusters_per_arm: Vec<usize>, cluster_sizes: Vec<usize>) -> Result<Self> {
        let n_arms = clusters_per_arm.len();
        Self::with_reference(clusters_per_arm, cluster_sizes, n_arms.saturating_sub(1))
    }

    pub fn with_reference(
        clusters_per_arm: Vec<usize>,
        cluster_sizes: Vec<usize>,
        reference_arm: usize,
    ) -> Result<Self> {
        let n_arms = clusters_per_arm.len();
        if n_arms < 2 {
            return Err(Error::DesignViolation(format!(
                "need at least 2 arms, got {n_arms}"
            )));
        }
        if clusters_per_arm.iter().any(|&g| g == 0) {
            return Err(Error::DesignViolation(
                "every arm needs at least one cluster".into(),
            ));
        }
        let total: usize = clusters_per_arm.iter().sum();
        if cluster_sizes.len() != total {
            return Err(Error::DesignViolation(format!(
                "expected {total} cluster sizes, got {}",
                cluster_sizes.len()
            )));
        }
        if cluster_sizes.iter().any(|&m| m == 0) {
            return Err(Error::DesignViolation("cluster sizes must be >= 1".into()));
        }
        if reference_arm >= n_arms {
            return Err(Error::DesignViolation(format!(
                "reference arm {reference_arm} out of range for {n_arms} arms"
            )));
        }
        Ok(Self {
            n_arms,
            clusters_per_arm,
            cluster_sizes,
            reference_arm,
        })
    }

    /// Convenience constructor for the balanced simulation designs:
    /// `c` arms, `g` clusters per arm, `m` individuals per cluster.
    pub fn balanced(n_arms: usize, g: usize, m: usize) -> Result<Self> {
        Self::new(vec![g; n_arms], vec![m; n_arms * g])
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn clusters_per_arm(&self) -> &[usize] {
        &self.clusters_per_arm
    }

    /// Total number of clusters `G`.
    pub fn n_clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn cluster_sizes(&self) -> &[usize] {
        &self.cluster_sizes
    }

    /// Total number of individuals `N`.
    pub fn n_individuals(&self) -> usize {
        self.cluster_sizes.iter().sum()
    }

    pub fn reference_arm(&self) -> usize {
        self.reference_arm
    }

    /// Allocation proportion `π_i = g_i / G` for each arm.
    pub fn allocation_proportions(&self) -> Vec<f64> {
        let g_total = self.n_clusters() as f64;
        self.clusters_per_arm
            .iter()
            .map(|&g| g as f64 / g_total)
            .collect()
    }

    /// Non-reference arms in ascending order; these index the treatment
    /// effect vector δ and the columns of the indicator matrix.
    pub fn treatment_arms(&self) -> Vec<usize> {
        (0..self.n_arms).filter(|&a| a != self.reference_arm).collect()
    }

    /// A canonical label vector with the required per-arm counts:
    /// `g_0` zeros, then `g_1` ones, and so on.
    pub fn template_labels(&self) -> Vec<u8> {
        let mut labels = Vec::with_capacity(self.n_clusters());
        for (arm, &g) in self.clusters_per_arm.iter().enumerate() {
            labels.extend(std::iter::repeat(arm as u8).take(g));
        }
        labels
    }
}

/// One allocation of clusters to arms. Equality is label-vector equality,
/// which is the canonical identity used for deduplication.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AllocationScheme {
    labels: Vec<u8>,
}

impl AllocationScheme {
    /// Validate the per-arm counts against the design and wrap the labels.
    pub fn new(labels: Vec<u8>, design: &TrialDesign) -> Result<Self> {
        if labels.len() != design.n_clusters() {
            return Err(Error::DesignViolation(format!(
                "expected {} labels, got {}",
                design.n_clusters(),
                labels.len()
            )));
        }
        let mut counts = vec![0usize; design.n_arms()];
        for &l in &labels {
            let l = l as usize;
            if l >= design.n_arms() {
                return Err(Error::DesignViolation(format!(
                    "arm label {l} out of range for {} arms",
                    design.n_arms()
                )));
            }
            counts[l] += 1;
        }
        if counts != design.clusters_per_arm() {
            return Err(Error::DesignViolation(format!(
                "per-arm cluster counts {counts:?} do not match design {:?}",
                design.clusters_per_arm()
            )));
        }
        Ok(Self { labels })
    }

    /// Wrap labels that are known to satisfy the per-arm counts
    /// (e.g. permutations of a validated template).
    pub(crate) fn from_valid_labels(labels: Vec<u8>) -> Self {
        Self { labels }
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn arm_of(&self, cluster: usize) -> usize {
        self.labels[cluster] as usize
    }

    /// The ±1 indicator matrix as rows: row `j` holds `T_ij` for each
    /// treatment arm `i` in ascending non-reference order.
    pub fn indicator_rows(&self, design: &TrialDesign) -> Vec<Vec<i8>> {
        indicators_from_labels(&self.labels, design).expect("scheme consistent with design")
    }

    /// Recover the label vector from an indicator matrix produced by
    /// [`indicators_from_labels`].
    pub fn from_indicator_rows(rows: &[Vec<i8>], design: &TrialDesign) -> Result<Self> {
        let arms = design.treatment_arms();
        let mut labels = Vec::with_capacity(rows.len());
        for row in rows {
            if row.len() != arms.len() {
                return Err(Error::DesignViolation(format!(
                    "indicator row has {} entries, expected {}",
                    row.len(),
                    arms.len()
                )));
            }
            let positives: Vec<usize> = (0..row.len()).filter(|&i| row[i] == 1).collect();
            let arm = match positives.len() {
                0 => design.reference_arm(),
                1 => arms[positives[0]],
                _ => {
                    return Err(Error::DesignViolation(
                        "indicator row has more than one +1".into(),
                    ))
                }
            };
            labels.push(arm as u8);
        }
        Self::new(labels, design)
    }
}

/// Compute the G × (c−1) matrix with `T_ij = +1` if cluster `j` is in
/// treatment arm `i` and `−1` otherwise; the reference arm's rows are all −1.
pub fn indicators_from_labels(labels: &[u8], design: &TrialDesign) -> Result<Vec<Vec<i8>>> {
    // Validates counts as a side effect.
    let scheme = AllocationScheme::new(labels.to_vec(), design)?;
    let arms = design.treatment_arms();
    Ok(scheme
        .labels
        .iter()
        .map(|&l| {
            arms.iter()
                .map(|&a| if usize::from(l) == a { 1 } else { -1 })
                .collect()
        })
        .collect())
}

/// Cluster-level and individual-level baseline covariates.
///
/// Columns are stored column major; individual-level columns are stored per
/// cluster so that cluster sizes may vary.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    /// `p1` columns, each of length `G`.
    cluster_columns: Vec<Vec<f64>>,
    cluster_names: Vec<String>,
    /// `p2` columns, each holding one vector per cluster.
    individual_columns: Vec<Vec<Vec<f64>>>,
    individual_names: Vec<String>,
    n_clusters: usize,
}

impl CovariateTable {
    pub fn new(
        cluster_columns: Vec<Vec<f64>>,
        cluster_names: Vec<String>,
        individual_columns: Vec<Vec<Vec<f64>>>,
        individual_names: Vec<String>,
        n_clusters: usize,
    ) -> Result<Self> {
        if cluster_columns.len() != cluster_names.len() {
            return Err(Error::DesignViolation(
                "cluster column/name count mismatch".into(),
            ));
        }
        if individual_columns.len() != individual_names.len() {
            return Err(Error::DesignViolation(
                "individual column/name count mismatch".into(),
            ));
        }
        for (col, name) in cluster_columns.iter().zip(&cluster_names) {
            if col.len() != n_clusters {
                return Err(Error::DesignViolation(format!(
                    "cluster column `{name}` has {} rows, expected {n_clusters}",
                    col.len()
                )));
            }
        }
        for (col, name) in individual_columns.iter().zip(&individual_names) {
            if col.len() != n_clusters {
                return Err(Error::DesignViolation(format!(
                    "individual column `{name}` covers {} clusters, expected {n_clusters}",
                    col.len()
                )));
            }
            if col.iter().any(|c| c.is_empty()) {
                return Err(Error::DesignViolation(format!(
                    "individual column `{name}` has an empty cluster"
                )));
            }
        }
        Ok(Self {
            cluster_columns,
            cluster_names,
            individual_columns,
            individual_names,
            n_clusters,
        })
    }

    /// A table with no covariates at all.
    pub fn empty(n_clusters: usize) -> Self {
        Self {
            cluster_columns: Vec::new(),
            cluster_names: Vec::new(),
            individual_columns: Vec::new(),
            individual_names: Vec::new(),
            n_clusters,
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn n_cluster_columns(&self) -> usize {
        self.cluster_columns.len()
    }

    pub fn n_individual_columns(&self) -> usize {
        self.individual_columns.len()
    }

    pub fn cluster_column(&self, idx: usize) -> &[f64] {
        &self.cluster_columns[idx]
    }

    pub fn cluster_names(&self) -> &[String] {
        &self.cluster_names
    }

    pub fn individual_column(&self, idx: usize) -> &[Vec<f64>] {
        &self.individual_columns[idx]
    }

    pub fn individual_names(&self) -> &[String] {
        &self.individual_names
    }

    /// Per-cluster means `z̄_j` of every individual-level column, as a
    /// `G × p2` matrix stored column major.
    pub fn aggregate_to_cluster(&self) -> Result<Vec<Vec<f64>>> {
        aggregate_to_cluster(self)
    }
}

/// Per-cluster arithmetic means of each individual-level covariate column.
pub fn aggregate_to_cluster(covariates: &CovariateTable) -> Result<Vec<Vec<f64>>> {
    covariates
        .individual_columns
        .iter()
        .zip(&covariates.individual_names)
        .map(|(col, name)| {
            col.iter()
                .map(|vals| {
                    if vals.is_empty() {
                        Err(Error::DesignViolation(format!(
                            "individual column `{name}` has an empty cluster"
                        )))
                    } else {
                        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
                    }
                })
                .collect()
        })
        .collect()
}

/// Reference-cell dummy coding of a categorical column. Categories are
/// sorted lexicographically and the first becomes the reference; one 0/1
/// column named `name=category` is produced per remaining category.
pub fn dummy_code(name: &str, values: &[String]) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut categories: Vec<&String> = values.iter().collect();
    categories.sort();
    categories.dedup();
    let mut names = Vec::new();
    let mut columns = Vec::new();
    for cat in categories.iter().skip(1) {
        names.push(format!("{name}={cat}"));
        columns.push(
            values
                .iter()
                .map(|v| if v == *cat { 1.0 } else { 0.0 })
                .collect(),
        );
    }
    (names, columns)
}

/// A complete analyzable trial: design, realized allocation, covariates,
/// and one outcome vector per cluster.
#[derive(Debug, Clone)]
pub struct OutcomeDataset {
    design: TrialDesign,
    scheme: AllocationScheme,
    covariates: CovariateTable,
    outcomes: Vec<Vec<f64>>,
}

impl OutcomeDataset {
    pub fn new(
        design: TrialDesign,
        scheme: AllocationScheme,
        covariates: CovariateTable,
        outcomes: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if covariates.n_clusters() != design.n_clusters() {
            return Err(Error::DesignViolation(format!(
                "covariate table covers {} clusters, design has {}",
                covariates.n_clusters(),
                design.n_clusters()
            )));
        }
        if outcomes.len() != design.n_clusters() {
            return Err(Error::DesignViolation(format!(
                "outcomes cover {} clusters, design has {}",
                outcomes.len(),
                design.n_clusters()
            )));
        }
        for (j, (y, &m)) in outcomes.iter().zip(design.cluster_sizes()).enumerate() {
            if y.len() != m {
                return Err(Error::DesignViolation(format!(
                    "cluster {j}: {} outcomes, expected {m}",
                    y.len()
                )));
            }
        }
        for (idx, name) in covariates.individual_names.iter().enumerate() {
            for (j, vals) in covariates.individual_columns[idx].iter().enumerate() {
                if vals.len() != design.cluster_sizes()[j] {
                    return Err(Error::DesignViolation(format!(
                        "individual covariate `{name}`, cluster {j}: {} values, expected {}",
                        vals.len(),
                        design.cluster_sizes()[j]
                    )));
                }
            }
        }
        // AllocationScheme::new has already enforced the per-arm counts.
        let scheme = AllocationScheme::new(scheme.labels().to_vec(), &design)?;
        Ok(Self {
            design,
            scheme,
            covariates,
            outcomes,
        })
    }

    pub fn design(&self) -> &TrialDesign {
        &self.design
    }

    pub fn scheme(&self) -> &AllocationScheme {
        &self.scheme
    }

    pub fn covariates(&self) -> &CovariateTable {
        &self.covariates
    }

    pub fn outcomes(&self) -> &[Vec<f64>] {
        &self.outcomes
    }

    /// Same trial with the outcome vectors replaced (used by test inversion).
    pub fn with_outcomes(&self, outcomes: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(
            self.design.clone(),
            self.scheme.clone(),
            self.covariates.clone(),
            outcomes,
        )
    }
}
