//! Monte Carlo harness: data generation and factorial type-I-error / power
//! experiments over design-based and analysis-based adjustment strategies.
//!
//! The data generating process draws, per replicate, two cluster-level
//! Bernoulli(0.3) covariates and two individual-level normal covariates with
//! cluster-specific means uniform on (−2, 2), then
//!
//! ```text
//! Y_jk = z_jk'β_z + x_j'β_x + δ_1 T_1j + ... + δ_{c−1} T_{c−1,j} + γ_j + ε_jk
//! ```
//!
//! with `γ_j ~ N(μ_γ, σ_γ²)`, `ε_jk ~ N(0, σ_ε²)`, and
//! `σ_γ² = ρ σ_ε²/(1−ρ)`. Heavy-tailed variants replace `γ_j` or `ε_jk` by
//! standard Cauchy draws. Standardized effect sizes are converted through
//! the total-SD convention `δ = es·√(σ_ε² + σ_γ²)/2`, so the arm-vs-reference
//! mean difference `2δ` equals `es` total standard deviations.
//!
//! Replicates are embarrassingly parallel. Every random stream is derived
//! from `(root seed, purpose, DGP tag, replicate)` — and scheme selection
//! additionally from the design-arm tag — so per-cell results are
//! bit-identical for any worker count, and cells that share a DGP reuse the
//! same simulated datasets whether they are run together or separately.

use crate::balance::{BalanceColumn, BalanceMetric, BalanceScorer, BalanceSpec};
use crate::design::{AllocationScheme, CovariateTable, OutcomeDataset, TrialDesign};
use crate::error::{Error, Result};
use crate::lmm::{fit, Adjustment, ClusterCovariate, FitMethod, ModelSpec};
use crate::model_tests::{
    wald_global_chisq, wald_global_f, wald_pairwise_t, wald_pairwise_z, TestResult,
};
use crate::rand_tests::{self, NullFit, PairwiseSpaceOptions, RandTestResult};
use crate::seed::{derive_rng, derive_seed};
use crate::space::{build_space, Cutoff, RandomizationSpace};
use rand::Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    Normal,
    /// Cluster effect γ_j replaced by a standard Cauchy draw.
    CauchyClusterEffect,
    /// Residual ε_jk replaced by a standard Cauchy draw.
    CauchyResidual,
}

impl NoiseFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseFamily::Normal => "normal",
            NoiseFamily::CauchyClusterEffect => "cauchy-cluster",
            NoiseFamily::CauchyResidual => "cauchy-residual",
        }
    }
}

/// Treatment effects of the DGP: none, standardized effect sizes, or
/// explicit δ values (one per non-reference arm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EffectSpec {
    Null,
    StandardizedEs(Vec<f64>),
    Delta(Vec<f64>),
}

impl EffectSpec {
    pub fn describe(&self) -> String {
        match self {
            EffectSpec::Null => "null".into(),
            EffectSpec::StandardizedEs(es) => format!(
                "es:{}",
                es.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("/")
            ),
            EffectSpec::Delta(d) => format!(
                "delta:{}",
                d.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("/")
            ),
        }
    }
}

/// `σ_γ² = ρ σ_ε² / (1 − ρ)`.
pub fn icc_to_sigma_gamma2(rho: f64, sigma_eps2: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!(
            "ICC must lie in [0, 1), got {rho}"
        )));
    }
    if !(sigma_eps2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "residual variance must be positive, got {sigma_eps2}"
        )));
    }
    Ok(rho * sigma_eps2 / (1.0 - rho))
}

/// δ from a standardized effect size under the total-SD convention:
/// `δ = es · √(σ_ε² + σ_γ²) / 2`, so the mean difference 2δ is `es` SDs.
pub fn effect_from_es(es: f64, rho: f64, sigma_eps2: f64) -> Result<f64> {
    let sigma_gamma2 = icc_to_sigma_gamma2(rho, sigma_eps2)?;
    Ok(es * (sigma_eps2 + sigma_gamma2).sqrt() / 2.0)
}

/// Parameters of the simulation data generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_arms: usize,
    /// Clusters per arm.
    pub g: usize,
    /// Individuals per cluster.
    pub m: usize,
    /// Intraclass correlation ρ.
    pub rho: f64,
    pub sigma_eps2: f64,
    pub mu_gamma: f64,
    /// Variance of the individual-level covariates around their cluster mean.
    pub sigma_z2: f64,
    pub n_individual_covariates: usize,
    pub n_cluster_covariates: usize,
    /// Success probability of the cluster-level binary covariates.
    pub bernoulli_p: f64,
    pub beta_z: Vec<f64>,
    pub beta_x: Vec<f64>,
    pub effects: EffectSpec,
    pub noise: NoiseFamily,
}

impl DgpConfig {
    /// The configuration of the simulation studies: three arms, m = 150,
    /// σ_ε² = 4, μ_γ = 1, two Bernoulli(0.3) cluster covariates, two
    /// N(μ_j, 1) individual covariates, unit coefficients, no effect.
    pub fn paper_default(g: usize, rho: f64) -> Self {
        Self {
            n_arms: 3,
            g,
            m: 150,
            rho,
            sigma_eps2: 4.0,
            mu_gamma: 1.0,
            sigma_z2: 1.0,
            n_individual_covariates: 2,
            n_cluster_covariates: 2,
            bernoulli_p: 0.3,
            beta_z: vec![1.0, 1.0],
            beta_x: vec![1.0, 1.0],
            effects: EffectSpec::Null,
            noise: NoiseFamily::Normal,
        }
    }

    pub fn design(&self) -> Result<TrialDesign> {
        TrialDesign::balanced(self.n_arms, self.g, self.m)
    }

    pub fn sigma_gamma2(&self) -> Result<f64> {
        icc_to_sigma_gamma2(self.rho, self.sigma_eps2)
    }

    /// Realized δ per non-reference arm (ascending arm order).
    pub fn deltas(&self) -> Result<Vec<f64>> {
        let k = self.n_arms - 1;
        match &self.effects {
            EffectSpec::Null => Ok(vec![0.0; k]),
            EffectSpec::StandardizedEs(es) => {
                if es.len() != k {
                    return Err(Error::InvalidArgument(format!(
                        "{} effect sizes for {k} treatment arms",
                        es.len()
                    )));
                }
                es.iter()
                    .map(|&e| effect_from_es(e, self.rho, self.sigma_eps2))
                    .collect()
            }
            EffectSpec::Delta(d) => {
                if d.len() != k {
                    return Err(Error::InvalidArgument(format!(
                        "{} deltas for {k} treatment arms",
                        d.len()
                    )));
                }
                Ok(d.clone())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_arms < 2 {
            return Err(Error::InvalidArgument("need at least 2 arms".into()));
        }
        if self.g == 0 || self.m == 0 {
            return Err(Error::InvalidArgument("g and m must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument("ICC must lie in [0, 1)".into()));
        }
        if !(self.sigma_eps2 > 0.0) || !(self.sigma_z2 >= 0.0) {
            return Err(Error::InvalidArgument("variances out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.bernoulli_p) {
            return Err(Error::InvalidArgument(
                "Bernoulli probability out of range".into(),
            ));
        }
        if self.beta_z.len() != self.n_individual_covariates
            || self.beta_x.len() != self.n_cluster_covariates
        {
            return Err(Error::InvalidArgument(
                "coefficient vectors must match covariate counts".into(),
            ));
        }
        self.deltas().map(|_| ())
    }

    /// Canonical tag used for seed derivation; two configurations share
    /// simulated datasets exactly when their tags agree.
    pub fn tag(&self) -> String {
        format!(
            "c{}-g{}-m{}-rho{}-se{}-mg{}-sz{}-p{}-pz{}-px{}-e[{}]-{}",
            self.n_arms,
            self.g,
            self.m,
            self.rho,
            self.sigma_eps2,
            self.mu_gamma,
            self.sigma_z2,
            self.bernoulli_p,
            self.n_individual_covariates,
            self.n_cluster_covariates,
            self.effects.describe(),
            self.noise.as_str()
        )
    }
}

/// Draw the covariate table: cluster-level Bernoulli columns first, then
/// individual-level normal columns (per column: cluster means, then values).
pub fn generate_covariates<R: Rng>(dgp: &DgpConfig, rng: &mut R) -> Result<CovariateTable> {
    let g_total = dgp.n_arms * dgp.g;
    let mut cluster_columns = Vec::with_capacity(dgp.n_cluster_covariates);
    let mut cluster_names = Vec::new();
    for l in 0..dgp.n_cluster_covariates {
        let col: Vec<f64> = (0..g_total)
            .map(|_| {
                if rng.random_range(0.0..1.0) < dgp.bernoulli_p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        cluster_columns.push(col);
        cluster_names.push(format!("x{}", l + 1));
    }
    let sigma_z = dgp.sigma_z2.sqrt();
    let mut individual_columns = Vec::with_capacity(dgp.n_individual_covariates);
    let mut individual_names = Vec::new();
    for l in 0..dgp.n_individual_covariates {
        let col: Vec<Vec<f64>> = (0..g_total)
            .map(|_| {
                let mu = rng.random_range(-2.0..2.0);
                (0..dgp.m)
                    .map(|_| mu + sigma_z * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        individual_columns.push(col);
        individual_names.push(format!("z{}", l + 1));
    }
    CovariateTable::new(
        cluster_columns,
        cluster_names,
        individual_columns,
        individual_names,
        g_total,
    )
}

/// Per-replicate noise draws, independent of the allocation.
#[derive(Debug, Clone)]
pub struct NoiseDraws {
    pub gamma: Vec<f64>,
    pub eps: Vec<Vec<f64>>,
}

pub fn draw_noise<R: Rng>(dgp: &DgpConfig, rng: &mut R) -> Result<NoiseDraws> {
    let g_total = dgp.n_arms * dgp.g;
    let sigma_gamma = dgp.sigma_gamma2()?.sqrt();
    let sigma_eps = dgp.sigma_eps2.sqrt();
    let cauchy = Cauchy::new(0.0f64, 1.0).expect("standard cauchy");
    let gamma: Vec<f64> = (0..g_total)
        .map(|_| match dgp.noise {
            NoiseFamily::CauchyClusterEffect => cauchy.sample(rng),
            _ => dgp.mu_gamma + sigma_gamma * rng.sample::<f64, _>(StandardNormal),
        })
        .collect();
    let eps: Vec<Vec<f64>> = (0..g_total)
        .map(|_| {
            (0..dgp.m)
                .map(|_| match dgp.noise {
                    NoiseFamily::CauchyResidual => cauchy.sample(rng),
                    _ => sigma_eps * rng.sample::<f64, _>(StandardNormal),
                })
                .collect()
        })
        .collect();
    Ok(NoiseDraws { gamma, eps })
}

/// Assemble outcomes from covariates, an allocation, and noise draws.
pub fn assemble_outcomes(
    dgp: &DgpConfig,
    table: &CovariateTable,
    scheme: &AllocationScheme,
    noise: &NoiseDraws,
    deltas: &[f64],
) -> Result<OutcomeDataset> {
    let design = dgp.design()?;
    let g_total = design.n_clusters();
    let arms = design.treatment_arms();
    let mut outcomes = Vec::with_capacity(g_total);
    for j in 0..g_total {
        let label = scheme.arm_of(j);
        let mut shift = 0.0;
        for (i, &arm) in arms.iter().enumerate() {
            let t = if label == arm { 1.0 } else { -1.0 };
            shift += deltas[i] * t;
        }
        for (l, &b) in dgp.beta_x.iter().enumerate() {
            shift += b * table.cluster_column(l)[j];
        }
        let base = shift + noise.gamma[j];
        let y: Vec<f64> = (0..dgp.m)
            .map(|k| {
                let mut v = base + noise.eps[j][k];
                for (l, &b) in dgp.beta_z.iter().enumerate() {
                    v += b * table.individual_column(l)[j][k];
                }
                v
            })
            .collect();
        outcomes.push(y);
    }
    OutcomeDataset::new(design, scheme.clone(), table.clone(), outcomes)
}

/// Generate outcomes for an existing covariate table and allocation.
pub fn generate_outcomes<R: Rng>(
    dgp: &DgpConfig,
    table: &CovariateTable,
    scheme: &AllocationScheme,
    rng: &mut R,
) -> Result<OutcomeDataset> {
    let noise = draw_noise(dgp, rng)?;
    assemble_outcomes(dgp, table, scheme, &noise, &dgp.deltas()?)
}

/// Draw covariates and outcomes for a given allocation in one call.
pub fn generate_dataset<R: Rng>(
    dgp: &DgpConfig,
    scheme: &AllocationScheme,
    rng: &mut R,
) -> Result<OutcomeDataset> {
    let table = generate_covariates(dgp, rng)?;
    generate_outcomes(dgp, &table, scheme, rng)
}

/// Covariates entering the design-phase balance metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalanceCovSet {
    /// The cluster-level binary covariates x_j.
    ClusterBinaries,
    /// The cluster-level aggregates z̄_j of the individual covariates.
    Aggregates,
    /// All of the above.
    All,
}

impl BalanceCovSet {
    pub fn as_str(&self) -> &'static str {
        match self {
            BalanceCovSet::ClusterBinaries => "cluster",
            BalanceCovSet::Aggregates => "aggregates",
            BalanceCovSet::All => "all",
        }
    }

    pub fn columns(&self, dgp: &DgpConfig) -> Vec<BalanceColumn> {
        let xs = (0..dgp.n_cluster_covariates).map(BalanceColumn::Cluster);
        let zs = (0..dgp.n_individual_covariates).map(BalanceColumn::AggregatedIndividual);
        match self {
            BalanceCovSet::ClusterBinaries => xs.collect(),
            BalanceCovSet::Aggregates => zs.collect(),
            BalanceCovSet::All => xs.chain(zs).collect(),
        }
    }
}

/// Design-based adjustment arm: simple or constrained randomization.
#[derive(Debug, Clone, PartialEq)]
pub enum DesignArm {
    Sr,
    Cr {
        metric: BalanceMetric,
        cutoff: Cutoff,
        covariates: BalanceCovSet,
    },
}

impl DesignArm {
    pub fn tag(&self) -> String {
        match self {
            DesignArm::Sr => "sr".into(),
            DesignArm::Cr {
                metric,
                cutoff,
                covariates,
            } => {
                let cut = match cutoff {
                    Cutoff::Quantile(q) => format!("q{q}"),
                    Cutoff::Count(n) => format!("n{n}"),
                };
                format!("cr-{}-{}-{}", metric.as_str(), cut, covariates.as_str())
            }
        }
    }
}

/// Analysis-based adjustment strategies (the columns of the adjustment
/// grid): nothing, the cluster binaries, the aggregated or raw individual
/// covariates, or everything with aggregates or raw individual values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalysisAdjustment {
    Unadjusted,
    ClusterBinaries,
    AggregatedIndividual,
    IndividualLevel,
    AllAggregated,
    AllIndividual,
}

impl AnalysisAdjustment {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnalysisAdjustment::Unadjusted => "unadj",
            AnalysisAdjustment::ClusterBinaries => "adj-cx",
            AnalysisAdjustment::AggregatedIndividual => "adj-cz",
            AnalysisAdjustment::IndividualLevel => "adj-i",
            AnalysisAdjustment::AllAggregated => "fully-adj-c",
            AnalysisAdjustment::AllIndividual => "fully-adj-i",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "unadj" => AnalysisAdjustment::Unadjusted,
            "adj-cx" => AnalysisAdjustment::ClusterBinaries,
            "adj-cz" => AnalysisAdjustment::AggregatedIndividual,
            "adj-i" => AnalysisAdjustment::IndividualLevel,
            "fully-adj-c" => AnalysisAdjustment::AllAggregated,
            "fully-adj-i" => AnalysisAdjustment::AllIndividual,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown analysis adjustment `{other}`"
                )))
            }
        })
    }

    pub fn to_adjustment(&self, dgp: &DgpConfig) -> Adjustment {
        let xs: Vec<ClusterCovariate> = (0..dgp.n_cluster_covariates)
            .map(ClusterCovariate::Column)
            .collect();
        let aggs: Vec<ClusterCovariate> = (0..dgp.n_individual_covariates)
            .map(ClusterCovariate::Aggregate)
            .collect();
        let inds: Vec<usize> = (0..dgp.n_individual_covariates).collect();
        match self {
            AnalysisAdjustment::Unadjusted => Adjustment::Unadjusted,
            AnalysisAdjustment::ClusterBinaries => Adjustment::ClusterLevel(xs),
            AnalysisAdjustment::AggregatedIndividual => Adjustment::ClusterLevel(aggs),
            AnalysisAdjustment::IndividualLevel => Adjustment::IndividualLevel(inds),
            AnalysisAdjustment::AllAggregated => {
                let mut cols = xs;
                cols.extend(aggs);
                Adjustment::ClusterLevel(cols)
            }
            AnalysisAdjustment::AllIndividual => Adjustment::Fully {
                cluster: xs,
                individual: inds,
            },
        }
    }
}

/// The checkmark grid of evaluated (design, analysis) combinations: under
/// constrained randomization only the unadjusted, design-matched, and fully
/// adjusted analyses are run by default.
pub fn grid_allows(design: &DesignArm, analysis: AnalysisAdjustment) -> bool {
    use AnalysisAdjustment as A;
    match design {
        DesignArm::Sr => true,
        DesignArm::Cr { covariates, .. } => match covariates {
            BalanceCovSet::ClusterBinaries => matches!(
                analysis,
                A::Unadjusted | A::ClusterBinaries | A::AllAggregated | A::AllIndividual
            ),
            BalanceCovSet::Aggregates => matches!(
                analysis,
                A::Unadjusted
                    | A::AggregatedIndividual
                    | A::IndividualLevel
                    | A::AllAggregated
                    | A::AllIndividual
            ),
            BalanceCovSet::All => {
                matches!(analysis, A::Unadjusted | A::AllAggregated | A::AllIndividual)
            }
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestKind {
    ChiSq,
    F,
    Z,
    T,
    RandGlobal,
    RandPairwise,
}

impl TestKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TestKind::ChiSq => "chisq",
            TestKind::F => "f",
            TestKind::Z => "z",
            TestKind::T => "t",
            TestKind::RandGlobal => "r-global",
            TestKind::RandPairwise => "r-pairwise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "chisq" => TestKind::ChiSq,
            "f" => TestKind::F,
            "z" => TestKind::Z,
            "t" => TestKind::T,
            "r-global" => TestKind::RandGlobal,
            "r-pairwise" => TestKind::RandPairwise,
            other => {
                return Err(Error::InvalidArgument(format!("unknown test `{other}`")))
            }
        })
    }

    fn is_model(&self) -> bool {
        matches!(self, TestKind::ChiSq | TestKind::F | TestKind::Z | TestKind::T)
    }

    fn is_pairwise(&self) -> bool {
        matches!(self, TestKind::Z | TestKind::T | TestKind::RandPairwise)
    }
}

/// Settings shared by every cell of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSettings {
    pub analyses: Vec<AnalysisAdjustment>,
    pub tests: Vec<TestKind>,
    /// Non-reference arms whose pairwise hypotheses are tested.
    pub pairwise_arms: Vec<usize>,
    pub alphas: Vec<f64>,
    pub replicates: usize,
    pub method: FitMethod,
    pub n_draws: usize,
    pub enum_limit: u128,
    /// Reuse the replicate-0 covariates in every replicate.
    pub freeze_covariates: bool,
    /// Skip (design, analysis) combinations outside the default grid.
    pub enforce_grid: bool,
}

impl Default for CellSettings {
    fn default() -> Self {
        Self {
            analyses: vec![AnalysisAdjustment::Unadjusted],
            tests: vec![TestKind::F, TestKind::RandGlobal],
            pairwise_arms: Vec::new(),
            alphas: vec![0.05],
            replicates: 2000,
            method: FitMethod::Reml,
            n_draws: crate::space::DEFAULT_SAMPLE_DRAWS,
            enum_limit: crate::space::DEFAULT_ENUM_LIMIT,
            freeze_covariates: false,
            enforce_grid: true,
        }
    }
}

/// One experiment cell: a DGP crossed with a design arm under shared
/// settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub dgp: DgpConfig,
    pub design: DesignArm,
    pub settings: CellSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum HypKey {
    Global,
    Arm(usize),
}

impl HypKey {
    fn label(&self) -> String {
        match self {
            HypKey::Global => "global".into(),
            HypKey::Arm(a) => format!("delta{}", a + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct RowKey {
    analysis: usize,
    test: TestKind,
    hyp: HypKey,
    alpha_idx: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct RowCounts {
    reject: u64,
    eval: u64,
    flagged: u64,
    error: u64,
}

impl RowCounts {
    fn add(&mut self, other: &RowCounts) {
        self.reject += other.reject;
        self.eval += other.eval;
        self.flagged += other.flagged;
        self.error += other.error;
    }
}

/// One line of a simulation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub design: String,
    pub analysis: String,
    pub test: String,
    pub hypothesis: String,
    pub alpha: f64,
    pub replicates: usize,
    /// Rejections among evaluated replicates (strict rule `p < α`).
    pub rejections: u64,
    /// Replicates that produced a defined p-value.
    pub evaluated: u64,
    /// Valid-but-flagged results (undersized reference space), reported
    /// separately; they stay in the denominator.
    pub flagged: u64,
    /// Replicates where this test could not be computed at all.
    pub errors: u64,
}

impl ReportRow {
    pub fn rate(&self) -> Option<f64> {
        (self.evaluated > 0).then(|| self.rejections as f64 / self.evaluated as f64)
    }

    /// Binomial Monte Carlo standard error `√(p̂(1−p̂)/n)`.
    pub fn mc_se(&self) -> Option<f64> {
        self.rate()
            .map(|p| (p * (1.0 - p) / self.evaluated as f64).sqrt())
    }
}

/// All rows of one cell plus bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub design: String,
    pub g: usize,
    pub m: usize,
    pub icc: f64,
    pub noise: String,
    pub effects: String,
    pub rows: Vec<ReportRow>,
    /// Wall time of the execution group that produced this cell.
    pub wall_ms: u64,
}

impl CellResult {
    pub fn row(&self, analysis: &str, test: &str, hypothesis: &str, alpha: f64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.analysis == analysis
                && r.test == test
                && r.hypothesis == hypothesis
                && (r.alpha - alpha).abs() < 1e-12
        })
    }
}

fn build_row_keys(settings: &CellSettings) -> Vec<RowKey> {
    let mut rows = Vec::new();
    for (analysis, _) in settings.analyses.iter().enumerate() {
        for &test in &settings.tests {
            let hyps: Vec<HypKey> = if test.is_pairwise() {
                settings.pairwise_arms.iter().map(|&a| HypKey::Arm(a)).collect()
            } else {
                vec![HypKey::Global]
            };
            for hyp in hyps {
                for alpha_idx in 0..settings.alphas.len() {
                    rows.push(RowKey {
                        analysis,
                        test,
                        hyp,
                        alpha_idx,
                    });
                }
            }
        }
    }
    rows
}

fn validate_settings(dgp: &DgpConfig, designs: &[DesignArm], settings: &CellSettings) -> Result<()> {
    dgp.validate()?;
    if designs.is_empty() {
        return Err(Error::InvalidArgument("no design arms".into()));
    }
    if settings.replicates == 0 {
        return Err(Error::InvalidArgument("replicates must be >= 1".into()));
    }
    if settings.analyses.is_empty() || settings.tests.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one analysis and one test".into(),
        ));
    }
    if settings.alphas.is_empty()
        || settings.alphas.iter().any(|&a| !(0.0 < a && a < 1.0))
    {
        return Err(Error::InvalidArgument(
            "alpha levels must lie in (0, 1)".into(),
        ));
    }
    let reference = dgp.n_arms - 1;
    for &arm in &settings.pairwise_arms {
        if arm >= dgp.n_arms || arm == reference {
            return Err(Error::InvalidArgument(format!(
                "pairwise arm {arm} is not a non-reference arm"
            )));
        }
    }
    if settings.tests.iter().any(|t| t.is_pairwise()) && settings.pairwise_arms.is_empty() {
        return Err(Error::InvalidArgument(
            "pairwise tests requested but no pairwise arms listed".into(),
        ));
    }
    if settings.enforce_grid {
        for design in designs {
            for &a in &settings.analyses {
                if !grid_allows(design, a) {
                    return Err(Error::InvalidArgument(format!(
                        "analysis `{}` is outside the default adjustment grid for design `{}`",
                        a.as_str(),
                        design.tag()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Balance scorer for the harness: inverse-variance l2 weights with
/// zero-variance columns given weight zero (a constant column is perfectly
/// balanced by construction), Mahalanobis as estimated.
fn make_scorer(
    dgp: &DgpConfig,
    table: &CovariateTable,
    design: &TrialDesign,
    metric: BalanceMetric,
    covset: BalanceCovSet,
) -> Result<BalanceScorer> {
    let columns = covset.columns(dgp);
    let mut spec = BalanceSpec {
        metric,
        columns,
        weights: None,
    };
    if metric == BalanceMetric::L2 {
        let (matrix, _) = spec.select_matrix(table)?;
        let weights: Vec<f64> = matrix
            .iter()
            .map(|col| {
                let n = col.len() as f64;
                let mean = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                if var > 0.0 {
                    1.0 / var
                } else {
                    0.0
                }
            })
            .collect();
        spec.weights = Some(weights);
    }
    BalanceScorer::prepare(&spec, table, design)
}

struct RowRecorder<'a> {
    settings: &'a CellSettings,
    index: &'a HashMap<RowKey, usize>,
    counts: Vec<RowCounts>,
}

impl RowRecorder<'_> {
    fn record_model(&mut self, analysis: usize, test: TestKind, hyp: HypKey, result: &TestResult) {
        for (alpha_idx, &alpha) in self.settings.alphas.iter().enumerate() {
            let idx = self.index[&RowKey { analysis, test, hyp, alpha_idx }];
            let c = &mut self.counts[idx];
            match result.p_value {
                Some(p) => {
                    c.eval += 1;
                    if p < alpha {
                        c.reject += 1;
                    }
                }
                None => c.flagged += 1,
            }
        }
    }

    fn record_rand(&mut self, analysis: usize, test: TestKind, hyp: HypKey, result: &RandTestResult) {
        for (alpha_idx, &alpha) in self.settings.alphas.iter().enumerate() {
            let idx = self.index[&RowKey { analysis, test, hyp, alpha_idx }];
            let c = &mut self.counts[idx];
            c.eval += 1;
            if !result.valid_space {
                c.flagged += 1;
            }
            if result.p_value < alpha {
                c.reject += 1;
            }
        }
    }

    fn record_error(&mut self, analysis: usize, test: TestKind, hyp: HypKey) {
        for alpha_idx in 0..self.settings.alphas.len() {
            let idx = self.index[&RowKey { analysis, test, hyp, alpha_idx }];
            self.counts[idx].error += 1;
        }
    }

    fn record_error_all_model(&mut self, analysis: usize) {
        for &test in &self.settings.tests {
            if !test.is_model() {
                continue;
            }
            let hyps: Vec<HypKey> = if test.is_pairwise() {
                self.settings.pairwise_arms.iter().map(|&a| HypKey::Arm(a)).collect()
            } else {
                vec![HypKey::Global]
            };
            for hyp in hyps {
                self.record_error(analysis, test, hyp);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_replicate(
    dgp: &DgpConfig,
    trial: &TrialDesign,
    designs: &[DesignArm],
    settings: &CellSettings,
    deltas: &[f64],
    index: &HashMap<RowKey, usize>,
    n_rows: usize,
    root_seed: u64,
    r: usize,
) -> Result<Vec<Vec<RowCounts>>> {
    let dgp_tag = dgp.tag();
    let cov_index = if settings.freeze_covariates { 0 } else { r as u64 };
    let mut rng_cov = derive_rng(root_seed, &["cov", &dgp_tag], cov_index);
    let table = generate_covariates(dgp, &mut rng_cov)?;

    let mut rng_space = derive_rng(root_seed, &["space", &dgp_tag], r as u64);
    let base = build_space(trial, settings.enum_limit, settings.n_draws, &mut rng_space)?;

    let noise = draw_noise(
        dgp,
        &mut derive_rng(root_seed, &["out", &dgp_tag], r as u64),
    )?;

    // One scored copy of the space per distinct (metric, covariate set).
    let mut scored: HashMap<(BalanceMetric, BalanceCovSet), (BalanceScorer, RandomizationSpace)> =
        HashMap::new();

    let wants_model = settings.tests.iter().any(|t| t.is_model());
    let wants_rand_global = settings.tests.contains(&TestKind::RandGlobal);
    let wants_rand_pairwise = settings.tests.contains(&TestKind::RandPairwise);

    let mut out = Vec::with_capacity(designs.len());
    for design in designs {
        let design_tag = design.tag();
        let (space_d, scorer_d) = match design {
            DesignArm::Sr => (base.clone(), None),
            DesignArm::Cr {
                metric,
                cutoff,
                covariates,
            } => {
                let key = (*metric, *covariates);
                if !scored.contains_key(&key) {
                    let scorer = make_scorer(dgp, &table, trial, *metric, *covariates)?;
                    let mut sp = base.clone();
                    sp.score_with(&scorer);
                    scored.insert(key, (scorer, sp));
                }
                let (scorer, sp) = &scored[&key];
                (sp.constrain(scorer, *cutoff)?, Some(scorer.clone()))
            }
        };
        let mut rng_sel = derive_rng(root_seed, &["select", &dgp_tag, &design_tag], r as u64);
        let scheme = space_d.select_scheme(&mut rng_sel)?;
        let dataset = assemble_outcomes(dgp, &table, &scheme, &noise, deltas)?;

        // Conditional pairwise spaces are shared across all analyses.
        let mut subspaces: Vec<(usize, Result<RandomizationSpace>)> = Vec::new();
        if wants_rand_pairwise {
            for &arm in &settings.pairwise_arms {
                let options = PairwiseSpaceOptions {
                    rescorer: scorer_d.as_ref(),
                    enum_limit: settings.enum_limit,
                    sample_draws: settings.n_draws,
                    sample_seed: derive_seed(
                        root_seed,
                        &["pairwise-sample", &dgp_tag, &design_tag],
                        r as u64,
                    ),
                };
                subspaces.push((
                    arm,
                    rand_tests::pairwise_subspace(&dataset, &space_d, arm, &options),
                ));
            }
        }

        let mut rec = RowRecorder {
            settings,
            index,
            counts: vec![RowCounts::default(); n_rows],
        };
        for (a_idx, analysis) in settings.analyses.iter().enumerate() {
            let adjustment = analysis.to_adjustment(dgp);
            if wants_model {
                let spec = ModelSpec::full(adjustment.clone(), dgp.n_arms, trial.reference_arm());
                match fit(&dataset, &spec, settings.method) {
                    Ok(f) => {
                        let k = f.n_cluster_level_covariates;
                        for &test in &settings.tests {
                            match test {
                                TestKind::ChiSq => match wald_global_chisq(&f) {
                                    Ok(res) => rec.record_model(a_idx, test, HypKey::Global, &res),
                                    Err(_) => rec.record_error(a_idx, test, HypKey::Global),
                                },
                                TestKind::F => match wald_global_f(&f, k) {
                                    Ok(res) => rec.record_model(a_idx, test, HypKey::Global, &res),
                                    Err(_) => rec.record_error(a_idx, test, HypKey::Global),
                                },
                                TestKind::Z => {
                                    for &arm in &settings.pairwise_arms {
                                        match wald_pairwise_z(&f, arm) {
                                            Ok(res) => rec.record_model(
                                                a_idx,
                                                test,
                                                HypKey::Arm(arm),
                                                &res,
                                            ),
                                            Err(_) => {
                                                rec.record_error(a_idx, test, HypKey::Arm(arm))
                                            }
                                        }
                                    }
                                }
                                TestKind::T => {
                                    for &arm in &settings.pairwise_arms {
                                        match wald_pairwise_t(&f, arm, k) {
                                            Ok(res) => rec.record_model(
                                                a_idx,
                                                test,
                                                HypKey::Arm(arm),
                                                &res,
                                            ),
                                            Err(_) => {
                                                rec.record_error(a_idx, test, HypKey::Arm(arm))
                                            }
                                        }
                                    }
                                }
                                _ => {}
                            }
                        }
                    }
                    Err(_) => rec.record_error_all_model(a_idx),
                }
            }
            if wants_rand_global {
                let res = NullFit::fit_global(&dataset, adjustment.clone(), settings.method)
                    .and_then(|nf| rand_tests::global_test_with(&dataset, &space_d, &nf));
                match res {
                    Ok(res) => rec.record_rand(a_idx, TestKind::RandGlobal, HypKey::Global, &res),
                    Err(_) => rec.record_error(a_idx, TestKind::RandGlobal, HypKey::Global),
                }
            }
            if wants_rand_pairwise {
                for (arm, sub) in &subspaces {
                    let hyp = HypKey::Arm(*arm);
                    match sub {
                        Ok(sub) => {
                            match rand_tests::pairwise_test_on_subspace(
                                &dataset,
                                sub,
                                *arm,
                                adjustment.clone(),
                                settings.method,
                            ) {
                                Ok(res) => {
                                    rec.record_rand(a_idx, TestKind::RandPairwise, hyp, &res)
                                }
                                Err(_) => rec.record_error(a_idx, TestKind::RandPairwise, hyp),
                            }
                        }
                        Err(_) => rec.record_error(a_idx, TestKind::RandPairwise, hyp),
                    }
                }
            }
        }
        out.push(rec.counts);
    }
    Ok(out)
}

/// Run several design arms against one DGP, sharing simulated datasets and
/// the sampled randomization space across arms. Results are bit-identical
/// to running each arm as its own cell with the same root seed.
pub fn run_cells(
    dgp: &DgpConfig,
    designs: &[DesignArm],
    settings: &CellSettings,
    root_seed: u64,
) -> Result<Vec<CellResult>> {
    validate_settings(dgp, designs, settings)?;
    let trial = dgp.design()?;
    let deltas = dgp.deltas()?;
    let row_keys = build_row_keys(settings);
    let n_rows = row_keys.len();
    let index: HashMap<RowKey, usize> = row_keys
        .iter()
        .enumerate()
        .map(|(i, k)| (*k, i))
        .collect();

    let start = Instant::now();
    let zero = || vec![vec![RowCounts::default(); n_rows]; designs.len()];
    let totals = (0..settings.replicates)
        .into_par_iter()
        .map(|r| {
            run_replicate(
                dgp, &trial, designs, settings, &deltas, &index, n_rows, root_seed, r,
            )
        })
        .try_fold(zero, |mut acc, rep: Result<Vec<Vec<RowCounts>>>| {
            let rep = rep?;
            for (a, b) in acc.iter_mut().zip(&rep) {
                for (x, y) in a.iter_mut().zip(b) {
                    x.add(y);
                }
            }
            Ok(acc)
        })
        .try_reduce(zero, |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                for (u, v) in x.iter_mut().zip(y) {
                    u.add(v);
                }
            }
            Ok(a)
        })?;
    let wall_ms = start.elapsed().as_millis() as u64;

    Ok(designs
        .iter()
        .zip(totals)
        .map(|(design, counts)| CellResult {
            design: design.tag(),
            g: dgp.g,
            m: dgp.m,
            icc: dgp.rho,
            noise: dgp.noise.as_str().into(),
            effects: dgp.effects.describe(),
            rows: row_keys
                .iter()
                .zip(counts)
                .map(|(key, c)| ReportRow {
                    design: design.tag(),
                    analysis: settings.analyses[key.analysis].as_str().into(),
                    test: key.test.as_str().into(),
                    hypothesis: key.hyp.label(),
                    alpha: settings.alphas[key.alpha_idx],
                    replicates: settings.replicates,
                    rejections: c.reject,
                    evaluated: c.eval,
                    flagged: c.flagged,
                    errors: c.error,
                })
                .collect(),
            wall_ms,
        })
        .collect())
}

/// Run a single cell.
pub fn run_cell(spec: &CellSpec, root_seed: u64) -> Result<CellResult> {
    let mut cells = run_cells(&spec.dgp, &[spec.design.clone()], &spec.settings, root_seed)?;
    Ok(cells.remove(0))
}

/// A full experiment: cells are grouped by (DGP, settings) so design arms
/// sharing a DGP also share its simulated datasets.
#[derive(Debug, Clone)]
pub struct ExperimentGrid {
    pub cells: Vec<CellSpec>,
    pub root_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub root_seed: u64,
    pub cells: Vec<CellResult>,
}

impl ExperimentGrid {
    pub fn run(&self) -> Result<SimulationReport> {
        let mut cells = Vec::new();
        let mut i = 0;
        while i < self.cells.len() {
            let head = &self.cells[i];
            let mut designs = vec![head.design.clone()];
            let mut j = i + 1;
            while j < self.cells.len()
                && self.cells[j].dgp == head.dgp
                && self.cells[j].settings == head.settings
            {
                designs.push(self.cells[j].design.clone());
                j += 1;
            }
            cells.extend(run_cells(&head.dgp, &designs, &head.settings, self.root_seed)?);
            i = j;
        }
        Ok(SimulationReport {
            root_seed: self.root_seed,
            cells,
        })
    }
}

impl SimulationReport {
    /// Deterministic CSV rendering (timings are deliberately excluded so
    /// reruns with the same root seed are byte-identical).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "g,m,icc,noise,effects,design,analysis,test,hypothesis,alpha,replicates,rejections,evaluated,flagged,errors,rate,mc_se\n",
        );
        for cell in &self.cells {
            for row in &cell.rows {
                let rate = row.rate().map(|r| r.to_string()).unwrap_or_default();
                let se = row.mc_se().map(|s| s.to_string()).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    cell.g,
                    cell.m,
                    cell.icc,
                    cell.noise,
                    cell.effects,
                    row.design,
                    row.analysis,
                    row.test,
                    row.hypothesis,
                    row.alpha,
                    row.replicates,
                    row.rejections,
                    row.evaluated,
                    row.flagged,
                    row.errors,
                    rate,
                    se,
                ));
            }
        }
        out
    }
}
