//! Random-intercept linear mixed model, fitted by profile (restricted)
//! maximum likelihood.
//!
//! The marginal covariance of cluster `j` is compound symmetric,
//! `Σ_j = σ_ε² I + σ_γ² J`, whose inverse and determinant have closed forms:
//!
//! ```text
//! Σ_j⁻¹   = (1/σ_ε²) I − σ_γ² / (σ_ε² (σ_ε² + m_j σ_γ²)) J
//! log|Σ_j| = (m_j − 1) log σ_ε² + log(σ_ε² + m_j σ_γ²)
//! ```
//!
//! Everything is computed from per-cluster sufficient statistics
//! (X'X, X'1, X'y, 1'y, y'y), so the fit costs O(N p²) once plus O(G p²) per
//! variance-ratio evaluation; no dense N × N matrix is ever formed. The
//! variance ratio θ = σ_γ²/σ_ε² is profiled out with a bounded Brent search
//! on [0, 50]; fixed effects are generalized least squares at the optimum and
//! σ_ε² has the usual closed form from the profiled quadratic form.

use crate::design::OutcomeDataset;
use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Upper bound of the profiled variance-ratio search (ICC up to ≈ 0.98).
pub const THETA_MAX: f64 = 50.0;
/// Absolute tolerance of the 1-D search on θ.
pub const THETA_TOL: f64 = 1e-9;
const MAX_PROFILE_ITER: usize = 300;

/// Compound-symmetry covariance `σ_ε² I + σ_γ² J` of one cluster.
///
/// All operations run in O(m) using only the vector sum of their argument.
#[derive(Debug, Clone, Copy)]
pub struct CompoundSymmetry {
    sigma_eps2: f64,
    sigma_gamma2: f64,
}

impl CompoundSymmetry {
    pub fn new(sigma_eps2: f64, sigma_gamma2: f64) -> Result<Self> {
        if !(sigma_eps2 > 0.0) || !sigma_eps2.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "residual variance must be positive, got {sigma_eps2}"
            )));
        }
        if sigma_gamma2 < 0.0 || !sigma_gamma2.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "cluster variance must be nonnegative, got {sigma_gamma2}"
            )));
        }
        Ok(Self {
            sigma_eps2,
            sigma_gamma2,
        })
    }

    pub fn sigma_eps2(&self) -> f64 {
        self.sigma_eps2
    }

    pub fn sigma_gamma2(&self) -> f64 {
        self.sigma_gamma2
    }

    /// `W_j = (σ_ε² + m_j σ_γ²)⁻¹`, the weight of cluster totals.
    pub fn w(&self, m: usize) -> f64 {
        1.0 / (self.sigma_eps2 + m as f64 * self.sigma_gamma2)
    }

    /// `Σ⁻¹ v` computed via the mean of `v`.
    pub fn inverse_apply(&self, v: &[f64]) -> Vec<f64> {
        let m = v.len();
        let total: f64 = v.iter().sum();
        let shrink = self.sigma_gamma2 / (self.sigma_eps2 * (self.sigma_eps2 + m as f64 * self.sigma_gamma2));
        v.iter()
            .map(|&x| x / self.sigma_eps2 - shrink * total)
            .collect()
    }

    /// Quadratic form `v' Σ⁻¹ v`.
    pub fn inverse_quad(&self, v: &[f64]) -> f64 {
        let m = v.len() as f64;
        let total: f64 = v.iter().sum();
        let ss: f64 = v.iter().map(|x| x * x).sum();
        (ss - self.sigma_gamma2 / (self.sigma_eps2 + m * self.sigma_gamma2) * total * total)
            / self.sigma_eps2
    }

    /// `1' Σ⁻¹ v = W_j Σ_k v_k`.
    pub fn one_inverse_dot(&self, v: &[f64]) -> f64 {
        self.w(v.len()) * v.iter().sum::<f64>()
    }

    /// `log |Σ_j|` for a cluster of size `m`.
    pub fn logdet(&self, m: usize) -> f64 {
        (m as f64 - 1.0) * self.sigma_eps2.ln()
            + (self.sigma_eps2 + m as f64 * self.sigma_gamma2).ln()
    }

    /// Dense `Σ_j`, for oracles and small-problem checks.
    pub fn dense(&self, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |r, c| {
            self.sigma_gamma2 + if r == c { self.sigma_eps2 } else { 0.0 }
        })
    }
}

/// The matrix action `v ↦ Σ_j⁻¹ v` of the compound-symmetry inverse.
pub fn cs_inverse(sigma_eps2: f64, sigma_gamma2: f64) -> Result<CompoundSymmetry> {
    CompoundSymmetry::new(sigma_eps2, sigma_gamma2)
}

/// A cluster-level covariate term: a raw cluster column, or the per-cluster
/// mean of an individual-level column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterCovariate {
    Column(usize),
    Aggregate(usize),
}

/// Analysis-based covariate adjustment strategy.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Adjustment {
    #[default]
    Unadjusted,
    /// Cluster-level regressors only (raw cluster columns and/or aggregates).
    ClusterLevel(Vec<ClusterCovariate>),
    /// Individual-level regressors only (indices into the individual table).
    IndividualLevel(Vec<usize>),
    /// Both kinds.
    Fully {
        cluster: Vec<ClusterCovariate>,
        individual: Vec<usize>,
    },
}

impl Adjustment {
    fn cluster_terms(&self) -> &[ClusterCovariate] {
        match self {
            Adjustment::ClusterLevel(c) | Adjustment::Fully { cluster: c, .. } => c,
            _ => &[],
        }
    }

    fn individual_terms(&self) -> &[usize] {
        match self {
            Adjustment::IndividualLevel(i) | Adjustment::Fully { individual: i, .. } => i,
            _ => &[],
        }
    }
}

/// Mean-model specification: covariate adjustment plus the set of treatment
/// arms whose effects enter the mean. An empty treatment set fits a null
/// model; dropping a single arm fits the pairwise-null nuisance model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub adjustment: Adjustment,
    /// Non-reference arms whose δ enters the mean, ascending.
    pub include_treatment: Vec<usize>,
}

impl ModelSpec {
    /// All treatment effects included.
    pub fn full(adjustment: Adjustment, n_arms: usize, reference_arm: usize) -> Self {
        Self {
            adjustment,
            include_treatment: (0..n_arms).filter(|&a| a != reference_arm).collect(),
        }
    }

    /// No treatment effects (global null model).
    pub fn null_model(adjustment: Adjustment) -> Self {
        Self {
            adjustment,
            include_treatment: Vec::new(),
        }
    }

    /// All treatment effects except `arm` (pairwise null nuisance model).
    pub fn without_arm(adjustment: Adjustment, n_arms: usize, reference_arm: usize, arm: usize) -> Self {
        Self {
            adjustment,
            include_treatment: (0..n_arms)
                .filter(|&a| a != reference_arm && a != arm)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FitMethod {
    Ml,
    Reml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ColumnRole {
    Intercept,
    Covariate,
    Treatment(usize),
}

/// Per-cluster sufficient statistics of the fixed design and outcome.
#[derive(Debug, Clone)]
pub(crate) struct ClusterStats {
    pub m: usize,
    pub sxx: DMatrix<f64>,
    pub sx1: DVector<f64>,
    pub sxy: DVector<f64>,
    pub sy1: f64,
    pub syy: f64,
}

/// A model bound to a dataset: column metadata plus sufficient statistics.
#[derive(Debug, Clone)]
pub(crate) struct PreparedModel {
    pub names: Vec<String>,
    pub roles: Vec<ColumnRole>,
    pub clusters: Vec<ClusterStats>,
    pub n: usize,
    pub p: usize,
    /// Grand means subtracted from centered columns (0.0 for the rest).
    pub centers: Vec<f64>,
    pub n_cluster_level_covariates: usize,
}

pub(crate) fn prepare_model(
    dataset: &OutcomeDataset,
    spec: &ModelSpec,
    center_individual: bool,
) -> Result<PreparedModel> {
    let design = dataset.design();
    let table = dataset.covariates();
    let g = design.n_clusters();
    let sizes = design.cluster_sizes();
    let reference = design.reference_arm();

    for &arm in &spec.include_treatment {
        if arm >= design.n_arms() || arm == reference {
            return Err(Error::InvalidArgument(format!(
                "treatment arm {arm} is not a non-reference arm"
            )));
        }
    }

    // Assemble the per-cluster column values. A column is either constant per
    // cluster (slot Constant) or one value per individual (slot Varying).
    enum ColValues {
        Constant(Vec<f64>),
        Varying(Vec<Vec<f64>>),
    }
    let mut names = vec!["(intercept)".to_string()];
    let mut roles = vec![ColumnRole::Intercept];
    let mut values: Vec<ColValues> = vec![ColValues::Constant(vec![1.0; g])];

    let aggregates = if spec
        .adjustment
        .cluster_terms()
        .iter()
        .any(|t| matches!(t, ClusterCovariate::Aggregate(_)))
    {
        table.aggregate_to_cluster()?
    } else {
        Vec::new()
    };
    for term in spec.adjustment.cluster_terms() {
        match *term {
            ClusterCovariate::Column(idx) => {
                if idx >= table.n_cluster_columns() {
                    return Err(Error::InvalidArgument(format!(
                        "cluster covariate index {idx} out of range"
                    )));
                }
                names.push(table.cluster_names()[idx].clone());
                roles.push(ColumnRole::Covariate);
                values.push(ColValues::Constant(table.cluster_column(idx).to_vec()));
            }
            ClusterCovariate::Aggregate(idx) => {
                if idx >= table.n_individual_columns() {
                    return Err(Error::InvalidArgument(format!(
                        "individual covariate index {idx} out of range"
                    )));
                }
                names.push(format!("mean({})", table.individual_names()[idx]));
                roles.push(ColumnRole::Covariate);
                values.push(ColValues::Constant(aggregates[idx].clone()));
            }
        }
    }
    for &idx in spec.adjustment.individual_terms() {
        if idx >= table.n_individual_columns() {
            return Err(Error::InvalidArgument(format!(
                "individual covariate index {idx} out of range"
            )));
        }
        names.push(table.individual_names()[idx].clone());
        roles.push(ColumnRole::Covariate);
        values.push(ColValues::Varying(table.individual_column(idx).to_vec()));
    }
    let scheme_rows = dataset.scheme().indicator_rows(design);
    let arm_order = design.treatment_arms();
    for &arm in &spec.include_treatment {
        let col = arm_order
            .iter()
            .position(|&a| a == arm)
            .expect("validated treatment arm");
        names.push(format!("arm{}", arm + 1));
        roles.push(ColumnRole::Treatment(arm));
        values.push(ColValues::Constant(
            scheme_rows.iter().map(|r| f64::from(r[col])).collect(),
        ));
    }

    let p = values.len();
    let n: usize = sizes.iter().sum();
    if p >= n {
        return Err(Error::InvalidArgument(format!(
            "{p} fixed effects for {n} observations"
        )));
    }

    // Exact constancy scan: covariate columns that never vary within any
    // cluster count toward the cluster-level (between-within) DoF.
    let mut n_cluster_level = 0usize;
    for (role, col) in roles.iter().zip(&values) {
        if *role != ColumnRole::Covariate {
            continue;
        }
        let constant = match col {
            ColValues::Constant(_) => true,
            ColValues::Varying(per_cluster) => per_cluster
                .iter()
                .all(|v| v.iter().all(|&x| x == v[0])),
        };
        if constant {
            n_cluster_level += 1;
        }
    }

    // Optional centering of individual-level (within-cluster varying)
    // covariate columns, for conditioning; reported coefficients are mapped
    // back to the raw parameterization after the fit.
    let mut centers = vec![0.0; p];
    if center_individual {
        for (c, (role, col)) in roles.iter().zip(&values).enumerate() {
            if *role != ColumnRole::Covariate {
                continue;
            }
            if let ColValues::Varying(per_cluster) = col {
                let total: f64 = per_cluster.iter().map(|v| v.iter().sum::<f64>()).sum();
                centers[c] = total / n as f64;
            }
        }
    }

    let outcomes = dataset.outcomes();
    let mut clusters = Vec::with_capacity(g);
    let mut row = vec![0.0f64; p];
    for j in 0..g {
        let m = sizes[j];
        let mut sxx = DMatrix::zeros(p, p);
        let mut sx1 = DVector::zeros(p);
        let mut sxy = DVector::zeros(p);
        let mut sy1 = 0.0;
        let mut syy = 0.0;
        for k in 0..m {
            for (c, col) in values.iter().enumerate() {
                row[c] = match col {
                    ColValues::Constant(v) => v[j],
                    ColValues::Varying(v) => v[j][k],
                } - centers[c];
            }
            let y = outcomes[j][k];
            for a in 0..p {
                sx1[a] += row[a];
                sxy[a] += row[a] * y;
                for b in a..p {
                    sxx[(a, b)] += row[a] * row[b];
                }
            }
            sy1 += y;
            syy += y * y;
        }
        for a in 0..p {
            for b in 0..a {
                sxx[(a, b)] = sxx[(b, a)];
            }
        }
        clusters.push(ClusterStats {
            m,
            sxx,
            sx1,
            sxy,
            sy1,
            syy,
        });
    }

    Ok(PreparedModel {
        names,
        roles,
        clusters,
        n,
        p,
        centers,
        n_cluster_level_covariates: n_cluster_level,
    })
}

struct ProfilePoint {
    beta: DVector<f64>,
    sigma_eps2: f64,
    loglik: f64,
    gls_chol: Cholesky<f64, Dyn>,
}

/// `a ← a + alpha · x xᵀ`, writing both triangles.
fn rank1_update(a: &mut DMatrix<f64>, alpha: f64, x: &DVector<f64>) {
    let p = x.len();
    for r in 0..p {
        let xr = alpha * x[r];
        for c in 0..p {
            a[(r, c)] += xr * x[c];
        }
    }
}

/// GLS and profiled log-likelihood at a fixed variance ratio θ.
fn profile_at(prep: &PreparedModel, theta: f64, method: FitMethod) -> Result<ProfilePoint> {
    let p = prep.p;
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    let mut yy = 0.0;
    let mut logdet_v = 0.0;
    for cl in &prep.clusters {
        let m = cl.m as f64;
        let c = theta / (1.0 + m * theta);
        a += &cl.sxx;
        rank1_update(&mut a, -c, &cl.sx1);
        b += &cl.sxy;
        b.axpy(-c * cl.sy1, &cl.sx1, 1.0);
        yy += cl.syy - c * cl.sy1 * cl.sy1;
        logdet_v += (1.0 + m * theta).ln();
    }
    let chol = robust_cholesky(&a, &prep.names)?;
    let beta = chol.solve(&b);
    let rss = (yy - beta.dot(&b)).max(0.0);
    let n = prep.n as f64;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let (sigma_eps2, loglik) = match method {
        FitMethod::Ml => {
            let s2 = rss / n;
            if !(s2 > 0.0) {
                return Err(Error::Numerical("zero profiled residual variance".into()));
            }
            let l = -0.5 * (n * ln2pi + n * s2.ln() + logdet_v + n);
            (s2, l)
        }
        FitMethod::Reml => {
            let df = n - p as f64;
            let s2 = rss / df;
            if !(s2 > 0.0) {
                return Err(Error::Numerical("zero profiled residual variance".into()));
            }
            let logdet_a = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let l = -0.5 * (n * ln2pi + df * s2.ln() + logdet_v + df + logdet_a);
            (s2, l)
        }
    };
    Ok(ProfilePoint {
        beta,
        sigma_eps2,
        loglik,
        gls_chol: chol,
    })
}

/// Cholesky with a relative-pivot singularity check; failure is diagnosed by
/// retrying with single columns removed and naming those that restore rank.
fn robust_cholesky(a: &DMatrix<f64>, names: &[String]) -> Result<Cholesky<f64, Dyn>> {
    if let Some(chol) = try_cholesky(a) {
        return Ok(chol);
    }
    let p = a.nrows();
    let mut offenders = Vec::new();
    for drop in 0..p {
        let keep: Vec<usize> = (0..p).filter(|&i| i != drop).collect();
        let sub = a.select_rows(keep.as_slice()).select_columns(keep.as_slice());
        if try_cholesky(&sub).is_some() {
            offenders.push(names[drop].clone());
        }
    }
    if offenders.is_empty() {
        offenders = names.to_vec();
    }
    Err(Error::CollinearDesign { columns: offenders })
}

fn try_cholesky(a: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(a.clone())?;
    let l = chol.l_dirty();
    for i in 0..a.nrows() {
        let d = l[(i, i)];
        if !(d * d > 1e-10 * a[(i, i)].abs().max(f64::MIN_POSITIVE)) {
            return None;
        }
    }
    Some(chol)
}

/// Bounded derivative-free minimization (Brent's method).
fn brent_min<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, f64)> {
    const GOLD: f64 = 0.381_966_011_250_105_2; // (3 − √5)/2
    let (mut a, mut b) = (lo, hi);
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x)?;
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = tol.max(1e-12 * x.abs());
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return Ok((x, fx));
        }
        let mut use_golden = true;
        if e.abs() > tol1 {
            // parabolic interpolation through (v, w, x)
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_old = e;
            e = d;
            if p.abs() < (0.5 * q * e_old).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d >= 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u)?;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Err(Error::NoConvergence(format!(
        "variance-ratio search did not meet tolerance {tol} within {max_iter} iterations"
    )))
}

/// A fitted random-intercept linear mixed model.
#[derive(Debug, Clone)]
pub struct LmmFit {
    /// Coefficients in the raw (uncentered) parameterization, model order:
    /// intercept, covariates, treatment effects.
    pub coefficients: Vec<f64>,
    pub names: Vec<String>,
    /// Treatment arms matching the δ entries, ascending non-reference order.
    pub delta_arms: Vec<usize>,
    pub sigma_gamma2: f64,
    pub sigma_eps2: f64,
    /// Intraclass correlation σ_γ² / (σ_γ² + σ_ε²).
    pub icc: f64,
    /// Covariance of the fixed-effect estimates, model order.
    pub vcov: DMatrix<f64>,
    /// Maximized (restricted) log-likelihood.
    pub loglik: f64,
    pub method: FitMethod,
    pub n_clusters: usize,
    pub n_arms: usize,
    pub n_obs: usize,
    /// Covariate columns that are constant within every cluster (exact scan);
    /// used for between-within degrees of freedom.
    pub n_cluster_level_covariates: usize,
    pub(crate) roles: Vec<ColumnRole>,
}

impl LmmFit {
    pub fn intercept(&self) -> f64 {
        self.coefficients[0]
    }

    /// Position of arm `i`'s effect among the coefficients.
    pub fn delta_index(&self, arm: usize) -> Option<usize> {
        self.roles
            .iter()
            .position(|r| *r == ColumnRole::Treatment(arm))
    }

    pub fn delta(&self, arm: usize) -> Option<f64> {
        self.delta_index(arm).map(|i| self.coefficients[i])
    }

    pub fn delta_se(&self, arm: usize) -> Option<f64> {
        self.delta_index(arm).map(|i| self.vcov[(i, i)].sqrt())
    }

    /// All treatment effects in δ order.
    pub fn delta_vector(&self) -> Vec<f64> {
        self.delta_arms
            .iter()
            .map(|&a| self.delta(a).expect("arm fitted"))
            .collect()
    }

    /// The δ block of the fixed-effect covariance.
    pub fn delta_cov(&self) -> DMatrix<f64> {
        let idx: Vec<usize> = self
            .delta_arms
            .iter()
            .map(|&a| self.delta_index(a).expect("arm fitted"))
            .collect();
        DMatrix::from_fn(idx.len(), idx.len(), |r, c| self.vcov[(idx[r], idx[c])])
    }

    /// Between-within denominator degrees of freedom,
    /// `G − c − #cluster-level covariates`.
    pub fn between_within_df(&self) -> i64 {
        self.n_clusters as i64 - self.n_arms as i64 - self.n_cluster_level_covariates as i64
    }
}

/// Explicit parameter values for [`marginal_loglik`].
#[derive(Debug, Clone)]
pub struct LmmParams {
    /// Fixed effects in model order (intercept, covariates, treatments).
    pub fixed: Vec<f64>,
    pub sigma_gamma2: f64,
    pub sigma_eps2: f64,
}

/// Marginal (restricted) log-likelihood of the dataset at the given
/// parameters. REML adds the usual −½ log|Σ_j X_j' Σ_j⁻¹ X_j| adjustment
/// over the full fixed design.
pub fn marginal_loglik(
    dataset: &OutcomeDataset,
    spec: &ModelSpec,
    params: &LmmParams,
    method: FitMethod,
) -> Result<f64> {
    let prep = prepare_model(dataset, spec, false)?;
    if params.fixed.len() != prep.p {
        return Err(Error::InvalidArgument(format!(
            "{} fixed effects supplied, model has {}",
            params.fixed.len(),
            prep.p
        )));
    }
    let cs = CompoundSymmetry::new(params.sigma_eps2, params.sigma_gamma2)?;
    let beta = DVector::from_column_slice(&params.fixed);
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut loglik = 0.0;
    let mut a_sigma = DMatrix::zeros(prep.p, prep.p);
    for cl in &prep.clusters {
        let m = cl.m as f64;
        let shrink = params.sigma_gamma2 / (params.sigma_eps2 + m * params.sigma_gamma2);
        // (y − Xb)' Σ⁻¹ (y − Xb) from sufficient statistics
        let resid_ss = cl.syy - 2.0 * beta.dot(&cl.sxy) + (&cl.sxx * &beta).dot(&beta);
        let resid_sum = cl.sy1 - beta.dot(&cl.sx1);
        let quad = (resid_ss - shrink * resid_sum * resid_sum) / params.sigma_eps2;
        loglik += -0.5 * (m * ln2pi + cs.logdet(cl.m) + quad);
        if method == FitMethod::Reml {
            let mut xsx = cl.sxx.clone();
            rank1_update(&mut xsx, -shrink, &cl.sx1);
            a_sigma += xsx / params.sigma_eps2;
        }
    }
    if method == FitMethod::Reml {
        let chol = Cholesky::new(a_sigma)
            .ok_or_else(|| Error::Numerical("X'Σ⁻¹X not positive definite".into()))?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        loglik -= 0.5 * logdet;
    }
    Ok(loglik)
}

/// Fit the model by profiling θ = σ_γ²/σ_ε².
pub fn fit(dataset: &OutcomeDataset, spec: &ModelSpec, method: FitMethod) -> Result<LmmFit> {
    let prep = prepare_model(dataset, spec, true)?;
    fit_prepared(dataset, &prep, method)
}

pub(crate) fn fit_prepared(
    dataset: &OutcomeDataset,
    prep: &PreparedModel,
    method: FitMethod,
) -> Result<LmmFit> {
    // Full-rank check (and OLS endpoint) at θ = 0.
    let at_zero = profile_at(prep, 0.0, method)?;
    let objective = |theta: f64| profile_at(prep, theta, method).map(|pt| -pt.loglik);
    let (theta_opt, f_opt) = brent_min(objective, 0.0, THETA_MAX, THETA_TOL, MAX_PROFILE_ITER)?;
    // Boundary clamp: the interior search cannot land exactly on θ = 0.
    let theta = if -at_zero.loglik <= f_opt { 0.0 } else { theta_opt };
    let point = if theta == 0.0 {
        at_zero
    } else {
        profile_at(prep, theta, method)?
    };

    let sigma_eps2 = point.sigma_eps2;
    let sigma_gamma2 = theta * sigma_eps2;
    let icc = sigma_gamma2 / (sigma_gamma2 + sigma_eps2);
    // vcov = (Σ_j X'Σ⁻¹X)⁻¹ = σ̂² (X'V⁻¹X)⁻¹ in the centered parameterization
    let vcov_centered = point.gls_chol.inverse() * sigma_eps2;

    // Map back to the raw parameterization: the intercept absorbs the
    // centering shifts, all other coefficients are unchanged.
    let p = prep.p;
    let mut transform = DMatrix::identity(p, p);
    for c in 0..p {
        if prep.centers[c] != 0.0 {
            transform[(0, c)] = -prep.centers[c];
        }
    }
    let beta_raw = &transform * &point.beta;
    let vcov = &transform * vcov_centered * transform.transpose();

    let design = dataset.design();
    let delta_arms: Vec<usize> = prep
        .roles
        .iter()
        .filter_map(|r| match r {
            ColumnRole::Treatment(a) => Some(*a),
            _ => None,
        })
        .collect();

    Ok(LmmFit {
        coefficients: beta_raw.iter().cloned().collect(),
        names: prep.names.clone(),
        delta_arms,
        sigma_gamma2,
        sigma_eps2,
        icc,
        vcov,
        loglik: point.loglik,
        method,
        n_clusters: design.n_clusters(),
        n_arms: design.n_arms(),
        n_obs: prep.n,
        n_cluster_level_covariates: prep.n_cluster_level_covariates,
        roles: prep.roles.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{AllocationScheme, CovariateTable, TrialDesign};
    use crate::seed::derive_rng;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn cs_two_by_two_hand_inverse() {
        // m=2, σ_ε²=1, σ_γ²=1: Σ = ((2,1),(1,2)), Σ⁻¹ = ((2/3,−1/3),(−1/3,2/3))
        let cs = CompoundSymmetry::new(1.0, 1.0).unwrap();
        let e1 = cs.inverse_apply(&[1.0, 0.0]);
        assert_relative_eq!(e1[0], 2.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(e1[1], -1.0 / 3.0, max_relative = 1e-14);
        let e2 = cs.inverse_apply(&[0.0, 1.0]);
        assert_relative_eq!(e2[0], -1.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(e2[1], 2.0 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn cs_independence_case() {
        let cs = CompoundSymmetry::new(2.5, 0.0).unwrap();
        let v = vec![1.0, -2.0, 0.5];
        let out = cs.inverse_apply(&v);
        for (o, x) in out.iter().zip(&v) {
            assert_relative_eq!(*o, x / 2.5, max_relative = 1e-14);
        }
    }

    #[test]
    fn cs_inverse_identity_m150() {
        let cs = CompoundSymmetry::new(4.0, 0.21).unwrap();
        let mut rng = derive_rng(3, &["cs"], 0);
        let v: Vec<f64> = (0..150).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let inv_v = cs.inverse_apply(&v);
        let dense = cs.dense(150);
        let back = dense * nalgebra::DVector::from_vec(inv_v);
        for (b, x) in back.iter().zip(&v) {
            assert!((b - x).abs() <= 1e-10, "|{b} - {x}|");
        }
    }

    #[test]
    fn cs_logdet_matches_dense() {
        let cs = CompoundSymmetry::new(1.7, 0.4).unwrap();
        let dense = cs.dense(7);
        let det = dense.determinant();
        assert_relative_eq!(cs.logdet(7), det.ln(), max_relative = 1e-10);
    }

    #[test]
    fn cs_rejects_nonpositive_residual_variance() {
        assert!(CompoundSymmetry::new(0.0, 1.0).is_err());
        assert!(CompoundSymmetry::new(-1.0, 1.0).is_err());
        assert!(CompoundSymmetry::new(1.0, -0.5).is_err());
    }

    fn tiny_dataset(y: Vec<Vec<f64>>, labels: Vec<u8>, design: &TrialDesign) -> OutcomeDataset {
        let scheme = AllocationScheme::new(labels, design).unwrap();
        OutcomeDataset::new(
            design.clone(),
            scheme,
            CovariateTable::empty(design.n_clusters()),
            y,
        )
        .unwrap()
    }

    #[test]
    fn loglik_single_observation() {
        // one cluster of size 1 fitted exactly: loglik = −½ log(2π σ_ε²)
        let design = TrialDesign::new(vec![1, 1], vec![1, 1]).unwrap();
        let data = tiny_dataset(vec![vec![3.0], vec![1.0]], vec![0, 1], &design);
        let spec = ModelSpec::null_model(Adjustment::Unadjusted);
        let s2 = 1.3;
        let params = LmmParams {
            fixed: vec![2.0], // intercept = mean
            sigma_gamma2: 0.0,
            sigma_eps2: s2,
        };
        let ll = marginal_loglik(&data, &spec, &params, FitMethod::Ml).unwrap();
        // two residuals of ±1: −(log(2π s²) + (1+1)/s²/... ) hand-computed:
        let expect = -0.5 * (2.0 * (2.0 * std::f64::consts::PI * s2).ln() + 2.0 / s2);
        assert_relative_eq!(ll, expect, max_relative = 1e-12);
    }

    #[test]
    fn loglik_location_invariance() {
        let design = TrialDesign::balanced(2, 2, 3).unwrap();
        let mut rng = derive_rng(11, &["loc"], 0);
        let y: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let y_shift: Vec<Vec<f64>> = y
            .iter()
            .map(|v| v.iter().map(|x| x + 5.0).collect())
            .collect();
        let data = tiny_dataset(y, vec![0, 1, 0, 1], &design);
        let data_shift = tiny_dataset(y_shift, vec![0, 1, 0, 1], &design);
        let spec = ModelSpec::full(Adjustment::Unadjusted, 2, 1);
        let params = LmmParams {
            fixed: vec![0.3, 0.7],
            sigma_gamma2: 0.5,
            sigma_eps2: 1.2,
        };
        let params_shift = LmmParams {
            fixed: vec![5.3, 0.7],
            sigma_gamma2: 0.5,
            sigma_eps2: 1.2,
        };
        for method in [FitMethod::Ml, FitMethod::Reml] {
            let a = marginal_loglik(&data, &spec, &params, method).unwrap();
            let b = marginal_loglik(&data_shift, &spec, &params_shift, method).unwrap();
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn reml_is_ml_plus_adjustment() {
        let design = TrialDesign::balanced(2, 2, 4).unwrap();
        let mut rng = derive_rng(13, &["reml"], 0);
        let y: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let data = tiny_dataset(y, vec![0, 1, 1, 0], &design);
        let spec = ModelSpec::full(Adjustment::Unadjusted, 2, 1);
        let params = LmmParams {
            fixed: vec![0.1, -0.2],
            sigma_gamma2: 0.3,
            sigma_eps2: 0.9,
        };
        let ml = marginal_loglik(&data, &spec, &params, FitMethod::Ml).unwrap();
        let reml = marginal_loglik(&data, &spec, &params, FitMethod::Reml).unwrap();
        // adjustment = −½ log|Σ_j X_j'Σ_j⁻¹X_j| computed densely
        let cs = CompoundSymmetry::new(params.sigma_eps2, params.sigma_gamma2).unwrap();
        let mut a = DMatrix::zeros(2, 2);
        let sizes = [4usize, 4, 4, 4];
        let t = [1.0, -1.0, -1.0, 1.0];
        for j in 0..4 {
            let x = DMatrix::from_fn(sizes[j], 2, |_, c| if c == 0 { 1.0 } else { t[j] });
            let sig_inv = cs.dense(sizes[j]).try_inverse().unwrap();
            a += x.transpose() * sig_inv * x;
        }
        let adj = -0.5 * a.determinant().ln();
        assert_relative_eq!(reml - ml, adj, max_relative = 1e-10);
    }

    #[test]
    fn gls_at_theta_zero_is_ols() {
        let design = TrialDesign::balanced(2, 3, 2).unwrap();
        let mut rng = derive_rng(17, &["ols"], 0);
        let y: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let data = tiny_dataset(y.clone(), vec![0, 1, 0, 1, 0, 1], &design);
        let spec = ModelSpec::full(Adjustment::Unadjusted, 2, 1);
        let prep = prepare_model(&data, &spec, true).unwrap();
        let pt = profile_at(&prep, 0.0, FitMethod::Ml).unwrap();
        // OLS by hand: X = [1, T]; closed form via arm means
        let flat: Vec<f64> = y.iter().flatten().cloned().collect();
        let t: Vec<f64> = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0]
            .iter()
            .flat_map(|&v| [v, v])
            .collect();
        let mean_y = flat.iter().sum::<f64>() / flat.len() as f64;
        let cov_ty = flat
            .iter()
            .zip(&t)
            .map(|(y, t)| y * t)
            .sum::<f64>()
            / flat.len() as f64;
        // with ±1 balanced coding: intercept = ȳ, slope = mean(t·y)
        assert_relative_eq!(pt.beta[0], mean_y, max_relative = 1e-12);
        assert_relative_eq!(pt.beta[1], cov_ty, max_relative = 1e-12);
    }

    #[test]
    fn collinear_design_names_columns() {
        let design = TrialDesign::balanced(2, 2, 2).unwrap();
        let table = CovariateTable::new(
            vec![vec![1.0, 1.0, 1.0, 1.0]], // constant: collinear with intercept
            vec!["flag".into()],
            vec![],
            vec![],
            4,
        )
        .unwrap();
        let scheme = AllocationScheme::new(vec![0, 1, 0, 1], &design).unwrap();
        let data = OutcomeDataset::new(
            design.clone(),
            scheme,
            table,
            vec![vec![1.0, 2.0], vec![0.5, 1.5], vec![2.0, 1.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let spec = ModelSpec::full(
            Adjustment::ClusterLevel(vec![ClusterCovariate::Column(0)]),
            2,
            1,
        );
        match fit(&data, &spec, FitMethod::Reml) {
            Err(Error::CollinearDesign { columns }) => {
                assert!(columns.contains(&"(intercept)".to_string()) || columns.contains(&"flag".to_string()));
            }
            other => panic!("expected collinearity error, got {other:?}"),
        }
    }

    #[test]
    fn fit_degenerate_case_matches_ols() {
        // σ_γ² = 0 data: LMM estimates should sit on top of OLS and ICC near 0.
        let design = TrialDesign::balanced(3, 4, 10).unwrap();
        let mut rng = derive_rng(23, &["deg"], 0);
        let mut labels = design.template_labels();
        for j in (1..labels.len()).rev() {
            let k = rng.random_range(0..=j);
            labels.swap(j, k);
        }
        let scheme = AllocationScheme::new(labels.clone(), &design).unwrap();
        let rows = scheme.indicator_rows(&design);
        let delta = [0.8, -0.4];
        let y: Vec<Vec<f64>> = (0..12)
            .map(|j| {
                let shift =
                    delta[0] * f64::from(rows[j][0]) + delta[1] * f64::from(rows[j][1]);
                (0..10)
                    .map(|_| shift + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let data = OutcomeDataset::new(
            design.clone(),
            scheme,
            CovariateTable::empty(12),
            y.clone(),
        )
        .unwrap();
        let spec = ModelSpec::full(Adjustment::Unadjusted, 3, 2);
        let fit = fit(&data, &spec, FitMethod::Reml).unwrap();
        assert!(fit.icc < 0.08, "icc = {}", fit.icc);
        // OLS oracle at θ = 0
        let prep = prepare_model(&data, &spec, false).unwrap();
        let ols = profile_at(&prep, 0.0, FitMethod::Ml).unwrap();
        let se = fit.delta_se(0).unwrap();
        assert!((fit.delta(0).unwrap() - ols.beta[1]).abs() < 3.0 * se);
        assert!((fit.delta(1).unwrap() - ols.beta[2]).abs() < 3.0 * se);
    }

    #[test]
    fn profile_beats_theta_grid() {
        let design = TrialDesign::balanced(3, 3, 6).unwrap();
        let mut rng = derive_rng(29, &["grid"], 0);
        let labels = design.template_labels();
        let scheme = AllocationScheme::new(labels, &design).unwrap();
        let y: Vec<Vec<f64>> = (0..9)
            .map(|_| {
                let b: f64 = rng.sample::<f64, _>(StandardNormal);
                (0..6)
                    .map(|_| 0.7 * b + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let data = OutcomeDataset::new(design, scheme, CovariateTable::empty(9), y).unwrap();
        let spec = ModelSpec::full(Adjustment::Unadjusted, 3, 2);
        for method in [FitMethod::Ml, FitMethod::Reml] {
            let fitres = fit(&data, &spec, method).unwrap();
            let prep = prepare_model(&data, &spec, true).unwrap();
            for i in 0..200 {
                let theta = THETA_MAX * (i as f64 + 0.5) / 200.0;
                let ll = profile_at(&prep, theta, method).unwrap().loglik;
                assert!(
                    fitres.loglik >= ll - 1e-6,
                    "grid point θ={theta} beats optimum: {ll} > {}",
                    fitres.loglik
                );
            }
        }
    }

    #[test]
    fn centering_reported_in_raw_coordinates() {
        // individual covariate with a large offset; coefficients must come
        // back on the raw scale
        let design = TrialDesign::balanced(2, 3, 5).unwrap();
        let mut rng = derive_rng(31, &["center"], 0);
        let z: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..5).map(|_| 100.0 + rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let y: Vec<Vec<f64>> = z
            .iter()
            .map(|col| {
                col.iter()
                    .map(|&zx| 2.0 * zx + 1.0 + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let table = CovariateTable::new(vec![], vec![], vec![z], vec!["z".into()], 6).unwrap();
        let scheme = AllocationScheme::new(vec![0, 1, 0, 1, 0, 1], &design).unwrap();
        let data = OutcomeDataset::new(design, scheme, table, y).unwrap();
        let spec = ModelSpec::full(Adjustment::IndividualLevel(vec![0]), 2, 1);
        let f = fit(&data, &spec, FitMethod::Reml).unwrap();
        let z_coef = f.coefficients[1];
        assert!((z_coef - 2.0).abs() < 0.2, "z coefficient {z_coef}");
        assert!((f.intercept() - 1.0).abs() < 25.0); // raw-scale intercept, noisy but finite
        assert_eq!(f.n_cluster_level_covariates, 0);
    }

    #[test]
    fn cluster_level_scan_counts_aggregates() {
        let design = TrialDesign::balanced(2, 2, 3).unwrap();
        let z: Vec<Vec<f64>> = vec![
            vec![1.0, 2.0, 3.0],
            vec![2.0, 2.0, 2.0],
            vec![0.0, 1.0, 2.0],
            vec![4.0, 4.0, 4.0],
        ];
        let x = vec![0.0, 1.0, 1.0, 0.0];
        let table = CovariateTable::new(
            vec![x],
            vec!["x".into()],
            vec![z],
            vec!["z".into()],
            4,
        )
        .unwrap();
        let scheme = AllocationScheme::new(vec![0, 1, 0, 1], &design).unwrap();
        let y = vec![vec![0.1, 0.2, 0.3]; 4];
        let data = OutcomeDataset::new(design, scheme, table, y).unwrap();
        let spec = ModelSpec::full(
            Adjustment::Fully {
                cluster: vec![ClusterCovariate::Column(0), ClusterCovariate::Aggregate(0)],
                individual: vec![0],
            },
            2,
            1,
        );
        let prep = prepare_model(&data, &spec, false).unwrap();
        // x and mean(z) are cluster level; raw z varies within clusters
        assert_eq!(prep.n_cluster_level_covariates, 2);
    }
}
