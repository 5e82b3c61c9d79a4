//! Independent-oracle checks: dense-matrix reference implementations,
//! brute-force grids, and simulation consistency for the model fit and the
//! randomization statistics.

use approx::assert_relative_eq;
use constrand_core::balance::{l2_score, mahalanobis_score};
use constrand_core::design::{AllocationScheme, CovariateTable, OutcomeDataset, TrialDesign};
use constrand_core::lmm::{
    fit, marginal_loglik, Adjustment, ClusterCovariate, CompoundSymmetry, FitMethod, LmmParams,
    ModelSpec,
};
use constrand_core::rand_tests::{invert_ci, pairwise_subspace, PairwiseSpaceOptions};
use constrand_core::seed::derive_rng;
use constrand_core::sim::{generate_dataset, DgpConfig, EffectSpec};
use constrand_core::space::{build_space, enumerate_space, DEFAULT_ENUM_LIMIT};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn fully_adjusted() -> Adjustment {
    Adjustment::Fully {
        cluster: vec![ClusterCovariate::Column(0), ClusterCovariate::Column(1)],
        individual: vec![0, 1],
    }
}

/// Hand-built trial with unequal cluster sizes and both covariate kinds.
fn irregular_dataset(seed: u64) -> (OutcomeDataset, ModelSpec) {
    let design = TrialDesign::new(vec![2, 2], vec![2, 3, 4, 5]).unwrap();
    let mut rng = derive_rng(seed, &["irregular"], 0);
    let x = vec![0.0, 1.0, 1.0, 0.0];
    let z: Vec<Vec<f64>> = design
        .cluster_sizes()
        .iter()
        .map(|&m| (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let table = CovariateTable::new(vec![x], vec!["x1".into()], vec![z], vec!["z1".into()], 4)
        .unwrap();
    let scheme = AllocationScheme::new(vec![0, 1, 0, 1], &design).unwrap();
    let outcomes: Vec<Vec<f64>> = design
        .cluster_sizes()
        .iter()
        .map(|&m| {
            (0..m)
                .map(|_| 1.0 + 2.0 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let data = OutcomeDataset::new(design, scheme, table, outcomes).unwrap();
    let spec = ModelSpec::full(
        Adjustment::Fully {
            cluster: vec![ClusterCovariate::Column(0)],
            individual: vec![0],
        },
        2,
        1,
    );
    (data, spec)
}

/// Dense-Cholesky multivariate-normal log density, cluster by cluster.
fn dense_loglik(data: &OutcomeDataset, spec: &ModelSpec, params: &LmmParams, reml: bool) -> f64 {
    let design = data.design();
    let table = data.covariates();
    let cs = CompoundSymmetry::new(params.sigma_eps2, params.sigma_gamma2).unwrap();
    // column order: intercept, cluster terms, individual terms, treatments
    let row_of = |j: usize, k: usize| -> Vec<f64> {
        let mut row = vec![1.0];
        if let Adjustment::Fully { cluster, individual } = &spec.adjustment {
            for t in cluster {
                match t {
                    ClusterCovariate::Column(i) => row.push(table.cluster_column(*i)[j]),
                    ClusterCovariate::Aggregate(i) => {
                        let agg = table.aggregate_to_cluster().unwrap();
                        row.push(agg[*i][j]);
                    }
                }
            }
            for &i in individual {
                row.push(table.individual_column(i)[j][k]);
            }
        }
        for &arm in &spec.include_treatment {
            row.push(if data.scheme().arm_of(j) == arm { 1.0 } else { -1.0 });
        }
        row
    };
    let p = params.fixed.len();
    let mut loglik = 0.0;
    let mut xsx = DMatrix::zeros(p, p);
    for j in 0..design.n_clusters() {
        let m = design.cluster_sizes()[j];
        let sigma = cs.dense(m);
        let chol = nalgebra::Cholesky::new(sigma).unwrap();
        let x = DMatrix::from_fn(m, p, |r, c| row_of(j, r)[c]);
        let y = DVector::from_fn(m, |r, _| data.outcomes()[j][r]);
        let resid = &y - &x * DVector::from_column_slice(&params.fixed);
        let solved = chol.solve(&resid);
        let quad = resid.dot(&solved);
        let logdet = 2.0
            * chol
                .l()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        loglik += -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
        let sigma_inv = nalgebra::Cholesky::new(cs.dense(m)).unwrap().inverse();
        xsx += x.transpose() * sigma_inv * x;
    }
    if reml {
        loglik -= 0.5 * xsx.determinant().ln();
    }
    loglik
}

#[test]
fn marginal_loglik_matches_dense_oracle() {
    let (data, spec) = irregular_dataset(101);
    let params = LmmParams {
        fixed: vec![0.8, -0.5, 1.2, 0.3],
        sigma_gamma2: 0.6,
        sigma_eps2: 3.1,
    };
    for (method, reml) in [(FitMethod::Ml, false), (FitMethod::Reml, true)] {
        let fast = marginal_loglik(&data, &spec, &params, method).unwrap();
        let dense = dense_loglik(&data, &spec, &params, reml);
        assert_relative_eq!(fast, dense, max_relative = 1e-8);
    }
}

#[test]
fn profile_optimum_beats_two_dim_grid() {
    let (data, spec) = irregular_dataset(102);
    for method in [(FitMethod::Ml, false), (FitMethod::Reml, true)] {
        let fitted = fit(&data, &spec, method.0).unwrap();
        // brute-force 2-D grid over (σ_γ², σ_ε²) with dense GLS at each node
        let mut best = f64::MIN;
        for ig in 0..30 {
            for ie in 1..40 {
                let sigma_gamma2 = 2.0 * ig as f64 / 29.0;
                let sigma_eps2 = 6.0 * ie as f64 / 39.0;
                let beta = dense_gls(&data, &spec, sigma_eps2, sigma_gamma2);
                let params = LmmParams {
                    fixed: beta,
                    sigma_gamma2,
                    sigma_eps2,
                };
                let ll = dense_loglik(&data, &spec, &params, method.1);
                if ll > best {
                    best = ll;
                }
            }
        }
        assert!(
            fitted.loglik >= best - 1e-4,
            "grid {best} beats profile {}",
            fitted.loglik
        );
    }
}

fn dense_gls(
    data: &OutcomeDataset,
    spec: &ModelSpec,
    sigma_eps2: f64,
    sigma_gamma2: f64,
) -> Vec<f64> {
    let design = data.design();
    let table = data.covariates();
    let cs = CompoundSymmetry::new(sigma_eps2, sigma_gamma2).unwrap();
    let p = match &spec.adjustment {
        Adjustment::Fully { cluster, individual } => 1 + cluster.len() + individual.len(),
        Adjustment::Unadjusted => 1,
        Adjustment::ClusterLevel(c) => 1 + c.len(),
        Adjustment::IndividualLevel(i) => 1 + i.len(),
    } + spec.include_treatment.len();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for j in 0..design.n_clusters() {
        let m = design.cluster_sizes()[j];
        let x = DMatrix::from_fn(m, p, |r, c| {
            // same column order as the fast path
            let mut row = vec![1.0];
            if let Adjustment::Fully { cluster, individual } = &spec.adjustment {
                for t in cluster {
                    match t {
                        ClusterCovariate::Column(i) => row.push(table.cluster_column(*i)[j]),
                        ClusterCovariate::Aggregate(_) => unreachable!("not used here"),
                    }
                }
                for &i in individual {
                    row.push(table.individual_column(i)[j][r]);
                }
            }
            for &arm in &spec.include_treatment {
                row.push(if data.scheme().arm_of(j) == arm { 1.0 } else { -1.0 });
            }
            row[c]
        });
        let y = DVector::from_fn(m, |r, _| data.outcomes()[j][r]);
        let sigma_inv = nalgebra::Cholesky::new(cs.dense(m)).unwrap().inverse();
        a += x.transpose() * &sigma_inv * &x;
        b += x.transpose() * &sigma_inv * y;
    }
    nalgebra::Cholesky::new(a)
        .unwrap()
        .solve(&b)
        .iter()
        .cloned()
        .collect()
}

#[test]
fn icc_recovered_across_replicates() {
    // DGP at ρ = 0.05, G = 30, m = 150: mean ρ̂ within ±0.03 over 200 fits
    let dgp = DgpConfig::paper_default(10, 0.05);
    let design = dgp.design().unwrap();
    let template = AllocationScheme::new(design.template_labels(), &design).unwrap();
    let spec = ModelSpec::full(fully_adjusted(), 3, 2);
    let mut acc = 0.0;
    let reps = 200;
    for r in 0..reps {
        let data = generate_dataset(&dgp, &template, &mut derive_rng(7, &["icc-fit"], r)).unwrap();
        let f = fit(&data, &spec, FitMethod::Reml).unwrap();
        acc += f.icc;
    }
    let mean = acc / reps as f64;
    assert!((mean - 0.05).abs() < 0.03, "mean ICC estimate {mean}");
}

#[test]
fn reml_and_ml_estimates_agree_on_large_g() {
    let dgp = DgpConfig::paper_default(10, 0.05);
    let design = dgp.design().unwrap();
    let template = AllocationScheme::new(design.template_labels(), &design).unwrap();
    let spec = ModelSpec::full(fully_adjusted(), 3, 2);
    for r in 0..3 {
        let data = generate_dataset(&dgp, &template, &mut derive_rng(8, &["mlreml"], r)).unwrap();
        let f_ml = fit(&data, &spec, FitMethod::Ml).unwrap();
        let f_reml = fit(&data, &spec, FitMethod::Reml).unwrap();
        let se = f_reml.delta_se(0).unwrap();
        assert!(
            (f_ml.delta(0).unwrap() - f_reml.delta(0).unwrap()).abs() < se,
            "ML and REML differ by more than one SE"
        );
    }
}

#[test]
fn model_se_matches_empirical_spread() {
    // vcov_fixed reproduces the empirical variance of δ̂ within 15%
    let dgp = DgpConfig::paper_default(10, 0.05);
    let design = dgp.design().unwrap();
    let template = AllocationScheme::new(design.template_labels(), &design).unwrap();
    let spec = ModelSpec::full(fully_adjusted(), 3, 2);
    let reps = 400;
    let mut deltas = Vec::with_capacity(reps);
    let mut model_var = 0.0;
    for r in 0..reps {
        let data = generate_dataset(&dgp, &template, &mut derive_rng(9, &["sevar"], r as u64))
            .unwrap();
        let f = fit(&data, &spec, FitMethod::Reml).unwrap();
        deltas.push(f.delta(0).unwrap());
        model_var += f.delta_se(0).unwrap().powi(2);
    }
    model_var /= reps as f64;
    let mean = deltas.iter().sum::<f64>() / reps as f64;
    let emp_var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let ratio = model_var / emp_var;
    assert!(
        (0.85..1.15).contains(&ratio),
        "model/empirical variance ratio {ratio}"
    );
}

#[test]
fn mahalanobis_affine_invariance() {
    // nonsingular linear transform of the columns leaves B_(M) unchanged
    let design = TrialDesign::balanced(3, 3, 1).unwrap();
    let mut rng = derive_rng(10, &["affine"], 0);
    let cols: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..9).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let a = [
        [1.5, 0.3, -0.2],
        [0.0, 0.8, 0.4],
        [0.2, -0.1, 1.1],
    ];
    let transformed: Vec<Vec<f64>> = (0..3)
        .map(|out| {
            (0..9)
                .map(|j| (0..3).map(|inp| a[out][inp] * cols[inp][j]).sum())
                .collect()
        })
        .collect();
    let labels = [0u8, 1, 2, 0, 1, 2, 0, 1, 2];
    let (m1, s1) = mahalanobis_score(&labels, &design, &cols);
    let (m2, s2) = mahalanobis_score(&labels, &design, &transformed);
    assert!(!s1 && !s2);
    assert_relative_eq!(m1, m2, max_relative = 1e-8);
}

#[test]
fn ci_coverage_of_true_effect() {
    // membership of the true mean difference in the inverted CI happens with
    // probability 1 − α: p(Δ_true) is exactly uniform over the 20-scheme
    // space, so coverage is 0.95 ± binomial noise over 500 replicates
    let true_delta = 0.7;
    let dgp = DgpConfig {
        n_arms: 2,
        g: 3,
        m: 20,
        effects: EffectSpec::Delta(vec![true_delta]),
        ..DgpConfig::paper_default(2, 0.05)
    };
    let design = dgp.design().unwrap();
    let space = enumerate_space(&design, DEFAULT_ENUM_LIMIT).unwrap();
    let reps = 500;
    let mut covered = 0usize;
    for r in 0..reps {
        let mut rng = derive_rng(11, &["cover"], r);
        let scheme = space.select_scheme(&mut rng).unwrap();
        let data = generate_dataset(&dgp, &scheme, &mut rng).unwrap();
        let ci = invert_ci(
            &data,
            &space,
            0,
            &[2.0 * true_delta],
            0.05,
            Adjustment::Unadjusted,
            FitMethod::Reml,
            &PairwiseSpaceOptions::default(),
        )
        .unwrap();
        if !ci.degenerate {
            covered += 1;
        }
    }
    let coverage = covered as f64 / reps as f64;
    assert!(
        (coverage - 0.95).abs() < 0.04,
        "coverage of the true value {coverage}"
    );
}

#[test]
fn ci_contains_lmm_point_estimate() {
    let dgp = DgpConfig {
        g: 10,
        m: 25,
        effects: EffectSpec::Delta(vec![0.6, 0.3]),
        ..DgpConfig::paper_default(10, 0.05)
    };
    let design = dgp.design().unwrap();
    let spec = ModelSpec::full(Adjustment::Unadjusted, 3, 2);
    let reps = 60;
    let mut contained = 0usize;
    for r in 0..reps {
        let mut rng = derive_rng(12, &["cipoint"], r);
        let space = build_space(&design, DEFAULT_ENUM_LIMIT, 2000, &mut rng).unwrap();
        let scheme = space.select_scheme(&mut rng).unwrap();
        let data = generate_dataset(&dgp, &scheme, &mut rng).unwrap();
        let f = fit(&data, &spec, FitMethod::Reml).unwrap();
        let point = 2.0 * f.delta(0).unwrap();
        let ci = invert_ci(
            &data,
            &space,
            0,
            &[point],
            0.05,
            Adjustment::Unadjusted,
            FitMethod::Reml,
            &PairwiseSpaceOptions::default(),
        )
        .unwrap();
        if !ci.degenerate {
            contained += 1;
        }
    }
    assert!(
        contained as f64 / reps as f64 >= 0.95,
        "LMM point estimate contained in {contained}/{reps} intervals"
    );
}

#[test]
fn conditional_subspace_brute_force_on_constrained_space() {
    // subspace of a constrained space == brute-force filter over retained
    use constrand_core::balance::{BalanceColumn, BalanceScorer, BalanceSpec};
    use constrand_core::space::Cutoff;
    let dgp = DgpConfig {
        g: 3,
        m: 4,
        ..DgpConfig::paper_default(3, 0.05)
    };
    let design = dgp.design().unwrap();
    let mut rng = derive_rng(13, &["condsub"], 0);
    let table = constrand_core::sim::generate_covariates(&dgp, &mut rng).unwrap();
    let spec = BalanceSpec::l2(vec![
        BalanceColumn::AggregatedIndividual(0),
        BalanceColumn::AggregatedIndividual(1),
    ]);
    let scorer = BalanceScorer::prepare(&spec, &table, &design).unwrap();
    let space = enumerate_space(&design, DEFAULT_ENUM_LIMIT).unwrap();
    let constrained = space.constrain(&scorer, Cutoff::Quantile(0.3)).unwrap();
    let observed = constrained.select_scheme(&mut rng).unwrap();
    let sub = constrained.conditional_subspace(&design, &observed, 0).unwrap();
    // brute force: retained schemes agreeing outside {arm 0, reference}
    let fixed: Vec<usize> = (0..9)
        .filter(|&j| observed.arm_of(j) == 1)
        .collect();
    let brute: Vec<Vec<u8>> = constrained
        .retained_label_slices()
        .filter(|s| fixed.iter().all(|&j| s[j] == observed.labels()[j]))
        .map(|s| s.to_vec())
        .collect();
    assert_eq!(sub.n_retained(), brute.len());
    assert!(sub.n_retained() <= 20);
    assert!(sub.contains_retained(observed.labels()));
}

#[test]
fn pairwise_subspace_of_sampled_space_reapplies_cutoff() {
    use constrand_core::balance::{BalanceColumn, BalanceScorer, BalanceSpec};
    use constrand_core::space::{sample_space, Cutoff};
    let dgp = DgpConfig {
        g: 4,
        m: 3,
        ..DgpConfig::paper_default(3, 0.05)
    };
    let design = dgp.design().unwrap();
    let mut rng = derive_rng(14, &["pwsub"], 0);
    let table = constrand_core::sim::generate_covariates(&dgp, &mut rng).unwrap();
    let spec = BalanceSpec::l2(vec![
        BalanceColumn::Cluster(0),
        BalanceColumn::Cluster(1),
    ]);
    // cluster binaries can be constant on 12 clusters; skip such draws
    let scorer = match BalanceScorer::prepare(&spec, &table, &design) {
        Ok(s) => s,
        Err(_) => return,
    };
    let mut space = sample_space(&design, 5000, &mut rng).unwrap();
    space.score_with(&scorer);
    let constrained = space.constrain(&scorer, Cutoff::Quantile(0.5)).unwrap();
    let observed = constrained.select_scheme(&mut rng).unwrap();
    let data = {
        let noise = constrand_core::sim::draw_noise(&dgp, &mut rng).unwrap();
        constrand_core::sim::assemble_outcomes(&dgp, &table, &observed, &noise, &[0.0, 0.0])
            .unwrap()
    };
    let options = PairwiseSpaceOptions {
        rescorer: Some(&scorer),
        ..PairwiseSpaceOptions::default()
    };
    let sub = pairwise_subspace(&data, &constrained, 0, &options).unwrap();
    // every retained conditional scheme satisfies the design-phase cutoff
    let b_star = constrained.constraint().unwrap().realized;
    for labels in sub.retained_label_slices() {
        assert!(scorer.score(labels) <= b_star + 1e-12);
    }
    assert!(sub.contains_retained(observed.labels()));
    // C(8,4) = 70 arrangements before the cutoff
    assert!(sub.len() <= 70);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cs_inverse_identity_random(
        m in 1usize..40,
        sigma_eps2 in 0.1f64..10.0,
        sigma_gamma2 in 0.0f64..5.0,
        seed in 0u64..1000,
    ) {
        let cs = CompoundSymmetry::new(sigma_eps2, sigma_gamma2).unwrap();
        let mut rng = derive_rng(seed, &["prop-cs"], 0);
        let v: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let inv = cs.inverse_apply(&v);
        let back = cs.dense(m) * DVector::from_vec(inv);
        for (b, x) in back.iter().zip(&v) {
            prop_assert!((b - x).abs() <= 1e-10);
        }
    }

    #[test]
    fn l2_default_weights_scale_invariant(
        seed in 0u64..1000,
        scale in 0.01f64..100.0,
    ) {
        // rescaling a column rescales its default weight reciprocally
        let design = TrialDesign::balanced(3, 2, 1).unwrap();
        let mut rng = derive_rng(seed, &["prop-l2"], 0);
        let col: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let labels = [0u8, 1, 2, 2, 1, 0];
        let w = constrand_core::balance::default_weights(&[col.clone()], &["a".into()]).unwrap();
        let scaled: Vec<f64> = col.iter().map(|x| scale * x).collect();
        let w2 = constrand_core::balance::default_weights(&[scaled.clone()], &["a".into()]).unwrap();
        let s1 = l2_score(&labels, &design, &[col], &w);
        let s2 = l2_score(&labels, &design, &[scaled], &w2);
        prop_assert!((s1 - s2).abs() <= 1e-10 * s1.abs().max(1.0));
    }

    #[test]
    fn quantile_constraint_monotone(q1 in 0.05f64..1.0, q2 in 0.05f64..1.0) {
        use constrand_core::balance::{BalanceColumn, BalanceScorer, BalanceSpec};
        use constrand_core::space::Cutoff;
        let (qa, qb) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let design = TrialDesign::balanced(3, 2, 1).unwrap();
        let col: Vec<f64> = (0..6).map(|j| (j as f64 * 0.37).sin()).collect();
        let table = CovariateTable::new(vec![col], vec!["x".into()], vec![], vec![], 6).unwrap();
        let scorer = BalanceScorer::prepare(
            &BalanceSpec::l2(vec![BalanceColumn::Cluster(0)]),
            &table,
            &design,
        ).unwrap();
        let space = enumerate_space(&design, DEFAULT_ENUM_LIMIT).unwrap();
        let small = space.constrain(&scorer, Cutoff::Quantile(qa)).unwrap();
        let large = space.constrain(&scorer, Cutoff::Quantile(qb)).unwrap();
        for i in 0..space.len() {
            if small.is_retained(i) {
                prop_assert!(large.is_retained(i));
            }
        }
    }
}
