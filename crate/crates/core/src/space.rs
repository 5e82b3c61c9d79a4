//! Construction, scoring, constraining, and subsetting of randomization
//! spaces.
//!
//! A [`RandomizationSpace`] holds every candidate scheme (flat label
//! storage), optional balance scores, and a retained mask. Constraining
//! keeps schemes whose score does not exceed the realized cutoff
//! `B* = F_B⁻¹(q)` (lower-tail inverse ECDF, ties included) or the `n`
//! smallest-scored schemes. Enumeration is exhaustive below a configurable
//! limit; above it, uniform sampling with deduplication is used, matching
//! the usual 20,000-draw approximation of large spaces.

use crate::balance::{BalanceMetric, BalanceScorer};
use crate::design::{AllocationScheme, TrialDesign};
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};

/// Hard ceiling on exhaustive enumeration; larger spaces must be sampled.
pub const DEFAULT_ENUM_LIMIT: u128 = 200_000;
/// Default number of uniform draws when sampling a large space.
pub const DEFAULT_SAMPLE_DRAWS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Enumerated,
    Sampled { n_draws: usize },
}

/// Constraint cutoff: a quantile of the empirical score distribution, or an
/// absolute count of best-scoring schemes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Cutoff {
    Quantile(f64),
    Count(usize),
}

/// Metadata recorded when a space is constrained, sufficient to re-apply the
/// same constraint to a conditional space later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub metric: BalanceMetric,
    pub column_names: Vec<String>,
    pub cutoff: Cutoff,
    /// Realized cutoff score `B*`; retained schemes satisfy `score ≤ B*`.
    pub realized: f64,
}

/// A scored, possibly constrained set of allocation schemes.
#[derive(Debug, Clone)]
pub struct RandomizationSpace {
    n_clusters: usize,
    /// Flat label storage, stride `n_clusters`.
    labels: Vec<u8>,
    scores: Option<Vec<f64>>,
    retained: Vec<bool>,
    n_retained: usize,
    provenance: Provenance,
    constraint: Option<Constraint>,
}

impl RandomizationSpace {
    fn from_flat(n_clusters: usize, labels: Vec<u8>, provenance: Provenance) -> Self {
        let n = if n_clusters == 0 { 0 } else { labels.len() / n_clusters };
        Self {
            n_clusters,
            labels,
            scores: None,
            retained: vec![true; n],
            n_retained: n,
            provenance,
            constraint: None,
        }
    }

    pub fn len(&self) -> usize {
        if self.n_clusters == 0 {
            0
        } else {
            self.labels.len() / self.n_clusters
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of schemes surviving the constraint (all of them when
    /// unconstrained).
    pub fn n_retained(&self) -> usize {
        self.n_retained
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn constraint(&self) -> Option<&Constraint> {
        self.constraint.as_ref()
    }

    pub fn scores(&self) -> Option<&[f64]> {
        self.scores.as_deref()
    }

    pub fn is_retained(&self, idx: usize) -> bool {
        self.retained[idx]
    }

    pub fn scheme_labels(&self, idx: usize) -> &[u8] {
        &self.labels[idx * self.n_clusters..(idx + 1) * self.n_clusters]
    }

    pub fn scheme(&self, idx: usize) -> AllocationScheme {
        AllocationScheme::from_valid_labels(self.scheme_labels(idx).to_vec())
    }

    /// Indices of retained schemes in storage order.
    pub fn retained_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.retained[i])
    }

    /// Label slices of retained schemes in storage order.
    pub fn retained_label_slices(&self) -> impl Iterator<Item = &[u8]> + '_ {
        self.retained_indices().map(|i| self.scheme_labels(i))
    }

    /// Position of a scheme among all stored schemes, by label equality.
    pub fn find(&self, labels: &[u8]) -> Option<usize> {
        if labels.len() != self.n_clusters {
            return None;
        }
        self.labels
            .chunks_exact(self.n_clusters)
            .position(|s| s == labels)
    }

    /// Whether the scheme is present and retained.
    pub fn contains_retained(&self, labels: &[u8]) -> bool {
        self.find(labels).map(|i| self.retained[i]).unwrap_or(false)
    }

    /// Compute and store balance scores for every scheme.
    pub fn score_with(&mut self, scorer: &BalanceScorer) {
        self.scores = Some(scorer.score_flat(&self.labels, self.n_clusters));
    }

    /// Retain the best-balanced subset of this space under the given scorer
    /// and cutoff; scores are computed if not already present.
    pub fn constrain(&self, scorer: &BalanceScorer, cutoff: Cutoff) -> Result<RandomizationSpace> {
        let mut out = self.clone();
        if out.scores.is_none() {
            out.score_with(scorer);
        }
        let scores = out.scores.as_ref().unwrap();
        let (retained, realized) = retained_mask(scores, cutoff)?;
        out.n_retained = retained.iter().filter(|&&r| r).count();
        out.retained = retained;
        out.constraint = Some(Constraint {
            metric: scorer.metric(),
            column_names: scorer.column_names().to_vec(),
            cutoff,
            realized,
        });
        Ok(out)
    }

    /// Uniform draw over retained schemes.
    pub fn select_scheme<R: Rng>(&self, rng: &mut R) -> Result<AllocationScheme> {
        if self.n_retained == 0 {
            return Err(Error::InvalidArgument("empty randomization space".into()));
        }
        let k = rng.random_range(0..self.n_retained);
        let idx = self
            .retained_indices()
            .nth(k)
            .expect("retained count consistent");
        Ok(self.scheme(idx))
    }

    /// Re-apply a design-phase constraint: score every scheme with `scorer`
    /// and retain those at or below the recorded realized cutoff.
    pub fn filter_by_score(
        &self,
        scorer: &BalanceScorer,
        constraint: &Constraint,
    ) -> Result<RandomizationSpace> {
        let mut out = self.clone();
        out.score_with(scorer);
        let scores = out.scores.as_ref().unwrap();
        let retained: Vec<bool> = scores
            .iter()
            .zip(&self.retained)
            .map(|(&s, &kept)| kept && s <= constraint.realized)
            .collect();
        out.n_retained = retained.iter().filter(|&&r| r).count();
        if out.n_retained == 0 {
            return Err(Error::Protocol(
                "design-phase cutoff excludes every conditional scheme".into(),
            ));
        }
        out.retained = retained;
        out.constraint = Some(constraint.clone());
        Ok(out)
    }

    /// The subspace for a pairwise comparison: retained schemes whose labels
    /// agree with the observed scheme on every cluster the observed scheme
    /// does not place in `arm` or the reference arm.
    pub fn conditional_subspace(
        &self,
        design: &TrialDesign,
        observed: &AllocationScheme,
        arm: usize,
    ) -> Result<RandomizationSpace> {
        let reference = design.reference_arm();
        if arm == reference || arm >= design.n_arms() {
            return Err(Error::InvalidArgument(format!(
                "pairwise arm {arm} must be a non-reference arm"
            )));
        }
        if design.n_arms() == 2 {
            // nothing to condition on
            let mut out = self.clone();
            out.constraint = self.constraint.clone();
            return Ok(out);
        }
        let obs = observed.labels();
        let fixed: Vec<usize> = (0..self.n_clusters)
            .filter(|&j| {
                let l = usize::from(obs[j]);
                l != arm && l != reference
            })
            .collect();
        let mut labels = Vec::new();
        let mut scores = self.scores.as_ref().map(|_| Vec::new());
        for idx in self.retained_indices() {
            let cand = self.scheme_labels(idx);
            if fixed.iter().all(|&j| cand[j] == obs[j]) {
                labels.extend_from_slice(cand);
                if let (Some(out), Some(s)) = (scores.as_mut(), self.scores.as_ref()) {
                    out.push(s[idx]);
                }
            }
        }
        let n = labels.len() / self.n_clusters;
        Ok(RandomizationSpace {
            n_clusters: self.n_clusters,
            labels,
            scores,
            retained: vec![true; n],
            n_retained: n,
            provenance: self.provenance,
            constraint: self.constraint.clone(),
        })
    }
}

/// Retained mask plus realized cutoff for a score vector under a cutoff rule.
fn retained_mask(scores: &[f64], cutoff: Cutoff) -> Result<(Vec<bool>, f64)> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty randomization space".into()));
    }
    match cutoff {
        Cutoff::Quantile(q) => {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "quantile cutoff must lie in (0, 1], got {q}"
                )));
            }
            let mut sorted = scores.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
            let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
            let realized = sorted[idx];
            let retained: Vec<bool> = scores.iter().map(|&s| s <= realized).collect();
            Ok((retained, realized))
        }
        Cutoff::Count(k) => {
            if k == 0 || k > n {
                return Err(Error::InvalidArgument(format!(
                    "count cutoff must lie in 1..={n}, got {k}"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            // stable: ties broken by original position
            order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
            let mut retained = vec![false; n];
            for &i in order.iter().take(k) {
                retained[i] = true;
            }
            let realized = scores[order[k - 1]];
            Ok((retained, realized))
        }
    }
}

/// Exact size of the balanced allocation space `G! / Π g_i!`, or `None` on
/// u128 overflow.
pub fn space_size(design: &TrialDesign) -> Option<u128> {
    let mut remaining = design.n_clusters() as u128;
    let mut total: u128 = 1;
    for &g in design.clusters_per_arm() {
        total = total.checked_mul(binomial_u128(remaining, g as u128)?)?;
        remaining -= g as u128;
    }
    Some(total)
}

fn binomial_u128(n: u128, k: u128) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 1..=k {
        acc = acc.checked_mul(n - k + i)?;
        acc /= i;
    }
    Some(acc)
}

/// Enumerate every distinct label vector with the design's per-arm counts,
/// in lexicographic order. Errors with the exact count when the space
/// exceeds `limit`.
pub fn enumerate_space(design: &TrialDesign, limit: u128) -> Result<RandomizationSpace> {
    let count = space_size(design).ok_or(Error::MustSample {
        count: u128::MAX,
        limit,
    })?;
    if count > limit {
        return Err(Error::MustSample { count, limit });
    }
    let g = design.n_clusters();
    let mut labels = Vec::with_capacity(count as usize * g);
    let mut current = design.template_labels(); // sorted ascending
    loop {
        labels.extend_from_slice(&current);
        if !next_permutation(&mut current) {
            break;
        }
    }
    debug_assert_eq!(labels.len() as u128, count * g as u128);
    Ok(RandomizationSpace::from_flat(
        g,
        labels,
        Provenance::Enumerated,
    ))
}

/// Classic next-lexicographic-permutation on a multiset; false once the
/// sequence is the last (descending) arrangement.
fn next_permutation(seq: &mut [u8]) -> bool {
    if seq.len() < 2 {
        return false;
    }
    let mut i = seq.len() - 1;
    while i > 0 && seq[i - 1] >= seq[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let pivot = i - 1;
    let mut j = seq.len() - 1;
    while seq[j] <= seq[pivot] {
        j -= 1;
    }
    seq.swap(pivot, j);
    seq[i..].reverse();
    true
}

/// Draw `n_draws` schemes uniformly from the balanced allocation space and
/// deduplicate, keeping first-draw order.
pub fn sample_space<R: Rng>(
    design: &TrialDesign,
    n_draws: usize,
    rng: &mut R,
) -> Result<RandomizationSpace> {
    if n_draws == 0 {
        return Err(Error::InvalidArgument("n_draws must be >= 1".into()));
    }
    let g = design.n_clusters();
    let mut template = design.template_labels();
    let mut seen: HashSet<Vec<u8>> = HashSet::with_capacity(n_draws.min(1 << 20));
    let mut labels = Vec::new();
    for _ in 0..n_draws {
        // Fisher–Yates on the multiset template is uniform over label vectors.
        for j in (1..g).rev() {
            let k = rng.random_range(0..=j);
            template.swap(j, k);
        }
        if seen.insert(template.clone()) {
            labels.extend_from_slice(&template);
        }
    }
    Ok(RandomizationSpace::from_flat(
        g,
        labels,
        Provenance::Sampled { n_draws },
    ))
}

/// Enumerate the full space when it fits under `limit`, otherwise sample.
pub fn build_space<R: Rng>(
    design: &TrialDesign,
    limit: u128,
    n_draws: usize,
    rng: &mut R,
) -> Result<RandomizationSpace> {
    match enumerate_space(design, limit) {
        Ok(space) => Ok(space),
        Err(Error::MustSample { .. }) => sample_space(design, n_draws, rng),
        Err(e) => Err(e),
    }
}

/// Enumerate the conditional space for a pairwise comparison directly: all
/// label vectors that agree with `observed` outside the clusters it places in
/// `arm` or the reference arm. Its size is `C(g_arm + g_ref, g_arm)`. Errors
/// with the exact count above `limit`.
pub fn enumerate_conditional(
    design: &TrialDesign,
    observed: &AllocationScheme,
    arm: usize,
    limit: u128,
) -> Result<RandomizationSpace> {
    let reference = design.reference_arm();
    if arm == reference || arm >= design.n_arms() {
        return Err(Error::InvalidArgument(format!(
            "pairwise arm {arm} must be a non-reference arm"
        )));
    }
    let obs = observed.labels();
    let positions: Vec<usize> = (0..obs.len())
        .filter(|&j| {
            let l = usize::from(obs[j]);
            l == arm || l == reference
        })
        .collect();
    let g_arm = design.clusters_per_arm()[arm];
    let count = binomial_u128(positions.len() as u128, g_arm as u128)
        .ok_or(Error::MustSample { count: u128::MAX, limit })?;
    if count > limit {
        return Err(Error::MustSample { count, limit });
    }
    let g = obs.len();
    let mut labels = Vec::with_capacity(count as usize * g);
    // Iterate subsets of `positions` of size g_arm in lexicographic order.
    let mut choose: Vec<usize> = (0..g_arm).collect();
    loop {
        let mut cand = obs.to_vec();
        for &p in &positions {
            cand[p] = reference as u8;
        }
        for &c in &choose {
            cand[positions[c]] = arm as u8;
        }
        labels.extend_from_slice(&cand);
        if !next_combination(&mut choose, positions.len()) {
            break;
        }
    }
    Ok(RandomizationSpace::from_flat(
        g,
        labels,
        Provenance::Enumerated,
    ))
}

fn next_combination(choose: &mut [usize], n: usize) -> bool {
    let k = choose.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if choose[i] != i + n - k {
            choose[i] += 1;
            for j in i + 1..k {
                choose[j] = choose[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Sample the conditional space for a pairwise comparison: permute only the
/// clusters the observed scheme places in `arm` or the reference arm,
/// deduplicate, and make sure the observed scheme itself is present.
pub fn sample_conditional<R: Rng>(
    design: &TrialDesign,
    observed: &AllocationScheme,
    arm: usize,
    n_draws: usize,
    rng: &mut R,
) -> Result<RandomizationSpace> {
    let reference = design.reference_arm();
    if arm == reference || arm >= design.n_arms() {
        return Err(Error::InvalidArgument(format!(
            "pairwise arm {arm} must be a non-reference arm"
        )));
    }
    if n_draws == 0 {
        return Err(Error::InvalidArgument("n_draws must be >= 1".into()));
    }
    let obs = observed.labels();
    let positions: Vec<usize> = (0..obs.len())
        .filter(|&j| {
            let l = usize::from(obs[j]);
            l == arm || l == reference
        })
        .collect();
    let g = obs.len();
    let mut sub: Vec<u8> = positions.iter().map(|&p| obs[p]).collect();
    sub.sort_unstable();
    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    let mut labels = Vec::new();
    let push = |sub_labels: &[u8], seen: &mut HashSet<Vec<u8>>, labels: &mut Vec<u8>| {
        if seen.insert(sub_labels.to_vec()) {
            let mut cand = obs.to_vec();
            for (slot, &p) in positions.iter().enumerate() {
                cand[p] = sub_labels[slot];
            }
            labels.extend_from_slice(&cand);
        }
    };
    // the observed scheme always belongs to its own conditional space
    let obs_sub: Vec<u8> = positions.iter().map(|&p| obs[p]).collect();
    push(&obs_sub, &mut seen, &mut labels);
    for _ in 0..n_draws {
        for j in (1..sub.len()).rev() {
            let k = rng.random_range(0..=j);
            sub.swap(j, k);
        }
        push(&sub, &mut seen, &mut labels);
    }
    Ok(RandomizationSpace::from_flat(
        g,
        labels,
        Provenance::Sampled { n_draws },
    ))
}

// ---------------------------------------------------------------------------
// Snapshot serialization: comment preamble, then a header row, then one row
// per scheme as comma-joined 1-based labels, score, retained flag.
// ---------------------------------------------------------------------------

const SNAPSHOT_MAGIC: &str = "# constrand-space v1";

impl RandomizationSpace {
    pub fn write_snapshot<W: Write>(
        &self,
        mut w: W,
        cluster_ids: &[String],
        extra_meta: &[(String, String)],
    ) -> std::io::Result<()> {
        writeln!(w, "{SNAPSHOT_MAGIC}")?;
        writeln!(w, "# clusters: {}", cluster_ids.join(","))?;
        match self.provenance {
            Provenance::Enumerated => writeln!(w, "# provenance: enumerated")?,
            Provenance::Sampled { n_draws } => writeln!(w, "# provenance: sampled:{n_draws}")?,
        }
        if let Some(c) = &self.constraint {
            writeln!(w, "# metric: {}", c.metric.as_str())?;
            writeln!(w, "# balance-columns: {}", c.column_names.join(","))?;
            match c.cutoff {
                Cutoff::Quantile(q) => writeln!(w, "# cutoff: quantile:{q}")?,
                Cutoff::Count(n) => writeln!(w, "# cutoff: count:{n}")?,
            }
            writeln!(w, "# realized-cutoff: {}", c.realized)?;
        }
        for (k, v) in extra_meta {
            writeln!(w, "# {k}: {v}")?;
        }
        writeln!(w, "{},score,retained", cluster_ids.join(","))?;
        let zeros;
        let scores = match &self.scores {
            Some(s) => s.as_slice(),
            None => {
                zeros = vec![0.0; self.len()];
                &zeros
            }
        };
        for idx in 0..self.len() {
            let labs: Vec<String> = self
                .scheme_labels(idx)
                .iter()
                .map(|&l| (l + 1).to_string())
                .collect();
            writeln!(
                w,
                "{},{},{}",
                labs.join(","),
                scores[idx],
                u8::from(self.retained[idx])
            )?;
        }
        Ok(())
    }

    /// Parse a snapshot; returns the space and the cluster ids it was written
    /// with.
    pub fn read_snapshot<R: BufRead>(r: R) -> Result<(RandomizationSpace, Vec<String>)> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .transpose()
            .map_err(|e| Error::Parse(e.to_string()))?
            .ok_or_else(|| Error::Parse("empty snapshot".into()))?;
        if first.trim() != SNAPSHOT_MAGIC {
            return Err(Error::Parse(format!(
                "not a space snapshot (expected `{SNAPSHOT_MAGIC}`)"
            )));
        }
        let mut cluster_ids: Vec<String> = Vec::new();
        let mut provenance = Provenance::Enumerated;
        let mut metric: Option<BalanceMetric> = None;
        let mut column_names: Vec<String> = Vec::new();
        let mut cutoff: Option<Cutoff> = None;
        let mut realized: Option<f64> = None;
        let mut header_seen = false;
        let mut labels: Vec<u8> = Vec::new();
        let mut scores: Vec<f64> = Vec::new();
        let mut retained: Vec<bool> = Vec::new();
        let mut g = 0usize;
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some((key, value)) = rest.split_once(':') {
                    let value = value.trim();
                    match key.trim() {
                        "clusters" => {
                            cluster_ids = value.split(',').map(|s| s.trim().to_string()).collect();
                        }
                        "provenance" => {
                            provenance = if value == "enumerated" {
                                Provenance::Enumerated
                            } else if let Some(n) = value.strip_prefix("sampled:") {
                                Provenance::Sampled {
                                    n_draws: n.parse().map_err(|_| {
                                        Error::Parse(format!("bad provenance `{value}`"))
                                    })?,
                                }
                            } else {
                                return Err(Error::Parse(format!("bad provenance `{value}`")));
                            };
                        }
                        "metric" => metric = Some(BalanceMetric::parse(value)?),
                        "balance-columns" => {
                            column_names =
                                value.split(',').map(|s| s.trim().to_string()).collect();
                        }
                        "cutoff" => {
                            cutoff = Some(if let Some(q) = value.strip_prefix("quantile:") {
                                Cutoff::Quantile(q.parse().map_err(|_| {
                                    Error::Parse(format!("bad cutoff `{value}`"))
                                })?)
                            } else if let Some(n) = value.strip_prefix("count:") {
                                Cutoff::Count(n.parse().map_err(|_| {
                                    Error::Parse(format!("bad cutoff `{value}`"))
                                })?)
                            } else {
                                return Err(Error::Parse(format!("bad cutoff `{value}`")));
                            });
                        }
                        "realized-cutoff" => {
                            realized = Some(value.parse().map_err(|_| {
                                Error::Parse(format!("bad realized cutoff `{value}`"))
                            })?);
                        }
                        _ => {} // provenance extras (seed, config hash)
                    }
                }
                continue;
            }
            if !header_seen {
                header_seen = true;
                g = line.split(',').count().saturating_sub(2);
                if g == 0 {
                    return Err(Error::Parse("snapshot header has no cluster columns".into()));
                }
                if !cluster_ids.is_empty() && cluster_ids.len() != g {
                    return Err(Error::Parse(format!(
                        "snapshot header has {g} cluster columns but {} cluster ids",
                        cluster_ids.len()
                    )));
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != g + 2 {
                return Err(Error::Parse(format!(
                    "snapshot row {} has {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    g + 2
                )));
            }
            for f in &fields[..g] {
                let arm: usize = f.trim().parse().map_err(|_| {
                    Error::Parse(format!("bad arm label `{f}` on row {}", lineno + 2))
                })?;
                if arm == 0 || arm > u8::MAX as usize {
                    return Err(Error::Parse(format!(
                        "arm labels are 1-based, got `{arm}` on row {}",
                        lineno + 2
                    )));
                }
                labels.push((arm - 1) as u8);
            }
            scores.push(fields[g].trim().parse().map_err(|_| {
                Error::Parse(format!("bad score on row {}", lineno + 2))
            })?);
            retained.push(match fields[g + 1].trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse(format!(
                        "bad retained flag `{other}` on row {}",
                        lineno + 2
                    )))
                }
            });
        }
        if !header_seen {
            return Err(Error::Parse("snapshot missing header row".into()));
        }
        let n_retained = retained.iter().filter(|&&r| r).count();
        let constraint = match (metric, cutoff, realized) {
            (Some(metric), Some(cutoff), Some(realized)) => Some(Constraint {
                metric,
                column_names,
                cutoff,
                realized,
            }),
            _ => None,
        };
        Ok((
            RandomizationSpace {
                n_clusters: g,
                labels,
                scores: Some(scores),
                retained,
                n_retained,
                provenance,
                constraint,
            },
            cluster_ids,
        ))
    }
}
