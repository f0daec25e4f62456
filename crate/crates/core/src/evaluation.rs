//! Membership-inference metrics over score records.
//!
//! Orientation is fixed crate-wide: a lower score is more member-like and the
//! decision rule is "member iff score <= tau".

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::attack::{Membership, Method, ScoreRecord};
use crate::{Error, Result};

/// FPR levels reported by default.
pub const DEFAULT_FPR_LEVELS: [f64; 3] = [0.01, 0.05, 0.1];
/// Percentile of non-member scores used as the decision threshold.
pub const DEFAULT_PERCENTILE: f64 = 15.0;

fn split(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut members = Vec::new();
    let mut nonmembers = Vec::new();
    for r in records {
        if !r.score.is_finite() {
            return Err(Error::NonFinite("score"));
        }
        match r.label {
            Membership::Member => members.push(r.score),
            Membership::Nonmember => nonmembers.push(r.score),
        }
    }
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::SingleClass);
    }
    Ok((members, nonmembers))
}

fn sort_scores(v: &mut [f64]) {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
}

/// Probability that a random member scores strictly below a random
/// non-member, ties counted one half (the normalized Mann-Whitney U).
pub fn auc(records: &[ScoreRecord]) -> Result<f64> {
    let (members, nonmembers) = split(records)?;
    let mut pooled: Vec<(f64, bool)> =
        members.iter().map(|&s| (s, true)).chain(nonmembers.iter().map(|&s| (s, false))).collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));

    // Count pairs (member, nonmember) with member < nonmember; ties weigh 1/2.
    let mut wins = 0.0f64;
    let mut nonmembers_below = 0usize;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        let (mut m_tie, mut n_tie) = (0usize, 0usize);
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            if pooled[j].1 {
                m_tie += 1;
            } else {
                n_tie += 1;
            }
            j += 1;
        }
        let nonmembers_above = nonmembers.len() - nonmembers_below - n_tie;
        wins += m_tie as f64 * nonmembers_above as f64 + 0.5 * m_tie as f64 * n_tie as f64;
        nonmembers_below += n_tie;
        i = j;
    }
    Ok(wins / (members.len() as f64 * nonmembers.len() as f64))
}

/// Best TPR among empirical thresholds whose FPR does not exceed `fpr_target`.
pub fn tpr_at_fpr(records: &[ScoreRecord], fpr_target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(Error::InvalidConfig("fpr_target must lie in [0, 1]".into()));
    }
    let (mut members, mut nonmembers) = split(records)?;
    sort_scores(&mut members);
    sort_scores(&mut nonmembers);
    let (n_m, n_n) = (members.len() as f64, nonmembers.len() as f64);

    // Thresholds below every score give TPR = FPR = 0; otherwise only
    // observed scores are candidates.
    let mut best = 0.0f64;
    let (mut mi, mut ni) = (0usize, 0usize);
    let mut candidates: Vec<f64> = members.iter().chain(nonmembers.iter()).copied().collect();
    sort_scores(&mut candidates);
    candidates.dedup();
    for tau in candidates {
        while mi < members.len() && members[mi] <= tau {
            mi += 1;
        }
        while ni < nonmembers.len() && nonmembers[ni] <= tau {
            ni += 1;
        }
        if ni as f64 / n_n <= fpr_target {
            best = best.max(mi as f64 / n_m);
        }
    }
    Ok(best)
}

/// Nearest-rank percentile: the smallest score with at least `k`% of the
/// scores at or below it.
pub fn percentile_threshold(scores: &[f64], k: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("non-member scores"));
    }
    if !(0.0..=100.0).contains(&k) {
        return Err(Error::InvalidConfig("percentile must lie in [0, 100]".into()));
    }
    let mut sorted = scores.to_vec();
    sort_scores(&mut sorted);
    let rank = libm::ceil(k / 100.0 * sorted.len() as f64) as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// The membership decision: member iff `score <= tau`.
pub fn classify(score: f64, tau: f64) -> Membership {
    if score <= tau {
        Membership::Member
    } else {
        Membership::Nonmember
    }
}

/// Fraction of records whose decision at `tau` matches their label.
pub fn asr(records: &[ScoreRecord], tau: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("records"));
    }
    let correct = records.iter().filter(|r| classify(r.score, tau) == r.label).count();
    Ok(correct as f64 / records.len() as f64)
}

/// Highest ASR over every empirical threshold, including "nobody is a member".
pub fn optimal_asr(records: &[ScoreRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("records"));
    }
    let mut taus: Vec<f64> = records.iter().map(|r| r.score).collect();
    sort_scores(&mut taus);
    taus.dedup();
    let below_all = taus[0] - 1.0;
    let mut best = asr(records, below_all)?;
    for tau in taus {
        best = best.max(asr(records, tau)?);
    }
    Ok(best)
}

/// Per-class counts in equal-width bins spanning all scores.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Histogram {
    /// `bins + 1` edges; bin `i` is `[edges[i], edges[i+1])`, the last bin closed.
    pub edges: Vec<f64>,
    pub member_counts: Vec<usize>,
    pub nonmember_counts: Vec<usize>,
}

pub fn export_distribution(records: &[ScoreRecord], bins: usize) -> Result<Histogram> {
    if records.is_empty() {
        return Err(Error::Empty("records"));
    }
    if bins == 0 {
        return Err(Error::InvalidConfig("bins must be positive".into()));
    }
    let lo = records.iter().map(|r| r.score).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite("score"));
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut member_counts = vec![0; bins];
    let mut nonmember_counts = vec![0; bins];
    for r in records {
        let idx = if width > 0.0 { (((r.score - lo) / width) as usize).min(bins - 1) } else { 0 };
        match r.label {
            Membership::Member => member_counts[idx] += 1,
            Membership::Nonmember => nonmember_counts[idx] += 1,
        }
    }
    Ok(Histogram { edges, member_counts, nonmember_counts })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TprAtFpr {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassCounts {
    pub members: usize,
    pub nonmembers: usize,
}

/// Metrics for one attack method.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub method: Method,
    pub auc: f64,
    pub tpr_at_fpr: Vec<TprAtFpr>,
    pub percentile_k: f64,
    pub threshold_tau: f64,
    pub asr: f64,
    pub counts: ClassCounts,
    pub config_digest: String,
}

/// Evaluates the records of a single method. The threshold is the `k`-th
/// percentile of the non-member scores.
pub fn evaluate(
    records: &[ScoreRecord],
    fpr_levels: &[f64],
    percentile_k: f64,
    config_digest: &str,
) -> Result<EvalReport> {
    let method = records.first().ok_or(Error::Empty("records"))?.method;
    if records.iter().any(|r| r.method != method) {
        return Err(Error::InvalidConfig("records mix attack methods".into()));
    }
    let (members, nonmembers) = split(records)?;
    let tau = percentile_threshold(&nonmembers, percentile_k)?;
    let tpr_at_fpr = fpr_levels
        .iter()
        .map(|&fpr| Ok(TprAtFpr { fpr, tpr: tpr_at_fpr(records, fpr)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        method,
        auc: auc(records)?,
        tpr_at_fpr,
        percentile_k,
        threshold_tau: tau,
        asr: asr(records, tau)?,
        counts: ClassCounts { members: members.len(), nonmembers: nonmembers.len() },
        config_digest: config_digest.into(),
    })
}

/// Mean scores of generation from random versus semantic noise, per class,
/// with `delta = inversion - random`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DeltaStats {
    pub member_random: f64,
    pub member_inversion: f64,
    pub member_delta: f64,
    pub nonmember_random: f64,
    pub nonmember_inversion: f64,
    pub nonmember_delta: f64,
}

fn class_mean(records: &[ScoreRecord], method: Method, label: Membership) -> Result<f64> {
    let (sum, n) = records
        .iter()
        .filter(|r| r.method == method && r.label == label)
        .fold((0.0, 0usize), |(s, n), r| (s + r.score, n + 1));
    if n == 0 {
        return Err(Error::SingleClass);
    }
    Ok(sum / n as f64)
}

/// Needs records of both the naive and the inversion method.
pub fn delta_stats(records: &[ScoreRecord]) -> Result<DeltaStats> {
    let mr = class_mean(records, Method::Naive, Membership::Member)?;
    let mi = class_mean(records, Method::Inversion, Membership::Member)?;
    let nr = class_mean(records, Method::Naive, Membership::Nonmember)?;
    let ni = class_mean(records, Method::Inversion, Membership::Nonmember)?;
    Ok(DeltaStats {
        member_random: mr,
        member_inversion: mi,
        member_delta: mi - mr,
        nonmember_random: nr,
        nonmember_inversion: ni,
        nonmember_delta: ni - nr,
    })
}
