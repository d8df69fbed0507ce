//! Classification and clinical-utility metrics.
//!
//! AUROC is computed as the Mann–Whitney statistic (ties count half), with
//! confidence intervals and paired significance tests from the DeLong
//! structural components. The operating threshold follows the
//! class-balance rule: exactly as many predicted positives as gold
//! positives, up to ties. Event-level evaluation merges consecutive
//! above-threshold clips into detected events and scores them against true
//! onsets under a delay tolerance, normalizing false positives per 24
//! recorded hours.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::data::{AgeGroup, CLIP_LEN_S};
use crate::scalar::norm_cdf64;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric undefined: need at least one positive and one negative")]
    SingleClass,
    #[error("empty input")]
    Empty,
    #[error("paired test requires identical clip sets: {0}")]
    MismatchedClips(String),
    #[error("bad parameter: {0}")]
    BadParam(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One evaluated clip: model score, gold label, and subgroup tags.
#[derive(Debug, Clone)]
pub struct ScoredClip {
    pub recording_id: String,
    pub clip_index: usize,
    pub score: f64,
    pub gold: bool,
    pub age_group: AgeGroup,
    pub icu: bool,
    pub seizure_type: Option<String>,
    /// Note-derived attribute bits for the FPR-by-attribute report.
    pub attributes: Vec<bool>,
}

/// AUROC over (score, label) pairs by the rank method:
/// `P(score_pos > score_neg) + 0.5 P(tie)`.
pub fn auroc(pairs: &[(f64, bool)]) -> Result<f64, MetricsError> {
    let n_pos = pairs.iter().filter(|(_, y)| *y).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].0.partial_cmp(&pairs[b].0).unwrap());
    // average ranks over tie groups (1-based ranks)
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pairs[order[j + 1]].0 == pairs[order[i]].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if pairs[idx].1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn auroc_of(clips: &[ScoredClip]) -> Result<f64, MetricsError> {
    auroc(&clips.iter().map(|c| (c.score, c.gold)).collect::<Vec<_>>())
}

/// DeLong structural components: per-positive and per-negative placement
/// values, whose means equal the AUROC.
fn placements(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let psi = |x: f64, y: f64| -> f64 {
        if x > y {
            1.0
        } else if x == y {
            0.5
        } else {
            0.0
        }
    };
    let v10: Vec<f64> = pos
        .iter()
        .map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64)
        .collect();
    let v01: Vec<f64> = neg
        .iter()
        .map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64)
        .collect();
    let a = v10.iter().sum::<f64>() / v10.len() as f64;
    (v10, v01, a)
}

fn sample_var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (a.len() - 1) as f64
}

/// Standard normal quantile by bisection on the CDF; exact to ~1e-12.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1)");
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm_cdf64(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy)]
pub struct DeLongCi {
    pub auroc: f64,
    pub half_width: f64,
    pub variance: f64,
    pub lo: f64,
    pub hi: f64,
}

/// AUROC with a DeLong confidence interval, clipped to [0, 1].
pub fn delong_ci(clips: &[ScoredClip], level: f64) -> Result<DeLongCi, MetricsError> {
    if !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(MetricsError::BadParam(format!("confidence level {level}")));
    }
    let pos: Vec<f64> = clips.iter().filter(|c| c.gold).map(|c| c.score).collect();
    let neg: Vec<f64> = clips.iter().filter(|c| !c.gold).map(|c| c.score).collect();
    if pos.len() < 2 || neg.len() < 2 {
        return Err(MetricsError::SingleClass);
    }
    let (v10, v01, a) = placements(&pos, &neg);
    let variance = sample_var(&v10) / pos.len() as f64 + sample_var(&v01) / neg.len() as f64;
    let z = normal_quantile(0.5 + level / 2.0);
    let half_width = z * variance.max(0.0).sqrt();
    Ok(DeLongCi {
        auroc: a,
        half_width,
        variance,
        lo: (a - half_width).max(0.0),
        hi: (a + half_width).min(1.0),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DeLongPaired {
    pub auroc_a: f64,
    pub auroc_b: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided paired DeLong test for two score sets over the same clips.
pub fn delong_paired_test(
    a: &[ScoredClip],
    b: &[ScoredClip],
) -> Result<DeLongPaired, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::MismatchedClips(format!(
            "{} vs {} clips",
            a.len(),
            b.len()
        )));
    }
    for (ca, cb) in a.iter().zip(b) {
        if ca.recording_id != cb.recording_id
            || ca.clip_index != cb.clip_index
            || ca.gold != cb.gold
        {
            return Err(MetricsError::MismatchedClips(format!(
                "clip {}:{} differs between score sets",
                ca.recording_id, ca.clip_index
            )));
        }
    }
    let pos_a: Vec<f64> = a.iter().filter(|c| c.gold).map(|c| c.score).collect();
    let neg_a: Vec<f64> = a.iter().filter(|c| !c.gold).map(|c| c.score).collect();
    let pos_b: Vec<f64> = b.iter().filter(|c| c.gold).map(|c| c.score).collect();
    let neg_b: Vec<f64> = b.iter().filter(|c| !c.gold).map(|c| c.score).collect();
    if pos_a.len() < 2 || neg_a.len() < 2 {
        return Err(MetricsError::SingleClass);
    }
    let (v10a, v01a, aa) = placements(&pos_a, &neg_a);
    let (v10b, v01b, ab) = placements(&pos_b, &neg_b);
    let m = pos_a.len() as f64;
    let n = neg_a.len() as f64;
    let var = sample_var(&v10a) / m + sample_var(&v01a) / n + sample_var(&v10b) / m
        + sample_var(&v01b) / n
        - 2.0 * (sample_cov(&v10a, &v10b) / m + sample_cov(&v01a, &v01b) / n);
    let diff = aa - ab;
    let (z, p_value) = if var <= 0.0 {
        if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY * diff.signum(), 0.0)
        }
    } else {
        let z = diff / var.sqrt();
        (z, (2.0 * (1.0 - norm_cdf64(z.abs()))).clamp(0.0, 1.0))
    };
    Ok(DeLongPaired {
        auroc_a: aa,
        auroc_b: ab,
        z,
        p_value,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ClassBalanceThreshold {
    pub threshold: f64,
    pub n_gold_positive: usize,
    pub n_predicted_positive: usize,
    /// Ties at the threshold pushed predicted positives above the gold count.
    pub tie_inflated: bool,
}

/// Threshold such that the predicted positive count (`score >= threshold`)
/// matches the gold positive count; ties may inflate the predicted count.
pub fn class_balance_threshold(clips: &[ScoredClip]) -> Result<ClassBalanceThreshold, MetricsError> {
    if clips.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n_pos = clips.iter().filter(|c| c.gold).count();
    if n_pos == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut scores: Vec<f64> = clips.iter().map(|c| c.score).collect();
    scores.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let threshold = scores[n_pos - 1];
    let n_predicted = scores.iter().filter(|&&s| s >= threshold).count();
    Ok(ClassBalanceThreshold {
        threshold,
        n_gold_positive: n_pos,
        n_predicted_positive: n_predicted,
        tie_inflated: n_predicted > n_pos,
    })
}

/// Named subgroup selector over scored clips.
pub struct Stratum {
    pub name: String,
    /// Positives restricted to the stratum; `true` keeps the clip.
    pub keep_positive: Box<dyn Fn(&ScoredClip) -> bool>,
    /// Negative pool; patient strata restrict both sides, seizure-type
    /// strata keep every negative of the parent population.
    pub keep_negative: Box<dyn Fn(&ScoredClip) -> bool>,
}

/// The report strata: overall, patient subgroups, and one stratum per gold
/// seizure type found in the data (positives of that type vs all parent
/// negatives).
pub fn default_strata(clips: &[ScoredClip]) -> Vec<Stratum> {
    let both = |f: fn(&ScoredClip) -> bool| -> Stratum {
        Stratum {
            name: String::new(),
            keep_positive: Box::new(f),
            keep_negative: Box::new(f),
        }
    };
    let mut strata = Vec::new();
    let mut named = |name: &str, f: fn(&ScoredClip) -> bool| {
        let mut s = both(f);
        s.name = name.to_string();
        strata.push(s);
    };
    named("overall", |_| true);
    named("adults", |c| c.age_group == AgeGroup::Adult);
    named("adults outside icu", |c| {
        c.age_group == AgeGroup::Adult && !c.icu
    });
    named("adults from icu", |c| c.age_group == AgeGroup::Adult && c.icu);
    named("pediatrics", |c| c.age_group == AgeGroup::Pediatric);

    let mut types: Vec<String> = clips
        .iter()
        .filter(|c| c.gold)
        .filter_map(|c| c.seizure_type.clone())
        .collect();
    types.sort();
    types.dedup();
    for t in types {
        let t2 = t.clone();
        strata.push(Stratum {
            name: format!("seizure type: {t}"),
            keep_positive: Box::new(move |c: &ScoredClip| {
                c.seizure_type.as_deref() == Some(t2.as_str())
            }),
            keep_negative: Box::new(|_| true),
        });
    }
    strata
}

#[derive(Debug, Clone)]
pub enum StratumResult {
    Computed { ci: DeLongCi },
    Flagged { reason: String },
}

#[derive(Debug, Clone)]
pub struct StratumReport {
    pub name: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub result: StratumResult,
}

/// Per-stratum AUROC with DeLong confidence intervals. Strata with fewer
/// than `min_positives` positives (or a single class) are flagged, not
/// silently reported.
pub fn subgroup_report(
    clips: &[ScoredClip],
    strata: &[Stratum],
    level: f64,
    min_positives: usize,
) -> Vec<StratumReport> {
    strata
        .iter()
        .map(|s| {
            let selected: Vec<ScoredClip> = clips
                .iter()
                .filter(|c| {
                    if c.gold {
                        (s.keep_positive)(c)
                    } else {
                        (s.keep_negative)(c)
                    }
                })
                .cloned()
                .collect();
            let n_pos = selected.iter().filter(|c| c.gold).count();
            let n_neg = selected.len() - n_pos;
            let result = if n_pos < min_positives.max(2) || n_neg < 2 {
                StratumResult::Flagged {
                    reason: format!(
                        "not computable: {n_pos} positives / {n_neg} negatives below minimum"
                    ),
                }
            } else {
                match delong_ci(&selected, level) {
                    Ok(ci) => StratumResult::Computed { ci },
                    Err(e) => StratumResult::Flagged {
                        reason: e.to_string(),
                    },
                }
            };
            StratumReport {
                name: s.name.clone(),
                n_pos,
                n_neg,
                result,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct AttributeFpr {
    pub attribute: String,
    pub n_negative: usize,
    pub false_positives: usize,
    /// `None` when no gold-negative clip bears the attribute.
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FprReport {
    pub overall_fpr: f64,
    pub overall_n_negative: usize,
    pub per_attribute: Vec<AttributeFpr>,
}

/// False-positive rates over gold-negative clips at a fixed threshold,
/// overall and restricted to clips bearing each attribute.
pub fn attribute_fpr(
    clips: &[ScoredClip],
    threshold: f64,
    attribute_names: &[String],
) -> Result<FprReport, MetricsError> {
    let negatives: Vec<&ScoredClip> = clips.iter().filter(|c| !c.gold).collect();
    if negatives.is_empty() {
        return Err(MetricsError::SingleClass);
    }
    let overall_fp = negatives.iter().filter(|c| c.score >= threshold).count();
    let per_attribute = attribute_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let bearing: Vec<&&ScoredClip> = negatives
                .iter()
                .filter(|c| c.attributes.get(i).copied().unwrap_or(false))
                .collect();
            let fp = bearing.iter().filter(|c| c.score >= threshold).count();
            AttributeFpr {
                attribute: name.clone(),
                n_negative: bearing.len(),
                false_positives: fp,
                fpr: (!bearing.is_empty()).then(|| fp as f64 / bearing.len() as f64),
            }
        })
        .collect();
    Ok(FprReport {
        overall_fpr: overall_fp as f64 / negatives.len() as f64,
        overall_n_negative: negatives.len(),
        per_attribute,
    })
}

/// A detected event: a maximal run of consecutive above-threshold clips.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectedEvent {
    pub onset_s: f64,
    pub n_clips: usize,
}

/// Merge consecutive above-threshold clips (scores indexed by clip) into
/// events; the onset is the start time of the run's first clip.
pub fn extract_events(scores: &[f64], threshold: f64) -> Vec<DetectedEvent> {
    let mut events = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s >= threshold {
            run_start.get_or_insert(i);
        } else if let Some(start) = run_start.take() {
            events.push(DetectedEvent {
                onset_s: start as f64 * CLIP_LEN_S,
                n_clips: i - start,
            });
        }
    }
    if let Some(start) = run_start {
        events.push(DetectedEvent {
            onset_s: start as f64 * CLIP_LEN_S,
            n_clips: scores.len() - start,
        });
    }
    events
}

/// Per-clip scores of one recording in temporal order.
#[derive(Debug, Clone)]
pub struct RecordingScores {
    pub recording_id: String,
    pub scores: Vec<f64>,
}

/// One expert-annotated seizure onset.
#[derive(Debug, Clone)]
pub struct TrueOnset {
    pub recording_id: String,
    pub onset_s: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct UtilityParams {
    /// Event-level recall the threshold must reach.
    pub recall_target: f64,
    /// Delay tolerance in seconds: a detection with `0 <= T < delta_t`
    /// of a true onset is a true positive.
    pub delta_t_s: f64,
}

#[derive(Debug, Clone)]
pub struct UtilityResult {
    pub params: UtilityParams,
    pub threshold: f64,
    pub achieved_event_recall: f64,
    pub clip_recall: f64,
    pub fps_per_24h: f64,
    pub total_false_positives: usize,
    pub matched_onsets: usize,
    pub n_onsets: usize,
    /// Detections earlier than their nearest onset (negative delay); they
    /// count as false positives and are tallied separately.
    pub early_detections: usize,
    pub total_hours: f64,
    /// Set when no threshold reaches the recall target.
    pub target_unreachable: bool,
}

struct MatchOutcome {
    matched: usize,
    false_positives: usize,
    early: usize,
}

/// Greedy nearest-first one-to-one matching: candidate (event, onset) pairs
/// with `0 <= T < delta_t` are accepted in order of increasing delay; every
/// unmatched event is a false positive.
fn match_events(
    events: &[DetectedEvent],
    onsets: &[f64],
    delta_t_s: f64,
) -> MatchOutcome {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (ei, e) in events.iter().enumerate() {
        for (oi, &o) in onsets.iter().enumerate() {
            let t = e.onset_s - o;
            if (0.0..delta_t_s).contains(&t) {
                pairs.push((t, ei, oi));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut event_used = vec![false; events.len()];
    let mut onset_used = vec![false; onsets.len()];
    let mut matched = 0;
    for (_, ei, oi) in pairs {
        if !event_used[ei] && !onset_used[oi] {
            event_used[ei] = true;
            onset_used[oi] = true;
            matched += 1;
        }
    }
    let early = events
        .iter()
        .enumerate()
        .filter(|(ei, e)| {
            !event_used[*ei] && onsets.iter().any(|&o| e.onset_s < o)
        })
        .count();
    MatchOutcome {
        matched,
        false_positives: event_used.iter().filter(|&&u| !u).count(),
        early,
    }
}

fn evaluate_at_threshold(
    recordings: &[RecordingScores],
    onsets_by_rec: &BTreeMap<&str, Vec<f64>>,
    threshold: f64,
    delta_t_s: f64,
) -> (usize, usize, usize, usize) {
    let mut matched = 0;
    let mut fps = 0;
    let mut early = 0;
    let mut n_onsets = 0;
    for rec in recordings {
        let events = extract_events(&rec.scores, threshold);
        let empty = Vec::new();
        let onsets = onsets_by_rec
            .get(rec.recording_id.as_str())
            .unwrap_or(&empty);
        n_onsets += onsets.len();
        let outcome = match_events(&events, onsets, delta_t_s);
        matched += outcome.matched;
        fps += outcome.false_positives;
        early += outcome.early;
    }
    (matched, fps, early, n_onsets)
}

/// Clinical-utility metric: pick the largest threshold whose event-level
/// recall meets the target, then report false positives per 24 recorded
/// hours at that threshold.
pub fn clinical_utility(
    recordings: &[RecordingScores],
    onsets: &[TrueOnset],
    params: UtilityParams,
) -> Result<UtilityResult, MetricsError> {
    if recordings.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(0.0..=1.0).contains(&params.recall_target) || params.recall_target == 0.0 {
        return Err(MetricsError::BadParam(format!(
            "recall target {}",
            params.recall_target
        )));
    }
    if params.delta_t_s <= 0.0 {
        return Err(MetricsError::BadParam(format!(
            "delay tolerance {}",
            params.delta_t_s
        )));
    }
    let mut onsets_by_rec: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for o in onsets {
        onsets_by_rec
            .entry(o.recording_id.as_str())
            .or_default()
            .push(o.onset_s);
    }
    let total_hours: f64 = recordings
        .iter()
        .map(|r| r.scores.len() as f64 * CLIP_LEN_S / 3600.0)
        .sum();
    let n_onsets_total = onsets.len();

    let mut candidates: Vec<f64> = recordings
        .iter()
        .flat_map(|r| r.scores.iter().copied())
        .collect();
    candidates.sort_by(|a, b| b.partial_cmp(a).unwrap());
    candidates.dedup();

    let mut chosen: Option<f64> = None;
    if n_onsets_total > 0 {
        for &t in &candidates {
            let (matched, _, _, _) =
                evaluate_at_threshold(recordings, &onsets_by_rec, t, params.delta_t_s);
            if matched as f64 / n_onsets_total as f64 >= params.recall_target {
                chosen = Some(t);
                break;
            }
        }
    }
    let target_unreachable = chosen.is_none();
    let threshold = chosen
        .or_else(|| candidates.last().copied())
        .ok_or(MetricsError::Empty)?;
    let (matched, fps, early, _) =
        evaluate_at_threshold(recordings, &onsets_by_rec, threshold, params.delta_t_s);

    // Clip-level recall for transparency: gold-positive clips are those
    // containing a true onset.
    let mut clip_hits = 0usize;
    let mut clip_total = 0usize;
    for rec in recordings {
        if let Some(onsets) = onsets_by_rec.get(rec.recording_id.as_str()) {
            for &o in onsets {
                let idx = (o / CLIP_LEN_S).floor() as usize;
                if idx < rec.scores.len() {
                    clip_total += 1;
                    if rec.scores[idx] >= threshold {
                        clip_hits += 1;
                    }
                }
            }
        }
    }
    Ok(UtilityResult {
        params,
        threshold,
        achieved_event_recall: if n_onsets_total == 0 {
            f64::NAN
        } else {
            matched as f64 / n_onsets_total as f64
        },
        clip_recall: if clip_total == 0 {
            f64::NAN
        } else {
            clip_hits as f64 / clip_total as f64
        },
        fps_per_24h: fps as f64 / (total_hours / 24.0),
        total_false_positives: fps,
        matched_onsets: matched,
        n_onsets: n_onsets_total,
        early_detections: early,
        total_hours,
        target_unreachable,
    })
}

/// ROC curve points (FPR, TPR), threshold descending, for plotting.
pub fn roc_points(clips: &[ScoredClip]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let n_pos = clips.iter().filter(|c| c.gold).count();
    let n_neg = clips.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut sorted: Vec<&ScoredClip> = clips.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].score == sorted[i].score {
            j += 1;
        }
        for c in &sorted[i..=j] {
            if c.gold {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j + 1;
    }
    Ok(points)
}

/// Write scored clips as CSV with provenance comment lines.
pub fn write_scores_csv(
    path: &Path,
    clips: &[ScoredClip],
    attribute_names: &[String],
    provenance: &BTreeMap<String, String>,
) -> Result<(), MetricsError> {
    let ioe = |e: std::io::Error| MetricsError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut out = String::new();
    out.push_str("# onsetkit-scores v1\n");
    out.push_str(&format!("# attributes={}\n", attribute_names.join(";")));
    for (k, v) in provenance {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out.push_str("recording_id,clip_index,score,gold,age_group,icu,seizure_type,attrs\n");
    for c in clips {
        let attrs: String = c
            .attributes
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect();
        out.push_str(&format!(
            "{},{},{:.10},{},{},{},{},{}\n",
            c.recording_id,
            c.clip_index,
            c.score,
            c.gold as u8,
            c.age_group.as_str(),
            c.icu as u8,
            c.seizure_type.as_deref().unwrap_or(""),
            attrs
        ));
    }
    std::fs::write(path, out).map_err(ioe)
}

/// Read a scores CSV written by [`write_scores_csv`]; returns the clips and
/// the attribute vocabulary.
pub fn read_scores_csv(path: &Path) -> Result<(Vec<ScoredClip>, Vec<String>), MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|e| MetricsError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut attribute_names = Vec::new();
    let mut clips = Vec::new();
    let mut saw_header = false;
    for line in text.lines() {
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.trim().split_once('=') {
                if k == "attributes" {
                    attribute_names = v
                        .split(';')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.to_string())
                        .collect();
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            saw_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(MetricsError::BadParam(format!(
                "scores row has {} fields, expected 8",
                f.len()
            )));
        }
        clips.push(ScoredClip {
            recording_id: f[0].to_string(),
            clip_index: f[1]
                .parse()
                .map_err(|_| MetricsError::BadParam(format!("clip index '{}'", f[1])))?,
            score: f[2]
                .parse()
                .map_err(|_| MetricsError::BadParam(format!("score '{}'", f[2])))?,
            gold: f[3] == "1",
            age_group: AgeGroup::parse(f[4]).map_err(|e| MetricsError::BadParam(e.to_string()))?,
            icu: f[5] == "1",
            seizure_type: (!f[6].is_empty()).then(|| f[6].to_string()),
            attributes: f[7].chars().map(|c| c == '1').collect(),
        });
    }
    Ok((clips, attribute_names))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip(score: f64, gold: bool) -> ScoredClip {
        ScoredClip {
            recording_id: "r".into(),
            clip_index: 0,
            score,
            gold,
            age_group: AgeGroup::Adult,
            icu: false,
            seizure_type: None,
            attributes: vec![],
        }
    }

    #[test]
    fn auroc_separated_and_ties() {
        let pairs = vec![(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        assert_eq!(auroc(&pairs).unwrap(), 1.0);
        let tied = vec![(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        assert_eq!(auroc(&tied).unwrap(), 0.5);
        assert!(matches!(
            auroc(&[(0.1, true)]),
            Err(MetricsError::SingleClass)
        ));
    }

    #[test]
    fn auroc_equals_pairwise_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 50;
            let pairs: Vec<(f64, bool)> = (0..n)
                .map(|_| {
                    // coarse grid to force ties
                    let s = (rng.random::<f64>() * 10.0).round() / 10.0;
                    (s, rng.random::<f64>() < 0.4)
                })
                .collect();
            let n_pos = pairs.iter().filter(|(_, y)| *y).count();
            if n_pos == 0 || n_pos == n {
                continue;
            }
            let mut acc = 0.0;
            for (x, yx) in &pairs {
                if !yx {
                    continue;
                }
                for (y, yy) in &pairs {
                    if *yy {
                        continue;
                    }
                    acc += if x > y {
                        1.0
                    } else if x == y {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
            let brute = acc / (n_pos * (n - n_pos)) as f64;
            assert_eq!(auroc(&pairs).unwrap(), brute);
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<(f64, bool)> = (0..60)
            .map(|_| (rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() < 0.5))
            .collect();
        let transformed: Vec<(f64, bool)> = pairs
            .iter()
            .map(|&(s, y)| ((3.0 * s + 1.0).tanh() * 7.0 + s.exp() * 0.0 + (3.0 * s + 1.0), y))
            .collect();
        assert!((auroc(&pairs).unwrap() - auroc(&transformed).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn normal_quantile_matches_known_z() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
        assert!((normal_quantile(0.5)).abs() < 1e-12);
    }

    #[test]
    fn delong_duplication_halves_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let clips: Vec<ScoredClip> = (0..80)
            .map(|i| clip(rng.random::<f64>() + if i < 20 { 0.4 } else { 0.0 }, i < 20))
            .collect();
        let base = delong_ci(&clips, 0.95).unwrap();
        let mut doubled = clips.clone();
        doubled.extend(clips.iter().cloned());
        let dup = delong_ci(&doubled, 0.95).unwrap();
        assert!((dup.auroc - base.auroc).abs() < 1e-12);
        let ratio = dup.variance / base.variance;
        assert!(
            (ratio - 0.5).abs() < 0.15 * 0.5 + 0.02,
            "variance ratio {ratio}"
        );
    }

    #[test]
    fn delong_perfect_separation_degenerate_ci() {
        let mut clips = Vec::new();
        for i in 0..5 {
            clips.push(clip(0.9 + i as f64 * 0.01, true));
            clips.push(clip(0.1 + i as f64 * 0.01, false));
        }
        let ci = delong_ci(&clips, 0.95).unwrap();
        assert_eq!(ci.auroc, 1.0);
        assert_eq!(ci.variance, 0.0);
        assert_eq!((ci.lo, ci.hi), (1.0, 1.0));
    }

    #[test]
    fn delong_coverage_on_binormal_scores() {
        // smaller version of the acceptance-test simulation
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mu = 1.0f64;
        let true_auc = norm_cdf64(mu / std::f64::consts::SQRT_2);
        let mut covered = 0;
        let trials = 300;
        for _ in 0..trials {
            let mut clips = Vec::new();
            for _ in 0..40 {
                let x: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut rng,
                );
                clips.push(clip(x + mu, true));
            }
            for _ in 0..160 {
                let x: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut rng,
                );
                clips.push(clip(x, false));
            }
            let ci = delong_ci(&clips, 0.95).unwrap();
            if ci.lo <= true_auc && true_auc <= ci.hi {
                covered += 1;
            }
        }
        let coverage = covered as f64 / trials as f64;
        assert!((0.90..=0.99).contains(&coverage), "coverage {coverage}");
    }

    #[test]
    fn paired_test_identity_and_opposites() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let clips: Vec<ScoredClip> = (0..40)
            .map(|i| {
                let mut c = clip(rng.random::<f64>(), i % 4 == 0);
                c.clip_index = i;
                c
            })
            .collect();
        let same = delong_paired_test(&clips, &clips).unwrap();
        assert_eq!(same.p_value, 1.0);

        // A ranks perfectly, B anti-perfectly
        let a: Vec<ScoredClip> = (0..40)
            .map(|i| {
                let gold = i < 10;
                let mut c = clip(if gold { 0.9 } else { 0.1 }, gold);
                c.clip_index = i;
                c.score += i as f64 * 1e-4;
                c
            })
            .collect();
        let b: Vec<ScoredClip> = a
            .iter()
            .map(|c| {
                let mut c2 = c.clone();
                c2.score = 1.0 - c.score;
                c2
            })
            .collect();
        let res = delong_paired_test(&a, &b).unwrap();
        assert!(res.p_value < 0.001, "p {}", res.p_value);

        let mut shuffled = clips.clone();
        shuffled[0].clip_index = 999;
        assert!(delong_paired_test(&clips, &shuffled).is_err());
    }

    #[test]
    fn paired_test_agrees_with_permutation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 30;
        let golds: Vec<bool> = (0..n).map(|i| i < 9).collect();
        let a: Vec<f64> = golds
            .iter()
            .map(|&g| rng.random::<f64>() + if g { 0.35 } else { 0.0 })
            .collect();
        let b: Vec<f64> = golds
            .iter()
            .map(|&g| rng.random::<f64>() + if g { 0.15 } else { 0.0 })
            .collect();
        let mk = |scores: &[f64]| -> Vec<ScoredClip> {
            scores
                .iter()
                .zip(&golds)
                .enumerate()
                .map(|(i, (&s, &g))| {
                    let mut c = clip(s, g);
                    c.clip_index = i;
                    c
                })
                .collect()
        };
        let test = delong_paired_test(&mk(&a), &mk(&b)).unwrap();

        // permutation oracle: swap the two models' scores per clip
        let observed = (test.auroc_a - test.auroc_b).abs();
        let pairs = |x: &[f64]| -> Vec<(f64, bool)> {
            x.iter().zip(&golds).map(|(&s, &g)| (s, g)).collect()
        };
        let mut extreme = 0usize;
        let perms = 20_000;
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        for _ in 0..perms {
            for i in 0..n {
                if rng.random::<bool>() {
                    std::mem::swap(&mut a2[i], &mut b2[i]);
                }
            }
            let d = (auroc(&pairs(&a2)).unwrap() - auroc(&pairs(&b2)).unwrap()).abs();
            if d >= observed - 1e-15 {
                extreme += 1;
            }
            a2.copy_from_slice(&a);
            b2.copy_from_slice(&b);
        }
        let p_perm = extreme as f64 / perms as f64;
        assert!(
            (test.p_value - p_perm).abs() <= 0.03,
            "delong {} vs permutation {p_perm}",
            test.p_value
        );
    }

    #[test]
    fn class_balance_threshold_examples() {
        let clips = vec![
            clip(0.9, true),
            clip(0.7, false),
            clip(0.3, false),
            clip(0.1, false),
        ];
        let t = class_balance_threshold(&clips).unwrap();
        assert_eq!(t.threshold, 0.9);
        assert_eq!(t.n_predicted_positive, 1);
        assert!(!t.tie_inflated);

        let tied = vec![clip(0.5, true), clip(0.5, true), clip(0.5, false)];
        let t = class_balance_threshold(&tied).unwrap();
        assert_eq!(t.n_predicted_positive, 3);
        assert!(t.tie_inflated);

        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut clips: Vec<ScoredClip> = (0..1000)
            .map(|i| clip(rng.random::<f64>(), i < 100))
            .collect();
        // all distinct scores with probability 1
        let t = class_balance_threshold(&clips).unwrap();
        assert_eq!(t.n_predicted_positive, 100);
        clips.truncate(0);
        assert!(class_balance_threshold(&clips).is_err());
    }

    #[test]
    fn subgroup_full_set_equals_overall() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let clips: Vec<ScoredClip> = (0..100)
            .map(|i| {
                let mut c = clip(rng.random::<f64>() + if i < 30 { 0.3 } else { 0.0 }, i < 30);
                c.age_group = if i % 3 == 0 {
                    AgeGroup::Pediatric
                } else {
                    AgeGroup::Adult
                };
                c
            })
            .collect();
        let strata = default_strata(&clips);
        let report = subgroup_report(&clips, &strata, 0.95, 2);
        let overall = &report[0];
        match &overall.result {
            StratumResult::Computed { ci } => {
                assert!((ci.auroc - auroc_of(&clips).unwrap()).abs() < 1e-12);
            }
            _ => panic!("overall must compute"),
        }
        // a stratum that selects nothing is flagged but still renders
        let empty = Stratum {
            name: "empty".into(),
            keep_positive: Box::new(|_| false),
            keep_negative: Box::new(|_| false),
        };
        let r = subgroup_report(&clips, &[empty], 0.95, 2);
        assert!(matches!(r[0].result, StratumResult::Flagged { .. }));
    }

    #[test]
    fn attribute_fpr_extremes_and_hand_count() {
        let mk = |score: f64, gold: bool, attrs: Vec<bool>| {
            let mut c = clip(score, gold);
            c.attributes = attrs;
            c
        };
        let names = vec!["spike".to_string(), "movement".to_string()];
        let clips = vec![
            mk(0.9, true, vec![false, false]),
            mk(0.8, false, vec![true, false]),
            mk(0.7, false, vec![true, true]),
            mk(0.2, false, vec![false, true]),
            mk(0.1, false, vec![false, false]),
        ];
        // threshold above all -> all FPRs 0
        let r = attribute_fpr(&clips, 2.0, &names).unwrap();
        assert_eq!(r.overall_fpr, 0.0);
        assert!(r.per_attribute.iter().all(|a| a.fpr == Some(0.0)));
        // threshold below all -> all FPRs 1
        let r = attribute_fpr(&clips, 0.0, &names).unwrap();
        assert_eq!(r.overall_fpr, 1.0);
        assert!(r.per_attribute.iter().all(|a| a.fpr == Some(1.0)));
        // hand-counted: thr 0.5 -> negatives >= 0.5 are 0.8, 0.7
        let r = attribute_fpr(&clips, 0.5, &names).unwrap();
        assert!((r.overall_fpr - 0.5).abs() < 1e-12);
        assert_eq!(r.per_attribute[0].fpr, Some(1.0)); // spike-bearing: 0.8,0.7
        assert_eq!(r.per_attribute[1].fpr, Some(0.5)); // movement: 0.7,0.2
    }

    #[test]
    fn extract_events_runs() {
        let ev = extract_events(&[0.0, 0.0, 1.0, 1.0, 0.0, 1.0], 0.5);
        assert_eq!(
            ev,
            vec![
                DetectedEvent {
                    onset_s: 120.0,
                    n_clips: 2
                },
                DetectedEvent {
                    onset_s: 300.0,
                    n_clips: 1
                }
            ]
        );
        assert!(extract_events(&[0.1, 0.2], 0.5).is_empty());
        assert_eq!(extract_events(&[0.9], 0.5).len(), 1);
    }

    #[test]
    fn utility_tp_fp_rules_and_normalization() {
        // onset at 300 s; event onset at 330 s counts with delta 60 but a
        // 420 s event does not.
        let onsets = vec![TrueOnset {
            recording_id: "r".into(),
            onset_s: 300.0,
        }];
        let near = match_events(
            &[DetectedEvent {
                onset_s: 330.0,
                n_clips: 1,
            }],
            &[300.0],
            60.0,
        );
        assert_eq!((near.matched, near.false_positives), (1, 0));
        let far = match_events(
            &[DetectedEvent {
                onset_s: 420.0,
                n_clips: 1,
            }],
            &[300.0],
            60.0,
        );
        assert_eq!((far.matched, far.false_positives), (0, 1));

        // 12 recorded hours with 2 false positives -> 4 per 24 hours
        let mut scores = vec![0.0; 720]; // 720 clips = 12 h
        scores[5] = 1.0; // clip 5 = onset 300 s -> TP
        scores[100] = 1.0;
        scores[400] = 1.0;
        let recs = vec![RecordingScores {
            recording_id: "r".into(),
            scores,
        }];
        let res = clinical_utility(
            &recs,
            &onsets,
            UtilityParams {
                recall_target: 0.9,
                delta_t_s: 60.0,
            },
        )
        .unwrap();
        assert_eq!(res.total_false_positives, 2);
        assert!((res.fps_per_24h - 4.0).abs() < 1e-12);
        assert_eq!(res.matched_onsets, 1);
        assert!((res.achieved_event_recall - 1.0).abs() < 1e-12);
    }

    #[test]
    fn utility_monotone_in_delta_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..5 {
            let scores: Vec<f64> = (0..240).map(|_| rng.random::<f64>()).collect();
            let recs = vec![RecordingScores {
                recording_id: "r".into(),
                scores,
            }];
            let onsets: Vec<TrueOnset> = (0..4)
                .map(|_| TrueOnset {
                    recording_id: "r".into(),
                    onset_s: rng.random::<f64>() * 200.0 * 60.0,
                })
                .collect();
            let mut prev = f64::INFINITY;
            for dt in [60.0, 300.0, 900.0] {
                let res = clinical_utility(
                    &recs,
                    &onsets,
                    UtilityParams {
                        recall_target: 0.5,
                        delta_t_s: dt,
                    },
                )
                .unwrap();
                assert!(
                    res.fps_per_24h <= prev + 1e-12,
                    "dt={dt}: {} > {prev}",
                    res.fps_per_24h
                );
                prev = res.fps_per_24h;
            }
        }
    }

    #[test]
    fn utility_monotone_in_recall_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let scores: Vec<f64> = (0..480).map(|_| rng.random::<f64>()).collect();
        let recs = vec![RecordingScores {
            recording_id: "r".into(),
            scores,
        }];
        let onsets: Vec<TrueOnset> = (0..6)
            .map(|i| TrueOnset {
                recording_id: "r".into(),
                onset_s: (i * 70) as f64 * 60.0,
            })
            .collect();
        let mut prev = -1.0;
        for target in [0.5, 0.8, 0.9] {
            let res = clinical_utility(
                &recs,
                &onsets,
                UtilityParams {
                    recall_target: target,
                    delta_t_s: 60.0,
                },
            )
            .unwrap();
            assert!(
                res.fps_per_24h >= prev - 1e-12,
                "target={target}: {} < {prev}",
                res.fps_per_24h
            );
            prev = res.fps_per_24h;
        }
    }

    #[test]
    fn utility_without_onsets_reports_fp_rate() {
        let recs = vec![RecordingScores {
            recording_id: "r".into(),
            scores: vec![0.9, 0.0, 0.9, 0.0],
        }];
        let res = clinical_utility(
            &recs,
            &[],
            UtilityParams {
                recall_target: 0.8,
                delta_t_s: 60.0,
            },
        )
        .unwrap();
        assert!(res.achieved_event_recall.is_nan());
        assert!(res.target_unreachable);
        assert!(res.total_false_positives > 0);
    }

    #[test]
    fn scores_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let clips = vec![
            ScoredClip {
                recording_id: "rec0".into(),
                clip_index: 4,
                score: 0.123456,
                gold: true,
                age_group: AgeGroup::Pediatric,
                icu: true,
                seizure_type: Some("fast-chirp".into()),
                attributes: vec![true, false, true],
            },
            ScoredClip {
                recording_id: "rec1".into(),
                clip_index: 0,
                score: 0.9,
                gold: false,
                age_group: AgeGroup::Adult,
                icu: false,
                seizure_type: None,
                attributes: vec![false, false, false],
            },
        ];
        let names = vec!["seizure".into(), "spike".into(), "movement".into()];
        write_scores_csv(&path, &clips, &names, &BTreeMap::new()).unwrap();
        let (back, names_back) = read_scores_csv(&path).unwrap();
        assert_eq!(names_back, names);
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].recording_id, "rec0");
        assert_eq!(back[0].seizure_type.as_deref(), Some("fast-chirp"));
        assert!((back[0].score - 0.123456).abs() < 1e-9);
        assert_eq!(back[0].attributes, vec![true, false, true]);
    }
}
