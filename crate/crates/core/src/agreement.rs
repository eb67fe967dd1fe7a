//! Inter-annotator agreement: plurality/supermajority rates and Fleiss'
//! kappa over an annotation table.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::response::AnnotationRecord;
use crate::rng::keyed_sample_without_replacement;

/// Fraction of items with a strict plurality label and with a two-thirds
/// supermajority label, both in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AgreementStats {
    pub majority_pct: f64,
    pub supermajority_pct: f64,
    pub n_items: usize,
}

/// Per-item label counts in deterministic (item id, label) order.
fn label_counts(records: &[AnnotationRecord]) -> BTreeMap<&str, BTreeMap<&str, usize>> {
    let mut counts: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for rec in records {
        *counts
            .entry(rec.item_id.as_str())
            .or_default()
            .entry(rec.label.as_str())
            .or_insert(0) += 1;
    }
    counts
}

/// Majority here means a strict plurality: one label's count exceeds every
/// other label's count. Supermajority means some label holds at least 2/3 of
/// the item's responses (exact integer arithmetic: 3 * count >= 2 * n).
pub fn agreement_stats(records: &[AnnotationRecord]) -> Result<AgreementStats> {
    let counts = label_counts(records);
    if counts.is_empty() {
        return Err(Error::EmptyTable);
    }
    let mut majority = 0usize;
    let mut supermajority = 0usize;
    for per_label in counts.values() {
        let n: usize = per_label.values().sum();
        let mut sorted: Vec<usize> = per_label.values().copied().collect();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let top = sorted[0];
        let runner_up = sorted.get(1).copied().unwrap_or(0);
        if top > runner_up {
            majority += 1;
        }
        if 3 * top >= 2 * n {
            supermajority += 1;
        }
    }
    let n_items = counts.len();
    Ok(AgreementStats {
        majority_pct: 100.0 * majority as f64 / n_items as f64,
        supermajority_pct: 100.0 * supermajority as f64 / n_items as f64,
        n_items,
    })
}

/// Fleiss' kappa report: overall and per-label binary-collapse values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FleissKappa {
    pub overall: f64,
    pub per_label: BTreeMap<String, f64>,
    /// Common per-item response count the statistic was computed at.
    pub n_per_item: usize,
    pub n_items: usize,
    /// True when items were downsampled to equalize response counts.
    pub downsampled: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FleissConfig {
    /// When per-item response counts differ, downsample every item to the
    /// minimum count with this seed instead of failing.
    pub downsample_seed: Option<u64>,
}

fn kappa_from_counts(table: &[Vec<usize>], n: usize) -> Result<f64> {
    let n_items = table.len();
    let n_labels = table[0].len();
    let nf = n as f64;
    let mut p_bar = 0.0;
    let mut label_totals = vec![0usize; n_labels];
    for row in table {
        let mut same_pairs = 0.0;
        for (j, &c) in row.iter().enumerate() {
            same_pairs += (c * c) as f64;
            label_totals[j] += c;
        }
        p_bar += (same_pairs - nf) / (nf * (nf - 1.0));
    }
    p_bar /= n_items as f64;
    let total = (n_items * n) as f64;
    let pe: f64 = label_totals
        .iter()
        .map(|&t| {
            let p = t as f64 / total;
            p * p
        })
        .sum();
    if p_bar >= 1.0 {
        return Ok(1.0);
    }
    if (1.0 - pe).abs() < 1e-12 {
        return Err(Error::DegenerateAgreement { observed: p_bar });
    }
    Ok((p_bar - pe) / (1.0 - pe))
}

/// Fleiss' kappa over the item x label count table. Requires a common
/// response count per item (n >= 2); with `downsample_seed` set, unbalanced
/// tables are deterministically downsampled to the minimum count first.
/// Per-label kappas are the two-category collapse (label vs. not-label),
/// restricted to `label_subset` when non-empty.
pub fn fleiss_kappa(
    records: &[AnnotationRecord],
    label_subset: &[String],
    config: FleissConfig,
) -> Result<FleissKappa> {
    if records.is_empty() {
        return Err(Error::EmptyTable);
    }

    // deterministic label and item ordering
    let mut labels: Vec<&str> = records.iter().map(|r| r.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    let label_idx: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();

    let mut per_item: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for rec in records {
        per_item
            .entry(rec.item_id.as_str())
            .or_default()
            .push(rec.label.as_str());
    }

    let min_n = per_item.values().map(Vec::len).min().unwrap();
    let max_n = per_item.values().map(Vec::len).max().unwrap();
    let mut downsampled = false;
    if min_n != max_n && config.downsample_seed.is_none() {
        return Err(Error::UnequalResponseCounts { min: min_n, max: max_n });
    }
    if min_n < 2 {
        return Err(Error::UnequalResponseCounts { min: min_n, max: max_n });
    }

    let mut table: Vec<Vec<usize>> = Vec::with_capacity(per_item.len());
    for (lane, item_labels) in per_item.values().enumerate() {
        let chosen: Vec<&str> = if item_labels.len() > min_n {
            downsampled = true;
            let seed = config.downsample_seed.expect("checked above");
            keyed_sample_without_replacement(seed, lane as u64, item_labels.len(), min_n)
                .into_iter()
                .map(|i| item_labels[i])
                .collect()
        } else {
            item_labels.clone()
        };
        let mut row = vec![0usize; labels.len()];
        for l in chosen {
            row[label_idx[l]] += 1;
        }
        table.push(row);
    }

    let overall = kappa_from_counts(&table, min_n)?;

    let mut per_label = BTreeMap::new();
    for (&label, &j) in &label_idx {
        if !label_subset.is_empty() && !label_subset.iter().any(|s| s == label) {
            continue;
        }
        let collapsed: Vec<Vec<usize>> = table
            .iter()
            .map(|row| vec![row[j], min_n - row[j]])
            .collect();
        per_label.insert(label.to_string(), kappa_from_counts(&collapsed, min_n)?);
    }

    Ok(FleissKappa {
        overall,
        per_label,
        n_per_item: min_n,
        n_items: table.len(),
        downsampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rec(r: &str, i: &str, l: &str) -> AnnotationRecord {
        AnnotationRecord {
            respondent_id: r.into(),
            item_id: i.into(),
            label: l.into(),
            is_attention_check: false,
        }
    }

    fn item_with_labels(item: &str, labels: &[&str]) -> Vec<AnnotationRecord> {
        labels
            .iter()
            .enumerate()
            .map(|(k, l)| rec(&format!("r{k}"), item, l))
            .collect()
    }

    #[test]
    fn majority_and_supermajority_at_two_thirds() {
        // {A, A, B}: strict plurality, and 2/3 >= 2/3
        let s = agreement_stats(&item_with_labels("i1", &["A", "A", "B"])).unwrap();
        assert_eq!(s.majority_pct, 100.0);
        assert_eq!(s.supermajority_pct, 100.0);
    }

    #[test]
    fn three_way_tie_has_no_plurality() {
        let s = agreement_stats(&item_with_labels("i1", &["A", "B", "C"])).unwrap();
        assert_eq!(s.majority_pct, 0.0);
        assert_eq!(s.supermajority_pct, 0.0);
    }

    #[test]
    fn three_of_five_is_majority_but_not_supermajority() {
        let s = agreement_stats(&item_with_labels("i1", &["A", "A", "A", "B", "B"])).unwrap();
        assert_eq!(s.majority_pct, 100.0);
        assert_eq!(s.supermajority_pct, 0.0);
    }

    #[test]
    fn agreement_empty_table_errors() {
        assert!(matches!(agreement_stats(&[]), Err(Error::EmptyTable)));
    }

    #[test]
    fn agreement_invariant_under_reordering() {
        let mut records = Vec::new();
        records.extend(item_with_labels("i1", &["A", "A", "B"]));
        records.extend(item_with_labels("i2", &["B", "C", "C"]));
        let forward = agreement_stats(&records).unwrap();
        records.reverse();
        let backward = agreement_stats(&records).unwrap();
        assert_eq!(forward, backward);
    }

    #[test]
    fn unanimous_items_give_kappa_one() {
        let mut records = Vec::new();
        records.extend(item_with_labels("i1", &["A", "A", "A"]));
        records.extend(item_with_labels("i2", &["B", "B", "B"]));
        let k = fleiss_kappa(&records, &[], FleissConfig::default()).unwrap();
        assert_abs_diff_eq!(k.overall, 1.0, epsilon = 1e-12);
    }

    // Hand-computed oracle: items with label-A counts [3, 2, 1, 0] out of 3
    // raters. P_i = [1, 1/3, 1/3, 1], P-bar = 2/3, p = (1/2, 1/2),
    // Pe = 1/2, kappa = (2/3 - 1/2) / (1/2) = 1/3.
    #[test]
    fn hand_computed_table() {
        let mut records = Vec::new();
        records.extend(item_with_labels("i1", &["A", "A", "A"]));
        records.extend(item_with_labels("i2", &["A", "A", "B"]));
        records.extend(item_with_labels("i3", &["A", "B", "B"]));
        records.extend(item_with_labels("i4", &["B", "B", "B"]));
        let k = fleiss_kappa(&records, &[], FleissConfig::default()).unwrap();
        assert_abs_diff_eq!(k.overall, 1.0 / 3.0, epsilon = 1e-12);
        // two labels: each binary collapse is the same table
        assert_abs_diff_eq!(k.per_label["A"], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(k.per_label["B"], 1.0 / 3.0, epsilon = 1e-12);
    }

    // Monte Carlo oracle: labels assigned uniformly at random have kappa ~ 0.
    #[test]
    fn random_labels_have_near_zero_kappa() {
        use crate::rng::keyed_uniform;
        let labels = ["A", "B", "C"];
        let mut records = Vec::new();
        for item in 0..10_000u64 {
            for rater in 0..5u64 {
                let u = keyed_uniform(2024, item, rater);
                let l = labels[(u * 3.0) as usize % 3];
                records.push(rec(&format!("r{rater}"), &format!("i{item:05}"), l));
            }
        }
        let k = fleiss_kappa(&records, &[], FleissConfig::default()).unwrap();
        assert!(k.overall.abs() < 0.02, "kappa {}", k.overall);
    }

    #[test]
    fn relabeling_permutes_per_label_but_keeps_overall() {
        let mut records = Vec::new();
        records.extend(item_with_labels("i1", &["A", "A", "B"]));
        records.extend(item_with_labels("i2", &["B", "A", "B"]));
        records.extend(item_with_labels("i3", &["A", "A", "A"]));
        let k1 = fleiss_kappa(&records, &[], FleissConfig::default()).unwrap();
        let swapped: Vec<AnnotationRecord> = records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.label = if r.label == "A" { "B".into() } else { "A".into() };
                r
            })
            .collect();
        let k2 = fleiss_kappa(&swapped, &[], FleissConfig::default()).unwrap();
        assert_abs_diff_eq!(k1.overall, k2.overall, epsilon = 1e-12);
        assert_abs_diff_eq!(k1.per_label["A"], k2.per_label["B"], epsilon = 1e-12);
    }

    #[test]
    fn unequal_counts_error_without_downsampling() {
        let mut records = item_with_labels("i1", &["A", "A", "B"]);
        records.extend(item_with_labels("i2", &["A", "B"]));
        match fleiss_kappa(&records, &[], FleissConfig::default()) {
            Err(Error::UnequalResponseCounts { min: 2, max: 3 }) => {}
            other => panic!("expected unequal-count error, got {other:?}"),
        }
    }

    #[test]
    fn downsampling_equalizes_counts_deterministically() {
        let mut records = item_with_labels("i1", &["A", "A", "B"]);
        records.extend(item_with_labels("i2", &["A", "B"]));
        let cfg = FleissConfig {
            downsample_seed: Some(3),
        };
        let k1 = fleiss_kappa(&records, &[], cfg).unwrap();
        let k2 = fleiss_kappa(&records, &[], cfg).unwrap();
        assert_eq!(k1, k2);
        assert!(k1.downsampled);
        assert_eq!(k1.n_per_item, 2);
    }

    #[test]
    fn label_subset_restricts_report() {
        let mut records = Vec::new();
        records.extend(item_with_labels("i1", &["A", "B", "C"]));
        records.extend(item_with_labels("i2", &["A", "A", "C"]));
        let k = fleiss_kappa(&records, &["A".to_string()], FleissConfig::default()).unwrap();
        assert_eq!(k.per_label.len(), 1);
        assert!(k.per_label.contains_key("A"));
    }
}
