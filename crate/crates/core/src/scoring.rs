//! Ability estimation against a calibrated scale: EAP theta under the
//! standard normal prior, population percentiles, and system-vs-population
//! score reports.

use std::collections::BTreeMap;
use std::io::Read;

use serde::Serialize;
use serde_json::json;

use crate::calibrate::CalibratedScale;
use crate::error::{Error, Result};
use crate::model::QuadratureGrid;
use crate::response::{GoldKey, ResponseMatrix};
use crate::stats::normal_cdf;

/// Ability estimate in population standard-deviation units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AbilityEstimate {
    pub theta: f64,
    pub posterior_sd: f64,
    /// Population percentile, 100 * Phi(theta).
    pub percentile: f64,
    pub n_items_answered: usize,
}

/// Population percentile of an ability value under the standard normal
/// calibration population.
pub fn percentile(theta: f64) -> f64 {
    100.0 * normal_cdf(theta)
}

/// Expected-a-posteriori ability for a graded response pattern on a scale.
///
/// The posterior over the quadrature grid is the standard normal prior times
/// the pattern likelihood over the answered scale items; theta is its mean
/// and `posterior_sd` its standard deviation. Pattern entries for unknown
/// items are ignored; an effectively empty pattern is an error. The pattern
/// is canonicalized by scale item order first, so entry order never matters.
pub fn eap_theta(scale: &CalibratedScale, pattern: &[(String, bool)]) -> Result<AbilityEstimate> {
    // canonical order: scale item index; last response wins per item
    let mut by_item: BTreeMap<usize, bool> = BTreeMap::new();
    for (id, x) in pattern {
        if let Some(idx) = scale.items.iter().position(|it| &it.id == id) {
            by_item.insert(idx, *x);
        }
    }
    if by_item.is_empty() {
        return Err(Error::EmptyPattern);
    }
    let grid = QuadratureGrid::default_for(1);
    let mut log_post: Vec<f64> = (0..grid.len()).map(|k| grid.weight(k).ln()).collect();
    for (&idx, &x) in &by_item {
        let item = &scale.items[idx].params;
        for (k, lp) in log_post.iter_mut().enumerate() {
            let p = item.prob1(grid.node1(k)).clamp(1e-12, 1.0 - 1e-12);
            *lp += if x { p.ln() } else { (1.0 - p).ln() };
        }
    }
    let lm = crate::stats::logsumexp(&log_post);
    let mut theta = 0.0;
    let mut m2 = 0.0;
    for k in 0..grid.len() {
        let w = (log_post[k] - lm).exp();
        let t = grid.node1(k);
        theta += w * t;
        m2 += w * t * t;
    }
    let posterior_sd = (m2 - theta * theta).max(0.0).sqrt();
    Ok(AbilityEstimate {
        theta,
        posterior_sd,
        percentile: percentile(theta),
        n_items_answered: by_item.len(),
    })
}

/// One entry of a system response file: a predicted label to grade against
/// the gold key, or an already graded outcome.
#[derive(Debug, Clone, PartialEq)]
pub enum SystemEntry {
    Label(String),
    Graded(bool),
}

/// A system's responses to (a superset of) the scale items.
#[derive(Debug, Clone)]
pub struct SystemResponses {
    pub system_id: String,
    pub entries: Vec<(String, SystemEntry)>,
}

impl SystemResponses {
    /// Reads `item_id,label` or `item_id,correct` CSV (column name decides).
    pub fn from_csv<R: Read>(source: R, system_id: &str, path_label: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
        let headers = reader.headers()?.clone();
        let graded = match headers.iter().nth(1) {
            Some("label") => false,
            Some("correct") => true,
            other => {
                return Err(Error::Parse {
                    path: path_label.into(),
                    line: 1,
                    message: format!(
                        "second column must be `label` or `correct`, got {other:?}"
                    ),
                })
            }
        };
        let mut entries = Vec::new();
        for (idx, row) in reader.records().enumerate() {
            let row = row?;
            let line = idx + 2;
            if row.len() < 2 {
                return Err(Error::Parse {
                    path: path_label.into(),
                    line,
                    message: "expected two columns".into(),
                });
            }
            let entry = if graded {
                match row[1].trim() {
                    "1" => SystemEntry::Graded(true),
                    "0" => SystemEntry::Graded(false),
                    other => {
                        return Err(Error::Parse {
                            path: path_label.into(),
                            line,
                            message: format!("correct must be 0 or 1, got {other:?}"),
                        })
                    }
                }
            } else {
                SystemEntry::Label(row[1].to_string())
            };
            entries.push((row[0].to_string(), entry));
        }
        Ok(Self {
            system_id: system_id.into(),
            entries,
        })
    }
}

/// Score report for one system on one scale.
#[derive(Debug, Clone, Serialize)]
pub struct SystemScore {
    pub system: String,
    pub scale: String,
    pub theta: f64,
    pub posterior_sd: f64,
    pub percentile: f64,
    /// Plain proportion correct on the same graded items, for the
    /// theta-vs-accuracy contrast.
    pub accuracy: f64,
    pub n_items: usize,
    /// Item ids answered by the system but not part of the scale (removed
    /// during calibration or never calibrated); ignored with a warning.
    pub ignored_items: Vec<String>,
}

impl SystemScore {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "system": self.system,
            "scale": self.scale,
            "theta": self.theta,
            "posterior_sd": self.posterior_sd,
            "percentile": self.percentile,
            "accuracy": self.accuracy,
            "n_items": self.n_items,
            "ignored_items": self.ignored_items,
        })
    }
}

/// Grades a system response file against the scale (via the gold key when
/// labels are supplied), estimates ability, and reports plain accuracy on
/// the same items.
pub fn score_system(
    scale: &CalibratedScale,
    responses: &SystemResponses,
    key: Option<&GoldKey>,
) -> Result<SystemScore> {
    let mut graded: Vec<(String, bool)> = Vec::new();
    let mut ignored = Vec::new();
    for (item_id, entry) in &responses.entries {
        if scale.find_item(item_id).is_none() {
            ignored.push(item_id.clone());
            continue;
        }
        let outcome = match entry {
            SystemEntry::Graded(x) => *x,
            SystemEntry::Label(label) => {
                let key = key.ok_or_else(|| Error::MissingKeyEntry {
                    item: item_id.clone(),
                })?;
                let gold = key.gold(item_id).ok_or_else(|| Error::MissingKeyEntry {
                    item: item_id.clone(),
                })?;
                label == gold
            }
        };
        graded.push((item_id.clone(), outcome));
    }
    if graded.is_empty() {
        return Err(Error::NoOverlap);
    }
    let n_correct = graded.iter().filter(|(_, x)| *x).count();
    let accuracy = n_correct as f64 / graded.len() as f64;
    let estimate = eap_theta(scale, &graded)?;
    Ok(SystemScore {
        system: responses.system_id.clone(),
        scale: scale.name.clone(),
        theta: estimate.theta,
        posterior_sd: estimate.posterior_sd,
        percentile: estimate.percentile,
        accuracy,
        n_items: estimate.n_items_answered,
        ignored_items: ignored,
    })
}

/// One respondent's total-correct vs. ability row.
#[derive(Debug, Clone, Serialize)]
pub struct ThetaTotalRow {
    pub respondent_id: String,
    pub total_correct: usize,
    pub n_answered: usize,
    pub theta: f64,
}

/// Total-correct vs. EAP theta for every respondent of a matrix, on the
/// scale's items. Respondents who answered none of the scale items are
/// skipped.
pub fn theta_vs_total(scale: &CalibratedScale, matrix: &ResponseMatrix) -> Vec<ThetaTotalRow> {
    let scale_cols: Vec<(usize, String)> = scale
        .items
        .iter()
        .filter_map(|it| matrix.item_index(&it.id).map(|idx| (idx, it.id.clone())))
        .collect();
    let mut rows = Vec::new();
    for r in 0..matrix.n_respondents() {
        let pattern: Vec<(String, bool)> = scale_cols
            .iter()
            .filter_map(|(idx, id)| matrix.get(r, *idx).map(|x| (id.clone(), x)))
            .collect();
        if pattern.is_empty() {
            continue;
        }
        let total_correct = pattern.iter().filter(|(_, x)| *x).count();
        let estimate = eap_theta(scale, &pattern).expect("non-empty pattern");
        rows.push(ThetaTotalRow {
            respondent_id: matrix.respondents()[r].clone(),
            total_correct,
            n_answered: pattern.len(),
            theta: estimate.theta,
        });
    }
    rows
}

/// Writes `respondent_id,total_correct,n_answered,theta` CSV.
pub fn theta_total_to_csv<W: std::io::Write>(rows: &[ThetaTotalRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["respondent_id", "total_correct", "n_answered", "theta"])?;
    for row in rows {
        w.write_record([
            row.respondent_id.clone(),
            row.total_correct.to_string(),
            row.n_answered.to_string(),
            format!("{}", row.theta),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::{CalibratedScale, ScaleItem};
    use crate::model::ItemParameters;
    use approx::assert_abs_diff_eq;

    fn scale_of(params: Vec<(&str, ItemParameters)>) -> CalibratedScale {
        CalibratedScale::from_items(
            "test",
            params
                .into_iter()
                .map(|(id, params)| ScaleItem {
                    id: id.into(),
                    params,
                    se: None,
                })
                .collect(),
        )
    }

    fn one_item_scale() -> CalibratedScale {
        scale_of(vec![("i1", ItemParameters::two_pl(1.0, 0.0))])
    }

    #[test]
    fn percentile_anchors() {
        assert_abs_diff_eq!(percentile(0.0), 50.0, epsilon = 1e-10);
        // percentile is strictly increasing
        let mut prev = 0.0;
        for i in 0..100 {
            let p = percentile(-4.0 + 0.08 * i as f64);
            assert!(p > prev);
            prev = p;
        }
    }

    #[test]
    fn percentile_symmetry() {
        for t in [0.0, 0.133, 0.5, 1.0, 2.5, 3.7] {
            assert_abs_diff_eq!(percentile(t) + percentile(-t), 100.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn eap_symmetry_for_centered_item() {
        let scale = one_item_scale();
        let up = eap_theta(&scale, &[("i1".into(), true)]).unwrap();
        let down = eap_theta(&scale, &[("i1".into(), false)]).unwrap();
        assert_abs_diff_eq!(up.theta, -down.theta, epsilon = 1e-9);
        assert!(up.theta > 0.0);
    }

    // Dense-trapezoid posterior-mean oracle (1e6 nodes, frozen):
    // EAP for one correct response to a 2PL item with a=1, b=0.
    #[test]
    fn eap_matches_dense_oracle() {
        let scale = one_item_scale();
        let est = eap_theta(&scale, &[("i1".into(), true)]).unwrap();
        assert_abs_diff_eq!(est.theta, 0.413_241_928_283_814_06, epsilon = 1e-4);
        assert_abs_diff_eq!(est.posterior_sd, 0.910_621_276_222_049_8, epsilon = 1e-3);
    }

    #[test]
    fn empty_and_unknown_patterns_error() {
        let scale = one_item_scale();
        assert!(matches!(eap_theta(&scale, &[]), Err(Error::EmptyPattern)));
        assert!(matches!(
            eap_theta(&scale, &[("elsewhere".into(), true)]),
            Err(Error::EmptyPattern)
        ));
    }

    fn five_item_scale() -> CalibratedScale {
        scale_of(vec![
            ("easy", ItemParameters::two_pl(0.7, -1.0)),
            ("low1", ItemParameters::two_pl(0.8, 0.0)),
            ("low2", ItemParameters::two_pl(0.9, 0.2)),
            ("high1", ItemParameters::two_pl(2.4, 0.0)),
            ("high2", ItemParameters::two_pl(2.6, 0.2)),
        ])
    }

    #[test]
    fn response_order_does_not_matter() {
        let scale = five_item_scale();
        let fwd: Vec<(String, bool)> = vec![
            ("easy".into(), true),
            ("low1".into(), false),
            ("high1".into(), true),
        ];
        let mut rev = fwd.clone();
        rev.reverse();
        let a = eap_theta(&scale, &fwd).unwrap();
        let b = eap_theta(&scale, &rev).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.posterior_sd, b.posterior_sd);
    }

    #[test]
    fn adding_correct_raises_adding_incorrect_lowers() {
        let scale = five_item_scale();
        let base = vec![("low1".to_string(), true), ("high1".to_string(), false)];
        let t0 = eap_theta(&scale, &base).unwrap().theta;
        let mut plus = base.clone();
        plus.push(("low2".into(), true));
        assert!(eap_theta(&scale, &plus).unwrap().theta >= t0);
        let mut minus = base.clone();
        minus.push(("low2".into(), false));
        assert!(eap_theta(&scale, &minus).unwrap().theta <= t0);
    }

    #[test]
    fn posterior_contracts_below_prior() {
        let scale = five_item_scale();
        for pattern in [
            vec![("high1".to_string(), true)],
            vec![("easy".to_string(), false), ("low1".to_string(), true)],
        ] {
            let est = eap_theta(&scale, &pattern).unwrap();
            assert!(est.posterior_sd < 1.0, "sd {}", est.posterior_sd);
            assert!(est.posterior_sd > 0.0);
        }
    }

    fn graded(system: &str, entries: &[(&str, bool)]) -> SystemResponses {
        SystemResponses {
            system_id: system.into(),
            entries: entries
                .iter()
                .map(|(id, x)| (id.to_string(), SystemEntry::Graded(*x)))
                .collect(),
        }
    }

    #[test]
    fn all_correct_dominates_any_single_error() {
        let scale = five_item_scale();
        let ids = ["easy", "low1", "low2", "high1", "high2"];
        let perfect = score_system(
            &scale,
            &graded("perfect", &ids.map(|id| (id, true))),
            None,
        )
        .unwrap();
        for miss in 0..5 {
            let entries: Vec<(&str, bool)> = ids
                .iter()
                .enumerate()
                .map(|(i, id)| (*id, i != miss))
                .collect();
            let one_err = score_system(&scale, &graded("oneerr", &entries), None).unwrap();
            assert!(
                perfect.theta > one_err.theta,
                "perfect {} vs miss {miss}: {}",
                perfect.theta,
                one_err.theta
            );
        }
    }

    // Equal accuracy, different error patterns: slipping on the
    // high-discrimination items costs more ability than slipping on the
    // low-discrimination ones.
    #[test]
    fn equal_accuracy_different_patterns_score_differently() {
        let scale = five_item_scale();
        let miss_high = graded(
            "miss_high",
            &[
                ("easy", true),
                ("low1", true),
                ("low2", true),
                ("high1", false),
                ("high2", false),
            ],
        );
        let miss_low = graded(
            "miss_low",
            &[
                ("easy", true),
                ("low1", false),
                ("low2", false),
                ("high1", true),
                ("high2", true),
            ],
        );
        let sh = score_system(&scale, &miss_high, None).unwrap();
        let sl = score_system(&scale, &miss_low, None).unwrap();
        assert_eq!(sh.accuracy, sl.accuracy);
        assert!(
            sh.theta < sl.theta,
            "high-slope misses should cost more: {} vs {}",
            sh.theta,
            sl.theta
        );
    }

    #[test]
    fn labels_grade_against_key_and_extras_warn() {
        let scale = five_item_scale();
        let key = GoldKey::new([
            ("easy".to_string(), "yes".to_string()),
            ("low1".to_string(), "no".to_string()),
        ]);
        let responses = SystemResponses {
            system_id: "sys".into(),
            entries: vec![
                ("easy".into(), SystemEntry::Label("yes".into())),
                ("low1".into(), SystemEntry::Label("yes".into())),
                ("removed_item".into(), SystemEntry::Label("yes".into())),
            ],
        };
        let score = score_system(&scale, &responses, Some(&key)).unwrap();
        assert_eq!(score.n_items, 2);
        assert_abs_diff_eq!(score.accuracy, 0.5, epsilon = 1e-12);
        assert_eq!(score.ignored_items, vec!["removed_item"]);
    }

    #[test]
    fn no_overlap_is_an_error() {
        let scale = five_item_scale();
        let responses = graded("sys", &[("not_in_scale", true)]);
        assert!(matches!(
            score_system(&scale, &responses, None),
            Err(Error::NoOverlap)
        ));
    }

    #[test]
    fn system_csv_parses_both_forms() {
        let by_label = "item_id,label\ni1,entailment\ni2,neutral\n";
        let parsed = SystemResponses::from_csv(by_label.as_bytes(), "sys", "<mem>").unwrap();
        assert_eq!(parsed.entries.len(), 2);
        assert_eq!(
            parsed.entries[0].1,
            SystemEntry::Label("entailment".into())
        );
        let by_grade = "item_id,correct\ni1,1\ni2,0\n";
        let parsed = SystemResponses::from_csv(by_grade.as_bytes(), "sys", "<mem>").unwrap();
        assert_eq!(parsed.entries[1].1, SystemEntry::Graded(false));
        let bad = "item_id,score\ni1,3\n";
        assert!(SystemResponses::from_csv(bad.as_bytes(), "s", "<mem>").is_err());
    }

    #[test]
    fn theta_vs_total_rows() {
        let scale = five_item_scale();
        let items: Vec<String> = ["easy", "low1", "low2", "high1", "high2"]
            .map(String::from)
            .to_vec();
        // r1 and r2 identical; r3 same total as r4 but different pattern;
        // r5's correct set strictly contains r6's
        let rows: Vec<(&str, Vec<Option<bool>>)> = vec![
            ("r1", vec![Some(true), Some(true), Some(false), Some(false), Some(true)]),
            ("r2", vec![Some(true), Some(true), Some(false), Some(false), Some(true)]),
            ("r3", vec![Some(true), Some(true), Some(true), Some(false), Some(false)]),
            ("r4", vec![Some(true), Some(false), Some(false), Some(true), Some(true)]),
            ("r5", vec![Some(true), Some(true), Some(true), Some(false), None]),
            ("r6", vec![Some(true), Some(true), Some(false), Some(false), None]),
        ];
        let mut cells = Vec::new();
        for (_, row) in &rows {
            cells.extend(row.iter().copied());
        }
        let matrix = ResponseMatrix::new(
            rows.iter().map(|(id, _)| id.to_string()).collect(),
            items,
            cells,
        );
        let table = theta_vs_total(&scale, &matrix);
        assert_eq!(table.len(), 6);
        assert_eq!(table[0].theta, table[1].theta);
        assert_eq!(table[0].total_correct, table[1].total_correct);
        // same total, different theta
        assert_eq!(table[2].total_correct, table[3].total_correct);
        assert!((table[2].theta - table[3].theta).abs() > 1e-6);
        // strict superset of correct answers dominates
        assert!(table[4].theta > table[5].theta);
    }
}
