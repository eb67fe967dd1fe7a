//! Iterative scale calibration: fit, diagnose, remove the worst offender,
//! refit, until every retained item passes all diagnostics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::criteria::guessing_wald_test;
use crate::diagnostics::{
    discrimination_check, item_fit, local_dependence, DiscriminationConfig, ItemFitConfig,
    LdConfig,
};
use crate::em::{fit_mml_em, FitConfig, FittedModel};
use crate::error::{Error, Result};
use crate::model::{ItemParameters, ModelKind};
use crate::response::ResponseMatrix;

/// Pipeline configuration; the fit is always one-factor (items entering a
/// calibration run measure a single ability).
#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub scale_name: String,
    /// Start from 3PL and demote items whose guessing parameter is not
    /// significantly above zero. When false, fit plain 2PL.
    pub three_pl_with_demotion: bool,
    pub wald_alpha: f64,
    pub item_fit: ItemFitConfig,
    pub ld: LdConfig,
    pub discrimination: DiscriminationConfig,
    /// Bonferroni-correct the item-fit and LD flag levels by the number of
    /// tests in each family.
    pub bonferroni: bool,
    /// Calibration never shrinks the scale below this many items.
    pub floor: usize,
    /// Minimum item count to start at all.
    pub min_items: usize,
    pub nodes_per_dim: usize,
    pub max_cycles: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            scale_name: "scale".into(),
            three_pl_with_demotion: true,
            wald_alpha: 0.05,
            item_fit: ItemFitConfig::default(),
            ld: LdConfig::default(),
            discrimination: DiscriminationConfig::default(),
            bonferroni: false,
            floor: 5,
            min_items: 10,
            nodes_per_dim: 0,
            max_cycles: 500,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    fn fit_config(&self, kind: ModelKind, item_kinds: Option<Vec<ModelKind>>) -> FitConfig {
        FitConfig {
            factors: 1,
            kind,
            item_kinds,
            nodes_per_dim: self.nodes_per_dim,
            max_cycles: self.max_cycles,
            ..FitConfig::default()
        }
    }

    fn to_json(&self, notes: &[String]) -> serde_json::Value {
        json!({
            "three_pl_with_demotion": self.three_pl_with_demotion,
            "wald_alpha": self.wald_alpha,
            "item_fit_groups": self.item_fit.groups,
            "item_fit_alpha": self.item_fit.alpha,
            "ld_alpha": self.ld.alpha,
            "ld_min_joint": self.ld.min_joint,
            "a_min": self.discrimination.a_min,
            "range_min": self.discrimination.range_min,
            "bonferroni": self.bonferroni,
            "floor": self.floor,
            "min_items": self.min_items,
            "nodes_per_dim": self.nodes_per_dim,
            "max_cycles": self.max_cycles,
            "item_fit_method": crate::diagnostics::ITEM_FIT_METHOD,
            "notes": notes,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    Misfit,
    LocalDependence,
    Flat,
    Manual,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Removal {
    pub id: String,
    pub iter: usize,
    pub reason: RemovalReason,
    pub note: String,
}

/// Simplified per-parameter standard errors for a retained scale item
/// (difficulty SE from the (slope, intercept) covariance by the delta
/// method).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSe {
    pub a: f64,
    pub b: Option<f64>,
    pub c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleItem {
    pub id: String,
    pub params: ItemParameters,
    pub se: Option<ScaleSe>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub min_b: f64,
    pub max_b: f64,
    pub min_a: f64,
    pub max_a: f64,
}

/// Fit metadata of the final (retained-item) model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub loglik: f64,
    pub aic: f64,
    pub sabic: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_respondents: usize,
}

/// The calibrated scale: retained items with final parameters and the full
/// elimination audit log.
#[derive(Debug, Clone)]
pub struct CalibratedScale {
    pub name: String,
    pub items: Vec<ScaleItem>,
    pub removed: Vec<Removal>,
    pub summary: ParameterSummary,
    pub fit_meta: FitMeta,
    pub seed: u64,
    pub notes: Vec<String>,
    config_json: serde_json::Value,
}

impl CalibratedScale {
    /// Test/interop constructor for a scale with known parameters.
    pub fn from_items(name: &str, items: Vec<ScaleItem>) -> Self {
        let summary = summarize(&items);
        Self {
            name: name.into(),
            items,
            removed: vec![],
            summary,
            fit_meta: FitMeta {
                loglik: 0.0,
                aic: 0.0,
                sabic: 0.0,
                iterations: 0,
                converged: true,
                n_respondents: 0,
            },
            seed: 0,
            notes: vec![],
            config_json: json!({}),
        }
    }

    pub fn item_ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }

    pub fn find_item(&self, id: &str) -> Option<&ScaleItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn removed_ids(&self) -> BTreeSet<String> {
        self.removed.iter().map(|r| r.id.clone()).collect()
    }

    /// Serializes the scale:
    /// `{name, items:[{id, model, a, b, c, se}], removed:[{id, iter,
    /// reason, note}], summary:{min_b, max_b, min_a, max_a}, config, seed}`.
    pub fn to_json(&self) -> serde_json::Value {
        let items: Vec<serde_json::Value> = self
            .items
            .iter()
            .map(|it| {
                json!({
                    "id": it.id,
                    "model": match it.params.kind {
                        ModelKind::TwoPl => "2PL",
                        ModelKind::ThreePl => "3PL",
                    },
                    "a": it.params.slopes[0],
                    "b": it.params.difficulty(),
                    "c": it.params.guessing,
                    "se": it.se,
                })
            })
            .collect();
        let mut config = self.config_json.clone();
        if let Some(obj) = config.as_object_mut() {
            obj.insert("fit".into(), serde_json::to_value(&self.fit_meta).unwrap());
        }
        json!({
            "name": self.name,
            "items": items,
            "removed": self.removed,
            "summary": self.summary,
            "config": config,
            "seed": self.seed,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("scale serializes")
    }

    /// Reads a scale back from its JSON form.
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let bad = |msg: &str| Error::DimensionMismatch(format!("scale json: {msg}"));
        let obj = value.as_object().ok_or_else(|| bad("not an object"))?;
        let name = obj
            .get("name")
            .and_then(|v| v.as_str())
            .ok_or_else(|| bad("missing name"))?
            .to_string();
        let mut items = Vec::new();
        for it in obj
            .get("items")
            .and_then(|v| v.as_array())
            .ok_or_else(|| bad("missing items"))?
        {
            let id = it
                .get("id")
                .and_then(|v| v.as_str())
                .ok_or_else(|| bad("item missing id"))?
                .to_string();
            let a = it
                .get("a")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| bad("item missing a"))?;
            let b = it
                .get("b")
                .and_then(|v| v.as_f64())
                .ok_or_else(|| bad("item missing b"))?;
            let c = it.get("c").and_then(|v| v.as_f64()).unwrap_or(0.0);
            let model = it.get("model").and_then(|v| v.as_str()).unwrap_or("2PL");
            let params = match model {
                "3PL" => ItemParameters::three_pl(a, b, c),
                _ => ItemParameters::two_pl(a, b),
            };
            let se = it
                .get("se")
                .filter(|v| !v.is_null())
                .and_then(|v| serde_json::from_value::<ScaleSe>(v.clone()).ok());
            items.push(ScaleItem { id, params, se });
        }
        let removed: Vec<Removal> = obj
            .get("removed")
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()?
            .unwrap_or_default();
        let summary = summarize(&items);
        let seed = obj.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        Ok(Self {
            name,
            items,
            removed,
            summary,
            fit_meta: FitMeta {
                loglik: 0.0,
                aic: 0.0,
                sabic: 0.0,
                iterations: 0,
                converged: true,
                n_respondents: 0,
            },
            seed,
            notes: vec![],
            config_json: obj.get("config").cloned().unwrap_or(json!({})),
        })
    }
}

fn summarize(items: &[ScaleItem]) -> ParameterSummary {
    let mut s = ParameterSummary {
        min_b: f64::INFINITY,
        max_b: f64::NEG_INFINITY,
        min_a: f64::INFINITY,
        max_a: f64::NEG_INFINITY,
    };
    for it in items {
        let a = it.params.slopes[0];
        s.min_a = s.min_a.min(a);
        s.max_a = s.max_a.max(a);
        if let Some(b) = it.params.difficulty() {
            s.min_b = s.min_b.min(b);
            s.max_b = s.max_b.max(b);
        }
    }
    s
}

/// Drops explicitly excluded items before calibration, recording each with
/// reason `manual`. Unknown ids are an error.
pub fn manual_exclusions(
    matrix: &ResponseMatrix,
    exclusions: &[(String, String)],
) -> Result<(ResponseMatrix, Vec<Removal>)> {
    let mut drop = BTreeSet::new();
    let mut log = Vec::new();
    for (id, note) in exclusions {
        if matrix.item_index(id).is_none() {
            return Err(Error::UnknownItem { id: id.clone() });
        }
        if drop.insert(id.clone()) {
            log.push(Removal {
                id: id.clone(),
                iter: 0,
                reason: RemovalReason::Manual,
                note: note.clone(),
            });
        }
    }
    Ok((matrix.drop_items_by_id(&drop), log))
}

/// Fits the working item set: 3PL with per-item Wald demotion to 2PL when
/// configured, falling back to plain 2PL if the 3PL route fails to converge.
fn fit_working_set(
    matrix: &ResponseMatrix,
    config: &CalibrationConfig,
    attempts: &mut Vec<String>,
) -> Result<FittedModel> {
    if config.three_pl_with_demotion {
        let first = fit_mml_em(matrix, &config.fit_config(ModelKind::ThreePl, None))?;
        if first.converged {
            let kinds: Vec<ModelKind> = (0..first.items.len())
                .map(|i| {
                    if guessing_wald_test(&first, i, config.wald_alpha).keep_three_pl {
                        ModelKind::ThreePl
                    } else {
                        ModelKind::TwoPl
                    }
                })
                .collect();
            if kinds.iter().all(|k| *k == ModelKind::ThreePl) {
                return Ok(first);
            }
            let refit = fit_mml_em(
                matrix,
                &config.fit_config(ModelKind::TwoPl, Some(kinds)),
            )?;
            if refit.converged {
                return Ok(refit);
            }
            attempts.push("3PL-with-demotion refit did not converge".into());
        } else {
            attempts.push("3PL fit did not converge".into());
        }
    }
    let plain = fit_mml_em(matrix, &config.fit_config(ModelKind::TwoPl, None))?;
    if plain.converged {
        return Ok(plain);
    }
    attempts.push("2PL fit did not converge".into());
    Err(Error::Uncalibratable {
        attempts: attempts.clone(),
    })
}

struct IterationFlags {
    /// (item index, p-value)
    misfit: Vec<(usize, f64)>,
    /// (index a, index b, statistic, item-fit p of a, item-fit p of b)
    ld: Vec<(usize, usize, f64, f64, f64)>,
    /// (item index, central range, max |slope|)
    flat: Vec<(usize, f64, f64)>,
}

fn run_diagnostics(
    model: &FittedModel,
    matrix: &ResponseMatrix,
    config: &CalibrationConfig,
    notes: &mut Vec<String>,
    iter: usize,
) -> Result<IterationFlags> {
    let j = matrix.n_items();
    let mut fit_alpha = config.item_fit.alpha;
    let mut ld_alpha = config.ld.alpha;
    if config.bonferroni {
        fit_alpha /= j as f64;
        ld_alpha /= (j * (j - 1) / 2) as f64;
    }
    let fit_cfg = ItemFitConfig {
        alpha: fit_alpha,
        ..config.item_fit
    };
    let ld_cfg = LdConfig {
        alpha: ld_alpha,
        ..config.ld
    };

    let mut item_fit_p = vec![f64::NAN; j];
    let mut misfit = Vec::new();
    for i in 0..j {
        match item_fit(model, matrix, i, &fit_cfg) {
            Ok(report) => {
                item_fit_p[i] = report.p_value;
                if report.flagged {
                    misfit.push((i, report.p_value));
                }
            }
            Err(Error::InsufficientBins { usable }) => notes.push(format!(
                "iter {iter}: item fit skipped for {} ({usable} usable groups)",
                matrix.items()[i]
            )),
            Err(e) => return Err(e),
        }
    }

    let mut ld = Vec::new();
    for a in 0..j {
        for b in (a + 1)..j {
            match local_dependence(model, matrix, (a, b), &ld_cfg) {
                Ok(report) if report.flagged => {
                    ld.push((a, b, report.statistic, item_fit_p[a], item_fit_p[b]));
                }
                Ok(_) => {}
                Err(Error::InsufficientJointObservations { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }

    let mut flat = Vec::new();
    for (i, item) in model.items.iter().enumerate() {
        let check = discrimination_check(&item.params, &config.discrimination);
        if check.flat {
            flat.push((i, check.central_range, check.max_abs_slope));
        }
    }
    Ok(IterationFlags { misfit, ld, flat })
}

/// Picks the single item to remove this iteration: worst misfit first, then
/// a member of the strongest locally dependent pair, then the flattest item.
fn select_removal(flags: &IterationFlags, matrix: &ResponseMatrix) -> Option<(usize, RemovalReason, String)> {
    let id = |i: usize| matrix.items()[i].as_str();
    if !flags.misfit.is_empty() {
        let &(idx, p) = flags
            .misfit
            .iter()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(id(a.0).cmp(id(b.0))))
            .unwrap();
        return Some((
            idx,
            RemovalReason::Misfit,
            format!("item-fit p = {p:.3e}"),
        ));
    }
    if !flags.ld.is_empty() {
        let &(a, b, stat, pa, pb) = flags
            .ld
            .iter()
            .max_by(|x, y| x.2.partial_cmp(&y.2).unwrap())
            .unwrap();
        // total LD burden per member across all flagged pairs
        let burden = |i: usize| -> f64 {
            flags
                .ld
                .iter()
                .filter(|&&(x, y, ..)| x == i || y == i)
                .map(|&(.., s, _, _)| s)
                .sum()
        };
        // worse item fit loses; ties by larger LD burden, then smaller id
        let victim = match (pa.is_nan(), pb.is_nan()) {
            (false, false) if pa < pb => a,
            (false, false) if pb < pa => b,
            _ => {
                let (ba, bb) = (burden(a), burden(b));
                if ba > bb {
                    a
                } else if bb > ba {
                    b
                } else if id(a) <= id(b) {
                    a
                } else {
                    b
                }
            }
        };
        let other = if victim == a { b } else { a };
        return Some((
            victim,
            RemovalReason::LocalDependence,
            format!("dependent with {} (X2 = {stat:.2})", id(other)),
        ));
    }
    if !flags.flat.is_empty() {
        let &(idx, range, slope) = flags
            .flat
            .iter()
            .min_by(|x, y| {
                x.1.partial_cmp(&y.1)
                    .unwrap()
                    .then(x.2.partial_cmp(&y.2).unwrap())
                    .then(id(x.0).cmp(id(y.0)))
            })
            .unwrap();
        return Some((
            idx,
            RemovalReason::Flat,
            format!("central range {range:.3}, max |a| {slope:.3}"),
        ));
    }
    None
}

/// Calibrates one single-factor item set. Each iteration fits the working
/// set, runs all three diagnostics, and removes the single worst offender;
/// the loop stops when nothing is flagged or the item floor would be
/// crossed. Removing at least one item per iteration bounds the loop at
/// (items - floor) iterations.
pub fn calibrate(matrix: &ResponseMatrix, config: &CalibrationConfig) -> Result<CalibratedScale> {
    if matrix.n_items() < config.min_items {
        return Err(Error::TooFewItems {
            have: matrix.n_items(),
            need: config.min_items,
        });
    }
    let mut current = matrix.clone();
    let mut removed: Vec<Removal> = Vec::new();
    let mut notes: Vec<String> = Vec::new();
    let mut attempts: Vec<String> = Vec::new();

    let mut iter = 1usize;
    let final_model = loop {
        let model = fit_working_set(&current, config, &mut attempts)?;
        let flags = run_diagnostics(&model, &current, config, &mut notes, iter)?;
        let Some((victim, reason, note)) = select_removal(&flags, &current) else {
            break model;
        };
        if current.n_items() <= config.floor {
            notes.push(format!(
                "iter {iter}: item floor ({}) reached with flags outstanding; stopping",
                config.floor
            ));
            break model;
        }
        let victim_id = current.items()[victim].clone();
        removed.push(Removal {
            id: victim_id.clone(),
            iter,
            reason,
            note,
        });
        let drop: BTreeSet<String> = std::iter::once(victim_id).collect();
        current = current.drop_items_by_id(&drop);
        iter += 1;
    };

    let items: Vec<ScaleItem> = final_model
        .items
        .iter()
        .map(|it| {
            let se = it.se.as_ref().map(|se| {
                // delta method for b = -d/a over the (a, d) block
                let a = it.params.slopes[0];
                let d = it.params.intercept;
                let m = se.slopes.len() + 1 + usize::from(se.guessing.is_some());
                let var_a = se.covariance[0];
                let var_d = se.covariance[m + 1];
                let cov_ad = se.covariance[1];
                let (ga, gd) = (d / (a * a), -1.0 / a);
                let var_b = ga * ga * var_a + gd * gd * var_d + 2.0 * ga * gd * cov_ad;
                ScaleSe {
                    a: se.slopes[0],
                    b: (var_b > 0.0).then(|| var_b.sqrt()),
                    c: se.guessing,
                }
            });
            ScaleItem {
                id: it.id.clone(),
                params: it.params.clone(),
                se,
            }
        })
        .collect();

    let summary = summarize(&items);
    Ok(CalibratedScale {
        name: config.scale_name.clone(),
        items,
        removed,
        summary,
        fit_meta: FitMeta {
            loglik: final_model.loglik,
            aic: final_model.aic,
            sabic: final_model.sabic,
            iterations: final_model.iterations,
            converged: final_model.converged,
            n_respondents: final_model.n_respondents,
        },
        seed: config.seed,
        notes,
        config_json: config.to_json(&[]),
    })
}

/// Replays an elimination log: drops every removed item from the input and
/// refits once with the scale's configuration. The result must match the
/// scale's final parameters (the calibration loop refits from deterministic
/// starting values each iteration, so a single refit of the surviving set
/// reproduces the final model).
pub fn replay(
    scale: &CalibratedScale,
    matrix: &ResponseMatrix,
    config: &CalibrationConfig,
) -> Result<FittedModel> {
    let drop = scale.removed_ids();
    let surviving = matrix.drop_items_by_id(&drop);
    let mut attempts = Vec::new();
    fit_working_set(&surviving, config, &mut attempts)
}

/// Per-scale and aggregate retention line.
#[derive(Debug, Clone, Serialize)]
pub struct RetentionLine {
    pub name: String,
    pub retained: usize,
    pub initial: usize,
    pub pct: f64,
    pub uncalibratable: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetentionSummary {
    pub scales: Vec<RetentionLine>,
    pub total_retained: usize,
    pub total_initial: usize,
    pub total_pct: f64,
}

/// Input to [`retention_summary`]: a finished scale or an uncalibratable
/// factor (zero retained).
#[derive(Debug, Clone)]
pub struct RetentionEntry {
    pub name: String,
    pub retained: usize,
    pub initial: usize,
    pub uncalibratable: bool,
}

impl RetentionEntry {
    pub fn from_scale(scale: &CalibratedScale) -> Self {
        Self {
            name: scale.name.clone(),
            retained: scale.items.len(),
            initial: scale.items.len() + scale.removed.len(),
            uncalibratable: false,
        }
    }

    pub fn uncalibratable(name: &str, initial: usize) -> Self {
        Self {
            name: name.into(),
            retained: 0,
            initial,
            uncalibratable: true,
        }
    }
}

/// Retained/removed counts and percentages, per scale and pooled.
pub fn retention_summary(entries: &[RetentionEntry]) -> RetentionSummary {
    assert!(!entries.is_empty());
    let scales: Vec<RetentionLine> = entries
        .iter()
        .map(|e| RetentionLine {
            name: e.name.clone(),
            retained: e.retained,
            initial: e.initial,
            pct: if e.initial == 0 {
                0.0
            } else {
                100.0 * e.retained as f64 / e.initial as f64
            },
            uncalibratable: e.uncalibratable,
        })
        .collect();
    let total_retained: usize = entries.iter().map(|e| e.retained).sum();
    let total_initial: usize = entries.iter().map(|e| e.initial).sum();
    RetentionSummary {
        scales,
        total_retained,
        total_initial,
        total_pct: if total_initial == 0 {
            0.0
        } else {
            100.0 * total_retained as f64 / total_initial as f64
        },
    }
}
