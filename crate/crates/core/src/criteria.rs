//! Guessing-parameter tests and model comparison across fits.

use serde::Serialize;

use crate::em::FittedModel;
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::stats::normal_quantile;

/// Outcome of the one-sided z test on an item's guessing parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaldDecision {
    pub item_id: String,
    pub keep_three_pl: bool,
    pub z: Option<f64>,
    pub estimate: f64,
    pub se: Option<f64>,
    /// Set when the decision fell back to demotion because the standard
    /// error was unavailable (singular information).
    pub se_undefined: bool,
}

/// Tests whether an item's guessing estimate is significantly above zero
/// (one-sided z test at level `alpha`). Items failing the test, sitting at
/// the boundary, or lacking a usable standard error are demoted to 2PL.
pub fn guessing_wald_test(model: &FittedModel, item: usize, alpha: f64) -> WaldDecision {
    let it = &model.items[item];
    assert_eq!(
        it.params.kind,
        ModelKind::ThreePl,
        "wald test applies to 3PL items"
    );
    let estimate = it.params.guessing;
    let se = it.se.as_ref().and_then(|s| s.guessing);
    match se {
        Some(se) if se > 0.0 && se.is_finite() => {
            let z = estimate / se;
            let critical = normal_quantile(1.0 - alpha);
            WaldDecision {
                item_id: it.id.clone(),
                keep_three_pl: z > critical,
                z: Some(z),
                estimate,
                se: Some(se),
                se_undefined: false,
            }
        }
        _ => WaldDecision {
            item_id: it.id.clone(),
            keep_three_pl: false,
            z: None,
            estimate,
            se: None,
            se_undefined: true,
        },
    }
}

/// One row of the model-comparison report.
#[derive(Debug, Clone, Serialize)]
pub struct ModelRank {
    /// Index into the input fit list.
    pub fit: usize,
    pub factors: usize,
    pub free_parameters: usize,
    pub loglik: f64,
    pub aic: f64,
    pub sabic: f64,
    pub rank: usize,
    pub tied_with_next: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelComparison {
    /// Best first: ordered by SABIC, AIC as tiebreaker.
    pub ranking: Vec<ModelRank>,
    /// Set when AIC and SABIC disagree about the best model.
    pub criteria_disagree: bool,
}

/// Ranks fits of the same data by SABIC (AIC breaking ties) and flags
/// disagreement between the two criteria.
pub fn compare_models(fits: &[&FittedModel]) -> Result<ModelComparison> {
    assert!(!fits.is_empty());
    let first = fits[0];
    for f in &fits[1..] {
        if f.n_respondents != first.n_respondents
            || f.item_ids() != first.item_ids()
            || f.respondent_ids != first.respondent_ids
        {
            return Err(Error::MismatchedData(
                "models must be fit to the same response matrix".into(),
            ));
        }
    }
    let mut order: Vec<usize> = (0..fits.len()).collect();
    order.sort_by(|&a, &b| {
        fits[a]
            .sabic
            .partial_cmp(&fits[b].sabic)
            .unwrap()
            .then(fits[a].aic.partial_cmp(&fits[b].aic).unwrap())
    });
    let best_by_aic = (0..fits.len())
        .min_by(|&a, &b| fits[a].aic.partial_cmp(&fits[b].aic).unwrap())
        .unwrap();
    let criteria_disagree = fits[order[0]].aic > fits[best_by_aic].aic;

    let ranking: Vec<ModelRank> = order
        .iter()
        .enumerate()
        .map(|(pos, &idx)| {
            let tied_with_next = order.get(pos + 1).is_some_and(|&next| {
                (fits[idx].sabic - fits[next].sabic).abs() < 1e-9
                    && (fits[idx].aic - fits[next].aic).abs() < 1e-9
            });
            ModelRank {
                fit: idx,
                factors: fits[idx].factors,
                free_parameters: fits[idx].free_parameters,
                loglik: fits[idx].loglik,
                aic: fits[idx].aic,
                sabic: fits[idx].sabic,
                rank: pos + 1,
                tied_with_next,
            }
        })
        .collect();
    Ok(ModelComparison {
        ranking,
        criteria_disagree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{fit_mml_em, FitConfig};
    use crate::model::ItemParameters;
    use crate::simulate::{generate_responses, AbilityDistribution, SimulationSpec};

    fn sim() -> crate::response::ResponseMatrix {
        let items: Vec<ItemParameters> = (0..12)
            .map(|i| ItemParameters::two_pl(1.0 + 0.1 * i as f64, -1.2 + 0.2 * i as f64))
            .collect();
        generate_responses(&SimulationSpec {
            items,
            n_respondents: 600,
            ability: AbilityDistribution::StandardNormal,
            seed: 55,
        })
        .0
    }

    #[test]
    fn wald_decisions_from_estimate_and_se() {
        let m = sim();
        let mut fit = fit_mml_em(
            &m,
            &FitConfig {
                kind: ModelKind::ThreePl,
                ..FitConfig::default()
            },
        )
        .unwrap();

        // synthetic clear-cut cases on top of the fitted structure
        fit.items[0].params.guessing = 0.30;
        if let Some(se) = fit.items[0].se.as_mut() {
            se.guessing = Some(0.05);
        }
        let keep = guessing_wald_test(&fit, 0, 0.05);
        assert!(keep.keep_three_pl);
        assert!((keep.z.unwrap() - 6.0).abs() < 1e-9);

        fit.items[1].params.guessing = 0.01;
        if let Some(se) = fit.items[1].se.as_mut() {
            se.guessing = Some(0.05);
        }
        let demote = guessing_wald_test(&fit, 1, 0.05);
        assert!(!demote.keep_three_pl);

        fit.items[2].params.guessing = 0.0;
        let boundary = guessing_wald_test(&fit, 2, 0.05);
        assert!(!boundary.keep_three_pl);

        fit.items[3].se = None;
        let undefined = guessing_wald_test(&fit, 3, 0.05);
        assert!(!undefined.keep_three_pl);
        assert!(undefined.se_undefined);
    }

    #[test]
    fn two_pl_ranks_first_on_two_pl_data() {
        let m = sim();
        let two = fit_mml_em(&m, &FitConfig { compute_se: false, ..FitConfig::default() }).unwrap();
        let three = fit_mml_em(
            &m,
            &FitConfig {
                kind: ModelKind::ThreePl,
                compute_se: false,
                ..FitConfig::default()
            },
        )
        .unwrap();
        let cmp = compare_models(&[&three, &two]).unwrap();
        assert_eq!(cmp.ranking[0].fit, 1, "2PL should win on 2PL data");
    }

    #[test]
    fn identical_fits_tie() {
        let m = sim();
        let cfg = FitConfig { compute_se: false, ..FitConfig::default() };
        let a = fit_mml_em(&m, &cfg).unwrap();
        let b = fit_mml_em(&m, &cfg).unwrap();
        let cmp = compare_models(&[&a, &b]).unwrap();
        assert!(cmp.ranking[0].tied_with_next);
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let m1 = sim();
        let items: Vec<ItemParameters> =
            (0..12).map(|i| ItemParameters::two_pl(1.0, -1.0 + 0.2 * i as f64)).collect();
        let (m2, _) = generate_responses(&SimulationSpec {
            items,
            n_respondents: 500,
            ability: AbilityDistribution::StandardNormal,
            seed: 56,
        });
        let cfg = FitConfig { compute_se: false, ..FitConfig::default() };
        let f1 = fit_mml_em(&m1, &cfg).unwrap();
        let f2 = fit_mml_em(&m2, &cfg).unwrap();
        assert!(matches!(
            compare_models(&[&f1, &f2]),
            Err(Error::MismatchedData(_))
        ));
    }
}
