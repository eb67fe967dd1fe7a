//! Synthetic response matrices from known item parameters, for recovery
//! tests and diagnostic calibration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::ItemParameters;
use crate::response::ResponseMatrix;
use crate::rng::{keyed_standard_normal, keyed_uniform};

/// Ability distribution for simulated respondents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum AbilityDistribution {
    /// Independent standard normal per factor.
    StandardNormal,
    /// Fixed one-factor ability list (length = respondent count).
    Fixed(Vec<f64>),
}

/// Full description of a simulation; the seed is mandatory so there is no
/// ambient randomness anywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub items: Vec<ItemParameters>,
    pub n_respondents: usize,
    pub ability: AbilityDistribution,
    pub seed: u64,
}

// Theta draws use counters far outside the item-index range so cell draws
// and ability draws never collide.
const THETA_COUNTER_BASE: u64 = u64::MAX - 8;

/// Draws one response matrix. Every cell is keyed by
/// (seed, respondent index, item index), so generation is deterministic and
/// independent of evaluation order. Returns the matrix and the true
/// abilities (respondents x factors).
pub fn generate_responses(spec: &SimulationSpec) -> (ResponseMatrix, Vec<Vec<f64>>) {
    let factors = spec.items.iter().map(|p| p.factors()).max().unwrap_or(1);
    assert!(
        spec.items.iter().all(|p| p.factors() == factors),
        "all items must share one factor count"
    );
    if let AbilityDistribution::Fixed(thetas) = &spec.ability {
        assert_eq!(thetas.len(), spec.n_respondents);
        assert_eq!(factors, 1, "fixed ability lists are one-factor");
    }

    let n = spec.n_respondents;
    let j = spec.items.len();
    let thetas: Vec<Vec<f64>> = (0..n)
        .map(|r| match &spec.ability {
            AbilityDistribution::StandardNormal => (0..factors)
                .map(|f| keyed_standard_normal(spec.seed, r as u64, THETA_COUNTER_BASE + f as u64))
                .collect(),
            AbilityDistribution::Fixed(list) => vec![list[r]],
        })
        .collect();

    let rows: Vec<Vec<Option<bool>>> = (0..n)
        .into_par_iter()
        .map(|r| {
            let theta = &thetas[r];
            (0..j)
                .map(|i| {
                    let p = spec.items[i].prob(theta);
                    Some(keyed_uniform(spec.seed, r as u64, i as u64) < p)
                })
                .collect()
        })
        .collect();

    let mut cells = Vec::with_capacity(n * j);
    for row in rows {
        cells.extend(row);
    }
    let respondents = (0..n).map(|r| format!("sim{r:05}")).collect();
    let items = (0..j).map(|i| format!("item{i:03}")).collect();
    (ResponseMatrix::new(respondents, items, cells), thetas)
}

/// Writes the true-ability CSV (`respondent_id,true_theta[,true_theta2]`).
pub fn thetas_to_csv<W: std::io::Write>(
    matrix: &ResponseMatrix,
    thetas: &[Vec<f64>],
    out: W,
) -> crate::error::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let factors = thetas.first().map_or(1, Vec::len);
    let mut header = vec!["respondent_id".to_string(), "true_theta".to_string()];
    if factors == 2 {
        header.push("true_theta2".to_string());
    }
    w.write_record(&header)?;
    for (r, theta) in thetas.iter().enumerate() {
        let mut row = vec![matrix.respondents()[r].clone()];
        row.extend(theta.iter().map(|t| format!("{t}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QuadratureGrid;

    fn spec(items: Vec<ItemParameters>, n: usize, seed: u64) -> SimulationSpec {
        SimulationSpec {
            items,
            n_respondents: n,
            ability: AbilityDistribution::StandardNormal,
            seed,
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let s = spec(vec![ItemParameters::two_pl(1.3, 0.2); 5], 200, 42);
        let (m1, t1) = generate_responses(&s);
        let (m2, t2) = generate_responses(&s);
        assert_eq!(m1, m2);
        assert_eq!(t1, t2);
        let (m3, _) = generate_responses(&SimulationSpec { seed: 43, ..s });
        assert_ne!(m1, m3);
    }

    #[test]
    fn very_easy_item_is_almost_always_correct() {
        let s = spec(vec![ItemParameters::three_pl(3.0, -10.0, 0.0)], 10_000, 1);
        let (m, _) = generate_responses(&s);
        assert!(m.prop_correct(0).unwrap() > 0.999);
    }

    #[test]
    fn flat_item_hits_one_half() {
        let s = spec(vec![ItemParameters::two_pl(0.0, 0.0)], 10_000, 2);
        let (m, _) = generate_responses(&s);
        // binomial standard error at p = 0.5, N = 10000
        let se = 0.5 / (10_000f64).sqrt();
        assert!((m.prop_correct(0).unwrap() - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn proportions_match_quadrature_expectation() {
        let items = vec![
            ItemParameters::two_pl(1.8, -0.7),
            ItemParameters::three_pl(1.1, 0.9, 0.2),
            ItemParameters::two_pl(0.6, 0.1),
        ];
        let s = spec(items.clone(), 20_000, 3);
        let (m, _) = generate_responses(&s);
        let grid = QuadratureGrid::default_for(1);
        for (i, item) in items.iter().enumerate() {
            let expect: f64 = (0..grid.len())
                .map(|k| grid.weight(k) * item.prob1(grid.node1(k)))
                .sum();
            let se = (expect * (1.0 - expect) / 20_000.0).sqrt();
            let got = m.prop_correct(i).unwrap();
            assert!(
                (got - expect).abs() < 3.0 * se,
                "item {i}: got {got}, expected {expect} (se {se})"
            );
        }
    }

    #[test]
    fn residuals_are_uncorrelated_within_theta_bins() {
        let items = vec![
            ItemParameters::two_pl(1.5, 0.0),
            ItemParameters::two_pl(1.5, 0.0),
        ];
        let s = spec(items.clone(), 20_000, 4);
        let (m, thetas) = generate_responses(&s);
        // pooled within-bin residual correlation
        let mut num = 0.0;
        let mut den0 = 0.0;
        let mut den1 = 0.0;
        for r in 0..m.n_respondents() {
            let t = thetas[r][0];
            let r0 = f64::from(m.get(r, 0).unwrap()) - items[0].prob1(t);
            let r1 = f64::from(m.get(r, 1).unwrap()) - items[1].prob1(t);
            num += r0 * r1;
            den0 += r0 * r0;
            den1 += r1 * r1;
        }
        let corr = num / (den0.sqrt() * den1.sqrt());
        assert!(corr.abs() < 0.03, "residual correlation {corr}");
    }

    #[test]
    fn fixed_ability_list_is_used_verbatim() {
        let thetas = vec![-2.0, 0.0, 2.0];
        let s = SimulationSpec {
            items: vec![ItemParameters::two_pl(1.0, 0.0)],
            n_respondents: 3,
            ability: AbilityDistribution::Fixed(thetas.clone()),
            seed: 9,
        };
        let (_, t) = generate_responses(&s);
        assert_eq!(t, vec![vec![-2.0], vec![0.0], vec![2.0]]);
    }
}
