//! Tetrachoric correlation: the latent bivariate-normal correlation implied
//! by a 2x2 table of dichotomous outcomes.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::response::ResponseMatrix;
use crate::stats::{bvn_cdf, normal_quantile};

/// Correlations are clipped to this magnitude to keep downstream
/// eigen-decompositions finite.
pub const RHO_CLIP: f64 = 0.999;

/// 2x2 joint counts for a pair of dichotomous items.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCounts {
    /// Both correct.
    pub n11: f64,
    /// First correct, second incorrect.
    pub n10: f64,
    /// First incorrect, second correct.
    pub n01: f64,
    /// Both incorrect.
    pub n00: f64,
}

impl PairCounts {
    pub fn new(n11: f64, n10: f64, n01: f64, n00: f64) -> Self {
        Self { n11, n10, n01, n00 }
    }

    pub fn total(&self) -> f64 {
        self.n11 + self.n10 + self.n01 + self.n00
    }

    fn has_zero_cell(&self) -> bool {
        self.n11 == 0.0 || self.n10 == 0.0 || self.n01 == 0.0 || self.n00 == 0.0
    }

    fn has_zero_margin(&self) -> bool {
        self.n11 + self.n10 == 0.0
            || self.n01 + self.n00 == 0.0
            || self.n11 + self.n01 == 0.0
            || self.n10 + self.n00 == 0.0
    }

    /// Adds 0.5 to every cell (continuity correction for empty cells).
    fn corrected(&self) -> Self {
        Self {
            n11: self.n11 + 0.5,
            n10: self.n10 + 0.5,
            n01: self.n01 + 0.5,
            n00: self.n00 + 0.5,
        }
    }
}

/// Estimates the tetrachoric correlation of a 2x2 table.
///
/// Thresholds are fixed at the normal quantiles of the observed margins;
/// with those fixed, the likelihood is maximized exactly where the
/// model-implied both-correct probability equals the observed one, so the
/// estimate is found by root-finding that monotone equation to |drho| < 1e-6.
/// Tables with an empty cell get a 0.5 continuity correction first; tables
/// with an empty margin are rejected. The result is clipped to +-0.999.
pub fn tetrachoric(counts: &PairCounts) -> Result<f64> {
    if counts.total() <= 0.0 || counts.has_zero_margin() {
        return Err(Error::DegenerateMargin);
    }
    let t = if counts.has_zero_cell() {
        counts.corrected()
    } else {
        *counts
    };
    let n = t.total();
    let p1 = (t.n11 + t.n10) / n; // P(first correct)
    let p2 = (t.n11 + t.n01) / n; // P(second correct)
    let target = t.n11 / n;

    // thresholds: item is correct iff latent > tau
    let tau1 = normal_quantile(1.0 - p1);
    let tau2 = normal_quantile(1.0 - p2);

    // P(X > tau1, Y > tau2 | rho), increasing in rho
    let joint = |rho: f64| bvn_cdf(-tau1, -tau2, rho);

    let mut lo = -RHO_CLIP;
    let mut hi = RHO_CLIP;
    if joint(lo) >= target {
        return Ok(-RHO_CLIP);
    }
    if joint(hi) <= target {
        return Ok(RHO_CLIP);
    }
    // bisection: bracket width 2e-3 * 2^-k, well under 1e-6 by 45 steps
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if joint(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Pairwise tetrachoric correlation matrix with per-pair sample sizes and
/// undefined-entry flags.
#[derive(Debug, Clone, Serialize)]
pub struct TetrachoricMatrix {
    pub items: Vec<String>,
    /// Row-major J x J; unit diagonal; NaN where undefined.
    pub rho: Vec<f64>,
    /// Pairwise-complete sample size per entry.
    pub pair_n: Vec<usize>,
    /// True where the correlation is undefined (degenerate margin).
    pub undefined: Vec<bool>,
}

impl TetrachoricMatrix {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rho[i * self.items.len() + j]
    }

    pub fn is_undefined(&self, i: usize, j: usize) -> bool {
        self.undefined[i * self.items.len() + j]
    }

    /// Items appearing in at least one undefined pair, in matrix order.
    pub fn undefined_items(&self) -> Vec<String> {
        let j = self.items.len();
        (0..j)
            .filter(|&i| (0..j).any(|k| k != i && self.undefined[i * j + k]))
            .map(|i| self.items[i].clone())
            .collect()
    }

    pub fn has_undefined(&self) -> bool {
        self.undefined.iter().any(|&u| u)
    }

    /// Square CSV with an item-id header row and column; undefined entries
    /// are left empty.
    pub fn to_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::new()];
        header.extend(self.items.iter().cloned());
        w.write_record(&header)?;
        let j = self.items.len();
        for i in 0..j {
            let mut row = vec![self.items[i].clone()];
            for k in 0..j {
                let v = self.rho[i * j + k];
                row.push(if v.is_nan() {
                    String::new()
                } else {
                    format!("{v:.6}")
                });
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Joint 2x2 counts for two matrix columns over pairwise-complete rows.
pub fn pair_counts(matrix: &ResponseMatrix, i: usize, j: usize) -> (PairCounts, usize) {
    let mut c = PairCounts::new(0.0, 0.0, 0.0, 0.0);
    let mut n = 0usize;
    for r in 0..matrix.n_respondents() {
        if let (Some(x), Some(y)) = (matrix.get(r, i), matrix.get(r, j)) {
            n += 1;
            match (x, y) {
                (true, true) => c.n11 += 1.0,
                (true, false) => c.n10 += 1.0,
                (false, true) => c.n01 += 1.0,
                (false, false) => c.n00 += 1.0,
            }
        }
    }
    (c, n)
}

/// Pairwise tetrachoric matrix over all item pairs, using pairwise-complete
/// responses. Estimation is parallel over pairs; results are assembled in a
/// fixed pair order so output does not depend on thread count. Degenerate
/// pairs are flagged undefined rather than failing the whole matrix.
pub fn tetrachoric_matrix(matrix: &ResponseMatrix) -> Result<TetrachoricMatrix> {
    let j = matrix.n_items();
    if j < 2 {
        return Err(Error::TooFewItems { have: j, need: 2 });
    }
    let pairs: Vec<(usize, usize)> = (0..j)
        .flat_map(|a| ((a + 1)..j).map(move |b| (a, b)))
        .collect();
    let estimates: Vec<(usize, usize, Option<f64>, usize)> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (counts, n) = pair_counts(matrix, a, b);
            let rho = tetrachoric(&counts).ok();
            (a, b, rho, n)
        })
        .collect();

    let mut rho = vec![f64::NAN; j * j];
    let mut pair_n = vec![0usize; j * j];
    let mut undefined = vec![false; j * j];
    for i in 0..j {
        rho[i * j + i] = 1.0;
        pair_n[i * j + i] = matrix.n_observed(i);
    }
    for (a, b, est, n) in estimates {
        let (v, und) = match est {
            Some(v) => (v, false),
            None => (f64::NAN, true),
        };
        rho[a * j + b] = v;
        rho[b * j + a] = v;
        pair_n[a * j + b] = n;
        pair_n[b * j + a] = n;
        undefined[a * j + b] = und;
        undefined[b * j + a] = und;
    }
    Ok(TetrachoricMatrix {
        items: matrix.items().to_vec(),
        rho,
        pair_n,
        undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ItemParameters;
    use crate::simulate::{generate_responses, AbilityDistribution, SimulationSpec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_agreement_clips_near_one() {
        let rho = tetrachoric(&PairCounts::new(50.0, 0.0, 0.0, 50.0)).unwrap();
        assert_eq!(rho, RHO_CLIP);
    }

    #[test]
    fn independence_gives_zero() {
        let rho = tetrachoric(&PairCounts::new(25.0, 25.0, 25.0, 25.0)).unwrap();
        assert_abs_diff_eq!(rho, 0.0, epsilon = 1e-6);
    }

    // With all margins at 1/2 the estimate has the closed form
    // rho = sin(2 pi (n11/n - 1/4)); for [[40,10],[10,40]] that is
    // sin(0.3 pi) = 0.809017, confirmed by a grid search over rho
    // (bivariate-normal CDF integration, step 1e-4).
    #[test]
    fn balanced_table_matches_grid_oracle() {
        let rho = tetrachoric(&PairCounts::new(40.0, 10.0, 10.0, 40.0)).unwrap();
        assert_abs_diff_eq!(rho, 0.809_016_994_374_947_5, epsilon = 1e-3);
        // tighter: the root-finder itself should be well inside 1e-4
        assert_abs_diff_eq!(rho, 0.809_016_994_374_947_5, epsilon = 1e-4);
    }

    #[test]
    fn zero_margin_is_degenerate() {
        // second item answered correctly by everyone
        let r = tetrachoric(&PairCounts::new(30.0, 0.0, 70.0, 0.0));
        assert!(matches!(r, Err(Error::DegenerateMargin)));
    }

    #[test]
    fn joint_relabeling_preserves_rho_single_negates() {
        let t = PairCounts::new(42.0, 17.0, 9.0, 61.0);
        let base = tetrachoric(&t).unwrap();
        let both = tetrachoric(&PairCounts::new(t.n00, t.n01, t.n10, t.n11)).unwrap();
        assert_abs_diff_eq!(both, base, epsilon = 1e-6);
        // relabel only the first item: swap rows
        let one = tetrachoric(&PairCounts::new(t.n01, t.n00, t.n11, t.n10)).unwrap();
        assert_abs_diff_eq!(one, -base, epsilon = 1e-6);
    }

    #[test]
    fn identical_columns_clip_near_one() {
        let spec = SimulationSpec {
            items: vec![ItemParameters::two_pl(1.5, 0.0); 1],
            n_respondents: 400,
            ability: AbilityDistribution::StandardNormal,
            seed: 5,
        };
        let (m, _) = generate_responses(&spec);
        // duplicate the single column
        let mut cells = Vec::new();
        for r in 0..m.n_respondents() {
            cells.push(m.get(r, 0));
            cells.push(m.get(r, 0));
        }
        let dup = ResponseMatrix::new(
            m.respondents().to_vec(),
            vec!["a".into(), "b".into()],
            cells,
        );
        let tm = tetrachoric_matrix(&dup).unwrap();
        assert!(tm.get(0, 1) > 0.99);
    }

    // Simulation oracle: independent items have tetrachoric ~ 0.
    #[test]
    fn independent_simulated_columns_near_zero() {
        let spec = SimulationSpec {
            items: vec![
                ItemParameters::two_pl(0.0, 0.0),
                ItemParameters::two_pl(0.0, 0.0),
            ],
            n_respondents: 10_000,
            ability: AbilityDistribution::StandardNormal,
            seed: 99,
        };
        let (m, _) = generate_responses(&spec);
        let tm = tetrachoric_matrix(&m).unwrap();
        assert!(tm.get(0, 1).abs() < 0.05, "rho {}", tm.get(0, 1));
    }

    #[test]
    fn constant_column_flagged_undefined() {
        let m = ResponseMatrix::new(
            (0..6).map(|i| format!("r{i}")).collect(),
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                Some(true), Some(true), Some(false),
                Some(true), Some(true), Some(true),
                Some(false), Some(true), Some(true),
                Some(true), Some(true), Some(false),
                Some(false), Some(true), Some(true),
                Some(true), Some(true), Some(false),
            ],
        );
        let tm = tetrachoric_matrix(&m).unwrap();
        assert!(tm.is_undefined(0, 1));
        assert!(tm.is_undefined(1, 2));
        assert!(!tm.is_undefined(0, 2));
        assert_eq!(tm.undefined_items(), vec!["a", "b", "c"]);
        // only "b" participates in every undefined pair
        assert!(tm.has_undefined());
    }

    #[test]
    fn matrix_is_symmetric_with_unit_diagonal() {
        let spec = SimulationSpec {
            items: vec![
                ItemParameters::two_pl(1.2, -0.5),
                ItemParameters::two_pl(0.9, 0.3),
                ItemParameters::two_pl(1.7, 0.0),
            ],
            n_respondents: 500,
            ability: AbilityDistribution::StandardNormal,
            seed: 17,
        };
        let (m, _) = generate_responses(&spec);
        let tm = tetrachoric_matrix(&m).unwrap();
        for i in 0..3 {
            assert_eq!(tm.get(i, i), 1.0);
            for j in 0..3 {
                assert_eq!(tm.get(i, j), tm.get(j, i));
                assert!(tm.get(i, j).abs() <= 1.0);
            }
        }
    }
}
