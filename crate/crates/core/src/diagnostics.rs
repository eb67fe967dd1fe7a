//! Post-fit item diagnostics: ICC misfit, local dependence between item
//! pairs, discrimination screening, and empirical response curves.

use serde::Serialize;

use crate::em::{log_joint_row, prob_tables, FittedModel};
use crate::error::{Error, Result};
use crate::model::ItemParameters;
use crate::response::ResponseMatrix;
use crate::stats::{chi2_sf, logsumexp};

/// Identifies the fit-statistic variant in every report so results are never
/// misattributed to a different construction.
pub const ITEM_FIT_METHOD: &str = "rest-score-binned chi-square";

#[derive(Debug, Clone, Copy)]
pub struct ItemFitConfig {
    /// Score groups before merging.
    pub groups: usize,
    /// Flag level.
    pub alpha: f64,
}

impl Default for ItemFitConfig {
    fn default() -> Self {
        Self {
            groups: 10,
            alpha: 0.05,
        }
    }
}

/// One score group of the item-fit table.
#[derive(Debug, Clone, Serialize)]
pub struct GroupFit {
    pub n: usize,
    pub mean_theta: f64,
    pub observed: f64,
    pub expected: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ItemFitReport {
    pub item_id: String,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub flagged: bool,
    pub groups: Vec<GroupFit>,
    /// Adjacent-group merges applied to cure degenerate groups.
    pub merged_groups: usize,
    /// Set when fewer than 200 respondents answered the item.
    pub small_sample_warning: bool,
    pub method: &'static str,
}

/// Posterior machinery shared by the diagnostics: log joint over grid nodes
/// for one respondent, optionally with one item's contribution removed.
struct PosteriorContext {
    tables: crate::em::ProbTables,
    log_weights: Vec<f64>,
}

impl PosteriorContext {
    fn new(model: &FittedModel, matrix: &ResponseMatrix) -> Result<Self> {
        if model.items.len() != matrix.n_items() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} items, matrix {}",
                model.items.len(),
                matrix.n_items()
            )));
        }
        let params = model.params();
        let grid = model.grid();
        Ok(Self {
            tables: prob_tables(&params, &grid),
            log_weights: grid.weights().iter().map(|w| w.ln()).collect(),
        })
    }

    fn log_joint(
        &self,
        matrix: &ResponseMatrix,
        respondent: usize,
        exclude: &[usize],
        out: &mut [f64],
    ) {
        let kc = self.tables.k_count;
        log_joint_row(matrix.row(respondent), &self.tables, &self.log_weights, out);
        for &item in exclude {
            if let Some(x) = matrix.get(respondent, item) {
                let table = if x {
                    &self.tables.log_p[item * kc..(item + 1) * kc]
                } else {
                    &self.tables.log_q[item * kc..(item + 1) * kc]
                };
                for (o, t) in out.iter_mut().zip(table) {
                    *o -= t;
                }
            }
        }
    }
}

/// Theta-binned chi-square item fit (a rest-score variant: respondents are
/// grouped by their EAP ability computed from all *other* items).
///
/// Within each group the observed proportion correct is compared with the
/// mean model probability over the group, each respondent's probability
/// being averaged over their rest-score posterior. The statistic is
/// sum over groups of N_h (O_h - E_h)^2 / (E_h (1 - E_h)) on
/// (groups - item parameters) degrees of freedom. Degenerate groups are
/// merged into their neighbor; fewer than 3 usable groups is an error.
pub fn item_fit(
    model: &FittedModel,
    matrix: &ResponseMatrix,
    item: usize,
    config: &ItemFitConfig,
) -> Result<ItemFitReport> {
    if model.factors != 1 {
        return Err(Error::DimensionMismatch(
            "item-fit diagnostics require a one-factor model".into(),
        ));
    }
    let ctx = PosteriorContext::new(model, matrix)?;
    let grid = model.grid();
    let kc = grid.len();
    let item_p = &ctx.tables.p[item * kc..(item + 1) * kc];

    // (theta_rest, predictive prob, outcome, id) per respondent who answered
    let mut rows: Vec<(f64, f64, bool, &str)> = Vec::new();
    let mut joint = vec![0.0; kc];
    for r in 0..matrix.n_respondents() {
        let Some(x) = matrix.get(r, item) else { continue };
        ctx.log_joint(matrix, r, &[item], &mut joint);
        let lm = logsumexp(&joint);
        let mut theta = 0.0;
        let mut pred = 0.0;
        for k in 0..kc {
            let w = (joint[k] - lm).exp();
            theta += w * grid.node1(k);
            pred += w * item_p[k];
        }
        rows.push((theta, pred, x, matrix.respondents()[r].as_str()));
    }
    let n_used = rows.len();
    if n_used < config.groups {
        return Err(Error::InsufficientBins { usable: n_used / 2 });
    }
    // sort by rest theta; respondent id as a permutation-invariant tiebreak
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.3.cmp(b.3)));

    // equal-count groups: the first (n mod H) groups take one extra row
    let h = config.groups;
    let base = n_used / h;
    let extra = n_used % h;
    let mut groups: Vec<GroupFit> = Vec::with_capacity(h);
    let mut start = 0;
    for g in 0..h {
        let size = base + usize::from(g < extra);
        let slice = &rows[start..start + size];
        start += size;
        let n = slice.len();
        let mean_theta = slice.iter().map(|r| r.0).sum::<f64>() / n as f64;
        let observed = slice.iter().filter(|r| r.2).count() as f64 / n as f64;
        let expected = slice.iter().map(|r| r.1).sum::<f64>() / n as f64;
        groups.push(GroupFit {
            n,
            mean_theta,
            observed,
            expected,
        });
    }

    // merge groups whose expected variance degenerates into their neighbor
    let mut merged = 0usize;
    let mut g = 0;
    while g < groups.len() {
        let e = groups[g].expected;
        if groups.len() > 1 && (groups[g].n == 0 || e * (1.0 - e) < 1e-10) {
            let next = (g + 1).min(groups.len() - 1);
            let into_idx = if next == g { g - 1 } else { next };
            let absorbed = groups.remove(g);
            let into_idx = if into_idx > g { into_idx - 1 } else { into_idx };
            let into = &mut groups[into_idx];
            let total = (absorbed.n + into.n) as f64;
            into.mean_theta =
                (absorbed.mean_theta * absorbed.n as f64 + into.mean_theta * into.n as f64) / total;
            into.observed =
                (absorbed.observed * absorbed.n as f64 + into.observed * into.n as f64) / total;
            into.expected =
                (absorbed.expected * absorbed.n as f64 + into.expected * into.n as f64) / total;
            into.n += absorbed.n;
            merged += 1;
        } else {
            g += 1;
        }
    }
    let usable = groups.len();
    let item_params = model.items[item].params.parameter_count();
    if usable < 3 || usable <= item_params {
        return Err(Error::InsufficientBins { usable });
    }

    let statistic: f64 = groups
        .iter()
        .map(|g| {
            let var = g.expected * (1.0 - g.expected);
            g.n as f64 * (g.observed - g.expected).powi(2) / var
        })
        .sum();
    let df = usable - item_params;
    let p_value = chi2_sf(statistic, df as f64);

    Ok(ItemFitReport {
        item_id: model.items[item].id.clone(),
        statistic,
        df,
        p_value,
        flagged: p_value < config.alpha,
        groups,
        merged_groups: merged,
        small_sample_warning: n_used < 200,
        method: ITEM_FIT_METHOD,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LdConfig {
    pub alpha: f64,
    /// Minimum joint observations for the pair.
    pub min_joint: usize,
}

impl Default for LdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            min_joint: 100,
        }
    }
}

/// Local-dependence report for one item pair.
#[derive(Debug, Clone, Serialize)]
pub struct LdReport {
    pub item_a: String,
    pub item_b: String,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Signed root of the statistic; positive when the items agree more
    /// often than the model expects.
    pub signed_residual: f64,
    pub flagged: bool,
    pub n_joint: usize,
}

/// Chi-square comparison of the observed joint 2x2 table of an item pair
/// against the model-expected table accumulated over each respondent's
/// posterior: E[n_xy] = sum_j sum_k post_jk P_a^x(k) P_b^y(k). The posterior
/// excludes the tested pair itself (the same rest-score principle as the
/// item-fit groups: the pair must not vouch for its own independence). One
/// degree of freedom; exactly symmetric in the pair.
pub fn local_dependence(
    model: &FittedModel,
    matrix: &ResponseMatrix,
    pair: (usize, usize),
    config: &LdConfig,
) -> Result<LdReport> {
    let (a, b) = (pair.0.min(pair.1), pair.0.max(pair.1));
    let ctx = PosteriorContext::new(model, matrix)?;
    let grid = model.grid();
    let kc = grid.len();
    let pa = &ctx.tables.p[a * kc..(a + 1) * kc];
    let pb = &ctx.tables.p[b * kc..(b + 1) * kc];

    let mut observed = [0.0f64; 4]; // indexed x*2 + y
    let mut expected = [0.0f64; 4];
    let mut n_joint = 0usize;
    let mut joint = vec![0.0; kc];
    for r in 0..matrix.n_respondents() {
        let (Some(xa), Some(xb)) = (matrix.get(r, a), matrix.get(r, b)) else {
            continue;
        };
        n_joint += 1;
        observed[usize::from(xa) * 2 + usize::from(xb)] += 1.0;
        ctx.log_joint(matrix, r, &[a, b], &mut joint);
        let lm = logsumexp(&joint);
        for k in 0..kc {
            let w = (joint[k] - lm).exp();
            let p11 = pa[k] * pb[k];
            expected[3] += w * p11;
            expected[2] += w * (pa[k] - p11);
            expected[1] += w * (pb[k] - p11);
            expected[0] += w * (1.0 - pa[k] - pb[k] + p11);
        }
    }
    if n_joint < config.min_joint {
        return Err(Error::InsufficientJointObservations {
            item_a: model.items[a].id.clone(),
            item_b: model.items[b].id.clone(),
            n: n_joint,
            need: config.min_joint,
        });
    }
    let statistic: f64 = observed
        .iter()
        .zip(&expected)
        .map(|(o, e)| (o - e).powi(2) / e.max(1e-12))
        .sum();
    let p_value = chi2_sf(statistic, 1.0);
    let signed_residual = statistic.sqrt() * (observed[3] - expected[3]).signum();
    Ok(LdReport {
        item_a: model.items[a].id.clone(),
        item_b: model.items[b].id.clone(),
        statistic,
        df: 1,
        p_value,
        signed_residual,
        flagged: p_value < config.alpha,
        n_joint,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminationConfig {
    /// Minimum slope magnitude.
    pub a_min: f64,
    /// Minimum probability range over the central ability window [-3, 3].
    pub range_min: f64,
}

impl Default for DiscriminationConfig {
    fn default() -> Self {
        Self {
            a_min: 0.25,
            range_min: 0.30,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DiscriminationCheck {
    pub flat: bool,
    pub max_abs_slope: f64,
    /// p(+3) - p(-3) along the item's steepest ability direction.
    pub central_range: f64,
}

/// Flags an item as too flat to discriminate: slope magnitude below `a_min`
/// or probability range below `range_min` across [-3, 3], where most of the
/// population sits. Depends only on the parameters, never on data.
pub fn discrimination_check(
    item: &ItemParameters,
    config: &DiscriminationConfig,
) -> DiscriminationCheck {
    let max_abs_slope = item.slopes.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let central_range = if item.factors() == 1 {
        item.prob1(3.0) - item.prob1(-3.0)
    } else {
        // steepest direction for multi-factor items
        let norm: f64 = item.slopes.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            0.0
        } else {
            let hi: Vec<f64> = item.slopes.iter().map(|a| 3.0 * a / norm).collect();
            let lo: Vec<f64> = hi.iter().map(|t| -t).collect();
            item.prob(&hi) - item.prob(&lo)
        }
    };
    DiscriminationCheck {
        flat: max_abs_slope < config.a_min || central_range < config.range_min,
        max_abs_slope,
        central_range,
    }
}

/// One row of an empirical ICC table.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub bin_mean_theta: f64,
    pub observed_prop: f64,
    pub model_prop: f64,
    pub n: usize,
}

/// Binned empirical response curve: equal-count theta bins of observed
/// proportion correct next to the model probability at the bin mean.
pub fn empirical_icc(
    matrix: &ResponseMatrix,
    item: usize,
    thetas: &[f64],
    model_item: &ItemParameters,
    bins: usize,
) -> Vec<CurvePoint> {
    assert!(bins >= 1);
    assert_eq!(thetas.len(), matrix.n_respondents());
    let mut rows: Vec<(f64, bool, &str)> = (0..matrix.n_respondents())
        .filter_map(|r| {
            matrix
                .get(r, item)
                .map(|x| (thetas[r], x, matrix.respondents()[r].as_str()))
        })
        .collect();
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.2.cmp(b.2)));
    let n = rows.len();
    let bins = bins.min(n.max(1));
    let base = n / bins;
    let extra = n % bins;
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for g in 0..bins {
        let size = base + usize::from(g < extra);
        if size == 0 {
            continue;
        }
        let slice = &rows[start..start + size];
        start += size;
        let mean_theta = slice.iter().map(|r| r.0).sum::<f64>() / size as f64;
        let observed = slice.iter().filter(|r| r.1).count() as f64 / size as f64;
        out.push(CurvePoint {
            bin_mean_theta: mean_theta,
            observed_prop: observed,
            model_prop: model_item.prob1(mean_theta),
            n: size,
        });
    }
    out
}

/// Writes a curve table as `bin_mean_theta,observed_prop,model_prop,n` CSV.
pub fn curve_to_csv<W: std::io::Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_mean_theta", "observed_prop", "model_prop", "n"])?;
    for p in points {
        w.write_record([
            format!("{}", p.bin_mean_theta),
            format!("{}", p.observed_prop),
            format!("{}", p.model_prop),
            p.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Dense model ICC samples over [-4, 4] for plotting next to the empirical
/// curve.
pub fn model_curve(item: &ItemParameters, points: usize) -> Vec<(f64, f64)> {
    assert!(points >= 2);
    let h = 8.0 / (points - 1) as f64;
    (0..points)
        .map(|i| {
            let t = -4.0 + h * i as f64;
            (t, item.prob1(t))
        })
        .collect()
}
