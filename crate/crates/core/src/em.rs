//! Marginal maximum likelihood estimation of 2PL/3PL item parameters by EM,
//! with the ability distribution integrated out over a fixed quadrature grid.

use rayon::prelude::*;
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{ItemParameters, ModelKind, QuadratureGrid, GUESSING_MAX};
use crate::response::ResponseMatrix;
use crate::stats::{logistic, logsumexp, normal_quantile};

/// E-step reductions run over fixed-size respondent chunks so results are
/// identical at any thread count.
const CHUNK: usize = 256;

/// Slopes are clamped to this magnitude in the M-step. A logistic slope this
/// steep is already a near-deterministic item; unbounded growth only occurs
/// on degenerate inputs (duplicated columns) and destroys the diagnostics.
pub const SLOPE_CAP: f64 = 8.0;

/// Fit configuration. Defaults follow the library's standard setup:
/// 61-node quadrature on [-6, 6] (31 per dimension for two factors),
/// loglik tolerance 1e-6, parameter tolerance 1e-4, 500 cycle cap.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub factors: usize,
    /// Model family applied to every item unless overridden per item.
    pub kind: ModelKind,
    pub item_kinds: Option<Vec<ModelKind>>,
    /// Quadrature nodes per dimension; 0 selects the default.
    pub nodes_per_dim: usize,
    pub range: (f64, f64),
    pub tol_loglik: f64,
    pub tol_param: f64,
    pub max_cycles: usize,
    /// Standard errors via the observed-information matrix (central
    /// differences, step 1e-4) of the marginal log-likelihood.
    pub compute_se: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            factors: 1,
            kind: ModelKind::TwoPl,
            item_kinds: None,
            nodes_per_dim: 0,
            range: crate::model::DEFAULT_RANGE,
            tol_loglik: 1e-6,
            tol_param: 1e-4,
            max_cycles: 500,
            compute_se: true,
        }
    }
}

impl FitConfig {
    pub fn grid(&self) -> QuadratureGrid {
        let nodes = if self.nodes_per_dim == 0 {
            match self.factors {
                1 => crate::model::DEFAULT_NODES_1D,
                _ => crate::model::DEFAULT_NODES_PER_DIM_2D,
            }
        } else {
            self.nodes_per_dim
        };
        QuadratureGrid::equally_spaced(nodes, self.range, self.factors)
    }
}

/// Standard errors and covariance of one item's free parameters, ordered as
/// (slopes.., intercept, guessing?).
#[derive(Debug, Clone, PartialEq)]
pub struct ItemSe {
    pub slopes: Vec<f64>,
    pub intercept: f64,
    pub guessing: Option<f64>,
    /// Row-major covariance over the same ordering.
    pub covariance: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FittedItem {
    pub id: String,
    pub params: ItemParameters,
    /// None when the information matrix was singular or a parameter sat on
    /// the domain boundary.
    pub se: Option<ItemSe>,
}

/// Per-respondent posterior ability summary (EAP and posterior SD per
/// factor) from the final E-step.
#[derive(Debug, Clone)]
pub struct AbilitySummary {
    pub respondent_id: String,
    pub eap: Vec<f64>,
    pub sd: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub factors: usize,
    pub items: Vec<FittedItem>,
    /// Marginal log-likelihood at the solution (no penalty terms).
    pub loglik: f64,
    /// Per-cycle EM objective. For 3PL items this includes the guessing
    /// prior penalty, which is the quantity EM drives monotonically upward.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub aic: f64,
    pub sabic: f64,
    pub free_parameters: usize,
    pub n_respondents: usize,
    pub respondent_ids: Vec<String>,
    pub posterior_summaries: Vec<AbilitySummary>,
    pub warnings: Vec<String>,
    pub nodes_per_dim: usize,
    pub range: (f64, f64),
}

impl FittedModel {
    pub fn item_ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }

    pub fn grid(&self) -> QuadratureGrid {
        QuadratureGrid::equally_spaced(self.nodes_per_dim, self.range, self.factors)
    }

    pub fn params(&self) -> Vec<ItemParameters> {
        self.items.iter().map(|i| i.params.clone()).collect()
    }

    /// Serializes the model report:
    /// `{factors, items:[{id, model, a, b, d, c, se}], loglik, iters,
    /// converged, aic, sabic}`.
    pub fn to_json(&self) -> serde_json::Value {
        let items: Vec<serde_json::Value> = self
            .items
            .iter()
            .map(|it| {
                let se = it.se.as_ref().map(|se| {
                    json!({
                        "a": se.slopes,
                        "d": se.intercept,
                        "c": se.guessing,
                    })
                });
                json!({
                    "id": it.id,
                    "model": match it.params.kind {
                        ModelKind::TwoPl => "2PL",
                        ModelKind::ThreePl => "3PL",
                    },
                    "a": it.params.slopes,
                    "b": it.params.difficulty(),
                    "d": it.params.intercept,
                    "c": it.params.guessing,
                    "se": se,
                })
            })
            .collect();
        json!({
            "factors": self.factors,
            "items": items,
            "loglik": self.loglik,
            "iters": self.iterations,
            "converged": self.converged,
            "aic": self.aic,
            "sabic": self.sabic,
        })
    }

    /// Writes the per-cycle objective trace as `cycle,loglik` CSV.
    pub fn trace_to_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cycle", "loglik"])?;
        for (i, ll) in self.trace.iter().enumerate() {
            w.write_record([i.to_string(), format!("{ll}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-item probability tables over the grid, laid out item-major:
/// `p[i * k_count + k]`.
pub(crate) struct ProbTables {
    pub k_count: usize,
    pub p: Vec<f64>,
    pub log_p: Vec<f64>,
    pub log_q: Vec<f64>,
}

pub(crate) fn prob_tables(items: &[ItemParameters], grid: &QuadratureGrid) -> ProbTables {
    let k_count = grid.len();
    let mut p = Vec::with_capacity(items.len() * k_count);
    for item in items {
        for k in 0..k_count {
            // clamp away from 0/1 so logs stay finite
            p.push(item.prob(grid.node(k)).clamp(1e-12, 1.0 - 1e-12));
        }
    }
    let log_p: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let log_q: Vec<f64> = p.iter().map(|v| (1.0 - v).ln()).collect();
    ProbTables {
        k_count,
        p,
        log_p,
        log_q,
    }
}

/// Log joint (pattern, node) terms for one respondent row:
/// `out[k] = log w_k + sum_i log p_i(k)^x (1-p_i(k))^(1-x)` over observed
/// items.
#[inline]
pub(crate) fn log_joint_row(
    row: &[Option<bool>],
    tables: &ProbTables,
    log_weights: &[f64],
    out: &mut [f64],
) {
    let kc = tables.k_count;
    out.copy_from_slice(log_weights);
    for (i, cell) in row.iter().enumerate() {
        let table = match cell {
            Some(true) => &tables.log_p[i * kc..(i + 1) * kc],
            Some(false) => &tables.log_q[i * kc..(i + 1) * kc],
            None => continue,
        };
        for (o, t) in out.iter_mut().zip(table) {
            *o += t;
        }
    }
}

/// Marginal log-likelihood of a response matrix under fixed item parameters:
/// sum over respondents of log sum over nodes of prior mass times the
/// pattern likelihood, computed in log space. An empty matrix scores 0.
pub fn log_marginal_likelihood(
    items: &[ItemParameters],
    matrix: &ResponseMatrix,
    grid: &QuadratureGrid,
) -> Result<f64> {
    if items.len() != matrix.n_items() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameter sets for {} items",
            items.len(),
            matrix.n_items()
        )));
    }
    if let Some(bad) = items.iter().find(|p| p.factors() != grid.factors()) {
        return Err(Error::DimensionMismatch(format!(
            "item has {} factors but grid has {}",
            bad.factors(),
            grid.factors()
        )));
    }
    let tables = prob_tables(items, grid);
    let log_weights: Vec<f64> = grid.weights().iter().map(|w| w.ln()).collect();
    let mut scratch = vec![0.0; grid.len()];
    let mut total = 0.0;
    for r in 0..matrix.n_respondents() {
        log_joint_row(matrix.row(r), &tables, &log_weights, &mut scratch);
        total += logsumexp(&scratch);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// parameter packing for the per-item M-step / SE machinery
// ---------------------------------------------------------------------------

/// Which of an item's parameters are free: slopes (one may be structurally
/// pinned to anchor the factor solution), intercept, and guessing for 3PL.
#[derive(Debug, Clone)]
struct ItemLayout {
    slope_free: Vec<bool>,
    kind: ModelKind,
}

impl ItemLayout {
    fn n_free(&self) -> usize {
        self.slope_free.iter().filter(|f| **f).count()
            + 1
            + usize::from(self.kind == ModelKind::ThreePl)
    }

    /// Packs natural parameters (free slopes.., d, c) into a vector.
    fn pack(&self, params: &ItemParameters) -> Vec<f64> {
        let mut v: Vec<f64> = params
            .slopes
            .iter()
            .zip(&self.slope_free)
            .filter(|(_, free)| **free)
            .map(|(a, _)| *a)
            .collect();
        v.push(params.intercept);
        if self.kind == ModelKind::ThreePl {
            v.push(params.guessing);
        }
        v
    }

    fn unpack(&self, v: &[f64], factors: usize) -> ItemParameters {
        let mut slopes = vec![0.0; factors];
        let mut idx = 0;
        for (f, free) in self.slope_free.iter().enumerate() {
            if *free {
                slopes[f] = v[idx];
                idx += 1;
            }
        }
        let intercept = v[idx];
        idx += 1;
        let guessing = if self.kind == ModelKind::ThreePl {
            v[idx]
        } else {
            0.0
        };
        ItemParameters::slope_intercept(slopes, intercept, guessing, self.kind)
    }
}

/// Beta(2, 8) log-density penalty on the guessing parameter (up to a
/// constant): log c + 7 log(1 - c). Stabilizes the weakly identified lower
/// asymptote.
#[inline]
fn guessing_penalty(c: f64) -> f64 {
    c.ln() + 7.0 * (1.0 - c).ln()
}

/// Expected complete-data objective for one item given expected counts
/// r_k (correct) and n_k (responding) at each node, plus the guessing
/// penalty for 3PL items.
fn m_objective(
    params: &ItemParameters,
    grid: &QuadratureGrid,
    r_k: &[f64],
    n_k: &[f64],
) -> f64 {
    let mut q = 0.0;
    for k in 0..grid.len() {
        if n_k[k] == 0.0 {
            continue;
        }
        let p = params.prob(grid.node(k)).clamp(1e-12, 1.0 - 1e-12);
        q += r_k[k] * p.ln() + (n_k[k] - r_k[k]) * (1.0 - p).ln();
    }
    if params.kind == ModelKind::ThreePl {
        q += guessing_penalty(params.guessing);
    }
    q
}

/// One M-step: Newton-type (expected-information) iterations with
/// step-halving on the objective, in the transformed space where guessing is
/// logit-mapped onto (0, GUESSING_MAX).
fn m_step_item(
    start: &ItemParameters,
    layout: &ItemLayout,
    grid: &QuadratureGrid,
    r_k: &[f64],
    n_k: &[f64],
) -> ItemParameters {
    let factors = start.factors();
    let is_3pl = layout.kind == ModelKind::ThreePl;
    // working vector: free slopes, intercept, logit(c / c_max)
    let mut work = layout.pack(start);
    let m = work.len();
    if is_3pl {
        let c = work[m - 1].clamp(1e-6, GUESSING_MAX - 1e-6);
        work[m - 1] = (c / (GUESSING_MAX - c)).ln();
    }

    let unpack_work = |w: &[f64]| -> ItemParameters {
        let mut natural = w.to_vec();
        if is_3pl {
            natural[m - 1] = GUESSING_MAX * logistic(natural[m - 1]);
        }
        layout.unpack(&natural, factors)
    };

    let mut current = unpack_work(&work);
    let mut q_current = m_objective(&current, grid, r_k, n_k);

    for _ in 0..30 {
        // gradient and expected information in the working space
        let mut grad = vec![0.0; m];
        let mut info = vec![0.0; m * m];
        let c = current.guessing;
        let g_logit = if is_3pl { work[m - 1] } else { 0.0 };
        let s = logistic(g_logit);
        let dc_dg = GUESSING_MAX * s * (1.0 - s);

        let free_factors: Vec<usize> = layout
            .slope_free
            .iter()
            .enumerate()
            .filter(|(_, f)| **f)
            .map(|(f, _)| f)
            .collect();

        let mut dp = vec![0.0; m];
        for k in 0..grid.len() {
            if n_k[k] == 0.0 {
                continue;
            }
            let node = grid.node(k);
            let z: f64 = current
                .slopes
                .iter()
                .zip(node)
                .map(|(a, t)| a * t)
                .sum::<f64>()
                + current.intercept;
            let p_star = logistic(z);
            let p = (c + (1.0 - c) * p_star).clamp(1e-12, 1.0 - 1e-12);
            let dp_dz = (1.0 - c) * p_star * (1.0 - p_star);
            for (u, &f) in free_factors.iter().enumerate() {
                dp[u] = dp_dz * node[f];
            }
            dp[free_factors.len()] = dp_dz;
            if is_3pl {
                dp[m - 1] = (1.0 - p_star) * dc_dg;
            }
            let resid = r_k[k] - n_k[k] * p;
            let w_fisher = n_k[k] / (p * (1.0 - p));
            for u in 0..m {
                grad[u] += resid / (p * (1.0 - p)) * dp[u];
                for v in 0..m {
                    info[u * m + v] += w_fisher * dp[u] * dp[v];
                }
            }
        }
        if is_3pl {
            // penalty gradient/curvature in working space
            grad[m - 1] += (1.0 / c - 7.0 / (1.0 - c)) * dc_dg;
            let d2c = GUESSING_MAX * s * (1.0 - s) * (1.0 - 2.0 * s);
            let pen_curv = (-1.0 / (c * c) - 7.0 / ((1.0 - c) * (1.0 - c))) * dc_dg * dc_dg
                + (1.0 / c - 7.0 / (1.0 - c)) * d2c;
            info[(m - 1) * m + (m - 1)] -= pen_curv;
        }

        let step = match solve_spd(&info, &grad, m) {
            Some(step) => step,
            None => break,
        };
        let step_norm = step.iter().fold(0.0f64, |acc, s| acc.max(s.abs()));
        if step_norm < 1e-10 {
            break;
        }

        // step-halving: only accept objective improvements
        let n_slopes = free_factors.len();
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let mut trial: Vec<f64> = work
                .iter()
                .zip(&step)
                .map(|(w, s)| w + scale * s)
                .collect();
            for slope in trial.iter_mut().take(n_slopes) {
                *slope = slope.clamp(-SLOPE_CAP, SLOPE_CAP);
            }
            let candidate = unpack_work(&trial);
            let q_trial = m_objective(&candidate, grid, r_k, n_k);
            if q_trial >= q_current - 1e-12 {
                work = trial;
                current = candidate;
                let improved = q_trial - q_current;
                q_current = q_trial;
                accepted = true;
                if improved < 1e-12 {
                    return current;
                }
                break;
            }
            scale /= 2.0;
        }
        if !accepted {
            break;
        }
    }
    current
}

/// Solves (symmetric positive definite) A x = b via Cholesky; None when the
/// matrix is not positive definite.
fn solve_spd(a: &[f64], b: &[f64], m: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let mut sum = a[i * m + j];
            for k in 0..j {
                sum -= l[i * m + k] * l[j * m + k];
            }
            if i == j {
                if sum <= 1e-12 {
                    return None;
                }
                l[i * m + i] = sum.sqrt();
            } else {
                l[i * m + j] = sum / l[j * m + j];
            }
        }
    }
    // forward then backward substitution
    let mut y = vec![0.0; m];
    for i in 0..m {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * m + k] * y[k];
        }
        y[i] = sum / l[i * m + i];
    }
    let mut x = vec![0.0; m];
    for i in (0..m).rev() {
        let mut sum = y[i];
        for k in (i + 1)..m {
            sum -= l[k * m + i] * x[k];
        }
        x[i] = sum / l[i * m + i];
    }
    Some(x)
}

struct EStep {
    loglik: f64,
    penalized: f64,
    /// Expected responding count per (item, node), item-major.
    n_k: Vec<f64>,
    /// Expected correct count per (item, node), item-major.
    r_k: Vec<f64>,
}

/// E-step over canonical respondent order in fixed-size chunks. Returns the
/// marginal log-likelihood and per-(item, node) expected counts.
fn e_step(
    matrix: &ResponseMatrix,
    rows: &[usize],
    params: &[ItemParameters],
    grid: &QuadratureGrid,
    penalty: f64,
) -> EStep {
    let j = params.len();
    let kc = grid.len();
    let tables = prob_tables(params, grid);
    let log_weights: Vec<f64> = grid.weights().iter().map(|w| w.ln()).collect();

    struct Partial {
        loglik: f64,
        n_k: Vec<f64>,
        r_k: Vec<f64>,
    }

    let partials: Vec<Partial> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut part = Partial {
                loglik: 0.0,
                n_k: vec![0.0; j * kc],
                r_k: vec![0.0; j * kc],
            };
            let mut joint = vec![0.0; kc];
            let mut post = vec![0.0; kc];
            for &r in chunk {
                let row = matrix.row(r);
                log_joint_row(row, &tables, &log_weights, &mut joint);
                let lm = logsumexp(&joint);
                part.loglik += lm;
                for k in 0..kc {
                    post[k] = (joint[k] - lm).exp();
                }
                for (i, cell) in row.iter().enumerate() {
                    let Some(x) = cell else { continue };
                    let nk = &mut part.n_k[i * kc..(i + 1) * kc];
                    for (n, p) in nk.iter_mut().zip(&post) {
                        *n += p;
                    }
                    if *x {
                        let rk = &mut part.r_k[i * kc..(i + 1) * kc];
                        for (rk, p) in rk.iter_mut().zip(&post) {
                            *rk += p;
                        }
                    }
                }
            }
            part
        })
        .collect();

    let mut total = EStep {
        loglik: 0.0,
        penalized: 0.0,
        n_k: vec![0.0; j * kc],
        r_k: vec![0.0; j * kc],
    };
    for part in partials {
        total.loglik += part.loglik;
        for (t, p) in total.n_k.iter_mut().zip(&part.n_k) {
            *t += p;
        }
        for (t, p) in total.r_k.iter_mut().zip(&part.r_k) {
            *t += p;
        }
    }
    total.penalized = total.loglik + penalty;
    total
}

fn total_guessing_penalty(params: &[ItemParameters]) -> f64 {
    params
        .iter()
        .filter(|p| p.kind == ModelKind::ThreePl)
        .map(|p| guessing_penalty(p.guessing))
        .sum()
}

/// AIC and the sample-size-adjusted BIC for a fitted model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InformationCriteria {
    pub aic: f64,
    pub sabic: f64,
}

/// AIC = -2 LL + 2p; SABIC = -2 LL + p log((N + 2) / 24).
pub fn information_criteria(loglik: f64, free_parameters: usize, n_respondents: usize) -> InformationCriteria {
    let p = free_parameters as f64;
    InformationCriteria {
        aic: -2.0 * loglik + 2.0 * p,
        sabic: -2.0 * loglik + p * (((n_respondents as f64) + 2.0) / 24.0).ln(),
    }
}

/// Fits item parameters by marginal maximum likelihood EM.
///
/// Every item must have both outcomes among its observed cells; respondents
/// with no observed cells are dropped with a warning. The recorded trace is
/// the EM objective, which is non-decreasing cycle over cycle.
pub fn fit_mml_em(matrix: &ResponseMatrix, config: &FitConfig) -> Result<FittedModel> {
    assert!(matches!(config.factors, 1 | 2));
    let j = matrix.n_items();
    if j < 2 || matrix.n_respondents() < 2 {
        return Err(Error::TooFewItems {
            have: j.min(matrix.n_respondents()),
            need: 2,
        });
    }
    let kinds: Vec<ModelKind> = match &config.item_kinds {
        Some(k) => {
            if k.len() != j {
                return Err(Error::DimensionMismatch(format!(
                    "{} item kinds for {} items",
                    k.len(),
                    j
                )));
            }
            k.clone()
        }
        None => vec![config.kind; j],
    };

    let mut warnings = Vec::new();

    // canonical respondent order: sorted by id, so reductions are invariant
    // to row permutation of the input matrix
    let mut rows: Vec<usize> = (0..matrix.n_respondents())
        .filter(|&r| matrix.row(r).iter().any(Option::is_some))
        .collect();
    let dropped = matrix.n_respondents() - rows.len();
    if dropped > 0 {
        warnings.push(format!("dropped {dropped} respondents with no observed responses"));
    }
    rows.sort_by(|&a, &b| matrix.respondents()[a].cmp(&matrix.respondents()[b]));

    // constant-item check over observed cells
    let mut constant = Vec::new();
    for i in 0..j {
        let mut seen_true = false;
        let mut seen_false = false;
        for &r in &rows {
            match matrix.get(r, i) {
                Some(true) => seen_true = true,
                Some(false) => seen_false = true,
                None => {}
            }
        }
        if !(seen_true && seen_false) {
            constant.push(matrix.items()[i].clone());
        }
    }
    if !constant.is_empty() {
        return Err(Error::ConstantItems { items: constant });
    }

    let grid = config.grid();
    let nodes_per_dim = if config.nodes_per_dim == 0 {
        match config.factors {
            1 => crate::model::DEFAULT_NODES_1D,
            _ => crate::model::DEFAULT_NODES_PER_DIM_2D,
        }
    } else {
        config.nodes_per_dim
    };

    // layouts: in two-factor fits the first item's second slope is pinned at
    // zero to anchor the factor solution
    let layouts: Vec<ItemLayout> = (0..j)
        .map(|i| ItemLayout {
            slope_free: (0..config.factors)
                .map(|f| !(config.factors == 2 && i == 0 && f == 1))
                .collect(),
            kind: kinds[i],
        })
        .collect();

    // deterministic starting values: unit slopes, probit intercepts, c = 0.1
    let mut params: Vec<ItemParameters> = (0..j)
        .map(|i| {
            let p_hat = column_prop(matrix, &rows, i).clamp(0.01, 0.99);
            let slopes: Vec<f64> = layouts[i]
                .slope_free
                .iter()
                .map(|&free| if free { 1.0 } else { 0.0 })
                .collect();
            let guessing = if kinds[i] == ModelKind::ThreePl { 0.1 } else { 0.0 };
            ItemParameters::slope_intercept(slopes, normal_quantile(p_hat), guessing, kinds[i])
        })
        .collect();

    let kc = grid.len();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_estep = e_step(matrix, &rows, &params, &grid, total_guessing_penalty(&params));
    trace.push(last_estep.penalized);

    for cycle in 1..=config.max_cycles {
        iterations = cycle;
        // M-step, parallel over items, deterministic by item order
        let updated: Vec<ItemParameters> = params
            .par_iter()
            .enumerate()
            .map(|(i, start)| {
                m_step_item(
                    start,
                    &layouts[i],
                    &grid,
                    &last_estep.r_k[i * kc..(i + 1) * kc],
                    &last_estep.n_k[i * kc..(i + 1) * kc],
                )
            })
            .collect();

        let max_change = params
            .iter()
            .zip(&updated)
            .map(|(old, new)| {
                let mut d = (old.intercept - new.intercept).abs();
                d = d.max((old.guessing - new.guessing).abs());
                for (a, b) in old.slopes.iter().zip(&new.slopes) {
                    d = d.max((a - b).abs());
                }
                d
            })
            .fold(0.0f64, f64::max);
        params = updated;

        let estep = e_step(matrix, &rows, &params, &grid, total_guessing_penalty(&params));
        trace.push(estep.penalized);
        let delta_ll = estep.penalized - last_estep.penalized;
        last_estep = estep;

        if delta_ll.abs() < config.tol_loglik || max_change < config.tol_param {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!(
            "EM did not converge within {} cycles; returning best-so-far parameters",
            config.max_cycles
        ));
    }

    // final posterior summaries, in original matrix row order
    let posterior_summaries = posterior_summaries(matrix, &rows, &params, &grid);

    let free_parameters: usize = layouts.iter().map(ItemLayout::n_free).sum();
    let loglik = last_estep.loglik;
    let ic = information_criteria(loglik, free_parameters, rows.len());

    let se: Vec<Option<ItemSe>> = if config.compute_se {
        standard_errors(matrix, &rows, &params, &layouts, &grid)
    } else {
        vec![None; j]
    };

    let items: Vec<FittedItem> = (0..j)
        .map(|i| FittedItem {
            id: matrix.items()[i].clone(),
            params: params[i].clone(),
            se: se[i].clone(),
        })
        .collect();

    let mut sorted_ids: Vec<String> = rows.iter().map(|&r| matrix.respondents()[r].clone()).collect();
    sorted_ids.sort();

    Ok(FittedModel {
        factors: config.factors,
        items,
        loglik,
        trace,
        iterations,
        converged,
        aic: ic.aic,
        sabic: ic.sabic,
        free_parameters,
        n_respondents: rows.len(),
        respondent_ids: sorted_ids,
        posterior_summaries,
        warnings,
        nodes_per_dim,
        range: config.range,
    })
}

fn column_prop(matrix: &ResponseMatrix, rows: &[usize], item: usize) -> f64 {
    let mut n = 0usize;
    let mut c = 0usize;
    for &r in rows {
        if let Some(x) = matrix.get(r, item) {
            n += 1;
            c += usize::from(x);
        }
    }
    if n == 0 {
        0.5
    } else {
        c as f64 / n as f64
    }
}

fn posterior_summaries(
    matrix: &ResponseMatrix,
    rows: &[usize],
    params: &[ItemParameters],
    grid: &QuadratureGrid,
) -> Vec<AbilitySummary> {
    let tables = prob_tables(params, grid);
    let log_weights: Vec<f64> = grid.weights().iter().map(|w| w.ln()).collect();
    let factors = grid.factors();
    let mut ordered: Vec<usize> = rows.to_vec();
    ordered.sort_unstable();
    ordered
        .par_iter()
        .map(|&r| {
            let mut joint = vec![0.0; grid.len()];
            log_joint_row(matrix.row(r), &tables, &log_weights, &mut joint);
            let lm = logsumexp(&joint);
            let mut eap = vec![0.0; factors];
            let mut m2 = vec![0.0; factors];
            for k in 0..grid.len() {
                let w = (joint[k] - lm).exp();
                for (f, t) in grid.node(k).iter().enumerate() {
                    eap[f] += w * t;
                    m2[f] += w * t * t;
                }
            }
            let sd = eap
                .iter()
                .zip(&m2)
                .map(|(e, m)| (m - e * e).max(0.0).sqrt())
                .collect();
            AbilitySummary {
                respondent_id: matrix.respondents()[r].clone(),
                eap,
                sd,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// standard errors: per-item blocks of the observed information matrix
// ---------------------------------------------------------------------------

const SE_STEP: f64 = 1e-4;

/// Central-difference Hessian of the marginal log-likelihood, one item block
/// at a time. The log-likelihood is re-evaluated cheaply by swapping only
/// the perturbed item's probability table against a cached per-respondent
/// baseline.
fn standard_errors(
    matrix: &ResponseMatrix,
    rows: &[usize],
    params: &[ItemParameters],
    layouts: &[ItemLayout],
    grid: &QuadratureGrid,
) -> Vec<Option<ItemSe>> {
    let kc = grid.len();
    let tables = prob_tables(params, grid);
    let log_weights: Vec<f64> = grid.weights().iter().map(|w| w.ln()).collect();

    // baseline log joint per (respondent, node)
    let base: Vec<Vec<f64>> = rows
        .par_chunks(CHUNK)
        .flat_map_iter(|chunk| {
            chunk.iter().map(|&r| {
                let mut joint = vec![0.0; kc];
                log_joint_row(matrix.row(r), &tables, &log_weights, &mut joint);
                joint
            })
            .collect::<Vec<_>>()
        })
        .collect();
    let base_lse: Vec<f64> = base.iter().map(|j| logsumexp(j)).collect();

    params
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            item_block_se(
                matrix, rows, p, &layouts[i], grid, i, &tables, &base, &base_lse,
            )
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn item_block_se(
    matrix: &ResponseMatrix,
    rows: &[usize],
    params: &ItemParameters,
    layout: &ItemLayout,
    grid: &QuadratureGrid,
    item: usize,
    tables: &ProbTables,
    base: &[Vec<f64>],
    base_lse: &[f64],
) -> Option<ItemSe> {
    let kc = grid.len();
    let natural = layout.pack(params);
    let m = natural.len();
    let is_3pl = layout.kind == ModelKind::ThreePl;
    let factors = params.factors();

    // guessing must stay inside (0, GUESSING_MAX) under perturbation
    if is_3pl {
        let c = natural[m - 1];
        if c - SE_STEP <= 0.0 || c + SE_STEP >= GUESSING_MAX {
            return None;
        }
    }

    // marginal LL as a function of this item's parameters only
    let eval = |v: &[f64]| -> f64 {
        let p = layout.unpack(v, factors);
        let mut log_p = vec![0.0; kc];
        let mut log_q = vec![0.0; kc];
        for k in 0..kc {
            let pk = p.prob(grid.node(k)).clamp(1e-12, 1.0 - 1e-12);
            log_p[k] = pk.ln();
            log_q[k] = (1.0 - pk).ln();
        }
        let mut total = 0.0;
        let mut scratch = vec![0.0; kc];
        for (row_pos, &r) in rows.iter().enumerate() {
            match matrix.get(r, item) {
                None => total += base_lse[row_pos],
                Some(x) => {
                    let old = if x {
                        &tables.log_p[item * kc..(item + 1) * kc]
                    } else {
                        &tables.log_q[item * kc..(item + 1) * kc]
                    };
                    let new = if x { &log_p } else { &log_q };
                    let b = &base[row_pos];
                    for k in 0..kc {
                        scratch[k] = b[k] - old[k] + new[k];
                    }
                    total += logsumexp(&scratch);
                }
            }
        }
        total
    };

    let f0 = eval(&natural);
    let h = SE_STEP;
    let mut hess = vec![0.0; m * m];
    for u in 0..m {
        let mut up = natural.clone();
        up[u] += h;
        let mut dn = natural.clone();
        dn[u] -= h;
        hess[u * m + u] = (eval(&up) - 2.0 * f0 + eval(&dn)) / (h * h);
    }
    for u in 0..m {
        for v in (u + 1)..m {
            let mut pp = natural.clone();
            pp[u] += h;
            pp[v] += h;
            let mut pm = natural.clone();
            pm[u] += h;
            pm[v] -= h;
            let mut mp = natural.clone();
            mp[u] -= h;
            mp[v] += h;
            let mut mm = natural.clone();
            mm[u] -= h;
            mm[v] -= h;
            let val = (eval(&pp) - eval(&pm) - eval(&mp) + eval(&mm)) / (4.0 * h * h);
            hess[u * m + v] = val;
            hess[v * m + u] = val;
        }
    }

    // observed information = -Hessian; covariance = inverse
    let info = nalgebra::DMatrix::from_row_slice(m, m, &hess) * -1.0;
    let cov = info.try_inverse()?;
    if (0..m).any(|u| cov[(u, u)] <= 0.0 || !cov[(u, u)].is_finite()) {
        return None;
    }
    let ses: Vec<f64> = (0..m).map(|u| cov[(u, u)].sqrt()).collect();
    let n_slopes = layout.slope_free.iter().filter(|f| **f).count();
    Some(ItemSe {
        slopes: ses[..n_slopes].to_vec(),
        intercept: ses[n_slopes],
        guessing: is_3pl.then(|| ses[m - 1]),
        covariance: cov.transpose().as_slice().to_vec(),
    })
}
