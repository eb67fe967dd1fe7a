//! Factor structure: eigenvalue scree of a tetrachoric matrix, factor-count
//! suggestion, and target rotation of multi-factor loadings.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tetrachoric::TetrachoricMatrix;

/// Ordered eigenvalues of the (symmetrized, unit-diagonal) correlation
/// matrix, plus a note when indefinite input had to be floored.
#[derive(Debug, Clone, Serialize)]
pub struct ScreeReport {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// True when negative eigenvalues were floored at 1e-6 to restore
    /// positive definiteness (pairwise estimation does not guarantee it).
    pub floored: bool,
}

impl ScreeReport {
    pub fn to_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "eigenvalue"])?;
        for (i, ev) in self.eigenvalues.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{ev}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

const EIGEN_FLOOR: f64 = 1e-6;
// below this the matrix counts as genuinely indefinite rather than
// round-off noise
const INDEFINITE_TOL: f64 = -1e-8;

/// Descending eigenvalues of the tetrachoric matrix. Undefined entries must
/// be dropped by the caller first. Indefinite matrices get their negative
/// eigenvalues floored at 1e-6 (flagged in the report); positive
/// semidefinite input is returned untouched so the trace is preserved.
pub fn eigen_scree(tetra: &TetrachoricMatrix) -> Result<ScreeReport> {
    if tetra.has_undefined() || tetra.rho.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteMatrix);
    }
    let j = tetra.n_items();
    let m = DMatrix::from_row_slice(j, j, &tetra.rho);
    let mut eigenvalues: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut floored = false;
    if eigenvalues.last().is_some_and(|&min| min < INDEFINITE_TOL) {
        floored = true;
        for ev in &mut eigenvalues {
            if *ev < EIGEN_FLOOR {
                *ev = EIGEN_FLOOR;
            }
        }
    }
    Ok(ScreeReport { eigenvalues, floored })
}

#[derive(Debug, Clone, Copy)]
pub struct FactorCountConfig {
    /// Eigenvalue threshold for counting a factor (Kaiser rule).
    pub threshold: f64,
    /// Hard cap on the suggestion.
    pub cap: usize,
}

impl Default for FactorCountConfig {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            cap: 2,
        }
    }
}

/// Suggested factor count plus the evidence a human needs to override it.
#[derive(Debug, Clone, Serialize)]
pub struct FactorSuggestion {
    pub suggested: usize,
    pub above_threshold: usize,
    pub capped: bool,
    /// Successive eigenvalue ratios e1/e2, e2/e3, ... (up to 5).
    pub gap_ratios: Vec<f64>,
    /// Set when no dominant eigenvalue exists; the suggestion should be
    /// confirmed by model comparison.
    pub low_confidence: bool,
}

/// Counts eigenvalues above the threshold, capped. The final factor count
/// is expected to be confirmed by fitting and comparing models.
pub fn suggest_factor_count(eigenvalues: &[f64], config: FactorCountConfig) -> FactorSuggestion {
    assert!(!eigenvalues.is_empty(), "need a non-empty eigenvalue list");
    let above = eigenvalues.iter().filter(|&&e| e > config.threshold).count();
    let suggested = above.clamp(1, config.cap);
    let gap_ratios = eigenvalues
        .windows(2)
        .take(5)
        .map(|w| if w[1] > 0.0 { w[0] / w[1] } else { f64::INFINITY })
        .collect();
    FactorSuggestion {
        suggested,
        above_threshold: above,
        capped: above > config.cap,
        gap_ratios,
        low_confidence: eigenvalues[0] < 1.5,
    }
}

/// Items x factors loading (slope) matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadingMatrix {
    pub items: Vec<String>,
    pub factors: usize,
    /// Row-major, items x factors.
    pub values: Vec<f64>,
}

impl LoadingMatrix {
    pub fn new(items: Vec<String>, factors: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), items.len() * factors);
        Self {
            items,
            factors,
            values,
        }
    }

    pub fn get(&self, item: usize, factor: usize) -> f64 {
        self.values[item * self.factors + factor]
    }

    fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.items.len(), self.factors, &self.values)
    }
}

/// Target cell: pinned toward zero or left free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetCell {
    Zero,
    Free,
}

/// Rotation family. Oblique (correlated factors) is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RotationFamily {
    Oblique,
    Orthogonal,
}

#[derive(Debug, Clone, Serialize)]
pub struct RotationResult {
    pub loadings: LoadingMatrix,
    /// Transformation matrix T; rotated loadings are L = A (T^-1)', and
    /// abilities counter-rotate as theta' = T' theta.
    pub rotation: Vec<Vec<f64>>,
    /// Factor correlation matrix T'T (oblique only; identity otherwise).
    pub factor_correlations: Vec<Vec<f64>>,
    pub criterion: f64,
    pub iterations: usize,
    pub family: RotationFamily,
}

const ROTATION_EPS: f64 = 1e-7;
const ROTATION_MAX_ITER: usize = 2000;

fn criterion_and_gradient(l: &DMatrix<f64>, weight: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    // partially specified target with zero targets: f = sum_W L^2
    let wl = weight.component_mul(l);
    let f = wl.iter().map(|v| v * v).sum();
    (f, 2.0 * wl)
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Rotates `loadings` to minimize the sum of squared loadings in the
/// target's zero cells (gradient projection algorithm). With an all-free
/// target the criterion is identically zero and the identity rotation is
/// returned by convention.
pub fn target_rotation(
    loadings: &LoadingMatrix,
    target: &[TargetCell],
    family: RotationFamily,
) -> Result<RotationResult> {
    let p = loadings.factors;
    assert!(p >= 2, "target rotation needs at least two factors");
    assert_eq!(target.len(), loadings.values.len());
    let a = loadings.to_dmatrix();
    let weight = DMatrix::from_row_iterator(
        a.nrows(),
        p,
        // row-major input into nalgebra's row iterator
        target.iter().map(|c| match c {
            TargetCell::Zero => 1.0,
            TargetCell::Free => 0.0,
        }),
    );

    let mut t = DMatrix::<f64>::identity(p, p);
    let mut l = a.clone();
    let (mut f, mut gq) = criterion_and_gradient(&l, &weight);
    let mut g = match family {
        RotationFamily::Orthogonal => a.transpose() * &gq,
        RotationFamily::Oblique => {
            let ti = t.clone().try_inverse().expect("identity");
            -(l.transpose() * &gq * ti).transpose()
        }
    };

    let mut al = 1.0_f64;
    let mut iterations = 0;
    let mut converged = false;
    let mut residual = f64::INFINITY;
    for iter in 0..ROTATION_MAX_ITER {
        iterations = iter;
        let gp = match family {
            RotationFamily::Orthogonal => {
                let m = t.transpose() * &g;
                let s = (&m + m.transpose()) * 0.5;
                &g - &t * s
            }
            RotationFamily::Oblique => {
                let col_sums: Vec<f64> = (0..p)
                    .map(|c| t.column(c).component_mul(&g.column(c)).sum())
                    .collect();
                let mut proj = g.clone();
                for c in 0..p {
                    for r in 0..p {
                        proj[(r, c)] -= t[(r, c)] * col_sums[c];
                    }
                }
                proj
            }
        };
        let s = gp.norm();
        residual = s;
        if s < ROTATION_EPS {
            converged = true;
            break;
        }
        al *= 2.0;
        let mut accepted = false;
        for _ in 0..=10 {
            let x = &t - al * &gp;
            let tt = match family {
                RotationFamily::Orthogonal => {
                    let svd = x.svd(true, true);
                    svd.u.as_ref().unwrap() * svd.v_t.as_ref().unwrap()
                }
                RotationFamily::Oblique => {
                    let mut xn = x.clone();
                    for mut col in xn.column_iter_mut() {
                        let norm = col.norm();
                        col /= norm;
                    }
                    xn
                }
            };
            let lt = match tt.clone().try_inverse() {
                Some(ti) => &a * ti.transpose(),
                None => {
                    al /= 2.0;
                    continue;
                }
            };
            let (ft, gqt) = criterion_and_gradient(&lt, &weight);
            if f - ft > 0.5 * s * s * al {
                t = tt;
                l = lt;
                f = ft;
                gq = gqt;
                accepted = true;
                break;
            }
            al /= 2.0;
        }
        if !accepted {
            // cannot improve further at any step length: treat as converged
            converged = true;
            break;
        }
        g = match family {
            RotationFamily::Orthogonal => a.transpose() * &gq,
            RotationFamily::Oblique => {
                let ti = t.clone().try_inverse().expect("step accepted");
                -(l.transpose() * &gq * ti).transpose()
            }
        };
    }
    if !converged {
        return Err(Error::RotationNonConvergence {
            iterations,
            residual,
        });
    }

    let phi = match family {
        RotationFamily::Oblique => t.transpose() * &t,
        RotationFamily::Orthogonal => DMatrix::identity(p, p),
    };
    let rotated = LoadingMatrix::new(
        loadings.items.clone(),
        p,
        l.row_iter()
            .flat_map(|row| row.iter().copied().collect::<Vec<_>>())
            .collect(),
    );
    Ok(RotationResult {
        loadings: rotated,
        rotation: matrix_to_rows(&t),
        factor_correlations: matrix_to_rows(&phi),
        criterion: f,
        iterations,
        family,
    })
}

/// Builds the independent-cluster target from per-item factor labels:
/// each item is free on its own factor and pinned to zero elsewhere.
pub fn cluster_target(assignments: &[usize], factors: usize) -> Vec<TargetCell> {
    assignments
        .iter()
        .flat_map(|&own| {
            (0..factors).map(move |f| {
                if f == own {
                    TargetCell::Free
                } else {
                    TargetCell::Zero
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn correlation_fixture(rho: Vec<f64>, j: usize) -> TetrachoricMatrix {
        TetrachoricMatrix {
            items: (0..j).map(|i| format!("i{i}")).collect(),
            pair_n: vec![100; j * j],
            undefined: vec![false; j * j],
            rho,
        }
    }

    #[test]
    fn identity_matrix_has_unit_eigenvalues() {
        let j = 5;
        let mut rho = vec![0.0; j * j];
        for i in 0..j {
            rho[i * j + i] = 1.0;
        }
        let scree = eigen_scree(&correlation_fixture(rho, j)).unwrap();
        for ev in &scree.eigenvalues {
            assert_abs_diff_eq!(*ev, 1.0, epsilon = 1e-12);
        }
        assert!(!scree.floored);
    }

    #[test]
    fn all_ones_matrix_concentrates_in_one_eigenvalue() {
        let j = 6;
        let scree = eigen_scree(&correlation_fixture(vec![1.0; j * j], j)).unwrap();
        assert_abs_diff_eq!(scree.eigenvalues[0], j as f64, epsilon = 1e-10);
        for ev in &scree.eigenvalues[1..] {
            assert_abs_diff_eq!(*ev, 0.0, epsilon = 1e-10);
        }
        assert!(!scree.floored);
    }

    // Algebraic oracle: block-diagonal correlation matrix with blocks
    // [[1, .6], [.6, 1]] and [[1, .3], [.3, 1]] has characteristic roots
    // 1 +- 0.6 and 1 +- 0.3.
    #[test]
    fn four_by_four_matches_characteristic_roots() {
        #[rustfmt::skip]
        let rho = vec![
            1.0, 0.6, 0.0, 0.0,
            0.6, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.3,
            0.0, 0.0, 0.3, 1.0,
        ];
        let scree = eigen_scree(&correlation_fixture(rho, 4)).unwrap();
        let want = [1.6, 1.3, 0.7, 0.4];
        for (got, want) in scree.eigenvalues.iter().zip(want) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-8);
        }
    }

    #[test]
    fn trace_is_preserved_for_psd_input() {
        #[rustfmt::skip]
        let rho = vec![
            1.0, 0.5, 0.2,
            0.5, 1.0, 0.4,
            0.2, 0.4, 1.0,
        ];
        let scree = eigen_scree(&correlation_fixture(rho, 3)).unwrap();
        let trace: f64 = scree.eigenvalues.iter().sum();
        assert_abs_diff_eq!(trace, 3.0, epsilon = 1e-8);
    }

    #[test]
    fn indefinite_matrix_is_floored_and_flagged() {
        // compound symmetry with rho = -0.6: eigenvalues 1.6, 1.6, -0.2,
        // which no trivariate correlation structure can produce
        #[rustfmt::skip]
        let rho = vec![
            1.0, -0.6, -0.6,
            -0.6, 1.0, -0.6,
            -0.6, -0.6, 1.0,
        ];
        let scree = eigen_scree(&correlation_fixture(rho, 3)).unwrap();
        assert!(scree.floored);
        assert!(scree.eigenvalues.iter().all(|&e| e >= EIGEN_FLOOR));
        assert_abs_diff_eq!(scree.eigenvalues[0], 1.6, epsilon = 1e-10);
        assert_abs_diff_eq!(scree.eigenvalues[2], EIGEN_FLOOR, epsilon = 1e-15);
    }

    #[test]
    fn undefined_entries_are_rejected() {
        let mut fix = correlation_fixture(vec![1.0, 0.2, 0.2, 1.0], 2);
        fix.undefined[1] = true;
        fix.rho[1] = f64::NAN;
        assert!(matches!(eigen_scree(&fix), Err(Error::NonFiniteMatrix)));
    }

    #[test]
    fn factor_count_rules() {
        let one = suggest_factor_count(&[5.1, 0.9, 0.8, 0.5], FactorCountConfig::default());
        assert_eq!(one.suggested, 1);
        assert!(!one.capped);

        let two = suggest_factor_count(&[4.0, 2.5, 0.7, 0.3], FactorCountConfig::default());
        assert_eq!(two.suggested, 2);

        let capped = suggest_factor_count(&[3.0, 1.4, 1.2, 0.9], FactorCountConfig::default());
        assert_eq!(capped.suggested, 2);
        assert!(capped.capped);

        let flat = suggest_factor_count(&[1.05, 1.0, 0.99, 0.96], FactorCountConfig::default());
        assert!(flat.low_confidence);
    }

    fn cluster_loadings() -> LoadingMatrix {
        // items 0-4 load on factor 0, items 5-9 on factor 1
        let mut values = Vec::new();
        for i in 0..10 {
            let load = 0.8 + 0.1 * (i % 5) as f64;
            if i < 5 {
                values.extend([load, 0.0]);
            } else {
                values.extend([0.0, load]);
            }
        }
        LoadingMatrix::new((0..10).map(|i| format!("i{i}")).collect(), 2, values)
    }

    fn cluster_pattern() -> Vec<TargetCell> {
        let assignments: Vec<usize> = (0..10).map(|i| usize::from(i >= 5)).collect();
        cluster_target(&assignments, 2)
    }

    #[test]
    fn already_matching_loadings_rotate_by_identity() {
        let l = cluster_loadings();
        for family in [RotationFamily::Oblique, RotationFamily::Orthogonal] {
            let res = target_rotation(&l, &cluster_pattern(), family).unwrap();
            for r in 0..2 {
                for c in 0..2 {
                    let want = f64::from(u8::from(r == c));
                    assert_abs_diff_eq!(res.rotation[r][c], want, epsilon = 1e-6);
                }
            }
            assert!(res.criterion < 1e-12);
        }
    }

    #[test]
    fn recovers_a_known_rotation() {
        let l_true = cluster_loadings();
        let angle = 25.0_f64.to_radians();
        let r = DMatrix::from_row_slice(
            2,
            2,
            &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()],
        );
        // construct A = L_true * R' so the minimizing transformation is T = R
        let a = l_true.to_dmatrix() * r.transpose();
        let mixed = LoadingMatrix::new(
            l_true.items.clone(),
            2,
            a.row_iter()
                .flat_map(|row| row.iter().copied().collect::<Vec<_>>())
                .collect(),
        );
        let res = target_rotation(&mixed, &cluster_pattern(), RotationFamily::Orthogonal).unwrap();
        let t = DMatrix::from_row_slice(
            2,
            2,
            &[
                res.rotation[0][0],
                res.rotation[0][1],
                res.rotation[1][0],
                res.rotation[1][1],
            ],
        );
        let product = &t * r.transpose();
        for r in 0..2 {
            for c in 0..2 {
                let want = f64::from(u8::from(r == c));
                assert_abs_diff_eq!(product[(r, c)], want, epsilon = 1e-4);
            }
        }
        // rotated loadings recover the clean cluster structure
        for i in 0..10 {
            for f in 0..2 {
                assert_abs_diff_eq!(res.loadings.get(i, f), l_true.get(i, f), epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn all_free_target_returns_identity_by_convention() {
        let l = cluster_loadings();
        let free = vec![TargetCell::Free; 20];
        let res = target_rotation(&l, &free, RotationFamily::Oblique).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let want = f64::from(u8::from(r == c));
                assert_eq!(res.rotation[r][c], want);
            }
        }
        assert_eq!(res.iterations, 0);
    }

    // Rotating loadings and counter-rotating abilities must leave the
    // model-implied response probabilities unchanged.
    #[test]
    fn rotation_preserves_probabilities_under_counter_rotation() {
        use crate::stats::logistic;
        let l_true = cluster_loadings();
        let angle = 35.0_f64.to_radians();
        let r = DMatrix::from_row_slice(
            2,
            2,
            &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()],
        );
        let a = l_true.to_dmatrix() * r.transpose();
        let mixed = LoadingMatrix::new(
            l_true.items.clone(),
            2,
            a.row_iter()
                .flat_map(|row| row.iter().copied().collect::<Vec<_>>())
                .collect(),
        );
        let res = target_rotation(&mixed, &cluster_pattern(), RotationFamily::Oblique).unwrap();
        let t = DMatrix::from_row_slice(
            2,
            2,
            &[
                res.rotation[0][0],
                res.rotation[0][1],
                res.rotation[1][0],
                res.rotation[1][1],
            ],
        );
        let intercepts: Vec<f64> = (0..10).map(|i| -0.5 + 0.1 * i as f64).collect();
        for g1 in -3..=3 {
            for g2 in -3..=3 {
                let theta = DMatrix::from_column_slice(2, 1, &[g1 as f64, g2 as f64]);
                let theta_rot = t.transpose() * &theta;
                for i in 0..10 {
                    let z_orig =
                        a[(i, 0)] * theta[(0, 0)] + a[(i, 1)] * theta[(1, 0)] + intercepts[i];
                    let z_rot = res.loadings.get(i, 0) * theta_rot[(0, 0)]
                        + res.loadings.get(i, 1) * theta_rot[(1, 0)]
                        + intercepts[i];
                    assert_abs_diff_eq!(logistic(z_rot), logistic(z_orig), epsilon = 1e-6);
                }
            }
        }
    }
}
