//! Builders for the standard asymptotic e-process constructions.
//!
//! Given a row of e-variable factors whose conditional mean may exceed 1 by
//! a small drift bound `d_m`, the cumulative product is an e-process only up
//! to a monitoring horizon `r_m`; it stays asymptotically valid exactly when
//! `r_m * d_m` vanishes, which is what [`horizon_from_drift`] checks for the
//! power rule `r_m = floor(c * m^p)`. The diagonal product shows what goes
//! wrong without the horizon discipline: its expectation grows like
//! `(1 + d)^m`, so certification must fail. Time mixtures trade the product
//! for a weighted sum with an exact stopped-expectation bound, and
//! calibration turns arrays of approximate p-values into e-process rows
//! through a nonincreasing unit-integral function, with the capped/uncapped
//! dichotomy controlling integrability at p = 0.

use thiserror::Error;

use crate::scalar::Real;
use crate::tree::{
    BiProcess, DriftSequence, Horizon, HorizonSequence, MeasureFamily, NodeId, ProcessRow,
    TreeError, TreeProcess,
};

#[derive(Debug, Error)]
pub enum ConstructionError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("negative factor {value} at node {node}")]
    NegativeFactor { node: NodeId, value: f64 },
    #[error("horizon exponent {p} outside (0, 1)")]
    BadExponent { p: f64 },
    #[error("weight row {m} sums to {sum} > 1")]
    WeightSum { m: usize, sum: f64 },
    #[error("negative weight {value} in row {m}")]
    NegativeWeight { m: usize, value: f64 },
    #[error("weight row {m} has {got} entries, need at least {needed}")]
    WeightLength { m: usize, got: usize, needed: usize },
    #[error("calibrator kappa {kappa} outside (0, 1)")]
    BadKappa { kappa: f64 },
    #[error("calibrator cap {cap} must be positive")]
    BadCap { cap: f64 },
    #[error("calibrator integral {integral} exceeds 1")]
    NotACalibrator { integral: f64 },
    #[error("p-array row {m} is empty or absent")]
    EmptyRow { m: u64 },
    #[error("diagonal factor list of length {got} too short for index {needed}")]
    FactorsTooShort { got: usize, needed: usize },
}

// ---------------------------------------------------------------------------
// Cumulative products and horizons
// ---------------------------------------------------------------------------

/// One construction row: adapted factors and the bound on how far their
/// node-wise conditional mean may exceed 1.
#[derive(Debug, Clone)]
pub struct EVariableRowSpec<R> {
    pub factors: TreeProcess<R>,
    pub drift_bound: R,
}

/// Running product of the factors along each path: the value at a node is
/// the product of the factor values on the root-to-node path.
pub fn cumulative_product<R: Real>(
    factors: &TreeProcess<R>,
) -> Result<TreeProcess<R>, ConstructionError> {
    let tree = factors.tree().clone();
    let mut vals = vec![R::zero(); tree.node_count()];
    for v in 0..tree.node_count() {
        let f = factors.value(v);
        if f < R::zero() {
            return Err(ConstructionError::NegativeFactor {
                node: v,
                value: f.to_f64().unwrap_or(f64::NAN),
            });
        }
        vals[v] = match tree.parent(v) {
            Some(p) => vals[p] * f,
            None => f,
        };
    }
    Ok(TreeProcess::new(tree, vals, true)?)
}

/// Power-rule horizon selection together with its decay diagnostic.
#[derive(Debug, Clone)]
pub struct HorizonReport<R> {
    pub horizon: HorizonSequence,
    /// `r_m * d_m` per row — the quantity that must vanish.
    pub products: Vec<R>,
    /// Whether the product sequence is nonincreasing over the given range.
    pub decay_monotone: bool,
}

/// Picks `r_m = max(1, floor(c * m^p))` for `p` in (0, 1) and reports the
/// products `r_m * d_m` with a monotone-decay verdict on the given range.
pub fn horizon_from_drift<R: Real>(
    drift: &DriftSequence<R>,
    c: f64,
    p: f64,
) -> Result<HorizonReport<R>, ConstructionError> {
    if !(0.0 < p && p < 1.0) {
        return Err(ConstructionError::BadExponent { p });
    }
    let mut entries = Vec::with_capacity(drift.ms.len());
    let mut products = Vec::with_capacity(drift.ms.len());
    for (&m, &d) in drift.ms.iter().zip(drift.entries.iter()) {
        let r = ((c * (m as f64).powf(p)).floor() as usize).max(1);
        entries.push(Horizon::Finite(r));
        products.push(R::from_usize(r).unwrap() * d);
    }
    let decay_monotone = products
        .windows(2)
        .all(|w| w[1] <= w[0] + R::exact_tol());
    Ok(HorizonReport {
        horizon: HorizonSequence { entries },
        products,
        decay_monotone,
    })
}

/// Product of the diagonal factors up to `max(m, n)` — the construction
/// whose certification must fail, since the exponent never stops growing
/// with the row index.
pub fn diagonal_product<R: Real>(
    factors: &[R],
    m: usize,
    n: usize,
) -> Result<R, ConstructionError> {
    let top = m.max(n);
    if factors.len() <= top {
        return Err(ConstructionError::FactorsTooShort {
            got: factors.len(),
            needed: top + 1,
        });
    }
    for (i, &f) in factors.iter().enumerate().take(top + 1) {
        if f < R::zero() {
            return Err(ConstructionError::NegativeFactor {
                node: i,
                value: f.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(factors.iter().take(top + 1).copied().fold(R::one(), |a, b| a * b))
}

/// Realizes row `m` of the diagonal product with deterministic factors as a
/// process on a single-path tree of the given depth, ready for
/// certification. The row value at time `n` is the product up to
/// `max(m, n)`.
pub fn diagonal_row<R: Real>(
    factors: &[R],
    m: usize,
    depth: usize,
) -> Result<ProcessRow<R>, ConstructionError> {
    let tree = crate::tree::OutcomeTree::chain(depth);
    let mut levels = Vec::with_capacity(depth + 1);
    for n in 0..=depth {
        levels.push(vec![diagonal_product(factors, m, n)?]);
    }
    let process = TreeProcess::from_levels(tree.clone(), &levels, true)?;
    let family = MeasureFamily::fair(tree, "point");
    Ok(ProcessRow {
        m: m as u64,
        family,
        process,
    })
}

// ---------------------------------------------------------------------------
// Time mixtures
// ---------------------------------------------------------------------------

/// Mixture weights per row, each row summing to at most 1, with an optional
/// matching array of per-step excesses used by the exact stopped bound.
#[derive(Debug, Clone)]
pub struct WeightArray<R> {
    weights: Vec<Vec<R>>,
    pub excess: Option<Vec<Vec<R>>>,
}

impl<R: Real> WeightArray<R> {
    pub fn new(weights: Vec<Vec<R>>) -> Result<Self, ConstructionError> {
        for (m, row) in weights.iter().enumerate() {
            let mut sum = R::zero();
            for &w in row {
                if w < R::zero() {
                    return Err(ConstructionError::NegativeWeight {
                        m,
                        value: w.to_f64().unwrap_or(f64::NAN),
                    });
                }
                sum += w;
            }
            if sum > R::one() + R::exact_tol() {
                return Err(ConstructionError::WeightSum {
                    m,
                    sum: sum.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(WeightArray {
            weights,
            excess: None,
        })
    }

    pub fn row(&self, m: usize) -> &[R] {
        &self.weights[m]
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Weighted running sum of the factors: the value at a level-`n` node is
/// `sum over i <= n` of `w[i]` times the factor at the level-`i` ancestor.
/// Nondecreasing in `n` whenever the factors are nonnegative.
pub fn time_mixture<R: Real>(
    weights: &WeightArray<R>,
    m: usize,
    factors: &TreeProcess<R>,
) -> Result<TreeProcess<R>, ConstructionError> {
    let tree = factors.tree().clone();
    let w = weights.row(m);
    if w.len() < tree.depth() + 1 {
        return Err(ConstructionError::WeightLength {
            m,
            got: w.len(),
            needed: tree.depth() + 1,
        });
    }
    let mut vals = vec![R::zero(); tree.node_count()];
    for v in 0..tree.node_count() {
        let level = tree.level_of(v);
        let term = w[level] * factors.value(v);
        vals[v] = match tree.parent(v) {
            Some(p) => vals[p] + term,
            None => term,
        };
    }
    Ok(TreeProcess::new(tree, vals, factors.nonnegative())?)
}

/// Per-step excess of the factors: for each level `i`, the positive part of
/// `max over measures of E[e_i] - 1`. This is the epsilon entering the
/// mixture's exact stopped-expectation bound.
pub fn mixture_excess<R: Real>(
    family: &MeasureFamily<R>,
    factors: &TreeProcess<R>,
    horizon: usize,
) -> Result<Vec<R>, ConstructionError> {
    let mut out = Vec::with_capacity(horizon + 1);
    for i in 0..=horizon {
        let mut worst = R::zero();
        for k in 0..family.len() {
            let e = family.expectation(k, factors, i)?;
            worst = worst.max(e - R::one());
        }
        out.push(worst);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Grid size for the unit-integral admission check.
const QUADRATURE_POINTS: usize = 100_000;
const QUADRATURE_TOL: f64 = 1e-6;

/// A p-to-e calibrator from the power family: nonincreasing on the
/// nonnegative half-line, zero above 1, integrating to at most 1 over the
/// unit interval. The capped variant stays bounded — and therefore
/// integrable — at p = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibratorSpec<R> {
    /// `f(p) = kappa * p^(kappa - 1)`, unbounded as p drops to 0.
    Power { kappa: R },
    /// `f(p) = min(kappa * p^(kappa - 1), cap)`.
    TruncatedPower { kappa: R, cap: R },
}

impl<R: Real> CalibratorSpec<R> {
    pub fn power(kappa: R) -> Result<Self, ConstructionError> {
        Self::check_kappa(kappa)?;
        Ok(CalibratorSpec::Power { kappa })
    }

    pub fn truncated_power(kappa: R, cap: R) -> Result<Self, ConstructionError> {
        Self::check_kappa(kappa)?;
        if cap <= R::zero() {
            return Err(ConstructionError::BadCap {
                cap: cap.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(CalibratorSpec::TruncatedPower { kappa, cap })
    }

    fn check_kappa(kappa: R) -> Result<(), ConstructionError> {
        if kappa <= R::zero() || kappa >= R::one() {
            return Err(ConstructionError::BadKappa {
                kappa: kappa.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(())
    }

    /// Evaluates the calibrator; `p = 0` yields the infinity sentinel for
    /// the unbounded variant and the cap for the bounded one.
    pub fn eval(&self, p: R) -> R {
        if p > R::one() {
            return R::zero();
        }
        match *self {
            CalibratorSpec::Power { kappa } => {
                if p <= R::zero() {
                    R::infinity()
                } else {
                    kappa * p.powf(kappa - R::one())
                }
            }
            CalibratorSpec::TruncatedPower { kappa, cap } => {
                if p <= R::zero() {
                    cap
                } else {
                    (kappa * p.powf(kappa - R::one())).min(cap)
                }
            }
        }
    }

    /// Midpoint-rule integral over the unit interval; must be at most 1
    /// (within quadrature tolerance) for the spec to be a calibrator.
    pub fn quadrature_integral(&self) -> f64 {
        let n = QUADRATURE_POINTS;
        let h = 1.0 / n as f64;
        (0..n)
            .map(|i| {
                let p = R::of((i as f64 + 0.5) * h);
                self.eval(p).to_f64().unwrap_or(f64::INFINITY) * h
            })
            .sum()
    }

    /// Errors unless the quadrature integral is at most `1 + 1e-6`.
    pub fn admit(&self) -> Result<(), ConstructionError> {
        let integral = self.quadrature_integral();
        if integral > 1.0 + QUADRATURE_TOL {
            return Err(ConstructionError::NotACalibrator { integral });
        }
        Ok(())
    }
}

/// Triangular array of approximate p-values: `rows[i]` holds
/// `p_{m, m}, p_{m, m+1}, ...` for `m = first_m + i`.
#[derive(Debug, Clone)]
pub struct PArray<R> {
    pub first_m: u64,
    pub rows: Vec<Vec<R>>,
}

impl<R: Real> PArray<R> {
    pub fn row(&self, m: u64) -> Option<&[R]> {
        let i = m.checked_sub(self.first_m)? as usize;
        self.rows.get(i).map(|r| r.as_slice())
    }
}

/// Running supremum of row `m`, capped at 2. The cap makes the statistic
/// finite without affecting any sub-1 threshold comparison.
pub fn supremum_p<R: Real>(p: &PArray<R>, m: u64) -> Result<R, ConstructionError> {
    let row = p.row(m).ok_or(ConstructionError::EmptyRow { m })?;
    if row.is_empty() {
        return Err(ConstructionError::EmptyRow { m });
    }
    let sup = row.iter().copied().fold(R::neg_infinity(), R::max);
    Ok(sup.min(R::of(2.0)))
}

/// Calibrates a deterministic p-array row-wise: row `m` becomes the process
/// `n -> f(p_{m, m+n})` on a single-path tree. Unbounded calibrators turn
/// zero p-values into the infinity sentinel; such rows are flagged rather
/// than rejected, since non-integrability is exactly what certification
/// must detect.
pub fn calibrate_array<R: Real>(
    p: &PArray<R>,
    f: &CalibratorSpec<R>,
) -> Result<BiProcess<R>, ConstructionError> {
    f.admit()?;
    let mut rows = Vec::with_capacity(p.rows.len());
    for (i, prow) in p.rows.iter().enumerate() {
        let m = p.first_m + i as u64;
        if prow.is_empty() {
            return Err(ConstructionError::EmptyRow { m });
        }
        let depth = prow.len() - 1;
        let tree = crate::tree::OutcomeTree::chain(depth);
        let levels: Vec<Vec<R>> = prow.iter().map(|&pv| vec![f.eval(pv)]).collect();
        let process = TreeProcess::from_levels(tree.clone(), &levels, true)?;
        let family = MeasureFamily::fair(tree, "point");
        rows.push(ProcessRow {
            m,
            family,
            process,
        });
    }
    Ok(BiProcess::new(rows))
}

/// Calibrates tree-valued p-value rows node-wise, preserving each row's
/// measure family. Used when the p-values are genuinely random (the array
/// form covers only deterministic instances).
pub fn calibrate_rows<R: Real>(
    p_rows: Vec<ProcessRow<R>>,
    f: &CalibratorSpec<R>,
) -> Result<BiProcess<R>, ConstructionError> {
    f.admit()?;
    let rows = p_rows
        .into_iter()
        .map(|r| ProcessRow {
            m: r.m,
            family: r.family,
            process: r.process.map(|pv| f.eval(pv), true),
        })
        .collect();
    Ok(BiProcess::new(rows))
}

// ---------------------------------------------------------------------------
// Empirical strong/weak p-variable checks
// ---------------------------------------------------------------------------

/// Empirical check of the p-variable characterizations on samples of the
/// capped running supremum `q_m`.
///
/// The strong form requires `sup over alpha` of `P[q_m <= alpha] / alpha`
/// to fall to 1 along `m`; the weak form requires it only pointwise at each
/// fixed `alpha`. An atom at zero breaks the strong form at small `alpha`
/// while leaving every fixed-`alpha` ratio eventually controlled.
#[derive(Debug, Clone)]
pub struct StrongPReport<R> {
    pub alpha_grid: Vec<R>,
    /// `ratios[i][j]` = empirical `P[q <= alpha_j] / alpha_j` for row `i`.
    pub ratios: Vec<Vec<R>>,
    /// Row-wise `sup over alpha` of the ratio.
    pub sup_ratio: Vec<R>,
}

pub fn check_strong_p<R: Real>(samples: &[Vec<R>], alpha_grid: &[R]) -> StrongPReport<R> {
    let mut ratios = Vec::with_capacity(samples.len());
    let mut sup_ratio = Vec::with_capacity(samples.len());
    for qs in samples {
        let n = R::from_usize(qs.len().max(1)).unwrap();
        let row: Vec<R> = alpha_grid
            .iter()
            .map(|&a| {
                let count = qs.iter().filter(|&&q| q <= a).count();
                R::from_usize(count).unwrap() / (n * a)
            })
            .collect();
        let sup = row.iter().copied().fold(R::zero(), R::max);
        ratios.push(row);
        sup_ratio.push(sup);
    }
    StrongPReport {
        alpha_grid: alpha_grid.to_vec(),
        ratios,
        sup_ratio,
    }
}

/// True when the sequence stays at or below `1 + tolerance` from some index
/// on (and that index exists); the finite-range surrogate used for both the
/// strong (on `sup_ratio`) and weak (on a fixed-`alpha` column) verdicts.
pub fn eventually_below_one<R: Real>(values: &[R], tolerance: &[R]) -> Option<usize> {
    assert_eq!(values.len(), tolerance.len());
    let mut m0 = None;
    for i in (0..values.len()).rev() {
        if values[i] > R::one() + tolerance[i] {
            break;
        }
        m0 = Some(i);
    }
    m0
}

/// Builds the measure family and p-value process for one row of the
/// atom-at-zero example: at time 1 the p-value is 0 with probability
/// `atom_mass` and otherwise uniform on the remaining grid of
/// `grid_atoms` equally weighted values spread over (0, 1].
///
/// Levels beyond 1 repeat the drawn value, so the row's running supremum is
/// the drawn value itself.
pub fn atom_p_row<R: Real>(
    m: u64,
    atom_mass: R,
    grid_atoms: usize,
    depth: usize,
) -> Result<ProcessRow<R>, ConstructionError> {
    assert!(depth >= 1 && grid_atoms >= 1);
    let width = grid_atoms + 1;
    let mut branching = vec![vec![width]];
    for _ in 1..depth {
        branching.push(vec![1; width]);
    }
    let tree = crate::tree::OutcomeTree::build(&branching)?;
    // outcome values: index 0 is the atom at zero, the rest a uniform grid
    let mut outcome = vec![R::zero()];
    for j in 1..=grid_atoms {
        outcome.push(R::from_usize(j).unwrap() / R::from_usize(grid_atoms).unwrap());
    }
    let rest = (R::one() - atom_mass) / R::from_usize(grid_atoms).unwrap();
    let mut branch_probs = vec![{
        let mut bp = vec![atom_mass];
        bp.extend(std::iter::repeat_n(rest, grid_atoms));
        bp
    }];
    for _ in 1..depth {
        for _ in 0..width {
            branch_probs.push(vec![R::one()]);
        }
    }
    let family = MeasureFamily::from_branch_probs(tree.clone(), "atom", &branch_probs)?;
    // level 0 is the pre-draw placeholder p = 1; all later levels carry the draw
    let mut values = vec![R::one()];
    for l in 1..=depth {
        let _ = l;
        values.extend(outcome.iter().copied());
    }
    let process = TreeProcess::new(tree, values, true)?;
    Ok(ProcessRow {
        m,
        family,
        process,
    })
}
