//! Exact certification of e-process properties on finite trees.
//!
//! The central object is the stopped expectation `E[X_tau]`. A nonnegative
//! adapted process is an e-process when this stays at most 1 for every
//! stopping time and every measure of the null family; the asymptotic
//! variant only requires the excess over 1 to vanish along the approximation
//! index, for stopping times bounded by a monitoring horizon. On a finite
//! tree both statements are decidable: stopping times can be enumerated
//! outright, and the supremum over them is also the root value of a
//! backward-induction (Snell) envelope, which gives an independent oracle.
//!
//! The module also provides the one-step drift `delta_n = E[X_{n+1}|F_n] -
//! X_n`, the Doob decomposition `X = M + A` with `A_n` the accumulated
//! drift, an optional-sampling check for certified supermartingales, an
//! exact finite-horizon threshold-crossing bound, and the staircase
//! construction that turns row-wise boundedness thresholds into a
//! nondecreasing horizon sequence.

use thiserror::Error;

use crate::scalar::Real;
use crate::tree::{
    enumerate_stopping_times, BiProcess, MeasureFamily, NodeId, StoppingTime, TreeError,
    TreeProcess, DEFAULT_ENUM_CAP,
};

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("not a supermartingale: drift {drift} > tolerance at node {node} under measure {measure}")]
    NotSupermartingale {
        node: NodeId,
        measure: String,
        drift: f64,
    },
    #[error("alpha {alpha} outside (0, 1)")]
    BadAlpha { alpha: f64 },
    #[error("thresholds must be strictly increasing, got {prev} then {next}")]
    ThresholdsNotIncreasing { prev: usize, next: usize },
    #[error("boundedness precondition fails at row n={n}, column m={m}: {value} > 1 + 1/{n}")]
    BoundViolated { n: usize, m: usize, value: f64 },
    #[error("tolerance schedule has {got} entries for {expected} rows")]
    ToleranceLength { got: usize, expected: usize },
    #[error("empty array")]
    Empty,
}

// ---------------------------------------------------------------------------
// Certificates
// ---------------------------------------------------------------------------

/// Exact per-row certificate: the worst stopped expectation over every
/// stopping time bounded by the horizon and every measure of the family.
#[derive(Debug, Clone)]
pub struct Certificate<R> {
    pub m: u64,
    pub horizon: usize,
    pub max_stopped_expectation: R,
    pub worst_measure: String,
    pub argmax_stopping_time: StoppingTime,
    /// Worst fixed-time expectation per level `0..=horizon`.
    pub per_n: Vec<R>,
    /// Set when the row carries an infinity sentinel: the row is not
    /// integrable and the certificate value is the sentinel itself.
    pub non_integrable: bool,
}

/// Trend of per-row certificates along the approximation index: the slack
/// `max stopped expectation - 1` against a caller-supplied tolerance
/// schedule decreasing to zero.
///
/// The verdict is a finite-range surrogate for an asymptotic statement: true
/// means the slack is within tolerance for every checked row from `m0` on.
#[derive(Debug, Clone)]
pub struct TrendReport<R> {
    pub per_m: Vec<Certificate<R>>,
    pub slack: Vec<R>,
    pub verdict: bool,
    pub m0: Option<usize>,
}

/// Result of the optional-sampling sweep over all enumerated stopping times.
#[derive(Debug, Clone)]
pub struct OptionalSamplingReport<R> {
    /// Max over stopping times and measures of `E[S_tau] - E[S_0]`.
    pub max_gap: R,
    pub argmax_stopping_time: StoppingTime,
    pub worst_measure: String,
    pub stopping_times_checked: usize,
}

/// Exact threshold-crossing bound at a finite horizon.
#[derive(Debug, Clone)]
pub struct VilleBound<R> {
    /// Probability that the running maximum reaches `1/alpha` by the horizon.
    pub crossing_probability: R,
    /// `alpha` times the expectation at the first-crossing stopping time.
    pub markov_bound: R,
    pub holds: bool,
}

/// Doob decomposition of an adapted row under one measure: `E = M + A` with
/// `M` a martingale and `A` predictable (constant across each sibling
/// group), plus the drift and its accumulated positive part.
#[derive(Debug, Clone)]
pub struct DoobParts<R> {
    pub martingale: TreeProcess<R>,
    pub predictable: TreeProcess<R>,
    /// `delta[n]` holds the drift values at the nodes of level `n`.
    pub delta: Vec<Vec<R>>,
    /// Accumulated positive drift, node-wise: at a level-`n` node the sum of
    /// `max(delta, 0)` along the strict ancestor path.
    pub delta_plus_sum: TreeProcess<R>,
}

// ---------------------------------------------------------------------------
// Drift and Doob decomposition
// ---------------------------------------------------------------------------

/// One-step conditional drift at level `n`: `E[X_{n+1} | F_n] - X_n`,
/// one value per level-`n` node.
pub fn drift_delta<R: Real>(
    family: &MeasureFamily<R>,
    measure: usize,
    row: &TreeProcess<R>,
    n: usize,
) -> Result<Vec<R>, VerifierError> {
    let ce = family.conditional_expectation(measure, row, n)?;
    Ok(ce
        .values
        .iter()
        .zip(row.level_values(n))
        .map(|(&c, &x)| c - x)
        .collect())
}

/// Per-row worst expected positive drift at step `n`: for each row of the
/// stack, the max over its measures of `E[max(delta_n, 0)]`. Rows carrying
/// an infinity sentinel report the sentinel (not integrable).
pub fn asp_excess<R: Real>(bi: &BiProcess<R>, n: usize) -> Result<Vec<R>, VerifierError> {
    let mut out = Vec::with_capacity(bi.rows.len());
    for row in &bi.rows {
        if row.process.has_infinite() {
            out.push(R::infinity());
            continue;
        }
        let tree = row.process.tree();
        let mut worst = R::zero();
        for k in 0..row.family.len() {
            let delta = drift_delta(&row.family, k, &row.process, n)?;
            let path = row.family.path_probs(k);
            let excess: R = tree
                .level(n)
                .zip(delta.iter())
                .filter(|&(v, _)| path[v] > R::zero())
                .map(|(v, &d)| path[v] * d.max(R::zero()))
                .sum();
            worst = worst.max(excess);
        }
        out.push(worst);
    }
    Ok(out)
}

/// Doob decomposition of `row` under one measure of the family.
///
/// `A_0 = 0` and `A_{n+1} = A_n + delta_n` lifted node-wise: every child
/// inherits its parent's accumulated drift, which makes `A` predictable.
/// `M = E - A` is then a martingale for that measure.
pub fn doob_decompose<R: Real>(
    family: &MeasureFamily<R>,
    measure: usize,
    row: &TreeProcess<R>,
) -> Result<DoobParts<R>, VerifierError> {
    let tree = row.tree().clone();
    let depth = tree.depth();
    let mut a = vec![R::zero(); tree.node_count()];
    let mut dplus = vec![R::zero(); tree.node_count()];
    let mut delta = Vec::with_capacity(depth);
    for n in 0..depth {
        let d = drift_delta(family, measure, row, n)?;
        for (i, v) in tree.level(n).enumerate() {
            for &c in tree.children(v) {
                a[c] = a[v] + d[i];
                dplus[c] = dplus[v] + d[i].max(R::zero());
            }
        }
        delta.push(d);
    }
    let m_vals: Vec<R> = row
        .values()
        .iter()
        .zip(a.iter())
        .map(|(&e, &ai)| e - ai)
        .collect();
    Ok(DoobParts {
        martingale: TreeProcess::new(tree.clone(), m_vals, false)?,
        predictable: TreeProcess::new(tree.clone(), a, false)?,
        delta,
        delta_plus_sum: TreeProcess::new(tree, dplus, true)?,
    })
}

// ---------------------------------------------------------------------------
// Snell envelope and certificates
// ---------------------------------------------------------------------------

/// Smallest supermartingale dominating `row` when stopping is restricted to
/// times at most `r`, by backward induction: at level `r` the envelope is
/// the row itself; below, it is the max of the row value and the conditional
/// expectation of the next envelope level. Levels beyond `r` carry the row's
/// own values so the result stays a full tree process.
pub fn snell_envelope_bounded<R: Real>(
    family: &MeasureFamily<R>,
    measure: usize,
    row: &TreeProcess<R>,
    r: usize,
) -> Result<TreeProcess<R>, VerifierError> {
    let tree = row.tree().clone();
    if r > tree.depth() {
        return Err(TreeError::HorizonOutOfRange {
            horizon: r,
            depth: tree.depth(),
        }
        .into());
    }
    let mut vals = row.values().to_vec();
    for n in (0..r).rev() {
        // conditional expectation of the already-updated level n + 1
        let current = TreeProcess::new(tree.clone(), vals.clone(), false)?;
        let ce = family.conditional_expectation(measure, &current, n)?;
        for (i, v) in tree.level(n).enumerate() {
            vals[v] = row.value(v).max(ce.values[i]);
        }
    }
    Ok(TreeProcess::new(tree, vals, row.nonnegative())?)
}

/// Exhaustive certificate for one row: enumerates every stopping time with
/// the given horizon and takes the worst stopped expectation over all
/// measures of the family.
pub fn certify_row<R: Real>(
    m: u64,
    family: &MeasureFamily<R>,
    row: &TreeProcess<R>,
    horizon: usize,
) -> Result<Certificate<R>, VerifierError> {
    let taus = enumerate_stopping_times(family.tree(), horizon, DEFAULT_ENUM_CAP)?;
    let mut best = R::neg_infinity();
    let mut worst_measure = 0usize;
    let mut argmax = 0usize;
    for (t, tau) in taus.iter().enumerate() {
        for k in 0..family.len() {
            let val = family.stopped_expectation(k, row, tau)?;
            if val > best {
                best = val;
                worst_measure = k;
                argmax = t;
            }
        }
    }
    let mut per_n = Vec::with_capacity(horizon + 1);
    for n in 0..=horizon {
        let worst_at_n = (0..family.len())
            .map(|k| family.expectation(k, row, n))
            .try_fold(R::neg_infinity(), |acc, v| v.map(|v| acc.max(v)))?;
        per_n.push(worst_at_n);
    }
    Ok(Certificate {
        m,
        horizon,
        max_stopped_expectation: best,
        worst_measure: family.label(worst_measure).to_string(),
        argmax_stopping_time: taus[argmax].clone(),
        per_n,
        non_integrable: row.has_infinite(),
    })
}

/// Certificates for every row of the stack, judged against a tolerance
/// schedule: the verdict is true when there is a cut-off index `m0` such
/// that `slack <= tolerance` for every row from `m0` on, and `m0` is the
/// smallest such index.
pub fn certify_asymptotic<R: Real>(
    bi: &BiProcess<R>,
    tolerance: &[R],
) -> Result<TrendReport<R>, VerifierError> {
    if tolerance.len() != bi.rows.len() {
        return Err(VerifierError::ToleranceLength {
            got: tolerance.len(),
            expected: bi.rows.len(),
        });
    }
    let mut per_m = Vec::with_capacity(bi.rows.len());
    for (i, row) in bi.rows.iter().enumerate() {
        per_m.push(certify_row(
            row.m,
            &row.family,
            &row.process,
            bi.row_horizon(i),
        )?);
    }
    let slack: Vec<R> = per_m
        .iter()
        .map(|c| c.max_stopped_expectation - R::one())
        .collect();
    // smallest m0 with every later row inside tolerance; the last row must
    // qualify or no finite-range verdict can be given
    let mut m0 = None;
    for i in (0..per_m.len()).rev() {
        if per_m[i].non_integrable || slack[i] > tolerance[i] {
            break;
        }
        m0 = Some(i);
    }
    Ok(TrendReport {
        per_m,
        slack,
        verdict: m0.is_some(),
        m0,
    })
}

// ---------------------------------------------------------------------------
// Optional sampling
// ---------------------------------------------------------------------------

/// For a certified nonnegative supermartingale, sweeps every stopping time
/// with the given horizon and reports the largest value of
/// `E[S_tau] - E[S_0]` — which must be at most zero (within tolerance).
///
/// Errors if the input is not node-wise a supermartingale under every
/// measure of the family.
pub fn optional_sampling_check<R: Real>(
    family: &MeasureFamily<R>,
    row: &TreeProcess<R>,
    horizon: usize,
) -> Result<OptionalSamplingReport<R>, VerifierError> {
    let tree = family.tree();
    for k in 0..family.len() {
        for n in 0..tree.depth() {
            let d = drift_delta(family, k, row, n)?;
            for (i, v) in tree.level(n).enumerate() {
                if d[i] > R::exact_tol() {
                    return Err(VerifierError::NotSupermartingale {
                        node: v,
                        measure: family.label(k).to_string(),
                        drift: d[i].to_f64().unwrap_or(f64::NAN),
                    });
                }
            }
        }
    }
    let taus = enumerate_stopping_times(tree, horizon, DEFAULT_ENUM_CAP)?;
    let mut max_gap = R::neg_infinity();
    let mut argmax = 0usize;
    let mut worst_measure = 0usize;
    for (t, tau) in taus.iter().enumerate() {
        for k in 0..family.len() {
            let gap = family.stopped_expectation(k, row, tau)? - row.value(0);
            if gap > max_gap {
                max_gap = gap;
                argmax = t;
                worst_measure = k;
            }
        }
    }
    Ok(OptionalSamplingReport {
        max_gap,
        argmax_stopping_time: taus[argmax].clone(),
        worst_measure: family.label(worst_measure).to_string(),
        stopping_times_checked: taus.len(),
    })
}

// ---------------------------------------------------------------------------
// Threshold-crossing bound
// ---------------------------------------------------------------------------

/// The stopping time "first level at which the row reaches `threshold`, or
/// the horizon if it never does".
pub fn first_crossing_time<R: Real>(
    row: &TreeProcess<R>,
    threshold: R,
    horizon: usize,
) -> Result<StoppingTime, VerifierError> {
    let tree = row.tree();
    let mut stop_nodes = Vec::new();
    let mut stack = vec![0 as NodeId];
    while let Some(v) = stack.pop() {
        if row.value(v) >= threshold || tree.level_of(v) == horizon {
            stop_nodes.push(v);
        } else {
            stack.extend_from_slice(tree.children(v));
        }
    }
    Ok(StoppingTime::new(tree, stop_nodes, horizon)?)
}

/// Exact finite-horizon excursion bound for a nonnegative row under one
/// measure: the probability that the running maximum reaches `1/alpha` by
/// the horizon, against `alpha` times the expectation at the first-crossing
/// stopping time. The bound is an instance of Markov's inequality, since
/// the crossing event forces the stopped value to be at least `1/alpha`.
pub fn ville_bound_exact<R: Real>(
    family: &MeasureFamily<R>,
    measure: usize,
    row: &TreeProcess<R>,
    horizon: usize,
    alpha: R,
) -> Result<VilleBound<R>, VerifierError> {
    if alpha <= R::zero() || alpha >= R::one() {
        return Err(VerifierError::BadAlpha {
            alpha: alpha.to_f64().unwrap_or(f64::NAN),
        });
    }
    let threshold = R::one() / alpha;
    let tau = first_crossing_time(row, threshold, horizon)?;
    let path = family.path_probs(measure);
    let crossing_probability: R = tau
        .stop_nodes()
        .iter()
        .filter(|&&v| row.value(v) >= threshold)
        .map(|&v| path[v])
        .sum();
    let markov_bound = alpha * family.stopped_expectation(measure, row, &tau)?;
    Ok(VilleBound {
        crossing_probability,
        markov_bound,
        holds: crossing_probability <= markov_bound + R::exact_tol(),
    })
}

// ---------------------------------------------------------------------------
// Horizon staircase
// ---------------------------------------------------------------------------

/// Builds a nondecreasing horizon sequence from row-wise boundedness
/// thresholds.
///
/// `x[n - 1][m]` is a bound value for row index `n >= 1` and column `m`;
/// `thresholds[n - 1]` is the column `N_n` from which row `n` satisfies
/// `x <= 1 + 1/n`. The output sets `r_m = n` on the block
/// `N_n <= m < N_{n+1}` (and 1 before `N_1`), so that every covered column
/// satisfies `x[r_m][m] <= 1 + 1/r_m`. Both the precondition and the
/// resulting bound are checked exactly; violations name the offending entry.
pub fn diagonal_horizon<R: Real>(
    x: &[Vec<R>],
    thresholds: &[usize],
) -> Result<Vec<usize>, VerifierError> {
    if x.is_empty() || thresholds.is_empty() {
        return Err(VerifierError::Empty);
    }
    for w in thresholds.windows(2) {
        if w[1] <= w[0] {
            return Err(VerifierError::ThresholdsNotIncreasing {
                prev: w[0],
                next: w[1],
            });
        }
    }
    let n_rows = x.len().min(thresholds.len());
    let m_count = x[0].len();
    for n in 1..=n_rows {
        let row = &x[n - 1];
        let bound = R::one() + R::one() / R::from_usize(n).unwrap();
        for (m, &value) in row
            .iter()
            .enumerate()
            .take(m_count)
            .skip(thresholds[n - 1])
        {
            if value > bound + R::exact_tol() {
                return Err(VerifierError::BoundViolated {
                    n,
                    m,
                    value: value.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
    }
    let mut r = Vec::with_capacity(m_count);
    for m in 0..m_count {
        // largest n with N_n <= m, or 1 before the first threshold
        let n = thresholds.partition_point(|&t| t <= m).min(n_rows);
        r.push(n.max(1));
    }
    // the construction must deliver its own bound on every covered column
    for m in thresholds[0]..m_count {
        let n = r[m];
        let bound = R::one() + R::one() / R::from_usize(n).unwrap();
        if x[n - 1][m] > bound + R::exact_tol() {
            return Err(VerifierError::BoundViolated {
                n,
                m,
                value: x[n - 1][m].to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(r)
}
