//! Seeded Monte Carlo estimation of threshold-excursion probabilities.
//!
//! Each trajectory multiplies factors `e_n = U_n + G_n`, where `U_n` is
//! uniform on [1/2, 3/2] and `G_n` follows a normal law truncated from below
//! at `b` whose *truncated* mean and variance are the targets `d_m = a/m`
//! and `sigma^2`. The factor's conditional mean is `1 + d_m`, so the product
//! drifts up slowly; the experiment estimates how often it reaches the
//! threshold `1/alpha` within the monitoring horizon `r_m = floor(c * m^p)`,
//! which must fall to at most `alpha` as `m` grows.
//!
//! Truncation moves the moments of the parent normal, so the parent
//! parameters are recovered by a two-dimensional root-find on the standard
//! truncated-moment identities (`mean = mu0 + s0 * lambda(beta)`,
//! `var = s0^2 * (1 - lambda(beta) * (lambda(beta) - beta))` with
//! `beta = (b - mu0)/s0` and `lambda` the standard normal hazard ratio).
//!
//! # Determinism
//!
//! Every trajectory draws from its own stream, keyed by
//! `(master seed, m, exponent index, trajectory)` through a 64-bit mixing
//! function. Results are therefore identical for any worker count and any
//! scheduling; the grid runner only fans out and merges in index order.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("alpha {0} outside (0, 1)")]
    BadAlpha(f64),
    #[error("sigma {0} must be positive")]
    BadSigma(f64),
    #[error("horizon exponent {0} outside (0, 1)")]
    BadExponent(f64),
    #[error("n_traj must be at least 1")]
    NoTrajectories,
    #[error("empty m grid")]
    EmptyGrid,
    #[error(
        "moment matching did not converge for mean {mean}, var {var}, bound {bound}: residuals ({r1:e}, {r2:e})"
    )]
    MomentMatch {
        mean: f64,
        var: f64,
        bound: f64,
        r1: f64,
        r2: f64,
    },
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Full experiment description; the defaults reproduce the reference
/// cumulative-product setup.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimConfig {
    /// Approximation indices to simulate.
    pub m_grid: Vec<u64>,
    /// Drift scale: `d_m = a / m`.
    pub a: f64,
    /// Target standard deviation of the truncated component.
    pub sigma: f64,
    /// Lower truncation bound of the normal component.
    pub b: f64,
    /// Horizon scale `c` in `r_m = floor(c * m^p)`.
    pub horizon_c: f64,
    /// Horizon exponents; the grid is the product of `m_grid` and this list.
    pub p_exps: Vec<f64>,
    /// Crossing level is `1 / alpha`.
    pub alpha: f64,
    /// Trajectories per (m, p) cell.
    pub n_traj: u32,
    /// Steps simulated per trajectory.
    pub n_end: u32,
    /// Master seed; the only entropy source.
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            m_grid: vec![32, 64, 128, 256, 512, 2048, 4096],
            a: 4.0,
            sigma: 0.35,
            b: -0.5 + 1e-6,
            horizon_c: 4.0,
            p_exps: vec![0.5],
            alpha: 0.05,
            n_traj: 10_000,
            n_end: 500,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(SimError::BadAlpha(self.alpha));
        }
        if self.sigma <= 0.0 {
            return Err(SimError::BadSigma(self.sigma));
        }
        for &p in &self.p_exps {
            if !(0.0 < p && p < 1.0) {
                return Err(SimError::BadExponent(p));
            }
        }
        if self.n_traj == 0 {
            return Err(SimError::NoTrajectories);
        }
        if self.m_grid.is_empty() || self.p_exps.is_empty() {
            return Err(SimError::EmptyGrid);
        }
        Ok(())
    }

    pub fn drift(&self, m: u64) -> f64 {
        self.a / m as f64
    }

    pub fn horizon(&self, m: u64, p: f64) -> u32 {
        ((self.horizon_c * (m as f64).powf(p)).floor() as u32).max(1)
    }

    /// True when some horizon exceeds the simulated window, which would
    /// truncate the within-horizon crossing count.
    pub fn horizon_truncated(&self) -> bool {
        self.m_grid.iter().any(|&m| {
            self.p_exps
                .iter()
                .any(|&p| self.horizon(m, p) > self.n_end)
        })
    }
}

// ---------------------------------------------------------------------------
// Deterministic streams
// ---------------------------------------------------------------------------

/// Final mixing step of the splitmix64 generator: a bijective avalanche on
/// 64 bits, used to turn structured key tuples into uncorrelated seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for one trajectory, fully determined by its key.
pub fn trajectory_stream(seed: u64, m: u64, p_index: usize, traj: u32) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    let h1 = mix64(seed ^ mix64(m));
    let h2 = mix64(h1 ^ mix64(p_index as u64));
    let h3 = mix64(h2 ^ mix64(traj as u64));
    key[0..8].copy_from_slice(&h1.to_le_bytes());
    key[8..16].copy_from_slice(&h2.to_le_bytes());
    key[16..24].copy_from_slice(&h3.to_le_bytes());
    key[24..32].copy_from_slice(&mix64(h3).to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

// ---------------------------------------------------------------------------
// Truncated normal
// ---------------------------------------------------------------------------

/// Parent parameters of a lower-truncated normal achieving prescribed
/// truncated moments.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruncNormalParams {
    /// Parent (pre-truncation) mean.
    pub mu0: f64,
    /// Parent standard deviation.
    pub s0: f64,
    /// Lower truncation bound.
    pub b: f64,
    /// Achieved truncated mean.
    pub mean: f64,
    /// Achieved truncated variance.
    pub var: f64,
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Upper tail `P[Z >= x]` of the standard normal.
fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Hazard ratio `lambda(x) = pdf(x) / sf(x)` with its first two derivatives,
/// computed from the identities `lambda' = lambda * (lambda - x)` and
/// `lambda'' = lambda' * (2 lambda - x) - lambda`.
fn hazard(x: f64) -> (f64, f64, f64) {
    let sf = std_normal_sf(x);
    let lam = if sf > 0.0 {
        std_normal_pdf(x) / sf
    } else {
        // deep right tail: lambda(x) ~ x
        x
    };
    let d1 = lam * (lam - x);
    let d2 = d1 * (2.0 * lam - x) - lam;
    (lam, d1, d2)
}

/// Truncated mean and variance produced by parent parameters.
fn truncated_moments(mu0: f64, s0: f64, b: f64) -> (f64, f64) {
    let beta = (b - mu0) / s0;
    let (lam, d1, _) = hazard(beta);
    (mu0 + s0 * lam, s0 * s0 * (1.0 - d1))
}

const MOMENT_TOL: f64 = 1e-9;

/// Solves for parent parameters achieving the target truncated mean and
/// variance above the bound `b`.
///
/// Damped Newton iteration on the moment identities with analytic partials;
/// if that stalls, a nested bisection (outer on `s0` for the variance,
/// inner on `mu0` for the mean, both monotone) takes over.
pub fn trunc_normal_params(
    target_mean: f64,
    target_var: f64,
    b: f64,
) -> Result<TruncNormalParams, SimError> {
    let residuals = |mu0: f64, s0: f64| {
        let (m, v) = truncated_moments(mu0, s0, b);
        (m - target_mean, v - target_var)
    };
    let pack = |mu0: f64, s0: f64| {
        let (mean, var) = truncated_moments(mu0, s0, b);
        TruncNormalParams {
            mu0,
            s0,
            b,
            mean,
            var,
        }
    };
    let sigma = target_var.sqrt();
    let mut mu0 = target_mean;
    let mut s0 = sigma;
    for _ in 0..200 {
        let (f1, f2) = residuals(mu0, s0);
        if f1.abs() <= MOMENT_TOL && f2.abs() <= MOMENT_TOL {
            return Ok(pack(mu0, s0));
        }
        let beta = (b - mu0) / s0;
        let (lam, d1, d2) = hazard(beta);
        // Jacobian of (mean - target, var - target) in (mu0, s0)
        let j11 = 1.0 - d1;
        let j12 = lam - beta * d1;
        let j21 = s0 * d2;
        let j22 = 2.0 * s0 * (1.0 - d1) + s0 * beta * d2;
        let det = j11 * j22 - j12 * j21;
        if det.abs() < 1e-300 || !det.is_finite() {
            break;
        }
        let step_mu = (f1 * j22 - f2 * j12) / det;
        let step_s = (f2 * j11 - f1 * j21) / det;
        // damp until the residual norm improves and s0 stays positive
        let norm0 = f1.hypot(f2);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand_mu = mu0 - t * step_mu;
            let cand_s = s0 - t * step_s;
            if cand_s > 1e-12 {
                let (g1, g2) = residuals(cand_mu, cand_s);
                if g1.hypot(g2) < norm0 {
                    mu0 = cand_mu;
                    s0 = cand_s;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    // nested bisection fallback: variance is increasing in s0, mean in mu0
    let solve_mu = |s0: f64| -> f64 {
        let (mut lo, mut hi) = (target_mean - 20.0 * s0 - 1.0, target_mean + 20.0 * s0 + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let (m, _) = truncated_moments(mid, s0, b);
            if m < target_mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let (mut lo, mut hi) = (sigma * 1e-3, sigma * 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let mu = solve_mu(mid);
        let (_, v) = truncated_moments(mu, mid, b);
        if v < target_var {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s_fin = 0.5 * (lo + hi);
    let mu_fin = solve_mu(s_fin);
    let (f1, f2) = residuals(mu_fin, s_fin);
    if f1.abs() <= MOMENT_TOL && f2.abs() <= MOMENT_TOL {
        return Ok(pack(mu_fin, s_fin));
    }
    Err(SimError::MomentMatch {
        mean: target_mean,
        var: target_var,
        bound: b,
        r1: f1,
        r2: f2,
    })
}

/// One draw from the truncated law; always at least `b`.
///
/// The parent standard normal is sampled from the stream and rejected below
/// the standardized bound; when the bound sits in the right tail, a
/// translated-exponential proposal keeps acceptance bounded away from zero.
pub fn sample_trunc_normal(params: &TruncNormalParams, rng: &mut ChaCha12Rng) -> f64 {
    let beta = (params.b - params.mu0) / params.s0;
    let z = if beta <= 0.5 {
        // acceptance probability sf(0.5) > 0.3
        loop {
            let z = standard_normal(rng);
            if z >= beta {
                break z;
            }
        }
    } else {
        // exponential proposal with the asymptotically optimal rate
        let rate = 0.5 * (beta + (beta * beta + 4.0).sqrt());
        loop {
            let z = beta - rng.gen::<f64>().ln() / rate;
            let reject = (-(z - rate) * (z - rate) / 2.0).exp();
            if rng.gen::<f64>() <= reject {
                break z;
            }
        }
    };
    (params.mu0 + params.s0 * z).max(params.b)
}

/// Box-Muller standard normal: two uniforms per pair of draws, fully
/// determined by the stream.
fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// Outcome of one (m, p) cell: per-trajectory first-crossing step (1-based)
/// if the product reached `1/alpha` within `n_end`, plus optional subsampled
/// paths for plotting.
#[derive(Debug, Clone)]
pub struct RowResult {
    pub m: u64,
    pub p_index: usize,
    pub first_crossing: Vec<Option<u32>>,
    /// `(trajectory, values E_0..E_n_end)` for requested trajectories.
    pub paths: Vec<(u32, Vec<f64>)>,
}

/// Simulates all trajectories of one (m, p) cell.
///
/// `keep_paths` lists trajectory indices whose full path is retained; other
/// trajectories stop early once they cross.
pub fn simulate_row(
    m: u64,
    p_index: usize,
    config: &SimConfig,
    params: &TruncNormalParams,
    keep_paths: &[u32],
) -> RowResult {
    let threshold = 1.0 / config.alpha;
    let run_one = |t: u32| -> (Option<u32>, Option<Vec<f64>>) {
        let mut rng = trajectory_stream(config.seed, m, p_index, t);
        let keep = keep_paths.contains(&t);
        let mut path = keep.then(|| Vec::with_capacity(config.n_end as usize + 1));
        let mut value = 1.0f64;
        if let Some(p) = path.as_mut() {
            p.push(value);
        }
        let mut crossing = None;
        for n in 1..=config.n_end {
            let u = 0.5 + rng.gen::<f64>();
            let g = sample_trunc_normal(params, &mut rng);
            let e = (u + g).max(1e-6);
            value *= e;
            if let Some(p) = path.as_mut() {
                p.push(value);
            }
            if crossing.is_none() && value >= threshold {
                crossing = Some(n);
                if !keep {
                    break;
                }
            }
        }
        (crossing, path)
    };
    let results: Vec<(Option<u32>, Option<Vec<f64>>)> =
        (0..config.n_traj).into_par_iter().map(run_one).collect();
    let mut first_crossing = Vec::with_capacity(results.len());
    let mut paths = Vec::new();
    for (t, (c, p)) in results.into_iter().enumerate() {
        first_crossing.push(c);
        if let Some(p) = p {
            paths.push((t as u32, p));
        }
    }
    RowResult {
        m,
        p_index,
        first_crossing,
        paths,
    }
}

// ---------------------------------------------------------------------------
// Estimation
// ---------------------------------------------------------------------------

/// Binomial point estimate with its Wilson 95% score interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Estimate {
    pub count: u32,
    pub n: u32,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Two-sided 97.5% standard normal quantile.
const WILSON_Z: f64 = 1.959_963_984_540_054;

/// Wilson score interval at 95%; preferred over the Wald interval, which
/// degenerates near zero counts.
pub fn excursion_estimate(count: u32, n: u32) -> Estimate {
    assert!(n >= 1 && count <= n);
    let nf = n as f64;
    let p = count as f64 / nf;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = WILSON_Z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    Estimate {
        count,
        n,
        p_hat: p,
        ci_lo: (center - half).max(0.0),
        ci_hi: (center + half).min(1.0),
    }
}

/// One line of the experiment report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub m: u64,
    pub p_exp: f64,
    pub r_m: u32,
    pub alpha: f64,
    pub n_traj: u32,
    /// Crossings strictly before the horizon `r_m`.
    pub n_cross: u32,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub seed: u64,
    /// Crossings anywhere in the simulated window, for diagnostics.
    pub n_cross_window: u32,
    /// Wilson half-width, for trend comparisons.
    pub half_width: f64,
}

/// Full grid report; rows ordered by (m, p) grid position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcursionReport {
    pub rows: Vec<ReportRow>,
    pub seed: u64,
}

/// Counts within-horizon crossings from per-trajectory first-crossing steps:
/// a trajectory contributes when its crossing step is strictly below `r_m`.
pub fn crossings_within(first_crossing: &[Option<u32>], r_m: u32) -> u32 {
    first_crossing
        .iter()
        .filter(|c| matches!(c, Some(n) if *n < r_m))
        .count() as u32
}

/// Runs the whole (m, p) grid. Rows are simulated cell by cell; each cell
/// fans trajectories out to the current thread pool, and per-trajectory
/// streams make the outcome independent of the pool size.
pub fn experiment_grid(
    config: &SimConfig,
    keep_paths: &[u32],
) -> Result<(ExcursionReport, Vec<RowResult>), SimError> {
    config.validate()?;
    let mut rows = Vec::with_capacity(config.m_grid.len() * config.p_exps.len());
    let mut raw = Vec::with_capacity(rows.capacity());
    for (p_index, &p_exp) in config.p_exps.iter().enumerate() {
        for &m in &config.m_grid {
            let params = trunc_normal_params(config.drift(m), config.sigma * config.sigma, config.b)?;
            let result = simulate_row(m, p_index, config, &params, keep_paths);
            let r_m = config.horizon(m, p_exp);
            let n_cross = crossings_within(&result.first_crossing, r_m);
            let n_window = result.first_crossing.iter().flatten().count() as u32;
            let est = excursion_estimate(n_cross, config.n_traj);
            rows.push(ReportRow {
                m,
                p_exp,
                r_m,
                alpha: config.alpha,
                n_traj: config.n_traj,
                n_cross,
                p_hat: est.p_hat,
                ci_lo: est.ci_lo,
                ci_hi: est.ci_hi,
                seed: config.seed,
                n_cross_window: n_window,
                half_width: 0.5 * (est.ci_hi - est.ci_lo),
            });
            raw.push(result);
        }
    }
    Ok((
        ExcursionReport {
            rows,
            seed: config.seed,
        },
        raw,
    ))
}

/// Serializes the report to CSV with the stable column set.
pub fn report_to_csv(report: &ExcursionReport) -> String {
    let mut out = String::from("m,p_exp,r_m,alpha,n_traj,n_cross,p_hat,ci_lo,ci_hi,seed\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{}\n",
            r.m, r.p_exp, r.r_m, r.alpha, r.n_traj, r.n_cross, r.p_hat, r.ci_lo, r.ci_hi, r.seed
        ));
    }
    out
}

/// Serializes retained paths of one cell: one line per (trajectory, step).
pub fn paths_to_csv(result: &RowResult) -> String {
    let mut out = String::from("traj,n,value\n");
    for (t, path) in &result.paths {
        for (n, v) in path.iter().enumerate() {
            out.push_str(&format!("{},{},{:.9e}\n", t, n, v));
        }
    }
    out
}
