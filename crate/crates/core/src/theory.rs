//! Monte Carlo check of exact-recovery bounds for direct thresholding over
//! the whole code universe versus thresholding inside a retrieved pool.
//!
//! Each trial fixes true scores τ ± γ, draws Gaussian estimation noise with
//! standard deviation σ/√n per code, and thresholds at τ (ties positive).

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest universe simulated code by code; above this the codes outside
/// the pool are handled in closed form.
pub const EXACT_PATH_MAX_N: usize = 10_000;
pub const WILSON_Z: f64 = 1.96;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("invalid theory config: {0}")]
    InvalidConfig(String),
    #[error("target failure probability {delta} is not above the retrieval miss floor {eps_ret}")]
    InfeasibleTarget { delta: f64, eps_ret: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(rename = "N")]
    pub universe: usize,
    #[serde(rename = "K")]
    pub pool: usize,
    pub s: usize,
    pub gamma: f64,
    #[serde(default)]
    pub tau: f64,
    pub sigma: f64,
    pub n: usize,
    #[serde(default)]
    pub eps_ret: f64,
    pub delta: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_trials() -> usize {
    10_000
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<(), TheoryError> {
        let mut problems = Vec::new();
        if !(0 < self.s && self.s <= self.pool && self.pool <= self.universe) {
            problems.push(format!(
                "need 0 < s <= K <= N (s={}, K={}, N={})",
                self.s, self.pool, self.universe
            ));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            problems.push(format!("gamma must be positive (got {})", self.gamma));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            problems.push(format!("sigma must be positive (got {})", self.sigma));
        }
        if !self.tau.is_finite() {
            problems.push("tau must be finite".into());
        }
        if self.n == 0 {
            problems.push("n must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.eps_ret) {
            problems.push(format!("eps_ret must lie in [0, 1] (got {})", self.eps_ret));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            problems.push(format!("delta must lie in (0, 1) (got {})", self.delta));
        }
        if self.trials == 0 {
            problems.push("trials must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TheoryError::InvalidConfig(problems.join("; ")))
        }
    }

    fn noise_sd(&self) -> f64 {
        self.sigma / (self.n as f64).sqrt()
    }

    fn exponent(&self) -> f64 {
        self.n as f64 * self.gamma * self.gamma / (2.0 * self.sigma * self.sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimPath {
    Exact,
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialOutcome {
    pub direct_success: bool,
    pub rasc_success: bool,
    /// Whether the pool held every true code.
    pub covered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

pub fn wilson_interval(failures: usize, trials: usize, z: f64) -> Interval {
    let n = trials as f64;
    let p = failures as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    Interval {
        lo: (center - half).max(0.0),
        hi: (center + half).min(1.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryResult {
    pub config: TheoryConfig,
    pub path: SimPath,
    pub p_fail_direct_mc: f64,
    pub p_fail_direct_ci: Interval,
    pub p_fail_rasc_mc: f64,
    pub p_fail_rasc_ci: Interval,
    pub bound_direct: f64,
    pub bound_rasc: f64,
    pub n_required_direct: u64,
    /// `None` when δ ≤ ε_ret.
    pub n_required_rasc: Option<u64>,
    pub coupled_trials: usize,
    pub dominance_violations: usize,
}

impl TheoryResult {
    pub fn direct_bound_vacuous(&self) -> bool {
        self.bound_direct >= 1.0
    }

    pub fn rasc_bound_vacuous(&self) -> bool {
        self.bound_rasc >= 1.0
    }

    pub fn se_direct(&self) -> f64 {
        mc_se(self.p_fail_direct_mc, self.config.trials)
    }

    pub fn se_rasc(&self) -> f64 {
        mc_se(self.p_fail_rasc_mc, self.config.trials)
    }
}

pub fn mc_se(p: f64, trials: usize) -> f64 {
    (p * (1.0 - p) / trials as f64).sqrt()
}

pub fn bound_direct(c: &TheoryConfig) -> f64 {
    2.0 * c.universe as f64 * (-c.exponent()).exp()
}

pub fn bound_rasc(c: &TheoryConfig) -> f64 {
    c.eps_ret + 2.0 * c.pool as f64 * (-c.exponent()).exp()
}

fn check_scale(delta: f64, sigma: f64, gamma: f64) -> Result<(), TheoryError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(TheoryError::InvalidConfig(format!("delta must lie in (0, 1) (got {delta})")));
    }
    if !(sigma > 0.0 && gamma > 0.0) {
        return Err(TheoryError::InvalidConfig("sigma and gamma must be positive".into()));
    }
    Ok(())
}

/// ⌈(2σ²/γ²) ln(2N/δ)⌉
pub fn n_required_direct(universe: usize, delta: f64, sigma: f64, gamma: f64) -> Result<u64, TheoryError> {
    check_scale(delta, sigma, gamma)?;
    if universe == 0 {
        return Err(TheoryError::InvalidConfig("N must be at least 1".into()));
    }
    Ok((2.0 * sigma * sigma / (gamma * gamma) * (2.0 * universe as f64 / delta).ln()).ceil() as u64)
}

/// ⌈(2σ²/γ²) ln(2K/(δ − ε_ret))⌉
pub fn n_required_rasc(pool: usize, delta: f64, eps_ret: f64, sigma: f64, gamma: f64) -> Result<u64, TheoryError> {
    check_scale(delta, sigma, gamma)?;
    if pool == 0 {
        return Err(TheoryError::InvalidConfig("K must be at least 1".into()));
    }
    if delta <= eps_ret {
        return Err(TheoryError::InfeasibleTarget { delta, eps_ret });
    }
    Ok((2.0 * sigma * sigma / (gamma * gamma) * (2.0 * pool as f64 / (delta - eps_ret)).ln()).ceil() as u64)
}

/// ln P(a non-member's estimate stays below τ)
fn ln_negative_correct(c: &TheoryConfig) -> f64 {
    let x = c.gamma / c.noise_sd();
    // 1 − Φ(x) = erfc(x/√2)/2
    let tail = 0.5 * libm::erfc(x / std::f64::consts::SQRT_2);
    (-tail).ln_1p()
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Map ranks among the non-members (indices not in sorted `members`) back
/// to universe indices.
fn nonmember_index(rank: usize, sorted_members: &[usize]) -> usize {
    let mut idx = rank;
    for &m in sorted_members {
        if m <= idx {
            idx += 1;
        } else {
            break;
        }
    }
    idx
}

/// One coupled trial on the chosen path.
pub fn simulate_trial_on(c: &TheoryConfig, path: SimPath, rng: &mut ChaCha8Rng) -> Result<TrialOutcome, TheoryError> {
    c.validate()?;
    let sd = c.noise_sd();
    let mut members: Vec<usize> = index::sample(rng, c.universe, c.s).into_vec();
    members.sort_unstable();
    let missed = rng.gen::<f64>() < c.eps_ret;
    let dropped = if missed { Some(members[rng.gen_range(0..c.s)]) } else { None };
    let extra = c.pool - c.s + missed as usize;
    let pool_negatives: Vec<usize> = index::sample(rng, c.universe - c.s, extra)
        .into_iter()
        .map(|r| nonmember_index(r, &members))
        .collect();

    let draw = |rng: &mut ChaCha8Rng| -> f64 { sd * rng.sample::<f64, _>(StandardNormal) };
    // estimate ≥ τ ⇔ noise ≥ −γ for members, noise ≥ γ for non-members
    let member_ok = |e: f64| c.tau + c.gamma + e >= c.tau;
    let negative_ok = |e: f64| c.tau - c.gamma + e < c.tau;

    let (pool_ok, outside_ok) = match path {
        SimPath::Exact => {
            let mut role = vec![0u8; c.universe]; // 0 outside, 1 pool member, 2 pool non-member, 3 dropped member
            for &m in &members {
                role[m] = 1;
            }
            if let Some(d) = dropped {
                role[d] = 3;
            }
            for &i in &pool_negatives {
                role[i] = 2;
            }
            let (mut pool_ok, mut outside_ok) = (true, true);
            for r in role {
                let e = draw(rng);
                match r {
                    1 => pool_ok &= member_ok(e),
                    2 => pool_ok &= negative_ok(e),
                    3 => outside_ok &= member_ok(e),
                    _ => outside_ok &= negative_ok(e),
                }
            }
            (pool_ok, outside_ok)
        }
        SimPath::ClosedForm => {
            let mut pool_ok = true;
            for _ in 0..(c.s - missed as usize) {
                pool_ok &= member_ok(draw(rng));
            }
            for _ in 0..extra {
                pool_ok &= negative_ok(draw(rng));
            }
            let mut outside_ok = true;
            if missed {
                outside_ok &= member_ok(draw(rng));
            }
            let outside_negatives = c.universe - c.pool - missed as usize;
            let p_all = (outside_negatives as f64 * ln_negative_correct(c)).exp();
            outside_ok &= rng.gen::<f64>() < p_all;
            (pool_ok, outside_ok)
        }
    };
    Ok(TrialOutcome {
        direct_success: pool_ok && outside_ok,
        rasc_success: !missed && pool_ok,
        covered: !missed,
    })
}

pub fn default_path(c: &TheoryConfig) -> SimPath {
    if c.universe <= EXACT_PATH_MAX_N {
        SimPath::Exact
    } else {
        SimPath::ClosedForm
    }
}

pub fn simulate_trial(c: &TheoryConfig, rng: &mut ChaCha8Rng) -> Result<TrialOutcome, TheoryError> {
    simulate_trial_on(c, default_path(c), rng)
}

pub fn estimate_recovery(c: &TheoryConfig) -> Result<TheoryResult, TheoryError> {
    estimate_recovery_on(c, default_path(c))
}

/// Run `c.trials` trials, trial `t` on stream `t` of `c.seed`.
pub fn estimate_recovery_on(c: &TheoryConfig, path: SimPath) -> Result<TheoryResult, TheoryError> {
    c.validate()?;
    let (mut fail_direct, mut fail_rasc, mut coupled, mut violations) = (0, 0, 0, 0);
    for t in 0..c.trials {
        let o = simulate_trial_on(c, path, &mut trial_rng(c.seed, t as u64))?;
        fail_direct += !o.direct_success as usize;
        fail_rasc += !o.rasc_success as usize;
        if o.covered {
            coupled += 1;
            if o.direct_success && !o.rasc_success {
                violations += 1;
            }
        }
    }
    let rate = |f: usize| f as f64 / c.trials as f64;
    Ok(TheoryResult {
        config: c.clone(),
        path,
        p_fail_direct_mc: rate(fail_direct),
        p_fail_direct_ci: wilson_interval(fail_direct, c.trials, WILSON_Z),
        p_fail_rasc_mc: rate(fail_rasc),
        p_fail_rasc_ci: wilson_interval(fail_rasc, c.trials, WILSON_Z),
        bound_direct: bound_direct(c),
        bound_rasc: bound_rasc(c),
        n_required_direct: n_required_direct(c.universe, c.delta, c.sigma, c.gamma)?,
        n_required_rasc: match n_required_rasc(c.pool, c.delta, c.eps_ret, c.sigma, c.gamma) {
            Ok(n) => Some(n),
            Err(TheoryError::InfeasibleTarget { .. }) => None,
            Err(e) => return Err(e),
        },
        coupled_trials: coupled,
        dominance_violations: violations,
    })
}

/// Re-run `base` at every n in `grid`.
pub fn sweep_n(base: &TheoryConfig, grid: &[usize]) -> Result<Vec<TheoryResult>, TheoryError> {
    grid.iter()
        .map(|&n| estimate_recovery(&TheoryConfig { n, ..base.clone() }))
        .collect()
}

/// Smallest swept n whose MC failure rate is at most `target` for the direct
/// and pooled predictors respectively.
pub fn crossover_n(results: &[TheoryResult], target: f64) -> (Option<usize>, Option<usize>) {
    let mut sorted: Vec<&TheoryResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.config.n);
    let first = |f: fn(&TheoryResult) -> f64| sorted.iter().find(|r| f(r) <= target).map(|r| r.config.n);
    (first(|r| r.p_fail_direct_mc), first(|r| r.p_fail_rasc_mc))
}

pub const THEORY_CSV_HEADER: [&str; 26] = [
    "N",
    "K",
    "s",
    "gamma",
    "tau",
    "sigma",
    "n",
    "eps_ret",
    "delta",
    "trials",
    "seed",
    "path",
    "p_fail_direct_mc",
    "direct_ci_lo",
    "direct_ci_hi",
    "p_fail_rasc_mc",
    "rasc_ci_lo",
    "rasc_ci_hi",
    "bound_direct",
    "bound_rasc",
    "direct_bound_vacuous",
    "rasc_bound_vacuous",
    "n_required_direct",
    "n_required_rasc",
    "coupled_trials",
    "dominance_violations",
];

pub fn theory_csv_row(r: &TheoryResult) -> Vec<String> {
    let c = &r.config;
    vec![
        c.universe.to_string(),
        c.pool.to_string(),
        c.s.to_string(),
        c.gamma.to_string(),
        c.tau.to_string(),
        c.sigma.to_string(),
        c.n.to_string(),
        c.eps_ret.to_string(),
        c.delta.to_string(),
        c.trials.to_string(),
        c.seed.to_string(),
        match r.path {
            SimPath::Exact => "exact".into(),
            SimPath::ClosedForm => "closed_form".into(),
        },
        r.p_fail_direct_mc.to_string(),
        r.p_fail_direct_ci.lo.to_string(),
        r.p_fail_direct_ci.hi.to_string(),
        r.p_fail_rasc_mc.to_string(),
        r.p_fail_rasc_ci.lo.to_string(),
        r.p_fail_rasc_ci.hi.to_string(),
        r.bound_direct.to_string(),
        r.bound_rasc.to_string(),
        r.direct_bound_vacuous().to_string(),
        r.rasc_bound_vacuous().to_string(),
        r.n_required_direct.to_string(),
        r.n_required_rasc.map(|n| n.to_string()).unwrap_or_else(|| "infeasible".into()),
        r.coupled_trials.to_string(),
        r.dominance_violations.to_string(),
    ]
}

pub fn write_theory_csv(path: &Path, results: &[TheoryResult]) -> std::io::Result<()> {
    let rows: Vec<Vec<String>> = results.iter().map(theory_csv_row).collect();
    crate::corpus::write_csv_rows(path, &THEORY_CSV_HEADER, &rows)
}
