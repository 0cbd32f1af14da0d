//! Multilevel Monte Carlo estimators for level-indexed random quantities.
//!
//! Levels are 1-based; `X_0 = 0`. A sampler maps `(level, sample index)` to
//! a fixed-length vector (a scalar, or the entries of a tensor). Sample `j`
//! always denotes the same realization `ω_j` at every level, which is what
//! couples the two terms of each difference.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Coupling {
    /// Both terms of every difference use the same `ω_j`, and all levels reuse `ω_1, ω_2, …`.
    Shared,
    /// Level `L` uses `ω_j` for `j < m_L`, level `l < L` uses `m_{l+1} <= j < m_l`.
    Independent,
}

/// Level hierarchy with RVE sizes `η_1 < … < η_L` and counts `m_1 >= … >= m_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPlan {
    pub eta: Vec<f64>,
    pub m: Vec<usize>,
    pub beta: f64,
    pub epsilon: f64,
    pub alpha: Vec<f64>,
}

impl LevelPlan {
    pub fn new(eta: Vec<f64>, m: Vec<usize>, beta: f64, epsilon: f64) -> Result<Self> {
        let l = eta.len();
        let plan = Self {
            alpha: vec![1.0 / l as f64; l],
            eta,
            m,
            beta,
            epsilon,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn with_alpha(mut self, alpha: Vec<f64>) -> Result<Self> {
        self.alpha = alpha;
        self.validate()?;
        Ok(self)
    }

    pub fn levels(&self) -> usize {
        self.eta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.eta.len();
        if l == 0 || self.m.len() != l || self.alpha.len() != l {
            return Err(Error::Plan(format!(
                "eta, m and alpha must share a non-zero length, got {}, {}, {}",
                l,
                self.m.len(),
                self.alpha.len()
            )));
        }
        if self.eta.iter().any(|e| !(*e > 0.0)) || self.eta.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Plan(format!("eta must be positive and strictly increasing, got {:?}", self.eta)));
        }
        if self.m.contains(&0) || self.m.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Plan(format!("m must be positive and non-increasing, got {:?}", self.m)));
        }
        if !(self.epsilon > 0.0) || !(self.epsilon < self.eta[0]) {
            return Err(Error::Plan(format!(
                "epsilon must satisfy 0 < epsilon < eta_1, got {} vs {}",
                self.epsilon, self.eta[0]
            )));
        }
        if !(self.beta > 0.0) || self.alpha.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Plan("beta and alpha must be positive".into()));
        }
        Ok(())
    }

    /// Degrees of freedom of one RVE solve at level `l` (1-based): `(η_l/ε)^d`.
    pub fn dof(&self, l: usize, d: u32) -> f64 {
        (self.eta[l - 1] / self.epsilon).powi(d as i32)
    }

    /// `Σ_l samples_l (η_l/ε)^d`.
    pub fn cost_of(&self, samples: &[usize], d: u32) -> f64 {
        samples.iter().enumerate().map(|(k, &s)| s as f64 * self.dof(k + 1, d)).sum()
    }

    /// Realizations consumed per repetition, i.e. the size of a seed block.
    pub fn block_size(&self) -> u64 {
        self.m[0] as u64
    }
}

/// Unrounded, unscaled sample counts of the equilibrated allocation:
/// `m_1 = (η_L/ε)^β E[A²] α_1⁻²`, `m_l = (η_L/η_{l-1})^β α_l⁻²`.
pub fn raw_sample_counts(beta: f64, epsilon: f64, eta: &[f64], alpha: &[f64], second_moment: f64) -> Vec<f64> {
    let eta_l = eta[eta.len() - 1];
    (0..eta.len())
        .map(|k| {
            if k == 0 {
                (eta_l / epsilon).powf(beta) * second_moment / (alpha[0] * alpha[0])
            } else {
                (eta_l / eta[k - 1]).powf(beta) / (alpha[k] * alpha[k])
            }
        })
        .collect()
}

fn ceil_tol(x: f64) -> f64 {
    (x - 1e-9 * x.abs().max(1.0)).ceil()
}

/// Equilibrated allocation scaled so that level `L` receives `m_last` samples.
///
/// `alpha = None` uses `α_l = 1/L`.
pub fn plan_samples(
    beta: f64,
    epsilon: f64,
    eta: &[f64],
    alpha: Option<&[f64]>,
    second_moment: f64,
    m_last: usize,
) -> Result<LevelPlan> {
    let l = eta.len();
    if l == 0 || !(beta > 0.0) || !(second_moment > 0.0) {
        return Err(Error::Plan("plan needs at least one level, beta > 0 and E[A*^2] > 0".into()));
    }
    if m_last < 1 {
        return Err(Error::Plan("m_L must be at least 1".into()));
    }
    let alpha = alpha.map(<[f64]>::to_vec).unwrap_or_else(|| vec![1.0 / l as f64; l]);
    if alpha.len() != l {
        return Err(Error::Plan("alpha length differs from eta".into()));
    }
    let raw = raw_sample_counts(beta, epsilon, eta, &alpha, second_moment);
    let scale = m_last as f64 / raw[l - 1];
    let mut m = Vec::with_capacity(l);
    for r in &raw {
        let v = ceil_tol(r * scale);
        if !(v >= 1.0) || !v.is_finite() {
            return Err(Error::Plan(format!("allocation produced a level with {v} samples")));
        }
        m.push(v as usize);
    }
    m[l - 1] = m_last;
    for k in (0..l - 1).rev() {
        m[k] = m[k].max(m[k + 1]);
    }
    LevelPlan::new(eta.to_vec(), m, beta, epsilon)?.with_alpha(alpha)
}

/// Source of level quantities `X_l(ω_j)`.
pub trait LevelSampler: Sync {
    /// Length of every sample vector.
    fn width(&self) -> usize;

    /// `X_level(ω_index)`, `level >= 1`.
    fn sample(&self, level: usize, index: u64) -> Result<Vec<f64>>;

    /// `(X_level, X_{level-1})` on the same realization; `X_0 = 0`.
    fn sample_pair(&self, level: usize, index: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let fine = self.sample(level, index)?;
        let coarse = if level > 1 {
            self.sample(level - 1, index)?
        } else {
            vec![0.0; self.width()]
        };
        Ok((fine, coarse))
    }
}

/// Adapts a closure `(level, index) -> Result<Vec<f64>>`.
pub struct FnSampler<F> {
    pub width: usize,
    pub f: F,
}

impl<F> FnSampler<F>
where
    F: Fn(usize, u64) -> Result<Vec<f64>> + Sync,
{
    pub fn new(width: usize, f: F) -> Self {
        Self { width, f }
    }
}

impl<F> LevelSampler for FnSampler<F>
where
    F: Fn(usize, u64) -> Result<Vec<f64>> + Sync,
{
    fn width(&self) -> usize {
        self.width
    }

    fn sample(&self, level: usize, index: u64) -> Result<Vec<f64>> {
        (self.f)(level, index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorOutput {
    pub value: Vec<f64>,
    /// Per level, the empirical mean of `X_l - X_{l-1}`.
    pub level_contributions: Vec<Vec<f64>>,
    /// Per level, the unbiased empirical variance of `X_l - X_{l-1}` (0 for one sample).
    pub level_variances: Vec<Vec<f64>>,
    pub cost: f64,
    pub samples_used: Vec<usize>,
}

fn mean_and_variance(rows: &[Vec<f64>], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; width];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; width];
    if rows.len() > 1 {
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut var {
            *s /= n - 1.0;
        }
    }
    (mean, var)
}

fn level_differences(
    sampler: &dyn LevelSampler,
    level: usize,
    indices: std::ops::Range<u64>,
) -> Result<Vec<Vec<f64>>> {
    let width = sampler.width();
    indices
        .into_par_iter()
        .map(|j| {
            let (fine, coarse) = sampler.sample_pair(level, j).map_err(|e| e.at_sample(level, j))?;
            if fine.len() != width || coarse.len() != width {
                return Err(Error::Dimension(format!("sampler returned {} values, expected {width}", fine.len()))
                    .at_sample(level, j));
            }
            Ok(fine.iter().zip(&coarse).map(|(a, b)| a - b).collect())
        })
        .collect()
}

/// Index range of level `l` (1-based) under `coupling`, offset by `base`.
pub fn level_indices(plan: &LevelPlan, l: usize, coupling: Coupling, base: u64) -> std::ops::Range<u64> {
    let ml = plan.m[l - 1] as u64;
    match coupling {
        Coupling::Shared => base..base + ml,
        Coupling::Independent => {
            let next = if l == plan.levels() { 0 } else { plan.m[l] as u64 };
            base + next..base + ml
        }
    }
}

/// `Σ_l E_{m_l}(X_l - X_{l-1})`. Sample indices start at `base`.
///
/// The cost counts one solve of the finer level per difference.
pub fn mlmc_expect(
    sampler: &dyn LevelSampler,
    plan: &LevelPlan,
    coupling: Coupling,
    base: u64,
    d: u32,
) -> Result<EstimatorOutput> {
    plan.validate()?;
    let width = sampler.width();
    let mut contributions = Vec::with_capacity(plan.levels());
    let mut variances = Vec::with_capacity(plan.levels());
    let mut used = Vec::with_capacity(plan.levels());
    for l in 1..=plan.levels() {
        let range = level_indices(plan, l, coupling, base);
        if range.is_empty() {
            return Err(Error::Plan(format!(
                "level {l} receives no samples under independent coupling (m = {:?})",
                plan.m
            )));
        }
        used.push((range.end - range.start) as usize);
        let rows = level_differences(sampler, l, range)?;
        let (m, v) = mean_and_variance(&rows, width);
        contributions.push(m);
        variances.push(v);
    }
    let mut value = vec![0.0; width];
    for c in &contributions {
        for (v, x) in value.iter_mut().zip(c) {
            *v += x;
        }
    }
    Ok(EstimatorOutput {
        value,
        cost: plan.cost_of(&used, d),
        level_contributions: contributions,
        level_variances: variances,
        samples_used: used,
    })
}

/// Plain Monte Carlo mean of `X_L` over `m_hat` samples starting at `base`.
pub fn mc_expect(sampler: &dyn LevelSampler, plan: &LevelPlan, m_hat: usize, base: u64, d: u32) -> Result<EstimatorOutput> {
    if m_hat == 0 {
        return Err(Error::Plan("MC needs at least one sample".into()));
    }
    let l = plan.levels();
    let width = sampler.width();
    let rows: Vec<Vec<f64>> = (base..base + m_hat as u64)
        .into_par_iter()
        .map(|j| sampler.sample(l, j).map_err(|e| e.at_sample(l, j)))
        .collect::<Result<_>>()?;
    let (mean, var) = mean_and_variance(&rows, width);
    Ok(EstimatorOutput {
        value: mean.clone(),
        level_contributions: vec![mean],
        level_variances: vec![var],
        cost: m_hat as f64 * plan.dof(l, d),
        samples_used: vec![m_hat],
    })
}

/// `m̂ = ⌈Σ_l m_l (η_l/ε)^d / (η_L/ε)^d⌉`.
pub fn equal_cost_mc_samples(plan: &LevelPlan, d: u32) -> usize {
    let l = plan.levels();
    ceil_tol(plan.cost_of(&plan.m, d) / plan.dof(l, d)) as usize
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostComparison {
    pub w_mlmc: f64,
    pub w_mc: f64,
}

impl CostComparison {
    pub fn ratio(&self) -> f64 {
        self.w_mlmc / self.w_mc
    }
}

/// Equal-accuracy work of MLMC (equilibrated counts, unrounded) against MC
/// with `m̂_L = (η_L/ε)^β` samples on the largest RVE, `N_l = (η_l/ε)^d`.
pub fn cost_model(plan: &LevelPlan, d: u32, second_moment: f64) -> CostComparison {
    let raw = raw_sample_counts(plan.beta, plan.epsilon, &plan.eta, &plan.alpha, second_moment);
    let w_mlmc = raw.iter().enumerate().map(|(k, m)| m * plan.dof(k + 1, d)).sum();
    let l = plan.levels();
    let w_mc = (plan.eta[l - 1] / plan.epsilon).powf(plan.beta) * plan.dof(l, d);
    CostComparison { w_mlmc, w_mc }
}

/// Cost ratio for `η_l = 2^{l-L}`, `α_l = 1/L`, `E[A²] = 1`, with `ε = η_1 / eps_factor`
/// (`eps_factor = 10` ties ε to the smallest RVE) or a fixed `ε` when `fixed_epsilon` is given.
pub fn dyadic_cost_ratio(beta: f64, levels: usize, d: u32, eps_factor: f64, fixed_epsilon: Option<f64>) -> f64 {
    let eta: Vec<f64> = (1..=levels).map(|l| 2f64.powi(l as i32 - levels as i32)).collect();
    let epsilon = fixed_epsilon.unwrap_or(eta[0] / eps_factor);
    let plan = LevelPlan {
        alpha: vec![1.0 / levels as f64; levels],
        m: vec![1; levels],
        eta,
        beta,
        epsilon,
    };
    cost_model(&plan, d, 1.0).ratio()
}

struct ProductSampler<'a> {
    inner: &'a dyn LevelSampler,
    pairs: &'a [(usize, usize)],
}

impl LevelSampler for ProductSampler<'_> {
    fn width(&self) -> usize {
        self.pairs.len()
    }

    fn sample(&self, level: usize, index: u64) -> Result<Vec<f64>> {
        let v = self.inner.sample(level, index)?;
        Ok(self.pairs.iter().map(|&(a, b)| v[a] * v[b]).collect())
    }

    fn sample_pair(&self, level: usize, index: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (f, c) = self.inner.sample_pair(level, index)?;
        let prod = |v: &[f64]| self.pairs.iter().map(|&(a, b)| v[a] * v[b]).collect();
        Ok((prod(&f), prod(&c)))
    }
}

/// `Cor^L = Σ_l [Cor_{m_l}(X_l) - Cor_{m_l}(X_{l-1})]` for the non-centered
/// products `X[a] X[b]` of each pair, with shared coupling.
///
/// The sampler output holds the entries at both points, e.g. `[A*(x)…, A*(y)…]`.
pub fn two_point_correlation(
    sampler: &dyn LevelSampler,
    plan: &LevelPlan,
    pairs: &[(usize, usize)],
    base: u64,
    d: u32,
) -> Result<EstimatorOutput> {
    let w = sampler.width();
    if pairs.iter().any(|&(a, b)| a >= w || b >= w) {
        return Err(Error::Dimension(format!("correlation pair outside sample width {w}")));
    }
    mlmc_expect(&ProductSampler { inner: sampler, pairs }, plan, Coupling::Shared, base, d)
}

/// Plain MC estimate of the same non-centered products at the top level.
pub fn mc_two_point_correlation(
    sampler: &dyn LevelSampler,
    plan: &LevelPlan,
    pairs: &[(usize, usize)],
    m_hat: usize,
    base: u64,
    d: u32,
) -> Result<EstimatorOutput> {
    mc_expect(&ProductSampler { inner: sampler, pairs }, plan, m_hat, base, d)
}

/// Squared relative Frobenius error `|est - ref|² / |ref|²`.
pub fn relative_sq_error(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Dimension(format!(
            "estimate has {} entries, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let norm: f64 = reference.iter().map(|r| r * r).sum();
    if norm == 0.0 {
        return Err(Error::ZeroReference);
    }
    let diff: f64 = estimate.iter().zip(reference).map(|(e, r)| (e - r) * (e - r)).sum();
    Ok(diff / norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorStats {
    pub relative_mse: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub nb: usize,
    /// Squared relative error of each repetition, in repetition order.
    pub per_repetition: Vec<f64>,
}

impl ErrorStats {
    pub fn from_errors(errors: Vec<f64>) -> Result<Self> {
        let nb = errors.len();
        if nb < 2 {
            return Err(Error::param(format!("error statistics need Nb >= 2, got {nb}")));
        }
        let mean = errors.iter().sum::<f64>() / nb as f64;
        let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (nb - 1) as f64;
        let half = 1.96 * var.sqrt() / (nb as f64).sqrt();
        Ok(Self {
            relative_mse: mean,
            ci_low: mean - half,
            ci_high: mean + half,
            nb,
            per_repetition: errors,
        })
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }
}

/// Runs `experiment(rep)` for `rep in 0..nb` and scores each result against `reference`.
///
/// The closure is responsible for mapping `rep` to a disjoint seed block.
pub fn repeat_and_score<F>(experiment: F, reference: &[f64], nb: usize) -> Result<ErrorStats>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    if nb < 2 {
        return Err(Error::param(format!("repeat_and_score needs Nb >= 2, got {nb}")));
    }
    let errors = (0..nb)
        .into_par_iter()
        .map(|rep| relative_sq_error(&experiment(rep)?, reference))
        .collect::<Result<Vec<_>>>()?;
    ErrorStats::from_errors(errors)
}

/// `E[|X_1|²]` from `n` level-1 samples starting at `base`.
pub fn pilot_second_moment(sampler: &dyn LevelSampler, n: usize, base: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::param("pilot needs at least one sample"));
    }
    let sq: Vec<f64> = (base..base + n as u64)
        .into_par_iter()
        .map(|j| sampler.sample(1, j).map(|v| v.iter().map(|x| x * x).sum::<f64>()))
        .collect::<Result<_>>()?;
    Ok(sq.iter().sum::<f64>() / n as f64)
}
