//! Coarse-scale homogenized solutions on nested grids of `D = (0,1)^d`.
//!
//! - [`solve_coarse_1d_neumann`]: explicit piecewise-constant solution of
//!   `(A* u′)′ = f`, `u′(0) = u′(1) = u(0) = 0`.
//! - [`solve_coarse_2d`]: finite-volume solve of `-div(k ∇u) = f`, `u = 0` on `∂D`.
//! - [`mlmc_solution_separable`]: solution-level MLMC for `Ã(x, ω) B(x/ε, ω′)`.
//! - [`weighted_mlmc_solution`]: weighted MLMC that reuses RVE coefficients
//!   computed for a fine grid on every coarser nested grid.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{MacroField, SeedPair};
use crate::fv::{self, FaceBc};
use crate::grid::UniformGrid;
use crate::linalg::{default_max_iter, pcg};

/// Neumann compatibility tolerance on `∫₀¹ f`.
pub const COMPATIBILITY_TOL: f64 = 1e-10;

/// Uniform grid of the unit box with `base_cells · 2^nested_level` cells per dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CoarseGrid {
    pub dim: usize,
    pub base_cells: usize,
    pub nested_level: usize,
}

impl CoarseGrid {
    pub fn new(dim: usize, base_cells: usize, nested_level: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) || base_cells == 0 {
            return Err(Error::param(format!("coarse grid needs dim in 1..=2 and cells > 0, got {dim}, {base_cells}")));
        }
        Ok(Self {
            dim,
            base_cells,
            nested_level,
        })
    }

    /// Hierarchy `H_l = H_1 / 2^{l-1}`, `l = 1..=levels`, with `H_1 = 1 / base_cells`.
    pub fn hierarchy(dim: usize, base_cells: usize, levels: usize) -> Result<Vec<Self>> {
        (0..levels).map(|k| Self::new(dim, base_cells, k)).collect()
    }

    /// Grid of mesh size `h`, which must be `1/n` for an integer `n`.
    pub fn from_mesh_size(dim: usize, h: f64) -> Result<Self> {
        let n = (1.0 / h).round();
        if !(n >= 1.0) || ((1.0 / n) - h).abs() > 1e-12 {
            return Err(Error::param(format!("mesh size {h} does not divide the unit interval")));
        }
        Self::new(dim, n as usize, 0)
    }

    pub fn cells(&self) -> usize {
        self.base_cells << self.nested_level
    }

    pub fn h(&self) -> f64 {
        1.0 / self.cells() as f64
    }

    pub fn len(&self) -> usize {
        self.cells().pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn uniform(&self) -> UniformGrid {
        UniformGrid::unit_box(self.dim, 1.0, self.cells()).expect("valid coarse grid")
    }

    /// Refinement factor `r` such that every cell of `self` is `r^d` cells of `fine`.
    pub fn refinement_to(&self, fine: &CoarseGrid) -> Result<usize> {
        let (a, b) = (self.cells(), fine.cells());
        if self.dim != fine.dim || b < a || b % a != 0 || !(b / a).is_power_of_two() {
            return Err(Error::Structure(format!(
                "{a}^{} cells is not a factor-2 coarsening of {b}^{} cells",
                self.dim, fine.dim
            )));
        }
        Ok(b / a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolutionField {
    pub grid: CoarseGrid,
    pub values: Vec<f64>,
    /// RVE level whose coefficient produced this field, if any.
    pub rve_level: Option<usize>,
    /// Mesh level (1-based), or 0 for a field not tied to a level.
    pub mesh_level: usize,
}

impl SolutionField {
    pub fn zeros(grid: CoarseGrid) -> Self {
        Self {
            values: vec![0.0; grid.len()],
            grid,
            rve_level: None,
            mesh_level: 0,
        }
    }

    pub fn from_fn(grid: CoarseGrid, f: impl Fn([f64; 2]) -> f64) -> Self {
        Self {
            values: grid.uniform().centers().map(f).collect(),
            grid,
            rve_level: None,
            mesh_level: 0,
        }
    }

    fn axpy(&mut self, a: f64, other: &SolutionField) {
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v += a * o;
        }
    }

    fn scaled(mut self, a: f64) -> Self {
        for v in &mut self.values {
            *v *= a;
        }
        self
    }
}

/// Piecewise-constant prolongation (injection) to a finer nested grid, or
/// cell-averaging restriction to a coarser one.
pub fn grid_transfer(field: &SolutionField, target: &CoarseGrid) -> Result<SolutionField> {
    let src = field.grid;
    if src.dim != target.dim {
        return Err(Error::Structure("transfer between grids of different dimension".into()));
    }
    let (sn, tn) = (src.cells(), target.cells());
    let values = if tn >= sn {
        let r = src.refinement_to(target)?;
        if src.dim == 1 {
            (0..tn).map(|i| field.values[i / r]).collect()
        } else {
            let mut v = Vec::with_capacity(tn * tn);
            for j in 0..tn {
                for i in 0..tn {
                    v.push(field.values[i / r + sn * (j / r)]);
                }
            }
            v
        }
    } else {
        let r = target.refinement_to(&src)?;
        if src.dim == 1 {
            (0..tn)
                .map(|i| field.values[i * r..(i + 1) * r].iter().sum::<f64>() / r as f64)
                .collect()
        } else {
            let mut v = vec![0.0; tn * tn];
            for j in 0..sn {
                for i in 0..sn {
                    v[i / r + tn * (j / r)] += field.values[i + sn * j];
                }
            }
            let w = (r * r) as f64;
            v.into_iter().map(|x| x / w).collect()
        }
    };
    Ok(SolutionField {
        grid: *target,
        values,
        rve_level: field.rve_level,
        mesh_level: field.mesh_level,
    })
}

fn finer(a: &CoarseGrid, b: &CoarseGrid) -> CoarseGrid {
    if a.cells() >= b.cells() {
        *a
    } else {
        *b
    }
}

fn l2_norm_sq(f: &SolutionField) -> f64 {
    let w = f.grid.h().powi(f.grid.dim as i32);
    f.values.iter().map(|v| v * v).sum::<f64>() * w
}

/// `‖u - ref‖_{L²} / ‖ref‖_{L²}` on the finer of the two grids.
pub fn l2_relative_error(u: &SolutionField, reference: &SolutionField) -> Result<f64> {
    let g = finer(&u.grid, &reference.grid);
    let a = grid_transfer(u, &g)?;
    let b = grid_transfer(reference, &g)?;
    let nb = l2_norm_sq(&b);
    if nb == 0.0 {
        return Err(Error::ZeroReference);
    }
    let mut d = a;
    d.axpy(-1.0, &b);
    Ok((l2_norm_sq(&d) / nb).sqrt())
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Piecewise-constant solution `u_i = Σ_{j<=i} A*(x_j)⁻¹ ∫_{x_{j-1}}^{x_j} F`,
/// `F(t) = ∫₀ᵗ f`, with `coefficient[j-1] = A*(x_j)` at the right vertices.
///
/// Integrals use composite Simpson with 8 subintervals per cell; `F` is
/// accumulated by 3-point Simpson on each subinterval.
pub fn solve_coarse_1d_neumann(coefficient: &[f64], f: &dyn Fn(f64) -> f64, grid: &CoarseGrid) -> Result<SolutionField> {
    const SUB: usize = 8;
    if grid.dim != 1 {
        return Err(Error::Dimension("Neumann solver is one-dimensional".into()));
    }
    let n = grid.cells();
    if coefficient.len() != n {
        return Err(Error::Dimension(format!("{} coefficients for {n} cells", coefficient.len())));
    }
    if let Some(cell) = coefficient.iter().position(|a| !(*a > 0.0)) {
        return Err(Error::Coercivity {
            cell,
            value: coefficient[cell],
        });
    }
    let integral = simpson(f, 0.0, 1.0, 4096);
    if integral.abs() > COMPATIBILITY_TOL {
        return Err(Error::Compatibility { integral });
    }
    let h = grid.h();
    let dt = h / SUB as f64;
    let mut big_f = 0.0;
    let mut u = 0.0;
    let mut values = Vec::with_capacity(n);
    for (j, a) in coefficient.iter().enumerate() {
        let x0 = j as f64 * h;
        let mut samples = [0.0; SUB + 1];
        samples[0] = big_f;
        for k in 0..SUB {
            let t = x0 + k as f64 * dt;
            big_f += dt / 6.0 * (f(t) + 4.0 * f(t + 0.5 * dt) + f(t + dt));
            samples[k + 1] = big_f;
        }
        let mut s = samples[0] + samples[SUB];
        for (k, v) in samples.iter().enumerate().take(SUB).skip(1) {
            s += v * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        u += s * dt / 3.0 / a;
        values.push(u);
    }
    Ok(SolutionField {
        grid: *grid,
        values,
        rve_level: None,
        mesh_level: 0,
    })
}

/// Cell-centered finite-volume solve of `-div(diag(kx, ky) ∇u) = f` with `u = 0` on `∂D`.
pub fn solve_coarse_2d(kx: &[f64], ky: &[f64], f: &dyn Fn([f64; 2]) -> f64, grid: &CoarseGrid) -> Result<SolutionField> {
    if grid.dim != 2 {
        return Err(Error::Dimension("coarse FV solver is two-dimensional".into()));
    }
    let ug = grid.uniform();
    if kx.len() != ug.len() || ky.len() != ug.len() {
        return Err(Error::Dimension(format!("coefficient of length {} on {} cells", kx.len(), ug.len())));
    }
    for k in [kx, ky] {
        if let Some(cell) = k.iter().position(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::Coercivity { cell, value: k[cell] });
        }
    }
    let area = ug.cell_measure();
    let source: Vec<f64> = ug.centers().map(|c| f(c) * area).collect();
    let geom = fv::face_geometry(&ug, kx, ky);
    let (a, rhs) = fv::assemble(&ug, &geom, &|_, _, _| FaceBc::Dirichlet(0.0), Some(&source));
    let mut x = vec![0.0; ug.len()];
    pcg(&a, &rhs, &mut x, 1e-10, default_max_iter(ug.len()))?;
    Ok(SolutionField {
        grid: *grid,
        values: x,
        rve_level: None,
        mesh_level: 0,
    })
}

/// One level of the separable solution-level MLMC.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableLevel {
    pub grid: CoarseGrid,
    /// Macroscopic realizations `M_l`.
    pub samples: usize,
    /// Microscopic mean `E_{m_l}(B*_l)`, row-major 2×2.
    pub micro_mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolutionOutput {
    pub value: SolutionField,
    /// Per level, the mean difference prolonged to the output grid.
    pub level_contributions: Vec<SolutionField>,
    pub samples_used: Vec<usize>,
    /// `Σ_l M_l H_l^{-d}`.
    pub coarse_cost: f64,
}

/// `u^k` on `grid` for coefficient `Ã^k(x) B*`, using only the diagonal of `B*`.
pub fn solve_separable(
    macro_field: MacroField,
    seed: &SeedPair,
    micro_mean: &[f64],
    f: &dyn Fn([f64; 2]) -> f64,
    grid: &CoarseGrid,
) -> Result<SolutionField> {
    if micro_mean.len() != 4 {
        return Err(Error::Dimension("separable solve needs a 2x2 microscopic tensor".into()));
    }
    let omega = macro_field.realize(seed);
    let a: Vec<f64> = grid.uniform().centers().map(|x| macro_field.value_with(&omega, &x)).collect();
    let kx: Vec<f64> = a.iter().map(|v| v * micro_mean[0]).collect();
    let ky: Vec<f64> = a.iter().map(|v| v * micro_mean[3]).collect();
    solve_coarse_2d(&kx, &ky, f, grid)
}

fn ordered_sum(fields: Vec<SolutionField>, grid: CoarseGrid) -> SolutionField {
    let mut acc = SolutionField::zeros(grid);
    for f in &fields {
        acc.axpy(1.0, f);
    }
    acc
}

/// `E_L(u_L) = Σ_l E_{M_l}(u_l - u_{l-1})` with the same `Ã^k` in both terms.
///
/// Macroscopic realization `k` uses `SeedPair::shared(base + k, stream_id)`.
pub fn mlmc_solution_separable(
    macro_field: MacroField,
    levels: &[SeparableLevel],
    f: &(dyn Fn([f64; 2]) -> f64 + Sync),
    stream_id: u64,
    base: u64,
) -> Result<SolutionOutput> {
    let finest = levels.last().ok_or_else(|| Error::param("no levels"))?.grid;
    for w in levels.windows(2) {
        w[0].grid.refinement_to(&w[1].grid)?;
        if w[1].samples > w[0].samples {
            return Err(Error::Plan("macroscopic counts must be non-increasing".into()));
        }
    }
    let mut contributions = Vec::with_capacity(levels.len());
    let mut used = Vec::with_capacity(levels.len());
    let mut cost = 0.0;
    for (l, lvl) in levels.iter().enumerate() {
        let diffs = (0..lvl.samples as u64)
            .into_par_iter()
            .map(|k| {
                let seed = SeedPair::shared(base + k, stream_id);
                let fine = solve_separable(macro_field, &seed, &lvl.micro_mean, f, &lvl.grid)?;
                let mut d = grid_transfer(&fine, &finest)?;
                if l > 0 {
                    let prev = &levels[l - 1];
                    let coarse = solve_separable(macro_field, &seed, &prev.micro_mean, f, &prev.grid)?;
                    d.axpy(-1.0, &grid_transfer(&coarse, &finest)?);
                }
                Ok(d)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_sample(l + 1, base))?;
        let mut mean = ordered_sum(diffs, finest).scaled(1.0 / lvl.samples as f64);
        mean.mesh_level = l + 1;
        contributions.push(mean);
        used.push(lvl.samples);
        cost += lvl.samples as f64 * lvl.grid.h().powi(-(lvl.grid.dim as i32));
    }
    let mut value = ordered_sum(contributions.clone(), finest);
    value.mesh_level = levels.len();
    Ok(SolutionOutput {
        value,
        level_contributions: contributions,
        samples_used: used,
        coarse_cost: cost,
    })
}

/// Plain MC mean of `u` over `m_hat` macroscopic realizations on one grid.
pub fn mc_solution_separable(
    macro_field: MacroField,
    level: &SeparableLevel,
    f: &(dyn Fn([f64; 2]) -> f64 + Sync),
    stream_id: u64,
    base: u64,
) -> Result<SolutionOutput> {
    mlmc_solution_separable(macro_field, std::slice::from_ref(level), f, stream_id, base)
}

/// `M̂ = ⌈H_L^d Σ_l M_l H_l^{-d}⌉`.
pub fn equal_cost_coarse_samples(grids: &[CoarseGrid], m: &[usize]) -> usize {
    let last = grids[grids.len() - 1];
    let d = last.dim as i32;
    let w: f64 = grids.iter().zip(m).map(|(g, &m)| m as f64 * g.h().powi(-d)).sum();
    (w * last.h().powi(d) - 1e-9).ceil() as usize
}

/// A non-separable problem whose apparent coefficients are computed at the
/// nested point sets `𝒫_1 ⊂ … ⊂ 𝒫_L` of the coarse grids.
pub trait WeightedProblem: Sync {
    fn levels(&self) -> usize;

    /// Coarse grid `H_l`, `l` 1-based.
    fn grid(&self, l: usize) -> CoarseGrid;

    /// `Card 𝒫_l`.
    fn points(&self, l: usize) -> usize;

    /// Apparent coefficients at the points `𝒫_j` from RVEs of size `η_j`
    /// for realization `index`; one RVE solve per point.
    fn rve_coefficients(&self, j: usize, index: u64) -> Result<Vec<f64>>;

    /// Restriction of values at `𝒫_j` to the subset `𝒫_l`, `l <= j`.
    fn restrict_points(&self, values: &[f64], j: usize, l: usize) -> Vec<f64>;

    /// Coarse solve on grid `H_l` from coefficients at `𝒫_l`.
    fn solve(&self, l: usize, coefficients: &[f64], index: u64) -> Result<SolutionField>;
}

/// Weights and coarse sample counts of the weighted estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedPlan {
    pub alpha: Vec<f64>,
    /// `M_1 >= … >= M_L`; `M_{L+1} = 0` is implied.
    pub m: Vec<usize>,
    pub gamma: Vec<f64>,
    pub e_diag: Vec<f64>,
}

impl WeightedPlan {
    pub fn new(alpha: Vec<f64>, m: Vec<usize>) -> Result<Self> {
        let l = m.len();
        if l == 0 || alpha.len() != l {
            return Err(Error::Plan("alpha and M must share a non-zero length".into()));
        }
        if m.contains(&0) || m.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Plan(format!("M must be positive and non-increasing, got {m:?}")));
        }
        Ok(Self {
            gamma: vec![1.0 / l as f64; l],
            e_diag: vec![1.0; l],
            alpha,
            m,
        })
    }

    /// Realization indices `[M_{j+1}, M_j)` whose RVE coefficients are computed at level `j`.
    pub fn block(&self, j: usize) -> std::ops::Range<u64> {
        let next = self.m.get(j).copied().unwrap_or(0) as u64;
        next..self.m[j - 1] as u64
    }
}

/// `α_l = Σ_{j>=l} α̃_j 𝓔_{L,L} / 𝓔_{j,j}`.
pub fn choose_weights(e_diag: &[f64], alpha_tilde: &[f64]) -> Result<Vec<f64>> {
    let l = e_diag.len();
    if l == 0 || alpha_tilde.len() != l {
        return Err(Error::param("accuracies and base weights must share a non-zero length"));
    }
    if e_diag.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::param("accuracies must be positive"));
    }
    let e_ll = e_diag[l - 1];
    let mut alpha = vec![0.0; l];
    let mut acc = 0.0;
    for j in (0..l).rev() {
        acc += alpha_tilde[j] * (e_ll / e_diag[j]);
        alpha[j] = acc;
    }
    Ok(alpha)
}

/// Weights with constant `α̃_j` normalized so that `α_1 = 1`.
pub fn normalized_weights(e_diag: &[f64]) -> Result<Vec<f64>> {
    let a = choose_weights(e_diag, &vec![1.0; e_diag.len()])?;
    Ok(a.iter().map(|v| v / a[0]).collect())
}

/// `Ĥ = Σ_l (α_l - α_{l+1}) H_l` and `δ̂ = Σ_l (α_l - α_{l+1}) δ_l`, `α_{L+1} = 0`.
pub fn matched_resolution(alpha: &[f64], h: &[f64], delta: &[f64]) -> (f64, f64) {
    let mut hh = 0.0;
    let mut dd = 0.0;
    for l in 0..alpha.len() {
        let w = alpha[l] - alpha.get(l + 1).copied().unwrap_or(0.0);
        hh += w * h[l];
        dd += w * delta[l];
    }
    (hh, dd)
}

/// Unrounded `M_l = C (α_l (H_l + δ_l) / (γ_l (Ĥ + δ̂)))²`, `M_1 = C (α_1 / (γ_1 (Ĥ + δ̂)))²`.
pub fn weighted_counts_raw(
    alpha: &[f64],
    h: &[f64],
    delta: &[f64],
    h_hat: f64,
    delta_hat: f64,
    gamma: &[f64],
    c_scale: f64,
) -> Result<Vec<f64>> {
    let l = alpha.len();
    if l == 0 || h.len() != l || delta.len() != l || gamma.len() != l {
        return Err(Error::param("weighted counts need arrays of equal non-zero length"));
    }
    let positive = |v: &f64| *v > 0.0;
    if !alpha.iter().all(positive)
        || !h.iter().all(positive)
        || !gamma.iter().all(positive)
        || delta.iter().any(|d| !(*d >= 0.0))
        || !(h_hat + delta_hat > 0.0)
        || !(c_scale > 0.0)
    {
        return Err(Error::param("weighted counts need positive inputs"));
    }
    let den = h_hat + delta_hat;
    Ok((0..l)
        .map(|k| {
            let num = if k == 0 { alpha[0] } else { alpha[k] * (h[k] + delta[k]) };
            c_scale * (num / (gamma[k] * den)).powi(2)
        })
        .collect())
}

/// [`weighted_counts_raw`] rounded up and clamped non-increasing.
pub fn choose_weighted_m(
    alpha: &[f64],
    h: &[f64],
    delta: &[f64],
    h_hat: f64,
    delta_hat: f64,
    gamma: &[f64],
    c_scale: f64,
) -> Result<Vec<usize>> {
    let raw = weighted_counts_raw(alpha, h, delta, h_hat, delta_hat, gamma, c_scale)?;
    let mut m: Vec<usize> = raw.iter().map(|v| ((v - 1e-9 * v.max(1.0)).ceil() as usize).max(1)).collect();
    for k in (0..m.len().saturating_sub(1)).rev() {
        m[k] = m[k].max(m[k + 1]);
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedWork {
    pub rve_ratio: f64,
    pub coarse_ratio: f64,
}

/// Equal-accuracy work ratios of weighted MLMC against MC for `η_l = 2^{l-L}`,
/// `γ_l = 1/L`, constant `α̃` normalized to `α_1 = 1`, `𝓔_{j,j} = H_j + δ_j`,
/// `δ_l = (ε/η_l)^{β/2}`, `N_l = H_l^{-2}` and `C = 1`. `h` gives `H_1 … H_L`.
pub fn weighted_work_ratios(beta: f64, h: &[f64], epsilon: f64) -> Result<WeightedWork> {
    let levels = h.len();
    let eta: Vec<f64> = (1..=levels).map(|l| 2f64.powi(l as i32 - levels as i32)).collect();
    let delta: Vec<f64> = eta.iter().map(|e| (epsilon / e).powf(beta / 2.0)).collect();
    let e_diag: Vec<f64> = h.iter().zip(&delta).map(|(a, b)| a + b).collect();
    let alpha = normalized_weights(&e_diag)?;
    let gamma = vec![1.0 / levels as f64; levels];
    let (h_hat, delta_hat) = matched_resolution(&alpha, h, &delta);
    let m = weighted_counts_raw(&alpha, h, &delta, h_hat, delta_hat, &gamma, 1.0)?;
    let n: Vec<f64> = h.iter().map(|x| x.powi(-2)).collect();
    let w_rve: f64 = (0..levels)
        .map(|l| (m[l] - m.get(l + 1).copied().unwrap_or(0.0)) * (eta[l] / epsilon).powi(2) * n[l])
        .sum();
    let w_coarse: f64 = (0..levels).map(|l| m[l] * n[l]).sum();
    let m_hat = (h_hat + delta_hat).powi(-2);
    let eta_hat = epsilon * delta_hat.powf(-2.0 / beta);
    let n_hat = h_hat.powi(-2);
    let mc_rve = m_hat * n_hat * (eta_hat / epsilon).powi(2);
    let mc_coarse = m_hat * h_hat.powi(-2);
    Ok(WeightedWork {
        rve_ratio: w_rve / mc_rve,
        coarse_ratio: w_coarse / mc_coarse,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedOutput {
    pub value: SolutionField,
    /// `E*_{M_l}(u*_l - u*_{l-1})` per level, on the finest grid (unweighted).
    pub level_terms: Vec<SolutionField>,
    /// RVE solves issued by the estimator, `Σ_j (M_j - M_{j+1}) N_j`.
    pub rve_solves: u64,
}

/// `Σ_l α_l (1/M_l) Σ_{j>=l} Σ_{i ∈ block j} (u*_{η_j,H_l} - u*_{η_j,H_{l-1}})(ω_i)`.
///
/// Realization `i` of block `j` computes its RVE coefficients once at `𝒫_j`
/// and reuses them on all grids `H_l`, `l <= j`.
pub fn weighted_mlmc_solution(problem: &dyn WeightedProblem, plan: &WeightedPlan, base: u64) -> Result<WeightedOutput> {
    let levels = problem.levels();
    if plan.m.len() != levels {
        return Err(Error::Plan(format!("plan has {} levels, problem {levels}", plan.m.len())));
    }
    for l in 1..levels {
        problem.grid(l).refinement_to(&problem.grid(l + 1))?;
    }
    let finest = problem.grid(levels);
    let mut sums: Vec<Vec<SolutionField>> = vec![Vec::new(); levels];
    let mut rve_solves = 0u64;
    for j in 1..=levels {
        let block = plan.block(j);
        rve_solves += (block.end - block.start) * problem.points(j) as u64;
        // Per realization: differences on grids H_1..H_j.
        let per_realization = block
            .clone()
            .into_par_iter()
            .map(|i| -> Result<Vec<SolutionField>> {
                let idx = base + i;
                let coeff = problem.rve_coefficients(j, idx).map_err(|e| e.at_sample(j, idx))?;
                let mut out = Vec::with_capacity(j);
                let mut prev: Option<SolutionField> = None;
                for l in 1..=j {
                    let u = problem.solve(l, &problem.restrict_points(&coeff, j, l), idx)?;
                    let fine = grid_transfer(&u, &finest)?;
                    let mut d = fine.clone();
                    if let Some(p) = &prev {
                        d.axpy(-1.0, p);
                    }
                    prev = Some(fine);
                    out.push(d);
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        for diffs in per_realization {
            for (l, d) in diffs.into_iter().enumerate() {
                sums[l].push(d);
            }
        }
    }
    let mut terms = Vec::with_capacity(levels);
    let mut value = SolutionField::zeros(finest);
    for (l, s) in sums.into_iter().enumerate() {
        let mut t = ordered_sum(s, finest).scaled(1.0 / plan.m[l] as f64);
        t.mesh_level = l + 1;
        value.axpy(plan.alpha[l], &t);
        terms.push(t);
    }
    value.mesh_level = levels;
    Ok(WeightedOutput {
        value,
        level_terms: terms,
        rve_solves,
    })
}

/// Level-wise MLMC `Σ_l (1/M_l) Σ_{i<M_l} (u*_{η_{j(i)},H_l} - u*_{η_{j(i)},H_{l-1}})(ω_i)`,
/// where `j(i)` is the block of realization `i`: the same realizations and
/// RVE sizes as the weighted estimator, assembled level by level with RVE
/// coefficients recomputed for every term.
pub fn blocked_mlmc_solution(problem: &dyn WeightedProblem, m: &[usize], base: u64) -> Result<SolutionOutput> {
    let levels = problem.levels();
    let plan = WeightedPlan::new(vec![1.0; levels], m.to_vec())?;
    let finest = problem.grid(levels);
    let block_of = |i: u64| (1..=levels).rev().find(|&j| plan.block(j).contains(&i)).expect("index inside M_1");
    let mut contributions = Vec::with_capacity(levels);
    let mut cost = 0.0;
    for l in 1..=levels {
        let diffs = (0..m[l - 1] as u64)
            .into_par_iter()
            .map(|i| {
                let idx = base + i;
                let j = block_of(i);
                let coeff = problem.rve_coefficients(j, idx)?;
                let u = problem.solve(l, &problem.restrict_points(&coeff, j, l), idx)?;
                let mut d = grid_transfer(&u, &finest)?;
                if l > 1 {
                    let v = problem.solve(l - 1, &problem.restrict_points(&coeff, j, l - 1), idx)?;
                    d.axpy(-1.0, &grid_transfer(&v, &finest)?);
                }
                Ok(d)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mean = ordered_sum(diffs, finest).scaled(1.0 / m[l - 1] as f64);
        mean.mesh_level = l;
        contributions.push(mean);
        cost += m[l - 1] as f64 * problem.grid(l).h().powi(-(finest.dim as i32));
    }
    Ok(SolutionOutput {
        value: ordered_sum(contributions.clone(), finest),
        level_contributions: contributions,
        samples_used: m.to_vec(),
        coarse_cost: cost,
    })
}

/// Standard MLMC `Σ_l E_{M_l}(u*_{η_l,H_l} - u*_{η_{l-1},H_{l-1}})` with the same
/// realization in both terms. A single level gives plain MC at `(η_L, H_L)`.
pub fn mlmc_solution_nonseparable(
    problem: &dyn WeightedProblem,
    levels: &[usize],
    m: &[usize],
    base: u64,
) -> Result<SolutionOutput> {
    if levels.is_empty() || levels.len() != m.len() {
        return Err(Error::Plan("level list and counts must share a non-zero length".into()));
    }
    let finest = problem.grid(*levels.last().unwrap());
    let mut contributions = Vec::with_capacity(levels.len());
    let mut cost = 0.0;
    for (k, &l) in levels.iter().enumerate() {
        let diffs = (0..m[k] as u64)
            .into_par_iter()
            .map(|i| {
                let idx = base + i;
                let u = problem.solve(l, &problem.rve_coefficients(l, idx)?, idx)?;
                let mut d = grid_transfer(&u, &finest)?;
                if k > 0 {
                    let p = levels[k - 1];
                    let v = problem.solve(p, &problem.rve_coefficients(p, idx)?, idx)?;
                    d.axpy(-1.0, &grid_transfer(&v, &finest)?);
                }
                Ok(d)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_sample(l, base))?;
        let mut mean = ordered_sum(diffs, finest).scaled(1.0 / m[k] as f64);
        mean.mesh_level = l;
        contributions.push(mean);
        cost += m[k] as f64 * problem.grid(l).h().powi(-(finest.dim as i32));
    }
    Ok(SolutionOutput {
        value: ordered_sum(contributions.clone(), finest),
        level_contributions: contributions,
        samples_used: m.to_vec(),
        coarse_cost: cost,
    })
}

/// One-dimensional Neumann problem with the non-separable apparent coefficient
///
/// `A*(x)⁻¹ = C(1 + e^{5ω}) x + (1/(b-a)) (ε/(ωω′)) [e^{(1+x) ωω′ sin(b/ε)} - e^{(1+x) ωω′ sin(a/ε)}]`
///
/// on the RVE `[a_l, b_l]`, `ω, ω′ ~ U[0.5, 1]`, evaluated at the right
/// vertices of each grid (which nest across levels).
pub struct NeumannProblem1d {
    pub c: f64,
    pub epsilon: f64,
    pub rve: Vec<(f64, f64)>,
    pub grids: Vec<CoarseGrid>,
    pub stream_id: u64,
    pub f: fn(f64) -> f64,
    counter: AtomicU64,
}

/// `f(x) = eˣ - (e - 1)`.
pub fn neumann_source(x: f64) -> f64 {
    x.exp() - (std::f64::consts::E - 1.0)
}

impl NeumannProblem1d {
    pub fn new(c: f64, epsilon: f64, rve: Vec<(f64, f64)>, grids: Vec<CoarseGrid>, stream_id: u64) -> Result<Self> {
        if rve.len() != grids.len() || rve.is_empty() {
            return Err(Error::param("one RVE per coarse grid required"));
        }
        if rve.iter().any(|(a, b)| !(b > a)) || !(epsilon > 0.0) || !(c > 0.0) {
            return Err(Error::param("RVEs need b > a; C and epsilon must be positive"));
        }
        for w in grids.windows(2) {
            w[0].refinement_to(&w[1])?;
        }
        if grids.iter().any(|g| g.dim != 1) {
            return Err(Error::Dimension("Neumann problem is one-dimensional".into()));
        }
        Ok(Self {
            c,
            epsilon,
            rve,
            grids,
            stream_id,
            f: neumann_source,
            counter: AtomicU64::new(0),
        })
    }

    /// `(ω, ω′)` of realization `index`.
    pub fn omegas(&self, index: u64) -> (f64, f64) {
        let s = SeedPair::shared(index, self.stream_id);
        (0.5 + 0.5 * s.macro_uniform(0), 0.5 + 0.5 * s.micro_uniform(0))
    }

    pub fn inv_coefficient(&self, x: f64, rve: (f64, f64), omega: (f64, f64)) -> f64 {
        let (a, b) = rve;
        let k = omega.0 * omega.1;
        let eps = self.epsilon;
        self.c * (1.0 + (5.0 * omega.0).exp()) * x
            + eps / (k * (b - a)) * (((1.0 + x) * k * (b / eps).sin()).exp() - ((1.0 + x) * k * (a / eps).sin()).exp())
    }

    /// RVE solves issued so far.
    pub fn rve_solves(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }

    pub fn reset_counter(&self) {
        self.counter.store(0, Ordering::Relaxed);
    }

    /// `𝒞 = C (1 + (2/5)(e⁵ - e^{5/2}))`.
    pub fn reference_constant(&self) -> f64 {
        self.c * (1.0 + 0.4 * (5f64.exp() - 2.5f64.exp()))
    }

    /// `E(u*_∞)(x) = 𝒞 (x eˣ - eˣ - (e-1) x³/3 - x²/2 + 1)`.
    pub fn reference_solution(&self, x: f64) -> f64 {
        let e = std::f64::consts::E;
        self.reference_constant() * (x * x.exp() - x.exp() - (e - 1.0) * x.powi(3) / 3.0 - x * x / 2.0 + 1.0)
    }

    /// Reference sampled at the right vertices of `grid`.
    pub fn reference_field(&self, grid: &CoarseGrid) -> SolutionField {
        let h = grid.h();
        SolutionField {
            values: (1..=grid.cells()).map(|i| self.reference_solution(i as f64 * h)).collect(),
            grid: *grid,
            rve_level: None,
            mesh_level: 0,
        }
    }
}

impl WeightedProblem for NeumannProblem1d {
    fn levels(&self) -> usize {
        self.grids.len()
    }

    fn grid(&self, l: usize) -> CoarseGrid {
        self.grids[l - 1]
    }

    fn points(&self, l: usize) -> usize {
        self.grids[l - 1].cells()
    }

    fn rve_coefficients(&self, j: usize, index: u64) -> Result<Vec<f64>> {
        let g = self.grids[j - 1];
        let omega = self.omegas(index);
        let h = g.h();
        self.counter.fetch_add(g.cells() as u64, Ordering::Relaxed);
        Ok((1..=g.cells())
            .map(|i| 1.0 / self.inv_coefficient(i as f64 * h, self.rve[j - 1], omega))
            .collect())
    }

    fn restrict_points(&self, values: &[f64], j: usize, l: usize) -> Vec<f64> {
        let r = self.grids[j - 1].cells() / self.grids[l - 1].cells();
        (1..=self.grids[l - 1].cells()).map(|k| values[k * r - 1]).collect()
    }

    fn solve(&self, l: usize, coefficients: &[f64], _index: u64) -> Result<SolutionField> {
        let f = self.f;
        let mut u = solve_coarse_1d_neumann(coefficients, &f, &self.grids[l - 1])?;
        u.mesh_level = l;
        Ok(u)
    }
}

/// Restriction for 2D point sets where the point of coarse cell `(a, b)` on
/// grid `l` is the center of the finest cell `(a·2^{L-l}, b·2^{L-l})`.
pub fn restrict_points_2d(values: &[f64], fine: &CoarseGrid, coarse: &CoarseGrid) -> Result<Vec<f64>> {
    let r = coarse.refinement_to(fine)?;
    let (nf, nc) = (fine.cells(), coarse.cells());
    let mut out = Vec::with_capacity(nc * nc);
    for b in 0..nc {
        for a in 0..nc {
            out.push(values[a * r + nf * (b * r)]);
        }
    }
    Ok(out)
}
