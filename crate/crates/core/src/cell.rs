//! RVE corrector problems and apparent homogenized tensors.
//!
//! In 2D the corrector `χ_i` solves `-div(A ∇χ_i) = 0` on the RVE with
//! `χ_i = y_i` on the Dirichlet part of the boundary, discretized by
//! cell-centered finite volumes (see the `fv` module). In 1D the same solver
//! applies, and closed-form harmonic means are available for the analytic
//! families.

use crate::error::{Error, Result};
use crate::field::{Analytic1d, Realization1d, ScalarFieldSample, SeedPair};
use crate::fv::{self, FaceBc};
use crate::grid::UniformGrid;
use crate::linalg::{default_max_iter, pcg};

/// Default relative residual for corrector solves.
pub const DEFAULT_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryCondition {
    /// `χ_i = y_i` on the whole boundary.
    DirichletLinear,
    /// `χ_i = y_i` on the two faces normal to `e_i`, zero flux elsewhere.
    DirichletNoFlow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum TensorDefinition {
    /// Column `i` is the volume average of `A ∇χ_i`.
    FluxAverage,
    /// Entry `(n, m)` is the volume average of `∇χ_n · A ∇χ_m`.
    #[default]
    EnergyAverage,
}

/// Cubic RVE `Y = x + (-η/2, η/2)^d` split into `cells_per_dim` cells per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct RveGrid {
    pub eta: f64,
    pub cells_per_dim: usize,
    pub h: f64,
    pub center: Vec<f64>,
}

impl RveGrid {
    pub fn new(eta: f64, cells_per_dim: usize, center: &[f64]) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::param(format!("RVE size must be positive, got {eta}")));
        }
        if cells_per_dim < 2 {
            return Err(Error::param(format!("RVE needs at least 2 cells per dimension, got {cells_per_dim}")));
        }
        if !(1..=2).contains(&center.len()) {
            return Err(Error::Dimension(format!("RVE center must be 1D or 2D, got {}", center.len())));
        }
        Ok(Self {
            eta,
            cells_per_dim,
            h: eta / cells_per_dim as f64,
            center: center.to_vec(),
        })
    }

    /// RVE anchored at the origin, `[0, η]^d`, with cell width `h`.
    pub fn anchored(dim: usize, eta: f64, h: f64) -> Result<Self> {
        let n = (eta / h).round() as usize;
        if ((n as f64) * h - eta).abs() > 1e-9 * eta {
            return Err(Error::param(format!("RVE size {eta} is not a multiple of h = {h}")));
        }
        Self::new(eta, n, &vec![eta / 2.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn grid(&self) -> UniformGrid {
        let origin: Vec<f64> = self.center.iter().map(|c| c - self.eta / 2.0).collect();
        UniformGrid::new(&origin, &vec![self.cells_per_dim; self.dim()], self.h)
            .expect("validated at construction")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSolution {
    pub direction: usize,
    pub bc: BoundaryCondition,
    pub values: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HomogenizedTensor {
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub entries: Vec<f64>,
    pub definition: TensorDefinition,
    pub eta: f64,
}

impl HomogenizedTensor {
    pub fn diagonal(diag: &[f64], definition: TensorDefinition, eta: f64) -> Self {
        let d = diag.len();
        let mut entries = vec![0.0; d * d];
        for (i, v) in diag.iter().enumerate() {
            entries[i * d + i] = *v;
        }
        Self {
            dim: d,
            entries,
            definition,
            eta,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn frobenius(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn sym_eigenvalues(&self) -> Vec<f64> {
        if self.dim == 1 {
            return vec![self.entries[0]];
        }
        let (a, d) = (self.get(0, 0), self.get(1, 1));
        let b = 0.5 * (self.get(0, 1) + self.get(1, 0));
        let m = 0.5 * (a + d);
        let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        vec![m - r, m + r]
    }
}

fn boundary_data(origin: [f64; 2], direction: usize, bc: BoundaryCondition) -> impl Fn(usize, usize, [f64; 2]) -> FaceBc {
    move |axis, _side, x| match bc {
        BoundaryCondition::DirichletNoFlow if axis != direction => FaceBc::NoFlow,
        _ => FaceBc::Dirichlet(x[direction] - origin[direction]),
    }
}

fn grid_origin(grid: &UniformGrid) -> [f64; 2] {
    let mut o = [0.0; 2];
    o[..grid.dim()].copy_from_slice(grid.origin());
    o
}

fn check_positive(field: &ScalarFieldSample) -> Result<()> {
    match field.values.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        Some(cell) => Err(Error::Coercivity {
            cell,
            value: field.values[cell],
        }),
        None => Ok(()),
    }
}

/// Solves the corrector problem in direction `direction` (0-based).
pub fn solve_corrector(
    field: &ScalarFieldSample,
    direction: usize,
    bc: BoundaryCondition,
    tol: f64,
) -> Result<CellSolution> {
    let grid = &field.grid;
    if direction >= grid.dim() {
        return Err(Error::Dimension(format!("direction {direction} in a {}D RVE", grid.dim())));
    }
    if !(tol > 0.0 && tol <= 1e-4) {
        return Err(Error::param(format!("corrector tolerance must lie in (0, 1e-4], got {tol}")));
    }
    check_positive(field)?;
    let origin = grid_origin(grid);
    let geom = fv::face_geometry(grid, &field.values, &field.values);
    let data = boundary_data(origin, direction, bc);
    let (a, rhs) = fv::assemble(grid, &geom, &data, None);
    let mut x: Vec<f64> = grid.centers().map(|c| c[direction] - origin[direction]).collect();
    let out = pcg(&a, &rhs, &mut x, tol, default_max_iter(grid.len()))?;
    Ok(CellSolution {
        direction,
        bc,
        values: x,
        residual_norm: out.relative_residual,
        iterations: out.iterations,
    })
}

/// Assembles the apparent tensor from the `d` correctors of one field.
///
/// Gradients are the face differences of the assembly stencil, so the flux
/// and energy definitions coincide for [`BoundaryCondition::DirichletLinear`].
pub fn apparent_tensor(
    field: &ScalarFieldSample,
    correctors: &[CellSolution],
    definition: TensorDefinition,
) -> Result<HomogenizedTensor> {
    let grid = &field.grid;
    let d = grid.dim();
    if correctors.len() != d {
        return Err(Error::Dimension(format!("{} correctors for a {d}D RVE", correctors.len())));
    }
    for (k, c) in correctors.iter().enumerate() {
        if c.direction != k || c.values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "corrector {k} has direction {} and {} values on a grid of {} cells",
                c.direction,
                c.values.len(),
                grid.len()
            )));
        }
    }
    let origin = grid_origin(grid);
    let geom = fv::face_geometry(grid, &field.values, &field.values);
    let jumps: Vec<fv::FaceJumps> = correctors
        .iter()
        .map(|c| fv::face_jumps(grid, &c.values, &boundary_data(origin, c.direction, c.bc)))
        .collect();
    let vol = grid.volume();
    let mut entries = vec![0.0; d * d];
    let faces = |axis: usize| -> (&[f64], &[f64]) {
        if axis == 0 {
            (&geom.tx, &geom.wx)
        } else {
            (&geom.ty, &geom.wy)
        }
    };
    let jump_of = |k: usize, axis: usize| -> &[Option<f64>] {
        if axis == 0 {
            &jumps[k].x
        } else {
            &jumps[k].y
        }
    };
    match definition {
        TensorDefinition::FluxAverage => {
            for row in 0..d {
                let (t, w) = faces(row);
                for col in 0..d {
                    let s: f64 = jump_of(col, row)
                        .iter()
                        .zip(t.iter().zip(w))
                        .filter_map(|(j, (t, w))| j.map(|j| t * j * w))
                        .sum();
                    entries[row * d + col] = s / vol;
                }
            }
        }
        TensorDefinition::EnergyAverage => {
            for n in 0..d {
                for m in n..d {
                    let mut s = 0.0;
                    for axis in 0..d {
                        let (t, _) = faces(axis);
                        for ((jn, jm), t) in jump_of(n, axis).iter().zip(jump_of(m, axis)).zip(t) {
                            if let (Some(a), Some(b)) = (jn, jm) {
                                s += t * a * b;
                            }
                        }
                    }
                    entries[n * d + m] = s / vol;
                    entries[m * d + n] = s / vol;
                }
            }
        }
    }
    Ok(HomogenizedTensor {
        dim: d,
        entries,
        definition,
        eta: grid.extent(0),
    })
}

/// Solves all correctors and assembles the tensor.
pub fn homogenize(
    field: &ScalarFieldSample,
    bc: BoundaryCondition,
    definition: TensorDefinition,
    tol: f64,
) -> Result<(HomogenizedTensor, f64)> {
    let correctors = (0..field.grid.dim())
        .map(|i| solve_corrector(field, i, bc, tol))
        .collect::<Result<Vec<_>>>()?;
    let residual = correctors.iter().map(|c| c.residual_norm).fold(0.0, f64::max);
    Ok((apparent_tensor(field, &correctors, definition)?, residual))
}

/// `(1/(b-a) ∫_a^b g)⁻¹` by the composite midpoint rule.
pub fn harmonic_mean_midpoint(inv_coefficient: impl Fn(f64) -> f64, a: f64, b: f64, cells: usize) -> f64 {
    let h = (b - a) / cells as f64;
    let s: f64 = (0..cells).map(|k| inv_coefficient(a + (k as f64 + 0.5) * h)).sum();
    cells as f64 / s
}

fn ex2_sin2_integral(x: f64) -> f64 {
    use std::f64::consts::PI;
    x / 2.0 - (4.0 * PI * x).sin() / (8.0 * PI)
}

/// `∫_a^b A⁻¹` for a realization, in closed form.
pub fn inverse_integral_1d(family: &Analytic1d, r: &Realization1d, a: f64, b: f64) -> f64 {
    use std::f64::consts::PI;
    match family {
        Analytic1d::Ex1Separable { c, freqs, epsilon } => {
            let s: f64 = freqs
                .iter()
                .zip(&r.chi)
                .map(|(phi, chi)| {
                    let k = 4.0 * PI * phi / epsilon;
                    chi * ((b - a) / 2.0 - ((k * b).sin() - (k * a).sin()) / (2.0 * k))
                })
                .sum();
            (c * (b - a) + s) * r.omega.exp()
        }
        Analytic1d::Ex2Stationary { c } => {
            let mut s = c * (b - a);
            let first = a.floor().max(0.0) as usize;
            let mut i = first;
            while (i as f64) < b {
                let lo = a.max(i as f64);
                let hi = b.min(i as f64 + 1.0);
                let chi = r.chi.get(i).copied().unwrap_or(0.0);
                if hi > lo {
                    s += chi * (ex2_sin2_integral(hi) - ex2_sin2_integral(lo));
                }
                i += 1;
            }
            s * r.omega.exp()
        }
        Analytic1d::Ex3NonSeparable { c, epsilon } => {
            let k = r.omega * r.omega_prime;
            c * (1.0 + r.omega) * (b - a) + epsilon / k * ((k * (b / epsilon).sin()).exp() - (k * (a / epsilon).sin()).exp())
        }
    }
}

/// Harmonic mean of `A` over `[a, b]` for one realization of `family`.
///
/// `quadrature_cells = None` uses the closed-form antiderivative; `Some(n)`
/// uses the composite midpoint rule with `n` cells.
pub fn harmonic_mean_1d(
    family: &Analytic1d,
    seed: &SeedPair,
    a: f64,
    b: f64,
    quadrature_cells: Option<usize>,
) -> Result<f64> {
    family.validate()?;
    if !(b > a) {
        return Err(Error::param(format!("interval needs b > a, got [{a}, {b}]")));
    }
    if matches!(family, Analytic1d::Ex2Stationary { .. }) && a < 0.0 {
        return Err(Error::param("Ex2 is realized on x >= 0 only"));
    }
    let r = family.realize(seed, b);
    Ok(harmonic_mean_realized(family, &r, a, b, quadrature_cells))
}

pub fn harmonic_mean_realized(
    family: &Analytic1d,
    r: &Realization1d,
    a: f64,
    b: f64,
    quadrature_cells: Option<usize>,
) -> f64 {
    match quadrature_cells {
        Some(n) => harmonic_mean_midpoint(|x| family.inv_coefficient(r, x), a, b, n),
        None => (b - a) / inverse_integral_1d(family, r, a, b),
    }
}

/// Diagonal apparent tensor of a product coefficient `A₁(x₁) A₂(x₂)` under
/// Dirichlet/no-flow conditions on `origin + [0, η]²`, where each corrector
/// is one-dimensional.
pub fn apparent_tensor_noflow_product(
    a1: impl Fn(f64) -> f64,
    a2: impl Fn(f64) -> f64,
    origin: [f64; 2],
    eta: f64,
    quadrature_cells: usize,
) -> Result<HomogenizedTensor> {
    if !(eta > 0.0) || quadrature_cells == 0 {
        return Err(Error::param("product tensor needs eta > 0 and at least one quadrature cell"));
    }
    let h = eta / quadrature_cells as f64;
    let avg = |f: &dyn Fn(f64) -> f64, o: f64| -> f64 {
        (0..quadrature_cells).map(|k| f(o + (k as f64 + 0.5) * h)).sum::<f64>() / quadrature_cells as f64
    };
    let a1_inv_avg = avg(&|x| 1.0 / a1(x), origin[0]);
    let a1_avg = avg(&a1, origin[0]);
    let a2_inv_avg = avg(&|x| 1.0 / a2(x), origin[1]);
    let a2_avg = avg(&a2, origin[1]);
    Ok(HomogenizedTensor::diagonal(
        &[a2_avg / a1_inv_avg, a1_avg / a2_inv_avg],
        TensorDefinition::FluxAverage,
        eta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn grid2(n: usize, eta: f64) -> UniformGrid {
        UniformGrid::unit_box(2, eta, n).unwrap()
    }

    #[test]
    fn constant_field_reproduces_linear_data() {
        for bc in [BoundaryCondition::DirichletLinear, BoundaryCondition::DirichletNoFlow] {
            let f = ScalarFieldSample::constant(grid2(8, 1.0), 3.0);
            let c = solve_corrector(&f, 1, bc, 1e-10).unwrap();
            for (v, x) in c.values.iter().zip(f.grid.centers()) {
                assert!((v - x[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn laminate_has_constant_flux() {
        let g = UniformGrid::unit_box(1, 1.0, 20).unwrap();
        let f = ScalarFieldSample::from_fn(g.clone(), |x| if x[0] < 0.5 { 1.0 } else { 4.0 });
        let c = solve_corrector(&f, 0, BoundaryCondition::DirichletLinear, 1e-12).unwrap();
        // Piecewise-linear exact solution: slope 1/a_k scaled by the harmonic mean 1.6.
        for (v, x) in c.values.iter().zip(g.centers()) {
            let exact = if x[0] < 0.5 {
                1.6 * x[0]
            } else {
                1.6 * (0.5 + (x[0] - 0.5) / 4.0)
            };
            assert!((v - exact).abs() < 1e-9, "{v} vs {exact}");
        }
        let t = apparent_tensor(&f, &[c], TensorDefinition::FluxAverage).unwrap();
        assert!((t.get(0, 0) - 1.6).abs() < 1e-9);
    }

    #[test]
    fn noflow_separable_corrector_is_columnwise_constant() {
        let g = grid2(16, 1.0);
        let f = ScalarFieldSample::from_fn(g.clone(), |x| (1.5 + (7.0 * x[0]).sin()) * (2.0 + x[1]));
        let c = solve_corrector(&f, 0, BoundaryCondition::DirichletNoFlow, 1e-12).unwrap();
        for i in 0..16 {
            let v0 = c.values[g.index(i, 0)];
            for j in 1..16 {
                assert!((c.values[g.index(i, j)] - v0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_tensor_is_scaled_identity() {
        for bc in [BoundaryCondition::DirichletLinear, BoundaryCondition::DirichletNoFlow] {
            for def in [TensorDefinition::FluxAverage, TensorDefinition::EnergyAverage] {
                let f = ScalarFieldSample::constant(grid2(8, 0.5), 2.5);
                let (t, _) = homogenize(&f, bc, def, 1e-10).unwrap();
                for i in 0..2 {
                    for j in 0..2 {
                        let want = if i == j { 2.5 } else { 0.0 };
                        assert!((t.get(i, j) - want).abs() < 1e-10, "{bc:?} {def:?} {t:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn checkerboard_respects_voigt_reuss() {
        let g = grid2(32, 1.0);
        let f = ScalarFieldSample::from_fn(g, |x| {
            let (i, j) = ((x[0] * 4.0) as usize, (x[1] * 4.0) as usize);
            if (i + j) % 2 == 0 {
                1.0
            } else {
                4.0
            }
        });
        let (t, _) = homogenize(&f, BoundaryCondition::DirichletLinear, TensorDefinition::EnergyAverage, 1e-10).unwrap();
        for ev in t.sym_eigenvalues() {
            assert!((1.6..=2.5).contains(&ev), "{ev}");
        }
        assert!((t.get(0, 1) - t.get(1, 0)).abs() < 1e-12);
    }

    #[test]
    fn non_positive_cell_is_rejected() {
        let mut f = ScalarFieldSample::constant(grid2(4, 1.0), 1.0);
        f.values[5] = -0.1;
        assert!(matches!(
            solve_corrector(&f, 0, BoundaryCondition::DirichletLinear, 1e-10),
            Err(Error::Coercivity { cell: 5, .. })
        ));
    }

    #[test]
    fn mismatched_correctors_are_rejected() {
        let f = ScalarFieldSample::constant(grid2(4, 1.0), 1.0);
        let c = solve_corrector(&f, 0, BoundaryCondition::DirichletLinear, 1e-10).unwrap();
        assert!(apparent_tensor(&f, &[c], TensorDefinition::EnergyAverage).is_err());
    }

    #[test]
    fn ex2_forced_weights_give_closed_form() {
        let fam = Analytic1d::Ex2Stationary { c: 1.0 };
        let r = Realization1d {
            omega: 0.0,
            omega_prime: 0.0,
            chi: vec![0.5; 100],
        };
        let exact = harmonic_mean_realized(&fam, &r, 0.0, 100.0, None);
        assert!((exact - 0.8).abs() < 1e-12);
        let quad = harmonic_mean_realized(&fam, &r, 0.0, 100.0, Some(400_000));
        assert!((quad - 0.8).abs() < 1e-8);
    }

    #[test]
    fn constant_inverse_gives_reciprocal() {
        assert!((harmonic_mean_midpoint(|_| 4.0, 0.0, 3.0, 7) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn closed_forms_match_quadrature() {
        let fams = [
            Analytic1d::ex1(1.0, 20, 0.05, 3).unwrap(),
            Analytic1d::Ex2Stationary { c: 1.0 },
            Analytic1d::Ex3NonSeparable { c: 2.0 * E, epsilon: 0.05 },
        ];
        for fam in &fams {
            for s in 0..3 {
                let seed = SeedPair::shared(s, 1);
                let (a, b) = (0.3, 2.7);
                let exact = harmonic_mean_1d(fam, &seed, a, b, None).unwrap();
                let quad = harmonic_mean_1d(fam, &seed, a, b, Some(1_000_000)).unwrap();
                assert!(((exact - quad) / exact).abs() < 1e-8, "{fam:?}: {exact} vs {quad}");
            }
        }
    }

    #[test]
    fn fv_1d_equals_midpoint_harmonic_mean() {
        let fam = Analytic1d::Ex3NonSeparable { c: 2.0 * E, epsilon: 0.1 };
        let r = fam.realize(&SeedPair::shared(4, 2), 1.0);
        let g = UniformGrid::unit_box(1, 1.0, 128).unwrap();
        let f = fam.sample_on(&r, &g).unwrap();
        let (t, _) = homogenize(&f, BoundaryCondition::DirichletLinear, TensorDefinition::FluxAverage, 1e-12).unwrap();
        let mid = harmonic_mean_realized(&fam, &r, 0.0, 1.0, Some(128));
        assert!(((t.get(0, 0) - mid) / mid).abs() < 1e-10);
    }

    #[test]
    fn product_tensor_simple_cases() {
        let t = apparent_tensor_noflow_product(|_| 3.0, |_| 3.0, [0.0, 0.0], 0.7, 10).unwrap();
        assert!((t.get(0, 0) - 9.0).abs() < 1e-12 && (t.get(1, 1) - 9.0).abs() < 1e-12);
        let t = apparent_tensor_noflow_product(|_| 0.5, |x| x, [0.0, 0.0], 1.0, 1000).unwrap();
        assert!((t.get(0, 0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn rve_grid_rejects_degenerate() {
        assert!(RveGrid::new(1.0, 1, &[0.5, 0.5]).is_err());
        let r = RveGrid::new(0.25, 32, &[0.5, 0.5]).unwrap();
        assert_eq!(r.grid().origin(), &[0.375, 0.375]);
        assert!((r.h - 1.0 / 128.0).abs() < 1e-15);
    }
}
