//! Random coefficient fields.
//!
//! All randomness is drawn from ChaCha8 streams keyed on
//! `(stream_id, seed, tag)`, so the value of any draw depends only on the
//! [`SeedPair`] and its position in the stream. A realization evaluated on a
//! large box and then cropped reproduces the realization on the sub-box.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::UniformGrid;

const TAG_KL: u64 = 0x4b4c;
const TAG_UNIFORM: u64 = 0x554e;
const TAG_NORMAL: u64 = 0x4e4f;
const TAG_FREQ: u64 = 0x4652;
const DOMAIN_MACRO: u64 = 1;
const DOMAIN_MICRO: u64 = 2;
const DOMAIN_STREAM: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn mix_words(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6a09_e667_f3bc_c909, |acc, &w| splitmix(acc ^ splitmix(w)))
}

fn keyed_rng(words: [u64; 4]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Realization index for the macroscopic (`ω`) and microscopic (`ω′`)
/// randomness, namespaced by an experiment stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedPair {
    pub macro_seed: u64,
    pub micro_seed: u64,
    pub stream_id: u64,
}

impl SeedPair {
    pub fn new(macro_seed: u64, micro_seed: u64, stream_id: u64) -> Self {
        Self {
            macro_seed,
            micro_seed,
            stream_id,
        }
    }

    /// Same realization index for both scales.
    pub fn shared(index: u64, stream_id: u64) -> Self {
        Self::new(index, index, stream_id)
    }

    pub fn macro_rng(&self, tag: u64) -> ChaCha8Rng {
        keyed_rng([self.stream_id, self.macro_seed, tag, DOMAIN_MACRO])
    }

    pub fn micro_rng(&self, tag: u64) -> ChaCha8Rng {
        keyed_rng([self.stream_id, self.micro_seed, tag, DOMAIN_MICRO])
    }

    /// `k`-th uniform draw in `[0, 1)` of the macroscopic stream.
    pub fn macro_uniform(&self, k: u64) -> f64 {
        let mut rng = self.macro_rng(TAG_UNIFORM);
        rng.set_word_pos(2 * k as u128);
        unit_f64(rng.next_u64())
    }

    /// `k`-th uniform draw in `[0, 1)` of the microscopic stream.
    pub fn micro_uniform(&self, k: u64) -> f64 {
        let mut rng = self.micro_rng(TAG_UNIFORM);
        rng.set_word_pos(2 * k as u128);
        unit_f64(rng.next_u64())
    }

    /// First `n` standard normal draws of the macroscopic stream.
    pub fn macro_normals(&self, n: usize) -> Vec<f64> {
        let mut rng = self.macro_rng(TAG_NORMAL);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }
}

/// Stationary Gaussian covariance `sigma² exp(-|x - x′|² / corr_len²)`.
///
/// `corr_len` is the physical correlation length: a covariance written with
/// `ε² τ₀²` in the denominator has `corr_len = ε τ₀`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CovarianceSpec {
    pub sigma: f64,
    pub corr_len: f64,
    pub mean: f64,
}

impl CovarianceSpec {
    pub fn new(sigma: f64, corr_len: f64, mean: f64) -> Result<Self> {
        if !(sigma > 0.0) || !(corr_len > 0.0) || !mean.is_finite() {
            return Err(Error::param(format!(
                "covariance needs sigma > 0 and corr_len > 0, got sigma={sigma}, corr_len={corr_len}"
            )));
        }
        Ok(Self {
            sigma,
            corr_len,
            mean,
        })
    }

    pub fn covariance(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.sigma * self.sigma * (-d2 / (self.corr_len * self.corr_len)).exp()
    }

    fn fingerprint(&self, mode_tolerance: f64) -> u64 {
        mix_words(&[
            self.sigma.to_bits(),
            self.corr_len.to_bits(),
            self.mean.to_bits(),
            mode_tolerance.to_bits(),
        ])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoefficientBounds {
    pub a_min: f64,
    pub a_max: f64,
}

impl CoefficientBounds {
    pub fn new(a_min: f64, a_max: f64) -> Result<Self> {
        if !(a_min > 0.0) || !(a_max >= a_min) {
            return Err(Error::param(format!("bounds need 0 < a_min <= a_max, got [{a_min}, {a_max}]")));
        }
        Ok(Self { a_min, a_max })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.a_min && v <= self.a_max
    }
}

/// Piecewise-constant scalar field on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarFieldSample {
    pub grid: UniformGrid,
    pub values: Vec<f64>,
    pub bounds: Option<CoefficientBounds>,
}

impl ScalarFieldSample {
    pub fn new(grid: UniformGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "{} values for a grid of {} cells",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self {
            grid,
            values,
            bounds: None,
        })
    }

    pub fn constant(grid: UniformGrid, value: f64) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![value; n],
            bounds: None,
        }
    }

    /// Evaluates `f` at every cell center.
    pub fn from_fn(grid: UniformGrid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = grid.centers().map(f).collect();
        Self {
            grid,
            values,
            bounds: None,
        }
    }

    pub fn with_bounds(mut self, bounds: CoefficientBounds) -> Self {
        self.bounds = Some(bounds);
        self
    }

    /// Restriction to the first `n` cells per dimension.
    pub fn crop(&self, n: usize) -> Result<Self> {
        let grid = self.grid.crop(n)?;
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.ny() {
            for i in 0..grid.nx() {
                values.push(self.values[self.grid.index(i, j)]);
            }
        }
        Ok(Self {
            grid,
            values,
            bounds: self.bounds,
        })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// A source of coefficient realizations on a fixed grid.
pub trait CoefficientSampler: Send + Sync {
    fn grid(&self) -> &UniformGrid;
    fn sample(&self, seed: &SeedPair) -> Result<ScalarFieldSample>;
}

/// One-dimensional Nyström factor: eigenpairs of the unit-variance
/// correlation matrix along one axis, sorted by decreasing eigenvalue.
#[derive(Clone, Debug, PartialEq)]
struct AxisModes {
    n: usize,
    values: Vec<f64>,
    /// Column-major `n × values.len()`.
    vectors: Vec<f64>,
}

impl AxisModes {
    fn compute(grid: &UniformGrid, axis: usize, corr_len: f64) -> Result<Self> {
        let n = grid.cells()[axis];
        let h = grid.h();
        let c = DMatrix::from_fn(n, n, |a, b| {
            let d = (a as f64 - b as f64) * h;
            (-(d * d) / (corr_len * corr_len)).exp()
        });
        let eig = SymmetricEigen::try_new(c, 1e-14, 10_000).ok_or_else(|| {
            Error::Numerical(format!("symmetric eigen-decomposition of {n}x{n} correlation matrix did not converge"))
        })?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut values = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n * n);
        for k in order {
            let lam = eig.eigenvalues[k];
            if !lam.is_finite() {
                return Err(Error::Numerical(format!("non-finite eigenvalue {lam}")));
            }
            values.push(lam.max(0.0));
            let col = eig.eigenvectors.column(k);
            // Sign convention: first non-negligible entry positive.
            let sign = col.iter().find(|v| v.abs() > 1e-12).map_or(1.0, |v| v.signum());
            vectors.extend(col.iter().map(|v| v * sign));
        }
        Ok(Self { n, values, vectors })
    }

    fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.n..(k + 1) * self.n]
    }

    fn truncate(&mut self, keep: usize) {
        self.values.truncate(keep);
        self.vectors.truncate(keep * self.n);
    }
}

/// Truncated Karhunen–Loève basis of a Gaussian covariance on a grid.
///
/// The covariance is assembled on cell centers; with uniform cell measures
/// the Nyström operator of a Gaussian kernel is the Kronecker product of
/// per-axis correlation matrices, so its eigenpairs are products of 1D
/// eigenpairs. Modes are kept while `λ >= mode_tolerance · λ_max`.
#[derive(Clone, Debug)]
pub struct KlBasis {
    spec: CovarianceSpec,
    grid: UniformGrid,
    mode_tolerance: f64,
    axes: Vec<AxisModes>,
    /// Retained modes as (axis-0 index, axis-1 index, eigenvalue), non-increasing.
    modes: Vec<(usize, usize, f64)>,
}

const CACHE_MAGIC: &[u8; 8] = b"KLBASIS1";

impl KlBasis {
    pub fn new(spec: CovarianceSpec, grid: UniformGrid, mode_tolerance: f64) -> Result<Self> {
        if !(mode_tolerance > 0.0 && mode_tolerance < 1.0) {
            return Err(Error::param(format!("mode_tolerance must lie in (0,1), got {mode_tolerance}")));
        }
        if grid.h() > spec.corr_len / 2.0 {
            return Err(Error::Resolution {
                h: grid.h(),
                corr_len: spec.corr_len,
            });
        }
        let axes = (0..grid.dim())
            .map(|a| AxisModes::compute(&grid, a, spec.corr_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_axes(spec, grid, mode_tolerance, axes))
    }

    fn from_axes(spec: CovarianceSpec, grid: UniformGrid, mode_tolerance: f64, mut axes: Vec<AxisModes>) -> Self {
        let var = spec.sigma * spec.sigma;
        let mut modes = Vec::new();
        if axes.len() == 1 {
            let top = axes[0].values[0];
            for (k, &l) in axes[0].values.iter().enumerate() {
                if l >= mode_tolerance * top && l > 0.0 {
                    modes.push((k, 0, var * l));
                }
            }
        } else {
            let top = axes[0].values[0] * axes[1].values[0];
            for (a, &la) in axes[0].values.iter().enumerate() {
                for (b, &lb) in axes[1].values.iter().enumerate() {
                    let l = la * lb;
                    if l >= mode_tolerance * top && l > 0.0 {
                        modes.push((a, b, var * l));
                    }
                }
            }
        }
        modes.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
        // Drop axis modes that no retained product uses.
        let used0 = modes.iter().map(|m| m.0).max().map_or(0, |m| m + 1);
        axes[0].truncate(used0);
        if axes.len() == 2 {
            let used1 = modes.iter().map(|m| m.1).max().map_or(0, |m| m + 1);
            axes[1].truncate(used1);
        }
        Self {
            spec,
            grid,
            mode_tolerance,
            axes,
            modes,
        }
    }

    pub fn grid(&self) -> &UniformGrid {
        &self.grid
    }

    pub fn spec(&self) -> &CovarianceSpec {
        &self.spec
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    /// Retained eigenvalues of the covariance matrix, non-increasing.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.2).collect()
    }

    /// Field `mean + Σ_k sqrt(λ_k) ξ_k e_k` for the given standard normal coefficients.
    pub fn synthesize(&self, xi: &[f64]) -> Vec<f64> {
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        let mut out = vec![self.spec.mean; nx * ny];
        if self.axes.len() == 1 {
            for (&(a, _, lam), &z) in self.modes.iter().zip(xi) {
                let amp = lam.sqrt() * z;
                for (o, &u) in out.iter_mut().zip(self.axes[0].vector(a)) {
                    *o += amp * u;
                }
            }
            return out;
        }
        // Group by the axis-1 mode: field += Σ_b (Σ_a c_ab u_a) ⊗ v_b.
        let nb = self.axes[1].values.len();
        let mut partial = vec![vec![0.0; nx]; nb];
        let mut touched = vec![false; nb];
        for (&(a, b, lam), &z) in self.modes.iter().zip(xi) {
            let amp = lam.sqrt() * z;
            touched[b] = true;
            for (p, &u) in partial[b].iter_mut().zip(self.axes[0].vector(a)) {
                *p += amp * u;
            }
        }
        for b in 0..nb {
            if !touched[b] {
                continue;
            }
            let v = self.axes[1].vector(b);
            for j in 0..ny {
                let vj = v[j];
                let row = &mut out[j * nx..(j + 1) * nx];
                for (o, &p) in row.iter_mut().zip(&partial[b]) {
                    *o += p * vj;
                }
            }
        }
        out
    }

    /// Writes the decomposition as little-endian 64-bit words: magic, spec
    /// hash, grid hash, dimension, then per axis `n`, `k`, `k` eigenvalues and
    /// the `n × k` column-major eigenvector array.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        let push = |buf: &mut Vec<u8>, w: u64| buf.extend_from_slice(&w.to_le_bytes());
        push(&mut buf, self.spec.fingerprint(self.mode_tolerance));
        push(&mut buf, self.grid.fingerprint());
        push(&mut buf, self.axes.len() as u64);
        for ax in &self.axes {
            push(&mut buf, ax.n as u64);
            push(&mut buf, ax.values.len() as u64);
            for v in ax.values.iter().chain(&ax.vectors) {
                push(&mut buf, v.to_bits());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::Cache(format!("{}: {e}", path.display())))?;
        f.write_all(&buf).map_err(|e| Error::Cache(e.to_string()))
    }

    /// Loads a cache written by [`KlBasis::write_cache`], rejecting any file
    /// whose header does not match `spec`, `grid` and `mode_tolerance`.
    pub fn read_cache(path: &Path, spec: CovarianceSpec, grid: UniformGrid, mode_tolerance: f64) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::Cache(format!("{}: {e}", path.display())))?;
        if bytes.len() < 8 || &bytes[..8] != CACHE_MAGIC || (bytes.len() - 8) % 8 != 0 {
            return Err(Error::Cache("not a KL cache file".into()));
        }
        let words: Vec<u64> = bytes[8..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut it = words.into_iter();
        let mut next = || it.next().ok_or_else(|| Error::Cache("truncated KL cache".into()));
        if next()? != spec.fingerprint(mode_tolerance) {
            return Err(Error::Cache("covariance spec does not match cache header".into()));
        }
        if next()? != grid.fingerprint() {
            return Err(Error::Cache("grid does not match cache header".into()));
        }
        let dim = next()? as usize;
        if dim != grid.dim() {
            return Err(Error::Cache("dimension mismatch".into()));
        }
        let mut axes = Vec::with_capacity(dim);
        for a in 0..dim {
            let n = next()? as usize;
            let k = next()? as usize;
            if n != grid.cells()[a] || k == 0 || k > n {
                return Err(Error::Cache("axis size mismatch".into()));
            }
            let values = (0..k).map(|_| next().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            let vectors = (0..n * k).map(|_| next().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            axes.push(AxisModes { n, values, vectors });
        }
        Ok(Self::from_axes(spec, grid, mode_tolerance, axes))
    }
}

/// Stationary Gaussian random field sampled through a cached KL basis.
#[derive(Clone, Debug)]
pub struct GaussianField {
    basis: KlBasis,
}

impl GaussianField {
    pub fn new(spec: CovarianceSpec, grid: UniformGrid, mode_tolerance: f64) -> Result<Self> {
        Ok(Self {
            basis: KlBasis::new(spec, grid, mode_tolerance)?,
        })
    }

    pub fn from_basis(basis: KlBasis) -> Self {
        Self { basis }
    }

    pub fn basis(&self) -> &KlBasis {
        &self.basis
    }

    fn standard_normals(&self, seed: &SeedPair) -> Vec<f64> {
        let mut rng = seed.micro_rng(TAG_KL);
        (0..self.basis.mode_count()).map(|_| rng.sample(StandardNormal)).collect()
    }
}

impl CoefficientSampler for GaussianField {
    fn grid(&self) -> &UniformGrid {
        &self.basis.grid
    }

    fn sample(&self, seed: &SeedPair) -> Result<ScalarFieldSample> {
        let values = self.basis.synthesize(&self.standard_normals(seed));
        ScalarFieldSample::new(self.basis.grid.clone(), values)
    }
}

/// `exp(K)` for a Gaussian field `K`.
#[derive(Clone, Debug)]
pub struct LogNormalField {
    log_field: GaussianField,
}

impl LogNormalField {
    pub fn new(log_spec: CovarianceSpec, grid: UniformGrid, mode_tolerance: f64) -> Result<Self> {
        Ok(Self {
            log_field: GaussianField::new(log_spec, grid, mode_tolerance)?,
        })
    }

    pub fn from_log_field(log_field: GaussianField) -> Self {
        Self { log_field }
    }
}

impl CoefficientSampler for LogNormalField {
    fn grid(&self) -> &UniformGrid {
        self.log_field.grid()
    }

    fn sample(&self, seed: &SeedPair) -> Result<ScalarFieldSample> {
        let mut s = self.log_field.sample(seed)?;
        for v in &mut s.values {
            *v = v.exp();
        }
        Ok(s)
    }
}

pub fn sample_gaussian_field(
    spec: CovarianceSpec,
    grid: &UniformGrid,
    seed: &SeedPair,
    mode_tolerance: f64,
) -> Result<ScalarFieldSample> {
    GaussianField::new(spec, grid.clone(), mode_tolerance)?.sample(seed)
}

pub fn sample_lognormal_field(
    spec: CovarianceSpec,
    grid: &UniformGrid,
    seed: &SeedPair,
    mode_tolerance: f64,
) -> Result<ScalarFieldSample> {
    LogNormalField::new(spec, grid.clone(), mode_tolerance)?.sample(seed)
}

/// Analytic one-dimensional coefficient families, given through `A⁻¹`.
#[derive(Clone, Debug, PartialEq)]
pub enum Analytic1d {
    /// `A⁻¹ = [C + Σ_i χ_i sin²(2π x φ_i / ε)] exp(ω)`, `ω, χ_i ~ U[0,1]`.
    Ex1Separable { c: f64, freqs: Vec<f64>, epsilon: f64 },
    /// `A⁻¹ = (C + Σ_i χ_i 1_[i,i+1)(x) sin²(2π x)) exp(ω)`, `ω, χ_i ~ U[0,1]`.
    Ex2Stationary { c: f64 },
    /// `A⁻¹ = C(1 + ω) + exp(ω ω′ sin(x/ε)) cos(x/ε)`, `ω, ω′ ~ U[0.5,1]`.
    Ex3NonSeparable { c: f64, epsilon: f64 },
}

/// The random variables of one realization of an [`Analytic1d`] family.
#[derive(Clone, Debug, PartialEq)]
pub struct Realization1d {
    pub omega: f64,
    pub omega_prime: f64,
    /// Ex1: one weight per sine term. Ex2: one weight per unit cell `[i, i+1)`, `i >= 0`.
    pub chi: Vec<f64>,
}

impl Analytic1d {
    /// Ex1 with `n_terms` frequencies drawn uniformly in `[0.2, 2]` from `stream_id`.
    pub fn ex1(c: f64, n_terms: usize, epsilon: f64, stream_id: u64) -> Result<Self> {
        let mut rng = keyed_rng([stream_id, 0, TAG_FREQ, DOMAIN_STREAM]);
        let freqs = (0..n_terms).map(|_| 0.2 + 1.8 * unit_f64(rng.next_u64())).collect();
        let fam = Analytic1d::Ex1Separable { c, freqs, epsilon };
        fam.validate()?;
        Ok(fam)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Analytic1d::Ex1Separable { c, freqs, epsilon } => {
                if !(*c > 0.0) || !(*epsilon > 0.0) {
                    return Err(Error::param("Ex1 needs C > 0 and epsilon > 0"));
                }
                if freqs.iter().any(|f| !(0.2..=2.0).contains(f)) {
                    return Err(Error::param("Ex1 frequencies must lie in [0.2, 2]"));
                }
            }
            Analytic1d::Ex2Stationary { c } => {
                if !(*c > 0.0) {
                    return Err(Error::param("Ex2 needs C > 0"));
                }
            }
            Analytic1d::Ex3NonSeparable { c, epsilon } => {
                if !(*c >= 2.0 * std::f64::consts::E) || !(*epsilon > 0.0) {
                    return Err(Error::param("Ex3 needs C >= 2e and epsilon > 0"));
                }
            }
        }
        Ok(())
    }

    /// Draws the random variables needed to evaluate the family on `[0, extent]`.
    pub fn realize(&self, seed: &SeedPair, extent: f64) -> Realization1d {
        match self {
            Analytic1d::Ex1Separable { freqs, .. } => {
                let mut rng = seed.micro_rng(TAG_UNIFORM);
                Realization1d {
                    omega: seed.macro_uniform(0),
                    omega_prime: 0.0,
                    chi: (0..freqs.len()).map(|_| unit_f64(rng.next_u64())).collect(),
                }
            }
            Analytic1d::Ex2Stationary { .. } => {
                let cells = extent.max(0.0).ceil() as usize;
                let mut rng = seed.micro_rng(TAG_UNIFORM);
                Realization1d {
                    omega: seed.macro_uniform(0),
                    omega_prime: 0.0,
                    chi: (0..cells).map(|_| unit_f64(rng.next_u64())).collect(),
                }
            }
            Analytic1d::Ex3NonSeparable { .. } => Realization1d {
                omega: 0.5 + 0.5 * seed.macro_uniform(0),
                omega_prime: 0.5 + 0.5 * seed.micro_uniform(0),
                chi: Vec::new(),
            },
        }
    }

    /// Pointwise `A⁻¹(x)` for a realization.
    pub fn inv_coefficient(&self, r: &Realization1d, x: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            Analytic1d::Ex1Separable { c, freqs, epsilon } => {
                let s: f64 = freqs
                    .iter()
                    .zip(&r.chi)
                    .map(|(phi, chi)| chi * (2.0 * PI * x * phi / epsilon).sin().powi(2))
                    .sum();
                (c + s) * r.omega.exp()
            }
            Analytic1d::Ex2Stationary { c } => {
                let cell = x.floor();
                let chi = if cell >= 0.0 {
                    r.chi.get(cell as usize).copied().unwrap_or(0.0)
                } else {
                    0.0
                };
                (c + chi * (2.0 * PI * x).sin().powi(2)) * r.omega.exp()
            }
            Analytic1d::Ex3NonSeparable { c, epsilon } => {
                let t = x / epsilon;
                c * (1.0 + r.omega) + (r.omega * r.omega_prime * t.sin()).exp() * t.cos()
            }
        }
    }

    /// Coercivity bounds of `A` (not `A⁻¹`) over all realizations.
    pub fn bounds(&self) -> CoefficientBounds {
        let e = std::f64::consts::E;
        let (inv_lo, inv_hi) = match self {
            Analytic1d::Ex1Separable { c, freqs, .. } => (*c, (c + freqs.len() as f64) * e),
            Analytic1d::Ex2Stationary { c } => (*c, (c + 1.0) * e),
            Analytic1d::Ex3NonSeparable { c, .. } => (1.5 * c - e, 2.0 * c + e),
        };
        CoefficientBounds {
            a_min: 1.0 / inv_hi,
            a_max: 1.0 / inv_lo,
        }
    }

    /// Samples `A = 1/A⁻¹` at the cell centers of a 1D grid.
    pub fn sample_on(&self, r: &Realization1d, grid: &UniformGrid) -> Result<ScalarFieldSample> {
        if grid.dim() != 1 {
            return Err(Error::Dimension("analytic families are one-dimensional".into()));
        }
        Ok(ScalarFieldSample::from_fn(grid.clone(), |x| 1.0 / self.inv_coefficient(r, x[0])).with_bounds(self.bounds()))
    }
}

pub fn eval_analytic_1d(family: &Analytic1d, x: f64, seed: &SeedPair) -> Result<f64> {
    family.validate()?;
    if matches!(family, Analytic1d::Ex2Stationary { .. }) && x < 0.0 {
        return Err(Error::param("Ex2 is realized on x >= 0 only"));
    }
    let r = family.realize(seed, x + 1.0);
    Ok(family.inv_coefficient(&r, x))
}

/// Product coefficient `A(x) = A₁(x₁) A₂(x₂)` with
///
/// - `A₁⁻¹ = C(1 + ω) + exp(ω ω′ sin(x₁/ε)) cos(x₁/ε)`,
/// - `A₂ = C(1 + e^{5ω}) x₂ + (1 + x₂) exp((1 + x₂) ω ω′ sin(x₂/ε)) cos(x₂/ε)`,
///
/// `ω, ω′ ~ U[0.5, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProductFactors2d {
    pub c: f64,
    pub epsilon: f64,
}

impl ProductFactors2d {
    pub fn new(c: f64, epsilon: f64) -> Result<Self> {
        if !(c >= 2.0 * std::f64::consts::E) || !(epsilon > 0.0) {
            return Err(Error::param("product factors need C >= 2e and epsilon > 0"));
        }
        Ok(Self { c, epsilon })
    }

    /// `(ω, ω′)` for a seed.
    pub fn realize(&self, seed: &SeedPair) -> (f64, f64) {
        (0.5 + 0.5 * seed.macro_uniform(0), 0.5 + 0.5 * seed.micro_uniform(0))
    }

    pub fn a1_inv(&self, omega: (f64, f64), x1: f64) -> f64 {
        let t = x1 / self.epsilon;
        self.c * (1.0 + omega.0) + (omega.0 * omega.1 * t.sin()).exp() * t.cos()
    }

    pub fn a2(&self, omega: (f64, f64), x2: f64) -> f64 {
        let t = x2 / self.epsilon;
        let k = omega.0 * omega.1;
        self.c * (1.0 + (5.0 * omega.0).exp()) * x2 + (1.0 + x2) * ((1.0 + x2) * k * t.sin()).exp() * t.cos()
    }

    /// `∫₀^η A₁⁻¹` in closed form.
    pub fn a1_inv_integral(&self, omega: (f64, f64), eta: f64) -> f64 {
        let k = omega.0 * omega.1;
        self.c * (1.0 + omega.0) * eta + self.epsilon / k * ((k * (eta / self.epsilon).sin()).exp() - 1.0)
    }
}

/// Macroscopic random factor `Ã(x, ω)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacroField {
    /// `exp(ω)`, `ω ~ N(0,1)`, constant in `x`.
    ExpGaussian,
    /// `2 + |ω₁ sin(2πx₁)| + |ω₂ sin(2πx₂)| + |ω₃ sin(πx₁)|`, `ω_k ~ N(0,1)`.
    SineAbs,
}

impl MacroField {
    pub fn draw_count(self) -> usize {
        match self {
            MacroField::ExpGaussian => 1,
            MacroField::SineAbs => 3,
        }
    }

    pub fn realize(self, seed: &SeedPair) -> Vec<f64> {
        seed.macro_normals(self.draw_count())
    }

    pub fn value_with(self, omega: &[f64], x: &[f64]) -> f64 {
        use std::f64::consts::PI;
        match self {
            MacroField::ExpGaussian => omega[0].exp(),
            MacroField::SineAbs => {
                let x2 = x.get(1).copied().unwrap_or(0.0);
                2.0 + (omega[0] * (2.0 * PI * x[0]).sin()).abs()
                    + (omega[1] * (2.0 * PI * x2).sin()).abs()
                    + (omega[2] * (PI * x[0]).sin()).abs()
            }
        }
    }
}

pub fn eval_macro_field(family: MacroField, x: &[f64], seed: &SeedPair) -> Result<f64> {
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::param(format!("macroscopic point {x:?} outside the unit box")));
    }
    Ok(family.value_with(&family.realize(seed), x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, PI, SQRT_2};

    fn seed(i: u64) -> SeedPair {
        SeedPair::shared(i, 7)
    }

    #[test]
    fn draws_depend_only_on_seed() {
        let a = seed(3);
        assert_eq!(a.macro_uniform(5), seed(3).macro_uniform(5));
        assert_ne!(a.macro_uniform(5), seed(4).macro_uniform(5));
        assert_ne!(a.macro_uniform(0), a.micro_uniform(0));
        let mut rng = a.micro_rng(TAG_UNIFORM);
        let seq: Vec<f64> = (0..4).map(|_| unit_f64(rng.next_u64())).collect();
        assert_eq!(seq[3], a.micro_uniform(3));
    }

    #[test]
    fn ex1_with_no_terms_and_zero_omega_is_c() {
        let fam = Analytic1d::Ex1Separable {
            c: 1.7,
            freqs: vec![],
            epsilon: 0.01,
        };
        let r = Realization1d {
            omega: 0.0,
            omega_prime: 0.0,
            chi: vec![],
        };
        assert_eq!(fam.inv_coefficient(&r, 0.3), 1.7);
    }

    #[test]
    fn ex3_inverse_coefficient_stays_positive() {
        let c = 2.0 * E;
        let fam = Analytic1d::Ex3NonSeparable { c, epsilon: 0.01 };
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for a in 0..=20 {
            for b in 0..=20 {
                let r = Realization1d {
                    omega: 0.5 + a as f64 / 40.0,
                    omega_prime: 0.5 + b as f64 / 40.0,
                    chi: vec![],
                };
                for k in 0..2000 {
                    let v = fam.inv_coefficient(&r, k as f64 * 1e-4);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        assert!(lo >= 2.0 * E - 1e-12 && hi <= 5.0 * E + 1e-12, "range [{lo}, {hi}]");
        assert!(lo > 0.0);
    }

    #[test]
    fn ex2_period_average_with_half_weights() {
        let fam = Analytic1d::Ex2Stationary { c: 1.0 };
        let r = Realization1d {
            omega: 0.0,
            omega_prime: 0.0,
            chi: vec![0.5; 3],
        };
        let n = 100_000;
        let avg: f64 = (0..n).map(|k| fam.inv_coefficient(&r, 1.0 + (k as f64 + 0.5) / n as f64)).sum::<f64>() / n as f64;
        assert!((avg - 1.25).abs() < 1e-9);
    }

    #[test]
    fn analytic_families_respect_bounds() {
        let fams = [
            Analytic1d::ex1(1.0, 20, 0.0125, 11).unwrap(),
            Analytic1d::Ex2Stationary { c: 1.0 },
            Analytic1d::Ex3NonSeparable { c: 2.0 * E, epsilon: 0.0125 },
        ];
        for fam in &fams {
            let b = fam.bounds();
            for s in 0..20 {
                let r = fam.realize(&seed(s), 10.0);
                for k in 0..500 {
                    let a = 1.0 / fam.inv_coefficient(&r, k as f64 * 0.0193);
                    assert!(b.contains(a), "{fam:?}: {a} outside {b:?}");
                }
            }
        }
    }

    #[test]
    fn ex1_frequencies_are_frozen_per_stream() {
        let a = Analytic1d::ex1(1.0, 20, 0.01, 5).unwrap();
        let b = Analytic1d::ex1(1.0, 20, 0.01, 5).unwrap();
        let c = Analytic1d::ex1(1.0, 20, 0.01, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn ex3_rejects_small_c() {
        let fam = Analytic1d::Ex3NonSeparable { c: 1.0, epsilon: 0.1 };
        assert!(eval_analytic_1d(&fam, 0.2, &seed(0)).is_err());
    }

    #[test]
    fn sine_abs_values() {
        let s = seed(9);
        assert_eq!(eval_macro_field(MacroField::SineAbs, &[0.0, 0.0], &s).unwrap(), 2.0);
        let v = MacroField::SineAbs.value_with(&[1.0, 1.0, 1.0], &[0.25, 0.25]);
        assert!((v - (4.0 + SQRT_2 / 2.0)).abs() < 1e-14);
        assert!(eval_macro_field(MacroField::SineAbs, &[1.5, 0.0], &s).is_err());
    }

    #[test]
    fn exp_gaussian_is_constant_in_space() {
        let s = seed(2);
        let a = eval_macro_field(MacroField::ExpGaussian, &[0.1, 0.2], &s).unwrap();
        let b = eval_macro_field(MacroField::ExpGaussian, &[0.9, 0.7], &s).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
    }

    fn rve_grid(n: usize) -> UniformGrid {
        UniformGrid::unit_box(2, n as f64 / 128.0, n).unwrap()
    }

    #[test]
    fn kl_eigenvalues_are_nonnegative_and_sorted() {
        let spec = CovarianceSpec::new(SQRT_2, 0.04, 10.0).unwrap();
        let basis = KlBasis::new(spec, rve_grid(32), 1e-4).unwrap();
        let ev = basis.eigenvalues();
        assert!(ev.len() > 10);
        assert!(ev.iter().all(|&l| l >= 0.0));
        assert!(ev.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let spec = CovarianceSpec::new(1.0, 0.04, 0.0).unwrap();
        let grid = UniformGrid::unit_box(2, 0.5, 8).unwrap();
        assert!(matches!(KlBasis::new(spec, grid, 1e-4), Err(Error::Resolution { .. })));
    }

    #[test]
    fn vanishing_variance_gives_constant_field() {
        let spec = CovarianceSpec::new(1e-12, 0.04, 10.0).unwrap();
        let s = sample_gaussian_field(spec, &rve_grid(16), &seed(1), 1e-4).unwrap();
        assert!(s.values.iter().all(|v| (v - 10.0).abs() < 1e-8));
        let log_spec = CovarianceSpec::new(1e-12, 0.04, 0.0).unwrap();
        let s = sample_lognormal_field(log_spec, &rve_grid(16), &seed(1), 1e-4).unwrap();
        assert!(s.values.iter().all(|v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn gaussian_mean_within_three_standard_errors() {
        let spec = CovarianceSpec::new(SQRT_2, 0.04, 10.0).unwrap();
        let field = GaussianField::new(spec, rve_grid(16), 1e-4).unwrap();
        let n = 2000;
        let means: Vec<f64> = (0..n).map(|k| field.sample(&seed(k)).unwrap().mean()).collect();
        let m = means.iter().sum::<f64>() / n as f64;
        let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((m - 10.0).abs() < 3.0 * se, "mean {m}, se {se}");
    }

    #[test]
    fn gaussian_pointwise_variance_matches_sigma_squared() {
        let spec = CovarianceSpec::new(SQRT_2, 0.04, 10.0).unwrap();
        let field = GaussianField::new(spec, rve_grid(16), 1e-4).unwrap();
        let n = 5000;
        let cells = field.grid().len();
        let mut s1 = vec![0.0; cells];
        let mut s2 = vec![0.0; cells];
        for k in 0..n {
            let v = field.sample(&seed(k)).unwrap().values;
            for c in 0..cells {
                s1[c] += v[c];
                s2[c] += v[c] * v[c];
            }
        }
        let var: f64 = (0..cells)
            .map(|c| (s2[c] - s1[c] * s1[c] / n as f64) / (n - 1) as f64)
            .sum::<f64>()
            / cells as f64;
        assert!((var - 2.0).abs() < 0.05 * 2.0, "variance {var}");
    }

    #[test]
    fn lognormal_is_positive_with_unit_median() {
        let log_spec = CovarianceSpec::new(SQRT_2, 0.04 * SQRT_2, 0.0).unwrap();
        let field = LogNormalField::new(log_spec, rve_grid(16), 1e-4).unwrap();
        let mut vals: Vec<f64> = (0..5000)
            .map(|k| {
                let s = field.sample(&seed(k)).unwrap();
                assert!(s.values.iter().all(|&v| v > 0.0));
                s.values[field.grid().index(8, 8)]
            })
            .collect();
        vals.sort_by(f64::total_cmp);
        let median = 0.5 * (vals[2499] + vals[2500]);
        assert!((median - 1.0).abs() < 0.1, "median {median}");
    }

    #[test]
    fn cropping_a_large_realization_matches_restriction() {
        let spec = CovarianceSpec::new(SQRT_2, 0.04, 10.0).unwrap();
        let field = GaussianField::new(spec, rve_grid(32), 1e-4).unwrap();
        let big = field.sample(&seed(4)).unwrap();
        let small = big.crop(16).unwrap();
        for j in 0..16 {
            for i in 0..16 {
                assert_eq!(small.values[small.grid.index(i, j)], big.values[big.grid.index(i, j)]);
            }
        }
    }

    #[test]
    fn kl_cache_round_trip() {
        let spec = CovarianceSpec::new(SQRT_2, 0.04, 10.0).unwrap();
        let grid = rve_grid(16);
        let basis = KlBasis::new(spec, grid.clone(), 1e-4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kl.bin");
        basis.write_cache(&path).unwrap();
        let loaded = KlBasis::read_cache(&path, spec, grid.clone(), 1e-4).unwrap();
        assert_eq!(loaded.eigenvalues(), basis.eigenvalues());
        let a = GaussianField::from_basis(basis).sample(&seed(3)).unwrap();
        let b = GaussianField::from_basis(loaded).sample(&seed(3)).unwrap();
        assert_eq!(a, b);
        let other = CovarianceSpec::new(1.0, 0.04, 10.0).unwrap();
        assert!(KlBasis::read_cache(&path, other, grid, 1e-4).is_err());
    }

    #[test]
    fn one_dimensional_kl_field() {
        let spec = CovarianceSpec::new(1.0, 0.1, 0.0).unwrap();
        let grid = UniformGrid::unit_box(1, 1.0, 64).unwrap();
        let field = GaussianField::new(spec, grid, 1e-6).unwrap();
        let s = field.sample(&seed(0)).unwrap();
        assert_eq!(s.values.len(), 64);
        // Nyström covariance of a 1D field: Σ λ_k e_k(x)² ≈ σ² at every cell.
        let basis = field.basis();
        let ones = basis.eigenvalues().iter().sum::<f64>();
        assert!((ones / 64.0 - 1.0).abs() < 1e-3);
        let _ = PI;
    }
}
